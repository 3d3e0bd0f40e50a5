#include "imode/tape.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <numbers>

namespace imode::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Neg: return "neg";
    case Op::Mul: return "mul";
    case Op::SMul: return "smul";
    case Op::Scale: return "scale";
    case Op::AffC: return "affc";
    case Op::LinComb: return "lincomb";
    case Op::MatMul: return "matmul";
    case Op::Outer: return "outer";
    case Op::Affine: return "affine";
    case Op::Dot: return "dot";
    case Op::Sum: return "sum";
    case Op::ColSum: return "colsum";
    case Op::Softplus: return "softplus";
    case Op::Sigmoid: return "sigmoid";
    case Op::Exp: return "exp";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::WrapAngle: return "wrap_angle";
    case Op::Square: return "square";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Pad: return "pad";
    case Op::Row: return "row";
    case Op::PadRow: return "pad_row";
    case Op::RowRep: return "rowrep";
    case Op::HCat: return "hcat";
    case Op::SFill: return "sfill";
    case Op::Reshape: return "reshape";
  }
  return "?";
}

const Tensor& Var::value() const { return tape->nodes[size_t(id)].value; }

std::vector<double> Tape::acquire_buf(size_t n) {
  if (!buf_pool.empty()) {
    std::vector<double> b = std::move(buf_pool.back());
    buf_pool.pop_back();
    b.resize(n);
    return b;
  }
  return std::vector<double>(n);
}

void Tape::release_buf(std::vector<double>&& b) {
  if (b.capacity() > 0) buf_pool.push_back(std::move(b));
}

void Tape::truncate(size_t m) {
  for (size_t i = m; i < nodes.size(); ++i) {
    release_buf(std::move(nodes[i].value.data));
    if (nodes[i].aux.capacity() > 0) release_buf(std::move(nodes[i].aux));
  }
  nodes.resize(m);
}

Node& Tape::push(Op op, const int* ps, int n) {
  if (n > 8) throw ContractError(std::string(op_name(op)) + ": more than 8 parents");
  nodes.emplace_back();
  Node& nd = nodes.back();
  nd.op = op;
  nd.np = n;
  for (int i = 0; i < n; ++i) nd.parents[i] = ps[i];
  // depth tags the emission context only. Values that merely depend on a
  // backward graph stay primal, so sequential first-order gradients (one per
  // solver stage) do not stack up to the nesting cap.
  nd.depth = emit_depth;
  return nd;
}

Node& Tape::push(Op op, std::initializer_list<int> ps) {
  return push(op, ps.begin(), int(ps.size()));
}

namespace {

Tensor make_out(Tape& t, int rank, int rows, int cols) {
  Tensor o{nullptr};
  o.rank = rank;
  o.rows = rows;
  o.cols = cols;
  o.data = t.acquire_buf(size_t(rows) * size_t(cols));
  return o;
}

[[noreturn]] void shape_fail(Op op, const Tensor& a) {
  throw ShapeError(std::string(op_name(op)) + ": bad shape " + a.shape_str());
}
[[noreturn]] void shape_fail(Op op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op_name(op)) + ": shape " + a.shape_str() + " vs " + b.shape_str());
}

double stable_softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// C = op(A)*op(B). B may be rank 1 (column vector, tb must be false).
void matmul_into(Tensor& out, const Tensor& A, const Tensor& B, bool ta, bool tb) {
  int m = ta ? A.cols : A.rows;
  int k = ta ? A.rows : A.cols;
  if (B.rank == 1) {
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      if (!ta) {
        const double* arow = &A.data[size_t(i) * A.cols];
        for (int q = 0; q < k; ++q) acc += arow[q] * B.data[size_t(q)];
      } else {
        for (int q = 0; q < k; ++q) acc += A.data[size_t(q) * A.cols + i] * B.data[size_t(q)];
      }
      out.data[size_t(i)] = acc;
    }
    return;
  }
  int n = tb ? B.rows : B.cols;
  for (int i = 0; i < m; ++i) {
    double* orow = &out.data[size_t(i) * n];
    std::memset(orow, 0, size_t(n) * sizeof(double));
    for (int q = 0; q < k; ++q) {
      double a = ta ? A.data[size_t(q) * A.cols + i] : A.data[size_t(i) * A.cols + q];
      if (!tb) {
        const double* brow = &B.data[size_t(q) * B.cols];
        for (int j = 0; j < n; ++j) orow[j] += a * brow[j];
      } else {
        for (int j = 0; j < n; ++j) orow[j] += a * B.data[size_t(j) * B.cols + q];
      }
    }
  }
}

}  // namespace

Var Tape::leaf(Tensor v, bool requires_grad_) {
  nodes.emplace_back();
  Node& nd = nodes.back();
  nd.op = Op::Leaf;
  nd.requires_grad = requires_grad_;
  nd.depth = emit_depth;
  nd.value = std::move(v);
  return Var{this, int(nodes.size()) - 1};
}

Var Tape::constant(Tensor v) {
  Var r = leaf(std::move(v), false);
  nodes.back().op = Op::Const;
  return r;
}

// ---- builders ----

static Var finish(Tape& t) { return Var{&t, int(t.nodes.size()) - 1}; }

static void check_same(Op op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) shape_fail(op, a, b);
}

// In every builder parent values are re-fetched after push: emplace_back can
// reallocate the node store, so references taken before it would dangle.
Var add(Var a, Var b) {
  Tape& t = *a.tape;
  check_same(Op::Add, a.value(), b.value());
  Node& nd = t.push(Op::Add, {a.id, b.id});
  const Tensor &va = t.val(a.id), &vb = t.val(b.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = va.data[i] + vb.data[i];
  return finish(t);
}

Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  check_same(Op::Sub, a.value(), b.value());
  Node& nd = t.push(Op::Sub, {a.id, b.id});
  const Tensor &va = t.val(a.id), &vb = t.val(b.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = va.data[i] - vb.data[i];
  return finish(t);
}

Var neg(Var a) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::Neg, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = -va.data[i];
  return finish(t);
}

Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  check_same(Op::Mul, a.value(), b.value());
  Node& nd = t.push(Op::Mul, {a.id, b.id});
  const Tensor &va = t.val(a.id), &vb = t.val(b.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = va.data[i] * vb.data[i];
  return finish(t);
}

Var smul(Var s, Var a) {
  Tape& t = *s.tape;
  if (s.value().numel() != 1) shape_fail(Op::SMul, s.value());
  Node& nd = t.push(Op::SMul, {s.id, a.id});
  const Tensor &vs = t.val(s.id), &va = t.val(a.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  double c = vs.data[0];
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = c * va.data[i];
  return finish(t);
}

Var scale(Var a, double c) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::Scale, {a.id});
  const Tensor& va = t.val(a.id);
  nd.aux = t.acquire_buf(1);
  nd.aux[0] = c;
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = c * va.data[i];
  return finish(t);
}

Var affc(Var a, double k, double c) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::AffC, {a.id});
  const Tensor& va = t.val(a.id);
  nd.aux = t.acquire_buf(2);
  nd.aux[0] = k;
  nd.aux[1] = c;
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = k * va.data[i] + c;
  return finish(t);
}

Var lincomb(std::span<const Var> ps, std::span<const double> cs) {
  if (ps.empty() || ps.size() != cs.size() || ps.size() > 8)
    throw ContractError("lincomb: needs 1..8 (term, coeff) pairs");
  Tape& t = *ps[0].tape;
  std::array<int, 8> ids{};
  for (size_t i = 0; i < ps.size(); ++i) {
    check_same(Op::LinComb, ps[0].value(), ps[i].value());
    ids[i] = ps[i].id;
  }
  Node& nd = t.push(Op::LinComb, ids.data(), int(ps.size()));
  const Tensor& v0 = t.val(ids[0]);
  nd.aux = t.acquire_buf(cs.size());
  std::copy(cs.begin(), cs.end(), nd.aux.begin());
  nd.value = make_out(t, v0.rank, v0.rows, v0.cols);
  size_t n = v0.numel();
  double* out = nd.value.data.data();
  {
    double c = nd.aux[0];
    const double* p = t.val(nd.parents[0]).data.data();
    for (size_t i = 0; i < n; ++i) out[i] = c * p[i];
  }
  for (int q = 1; q < nd.np; ++q) {
    double c = nd.aux[size_t(q)];
    const double* p = t.val(nd.parents[q]).data.data();
    for (size_t i = 0; i < n; ++i) out[i] += c * p[i];
  }
  return finish(t);
}

Var matmul(Var a, Var b, bool ta, bool tb) {
  Tape& t = *a.tape;
  int m, out_rank, out_cols;
  {
    const Tensor &A = a.value(), &B = b.value();
    if (A.rank != 2) shape_fail(Op::MatMul, A, B);
    m = ta ? A.cols : A.rows;
    int k = ta ? A.rows : A.cols;
    if (B.rank == 1) {
      if (tb || B.rows != k) shape_fail(Op::MatMul, A, B);
      out_rank = 1;
      out_cols = 1;
    } else if (B.rank == 2) {
      if ((tb ? B.cols : B.rows) != k) shape_fail(Op::MatMul, A, B);
      out_rank = 2;
      out_cols = tb ? B.rows : B.cols;
    } else {
      shape_fail(Op::MatMul, A, B);
    }
  }
  Node& nd = t.push(Op::MatMul, {a.id, b.id});
  nd.value = make_out(t, out_rank, m, out_cols);
  nd.aux = t.acquire_buf(2);
  nd.aux[0] = ta ? 1.0 : 0.0;
  nd.aux[1] = tb ? 1.0 : 0.0;
  matmul_into(nd.value, t.val(a.id), t.val(b.id), ta, tb);
  return finish(t);
}

Var outer(Var a, Var b) {
  Tape& t = *a.tape;
  if (a.value().rank != 1 || b.value().rank != 1) shape_fail(Op::Outer, a.value(), b.value());
  Node& nd = t.push(Op::Outer, {a.id, b.id});
  const Tensor &va = t.val(a.id), &vb = t.val(b.id);
  nd.value = make_out(t, 2, va.rows, vb.rows);
  for (int i = 0; i < va.rows; ++i) {
    double ai = va.data[size_t(i)];
    double* orow = &nd.value.data[size_t(i) * vb.rows];
    for (int j = 0; j < vb.rows; ++j) orow[j] = ai * vb.data[size_t(j)];
  }
  return finish(t);
}

Var affine(Var x, Var w, Var b) {
  Tape& t = *x.tape;
  int out, in;
  {
    const Tensor &X0 = x.value(), &W0 = w.value(), &B0 = b.value();
    if (W0.rank != 2 || B0.rank != 1 || B0.rows != W0.rows) shape_fail(Op::Affine, W0, B0);
    out = W0.rows;
    in = W0.cols;
    if (X0.rank == 0 || (X0.rank == 1 ? X0.rows : X0.cols) != in) shape_fail(Op::Affine, X0, W0);
  }
  Node& nd = t.push(Op::Affine, {x.id, w.id, b.id});
  const Tensor &X = t.val(x.id), &W = t.val(w.id), &B = t.val(b.id);
  if (X.rank == 1) {
    nd.value = make_out(t, 1, out, 1);
    for (int o = 0; o < out; ++o) {
      const double* wrow = &W.data[size_t(o) * in];
      double acc = B.data[size_t(o)];
      for (int i = 0; i < in; ++i) acc += wrow[i] * X.data[size_t(i)];
      nd.value.data[size_t(o)] = acc;
    }
  } else {
    nd.value = make_out(t, 2, X.rows, out);
    for (int r = 0; r < X.rows; ++r) {
      const double* xrow = &X.data[size_t(r) * in];
      double* orow = &nd.value.data[size_t(r) * out];
      for (int o = 0; o < out; ++o) {
        const double* wrow = &W.data[size_t(o) * in];
        double acc = B.data[size_t(o)];
        for (int i = 0; i < in; ++i) acc += wrow[i] * xrow[i];
        orow[o] = acc;
      }
    }
  }
  return finish(t);
}

Var dot(Var a, Var b) {
  Tape& t = *a.tape;
  check_same(Op::Dot, a.value(), b.value());
  Node& nd = t.push(Op::Dot, {a.id, b.id});
  const Tensor &va = t.val(a.id), &vb = t.val(b.id);
  nd.value = make_out(t, 0, 1, 1);
  double acc = 0.0;
  for (size_t i = 0; i < va.numel(); ++i) acc += va.data[i] * vb.data[i];
  nd.value.data[0] = acc;
  return finish(t);
}

Var sum(Var a) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::Sum, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, 0, 1, 1);
  double acc = 0.0;
  for (size_t i = 0; i < va.numel(); ++i) acc += va.data[i];
  nd.value.data[0] = acc;
  return finish(t);
}

Var colsum(Var a) {
  Tape& t = *a.tape;
  if (a.value().rank != 2) shape_fail(Op::ColSum, a.value());
  Node& nd = t.push(Op::ColSum, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, 1, va.cols, 1);
  std::memset(nd.value.data.data(), 0, size_t(va.cols) * sizeof(double));
  for (int r = 0; r < va.rows; ++r) {
    const double* arow = &va.data[size_t(r) * va.cols];
    for (int j = 0; j < va.cols; ++j) nd.value.data[size_t(j)] += arow[j];
  }
  return finish(t);
}

// softplus caches sigmoid(x) in aux so the hot value-backward pass does not
// recompute exp.
Var softplus(Var a) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::Softplus, {a.id});
  const Tensor& va = t.val(a.id);
  nd.aux = t.acquire_buf(va.numel());
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) {
    nd.value.data[i] = stable_softplus(va.data[i]);
    nd.aux[i] = stable_sigmoid(va.data[i]);
  }
  return finish(t);
}

Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::Sigmoid, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = stable_sigmoid(va.data[i]);
  return finish(t);
}

Var vexp(Var a) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::Exp, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = std::exp(va.data[i]);
  return finish(t);
}

Var vsin(Var a) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::Sin, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = std::sin(va.data[i]);
  return finish(t);
}

Var vcos(Var a) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::Cos, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = std::cos(va.data[i]);
  return finish(t);
}

Var wrap_angle(Var a) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::WrapAngle, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i)
    nd.value.data[i] = std::remainder(va.data[i], 2.0 * std::numbers::pi);
  return finish(t);
}

Var square(Var a) {
  Tape& t = *a.tape;
  Node& nd = t.push(Op::Square, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, va.rank, va.rows, va.cols);
  for (size_t i = 0; i < va.numel(); ++i) nd.value.data[i] = va.data[i] * va.data[i];
  return finish(t);
}

Var concat(Var a, Var b) {
  Tape& t = *a.tape;
  if (a.value().rank != 1 || b.value().rank != 1) shape_fail(Op::Concat, a.value(), b.value());
  Node& nd = t.push(Op::Concat, {a.id, b.id});
  const Tensor &va = t.val(a.id), &vb = t.val(b.id);
  nd.value = make_out(t, 1, va.rows + vb.rows, 1);
  std::memcpy(nd.value.data.data(), va.data.data(), size_t(va.rows) * sizeof(double));
  std::memcpy(nd.value.data.data() + va.rows, vb.data.data(), size_t(vb.rows) * sizeof(double));
  return finish(t);
}

Var slice(Var a, int off, int len) {
  Tape& t = *a.tape;
  {
    const Tensor& v0 = a.value();
    if (v0.rank != 1 || off < 0 || len <= 0 || off + len > v0.rows)
      throw ShapeError("slice: [" + std::to_string(off) + "," + std::to_string(off + len) +
                       ") of " + v0.shape_str());
  }
  Node& nd = t.push(Op::Slice, {a.id});
  const Tensor& va = t.val(a.id);
  nd.aux = t.acquire_buf(1);
  nd.aux[0] = double(off);
  nd.value = make_out(t, 1, len, 1);
  std::memcpy(nd.value.data.data(), va.data.data() + off, size_t(len) * sizeof(double));
  return finish(t);
}

Var pad(Var a, int off, int total) {
  Tape& t = *a.tape;
  if (a.value().rank != 1 || off < 0 || off + a.value().rows > total) shape_fail(Op::Pad, a.value());
  Node& nd = t.push(Op::Pad, {a.id});
  const Tensor& va = t.val(a.id);
  nd.aux = t.acquire_buf(1);
  nd.aux[0] = double(off);
  nd.value = make_out(t, 1, total, 1);
  std::memset(nd.value.data.data(), 0, size_t(total) * sizeof(double));
  std::memcpy(nd.value.data.data() + off, va.data.data(), size_t(va.rows) * sizeof(double));
  return finish(t);
}

Var row(Var a, int i) {
  Tape& t = *a.tape;
  if (a.value().rank != 2 || i < 0 || i >= a.value().rows) shape_fail(Op::Row, a.value());
  Node& nd = t.push(Op::Row, {a.id});
  const Tensor& va = t.val(a.id);
  nd.aux = t.acquire_buf(1);
  nd.aux[0] = double(i);
  nd.value = make_out(t, 1, va.cols, 1);
  std::memcpy(nd.value.data.data(), &va.data[size_t(i) * va.cols], size_t(va.cols) * sizeof(double));
  return finish(t);
}

Var pad_row(Var a, int i, int rows_) {
  Tape& t = *a.tape;
  if (a.value().rank != 1 || i < 0 || i >= rows_) shape_fail(Op::PadRow, a.value());
  Node& nd = t.push(Op::PadRow, {a.id});
  const Tensor& va = t.val(a.id);
  nd.aux = t.acquire_buf(1);
  nd.aux[0] = double(i);
  nd.value = make_out(t, 2, rows_, va.rows);
  std::memset(nd.value.data.data(), 0, nd.value.numel() * sizeof(double));
  std::memcpy(&nd.value.data[size_t(i) * va.rows], va.data.data(), size_t(va.rows) * sizeof(double));
  return finish(t);
}

Var rowrep(Var a, int r) {
  Tape& t = *a.tape;
  if (a.value().rank != 1 || r <= 0) shape_fail(Op::RowRep, a.value());
  Node& nd = t.push(Op::RowRep, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, 2, r, va.rows);
  for (int i = 0; i < r; ++i)
    std::memcpy(&nd.value.data[size_t(i) * va.rows], va.data.data(), size_t(va.rows) * sizeof(double));
  return finish(t);
}

Var hcat(Var a, Var b) {
  Tape& t = *a.tape;
  if (a.value().rank != 2 || b.value().rank != 2 || a.value().rows != b.value().rows)
    shape_fail(Op::HCat, a.value(), b.value());
  Node& nd = t.push(Op::HCat, {a.id, b.id});
  const Tensor &va = t.val(a.id), &vb = t.val(b.id);
  int c = va.cols + vb.cols;
  nd.value = make_out(t, 2, va.rows, c);
  for (int i = 0; i < va.rows; ++i) {
    std::memcpy(&nd.value.data[size_t(i) * c], &va.data[size_t(i) * va.cols],
                size_t(va.cols) * sizeof(double));
    std::memcpy(&nd.value.data[size_t(i) * c + va.cols], &vb.data[size_t(i) * vb.cols],
                size_t(vb.cols) * sizeof(double));
  }
  return finish(t);
}

Var sfill(Var s, int rank, int rows_, int cols_) {
  Tape& t = *s.tape;
  if (s.value().numel() != 1) shape_fail(Op::SFill, s.value());
  Node& nd = t.push(Op::SFill, {s.id});
  nd.value = make_out(t, rank, rows_, cols_);
  std::fill(nd.value.data.begin(), nd.value.data.end(), t.val(s.id).data[0]);
  return finish(t);
}

Var reshape(Var a, int rank, int rows_, int cols_) {
  Tape& t = *a.tape;
  if (size_t(rows_) * size_t(cols_) != a.value().numel()) shape_fail(Op::Reshape, a.value());
  Node& nd = t.push(Op::Reshape, {a.id});
  const Tensor& va = t.val(a.id);
  nd.value = make_out(t, rank, rows_, cols_);
  std::memcpy(nd.value.data.data(), va.data.data(), va.numel() * sizeof(double));
  return finish(t);
}

// ---- reverse sweeps ----

namespace {

void axpy(Tensor& dst, double c, const Tensor& src) {
  for (size_t i = 0; i < dst.numel(); ++i) dst.data[i] += c * src.data[i];
}

struct ValueSweep {
  Tape& t;
  std::vector<Tensor> adj;
  std::vector<uint8_t> has;
  std::vector<uint8_t> reach;

  explicit ValueSweep(Tape& t_, int n) : t(t_), adj(size_t(n)), has(size_t(n), 0), reach(size_t(n), 0) {}

  Tensor& grab(int id) {
    if (!has[size_t(id)]) {
      const Tensor& v = t.val(id);
      Tensor z{nullptr};
      z.rank = v.rank;
      z.rows = v.rows;
      z.cols = v.cols;
      z.data = t.acquire_buf(v.numel());
      std::memset(z.data.data(), 0, v.numel() * sizeof(double));
      adj[size_t(id)] = std::move(z);
      has[size_t(id)] = 1;
    }
    return adj[size_t(id)];
  }

  ~ValueSweep() {
    for (size_t i = 0; i < adj.size(); ++i)
      if (has[i]) t.release_buf(std::move(adj[i].data));
  }

  void backward_node(int id) {
    const Node& nd = t.nodes[size_t(id)];
    const Tensor& g = adj[size_t(id)];
    auto want = [&](int q) { return reach[size_t(nd.parents[q])] != 0; };
    auto pv = [&](int q) -> const Tensor& { return t.val(nd.parents[q]); };
    auto pg = [&](int q) -> Tensor& { return grab(nd.parents[q]); };
    switch (nd.op) {
      case Op::Leaf:
      case Op::Const:
        break;
      case Op::Add:
        if (want(0)) axpy(pg(0), 1.0, g);
        if (want(1)) axpy(pg(1), 1.0, g);
        break;
      case Op::Sub:
        if (want(0)) axpy(pg(0), 1.0, g);
        if (want(1)) axpy(pg(1), -1.0, g);
        break;
      case Op::Neg:
        if (want(0)) axpy(pg(0), -1.0, g);
        break;
      case Op::Mul: {
        if (want(0)) {
          Tensor& d = pg(0);
          const Tensor& o = pv(1);
          for (size_t i = 0; i < d.numel(); ++i) d.data[i] += g.data[i] * o.data[i];
        }
        if (want(1)) {
          Tensor& d = pg(1);
          const Tensor& o = pv(0);
          for (size_t i = 0; i < d.numel(); ++i) d.data[i] += g.data[i] * o.data[i];
        }
        break;
      }
      case Op::SMul: {
        if (want(0)) {
          double acc = 0.0;
          const Tensor& a = pv(1);
          for (size_t i = 0; i < a.numel(); ++i) acc += g.data[i] * a.data[i];
          pg(0).data[0] += acc;
        }
        if (want(1)) axpy(pg(1), pv(0).data[0], g);
        break;
      }
      case Op::Scale:
        if (want(0)) axpy(pg(0), nd.aux[0], g);
        break;
      case Op::AffC:
        if (want(0)) axpy(pg(0), nd.aux[0], g);
        break;
      case Op::LinComb:
        for (int q = 0; q < nd.np; ++q)
          if (want(q)) axpy(pg(q), nd.aux[size_t(q)], g);
        break;
      case Op::MatMul: {
        bool ta = nd.aux[0] != 0.0, tb = nd.aux[1] != 0.0;
        const Tensor &A = pv(0), &B = pv(1);
        if (B.rank == 1) {
          if (want(0)) {
            Tensor& dA = pg(0);
            // d(opA) = g b^T, transposed back if ta
            for (int i = 0; i < g.rows; ++i)
              for (int q = 0; q < B.rows; ++q) {
                double v = g.data[size_t(i)] * B.data[size_t(q)];
                if (ta)
                  dA.data[size_t(q) * dA.cols + i] += v;
                else
                  dA.data[size_t(i) * dA.cols + q] += v;
              }
          }
          if (want(1)) {
            Tensor& dB = pg(1);
            for (int i = 0; i < g.rows; ++i) {
              double gi = g.data[size_t(i)];
              for (int q = 0; q < B.rows; ++q)
                dB.data[size_t(q)] += gi * (ta ? A.data[size_t(q) * A.cols + i] : A.data[size_t(i) * A.cols + q]);
            }
          }
        } else {
          int m = g.rows, n = g.cols;
          if (want(0)) {
            Tensor& dA = pg(0);
            // d(opA)(i,q) = sum_j G(i,j) opB(q,j)
            int k = ta ? A.rows : A.cols;
            for (int i = 0; i < m; ++i)
              for (int q = 0; q < k; ++q) {
                double acc = 0.0;
                const double* grow = &g.data[size_t(i) * n];
                for (int j = 0; j < n; ++j)
                  acc += grow[j] * (tb ? B.data[size_t(j) * B.cols + q] : B.data[size_t(q) * B.cols + j]);
                if (ta)
                  dA.data[size_t(q) * dA.cols + i] += acc;
                else
                  dA.data[size_t(i) * dA.cols + q] += acc;
              }
          }
          if (want(1)) {
            Tensor& dB = pg(1);
            int k = ta ? A.rows : A.cols;
            // d(opB)(q,j) = sum_i opA(i,q) G(i,j)
            for (int q = 0; q < k; ++q)
              for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int i = 0; i < m; ++i)
                  acc += (ta ? A.data[size_t(q) * A.cols + i] : A.data[size_t(i) * A.cols + q]) *
                         g.data[size_t(i) * n + j];
                if (tb)
                  dB.data[size_t(j) * dB.cols + q] += acc;
                else
                  dB.data[size_t(q) * dB.cols + j] += acc;
              }
          }
        }
        break;
      }
      case Op::Outer: {
        const Tensor &a = pv(0), &b = pv(1);
        if (want(0)) {
          Tensor& da = pg(0);
          for (int i = 0; i < a.rows; ++i) {
            double acc = 0.0;
            const double* grow = &g.data[size_t(i) * b.rows];
            for (int j = 0; j < b.rows; ++j) acc += grow[j] * b.data[size_t(j)];
            da.data[size_t(i)] += acc;
          }
        }
        if (want(1)) {
          Tensor& db = pg(1);
          for (int i = 0; i < a.rows; ++i) {
            double ai = a.data[size_t(i)];
            const double* grow = &g.data[size_t(i) * b.rows];
            for (int j = 0; j < b.rows; ++j) db.data[size_t(j)] += ai * grow[j];
          }
        }
        break;
      }
      case Op::Affine: {
        const Tensor &X = pv(0), &W = pv(1);
        int out = W.rows, in = W.cols;
        if (X.rank == 1) {
          if (want(0)) {
            Tensor& dX = pg(0);
            for (int o = 0; o < out; ++o) {
              double go = g.data[size_t(o)];
              const double* wrow = &W.data[size_t(o) * in];
              for (int i = 0; i < in; ++i) dX.data[size_t(i)] += go * wrow[i];
            }
          }
          if (want(1)) {
            Tensor& dW = pg(1);
            for (int o = 0; o < out; ++o) {
              double go = g.data[size_t(o)];
              double* drow = &dW.data[size_t(o) * in];
              for (int i = 0; i < in; ++i) drow[i] += go * X.data[size_t(i)];
            }
          }
          if (want(2)) axpy(pg(2), 1.0, g);
        } else {
          int r = X.rows;
          if (want(0)) {
            Tensor& dX = pg(0);
            for (int rr = 0; rr < r; ++rr) {
              const double* grow = &g.data[size_t(rr) * out];
              double* drow = &dX.data[size_t(rr) * in];
              for (int o = 0; o < out; ++o) {
                double go = grow[o];
                const double* wrow = &W.data[size_t(o) * in];
                for (int i = 0; i < in; ++i) drow[i] += go * wrow[i];
              }
            }
          }
          if (want(1)) {
            Tensor& dW = pg(1);
            for (int rr = 0; rr < r; ++rr) {
              const double* grow = &g.data[size_t(rr) * out];
              const double* xrow = &X.data[size_t(rr) * in];
              for (int o = 0; o < out; ++o) {
                double go = grow[o];
                double* drow = &dW.data[size_t(o) * in];
                for (int i = 0; i < in; ++i) drow[i] += go * xrow[i];
              }
            }
          }
          if (want(2)) {
            Tensor& db = pg(2);
            for (int rr = 0; rr < r; ++rr) {
              const double* grow = &g.data[size_t(rr) * out];
              for (int o = 0; o < out; ++o) db.data[size_t(o)] += grow[o];
            }
          }
        }
        break;
      }
      case Op::Dot: {
        double gs = g.data[0];
        if (want(0)) axpy(pg(0), gs, pv(1));
        if (want(1)) axpy(pg(1), gs, pv(0));
        break;
      }
      case Op::Sum: {
        if (want(0)) {
          Tensor& d = pg(0);
          double gs = g.data[0];
          for (size_t i = 0; i < d.numel(); ++i) d.data[i] += gs;
        }
        break;
      }
      case Op::ColSum: {
        if (want(0)) {
          Tensor& d = pg(0);
          for (int r = 0; r < d.rows; ++r) {
            double* drow = &d.data[size_t(r) * d.cols];
            for (int j = 0; j < d.cols; ++j) drow[j] += g.data[size_t(j)];
          }
        }
        break;
      }
      case Op::Softplus: {
        if (want(0)) {
          Tensor& d = pg(0);
          for (size_t i = 0; i < d.numel(); ++i) d.data[i] += g.data[i] * nd.aux[i];
        }
        break;
      }
      case Op::Sigmoid: {
        if (want(0)) {
          Tensor& d = pg(0);
          const Tensor& s = nd.value;
          for (size_t i = 0; i < d.numel(); ++i) d.data[i] += g.data[i] * s.data[i] * (1.0 - s.data[i]);
        }
        break;
      }
      case Op::Exp: {
        if (want(0)) {
          Tensor& d = pg(0);
          for (size_t i = 0; i < d.numel(); ++i) d.data[i] += g.data[i] * nd.value.data[i];
        }
        break;
      }
      case Op::Sin: {
        if (want(0)) {
          Tensor& d = pg(0);
          const Tensor& x = pv(0);
          for (size_t i = 0; i < d.numel(); ++i) d.data[i] += g.data[i] * std::cos(x.data[i]);
        }
        break;
      }
      case Op::Cos: {
        if (want(0)) {
          Tensor& d = pg(0);
          const Tensor& x = pv(0);
          for (size_t i = 0; i < d.numel(); ++i) d.data[i] -= g.data[i] * std::sin(x.data[i]);
        }
        break;
      }
      case Op::WrapAngle:
        if (want(0)) axpy(pg(0), 1.0, g);
        break;
      case Op::Square: {
        if (want(0)) {
          Tensor& d = pg(0);
          const Tensor& x = pv(0);
          for (size_t i = 0; i < d.numel(); ++i) d.data[i] += 2.0 * g.data[i] * x.data[i];
        }
        break;
      }
      case Op::Concat: {
        int na = pv(0).rows;
        if (want(0)) {
          Tensor& d = pg(0);
          for (int i = 0; i < na; ++i) d.data[size_t(i)] += g.data[size_t(i)];
        }
        if (want(1)) {
          Tensor& d = pg(1);
          for (int i = 0; i < d.rows; ++i) d.data[size_t(i)] += g.data[size_t(na + i)];
        }
        break;
      }
      case Op::Slice: {
        if (want(0)) {
          Tensor& d = pg(0);
          int off = int(nd.aux[0]);
          for (int i = 0; i < g.rows; ++i) d.data[size_t(off + i)] += g.data[size_t(i)];
        }
        break;
      }
      case Op::Pad: {
        if (want(0)) {
          Tensor& d = pg(0);
          int off = int(nd.aux[0]);
          for (int i = 0; i < d.rows; ++i) d.data[size_t(i)] += g.data[size_t(off + i)];
        }
        break;
      }
      case Op::Row: {
        if (want(0)) {
          Tensor& d = pg(0);
          int i = int(nd.aux[0]);
          for (int j = 0; j < d.cols; ++j) d.data[size_t(i) * d.cols + j] += g.data[size_t(j)];
        }
        break;
      }
      case Op::PadRow: {
        if (want(0)) {
          Tensor& d = pg(0);
          int i = int(nd.aux[0]);
          for (int j = 0; j < d.rows; ++j) d.data[size_t(j)] += g.data[size_t(i) * g.cols + j];
        }
        break;
      }
      case Op::RowRep: {
        if (want(0)) {
          Tensor& d = pg(0);
          for (int r = 0; r < g.rows; ++r) {
            const double* grow = &g.data[size_t(r) * g.cols];
            for (int j = 0; j < g.cols; ++j) d.data[size_t(j)] += grow[j];
          }
        }
        break;
      }
      case Op::HCat: {
        int c1 = pv(0).cols, c = g.cols;
        if (want(0)) {
          Tensor& d = pg(0);
          for (int r = 0; r < g.rows; ++r)
            for (int j = 0; j < c1; ++j) d.data[size_t(r) * c1 + j] += g.data[size_t(r) * c + j];
        }
        if (want(1)) {
          Tensor& d = pg(1);
          int c2 = d.cols;
          for (int r = 0; r < g.rows; ++r)
            for (int j = 0; j < c2; ++j) d.data[size_t(r) * c2 + j] += g.data[size_t(r) * c + c1 + j];
        }
        break;
      }
      case Op::SFill: {
        if (want(0)) {
          double acc = 0.0;
          for (size_t i = 0; i < g.numel(); ++i) acc += g.data[i];
          pg(0).data[0] += acc;
        }
        break;
      }
      case Op::Reshape: {
        if (want(0)) {
          Tensor& d = pg(0);
          for (size_t i = 0; i < g.numel(); ++i) d.data[i] += g.data[i];
        }
        break;
      }
    }
  }
};

// marks nodes that depend on any wrt node
void mark_reach(const Tape& t, std::span<const Var> wrt, int n, std::vector<uint8_t>& reach) {
  for (const Var& w : wrt)
    if (w.id < n) reach[size_t(w.id)] = 1;
  for (int i = 0; i < n; ++i) {
    if (reach[size_t(i)]) continue;
    const Node& nd = t.nodes[size_t(i)];
    for (int q = 0; q < nd.np; ++q)
      if (reach[size_t(nd.parents[q])]) {
        reach[size_t(i)] = 1;
        break;
      }
  }
}

void check_root(Var root) {
  if (!root.valid()) throw ContractError("gradient: invalid root");
  if (root.value().numel() != 1)
    throw ContractError("gradient: root must be scalar, got " + root.value().shape_str());
  if (root.tape->nodes[size_t(root.id)].depth > 1)
    throw DepthError("gradient: differentiation depth > 2 is unsupported");
}

}  // namespace

std::vector<Tensor> grad_values(Var root, std::span<const Var> wrt) {
  check_root(root);
  Tape& t = *root.tape;
  int n = root.id + 1;
  ValueSweep sweep(t, n);
  mark_reach(t, wrt, n, sweep.reach);
  std::vector<Tensor> out(wrt.size());
  if (sweep.reach[size_t(root.id)]) {
    Tensor& r = sweep.grab(root.id);
    r.data[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
      if (!sweep.has[size_t(i)] || !sweep.reach[size_t(i)]) continue;
      sweep.backward_node(i);
    }
  }
  for (size_t k = 0; k < wrt.size(); ++k) {
    const Tensor& v = wrt[k].value();
    if (wrt[k].id < n && sweep.has[size_t(wrt[k].id)]) {
      out[k] = sweep.adj[size_t(wrt[k].id)];  // copy; sweep buffers are recycled
    } else {
      out[k] = Tensor{};
      out[k].rank = v.rank;
      out[k].rows = v.rows;
      out[k].cols = v.cols;
      out[k].data.assign(v.numel(), 0.0);
    }
  }
  return out;
}

std::vector<Var> grad_graph(Var root, std::span<const Var> wrt) {
  check_root(root);
  Tape& t = *root.tape;
  int n = root.id + 1;
  std::vector<uint8_t> reach(size_t(n), 0);
  mark_reach(t, wrt, n, reach);

  uint8_t saved = t.emit_depth;
  t.emit_depth = uint8_t(t.nodes[size_t(root.id)].depth + 1);

  std::vector<Var> adj(static_cast<size_t>(n));
  auto acc = [&](int id, Var g) {
    if (adj[size_t(id)].valid())
      adj[size_t(id)] = add(adj[size_t(id)], g);
    else
      adj[size_t(id)] = g;
  };

  if (reach[size_t(root.id)]) {
    adj[size_t(root.id)] = t.constant_scalar(1.0);
    for (int i = root.id; i >= 0; --i) {
      if (!adj[size_t(i)].valid() || !reach[size_t(i)]) continue;
      // the tape vector may reallocate while emitting, so copy the POD part
      // of the node up front and read aux before the first emission per case
      struct {
        Op op;
        int np;
        int parents[8];
        double aux[8];
      } nd;
      {
        const Node& src = t.nodes[size_t(i)];
        nd.op = src.op;
        nd.np = src.np;
        std::copy(src.parents, src.parents + src.np, nd.parents);
        size_t na = std::min<size_t>(src.aux.size(), 8);
        std::copy(src.aux.begin(), src.aux.begin() + na, nd.aux);
      }
      Var g = adj[size_t(i)];
      auto want = [&](int q) { return reach[size_t(nd.parents[q])] != 0; };
      auto p = [&](int q) { return Var{&t, nd.parents[q]}; };
      switch (nd.op) {
        case Op::Leaf:
        case Op::Const:
          break;
        case Op::Add:
          if (want(0)) acc(nd.parents[0], g);
          if (want(1)) acc(nd.parents[1], g);
          break;
        case Op::Sub:
          if (want(0)) acc(nd.parents[0], g);
          if (want(1)) acc(nd.parents[1], neg(g));
          break;
        case Op::Neg:
          if (want(0)) acc(nd.parents[0], neg(g));
          break;
        case Op::Mul:
          if (want(0)) acc(nd.parents[0], mul(g, p(1)));
          if (want(1)) acc(nd.parents[1], mul(g, p(0)));
          break;
        case Op::SMul:
          if (want(0)) acc(nd.parents[0], sum(mul(g, p(1))));
          if (want(1)) acc(nd.parents[1], smul(p(0), g));
          break;
        case Op::Scale:
          if (want(0)) acc(nd.parents[0], scale(g, nd.aux[0]));
          break;
        case Op::AffC:
          if (want(0)) acc(nd.parents[0], scale(g, nd.aux[0]));
          break;
        case Op::LinComb:
          for (int q = 0; q < nd.np; ++q)
            if (want(q)) acc(nd.parents[q], scale(g, nd.aux[size_t(q)]));
          break;
        case Op::MatMul: {
          bool ta = nd.aux[0] != 0.0, tb = nd.aux[1] != 0.0;
          const Tensor& B = t.val(nd.parents[1]);
          if (B.rank == 1) {
            if (want(0)) acc(nd.parents[0], ta ? outer(p(1), g) : outer(g, p(1)));
            if (want(1)) acc(nd.parents[1], matmul(p(0), g, !ta, false));
          } else {
            if (want(0))
              acc(nd.parents[0], ta ? matmul(p(1), g, tb, true) : matmul(g, p(1), false, !tb));
            if (want(1))
              acc(nd.parents[1], tb ? matmul(g, p(0), true, ta) : matmul(p(0), g, !ta, false));
          }
          break;
        }
        case Op::Outer:
          if (want(0)) acc(nd.parents[0], matmul(g, p(1), false, false));
          if (want(1)) acc(nd.parents[1], matmul(g, p(0), true, false));
          break;
        case Op::Affine: {
          const Tensor& X = t.val(nd.parents[0]);
          if (X.rank == 1) {
            if (want(0)) acc(nd.parents[0], matmul(p(1), g, true, false));
            if (want(1)) acc(nd.parents[1], outer(g, p(0)));
            if (want(2)) acc(nd.parents[2], g);
          } else {
            if (want(0)) acc(nd.parents[0], matmul(g, p(1), false, false));
            if (want(1)) acc(nd.parents[1], matmul(g, p(0), true, false));
            if (want(2)) acc(nd.parents[2], colsum(g));
          }
          break;
        }
        case Op::Dot:
          if (want(0)) acc(nd.parents[0], smul(g, p(1)));
          if (want(1)) acc(nd.parents[1], smul(g, p(0)));
          break;
        case Op::Sum: {
          const Tensor& a = t.val(nd.parents[0]);
          if (want(0)) acc(nd.parents[0], sfill(g, a.rank, a.rows, a.cols));
          break;
        }
        case Op::ColSum: {
          const Tensor& a = t.val(nd.parents[0]);
          if (want(0)) acc(nd.parents[0], rowrep(g, a.rows));
          break;
        }
        case Op::Softplus:
          if (want(0)) acc(nd.parents[0], mul(g, sigmoid(p(0))));
          break;
        case Op::Sigmoid: {
          Var s{&t, i};
          if (want(0)) acc(nd.parents[0], mul(g, mul(s, affc(s, -1.0, 1.0))));
          break;
        }
        case Op::Exp:
          if (want(0)) acc(nd.parents[0], mul(g, Var{&t, i}));
          break;
        case Op::Sin:
          if (want(0)) acc(nd.parents[0], mul(g, vcos(p(0))));
          break;
        case Op::Cos:
          if (want(0)) acc(nd.parents[0], neg(mul(g, vsin(p(0)))));
          break;
        case Op::WrapAngle:
          if (want(0)) acc(nd.parents[0], g);
          break;
        case Op::Square:
          if (want(0)) acc(nd.parents[0], scale(mul(g, p(0)), 2.0));
          break;
        case Op::Concat: {
          int na = t.val(nd.parents[0]).rows;
          int nb = t.val(nd.parents[1]).rows;
          if (want(0)) acc(nd.parents[0], slice(g, 0, na));
          if (want(1)) acc(nd.parents[1], slice(g, na, nb));
          break;
        }
        case Op::Slice: {
          const Tensor& a = t.val(nd.parents[0]);
          if (want(0)) acc(nd.parents[0], pad(g, int(nd.aux[0]), a.rows));
          break;
        }
        case Op::Pad: {
          const Tensor& a = t.val(nd.parents[0]);
          if (want(0)) acc(nd.parents[0], slice(g, int(nd.aux[0]), a.rows));
          break;
        }
        case Op::Row: {
          const Tensor& a = t.val(nd.parents[0]);
          if (want(0)) acc(nd.parents[0], pad_row(g, int(nd.aux[0]), a.rows));
          break;
        }
        case Op::PadRow:
          if (want(0)) acc(nd.parents[0], row(g, int(nd.aux[0])));
          break;
        case Op::RowRep:
          if (want(0)) acc(nd.parents[0], colsum(g));
          break;
        case Op::HCat: {
          int ca = t.val(nd.parents[0]).cols, cb = t.val(nd.parents[1]).cols;
          // column slices via constant selector matrices
          if (want(0)) {
            Tensor S = Tensor::mat(ca + cb, ca);
            for (int j = 0; j < ca; ++j) S.at(j, j) = 1.0;
            acc(nd.parents[0], matmul(g, t.constant(std::move(S)), false, false));
          }
          if (want(1)) {
            Tensor S = Tensor::mat(ca + cb, cb);
            for (int j = 0; j < cb; ++j) S.at(ca + j, j) = 1.0;
            acc(nd.parents[1], matmul(g, t.constant(std::move(S)), false, false));
          }
          break;
        }
        case Op::SFill:
          if (want(0)) acc(nd.parents[0], sum(g));
          break;
        case Op::Reshape: {
          const Tensor& a = t.val(nd.parents[0]);
          if (want(0)) acc(nd.parents[0], reshape(g, a.rank, a.rows, a.cols));
          break;
        }
      }
    }
  }

  std::vector<Var> out(wrt.size());
  for (size_t k = 0; k < wrt.size(); ++k) {
    if (wrt[k].id < n && adj[size_t(wrt[k].id)].valid()) {
      out[k] = adj[size_t(wrt[k].id)];
    } else {
      const Tensor& v = wrt[k].value();
      Tensor z;
      z.rank = v.rank;
      z.rows = v.rows;
      z.cols = v.cols;
      z.data.assign(v.numel(), 0.0);
      out[k] = t.constant(std::move(z));
    }
  }
  t.emit_depth = saved;
  return out;
}

Tensor replay_value(Var root) {
  Tape& t = *root.tape;
  int n = root.id + 1;
  // recompute only the ancestor cone of root
  std::vector<uint8_t> need(size_t(n), 0);
  need[size_t(root.id)] = 1;
  for (int i = root.id; i >= 0; --i) {
    if (!need[size_t(i)]) continue;
    const Node& nd = t.nodes[size_t(i)];
    for (int q = 0; q < nd.np; ++q) need[size_t(nd.parents[q])] = 1;
  }
  Tape scratch;
  std::vector<Var> copy(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (!need[size_t(i)]) continue;
    const Node& nd = t.nodes[size_t(i)];
    switch (nd.op) {
      case Op::Leaf:
        copy[size_t(i)] = scratch.leaf(nd.value, nd.requires_grad);
        break;
      case Op::Const:
        copy[size_t(i)] = scratch.constant(nd.value);
        break;
      case Op::Add: copy[size_t(i)] = add(copy[size_t(nd.parents[0])], copy[size_t(nd.parents[1])]); break;
      case Op::Sub: copy[size_t(i)] = sub(copy[size_t(nd.parents[0])], copy[size_t(nd.parents[1])]); break;
      case Op::Neg: copy[size_t(i)] = neg(copy[size_t(nd.parents[0])]); break;
      case Op::Mul: copy[size_t(i)] = mul(copy[size_t(nd.parents[0])], copy[size_t(nd.parents[1])]); break;
      case Op::SMul: copy[size_t(i)] = smul(copy[size_t(nd.parents[0])], copy[size_t(nd.parents[1])]); break;
      case Op::Scale: copy[size_t(i)] = scale(copy[size_t(nd.parents[0])], nd.aux[0]); break;
      case Op::AffC: copy[size_t(i)] = affc(copy[size_t(nd.parents[0])], nd.aux[0], nd.aux[1]); break;
      case Op::LinComb: {
        std::array<Var, 8> ps;
        for (int q = 0; q < nd.np; ++q) ps[size_t(q)] = copy[size_t(nd.parents[q])];
        copy[size_t(i)] = lincomb(std::span<const Var>(ps.data(), size_t(nd.np)),
                                  std::span<const double>(nd.aux.data(), size_t(nd.np)));
        break;
      }
      case Op::MatMul:
        copy[size_t(i)] = matmul(copy[size_t(nd.parents[0])], copy[size_t(nd.parents[1])],
                                 nd.aux[0] != 0.0, nd.aux[1] != 0.0);
        break;
      case Op::Outer: copy[size_t(i)] = outer(copy[size_t(nd.parents[0])], copy[size_t(nd.parents[1])]); break;
      case Op::Affine:
        copy[size_t(i)] = affine(copy[size_t(nd.parents[0])], copy[size_t(nd.parents[1])],
                                 copy[size_t(nd.parents[2])]);
        break;
      case Op::Dot: copy[size_t(i)] = dot(copy[size_t(nd.parents[0])], copy[size_t(nd.parents[1])]); break;
      case Op::Sum: copy[size_t(i)] = sum(copy[size_t(nd.parents[0])]); break;
      case Op::ColSum: copy[size_t(i)] = colsum(copy[size_t(nd.parents[0])]); break;
      case Op::Softplus: copy[size_t(i)] = softplus(copy[size_t(nd.parents[0])]); break;
      case Op::Sigmoid: copy[size_t(i)] = sigmoid(copy[size_t(nd.parents[0])]); break;
      case Op::Exp: copy[size_t(i)] = vexp(copy[size_t(nd.parents[0])]); break;
      case Op::Sin: copy[size_t(i)] = vsin(copy[size_t(nd.parents[0])]); break;
      case Op::Cos: copy[size_t(i)] = vcos(copy[size_t(nd.parents[0])]); break;
      case Op::WrapAngle: copy[size_t(i)] = wrap_angle(copy[size_t(nd.parents[0])]); break;
      case Op::Square: copy[size_t(i)] = square(copy[size_t(nd.parents[0])]); break;
      case Op::Concat: copy[size_t(i)] = concat(copy[size_t(nd.parents[0])], copy[size_t(nd.parents[1])]); break;
      case Op::Slice:
        copy[size_t(i)] = slice(copy[size_t(nd.parents[0])], int(nd.aux[0]), nd.value.rows);
        break;
      case Op::Pad: copy[size_t(i)] = pad(copy[size_t(nd.parents[0])], int(nd.aux[0]), nd.value.rows); break;
      case Op::Row: copy[size_t(i)] = row(copy[size_t(nd.parents[0])], int(nd.aux[0])); break;
      case Op::PadRow:
        copy[size_t(i)] = pad_row(copy[size_t(nd.parents[0])], int(nd.aux[0]), nd.value.rows);
        break;
      case Op::RowRep: copy[size_t(i)] = rowrep(copy[size_t(nd.parents[0])], nd.value.rows); break;
      case Op::HCat: copy[size_t(i)] = hcat(copy[size_t(nd.parents[0])], copy[size_t(nd.parents[1])]); break;
      case Op::SFill:
        copy[size_t(i)] = sfill(copy[size_t(nd.parents[0])], nd.value.rank, nd.value.rows, nd.value.cols);
        break;
      case Op::Reshape:
        copy[size_t(i)] = reshape(copy[size_t(nd.parents[0])], nd.value.rank, nd.value.rows, nd.value.cols);
        break;
    }
  }
  return copy[size_t(root.id)].value();
}

}  // namespace imode::ad
