#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "imode/tensor.hpp"

namespace imode::ad {

enum class Op : uint8_t {
  Leaf,
  Const,
  Add,
  Sub,
  Neg,
  Mul,       // elementwise
  SMul,      // scalar node * tensor
  Scale,     // c * a, c compile-time constant
  AffC,      // k * a + c elementwise, constants
  LinComb,   // sum_i c_i * p_i, same shapes (fused RK stage combinations)
  MatMul,    // op(A) * op(B) with transpose flags
  Outer,     // a (m) x b (n) -> m x n
  Affine,    // x W^T + b; vector or row-batched input
  Dot,
  Sum,
  ColSum,    // rank2 -> rank1 sum over rows
  Softplus,
  Sigmoid,
  Exp,
  Sin,
  Cos,
  WrapAngle,  // identity with unit derivative, wraps value to (-pi, pi]
  Square,
  Concat,  // rank1 ++ rank1
  Slice,   // rank1 subrange
  Pad,     // rank1 embedded into zeros at offset (adjoint of Slice)
  Row,     // rank2 row -> rank1
  PadRow,  // rank1 embedded as row i of zero matrix
  RowRep,  // rank1 -> rank2 with r identical rows
  HCat,    // rank2 column concat
  SFill,   // scalar broadcast to shape
  Reshape,
};

const char* op_name(Op op);

class Tape;

// Handle into a tape. Cheap to copy; values live on the tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

struct Node {
  Op op;
  uint8_t depth = 0;  // backward sweeps active at emission: 0 primal, 1, 2
  bool requires_grad = false;  // leaves only
  int np = 0;
  int parents[8] = {0};
  Tensor value;
  // op-specific constants: LinComb coefficients, Scale/AffC constants,
  // Slice/Pad offsets, MatMul transpose flags, target shapes.
  std::vector<double> aux;
};

enum class GradMode { value, graph };

// Eager define-by-run tape. Nodes are appended in evaluation order, so parent
// ids are always smaller than child ids and a single reverse sweep is a valid
// topological order. Rejected solver steps are discarded with truncate(),
// which also recycles the value buffers.
class Tape {
 public:
  std::vector<Node> nodes;

  Var leaf(Tensor v, bool requires_grad_ = true);
  Var constant(Tensor v);
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  size_t mark() const { return nodes.size(); }
  void truncate(size_t m);
  void clear() { truncate(0); }

  const Tensor& val(int id) const { return nodes[size_t(id)].value; }

  // Depth stamped onto nodes as they are emitted; graph-mode backward sweeps
  // raise it for their duration so derivative graphs are recognizable.
  uint8_t emit_depth = 0;

  Node& push(Op op, std::initializer_list<int> ps);
  Node& push(Op op, const int* ps, int n);

  std::vector<std::vector<double>> buf_pool;
  std::vector<double> acquire_buf(size_t n);
  void release_buf(std::vector<double>&& b);
};

// ---- op builders ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var neg(Var a);
Var mul(Var a, Var b);
Var smul(Var s, Var a);
Var scale(Var a, double c);
Var affc(Var a, double k, double c);
Var lincomb(std::span<const Var> ps, std::span<const double> cs);
Var matmul(Var a, Var b, bool ta = false, bool tb = false);
Var outer(Var a, Var b);
Var affine(Var x, Var w, Var b);
Var dot(Var a, Var b);
Var sum(Var a);
Var colsum(Var a);
Var softplus(Var a);
Var sigmoid(Var a);
Var vexp(Var a);
Var vsin(Var a);
Var vcos(Var a);
Var wrap_angle(Var a);
Var square(Var a);
Var concat(Var a, Var b);
Var slice(Var a, int off, int len);
Var pad(Var a, int off, int total);
Var row(Var a, int i);
Var pad_row(Var a, int i, int rows);
Var rowrep(Var a, int r);
Var hcat(Var a, Var b);
Var sfill(Var s, int rank, int rows, int cols);
Var reshape(Var a, int rank, int rows, int cols);

// Reverse-mode gradient of a scalar root with respect to wrt leaves/nodes.
// value mode returns plain tensors; graph mode returns Vars recorded on the
// same tape, which may be differentiated once more (depth cap 2).
std::vector<Tensor> grad_values(Var root, std::span<const Var> wrt);
std::vector<Var> grad_graph(Var root, std::span<const Var> wrt);

// Re-run the forward kernels over the recorded graph and return the root's
// recomputed value (determinism check helper).
Tensor replay_value(Var root);

}  // namespace imode::ad
