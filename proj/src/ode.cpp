#include "imode/ode.hpp"

#include <array>
#include <cfloat>
#include <cmath>

#include "imode/io_util.hpp"

namespace imode::ode {

using ad::Tape;
using ad::Tensor;
using ad::Var;

DivergenceError::DivergenceError(const std::string& what, double t)
    : NumericError(what + " at t=" + io::fmt17(t)), t_last(t) {}

void validate_grid(const std::vector<double>& grid) {
  if (grid.empty()) throw ContractError("time grid is empty");
  for (double v : grid)
    if (!std::isfinite(v)) throw ContractError("time grid has non-finite entries");
  for (size_t i = 1; i < grid.size(); ++i)
    if (grid[i] <= grid[i - 1]) throw ContractError("time grid must be strictly increasing");
}

namespace {

// Dormand-Prince 5(4) tableau
constexpr double A21 = 1.0 / 5;
constexpr double A31 = 3.0 / 40, A32 = 9.0 / 40;
constexpr double A41 = 44.0 / 45, A42 = -56.0 / 15, A43 = 32.0 / 9;
constexpr double A51 = 19372.0 / 6561, A52 = -25360.0 / 2187, A53 = 64448.0 / 6561,
                 A54 = -212.0 / 729;
constexpr double A61 = 9017.0 / 3168, A62 = -355.0 / 33, A63 = 46732.0 / 5247, A64 = 49.0 / 176,
                 A65 = -5103.0 / 18656;
constexpr double B1 = 35.0 / 384, B3 = 500.0 / 1113, B4 = 125.0 / 192, B5 = -2187.0 / 6784,
                 B6 = 11.0 / 84;
// b - b*, the embedded 4th order error weights
constexpr double E1 = 71.0 / 57600, E3 = -71.0 / 16695, E4 = 71.0 / 1920,
                 E5 = -17253.0 / 339200, E6 = 22.0 / 525, E7 = -1.0 / 40;
// dense output weights
constexpr double D1 = -12715105075.0 / 11282082432.0, D3 = 87487479700.0 / 32700410799.0,
                 D4 = -10690763975.0 / 1880347072.0, D5 = 701980252875.0 / 199316789632.0,
                 D6 = -1453857185.0 / 822651844.0, D7 = 69997945.0 / 29380423.0;

// step controller constants (PI, as in the classic dopri5 implementation)
constexpr double SAFE = 0.9, BETA = 0.04, EXPO1 = 0.2 - BETA * 0.75;
constexpr double FAC_MIN_INV = 5.0;   // never shrink by more than 1/5
constexpr double FAC_MAX_INV = 0.1;   // never grow by more than 10x

struct VecOps {
  using S = std::vector<double>;
  const RhsD* f;
  int dim;
  S y;

  S rhs(const S& x) {
    S out(static_cast<size_t>(dim));
    (*f)(x, out);
    return out;
  }
  S lin(std::span<const S* const> xs, std::span<const double> cs) {
    S out(size_t(dim), 0.0);
    for (size_t q = 0; q < xs.size(); ++q) {
      double c = cs[q];
      const double* p = xs[q]->data();
      for (int i = 0; i < dim; ++i) out[size_t(i)] += c * p[i];
    }
    return out;
  }
  const double* raw(const S& s) const { return s.data(); }
  size_t mark() const { return 0; }
  void rollback(size_t) {}
};

struct VarOps {
  using S = Var;
  Tape* tape;
  const RhsV* f;
  int dim;
  S y;

  S rhs(const S& x) {
    Var out = (*f)(x);
    if (out.value().rank != 1 || out.value().rows != dim)
      throw ContractError("rhs returned shape " + out.value().shape_str() + ", state is (" +
                          std::to_string(dim) + ")");
    return out;
  }
  S lin(std::span<const S* const> xs, std::span<const double> cs) {
    std::array<Var, 8> vs;
    for (size_t q = 0; q < xs.size(); ++q) vs[q] = *xs[q];
    return ad::lincomb(std::span<const Var>(vs.data(), xs.size()), cs);
  }
  const double* raw(const S& s) const { return s.value().data.data(); }
  size_t mark() const { return tape->mark(); }
  void rollback(size_t m) { tape->truncate(m); }
};

template <class Ops>
double scaled_err_norm(Ops& ops, int dim, const SolverConfig& cfg, double h, const double* ry,
                       const double* ry1, const double* r1, const double* r3, const double* r4,
                       const double* r5, const double* r6, const double* r7) {
  double acc = 0.0;
  for (int i = 0; i < dim; ++i) {
    double e = h * (E1 * r1[i] + E3 * r3[i] + E4 * r4[i] + E5 * r5[i] + E6 * r6[i] + E7 * r7[i]);
    double sk = cfg.atol + cfg.rtol * std::max(std::fabs(ry[i]), std::fabs(ry1[i]));
    double q = e / sk;
    acc += q * q;
  }
  return std::sqrt(acc / double(dim));
}

template <class Ops>
double initial_step(Ops& ops, const typename Ops::S& k1, double t0, double tend,
                    const SolverConfig& cfg) {
  int n = ops.dim;
  const double* y = ops.raw(ops.y);
  const double* f0 = ops.raw(k1);
  double d0 = 0, d1 = 0;
  for (int i = 0; i < n; ++i) {
    double sk = cfg.atol + cfg.rtol * std::fabs(y[i]);
    d0 += (y[i] / sk) * (y[i] / sk);
    d1 += (f0[i] / sk) * (f0[i] / sk);
  }
  d0 = std::sqrt(d0 / n);
  d1 = std::sqrt(d1 / n);
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  h0 = std::min(h0, tend - t0);
  // one explicit Euler probe to estimate the second derivative scale
  size_t mk = ops.mark();
  double d2;
  {
    const typename Ops::S* xs[2] = {&ops.y, &k1};
    double cs[2] = {1.0, h0};
    typename Ops::S y1 = ops.lin(std::span<const typename Ops::S* const>(xs, 2), std::span<const double>(cs, 2));
    typename Ops::S f1 = ops.rhs(y1);
    const double* r1 = ops.raw(f1);
    double acc = 0;
    for (int i = 0; i < n; ++i) {
      double sk = cfg.atol + cfg.rtol * std::fabs(y[i]);
      double q = (r1[i] - f0[i]) / sk;
      acc += q * q;
    }
    d2 = std::sqrt(acc / n) / h0;
  }
  ops.rollback(mk);
  double dm = std::max(d1, d2);
  double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
  return std::min(100 * h0, std::min(h1, tend - t0));
}

template <class Ops, class Emit>
void dopri5_run(Ops& ops, const std::vector<double>& grid, const SolverConfig& cfg, Emit emit) {
  const int dim = ops.dim;
  const double t0 = grid.front(), tend = grid.back();
  const double teps = 1e-12 * std::max(1.0, std::fabs(tend));
  emit(0, ops.y);
  size_t gi = 1;
  if (gi >= grid.size()) return;

  double t = t0;
  typename Ops::S k1 = ops.rhs(ops.y);
  const bool fixed = cfg.fixed_dt > 0.0;
  double h = fixed ? cfg.fixed_dt
                   : (cfg.initial_dt > 0.0 ? cfg.initial_dt : initial_step(ops, k1, t0, tend, cfg));
  double facold = 1e-4;
  long steps = 0;

  using S = typename Ops::S;
  auto lin = [&](std::initializer_list<const S*> xs, std::initializer_list<double> cs) {
    return ops.lin(std::span<const S* const>(xs.begin(), xs.size()),
                   std::span<const double>(cs.begin(), cs.size()));
  };

  while (t < tend - teps) {
    if (++steps > cfg.max_steps)
      throw DivergenceError("step count exceeded " + std::to_string(cfg.max_steps), t);
    bool last = false;
    if (t + h >= tend - teps) {
      h = tend - t;
      last = true;
    }
    if (!(h > 4.0 * DBL_EPSILON * std::max(std::fabs(t), 1.0)))
      throw DivergenceError("step size underflow", t);

    size_t mk = ops.mark();
    S ys = lin({&ops.y, &k1}, {1.0, h * A21});
    S k2 = ops.rhs(ys);
    ys = lin({&ops.y, &k1, &k2}, {1.0, h * A31, h * A32});
    S k3 = ops.rhs(ys);
    ys = lin({&ops.y, &k1, &k2, &k3}, {1.0, h * A41, h * A42, h * A43});
    S k4 = ops.rhs(ys);
    ys = lin({&ops.y, &k1, &k2, &k3, &k4}, {1.0, h * A51, h * A52, h * A53, h * A54});
    S k5 = ops.rhs(ys);
    ys = lin({&ops.y, &k1, &k2, &k3, &k4, &k5}, {1.0, h * A61, h * A62, h * A63, h * A64, h * A65});
    S k6 = ops.rhs(ys);
    S y1 = lin({&ops.y, &k1, &k3, &k4, &k5, &k6},
               {1.0, h * B1, h * B3, h * B4, h * B5, h * B6});
    S k7 = ops.rhs(y1);  // FSAL

    if (fixed) {
      bool ok = true;
      const double* ry1 = ops.raw(y1);
      for (int i = 0; i < dim; ++i)
        if (!std::isfinite(ry1[i])) ok = false;
      if (!ok) throw DivergenceError("non-finite state", t);
    } else {
      double err = scaled_err_norm(ops, dim, cfg, h, ops.raw(ops.y), ops.raw(y1), ops.raw(k1),
                                   ops.raw(k3), ops.raw(k4), ops.raw(k5), ops.raw(k6), ops.raw(k7));
      if (!std::isfinite(err)) {
        ops.rollback(mk);
        h *= 0.1;
        continue;
      }
      if (err > 1.0) {
        double fac11 = std::pow(err, EXPO1);
        ops.rollback(mk);
        h = h / std::min(FAC_MIN_INV, fac11 / SAFE);
        continue;
      }
      double fac11 = std::pow(err, EXPO1);
      double fac = fac11 / std::pow(facold, BETA);
      fac = std::max(FAC_MAX_INV, std::min(FAC_MIN_INV, fac / SAFE));
      facold = std::max(err, 1e-4);
      double hnew = h / fac;
      // emit below, then adopt hnew
      double tn = last ? tend : t + h;
      while (gi < grid.size() && grid[gi] <= tn + teps) {
        double tg = grid[gi];
        if (std::fabs(tg - tn) <= teps) {
          emit(gi, y1);
        } else {
          double th = (tg - t) / h;
          double t1 = th, t2 = th * (1 - th), t3 = th * th * (1 - th),
                 t4 = th * th * (1 - th) * (1 - th);
          S u = lin({&ops.y, &y1, &k1, &k3, &k4, &k5, &k6, &k7},
                    {1 - t1 + t2 - 2 * t3, t1 - t2 + 2 * t3, h * (t2 - t3 + t4 * D1), h * t4 * D3,
                     h * t4 * D4, h * t4 * D5, h * t4 * D6, h * (-t3 + t4 * D7)});
          emit(gi, u);
        }
        ++gi;
      }
      ops.y = y1;
      k1 = k7;
      t = tn;
      h = hnew;
      continue;
    }

    // fixed-step accept path
    double tn = last ? tend : t + h;
    while (gi < grid.size() && grid[gi] <= tn + teps) {
      double tg = grid[gi];
      if (std::fabs(tg - tn) <= teps) {
        emit(gi, y1);
      } else {
        double th = (tg - t) / h;
        double t1 = th, t2 = th * (1 - th), t3 = th * th * (1 - th),
               t4 = th * th * (1 - th) * (1 - th);
        S u = lin({&ops.y, &y1, &k1, &k3, &k4, &k5, &k6, &k7},
                  {1 - t1 + t2 - 2 * t3, t1 - t2 + 2 * t3, h * (t2 - t3 + t4 * D1), h * t4 * D3,
                   h * t4 * D4, h * t4 * D5, h * t4 * D6, h * (-t3 + t4 * D7)});
        emit(gi, u);
      }
      ++gi;
    }
    ops.y = y1;
    k1 = k7;
    t = tn;
  }

  // floating point wiggle can leave trailing grid points equal to tend
  while (gi < grid.size()) emit(gi++, ops.y);
}

}  // namespace

Trajectory dopri5(const RhsD& rhs, std::span<const double> y0, const std::vector<double>& grid,
                  const SolverConfig& cfg) {
  validate_grid(grid);
  VecOps ops{&rhs, int(y0.size()), std::vector<double>(y0.begin(), y0.end())};
  Trajectory out;
  out.t = grid;
  out.dim = ops.dim;
  out.y.assign(grid.size() * y0.size(), 0.0);
  dopri5_run(ops, grid, cfg, [&](size_t gi, const std::vector<double>& s) {
    std::copy(s.begin(), s.end(), out.row(gi).begin());
  });
  return out;
}

std::vector<Var> dopri5_vars(Tape& tape, const RhsV& rhs, Var y0, const std::vector<double>& grid,
                             const SolverConfig& cfg) {
  validate_grid(grid);
  if (y0.value().rank != 1) throw ContractError("dopri5_vars: y0 must be rank 1");
  VarOps ops{&tape, &rhs, y0.value().rows, y0};
  std::vector<Var> out(grid.size());
  dopri5_run(ops, grid, cfg, [&](size_t gi, Var s) { out[gi] = s; });
  return out;
}

Trajectory rk4_reference(const RhsD& rhs, std::span<const double> y0,
                         const std::vector<double>& grid, double dt) {
  validate_grid(grid);
  if (!(dt > 0)) throw ContractError("rk4_reference: dt must be positive");
  int dim = int(y0.size());
  Trajectory out;
  out.t = grid;
  out.dim = dim;
  out.y.assign(grid.size() * y0.size(), 0.0);
  std::vector<double> y(y0.begin(), y0.end());
  std::copy(y.begin(), y.end(), out.row(0).begin());
  std::vector<double> k1(dim), k2(dim), k3(dim), k4(dim), tmp(dim);
  for (size_t g = 1; g < grid.size(); ++g) {
    double span = grid[g] - grid[g - 1];
    int nsub = std::max(1, int(std::ceil(span / dt - 1e-12)));
    double h = span / nsub;
    for (int s = 0; s < nsub; ++s) {
      rhs(y, k1);
      for (int i = 0; i < dim; ++i) tmp[size_t(i)] = y[size_t(i)] + 0.5 * h * k1[size_t(i)];
      rhs(tmp, k2);
      for (int i = 0; i < dim; ++i) tmp[size_t(i)] = y[size_t(i)] + 0.5 * h * k2[size_t(i)];
      rhs(tmp, k3);
      for (int i = 0; i < dim; ++i) tmp[size_t(i)] = y[size_t(i)] + h * k3[size_t(i)];
      rhs(tmp, k4);
      for (int i = 0; i < dim; ++i)
        y[size_t(i)] += h / 6.0 * (k1[size_t(i)] + 2 * k2[size_t(i)] + 2 * k3[size_t(i)] + k4[size_t(i)]);
    }
    for (int i = 0; i < dim; ++i) {
      if (!std::isfinite(y[size_t(i)])) throw DivergenceError("non-finite state", grid[g]);
    }
    std::copy(y.begin(), y.end(), out.row(g).begin());
  }
  return out;
}

GradientResult integrate_with_gradients(const RhsFactory& make_rhs, const LossFn& loss,
                                        std::span<const Tensor> params, std::span<const double> y0,
                                        const std::vector<double>& grid, const SolverConfig& cfg) {
  Tape tape;
  std::vector<Var> pvars;
  pvars.reserve(params.size());
  for (const Tensor& p : params) pvars.push_back(tape.leaf(p, true));
  Var y0v = tape.leaf(Tensor::vec(std::vector<double>(y0.begin(), y0.end())), true);
  RhsV rhs = make_rhs(tape, pvars);
  std::vector<Var> states = dopri5_vars(tape, rhs, y0v, grid, cfg);
  Var l = loss(tape, states);
  if (l.value().numel() != 1) throw ContractError("loss functional must return a scalar");
  std::vector<Var> wrt = pvars;
  wrt.push_back(y0v);
  std::vector<Tensor> grads = ad::grad_values(l, wrt);
  GradientResult res;
  res.loss = l.value().data[0];
  res.dy0 = std::move(grads.back());
  grads.pop_back();
  res.dparams = std::move(grads);
  return res;
}

}  // namespace imode::ode
