#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "imode/ode.hpp"

using imode::ContractError;
using imode::ad::Tape;
using imode::ad::Tensor;
using imode::ad::Var;
namespace ode = imode::ode;
namespace ad = imode::ad;

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;

// y'' = -y as a first-order pair; exact solution rotates (y0, y1)
const ode::RhsD harmonic = [](std::span<const double> y, std::span<double> dy) {
  dy[0] = y[1];
  dy[1] = -y[0];
};

void exact_harmonic(double t, double a, double b, double& y0, double& y1) {
  y0 = a * std::cos(t) + b * std::sin(t);
  y1 = -a * std::sin(t) + b * std::cos(t);
}

double endpoint_err(const ode::Trajectory& tr, double a, double b) {
  double e0, e1;
  exact_harmonic(tr.t.back(), a, b, e0, e1);
  std::span<const double> last = tr.row(tr.points() - 1);
  return std::hypot(last[0] - e0, last[1] - e1);
}

}  // namespace

TEST_CASE("grid validation rejects malformed grids") {
  CHECK_THROWS_AS(ode::validate_grid({}), ContractError);
  CHECK_THROWS_AS(ode::validate_grid({0.0, 0.0}), ContractError);
  CHECK_THROWS_AS(ode::validate_grid({0.0, 2.0, 1.0}), ContractError);
  CHECK_THROWS_AS(ode::validate_grid({0.0, std::nan("")}), ContractError);
  CHECK_NOTHROW(ode::validate_grid({-1.0, 0.5, 2.0}));
}

TEST_CASE("harmonic oscillator endpoint error over one period") {
  ode::SolverConfig cfg;
  cfg.rtol = 1e-8;
  cfg.atol = 1e-10;
  std::vector<double> y0{1.0, 0.5};
  ode::Trajectory tr = ode::dopri5(harmonic, y0, {0.0, kTau}, cfg);
  REQUIRE(tr.points() == 2);
  CHECK(endpoint_err(tr, 1.0, 0.5) < 1e-6);
}

TEST_CASE("dense output tracks the exact solution between steps") {
  ode::SolverConfig cfg;
  cfg.rtol = 1e-8;
  cfg.atol = 1e-10;
  std::vector<double> grid;
  for (int i = 0; i <= 200; ++i) grid.push_back(kTau * i / 200.0);
  ode::Trajectory tr = ode::dopri5(harmonic, std::vector<double>{1.0, 0.5}, grid, cfg);
  double worst = 0.0;
  for (size_t k = 0; k < tr.points(); ++k) {
    double e0, e1;
    exact_harmonic(tr.t[k], 1.0, 0.5, e0, e1);
    worst = std::max(worst, std::hypot(tr.row(k)[0] - e0, tr.row(k)[1] - e1));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("empirical convergence order sits at five") {
  auto err_at = [&](double h) {
    ode::SolverConfig cfg;
    cfg.fixed_dt = h;
    ode::Trajectory tr = ode::dopri5(harmonic, std::vector<double>{1.0, 0.5}, {0.0, 1.0}, cfg);
    return endpoint_err(tr, 1.0, 0.5);
  };
  double e1 = err_at(0.1), e2 = err_at(0.05), e3 = err_at(0.025);
  double p12 = std::log2(e1 / e2);
  double p23 = std::log2(e2 / e3);
  INFO("orders " << p12 << " " << p23);
  CHECK(p12 > 4.5);
  CHECK(p12 < 5.5);
  CHECK(p23 > 4.5);
  CHECK(p23 < 5.5);
}

TEST_CASE("integration is deterministic and the taped solver matches the plain one bitwise") {
  std::vector<double> grid;
  for (int i = 0; i <= 40; ++i) grid.push_back(0.1 * i);
  ode::SolverConfig cfg;
  cfg.rtol = 1e-6;
  cfg.atol = 1e-8;
  std::vector<double> y0{1.0, 0.5};

  ode::Trajectory a = ode::dopri5(harmonic, y0, grid, cfg);
  ode::Trajectory b = ode::dopri5(harmonic, y0, grid, cfg);
  CHECK(a.y == b.y);

  Tape tape;
  ode::RhsV rhs_v = [](Var y) { return concat(slice(y, 1, 1), neg(slice(y, 0, 1))); };
  std::vector<Var> states = ode::dopri5_vars(tape, rhs_v, tape.constant(Tensor::vec(y0)), grid, cfg);
  REQUIRE(states.size() == grid.size());
  for (size_t k = 0; k < grid.size(); ++k) {
    CHECK(states[k].value()[0] == a.row(k)[0]);
    CHECK(states[k].value()[1] == a.row(k)[1]);
  }
}

TEST_CASE("fixed-step endpoints are the step states themselves") {
  // grid spacing equal to the fixed step: every grid point is an accepted
  // step end, so a finer re-gridding of the same march must agree exactly
  ode::SolverConfig cfg;
  cfg.fixed_dt = 0.05;
  std::vector<double> coarse, fine;
  for (int i = 0; i <= 8; ++i) coarse.push_back(0.1 * i);
  for (int i = 0; i <= 16; ++i) fine.push_back(0.05 * i);
  ode::Trajectory c = ode::dopri5(harmonic, std::vector<double>{1.0, 0.5}, coarse, cfg);
  ode::Trajectory f = ode::dopri5(harmonic, std::vector<double>{1.0, 0.5}, fine, cfg);
  for (size_t k = 0; k < c.points(); ++k) {
    CHECK(c.row(k)[0] == f.row(2 * k)[0]);
    CHECK(c.row(k)[1] == f.row(2 * k)[1]);
  }
}

TEST_CASE("solver gradients match the closed form for exponential growth") {
  // y' = a y; dy(T)/da = y0 T e^{aT}, dy(T)/dy0 = e^{aT}
  double a0 = 0.7, y00 = 1.3, T = 1.5;
  ode::SolverConfig cfg;
  cfg.rtol = 1e-10;
  cfg.atol = 1e-12;
  ode::RhsFactory make = [](Tape&, const std::vector<Var>& ps) {
    Var a = ps[0];
    return [a](Var y) { return smul(a, y); };
  };
  ode::LossFn loss = [](Tape&, std::span<const Var> states) { return sum(states.back()); };
  std::vector<Tensor> params{Tensor::scalar(a0)};
  ode::GradientResult r =
      ode::integrate_with_gradients(make, loss, params, std::vector<double>{y00}, {0.0, T}, cfg);
  double eaT = std::exp(a0 * T);
  CHECK(r.loss == doctest::Approx(y00 * eaT).epsilon(1e-8));
  CHECK(r.dparams[0].data[0] == doctest::Approx(y00 * T * eaT).epsilon(1e-6));
  CHECK(r.dy0.data[0] == doctest::Approx(eaT).epsilon(1e-6));
}

TEST_CASE("solver gradients match finite differences on the same fixed discretization") {
  // fixed step keeps the discretization identical under perturbation, so the
  // tape gradient of the numerical endpoint is exactly comparable to FD
  double a0 = -0.9, y00 = 2.0;
  ode::SolverConfig cfg;
  cfg.fixed_dt = 0.05;
  ode::RhsFactory make = [](Tape&, const std::vector<Var>& ps) {
    Var a = ps[0];
    return [a](Var y) { return smul(a, mul(y, y)); };  // y' = a y^2
  };
  ode::LossFn loss = [](Tape&, std::span<const Var> states) {
    Var acc = dot(states.back(), states.back());
    return acc;
  };
  auto value_at = [&](double a, double y) {
    ode::RhsD rhs = [a](std::span<const double> s, std::span<double> d) { d[0] = a * s[0] * s[0]; };
    ode::Trajectory tr = ode::dopri5(rhs, std::vector<double>{y}, {0.0, 1.0}, cfg);
    double v = tr.row(1)[0];
    return v * v;
  };
  std::vector<Tensor> params{Tensor::scalar(a0)};
  ode::GradientResult r =
      ode::integrate_with_gradients(make, loss, params, std::vector<double>{y00}, {0.0, 1.0}, cfg);
  double h = 1e-6;
  double fda = (value_at(a0 + h, y00) - value_at(a0 - h, y00)) / (2 * h);
  double fdy = (value_at(a0, y00 + h) - value_at(a0, y00 - h)) / (2 * h);
  CHECK(r.dparams[0].data[0] == doctest::Approx(fda).epsilon(2e-6));
  CHECK(r.dy0.data[0] == doctest::Approx(fdy).epsilon(2e-6));
}

TEST_CASE("adaptive rejections leave usable gradients") {
  // a stiff-ish rhs that forces rejected trial steps; truncated correctly,
  // the surviving graph still differentiates to finite numbers that match
  // finite differences of the endpoint
  double a0 = 18.0;
  ode::SolverConfig cfg;
  cfg.rtol = 1e-6;
  cfg.atol = 1e-8;
  ode::RhsFactory make = [](Tape&, const std::vector<Var>& ps) {
    Var a = ps[0];
    return [a](Var y) { return neg(smul(a, y)); };  // fast decay
  };
  ode::LossFn loss = [](Tape&, std::span<const Var> states) { return sum(states.back()); };
  std::vector<Tensor> params{Tensor::scalar(a0)};
  ode::GradientResult r =
      ode::integrate_with_gradients(make, loss, params, std::vector<double>{1.0}, {0.0, 1.0}, cfg);
  CHECK(std::isfinite(r.dparams[0].data[0]));
  // exact: d/da e^{-a} = -e^{-a}
  CHECK(r.dparams[0].data[0] == doctest::Approx(-std::exp(-a0)).epsilon(1e-3));
}

TEST_CASE("finite-time blowup raises DivergenceError") {
  // y' = y^2 from y=1 escapes at t=1
  ode::RhsD rhs = [](std::span<const double> y, std::span<double> dy) { dy[0] = y[0] * y[0]; };
  ode::SolverConfig cfg;
  cfg.rtol = 1e-7;
  cfg.atol = 1e-9;
  try {
    ode::dopri5(rhs, std::vector<double>{1.0}, {0.0, 2.0}, cfg);
    FAIL("expected DivergenceError");
  } catch (const ode::DivergenceError& e) {
    CHECK(e.t_last <= 1.05);
    CHECK(e.t_last > 0.5);
  }

  SUBCASE("tiny step budgets also surface as divergence") {
    ode::SolverConfig small = cfg;
    small.max_steps = 3;
    CHECK_THROWS_AS(ode::dopri5(harmonic, std::vector<double>{1.0, 0.5}, {0.0, 50.0}, small),
                    ode::DivergenceError);
  }
}

TEST_CASE("rk4 reference converges at fourth order and honors the substep cap") {
  auto err_at = [&](double dt) {
    ode::Trajectory tr =
        ode::rk4_reference(harmonic, std::vector<double>{1.0, 0.5}, {0.0, 1.0}, dt);
    return endpoint_err(tr, 1.0, 0.5);
  };
  double e1 = err_at(0.1), e2 = err_at(0.05);
  double order = std::log2(e1 / e2);
  INFO("rk4 order " << order);
  CHECK(order > 3.7);
  CHECK(order < 4.3);

  CHECK_THROWS_AS(ode::rk4_reference(harmonic, std::vector<double>{1.0, 0.5}, {0.0, 1.0}, 0.0),
                  ContractError);

  ode::RhsD blow = [](std::span<const double> y, std::span<double> dy) { dy[0] = y[0] * y[0]; };
  CHECK_THROWS_AS(ode::rk4_reference(blow, std::vector<double>{1.0}, {0.0, 2.0}, 0.01),
                  ode::DivergenceError);
}

TEST_CASE("initial_dt override is honored without changing the solution class") {
  ode::SolverConfig cfg;
  cfg.rtol = 1e-8;
  cfg.atol = 1e-10;
  cfg.initial_dt = 1e-3;
  ode::Trajectory tr = ode::dopri5(harmonic, std::vector<double>{1.0, 0.5}, {0.0, kTau}, cfg);
  CHECK(endpoint_err(tr, 1.0, 0.5) < 1e-6);
}
