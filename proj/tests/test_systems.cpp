#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <vector>

#include "imode/io_util.hpp"
#include "imode/systems.hpp"

using imode::ContractError;
using imode::DataError;
using imode::Rng;
using imode::UsageError;
namespace sys = imode::sys;
namespace ode = imode::ode;
namespace io = imode::io;
namespace fs = std::filesystem;
using sys::Family;

namespace {

std::vector<double> eval_rhs(const ode::RhsD& rhs, std::vector<double> y) {
  std::vector<double> dy(y.size(), 0.0);
  rhs(y, dy);
  return dy;
}

double energy_drift(Family f, const std::vector<double>& phi, const std::vector<double>& ic,
                    double span, double sub_dt) {
  ode::RhsD rhs = sys::make_rhs(f, phi);
  ode::Trajectory tr = ode::rk4_reference(rhs, ic, sys::make_grid(span, span / 20.0), sub_dt);
  double e0 = sys::mech_energy(f, phi, tr.row(0));
  double worst = 0.0;
  for (size_t k = 1; k < tr.points(); ++k)
    worst = std::max(worst, std::fabs(sys::mech_energy(f, phi, tr.row(k)) - e0));
  return worst;
}

}  // namespace

TEST_CASE("family names round-trip and unknown names are rejected") {
  for (Family f : {Family::pendulum, Family::bistable, Family::vdp, Family::double_pendulum,
                   Family::wall, Family::kpp})
    CHECK(sys::parse_family(sys::family_name(f)) == f);
  CHECK_THROWS_AS(sys::parse_family("lorenz"), UsageError);
}

TEST_CASE("state and parameter dimensions") {
  CHECK(sys::state_dim(Family::pendulum) == 2);
  CHECK(sys::state_dim(Family::bistable) == 2);
  CHECK(sys::state_dim(Family::vdp) == 2);
  CHECK(sys::state_dim(Family::double_pendulum) == 4);
  CHECK(sys::state_dim(Family::wall) == 2);
  sys::KppOptions k;
  k.nodes = 31;
  CHECK(sys::state_dim(Family::kpp, k) == 31);

  CHECK(sys::phi_dim(Family::pendulum) == 1);
  CHECK(sys::phi_dim(Family::bistable) == 2);
  CHECK(sys::phi_dim(Family::vdp) == 3);
  CHECK(sys::phi_dim(Family::double_pendulum) == 2);
  CHECK(sys::phi_dim(Family::wall) == 1);
  CHECK(sys::phi_dim(Family::kpp) == 1);

  CHECK_THROWS_AS(sys::make_rhs(Family::pendulum, {1.0, 2.0}), ContractError);
  CHECK_THROWS_AS(sys::make_rhs(Family::bistable, {1.0}), ContractError);
}

TEST_CASE("right-hand sides match hand-derived values") {
  SUBCASE("pendulum") {
    auto dy = eval_rhs(sys::make_rhs(Family::pendulum, {2.0}), {0.5, -0.3});
    CHECK(dy[0] == -0.3);
    CHECK(dy[1] == doctest::Approx(-(9.81 / 2.0) * std::sin(0.5)).epsilon(1e-14));
  }
  SUBCASE("bistable") {
    auto dy = eval_rhs(sys::make_rhs(Family::bistable, {-0.5, 3.0}), {0.7, 0.2});
    CHECK(dy[0] == 0.2);
    CHECK(dy[1] == doctest::Approx(0.5 * 0.7 - 3.0 * 0.7 * 0.7 * 0.7).epsilon(1e-14));
  }
  SUBCASE("van der pol") {
    auto dy = eval_rhs(sys::make_rhs(Family::vdp, {1.5, 2.0, 0.5}), {0.3, -0.4});
    CHECK(dy[0] == -0.4);
    double expect = 1.5 * (1.0 - 2.0 * 0.3 * 0.3) * (-0.4) - 0.5 * 0.5 * 0.3;
    CHECK(dy[1] == doctest::Approx(expect).epsilon(1e-14));
  }
  SUBCASE("double pendulum hangs still at the stable equilibrium") {
    auto dy = eval_rhs(sys::make_rhs(Family::double_pendulum, {0.6, 0.7}), {0.0, 0.0, 0.0, 0.0});
    for (double v : dy) CHECK(v == 0.0);
  }
  SUBCASE("double pendulum horizontal release") {
    // theta1 = pi/2, theta2 = 0, at rest, both rods length 1: the inner
    // angular acceleration reduces to -(3g + g)/4 = -g, the outer one to
    // g cos(pi/2) which vanishes
    auto dy = eval_rhs(sys::make_rhs(Family::double_pendulum, {1.0, 1.0}),
                       {std::numbers::pi / 2.0, 0.0, 0.0, 0.0});
    CHECK(dy[2] == doctest::Approx(-9.81).epsilon(1e-12));
    CHECK(std::fabs(dy[3]) < 1e-14);
  }
  SUBCASE("wall force only acts during contact") {
    auto rhs = sys::make_rhs(Family::wall, {0.5});
    CHECK(eval_rhs(rhs, {0.6, 1.0})[1] == doctest::Approx(-100.0).epsilon(1e-14));
    CHECK(eval_rhs(rhs, {0.4, 1.0})[1] == 0.0);
    CHECK(eval_rhs(rhs, {0.5, 1.0})[1] == 0.0);
  }
  SUBCASE("kpp uniform field leaves only the reaction term") {
    sys::KppOptions k;
    k.nodes = 5;
    k.diffusivity = 0.05;
    auto dy = eval_rhs(sys::make_rhs(Family::kpp, {0.04}, k), {0.5, 0.5, 0.5, 0.5, 0.5});
    for (double v : dy) CHECK(v == 0.04 * 0.5 * (1.0 - 0.5));

    k.dirichlet = true;
    auto dyd = eval_rhs(sys::make_rhs(Family::kpp, {0.04}, k), {0.5, 0.5, 0.5, 0.5, 0.5});
    CHECK(dyd[0] == 0.0);
    CHECK(dyd[4] == 0.0);
    CHECK(dyd[2] == 0.04 * 0.5 * (1.0 - 0.5));
  }
}

TEST_CASE("kpp diffusion matrix agrees with the rhs and conserves constants") {
  sys::KppOptions k;
  k.nodes = 9;
  k.diffusivity = 0.05;
  std::vector<double> m = sys::kpp_diffusion_matrix(k);
  int n = k.nodes;
  double dh2 = k.diffusivity * double(n - 1) * double(n - 1);

  for (int i = 0; i < n; ++i) {
    double row_sum = 0.0;
    for (int j = 0; j < n; ++j) row_sum += m[size_t(i) * size_t(n) + size_t(j)];
    CHECK(std::fabs(row_sum) <= 1e-12 * dh2);
  }
  CHECK(m[1 * size_t(n) + 1] == doctest::Approx(-2.0 * dh2));
  CHECK(m[1 * size_t(n) + 0] == doctest::Approx(dh2));
  CHECK(m[0 * size_t(n) + 1] == doctest::Approx(2.0 * dh2));  // mirrored end

  // matrix times u reproduces the r=0 rhs
  Rng rng(7);
  std::vector<double> u(static_cast<size_t>(n));
  for (double& v : u) v = rng.uniform(0.0, 1.0);
  auto dy = eval_rhs(sys::make_rhs(Family::kpp, {0.0}, k), u);
  for (int i = 0; i < n; ++i) {
    double mv = 0.0;
    for (int j = 0; j < n; ++j) mv += m[size_t(i) * size_t(n) + size_t(j)] * u[size_t(j)];
    CHECK(dy[size_t(i)] == doctest::Approx(mv).epsilon(1e-12).scale(dh2));
  }

  k.dirichlet = true;
  std::vector<double> md = sys::kpp_diffusion_matrix(k);
  for (int j = 0; j < n; ++j) {
    CHECK(md[size_t(0) * size_t(n) + size_t(j)] == 0.0);
    CHECK(md[size_t(n - 1) * size_t(n) + size_t(j)] == 0.0);
  }
}

TEST_CASE("mechanical energy is conserved along reference trajectories") {
  CHECK(energy_drift(Family::pendulum, {3.0}, {std::numbers::pi / 2.0, 0.0}, 5.0, 1e-3) < 1e-9);
  CHECK(energy_drift(Family::bistable, {-0.7, 3.5}, {1.2, 0.3}, 5.0, 1e-3) < 1e-9);
  CHECK(energy_drift(Family::double_pendulum, {0.6, 0.7},
                     {std::numbers::pi / 4.0, std::numbers::pi / 4.0, 0.0, 0.0}, 3.0, 1e-3) < 1e-7);
  CHECK(energy_drift(Family::wall, {0.4}, {0.0, 1.0}, 2.0, 1e-5) < 1e-8);

  CHECK_THROWS_AS(sys::mech_energy(Family::vdp, std::vector<double>{1.0, 1.0, 1.0},
                                   std::vector<double>{0.0, 0.0}),
                  ContractError);
  CHECK_THROWS_AS(
      sys::mech_energy(Family::kpp, std::vector<double>{0.01}, std::vector<double>{0.5}),
      ContractError);
}

TEST_CASE("grid construction enforces the whole-multiple contract") {
  std::vector<double> g = sys::make_grid(1.0, 0.1);
  REQUIRE(g.size() == 11);
  CHECK(g[0] == 0.0);
  CHECK(g[10] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(g[3] == 3 * 0.1);

  CHECK_THROWS_AS(sys::make_grid(1.0, 0.3), ContractError);
  CHECK_THROWS_AS(sys::make_grid(0.05, 0.1), ContractError);
  CHECK_THROWS_AS(sys::make_grid(-1.0, 0.1), ContractError);
}

TEST_CASE("dataset round-trip, determinism, and the training view") {
  fs::path base = fs::temp_directory_path() / "imode_sys_test";
  fs::remove_all(base);

  sys::DatasetSpec spec;
  spec.family = Family::pendulum;
  spec.phis = {{2.0}, {5.0}};
  spec.ics = {{1.0, 0.0}, {0.5, 0.1}};
  spec.dt = 0.05;
  spec.span = 0.5;
  spec.seed = 99;
  sys::generate_dataset(spec, base / "a", 0xabcdef0123456789ULL);
  sys::generate_dataset(spec, base / "b", 0xabcdef0123456789ULL);

  SUBCASE("reruns produce byte-identical files") {
    std::map<std::string, std::string> fa, fb;
    for (const auto& e : fs::recursive_directory_iterator(base / "a"))
      if (e.is_regular_file())
        fa[fs::relative(e.path(), base / "a").string()] = io::read_text(e.path());
    for (const auto& e : fs::recursive_directory_iterator(base / "b"))
      if (e.is_regular_file())
        fb[fs::relative(e.path(), base / "b").string()] = io::read_text(e.path());
    REQUIRE(fa.size() == 5);  // manifest + 2x2 trajectories
    CHECK(fa == fb);
  }

  SUBCASE("loading restores every recorded field") {
    sys::Dataset ds = sys::load_dataset(base / "a");
    CHECK(ds.family == Family::pendulum);
    CHECK(ds.dt == 0.05);
    CHECK(ds.span == 0.5);
    CHECK(ds.dim == 2);
    CHECK(ds.seed == 99);
    REQUIRE(ds.phis.size() == 2);
    CHECK(ds.phis[0] == std::vector<double>{2.0});
    CHECK(ds.phis[1] == std::vector<double>{5.0});
    REQUIRE(ds.instances.size() == 2);
    REQUIRE(ds.instances[0].size() == 2);
    const ode::Trajectory& tr = ds.instances[0][0];
    REQUIRE(tr.points() == 11);
    CHECK(tr.t == sys::make_grid(0.5, 0.05));
    CHECK(tr.row(0)[0] == 1.0);
    CHECK(tr.row(0)[1] == 0.0);

    // stored samples must match a fresh reference solve bit for bit
    ode::Trajectory ref = ode::rk4_reference(sys::make_rhs(Family::pendulum, {2.0}),
                                             std::vector<double>{1.0, 0.0},
                                             sys::make_grid(0.5, 0.05), 0.005);
    CHECK(tr.y == ref.y);

    sys::TrainingView v = sys::training_view(ds);
    CHECK(v.family == ds.family);
    CHECK(v.dt == ds.dt);
    CHECK(v.dim == ds.dim);
    CHECK(v.n_instances() == 2);
    CHECK(v.n_traj(0) == 2);
    CHECK(&v.traj(1, 0) == &ds.instances[1][0]);
  }

  SUBCASE("window sampling is deterministic and in bounds") {
    sys::Dataset ds = sys::load_dataset(base / "a");
    sys::TrainingView v = sys::training_view(ds);
    Rng r1(42), r2(42);
    auto w1 = sys::sample_windows(v, 0, 0.2, 50, r1);
    auto w2 = sys::sample_windows(v, 0, 0.2, 50, r2);
    REQUIRE(w1.size() == 50);
    bool same = true, moved = false;
    for (size_t i = 0; i < w1.size(); ++i) {
      same = same && w1[i].traj == w2[i].traj && w1[i].start == w2[i].start;
      moved = moved || w1[i].start != w1[0].start;
      CHECK(w1[i].len == 5);  // 0.2 s at dt 0.05, inclusive ends
      CHECK(w1[i].start + w1[i].len <= w1[i].traj->points());
      CHECK(w1[i].grid() == std::vector<double>(w1[i].traj->t.begin() + long(w1[i].start),
                                                w1[i].traj->t.begin() +
                                                    long(w1[i].start + w1[i].len)));
    }
    CHECK(same);
    CHECK(moved);

    CHECK_THROWS_AS(sys::sample_windows(v, 5, 0.2, 1, r1), ContractError);
    CHECK_THROWS_AS(sys::sample_windows(v, 0, 10.0, 1, r1), ContractError);
  }

  SUBCASE("loader rejects missing or mangled manifests") {
    CHECK_THROWS_AS(sys::load_dataset(base / "missing"), DataError);
    io::ensure_dir(base / "broken");
    io::write_text_atomic(base / "broken" / "manifest.json", "{ not json");
    CHECK_THROWS_AS(sys::load_dataset(base / "broken"), DataError);
    io::write_text_atomic(base / "broken" / "manifest.json", "{\"family\": \"pendulum\"}");
    CHECK_THROWS_AS(sys::load_dataset(base / "broken"), DataError);
  }

  SUBCASE("dataset generation validates its inputs") {
    sys::DatasetSpec bad = spec;
    bad.ics = {{1.0, 0.0, 0.0}};
    CHECK_THROWS_AS(sys::generate_dataset(bad, base / "c", 0), ContractError);
    bad = spec;
    bad.phis.clear();
    CHECK_THROWS_AS(sys::generate_dataset(bad, base / "c", 0), ContractError);
  }

  fs::remove_all(base);
}

TEST_CASE("experiment protocols have the documented shapes") {
  sys::Protocol p = sys::protocol(Family::pendulum);
  CHECK(p.train.phis.size() == 5);
  CHECK(p.train.ics.size() == 1);
  CHECK(p.test_phis.size() == 8);
  CHECK(p.train.phis[0] == std::vector<double>{1.0});

  p = sys::protocol(Family::bistable);
  CHECK(p.train.phis.size() == 20);
  CHECK(p.train.ics.size() == 18);
  CHECK(p.test_phis.size() == 3);
  for (const auto& phi : p.train.phis) {
    CHECK(phi[0] <= -0.4);
    CHECK(phi[0] >= -1.0);
    CHECK(phi[1] >= 2.0);
    CHECK(phi[1] <= 5.0);
  }

  p = sys::protocol(Family::vdp);
  CHECK(p.train.phis.size() == 27);
  CHECK(p.train.ics.size() == 18);
  CHECK(p.test_phis.size() == 3);

  p = sys::protocol(Family::double_pendulum);
  CHECK(p.train.phis.size() == 16);
  CHECK(p.train.ics.size() == 1);
  CHECK(p.train.ics[0].size() == 4);

  p = sys::protocol(Family::wall);
  CHECK(p.train.phis.size() == 10);
  CHECK(p.train.ics.size() == 3);

  p = sys::protocol(Family::kpp);
  CHECK(p.train.phis.size() == 5);
  CHECK(p.train.kpp.diffusivity == 0.05);
  CHECK(p.train.kpp.nodes == 21);
  CHECK_FALSE(p.train.kpp.dirichlet);
  CHECK(p.test_phis == std::vector<std::vector<double>>{{0.034}});
  REQUIRE(p.train.ics.size() == 6);
  for (const auto& ic : p.train.ics) {
    REQUIRE(ic.size() == 21);
    for (double u : ic) {
      CHECK(u >= 0.05);
      CHECK(u <= 0.95);
    }
  }
}

TEST_CASE("random parameter draws stay inside the family box") {
  struct Box {
    Family f;
    std::vector<std::pair<double, double>> ranges;
  };
  std::vector<Box> boxes = {
      {Family::pendulum, {{1.0, 10.0}}},
      {Family::bistable, {{-1.0, -0.4}, {2.0, 5.0}}},
      {Family::vdp, {{1.0, 3.0}, {1.0, 3.0}, {0.5, 1.5}}},
      {Family::double_pendulum, {{0.5, 0.8}, {0.5, 0.8}}},
      {Family::wall, {{0.1, 1.0}}},
      {Family::kpp, {{0.01, 0.05}}},
  };
  for (const Box& b : boxes) {
    Rng rng(11);
    for (int k = 0; k < 300; ++k) {
      std::vector<double> phi = sys::random_phi(b.f, rng);
      REQUIRE(phi.size() == b.ranges.size());
      for (size_t i = 0; i < phi.size(); ++i) {
        CHECK(phi[i] >= b.ranges[i].first);
        CHECK(phi[i] <= b.ranges[i].second);
      }
    }
  }
  Rng r1(5), r2(5);
  CHECK(sys::random_phi(Family::vdp, r1) == sys::random_phi(Family::vdp, r2));
}
