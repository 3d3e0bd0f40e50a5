#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "imode/analysis.hpp"

using imode::ContractError;
using imode::DataError;
using imode::NumericError;
using imode::Rng;
using imode::UsageError;
namespace an = imode::analysis;
namespace ode = imode::ode;
namespace net = imode::net;
namespace io = imode::io;
namespace fs = std::filesystem;

namespace {

// rank-2 cloud in 4d: mean + a*u + b*v with orthonormal u, v and coefficient
// lists chosen mean-free and mutually orthogonal, so the covariance in the
// (u, v) plane is already diagonal and the spectrum is known in closed form
struct Rank2Cloud {
  std::vector<std::vector<double>> rows;
  std::vector<double> u{0.5, 0.5, 0.5, 0.5};
  std::vector<double> v{0.5, -0.5, 0.5, -0.5};
  std::vector<double> mean{1.0, 2.0, 3.0, 4.0};
  double var_a = 22.0 / 5.0;
  double var_b = 14.0 / 5.0;

  Rank2Cloud() {
    std::vector<double> a{3.0, -1.0, 2.0, 0.0, -2.0, -2.0};
    std::vector<double> b{2.0, 0.0, -3.0, 1.0, 0.0, 0.0};
    for (size_t k = 0; k < a.size(); ++k) {
      std::vector<double> r(4);
      for (int i = 0; i < 4; ++i) r[size_t(i)] = mean[size_t(i)] + a[k] * u[size_t(i)] + b[k] * v[size_t(i)];
      rows.push_back(std::move(r));
    }
  }
};

double abs_dot(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return std::fabs(s);
}

an::GaugeFit identity_gauge(int d_eta, int d_phi, int n_points) {
  // zero fitting iterations leave the identity-initialized flow untouched
  an::GaugeConfig cfg;
  cfg.iters = 0;
  cfg.block_width = 8;
  cfg.num_blocks = 2;
  std::vector<std::vector<double>> etas, phis;
  Rng rng(3);
  for (int i = 0; i < n_points; ++i) {
    std::vector<double> e, p;
    for (int j = 0; j < d_eta; ++j) e.push_back(rng.uniform(-1.0, 1.0));
    for (int j = 0; j < d_phi; ++j) p.push_back(rng.uniform(-1.0, 1.0));
    etas.push_back(e);
    phis.push_back(p);
  }
  return an::gauge_fit(etas, phis, cfg);
}

}  // namespace

TEST_CASE("pca recovers a planted rank-2 spectrum exactly") {
  Rank2Cloud c;
  an::PcaResult r = an::pca_spectrum(c.rows);

  REQUIRE(r.eigenvalues.size() == 4);
  CHECK(r.eigenvalues[0] == doctest::Approx(c.var_a).epsilon(1e-12));
  CHECK(r.eigenvalues[1] == doctest::Approx(c.var_b).epsilon(1e-12));
  CHECK(r.eigenvalues[2] < 1e-12);
  CHECK(r.eigenvalues[3] < 1e-12);
  CHECK_FALSE(r.zero_variance);

  double total = c.var_a + c.var_b;
  CHECK(r.ratios[0] == doctest::Approx(c.var_a / total).epsilon(1e-12));
  CHECK(r.ratios[1] == doctest::Approx(c.var_b / total).epsilon(1e-12));

  for (int i = 0; i < 4; ++i) CHECK(r.mean[size_t(i)] == doctest::Approx(c.mean[size_t(i)]).epsilon(1e-14));

  CHECK(abs_dot(r.axes[0], c.u) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(abs_dot(r.axes[1], c.v) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(abs_dot(r.axes[0], r.axes[1]) < 1e-10);

  CHECK(an::intrinsic_dimension(r.ratios, 0.99) == 2);
  CHECK(an::intrinsic_dimension(r.ratios, 0.60) == 1);
  CHECK(an::intrinsic_dimension(c.rows, 0.99) == 2);

  SUBCASE("row order does not matter") {
    std::vector<std::vector<double>> shuffled = c.rows;
    std::rotate(shuffled.begin(), shuffled.begin() + 3, shuffled.end());
    std::swap(shuffled[0], shuffled[2]);
    an::PcaResult r2 = an::pca_spectrum(shuffled);
    for (int i = 0; i < 4; ++i)
      CHECK(r2.eigenvalues[size_t(i)] == doctest::Approx(r.eigenvalues[size_t(i)]).epsilon(1e-10));
  }
}

TEST_CASE("pca degenerate and full-rank cases") {
  SUBCASE("identical rows collapse to zero variance") {
    std::vector<std::vector<double>> rows(5, std::vector<double>{0.4, -1.0, 2.5});
    an::PcaResult r = an::pca_spectrum(rows);
    CHECK(r.zero_variance);
    for (double v : r.ratios) CHECK(v == 0.0);
    CHECK(an::intrinsic_dimension(r.ratios, 0.99) == 0);
  }
  SUBCASE("a line is one-dimensional") {
    std::vector<std::vector<double>> rows;
    for (double t : {-2.0, -0.5, 0.1, 1.0, 2.2})
      rows.push_back({1.0 + 2.0 * t, -1.0 * t, 0.5 * t});
    CHECK(an::intrinsic_dimension(rows, 0.99) == 1);
  }
  SUBCASE("a generic cloud fills all three directions") {
    Rng rng(17);
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < 60; ++i)
      rows.push_back({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
    CHECK(an::intrinsic_dimension(rows, 0.99) == 3);
  }
  SUBCASE("threshold monotonicity") {
    // exact binary fractions keep the cumulative sums exact
    std::vector<double> ratios{0.5, 0.25, 0.25};
    int prev = 0;
    for (double th : {0.1, 0.5, 0.75, 0.95, 0.999}) {
      int k = an::intrinsic_dimension(ratios, th);
      CHECK(k >= prev);
      prev = k;
    }
    CHECK(an::intrinsic_dimension(ratios, 0.5) == 1);
    CHECK(an::intrinsic_dimension(ratios, 0.75) == 2);
    CHECK(an::intrinsic_dimension(ratios, 0.9) == 3);
  }
}

TEST_CASE("pca input contracts") {
  CHECK_THROWS_AS(an::pca_spectrum({{1.0, 2.0}}), ContractError);
  CHECK_THROWS_AS(an::pca_spectrum({{1.0, 2.0}, {1.0}}), ContractError);
  CHECK_THROWS_AS(an::pca_spectrum({{}, {}}), ContractError);
  CHECK_THROWS_AS(an::pca_spectrum({{1.0}, {std::nan("")}}), ContractError);
  CHECK_THROWS_AS(an::intrinsic_dimension(std::vector<double>{1.0}, 0.0), ContractError);
  CHECK_THROWS_AS(an::intrinsic_dimension(std::vector<double>{1.0}, 1.0), ContractError);
}

TEST_CASE("pearson correlation") {
  std::vector<double> a{0.5, 1.0, 2.0, 3.5, 4.0};
  std::vector<double> up, down;
  for (double x : a) {
    up.push_back(2.0 * x + 3.0);
    down.push_back(-0.5 * x + 1.0);
  }
  CHECK(an::pearson(a, up) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(an::pearson(a, down) == doctest::Approx(-1.0).epsilon(1e-14));

  std::vector<double> x{1.0, -1.0, 1.0, -1.0}, y{1.0, 1.0, -1.0, -1.0};
  CHECK(an::pearson(x, y) == 0.0);

  std::vector<double> p{1.0, 2.0, 3.0}, q{1.0, 2.0, 4.0};
  CHECK(an::pearson(p, q) == doctest::Approx(3.0 / std::sqrt(2.0 * 42.0 / 9.0)).epsilon(1e-14));

  std::vector<double> flat{2.0, 2.0, 2.0};
  CHECK(std::isnan(an::pearson(p, flat)));
  CHECK(std::isnan(an::pearson(flat, p)));
  CHECK_THROWS_AS(an::pearson(p, std::vector<double>{1.0, 2.0}), ContractError);
  CHECK_THROWS_AS(an::pearson(std::vector<double>{1.0}, std::vector<double>{1.0}), ContractError);
}

TEST_CASE("the freshly initialized gauge is the identity flow") {
  an::GaugeFit fit = identity_gauge(2, 2, 4);
  CHECK(fit.map.d_eta == 2);
  CHECK(fit.map.d_phi == 2);
  REQUIRE(fit.curve.size() == 1);  // only the final evaluation

  for (auto eta : {std::vector<double>{0.3, -0.7}, std::vector<double>{1.5, 2.0},
                   std::vector<double>{0.0, 0.0}}) {
    std::vector<double> z1 = an::gauge_forward(fit.map, eta);
    REQUIRE(z1.size() == 2);
    CHECK(z1[0] == eta[0]);
    CHECK(z1[1] == eta[1]);
    std::vector<double> back = an::gauge_inverse(fit.map, eta);
    CHECK(back[0] == eta[0]);
    CHECK(back[1] == eta[1]);
  }
}

TEST_CASE("gauge fitting learns a constant displacement and survives a round trip") {
  std::vector<std::vector<double>> etas, phis;
  Rng rng(5);
  for (int i = 0; i < 8; ++i) {
    double e0 = rng.uniform(-1.0, 1.0), e1 = rng.uniform(-1.0, 1.0);
    etas.push_back({e0, e1});
    phis.push_back({e0 + 0.3, e1 - 0.2});
  }
  an::GaugeConfig cfg;
  cfg.iters = 250;
  cfg.lr = 1e-2;
  cfg.block_width = 8;
  cfg.num_blocks = 2;
  cfg.seed = 1;
  an::GaugeFit fit = an::gauge_fit(etas, phis, cfg);

  REQUIRE(fit.curve.size() == 251);
  CHECK(fit.rmse < 1e-2);
  CHECK(fit.rmse < fit.curve.front());
  CHECK(fit.curve.back() == fit.rmse);

  SUBCASE("forward-then-inverse returns to the calibration points") {
    for (const auto& eta : etas) {
      std::vector<double> z1 = an::gauge_forward(fit.map, eta);
      std::vector<double> back = an::gauge_inverse(fit.map, z1);
      CHECK(std::fabs(back[0] - eta[0]) < 1e-4);
      CHECK(std::fabs(back[1] - eta[1]) < 1e-4);
    }
  }

  SUBCASE("measurement truncates to the label width") {
    std::vector<double> m = an::gauge_measure(fit.map, etas[0]);
    REQUIRE(m.size() == 2);
    CHECK(m[0] == doctest::Approx(phis[0][0]).epsilon(0.05));
  }

  SUBCASE("save and load round-trip the map exactly") {
    fs::path p = fs::temp_directory_path() / "imode_gauge_test.json";
    an::save_gauge(p, fit.map, fit.rmse, 0xfeed);
    an::GaugeMap g = an::load_gauge(p);
    CHECK(g.d_eta == fit.map.d_eta);
    CHECK(g.d_phi == fit.map.d_phi);
    CHECK(g.params.arch.block_width == 8);
    CHECK(g.params.arch.num_blocks == 2);
    CHECK(g.params.theta == fit.map.params.theta);
    std::vector<double> a = an::gauge_forward(fit.map, etas[0]);
    std::vector<double> b = an::gauge_forward(g, etas[0]);
    CHECK(a == b);
    fs::remove(p);
  }

  SUBCASE("an unreachable rmse bound is reported as non-convergence") {
    an::GaugeConfig strict = cfg;
    strict.iters = 2;
    strict.max_rmse = 1e-12;
    CHECK_THROWS_AS(an::gauge_fit(etas, phis, strict), NumericError);
  }
}

TEST_CASE("gauge inverse accepts label-width and full-width points") {
  std::vector<std::vector<double>> etas, phis;
  Rng rng(9);
  for (int i = 0; i < 4; ++i) {
    double e0 = rng.uniform(-1.0, 1.0), e1 = rng.uniform(-1.0, 1.0);
    etas.push_back({e0, e1});
    phis.push_back({e0});  // d_phi = 1
  }
  an::GaugeConfig cfg;
  cfg.iters = 0;
  cfg.block_width = 8;
  cfg.num_blocks = 2;
  an::GaugeFit fit = an::gauge_fit(etas, phis, cfg);
  CHECK(fit.map.d_phi == 1);

  std::vector<double> from_label = an::gauge_inverse(fit.map, std::vector<double>{0.4});
  std::vector<double> from_full = an::gauge_inverse(fit.map, std::vector<double>{0.4, 0.0});
  CHECK(from_label == from_full);
  CHECK_THROWS_AS(an::gauge_inverse(fit.map, std::vector<double>{0.4, 0.0, 1.0}), ContractError);
}

TEST_CASE("gauge fit input contracts") {
  an::GaugeConfig cfg;
  cfg.iters = 0;
  CHECK_THROWS_AS(an::gauge_fit({{1.0, 2.0}}, {{1.0}}, cfg), ContractError);
  CHECK_THROWS_AS(an::gauge_fit({{1.0}, {2.0}}, {{1.0}}, cfg), ContractError);
  CHECK_THROWS_AS(an::gauge_fit({{1.0}, {2.0}}, {{1.0, 2.0}, {1.0, 2.0}}, cfg), ContractError);
  CHECK_THROWS_AS(an::gauge_fit({{1.0}, {2.0, 3.0}}, {{1.0}, {2.0}}, cfg), ContractError);
}

TEST_CASE("gauge files reject corruption") {
  fs::path dir = fs::temp_directory_path() / "imode_gauge_files";
  fs::remove_all(dir);
  io::ensure_dir(dir);

  CHECK_THROWS_AS(an::load_gauge(dir / "missing.json"), DataError);

  io::write_text_atomic(dir / "garbage.json", "not json at all");
  CHECK_THROWS_AS(an::load_gauge(dir / "garbage.json"), DataError);

  an::GaugeFit fit = identity_gauge(2, 2, 4);
  an::save_gauge(dir / "good.json", fit.map, 0.0, 1);

  nlohmann::json j = nlohmann::json::parse(io::read_text(dir / "good.json"));
  j["format"] = "imode-gauge-v9";
  io::write_text_atomic(dir / "badfmt.json", j.dump());
  CHECK_THROWS_AS(an::load_gauge(dir / "badfmt.json"), DataError);

  j = nlohmann::json::parse(io::read_text(dir / "good.json"));
  auto xi = j["xi"].get<std::vector<double>>();
  xi.pop_back();
  j["xi"] = xi;
  io::write_text_atomic(dir / "short.json", j.dump());
  CHECK_THROWS_AS(an::load_gauge(dir / "short.json"), DataError);

  fs::remove_all(dir);
}

TEST_CASE("grid deformation frames carry the lattice through the flow") {
  an::GaugeFit fit = identity_gauge(2, 2, 4);
  io::Csv csv = an::gauge_grid_frames(fit.map, -1.0, 1.0, 0.0, 2.0, 3, 2, false);
  CHECK(csv.header == std::vector<std::string>{"frame", "tau", "i", "j", "z0", "z1"});
  REQUIRE(csv.rows.size() == 9 * 3);  // 3x3 lattice, frames 0..2

  for (const auto& row : csv.rows) {
    REQUIRE(row.size() == 6);
    double i = row[2], jj = row[3];
    // identity flow: every frame shows the undeformed lattice point
    CHECK(row[4] == -1.0 + 2.0 * i / 2.0);
    CHECK(row[5] == 0.0 + 2.0 * jj / 2.0);
  }
  CHECK(csv.rows[0][0] == 0.0);
  CHECK(csv.rows[2][0] == 2.0);
  CHECK(csv.rows[2][1] == 1.0);

  an::GaugeFit one_d = identity_gauge(1, 1, 4);
  CHECK_THROWS_AS(an::gauge_grid_frames(one_d.map, 0, 1, 0, 1, 3, 2, false), UsageError);
  CHECK_THROWS_AS(an::gauge_grid_frames(fit.map, 0, 1, 0, 1, 1, 2, false), UsageError);
  CHECK_THROWS_AS(an::gauge_grid_frames(fit.map, 0, 1, 0, 1, 3, 0, false), UsageError);
}
