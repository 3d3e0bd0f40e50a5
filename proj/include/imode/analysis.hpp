#pragma once

#include <filesystem>
#include <vector>

#include "imode/io_util.hpp"
#include "imode/nets.hpp"
#include "imode/ode.hpp"

namespace imode::analysis {

// PCA of adapted eta vectors (rows of M). Ratios are explained-variance
// fractions, descending; axes[k] is the unit principal direction for ratio k.
struct PcaResult {
  std::vector<double> eigenvalues;          // descending, clamped at 0
  std::vector<double> ratios;               // eigenvalues / total, all zero when degenerate
  std::vector<std::vector<double>> axes;    // one unit vector per component
  std::vector<double> mean;
  bool zero_variance = false;
};

PcaResult pca_spectrum(const std::vector<std::vector<double>>& M);  // needs >= 2 rows

// smallest k whose cumulative ratio reaches the threshold; 0 for a
// zero-variance cloud
int intrinsic_dimension(const std::vector<double>& ratios, double threshold = 0.99);
int intrinsic_dimension(const std::vector<std::vector<double>>& M, double threshold = 0.99);

// Pearson r; NaN when either side has zero variance
double pearson(std::span<const double> a, std::span<const double> b);

// Diffeomorphism eta -> phi realized as the unit-time flow of dz/dt = g(z).
// Measuring integrates forward and reads the first d_phi components; the
// inverse integrates the negated field.
struct GaugeMap {
  net::ModelParams params;  // velocity field g, input and output dim d_eta
  int d_eta = 0;
  int d_phi = 0;
};

struct GaugeConfig {
  int iters = 2000;
  double lr = 1e-2;
  int block_width = 32;
  int num_blocks = 5;
  uint64_t seed = 0;
  ode::SolverConfig solver{1e-6, 1e-8, 100000, 0.0, 0.0};
  double max_rmse = 0.0;  // > 0: throw NumericError if the final fit is worse
};

struct GaugeFit {
  GaugeMap map;
  std::vector<double> curve;  // per-iteration endpoint rmse
  double rmse = 0.0;          // sqrt(mean squared endpoint error per component)
};

// etas: one row per calibration instance; phis: matching labels, d_phi <= d_eta.
// Targets are phi zero-padded to d_eta. The field starts at g == 0 (zeroed
// readout layer), i.e. the identity flow.
GaugeFit gauge_fit(const std::vector<std::vector<double>>& etas,
                   const std::vector<std::vector<double>>& phis, const GaugeConfig& cfg);

std::vector<double> gauge_forward(const GaugeMap& g, std::span<const double> eta,
                                  const ode::SolverConfig& cfg = {});  // full z(1)
std::vector<double> gauge_measure(const GaugeMap& g, std::span<const double> eta,
                                  const ode::SolverConfig& cfg = {});  // first d_phi of z(1)
// accepts either a d_phi vector (zero-padded) or a full d_eta vector
std::vector<double> gauge_inverse(const GaugeMap& g, std::span<const double> z,
                                  const ode::SolverConfig& cfg = {});

void save_gauge(const std::filesystem::path& p, const GaugeMap& g, double rmse,
                uint64_t config_hash);
GaugeMap load_gauge(const std::filesystem::path& p);

// Deformation frames of an n x n grid carried by the flow, for d_eta == 2.
// Columns: frame,tau,i,j,z0,z1. reverse flows the negated field (physical
// space back to eta space).
io::Csv gauge_grid_frames(const GaugeMap& g, double lo0, double hi0, double lo1, double hi1,
                          int n, int frames, bool reverse, const ode::SolverConfig& cfg = {});

}  // namespace imode::analysis
