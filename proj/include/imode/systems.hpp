#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "imode/common.hpp"
#include "imode/ode.hpp"

namespace imode::sys {

enum class Family { pendulum, bistable, vdp, double_pendulum, wall, kpp };

const char* family_name(Family f);
Family parse_family(const std::string& s);  // UsageError on unknown name

constexpr double kGravity = 9.81;
constexpr double kWallStiffness = 1000.0;

struct KppOptions {
  int nodes = 21;             // grid over [0,1], spacing 1/(nodes-1)
  double diffusivity = 1.0;
  bool dirichlet = false;     // false: zero-flux (mirror) ends; true: ends pinned at 1
};

int state_dim(Family f, const KppOptions& kpp = {});
int phi_dim(Family f);

// ground-truth right-hand side for physical parameters phi
ode::RhsD make_rhs(Family f, std::vector<double> phi, KppOptions kpp = {});

// mechanical energy for the conservative families (pendulum, bistable,
// double_pendulum, wall); ContractError for the others
double mech_energy(Family f, std::span<const double> phi, std::span<const double> y);

// diffusion part of the kpp semi-discretization as a dense nodes x nodes
// matrix (includes diffusivity / h^2); dirichlet zeroes the boundary rows
std::vector<double> kpp_diffusion_matrix(const KppOptions& kpp);

struct DatasetSpec {
  Family family = Family::pendulum;
  std::vector<std::vector<double>> phis;  // one per instance
  std::vector<std::vector<double>> ics;   // shared across instances
  double dt = 0.01;
  double span = 10.0;
  double gen_dt = 0.0;  // rk4 substep cap; 0 picks a family default
  KppOptions kpp;
  uint64_t seed = 0;  // recorded for provenance
};

// uniform grid 0, dt, ..., span; span must be a whole multiple of dt
std::vector<double> make_grid(double span, double dt);

void generate_dataset(const DatasetSpec& spec, const std::filesystem::path& outdir,
                      uint64_t config_hash);

struct Dataset {
  Family family = Family::pendulum;
  double dt = 0.0;
  double span = 0.0;
  int dim = 0;
  KppOptions kpp;
  uint64_t seed = 0;
  std::vector<std::vector<double>> phis;                // calibration labels
  std::vector<std::vector<ode::Trajectory>> instances;  // [instance][trajectory]
};

Dataset load_dataset(const std::filesystem::path& dir);

// What training code is allowed to see: trajectories only, no physical
// parameters. Calibration labels stay on the Dataset and are consumed
// exclusively by measurement tooling.
struct TrainingView {
  Family family = Family::pendulum;
  double dt = 0.0;
  int dim = 0;
  KppOptions kpp;
  const std::vector<std::vector<ode::Trajectory>>* trajs = nullptr;

  int n_instances() const { return int(trajs->size()); }
  int n_traj(int i) const { return int((*trajs)[size_t(i)].size()); }
  const ode::Trajectory& traj(int i, int j) const { return (*trajs)[size_t(i)][size_t(j)]; }
};

TrainingView training_view(const Dataset& ds);

// contiguous slice of a stored trajectory
struct Window {
  const ode::Trajectory* traj = nullptr;
  size_t start = 0;
  size_t len = 0;  // grid points, >= 2 for a usable training window

  std::vector<double> grid() const;
  std::span<const double> obs(size_t k) const { return traj->row(start + k); }
};

std::vector<Window> sample_windows(const TrainingView& view, int instance, double window_seconds,
                                   int count, Rng& rng);

// standard experiment protocol per family: training instances, shared initial
// conditions, sampling cadence, plus the held-out parameter points
struct Protocol {
  DatasetSpec train;
  std::vector<std::vector<double>> test_phis;
};

Protocol protocol(Family f);

// uniform draw from the family's training parameter box
std::vector<double> random_phi(Family f, Rng& rng);

}  // namespace imode::sys
