#pragma once

#include <array>
#include <filesystem>
#include <functional>

#include "imode/nets.hpp"
#include "imode/ode.hpp"
#include "imode/systems.hpp"

namespace imode::meta {

// Wiring of a system family to a force-field head. The net learns either the
// force directly or an energy whose x-gradient is the force; kinematic state
// components (velocities) pass through untouched.
struct ModelSpec {
  sys::Family family = sys::Family::pendulum;
  int d_eta = 1;
  int dim = 2;  // state dimension
  net::ArchDescriptor arch;
  sys::KppOptions kpp;
};

ModelSpec make_model_spec(sys::Family family, int d_eta, const sys::KppOptions& kpp = {},
                          bool input_activation = false);

// model bound onto a tape; rhs() is valid while this object and the tape live
struct BoundModel {
  const ModelSpec* spec = nullptr;
  net::BoundNet net;
  ad::Var eta;
  ad::Var kpp_diff;  // constant diffusion operator (kpp only)
  ad::Var kpp_mask;  // boundary mask (kpp dirichlet only)
};

BoundModel bind_model(ad::Tape& tape, const ModelSpec& spec, std::span<const double> theta,
                      std::span<const double> eta, bool theta_grad, bool eta_grad);
ad::Var model_rhs(const BoundModel& bm, ad::Var y);

// reusable plain-double rhs for rollouts (no gradients kept)
ode::RhsD make_value_rhs(const ModelSpec& spec, const net::ModelParams& params,
                         std::vector<double> eta);

struct LossGrads {
  double loss = 0.0;
  std::vector<double> dtheta;
  std::vector<double> deta;
  int diverged = 0;  // windows whose rollout blew up; they contribute a fixed penalty, no gradient
};

// Mean over windows of the per-window trajectory loss
//   sum_t |yhat(t) - y(t)|^2 / (points - 1),
// with gradients for whichever of theta / eta are requested.
LossGrads instance_loss(const ModelSpec& spec, std::span<const double> theta,
                        std::span<const double> eta, std::span<const sys::Window> windows,
                        const ode::SolverConfig& solver, bool want_theta, bool want_eta,
                        ad::Tape& tape);

// m plain gradient steps on eta, theta frozen. losses, when given, receives
// the loss before each step followed by the final loss (m + 1 entries).
std::vector<double> inner_adapt(const ModelSpec& spec, std::span<const double> theta,
                                std::vector<double> eta, std::span<const sys::Window> windows,
                                double alpha, int m, const ode::SolverConfig& solver,
                                ad::Tape& tape, std::vector<double>* losses = nullptr);

struct MetaHyper {
  int d_eta = 1;
  double alpha = 0.01;  // inner step
  double beta = 1e-3;   // outer step
  int m = 5;
  int epochs = 500;
  int batch = 20;  // windows per epoch, split evenly across instances
  double window_seconds = 1.0;
  uint64_t seed = 0;
  ode::SolverConfig solver{1e-5, 1e-7, 100000, 0.0, 0.0};
  bool adam = true;  // Adam on the outer step; plain SGD otherwise
  bool input_activation = false;
  bool split_support_query = false;  // adapt and evaluate on disjoint windows
  bool meta_learn_eta_init = false;  // also descend the shared eta starting point
  int threads = 1;
  int checkpoint_every = 200;
};

struct EpochStats {
  double outer_loss = 0.0;
  double inner_final = 0.0;
  double wallclock_s = 0.0;
};

struct MetaResult {
  net::ModelParams params;
  std::vector<double> eta_init;
  std::vector<std::vector<double>> eta_per_instance;
  std::vector<EpochStats> history;
  net::AdamState adam;
  int epochs_done = 0;
};

using EpochHook = std::function<void(int epoch, const EpochStats&)>;

// First-order meta-training: adapted eta_i enter the outer gradient as
// constants. Window sampling streams are derived from (seed, epoch, instance),
// so a resumed run replays the exact same batches. outdir may be empty to
// skip checkpoint/metrics files.
MetaResult meta_train(const sys::TrainingView& view, const MetaHyper& hyper,
                      const std::filesystem::path& outdir, uint64_t config_hash,
                      bool deterministic_io, const net::CheckpointData* resume,
                      const EpochHook& hook = {});

// inner_adapt on freshly sampled windows of one instance (theta untouched)
struct AdaptResult {
  std::vector<double> eta;
  std::vector<double> losses;  // before each step + final
};
AdaptResult adapt_unseen(const ModelSpec& spec, const net::ModelParams& params,
                         std::span<const double> eta_init, const sys::TrainingView& view,
                         int instance, int m, double alpha, int n_windows, double window_seconds,
                         uint64_t seed, const ode::SolverConfig& solver);

ode::Trajectory predict(const ModelSpec& spec, const net::ModelParams& params,
                        std::span<const double> eta, std::span<const double> y0,
                        const std::vector<double>& grid, const ode::SolverConfig& solver);

// Baseline: same architecture trained from random init on the same windows
// with the same gradient-step budget, eta pinned at zero.
net::ModelParams train_from_scratch(const ModelSpec& spec, uint64_t init_seed,
                                    std::span<const sys::Window> windows, int steps, double alpha,
                                    const ode::SolverConfig& solver, ad::Tape& tape,
                                    std::vector<double>* losses = nullptr);

double eval_loss(const ModelSpec& spec, std::span<const double> theta, std::span<const double> eta,
                 std::span<const sys::Window> windows, const ode::SolverConfig& solver,
                 ad::Tape& tape);

}  // namespace imode::meta
