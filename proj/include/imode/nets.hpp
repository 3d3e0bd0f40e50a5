#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "imode/tape.hpp"

namespace imode::net {

enum class HeadKind { direct_force, symmetric_energy, esnn_energy };

const char* head_name(HeadKind h);
HeadKind parse_head(const std::string& s);  // UsageError on unknown name

// DenseNet-style force field body: a stem FC into block_width features, then
// num_blocks blocks of softplus(FC) whose outputs are concatenated onto the
// running feature vector, then a linear readout. With the defaults the
// feature widths go 32, 64, ..., 192.
struct ArchDescriptor {
  int input_dim = 0;
  int block_width = 32;
  int num_blocks = 5;
  int output_dim = 1;
  HeadKind head = HeadKind::direct_force;
  // Whether the stem FC gets a softplus too. The reference description leaves
  // this open; default is a purely linear stem.
  bool input_activation = false;
};

std::vector<int> feature_dims(const ArchDescriptor& a);
int param_count(const ArchDescriptor& a);
int num_layers(const ArchDescriptor& a);  // stem + blocks + readout

struct ModelParams {
  ArchDescriptor arch;
  std::vector<double> theta;  // flat, layer order: stem W, stem b, block W, b, ..., out W, b
};

// weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero
ModelParams init_params(const ArchDescriptor& a, uint64_t seed);

// Per-layer leaves bound onto a tape. leaves[] follows theta order so that
// gradients can be flattened back deterministically.
struct BoundNet {
  ArchDescriptor arch;
  std::vector<ad::Var> W, b;
  std::vector<ad::Var> leaves;
};

BoundNet bind_params(ad::Tape& t, const ModelParams& p, bool requires_grad);
void flatten_layer_grads(const ArchDescriptor& a, const std::vector<ad::Tensor>& per_leaf,
                         std::vector<double>& flat);

// input rank 1 (single sample) or rank 2 (rows are samples)
ad::Var forward(const BoundNet& net, ad::Var input);

// f = NN([y; eta])
ad::Var direct_force(const BoundNet& net, ad::Var y, ad::Var eta);

// E(x) = NN([x; eta]) + NN([-x; eta]); even in x by construction
ad::Var symmetric_energy(const BoundNet& net, ad::Var x, ad::Var eta);

// f = dE/dx as a differentiable graph on the same tape
ad::Var energy_force(const BoundNet& net, ad::Var x, ad::Var eta);

// Euclidean-symmetric energy over a bar triplet. z are the 6 relative
// coordinates of the outer bars in the middle bar frame; the energy is
// symmetrized over reflections about that frame's axes.
ad::Var esnn_energy(const BoundNet& net, ad::Var z, ad::Var eta);

// xi = (x,y,alpha) x 3 bars; returns dE/d(middle bar coords), 3 components
ad::Var esnn_force(const BoundNet& net, ad::Var xi, ad::Var eta);

ad::Var z_rel(ad::Var xi);                       // tape version
ad::Tensor z_rel_value(const ad::Tensor& xi);    // plain helper for calibration

struct AdamState {
  std::vector<double> m, v;
  long t = 0;
  bool empty() const { return m.empty(); }
};

struct CheckpointData {
  ModelParams params;
  int d_eta = 0;
  std::vector<double> eta_init;
  uint64_t seed = 0;
  std::string created = "1970-01-01T00:00:00Z";
  uint64_t config_hash = 0;
  // producing system, so rollouts need no extra flags
  std::string family;
  int kpp_nodes = 0;  // > 0 records the spatial setup of a kpp run
  double kpp_diffusivity = 0.0;
  bool kpp_dirichlet = false;
  // trainer state, optional
  int epoch = -1;
  std::vector<std::vector<double>> eta_per_instance;
  AdamState adam;
  std::string hyper_json;  // resolved run config, verbatim object text
};

void save_checkpoint(const std::filesystem::path& p, const CheckpointData& c);
CheckpointData load_checkpoint(const std::filesystem::path& p);

}  // namespace imode::net
