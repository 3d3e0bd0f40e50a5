#include "imode/nets.hpp"

#include <array>
#include <cmath>

#include "imode/io_util.hpp"
#include "json.hpp"

namespace imode::net {

using ad::Tape;
using ad::Tensor;
using ad::Var;

const char* head_name(HeadKind h) {
  switch (h) {
    case HeadKind::direct_force: return "direct_force";
    case HeadKind::symmetric_energy: return "symmetric_energy";
    case HeadKind::esnn_energy: return "esnn_energy";
  }
  return "?";
}

HeadKind parse_head(const std::string& s) {
  if (s == "direct_force") return HeadKind::direct_force;
  if (s == "symmetric_energy") return HeadKind::symmetric_energy;
  if (s == "esnn_energy") return HeadKind::esnn_energy;
  throw UsageError("unknown head kind '" + s + "'");
}

int num_layers(const ArchDescriptor& a) { return a.num_blocks + 2; }

// layer l input width: stem sees input_dim, block i sees i*block_width,
// readout sees (num_blocks+1)*block_width
static std::pair<int, int> layer_dims(const ArchDescriptor& a, int l) {
  if (l == 0) return {a.input_dim, a.block_width};
  if (l <= a.num_blocks) return {l * a.block_width, a.block_width};
  return {(a.num_blocks + 1) * a.block_width, a.output_dim};
}

std::vector<int> feature_dims(const ArchDescriptor& a) {
  std::vector<int> d;
  for (int i = 1; i <= a.num_blocks + 1; ++i) d.push_back(i * a.block_width);
  return d;
}

int param_count(const ArchDescriptor& a) {
  int n = 0;
  for (int l = 0; l < num_layers(a); ++l) {
    auto [in, out] = layer_dims(a, l);
    n += in * out + out;
  }
  return n;
}

ModelParams init_params(const ArchDescriptor& a, uint64_t seed) {
  ModelParams p;
  p.arch = a;
  p.theta.assign(size_t(param_count(a)), 0.0);
  Rng rng(derive_seed(seed, 0x6e657473));
  size_t off = 0;
  for (int l = 0; l < num_layers(a); ++l) {
    auto [in, out] = layer_dims(a, l);
    double bound = 1.0 / std::sqrt(double(in));
    for (int i = 0; i < in * out; ++i) p.theta[off++] = rng.uniform(-bound, bound);
    off += size_t(out);  // biases stay zero
  }
  return p;
}

BoundNet bind_params(Tape& t, const ModelParams& p, bool requires_grad) {
  if (int(p.theta.size()) != param_count(p.arch))
    throw ContractError("bind_params: theta size does not match arch");
  BoundNet net;
  net.arch = p.arch;
  size_t off = 0;
  for (int l = 0; l < num_layers(p.arch); ++l) {
    auto [in, out] = layer_dims(p.arch, l);
    Tensor w = Tensor::mat(out, in);
    std::copy(p.theta.begin() + long(off), p.theta.begin() + long(off) + in * out, w.data.begin());
    off += size_t(in) * size_t(out);
    Tensor bb = Tensor::vec(out);
    std::copy(p.theta.begin() + long(off), p.theta.begin() + long(off) + out, bb.data.begin());
    off += size_t(out);
    net.W.push_back(t.leaf(std::move(w), requires_grad));
    net.b.push_back(t.leaf(std::move(bb), requires_grad));
    net.leaves.push_back(net.W.back());
    net.leaves.push_back(net.b.back());
  }
  return net;
}

void flatten_layer_grads(const ArchDescriptor& a, const std::vector<ad::Tensor>& per_leaf,
                         std::vector<double>& flat) {
  flat.assign(size_t(param_count(a)), 0.0);
  if (int(per_leaf.size()) != 2 * num_layers(a))
    throw ContractError("flatten_layer_grads: wrong tensor count");
  size_t off = 0;
  for (const auto& tns : per_leaf) {
    std::copy(tns.data.begin(), tns.data.end(), flat.begin() + long(off));
    off += tns.numel();
  }
}

Var forward(const BoundNet& net, Var input) {
  const ArchDescriptor& a = net.arch;
  bool matrix = input.value().rank == 2;
  int width = matrix ? input.value().cols : input.value().rows;
  if (width != a.input_dim)
    throw ShapeError("forward: input width " + std::to_string(width) + ", arch expects " +
                     std::to_string(a.input_dim));
  Var f = affine(input, net.W[0], net.b[0]);
  if (a.input_activation) f = softplus(f);
  for (int i = 1; i <= a.num_blocks; ++i) {
    Var h = softplus(affine(f, net.W[size_t(i)], net.b[size_t(i)]));
    f = matrix ? hcat(h, f) : concat(h, f);
  }
  return affine(f, net.W.back(), net.b.back());
}

static Var with_eta(Var x, Var eta) {
  if (!eta.valid() || eta.value().numel() == 0) return x;
  return concat(x, eta);
}

Var direct_force(const BoundNet& net, Var y, Var eta) {
  if (net.arch.head != HeadKind::direct_force)
    throw ContractError("direct_force called on a " + std::string(head_name(net.arch.head)) + " head");
  return forward(net, with_eta(y, eta));
}

Var symmetric_energy(const BoundNet& net, Var x, Var eta) {
  if (net.arch.head != HeadKind::symmetric_energy)
    throw ContractError("symmetric_energy called on a " + std::string(head_name(net.arch.head)) + " head");
  Var ep = forward(net, with_eta(x, eta));
  Var en = forward(net, with_eta(neg(x), eta));
  return sum(add(ep, en));
}

Var energy_force(const BoundNet& net, Var x, Var eta) {
  Var e = net.arch.head == HeadKind::esnn_energy ? esnn_energy(net, x, eta)
                                                 : symmetric_energy(net, x, eta);
  std::array<Var, 1> wrt{x};
  return ad::grad_graph(e, wrt)[0];
}

// reflections about the middle-bar frame axes act on the relative
// coordinates as sign masks; relative angles just flip
static const double kRx[6] = {1, -1, -1, 1, -1, -1};
static const double kRy[6] = {-1, 1, -1, -1, 1, -1};
static const double kRxy[6] = {-1, -1, 1, -1, -1, 1};

Var esnn_energy(const BoundNet& net, Var z, Var eta) {
  if (net.arch.head != HeadKind::esnn_energy)
    throw ContractError("esnn_energy called on a " + std::string(head_name(net.arch.head)) + " head");
  if (z.value().rank != 1 || z.value().rows != 6)
    throw ShapeError("esnn_energy: z must have 6 components, got " + z.value().shape_str());
  Tape& t = *z.tape;
  auto masked = [&](const double* m) {
    return mul(z, t.constant(Tensor::vec(std::vector<double>(m, m + 6))));
  };
  Var e = forward(net, with_eta(z, eta));
  e = add(e, forward(net, with_eta(masked(kRx), eta)));
  e = add(e, forward(net, with_eta(masked(kRy), eta)));
  e = add(e, forward(net, with_eta(masked(kRxy), eta)));
  return sum(e);
}

Var z_rel(Var xi) {
  if (xi.value().rank != 1 || xi.value().rows != 9)
    throw ShapeError("z_rel: triplet must have 9 components, got " + xi.value().shape_str());
  Var am = slice(xi, 5, 1);
  Var c = vcos(am), s = vsin(am);
  auto rel = [&](int base) {
    Var dx = sub(slice(xi, base, 1), slice(xi, 3, 1));
    Var dy = sub(slice(xi, base + 1, 1), slice(xi, 4, 1));
    Var da = sub(slice(xi, base + 2, 1), am);
    Var rx = add(mul(c, dx), mul(s, dy));
    Var ry = sub(mul(c, dy), mul(s, dx));
    return concat(concat(rx, ry), da);
  };
  return concat(rel(0), rel(6));
}

Tensor z_rel_value(const Tensor& xi) {
  if (xi.rank != 1 || xi.rows != 9) throw ShapeError("z_rel_value: need 9 components");
  double a = xi[5];
  double c = std::cos(a), s = std::sin(a);
  Tensor z = Tensor::vec(6);
  for (int q = 0; q < 2; ++q) {
    int base = q == 0 ? 0 : 6;
    double dx = xi[size_t(base)] - xi[3];
    double dy = xi[size_t(base) + 1] - xi[4];
    z[size_t(3 * q)] = c * dx + s * dy;
    z[size_t(3 * q) + 1] = c * dy - s * dx;
    z[size_t(3 * q) + 2] = xi[size_t(base) + 2] - a;
  }
  return z;
}

Var esnn_force(const BoundNet& net, Var xi, Var eta) {
  Var z = z_rel(xi);
  Var e = esnn_energy(net, z, eta);
  std::array<Var, 1> wrt{xi};
  Var g = ad::grad_graph(e, wrt)[0];
  return slice(g, 3, 3);
}

// ---- checkpoint io ----

void save_checkpoint(const std::filesystem::path& p, const CheckpointData& c) {
  std::string out;
  out.reserve(c.params.theta.size() * 22 + 4096);
  out += "{\n  \"format\": \"imode-checkpoint-v1\",\n";
  char hbuf[32];
  std::snprintf(hbuf, sizeof hbuf, "%016llx", (unsigned long long)c.config_hash);
  out += "  \"config_hash\": \"";
  out += hbuf;
  out += "\",\n";
  const ArchDescriptor& a = c.params.arch;
  out += "  \"arch\": {\"input_dim\": " + std::to_string(a.input_dim) +
         ", \"block_width\": " + std::to_string(a.block_width) +
         ", \"num_blocks\": " + std::to_string(a.num_blocks) +
         ", \"output_dim\": " + std::to_string(a.output_dim) + ", \"head_kind\": \"" +
         head_name(a.head) + "\", \"input_activation\": " +
         (a.input_activation ? "true" : "false") + "},\n";
  out += "  \"d_eta\": " + std::to_string(c.d_eta) + ",\n";
  out += "  \"theta\": ";
  io::append_json_array(out, c.params.theta);
  out += ",\n  \"eta_init\": ";
  io::append_json_array(out, c.eta_init);
  out += ",\n  \"meta\": {\"seed\": " + std::to_string(c.seed) + ", \"created\": \"" +
         io::json_escape(c.created) + "\"}";
  if (!c.family.empty()) {
    out += ",\n  \"system\": {\"family\": \"" + io::json_escape(c.family) + "\"";
    if (c.kpp_nodes > 0) {
      out += ", \"kpp\": {\"nodes\": " + std::to_string(c.kpp_nodes) + ", \"diffusivity\": " +
             io::fmt17(c.kpp_diffusivity) + ", \"dirichlet\": " +
             (c.kpp_dirichlet ? "true" : "false") + "}";
    }
    out += "}";
  }
  if (c.epoch >= 0) out += ",\n  \"epoch\": " + std::to_string(c.epoch);
  if (!c.eta_per_instance.empty()) {
    out += ",\n  \"eta_per_instance\": [";
    for (size_t i = 0; i < c.eta_per_instance.size(); ++i) {
      if (i) out += ", ";
      io::append_json_array(out, c.eta_per_instance[i]);
    }
    out += "]";
  }
  if (!c.adam.empty()) {
    out += ",\n  \"adam\": {\"t\": " + std::to_string(c.adam.t) + ", \"m\": ";
    io::append_json_array(out, c.adam.m);
    out += ", \"v\": ";
    io::append_json_array(out, c.adam.v);
    out += "}";
  }
  if (!c.hyper_json.empty()) out += ",\n  \"hyper\": " + c.hyper_json;
  out += "\n}\n";
  io::write_text_atomic(p, out);
}

CheckpointData load_checkpoint(const std::filesystem::path& p) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(p));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint json " + p.string() + ": " + e.what());
  }
  try {
    CheckpointData c;
    const auto& ja = j.at("arch");
    c.params.arch.input_dim = ja.at("input_dim").get<int>();
    c.params.arch.block_width = ja.at("block_width").get<int>();
    c.params.arch.num_blocks = ja.at("num_blocks").get<int>();
    c.params.arch.output_dim = ja.at("output_dim").get<int>();
    c.params.arch.head = parse_head(ja.at("head_kind").get<std::string>());
    c.params.arch.input_activation = ja.value("input_activation", false);
    c.d_eta = j.at("d_eta").get<int>();
    c.params.theta = j.at("theta").get<std::vector<double>>();
    if (int(c.params.theta.size()) != param_count(c.params.arch))
      throw DataError("checkpoint theta size does not match arch in " + p.string());
    c.eta_init = j.at("eta_init").get<std::vector<double>>();
    if (int(c.eta_init.size()) != c.d_eta)
      throw DataError("checkpoint eta_init size does not match d_eta in " + p.string());
    c.seed = j.at("meta").at("seed").get<uint64_t>();
    c.created = j.at("meta").value("created", "");
    if (j.contains("system")) {
      const auto& js = j["system"];
      c.family = js.value("family", "");
      if (js.contains("kpp")) {
        c.kpp_nodes = js["kpp"].at("nodes").get<int>();
        c.kpp_diffusivity = js["kpp"].at("diffusivity").get<double>();
        c.kpp_dirichlet = js["kpp"].value("dirichlet", false);
      }
    }
    if (j.contains("config_hash"))
      c.config_hash = std::stoull(j["config_hash"].get<std::string>(), nullptr, 16);
    c.epoch = j.value("epoch", -1);
    if (j.contains("eta_per_instance"))
      c.eta_per_instance = j["eta_per_instance"].get<std::vector<std::vector<double>>>();
    if (j.contains("adam")) {
      c.adam.t = j["adam"].at("t").get<long>();
      c.adam.m = j["adam"].at("m").get<std::vector<double>>();
      c.adam.v = j["adam"].at("v").get<std::vector<double>>();
    }
    if (j.contains("hyper")) c.hyper_json = j["hyper"].dump();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + p.string() + " missing fields: " + e.what());
  }
}

}  // namespace imode::net
