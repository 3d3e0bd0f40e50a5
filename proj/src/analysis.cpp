#include "imode/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <numeric>

#include <json.hpp>

namespace imode::analysis {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

// cyclic Jacobi on a symmetric d x d matrix (row-major). Small d only; the
// eta clouds this sees have d <= 8.
void jacobi_eigen(std::vector<double> a, int d, std::vector<double>& evals,
                  std::vector<double>& evecs) {
  evecs.assign(size_t(d) * size_t(d), 0.0);
  for (int i = 0; i < d; ++i) evecs[size_t(i) * size_t(d) + size_t(i)] = 1.0;
  auto A = [&](int i, int j) -> double& { return a[size_t(i) * size_t(d) + size_t(j)]; };
  auto V = [&](int i, int j) -> double& { return evecs[size_t(i) * size_t(d) + size_t(j)]; };

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) off += A(i, j) * A(i, j);
    if (off < 1e-30) break;
    for (int p = 0; p < d; ++p) {
      for (int q = p + 1; q < d; ++q) {
        double apq = A(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        double tau = (A(q, q) - A(p, p)) / (2.0 * apq);
        double t = (tau >= 0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = t * c;
        for (int k = 0; k < d; ++k) {
          double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < d; ++k) {
          double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < d; ++k) {
          double vkp = V(k, p), vkq = V(k, q);
          V(k, p) = c * vkp - s * vkq;
          V(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  evals.assign(size_t(d), 0.0);
  for (int i = 0; i < d; ++i) evals[size_t(i)] = A(i, i);
}

}  // namespace

PcaResult pca_spectrum(const std::vector<std::vector<double>>& M) {
  if (M.size() < 2) throw ContractError("pca_spectrum: need at least 2 rows");
  int n = int(M.size());
  int d = int(M[0].size());
  if (d == 0) throw ContractError("pca_spectrum: empty rows");
  for (const auto& r : M) {
    if (int(r.size()) != d) throw ContractError("pca_spectrum: ragged rows");
    for (double v : r)
      if (!std::isfinite(v)) throw ContractError("pca_spectrum: non-finite entry");
  }

  PcaResult out;
  out.mean.assign(size_t(d), 0.0);
  for (const auto& r : M)
    for (int j = 0; j < d; ++j) out.mean[size_t(j)] += r[size_t(j)];
  for (double& v : out.mean) v /= double(n);

  std::vector<double> cov(size_t(d) * size_t(d), 0.0);
  for (const auto& r : M) {
    for (int i = 0; i < d; ++i) {
      double ci = r[size_t(i)] - out.mean[size_t(i)];
      for (int j = i; j < d; ++j)
        cov[size_t(i) * size_t(d) + size_t(j)] += ci * (r[size_t(j)] - out.mean[size_t(j)]);
    }
  }
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j) {
      double v = cov[size_t(i) * size_t(d) + size_t(j)] / double(n - 1);
      cov[size_t(i) * size_t(d) + size_t(j)] = v;
      cov[size_t(j) * size_t(d) + size_t(i)] = v;
    }

  std::vector<double> evals, evecs;
  jacobi_eigen(cov, d, evals, evecs);

  std::vector<int> order(static_cast<size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return evals[size_t(a)] > evals[size_t(b)]; });

  double total = 0.0;
  out.eigenvalues.reserve(size_t(d));
  for (int k : order) {
    double ev = std::max(0.0, evals[size_t(k)]);
    out.eigenvalues.push_back(ev);
    total += ev;
    std::vector<double> axis(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) axis[size_t(i)] = evecs[size_t(i) * size_t(d) + size_t(k)];
    out.axes.push_back(std::move(axis));
  }
  out.ratios.assign(size_t(d), 0.0);
  if (total <= 0.0) {
    out.zero_variance = true;
  } else {
    for (int i = 0; i < d; ++i) out.ratios[size_t(i)] = out.eigenvalues[size_t(i)] / total;
  }
  return out;
}

int intrinsic_dimension(const std::vector<double>& ratios, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ContractError("intrinsic_dimension: threshold must lie in (0,1)");
  double cum = 0.0;
  for (size_t k = 0; k < ratios.size(); ++k) {
    cum += ratios[k];
    if (cum >= threshold) return int(k) + 1;
  }
  return 0;  // zero-variance cloud never reaches the threshold
}

int intrinsic_dimension(const std::vector<std::vector<double>>& M, double threshold) {
  return intrinsic_dimension(pca_spectrum(M).ratios, threshold);
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("pearson: size mismatch");
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(a.size());
  mb /= double(a.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

// ---- gauge ----

namespace {

net::ArchDescriptor gauge_arch(int d_eta, const GaugeConfig& cfg) {
  net::ArchDescriptor a;
  a.input_dim = d_eta;
  a.block_width = cfg.block_width;
  a.num_blocks = cfg.num_blocks;
  a.output_dim = d_eta;
  a.head = net::HeadKind::direct_force;
  return a;
}

struct FlowCtx {
  net::ModelParams params;
  double sign = 1.0;
  Tape tape;
  net::BoundNet net;
  size_t base = 0;
};

ode::RhsD flow_rhs(const GaugeMap& g, double sign) {
  auto ctx = std::make_shared<FlowCtx>();
  ctx->params = g.params;
  ctx->sign = sign;
  ctx->net = net::bind_params(ctx->tape, ctx->params, false);
  ctx->base = ctx->tape.mark();
  return [ctx](std::span<const double> z, std::span<double> dz) {
    ctx->tape.truncate(ctx->base);
    Var zv = ctx->tape.constant(Tensor::vec(std::vector<double>(z.begin(), z.end())));
    const Tensor& v = net::forward(ctx->net, zv).value();
    for (size_t i = 0; i < dz.size(); ++i) dz[i] = ctx->sign * v[i];
  };
}

std::vector<double> flow_to_t1(const GaugeMap& g, std::span<const double> z0, double sign,
                               const ode::SolverConfig& cfg) {
  if (int(z0.size()) != g.d_eta) throw ContractError("gauge flow: point has wrong dimension");
  ode::Trajectory tr = ode::dopri5(flow_rhs(g, sign), z0, {0.0, 1.0}, cfg);
  std::span<const double> last = tr.row(tr.t.size() - 1);
  return {last.begin(), last.end()};
}

}  // namespace

GaugeFit gauge_fit(const std::vector<std::vector<double>>& etas,
                   const std::vector<std::vector<double>>& phis, const GaugeConfig& cfg) {
  if (etas.size() != phis.size() || etas.size() < 2)
    throw ContractError("gauge_fit: need matching eta/phi lists with at least 2 entries");
  int d_eta = int(etas[0].size());
  int d_phi = int(phis[0].size());
  if (d_phi > d_eta) throw ContractError("gauge_fit: d_phi exceeds d_eta");
  for (const auto& e : etas)
    if (int(e.size()) != d_eta) throw ContractError("gauge_fit: ragged etas");
  for (const auto& p : phis)
    if (int(p.size()) != d_phi) throw ContractError("gauge_fit: ragged phis");

  GaugeFit out;
  out.map.d_eta = d_eta;
  out.map.d_phi = d_phi;
  out.map.params = net::init_params(gauge_arch(d_eta, cfg), cfg.seed);

  // zero the readout so the flow starts at the identity map
  {
    const net::ArchDescriptor& a = out.map.params.arch;
    int pc = net::param_count(a);
    int readout = a.output_dim * net::feature_dims(a).back() + a.output_dim;
    for (int i = pc - readout; i < pc; ++i) out.map.params.theta[size_t(i)] = 0.0;
  }

  std::vector<std::vector<double>> targets(etas.size());
  for (size_t i = 0; i < phis.size(); ++i) {
    targets[i].assign(size_t(d_eta), 0.0);
    std::copy(phis[i].begin(), phis[i].end(), targets[i].begin());
  }

  const std::vector<double> grid{0.0, 1.0};
  Tape tape;
  net::AdamState adam;
  double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double lr_scale = 1.0;
  double n_inv = 1.0 / double(etas.size());

  for (int it = 0; it < cfg.iters; ++it) {
    tape.clear();
    net::BoundNet bnet = net::bind_params(tape, out.map.params, true);
    ode::RhsV rhs = [&bnet](Var z) { return net::forward(bnet, z); };

    Var loss;
    bool diverged = false;
    for (size_t i = 0; i < etas.size(); ++i) {
      Var z0 = tape.constant(Tensor::vec(etas[i]));
      std::vector<Var> zs;
      try {
        zs = ode::dopri5_vars(tape, rhs, z0, grid, cfg.solver);
      } catch (const ode::DivergenceError&) {
        diverged = true;
        break;
      }
      Var d = sub(zs[1], tape.constant(Tensor::vec(targets[i])));
      Var sq = dot(d, d);
      loss = loss.valid() ? add(loss, sq) : sq;
    }
    if (diverged || !std::isfinite(loss.value()[0])) {
      lr_scale = std::max(1e-3, lr_scale * 0.5);
      out.curve.push_back(std::numeric_limits<double>::infinity());
      continue;
    }
    loss = scale(loss, n_inv);
    out.rmse = std::sqrt(loss.value()[0] / double(d_eta));
    out.curve.push_back(out.rmse);

    std::vector<Tensor> grads = ad::grad_values(loss, bnet.leaves);
    std::vector<double> flat;
    net::flatten_layer_grads(out.map.params.arch, grads, flat);
    bool finite = true;
    for (double v : flat)
      if (!std::isfinite(v)) finite = false;
    if (!finite) {
      lr_scale = std::max(1e-3, lr_scale * 0.5);
      continue;
    }

    if (adam.empty()) {
      adam.m.assign(flat.size(), 0.0);
      adam.v.assign(flat.size(), 0.0);
    }
    adam.t += 1;
    double c1 = 1.0 - std::pow(b1, double(adam.t));
    double c2 = 1.0 - std::pow(b2, double(adam.t));
    double lr = cfg.lr * lr_scale;
    for (size_t k = 0; k < flat.size(); ++k) {
      adam.m[k] = b1 * adam.m[k] + (1.0 - b1) * flat[k];
      adam.v[k] = b2 * adam.v[k] + (1.0 - b2) * flat[k] * flat[k];
      out.map.params.theta[k] -= lr * (adam.m[k] / c1) / (std::sqrt(adam.v[k] / c2) + eps);
    }
  }

  // final rmse with the last update applied
  {
    double sq = 0.0;
    for (size_t i = 0; i < etas.size(); ++i) {
      std::vector<double> z1 = flow_to_t1(out.map, etas[i], 1.0, cfg.solver);
      for (int j = 0; j < d_eta; ++j) {
        double d = z1[size_t(j)] - targets[i][size_t(j)];
        sq += d * d;
      }
    }
    out.rmse = std::sqrt(sq * n_inv / double(d_eta));
    out.curve.push_back(out.rmse);
  }

  if (cfg.max_rmse > 0.0 && !(out.rmse < cfg.max_rmse)) {
    std::string msg = "gauge fit did not converge: rmse " + io::fmt17(out.rmse) + " vs bound " +
                      io::fmt17(cfg.max_rmse) + "; curve tail:";
    size_t from = out.curve.size() > 5 ? out.curve.size() - 5 : 0;
    for (size_t k = from; k < out.curve.size(); ++k) msg += " " + io::fmt17(out.curve[k]);
    throw NumericError(msg);
  }
  return out;
}

std::vector<double> gauge_forward(const GaugeMap& g, std::span<const double> eta,
                                  const ode::SolverConfig& cfg) {
  return flow_to_t1(g, eta, 1.0, cfg);
}

std::vector<double> gauge_measure(const GaugeMap& g, std::span<const double> eta,
                                  const ode::SolverConfig& cfg) {
  std::vector<double> z1 = flow_to_t1(g, eta, 1.0, cfg);
  z1.resize(size_t(g.d_phi));
  return z1;
}

std::vector<double> gauge_inverse(const GaugeMap& g, std::span<const double> z,
                                  const ode::SolverConfig& cfg) {
  std::vector<double> z1(size_t(g.d_eta), 0.0);
  if (int(z.size()) == g.d_eta) {
    std::copy(z.begin(), z.end(), z1.begin());
  } else if (int(z.size()) == g.d_phi) {
    std::copy(z.begin(), z.end(), z1.begin());
  } else {
    throw ContractError("gauge_inverse: point must have d_phi or d_eta components");
  }
  return flow_to_t1(g, z1, -1.0, cfg);
}

void save_gauge(const std::filesystem::path& p, const GaugeMap& g, double rmse,
                uint64_t config_hash) {
  std::string s = "{\n  \"format\": \"imode-gauge-v1\",\n  \"config_hash\": \"";
  char hex[17];
  snprintf(hex, sizeof hex, "%016llx", (unsigned long long)config_hash);
  s += hex;
  s += "\",\n  \"d_eta\": " + std::to_string(g.d_eta);
  s += ",\n  \"d_phi\": " + std::to_string(g.d_phi);
  const net::ArchDescriptor& a = g.params.arch;
  s += ",\n  \"arch\": {\"input_dim\": " + std::to_string(a.input_dim) +
       ", \"block_width\": " + std::to_string(a.block_width) +
       ", \"num_blocks\": " + std::to_string(a.num_blocks) +
       ", \"output_dim\": " + std::to_string(a.output_dim) + "}";
  s += ",\n  \"rmse\": " + io::fmt17(rmse);
  s += ",\n  \"xi\": ";
  io::append_json_array(s, g.params.theta);
  s += "\n}\n";
  io::write_text_atomic(p, s);
}

GaugeMap load_gauge(const std::filesystem::path& p) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(p));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cannot parse gauge file " + p.string() + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "imode-gauge-v1")
      throw DataError("unrecognized gauge format in " + p.string());
    GaugeMap g;
    g.d_eta = j.at("d_eta").get<int>();
    g.d_phi = j.at("d_phi").get<int>();
    const auto& a = j.at("arch");
    g.params.arch.input_dim = a.at("input_dim").get<int>();
    g.params.arch.block_width = a.at("block_width").get<int>();
    g.params.arch.num_blocks = a.at("num_blocks").get<int>();
    g.params.arch.output_dim = a.at("output_dim").get<int>();
    g.params.arch.head = net::HeadKind::direct_force;
    g.params.theta = j.at("xi").get<std::vector<double>>();
    if (int(g.params.theta.size()) != net::param_count(g.params.arch))
      throw DataError("gauge weight count mismatch in " + p.string());
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed gauge file " + p.string() + ": " + e.what());
  }
}

io::Csv gauge_grid_frames(const GaugeMap& g, double lo0, double hi0, double lo1, double hi1,
                          int n, int frames, bool reverse, const ode::SolverConfig& cfg) {
  if (g.d_eta != 2) throw UsageError("grid deformation export needs a 2-dimensional gauge");
  if (n < 2 || frames < 1) throw UsageError("grid export needs n >= 2 and frames >= 1");
  io::Csv csv;
  csv.header = {"frame", "tau", "i", "j", "z0", "z1"};
  std::vector<double> grid(size_t(frames) + 1);
  for (int k = 0; k <= frames; ++k) grid[size_t(k)] = double(k) / double(frames);
  ode::RhsD rhs = flow_rhs(g, reverse ? -1.0 : 1.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double z0 = lo0 + (hi0 - lo0) * double(i) / double(n - 1);
      double z1 = lo1 + (hi1 - lo1) * double(j) / double(n - 1);
      std::array<double, 2> p{z0, z1};
      ode::Trajectory tr = ode::dopri5(rhs, p, grid, cfg);
      for (int k = 0; k <= frames; ++k) {
        std::span<const double> row = tr.row(size_t(k));
        csv.rows.push_back({double(k), grid[size_t(k)], double(i), double(j), row[0], row[1]});
      }
    }
  }
  return csv;
}

}  // namespace imode::analysis
