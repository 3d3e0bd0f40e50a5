// Experiment driver: dataset generation, meta-training, adaptation,
// prediction, baseline comparison, PCA sweep, gauge calibration/measurement.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "imode/analysis.hpp"
#include "imode/meta.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
namespace im = imode;

namespace {

json preset_json(const std::string& name) {
  if (name == "pendulum-sm")
    return {{"family", "pendulum"}, {"seed", 1},   {"d_eta", 1},          {"alpha", 0.02},
            {"beta", 1e-3},         {"m", 5},      {"epochs", 800},       {"batch", 20},
            {"window_seconds", 1.0}, {"rtol", 1e-5}, {"atol", 1e-7}};
  if (name == "bistable-sm")
    return {{"family", "bistable"}, {"seed", 1},   {"d_eta", 2},          {"alpha", 0.02},
            {"beta", 1e-3},         {"m", 5},      {"epochs", 300},       {"batch", 20},
            {"window_seconds", 1.0}, {"rtol", 1e-5}, {"atol", 1e-7}};
  if (name == "vdp-sm")
    return {{"family", "vdp"},      {"seed", 1},   {"d_eta", 3},          {"alpha", 0.01},
            {"beta", 1e-3},         {"m", 5},      {"epochs", 250},       {"batch", 27},
            {"window_seconds", 1.0}, {"rtol", 1e-5}, {"atol", 1e-7}};
  if (name == "double-pendulum-sm")
    return {{"family", "double_pendulum"}, {"seed", 1}, {"d_eta", 2},     {"alpha", 0.01},
            {"beta", 1e-3},         {"m", 5},      {"epochs", 300},       {"batch", 16},
            {"window_seconds", 1.0}, {"rtol", 1e-5}, {"atol", 1e-7}};
  if (name == "wall-sm")
    return {{"family", "wall"},     {"seed", 1},   {"d_eta", 1},          {"alpha", 0.02},
            {"beta", 1e-3},         {"m", 5},      {"epochs", 400},       {"batch", 20},
            {"window_seconds", 1.0}, {"rtol", 1e-5}, {"atol", 1e-7}};
  if (name == "kpp-sm")
    return {{"family", "kpp"},      {"seed", 1},   {"d_eta", 1},          {"alpha", 0.02},
            {"beta", 1e-3},         {"m", 5},      {"epochs", 150},       {"batch", 6},
            {"window_seconds", 1.0}, {"rtol", 1e-5}, {"atol", 1e-7}};
  throw im::UsageError("unknown preset '" + name + "'");
}

struct Common {
  std::string config_path;
  std::string preset;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON config file; flags override its values");
  cmd->add_option("--preset", c.preset, "named protocol preset, e.g. bistable-sm");
}

// precedence: defaults < preset < config file < flags. resolved collects the
// final value of every key a command consumed and is hashed for provenance.
struct Opts {
  CLI::App* cmd = nullptr;
  json merged = json::object();
  json resolved = json::object();

  bool from_flag(const char* flag) const { return cmd->count(flag) > 0; }
  bool present(const char* flag, const char* key) const {
    return from_flag(flag) || merged.contains(key);
  }

  template <class T>
  T pick(const char* flag, const char* key, const T& cli, const T& def) {
    T v = def;
    if (merged.contains(key)) {
      try {
        v = merged.at(key).get<T>();
      } catch (const json::exception&) {
        throw im::UsageError(std::string("config key '") + key + "' has the wrong type");
      }
    }
    if (from_flag(flag)) v = cli;
    resolved[key] = v;
    return v;
  }

  uint64_t hash() const { return im::fnv1a(resolved.dump()); }
};

Opts make_opts(CLI::App* cmd, const Common& c, const char* command_name) {
  Opts o;
  o.cmd = cmd;
  json file = json::object();
  if (!c.config_path.empty()) {
    try {
      file = json::parse(im::io::read_text(c.config_path));
    } catch (const json::exception& e) {
      throw im::DataError("cannot parse config " + c.config_path + ": " + e.what());
    }
    if (!file.is_object()) throw im::DataError("config " + c.config_path + " is not an object");
  }
  std::string preset = c.preset;
  if (preset.empty() && file.contains("preset")) preset = file.at("preset").get<std::string>();
  if (!preset.empty()) o.merged = preset_json(preset);
  for (auto& [k, v] : file.items()) o.merged[k] = v;
  o.merged.erase("preset");
  o.resolved["command"] = command_name;
  if (!preset.empty()) o.resolved["preset"] = preset;
  return o;
}

uint64_t pick_seed(Opts& o, uint64_t cli) {
  if (!o.present("--seed", "seed"))
    throw im::UsageError("a seed is required (--seed, config, or preset)");
  return o.pick<uint64_t>("--seed", "seed", cli, 0);
}

int pick_threads(Opts& o, int cli) {
  int v = 1;
  if (o.merged.contains("threads")) v = o.merged.at("threads").get<int>();
  if (const char* env = std::getenv("IMODE_THREADS")) {
    char* end = nullptr;
    long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1)
      throw im::UsageError("IMODE_THREADS must be a positive integer");
    v = int(n);
  }
  if (o.from_flag("--threads")) v = cli;
  if (v < 1) throw im::UsageError("--threads must be at least 1");
  o.resolved["threads"] = v;
  return v;
}

std::vector<double> parse_doubles(const std::string& s, const char* what) {
  std::vector<double> out;
  const char* p = s.c_str();
  while (*p) {
    char* end = nullptr;
    double v = std::strtod(p, &end);
    if (end == p) throw im::UsageError(std::string(what) + ": cannot parse '" + s + "'");
    out.push_back(v);
    p = end;
    while (*p == ',' || *p == ' ') ++p;
  }
  if (out.empty()) throw im::UsageError(std::string(what) + ": empty list");
  return out;
}

void write_csv(const fs::path& p, uint64_t config_hash, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  std::string s = im::io::provenance_line(config_hash);
  s += '\n';
  for (size_t i = 0; i < header.size(); ++i) {
    if (i) s += ',';
    s += header[i];
  }
  s += '\n';
  for (const auto& r : rows) {
    for (size_t i = 0; i < r.size(); ++i) {
      if (i) s += ',';
      im::io::append17(s, r[i]);
    }
    s += '\n';
  }
  im::io::write_text_atomic(p, s);
}

void write_traj_csv(const fs::path& p, uint64_t config_hash, const im::ode::Trajectory& tr) {
  std::string s = im::io::provenance_line(config_hash);
  s += "\nt";
  for (int j = 0; j < tr.dim; ++j) s += ",s" + std::to_string(j);
  s += '\n';
  for (size_t k = 0; k < tr.t.size(); ++k) {
    im::io::append17(s, tr.t[k]);
    for (double v : tr.row(k)) {
      s += ',';
      im::io::append17(s, v);
    }
    s += '\n';
  }
  im::io::write_text_atomic(p, s);
}

std::vector<double> load_eta_file(const fs::path& p) {
  json j;
  try {
    j = json::parse(im::io::read_text(p));
  } catch (const json::exception& e) {
    throw im::DataError("cannot parse eta file " + p.string() + ": " + e.what());
  }
  try {
    return j.at("eta").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw im::DataError("eta file " + p.string() + " lacks an 'eta' array: " + e.what());
  }
}

im::sys::KppOptions checkpoint_kpp(const im::net::CheckpointData& ck) {
  im::sys::KppOptions k;
  if (ck.kpp_nodes > 0) {
    k.nodes = ck.kpp_nodes;
    k.diffusivity = ck.kpp_diffusivity;
    k.dirichlet = ck.kpp_dirichlet;
  }
  return k;
}

im::meta::ModelSpec spec_from_checkpoint(const im::net::CheckpointData& ck,
                                         const std::string& family_override,
                                         const im::sys::KppOptions* kpp_override) {
  std::string fam = family_override.empty() ? ck.family : family_override;
  if (fam.empty())
    throw im::DataError("checkpoint does not record a system family; pass --family");
  im::sys::KppOptions kpp = kpp_override ? *kpp_override : checkpoint_kpp(ck);
  return im::meta::make_model_spec(im::sys::parse_family(fam), ck.d_eta, kpp,
                                   ck.params.arch.input_activation);
}

// ---- commands ----

void cmd_gen_data(Opts& o, const std::string& family, const std::string& out, uint64_t seed,
                  const std::string& which, int random_n, double dt, double span,
                  bool kpp_dirichlet) {
  if (!o.present("--family", "family")) throw im::UsageError("--family is required");
  std::string fam_s = o.pick<std::string>("--family", "family", family, "");
  std::string out_s = o.pick<std::string>("--out", "out", out, "");
  if (out_s.empty()) throw im::UsageError("--out is required");
  uint64_t sd = pick_seed(o, seed);
  std::string which_s = o.pick<std::string>("--which", "which", which, "train");
  int rn = o.pick<int>("--random", "random", random_n, 0);
  bool diri = o.pick<bool>("--kpp-dirichlet", "kpp_dirichlet", kpp_dirichlet, false);

  im::sys::Family fam = im::sys::parse_family(fam_s);
  im::sys::Protocol proto = im::sys::protocol(fam);
  im::sys::DatasetSpec spec = proto.train;
  spec.seed = sd;
  if (which_s == "test")
    spec.phis = proto.test_phis;
  else if (which_s != "train")
    throw im::UsageError("--which must be train or test");
  if (rn > 0) {
    spec.phis.clear();
    im::Rng rng(im::derive_seed(sd, 0x72616e64));
    for (int i = 0; i < rn; ++i) spec.phis.push_back(im::sys::random_phi(fam, rng));
  }
  if (o.present("--dt", "dt")) spec.dt = o.pick<double>("--dt", "dt", dt, spec.dt);
  if (o.present("--span", "span")) spec.span = o.pick<double>("--span", "span", span, spec.span);
  if (diri) {
    if (fam != im::sys::Family::kpp) throw im::UsageError("--kpp-dirichlet needs --family kpp");
    spec.kpp.dirichlet = true;
    for (auto& ic : spec.ics) {
      ic.front() = 1.0;
      ic.back() = 1.0;
    }
  }

  im::sys::generate_dataset(spec, out_s, o.hash());
  std::printf("wrote %s: family=%s instances=%zu ics=%zu dt=%g span=%g\n", out_s.c_str(),
              im::sys::family_name(fam), spec.phis.size(), spec.ics.size(), spec.dt, spec.span);
}

void cmd_meta_train(Opts& o, const std::string& dataset, const std::string& out, bool resume,
                    const im::meta::MetaHyper& cli_h, uint64_t seed, int threads) {
  std::string ds_path = o.pick<std::string>("--dataset", "dataset", dataset, "");
  std::string out_s = o.pick<std::string>("--out", "out", out, "");
  if (ds_path.empty()) throw im::UsageError("--dataset is required");
  if (out_s.empty()) throw im::UsageError("--out is required");

  im::meta::MetaHyper h;
  h.d_eta = o.pick<int>("--d-eta", "d_eta", cli_h.d_eta, h.d_eta);
  h.alpha = o.pick<double>("--alpha", "alpha", cli_h.alpha, h.alpha);
  h.beta = o.pick<double>("--beta", "beta", cli_h.beta, h.beta);
  h.m = o.pick<int>("--m", "m", cli_h.m, h.m);
  h.epochs = o.pick<int>("--epochs", "epochs", cli_h.epochs, h.epochs);
  h.batch = o.pick<int>("--batch", "batch", cli_h.batch, h.batch);
  h.window_seconds =
      o.pick<double>("--window-seconds", "window_seconds", cli_h.window_seconds, h.window_seconds);
  h.solver.rtol = o.pick<double>("--rtol", "rtol", cli_h.solver.rtol, h.solver.rtol);
  h.solver.atol = o.pick<double>("--atol", "atol", cli_h.solver.atol, h.solver.atol);
  h.adam = o.pick<bool>("--adam", "adam", cli_h.adam, true);
  h.input_activation =
      o.pick<bool>("--input-activation", "input_activation", cli_h.input_activation, false);
  h.split_support_query = o.pick<bool>("--split-support-query", "split_support_query",
                                       cli_h.split_support_query, false);
  h.meta_learn_eta_init = o.pick<bool>("--meta-learn-eta-init", "meta_learn_eta_init",
                                       cli_h.meta_learn_eta_init, false);
  h.checkpoint_every =
      o.pick<int>("--checkpoint-every", "checkpoint_every", cli_h.checkpoint_every, 200);
  h.seed = pick_seed(o, seed);
  h.threads = pick_threads(o, threads);
  o.resolved["resume"] = resume;

  im::sys::Dataset ds = im::sys::load_dataset(ds_path);
  im::sys::TrainingView view = im::sys::training_view(ds);

  im::net::CheckpointData ck;
  const im::net::CheckpointData* resume_ptr = nullptr;
  if (resume) {
    ck = im::net::load_checkpoint(fs::path(out_s) / "checkpoint.json");
    resume_ptr = &ck;
  }

  int stride = std::max(1, h.epochs / 20);
  auto hook = [&](int epoch, const im::meta::EpochStats& st) {
    if (epoch % stride == 0 || epoch == h.epochs)
      std::fprintf(stderr, "epoch %d outer %.6g inner %.6g\n", epoch, st.outer_loss,
                   st.inner_final);
  };
  bool det = h.threads == 1;
  im::meta::MetaResult r = im::meta::meta_train(view, h, out_s, o.hash(), det, resume_ptr, hook);
  double last = r.history.empty() ? 0.0 : r.history.back().outer_loss;
  std::printf("trained %d epochs, outer loss %.6g, checkpoint %s\n", r.epochs_done, last,
              (fs::path(out_s) / "checkpoint.json").string().c_str());
}

void cmd_adapt(Opts& o, const std::string& checkpoint, const std::string& dataset, int instance,
               int m, double alpha, int windows, double window_seconds, double rtol, double atol,
               uint64_t seed, const std::string& out) {
  std::string ck_path = o.pick<std::string>("--checkpoint", "checkpoint", checkpoint, "");
  std::string ds_path = o.pick<std::string>("--dataset", "dataset", dataset, "");
  if (ck_path.empty()) throw im::UsageError("--checkpoint is required");
  if (ds_path.empty()) throw im::UsageError("--dataset is required");
  int inst = o.pick<int>("--instance", "instance", instance, 0);
  int m_v = o.pick<int>("--m", "m", m, 5);
  double alpha_v = o.pick<double>("--alpha", "alpha", alpha, 0.01);
  int wins = o.pick<int>("--windows", "windows", windows, 20);
  double ws = o.pick<double>("--window-seconds", "window_seconds", window_seconds, 1.0);
  im::ode::SolverConfig solver;
  solver.rtol = o.pick<double>("--rtol", "rtol", rtol, 1e-5);
  solver.atol = o.pick<double>("--atol", "atol", atol, 1e-7);
  uint64_t sd = pick_seed(o, seed);
  std::string out_s = o.pick<std::string>("--out", "out", out, "");

  im::net::CheckpointData ck = im::net::load_checkpoint(ck_path);
  im::sys::Dataset ds = im::sys::load_dataset(ds_path);
  if (!ck.family.empty() && ck.family != im::sys::family_name(ds.family))
    throw im::DataError("checkpoint family " + ck.family + " does not match dataset " +
                        std::string(im::sys::family_name(ds.family)));
  im::sys::TrainingView view = im::sys::training_view(ds);
  if (inst < 0 || inst >= view.n_instances()) throw im::UsageError("--instance out of range");
  im::meta::ModelSpec spec = spec_from_checkpoint(ck, im::sys::family_name(ds.family), &ds.kpp);

  im::meta::AdaptResult ar = im::meta::adapt_unseen(spec, ck.params, ck.eta_init, view, inst, m_v,
                                                    alpha_v, wins, ws, sd, solver);
  std::string line = "eta:";
  for (double v : ar.eta) line += " " + im::io::fmt17(v);
  std::printf("%s\nfinal window loss %.6g\n", line.c_str(), ar.losses.back());

  if (!out_s.empty()) {
    std::string s = "{\n  \"format\": \"imode-eta-v1\",\n  \"config_hash\": \"";
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", (unsigned long long)o.hash());
    s += hex;
    s += "\",\n  \"eta\": ";
    im::io::append_json_array(s, ar.eta);
    s += ",\n  \"losses\": ";
    im::io::append_json_array(s, ar.losses);
    s += "\n}\n";
    im::io::write_text_atomic(out_s, s);
  }
}

void cmd_predict(Opts& o, const std::string& checkpoint, const std::string& eta_str,
                 const std::string& eta_file, const std::string& y0_str, double dt, double span,
                 double rtol, double atol, const std::string& family, bool kpp_dirichlet,
                 const std::string& out) {
  std::string ck_path = o.pick<std::string>("--checkpoint", "checkpoint", checkpoint, "");
  if (ck_path.empty()) throw im::UsageError("--checkpoint is required");
  std::string y0_s = o.pick<std::string>("--y0", "y0", y0_str, "");
  if (y0_s.empty()) throw im::UsageError("--y0 is required");
  double dt_v = o.pick<double>("--dt", "dt", dt, 0.01);
  double span_v = o.pick<double>("--span", "span", span, 10.0);
  im::ode::SolverConfig solver;
  solver.rtol = o.pick<double>("--rtol", "rtol", rtol, 1e-7);
  solver.atol = o.pick<double>("--atol", "atol", atol, 1e-9);
  std::string fam_s = o.pick<std::string>("--family", "family", family, "");
  bool diri = o.pick<bool>("--kpp-dirichlet", "kpp_dirichlet", kpp_dirichlet, false);
  std::string eta_s = o.pick<std::string>("--eta", "eta", eta_str, "");
  std::string etaf = o.pick<std::string>("--eta-file", "eta_file", eta_file, "");
  std::string out_s = o.pick<std::string>("--out", "out", out, "");
  if (out_s.empty()) throw im::UsageError("--out is required");

  im::net::CheckpointData ck = im::net::load_checkpoint(ck_path);
  im::sys::KppOptions kpp = checkpoint_kpp(ck);
  if (diri) kpp.dirichlet = true;
  im::meta::ModelSpec spec = spec_from_checkpoint(ck, fam_s, &kpp);

  std::vector<double> eta = ck.eta_init;
  if (!eta_s.empty() && !etaf.empty())
    throw im::UsageError("pass either --eta or --eta-file, not both");
  if (!eta_s.empty()) eta = parse_doubles(eta_s, "--eta");
  if (!etaf.empty()) eta = load_eta_file(etaf);
  if (int(eta.size()) != spec.d_eta) throw im::UsageError("eta has the wrong dimension");

  std::vector<double> y0 = parse_doubles(y0_s, "--y0");
  if (int(y0.size()) != spec.dim)
    throw im::UsageError("--y0 needs " + std::to_string(spec.dim) + " components");

  std::vector<double> grid = im::sys::make_grid(span_v, dt_v);
  im::ode::Trajectory tr = im::meta::predict(spec, ck.params, eta, y0, grid, solver);
  write_traj_csv(out_s, o.hash(), tr);
  std::printf("wrote %s (%zu points)\n", out_s.c_str(), tr.t.size());
}

void cmd_compare_tfs(Opts& o, const std::string& checkpoint, const std::string& dataset,
                     int instance, int m, double alpha, int windows, int holdout_windows,
                     double window_seconds, double rtol, double atol, uint64_t seed,
                     const std::string& out) {
  std::string ck_path = o.pick<std::string>("--checkpoint", "checkpoint", checkpoint, "");
  std::string ds_path = o.pick<std::string>("--dataset", "dataset", dataset, "");
  if (ck_path.empty()) throw im::UsageError("--checkpoint is required");
  if (ds_path.empty()) throw im::UsageError("--dataset is required");
  int inst = o.pick<int>("--instance", "instance", instance, 0);
  int m_v = o.pick<int>("--m", "m", m, 5);
  double alpha_v = o.pick<double>("--alpha", "alpha", alpha, 0.01);
  int wins = o.pick<int>("--windows", "windows", windows, 20);
  int hwins = o.pick<int>("--holdout-windows", "holdout_windows", holdout_windows, 20);
  double ws = o.pick<double>("--window-seconds", "window_seconds", window_seconds, 1.0);
  im::ode::SolverConfig solver;
  solver.rtol = o.pick<double>("--rtol", "rtol", rtol, 1e-5);
  solver.atol = o.pick<double>("--atol", "atol", atol, 1e-7);
  uint64_t sd = pick_seed(o, seed);
  std::string out_s = o.pick<std::string>("--out", "out", out, "");
  if (out_s.empty()) throw im::UsageError("--out is required");

  im::net::CheckpointData ck = im::net::load_checkpoint(ck_path);
  im::sys::Dataset ds = im::sys::load_dataset(ds_path);
  im::sys::TrainingView view = im::sys::training_view(ds);
  if (inst < 0 || inst >= view.n_instances()) throw im::UsageError("--instance out of range");
  im::meta::ModelSpec spec = spec_from_checkpoint(ck, im::sys::family_name(ds.family), &ds.kpp);

  im::Rng rs(im::derive_seed(sd, 0x737570, uint64_t(inst)));
  std::vector<im::sys::Window> support = im::sys::sample_windows(view, inst, ws, wins, rs);
  im::Rng rh(im::derive_seed(sd, 0x686f6c, uint64_t(inst)));
  std::vector<im::sys::Window> holdout = im::sys::sample_windows(view, inst, ws, hwins, rh);

  std::vector<double> zeros(size_t(spec.d_eta), 0.0);
  im::ad::Tape tape;
  std::vector<std::vector<double>> rows;
  for (int k = 0; k <= m_v; ++k) {
    std::vector<double> eta = im::meta::inner_adapt(spec, ck.params.theta, ck.eta_init, support,
                                                    alpha_v, k, solver, tape);
    double i_sup = im::meta::eval_loss(spec, ck.params.theta, eta, support, solver, tape);
    double i_hold = im::meta::eval_loss(spec, ck.params.theta, eta, holdout, solver, tape);
    im::net::ModelParams tfs = im::meta::train_from_scratch(spec, im::derive_seed(sd, 0x746673),
                                                            support, k, alpha_v, solver, tape);
    double t_sup = im::meta::eval_loss(spec, tfs.theta, zeros, support, solver, tape);
    double t_hold = im::meta::eval_loss(spec, tfs.theta, zeros, holdout, solver, tape);
    rows.push_back({double(k), i_sup, i_hold, t_sup, t_hold});
  }
  write_csv(out_s, o.hash(), {"step", "imode_support", "imode_holdout", "tfs_support", "tfs_holdout"},
            rows);
  std::printf("wrote %s; step %d holdout: imode %.6g tfs %.6g\n", out_s.c_str(), m_v,
              rows.back()[2], rows.back()[4]);
}

void cmd_pca(Opts& o, std::vector<std::string> checkpoints, double threshold,
             const std::string& out) {
  if (o.merged.contains("checkpoints") && checkpoints.empty())
    checkpoints = o.merged.at("checkpoints").get<std::vector<std::string>>();
  if (checkpoints.empty()) throw im::UsageError("pass at least one checkpoint");
  o.resolved["checkpoints"] = checkpoints;
  double thr = o.pick<double>("--threshold", "threshold", threshold, 0.99);
  std::string out_s = o.pick<std::string>("--out", "out", out, "");

  std::vector<std::vector<double>> rows;
  for (const std::string& path : checkpoints) {
    im::net::CheckpointData ck = im::net::load_checkpoint(path);
    if (ck.eta_per_instance.empty())
      throw im::DataError("checkpoint " + path + " has no adapted eta vectors");
    im::analysis::PcaResult pca = im::analysis::pca_spectrum(ck.eta_per_instance);
    if (pca.zero_variance)
      std::fprintf(stderr, "warning: %s has a zero-variance eta cloud\n", path.c_str());
    int d_hat = im::analysis::intrinsic_dimension(pca.ratios, thr);
    double cum = 0.0;
    for (size_t k = 0; k < pca.ratios.size(); ++k) {
      cum += pca.ratios[k];
      rows.push_back({double(ck.d_eta), double(k + 1), pca.ratios[k], cum, double(d_hat)});
    }
    std::printf("%s: d_eta=%d d_hat=%d\n", path.c_str(), ck.d_eta, d_hat);
  }
  if (!out_s.empty())
    write_csv(out_s, o.hash(), {"d_eta", "component", "ratio", "cumulative", "d_hat"}, rows);
}

void cmd_gauge_fit(Opts& o, const std::string& checkpoint, const std::string& dataset,
                   const std::string& out, int iters, double lr, uint64_t seed, double rtol,
                   double atol, double max_rmse) {
  std::string ck_path = o.pick<std::string>("--checkpoint", "checkpoint", checkpoint, "");
  std::string ds_path = o.pick<std::string>("--dataset", "dataset", dataset, "");
  std::string out_s = o.pick<std::string>("--out", "out", out, "");
  if (ck_path.empty()) throw im::UsageError("--checkpoint is required");
  if (ds_path.empty()) throw im::UsageError("--dataset is required");
  if (out_s.empty()) throw im::UsageError("--out is required");

  im::analysis::GaugeConfig cfg;
  cfg.iters = o.pick<int>("--iters", "iters", iters, cfg.iters);
  cfg.lr = o.pick<double>("--lr", "lr", lr, cfg.lr);
  cfg.seed = pick_seed(o, seed);
  cfg.solver.rtol = o.pick<double>("--rtol", "rtol", rtol, cfg.solver.rtol);
  cfg.solver.atol = o.pick<double>("--atol", "atol", atol, cfg.solver.atol);
  cfg.max_rmse = o.pick<double>("--max-rmse", "max_rmse", max_rmse, 0.0);

  im::net::CheckpointData ck = im::net::load_checkpoint(ck_path);
  if (ck.eta_per_instance.empty())
    throw im::DataError("checkpoint " + ck_path + " has no adapted eta vectors");
  im::sys::Dataset ds = im::sys::load_dataset(ds_path);
  if (ds.phis.size() != ck.eta_per_instance.size())
    throw im::DataError("dataset instance count does not match checkpoint eta count");

  im::analysis::GaugeFit fit = im::analysis::gauge_fit(ck.eta_per_instance, ds.phis, cfg);
  im::analysis::save_gauge(out_s, fit.map, fit.rmse, o.hash());
  std::printf("wrote %s; endpoint rmse %.6g after %d iterations\n", out_s.c_str(), fit.rmse,
              cfg.iters);
}

void cmd_gauge_measure(Opts& o, const std::string& gauge_path, const std::string& eta_str,
                       const std::string& eta_file, const std::string& checkpoint,
                       const std::string& dataset, const std::string& out, double rtol,
                       double atol, int threads, const std::string& grid_out,
                       const std::string& grid_lo, const std::string& grid_hi, int grid_n,
                       int grid_frames, bool grid_reverse) {
  std::string g_path = o.pick<std::string>("--gauge", "gauge", gauge_path, "");
  if (g_path.empty()) throw im::UsageError("--gauge is required");
  std::string eta_s = o.pick<std::string>("--eta", "eta", eta_str, "");
  std::string etaf = o.pick<std::string>("--eta-file", "eta_file", eta_file, "");
  std::string ck_path = o.pick<std::string>("--checkpoint", "checkpoint", checkpoint, "");
  std::string ds_path = o.pick<std::string>("--dataset", "dataset", dataset, "");
  std::string out_s = o.pick<std::string>("--out", "out", out, "");
  im::ode::SolverConfig solver;
  solver.rtol = o.pick<double>("--rtol", "rtol", rtol, 1e-6);
  solver.atol = o.pick<double>("--atol", "atol", atol, 1e-8);
  int thr = pick_threads(o, threads);
  std::string gout = o.pick<std::string>("--grid-out", "grid_out", grid_out, "");
  std::string glo = o.pick<std::string>("--grid-lo", "grid_lo", grid_lo, "-1,-1");
  std::string ghi = o.pick<std::string>("--grid-hi", "grid_hi", grid_hi, "1,1");
  int gn = o.pick<int>("--grid-n", "grid_n", grid_n, 15);
  int gframes = o.pick<int>("--grid-frames", "grid_frames", grid_frames, 20);
  bool grev = o.pick<bool>("--grid-reverse", "grid_reverse", grid_reverse, false);

  im::analysis::GaugeMap gauge = im::analysis::load_gauge(g_path);

  std::vector<std::vector<double>> etas;
  std::vector<std::vector<double>> labels;
  if (!eta_s.empty()) etas.push_back(parse_doubles(eta_s, "--eta"));
  if (!etaf.empty()) etas.push_back(load_eta_file(etaf));
  if (!ck_path.empty()) {
    im::net::CheckpointData ck = im::net::load_checkpoint(ck_path);
    if (ck.eta_per_instance.empty())
      throw im::DataError("checkpoint " + ck_path + " has no adapted eta vectors");
    for (const auto& e : ck.eta_per_instance) etas.push_back(e);
    if (!ds_path.empty()) {
      im::sys::Dataset ds = im::sys::load_dataset(ds_path);
      if (ds.phis.size() != ck.eta_per_instance.size())
        throw im::DataError("dataset instance count does not match checkpoint eta count");
      labels = ds.phis;
    }
  }
  if (etas.empty() && gout.empty())
    throw im::UsageError("nothing to do: pass --eta, --eta-file, --checkpoint, or --grid-out");

  std::vector<std::vector<double>> rows;
  for (size_t i = 0; i < etas.size(); ++i) {
    auto tic = std::chrono::steady_clock::now();
    std::vector<double> phi_hat = im::analysis::gauge_measure(gauge, etas[i], solver);
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - tic).count();
    double secs = thr == 1 ? 0.0 : wall;
    std::vector<double> row{double(i)};
    if (!labels.empty()) {
      for (double v : labels[i]) row.push_back(v);
    }
    for (double v : phi_hat) row.push_back(v);
    if (!labels.empty()) {
      double num = 0.0, den = 0.0;
      for (size_t j = 0; j < labels[i].size(); ++j) {
        double d = phi_hat[j] - labels[i][j];
        num += d * d;
        den += labels[i][j] * labels[i][j];
      }
      row.push_back(den > 0 ? std::sqrt(num / den) : std::numeric_limits<double>::quiet_NaN());
    }
    row.push_back(secs);
    rows.push_back(std::move(row));
    if (etas.size() == 1) {
      std::string line = "phi_hat:";
      for (double v : phi_hat) line += " " + im::io::fmt17(v);
      std::printf("%s\n", line.c_str());
    }
  }

  if (!out_s.empty() && !rows.empty()) {
    std::vector<std::string> header{"instance"};
    if (!labels.empty())
      for (int j = 0; j < gauge.d_phi; ++j) header.push_back("phi_true" + std::to_string(j));
    for (int j = 0; j < gauge.d_phi; ++j) header.push_back("phi_hat" + std::to_string(j));
    if (!labels.empty()) header.push_back("rel_err");
    header.push_back("seconds");
    write_csv(out_s, o.hash(), header, rows);
    std::printf("wrote %s (%zu measurements)\n", out_s.c_str(), rows.size());
  }

  if (!gout.empty()) {
    std::vector<double> lo = parse_doubles(glo, "--grid-lo");
    std::vector<double> hi = parse_doubles(ghi, "--grid-hi");
    if (lo.size() != 2 || hi.size() != 2)
      throw im::UsageError("--grid-lo/--grid-hi need 2 components");
    im::io::Csv frames = im::analysis::gauge_grid_frames(gauge, lo[0], hi[0], lo[1], hi[1], gn,
                                                         gframes, grev, solver);
    write_csv(gout, o.hash(), frames.header, frames.rows);
    std::printf("wrote %s (%zu frame rows)\n", gout.c_str(), frames.rows.size());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meta-learning force-field experiments"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a trajectory dataset");
  Common gen_c;
  add_common(gen, gen_c);
  std::string gen_family, gen_out, gen_which = "train";
  uint64_t gen_seed = 0;
  int gen_random = 0;
  double gen_dt = 0.01, gen_span = 10.0;
  bool gen_diri = false;
  gen->add_option("--family", gen_family, "system family");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--seed", gen_seed, "rng seed");
  gen->add_option("--which", gen_which, "train or test instance set");
  gen->add_option("--random", gen_random, "replace instances with N random parameter draws");
  gen->add_option("--dt", gen_dt, "sampling interval");
  gen->add_option("--span", gen_span, "trajectory length in seconds");
  gen->add_flag("--kpp-dirichlet", gen_diri, "pin kpp boundaries at 1");
  gen->callback([&] { auto o = make_opts(gen, gen_c, "gen-data");
    cmd_gen_data(o, gen_family, gen_out, gen_seed, gen_which, gen_random, gen_dt, gen_span,
                 gen_diri); });

  // meta-train
  auto* mt = app.add_subcommand("meta-train", "meta-train shared weights on a dataset");
  Common mt_c;
  add_common(mt, mt_c);
  std::string mt_dataset, mt_out;
  bool mt_resume = false;
  im::meta::MetaHyper mt_h;
  uint64_t mt_seed = 0;
  int mt_threads = 1;
  mt->add_option("--dataset", mt_dataset, "dataset directory");
  mt->add_option("--out", mt_out, "output directory for checkpoint and metrics");
  mt->add_flag("--resume", mt_resume, "continue from the checkpoint in --out");
  mt->add_option("--d-eta", mt_h.d_eta, "adaptation vector dimension");
  mt->add_option("--alpha", mt_h.alpha, "inner-loop step size");
  mt->add_option("--beta", mt_h.beta, "outer-loop step size");
  mt->add_option("--m", mt_h.m, "inner adaptation steps");
  mt->add_option("--epochs", mt_h.epochs, "outer epochs");
  mt->add_option("--batch", mt_h.batch, "windows per epoch, split across instances");
  mt->add_option("--window-seconds", mt_h.window_seconds, "training window length");
  mt->add_option("--rtol", mt_h.solver.rtol, "solver relative tolerance");
  mt->add_option("--atol", mt_h.solver.atol, "solver absolute tolerance");
  mt->add_flag("--adam,!--no-adam", mt_h.adam, "adaptive-moment outer updates");
  mt->add_flag("--input-activation", mt_h.input_activation, "softplus after the stem layer");
  mt->add_flag("--split-support-query", mt_h.split_support_query,
               "adapt and evaluate on disjoint windows");
  mt->add_flag("--meta-learn-eta-init", mt_h.meta_learn_eta_init,
               "descend the shared eta starting point");
  mt->add_option("--checkpoint-every", mt_h.checkpoint_every, "checkpoint interval in epochs");
  mt->add_option("--seed", mt_seed, "rng seed");
  mt->add_option("--threads", mt_threads, "worker threads (1 = deterministic reference)");
  mt->callback([&] { auto o = make_opts(mt, mt_c, "meta-train");
    cmd_meta_train(o, mt_dataset, mt_out, mt_resume, mt_h, mt_seed, mt_threads); });

  // adapt
  auto* ad_cmd = app.add_subcommand("adapt", "few-step adaptation to an unseen instance");
  Common ad_c;
  add_common(ad_cmd, ad_c);
  std::string ad_ck, ad_ds, ad_out;
  int ad_inst = 0, ad_m = 5, ad_wins = 20;
  double ad_alpha = 0.01, ad_ws = 1.0, ad_rtol = 1e-5, ad_atol = 1e-7;
  uint64_t ad_seed = 0;
  ad_cmd->add_option("--checkpoint", ad_ck, "meta-trained checkpoint");
  ad_cmd->add_option("--dataset", ad_ds, "dataset holding the unseen instance");
  ad_cmd->add_option("--instance", ad_inst, "instance index in the dataset");
  ad_cmd->add_option("--m", ad_m, "adaptation steps");
  ad_cmd->add_option("--alpha", ad_alpha, "adaptation step size");
  ad_cmd->add_option("--windows", ad_wins, "windows sampled for adaptation");
  ad_cmd->add_option("--window-seconds", ad_ws, "window length");
  ad_cmd->add_option("--rtol", ad_rtol, "solver relative tolerance");
  ad_cmd->add_option("--atol", ad_atol, "solver absolute tolerance");
  ad_cmd->add_option("--seed", ad_seed, "rng seed");
  ad_cmd->add_option("--out", ad_out, "eta JSON output path");
  ad_cmd->callback([&] { auto o = make_opts(ad_cmd, ad_c, "adapt");
    cmd_adapt(o, ad_ck, ad_ds, ad_inst, ad_m, ad_alpha, ad_wins, ad_ws, ad_rtol, ad_atol, ad_seed,
              ad_out); });

  // predict
  auto* pr = app.add_subcommand("predict", "roll out a trajectory from an adapted model");
  Common pr_c;
  add_common(pr, pr_c);
  std::string pr_ck, pr_eta, pr_etaf, pr_y0, pr_family, pr_out;
  double pr_dt = 0.01, pr_span = 10.0, pr_rtol = 1e-7, pr_atol = 1e-9;
  bool pr_diri = false;
  pr->add_option("--checkpoint", pr_ck, "meta-trained checkpoint");
  pr->add_option("--eta", pr_eta, "adaptation vector, comma separated");
  pr->add_option("--eta-file", pr_etaf, "eta JSON written by adapt");
  pr->add_option("--y0", pr_y0, "initial state, comma separated");
  pr->add_option("--dt", pr_dt, "output sampling interval");
  pr->add_option("--span", pr_span, "rollout length in seconds");
  pr->add_option("--rtol", pr_rtol, "solver relative tolerance");
  pr->add_option("--atol", pr_atol, "solver absolute tolerance");
  pr->add_option("--family", pr_family, "system family override");
  pr->add_flag("--kpp-dirichlet", pr_diri, "pinned boundaries for the rollout");
  pr->add_option("--out", pr_out, "trajectory CSV path");
  pr->callback([&] { auto o = make_opts(pr, pr_c, "predict");
    cmd_predict(o, pr_ck, pr_eta, pr_etaf, pr_y0, pr_dt, pr_span, pr_rtol, pr_atol, pr_family,
                pr_diri, pr_out); });

  // compare-tfs
  auto* ct = app.add_subcommand("compare-tfs", "adaptation vs training from scratch");
  Common ct_c;
  add_common(ct, ct_c);
  std::string ct_ck, ct_ds, ct_out;
  int ct_inst = 0, ct_m = 5, ct_wins = 20, ct_hwins = 20;
  double ct_alpha = 0.01, ct_ws = 1.0, ct_rtol = 1e-5, ct_atol = 1e-7;
  uint64_t ct_seed = 0;
  ct->add_option("--checkpoint", ct_ck, "meta-trained checkpoint");
  ct->add_option("--dataset", ct_ds, "dataset holding the unseen instance");
  ct->add_option("--instance", ct_inst, "instance index");
  ct->add_option("--m", ct_m, "gradient-step budget for both sides");
  ct->add_option("--alpha", ct_alpha, "step size for both sides");
  ct->add_option("--windows", ct_wins, "support windows");
  ct->add_option("--holdout-windows", ct_hwins, "held-out evaluation windows");
  ct->add_option("--window-seconds", ct_ws, "window length");
  ct->add_option("--rtol", ct_rtol, "solver relative tolerance");
  ct->add_option("--atol", ct_atol, "solver absolute tolerance");
  ct->add_option("--seed", ct_seed, "rng seed");
  ct->add_option("--out", ct_out, "loss-curve CSV path");
  ct->callback([&] { auto o = make_opts(ct, ct_c, "compare-tfs");
    cmd_compare_tfs(o, ct_ck, ct_ds, ct_inst, ct_m, ct_alpha, ct_wins, ct_hwins, ct_ws, ct_rtol,
                    ct_atol, ct_seed, ct_out); });

  // pca
  auto* pc = app.add_subcommand("pca", "explained-variance spectrum of adapted etas");
  Common pc_c;
  add_common(pc, pc_c);
  std::vector<std::string> pc_cks;
  double pc_thr = 0.99;
  std::string pc_out;
  pc->add_option("checkpoints", pc_cks, "checkpoints to analyze");
  pc->add_option("--threshold", pc_thr, "cumulative variance threshold");
  pc->add_option("--out", pc_out, "variance CSV path");
  pc->callback([&] { auto o = make_opts(pc, pc_c, "pca");
    cmd_pca(o, pc_cks, pc_thr, pc_out); });

  // gauge-fit
  auto* gf = app.add_subcommand("gauge-fit", "calibrate the eta-to-parameter flow");
  Common gf_c;
  add_common(gf, gf_c);
  std::string gf_ck, gf_ds, gf_out;
  int gf_iters = 2000;
  double gf_lr = 1e-2, gf_rtol = 1e-6, gf_atol = 1e-8, gf_max = 0.0;
  uint64_t gf_seed = 0;
  gf->add_option("--checkpoint", gf_ck, "checkpoint with per-instance etas");
  gf->add_option("--dataset", gf_ds, "dataset providing calibration labels");
  gf->add_option("--out", gf_out, "gauge JSON output path");
  gf->add_option("--iters", gf_iters, "fit iterations");
  gf->add_option("--lr", gf_lr, "fit step size");
  gf->add_option("--rtol", gf_rtol, "flow solver relative tolerance");
  gf->add_option("--atol", gf_atol, "flow solver absolute tolerance");
  gf->add_option("--max-rmse", gf_max, "fail if the final rmse exceeds this (0 = off)");
  gf->add_option("--seed", gf_seed, "rng seed");
  gf->callback([&] { auto o = make_opts(gf, gf_c, "gauge-fit");
    cmd_gauge_fit(o, gf_ck, gf_ds, gf_out, gf_iters, gf_lr, gf_seed, gf_rtol, gf_atol, gf_max); });

  // gauge-measure
  auto* gm = app.add_subcommand("gauge-measure", "map etas to physical parameters");
  Common gm_c;
  add_common(gm, gm_c);
  std::string gm_gauge, gm_eta, gm_etaf, gm_ck, gm_ds, gm_out;
  std::string gm_gout, gm_glo = "-1,-1", gm_ghi = "1,1";
  double gm_rtol = 1e-6, gm_atol = 1e-8;
  int gm_threads = 1, gm_gn = 15, gm_gframes = 20;
  bool gm_grev = false;
  gm->add_option("--gauge", gm_gauge, "fitted gauge JSON");
  gm->add_option("--eta", gm_eta, "single eta, comma separated");
  gm->add_option("--eta-file", gm_etaf, "eta JSON written by adapt");
  gm->add_option("--checkpoint", gm_ck, "measure every calibration eta in a checkpoint");
  gm->add_option("--dataset", gm_ds, "labels for relative-error reporting");
  gm->add_option("--out", gm_out, "measurement report CSV");
  gm->add_option("--rtol", gm_rtol, "flow solver relative tolerance");
  gm->add_option("--atol", gm_atol, "flow solver absolute tolerance");
  gm->add_option("--threads", gm_threads, "1 zeroes the seconds column for reproducibility");
  gm->add_option("--grid-out", gm_gout, "grid deformation frames CSV");
  gm->add_option("--grid-lo", gm_glo, "grid lower corner");
  gm->add_option("--grid-hi", gm_ghi, "grid upper corner");
  gm->add_option("--grid-n", gm_gn, "grid points per axis");
  gm->add_option("--grid-frames", gm_gframes, "frames between t=0 and t=1");
  gm->add_flag("--grid-reverse", gm_grev, "flow the grid backwards (parameters to eta)");
  gm->callback([&] { auto o = make_opts(gm, gm_c, "gauge-measure");
    cmd_gauge_measure(o, gm_gauge, gm_eta, gm_etaf, gm_ck, gm_ds, gm_out, gm_rtol, gm_atol,
                      gm_threads, gm_gout, gm_glo, gm_ghi, gm_gn, gm_gframes, gm_grev); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const im::UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const im::DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const im::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
