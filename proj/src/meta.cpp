#include "imode/meta.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <memory>
#include <thread>

#include "imode/io_util.hpp"

namespace fs = std::filesystem;

namespace imode::meta {

using ad::Tape;
using ad::Tensor;
using ad::Var;

ModelSpec make_model_spec(sys::Family family, int d_eta, const sys::KppOptions& kpp,
                          bool input_activation) {
  if (d_eta < 0) throw ContractError("d_eta must be non-negative");
  ModelSpec s;
  s.family = family;
  s.d_eta = d_eta;
  s.kpp = kpp;
  s.dim = sys::state_dim(family, kpp);
  s.arch.input_activation = input_activation;
  switch (family) {
    case sys::Family::pendulum:
    case sys::Family::bistable:
    case sys::Family::wall:
      s.arch.head = net::HeadKind::symmetric_energy;
      s.arch.input_dim = 1 + d_eta;
      s.arch.output_dim = 1;
      break;
    case sys::Family::vdp:
      s.arch.head = net::HeadKind::direct_force;
      s.arch.input_dim = 2 + d_eta;
      s.arch.output_dim = 1;
      break;
    case sys::Family::double_pendulum:
      s.arch.head = net::HeadKind::direct_force;
      s.arch.input_dim = 4 + d_eta;
      s.arch.output_dim = 2;
      break;
    case sys::Family::kpp:
      s.arch.head = net::HeadKind::direct_force;
      s.arch.input_dim = 1 + d_eta;  // nodewise reaction, diffusion is known
      s.arch.output_dim = 1;
      break;
  }
  return s;
}

BoundModel bind_model(Tape& tape, const ModelSpec& spec, std::span<const double> theta,
                      std::span<const double> eta, bool theta_grad, bool eta_grad) {
  if (int(eta.size()) != spec.d_eta)
    throw ContractError("eta size " + std::to_string(eta.size()) + ", spec has d_eta " +
                        std::to_string(spec.d_eta));
  BoundModel bm;
  bm.spec = &spec;
  net::ModelParams p;
  p.arch = spec.arch;
  p.theta.assign(theta.begin(), theta.end());
  bm.net = net::bind_params(tape, p, theta_grad);
  if (spec.d_eta > 0)
    bm.eta = tape.leaf(Tensor::vec(std::vector<double>(eta.begin(), eta.end())), eta_grad);
  if (spec.family == sys::Family::kpp) {
    int n = spec.kpp.nodes;
    Tensor d = Tensor::mat(n, n);
    d.data = sys::kpp_diffusion_matrix(spec.kpp);
    bm.kpp_diff = tape.constant(std::move(d));
    if (spec.kpp.dirichlet) {
      Tensor m = Tensor::vec(n, 1.0);
      m[0] = 0.0;
      m[size_t(n - 1)] = 0.0;
      bm.kpp_mask = tape.constant(std::move(m));
    }
  }
  return bm;
}

Var model_rhs(const BoundModel& bm, Var y) {
  const ModelSpec& spec = *bm.spec;
  switch (spec.family) {
    case sys::Family::pendulum:
    case sys::Family::bistable:
    case sys::Family::wall: {
      Var x = slice(y, 0, 1);
      Var v = slice(y, 1, 1);
      Var f = net::energy_force(bm.net, x, bm.eta);
      return concat(v, f);
    }
    case sys::Family::vdp: {
      Var v = slice(y, 1, 1);
      Var f = net::direct_force(bm.net, y, bm.eta);
      return concat(v, f);
    }
    case sys::Family::double_pendulum: {
      Var v = slice(y, 2, 2);
      Var f = net::direct_force(bm.net, y, bm.eta);
      return concat(v, f);
    }
    case sys::Family::kpp: {
      int n = spec.kpp.nodes;
      Var u = reshape(y, 2, n, 1);
      Var in = bm.eta.valid() ? hcat(u, rowrep(bm.eta, n)) : u;
      Var react = reshape(net::forward(bm.net, in), 1, n, 1);
      Var du = add(matmul(bm.kpp_diff, y), react);
      if (bm.kpp_mask.valid()) du = mul(du, bm.kpp_mask);
      return du;
    }
  }
  throw ContractError("unhandled family");
}

namespace {

constexpr double kDivergencePenalty = 1e6;

void accumulate_theta_grads(const ModelSpec& spec, const std::vector<Tensor>& per_leaf,
                            std::vector<double>& flat) {
  size_t off = 0;
  for (const Tensor& t : per_leaf) {
    const double* src = t.data.data();
    double* dst = flat.data() + off;
    for (size_t i = 0; i < t.numel(); ++i) dst[i] += src[i];
    off += t.numel();
  }
}

}  // namespace

LossGrads instance_loss(const ModelSpec& spec, std::span<const double> theta,
                        std::span<const double> eta, std::span<const sys::Window> windows,
                        const ode::SolverConfig& solver, bool want_theta, bool want_eta,
                        Tape& tape) {
  if (windows.empty()) throw ContractError("instance_loss: no windows");
  LossGrads out;
  int pcount = net::param_count(spec.arch);
  if (want_theta) out.dtheta.assign(size_t(pcount), 0.0);
  if (want_eta) out.deta.assign(size_t(spec.d_eta), 0.0);

  for (const sys::Window& w : windows) {
    if (w.len < 1) throw ContractError("instance_loss: empty window");
    tape.clear();
    BoundModel bm = bind_model(tape, spec, theta, eta, want_theta, want_eta);
    std::span<const double> y0 = w.obs(0);
    Var y0v = tape.constant(Tensor::vec(std::vector<double>(y0.begin(), y0.end())));
    std::vector<double> grid = w.grid();
    ode::RhsV rhs = [&bm](Var y) { return model_rhs(bm, y); };

    std::vector<Var> states;
    try {
      states = ode::dopri5_vars(tape, rhs, y0v, grid, solver);
    } catch (const ode::DivergenceError&) {
      out.loss += kDivergencePenalty;
      out.diverged += 1;
      continue;
    }

    // y(t0) is the observed point itself; start the mismatch sum at the
    // first predicted step
    Var acc;
    for (size_t k = 1; k < w.len; ++k) {
      std::span<const double> obs = w.obs(k);
      Var d = sub(states[k], tape.constant(Tensor::vec(std::vector<double>(obs.begin(), obs.end()))));
      Var sq = dot(d, d);
      acc = acc.valid() ? add(acc, sq) : sq;
    }
    double norm = w.len > 1 ? 1.0 / double(w.len - 1) : 1.0;
    Var lw = acc.valid() ? scale(acc, norm) : tape.constant_scalar(0.0);

    double lval = lw.value()[0];
    if (!std::isfinite(lval)) {
      out.loss += kDivergencePenalty;
      out.diverged += 1;
      continue;
    }
    out.loss += lval;

    if (want_theta || want_eta) {
      std::vector<Var> wrt;
      if (want_theta) wrt = bm.net.leaves;
      if (want_eta) wrt.push_back(bm.eta);
      std::vector<Tensor> grads = ad::grad_values(lw, wrt);
      if (want_eta) {
        const Tensor& ge = grads.back();
        for (int i = 0; i < spec.d_eta; ++i) out.deta[size_t(i)] += ge[size_t(i)];
        grads.pop_back();
      }
      if (want_theta) accumulate_theta_grads(spec, grads, out.dtheta);
    }
  }

  double inv = 1.0 / double(windows.size());
  out.loss *= inv;
  for (double& v : out.dtheta) v *= inv;
  for (double& v : out.deta) v *= inv;
  return out;
}

std::vector<double> inner_adapt(const ModelSpec& spec, std::span<const double> theta,
                                std::vector<double> eta, std::span<const sys::Window> windows,
                                double alpha, int m, const ode::SolverConfig& solver, Tape& tape,
                                std::vector<double>* losses) {
  if (int(eta.size()) != spec.d_eta) throw ContractError("inner_adapt: eta size mismatch");
  for (int s = 0; s < m; ++s) {
    LossGrads lg = instance_loss(spec, theta, eta, windows, solver, false, true, tape);
    if (losses) losses->push_back(lg.loss);
    bool finite = true;
    for (double g : lg.deta)
      if (!std::isfinite(g)) finite = false;
    if (!finite) break;  // keep the last usable eta
    for (int i = 0; i < spec.d_eta; ++i) eta[size_t(i)] -= alpha * lg.deta[size_t(i)];
  }
  if (losses)
    losses->push_back(instance_loss(spec, theta, eta, windows, solver, false, false, tape).loss);
  return eta;
}

double eval_loss(const ModelSpec& spec, std::span<const double> theta, std::span<const double> eta,
                 std::span<const sys::Window> windows, const ode::SolverConfig& solver,
                 Tape& tape) {
  return instance_loss(spec, theta, eta, windows, solver, false, false, tape).loss;
}

// ---- adam ----

namespace {

struct Adam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  net::AdamState* st;

  void step(std::vector<double>& x, const std::vector<double>& g) {
    if (st->m.empty()) {
      st->m.assign(x.size(), 0.0);
      st->v.assign(x.size(), 0.0);
    }
    st->t += 1;
    double c1 = 1.0 - std::pow(0.9, double(st->t));
    double c2 = 1.0 - std::pow(0.999, double(st->t));
    for (size_t i = 0; i < x.size(); ++i) {
      st->m[i] = b1 * st->m[i] + (1.0 - b1) * g[i];
      st->v[i] = b2 * st->v[i] + (1.0 - b2) * g[i] * g[i];
      x[i] -= lr * (st->m[i] / c1) / (std::sqrt(st->v[i] / c2) + eps);
    }
  }
};

std::string now_iso8601() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

MetaResult meta_train(const sys::TrainingView& view, const MetaHyper& hyper,
                      const fs::path& outdir, uint64_t config_hash, bool deterministic_io,
                      const net::CheckpointData* resume, const EpochHook& hook) {
  int n_inst = view.n_instances();
  if (n_inst == 0) throw DataError("meta_train: dataset has no instances");
  ModelSpec spec = make_model_spec(view.family, hyper.d_eta, view.kpp, hyper.input_activation);
  if (view.dim != spec.dim) throw DataError("meta_train: dataset state dim mismatch");

  MetaResult res;
  net::AdamState adam_state;
  int start_epoch = 0;
  if (resume) {
    if (resume->params.arch.input_dim != spec.arch.input_dim ||
        resume->params.arch.head != spec.arch.head || resume->d_eta != hyper.d_eta ||
        (!resume->family.empty() && resume->family != sys::family_name(view.family)))
      throw DataError("resume checkpoint does not match the requested configuration");
    res.params = resume->params;
    res.eta_init = resume->eta_init;
    adam_state = resume->adam;
    start_epoch = std::max(0, resume->epoch);
  } else {
    res.params = net::init_params(spec.arch, hyper.seed);
    res.eta_init.assign(size_t(hyper.d_eta), 0.0);
  }

  int per_inst = std::max(1, int(std::llround(double(hyper.batch) / double(n_inst))));
  int threads = std::max(1, hyper.threads);
  double lr_scale = 1.0;

  std::ofstream metrics;
  if (!outdir.empty()) {
    io::ensure_dir(outdir);
    bool append = resume && fs::exists(outdir / "metrics.csv");
    metrics.open(outdir / "metrics.csv", append ? std::ios::app : std::ios::trunc);
    if (!metrics) throw DataError("cannot write metrics.csv in " + outdir.string());
    if (!append)
      metrics << io::provenance_line(config_hash) << "\n"
              << "epoch,outer_loss,mean_inner_final_loss,wallclock_s\n";
  }

  auto save_ckpt = [&](int epoch) {
    if (outdir.empty()) return;
    net::CheckpointData c;
    c.params = res.params;
    c.d_eta = hyper.d_eta;
    c.eta_init = res.eta_init;
    c.seed = hyper.seed;
    c.created = deterministic_io ? "1970-01-01T00:00:00Z" : now_iso8601();
    c.config_hash = config_hash;
    c.family = sys::family_name(view.family);
    if (view.family == sys::Family::kpp) {
      c.kpp_nodes = spec.kpp.nodes;
      c.kpp_diffusivity = spec.kpp.diffusivity;
      c.kpp_dirichlet = spec.kpp.dirichlet;
    }
    c.epoch = epoch;
    c.eta_per_instance = res.eta_per_instance;
    c.adam = adam_state;
    net::save_checkpoint(outdir / "checkpoint.json", c);
  };

  struct Slot {
    std::vector<double> dtheta;
    std::vector<double> deta0;
    std::vector<double> eta;
    double outer = 0.0;
    double inner_final = 0.0;
  };
  std::vector<Slot> slots(static_cast<size_t>(n_inst));
  res.eta_per_instance.assign(size_t(n_inst), res.eta_init);

  int pcount = net::param_count(spec.arch);
  auto run_instance = [&](int epoch, int i, Tape& tape) {
    Rng rng(derive_seed(hyper.seed, 0x77696e, uint64_t(epoch), uint64_t(i)));
    int total = hyper.split_support_query ? 2 * per_inst : per_inst;
    std::vector<sys::Window> wins = sys::sample_windows(view, i, hyper.window_seconds, total, rng);
    std::span<const sys::Window> support(wins.data(), size_t(per_inst));
    std::span<const sys::Window> query =
        hyper.split_support_query
            ? std::span<const sys::Window>(wins.data() + per_inst, size_t(per_inst))
            : support;
    Slot& sl = slots[size_t(i)];
    std::vector<double> track;
    std::vector<double> eta = inner_adapt(spec, res.params.theta, res.eta_init, support,
                                          hyper.alpha, hyper.m, hyper.solver, tape, &track);
    LossGrads lg = instance_loss(spec, res.params.theta, eta, query, hyper.solver, true,
                                 hyper.meta_learn_eta_init, tape);
    sl.dtheta = std::move(lg.dtheta);
    sl.deta0 = std::move(lg.deta);
    sl.outer = lg.loss;
    sl.inner_final = track.back();
    sl.eta = std::move(eta);
  };

  for (int epoch = start_epoch + 1; epoch <= hyper.epochs; ++epoch) {
    auto tic = std::chrono::steady_clock::now();

    if (threads <= 1 || n_inst == 1) {
      Tape tape;
      for (int i = 0; i < n_inst; ++i) run_instance(epoch, i, tape);
    } else {
      int nw = std::min(threads, n_inst);
      std::vector<std::thread> pool;
      pool.reserve(size_t(nw));
      for (int w = 0; w < nw; ++w) {
        pool.emplace_back([&, w]() {
          Tape tape;
          for (int i = w; i < n_inst; i += nw) run_instance(epoch, i, tape);
        });
      }
      for (auto& th : pool) th.join();
    }

    // ordered reduction keeps the result independent of thread count
    std::vector<double> g(size_t(pcount), 0.0);
    std::vector<double> geta(size_t(hyper.d_eta), 0.0);
    double outer = 0.0, inner_final = 0.0;
    for (int i = 0; i < n_inst; ++i) {
      const Slot& sl = slots[size_t(i)];
      for (size_t k = 0; k < g.size(); ++k) g[k] += sl.dtheta[k];
      if (hyper.meta_learn_eta_init)
        for (size_t k = 0; k < geta.size(); ++k) geta[k] += sl.deta0[k];
      outer += sl.outer;
      inner_final += sl.inner_final;
      res.eta_per_instance[size_t(i)] = sl.eta;
    }
    double inv = 1.0 / double(n_inst);
    for (double& v : g) v *= inv;
    for (double& v : geta) v *= inv;
    outer *= inv;
    inner_final *= inv;

    bool finite = std::isfinite(outer);
    for (double v : g)
      if (!std::isfinite(v)) finite = false;
    if (finite) {
      if (hyper.adam) {
        Adam opt{hyper.beta * lr_scale, 0.9, 0.999, 1e-8, &adam_state};
        opt.step(res.params.theta, g);
      } else {
        for (size_t k = 0; k < g.size(); ++k) res.params.theta[k] -= hyper.beta * lr_scale * g[k];
      }
      if (hyper.meta_learn_eta_init)
        for (size_t k = 0; k < geta.size(); ++k)
          res.eta_init[k] -= hyper.beta * lr_scale * geta[k];
    } else {
      // a diverged batch poisons the update; shrink the step and move on
      lr_scale = std::max(1e-3, lr_scale * 0.5);
    }

    auto toc = std::chrono::steady_clock::now();
    EpochStats st;
    st.outer_loss = outer;
    st.inner_final = inner_final;
    st.wallclock_s =
        deterministic_io ? 0.0 : std::chrono::duration<double>(toc - tic).count();
    res.history.push_back(st);
    res.epochs_done = epoch;

    if (metrics.is_open()) {
      metrics << epoch << ',' << io::fmt17(st.outer_loss) << ',' << io::fmt17(st.inner_final)
              << ',' << io::fmt17(st.wallclock_s) << '\n';
      metrics.flush();
    }
    if (hook) hook(epoch, st);
    if (hyper.checkpoint_every > 0 && epoch % hyper.checkpoint_every == 0) save_ckpt(epoch);
  }

  res.adam = adam_state;
  save_ckpt(res.epochs_done);
  return res;
}

AdaptResult adapt_unseen(const ModelSpec& spec, const net::ModelParams& params,
                         std::span<const double> eta_init, const sys::TrainingView& view,
                         int instance, int m, double alpha, int n_windows, double window_seconds,
                         uint64_t seed, const ode::SolverConfig& solver) {
  Rng rng(derive_seed(seed, 0xada9, uint64_t(instance)));
  std::vector<sys::Window> wins = sys::sample_windows(view, instance, window_seconds, n_windows, rng);
  Tape tape;
  AdaptResult out;
  out.eta = inner_adapt(spec, params.theta, std::vector<double>(eta_init.begin(), eta_init.end()),
                        wins, alpha, m, solver, tape, &out.losses);
  return out;
}

ode::RhsD make_value_rhs(const ModelSpec& spec, const net::ModelParams& params,
                         std::vector<double> eta) {
  struct Ctx {
    ModelSpec spec;
    Tape tape;
    BoundModel bm;
    size_t base = 0;
  };
  auto ctx = std::make_shared<Ctx>();
  ctx->spec = spec;
  ctx->bm = bind_model(ctx->tape, ctx->spec, params.theta, eta, false, false);
  ctx->base = ctx->tape.mark();
  return [ctx](std::span<const double> y, std::span<double> dy) {
    ctx->tape.truncate(ctx->base);
    Var yv = ctx->tape.constant(Tensor::vec(std::vector<double>(y.begin(), y.end())));
    Var d = model_rhs(ctx->bm, yv);
    const Tensor& v = d.value();
    std::copy(v.data.begin(), v.data.end(), dy.begin());
  };
}

ode::Trajectory predict(const ModelSpec& spec, const net::ModelParams& params,
                        std::span<const double> eta, std::span<const double> y0,
                        const std::vector<double>& grid, const ode::SolverConfig& solver) {
  ode::RhsD rhs = make_value_rhs(spec, params, std::vector<double>(eta.begin(), eta.end()));
  return ode::dopri5(rhs, y0, grid, solver);
}

net::ModelParams train_from_scratch(const ModelSpec& spec, uint64_t init_seed,
                                    std::span<const sys::Window> windows, int steps, double alpha,
                                    const ode::SolverConfig& solver, Tape& tape,
                                    std::vector<double>* losses) {
  net::ModelParams p = net::init_params(spec.arch, init_seed);
  std::vector<double> eta(size_t(spec.d_eta), 0.0);
  for (int s = 0; s < steps; ++s) {
    LossGrads lg = instance_loss(spec, p.theta, eta, windows, solver, true, false, tape);
    if (losses) losses->push_back(lg.loss);
    bool finite = true;
    for (double g : lg.dtheta)
      if (!std::isfinite(g)) finite = false;
    if (!finite) break;
    for (size_t k = 0; k < p.theta.size(); ++k) p.theta[k] -= alpha * lg.dtheta[k];
  }
  if (losses) losses->push_back(eval_loss(spec, p.theta, eta, windows, solver, tape));
  return p;
}

}  // namespace imode::meta
