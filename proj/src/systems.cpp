#include "imode/systems.hpp"

#include <cmath>
#include <numbers>

#include "imode/io_util.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace imode::sys {

const char* family_name(Family f) {
  switch (f) {
    case Family::pendulum: return "pendulum";
    case Family::bistable: return "bistable";
    case Family::vdp: return "vdp";
    case Family::double_pendulum: return "double_pendulum";
    case Family::wall: return "wall";
    case Family::kpp: return "kpp";
  }
  return "?";
}

Family parse_family(const std::string& s) {
  if (s == "pendulum") return Family::pendulum;
  if (s == "bistable") return Family::bistable;
  if (s == "vdp") return Family::vdp;
  if (s == "double_pendulum") return Family::double_pendulum;
  if (s == "wall") return Family::wall;
  if (s == "kpp") return Family::kpp;
  throw UsageError("unknown family '" + s + "'");
}

int state_dim(Family f, const KppOptions& kpp) {
  switch (f) {
    case Family::double_pendulum: return 4;
    case Family::kpp: return kpp.nodes;
    default: return 2;
  }
}

int phi_dim(Family f) {
  switch (f) {
    case Family::pendulum: return 1;
    case Family::bistable: return 2;
    case Family::vdp: return 3;
    case Family::double_pendulum: return 2;
    case Family::wall: return 1;
    case Family::kpp: return 1;
  }
  return 0;
}

static void check_phi(Family f, const std::vector<double>& phi) {
  if (int(phi.size()) != phi_dim(f))
    throw ContractError(std::string(family_name(f)) + " expects " + std::to_string(phi_dim(f)) +
                        " parameters, got " + std::to_string(phi.size()));
}

ode::RhsD make_rhs(Family f, std::vector<double> phi, KppOptions kpp) {
  check_phi(f, phi);
  switch (f) {
    case Family::pendulum: {
      double gl = kGravity / phi[0];
      return [gl](std::span<const double> y, std::span<double> dy) {
        dy[0] = y[1];
        dy[1] = -gl * std::sin(y[0]);
      };
    }
    case Family::bistable: {
      double k1 = phi[0], k3 = phi[1];
      return [k1, k3](std::span<const double> y, std::span<double> dy) {
        dy[0] = y[1];
        dy[1] = -k1 * y[0] - k3 * y[0] * y[0] * y[0];
      };
    }
    case Family::vdp: {
      double eps = phi[0], del = phi[1], om = phi[2];
      return [eps, del, om](std::span<const double> y, std::span<double> dy) {
        dy[0] = y[1];
        dy[1] = eps * (1.0 - del * y[0] * y[0]) * y[1] - om * om * y[0];
      };
    }
    case Family::double_pendulum: {
      double l1 = phi[0], l2 = phi[1];
      // two unit point masses
      return [l1, l2](std::span<const double> y, std::span<double> dy) {
        double th1 = y[0], th2 = y[1], w1 = y[2], w2 = y[3];
        double d = th1 - th2;
        double den = 3.0 - std::cos(2.0 * d);
        double sd = std::sin(d), cd = std::cos(d);
        dy[0] = w1;
        dy[1] = w2;
        dy[2] = (-3.0 * kGravity * std::sin(th1) - kGravity * std::sin(th1 - 2.0 * th2) -
                 2.0 * sd * (w2 * w2 * l2 + w1 * w1 * l1 * cd)) /
                (l1 * den);
        dy[3] = 2.0 * sd * (2.0 * w1 * w1 * l1 + 2.0 * kGravity * std::cos(th1) + w2 * w2 * l2 * cd) /
                (l2 * den);
      };
    }
    case Family::wall: {
      double w = phi[0];
      return [w](std::span<const double> y, std::span<double> dy) {
        dy[0] = y[1];
        dy[1] = y[0] >= w ? -kWallStiffness * (y[0] - w) : 0.0;
      };
    }
    case Family::kpp: {
      double r = phi[0];
      int n = kpp.nodes;
      double h = 1.0 / double(n - 1);
      double dh2 = kpp.diffusivity / (h * h);
      bool dir = kpp.dirichlet;
      return [r, n, dh2, dir](std::span<const double> y, std::span<double> dy) {
        for (int i = 0; i < n; ++i) {
          // zero-flux ends mirror the interior neighbor
          double um = i == 0 ? y[1] : y[size_t(i - 1)];
          double up = i == n - 1 ? y[size_t(n - 2)] : y[size_t(i + 1)];
          dy[size_t(i)] = dh2 * (up - 2.0 * y[size_t(i)] + um) +
                          r * y[size_t(i)] * (1.0 - y[size_t(i)]);
        }
        if (dir) {
          dy[0] = 0.0;
          dy[size_t(n - 1)] = 0.0;
        }
      };
    }
  }
  throw ContractError("unhandled family");
}

double mech_energy(Family f, std::span<const double> phi, std::span<const double> y) {
  switch (f) {
    case Family::pendulum:
      return 0.5 * y[1] * y[1] - (kGravity / phi[0]) * std::cos(y[0]);
    case Family::bistable:
      return 0.5 * y[1] * y[1] + 0.5 * phi[0] * y[0] * y[0] + 0.25 * phi[1] * std::pow(y[0], 4);
    case Family::double_pendulum: {
      double l1 = phi[0], l2 = phi[1];
      double th1 = y[0], th2 = y[1], w1 = y[2], w2 = y[3];
      double kin = l1 * l1 * w1 * w1 + 0.5 * l2 * l2 * w2 * w2 +
                   l1 * l2 * w1 * w2 * std::cos(th1 - th2);
      double pot = -2.0 * kGravity * l1 * std::cos(th1) - kGravity * l2 * std::cos(th2);
      return kin + pot;
    }
    case Family::wall: {
      double w = phi[0];
      double pen = y[0] >= w ? y[0] - w : 0.0;
      return 0.5 * y[1] * y[1] + 0.5 * kWallStiffness * pen * pen;
    }
    default:
      throw ContractError(std::string(family_name(f)) + " has no conserved mechanical energy");
  }
}

std::vector<double> kpp_diffusion_matrix(const KppOptions& kpp) {
  int n = kpp.nodes;
  double h = 1.0 / double(n - 1);
  double dh2 = kpp.diffusivity / (h * h);
  std::vector<double> m(size_t(n) * size_t(n), 0.0);
  for (int i = 0; i < n; ++i) {
    int im = i == 0 ? 1 : i - 1;
    int ip = i == n - 1 ? n - 2 : i + 1;
    m[size_t(i) * n + i] -= 2.0 * dh2;
    m[size_t(i) * n + im] += dh2;
    m[size_t(i) * n + ip] += dh2;
  }
  if (kpp.dirichlet) {
    for (int j = 0; j < n; ++j) {
      m[size_t(0) * n + j] = 0.0;
      m[size_t(n - 1) * n + j] = 0.0;
    }
  }
  return m;
}

// ---- datasets ----

static double default_gen_dt(Family f, double dt) {
  switch (f) {
    case Family::wall: return dt / 100.0;  // stiff contacts
    case Family::kpp: return dt / 4.0;
    default: return dt / 10.0;
  }
}

std::vector<double> make_grid(double span, double dt) {
  int n = int(std::llround(span / dt));
  if (n < 1 || std::fabs(n * dt - span) > 1e-9 * std::max(1.0, span))
    throw ContractError("span must be a multiple of dt");
  std::vector<double> g(size_t(n) + 1);
  for (int i = 0; i <= n; ++i) g[size_t(i)] = i * dt;
  return g;
}

void generate_dataset(const DatasetSpec& spec, const fs::path& outdir, uint64_t config_hash) {
  if (spec.phis.empty()) throw ContractError("dataset needs at least one instance");
  if (spec.ics.empty()) throw ContractError("dataset needs at least one initial condition");
  int dim = state_dim(spec.family, spec.kpp);
  for (const auto& ic : spec.ics)
    if (int(ic.size()) != dim)
      throw ContractError("initial condition size " + std::to_string(ic.size()) +
                          ", state dim is " + std::to_string(dim));
  double gen_dt = spec.gen_dt > 0 ? spec.gen_dt : default_gen_dt(spec.family, spec.dt);
  std::vector<double> grid = make_grid(spec.span, spec.dt);

  io::ensure_dir(outdir);
  std::string prov = io::provenance_line(config_hash);

  for (size_t i = 0; i < spec.phis.size(); ++i) {
    ode::RhsD rhs = make_rhs(spec.family, spec.phis[i], spec.kpp);
    fs::path idir = outdir / ("inst_" + std::to_string(i));
    io::ensure_dir(idir);
    for (size_t j = 0; j < spec.ics.size(); ++j) {
      ode::Trajectory tr = ode::rk4_reference(rhs, spec.ics[j], grid, gen_dt);
      std::string out;
      out.reserve(tr.points() * size_t(dim + 1) * 20);
      out += prov;
      out += "\nt";
      for (int c = 0; c < dim; ++c) out += ",s" + std::to_string(c);
      out += '\n';
      for (size_t k = 0; k < tr.points(); ++k) {
        io::append17(out, tr.t[k]);
        for (double v : tr.row(k)) {
          out += ',';
          io::append17(out, v);
        }
        out += '\n';
      }
      io::write_text_atomic(idir / ("traj_" + std::to_string(j) + ".csv"), out);
    }
  }

  std::string man;
  man += "{\n  \"format\": \"imode-dataset-v1\",\n";
  char hbuf[32];
  std::snprintf(hbuf, sizeof hbuf, "%016llx", (unsigned long long)config_hash);
  man += "  \"config_hash\": \"" + std::string(hbuf) + "\",\n";
  man += "  \"family\": \"" + std::string(family_name(spec.family)) + "\",\n";
  man += "  \"dt\": " + io::fmt17(spec.dt) + ",\n";
  man += "  \"span\": " + io::fmt17(spec.span) + ",\n";
  man += "  \"state_dim\": " + std::to_string(dim) + ",\n";
  man += "  \"seed\": " + std::to_string(spec.seed) + ",\n";
  if (spec.family == Family::kpp) {
    man += "  \"kpp\": {\"nodes\": " + std::to_string(spec.kpp.nodes) +
           ", \"diffusivity\": " + io::fmt17(spec.kpp.diffusivity) +
           ", \"dirichlet\": " + (spec.kpp.dirichlet ? std::string("true") : std::string("false")) +
           "},\n";
  }
  man += "  \"instances\": [\n";
  for (size_t i = 0; i < spec.phis.size(); ++i) {
    man += "    {\"dir\": \"inst_" + std::to_string(i) + "\", \"n_traj\": " +
           std::to_string(spec.ics.size()) + ", \"phi\": ";
    io::append_json_array(man, spec.phis[i]);
    man += i + 1 < spec.phis.size() ? "},\n" : "}\n";
  }
  man += "  ]\n}\n";
  io::write_text_atomic(outdir / "manifest.json", man);
}

Dataset load_dataset(const fs::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad manifest in " + dir.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.family = parse_family(j.at("family").get<std::string>());
    ds.dt = j.at("dt").get<double>();
    ds.span = j.at("span").get<double>();
    ds.dim = j.at("state_dim").get<int>();
    ds.seed = j.value("seed", uint64_t(0));
    if (j.contains("kpp")) {
      ds.kpp.nodes = j["kpp"].at("nodes").get<int>();
      ds.kpp.diffusivity = j["kpp"].at("diffusivity").get<double>();
      ds.kpp.dirichlet = j["kpp"].at("dirichlet").get<bool>();
    }
    for (const auto& inst : j.at("instances")) {
      ds.phis.push_back(inst.at("phi").get<std::vector<double>>());
      std::vector<ode::Trajectory> trs;
      int ntr = inst.at("n_traj").get<int>();
      fs::path idir = dir / inst.at("dir").get<std::string>();
      for (int t = 0; t < ntr; ++t) {
        io::Csv csv = io::read_csv(idir / ("traj_" + std::to_string(t) + ".csv"));
        if (int(csv.header.size()) != ds.dim + 1)
          throw DataError("trajectory width mismatch in " + idir.string());
        ode::Trajectory tr;
        tr.dim = ds.dim;
        tr.t.reserve(csv.rows.size());
        tr.y.reserve(csv.rows.size() * size_t(ds.dim));
        for (const auto& row : csv.rows) {
          tr.t.push_back(row[0]);
          tr.y.insert(tr.y.end(), row.begin() + 1, row.end());
        }
        trs.push_back(std::move(tr));
      }
      ds.instances.push_back(std::move(trs));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + dir.string() + " missing fields: " + e.what());
  }
  return ds;
}

TrainingView training_view(const Dataset& ds) {
  TrainingView v;
  v.family = ds.family;
  v.dt = ds.dt;
  v.dim = ds.dim;
  v.kpp = ds.kpp;
  v.trajs = &ds.instances;
  return v;
}

std::vector<double> Window::grid() const {
  return std::vector<double>(traj->t.begin() + long(start), traj->t.begin() + long(start + len));
}

std::vector<Window> sample_windows(const TrainingView& view, int instance, double window_seconds,
                                   int count, Rng& rng) {
  if (instance < 0 || instance >= view.n_instances())
    throw ContractError("instance index out of range");
  size_t win_pts = size_t(std::llround(window_seconds / view.dt)) + 1;
  std::vector<Window> out;
  out.reserve(size_t(count));
  for (int c = 0; c < count; ++c) {
    int j = int(rng.next_below(uint64_t(view.n_traj(instance))));
    const ode::Trajectory& tr = view.traj(instance, j);
    if (tr.points() < win_pts)
      throw ContractError("window of " + std::to_string(win_pts) +
                          " points does not fit a trajectory of " + std::to_string(tr.points()));
    size_t start = size_t(rng.next_below(uint64_t(tr.points() - win_pts + 1)));
    out.push_back(Window{&tr, start, win_pts});
  }
  return out;
}

// ---- experiment protocols ----

static std::vector<std::vector<double>> point_mass_ics() {
  std::vector<std::vector<double>> ics;
  for (double x : {-1.5, -1.0, -0.5, 0.3, 0.7, 1.2})
    for (double v : {-0.5, 0.0, 0.5}) ics.push_back({x, v});
  return ics;
}

static std::vector<double> kpp_ic(int nodes, double c, double a, double b) {
  std::vector<double> u(static_cast<size_t>(nodes));
  for (int i = 0; i < nodes; ++i) {
    double x = double(i) / double(nodes - 1);
    double v = c + a * std::cos(std::numbers::pi * x) + b * std::cos(2.0 * std::numbers::pi * x);
    u[size_t(i)] = std::min(0.95, std::max(0.05, v));
  }
  return u;
}

Protocol protocol(Family f) {
  Protocol p;
  p.train.family = f;
  switch (f) {
    case Family::pendulum: {
      for (double l : {1.0, 3.0, 5.0, 7.0, 9.0}) p.train.phis.push_back({l});
      p.train.ics = {{std::numbers::pi / 2.0, 0.0}};
      for (double l : {2.0, 3.5, 4.0, 5.1, 6.0, 6.9, 8.0, 10.0}) p.test_phis.push_back({l});
      break;
    }
    case Family::bistable: {
      for (double k1 : {-0.4, -0.6, -0.8, -1.0})
        for (double k3 : {2.0, 2.9, 3.7, 4.6, 5.0}) p.train.phis.push_back({k1, k3});
      p.train.ics = point_mass_ics();
      p.test_phis = {{-0.5, 3.1}, {-0.7, 4.2}, {-0.5, 4.7}};
      break;
    }
    case Family::vdp: {
      for (double e : {1.0, 2.0, 3.0})
        for (double d : {1.0, 2.0, 3.0})
          for (double w : {0.5, 1.0, 1.5}) p.train.phis.push_back({e, d, w});
      p.train.ics = point_mass_ics();
      p.test_phis = {{1.2, 1.2, 2.1}, {1.2, 1.8, 1.4}, {2.6, 1.5, 2.5}};
      break;
    }
    case Family::double_pendulum: {
      for (double l1 : {0.5, 0.6, 0.7, 0.8})
        for (double l2 : {0.5, 0.6, 0.7, 0.8}) p.train.phis.push_back({l1, l2});
      p.train.ics = {{std::numbers::pi / 4.0, std::numbers::pi / 4.0, 0.0, 0.0}};
      p.test_phis = {{0.55, 0.75}, {0.65, 0.55}, {0.77, 0.63}};
      break;
    }
    case Family::wall: {
      for (int i = 1; i <= 10; ++i) p.train.phis.push_back({0.1 * i});
      p.train.ics = {{0.0, 1.0}, {0.0, 0.6}, {-0.3, 0.8}};
      p.test_phis = {{0.25}, {0.55}, {0.85}};
      break;
    }
    case Family::kpp: {
      for (double r : {0.01, 0.02, 0.03, 0.04, 0.05}) p.train.phis.push_back({r});
      p.train.kpp.diffusivity = 0.05;  // keeps the explicit stepper out of the stiff regime
      int n = p.train.kpp.nodes;
      p.train.ics = {kpp_ic(n, 0.5, 0.3, 0.0),  kpp_ic(n, 0.5, -0.3, 0.0),
                     kpp_ic(n, 0.5, 0.0, 0.3),  kpp_ic(n, 0.4, 0.2, -0.2),
                     kpp_ic(n, 0.6, -0.2, 0.2), kpp_ic(n, 0.5, 0.25, 0.15)};
      p.test_phis = {{0.034}};
      break;
    }
  }
  return p;
}

std::vector<double> random_phi(Family f, Rng& rng) {
  switch (f) {
    case Family::pendulum: return {rng.uniform(1.0, 10.0)};
    case Family::bistable: return {rng.uniform(-1.0, -0.4), rng.uniform(2.0, 5.0)};
    case Family::vdp: return {rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(0.5, 1.5)};
    case Family::double_pendulum: return {rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.8)};
    case Family::wall: return {rng.uniform(0.1, 1.0)};
    case Family::kpp: return {rng.uniform(0.01, 0.05)};
  }
  throw ContractError("unhandled family");
}

}  // namespace imode::sys
