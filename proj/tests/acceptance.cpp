// Acceptance runner: one PASS/FAIL line per criterion. Arguments select
// criteria by id (1, 2, ..., 9a, 9b, 10, 11); none runs all. The exit status
// is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "tcbf/cli.hpp"
#include "tcbf/manipulator.hpp"

namespace {

using namespace tcbf;
namespace mp = tcbf::manipulator;

struct Verdict {
  bool pass;
  std::string detail;
};

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

AffineConstraint make_con(double c, Vector d) {
  AffineConstraint con;
  con.c = c;
  con.d = std::move(d);
  return con;
}

Verdict constraint_equality() {
  const auto t0 = std::chrono::steady_clock::now();
  oracle::Sampler rng(101);
  double worst = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const int m = rng.integer(1, 3);
    const AffineConstraint con = make_con(rng.uniform(-10, 10), rng.box(m, -3, 3));
    const double eta = rng.uniform(0.5, 1.0);
    const double sigma = rng.integer(0, 1) ? 0.2 : 1.0;
    const ControllerSpec spec =
        ControllerSpec::tunable(ShapingFunction::linear(sigma), TunableTermPolicy::eta_constant(eta));
    const ControllerOutput out = evaluate_controller(spec, con, Vector::Zero(1));
    const long double d_sq = con.d_squared();
    const long double rhs =
        oracle::kappa(con.c, d_sq, eta, sigma) * oracle::gamma_linear(con.c, d_sq, sigma);
    long double lhs = con.c;
    for (Eigen::Index j = 0; j < m; ++j) lhs += static_cast<long double>(con.d[j]) * out.u[j];
    worst = std::max(worst, static_cast<double>(std::abs(lhs - rhs)));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 5.0,
          "max |c + d u - kappa Gamma| = " + num(worst) + ", " + num(secs) + " s"};
}

Verdict qp_oracle() {
  oracle::Sampler rng(202);
  double worst = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const int m = rng.integer(1, 3);
    const AffineConstraint con = make_con(rng.uniform(-10, 10), rng.box(m, -3, 3));
    const ControllerOutput out = evaluate_controller(ControllerSpec::qp(), con, Vector::Zero(1));
    worst = std::max(worst, (out.u - oracle::halfspace_projection(con.c, con.d)).norm());
  }
  return {worst <= 1e-9, "max |u_qp - projection| = " + num(worst)};
}

Verdict identity_ladder() {
  oracle::Sampler rng(303);
  double worst_one = 0.0;
  double worst_half = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const int m = rng.integer(1, 3);
    const AffineConstraint con = make_con(rng.uniform(-10, 10), rng.box(m, -3, 3));
    const ShapingFunction s = ShapingFunction::linear(rng.integer(0, 1) ? 0.2 : 1.0);
    const Vector x = Vector::Zero(1);
    const Vector stg = evaluate_controller(ControllerSpec::sontag(s), con, x).u;
    const Vector one =
        evaluate_controller(ControllerSpec::tunable(s, TunableTermPolicy::eta_constant(1.0)), con, x).u;
    const Vector half =
        evaluate_controller(ControllerSpec::tunable(s, TunableTermPolicy::eta_constant(0.5)), con, x).u;
    worst_one = std::max(worst_one, (one - stg).norm());
    worst_half = std::max(worst_half, (half - 0.5 * stg).norm());
  }
  return {worst_one <= 1e-12 && worst_half <= 1e-12,
          "eta=1 vs Sontag " + num(worst_one) + ", eta=0.5 vs Sontag/2 " + num(worst_half)};
}

Verdict half_sontag_convergence() {
  oracle::Sampler rng(404);
  std::vector<AffineConstraint> samples;
  for (int i = 0; i < 1000; ++i) {
    const int m = rng.integer(1, 3);
    samples.push_back(make_con(rng.sign() * rng.uniform(1, 5), rng.box(m, -1, 1)));
  }
  const std::vector<double> sigmas{1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
  std::vector<double> errors;
  bool final_ok = true;
  for (double sigma : sigmas) {
    const ControllerSpec half = ControllerSpec::tunable(ShapingFunction::linear(sigma),
                                                        TunableTermPolicy::eta_constant(0.5));
    double worst = 0.0;
    for (const AffineConstraint& con : samples) {
      const Vector qp = oracle::halfspace_projection(con.c, con.d);
      const double err = (evaluate_controller(half, con, Vector::Zero(1)).u - qp).norm();
      worst = std::max(worst, err);
      if (sigma == sigmas.back() && err > 1e-5 * (1.0 + qp.norm())) final_ok = false;
    }
    errors.push_back(worst);
  }
  bool ok = final_ok;
  std::string ratios;
  for (std::size_t i = 1; i < errors.size(); ++i) {
    const double r = errors[i] / errors[i - 1];
    ok = ok && errors[i] < errors[i - 1] && r >= 0.05 && r <= 0.2;
    ratios += (i > 1 ? " " : "") + num(r);
  }
  return {ok, "ratios [" + ratios + "], final max error " + num(errors.back())};
}

Verdict sontag_margin() {
  oracle::Sampler rng(505);
  double worst = -1.0;
  for (int i = 0; i < 100000; ++i) {
    const int m = rng.integer(1, 3);
    Vector d = rng.box(m, -3, 3);
    if (d.norm() < 0.1) d *= 0.1 / d.norm();
    const ShapingFunction s = ShapingFunction::linear(rng.integer(0, 1) ? 0.2 : 1.0);
    worst = std::max(worst, safety_margin_at(make_con(rng.uniform(-10, 10), d), 1.0, s));
  }
  const double far = safety_margin_at(-1e6, 1.0, 1.0, ShapingFunction::linear(0.2));
  return {worst < -0.5 && std::abs(far + 0.5) <= 1e-3,
          "max M = " + num(worst) + ", M(c=-1e6) = " + num(far)};
}

Verdict smoothness_probe() {
  const auto lambda_of = [](const ControllerSpec& spec) {
    return [spec](double c, double d_sq) {
      Vector d(1);
      d[0] = std::sqrt(d_sq);
      return evaluate_controller(spec, make_con(c, d), Vector::Zero(1)).lambda;
    };
  };
  const double step = 1e-6;
  const double pmn = probe_derivative_jump(lambda_of(ControllerSpec::qp()), 1.0, step);
  const ShapingFunction s = ShapingFunction::linear(0.2);
  double smooth = probe_derivative_jump(lambda_of(ControllerSpec::sontag(s)), 1.0, step);
  for (double eta : {0.5, 0.6, 0.7, 0.8, 0.9}) {
    smooth = std::max(smooth, probe_derivative_jump(
        lambda_of(ControllerSpec::tunable(s, TunableTermPolicy::eta_constant(eta))), 1.0, step));
  }
  return {std::abs(pmn - 1.0) <= 1e-3 && smooth <= 1e-4,
          "PMN jump " + num(pmn) + ", max smooth jump " + num(smooth)};
}

SimConfig manipulator_sim() {
  SimConfig cfg;
  cfg.dt = 1e-3;
  cfg.horizon = 10.0;
  return cfg;
}

Verdict velocity_safety() {
  const auto t0 = std::chrono::steady_clock::now();
  const SimConfig cfg = manipulator_sim();
  const mp::VelocityScenario qp = mp::velocity_level_scenario(ControllerSpec::qp());
  const Trajectory tq = mp::run_velocity_level(qp, cfg);
  bool ok = tq.ok() && tq.min_h() >= -1e-4;
  std::string detail = "qp min h " + num(tq.min_h()) + "; eta min h";
  double prev = -1e300;
  for (double eta : {0.5, 0.6, 0.7, 0.8, 0.9}) {
    const Trajectory t = mp::run_velocity_level(mp::velocity_level_scenario(eta, 0.2), cfg);
    ok = ok && t.ok() && t.min_h() >= -1e-4 && t.min_h() >= prev;
    prev = t.min_h();
    detail += " " + num(t.min_h());
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 30.0, detail + ", " + num(secs) + " s"};
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("tcbf-acceptance-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::filesystem::path write_config(const std::filesystem::path& dir, const std::string& name,
                                   const scenario::json& j) {
  const auto path = dir / name;
  std::ofstream(path) << j.dump(2);
  return path;
}

scenario::json velocity_config(const scenario::json& controller) {
  return {{"schema", scenario::kSchema},
          {"system", {{"builtin", "two_link"}, {"mode", "velocity"}}},
          {"barrier",
           {{"type", "halfspace"}, {"normal", {0, 1}}, {"bound", std::numbers::pi / 3.0},
            {"alpha", 1.5}}},
          {"controller", controller},
          {"sim", {{"dt", 1e-3}, {"horizon", 10}}},
          {"check", {{"grid", {{"source", "trajectory"}}}}}};
}

Verdict bounded_input() {
  const double gamma = 2.3;
  const mp::BoundedInputReport report =
      mp::bounded_input_study(gamma, {0.5, 0.6, 0.7, 0.8, 0.9, 1.0}, 0.2, manipulator_sim(), false);
  bool ok = true;
  std::string detail = "max|v2|";
  for (const mp::BoundedInputRow& row : report.rows) {
    const bool expect_within = *row.eta <= 0.7;
    ok = ok && row.satisfies_bound == expect_within;
    detail += " " + num(*row.eta) + ":" + num(row.max_correction);
  }

  const auto dir = scratch_dir("bounded");
  std::string checked;
  double worst_bi = 0.0;
  for (double eta : {0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
    const scenario::json j = velocity_config(
        {{"kind", "bounded_input"}, {"eta", eta}, {"sigma", 0.2}, {"gamma", gamma}});
    cli::Options opt;
    opt.config = write_config(dir, "eta.json", j);
    std::ostringstream sink;
    if (cli::cmd_check(opt, sink, sink) != cli::kOk) continue;
    checked += " " + num(eta);
    const scenario::Scenario sc = scenario::build(j);
    const Trajectory t = sc.simulate();
    ok = ok && t.ok();
    worst_bi = std::max(worst_bi, t.max_correction_norm());
  }
  ok = ok && !checked.empty() && worst_bi <= gamma + 1e-9;
  return {ok, detail + "; passing check:" + checked + ", BI max|v2| " + num(worst_bi)};
}

mp::BacksteppingRun backstepping_run(const ControllerSpec& formula) {
  const mp::VirtualController k0(formula);
  const mp::BacksteppingConfig cfg;
  return mp::run_backstepping(mp::Params{}, cfg, k0, mp::default_backstepping_state(cfg, k0),
                              manipulator_sim());
}

Verdict backstepping_safety() {
  const mp::BacksteppingRun r = backstepping_run(
      ControllerSpec::tunable(ShapingFunction::linear(0.2), TunableTermPolicy::eta_constant(0.7)));
  return {r.trajectory.ok() && r.trajectory.min_h() >= -1e-4,
          "eta=0.7 min h " + num(r.trajectory.min_h()) + ", status " +
              to_string(r.trajectory.status)};
}

Verdict backstepping_qp_failure() {
  const mp::BacksteppingRun smooth = backstepping_run(
      ControllerSpec::tunable(ShapingFunction::linear(0.2), TunableTermPolicy::eta_constant(0.7)));
  const mp::BacksteppingRun qp = backstepping_run(ControllerSpec::qp());
  const double ratio = qp.terminal_tracking_error / smooth.terminal_tracking_error;
  return {ratio >= 10.0, "terminal error qp " + num(qp.terminal_tracking_error) + " vs eta=0.7 " +
                             num(smooth.terminal_tracking_error) + " (ratio " + num(ratio) +
                             ", qp status " + to_string(qp.trajectory.status) + ")"};
}

Verdict integrator_order() {
  const mp::VelocityScenario sc = mp::velocity_level_scenario(0.7, 0.2);
  const mp::Params arm;
  const ControlAffineSystem full = mp::full_order_system(arm);
  const Vector torque = Vector::Zero(2);
  Vector x_full(4);
  x_full << 1.0, 0.0, 2.0, 2.0;
  const ClosedLoopController passive = [&](const Vector&, double) {
    ControlSample s;
    s.u = torque;
    s.correction = torque;
    s.d = Vector::Zero(2);
    return s;
  };

  const auto final_state = [&](double dt, bool velocity) {
    SimConfig cfg;
    cfg.dt = dt;
    cfg.horizon = 1.0;
    cfg.record_every = static_cast<std::size_t>(std::llround(1.0 / dt));
    const Trajectory t = velocity ? mp::run_velocity_level(sc, cfg)
                                  : run_closed_loop(full, passive, x_full, cfg);
    return t.states.back();
  };

  bool ok = true;
  std::string detail;
  for (bool velocity : {true, false}) {
    const Vector ref = final_state(1e-6, velocity);
    std::vector<double> errs;
    for (double dt : {0.04, 0.02, 0.01}) errs.push_back((final_state(dt, velocity) - ref).norm());
    detail += velocity ? "velocity loop factors" : "; full-order arm factors";
    for (std::size_t i = 1; i < errs.size(); ++i) {
      const double f = errs[i - 1] / errs[i];
      ok = ok && f >= 8.0;
      detail += " " + num(f);
    }
  }
  return {ok, detail};
}

Verdict determinism() {
  const auto dir = scratch_dir("determinism");
  scenario::json j = velocity_config({{"kind", "tunable"}, {"eta", 0.7}, {"sigma", 0.2}});
  j["disturbance"] = {{"kind", "bounded_random"}, {"magnitude", 0.05}};
  const auto config = write_config(dir, "run.json", j);
  const auto run_once = [&](const std::string& sub, std::uint64_t seed) {
    cli::Options opt;
    opt.config = config;
    opt.seed = seed;
    opt.out = dir / sub;
    std::ostringstream sink;
    const int code = cli::cmd_simulate(opt, sink, sink);
    std::ifstream in(dir / sub / "trajectory.csv", std::ios::binary);
    return std::make_pair(code, std::string(std::istreambuf_iterator<char>(in), {}));
  };
  const auto a = run_once("a", 42);
  const auto b = run_once("b", 42);
  const auto c = run_once("c", 43);
  const bool ok = a.first == 0 && b.first == 0 && !a.second.empty() && a.second == b.second &&
                  a.second != c.second;
  return {ok, std::to_string(a.second.size()) + " bytes, identical for seed 42, " +
                  (a.second != c.second ? "different" : "same") + " for seed 43"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::pair<std::string, std::function<Verdict()>>>>
      criteria{
          {"1", {"constraint equality", constraint_equality}},
          {"2", {"qp matches half-space projection", qp_oracle}},
          {"3", {"identity ladder", identity_ladder}},
          {"4", {"half-Sontag converges to qp", half_sontag_convergence}},
          {"5", {"Sontag margin bound", sontag_margin}},
          {"6", {"smoothness probe", smoothness_probe}},
          {"7", {"velocity-level safety", velocity_safety}},
          {"8", {"bounded input", bounded_input}},
          {"9a", {"backstepping safety with eta=0.7", backstepping_safety}},
          {"9b", {"backstepping tracking failure with qp k0", backstepping_qp_failure}},
          {"10", {"RK4 convergence order", integrator_order}},
          {"11", {"deterministic simulate output", determinism}},
      };
  std::vector<std::string> wanted(argv + 1, argv + argc);
  int failed = 0;
  int ran = 0;
  for (const auto& [id, entry] : criteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), id) == wanted.end()) continue;
    ++ran;
    Verdict v;
    try {
      v = entry.second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s %s %s: %s\n", v.pass ? "PASS" : "FAIL", id.c_str(), entry.first.c_str(),
                v.detail.c_str());
    if (!v.pass) ++failed;
  }
  if (ran == 0) {
    std::fprintf(stderr, "no criterion matches the arguments\n");
    return 1;
  }
  return failed;
}
