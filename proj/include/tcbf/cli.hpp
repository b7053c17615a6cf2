#ifndef TCBF_CLI_HPP
#define TCBF_CLI_HPP

// Subcommands behind the tcbf executable. Each returns its exit code:
// 0 success, 1 configuration error, 2 run failure, 3 check violation.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "tcbf/analysis.hpp"
#include "tcbf/scenario.hpp"
#include "tcbf/simulate.hpp"

namespace tcbf::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kRunFailure = 2, kCheckViolation = 3 };

/// Safety is judged against h >= -kSafetyTolerance on recorded samples.
inline constexpr double kSafetyTolerance = 1e-4;

struct Options {
  std::filesystem::path config;
  std::vector<std::string> overrides;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  bool zoh = false;
  bool strict_range = false;
};

/// 17 significant digits, "nan"/"inf" spelled out, independent of locale.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, r.ptr);
}

inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj, std::size_t n,
                                 std::size_t m) {
  std::string line = "t";
  for (std::size_t i = 0; i < n; ++i) line += ",x" + std::to_string(i);
  for (std::size_t i = 0; i < m; ++i) line += ",u" + std::to_string(i);
  line += ",h,residual,kappa,margin\n";
  os << line;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    line = format_number(traj.times[k]);
    for (Eigen::Index i = 0; i < traj.states[k].size(); ++i) {
      line += ',' + format_number(traj.states[k][i]);
    }
    for (Eigen::Index i = 0; i < traj.inputs[k].size(); ++i) {
      line += ',' + format_number(traj.inputs[k][i]);
    }
    line += ',' + format_number(traj.h_values[k]);
    line += ',' + format_number(traj.residuals[k]);
    line += ',' + format_number(traj.kappas[k]);
    line += ',' + format_number(traj.margins[k]);
    line += '\n';
    os << line;
  }
}

inline void save_trajectory(const std::filesystem::path& path, const Trajectory& traj,
                            std::size_t n, std::size_t m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  write_trajectory_csv(out, traj, n, m);
}

/// Config file plus --set, --seed, --zoh and --out applied in that order.
inline scenario::json resolve_config(const Options& opt) {
  scenario::json j = scenario::load(opt.config);
  for (const std::string& s : opt.overrides) scenario::set_override(j, s);
  if (opt.seed) j["seed"] = *opt.seed;
  if (opt.zoh) j["sim"]["zoh"] = true;
  if (opt.out) j["output"]["dir"] = opt.out->string();
  return j;
}

namespace detail {

/// Largest jump of the forward-difference slope over all input components.
inline double max_derivative_jump(const Trajectory& traj, double dt) {
  double best = 0.0;
  if (traj.inputs.empty()) return best;
  for (Eigen::Index i = 0; i < traj.inputs.front().size(); ++i) {
    std::vector<double> series;
    series.reserve(traj.size());
    for (const Vector& u : traj.inputs) series.push_back(u[i]);
    for (double j : slope_jumps(series, dt)) best = std::max(best, j);
  }
  return best;
}

inline double min_margin(const Trajectory& traj) {
  const MarginReport r = summarize_margins(traj.margins);
  return r.sample_count ? r.min_margin : std::numeric_limits<double>::quiet_NaN();
}

/// Result of one simulate run; exit code and a one-line reason.
inline int judge(const Trajectory& traj, std::ostream& err) {
  if (!traj.ok()) {
    err << "run stopped (" << to_string(traj.status) << ") at step "
        << (traj.failed_step ? *traj.failed_step : 0) << ": " << traj.failure << '\n';
    return kRunFailure;
  }
  if (traj.min_h() < -kSafetyTolerance) {
    err << "safety violated: min h = " << format_number(traj.min_h()) << '\n';
    return kRunFailure;
  }
  return kOk;
}

template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kRunFailure;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
}

inline bool strict_range_ok(const scenario::Scenario& sc, std::ostream& err) {
  if (auto fail = sc.range_failure_at_start()) {
    err << "strict range check failed at x0 = " << tcbf::detail::describe(sc.x0) << ": "
        << *fail << '\n';
    return false;
  }
  return true;
}

}  // namespace detail

inline int cmd_simulate(const Options& opt, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&] {
    const scenario::Scenario sc = scenario::build(resolve_config(opt));
    if (opt.strict_range && !detail::strict_range_ok(sc, err)) return int(kConfigError);
    const Trajectory traj = sc.simulate();
    const std::filesystem::path path = sc.output.dir / sc.output.trajectory;
    save_trajectory(path, traj, sc.state_dim(), sc.input_dim());
    out << "wrote " << traj.size() << " rows to " << path.string() << " (status "
        << to_string(traj.status) << ", min h " << format_number(traj.min_h()) << ")\n";
    return detail::judge(traj, err);
  });
}

struct SweepRow {
  std::string value;
  double min_h = 0.0;
  double max_input_norm = 0.0;
  double max_deriv_jump = 0.0;
  double margin_min = 0.0;
  RunStatus status = RunStatus::completed;
  std::string failure;
};

/// Short names address controller fields; anything else is a dotted key.
inline std::string sweep_key(const std::string& param) {
  if (param == "eta" || param == "kappa" || param == "sigma" || param == "gamma") {
    return "controller." + param;
  }
  return param;
}

inline std::vector<std::string> split_values(const std::string& list) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : list + ",") {
    if (ch == ',') {
      if (cur.empty()) throw ConfigError("--values has an empty entry");
      out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  return out;
}

/// Runs one simulation per value on worker threads. Writes <param>_<value>.csv
/// per run and summary.csv with one row per value.
inline int cmd_sweep(const Options& opt, const std::string& param, const std::string& values,
                     std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&]() -> int {
    if (param.empty()) throw ConfigError("--param is required");
    const std::vector<std::string> tokens = split_values(values);
    const scenario::json base = resolve_config(opt);
    const std::string key = sweep_key(param);

    std::vector<scenario::Scenario> scenarios;
    for (const std::string& tok : tokens) {
      scenario::json j = base;
      scenario::set_override(j, key + "=" + tok);
      scenario::Scenario sc = scenario::build(j);
      if (opt.strict_range && !detail::strict_range_ok(sc, err)) return kConfigError;
      scenarios.push_back(std::move(sc));
    }
    const std::filesystem::path dir = scenarios.front().output.dir;
    std::filesystem::create_directories(dir);

    const auto run_one = [&](std::size_t i) {
      const scenario::Scenario& sc = scenarios[i];
      const Trajectory traj = sc.simulate();
      save_trajectory(dir / (param + "_" + tokens[i] + ".csv"), traj, sc.state_dim(),
                      sc.input_dim());
      SweepRow row;
      row.value = tokens[i];
      row.min_h = traj.min_h();
      row.max_input_norm = traj.max_correction_norm();
      row.max_deriv_jump =
          detail::max_derivative_jump(traj, sc.sim.dt * static_cast<double>(sc.sim.record_every));
      row.margin_min = detail::min_margin(traj);
      row.status = traj.status;
      row.failure = traj.failure;
      if (traj.ok() && row.min_h < -kSafetyTolerance) {
        row.status = RunStatus::error;
        row.failure = "safety violated";
      }
      return row;
    };

    const std::size_t workers =
        std::max<std::size_t>(1, std::min<std::size_t>(std::thread::hardware_concurrency(),
                                                        scenarios.size()));
    std::vector<SweepRow> rows(scenarios.size());
    for (std::size_t start = 0; start < scenarios.size(); start += workers) {
      std::vector<std::future<SweepRow>> batch;
      const std::size_t stop = std::min(scenarios.size(), start + workers);
      for (std::size_t i = start; i < stop; ++i) {
        batch.push_back(std::async(std::launch::async, run_one, i));
      }
      for (std::size_t i = start; i < stop; ++i) rows[i] = batch[i - start].get();
    }

    std::ofstream summary(dir / "summary.csv", std::ios::binary);
    if (!summary) throw ConfigError("cannot write summary in '" + dir.string() + "'");
    summary << param << ",min_h,max_input_norm,max_deriv_jump,margin_min,status\n";
    bool failed = false;
    for (const SweepRow& r : rows) {
      summary << r.value << ',' << format_number(r.min_h) << ',' << format_number(r.max_input_norm)
              << ',' << format_number(r.max_deriv_jump) << ',' << format_number(r.margin_min)
              << ',' << to_string(r.status) << '\n';
      if (r.status != RunStatus::completed) {
        failed = true;
        err << param << "=" << r.value << " failed: " << r.failure << '\n';
      }
    }
    out << "wrote " << rows.size() << " runs and summary.csv to " << dir.string() << '\n';
    return failed ? kRunFailure : kOk;
  });
}

/// One evaluated grid point of cmd_check.
struct CheckRow {
  Vector x;
  double t = 0.0;
  double c = 0.0;
  double d_norm = 0.0;
  bool compatible = true;
  double deficit = 0.0;
  double kappa = std::numeric_limits<double>::quiet_NaN();
  double kappa_lower = std::numeric_limits<double>::quiet_NaN();
  double kappa_upper = std::numeric_limits<double>::quiet_NaN();
  bool in_range = true;

  bool pass() const { return compatible && in_range; }
};

/// Compatibility with |u - k_d| <= gamma and membership of kappa in the
/// formula's admissible range at one point.
inline CheckRow check_point(const scenario::Scenario& sc, const Vector& x, double t,
                            std::optional<double> gamma) {
  CheckRow row;
  row.x = x;
  row.t = t;
  const AffineConstraint con = sc.acted_constraint(x, t);
  row.c = con.c;
  row.d_norm = con.d.norm();
  if (gamma) {
    const Compatibility compat = check_compatibility(con, *gamma);
    row.compatible = compat.compatible;
    row.deficit = compat.deficit;
  }
  const ShapingFunction* s = sc.formula.shaping();
  if (!s || con.direction_vanishes()) return row;
  const double d_sq = con.d_squared();
  const double g = gamma_sontag(con, *s);
  const auto& kind = sc.formula.kind();
  std::optional<TunableTermPolicy> policy;
  bool smooth = true;
  if (std::holds_alternative<SontagController>(kind)) {
    policy = TunableTermPolicy::eta_constant(1.0);
  } else if (const auto* k = std::get_if<TunableController>(&kind)) {
    policy = k->policy;
    smooth = !k->relu;
  } else if (const auto* k = std::get_if<BoundedInputController>(&kind)) {
    policy = k->policy ? *k->policy : TunableTermPolicy::lin_sontag(k->s, k->gamma);
    smooth = k->smooth;
  }
  if (!policy) return row;
  row.kappa = policy->is_eta_based() ? kappa_from_eta(con.c, d_sq, policy->eta(con.c, d_sq), *s)
                                     : policy->kappa(x);
  row.kappa_lower = smooth ? kappa_smooth_lower(con.c, d_sq, *s) : 0.0;
  row.kappa_upper = 1.0;
  if (gamma && row.compatible) {
    row.kappa_upper = std::min(1.0, (*gamma * row.d_norm + con.c) / g);
  }
  const double tol = 1e-12 * std::max(1.0, std::abs(row.kappa_upper));
  row.in_range = row.kappa > row.kappa_lower && row.kappa <= row.kappa_upper + tol;
  return row;
}

/// Config whose trajectory supplies the check grid: the configured
/// controller with its input bound dropped.
inline scenario::json unbounded_counterpart(scenario::json j) {
  auto& c = j["controller"];
  if (c.value("kind", "") == "bounded_input" && (c.contains("eta") || c.contains("kappa"))) {
    c["kind"] = "tunable";
    c.erase("gamma");
    if (c.contains("smooth")) {
      c["relu"] = !c["smooth"].get<bool>();
      c.erase("smooth");
    }
  }
  return j;
}

inline int cmd_check(const Options& opt, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&]() -> int {
    const scenario::json j = resolve_config(opt);
    const scenario::Scenario sc = scenario::build(j);
    std::optional<double> gamma = sc.check.gamma ? sc.check.gamma : sc.formula_gamma();

    std::vector<scenario::GridPoint> grid = sc.check.points;
    if (sc.check.source == scenario::GridSource::trajectory) {
      const scenario::Scenario source = scenario::build(unbounded_counterpart(j));
      const Trajectory traj = source.simulate();
      if (!traj.ok()) {
        err << "grid trajectory stopped (" << to_string(traj.status) << "): " << traj.failure
            << '\n';
        return kRunFailure;
      }
      for (std::size_t k = 0; k < traj.size(); ++k) grid.push_back({traj.states[k], traj.times[k]});
    }
    if (grid.empty()) throw ConfigError("check grid is empty");

    std::size_t failures = 0;
    double worst_deficit = 0.0;
    out << "point,t,c,d_norm,compatible,deficit,kappa,kappa_lower,kappa_upper,pass\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const CheckRow r = check_point(sc, grid[i].x, grid[i].t, gamma);
      out << i << ',' << format_number(r.t) << ',' << format_number(r.c) << ','
          << format_number(r.d_norm) << ',' << (r.compatible ? "yes" : "no") << ','
          << format_number(r.deficit) << ',' << format_number(r.kappa) << ','
          << format_number(r.kappa_lower) << ',' << format_number(r.kappa_upper) << ','
          << (r.pass() ? "yes" : "no") << '\n';
      if (!r.pass()) {
        ++failures;
        worst_deficit = std::max(worst_deficit, r.deficit);
        err << "violation at point " << i << " x = " << tcbf::detail::describe(r.x)
            << " t = " << format_number(r.t);
        if (!r.compatible) err << ": incompatible, deficit " << format_number(r.deficit);
        if (!r.in_range) {
          err << ": kappa " << format_number(r.kappa) << " outside ("
              << format_number(r.kappa_lower) << ", " << format_number(r.kappa_upper) << "]";
        }
        err << '\n';
      }
    }
    if (failures) {
      err << failures << " of " << grid.size() << " points failed";
      if (worst_deficit > 0.0) err << ", worst deficit " << format_number(worst_deficit);
      err << '\n';
      return kCheckViolation;
    }
    err << "all " << grid.size() << " points pass\n";
    return kOk;
  });
}

/// Simulates the scenario and reports the sampled safety margin of the
/// formula along the trajectory.
inline int cmd_margin(const Options& opt, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, [&]() -> int {
    const scenario::Scenario sc = scenario::build(resolve_config(opt));
    const ShapingFunction* s = sc.formula.shaping();
    if (!s) throw ConfigError("controller kind qp has no tunable term; margin undefined");
    const Trajectory traj = sc.simulate();
    std::vector<double> margins;
    margins.reserve(traj.size());
    for (std::size_t k = 0; k < traj.size(); ++k) {
      const AffineConstraint con = sc.acted_constraint(traj.states[k], traj.times[k]);
      double m = std::numeric_limits<double>::quiet_NaN();
      try {
        const ControllerOutput o = evaluate_controller(sc.formula, con, traj.states[k], traj.times[k]);
        if (o.kappa && !con.direction_vanishes()) m = safety_margin_at(con, *o.kappa, *s);
      } catch (const DegenerateMarginError&) {
      }
      margins.push_back(m);
    }
    const MarginReport r = summarize_margins(margins);
    out << "samples,min_margin,xi_bar_estimate,last_margin\n"
        << r.sample_count << ',' << format_number(r.sample_count ? r.min_margin : NAN) << ','
        << format_number(r.sample_count ? r.xi_bar_estimate : NAN) << ','
        << format_number(r.m_of_x) << '\n';
    err << "gains (1 + xi) k keep the sampled states safe for xi >= "
        << format_number(r.xi_bar_estimate) << " (estimate over " << r.sample_count
        << " samples)\n";
    if (!traj.ok()) {
      err << "run stopped (" << to_string(traj.status) << "): " << traj.failure << '\n';
      return kRunFailure;
    }
    return kOk;
  });
}

}  // namespace tcbf::cli

#endif  // TCBF_CLI_HPP
