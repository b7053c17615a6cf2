#ifndef TCBF_SIMULATE_HPP
#define TCBF_SIMULATE_HPP

// Fixed-step integration of x' = f(x) + g(x) (k(x, t) + w).

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "tcbf/analysis.hpp"
#include "tcbf/core.hpp"
#include "tcbf/formulas.hpp"

namespace tcbf {

enum class Integrator { rk4, euler };

struct SimConfig {
  double dt = 1e-3;
  double horizon = 10.0;
  Integrator integrator = Integrator::rk4;
  std::size_t record_every = 1;
  /// Hold the controller output over each step instead of re-evaluating it
  /// at the RK4 stage states.
  bool zoh = false;

  void validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("dt must be positive");
    if (!(horizon >= 0.0) || !std::isfinite(horizon)) {
      throw ConfigError("horizon must be non-negative");
    }
    if (horizon > 0.0 && dt > horizon) throw ConfigError("dt exceeds horizon");
    if (record_every < 1) throw ConfigError("record_every must be at least 1");
  }

  std::size_t steps() const {
    return static_cast<std::size_t>(std::llround(horizon / dt));
  }
};

/// Everything recorded about the controller at one (x, t).
struct ControlSample {
  Vector u;
  /// The formula's share of u (u - k_d for safety filters).
  Vector correction;
  double h = 0.0;
  /// The pair c + d u >= 0 the residual is measured against.
  double c = 0.0;
  Vector d;
  double kappa = std::numeric_limits<double>::quiet_NaN();
  double margin = std::numeric_limits<double>::quiet_NaN();
};

/// Closed-loop controller: state and time to a recorded sample.
using ClosedLoopController = std::function<ControlSample(const Vector& x, double t)>;

enum class RunStatus { completed, infeasible, range_violation, incompatible, blow_up, error };

inline const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::completed: return "completed";
    case RunStatus::infeasible: return "infeasible";
    case RunStatus::range_violation: return "range_violation";
    case RunStatus::incompatible: return "incompatible";
    case RunStatus::blow_up: return "blow_up";
    case RunStatus::error: return "error";
  }
  return "error";
}

struct Trajectory {
  std::vector<double> times;
  std::vector<Vector> states;
  std::vector<Vector> inputs;
  std::vector<Vector> corrections;
  std::vector<double> h_values;
  std::vector<double> residuals;
  std::vector<double> kappas;
  std::vector<double> margins;

  RunStatus status = RunStatus::completed;
  std::string failure;
  /// Step index at which the run stopped early.
  std::optional<std::size_t> failed_step;

  std::size_t size() const noexcept { return times.size(); }
  bool ok() const noexcept { return status == RunStatus::completed; }

  double min_h() const {
    double m = std::numeric_limits<double>::infinity();
    for (double h : h_values) m = std::min(m, h);
    return m;
  }

  double min_residual() const {
    double m = std::numeric_limits<double>::infinity();
    for (double r : residuals) m = std::min(m, r);
    return m;
  }

  double max_correction_norm() const {
    double m = 0.0;
    for (const Vector& v : corrections) m = std::max(m, v.norm());
    return m;
  }

  /// Column i of the correction series.
  std::vector<double> correction_component(Eigen::Index i) const {
    std::vector<double> out;
    out.reserve(corrections.size());
    for (const Vector& v : corrections) out.push_back(v[i]);
    return out;
  }
};

/// One integration step of x' = f(x) + g(x) input(x, t) from (x, t).
///
/// RK4 re-evaluates input at every stage state and stage time.
inline Vector step(const ControlAffineSystem& sys,
                   const std::function<Vector(const Vector&, double)>& input,
                   const Vector& x, double t, double dt, Integrator integrator) {
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  auto rhs = [&](const Vector& xs, double ts) {
    return sys.closed_loop(xs, input(xs, ts));
  };
  Vector next;
  if (integrator == Integrator::euler) {
    next = x + dt * rhs(x, t);
  } else {
    const Vector k1 = rhs(x, t);
    const Vector k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt);
    const Vector k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt);
    const Vector k4 = rhs(x + dt * k3, t + dt);
    next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  if (!next.allFinite()) {
    throw BlowUpError("state became non-finite stepping from t = " + detail::fmt(t));
  }
  return next;
}

namespace detail {

inline RunStatus classify(const std::exception& e) {
  if (dynamic_cast<const InfeasibleError*>(&e)) return RunStatus::infeasible;
  if (dynamic_cast<const RangeError*>(&e)) return RunStatus::range_violation;
  if (dynamic_cast<const IncompatibleError*>(&e)) return RunStatus::incompatible;
  if (dynamic_cast<const NumericError*>(&e)) return RunStatus::blow_up;
  return RunStatus::error;
}

inline void record(Trajectory& traj, double t, const Vector& x, const ControlSample& s,
                   const Vector& applied) {
  traj.times.push_back(t);
  traj.states.push_back(x);
  traj.inputs.push_back(applied);
  traj.corrections.push_back(s.correction);
  traj.h_values.push_back(s.h);
  traj.residuals.push_back(s.c + s.d.dot(applied));
  traj.kappas.push_back(s.kappa);
  traj.margins.push_back(s.margin);
}

}  // namespace detail

/// Integrates the closed loop from x0 over cfg.horizon.
///
/// The disturbance is added to the controller output and evaluated at the
/// pre-step time for every stage. Library errors raised mid-run stop the
/// integration; the trajectory keeps every sample recorded before the failure.
/// ConfigError is not caught.
inline Trajectory run_closed_loop(const ControlAffineSystem& sys,
                                  const ClosedLoopController& controller,
                                  const Vector& x0, const SimConfig& cfg,
                                  const DisturbanceSpec& dist = DisturbanceSpec::none()) {
  cfg.validate();
  if (static_cast<std::size_t>(x0.size()) != sys.state_dim()) {
    throw ConfigError("initial state has " + std::to_string(x0.size()) +
                      " entries, expected " + std::to_string(sys.state_dim()));
  }
  const std::size_t n_steps = cfg.steps();
  const auto m = static_cast<Eigen::Index>(sys.input_dim());
  Trajectory traj;
  const std::size_t n_records = n_steps / cfg.record_every + 1;
  traj.times.reserve(n_records);
  traj.states.reserve(n_records);

  Vector x = x0;
  std::size_t k = 0;
  try {
    for (;; ++k) {
      const double t = static_cast<double>(k) * cfg.dt;
      const ControlSample sample = controller(x, t);
      const Vector w = dist.evaluate(t, m, k);
      const Vector applied = sample.u + w;
      if (k % cfg.record_every == 0) detail::record(traj, t, x, sample, applied);
      if (k == n_steps) break;

      if (cfg.zoh) {
        x = step(sys, [&](const Vector&, double) { return applied; }, x, t, cfg.dt,
                 cfg.integrator);
      } else {
        bool first = true;
        x = step(
            sys,
            [&](const Vector& xs, double ts) -> Vector {
              // The first stage is the sample already computed at (x, t).
              if (first) {
                first = false;
                return applied;
              }
              return controller(xs, ts).u + w;
            },
            x, t, cfg.dt, cfg.integrator);
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    traj.status = detail::classify(e);
    traj.failure = e.what();
    traj.failed_step = k;
  }
  return traj;
}

/// Closed-loop sampler built from a barrier and a controller spec.
inline ClosedLoopController make_cbf_controller(const ControlAffineSystem& sys,
                                                const BarrierFunction& bar,
                                                const ControllerSpec& spec) {
  return [&sys, &bar, &spec](const Vector& x, double t) {
    const AffineConstraint con = evaluate_constraint(sys, bar, x);
    const ControllerOutput out = evaluate_controller(spec, con, x, t);
    ControlSample s;
    s.u = out.u;
    s.correction = out.correction();
    s.h = bar.value(x);
    s.c = con.c;
    s.d = con.d;
    if (out.kappa) {
      s.kappa = *out.kappa;
      const double kg = *out.kappa * out.gamma_stg;
      const double denom = out.acted_on.c - kg;
      if (std::abs(denom) > 1e-12) s.margin = kg / denom;
    }
    return s;
  };
}

/// Simulates spec on (sys, bar) from x0. h(x0) < 0 raises ConfigError unless
/// allow_unsafe_start is set.
inline Trajectory run(const ControlAffineSystem& sys, const ControllerSpec& spec,
                      const BarrierFunction& bar, const Vector& x0, const SimConfig& cfg,
                      const DisturbanceSpec& dist = DisturbanceSpec::none(),
                      bool allow_unsafe_start = false) {
  if (static_cast<std::size_t>(x0.size()) != sys.state_dim()) {
    throw ConfigError("initial state has " + std::to_string(x0.size()) +
                      " entries, expected " + std::to_string(sys.state_dim()));
  }
  if (!allow_unsafe_start && bar.value(x0) < 0.0) {
    throw ConfigError("initial state outside the safe set: h(x0) = " +
                      detail::fmt(bar.value(x0)));
  }
  return run_closed_loop(sys, make_cbf_controller(sys, bar, spec), x0, cfg, dist);
}

}  // namespace tcbf

#endif  // TCBF_SIMULATE_HPP
