#ifndef TCBF_MANIPULATOR_HPP
#define TCBF_MANIPULATOR_HPP

// Planar two-link arm tracking q_d(t) under the joint-2 limit q2 <= pi/3.
//
// Velocity level: q' = v with v filtered by a closed-form CBF formula around
// k_{0,d} = -K_P (q - q_d) + q_d'. Torque level: safe backstepping with the
// composite barrier b(q, v) = h(q) - |v - k0(q, t)|^2 / (2 mu) and a min-norm
// filter around k_d = H^{-1}(-Phi + k0' - K_Pbar (v - k0)).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "tcbf/analysis.hpp"
#include "tcbf/core.hpp"
#include "tcbf/formulas.hpp"
#include "tcbf/simulate.hpp"

namespace tcbf::manipulator {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

/// Link masses, lengths and gravity. Centres of mass default to the link
/// ends and inertias about them to zero (point masses).
struct Params {
  double m1 = 1.0;
  double m2 = 1.0;
  double l1 = 1.0;
  double l2 = 1.0;
  double gravity = 9.8;
  std::optional<double> lc1;
  std::optional<double> lc2;
  double i1 = 0.0;
  double i2 = 0.0;

  double com1() const { return lc1.value_or(l1); }
  double com2() const { return lc2.value_or(l2); }

  void validate() const {
    for (double v : {m1, m2, l1, l2, gravity, com1(), com2()}) {
      if (!(v > 0.0) || !std::isfinite(v)) {
        throw ConfigError("manipulator masses, lengths and gravity must be positive");
      }
    }
    if (!(i1 >= 0.0) || !(i2 >= 0.0)) throw ConfigError("link inertias must be >= 0");
  }
};

inline Mat2 inertia(const Params& p, const Vec2& q) {
  const double a = p.com2();
  const double c2 = std::cos(q[1]);
  Mat2 m;
  m(0, 0) = p.m1 * p.com1() * p.com1() + p.i1 +
            p.m2 * (p.l1 * p.l1 + a * a + 2.0 * p.l1 * a * c2) + p.i2;
  m(0, 1) = p.m2 * (a * a + p.l1 * a * c2) + p.i2;
  m(1, 0) = m(0, 1);
  m(1, 1) = p.m2 * a * a + p.i2;
  return m;
}

/// Coriolis matrix from the Christoffel symbols of inertia().
inline Mat2 coriolis(const Params& p, const Vec2& q, const Vec2& qdot) {
  const double k = -p.m2 * p.l1 * p.com2() * std::sin(q[1]);
  Mat2 c;
  c << k * qdot[1], k * (qdot[0] + qdot[1]),
      -k * qdot[0], 0.0;
  return c;
}

/// Gradient of the potential; q1 is measured from the horizontal.
inline Vec2 gravity_torque(const Params& p, const Vec2& q) {
  const double c1 = std::cos(q[0]);
  const double c12 = std::cos(q[0] + q[1]);
  return {(p.m1 * p.com1() + p.m2 * p.l1) * p.gravity * c1 + p.m2 * p.com2() * p.gravity * c12,
          p.m2 * p.com2() * p.gravity * c12};
}

inline double potential_energy(const Params& p, const Vec2& q) {
  return (p.m1 * p.com1() + p.m2 * p.l1) * p.gravity * std::sin(q[0]) +
         p.m2 * p.com2() * p.gravity * std::sin(q[0] + q[1]);
}

inline double energy(const Params& p, const Vec2& q, const Vec2& qdot) {
  return 0.5 * qdot.dot(inertia(p, q) * qdot) + potential_energy(p, q);
}

/// Phi(q, q') = -M^{-1}(C q' + N).
inline Vec2 drift_acceleration(const Params& p, const Vec2& q, const Vec2& qdot) {
  const Mat2 m = inertia(p, q);
  return -m.ldlt().solve(coriolis(p, q, qdot) * qdot + gravity_torque(p, q));
}

/// [q'; Phi + H u] with H = M^{-1}.
inline Eigen::Vector4d dynamics(const Params& p, const Vec2& q, const Vec2& qdot,
                                const Vec2& u) {
  const Mat2 m = inertia(p, q);
  if (std::abs(m.determinant()) < 1e-12) {
    throw NumericError("inertia matrix is singular");
  }
  Eigen::Vector4d out;
  out.head<2>() = qdot;
  out.tail<2>() = m.ldlt().solve(u - coriolis(p, q, qdot) * qdot - gravity_torque(p, q));
  return out;
}

/// x = [q; v], u = torque.
inline ControlAffineSystem full_order_system(const Params& p) {
  p.validate();
  return ControlAffineSystem(
      4, 2,
      [p](const Vector& x) {
        Vector f(4);
        const Vec2 q = x.head<2>();
        const Vec2 v = x.tail<2>();
        f.head<2>() = v;
        f.tail<2>() = drift_acceleration(p, q, v);
        return f;
      },
      [p](const Vector& x) {
        Matrix g = Matrix::Zero(4, 2);
        g.bottomRows<2>() = inertia(p, x.head<2>()).inverse();
        return g;
      });
}

/// q' = v.
inline ControlAffineSystem velocity_level_system() {
  return ControlAffineSystem(
      2, 2, [](const Vector&) -> Vector { return Vector::Zero(2); },
      [](const Vector&) -> Matrix { return Matrix::Identity(2, 2); });
}

/// q_d(t) = amplitude sin(omega t) + offset.
struct SinusoidalReference {
  Vec2 amplitude{2.0, 2.0};
  Vec2 offset{1.0, 0.0};
  double omega = 1.0;

  Vec2 position(double t) const { return amplitude * std::sin(omega * t) + offset; }
  Vec2 velocity(double t) const { return amplitude * (omega * std::cos(omega * t)); }
  Vec2 acceleration(double t) const {
    return amplitude * (-omega * omega * std::sin(omega * t));
  }
};

/// k_{0,d}(q, t) = -K_P (q - q_d(t)) + q_d'(t).
struct TrackingNominal {
  Vec2 kp{1.0, 1.0};
  SinusoidalReference reference;

  Vec2 value(const Vec2& q, double t) const {
    return -kp.cwiseProduct(q - reference.position(t)) + reference.velocity(t);
  }
  Mat2 jacobian_q() const { return -kp.asDiagonal().toDenseMatrix(); }
  Vec2 partial_t(double t) const {
    return kp.cwiseProduct(reference.velocity(t)) + reference.acceleration(t);
  }
};

/// h(q) = bound - normal . q with beta(s) = alpha s. The default is the
/// joint-2 limit q2 <= pi/3.
struct JointLimitBarrier {
  Vec2 normal{0.0, 1.0};
  double bound = std::numbers::pi / 3.0;
  double alpha = 1.5;

  double value(const Vec2& q) const { return bound - normal.dot(q); }
  Vec2 gradient() const { return -normal; }

  BarrierFunction as_barrier() const {
    const JointLimitBarrier self = *this;
    return BarrierFunction{
        [self](const Vector& x) { return self.value(x.head<2>()); },
        [self](const Vector& x) {
          Vector g = Vector::Zero(x.size());
          g.head<2>() = self.gradient();
          return g;
        },
        ExtendedClassK::linear(alpha)};
  }
};

struct VelocityScenario {
  ControlAffineSystem system;
  BarrierFunction barrier;
  TrackingNominal nominal;
  JointLimitBarrier limit;
  ControllerSpec spec;
  Vector x0;
};

/// Velocity-level scenario with the given formula wrapped as a safety filter
/// around the tracking nominal.
inline VelocityScenario velocity_level_scenario(const ControllerSpec& formula,
                                                TrackingNominal nominal = {},
                                                JointLimitBarrier limit = {}) {
  NominalController kd = [nominal](const Vector& q, double t) -> Vector {
    return nominal.value(q.head<2>(), t);
  };
  Vector x0(2);
  x0 << nominal.reference.position(0.0);
  return VelocityScenario{velocity_level_system(),
                          limit.as_barrier(),
                          nominal,
                          limit,
                          ControllerSpec::safety_filter(formula, std::move(kd)),
                          std::move(x0)};
}

/// Tunable safety filter with constant eta and s(t) = sigma t.
inline VelocityScenario velocity_level_scenario(double eta, double sigma) {
  return velocity_level_scenario(ControllerSpec::tunable(
      ShapingFunction::linear(sigma), TunableTermPolicy::eta_constant(eta)));
}

inline Trajectory run_velocity_level(const VelocityScenario& sc, const SimConfig& cfg,
                                     const DisturbanceSpec& dist = DisturbanceSpec::none()) {
  return run(sc.system, sc.spec, sc.barrier, sc.x0, cfg, dist);
}

/// Value and derivative of lambda in c_bar at fixed |d|^2, for the formulas
/// whose lambda depends on c_bar alone: qp, sontag, tunable and bounded-input
/// with constant eta (or Lin-Sontag, whose eta depends on |d|^2 only).
inline double lambda_slope(const ControllerSpec& formula, double c, double d_sq) {
  if (d_sq <= kZeroDirectionTol) return 0.0;
  const auto sontag_slope = [&](const ShapingFunction& s) {
    // d/dc [(-c + Gamma) / d] = (c/Gamma - 1) / d = -(Gamma - c) / (Gamma d)
    return -sontag_gap(c, d_sq, s) / (gamma_sontag(c, d_sq, s) * d_sq);
  };
  const auto& kind = formula.kind();
  if (std::holds_alternative<QpController>(kind)) {
    return c < 0.0 ? -1.0 / d_sq : 0.0;
  }
  if (const auto* k = std::get_if<SontagController>(&kind)) return sontag_slope(k->s);
  if (const auto* k = std::get_if<TunableController>(&kind)) {
    if (const auto* e = std::get_if<TunableTermPolicy::EtaConstant>(&k->policy.kind())) {
      return e->eta * sontag_slope(k->s);
    }
  }
  if (const auto* k = std::get_if<BoundedInputController>(&kind)) {
    if (!k->policy) {
      return TunableTermPolicy::lin_sontag(k->s, k->gamma).eta(c, d_sq) * sontag_slope(k->s);
    }
    if (const auto* e = std::get_if<TunableTermPolicy::EtaConstant>(&k->policy->kind())) {
      return e->eta * sontag_slope(k->s);
    }
  }
  throw ConfigError("no analytic lambda derivative for this controller kind");
}

/// Velocity-level safety filter k0(q, t) with its analytic derivatives, as
/// needed by the backstepping nominal.
class VirtualController {
 public:
  struct Evaluation {
    Vec2 value;
    Mat2 jacobian_q;
    Vec2 partial_t;
    double h = 0.0;

    /// dk0/dt along q' = v.
    Vec2 total_derivative(const Vec2& v) const { return jacobian_q * v + partial_t; }
  };

  VirtualController(ControllerSpec formula, TrackingNominal nominal = {},
                    JointLimitBarrier limit = {})
      : formula_(std::move(formula)), nominal_(std::move(nominal)), limit_(limit) {
    if (formula_.is_filter()) {
      throw ConfigError("virtual controller takes the bare formula, not a filter");
    }
    // Fail early on kinds without an analytic derivative.
    (void)lambda_slope(formula_, -1.0, 1.0);
  }

  const TrackingNominal& nominal() const noexcept { return nominal_; }
  const JointLimitBarrier& limit() const noexcept { return limit_; }
  const ControllerSpec& formula() const noexcept { return formula_; }

  Evaluation evaluate(const Vec2& q, double t) const {
    const Vec2 kd = nominal_.value(q, t);
    const Vec2 d = limit_.gradient();  // g = I, so d = dh/dq
    const double h = limit_.value(q);
    AffineConstraint con;
    con.c = limit_.alpha * h + d.dot(kd);  // c_bar
    con.d = d;
    const Vector qv = q;
    const ControllerOutput out = evaluate_controller(formula_, con, qv, t);
    const double slope = lambda_slope(formula_, con.c, con.d_squared());

    const Mat2 jkd = nominal_.jacobian_q();
    const Vec2 dkd_dt = nominal_.partial_t(t);
    const Vec2 dc_dq = limit_.alpha * limit_.gradient() + jkd.transpose() * d;
    const double dc_dt = d.dot(dkd_dt);

    Evaluation e;
    e.value = kd + out.lambda * d;
    e.jacobian_q = jkd + d * (slope * dc_dq).transpose();
    e.partial_t = dkd_dt + d * (slope * dc_dt);
    e.h = h;
    return e;
  }

 private:
  ControllerSpec formula_;
  TrackingNominal nominal_;
  JointLimitBarrier limit_;
};

struct BacksteppingConfig {
  double mu = 20.0;
  Vec2 kp_bar{1.0, 1.0};
  /// Slope of the linear class-K function applied to the composite barrier.
  double alpha_b = 1.5;

  void validate() const {
    if (!(mu > 0.0)) throw ConfigError("backstepping mu must be positive");
    if (!(kp_bar.array() > 0.0).all()) throw ConfigError("K_Pbar must be positive diagonal");
    if (!(alpha_b > 0.0)) throw ConfigError("alpha_b must be positive");
  }
};

struct BacksteppingOutput {
  Vec2 torque;
  Vec2 nominal;
  double composite_barrier = 0.0;
  double h = 0.0;
  double c_b = 0.0;
  Vec2 d_b;
  Vec2 k0;
};

/// b(q, v) = h(q) - |v - k0|^2 / (2 mu).
inline double composite_barrier(const BacksteppingConfig& cfg, double h, const Vec2& v,
                                const Vec2& k0) {
  return h - (v - k0).squaredNorm() / (2.0 * cfg.mu);
}

/// Torque from the min-norm filter on the composite barrier around
/// k_d = H^{-1}(-Phi + k0' - K_Pbar (v - k0)).
inline BacksteppingOutput backstepping_controller(const Params& p,
                                                  const BacksteppingConfig& cfg,
                                                  const VirtualController& k0,
                                                  const Vector& x, double t) {
  if (x.size() != 4) throw ConfigError("backstepping state must be [q; v]");
  const Vec2 q = x.head<2>();
  const Vec2 v = x.tail<2>();
  const VirtualController::Evaluation ev = k0.evaluate(q, t);
  const Mat2 m = inertia(p, q);
  const Mat2 h_mat = m.inverse();
  const Vec2 phi = drift_acceleration(p, q, v);
  const Vec2 k0_dot = ev.total_derivative(v);
  const Vec2 e = v - ev.value;

  BacksteppingOutput out;
  out.k0 = ev.value;
  out.h = ev.h;
  out.composite_barrier = composite_barrier(cfg, ev.h, v, ev.value);
  // b' = dh/dq v - e^T (Phi + H u - k0') / mu
  out.c_b = k0.limit().gradient().dot(v) - e.dot(phi - k0_dot) / cfg.mu +
            cfg.alpha_b * out.composite_barrier;
  out.d_b = -(h_mat.transpose() * e) / cfg.mu;
  out.nominal = m * (-phi + k0_dot - cfg.kp_bar.cwiseProduct(e));

  AffineConstraint filtered;
  filtered.c = out.c_b + out.d_b.dot(out.nominal);
  filtered.d = out.d_b;
  try {
    filtered.require_valid();
  } catch (const InfeasibleError& err) {
    throw InfeasibleError(std::string(err.what()) + " at x = " + detail::describe(x) +
                          ", t = " + detail::fmt(t));
  }
  out.torque = out.nominal + lambda_pmn(filtered.c, filtered.d_squared()) * out.d_b;
  return out;
}

/// Closed-loop sampler for the torque-level loop; h is the joint-limit
/// barrier, the residual refers to the composite barrier.
inline ClosedLoopController make_backstepping_controller(const Params& p,
                                                         const BacksteppingConfig& cfg,
                                                         const VirtualController& k0) {
  return [p, cfg, &k0](const Vector& x, double t) {
    const BacksteppingOutput out = backstepping_controller(p, cfg, k0, x, t);
    ControlSample s;
    s.u = out.torque;
    s.correction = out.torque - out.nominal;
    s.h = out.h;
    s.c = out.c_b;
    s.d = out.d_b;
    return s;
  };
}

/// q = q_d(0), v = q_d'(0), with v pulled toward k0 until b(x0) >= 0.
inline Vector default_backstepping_state(const BacksteppingConfig& cfg,
                                         const VirtualController& k0) {
  const SinusoidalReference& ref = k0.nominal().reference;
  const Vec2 q = ref.position(0.0);
  Vec2 v = ref.velocity(0.0);
  const VirtualController::Evaluation ev = k0.evaluate(q, 0.0);
  const Vec2 e = v - ev.value;
  const double reach = std::sqrt(2.0 * cfg.mu * std::max(ev.h, 0.0));
  if (e.norm() > reach) v = ev.value + e * (reach / e.norm());
  Vector x0(4);
  x0 << q, v;
  return x0;
}

struct BacksteppingRun {
  Trajectory trajectory;
  /// |q(T) - q_d(T)| at the last recorded sample.
  double terminal_tracking_error = 0.0;
};

inline BacksteppingRun run_backstepping(const Params& p, const BacksteppingConfig& cfg,
                                        const VirtualController& k0, const Vector& x0,
                                        const SimConfig& sim,
                                        const DisturbanceSpec& dist = DisturbanceSpec::none()) {
  p.validate();
  cfg.validate();
  const ControlAffineSystem sys = full_order_system(p);
  BacksteppingRun r;
  r.trajectory = run_closed_loop(sys, make_backstepping_controller(p, cfg, k0), x0, sim, dist);
  if (r.trajectory.size() > 0) {
    const Vec2 q = r.trajectory.states.back().head<2>();
    const double t = r.trajectory.times.back();
    r.terminal_tracking_error = (q - k0.nominal().reference.position(t)).norm();
  }
  return r;
}

/// One row of the bounded-input study.
struct BoundedInputRow {
  std::string label;
  /// Constant eta; absent for the Lin-Sontag row.
  std::optional<double> eta;
  /// max_t |v2| of the unbounded formula, v2 being the filter's correction
  /// on the constrained joint.
  double max_correction = 0.0;
  bool satisfies_bound = false;
  /// Recorded steps of the unbounded run whose kappa lies in the smooth
  /// bounded-input range.
  std::size_t steps_in_range = 0;
  std::size_t steps = 0;
  /// Bounded-input formula run completed without a range violation.
  bool valid_under_bi = false;
  double bi_max_correction = 0.0;
  std::string bi_failure;
};

struct BoundedInputReport {
  double gamma = 0.0;
  double sigma = 0.0;
  std::vector<BoundedInputRow> rows;
};

namespace detail {

/// kappa in (max(c/Gamma, 0), (gamma |d| + c)/Gamma] at the acted-on pair.
inline bool in_smooth_bi_range(double c, double d_sq, double kappa, double gamma,
                               const ShapingFunction& s) {
  const double g = gamma_sontag(c, d_sq, s);
  const double upper = (gamma * std::sqrt(d_sq) + c) / g;
  return kappa > kappa_smooth_lower(c, d_sq, s) && kappa <= upper + 1e-12 * std::max(1.0, std::abs(upper));
}

}  // namespace detail

/// Runs the velocity-level scenario per eta with the unbounded tunable filter
/// and with its bounded-input counterpart (plus a Lin-Sontag row).
inline BoundedInputReport bounded_input_study(double gamma, const std::vector<double>& etas,
                                              double sigma, const SimConfig& sim = {},
                                              bool include_lin_sontag = true) {
  if (!(gamma > 0.0)) throw ConfigError("input bound gamma must be positive");
  const ShapingFunction s = ShapingFunction::linear(sigma);
  BoundedInputReport report{gamma, sigma, {}};

  for (double eta : etas) {
    BoundedInputRow row;
    row.label = "eta=" + tcbf::detail::fmt(eta);
    row.eta = eta;
    const VelocityScenario sc = velocity_level_scenario(eta, sigma);
    const Trajectory traj = run_velocity_level(sc, sim);
    row.max_correction = traj.max_correction_norm();
    row.satisfies_bound = traj.ok() && row.max_correction <= gamma;
    for (std::size_t i = 0; i < traj.size(); ++i) {
      const Vector& q = traj.states[i];
      const AffineConstraint con = evaluate_constraint(sc.system, sc.barrier, q);
      const double c_bar = con.c + con.d.dot(sc.nominal.value(q.head<2>(), traj.times[i]));
      ++row.steps;
      if (detail::in_smooth_bi_range(c_bar, con.d_squared(), traj.kappas[i], gamma, s)) {
        ++row.steps_in_range;
      }
    }

    const VelocityScenario bi = velocity_level_scenario(ControllerSpec::bounded_input(
        s, gamma, TunableTermPolicy::eta_constant(eta)));
    const Trajectory bi_traj = run_velocity_level(bi, sim);
    row.valid_under_bi = bi_traj.ok();
    row.bi_max_correction = bi_traj.max_correction_norm();
    row.bi_failure = bi_traj.failure;
    report.rows.push_back(std::move(row));
  }

  if (include_lin_sontag) {
    BoundedInputRow row;
    row.label = "lin_sontag";
    const VelocityScenario bi =
        velocity_level_scenario(ControllerSpec::bounded_input(s, gamma));
    const Trajectory bi_traj = run_velocity_level(bi, sim);
    row.max_correction = bi_traj.max_correction_norm();
    row.satisfies_bound = bi_traj.ok() && row.max_correction <= gamma;
    row.steps = row.steps_in_range = bi_traj.size();
    row.valid_under_bi = bi_traj.ok();
    row.bi_max_correction = row.max_correction;
    row.bi_failure = bi_traj.failure;
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace tcbf::manipulator

#endif  // TCBF_MANIPULATOR_HPP
