#ifndef TCBF_FORMULAS_HPP
#define TCBF_FORMULAS_HPP

// Closed-form CBF controllers. Every controller here has the form
// u = lambda(c, |d|^2, ...) d^T (plus the nominal input for safety filters),
// so the scalar lambda functions carry all of the formula logic.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>

#include "tcbf/core.hpp"

namespace tcbf {

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void require_nonnegative_dsq(double d_sq) {
  if (!(d_sq >= 0.0)) throw ConfigError("|d|^2 must be non-negative");
}

}  // namespace detail

/// Min-norm solution of c + d u >= 0: 0 if d_sq vanishes, else max(0, -c/d_sq).
inline double lambda_pmn(double c, double d_sq) {
  detail::require_nonnegative_dsq(d_sq);
  if (d_sq <= kZeroDirectionTol) return 0.0;
  return std::max(0.0, -c / d_sq);
}

/// Sontag's formula, (-c + Gamma_Stg) / d_sq.
inline double lambda_stg(double c, double d_sq, const ShapingFunction& s) {
  detail::require_nonnegative_dsq(d_sq);
  if (d_sq <= kZeroDirectionTol) return 0.0;
  // For c > 0 the gap is s(d) d / (Gamma + c), so d_sq cancels.
  if (c > 0.0) return s(d_sq) / (gamma_sontag(c, d_sq, s) + c);
  return sontag_gap(c, d_sq, s) / d_sq;
}

/// Tunable formula with ReLU: max(0, (-c + kappa Gamma_Stg) / d_sq).
///
/// With safety_critical set, kappa must lie in (0, 1].
inline double lambda_tun_relu(double c, double d_sq, double kappa,
                              const ShapingFunction& s,
                              bool safety_critical = true) {
  detail::require_nonnegative_dsq(d_sq);
  if (safety_critical && !(kappa > 0.0 && kappa <= 1.0)) {
    throw RangeError("kappa = " + detail::fmt(kappa) + " outside (0, 1]");
  }
  if (d_sq <= kZeroDirectionTol) return 0.0;
  // kappa Gamma - c = kappa (Gamma - c) - (1 - kappa) c
  const double numerator = kappa * sontag_gap(c, d_sq, s) - (1.0 - kappa) * c;
  if (numerator <= 0.0) return 0.0;
  return numerator / d_sq;
}

/// Lower end of the smooth range: max(c / Gamma_Stg, 0).
inline double kappa_smooth_lower(double c, double d_sq, const ShapingFunction& s) {
  if (c <= 0.0) return 0.0;
  return c / gamma_sontag(c, d_sq, s);
}

/// Tunable formula without ReLU. kappa must satisfy
/// max(c / Gamma_Stg, 0) < kappa <= 1, otherwise RangeError names the bound.
inline double lambda_tun_smooth(double c, double d_sq, double kappa,
                                const ShapingFunction& s) {
  detail::require_nonnegative_dsq(d_sq);
  if (d_sq <= kZeroDirectionTol) return 0.0;
  if (!(kappa <= 1.0)) {
    throw RangeError("kappa = " + detail::fmt(kappa) + " exceeds upper bound 1");
  }
  const double lower = kappa_smooth_lower(c, d_sq, s);
  if (!(kappa > lower)) {
    throw RangeError("kappa = " + detail::fmt(kappa) +
                     " not above lower bound max(c/Gamma, 0) = " +
                     detail::fmt(lower));
  }
  const double numerator = kappa * sontag_gap(c, d_sq, s) - (1.0 - kappa) * c;
  if (numerator <= 0.0) return 0.0;
  return numerator / d_sq;
}

/// kappa = (1 - eta) c / Gamma_Stg + eta. Requires c > 0 or d_sq > 0.
inline double kappa_from_eta(double c, double d_sq, double eta,
                             const ShapingFunction& s) {
  detail::require_nonnegative_dsq(d_sq);
  if (c <= 0.0 && d_sq <= kZeroDirectionTol) {
    throw DomainError("(c, |d|^2) = (" + detail::fmt(c) + ", " +
                      detail::fmt(d_sq) + ") outside {c > 0 or |d|^2 > 0}");
  }
  const double gamma = gamma_sontag(c, d_sq, s);
  return (1.0 - eta) * c / gamma + eta;
}

/// Lower end of the eta range equivalent to the smooth kappa range:
/// max(c / (c - Gamma_Stg), 0).
inline double eta_smooth_lower(double c, double d_sq, const ShapingFunction& s) {
  if (c >= 0.0) return 0.0;
  // c < 0: c / (c - Gamma) = |c| / (|c| + Gamma)
  return -c / (gamma_sontag(c, d_sq, s) - c);
}

class ControllerSpec;

/// Nominal input k_d(x, t) for safety filters.
using NominalController = std::function<Vector(const Vector& x, double t)>;

struct QpController {};

struct SontagController {
  ShapingFunction s;
};

struct TunableController {
  ShapingFunction s;
  TunableTermPolicy policy;
  bool relu = false;
};

/// Norm-bounded tunable formula, |u| <= gamma. Without an explicit policy the
/// Lin-Sontag eta~ is used.
struct BoundedInputController {
  ShapingFunction s;
  std::optional<TunableTermPolicy> policy;
  double gamma;
  /// Also enforce the smooth lower bound max(c/Gamma, 0) < kappa~.
  bool smooth = true;
};

/// u = k_d + (inner formula applied to c_bar = c + d k_d) d^T.
struct SafetyFilter {
  std::shared_ptr<const ControllerSpec> inner;
  NominalController nominal;
};

/// Which closed-form controller to apply, with its parameters.
class ControllerSpec {
 public:
  using Kind = std::variant<QpController, SontagController, TunableController,
                            BoundedInputController, SafetyFilter>;

  static ControllerSpec qp() { return ControllerSpec(QpController{}); }

  static ControllerSpec sontag(ShapingFunction s) {
    return ControllerSpec(SontagController{std::move(s)});
  }

  static ControllerSpec tunable(ShapingFunction s, TunableTermPolicy policy,
                                bool relu = false) {
    return ControllerSpec(TunableController{std::move(s), std::move(policy), relu});
  }

  static ControllerSpec bounded_input(ShapingFunction s, double gamma,
                                      std::optional<TunableTermPolicy> policy = std::nullopt,
                                      bool smooth = true) {
    if (!(gamma > 0.0)) throw ConfigError("input bound gamma must be positive");
    return ControllerSpec(
        BoundedInputController{std::move(s), std::move(policy), gamma, smooth});
  }

  static ControllerSpec safety_filter(ControllerSpec inner, NominalController nominal) {
    if (std::holds_alternative<SafetyFilter>(inner.kind_)) {
      throw ConfigError("safety filters cannot be nested");
    }
    if (!nominal) throw ConfigError("safety filter requires a nominal controller");
    return ControllerSpec(SafetyFilter{
        std::make_shared<const ControllerSpec>(std::move(inner)), std::move(nominal)});
  }

  const Kind& kind() const noexcept { return kind_; }

  bool is_filter() const noexcept {
    return std::holds_alternative<SafetyFilter>(kind_);
  }

  /// Spec the formula is applied with: the wrapped one for filters.
  const ControllerSpec& formula() const noexcept {
    if (const auto* f = std::get_if<SafetyFilter>(&kind_)) return *f->inner;
    return *this;
  }

  /// Shaping function of the formula, if it has one (qp has none).
  const ShapingFunction* shaping() const noexcept {
    const Kind& k = formula().kind_;
    if (const auto* v = std::get_if<SontagController>(&k)) return &v->s;
    if (const auto* v = std::get_if<TunableController>(&k)) return &v->s;
    if (const auto* v = std::get_if<BoundedInputController>(&k)) return &v->s;
    return nullptr;
  }

 private:
  explicit ControllerSpec(Kind kind) : kind_(std::move(kind)) {}

  Kind kind_;
};

struct ControllerOutput {
  Vector u;
  double lambda = 0.0;
  /// Tunable term; 1 for Sontag, absent for qp.
  std::optional<double> kappa;
  /// c + d u - kappa Gamma_Stg (kappa = 0 for qp). For filters Gamma is
  /// built from c_bar; c + d u equals c_bar + d (u - k_d).
  double constraint_residual = 0.0;
  /// The pair the formula acted on: (c_bar, d) for filters, (c, d) otherwise.
  AffineConstraint acted_on;
  /// Gamma_Stg of acted_on; NaN for qp.
  double gamma_stg = std::numeric_limits<double>::quiet_NaN();
  /// k_d(x, t) for filters.
  std::optional<Vector> nominal;

  /// The formula's contribution lambda d^T (u - k_d for filters).
  Vector correction() const { return nominal ? Vector(u - *nominal) : u; }
};

namespace detail {

struct LambdaResult {
  double lambda = 0.0;
  std::optional<double> kappa;
  double gamma = std::numeric_limits<double>::quiet_NaN();
};

/// Tunable lambda at a non-degenerate or valid degenerate constraint.
inline LambdaResult tunable_lambda(const TunableController& spec,
                                   const AffineConstraint& con, const Vector& x) {
  const double c = con.c;
  const double d_sq = con.d_squared();
  const ShapingFunction& s = spec.s;
  LambdaResult out;
  out.gamma = gamma_sontag(c, d_sq, s);

  if (spec.policy.is_eta_based()) {
    const double eta = spec.policy.eta(c, d_sq);
    if (!std::isfinite(eta)) throw NumericError("eta policy returned non-finite value");
    out.kappa = kappa_from_eta(c, d_sq, eta, s);
    if (con.direction_vanishes()) return out;
    // Constant eta in [1/2, 1] lies in the range at every state.
    if (spec.policy.requires_membership_checks()) {
      if (spec.relu) {
        if (!(*out.kappa > 0.0 && *out.kappa <= 1.0)) {
          throw RangeError("kappa = " + fmt(*out.kappa) + " from eta = " + fmt(eta) +
                           " outside (0, 1]");
        }
      } else {
        // kappa in (max(c/Gamma, 0), 1] <=> eta in (max(c/(c-Gamma), 0), 1]
        const double lower = eta_smooth_lower(c, d_sq, s);
        if (!(eta <= 1.0)) {
          throw RangeError("eta = " + fmt(eta) + " exceeds upper bound 1");
        }
        if (!(eta > lower)) {
          throw RangeError("eta = " + fmt(eta) +
                           " not above lower bound max(c/(c - Gamma), 0) = " +
                           fmt(lower) + " at c = " + fmt(c) + ", |d|^2 = " +
                           fmt(d_sq));
        }
      }
    }
    // kappa Gamma - c = eta (Gamma - c), so lambda = eta lambda_Stg
    out.lambda = eta > 0.0 ? eta * lambda_stg(c, d_sq, s) : 0.0;
    return out;
  }

  const double kappa = spec.policy.kappa(x);
  if (!std::isfinite(kappa)) throw NumericError("kappa policy returned non-finite value");
  out.kappa = kappa;
  if (con.direction_vanishes()) return out;
  out.lambda = spec.relu ? lambda_tun_relu(c, d_sq, kappa, s, true)
                         : lambda_tun_smooth(c, d_sq, kappa, s);
  return out;
}

inline LambdaResult bounded_lambda(const BoundedInputController& spec,
                                   const AffineConstraint& con, const Vector& x) {
  const double c = con.c;
  const double d_sq = con.d_squared();
  const double d_norm = std::sqrt(d_sq);
  const ShapingFunction& s = spec.s;
  const double slack = spec.gamma * d_norm + c;
  if (slack < 0.0) {
    throw IncompatibleError("CBF constraint incompatible with |u| <= " +
                                fmt(spec.gamma) + ": deficit " + fmt(-slack),
                            -slack);
  }
  LambdaResult out;
  out.gamma = gamma_sontag(c, d_sq, s);
  const TunableTermPolicy policy =
      spec.policy ? *spec.policy : TunableTermPolicy::lin_sontag(s, spec.gamma);

  std::optional<double> eta;
  double kappa;
  if (policy.is_eta_based()) {
    eta = policy.eta(c, d_sq);
    if (!std::isfinite(*eta)) throw NumericError("eta policy returned non-finite value");
    kappa = kappa_from_eta(c, d_sq, *eta, s);
  } else {
    kappa = policy.kappa(x);
    if (!std::isfinite(kappa)) throw NumericError("kappa policy returned non-finite value");
  }
  out.kappa = kappa;
  if (con.direction_vanishes()) return out;

  const double upper = slack / out.gamma;
  // Rounding slack for choices that sit on the upper endpoint by construction.
  const double tol = 1e-12 * std::max(1.0, std::abs(upper));
  if (!(kappa > 0.0)) {
    throw RangeError("kappa~ = " + fmt(kappa) + " not positive");
  }
  if (!(kappa <= upper + tol)) {
    throw RangeError("kappa~ = " + fmt(kappa) +
                     " exceeds bounded-input upper bound (gamma |d| + c)/Gamma = " +
                     fmt(upper));
  }
  if (spec.smooth && policy.requires_membership_checks()) {
    const bool above = eta ? (*eta > eta_smooth_lower(c, d_sq, s))
                           : (kappa > kappa_smooth_lower(c, d_sq, s));
    if (!above) {
      throw RangeError("kappa~ = " + fmt(kappa) +
                       " not above smooth lower bound max(c/Gamma, 0) = " +
                       fmt(kappa_smooth_lower(c, d_sq, s)));
    }
  }
  if (eta) {
    out.lambda = *eta > 0.0 ? *eta * lambda_stg(c, d_sq, s) : 0.0;
  } else {
    const double numerator = kappa * sontag_gap(c, d_sq, s) - (1.0 - kappa) * c;
    out.lambda = numerator > 0.0 ? numerator / d_sq : 0.0;
  }
  // Keep |u| <= gamma exact when rounding lands a hair above the bound.
  if (d_norm > 0.0 && out.lambda * d_norm > spec.gamma) out.lambda = spec.gamma / d_norm;
  return out;
}

inline LambdaResult formula_lambda(const ControllerSpec& spec,
                                   const AffineConstraint& con, const Vector& x) {
  con.require_valid();
  const double d_sq = con.d_squared();
  return std::visit(
      [&](const auto& k) -> LambdaResult {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, QpController>) {
          return LambdaResult{lambda_pmn(con.c, d_sq), std::nullopt,
                              std::numeric_limits<double>::quiet_NaN()};
        } else if constexpr (std::is_same_v<K, SontagController>) {
          return LambdaResult{lambda_stg(con.c, d_sq, k.s), 1.0,
                              gamma_sontag(con.c, d_sq, k.s)};
        } else if constexpr (std::is_same_v<K, TunableController>) {
          return tunable_lambda(k, con, x);
        } else if constexpr (std::is_same_v<K, BoundedInputController>) {
          return bounded_lambda(k, con, x);
        } else {
          throw ConfigError("nested safety filter");
        }
      },
      spec.kind());
}

}  // namespace detail

/// Evaluates spec on the constraint con at state x and time t.
///
/// t only reaches the nominal controller of a safety filter.
inline ControllerOutput evaluate_controller(const ControllerSpec& spec,
                                            const AffineConstraint& con,
                                            const Vector& x, double t = 0.0) {
  ControllerOutput out;
  AffineConstraint acted = con;
  if (const auto* filter = std::get_if<SafetyFilter>(&spec.kind())) {
    Vector kd = filter->nominal(x, t);
    if (kd.size() != con.d.size()) {
      throw ConfigError("nominal controller returned " + std::to_string(kd.size()) +
                        " inputs, expected " + std::to_string(con.d.size()));
    }
    if (!kd.allFinite()) throw NumericError("nominal controller is not finite");
    acted.c = con.c + con.d.dot(kd);
    out.nominal = std::move(kd);
  }
  const detail::LambdaResult r = detail::formula_lambda(spec.formula(), acted, x);
  out.lambda = r.lambda;
  out.kappa = r.kappa;
  out.gamma_stg = r.gamma;
  out.u = r.lambda * acted.d;
  if (out.nominal) out.u += *out.nominal;
  const double rhs = r.kappa ? *r.kappa * r.gamma : 0.0;
  out.constraint_residual = con.c + con.d.dot(out.u) - rhs;
  out.acted_on = std::move(acted);
  return out;
}

}  // namespace tcbf

#endif  // TCBF_FORMULAS_HPP
