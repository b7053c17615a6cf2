#ifndef TCBF_CORE_HPP
#define TCBF_CORE_HPP

// Shared domain types: control-affine systems, barrier functions, the
// pointwise affine constraint c(x) + d(x) u >= 0, shaping functions and
// tunable-term policies.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>

#include "tcbf/errors.hpp"

namespace tcbf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Threshold on |d|^2 below which the d = 0 branch of every lambda is taken.
inline constexpr double kZeroDirectionTol = 1e-12;

namespace detail {

inline bool all_finite(const Eigen::Ref<const Matrix>& m) {
  return m.allFinite();
}

inline std::string describe(const Vector& x) {
  std::ostringstream os;
  os.precision(17);
  os << '[';
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (i) os << ", ";
    os << x[i];
  }
  os << ']';
  return os.str();
}

}  // namespace detail

/// x' = f(x) + g(x) u with x in R^n and u in R^m.
///
/// Evaluations are checked: a shape mismatch raises ConfigError and a
/// non-finite entry raises NumericError.
class ControlAffineSystem {
 public:
  using Drift = std::function<Vector(const Vector&)>;
  using InputMap = std::function<Matrix(const Vector&)>;

  ControlAffineSystem(std::size_t state_dim, std::size_t input_dim, Drift drift,
                      InputMap input_map)
      : n_(state_dim), m_(input_dim), drift_(std::move(drift)),
        input_map_(std::move(input_map)) {
    if (n_ == 0 || m_ == 0) {
      throw ConfigError("system dimensions must be positive");
    }
    if (!drift_ || !input_map_) {
      throw ConfigError("system requires both drift and input map");
    }
  }

  std::size_t state_dim() const noexcept { return n_; }
  std::size_t input_dim() const noexcept { return m_; }

  Vector drift(const Vector& x) const {
    check_state(x);
    Vector fx = drift_(x);
    if (static_cast<std::size_t>(fx.size()) != n_) {
      throw ConfigError("drift returned " + std::to_string(fx.size()) +
                        " entries, expected " + std::to_string(n_));
    }
    if (!fx.allFinite()) {
      throw NumericError("drift is not finite at x = " + detail::describe(x));
    }
    return fx;
  }

  Matrix input_map(const Vector& x) const {
    check_state(x);
    Matrix gx = input_map_(x);
    if (static_cast<std::size_t>(gx.rows()) != n_ ||
        static_cast<std::size_t>(gx.cols()) != m_) {
      throw ConfigError("input map returned " + std::to_string(gx.rows()) +
                        "x" + std::to_string(gx.cols()) + ", expected " +
                        std::to_string(n_) + "x" + std::to_string(m_));
    }
    if (!gx.allFinite()) {
      throw NumericError("input map is not finite at x = " +
                         detail::describe(x));
    }
    return gx;
  }

  /// f(x) + g(x) u.
  Vector closed_loop(const Vector& x, const Vector& u) const {
    if (static_cast<std::size_t>(u.size()) != m_) {
      throw ConfigError("input has " + std::to_string(u.size()) +
                        " entries, expected " + std::to_string(m_));
    }
    return drift(x) + input_map(x) * u;
  }

 private:
  void check_state(const Vector& x) const {
    if (static_cast<std::size_t>(x.size()) != n_) {
      throw ConfigError("state has " + std::to_string(x.size()) +
                        " entries, expected " + std::to_string(n_));
    }
    if (!x.allFinite()) {
      throw NumericError("state is not finite: " + detail::describe(x));
    }
  }

  std::size_t n_;
  std::size_t m_;
  Drift drift_;
  InputMap input_map_;
};

/// Extended class-K function beta: beta(0) = 0, strictly increasing.
class ExtendedClassK {
 public:
  struct Linear {
    double alpha;
  };
  using Custom = std::function<double(double)>;

  static ExtendedClassK linear(double alpha) {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
      throw ConfigError("linear class-K slope must be positive and finite");
    }
    return ExtendedClassK(Linear{alpha});
  }

  /// The caller guarantees monotonicity; beta(0) = 0 is enforced at evaluation.
  static ExtendedClassK custom(Custom fn) {
    if (!fn) throw ConfigError("custom class-K function is empty");
    return ExtendedClassK(std::move(fn));
  }

  double operator()(double s) const {
    if (s == 0.0) return 0.0;
    if (const auto* lin = std::get_if<Linear>(&kind_)) return lin->alpha * s;
    return std::get<Custom>(kind_)(s);
  }

  bool is_linear() const noexcept { return std::holds_alternative<Linear>(kind_); }

  /// Slope of the linear kind; NaN for custom kinds.
  double slope() const noexcept {
    if (const auto* lin = std::get_if<Linear>(&kind_)) return lin->alpha;
    return std::nan("");
  }

 private:
  template <class K>
  explicit ExtendedClassK(K kind) : kind_(std::move(kind)) {}

  std::variant<Linear, Custom> kind_;
};

/// h(x) with analytic gradient dh/dx and the class-K function beta.
struct BarrierFunction {
  std::function<double(const Vector&)> value;
  std::function<Vector(const Vector&)> gradient;
  ExtendedClassK class_k = ExtendedClassK::linear(1.0);
};

/// Pointwise constraint c + d u >= 0 (d stored as a column, read as a row).
struct AffineConstraint {
  double c = 0.0;
  Vector d;

  double d_squared() const { return d.squaredNorm(); }

  /// True when |d|^2 is below kZeroDirectionTol.
  bool direction_vanishes() const { return d_squared() <= kZeroDirectionTol; }

  /// Strict-inequality convention: with d = 0 the constraint needs c > 0.
  bool valid_for_synthesis() const {
    return std::isfinite(c) && d.allFinite() && !(direction_vanishes() && c <= 0.0);
  }

  void require_valid() const {
    if (!std::isfinite(c) || !d.allFinite()) {
      throw NumericError("constraint pair is not finite");
    }
    if (direction_vanishes() && c <= 0.0) {
      std::ostringstream os;
      os.precision(17);
      os << "infeasible CBF constraint: c = " << c << " with |d|^2 = "
         << d_squared();
      throw InfeasibleError(os.str());
    }
  }
};

/// Shaping function s applied to |d|^2: s(0) = 0 and s(t) > 0 for t > 0.
class ShapingFunction {
 public:
  struct Linear {
    double sigma;
  };
  using Custom = std::function<double(double)>;

  /// s(t) = sigma * t.
  static ShapingFunction linear(double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
      throw ConfigError("shaping slope sigma must be positive and finite");
    }
    return ShapingFunction(Linear{sigma});
  }

  static ShapingFunction custom(Custom fn) {
    if (!fn) throw ConfigError("custom shaping function is empty");
    return ShapingFunction(std::move(fn));
  }

  double operator()(double d_sq) const {
    if (d_sq == 0.0) return 0.0;
    if (const auto* lin = std::get_if<Linear>(&kind_)) return lin->sigma * d_sq;
    return std::get<Custom>(kind_)(d_sq);
  }

  bool is_linear() const noexcept { return std::holds_alternative<Linear>(kind_); }

  double sigma() const noexcept {
    if (const auto* lin = std::get_if<Linear>(&kind_)) return lin->sigma;
    return std::nan("");
  }

 private:
  template <class K>
  explicit ShapingFunction(K kind) : kind_(std::move(kind)) {}

  std::variant<Linear, Custom> kind_;
};

/// How the tunable term kappa is obtained at a point.
///
/// The eta kinds are resolved in (c, |d|^2) space and mapped to kappa by
/// kappa = (1 - eta) c / Gamma + eta. kappa_direct maps the state itself.
class TunableTermPolicy {
 public:
  struct EtaConstant {
    double eta;
  };
  struct EtaFunction {
    std::function<double(double c, double d_sq)> eta;
  };
  struct KappaDirect {
    std::function<double(const Vector& x)> kappa;
  };

  static TunableTermPolicy eta_constant(double eta) {
    if (!(eta > 0.0 && eta <= 1.0)) {
      throw ConfigError("constant eta must lie in (0, 1]");
    }
    return TunableTermPolicy(EtaConstant{eta});
  }

  static TunableTermPolicy eta_function(std::function<double(double, double)> fn) {
    if (!fn) throw ConfigError("eta function is empty");
    return TunableTermPolicy(EtaFunction{std::move(fn)});
  }

  static TunableTermPolicy kappa_direct(std::function<double(const Vector&)> fn) {
    if (!fn) throw ConfigError("kappa function is empty");
    return TunableTermPolicy(KappaDirect{std::move(fn)});
  }

  /// eta~ = 1 / (sqrt(s(|d|^2) / gamma^2 + 1) + 1), the norm-bounded choice
  /// that turns the tunable formula into Lin-Sontag's formula.
  static TunableTermPolicy lin_sontag(ShapingFunction s, double gamma) {
    if (!(gamma > 0.0)) throw ConfigError("input bound gamma must be positive");
    return eta_function([s = std::move(s), gamma](double, double d_sq) {
      return 1.0 / (std::sqrt(s(d_sq) / (gamma * gamma) + 1.0) + 1.0);
    });
  }

  bool is_eta_based() const noexcept {
    return !std::holds_alternative<KappaDirect>(kind_);
  }

  /// Constant eta below 0.5 is admissible only where the per-state range
  /// check passes; [0.5, 1] is safe and smooth everywhere.
  bool requires_membership_checks() const noexcept {
    if (const auto* k = std::get_if<EtaConstant>(&kind_)) return k->eta < 0.5;
    return true;
  }

  /// eta at (c, |d|^2); only for eta-based kinds.
  double eta(double c, double d_sq) const {
    if (const auto* k = std::get_if<EtaConstant>(&kind_)) return k->eta;
    if (const auto* f = std::get_if<EtaFunction>(&kind_)) return f->eta(c, d_sq);
    throw ConfigError("kappa_direct policy has no eta");
  }

  /// kappa(x); only for kappa_direct.
  double kappa(const Vector& x) const {
    if (const auto* k = std::get_if<KappaDirect>(&kind_)) return k->kappa(x);
    throw ConfigError("eta-based policy has no direct kappa");
  }

  const std::variant<EtaConstant, EtaFunction, KappaDirect>& kind() const noexcept {
    return kind_;
  }

 private:
  template <class K>
  explicit TunableTermPolicy(K kind) : kind_(std::move(kind)) {}

  std::variant<EtaConstant, EtaFunction, KappaDirect> kind_;
};

/// c = dh/dx f(x) + beta(h(x)), d = dh/dx g(x).
inline AffineConstraint evaluate_constraint(const ControlAffineSystem& sys,
                                            const BarrierFunction& bar,
                                            const Vector& x) {
  if (static_cast<std::size_t>(x.size()) != sys.state_dim()) {
    throw ConfigError("state has " + std::to_string(x.size()) +
                      " entries, system expects " +
                      std::to_string(sys.state_dim()));
  }
  const Vector grad = bar.gradient(x);
  if (static_cast<std::size_t>(grad.size()) != sys.state_dim()) {
    throw ConfigError("barrier gradient has " + std::to_string(grad.size()) +
                      " entries, expected " + std::to_string(sys.state_dim()));
  }
  const double h = bar.value(x);
  if (!std::isfinite(h) || !grad.allFinite()) {
    throw NumericError("barrier is not finite at x = " + detail::describe(x));
  }
  AffineConstraint con;
  con.c = grad.dot(sys.drift(x)) + bar.class_k(h);
  con.d = sys.input_map(x).transpose() * grad;
  if (!std::isfinite(con.c) || !con.d.allFinite()) {
    throw NumericError("constraint is not finite at x = " + detail::describe(x));
  }
  return con;
}

/// Gamma_Stg = sqrt(c^2 + s(|d|^2) |d|^2).
inline double gamma_sontag(double c, double d_sq, const ShapingFunction& s) {
  return std::hypot(c, std::sqrt(s(d_sq) * d_sq));
}

inline double gamma_sontag(const AffineConstraint& con, const ShapingFunction& s) {
  return gamma_sontag(con.c, con.d_squared(), s);
}

/// Gamma_Stg - c without cancellation when c > 0.
inline double sontag_gap(double c, double d_sq, const ShapingFunction& s) {
  const double gamma = gamma_sontag(c, d_sq, s);
  if (c > 0.0) return s(d_sq) * d_sq / (gamma + c);
  return gamma - c;
}

/// Central-difference gradient, step 1e-6 (1 + |x_i|). Test use only.
inline Vector finite_difference_gradient(const std::function<double(const Vector&)>& fn,
                                         const Vector& x) {
  Vector grad(x.size());
  Vector probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double step = 1e-6 * (1.0 + std::abs(x[i]));
    probe[i] = x[i] + step;
    const double up = fn(probe);
    probe[i] = x[i] - step;
    const double down = fn(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace tcbf

#endif  // TCBF_CORE_HPP
