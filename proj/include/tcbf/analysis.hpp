#ifndef TCBF_ANALYSIS_HPP
#define TCBF_ANALYSIS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>
#include <variant>

#include "tcbf/core.hpp"
#include "tcbf/formulas.hpp"

namespace tcbf {

/// M(x) = -1 + c / (c - kappa Gamma_Stg).
///
/// Gains (1 + xi) k stay safe for every xi >= sup M. Evaluated as the
/// algebraically equal kappa Gamma / (c - kappa Gamma), which keeps the
/// strict M < -1/2 of Sontag's formula visible when |c| dominates.
inline double safety_margin_at(double c, double d_sq, double kappa,
                               const ShapingFunction& s) {
  const double kg = kappa * gamma_sontag(c, d_sq, s);
  const double denom = c - kg;
  if (std::abs(denom) <= 1e-12) {
    throw DegenerateMarginError("margin undefined: |c - kappa Gamma| = " +
                                detail::fmt(std::abs(denom)));
  }
  return kg / denom;
}

inline double safety_margin_at(const AffineConstraint& con, double kappa,
                               const ShapingFunction& s) {
  return safety_margin_at(con.c, con.d_squared(), kappa, s);
}

/// Sample-based estimate of the margin supremum; never a global claim.
struct MarginReport {
  double m_of_x = std::numeric_limits<double>::quiet_NaN();  ///< last sample
  double xi_bar_estimate = -std::numeric_limits<double>::infinity();
  double min_margin = std::numeric_limits<double>::infinity();
  std::size_t sample_count = 0;
};

/// Folds M values into a report; NaN samples are skipped.
inline MarginReport summarize_margins(std::span<const double> margins) {
  MarginReport r;
  for (double m : margins) {
    if (std::isnan(m)) continue;
    r.m_of_x = m;
    r.xi_bar_estimate = std::max(r.xi_bar_estimate, m);
    r.min_margin = std::min(r.min_margin, m);
    ++r.sample_count;
  }
  return r;
}

struct Compatibility {
  bool compatible = true;
  /// -(gamma |d| + c) when incompatible, else 0.
  double deficit = 0.0;
};

/// Some u with |u| <= gamma satisfies c + d u >= 0 iff gamma |d| + c >= 0.
inline Compatibility check_compatibility(const AffineConstraint& con, double gamma) {
  if (!(gamma > 0.0)) throw ConfigError("input bound gamma must be positive");
  const double slack = gamma * con.d.norm() + con.c;
  if (slack >= 0.0) return {true, 0.0};
  return {false, -slack};
}

/// (gamma |d| + c) / Gamma_Stg, the right end of the bounded-input kappa range.
inline double kappa_bi_upper(const AffineConstraint& con, double gamma,
                             const ShapingFunction& s) {
  const Compatibility compat = check_compatibility(con, gamma);
  if (!compat.compatible) {
    throw IncompatibleError("incompatible with |u| <= " + detail::fmt(gamma) +
                                ", deficit " + detail::fmt(compat.deficit),
                            compat.deficit);
  }
  const double slack = gamma * con.d.norm() + con.c;
  if (slack == 0.0) return 0.0;
  return slack / gamma_sontag(con, s);
}

/// |slope just above c = 0 - slope just below|, both from central differences
/// centred at c = +step and c = -step with |d|^2 held at d_fixed.
inline double probe_derivative_jump(const std::function<double(double c, double d_sq)>& lam,
                                    double d_fixed, double step) {
  if (!(step > 0.0)) throw ConfigError("probe step must be positive");
  if (!(d_fixed > 0.0)) throw ConfigError("probe requires |d|^2 > 0");
  const double above = (lam(2.0 * step, d_fixed) - lam(0.0, d_fixed)) / (2.0 * step);
  const double below = (lam(0.0, d_fixed) - lam(-2.0 * step, d_fixed)) / (2.0 * step);
  return std::abs(above - below);
}

/// Additive input disturbance w, applied as u + w.
class DisturbanceSpec {
 public:
  struct None {};
  struct Constant {
    Vector w;
  };
  /// amplitude * sin(freq * t), freq in rad/s.
  struct Sinusoidal {
    Vector amplitude;
    double freq;
  };
  /// Uniform in the ball of radius magnitude; one draw per index.
  struct BoundedRandom {
    double magnitude;
    std::uint64_t seed;
  };

  DisturbanceSpec() = default;

  static DisturbanceSpec none() { return DisturbanceSpec(); }

  static DisturbanceSpec constant(Vector w) {
    if (!w.allFinite()) throw ConfigError("constant disturbance must be finite");
    return DisturbanceSpec(Constant{std::move(w)});
  }

  static DisturbanceSpec sinusoidal(Vector amplitude, double freq) {
    if (!amplitude.allFinite() || !std::isfinite(freq)) {
      throw ConfigError("sinusoidal disturbance must be finite");
    }
    return DisturbanceSpec(Sinusoidal{std::move(amplitude), freq});
  }

  static DisturbanceSpec bounded_random(double magnitude, std::uint64_t seed) {
    if (!(magnitude >= 0.0) || !std::isfinite(magnitude)) {
      throw ConfigError("random disturbance magnitude must be finite and >= 0");
    }
    return DisturbanceSpec(BoundedRandom{magnitude, seed});
  }

  bool is_none() const noexcept { return std::holds_alternative<None>(kind_); }

  /// w at time t for an m-dimensional input. draw_index selects the random
  /// draw; the same (seed, draw_index) always yields the same vector.
  Vector evaluate(double t, Eigen::Index m, std::uint64_t draw_index = 0) const {
    return std::visit(
        [&](const auto& k) -> Vector {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, None>) {
            return Vector::Zero(m);
          } else if constexpr (std::is_same_v<K, Constant>) {
            check_size(k.w.size(), m);
            return k.w;
          } else if constexpr (std::is_same_v<K, Sinusoidal>) {
            check_size(k.amplitude.size(), m);
            return k.amplitude * std::sin(k.freq * t);
          } else {
            return random_ball(k, m, draw_index);
          }
        },
        kind_);
  }

 private:
  template <class K>
  explicit DisturbanceSpec(K kind) : kind_(std::move(kind)) {}

  static void check_size(Eigen::Index got, Eigen::Index m) {
    if (got != m) {
      throw ConfigError("disturbance has " + std::to_string(got) +
                        " entries, input has " + std::to_string(m));
    }
  }

  static std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static double unit(std::uint64_t& state) {
    return static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
  }

  // Rejection sampling from the cube keeps the result platform independent.
  static Vector random_ball(const BoundedRandom& k, Eigen::Index m,
                            std::uint64_t draw_index) {
    std::uint64_t state = k.seed ^ (draw_index * 0xd1b54a32d192ed03ULL);
    Vector w(m);
    for (;;) {
      for (Eigen::Index i = 0; i < m; ++i) w[i] = 2.0 * unit(state) - 1.0;
      if (w.squaredNorm() <= 1.0) break;
    }
    return k.magnitude * w;
  }

  std::variant<None, Constant, Sinusoidal, BoundedRandom> kind_;
};

/// c + d (u + w): the CBF residual when w is added to the controller output.
inline double disturbed_residual(const ControllerSpec& spec, const AffineConstraint& con,
                                 const Vector& x, const DisturbanceSpec& w, double t,
                                 std::uint64_t draw_index = 0) {
  const ControllerOutput out = evaluate_controller(spec, con, x, t);
  const Vector dist = w.evaluate(t, out.u.size(), draw_index);
  return con.c + con.d.dot(out.u + dist);
}

/// Second differences |s[i+1] - 2 s[i] + s[i-1]| / dt, i.e. the jump of the
/// forward-difference slope at each interior sample.
inline std::vector<double> slope_jumps(std::span<const double> series, double dt) {
  std::vector<double> out;
  if (series.size() < 3) return out;
  out.reserve(series.size() - 2);
  for (std::size_t i = 1; i + 1 < series.size(); ++i) {
    out.push_back(std::abs(series[i + 1] - 2.0 * series[i] + series[i - 1]) / dt);
  }
  return out;
}

}  // namespace tcbf

#endif  // TCBF_ANALYSIS_HPP
