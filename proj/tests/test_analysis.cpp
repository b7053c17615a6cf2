#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "oracles.hpp"
#include "tcbf/analysis.hpp"

namespace {

using namespace tcbf;

const ShapingFunction kUnit = ShapingFunction::linear(1.0);
const ShapingFunction kSigma = ShapingFunction::linear(0.2);
const Vector kNoState = Vector::Zero(1);

AffineConstraint con_of(double c, Vector d) {
  AffineConstraint con;
  con.c = c;
  con.d = std::move(d);
  return con;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

TEST(SafetyMargin, Examples) {
  EXPECT_DOUBLE_EQ(safety_margin_at(0.0, 1.0, 0.7, kSigma), -1.0);
  EXPECT_DOUBLE_EQ(safety_margin_at(3.0, 4.0, 0.8, kUnit), -4.0);
  EXPECT_NEAR(safety_margin_at(-1e6, 1.0, 1.0, kSigma), -0.5, 1e-3);
}

TEST(SafetyMargin, EqualsDefinition) {
  oracle::Sampler rng(31);
  for (int i = 0; i < 5000; ++i) {
    const double c = rng.uniform(-10, 10);
    const double d_sq = rng.uniform(0.01, 9);
    const double kappa = kappa_from_eta(c, d_sq, rng.uniform(0.5, 1.0), kSigma);
    const double g = gamma_sontag(c, d_sq, kSigma);
    const double m = safety_margin_at(c, d_sq, kappa, kSigma);
    EXPECT_NEAR(m, -1.0 + c / (c - kappa * g), 1e-9 * (1.0 + std::abs(m)));
  }
}

TEST(SafetyMargin, DegenerateDenominator) {
  // kappa Gamma = c exactly: c = 3, |d|^2 = 4, sigma = 1 gives Gamma = 5
  EXPECT_THROW(safety_margin_at(3.0, 4.0, 0.6, kUnit), DegenerateMarginError);
}

TEST(SafetyMargin, SontagBelowMinusHalf) {
  oracle::Sampler rng(32);
  for (int i = 0; i < 10000; ++i) {
    const double c = rng.uniform(-10, 10);
    const double d_sq = rng.uniform(0.01, 9);
    EXPECT_LT(safety_margin_at(c, d_sq, 1.0, kSigma), -0.5);
  }
  double prev = safety_margin_at(-1.0, 1.0, 1.0, kSigma);
  for (double c = -10.0; c > -1e7; c *= 10.0) {
    const double m = safety_margin_at(c, 1.0, 1.0, kSigma);
    EXPECT_GT(m, prev);
    prev = m;
  }
  EXPECT_NEAR(prev, -0.5, 1e-12);
}

TEST(SafetyMargin, NonPositiveOnSmoothRange) {
  oracle::Sampler rng(33);
  for (int i = 0; i < 10000; ++i) {
    const double c = rng.uniform(-10, 10);
    const double d_sq = rng.uniform(0.01, 9);
    const double kappa = kappa_from_eta(c, d_sq, rng.uniform(0.5, 1.0), kSigma);
    EXPECT_LE(safety_margin_at(c, d_sq, kappa, kSigma), 0.0);
  }
}

TEST(SafetyMargin, MonotoneInKappaDependsOnSignOfC) {
  // dM/dkappa = c Gamma / (c - kappa Gamma)^2 has the sign of c.
  oracle::Sampler rng(34);
  for (int i = 0; i < 2000; ++i) {
    const double c = rng.uniform(-10, 10);
    const double d_sq = rng.uniform(0.01, 9);
    const double lo = kappa_smooth_lower(c, d_sq, kSigma);
    const double k1 = lo + (1.0 - lo) * rng.uniform(0.01, 0.5);
    const double k2 = lo + (1.0 - lo) * rng.uniform(0.5, 1.0);
    const double m1 = safety_margin_at(c, d_sq, k1, kSigma);
    const double m2 = safety_margin_at(c, d_sq, k2, kSigma);
    if (c > 0.0) {
      EXPECT_GE(m2, m1);
    } else {
      EXPECT_LE(m2, m1);
    }
  }
}

TEST(SafetyMargin, BoundedInputUpperEndpointWithPositiveC) {
  oracle::Sampler rng(35);
  for (int i = 0; i < 2000; ++i) {
    const AffineConstraint con = con_of(rng.uniform(0.0, 10), rng.box(2, -3, 3));
    const double gamma = rng.uniform(0.1, 5);
    const double upper = std::min(1.0, kappa_bi_upper(con, gamma, kSigma));
    if (upper <= kappa_smooth_lower(con.c, con.d_squared(), kSigma)) continue;
    EXPECT_LE(safety_margin_at(con, upper, kSigma), 0.0);
  }
}

TEST(SummarizeMargins, SupremumAndCount) {
  const std::vector<double> m{-3.0, std::nan(""), -0.75, -2.0};
  const MarginReport r = summarize_margins(m);
  EXPECT_EQ(r.sample_count, 3u);
  EXPECT_EQ(r.xi_bar_estimate, -0.75);
  EXPECT_EQ(r.min_margin, -3.0);
  EXPECT_EQ(r.m_of_x, -2.0);
  EXPECT_EQ(summarize_margins({}).sample_count, 0u);
}

TEST(Compatibility, Examples) {
  EXPECT_TRUE(check_compatibility(con_of(-2.0, vec({1.0})), 2.3).compatible);
  const Compatibility bad = check_compatibility(con_of(-3.0, vec({1.0})), 2.3);
  EXPECT_FALSE(bad.compatible);
  EXPECT_NEAR(bad.deficit, 0.7, 1e-12);
  EXPECT_TRUE(check_compatibility(con_of(0.1, vec({0.0, 0.0})), 0.5).compatible);
  EXPECT_THROW(check_compatibility(con_of(0.1, vec({1.0})), 0.0), ConfigError);
}

TEST(Compatibility, AgreesWithSphereSampling) {
  oracle::Sampler rng(36);
  int checked = 0;
  for (int i = 0; i < 1000; ++i) {
    const int m = rng.integer(1, 3);
    const AffineConstraint con = con_of(rng.uniform(-10, 10), rng.box(m, -3, 3));
    const double gamma = rng.uniform(0.1, 5);
    double best = -1e300;
    for (int k = 0; k < 4000; ++k) {
      Vector u = rng.box(m, -1, 1);
      if (u.norm() < 1e-9) continue;
      u *= gamma / u.norm();
      best = std::max(best, con.c + con.d.dot(u));
    }
    if (m == 1) {
      best = std::max(con.c + gamma * con.d[0], con.c - gamma * con.d[0]);
    }
    const double exact = con.c + gamma * con.d.norm();
    if (std::abs(exact) < 0.05 * (1.0 + gamma * con.d.norm())) continue;  // sampling resolution
    EXPECT_EQ(check_compatibility(con, gamma).compatible, best >= 0.0);
    ++checked;
  }
  EXPECT_GT(checked, 800);
}

TEST(KappaBiUpper, Examples) {
  EXPECT_NEAR(kappa_bi_upper(con_of(-2.0, vec({1.0})), 2.3, kSigma), 0.3 / std::sqrt(4.2), 1e-12);
  EXPECT_NEAR(kappa_bi_upper(con_of(-2.0, vec({1.0})), 2.3, kSigma), 0.14639, 1e-5);
  EXPECT_DOUBLE_EQ(kappa_bi_upper(con_of(0.0, vec({1.0})), 1.0, kUnit), 1.0);
  EXPECT_EQ(kappa_bi_upper(con_of(-2.0, vec({1.0})), 2.0, kSigma), 0.0);
  try {
    kappa_bi_upper(con_of(-3.0, vec({1.0})), 2.3, kSigma);
    FAIL() << "expected IncompatibleError";
  } catch (const IncompatibleError& e) {
    EXPECT_NEAR(e.deficit(), 0.7, 1e-12);
  }
}

double lambda_of(const ControllerSpec& spec, double c, double d_sq) {
  return evaluate_controller(spec, con_of(c, vec({std::sqrt(d_sq)})), kNoState).lambda;
}

TEST(ProbeDerivativeJump, Examples) {
  const auto pmn = [](double c, double d_sq) { return lambda_pmn(c, d_sq); };
  EXPECT_NEAR(probe_derivative_jump(pmn, 1.0, 1e-5), 1.0, 1e-3);
  const auto stg = [](double c, double d_sq) { return lambda_stg(c, d_sq, kSigma); };
  EXPECT_LE(probe_derivative_jump(stg, 1.0, 1e-5), 1e-4);
  for (double eta : {0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
    const ControllerSpec spec = ControllerSpec::tunable(kSigma, TunableTermPolicy::eta_constant(eta));
    const auto tun = [&](double c, double d_sq) { return lambda_of(spec, c, d_sq); };
    EXPECT_LE(probe_derivative_jump(tun, 1.0, 1e-5), 1e-4) << "eta " << eta;
  }
  EXPECT_THROW(probe_derivative_jump(pmn, 1.0, 0.0), ConfigError);
  EXPECT_THROW(probe_derivative_jump(pmn, 0.0, 1e-5), ConfigError);
}

TEST(Disturbance, Kinds) {
  EXPECT_EQ(DisturbanceSpec::none().evaluate(1.0, 2), Vector::Zero(2));
  EXPECT_EQ(DisturbanceSpec::constant(vec({1.0, 2.0})).evaluate(3.0, 2), vec({1.0, 2.0}));
  EXPECT_THROW(DisturbanceSpec::constant(vec({1.0})).evaluate(0.0, 2), ConfigError);
  const DisturbanceSpec sine = DisturbanceSpec::sinusoidal(vec({2.0}), 3.0);
  EXPECT_NEAR(sine.evaluate(0.5, 1)[0], 2.0 * std::sin(1.5), 1e-15);
  EXPECT_THROW(DisturbanceSpec::bounded_random(-1.0, 0), ConfigError);
}

TEST(Disturbance, RandomIsBoundedAndReproducible) {
  const DisturbanceSpec a = DisturbanceSpec::bounded_random(0.3, 9);
  const DisturbanceSpec b = DisturbanceSpec::bounded_random(0.3, 9);
  const DisturbanceSpec other = DisturbanceSpec::bounded_random(0.3, 10);
  bool any_diff = false;
  for (std::uint64_t k = 0; k < 1000; ++k) {
    const Vector w = a.evaluate(0.0, 3, k);
    EXPECT_LE(w.norm(), 0.3);
    EXPECT_EQ(w, b.evaluate(5.0, 3, k));
    any_diff = any_diff || w != other.evaluate(0.0, 3, k);
  }
  EXPECT_TRUE(any_diff);
  EXPECT_NE(a.evaluate(0.0, 3, 0), a.evaluate(0.0, 3, 1));
}

TEST(DisturbedResidual, ZeroDisturbanceGivesTightenedValue) {
  const ControllerSpec spec = ControllerSpec::tunable(kSigma, TunableTermPolicy::eta_constant(0.7));
  const AffineConstraint con = con_of(-1.5, vec({0.5, 1.0}));
  const ControllerOutput out = evaluate_controller(spec, con, kNoState);
  EXPECT_NEAR(disturbed_residual(spec, con, kNoState, DisturbanceSpec::none(), 0.0),
              *out.kappa * out.gamma_stg, 1e-12);
}

TEST(DisturbedResidual, SontagToleratesWhatQpDoesNot) {
  const AffineConstraint con = con_of(-1.0, vec({1.0}));
  const double g = gamma_sontag(con, kSigma);
  const DisturbanceSpec w = DisturbanceSpec::constant(vec({-0.5 * g}));
  const double tun = disturbed_residual(
      ControllerSpec::tunable(kSigma, TunableTermPolicy::eta_constant(1.0)), con, kNoState, w, 0.0);
  const double qp = disturbed_residual(ControllerSpec::qp(), con, kNoState, w, 0.0);
  EXPECT_NEAR(tun, 0.5 * g, 1e-12);
  EXPECT_NEAR(qp, -0.5 * g, 1e-12);
}

TEST(DisturbedResidual, OrthogonalDisturbanceChangesNothing) {
  const ControllerSpec spec = ControllerSpec::sontag(kSigma);
  const AffineConstraint con = con_of(0.3, vec({1.0, 0.0}));
  EXPECT_DOUBLE_EQ(
      disturbed_residual(spec, con, kNoState, DisturbanceSpec::constant(vec({0.0, 4.0})), 0.0),
      disturbed_residual(spec, con, kNoState, DisturbanceSpec::none(), 0.0));
}

TEST(DisturbedResidual, NondecreasingInKappa) {
  oracle::Sampler rng(37);
  for (int i = 0; i < 1000; ++i) {
    const AffineConstraint con = con_of(rng.uniform(-10, 10), rng.box(2, -3, 3));
    const DisturbanceSpec w = DisturbanceSpec::constant(rng.box(2, -1, 1));
    double prev = -1e300;
    for (double eta : {0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
      const double r = disturbed_residual(
          ControllerSpec::tunable(kSigma, TunableTermPolicy::eta_constant(eta)), con, kNoState, w,
          0.0);
      EXPECT_GE(r, prev - 1e-12);
      prev = r;
    }
  }
}

TEST(SlopeJumps, SecondDifference) {
  const std::vector<double> s{0.0, 1.0, 2.0, 2.0, 2.0};
  const std::vector<double> j = slope_jumps(s, 0.5);
  ASSERT_EQ(j.size(), 3u);
  EXPECT_DOUBLE_EQ(j[0], 0.0);
  EXPECT_DOUBLE_EQ(j[1], 2.0);
  EXPECT_DOUBLE_EQ(j[2], 0.0);
  EXPECT_TRUE(slope_jumps(std::vector<double>{1.0, 2.0}, 0.1).empty());
}

}  // namespace
