#ifndef TCBF_SCENARIO_HPP
#define TCBF_SCENARIO_HPP

// Declarative scenario files: a JSON object tagged with a schema key,
// validated in full before anything is simulated.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tcbf/analysis.hpp"
#include "tcbf/core.hpp"
#include "tcbf/formulas.hpp"
#include "tcbf/manipulator.hpp"
#include "tcbf/simulate.hpp"

namespace tcbf::scenario {

using json = nlohmann::json;

inline constexpr const char* kSchema = "tcbf-scenario/1";

/// Read-only view of one JSON object that knows its dotted path and the
/// keys it may contain.
class Section {
 public:
  Section(const json& j, std::string path, std::initializer_list<const char*> allowed)
      : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& item : j_.items()) {
      if (!ok.count(item.key())) throw ConfigError("unknown key '" + key_path(item.key()) + "'");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& at(const std::string& key) const {
    if (!has(key)) throw ConfigError("missing key '" + key_path(key) + "'");
    return j_.at(key);
  }

  std::string key_path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  double number(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_number()) throw ConfigError("'" + key_path(key) + "' must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError("'" + key_path(key) + "' must be finite");
    return d;
  }

  double number_or(const std::string& key, double fallback) const {
    return has(key) ? number(key) : fallback;
  }

  std::optional<double> optional_number(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return number(key);
  }

  std::string string(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_string()) throw ConfigError("'" + key_path(key) + "' must be a string");
    return v.get<std::string>();
  }

  std::string string_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? string(key) : fallback;
  }

  bool boolean_or(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_boolean()) throw ConfigError("'" + key_path(key) + "' must be true or false");
    return v.get<bool>();
  }

  std::uint64_t unsigned_or(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw ConfigError("'" + key_path(key) + "' must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

  Vector vector(const std::string& key, std::optional<Eigen::Index> size = std::nullopt) const {
    return to_vector(at(key), key_path(key), size);
  }

  Section child(const std::string& key, std::initializer_list<const char*> allowed) const {
    return Section(at(key), key_path(key), allowed);
  }

  static Vector to_vector(const json& v, const std::string& name,
                          std::optional<Eigen::Index> size = std::nullopt) {
    if (!v.is_array()) throw ConfigError("'" + name + "' must be an array of numbers");
    Vector out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) throw ConfigError("'" + name + "' must be an array of numbers");
      out[static_cast<Eigen::Index>(i)] = v[i].get<double>();
    }
    if (!out.allFinite()) throw ConfigError("'" + name + "' must be finite");
    if (size && out.size() != *size) {
      throw ConfigError("'" + name + "' has " + std::to_string(out.size()) +
                        " entries, expected " + std::to_string(*size));
    }
    return out;
  }

 private:
  std::string where() const { return path_.empty() ? "scenario" : "'" + path_ + "'"; }

  const json& j_;
  std::string path_;
};

struct OutputConfig {
  std::filesystem::path dir = "tcbf-out";
  std::string trajectory = "trajectory.csv";
};

struct GridPoint {
  Vector x;
  double t = 0.0;
};

enum class GridSource { trajectory, points, box };

struct CheckConfig {
  GridSource source = GridSource::trajectory;
  std::vector<GridPoint> points;
  /// Input bound for the compatibility test when the controller has none.
  std::optional<double> gamma;
};

/// A validated scenario ready to run.
struct Scenario {
  std::string system_name;
  /// two_link in torque mode: safe backstepping around the formula.
  bool backstepping = false;
  std::shared_ptr<const ControlAffineSystem> system;
  BarrierFunction barrier;
  /// Bare formula and the spec actually applied (the formula or a filter).
  ControllerSpec formula = ControllerSpec::qp();
  ControllerSpec spec = ControllerSpec::qp();
  NominalController nominal;

  manipulator::Params arm;
  manipulator::BacksteppingConfig backstepping_config;
  std::shared_ptr<const manipulator::VirtualController> virtual_controller;

  Vector x0;
  SimConfig sim;
  DisturbanceSpec disturbance;
  OutputConfig output;
  std::uint64_t seed = 0;
  CheckConfig check;

  std::size_t state_dim() const { return system->state_dim(); }
  std::size_t input_dim() const { return system->input_dim(); }

  /// Input bound of a bounded_input formula.
  std::optional<double> formula_gamma() const {
    if (const auto* b = std::get_if<BoundedInputController>(&formula.kind())) return b->gamma;
    return std::nullopt;
  }

  /// The pair the formula acts on at (x, t): c_bar = c + d k_d for filters.
  AffineConstraint acted_constraint(const Vector& x, double t) const {
    if (backstepping) {
      const manipulator::VirtualController& k0 = *virtual_controller;
      const Eigen::Vector2d q = x.head<2>();
      AffineConstraint con;
      con.d = k0.limit().gradient();
      con.c = k0.limit().alpha * k0.limit().value(q) + con.d.dot(k0.nominal().value(q, t));
      return con;
    }
    AffineConstraint con = evaluate_constraint(*system, barrier, x);
    if (nominal) con.c += con.d.dot(nominal(x, t));
    return con;
  }

  Trajectory simulate() const {
    if (backstepping) {
      return manipulator::run_backstepping(arm, backstepping_config, *virtual_controller, x0,
                                           sim, disturbance)
          .trajectory;
    }
    return run(*system, spec, barrier, x0, sim, disturbance);
  }

  /// Evaluates the formula at x0, t = 0. Range, domain and compatibility
  /// failures come back as a message.
  std::optional<std::string> range_failure_at_start() const {
    try {
      (void)evaluate_controller(formula, acted_constraint(x0, 0.0), x0, 0.0);
    } catch (const RangeError& e) {
      return std::string(e.what());
    } catch (const DomainError& e) {
      return std::string(e.what());
    } catch (const IncompatibleError& e) {
      return std::string(e.what());
    }
    return std::nullopt;
  }
};

namespace detail {

inline ShapingFunction shaping(const Section& c) {
  const double sigma = c.number("sigma");
  if (!(sigma > 0.0)) throw ConfigError("'" + c.key_path("sigma") + "' must be positive");
  return ShapingFunction::linear(sigma);
}

inline std::optional<TunableTermPolicy> policy(const Section& c, bool required) {
  if (c.has("eta") && c.has("kappa")) {
    throw ConfigError("'" + c.key_path("eta") + "' and '" + c.key_path("kappa") +
                      "' are mutually exclusive");
  }
  if (c.has("eta")) return TunableTermPolicy::eta_constant(c.number("eta"));
  if (c.has("kappa")) {
    const double kappa = c.number("kappa");
    if (!(kappa > 0.0 && kappa <= 1.0)) {
      throw ConfigError("'" + c.key_path("kappa") + "' must lie in (0, 1]");
    }
    return TunableTermPolicy::kappa_direct([kappa](const Vector&) { return kappa; });
  }
  if (required) throw ConfigError("missing key '" + c.key_path("eta") + "'");
  return std::nullopt;
}

inline void reject(const Section& c, std::initializer_list<const char*> keys,
                   const std::string& kind) {
  for (const char* k : keys) {
    if (c.has(k)) throw ConfigError("'" + c.key_path(k) + "' does not apply to kind " + kind);
  }
}

inline ControllerSpec formula(const Section& c) {
  const std::string kind = c.string("kind");
  if (kind == "qp") {
    reject(c, {"eta", "kappa", "sigma", "gamma", "relu", "smooth"}, kind);
    return ControllerSpec::qp();
  }
  if (kind == "sontag") {
    reject(c, {"eta", "kappa", "gamma", "relu", "smooth"}, kind);
    return ControllerSpec::sontag(shaping(c));
  }
  if (kind == "tunable") {
    reject(c, {"gamma", "smooth"}, kind);
    return ControllerSpec::tunable(shaping(c), *policy(c, true), c.boolean_or("relu", false));
  }
  if (kind == "bounded_input") {
    reject(c, {"relu"}, kind);
    const double gamma = c.number("gamma");
    if (!(gamma > 0.0)) throw ConfigError("'" + c.key_path("gamma") + "' must be positive");
    return ControllerSpec::bounded_input(shaping(c), gamma, policy(c, false),
                                         c.boolean_or("smooth", true));
  }
  throw ConfigError("'" + c.key_path("kind") + "' must be one of qp, sontag, tunable, bounded_input");
}

inline manipulator::TrackingNominal tracking(const Section& n) {
  manipulator::TrackingNominal t;
  if (n.has("kp")) t.kp = n.vector("kp", 2);
  if (n.has("amplitude")) t.reference.amplitude = n.vector("amplitude", 2);
  if (n.has("offset")) t.reference.offset = n.vector("offset", 2);
  t.reference.omega = n.number_or("omega", t.reference.omega);
  return t;
}

inline NominalController nominal(const Section& n, const std::string& system, Eigen::Index dim,
                                 Eigen::Index m) {
  const std::string type = n.string("type");
  if (type == "zero") {
    return [m](const Vector&, double) -> Vector { return Vector::Zero(m); };
  }
  if (type == "constant") {
    Vector u = n.vector("u", m);
    return [u](const Vector&, double) { return u; };
  }
  if (type == "proportional") {
    if (system != "single_integrator") {
      throw ConfigError("nominal type proportional needs single_integrator");
    }
    const double gain = n.number("gain");
    Vector target = n.vector("target", dim);
    return [gain, target](const Vector& x, double) -> Vector { return -gain * (x - target); };
  }
  if (type == "pd") {
    if (system != "double_integrator") throw ConfigError("nominal type pd needs double_integrator");
    const double kp = n.number("kp");
    const double kd = n.number("kd");
    Vector target = n.vector("target", m);
    return [kp, kd, target, m](const Vector& x, double) -> Vector {
      return -kp * (x.head(m) - target) - kd * x.tail(m);
    };
  }
  throw ConfigError("'" + n.key_path("type") + "' must be one of zero, constant, proportional, pd");
}

inline manipulator::Params arm_params(const Section& s) {
  manipulator::Params p;
  if (!s.has("params")) return p;
  const Section a =
      s.child("params", {"m1", "m2", "l1", "l2", "gravity", "lc1", "lc2", "i1", "i2"});
  p.m1 = a.number_or("m1", p.m1);
  p.m2 = a.number_or("m2", p.m2);
  p.l1 = a.number_or("l1", p.l1);
  p.l2 = a.number_or("l2", p.l2);
  p.gravity = a.number_or("gravity", p.gravity);
  p.lc1 = a.optional_number("lc1");
  p.lc2 = a.optional_number("lc2");
  p.i1 = a.number_or("i1", p.i1);
  p.i2 = a.number_or("i2", p.i2);
  p.validate();
  return p;
}

inline SimConfig sim_config(const Section& root) {
  SimConfig cfg;
  if (!root.has("sim")) return cfg;
  const Section s = root.child("sim", {"dt", "horizon", "integrator", "record_every", "zoh"});
  cfg.dt = s.number_or("dt", cfg.dt);
  cfg.horizon = s.number_or("horizon", cfg.horizon);
  const std::string integ = s.string_or("integrator", "rk4");
  if (integ == "rk4") {
    cfg.integrator = Integrator::rk4;
  } else if (integ == "euler") {
    cfg.integrator = Integrator::euler;
  } else {
    throw ConfigError("'sim.integrator' must be rk4 or euler");
  }
  cfg.record_every = s.unsigned_or("record_every", cfg.record_every);
  cfg.zoh = s.boolean_or("zoh", cfg.zoh);
  cfg.validate();
  return cfg;
}

inline DisturbanceSpec disturbance(const Section& root, Eigen::Index m, std::uint64_t seed) {
  if (!root.has("disturbance")) return DisturbanceSpec::none();
  const Section d =
      root.child("disturbance", {"kind", "w", "amplitude", "freq", "magnitude", "seed"});
  const std::string kind = d.string("kind");
  if (kind == "none") return DisturbanceSpec::none();
  if (kind == "constant") return DisturbanceSpec::constant(d.vector("w", m));
  if (kind == "sinusoidal") {
    return DisturbanceSpec::sinusoidal(d.vector("amplitude", m), d.number("freq"));
  }
  if (kind == "bounded_random") {
    return DisturbanceSpec::bounded_random(d.number("magnitude"), d.unsigned_or("seed", seed));
  }
  throw ConfigError("'disturbance.kind' must be one of none, constant, sinusoidal, bounded_random");
}

inline CheckConfig check_config(const Section& root, Eigen::Index n) {
  CheckConfig cfg;
  if (!root.has("check")) return cfg;
  const Section c = root.child("check", {"gamma", "grid"});
  cfg.gamma = c.optional_number("gamma");
  if (cfg.gamma && !(*cfg.gamma > 0.0)) throw ConfigError("'check.gamma' must be positive");
  if (!c.has("grid")) return cfg;
  const Section g = c.child("grid", {"source", "points", "lower", "upper", "count", "t"});
  const std::string source = g.string("source");
  if (source == "trajectory") {
    cfg.source = GridSource::trajectory;
  } else if (source == "points") {
    cfg.source = GridSource::points;
    const json& pts = g.at("points");
    if (!pts.is_array()) throw ConfigError("'check.grid.points' must be an array");
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const Section p(pts[i], "check.grid.points[" + std::to_string(i) + "]", {"x", "t"});
      cfg.points.push_back({p.vector("x", n), p.number_or("t", 0.0)});
    }
  } else if (source == "box") {
    cfg.source = GridSource::box;
    const Vector lo = g.vector("lower", n);
    const Vector hi = g.vector("upper", n);
    const Vector count = g.vector("count", n);
    const double t = g.number_or("t", 0.0);
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(n));
    std::size_t total = 1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!(count[i] >= 1.0) || count[i] != std::floor(count[i])) {
        throw ConfigError("'check.grid.count' entries must be positive integers");
      }
      if (hi[i] < lo[i]) throw ConfigError("'check.grid.upper' below 'check.grid.lower'");
      counts[static_cast<std::size_t>(i)] = static_cast<Eigen::Index>(count[i]);
      total *= static_cast<std::size_t>(count[i]);
    }
    for (std::size_t k = 0; k < total; ++k) {
      Vector x(n);
      std::size_t rest = k;
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto ci = static_cast<std::size_t>(counts[static_cast<std::size_t>(i)]);
        const std::size_t j = rest % ci;
        rest /= ci;
        x[i] = ci == 1 ? lo[i] : lo[i] + (hi[i] - lo[i]) * static_cast<double>(j) /
                                              static_cast<double>(ci - 1);
      }
      cfg.points.push_back({std::move(x), t});
    }
  } else {
    throw ConfigError("'check.grid.source' must be one of trajectory, points, box");
  }
  return cfg;
}

}  // namespace detail

/// Builds a scenario from a parsed config. Every problem raises ConfigError
/// naming the offending key.
inline Scenario build(const json& j) {
  const Section root(j, "",
                     {"schema", "system", "barrier", "controller", "backstepping", "sim", "x0",
                      "disturbance", "output", "seed", "check"});
  const std::string schema = root.string("schema");
  if (schema != kSchema) {
    throw ConfigError("unsupported schema '" + schema + "', expected '" + kSchema + "'");
  }

  Scenario sc;
  sc.seed = root.unsigned_or("seed", 0);

  const Section sys = root.child("system", {"builtin", "dim", "mode", "params"});
  sc.system_name = sys.string("builtin");
  const Section bar = root.child("barrier", {"type", "normal", "bound", "alpha"});
  const Section ctl =
      root.child("controller", {"kind", "eta", "kappa", "sigma", "gamma", "relu", "smooth", "nominal"});
  sc.formula = detail::formula(ctl);

  if (bar.string("type") != "halfspace") {
    throw ConfigError("'barrier.type' must be halfspace");
  }
  const double alpha = bar.number_or("alpha", 1.0);
  if (!(alpha > 0.0)) throw ConfigError("'barrier.alpha' must be positive");
  const double bound = bar.number("bound");

  Eigen::Index n = 0;
  Eigen::Index m = 0;
  if (sc.system_name == "single_integrator" || sc.system_name == "double_integrator") {
    if (sys.has("mode") || sys.has("params")) {
      throw ConfigError("'system.mode' and 'system.params' apply to two_link only");
    }
    const auto dim = static_cast<Eigen::Index>(sys.unsigned_or("dim", 1));
    if (dim < 1) throw ConfigError("'system.dim' must be at least 1");
    m = dim;
    if (sc.system_name == "single_integrator") {
      n = dim;
      sc.system = std::make_shared<const ControlAffineSystem>(
          n, m, [n](const Vector&) -> Vector { return Vector::Zero(n); },
          [n](const Vector&) -> Matrix { return Matrix::Identity(n, n); });
    } else {
      n = 2 * dim;
      sc.system = std::make_shared<const ControlAffineSystem>(
          n, m,
          [dim](const Vector& x) -> Vector {
            Vector f = Vector::Zero(2 * dim);
            f.head(dim) = x.tail(dim);
            return f;
          },
          [dim](const Vector&) -> Matrix {
            Matrix g = Matrix::Zero(2 * dim, dim);
            g.bottomRows(dim).setIdentity();
            return g;
          });
    }
    if (root.has("backstepping")) throw ConfigError("'backstepping' applies to two_link torque mode");
    const Vector normal = bar.vector("normal", n);
    sc.barrier = BarrierFunction{
        [normal, bound](const Vector& x) { return bound - normal.dot(x); },
        [normal](const Vector&) -> Vector { return -normal; }, ExtendedClassK::linear(alpha)};
    if (ctl.has("nominal")) {
      const Section nom =
          ctl.child("nominal", {"type", "u", "gain", "target", "kp", "kd"});
      sc.nominal = detail::nominal(nom, sc.system_name, n, m);
    }
    sc.x0 = root.vector("x0", n);
  } else if (sc.system_name == "two_link") {
    if (sys.has("dim")) throw ConfigError("'system.dim' does not apply to two_link");
    const std::string mode = sys.string_or("mode", "velocity");
    if (mode != "velocity" && mode != "torque") {
      throw ConfigError("'system.mode' must be velocity or torque");
    }
    manipulator::JointLimitBarrier limit;
    limit.normal = bar.vector("normal", 2);
    limit.bound = bound;
    limit.alpha = alpha;
    manipulator::TrackingNominal track;
    if (ctl.has("nominal")) {
      const Section nom = ctl.child("nominal", {"type", "kp", "amplitude", "offset", "omega"});
      if (nom.string("type") != "tracking") {
        throw ConfigError("'controller.nominal.type' must be tracking for two_link");
      }
      track = detail::tracking(nom);
    }
    sc.arm = detail::arm_params(sys);
    m = 2;
    if (mode == "velocity") {
      if (root.has("backstepping")) throw ConfigError("'backstepping' applies to torque mode");
      n = 2;
      const manipulator::VelocityScenario v =
          manipulator::velocity_level_scenario(sc.formula, track, limit);
      sc.system = std::make_shared<const ControlAffineSystem>(v.system);
      sc.barrier = v.barrier;
      sc.nominal = [track](const Vector& q, double t) -> Vector {
        return track.value(q.head<2>(), t);
      };
      sc.x0 = root.has("x0") ? root.vector("x0", n) : v.x0;
    } else {
      n = 4;
      sc.backstepping = true;
      if (root.has("backstepping")) {
        const Section b = root.child("backstepping", {"mu", "kp_bar", "alpha_b"});
        sc.backstepping_config.mu = b.number_or("mu", sc.backstepping_config.mu);
        if (b.has("kp_bar")) sc.backstepping_config.kp_bar = b.vector("kp_bar", 2);
        sc.backstepping_config.alpha_b = b.number_or("alpha_b", sc.backstepping_config.alpha_b);
      }
      sc.backstepping_config.validate();
      sc.virtual_controller =
          std::make_shared<const manipulator::VirtualController>(sc.formula, track, limit);
      sc.system = std::make_shared<const ControlAffineSystem>(manipulator::full_order_system(sc.arm));
      sc.barrier = limit.as_barrier();
      sc.x0 = root.has("x0") ? root.vector("x0", n)
                             : manipulator::default_backstepping_state(sc.backstepping_config,
                                                                       *sc.virtual_controller);
    }
  } else {
    throw ConfigError("'system.builtin' must be one of single_integrator, double_integrator, two_link");
  }

  sc.spec = sc.nominal ? ControllerSpec::safety_filter(sc.formula, sc.nominal) : sc.formula;
  sc.sim = detail::sim_config(root);
  sc.disturbance = detail::disturbance(root, m, sc.seed);
  if (root.has("output")) {
    const Section o = root.child("output", {"dir", "trajectory"});
    sc.output.dir = o.string_or("dir", sc.output.dir.string());
    sc.output.trajectory = o.string_or("trajectory", sc.output.trajectory);
  }
  sc.check = detail::check_config(root, n);
  return sc;
}

inline json load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

/// Sets a dotted key to a value, creating intermediate objects. The value is
/// read as JSON when it parses, else as a string.
inline void set_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must look like key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    parts.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError("override key '" + key + "' crosses a non-object");
    node = &next;
  }
  (*node)[parts.back()] = std::move(value);
}

}  // namespace tcbf::scenario

#endif  // TCBF_SCENARIO_HPP
