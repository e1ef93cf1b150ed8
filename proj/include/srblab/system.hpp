#pragma once

// Dynamical systems on finite-dimensional normed spaces, the built-in models,
// and sampled validators for the standing assumptions (injectivity of f and
// Df, an attracting trapping region, a dominated splitting).

#include <array>
#include <bit>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "srblab/common.hpp"
#include "srblab/normed_linalg.hpp"

namespace srblab {

/// Named numeric parameters of a system; every value is a list so that
/// vector-valued parameters (expansion rates, ...) fit the same shape.
class SystemParameters {
 public:
  SystemParameters() = default;
  SystemParameters(std::initializer_list<std::pair<const std::string, std::vector<double>>> init) : values_(init) {}

  void set(const std::string& key, std::vector<double> v) { values_[key] = std::move(v); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  double scalar(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    require(it->second.size() == 1, ErrorKind::parameter, "parameter '" + key + "' must be a scalar");
    return it->second.front();
  }
  std::vector<double> list(const std::string& key, std::vector<double> fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  const std::map<std::string, std::vector<double>>& values() const { return values_; }

 private:
  std::map<std::string, std::vector<double>> values_;
};

class DynamicalSystem {
 public:
  DynamicalSystem(std::string name, NormedSpace space, Eigen::Index unstable_dim, std::vector<bool> periodic)
      : name_(std::move(name)), space_(std::move(space)), k_(unstable_dim), periodic_(std::move(periodic)) {
    require(periodic_.size() == space_.dim(), ErrorKind::contract, "periodic mask has wrong length");
    require(k_ >= 1 && k_ <= static_cast<Eigen::Index>(space_.dim()), ErrorKind::parameter,
            "unstable dimension must lie in [1, d]");
  }
  virtual ~DynamicalSystem() = default;

  const std::string& name() const { return name_; }
  const NormedSpace& space() const { return space_; }
  std::size_t dim() const { return space_.dim(); }
  Eigen::Index unstable_dim() const { return k_; }
  const std::vector<bool>& periodic() const { return periodic_; }

  virtual Vec apply(const Vec& x) const = 0;
  virtual Mat derivative(const Vec& x) const = 0;
  virtual bool in_trapping_region(const Vec& x) const = 0;
  /// Maps the unit cube [0,1]^d onto the trapping region U.
  virtual Vec trapping_point(const Vec& u01) const = 0;
  /// Maps [0,1]^{d} onto the boundary of U (one coordinate is ignored).
  virtual Vec trapping_boundary_point(const Vec& u01) const = 0;
  /// Extent of the bounding box of U per coordinate; diam(U) is its norm.
  virtual Vec trapping_extent() const = 0;
  virtual std::optional<Mat> analytic_unstable(const Vec&) const { return std::nullopt; }
  virtual std::optional<Mat> analytic_center_stable(const Vec&) const { return std::nullopt; }
  /// Whether the model claims f is injective on U.
  virtual bool declared_injective() const { return true; }
  virtual SystemParameters parameters() const { return {}; }

  double trapping_diameter() const { return space_.norm(trapping_extent()); }

  /// Periodic coordinates live in [0, 1).
  Vec wrap(Vec x) const {
    for (std::size_t i = 0; i < periodic_.size(); ++i)
      if (periodic_[i]) x(static_cast<Eigen::Index>(i)) -= std::floor(x(static_cast<Eigen::Index>(i)));
    return x;
  }
  /// Shortest displacement from `from` to `to` (minimum image on periodic axes).
  Vec displacement(const Vec& from, const Vec& to) const {
    Vec d = to - from;
    for (std::size_t i = 0; i < periodic_.size(); ++i)
      if (periodic_[i]) d(static_cast<Eigen::Index>(i)) -= std::nearbyint(d(static_cast<Eigen::Index>(i)));
    return d;
  }
  Vec translate(const Vec& x, const Vec& v) const { return wrap(x + v); }
  double distance(const Vec& a, const Vec& b) const { return distance(a.data(), b.data()); }
  /// Allocation-free variant for inner loops.
  double distance(const double* a, const double* b) const {
    std::array<double, kMaxDim> d{};
    for (std::size_t i = 0; i < periodic_.size(); ++i) {
      d[i] = b[i] - a[i];
      if (periodic_[i]) d[i] -= std::nearbyint(d[i]);
    }
    return space_.norm(d.data());
  }

 private:
  std::string name_;
  NormedSpace space_;
  Eigen::Index k_;
  std::vector<bool> periodic_;
};

using SystemPtr = std::shared_ptr<const DynamicalSystem>;

// ---------------------------------------------------------------------------
// Built-in models

/// Integer expansions a_i on the torus coordinates u_i (u -> a u mod 1) times
/// linear contractions s_j -> mu_j s_j on [-1, 1]. Df is constant and
/// diagonal. The torus factor is a covering map, so f is not injective; the
/// model says so through declared_injective().
class LinearHyperbolic final : public DynamicalSystem {
 public:
  LinearHyperbolic(std::vector<double> expansion, std::vector<double> contraction, NormDescriptor norm)
      : DynamicalSystem("linear_hyperbolic",
                        NormedSpace(expansion.size() + contraction.size(), std::move(norm)),
                        static_cast<Eigen::Index>(expansion.size()), mask(expansion.size(), contraction.size())),
        a_(std::move(expansion)),
        mu_(std::move(contraction)) {
    require(!a_.empty(), ErrorKind::parameter, "linear_hyperbolic needs at least one expansion rate");
    for (double a : a_)
      require(a >= 2.0 && a == std::floor(a), ErrorKind::parameter,
              "expansion rates must be integers >= 2 (torus covering)");
    for (double m : mu_) require(m > 0.0 && m < 1.0, ErrorKind::parameter, "contraction rates must lie in (0, 1)");
  }

  Vec apply(const Vec& x) const override {
    Vec y = x;
    const auto k = static_cast<Eigen::Index>(a_.size());
    for (Eigen::Index i = 0; i < k; ++i) {
      const double v = a_[static_cast<std::size_t>(i)] * x(i) + dither(x(i));
      y(i) = v - std::floor(v);
    }
    for (std::size_t j = 0; j < mu_.size(); ++j) y(k + static_cast<Eigen::Index>(j)) *= mu_[j];
    return y;
  }
  Mat derivative(const Vec&) const override { return diagonal().asDiagonal(); }
  bool in_trapping_region(const Vec& x) const override {
    const auto k = static_cast<Eigen::Index>(a_.size());
    return x.allFinite() && (x.tail(x.size() - k).cwiseAbs().array() <= 1.0 + 1e-12).all();
  }
  Vec trapping_point(const Vec& u) const override {
    Vec x = u;
    const auto k = static_cast<Eigen::Index>(a_.size());
    x.tail(x.size() - k) = 2.0 * u.tail(u.size() - k).array() - 1.0;
    return wrap(x);
  }
  Vec trapping_boundary_point(const Vec& u) const override {
    Vec x = trapping_point(u);
    const auto k = static_cast<Eigen::Index>(a_.size());
    if (x.size() > k) x(k) = u(k) < 0.5 ? -1.0 : 1.0;
    return x;
  }
  Vec trapping_extent() const override {
    Vec e = Vec::Constant(static_cast<Eigen::Index>(dim()), 2.0);
    e.head(static_cast<Eigen::Index>(a_.size())).setConstant(0.5);
    return e;
  }
  std::optional<Mat> analytic_unstable(const Vec&) const override {
    return Mat(Mat::Identity(static_cast<Eigen::Index>(dim()), static_cast<Eigen::Index>(dim())).leftCols(unstable_dim()));
  }
  std::optional<Mat> analytic_center_stable(const Vec&) const override {
    const auto d = static_cast<Eigen::Index>(dim());
    return Mat(Mat::Identity(d, d).rightCols(d - unstable_dim()));
  }
  bool declared_injective() const override { return false; }
  SystemParameters parameters() const override { return {{"expansion", a_}, {"contraction", mu_}}; }

  /// In binary floating point u -> 2u mod 1 only shifts mantissa bits out,
  /// so every computed orbit reaches 0 within 53 steps. A deterministic
  /// perturbation below 2.3e-16 keeps computed orbits genuine pseudo-orbits,
  /// which the expanding dynamics shadow.
  static double dither(double u) {
    const std::uint64_t h = splitmix64(std::bit_cast<std::uint64_t>(u));
    return std::ldexp(static_cast<double>(h >> 11) * 0x1.0p-53 - 0.5, -51);
  }

  Vec diagonal() const {
    Vec d(static_cast<Eigen::Index>(dim()));
    for (std::size_t i = 0; i < a_.size(); ++i) d(static_cast<Eigen::Index>(i)) = a_[i];
    for (std::size_t j = 0; j < mu_.size(); ++j) d(static_cast<Eigen::Index>(a_.size() + j)) = mu_[j];
    return d;
  }

 private:
  static std::vector<bool> mask(std::size_t k, std::size_t c) {
    std::vector<bool> m(k + c, false);
    for (std::size_t i = 0; i < k; ++i) m[i] = true;
    return m;
  }
  std::vector<double> a_;
  std::vector<double> mu_;
};

/// Smale solenoid in R^3: with p = ((R + xi) cos phi, (R + xi) sin phi, zeta)
/// and z = xi + i zeta, the map is phi -> 2 phi, z -> lambda z + e^{i phi}/2.
/// Trapping region: the solid torus |z| <= 1 around the circle of radius R.
/// An optional fourth coordinate s -> s + omega (mod 1) adds an isometric
/// center direction.
class Solenoid final : public DynamicalSystem {
 public:
  static constexpr double kRadius = 2.0;

  Solenoid(double lambda, std::optional<double> omega, NormDescriptor norm)
      : DynamicalSystem(omega ? "solenoid_neutral" : "solenoid", NormedSpace(omega ? 4 : 3, std::move(norm)), 1,
                        omega ? std::vector<bool>{false, false, false, true} : std::vector<bool>(3, false)),
        lambda_(lambda),
        omega_(omega) {
    require(lambda > 0.0 && lambda < 0.5, ErrorKind::parameter,
            "solenoid contraction lambda must lie in (0, 1/2); larger values risk self-intersection");
    if (omega_) require(std::isfinite(*omega_), ErrorKind::parameter, "omega must be finite");
  }

  double lambda() const { return lambda_; }
  bool neutral() const { return omega_.has_value(); }

  Vec apply(const Vec& p) const override {
    const double r = std::hypot(p(0), p(1));
    const double c = p(0) / r, s = p(1) / r;
    const double xi = lambda_ * (r - kRadius) + 0.5 * c;
    const double zeta = lambda_ * p(2) + 0.5 * s;
    const double rho = kRadius + xi;
    Vec q(p.size());
    q(0) = rho * (c * c - s * s);
    q(1) = rho * 2.0 * c * s;
    q(2) = zeta;
    if (omega_) {
      const double t = p(3) + *omega_;
      q(3) = t - std::floor(t);
    }
    return q;
  }

  Mat derivative(const Vec& p) const override {
    const double r = std::hypot(p(0), p(1));
    const double c = p(0) / r, s = p(1) / r;
    const Eigen::RowVector3d dc(s * s / r, -c * s / r, 0.0);
    const Eigen::RowVector3d ds(-c * s / r, c * c / r, 0.0);
    const Eigen::RowVector3d dxi = lambda_ * Eigen::RowVector3d(c, s, 0.0) + 0.5 * dc;
    const Eigen::RowVector3d dzeta = Eigen::RowVector3d(0.0, 0.0, lambda_) + 0.5 * ds;
    const double rho = kRadius + lambda_ * (r - kRadius) + 0.5 * c;
    const double C = c * c - s * s, S = 2.0 * c * s;
    const Eigen::RowVector3d dC = 2.0 * c * dc - 2.0 * s * ds;
    const Eigen::RowVector3d dS = 2.0 * (s * dc + c * ds);
    Mat D = Mat::Zero(p.size(), p.size());
    D.block(0, 0, 1, 3) = C * dxi + rho * dC;
    D.block(1, 0, 1, 3) = S * dxi + rho * dS;
    D.block(2, 0, 1, 3) = dzeta;
    if (omega_) D(3, 3) = 1.0;
    return D;
  }

  bool in_trapping_region(const Vec& p) const override {
    if (!p.allFinite()) return false;
    const double xi = std::hypot(p(0), p(1)) - kRadius;
    return xi * xi + p(2) * p(2) <= 1.0 + 1e-12;
  }

  Vec trapping_point(const Vec& u) const override { return embed(u(0), std::sqrt(u(1)), u(2), u); }
  Vec trapping_boundary_point(const Vec& u) const override { return embed(u(0), 1.0, u(2), u); }

  Vec trapping_extent() const override {
    Vec e(static_cast<Eigen::Index>(dim()));
    e(0) = e(1) = 2.0 * (kRadius + 1.0);
    e(2) = 2.0;
    if (omega_) e(3) = 0.5;
    return e;
  }

  /// The disc plane {phi = const} (plus the rotation axis) is invariant.
  std::optional<Mat> analytic_center_stable(const Vec& p) const override {
    const double r = std::hypot(p(0), p(1));
    Mat F = Mat::Zero(p.size(), p.size() - 1);
    F(0, 0) = p(0) / r;
    F(1, 0) = p(1) / r;
    F(2, 1) = 1.0;
    if (omega_) F(3, 2) = 1.0;
    return F;
  }

  SystemParameters parameters() const override {
    SystemParameters out{{"lambda", {lambda_}}};
    if (omega_) out.set("omega", {*omega_});
    return out;
  }

  /// Angle phi / (2 pi) in [0, 1): the base circle coordinate.
  static double angle01(const Vec& p) {
    const double a = std::atan2(p(1), p(0)) / (2.0 * std::numbers::pi);
    return a < 0.0 ? a + 1.0 : a;
  }

  /// Point with given angle fraction theta and disc coordinate (xi, zeta).
  Vec point(double theta, double xi, double zeta, double s = 0.0) const {
    Vec p(static_cast<Eigen::Index>(dim()));
    const double phi = 2.0 * std::numbers::pi * theta;
    p(0) = (kRadius + xi) * std::cos(phi);
    p(1) = (kRadius + xi) * std::sin(phi);
    p(2) = zeta;
    if (omega_) p(3) = s - std::floor(s);
    return p;
  }

 private:
  Vec embed(double theta, double radius, double alpha, const Vec& u) const {
    const double a = 2.0 * std::numbers::pi * alpha;
    return point(theta, radius * std::cos(a), radius * std::sin(a), omega_ ? u(3) : 0.0);
  }

  double lambda_;
  std::optional<double> omega_;
};

/// A system assembled from callables; used for test doubles and user models.
/// The trapping region is a box [lo, hi] with optional periodic axes.
class CustomSystem final : public DynamicalSystem {
 public:
  using Map = std::function<Vec(const Vec&)>;
  using Jacobian = std::function<Mat(const Vec&)>;

  CustomSystem(std::string name, NormedSpace space, Eigen::Index k, Map f, Jacobian df, Vec lo, Vec hi,
               std::vector<bool> periodic, bool injective = true)
      : DynamicalSystem(std::move(name), std::move(space), k, std::move(periodic)),
        f_(std::move(f)),
        df_(std::move(df)),
        lo_(std::move(lo)),
        hi_(std::move(hi)),
        injective_(injective) {}

  Vec apply(const Vec& x) const override { return wrap(f_(x)); }
  Mat derivative(const Vec& x) const override { return df_(x); }
  bool in_trapping_region(const Vec& x) const override {
    if (!x.allFinite()) return false;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (periodic()[static_cast<std::size_t>(i)]) continue;
      if (x(i) < lo_(i) - 1e-12 || x(i) > hi_(i) + 1e-12) return false;
    }
    return true;
  }
  Vec trapping_point(const Vec& u) const override { return wrap(lo_ + (hi_ - lo_).cwiseProduct(u)); }
  Vec trapping_boundary_point(const Vec& u) const override {
    Vec x = trapping_point(u);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (!periodic()[static_cast<std::size_t>(i)]) {
        x(i) = u(i) < 0.5 ? lo_(i) : hi_(i);
        break;
      }
    }
    return x;
  }
  Vec trapping_extent() const override {
    Vec e = hi_ - lo_;
    for (Eigen::Index i = 0; i < e.size(); ++i)
      if (periodic()[static_cast<std::size_t>(i)]) e(i) = 0.5;
    return e;
  }
  bool declared_injective() const override { return injective_; }

 private:
  Map f_;
  Jacobian df_;
  Vec lo_, hi_;
  bool injective_;
};

inline const std::vector<std::string>& builtin_system_names() {
  static const std::vector<std::string> names = {"linear_hyperbolic", "solenoid", "solenoid_neutral"};
  return names;
}

inline SystemPtr builtin_system(const std::string& name, const SystemParameters& params,
                                NormDescriptor norm = NormDescriptor::sup()) {
  auto known = [&](std::initializer_list<const char*> keys) {
    for (const auto& [key, value] : params.values()) {
      bool ok = false;
      for (const char* k : keys) ok = ok || key == k;
      require(ok, ErrorKind::parameter, "unknown parameter '" + key + "' for system " + name);
      for (double v : value) require(std::isfinite(v), ErrorKind::parameter, "parameter '" + key + "' is not finite");
    }
  };
  if (name == "linear_hyperbolic") {
    known({"expansion", "contraction"});
    return std::make_shared<LinearHyperbolic>(params.list("expansion", {2.0}), params.list("contraction", {0.5}),
                                              std::move(norm));
  }
  if (name == "solenoid") {
    known({"lambda"});
    return std::make_shared<Solenoid>(params.scalar("lambda", 0.25), std::nullopt, std::move(norm));
  }
  if (name == "solenoid_neutral") {
    known({"lambda", "omega"});
    return std::make_shared<Solenoid>(params.scalar("lambda", 0.25),
                                      params.scalar("omega", (std::sqrt(5.0) - 1.0) / 2.0), std::move(norm));
  }
  fail(ErrorKind::unknown_system, "no built-in system named '" + name + "'");
}

// ---------------------------------------------------------------------------
// Orbits and the sampled attractor

/// Stored orbit segment x_{-m}, ..., x_{-1}, x_0 (columns, oldest first).
/// Backward orbits are never computed by inverting f; they are remembered.
struct OrbitSegment {
  Mat states;

  Eigen::Index length() const { return states.cols() - 1; }
  Vec point() const { return states.col(states.cols() - 1); }
  /// x_{-j}
  Vec back(Eigen::Index j) const {
    require(j >= 0 && j <= length(), ErrorKind::itinerary, "backward orbit shorter than requested");
    return states.col(states.cols() - 1 - j);
  }
  /// Orbit of f(x_0): appends the image and keeps at most `cap` past states.
  OrbitSegment advanced(const Vec& image, Eigen::Index cap) const {
    const Eigen::Index keep = std::min(states.cols(), cap);
    OrbitSegment out;
    out.states.resize(states.rows(), keep + 1);
    out.states.leftCols(keep) = states.rightCols(keep);
    out.states.col(keep) = image;
    return out;
  }
};

struct AttractorSample {
  std::vector<OrbitSegment> orbits;

  std::size_t size() const { return orbits.size(); }
  Vec point(std::size_t i) const { return orbits[i].point(); }
};

/// Quasi-random point i of [0,1)^d (Halton, Cranley-Patterson shifted).
inline Vec halton_point(std::size_t i, std::size_t d, const Vec& shift) {
  Vec u(static_cast<Eigen::Index>(d));
  for (std::size_t j = 0; j < d; ++j) {
    const double v = radical_inverse(i + 1, nth_prime(j)) + shift(static_cast<Eigen::Index>(j));
    u(static_cast<Eigen::Index>(j)) = v - std::floor(v);
  }
  return u;
}

inline Vec stream_shift(std::uint64_t seed, std::string_view stage, std::size_t d) {
  auto rng = make_stream(seed, stage);
  Vec s(static_cast<Eigen::Index>(d));
  for (std::size_t j = 0; j < d; ++j) s(static_cast<Eigen::Index>(j)) = uniform01(rng);
  return s;
}

/// Pushes quasi-random points of U forward `transient` steps and keeps the
/// last `history` states of each orbit.
inline AttractorSample sample_attractor(const DynamicalSystem& sys, std::size_t n_points, std::uint64_t seed,
                                        std::size_t transient = 200, std::size_t history = 64, unsigned workers = 1) {
  require(n_points >= 1, ErrorKind::invalid_input, "attractor sample needs at least one point");
  require(history <= transient, ErrorKind::invalid_input, "history cannot exceed the transient");
  const Vec shift = stream_shift(seed, "attractor", sys.dim());
  AttractorSample out;
  out.orbits.resize(n_points);
  parallel_for(n_points, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Vec x = sys.trapping_point(halton_point(i, sys.dim(), shift));
      Mat states(static_cast<Eigen::Index>(sys.dim()), static_cast<Eigen::Index>(history + 1));
      for (std::size_t step = 0; step <= transient; ++step) {
        if (step + history >= transient) states.col(static_cast<Eigen::Index>(step + history - transient)) = x;
        if (step == transient) break;
        x = sys.apply(x);
        require(sys.in_trapping_region(x), ErrorKind::domain, "orbit left the trapping region during sampling");
      }
      out.orbits[i].states = std::move(states);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Condition validators

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct ValidationReport {
  std::vector<CheckResult> checks;
  std::vector<std::string> violations;
  std::vector<std::string> notes;
  bool passed() const { return violations.empty(); }
  const CheckResult* find(const std::string& name) const {
    for (const auto& c : checks)
      if (c.name == name) return &c;
    return nullptr;
  }
};

namespace detail {

// Newton iteration for f(y) = target started from y0.
inline std::optional<Vec> newton_preimage(const DynamicalSystem& sys, Vec y, const Vec& target) {
  const double scale = std::max(1.0, sys.space().norm(target));
  for (int it = 0; it < 60; ++it) {
    if (!sys.in_trapping_region(y)) return std::nullopt;
    const Vec r = sys.displacement(sys.apply(y), target);
    if (sys.space().norm(r) < 1e-12 * scale) return y;
    const Mat D = sys.derivative(y);
    const Vec step = D.fullPivLu().solve(r);
    if (!step.allFinite()) return std::nullopt;
    y = sys.translate(y, step);
  }
  return std::nullopt;
}

inline double max_pairwise_distance(const DynamicalSystem& sys, const std::vector<Vec>& pts) {
  double best = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) best = std::max(best, sys.distance(pts[i], pts[j]));
  return best;
}

}  // namespace detail

struct ValidationOptions {
  std::size_t n_samples = 2000;
  std::uint64_t seed = 7;
  std::size_t capture_steps = 100;
  double derivative_tolerance = 1e-5;
  unsigned workers = 1;
};

/// Sampled checks of the standing assumptions. Failures are recorded as named
/// violations, never thrown.
inline ValidationReport validate_conditions(const DynamicalSystem& sys, const ValidationOptions& opt = {}) {
  require(opt.n_samples >= 2, ErrorKind::invalid_input, "validation needs at least two samples");
  ValidationReport rep;
  const std::size_t d = sys.dim();
  const std::size_t n = opt.n_samples;
  const Vec shift = stream_shift(opt.seed, "validate", d);
  std::vector<Vec> xs(n), fx(n);
  Mat X(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n)), FX = X;
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = sys.trapping_point(halton_point(i, d, shift));
    fx[i] = sys.apply(xs[i]);
    X.col(static_cast<Eigen::Index>(i)) = xs[i];
    FX.col(static_cast<Eigen::Index>(i)) = fx[i];
  }
  auto col = [](const Mat& m, std::size_t i) { return m.data() + static_cast<Eigen::Index>(i) * m.rows(); };
  const double diam = sys.trapping_diameter();

  // C1: look for a distinct preimage of f(x_i). Candidates are the far sample
  // points whose images come closest; Newton then decides.
  {
    const double far = 0.05 * diam;
    std::vector<double> gap(n, std::numeric_limits<double>::infinity());
    std::vector<int> collision(n, 0);
    parallel_for(n, opt.workers, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        std::size_t best_j = n;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i || sys.distance(col(X, i), col(X, j)) < far) continue;
          const double g = sys.distance(col(FX, i), col(FX, j));
          if (g < gap[i]) {
            gap[i] = g;
            best_j = j;
          }
        }
        if (best_j == n) continue;
        const auto y = detail::newton_preimage(sys, xs[best_j], fx[i]);
        if (y && sys.distance(*y, xs[i]) > 1e-6 * diam) collision[i] = 1;
      }
    });
    std::size_t collisions = 0;
    double min_gap = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      collisions += static_cast<std::size_t>(collision[i]);
      min_gap = std::min(min_gap, gap[i]);
    }
    CheckResult c{"injectivity", collisions == 0, min_gap, 0.0,
                  std::to_string(collisions) + " of " + std::to_string(n) +
                      " samples have a distinct preimage partner; value = min image distance of far pairs"};
    if (collisions > 0) {
      if (sys.declared_injective()) {
        c.passed = false;
        rep.violations.push_back("injectivity: f identifies distinct points of U");
      } else {
        c.passed = true;
        c.detail += " (model declares f non-injective; backward orbits come from stored itineraries)";
        rep.notes.push_back("f is not injective (declared by the model)");
      }
    }
    rep.checks.push_back(c);
  }

  // C2(i): Df injective.
  {
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::JacobiSVD<Mat> svd(sys.derivative(xs[i]));
      const auto& sv = svd.singularValues();
      worst = std::min(worst, sv(sv.size() - 1) / std::max(sv(0), 1e-300));
    }
    CheckResult c{"derivative_rank", worst > 1e-12, worst, 1e-12, "smallest relative singular value of Df"};
    if (!c.passed) rep.violations.push_back("derivative_rank: Df is singular at a sampled point");
    rep.checks.push_back(c);
  }

  // Df against central differences.
  {
    double worst = 0.0;
    for (std::size_t i = 0; i < std::min<std::size_t>(n, 1000); ++i) {
      const Vec& x = xs[i];
      const Mat D = sys.derivative(x);
      const double h = 1e-6 * std::max(1.0, x.cwiseAbs().maxCoeff());
      Mat fd(D.rows(), D.cols());
      for (Eigen::Index j = 0; j < D.cols(); ++j) {
        Vec e = Vec::Zero(D.cols());
        e(j) = h;
        fd.col(j) = sys.displacement(sys.apply(sys.translate(x, -e)), sys.apply(sys.translate(x, e))) / (2.0 * h);
      }
      worst = std::max(worst, (D - fd).cwiseAbs().maxCoeff() / std::max(1.0, D.cwiseAbs().maxCoeff()));
    }
    CheckResult c{"derivative_consistency", worst < opt.derivative_tolerance, worst, opt.derivative_tolerance,
                  "max relative entry error of Df against central differences"};
    if (!c.passed) rep.violations.push_back("derivative_consistency: Df disagrees with finite differences");
    rep.checks.push_back(c);
  }

  // C3: f(U) inside U on boundary samples, and iterates settle.
  {
    std::size_t escapes = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec b = sys.trapping_boundary_point(halton_point(i, d, shift));
      if (!sys.in_trapping_region(sys.apply(b))) ++escapes;
    }
    CheckResult c{"trapping_region", escapes == 0, static_cast<double>(escapes), 0.0,
                  "boundary samples mapped outside U"};
    if (!c.passed) rep.violations.push_back("trapping_region: f(U) is not contained in U");
    rep.checks.push_back(c);

    const std::size_t m = std::min<std::size_t>(n, 200);
    std::vector<Vec> pts(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(m));
    std::vector<double> diam_trace;
    std::size_t lost = 0;
    for (std::size_t step = 1; step <= opt.capture_steps; ++step) {
      for (auto& p : pts) {
        p = sys.apply(p);
        if (!sys.in_trapping_region(p)) ++lost;
      }
      if (step + 10 >= opt.capture_steps) diam_trace.push_back(detail::max_pairwise_distance(sys, pts));
    }
    const double hi = *std::max_element(diam_trace.begin(), diam_trace.end());
    const double lo = *std::min_element(diam_trace.begin(), diam_trace.end());
    const double spread = hi > 0.0 ? (hi - lo) / hi : 0.0;
    CheckResult cap{"attractor_capture", lost == 0 && spread < 0.05, spread, 0.05,
                    "relative variation of the sample diameter over the last 10 of " +
                        std::to_string(opt.capture_steps) + " steps"};
    if (!cap.passed) rep.violations.push_back("attractor_capture: iterates leave U or do not settle");
    rep.checks.push_back(cap);
  }

  rep.checks.push_back({"kuratowski", true, 0.0, 0.0,
                        "trivially satisfied: finite dimension, every bounded operator is compact"});
  return rep;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplittingField {
  std::vector<Mat> unstable;        ///< d x k frames, unit columns
  std::vector<Mat> center_stable;   ///< d x (d-k) frames, unit columns
  double unstable_residual = 0.0;   ///< max gap between Df E^u_x and E^u_{fx}
  double center_stable_residual = 0.0;
  double continuity_modulus = 0.0;  ///< max gap(E^u_x, E^u_y) / |x - y| over nearest neighbours
  bool analytic_unstable = false;
  bool analytic_center_stable = false;
};

/// Largest distance from a unit column of A (normalised) to span(B).
inline double subspace_gap(const Mat& A, const Mat& B, const NormedSpace& space) {
  double g = 0.0;
  for (Eigen::Index j = 0; j < A.cols(); ++j) {
    const Vec a = A.col(j) / space.norm(Vec(A.col(j)));
    g = std::max(g, dist_to_span(a, B, space));
  }
  return g;
}

inline Mat unit_columns(Mat F, const NormedSpace& space) {
  for (Eigen::Index j = 0; j < F.cols(); ++j) F.col(j) /= space.norm(Vec(F.col(j)));
  return F;
}

namespace detail {

inline Mat thin_q(const Mat& F) {
  return F.householderQr().householderQ() * Mat::Identity(F.rows(), F.cols());
}

inline Mat euclidean_complement(const Mat& F) {
  const Eigen::Index d = F.rows();
  const Mat Q = F.householderQr().householderQ();
  return Q.rightCols(d - F.cols());
}

inline Mat fixed_frame(Eigen::Index d, Eigen::Index k) {
  std::mt19937_64 rng(0x5eedULL);
  std::normal_distribution<double> g;
  Mat F(d, k);
  for (Eigen::Index i = 0; i < F.size(); ++i) F.data()[i] = g(rng);
  return thin_q(F);
}

}  // namespace detail

/// Seed frame for forward power iteration at x: anything transverse to E^cs.
inline Mat unstable_seed_frame(const DynamicalSystem& sys, const Vec& x) {
  if (auto u = sys.analytic_unstable(x)) return *u;
  if (auto cs = sys.analytic_center_stable(x)) return detail::euclidean_complement(*cs);
  return detail::fixed_frame(static_cast<Eigen::Index>(sys.dim()), sys.unstable_dim());
}

/// E^u at the end of an orbit segment: Df applied along the last m states to
/// a seed frame at x_{-m}, re-orthonormalised each step. Unit columns.
inline Mat unstable_frame(const DynamicalSystem& sys, const OrbitSegment& orbit, Eigen::Index m) {
  if (auto u = sys.analytic_unstable(orbit.point())) return unit_columns(*u, sys.space());
  require(orbit.length() >= m, ErrorKind::itinerary, "orbit shorter than the cone iteration count");
  Mat F = unstable_seed_frame(sys, orbit.back(m));
  for (Eigen::Index j = m; j >= 1; --j) F = detail::thin_q(sys.derivative(orbit.back(j)) * F);
  return unit_columns(F, sys.space());
}

/// E^cs at x: the Euclidean complement of the dominant subspace of the
/// adjoint cocycle along m forward steps.
inline Mat center_stable_frame(const DynamicalSystem& sys, const Vec& x, Eigen::Index m) {
  if (auto cs = sys.analytic_center_stable(x)) return unit_columns(*cs, sys.space());
  std::vector<Vec> fwd{x};
  for (Eigen::Index j = 0; j < m; ++j) fwd.push_back(sys.apply(fwd.back()));
  Mat W = unstable_seed_frame(sys, fwd.back());
  for (Eigen::Index j = m - 1; j >= 0; --j)
    W = detail::thin_q(sys.derivative(fwd[static_cast<std::size_t>(j)]).transpose() * W);
  return unit_columns(detail::euclidean_complement(W), sys.space());
}

inline constexpr double kSplittingResidual = 1e-6;

inline SplittingField compute_splitting(const DynamicalSystem& sys, const AttractorSample& sample,
                                        Eigen::Index cone_iterations = 40, unsigned workers = 1) {
  require(sample.size() >= 1, ErrorKind::invalid_input, "empty attractor sample");
  const Vec x0 = sample.point(0);
  SplittingField out;
  out.analytic_unstable = sys.analytic_unstable(x0).has_value();
  out.analytic_center_stable = sys.analytic_center_stable(x0).has_value();
  require(out.analytic_unstable || cone_iterations >= 20, ErrorKind::invalid_input,
          "cone_iterations must be at least 20");
  const std::size_t n = sample.size();
  out.unstable.resize(n);
  out.center_stable.resize(n);
  std::vector<double> res_u(n, 0.0), res_cs(n, 0.0);
  const auto& space = sys.space();
  const Eigen::Index cap = sample.orbits[0].length() + 1;
  parallel_for(n, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& orbit = sample.orbits[i];
      out.unstable[i] = unstable_frame(sys, orbit, cone_iterations);
      out.center_stable[i] = center_stable_frame(sys, orbit.point(), cone_iterations);
      // Invariance against frames computed independently at f(x).
      const Vec x = orbit.point();
      const Mat D = sys.derivative(x);
      const OrbitSegment next = orbit.advanced(sys.apply(x), cap);
      const Mat u_next = unstable_frame(sys, next, cone_iterations);
      const Mat cs_next = center_stable_frame(sys, next.point(), cone_iterations);
      res_u[i] = subspace_gap(Mat(D * out.unstable[i]), u_next, space);
      res_cs[i] = subspace_gap(Mat(D * out.center_stable[i]), cs_next, space);
    }
  });
  for (std::size_t i = 0; i < n; ++i) {
    out.unstable_residual = std::max(out.unstable_residual, res_u[i]);
    out.center_stable_residual = std::max(out.center_stable_residual, res_cs[i]);
  }
  if (!(out.unstable_residual < kSplittingResidual) || !(out.center_stable_residual < kSplittingResidual))
    fail(ErrorKind::splitting_failure, "invariance residual stagnates at " +
                                           std::to_string(std::max(out.unstable_residual, out.center_stable_residual)));

  const std::size_t m = std::min<std::size_t>(n, 400);
  for (std::size_t i = 0; i < m; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bj = i;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const double dd = sys.distance(sample.point(i), sample.point(j));
      if (dd > 0.0 && dd < best) {
        best = dd;
        bj = j;
      }
    }
    if (bj != i)
      out.continuity_modulus =
          std::max(out.continuity_modulus, subspace_gap(out.unstable[i], out.unstable[bj], space) / best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partial hyperbolicity

struct HyperbolicityReport {
  double lambda0_estimate = 0.0;  ///< min log |Df xi| over unit xi in E^u
  double cs_bound = 0.0;          ///< max |Df eta| over unit eta in E^cs
  double lambda0_multistep = 0.0; ///< min (1/m) log |Df^m xi| over unit xi in E^u
  Eigen::Index multistep = 0;
  std::size_t samples = 0;
  std::vector<std::string> violations;
  bool accepted() const { return lambda0_estimate > 0.0 && cs_bound <= 1.0 + 1e-9; }
};

/// One-step rates certify the splitting in the given norm; the m-step rate
/// (default m = 8) shows the expansion an adapted norm would see.
inline HyperbolicityReport hyperbolicity_report(const DynamicalSystem& sys, const SplittingField& split,
                                                const AttractorSample& sample, std::size_t n_samples,
                                                unsigned workers = 1, Eigen::Index multistep = 8) {
  const std::size_t n = std::min(n_samples, sample.size());
  require(n >= 1 && split.unstable.size() >= n, ErrorKind::invalid_input, "splitting does not cover the sample");
  require(multistep >= 1, ErrorKind::invalid_input, "multistep must be positive");
  std::vector<double> lam(n), lam_m(n), cs(n);
  parallel_for(n, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Vec x = sample.point(i);
      const Mat D = sys.derivative(x);
      lam[i] = std::log(min_expansion(D, split.unstable[i], sys.space()));
      cs[i] = split.center_stable[i].cols() ? operator_norm(D, split.center_stable[i], sys.space()) : 0.0;
      Mat P = D;
      for (Eigen::Index j = 1; j < multistep; ++j) {
        x = sys.apply(x);
        P = sys.derivative(x) * P;
      }
      lam_m[i] = std::log(min_expansion(P, split.unstable[i], sys.space())) / static_cast<double>(multistep);
    }
  });
  HyperbolicityReport rep;
  rep.samples = n;
  rep.multistep = multistep;
  rep.lambda0_multistep = *std::min_element(lam_m.begin(), lam_m.end());
  rep.lambda0_estimate = *std::min_element(lam.begin(), lam.end());
  rep.cs_bound = *std::max_element(cs.begin(), cs.end());
  if (rep.cs_bound > 1.0 + 1e-9)
    rep.violations.push_back("center-stable growth " + std::to_string(rep.cs_bound) + " exceeds 1");
  if (!(rep.lambda0_estimate > 0.0))
    fail(ErrorKind::not_partially_hyperbolic,
         "unstable expansion estimate log|Df xi| = " + std::to_string(rep.lambda0_estimate) + " is not positive");
  return rep;
}

// ---------------------------------------------------------------------------
// Volume growth along E^u

/// log J^u for one step with frames normalised to unit columns: the images
/// Df v_i are re-expressed in a unit basis of their span.
inline double log_unstable_volume_step(const DynamicalSystem& sys, const Vec& x, Mat& frame) {
  const Mat G = sys.derivative(x) * frame;
  const Mat next = unit_columns(detail::thin_q(G), sys.space());
  const UnitBasis eta{next, 1.0, sys.space()};
  const double J = std::abs(det_from_images(G, eta));
  frame = next;
  return std::log(J);
}

/// (1/n) sum_{j<n} log J^u(f^j x): the sum of the unstable Lyapunov
/// exponents for typical x. The starting frame only needs to be transverse to
/// E^cs; its misalignment changes the sum by a bounded amount, i.e. the
/// average by O(1/n).
inline double lyapunov_unstable_sum(const DynamicalSystem& sys, const Vec& x, std::size_t n) {
  require(n >= 100, ErrorKind::domain, "lyapunov_unstable_sum needs n >= 100 steps");
  require(sys.in_trapping_region(x), ErrorKind::domain, "starting point is outside the trapping region");
  Vec y = x;
  Mat frame = unit_columns(unstable_seed_frame(sys, y), sys.space());
  CompensatedAccumulator acc;
  for (std::size_t j = 0; j < n; ++j) {
    acc.add(log_unstable_volume_step(sys, y, frame));
    y = sys.apply(y);
    require(sys.in_trapping_region(y), ErrorKind::domain, "orbit escaped the trapping region");
  }
  return acc.value() / static_cast<double>(n);
}

}  // namespace srblab
