#pragma once

// Push-forward of Lebesgue measure on an unstable disc, Cesaro averages,
// transversal boxes with their unstable fibers, the density p_n and the
// conditional-measure diagnostics.

#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "srblab/cocycle.hpp"
#include "srblab/common.hpp"
#include "srblab/manifolds.hpp"
#include "srblab/system.hpp"

namespace srblab {

// ---------------------------------------------------------------------------
// The seed disc L

/// L = W^u_delta(xhat) with the disc chain behind it and the stored orbit of
/// xhat. Backward orbits of points of L come from the chain, never from f^{-1}.
struct SeedDisc {
  OrbitSegment orbit;
  DiscChain chain;
  double delta = 0.0;
  double lebesgue_volume = 0.0;  ///< mu_eta-volume of E^u_xhat(delta) in coefficients; cancels in p_n
  std::vector<double> arclength;  ///< k = 1: cumulative d^u from the left end on a fine grid

  const UnstableDisc& disc() const { return chain.at(0); }
  Eigen::Index k() const { return disc().k(); }
  double half_width() const { return disc().half_width; }
};

inline constexpr int kArclengthGrid = 4096;

inline SeedDisc make_seed_disc(const DynamicalSystem& sys, const OrbitSegment& orbit, double delta,
                               Eigen::Index keep_levels = 40) {
  DiscOptions opt;
  opt.delta = delta;
  opt.keep_levels = keep_levels;
  SeedDisc s;
  s.orbit = orbit;
  s.chain = compute_disc_chain(sys, orbit, opt);
  s.delta = delta;
  const auto& d = s.disc();
  const Eigen::Index k = d.k();
  s.lebesgue_volume = std::pow(2.0 * d.half_width, static_cast<double>(k));
  if (k == 1) {
    // Cumulative arclength by Simpson's rule on each grid interval.
    s.arclength.assign(kArclengthGrid + 1, 0.0);
    const double w = d.half_width;
    const double step = 2.0 * w / kArclengthGrid;
    auto speed = [&](double a) {
      Mat dh;
      d.h(Vec::Constant(1, a), &dh);
      return sys.space().norm(Vec(d.chart.unstable.col(0) + dh.col(0)));
    };
    double prev = speed(-w);
    for (int i = 0; i < kArclengthGrid; ++i) {
      const double a0 = -w + i * step;
      const double mid = speed(a0 + 0.5 * step);
      const double next = speed(a0 + step);
      s.arclength[static_cast<std::size_t>(i + 1)] = s.arclength[static_cast<std::size_t>(i)] + step * (prev + 4.0 * mid + next) / 6.0;
      prev = next;
    }
  }
  return s;
}

/// Lower bound on d^u(a, boundary of L). Exact arclength (tabulated) for
/// k = 1; for k > 1 the bound (delta - |U a|) / |pi^u|, which uses
/// |U(a' - a)| <= |pi^u| |p(a') - p(a)| <= |pi^u| d^u.
inline double distance_to_boundary(const DynamicalSystem& sys, const SeedDisc& seed, const Vec& a) {
  const auto& d = seed.disc();
  if (d.k() == 1) {
    const double w = d.half_width;
    const double t = std::clamp((a(0) + w) / (2.0 * w), 0.0, 1.0) * kArclengthGrid;
    const int i = std::min(static_cast<int>(t), kArclengthGrid - 1);
    const double f = t - i;
    const double s = (1.0 - f) * seed.arclength[static_cast<std::size_t>(i)] + f * seed.arclength[static_cast<std::size_t>(i + 1)];
    return std::max(0.0, std::min(s, seed.arclength.back() - s));
  }
  static thread_local double cached_norm = -1.0;
  static thread_local const SeedDisc* cached_for = nullptr;
  if (cached_for != &seed) {
    cached_norm = operator_norm(d.chart.projector_u(), sys.space());
    cached_for = &seed;
  }
  return std::max(0.0, (seed.delta - sys.space().norm(Vec(d.chart.unstable * a))) / cached_norm);
}

/// lambda_L of {a : d^u(a, boundary) <= t}: exact for k = 1 from the
/// arclength table, a 2^16-point Halton estimate otherwise.
inline double boundary_shell_mass(const DynamicalSystem& sys, const SeedDisc& seed, double t) {
  if (t <= 0.0) return 0.0;
  const auto& d = seed.disc();
  if (d.k() == 1) {
    const auto& s = seed.arclength;
    const double total = s.back();
    if (2.0 * t >= total) return 1.0;
    auto coefficient_at = [&](double target) {
      const auto it = std::lower_bound(s.begin(), s.end(), target);
      const auto i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(1, it - s.begin()));
      const double f = (target - s[i - 1]) / (s[i] - s[i - 1]);
      return (static_cast<double>(i - 1) + f) / kArclengthGrid;  // fraction of [-w, w]
    };
    return coefficient_at(t) + (1.0 - coefficient_at(total - t));
  }
  const std::size_t n = 1u << 16;
  const Vec shift = Vec::Zero(d.k());
  std::size_t inside = 0, shell = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec a = (2.0 * halton_point(i, static_cast<std::size_t>(d.k()), shift).array() - 1.0) * d.half_width;
    if (!d.in_domain(sys.space(), a, seed.delta)) continue;
    ++inside;
    if (distance_to_boundary(sys, seed, a) <= t) ++shell;
  }
  return inside ? static_cast<double>(shell) / static_cast<double>(inside) : 0.0;
}

// ---------------------------------------------------------------------------
// Empirical measures

/// Weighted particles pushed from L. Particle i stores its source
/// coefficients on L, its current point, the point one step earlier and a
/// unit frame of its tangent space E^u; Df^g applied to the source tangent
/// equals frame * G with log|det G| = log_ju. For k = 1 with unit bases this
/// is the accumulated sum of log J^u. The full itinerary is regenerated from
/// the source on demand (see particle_orbit).
struct EmpiricalMeasure {
  std::shared_ptr<const SeedDisc> seed;
  Mat points;       ///< d x N
  Mat preimages;    ///< d x N; equals points for generation 0
  Mat sources;      ///< k x N
  Mat frames;       ///< d x (k N)
  std::vector<double> weights;
  std::vector<double> log_ju;
  std::vector<int> generation;
  int generation_count = 0;  ///< largest generation present

  std::size_t size() const { return weights.size(); }
  Eigen::Index k() const { return sources.rows(); }
  Vec point(std::size_t i) const { return points.col(static_cast<Eigen::Index>(i)); }
  Mat frame(std::size_t i) const {
    return frames.middleCols(static_cast<Eigen::Index>(i) * k(), k());
  }
  double total_mass() const { return compensated_sum(weights); }

  void resize(std::size_t d, std::size_t k, std::size_t n) {
    const auto N = static_cast<Eigen::Index>(n);
    points.resize(static_cast<Eigen::Index>(d), N);
    preimages.resize(static_cast<Eigen::Index>(d), N);
    sources.resize(static_cast<Eigen::Index>(k), N);
    frames.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k) * N);
    weights.assign(n, 0.0);
    log_ju.assign(n, 0.0);
    generation.assign(n, 0);
  }
};

inline void normalize_weights(EmpiricalMeasure& m) {
  const double total = m.total_mass();
  require(total > 0.0, ErrorKind::contract, "measure has no mass");
  for (auto& w : m.weights) w /= total;
}

namespace detail {

// Column-normalises the frame (QR for k > 1) and returns the log volume
// factor that was divided out.
inline double renormalize_frame(Eigen::Ref<Mat> T, const NormedSpace& space) {
  double log_factor = 0.0;
  if (T.cols() > 1) {
    Eigen::HouseholderQR<Mat> qr(T);
    const Mat R = qr.matrixQR().topRows(T.cols()).triangularView<Eigen::Upper>();
    for (Eigen::Index i = 0; i < R.rows(); ++i) log_factor += std::log(std::abs(R(i, i)));
    T = qr.householderQ() * Mat::Identity(T.rows(), T.cols());
  }
  for (Eigen::Index i = 0; i < T.cols(); ++i) {
    const double n = space.norm(Vec(T.col(i)));
    log_factor += std::log(n);
    T.col(i) /= n;
  }
  return log_factor;
}

inline Vec disc_coefficients(const UnstableDisc& disc, const Vec& u) {
  return (2.0 * u.array() - 1.0) * disc.half_width;
}

}  // namespace detail

inline void place_on_seed(const DynamicalSystem& sys, const SeedDisc& seed, EmpiricalMeasure& m, std::size_t slot,
                          const Vec& a) {
  const auto& d = seed.disc();
  const auto s = static_cast<Eigen::Index>(slot);
  const Eigen::Index k = d.k();
  Mat dh;
  d.h(a, &dh);
  const Vec p = d.point(sys, a);
  m.points.col(s) = p;
  m.preimages.col(s) = p;
  m.sources.col(s) = a;
  Mat T = d.chart.unstable + dh;
  detail::renormalize_frame(T, sys.space());
  m.frames.middleCols(s * k, k) = T;
  m.log_ju[slot] = 0.0;
  m.generation[slot] = 0;
}

// Jittered strata for k = 1, independent uniforms otherwise. Independent
// jitter matters: a rotation sequence a_i = i alpha stays a rotation under
// x -> 2^n x and clusters whenever 2^n alpha nears a rational with small
// denominator.
inline std::vector<Vec> seed_coefficients(const DynamicalSystem& sys, const SeedDisc& seed, std::size_t count,
                                          std::uint64_t stream_seed, std::string_view stage, std::uint64_t index) {
  const auto& d = seed.disc();
  const Eigen::Index k = d.k();
  auto rng = make_stream(stream_seed, stage, index);
  std::vector<Vec> out;
  out.reserve(count);
  while (out.size() < count) {
    Vec u(k);
    if (k == 1)
      u(0) = (static_cast<double>(out.size()) + uniform01(rng)) / static_cast<double>(count);
    else
      for (Eigen::Index j = 0; j < k; ++j) u(j) = uniform01(rng);
    const Vec a = detail::disc_coefficients(d, u);
    if (k > 1 && !d.in_domain(sys.space(), a, seed.delta)) continue;
    out.push_back(a);
  }
  return out;
}

/// Normalised Lebesgue measure on L, sampled by a scrambled low-discrepancy
/// sequence in E^u_xhat(delta) coordinates and lifted through h_xhat.
inline EmpiricalMeasure seed_measure(const DynamicalSystem& sys, std::shared_ptr<const SeedDisc> seed,
                                     std::size_t n_particles, std::uint64_t stream_seed) {
  require(seed != nullptr, ErrorKind::contract, "no seed disc");
  require(n_particles >= 1000, ErrorKind::invalid_input, "seed measure needs at least 1000 particles");
  require(check_disc(seed->disc(), sys.space()).valid(), ErrorKind::contract, "seed disc is not a valid unstable disc");
  EmpiricalMeasure m;
  m.seed = seed;
  m.resize(sys.dim(), static_cast<std::size_t>(seed->k()), n_particles);
  const auto coeffs = seed_coefficients(sys, *seed, n_particles, stream_seed, "seed-measure", 0);
  for (std::size_t i = 0; i < n_particles; ++i) {
    place_on_seed(sys, *seed, m, i, coeffs[i]);
    m.weights[i] = 1.0 / static_cast<double>(n_particles);
  }
  return m;
}

/// One application of f to particle i.
inline void step_particle(const DynamicalSystem& sys, EmpiricalMeasure& m, std::size_t i) {
  const auto c = static_cast<Eigen::Index>(i);
  const Eigen::Index k = m.k();
  const Vec p = m.points.col(c);
  const Vec q = sys.apply(p);
  if (!sys.in_trapping_region(q))
    fail(ErrorKind::domain, "particle " + std::to_string(i) + " left the trapping region");
  Mat T = sys.derivative(p) * m.frames.middleCols(c * k, k);
  m.log_ju[i] += detail::renormalize_frame(T, sys.space());
  m.frames.middleCols(c * k, k) = T;
  m.preimages.col(c) = p;
  m.points.col(c) = q;
  m.generation[i] += 1;
}

/// Applies f `steps` times to every particle. Weights are untouched, so mass
/// is conserved exactly.
inline EmpiricalMeasure push_forward(const DynamicalSystem& sys, EmpiricalMeasure m, int steps, unsigned workers = 1) {
  require(steps >= 1, ErrorKind::invalid_input, "push_forward needs steps >= 1");
  parallel_for(m.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i)
      for (int s = 0; s < steps; ++s) step_particle(sys, m, i);
  });
  m.generation_count += steps;
  return m;
}

/// Largest |f(preimage) - point| over particles of generation >= 1.
inline double itinerary_defect(const DynamicalSystem& sys, const EmpiricalMeasure& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m.generation[i] == 0) continue;
    const auto c = static_cast<Eigen::Index>(i);
    worst = std::max(worst, sys.distance(sys.apply(Vec(m.preimages.col(c))), Vec(m.points.col(c))));
  }
  return worst;
}

/// Backward orbit of the point with coefficients `a` on chain level 0:
/// column depth - j is the point on level j. Each level is solved from the
/// one above it, so consecutive columns are f-related to solver tolerance
/// (a forward replay from the deepest point would amplify rounding by the
/// expansion over `depth` steps).
inline OrbitSegment pulled_back_orbit(const DynamicalSystem& sys, const DiscChain& chain, const Vec& a,
                                      Eigen::Index depth) {
  require(depth >= 0 && depth + 1 <= static_cast<Eigen::Index>(chain.levels.size()), ErrorKind::itinerary,
          "disc chain has too few levels for the requested depth");
  OrbitSegment out;
  out.states.resize(static_cast<Eigen::Index>(sys.dim()), depth + 1);
  Vec coeff = a;
  out.states.col(depth) = chain.at(0).point(sys, coeff);
  for (Eigen::Index j = 0; j < depth; ++j) {
    const auto& src = chain.at(j + 1);
    const auto& dst = chain.at(j);
    const Mat L = dst.chart.inverse.topRows(dst.k()) * sys.derivative(src.base()) * src.chart.unstable;
    const auto b = detail::invert_through(sys, src, dst.chart, coeff, Vec(L.fullPivLu().solve(coeff)));
    if (!b) fail(ErrorKind::itinerary, "point could not be pulled back along the disc chain");
    coeff = *b;
    out.states.col(depth - j - 1) = src.point(sys, coeff);
  }
  return out;
}

/// Stored orbit of particle i with `length` past states: the source's
/// backward orbit along the seed chain, the source itself, then the forward
/// replay, which reproduces the stored point bit for bit.
inline OrbitSegment particle_orbit(const DynamicalSystem& sys, const EmpiricalMeasure& m, std::size_t i,
                                   Eigen::Index length) {
  require(m.seed != nullptr, ErrorKind::contract, "measure has no seed disc");
  const SeedDisc& seed = *m.seed;
  const Eigen::Index g = m.generation[i];
  const Vec a = m.sources.col(static_cast<Eigen::Index>(i));
  const Eigen::Index back = std::max<Eigen::Index>(0, length - g);
  require(back + 1 <= static_cast<Eigen::Index>(seed.chain.levels.size()), ErrorKind::itinerary,
          "seed disc chain shorter than the requested itinerary");
  OrbitSegment out;
  out.states.resize(static_cast<Eigen::Index>(sys.dim()), length + 1);
  if (back > 0) out.states.leftCols(back + 1) = pulled_back_orbit(sys, seed.chain, a, back).states;
  Vec y = seed.disc().point(sys, a);
  for (Eigen::Index s = 1; s <= g; ++s) {
    y = sys.apply(y);
    if (s >= g - length) out.states.col(length - g + s) = y;
  }
  if (g == 0) out.states.col(length) = y;
  return out;
}

/// Binary snapshot: magic, d, k, N, then per particle point, source, weight,
/// generation.
inline void write_measure_binary(const EmpiricalMeasure& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::io, "cannot write " + path);
  const std::uint64_t header[4] = {0x53524231ULL, static_cast<std::uint64_t>(m.points.rows()),
                                   static_cast<std::uint64_t>(m.k()), m.size()};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    out.write(reinterpret_cast<const char*>(m.points.col(c).data()), sizeof(double) * m.points.rows());
    out.write(reinterpret_cast<const char*>(m.sources.col(c).data()), sizeof(double) * m.k());
    out.write(reinterpret_cast<const char*>(&m.weights[i]), sizeof(double));
    const std::int64_t g = m.generation[i];
    out.write(reinterpret_cast<const char*>(&g), sizeof g);
  }
}

struct MeasureSnapshot {
  Mat points;
  Mat sources;
  std::vector<double> weights;
  std::vector<int> generation;
};

inline MeasureSnapshot read_measure_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot read " + path);
  std::uint64_t header[4];
  in.read(reinterpret_cast<char*>(header), sizeof header);
  require(in.good() && header[0] == 0x53524231ULL, ErrorKind::io, "not a measure snapshot: " + path);
  MeasureSnapshot s;
  const auto d = static_cast<Eigen::Index>(header[1]), k = static_cast<Eigen::Index>(header[2]);
  const auto n = static_cast<Eigen::Index>(header[3]);
  s.points.resize(d, n);
  s.sources.resize(k, n);
  s.weights.resize(static_cast<std::size_t>(n));
  s.generation.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(s.points.col(i).data()), sizeof(double) * d);
    in.read(reinterpret_cast<char*>(s.sources.col(i).data()), sizeof(double) * k);
    in.read(reinterpret_cast<char*>(&s.weights[static_cast<std::size_t>(i)]), sizeof(double));
    std::int64_t g = 0;
    in.read(reinterpret_cast<char*>(&g), sizeof g);
    s.generation[static_cast<std::size_t>(i)] = static_cast<int>(g);
  }
  require(in.good(), ErrorKind::io, "truncated measure snapshot: " + path);
  return s;
}

inline void write_measure_csv(const EmpiricalMeasure& m, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::io, "cannot write " + path);
  out << "# schema srblab-measure-csv 1\n";
  for (Eigen::Index j = 0; j < m.points.rows(); ++j) out << "x" << j << ",";
  out << "weight,generation\n";
  char buf[64];
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (Eigen::Index j = 0; j < m.points.rows(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g,", m.points(j, static_cast<Eigen::Index>(i)));
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "%.17g,%d\n", m.weights[i], m.generation[i]);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Transversal boxes

struct BoxOptions {
  double bin_width = 0.05;       ///< transversal bin width in cs-coefficients
  double shell_width = 1e-3;     ///< boundary shell for the empirical mu(boundary V) surrogate
  double same_fiber_tol = 1e-9;  ///< graphs closer than this are one fiber (discs are accurate to 1e-10)
};

/// Position of a point relative to a box: u-coefficients b in the anchor
/// chart, transversal cs-coefficients s (where its leaf crosses
/// Exp_x(E^cs_x)), the fiber bin and boundary-shell flags.
struct BoxLocation {
  bool inside = false;
  bool in_shell = false;
  Vec b;
  Vec s;
  std::vector<int> bin;
};

/// V'_{x,eps}: fibers graph(h'_y) over E^u_x(rho0) for y in the transversal
/// sample, stored as discs in the anchor chart whose values include the
/// transversal offset h'_y(0).
struct TransversalBox {
  SplitChart chart;
  double epsilon = 0.0;
  double rho0 = 0.0;
  double requested_rho0 = 0.0;
  bool rho0_shrunk = false;
  double min_fiber_radius = 0.0;   ///< min over fibers of rho_y
  std::vector<UnstableDisc> fibers;
  std::vector<Vec> transversal;    ///< cs-coefficients of h'_y(0)
  std::size_t duplicates = 0;      ///< input discs on an already listed fiber
  double min_separation = 0.0;     ///< min pairwise graph distance between fibers
  BoxOptions options;

  Eigen::Index k() const { return chart.k(); }
  Eigen::Index cs_dim() const { return chart.inverse.rows() - chart.k(); }
  const Vec& anchor() const { return chart.base; }
  Vec cs_coords(const Vec& w) const { return chart.inverse.bottomRows(cs_dim()) * w; }

  std::vector<int> bin_of(const Vec& s, double width) const {
    std::vector<int> key(static_cast<std::size_t>(s.size()));
    for (Eigen::Index i = 0; i < s.size(); ++i) key[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(s(i) / width));
    return key;
  }

  BoxLocation locate(const DynamicalSystem& sys, const Vec& p) const {
    const auto& space = sys.space();
    BoxLocation loc;
    const Vec w = sys.displacement(chart.base, p);
    loc.b = chart.u_coords(w);
    const double ub = space.norm(Vec(chart.unstable * loc.b));
    const double sh = options.shell_width;
    if (ub > rho0 + sh) return loc;
    const Vec c = cs_coords(w);
    // Holonomy along the nearest fiber.
    double best = std::numeric_limits<double>::infinity();
    std::size_t nearest = 0;
    const Vec bc = loc.b.cwiseMax(-fibers.front().half_width).cwiseMin(fibers.front().half_width);
    std::vector<Vec> hb(fibers.size());
    for (std::size_t f = 0; f < fibers.size(); ++f) {
      hb[f] = cs_coords(fibers[f].h(bc));
      const double dist = (c - hb[f]).cwiseAbs().maxCoeff();
      if (dist < best) {
        best = dist;
        nearest = f;
      }
    }
    loc.s = transversal[nearest] + (c - hb[nearest]);
    const double us = space.norm(Vec(chart.center_stable * loc.s));
    loc.in_shell = std::abs(ub - rho0) <= sh || std::abs(us - epsilon) <= sh;
    loc.inside = ub <= rho0 && us <= epsilon;
    if (loc.inside) loc.bin = bin_of(loc.s, options.bin_width);
    return loc;
  }
};

namespace detail {

// Coefficients c on `disc` whose point has u-coefficients b in `chart`.
inline std::optional<Vec> coefficients_over(const DynamicalSystem& sys, const UnstableDisc& disc,
                                            const SplitChart& chart, const Vec& b, Vec c) {
  const Eigen::Index k = disc.k();
  const Mat Au = chart.inverse.topRows(k);
  for (int it = 0; it < 40; ++it) {
    Mat dh;
    const Vec p = sys.translate(disc.base(), Vec(disc.chart.unstable * c + disc.h(c, &dh)));
    const Vec g = Au * sys.displacement(chart.base, p) - b;
    if (!g.allFinite()) return std::nullopt;
    if (g.cwiseAbs().maxCoeff() <= 1e-14 * std::max(1.0, disc.half_width)) return c;
    const Vec step = (Au * (disc.chart.unstable + dh)).fullPivLu().solve(g);
    if (!step.allFinite()) return std::nullopt;
    c -= step;
    if (c.cwiseAbs().maxCoeff() > 4.0 * disc.half_width) return std::nullopt;
  }
  return std::nullopt;
}

// Largest rho such that the disc, seen in `chart`, is a graph over
// E^u_x(rho): the smallest |U b| over the image of the disc's domain boundary.
inline double graph_radius_over(const DynamicalSystem& sys, const UnstableDisc& disc, const SplitChart& chart) {
  const auto& space = sys.space();
  const Eigen::Index k = disc.k();
  double r = std::numeric_limits<double>::infinity();
  const int fine = 4 * (disc.nodes - 1) + 1;
  Eigen::Index count = 1;
  for (Eigen::Index i = 0; i < k; ++i) count *= fine;
  for (Eigen::Index flat = 0; flat < count; ++flat) {
    Vec c(k);
    Eigen::Index rem = flat;
    bool boundary = false;
    for (Eigen::Index i = 0; i < k; ++i) {
      const Eigen::Index idx = rem % fine;
      rem /= fine;
      boundary = boundary || idx == 0 || idx == fine - 1;
      c(i) = -disc.half_width + 2.0 * disc.half_width * static_cast<double>(idx) / (fine - 1);
    }
    if (k > 1) {
      // boundary of the norm ball: scale c onto it
      const double n = space.norm(Vec(disc.chart.unstable * c));
      if (n == 0.0) continue;
      c *= disc.delta / n;
    } else if (!boundary) {
      continue;
    }
    const Vec b = chart.u_coords(sys.displacement(chart.base, disc.point(sys, c)));
    r = std::min(r, space.norm(Vec(chart.unstable * b)));
  }
  return r;
}

}  // namespace detail

/// Builds V'_{x,eps} from unstable discs whose leaves cross Exp_x(E^cs_x(eps)).
/// Each crossing disc is re-expressed as a graph over E^u_x(rho0) in the
/// anchor chart; graphs within same_fiber_tol are merged. rho0 shrinks to
/// 0.95 min rho_y when some fiber is shorter.
inline TransversalBox build_transversal(const DynamicalSystem& sys, const std::vector<UnstableDisc>& discs,
                                        const SplitChart& anchor_chart, double epsilon, double rho0,
                                        const BoxOptions& opt = {}) {
  require(epsilon > 0.0 && rho0 > 0.0, ErrorKind::invalid_input, "epsilon and rho0 must be positive");
  const auto& space = sys.space();
  TransversalBox box;
  box.chart = anchor_chart;
  box.epsilon = epsilon;
  box.rho0 = rho0;
  box.requested_rho0 = rho0;
  box.options = opt;
  const Eigen::Index k = anchor_chart.k();

  struct Candidate {
    const UnstableDisc* disc;
    Vec c0;
    Vec s;
    double radius;
  };
  std::vector<Candidate> candidates;
  for (const auto& disc : discs) {
    if (sys.distance(disc.base(), anchor_chart.base) > 2.0 * disc.delta + epsilon) continue;
    const Vec start = disc.chart.u_coords(sys.displacement(disc.base(), anchor_chart.base));
    const auto c0 = detail::coefficients_over(sys, disc, anchor_chart, Vec::Zero(k), start);
    // Only discs centred near their crossing stand for W^u_rho(y), y on the transversal.
    if (!c0 || !disc.in_domain(space, *c0, 0.5 * disc.delta)) continue;
    const Vec s = box.cs_coords(sys.displacement(anchor_chart.base, disc.point(sys, *c0)));
    if (space.norm(Vec(anchor_chart.center_stable * s)) > epsilon) continue;
    candidates.push_back({&disc, *c0, s, detail::graph_radius_over(sys, disc, anchor_chart)});
  }
  if (candidates.empty()) fail(ErrorKind::coverage, "no unstable disc crosses the transversal at this anchor");

  double min_radius = std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) min_radius = std::min(min_radius, c.radius);
  box.min_fiber_radius = min_radius;
  if (rho0 > min_radius) {
    box.rho0 = 0.95 * min_radius;
    box.rho0_shrunk = true;
  }

  for (const auto& cand : candidates) {
    UnstableDisc fiber = flat_disc(sys, anchor_chart, box.rho0);
    Vec c = cand.c0;
    bool ok = true;
    for (Eigen::Index flat = 0; flat < fiber.node_count() && ok; ++flat) {
      const Vec b = fiber.node_coords(flat);
      const auto cb = detail::coefficients_over(sys, *cand.disc, anchor_chart, b, c);
      if (!cb || !cand.disc->in_domain(space, *cb, cand.disc->delta)) {
        ok = false;
        break;
      }
      fiber.values.col(flat) = anchor_chart.cs_part(sys.displacement(anchor_chart.base, cand.disc->point(sys, *cb)));
      if (k == 1) c = *cb;
    }
    if (!ok) continue;  // corner nodes of k > 1 boxes may leave a disc that still covers E^u_x(rho0)
    double closest = std::numeric_limits<double>::infinity();
    double farthest = 0.0;
    std::size_t match = box.fibers.size();
    for (std::size_t f = 0; f < box.fibers.size(); ++f) {
      double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
      for (Eigen::Index n = 0; n < fiber.node_count(); ++n) {
        if (!fiber.in_domain(space, fiber.node_coords(n), box.rho0)) continue;
        const double dist = space.norm(Vec(fiber.values.col(n) - box.fibers[f].values.col(n)));
        lo = std::min(lo, dist);
        hi = std::max(hi, dist);
      }
      if (hi <= opt.same_fiber_tol) {
        match = f;
        break;
      }
      if (lo <= opt.same_fiber_tol)
        fail(ErrorKind::coherence, "fibers overlap without coinciding (closest " + std::to_string(lo) + ", farthest " +
                                       std::to_string(hi) + ")");
      closest = std::min(closest, lo);
      farthest = std::max(farthest, hi);
    }
    if (match < box.fibers.size()) {
      ++box.duplicates;
      continue;
    }
    box.fibers.push_back(std::move(fiber));
    box.transversal.push_back(box.cs_coords(box.fibers.back().h(Vec::Zero(k))));
  }
  if (box.fibers.empty()) fail(ErrorKind::coverage, "no fiber covers E^u_x(rho0)");
  box.min_separation = std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < box.fibers.size(); ++f)
    for (std::size_t g = f + 1; g < box.fibers.size(); ++g)
      for (Eigen::Index n = 0; n < box.fibers[f].node_count(); ++n)
        box.min_separation =
            std::min(box.min_separation, space.norm(Vec(box.fibers[f].values.col(n) - box.fibers[g].values.col(n))));
  return box;
}

/// Attractor points within `radius` of x (at most `max_points`, in candidate
/// order), with `history` stored past states: Halton points of U pushed
/// `transient` steps, filtered, then recomputed with their histories.
inline AttractorSample attractor_points_near(const DynamicalSystem& sys, const Vec& x, double radius,
                                             std::size_t candidates, std::uint64_t seed, std::size_t transient = 200,
                                             std::size_t history = 64, unsigned workers = 1,
                                             std::size_t max_points = 400) {
  const Vec shift = stream_shift(seed, "attractor-near", sys.dim());
  std::vector<char> hit(candidates, 0);
  parallel_for(candidates, workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      Vec y = sys.trapping_point(halton_point(i, sys.dim(), shift));
      for (std::size_t s = 0; s < transient; ++s) y = sys.apply(y);
      hit[i] = sys.distance(y, x) <= radius ? 1 : 0;
    }
  });
  AttractorSample out;
  for (std::size_t i = 0; i < candidates && out.size() < max_points; ++i) {
    if (!hit[i]) continue;
    Vec y = sys.trapping_point(halton_point(i, sys.dim(), shift));
    Mat states(static_cast<Eigen::Index>(sys.dim()), static_cast<Eigen::Index>(history + 1));
    for (std::size_t s = 0; s <= transient; ++s) {
      if (s + history >= transient) states.col(static_cast<Eigen::Index>(s + history - transient)) = y;
      if (s < transient) y = sys.apply(y);
    }
    out.orbits.push_back(OrbitSegment{states});
  }
  return out;
}

/// Discs at the given orbits; orbits whose disc fails are skipped.
inline std::vector<UnstableDisc> discs_at(const DynamicalSystem& sys, const AttractorSample& sample, double delta,
                                          unsigned workers = 1) {
  std::vector<std::optional<UnstableDisc>> tmp(sample.size());
  parallel_for(sample.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      try {
        tmp[i] = compute_unstable_disc(sys, sample.orbits[i], delta);
      } catch (const Error&) {
      }
    }
  });
  std::vector<UnstableDisc> out;
  for (auto& d : tmp)
    if (d) out.push_back(std::move(*d));
  return out;
}

// ---------------------------------------------------------------------------
// Boundary leak L_n

struct LeakParameters {
  double gamma0 = 1.0;
  double lambda0 = 0.69;
  double eps0 = 0.09;
};

/// (4/3) delta gamma0 e^{-n (lambda0 - eps0)}
inline double leak_threshold(double delta, const LeakParameters& p, int n) {
  return (4.0 / 3.0) * delta * p.gamma0 * std::exp(-static_cast<double>(n) * (p.lambda0 - p.eps0));
}

struct TrimResult {
  EmpiricalMeasure kept;
  double leaked_mass = 0.0;     ///< particle mass removed, before renormalisation
  double shell_mass = 0.0;      ///< lambda_L{d^u(., boundary L) <= threshold}, an upper bound for lambda_L(L_n)
  double threshold = 0.0;
  std::size_t removed = 0;
};

namespace detail {

// Keeps particles not in the sufficient-condition superset of L_n: those
// that do not lie in the box, or whose source is farther than the threshold
// from the boundary of L.
inline std::vector<char> trim_mask(const DynamicalSystem& sys, const EmpiricalMeasure& m, const TransversalBox& box,
                                   const LeakParameters& p, unsigned workers) {
  std::vector<char> keep(m.size(), 1);
  parallel_for(m.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const double t = leak_threshold(m.seed->delta, p, m.generation[i]);
      if (distance_to_boundary(sys, *m.seed, Vec(m.sources.col(static_cast<Eigen::Index>(i)))) > t) continue;
      if (box.locate(sys, m.point(i)).inside) keep[i] = 0;
    }
  });
  return keep;
}

inline EmpiricalMeasure select(const EmpiricalMeasure& m, const std::vector<char>& keep) {
  EmpiricalMeasure out;
  out.seed = m.seed;
  out.generation_count = m.generation_count;
  const std::size_t n = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1));
  out.resize(static_cast<std::size_t>(m.points.rows()), static_cast<std::size_t>(m.k()), n);
  const Eigen::Index k = m.k();
  std::size_t o = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!keep[i]) continue;
    const auto c = static_cast<Eigen::Index>(i), oc = static_cast<Eigen::Index>(o);
    out.points.col(oc) = m.points.col(c);
    out.preimages.col(oc) = m.preimages.col(c);
    out.sources.col(oc) = m.sources.col(c);
    out.frames.middleCols(oc * k, k) = m.frames.middleCols(c * k, k);
    out.weights[o] = m.weights[i];
    out.log_ju[o] = m.log_ju[i];
    out.generation[o] = m.generation[i];
    ++o;
  }
  return out;
}

}  // namespace detail

/// Removes particles of L_n by the sufficient condition d^u(z, boundary L) <=
/// (4/3) delta gamma0 e^{-n(lambda0 - eps0)} (restricted to particles that
/// land in the box, as L_n is), then renormalises.
inline TrimResult trim_boundary_leak(const DynamicalSystem& sys, const EmpiricalMeasure& m, const TransversalBox& box,
                                     const LeakParameters& p, unsigned workers = 1) {
  TrimResult r;
  const auto keep = detail::trim_mask(sys, m, box, p, workers);
  std::vector<double> lost;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!keep[i]) lost.push_back(m.weights[i]);
  r.removed = lost.size();
  r.leaked_mass = compensated_sum(lost) / m.total_mass();
  r.threshold = leak_threshold(m.seed->delta, p, m.generation_count);
  r.shell_mass = boundary_shell_mass(sys, *m.seed, r.threshold);
  r.kept = detail::select(m, keep);
  if (r.kept.size() > 0) normalize_weights(r.kept);
  return r;
}

/// Exact membership in L_n for k = 1: the source a lies in L_n iff f^n(a)
/// is in the box but the piece of f^n L through it does not reach both ends
/// of E^u_x(rho0). The two ends are located on f^n L by marching the source
/// coefficient outward (forward iteration only) until the box coordinate b
/// crosses +-rho0; reaching the edge of L first means partial coverage.
/// Returns nullopt when the image is not in the box.
inline std::optional<bool> in_leak_set(const DynamicalSystem& sys, const SeedDisc& seed, const TransversalBox& box,
                                       double a, int n) {
  require(seed.k() == 1, ErrorKind::invalid_input, "exact leak membership is implemented for k = 1");
  const auto& d = seed.disc();
  const double w = d.half_width;
  auto image = [&](double c) {
    Vec p = d.point(sys, Vec::Constant(1, c));
    for (int s = 0; s < n; ++s) p = sys.apply(p);
    return p;
  };
  auto coord = [&](double c) { return box.chart.u_coords(sys.displacement(box.anchor(), image(c)))(0); };
  const auto loc = box.locate(sys, image(a));
  if (!loc.inside) return std::nullopt;
  const double b0 = loc.b(0);
  // Local expansion of the coefficient along f^n L.
  // Shrink the difference step until the image moves by less than 1e-3.
  double h = 0.25 * w, slope = 0.0;
  for (int it = 0; it < 200; ++it) {
    const double lo = std::max(a - h, -w), hi = std::min(a + h, w);
    slope = (coord(hi) - coord(lo)) / (hi - lo);
    if (std::abs(slope) * h < 1e-3) break;
    h *= 0.5;
  }
  if (!std::isfinite(slope) || slope == 0.0) return true;
  for (int side : {-1, 1}) {
    // Walk towards b = side * rho0 in steps of a quarter of the linear prediction.
    const double target = side * box.rho0;
    const double dir = (target - b0) / slope > 0 ? 1.0 : -1.0;
    const double s0 = std::abs((target - b0) / slope);
    double prev = b0;
    bool reached = false;
    for (int j = 1; j <= 64; ++j) {
      const double c = a + dir * 0.25 * s0 * j;
      if (c < -w || c > w) break;
      const double bj = coord(c);
      if ((bj - prev) * (target - b0) < 0.0) break;  // left the fiber piece (wrapped)
      if ((bj - target) * side >= 0.0) {
        reached = true;
        break;
      }
      prev = bj;
    }
    if (!reached) return true;
  }
  return false;
}

/// lambda_L(L_n) for k = 1, estimated by sampling the sufficient-condition
/// shell (which contains L_n) with `samples` equispaced sources and applying
/// in_leak_set; returns shell mass times the leak fraction.
inline double leak_mass_exact(const DynamicalSystem& sys, const SeedDisc& seed, const TransversalBox& box,
                              const LeakParameters& p, int n, std::size_t samples, unsigned workers = 1) {
  const double t = leak_threshold(seed.delta, p, n);
  const double shell = boundary_shell_mass(sys, seed, t);
  if (shell <= 0.0) return 0.0;
  const double w = seed.half_width();
  // The shell is two end segments of coefficient length shell * w each.
  const double len = shell * w;
  std::vector<char> hit(samples, 0);
  parallel_for(samples, workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const double u = (static_cast<double>(i / 2) + 0.5) / static_cast<double>((samples + 1) / 2);
      const double a = (i % 2 == 0) ? -w + u * len : w - u * len;
      const auto r = in_leak_set(sys, seed, box, a, n);
      hit[i] = r && *r ? 1 : 0;
    }
  });
  const auto count = static_cast<double>(std::count(hit.begin(), hit.end(), 1));
  return shell * count / static_cast<double>(samples);
}

/// Longest fiber of the box, measured along the leaf (k = 1) or as the
/// largest chord between node points (k > 1).
inline double max_fiber_length(const DynamicalSystem& sys, const TransversalBox& box) {
  double best = 0.0;
  for (const auto& f : box.fibers) {
    if (f.k() == 1) {
      best = std::max(best, disc_arclength(f, sys.space(), Vec::Constant(1, -box.rho0), Vec::Constant(1, box.rho0)));
      continue;
    }
    for (Eigen::Index a = 0; a < f.node_count(); ++a)
      for (Eigen::Index b = a + 1; b < f.node_count(); ++b)
        best = std::max(best, sys.space().norm(Vec(f.values.col(a) - f.values.col(b) +
                                                   f.chart.unstable * (f.node_coords(a) - f.node_coords(b)))));
  }
  return best;
}

/// lambda_L of the sources within leaf distance `reach` of f^n(boundary L)
/// after n steps, for k = 1. A point of L_n sits on a fiber of the box that
/// f^n L does not cover, so its image is within one fiber length of
/// f^n(boundary L): with reach = max_fiber_length this bounds lambda_L(L_n)
/// for the box. Each end is found by bisection on the arclength of the
/// image of an end segment (polyline through 257 forward images).
inline double boundary_reach_mass(const DynamicalSystem& sys, const SeedDisc& seed, double reach, int n) {
  require(seed.k() == 1, ErrorKind::invalid_input, "boundary reach is implemented for k = 1");
  const auto& d = seed.disc();
  const double w = d.half_width;
  auto image = [&](double c) {
    Vec p = d.point(sys, Vec::Constant(1, c));
    for (int s = 0; s < n; ++s) p = sys.apply(p);
    return p;
  };
  auto image_length = [&](double end, double len) {
    constexpr int kPieces = 256;
    double total = 0.0;
    Vec prev = image(end);
    for (int i = 1; i <= kPieces; ++i) {
      const Vec next = image(end - std::copysign(len * i / kPieces, end));
      total += sys.distance(prev, next);
      prev = next;
    }
    return total;
  };
  double fraction = 0.0;
  for (double end : {-w, w}) {
    if (image_length(end, w) <= reach) {
      fraction += 0.5;
      continue;
    }
    double lo = 0.0, hi = w;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      (image_length(end, mid) <= reach ? lo : hi) = mid;
    }
    fraction += 0.5 * hi / w;
  }
  return std::min(1.0, fraction);
}

struct LeakDecay {
  std::vector<double> mass;    ///< index n-1 for n = 1..n_max
  double rate = 0.0;           ///< least-squares slope of -log mass over the unsaturated range
  int first = 0, last = 0;     ///< fitted generations
};

/// Exponential fit of boundary_reach_mass for n = 1..n_max, over the
/// generations where it is below 1.
inline LeakDecay leak_decay(const DynamicalSystem& sys, const SeedDisc& seed, double reach, int n_max) {
  LeakDecay out;
  double sj = 0, sl = 0, sjj = 0, sjl = 0;
  int count = 0;
  for (int n = 1; n <= n_max; ++n) {
    const double s = boundary_reach_mass(sys, seed, reach, n);
    out.mass.push_back(s);
    if (s >= 1.0 || s <= 0.0) continue;
    if (out.first == 0) out.first = n;
    out.last = n;
    const double l = std::log(s);
    sj += n;
    sl += l;
    sjj += static_cast<double>(n) * n;
    sjl += n * l;
    ++count;
  }
  require(count >= 2, ErrorKind::invalid_input, "leak sequence has fewer than two unsaturated terms");
  out.rate = -(count * sjl - sj * sl) / (count * sjj - sj * sj);
  return out;
}

// ---------------------------------------------------------------------------
// Cesaro averages

struct CesaroResult {
  EmpiricalMeasure measure;
  std::vector<double> leaked;       ///< particle mass fraction removed per generation
  std::vector<double> shell_mass;   ///< lambda_L bound per generation
  std::vector<std::size_t> per_generation;
  double retained_mass = 0.0;       ///< mass of (1/n) sum f^k(lambda_L|L\L_k) before normalisation
};

/// (1/n) sum_{k<n} f^k(lambda_L restricted to L \ L_k), normalised. Each
/// generation gets an equal share of the particles, seeded from its own
/// scrambled low-discrepancy stream; kept particles of generation k weigh
/// 1 / (n N_k) before the final normalisation.
inline CesaroResult cesaro_average(const DynamicalSystem& sys, std::shared_ptr<const SeedDisc> seed,
                                   const TransversalBox& box, int n, std::size_t n_particles, const LeakParameters& p,
                                   std::uint64_t stream_seed, unsigned workers = 1) {
  require(n >= 1, ErrorKind::invalid_input, "Cesaro horizon must be positive");
  require(n_particles >= static_cast<std::size_t>(n), ErrorKind::invalid_input, "fewer particles than generations");
  const auto per = static_cast<std::size_t>(n_particles / static_cast<std::size_t>(n));
  const std::size_t extra = n_particles % static_cast<std::size_t>(n);
  CesaroResult out;
  EmpiricalMeasure& m = out.measure;
  m.seed = seed;
  m.generation_count = n - 1;
  m.resize(sys.dim(), static_cast<std::size_t>(seed->k()), n_particles);
  std::vector<std::size_t> start(static_cast<std::size_t>(n) + 1, 0);
  for (int g = 0; g < n; ++g) {
    const std::size_t count = per + (static_cast<std::size_t>(g) < extra ? 1 : 0);
    out.per_generation.push_back(count);
    start[static_cast<std::size_t>(g) + 1] = start[static_cast<std::size_t>(g)] + count;
    const auto coeffs = seed_coefficients(sys, *seed, count, stream_seed, "seed-measure", static_cast<std::uint64_t>(g));
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t i = start[static_cast<std::size_t>(g)] + j;
      place_on_seed(sys, *seed, m, i, coeffs[j]);
      m.weights[i] = 1.0 / (static_cast<double>(n) * static_cast<double>(count));
    }
  }
  // Particle i of generation g is pushed g times.
  std::vector<int> target(n_particles);
  for (int g = 0; g < n; ++g)
    for (std::size_t i = start[static_cast<std::size_t>(g)]; i < start[static_cast<std::size_t>(g) + 1]; ++i) target[i] = g;
  parallel_for(n_particles, workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i)
      for (int s = 0; s < target[i]; ++s) step_particle(sys, m, i);
  });
  const auto keep = detail::trim_mask(sys, m, box, p, workers);
  for (int g = 0; g < n; ++g) {
    std::vector<double> lost;
    for (std::size_t i = start[static_cast<std::size_t>(g)]; i < start[static_cast<std::size_t>(g) + 1]; ++i)
      if (!keep[i]) lost.push_back(1.0);
    out.leaked.push_back(compensated_sum(lost) / static_cast<double>(out.per_generation[static_cast<std::size_t>(g)]));
    out.shell_mass.push_back(boundary_shell_mass(sys, *seed, leak_threshold(seed->delta, p, g)));
  }
  m = detail::select(m, keep);
  out.retained_mass = m.total_mass();
  normalize_weights(m);
  return out;
}

/// The Cesaro average at a shorter horizon, read off a longer one: trimming
/// and seeding depend only on a particle's generation, so generations below
/// `horizon` of a horizon-n result (renormalised) are the horizon-`horizon`
/// average built from the same per-generation particle sets.
inline EmpiricalMeasure cesaro_prefix(const EmpiricalMeasure& m, int horizon) {
  require(horizon >= 1 && horizon <= m.generation_count + 1, ErrorKind::invalid_input,
          "prefix horizon outside [1, stored horizon]");
  std::vector<char> keep(m.size(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) keep[i] = m.generation[i] < horizon ? 1 : 0;
  EmpiricalMeasure out = detail::select(m, keep);
  out.generation_count = horizon - 1;
  require(out.size() > 0, ErrorKind::invalid_input, "prefix keeps no particles");
  normalize_weights(out);
  return out;
}

// ---------------------------------------------------------------------------
// Marginals

/// Histogram of a scalar observable, weights summed per bin in index order.
inline std::vector<double> weighted_histogram(const EmpiricalMeasure& m, const std::function<double(const Vec&)>& obs,
                                              double lo, double hi, std::size_t bins) {
  std::vector<CompensatedAccumulator> acc(bins);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double v = obs(m.point(i));
    auto b = static_cast<std::ptrdiff_t>(std::floor((v - lo) / (hi - lo) * static_cast<double>(bins)));
    b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
    acc[static_cast<std::size_t>(b)].add(m.weights[i]);
  }
  std::vector<double> out(bins);
  for (std::size_t b = 0; b < bins; ++b) out[b] = acc[b].value();
  return out;
}

/// Total variation between two bin-mass vectors (each summing to 1).
inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  require(p.size() == q.size(), ErrorKind::contract, "histograms differ in size");
  std::vector<double> d(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) d[i] = std::abs(p[i] - q[i]);
  return 0.5 * compensated_sum(d);
}

/// Ulam approximation of the invariant density of a circle map t -> g(t)
/// (mod 1): transition matrix from `samples` points per bin, fixed vector by
/// power iteration. Returns bin masses.
inline std::vector<double> ulam_invariant_density(const std::function<double(double)>& g, std::size_t bins,
                                                  std::size_t samples = 64, int iterations = 2000) {
  std::vector<std::vector<std::pair<std::size_t, double>>> rows(bins);
  for (std::size_t i = 0; i < bins; ++i) {
    std::map<std::size_t, double> row;
    for (std::size_t s = 0; s < samples; ++s) {
      const double t = (static_cast<double>(i) + (static_cast<double>(s) + 0.5) / static_cast<double>(samples)) /
                       static_cast<double>(bins);
      double v = g(t);
      v -= std::floor(v);
      row[std::min(bins - 1, static_cast<std::size_t>(v * static_cast<double>(bins)))] += 1.0 / static_cast<double>(samples);
    }
    rows[i].assign(row.begin(), row.end());
  }
  std::vector<double> p(bins, 1.0 / static_cast<double>(bins)), next(bins);
  for (int it = 0; it < iterations; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < bins; ++i)
      for (const auto& [j, w] : rows[i]) next[j] += p[i] * w;
    const double total = compensated_sum(next);
    for (auto& v : next) v /= total;
    p.swap(next);
  }
  return p;
}

// ---------------------------------------------------------------------------
// The density p_n

struct DensityOptions {
  Eigen::Index horizon = 30;   ///< truncation m of the backward products
  int quadrature_nodes = 16;   ///< Gauss-Legendre nodes per unstable axis
  Eigen::Index orbit_margin = 40;
  double disc_delta = 0.0;     ///< radius of the particle's own disc; 0 picks max(seed delta, 2.2 rho0)
};

struct DensityEvaluation {
  double p = 0.0;               ///< p_n(z)
  double q = 0.0;               ///< numerator at z
  double average = 0.0;         ///< normalised fiber integral of the numerator
  double q_min = 0.0, q_max = 0.0;
  Eigen::Index horizon = 0;     ///< m = min(n, truncation)
  bool truncated = false;
  int generation = 0;
};

namespace detail {

inline std::pair<std::vector<double>, std::vector<double>> gauss_legendre(int n) {
  std::vector<double> x(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double z = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = z;
      for (int j = 2; j <= n; ++j) {
        const double p2 = ((2.0 * j - 1.0) * z * p1 - (j - 1.0) * p0) / j;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (z * p1 - p0) / (z * z - 1.0);
      const double dz = p1 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16) break;
    }
    x[static_cast<std::size_t>(i)] = z;
    w[static_cast<std::size_t>(i)] = 2.0 / ((1.0 - z * z) * dp * dp);
  }
  return {x, w};
}

// log of |det_{eta_w, eta_target}(pi|E^u_w)| * prod_{j=1}^m 1/J^u(w_{-j}),
// with E^u along w's orbit from power iteration; `target_pi`, `eta_target`
// give the projection at level m (the seed chart when the itinerary reaches
// L, the chart at z_{-m} when truncated).
inline double log_numerator(const DynamicalSystem& sys, const BasisField& field, const OrbitSegment& w, Eigen::Index m,
                            const Mat& target_pi, const UnitBasis& eta_target, const Mat& box_pi,
                            const UnitBasis& eta_box) {
  const auto frames = orbit_unstable_frames(sys, w, m);
  std::vector<UnitBasis> eta;
  eta.reserve(static_cast<std::size_t>(m + 1));
  for (Eigen::Index j = 0; j <= m; ++j) eta.push_back(field.basis(sys, w.back(j), frames[static_cast<std::size_t>(j)]));
  CompensatedAccumulator acc;
  for (Eigen::Index j = 1; j <= m; ++j)
    acc.add(-std::log(std::abs(det_between_bases(sys.derivative(w.back(j)), eta[static_cast<std::size_t>(j)],
                                                 eta[static_cast<std::size_t>(j - 1)], 1e-6))));
  acc.add(std::log(std::abs(det_between_bases(target_pi, eta[static_cast<std::size_t>(m)], eta_target, 1e-6))));
  acc.add(-std::log(std::abs(det_between_bases(box_pi, eta.front(), eta_box, 1e-6))));
  return acc.value();
}

}  // namespace detail

/// p_n(z) = numerator(z) / (normalised integral of the numerator over the
/// fiber W^u_{x,rho0} through z), the numerator being
///   det_{eta_{z_{-m}}, eta_ref}(pi^u_ref | E^u_{z_{-m}}) / det_{eta_z, eta_x}(pi^u_x | E^u_z) * prod_{k=1}^m 1/J^u(z_{-k}).
/// For m = n the reference is xhat (the itinerary reaches L); when the
/// product is truncated at m < n the reference is z_{-m}, which keeps the
/// value independent of the basis field. lambda^u_y is normalised on the
/// fiber, so p_n integrates to 1. The fiber integral uses Gauss-Legendre
/// nodes in the anchor's u-coefficients; the fiber through z is the disc
/// W^u_delta(z) computed along z's itinerary, and nodes are pulled back
/// along that disc chain.
inline DensityEvaluation density_pn(const DynamicalSystem& sys, const BasisField& field, const TransversalBox& box,
                                    const EmpiricalMeasure& m, std::size_t i, const LeakParameters& leak,
                                    const DensityOptions& opt = {}) {
  require(i < m.size(), ErrorKind::contract, "particle index out of range");
  const auto& space = sys.space();
  const SeedDisc& seed = *m.seed;
  const int n = m.generation[i];
  const Vec z = m.point(i);
  require(box.locate(sys, z).inside, ErrorKind::contract, "particle is not in the box");
  if (distance_to_boundary(sys, seed, Vec(m.sources.col(static_cast<Eigen::Index>(i)))) <=
      leak_threshold(seed.delta, leak, n))
    fail(ErrorKind::partial_fiber, "particle lies on a fiber that f^n L may not cover (source near the boundary of L)");

  DensityEvaluation out;
  out.generation = n;
  const Eigen::Index mm = std::min<Eigen::Index>(n, opt.horizon);
  out.horizon = mm;
  out.truncated = mm < n;
  const OrbitSegment oz = particle_orbit(sys, m, i, mm + opt.orbit_margin);
  DiscOptions dopt;
  dopt.delta = opt.disc_delta > 0.0 ? opt.disc_delta : std::max(seed.delta, 2.2 * box.rho0);
  dopt.keep_levels = mm;
  const DiscChain chain = compute_disc_chain(sys, oz, dopt);
  const UnstableDisc& dz = chain.at(0);

  const Eigen::Index k = box.k();
  const Mat box_pi = box.chart.projector_u();
  const UnitBasis eta_box = field.basis(sys, box.anchor(), box.chart.unstable);
  Mat target_pi;
  UnitBasis eta_target;
  if (out.truncated) {
    const auto& ref = chain.at(mm).chart;
    target_pi = ref.projector_u();
    eta_target = field.basis(sys, ref.base, ref.unstable);
  } else {
    const auto& ref = seed.disc().chart;
    target_pi = ref.projector_u();
    eta_target = field.basis(sys, ref.base, ref.unstable);
  }

  auto log_q = [&](const OrbitSegment& w) {
    return detail::log_numerator(sys, field, w, mm, target_pi, eta_target, box_pi, eta_box);
  };
  const double lqz = log_q(oz);

  // Quadrature over E^u_x(rho0) (coefficient box with the norm-ball indicator).
  const auto [gx, gw] = detail::gauss_legendre(opt.quadrature_nodes);
  const double hw = box.fibers.front().half_width;
  Eigen::Index count = 1;
  for (Eigen::Index a = 0; a < k; ++a) count *= opt.quadrature_nodes;
  const Vec cz = dz.chart.u_coords(sys.displacement(dz.base(), z));
  std::vector<double> ratios, weights;
  for (Eigen::Index flat = 0; flat < count; ++flat) {
    Vec b(k);
    double weight = 1.0;
    Eigen::Index rem = flat;
    for (Eigen::Index a = 0; a < k; ++a) {
      const auto idx = static_cast<std::size_t>(rem % opt.quadrature_nodes);
      rem /= opt.quadrature_nodes;
      b(a) = hw * gx[idx];
      weight *= gw[idx];
    }
    if (!box.fibers.front().in_domain(space, b, box.rho0)) continue;
    const auto c = detail::coefficients_over(sys, dz, box.chart, b, cz);
    if (!c || !dz.in_domain(space, *c, dz.delta))
      fail(ErrorKind::partial_fiber, "fiber through the particle leaves its local unstable disc");
    OrbitSegment ow = oz;
    ow.states.rightCols(mm + 1) = pulled_back_orbit(sys, chain, *c, mm).states;
    if (!out.truncated) {
      // The pulled-back node must lie on L.
      const Vec src = ow.back(mm);
      const auto& sd = seed.disc();
      const Vec a = sd.chart.u_coords(sys.displacement(sd.base(), src));
      if (!sd.in_domain(space, a, seed.delta))
        fail(ErrorKind::partial_fiber, "f^n L does not cover the fiber through the particle");
    }
    ratios.push_back(std::exp(log_q(ow) - lqz));
    weights.push_back(weight);
  }
  require(!weights.empty(), ErrorKind::contract, "no quadrature nodes inside E^u_x(rho0)");
  std::vector<double> num(ratios.size());
  for (std::size_t j = 0; j < ratios.size(); ++j) num[j] = ratios[j] * weights[j];
  const double avg_ratio = compensated_sum(num) / compensated_sum(weights);
  out.q = std::exp(lqz);
  out.average = avg_ratio * out.q;
  out.p = 1.0 / avg_ratio;
  const auto [mn, mx] = std::minmax_element(ratios.begin(), ratios.end());
  out.q_min = std::min(1.0, *mn) * out.q;
  out.q_max = std::max(1.0, *mx) * out.q;
  return out;
}

/// Bound for p_n from measured constants: the numerator ratio between two
/// fiber points is at most P times the distortion sup, and C >= that sup,
/// so p_n lies in [1/(P C), P C]. P is the largest ratio of projection
/// factors det(pi^u_x | E^u_w) over the box fibers.
inline double projection_ratio_bound(const DynamicalSystem& sys, const BasisField& field, const TransversalBox& box) {
  const UnitBasis eta_box = field.basis(sys, box.anchor(), box.chart.unstable);
  const Mat pi = box.chart.projector_u();
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& f : box.fibers) {
    for (Eigen::Index n = 0; n < f.node_count(); ++n) {
      const Vec b = f.node_coords(n);
      if (!f.in_domain(sys.space(), b, box.rho0)) continue;
      Mat dh;
      f.h(b, &dh);
      const Mat T = f.chart.unstable + dh;
      const Vec p = f.point(sys, b);
      const double v = std::abs(det_between_bases(pi, field.basis(sys, p, T), eta_box, 1e-6));
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  return hi / lo;
}

// ---------------------------------------------------------------------------
// Cylinders and conditional measures

/// A_{S,F}: S a set of transversal bins, F a finite union of coefficient
/// boxes in E^u_x(rho0) (each given by lower and upper corners).
struct CylinderSet {
  std::vector<std::vector<int>> bins;
  std::vector<std::pair<Vec, Vec>> boxes;

  bool contains_bin(const std::vector<int>& b) const { return std::find(bins.begin(), bins.end(), b) != bins.end(); }
  bool contains_u(const Vec& b) const {
    for (const auto& [lo, hi] : boxes)
      if ((b.array() >= lo.array()).all() && (b.array() < hi.array()).all()) return true;
    return false;
  }
};

/// Box coordinates of every particle (computed once, reused by reports).
struct BoxIndex {
  std::vector<std::size_t> members;  ///< particles inside the box
  std::vector<BoxLocation> where;    ///< same order
  double box_mass = 0.0;
  double shell_mass = 0.0;           ///< mass in the boundary shell, as a fraction of the total
};

inline BoxIndex index_box(const DynamicalSystem& sys, const EmpiricalMeasure& m, const TransversalBox& box,
                          unsigned workers = 1) {
  std::vector<BoxLocation> loc(m.size());
  parallel_for(m.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) loc[i] = box.locate(sys, m.point(i));
  });
  BoxIndex idx;
  std::vector<double> in, shell;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (loc[i].in_shell) shell.push_back(m.weights[i]);
    if (!loc[i].inside) continue;
    idx.members.push_back(i);
    in.push_back(m.weights[i]);
    idx.where.push_back(std::move(loc[i]));
  }
  idx.box_mass = compensated_sum(in);
  idx.shell_mass = compensated_sum(shell);
  return idx;
}

/// Total weight of particles in A_{S,F}.
inline double cylinder_measure(const EmpiricalMeasure& m, const BoxIndex& idx, const CylinderSet& cyl) {
  std::vector<double> w;
  for (std::size_t j = 0; j < idx.members.size(); ++j)
    if (cyl.contains_bin(idx.where[j].bin) && cyl.contains_u(idx.where[j].b)) w.push_back(m.weights[idx.members[j]]);
  return compensated_sum(w);
}

/// Lebesgue fraction of F inside E^u_x(rho0), from a fine tensor grid.
inline double base_fraction(const DynamicalSystem& sys, const TransversalBox& box, const CylinderSet& cyl,
                            int per_axis = 512) {
  const Eigen::Index k = box.k();
  const double hw = box.fibers.front().half_width;
  Eigen::Index count = 1;
  for (Eigen::Index a = 0; a < k; ++a) count *= per_axis;
  std::size_t inside = 0, hit = 0;
  for (Eigen::Index flat = 0; flat < count; ++flat) {
    Vec b(k);
    Eigen::Index rem = flat;
    for (Eigen::Index a = 0; a < k; ++a) {
      b(a) = -hw + 2.0 * hw * (static_cast<double>(rem % per_axis) + 0.5) / per_axis;
      rem /= per_axis;
    }
    if (!box.fibers.front().in_domain(sys.space(), b, box.rho0)) continue;
    ++inside;
    if (cyl.contains_u(b)) ++hit;
  }
  return inside ? static_cast<double>(hit) / static_cast<double>(inside) : 0.0;
}

struct FiberReport {
  std::vector<int> bin;
  std::size_t particles = 0;
  double mass = 0.0;          ///< nu of the fiber (fraction of box mass)
  double ratio_min = 0.0;     ///< min over histogram bins of conditional mass / lambda mass
  double ratio_max = 0.0;
  double ks = 0.0;            ///< KS distance of the conditional law of b_0 to the normalised Lebesgue law
  double largest_atom = 0.0;  ///< largest single-particle share of the fiber mass
  double pn_min = 1.0, pn_max = 1.0;  ///< over evaluated particles (when any)
  std::size_t pn_evaluated = 0;
  bool within = true;
};

struct ConditionalReport {
  std::vector<FiberReport> fibers;
  std::size_t skipped = 0;           ///< fibers with fewer than min_particles
  double C = 0.0;
  double box_mass = 0.0;
  double shell_mass = 0.0;
  double bin_width = 0.0;
  bool atom_found = false;
  std::string verdict;               ///< "consistent", "inconsistent" or "inconclusive"
  std::size_t violations() const {
    return static_cast<std::size_t>(std::count_if(fibers.begin(), fibers.end(), [](const FiberReport& f) { return !f.within; }));
  }
};

struct ConditionalOptions {
  std::size_t min_particles = 200;
  std::size_t per_histogram_bin = 50;  ///< particles per histogram bin (8 to 32 bins per axis)
  double bin_width = 0.0;              ///< 0: the box's own bin width
};

/// Per transversal bin: histogram of the conditional measure in
/// u-coefficients against normalised Lebesgue measure on E^u_x(rho0).
/// Verdict "consistent" iff every retained fiber's histogram ratio lies in
/// [1/(2C), 2C] and no particle carries more than 5 C / (histogram bins) of
/// its fiber's mass (an atom heavier than any density bounded by 5C allows
/// in one histogram bin); "inconclusive" when no fiber is retained.
inline ConditionalReport conditional_density_report(const DynamicalSystem& sys, const EmpiricalMeasure& m,
                                                    const TransversalBox& box, const BoxIndex& idx, double C,
                                                    const ConditionalOptions& opt = {},
                                                    const std::map<std::size_t, double>* pn_values = nullptr) {
  ConditionalReport rep;
  rep.C = C;
  rep.box_mass = idx.box_mass;
  rep.shell_mass = idx.shell_mass;
  rep.bin_width = opt.bin_width > 0.0 ? opt.bin_width : box.options.bin_width;
  const Eigen::Index k = box.k();
  std::map<std::vector<int>, std::vector<std::size_t>> groups;  // positions in idx
  for (std::size_t j = 0; j < idx.members.size(); ++j) groups[box.bin_of(idx.where[j].s, rep.bin_width)].push_back(j);
  const double hw = box.fibers.front().half_width;
  for (const auto& [key, list] : groups) {
    if (list.size() < opt.min_particles) {
      ++rep.skipped;
      continue;
    }
    FiberReport fr;
    fr.bin = key;
    fr.particles = list.size();
    std::vector<double> w;
    for (auto j : list) w.push_back(m.weights[idx.members[j]]);
    const double fiber_mass = compensated_sum(w);
    fr.mass = fiber_mass / idx.box_mass;
    const auto per_axis_target = std::pow(static_cast<double>(list.size()) / static_cast<double>(opt.per_histogram_bin),
                                          1.0 / static_cast<double>(k));
    const int per_axis = std::clamp(static_cast<int>(per_axis_target), 8, 32);
    Eigen::Index cells = 1;
    for (Eigen::Index a = 0; a < k; ++a) cells *= per_axis;
    // Lebesgue fraction of each histogram cell inside E^u_x(rho0).
    std::vector<double> leb(static_cast<std::size_t>(cells), 0.0);
    {
      const int sub = k == 1 ? 1 : 8;
      Eigen::Index fine = 1;
      for (Eigen::Index a = 0; a < k; ++a) fine *= per_axis * sub;
      double total = 0.0;
      for (Eigen::Index flat = 0; flat < fine; ++flat) {
        Vec b(k);
        Eigen::Index rem = flat, cell = 0, stride = 1;
        for (Eigen::Index a = 0; a < k; ++a) {
          const Eigen::Index t = rem % (per_axis * sub);
          rem /= per_axis * sub;
          b(a) = -hw + 2.0 * hw * (static_cast<double>(t) + 0.5) / (per_axis * sub);
          cell += stride * (t / sub);
          stride *= per_axis;
        }
        if (k > 1 && !box.fibers.front().in_domain(sys.space(), b, box.rho0)) continue;
        leb[static_cast<std::size_t>(cell)] += 1.0;
        total += 1.0;
      }
      for (auto& v : leb) v /= total;
    }
    std::vector<std::vector<double>> cell_w(static_cast<std::size_t>(cells));
    std::vector<std::pair<double, double>> first_axis;  // (b_0, weight)
    for (auto j : list) {
      const Vec& b = idx.where[j].b;
      Eigen::Index cell = 0, stride = 1;
      for (Eigen::Index a = 0; a < k; ++a) {
        const int t = std::clamp(static_cast<int>(std::floor((b(a) + hw) / (2.0 * hw) * per_axis)), 0, per_axis - 1);
        cell += stride * t;
        stride *= per_axis;
      }
      const double wt = m.weights[idx.members[j]];
      cell_w[static_cast<std::size_t>(cell)].push_back(wt);
      first_axis.emplace_back(b(0), wt);
      fr.largest_atom = std::max(fr.largest_atom, wt / fiber_mass);
    }
    fr.ratio_min = std::numeric_limits<double>::infinity();
    fr.ratio_max = 0.0;
    for (Eigen::Index c = 0; c < cells; ++c) {
      const double l = leb[static_cast<std::size_t>(c)];
      if (l <= 0.0) continue;
      const double r = compensated_sum(cell_w[static_cast<std::size_t>(c)]) / fiber_mass / l;
      fr.ratio_min = std::min(fr.ratio_min, r);
      fr.ratio_max = std::max(fr.ratio_max, r);
    }
    // KS on the first coefficient against its Lebesgue marginal (uniform for k = 1).
    std::sort(first_axis.begin(), first_axis.end());
    double cum = 0.0;
    for (const auto& [b0, wt] : first_axis) {
      const double ref = (b0 + hw) / (2.0 * hw);
      fr.ks = std::max(fr.ks, std::abs(cum - ref));
      cum += wt / fiber_mass;
      fr.ks = std::max(fr.ks, std::abs(cum - ref));
    }
    if (pn_values) {
      for (auto j : list) {
        const auto it = pn_values->find(idx.members[j]);
        if (it == pn_values->end()) continue;
        if (fr.pn_evaluated == 0) fr.pn_min = fr.pn_max = it->second;
        fr.pn_min = std::min(fr.pn_min, it->second);
        fr.pn_max = std::max(fr.pn_max, it->second);
        ++fr.pn_evaluated;
      }
    }
    const bool atom = fr.largest_atom > 5.0 * C / static_cast<double>(cells);
    rep.atom_found = rep.atom_found || atom;
    fr.within = !atom && fr.ratio_min >= 1.0 / (2.0 * C) && fr.ratio_max <= 2.0 * C;
    rep.fibers.push_back(std::move(fr));
  }
  if (rep.fibers.empty())
    rep.verdict = "inconclusive";
  else
    rep.verdict = rep.violations() == 0 ? "consistent" : "inconsistent";
  return rep;
}

struct RefinementReport {
  std::vector<ConditionalReport> levels;  ///< level 1 is the base bin width
  bool monotone = true;                   ///< violations never increase with refinement
  bool stable = true;                     ///< every level consistent (or inconclusive after starvation)
};

/// Conditional reports for dyadic refinements of the transversal bins.
inline RefinementReport partition_refinement_check(const DynamicalSystem& sys, const EmpiricalMeasure& m,
                                                   const TransversalBox& box, const BoxIndex& idx, double C, int levels,
                                                   ConditionalOptions opt = {}) {
  require(levels >= 3, ErrorKind::invalid_input, "need at least three refinement levels");
  RefinementReport rep;
  const double base = opt.bin_width > 0.0 ? opt.bin_width : box.options.bin_width;
  for (int l = 0; l < levels; ++l) {
    opt.bin_width = base / static_cast<double>(1 << l);
    rep.levels.push_back(conditional_density_report(sys, m, box, idx, C, opt));
    if (l > 0 && rep.levels[static_cast<std::size_t>(l)].violations() > rep.levels[static_cast<std::size_t>(l - 1)].violations())
      rep.monotone = false;
    if (rep.levels.back().verdict == "inconsistent") rep.stable = false;
  }
  return rep;
}

}  // namespace srblab
