#pragma once

// Local unstable discs W^u_delta(x) = x + graph(h_x), h_x : E^u_x(delta) -> E^cs_x,
// computed by graph transforms along stored backward orbits.

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "json.hpp"
#include "srblab/common.hpp"
#include "srblab/normed_linalg.hpp"
#include "srblab/system.hpp"

namespace srblab {

inline constexpr int kDiscNodes = 33;
inline constexpr double kMaxSlope = 1.0 / 3.0;

/// Affine chart at a point: x + U a + S b with U, S unit frames of E^u, E^cs.
struct SplitChart {
  Vec base;
  Mat unstable;       ///< d x k
  Mat center_stable;  ///< d x (d-k)
  Mat inverse;        ///< inverse of [U S]; first k rows give u-coordinates

  Eigen::Index k() const { return unstable.cols(); }
  Vec u_coords(const Vec& w) const { return inverse.topRows(k()) * w; }
  /// pi^cs w as an ambient vector.
  Vec cs_part(const Vec& w) const { return center_stable * (inverse.bottomRows(inverse.rows() - k()) * w); }
  Mat projector_u() const { return unstable * inverse.topRows(k()); }
  Mat projector_cs() const { return center_stable * inverse.bottomRows(inverse.rows() - k()); }
};

inline SplitChart make_chart(Vec base, Mat unstable, Mat center_stable) {
  SplitChart c{std::move(base), std::move(unstable), std::move(center_stable), {}};
  Mat B(c.unstable.rows(), c.unstable.cols() + c.center_stable.cols());
  B << c.unstable, c.center_stable;
  require(B.rows() == B.cols(), ErrorKind::contract, "frames do not split the space");
  Eigen::FullPivLU<Mat> lu(B);
  require(lu.isInvertible(), ErrorKind::splitting_failure, "unstable and center-stable frames are not complementary");
  c.inverse = lu.inverse();
  return c;
}

/// Graph of h over the coefficient box [-w, w]^k (w = delta / alpha, which
/// contains E^u_x(delta)) sampled on a regular grid; values are ambient
/// vectors in E^cs_x. Interpolation is tensor-product cubic on the four
/// nearest nodes per axis.
struct UnstableDisc {
  SplitChart chart;
  double delta = 0.0;
  double rho = 0.0;
  double half_width = 0.0;
  int nodes = kDiscNodes;
  Mat values;  ///< d x nodes^k, axis 0 fastest

  Eigen::Index k() const { return chart.k(); }
  const Vec& base() const { return chart.base; }
  double spacing() const { return 2.0 * half_width / (nodes - 1); }
  Eigen::Index node_count() const { return values.cols(); }

  Vec node_coords(Eigen::Index flat) const {
    Vec a(k());
    for (Eigen::Index i = 0; i < k(); ++i) {
      a(i) = -half_width + spacing() * static_cast<double>(flat % nodes);
      flat /= nodes;
    }
    return a;
  }

  /// h(a) and optionally Dh(a) (d x k, derivative in coefficient space).
  Vec h(const Vec& a, Mat* dh = nullptr) const {
    const Eigen::Index kk = k();
    std::array<int, 8> j0{};
    std::array<std::array<double, 4>, 8> w{}, dw{};
    const double step = spacing();
    for (Eigen::Index i = 0; i < kk; ++i) {
      const double t = (a(i) + half_width) / step;
      int cell = static_cast<int>(std::floor(t));
      cell = std::clamp(cell, 0, nodes - 2);
      int first = std::clamp(cell - 1, 0, nodes - 4);
      j0[static_cast<std::size_t>(i)] = first;
      // Lagrange weights on nodes first..first+3 at local coordinate s.
      const double s = t - first;
      for (int m = 0; m < 4; ++m) {
        double num = 1.0, den = 1.0, deriv = 0.0;
        for (int q = 0; q < 4; ++q) {
          if (q == m) continue;
          den *= (m - q);
          num *= (s - q);
        }
        for (int r = 0; r < 4; ++r) {
          if (r == m) continue;
          double prod = 1.0;
          for (int q = 0; q < 4; ++q)
            if (q != m && q != r) prod *= (s - q);
          deriv += prod;
        }
        w[static_cast<std::size_t>(i)][static_cast<std::size_t>(m)] = num / den;
        dw[static_cast<std::size_t>(i)][static_cast<std::size_t>(m)] = deriv / den / step;
      }
    }
    Vec out = Vec::Zero(values.rows());
    if (dh) *dh = Mat::Zero(values.rows(), kk);
    const int combos = 1 << (2 * kk);
    for (int c = 0; c < combos; ++c) {
      Eigen::Index flat = 0, stride = 1;
      double weight = 1.0;
      std::array<double, 8> partial{};
      for (Eigen::Index i = 0; i < kk; ++i) {
        const int m = (c >> (2 * i)) & 3;
        flat += stride * (j0[static_cast<std::size_t>(i)] + m);
        stride *= nodes;
        weight *= w[static_cast<std::size_t>(i)][static_cast<std::size_t>(m)];
      }
      if (dh) {
        for (Eigen::Index i = 0; i < kk; ++i) {
          double p = 1.0;
          for (Eigen::Index l = 0; l < kk; ++l) {
            const int m = (c >> (2 * l)) & 3;
            p *= (l == i ? dw : w)[static_cast<std::size_t>(l)][static_cast<std::size_t>(m)];
          }
          partial[static_cast<std::size_t>(i)] = p;
        }
      }
      out += weight * values.col(flat);
      if (dh)
        for (Eigen::Index i = 0; i < kk; ++i) dh->col(i) += partial[static_cast<std::size_t>(i)] * values.col(flat);
    }
    return out;
  }

  /// Ambient offset U a + h(a) from the base point.
  Vec offset(const Vec& a) const { return chart.unstable * a + h(a); }
  Vec point(const DynamicalSystem& sys, const Vec& a) const { return sys.translate(chart.base, offset(a)); }
  bool in_domain(const NormedSpace& space, const Vec& a, double radius) const {
    return space.norm(Vec(chart.unstable * a)) <= radius * (1.0 + 1e-9);
  }
};

// ---------------------------------------------------------------------------
// Slopes

/// Largest finite-difference slope |Dh| over grid cells (operator norm from
/// E^u to E^cs in the ambient norm).
inline double disc_slope_bound(const UnstableDisc& disc, const NormedSpace& space) {
  const Eigen::Index k = disc.k();
  const int n = disc.nodes;
  const double step = disc.spacing();
  double worst = 0.0;
  for (Eigen::Index flat = 0; flat < disc.node_count(); ++flat) {
    Eigen::Index rem = flat, stride = 1;
    bool interior = true;
    Mat D(disc.values.rows(), k);
    for (Eigen::Index i = 0; i < k; ++i) {
      const Eigen::Index idx = rem % n;
      rem /= n;
      if (idx + 1 >= n) {
        interior = false;
        break;
      }
      D.col(i) = (disc.values.col(flat + stride) - disc.values.col(flat)) / step;
      stride *= n;
    }
    if (!interior) continue;
    if (k == 1) {
      worst = std::max(worst, space.norm(Vec(D.col(0))) / space.norm(Vec(disc.chart.unstable.col(0))));
    } else {
      const Mat T = D * disc.chart.inverse.topRows(k);
      worst = std::max(worst, operator_norm(T, disc.chart.unstable, space));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Graph transform

namespace detail {

// Source coefficients b on `source` whose image under f has u-coordinates `a`
// in `target_chart`. Newton from `guess`.
inline std::optional<Vec> invert_through(const DynamicalSystem& sys, const UnstableDisc& source,
                                         const SplitChart& target_chart, const Vec& a, Vec b) {
  const Eigen::Index k = source.k();
  const Mat Au = target_chart.inverse.topRows(k);
  const double scale = std::max(1.0, source.half_width);
  for (int it = 0; it < 40; ++it) {
    Mat dh;
    const Vec p = sys.translate(source.chart.base, Vec(source.chart.unstable * b + source.h(b, &dh)));
    const Vec image = sys.apply(p);
    const Vec g = Au * sys.displacement(target_chart.base, image) - a;
    if (!g.allFinite()) return std::nullopt;
    if (g.cwiseAbs().maxCoeff() <= 1e-14 * scale) return b;
    const Mat J = Au * sys.derivative(p) * (source.chart.unstable + dh);
    const Vec step = J.fullPivLu().solve(g);
    if (!step.allFinite()) return std::nullopt;
    b -= step;
    if (step.cwiseAbs().maxCoeff() <= 1e-16 * scale) return b;
  }
  return std::nullopt;
}

}  // namespace detail

/// Image of `source` (a disc at p) under f, re-expressed as a graph over
/// E^u_{f(p)}(delta) in `target_chart`. Each node is found by Newton on the
/// u-coordinate equation.
inline UnstableDisc graph_transform_step(const DynamicalSystem& sys, const UnstableDisc& source,
                                         const SplitChart& target_chart, double delta) {
  const auto& space = sys.space();
  require(sys.distance(sys.apply(source.chart.base), target_chart.base) <= 1e-9 * std::max(1.0, space.norm(target_chart.base)),
          ErrorKind::contract, "target is not the image of the source base point");
  require(disc_slope_bound(source, space) <= kMaxSlope + 1e-12, ErrorKind::contract,
          "input graph slope exceeds 1/3");
  const Eigen::Index k = source.k();
  UnstableDisc out;
  out.chart = target_chart;
  out.delta = delta;
  out.rho = delta / 4.0;
  out.nodes = source.nodes;
  const double alpha = k == 1 ? 1.0 : separation_constant(target_chart.unstable, space);
  out.half_width = delta / alpha;
  Eigen::Index count = 1;
  for (Eigen::Index i = 0; i < k; ++i) count *= out.nodes;
  out.values.resize(static_cast<Eigen::Index>(sys.dim()), count);

  const Mat Au = target_chart.inverse.topRows(k);
  const Mat L = Au * sys.derivative(source.chart.base) * source.chart.unstable;
  const Eigen::FullPivLU<Mat> linear(L);
  for (Eigen::Index flat = 0; flat < count; ++flat) {
    const Vec a = out.node_coords(flat);
    const auto b = detail::invert_through(sys, source, target_chart, a, linear.solve(a));
    if (!b) fail(ErrorKind::delta_too_large, "graph transform inversion failed; expansion too weak for delta");
    if (!source.in_domain(space, *b, source.delta))
      fail(ErrorKind::delta_too_large, "preimage of the target disc leaves the source disc");
    const Vec image = sys.apply(source.point(sys, *b));
    out.values.col(flat) = target_chart.cs_part(sys.displacement(target_chart.base, image));
  }
  return out;
}

/// Flat disc (h = 0) in a chart.
inline UnstableDisc flat_disc(const DynamicalSystem& sys, const SplitChart& chart, double delta,
                              int nodes = kDiscNodes) {
  UnstableDisc d;
  d.chart = chart;
  d.delta = delta;
  d.rho = delta / 4.0;
  d.nodes = nodes;
  const Eigen::Index k = chart.k();
  d.half_width = delta / (k == 1 ? 1.0 : separation_constant(chart.unstable, sys.space()));
  Eigen::Index count = 1;
  for (Eigen::Index i = 0; i < k; ++i) count *= nodes;
  d.values = Mat::Zero(static_cast<Eigen::Index>(sys.dim()), count);
  return d;
}

// ---------------------------------------------------------------------------
// Fixed discs along stored orbits

/// Unit E^u frames at x_0, x_{-1}, ..., x_{-levels}: one forward
/// power-iteration sweep from the oldest stored state.
inline std::vector<Mat> orbit_unstable_frames(const DynamicalSystem& sys, const OrbitSegment& orbit,
                                              Eigen::Index levels) {
  const Eigen::Index H = orbit.length();
  require(levels <= H, ErrorKind::itinerary, "orbit shorter than the requested number of levels");
  std::vector<Mat> u(static_cast<std::size_t>(levels + 1));
  if (sys.analytic_unstable(orbit.point())) {
    for (Eigen::Index j = 0; j <= levels; ++j)
      u[static_cast<std::size_t>(j)] = unit_columns(*sys.analytic_unstable(orbit.back(j)), sys.space());
    return u;
  }
  Mat F = unstable_seed_frame(sys, orbit.back(H));
  for (Eigen::Index j = H; j >= 1; --j) {
    F = detail::thin_q(sys.derivative(orbit.back(j)) * F);
    if (j - 1 <= levels) u[static_cast<std::size_t>(j - 1)] = unit_columns(F, sys.space());
  }
  return u;
}

/// Charts along an orbit segment: E^u from orbit_unstable_frames, E^cs from
/// the system.
inline std::vector<SplitChart> orbit_charts(const DynamicalSystem& sys, const OrbitSegment& orbit,
                                            Eigen::Index levels, Eigen::Index cone_iterations = 40) {
  const auto u = orbit_unstable_frames(sys, orbit, levels);
  std::vector<SplitChart> charts;
  charts.reserve(static_cast<std::size_t>(levels + 1));
  for (Eigen::Index j = 0; j <= levels; ++j) {
    const Vec x = orbit.back(j);
    charts.push_back(make_chart(x, u[static_cast<std::size_t>(j)], center_stable_frame(sys, x, cone_iterations)));
  }
  return charts;
}

/// Discs at x_0, x_{-1}, ..., x_{-levels}, each an accurate fixed-point graph.
struct DiscChain {
  std::vector<UnstableDisc> levels;
  Eigen::Index depth = 0;          ///< graph-transform steps behind level 0
  std::vector<double> sup_changes; ///< convergence trace of level 0 versus depth

  const UnstableDisc& at(Eigen::Index j) const { return levels.at(static_cast<std::size_t>(j)); }
};

struct DiscOptions {
  double delta = 0.1;
  double tol = 1e-10;
  Eigen::Index keep_levels = 0;     ///< accurate backward levels to retain
  Eigen::Index min_depth = 8;
  Eigen::Index max_depth = 200;
  Eigen::Index frame_margin = 20;   ///< power-iteration steps reserved for frames
  int nodes = kDiscNodes;
};

/// Starts from a flat graph at x_{-m} and transforms forward; m grows until
/// the disc at x_0 changes by less than tol in sup norm.
inline DiscChain compute_disc_chain(const DynamicalSystem& sys, const OrbitSegment& orbit, const DiscOptions& opt) {
  require(opt.delta > 0.0, ErrorKind::invalid_input, "delta must be positive");
  require(orbit.length() >= 20, ErrorKind::itinerary, "need a stored backward orbit of length >= 20");
  const Eigen::Index usable = std::min(orbit.length() - opt.frame_margin, opt.max_depth + opt.keep_levels);
  require(usable > opt.keep_levels, ErrorKind::itinerary, "stored orbit too short for the requested levels");
  const auto charts = orbit_charts(sys, orbit, usable);
  const auto& space = sys.space();

  DiscChain chain;
  std::optional<Mat> previous;
  for (Eigen::Index m = opt.min_depth; m + opt.keep_levels <= usable && m <= opt.max_depth; ++m) {
    const Eigen::Index top = m + opt.keep_levels;
    std::vector<UnstableDisc> run(static_cast<std::size_t>(opt.keep_levels + 1));
    UnstableDisc disc = flat_disc(sys, charts[static_cast<std::size_t>(top)], opt.delta, opt.nodes);
    for (Eigen::Index j = top; j >= 1; --j) {
      disc = graph_transform_step(sys, disc, charts[static_cast<std::size_t>(j - 1)], opt.delta);
      if (j > 1 && disc_slope_bound(disc, space) > kMaxSlope)
        fail(ErrorKind::delta_too_large, "unstable graph slope exceeds 1/3 at this delta");
      if (j - 1 <= opt.keep_levels) run[static_cast<std::size_t>(j - 1)] = disc;
    }
    if (previous) {
      double change = 0.0;
      for (Eigen::Index c = 0; c < disc.values.cols(); ++c)
        change = std::max(change, space.norm(Vec(disc.values.col(c) - previous->col(c))));
      chain.sup_changes.push_back(change);
      if (change < opt.tol) {
        chain.levels = std::move(run);
        chain.depth = top;
        return chain;
      }
    }
    previous = disc.values;
  }
  fail(ErrorKind::convergence, "unstable disc did not converge to tol " + std::to_string(opt.tol) +
                                   " within the stored orbit (" + std::to_string(usable) + " steps)");
}

inline UnstableDisc compute_unstable_disc(const DynamicalSystem& sys, const OrbitSegment& orbit, double delta,
                                          double tol = 1e-10) {
  DiscOptions opt;
  opt.delta = delta;
  opt.tol = tol;
  return compute_disc_chain(sys, orbit, opt).levels.front();
}

/// Largest second difference |h_{i+1} - 2 h_i + h_{i-1}| / spacing^2 along
/// grid axes. Monitored, not certified.
inline double disc_second_difference(const UnstableDisc& disc, const NormedSpace& space) {
  const int n = disc.nodes;
  const double step2 = disc.spacing() * disc.spacing();
  double worst = 0.0;
  for (Eigen::Index flat = 0; flat < disc.node_count(); ++flat) {
    Eigen::Index rem = flat, stride = 1;
    for (Eigen::Index i = 0; i < disc.k(); ++i) {
      const Eigen::Index idx = rem % n;
      rem /= n;
      if (idx >= 1 && idx + 1 < n) {
        const Vec d2 = disc.values.col(flat + stride) - 2.0 * disc.values.col(flat) + disc.values.col(flat - stride);
        worst = std::max(worst, space.norm(d2) / step2);
      }
      stride *= n;
    }
  }
  return worst;
}

/// Disc validity: h(0) = 0, Dh(0) = 0, slopes at most 1/3.
struct DiscCheck {
  double h0 = 0.0;
  double dh0 = 0.0;
  double slope = 0.0;
  double second_difference = 0.0;
  bool valid() const { return h0 <= 1e-10 && dh0 <= 1e-6 && slope <= kMaxSlope; }
};

inline DiscCheck check_disc(const UnstableDisc& disc, const NormedSpace& space) {
  DiscCheck c;
  Mat dh;
  c.h0 = space.norm(disc.h(Vec::Zero(disc.k()), &dh));
  for (Eigen::Index i = 0; i < dh.cols(); ++i) c.dh0 = std::max(c.dh0, space.norm(Vec(dh.col(i))));
  c.slope = disc_slope_bound(disc, space);
  c.second_difference = disc_second_difference(disc, space);
  return c;
}

// ---------------------------------------------------------------------------
// Serialization (regression fixtures)

namespace detail {
inline nlohmann::json matrix_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}
inline Mat json_matrix(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
  return m;
}
}  // namespace detail

inline nlohmann::json disc_to_json(const UnstableDisc& d) {
  return {{"base", detail::matrix_json(d.chart.base)},
          {"unstable", detail::matrix_json(d.chart.unstable)},
          {"center_stable", detail::matrix_json(d.chart.center_stable)},
          {"delta", d.delta},
          {"rho", d.rho},
          {"half_width", d.half_width},
          {"nodes", d.nodes},
          {"values", detail::matrix_json(d.values)}};
}

inline UnstableDisc disc_from_json(const nlohmann::json& j) {
  try {
    UnstableDisc d;
    d.chart = make_chart(detail::json_matrix(j.at("base")), detail::json_matrix(j.at("unstable")),
                         detail::json_matrix(j.at("center_stable")));
    d.delta = j.at("delta").get<double>();
    d.rho = j.at("rho").get<double>();
    d.half_width = j.at("half_width").get<double>();
    d.nodes = j.at("nodes").get<int>();
    d.values = detail::json_matrix(j.at("values"));
    return d;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("malformed disc: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Invariance

struct InvarianceReport {
  double hausdorff = 0.0;  ///< max distance from f(W(x_{-1})) to W(x) inside the delta-chart
  bool covers = false;     ///< f(W(x_{-1})) reaches the whole of E^u_x(delta)
  std::size_t samples = 0;
};

/// One-sided Hausdorff distance from f(W^u_delta(x_{-1})) restricted to the
/// delta-neighbourhood chart of x, to W^u_delta(x); plus coverage of E^u_x(delta).
/// Sampled on a grid four times finer than the disc grid (k = 1 exact sweep).
inline InvarianceReport invariance_residual(const DynamicalSystem& sys, const UnstableDisc& source,
                                            const UnstableDisc& target) {
  const auto& space = sys.space();
  InvarianceReport rep;
  const Eigen::Index k = source.k();
  const int fine = 4 * (source.nodes - 1) + 1;
  Eigen::Index count = 1;
  for (Eigen::Index i = 0; i < k; ++i) count *= fine;
  Vec lo = Vec::Constant(k, std::numeric_limits<double>::infinity());
  Vec hi = -lo;
  for (Eigen::Index flat = 0; flat < count; ++flat) {
    Vec b(k);
    Eigen::Index rem = flat;
    for (Eigen::Index i = 0; i < k; ++i) {
      b(i) = -source.half_width + 2.0 * source.half_width * static_cast<double>(rem % fine) / (fine - 1);
      rem /= fine;
    }
    if (!source.in_domain(space, b, source.delta)) continue;
    const Vec w = sys.displacement(target.base(), sys.apply(source.point(sys, b)));
    const Vec a = target.chart.u_coords(w);
    lo = lo.cwiseMin(a);
    hi = hi.cwiseMax(a);
    if (!target.in_domain(space, a, target.delta)) continue;
    rep.hausdorff = std::max(rep.hausdorff, space.norm(Vec(target.chart.cs_part(w) - target.h(a))));
    ++rep.samples;
  }
  // Frames have unit columns, so +-delta e_i are the axis points of E^u_x(delta).
  rep.covers = true;
  for (Eigen::Index i = 0; i < k; ++i)
    rep.covers = rep.covers && lo(i) <= -target.delta + 1e-12 && hi(i) >= target.delta - 1e-12;
  return rep;
}

// ---------------------------------------------------------------------------
// Points on discs and their backward orbits

/// Arclength along the disc between coefficient points a and b (straight
/// segment in coefficients; 128-interval composite trapezoid).
inline double disc_arclength(const UnstableDisc& disc, const NormedSpace& space, const Vec& a, const Vec& b) {
  const int n = 128;
  const Vec dir = b - a;
  if (dir.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  double sum = 0.0;
  for (int i = 0; i <= n; ++i) {
    Mat dh;
    disc.h(Vec(a + (static_cast<double>(i) / n) * dir), &dh);
    const double speed = space.norm(Vec((disc.chart.unstable + dh) * dir));
    sum += (i == 0 || i == n ? 0.5 : 1.0) * speed;
  }
  return sum / n;
}

/// Orbit of the point with coefficients `a` on chain level 0: the point is
/// pulled back through the chain to level `depth` by the graph-transform
/// inversion, and the stored orbit y_{-depth}, ..., y_0 is then produced by
/// forward iteration. Older states are taken from the base orbit, which the
/// leaf orbit shadows to within the disc size times the backward contraction.
inline OrbitSegment leaf_orbit(const DynamicalSystem& sys, const OrbitSegment& base_orbit, const DiscChain& chain,
                               const Vec& a, Eigen::Index depth) {
  require(depth >= 0 && depth + 1 <= static_cast<Eigen::Index>(chain.levels.size()), ErrorKind::itinerary,
          "disc chain has too few levels for the requested depth");
  Vec coeff = a;
  for (Eigen::Index j = 0; j < depth; ++j) {
    const auto& src = chain.at(j + 1);
    const auto& dst = chain.at(j);
    const Mat L = dst.chart.inverse.topRows(dst.k()) * sys.derivative(src.base()) * src.chart.unstable;
    const auto b = detail::invert_through(sys, src, dst.chart, coeff, Vec(L.fullPivLu().solve(coeff)));
    if (!b) fail(ErrorKind::itinerary, "point could not be pulled back along the disc chain");
    coeff = *b;
  }
  OrbitSegment out;
  const Eigen::Index H = base_orbit.length();
  out.states.resize(base_orbit.states.rows(), H + 1);
  out.states.leftCols(H - depth) = base_orbit.states.leftCols(H - depth);
  Vec y = chain.at(depth).point(sys, coeff);
  out.states.col(H - depth) = y;
  for (Eigen::Index j = depth - 1; j >= 0; --j) {
    y = sys.apply(y);
    out.states.col(H - j) = y;
  }
  return out;
}

/// Distance of a point from the graph of a disc, and its coefficients.
inline std::pair<double, Vec> graph_offset(const DynamicalSystem& sys, const UnstableDisc& disc, const Vec& p) {
  const Vec w = sys.displacement(disc.base(), p);
  const Vec a = disc.chart.u_coords(w);
  return {sys.space().norm(Vec(disc.chart.cs_part(w) - disc.h(a))), a};
}

struct ContractionRecord {
  std::vector<double> distances;  ///< d^u(y_{-j}, z_{-j}), j = 0..n
  std::vector<double> ratios;     ///< distances[j] / distances[0]
  double rate = 0.0;              ///< least-squares slope of -log ratio
  double gamma0 = 1.0;            ///< smallest gamma0 with ratio_j <= gamma0 e^{-j rate}
  bool holds = true;              ///< rate >= lambda0 - eps0
};

/// d^u along chain discs between stored orbits y and z (both ending on level
/// 0 of the chain), for j = 0..n.
inline ContractionRecord backward_contraction_check(const DynamicalSystem& sys, const DiscChain& chain,
                                                    const OrbitSegment& y, const OrbitSegment& z, Eigen::Index n,
                                                    double lambda0, double eps0, double on_disc_tol = 1e-6) {
  require(n >= 1 && n + 1 <= static_cast<Eigen::Index>(chain.levels.size()), ErrorKind::itinerary,
          "horizon exceeds the disc chain");
  require(y.length() >= n && z.length() >= n, ErrorKind::itinerary, "itineraries shorter than the horizon");
  ContractionRecord rec;
  for (Eigen::Index j = 0; j <= n; ++j) {
    const auto& disc = chain.at(j);
    const auto [oy, ay] = graph_offset(sys, disc, y.back(j));
    const auto [oz, az] = graph_offset(sys, disc, z.back(j));
    if (oy > on_disc_tol || oz > on_disc_tol)
      fail(ErrorKind::itinerary, "points do not come from a common pushed disc (offset " +
                                     std::to_string(std::max(oy, oz)) + ")");
    rec.distances.push_back(disc_arclength(disc, sys.space(), ay, az));
  }
  const double d0 = rec.distances.front();
  if (d0 == 0.0) {
    rec.ratios.assign(rec.distances.size(), 0.0);
    rec.rate = std::numeric_limits<double>::infinity();
    rec.gamma0 = 1.0;
    return rec;
  }
  // Least squares through the points (j, log ratio_j), j = 0..n.
  double sj = 0, sl = 0, sjj = 0, sjl = 0;
  for (Eigen::Index j = 0; j <= n; ++j) {
    const double r = rec.distances[static_cast<std::size_t>(j)] / d0;
    rec.ratios.push_back(r);
    const double l = std::log(r);
    sj += j;
    sl += l;
    sjj += static_cast<double>(j * j);
    sjl += j * l;
  }
  const double m = static_cast<double>(n + 1);
  rec.rate = -(m * sjl - sj * sl) / (m * sjj - sj * sj);
  rec.gamma0 = 0.0;
  for (Eigen::Index j = 0; j <= n; ++j)
    rec.gamma0 = std::max(rec.gamma0, rec.ratios[static_cast<std::size_t>(j)] * std::exp(rec.rate * j));
  rec.holds = rec.rate >= lambda0 - eps0;
  return rec;
}

// ---------------------------------------------------------------------------
// Coherence

struct CoherenceReport {
  std::size_t pairs = 0;
  std::size_t intersecting = 0;
  double max_hausdorff = 0.0;   ///< over intersecting pairs
  bool coherent = true;
  bool no_intersections = false;
  double largest_rho = 0.0;     ///< largest rho found coherent by bisection
  double rho = 0.0;
};

namespace detail {

// For one ordered pair: whether W_rho(x) meets W_delta(xbar) and, if so, the
// largest graph distance of W_rho(x) from W_delta(xbar) (infinite when part
// of W_rho(x) falls outside the delta-domain of xbar).
inline std::optional<double> rho_inclusion(const DynamicalSystem& sys, const UnstableDisc& a, const UnstableDisc& b,
                                           double rho, double tol) {
  const auto& space = sys.space();
  const Eigen::Index k = a.k();
  const int fine = 4 * (a.nodes - 1) + 1;
  Eigen::Index count = 1;
  for (Eigen::Index i = 0; i < k; ++i) count *= fine;
  bool meets = false;
  double worst = 0.0;
  const double hw = rho / (k == 1 ? 1.0 : separation_constant(a.chart.unstable, space));
  for (Eigen::Index flat = 0; flat < count; ++flat) {
    Vec c(k);
    Eigen::Index rem = flat;
    for (Eigen::Index i = 0; i < k; ++i) {
      c(i) = -hw + 2.0 * hw * static_cast<double>(rem % fine) / (fine - 1);
      rem /= fine;
    }
    if (!a.in_domain(space, c, rho)) continue;
    const auto [off, cb] = graph_offset(sys, b, a.point(sys, c));
    const bool inside = b.in_domain(space, cb, b.delta);
    if (inside && off <= tol && b.in_domain(space, cb, rho)) meets = true;
    worst = std::max(worst, inside ? off : std::numeric_limits<double>::infinity());
    if (meets && worst > tol) break;  // already known to fail
  }
  if (!meets) return std::nullopt;
  return worst;
}

}  // namespace detail

/// Checks W_rho(x) inside W_delta(xbar) whenever the rho-subdiscs meet.
/// Meeting is judged at the Hausdorff tolerance.
inline CoherenceReport coherence_check(const DynamicalSystem& sys, const std::vector<UnstableDisc>& discs, double rho,
                                       double tol = 1e-6, unsigned workers = 1) {
  require(!discs.empty(), ErrorKind::invalid_input, "no discs to check");
  for (const auto& d : discs) require(rho < d.delta, ErrorKind::invalid_input, "rho must be smaller than delta");
  auto evaluate = [&](double r, CoherenceReport& rep) {
    const std::size_t n = discs.size();
    std::vector<double> worst(n * n, -1.0);
    parallel_for(n, workers, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (i == j) continue;
          if (sys.distance(discs[i].base(), discs[j].base()) > 2.0 * (discs[i].delta + discs[j].delta)) continue;
          const auto w = detail::rho_inclusion(sys, discs[i], discs[j], r, tol);
          if (w) worst[i * n + j] = *w;
        }
    });
    rep.pairs = n * (n - 1);
    rep.intersecting = 0;
    rep.max_hausdorff = 0.0;
    for (double w : worst) {
      if (w < 0.0) continue;
      ++rep.intersecting;
      rep.max_hausdorff = std::max(rep.max_hausdorff, w);
    }
    rep.coherent = rep.max_hausdorff <= tol;
    rep.no_intersections = rep.intersecting == 0;
  };
  CoherenceReport rep;
  rep.rho = rho;
  evaluate(rho, rep);
  // Largest coherent rho below the smallest delta.
  double min_delta = std::numeric_limits<double>::infinity();
  for (const auto& d : discs) min_delta = std::min(min_delta, d.delta);
  double lo = 0.0, hi = min_delta;
  if (rep.coherent) lo = rho;
  for (int it = 0; it < 12; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid >= min_delta) break;
    CoherenceReport probe;
    evaluate(mid, probe);
    if (probe.coherent)
      lo = mid;
    else
      hi = mid;
  }
  rep.largest_rho = lo;
  return rep;
}

// ---------------------------------------------------------------------------
// Default delta

struct DeltaChoice {
  double delta = 0.0;
  double rho = 0.0;
  std::size_t base_points = 0;
};

/// Largest delta (bisection on (0, delta_max]) for which discs at the first
/// `base_points` sample points converge and satisfy the slope bound.
inline DeltaChoice choose_delta(const DynamicalSystem& sys, const AttractorSample& sample, double delta_max = 0.25,
                                std::size_t base_points = 12, int iterations = 10, unsigned workers = 1) {
  const std::size_t m = std::min(base_points, sample.size());
  require(m >= 1, ErrorKind::invalid_input, "empty attractor sample");
  auto admissible = [&](double delta) {
    std::vector<int> ok(m, 0);
    parallel_for(m, workers, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        try {
          const auto disc = compute_unstable_disc(sys, sample.orbits[i], delta, 1e-10);
          ok[i] = check_disc(disc, sys.space()).valid() ? 1 : 0;
        } catch (const Error&) {
          ok[i] = 0;
        }
      }
    });
    return std::all_of(ok.begin(), ok.end(), [](int v) { return v == 1; });
  };
  DeltaChoice out;
  out.base_points = m;
  if (admissible(delta_max)) {
    out.delta = delta_max;
  } else {
    double lo = 0.0, hi = delta_max;
    for (int it = 0; it < iterations; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (admissible(mid))
        lo = mid;
      else
        hi = mid;
    }
    require(lo > 0.0, ErrorKind::delta_too_large, "no admissible disc radius found");
    out.delta = lo;
  }
  out.rho = out.delta / 4.0;
  return out;
}

}  // namespace srblab
