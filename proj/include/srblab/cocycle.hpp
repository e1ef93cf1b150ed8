#pragma once

// Piecewise-continuous unit bases of E^u, unstable Jacobians J^u and the
// bounded-distortion estimates along unstable discs.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "srblab/common.hpp"
#include "srblab/manifolds.hpp"
#include "srblab/normed_linalg.hpp"
#include "srblab/system.hpp"

namespace srblab {

/// Lower bound on alpha implied by dist(v_i, span{v_j}_{j<i}) > 1 - eps.
inline double basis2_bound(Eigen::Index k, double eps) {
  return std::pow((1.0 - eps) / (2.0 - eps), static_cast<double>(k - 1)) * (1.0 - eps);
}

namespace detail {

// Euclidean orthogonal projection of r onto span(F).
inline Vec project_onto(const Mat& F, const Vec& r) {
  return F * (F.transpose() * F).ldlt().solve(F.transpose() * r);
}

// Unit w in span(F) (approximately) maximising dist(w, span(V)).
inline Vec farthest_unit_vector(const Mat& F, const Mat& V, const NormedSpace& space, std::uint64_t seed) {
  const Eigen::Index k = F.cols();
  auto score = [&](const Vec& c) {
    const Vec w = F * c;
    const double n = space.norm(w);
    if (n <= 0.0) return -1.0;
    return dist_to_span(Vec(w / n), V, space);
  };
  auto rng = make_stream(seed, "basis-selection", static_cast<std::uint64_t>(k));
  std::normal_distribution<double> g;
  std::vector<std::pair<double, Vec>> best;
  const int trials = 96 * static_cast<int>(k);
  for (int t = 0; t < trials; ++t) {
    Vec c(k);
    for (Eigen::Index i = 0; i < k; ++i) c(i) = g(rng);
    c.normalize();
    best.emplace_back(score(c), c);
  }
  std::sort(best.begin(), best.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  best.resize(std::min<std::size_t>(4, best.size()));
  for (auto& [s, c] : best) {
    double step = 0.25;
    while (step > 1e-7) {
      bool moved = false;
      for (Eigen::Index i = 0; i < k; ++i)
        for (double sgn : {1.0, -1.0}) {
          Vec trial = c;
          trial(i) += sgn * step;
          const double st = score(trial);
          if (st > s) {
            s = st;
            c = trial;
            moved = true;
          }
        }
      if (!moved) step *= 0.5;
    }
  }
  const auto& top = *std::max_element(best.begin(), best.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const Vec w = F * top.second;
  return w / space.norm(w);
}

}  // namespace detail

struct BasisFieldOptions {
  double epsilon = 0.1;
  double chart_radius = 0.5;
  int max_refinements = 4;
  std::uint64_t seed = 7;
  unsigned workers = 1;
};

/// Charts around anchors {x_i} of radius chart_radius; a point belongs to
/// the lowest-index anchor within that radius, or failing that to the
/// nearest anchor within twice the radius (points between sample points at
/// the edge of the cover). Inside chart i the basis at y is the orthogonal
/// projection of the anchor's reference vectors onto E^u_y, each rescaled to
/// unit norm.
class BasisField {
 public:
  std::vector<Vec> anchors;
  std::vector<Mat> references;  ///< d x k unit vectors at each anchor
  double chart_radius = 0.0;
  double epsilon = 0.0;
  int refinements = 0;
  double min_separation = 1.0;  ///< min over checked samples and i >= 2 of dist(v_i, span{v_j}_{j<i})
  double min_alpha = 1.0;       ///< min separation constant over checked samples
  double lipschitz = 0.0;       ///< max |v_i(y) - v_i(anchor)| / |y - anchor| over checked samples
  Eigen::Index k = 0;
  NormedSpace space;
  std::vector<std::size_t> anchor_sample;  ///< index of each anchor among sample points then their images

  std::optional<std::size_t> chart_of(const DynamicalSystem& sys, const Vec& y) const {
    std::optional<std::size_t> nearest;
    double best = 2.0 * chart_radius;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const double d = sys.distance(anchors[i], y);
      if (d <= chart_radius) return i;
      if (d <= best) {
        best = d;
        nearest = i;
      }
    }
    return nearest;
  }

  Mat vectors_in_chart(std::size_t chart, const Mat& frame) const {
    Mat out(frame.rows(), k);
    for (Eigen::Index i = 0; i < k; ++i) {
      const Vec v = detail::project_onto(frame, references[chart].col(i));
      const double n = space.norm(v);
      require(n > 0.0 && std::isfinite(n), ErrorKind::chart_refinement, "reference vector projects to zero");
      out.col(i) = v / n;
    }
    return out;
  }

  /// eta_y for a point y with E^u_y = span(frame).
  UnitBasis basis(const DynamicalSystem& sys, const Vec& y, const Mat& frame) const {
    const auto chart = chart_of(sys, y);
    if (!chart) fail(ErrorKind::coverage, "point not covered by any basis chart");
    const Mat V = vectors_in_chart(*chart, frame);
    return UnitBasis{V, k == 1 ? 1.0 : separation_constant(V, space), space};
  }
};

inline double sequential_separation(const Mat& V, const NormedSpace& space) {
  double s = 1.0;
  for (Eigen::Index i = 1; i < V.cols(); ++i) s = std::min(s, dist_to_span(Vec(V.col(i)), Mat(V.leftCols(i)), space));
  return s;
}

/// Greedy chart cover of the sample and its image, sequential-selection
/// reference bases at anchors, then a check of dist(v_i, span{v_j}_{j<i}) >
/// 1 - eps at every covered point. On failure the chart radius is halved, up to
/// max_refinements times.
inline BasisField build_basis_field(const DynamicalSystem& sys, const SplittingField& split,
                                    const AttractorSample& sample, const BasisFieldOptions& opt = {}) {
  require(opt.epsilon > 0.0 && opt.epsilon < 1.0, ErrorKind::invalid_input, "epsilon must lie in (0, 1)");
  require(opt.chart_radius > 0.0, ErrorKind::invalid_input, "chart radius must be positive");
  require(split.unstable.size() == sample.size() && sample.size() > 0, ErrorKind::invalid_input,
          "splitting does not match the sample");
  const auto& space = sys.space();
  // Sample points and their images (J^u at x needs a basis at f(x)).
  std::vector<Vec> points;
  std::vector<Mat> frames;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    points.push_back(sample.point(i));
    frames.push_back(split.unstable[i]);
  }
  for (std::size_t i = 0; i < sample.size(); ++i) {
    points.push_back(sys.apply(sample.point(i)));
    frames.push_back(Mat(sys.derivative(sample.point(i)) * split.unstable[i]));
  }
  double radius = opt.chart_radius;
  for (int attempt = 0; attempt <= opt.max_refinements; ++attempt, radius *= 0.5) {
    BasisField field;
    field.chart_radius = radius;
    field.epsilon = opt.epsilon;
    field.refinements = attempt;
    field.k = split.unstable.front().cols();
    field.space = space;
    for (std::size_t i = 0; i < points.size(); ++i) {
      bool covered = false;
      for (const auto& a : field.anchors) covered = covered || sys.distance(a, points[i]) <= radius;
      if (covered) continue;
      field.anchors.push_back(points[i]);
      field.anchor_sample.push_back(i);
    }
    field.references.resize(field.anchors.size());
    parallel_for(field.anchors.size(), opt.workers, [&](std::size_t b, std::size_t e) {
      for (std::size_t a = b; a < e; ++a) {
        const Mat& F = frames[field.anchor_sample[a]];
        Mat R(F.rows(), field.k);
        R.col(0) = F.col(0) / space.norm(Vec(F.col(0)));
        for (Eigen::Index i = 1; i < field.k; ++i)
          R.col(i) = detail::farthest_unit_vector(F, Mat(R.leftCols(i)), space, opt.seed + a);
        field.references[a] = R;
      }
    });
    std::vector<double> sep(points.size(), 1.0), alpha(points.size(), 1.0), lip(points.size(), 0.0);
    parallel_for(points.size(), opt.workers, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const Vec& y = points[i];
        const std::size_t c = *field.chart_of(sys, y);
        const Mat V = field.vectors_in_chart(c, frames[i]);
        if (field.k > 1) {
          sep[i] = sequential_separation(V, space);
          alpha[i] = separation_constant(V, space);
        }
        const double dy = sys.distance(y, field.anchors[c]);
        if (dy > 0.0) {
          double diff = 0.0;
          for (Eigen::Index j = 0; j < field.k; ++j)
            diff = std::max(diff, space.norm(Vec(V.col(j) - field.references[c].col(j))));
          lip[i] = diff / dy;
        }
      }
    });
    field.min_separation = *std::min_element(sep.begin(), sep.end());
    field.min_alpha = *std::min_element(alpha.begin(), alpha.end());
    field.lipschitz = *std::max_element(lip.begin(), lip.end());
    if (field.min_separation > 1.0 - opt.epsilon) return field;
  }
  fail(ErrorKind::chart_refinement, "separation 1 - eps not reached after " + std::to_string(opt.max_refinements) +
                                        " chart refinements; continuity of the splitting is too poor for this eps");
}

// ---------------------------------------------------------------------------
// Unstable Jacobian

/// J^u(x) = |det_{eta_x, eta_{fx}}(Df_x|E^u_x)| with E^u_x = span(frame).
inline double unstable_jacobian(const DynamicalSystem& sys, const BasisField& field, const Vec& x, const Mat& frame) {
  const Mat D = sys.derivative(x);
  const UnitBasis ex = field.basis(sys, x, frame);
  const UnitBasis efx = field.basis(sys, sys.apply(x), Mat(D * frame));
  return std::abs(det_between_bases(D, ex, efx));
}

/// J^u of f^n at x in one determinant, Df^n formed by multiplying along the
/// orbit.
inline double unstable_jacobian_n(const DynamicalSystem& sys, const BasisField& field, const Vec& x, const Mat& frame,
                                  int n) {
  Mat D = Mat::Identity(static_cast<Eigen::Index>(sys.dim()), static_cast<Eigen::Index>(sys.dim()));
  Vec y = x;
  for (int j = 0; j < n; ++j) {
    D = sys.derivative(y) * D;
    y = sys.apply(y);
  }
  const UnitBasis ex = field.basis(sys, x, frame);
  const UnitBasis ey = field.basis(sys, y, Mat(D * frame));
  return std::abs(det_between_bases(D, ex, ey));
}

/// log J^u at y_{-1}, ..., y_{-n} along a stored orbit (index j-1 holds
/// log J^u(y_{-j})). Frames from orbit_unstable_frames.
inline std::vector<double> log_jacobians_along(const DynamicalSystem& sys, const BasisField& field,
                                               const OrbitSegment& y, Eigen::Index n) {
  require(y.length() >= n + 1, ErrorKind::itinerary, "itinerary shorter than the horizon");
  const auto frames = orbit_unstable_frames(sys, y, n);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (Eigen::Index j = 1; j <= n; ++j)
    out[static_cast<std::size_t>(j - 1)] = std::log(unstable_jacobian(sys, field, y.back(j), frames[static_cast<std::size_t>(j)]));
  return out;
}

// ---------------------------------------------------------------------------
// Distortion

struct DistortionRecord {
  Eigen::Index horizon = 0;
  std::vector<double> partial_products;  ///< index m-1: prod_{k<=m} J^u(y_{-k}) / J^u(z_{-k})
  std::vector<double> cauchy;            ///< |log P_m - log P_{m-1}|
  double cauchy_rate = 0.0;              ///< fitted geometric decay rate of the differences
  double cauchy_tail = 0.0;              ///< geometric bound on sum_{m>n} differences
  double c_estimate = 0.0;               ///< filled by estimate_distortion_constant when known

  double extreme() const {
    double e = 1.0;
    for (double p : partial_products) e = std::max({e, p, 1.0 / p});
    return e;
  }
};

inline DistortionRecord distortion_product(const DynamicalSystem& sys, const BasisField& field, const OrbitSegment& y,
                                           const OrbitSegment& z, Eigen::Index n) {
  require(n >= 1, ErrorKind::invalid_input, "horizon must be positive");
  require(y.length() >= n + 1 && z.length() >= n + 1, ErrorKind::itinerary, "itinerary shorter than the horizon");
  const auto ly = log_jacobians_along(sys, field, y, n);
  const auto lz = log_jacobians_along(sys, field, z, n);
  DistortionRecord rec;
  rec.horizon = n;
  CompensatedAccumulator acc;
  for (Eigen::Index m = 0; m < n; ++m) {
    const double d = ly[static_cast<std::size_t>(m)] - lz[static_cast<std::size_t>(m)];
    acc.add(d);
    rec.partial_products.push_back(std::exp(acc.value()));
    rec.cauchy.push_back(std::abs(d));
  }
  // Geometric fit of the differences above the roundoff floor.
  double sj = 0, sl = 0, sjj = 0, sjl = 0;
  int count = 0;
  for (std::size_t m = 0; m < rec.cauchy.size(); ++m) {
    if (rec.cauchy[m] < 1e-14) continue;
    const double l = std::log(rec.cauchy[m]);
    sj += static_cast<double>(m);
    sl += l;
    sjj += static_cast<double>(m * m);
    sjl += static_cast<double>(m) * l;
    ++count;
  }
  if (count >= 3) {
    rec.cauchy_rate = -(count * sjl - sj * sl) / (count * sjj - sj * sj);
  } else {
    rec.cauchy_rate = std::numeric_limits<double>::infinity();
  }
  const double last = rec.cauchy.back();
  if (last == 0.0 || std::isinf(rec.cauchy_rate)) {
    rec.cauchy_tail = last;
  } else if (rec.cauchy_rate > 0.0) {
    const double r = std::exp(-rec.cauchy_rate);
    rec.cauchy_tail = last * r / (1.0 - r);
  } else {
    rec.cauchy_tail = std::numeric_limits<double>::infinity();
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Uniform bound M and the comparison operators P_k, Q_k

struct SystemBounds {
  double df_norm = 0.0;
  double df_lipschitz = 0.0;
  double pi_u_norm = 0.0;
  double pi_cs_norm = 0.0;
  double dh_lipschitz = 0.0;
  double M() const { return std::max({df_norm, df_lipschitz, pi_u_norm, pi_cs_norm, dh_lipschitz}); }
};

/// Measured over the first n_samples sample points: ||Df||, a finite
/// difference estimate of Lip(Df) over a fixed direction set, projector
/// norms, and second differences of the given discs for Lip(Dh).
inline SystemBounds measure_system_bounds(const DynamicalSystem& sys, const SplittingField& split,
                                          const AttractorSample& sample, const std::vector<UnstableDisc>& discs,
                                          std::size_t n_samples = 500) {
  const auto& space = sys.space();
  const auto d = static_cast<Eigen::Index>(sys.dim());
  SystemBounds b;
  const std::size_t n = std::min(n_samples, sample.size());
  std::vector<Vec> dirs;
  for (Eigen::Index i = 0; i < d; ++i) dirs.push_back(Vec::Unit(d, i));
  auto rng = make_stream(3, "bounds-directions", 0);
  std::normal_distribution<double> g;
  for (int t = 0; t < 8; ++t) {
    Vec v(d);
    for (Eigen::Index i = 0; i < d; ++i) v(i) = g(rng);
    dirs.push_back(v / space.norm(v));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Vec x = sample.point(i);
    b.df_norm = std::max(b.df_norm, operator_norm(sys.derivative(x), space));
    const double h = 1e-5 * std::max(1.0, space.norm(x));
    for (const auto& v : dirs) {
      const Mat dd = (sys.derivative(sys.translate(x, Vec(h * v))) - sys.derivative(sys.translate(x, Vec(-h * v)))) / (2.0 * h);
      b.df_lipschitz = std::max(b.df_lipschitz, operator_norm(dd, space) / space.norm(v));
    }
    const auto chart = make_chart(x, split.unstable[i], split.center_stable[i]);
    b.pi_u_norm = std::max(b.pi_u_norm, operator_norm(chart.projector_u(), space));
    b.pi_cs_norm = std::max(b.pi_cs_norm, operator_norm(chart.projector_cs(), space));
  }
  for (const auto& disc : discs) b.dh_lipschitz = std::max(b.dh_lipschitz, disc_second_difference(disc, space));
  return b;
}

struct ComparisonRecord {
  double p_deviation = 0.0;      ///< max_k ||pi^u_{x_{-k}}|_{E^u_{y_{-k}}} P_k - I||
  double p_deviation_ratio = 0.0;///< max_k deviation / (M^3 |y_{-k} - x_{-k}|)
  double three_halves = 0.0;     ///< max of ||P||, ||P^{-1}||, ||pi^u|||, ||(pi^u|)^{-1}||
  double q_log_gap = 0.0;        ///< max_k |log|det Q_k| - log J^u(y_{-k-1})|
  bool within_bounds = true;
};

/// P_k and Q_k for a point y on level 0 of `chain` (base orbit x), k = 0..n-1.
/// E^u_{y_{-k}} comes from power iteration along y's own stored orbit, so
/// the comparison tests the disc tangent against an independent frame.
inline ComparisonRecord comparison_operators(const DynamicalSystem& sys, const BasisField& field, const DiscChain& chain,
                                             const OrbitSegment& y, Eigen::Index n, double M) {
  const auto& space = sys.space();
  require(n + 1 <= static_cast<Eigen::Index>(chain.levels.size()) && y.length() >= n + 1, ErrorKind::itinerary,
          "chain or itinerary shorter than the horizon");
  const auto frames_y = orbit_unstable_frames(sys, y, n);
  ComparisonRecord rec;
  const Eigen::Index k = chain.at(0).k();
  const Mat I = Mat::Identity(k, k);
  // P_j as an ambient map acting on E^u_{x_{-j}}, plus its data.
  struct PData {
    Mat amb;  // (U + Dh(a)) A_u
    Mat tangent;
  };
  auto p_data = [&](Eigen::Index j) {
    const auto& disc = chain.at(j);
    const Vec a = disc.chart.u_coords(sys.displacement(disc.base(), y.back(j)));
    Mat dh;
    disc.h(a, &dh);
    const Mat T = disc.chart.unstable + dh;
    return PData{T * disc.chart.inverse.topRows(k), T};
  };
  for (Eigen::Index j = 0; j <= n; ++j) {
    const auto& disc = chain.at(j);
    const Mat& U = disc.chart.unstable;
    const Mat Au = disc.chart.inverse.topRows(k);
    const PData P = p_data(j);
    const Mat& G = frames_y[static_cast<std::size_t>(j)];
    const auto ychart = make_chart(y.back(j), G, center_stable_frame(sys, y.back(j), 40));
    const Mat dev = U * (Au * ychart.projector_u() * P.tangent - I) * Au;
    const double deviation = operator_norm(dev, U, space);
    rec.p_deviation = std::max(rec.p_deviation, deviation);
    // Roundoff allowance so that y = x (deviation ~1e-16) is not a violation.
    const double bound = M * M * M * sys.distance(y.back(j), disc.base()) + 1e-12;
    rec.p_deviation_ratio = std::max(rec.p_deviation_ratio, deviation / bound);
    const Mat piu = disc.chart.projector_u();
    rec.three_halves = std::max({rec.three_halves, operator_norm(P.amb, U, space), 1.0 / min_expansion(P.amb, U, space),
                                 operator_norm(piu, G, space), 1.0 / min_expansion(piu, G, space)});
    if (j < n) {
      // Q_j = pi^u_{x_{-j}} Df_{y_{-j-1}} P_{j+1} : E^u_{x_{-j-1}} -> E^u_{x_{-j}}.
      const auto& below = chain.at(j + 1);
      const PData Pb = p_data(j + 1);
      const Mat Q = piu * sys.derivative(y.back(j + 1)) * Pb.amb;
      const UnitBasis from = field.basis(sys, below.base(), below.chart.unstable);
      const UnitBasis to = field.basis(sys, disc.base(), U);
      const double logq = std::log(std::abs(det_between_bases(Q, from, to, 1e-6)));
      const double logj = std::log(unstable_jacobian(sys, field, y.back(j + 1), frames_y[static_cast<std::size_t>(j + 1)]));
      rec.q_log_gap = std::max(rec.q_log_gap, std::abs(logq - logj));
    }
  }
  rec.within_bounds = rec.p_deviation_ratio <= 1.0 && rec.three_halves <= 1.5;
  return rec;
}

/// A pair of points on level 0 of a common disc chain, with stored orbits.
struct DistortionPair {
  const DiscChain* chain = nullptr;
  OrbitSegment y;
  OrbitSegment z;
};

struct DistortionEstimate {
  double C = 0.0;               ///< 2 x measured sup of max(product, 1/product)
  double measured_sup = 1.0;
  double max_cauchy_tail = 0.0;
  double min_cauchy_rate = std::numeric_limits<double>::infinity();
  ComparisonRecord comparison;  ///< worst case over pairs (both points)
  double M = 0.0;
  std::size_t pairs = 0;
  Eigen::Index horizon = 0;
};

inline constexpr double kDistortionBlowup = 1e6;

inline DistortionEstimate estimate_distortion_constant(const DynamicalSystem& sys, const BasisField& field,
                                                       const std::vector<DistortionPair>& pairs, Eigen::Index n,
                                                       double M, unsigned workers = 1) {
  require(!pairs.empty(), ErrorKind::invalid_input, "no sample pairs");
  std::vector<DistortionRecord> recs(pairs.size());
  std::vector<ComparisonRecord> comps(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      recs[i] = distortion_product(sys, field, pairs[i].y, pairs[i].z, n);
      if (pairs[i].chain) {
        const auto cy = comparison_operators(sys, field, *pairs[i].chain, pairs[i].y, n, M);
        const auto cz = comparison_operators(sys, field, *pairs[i].chain, pairs[i].z, n, M);
        comps[i].p_deviation = std::max(cy.p_deviation, cz.p_deviation);
        comps[i].p_deviation_ratio = std::max(cy.p_deviation_ratio, cz.p_deviation_ratio);
        comps[i].three_halves = std::max(cy.three_halves, cz.three_halves);
        comps[i].q_log_gap = std::max(cy.q_log_gap, cz.q_log_gap);
        comps[i].within_bounds = cy.within_bounds && cz.within_bounds;
      }
    }
  });
  DistortionEstimate est;
  est.M = M;
  est.pairs = pairs.size();
  est.horizon = n;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double e = recs[i].extreme();
    if (!(e <= kDistortionBlowup))
      fail(ErrorKind::distortion_failure, "distortion product " + std::to_string(e) + " exceeds 1e6");
    est.measured_sup = std::max(est.measured_sup, e);
    est.max_cauchy_tail = std::max(est.max_cauchy_tail, recs[i].cauchy_tail);
    est.min_cauchy_rate = std::min(est.min_cauchy_rate, recs[i].cauchy_rate);
    est.comparison.p_deviation = std::max(est.comparison.p_deviation, comps[i].p_deviation);
    est.comparison.p_deviation_ratio = std::max(est.comparison.p_deviation_ratio, comps[i].p_deviation_ratio);
    est.comparison.three_halves = std::max(est.comparison.three_halves, comps[i].three_halves);
    est.comparison.q_log_gap = std::max(est.comparison.q_log_gap, comps[i].q_log_gap);
    est.comparison.within_bounds = est.comparison.within_bounds && comps[i].within_bounds;
  }
  est.C = 2.0 * est.measured_sup;
  return est;
}

/// Lower bound k^{-k/2} M^{-k} e^{k lambda0} on J^u.
inline double jacobian_lower_bound(Eigen::Index k, double M, double lambda0) {
  const double kd = static_cast<double>(k);
  return std::pow(kd, -0.5 * kd) * std::pow(M, -kd) * std::exp(kd * lambda0);
}

}  // namespace srblab
