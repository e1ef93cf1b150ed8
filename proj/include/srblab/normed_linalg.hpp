#pragma once

// Determinant and Lebesgue-measure calculus on finite-dimensional normed
// spaces. A k-dimensional subspace carries no canonical volume; choosing a
// unit basis eta = {v_i} fixes one (the push-forward of the unit cube measure
// under the coordinate map L_eta), and determinants of maps between subspaces
// are taken between such coordinate systems.

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "srblab/common.hpp"
#include "srblab/detail/simplex.hpp"

namespace srblab {

// ---------------------------------------------------------------------------
// Norms

enum class NormKind { p_norm, weighted_sup };

/// Either an l^p norm (p in [1, inf]) or x -> max_i w_i |x_i|.
struct NormDescriptor {
  NormKind kind = NormKind::p_norm;
  double p = std::numeric_limits<double>::infinity();
  Vec weights;

  static NormDescriptor sup() { return {}; }
  static NormDescriptor lp(double p) { return {NormKind::p_norm, p, {}}; }
  static NormDescriptor weighted(Vec w) {
    return {NormKind::weighted_sup, std::numeric_limits<double>::infinity(), std::move(w)};
  }

  bool is_sup_like() const { return kind == NormKind::weighted_sup || std::isinf(p); }
  bool is_euclidean() const { return kind == NormKind::p_norm && p == 2.0; }
  bool is_polyhedral() const { return is_sup_like() || (kind == NormKind::p_norm && p == 1.0); }

  std::string describe() const {
    if (kind == NormKind::weighted_sup) return "weighted-sup";
    if (std::isinf(p)) return "sup";
    return "p=" + std::to_string(p);
  }
};

class NormedSpace {
 public:
  NormedSpace() = default;
  NormedSpace(std::size_t dim, NormDescriptor norm) : dim_(dim), norm_(std::move(norm)) {
    require(dim_ >= 1 && dim_ <= kMaxDim, ErrorKind::invalid_input,
            "dimension must lie in [1, " + std::to_string(kMaxDim) + "]");
    if (norm_.kind == NormKind::p_norm) {
      require(norm_.p >= 1.0, ErrorKind::invalid_input, "p-norm requires p >= 1");
    } else {
      require(static_cast<std::size_t>(norm_.weights.size()) == dim_, ErrorKind::invalid_input,
              "weight vector length must equal dimension");
      require((norm_.weights.array() > 0.0).all() && norm_.weights.allFinite(), ErrorKind::invalid_input,
              "weights must be positive and finite");
    }
  }

  std::size_t dim() const { return dim_; }
  const NormDescriptor& descriptor() const { return norm_; }

  double norm(const double* x) const {
    const auto n = static_cast<Eigen::Index>(dim_);
    Eigen::Map<const Vec> v(x, n);
    if (norm_.kind == NormKind::weighted_sup) return (v.cwiseAbs().cwiseProduct(norm_.weights)).maxCoeff();
    if (std::isinf(norm_.p)) return v.cwiseAbs().maxCoeff();
    if (norm_.p == 1.0) return v.cwiseAbs().sum();
    if (norm_.p == 2.0) return v.norm();
    const double scale = v.cwiseAbs().maxCoeff();
    if (scale == 0.0) return 0.0;
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) s += std::pow(std::abs(v(i)) / scale, norm_.p);
    return scale * std::pow(s, 1.0 / norm_.p);
  }

  double norm(const Vec& v) const {
    require(static_cast<std::size_t>(v.size()) == dim_, ErrorKind::contract, "vector dimension mismatch");
    return norm(v.data());
  }

 private:
  std::size_t dim_ = 1;
  NormDescriptor norm_;
};

// ---------------------------------------------------------------------------
// Distance to a span

namespace detail {

// Chebyshev-type problems min_c max_i w_i |v - W c|_i as a single-phase LP.
// With m = max_i w_i |v_i| and t = m - u the origin is feasible.
inline Vec sup_best_coefficients(const Vec& v, const Mat& W, const Vec& weights) {
  const Eigen::Index d = v.size();
  const Eigen::Index k = W.cols();
  const double m = (v.cwiseAbs().cwiseProduct(weights)).maxCoeff();
  // Variables: c+ (k), c- (k), u.
  Mat A = Mat::Zero(2 * d, 2 * k + 1);
  Vec b(2 * d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double inv_w = 1.0 / weights(i);
    //  v_i - W_i c <= (m - u)/w_i
    A.block(i, 0, 1, k) = -W.row(i);
    A.block(i, k, 1, k) = W.row(i);
    A(i, 2 * k) = inv_w;
    b(i) = m * inv_w - v(i);
    // -(v_i - W_i c) <= (m - u)/w_i
    A.block(d + i, 0, 1, k) = W.row(i);
    A.block(d + i, k, 1, k) = -W.row(i);
    A(d + i, 2 * k) = inv_w;
    b(d + i) = m * inv_w + v(i);
  }
  Vec c = Vec::Zero(2 * k + 1);
  c(2 * k) = 1.0;
  const auto sol = simplex_max(A, b.cwiseMax(0.0), c);
  return sol.x.head(k) - sol.x.segment(k, k);
}

// min_c sum_i |v - W c|_i, written with s_i = |v_i| - (u+_i - u-_i).
inline Vec l1_best_coefficients(const Vec& v, const Mat& W) {
  const Eigen::Index d = v.size();
  const Eigen::Index k = W.cols();
  // Variables: c+ (k), c- (k), u+ (d), u- (d).
  Mat A = Mat::Zero(2 * d, 2 * k + 2 * d);
  Vec b(2 * d);
  for (Eigen::Index i = 0; i < d; ++i) {
    A.block(i, 0, 1, k) = -W.row(i);
    A.block(i, k, 1, k) = W.row(i);
    A(i, 2 * k + i) = 1.0;
    A(i, 2 * k + d + i) = -1.0;
    b(i) = std::abs(v(i)) - v(i);
    A.block(d + i, 0, 1, k) = W.row(i);
    A.block(d + i, k, 1, k) = -W.row(i);
    A(d + i, 2 * k + i) = 1.0;
    A(d + i, 2 * k + d + i) = -1.0;
    b(d + i) = std::abs(v(i)) + v(i);
  }
  Vec c = Vec::Zero(2 * k + 2 * d);
  c.segment(2 * k, d).setOnes();
  c.tail(d).setConstant(-1.0);
  const auto sol = simplex_max(A, b.cwiseMax(0.0), c);
  return sol.x.head(k) - sol.x.segment(k, k);
}

// Golden-section search of a convex function on [lo, hi].
template <typename F>
double golden_section(F&& f, double lo, double hi, double tol) {
  constexpr double inv_phi = 0.6180339887498949;
  double a = lo, b = hi;
  double x1 = b - inv_phi * (b - a);
  double x2 = a + inv_phi * (b - a);
  double f1 = f(x1), f2 = f(x2);
  for (int it = 0; it < 200 && (b - a) > tol; ++it) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - inv_phi * (b - a);
      f1 = f(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + inv_phi * (b - a);
      f2 = f(x2);
    }
  }
  return 0.5 * (a + b);
}

// Damped Newton on sum_i (r_i^2 + eps^2)^{p/2}, a smoothed monotone transform
// of the norm, with eps driven to zero (only needed for p < 2, where the
// curvature of |r|^p blows up at r = 0). A coordinate-descent pass with
// golden-section line searches polishes the result.
inline Vec smooth_norm_coefficients(const Vec& v, const Mat& W, const NormedSpace& space, double tol) {
  const Eigen::Index k = W.cols();
  const double p = space.descriptor().p;
  const double s = std::max(v.cwiseAbs().maxCoeff(), 1e-300);
  const Vec vs = v / s;
  Vec c = W.colPivHouseholderQr().solve(vs);

  auto newton = [&](double eps) {
    const double e2 = eps * eps;
    auto objective = [&](const Vec& cc) {
      const Vec r = vs - W * cc;
      double f = 0.0;
      for (Eigen::Index i = 0; i < r.size(); ++i) f += std::pow(r(i) * r(i) + e2, 0.5 * p);
      return f;
    };
    double f = objective(c);
    for (int iter = 0; iter < 100; ++iter) {
      const Vec r = vs - W * c;
      Vec g1(r.size()), h(r.size());
      for (Eigen::Index i = 0; i < r.size(); ++i) {
        const double q = r(i) * r(i) + e2;
        // d/dr (q^{p/2}) and d^2/dr^2 (q^{p/2}); at q = 0 use the p >= 2 limits.
        if (q == 0.0) {
          g1(i) = 0.0;
          h(i) = p == 2.0 ? 2.0 : 0.0;
          continue;
        }
        g1(i) = p * r(i) * std::pow(q, 0.5 * p - 1.0);
        h(i) = p * std::pow(q, 0.5 * p - 2.0) * (q + (p - 2.0) * r(i) * r(i));
      }
      const Vec grad = -W.transpose() * g1;
      Mat H = W.transpose() * h.asDiagonal() * W;
      H.diagonal().array() += 1e-14 * std::max(1e-300, H.diagonal().maxCoeff());
      const Vec step = H.ldlt().solve(grad);
      const double slope = grad.dot(step);
      if (!(slope > 0.0)) break;
      double t = 1.0;
      double trial = objective(Vec(c - step));
      while (trial > f - 1e-4 * t * slope && t > 1e-12) {
        t *= 0.5;
        trial = objective(Vec(c - t * step));
      }
      if (trial >= f) break;
      c -= t * step;
      const double gain = f - trial;
      f = trial;
      if (gain <= 1e-17 * f) break;
    }
  };
  if (p < 2.0) {
    for (double eps = 1e-1; eps > 1e-16; eps *= 0.1) newton(eps);
  }
  newton(0.0);

  c *= s;
  Vec r = v - W * c;
  double best = space.norm(r);
  const double scale = std::max(1.0, space.norm(v));
  for (int sweep = 0; sweep < 50; ++sweep) {
    const double start = best;
    for (Eigen::Index j = 0; j < k; ++j) {
      const Vec wj = W.col(j);
      const double wn = std::max(space.norm(wj), 1e-300);
      auto along = [&](double t) { return space.norm(Vec(r - t * wj)); };
      const double radius = 2.0 * best / wn;
      const double t = golden_section(along, -radius, radius, 1e-15 * scale / wn);
      const double value = along(t);
      if (value < best) {
        r -= t * wj;
        c(j) += t;
        best = value;
      }
    }
    if (start - best <= 1e-3 * tol * scale) break;
  }
  return c;
}

}  // namespace detail

/// Coefficients c minimising |v - W c| in the norm of `space`. Polyhedral
/// norms are solved exactly by linear programming, the Euclidean norm by
/// least squares, other p-norms by damped Newton.
inline Vec best_coefficients(const Vec& v, const Mat& spanning, const NormedSpace& space, double tol = 1e-10) {
  require(static_cast<std::size_t>(v.size()) == space.dim(), ErrorKind::contract, "dist_to_span: dimension mismatch");
  require(v.allFinite() && spanning.allFinite(), ErrorKind::invalid_input, "dist_to_span: non-finite input");
  if (spanning.cols() == 0) return Vec();
  require(spanning.rows() == v.size(), ErrorKind::contract, "dist_to_span: spanning vectors have wrong dimension");
  const auto& nd = space.descriptor();
  if (nd.is_euclidean()) return spanning.colPivHouseholderQr().solve(v);
  if (nd.kind == NormKind::weighted_sup) return detail::sup_best_coefficients(v, spanning, nd.weights);
  if (std::isinf(nd.p)) return detail::sup_best_coefficients(v, spanning, Vec::Ones(v.size()));
  if (nd.p == 1.0) return detail::l1_best_coefficients(v, spanning);
  return detail::smooth_norm_coefficients(v, spanning, space, tol);
}

/// inf_c |v - sum_j c_j w_j|; columns of `spanning` are the w_j.
inline double dist_to_span(const Vec& v, const Mat& spanning, const NormedSpace& space, double tol = 1e-10) {
  const Vec c = best_coefficients(v, spanning, space, tol);
  if (c.size() == 0) return space.norm(v);
  return std::min(space.norm(Vec(v - spanning * c)), space.norm(v));
}

inline double dist_to_span(const Vec& v, const std::vector<Vec>& spanning, const NormedSpace& space,
                           double tol = 1e-10) {
  Mat W(v.size(), static_cast<Eigen::Index>(spanning.size()));
  for (std::size_t j = 0; j < spanning.size(); ++j) {
    require(spanning[j].size() == v.size(), ErrorKind::contract, "dist_to_span: spanning vectors have wrong dimension");
    W.col(static_cast<Eigen::Index>(j)) = spanning[j];
  }
  return dist_to_span(v, W, space, tol);
}

// ---------------------------------------------------------------------------
// Unit bases

/// Ordered unit vectors (columns) spanning a k-dimensional subspace, with
/// alpha = min_i dist(v_i, span{v_j : j != i}).
struct UnitBasis {
  Mat vectors;
  double alpha = 0.0;
  NormedSpace space;

  Eigen::Index k() const { return vectors.cols(); }
  Eigen::Index ambient_dim() const { return vectors.rows(); }
};

inline constexpr double kUnitTolerance = 1e-12;
inline constexpr double kDegenerateAlpha = 1e-8;
inline constexpr Eigen::Index kMaxBasisSize = 16;

inline Mat drop_column(const Mat& m, Eigen::Index j) {
  Mat out(m.rows(), m.cols() - 1);
  for (Eigen::Index c = 0, o = 0; c < m.cols(); ++c)
    if (c != j) out.col(o++) = m.col(c);
  return out;
}

inline double separation_constant(const Mat& vectors, const NormedSpace& space) {
  if (vectors.cols() == 1) return space.norm(Vec(vectors.col(0)));
  double alpha = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < vectors.cols(); ++i)
    alpha = std::min(alpha, dist_to_span(Vec(vectors.col(i)), drop_column(vectors, i), space));
  return alpha;
}

inline UnitBasis make_unit_basis(const Mat& vectors, const NormedSpace& space) {
  require(static_cast<std::size_t>(vectors.rows()) == space.dim(), ErrorKind::contract,
          "make_unit_basis: vectors have wrong ambient dimension");
  require(vectors.cols() >= 1 && vectors.cols() <= std::min<Eigen::Index>(kMaxBasisSize, vectors.rows()),
          ErrorKind::contract, "make_unit_basis: need 1 <= k <= min(d, 16)");
  require(vectors.allFinite(), ErrorKind::invalid_input, "make_unit_basis: non-finite input");

  const double alpha = separation_constant(vectors, space);
  if (alpha < kDegenerateAlpha)
    fail(ErrorKind::degenerate_basis, "separation constant " + std::to_string(alpha) + " below 1e-8");
  for (Eigen::Index i = 0; i < vectors.cols(); ++i) {
    const double n = space.norm(Vec(vectors.col(i)));
    if (std::abs(n - 1.0) > kUnitTolerance)
      fail(ErrorKind::normalization, "vector " + std::to_string(i) + " has norm " + std::to_string(n));
  }
  return UnitBasis{vectors, alpha, space};
}

/// Scales each column to unit norm, then validates.
inline UnitBasis normalize_to_unit_basis(Mat vectors, const NormedSpace& space) {
  for (Eigen::Index i = 0; i < vectors.cols(); ++i) {
    const double n = space.norm(Vec(vectors.col(i)));
    require(n > 0.0 && std::isfinite(n), ErrorKind::degenerate_basis, "zero or non-finite basis vector");
    vectors.col(i) /= n;
  }
  return make_unit_basis(vectors, space);
}

// ---------------------------------------------------------------------------
// Coordinates and determinants

/// Coefficient matrix of a map between subspaces, in the chosen unit bases.
struct LinearMapBetweenSubspaces {
  UnitBasis domain_basis;
  UnitBasis codomain_basis;
  Mat coefficients;
  double residual = 0.0;  ///< largest column residual of the coordinate solve
};

using LongMat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

// Coordinates in extended precision; determinant identities then hold at
// roundoff level even for moderately skewed bases.
inline LongMat coordinates_long(const LongMat& images, const UnitBasis& eta, double scale, double rel_tol,
                                double* residual_out) {
  require(images.rows() == eta.ambient_dim(), ErrorKind::contract, "coordinates: ambient dimension mismatch");
  require(images.allFinite(), ErrorKind::invalid_input, "coordinates: non-finite images");
  const LongMat basis = eta.vectors.cast<long double>();
  LongMat coords = basis.colPivHouseholderQr().solve(images);
  double residual = 0.0;
  for (Eigen::Index j = 0; j < images.cols(); ++j) {
    const Vec r = (images.col(j) - basis * coords.col(j)).cast<double>();
    residual = std::max(residual, eta.space.norm(r));
  }
  if (residual_out) *residual_out = residual;
  if (residual > rel_tol * std::max(scale, 1e-300))
    fail(ErrorKind::subspace, "image leaves codomain span (residual " + std::to_string(residual) + ")");
  return coords;
}

inline double column_scale(const Mat& images, const NormedSpace& space) {
  double scale = 0.0;
  for (Eigen::Index j = 0; j < images.cols(); ++j) scale = std::max(scale, space.norm(Vec(images.col(j))));
  return scale;
}

inline double long_determinant(const LongMat& m) {
  if (m.rows() == 0) return 1.0;
  return static_cast<double>(m.partialPivLu().determinant());
}

}  // namespace detail

/// Expresses the columns of `images` in the basis `eta`. Throws a subspace
/// error if some column leaves span(eta) by more than rel_tol * scale.
inline Mat coordinates_in_basis(const Mat& images, const UnitBasis& eta, double scale, double rel_tol,
                                double* residual_out = nullptr) {
  return detail::coordinates_long(images.cast<long double>(), eta, scale, rel_tol, residual_out).cast<double>();
}

inline double lu_determinant(const Mat& m) { return detail::long_determinant(m.cast<long double>()); }

inline constexpr double kSubspaceTolerance = 1e-8;

/// Coordinate matrix L_W^{-1} T L_V of an ambient map T restricted to span(V).
inline LinearMapBetweenSubspaces coordinate_matrix(const Mat& T, const UnitBasis& etaV, const UnitBasis& etaW,
                                                   double rel_tol = kSubspaceTolerance) {
  require(etaV.k() == etaW.k(), ErrorKind::contract, "bases have different sizes");
  require(T.rows() == etaW.ambient_dim() && T.cols() == etaV.ambient_dim(), ErrorKind::contract,
          "map does not match ambient dimensions");
  require(T.allFinite(), ErrorKind::invalid_input, "non-finite map");
  const Mat images = T * etaV.vectors;
  LinearMapBetweenSubspaces out{etaV, etaW, {}, 0.0};
  out.coefficients = coordinates_in_basis(images, etaW, detail::column_scale(images, etaW.space), rel_tol, &out.residual);
  return out;
}

/// det_{etaV, etaW}(T) = det(L_{etaW}^{-1} T L_{etaV}).
inline double det_between_bases(const Mat& T, const UnitBasis& etaV, const UnitBasis& etaW,
                                double rel_tol = kSubspaceTolerance) {
  require(etaV.k() <= kMaxBasisSize, ErrorKind::contract, "k above 16");
  require(etaV.k() == etaW.k(), ErrorKind::contract, "bases have different sizes");
  require(T.rows() == etaW.ambient_dim() && T.cols() == etaV.ambient_dim(), ErrorKind::contract,
          "map does not match ambient dimensions");
  require(T.allFinite(), ErrorKind::invalid_input, "non-finite map");
  const LongMat images = T.cast<long double>() * etaV.vectors.cast<long double>();
  const double scale = detail::column_scale(images.cast<double>(), etaW.space);
  return detail::long_determinant(detail::coordinates_long(images, etaW, scale, rel_tol, nullptr));
}

/// Same determinant when only the images T v_i are known.
inline double det_from_images(const Mat& images, const UnitBasis& etaW, double rel_tol = kSubspaceTolerance) {
  require(images.cols() == etaW.k(), ErrorKind::contract, "image count does not match basis size");
  const double scale = detail::column_scale(images, etaW.space);
  return detail::long_determinant(detail::coordinates_long(images.cast<long double>(), etaW, scale, rel_tol, nullptr));
}

// ---------------------------------------------------------------------------
// Operator norms

namespace detail {

// Extremum of |T L a| / |L a| over coefficient vectors a: quasi-random
// directions (2^k * 64 Halton points) followed by pattern-search refinement
// of the best few.
inline double extremal_ratio(const Mat& T, const Mat& domain, const NormedSpace& space, bool maximize) {
  const Eigen::Index k = domain.cols();
  const double sign = maximize ? 1.0 : -1.0;
  auto score = [&](const Vec& a) {
    const Vec x = domain * a;
    const double nx = space.norm(x);
    if (nx <= 0.0) return -std::numeric_limits<double>::infinity();
    return sign * space.norm(Vec(T * x)) / nx;
  };

  const std::size_t budget = (std::size_t{1} << std::min<Eigen::Index>(k, 12)) * 64;
  struct Candidate {
    double value;
    Vec a;
  };
  auto better = [](const Candidate& x, const Candidate& y) { return x.value > y.value; };
  std::vector<Candidate> best;
  auto consider = [&](Vec a) {
    const double r = score(a);
    best.push_back({r, std::move(a)});
    if (best.size() > 64) {
      std::nth_element(best.begin(), best.begin() + 8, best.end(), better);
      best.resize(8);
    }
  };
  for (Eigen::Index j = 0; j < k; ++j) {
    Vec e = Vec::Zero(k);
    e(j) = 1.0;
    consider(e);
  }
  for (std::size_t i = 1; i <= budget; ++i) {
    Vec a(k);
    for (Eigen::Index j = 0; j < k; ++j) a(j) = 2.0 * radical_inverse(i, nth_prime(static_cast<std::size_t>(j))) - 1.0;
    consider(a);
  }
  std::sort(best.begin(), best.end(), better);
  if (best.size() > 8) best.resize(8);

  double result = -std::numeric_limits<double>::infinity();
  for (auto& cand : best) {
    Vec a = cand.a;
    double value = cand.value;
    double step = 0.25 * std::max(1e-3, a.cwiseAbs().maxCoeff());
    while (step > 1e-7) {
      bool improved = false;
      for (Eigen::Index j = 0; j < k; ++j) {
        for (double sgn : {1.0, -1.0}) {
          Vec trial = a;
          trial(j) += sgn * step;
          const double r = score(trial);
          if (r > value) {
            value = r;
            a = trial;
            improved = true;
          }
        }
      }
      if (!improved) step *= 0.5;
    }
    result = std::max(result, value);
  }
  return sign * result;
}

}  // namespace detail

/// Estimate of sup_{x in span(domain)} |T x| / |x|. Exact for the Euclidean
/// norm and for full-space maps under l^1 / sup / weighted sup; otherwise a
/// deterministic boundary search (2^k * 64 Halton directions, refined),
/// accurate to roughly 1e-3 relative.
inline double operator_norm(const Mat& T, const Mat& domain, const NormedSpace& space) {
  require(T.cols() == domain.rows(), ErrorKind::contract, "operator_norm: shape mismatch");
  const Eigen::Index k = domain.cols();
  const auto& nd = space.descriptor();
  if (nd.is_euclidean()) {
    const Mat Q = domain.householderQr().householderQ() * Mat::Identity(domain.rows(), k);
    Eigen::JacobiSVD<Mat> svd(T * Q);
    return svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
  }
  const bool full = k == domain.rows() && T.rows() == T.cols() &&
                    std::abs(lu_determinant(domain)) > 1e-12 * std::pow(domain.cwiseAbs().maxCoeff(), double(k));
  if (full) {
    const Mat M = T;  // restriction to the full space; domain basis irrelevant
    if (nd.kind == NormKind::weighted_sup) {
      double best = 0.0;
      for (Eigen::Index i = 0; i < M.rows(); ++i) {
        double s = 0.0;
        for (Eigen::Index j = 0; j < M.cols(); ++j) s += std::abs(M(i, j)) / nd.weights(j);
        best = std::max(best, nd.weights(i) * s);
      }
      return best;
    }
    if (std::isinf(nd.p)) return M.cwiseAbs().rowwise().sum().maxCoeff();
    if (nd.p == 1.0) return M.cwiseAbs().colwise().sum().maxCoeff();
  }

  return detail::extremal_ratio(T, domain, space, true);
}

/// inf_{x in span(domain)} |T x| / |x| by the same deterministic search.
inline double min_expansion(const Mat& T, const Mat& domain, const NormedSpace& space) {
  require(T.cols() == domain.rows(), ErrorKind::contract, "min_expansion: shape mismatch");
  if (space.descriptor().is_euclidean()) {
    const Mat Q = domain.householderQr().householderQ() * Mat::Identity(domain.rows(), domain.cols());
    Eigen::JacobiSVD<Mat> svd(T * Q);
    const auto& sv = svd.singularValues();
    return sv.size() ? sv(sv.size() - 1) : 0.0;
  }
  if (domain.cols() == 1) {
    const Vec x = domain.col(0);
    return space.norm(Vec(T * x)) / space.norm(x);
  }
  return detail::extremal_ratio(T, domain, space, false);
}

inline double operator_norm(const Mat& T, const NormedSpace& space) {
  return operator_norm(T, Mat::Identity(T.cols(), T.cols()), space);
}

// ---------------------------------------------------------------------------
// Norm and Lipschitz bounds for determinants

struct DetBounds {
  double norm_bound = 0.0;   ///< k^{k/2} |T|^k alpha^{-k}
  double operator_norm = 0.0;
  double alpha = 0.0;
  Eigen::Index k = 0;
};

inline double det_norm_bound(Eigen::Index k, double op_norm, double alpha) {
  const double kd = static_cast<double>(k);
  return std::pow(kd, 0.5 * kd) * std::pow(op_norm, kd) * std::pow(alpha, -kd);
}

/// k^{k/2+1} (max |T_i|)^{k-1} alpha^{-k}: Lipschitz constant of det_{V,W} on
/// the ball of radius max |T_i|.
inline double det_lipschitz_coefficient(Eigen::Index k, double max_op_norm, double alpha) {
  const double kd = static_cast<double>(k);
  return std::pow(kd, 0.5 * kd + 1.0) * std::pow(max_op_norm, kd - 1.0) * std::pow(alpha, -kd);
}

inline DetBounds det_bounds(const Mat& T, const UnitBasis& etaV, const UnitBasis& etaW) {
  require(etaV.k() == etaW.k(), ErrorKind::contract, "bases have different sizes");
  DetBounds out;
  out.k = etaV.k();
  out.alpha = std::min(etaV.alpha, etaW.alpha);
  require(out.alpha > 0.0, ErrorKind::invalid_input, "alpha must be positive");
  out.operator_norm = operator_norm(T, etaV.vectors, etaV.space);
  out.norm_bound = det_norm_bound(out.k, out.operator_norm, out.alpha);
  return out;
}

struct DetLipschitzCheck {
  double det_difference = 0.0;
  double coefficient = 0.0;
  double difference_norm = 0.0;
  bool holds = false;
};

inline DetLipschitzCheck det_lipschitz_check(const Mat& T1, const Mat& T2, const UnitBasis& etaV,
                                             const UnitBasis& etaW) {
  DetLipschitzCheck out;
  const double alpha = std::min(etaV.alpha, etaW.alpha);
  const double n1 = operator_norm(T1, etaV.vectors, etaV.space);
  const double n2 = operator_norm(T2, etaV.vectors, etaV.space);
  out.coefficient = det_lipschitz_coefficient(etaV.k(), std::max(n1, n2), alpha);
  out.difference_norm = operator_norm(Mat(T2 - T1), etaV.vectors, etaV.space);
  out.det_difference = std::abs(det_between_bases(T2, etaV, etaW) - det_between_bases(T1, etaV, etaW));
  out.holds = out.det_difference <= out.coefficient * out.difference_norm * (1.0 + 1e-9) + 1e-14;
  return out;
}

// ---------------------------------------------------------------------------
// Change of basis

/// K = mu_{etaW}(A) / mu_{etaV}(A) for two unit bases of the same subspace.
inline double measure_ratio(const UnitBasis& etaV, const UnitBasis& etaW) {
  require(etaV.k() == etaW.k(), ErrorKind::subspace, "bases span subspaces of different dimension");
  return std::abs(detail::long_determinant(
      detail::coordinates_long(etaV.vectors.cast<long double>(), etaW, 1.0, kSubspaceTolerance, nullptr)));
}

inline double change_of_basis_bound(Eigen::Index k, double alpha, double sup_difference) {
  const double kd = static_cast<double>(k);
  return std::pow(kd, 1.5 * kd + 3.0) * std::pow(alpha, -kd - 2.0) * sup_difference;
}

struct BasisChange {
  double det = 1.0;            ///< det_{V,V}(T) with T v_i = u_i
  double sup_difference = 0.0; ///< sup_i |u_i - v_i|
  double bound = 0.0;          ///< k^{3k/2+3} alpha^{-k-2} sup_i |u_i - v_i|
  double measure_factor = 1.0; ///< mu_V(A) = measure_factor * mu_U(A)
  bool within_bound = true;
};

inline BasisChange basis_change_det(const UnitBasis& etaV, const UnitBasis& etaU) {
  require(etaV.k() == etaU.k(), ErrorKind::subspace, "bases span subspaces of different dimension");
  BasisChange out;
  out.det = detail::long_determinant(
      detail::coordinates_long(etaU.vectors.cast<long double>(), etaV, 1.0, kSubspaceTolerance, nullptr));
  for (Eigen::Index i = 0; i < etaV.k(); ++i)
    out.sup_difference =
        std::max(out.sup_difference, etaV.space.norm(Vec(etaU.vectors.col(i) - etaV.vectors.col(i))));
  out.bound = change_of_basis_bound(etaV.k(), etaV.alpha, out.sup_difference);
  out.measure_factor = std::abs(out.det);
  out.within_bound = std::abs(out.det - 1.0) <= out.bound + 1e-14;
  return out;
}

}  // namespace srblab
