#pragma once

#include <limits>
#include <vector>

#include "srblab/common.hpp"

namespace srblab::detail {

/// Dense tableau simplex for   max c.x  s.t.  A x <= b,  x >= 0,  with b >= 0,
/// so the slack basis is feasible from the start. Bland's rule prevents cycling.
/// Problems here are tiny (at most a few dozen rows).
struct SimplexResult {
  Vec x;
  double objective = 0.0;
  bool bounded = true;
};

inline SimplexResult simplex_max(const Mat& A, const Vec& b, const Vec& c) {
  const Eigen::Index m = A.rows();
  const Eigen::Index n = A.cols();
  require(b.size() == m && c.size() == n, ErrorKind::contract, "simplex: shape mismatch");
  require((b.array() >= -1e-14).all(), ErrorKind::contract, "simplex: rhs must be nonnegative");

  // Columns: [x (n) | slack (m) | rhs].
  Mat tab = Mat::Zero(m + 1, n + m + 1);
  tab.topLeftCorner(m, n) = A;
  tab.block(0, n, m, m).setIdentity();
  tab.col(n + m).head(m) = b.cwiseMax(0.0);
  tab.row(m).head(n) = -c.transpose();

  std::vector<Eigen::Index> basis(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) basis[static_cast<std::size_t>(i)] = n + i;

  const double scale = std::max({1.0, A.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()});
  const double eps = 1e-13 * scale;

  SimplexResult result;
  for (int iter = 0; iter < 10000; ++iter) {
    Eigen::Index enter = -1;
    for (Eigen::Index j = 0; j < n + m; ++j) {
      if (tab(m, j) < -eps) {
        enter = j;
        break;
      }
    }
    if (enter < 0) break;

    Eigen::Index leave = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < m; ++i) {
      const double a = tab(i, enter);
      if (a > eps) {
        const double ratio = tab(i, n + m) / a;
        if (ratio < best - 1e-15 ||
            (ratio <= best + 1e-15 && leave >= 0 &&
             basis[static_cast<std::size_t>(i)] < basis[static_cast<std::size_t>(leave)])) {
          best = ratio;
          leave = i;
        }
      }
    }
    if (leave < 0) {
      result.bounded = false;
      break;
    }

    tab.row(leave) /= tab(leave, enter);
    for (Eigen::Index i = 0; i <= m; ++i) {
      if (i != leave && tab(i, enter) != 0.0) tab.row(i) -= tab(i, enter) * tab.row(leave);
    }
    basis[static_cast<std::size_t>(leave)] = enter;
  }

  result.x = Vec::Zero(n);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index var = basis[static_cast<std::size_t>(i)];
    if (var < n) result.x(var) = tab(i, n + m);
  }
  result.objective = c.dot(result.x);
  return result;
}

}  // namespace srblab::detail
