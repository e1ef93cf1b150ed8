#pragma once

// Distances between empirical measures and the portmanteau check for
// sequences of them.

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "srblab/common.hpp"
#include "srblab/error.hpp"
#include "srblab/srb.hpp"

namespace srblab {

/// Finitely supported measure: columns of `points` with `weights`.
struct WeightedPoints {
  Mat points;
  std::vector<double> weights;

  std::size_t size() const { return weights.size(); }
  double total() const { return compensated_sum(weights); }
};

inline WeightedPoints as_weighted(const EmpiricalMeasure& m) { return {m.points, m.weights}; }

using Metric = std::function<double(const Vec&, const Vec&)>;

inline Metric euclidean_metric() {
  return [](const Vec& a, const Vec& b) { return (a - b).norm(); };
}
inline Metric system_metric(const DynamicalSystem& sys) {
  return [&sys](const Vec& a, const Vec& b) { return sys.distance(a, b); };
}

namespace detail {

// Dinic's max flow with real capacities.
class MaxFlow {
 public:
  explicit MaxFlow(std::size_t n) : head_(n, -1), level_(n), it_(n) {}

  void add_edge(std::size_t u, std::size_t v, double cap) {
    edges_.push_back({v, head_[u], cap});
    head_[u] = static_cast<int>(edges_.size()) - 1;
    edges_.push_back({u, head_[v], 0.0});
    head_[v] = static_cast<int>(edges_.size()) - 1;
  }

  double run(std::size_t s, std::size_t t) {
    double flow = 0.0;
    while (bfs(s, t)) {
      for (std::size_t i = 0; i < head_.size(); ++i) it_[i] = head_[i];
      while (true) {
        const double f = dfs(s, t, std::numeric_limits<double>::infinity());
        if (f <= kTiny) break;
        flow += f;
      }
    }
    return flow;
  }

 private:
  static constexpr double kTiny = 1e-15;
  struct Edge {
    std::size_t to;
    int next;
    double cap;
  };
  std::vector<Edge> edges_;
  std::vector<int> head_, level_, it_;

  bool bfs(std::size_t s, std::size_t t) {
    std::fill(level_.begin(), level_.end(), -1);
    std::vector<std::size_t> queue{s};
    level_[s] = 0;
    for (std::size_t q = 0; q < queue.size(); ++q) {
      const std::size_t u = queue[q];
      for (int e = head_[u]; e >= 0; e = edges_[static_cast<std::size_t>(e)].next) {
        const auto& ed = edges_[static_cast<std::size_t>(e)];
        if (ed.cap > kTiny && level_[ed.to] < 0) {
          level_[ed.to] = level_[u] + 1;
          queue.push_back(ed.to);
        }
      }
    }
    return level_[t] >= 0;
  }

  double dfs(std::size_t u, std::size_t t, double pushed) {
    if (u == t) return pushed;
    for (int& e = it_[u]; e >= 0; e = edges_[static_cast<std::size_t>(e)].next) {
      auto& ed = edges_[static_cast<std::size_t>(e)];
      if (ed.cap <= kTiny || level_[ed.to] != level_[u] + 1) continue;
      const double f = dfs(ed.to, t, std::min(pushed, ed.cap));
      if (f > kTiny) {
        ed.cap -= f;
        edges_[static_cast<std::size_t>(e) ^ 1u].cap += f;
        return f;
      }
    }
    return 0.0;
  }
};

struct CellMeasure {
  std::vector<Vec> centers;
  std::vector<double> mass;
};

// Quantises onto the cells of a common grid; cell masses summed in point
// order per cell with compensation, cells ordered by index.
inline CellMeasure quantize(const WeightedPoints& m, const Vec& lo, const Vec& cell, int resolution) {
  std::map<std::vector<int>, CompensatedAccumulator> cells;
  const double total = m.total();
  for (std::size_t i = 0; i < m.size(); ++i) {
    std::vector<int> key(static_cast<std::size_t>(lo.size()));
    for (Eigen::Index a = 0; a < lo.size(); ++a) {
      const double t = cell(a) > 0.0 ? (m.points(a, static_cast<Eigen::Index>(i)) - lo(a)) / cell(a) : 0.0;
      key[static_cast<std::size_t>(a)] = std::clamp(static_cast<int>(std::floor(t)), 0, resolution - 1);
    }
    cells[key].add(m.weights[i] / total);
  }
  CellMeasure out;
  for (const auto& [key, acc] : cells) {
    Vec c(lo.size());
    for (Eigen::Index a = 0; a < lo.size(); ++a) c(a) = lo(a) + (key[static_cast<std::size_t>(a)] + 0.5) * cell(a);
    out.centers.push_back(c);
    out.mass.push_back(acc.value());
  }
  return out;
}

}  // namespace detail

struct LevyProkhorovEstimate {
  double value = 0.0;          ///< LP distance of the quantised measures
  double grid_diameter = 0.0;  ///< the true distance is within this of value
  int resolution = 0;
  std::size_t cells_mu = 0, cells_nu = 0;
};

/// Levy-Prokhorov distance estimated on a grid of `resolution` cells per axis
/// over the joint bounding box. By Strassen's theorem LP <= eps iff some
/// coupling has P(d > eps) <= eps; on the quantised measures that is a
/// max-flow question (mass of mu cells routed to nu cells within eps), and
/// eps is found by bisection. Quantisation moves each point by at most half a
/// cell diagonal, so |true LP - value| <= grid diameter.
inline LevyProkhorovEstimate levy_prokhorov(const WeightedPoints& mu, const WeightedPoints& nu, int resolution = 64,
                                            const Metric& metric = euclidean_metric()) {
  require(mu.size() > 0 && nu.size() > 0, ErrorKind::contract, "LP distance of an empty measure");
  require(mu.total() > 0.0 && nu.total() > 0.0, ErrorKind::contract, "LP distance of a massless measure");
  require(mu.points.rows() == nu.points.rows(), ErrorKind::contract, "measures live in different spaces");
  require(resolution >= 64, ErrorKind::invalid_input, "LP grid needs at least 64 cells per axis");
  const Vec lo = mu.points.rowwise().minCoeff().cwiseMin(nu.points.rowwise().minCoeff());
  const Vec hi = mu.points.rowwise().maxCoeff().cwiseMax(nu.points.rowwise().maxCoeff());
  const Vec cell = (hi - lo) / static_cast<double>(resolution) * (1.0 + 1e-12);
  LevyProkhorovEstimate est;
  est.resolution = resolution;
  est.grid_diameter = metric(lo, Vec(lo + cell));
  const auto a = detail::quantize(mu, lo, cell, resolution);
  const auto b = detail::quantize(nu, lo, cell, resolution);
  est.cells_mu = a.mass.size();
  est.cells_nu = b.mass.size();
  // Pairwise cell distances (cells are few for low-dimensional supports).
  std::vector<std::vector<std::pair<double, std::size_t>>> near(a.mass.size());
  for (std::size_t i = 0; i < a.mass.size(); ++i) {
    for (std::size_t j = 0; j < b.mass.size(); ++j) {
      const double d = metric(a.centers[i], b.centers[j]);
      if (d <= 1.0) near[i].push_back({d, j});
    }
    std::sort(near[i].begin(), near[i].end());
  }
  auto unmatched = [&](double eps) {
    const std::size_t na = a.mass.size(), nb = b.mass.size();
    detail::MaxFlow flow(na + nb + 2);
    const std::size_t s = na + nb, t = s + 1;
    for (std::size_t i = 0; i < na; ++i) {
      flow.add_edge(s, i, a.mass[i]);
      for (const auto& [d, j] : near[i]) {
        if (d > eps) break;
        flow.add_edge(i, na + j, 1.0);
      }
    }
    for (std::size_t j = 0; j < nb; ++j) flow.add_edge(na + j, t, b.mass[j]);
    return 1.0 - flow.run(s, t);
  };
  auto feasible = [&](double eps) { return unmatched(eps) <= eps + 1e-12; };
  if (unmatched(0.0) <= 1e-12) {
    est.value = 0.0;
    return est;
  }
  // Exponential search up from one grid diameter keeps the flow graphs
  // sparse, then bisection to a quarter of the grid diameter (the estimate
  // carries that uncertainty anyway).
  double lo_eps = 0.0, hi_eps = std::min(1.0, std::max(est.grid_diameter, 1e-12));
  while (hi_eps < 1.0 && !feasible(hi_eps)) {
    lo_eps = hi_eps;
    hi_eps = std::min(1.0, 2.0 * hi_eps);
  }
  const double resolution_eps = std::max(0.25 * est.grid_diameter, 1e-12);
  while (hi_eps - lo_eps > resolution_eps) {
    const double mid = 0.5 * (lo_eps + hi_eps);
    (feasible(mid) ? hi_eps : lo_eps) = mid;
  }
  est.value = hi_eps;
  return est;
}

namespace detail {

// Deterministic systematic resampling to exactly `count` equal-weight points.
inline std::vector<Vec> resample(const WeightedPoints& m, std::size_t count) {
  std::vector<Vec> out;
  out.reserve(count);
  const double total = m.total();
  double cum = 0.0;
  std::size_t next = 0;
  for (std::size_t i = 0; i < m.size() && next < count; ++i) {
    cum += m.weights[i] / total;
    while (next < count && (static_cast<double>(next) + 0.5) / static_cast<double>(count) <= cum) {
      out.push_back(m.points.col(static_cast<Eigen::Index>(i)));
      ++next;
    }
  }
  while (out.size() < count) out.push_back(m.points.col(static_cast<Eigen::Index>(m.size() - 1)));
  return out;
}

// Minimum-cost perfect assignment on a square cost matrix (Hungarian method
// with potentials, O(n^3)). Returns the column assigned to each row.
inline std::vector<std::size_t> min_cost_assignment(const Mat& cost) {
  const std::size_t n = static_cast<std::size_t>(cost.rows());
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace detail

/// 1-Wasserstein estimate: both measures resampled systematically to the
/// same number n of equal-weight points (n = min(max_points, larger size))
/// and matched by an exact minimum-cost assignment, so the value is W1
/// between the two n-point resamples.
inline double wasserstein1_estimate(const WeightedPoints& mu, const WeightedPoints& nu, std::size_t max_points = 1024,
                                    const Metric& metric = euclidean_metric()) {
  require(mu.size() > 0 && nu.size() > 0, ErrorKind::contract, "W1 of an empty measure");
  require(mu.total() > 0.0 && nu.total() > 0.0, ErrorKind::contract, "W1 of a massless measure");
  require(max_points >= 1 && max_points <= 4096, ErrorKind::invalid_input, "W1 assignment needs 1 to 4096 points");
  const std::size_t n = std::min(max_points, std::max(mu.size(), nu.size()));
  const auto a = detail::resample(mu, n);
  const auto b = detail::resample(nu, n);
  Mat cost(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = metric(a[i], b[j]);
  const auto match = detail::min_cost_assignment(cost);
  CompensatedAccumulator total;
  for (std::size_t i = 0; i < n; ++i) total.add(cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(match[i])));
  return total.value() / static_cast<double>(n);
}

struct MeasureDistanceReport {
  std::string first, second;
  LevyProkhorovEstimate lp;
  double w1 = 0.0;
  std::vector<std::pair<std::string, double>> test_sets;  ///< |mu(V) - nu(V)| per named set
};

// ---------------------------------------------------------------------------
// Portmanteau

/// Finite union of closed coordinate boxes.
struct BoxUnion {
  std::vector<std::pair<Vec, Vec>> boxes;

  bool contains(const Vec& p, double grow = 0.0) const {
    for (const auto& [lo, hi] : boxes)
      if ((p.array() >= lo.array() - grow).all() && (p.array() <= hi.array() + grow).all()) return true;
    return false;
  }
  /// Interior shrunk by `shell`: points at least `shell` inside some box.
  bool contains_inner(const Vec& p, double shell) const {
    for (const auto& [lo, hi] : boxes)
      if ((p.array() > lo.array() + shell).all() && (p.array() < hi.array() - shell).all()) return true;
    return false;
  }
};

inline double mass_in(const WeightedPoints& m, const std::function<bool(const Vec&)>& in) {
  std::vector<double> w;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (in(m.points.col(static_cast<Eigen::Index>(i)))) w.push_back(m.weights[i]);
  return compensated_sum(w) / m.total();
}

struct PortmanteauReport {
  std::vector<double> mass, inner, outer;  ///< mu_i(V), mu_i(V shrunk), mu_i(V grown)
  double limit_mass = 0.0, limit_inner = 0.0, limit_outer = 0.0;
  double boundary_mass = 0.0;              ///< limit_outer - limit_inner
  double liminf_inner = 0.0;               ///< over the final half of the sequence
  double limsup_outer = 0.0;
  double fluctuation = 0.0;                ///< max |mu_i(V) - mu(V)| over the final quarter
  double shell = 0.0, tolerance = 0.0;
  std::string verdict;
};

/// mu_i(V) against mu(V) for V with boundary shell `shell` (open set = V
/// shrunk by the shell, closed set = V grown by it). Verdict "converges on V"
/// iff the limit's boundary mass is below `tolerance` and the tail
/// fluctuation is below it too; "inconclusive: fat boundary" when the
/// limit charges the boundary; otherwise "does not converge on V".
inline PortmanteauReport portmanteau_check(const std::vector<WeightedPoints>& sequence, const BoxUnion& V,
                                           double shell, double tolerance,
                                           const WeightedPoints* limit = nullptr) {
  require(sequence.size() >= 10, ErrorKind::invalid_input, "portmanteau check needs at least 10 measures");
  require(shell >= 0.0 && tolerance > 0.0, ErrorKind::invalid_input, "shell and tolerance must be nonnegative/positive");
  const WeightedPoints& mu = limit ? *limit : sequence.back();
  PortmanteauReport r;
  r.shell = shell;
  r.tolerance = tolerance;
  auto in = [&](const Vec& p) { return V.contains(p); };
  auto inner = [&](const Vec& p) { return V.contains_inner(p, shell); };
  auto outer = [&](const Vec& p) { return V.contains(p, shell); };
  for (const auto& m : sequence) {
    r.mass.push_back(mass_in(m, in));
    r.inner.push_back(mass_in(m, inner));
    r.outer.push_back(mass_in(m, outer));
  }
  r.limit_mass = mass_in(mu, in);
  r.limit_inner = mass_in(mu, inner);
  r.limit_outer = mass_in(mu, outer);
  r.boundary_mass = r.limit_outer - r.limit_inner;
  const std::size_t half = sequence.size() / 2, quarter = sequence.size() - sequence.size() / 4;
  r.liminf_inner = *std::min_element(r.inner.begin() + static_cast<std::ptrdiff_t>(half), r.inner.end());
  r.limsup_outer = *std::max_element(r.outer.begin() + static_cast<std::ptrdiff_t>(half), r.outer.end());
  for (std::size_t i = quarter; i < sequence.size(); ++i) r.fluctuation = std::max(r.fluctuation, std::abs(r.mass[i] - r.limit_mass));
  if (r.boundary_mass >= tolerance)
    r.verdict = "inconclusive: fat boundary";
  else
    r.verdict = r.fluctuation < tolerance ? "converges on V" : "does not converge on V";
  return r;
}

inline nlohmann::json to_json(const LevyProkhorovEstimate& e) {
  return {{"value", e.value}, {"grid_diameter", e.grid_diameter}, {"resolution", e.resolution},
          {"cells_mu", e.cells_mu}, {"cells_nu", e.cells_nu}};
}

inline nlohmann::json to_json(const MeasureDistanceReport& r) {
  nlohmann::json sets = nlohmann::json::object();
  for (const auto& [name, v] : r.test_sets) sets[name] = v;
  return {{"first", r.first}, {"second", r.second}, {"levy_prokhorov", to_json(r.lp)}, {"w1", r.w1}, {"test_sets", sets}};
}

inline nlohmann::json to_json(const PortmanteauReport& r) {
  return {{"mass", r.mass},
          {"inner", r.inner},
          {"outer", r.outer},
          {"limit_mass", r.limit_mass},
          {"limit_inner", r.limit_inner},
          {"limit_outer", r.limit_outer},
          {"boundary_mass", r.boundary_mass},
          {"liminf_inner", r.liminf_inner},
          {"limsup_outer", r.limsup_outer},
          {"fluctuation", r.fluctuation},
          {"shell", r.shell},
          {"tolerance", r.tolerance},
          {"verdict", r.verdict}};
}

}  // namespace srblab
