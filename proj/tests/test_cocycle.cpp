#include <gtest/gtest.h>

#include <cmath>

#include "srblab/cocycle.hpp"

using namespace srblab;

namespace {

SystemPtr solenoid() { return builtin_system("solenoid", {}); }

// Product of two solenoids with different contractions: k = 2 in R^6 with
// a non-conformal unstable bundle.
SystemPtr product_solenoid() {
  static const auto a = std::make_shared<Solenoid>(0.25, std::nullopt, NormDescriptor::sup());
  static const auto b = std::make_shared<Solenoid>(0.2, std::nullopt, NormDescriptor::sup());
  auto f = [](const Vec& x) {
    Vec y(6);
    y.head(3) = a->apply(x.head(3));
    y.tail(3) = b->apply(x.tail(3));
    return y;
  };
  auto df = [](const Vec& x) {
    Mat D = Mat::Zero(6, 6);
    D.topLeftCorner(3, 3) = a->derivative(x.head(3));
    D.bottomRightCorner(3, 3) = b->derivative(x.tail(3));
    return D;
  };
  Vec lo(6), hi(6);
  lo << -3, -3, -1, -3, -3, -1;
  hi << 3, 3, 1, 3, 3, 1;
  return std::make_shared<CustomSystem>("solenoid_squared", NormedSpace(6, NormDescriptor::sup()), 2, f, df, lo, hi,
                                        std::vector<bool>(6, false));
}

struct Setup {
  SystemPtr sys;
  AttractorSample sample;
  SplittingField split;
};

const Setup& solenoid_setup() {
  static const Setup s = [] {
    auto sys = solenoid();
    auto sample = sample_attractor(*sys, 400, 21, 200, 96);
    auto split = compute_splitting(*sys, sample);
    return Setup{sys, std::move(sample), std::move(split)};
  }();
  return s;
}

// The product bundle turns quickly, so charts end up small and only points
// near the sample are covered. The sample therefore holds whole orbit
// stretches: point 13 i + j is x_{i, -j} of base orbit i (j = 0..12).
constexpr std::size_t kProductOrbits = 40;
constexpr Eigen::Index kProductSteps = 12;

const Setup& product_setup() {
  static const Setup s = [] {
    auto sys = product_solenoid();
    const auto base = sample_attractor(*sys, kProductOrbits, 5, 200, 96);
    AttractorSample sample;
    for (const auto& o : base.orbits)
      for (Eigen::Index j = 0; j <= kProductSteps; ++j) {
        OrbitSegment seg;
        seg.states = o.states.leftCols(o.states.cols() - j);
        sample.orbits.push_back(seg);
      }
    auto split = compute_splitting(*sys, sample);
    return Setup{sys, std::move(sample), std::move(split)};
  }();
  return s;
}

std::size_t product_index(std::size_t orbit, Eigen::Index back) {
  return orbit * (kProductSteps + 1) + static_cast<std::size_t>(back);
}

const BasisField& product_field() {
  static const BasisField f = [] {
    const auto& s = product_setup();
    BasisFieldOptions opt;
    opt.chart_radius = 0.6;
    return build_basis_field(*s.sys, s.split, s.sample, opt);
  }();
  return f;
}

// dist(v, span{w}) by ternary search on the coefficient (convex in t).
double dist_to_line(const NormedSpace& space, const Vec& v, const Vec& w) {
  double lo = -4.0, hi = 4.0;
  auto f = [&](double t) { return space.norm(Vec(v - t * w)); };
  for (int it = 0; it < 200; ++it) {
    const double a = lo + (hi - lo) / 3, b = hi - (hi - lo) / 3;
    if (f(a) < f(b))
      hi = b;
    else
      lo = a;
  }
  return f(0.5 * (lo + hi));
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(BasisField, LinearHasSingleChartWithAxisVector) {
  auto sys = builtin_system("linear_hyperbolic", {});
  auto sample = sample_attractor(*sys, 200, 3);
  auto split = compute_splitting(*sys, sample);
  const auto field = build_basis_field(*sys, split, sample);
  ASSERT_EQ(field.anchors.size(), 1u);
  EXPECT_EQ(field.references[0].col(0).cwiseAbs(), Vec::Unit(2, 0));
  const auto eta = field.basis(*sys, sample.point(17), split.unstable[17]);
  EXPECT_EQ(eta.alpha, 1.0);
  EXPECT_EQ(eta.vectors.col(0).cwiseAbs(), Vec::Unit(2, 0));
}

TEST(BasisField, SolenoidChartsAreUnitAndSeparated) {
  const auto& s = solenoid_setup();
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  EXPECT_GT(field.anchors.size(), 5u);
  EXPECT_GT(field.min_separation, 0.9);
  for (std::size_t i = 0; i < s.sample.size(); ++i) {
    const auto eta = field.basis(*s.sys, s.sample.point(i), s.split.unstable[i]);
    EXPECT_NEAR(s.sys->space().norm(Vec(eta.vectors.col(0))), 1.0, 1e-14);
  }
}

TEST(BasisField, ProductSolenoidSeparationAgainstLineSearchOracle) {
  const auto& s = product_setup();
  const auto& field = product_field();
  const auto& space = s.sys->space();
  EXPECT_GT(field.min_separation, 0.9);
  EXPECT_GE(field.min_alpha, basis2_bound(2, 0.1));
  // 10^3 chart samples among the checked points (sample points and images).
  int checked = 0;
  for (std::size_t i = 0; i < s.sample.size() && checked < 1000; ++i) {
    for (int image = 0; image <= 1 && checked < 1000; ++image) {
      const Vec y = image ? Vec(s.sys->apply(s.sample.point(i))) : s.sample.point(i);
      const Mat F = image ? Mat(s.sys->derivative(s.sample.point(i)) * s.split.unstable[i]) : s.split.unstable[i];
      const auto eta = field.basis(*s.sys, y, F);
      const double sep = dist_to_line(space, Vec(eta.vectors.col(1)), Vec(eta.vectors.col(0)));
      EXPECT_GT(sep, 0.9) << i << " " << image;
      EXPECT_NEAR(sep, sequential_separation(eta.vectors, space), 1e-8);
      ++checked;
    }
  }
  EXPECT_EQ(checked, 1000);
}

TEST(BasisField, NearlyParallelFramesStillMeetSeparationBound) {
  auto sys = builtin_system("linear_hyperbolic", {{"expansion", {2.0, 3.0}}});
  auto sample = sample_attractor(*sys, 100, 3);
  SplittingField split = compute_splitting(*sys, sample);
  for (auto& F : split.unstable) {
    Vec a = Vec::Zero(3), b = Vec::Zero(3);
    a(0) = 1.0;
    b(0) = 1.0;
    b(1) = 1e-4;
    F.col(0) = a;
    F.col(1) = b / sys->space().norm(b);
  }
  ASSERT_LT(separation_constant(split.unstable[0], sys->space()), 1e-3);
  for (double eps : {0.1, 0.3}) {
    BasisFieldOptions opt;
    opt.epsilon = eps;
    const auto field = build_basis_field(*sys, split, sample, opt);
    EXPECT_GT(field.min_separation, 1.0 - eps);
    EXPECT_GE(field.min_alpha, basis2_bound(2, eps));
  }
}

TEST(BasisField, UnreachableEpsilonIsChartRefinementError) {
  const auto& s = product_setup();
  AttractorSample small;
  SplittingField split;
  for (std::size_t i = 0; i < 40; ++i) {
    small.orbits.push_back(s.sample.orbits[i]);
    split.unstable.push_back(s.split.unstable[i]);
    split.center_stable.push_back(s.split.center_stable[i]);
  }
  BasisFieldOptions opt;
  opt.epsilon = 1e-12;
  try {
    build_basis_field(*s.sys, split, small, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::chart_refinement);
  }
}

TEST(BasisField, InvalidEpsilonRejected) {
  const auto& s = solenoid_setup();
  BasisFieldOptions opt;
  opt.epsilon = 1.0;
  EXPECT_THROW(build_basis_field(*s.sys, s.split, s.sample, opt), Error);
}

// ---------------------------------------------------------------------------

TEST(Jacobian, LinearIsExactlyTwo) {
  auto sys = builtin_system("linear_hyperbolic", {});
  auto sample = sample_attractor(*sys, 50, 3);
  auto split = compute_splitting(*sys, sample);
  const auto field = build_basis_field(*sys, split, sample);
  for (std::size_t i = 0; i < sample.size(); ++i)
    EXPECT_EQ(unstable_jacobian(*sys, field, sample.point(i), split.unstable[i]), 2.0);
}

TEST(Jacobian, LinearTwoDimensionalIsProductOfRates) {
  auto sys = builtin_system("linear_hyperbolic", {{"expansion", {2.0, 3.0}}});
  auto sample = sample_attractor(*sys, 30, 3);
  auto split = compute_splitting(*sys, sample);
  const auto field = build_basis_field(*sys, split, sample);
  for (std::size_t i = 0; i < sample.size(); ++i)
    EXPECT_NEAR(unstable_jacobian(*sys, field, sample.point(i), split.unstable[i]), 6.0, 1e-13);
}

TEST(Jacobian, UncoveredPointIsCoverageError) {
  const auto& s = solenoid_setup();
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  Vec far(3);
  far << 40.0, 0.0, 0.0;
  try {
    unstable_jacobian(*s.sys, field, far, s.split.unstable[0]);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::coverage);
  }
}

TEST(Jacobian, SolenoidFixedPointMatchesArclengthRatio) {
  // The point over theta = 0 with z = 1 / (2 (1 - lambda)) is fixed.
  const auto& s = solenoid_setup();
  const auto& sys = static_cast<const Solenoid&>(*s.sys);
  const Vec x = sys.point(0.0, 1.0 / (2.0 * (1.0 - sys.lambda())), 0.0);
  ASSERT_LT(s.sys->distance(s.sys->apply(x), x), 1e-15);
  OrbitSegment orbit;
  orbit.states = x.replicate(1, 97);
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  const auto frames = orbit_unstable_frames(*s.sys, orbit, 0);
  const double J = unstable_jacobian(*s.sys, field, x, frames[0]);

  const auto disc = compute_unstable_disc(*s.sys, orbit, 0.1);
  const int n = 20000;
  const double r = 1e-3;
  double len = 0.0, len_image = 0.0;
  Vec prev, prev_image;
  for (int i = 0; i <= n; ++i) {
    Vec a(1);
    a << -r + 2.0 * r * i / n;
    const Vec p = disc.point(*s.sys, a);
    const Vec q = s.sys->apply(p);
    if (i > 0) {
      len += s.sys->distance(prev, p);
      len_image += s.sys->distance(prev_image, q);
    }
    prev = p;
    prev_image = q;
  }
  EXPECT_NEAR(J, len_image / len, 1e-4);
}

TEST(Jacobian, LowerBoundNeverViolated) {
  const auto& s = solenoid_setup();
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  const auto hyp = hyperbolicity_report(*s.sys, s.split, s.sample, s.sample.size());
  std::vector<UnstableDisc> discs;
  for (std::size_t i = 0; i < 10; ++i) discs.push_back(compute_unstable_disc(*s.sys, s.sample.orbits[i], 0.2));
  const double M = measure_system_bounds(*s.sys, s.split, s.sample, discs).M();
  ASSERT_GE(M, 1.0);
  for (double lambda0 : {hyp.lambda0_estimate, 0.69}) {
    const double bound = jacobian_lower_bound(1, M, lambda0);
    for (std::size_t i = 0; i < s.sample.size(); ++i)
      EXPECT_GE(unstable_jacobian(*s.sys, field, s.sample.point(i), s.split.unstable[i]), bound);
  }
}

TEST(Jacobian, ChainRuleAgainstSingleDeterminant) {
  const auto& s = product_setup();
  const auto& field = product_field();
  for (std::size_t i = 0; i < kProductOrbits; ++i) {
    const std::size_t start = product_index(i, kProductSteps);
    Mat F = s.split.unstable[start];
    Vec x = s.sample.point(start);
    CompensatedAccumulator logsum;
    for (Eigen::Index j = kProductSteps; j >= 1; --j) {
      logsum.add(std::log(unstable_jacobian(*s.sys, field, x, F)));
      F = unit_columns(detail::thin_q(s.sys->derivative(x) * F), s.sys->space());
      x = s.sys->apply(x);
    }
    const double direct = unstable_jacobian_n(*s.sys, field, s.sample.point(start), s.split.unstable[start],
                                              static_cast<int>(kProductSteps));
    EXPECT_NEAR(std::log(direct), logsum.value(), 1e-10);
  }
}

TEST(Jacobian, FieldChangeOnlyContributesBoundaryRatios) {
  const auto& s = product_setup();
  const auto& field1 = product_field();
  BasisFieldOptions opt;
  opt.chart_radius = 0.2;
  opt.seed = 99;
  const auto field2 = build_basis_field(*s.sys, s.split, s.sample, opt);
  ASSERT_NE(field1.chart_radius, field2.chart_radius);
  for (std::size_t i = 0; i < kProductOrbits; ++i) {
    const std::size_t start = product_index(i, kProductSteps);
    Mat F = s.split.unstable[start];
    Vec x = s.sample.point(start);
    const Vec x0 = x;
    const Mat F0 = F;
    double l1 = 0.0, l2 = 0.0;
    for (Eigen::Index j = kProductSteps; j >= 1; --j) {
      l1 += std::log(unstable_jacobian(*s.sys, field1, x, F));
      l2 += std::log(unstable_jacobian(*s.sys, field2, x, F));
      F = unit_columns(detail::thin_q(s.sys->derivative(x) * F), s.sys->space());
      x = s.sys->apply(x);
    }
    // J1 = J2 m(x) / m(fx), m(y) = mu_{eta2_y} / mu_{eta1_y}.
    const double m0 = measure_ratio(field1.basis(*s.sys, x0, F0), field2.basis(*s.sys, x0, F0));
    const double mn = measure_ratio(field1.basis(*s.sys, x, F), field2.basis(*s.sys, x, F));
    EXPECT_NEAR(l1 - l2, std::log(m0) - std::log(mn), 1e-10);
  }
}

// ---------------------------------------------------------------------------

namespace {

struct SolenoidPairs {
  std::vector<DiscChain> chains;
  std::vector<DistortionPair> pairs;
  std::vector<UnstableDisc> discs;
};

const SolenoidPairs& solenoid_pairs() {
  static const SolenoidPairs p = [] {
    const auto& s = solenoid_setup();
    SolenoidPairs out;
    const Eigen::Index n = 30;
    const std::size_t bases = 25, per = 4;
    out.chains.resize(bases);
    for (std::size_t i = 0; i < bases; ++i) {
      DiscOptions opt;
      opt.delta = 0.25;
      opt.keep_levels = n;
      out.chains[i] = compute_disc_chain(*s.sys, s.sample.orbits[i], opt);
      out.discs.push_back(out.chains[i].at(0));
    }
    for (std::size_t i = 0; i < bases; ++i) {
      auto rng = make_stream(4, "distortion-pairs", i);
      for (std::size_t j = 0; j < per; ++j) {
        Vec ay(1), az(1);
        ay << 0.25 * (2.0 * uniform01(rng) - 1.0);
        az << 0.25 * (2.0 * uniform01(rng) - 1.0);
        out.pairs.push_back(DistortionPair{&out.chains[i], leaf_orbit(*s.sys, s.sample.orbits[i], out.chains[i], ay, n),
                                           leaf_orbit(*s.sys, s.sample.orbits[i], out.chains[i], az, n)});
      }
    }
    return out;
  }();
  return p;
}

}  // namespace

TEST(Distortion, EqualPointsGiveUnitProducts) {
  const auto& s = solenoid_setup();
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  const auto& pr = solenoid_pairs().pairs[0];
  const auto rec = distortion_product(*s.sys, field, pr.y, pr.y, 30);
  for (double p : rec.partial_products) EXPECT_EQ(p, 1.0);
}

TEST(Distortion, LinearProductsAreExactlyOne) {
  auto sys = builtin_system("linear_hyperbolic", {});
  auto sample = sample_attractor(*sys, 20, 3, 200, 64);
  auto split = compute_splitting(*sys, sample);
  const auto field = build_basis_field(*sys, split, sample);
  DiscOptions opt;
  opt.delta = 0.2;
  opt.keep_levels = 20;
  std::vector<DistortionPair> pairs;
  std::vector<DiscChain> chains(5);
  for (std::size_t i = 0; i < 5; ++i) {
    chains[i] = compute_disc_chain(*sys, sample.orbits[i], opt);
    Vec a(1), b(1);
    a << 0.15;
    b << -0.1;
    pairs.push_back({&chains[i], leaf_orbit(*sys, sample.orbits[i], chains[i], a, 20),
                     leaf_orbit(*sys, sample.orbits[i], chains[i], b, 20)});
    const auto rec = distortion_product(*sys, field, pairs.back().y, pairs.back().z, 20);
    for (double p : rec.partial_products) EXPECT_EQ(p, 1.0);
  }
  const auto est = estimate_distortion_constant(*sys, field, pairs, 20, 2.0);
  EXPECT_EQ(est.C, 2.0);
  EXPECT_LT(est.comparison.p_deviation, 1e-14);
  EXPECT_NEAR(est.comparison.three_halves, 1.0, 1e-14);
}

TEST(Distortion, ItineraryShortfallIsError) {
  const auto& s = solenoid_setup();
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  const auto& pr = solenoid_pairs().pairs[0];
  try {
    distortion_product(*s.sys, field, pr.y, pr.z, 200);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::itinerary);
  }
}

TEST(Distortion, SolenoidProductsBoundedWithGeometricTail) {
  const auto& s = solenoid_setup();
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  const auto& sp = solenoid_pairs();
  const double M = measure_system_bounds(*s.sys, s.split, s.sample, sp.discs).M();
  const auto est = estimate_distortion_constant(*s.sys, field, sp.pairs, 30, M);
  ASSERT_EQ(est.pairs, 100u);
  EXPECT_TRUE(std::isfinite(est.C));
  EXPECT_LT(est.max_cauchy_tail, 1e-6);
  EXPECT_GE(est.min_cauchy_rate, 0.6);
  for (const auto& pr : sp.pairs) {
    const auto rec = distortion_product(*s.sys, field, pr.y, pr.z, 30);
    for (double p : rec.partial_products) {
      EXPECT_LE(p, est.C);
      EXPECT_GE(p, 1.0 / est.C);
    }
  }
}

TEST(Distortion, SolenoidProductsMatchExtendedPrecisionOracle) {
  // prod_{k<=m} J^u(y_{-k}) = |Df^m v| / |v| for v tangent to the disc at
  // y_{-m}; tangents from an independent 129-node disc chain, products in
  // long double.
  const auto& s = solenoid_setup();
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  const auto& sp = solenoid_pairs();
  using LVec = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
  auto lnorm = [](const LVec& v) { return v.cwiseAbs().maxCoeff(); };
  for (std::size_t i = 0; i < sp.pairs.size(); i += 9) {
    const auto& pr = sp.pairs[i];
    const auto rec = distortion_product(*s.sys, field, pr.y, pr.z, 30);
    DiscOptions fine;
    fine.delta = 0.25;
    fine.keep_levels = 30;
    fine.nodes = 129;
    const auto chain = compute_disc_chain(*s.sys, s.sample.orbits[i / 4], fine);
    for (Eigen::Index m : {1, 5, 15, 30}) {
      auto stretch = [&](const OrbitSegment& o) {
        const auto& disc = chain.at(m);
        const Vec a = disc.chart.u_coords(s.sys->displacement(disc.base(), o.back(m)));
        Mat dh;
        disc.h(a, &dh);
        LVec v = (disc.chart.unstable + dh).col(0).cast<long double>();
        const long double v0 = lnorm(v);
        for (Eigen::Index j = m; j >= 1; --j) v = s.sys->derivative(o.back(j)).cast<long double>() * v;
        return lnorm(v) / v0;
      };
      const long double oracle = stretch(pr.y) / stretch(pr.z);
      EXPECT_NEAR(rec.partial_products[static_cast<std::size_t>(m - 1)] / static_cast<double>(oracle), 1.0, 1e-7)
          << "pair " << i << " m " << m;
    }
  }
}

TEST(Distortion, ConstantStableInHorizon) {
  const auto& s = solenoid_setup();
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  const auto& sp = solenoid_pairs();
  const auto c10 = estimate_distortion_constant(*s.sys, field, sp.pairs, 10, 4.0);
  const auto c30 = estimate_distortion_constant(*s.sys, field, sp.pairs, 30, 4.0);
  EXPECT_LT(std::abs(c30.C - c10.C), 1e-3) << c10.C << " " << c30.C;
}

TEST(Distortion, ComparisonOperatorsAtBasePointAreIdentity) {
  const auto& s = solenoid_setup();
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  const auto& sp = solenoid_pairs();
  const auto rec = comparison_operators(*s.sys, field, sp.chains[0], s.sample.orbits[0], 30, 4.0);
  EXPECT_LT(rec.p_deviation, 1e-12);
  EXPECT_NEAR(rec.three_halves, 1.0, 1e-6);
}

TEST(Distortion, ComparisonOperatorBoundsOnSampledPairs) {
  const auto& s = solenoid_setup();
  const auto field = build_basis_field(*s.sys, s.split, s.sample);
  const auto& sp = solenoid_pairs();
  const double M = measure_system_bounds(*s.sys, s.split, s.sample, sp.discs).M();
  const auto est = estimate_distortion_constant(*s.sys, field, sp.pairs, 30, M);
  EXPECT_LE(est.comparison.three_halves, 1.5);
  EXPECT_LE(est.comparison.p_deviation_ratio, 1.0);
  EXPECT_TRUE(est.comparison.within_bounds);
  // |det Q_k| and J^u(y_{-k-1}) differ by det P and det pi^u, each in [2/3, 3/2].
  EXPECT_LE(est.comparison.q_log_gap, 2.0 * std::log(1.5));
}
