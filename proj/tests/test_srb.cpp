#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "srblab/srb.hpp"

using namespace srblab;

namespace {

struct World {
  SystemPtr sys;
  AttractorSample sample;
  SplittingField split;
  BasisField field;
  std::shared_ptr<const SeedDisc> seed;
  TransversalBox box;
};

TransversalBox box_at(const DynamicalSystem& sys, const OrbitSegment& anchor_orbit, double disc_delta, double eps,
                      double rho0, BoxOptions opt = {}) {
  const Vec x = anchor_orbit.point();
  const auto near = attractor_points_near(sys, x, 0.3, 20000, 9, 200, 64);
  const auto discs = discs_at(sys, near, disc_delta);
  const auto chart = make_chart(x, unstable_frame(sys, anchor_orbit, 40), center_stable_frame(sys, x, 40));
  return build_transversal(sys, discs, chart, eps, rho0, opt);
}

const World& linear() {
  static const World w = [] {
    World out;
    out.sys = builtin_system("linear_hyperbolic", {});
    out.sample = sample_attractor(*out.sys, 60, 3, 200, 160);
    out.split = compute_splitting(*out.sys, out.sample);
    out.field = build_basis_field(*out.sys, out.split, out.sample);
    out.seed = std::make_shared<SeedDisc>(make_seed_disc(*out.sys, out.sample.orbits[0], 0.1));
    out.box = box_at(*out.sys, out.sample.orbits[1], 0.1, 0.05, 0.05);
    return out;
  }();
  return w;
}

const World& solenoid() {
  static const World w = [] {
    World out;
    out.sys = builtin_system("solenoid", {});
    out.sample = sample_attractor(*out.sys, 400, 21, 200, 160);
    out.split = compute_splitting(*out.sys, out.sample);
    out.field = build_basis_field(*out.sys, out.split, out.sample);
    out.seed = std::make_shared<SeedDisc>(make_seed_disc(*out.sys, out.sample.orbits[0], 0.1));
    out.box = box_at(*out.sys, out.sample.orbits[1], 0.25, 0.05, 0.1);
    return out;
  }();
  return w;
}

const CesaroResult& linear_average() {
  static const CesaroResult r = [] {
    const auto& w = linear();
    return cesaro_average(*w.sys, w.seed, w.box, 20, 100000, LeakParameters{}, 1);
  }();
  return r;
}

const CesaroResult& solenoid_average() {
  static const CesaroResult r = [] {
    const auto& w = solenoid();
    return cesaro_average(*w.sys, w.seed, w.box, 60, 200000, LeakParameters{}, 1);
  }();
  return r;
}

// Measured distortion constant for the solenoid (pairs on 20 disc chains).
double solenoid_C() {
  static const double C = [] {
    const auto& w = solenoid();
    const Eigen::Index n = 30;
    std::vector<DiscChain> chains(20);
    std::vector<UnstableDisc> discs;
    std::vector<DistortionPair> pairs;
    DiscOptions opt;
    opt.delta = 0.25;
    opt.keep_levels = n;
    for (std::size_t i = 0; i < chains.size(); ++i) {
      chains[i] = compute_disc_chain(*w.sys, w.sample.orbits[i + 2], opt);
      discs.push_back(chains[i].at(0));
    }
    for (std::size_t i = 0; i < chains.size(); ++i) {
      auto rng = make_stream(4, "srb-pairs", i);
      Vec a(1), b(1);
      a << 0.25 * (2.0 * uniform01(rng) - 1.0);
      b << 0.25 * (2.0 * uniform01(rng) - 1.0);
      pairs.push_back({&chains[i], leaf_orbit(*w.sys, w.sample.orbits[i + 2], chains[i], a, n),
                       leaf_orbit(*w.sys, w.sample.orbits[i + 2], chains[i], b, n)});
    }
    const double M = measure_system_bounds(*w.sys, w.split, w.sample, discs).M();
    return estimate_distortion_constant(*w.sys, w.field, pairs, n, M).C;
  }();
  return C;
}

double ks_uniform(std::vector<double> u) {
  std::sort(u.begin(), u.end());
  double d = 0.0;
  const auto n = static_cast<double>(u.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    d = std::max({d, std::abs(u[i] - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - u[i])});
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// seed_measure

TEST(SeedMeasure, EqualWeightsSumToOne) {
  const auto& w = solenoid();
  const auto m = seed_measure(*w.sys, w.seed, 5000, 11);
  EXPECT_EQ(m.size(), 5000u);
  EXPECT_NEAR(m.total_mass(), 1.0, 1e-12);
  for (double x : m.weights) EXPECT_EQ(x, 1.0 / 5000.0);
  for (int g : m.generation) EXPECT_EQ(g, 0);
}

TEST(SeedMeasure, ParticlesLieOnTheDiscGraph) {
  const auto& w = solenoid();
  const auto m = seed_measure(*w.sys, w.seed, 2000, 11);
  double worst = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) worst = std::max(worst, graph_offset(*w.sys, w.seed->disc(), m.point(i)).first);
  EXPECT_LT(worst, 1e-10);
}

TEST(SeedMeasure, UnstableCoordinatesAreUniform) {
  const auto& w = solenoid();
  const std::size_t N = 4096;
  const auto m = seed_measure(*w.sys, w.seed, N, 11);
  const double hw = w.seed->half_width();
  std::vector<double> u;
  for (std::size_t i = 0; i < N; ++i) u.push_back((m.sources(0, static_cast<Eigen::Index>(i)) + hw) / (2.0 * hw));
  EXPECT_LT(ks_uniform(u), 1.36 / std::sqrt(static_cast<double>(N)));
}

TEST(SeedMeasure, SeedGovernsOnlyScrambling) {
  const auto& w = solenoid();
  const auto a = seed_measure(*w.sys, w.seed, 1000, 1);
  const auto b = seed_measure(*w.sys, w.seed, 1000, 1);
  const auto c = seed_measure(*w.sys, w.seed, 1000, 2);
  EXPECT_EQ(a.points, b.points);
  EXPECT_NE(a.points, c.points);
}

TEST(SeedMeasure, TooFewParticlesRejected) {
  const auto& w = solenoid();
  try {
    seed_measure(*w.sys, w.seed, 999, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_input);
  }
}

TEST(SeedMeasure, InvalidDiscIsContractError) {
  const auto& w = solenoid();
  auto bad = std::make_shared<SeedDisc>(*w.seed);
  bad->chain.levels.front().values *= 1e3;
  bad->chain.levels.front().values.array() += 0.5;
  try {
    seed_measure(*w.sys, bad, 1000, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
}

// ---------------------------------------------------------------------------
// push_forward

TEST(PushForward, MassConservedAndItinerariesConsistent) {
  const auto& w = solenoid();
  const auto m = push_forward(*w.sys, seed_measure(*w.sys, w.seed, 2000, 3), 7);
  EXPECT_NEAR(m.total_mass(), 1.0, 1e-12);
  EXPECT_EQ(m.generation_count, 7);
  EXPECT_LT(itinerary_defect(*w.sys, m), 1e-9);
  for (int g : m.generation) EXPECT_EQ(g, 7);
}

TEST(PushForward, ExitIdentifiesTheParticle) {
  const auto& w = solenoid();
  auto m = seed_measure(*w.sys, w.seed, 1000, 3);
  m.points.col(3) = Vec::Constant(3, 50.0);
  try {
    push_forward(*w.sys, m, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::domain);
    EXPECT_NE(std::string(e.what()).find("particle 3"), std::string::npos);
  }
}

TEST(PushForward, ParallelPartitionIsBitIdentical) {
  const auto& w = solenoid();
  const auto m0 = seed_measure(*w.sys, w.seed, 3000, 3);
  const auto a = push_forward(*w.sys, m0, 9, 1);
  const auto b = push_forward(*w.sys, m0, 9, 3);
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.log_ju, b.log_ju);
}

TEST(PushForward, UnitSourceTangentGrowthMatchesLinearRate) {
  const auto& w = linear();
  const auto m = push_forward(*w.sys, seed_measure(*w.sys, w.seed, 1000, 3), 12);
  for (double l : m.log_ju) EXPECT_NEAR(l, 12.0 * std::log(2.0), 1e-12);
}

TEST(PushForward, OffAttractorCloudApproachesTheAttractor) {
  // Nearest-neighbour distance from a cloud started off the attractor to a
  // dense attractor sample shrinks with the number of steps.
  const auto& w = solenoid();
  const auto& sol = dynamic_cast<const Solenoid&>(*w.sys);
  const auto dense = sample_attractor(*w.sys, 20000, 77, 200, 0);
  auto m = seed_measure(*w.sys, w.seed, 1000, 3);
  for (std::size_t i = 0; i < m.size(); ++i)
    m.points.col(static_cast<Eigen::Index>(i)) = sol.point(2.0 * M_PI * static_cast<double>(i) / 1000.0, 0.35, -0.3);
  auto nn = [&](const EmpiricalMeasure& cloud) {
    std::vector<double> d;
    for (std::size_t i = 0; i < cloud.size(); i += 10) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < dense.size(); ++j) best = std::min(best, (cloud.point(i) - dense.point(j)).norm());
      d.push_back(best);
    }
    return compensated_sum(d) / static_cast<double>(d.size());
  };
  std::vector<double> dist{nn(m)};
  for (int k = 0; k < 4; ++k) {
    m = push_forward(*w.sys, m, 1);
    dist.push_back(nn(m));
  }
  for (std::size_t k = 1; k < dist.size(); ++k) EXPECT_LT(dist[k], dist[k - 1]);
  m = push_forward(*w.sys, m, 16);
  EXPECT_LT(nn(m), 0.1 * dist.front());
}

TEST(PushForward, ParticleOrbitReplaysTheStoredPoint) {
  const auto& w = solenoid();
  const auto m = push_forward(*w.sys, seed_measure(*w.sys, w.seed, 1000, 3), 6);
  for (std::size_t i : {0u, 17u, 555u}) {
    const auto o = particle_orbit(*w.sys, m, i, 40);
    EXPECT_EQ(o.point(), m.point(i));
    EXPECT_EQ(o.back(1), Vec(m.preimages.col(static_cast<Eigen::Index>(i))));
    for (Eigen::Index j = 1; j <= o.length(); ++j)
      EXPECT_LT(w.sys->distance(w.sys->apply(Vec(o.states.col(j - 1))), Vec(o.states.col(j))), 1e-9) << j;
  }
}

TEST(PushForward, ItineraryLongerThanTheChainIsError) {
  const auto& w = solenoid();
  const auto m = seed_measure(*w.sys, w.seed, 1000, 3);
  try {
    particle_orbit(*w.sys, m, 0, 500);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::itinerary);
  }
}

TEST(PushForward, CsvAndBinaryExport) {
  const auto& w = solenoid();
  const auto m = push_forward(*w.sys, seed_measure(*w.sys, w.seed, 1000, 3), 2);
  const auto dir = std::filesystem::temp_directory_path() / "srblab_measure_test";
  std::filesystem::create_directories(dir);
  write_measure_binary(m, (dir / "m.bin").string());
  const auto s = read_measure_binary((dir / "m.bin").string());
  EXPECT_EQ(s.points, m.points);
  EXPECT_EQ(s.sources, m.sources);
  EXPECT_EQ(s.weights, m.weights);
  EXPECT_EQ(s.generation, m.generation);
  write_measure_csv(m, (dir / "m.csv").string());
  std::ifstream in(dir / "m.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "# schema srblab-measure-csv 1");
  std::getline(in, line);
  EXPECT_EQ(line, "x0,x1,x2,weight,generation");
  std::size_t rows = 0;
  double x0 = 0.0;
  while (std::getline(in, line)) {
    if (rows == 0) x0 = std::stod(line.substr(0, line.find(',')));
    ++rows;
  }
  EXPECT_EQ(rows, 1000u);
  EXPECT_EQ(x0, m.points(0, 0));
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Transversal boxes

TEST(Transversal, LinearFibersAreParallelAndDisjoint) {
  const auto& w = linear();
  const Vec x = w.sample.point(1);
  const auto chart = make_chart(x, *w.sys->analytic_unstable(x), *w.sys->analytic_center_stable(x));
  std::vector<UnstableDisc> discs;
  for (double s : {0.0, 0.01, -0.02}) {
    Vec y = x;
    y(0) += 0.013;
    y(1) += s;
    discs.push_back(flat_disc(*w.sys, make_chart(y, chart.unstable, chart.center_stable), 0.1));
  }
  const auto box = build_transversal(*w.sys, discs, chart, 0.05, 0.05);
  ASSERT_EQ(box.fibers.size(), 3u);
  for (std::size_t f = 0; f < 3; ++f)
    for (Eigen::Index n = 0; n < box.fibers[f].node_count(); ++n)
      EXPECT_NEAR(box.fibers[f].values(1, n), box.transversal[f](0), 1e-15);
  EXPECT_NEAR(box.min_separation, 0.01, 1e-12);
}

TEST(Transversal, SolenoidBoxHasSeparatedFibers) {
  const auto& w = solenoid();
  const auto box = box_at(*w.sys, w.sample.orbits[1], 0.1, 0.05, 0.05);
  ASSERT_GE(box.fibers.size(), 2u);
  // Dense oracle: graphs compared on 257 points of E^u_x(rho0).
  double sep = std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < box.fibers.size(); ++f)
    for (std::size_t g = f + 1; g < box.fibers.size(); ++g) {
      double sup = 0.0;
      for (int i = 0; i <= 256; ++i) {
        const Vec b = Vec::Constant(1, box.rho0 * (2.0 * i / 256.0 - 1.0));
        sup = std::max(sup, w.sys->space().norm(Vec(box.fibers[f].h(b) - box.fibers[g].h(b))));
      }
      sep = std::min(sep, sup);
    }
  EXPECT_GT(sep, 0.0);
  EXPECT_GT(box.min_separation, 0.0);
}

TEST(Transversal, OversizedRhoIsShrunkAndReported) {
  const auto& w = solenoid();
  const auto box = box_at(*w.sys, w.sample.orbits[1], 0.1, 0.05, 0.5);
  EXPECT_TRUE(box.rho0_shrunk);
  EXPECT_EQ(box.requested_rho0, 0.5);
  EXPECT_DOUBLE_EQ(box.rho0, 0.95 * box.min_fiber_radius);
  EXPECT_LT(box.rho0, 0.5);
}

TEST(Transversal, NoCrossingDiscIsCoverageError) {
  const auto& w = solenoid();
  const Vec x = w.sample.point(1);
  const auto chart = make_chart(x, unstable_frame(*w.sys, w.sample.orbits[1], 40), center_stable_frame(*w.sys, x, 40));
  std::vector<UnstableDisc> far{compute_unstable_disc(*w.sys, w.sample.orbits[5], 0.1)};
  ASSERT_GT(w.sys->distance(far[0].base(), x), 0.5);
  try {
    build_transversal(*w.sys, far, chart, 0.05, 0.05);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::coverage);
  }
}

TEST(Transversal, CrossingGraphsAreCoherenceError) {
  const auto& w = linear();
  const Vec x = w.sample.point(1);
  const auto chart = make_chart(x, *w.sys->analytic_unstable(x), *w.sys->analytic_center_stable(x));
  auto flat = flat_disc(*w.sys, chart, 0.1);
  auto tilted = flat;
  for (Eigen::Index n = 0; n < tilted.node_count(); ++n) tilted.values(1, n) = 0.1 * tilted.node_coords(n)(0);
  try {
    build_transversal(*w.sys, {flat, tilted}, chart, 0.05, 0.05);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::coherence);
  }
}

TEST(Transversal, LocateAssignsBinsAndShells) {
  const auto& w = linear();
  const Vec x = w.box.anchor();
  Vec p = x;
  p(0) += 0.02;
  auto loc = w.box.locate(*w.sys, p);
  EXPECT_TRUE(loc.inside);
  EXPECT_NEAR(loc.b(0), 0.02, 1e-15);
  EXPECT_FALSE(loc.in_shell);
  p(0) = x(0) + 0.0495;
  loc = w.box.locate(*w.sys, p);
  EXPECT_TRUE(loc.inside);
  EXPECT_TRUE(loc.in_shell);
  p(0) = x(0) + 0.06;
  EXPECT_FALSE(w.box.locate(*w.sys, p).inside);
}

// ---------------------------------------------------------------------------
// Boundary leak

TEST(Leak, LargeGenerationLeaksNothing) {
  const auto& w = linear();
  const auto m = push_forward(*w.sys, seed_measure(*w.sys, w.seed, 2000, 3), 80);
  const auto r = trim_boundary_leak(*w.sys, m, w.box, LeakParameters{});
  EXPECT_LT(r.threshold, 1e-16);
  EXPECT_EQ(r.leaked_mass, 0.0);
  EXPECT_EQ(r.kept.size(), m.size());
  EXPECT_NEAR(r.kept.total_mass(), 1.0, 1e-12);
}

TEST(Leak, LinearLeakWithinAnalyticBand) {
  // Band 1 - (1 - (8/3) gamma0 2^{-n})^k with gamma0 = 1, k = 1; the trimming
  // uses lambda0 = log 2, eps0 = 0 for the exact linear rate.
  const auto& w = linear();
  const LeakParameters p{1.0, std::log(2.0), 0.0};
  auto m = seed_measure(*w.sys, w.seed, 20000, 3);
  for (int n = 1; n <= 20; ++n) {
    m = push_forward(*w.sys, m, 1);
    const double band = (8.0 / 3.0) * std::pow(2.0, -n);
    const auto r = trim_boundary_leak(*w.sys, m, w.box, p);
    EXPECT_LE(r.leaked_mass, std::min(1.0, band) + 1.0 / 20000.0) << n;
    EXPECT_LE(r.shell_mass, band) << n;
    EXPECT_LE(leak_mass_exact(*w.sys, *w.seed, w.box, p, n, 2000), band) << n;
  }
}

TEST(Leak, ExactLeakBelowBoundaryReach) {
  const auto& w = linear();
  const double reach = max_fiber_length(*w.sys, w.box);
  EXPECT_NEAR(reach, 0.1, 1e-12);
  for (int n = 1; n <= 25; ++n) {
    const double exact = leak_mass_exact(*w.sys, *w.seed, w.box, LeakParameters{}, n, 2000);
    EXPECT_LE(exact, boundary_reach_mass(*w.sys, *w.seed, reach, n) * (1.0 + 1e-9)) << n;
  }
}

TEST(Leak, LinearReachDecaysAtLogTwo) {
  const auto& w = linear();
  const auto d = leak_decay(*w.sys, *w.seed, max_fiber_length(*w.sys, w.box), 30);
  EXPECT_NEAR(d.rate, std::log(2.0), 1e-8);
  EXPECT_EQ(d.first, 1);
  EXPECT_EQ(d.last, 30);
}

TEST(Leak, SolenoidReachDecaysFasterThanLambda0MinusEps0) {
  const auto& w = solenoid();
  const LeakParameters p;
  const auto d = leak_decay(*w.sys, *w.seed, max_fiber_length(*w.sys, w.box), 30);
  EXPECT_GE(d.rate, p.lambda0 - p.eps0);
  EXPECT_GE(d.last - d.first, 20);
}

TEST(Leak, SufficientShellMatchesThreshold) {
  // For k = 1 the shell is two end segments of arclength t each.
  const auto& w = linear();
  const double t = leak_threshold(0.1, LeakParameters{}, 10);
  EXPECT_NEAR(boundary_shell_mass(*w.sys, *w.seed, t), 2.0 * t / 0.2, 1e-12);
  EXPECT_EQ(boundary_shell_mass(*w.sys, *w.seed, 1.0), 1.0);
}

// ---------------------------------------------------------------------------
// Cesaro averages

TEST(Cesaro, SingleGenerationIsTheTrimmedSeedMeasure) {
  const auto& w = solenoid();
  const auto c = cesaro_average(*w.sys, w.seed, w.box, 1, 3000, LeakParameters{}, 5);
  const auto t = trim_boundary_leak(*w.sys, seed_measure(*w.sys, w.seed, 3000, 5), w.box, LeakParameters{});
  EXPECT_EQ(c.measure.points, t.kept.points);
  EXPECT_EQ(c.measure.weights, t.kept.weights);
}

TEST(Cesaro, MassOneAndDeterministicAcrossWorkers) {
  const auto& w = solenoid();
  const auto a = cesaro_average(*w.sys, w.seed, w.box, 12, 12000, LeakParameters{}, 9, 1);
  const auto b = cesaro_average(*w.sys, w.seed, w.box, 12, 12000, LeakParameters{}, 9, 4);
  EXPECT_NEAR(a.measure.total_mass(), 1.0, 1e-12);
  EXPECT_EQ(a.measure.points, b.measure.points);
  EXPECT_EQ(a.measure.weights, b.measure.weights);
  EXPECT_EQ(a.leaked, b.leaked);
  EXPECT_LT(itinerary_defect(*w.sys, a.measure), 1e-9);
}

TEST(Cesaro, PrefixEqualsTheShorterAverage) {
  const auto& w = solenoid();
  const auto longer = cesaro_average(*w.sys, w.seed, w.box, 12, 12000, LeakParameters{}, 9);
  const auto direct = cesaro_average(*w.sys, w.seed, w.box, 6, 6000, LeakParameters{}, 9);
  const auto prefix = cesaro_prefix(longer.measure, 6);
  EXPECT_EQ(prefix.generation_count, 5);
  ASSERT_EQ(prefix.size(), direct.measure.size());
  EXPECT_EQ(prefix.points, direct.measure.points);
  for (std::size_t i = 0; i < prefix.size(); ++i) EXPECT_NEAR(prefix.weights[i], direct.measure.weights[i], 1e-15);
  EXPECT_THROW(cesaro_prefix(longer.measure, 13), Error);
}

TEST(Cesaro, LinearCsSpreadCollapses) {
  const auto& w = linear();
  const auto& c = linear_average();
  const double diam = 2.0;  // cs extent of U
  double spread = 0.0;
  for (std::size_t i = 0; i < c.measure.size(); ++i) spread = std::max(spread, std::abs(c.measure.points(1, static_cast<Eigen::Index>(i))));
  EXPECT_LE(spread, std::pow(2.0, -20) * diam);
  EXPECT_EQ(w.sys->dim(), 2u);
}

TEST(Cesaro, LinearUnstableMarginalApproachesLebesgue) {
  // Generations g <= 2 cover only part of the circle; their weight, and so
  // the KS distance to Lebesgue, falls like 1/n.
  const auto& w = linear();
  std::vector<double> ks;
  for (int n : {10, 20, 40}) {
    const auto c = cesaro_average(*w.sys, w.seed, w.box, n, 40000, LeakParameters{}, 2);
    const auto h = weighted_histogram(c.measure, [](const Vec& p) { return p(0); }, 0.0, 1.0, 1000);
    double cum = 0.0, d = 0.0;
    for (std::size_t b = 0; b < h.size(); ++b) {
      cum += h[b];
      d = std::max(d, std::abs(cum - static_cast<double>(b + 1) / 1000.0));
    }
    ks.push_back(d);
    EXPECT_LT(d, 1.5 / n) << n;
  }
  EXPECT_LT(ks[2], ks[1]);
  EXPECT_LT(ks[1], ks[0]);
}

TEST(Cesaro, SolenoidThetaMarginalTendsToDoublingMapDensity) {
  // Ulam's fixed density for t -> 2t is uniform; the average's marginal
  // distance to it is dominated by the O(1/n) weight of early generations.
  const auto u = ulam_invariant_density([](double t) { return 2.0 * t; }, 1024);
  const auto& c = solenoid_average();
  const auto h = weighted_histogram(c.measure, [](const Vec& p) { return std::atan2(p(1), p(0)); }, -M_PI, M_PI, 1024);
  const double tv = total_variation(h, u);
  EXPECT_LT(tv, 0.1);
  const auto early = cesaro_average(*solenoid().sys, solenoid().seed, solenoid().box, 15, 200000, LeakParameters{}, 1);
  EXPECT_LT(tv, total_variation(weighted_histogram(early.measure, [](const Vec& p) { return std::atan2(p(1), p(0)); },
                                                   -M_PI, M_PI, 1024),
                                u));
}

TEST(Ulam, DoublingMapDensityIsUniform) {
  const auto u = ulam_invariant_density([](double t) { return 2.0 * t; }, 1024);
  const std::vector<double> flat(1024, 1.0 / 1024);
  EXPECT_LT(total_variation(u, flat), 1e-12);
}

TEST(Ulam, LogisticMapDensityApproachesArcsine) {
  // t -> 4t(1-t) has invariant density 1 / (pi sqrt(t(1-t))); Ulam's method
  // converges slowly at the two singular ends, so check the trend.
  auto F = [](double t) { return 2.0 / M_PI * std::asin(std::sqrt(t)); };
  double prev = 1.0;
  for (std::size_t bins : {128u, 256u, 512u, 1024u}) {
    const auto u = ulam_invariant_density([](double t) { return 4.0 * t * (1.0 - t); }, bins, 64, 3000);
    std::vector<double> exact(bins);
    for (std::size_t b = 0; b < bins; ++b)
      exact[b] = F(static_cast<double>(b + 1) / static_cast<double>(bins)) - F(static_cast<double>(b) / static_cast<double>(bins));
    const double tv = total_variation(u, exact);
    EXPECT_LT(tv, prev);
    prev = tv;
  }
  EXPECT_LT(prev, 0.025);
}

// ---------------------------------------------------------------------------
// density_pn

TEST(Density, LinearIsIdenticallyOne) {
  const auto& w = linear();
  const auto& c = linear_average();
  const auto idx = index_box(*w.sys, c.measure, w.box);
  std::size_t evaluated = 0;
  for (std::size_t j = 0; j < idx.members.size() && evaluated < 12; j += 37) {
    const auto i = idx.members[j];
    if (c.measure.generation[i] < 4) continue;
    const auto d = density_pn(*w.sys, w.field, w.box, c.measure, i, LeakParameters{});
    EXPECT_NEAR(d.p, 1.0, 1e-12);
    ++evaluated;
  }
  EXPECT_GE(evaluated, 10u);
}

TEST(Density, LinearTruncatedHorizonIsOne) {
  const auto& w = linear();
  auto m = push_forward(*w.sys, seed_measure(*w.sys, w.seed, 4000, 8), 36);
  const auto idx = index_box(*w.sys, m, w.box);
  ASSERT_FALSE(idx.members.empty());
  const auto d = density_pn(*w.sys, w.field, w.box, m, idx.members.front(), LeakParameters{});
  EXPECT_TRUE(d.truncated);
  EXPECT_EQ(d.horizon, 30);
  EXPECT_NEAR(d.p, 1.0, 1e-12);
}

TEST(Density, SolenoidWithinMeasuredBounds) {
  const auto& w = solenoid();
  const auto& c = solenoid_average();
  const auto idx = index_box(*w.sys, c.measure, w.box);
  const double bound = projection_ratio_bound(*w.sys, w.field, w.box) * solenoid_C();
  ASSERT_TRUE(std::isfinite(bound));
  std::size_t evaluated = 0;
  for (std::size_t j = 0; j < idx.members.size() && evaluated < 25; j += 11) {
    const auto d = density_pn(*w.sys, w.field, w.box, c.measure, idx.members[j], LeakParameters{});
    EXPECT_GE(d.p, 1.0 / bound);
    EXPECT_LE(d.p, bound);
    ++evaluated;
  }
  EXPECT_EQ(evaluated, 25u);
}

TEST(Density, SolenoidStabilizesInTheHorizon) {
  const auto& w = solenoid();
  auto m = push_forward(*w.sys, seed_measure(*w.sys, w.seed, 20000, 8), 50);
  const auto idx = index_box(*w.sys, m, w.box);
  ASSERT_FALSE(idx.members.empty());
  const auto i = idx.members.front();
  DensityOptions a, b;
  a.horizon = 40;
  b.horizon = 45;
  const double p40 = density_pn(*w.sys, w.field, w.box, m, i, LeakParameters{}, a).p;
  const double p45 = density_pn(*w.sys, w.field, w.box, m, i, LeakParameters{}, b).p;
  EXPECT_LT(std::abs(p45 - p40), 1e-3);
}

TEST(Density, ParticleNearBoundaryOfLIsPartialFiber) {
  const auto& w = linear();
  auto m = seed_measure(*w.sys, w.seed, 1000, 8);
  place_on_seed(*w.sys, *w.seed, m, 0, Vec::Constant(1, w.seed->half_width() - 1e-9));
  m = push_forward(*w.sys, m, 5);
  OrbitSegment anchor = w.sample.orbits[1];
  anchor.states.col(anchor.states.cols() - 1) = m.point(0);
  const auto box = box_at(*w.sys, anchor, 0.1, 0.05, 0.05);
  try {
    density_pn(*w.sys, w.field, box, m, 0, LeakParameters{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::partial_fiber);
  }
}

// ---------------------------------------------------------------------------
// Cylinders

TEST(Cylinder, WholeBoxAndAdditivity) {
  const auto& w = solenoid();
  const auto& m = solenoid_average().measure;
  const auto idx = index_box(*w.sys, m, w.box);
  CylinderSet all;
  for (std::size_t j = 0; j < idx.members.size(); ++j)
    if (!all.contains_bin(idx.where[j].bin)) all.bins.push_back(idx.where[j].bin);
  const double r = w.box.rho0;
  all.boxes.push_back({Vec::Constant(1, -2.0 * r), Vec::Constant(1, 2.0 * r)});
  EXPECT_NEAR(cylinder_measure(m, idx, all), idx.box_mass, 1e-12);

  CylinderSet f1 = all, f2 = all;
  f1.boxes = {{Vec::Constant(1, -2.0 * r), Vec::Constant(1, 0.013)}};
  f2.boxes = {{Vec::Constant(1, 0.013), Vec::Constant(1, 2.0 * r)}};
  EXPECT_NEAR(cylinder_measure(m, idx, f1) + cylinder_measure(m, idx, f2), cylinder_measure(m, idx, all), 1e-12);
  CylinderSet s1 = all, s2 = all;
  s1.bins.assign(all.bins.begin(), all.bins.begin() + 1);
  s2.bins.assign(all.bins.begin() + 1, all.bins.end());
  EXPECT_NEAR(cylinder_measure(m, idx, s1) + cylinder_measure(m, idx, s2), cylinder_measure(m, idx, all), 1e-12);
}

TEST(Cylinder, SolenoidSandwichOnRandomCylinders) {
  const auto& w = solenoid();
  const auto& m = solenoid_average().measure;
  const auto idx = index_box(*w.sys, m, w.box);
  const double C = solenoid_C();
  std::map<std::vector<int>, double> nu;
  for (std::size_t j = 0; j < idx.members.size(); ++j) nu[idx.where[j].bin] += m.weights[idx.members[j]];
  std::vector<std::vector<int>> heavy;
  for (const auto& [bin, mass] : nu)
    if (mass >= 0.2 * idx.box_mass) heavy.push_back(bin);
  ASSERT_FALSE(heavy.empty());
  auto rng = make_stream(12, "cylinders", 0);
  const double r = w.box.rho0;
  for (int t = 0; t < 30; ++t) {
    CylinderSet cyl;
    double nu_s = 0.0;
    for (const auto& b : heavy)
      if (uniform01(rng) < 0.7 || (b == heavy.back() && cyl.bins.empty())) {
        cyl.bins.push_back(b);
        nu_s += nu[b];
      }
    const double lo = -r + 1.6 * r * uniform01(rng);
    const double hi = std::min(r, lo + 0.4 * r + 0.6 * r * uniform01(rng));
    cyl.boxes.push_back({Vec::Constant(1, lo), Vec::Constant(1, hi)});
    const double leb = base_fraction(*w.sys, w.box, cyl);
    const double mu = cylinder_measure(m, idx, cyl);
    EXPECT_GE(mu, leb * nu_s / C) << t;
    EXPECT_LE(mu, C * leb * nu_s) << t;
  }
}

// ---------------------------------------------------------------------------
// Conditional densities

TEST(Conditional, LinearIsUniform) {
  const auto& w = linear();
  const auto& m = linear_average().measure;
  const auto idx = index_box(*w.sys, m, w.box);
  const auto rep = conditional_density_report(*w.sys, m, w.box, idx, 1.5);
  EXPECT_EQ(rep.verdict, "consistent");
  ASSERT_EQ(rep.fibers.size(), 1u);
  EXPECT_GT(rep.fibers[0].ratio_min, 0.85);
  EXPECT_LT(rep.fibers[0].ratio_max, 1.15);
  EXPECT_LT(rep.fibers[0].ks, 0.01);
}

TEST(Conditional, AtomicMeasureIsInconsistent) {
  const auto& w = linear();
  auto m = linear_average().measure;
  const auto idx = index_box(*w.sys, m, w.box);
  for (auto i : idx.members) m.weights[i] = 0.0;
  m.weights[idx.members[idx.members.size() / 2]] = idx.box_mass;
  const auto rep = conditional_density_report(*w.sys, m, w.box, idx, 1.5);
  EXPECT_EQ(rep.verdict, "inconsistent");
  EXPECT_TRUE(rep.atom_found);
}

TEST(Conditional, StarvedFibersAreSkipped) {
  const auto& w = solenoid();
  const auto m = cesaro_average(*w.sys, w.seed, w.box, 20, 20000, LeakParameters{}, 1).measure;
  const auto idx = index_box(*w.sys, m, w.box);
  const auto rep = conditional_density_report(*w.sys, m, w.box, idx, 2.0);
  EXPECT_EQ(rep.verdict, "inconclusive");
  EXPECT_GT(rep.skipped, 0u);
}

TEST(Conditional, SolenoidWithinBounds) {
  const auto& w = solenoid();
  const auto& m = solenoid_average().measure;
  const auto idx = index_box(*w.sys, m, w.box);
  const auto rep = conditional_density_report(*w.sys, m, w.box, idx, solenoid_C());
  EXPECT_EQ(rep.verdict, "consistent");
  EXPECT_GE(rep.fibers.size(), 1u);
}

TEST(Refinement, FirstLevelEqualsBaseReport) {
  const auto& w = linear();
  const auto& m = linear_average().measure;
  const auto idx = index_box(*w.sys, m, w.box);
  const auto base = conditional_density_report(*w.sys, m, w.box, idx, 1.5);
  const auto ref = partition_refinement_check(*w.sys, m, w.box, idx, 1.5, 3);
  ASSERT_EQ(ref.levels.size(), 3u);
  ASSERT_EQ(ref.levels[0].fibers.size(), base.fibers.size());
  EXPECT_EQ(ref.levels[0].fibers[0].ratio_max, base.fibers[0].ratio_max);
  EXPECT_TRUE(ref.stable);
  for (const auto& l : ref.levels) EXPECT_EQ(l.verdict, "consistent");
}

TEST(Refinement, SolenoidViolationsDoNotIncrease) {
  const auto& w = solenoid();
  const auto& m = solenoid_average().measure;
  const auto idx = index_box(*w.sys, m, w.box);
  const auto ref = partition_refinement_check(*w.sys, m, w.box, idx, solenoid_C(), 4);
  EXPECT_TRUE(ref.monotone);
  EXPECT_TRUE(ref.stable);
}

TEST(Refinement, NeedsThreeLevels) {
  const auto& w = linear();
  const auto& m = linear_average().measure;
  const auto idx = index_box(*w.sys, m, w.box);
  EXPECT_THROW(partition_refinement_check(*w.sys, m, w.box, idx, 1.5, 2), Error);
}
