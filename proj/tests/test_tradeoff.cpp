#include <filesystem>
#include <fstream>
#include <regex>

#include <gtest/gtest.h>

#include "cfair/tradeoff.hpp"

using namespace cfair;
namespace fs = std::filesystem;

namespace {

std::vector<TradeoffPoint> line_points(const std::string& method, double slope, double intercept,
                                       std::vector<double> es) {
  std::vector<TradeoffPoint> pts;
  std::uint64_t seed = 0;
  for (double e : es) pts.push_back({method, 0.0, seed++, e, slope * e + intercept, 0.0});
  return pts;
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST(FitLine, ExactLine) {
  const auto c = fit_line(line_points("m", -1.0, 1.0, {0.1, 0.4, 0.5, 0.9}));
  EXPECT_NEAR(c.slope, -1.0, 1e-14);
  EXPECT_NEAR(c.intercept, 1.0, 1e-14);
  EXPECT_DOUBLE_EQ(c.e_min, 0.1);
  EXPECT_DOUBLE_EQ(c.e_max, 0.9);
}

TEST(FitLine, TwoPointsInterpolate) {
  std::vector<TradeoffPoint> pts{{"m", 0, 0, 0.2, 3.0, 0}, {"m", 0, 1, 0.7, 1.0, 0}};
  const auto c = fit_line(pts);
  EXPECT_NEAR(c(0.2), 3.0, 1e-14);
  EXPECT_NEAR(c(0.7), 1.0, 1e-14);
}

TEST(FitLine, MatchesNormalEquations) {
  RngStream rng(1, "ols");
  std::vector<TradeoffPoint> pts;
  Matrix design(10, 2);
  Vector f(10);
  for (int i = 0; i < 10; ++i) {
    const double e = rng.uniform(0.0, 1.0);
    const double y = 0.3 - 0.8 * e + 0.05 * rng.normal();
    pts.push_back({"m", 0, static_cast<std::uint64_t>(i), e, y, 0});
    design(i, 0) = e;
    design(i, 1) = 1.0;
    f(i) = y;
  }
  const Vector beta = (design.transpose() * design).ldlt().solve(design.transpose() * f);
  const auto c = fit_line(pts);
  EXPECT_NEAR(c.slope, beta(0), 1e-10);
  EXPECT_NEAR(c.intercept, beta(1), 1e-10);
}

TEST(FitLine, DegenerateInputs) {
  EXPECT_THROW(fit_line(line_points("m", 1, 0, {0.5})), DegenerateFitError);
  EXPECT_THROW(fit_line(line_points("m", 1, 0, {0.5, 0.5, 0.5})), DegenerateFitError);
  EXPECT_THROW(fit_line({}), ComparisonError);
}

TEST(Auc, ClosedForms) {
  const auto c = fit_line(line_points("m", -1.0, 1.0, {0.0, 1.0}));
  EXPECT_NEAR(auc(c, 0.0, 1.0), 0.5, 1e-15);
  const auto flat = fit_line(line_points("m", 0.0, 2.5, {1.0, 3.0}));
  EXPECT_NEAR(auc(flat, 1.5, 2.75), 2.5 * 1.25, 1e-14);
}

TEST(Auc, MatchesTrapezoidQuadrature) {
  RngStream rng(2, "trap");
  for (int t = 0; t < 5; ++t) {
    const double slope = rng.uniform(-3, 3), icpt = rng.uniform(-1, 1);
    const double lo = rng.uniform(-1, 0), hi = lo + rng.uniform(0.1, 2.0);
    const auto c = fit_line(line_points("m", slope, icpt, {lo, hi}));
    const int n = 1000000;
    const double h = (hi - lo) / n;
    double s = 0.5 * (c(lo) + c(hi));
    for (int i = 1; i < n; ++i) s += c(lo + i * h);
    EXPECT_NEAR(auc(c, lo, hi), s * h, 1e-6);
  }
}

TEST(Auc, AdditiveOverSubranges) {
  const auto c = fit_line(line_points("m", 0.7, -0.2, {0.0, 2.0}));
  EXPECT_NEAR(auc(c, 0.1, 1.9), auc(c, 0.1, 0.6) + auc(c, 0.6, 1.9), 1e-14);
}

TEST(Auc, RangeErrors) {
  const auto c = fit_line(line_points("m", 1.0, 0.0, {0.0, 1.0}));
  EXPECT_THROW(auc(c, 0.5, 0.5), ArgumentError);
  EXPECT_THROW(auc(c, 0.8, 0.2), ArgumentError);
  EXPECT_NO_THROW(auc(c, -0.05, 1.05));
  EXPECT_THROW(auc(c, -0.2, 1.0), ArgumentError);
}

TEST(Compare, ConstantOffsetLoses) {
  const auto p1 = line_points("a", -0.5, 1.0, {0.2, 0.4, 0.8});
  const auto p2 = line_points("b", -0.5, 1.1, {0.3, 0.5, 0.9});
  const Comparison c = compare(p1, p2);
  EXPECT_EQ(c.verdict, "a");
  EXPECT_DOUBLE_EQ(c.e_lo, 0.3);
  EXPECT_DOUBLE_EQ(c.e_hi, 0.8);
  EXPECT_NEAR(c.auc_2 - c.auc_1, 0.1 * 0.5, 1e-12);
}

TEST(Compare, IdenticalSetsTie) {
  const auto p = line_points("a", 0.3, 0.1, {0.0, 0.5, 1.0});
  EXPECT_EQ(compare(p, p, "x", "y").verdict, "tie");
  const Comparison same_name = compare(p, p);
  EXPECT_NE(same_name.method_1, same_name.method_2);
}

TEST(Compare, Antisymmetric) {
  const auto p1 = line_points("a", -0.2, 0.9, {0.1, 0.6});
  const auto p2 = line_points("b", -0.9, 1.0, {0.2, 0.7});
  const Comparison c12 = compare(p1, p2), c21 = compare(p2, p1);
  EXPECT_EQ(c12.verdict, c21.verdict);
  EXPECT_DOUBLE_EQ(c12.auc_1, c21.auc_2);
  EXPECT_DOUBLE_EQ(c12.auc_2, c21.auc_1);
}

TEST(Compare, DisjointRangesAreRejected) {
  EXPECT_THROW(compare(line_points("a", 1, 0, {0.0, 0.4}), line_points("b", 1, 0, {0.5, 0.9})), ComparisonError);
  EXPECT_THROW(compare(line_points("a", 1, 0, {0.4}), line_points("b", 1, 0, {0.2, 0.9})), DegenerateFitError);
}

TEST(Compare, JsonReport) {
  const Comparison c = compare(line_points("a", -1, 1, {0, 1}), line_points("b", -1, 2, {0, 1}));
  const auto j = comparison_json(c, "digest");
  EXPECT_EQ(j.at("verdict"), "a");
  EXPECT_EQ(j.at("config_digest"), "digest");
  EXPECT_NEAR(j.at("auc").at("b").get<double>(), 1.5, 1e-14);
}

TEST(Points, CsvRoundTripIsExact) {
  const fs::path dir = fs::temp_directory_path() / "cfair_test_tradeoff";
  fs::create_directories(dir);
  std::vector<TradeoffPoint> pts{{"mmd", 0.1, 3, 0.123456789012345, 1e-7, 0.5},
                                 {"mean_mse", 10, 4, -0.25, 0.3333333333333333, 2.0 / 3.0},
                                 {"mmd", 0.0, 3, 0.9, 0.02, 0.1}};
  write_file_atomic(dir / "points.csv", points_to_csv(pts, "abc"));
  auto back = points_from_csv(dir / "points.csv");
  sort_points(pts);
  EXPECT_EQ(back, pts);

  std::ofstream(dir / "bad.csv") << "method,lambda,seed\nx,1,2\n";
  EXPECT_THROW(points_from_csv(dir / "bad.csv"), SchemaError);
  std::ofstream(dir / "badseed.csv") << "method,lambda_fair,seed,E,F,mse\nx,1,-q,0,0,0\n";
  EXPECT_THROW(points_from_csv(dir / "badseed.csv"), SchemaError);
}

TEST(Plot, SinglePointHasMarkerButNoLine) {
  const std::string svg = render_svg({{"m", 0, 0, 0.5, 0.1, 0}});
  EXPECT_EQ(count(svg, "<circle"), 1u);
  EXPECT_EQ(count(svg, "<line"), 0u);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(Plot, TwoMethodsOfTwentyOnePoints) {
  RngStream rng(3, "plot");
  std::vector<TradeoffPoint> pts;
  for (const char* m : {"mmd", "mean_mse"})
    for (int i = 0; i < 21; ++i) pts.push_back({m, i * 0.5, static_cast<std::uint64_t>(i), rng.uniform(), rng.uniform(), 0});
  for (bool swap : {false, true}) {
    PlotOptions opt;
    opt.axis_swap = swap;
    opt.title = "a < b & c";
    const std::string svg = render_svg(pts, opt);
    EXPECT_EQ(count(svg, "<line"), 2u);
    EXPECT_EQ(count(svg, "<circle"), 42u);
    EXPECT_NE(svg.find("a &lt; b &amp; c"), std::string::npos);
  }
  EXPECT_THROW(render_svg({}), ArgumentError);
}

TEST(Plot, EmitWritesSiblingCsv) {
  const fs::path dir = fs::temp_directory_path() / "cfair_test_plot";
  fs::remove_all(dir);
  const auto pts = line_points("m", 1, 0, {0.1, 0.2, 0.3});
  emit_plot(pts, dir / "plot.svg");
  EXPECT_TRUE(fs::exists(dir / "plot.svg"));
  EXPECT_EQ(points_from_csv(dir / "plot.csv"), pts);
}

namespace {

struct SweepFixture {
  Dataset train, test;
  MechanismModel mech;
  AbductorModel abd;
  FairTrainConfig cfg;
  SweepFixture() {
    const auto scm = LinearGaussianSCM::seeded(kDefaultScmSeed);
    RngStream rng(4, "sweep-data");
    std::tie(train, test) = split(sample_synthetic(scm, 400, rng), 0.8, rng);
    mech = oracle_mechanism(scm, train.a_stats, train.x_stats);
    abd = oracle_abductor(scm, train.a_stats, train.x_stats);
    cfg.steps = 10;
    cfg.n_pred = 32;
    cfg.n_fair = 8;
    cfg.q_intv = 2;
    cfg.q_abd = 4;
    cfg.hidden = 8;
    cfg.layers = 2;
  }
};

}  // namespace

TEST(Sweep, SingleLambdaMatchesDirectRun) {
  const SweepFixture s;
  const auto res = sweep(s.mech, s.abd, s.train, s.test, {{"mmd", s.cfg}}, {0.0}, 1, 7);
  ASSERT_EQ(res.points.size(), 1u);
  const FairRun direct = run_fair(s.mech, s.abd, s.train, s.test, s.cfg, 0.0, repeat_seed(7, 0));
  EXPECT_EQ(res.points[0].f, direct.metrics.fair_mmd);
  EXPECT_EQ(res.points[0].e, direct.metrics.explained_variance);
}

TEST(Sweep, DeterministicAndIndependentOfWorkerCount) {
  const SweepFixture s;
  const auto arms = default_arms(s.cfg);
  const std::vector<double> lambdas{0.0, 1.0, 5.0};
  const auto a = sweep(s.mech, s.abd, s.train, s.test, arms, lambdas, 3, 11, 1);
  const auto b = sweep(s.mech, s.abd, s.train, s.test, arms, lambdas, 3, 11, 3);
  ASSERT_EQ(a.points.size(), 18u);
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(points_to_csv(a.points), points_to_csv(b.points));
}

TEST(Sweep, FailuresAreRecordedAndArgumentsChecked) {
  SweepFixture s;
  FairTrainConfig broken = s.cfg;
  broken.lr = 1e300;
  const auto res = sweep(s.mech, s.abd, s.train, s.test, {{"ok", s.cfg}, {"broken", broken}}, {1.0}, 1, 0);
  EXPECT_EQ(res.points.size(), 1u);
  ASSERT_EQ(res.failures.size(), 1u);
  EXPECT_EQ(res.failures[0].method, "broken");
  EXPECT_THROW(sweep(s.mech, s.abd, s.train, s.test, {{"broken", broken}}, {1.0}, 1, 0), TrainingError);
  EXPECT_THROW(sweep(s.mech, s.abd, s.train, s.test, {}, {1.0}, 1, 0), ArgumentError);
  EXPECT_THROW(sweep(s.mech, s.abd, s.train, s.test, default_arms(s.cfg), {-1.0}, 1, 0), ArgumentError);
  EXPECT_THROW(sweep(s.mech, s.abd, s.train, s.test, default_arms(s.cfg), {1.0}, 0, 0), ArgumentError);
}
