#include "bubbletree/geometry.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace bubbletree;

namespace {

Point4 random_point(std::mt19937_64& rng, double spread = 1.0) {
    std::normal_distribution<double> n(0.0, spread);
    return {n(rng), n(rng), n(rng), n(rng)};
}

Mat4 random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    Mat4 m;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) m(i, j) = n(rng);
    Eigen::HouseholderQR<Mat4> qr(m);
    return qr.householderQ();
}

}  // namespace

TEST(RoundMetric, FactorAtOrigin) {
    const auto g = round_metric(Point4::Zero());
    EXPECT_TRUE(g.tensor.isApprox(4.0 * Mat4::Identity(), 1e-15));
    ASSERT_TRUE(g.factor.has_value());
    EXPECT_DOUBLE_EQ(*g.factor, 2.0);
}

TEST(RoundMetric, UnitSphereOfChart) {
    const auto g = round_metric(Point4(0.5, 0.5, 0.5, 0.5));
    EXPECT_TRUE(g.tensor.isApprox(Mat4::Identity(), 1e-15));
}

TEST(RoundMetric, RadiusThree) {
    const auto g = round_metric(Point4(0, 3, 0, 0));
    EXPECT_NEAR(g.tensor(0, 0), 0.04, 1e-15);
    EXPECT_NEAR(g.tensor(2, 2), 0.04, 1e-15);
    EXPECT_EQ(g.tensor(0, 1), 0.0);
}

TEST(ChartTransition, UnitRealPointFixed) {
    EXPECT_TRUE(chart_transition(Point4(1, 0, 0, 0)).isApprox(Point4(1, 0, 0, 0), 1e-15));
}

TEST(ChartTransition, RealScalarInverted) {
    EXPECT_TRUE(chart_transition(Point4(2, 0, 0, 0)).isApprox(Point4(0.5, 0, 0, 0), 1e-15));
}

TEST(ChartTransition, NormInverts) {
    const Point4 x = 0.1 * Point4(1, 2, -1, 0.5).normalized();
    EXPECT_NEAR(chart_transition(x).norm(), 10.0, 1e-12);
}

TEST(ChartTransition, ZeroIsDomainError) { EXPECT_THROW(chart_transition(Point4::Zero()), DomainError); }

TEST(ChartTransition, InvolutionOverDecades) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> logr(-3.0, 3.0);
    for (int i = 0; i < 200; ++i) {
        const Point4 x = std::pow(10.0, logr(rng)) * random_point(rng).normalized();
        const Point4 back = chart_transition(chart_transition(x));
        EXPECT_LE((back - x).norm(), 1e-12 * x.norm());
    }
}

TEST(ConformalEval, Identity) {
    const Point4 x(0.3, -1, 2, 5);
    const auto m = conformal_eval(ConformalMap{}, x);
    EXPECT_EQ(m.point, x);
    EXPECT_TRUE(m.jacobian.isIdentity());
}

TEST(ConformalEval, PureDilation) {
    const auto m = conformal_eval(ConformalMap::dilation(0.5), Point4(1, 0, 0, 0));
    EXPECT_TRUE(m.point.isApprox(Point4(2, 0, 0, 0), 1e-15));
    EXPECT_TRUE(m.jacobian.isApprox(2.0 * Mat4::Identity(), 1e-15));
}

TEST(ConformalEval, DilationAfterTranslation) {
    ConformalMap f;
    f.scale = 2.0;
    f.shift = Point4(1, 0, 0, 0);
    const auto m = conformal_eval(f, Point4(3, 0, 0, 0));
    EXPECT_TRUE(m.point.isApprox(Point4(1, 0, 0, 0), 1e-15));
    EXPECT_TRUE(m.jacobian.isApprox(0.5 * Mat4::Identity(), 1e-15));
}

TEST(ConformalMapProperty, RoundTripAndComposition) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> logs(-3.0, 3.0);
    for (int i = 0; i < 100; ++i) {
        ConformalMap f;
        f.scale = std::pow(10.0, logs(rng));
        f.shift = random_point(rng);
        f.rotation = random_rotation(rng);
        EXPECT_LE((f.rotation.transpose() * f.rotation - Mat4::Identity()).norm(), 1e-12);
        const Point4 x = random_point(rng, 2.0);
        EXPECT_LE((f.inverse(f.forward(x)) - x).norm(), 1e-10 * std::max(1.0, x.norm()));
        EXPECT_LE((f.inverted().forward(f.forward(x)) - x).norm(), 1e-10 * std::max(1.0, x.norm()));
        ConformalMap g;
        g.scale = std::pow(10.0, logs(rng));
        g.shift = random_point(rng);
        g.rotation = random_rotation(rng);
        const Point4 direct = g.forward(f.forward(x));
        EXPECT_LE((f.then(g).forward(x) - direct).norm(), 1e-9 * std::max(1.0, direct.norm()));
    }
}

TEST(Quadrature, GaussLegendreIntegratesPolynomials) {
    const auto r = gauss_legendre(6);
    double s = 0.0, s10 = 0.0;
    for (std::size_t i = 0; i < r.nodes.size(); ++i) {
        s += r.weights[i];
        s10 += r.weights[i] * std::pow(r.nodes[i], 10);
    }
    EXPECT_NEAR(s, 2.0, 1e-14);
    EXPECT_NEAR(s10, 2.0 / 11.0, 1e-14);
}

TEST(Quadrature, SphereRuleWeightsAndMoments) {
    const auto rule = s3_rule(5);
    EXPECT_EQ(rule.size(), 5u * 10u * 10u);
    double total = 0.0, second = 0.0, fourth = 0.0;
    for (const auto& n : rule) {
        EXPECT_GT(n.weight, 0.0);
        EXPECT_NEAR(n.direction.norm(), 1.0, 1e-14);
        total += n.weight;
        second += n.weight * n.direction[2] * n.direction[2];
        fourth += n.weight * std::pow(n.direction[1], 4);
    }
    EXPECT_NEAR(total, 2.0 * pi * pi, 1e-10);
    // <x_i^2> = 1/4 and <x_i^4> = 1/8 on the unit 3-sphere
    EXPECT_NEAR(second, 2.0 * pi * pi / 4.0, 1e-10);
    EXPECT_NEAR(fourth, 2.0 * pi * pi / 8.0, 1e-10);
}

TEST(BuildGrid, UnitBallVolume) {
    const auto g = build_grid({0.0, 1.0, 8, 8, 3, Region::ball});
    EXPECT_EQ(g.size(), (8u + 1u) * 8u * g.sphere.size());
    EXPECT_NEAR(integrate(g, [](const Point4&) { return 1.0; }), pi * pi / 2.0, 1e-8);
}

TEST(BuildGrid, FullChartRoundVolume) {
    const auto g = build_grid({0.0, 10.0, 24, 10, 3, Region::full_chart});
    const double v = integrate(g, [](const Point4& x) { return std::pow(round_factor(x), 4); });
    EXPECT_NEAR(v, 8.0 * pi * pi / 3.0, 1e-6);
    EXPECT_NEAR(v / (8.0 * pi * pi / 3.0), 1.0, 1e-4);
}

TEST(BuildGrid, AnnulusVolume) {
    const auto g = build_grid({1.0, 2.0, 4, 6, 3, Region::annulus});
    EXPECT_NEAR(integrate(g, [](const Point4&) { return 1.0; }), 7.5 * pi * pi, 1e-9);
}

TEST(BuildGrid, InvalidSpecsRejected) {
    EXPECT_THROW(build_grid({1.0, 0.5, 4, 6, 3, Region::annulus}), ConfigError);
    EXPECT_THROW(build_grid({0.0, 1.0, 4, 1, 3, Region::ball}), ConfigError);
    EXPECT_THROW(build_grid({0.0, 1.0, 4, 6, 1, Region::ball}), ConfigError);
    EXPECT_THROW(build_grid({-1.0, 1.0, 4, 6, 3, Region::ball}), ConfigError);
}

TEST(BuildGrid, JsonRoundTrip) {
    const GridSpec s{0.5, 3.0, 7, 5, 4, Region::annulus};
    const nlohmann::json j = s;
    const GridSpec back = j.get<GridSpec>();
    EXPECT_EQ(back.r_min, s.r_min);
    EXPECT_EQ(back.r_max, s.r_max);
    EXPECT_EQ(back.panels, s.panels);
    EXPECT_EQ(back.gauss_order, s.gauss_order);
    EXPECT_EQ(back.s3_order, s.s3_order);
    EXPECT_EQ(back.region, s.region);
    EXPECT_THROW(nlohmann::json::parse(R"({"region":"torus"})").get<GridSpec>(), ConfigError);
}

TEST(BuildGrid, PlacedGridKeepsVolumeScaling) {
    const auto g = placed(build_grid({0.0, 1.0, 6, 6, 3, Region::ball}), Point4(1, 2, 3, 4), 0.5);
    EXPECT_NEAR(integrate(g, [](const Point4&) { return 1.0; }), pi * pi / 2.0 / 16.0, 1e-9);
    // first moment recovers the centre
    const double m0 = integrate(g, [](const Point4& x) { return x[2]; });
    EXPECT_NEAR(m0 / (pi * pi / 32.0), 3.0, 1e-9);
}

TEST(LpNorm, ZeroField) {
    const auto g = build_grid({0.0, 1.0, 4, 4, 2, Region::ball});
    EXPECT_EQ(lp_norm([](const Point4&) { return 0.0; }, 2.0, flat_metric_field(), g), 0.0);
}

TEST(LpNorm, ConstantOneIsVolume) {
    const auto g = build_grid({0.0, 1.0, 8, 8, 3, Region::ball});
    EXPECT_NEAR(lp_norm([](const Point4&) { return 1.0; }, 1.0, flat_metric_field(), g), pi * pi / 2.0, 1e-8);
}

TEST(LpNorm, NonFiniteValueNamesNode) {
    const auto g = build_grid({0.0, 1.0, 2, 2, 2, Region::ball});
    try {
        lp_norm([](const Point4& x) { return x.norm() > 0.5 ? std::nan("") : 1.0; }, 2.0, flat_metric_field(), g);
        FAIL() << "expected an evaluation error";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("node"), std::string::npos);
    }
}

TEST(Reduction, DeterministicAcrossThreadCounts) {
    const auto g = build_grid({0.0, 3.0, 12, 8, 4, Region::ball});
    auto f = [](const Point4& x) { return std::exp(-x.squaredNorm()) * (1.0 + std::sin(7 * x[1])); };
    set_thread_count(1);
    const double a = integrate(g, f);
    set_thread_count(3);
    const double b = integrate(g, f);
    set_thread_count(8);
    const double c = integrate(g, f);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a, c);
    set_thread_count(1);
}

TEST(Reduction, WorkerExceptionsPropagate) {
    set_thread_count(4);
    EXPECT_THROW(parallel_for(5000, [](std::size_t i) {
                     if (i == 4321) throw DomainError("boom");
                 }),
                 DomainError);
    set_thread_count(1);
}
