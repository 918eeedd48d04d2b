#include "bubbletree/diffmetric.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace bubbletree;

namespace {

GridSpec coarse_spec() { return {0.0, 20.0, 20, 6, 4, Region::full_chart}; }

GluingTree bubble_on_instanton(double lambda) {
    return one_level_tree(BpstParams{}, {Point4(0.2, 0, 0, 0)}, lambda);
}

struct Spliced {
    GluingTree tree;
    SplicedConnection s;
    ConnectedSumMetric g;
    ConnectedSumGrid grid;

    explicit Spliced(GluingTree t)
        : tree(t), s(splice(t)), g(t), grid(connected_sum_grid(t, s.layout(), coarse_spec())) {}
};

ChartTangent minus(const ChartTangent& a, const ChartTangent& b) {
    return {[a, b](std::size_t v, const Point4& z) {
        const FieldSample x = a.at(v, z), y = b.at(v, z);
        return FieldSample{x.a - y.a, x.f - y.f};
    }};
}

ChartTangent scaled(double c, const ChartTangent& a) {
    return {[a, c](std::size_t v, const Point4& z) {
        const FieldSample x = a.at(v, z);
        return FieldSample{c * x.a, c * x.f};
    }};
}

}  // namespace

TEST(ParamDirection, RejectsLongDirections) {
    EXPECT_THROW(ParamDirection::centre_of("1", Point4(2, 0, 0, 0)).check(), ConfigError);
    EXPECT_THROW(ParamDirection::rotation_of("1", AlgValue(0, 3, 0)).check(), ConfigError);
    EXPECT_THROW(ParamDirection::scale_of("").check(), ConfigError);
    EXPECT_NO_THROW(ParamDirection::modulus_of("1", Point4(0.6, 0, 0, 0), 0.8).check());
    EXPECT_THROW(param_derivative(bubble_on_instanton(1e-5), ParamDirection::rotation_of("0", AlgValue::UnitX())),
                 ConfigError);
    EXPECT_THROW(param_derivative(bubble_on_instanton(1e-5), ParamDirection::scale_of("9")), ConfigError);
}

TEST(ParamDerivative, ZeroWhereSupportsAreDisjoint) {
    const GluingTree t = one_level_tree(BpstParams{}, {Point4(0.3, 0, 0, 0), Point4(-0.3, 0, 0, 0)}, 1e-5);
    const ChartTangent d = param_derivative(t, ParamDirection::rotation_of("2", AlgValue::UnitY()));
    const Spliced su(t);
    const auto parts = integrate_each_chart(su.grid, [&](std::size_t v, const Point4& z) { return d.at(v, z).a.c.squaredNorm(); });
    // chart 1 (the other bubble) and the root away from bubble 2 carry nothing
    EXPECT_EQ(parts[t.index("1")], 0.0);
    EXPECT_EQ(parts[t.index("2")], 0.0);
    EXPECT_GT(parts[t.root()], 0.0);
    for (const Point4& z : {Point4(0.3, 0.001, 0, 0), Point4(0, 0, 0.5, 0), Point4(0.31, 0, 0, 0)})
        EXPECT_TRUE(d.at(t.root(), z).a.c.isZero(0.0));
    // centre of bubble 1 does not move the root near bubble 2 or chart 2
    const ChartTangent c = param_derivative(t, ParamDirection::centre_of("1", Point4::UnitY()));
    EXPECT_TRUE(c.at(t.root(), Point4(-0.3, 0.01, 0, 0)).a.c.isZero(0.0));
    EXPECT_TRUE(c.at(t.index("2"), Point4(0.5, 0.2, 0, 0)).a.c.isZero(0.0));
}

TEST(DilationDerivative, MatchesInteriorCurvatureInRadialGauge) {
    // regular-gauge BPST at the origin is radial about its centre
    const ConnectionField a = bpst({});
    const QuadratureGrid g = build_grid({0.0, 20.0, 16, 6, 4, Region::full_chart});
    double diff = 0.0, ref = 0.0;
    std::vector<double> dv(g.size()), rv(g.size());
    parallel_for(g.size(), [&](std::size_t i) {
        const Point4& x = g.nodes[i];
        const Form1 fd = dilation_derivative(a, Point4::Zero(), x);
        const Form1 exact = -1.0 * lie_derivative_radial(a, x, Point4::Zero(), 10.0);
        dv[i] = (fd - exact).c.squaredNorm() * g.weights[i];
        rv[i] = exact.c.squaredNorm() * g.weights[i];
    });
    diff = pairwise_sum(dv);
    ref = pairwise_sum(rv);
    EXPECT_LE(std::sqrt(diff / ref), 1e-4);
}

TEST(ParamDerivative, StepHalvingChangesNormByUnderOnePercent) {
    const Spliced su(bubble_on_instanton(1e-5));
    for (const ParamDirection& d : {ParamDirection::scale_of("1"), ParamDirection::centre_of("1", Point4::UnitX()),
                                    ParamDirection::modulus_of("1", Point4(0, 0.6, 0, 0), 0.8)}) {
        const double n1 = l2_norm(param_derivative(su.tree, d, {1e-3, false}), su.g, su.grid);
        const double n2 = l2_norm(param_derivative(su.tree, d, {5e-4, false}), su.g, su.grid);
        EXPECT_GT(n1, 0.0) << to_string(d.kind);
        EXPECT_LT(std::abs(n2 / n1 - 1.0), 1e-2) << to_string(d.kind);
    }
}

TEST(ParamDerivative, LinearInTheDirection) {
    const Spliced su(bubble_on_instanton(1e-5));
    const ChartTangent full = param_derivative(su.tree, ParamDirection::centre_of("1", Point4(0, 0.8, 0.6, 0)));
    const ChartTangent half = param_derivative(su.tree, ParamDirection::centre_of("1", Point4(0, 0.4, 0.3, 0)));
    const double n = l2_norm(full, su.g, su.grid);
    EXPECT_LE(l2_norm(minus(scaled(0.5, full), half), su.g, su.grid), 1e-8 * n);

    // sum of coordinate directions
    const ChartTangent ey = param_derivative(su.tree, ParamDirection::centre_of("1", Point4::UnitY()));
    const ChartTangent ez = param_derivative(su.tree, ParamDirection::centre_of("1", Point4::UnitZ()));
    const ChartTangent combo = minus(full, minus(scaled(0.8, ey), scaled(-0.6, ez)));
    EXPECT_LE(l2_norm(combo, su.g, su.grid), 1e-6 * n);

    const ChartTangent rv = param_derivative(su.tree, ParamDirection::rotation_of("1", AlgValue(0.6, 0, 0.8)));
    const ChartTangent rh = param_derivative(su.tree, ParamDirection::rotation_of("1", AlgValue(0.3, 0, 0.4)));
    EXPECT_LE(l2_norm(minus(scaled(0.5, rv), rh), su.g, su.grid), 1e-8 * l2_norm(rv, su.g, su.grid));
}

TEST(GluingRotation, ZeroDirectionGivesZero) {
    const Spliced su(bubble_on_instanton(1e-5));
    const ChartTangent d = gluing_rotation_derivative(su.s, "1", AlgValue::Zero());
    EXPECT_EQ(l2_norm(d, su.g, su.grid), 0.0);
    EXPECT_THROW(gluing_rotation_derivative(su.s, "0", AlgValue::UnitX()), ConfigError);
}

TEST(GluingRotation, OnFlatNeckIsDGammaTimesV) {
    const Spliced su(bubble_on_instanton(1e-5));
    const AlgValue v(0.2, -0.5, 0.3);
    const ChartTangent d = gluing_rotation_derivative(su.s, "1", v);
    const auto& n = su.tree.nodes[su.tree.index("1")];
    const double s = std::sqrt(n.scale);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    for (int k = 0; k < 200; ++k) {
        const Point4 dir = Point4(g(rng), g(rng), g(rng), g(rng)).normalized();
        const double rho = s / su.tree.N * std::pow(su.tree.N * su.tree.N, (k + 0.5) / 200.0);
        const Point4 z = n.centre + rho * dir;
        // the spliced connection vanishes on the neck
        ASSERT_TRUE(su.s.sample(su.tree.root(), z).a.c.isZero(0.0));
        const CutoffValue gam = cutoff_eval({CutoffKind::gamma, 1.0, n.scale, su.tree.N, n.centre}, z);
        // gamma_I(z) = gamma(sqrt(lambda) / rho) = 1 - gamma(rho / sqrt(lambda)) by log-symmetry
        const Form1 expect = outer(v, -1.0 * gam.gradient);
        EXPECT_LE((d.at(su.tree.root(), z).a - expect).norm(), 1e-12 * (1.0 + expect.norm()));
    }
    // zero off the neck
    EXPECT_TRUE(d.at(su.tree.root(), n.centre + Point4(0, 3.0 * su.tree.N * s, 0, 0)).a.c.isZero(0.0));
    EXPECT_TRUE(d.at(su.tree.index("1"), Point4(0.1, 0, 0, 0)).a.c.isZero(0.0));
}

TEST(GluingRotation, LinearInV) {
    const Spliced su(bubble_on_instanton(1e-5));
    const AlgValue v(0.1, 0.7, -0.2);
    const double n1 = l2_norm(gluing_rotation_derivative(su.s, "1", v), su.g, su.grid);
    const double n2 = l2_norm(gluing_rotation_derivative(su.s, "1", 0.25 * v), su.g, su.grid);
    EXPECT_GT(n1, 0.0);
    EXPECT_NEAR(n1 / v.norm(), n2 / (0.25 * v.norm()), 1e-10 * n1 / v.norm());
}

TEST(GluingRotation, AnalyticMatchesFiniteDifference) {
    for (double lambda : {1e-5, 1e-3}) {
        const Spliced su(bubble_on_instanton(lambda));
        const AlgValue v(0.0, 0.6, 0.8);
        const ChartTangent exact = gluing_rotation_derivative(su.s, "1", v);
        const ChartTangent fd = param_derivative(su.tree, ParamDirection::rotation_of("1", v));
        const double n = l2_norm(exact, su.g, su.grid);
        EXPECT_GT(n, 0.0);
        EXPECT_LE(l2_norm(minus(exact, fd), su.g, su.grid), 1e-3 * n) << lambda;
    }
}

TEST(CovariantDerivative, MatchesGaugeRotationOfAConnection) {
    // d/ds of exp(s xi)^* A at s = 0 is d xi + [A, xi]
    const ConnectionField a = bpst({Point4(0.1, 0, 0.2, 0), 0.7, Quat{0.9, 0.1, -0.3, 0.2}.normalized(), GaugeFlavor::regular});
    auto xi = [](const Point4& x) { return AlgValue(std::sin(x[0]), x[1] * x[2], 0.3 + x[3]); };
    auto dxi = [](const Point4& x) {
        Form1 d;
        d.c.col(0) = AlgValue(std::cos(x[0]), 0, 0);
        d.c.col(1) = AlgValue(0, x[2], 0);
        d.c.col(2) = AlgValue(0, x[1], 0);
        d.c.col(3) = AlgValue(0, 0, 1);
        return d;
    };
    auto transformed = [&](double s) {
        GaugeTransform u;
        u.value = [&, s](const Point4& x) { return alg_exp(s * xi(x)); };
        return gauge_transform(a, u, 1e-5);
    };
    const double h = 1e-4;
    const ConnectionField plus = transformed(h), minus_ = transformed(-h);
    for (const Point4& x : {Point4(0.3, -0.2, 0.5, 0.1), Point4(-1.0, 0.4, 0.0, 0.7)}) {
        const Form1 fd = (0.5 / h) * (plus.potential(x) - minus_.potential(x));
        const Form1 exact = covariant_derivative(a.potential(x), xi(x), dxi(x));
        EXPECT_LE((fd - exact).norm(), 1e-5 * exact.norm());
    }
}

TEST(L2Pairing, TrivialIdentities) {
    const Spliced su(bubble_on_instanton(1e-5));
    const ChartTangent zero{[](std::size_t, const Point4&) { return FieldSample{}; }};
    EXPECT_EQ(l2_pairing(zero, zero, su.g, su.grid), 0.0);

    std::vector<ChartTangent> fields{
        param_derivative(su.tree, ParamDirection::scale_of("1"), {1e-3, false}),
        param_derivative(su.tree, ParamDirection::centre_of("1", Point4::UnitX()), {1e-3, false}),
        gluing_rotation_derivative(su.s, "1", AlgValue::UnitZ()),
    };
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 4; ++trial) {
        // random combinations of tangent fields
        ChartTangent a = zero, b = zero;
        for (const auto& f : fields) {
            const double ca = u(rng), cb = u(rng);
            a = {[a, f, ca](std::size_t v, const Point4& z) {
                FieldSample x = a.at(v, z);
                const FieldSample y = f.at(v, z);
                return FieldSample{x.a + ca * y.a, x.f + ca * y.f};
            }};
            b = {[b, f, cb](std::size_t v, const Point4& z) {
                FieldSample x = b.at(v, z);
                const FieldSample y = f.at(v, z);
                return FieldSample{x.a + cb * y.a, x.f + cb * y.f};
            }};
        }
        const double ab = l2_pairing(a, b, su.g, su.grid);
        const double na = l2_norm(a, su.g, su.grid), nb = l2_norm(b, su.g, su.grid);
        EXPECT_LE(std::abs(ab), na * nb * (1.0 + 1e-10));
        EXPECT_NEAR(l2_pairing(a, a, su.g, su.grid), na * na, 1e-12 * na * na);
    }
}

TEST(ExponentFit, ExactPowerLaw) {
    std::vector<std::pair<double, double>> s;
    for (double l : {1e-1, 1e-2, 1e-3, 1e-4}) s.emplace_back(l, l * l);
    const ScalingFit f = exponent_fit(s);
    EXPECT_NEAR(f.slope, 2.0, 1e-12);
    EXPECT_NEAR(f.r2, 1.0, 1e-12);
    EXPECT_NEAR(f.intercept, 0.0, 1e-10);
    EXPECT_NEAR(f.span_decades(), 3.0, 1e-12);
    const nlohmann::json j = f;
    EXPECT_EQ(j.at("n"), 4);
}

TEST(ExponentFit, ConstantHasZeroSlope) {
    std::vector<std::pair<double, double>> s;
    for (double l : {1e-1, 3e-2, 1e-2, 3e-3, 1e-3}) s.emplace_back(l, 7.5);
    EXPECT_NEAR(exponent_fit(s).slope, 0.0, 1e-12);
}

TEST(ExponentFit, NoisySquareRoot) {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> noise(-1.0, 1.0);
    std::vector<std::pair<double, double>> s;
    for (int i = 0; i <= 8; ++i) {
        const double l = std::pow(10.0, -0.25 * i);
        s.emplace_back(l, std::sqrt(l) * (1.0 + 0.05 * noise(rng)));
    }
    EXPECT_NEAR(exponent_fit(s).slope, 0.5, 0.05);
}

TEST(ExponentFit, RejectsBadInput) {
    EXPECT_THROW(exponent_fit({{1e-2, 1.0}, {1e-3, 2.0}}), ConfigError);
    EXPECT_THROW(exponent_fit({{1e-2, 1.0}, {1e-3, -2.0}, {1e-4, 1.0}}), ConfigError);
    EXPECT_THROW(exponent_fit({{1e-2, 1.0}, {1e-2, 2.0}, {1e-4, 1.0}}), ConfigError);
}

TEST(DifferentialTable, RowsAndCsv) {
    TableOptions opt;
    opt.grid = coarse_spec();
    const auto rows = differential_table(bubble_on_instanton, "1", {1e-2}, opt);
    ASSERT_EQ(rows.size(), opt.directions.size());
    for (const auto& r : rows) {
        EXPECT_TRUE(std::isfinite(r.norm_x)) << r.direction;
        EXPECT_GT(r.norm_x, 0.0) << r.direction;
        EXPECT_TRUE(std::isfinite(r.norm_base)) << r.direction;
    }
    const auto centre_p = table_column(rows, "centre+"), centre_m = table_column(rows, "centre-");
    EXPECT_NEAR(centre_p[0].second, centre_m[0].second, 1e-6 * centre_p[0].second);
    EXPECT_NEAR(table_column(rows, "centre+", true)[0].second, table_column(rows, "centre-", true)[0].second,
                1e-6 * centre_p[0].second);

    std::ostringstream csv;
    write_csv(csv, rows);
    EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "direction,vertex,lambda,norm_X,norm_base");
    opt.directions = {"sideways"};
    EXPECT_THROW(differential_table(bubble_on_instanton, "1", {1e-2}, opt), ConfigError);
}

// The exponent laws in the regime where the tree is valid (b < 1/4 at N = 8).
class Exponents : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        TableOptions opt;
        opt.grid = coarse_spec();
        rows_ = differential_table(bubble_on_instanton, "1", {1e-4, 1e-5, 1e-6, 1e-7}, opt);
    }
    static std::vector<DifferentialRow> rows_;
};
std::vector<DifferentialRow> Exponents::rows_;

TEST_F(Exponents, ScaleDerivativeIsSqrtLambda) {
    EXPECT_NEAR(exponent_fit(table_column(rows_, "scale")).slope, 0.5, 0.15);
}

TEST_F(Exponents, CentreDerivativeIsLambda) {
    EXPECT_NEAR(exponent_fit(table_column(rows_, "centre+")).slope, 1.0, 0.2);
}

TEST_F(Exponents, RotationIsTwoSided) {
    const auto c = table_column(rows_, "rotation");
    EXPECT_NEAR(exponent_fit(c).slope, 0.5, 0.15);
    double lo = 1e300, hi = 0.0;
    for (const auto& [l, v] : c) {
        lo = std::min(lo, v / std::sqrt(l));
        hi = std::max(hi, v / std::sqrt(l));
    }
    EXPECT_LE(hi / lo, 4.0);
}

TEST_F(Exponents, SelfDualDerivativeIsFlat) {
    EXPECT_NEAR(exponent_fit(table_column(rows_, "selfdual")).slope, 0.0, 0.2);
}

TEST_F(Exponents, BaseScaleDerivativeStaysBounded) {
    // no growth as lambda -> 0: each value is at most the first
    const auto c = table_column(rows_, "scale", true);
    for (const auto& [l, v] : c) EXPECT_LE(v, c.front().second * (1.0 + 1e-6)) << l;
}
