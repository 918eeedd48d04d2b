// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include "bubbletree/bubbletree.hpp"
#include "bubbletree/diffmetric.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace bubbletree;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void run(int id, const std::string& name, double budget_s, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= budget_s;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    std::printf("[%s] criterion %2d %s: %s; %.1f s (budget %.0f s%s)\n", pass ? "PASS" : "FAIL", id, name.c_str(),
                o.detail.c_str(), secs, budget_s, in_time ? "" : ", exceeded");
    std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::vector<double> pinned_lambdas() { return {1e-1, std::pow(10.0, -1.5), 1e-2, std::pow(10.0, -2.5), 1e-3}; }

GluingTree bubble_on_flat(double lambda) { return one_level_tree(std::nullopt, {Point4(0.2, 0, 0, 0)}, lambda); }
GluingTree bubble_on_instanton(double lambda) { return one_level_tree(BpstParams{}, {Point4(0.2, 0, 0, 0)}, lambda); }

/// Second moment of the BPST density by 1-d quadrature in r = lambda t / (1 - t).
double radial_scale_oracle(double lambda) {
    const GaussRule g = gauss_legendre(64);
    double m0 = 0.0, m2 = 0.0;
    for (int panel = 0; panel < 64; ++panel) {
        const double a = panel / 64.0, b = (panel + 1) / 64.0;
        for (std::size_t i = 0; i < g.nodes.size(); ++i) {
            const double t = a + 0.5 * (b - a) * (g.nodes[i] + 1.0);
            const double w = 0.5 * (b - a) * g.weights[i];
            const double r = lambda * t / (1.0 - t), dr = lambda / ((1.0 - t) * (1.0 - t));
            const double shell = bpst_density(lambda, r) * r * r * r * dr * w;
            m0 += shell;
            m2 += shell * r * r;
        }
    }
    return std::sqrt(m2 / m0);
}

std::vector<std::string> family_names() {
    return {"single", "pair", "instanton_root", "theta", "bubble_on_bubble", "chain"};
}

FamilySpec load_family(const std::string& name) {
    const std::string path = std::string(BUBBLETREE_DATA_DIR) + "/families/" + name + ".json";
    std::ifstream in(path);
    if (!in) throw ConfigError("missing " + path);
    return nlohmann::json::parse(in).get<FamilySpec>();
}

/// Base-chart grid resolving every bubble of a spliced tree.
QuadratureGrid spliced_grid(const SplicedConnection& s) {
    std::vector<Point4> at;
    std::vector<double> scale;
    for (std::size_t v = 0; v < s.tree().nodes.size(); ++v) {
        const auto& n = s.tree().nodes[v];
        if (n.is_root() || n.conn != VertexConnection::bpst) continue;
        at.push_back(s.to_chart(v).inverse(n.bpst.centre));
        scale.push_back(s.to_chart(v).scale * n.bpst.scale);
    }
    const GridSpec like = extraction_grid_spec();
    return focused_grid(seed_foci(at, scale, 0.1), like, build_grid(like));
}

}  // namespace

int main() {
    std::mt19937_64 rng(20240611);

    run(1, "instanton charge", 10, [] {
        const BpstParams p{};
        const double e = integrate(placed(build_grid(default_grid_spec()), p.centre, p.scale), curvature_density(bpst(p)));
        const double rel = std::abs(e / unit_charge - 1.0);
        return Outcome{rel <= 5e-3, fmt("energy/8pi^2 = %.6f, |err| = %.2e (tol 5e-3)", e / unit_charge, rel)};
    });

    run(2, "scale functional", 30, [] {
        double worst = 0.0, worst_oracle = 0.0;
        for (double l : {1.0, 0.1, 0.01}) {
            const BpstParams p{Point4::Zero(), l, {}, GaugeFlavor::regular};
            const MomentReport r = centre_scale(bpst(p), placed(build_grid(default_grid_spec()), p.centre, p.scale));
            worst = std::max(worst, std::abs(r.scale / (sqrt2 * l) - 1.0));
            worst_oracle = std::max(worst_oracle, std::abs(r.scale / radial_scale_oracle(l) - 1.0));
        }
        return Outcome{worst <= 1e-2 && worst_oracle <= 1e-2,
                       fmt("max |Scale/(sqrt2 lambda) - 1| = %.2e, vs radial oracle %.2e (tol 1e-2)", worst, worst_oracle)};
    });

    run(3, "Tchebychev tails", 60, [] {
        double worst = -1e300;
        int checked = 0;
        auto check = [&](const DensityFn& d, const QuadratureGrid& g) {
            const MomentReport m = density_moments(d, g);
            if (m.flat) return;
            const double k = std::max(1, m.charge);
            for (double R : standard_tail_radii) {
                const double tail = integrate(g, [&](const Point4& y) { return (y - m.centre).norm() >= R * m.scale ? d(y) : 0.0; });
                worst = std::max(worst, (tail - (unit_charge * k / (R * R) + 0.01 * unit_charge * k)) / (unit_charge * k));
                ++checked;
            }
        };
        const BpstParams p{Point4(0.1, 0, 0, 0), 0.3, {}, GaugeFlavor::regular};
        check(curvature_density(bpst(p)), placed(build_grid(default_grid_spec()), p.centre, p.scale));
        for (const auto& name : family_names()) {
            const FamilySpec f = load_family(name);
            for (double a : {f.alphas.front(), f.alphas.back()}) {
                const SplicedConnection s = splice(f.at(a));
                check(curvature_density(pullback_to_base(s)), spliced_grid(s));
            }
        }
        return Outcome{worst <= 0.0, fmt("%d tails; max (tail - bound)/8pi^2k = %.3e (must be <= 0)", checked, worst)};
    });

    run(4, "self-dual splice error slope", 300, [] {
        std::vector<std::pair<double, double>> s;
        for (double l : pinned_lambdas()) s.emplace_back(l, selfdual_error(bubble_on_flat(l), 2.0));
        const ScalingFit f = exponent_fit(s);
        return Outcome{std::abs(f.slope - 1.0) <= 0.15, fmt("slope %.3f (want 1.0 +- 0.15), r2 %.3f", f.slope, f.r2)};
    });

    // criteria 5-7 share one differential table
    std::vector<DifferentialRow> table;
    double table_secs = 0.0;
    {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            table = differential_table(bubble_on_instanton, "1", pinned_lambdas());
        } catch (const std::exception& e) {
            std::printf("differential table failed: %s\n", e.what());
        }
        table_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }

    run(5, "scale and centre derivative slopes", 300 - table_secs, [&] {
        const double ss = exponent_fit(table_column(table, "scale")).slope;
        const double cs = exponent_fit(table_column(table, "centre+")).slope;
        return Outcome{std::abs(ss - 0.5) <= 0.15 && std::abs(cs - 1.0) <= 0.2,
                       fmt("scale slope %.3f (want 0.5 +- 0.15), centre slope %.3f (want 1.0 +- 0.2)", ss, cs)};
    });

    run(6, "gluing rotation two-sided law", 180 - table_secs, [&] {
        const auto c = table_column(table, "rotation");
        double lo = 1e300, hi = 0.0;
        for (const auto& [l, v] : c) {
            lo = std::min(lo, v / std::sqrt(l));
            hi = std::max(hi, v / std::sqrt(l));
        }
        const double slope = exponent_fit(c).slope;
        return Outcome{hi / lo <= 4.0 && std::abs(slope - 0.5) <= 0.15,
                       fmt("max/min of value/sqrt(lambda) %.3f (<= 4), slope %.3f (want 0.5 +- 0.15)", hi / lo, slope)};
    });

    run(7, "base pullback boundedness", 300 - table_secs, [&] {
        double lo = 1e300, hi = 0.0;
        for (const auto& [l, v] : table_column(table, "scale", true)) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        return Outcome{hi / lo <= 5.0, fmt("max/min %.3f (<= 5)", hi / lo)};
    });

    run(8, "radial gauge bound", 60, [&] {
        const BpstParams p{Point4(0.3, -0.2, 0.1, 0.0), 0.6, {}, GaugeFlavor::regular};
        const ConnectionField a = bpst(p);
        const Point4 c(0.1, 0.4, -0.3, 0.2);
        const ConnectionField r = radial_gauge(a, c, 64);
        std::normal_distribution<double> n01;
        std::vector<Point4> samples;
        for (int ray = 0; ray < 32; ++ray) {
            Point4 d(n01(rng), n01(rng), n01(rng), n01(rng));
            d.normalize();
            for (int j = 1; j <= 16; ++j) samples.push_back(c + (1.5 * j / 16.0) * d);
        }
        double k = 0.0;
        for (const auto& x : placed(build_grid({0.0, 3.0, 12, 6, 4, Region::ball}), c, 1.0).nodes)
            k = std::max(k, a.curvature(x).norm());
        for (const auto& x : samples) k = std::max(k, a.curvature(x).norm());
        double worst = 0.0;
        for (const auto& x : samples) worst = std::max(worst, r.potential(x).norm() / (k * (x - c).norm()));
        return Outcome{worst <= 1.05, fmt("max |A_rad(x)|/(K|x|) = %.4f over 512 points on 32 rays (<= 1.05), K = %.4f", worst, k)};
    });

    run(9, "Lie derivative identity", 60, [] {
        const ConnectionField a = bpst({Point4::Zero(), 1.0, {}, GaugeFlavor::regular});
        const QuadratureGrid grid = build_grid({0.0, 3.0, 10, 6, 3, Region::ball});
        const double h = 1e-4;
        auto dilated = [&](double l, const Point4& x) { return (1.0 / l) * a.potential(x / l); };
        const double err = integrate(grid, [&](const Point4& x) {
            const Form1 fd = (0.5 / h) * (dilated(1 + h, x) - dilated(1 - h, x));
            return (fd + lie_derivative_radial(a, x, Point4::Zero(), 48.0)).c.squaredNorm();
        });
        const double ref = integrate(grid, [&](const Point4& x) { return lie_derivative_radial(a, x).c.squaredNorm(); });
        const double rel = std::sqrt(err / ref);
        return Outcome{rel <= 1e-4, fmt("relative L2 difference %.2e (<= 1e-4)", rel)};
    });

    run(10, "bubble-tree round trip", 600, [] {
        std::ostringstream out;
        bool ok = true;
        for (const auto& name : family_names()) {
            const FamilySpec f = load_family(name);
            const int k = f.charge_bound();
            const IdealConnection c = extract_bubble_tree(f);
            const RoundTripReport r = compare_with_truth(c, f.at(f.alphas.back()), k);
            bool necks = true;
            const DensityFamily fam = density_family(f.family());
            for (const auto& v : c.vertices) {
                if (v.is_root()) continue;
                const NeckReport n = neck_loss_check(fam, v, f.tree.N);
                necks = necks && !n.ill_defined && n.decreasing();
            }
            const bool pass = r.pass(k) && necks;
            ok = ok && pass;
            out << name << (pass ? " ok" : " FAILED") << fmt(" (centre %.2g, scale %.2g)", r.centre_ratio, r.scale_error)
                << "; ";
        }
        return Outcome{ok, out.str() + "tolerances: centre ratio <= 1 of 0.05 sqrt(lambda), scale <= 10%, depth <= k"};
    });

    run(11, "beta cutoff law", 60, [] {
        std::vector<std::pair<double, double>> s;
        const double lambda = 1e-4;
        for (double N : {8.0, 32.0, 128.0}) {
            const CutoffFn beta{CutoffKind::beta, 1.0, lambda, N};
            const double inner = std::sqrt(lambda) / N, outer = 0.5 * std::sqrt(lambda);
            const QuadratureGrid g = build_grid({inner, outer, 32, 8, 4, Region::annulus});
            const double q = integrate(g, [&](const Point4& x) { return std::pow(cutoff_eval(beta, x).gradient.norm(), 4); });
            s.emplace_back(std::log(N), std::pow(q, 0.25));
        }
        const double slope = exponent_fit(s).slope;
        return Outcome{std::abs(slope + 0.75) <= 0.15, fmt("exponent vs log N %.3f (want -0.75 +- 0.15)", slope)};
    });

    run(12, "conformal-class independence", 10, [&] {
        std::normal_distribution<double> n01;
        std::uniform_real_distribution<double> logc(-3.0, 3.0);
        double worst = 0.0;
        for (int i = 0; i < 1000; ++i) {
            Form2 f;
            for (int a = 0; a < f.c.rows(); ++a)
                for (int b = 0; b < f.c.cols(); ++b) f.c(a, b) = n01(rng);
            Mat4 m;
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) m(a, b) = n01(rng);
            const Mat4 g = m * m.transpose() + 0.5 * Mat4::Identity();
            const double c = std::pow(10.0, logc(rng));
            const auto x = selfdual_part(f, MetricValue::general(g));
            const auto y = selfdual_part(f, MetricValue::general(c * g));
            worst = std::max(worst, (x - y).norm() / (1.0 + x.norm()));
        }
        return Outcome{worst <= 1e-12, fmt("max relative difference %.2e over 1000 points (<= 1e-12)", worst)};
    });

    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
