// bubbletree: batch front end. Reports go to stdout as JSON; --out also writes them, plus CSV tables, to a directory.
// Exit codes: 0 pass, 2 tolerance failure, 3 configuration error, 4 numerical or algorithm failure.

#include "bubbletree/bubbletree.hpp"
#include "bubbletree/diffmetric.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

using namespace bubbletree;
using nlohmann::json;

namespace {

enum Exit { ok = 0, tolerance = 2, config = 3, numerical = 4 };

struct Options {
    std::string config;
    std::string grid;
    std::string out;
    std::uint64_t seed = 1;
    int threads = 0;
    std::string inject;
};

json read_json(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw ConfigError(std::string("cannot open ") + what + " '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string(what) + " '" + path + "': " + e.what());
    }
}

template <class T>
T parse(const json& j, const char* what) {
    try {
        return j.get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string(what) + ": " + e.what());
    }
}

std::optional<GridSpec> grid_option(const Options& o) {
    if (o.grid.empty()) return std::nullopt;
    return parse<GridSpec>(read_json(o.grid, "grid"), "grid");
}

void write_file(const Options& o, const std::string& name, const std::string& content) {
    if (o.out.empty()) return;
    std::filesystem::create_directories(o.out);
    std::ofstream f(std::filesystem::path(o.out) / name, std::ios::binary);
    if (!f) throw ConfigError("cannot write '" + (std::filesystem::path(o.out) / name).string() + "'");
    f << content;
}

int emit(const Options& o, const json& report, bool pass) {
    const std::string text = report.dump(2) + "\n";
    std::cout << text;
    write_file(o, "report.json", text);
    return pass ? ok : tolerance;
}

json fit_json(const ScalingFit& f, double expected, double tol) {
    json j = f;
    j["expected"] = expected;
    j["tolerance"] = tol;
    j["pass"] = std::abs(f.slope - expected) <= tol;
    return j;
}

// --- instanton -----------------------------------------------------------------

int cmd_instanton(const Options& o) {
    const json cfg = o.config.empty() ? json::object() : read_json(o.config, "config");
    if (!cfg.is_object()) throw ConfigError("instanton config must be a JSON object");
    for (const auto& [key, _] : cfg.items())
        if (key != "bpst" && key != "conn") throw ConfigError("instanton config: unknown key '" + key + "'");
    const bool flat = cfg.value("conn", std::string("bpst")) == "product";
    if (!flat && cfg.contains("conn") && cfg["conn"] != "bpst") throw ConfigError("instanton config: conn must be bpst or product");
    const BpstParams p = cfg.contains("bpst") ? parse<BpstParams>(cfg["bpst"], "bpst") : BpstParams{};
    const ConnectionField a = flat ? product_connection() : bpst(p);
    const QuadratureGrid g = placed(build_grid(grid_option(o).value_or(default_grid_spec())), p.centre, flat ? 1.0 : p.scale);

    const MomentReport m = centre_scale(a, g);
    const double sd2 = integrate(g, [&](const Point4& x) {
        const double s = selfdual_norm(a.curvature(x), MetricValue{});
        return s * s;
    });
    const double asd = m.total_mass > 0.0 ? std::sqrt(sd2 / m.total_mass) : 0.0;

    json r{{"command", "instanton"}, {"conn", flat ? "product" : "bpst"}, {"energy", m.total_mass}, {"moments", m},
           {"asd_residual", asd}};
    if (!flat) r["bpst"] = p;
    bool pass = true;
    if (flat) {
        pass = m.total_mass == 0.0 && asd == 0.0;
    } else {
        pass = std::abs(m.charge_raw - 1.0) <= 5e-3 && asd <= 1e-8 &&
               std::abs(m.scale / (sqrt2 * p.scale) - 1.0) <= 1e-2;
        for (const auto& [R, tail] : m.tails) pass = pass && tail <= unit_charge / (R * R) + 0.01 * unit_charge;
    }
    r["pass"] = pass;
    return emit(o, r, pass);
}

// --- scan ----------------------------------------------------------------------

std::vector<double> lambda_grid(const json& j) {
    std::vector<double> out;
    if (j.is_array()) {
        out = parse<std::vector<double>>(j, "lambdas");
    } else {
        const double from = j.at("from").get<double>(), to = j.at("to").get<double>();
        const int n = j.at("points").get<int>();
        if (!(from > 0.0) || !(to > 0.0) || n < 1) throw ConfigError("lambdas: need positive from/to and points >= 1");
        for (int i = 0; i < n; ++i) out.push_back(n == 1 ? from : from * std::pow(to / from, double(i) / (n - 1)));
    }
    if (out.size() < 3) throw ConfigError("scan: need >= 3 samples in the lambda grid");
    return out;
}

int cmd_scan(const Options& o) {
    if (o.config.empty()) throw ConfigError("scan: --config is required");
    const json cfg = read_json(o.config, "config");
    GluingTree tree;
    std::string vertex;
    std::vector<double> lambdas, ps;
    TableOptions topt;
    try {
        tree = cfg.at("tree").get<GluingTree>();
        vertex = cfg.at("vertex").get<std::string>();
        lambdas = lambda_grid(cfg.at("lambdas"));
        ps = cfg.value("p", std::vector<double>{2.0});
        if (cfg.contains("directions")) topt.directions = cfg["directions"].get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("scan config: ") + e.what());
    }
    const auto index = tree.find(vertex) ? tree.index(vertex) : throw ConfigError("scan: no vertex '" + vertex + "'");
    if (tree.nodes[index].is_root()) throw ConfigError("scan: the root has no scale");
    if (auto g = grid_option(o)) topt.grid = *g;
    const auto template_for = [&](double lambda) {
        GluingTree t = tree;
        t.nodes[index].scale = lambda;
        return t;
    };
    for (double l : lambdas) {
        const auto v = validate_gluing_tree(template_for(l));
        if (has_hard_violation(v)) throw ConfigError("scan: template invalid at lambda = " + std::to_string(l));
    }

    const std::map<std::string, std::pair<double, double>> expected{
        {"scale", {0.5, 0.15}}, {"centre+", {1.0, 0.2}}, {"centre-", {1.0, 0.2}}, {"rotation", {0.5, 0.15}}, {"selfdual", {0.0, 0.2}}};
    const auto rows = differential_table(template_for, vertex, lambdas, topt);
    std::ostringstream csv;
    write_csv(csv, rows);
    write_file(o, "table.csv", csv.str());

    bool pass = true;
    json fits = json::object();
    for (const auto& d : topt.directions) {
        const auto [e, tol] = expected.at(d);
        fits[d] = fit_json(exponent_fit(table_column(rows, d)), e, tol);
        pass = pass && fits[d]["pass"].get<bool>();
    }
    json r{{"command", "scan"}, {"vertex", vertex}, {"lambdas", lambdas}, {"fits", fits}};
    if (std::find(topt.directions.begin(), topt.directions.end(), "scale") != topt.directions.end()) {
        double lo = 1e300, hi = 0.0;
        for (const auto& [l, v] : table_column(rows, "scale", true)) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        r["base_scale_ratio"] = {{"max_over_min", hi / lo}, {"bound", 5.0}, {"pass", hi / lo <= 5.0}};
        pass = pass && hi / lo <= 5.0;
    }
    json sd = json::object();
    for (double p : ps) {
        std::vector<std::pair<double, double>> s;
        for (double l : lambdas) s.emplace_back(l, selfdual_error(template_for(l), p, topt.grid));
        std::ostringstream key;
        key << "p=" << p;
        sd[key.str()] = fit_json(exponent_fit(s), 2.0 / p, 0.15);
        pass = pass && sd[key.str()]["pass"].get<bool>();
    }
    r["selfdual_error"] = sd;
    r["pass"] = pass;
    return emit(o, r, pass);
}

// --- extract -------------------------------------------------------------------

int cmd_extract(const Options& o) {
    if (o.config.empty()) throw ConfigError("extract: --config is required");
    const json cfg = read_json(o.config, "config");
    const FamilySpec spec = parse<FamilySpec>(cfg, "family");
    const Thresholds th = cfg.contains("thresholds") ? parse<Thresholds>(cfg["thresholds"], "thresholds") : Thresholds{};
    const GridSpec like = grid_option(o).value_or(extraction_grid_spec());

    const IdealConnection ideal = extract_bubble_tree(spec, th, like);
    const DensityFamily fam = density_family(spec.family());
    std::ostringstream csv;
    csv << "vertex,alpha,neck_energy,ball_energy\n";
    csv.precision(12);
    json necks = json::object();
    bool necks_ok = true;
    for (const auto& v : ideal.vertices) {
        if (v.is_root()) continue;
        const NeckReport n = neck_loss_check(fam, v, spec.tree.N, like, th);
        for (const auto& row : n.rows) csv << v.id << ',' << row.alpha << ',' << row.neck_energy << ',' << row.ball_energy << '\n';
        necks[v.id] = {{"ill_defined", n.ill_defined}, {"decreasing", n.decreasing()}};
        if (!n.note.empty()) necks[v.id]["note"] = n.note;
        necks_ok = necks_ok && !n.ill_defined && n.decreasing();
    }
    const RoundTripReport rt = compare_with_truth(ideal, spec.at(spec.alphas.back()), spec.charge_bound());
    write_file(o, "ideal.json", json(ideal).dump(2) + "\n");
    write_file(o, "necks.csv", csv.str());

    const bool pass = rt.pass(spec.charge_bound()) && necks_ok;
    json r{{"command", "extract"},       {"vertices", ideal.vertices.size()}, {"total_charge", ideal.total_charge},
           {"depth", ideal.depth()},     {"roundtrip", rt},                   {"necks", necks},
           {"diagnostics", ideal.diagnostics}, {"pass", pass}};
    if (o.out.empty()) r["ideal"] = ideal;
    return emit(o, r, pass);
}

// --- check ---------------------------------------------------------------------

struct Suite {
    json checks = json::array();
    bool pass = true;

    void add(const std::string& name, double value, double bound, bool ok) {
        checks.push_back({{"name", name}, {"value", value}, {"bound", bound}, {"pass", ok}});
        pass = pass && ok;
    }
    void at_most(const std::string& name, double value, double bound) { add(name, value, bound, value <= bound); }
};

int cmd_check(const Options& o) {
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::normal_distribution<double> n01;
    auto point = [&](double s) { return Point4(s * u(rng), s * u(rng), s * u(rng), s * u(rng)); };
    auto unit_quat = [&] {
        const Quat q{n01(rng), n01(rng), n01(rng), n01(rng)};
        return q.normalized();
    };
    Suite s;

    // geometry
    {
        double worst = 0.0;
        for (int i = 0; i < 200; ++i) {
            const Point4 x = point(10.0);
            if (x.norm() < 1e-3) continue;
            worst = std::max(worst, (chart_transition(chart_transition(x)) - x).norm() / x.norm());
        }
        s.at_most("geometry.chart_transition_involution", worst, 1e-12);
        double vol = integrate(build_grid({0.0, 1.0, 8, 6, 4, Region::ball}), [](const Point4&) { return 1.0; });
        s.at_most("geometry.unit_ball_volume", std::abs(vol / (0.5 * pi * pi) - 1.0), 1e-10);
    }
    // instanton and moments
    const BpstParams p{point(0.5), std::pow(10.0, -2.0 * std::abs(u(rng))), unit_quat(), GaugeFlavor::regular};
    const ConnectionField a = bpst(p);
    const QuadratureGrid g = placed(build_grid(default_grid_spec()), p.centre, p.scale);
    const MomentReport m = centre_scale(a, g);
    s.at_most("instanton.charge", std::abs(m.charge_raw - 1.0), 5e-3);
    s.at_most("moments.centre", (m.centre - p.centre).norm() / p.scale, 1e-6);
    s.at_most("moments.scale", std::abs(m.scale / (sqrt2 * p.scale) - 1.0), 1e-2);
    {
        double worst = -1e300;
        for (const auto& [R, tail] : m.tails) worst = std::max(worst, tail - (unit_charge / (R * R) + 0.01 * unit_charge));
        s.at_most("moments.tchebychev", worst, 0.0);
    }
    // gauge
    {
        double asd = 0.0, conf = 0.0;
        for (int i = 0; i < 100; ++i) {
            const Point4 x = p.centre + point(3.0 * p.scale);
            const Form2 f = a.curvature(x);
            asd = std::max(asd, selfdual_norm(f, MetricValue{}) / (1.0 + f.norm()));
            Mat4 r;
            for (int j = 0; j < 16; ++j) r(j / 4, j % 4) = n01(rng);
            const Mat4 gm = r * r.transpose() + 0.5 * Mat4::Identity();
            const double c = std::pow(10.0, 3.0 * u(rng));
            const auto x1 = selfdual_part(f, MetricValue::general(gm)), x2 = selfdual_part(f, MetricValue::general(c * gm));
            conf = std::max(conf, (x1 - x2).norm() / (1.0 + x1.norm()));
        }
        s.at_most("gauge.anti_self_dual", asd, 1e-10);
        s.at_most("gauge.conformal_class", conf, 1e-12);
        const Point4 c = p.centre + point(p.scale);
        const ConnectionField rg = radial_gauge(a, c, 64);
        const double k = std::sqrt(48.0) / (p.scale * p.scale);
        double worst = 0.0, radial = 0.0;
        for (int i = 0; i < 32; ++i) {
            const Point4 x = c + point(p.scale);
            const Form1 ax = rg.potential(x);
            worst = std::max(worst, ax.norm() / (k * (x - c).norm()));
            radial = std::max(radial, contract(ax, x - c).norm() / (x - c).norm());
        }
        s.at_most("gauge.radial_bound", worst, 1.05);
        s.at_most("gauge.radial_condition", radial, 1e-6 * k);
    }
    // splice cutoffs; the injected profile overshoots, as a negative control
    {
        const std::function<double(double)> zeta =
            o.inject == "bad-cutoff" ? std::function<double(double)>([](double t) { return 1.1 * profile::zeta(t); })
                                     : std::function<double(double)>(profile::zeta);
        double out_of_range = 0.0, inner = 0.0;
        for (int i = 0; i <= 400; ++i) {
            const double t = 1.5 * i / 400.0, v = zeta(t);
            out_of_range = std::max({out_of_range, -v, v - 1.0});
            if (t <= 0.5) inner = std::max(inner, std::abs(v));
        }
        s.at_most("splice.psi_bound", out_of_range, 0.0);
        s.at_most("splice.psi_inner_zero", inner, 0.0);
    }
    // splice tree serialisation and charge
    {
        const GluingTree t = one_level_tree(std::nullopt, {point(0.3)}, 1e-5);
        const std::string text = json(t).dump();
        s.add("splice.json_round_trip", 0.0, 0.0, json(parse<GluingTree>(json::parse(text), "tree")).dump() == text);
        const SplicedConnection sc = splice(t);
        const double e = splice_energy(sc, connected_sum_grid(t, sc.layout(), {0.0, 20.0, 16, 6, 4, Region::full_chart}));
        s.at_most("splice.charge_additivity", std::abs(e / unit_charge - 1.0), 0.03);
    }
    // diffmetric
    {
        std::vector<std::pair<double, double>> xs;
        for (double l : {1e-1, 1e-2, 1e-3, 1e-4}) xs.emplace_back(l, 3.0 * l * l);
        s.at_most("diffmetric.exponent_fit", std::abs(exponent_fit(xs).slope - 2.0), 1e-12);
    }
    // bubbletree
    {
        s.add("bubbletree.moduli_dimension", moduli_dimension(1, 0, 0), 5, moduli_dimension(1, 0, 0) == 5);
        const Point4 c = point(0.3);
        const DensityFamily fam = [c](double alpha) {
            const double l = 0.1 * std::exp2(-alpha);
            return DensityFn([c, l](const Point4& y) { return bpst_density(l, (y - c).norm()); });
        };
        std::vector<double> alphas;
        for (int i = 0; i <= 32; ++i) alphas.push_back(0.25 * i);
        const ConcentrationReport r = detect_concentration(fam, alphas, 0.3 * unit_charge);
        const bool one = r.candidates.size() == 1;
        s.add("bubbletree.single_concentration", double(r.candidates.size()), 1.0, one);
        if (one) s.at_most("bubbletree.concentration_mass", std::abs(r.candidates[0].mass.back() / unit_charge - 1.0), 0.02);
    }

    json out{{"command", "check"}, {"seed", o.seed}, {"checks", s.checks}, {"pass", s.pass}};
    return emit(o, out, s.pass);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bubble-tree diagnostics for SU(2) instantons on the four-sphere"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* c, bool needs_config) {
        auto* opt = c->add_option("--config", o.config, "JSON configuration");
        if (needs_config) opt->required();
        c->add_option("--grid", o.grid, "JSON grid spec");
        c->add_option("--out", o.out, "output directory");
        c->add_option("--seed", o.seed, "seed for randomized checks");
        c->add_option("--threads", o.threads, "worker threads (overrides BUBBLETREE_THREADS)")->check(CLI::PositiveNumber);
    };
    auto* inst = app.add_subcommand("instanton", "BPST energy, moments, tails and ASD residual");
    auto* scan = app.add_subcommand("scan", "differential table and scaling fits over a lambda grid");
    auto* extract = app.add_subcommand("extract", "bubble-tree extraction from a degenerating family");
    auto* check = app.add_subcommand("check", "invariant suite");
    common(inst, false);
    common(scan, true);
    common(extract, true);
    common(check, false);
    check->add_option("--inject", o.inject, "test hook: bad-cutoff")->check(CLI::IsMember({"bad-cutoff"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return config;
    }
    if (o.threads > 0) set_thread_count(o.threads);

    try {
        if (*inst) return cmd_instanton(o);
        if (*scan) return cmd_scan(o);
        if (*extract) return cmd_extract(o);
        return cmd_check(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config;
    } catch (const AlgorithmFailure& e) {
        std::cerr << "algorithm failure: " << e.what() << "\n";
        return numerical;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return numerical;
    } catch (const DomainError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return numerical;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config;
    }
}
