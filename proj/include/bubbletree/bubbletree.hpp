#pragma once

#include "bubbletree/moments.hpp"
#include "bubbletree/splice.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace bubbletree {

struct AlgorithmFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InconsistentFamily : NumericalError {
    using NumericalError::NumericalError;
};

/// Expected dimension of the instanton moduli space, 8k - 3(1 - b1 + b+).
inline int moduli_dimension(int k, int b1, int bplus) {
    if (k < 0) throw ConfigError("moduli_dimension: k must be >= 0");
    return 8 * k - 3 * (1 - b1 + bplus);
}
/// A negative expected dimension: the moduli space is generically empty.
inline bool empty_moduli(int k, int b1, int bplus) { return moduli_dimension(k, b1, bplus) < 0; }

// ---------------------------------------------------------------------------
// Thresholds. Masses are in units of 8 pi^2, lengths in chart units unless noted.

struct Thresholds {
    /// A candidate keeps at least this much mass.
    double mass_floor = 0.3;
    /// Mass change that still counts as flat in the ball-mass profile.
    double plateau_tolerance = 0.02;
    /// Mass allowed to fall outside the ball used for centre and scale.
    double moment_tolerance = 1e-3;
    /// Seeds closer than this at the deepest alpha belong to one concentration point.
    double merge_distance = 0.05;
    /// Scale at the deepest alpha over the largest scale seen, for a concentrating candidate.
    double shrink_ratio = 0.5;
    /// Alpha values with ball moments, evenly spaced and ending at the deepest.
    int moment_points = 6;
    double varrho0 = 1.0;
    /// Residual energy below which a massless vertex is a theta vertex.
    double theta_energy = 0.05;
    /// Relative L2 density mismatch allowed for a BPST limit.
    double fit_tolerance = 0.05;
    /// Seeding lattice, in base units.
    double lattice_step = 0.08;
    double search_radius = 1.0;
    Point4 search_centre = Point4::Zero();
    /// A tracked core is searched again in its own chart each time its width shrinks by this
    /// factor (half-width chart_radius, step chart_step, in units of the width).
    double chart_shrink = 8.0;
    double chart_radius = 0.8;
    double chart_step = 0.1;
    /// 0 means the charge k.
    int max_depth = 0;
};

inline void to_json(nlohmann::json& j, const Thresholds& t) {
    j = nlohmann::json{{"mass_floor", t.mass_floor},
                       {"plateau_tolerance", t.plateau_tolerance},
                       {"moment_tolerance", t.moment_tolerance},
                       {"merge_distance", t.merge_distance},
                       {"shrink_ratio", t.shrink_ratio},
                       {"moment_points", t.moment_points},
                       {"varrho0", t.varrho0},
                       {"theta_energy", t.theta_energy},
                       {"fit_tolerance", t.fit_tolerance},
                       {"lattice_step", t.lattice_step},
                       {"search_radius", t.search_radius},
                       {"search_centre", detail::point_json(t.search_centre)},
                       {"chart_shrink", t.chart_shrink},
                       {"chart_radius", t.chart_radius},
                       {"chart_step", t.chart_step},
                       {"max_depth", t.max_depth}};
}

inline void from_json(const nlohmann::json& j, Thresholds& t) {
    if (!j.is_object()) throw ConfigError("thresholds must be a JSON object");
    t = Thresholds{};
    try {
        t.mass_floor = j.value("mass_floor", t.mass_floor);
        t.plateau_tolerance = j.value("plateau_tolerance", t.plateau_tolerance);
        t.moment_tolerance = j.value("moment_tolerance", t.moment_tolerance);
        t.merge_distance = j.value("merge_distance", t.merge_distance);
        t.shrink_ratio = j.value("shrink_ratio", t.shrink_ratio);
        t.moment_points = j.value("moment_points", t.moment_points);
        t.varrho0 = j.value("varrho0", t.varrho0);
        t.theta_energy = j.value("theta_energy", t.theta_energy);
        t.fit_tolerance = j.value("fit_tolerance", t.fit_tolerance);
        t.lattice_step = j.value("lattice_step", t.lattice_step);
        t.search_radius = j.value("search_radius", t.search_radius);
        if (j.contains("search_centre")) t.search_centre = detail::point_from_json(j.at("search_centre"), "search_centre");
        t.chart_shrink = j.value("chart_shrink", t.chart_shrink);
        t.chart_radius = j.value("chart_radius", t.chart_radius);
        t.chart_step = j.value("chart_step", t.chart_step);
        t.max_depth = j.value("max_depth", t.max_depth);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("thresholds: ") + e.what());
    }
    if (!(t.mass_floor > 0.0) || !(t.plateau_tolerance > 0.0) || !(t.moment_tolerance > 0.0) ||
        !(t.merge_distance > 0.0) || !(t.shrink_ratio > 0.0 && t.shrink_ratio < 1.0) || t.moment_points < 2 ||
        !(t.varrho0 > 0.0) || !(t.lattice_step > 0.0) || !(t.search_radius > t.lattice_step) || t.max_depth < 0 ||
        !(t.chart_shrink > 1.0) || !(t.chart_step > 0.0) || !(t.chart_radius > t.chart_step))
        throw ConfigError("thresholds: out of range");
}

/// Grid orders for the extraction quadrature; r_max and region are used for the root chart only.
inline GridSpec extraction_grid_spec() { return {0.0, 20.0, 24, 4, 4, Region::full_chart}; }

// ---------------------------------------------------------------------------
// Families.

using DensityFamily = std::function<DensityFn(double)>;
using ConnectionFamily = std::function<ConnectionField(double)>;

inline DensityFamily density_family(ConnectionFamily f) {
    return [f = std::move(f)](double alpha) { return curvature_density(f(alpha)); };
}

/// The family moved by p: the new density at y is the old one at y - p.
inline DensityFamily translated(DensityFamily f, const Point4& p) {
    return [f = std::move(f), p](double alpha) {
        DensityFn d = f(alpha);
        return DensityFn([d = std::move(d), p](const Point4& y) { return d(y - p); });
    };
}

/// lambda(alpha) = initial 2^{-rate t}, t = alpha - start clamped to [0, stop - start].
struct ScaleSchedule {
    double initial = 1.0;
    double rate = 1.0;
    double start = 0.0;
    double stop = std::numeric_limits<double>::infinity();

    double at(double alpha) const {
        return initial * std::exp2(-rate * (std::clamp(alpha, start, std::max(start, stop)) - start));
    }
};

/// A gluing tree whose scales follow per-node schedules.
struct FamilySpec {
    GluingTree tree;
    std::map<std::string, ScaleSchedule> schedules;
    std::vector<double> alphas;
    Point4 shift = Point4::Zero();
    /// Charge bound passed to the extraction; 0 means the tree's total charge.
    int k = 0;

    GluingTree at(double alpha) const {
        GluingTree t = tree;
        for (auto& n : t.nodes) {
            auto it = schedules.find(n.id);
            if (it != schedules.end()) n.scale = it->second.at(alpha);
        }
        return t;
    }
    int charge_bound() const { return k > 0 ? k : tree.total_charge(); }
    ConnectionField field(double alpha) const {
        ConnectionField base = pullback_to_base(splice(at(alpha)));
        if (shift.isZero(0.0)) return base;
        ConnectionField out;
        out.provenance = base.provenance;
        out.potential = [a = base.potential, p = shift](const Point4& y) { return a(y - p); };
        out.curvature = [f = base.curvature, p = shift](const Point4& y) { return f(y - p); };
        return out;
    }
    ConnectionFamily family() const {
        return [self = *this](double alpha) { return self.field(alpha); };
    }
};

inline void to_json(nlohmann::json& j, const ScaleSchedule& s) {
    j = nlohmann::json{{"initial", s.initial}, {"rate", s.rate}, {"start", s.start}};
    if (std::isfinite(s.stop)) j["stop"] = s.stop;
}
inline void from_json(const nlohmann::json& j, ScaleSchedule& s) {
    s = ScaleSchedule{};
    s.initial = j.value("initial", s.initial);
    s.rate = j.value("rate", s.rate);
    s.start = j.value("start", s.start);
    if (j.contains("stop")) s.stop = j.at("stop").get<double>();
    if (!(s.initial > 0.0) || !std::isfinite(s.rate)) throw ConfigError("schedule: initial must be positive");
    if (!(s.stop >= s.start)) throw ConfigError("schedule: stop must not precede start");
}

inline void to_json(nlohmann::json& j, const FamilySpec& f) {
    j = nlohmann::json{{"tree", f.tree}, {"schedule", f.schedules}, {"alphas", f.alphas}};
    if (!f.shift.isZero(0.0)) j["shift"] = detail::point_json(f.shift);
    if (f.k > 0) j["k"] = f.k;
}

inline void from_json(const nlohmann::json& j, FamilySpec& f) {
    f = FamilySpec{};
    try {
        f.tree = j.at("tree").get<GluingTree>();
        if (j.contains("schedule")) f.schedules = j.at("schedule").get<std::map<std::string, ScaleSchedule>>();
        const auto& a = j.at("alphas");
        if (a.is_array()) {
            f.alphas = a.get<std::vector<double>>();
        } else {
            const double from = a.at("from").get<double>(), to = a.at("to").get<double>(),
                         step = a.at("step").get<double>();
            if (!(step > 0.0) || !(to >= from)) throw ConfigError("family alphas: need step > 0 and to >= from");
            const auto n = static_cast<std::size_t>(std::floor((to - from) / step + 1e-9));
            for (std::size_t i = 0; i <= n; ++i) f.alphas.push_back(from + step * double(i));
        }
        if (j.contains("shift")) f.shift = detail::point_from_json(j.at("shift"), "family shift");
        f.k = j.value("k", 0);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("family spec: ") + e.what());
    }
    for (const auto& [id, s] : f.schedules) {
        if (!f.tree.find(id)) throw ConfigError("family spec: schedule for unknown node '" + id + "'");
        if (f.tree.nodes[f.tree.index(id)].is_root()) throw ConfigError("family spec: the root has no scale");
    }
    if (f.alphas.size() < 2) throw ConfigError("family spec: need at least two alpha values");
    if (!std::is_sorted(f.alphas.begin(), f.alphas.end())) throw ConfigError("family spec: alphas must increase");
}

// ---------------------------------------------------------------------------
// Peaks of a density.

/// A local maximum of the density with the width of a BPST profile fitted there.
struct Core {
    Point4 centre = Point4::Zero();
    double scale = 0.0;
    /// 0 for an exact BPST profile.
    double misfit = 0.0;
};

namespace detail {

struct QuadModel {
    Point4 centre = Point4::Zero();
    double scale = 0.0;
    double misfit = 0.0;
    bool ok = false;
};

/// u = D^{-1/4} is (s^2 + |y - c|^2) / (48^{1/4} s) for a BPST density; fit an isotropic
/// quadratic to u on the 9-point stencil of half-width delta.
inline QuadModel quadratic_model(const DensityFn& d, const Point4& at, double delta) {
    QuadModel m;
    auto u_at = [&](const Point4& y) {
        const double v = d(y);
        return (v > 0.0 && std::isfinite(v)) ? std::pow(v, -0.25) : -1.0;
    };
    const double u0 = u_at(at);
    if (u0 < 0.0) return m;
    Point4 b = Point4::Zero();
    std::array<double, 4> curv{};
    for (int mu = 0; mu < 4; ++mu) {
        Point4 e = Point4::Zero();
        e[mu] = delta;
        const double up = u_at(at + e), um = u_at(at - e);
        if (up < 0.0 || um < 0.0) return m;
        curv[mu] = (up + um - 2.0 * u0) / (2.0 * delta * delta);
        b[mu] = (up - um) / (2.0 * delta);
    }
    const double a = 0.25 * (curv[0] + curv[1] + curv[2] + curv[3]);
    if (!(a > 0.0)) return m;
    const double min_u = u0 - b.squaredNorm() / (4.0 * a);
    if (!(min_u > 0.0)) return m;
    static const double k48 = std::pow(48.0, 0.25);
    double spread = 0.0;
    for (double c : curv) spread = std::max(spread, std::abs(c - a));
    m.centre = at - b / (2.0 * a);
    m.scale = 1.0 / (k48 * a);
    m.misfit = std::max(spread / a, std::abs(k48 * min_u / m.scale - 1.0));
    m.ok = true;
    return m;
}

}  // namespace detail

/// Newton iteration on the quadratic model of D^{-1/4}, from a point inside the peak.
inline std::optional<Core> fit_core(const DensityFn& d, Point4 at, double delta) {
    if (!(delta > 0.0)) return std::nullopt;
    const double floor = delta * 1e-7;
    detail::QuadModel m;
    bool converged = false;
    for (int it = 0; it < 200 && !converged; ++it) {
        m = detail::quadratic_model(d, at, delta);
        if (!m.ok) {
            delta *= 0.5;
            if (delta < floor) return std::nullopt;
            continue;
        }
        const Point4 step = m.centre - at;
        const double n = step.norm();
        if (n > 4.0 * delta) {
            at += step * (4.0 * delta / n);
            continue;
        }
        at = m.centre;
        converged = n <= 1e-11 * m.scale;
        delta = std::min(delta, 0.25 * m.scale);
    }
    if (!converged) return std::nullopt;
    // shrink the stencil until the width stops changing (inside the exact core of a spliced bubble)
    double previous = m.scale;
    for (int it = 0; it < 40 && delta > floor; ++it) {
        delta *= 0.5;
        const detail::QuadModel n = detail::quadratic_model(d, at, delta);
        if (!n.ok) break;
        at = n.centre;
        const double change = std::abs(n.scale / previous - 1.0);
        previous = n.scale;
        m = n;
        if (change < 1e-6 || delta < 1e-4 * n.scale) break;
    }
    return Core{at, m.scale, m.misfit};
}

namespace detail {

/// Density samples on a cubic lattice of side n about a centre.
struct Lattice {
    Point4 centre = Point4::Zero();
    double step = 1.0;
    int n = 0;
    std::vector<double> value;

    Lattice(const DensityFn& d, const Point4& c, double half_width, double h) : centre(c), step(h) {
        n = 2 * int(std::floor(half_width / h + 1e-9)) + 1;
        if (n < 3) throw ConfigError("lattice: the box must hold at least three points per axis");
        value.resize(std::size_t(n) * n * n * n);
        parallel_for(value.size(), [&](std::size_t i) {
            const double x = d(point(i));
            value[i] = std::isfinite(x) ? x : 0.0;
        });
    }
    std::array<int, 4> coords(std::size_t i) const {
        std::array<int, 4> c{};
        for (int mu = 0; mu < 4; ++mu) {
            c[mu] = int(i % std::size_t(n));
            i /= std::size_t(n);
        }
        return c;
    }
    std::size_t index(const std::array<int, 4>& c) const {
        return std::size_t(c[0]) + std::size_t(n) * (std::size_t(c[1]) + std::size_t(n) * (std::size_t(c[2]) + std::size_t(n) * std::size_t(c[3])));
    }
    Point4 point(std::size_t i) const {
        const auto c = coords(i);
        Point4 p;
        for (int mu = 0; mu < 4; ++mu) p[mu] = centre[mu] + step * (c[mu] - n / 2);
        return p;
    }
    bool on_boundary(std::size_t i) const {
        const auto c = coords(i);
        return std::any_of(c.begin(), c.end(), [this](int x) { return x == 0 || x == n - 1; });
    }
    /// The up to 80 lattice neighbours (offsets in {-1, 0, 1}^4).
    template <class F>
    void neighbours(std::size_t i, F&& f) const {
        const auto c = coords(i);
        for (int o = 0; o < 81; ++o) {
            if (o == 40) continue;
            std::array<int, 4> q{};
            int oo = o;
            bool inside = true;
            for (int mu = 0; mu < 4; ++mu) {
                q[mu] = c[mu] + oo % 3 - 1;
                oo /= 3;
                inside &= q[mu] >= 0 && q[mu] < n;
            }
            if (inside) f(index(q));
        }
    }
    /// Connected components of {value > 0} (or {value == 0}) that stay clear of the boundary.
    std::vector<std::vector<std::size_t>> enclosed(bool positive) const {
        std::vector<char> seen(value.size(), 0);
        std::vector<std::vector<std::size_t>> out;
        auto member = [&](std::size_t i) { return positive ? value[i] > 0.0 : value[i] == 0.0; };
        for (std::size_t i = 0; i < value.size(); ++i) {
            if (seen[i] || !member(i)) continue;
            std::vector<std::size_t> comp{i};
            seen[i] = 1;
            bool open = false;
            for (std::size_t k = 0; k < comp.size(); ++k) {
                open |= on_boundary(comp[k]);
                neighbours(comp[k], [&](std::size_t j) {
                    if (!seen[j] && member(j)) {
                        seen[j] = 1;
                        comp.push_back(j);
                    }
                });
            }
            if (!open) out.push_back(std::move(comp));
        }
        return out;
    }
    Point4 centroid(const std::vector<std::size_t>& ids, bool weighted) const {
        Point4 c = Point4::Zero();
        double m = 0.0;
        for (std::size_t i : ids) {
            const double w = weighted ? value[i] : 1.0;
            c += w * point(i);
            m += w;
        }
        return m > 0.0 ? Point4(c / m) : point(ids.front());
    }
};

inline void add_core(std::vector<Core>& out, const std::optional<Core>& core) {
    if (!core) return;
    const bool duplicate = std::any_of(out.begin(), out.end(), [&](const Core& o) {
        return (o.centre - core->centre).norm() < 1e-6 * std::min(o.scale, core->scale);
    });
    if (!duplicate) out.push_back(*core);
}

/// Core fit from a lattice point, falling back to the weighted centroid of its component
/// (a maximum on the rim of a cut-off core does not sit inside the core).
inline std::optional<Core> fit_from(const DensityFn& d, const Lattice& l, std::size_t at,
                                    const std::vector<std::size_t>& component) {
    auto core = fit_core(d, l.point(at), 0.25 * l.step);
    if (core && (core->centre - l.point(at)).norm() <= 2.0 * l.step) return core;
    return fit_core(d, l.centroid(component, true), 0.25 * l.step);
}

/// Zoom into an energy-free pocket until whatever sits at its centre is resolved.
inline std::vector<Core> zoom_pocket(const DensityFn& d, Point4 centre, double half_width) {
    std::vector<Core> out;
    const double floor = 1e-10 * half_width;
    for (int it = 0; it < 64 && half_width > floor; ++it, half_width *= 0.5) {
        const Lattice l(d, centre, half_width, half_width / 8.0);
        for (const auto& comp : l.enclosed(true)) {
            const auto top = *std::max_element(comp.begin(), comp.end(),
                                               [&](std::size_t a, std::size_t b) { return l.value[a] < l.value[b]; });
            add_core(out, fit_from(d, l, top, comp));
        }
        if (!out.empty()) return out;
        std::vector<std::size_t> zeros;
        for (std::size_t i = 0; i < l.value.size(); ++i)
            if (l.value[i] == 0.0) zeros.push_back(i);
        if (zeros.empty()) return out;
        centre = l.centroid(zeros, false);
    }
    return out;
}

}  // namespace detail

/// Cores in a box: lattice maxima refined by fit_core, plus whatever sits inside
/// energy-free pockets enclosed by the density (the cut-out of a bubble too small to sample).
inline std::vector<Core> lattice_peaks(const DensityFn& d, const Point4& centre, double half_width, double step) {
    const detail::Lattice l(d, centre, half_width, step);
    std::vector<Core> out;
    for (std::size_t i = 0; i < l.value.size(); ++i) {
        if (!(l.value[i] > 0.0) || l.on_boundary(i)) continue;
        bool is_max = true;
        // ties go to the larger index, so a flat top yields one maximum
        l.neighbours(i, [&](std::size_t j) { is_max = is_max && (l.value[i] > l.value[j] || (l.value[i] == l.value[j] && i > j)); });
        if (!is_max) continue;
        // the component of the maximum within its 5^4 neighbourhood
        std::vector<std::size_t> local;
        const auto c = l.coords(i);
        for (int o = 0; o < 625; ++o) {
            std::array<int, 4> q{};
            int oo = o;
            bool inside = true;
            for (int mu = 0; mu < 4; ++mu) {
                q[mu] = c[mu] + oo % 5 - 2;
                oo /= 5;
                inside &= q[mu] >= 0 && q[mu] < l.n;
            }
            if (inside) local.push_back(l.index(q));
        }
        detail::add_core(out, detail::fit_from(d, l, i, local));
    }
    for (const auto& pocket : l.enclosed(false)) {
        const Point4 c = l.centroid(pocket, false);
        double extent = 0.0;
        for (std::size_t i : pocket) extent = std::max(extent, (l.point(i) - c).norm());
        for (const Core& core : detail::zoom_pocket(d, c, extent + step)) detail::add_core(out, core);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Seed tracking along alpha.

struct SeedTrack {
    /// Alpha index of the first entry.
    std::size_t first = 0;
    /// Width at the last search in this core's chart.
    double searched = std::numeric_limits<double>::infinity();
    /// The track in whose chart this one was found.
    std::optional<std::size_t> parent;
    std::vector<Point4> centre;
    std::vector<double> scale;
    bool lost = false;

    std::size_t last() const { return first + centre.size() - 1; }
    bool alive_at(std::size_t a) const { return a >= first && a <= last(); }
    const Point4& centre_at(std::size_t a) const { return centre.at(a - first); }
    double scale_at(std::size_t a) const { return scale.at(a - first); }
};

namespace detail {

inline bool plausible(const Core& c, const Point4& predicted, double scale, double motion) {
    const double ratio = c.scale / scale;
    return ratio > 0.125 && ratio < 8.0 && (c.centre - predicted).norm() <= 4.0 * scale + 2.0 * motion;
}

/// Geometric extrapolation of the last steps of a path of (centre, width).
inline std::pair<Point4, double> extrapolate(const std::vector<Point4>& centre, const std::vector<double>& scale) {
    const std::size_t n = centre.size();
    if (n < 2) return {centre.back(), scale.back()};
    const Point4 d1 = centre[n - 1] - centre[n - 2];
    double r = 1.0, rs = scale[n - 1] / scale[n - 2];
    if (n >= 3) {
        const Point4 d0 = centre[n - 2] - centre[n - 3];
        const double q = d0.squaredNorm();
        r = q > 0.0 ? std::clamp(d1.dot(d0) / q, 0.0, 1.5) : 0.0;
    }
    return {centre[n - 1] + r * d1, scale[n - 1] * std::clamp(rs, 0.125, 8.0)};
}

/// Next position of track t at alpha index a. A track found in another core's chart is
/// extrapolated in that chart, so it follows its parent's motion from the first step.
inline std::pair<Point4, double> predict(const std::vector<SeedTrack>& tracks, std::size_t t, std::size_t a) {
    const SeedTrack& s = tracks[t];
    if (s.parent) {
        const SeedTrack& p = tracks[*s.parent];
        if (!p.lost && p.alive_at(a) && p.first <= s.first) {
            std::vector<Point4> c;
            std::vector<double> w;
            for (std::size_t i = 0; i < s.centre.size(); ++i) {
                const std::size_t at = s.first + i;
                c.push_back((s.centre[i] - p.centre_at(at)) / p.scale_at(at));
                w.push_back(s.scale[i] / p.scale_at(at));
            }
            const auto [rc, rw] = extrapolate(c, w);
            return {p.centre_at(a) + p.scale_at(a) * rc, p.scale_at(a) * rw};
        }
    }
    return extrapolate(s.centre, s.scale);
}

}  // namespace detail

/// Seeds from a lattice search at the shallowest alpha, followed to the deepest one.
/// Cores that show up later inside a tracked core's chart start tracks of their own.
inline std::vector<SeedTrack> track_seeds(const std::vector<DensityFn>& densities, const Thresholds& th) {
    if (densities.empty()) return {};
    std::vector<SeedTrack> tracks;
    auto adopt = [&tracks](const Core& c, std::size_t a, std::optional<std::size_t> parent) {
        for (const auto& t : tracks) {
            if (t.lost || !t.alive_at(a)) continue;
            if ((t.centre_at(a) - c.centre).norm() < 1e-3 * std::min(t.scale_at(a), c.scale)) return;
        }
        SeedTrack t;
        t.first = a;
        t.parent = parent;
        t.centre.push_back(c.centre);
        t.scale.push_back(c.scale);
        tracks.push_back(std::move(t));
    };
    auto search_charts = [&](std::size_t a) {
        const std::size_t known = tracks.size();
        for (std::size_t i = 0; i < known; ++i) {
            if (tracks[i].lost || !tracks[i].alive_at(a)) continue;
            const double s = tracks[i].scale_at(a);
            if (s * th.chart_shrink > tracks[i].searched) continue;
            tracks[i].searched = s;
            for (const Core& c : lattice_peaks(densities[a], tracks[i].centre_at(a), th.chart_radius * s, th.chart_step * s))
                adopt(c, a, i);
        }
    };
    for (const Core& c : lattice_peaks(densities[0], th.search_centre, th.search_radius, th.lattice_step)) adopt(c, 0, std::nullopt);
    for (auto& t : tracks) t.searched = t.scale.front();
    for (std::size_t a = 1; a < densities.size(); ++a) {
        const DensityFn& d = densities[a];
        for (std::size_t ti = 0; ti < tracks.size(); ++ti) {
            SeedTrack& t = tracks[ti];
            if (t.lost) continue;
            const auto [guess, s_guess] = detail::predict(tracks, ti, a);
            const Point4 prev = t.centre.back();
            const double motion = (guess - prev).norm() +
                                  (t.centre.size() > 1 ? (prev - t.centre[t.centre.size() - 2]).norm() : 0.0);
            std::optional<Core> found;
            for (const Point4& start : {guess, prev, Point4(0.5 * (guess + prev))}) {
                auto c = fit_core(d, start, 0.25 * s_guess);
                if (c && detail::plausible(*c, guess, s_guess, motion)) {
                    found = c;
                    break;
                }
            }
            if (!found) {
                // local lattices about the prediction, fine enough to land inside a cut-off core
                for (double w : {0.5 * s_guess, 2.0 * s_guess, 8.0 * s_guess, 32.0 * s_guess}) {
                    w = std::max(w, 2.0 * motion);
                    for (const Core& c : lattice_peaks(d, guess, w, w / 8.0)) {
                        if (detail::plausible(c, guess, s_guess, motion) &&
                            (!found || (c.centre - guess).norm() < (found->centre - guess).norm()))
                            found = c;
                    }
                    if (found) break;
                }
            }
            if (!found) {
                t.lost = true;
                continue;
            }
            t.centre.push_back(found->centre);
            t.scale.push_back(found->scale);
        }
        // two tracks on one peak: keep the older
        for (std::size_t i = 0; i < tracks.size(); ++i) {
            if (tracks[i].lost || !tracks[i].alive_at(a)) continue;
            for (std::size_t j = i + 1; j < tracks.size(); ++j) {
                if (tracks[j].lost || !tracks[j].alive_at(a)) continue;
                const double s = std::min(tracks[i].scale_at(a), tracks[j].scale_at(a));
                if ((tracks[i].centre_at(a) - tracks[j].centre_at(a)).norm() < 1e-6 * s) tracks[j].lost = true;
            }
        }
        search_charts(a);
    }
    return tracks;
}

// ---------------------------------------------------------------------------
// Focused quadrature: log-radial balls about points of interest, glued by a
// finest-first partition of unity.

struct Focus {
    Point4 centre = Point4::Zero();
    double radius = 1.0;
    /// Smallest length to resolve near the centre.
    double core = 1e-3;
};

namespace detail {

/// 1 inside half the radius, 0 outside the radius.
inline double focus_weight(const Focus& f, const Point4& y) {
    const double t = 2.0 * (y - f.centre).norm() / f.radius - 1.0;
    return 1.0 - profile::smoothstep(t);
}

inline QuadratureGrid focus_ball(const Focus& f, const GridSpec& like) {
    const int panels = std::clamp(int(std::ceil(std::log2(f.radius / std::max(f.core, 1e-300)))) + 3, 4, 80);
    GridSpec spec{0.0, f.radius, panels, like.gauss_order, like.s3_order, Region::ball, std::exp2(-panels)};
    return placed(build_grid(spec), f.centre, 1.0);
}

}  // namespace detail

/// Flat-measure grid in the base chart. With `main`, its nodes cover what the foci leave;
/// without it the grid covers only the union of the foci balls.
/// `keep` drops nodes before they are weighted (e.g. outside a region of interest).
inline QuadratureGrid focused_grid(std::vector<Focus> foci, const GridSpec& like,
                                   const std::optional<QuadratureGrid>& main = std::nullopt,
                                   const std::function<bool(const Point4&)>& keep = {}) {
    std::stable_sort(foci.begin(), foci.end(), [](const Focus& a, const Focus& b) { return a.radius < b.radius; });
    QuadratureGrid out;
    auto add = [&](const Point4& y, double w, std::size_t upto) {
        if (keep && !keep(y)) return;
        for (std::size_t q = 0; q < upto && w > 0.0; ++q) w *= 1.0 - detail::focus_weight(foci[q], y);
        if (w <= 0.0) return;
        out.nodes.push_back(y);
        out.weights.push_back(w);
        out.radii.push_back(y.norm());
    };
    for (std::size_t p = 0; p < foci.size(); ++p) {
        const QuadratureGrid g = detail::focus_ball(foci[p], like);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double chi = detail::focus_weight(foci[p], g.nodes[i]);
            if (chi > 0.0) add(g.nodes[i], g.weights[i] * chi, p);
        }
    }
    if (main)
        for (std::size_t i = 0; i < main->size(); ++i) add(main->nodes[i], main->weights[i], foci.size());
    out.gauss_order = like.gauss_order;
    out.s3_order = like.s3_order;
    return out;
}

/// Foci from a single-linkage dendrogram of the seed points: one ball per cluster,
/// radius a quarter of the gap to the rest, capped at `top`.
inline std::vector<Focus> seed_foci(const std::vector<Point4>& points, const std::vector<double>& scales, double top) {
    const std::size_t n = points.size();
    std::vector<Focus> out;
    if (n == 0) return out;
    // Kruskal on the complete graph
    std::vector<std::tuple<double, std::size_t, std::size_t>> edges;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) edges.emplace_back((points[i] - points[j]).norm(), i, j);
    std::sort(edges.begin(), edges.end());
    struct Cluster {
        std::vector<std::size_t> members;
    };
    std::vector<Cluster> clusters(n);
    std::vector<std::size_t> owner(n);
    for (std::size_t i = 0; i < n; ++i) {
        clusters[i].members = {i};
        owner[i] = i;
    }
    auto emit = [&](const std::vector<std::size_t>& m, double gap) {
        Point4 c = Point4::Zero();
        double core = std::numeric_limits<double>::infinity();
        for (std::size_t i : m) {
            c += points[i];
            core = std::min(core, scales[i]);
        }
        c /= double(m.size());
        const double radius = std::min(top, 0.25 * gap);
        if (radius > 0.0) out.push_back({c, radius, std::min(0.01 * core, 0.01 * radius)});
    };
    for (const auto& [d, i, j] : edges) {
        const std::size_t a = owner[i], b = owner[j];
        if (a == b) continue;
        emit(clusters[a].members, d);
        emit(clusters[b].members, d);
        for (std::size_t m : clusters[b].members) {
            clusters[a].members.push_back(m);
            owner[m] = a;
        }
        clusters[b].members.clear();
    }
    emit(clusters[owner[0]].members, 4.0 * top);
    return out;
}

// ---------------------------------------------------------------------------
// Ball-mass profiles.

/// A chart on the base: y = centre + scale z.
struct Frame {
    Point4 centre = Point4::Zero();
    double scale = 1.0;
    bool valid = true;

    Point4 to_chart(const Point4& y) const { return (y - centre) / scale; }
    Point4 to_base(const Point4& z) const { return centre + scale * z; }
};

struct BallProfile {
    /// r0 2^{-j}, base units.
    std::vector<double> radii;
    std::vector<double> mass;
    /// Mass at the outer end of the flat stretch of the profile.
    double plateau_mass = 0.0;
    /// Ball used for centre and scale (inner end of the flat stretch), base units.
    double moment_radius = 0.0;
    bool plateau = false;
    Point4 centre = Point4::Zero();
    double scale = 0.0;
};

inline BallProfile ball_profile(const DensityFn& density, const Point4& x, double r0, const std::vector<Focus>& inner,
                                const GridSpec& like, const Thresholds& th) {
    double core = 1e-4 * r0;
    for (const auto& f : inner) core = std::min(core, f.core);
    std::vector<Focus> foci = inner;
    foci.push_back({x, 2.0 * r0, core});
    const QuadratureGrid g = focused_grid(foci, like, std::nullopt, [&](const Point4& y) { return (y - x).norm() < r0; });
    std::vector<double> dw(g.size());
    parallel_for(g.size(), [&](std::size_t i) { dw[i] = density(g.nodes[i]) * g.weights[i]; });
    for (double v : dw)
        if (!std::isfinite(v)) throw NumericalError("ball_profile: non-finite density");
    std::vector<double> dist(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) dist[i] = (g.nodes[i] - x).norm();

    BallProfile p;
    for (double r = r0; r >= 0.5 * core; r *= 0.5) p.radii.push_back(r);
    std::vector<double> tmp(g.size());
    for (double r : p.radii) {
        for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = dist[i] < r ? dw[i] : 0.0;
        p.mass.push_back(pairwise_sum(tmp));
    }
    const double tol = th.plateau_tolerance * unit_charge, floor = th.mass_floor * unit_charge;
    std::size_t js = p.radii.size(), jm = 0;
    for (std::size_t j = 0; j + 1 < p.radii.size(); ++j) {
        if (p.mass[j] >= floor && std::abs(p.mass[j] - p.mass[j + 1]) <= tol) {
            js = j;
            break;
        }
    }
    if (js < p.radii.size()) {
        p.plateau = true;
        p.plateau_mass = p.mass[js];
        jm = js;
        for (std::size_t j = js + 1; j < p.radii.size(); ++j) {
            if (std::abs(p.mass[j] - p.mass[js]) > th.moment_tolerance * unit_charge) break;
            jm = j;
        }
    } else {
        p.plateau_mass = p.mass.front();
    }
    p.moment_radius = p.radii[jm];
    for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = dist[i] < p.moment_radius ? dw[i] : 0.0;
    const double m = pairwise_sum(tmp);
    if (std::abs(m) < flat_mass_threshold) return p;
    std::vector<double> mom(g.size());
    for (int mu = 0; mu < 4; ++mu) {
        for (std::size_t i = 0; i < g.size(); ++i) mom[i] = tmp[i] * g.nodes[i][mu];
        p.centre[mu] = pairwise_sum(mom) / m;
    }
    for (std::size_t i = 0; i < g.size(); ++i) mom[i] = tmp[i] * (g.nodes[i] - p.centre).squaredNorm();
    p.scale = std::sqrt(std::max(0.0, pairwise_sum(mom) / m));
    return p;
}

// ---------------------------------------------------------------------------
// Concentration detection in one chart.

struct Candidate {
    /// Concentration point and ball radius r0, in chart units.
    Point4 point = Point4::Zero();
    double ball_radius = 0.0;
    /// Indices into the seed tracks.
    std::vector<std::size_t> seeds;
    /// Per moment alpha (NaN where the chart is not defined).
    std::vector<double> mass;
    std::vector<Point4> centre;  // base units
    std::vector<double> scale;   // base units
    std::vector<double> moment_radius;  // chart units
    /// Mass on B(x, r0 / 2) at the deepest alpha: the r0 stability check.
    double half_radius_mass = 0.0;
    bool concentrating = false;
    std::string note;
};

struct ConcentrationReport {
    /// The alpha values carrying ball moments.
    std::vector<double> alphas;
    std::vector<Candidate> candidates;
    std::vector<Candidate> rejected;
    /// Total mass at the deepest two alphas.
    std::array<double, 2> total_mass{};
    double epsilon = 0.0;
    std::size_t lost_seeds = 0;
};

inline void to_json(nlohmann::json& j, const Candidate& c) {
    nlohmann::json centres = nlohmann::json::array();
    for (const auto& p : c.centre) centres.push_back(detail::point_json(p));
    j = nlohmann::json{{"point", detail::point_json(c.point)}, {"ball_radius", c.ball_radius},
                       {"mass", c.mass},   {"centre", centres},
                       {"scale", c.scale}, {"moment_radius", c.moment_radius},
                       {"half_radius_mass", c.half_radius_mass}, {"concentrating", c.concentrating}};
    if (!c.note.empty()) j["note"] = c.note;
}

inline void to_json(nlohmann::json& j, const ConcentrationReport& r) {
    j = nlohmann::json{{"alphas", r.alphas},       {"candidates", r.candidates}, {"rejected", r.rejected},
                       {"total_mass", r.total_mass}, {"epsilon", r.epsilon},       {"lost_seeds", r.lost_seeds}};
}

namespace detail {

/// Evenly spaced alpha indices ending at the deepest.
inline std::vector<std::size_t> moment_indices(std::size_t count, int points) {
    std::vector<std::size_t> out;
    const std::size_t p = std::min<std::size_t>(std::size_t(points), count);
    for (std::size_t i = 0; i < p; ++i) {
        const std::size_t a = p == 1 ? count - 1 : (count - 1) * i / (p - 1);
        if (out.empty() || out.back() != a) out.push_back(a);
    }
    return out;
}

struct Context {
    std::vector<double> alphas;
    std::vector<DensityFn> densities;
    std::vector<SeedTrack> seeds;
    std::vector<std::size_t> window;
    Thresholds th;
    GridSpec like;

    std::size_t deepest() const { return densities.size() - 1; }
    std::vector<std::size_t> alive(const std::vector<std::size_t>& ids) const {
        std::vector<std::size_t> out;
        for (std::size_t s : ids)
            if (seeds[s].alive_at(deepest())) out.push_back(s);
        return out;
    }
    std::vector<Focus> foci(const std::vector<std::size_t>& ids, std::size_t a, double top) const {
        std::vector<Point4> p;
        std::vector<double> s;
        for (std::size_t i : ids) {
            if (!seeds[i].alive_at(a)) continue;
            p.push_back(seeds[i].centre_at(a));
            s.push_back(seeds[i].scale_at(a));
        }
        return seed_foci(p, s, top);
    }
};

/// Single-linkage groups of chart points.
inline std::vector<std::vector<std::size_t>> link(const std::vector<Point4>& z, double d) {
    const std::size_t n = z.size();
    std::vector<std::size_t> owner(n);
    std::iota(owner.begin(), owner.end(), std::size_t(0));
    std::function<std::size_t(std::size_t)> root = [&](std::size_t i) { return owner[i] == i ? i : owner[i] = root(owner[i]); };
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if ((z[i] - z[j]).norm() < d) owner[root(j)] = root(i);
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) groups[root(i)].push_back(i);
    std::vector<std::vector<std::size_t>> out;
    for (auto& [r, g] : groups) out.push_back(std::move(g));
    return out;
}

/// Candidates in a chart given per-moment-alpha frames and the seeds that live there.
inline std::vector<Candidate> analyse_chart(const Context& ctx, const std::vector<Frame>& frames,
                                            const std::vector<std::size_t>& seed_ids) {
    const std::size_t K = ctx.deepest(), W = ctx.window.size();
    const Frame& deep = frames.back();
    if (!deep.valid) return {};
    const auto ids = ctx.alive(seed_ids);
    std::vector<Point4> z;
    for (std::size_t s : ids) z.push_back(deep.to_chart(ctx.seeds[s].centre_at(K)));
    const auto groups = link(z, ctx.th.merge_distance);
    std::vector<Candidate> out;
    for (const auto& g : groups) {
        Candidate c;
        for (std::size_t i : g) {
            c.seeds.push_back(ids[i]);
            c.point += z[i];
        }
        c.point /= double(g.size());
        out.push_back(std::move(c));
    }
    double d0 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = i + 1; j < out.size(); ++j) d0 = std::min(d0, (out[i].point - out[j].point).norm());
    const double r0 = 0.25 * std::min({1.0, ctx.th.varrho0, d0});
    const double nan = std::numeric_limits<double>::quiet_NaN();

    for (auto& c : out) {
        c.ball_radius = r0;
        c.mass.assign(W, nan);
        c.centre.assign(W, Point4::Constant(nan));
        c.scale.assign(W, nan);
        c.moment_radius.assign(W, nan);
        auto profile_at = [&](std::size_t w) {
            const std::size_t a = ctx.window[w];
            const double R = r0 * frames[w].scale;
            return ball_profile(ctx.densities[a], frames[w].to_base(c.point), R, ctx.foci(c.seeds, a, 0.5 * R), ctx.like,
                                ctx.th);
        };
        // centre the ball on the deepest mass before using it elsewhere
        BallProfile p = profile_at(W - 1);
        if (p.scale > 0.0) {
            c.point = deep.to_chart(p.centre);
            p = profile_at(W - 1);
        }
        c.half_radius_mass = p.mass.size() > 1 ? p.mass[1] : 0.0;
        for (std::size_t w = 0; w < W; ++w) {
            if (!frames[w].valid) continue;
            const BallProfile q = w + 1 == W ? p : profile_at(w);
            c.mass[w] = q.plateau_mass;
            c.centre[w] = q.centre;
            c.scale[w] = q.scale;
            c.moment_radius[w] = q.moment_radius / frames[w].scale;
        }
        // two-scale window: mass at the two deepest moment alphas, and a shrinking scale
        const double floor = ctx.th.mass_floor * unit_charge;
        std::vector<std::size_t> valid;
        for (std::size_t w = 0; w < W; ++w)
            if (frames[w].valid && std::isfinite(c.mass[w])) valid.push_back(w);
        double largest = 0.0;
        for (std::size_t w : valid)
            if (c.scale[w] > 0.0) largest = std::max(largest, c.scale[w] / frames[w].scale);
        const double last = c.scale[W - 1] / deep.scale;
        const bool massive = valid.size() >= 2 && c.mass[valid.back()] >= floor && c.mass[valid[valid.size() - 2]] >= floor;
        const bool shrinking = last > 0.0 && last <= ctx.th.shrink_ratio * largest;
        c.concentrating = massive && shrinking && p.plateau;
        if (!massive) c.note = "mass below floor";
        else if (!shrinking) c.note = "scale not shrinking";
        else if (!p.plateau) c.note = "no flat stretch in the ball-mass profile";
        else if (std::abs(c.half_radius_mass - p.plateau_mass) > ctx.th.plateau_tolerance * unit_charge)
            c.note = "r0 and r0/2 disagree";
    }
    std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
        return std::lexicographical_compare(a.point.data(), a.point.data() + 4, b.point.data(), b.point.data() + 4);
    });
    return out;
}

/// Total mass on the base chart: the grid's main region plus foci on every seed and candidate ball.
inline double total_mass(const Context& ctx, std::size_t a, const std::vector<Candidate>& cands,
                         const std::vector<Frame>* frames = nullptr) {
    std::vector<std::size_t> all(ctx.seeds.size());
    std::iota(all.begin(), all.end(), std::size_t(0));
    std::vector<Focus> foci = ctx.foci(all, a, 0.25);
    for (const auto& c : cands) {
        const Point4 x = frames ? frames->back().to_base(c.point) : c.point;
        double core = 1e-4 * c.ball_radius;
        for (const auto& f : foci) core = std::min(core, f.core);
        foci.push_back({x, 2.0 * c.ball_radius, core});
    }
    GridSpec main = ctx.like;
    main.region = Region::full_chart;
    main.r_min = 0.0;
    const QuadratureGrid g = focused_grid(foci, ctx.like, build_grid(main));
    std::vector<double> v(g.size());
    parallel_for(g.size(), [&](std::size_t i) { v[i] = ctx.densities[a](g.nodes[i]) * g.weights[i]; });
    for (double x : v)
        if (!std::isfinite(x)) throw NumericalError("total mass: non-finite density");
    return pairwise_sum(v);
}

inline Context make_context(const std::vector<double>& alphas, std::vector<DensityFn> densities, const Thresholds& th,
                            const GridSpec& like) {
    if (alphas.size() < 2) throw ConfigError("need at least two alpha values");
    if (alphas.size() != densities.size()) throw ConfigError("one density per alpha");
    Context ctx;
    ctx.alphas = alphas;
    ctx.densities = std::move(densities);
    ctx.th = th;
    ctx.like = like;
    ctx.window = moment_indices(alphas.size(), th.moment_points);
    // the deepest two alphas both carry moments
    if (ctx.window.size() < 2 || ctx.window[ctx.window.size() - 2] != alphas.size() - 2)
        ctx.window.insert(ctx.window.end() - 1, alphas.size() - 2);
    std::sort(ctx.window.begin(), ctx.window.end());
    ctx.window.erase(std::unique(ctx.window.begin(), ctx.window.end()), ctx.window.end());
    ctx.seeds = track_seeds(ctx.densities, th);
    return ctx;
}

}  // namespace detail

/// Concentration points of a density family in the base chart. `epsilon` is a mass, not a charge.
inline ConcentrationReport detect_concentration(const DensityFamily& family, const std::vector<double>& alphas,
                                                double epsilon, const GridSpec& like = extraction_grid_spec(),
                                                Thresholds th = {}) {
    if (!(epsilon > 0.0)) throw ConfigError("detect_concentration: epsilon must be positive");
    th.mass_floor = epsilon / unit_charge;
    std::vector<DensityFn> d;
    for (double a : alphas) d.push_back(family(a));
    const detail::Context ctx = detail::make_context(alphas, std::move(d), th, like);
    std::vector<std::size_t> all(ctx.seeds.size());
    std::iota(all.begin(), all.end(), std::size_t(0));
    const std::vector<Frame> root(ctx.window.size());
    ConcentrationReport r;
    r.epsilon = epsilon;
    for (std::size_t a : ctx.window) r.alphas.push_back(ctx.alphas[a]);
    for (const auto& s : ctx.seeds) r.lost_seeds += s.lost ? 1 : 0;
    for (auto& c : detail::analyse_chart(ctx, root, all)) (c.concentrating ? r.candidates : r.rejected).push_back(std::move(c));
    const std::size_t K = ctx.deepest();
    r.total_mass = {detail::total_mass(ctx, K - 1, r.candidates), detail::total_mass(ctx, K, r.candidates)};
    if (std::abs(r.total_mass[1] - r.total_mass[0]) > 0.01 * unit_charge)
        throw InconsistentFamily("detect_concentration: total mass moves by more than 1% of 8 pi^2 between the deepest alphas");
    double held = 0.0;
    for (const auto& c : r.candidates) held += c.mass.back();
    if (held > r.total_mass[1] + 0.01 * unit_charge)
        throw InconsistentFamily("detect_concentration: candidates hold more mass than the family");
    return r;
}

// ---------------------------------------------------------------------------
// Ideal connections.

enum class LimitKind { base, theta, bpst, open };

inline std::string to_string(LimitKind k) {
    switch (k) {
        case LimitKind::base: return "base";
        case LimitKind::theta: return "theta";
        case LimitKind::bpst: return "bpst";
        case LimitKind::open: return "open";
    }
    return "open";
}
inline LimitKind limit_from_string(const std::string& s) {
    if (s == "base") return LimitKind::base;
    if (s == "theta") return LimitKind::theta;
    if (s == "bpst") return LimitKind::bpst;
    if (s == "open") return LimitKind::open;
    throw ConfigError("unknown limit tag '" + s + "'");
}

/// Per moment alpha, in base units.
struct VertexTrack {
    std::vector<double> alpha;
    std::vector<Point4> centre;
    std::vector<double> scale;
    std::vector<Point4> parent_centre;
    std::vector<double> parent_scale;
    std::vector<double> mass;
    /// Seed cores of the subtree (centre, scale), for quadrature.
    std::vector<std::vector<std::pair<Point4, double>>> cores;
};

struct IdealVertex {
    std::string id;
    std::string parent;
    /// Charge carried by the vertex limit itself.
    int charge = 0;
    int subtree_charge = 0;
    LimitKind limit = LimitKind::base;
    /// BPST limit in the vertex's blown-up chart.
    std::optional<BpstParams> bpst;
    /// x_I in the parent's blown-up chart, and lambda_I relative to the parent, at the deepest alpha.
    Point4 attachment = Point4::Zero();
    double scale = 1.0;
    /// Ball radius r0 and moment radius, parent chart units.
    double ball_radius = 0.0;
    double moment_radius = 0.0;
    double fit_misfit = 0.0;
    /// Energy left on the vertex chart after the children's balls are removed.
    double residual_energy = 0.0;
    std::string diagnostic;
    VertexTrack track;

    bool is_root() const { return parent.empty(); }
};

struct PointMass {
    std::string vertex;
    Point4 x = Point4::Zero();
    int multiplicity = 0;
};

struct IdealConnection {
    std::vector<IdealVertex> vertices;
    int total_charge = 0;
    /// Rounded from this mass at the deepest alpha.
    double total_mass = 0.0;
    double N = 8.0;
    Thresholds thresholds;
    std::vector<std::string> diagnostics;

    std::optional<std::size_t> find(const std::string& id) const {
        for (std::size_t i = 0; i < vertices.size(); ++i)
            if (vertices[i].id == id) return i;
        return std::nullopt;
    }
    const IdealVertex& at(const std::string& id) const {
        if (auto i = find(id)) return vertices[*i];
        throw ConfigError("ideal connection: no vertex '" + id + "'");
    }
    std::vector<std::size_t> children(const std::string& id) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < vertices.size(); ++i)
            if (vertices[i].parent == id) out.push_back(i);
        return out;
    }
    std::size_t depth() const {
        std::size_t best = 0;
        for (const auto& v : vertices) {
            std::size_t d = 0;
            for (const IdealVertex* p = &v; !p->is_root(); p = &at(p->parent)) ++d;
            best = std::max(best, d);
        }
        return best;
    }
    int charge_sum() const {
        int k = 0;
        for (const auto& v : vertices) k += v.charge;
        return k;
    }
};

/// The Uhlenbeck side: every concentration point with the charge that bubbles off there.
inline std::vector<PointMass> multiplicity_table(const IdealConnection& c) {
    std::vector<PointMass> out;
    for (const auto& v : c.vertices)
        if (!v.is_root()) out.push_back({v.parent, v.attachment, v.subtree_charge});
    return out;
}

/// The Uhlenbeck limit of the root: background charge and point masses in the base chart.
inline std::vector<PointMass> uhlenbeck_projection(const IdealConnection& c) {
    std::vector<PointMass> out;
    for (const auto& m : multiplicity_table(c))
        if (c.at(m.vertex).is_root()) out.push_back(m);
    return out;
}

inline void to_json(nlohmann::json& j, const IdealVertex& v) {
    j = nlohmann::json{{"id", v.id}, {"k", v.charge}, {"limit", to_string(v.limit)}, {"subtree_k", v.subtree_charge}};
    if (v.bpst) j["conn"] = nlohmann::json{{"bpst", *v.bpst}};
    else j["conn"] = "product";
    if (!v.diagnostic.empty()) j["diagnostic"] = v.diagnostic;
    j["fit_misfit"] = v.fit_misfit;
    j["residual_energy"] = v.residual_energy;
    if (v.is_root()) return;
    j["parent"] = v.parent;
    j["x"] = detail::point_json(v.attachment);
    j["lambda"] = v.scale;
    j["rho"] = {1.0, 0.0, 0.0, 0.0};
    j["r0"] = v.ball_radius;
    j["moment_radius"] = v.moment_radius;
    nlohmann::json track = nlohmann::json::array();
    for (std::size_t w = 0; w < v.track.alpha.size(); ++w)
        track.push_back({{"alpha", v.track.alpha[w]},
                         {"centre", detail::point_json(v.track.centre[w])},
                         {"scale", v.track.scale[w]},
                         {"mass", v.track.mass[w]}});
    j["track"] = track;
}

inline void from_json(const nlohmann::json& j, IdealVertex& v) {
    v = IdealVertex{};
    try {
        v.id = j.at("id").get<std::string>();
        v.charge = j.value("k", 0);
        v.subtree_charge = j.value("subtree_k", v.charge);
        v.limit = limit_from_string(j.value("limit", std::string("base")));
        const auto& conn = j.contains("conn") ? j.at("conn") : nlohmann::json("product");
        if (conn.is_object()) v.bpst = conn.at("bpst").get<BpstParams>();
        v.diagnostic = j.value("diagnostic", std::string());
        v.fit_misfit = j.value("fit_misfit", 0.0);
        v.residual_energy = j.value("residual_energy", 0.0);
        if (j.contains("parent")) v.parent = j.at("parent").get<std::string>();
        if (j.contains("x")) v.attachment = detail::point_from_json(j.at("x"), "vertex x");
        v.scale = j.value("lambda", 1.0);
        v.ball_radius = j.value("r0", 0.0);
        v.moment_radius = j.value("moment_radius", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("ideal vertex: ") + e.what());
    }
}

inline void to_json(nlohmann::json& j, const IdealConnection& c) {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& m : multiplicity_table(c))
        table.push_back({{"vertex", m.vertex}, {"x", detail::point_json(m.x)}, {"multiplicity", m.multiplicity}});
    j = nlohmann::json{{"N", c.N},
                       {"nodes", c.vertices},
                       {"total_charge", c.total_charge},
                       {"total_mass", c.total_mass},
                       {"multiplicities", table},
                       {"thresholds", c.thresholds},
                       {"diagnostics", c.diagnostics}};
}

inline void from_json(const nlohmann::json& j, IdealConnection& c) {
    c = IdealConnection{};
    try {
        c.N = j.value("N", 8.0);
        c.vertices = j.at("nodes").get<std::vector<IdealVertex>>();
        c.total_charge = j.value("total_charge", 0);
        c.total_mass = j.value("total_mass", 0.0);
        if (j.contains("thresholds")) c.thresholds = j.at("thresholds").get<Thresholds>();
        if (j.contains("diagnostics")) c.diagnostics = j.at("diagnostics").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("ideal connection: ") + e.what());
    }
}

/// The extracted tree as a gluing tree (theta and open vertices become product vertices).
inline GluingTree to_gluing_tree(const IdealConnection& c) {
    GluingTree t;
    t.N = c.N;
    for (const auto& v : c.vertices) {
        GluingNode n;
        n.id = v.id;
        n.parent = v.parent;
        n.charge = v.charge;
        if (v.bpst && v.limit != LimitKind::open) {
            n.conn = VertexConnection::bpst;
            n.bpst = *v.bpst;
        }
        n.centre = v.attachment;
        n.scale = v.scale;
        t.nodes.push_back(n);
    }
    return t;
}

/// Violated structural invariants of an ideal connection.
inline std::vector<std::string> ideal_violations(const IdealConnection& c) {
    std::vector<std::string> out;
    if (c.charge_sum() != c.total_charge) out.push_back("charges do not add up to the total");
    for (const auto& v : c.vertices) {
        const auto kids = c.children(v.id);
        if (!v.is_root() && kids.empty() && v.charge <= 0) out.push_back("terminal vertex '" + v.id + "' has no charge");
        if (v.limit == LimitKind::theta && kids.size() < 2) out.push_back("theta vertex '" + v.id + "' has < 2 children");
        if (!v.is_root() && !v.attachment.allFinite()) out.push_back("vertex '" + v.id + "' has no attachment point");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Extraction.

namespace detail {

struct BpstFit {
    BpstParams params;
    double misfit = 1.0;
};

/// Levenberg-Marquardt fit of 48 s^4 / (s^2 + |z - c|^2)^4 to sampled densities.
inline BpstFit fit_bpst_density(const std::vector<Point4>& z, const std::vector<double>& w, const std::vector<double>& d,
                                Point4 c, double s) {
    const std::size_t n = z.size();
    auto residual = [&](const Point4& cc, double ss, Eigen::VectorXd* r, Eigen::MatrixXd* jac) {
        double cost = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const Point4 y = z[i] - cc;
            const double q = ss * ss + y.squaredNorm();
            const double q4 = q * q * q * q;
            const double model = 48.0 * std::pow(ss, 4) / q4;
            const double sw = std::sqrt(w[i]);
            const double ri = sw * (model - d[i]);
            cost += ri * ri;
            if (r) (*r)[Eigen::Index(i)] = ri;
            if (jac) {
                for (int mu = 0; mu < 4; ++mu) (*jac)(Eigen::Index(i), mu) = sw * 384.0 * std::pow(ss, 4) * y[mu] / (q4 * q);
                (*jac)(Eigen::Index(i), 4) = sw * (192.0 * std::pow(ss, 3) / q4 - 384.0 * std::pow(ss, 5) / (q4 * q));
            }
        }
        return cost;
    };
    Eigen::VectorXd r(static_cast<Eigen::Index>(n)), step;
    Eigen::MatrixXd jac(static_cast<Eigen::Index>(n), 5);
    double mu = 1e-3;
    double cost = residual(c, s, &r, &jac);
    for (int it = 0; it < 100; ++it) {
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd g = jac.transpose() * r;
        Eigen::MatrixXd a = jtj;
        a.diagonal() += mu * jtj.diagonal().cwiseMax(1e-300);
        step = a.ldlt().solve(-g);
        Point4 c2 = c;
        for (int m = 0; m < 4; ++m) c2[m] += step[m];
        const double s2 = s + step[4];
        if (!(s2 > 0.0) || !step.allFinite()) {
            mu *= 10.0;
            continue;
        }
        const double cost2 = residual(c2, s2, nullptr, nullptr);
        if (cost2 < cost) {
            const bool done = cost - cost2 < 1e-14 * cost;
            c = c2;
            s = s2;
            cost = residual(c, s, &r, &jac);
            mu = std::max(mu / 10.0, 1e-12);
            if (done || step.norm() < 1e-13 * (1.0 + s)) break;
        } else {
            mu *= 10.0;
            if (mu > 1e12) break;
        }
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) norm += w[i] * d[i] * d[i];
    BpstFit f;
    f.params.centre = c;
    f.params.scale = s;
    f.misfit = norm > 0.0 ? std::sqrt(cost / norm) : 1.0;
    return f;
}

struct Extraction {
    const Context& ctx;
    int k;
    int max_depth;
    IdealConnection out;

    struct Child {
        Candidate cand;
        int subtree_charge;
    };

    /// Classify the vertex in `frames` (blown-up chart) and recurse into its candidates.
    void vertex(IdealVertex v, const std::vector<Frame>& frames, const std::vector<std::size_t>& seed_ids, int depth) {
        if (depth > max_depth)
            throw AlgorithmFailure("extraction: recursion depth " + std::to_string(depth) + " exceeds the bound " +
                                   std::to_string(max_depth));
        const std::size_t K = ctx.deepest();
        const Frame& deep = frames.back();
        std::vector<Candidate> cands = analyse_chart(ctx, frames, seed_ids);
        std::vector<Child> kids;
        for (auto& c : cands) {
            if (!c.concentrating) {
                if (c.note != "mass below floor") out.diagnostics.push_back("vertex '" + v.id + "': candidate dropped (" + c.note + ")");
                continue;
            }
            const int q = int(std::lround(c.mass.back() / unit_charge));
            if (q < 1) continue;
            if (!c.note.empty()) out.diagnostics.push_back("vertex '" + v.id + "': " + c.note);
            kids.push_back({std::move(c), q});
        }
        int held = 0;
        for (const auto& c : kids) held += c.subtree_charge;
        v.charge = v.subtree_charge - held;

        // residual field on the chart with the children's balls removed
        std::vector<std::pair<Point4, double>> holes;
        for (const auto& c : kids) holes.emplace_back(c.cand.point, 2.0 * c.cand.ball_radius);
        auto outside = [&holes](const Point4& z) {
            for (const auto& [p, r] : holes)
                if ((z - p).norm() < r) return false;
            return true;
        };
        const DensityFn& dens = ctx.densities[K];
        const double s4 = std::pow(deep.scale, 4);
        auto chart_density = [&](const Point4& zz) { return s4 * dens(deep.to_base(zz)); };
        QuadratureGrid region;
        if (v.is_root()) {
            GridSpec g = ctx.like;
            g.region = Region::full_chart;
            g.r_min = 0.0;
            region = build_grid(g);
        } else {
            region = build_grid({0.0, 5.0, 24, ctx.like.gauss_order, ctx.like.s3_order, Region::ball, 1e-4});
        }
        std::vector<double> rv(region.size());
        parallel_for(region.size(), [&](std::size_t i) {
            rv[i] = outside(region.nodes[i]) ? chart_density(region.nodes[i]) * region.weights[i] : 0.0;
        });
        v.residual_energy = pairwise_sum(rv);

        if (v.charge >= 1) {
            // start from the residual moments
            double m = v.residual_energy;
            Point4 c0 = Point4::Zero();
            double second = 0.0;
            if (m > 0.0) {
                for (std::size_t i = 0; i < region.size(); ++i) c0 += rv[i] * region.nodes[i];
                c0 /= m;
                for (std::size_t i = 0; i < region.size(); ++i) second += rv[i] * (region.nodes[i] - c0).squaredNorm();
            }
            double s0 = m > 0.0 ? std::sqrt(second / m) / sqrt2 : 1.0 / sqrt2;
            if (!(s0 > 0.0) || !std::isfinite(s0)) s0 = 1.0 / sqrt2;
            const QuadratureGrid ann = build_grid({0.2, 5.0, 12, ctx.like.gauss_order, ctx.like.s3_order, Region::annulus});
            std::vector<Point4> zs;
            std::vector<double> ws, ds;
            for (std::size_t i = 0; i < ann.size(); ++i) {
                if (!outside(ann.nodes[i])) continue;
                zs.push_back(ann.nodes[i]);
                ws.push_back(ann.weights[i]);
            }
            ds.resize(zs.size());
            parallel_for(zs.size(), [&](std::size_t i) { ds[i] = chart_density(zs[i]); });
            const BpstFit f = fit_bpst_density(zs, ws, ds, c0, s0);
            v.fit_misfit = f.misfit;
            v.bpst = f.params;
            if (v.charge == 1 && f.misfit <= ctx.th.fit_tolerance) {
                v.limit = v.is_root() ? LimitKind::base : LimitKind::bpst;
            } else {
                v.limit = v.is_root() ? LimitKind::base : LimitKind::open;
                v.diagnostic = v.charge > 1 ? "limit carries charge " + std::to_string(v.charge) + " (not a BPST bubble)"
                                            : "BPST fit misfit " + std::to_string(f.misfit);
            }
        } else if (v.charge == 0) {
            const bool quiet = v.residual_energy <= ctx.th.theta_energy * unit_charge;
            if (v.is_root()) {
                v.limit = LimitKind::base;
                if (!quiet) v.diagnostic = "uncharged residual energy " + std::to_string(v.residual_energy);
            } else if (quiet && kids.size() >= 2) {
                v.limit = LimitKind::theta;
            } else {
                v.limit = LimitKind::open;
                v.diagnostic = quiet ? "massless vertex with fewer than two children"
                                     : "uncharged residual energy " + std::to_string(v.residual_energy);
            }
        } else {
            v.limit = v.is_root() ? LimitKind::base : LimitKind::open;
            v.diagnostic = "children carry more charge than the vertex";
        }

        const std::string id = v.id;
        out.vertices.push_back(std::move(v));
        std::size_t index = 1;
        for (auto& c : kids) {
            IdealVertex child;
            child.id = id == "0" ? std::to_string(index) : id + "." + std::to_string(index);
            ++index;
            child.parent = id;
            child.subtree_charge = c.subtree_charge;
            child.attachment = deep.to_chart(c.cand.centre.back());
            child.scale = c.cand.scale.back() / deep.scale;
            child.ball_radius = c.cand.ball_radius;
            child.moment_radius = c.cand.moment_radius.back();
            std::vector<Frame> next(frames.size());
            for (std::size_t w = 0; w < frames.size(); ++w) {
                const bool ok = frames[w].valid && std::isfinite(c.cand.scale[w]) && c.cand.scale[w] > 0.0;
                next[w] = ok ? Frame{c.cand.centre[w], c.cand.scale[w], true} : Frame{Point4::Zero(), 1.0, false};
                if (!frames[w].valid) continue;
                const std::size_t a = ctx.window[w];
                child.track.alpha.push_back(ctx.alphas[a]);
                child.track.centre.push_back(c.cand.centre[w]);
                child.track.scale.push_back(c.cand.scale[w]);
                child.track.parent_centre.push_back(frames[w].centre);
                child.track.parent_scale.push_back(frames[w].scale);
                child.track.mass.push_back(c.cand.mass[w]);
                std::vector<std::pair<Point4, double>> cores;
                for (std::size_t s : c.cand.seeds)
                    if (ctx.seeds[s].alive_at(a)) cores.emplace_back(ctx.seeds[s].centre_at(a), ctx.seeds[s].scale_at(a));
                child.track.cores.push_back(std::move(cores));
            }
            vertex(std::move(child), next, c.cand.seeds, depth + 1);
        }
    }
};

}  // namespace detail

/// Recursive blow-up of a degenerating family into a bubble tree.
inline IdealConnection extract_bubble_tree(const ConnectionFamily& family, const std::vector<double>& alphas, int k,
                                           const Thresholds& th = {}, const GridSpec& like = extraction_grid_spec(),
                                           double N = 8.0) {
    if (k < 0) throw ConfigError("extract_bubble_tree: k must be >= 0");
    std::vector<DensityFn> d;
    for (double a : alphas) d.push_back(curvature_density(family(a)));
    const detail::Context ctx = detail::make_context(alphas, std::move(d), th, like);
    detail::Extraction ex{ctx, k, th.max_depth > 0 ? th.max_depth : std::max(k, 1), {}};
    ex.out.thresholds = th;
    ex.out.N = N;
    for (const auto& s : ctx.seeds)
        if (s.lost) ex.out.diagnostics.push_back("a seed was lost while tracking");

    std::vector<std::size_t> all(ctx.seeds.size());
    std::iota(all.begin(), all.end(), std::size_t(0));
    const std::vector<Frame> root(ctx.window.size());
    // total charge from the deepest alpha, with foci on the root-level candidates
    const auto cands = detail::analyse_chart(ctx, root, all);
    const double m1 = detail::total_mass(ctx, ctx.deepest(), cands);
    const double m0 = detail::total_mass(ctx, ctx.deepest() - 1, cands);
    if (std::abs(m1 - m0) > 0.01 * unit_charge)
        throw InconsistentFamily("extract_bubble_tree: total mass moves by more than 1% of 8 pi^2 between the deepest alphas");
    ex.out.total_mass = m1;
    ex.out.total_charge = int(std::lround(m1 / unit_charge));
    if (ex.out.total_charge > k)
        ex.out.diagnostics.push_back("family charge " + std::to_string(ex.out.total_charge) + " exceeds k = " +
                                     std::to_string(k));

    IdealVertex r;
    r.id = "0";
    r.subtree_charge = ex.out.total_charge;
    ex.vertex(std::move(r), root, all, 0);
    return ex.out;
}

inline IdealConnection extract_bubble_tree(const FamilySpec& spec, const Thresholds& th = {},
                                           const GridSpec& like = extraction_grid_spec()) {
    return extract_bubble_tree(spec.family(), spec.alphas, spec.charge_bound(), th, like, spec.tree.N);
}

// ---------------------------------------------------------------------------
// Checks on an extracted vertex.

namespace detail {

inline std::vector<Focus> track_foci(const VertexTrack& t, std::size_t w, double top) {
    std::vector<Point4> p;
    std::vector<double> s;
    for (const auto& [c, sc] : t.cores[w]) {
        p.push_back(c);
        s.push_back(sc);
    }
    return seed_foci(p, s, top);
}

}  // namespace detail

/// Centre and scale of the vertex's cluster, measured again in its own blown-up chart
/// at the deepest alpha, over the ball the blow-up was built from.
inline MomentReport blown_up_moments(const DensityFn& deepest, const IdealVertex& v, const GridSpec& like = extraction_grid_spec()) {
    if (v.is_root() || v.track.alpha.empty()) throw DomainError("blown_up_moments: the vertex has no blow-up");
    const std::size_t w = v.track.alpha.size() - 1;
    const double S = v.track.scale[w], P = v.track.parent_scale[w];
    const Point4 X = v.track.centre[w];
    // the moment ball, centred at the concentration point in the parent chart
    const Point4 ball = v.track.parent_centre[w] + P * v.attachment;
    const double radius = v.moment_radius * P;
    double core = 1e-4 * radius;
    std::vector<Focus> foci = detail::track_foci(v.track, w, 0.5 * radius);
    for (const auto& f : foci) core = std::min(core, f.core);
    foci.push_back({ball, 2.0 * radius, core});
    const QuadratureGrid g = focused_grid(foci, like, std::nullopt, [&](const Point4& y) { return (y - ball).norm() < radius; });
    QuadratureGrid chart = g;
    for (std::size_t i = 0; i < chart.size(); ++i) {
        chart.nodes[i] = (g.nodes[i] - X) / S;
        chart.weights[i] = g.weights[i] / std::pow(S, 4);
    }
    const double s4 = std::pow(S, 4);
    return density_moments([&](const Point4& z) { return s4 * deepest(X + S * z); }, chart);
}

struct NeckRow {
    double alpha = 0.0;
    double neck_energy = 0.0;
    double ball_energy = 0.0;
};

struct NeckReport {
    std::vector<NeckRow> rows;
    bool ill_defined = false;
    std::string note;
    /// Charge expected in the ball.
    int charge = 0;

    bool decreasing(double slack = 1e-9 * unit_charge) const {
        for (std::size_t i = 1; i < rows.size(); ++i)
            if (rows[i].neck_energy > rows[i - 1].neck_energy + slack) return false;
        return true;
    }
};

inline void to_json(nlohmann::json& j, const NeckReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& x : r.rows) rows.push_back({{"alpha", x.alpha}, {"neck_energy", x.neck_energy}, {"ball_energy", x.ball_energy}});
    j = nlohmann::json{{"rows", rows}, {"ill_defined", r.ill_defined}, {"charge", r.charge}};
    if (!r.note.empty()) j["note"] = r.note;
}

/// Energy on the neck Omega(x, N^{-1} lambda^{1/2}, N lambda^{1/2}) and on B(x, N lambda^{1/2}),
/// with lambda the vertex scale in parent chart units, at every moment alpha where the chart is concentrated.
inline NeckReport neck_loss_check(const DensityFamily& family, const IdealVertex& v, double N,
                                  const GridSpec& like = extraction_grid_spec(), const Thresholds& th = {}) {
    if (!(N > 1.0)) throw ConfigError("neck_loss_check: N must exceed 1");
    NeckReport r;
    r.charge = v.subtree_charge;
    const auto& t = v.track;
    if (v.is_root() || t.alpha.empty()) {
        r.ill_defined = true;
        r.note = "no degeneration: the vertex has no neck";
        return r;
    }
    double largest = 0.0;
    for (std::size_t w = 0; w < t.alpha.size(); ++w) largest = std::max(largest, t.scale[w] / t.parent_scale[w]);
    const double last = t.scale.back() / t.parent_scale.back();
    if (!(last > 0.0) || last > th.shrink_ratio * largest) {
        r.ill_defined = true;
        r.note = "no degeneration: the vertex scale does not shrink";
        return r;
    }
    for (std::size_t w = 0; w < t.alpha.size(); ++w) {
        const double lambda = t.scale[w] / t.parent_scale[w];
        if (!(lambda > 0.0) || t.mass[w] < th.mass_floor * unit_charge) continue;
        const DensityFn d = family(t.alpha[w]);
        const double P = t.parent_scale[w], root = std::sqrt(lambda);
        const double inner = P * root / N, outer = P * N * root;
        NeckRow row;
        row.alpha = t.alpha[w];
        const QuadratureGrid ann =
            placed(build_grid({inner, outer, 16, like.gauss_order, like.s3_order, Region::annulus}), t.centre[w], 1.0);
        row.neck_energy = integrate(ann, d);
        double core = 1e-4 * outer;
        std::vector<Focus> foci = detail::track_foci(t, w, 0.5 * outer);
        for (const auto& f : foci) core = std::min(core, f.core);
        foci.push_back({t.centre[w], 2.0 * outer, core});
        const QuadratureGrid ball =
            focused_grid(foci, like, std::nullopt, [&](const Point4& y) { return (y - t.centre[w]).norm() < outer; });
        row.ball_energy = integrate(ball, d);
        r.rows.push_back(row);
    }
    if (r.rows.empty()) {
        r.ill_defined = true;
        r.note = "no alpha with a concentrated ball";
    }
    return r;
}

// ---------------------------------------------------------------------------
// Comparison with a known gluing tree.

struct RoundTripReport {
    bool isomorphic = false;
    bool charge_conserved = false;
    /// Largest centre error over 0.05 lambda^{1/2} (parent chart units); <= 1 passes.
    double centre_ratio = 0.0;
    /// Largest relative error of a bubble's absolute scale.
    double scale_error = 0.0;
    std::size_t depth = 0;
    std::string truth_shape;
    std::string extracted_shape;
    std::vector<std::string> notes;

    bool pass(int k) const {
        return isomorphic && charge_conserved && centre_ratio <= 1.0 && scale_error <= 0.1 && int(depth) <= std::max(k, 1);
    }
};

inline void to_json(nlohmann::json& j, const RoundTripReport& r) {
    j = nlohmann::json{{"isomorphic", r.isomorphic},   {"charge_conserved", r.charge_conserved},
                       {"centre_ratio", r.centre_ratio}, {"scale_error", r.scale_error},
                       {"depth", r.depth},              {"truth_shape", r.truth_shape},
                       {"extracted_shape", r.extracted_shape}, {"notes", r.notes}};
}

namespace detail {

inline std::string tree_shape(const std::string& label, std::vector<std::string> kids) {
    std::sort(kids.begin(), kids.end());
    std::string s = label;
    if (!kids.empty()) {
        s += "(";
        for (std::size_t i = 0; i < kids.size(); ++i) s += (i ? "," : "") + kids[i];
        s += ")";
    }
    return s;
}

inline std::string truth_shape(const SplicedConnection& s, std::size_t v) {
    const auto& n = s.tree().nodes[v];
    std::string label = n.is_root() ? "base" : n.conn == VertexConnection::bpst ? "bpst" : "theta";
    label += std::to_string(n.charge);
    std::vector<std::string> kids;
    for (std::size_t c : s.children(v)) kids.push_back(truth_shape(s, c));
    return tree_shape(label, kids);
}

inline std::string ideal_shape(const IdealConnection& c, const IdealVertex& v) {
    std::vector<std::string> kids;
    for (std::size_t i : c.children(v.id)) kids.push_back(ideal_shape(c, c.vertices[i]));
    return tree_shape(to_string(v.limit) + std::to_string(v.charge), kids);
}

/// Mass-weighted mean of the bubble centres of a subtree, in the base chart.
inline Point4 truth_cluster_centre(const SplicedConnection& s, std::size_t v, double* weight = nullptr) {
    const auto& n = s.tree().nodes[v];
    Point4 sum = Point4::Zero();
    double w = 0.0;
    if (n.conn == VertexConnection::bpst) {
        sum += n.charge * s.to_chart(v).inverse(n.bpst.centre);
        w += n.charge;
    }
    for (std::size_t c : s.children(v)) {
        double wc = 0.0;
        const Point4 pc = truth_cluster_centre(s, c, &wc);
        sum += wc * pc;
        w += wc;
    }
    if (weight) *weight = w;
    return w > 0.0 ? Point4(sum / w) : s.to_chart(v).inverse(Point4::Zero());
}

}  // namespace detail

/// Compares an extraction with the gluing tree that produced the deepest member of the family.
inline RoundTripReport compare_with_truth(const IdealConnection& ext, const GluingTree& truth, int k) {
    RoundTripReport r;
    const SplicedConnection s = splice(truth);
    const std::size_t root = truth.root();
    r.truth_shape = detail::truth_shape(s, root);
    r.extracted_shape = detail::ideal_shape(ext, ext.at("0"));
    r.isomorphic = r.truth_shape == r.extracted_shape;
    r.charge_conserved = ext.charge_sum() == truth.total_charge() && ext.total_charge == truth.total_charge();
    r.depth = ext.depth();
    if (!r.isomorphic) {
        r.notes.push_back("shapes differ");
        return r;
    }
    // match children by nearest base position, recursively
    std::function<void(std::size_t, const IdealVertex&, double)> match = [&](std::size_t tv, const IdealVertex& ev,
                                                                             double ext_scale) {
        const auto& tn = truth.nodes[tv];
        const ConformalMap& f = s.to_chart(tv);
        if (tn.conn == VertexConnection::bpst && ev.bpst) {
            const Point4 tc = f.inverse(tn.bpst.centre);
            const double ts = f.scale * tn.bpst.scale;
            const Point4 ec = ev.is_root() ? ev.bpst->centre
                                           : Point4(ev.track.centre.back() + ev.track.scale.back() * ev.bpst->centre);
            const double es = ext_scale * ev.bpst->scale;
            r.scale_error = std::max(r.scale_error, std::abs(es / ts - 1.0));
            if (!tn.is_root()) {
                const double parent = f.scale / tn.scale;
                r.centre_ratio = std::max(r.centre_ratio, (ec - tc).norm() / parent / (0.05 * std::sqrt(tn.scale)));
            }
        }
        auto tk = s.children(tv);
        auto ek = ext.children(ev.id);
        std::vector<bool> used(ek.size(), false);
        for (std::size_t c : tk) {
            const Point4 target = detail::truth_cluster_centre(s, c);
            std::size_t best = ek.size();
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < ek.size(); ++i) {
                if (used[i]) continue;
                const double dist = (ext.vertices[ek[i]].track.centre.back() - target).norm();
                if (dist < bd) {
                    bd = dist;
                    best = i;
                }
            }
            if (best == ek.size()) continue;
            used[best] = true;
            const IdealVertex& ec = ext.vertices[ek[best]];
            const double parent = s.to_chart(c).scale / truth.nodes[c].scale;
            r.centre_ratio = std::max(r.centre_ratio, bd / parent / (0.05 * std::sqrt(truth.nodes[c].scale)));
            match(c, ec, ec.track.scale.back());
        }
    };
    match(root, ext.at("0"), 1.0);
    return r;
}

}  // namespace bubbletree
