#pragma once

#include "bubbletree/splice.hpp"

#include "json.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace bubbletree {

// ---------------------------------------------------------------------------
// Parameter directions.

enum class ParamKind { scale, centre, rotation, modulus };

inline std::string to_string(ParamKind k) {
    switch (k) {
        case ParamKind::scale: return "scale";
        case ParamKind::centre: return "centre";
        case ParamKind::rotation: return "rotation";
        case ParamKind::modulus: return "modulus";
    }
    return "?";
}

/// One tangent direction at a vertex of a gluing tree.
/// centre: p is the direction of x_I. rotation: v is the direction of rho_I.
/// modulus: (p, s) moves the centre and scale of the vertex's own bubble.
struct ParamDirection {
    ParamKind kind = ParamKind::scale;
    std::string vertex;
    Point4 p = Point4::Zero();
    AlgValue v = AlgValue::Zero();
    double s = 0.0;

    static ParamDirection scale_of(std::string id) { return {ParamKind::scale, std::move(id), Point4::Zero(), AlgValue::Zero(), 0.0}; }
    static ParamDirection centre_of(std::string id, const Point4& p) { return {ParamKind::centre, std::move(id), p, AlgValue::Zero(), 0.0}; }
    static ParamDirection rotation_of(std::string id, const AlgValue& v) { return {ParamKind::rotation, std::move(id), Point4::Zero(), v, 0.0}; }
    static ParamDirection modulus_of(std::string id, const Point4& p, double s) { return {ParamKind::modulus, std::move(id), p, AlgValue::Zero(), s}; }

    /// Directions may be shorter than 1 (linearity is tested that way) but not longer.
    void check() const {
        if (vertex.empty()) throw ConfigError("direction: no target vertex");
        switch (kind) {
            case ParamKind::scale:
                break;
            case ParamKind::centre:
                if (p.norm() > 1.0 + 1e-12) throw ConfigError("direction: |p| must be <= 1");
                break;
            case ParamKind::rotation:
                if (v.norm() > 1.0 + 1e-12) throw ConfigError("direction: |v| must be <= 1");
                break;
            case ParamKind::modulus:
                if (p.squaredNorm() + s * s > 1.0 + 1e-12) throw ConfigError("direction: |(p, s)| must be <= 1");
                break;
        }
    }
};

// ---------------------------------------------------------------------------
// Tangent fields.

/// A Lie-valued 1-form (and its companion 2-form) on every vertex chart of the connected sum.
struct ChartTangent {
    std::function<FieldSample(std::size_t, const Point4&)> at;
};

/// The same on the base chart.
struct BaseTangent {
    std::function<FieldSample(const Point4&)> at;
};

/// d xi + [A, xi] for a Lie-valued function with value xi and differential dxi.
inline Form1 covariant_derivative(const Form1& a, const AlgValue& xi, const Form1& dxi) {
    Form1 out = dxi;
    for (int mu = 0; mu < 4; ++mu) out.c.col(mu) += bracket(a[mu], xi);
    return out;
}

/// v (x) w as a Form1: column mu is w_mu v.
inline Form1 outer(const AlgValue& v, const Point4& w) { return {v * w.transpose()}; }

namespace detail {

/// Central difference of a parameter-dependent tree at +-step, spliced with a frozen layout.
struct TreePair {
    std::shared_ptr<const SplicedConnection> plus, minus;
    double step = 0.0;
};

inline GluingTree perturbed(const GluingTree& t, const ParamDirection& d, double e) {
    GluingTree out = t;
    GluingNode& n = out.nodes[t.index(d.vertex)];
    switch (d.kind) {
        case ParamKind::scale:
            // b_I stays 4 N sqrt(lambda_I) when it was left at the default
            n.scale *= 1.0 + e;
            break;
        case ParamKind::centre:
            n.centre += e * n.scale * d.p;
            break;
        case ParamKind::rotation:
            n.rho = (alg_exp(e * d.v) * n.rho).normalized();
            break;
        case ParamKind::modulus:
            n.bpst.centre += e * n.bpst.scale * d.p;
            n.bpst.scale *= 1.0 + e * d.s;
            break;
    }
    return out;
}

/// The physical parameter increment for a unit relative step e.
inline double parameter_increment(const GluingTree& t, const ParamDirection& d, double e) {
    const GluingNode& n = t.nodes[t.index(d.vertex)];
    switch (d.kind) {
        case ParamKind::scale: return e * n.scale;
        case ParamKind::centre: return e * n.scale;
        case ParamKind::rotation: return e;
        case ParamKind::modulus: return e * n.bpst.scale;
    }
    return e;
}

inline TreePair tree_pair(const GluingTree& t, const SpliceLayout& layout, const ParamDirection& d, double h) {
    TreePair out;
    out.plus = std::make_shared<const SplicedConnection>(perturbed(t, d, h), layout);
    out.minus = std::make_shared<const SplicedConnection>(perturbed(t, d, -h), layout);
    out.step = 2.0 * parameter_increment(t, d, h);
    return out;
}

/// Length of the direction vector, and the direction scaled to unit length.
inline std::pair<double, ParamDirection> unit_direction(ParamDirection d) {
    double m = 1.0;
    switch (d.kind) {
        case ParamKind::scale: break;
        case ParamKind::centre: m = d.p.norm(); break;
        case ParamKind::rotation: m = d.v.norm(); break;
        case ParamKind::modulus: m = std::sqrt(d.p.squaredNorm() + d.s * d.s); break;
    }
    if (m > 0.0 && m != 1.0) {
        d.p /= m;
        d.v /= m;
        d.s /= m;
    }
    return {m, d};
}

inline FieldSample difference(const FieldSample& a, const FieldSample& b, double denom) {
    return {(1.0 / denom) * (a.a - b.a), (1.0 / denom) * (a.f - b.f)};
}

/// (4 D(h/2) - D(h)) / 3.
inline FieldSample richardson(const FieldSample& coarse, const FieldSample& fine) {
    return {(1.0 / 3.0) * (4.0 * fine.a - coarse.a), (1.0 / 3.0) * (4.0 * fine.f - coarse.f)};
}

/// True on the neck Omega(x, sqrt(lambda) / N, N sqrt(lambda)) of a child, in the parent chart.
inline bool on_neck(const GluingTree& t, std::size_t child, const Point4& z) {
    const auto& n = t.nodes[child];
    const double rho = (z - n.centre).norm(), s = std::sqrt(n.scale);
    return rho > s / t.N && rho < t.N * s;
}

/// gamma_I = gamma(sqrt(lambda) / |z - x|): 1 on the child side of the neck, 0 on the parent side.
inline CutoffValue neck_profile(const GluingNode& n, const Point4& z) {
    const Point4 y = z - n.centre;
    const double r = y.norm();
    CutoffValue out;
    if (r == 0.0) return {1.0, Point4::Zero()};
    const double t = std::sqrt(n.scale) / r;
    out.value = profile::gamma(t);
    out.gradient = -profile::gamma_slope(t) * t / (r * r) * y;
    return out;
}

/// A' on the parent chart gauge-rotated by exp(s gamma_I v), on the neck of the child only.
inline FieldSample rotated_on_neck(const SplicedConnection& sc, std::size_t parent, std::size_t child, const AlgValue& v,
                                   double s, const Point4& z) {
    const FieldSample base = sc.sample(parent, z);
    const CutoffValue g = neck_profile(sc.tree().nodes[child], z);
    const Quat u = alg_exp(s * g.value * v);
    // u^{-1} du = s v dgamma, since v is fixed
    return {adjoint(u.conj(), base.a) + s * outer(v, g.gradient), adjoint(u.conj(), base.f)};
}

}  // namespace detail

/// Central-difference steps.
struct DerivativeOptions {
    /// Relative parameter step.
    double h = 1e-3;
    /// Combine steps h and h/2.
    bool richardson = true;
};

/// dA'/dtheta on the connected sum, by central differences with the reference layout frozen.
/// Rotations are realized as the neck gauge rotation exp(s gamma_I v): the child chart is unchanged
/// up to a constant gauge, so only the parent chart on the neck moves.
inline ChartTangent param_derivative(const GluingTree& tree, const ParamDirection& direction,
                                     const DerivativeOptions& opt = {}) {
    direction.check();
    // differences along the unit direction, so the result is exactly linear in its length
    const auto [length, d] = detail::unit_direction(direction);
    if (length == 0.0) {
        tree.index(d.vertex);
        return {[](std::size_t, const Point4&) { return FieldSample{}; }};
    }
    if (length != 1.0) {
        const ChartTangent unit = param_derivative(tree, d, opt);
        return {[unit, length](std::size_t v, const Point4& z) {
            const FieldSample s = unit.at(v, z);
            return FieldSample{length * s.a, length * s.f};
        }};
    }
    if (!(opt.h > 0.0 && opt.h < 0.1)) throw ConfigError("param_derivative: relative step must lie in (0, 0.1)");
    const SpliceLayout layout = make_layout(tree);
    const std::size_t target = tree.index(d.vertex);

    if (d.kind == ParamKind::rotation) {
        const auto parent = tree.parent(target);
        if (!parent) throw ConfigError("param_derivative: the root has no gluing rotation");
        auto ref = std::make_shared<const SplicedConnection>(tree, layout);
        const double h = opt.h;
        const bool rich = opt.richardson;
        return {[ref, p = *parent, target, v = d.v, h, rich](std::size_t vertex, const Point4& z) -> FieldSample {
            if (vertex != p || !detail::on_neck(ref->tree(), target, z)) return {};
            auto diff = [&](double e) {
                return detail::difference(detail::rotated_on_neck(*ref, p, target, v, e, z),
                                          detail::rotated_on_neck(*ref, p, target, v, -e, z), 2.0 * e);
            };
            return rich ? detail::richardson(diff(h), diff(0.5 * h)) : diff(h);
        }};
    }

    auto coarse = std::make_shared<const detail::TreePair>(detail::tree_pair(tree, layout, d, opt.h));
    std::shared_ptr<const detail::TreePair> fine;
    if (opt.richardson) fine = std::make_shared<const detail::TreePair>(detail::tree_pair(tree, layout, d, 0.5 * opt.h));
    return {[coarse, fine](std::size_t vertex, const Point4& z) {
        auto diff = [&](const detail::TreePair& p) {
            return detail::difference(p.plus->sample(vertex, z), p.minus->sample(vertex, z), p.step);
        };
        return fine ? detail::richardson(diff(*coarse), diff(*fine)) : diff(*coarse);
    }};
}

/// dA-hat'/dtheta on the base chart. Rotations act on the child only up to a constant gauge,
/// so in the base picture they are taken on the neck as on the connected sum.
inline BaseTangent base_param_derivative(const GluingTree& tree, const ParamDirection& direction,
                                        const DerivativeOptions& opt = {}) {
    direction.check();
    const auto [length, d] = detail::unit_direction(direction);
    if (length == 0.0) {
        tree.index(d.vertex);
        return {[](const Point4&) { return FieldSample{}; }};
    }
    if (length != 1.0) {
        const BaseTangent unit = base_param_derivative(tree, d, opt);
        return {[unit, length](const Point4& y) {
            const FieldSample s = unit.at(y);
            return FieldSample{length * s.a, length * s.f};
        }};
    }
    if (d.kind == ParamKind::rotation) {
        const std::size_t target = tree.index(d.vertex);
        const auto parent = tree.parent(target);
        if (!parent) throw ConfigError("base_param_derivative: the root has no gluing rotation");
        auto ref = std::make_shared<const SplicedConnection>(tree, make_layout(tree));
        const ChartTangent chart = param_derivative(tree, d, opt);
        return {[ref, chart, p = *parent](const Point4& y) -> FieldSample {
            const auto at = ref->locate(y);
            if (at.vertex != p) return {};
            const FieldSample s = chart.at(p, at.point);
            const Mat4 j = ref->to_chart(p).jacobian();
            return {pull_back(s.a, j), pull_back(s.f, j)};
        }};
    }
    if (!(opt.h > 0.0 && opt.h < 0.1)) throw ConfigError("base_param_derivative: relative step must lie in (0, 0.1)");
    const SpliceLayout layout = make_layout(tree);
    auto coarse = std::make_shared<const detail::TreePair>(detail::tree_pair(tree, layout, d, opt.h));
    std::shared_ptr<const detail::TreePair> fine;
    if (opt.richardson) fine = std::make_shared<const detail::TreePair>(detail::tree_pair(tree, layout, d, 0.5 * opt.h));
    return {[coarse, fine](const Point4& y) {
        auto diff = [&](const detail::TreePair& p) {
            return detail::difference(p.plus->base_sample(y), p.minus->base_sample(y), p.step);
        };
        return fine ? detail::richardson(diff(*coarse), diff(*fine)) : diff(*coarse);
    }};
}

/// d_{A'}(gamma_I v) in the parent chart, cut to the neck of I and zero elsewhere.
inline ChartTangent gluing_rotation_derivative(const SplicedConnection& s, const std::string& vertex, const AlgValue& v) {
    const std::size_t target = s.tree().index(vertex);
    const auto parent = s.tree().parent(target);
    if (!parent) throw ConfigError("gluing_rotation_derivative: the root has no gluing rotation");
    auto ref = std::make_shared<const SplicedConnection>(s);
    return {[ref, p = *parent, target, v](std::size_t vertex_index, const Point4& z) -> FieldSample {
        if (vertex_index != p || !detail::on_neck(ref->tree(), target, z)) return {};
        const FieldSample a = ref->sample(p, z);
        const CutoffValue g = detail::neck_profile(ref->tree().nodes[target], z);
        FieldSample out;
        out.a = covariant_derivative(a.a, g.value * v, outer(v, g.gradient));
        // d/ds of Ad(u^{-1}) F with u = exp(s gamma v)
        for (int k = 0; k < 6; ++k) out.f.c.col(k) = bracket(a.f.c.col(k), g.value * v);
        return out;
    }};
}

/// d/dlambda of c_lambda^* A at lambda = 1, where c_lambda(x) = centre + (x - centre) / lambda.
inline Form1 dilation_derivative(const ConnectionField& a, const Point4& centre, const Point4& x, double h = 1e-3) {
    auto at = [&](double lambda) {
        ConformalMap c;
        c.scale = lambda;
        c.shift = centre;
        // forward(x) = (x - centre) / lambda, shifted back to the centre
        const Point4 y = centre + c.forward(x);
        return (1.0 / lambda) * a.potential(y);
    };
    const Form1 d1 = (0.5 / h) * (at(1.0 + h) - at(1.0 - h));
    const Form1 d2 = (1.0 / h) * (at(1.0 + 0.5 * h) - at(1.0 - 0.5 * h));
    return (1.0 / 3.0) * (4.0 * d2 - d1);
}

// ---------------------------------------------------------------------------
// L^2 pairings. These are raw pairings of representatives, not horizontal
// projections, so they bound the L^2 metric from above.

inline double l2_pairing(const ChartTangent& a, const ChartTangent& b, const ConnectedSumMetric& g,
                         const ConnectedSumGrid& grid) {
    return integrate_charts(grid, [&](std::size_t v, const Point4& z) {
        const Form1 x = a.at(v, z).a, y = b.at(v, z).a;
        if (x.c.isZero(0.0) || y.c.isZero(0.0)) return 0.0;
        const MetricValue m = g(v, z);
        return inner(x, y, m) * m.volume_density();
    });
}

inline double l2_norm(const ChartTangent& a, const ConnectedSumMetric& g, const ConnectedSumGrid& grid) {
    return std::sqrt(std::max(0.0, l2_pairing(a, a, g, grid)));
}

inline double l2_pairing(const BaseTangent& a, const BaseTangent& b, const MetricField& g, const QuadratureGrid& grid) {
    return integrate(grid, [&](const Point4& y) {
        const Form1 x = a.at(y).a, z = b.at(y).a;
        if (x.c.isZero(0.0) || z.c.isZero(0.0)) return 0.0;
        const MetricValue m = g(y);
        return inner(x, z, m) * m.volume_density();
    });
}

inline double l2_norm(const BaseTangent& a, const MetricField& g, const QuadratureGrid& grid) {
    return std::sqrt(std::max(0.0, l2_pairing(a, a, g, grid)));
}

/// ||d F^{+,g}(A') / d theta||_{L^2(X, g)}, the metric held at the reference tree.
inline double selfdual_derivative_norm(const ChartTangent& a, const ConnectedSumMetric& g, const ConnectedSumGrid& grid) {
    const double s = integrate_charts(grid, [&](std::size_t v, const Point4& z) {
        const Form2 f = a.at(v, z).f;
        if (f.c.isZero(0.0)) return 0.0;
        const MetricValue m = g(v, z);
        const double n = selfdual_norm(f, m);
        return n * n * m.volume_density();
    });
    return std::sqrt(std::max(0.0, s));
}

// ---------------------------------------------------------------------------
// Exponent fits.

struct ScalingFit {
    std::vector<std::pair<double, double>> samples;
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;

    /// log10 of the ratio of the largest to the smallest abscissa.
    double span_decades() const {
        double lo = samples.front().first, hi = lo;
        for (const auto& [x, y] : samples) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        return std::log10(hi / lo);
    }
};

inline void to_json(nlohmann::json& j, const ScalingFit& f) {
    j = nlohmann::json{{"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}, {"n", f.samples.size()}};
}

/// Least-squares line through (log x, log value).
inline ScalingFit exponent_fit(std::vector<std::pair<double, double>> samples) {
    if (samples.size() < 3) throw ConfigError("exponent_fit: need >= 3 samples");
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!(samples[i].first > 0.0) || !(samples[i].second > 0.0))
            throw ConfigError("exponent_fit: abscissae and values must be positive");
        for (std::size_t j = 0; j < i; ++j)
            if (samples[i].first == samples[j].first) throw ConfigError("exponent_fit: abscissae must be distinct");
    }
    const double n = double(samples.size());
    double mx = 0.0, my = 0.0;
    for (const auto& [x, y] : samples) {
        mx += std::log(x) / n;
        my += std::log(y) / n;
    }
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (const auto& [x, y] : samples) {
        const double dx = std::log(x) - mx, dy = std::log(y) - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    ScalingFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r2 = syy > 0.0 ? sxy * sxy / (sxx * syy) : 1.0;
    f.samples = std::move(samples);
    return f;
}

// ---------------------------------------------------------------------------
// Differential tables.

struct DifferentialRow {
    std::string direction;
    std::string vertex;
    double lambda = 0.0;
    double norm_x = 0.0;
    double norm_base = 0.0;
};

/// Table directions: scale, centre (+e0 and -e0), rotation (e1), and the self-dual part of the scale derivative.
struct TableOptions {
    DerivativeOptions derivative{};
    GridSpec grid = default_grid_spec();
    std::vector<std::string> directions{"scale", "centre+", "centre-", "rotation", "selfdual"};
};

/// One row per direction for every lambda; template_for(lambda) builds the tree and `vertex` names the bubble.
inline std::vector<DifferentialRow> differential_table(const std::function<GluingTree(double)>& template_for,
                                                       const std::string& vertex, const std::vector<double>& lambdas,
                                                       const TableOptions& opt = {}) {
    std::vector<DifferentialRow> rows;
    for (double lambda : lambdas) {
        const GluingTree tree = template_for(lambda);
        const SpliceLayout layout = make_layout(tree);
        const ConnectedSumMetric g(tree);
        const ConnectedSumGrid grid = connected_sum_grid(tree, layout, opt.grid);
        const SplicedConnection ref(tree, layout);
        const QuadratureGrid base = base_grid(ref, grid);
        const MetricField round = round_metric_field();
        for (const std::string& name : opt.directions) {
            ParamDirection d;
            if (name == "scale" || name == "selfdual") d = ParamDirection::scale_of(vertex);
            else if (name == "centre+") d = ParamDirection::centre_of(vertex, Point4::UnitX());
            else if (name == "centre-") d = ParamDirection::centre_of(vertex, -Point4::UnitX());
            else if (name == "rotation") d = ParamDirection::rotation_of(vertex, AlgValue::UnitX());
            else throw ConfigError("differential_table: unknown direction '" + name + "'");
            const ChartTangent x = param_derivative(tree, d, opt.derivative);
            const BaseTangent b = base_param_derivative(tree, d, opt.derivative);
            DifferentialRow row{name, vertex, lambda, 0.0, 0.0};
            if (name == "selfdual") {
                row.norm_x = selfdual_derivative_norm(x, g, grid);
                const double s = integrate(base, [&](const Point4& y) {
                    const Form2 f = b.at(y).f;
                    if (f.c.isZero(0.0)) return 0.0;
                    const MetricValue m = round(y);
                    const double n = selfdual_norm(f, m);
                    return n * n * m.volume_density();
                });
                row.norm_base = std::sqrt(std::max(0.0, s));
            } else {
                row.norm_x = l2_norm(x, g, grid);
                row.norm_base = l2_norm(b, round, base);
            }
            rows.push_back(row);
        }
    }
    return rows;
}

inline void write_csv(std::ostream& out, const std::vector<DifferentialRow>& rows) {
    out << "direction,vertex,lambda,norm_X,norm_base\n";
    out.precision(12);
    for (const auto& r : rows)
        out << r.direction << ',' << r.vertex << ',' << r.lambda << ',' << r.norm_x << ',' << r.norm_base << '\n';
}

/// (lambda, norm) samples of one direction, from the X or base column.
inline std::vector<std::pair<double, double>> table_column(const std::vector<DifferentialRow>& rows,
                                                           const std::string& direction, bool base = false) {
    std::vector<std::pair<double, double>> out;
    for (const auto& r : rows)
        if (r.direction == direction) out.emplace_back(r.lambda, base ? r.norm_base : r.norm_x);
    return out;
}

}  // namespace bubbletree
