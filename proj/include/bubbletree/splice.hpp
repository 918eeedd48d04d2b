#pragma once

#include "bubbletree/instanton.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bubbletree {

// ---------------------------------------------------------------------------
// Cutoff profiles.

namespace profile {

/// Quintic smoothstep 6t^5 - 15t^4 + 10t^3 clamped to [0, 1].
inline double smoothstep(double t) {
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0);
}
inline double smoothstep_slope(double t) {
    if (t <= 0.0 || t >= 1.0) return 0.0;
    return 30.0 * t * t * (1.0 - t) * (1.0 - t);
}
/// Integral of the smoothstep over [0, s], s in [0, 1].
inline double smoothstep_integral(double s) { return s * s * s * s * (s * (s - 3.0) + 2.5); }

/// zeta: 0 for t <= 1/2, 1 for t >= 1.
inline double zeta(double t) { return smoothstep(2.0 * t - 1.0); }
inline double zeta_slope(double t) { return 2.0 * smoothstep_slope(2.0 * t - 1.0); }

/// gamma: 0 for t <= 1/2, 1 for t >= 2, with gamma(1/t) = 1 - gamma(t).
inline double gamma(double t) {
    if (t <= 0.5) return 0.0;
    return smoothstep(0.5 * (std::log2(t) + 1.0));
}
inline double gamma_slope(double t) {
    if (t <= 0.5 || t >= 2.0) return 0.0;
    return smoothstep_slope(0.5 * (std::log2(t) + 1.0)) * 0.5 / (t * std::numbers::ln2);
}

/// Corner width of the beta ramp, in units of the log range.
inline constexpr double beta_corner = 0.1;

/// Clamp(t, 0, 1) with its two corners rounded: the slope is a smoothed trapezoid of unit area.
inline double smooth_clamp(double t) {
    constexpr double d = beta_corner, c = 1.0 / (1.0 - d);
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    if (t < d) return c * d * smoothstep_integral(t / d);
    if (t > 1.0 - d) return 1.0 - c * d * smoothstep_integral((1.0 - t) / d);
    return c * (0.5 * d + (t - d));
}
inline double smooth_clamp_slope(double t) {
    constexpr double d = beta_corner, c = 1.0 / (1.0 - d);
    if (t <= 0.0 || t >= 1.0) return 0.0;
    if (t < d) return c * smoothstep(t / d);
    if (t > 1.0 - d) return c * smoothstep((1.0 - t) / d);
    return c;
}

}  // namespace profile

enum class CutoffKind { psi, gamma, beta };

/// psi_b(x) = zeta(|x - c| / b); gamma_l(x) = gamma(|x - c| / sqrt(l));
/// beta_{l,N}(x) = smooth_clamp(log(|x - c| N / sqrt(l)) / log(N / 2)).
struct CutoffFn {
    CutoffKind kind = CutoffKind::psi;
    double b = 1.0;
    double lambda = 1.0;
    double N = 8.0;
    Point4 centre = Point4::Zero();

    void check() const {
        if (kind == CutoffKind::psi && !(b > 0.0)) throw ConfigError("cutoff: b must be positive");
        if (kind != CutoffKind::psi && !(lambda > 0.0)) throw ConfigError("cutoff: lambda must be positive");
        if (kind == CutoffKind::beta && !(N > 2.0)) throw ConfigError("cutoff: beta needs N > 2");
    }
};

struct CutoffValue {
    double value = 0.0;
    Point4 gradient = Point4::Zero();
};

inline CutoffValue cutoff_eval(const CutoffFn& c, const Point4& x) {
    const Point4 y = x - c.centre;
    const double r = y.norm();
    CutoffValue out;
    switch (c.kind) {
        case CutoffKind::psi: {
            const double t = r / c.b;
            out.value = profile::zeta(t);
            if (r > 0.0) out.gradient = profile::zeta_slope(t) / (c.b * r) * y;
            break;
        }
        case CutoffKind::gamma: {
            const double s = std::sqrt(c.lambda), t = r / s;
            out.value = profile::gamma(t);
            if (r > 0.0) out.gradient = profile::gamma_slope(t) / (s * r) * y;
            break;
        }
        case CutoffKind::beta: {
            if (r == 0.0) return out;
            const double span = std::log(c.N / 2.0);
            const double t = std::log(r * c.N / std::sqrt(c.lambda)) / span;
            out.value = profile::smooth_clamp(t);
            out.gradient = profile::smooth_clamp_slope(t) / (span * r * r) * y;
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gluing trees.

enum class VertexConnection { product, bpst };

struct GluingNode {
    std::string id;
    /// Empty at the root.
    std::string parent;
    int charge = 0;
    VertexConnection conn = VertexConnection::product;
    /// The vertex connection in its own chart (used when conn is bpst).
    BpstParams bpst{};
    /// x_I in the parent chart.
    Point4 centre = Point4::Zero();
    /// lambda_I: the child chart coordinate is frame (z - x_I) / lambda_I.
    double scale = 1.0;
    /// b_I; unset means 4 N sqrt(lambda_I).
    std::optional<double> cutoff;
    /// Gluing rotation, a constant gauge rotation of the vertex field.
    Quat rho{};
    Mat4 frame = Mat4::Identity();

    bool is_root() const { return parent.empty(); }
};

struct GluingTree {
    double N = 8.0;
    double lambda0 = 1.0;
    double b0 = 0.25;
    double d0 = 1.0;
    double varrho0 = 1.0;
    std::vector<GluingNode> nodes;

    std::optional<std::size_t> find(const std::string& id) const {
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i].id == id) return i;
        return std::nullopt;
    }
    std::size_t index(const std::string& id) const {
        if (auto i = find(id)) return *i;
        throw ConfigError("gluing tree: no node '" + id + "'");
    }
    std::size_t root() const {
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i].is_root()) return i;
        throw ConfigError("gluing tree: no root");
    }
    std::vector<std::size_t> children(std::size_t i) const {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < nodes.size(); ++j)
            if (nodes[j].parent == nodes[i].id) out.push_back(j);
        return out;
    }
    std::optional<std::size_t> parent(std::size_t i) const {
        if (nodes[i].is_root()) return std::nullopt;
        return find(nodes[i].parent);
    }
    double cutoff(std::size_t i) const {
        const auto& n = nodes[i];
        return n.cutoff ? *n.cutoff : 4.0 * N * std::sqrt(n.scale);
    }
    int total_charge() const {
        int k = 0;
        for (const auto& n : nodes) k += n.charge;
        return k;
    }
    std::size_t depth(std::size_t i) const {
        std::size_t d = 0;
        for (auto p = parent(i); p; p = parent(*p)) ++d;
        return d;
    }
    /// Largest gluing scale, lambda bar.
    double max_scale() const {
        double s = 0.0;
        for (const auto& n : nodes)
            if (!n.is_root()) s = std::max(s, n.scale);
        return s;
    }
};

namespace detail {

inline std::vector<double> point_json(const Point4& p) { return {p[0], p[1], p[2], p[3]}; }
inline Point4 point_from_json(const nlohmann::json& j, const char* what) {
    const auto v = j.get<std::vector<double>>();
    if (v.size() != 4) throw ConfigError(std::string(what) + " needs 4 entries");
    return {v[0], v[1], v[2], v[3]};
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const GluingNode& n) {
    j = nlohmann::json{{"id", n.id}, {"k", n.charge}};
    if (n.conn == VertexConnection::product) j["conn"] = "product";
    else j["conn"] = nlohmann::json{{"bpst", n.bpst}};
    if (n.is_root()) return;
    j["parent"] = n.parent;
    j["x"] = detail::point_json(n.centre);
    j["lambda"] = n.scale;
    j["rho"] = {n.rho.w, n.rho.x, n.rho.y, n.rho.z};
    if (n.cutoff) j["b"] = *n.cutoff;
    if (!n.frame.isIdentity(0.0)) {
        std::vector<double> f(16);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) f[4 * r + c] = n.frame(r, c);
        j["frame"] = f;
    }
}

inline void from_json(const nlohmann::json& j, GluingNode& n) {
    try {
        n = GluingNode{};
        n.id = j.at("id").get<std::string>();
        n.charge = j.value("k", 0);
        if (j.contains("parent")) n.parent = j.at("parent").get<std::string>();
        const auto& conn = j.contains("conn") ? j.at("conn") : nlohmann::json("product");
        if (conn.is_string()) {
            const auto s = conn.get<std::string>();
            if (s != "product" && s != "theta") throw ConfigError("gluing node '" + n.id + "': unknown conn '" + s + "'");
            n.conn = VertexConnection::product;
        } else {
            n.conn = VertexConnection::bpst;
            n.bpst = conn.at("bpst").get<BpstParams>();
        }
        if (j.contains("x")) n.centre = detail::point_from_json(j.at("x"), "node x");
        if (j.contains("lambda")) n.scale = j.at("lambda").get<double>();
        if (j.contains("b")) n.cutoff = j.at("b").get<double>();
        if (j.contains("rho")) {
            const auto r = j.at("rho").get<std::vector<double>>();
            if (r.size() != 4) throw ConfigError("node rho needs 4 entries");
            n.rho = {r[0], r[1], r[2], r[3]};
        }
        if (j.contains("frame")) {
            const auto f = j.at("frame").get<std::vector<double>>();
            if (f.size() != 16) throw ConfigError("node frame needs 16 entries");
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) n.frame(r, c) = f[4 * r + c];
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("gluing node: ") + e.what());
    }
}

inline void to_json(nlohmann::json& j, const GluingTree& t) {
    j = nlohmann::json{{"N", t.N}, {"lambda0", t.lambda0}, {"b0", t.b0}, {"d0", t.d0}, {"varrho0", t.varrho0},
                       {"nodes", t.nodes}};
}

inline void from_json(const nlohmann::json& j, GluingTree& t) {
    try {
        t = GluingTree{};
        t.N = j.value("N", 8.0);
        t.lambda0 = j.value("lambda0", 1.0);
        t.b0 = j.value("b0", 0.25);
        t.d0 = j.value("d0", 1.0);
        t.varrho0 = j.value("varrho0", 1.0);
        t.nodes = j.at("nodes").get<std::vector<GluingNode>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("gluing tree: ") + e.what());
    }
}

struct Violation {
    std::string code;
    std::string node;
    std::string message;
    /// Structural problems make the tree unusable; the rest are smallness conditions.
    bool hard = false;
};

inline void to_json(nlohmann::json& j, const Violation& v) {
    j = nlohmann::json{{"code", v.code}, {"node", v.node}, {"message", v.message}, {"hard", v.hard}};
}

/// Every failed invariant of the gluing data; empty iff the tree is valid.
inline std::vector<Violation> validate_gluing_tree(const GluingTree& t) {
    std::vector<Violation> out;
    auto add = [&](std::string code, std::string node, std::string msg, bool hard) {
        out.push_back({std::move(code), std::move(node), std::move(msg), hard});
    };
    if (t.nodes.empty()) {
        add("structure", "", "tree has no nodes", true);
        return out;
    }
    if (!(t.N > 4.0)) add("N", "", "N must exceed 4", false);

    std::size_t roots = 0;
    std::map<std::string, int> seen;
    for (const auto& n : t.nodes) {
        if (n.is_root()) ++roots;
        if (++seen[n.id] > 1) add("structure", n.id, "duplicate id", true);
    }
    if (roots != 1) add("structure", "", "need exactly one root, found " + std::to_string(roots), true);
    for (const auto& n : t.nodes)
        if (n.is_root() && n.id != "0") add("structure", n.id, "root id must be \"0\"", false);
    bool structural = false;
    for (const auto& v : out) structural |= v.hard;
    if (structural) return out;

    for (std::size_t i = 0; i < t.nodes.size(); ++i) {
        const auto& n = t.nodes[i];
        if (!n.is_root() && !t.find(n.parent)) {
            add("structure", n.id, "parent '" + n.parent + "' missing", true);
            continue;
        }
        // acyclic: the walk up reaches the root within |nodes| steps
        std::size_t steps = 0;
        for (auto p = t.parent(i); p && steps <= t.nodes.size(); p = t.parent(*p)) ++steps;
        if (steps > t.nodes.size()) add("structure", n.id, "cycle through this node", true);
    }
    structural = false;
    for (const auto& v : out) structural |= v.hard;
    if (structural) return out;

    const double upper = std::min(t.b0, 0.25 * std::min({1.0, t.varrho0, t.d0}));
    bool child_charge = false;
    for (std::size_t i = 0; i < t.nodes.size(); ++i) {
        const auto& n = t.nodes[i];
        const int own = n.conn == VertexConnection::bpst ? 1 : 0;
        if (n.charge < 0) add("charge", n.id, "negative charge", true);
        if (n.charge != own) add("vertex-charge", n.id, "charge does not match the assigned connection", true);
        if (n.conn == VertexConnection::bpst) {
            try {
                n.bpst.check();
            } catch (const ConfigError& e) {
                add("connection", n.id, e.what(), true);
            }
        }
        const auto kids = t.children(i);
        if (n.is_root()) continue;
        if (n.charge > 0) child_charge = true;
        if (!(n.scale > 0.0) || !std::isfinite(n.scale)) {
            add("scale", n.id, "lambda must be positive", true);
            continue;
        }
        if (std::abs(n.rho.norm() - 1.0) > 1e-12) add("rotation", n.id, "rho must be a unit quaternion", true);
        if ((n.frame.transpose() * n.frame - Mat4::Identity()).norm() > 1e-10 || n.frame.determinant() < 0.0)
            add("rotation", n.id, "frame must be in SO(4)", true);
        if (!(n.scale < t.lambda0)) add("scale-upper", n.id, "lambda must be below lambda0", false);
        const double b = t.cutoff(i);
        if (b < 4.0 * t.N * std::sqrt(n.scale) * (1.0 - 1e-12))
            add("cutoff-lower", n.id, "b below 4 N sqrt(lambda)", false);
        if (!(b < upper)) add("cutoff-upper", n.id, "b not below 1/4 min{1, varrho0, d0}", false);
        if (kids.empty() && n.charge == 0) add("terminal-charge", n.id, "terminal vertex carries no charge", false);
        if (n.conn == VertexConnection::product && kids.size() < 2 && !kids.empty())
            add("theta-branching", n.id, "flat vertex with a single child", false);
    }
    if (t.total_charge() < 1 || !child_charge) add("charge", "", "need total charge >= 1 carried partly above the root", false);

    // sibling separation
    for (std::size_t i = 0; i < t.nodes.size(); ++i) {
        const auto kids = t.children(i);
        for (std::size_t a = 0; a < kids.size(); ++a)
            for (std::size_t c = a + 1; c < kids.size(); ++c) {
                const double d = (t.nodes[kids[a]].centre - t.nodes[kids[c]].centre).norm();
                if (!(d > 4.0 * (t.cutoff(kids[a]) + t.cutoff(kids[c]))))
                    add("separation", t.nodes[kids[c]].id, "too close to sibling " + t.nodes[kids[a]].id, false);
            }
    }
    return out;
}

inline bool has_hard_violation(const std::vector<Violation>& v) {
    return std::any_of(v.begin(), v.end(), [](const Violation& x) { return x.hard; });
}

// ---------------------------------------------------------------------------
// Layout: patch and region radii frozen from a reference tree, so that
// perturbed trees share chart structure.

struct SpliceLayout {
    struct Site {
        /// Radial-gauge anchor and patch radius in the parent chart.
        Point4 anchor = Point4::Zero();
        double patch = 0.0;
        /// The child region is |z - anchor| < region in the parent chart.
        double region = 0.0;
    };
    /// Indexed by node; unused at the root.
    std::vector<Site> sites;
    /// Beyond this radius from the vertex centre a non-root vertex uses the singular gauge.
    std::vector<double> switch_radius;
};

inline SpliceLayout make_layout(const GluingTree& t) {
    SpliceLayout l;
    l.sites.resize(t.nodes.size());
    l.switch_radius.assign(t.nodes.size(), 0.0);
    for (std::size_t i = 0; i < t.nodes.size(); ++i) {
        const auto& n = t.nodes[i];
        if (n.is_root()) continue;
        const double b = t.cutoff(i);
        l.sites[i] = {n.centre, 2.0 * b, std::sqrt(n.scale) / t.N};
        l.switch_radius[i] = 0.5 / b;
    }
    return l;
}

struct FieldSample {
    Form1 a;
    Form2 f;
};

/// A' on each vertex chart, plus the gluing maps back to the base chart.
class SplicedConnection {
public:
    SplicedConnection(GluingTree tree, SpliceLayout layout) : tree_(std::move(tree)), layout_(std::move(layout)) {
        const auto v = validate_gluing_tree(tree_);
        for (const auto& x : v)
            if (x.hard) throw ConfigError("splice: " + x.code + " at '" + x.node + "': " + x.message);
        if (layout_.sites.size() != tree_.nodes.size()) throw ConfigError("splice: layout does not match the tree");
        const std::size_t n = tree_.nodes.size();
        children_.resize(n);
        to_chart_.resize(n);
        local_.resize(n);
        for (std::size_t i = 0; i < n; ++i) children_[i] = tree_.children(i);
        order_ = breadth_first();
        for (std::size_t i : order_) {
            const auto& node = tree_.nodes[i];
            if (auto p = tree_.parent(i)) to_chart_[i] = to_chart_[*p].then(ConformalMap{node.scale, node.centre, node.frame});
            build_local(i);
        }
    }

    const GluingTree& tree() const { return tree_; }
    const SpliceLayout& layout() const { return layout_; }
    std::size_t vertex_count() const { return tree_.nodes.size(); }
    const std::vector<std::size_t>& children(std::size_t v) const { return children_[v]; }
    /// Base chart to vertex chart.
    const ConformalMap& to_chart(std::size_t v) const { return to_chart_[v]; }
    /// Vertices parents-first.
    const std::vector<std::size_t>& order() const { return order_; }

    /// The cutoff psi_I and its gradient in the vertex chart.
    CutoffValue cutoff(std::size_t v, const Point4& z) const {
        CutoffValue out{1.0, Point4::Zero()};
        auto mul = [&out](double f, const Point4& g) {
            out.gradient = f * out.gradient + out.value * g;
            out.value *= f;
        };
        if (!tree_.nodes[v].is_root()) {
            // zeta(|z'| / b) with z' the south coordinate, |z'| = 1 / |z|
            const double b = tree_.cutoff(v), r = z.norm();
            if (r > 0.0) {
                const double t = 1.0 / (b * r);
                mul(profile::zeta(t), -profile::zeta_slope(t) / (b * r * r * r) * z);
            }
        }
        for (std::size_t c : children_[v]) {
            const CutoffValue k = cutoff_eval({CutoffKind::psi, tree_.cutoff(c), 1.0, tree_.N, tree_.nodes[c].centre}, z);
            mul(k.value, k.gradient);
            if (out.value == 0.0 && out.gradient.isZero(0.0)) break;
        }
        return out;
    }

    /// The unspliced vertex connection in the splice gauge patches.
    FieldSample local(std::size_t v, const Point4& z) const {
        const ConnectionField* f = patch_field(v, z);
        if (!f) return {};
        return {f->potential(z), f->curvature(z)};
    }

    /// A'_I = psi_I A_I and its curvature psi F + dpsi ^ A + (psi^2 - psi)[A ^ A].
    FieldSample sample(std::size_t v, const Point4& z) const {
        const ConnectionField* f = patch_field(v, z);
        if (!f) return {};
        const CutoffValue psi = cutoff(v, z);
        if (psi.value == 0.0 && psi.gradient.isZero(0.0)) return {};
        const Form1 a = f->potential(z);
        const Form2 F = f->curvature(z);
        FieldSample out;
        out.a = psi.value * a;
        out.f = psi.value * F + wedge(psi.gradient, a);
        if (psi.value != 1.0) out.f += (psi.value * psi.value - psi.value) * bracket_square(a);
        return out;
    }

    ConnectionField vertex_field(std::size_t v) const {
        ConnectionField out;
        out.provenance = "spliced";
        out.potential = [self = *this, v](const Point4& z) { return self.sample(v, z).a; };
        out.curvature = [self = *this, v](const Point4& z) { return self.sample(v, z).f; };
        return out;
    }

    struct Located {
        std::size_t vertex;
        Point4 point;
    };
    /// The vertex whose region contains the base point y, and the chart point there.
    Located locate(const Point4& y) const {
        std::size_t v = tree_.root();
        Point4 z = y;
        for (bool moved = true; moved;) {
            moved = false;
            for (std::size_t c : children_[v]) {
                if ((z - layout_.sites[c].anchor).norm() < layout_.sites[c].region) {
                    v = c;
                    z = to_chart_[c].forward(y);
                    moved = true;
                    break;
                }
            }
        }
        return {v, z};
    }

    /// Base pullback: A' in the vertex owning y, pulled back along the gluing maps.
    FieldSample base_sample(const Point4& y) const {
        const Located at = locate(y);
        if (tree_.nodes[at.vertex].is_root()) return sample(at.vertex, at.point);
        const FieldSample s = sample(at.vertex, at.point);
        const Mat4 j = to_chart_[at.vertex].jacobian();
        return {pull_back(s.a, j), pull_back(s.f, j)};
    }

private:
    std::vector<std::size_t> breadth_first() const {
        std::vector<std::size_t> out{tree_.root()};
        for (std::size_t k = 0; k < out.size(); ++k)
            for (std::size_t c : children_[out[k]]) out.push_back(c);
        if (out.size() != tree_.nodes.size()) throw ConfigError("splice: tree is not connected");
        return out;
    }

    struct LocalFields {
        bool flat = true;
        ConnectionField regular, singular;
        std::vector<ConnectionField> anchored;  // parallel to children_
    };

    void build_local(std::size_t v) {
        const auto& node = tree_.nodes[v];
        LocalFields& l = local_[v];
        if (node.conn != VertexConnection::bpst) return;
        l.flat = false;
        BpstParams p = node.bpst;
        p.orientation = (node.rho * p.orientation).normalized();
        p.flavor = GaugeFlavor::regular;
        l.regular = bpst(p);
        p.flavor = GaugeFlavor::singular;
        l.singular = bpst(p);
        p.flavor = GaugeFlavor::regular;
        for (std::size_t c : children_[v]) l.anchored.push_back(bpst_anchored(p, layout_.sites[c].anchor));
    }

    const ConnectionField* patch_field(std::size_t v, const Point4& z) const {
        const LocalFields& l = local_[v];
        if (l.flat) return nullptr;
        for (std::size_t k = 0; k < children_[v].size(); ++k) {
            const auto& site = layout_.sites[children_[v][k]];
            if ((z - site.anchor).norm() < site.patch) return &l.anchored[k];
        }
        const auto& node = tree_.nodes[v];
        if (!node.is_root() && (z - node.bpst.centre).norm() >= layout_.switch_radius[v]) return &l.singular;
        return &l.regular;
    }

    GluingTree tree_;
    SpliceLayout layout_;
    std::vector<std::vector<std::size_t>> children_;
    std::vector<ConformalMap> to_chart_;
    std::vector<LocalFields> local_;
    std::vector<std::size_t> order_;
};

inline SplicedConnection splice(const GluingTree& tree) { return SplicedConnection(tree, make_layout(tree)); }
inline SplicedConnection splice(const GluingTree& tree, const SpliceLayout& layout) { return SplicedConnection(tree, layout); }

/// A-hat' on the base chart.
inline ConnectionField pullback_to_base(const SplicedConnection& s) {
    ConnectionField out;
    out.provenance = "pulled-back";
    out.potential = [s](const Point4& y) { return s.base_sample(y).a; };
    out.curvature = [s](const Point4& y) { return s.base_sample(y).f; };
    return out;
}

// ---------------------------------------------------------------------------
// Connected-sum metric g = Phi_I^2 delta on each vertex chart.

class ConnectedSumMetric {
public:
    explicit ConnectedSumMetric(GluingTree tree) : tree_(std::move(tree)) {
        if (has_hard_violation(validate_gluing_tree(tree_))) throw ConfigError("connected_sum_metric: invalid tree");
        children_.resize(tree_.nodes.size());
        for (std::size_t i = 0; i < tree_.nodes.size(); ++i) children_[i] = tree_.children(i);
    }

    const GluingTree& tree() const { return tree_; }

    /// Phi_I: round in the vertex chart, log-interpolated to the neighbouring chart across each neck.
    double factor(std::size_t v, const Point4& z) const {
        double log_phi = std::log(round_factor(z));
        for (std::size_t c : children_[v]) {
            const auto& n = tree_.nodes[c];
            const double rho = (z - n.centre).norm();
            const double s = neck_weight(rho, n.scale);
            if (s == 0.0) continue;
            const Point4 w = n.frame * (z - n.centre) / n.scale;
            log_phi = (1.0 - s) * log_phi + s * std::log(round_factor(w) / n.scale);
        }
        const auto& node = tree_.nodes[v];
        if (!node.is_root()) {
            // own neck seen from the child side: rho = lambda |z| in the parent chart
            const double s = neck_weight(node.scale * z.norm(), node.scale);
            if (s < 1.0) {
                const Point4 y = node.centre + node.scale * (node.frame.transpose() * z);
                log_phi = s * log_phi + (1.0 - s) * std::log(node.scale * round_factor(y));
            }
        }
        return std::exp(log_phi);
    }

    /// m_I = (Phi_I / h_1)^2.
    double conformal_factor(std::size_t v, const Point4& z) const {
        const double q = factor(v, z) / round_factor(z);
        return q * q;
    }

    MetricValue operator()(std::size_t v, const Point4& z) const { return MetricValue::conformal(factor(v, z)); }

    MetricField field(std::size_t v) const {
        return [self = *this, v](const Point4& z) { return self(v, z); };
    }

    /// 1 on the child side of the neck (rho < sqrt(lambda)/2), 0 beyond 2 sqrt(lambda).
    static double neck_weight(double rho, double lambda) { return 1.0 - profile::gamma(rho / std::sqrt(lambda)); }

private:
    GluingTree tree_;
    std::vector<std::vector<std::size_t>> children_;
};

inline ConnectedSumMetric connected_sum_metric(const GluingTree& tree) { return ConnectedSumMetric(tree); }

/// Largest relative mismatch of Phi_parent(y) against Phi_child(w) / lambda on sampled neck points.
inline double neck_matching_residual(const ConnectedSumMetric& g, std::size_t child, int samples = 200) {
    const auto& t = g.tree();
    const auto& n = t.nodes[child];
    const std::size_t parent = *t.parent(child);
    const double s = std::sqrt(n.scale);
    double worst = 0.0;
    for (int k = 0; k < samples; ++k) {
        // deterministic spiral through the neck annulus
        const double rho = s / t.N * std::pow(t.N * t.N, (k + 0.5) / samples);
        const double a = 2.399963 * k, b = 0.7 * k + 0.3;
        const Point4 dir = Point4(std::cos(a) * std::cos(b), std::sin(a) * std::cos(b), std::cos(1.3 * a) * std::sin(b),
                                  std::sin(1.3 * a) * std::sin(b))
                               .normalized();
        const Point4 y = n.centre + rho * dir;
        const Point4 w = n.frame * (y - n.centre) / n.scale;
        const double lhs = g.factor(parent, y);
        const double rhs = g.factor(child, w) / n.scale;
        worst = std::max(worst, std::abs(lhs - rhs) / lhs);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Quadrature over the connected sum.

struct ChartQuadrature {
    std::size_t vertex = 0;
    std::vector<Point4> nodes;
    std::vector<double> weights;
};

struct ConnectedSumGrid {
    std::vector<ChartQuadrature> charts;

    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& c : charts) n += c.nodes.size();
        return n;
    }
};

namespace detail {

/// 1 within 1.5 b of the site, 0 beyond 2 b.
inline double site_weight(const Point4& z, const SpliceLayout::Site& s) {
    return 1.0 - profile::smoothstep(((z - s.anchor).norm() - 0.75 * s.patch) / (0.25 * s.patch));
}

}  // namespace detail

/// Per vertex: the vertex region (full chart at the root, a ball otherwise) weighted by
/// 1 - sum chi_c, plus an annulus about each child site weighted by chi_c.
inline ConnectedSumGrid connected_sum_grid(const GluingTree& t, const SpliceLayout& layout,
                                           const GridSpec& like = default_grid_spec()) {
    ConnectedSumGrid out;
    for (std::size_t v = 0; v < t.nodes.size(); ++v) {
        const auto kids = t.children(v);
        ChartQuadrature q;
        q.vertex = v;
        GridSpec main = like;
        if (t.nodes[v].is_root()) {
            main.r_min = 0.0;
            main.region = Region::full_chart;
        } else {
            main.r_min = 0.0;
            main.r_max = 1.0 / (t.N * std::sqrt(t.nodes[v].scale));
            main.region = Region::ball;
        }
        const QuadratureGrid g = build_grid(main);
        for (std::size_t i = 0; i < g.size(); ++i) {
            double w = 1.0;
            for (std::size_t c : kids) w -= detail::site_weight(g.nodes[i], layout.sites[c]);
            if (w <= 0.0) continue;
            q.nodes.push_back(g.nodes[i]);
            q.weights.push_back(g.weights[i] * w);
        }
        for (std::size_t c : kids) {
            const auto& site = layout.sites[c];
            GridSpec ring = like;
            ring.r_min = site.region;
            ring.r_max = site.patch;
            ring.region = Region::annulus;
            ring.panels = std::max(like.panels / 2, 4);
            const QuadratureGrid a = placed(build_grid(ring), site.anchor, 1.0);
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double w = detail::site_weight(a.nodes[i], site);
                if (w <= 0.0) continue;
                q.nodes.push_back(a.nodes[i]);
                q.weights.push_back(a.weights[i] * w);
            }
        }
        out.charts.push_back(std::move(q));
    }
    return out;
}

/// Sum over charts of the weighted integrand f(vertex, chart point).
template <class F>
double integrate_charts(const ConnectedSumGrid& grid, F&& f) {
    std::vector<double> totals;
    for (const auto& chart : grid.charts) {
        std::vector<double> v(chart.nodes.size());
        parallel_for(v.size(), [&](std::size_t i) { v[i] = f(chart.vertex, chart.nodes[i]) * chart.weights[i]; });
        for (std::size_t i = 0; i < v.size(); ++i)
            if (!std::isfinite(v[i])) throw NumericalError("non-finite integrand at chart node " + std::to_string(i));
        totals.push_back(pairwise_sum(v));
    }
    return pairwise_sum(totals);
}

/// Per-chart integrals of f.
template <class F>
std::vector<double> integrate_each_chart(const ConnectedSumGrid& grid, F&& f) {
    std::vector<double> totals;
    for (const auto& chart : grid.charts) {
        ConnectedSumGrid one;
        one.charts.push_back(chart);
        totals.push_back(integrate_charts(one, f));
    }
    return totals;
}

/// The connected-sum nodes mapped into the base chart, as a flat-measure grid there.
inline QuadratureGrid base_grid(const SplicedConnection& s, const ConnectedSumGrid& grid) {
    QuadratureGrid out;
    for (const auto& chart : grid.charts) {
        const ConformalMap& f = s.to_chart(chart.vertex);
        const double w = std::pow(f.scale, 4);
        for (std::size_t i = 0; i < chart.nodes.size(); ++i) {
            out.nodes.push_back(f.inverse(chart.nodes[i]));
            out.weights.push_back(chart.weights[i] * w);
            out.radii.push_back(out.nodes.back().norm());
        }
    }
    return out;
}

/// ||F(A')||^2 over the connected sum.
inline double splice_energy(const SplicedConnection& s, const ConnectedSumGrid& grid) {
    return integrate_charts(grid, [&](std::size_t v, const Point4& z) { return s.sample(v, z).f.norm2(); });
}

/// Sum over vertices of ||F^{+,g}(A')||_{L^p(X_I', g)}.
inline double selfdual_error(const SplicedConnection& s, const ConnectedSumMetric& g, double p,
                             const ConnectedSumGrid& grid) {
    if (!(p >= 1.0 && p < 4.0)) throw ConfigError("selfdual_error: p must lie in [1, 4)");
    const auto parts = integrate_each_chart(grid, [&](std::size_t v, const Point4& z) {
        const Form2 f = s.sample(v, z).f;
        if (f.norm2() == 0.0) return 0.0;
        const MetricValue m = g(v, z);
        return std::pow(selfdual_norm(f, m), p) * m.volume_density();
    });
    double total = 0.0;
    for (double x : parts) total += std::pow(x, 1.0 / p);
    return total;
}

inline double selfdual_error(const GluingTree& tree, double p, const GridSpec& like = default_grid_spec()) {
    const SplicedConnection s = splice(tree);
    return selfdual_error(s, connected_sum_metric(tree), p, connected_sum_grid(tree, s.layout(), like));
}

/// Root BPST background with one charge-one bubble per listed attachment point.
inline GluingTree one_level_tree(std::optional<BpstParams> background, const std::vector<Point4>& sites, double lambda,
                                 double N = 8.0) {
    GluingTree t;
    t.N = N;
    GluingNode root;
    root.id = "0";
    if (background) {
        root.conn = VertexConnection::bpst;
        root.charge = 1;
        root.bpst = *background;
    }
    t.nodes.push_back(root);
    for (std::size_t i = 0; i < sites.size(); ++i) {
        GluingNode n;
        n.id = std::to_string(i + 1);
        n.parent = "0";
        n.charge = 1;
        n.conn = VertexConnection::bpst;
        n.centre = sites[i];
        n.scale = lambda;
        t.nodes.push_back(n);
    }
    return t;
}

}  // namespace bubbletree
