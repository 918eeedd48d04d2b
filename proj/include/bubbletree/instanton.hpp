#pragma once

#include "bubbletree/gauge.hpp"

#include "json.hpp"

#include <cmath>
#include <string>

namespace bubbletree {

enum class GaugeFlavor { regular, singular };

inline std::string to_string(GaugeFlavor f) { return f == GaugeFlavor::regular ? "regular" : "singular"; }
inline GaugeFlavor flavor_from_string(const std::string& s) {
    if (s == "regular") return GaugeFlavor::regular;
    if (s == "singular") return GaugeFlavor::singular;
    throw ConfigError("unknown gauge flavor '" + s + "'");
}

struct BpstParams {
    Point4 centre = Point4::Zero();
    double scale = 1.0;
    /// Global gauge rotation applied as Ad(orientation).
    Quat orientation{};
    GaugeFlavor flavor = GaugeFlavor::regular;

    void check() const {
        if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("bpst: scale must be positive");
        if (std::abs(orientation.norm() - 1.0) > 1e-12) throw ConfigError("bpst: orientation must be a unit quaternion");
        if (!centre.allFinite()) throw ConfigError("bpst: centre must be finite");
    }
};

inline void to_json(nlohmann::json& j, const BpstParams& p) {
    j = nlohmann::json{{"q", {p.centre[0], p.centre[1], p.centre[2], p.centre[3]}},
                       {"lambda", p.scale},
                       {"rho", {p.orientation.w, p.orientation.x, p.orientation.y, p.orientation.z}},
                       {"flavor", to_string(p.flavor)}};
}

inline void from_json(const nlohmann::json& j, BpstParams& p) {
    p = BpstParams{};
    if (j.contains("q")) {
        const auto q = j.at("q").get<std::vector<double>>();
        if (q.size() != 4) throw ConfigError("bpst: q needs 4 entries");
        p.centre = Point4(q[0], q[1], q[2], q[3]);
    }
    if (j.contains("lambda")) p.scale = j.at("lambda").get<double>();
    if (j.contains("rho")) {
        const auto r = j.at("rho").get<std::vector<double>>();
        if (r.size() != 4) throw ConfigError("bpst: rho needs 4 entries");
        p.orientation = {r[0], r[1], r[2], r[3]};
    }
    if (j.contains("flavor")) p.flavor = flavor_from_string(j.at("flavor").get<std::string>());
    p.check();
}

namespace detail {

/// A_mu = f(r) M_{mu nu} y_nu with y = x - centre, r = |y|, M a 't Hooft tensor.
/// Returns potential and first derivatives in closed form.
struct RadialAnsatz {
    double scale;
    bool singular;

    double tensor(int a, int mu, int nu) const {
        return singular ? thooft_eta(a, mu, nu) : thooft_etabar(a, mu, nu);
    }
    /// f and f'(r)/r.
    std::pair<double, double> profile(double r2) const {
        const double l2 = scale * scale;
        if (!singular) {
            const double d = r2 + l2;
            return {2.0 / d, -4.0 / (d * d)};
        }
        const double d = r2 * (r2 + l2);
        return {2.0 * l2 / d, -2.0 * l2 * (4.0 * r2 + 2.0 * l2) / (d * d)};
    }
    Form1 potential(const Point4& y) const {
        const double r2 = y.squaredNorm();
        const double f = profile(r2).first / sqrt2;
        Form1 a;
        for (int k = 0; k < 3; ++k)
            for (int mu = 0; mu < 4; ++mu) {
                double s = 0.0;
                for (int nu = 0; nu < 4; ++nu) s += tensor(k, mu, nu) * y[nu];
                a.c(k, mu) = f * s;
            }
        return a;
    }
    Form2 curvature(const Point4& y) const {
        const double r2 = y.squaredNorm();
        const auto [f0, fr0] = profile(r2);
        const double f = f0 / sqrt2, fr = fr0 / sqrt2;
        Form1 a;
        std::array<Form1, 4> da;
        for (int k = 0; k < 3; ++k)
            for (int mu = 0; mu < 4; ++mu) {
                double s = 0.0;
                for (int nu = 0; nu < 4; ++nu) s += tensor(k, mu, nu) * y[nu];
                a.c(k, mu) = f * s;
                for (int rho = 0; rho < 4; ++rho) da[rho].c(k, mu) = fr * y[rho] * s + f * tensor(k, mu, rho);
            }
        return curvature_from_jet(a, da);
    }
};

}  // namespace detail

/// Charge-one instanton, anti-self-dual for the flat metric.
inline ConnectionField bpst(const BpstParams& p) {
    p.check();
    const detail::RadialAnsatz ansatz{p.scale, p.flavor == GaugeFlavor::singular};
    const Eigen::Matrix3d rot = adjoint_matrix(p.orientation);
    const Point4 q = p.centre;
    const bool singular = ansatz.singular;
    auto guard = [q, singular](const Point4& x) {
        const Point4 y = x - q;
        if (singular && y.squaredNorm() == 0.0) throw DomainError("bpst: singular gauge evaluated at its centre");
        return y;
    };
    ConnectionField out;
    out.provenance = "bpst-" + to_string(p.flavor);
    out.potential = [ansatz, rot, guard](const Point4& x) { return Form1{rot * ansatz.potential(guard(x)).c}; };
    out.curvature = [ansatz, rot, guard](const Point4& x) { return Form2{rot * ansatz.curvature(guard(x)).c}; };
    return out;
}

/// Flat density 48 lambda^4 / (lambda^2 + r^2)^4.
inline double bpst_density(double scale, double r) {
    const double l2 = scale * scale;
    const double d = l2 + r * r;
    return 48.0 * l2 * l2 / (d * d * d * d);
}

/// Trivial connection.
inline ConnectionField product_connection() {
    ConnectionField out;
    out.provenance = "product";
    out.potential = [](const Point4&) { return Form1{}; };
    out.curvature = [](const Point4&) { return Form2{}; };
    return out;
}

/// Regular-gauge BPST moved into radial gauge about `anchor` in closed form.
/// Along the ray anchor + t d the regular potential contracted with d has a fixed
/// Lie direction, so transport is a single exponential.
inline Quat bpst_anchor_transform(const BpstParams& p, const Point4& anchor, const Point4& x) {
    const Point4 d = x - anchor;
    const Point4 c = anchor - p.centre;
    const double dd = d.squaredNorm();
    if (dd < 1e-300) return {};
    // contraction direction V^a = etabar^a_{mu nu} d_mu c_nu, times 1/sqrt(2)
    AlgValue v;
    for (int a = 0; a < 3; ++a) {
        double s = 0.0;
        for (int mu = 0; mu < 4; ++mu)
            for (int nu = 0; nu < 4; ++nu) s += thooft_etabar(a, mu, nu) * d[mu] * c[nu];
        v[a] = s / sqrt2;
    }
    // S = int_0^1 2 dt / (|c + t d|^2 + lambda^2)
    const double qa = dd, hb = c.dot(d), qc = c.squaredNorm() + p.scale * p.scale;
    const double disc = std::sqrt(std::max(qa * qc - hb * hb, 1e-300));
    const double integral = (2.0 / disc) * (std::atan((qa + hb) / disc) - std::atan(hb / disc));
    return alg_exp(-integral * (adjoint_matrix(p.orientation) * v));
}

/// Regular BPST in radial gauge about `anchor`; the identity transform when anchor is the centre.
inline ConnectionField bpst_anchored(BpstParams p, const Point4& anchor) {
    p.flavor = GaugeFlavor::regular;
    const ConnectionField base = bpst(p);
    GaugeTransform u;
    u.value = [p, anchor](const Point4& x) { return bpst_anchor_transform(p, anchor, x); };
    ConnectionField out = gauge_transform(base, u, 1e-5 * p.scale);
    out.provenance = "bpst-anchored";
    return out;
}

}  // namespace bubbletree
