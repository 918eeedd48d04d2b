#pragma once

#include "bubbletree/geometry.hpp"

#include <Eigen/Eigenvalues>

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <utility>

namespace bubbletree {

// ---------------------------------------------------------------------------
// su(2) coefficients in the basis T_a = -i sigma_a / sqrt(2), orthonormal for -tr(xy).

using AlgValue = Eigen::Vector3d;

inline constexpr double sqrt2 = std::numbers::sqrt2;

inline AlgValue bracket(const AlgValue& a, const AlgValue& b) { return sqrt2 * a.cross(b); }

/// Imaginary quaternion representing a Lie algebra element.
inline Quat to_quat(const AlgValue& v) { return {0.0, v[0] / sqrt2, v[1] / sqrt2, v[2] / sqrt2}; }
/// Lie algebra element of the imaginary part of q.
inline AlgValue from_quat(const Quat& q) { return sqrt2 * AlgValue(q.x, q.y, q.z); }

/// Matrix of Ad(u) = u (.) u^{-1} on coefficients, u a unit quaternion.
inline Eigen::Matrix3d adjoint_matrix(const Quat& u) {
    const double w = u.w, x = u.x, y = u.y, z = u.z;
    Eigen::Matrix3d m;
    m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return m;
}

/// exp of a Lie algebra element as a unit quaternion.
inline Quat alg_exp(const AlgValue& v) { return quat_exp(v / sqrt2); }

// ---------------------------------------------------------------------------
// 't Hooft symbols. eta is self-dual, etabar anti-self-dual for eps_{0123} = +1.

inline double thooft_eta(int a, int mu, int nu) {
    if (mu == nu) return 0.0;
    if (mu == 0) return nu == a + 1 ? 1.0 : 0.0;
    if (nu == 0) return mu == a + 1 ? -1.0 : 0.0;
    const int i = a + 1, j = mu, k = nu;
    if (i == j || j == k || i == k) return 0.0;
    // sign of the permutation (i, j, k) of (1, 2, 3)
    return ((j - i + 3) % 3 == 1) ? 1.0 : -1.0;
}

inline double thooft_etabar(int a, int mu, int nu) {
    if (mu == 0 || nu == 0) return -thooft_eta(a, mu, nu);
    return thooft_eta(a, mu, nu);
}

// ---------------------------------------------------------------------------
// Lie-algebra-valued forms.

/// Column mu holds A_mu.
struct Form1 {
    Eigen::Matrix<double, 3, 4> c = Eigen::Matrix<double, 3, 4>::Zero();

    AlgValue operator[](int mu) const { return c.col(mu); }
    double norm() const { return c.norm(); }
    Form1& operator+=(const Form1& o) { c += o.c; return *this; }
    Form1& operator-=(const Form1& o) { c -= o.c; return *this; }
    friend Form1 operator+(Form1 a, const Form1& b) { return a += b; }
    friend Form1 operator-(Form1 a, const Form1& b) { return a -= b; }
    friend Form1 operator*(double s, Form1 a) { a.c *= s; return a; }
};

/// Index of the pair (mu, nu), mu < nu, in the order 01 02 03 12 13 23.
inline int pair_index(int mu, int nu) {
    static constexpr int table[4][4] = {{-1, 0, 1, 2}, {0, -1, 3, 4}, {1, 3, -1, 5}, {2, 4, 5, -1}};
    return table[mu][nu];
}
inline constexpr std::array<std::pair<int, int>, 6> form_pairs{{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

/// Column p holds F_{mu nu} for the p-th pair.
struct Form2 {
    Eigen::Matrix<double, 3, 6> c = Eigen::Matrix<double, 3, 6>::Zero();

    AlgValue at(int mu, int nu) const {
        if (mu == nu) return AlgValue::Zero();
        return mu < nu ? AlgValue(c.col(pair_index(mu, nu))) : AlgValue(-c.col(pair_index(mu, nu)));
    }
    void set(int mu, int nu, const AlgValue& v) {
        if (mu < nu) c.col(pair_index(mu, nu)) = v;
        else c.col(pair_index(mu, nu)) = -v;
    }
    /// Antisymmetric 4x4 matrix of Lie component a.
    Mat4 component(int a) const {
        Mat4 m = Mat4::Zero();
        for (int p = 0; p < 6; ++p) {
            const auto [mu, nu] = form_pairs[p];
            m(mu, nu) = c(a, p);
            m(nu, mu) = -c(a, p);
        }
        return m;
    }
    static Form2 from_components(const std::array<Mat4, 3>& m) {
        Form2 f;
        for (int a = 0; a < 3; ++a)
            for (int p = 0; p < 6; ++p) f.c(a, p) = m[a](form_pairs[p].first, form_pairs[p].second);
        return f;
    }
    /// Flat pointwise norm, sum over mu < nu.
    double norm() const { return c.norm(); }
    double norm2() const { return c.squaredNorm(); }
    Form2& operator+=(const Form2& o) { c += o.c; return *this; }
    Form2& operator-=(const Form2& o) { c -= o.c; return *this; }
    friend Form2 operator+(Form2 a, const Form2& b) { return a += b; }
    friend Form2 operator-(Form2 a, const Form2& b) { return a -= b; }
    friend Form2 operator*(double s, Form2 a) { a.c *= s; return a; }
};

/// (alpha wedge beta) for scalar 1-forms alpha (as a 4-vector) and a Lie-valued 1-form.
inline Form2 wedge(const Point4& alpha, const Form1& a) {
    Form2 f;
    for (int p = 0; p < 6; ++p) {
        const auto [mu, nu] = form_pairs[p];
        f.c.col(p) = alpha[mu] * a.c.col(nu) - alpha[nu] * a.c.col(mu);
    }
    return f;
}

/// [A wedge A]_{mu nu} = [A_mu, A_nu].
inline Form2 bracket_square(const Form1& a) {
    Form2 f;
    for (int p = 0; p < 6; ++p) {
        const auto [mu, nu] = form_pairs[p];
        f.c.col(p) = bracket(a.c.col(mu), a.c.col(nu));
    }
    return f;
}

/// (iota_v F)_mu = v^nu F_{nu mu}.
inline Form1 interior(const Form2& f, const Point4& v) {
    Form1 out;
    for (int mu = 0; mu < 4; ++mu) {
        AlgValue s = AlgValue::Zero();
        for (int nu = 0; nu < 4; ++nu)
            if (nu != mu) s += v[nu] * f.at(nu, mu);
        out.c.col(mu) = s;
    }
    return out;
}

/// Contraction of a 1-form with a vector: v^mu A_mu.
inline AlgValue contract(const Form1& a, const Point4& v) { return a.c * v; }

inline Form1 adjoint(const Quat& u, const Form1& a) { return {adjoint_matrix(u) * a.c}; }
inline Form2 adjoint(const Quat& u, const Form2& f) { return {adjoint_matrix(u) * f.c}; }

/// Pullback of a 1-form by a map with Jacobian j: (j^T A).
inline Form1 pull_back(const Form1& a, const Mat4& j) { return {a.c * j}; }
/// Pullback of a 2-form: j^T F_a j per component.
inline Form2 pull_back(const Form2& f, const Mat4& j) {
    std::array<Mat4, 3> m;
    for (int a = 0; a < 3; ++a) m[a] = j.transpose() * f.component(a) * j;
    return Form2::from_components(m);
}

// ---------------------------------------------------------------------------
// Metric norms.

inline double metric_norm(const Form1& a, const MetricValue& g) {
    if (g.factor) return a.norm() / *g.factor;
    const Mat4 ginv = g.tensor.inverse();
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += a.c.row(k) * ginv * a.c.row(k).transpose();
    return std::sqrt(std::max(0.0, s));
}

inline double metric_norm(const Form2& f, const MetricValue& g) {
    if (g.factor) return f.norm() / (*g.factor * *g.factor);
    const Mat4 ginv = g.tensor.inverse();
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
        const Mat4 m = f.component(a);
        s += 0.5 * (ginv * m * ginv * m.transpose()).trace();
    }
    return std::sqrt(std::max(0.0, s));
}

inline double inner(const Form1& a, const Form1& b, const MetricValue& g) {
    if (g.factor) return (a.c.array() * b.c.array()).sum() / (*g.factor * *g.factor);
    const Mat4 ginv = g.tensor.inverse();
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += a.c.row(k) * ginv * b.c.row(k).transpose();
    return s;
}

// ---------------------------------------------------------------------------
// Hodge star and self-dual projection.

/// Flat Hodge star with eps_{0123} = 1.
inline Form2 hodge_star(const Form2& f) {
    Form2 s;
    s.c.col(0) = f.c.col(5);
    s.c.col(1) = -f.c.col(4);
    s.c.col(2) = f.c.col(3);
    s.c.col(3) = f.c.col(2);
    s.c.col(4) = -f.c.col(1);
    s.c.col(5) = f.c.col(0);
    return s;
}

/// Coefficients of the self-dual part: column a pairs with the unit self-dual form eta^a / sqrt(2).
using SelfDualCoeffs = Eigen::Matrix3d;

namespace detail {

/// sqrt(g) divided by det(g)^(1/8); the identity for conformally flat metrics.
inline Mat4 unimodular_frame(const MetricValue& g) {
    if (g.factor) {
        if (!(*g.factor > 0.0) || !std::isfinite(*g.factor)) throw DomainError("selfdual_part: degenerate metric");
        return Mat4::Identity();
    }
    Eigen::SelfAdjointEigenSolver<Mat4> es(0.5 * (g.tensor + g.tensor.transpose()));
    const Point4 ev = es.eigenvalues();
    if (!(ev.minCoeff() > 0.0) || !ev.allFinite()) throw DomainError("selfdual_part: metric is not positive definite");
    const double det8 = std::pow(ev.prod(), 0.125);
    const Point4 root = ev.cwiseSqrt() / det8;
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Self-dual component of f for the conformal class of g.
inline SelfDualCoeffs selfdual_part(const Form2& f, const MetricValue& g) {
    const Mat4 e = detail::unimodular_frame(g);
    const bool flat = g.factor.has_value();
    const Mat4 einv = flat ? Mat4::Identity() : Mat4(e.inverse());
    SelfDualCoeffs out;
    for (int k = 0; k < 3; ++k) {
        const Mat4 fk = flat ? f.component(k) : Mat4(einv * f.component(k) * einv);
        for (int a = 0; a < 3; ++a) {
            double s = 0.0;
            for (const auto& [i, j] : form_pairs) s += thooft_eta(a, i, j) * fk(i, j);
            out(k, a) = s / sqrt2;
        }
    }
    return out;
}

/// Self-dual part as a 2-form in coordinates, F^+ = (F + *_g F) / 2.
inline Form2 selfdual_form(const Form2& f, const MetricValue& g) {
    const SelfDualCoeffs c = selfdual_part(f, g);
    const Mat4 e = detail::unimodular_frame(g);
    std::array<Mat4, 3> m;
    for (int k = 0; k < 3; ++k) {
        Mat4 hat = Mat4::Zero();
        for (int a = 0; a < 3; ++a)
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) hat(i, j) += c(k, a) * thooft_eta(a, i, j) / sqrt2;
        m[k] = e * hat * e;
    }
    return Form2::from_components(m);
}

/// Pointwise |F^+|_g.
inline double selfdual_norm(const Form2& f, const MetricValue& g) {
    const double h2 = g.factor ? (*g.factor * *g.factor) : 1.0;
    if (g.factor) return selfdual_part(f, g).norm() / h2;
    return metric_norm(selfdual_form(f, g), g);
}

// ---------------------------------------------------------------------------
// Connections.

struct ConnectionField {
    std::function<Form1(const Point4&)> potential;
    /// Closed-form curvature; empty when only finite differences are available.
    std::function<Form2(const Point4&)> curvature;
    std::string provenance;

    bool has_curvature() const { return static_cast<bool>(curvature); }
    Form1 operator()(const Point4& x) const { return potential(x); }
};

struct CurvatureOptions {
    /// Step; 0 picks 1e-4 * max(1, |x|).
    double step = 0.0;
    bool use_analytic = true;
    bool richardson = false;
};

inline double default_step(const Point4& x) { return 1e-4 * std::max(1.0, x.norm()); }

namespace detail {

/// Central-difference Jacobian of the potential: column block mu is d_mu A.
inline std::array<Form1, 4> potential_derivative(const std::function<Form1(const Point4&)>& a, const Point4& x, double h) {
    std::array<Form1, 4> d;
    for (int mu = 0; mu < 4; ++mu) {
        Point4 e = Point4::Zero();
        e[mu] = h;
        d[mu] = (0.5 / h) * (a(x + e) - a(x - e));
    }
    return d;
}

inline std::array<Form1, 4> potential_derivative_richardson(const std::function<Form1(const Point4&)>& a, const Point4& x,
                                                            double h) {
    auto coarse = potential_derivative(a, x, h);
    auto fine = potential_derivative(a, x, 0.5 * h);
    for (int mu = 0; mu < 4; ++mu) fine[mu] = (4.0 / 3.0) * fine[mu] - (1.0 / 3.0) * coarse[mu];
    return fine;
}

}  // namespace detail

/// Curvature from A and its first derivatives (dA[mu] = d_mu A).
inline Form2 curvature_from_jet(const Form1& a, const std::array<Form1, 4>& da) {
    Form2 f;
    for (int p = 0; p < 6; ++p) {
        const auto [mu, nu] = form_pairs[p];
        f.c.col(p) = da[mu].c.col(nu) - da[nu].c.col(mu) + bracket(a.c.col(mu), a.c.col(nu));
    }
    return f;
}

inline Form2 curvature(const ConnectionField& field, const Point4& x, const CurvatureOptions& opt = {}) {
    if (opt.use_analytic && field.has_curvature()) return field.curvature(x);
    const double h = opt.step > 0.0 ? opt.step : default_step(x);
    const auto da = opt.richardson ? detail::potential_derivative_richardson(field.potential, x, h)
                                   : detail::potential_derivative(field.potential, x, h);
    return curvature_from_jet(field.potential(x), da);
}

/// Pointwise flat energy density |F|^2.
inline double energy_density(const ConnectionField& field, const Point4& x) { return curvature(field, x).norm2(); }

// ---------------------------------------------------------------------------
// Gauge transformations.

struct GaugeTransform {
    std::function<Quat(const Point4&)> value;
    /// Optional closed-form d_mu u.
    std::function<std::array<Quat, 4>(const Point4&)> derivative;
};

/// u^{-1} du at x as a Lie-valued 1-form.
inline Form1 maurer_cartan(const GaugeTransform& u, const Point4& x, double h) {
    const Quat ux = u.value(x);
    const Quat uinv = ux.conj();
    std::array<Quat, 4> du;
    if (u.derivative) {
        du = u.derivative(x);
    } else {
        for (int mu = 0; mu < 4; ++mu) {
            Point4 e = Point4::Zero();
            e[mu] = h;
            du[mu] = (0.5 / h) * (u.value(x + e) - u.value(x - e));
        }
    }
    Form1 out;
    for (int mu = 0; mu < 4; ++mu) out.c.col(mu) = from_quat(uinv * du[mu]);
    return out;
}

/// u^{-1} A u + u^{-1} du. A step of 0 picks the default relative step.
inline ConnectionField gauge_transform(const ConnectionField& a, const GaugeTransform& u, double step = 0.0) {
    ConnectionField out;
    out.provenance = "transformed";
    out.potential = [a, u, step](const Point4& x) {
        const Quat ux = u.value(x);
        const double h = step > 0.0 ? step : default_step(x);
        return adjoint(ux.conj(), a.potential(x)) + maurer_cartan(u, x, h);
    };
    if (a.has_curvature()) {
        out.curvature = [a, u](const Point4& x) { return adjoint(u.value(x).conj(), a.curvature(x)); };
    }
    return out;
}

/// f^*A for a conformal map f.
inline ConnectionField pullback_connection(const ConformalMap& f, const ConnectionField& a) {
    ConnectionField out;
    out.provenance = "pulled-back";
    const Mat4 j = f.jacobian();
    out.potential = [a, f, j](const Point4& x) { return pull_back(a.potential(f.forward(x)), j); };
    if (a.has_curvature()) {
        out.curvature = [a, f, j](const Point4& x) { return pull_back(a.curvature(f.forward(x)), j); };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Radial gauge by transport along rays.

namespace detail {

struct RayTransport {
    /// Transport at the 2m+1 equally spaced nodes t = k / (2m).
    std::vector<Quat> sigma;
};

/// Solves d sigma/dt = -a(t) sigma with RK4 on [0, 1], a(t) = (x - c)^mu A_mu(c + t (x - c)).
inline RayTransport transport_along_ray(const ConnectionField& field, const Point4& c, const Point4& x, int steps) {
    const Point4 d = x - c;
    const int m = 2 * steps;
    const double h = 1.0 / m;
    auto rate = [&](double t) { return to_quat(contract(field.potential(c + t * d), d)); };
    RayTransport out;
    out.sigma.reserve(m + 1);
    Quat s{};
    out.sigma.push_back(s);
    Quat a0;
    try {
        a0 = rate(0.0);
    } catch (const DomainError&) {
        // field singular at the centre: one-sided limit
        a0 = rate(1e-6 * h);
    }
    for (int k = 0; k < m; ++k) {
        const double t = k * h;
        const Quat am = rate(t + 0.5 * h);
        const Quat a1 = rate(t + h);
        const Quat k1 = -1.0 * (a0 * s);
        const Quat k2 = -1.0 * (am * (s + (0.5 * h) * k1));
        const Quat k3 = -1.0 * (am * (s + (0.5 * h) * k2));
        const Quat k4 = -1.0 * (a1 * (s + h * k3));
        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (std::abs(s.norm() - 1.0) > 1e-6) throw NumericalError("radial_gauge: transport left SU(2) (drift > 1e-6)");
        s = s.normalized();
        out.sigma.push_back(s);
        a0 = a1;
    }
    return out;
}

}  // namespace detail

/// Connection in radial gauge about `centre`: iota_{x - centre} A = 0. `ode_steps` is per unit ray length.
/// The potential is rebuilt from the transported curvature, A(x) = int_0^1 t iota_{x-c} F(c + t(x-c)) dt,
/// so it vanishes at the centre even when the input is singular there.
inline ConnectionField radial_gauge(const ConnectionField& field, const Point4& centre, int ode_steps = 64) {
    if (ode_steps < 1) throw ConfigError("radial_gauge: ode_steps must be positive");
    auto steps_for = [ode_steps](double len) {
        const double s = std::ceil(ode_steps * len);
        if (!std::isfinite(s) || s > 1e7) throw NumericalError("radial_gauge: step count overflow");
        return std::max(4, int(s));
    };
    ConnectionField out;
    out.provenance = "transformed";
    out.potential = [field, centre, steps_for](const Point4& x) {
        const Point4 d = x - centre;
        const double len = d.norm();
        if (len < 1e-300) return Form1{};
        const int n = steps_for(len);
        const auto tr = detail::transport_along_ray(field, centre, x, n);
        const int m = 2 * n;
        // Simpson in t of t Ad(sigma^{-1}) iota_d F at c + t d
        Form1 acc;
        for (int k = 0; k <= m; ++k) {
            const double t = double(k) / m;
            if (t == 0.0) continue;
            const double w = (k == 0 || k == m) ? 1.0 : (k % 2 ? 4.0 : 2.0);
            const Form2 f = curvature(field, centre + t * d);
            acc += (w * t) * adjoint(tr.sigma[k].conj(), interior(f, d));
        }
        return (1.0 / (3.0 * m)) * acc;
    };
    out.curvature = [field, centre, steps_for](const Point4& x) {
        const Point4 d = x - centre;
        const double len = d.norm();
        const Form2 f = curvature(field, x);
        if (len < 1e-300) return f;
        const auto tr = detail::transport_along_ray(field, centre, x, steps_for(len));
        return adjoint(tr.sigma.back().conj(), f);
    };
    return out;
}

/// iota_{x - centre} F_A at x; A must be in radial gauge about `centre`.
/// `curvature_bound` is sup|F| on the region of interest, used for the gauge check.
inline Form1 lie_derivative_radial(const ConnectionField& field, const Point4& x, const Point4& centre = Point4::Zero(),
                                   double curvature_bound = 1.0) {
    const Point4 r = x - centre;
    const AlgValue radial = contract(field.potential(x), r);
    if (radial.norm() > 1e-6 * r.norm() * curvature_bound)
        throw DomainError("lie_derivative_radial: connection is not in radial gauge about the centre");
    return interior(curvature(field, x), r);
}

}  // namespace bubbletree
