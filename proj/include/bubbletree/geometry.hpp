#pragma once
// Charts on S^4, conformal maps, metric fields and product quadrature.

#include <Eigen/Dense>

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace bubbletree {

using Point4 = Eigen::Vector4d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double pi = std::numbers::pi;
/// Volume of the unit three-sphere.
inline constexpr double s3_volume = 2.0 * pi * pi;
/// Energy of a charge-one instanton.
inline constexpr double unit_charge = 8.0 * pi * pi;

struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Quaternions. A point (x0,x1,x2,x3) is read as x0 + x1 i + x2 j + x3 k.

struct Quat {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

    static Quat from_point(const Point4& p) { return {p[0], p[1], p[2], p[3]}; }
    Point4 point() const { return {w, x, y, z}; }
    double norm2() const { return w * w + x * x + y * y + z * z; }
    double norm() const { return std::sqrt(norm2()); }
    Quat conj() const { return {w, -x, -y, -z}; }
    Quat inverse() const {
        const double n2 = norm2();
        return {w / n2, -x / n2, -y / n2, -z / n2};
    }
    Quat normalized() const {
        const double n = norm();
        return {w / n, x / n, y / n, z / n};
    }
    friend Quat operator*(const Quat& a, const Quat& b) {
        return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
                a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
                a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
                a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
    }
    friend Quat operator+(const Quat& a, const Quat& b) { return {a.w + b.w, a.x + b.x, a.y + b.y, a.z + b.z}; }
    friend Quat operator-(const Quat& a, const Quat& b) { return {a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z}; }
    friend Quat operator*(double s, const Quat& a) { return {s * a.w, s * a.x, s * a.y, s * a.z}; }
};

/// Unit quaternion exp(v) for an imaginary quaternion v = (0, v).
inline Quat quat_exp(const Eigen::Vector3d& v) {
    const double t = v.norm();
    if (t < 1e-300) return {};
    const double s = std::sin(t) / t;
    return {std::cos(t), s * v[0], s * v[1], s * v[2]};
}

// ---------------------------------------------------------------------------
// Round metric and chart transition.

/// Squared conformal factor of the round metric in the north chart.
inline double round_factor2(const Point4& x) {
    const double d = 1.0 + x.squaredNorm();
    return 4.0 / (d * d);
}

/// Round-metric conformal factor h with g = h^2 delta.
inline double round_factor(const Point4& x) { return 2.0 / (1.0 + x.squaredNorm()); }

/// South-chart coordinate of the point with north-chart coordinate x.
inline Point4 chart_transition(const Point4& x) {
    const double n2 = x.squaredNorm();
    if (n2 == 0.0) throw DomainError("chart_transition: the origin has no south-chart image");
    return Quat::from_point(x).conj().point() / n2;
}

/// Metric tensor at a point; `factor` is set when the tensor is factor^2 times delta.
struct MetricValue {
    Mat4 tensor = Mat4::Identity();
    std::optional<double> factor = 1.0;

    static MetricValue conformal(double h) { return {h * h * Mat4::Identity(), h}; }
    static MetricValue general(const Mat4& g) { return {g, std::nullopt}; }
    double volume_density() const {
        if (factor) return std::pow(*factor, 4);
        return std::sqrt(tensor.determinant());
    }
};

using MetricField = std::function<MetricValue(const Point4&)>;

inline MetricValue round_metric(const Point4& x) { return MetricValue::conformal(round_factor(x)); }

inline MetricField flat_metric_field() {
    return [](const Point4&) { return MetricValue{}; };
}
inline MetricField round_metric_field() { return round_metric; }
/// Metric factor(x)^2 * delta.
inline MetricField conformal_metric_field(std::function<double(const Point4&)> factor) {
    return [f = std::move(factor)](const Point4& x) { return MetricValue::conformal(f(x)); };
}

// ---------------------------------------------------------------------------
// Conformal maps x -> R (x - q) / lambda.

struct ConformalMap {
    double scale = 1.0;
    Point4 shift = Point4::Zero();
    Mat4 rotation = Mat4::Identity();

    Point4 forward(const Point4& x) const { return rotation * (x - shift) / scale; }
    Point4 inverse(const Point4& y) const { return shift + scale * (rotation.transpose() * y); }
    Mat4 jacobian() const { return rotation / scale; }

    ConformalMap inverted() const {
        return {1.0 / scale, -(rotation * shift) / scale, rotation.transpose()};
    }
    /// The composite `next` after `*this`.
    ConformalMap then(const ConformalMap& next) const {
        return {scale * next.scale, shift + scale * (rotation.transpose() * next.shift), next.rotation * rotation};
    }
    static ConformalMap dilation(double lambda) { return {lambda, Point4::Zero(), Mat4::Identity()}; }
    static ConformalMap translation(const Point4& q) { return {1.0, q, Mat4::Identity()}; }
};

struct MappedPoint {
    Point4 point;
    Mat4 jacobian;
};

inline MappedPoint conformal_eval(const ConformalMap& f, const Point4& x) { return {f.forward(x), f.jacobian()}; }

// ---------------------------------------------------------------------------
// Threads and reductions.

inline int& thread_setting() {
    static int n = [] {
        if (const char* env = std::getenv("BUBBLETREE_THREADS")) {
            const int v = std::atoi(env);
            if (v > 0) return v;
        }
        return int(std::max(1u, std::thread::hardware_concurrency()));
    }();
    return n;
}
inline void set_thread_count(int n) { thread_setting() = std::max(1, n); }

/// Calls fn(i) for i in [0, n), split over worker threads in contiguous blocks.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(thread_setting()), n / 256 + 1);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    pool.reserve(workers);
    const std::size_t block = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * block, hi = std::min(n, lo + block);
        pool.emplace_back([lo, hi, w, &fn, &errors] {
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

/// Pairwise summation; the split points depend only on the length.
inline double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

// ---------------------------------------------------------------------------
// Quadrature.

struct GaussRule {
    std::vector<double> nodes, weights;
};

/// Gauss-Legendre rule on [-1, 1].
inline GaussRule gauss_legendre(int n) {
    GaussRule r;
    r.nodes.resize(n);
    r.weights.resize(n);
    for (int i = 0; i < n; ++i) {
        double x = std::cos(pi * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= n; ++k) {
                const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n * (x * p1 - p0) / (x * x - 1.0);
            const double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16) break;
        }
        r.nodes[n - 1 - i] = x;
        r.weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    return r;
}

struct SphereNode {
    Point4 direction;
    double weight;
};

/// Product rule on S^3 in Hopf coordinates: Gauss in sin^2 of the Hopf angle,
/// equispaced in the two circle angles. Weights sum to 2 pi^2.
inline std::vector<SphereNode> s3_rule(int order) {
    const GaussRule g = gauss_legendre(order);
    const int m = 2 * order;
    const double dphi = 2.0 * pi / m;
    std::vector<SphereNode> out;
    out.reserve(static_cast<std::size_t>(order) * m * m);
    for (int a = 0; a < order; ++a) {
        const double u = 0.5 * (g.nodes[a] + 1.0);
        const double wu = 0.5 * g.weights[a];
        const double c = std::sqrt(1.0 - u), s = std::sqrt(u);
        for (int i = 0; i < m; ++i) {
            const double p1 = (i + 0.5) * dphi;
            for (int j = 0; j < m; ++j) {
                const double p2 = (j + 0.25) * dphi;
                out.push_back({Point4(c * std::cos(p1), c * std::sin(p1), s * std::cos(p2), s * std::sin(p2)),
                               0.5 * wu * dphi * dphi});
            }
        }
    }
    return out;
}

enum class Region { ball, annulus, full_chart };

inline std::string to_string(Region r) {
    switch (r) {
        case Region::ball: return "ball";
        case Region::annulus: return "annulus";
        case Region::full_chart: return "full";
    }
    return "ball";
}
inline Region region_from_string(const std::string& s) {
    if (s == "ball") return Region::ball;
    if (s == "annulus") return Region::annulus;
    if (s == "full" || s == "full_chart") return Region::full_chart;
    throw ConfigError("unknown grid region '" + s + "'");
}

struct GridSpec {
    double r_min = 0.0;
    double r_max = 1.0;
    int panels = 16;
    int gauss_order = 8;
    int s3_order = 6;
    Region region = Region::ball;
    /// With r_min = 0 the log panels start at core_fraction * r_max; one extra panel covers the core.
    double core_fraction = 1e-5;
};

/// Full-chart grid used for unit-scale instanton integrals; place it at the instanton scale.
inline GridSpec default_grid_spec() { return {0.0, 20.0, 24, 8, 4, Region::full_chart}; }

inline void to_json(nlohmann::json& j, const GridSpec& g) {
    j = nlohmann::json{{"r_min", g.r_min},           {"r_max", g.r_max},
                       {"panels", g.panels},         {"gauss_order", g.gauss_order},
                       {"s3_order", g.s3_order},     {"region", to_string(g.region)},
                       {"core_fraction", g.core_fraction}};
}

inline void from_json(const nlohmann::json& j, GridSpec& g) {
    if (!j.is_object()) throw ConfigError("grid spec must be a JSON object");
    g = GridSpec{};
    try {
        g.r_min = j.value("r_min", g.r_min);
        g.r_max = j.value("r_max", g.r_max);
        g.panels = j.value("panels", g.panels);
        g.gauss_order = j.value("gauss_order", g.gauss_order);
        g.s3_order = j.value("s3_order", g.s3_order);
        g.core_fraction = j.value("core_fraction", g.core_fraction);
        if (j.contains("region")) g.region = region_from_string(j.at("region").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("grid spec: ") + e.what());
    }
}

struct QuadratureGrid {
    std::vector<double> breakpoints;
    int gauss_order = 0;
    std::vector<SphereNode> sphere;
    int s3_order = 0;
    std::vector<Point4> nodes;
    std::vector<double> weights;
    /// Radius of each node from the grid centre, in unscaled units.
    std::vector<double> radii;
    Region region = Region::ball;
    Point4 centre = Point4::Zero();
    double scale = 1.0;

    std::size_t size() const { return nodes.size(); }
};

inline QuadratureGrid build_grid(const GridSpec& spec) {
    if (!(spec.r_min >= 0.0) || !(spec.r_max > spec.r_min) || !std::isfinite(spec.r_max))
        throw ConfigError("grid: need 0 <= r_min < r_max");
    if (spec.gauss_order < 2 || spec.s3_order < 2 || spec.panels < 1) throw ConfigError("grid: orders must be >= 2");
    if (spec.region == Region::ball && spec.r_min != 0.0) throw ConfigError("grid: a ball starts at r_min = 0");
    if (spec.region == Region::annulus && spec.r_min == 0.0) throw ConfigError("grid: an annulus needs r_min > 0");

    QuadratureGrid g;
    g.gauss_order = spec.gauss_order;
    g.region = spec.region;
    g.sphere = s3_rule(spec.s3_order);
    g.s3_order = spec.s3_order;

    double lo = spec.r_min;
    if (lo == 0.0) {
        lo = spec.r_max * spec.core_fraction;
        g.breakpoints.push_back(0.0);
    }
    for (int i = 0; i <= spec.panels; ++i) g.breakpoints.push_back(lo * std::pow(spec.r_max / lo, double(i) / spec.panels));

    const GaussRule gl = gauss_legendre(spec.gauss_order);
    std::vector<std::pair<double, double>> radial;  // (radius, weight including r^3)
    for (std::size_t p = 0; p + 1 < g.breakpoints.size(); ++p) {
        const double a = g.breakpoints[p], b = g.breakpoints[p + 1];
        for (int i = 0; i < spec.gauss_order; ++i) {
            const double r = 0.5 * (a + b) + 0.5 * (b - a) * gl.nodes[i];
            radial.emplace_back(r, 0.5 * (b - a) * gl.weights[i] * r * r * r);
        }
    }
    if (spec.region == Region::full_chart) {
        // r = r_max / s on s in (0, 1]
        for (int i = 0; i < spec.gauss_order; ++i) {
            const double s = 0.5 + 0.5 * gl.nodes[i];
            const double r = spec.r_max / s;
            radial.emplace_back(r, 0.5 * gl.weights[i] * (spec.r_max / (s * s)) * r * r * r);
        }
    }
    g.nodes.reserve(radial.size() * g.sphere.size());
    g.weights.reserve(radial.size() * g.sphere.size());
    g.radii.reserve(radial.size() * g.sphere.size());
    for (const auto& [r, wr] : radial) {
        for (const auto& s : g.sphere) {
            g.nodes.push_back(r * s.direction);
            g.weights.push_back(wr * s.weight);
            g.radii.push_back(r);
        }
    }
    return g;
}

/// The grid moved to `centre` and dilated by `scale` (radii stay in units of the scale).
inline QuadratureGrid placed(QuadratureGrid g, const Point4& centre, double scale = 1.0) {
    const double ratio = scale / g.scale;
    const double w = std::pow(ratio, 4);
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        g.nodes[i] = centre + ratio * (g.nodes[i] - g.centre);
        g.weights[i] *= w;
    }
    g.centre = centre;
    g.scale = scale;
    return g;
}

/// Evaluates f at every node (possibly in parallel) and returns the values.
template <class F>
std::vector<double> sample(const QuadratureGrid& g, F&& f) {
    std::vector<double> v(g.size());
    parallel_for(g.size(), [&](std::size_t i) { v[i] = f(g.nodes[i]); });
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i]))
            throw NumericalError("non-finite integrand at grid node " + std::to_string(i));
    }
    return v;
}

/// Integral of f against the flat measure of the grid.
template <class F>
double integrate(const QuadratureGrid& g, F&& f) {
    std::vector<double> v = sample(g, f);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= g.weights[i];
    return pairwise_sum(v);
}

/// Pointwise metric norm of a scalar.
inline double metric_norm(double v, const MetricValue&) { return std::abs(v); }

/// (integral of |field|_g^p dV_g)^(1/p).
template <class Field>
double lp_norm(Field&& field, double p, const MetricField& metric, const QuadratureGrid& grid) {
    if (!(p >= 1.0)) throw ConfigError("lp_norm: p must be >= 1");
    const double total = integrate(grid, [&](const Point4& x) {
        const MetricValue g = metric(x);
        return std::pow(metric_norm(field(x), g), p) * g.volume_density();
    });
    return std::pow(total, 1.0 / p);
}

}  // namespace bubbletree
