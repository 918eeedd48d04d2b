#pragma once

#include "bubbletree/gauge.hpp"

#include "json.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

namespace bubbletree {

using DensityFn = std::function<double(const Point4&)>;

struct MomentReport {
    double total_mass = 0.0;
    /// total_mass / 8 pi^2 before rounding.
    double charge_raw = 0.0;
    int charge = 0;
    Point4 centre = Point4::Zero();
    double scale = 0.0;
    /// (R, mass outside the ball of radius R * scale about the centre).
    std::vector<std::pair<double, double>> tails;
    /// Mass below threshold: centre and scale follow the flat convention (0, 0).
    bool flat = false;
    /// charge_raw is not within 0.05 of an integer.
    bool non_integer = false;
};

inline void to_json(nlohmann::json& j, const MomentReport& r) {
    nlohmann::json tails = nlohmann::json::array();
    for (const auto& [radius, mass] : r.tails) tails.push_back({{"R", radius}, {"tail", mass}});
    j = nlohmann::json{{"mass", r.total_mass},
                       {"charge_raw", r.charge_raw},
                       {"charge", r.charge},
                       {"centre", {r.centre[0], r.centre[1], r.centre[2], r.centre[3]}},
                       {"scale", r.scale},
                       {"tails", tails},
                       {"flat", r.flat},
                       {"non_integer", r.non_integer}};
}

inline constexpr double flat_mass_threshold = 1e-6;

/// Flat-chart energy density |F_A|^2.
inline DensityFn curvature_density(const ConnectionField& a) {
    return [a](const Point4& x) { return energy_density(a, x); };
}

/// Mass, centre and scale of a density on a grid, optionally restricted to B(ball_centre, ball_radius).
inline MomentReport density_moments(const DensityFn& density, const QuadratureGrid& grid,
                                    std::optional<std::pair<Point4, double>> ball = std::nullopt) {
    std::vector<double> d(grid.size());
    parallel_for(grid.size(), [&](std::size_t i) {
        const Point4& x = grid.nodes[i];
        if (ball && (x - ball->first).norm() > ball->second) {
            d[i] = 0.0;
            return;
        }
        d[i] = density(x) * grid.weights[i];
    });
    for (std::size_t i = 0; i < d.size(); ++i)
        if (!std::isfinite(d[i])) throw NumericalError("non-finite density at grid node " + std::to_string(i));

    MomentReport r;
    r.total_mass = pairwise_sum(d);
    r.charge_raw = r.total_mass / unit_charge;
    r.charge = int(std::lround(r.charge_raw));
    r.non_integer = std::abs(r.charge_raw - r.charge) > 0.05;
    if (std::abs(r.total_mass) < flat_mass_threshold) {
        r.flat = true;
        return r;
    }
    // normalised by the measured mass, which is 8 pi^2 k up to quadrature error;
    // the rounded charge would break translation equivariance by (mass / 8 pi^2 k - 1) |x|
    const double norm = r.total_mass;
    std::vector<double> tmp(d.size());
    for (int mu = 0; mu < 4; ++mu) {
        for (std::size_t i = 0; i < d.size(); ++i) tmp[i] = d[i] * grid.nodes[i][mu];
        r.centre[mu] = pairwise_sum(tmp) / norm;
    }
    for (std::size_t i = 0; i < d.size(); ++i) tmp[i] = d[i] * (grid.nodes[i] - r.centre).squaredNorm();
    r.scale = std::sqrt(std::max(0.0, pairwise_sum(tmp) / norm));
    return r;
}

/// Mass outside B(centre, R * scale), on its own grid from R * scale outwards.
inline double density_tail(const DensityFn& density, double radius_factor, const MomentReport& report,
                           const QuadratureGrid& like) {
    if (!(radius_factor >= 1.0)) throw ConfigError("tchebychev_tail: R must be >= 1");
    if (report.flat || report.scale <= 0.0) return 0.0;
    const double r0 = radius_factor * report.scale;
    GridSpec spec{r0, 64.0 * r0, 24, std::max(like.gauss_order, 6), std::max(like.s3_order, 4), Region::full_chart};
    const QuadratureGrid g = placed(build_grid(spec), report.centre, 1.0);
    return integrate(g, density);
}

inline double tchebychev_tail(const ConnectionField& a, double radius_factor, const MomentReport& report,
                              const QuadratureGrid& grid) {
    return density_tail(curvature_density(a), radius_factor, report, grid);
}

inline constexpr std::array<double, 3> standard_tail_radii{2.0, 4.0, 8.0};

/// Centre[A] and Scale[A] from the flat-chart curvature density, with tails at R = 2, 4, 8.
inline MomentReport centre_scale(const ConnectionField& a, const QuadratureGrid& grid) {
    const DensityFn density = curvature_density(a);
    MomentReport r = density_moments(density, grid);
    if (!r.flat)
        for (double radius : standard_tail_radii) r.tails.emplace_back(radius, density_tail(density, radius, r, grid));
    return r;
}

/// Moments of |F(A)|^2 - |F(A0)|^2 on B(x, r0).
inline MomentReport centre_scale_ball(const ConnectionField& a, const ConnectionField& background, const Point4& x,
                                      double r0, const QuadratureGrid& grid) {
    if (!(r0 > 0.0)) throw ConfigError("centre_scale_ball: r0 must be positive");
    const DensityFn density = [&](const Point4& y) { return energy_density(a, y) - energy_density(background, y); };
    MomentReport r = density_moments(density, grid, std::make_pair(x, r0));
    if (r.total_mass < -1e-3 * unit_charge)
        throw NumericalError("centre_scale_ball: background carries more energy than the connection (inconsistent background)");
    return r;
}

struct Normalized {
    ConnectionField field;
    /// f with f(x) = (x - centre) / scale; the field is (f^{-1})^* A.
    ConformalMap map;
};

/// Pulls A back so that its centre is 0 and its scale is 1.
inline Normalized centre_normalize(const ConnectionField& a, const MomentReport& report) {
    if (report.flat || !(report.scale > 0.0)) throw DomainError("centre_normalize: zero scale, nothing to normalize");
    ConformalMap f;
    f.scale = report.scale;
    f.shift = report.centre;
    ConnectionField out = pullback_connection(f.inverted(), a);
    out.provenance = "pulled-back";
    return {std::move(out), f};
}

}  // namespace bubbletree
