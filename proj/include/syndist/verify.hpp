#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "losses.hpp"
#include "masking.hpp"
#include "optim.hpp"
#include "robust.hpp"
#include "synth.hpp"
#include "warp.hpp"

namespace syndist {

struct CheckResult {
    std::string name;
    double error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct VerifyOptions {
    /// Tolerance of the finite-difference checks, on the error relative to
    /// max(1, |analytic|, |numeric|).
    double fd_tol = 1e-5;
    /// Analytic d rho / d xi under test; tests swap in a faulty version.
    std::function<double(double, double, double)> rho_dxi = [](double x, double a, double c) {
        return robust_rho_dxi(x, a, c);
    };
};

namespace detail {

inline double fd_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

template <typename F>
double central_difference(F&& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline CheckResult make_check(std::string name, double error, double tol) {
    return {std::move(name), error, tol, std::isfinite(error) && error <= tol};
}

inline const std::vector<double>& robust_alpha_grid() {
    static const std::vector<double> grid{-4.0, -1.0, -0.3, 0.0, 0.5, 1.0, 1.7, 2.0, 3.0};
    return grid;
}

inline const std::vector<double>& robust_x_grid() {
    static const std::vector<double> grid{-3.0, -0.7, -0.05, 0.02, 0.4, 2.5};
    return grid;
}

inline CheckResult check_rho_dxi(const VerifyOptions& opt) {
    double err = 0.0;
    for (double c : {0.1, 1.0})
        for (double a : robust_alpha_grid())
            for (double x : robust_x_grid()) {
                const double fd = central_difference([&](double v) { return robust_rho(v, a, c); }, x, 1e-6);
                err = std::max(err, fd_error(opt.rho_dxi(x, a, c), fd));
            }
    return make_check("fd: robust rho d/dx", err, opt.fd_tol);
}

inline CheckResult check_rho_dalpha(const VerifyOptions& opt) {
    double err = 0.0;
    // alpha = 0 and 2 sit inside the singular band, where the derivative
    // comes from the series; difference around points just outside it
    for (double c : {0.1, 1.0})
        for (double a : {-4.0, -1.0, -0.3, 0.01, 0.5, 1.0, 1.7, 1.99, 3.0})
            for (double x : robust_x_grid()) {
                const double fd = central_difference([&](double v) { return robust_rho(x, v, c); }, a, 1e-6);
                err = std::max(err, fd_error(robust_rho_dalpha(x, a, c), fd));
            }
    return make_check("fd: robust rho d/dalpha", err, opt.fd_tol);
}

inline CheckResult check_nll_gradient(const VerifyOptions& opt) {
    double err = 0.0;
    for (double a : {0.05, 0.5, 1.0, 1.5, 1.9})
        for (double x : robust_x_grid()) {
            const RobustParams p{a, 0.5, true};
            const auto g = robust_nll_gradient(x, p);
            const double fa = central_difference(
                [&](double v) { return robust_nll(x, RobustParams{v, 0.5, true}); }, a, 1e-5);
            const double fc = central_difference(
                [&](double v) { return robust_nll(x, RobustParams{a, v, true}); }, 0.5, 1e-6);
            err = std::max({err, fd_error(g.d_alpha, fa), fd_error(g.d_c, fc)});
        }
    return make_check("fd: robust nll d/dalpha, d/dc", err, opt.fd_tol);
}

inline CheckResult check_robust_special_values() {
    double err = 0.0;
    for (double x : robust_x_grid()) {
        const double c = 0.7, z = x / c;
        err = std::max(err, std::abs(robust_rho(x, 2.0, c) - 0.5 * z * z));
        err = std::max(err, std::abs(robust_rho(x, 0.0, c) - std::log1p(0.5 * z * z)));
        err = std::max(err, std::abs(robust_rho(x, 1.0, c) - (std::sqrt(z * z + 1.0) - 1.0)));
        err = std::max(err, std::abs(robust_rho(x, -2.0, c) - 2.0 * z * z / (z * z + 4.0)));
    }
    err = std::max(err, std::abs(log_partition(2.0) - 0.5 * std::log(2.0 * std::numbers::pi)));
    return make_check("robust special values", err, 1e-6);
}

/// Small textured plane seen by a pinhole camera.
inline GroundTruth tiny_scene(int size, std::uint64_t seed) {
    SceneSpec s;
    s.seed = seed;
    const double f = size;
    const double c = (size - 1) / 2.0;
    s.camera = CameraModel::pinhole(f, f, c, c, size, size);
    s.planes.push_back({Vec3(0.1, 0.05, 1.0).normalized(), 10.0, classes::kBuilding, 0, 1.0});
    s.ego_twist << 0.0, 0.0, 0.0, -0.3, 0.0, 0.0;
    return make_scene(s);
}

inline CheckResult check_warp_jacobians(const VerifyOptions& opt) {
    double err = 0.0;
    const Vec6 twist = (Vec6() << 0.02, -0.03, 0.01, -0.3, 0.05, 0.1).finished();
    const Pose pose = se3_exp(twist);
    const PoseJacobian jac = se3_exp_jacobian(twist);
    const CameraModel cams[2] = {CameraModel::pinhole(8.0, 8.0, 3.5, 3.5, 8, 8),
                                 CameraModel::fisheye({4.0, 0.0, -0.2, 0.0}, 3.5, 3.5, 8, 8)};
    for (const auto& cam : cams) {
        DistanceMap d(8, 8);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = 5.0 + 0.1 * static_cast<double>(i % 7);
        const WarpField f = compute_warp_field(d, pose, cam, &jac);
        for (std::size_t i = 0; i < d.size(); i += 5) {
            if (!f.valid[i]) continue;
            for (int k = 0; k < 2; ++k) {
                const double fd = central_difference(
                    [&](double v) {
                        DistanceMap dd = d;
                        dd[i] = v;
                        return compute_warp_field(dd, pose, cam).pixel[i](k);
                    },
                    d[i], 1e-6);
                err = std::max(err, fd_error(f.d_pixel_d_distance[i](k), fd));
                for (int j = 0; j < 6; ++j) {
                    const double ft = central_difference(
                        [&](double v) {
                            Vec6 t = twist;
                            t(j) = v;
                            return compute_warp_field(d, se3_exp(t), cam).pixel[i](k);
                        },
                        twist(j), 1e-6);
                    err = std::max(err, fd_error(f.d_pixel_d_twist[i](k, j), ft));
                }
            }
        }
    }
    return make_check("fd: warp pixel d/distance, d/twist", err, opt.fd_tol);
}

inline CheckResult check_photometric_gradient(const VerifyOptions& opt) {
    const GroundTruth gt = tiny_scene(8, 3);
    const LossConfig cfg;
    const ValidityMask valid(8, 8, 1, 1);
    ScalarMap up(8, 8);
    for (std::size_t i = 0; i < up.size(); ++i) up[i] = 0.5 + 0.05 * static_cast<double>(i % 9);
    double err = 0.0;
    for (const RobustParams& p : {RobustParams{1.3, 0.05, true}, RobustParams{0.6, 0.05, false}}) {
        auto loss_at = [&](const Image& recon, const RobustParams& q) {
            const ScalarMap m = photometric_loss(gt.image_target, recon, cfg, q, valid);
            double s = 0.0;
            for (std::size_t i = 0; i < m.size(); ++i) s += up[i] * m[i];
            return s;
        };
        const auto g = photometric_backward(gt.image_target, gt.image_prev, cfg, p, valid, up);
        for (std::size_t i = 0; i < g.d_recon.size(); i += 3) {
            const double fd = central_difference(
                [&](double v) {
                    Image r = gt.image_prev;
                    r[i] = v;
                    return loss_at(r, p);
                },
                gt.image_prev[i], 1e-6);
            err = std::max(err, fd_error(g.d_recon[i], fd));
        }
        const double fa = central_difference(
            [&](double v) { return loss_at(gt.image_prev, RobustParams{v, p.c, p.adaptive}); }, p.alpha, 1e-6);
        err = std::max(err, fd_error(g.d_alpha, fa));
    }
    return make_check("fd: photometric loss backward", err, opt.fd_tol);
}

/// Full refinement objective on an 8x8 problem with every term active.
inline CheckResult check_objective_gradient(const VerifyOptions& opt) {
    const GroundTruth gt = tiny_scene(8, 5);
    DistanceMap init = gt.distance_target;
    for (std::size_t i = 0; i < init.size(); ++i) init[i] *= 1.3 + 0.02 * static_cast<double>(i % 5);
    const CameraModel cam = CameraModel::pinhole(8.0, 8.0, 3.5, 3.5, 8, 8);
    RefineProblem p = problem_from_ground_truth(gt, cam, init);
    p.toggles.auto_mask = false;
    MaskStatistics stats;
    const DistanceObjective obj(p, refine_dynamic_masks(p, stats));
    RefineState s = initial_state(p, obj.activation());
    s.alpha_raw = RobustParams::raw_from_alpha(1.4);
    for (std::size_t i = 0; i < s.neighbour_act[1].size(); ++i) s.neighbour_act[1][i] += 0.01 * static_cast<double>(i % 3);
    ObjectiveGradient g;
    obj.evaluate(s, Wrt::Distance | Wrt::Neighbours | Wrt::Alpha, &g);
    const double h = 1e-6;
    double err = 0.0;
    auto total = [&](const RefineState& st) { return obj.evaluate(st).total; };
    for (std::size_t i = 9; i < s.target_act.size(); i += 7) {
        RefineState a = s, b = s;
        a.target_act[i] += h;
        b.target_act[i] -= h;
        err = std::max(err, fd_error(g.d_target_act[i], (total(a) - total(b)) / (2.0 * h)));
        a = s;
        b = s;
        a.neighbour_act[0][i] += h;
        b.neighbour_act[0][i] -= h;
        err = std::max(err, fd_error(g.d_neighbour_act[0][i], (total(a) - total(b)) / (2.0 * h)));
    }
    RefineState a = s, b = s;
    a.alpha_raw += h;
    b.alpha_raw -= h;
    err = std::max(err, fd_error(g.d_alpha_raw, (total(a) - total(b)) / (2.0 * h)));
    return make_check("fd: refinement objective", err, opt.fd_tol);
}

/// dynamic_mask against a per-pixel re-evaluation of its membership rule
/// on random 16x16 label maps.
inline CheckResult check_dynamic_mask_brute_force() {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> label(1, 5);
    const std::set<int> dc{3, 4};
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
        SegMask t(16, 16), w(16, 16);
        for (std::size_t i = 0; i < t.size(); ++i) {
            t[i] = label(rng);
            w[i] = label(rng);
        }
        const DynamicMask mu = dynamic_mask(t, w, dc);
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                const bool t_dyn = t(y, x) == 3 || t(y, x) == 4;
                const bool w_dyn = w(y, x) == 3 || w(y, x) == 4;
                mismatches += (mu(y, x) != 0) != (!t_dyn && !w_dyn);
            }
    }
    return make_check("dynamic mask brute force", static_cast<double>(mismatches), 0.0);
}

/// Warping a source with the identity pose reproduces it exactly.
inline CheckResult check_warp_identity() {
    double err = 0.0;
    const GroundTruth gt = tiny_scene(16, 7);
    const CameraModel cams[2] = {CameraModel::pinhole(16.0, 16.0, 7.5, 7.5, 16, 16),
                                 CameraModel::fisheye({10.0, 0.0, -0.5, 0.0}, 7.5, 7.5, 16, 16)};
    for (const auto& cam : cams) {
        const WarpField f = compute_warp_field(gt.distance_target, Pose::identity(), cam);
        const ViewSynthesis v = sample_field(gt.image_prev, f, SampleMode::Bilinear, false);
        for (std::size_t i = 0; i < v.image.size(); ++i) {
            if (!v.valid[i]) {
                err = std::max(err, 1.0);
                continue;
            }
            err = std::max(err, std::abs(v.image[i] - gt.image_prev[i]));
        }
    }
    return make_check("warp identity", err, 1e-9);
}

}  // namespace detail

inline std::vector<CheckResult> run_verification(const VerifyOptions& opt = {}) {
    return {detail::check_rho_dxi(opt),
            detail::check_rho_dalpha(opt),
            detail::check_nll_gradient(opt),
            detail::check_robust_special_values(),
            detail::check_warp_jacobians(opt),
            detail::check_photometric_gradient(opt),
            detail::check_objective_gradient(opt),
            detail::check_dynamic_mask_brute_force(),
            detail::check_warp_identity()};
}

inline bool all_passed(const std::vector<CheckResult>& results) {
    return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
}

inline std::string format_checks(const std::vector<CheckResult>& results) {
    std::string out;
    char line[160];
    for (const auto& r : results) {
        std::snprintf(line, sizeof line, "%-4s  %-38s  error %.3e  tol %.1e\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                      r.error, r.tolerance);
        out += line;
    }
    return out;
}

}  // namespace syndist
