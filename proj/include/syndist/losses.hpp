#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "grid.hpp"
#include "robust.hpp"
#include "warp.hpp"

namespace syndist {

struct LossConfig {
    double omega = 0.85;
    double beta = 1e-3;
    double gamma = 1e-2;
    double epsilon = 0.4;
    int ssim_window = 3;
    std::set<int> dc_classes{3, 4, 5};
    double motion_threshold = 0.25;
    /// Upper clamp of per-pixel reconstruction loss at this quantile of the
    /// surviving pixels; 0 disables clipping.
    double clip_quantile = 0.0;

    void validate() const {
        if (!(omega >= 0.0 && omega <= 1.0)) throw Error(ErrorKind::InvalidArgument, "omega must lie in [0, 1]");
        if (!(beta >= 0.0) || !(gamma >= 0.0)) throw Error(ErrorKind::InvalidArgument, "beta and gamma must be >= 0");
        if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw Error(ErrorKind::InvalidArgument, "epsilon must lie in [0, 1]");
        if (ssim_window < 1 || ssim_window % 2 == 0) throw Error(ErrorKind::InvalidArgument, "ssim window must be odd");
        if (!(clip_quantile >= 0.0 && clip_quantile <= 1.0)) {
            throw Error(ErrorKind::InvalidArgument, "clip quantile must lie in [0, 1]");
        }
    }
};

// ---------------------------------------------------------------- SSIM

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

struct SsimMoments {
    double mx, my, exx, eyy, exy;
};

template <typename F>
void for_window(int y, int x, int radius, int height, int width, F&& f) {
    for (int dy = -radius; dy <= radius; ++dy) {
        const int yy = reflect_index(y + dy, height);
        for (int dx = -radius; dx <= radius; ++dx) f(yy, reflect_index(x + dx, width));
    }
}

inline SsimMoments ssim_moments(const Image& a, const Image& b, int y, int x, int c, int window) {
    SsimMoments m{0, 0, 0, 0, 0};
    for_window(y, x, window / 2, a.height(), a.width(), [&](int yy, int xx) {
        const double va = a(yy, xx, c), vb = b(yy, xx, c);
        m.mx += va;
        m.my += vb;
        m.exx += va * va;
        m.eyy += vb * vb;
        m.exy += va * vb;
    });
    const double inv = 1.0 / (window * window);
    m.mx *= inv;
    m.my *= inv;
    m.exx *= inv;
    m.eyy *= inv;
    m.exy *= inv;
    return m;
}

struct SsimTerms {
    double num_a, num_b, den_c, den_d, value;
};

inline SsimTerms ssim_terms(const SsimMoments& m) {
    SsimTerms t{};
    t.num_a = 2.0 * m.mx * m.my + kSsimC1;
    t.num_b = 2.0 * (m.exy - m.mx * m.my) + kSsimC2;
    t.den_c = m.mx * m.mx + m.my * m.my + kSsimC1;
    t.den_d = (m.exx - m.mx * m.mx) + (m.eyy - m.my * m.my) + kSsimC2;
    t.value = (t.num_a * t.num_b) / (t.den_c * t.den_d);
    return t;
}

}  // namespace detail

/// Per-pixel SSIM averaged over channels, box window with reflect padding.
inline ScalarMap ssim_map(const Image& a, const Image& b, int window = 3) {
    require_same_shape(a, b, "ssim_map");
    if (window < 1 || window % 2 == 0) throw Error(ErrorKind::InvalidArgument, "ssim_map: window must be odd");
    ScalarMap out(a.height(), a.width());
    const double inv_c = 1.0 / a.channels();
    for (int y = 0; y < a.height(); ++y) {
        for (int x = 0; x < a.width(); ++x) {
            double sum = 0.0;
            for (int c = 0; c < a.channels(); ++c) {
                sum += detail::ssim_terms(detail::ssim_moments(a, b, y, x, c, window)).value;
            }
            out(y, x) = std::clamp(sum * inv_c, -1.0, 1.0);
        }
    }
    return out;
}

/// Gradient of sum_p upstream(p) * ssim_map(a, b)(p) with respect to b.
inline Image ssim_backward(const Image& a, const Image& b, const ScalarMap& upstream, int window = 3) {
    require_same_shape(a, b, "ssim_backward");
    require_same_extent(a, upstream, "ssim_backward");
    Image grad(b.height(), b.width(), b.channels(), 0.0);
    const double inv_c = 1.0 / a.channels();
    const double inv_n = 1.0 / (window * window);
    for (int y = 0; y < a.height(); ++y) {
        for (int x = 0; x < a.width(); ++x) {
            const double g = upstream(y, x) * inv_c;
            if (g == 0.0) continue;
            for (int c = 0; c < a.channels(); ++c) {
                const auto m = detail::ssim_moments(a, b, y, x, c, window);
                const auto t = detail::ssim_terms(m);
                const double s = t.value;
                const double d_my = s * (2.0 * m.mx / t.num_a - 2.0 * m.mx / t.num_b - 2.0 * m.my / t.den_c +
                                         2.0 * m.my / t.den_d);
                const double d_eyy = -s / t.den_d;
                const double d_exy = 2.0 * s / t.num_b;
                detail::for_window(y, x, window / 2, a.height(), a.width(), [&](int yy, int xx) {
                    grad(yy, xx, c) +=
                        g * inv_n * (d_my + 2.0 * b(yy, xx, c) * d_eyy + a(yy, xx, c) * d_exy);
                });
            }
        }
    }
    return grad;
}

// ---------------------------------------------------------- photometric

/// Robust summand of the reconstruction loss, scaled by c so that alpha = 1
/// with small c approaches |xi|. Adaptive mode uses the negative
/// log-likelihood so that alpha can be optimized.
inline double robust_residual(double xi, const RobustParams& p) {
    if (p.adaptive) return p.c * robust_nll(xi, p);
    return p.c * robust_rho(xi, p.alpha, p.c);
}

struct RobustResidualGradient {
    double d_xi = 0.0, d_alpha = 0.0, d_c = 0.0;
};

inline RobustResidualGradient robust_residual_gradient(double xi, const RobustParams& p) {
    if (p.adaptive) {
        const auto g = robust_nll_gradient(xi, p);
        return {p.c * g.d_xi, p.c * g.d_alpha, robust_nll(xi, p) + p.c * g.d_c};
    }
    return {p.c * robust_rho_dxi(xi, p.alpha, p.c), p.c * robust_rho_dalpha(xi, p.alpha, p.c),
            robust_rho(xi, p.alpha, p.c) + p.c * robust_rho_dc(xi, p.alpha, p.c)};
}

/// Near-exact L1 baseline: alpha = 1 with a tiny scale.
inline RobustParams l1_params() { return {1.0, 1e-3, false}; }

/// omega (1 - SSIM)/2 + (1 - omega) * robust(I_t - I_hat), channel-averaged,
/// zero on invalid pixels.
inline ScalarMap photometric_loss(const Image& target, const Image& recon, const LossConfig& cfg,
                                  const RobustParams& params, const ValidityMask& valid) {
    require_same_shape(target, recon, "photometric_loss");
    require_same_extent(target, valid, "photometric_loss");
    params.validate();
    const ScalarMap ssim = cfg.omega > 0.0 ? ssim_map(target, recon, cfg.ssim_window)
                                           : ScalarMap(target.height(), target.width(), 1, 1.0);
    ScalarMap out(target.height(), target.width());
    const double inv_c = 1.0 / target.channels();
    for (int y = 0; y < target.height(); ++y) {
        for (int x = 0; x < target.width(); ++x) {
            if (!valid(y, x)) continue;
            double rob = 0.0;
            for (int c = 0; c < target.channels(); ++c) {
                rob += robust_residual(target(y, x, c) - recon(y, x, c), params);
            }
            out(y, x) = cfg.omega * (1.0 - ssim(y, x)) / 2.0 + (1.0 - cfg.omega) * rob * inv_c;
        }
    }
    return out;
}

struct PhotometricGradient {
    Image d_recon;
    double d_alpha = 0.0;
    double d_c = 0.0;
};

/// Adjoint of sum_p upstream(p) * photometric_loss(p).
inline PhotometricGradient photometric_backward(const Image& target, const Image& recon, const LossConfig& cfg,
                                                const RobustParams& params, const ValidityMask& valid,
                                                const ScalarMap& upstream) {
    require_same_shape(target, recon, "photometric_backward");
    PhotometricGradient out{Image(recon.height(), recon.width(), recon.channels(), 0.0)};
    ScalarMap ssim_up(target.height(), target.width());
    const double inv_c = 1.0 / target.channels();
    for (int y = 0; y < target.height(); ++y) {
        for (int x = 0; x < target.width(); ++x) {
            if (!valid(y, x)) continue;
            const double g = upstream(y, x);
            if (g == 0.0) continue;
            ssim_up(y, x) = -g * cfg.omega / 2.0;
            for (int c = 0; c < target.channels(); ++c) {
                const auto rg = robust_residual_gradient(target(y, x, c) - recon(y, x, c), params);
                const double w = g * (1.0 - cfg.omega) * inv_c;
                out.d_recon(y, x, c) -= w * rg.d_xi;
                out.d_alpha += w * rg.d_alpha;
                out.d_c += w * rg.d_c;
            }
        }
    }
    if (cfg.omega > 0.0) {
        const Image g = ssim_backward(target, recon, ssim_up, cfg.ssim_window);
        for (std::size_t i = 0; i < g.size(); ++i) out.d_recon[i] += g[i];
    }
    return out;
}

// ------------------------------------------------ minimum and auto-mask

inline ScalarMap min_reprojection(std::span<const ScalarMap> maps) {
    if (maps.empty()) throw Error(ErrorKind::InvalidArgument, "min_reprojection: no loss maps");
    ScalarMap out = maps[0];
    for (std::size_t k = 1; k < maps.size(); ++k) {
        require_same_shape(maps[0], maps[k], "min_reprojection");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(out[i], maps[k][i]);
    }
    return out;
}

/// Per-pixel minimum over the sources whose sample is valid. `argmin` is -1
/// where no source is valid.
struct MinSelection {
    ScalarMap loss;
    std::vector<int> argmin;
    ValidityMask valid;
};

inline MinSelection min_reprojection_valid(std::span<const ScalarMap> maps, std::span<const ValidityMask> valids) {
    if (maps.empty() || maps.size() != valids.size()) {
        throw Error(ErrorKind::InvalidArgument, "min_reprojection: need one validity mask per map");
    }
    MinSelection out{ScalarMap(maps[0].height(), maps[0].width()), std::vector<int>(maps[0].size(), -1),
                     ValidityMask(maps[0].height(), maps[0].width(), 1, 0)};
    for (std::size_t k = 0; k < maps.size(); ++k) {
        require_same_shape(maps[0], maps[k], "min_reprojection");
        for (std::size_t i = 0; i < maps[k].size(); ++i) {
            if (!valids[k][i]) continue;
            if (out.argmin[i] < 0 || maps[k][i] < out.loss[i]) {
                out.loss[i] = maps[k][i];
                out.argmin[i] = static_cast<int>(k);
                out.valid[i] = 1;
            }
        }
    }
    return out;
}

/// 1 where the warped reconstruction explains the target better than the
/// raw (unwarped) source frames.
inline Mask auto_mask(const ScalarMap& warped_min, const ScalarMap& unwarped_min) {
    require_same_shape(warped_min, unwarped_min, "auto_mask");
    Mask out(warped_min.height(), warped_min.width());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = warped_min[i] < unwarped_min[i] ? 1 : 0;
    return out;
}

/// Upper clamp at the given quantile of the loss over `support`. Clamped
/// pixels are flagged in `clipped` (their gradient is zero).
inline std::pair<ScalarMap, Mask> clip_loss_map(const ScalarMap& loss, const Mask& support, double quantile) {
    ScalarMap out = loss;
    Mask clipped(loss.height(), loss.width());
    std::vector<double> values;
    for (std::size_t i = 0; i < loss.size(); ++i) {
        if (support[i]) values.push_back(loss[i]);
    }
    if (values.empty() || quantile <= 0.0 || quantile >= 1.0) return {out, clipped};
    const auto k = static_cast<std::size_t>(std::floor(quantile * (values.size() - 1)));
    std::nth_element(values.begin(), values.begin() + k, values.end());
    const double cap = values[k];
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (support[i] && out[i] > cap) {
            out[i] = cap;
            clipped[i] = 1;
        }
    }
    return {out, clipped};
}

// ------------------------------------------------------------ smoothness

namespace detail {
inline double channel_mean_abs_diff(const Image& img, int y0, int x0, int y1, int x1) {
    double s = 0.0;
    for (int c = 0; c < img.channels(); ++c) s += std::abs(img(y1, x1, c) - img(y0, x0, c));
    return s / img.channels();
}

inline double sign(double v) { return (v > 0.0) - (v < 0.0); }
}  // namespace detail

/// Edge-aware smoothness on the mean-normalized inverse distance, forward
/// differences; the u and v terms are each averaged over their differences.
inline double smoothness_loss(const DistanceMap& distance, const Image& img) {
    require_same_extent(distance, img, "smoothness_loss");
    require_positive(distance, "smoothness_loss");
    const int h = distance.height(), w = distance.width();
    double mean_inv = 0.0;
    for (double d : distance.data()) mean_inv += 1.0 / d;
    mean_inv /= distance.size();
    auto norm = [&](int y, int x) { return 1.0 / distance(y, x) / mean_inv; };
    double su = 0.0, sv = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x + 1 < w; ++x) {
            su += std::abs(norm(y, x + 1) - norm(y, x)) * std::exp(-detail::channel_mean_abs_diff(img, y, x, y, x + 1));
        }
    }
    for (int y = 0; y + 1 < h; ++y) {
        for (int x = 0; x < w; ++x) {
            sv += std::abs(norm(y + 1, x) - norm(y, x)) * std::exp(-detail::channel_mean_abs_diff(img, y, x, y + 1, x));
        }
    }
    const double nu = static_cast<double>(h) * (w - 1), nv = static_cast<double>(h - 1) * w;
    return (nu > 0 ? su / nu : 0.0) + (nv > 0 ? sv / nv : 0.0);
}

inline ScalarMap smoothness_gradient(const DistanceMap& distance, const Image& img) {
    require_same_extent(distance, img, "smoothness_gradient");
    require_positive(distance, "smoothness_gradient");
    const int h = distance.height(), w = distance.width();
    const double n = static_cast<double>(distance.size());
    double mean_inv = 0.0;
    for (double d : distance.data()) mean_inv += 1.0 / d;
    mean_inv /= n;
    auto norm = [&](int y, int x) { return 1.0 / distance(y, x) / mean_inv; };
    ScalarMap g_norm(h, w);
    const double nu = static_cast<double>(h) * (w - 1), nv = static_cast<double>(h - 1) * w;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x + 1 < w; ++x) {
            const double e = std::exp(-detail::channel_mean_abs_diff(img, y, x, y, x + 1)) / nu;
            const double s = detail::sign(norm(y, x + 1) - norm(y, x)) * e;
            g_norm(y, x + 1) += s;
            g_norm(y, x) -= s;
        }
    }
    for (int y = 0; y + 1 < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double e = std::exp(-detail::channel_mean_abs_diff(img, y, x, y + 1, x)) / nv;
            const double s = detail::sign(norm(y + 1, x) - norm(y, x)) * e;
            g_norm(y + 1, x) += s;
            g_norm(y, x) -= s;
        }
    }
    // norm = inv / mean(inv):  d norm_p / d inv_q = delta_pq / m - inv_p / (m^2 n)
    double cross = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) cross += g_norm(y, x) / distance(y, x);
    ScalarMap grad(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double d_inv = g_norm(y, x) / mean_inv - cross / (mean_inv * mean_inv * n);
            grad(y, x) = -d_inv / (distance(y, x) * distance(y, x));
        }
    }
    return grad;
}

// ----------------------------------------------------------------- CSDCL

inline double csdcl_direction(const WarpedDistancePair& pair) {
    const std::size_t n = count_set(pair.valid);
    if (n == 0) throw Error(ErrorKind::DegenerateInput, "csdcl: no valid pixels");
    double sum = 0.0;
    for (std::size_t i = 0; i < pair.valid.size(); ++i) {
        if (pair.valid[i]) sum += std::abs(pair.transformed[i] - pair.sampled[i]);
    }
    return sum / n;
}

/// Mean |transformed - sampled| over valid pixels, forward plus backward.
inline double csdcl(const WarpedDistancePair& forward, const WarpedDistancePair& backward) {
    return csdcl_direction(forward) + csdcl_direction(backward);
}

/// d csdcl_direction / d transformed; the sampled adjoint is its negation.
inline ScalarMap csdcl_direction_adjoint(const WarpedDistancePair& pair) {
    const std::size_t n = count_set(pair.valid);
    if (n == 0) throw Error(ErrorKind::DegenerateInput, "csdcl: no valid pixels");
    ScalarMap g(pair.valid.height(), pair.valid.width());
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (pair.valid[i]) g[i] = detail::sign(pair.transformed[i] - pair.sampled[i]) / n;
    }
    return g;
}

// --------------------------------------------------------- segmentation

struct ProbTag {};
/// H x W x S class posteriors.
using ProbMap = Grid<double, ProbTag>;

/// Mean over non-ignored pixels of -log Y(pixel, label); labels index the
/// posterior channels, 0-based.
inline double cross_entropy(const ProbMap& probs, const SegMask& labels, int ignore_id = -1) {
    require_same_extent(probs, labels, "cross_entropy");
    double sum = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < labels.height(); ++y) {
        for (int x = 0; x < labels.width(); ++x) {
            const int l = labels(y, x);
            if (l == ignore_id) continue;
            if (l < 0 || l >= probs.channels()) throw Error(ErrorKind::OutOfRange, "cross_entropy: label out of range");
            sum -= std::log(probs(y, x, l));
            ++n;
        }
    }
    if (n == 0) throw Error(ErrorKind::DegenerateInput, "cross_entropy: every pixel ignored");
    return sum / n;
}

inline ProbMap cross_entropy_gradient(const ProbMap& probs, const SegMask& labels, int ignore_id = -1) {
    require_same_extent(probs, labels, "cross_entropy");
    ProbMap g(probs.height(), probs.width(), probs.channels());
    std::size_t n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) n += labels[i] != ignore_id;
    if (n == 0) throw Error(ErrorKind::DegenerateInput, "cross_entropy: every pixel ignored");
    for (int y = 0; y < labels.height(); ++y) {
        for (int x = 0; x < labels.width(); ++x) {
            const int l = labels(y, x);
            if (l == ignore_id) continue;
            if (l < 0 || l >= probs.channels()) throw Error(ErrorKind::OutOfRange, "cross_entropy: label out of range");
            g(y, x, l) = -1.0 / (n * probs(y, x, l));
        }
    }
    return g;
}

// ---------------------------------------------------------- total & MTL

inline double total_distance_loss(double reconstruction, double smoothness, double consistency,
                                  const LossConfig& cfg) {
    return reconstruction + cfg.beta * smoothness + cfg.gamma * consistency;
}

/// Homoscedastic task noise, stored as log-sigma so both stay positive.
struct TaskUncertainty {
    double log_sigma1 = 0.0;
    double log_sigma2 = 0.0;

    static TaskUncertainty from_sigmas(double sigma1, double sigma2) {
        if (!(sigma1 > 0.0) || !(sigma2 > 0.0)) {
            throw Error(ErrorKind::InvalidArgument, "task uncertainty sigmas must be positive");
        }
        return {std::log(sigma1), std::log(sigma2)};
    }
    double sigma1() const { return std::exp(log_sigma1); }
    double sigma2() const { return std::exp(log_sigma2); }
};

/// L_tot / (2 s1^2) + L_ce / (2 s2^2) + log(1 + s1) + log(1 + s2).
inline double mtl_weighted_loss(double l_tot, double l_ce, double sigma1, double sigma2) {
    if (!(sigma1 > 0.0) || !(sigma2 > 0.0)) {
        throw Error(ErrorKind::InvalidArgument, "mtl_weighted_loss: sigmas must be positive");
    }
    return l_tot / (2.0 * sigma1 * sigma1) + l_ce / (2.0 * sigma2 * sigma2) + std::log1p(sigma1) +
           std::log1p(sigma2);
}

inline double mtl_weighted_loss(double l_tot, double l_ce, const TaskUncertainty& u) {
    return mtl_weighted_loss(l_tot, l_ce, u.sigma1(), u.sigma2());
}

inline double mtl_task_weight(double sigma) { return 1.0 / (2.0 * sigma * sigma); }

struct MtlGradient {
    double d_l_tot, d_l_ce, d_sigma1, d_sigma2;
};

inline MtlGradient mtl_weighted_loss_gradient(double l_tot, double l_ce, double sigma1, double sigma2) {
    if (!(sigma1 > 0.0) || !(sigma2 > 0.0)) {
        throw Error(ErrorKind::InvalidArgument, "mtl_weighted_loss: sigmas must be positive");
    }
    return {mtl_task_weight(sigma1), mtl_task_weight(sigma2),
            -l_tot / (sigma1 * sigma1 * sigma1) + 1.0 / (1.0 + sigma1),
            -l_ce / (sigma2 * sigma2 * sigma2) + 1.0 / (1.0 + sigma2)};
}

}  // namespace syndist
