#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Cholesky>

#include "geometry.hpp"
#include "grid.hpp"
#include "losses.hpp"
#include "masking.hpp"
#include "robust.hpp"
#include "synth.hpp"
#include "warp.hpp"

namespace syndist {

// ------------------------------------------------------------ activation

enum class ActivationKind { Distance, Depth };

/// Maps a sigmoid output s to D = a s + b (distance) or D = 1 / (a s + b)
/// (inverse-depth parameterization used for pinhole depth).
struct DistanceActivation {
    ActivationKind kind = ActivationKind::Distance;
    double a = 99.9;
    double b = 0.1;

    /// Solve (a, b) so that D spans [min_d, max_d] as s goes from 0 to 1.
    static DistanceActivation for_range(ActivationKind kind, double min_d = 0.1, double max_d = 100.0) {
        if (!(min_d > 0.0) || !(max_d > min_d)) {
            throw Error(ErrorKind::InvalidArgument, "activation range must satisfy 0 < min < max");
        }
        if (kind == ActivationKind::Distance) return {kind, max_d - min_d, min_d};
        return {kind, 1.0 / min_d - 1.0 / max_d, 1.0 / max_d};
    }

    static DistanceActivation for_camera(const CameraModel& cam) {
        return for_range(cam.kind() == CameraKind::Pinhole ? ActivationKind::Depth : ActivationKind::Distance);
    }

    double from_sigmoid(double s) const {
        const double lin = a * s + b;
        const double d = kind == ActivationKind::Distance ? lin : 1.0 / lin;
        if (!(d > 0.0) || !std::isfinite(d)) {
            throw Error(ErrorKind::OutOfRange, "sigmoid_to_distance: result outside (0, inf)");
        }
        return d;
    }

    double sigmoid_from(double distance) const {
        const double lin = kind == ActivationKind::Distance ? distance : 1.0 / distance;
        return (lin - b) / a;
    }

    /// D for a pre-sigmoid activation x, and dD/dx.
    std::pair<double, double> from_activation(double x) const {
        const double s = 1.0 / (1.0 + std::exp(-x));
        const double ds = s * (1.0 - s);
        const double d = from_sigmoid(s);
        const double dd = kind == ActivationKind::Distance ? a * ds : -d * d * a * ds;
        return {d, dd};
    }

    double activation_from(double distance) const {
        const double s = sigmoid_from(distance);
        if (!(s > 0.0 && s < 1.0)) {
            throw Error(ErrorKind::OutOfRange, "distance outside the activation range");
        }
        return std::log(s / (1.0 - s));
    }
};

inline DistanceMap sigmoid_to_distance(const ScalarMap& s, double a, double b, ActivationKind kind) {
    const DistanceActivation act{kind, a, b};
    DistanceMap out(s.height(), s.width());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = act.from_sigmoid(s[i]);
    return out;
}

// ---------------------------------------------------------------- problem

struct Toggles {
    bool robust_loss = true;
    bool dynamic_mask = true;
    bool auto_mask = true;
    bool csdcl = true;
    bool smoothness = true;
};

struct OptimizerSettings {
    int iterations = 500;
    double armijo = 1e-4;
    int max_backtracks = 40;
    double initial_step = 1.0;
    double growth = 2.0;
    /// Per-block step scale of the adaptive-alpha parameter relative to the
    /// per-pixel activations.
    double alpha_step_scale = 100.0;
    /// Width (pixels) of the Gaussian smoothing metric on the distance-map
    /// blocks; 0 gives per-pixel steepest descent.
    double smoothing_sigma = 4.0;
    /// Weight of the shared mode when target and neighbour maps are
    /// optimized together (metric I + coupling * 1 1^T per pixel).
    double map_coupling = 10.0;
};

/// Target frame t with its temporal neighbours t' in {t-1, t+1}.
struct RefineProblem {
    Image target;
    std::vector<Image> sources;
    std::vector<Pose> poses;  // T_{t -> t'}
    SegMask seg_target;
    std::vector<SegMask> seg_sources;
    CameraModel camera = CameraModel::pinhole(1.0, 1.0, 0.0, 0.0, 1, 1);
    DistanceMap initial;
    LossConfig loss;
    RobustParams robust{1.0, 0.01, true};
    Toggles toggles;
    OptimizerSettings optimizer;
    /// Whether mu_t is applied to this frame; unset means decide from the
    /// motion verdict with a single-frame policy.
    std::optional<bool> apply_dynamic_mask;
    std::optional<DistanceMap> ground_truth;
    /// Metric evaluation region (e.g. background pixels), optional.
    std::optional<Mask> metric_region;
    double metric_cap = 40.0;

    void validate() const {
        if (sources.empty() || sources.size() != poses.size()) {
            throw Error(ErrorKind::InvalidArgument, "refine: need one pose per source frame");
        }
        for (const auto& s : sources) require_same_shape(target, s, "refine sources");
        if (!seg_sources.empty() && seg_sources.size() != sources.size()) {
            throw Error(ErrorKind::InvalidArgument, "refine: need one segmentation per source");
        }
        require_same_extent(target, initial, "refine initial map");
        if (target.height() != camera.height() || target.width() != camera.width()) {
            throw Error(ErrorKind::InvalidArgument, "refine: camera and image sizes differ");
        }
        loss.validate();
        robust.validate();
    }
};

inline RefineProblem problem_from_ground_truth(const GroundTruth& gt, const CameraModel& cam,
                                               const DistanceMap& initial) {
    RefineProblem p;
    p.target = gt.image_target;
    p.sources = {gt.image_prev, gt.image_next};
    p.poses = {gt.to_prev, gt.to_next};
    p.seg_target = gt.seg_target;
    p.seg_sources = {gt.seg_prev, gt.seg_next};
    p.camera = cam;
    p.initial = initial;
    p.ground_truth = gt.distance_target;
    return p;
}

// -------------------------------------------------------------- objective

/// Optimization state: pre-activations of the target map and, when the
/// consistency term is on, of one map per neighbour frame; the raw alpha;
/// and (pose refinement only) the source twists.
struct RefineState {
    ScalarMap target_act;
    std::vector<ScalarMap> neighbour_act;
    double alpha_raw = 0.0;
    std::vector<Vec6> twists;
};

struct ObjectiveTerms {
    double total = 0.0;
    double reconstruction = 0.0;  // target frame
    double smoothness = 0.0;      // target frame
    double consistency = 0.0;
    double neighbour_reconstruction = 0.0;
    double neighbour_smoothness = 0.0;
    std::size_t support = 0;  // target frame
};

struct ObjectiveGradient {
    ScalarMap d_target_distance;
    ScalarMap d_target_act;
    std::vector<ScalarMap> d_neighbour_distance;
    std::vector<ScalarMap> d_neighbour_act;
    double d_alpha_raw = 0.0;
    std::vector<Vec6> d_twists;
};

enum class Wrt : unsigned { Distance = 1, Neighbours = 2, Alpha = 4, Twist = 8 };
inline constexpr unsigned operator|(Wrt a, Wrt b) { return static_cast<unsigned>(a) | static_cast<unsigned>(b); }
inline constexpr unsigned operator|(unsigned a, Wrt b) { return a | static_cast<unsigned>(b); }
inline constexpr bool has(unsigned set, Wrt w) { return (set & static_cast<unsigned>(w)) != 0; }

/// Total refinement loss over the frame triple. Frame t contributes
/// L_r + beta L_s with its two sources; each neighbour t' (present when the
/// consistency term is on) contributes its own L_r + beta L_s against frame t;
/// gamma times the two-way consistency term couples t with every t'.
/// Auto-mask and validity are recomputed at every evaluation, the dynamic
/// masks are fixed at construction.
class DistanceObjective {
  public:
    /// `mu[0]` is the target mask, `mu[k + 1]` the mask of neighbour k.
    DistanceObjective(const RefineProblem& problem, std::vector<DynamicMask> mu)
        : p_(problem), mu_(std::move(mu)), activation_(DistanceActivation::for_camera(problem.camera)) {
        const std::size_t need = 1 + (problem.toggles.csdcl ? problem.sources.size() : 0);
        if (mu_.size() != need) throw Error(ErrorKind::InvalidArgument, "objective: one dynamic mask per frame");
    }

    const DistanceActivation& activation() const { return activation_; }

    RobustParams robust_at(const RefineState& s) const {
        if (!p_.toggles.robust_loss) return l1_params();
        RobustParams r = p_.robust;
        if (r.adaptive) r.alpha = RobustParams::alpha_from_raw(s.alpha_raw);
        return r;
    }

    DistanceMap distances(const ScalarMap& act) const {
        DistanceMap d(act.height(), act.width());
        for (std::size_t i = 0; i < act.size(); ++i) d[i] = activation_.from_activation(act[i]).first;
        return d;
    }

    Pose pose_at(const RefineState& s, std::size_t k) const {
        return s.twists.empty() ? p_.poses[k] : se3_exp(s.twists[k]);
    }

    ObjectiveTerms evaluate(const RefineState& s, unsigned wrt = 0, ObjectiveGradient* grad = nullptr) const {
        const auto& cfg = p_.loss;
        const RobustParams robust = robust_at(s);
        const bool want_grad = grad != nullptr && wrt != 0;
        const bool want_twist = want_grad && has(wrt, Wrt::Twist);
        const std::size_t n_src = p_.sources.size();
        const std::size_t n_nb = p_.toggles.csdcl ? n_src : 0;
        if (s.neighbour_act.size() != n_nb) throw Error(ErrorKind::InvalidArgument, "objective: neighbour maps");
        // only the target reconstruction is differentiated in the twists
        if (want_twist && n_nb > 0) {
            throw Error(ErrorKind::InvalidArgument, "objective: twist gradient needs the consistency term off");
        }

        const DistanceMap d_t = distances(s.target_act);
        std::vector<DistanceMap> d_nb;
        for (std::size_t k = 0; k < n_nb; ++k) d_nb.push_back(distances(s.neighbour_act[k]));
        std::vector<Pose> poses;
        for (std::size_t k = 0; k < n_src; ++k) poses.push_back(pose_at(s, k));

        ScalarMap g_t, dummy;
        std::vector<ScalarMap> g_nb(n_nb);
        double g_alpha = 0.0;
        std::vector<Vec6> g_tw(n_src, Vec6::Zero());
        if (want_grad) {
            g_t = ScalarMap(d_t.height(), d_t.width());
            for (auto& g : g_nb) g = ScalarMap(d_t.height(), d_t.width());
        }

        ObjectiveTerms terms;
        {
            std::vector<const Image*> srcs;
            for (const auto& img : p_.sources) srcs.push_back(&img);
            std::vector<PoseJacobian> jacs;
            if (want_twist) {
                for (std::size_t k = 0; k < n_src; ++k) {
                    jacs.push_back(se3_exp_jacobian(s.twists.empty() ? poses[k].twist() : s.twists[k]));
                }
            }
            terms.reconstruction = photometric_term(p_.target, srcs, poses, want_twist ? &jacs : nullptr, d_t, mu_[0],
                                                    robust, want_grad ? &g_t : nullptr, &g_alpha,
                                                    want_twist ? &g_tw : nullptr, &terms.support);
        }
        for (std::size_t k = 0; k < n_nb; ++k) {
            std::size_t support = 0;
            terms.neighbour_reconstruction +=
                photometric_term(p_.sources[k], {&p_.target}, {poses[k].inverse()}, nullptr, d_nb[k], mu_[k + 1],
                                 robust, want_grad ? &g_nb[k] : nullptr, &g_alpha, nullptr, &support);
        }

        if (p_.toggles.smoothness) {
            terms.smoothness = smoothness_loss(d_t, p_.target);
            for (std::size_t k = 0; k < n_nb; ++k) terms.neighbour_smoothness += smoothness_loss(d_nb[k], p_.sources[k]);
            if (want_grad && cfg.beta > 0.0) {
                add_scaled(g_t, smoothness_gradient(d_t, p_.target), cfg.beta);
                for (std::size_t k = 0; k < n_nb; ++k) {
                    add_scaled(g_nb[k], smoothness_gradient(d_nb[k], p_.sources[k]), cfg.beta);
                }
            }
        }

        for (std::size_t k = 0; k < n_nb; ++k) {
            terms.consistency += consistency_direction(d_t, d_nb[k], poses[k], want_grad ? &g_t : nullptr,
                                                       want_grad ? &g_nb[k] : nullptr, cfg.gamma);
            terms.consistency += consistency_direction(d_nb[k], d_t, poses[k].inverse(),
                                                       want_grad ? &g_nb[k] : nullptr, want_grad ? &g_t : nullptr,
                                                       cfg.gamma);
        }

        terms.total = total_distance_loss(terms.reconstruction, terms.smoothness, terms.consistency, cfg) +
                      terms.neighbour_reconstruction + cfg.beta * terms.neighbour_smoothness;
        if (!want_grad) return terms;

        grad->d_target_distance = g_t;
        grad->d_target_act = chain_activation(g_t, s.target_act);
        grad->d_neighbour_distance = g_nb;
        grad->d_neighbour_act.clear();
        for (std::size_t k = 0; k < n_nb; ++k) grad->d_neighbour_act.push_back(chain_activation(g_nb[k], s.neighbour_act[k]));
        grad->d_alpha_raw = (p_.toggles.robust_loss && p_.robust.adaptive)
                                ? g_alpha * RobustParams::alpha_raw_derivative(robust.alpha)
                                : 0.0;
        grad->d_twists = g_tw;
        return terms;
    }

  private:
    static void add_scaled(ScalarMap& acc, const ScalarMap& g, double w) {
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * g[i];
    }

    ScalarMap chain_activation(const ScalarMap& g, const ScalarMap& act) const {
        ScalarMap out(g.height(), g.width());
        for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] * activation_.from_activation(act[i]).second;
        return out;
    }

    /// Masked mean of the per-pixel minimum photometric loss of `target`
    /// reconstructed from each source; gradients are accumulated.
    double photometric_term(const Image& target, const std::vector<const Image*>& sources,
                            const std::vector<Pose>& poses, const std::vector<PoseJacobian>* pose_jacs,
                            const DistanceMap& d, const DynamicMask& mu, const RobustParams& robust, ScalarMap* g_d,
                            double* g_alpha, std::vector<Vec6>* g_twists, std::size_t* support_out) const {
        const auto& cfg = p_.loss;
        const bool want_grad = g_d != nullptr;
        const std::size_t n_src = sources.size();
        std::vector<WarpField> fields;
        std::vector<ViewSynthesis> views;
        std::vector<ScalarMap> maps;
        std::vector<ValidityMask> valids;
        for (std::size_t k = 0; k < n_src; ++k) {
            fields.push_back(compute_warp_field(d, poses[k], p_.camera, pose_jacs ? &(*pose_jacs)[k] : nullptr));
            views.push_back(sample_field(*sources[k], fields.back(), SampleMode::Bilinear, want_grad));
            // invalid samples take the target value so SSIM windows at the
            // validity border see no artificial edge
            auto& img = views.back().image;
            for (std::size_t i = 0; i < views.back().valid.size(); ++i) {
                if (views.back().valid[i]) continue;
                for (int c = 0; c < target.channels(); ++c) img[i * target.channels() + c] = target[i * target.channels() + c];
            }
            maps.push_back(photometric_loss(target, views.back().image, cfg, robust, views.back().valid));
            valids.push_back(views.back().valid);
        }
        const MinSelection sel = min_reprojection_valid(maps, valids);

        Mask automask = all_ones_mask(target.height(), target.width());
        if (p_.toggles.auto_mask) {
            std::vector<ScalarMap> raw;
            for (std::size_t k = 0; k < n_src; ++k) {
                raw.push_back(photometric_loss(target, *sources[k], cfg, robust, automask));
            }
            automask = auto_mask(sel.loss, min_reprojection(raw));
        }
        const Mask support = mask_and(mask_and(mu, automask), sel.valid);
        ScalarMap recon = sel.loss;
        Mask clipped(recon.height(), recon.width());
        if (cfg.clip_quantile > 0.0) std::tie(recon, clipped) = clip_loss_map(recon, support, cfg.clip_quantile);

        const std::size_t n = count_set(support);
        *support_out = n;
        const double value = masked_reconstruction_loss(recon, mu, automask, sel.valid);
        if (!want_grad) return value;

        const double inv_n = 1.0 / static_cast<double>(n);
        const int ch = target.channels();
        for (std::size_t k = 0; k < n_src; ++k) {
            ScalarMap upstream(d.height(), d.width());
            for (std::size_t i = 0; i < upstream.size(); ++i) {
                if (support[i] && !clipped[i] && sel.argmin[i] == static_cast<int>(k)) upstream[i] = inv_n;
            }
            const auto pg = photometric_backward(target, views[k].image, cfg, robust, views[k].valid, upstream);
            *g_alpha += pg.d_alpha;
            for (std::size_t i = 0; i < d.size(); ++i) {
                if (!views[k].valid[i]) continue;
                Vec2 d_pix = Vec2::Zero();
                for (int c = 0; c < ch; ++c) {
                    const std::size_t j = i * ch + c;
                    d_pix.x() += pg.d_recon[j] * views[k].d_du[j];
                    d_pix.y() += pg.d_recon[j] * views[k].d_dv[j];
                }
                (*g_d)[i] += d_pix.dot(fields[k].d_pixel_d_distance[i]);
                if (g_twists) (*g_twists)[k] += fields[k].d_pixel_d_twist[i].transpose() * d_pix;
            }
        }
        return value;
    }

    /// One direction of the consistency term; gradients are accumulated with
    /// weight `weight`.
    double consistency_direction(const DistanceMap& d_src, const DistanceMap& d_other, const Pose& pose,
                                 ScalarMap* g_src, ScalarMap* g_other, double weight) const {
        const WarpField field = compute_warp_field(d_src, pose, p_.camera);
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < d_src.size(); ++i) {
            const auto& px = field.pixel[i];
            if (field.valid[i] && detail::sample_in_bounds(px.x(), px.y(), d_other.width(), d_other.height())) {
                idx.push_back(i);
            }
        }
        if (idx.empty()) throw Error(ErrorKind::DegenerateInput, "csdcl: no valid pixels");
        const double n = static_cast<double>(idx.size());
        double sum = 0.0;
        for (std::size_t i : idx) {
            const auto& px = field.pixel[i];
            const auto st = detail::bilinear_stencil(px.x(), px.y(), d_other.width(), d_other.height());
            const double tr = p_.camera.point_distance(field.point[i]);
            const double sa = detail::bilinear(d_other, st, 0);
            sum += std::abs(tr - sa);
            if (!g_src) continue;
            const double w = weight * detail::sign(tr - sa) / n;
            const Vec3 dq = pose.rotation() * field.base[i];
            const double d_tr = p_.camera.point_distance_gradient(field.point[i]).dot(dq);
            const double d_sa = detail::bilinear_gradient(d_other, st, 0).dot(field.d_pixel_d_distance[i]);
            (*g_src)[i] += w * (d_tr - d_sa);
            auto& go = *g_other;
            go(st.y0, st.x0) -= w * (1 - st.fx) * (1 - st.fy);
            go(st.y0, st.x1) -= w * st.fx * (1 - st.fy);
            go(st.y1, st.x0) -= w * (1 - st.fx) * st.fy;
            go(st.y1, st.x1) -= w * st.fx * st.fy;
        }
        return sum / n;
    }

    const RefineProblem& p_;
    std::vector<DynamicMask> mu_;
    DistanceActivation activation_;
};

// ----------------------------------------------------------- line search

struct DescentResult {
    std::vector<double> trace;  // loss after each accepted iteration
    double initial_loss = 0.0;
    int accepted = 0;
    double initial_gradient_norm = 0.0;
};

/// Maps a gradient to the (unnegated) step direction P g for a symmetric
/// positive semi-definite P.
using Metric = std::function<std::vector<double>(const std::vector<double>&)>;

/// Separable Gaussian blur with zero padding over an h x w block. The kernel
/// is symmetric, so the operator is self-adjoint.
inline void gaussian_blur_block(double* v, int h, int w, double sigma) {
    if (sigma <= 0.0) return;
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * r + 1);
    for (int i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    double ks = 0.0;
    for (double e : k) ks += e;
    for (double& e : k) e /= ks;
    std::vector<double> tmp(static_cast<std::size_t>(h) * w, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = std::max(-r, -x); i <= std::min(r, w - 1 - x); ++i) acc += k[i + r] * v[y * w + x + i];
            tmp[y * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = std::max(-r, -y); i <= std::min(r, h - 1 - y); ++i) acc += k[i + r] * tmp[(y + i) * w + x];
            v[y * w + x] = acc;
        }
}

/// Gradient descent with Armijo backtracking (halving). The step direction is
/// -P g under the given metric and the sufficient-decrease test uses g.P g.
inline DescentResult backtracking_descent(
    std::vector<double>& x, const Metric& metric,
    const std::function<double(const std::vector<double>&, std::vector<double>*)>& f, const OptimizerSettings& opt) {
    DescentResult res;
    std::vector<double> g(x.size());
    double fx = f(x, &g);
    if (!std::isfinite(fx)) throw Error(ErrorKind::Divergence, "objective is not finite at the initial point");
    res.initial_loss = fx;
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    double step = opt.initial_step;
    std::vector<double> trial(x.size());
    for (int it = 0;; ++it) {
        for (double v : g) {
            if (!std::isfinite(v)) throw Error(ErrorKind::Divergence, "gradient became non-finite");
        }
        const std::vector<double> dir = metric(g);
        const double decrease = dot(g, dir);
        if (it == 0) res.initial_gradient_norm = std::sqrt(dot(g, g));
        if (it >= opt.iterations || !(decrease > 0.0)) break;
        bool accepted = false;
        for (int bt = 0; bt < opt.max_backtracks; ++bt) {
            for (std::size_t i = 0; i < x.size(); ++i) trial[i] = x[i] - step * dir[i];
            double f_trial;
            try {
                f_trial = f(trial, nullptr);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::DegenerateInput && e.kind() != ErrorKind::OutOfRange) throw;
                f_trial = std::numeric_limits<double>::quiet_NaN();
            }
            if (std::isfinite(f_trial) && f_trial <= fx - opt.armijo * step * decrease) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        x = trial;
        fx = f(x, &g);
        if (!std::isfinite(fx)) throw Error(ErrorKind::Divergence, "objective became non-finite");
        res.trace.push_back(fx);
        ++res.accepted;
        step *= opt.growth;
    }
    return res;
}

// ---------------------------------------------------------------- refine

struct MaskStatistics {
    /// Per frame, in the order target, then one entry per neighbour.
    std::vector<MotionVerdict> verdicts;
    std::vector<bool> applied;
    double dynamic_mask_coverage = 1.0;  // target-frame fraction with mu = 1
    double final_support_fraction = 0.0;
};

struct RefineReport {
    std::vector<double> loss_trace;
    double initial_loss = 0.0;
    DistanceMap distance;
    std::optional<DepthMetrics> before;
    std::optional<DepthMetrics> after;
    std::optional<DepthMetrics> region_before;
    std::optional<DepthMetrics> region_after;
    MaskStatistics masks;
    DynamicMask dynamic_mask;
    double final_alpha = 1.0;
    ObjectiveTerms final_terms;
};

struct FrameMask {
    DynamicMask mu;
    MotionVerdict verdict;
};

/// mu for one frame from its labels and the labels of its partners warped
/// into it; the verdict keeps the highest partner score.
inline FrameMask frame_dynamic_mask(const SegMask& labels, const std::vector<const SegMask*>& partners,
                                    const std::vector<Pose>& poses, const DistanceMap& distance,
                                    const CameraModel& cam, const LossConfig& cfg) {
    FrameMask out{all_ones_mask(labels.height(), labels.width()), {}};
    for (std::size_t k = 0; k < partners.size(); ++k) {
        const SegWarp warped = warp_segmentation(*partners[k], distance, poses[k], cam);
        out.mu = mask_and(out.mu, dynamic_mask(labels, warped.labels, cfg.dc_classes));
        const MotionVerdict v = motion_score(labels, warped.labels, cfg.dc_classes, cfg.motion_threshold);
        if (v.score >= out.verdict.score) out.verdict = v;
    }
    return out;
}

/// Dynamic masks for the target and (with the consistency term) each
/// neighbour frame, after the epsilon policy over those frames.
inline std::vector<DynamicMask> refine_dynamic_masks(const RefineProblem& p, MaskStatistics& stats) {
    const std::size_t n_frames = 1 + (p.toggles.csdcl ? p.sources.size() : 0);
    std::vector<FrameMask> frames;
    const bool have_labels = !p.seg_sources.empty();
    if (have_labels) {
        std::vector<const SegMask*> partners;
        for (const auto& m : p.seg_sources) partners.push_back(&m);
        frames.push_back(frame_dynamic_mask(p.seg_target, partners, p.poses, p.initial, p.camera, p.loss));
        for (std::size_t k = 0; k + 1 < n_frames; ++k) {
            frames.push_back(frame_dynamic_mask(p.seg_sources[k], {&p.seg_target}, {p.poses[k].inverse()}, p.initial,
                                                p.camera, p.loss));
        }
    } else {
        frames.assign(n_frames, FrameMask{all_ones_mask(p.target.height(), p.target.width()), {}});
    }
    std::vector<MotionVerdict> verdicts;
    for (const auto& f : frames) verdicts.push_back(f.verdict);
    std::vector<bool> applied = apply_mask_policy(verdicts, p.loss.epsilon);
    if (p.apply_dynamic_mask) applied.assign(n_frames, *p.apply_dynamic_mask);
    if (!p.toggles.dynamic_mask || !have_labels) applied.assign(n_frames, false);

    std::vector<DynamicMask> out;
    for (std::size_t f = 0; f < n_frames; ++f) {
        out.push_back(applied[f] ? frames[f].mu : all_ones_mask(p.target.height(), p.target.width()));
    }
    stats.verdicts = verdicts;
    stats.applied = applied;
    stats.dynamic_mask_coverage = static_cast<double>(count_set(out[0])) / out[0].size();
    return out;
}

inline RefineState initial_state(const RefineProblem& p, const DistanceActivation& act) {
    RefineState s;
    s.target_act = ScalarMap(p.initial.height(), p.initial.width());
    for (std::size_t i = 0; i < p.initial.size(); ++i) s.target_act[i] = act.activation_from(p.initial[i]);
    if (p.toggles.csdcl) s.neighbour_act.assign(p.sources.size(), s.target_act);
    s.alpha_raw = p.robust.adaptive ? RobustParams::raw_from_alpha(p.robust.alpha) : 0.0;
    return s;
}

inline RefineReport refine_depth(const RefineProblem& problem) {
    problem.validate();
    require_positive(problem.initial, "refine initial map");
    RefineReport report;
    const std::vector<DynamicMask> mu = refine_dynamic_masks(problem, report.masks);
    report.dynamic_mask = mu[0];

    const DistanceObjective objective(problem, mu);
    RefineState state = initial_state(problem, objective.activation());
    const bool adaptive = problem.toggles.robust_loss && problem.robust.adaptive;
    const std::size_t n_pix = state.target_act.size();

    // flat layout: [target | neighbours... | alpha_raw]
    std::vector<double> x;
    x.insert(x.end(), state.target_act.data().begin(), state.target_act.data().end());
    for (const auto& nb : state.neighbour_act) x.insert(x.end(), nb.data().begin(), nb.data().end());
    if (adaptive) x.push_back(state.alpha_raw);
    const int h = state.target_act.height(), w = state.target_act.width();
    const std::size_t n_blocks = 1 + state.neighbour_act.size();
    const double sigma = problem.optimizer.smoothing_sigma;
    const double pixel_scale = static_cast<double>(n_pix);
    const double alpha_scale = problem.optimizer.alpha_step_scale;
    const double coupling = problem.optimizer.map_coupling;
    std::vector<double> inv_mass(n_pix, 1.0);
    gaussian_blur_block(inv_mass.data(), h, w, sigma / std::sqrt(2.0));
    gaussian_blur_block(inv_mass.data(), h, w, sigma / std::sqrt(2.0));
    for (double& m : inv_mass) m = 1.0 / std::sqrt(m);
    const Metric metric = [=](const std::vector<double>& g) {
        std::vector<double> d(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) d[i] = pixel_scale * g[i];
        // (I + lambda 1 1^T) across the maps at each pixel
        if (n_blocks > 1 && coupling > 0.0) {
            for (std::size_t i = 0; i < n_pix; ++i) {
                double shared = 0.0;
                for (std::size_t b = 0; b < n_blocks; ++b) shared += d[b * n_pix + i];
                for (std::size_t b = 0; b < n_blocks; ++b) d[b * n_pix + i] += coupling * shared;
            }
        }
        // P = N M B^2 M on each map block, B a blur of width sigma / sqrt(2)
        // and M the inverse kernel mass, so border pixels keep full steps
        for (std::size_t b = 0; b < n_blocks; ++b) {
            double* blk = d.data() + b * n_pix;
            for (std::size_t i = 0; i < n_pix; ++i) blk[i] *= inv_mass[i];
            gaussian_blur_block(blk, h, w, sigma / std::sqrt(2.0));
            gaussian_blur_block(blk, h, w, sigma / std::sqrt(2.0));
            for (std::size_t i = 0; i < n_pix; ++i) blk[i] *= inv_mass[i];
        }
        if (adaptive) d.back() = alpha_scale * g.back();
        return d;
    };

    auto unpack = [&](const std::vector<double>& v) {
        RefineState s = state;
        std::size_t o = 0;
        for (std::size_t i = 0; i < n_pix; ++i) s.target_act[i] = v[o++];
        for (auto& nb : s.neighbour_act)
            for (std::size_t i = 0; i < n_pix; ++i) nb[i] = v[o++];
        if (adaptive) s.alpha_raw = v[o];
        return s;
    };
    unsigned wrt = static_cast<unsigned>(Wrt::Distance);
    if (problem.toggles.csdcl) wrt |= static_cast<unsigned>(Wrt::Neighbours);
    if (adaptive) wrt |= static_cast<unsigned>(Wrt::Alpha);

    auto f = [&](const std::vector<double>& v, std::vector<double>* g) {
        const RefineState s = unpack(v);
        if (!g) return objective.evaluate(s).total;
        ObjectiveGradient og;
        const double value = objective.evaluate(s, wrt, &og).total;
        std::size_t o = 0;
        for (std::size_t i = 0; i < n_pix; ++i) (*g)[o++] = og.d_target_act[i];
        for (const auto& nb : og.d_neighbour_act)
            for (std::size_t i = 0; i < n_pix; ++i) (*g)[o++] = nb[i];
        if (adaptive) (*g)[o] = og.d_alpha_raw;
        return value;
    };

    const auto res = backtracking_descent(x, metric, f, problem.optimizer);
    state = unpack(x);
    report.loss_trace = res.trace;
    report.initial_loss = res.initial_loss;
    report.distance = objective.distances(state.target_act);
    report.final_alpha = objective.robust_at(state).alpha;
    report.final_terms = objective.evaluate(state);
    report.masks.final_support_fraction = static_cast<double>(report.final_terms.support) / n_pix;
    if (problem.ground_truth) {
        report.before = depth_metrics(problem.initial, *problem.ground_truth, problem.metric_cap);
        report.after = depth_metrics(report.distance, *problem.ground_truth, problem.metric_cap);
        if (problem.metric_region) {
            report.region_before =
                depth_metrics(problem.initial, *problem.ground_truth, problem.metric_cap, &*problem.metric_region);
            report.region_after =
                depth_metrics(report.distance, *problem.ground_truth, problem.metric_cap, &*problem.metric_region);
        }
    }
    return report;
}

// ------------------------------------------------------------------ pose

struct PoseRefineResult {
    Pose pose;
    Vec6 twist = Vec6::Zero();
    std::vector<double> loss_trace;
    double initial_loss = 0.0;
    double initial_gradient_norm = 0.0;
};

/// Photometric reconstruction loss as a function of one source's twist,
/// with the target distances held at `problem.initial`.
inline PoseRefineResult pose_refine(const RefineProblem& problem, std::size_t source, const Vec6& init_twist) {
    problem.validate();
    if (source >= problem.sources.size()) throw Error(ErrorKind::InvalidArgument, "pose_refine: no such source");
    if (init_twist.head<3>().norm() >= std::numbers::pi) {
        throw Error(ErrorKind::OutOfRange, "pose_refine: rotation outside the principal branch");
    }
    RefineProblem single = problem;
    single.sources = {problem.sources[source]};
    single.poses = {problem.poses[source]};
    single.seg_sources.clear();
    single.toggles.csdcl = false;
    single.toggles.smoothness = false;
    single.toggles.dynamic_mask = false;
    const DistanceObjective objective(single, {all_ones_mask(single.target.height(), single.target.width())});
    RefineState state = initial_state(single, objective.activation());
    state.twists = {init_twist};

    std::vector<double> x(init_twist.data(), init_twist.data() + 6);
    auto f = [&](const std::vector<double>& v, std::vector<double>* g) {
        RefineState s = state;
        s.twists[0] = Eigen::Map<const Vec6>(v.data());
        if (!g) return objective.evaluate(s).total;
        ObjectiveGradient og;
        const double value = objective.evaluate(s, static_cast<unsigned>(Wrt::Twist), &og).total;
        for (int i = 0; i < 6; ++i) (*g)[i] = og.d_twists[0](i);
        return value;
    };
    // step in pixel-motion units: P = (mean J^T J)^-1 over the valid pixels,
    // which decouples the nearly collinear rotation and translation axes
    const PoseJacobian jac = se3_exp_jacobian(init_twist);
    const WarpField field = compute_warp_field(single.initial, se3_exp(init_twist), single.camera, &jac);
    Eigen::Matrix<double, 6, 6> gn = Eigen::Matrix<double, 6, 6>::Zero();
    std::size_t n_valid = 0;
    for (std::size_t i = 0; i < field.valid.size(); ++i) {
        if (!field.valid[i]) continue;
        gn += field.d_pixel_d_twist[i].transpose() * field.d_pixel_d_twist[i];
        ++n_valid;
    }
    if (n_valid == 0) throw Error(ErrorKind::DegenerateInput, "pose_refine: no pixel projects into the source");
    gn /= static_cast<double>(n_valid);
    gn.diagonal().array() += 1e-9 * gn.trace();
    const Eigen::LDLT<Eigen::Matrix<double, 6, 6>> solver(gn);
    const Metric metric = [&solver](const std::vector<double>& g) {
        const Vec6 d = solver.solve(Eigen::Map<const Vec6>(g.data()));
        return std::vector<double>(d.data(), d.data() + 6);
    };
    const auto res = backtracking_descent(x, metric, f, single.optimizer);
    PoseRefineResult out;
    out.twist = Eigen::Map<const Vec6>(x.data());
    out.pose = se3_exp(out.twist);
    out.loss_trace = res.trace;
    out.initial_loss = res.initial_loss;
    out.initial_gradient_norm = res.initial_gradient_norm;
    return out;
}

}  // namespace syndist
