#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "grid.hpp"

namespace syndist {

/// mu = 1 iff neither the target label nor the warped label is a
/// potentially dynamic class.
inline DynamicMask dynamic_mask(const SegMask& target, const SegMask& warped, const std::set<int>& dc_classes) {
    require_same_extent(target, warped, "dynamic_mask");
    DynamicMask mu(target.height(), target.width());
    for (std::size_t i = 0; i < mu.size(); ++i) {
        mu[i] = (!dc_classes.contains(target[i]) && !dc_classes.contains(warped[i])) ? 1 : 0;
    }
    return mu;
}

struct MotionVerdict {
    double score = 0.0;
    bool moving = false;
};

/// 1 - IoU of the dynamic-class regions of the target and warped masks.
inline MotionVerdict motion_score(const SegMask& target, const SegMask& warped, const std::set<int>& dc_classes,
                                  double threshold = 0.25) {
    require_same_extent(target, warped, "motion_score");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const bool a = dc_classes.contains(target[i]);
        const bool b = dc_classes.contains(warped[i]);
        inter += a && b;
        uni += a || b;
    }
    MotionVerdict v;
    v.score = uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / uni;
    v.moving = v.score > threshold;
    return v;
}

/// Frames receiving the dynamic mask: the ceil(epsilon * N) highest-scoring
/// frames (ties by index), restricted to those judged moving.
inline std::vector<bool> apply_mask_policy(const std::vector<MotionVerdict>& verdicts, double epsilon) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
        throw Error(ErrorKind::InvalidArgument, "mask policy epsilon must lie in [0, 1]");
    }
    const std::size_t n = verdicts.size();
    const auto budget = static_cast<std::size_t>(std::ceil(epsilon * n - 1e-9));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return verdicts[a].score > verdicts[b].score; });
    std::vector<bool> out(n, false);
    for (std::size_t k = 0; k < std::min(budget, n); ++k) {
        if (verdicts[order[k]].moving) out[order[k]] = true;
    }
    return out;
}

/// Mean of the minimum reconstruction loss over pixels where the dynamic
/// mask, auto-mask and validity all hold.
template <typename LossGrid>
double masked_reconstruction_loss(const LossGrid& min_loss, const DynamicMask& mu, const Mask& automask,
                                  const ValidityMask& valid) {
    require_same_extent(min_loss, mu, "masked_reconstruction_loss");
    require_same_extent(min_loss, automask, "masked_reconstruction_loss");
    require_same_extent(min_loss, valid, "masked_reconstruction_loss");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (mu[i] && automask[i] && valid[i]) {
            sum += min_loss[i];
            ++n;
        }
    }
    if (n == 0) throw Error(ErrorKind::DegenerateInput, "masked_reconstruction_loss: no surviving pixels");
    return sum / n;
}

}  // namespace syndist
