#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <vector>

#include "syndist/masking.hpp"

using namespace syndist;

namespace {

constexpr int kRoad = 1;
constexpr int kCar = 3;

SegMask random_labels(std::mt19937_64& rng, int classes) {
    std::uniform_int_distribution<int> label(1, classes);
    SegMask m(16, 16);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = label(rng);
    return m;
}

SegMask square(int h, int w, int y0, int x0, int side, int inside, int outside) {
    SegMask m(h, w, 1, outside);
    for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x) m(y, x) = inside;
    return m;
}

}  // namespace

TEST(DynamicMask, SinglePixelCases) {
    const std::set<int> dc{3, 4, 5};
    EXPECT_EQ(dynamic_mask(SegMask(1, 1, 1, kCar), SegMask(1, 1, 1, kRoad), dc)[0], 0);
    EXPECT_EQ(dynamic_mask(SegMask(1, 1, 1, kRoad), SegMask(1, 1, 1, kCar), dc)[0], 0);
    EXPECT_EQ(dynamic_mask(SegMask(1, 1, 1, kRoad), SegMask(1, 1, 1, kRoad), dc)[0], 1);
    EXPECT_THROW(dynamic_mask(SegMask(2, 2), SegMask(2, 3), dc), Error);
}

TEST(DynamicMask, MatchesBruteForceOnRandomMasks) {
    std::mt19937_64 rng(101);
    const std::set<int> dc{2, 5};
    for (int trial = 0; trial < 100; ++trial) {
        const SegMask t = random_labels(rng, 5), w = random_labels(rng, 5);
        const DynamicMask mu = dynamic_mask(t, w, dc);
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                const bool t_static = t(y, x) != 2 && t(y, x) != 5;
                const bool w_static = w(y, x) != 2 && w(y, x) != 5;
                ASSERT_EQ(mu(y, x), (t_static && w_static) ? 1 : 0);
            }
    }
}

TEST(DynamicMask, LargerExclusionSetNeverAddsPixels) {
    std::mt19937_64 rng(102);
    for (int trial = 0; trial < 30; ++trial) {
        const SegMask t = random_labels(rng, 5), w = random_labels(rng, 5);
        const DynamicMask small = dynamic_mask(t, w, {3});
        const DynamicMask large = dynamic_mask(t, w, {3, 4});
        for (std::size_t i = 0; i < small.size(); ++i) EXPECT_LE(large[i], small[i]);
    }
}

TEST(MotionScore, IdenticalDisjointAndHalfOverlap) {
    const std::set<int> dc{kCar};
    const SegMask a = square(8, 8, 0, 0, 4, kCar, kRoad);
    const MotionVerdict same = motion_score(a, a, dc);
    EXPECT_EQ(same.score, 0.0);
    EXPECT_FALSE(same.moving);

    const SegMask far = square(8, 8, 4, 4, 4, kCar, kRoad);
    const MotionVerdict disjoint = motion_score(a, far, dc);
    EXPECT_EQ(disjoint.score, 1.0);
    EXPECT_TRUE(disjoint.moving);

    // 4x4 squares shifted by two columns: 8 shared of 24 covered pixels
    const SegMask half = square(8, 8, 0, 2, 4, kCar, kRoad);
    EXPECT_NEAR(motion_score(a, half, dc).score, 2.0 / 3.0, 1e-15);

    EXPECT_EQ(motion_score(SegMask(4, 4, 1, kRoad), SegMask(4, 4, 1, kRoad), dc).score, 0.0);
}

TEST(MotionScore, SymmetricInItsArguments) {
    std::mt19937_64 rng(103);
    for (int trial = 0; trial < 30; ++trial) {
        const SegMask t = random_labels(rng, 5), w = random_labels(rng, 5);
        EXPECT_EQ(motion_score(t, w, {3, 4}).score, motion_score(w, t, {3, 4}).score);
    }
}

TEST(MaskPolicy, EpsilonEndpointsAndSortOrder) {
    const std::vector<MotionVerdict> v{{0.9, true}, {0.1, false}, {0.5, true}};
    EXPECT_EQ(apply_mask_policy(v, 0.0), (std::vector<bool>{false, false, false}));
    EXPECT_EQ(apply_mask_policy(v, 1.0), (std::vector<bool>{true, false, true}));
    EXPECT_EQ(apply_mask_policy(v, 1.0 / 3.0), (std::vector<bool>{true, false, false}));
    EXPECT_THROW(apply_mask_policy(v, 1.5), Error);
}

TEST(MaskPolicy, TiesResolveByIndexAndBudgetHolds) {
    const std::vector<MotionVerdict> ties{{0.5, true}, {0.7, true}, {0.5, true}, {0.5, true}};
    EXPECT_EQ(apply_mask_policy(ties, 0.5), (std::vector<bool>{true, true, false, false}));
    std::mt19937_64 rng(104);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<MotionVerdict> v(1 + trial % 9);
        for (auto& m : v) {
            m.score = u(rng);
            m.moving = m.score > 0.25;
        }
        const double eps = u(rng);
        const auto out = apply_mask_policy(v, eps);
        const auto n = static_cast<std::size_t>(std::count(out.begin(), out.end(), true));
        EXPECT_LE(n, static_cast<std::size_t>(std::ceil(eps * v.size())));
        EXPECT_EQ(out, apply_mask_policy(v, eps));
    }
}

TEST(MaskedReconstruction, MeansOverSurvivingPixels) {
    ScalarMap loss(2, 2);
    loss(0, 0) = 1;
    loss(0, 1) = 2;
    loss(1, 0) = 3;
    loss(1, 1) = 4;
    DynamicMask mu(2, 2, 1, 1);
    const Mask ones(2, 2, 1, 1);
    EXPECT_EQ(masked_reconstruction_loss(loss, mu, ones, ones), 2.5);
    mu(0, 1) = 0;
    mu(1, 1) = 0;
    EXPECT_EQ(masked_reconstruction_loss(loss, mu, ones, ones), 2.0);
    Mask automask = ones;
    automask(0, 0) = 0;
    EXPECT_EQ(masked_reconstruction_loss(loss, DynamicMask(2, 2, 1, 1), automask, ones), 3.0);
    EXPECT_THROW(masked_reconstruction_loss(loss, DynamicMask(2, 2, 1, 0), ones, ones), Error);
}
