#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "syndist/layers.hpp"

using namespace syndist;

namespace {

FeatureMap random_features(int h, int w, int d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    FeatureMap f(h, w, d);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = n(rng);
    return f;
}

PacParams random_pac(int k, int d_in, int d_out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    PacParams p = PacParams::zeros(k, d_in, d_out);
    for (double& w : p.weights) w = n(rng);
    for (double& b : p.bias) b = n(rng);
    for (double& s : p.sigma) s = 0.5 + std::abs(n(rng));
    return p;
}

// Mirror padding without repeating the edge sample: -1 -> 1, n -> n - 2.
int mirror(int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
}

/// Direct correlation of x with the spatial weights, no guidance.
FeatureMap brute_force_conv(const FeatureMap& x, const PacParams& p) {
    const int m = p.k / 2;
    FeatureMap out(x.height(), x.width(), p.d_out);
    for (int y = 0; y < x.height(); ++y)
        for (int c = 0; c < x.width(); ++c)
            for (int o = 0; o < p.d_out; ++o) {
                double acc = p.bias[o];
                for (int dy = 0; dy < p.k; ++dy)
                    for (int dx = 0; dx < p.k; ++dx)
                        for (int i = 0; i < p.d_in; ++i) {
                            acc += p.w(dy, dx, o, i) *
                                   x(mirror(y + dy - m, x.height()), mirror(c + dx - m, x.width()), i);
                        }
                out(y, c, o) = acc;
            }
    return out;
}

double max_abs_diff(const FeatureMap& a, const FeatureMap& b) {
    double e = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) e = std::max(e, std::abs(a[i] - b[i]));
    return e;
}

}  // namespace

TEST(SelfAttention, SingletonBlockReturnsValueProjection) {
    const FeatureMap x = random_features(4, 5, 3, 1);
    const AttentionParams p = AttentionParams::random(1, 3, 2, 2);
    for (bool rel : {false, true}) {
        const FeatureMap z = self_attention(x, p, rel);
        for (int y = 0; y < 4; ++y)
            for (int c = 0; c < 5; ++c) {
                Eigen::VectorXd v(3);
                for (int i = 0; i < 3; ++i) v(i) = x(y, c, i);
                const Eigen::VectorXd want = p.w_value * v;
                for (int o = 0; o < 2; ++o) EXPECT_NEAR(z(y, c, o), want(o), 1e-12);
            }
    }
}

TEST(SelfAttention, HandComputedSoftmax) {
    FeatureMap x(1, 3, 1);
    x[0] = 0;
    x[1] = 1;
    x[2] = 2;
    AttentionParams p;
    p.k = 3;
    p.w_query = p.w_key = p.w_value = Eigen::MatrixXd::Ones(1, 1);
    p.row_embed = Eigen::MatrixXd::Zero(3, 0);
    p.col_embed = Eigen::MatrixXd::Zero(3, 1);
    // a one-row image repeats the row three times in the block, which leaves
    // the softmax over keys (0, 1, 2) unchanged
    const double e = std::exp(1.0);
    const double want = (e + 2 * e * e) / (1 + e + e * e);
    EXPECT_NEAR(self_attention(x, p, false)(0, 1), want, 1e-12);
    EXPECT_NEAR(want, 1.575210, 1e-6);
}

TEST(SelfAttention, PlainAttentionIsPermutationInvariant) {
    const AttentionParams p = AttentionParams::random(3, 4, 6, 3);
    const FeatureMap x = random_features(5, 5, 4, 4);
    const auto block = memory_block(x, 2, 2, 3);
    const Eigen::VectorXd q = feature_at(x, 2, 2);
    const auto base = attend_block(q, block, p, false);
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto shuffled = block;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        EXPECT_LT((attend_block(q, shuffled, p, false).value - base.value).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(SelfAttention, RelativeAttentionIsNotPermutationInvariant) {
    const AttentionParams p = AttentionParams::random(3, 4, 6, 3);
    const FeatureMap x = random_features(5, 5, 4, 4);
    const auto block = memory_block(x, 2, 2, 3);
    const Eigen::VectorXd q = feature_at(x, 2, 2);
    const auto base = attend_block(q, block, p, true);
    auto swapped = block;
    std::reverse(swapped.begin(), swapped.end());
    EXPECT_GT((attend_block(q, swapped, p, true).value - base.value).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(SelfAttention, SoftmaxWeightsSumToOne) {
    const AttentionParams p = AttentionParams::random(5, 2, 4, 6);
    const FeatureMap x = random_features(6, 6, 2, 7);
    for (bool rel : {false, true})
        for (int y = 0; y < 6; ++y)
            for (int c = 0; c < 6; ++c) {
                const auto out = attend_block(feature_at(x, y, c), memory_block(x, y, c, 5), p, rel);
                EXPECT_NEAR(out.weights.sum(), 1.0, 1e-6);
                EXPECT_GE(out.weights.minCoeff(), 0.0);
            }
}

TEST(SelfAttention, RejectsBadShapes) {
    AttentionParams p = AttentionParams::random(3, 2, 4, 8);
    EXPECT_THROW(self_attention(random_features(3, 3, 3, 9), p, false), Error);
    p.k = 2;
    EXPECT_THROW(self_attention(random_features(3, 3, 2, 9), p, false), Error);
}

TEST(PixelAdaptiveConv, ConstantGuidanceEqualsConvolution) {
    const FeatureMap x = random_features(8, 8, 2, 10);
    const FeatureMap guide(8, 8, 3, 0.7);
    const PacParams p = random_pac(3, 2, 3, 11);
    EXPECT_LT(max_abs_diff(pixel_adaptive_conv(x, guide, p), brute_force_conv(x, p)), 1e-6);
    const PacParams p5 = random_pac(5, 2, 1, 12);
    EXPECT_LT(max_abs_diff(pixel_adaptive_conv(x, guide, p5), brute_force_conv(x, p5)), 1e-6);
}

TEST(PixelAdaptiveConv, WideKernelCollapsesToConvolution) {
    const FeatureMap x = random_features(8, 8, 2, 13);
    const FeatureMap guide = random_features(8, 8, 3, 14);
    PacParams p = random_pac(3, 2, 2, 15);
    for (double& s : p.sigma) s = 1e6;
    EXPECT_LT(max_abs_diff(pixel_adaptive_conv(x, guide, p), brute_force_conv(x, p)), 1e-6);
    for (double& s : p.sigma) s = 0.3;
    EXPECT_GT(max_abs_diff(pixel_adaptive_conv(x, guide, p), brute_force_conv(x, p)), 1e-3);
}

TEST(PixelAdaptiveConv, UnitKernelIsAffine) {
    const FeatureMap x = random_features(4, 4, 2, 16);
    const FeatureMap guide = random_features(4, 4, 2, 17);
    const PacParams p = random_pac(1, 2, 2, 18);
    const FeatureMap out = pixel_adaptive_conv(x, guide, p);
    for (int y = 0; y < 4; ++y)
        for (int c = 0; c < 4; ++c)
            for (int o = 0; o < 2; ++o) {
                const double want = p.w(0, 0, o, 0) * x(y, c, 0) + p.w(0, 0, o, 1) * x(y, c, 1) + p.bias[o];
                EXPECT_NEAR(out(y, c, o), want, 1e-12);
            }
}

TEST(PixelAdaptiveConv, KernelBoundsAndMonotoneInSigma) {
    const FeatureMap guide = random_features(6, 6, 3, 19);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) {
            double prev = 2.0;
            for (double s : {10.0, 3.0, 1.0, 0.5, 0.1}) {
                const double k = pac_kernel(guide, 2, 3, y, x, s);
                EXPECT_LE(k, 1.0);
                EXPECT_GE(k, 0.0);
                EXPECT_LE(k, prev);
                prev = k;
            }
            EXPECT_GT(pac_kernel(guide, 2, 3, y, x, 10.0), 0.0);
        }
    EXPECT_EQ(pac_kernel(guide, 1, 1, 1, 1, 0.01), 1.0);
}

TEST(PixelAdaptiveConv, RejectsBadParameters) {
    const FeatureMap x = random_features(4, 4, 1, 20);
    PacParams p = random_pac(3, 1, 1, 21);
    p.sigma[0] = 0.0;
    EXPECT_THROW(pixel_adaptive_conv(x, x, p), Error);
    p.sigma[0] = 1.0;
    EXPECT_THROW(pixel_adaptive_conv(x, random_features(4, 5, 1, 22), p), Error);
    EXPECT_THROW(pixel_adaptive_conv(random_features(4, 4, 2, 23), random_features(4, 4, 2, 23), p), Error);
}
