#pragma once

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "grid.hpp"

namespace syndist {

/// Single-headed local self-attention over a k x k memory block.
/// Relative embeddings are split into row and column halves indexed by the
/// offsets a - i and b - j in [-(k-1)/2, (k-1)/2].
struct AttentionParams {
    int k = 3;
    Eigen::MatrixXd w_query;    // d_out x d_in
    Eigen::MatrixXd w_key;      // d_out x d_in
    Eigen::MatrixXd w_value;    // d_out x d_in
    Eigen::MatrixXd row_embed;  // k x d_row
    Eigen::MatrixXd col_embed;  // k x (d_out - d_row)

    int d_in() const { return static_cast<int>(w_query.cols()); }
    int d_out() const { return static_cast<int>(w_query.rows()); }

    void validate() const {
        if (k < 1 || k % 2 == 0) throw Error(ErrorKind::InvalidArgument, "attention extent k must be odd");
        if (w_key.rows() != d_out() || w_value.rows() != d_out() || w_key.cols() != d_in() ||
            w_value.cols() != d_in()) {
            throw Error(ErrorKind::InvalidArgument, "attention projection shapes disagree");
        }
        if (row_embed.rows() != k || col_embed.rows() != k || row_embed.cols() + col_embed.cols() != d_out()) {
            throw Error(ErrorKind::InvalidArgument, "relative embedding table shape disagrees");
        }
    }

    /// r_{a-i} || r_{b-j}
    Eigen::VectorXd relative(int row_offset, int col_offset) const {
        const int m = k / 2;
        Eigen::VectorXd r(d_out());
        r << row_embed.row(row_offset + m).transpose(), col_embed.row(col_offset + m).transpose();
        return r;
    }

    static AttentionParams random(int k, int d_in, int d_out, std::uint64_t seed);
};

struct AttentionOutput {
    Eigen::VectorXd value;
    Eigen::VectorXd weights;  // softmax over the block, row-major offsets
};

/// Attention of one query against a memory block given in row-major offset
/// order (k*k feature vectors).
inline AttentionOutput attend_block(const Eigen::VectorXd& query_feature, const std::vector<Eigen::VectorXd>& block,
                                    const AttentionParams& p, bool use_rel) {
    const int k = p.k, m = k / 2;
    if (static_cast<int>(block.size()) != k * k) {
        throw Error(ErrorKind::InvalidArgument, "attention block must hold k*k features");
    }
    const Eigen::VectorXd q = p.w_query * query_feature;
    Eigen::VectorXd logits(k * k);
    for (int n = 0; n < k * k; ++n) {
        logits(n) = q.dot(p.w_key * block[n]);
        if (use_rel) logits(n) += q.dot(p.relative(n / k - m, n % k - m));
    }
    const double top = logits.maxCoeff();
    Eigen::VectorXd w = (logits.array() - top).exp();
    w /= w.sum();
    AttentionOutput out{Eigen::VectorXd::Zero(p.d_out()), w};
    for (int n = 0; n < k * k; ++n) out.value += w(n) * (p.w_value * block[n]);
    return out;
}

inline Eigen::VectorXd feature_at(const FeatureMap& x, int y, int col) {
    Eigen::VectorXd f(x.channels());
    for (int c = 0; c < x.channels(); ++c) f(c) = x(y, col, c);
    return f;
}

inline std::vector<Eigen::VectorXd> memory_block(const FeatureMap& x, int y, int col, int k) {
    const int m = k / 2;
    std::vector<Eigen::VectorXd> block;
    block.reserve(k * k);
    for (int dy = -m; dy <= m; ++dy) {
        for (int dx = -m; dx <= m; ++dx) {
            block.push_back(feature_at(x, reflect_index(y + dy, x.height()), reflect_index(col + dx, x.width())));
        }
    }
    return block;
}

/// Local self-attention with reflect padding; relative position logits are
/// added when `use_rel` is set.
inline FeatureMap self_attention(const FeatureMap& x, const AttentionParams& p, bool use_rel) {
    p.validate();
    if (x.channels() != p.d_in()) throw Error(ErrorKind::InvalidArgument, "self_attention: feature depth mismatch");
    FeatureMap out(x.height(), x.width(), p.d_out());
    for (int y = 0; y < x.height(); ++y) {
        for (int col = 0; col < x.width(); ++col) {
            const auto r = attend_block(feature_at(x, y, col), memory_block(x, y, col, p.k), p, use_rel);
            for (int c = 0; c < p.d_out(); ++c) out(y, col, c) = r.value(c);
        }
    }
    return out;
}

/// Pixel-adaptive convolution: spatial weights W[dy][dx] (d_out x d_in),
/// bias and Gaussian guidance-kernel width per output filter.
struct PacParams {
    int k = 3;
    int d_in = 1;
    int d_out = 1;
    std::vector<double> weights;  // [(dy * k + dx) * d_out + o] * d_in + i
    std::vector<double> bias;     // d_out
    std::vector<double> sigma;    // d_out

    double& w(int dy, int dx, int o, int i) { return weights[((dy * k + dx) * d_out + o) * d_in + i]; }
    double w(int dy, int dx, int o, int i) const { return weights[((dy * k + dx) * d_out + o) * d_in + i]; }

    static PacParams zeros(int k, int d_in, int d_out) {
        PacParams p;
        p.k = k;
        p.d_in = d_in;
        p.d_out = d_out;
        p.weights.assign(static_cast<std::size_t>(k) * k * d_in * d_out, 0.0);
        p.bias.assign(d_out, 0.0);
        p.sigma.assign(d_out, 1.0);
        return p;
    }

    void validate() const {
        if (k < 1 || k % 2 == 0) throw Error(ErrorKind::InvalidArgument, "pac kernel size must be odd");
        if (weights.size() != static_cast<std::size_t>(k) * k * d_in * d_out ||
            bias.size() != static_cast<std::size_t>(d_out) || sigma.size() != static_cast<std::size_t>(d_out)) {
            throw Error(ErrorKind::InvalidArgument, "pac parameter shapes disagree");
        }
        for (double s : sigma) {
            if (!(s > 0.0)) throw Error(ErrorKind::InvalidArgument, "pac sigma must be positive");
        }
    }
};

/// exp(-|f_a - f_b|^2 / (2 sigma^2)) between guidance features at two pixels.
inline double pac_kernel(const FeatureMap& guide, int y0, int x0, int y1, int x1, double sigma) {
    double d2 = 0.0;
    for (int c = 0; c < guide.channels(); ++c) {
        const double d = guide(y0, x0, c) - guide(y1, x1, c);
        d2 += d * d;
    }
    return std::exp(-d2 / (2.0 * sigma * sigma));
}

inline FeatureMap pixel_adaptive_conv(const FeatureMap& x, const FeatureMap& guide, const PacParams& p) {
    p.validate();
    require_same_extent(x, guide, "pixel_adaptive_conv");
    if (x.channels() != p.d_in) throw Error(ErrorKind::InvalidArgument, "pixel_adaptive_conv: input depth mismatch");
    const int m = p.k / 2;
    FeatureMap out(x.height(), x.width(), p.d_out);
    for (int y = 0; y < x.height(); ++y) {
        for (int col = 0; col < x.width(); ++col) {
            for (int o = 0; o < p.d_out; ++o) {
                double acc = p.bias[o];
                for (int dy = -m; dy <= m; ++dy) {
                    const int yy = reflect_index(y + dy, x.height());
                    for (int dx = -m; dx <= m; ++dx) {
                        const int xx = reflect_index(col + dx, x.width());
                        const double kern = pac_kernel(guide, y, col, yy, xx, p.sigma[o]);
                        double conv = 0.0;
                        for (int i = 0; i < p.d_in; ++i) conv += p.w(dy + m, dx + m, o, i) * x(yy, xx, i);
                        acc += kern * conv;
                    }
                }
                out(y, col, o) = acc;
            }
        }
    }
    return out;
}

inline AttentionParams AttentionParams::random(int k, int d_in, int d_out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 0.5);
    auto fill = [&](int r, int c) {
        Eigen::MatrixXd m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = n(rng);
        return m;
    };
    AttentionParams p;
    p.k = k;
    p.w_query = fill(d_out, d_in);
    p.w_key = fill(d_out, d_in);
    p.w_value = fill(d_out, d_in);
    p.row_embed = fill(k, d_out / 2);
    p.col_embed = fill(k, d_out - d_out / 2);
    return p;
}

}  // namespace syndist
