#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace syndist {

enum class ErrorKind {
    InvalidArgument,
    OutOfRange,
    DegenerateInput,
    DegenerateScale,
    UnsupportedGradient,
    Divergence,
    Io,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "invalid-argument";
        case ErrorKind::OutOfRange: return "out-of-range";
        case ErrorKind::DegenerateInput: return "degenerate-input";
        case ErrorKind::DegenerateScale: return "degenerate-scale";
        case ErrorKind::UnsupportedGradient: return "unsupported-gradient";
        case ErrorKind::Divergence: return "divergence";
        case ErrorKind::Io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

/// Dense row-major H x W x C array. The tag parameter keeps images, distance
/// maps, label masks and loss maps from being mixed up at call sites.
template <typename T, typename Tag>
class Grid {
  public:
    using value_type = T;

    Grid() = default;
    Grid(int height, int width, int channels = 1, T fill = T{})
        : height_(height), width_(width), channels_(channels) {
        if (height < 0 || width < 0 || channels < 1) {
            throw Error(ErrorKind::InvalidArgument, "grid dimensions must be non-negative");
        }
        data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t pixels() const noexcept { return static_cast<std::size_t>(height_) * width_; }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
    const T& operator()(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }

    std::size_t index(int y, int x, int c = 0) const noexcept {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    template <typename OtherT, typename OtherTag>
    bool same_shape(const Grid<OtherT, OtherTag>& other) const noexcept {
        return height_ == other.height() && width_ == other.width() &&
               channels_ == other.channels();
    }

    template <typename OtherT, typename OtherTag>
    bool same_extent(const Grid<OtherT, OtherTag>& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool operator==(const Grid& other) const = default;

  private:
    int height_ = 0;
    int width_ = 0;
    int channels_ = 1;
    std::vector<T> data_;
};

struct ImageTag {};
struct DistanceTag {};
struct ScalarTag {};
struct LabelTag {};
struct MaskTag {};
struct FeatureTag {};

/// Intensities in [0,1]; 1 or 3 channels.
using Image = Grid<double, ImageTag>;
/// Radial distance (fisheye) or z-depth (pinhole), meters.
using DistanceMap = Grid<double, DistanceTag>;
/// Generic per-pixel scalar field (loss maps, SSIM maps, gradients).
using ScalarMap = Grid<double, ScalarTag>;
using SegMask = Grid<int, LabelTag>;
using Mask = Grid<std::uint8_t, MaskTag>;
using ValidityMask = Mask;
using DynamicMask = Mask;
using FeatureMap = Grid<double, FeatureTag>;

/// Copy the payload of one grid into a grid of another tag.
template <typename ToGrid, typename T, typename Tag>
ToGrid retag(const Grid<T, Tag>& in) {
    ToGrid out(in.height(), in.width(), in.channels());
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = static_cast<typename ToGrid::value_type>(in[i]);
    }
    return out;
}

/// Reflect-101 index (no edge duplication). Degenerates to 0 for n == 1.
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

template <typename A, typename B>
void require_same_extent(const A& a, const B& b, const char* what) {
    if (!a.same_extent(b)) {
        throw Error(ErrorKind::InvalidArgument, std::string(what) + ": shape mismatch");
    }
}

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
    if (!a.same_shape(b)) {
        throw Error(ErrorKind::InvalidArgument, std::string(what) + ": shape mismatch");
    }
}

inline Mask all_ones_mask(int height, int width) { return Mask(height, width, 1, 1); }

inline std::size_t count_set(const Mask& m) {
    return static_cast<std::size_t>(std::count_if(m.data().begin(), m.data().end(),
                                                  [](std::uint8_t v) { return v != 0; }));
}

inline Mask mask_and(const Mask& a, const Mask& b) {
    require_same_extent(a, b, "mask_and");
    Mask out(a.height(), a.width());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (a[i] && b[i]) ? 1 : 0;
    return out;
}

}  // namespace syndist
