#pragma once

#include <cmath>
#include <vector>

#include "geometry.hpp"
#include "grid.hpp"

namespace syndist {

enum class SampleMode { Bilinear, Nearest };

/// H x W x 2 continuous pixel coordinates (u, v), pixel centers at integers.
using CoordMap = ScalarMap;

struct SampleResult {
    Image image;
    ValidityMask valid;
};

namespace detail {

struct BilinearStencil {
    int x0, x1, y0, y1;
    double fx, fy;
};

inline BilinearStencil bilinear_stencil(double u, double v, int width, int height) {
    BilinearStencil s{};
    s.x0 = static_cast<int>(std::floor(u));
    s.y0 = static_cast<int>(std::floor(v));
    if (width >= 2) s.x0 = std::min(s.x0, width - 2);
    if (height >= 2) s.y0 = std::min(s.y0, height - 2);
    s.x0 = std::max(s.x0, 0);
    s.y0 = std::max(s.y0, 0);
    s.x1 = std::min(s.x0 + 1, width - 1);
    s.y1 = std::min(s.y0 + 1, height - 1);
    s.fx = u - s.x0;
    s.fy = v - s.y0;
    return s;
}

inline bool sample_in_bounds(double u, double v, int width, int height) {
    return std::isfinite(u) && std::isfinite(v) && u >= -kBoundsSlack && v >= -kBoundsSlack &&
           u <= width - 1.0 + kBoundsSlack && v <= height - 1.0 + kBoundsSlack;
}

template <typename GridT>
double bilinear(const GridT& g, const BilinearStencil& s, int c) {
    const double top = (1.0 - s.fx) * g(s.y0, s.x0, c) + s.fx * g(s.y0, s.x1, c);
    const double bottom = (1.0 - s.fx) * g(s.y1, s.x0, c) + s.fx * g(s.y1, s.x1, c);
    return (1.0 - s.fy) * top + s.fy * bottom;
}

/// (d/du, d/dv) of the bilinear interpolant inside the stencil cell.
template <typename GridT>
Vec2 bilinear_gradient(const GridT& g, const BilinearStencil& s, int c) {
    const double du = (1.0 - s.fy) * (g(s.y0, s.x1, c) - g(s.y0, s.x0, c)) +
                      s.fy * (g(s.y1, s.x1, c) - g(s.y1, s.x0, c));
    const double dv = (1.0 - s.fx) * (g(s.y1, s.x0, c) - g(s.y0, s.x0, c)) +
                      s.fx * (g(s.y1, s.x1, c) - g(s.y0, s.x1, c));
    return {du, dv};
}

inline int nearest_index(double x) { return static_cast<int>(std::floor(x + 0.5)); }

}  // namespace detail

/// Resample an image at continuous coordinates; out-of-bounds samples are
/// zero with validity 0.
inline SampleResult sample(const Image& img, const CoordMap& coords, SampleMode mode) {
    if (coords.channels() != 2) {
        throw Error(ErrorKind::InvalidArgument, "sample: coordinates need two channels");
    }
    SampleResult out{Image(coords.height(), coords.width(), img.channels(), 0.0),
                     ValidityMask(coords.height(), coords.width(), 1, 0)};
    for (int y = 0; y < coords.height(); ++y) {
        for (int x = 0; x < coords.width(); ++x) {
            const double u = coords(y, x, 0), v = coords(y, x, 1);
            if (!detail::sample_in_bounds(u, v, img.width(), img.height())) continue;
            out.valid(y, x) = 1;
            if (mode == SampleMode::Bilinear) {
                const auto s = detail::bilinear_stencil(u, v, img.width(), img.height());
                for (int c = 0; c < img.channels(); ++c) out.image(y, x, c) = detail::bilinear(img, s, c);
            } else {
                const int xi = detail::nearest_index(u), yi = detail::nearest_index(v);
                for (int c = 0; c < img.channels(); ++c) out.image(y, x, c) = img(yi, xi, c);
            }
        }
    }
    return out;
}

/// Per-pixel geometry of warping frame t into a neighbouring frame:
/// back-projected point, transformed point, source pixel and derivatives.
struct WarpField {
    int height = 0;
    int width = 0;
    std::vector<Vec3> base;         // unproject(ij, d) = d * base
    std::vector<Point3> point;      // T * unproject(ij, D(ij))
    std::vector<Vec2> pixel;        // projection of `point` into the source
    std::vector<Vec2> d_pixel_d_distance;
    std::vector<Eigen::Matrix<double, 2, 6>> d_pixel_d_twist;  // empty unless requested
    ValidityMask valid;             // projection valid and inside source bounds
    CoordMap coords() const {
        CoordMap c(height, width, 2);
        for (std::size_t i = 0; i < pixel.size(); ++i) {
            c[2 * i] = pixel[i].x();
            c[2 * i + 1] = pixel[i].y();
        }
        return c;
    }
};

inline void require_positive(const DistanceMap& d, const char* what) {
    for (double v : d.data()) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw Error(ErrorKind::InvalidArgument, std::string(what) + ": distances must be positive");
        }
    }
}

inline WarpField compute_warp_field(const DistanceMap& distance, const Pose& pose,
                                    const CameraModel& cam, const PoseJacobian* pose_jac = nullptr) {
    require_positive(distance, "warp");
    if (distance.height() != cam.height() || distance.width() != cam.width()) {
        throw Error(ErrorKind::InvalidArgument, "warp: distance map does not match camera size");
    }
    WarpField f;
    f.height = distance.height();
    f.width = distance.width();
    const std::size_t n = distance.pixels();
    f.base.assign(n, Vec3::Zero());
    f.point.assign(n, Point3::Zero());
    f.pixel.assign(n, Vec2(-1.0, -1.0));
    f.d_pixel_d_distance.assign(n, Vec2::Zero());
    if (pose_jac) f.d_pixel_d_twist.assign(n, Eigen::Matrix<double, 2, 6>::Zero());
    f.valid = ValidityMask(f.height, f.width, 1, 0);
    for (int y = 0; y < f.height; ++y) {
        for (int x = 0; x < f.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * f.width + x;
            const auto base = cam.ray_base(x, y);
            if (!base) continue;
            f.base[i] = *base;
            const Point3 p = distance(y, x) * *base;
            const Point3 q = pose.apply(p);
            f.point[i] = q;
            const Projection proj = cam.project(q);
            f.pixel[i] = proj.pixel;
            if (!proj.valid) continue;
            f.valid[i] = 1;
            const Eigen::Matrix<double, 2, 3> jac = cam.project_jacobian(q);
            f.d_pixel_d_distance[i] = jac * (pose.rotation() * *base);
            if (pose_jac) {
                Eigen::Matrix<double, 3, 6> dq;
                for (int k = 0; k < 6; ++k) {
                    dq.col(k) = pose_jac->d_rotation[k] * p + pose_jac->d_translation.col(k);
                }
                f.d_pixel_d_twist[i] = jac * dq;
            }
        }
    }
    return f;
}

/// Warped image plus, for bilinear sampling, the image gradient at each
/// sample location (used by the loss adjoints).
struct ViewSynthesis {
    Image image;
    ValidityMask valid;
    Image d_du;
    Image d_dv;
};

inline ViewSynthesis sample_field(const Image& src, const WarpField& field, SampleMode mode,
                                  bool with_gradient) {
    if (with_gradient && mode == SampleMode::Nearest) {
        throw Error(ErrorKind::UnsupportedGradient, "nearest-neighbour sampling is not differentiable");
    }
    const int ch = src.channels();
    ViewSynthesis out{Image(field.height, field.width, ch, 0.0), ValidityMask(field.height, field.width, 1, 0),
                      {}, {}};
    if (with_gradient) {
        out.d_du = Image(field.height, field.width, ch, 0.0);
        out.d_dv = Image(field.height, field.width, ch, 0.0);
    }
    for (int y = 0; y < field.height; ++y) {
        for (int x = 0; x < field.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * field.width + x;
            if (!field.valid[i]) continue;
            const double u = field.pixel[i].x(), v = field.pixel[i].y();
            if (!detail::sample_in_bounds(u, v, src.width(), src.height())) continue;
            out.valid[i] = 1;
            if (mode == SampleMode::Nearest) {
                const int xi = detail::nearest_index(u), yi = detail::nearest_index(v);
                for (int c = 0; c < ch; ++c) out.image(y, x, c) = src(yi, xi, c);
                continue;
            }
            const auto s = detail::bilinear_stencil(u, v, src.width(), src.height());
            for (int c = 0; c < ch; ++c) {
                out.image(y, x, c) = detail::bilinear(src, s, c);
                if (with_gradient) {
                    const Vec2 g = detail::bilinear_gradient(src, s, c);
                    out.d_du(y, x, c) = g.x();
                    out.d_dv(y, x, c) = g.y();
                }
            }
        }
    }
    return out;
}

/// Reconstruct the target frame from a source frame, the target's distance
/// map and T_{t->t'}.
inline SampleResult synthesize_view(const Image& src, const DistanceMap& distance, const Pose& pose,
                                    const CameraModel& cam, SampleMode mode = SampleMode::Bilinear) {
    auto field = compute_warp_field(distance, pose, cam);
    auto view = sample_field(src, field, mode, false);
    return {std::move(view.image), std::move(view.valid)};
}

struct SegWarp {
    SegMask labels;  // 0 where invalid
    ValidityMask valid;
};

inline SegWarp warp_segmentation(const SegMask& src, const DistanceMap& distance, const Pose& pose,
                                 const CameraModel& cam) {
    const auto field = compute_warp_field(distance, pose, cam);
    SegWarp out{SegMask(field.height, field.width, 1, 0), ValidityMask(field.height, field.width, 1, 0)};
    for (int y = 0; y < field.height; ++y) {
        for (int x = 0; x < field.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * field.width + x;
            if (!field.valid[i]) continue;
            const double u = field.pixel[i].x(), v = field.pixel[i].y();
            if (!detail::sample_in_bounds(u, v, src.width(), src.height())) continue;
            out.valid[i] = 1;
            out.labels[i] = src(detail::nearest_index(v), detail::nearest_index(u));
        }
    }
    return out;
}

/// The two sides of the cross-sequence distance consistency term for one
/// direction t -> t'.
struct WarpedDistancePair {
    ScalarMap transformed;  // distance of T * unproject(ij, D_t(ij))
    ScalarMap sampled;      // D_t' bilinearly sampled at the projected pixel
    ValidityMask valid;
};

inline WarpedDistancePair project_distances(const DistanceMap& d_target, const DistanceMap& d_other,
                                            const Pose& pose, const CameraModel& cam) {
    require_positive(d_other, "project_distances");
    const auto field = compute_warp_field(d_target, pose, cam);
    WarpedDistancePair out{ScalarMap(field.height, field.width), ScalarMap(field.height, field.width),
                           ValidityMask(field.height, field.width, 1, 0)};
    for (std::size_t i = 0; i < d_target.pixels(); ++i) {
        if (!field.valid[i]) continue;
        const double u = field.pixel[i].x(), v = field.pixel[i].y();
        if (!detail::sample_in_bounds(u, v, d_other.width(), d_other.height())) continue;
        out.valid[i] = 1;
        out.transformed[i] = cam.point_distance(field.point[i]);
        const auto s = detail::bilinear_stencil(u, v, d_other.width(), d_other.height());
        out.sampled[i] = detail::bilinear(d_other, s, 0);
    }
    return out;
}

}  // namespace syndist
