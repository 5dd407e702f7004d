#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <unsupported/Eigen/AutoDiff>

#include "grid.hpp"

namespace syndist {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Point3 = Eigen::Vector3d;

template <typename T>
Eigen::Matrix<T, 3, 3> hat(const Eigen::Matrix<T, 3, 1>& w) {
    Eigen::Matrix<T, 3, 3> m;
    m << T(0), -w(2), w(1),
         w(2), T(0), -w(0),
         -w(1), w(0), T(0);
    return m;
}

template <typename T>
struct RigidTransform {
    Eigen::Matrix<T, 3, 3> rotation;
    Eigen::Matrix<T, 3, 1> translation;
};

/// SE(3) exponential of a twist ordered (rotation axis-angle, translation).
/// Coefficients are written in terms of theta^2 so that automatic
/// differentiation through the small-angle branch stays finite.
template <typename T>
RigidTransform<T> se3_exp_generic(const Eigen::Matrix<T, 6, 1>& xi) {
    using std::cos;
    using std::sin;
    using std::sqrt;
    const Eigen::Matrix<T, 3, 1> omega = xi.template head<3>();
    const Eigen::Matrix<T, 3, 1> rho = xi.template tail<3>();
    const T theta_sq = omega.squaredNorm();
    T a, b, c;
    if (theta_sq < T(1e-10)) {
        a = T(1) - theta_sq / T(6);
        b = T(0.5) - theta_sq / T(24);
        c = T(1) / T(6) - theta_sq / T(120);
    } else {
        const T theta = sqrt(theta_sq);
        a = sin(theta) / theta;
        b = (T(1) - cos(theta)) / theta_sq;
        c = (theta - sin(theta)) / (theta_sq * theta);
    }
    const Eigen::Matrix<T, 3, 3> w = hat(omega);
    const Eigen::Matrix<T, 3, 3> w2 = w * w;
    const Eigen::Matrix<T, 3, 3> eye = Eigen::Matrix<T, 3, 3>::Identity();
    RigidTransform<T> out;
    out.rotation = eye + a * w + b * w2;
    out.translation = (eye + b * w + c * w2) * rho;
    return out;
}

/// Rigid transform T_{t->t'} mapping points of frame t into frame t'.
class Pose {
  public:
    Pose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}
    Pose(const Mat3& rotation, const Vec3& translation)
        : rotation_(rotation), translation_(translation) {}

    static Pose identity() { return {}; }

    const Mat3& rotation() const noexcept { return rotation_; }
    const Vec3& translation() const noexcept { return translation_; }

    Point3 apply(const Point3& p) const { return rotation_ * p + translation_; }
    Point3 operator*(const Point3& p) const { return apply(p); }

    /// this * other: applies `other` first.
    Pose compose(const Pose& other) const {
        return {rotation_ * other.rotation_, rotation_ * other.translation_ + translation_};
    }
    Pose operator*(const Pose& other) const { return compose(other); }

    Pose inverse() const {
        const Mat3 rt = rotation_.transpose();
        return {rt, -rt * translation_};
    }

    Pose with_translation(const Vec3& t) const { return {rotation_, t}; }

    /// Inverse of se3_exp on the principal branch.
    Vec6 twist() const;

  private:
    Mat3 rotation_;
    Vec3 translation_;
};

inline Pose se3_exp(const Vec6& twist) {
    for (int i = 0; i < 6; ++i) {
        if (!std::isfinite(twist(i))) {
            throw Error(ErrorKind::InvalidArgument, "se3_exp: non-finite twist component");
        }
    }
    const auto rt = se3_exp_generic<double>(twist);
    return {rt.rotation, rt.translation};
}

inline Vec6 Pose::twist() const {
    const Eigen::AngleAxisd aa(rotation_);
    const Vec3 omega = aa.axis() * aa.angle();
    const double theta_sq = omega.squaredNorm();
    double b, c;
    if (theta_sq < 1e-10) {
        b = 0.5 - theta_sq / 24.0;
        c = 1.0 / 6.0 - theta_sq / 120.0;
    } else {
        const double theta = std::sqrt(theta_sq);
        b = (1.0 - std::cos(theta)) / theta_sq;
        c = (theta - std::sin(theta)) / (theta_sq * theta);
    }
    const Mat3 w = hat<double>(omega);
    const Mat3 v = Mat3::Identity() + b * w + c * w * w;
    Vec6 out;
    out << omega, v.inverse() * translation_;
    return out;
}

/// Derivatives of the rotation and translation of se3_exp(twist) with respect
/// to each twist component.
struct PoseJacobian {
    std::array<Mat3, 6> d_rotation;
    Eigen::Matrix<double, 3, 6> d_translation;
};

inline PoseJacobian se3_exp_jacobian(const Vec6& twist) {
    using Deriv = Eigen::Matrix<double, 6, 1>;
    using AD = Eigen::AutoDiffScalar<Deriv>;
    Eigen::Matrix<AD, 6, 1> xi;
    for (int i = 0; i < 6; ++i) xi(i) = AD(twist(i), 6, i);
    const auto rt = se3_exp_generic<AD>(xi);
    PoseJacobian jac;
    for (int k = 0; k < 6; ++k) {
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) jac.d_rotation[k](r, c) = rt.rotation(r, c).derivatives()(k);
            jac.d_translation(r, k) = rt.translation(r).derivatives()(k);
        }
    }
    return jac;
}

enum class CameraKind { Pinhole, Fisheye };

struct Projection {
    Vec2 pixel = Vec2::Zero();
    bool valid = false;
};

/// Pinhole or polynomial fisheye camera. The fisheye maps the incidence angle
/// theta to the pixel radius r(theta) = a1 t + a2 t^2 + a3 t^3 + a4 t^4.
inline constexpr double kBoundsSlack = 1e-9;

class CameraModel {
  public:
    static constexpr double kDefaultThetaMax = 0.55 * std::numbers::pi;
    static constexpr int kLutSize = 1024;
    static constexpr double kNewtonTol = 1e-10;
    static constexpr int kNewtonMaxIter = 20;

    static CameraModel pinhole(double fx, double fy, double cx, double cy, int width, int height) {
        if (!(fx > 0.0) || !(fy > 0.0)) {
            throw Error(ErrorKind::InvalidArgument, "pinhole focal lengths must be positive");
        }
        CameraModel cam(CameraKind::Pinhole, cx, cy, width, height);
        cam.fx_ = fx;
        cam.fy_ = fy;
        return cam;
    }

    static CameraModel fisheye(const std::array<double, 4>& poly, double cx, double cy, int width,
                               int height, double theta_max = kDefaultThetaMax) {
        if (!(theta_max > 0.0) || theta_max >= std::numbers::pi) {
            throw Error(ErrorKind::InvalidArgument, "fisheye theta_max must lie in (0, pi)");
        }
        CameraModel cam(CameraKind::Fisheye, cx, cy, width, height);
        cam.poly_ = poly;
        cam.theta_max_ = theta_max;
        cam.build_lut();
        return cam;
    }

    CameraKind kind() const noexcept { return kind_; }
    double fx() const noexcept { return fx_; }
    double fy() const noexcept { return fy_; }
    double cx() const noexcept { return cx_; }
    double cy() const noexcept { return cy_; }
    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    const std::array<double, 4>& poly() const noexcept { return poly_; }
    double theta_max() const noexcept { return theta_max_; }

    /// Image bounds [0, W-1] x [0, H-1], widened by kBoundsSlack so rounding
    /// on the border rows and columns does not flip validity.
    bool in_bounds(double u, double v) const noexcept {
        return u >= -kBoundsSlack && v >= -kBoundsSlack && u <= width_ - 1.0 + kBoundsSlack &&
               v <= height_ - 1.0 + kBoundsSlack;
    }

    template <typename T>
    T radius_of(const T& theta) const {
        return theta * (T(poly_[0]) + theta * (T(poly_[1]) + theta * (T(poly_[2]) + theta * T(poly_[3]))));
    }

    double radius_derivative(double theta) const {
        return poly_[0] + theta * (2.0 * poly_[1] + theta * (3.0 * poly_[2] + theta * 4.0 * poly_[3]));
    }

    /// Pixel coordinates of a camera-frame point, no validity checks.
    template <typename T>
    Eigen::Matrix<T, 2, 1> project_raw(const Eigen::Matrix<T, 3, 1>& p) const {
        using std::atan2;
        using std::sqrt;
        Eigen::Matrix<T, 2, 1> px;
        if (kind_ == CameraKind::Pinhole) {
            px(0) = T(fx_) * p(0) / p(2) + T(cx_);
            px(1) = T(fy_) * p(1) / p(2) + T(cy_);
            return px;
        }
        const T rho_sq = p(0) * p(0) + p(1) * p(1);
        T scale;
        if (rho_sq < T(1e-24)) {
            scale = T(poly_[0]) / p(2);
        } else {
            const T rho = sqrt(rho_sq);
            scale = radius_of(atan2(rho, p(2))) / rho;
        }
        px(0) = T(cx_) + scale * p(0);
        px(1) = T(cy_) + scale * p(1);
        return px;
    }

    Projection project(const Point3& p) const {
        Projection out;
        if (!p.allFinite()) return out;
        if (kind_ == CameraKind::Pinhole) {
            if (!(p.z() > 0.0)) return out;
        } else {
            if (p.squaredNorm() == 0.0) return out;
            const double theta = std::atan2(std::hypot(p.x(), p.y()), p.z());
            if (theta > theta_max_) return out;
        }
        out.pixel = project_raw<double>(p);
        out.valid = in_bounds(out.pixel.x(), out.pixel.y());
        return out;
    }

    /// d(pixel)/d(point), 2 x 3.
    Eigen::Matrix<double, 2, 3> project_jacobian(const Point3& p) const {
        Eigen::Matrix<double, 2, 3> jac;
        if (kind_ == CameraKind::Pinhole) {
            const double iz = 1.0 / p.z();
            jac << fx_ * iz, 0.0, -fx_ * p.x() * iz * iz,
                   0.0, fy_ * iz, -fy_ * p.y() * iz * iz;
            return jac;
        }
        using AD = Eigen::AutoDiffScalar<Eigen::Vector3d>;
        Eigen::Matrix<AD, 3, 1> q;
        for (int i = 0; i < 3; ++i) q(i) = AD(p(i), 3, i);
        const auto px = project_raw<AD>(q);
        jac.row(0) = px(0).derivatives().transpose();
        jac.row(1) = px(1).derivatives().transpose();
        return jac;
    }

    /// Incidence angle for a pixel radius: Newton iteration seeded from a
    /// lookup table. Throws out-of-range beyond r(theta_max).
    double theta_from_radius(double radius) const {
        if (radius < 0.0 || !std::isfinite(radius)) {
            throw Error(ErrorKind::OutOfRange, "fisheye radius must be finite and non-negative");
        }
        if (radius > lut_radius_.back() * (1.0 + 1e-12)) {
            throw Error(ErrorKind::OutOfRange, "fisheye radius beyond r(theta_max)");
        }
        if (radius == 0.0) return 0.0;
        const auto it = std::lower_bound(lut_radius_.begin(), lut_radius_.end(), radius);
        const std::size_t hi = std::clamp<std::size_t>(it - lut_radius_.begin(), 1, lut_radius_.size() - 1);
        const std::size_t lo = hi - 1;
        const double step = theta_max_ / (kLutSize - 1);
        const double r0 = lut_radius_[lo], r1 = lut_radius_[hi];
        double theta = step * (lo + (radius - r0) / (r1 - r0));
        for (int iter = 0; iter < kNewtonMaxIter; ++iter) {
            const double delta = (radius_of(theta) - radius) / radius_derivative(theta);
            theta = std::clamp(theta - delta, 0.0, theta_max_);
            if (std::abs(delta) < kNewtonTol) break;
        }
        return theta;
    }

    /// Direction b with unproject(u, v, d) = d * b: unit ray for fisheye,
    /// normalized z = 1 ray for pinhole.
    std::optional<Vec3> ray_base(double u, double v) const {
        if (kind_ == CameraKind::Pinhole) {
            return Vec3((u - cx_) / fx_, (v - cy_) / fy_, 1.0);
        }
        const double dx = u - cx_, dy = v - cy_;
        const double radius = std::hypot(dx, dy);
        if (radius > lut_radius_.back()) return std::nullopt;
        if (radius == 0.0) return Vec3(0.0, 0.0, 1.0);
        const double theta = theta_from_radius(radius);
        const double s = std::sin(theta);
        return Vec3(s * dx / radius, s * dy / radius, std::cos(theta));
    }

    Point3 unproject(double u, double v, double distance) const {
        if (!(distance > 0.0) || !std::isfinite(distance)) {
            throw Error(ErrorKind::InvalidArgument, "unproject: distance must be positive");
        }
        if (!in_bounds(u, v)) {
            throw Error(ErrorKind::OutOfRange, "unproject: pixel outside image bounds");
        }
        const auto base = ray_base(u, v);
        if (!base) throw Error(ErrorKind::OutOfRange, "unproject: radius outside invertible range");
        return distance * *base;
    }

    /// The quantity stored in a DistanceMap for a camera-frame point.
    double point_distance(const Point3& p) const {
        return kind_ == CameraKind::Pinhole ? p.z() : p.norm();
    }

    /// d(point_distance)/d(point).
    Vec3 point_distance_gradient(const Point3& p) const {
        if (kind_ == CameraKind::Pinhole) return Vec3(0.0, 0.0, 1.0);
        return p / p.norm();
    }

  private:
    CameraModel(CameraKind kind, double cx, double cy, int width, int height)
        : kind_(kind), cx_(cx), cy_(cy), width_(width), height_(height) {
        if (width <= 0 || height <= 0) {
            throw Error(ErrorKind::InvalidArgument, "camera image size must be positive");
        }
        if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
            throw Error(ErrorKind::InvalidArgument, "principal point outside the image");
        }
    }

    void build_lut() {
        lut_radius_.resize(kLutSize);
        const double step = theta_max_ / (kLutSize - 1);
        for (int i = 0; i < kLutSize; ++i) lut_radius_[i] = radius_of(step * i);
        for (int i = 1; i < kLutSize; ++i) {
            if (!(lut_radius_[i] > lut_radius_[i - 1])) {
                throw Error(ErrorKind::InvalidArgument,
                            "fisheye polynomial is not strictly increasing on [0, theta_max]");
            }
        }
    }

    CameraKind kind_;
    double fx_ = 0.0, fy_ = 0.0;
    double cx_, cy_;
    int width_, height_;
    std::array<double, 4> poly_{};
    double theta_max_ = kDefaultThetaMax;
    std::vector<double> lut_radius_;
};

/// Metric scale from an odometry translation norm and the model's translation.
inline double recover_scale(double odometry_translation, double estimated_translation) {
    constexpr double kTolerance = 1e-8;
    if (!std::isfinite(odometry_translation) || !std::isfinite(estimated_translation)) {
        throw Error(ErrorKind::InvalidArgument, "recover_scale: non-finite input");
    }
    if (!(estimated_translation > kTolerance)) {
        throw Error(ErrorKind::DegenerateScale, "recover_scale: estimated translation near zero");
    }
    return odometry_translation / estimated_translation;
}

inline void apply_scale(DistanceMap& distances, Pose& pose, double scale) {
    for (auto& d : distances.data()) d *= scale;
    pose = pose.with_translation(pose.translation() * scale);
}

}  // namespace syndist
