#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "grid.hpp"

namespace syndist {

/// Class ids of the synthetic scene schema.
namespace classes {
inline constexpr int kRoad = 1;
inline constexpr int kBuilding = 2;
inline constexpr int kVehicle = 3;
inline constexpr int kPedestrian = 4;
inline constexpr int kRider = 5;
inline constexpr int kCount = 5;
}  // namespace classes

/// Infinite textured plane n . X = offset in the frame-t camera coordinates.
struct ScenePlane {
    Vec3 normal{0.0, 0.0, 1.0};
    double offset = 10.0;
    int class_id = classes::kBuilding;
    int texture_id = 0;
    double texture_scale = 2.5;  // meters per coarsest lattice cell
};

/// Fronto-parallel textured rectangle x in [x0, x1], y in [y0, y1] at
/// z = depth in frame t, displaced by k * velocity in frame t + k.
struct SceneObject {
    int class_id = classes::kVehicle;
    double x0 = -1.0, x1 = 1.0, y0 = -1.0, y1 = 1.0;
    double depth = 8.0;
    Vec3 velocity = Vec3::Zero();
    int texture_id = 1;
    double texture_scale = 0.8;
};

struct SceneSpec {
    CameraModel camera = CameraModel::pinhole(64.0, 64.0, 63.5, 31.5, 128, 64);
    std::vector<ScenePlane> planes;
    std::vector<SceneObject> objects;
    Vec6 ego_twist = Vec6::Zero();  // T_{t -> t+1}
    std::uint64_t seed = 0;
    double noise_level = 0.0;       // additive Gaussian sigma
    double outlier_fraction = 0.0;  // pixels replaced by uniform noise
    /// Side of the square outlier patches; each patch takes one random
    /// intensity. 1 corrupts independent pixels.
    int outlier_patch = 1;
    int channels = 1;
};

struct GroundTruth {
    Image image_prev, image_target, image_next;
    DistanceMap distance_prev, distance_target, distance_next;
    SegMask seg_prev, seg_target, seg_next;
    Pose to_prev;  // T_{t -> t-1}
    Pose to_next;  // T_{t -> t+1}
};

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

inline double lattice_value(std::int64_t i, std::int64_t j, std::uint64_t salt) {
    const std::uint64_t h = mix64(static_cast<std::uint64_t>(i) * 0x9E3779B97F4A7C15ULL ^
                                  mix64(static_cast<std::uint64_t>(j) + 0x632BE59BD9B4E019ULL) ^ salt);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double smootherstep(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

inline double value_noise(double u, double v, std::uint64_t salt) {
    const double fu = std::floor(u), fv = std::floor(v);
    const auto i = static_cast<std::int64_t>(fu), j = static_cast<std::int64_t>(fv);
    const double tu = smootherstep(u - fu), tv = smootherstep(v - fv);
    const double a = lattice_value(i, j, salt), b = lattice_value(i + 1, j, salt);
    const double c = lattice_value(i, j + 1, salt), d = lattice_value(i + 1, j + 1, salt);
    return (1 - tv) * ((1 - tu) * a + tu * b) + tv * ((1 - tu) * c + tu * d);
}

}  // namespace detail

/// Three-octave value noise mapped into [0.1, 0.9]. Octaves are offset so
/// their lattice zero-gradient points do not coincide.
inline double procedural_texture(double u, double v, int texture_id, std::uint64_t seed) {
    const std::uint64_t salt = detail::mix64(seed * 1315423911ULL + static_cast<std::uint64_t>(texture_id) + 1);
    double sum = 0.0, norm = 0.0, amp = 1.0, freq = 1.0;
    for (int octave = 0; octave < 3; ++octave) {
        sum += amp * detail::value_noise(u * freq + 0.37 * octave, v * freq + 0.71 * octave, salt + octave);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    return 0.1 + 0.8 * (sum / norm);
}

namespace detail {

struct Hit {
    double lambda = std::numeric_limits<double>::infinity();
    int class_id = 0;
    double shade = 0.0;
};

inline std::pair<Vec3, Vec3> plane_basis(const Vec3& n) {
    const Vec3 helper = std::abs(n.y()) < 0.9 ? Vec3(0.0, 1.0, 0.0) : Vec3(1.0, 0.0, 0.0);
    const Vec3 e1 = helper.cross(n).normalized();
    return {e1, n.cross(e1)};
}

/// Cast one ray (origin, dir in frame-t coordinates) at frame offset k.
inline Hit cast_ray(const SceneSpec& spec, const Vec3& origin, const Vec3& dir, int k, int channel) {
    Hit best;
    for (const auto& pl : spec.planes) {
        const Vec3 n = pl.normal.normalized();
        const double denom = n.dot(dir);
        if (std::abs(denom) < 1e-12) continue;
        const double lambda = (pl.offset - n.dot(origin)) / denom;
        if (!(lambda > 1e-9) || lambda >= best.lambda) continue;
        const Vec3 x = origin + lambda * dir;
        const auto [e1, e2] = plane_basis(n);
        best.lambda = lambda;
        best.class_id = pl.class_id;
        best.shade = procedural_texture(e1.dot(x) / pl.texture_scale, e2.dot(x) / pl.texture_scale,
                                        pl.texture_id * 3 + channel, spec.seed);
    }
    for (const auto& ob : spec.objects) {
        const Vec3 shift = k * ob.velocity;
        const double z = ob.depth + shift.z();
        if (std::abs(dir.z()) < 1e-12) continue;
        const double lambda = (z - origin.z()) / dir.z();
        if (!(lambda > 1e-9) || lambda >= best.lambda) continue;
        const Vec3 x = origin + lambda * dir;
        const double lx = x.x() - shift.x(), ly = x.y() - shift.y();
        if (lx < ob.x0 || lx > ob.x1 || ly < ob.y0 || ly > ob.y1) continue;
        best.lambda = lambda;
        best.class_id = ob.class_id;
        best.shade = procedural_texture(lx / ob.texture_scale, ly / ob.texture_scale, ob.texture_id * 3 + channel,
                                        spec.seed);
    }
    return best;
}

struct Frame {
    Image image;
    DistanceMap distance;
    SegMask seg;
};

inline Frame render_frame(const SceneSpec& spec, const Pose& to_frame, int k) {
    const auto& cam = spec.camera;
    const int h = cam.height(), w = cam.width();
    Frame f{Image(h, w, spec.channels), DistanceMap(h, w), SegMask(h, w)};
    const Pose from_frame = to_frame.inverse();
    const Vec3 origin = from_frame.translation();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto base = cam.ray_base(x, y);
            if (!base) throw Error(ErrorKind::DegenerateInput, "make_scene: pixel outside the camera field of view");
            const Vec3 dir = from_frame.rotation() * *base;
            for (int c = 0; c < spec.channels; ++c) {
                const Hit hit = cast_ray(spec, origin, dir, k, c);
                if (!std::isfinite(hit.lambda)) {
                    throw Error(ErrorKind::DegenerateInput, "make_scene: empty frustum, a ray hits no primitive");
                }
                f.image(y, x, c) = hit.shade;
                if (c == 0) {
                    // |base| is the distance unit: z = 1 (pinhole) or unit ray (fisheye)
                    f.distance(y, x) = hit.lambda;
                    f.seg(y, x) = hit.class_id;
                }
            }
        }
    }
    return f;
}

inline void corrupt(Image& img, const SceneSpec& spec, int frame_index) {
    if (spec.noise_level <= 0.0 && spec.outlier_fraction <= 0.0) return;
    if (spec.outlier_patch < 1) throw Error(ErrorKind::InvalidArgument, "make_scene: outlier_patch must be >= 1");
    std::mt19937_64 rng(detail::mix64(spec.seed * 7919ULL + static_cast<std::uint64_t>(frame_index + 2)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    if (spec.outlier_patch <= 1) {
        for (auto& v : img.data()) {
            if (spec.noise_level > 0.0) v = std::clamp(v + spec.noise_level * gauss(rng), 0.0, 1.0);
            if (spec.outlier_fraction > 0.0 && uni(rng) < spec.outlier_fraction) v = uni(rng);
        }
        return;
    }
    if (spec.noise_level > 0.0) {
        for (auto& v : img.data()) v = std::clamp(v + spec.noise_level * gauss(rng), 0.0, 1.0);
    }
    // patch grid with a random phase per frame
    const int k = spec.outlier_patch;
    const int oy = static_cast<int>(uni(rng) * k), ox = static_cast<int>(uni(rng) * k);
    for (int by = -oy; by < img.height(); by += k) {
        for (int bx = -ox; bx < img.width(); bx += k) {
            if (!(uni(rng) < spec.outlier_fraction)) continue;
            const double value = uni(rng);
            for (int y = std::max(by, 0); y < std::min(by + k, img.height()); ++y)
                for (int x = std::max(bx, 0); x < std::min(bx + k, img.width()); ++x)
                    for (int c = 0; c < img.channels(); ++c) img(y, x, c) = value;
        }
    }
}

}  // namespace detail

/// Ray-cast three consecutive frames with exact distances and labels.
inline GroundTruth make_scene(const SceneSpec& spec) {
    if (spec.planes.empty() && spec.objects.empty()) {
        throw Error(ErrorKind::DegenerateInput, "make_scene: scene has no primitives");
    }
    if (spec.channels != 1 && spec.channels != 3) {
        throw Error(ErrorKind::InvalidArgument, "make_scene: images have 1 or 3 channels");
    }
    if (!(spec.noise_level >= 0.0) || !std::isfinite(spec.noise_level) || !(spec.outlier_fraction >= 0.0) ||
        !(spec.outlier_fraction <= 1.0)) {
        throw Error(ErrorKind::InvalidArgument, "make_scene: noise_level >= 0 and outlier_fraction in [0, 1]");
    }
    for (const auto& pl : spec.planes) {
        if (!(pl.offset > 0.0) || pl.normal.norm() == 0.0) {
            throw Error(ErrorKind::InvalidArgument, "make_scene: planes must lie in front of the camera");
        }
    }
    for (const auto& ob : spec.objects) {
        if (!(ob.depth > 0.0) || !(ob.x1 > ob.x0) || !(ob.y1 > ob.y0)) {
            throw Error(ErrorKind::InvalidArgument, "make_scene: object must be a proper rectangle in front");
        }
    }
    GroundTruth gt;
    gt.to_next = se3_exp(spec.ego_twist);
    gt.to_prev = gt.to_next.inverse();
    auto prev = detail::render_frame(spec, gt.to_prev, -1);
    auto target = detail::render_frame(spec, Pose::identity(), 0);
    auto next = detail::render_frame(spec, gt.to_next, 1);
    detail::corrupt(prev.image, spec, -1);
    detail::corrupt(target.image, spec, 0);
    detail::corrupt(next.image, spec, 1);
    gt.image_prev = std::move(prev.image);
    gt.image_target = std::move(target.image);
    gt.image_next = std::move(next.image);
    gt.distance_prev = std::move(prev.distance);
    gt.distance_target = std::move(target.distance);
    gt.distance_next = std::move(next.distance);
    gt.seg_prev = std::move(prev.seg);
    gt.seg_target = std::move(target.seg);
    gt.seg_next = std::move(next.seg);
    return gt;
}

// --------------------------------------------------------------- metrics

struct DepthMetrics {
    double abs_rel = 0.0;
    double sq_rel = 0.0;
    double rmse = 0.0;
    double rmse_log = 0.0;
    double a1 = 0.0;  // delta < 1.25
    double a2 = 0.0;  // delta < 1.25^2
    double a3 = 0.0;  // delta < 1.25^3
    std::size_t count = 0;
};

/// Error metrics over pixels with 0 < gt <= cap (and inside `region` when
/// given); predictions and ground truth clamped to [1e-3, cap].
inline DepthMetrics depth_metrics(const DistanceMap& pred, const DistanceMap& gt, double cap = 40.0,
                                  const Mask* region = nullptr) {
    require_same_extent(pred, gt, "depth_metrics");
    if (region) require_same_extent(pred, *region, "depth_metrics");
    constexpr double kMin = 1e-3;
    DepthMetrics m;
    double sum_abs = 0, sum_sq = 0, sum_se = 0, sum_log = 0;
    std::size_t n1 = 0, n2 = 0, n3 = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (!(gt[i] > 0.0) || gt[i] > cap) continue;
        if (region && !(*region)[i]) continue;
        const double g = std::clamp(gt[i], kMin, cap);
        const double p = std::clamp(pred[i], kMin, cap);
        const double diff = p - g;
        sum_abs += std::abs(diff) / g;
        sum_sq += diff * diff / g;
        sum_se += diff * diff;
        const double dl = std::log(p) - std::log(g);
        sum_log += dl * dl;
        const double ratio = std::max(p / g, g / p);
        n1 += ratio < 1.25;
        n2 += ratio < 1.25 * 1.25;
        n3 += ratio < 1.25 * 1.25 * 1.25;
        ++m.count;
    }
    if (m.count == 0) throw Error(ErrorKind::DegenerateInput, "depth_metrics: empty evaluation set");
    const double n = static_cast<double>(m.count);
    m.abs_rel = sum_abs / n;
    m.sq_rel = sum_sq / n;
    m.rmse = std::sqrt(sum_se / n);
    m.rmse_log = std::sqrt(sum_log / n);
    m.a1 = n1 / n;
    m.a2 = n2 / n;
    m.a3 = n3 / n;
    return m;
}

/// Mean over classes present in gt of intersection over union.
inline double miou(const SegMask& pred, const SegMask& gt, int num_classes) {
    require_same_extent(pred, gt, "miou");
    std::vector<std::size_t> inter(num_classes + 1, 0), uni(num_classes + 1, 0), present(num_classes + 1, 0);
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const int g = gt[i], p = pred[i];
        if (g >= 1 && g <= num_classes) present[g] = 1;
        if (g == p && g >= 1 && g <= num_classes) {
            ++inter[g];
            ++uni[g];
        } else {
            if (g >= 1 && g <= num_classes) ++uni[g];
            if (p >= 1 && p <= num_classes) ++uni[p];
        }
    }
    double sum = 0.0;
    int classes_present = 0;
    for (int c = 1; c <= num_classes; ++c) {
        if (!present[c]) continue;
        sum += static_cast<double>(inter[c]) / uni[c];
        ++classes_present;
    }
    return classes_present == 0 ? 0.0 : sum / classes_present;
}

// --------------------------------------------------------------- presets

inline SceneSpec preset_static_plane(std::uint64_t seed) {
    SceneSpec s;
    s.seed = seed;
    s.planes.push_back({Vec3(0, 0, 1), 10.0, classes::kBuilding, 0, 2.5});
    s.ego_twist << 0, 0, 0, -0.5, 0, 0;
    return s;
}

/// Wall plus a vehicle travelling with the camera: the vehicle is
/// pixel-identical in all three frames.
inline SceneSpec preset_moving_object(std::uint64_t seed) {
    SceneSpec s;
    s.seed = seed;
    s.planes.push_back({Vec3(0, 0, 1), 12.0, classes::kBuilding, 0, 2.5});
    s.ego_twist << 0, 0, 0, -1.0, 0, 0;
    SceneObject car;
    car.class_id = classes::kVehicle;
    car.x0 = -0.8;
    car.x1 = 0.8;
    car.y0 = -3.2;
    car.y1 = 3.2;
    car.depth = 6.0;
    car.velocity = Vec3(1.0, 0.0, 0.0);
    car.texture_id = 1;
    s.objects.push_back(car);
    return s;
}

inline SceneSpec preset_outlier_corrupted(std::uint64_t seed) {
    SceneSpec s = preset_static_plane(seed);
    s.outlier_fraction = 0.2;
    return s;
}

inline SceneSpec preset_fisheye_plane(std::uint64_t seed) {
    SceneSpec s;
    s.seed = seed;
    s.camera = CameraModel::fisheye({60.0, 0.0, -2.0, 0.0}, 63.5, 31.5, 128, 64);
    s.planes.push_back({Vec3(0, 0, 1), 10.0, classes::kBuilding, 0, 2.5});
    s.ego_twist << 0, 0, 0, -0.5, 0, 0;
    return s;
}

inline std::optional<SceneSpec> preset_scene(const std::string& name, std::uint64_t seed) {
    if (name == "static-plane") return preset_static_plane(seed);
    if (name == "moving-object") return preset_moving_object(seed);
    if (name == "outlier-corrupted" || name == "robust-vs-l1") return preset_outlier_corrupted(seed);
    if (name == "fisheye-plane") return preset_fisheye_plane(seed);
    return std::nullopt;
}

/// Same scene with every moving object removed.
inline SceneSpec without_objects(SceneSpec spec) {
    spec.objects.clear();
    return spec;
}

}  // namespace syndist
