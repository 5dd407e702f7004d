#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "syndist/experiment.hpp"
#include "syndist/synth.hpp"
#include "syndist/warp.hpp"

using namespace syndist;

namespace {

double psnr_valid(const Image& a, const Image& b, const ValidityMask& valid, const Mask* region = nullptr) {
    double se = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x) {
            if (!valid(y, x) || (region && !(*region)(y, x))) continue;
            for (int c = 0; c < a.channels(); ++c) {
                const double d = a(y, x, c) - b(y, x, c);
                se += d * d;
                ++n;
            }
        }
    if (n == 0) return -1.0;
    if (se == 0.0) return INFINITY;
    return 10.0 * std::log10(1.0 / (se / static_cast<double>(n)));
}

template <class G>
auto values(const G& g) {
    return std::vector(g.data().begin(), g.data().end());
}

SceneSpec flat_wall(double depth) {
    SceneSpec s;
    s.seed = 3;
    s.planes.push_back({Vec3(0, 0, 1), depth, classes::kBuilding, 0, 2.5});
    return s;
}

}  // namespace

TEST(MakeScene, StillCameraRendersIdenticalFrames) {
    const GroundTruth gt = make_scene(flat_wall(5.0));
    EXPECT_EQ(values(gt.image_prev), values(gt.image_target));
    EXPECT_EQ(values(gt.image_next), values(gt.image_target));
    for (double d : gt.distance_target.data()) EXPECT_DOUBLE_EQ(d, 5.0);
    for (int l : gt.seg_target.data()) EXPECT_EQ(l, classes::kBuilding);
}

TEST(MakeScene, StaticScenesAreSelfConsistent) {
    for (const SceneSpec& spec : {preset_static_plane(1), preset_static_plane(2), preset_fisheye_plane(1)}) {
        const GroundTruth gt = make_scene(spec);
        const Image* srcs[2] = {&gt.image_prev, &gt.image_next};
        const Pose poses[2] = {gt.to_prev, gt.to_next};
        for (int k = 0; k < 2; ++k) {
            const SampleResult r = synthesize_view(*srcs[k], gt.distance_target, poses[k], spec.camera);
            EXPECT_GT(count_set(r.valid), r.valid.size() / 2);
            EXPECT_GT(psnr_valid(r.image, gt.image_target, r.valid), 35.0);
        }
    }
}

TEST(MakeScene, MovingObjectSceneIsSelfConsistentOnBackground) {
    const SceneSpec spec = preset_moving_object(1);
    const GroundTruth gt = make_scene(spec);
    const Mask region = static_region(gt, spec.camera, {classes::kVehicle, classes::kPedestrian, classes::kRider});
    const SampleResult r = synthesize_view(gt.image_next, gt.distance_target, gt.to_next, spec.camera);
    EXPECT_GT(psnr_valid(r.image, gt.image_target, r.valid, &region), 35.0);
}

TEST(MakeScene, ObjectMovingWithCameraIsPixelIdentical) {
    const SceneSpec spec = preset_moving_object(2);
    const GroundTruth gt = make_scene(spec);
    std::size_t object_pixels = 0;
    for (int y = 0; y < gt.seg_target.height(); ++y)
        for (int x = 0; x < gt.seg_target.width(); ++x) {
            if (gt.seg_target(y, x) != classes::kVehicle) continue;
            ++object_pixels;
            EXPECT_EQ(gt.seg_prev(y, x), classes::kVehicle);
            EXPECT_EQ(gt.seg_next(y, x), classes::kVehicle);
            EXPECT_DOUBLE_EQ(gt.image_prev(y, x), gt.image_target(y, x));
            EXPECT_DOUBLE_EQ(gt.image_next(y, x), gt.image_target(y, x));
            EXPECT_DOUBLE_EQ(gt.distance_next(y, x), gt.distance_target(y, x));
        }
    EXPECT_GT(object_pixels, 100u);
}

TEST(MakeScene, DeterministicPerSeed) {
    for (const SceneSpec& spec : {preset_moving_object(4), preset_outlier_corrupted(4)}) {
        const GroundTruth a = make_scene(spec), b = make_scene(spec);
        EXPECT_EQ(values(a.image_target), values(b.image_target));
        EXPECT_EQ(values(a.image_next), values(b.image_next));
        EXPECT_EQ(values(a.distance_target), values(b.distance_target));
    }
    EXPECT_NE(values(make_scene(preset_static_plane(1)).image_target),
              values(make_scene(preset_static_plane(2)).image_target));
}

TEST(MakeScene, DistanceIsRadialForFisheye) {
    const SceneSpec spec = preset_fisheye_plane(1);
    const GroundTruth gt = make_scene(spec);
    for (int y = 0; y < gt.distance_target.height(); y += 7)
        for (int x = 0; x < gt.distance_target.width(); x += 7) {
            const Vec3 p = spec.camera.unproject(x, y, gt.distance_target(y, x));
            EXPECT_NEAR(p.z(), 10.0, 1e-9);
            EXPECT_NEAR(p.norm(), gt.distance_target(y, x), 1e-9);
        }
}

TEST(MakeScene, CorruptionRatesAndPatches) {
    SceneSpec clean = preset_static_plane(5);
    SceneSpec dirty = clean;
    dirty.outlier_fraction = 0.2;
    const Image a = make_scene(clean).image_target, b = make_scene(dirty).image_target;
    std::size_t changed = 0;
    for (std::size_t i = 0; i < a.size(); ++i) changed += a[i] != b[i];
    EXPECT_NEAR(static_cast<double>(changed) / static_cast<double>(a.size()), 0.2, 0.02);

    SceneSpec noisy = clean;
    noisy.noise_level = 0.01;
    const Image c = make_scene(noisy).image_target;
    double var = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) var += (c[i] - a[i]) * (c[i] - a[i]);
    EXPECT_NEAR(std::sqrt(var / static_cast<double>(a.size())), 0.01, 0.001);

    SceneSpec patched = dirty;
    patched.outlier_patch = 4;
    const Image p = make_scene(patched).image_target;
    changed = 0;
    for (std::size_t i = 0; i < a.size(); ++i) changed += a[i] != p[i];
    EXPECT_NEAR(static_cast<double>(changed) / static_cast<double>(a.size()), 0.2, 0.05);
    patched.outlier_patch = 0;
    EXPECT_THROW(make_scene(patched), Error);
}

TEST(MakeScene, RejectsInvalidSpecs) {
    SceneSpec empty;
    EXPECT_THROW(make_scene(empty), Error);
    SceneSpec behind = flat_wall(-2.0);
    EXPECT_THROW(make_scene(behind), Error);
    // a floor plane alone leaves the upper half of the view empty
    SceneSpec floor;
    floor.planes.push_back({Vec3(0, 1, 0), 1.5, classes::kRoad, 0, 2.5});
    try {
        make_scene(floor);
        FAIL() << "expected an empty-frustum error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::DegenerateInput);
    }
    SceneSpec bad_object = flat_wall(10.0);
    bad_object.objects.push_back(SceneObject{});
    bad_object.objects.back().x1 = bad_object.objects.back().x0;
    EXPECT_THROW(make_scene(bad_object), Error);
}

TEST(Texture, RangeAndNonzeroGradient) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-50.0, 50.0);
    for (int i = 0; i < 2000; ++i) {
        const double a = u(rng), b = u(rng);
        const double v = procedural_texture(a, b, 2, 9);
        EXPECT_GE(v, 0.1);
        EXPECT_LE(v, 0.9);
        const double h = 1e-5;
        const double gu = procedural_texture(a + h, b, 2, 9) - procedural_texture(a - h, b, 2, 9);
        const double gv = procedural_texture(a, b + h, 2, 9) - procedural_texture(a, b - h, 2, 9);
        EXPECT_GT(std::hypot(gu, gv) / (2 * h), 1e-6);
    }
}

TEST(DepthMetrics, PerfectAndDoubledPredictions) {
    const DistanceMap gt(3, 5, 1, 1.0), pred(3, 5, 1, 2.0);
    const DepthMetrics m = depth_metrics(pred, gt);
    EXPECT_EQ(m.abs_rel, 1.0);
    EXPECT_EQ(m.sq_rel, 1.0);
    EXPECT_EQ(m.rmse, 1.0);
    EXPECT_EQ(m.rmse_log, std::log(2.0));
    EXPECT_EQ(m.a1, 0.0);
    EXPECT_EQ(m.a2, 0.0);
    EXPECT_EQ(m.a3, 0.0);
    const DepthMetrics z = depth_metrics(gt, gt);
    EXPECT_EQ(z.abs_rel, 0.0);
    EXPECT_EQ(z.rmse, 0.0);
    EXPECT_EQ(z.a1, 1.0);
    EXPECT_EQ(z.a3, 1.0);
    EXPECT_EQ(z.count, 15u);
}

TEST(DepthMetrics, CapEqualsSubsetRecomputation) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> g(1.0, 60.0), r(0.7, 1.4);
    DistanceMap gt(6, 6), pred(6, 6);
    for (std::size_t i = 0; i < gt.size(); ++i) {
        gt[i] = g(rng);
        pred[i] = std::min(gt[i] * r(rng), 39.0);
    }
    std::vector<double> gs, ps;
    for (std::size_t i = 0; i < gt.size(); ++i)
        if (gt[i] <= 40.0) {
            gs.push_back(gt[i]);
            ps.push_back(pred[i]);
        }
    ASSERT_LT(gs.size(), gt.size());
    DistanceMap gsub(1, static_cast<int>(gs.size())), psub(1, static_cast<int>(gs.size()));
    for (std::size_t i = 0; i < gs.size(); ++i) {
        gsub[i] = gs[i];
        psub[i] = ps[i];
    }
    const DepthMetrics full = depth_metrics(pred, gt, 40.0), sub = depth_metrics(psub, gsub, 40.0);
    EXPECT_EQ(full.count, gs.size());
    EXPECT_DOUBLE_EQ(full.abs_rel, sub.abs_rel);
    EXPECT_DOUBLE_EQ(full.rmse, sub.rmse);
    EXPECT_DOUBLE_EQ(full.a1, sub.a1);
}

TEST(DepthMetrics, ScalingRelation) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> g(1.0, 8.0), r(0.6, 1.6);
    DistanceMap gt(5, 5), pred(5, 5);
    for (std::size_t i = 0; i < gt.size(); ++i) {
        gt[i] = g(rng);
        pred[i] = gt[i] * r(rng);
    }
    const DepthMetrics base = depth_metrics(pred, gt);
    const double k = 3.0;
    DistanceMap gk = gt, pk = pred;
    for (double& v : gk.data()) v *= k;
    for (double& v : pk.data()) v *= k;
    const DepthMetrics scaled = depth_metrics(pk, gk);
    EXPECT_NEAR(scaled.abs_rel, base.abs_rel, 1e-12);
    EXPECT_NEAR(scaled.rmse_log, base.rmse_log, 1e-12);
    EXPECT_EQ(scaled.a1, base.a1);
    EXPECT_EQ(scaled.a2, base.a2);
    EXPECT_NEAR(scaled.rmse, k * base.rmse, 1e-12);
    EXPECT_NEAR(scaled.sq_rel, k * base.sq_rel, 1e-12);
}

TEST(DepthMetrics, EmptyEvaluationSetThrows) {
    const DistanceMap far(2, 2, 1, 50.0);
    EXPECT_THROW(depth_metrics(far, far, 40.0), Error);
    const Mask none(2, 2, 1, 0);
    const DistanceMap near(2, 2, 1, 5.0);
    EXPECT_THROW(depth_metrics(near, near, 40.0, &none), Error);
}

TEST(Miou, WorkedCases) {
    SegMask a(1, 4);
    a[0] = 1;
    a[1] = 2;
    a[2] = 2;
    a[3] = 1;
    EXPECT_EQ(miou(a, a, 5), 1.0);
    SegMask left(1, 4), right(1, 4);
    left[0] = left[1] = 3;
    right[2] = right[3] = 3;
    EXPECT_EQ(miou(left, right, 5), 0.0);
    // class 1 perfect, class 2 overlaps one of three pixels
    SegMask gt(1, 4), pred(1, 4);
    gt[0] = 1;
    gt[1] = 2;
    gt[2] = 2;
    gt[3] = 0;
    pred[0] = 1;
    pred[1] = 0;
    pred[2] = 2;
    pred[3] = 2;
    EXPECT_NEAR(miou(pred, gt, 5), 2.0 / 3.0, 1e-15);
}

TEST(MakeScene, RejectsBadCorruptionSettings) {
    SceneSpec s = preset_static_plane(1);
    s.noise_level = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(make_scene(s), Error);
    s.noise_level = -0.1;
    EXPECT_THROW(make_scene(s), Error);
    s.noise_level = 0.0;
    s.outlier_fraction = 1.5;
    EXPECT_THROW(make_scene(s), Error);
}
