#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "io.hpp"
#include "masking.hpp"
#include "optim.hpp"
#include "synth.hpp"
#include "warp.hpp"

namespace syndist {

/// Pixels of frame t that stay unmasked when mu is built from the true
/// distance and poses for both neighbours (the static background).
inline Mask static_region(const GroundTruth& gt, const CameraModel& cam, const std::set<int>& dc_classes) {
    Mask region = all_ones_mask(gt.image_target.height(), gt.image_target.width());
    const SegMask* srcs[2] = {&gt.seg_prev, &gt.seg_next};
    const Pose poses[2] = {gt.to_prev, gt.to_next};
    for (int k = 0; k < 2; ++k) {
        const SegWarp w = warp_segmentation(*srcs[k], gt.distance_target, poses[k], cam);
        region = mask_and(region, dynamic_mask(gt.seg_target, w.labels, dc_classes));
    }
    return region;
}

inline json pose_json(const Pose& p) {
    json rows = json::array();
    for (int r = 0; r < 3; ++r) {
        rows.push_back({p.rotation()(r, 0), p.rotation()(r, 1), p.rotation()(r, 2), p.translation()(r)});
    }
    rows.push_back({0.0, 0.0, 0.0, 1.0});
    return rows;
}

/// Ground-truth bundle: frames as PNG, distances as PFM, labels as 8-bit
/// PNG (byte value = class id) and the two relative poses as JSON.
inline void write_ground_truth(const fs::path& dir, const GroundTruth& gt) {
    fs::create_directories(dir);
    const char* names[3] = {"prev", "target", "next"};
    const Image* images[3] = {&gt.image_prev, &gt.image_target, &gt.image_next};
    const DistanceMap* dists[3] = {&gt.distance_prev, &gt.distance_target, &gt.distance_next};
    const SegMask* segs[3] = {&gt.seg_prev, &gt.seg_target, &gt.seg_next};
    for (int f = 0; f < 3; ++f) {
        write_png(dir / (std::string("image_") + names[f] + ".png"), *images[f]);
        write_pfm(dir / (std::string("distance_") + names[f] + ".pfm"), *dists[f]);
        Image labels(segs[f]->height(), segs[f]->width());
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = (*segs[f])[i] / 255.0;
        write_png(dir / (std::string("seg_") + names[f] + ".png"), labels);
    }
    const json poses{{"to_prev", pose_json(gt.to_prev)}, {"to_next", pose_json(gt.to_next)}};
    write_file_atomic(dir / "poses.json", poses.dump(2) + "\n");
}

// ------------------------------------------------------------------ runs

struct RunRecord {
    std::string scene;
    std::uint64_t seed = 0;
    Toggles toggles;
    int iterations = 0;
    bool reference = false;  // object-free counterpart of the scene
    DepthMetrics metrics;
    double miou = 0.0;
    double bg_rmse = 0.0;
    double final_loss = 0.0;
    double alpha = 1.0;
    RefineReport report;
};

struct ExperimentResult {
    std::vector<RunRecord> runs;
    std::vector<RunRecord> references;
    std::string csv;
    json report;
};

/// Toggle sets of the ablation: every on/off combination of the listed
/// toggles, all-on first; unlisted toggles keep their configured value.
inline std::vector<Toggles> ablation_grid(const Toggles& base, const std::vector<std::string>& ablate) {
    std::vector<Toggles> out;
    const std::size_t n = std::size_t{1} << ablate.size();
    for (std::size_t combo = 0; combo < n; ++combo) {
        Toggles t = base;
        for (std::size_t j = 0; j < ablate.size(); ++j) toggle_ref(t, ablate[j]) = ((combo >> j) & 1U) == 0;
        out.push_back(t);
    }
    return out;
}

inline std::string toggle_tag(const Toggles& t) {
    std::string tag;
    const char* abbrev[5] = {"rl", "dm", "am", "cs", "sm"};
    for (std::size_t i = 0; i < toggle_names().size(); ++i) {
        if (i) tag += '_';
        tag += abbrev[i];
        tag += toggle_value(t, toggle_names()[i]) ? '1' : '0';
    }
    return tag;
}

inline std::string run_tag(const RunRecord& r) {
    return r.scene + "_s" + std::to_string(r.seed) + "_" + (r.reference ? std::string("static") : toggle_tag(r.toggles));
}

/// Refine one scene instance with the given toggles.
inline RunRecord run_once(const ExperimentConfig& cfg, std::uint64_t seed, const Toggles& toggles, bool reference) {
    SceneSpec spec = cfg.scene;
    spec.seed = seed;
    const GroundTruth gt_full = make_scene(spec);
    const GroundTruth gt = reference ? make_scene(without_objects(spec)) : gt_full;
    // the background region always comes from the scene with its objects,
    // so the reference run is scored on the same pixels
    const Mask region = static_region(gt_full, spec.camera, cfg.loss.dc_classes);

    DistanceMap init = gt.distance_target;
    for (double& v : init.data()) v *= cfg.init_scale;
    RefineProblem p = problem_from_ground_truth(gt, spec.camera, init);
    p.loss = cfg.loss;
    p.robust = cfg.robust;
    p.toggles = toggles;
    p.optimizer = cfg.optimizer;
    p.metric_cap = cfg.metric_cap;
    p.metric_region = region;

    RunRecord r;
    r.scene = cfg.name;
    r.seed = seed;
    r.toggles = toggles;
    r.iterations = cfg.optimizer.iterations;
    r.reference = reference;
    r.report = refine_depth(p);
    r.metrics = *r.report.after;
    r.bg_rmse = r.report.region_after->rmse;
    r.final_loss = r.report.final_terms.total;
    r.alpha = r.report.final_alpha;
    if (!std::isfinite(r.final_loss)) throw Error(ErrorKind::Divergence, "run " + run_tag(r) + ": loss is not finite");
    const SegWarp warped = warp_segmentation(gt.seg_prev, r.report.distance, gt.to_prev, spec.camera);
    r.miou = miou(warped.labels, gt.seg_target, classes::kCount);
    return r;
}

inline std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string metrics_csv(const std::vector<RunRecord>& runs) {
    std::string out = "scene,seed";
    for (const auto& n : toggle_names()) out += "," + n;
    out += ",iterations,abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3,miou,bg_rmse,final_loss,alpha\n";
    for (const auto& r : runs) {
        out += r.scene + "," + std::to_string(r.seed);
        for (const auto& n : toggle_names()) out += toggle_value(r.toggles, n) ? ",1" : ",0";
        out += "," + std::to_string(r.iterations);
        for (double v : {r.metrics.abs_rel, r.metrics.sq_rel, r.metrics.rmse, r.metrics.rmse_log, r.metrics.a1,
                         r.metrics.a2, r.metrics.a3, r.miou, r.bg_rmse, r.final_loss, r.alpha}) {
            out += "," + fmt_num(v);
        }
        out += "\n";
    }
    return out;
}

inline json metrics_json(const DepthMetrics& m) {
    return {{"abs_rel", m.abs_rel}, {"sq_rel", m.sq_rel}, {"rmse", m.rmse}, {"rmse_log", m.rmse_log},
            {"a1", m.a1},           {"a2", m.a2},         {"a3", m.a3},     {"count", m.count}};
}

inline json run_json(const RunRecord& r) {
    json verdicts = json::array();
    for (const auto& v : r.report.masks.verdicts) verdicts.push_back({{"score", v.score}, {"moving", v.moving}});
    std::vector<bool> applied(r.report.masks.applied.begin(), r.report.masks.applied.end());
    const auto& t = r.report.final_terms;
    return {{"tag", run_tag(r)},
            {"scene", r.scene},
            {"seed", r.seed},
            {"toggles", toggles_to_json(r.toggles)},
            {"iterations", r.iterations},
            {"static_reference", r.reference},
            {"initial_loss", r.report.initial_loss},
            {"loss_trace", r.report.loss_trace},
            {"mask_verdicts", verdicts},
            {"mask_applied", applied},
            {"dynamic_mask_coverage", r.report.masks.dynamic_mask_coverage},
            {"support_fraction", r.report.masks.final_support_fraction},
            {"final_alpha", r.alpha},
            {"terms",
             {{"total", t.total},
              {"reconstruction", t.reconstruction},
              {"smoothness", t.smoothness},
              {"consistency", t.consistency},
              {"neighbour_reconstruction", t.neighbour_reconstruction},
              {"neighbour_smoothness", t.neighbour_smoothness}}},
            {"before", metrics_json(*r.report.before)},
            {"after", metrics_json(r.metrics)},
            {"background_before", metrics_json(*r.report.region_before)},
            {"background_after", metrics_json(*r.report.region_after)},
            {"miou", r.miou}};
}

/// Input, true distance, refined distance, relative error and the mu
/// overlay, stacked top to bottom.
inline Image run_panel(const ExperimentConfig& cfg, const RunRecord& r) {
    SceneSpec spec = cfg.scene;
    spec.seed = r.seed;
    const GroundTruth gt = make_scene(r.reference ? without_objects(spec) : spec);
    double hi = 0.0;
    for (double v : gt.distance_target.data()) hi = std::max(hi, std::min(v, cfg.metric_cap));
    ScalarMap err(gt.distance_target.height(), gt.distance_target.width());
    for (std::size_t i = 0; i < err.size(); ++i) {
        err[i] = std::abs(r.report.distance[i] - gt.distance_target[i]) / gt.distance_target[i];
    }
    return stack_panels({gt.image_target, colorize(gt.distance_target, 0.0, hi), colorize(r.report.distance, 0.0, hi),
                         colorize(err, 0.0, 0.5), overlay_mask(gt.image_target, r.report.dynamic_mask)});
}

inline unsigned worker_count(std::size_t jobs) {
    unsigned n = std::max(1U, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SYNDIST_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
    }
    return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

/// Every seed x toggle combination (plus the object-free reference when
/// configured), run in a worker pool; results keep the job order.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, bool write_outputs = true) {
    cfg.validate();
    struct Job {
        std::uint64_t seed;
        Toggles toggles;
        bool reference;
    };
    std::vector<Job> jobs;
    const auto grid = ablation_grid(cfg.toggles, cfg.ablate);
    for (auto seed : cfg.seeds) {
        for (const auto& t : grid) jobs.push_back({seed, t, false});
        if (cfg.static_reference) jobs.push_back({seed, grid.front(), true});
    }

    std::vector<std::optional<RunRecord>> done(jobs.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_lock;
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                done[i] = run_once(cfg, jobs[i].seed, jobs[i].toggles, jobs[i].reference);
            } catch (...) {
                const std::lock_guard lock(failure_lock);
                if (!failure) failure = std::current_exception();
                next = jobs.size();
            }
        }
    };
    const unsigned n_workers = worker_count(jobs.size());
    std::vector<std::thread> pool;
    for (unsigned k = 1; k < n_workers; ++k) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    ExperimentResult res;
    for (auto& d : done) (d->reference ? res.references : res.runs).push_back(std::move(*d));
    res.csv = metrics_csv(res.runs);

    json runs = json::array(), refs = json::array();
    for (const auto& r : res.runs) runs.push_back(run_json(r));
    for (const auto& r : res.references) refs.push_back(run_json(r));
    res.report = {{"config", experiment_to_json(cfg)}, {"runs", runs}, {"static_reference", refs}};

    if (write_outputs) {
        fs::create_directories(cfg.output / "runs");
        write_file_atomic(cfg.output / "metrics.csv", res.csv);
        write_file_atomic(cfg.output / "report.json", res.report.dump(2) + "\n");
        write_file_atomic(cfg.output / "config.json", experiment_to_json(cfg).dump(2) + "\n");
        for (auto seed : cfg.seeds) {
            SceneSpec spec = cfg.scene;
            spec.seed = seed;
            write_ground_truth(cfg.output / "scenes" / (cfg.name + "_s" + std::to_string(seed)), make_scene(spec));
        }
        for (const auto* list : {&res.runs, &res.references}) {
            for (const auto& r : *list) {
                const auto tag = run_tag(r);
                write_png(cfg.output / "runs" / (tag + ".png"), run_panel(cfg, r));
                write_pfm(cfg.output / "runs" / (tag + ".pfm"), r.report.distance);
            }
        }
    }
    return res;
}

}  // namespace syndist
