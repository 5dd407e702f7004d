#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "geometry.hpp"
#include "io.hpp"
#include "losses.hpp"
#include "optim.hpp"
#include "robust.hpp"
#include "synth.hpp"

namespace syndist {

using nlohmann::json;

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw Error(ErrorKind::InvalidArgument, where + ": expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw Error(ErrorKind::InvalidArgument, where + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorKind::InvalidArgument, where + ": bad value for '" + key + "'");
    }
}

inline Vec3 vec3_from(const json& j, const std::string& where) {
    const auto v = j.get<std::vector<double>>();
    if (v.size() != 3) throw Error(ErrorKind::InvalidArgument, where + ": expected 3 numbers");
    return {v[0], v[1], v[2]};
}

inline json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace detail

// ---------------------------------------------------------------- camera

inline json camera_to_json(const CameraModel& cam) {
    json j{{"cx", cam.cx()}, {"cy", cam.cy()}, {"width", cam.width()}, {"height", cam.height()}};
    if (cam.kind() == CameraKind::Pinhole) {
        j["kind"] = "pinhole";
        j["fx"] = cam.fx();
        j["fy"] = cam.fy();
    } else {
        j["kind"] = "fisheye";
        j["poly"] = std::vector<double>(cam.poly().begin(), cam.poly().end());
        j["theta_max"] = cam.theta_max();
    }
    return j;
}

inline CameraModel camera_from_json(const json& j) {
    detail::reject_unknown(j, {"kind", "fx", "fy", "cx", "cy", "poly", "width", "height", "theta_max"}, "camera");
    const std::string kind = j.value("kind", "pinhole");
    double cx = 0, cy = 0;
    int w = 0, h = 0;
    try {
        cx = j.at("cx").get<double>();
        cy = j.at("cy").get<double>();
        w = j.at("width").get<int>();
        h = j.at("height").get<int>();
        if (kind == "pinhole") {
            return CameraModel::pinhole(j.at("fx").get<double>(), j.at("fy").get<double>(), cx, cy, w, h);
        }
        if (kind == "fisheye") {
            const auto poly = j.at("poly").get<std::vector<double>>();
            if (poly.size() != 4) throw Error(ErrorKind::InvalidArgument, "camera: poly needs 4 coefficients");
            return CameraModel::fisheye({poly[0], poly[1], poly[2], poly[3]}, cx, cy, w, h,
                                        j.value("theta_max", CameraModel::kDefaultThetaMax));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidArgument, std::string("camera: ") + e.what());
    }
    throw Error(ErrorKind::InvalidArgument, "camera: kind must be 'pinhole' or 'fisheye'");
}

// ----------------------------------------------------------------- scene

inline json scene_to_json(const SceneSpec& s) {
    json planes = json::array(), objects = json::array();
    for (const auto& p : s.planes) {
        planes.push_back({{"normal", detail::vec_json(p.normal)},
                          {"offset", p.offset},
                          {"class_id", p.class_id},
                          {"texture_id", p.texture_id},
                          {"texture_scale", p.texture_scale}});
    }
    for (const auto& o : s.objects) {
        objects.push_back({{"class_id", o.class_id},
                           {"rect", {o.x0, o.x1, o.y0, o.y1}},
                           {"depth", o.depth},
                           {"velocity", detail::vec_json(o.velocity)},
                           {"texture_id", o.texture_id},
                           {"texture_scale", o.texture_scale}});
    }
    return {{"camera", camera_to_json(s.camera)},
            {"planes", planes},
            {"objects", objects},
            {"ego_twist", detail::vec_json(s.ego_twist)},
            {"seed", s.seed},
            {"noise_level", s.noise_level},
            {"outlier_fraction", s.outlier_fraction},
            {"outlier_patch", s.outlier_patch},
            {"channels", s.channels}};
}

inline SceneSpec scene_from_json(const json& j) {
    detail::reject_unknown(j, {"camera", "planes", "objects", "ego_twist", "seed", "noise_level", "outlier_fraction", "outlier_patch",
                            "channels"},
                           "scene");
    SceneSpec s;
    if (j.contains("camera")) s.camera = camera_from_json(j.at("camera"));
    try {
        for (const auto& p : j.value("planes", json::array())) {
            detail::reject_unknown(p, {"normal", "offset", "class_id", "texture_id", "texture_scale"}, "scene.planes");
            ScenePlane pl;
            if (p.contains("normal")) pl.normal = detail::vec3_from(p.at("normal"), "scene.planes.normal");
            detail::read_opt(p, "offset", pl.offset, "scene.planes");
            detail::read_opt(p, "class_id", pl.class_id, "scene.planes");
            detail::read_opt(p, "texture_id", pl.texture_id, "scene.planes");
            detail::read_opt(p, "texture_scale", pl.texture_scale, "scene.planes");
            s.planes.push_back(pl);
        }
        for (const auto& o : j.value("objects", json::array())) {
            detail::reject_unknown(o, {"class_id", "rect", "depth", "velocity", "texture_id", "texture_scale"},
                                   "scene.objects");
            SceneObject ob;
            detail::read_opt(o, "class_id", ob.class_id, "scene.objects");
            if (o.contains("rect")) {
                const auto r = o.at("rect").get<std::vector<double>>();
                if (r.size() != 4) throw Error(ErrorKind::InvalidArgument, "scene.objects.rect: expected [x0, x1, y0, y1]");
                ob.x0 = r[0];
                ob.x1 = r[1];
                ob.y0 = r[2];
                ob.y1 = r[3];
            }
            detail::read_opt(o, "depth", ob.depth, "scene.objects");
            if (o.contains("velocity")) ob.velocity = detail::vec3_from(o.at("velocity"), "scene.objects.velocity");
            detail::read_opt(o, "texture_id", ob.texture_id, "scene.objects");
            detail::read_opt(o, "texture_scale", ob.texture_scale, "scene.objects");
            s.objects.push_back(ob);
        }
        if (j.contains("ego_twist")) {
            const auto t = j.at("ego_twist").get<std::vector<double>>();
            if (t.size() != 6) throw Error(ErrorKind::InvalidArgument, "scene.ego_twist: expected 6 numbers");
            for (int i = 0; i < 6; ++i) s.ego_twist(i) = t[i];
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidArgument, std::string("scene: ") + e.what());
    }
    detail::read_opt(j, "seed", s.seed, "scene");
    detail::read_opt(j, "noise_level", s.noise_level, "scene");
    detail::read_opt(j, "outlier_fraction", s.outlier_fraction, "scene");
    detail::read_opt(j, "outlier_patch", s.outlier_patch, "scene");
    detail::read_opt(j, "channels", s.channels, "scene");
    return s;
}

// ------------------------------------------------------------ loss/robust

inline json loss_to_json(const LossConfig& c) {
    return {{"omega", c.omega},
            {"beta", c.beta},
            {"gamma", c.gamma},
            {"epsilon", c.epsilon},
            {"ssim_window", c.ssim_window},
            {"dc_classes", std::vector<int>(c.dc_classes.begin(), c.dc_classes.end())},
            {"motion_threshold", c.motion_threshold},
            {"clip_quantile", c.clip_quantile}};
}

inline LossConfig loss_from_json(const json& j, LossConfig c = {}) {
    detail::reject_unknown(j, {"omega", "beta", "gamma", "epsilon", "ssim_window", "dc_classes", "motion_threshold", "clip_quantile"},
                           "loss");
    detail::read_opt(j, "omega", c.omega, "loss");
    detail::read_opt(j, "beta", c.beta, "loss");
    detail::read_opt(j, "gamma", c.gamma, "loss");
    detail::read_opt(j, "epsilon", c.epsilon, "loss");
    detail::read_opt(j, "ssim_window", c.ssim_window, "loss");
    detail::read_opt(j, "dc_classes", c.dc_classes, "loss");
    detail::read_opt(j, "motion_threshold", c.motion_threshold, "loss");
    detail::read_opt(j, "clip_quantile", c.clip_quantile, "loss");
    c.validate();
    return c;
}

inline json robust_to_json(const RobustParams& r) { return {{"alpha", r.alpha}, {"c", r.c}, {"adaptive", r.adaptive}}; }

inline RobustParams robust_from_json(const json& j, RobustParams r = {1.0, 0.01, true}) {
    detail::reject_unknown(j, {"alpha", "c", "adaptive"}, "robust");
    detail::read_opt(j, "alpha", r.alpha, "robust");
    detail::read_opt(j, "c", r.c, "robust");
    detail::read_opt(j, "adaptive", r.adaptive, "robust");
    r.validate();
    return r;
}

// --------------------------------------------------------------- toggles

inline const std::vector<std::string>& toggle_names() {
    static const std::vector<std::string> names{"robust_loss", "dynamic_mask", "auto_mask", "csdcl", "smoothness"};
    return names;
}

inline bool& toggle_ref(Toggles& t, const std::string& name) {
    if (name == "robust_loss") return t.robust_loss;
    if (name == "dynamic_mask") return t.dynamic_mask;
    if (name == "auto_mask") return t.auto_mask;
    if (name == "csdcl") return t.csdcl;
    if (name == "smoothness") return t.smoothness;
    throw Error(ErrorKind::InvalidArgument, "unknown toggle '" + name + "'");
}

inline bool toggle_value(const Toggles& t, const std::string& name) { return toggle_ref(const_cast<Toggles&>(t), name); }

inline json toggles_to_json(const Toggles& t) {
    json j;
    for (const auto& n : toggle_names()) j[n] = toggle_value(t, n);
    return j;
}

inline Toggles toggles_from_json(const json& j, Toggles t = {}) {
    detail::reject_unknown(j, {"robust_loss", "dynamic_mask", "auto_mask", "csdcl", "smoothness"}, "toggles");
    for (const auto& n : toggle_names()) detail::read_opt(j, n.c_str(), toggle_ref(t, n), "toggles");
    return t;
}

inline json optimizer_to_json(const OptimizerSettings& o) {
    return {{"iterations", o.iterations},       {"armijo", o.armijo},
            {"max_backtracks", o.max_backtracks}, {"initial_step", o.initial_step},
            {"growth", o.growth},               {"alpha_step_scale", o.alpha_step_scale},
            {"smoothing_sigma", o.smoothing_sigma}, {"map_coupling", o.map_coupling}};
}

inline OptimizerSettings optimizer_from_json(const json& j, OptimizerSettings o = {}) {
    detail::reject_unknown(j, {"iterations", "armijo", "max_backtracks", "initial_step", "growth", "alpha_step_scale",
                               "smoothing_sigma", "map_coupling"},
                           "optimizer");
    detail::read_opt(j, "iterations", o.iterations, "optimizer");
    detail::read_opt(j, "armijo", o.armijo, "optimizer");
    detail::read_opt(j, "max_backtracks", o.max_backtracks, "optimizer");
    detail::read_opt(j, "initial_step", o.initial_step, "optimizer");
    detail::read_opt(j, "growth", o.growth, "optimizer");
    detail::read_opt(j, "alpha_step_scale", o.alpha_step_scale, "optimizer");
    detail::read_opt(j, "smoothing_sigma", o.smoothing_sigma, "optimizer");
    detail::read_opt(j, "map_coupling", o.map_coupling, "optimizer");
    if (o.iterations < 0) throw Error(ErrorKind::InvalidArgument, "optimizer: iterations must be >= 0");
    if (!(o.armijo > 0.0 && o.armijo < 1.0)) throw Error(ErrorKind::InvalidArgument, "optimizer: armijo must lie in (0, 1)");
    if (!(o.initial_step > 0.0) || !(o.growth >= 1.0) || o.max_backtracks < 1) {
        throw Error(ErrorKind::InvalidArgument, "optimizer: step settings out of range");
    }
    if (!(o.smoothing_sigma >= 0.0) || !(o.map_coupling >= 0.0) || !(o.alpha_step_scale > 0.0)) {
        throw Error(ErrorKind::InvalidArgument, "optimizer: metric settings out of range");
    }
    return o;
}

// ------------------------------------------------------------ experiment

struct ExperimentConfig {
    std::string name = "custom";
    SceneSpec scene;
    std::vector<std::uint64_t> seeds{1};
    LossConfig loss;
    RobustParams robust{1.0, 0.01, true};
    OptimizerSettings optimizer;
    Toggles toggles;
    std::vector<std::string> ablate;
    /// Initial map = init_scale * ground-truth distance.
    double init_scale = 2.0;
    double metric_cap = 40.0;
    /// Also refine the object-free version of the scene as a reference.
    bool static_reference = false;
    std::filesystem::path output = "syndist_out";

    void validate() const {
        for (const auto& a : ablate) (void)toggle_value(toggles, a);
        std::set<std::string> uniq(ablate.begin(), ablate.end());
        if (uniq.size() != ablate.size()) throw Error(ErrorKind::InvalidArgument, "ablate: toggles listed twice");
        if (seeds.empty()) throw Error(ErrorKind::InvalidArgument, "at least one seed is required");
        if (!(init_scale > 0.0)) throw Error(ErrorKind::InvalidArgument, "init_scale must be positive");
        if (!(metric_cap > 0.0)) throw Error(ErrorKind::InvalidArgument, "metric_cap must be positive");
        loss.validate();
        robust.validate();
    }
};

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"static-plane", "moving-object", "outlier-corrupted", "robust-vs-l1",
                                                "fisheye-plane"};
    return names;
}

/// Experiment defaults for a named preset (scene, toggles and the default
/// ablation axis).
inline ExperimentConfig preset_experiment(const std::string& name) {
    const auto scene = preset_scene(name, 1);
    if (!scene) throw Error(ErrorKind::InvalidArgument, "unknown preset '" + name + "'");
    ExperimentConfig cfg;
    cfg.name = name;
    cfg.scene = *scene;
    if (name == "moving-object") {
        // auto-masking would also hide the camera-speed object
        cfg.toggles.auto_mask = false;
        cfg.ablate = {"dynamic_mask"};
        cfg.static_reference = true;
    } else if (name == "robust-vs-l1" || name == "outlier-corrupted") {
        cfg.ablate = {"robust_loss"};
        // SSIM windows mix outliers into their neighbours where no per-pixel
        // robust function can discount them; compare the robust term alone
        cfg.loss.omega = 0.0;
    }
    return cfg;
}

inline json experiment_to_json(const ExperimentConfig& c) {
    return {{"name", c.name},
            {"scene", scene_to_json(c.scene)},
            {"seeds", c.seeds},
            {"loss", loss_to_json(c.loss)},
            {"robust", robust_to_json(c.robust)},
            {"optimizer", optimizer_to_json(c.optimizer)},
            {"toggles", toggles_to_json(c.toggles)},
            {"ablate", c.ablate},
            {"init_scale", c.init_scale},
            {"metric_cap", c.metric_cap},
            {"static_reference", c.static_reference},
            {"output", c.output.string()}};
}

/// Parse an experiment config. A "preset" key seeds the defaults; "scene"
/// may be inline or a path (relative to `base_dir`) to a scene JSON file.
inline ExperimentConfig experiment_from_json(const json& j, const std::filesystem::path& base_dir = ".") {
    detail::reject_unknown(j, {"name", "preset", "scene", "seeds", "loss", "robust", "optimizer", "toggles", "ablate",
                               "init_scale", "metric_cap", "static_reference", "output"},
                           "experiment");
    ExperimentConfig c;
    if (j.contains("preset")) c = preset_experiment(j.at("preset").get<std::string>());
    if (j.contains("scene")) {
        const auto& s = j.at("scene");
        if (s.is_string()) {
            const auto path = base_dir / s.get<std::string>();
            json sj;
            try {
                sj = json::parse(read_file(path));
            } catch (const json::parse_error& e) {
                throw Error(ErrorKind::InvalidArgument, "scene file " + path.string() + ": " + e.what());
            }
            c.scene = scene_from_json(sj);
        } else {
            c.scene = scene_from_json(s);
        }
    } else if (!j.contains("preset")) {
        throw Error(ErrorKind::InvalidArgument, "experiment: need 'preset' or 'scene'");
    }
    detail::read_opt(j, "name", c.name, "experiment");
    detail::read_opt(j, "seeds", c.seeds, "experiment");
    if (j.contains("loss")) c.loss = loss_from_json(j.at("loss"), c.loss);
    if (j.contains("robust")) c.robust = robust_from_json(j.at("robust"), c.robust);
    if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"), c.optimizer);
    if (j.contains("toggles")) c.toggles = toggles_from_json(j.at("toggles"), c.toggles);
    detail::read_opt(j, "ablate", c.ablate, "experiment");
    detail::read_opt(j, "init_scale", c.init_scale, "experiment");
    detail::read_opt(j, "metric_cap", c.metric_cap, "experiment");
    detail::read_opt(j, "static_reference", c.static_reference, "experiment");
    if (j.contains("output")) c.output = j.at("output").get<std::string>();
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::InvalidArgument, "config " + path.string() + ": " + e.what());
    }
    return experiment_from_json(j, path.parent_path());
}

}  // namespace syndist
