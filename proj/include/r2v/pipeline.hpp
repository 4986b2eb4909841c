#pragma once

// End-to-end orchestration: render, train toy models, customize, generate
// keyframes, interpolate, evaluate — from one JSON configuration document,
// with per-stage output manifests, hash-based caching, and an output-dir lock.

#include "r2v/datagen.hpp"
#include "r2v/imageio.hpp"
#include "r2v/interpolate.hpp"
#include "r2v/serialize.hpp"

#include <chrono>
#include <fcntl.h>
#include <filesystem>
#include <unistd.h>

namespace r2v {

namespace fs = std::filesystem;

struct RunConfig {
    json doc;           // the resolved configuration document
    std::string out_dir;
    bool stage_cache = true;

    static RunConfig defaults() {
        RunConfig c;
        c.doc = json::parse(R"({
            "scene": "demos/box_orbit.scene",
            "resolution": 32,
            "seed": 1,
            "object": "red box",
            "environment": "checkerboard",
            "input_frame": 0,
            "start_frame": 0,
            "keyframe_spacing": 8,
            "image_model": {
                "widths": [24, 32], "context_dim": 24, "time_embed_dim": 48,
                "groups": 4, "schedule_T": 1000,
                "beta_start": 1e-4, "beta_end": 0.008,
                "train_steps": 600, "lr": 2e-3, "batch": 2
            },
            "video_model": {
                "widths": [16, 24], "max_frames": 16,
                "ladder_levels": 41, "sigma_max": 3.0, "sigma_min": 0.02,
                "train_steps": 350, "lr": 2e-3, "clip_frames": 8
            },
            "depth_estimator": { "steps": 250, "lr": 2e-3 },
            "datagen": { "scene_count": 20, "fg_only_count": 8, "video_clip_count": 6 },
            "customization": {
                "rank": 8, "lr": 5e-3, "steps": 250, "lambda": 1.0,
                "novel_views": 5, "novel_view_radius": 2.0
            },
            "keyframes": {
                "steps": 50, "tau_conv": 0.4, "tau_sa": 0.0,
                "control_strength": 1.0, "extended_attention": true, "guided": true
            },
            "interpolation": {
                "steps": 40, "tau_conv": 0.0, "tau_sa": 0.0,
                "control_strength": 1.0, "guided": true, "bidirectional": true
            }
        })");
        return c;
    }

    static RunConfig load(const std::string& path, const std::string& out_dir,
                          std::optional<uint64_t> seed_override, bool stage_cache) {
        RunConfig c = defaults();
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        json user = json::parse(in, nullptr, false);
        if (user.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
        c.doc.merge_patch(user);
        if (seed_override) c.doc["seed"] = *seed_override;
        c.out_dir = out_dir;
        c.stage_cache = stage_cache;
        c.validate();
        return c;
    }

    void validate() const {
        R2V_CONFIG_CHECK(doc.at("resolution").get<int>() >= 16, "config: resolution must be >= 16");
        R2V_CONFIG_CHECK(doc.at("resolution").get<int>() % 4 == 0,
                         "config: resolution must be divisible by 4");
        R2V_CONFIG_CHECK(doc.at("keyframe_spacing").get<int>() >= 1,
                         "config: keyframe_spacing must be >= 1");
        R2V_CONFIG_CHECK(!doc.at("scene").get<std::string>().empty(), "config: scene path empty");
    }

    uint64_t seed() const { return doc.at("seed").get<uint64_t>(); }
    int resolution() const { return doc.at("resolution").get<int>(); }
    std::string scene_path() const { return doc.at("scene").get<std::string>(); }

    std::string prompt_full() const {
        return "a " + doc.at("object").get<std::string>() + " in " +
               doc.at("environment").get<std::string>();
    }
    std::string prompt_fg() const { return "a " + doc.at("object").get<std::string>(); }

    DenoiserSpec image_spec() const {
        const json& m = doc.at("image_model");
        DenoiserSpec s;
        s.latent_channels = 12;
        s.latent_h = resolution() / 2;
        s.latent_w = resolution() / 2;
        s.widths = m.at("widths").get<std::vector<int64_t>>();
        s.attn_at_level = {true, true};
        s.context_dim = m.at("context_dim").get<int64_t>();
        s.time_embed_dim = m.at("time_embed_dim").get<int64_t>();
        s.groups = m.at("groups").get<int>();
        s.validate();
        return s;
    }

    DenoiserSpec video_spec() const {
        const json& m = doc.at("video_model");
        DenoiserSpec s = image_spec();
        s.widths = m.at("widths").get<std::vector<int64_t>>();
        s.video = true;
        s.max_frames = m.at("max_frames").get<int64_t>();
        s.validate();
        return s;
    }

    NoiseSchedule image_schedule() const {
        const json& m = doc.at("image_model");
        return NoiseSchedule::variance_preserving(m.at("schedule_T").get<int>(),
                                                  m.at("beta_start").get<double>(),
                                                  m.at("beta_end").get<double>());
    }

    NoiseSchedule video_ladder() const {
        const json& m = doc.at("video_model");
        return NoiseSchedule::noise_ladder(m.at("ladder_levels").get<int>(),
                                           m.at("sigma_max").get<double>(),
                                           m.at("sigma_min").get<double>());
    }

    // sub-document governing one stage; stage caches invalidate only when
    // their own slice of the config changes
    json stage_config(const std::string& stage) const {
        json s;
        s["seed"] = doc.at("seed");
        s["resolution"] = doc.at("resolution");
        if (stage == "render") {
            s["scene"] = doc.at("scene");
        } else if (stage == "train") {
            s["image_model"] = doc.at("image_model");
            s["video_model"] = doc.at("video_model");
            s["depth_estimator"] = doc.at("depth_estimator");
            s["datagen"] = doc.at("datagen");
        } else if (stage == "customize") {
            s["customization"] = doc.at("customization");
            s["input_frame"] = doc.at("input_frame");
            s["object"] = doc.at("object");
            s["environment"] = doc.at("environment");
        } else if (stage == "keyframes") {
            s["keyframes"] = doc.at("keyframes");
            s["start_frame"] = doc.at("start_frame");
            s["keyframe_spacing"] = doc.at("keyframe_spacing");
            s["object"] = doc.at("object");
            s["environment"] = doc.at("environment");
        } else if (stage == "interpolate") {
            s["interpolation"] = doc.at("interpolation");
        } else if (stage == "evaluate") {
            s["input_frame"] = doc.at("input_frame");
        }
        return s;
    }

    uint64_t stage_config_hash(const std::string& stage) const {
        return fnv1a64(stage_config(stage).dump());
    }
};

// One command at a time per output directory.
class OutputLock {
public:
    explicit OutputLock(const std::string& out_dir) {
        fs::create_directories(out_dir);
        path_ = (fs::path(out_dir) / ".r2v.lock").string();
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            throw DependencyError("output directory is locked by another command (" + path_ +
                                  " exists); remove the lock file if no command is running");
        }
    }
    ~OutputLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

private:
    std::string path_;
    int fd_ = -1;
};

namespace pipeline_detail {

struct StageTimer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    int64_t elapsed_ms() const {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::steady_clock::now() - start)
            .count();
    }
};

inline json hash_files(const std::vector<std::string>& paths) {
    json h = json::object();
    for (const auto& p : paths) {
        h[p] = hash_hex(file_hash(p));
    }
    return h;
}

}  // namespace pipeline_detail

class Pipeline {
public:
    RunConfig cfg;

    explicit Pipeline(RunConfig c) : cfg(std::move(c)) {}

    fs::path stage_dir(const std::string& stage) const { return fs::path(cfg.out_dir) / stage; }

    // A stage is current when its manifest exists, its config slice hash
    // matches, and all recorded inputs/outputs still hash the same.
    bool stage_current(const std::string& stage) const {
        if (!cfg.stage_cache) return false;
        fs::path mpath = stage_dir(stage) / "stage_manifest.json";
        std::ifstream in(mpath);
        if (!in) return false;
        json m = json::parse(in, nullptr, false);
        if (m.is_discarded()) return false;
        if (m.value("config_hash", "") != hash_hex(cfg.stage_config_hash(stage))) return false;
        for (const auto& group : {"inputs", "outputs"}) {
            if (!m.contains(group)) return false;
            for (const auto& [path, h] : m[group].items()) {
                std::error_code ec;
                if (!fs::exists(path, ec)) return false;
                if (hash_hex(file_hash(path)) != h.get<std::string>()) return false;
            }
        }
        return true;
    }

    void write_stage_manifest(const std::string& stage, const std::vector<std::string>& inputs,
                              const std::vector<std::string>& outputs, int64_t wall_ms,
                              const json& extra = json::object()) const {
        json m = extra;
        m["stage"] = stage;
        m["config_hash"] = hash_hex(cfg.stage_config_hash(stage));
        m["config"] = cfg.stage_config(stage);
        m["inputs"] = pipeline_detail::hash_files(inputs);
        m["outputs"] = pipeline_detail::hash_files(outputs);
        m["wall_ms"] = wall_ms;
        m["version"] = "0.1.0";
        std::ofstream out(stage_dir(stage) / "stage_manifest.json");
        out << m.dump(2) << "\n";
    }

    void require_stage(const std::string& stage, const std::string& producing_command) const {
        fs::path mpath = stage_dir(stage) / "stage_manifest.json";
        if (!fs::exists(mpath)) {
            throw DependencyError("missing upstream artifact: stage '" + stage +
                                  "' has not produced outputs in " + cfg.out_dir + "; run `r2v " +
                                  producing_command + "` first");
        }
        std::ifstream in(mpath);
        json m = json::parse(in, nullptr, false);
        if (m.is_discarded()) {
            throw DependencyError("corrupt stage manifest for '" + stage + "'; rerun `r2v " +
                                  producing_command + "`");
        }
        for (const auto& [path, h] : m["outputs"].items()) {
            std::error_code ec;
            if (!fs::exists(path, ec) || hash_hex(file_hash(path)) != h.get<std::string>()) {
                throw DependencyError("stale upstream artifact '" + path + "' of stage '" + stage +
                                      "'; rerun `r2v " + producing_command + "`");
            }
        }
    }

    // ---- render ----

    std::string cmd_render() {
        const std::string stage = "render";
        if (stage_current(stage)) {
            std::printf("[render] cached\n");
            return stage_dir(stage).string();
        }
        pipeline_detail::StageTimer timer;
        SceneDescription desc = load_scene_file(cfg.scene_path());
        SceneAnimation scene = build_scene_animation(desc);
        int res = cfg.resolution();
        auto packs = render_animation(scene, res, res);

        fs::path dir = stage_dir(stage);
        fs::create_directories(dir);
        std::vector<std::string> outputs;
        for (size_t f = 0; f < packs.size(); f++) {
            std::string base = (dir / format_index("frame_%04d", static_cast<int>(f))).string();
            write_png_rgb8(base + ".rgb.png", packs[f].rgb);
            write_pfm(base + ".depth.pfm", packs[f].depth);
            write_png_mask(base + ".mask.png", packs[f].coverage_mask);
            write_png_mask(base + ".fgmask.png", packs[f].fg_mask);
            outputs.push_back(base + ".rgb.png");
            outputs.push_back(base + ".depth.pfm");
            outputs.push_back(base + ".mask.png");
            outputs.push_back(base + ".fgmask.png");
        }
        const Camera& cam0 = scene.camera_track[0];
        json manifest;
        manifest["resolution"] = {res, res};
        manifest["frame_count"] = scene.n_frames;
        manifest["camera"] = {{"vertical_fov", cam0.vertical_fov},
                              {"aspect", cam0.aspect},
                              {"near", cam0.near},
                              {"far", cam0.far}};
        {
            std::ofstream mo(dir / "manifest.json");
            mo << manifest.dump(2) << "\n";
        }
        outputs.push_back((dir / "manifest.json").string());
        write_stage_manifest(stage, {cfg.scene_path()}, outputs, timer.elapsed_ms());
        std::printf("[render] %d frames -> %s (%lld ms)\n", scene.n_frames, dir.c_str(),
                    static_cast<long long>(timer.elapsed_ms()));
        return dir.string();
    }

    std::vector<GuidancePack> load_packs() const {
        fs::path dir = stage_dir("render");
        std::ifstream in(dir / "manifest.json");
        if (!in) throw DependencyError("render outputs missing; run `r2v render` first");
        json m = json::parse(in);
        int n = m.at("frame_count").get<int>();
        std::vector<GuidancePack> packs;
        for (int f = 0; f < n; f++) {
            std::string base = (dir / format_index("frame_%04d", f)).string();
            GuidancePack p;
            p.rgb = read_png_rgb8(base + ".rgb.png");
            p.depth = read_pfm(base + ".depth.pfm");
            p.coverage_mask = read_png_mask(base + ".mask.png");
            p.fg_mask = read_png_mask(base + ".fgmask.png");
            packs.push_back(std::move(p));
        }
        return packs;
    }

    // ---- train ----

    std::string cmd_train() {
        const std::string stage = "train";
        if (stage_current(stage)) {
            std::printf("[train] cached\n");
            return stage_dir(stage).string();
        }
        pipeline_detail::StageTimer timer;
        fs::path dir = stage_dir(stage);
        fs::create_directories(dir);

        const json& dg = cfg.doc.at("datagen");
        DataGenConfig dgc;
        dgc.image_size = cfg.resolution();
        dgc.context_dim = cfg.image_spec().context_dim;
        dgc.scene_count = dg.at("scene_count").get<int>();
        dgc.fg_only_count = dg.at("fg_only_count").get<int>();
        dgc.video_clip_count = dg.at("video_clip_count").get<int>();
        dgc.clip_frames = cfg.doc.at("video_model").at("clip_frames").get<int>();
        dgc.seed = derive_seed(cfg.seed(), "datagen");
        GeneratedData data = generate_training_data(dgc);

        // image model + its control encoder
        auto ischedule = cfg.image_schedule();
        Denoiser image_model(cfg.image_spec(), derive_seed(cfg.seed(), "image-model-init"));
        ControlEncoder image_control(cfg.image_spec(), derive_seed(cfg.seed(), "image-control-init"));
        {
            const json& m = cfg.doc.at("image_model");
            TrainConfig tc;
            tc.lr = m.at("lr").get<double>();
            tc.steps = m.at("train_steps").get<int>();
            tc.batch = m.at("batch").get<int>();
            tc.seed = derive_seed(cfg.seed(), "image-train");
            TrainStats st = train_denoiser(image_model, &image_control, data.image_samples,
                                           ischedule, tc);
            std::printf("[train] image model: held-out %.4f -> %.4f\n", st.heldout_before,
                        st.heldout_after);
        }

        // video model + its control encoder
        Denoiser video_model(cfg.video_spec(), derive_seed(cfg.seed(), "video-model-init"));
        ControlEncoder video_control(cfg.video_spec(), derive_seed(cfg.seed(), "video-control-init"));
        {
            const json& m = cfg.doc.at("video_model");
            TrainConfig tc;
            tc.lr = m.at("lr").get<double>();
            tc.steps = m.at("train_steps").get<int>();
            tc.seed = derive_seed(cfg.seed(), "video-train");
            TrainStats st = train_video_denoiser(video_model, &video_control, data.video_samples,
                                                 cfg.video_ladder(), tc);
            std::printf("[train] video model: held-out %.4f -> %.4f\n", st.heldout_before,
                        st.heldout_after);
        }

        // learned depth estimator
        LearnedDepthEstimator estimator(derive_seed(cfg.seed(), "depth-estimator-init"));
        {
            const json& m = cfg.doc.at("depth_estimator");
            LearnedDepthEstimator::FitConfig fc;
            fc.steps = m.at("steps").get<int>();
            fc.lr = m.at("lr").get<double>();
            fc.seed = derive_seed(cfg.seed(), "depth-estimator");
            estimator.fit(data.depth_pairs, fc);
        }

        json meta;
        meta["seed"] = cfg.seed();
        save_denoiser((dir / "image_model.r2vt").string(), image_model, meta);
        save_control_encoder((dir / "image_control.r2vt").string(), image_control, meta);
        save_denoiser((dir / "video_model.r2vt").string(), video_model, meta);
        save_control_encoder((dir / "video_control.r2vt").string(), video_control, meta);
        save_depth_estimator((dir / "depth_estimator.r2vt").string(), estimator, meta);

        std::vector<std::string> outputs = {
            (dir / "image_model.r2vt").string(),   (dir / "image_control.r2vt").string(),
            (dir / "video_model.r2vt").string(),   (dir / "video_control.r2vt").string(),
            (dir / "depth_estimator.r2vt").string(),
        };
        write_stage_manifest(stage, {}, outputs, timer.elapsed_ms());
        std::printf("[train] models -> %s (%lld ms)\n", dir.c_str(),
                    static_cast<long long>(timer.elapsed_ms()));
        return dir.string();
    }

    // ---- customize ----

    std::string cmd_customize() {
        const std::string stage = "customize";
        require_stage("render", "render");
        require_stage("train", "train");
        if (stage_current(stage)) {
            std::printf("[customize] cached\n");
            return stage_dir(stage).string();
        }
        pipeline_detail::StageTimer timer;
        fs::path dir = stage_dir(stage);
        fs::create_directories(dir);

        auto packs = load_packs();
        int input_frame = cfg.doc.at("input_frame").get<int>();
        R2V_CONFIG_CHECK(input_frame >= 0 && input_frame < static_cast<int>(packs.size()),
                         "config: input_frame outside the rendered range");
        const Tensor& input_image = packs[static_cast<size_t>(input_frame)].rgb;
        write_png_rgb8((dir / "input.png").string(), input_image);

        Denoiser model = load_denoiser((stage_dir("train") / "image_model.r2vt").string());
        SceneDescription desc = load_scene_file(cfg.scene_path());

        const json& c = cfg.doc.at("customization");
        CustomizationConfig cc;
        cc.rank = c.at("rank").get<int64_t>();
        cc.lr = c.at("lr").get<double>();
        cc.steps = c.at("steps").get<int>();
        cc.lambda = c.at("lambda").get<double>();
        cc.seed = derive_seed(cfg.seed(), "customize");

        auto views = make_multiview_samples(desc.foreground, c.at("novel_views").get<int>(),
                                            c.at("novel_view_radius").get<double>(),
                                            cfg.resolution(), cfg.prompt_fg(),
                                            model.spec.context_dim);
        PromptEmbedding ci = embed_prompt(cfg.prompt_full(), model.spec.context_dim);
        auto adapter = train_customization(model, input_image, ci, views, cfg.image_schedule(), cc);

        json meta;
        meta["lambda"] = cc.lambda;
        meta["input_frame"] = input_frame;
        save_lora((dir / "lora.r2vt").string(), *adapter, meta);

        std::vector<std::string> inputs = {(stage_dir("train") / "image_model.r2vt").string(),
                                           cfg.scene_path()};
        std::vector<std::string> outputs = {(dir / "lora.r2vt").string(),
                                            (dir / "input.png").string()};
        write_stage_manifest(stage, inputs, outputs, timer.elapsed_ms());
        std::printf("[customize] adapter -> %s (%lld ms)\n", dir.c_str(),
                    static_cast<long long>(timer.elapsed_ms()));
        return dir.string();
    }

    // ---- keyframes ----

    std::vector<int64_t> keyframe_indices(int n_frames) const {
        int start = cfg.doc.at("start_frame").get<int>();
        int spacing = cfg.doc.at("keyframe_spacing").get<int>();
        R2V_CONFIG_CHECK(start >= 0 && start < n_frames, "config: start_frame outside range");
        std::vector<int64_t> idx;
        for (int f = start; f < n_frames; f += spacing) idx.push_back(f);
        if (idx.size() < 2) {
            throw ConfigError("config: keyframe spacing leaves fewer than two keyframes");
        }
        return idx;
    }

    std::string cmd_keyframes() {
        const std::string stage = "keyframes";
        require_stage("render", "render");
        require_stage("train", "train");
        require_stage("customize", "customize");
        if (stage_current(stage)) {
            std::printf("[keyframes] cached\n");
            return stage_dir(stage).string();
        }
        pipeline_detail::StageTimer timer;
        fs::path dir = stage_dir(stage);
        fs::create_directories(dir);

        auto packs = load_packs();
        Denoiser model = load_denoiser((stage_dir("train") / "image_model.r2vt").string());
        ControlEncoder control =
            load_control_encoder((stage_dir("train") / "image_control.r2vt").string());
        auto adapter = load_lora((stage_dir("customize") / "lora.r2vt").string());
        model.attach_lora(adapter);

        auto indices = keyframe_indices(static_cast<int>(packs.size()));
        std::vector<const GuidancePack*> pack_ptrs;
        for (int64_t i : indices) pack_ptrs.push_back(&packs[static_cast<size_t>(i)]);

        const json& k = cfg.doc.at("keyframes");
        KeyframeGenConfig kc;
        kc.steps = k.at("steps").get<int>();
        kc.control_strength = k.at("control_strength").get<double>();
        kc.extended_attention = k.at("extended_attention").get<bool>();
        kc.seed = derive_seed(cfg.seed(), "keyframes");
        bool guided = k.at("guided").get<bool>();
        if (guided) {
            kc.injection.tau_conv = k.at("tau_conv").get<double>();
            kc.injection.tau_sa = k.at("tau_sa").get<double>();
            kc.injection.conv_taps = model.spec.up_conv_tap_ids();
            kc.injection.sa_taps = model.spec.up_sa_tap_ids();
        } else {
            kc.use_inverted_init = false;
            kc.control_strength = 0.0;
        }
        PromptEmbedding prompt = embed_prompt(cfg.prompt_full(), model.spec.context_dim);
        KeyframeSet ks = generate_keyframes(pack_ptrs, indices, model, guided ? &control : nullptr,
                                            prompt, cfg.image_schedule(), kc);

        std::vector<std::string> outputs;
        for (size_t i = 0; i < ks.frames.size(); i++) {
            std::string p = (dir / format_index("kf_%04d.png", static_cast<int>(indices[i]))).string();
            write_png_rgb8(p, ks.frames[i]);
            outputs.push_back(p);
        }
        json manifest;
        manifest["indices"] = ks.frame_indices;
        manifest["seed"] = kc.seed;
        manifest["config_hash"] = hash_hex(cfg.stage_config_hash(stage));
        manifest["adapter_hash"] =
            hash_hex(file_hash((stage_dir("customize") / "lora.r2vt").string()));
        {
            std::ofstream mo(dir / "manifest.json");
            mo << manifest.dump(2) << "\n";
        }
        outputs.push_back((dir / "manifest.json").string());
        std::vector<std::string> inputs = {(stage_dir("train") / "image_model.r2vt").string(),
                                           (stage_dir("train") / "image_control.r2vt").string(),
                                           (stage_dir("customize") / "lora.r2vt").string()};
        write_stage_manifest(stage, inputs, outputs, timer.elapsed_ms());
        std::printf("[keyframes] %zu keyframes -> %s (%lld ms)\n", ks.frames.size(), dir.c_str(),
                    static_cast<long long>(timer.elapsed_ms()));
        return dir.string();
    }

    KeyframeSet load_keyframes() const {
        fs::path dir = stage_dir("keyframes");
        std::ifstream in(dir / "manifest.json");
        if (!in) throw DependencyError("keyframes missing; run `r2v keyframes` first");
        json m = json::parse(in);
        KeyframeSet ks;
        ks.frame_indices = m.at("indices").get<std::vector<int64_t>>();
        for (int64_t i : ks.frame_indices) {
            ks.frames.push_back(
                read_png_rgb8((dir / format_index("kf_%04d.png", static_cast<int>(i))).string()));
        }
        ks.validate();
        return ks;
    }

    // ---- interpolate ----

    std::string cmd_interpolate() {
        const std::string stage = "interpolate";
        require_stage("render", "render");
        require_stage("train", "train");
        require_stage("customize", "customize");
        require_stage("keyframes", "keyframes");
        if (stage_current(stage)) {
            std::printf("[interpolate] cached\n");
            return stage_dir(stage).string();
        }
        pipeline_detail::StageTimer timer;
        fs::path dir = stage_dir(stage);
        fs::create_directories(dir);

        auto packs = load_packs();
        KeyframeSet ks = load_keyframes();
        Denoiser model = load_denoiser((stage_dir("train") / "video_model.r2vt").string());
        ControlEncoder control =
            load_control_encoder((stage_dir("train") / "video_control.r2vt").string());

        const json& icfg = cfg.doc.at("interpolation");
        InterpolationConfig ic;
        ic.steps = icfg.at("steps").get<int>();
        ic.control_strength = icfg.at("control_strength").get<double>();
        ic.bidirectional = icfg.at("bidirectional").get<bool>();
        ic.seed = derive_seed(cfg.seed(), "interpolate");
        bool guided = icfg.at("guided").get<bool>();
        if (guided) {
            ic.injection.tau_conv = icfg.at("tau_conv").get<double>();
            ic.injection.tau_sa = icfg.at("tau_sa").get<double>();
            ic.injection.conv_taps = {"up1.res"};  // first up-block conv features
            ic.injection.sa_taps = {"mid.attn"};
            for (const auto& id : model.spec.up_sa_tap_ids()) ic.injection.sa_taps.push_back(id);
        } else {
            ic.use_inverted_init = false;
            ic.control_strength = 0.0;
        }
        PromptEmbedding prompt = embed_prompt(cfg.prompt_full(), model.spec.context_dim);
        ChainResult res =
            chain(ks, packs, model, guided ? &control : nullptr, prompt, cfg.video_ladder(), ic);

        std::vector<std::string> outputs;
        int64_t base_index = ks.frame_indices.front();
        for (size_t i = 0; i < res.frames.size(); i++) {
            std::string p =
                (dir / format_index("frame_%04d.png", static_cast<int>(base_index) + static_cast<int>(i)))
                    .string();
            write_png_rgb8(p, res.frames[i]);
            outputs.push_back(p);
        }
        json manifest;
        manifest["frame_count"] = res.frames.size();
        manifest["first_index"] = base_index;
        manifest["seed"] = ic.seed;
        manifest["config_hash"] = hash_hex(cfg.stage_config_hash(stage));
        manifest["segment_hashes"] = json::array();
        for (uint64_t h : res.segment_hashes) manifest["segment_hashes"].push_back(hash_hex(h));
        {
            std::ofstream mo(dir / "manifest.json");
            mo << manifest.dump(2) << "\n";
        }
        outputs.push_back((dir / "manifest.json").string());
        std::vector<std::string> inputs = {(stage_dir("train") / "video_model.r2vt").string(),
                                           (stage_dir("train") / "video_control.r2vt").string()};
        write_stage_manifest(stage, inputs, outputs, timer.elapsed_ms());
        std::printf("[interpolate] %zu frames -> %s (%lld ms)\n", res.frames.size(), dir.c_str(),
                    static_cast<long long>(timer.elapsed_ms()));
        return dir.string();
    }

    // ---- evaluate ----

    json cmd_evaluate() {
        const std::string stage = "evaluate";
        require_stage("render", "render");
        require_stage("train", "train");
        require_stage("interpolate", "interpolate");
        pipeline_detail::StageTimer timer;
        fs::path dir = stage_dir(stage);
        fs::create_directories(dir);

        auto packs = load_packs();
        fs::path idir = stage_dir("interpolate");
        json im;
        {
            std::ifstream in(idir / "manifest.json");
            im = json::parse(in);
        }
        int64_t first = im.at("first_index").get<int64_t>();
        size_t count = im.at("frame_count").get<size_t>();
        std::vector<Tensor> frames;
        std::vector<GuidancePack> ref_packs;
        for (size_t i = 0; i < count; i++) {
            frames.push_back(read_png_rgb8(
                (idir / format_index("frame_%04d.png", static_cast<int>(first) + static_cast<int>(i)))
                    .string()));
            ref_packs.push_back(packs[static_cast<size_t>(first) + i]);
        }

        LearnedDepthEstimator estimator =
            load_depth_estimator((stage_dir("train") / "depth_estimator.r2vt").string());
        Tensor input_image = read_png_rgb8((stage_dir("customize") / "input.png").string());
        DefaultEmbedder embedder;

        double ssim_sum = 0.0;
        for (size_t i = 0; i < frames.size(); i++) {
            ssim_sum += ssim(frames[i], ref_packs[i].rgb);
        }
        json report;
        report["ssim"] = ssim_sum / static_cast<double>(frames.size());
        report["d_rmse"] = d_rmse_vs_packs(frames, ref_packs, estimator);
        report["consistency"] = consistency(frames, embedder);
        report["input_similarity"] = input_similarity(frames, input_image, embedder);
        report["frame_count"] = frames.size();
        report["seed"] = cfg.seed();
        report["config_hash"] = hash_hex(fnv1a64(cfg.doc.dump()));

        {
            std::ofstream ro(dir / "report.json");
            ro << report.dump(2) << "\n";
        }
        write_stage_manifest(stage, {}, {(dir / "report.json").string()}, timer.elapsed_ms());
        std::printf("%s\n", report.dump(2).c_str());
        return report;
    }

    json cmd_demo() {
        cmd_render();
        cmd_train();
        cmd_customize();
        cmd_keyframes();
        cmd_interpolate();
        return cmd_evaluate();
    }
};

}  // namespace r2v
