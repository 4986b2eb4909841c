#pragma once

// Procedural training data: randomized box-on-checkerboard scenes rendered by
// the rasterizer, with template prompts derived from the sampled colors. The
// same generator feeds the base image model, the video model, and the learned
// depth estimator.

#include "r2v/scene.hpp"
#include "r2v/training.hpp"

namespace r2v {

struct DataGenConfig {
    int image_size = 32;
    int encode_levels = 1;
    int64_t context_dim = 24;
    int scene_count = 24;
    int fg_only_count = 8;     // foreground-on-empty renders with "a {object}" prompts
    int video_clip_count = 8;
    int clip_frames = 8;
    uint64_t seed = 0;
};

namespace datagen_detail {

struct Palette {
    const char* name;
    Color3 color;
};

inline const std::vector<Palette>& palette() {
    static const std::vector<Palette> p = {
        {"red", {0.85, 0.15, 0.15}},  {"blue", {0.15, 0.2, 0.85}}, {"green", {0.15, 0.75, 0.2}},
        {"gold", {0.9, 0.75, 0.15}},  {"violet", {0.6, 0.2, 0.8}}, {"teal", {0.1, 0.7, 0.7}},
        {"orange", {0.95, 0.55, 0.1}},
    };
    return p;
}

inline const Palette& pick_color(Rng& rng) {
    const auto& p = palette();
    return p[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(p.size()) - 1))];
}

struct RandomScene {
    SceneAnimation scene;
    std::string object_word;
    std::string env_word;
};

inline RandomScene random_scene(Rng& rng, int n_frames, bool with_background) {
    RandomScene out;
    const auto& front = pick_color(rng);
    const auto& back = pick_color(rng);
    out.object_word = front.name;
    out.env_word = with_background ? "checkerboard" : "void";

    SceneAnimation& s = out.scene;
    s.n_frames = n_frames;
    double size = rng.uniform(0.35, 0.6);
    s.foreground = make_box(size, size, size, front.color, back.color);
    if (with_background) {
        s.background = make_checker_plane(5.0, 5.0, 6, {0.85, 0.85, 0.85}, {0.22, 0.22, 0.32});
    }

    RigidTransform base;
    base.translation = {rng.uniform(-0.35, 0.35), size / 2 + rng.uniform(0.0, 0.25),
                        rng.uniform(-0.35, 0.35)};
    double spin = rng.uniform(-1.2, 1.2);
    for (int f = 0; f < n_frames; f++) {
        RigidTransform t = base;
        t.rotation = Mat3::axis_angle({0, 1, 0}, spin * f / std::max(1, n_frames - 1));
        s.fg_transforms.push_back(t);
    }

    Camera cam = Camera::look_at({rng.uniform(-0.8, 0.8), rng.uniform(0.7, 1.4), rng.uniform(-2.8, -2.0)},
                                 {0, 0.25, 0}, {0, 1, 0}, rng.uniform(0.85, 1.15), 1.0, 0.05, 60.0);
    TrajectoryParams tp;
    TrajectoryKind kind = TrajectoryKind::Static;
    switch (rng.randint(0, 2)) {
        case 0:
            kind = TrajectoryKind::Static;
            break;
        case 1:
            kind = TrajectoryKind::Orbit;
            tp.orbit_angle = rng.uniform(-1.0, 1.0);
            tp.orbit_center = {0, 0.25, 0};
            break;
        case 2:
            kind = TrajectoryKind::Dolly;
            tp.dolly_distance = rng.uniform(-0.6, 0.6);
            break;
    }
    s.camera_track = make_camera_trajectory(cam, kind, tp, n_frames);
    return out;
}

}  // namespace datagen_detail

inline ImageSample pack_to_image_sample(const GuidancePack& pack, const std::string& prompt,
                                        int64_t context_dim, int encode_levels,
                                        bool with_control = true) {
    ImageSample s;
    s.latent = to_model_space(encode_image(pack.rgb, encode_levels));
    s.prompt = embed_prompt(prompt, context_dim);
    if (with_control) s.depth_in = control_depth_input(pack.depth);
    return s;
}

struct GeneratedData {
    std::vector<ImageSample> image_samples;
    std::vector<VideoSample> video_samples;
    // rgb -> normalized-depth pairs for the learned depth estimator
    std::vector<std::pair<Tensor, Tensor>> depth_pairs;  // (HxWx3 rgb, HxW depth in [0,1] w/ 0=empty)
};

inline GeneratedData generate_training_data(const DataGenConfig& cfg) {
    using namespace datagen_detail;
    GeneratedData data;
    Rng rng(derive_seed(cfg.seed, "datagen"));
    int res = cfg.image_size;

    // estimator targets are per-image relative depth: min-max normalized raw z
    // over covered pixels (matching the reference normalization's orientation)
    auto add_depth_pair = [&](const GuidancePack& pack) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (int64_t i = 0; i < pack.depth.numel(); i++) {
            if (pack.depth[i] > 0.0) {
                lo = std::min(lo, pack.depth[i]);
                hi = std::max(hi, pack.depth[i]);
            }
        }
        if (!std::isfinite(lo)) return;  // nothing rendered
        double span = (hi > lo) ? hi - lo : 1.0;
        Tensor d(pack.depth.shape);
        for (int64_t i = 0; i < d.numel(); i++) {
            d[i] = pack.depth[i] > 0.0 ? (pack.depth[i] - lo) / span : 0.0;
        }
        data.depth_pairs.emplace_back(pack.rgb, std::move(d));
    };

    // full scenes: one random frame each
    for (int i = 0; i < cfg.scene_count; i++) {
        RandomScene rs = random_scene(rng, 4, true);
        int f = static_cast<int>(rng.randint(0, rs.scene.n_frames - 1));
        GuidancePack pack = render_frame(rs.scene, f, res, res);
        std::string prompt = "a " + rs.object_word + " box in " + rs.env_word;
        data.image_samples.push_back(
            pack_to_image_sample(pack, prompt, cfg.context_dim, cfg.encode_levels));
        add_depth_pair(pack);
    }

    // foreground-only renders, prompt "a {object} box"
    for (int i = 0; i < cfg.fg_only_count; i++) {
        RandomScene rs = random_scene(rng, 2, false);
        GuidancePack pack = render_frame(rs.scene, 0, res, res);
        std::string prompt = "a " + rs.object_word + " box";
        data.image_samples.push_back(
            pack_to_image_sample(pack, prompt, cfg.context_dim, cfg.encode_levels));
        add_depth_pair(pack);
    }

    // video clips, both time orientations so reversed trajectories stay
    // in-distribution
    for (int i = 0; i < cfg.video_clip_count; i++) {
        RandomScene rs = random_scene(rng, cfg.clip_frames, true);
        auto packs = render_animation(rs.scene, res, res);
        std::string prompt = "a " + rs.object_word + " box in " + rs.env_word;
        for (bool reversed : {false, true}) {
            VideoSample vs;
            vs.prompt = embed_prompt(prompt, cfg.context_dim);
            int64_t F = cfg.clip_frames;
            Tensor lat0 = to_model_space(encode_image(packs[0].rgb, cfg.encode_levels));
            vs.latents = Tensor({F, lat0.shape[0], lat0.shape[1], lat0.shape[2]});
            vs.depth_in = Tensor({F, 1, res, res});
            for (int64_t f = 0; f < F; f++) {
                int64_t src = reversed ? (F - 1 - f) : f;
                Tensor lat =
                    to_model_space(encode_image(packs[static_cast<size_t>(src)].rgb, cfg.encode_levels));
                std::memcpy(vs.latents.ptr() + f * lat.numel(), lat.ptr(),
                            static_cast<size_t>(lat.numel()) * sizeof(double));
                Tensor din = control_depth_input(packs[static_cast<size_t>(src)].depth);
                std::memcpy(vs.depth_in.ptr() + f * din.numel(), din.ptr(),
                            static_cast<size_t>(din.numel()) * sizeof(double));
            }
            data.video_samples.push_back(std::move(vs));
        }
        if (i < 2) {
            for (const auto& pack : packs) add_depth_pair(pack);
        }
    }

    return data;
}

}  // namespace r2v
