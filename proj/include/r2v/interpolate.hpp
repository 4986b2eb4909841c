#pragma once

// Training-free 3D-guided video interpolation between adjacent keyframes:
// EDM inversion of the rendered segment, then per-step dual-trajectory
// denoising (forward conditioned on the first keyframe, time-reversed
// conditioned on the last) fused by a distance-weighted convex combination.

#include "r2v/keyframes.hpp"

namespace r2v {

struct FusionWeights {
    std::vector<double> alphas;  // per frame; 0 = all forward, 1 = all reverse

    // linear in frame distance: alpha_j = j / (N-1)
    static FusionWeights linear(int64_t n) {
        R2V_CHECK(n >= 1, "fusion: need at least one frame");
        FusionWeights w;
        for (int64_t j = 0; j < n; j++) {
            w.alphas.push_back(n > 1 ? static_cast<double>(j) / (n - 1) : 0.0);
        }
        return w;
    }

    static FusionWeights forward_only(int64_t n) {
        FusionWeights w;
        w.alphas.assign(static_cast<size_t>(n), 0.0);
        return w;
    }

    void validate() const {
        R2V_CHECK(!alphas.empty(), "fusion: empty weights");
        R2V_CHECK(alphas.front() == 0.0, "fusion: alpha_0 must be exactly 0");
        if (alphas.size() > 1) {
            R2V_CHECK(alphas.back() == 1.0 || alphas.back() == 0.0,
                      "fusion: alpha_{N-1} must be exactly 1 (or 0 for forward-only)");
        }
        for (size_t j = 0; j < alphas.size(); j++) {
            R2V_CHECK(alphas[j] >= 0.0 && alphas[j] <= 1.0, "fusion: alpha outside [0,1]");
            if (j > 0) R2V_CHECK(alphas[j] >= alphas[j - 1], "fusion: alphas must be nondecreasing");
        }
    }
};

inline Latent time_reverse(const Latent& z) {
    z.validate();
    Latent out = z;
    int64_t F = z.frames();
    int64_t per = z.data.numel() / std::max<int64_t>(F, 1);
    for (int64_t f = 0; f < F; f++) {
        std::memcpy(out.data.ptr() + f * per, z.data.ptr() + (F - 1 - f) * per,
                    static_cast<size_t>(per) * sizeof(double));
        out.frame_indices[static_cast<size_t>(f)] = z.frame_indices[static_cast<size_t>(F - 1 - f)];
    }
    return out;
}

// out_j = (1-alpha_j) fwd_j + alpha_j rev_j, exact at the endpoints (alpha 0
// or 1 copies the branch bit-for-bit).
inline Latent fuse(const Latent& fwd, const Latent& rev_unreversed, const FusionWeights& weights) {
    R2V_CHECK(fwd.data.same_shape(rev_unreversed.data), "fuse: shape mismatch");
    R2V_CHECK(static_cast<int64_t>(weights.alphas.size()) == fwd.frames(), "fuse: weight count");
    Latent out = fwd;
    int64_t F = fwd.frames();
    int64_t per = fwd.data.numel() / F;
    for (int64_t f = 0; f < F; f++) {
        double a = weights.alphas[static_cast<size_t>(f)];
        double* o = out.data.ptr() + f * per;
        const double* pf = fwd.data.ptr() + f * per;
        const double* pr = rev_unreversed.data.ptr() + f * per;
        if (a == 0.0) {
            continue;  // out already holds fwd
        } else if (a == 1.0) {
            std::memcpy(o, pr, static_cast<size_t>(per) * sizeof(double));
        } else {
            for (int64_t i = 0; i < per; i++) {
                // a + t(b-a) keeps the result inside [min,max] elementwise
                o[i] = pf[i] + a * (pr[i] - pf[i]);
            }
        }
    }
    return out;
}

struct InterpolationConfig {
    int steps = 25;
    InjectionConfig injection;      // taus default to 0: inject at every step
    double control_strength = 1.0;  // 0 disables depth control
    bool use_inverted_init = true;  // false: seeded random noise at sigma_max
    bool bidirectional = true;      // false: pure forward trajectory
    uint64_t seed = 0;
    int encode_levels = 1;

    InterpolationConfig() {
        injection.tau_conv = 0.0;
        injection.tau_sa = 0.0;
    }
};

// Interpolate between two adjacent keyframes across the rendered segment
// packs[0..N-1]; returns N decoded frames including both endpoints.
inline std::vector<Tensor> interpolate(const Tensor& kf_a, const Tensor& kf_b,
                                       const std::vector<const GuidancePack*>& segment,
                                       const std::vector<int64_t>& indices, const Denoiser& model,
                                       const ControlEncoder* control, const PromptEmbedding& prompt,
                                       const NoiseSchedule& ladder, InterpolationConfig cfg) {
    R2V_CHECK(model.spec.video, "interpolate: video model expected");
    R2V_CHECK(segment.size() >= 2, "interpolate: segment needs at least two frames");
    R2V_CHECK(segment.size() == indices.size(), "interpolate: index count mismatch");
    int64_t N = static_cast<int64_t>(segment.size());
    if (N > model.spec.max_frames) {
        throw ConfigError("interpolate: segment of " + std::to_string(N) +
                          " frames exceeds the video model capacity of " +
                          std::to_string(model.spec.max_frames) +
                          "; add keyframes to shorten the segment");
    }
    ladder.validate();
    R2V_CHECK(ladder.kind == ScheduleKind::NoiseLadder, "interpolate: needs a noise ladder");

    bool inject_active = !cfg.injection.conv_taps.empty() || !cfg.injection.sa_taps.empty();
    if (inject_active) {
        cfg.injection.total_steps = ladder.steps_total();
        cfg.injection.schedule_kind = ScheduleKind::NoiseLadder;
        cfg.injection.visibility.clear();
        for (const auto* p : segment) cfg.injection.visibility.push_back(p->coverage_mask);
        cfg.injection.validate(model.spec);
    }

    // encode the rendered segment and both conditioning keyframes
    Tensor cond_a = to_model_space(encode_image(kf_a, cfg.encode_levels));
    Tensor cond_b = to_model_space(encode_image(kf_b, cfg.encode_levels));
    Latent z_render;
    {
        Tensor first = to_model_space(encode_image(segment[0]->rgb, cfg.encode_levels));
        z_render.data = Tensor({N, first.shape[0], first.shape[1], first.shape[2]});
        for (int64_t f = 0; f < N; f++) {
            Tensor lat = to_model_space(encode_image(segment[static_cast<size_t>(f)]->rgb,
                                                     cfg.encode_levels));
            std::memcpy(z_render.data.ptr() + f * lat.numel(), lat.ptr(),
                        static_cast<size_t>(lat.numel()) * sizeof(double));
        }
        z_render.frame_indices = indices;
    }

    bool use_control = control != nullptr && cfg.control_strength != 0.0;
    Tensor depths_fwd({N, 1, segment[0]->height(), segment[0]->width()});
    for (int64_t f = 0; f < N; f++) {
        Tensor din = control_depth_input(segment[static_cast<size_t>(f)]->depth);
        std::memcpy(depths_fwd.ptr() + f * din.numel(), din.ptr(),
                    static_cast<size_t>(din.numel()) * sizeof(double));
    }
    Tensor depths_rev(depths_fwd.shape);
    {
        int64_t per = depths_fwd.numel() / N;
        for (int64_t f = 0; f < N; f++) {
            std::memcpy(depths_rev.ptr() + f * per, depths_fwd.ptr() + (N - 1 - f) * per,
                        static_cast<size_t>(per) * sizeof(double));
        }
    }
    ControlResidualSet ctrl_fwd, ctrl_rev;
    if (use_control) {
        ctrl_fwd = control->encode(depths_fwd, cfg.control_strength);
        ctrl_rev = control->encode(depths_rev, cfg.control_strength);
    }

    // phase 1: EDM inversion of the rendered segment. The conditioning frame
    // is the average of the two endpoint keyframe latents: neither trajectory
    // is preferred, so reversing the segment mirrors the whole computation,
    // and a static segment is conditioned on its own keyframe.
    Tensor cond_mid = cond_a;
    for (int64_t i = 0; i < cond_mid.numel(); i++) {
        cond_mid[i] = 0.5 * (cond_a[i] + cond_b[i]);
    }
    FeatureTrace trace;
    {
        DenoiserFn fn = [&](const Tensor& z, const DenoiseCall& call) {
            Denoiser::Inputs in;
            in.prompt = &prompt;
            in.image_cond = &cond_mid;
            if (use_control) in.control = &ctrl_fwd;
            return model.denoise(z, noise_position(ladder, call.step_index), call, in);
        };
        if (cfg.use_inverted_init) {
            auto [z_inv, tr] = edm_invert(z_render, fn, ladder, cfg.steps);
            trace = std::move(tr);
            z_render = std::move(z_inv);
        } else {
            Rng rng(derive_seed(cfg.seed, "interp-init"));
            z_render.data = Tensor::randn(z_render.data.shape, rng) * ladder.sigma(0);
            inject_active = false;
        }
    }

    // the reverse trajectory reads the trace and visibility in reversed frame
    // order; batch frame f corresponds to segment frame N-1-f
    auto make_hooks = [&](bool reversed) -> HookProvider {
        if (!inject_active) return nullptr;
        InjectionConfig c = cfg.injection;
        std::vector<TraceSource> sources;
        for (int64_t f = 0; f < N; f++) {
            sources.push_back({&trace, reversed ? N - 1 - f : f});
        }
        if (reversed) {
            std::reverse(c.visibility.begin(), c.visibility.end());
        }
        return [&trace, &model, c = std::move(c), sources = std::move(sources)](int trace_step) {
            return inject_features(trace_step, sources, model.spec, c);
        };
    };

    FusionWeights weights = cfg.bidirectional ? FusionWeights::linear(N) : FusionWeights::forward_only(N);
    weights.validate();

    DenoiserFn fwd_fn = [&](const Tensor& z, const DenoiseCall& call) {
        Denoiser::Inputs in;
        in.prompt = &prompt;
        in.image_cond = &cond_a;
        if (use_control) in.control = &ctrl_fwd;
        return model.denoise(z, noise_position(ladder, call.step_index), call, in);
    };
    DenoiserFn rev_fn = [&](const Tensor& z, const DenoiseCall& call) {
        Denoiser::Inputs in;
        in.prompt = &prompt;
        in.image_cond = &cond_b;
        if (use_control) in.control = &ctrl_rev;
        return model.denoise(z, noise_position(ladder, call.step_index), call, in);
    };

    HookProvider hooks_fwd = make_hooks(false);
    HookProvider hooks_rev = make_hooks(true);

    auto grid = ladder.sample_grid(cfg.steps);
    Latent z = z_render;
    for (int j = 0; j + 1 < static_cast<int>(grid.size()); j++) {
        int lv_hi = grid[static_cast<size_t>(j)];
        int lv_lo = grid[static_cast<size_t>(j) + 1];
        double s_hi = ladder.sigma(lv_hi);
        double s_lo = ladder.sigma(lv_lo);

        // forward branch
        TapOverride ov_f;
        DenoiseCall call_f;
        call_f.step_index = lv_hi;
        if (hooks_fwd) {
            ov_f = hooks_fwd(lv_lo);
            if (!ov_f.empty()) call_f.overrides = &ov_f;
        }
        Tensor eps_f = fwd_fn(z.data, call_f);
        if (!eps_f.all_finite()) {
            throw NumericError("interpolate: non-finite forward prediction at level " +
                               std::to_string(lv_hi));
        }
        Latent z_f = edm_step(z, eps_f, s_hi, s_lo);

        if (!cfg.bidirectional) {
            z = std::move(z_f);
            continue;
        }

        // time-reversed branch
        Latent z_rev_in = time_reverse(z);
        TapOverride ov_r;
        DenoiseCall call_r;
        call_r.step_index = lv_hi;
        if (hooks_rev) {
            ov_r = hooks_rev(lv_lo);
            if (!ov_r.empty()) call_r.overrides = &ov_r;
        }
        Tensor eps_r = rev_fn(z_rev_in.data, call_r);
        if (!eps_r.all_finite()) {
            throw NumericError("interpolate: non-finite reverse prediction at level " +
                               std::to_string(lv_hi));
        }
        Latent z_r = time_reverse(edm_step(z_rev_in, eps_r, s_hi, s_lo));

        z = fuse(z_f, z_r, weights);
    }

    std::vector<Tensor> frames;
    int64_t per = z.data.numel() / N;
    for (int64_t f = 0; f < N; f++) {
        Tensor lat({z.data.shape[1], z.data.shape[2], z.data.shape[3]});
        std::memcpy(lat.ptr(), z.data.ptr() + f * per, static_cast<size_t>(per) * sizeof(double));
        frames.push_back(decode_image(from_model_space(lat), cfg.encode_levels));
    }
    return frames;
}

struct ChainResult {
    std::vector<Tensor> frames;
    std::vector<uint64_t> segment_hashes;  // hash of each segment's frames
};

// Interpolates every adjacent keyframe pair independently and concatenates,
// deduplicating shared endpoints. Segments share no state, so regenerating
// one never perturbs another.
inline ChainResult chain(const KeyframeSet& keyframes, const std::vector<GuidancePack>& packs,
                         const Denoiser& model, const ControlEncoder* control,
                         const PromptEmbedding& prompt, const NoiseSchedule& ladder,
                         const InterpolationConfig& cfg) {
    keyframes.validate();
    R2V_CHECK(keyframes.frames.size() >= 2, "chain: need at least two keyframes");
    ChainResult out;
    for (size_t s = 0; s + 1 < keyframes.frames.size(); s++) {
        int64_t a = keyframes.frame_indices[s];
        int64_t b = keyframes.frame_indices[s + 1];
        R2V_CHECK(a >= 0 && b < static_cast<int64_t>(packs.size()),
                  "chain: keyframe index outside packs");
        std::vector<const GuidancePack*> segment;
        std::vector<int64_t> indices;
        for (int64_t i = a; i <= b; i++) {
            segment.push_back(&packs[static_cast<size_t>(i)]);
            indices.push_back(i);
        }
        auto frames = interpolate(keyframes.frames[s], keyframes.frames[s + 1], segment, indices,
                                  model, control, prompt, ladder, cfg);
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& f : frames) {
            uint64_t fh = tensor_hash(f);
            h = fnv1a64(&fh, sizeof(fh), h);
        }
        out.segment_hashes.push_back(h);
        size_t start = (s == 0) ? 0 : 1;  // drop the duplicated shared endpoint
        for (size_t i = start; i < frames.size(); i++) {
            out.frames.push_back(frames[i]);
        }
    }
    return out;
}

// Forward-only autoregressive baseline: each segment is conditioned on the
// last frame of the previous segment's output instead of a clean keyframe.
inline std::vector<Tensor> chain_autoregressive(const Tensor& first_frame,
                                                const std::vector<int64_t>& keyframe_indices,
                                                const std::vector<GuidancePack>& packs,
                                                const Denoiser& model, const ControlEncoder* control,
                                                const PromptEmbedding& prompt,
                                                const NoiseSchedule& ladder,
                                                InterpolationConfig cfg) {
    R2V_CHECK(keyframe_indices.size() >= 2, "autoregressive chain: need at least two indices");
    cfg.bidirectional = false;
    std::vector<Tensor> out;
    Tensor cond = first_frame;
    for (size_t s = 0; s + 1 < keyframe_indices.size(); s++) {
        int64_t a = keyframe_indices[s];
        int64_t b = keyframe_indices[s + 1];
        std::vector<const GuidancePack*> segment;
        std::vector<int64_t> indices;
        for (int64_t i = a; i <= b; i++) {
            segment.push_back(&packs[static_cast<size_t>(i)]);
            indices.push_back(i);
        }
        auto frames = interpolate(cond, cond, segment, indices, model, control, prompt, ladder, cfg);
        cond = frames.back();
        size_t start = (s == 0) ? 0 : 1;
        for (size_t i = start; i < frames.size(); i++) {
            out.push_back(frames[i]);
        }
    }
    return out;
}

}  // namespace r2v
