#pragma once

// 3D-guided keyframe generation: DDIM-inverted initial noise, depth-control
// residuals, masked conv / self-attention feature injection under tau
// thresholds, and extended attention across the whole keyframe set.

#include "r2v/lora.hpp"
#include "r2v/metrics.hpp"

namespace r2v {

// Eq.-2-style extended attention as a standalone, oracle-checkable operation:
// softmax(q_i k_{1..n}^T / sqrt(d)) v_{1..n}.
struct AttentionTensors {
    Tensor q;      // (T, d) queries of frame i
    Tensor k_all;  // (n*T', d) concatenated keys of all frames
    Tensor v_all;  // (n*T', d) concatenated values of all frames
};

inline Tensor extended_attention(const AttentionTensors& at) {
    R2V_CHECK(at.q.ndim() == 2 && at.k_all.ndim() == 2 && at.v_all.ndim() == 2,
              "extended_attention: tensors must be 2D");
    int64_t d = at.q.shape[1];
    R2V_CHECK(d > 0, "extended_attention: key dimension must be positive");
    R2V_CHECK(at.k_all.shape[1] == d, "extended_attention: key dim mismatch");
    R2V_CHECK(at.k_all.shape[0] == at.v_all.shape[0], "extended_attention: k/v length mismatch");
    using namespace ad;
    Value q = constant(at.q);
    Value scores = scale(matmul(q, permute(constant(at.k_all), {1, 0})),
                         1.0 / std::sqrt(static_cast<double>(d)));
    Value out = matmul(softmax_lastdim(scores), constant(at.v_all));
    return out->val;
}

// Observable injection activity; one increment per override call that
// actually replaces a tap value.
struct InjectionCounters {
    int64_t conv_firings = 0;
    int64_t sa_firings = 0;
};

struct InjectionConfig {
    double tau_conv = 0.4;
    double tau_sa = 0.0;
    std::vector<std::string> conv_taps;
    std::vector<std::string> sa_taps;
    // per-frame image-resolution visibility (coverage); injection is
    // suppressed where the scene has no geometry behind the pixel
    std::vector<Mask> visibility;
    int total_steps = 0;           // schedule length T (or ladder level count)
    ScheduleKind schedule_kind = ScheduleKind::VariancePreserving;
    std::shared_ptr<InjectionCounters> counters;

    void validate(const DenoiserSpec& spec) const {
        R2V_CHECK(tau_conv >= 0.0 && tau_conv <= 1.0, "injection: tau_conv outside [0,1]");
        R2V_CHECK(tau_sa >= 0.0 && tau_sa <= 1.0, "injection: tau_sa outside [0,1]");
        for (const auto& id : conv_taps) {
            R2V_CHECK(spec.has_tap(id), "injection: unknown conv tap " + id);
        }
        for (const auto& id : sa_taps) {
            R2V_CHECK(spec.has_tap(id), "injection: unknown sa tap " + id);
        }
        R2V_CHECK(total_steps > 0, "injection: total_steps unset");
    }

    // Normalized trajectory position of a trace step; injection is active on
    // the high-noise side, pos >= tau.
    double normalized(int trace_step) const {
        if (schedule_kind == ScheduleKind::VariancePreserving) {
            return static_cast<double>(trace_step) / total_steps;
        }
        // ladder: level 0 is the noisiest
        return 1.0 - static_cast<double>(trace_step) / (total_steps - 1);
    }
};

namespace inject_detail {

// visible -> traced value, invisible -> generated value, elementwise select
inline Tensor blend_conv(const Tensor& traced, const Tensor& generated, const Mask& vis) {
    R2V_CHECK(traced.same_shape(generated), "inject: conv shape mismatch");
    int64_t c = generated.shape[0], h = generated.shape[1], w = generated.shape[2];
    R2V_CHECK(vis.h == h && vis.w == w, "inject: visibility res mismatch");
    Tensor out = generated;
    for (int64_t ch = 0; ch < c; ch++) {
        for (int64_t i = 0; i < h * w; i++) {
            if (vis.v[static_cast<size_t>(i)]) out[ch * h * w + i] = traced[ch * h * w + i];
        }
    }
    return out;
}

// token rows follow raster order of the tap's spatial grid
inline Tensor blend_tokens(const Tensor& traced, const Tensor& generated, const Mask& vis) {
    R2V_CHECK(traced.same_shape(generated), "inject: token shape mismatch");
    int64_t tokens = generated.shape[0], d = generated.shape[1];
    R2V_CHECK(vis.h * vis.w == tokens, "inject: token count mismatch");
    Tensor out = generated;
    for (int64_t t = 0; t < tokens; t++) {
        if (vis.v[static_cast<size_t>(t)]) {
            for (int64_t j = 0; j < d; j++) out.at2(t, j) = traced.at2(t, j);
        }
    }
    return out;
}

}  // namespace inject_detail

// Where one batch frame's traced features live: which trace, and which frame
// inside the record's tensors. Keyframe generation records one trace per
// keyframe (record_frame 0); interpolation records one trace for the whole
// segment (record_frame = position in the segment).
struct TraceSource {
    const FeatureTrace* trace = nullptr;
    int64_t record_frame = 0;
};

namespace inject_detail {

inline Tensor record_slice(const Tensor& rec, int64_t record_frame, const Tensor& generated) {
    int64_t frames = rec.shape[0];
    int64_t per = rec.numel() / frames;
    R2V_CHECK(record_frame >= 0 && record_frame < frames, "inject: record frame out of range");
    R2V_CHECK(per == generated.numel(), "inject: traced feature shape mismatch");
    Tensor out(generated.shape);
    std::memcpy(out.ptr(), rec.ptr() + record_frame * per,
                static_cast<size_t>(per) * sizeof(double));
    return out;
}

}  // namespace inject_detail

// Hook set for one sampling update. `frame` in the override call indexes the
// batch being denoised; sources[frame] locates its traced features. q and k
// are replaced; v stays generated so appearance keeps coming from the
// customized model. The returned closures own copies of everything they touch
// except the traces themselves, which must outlive the sampling pass.
inline TapOverride inject_features(int trace_step, std::vector<TraceSource> sources,
                                   const DenoiserSpec& spec, const InjectionConfig& cfg) {
    cfg.validate(spec);
    R2V_CHECK(cfg.visibility.size() == sources.size(), "inject: visibility count mismatch");
    double pos = cfg.normalized(trace_step);
    bool conv_on = !cfg.conv_taps.empty() && pos >= cfg.tau_conv;
    bool sa_on = !cfg.sa_taps.empty() && pos >= cfg.tau_sa;

    TapOverride ov;
    if (!conv_on && !sa_on) return ov;

    auto vis = std::make_shared<std::vector<Mask>>(cfg.visibility);
    DenoiserSpec spec_copy = spec;
    auto tap_mask = [spec_copy, vis](const std::string& tap, int64_t frame) {
        auto [th, tw] = spec_copy.tap_resolution(tap);
        return downsample_mask((*vis)[static_cast<size_t>(frame)], th, tw);
    };

    if (conv_on) {
        auto conv_set = cfg.conv_taps;
        auto counters = cfg.counters;
        ov.conv = [trace_step, sources, conv_set, counters, tap_mask](const std::string& tap,
                                                                      int64_t frame,
                                                                      const Tensor& generated) {
            if (std::find(conv_set.begin(), conv_set.end(), tap) == conv_set.end()) {
                return generated;
            }
            const TraceSource& src = sources[static_cast<size_t>(frame)];
            const TapRecord& rec = src.trace->get(trace_step, tap);
            Tensor traced = inject_detail::record_slice(rec.conv, src.record_frame, generated);
            if (counters) counters->conv_firings++;
            return inject_detail::blend_conv(traced, generated, tap_mask(tap, frame));
        };
    }
    if (sa_on) {
        auto sa_set = cfg.sa_taps;
        auto counters = cfg.counters;
        auto make = [trace_step, sources, sa_set, counters, tap_mask](bool is_q) {
            return [trace_step, sources, sa_set, counters, tap_mask, is_q](
                       const std::string& tap, int64_t frame, const Tensor& generated) {
                if (std::find(sa_set.begin(), sa_set.end(), tap) == sa_set.end()) {
                    return generated;
                }
                const TraceSource& src = sources[static_cast<size_t>(frame)];
                const TapRecord& rec = src.trace->get(trace_step, tap);
                Tensor traced =
                    inject_detail::record_slice(is_q ? rec.q : rec.k, src.record_frame, generated);
                // q and k of one site replace together; count the pair once
                if (counters && is_q) counters->sa_firings++;
                return inject_detail::blend_tokens(traced, generated, tap_mask(tap, frame));
            };
        };
        ov.attn_q = make(true);
        ov.attn_k = make(false);
    }
    return ov;
}

// Ordered generated keyframes with their global frame positions.
struct KeyframeSet {
    std::vector<Tensor> frames;          // (H,W,3) images in [0,1]
    std::vector<int64_t> frame_indices;  // strictly increasing

    void validate() const {
        R2V_CHECK(frames.size() == frame_indices.size(), "keyframes: index count mismatch");
        for (size_t i = 1; i < frame_indices.size(); i++) {
            R2V_CHECK(frame_indices[i] > frame_indices[i - 1],
                      "keyframes: indices must strictly increase");
        }
    }
};

struct KeyframeGenConfig {
    int steps = 50;
    InjectionConfig injection;
    double control_strength = 1.0;  // 0 disables depth control
    bool use_inverted_init = true;  // false: seeded random initial noise
    bool extended_attention = true;
    uint64_t seed = 0;
    int encode_levels = 1;
};

// Two-phase keyframe generation. Phase 1 encodes each pack's coarse RGB and
// DDIM-inverts it independently (same prompt and depth conditioning as
// sampling), recording features. Phase 2 samples all keyframes jointly with
// extended attention, depth control, and masked feature injection.
inline KeyframeSet generate_keyframes(const std::vector<const GuidancePack*>& packs,
                                      const std::vector<int64_t>& indices, const Denoiser& model,
                                      const ControlEncoder* control, const PromptEmbedding& prompt,
                                      const NoiseSchedule& schedule, KeyframeGenConfig cfg) {
    R2V_CHECK(!packs.empty(), "keyframes: need at least one guidance pack");
    R2V_CHECK(packs.size() == indices.size(), "keyframes: index count mismatch");
    R2V_CHECK(!model.spec.video, "keyframes: image model expected");
    schedule.validate();
    int64_t n = static_cast<int64_t>(packs.size());

    bool inject_active = !cfg.injection.conv_taps.empty() || !cfg.injection.sa_taps.empty();
    if (inject_active) {
        cfg.injection.total_steps = schedule.steps_total();
        cfg.injection.schedule_kind = schedule.kind;
        cfg.injection.visibility.clear();
        for (const auto* p : packs) cfg.injection.visibility.push_back(p->coverage_mask);
        cfg.injection.validate(model.spec);
    }

    // per-keyframe encodes and control inputs
    std::vector<Tensor> latents;
    std::vector<Tensor> depth_inputs;
    for (const auto* p : packs) {
        latents.push_back(to_model_space(encode_image(p->rgb, cfg.encode_levels)));
        depth_inputs.push_back(control_depth_input(p->depth));
    }

    bool use_control = control != nullptr && cfg.control_strength != 0.0;

    // phase 1: per-keyframe inversion with feature tracing
    std::vector<FeatureTrace> traces(static_cast<size_t>(n));
    Tensor init({n, latents[0].shape[0], latents[0].shape[1], latents[0].shape[2]});
    if (cfg.use_inverted_init) {
        for (int64_t i = 0; i < n; i++) {
            ControlResidualSet ctrl;
            if (use_control) {
                ctrl = control->encode(depth_inputs[static_cast<size_t>(i)], cfg.control_strength);
            }
            DenoiserFn fn = [&](const Tensor& z, const DenoiseCall& call) {
                Denoiser::Inputs in;
                in.prompt = &prompt;
                if (use_control) in.control = &ctrl;
                return model.denoise(z, noise_position(schedule, call.step_index), call, in);
            };
            auto [z_inv, trace] =
                ddim_invert(Latent::image(latents[static_cast<size_t>(i)]), fn, schedule, cfg.steps);
            traces[static_cast<size_t>(i)] = std::move(trace);
            std::memcpy(init.ptr() + i * z_inv.data.numel(), z_inv.data.ptr(),
                        static_cast<size_t>(z_inv.data.numel()) * sizeof(double));
        }
    } else {
        Rng rng(derive_seed(cfg.seed, "keyframe-init"));
        init = Tensor::randn(init.shape, rng);
        double s = std::sqrt(1.0 - schedule.abar(schedule.steps_total() - 1));
        // match the marginal scale of a fully noised latent
        init = init * s;
        inject_active = false;
    }

    // phase 2: joint sampling with extended attention
    ControlResidualSet batch_ctrl;
    if (use_control) {
        Tensor depths({n, 1, depth_inputs[0].shape[2], depth_inputs[0].shape[3]});
        for (int64_t i = 0; i < n; i++) {
            std::memcpy(depths.ptr() + i * depth_inputs[0].numel(),
                        depth_inputs[static_cast<size_t>(i)].ptr(),
                        static_cast<size_t>(depth_inputs[0].numel()) * sizeof(double));
        }
        batch_ctrl = control->encode(depths, cfg.control_strength);
    }

    std::vector<TraceSource> sources;
    for (const auto& t : traces) sources.push_back({&t, 0});

    DenoiserFn fn = [&](const Tensor& z, const DenoiseCall& call) {
        Denoiser::Inputs in;
        in.prompt = &prompt;
        if (use_control) in.control = &batch_ctrl;
        in.extended_attention = cfg.extended_attention;
        return model.denoise(z, noise_position(schedule, call.step_index), call, in);
    };
    HookProvider hooks = nullptr;
    if (inject_active) {
        hooks = [&](int trace_step) {
            return inject_features(trace_step, sources, model.spec, cfg.injection);
        };
    }

    Latent z_T;
    z_T.data = std::move(init);
    z_T.frame_indices = indices;
    Latent z0 = ddim_sample(z_T, fn, schedule, cfg.steps, hooks);

    KeyframeSet out;
    out.frame_indices = indices;
    for (int64_t i = 0; i < n; i++) {
        Tensor lat({z0.data.shape[1], z0.data.shape[2], z0.data.shape[3]});
        std::memcpy(lat.ptr(), z0.data.ptr() + i * lat.numel(),
                    static_cast<size_t>(lat.numel()) * sizeof(double));
        out.frames.push_back(decode_image(from_model_space(lat), cfg.encode_levels));
    }
    out.validate();
    return out;
}

}  // namespace r2v
