#pragma once

// Deterministic DDIM / EDM machinery: forward noising, reversible update
// steps, inversion with feature tracing, and sampling with injection hooks.
//
// Step-index convention: t in {0..T-1} with t = 0 the cleanest level. For the
// noise ladder, level 0 is the noisiest (largest sigma). A pass with S update
// steps runs over the S+1 grid indices from NoiseSchedule::sample_grid.
//
// Trace pairing: the j-th sampling update mirrors the j-th inversion update
// (same state level), so a sampling update evaluating the denoiser at grid
// point t_{j+1} consumes the trace recorded under the inversion's evaluation
// key t_j. Hook gating and lookup therefore use trace keys.

#include "r2v/schedule.hpp"

#include <functional>
#include <map>
#include <utility>

namespace r2v {

// F x C x h x w latent with global frame positions. F = 1 for single images.
struct Latent {
    Tensor data;
    std::vector<int64_t> frame_indices;

    int64_t frames() const { return data.shape.empty() ? 0 : data.shape[0]; }

    void validate() const {
        R2V_CHECK(data.ndim() == 4, "latent: data must be FxCxhxw");
        R2V_CHECK(static_cast<int64_t>(frame_indices.size()) == data.shape[0],
                  "latent: frame_indices length mismatch");
        R2V_CHECK(data.all_finite(), "latent: non-finite entries");
    }

    static Latent image(Tensor chw) {
        R2V_CHECK(chw.ndim() == 3, "latent: image expects CxHxW");
        Latent l;
        auto shape = chw.shape;
        l.data = chw.reshaped({1, shape[0], shape[1], shape[2]});
        l.frame_indices = {0};
        return l;
    }
};

enum class TapKind { Conv, SelfAttention };

// Conv features or self-attention q/k captured at one (step, tap).
struct TapRecord {
    TapKind kind = TapKind::Conv;
    Tensor conv;  // (F, C, h, w) for conv taps
    Tensor q;     // (F, tokens, dim) for attention taps
    Tensor k;
};

struct FeatureTrace {
    std::map<std::pair<int, std::string>, TapRecord> entries;

    bool has(int step, const std::string& tap) const {
        return entries.count({step, tap}) > 0;
    }
    const TapRecord& get(int step, const std::string& tap) const {
        auto it = entries.find({step, tap});
        R2V_CHECK(it != entries.end(),
                  "trace: missing entry for step " + std::to_string(step) + " tap " + tap);
        return it->second;
    }
    void put(int step, const std::string& tap, TapRecord rec) {
        entries[{step, tap}] = std::move(rec);
    }
    size_t size() const { return entries.size(); }

    std::vector<int> recorded_steps() const {
        std::vector<int> steps;
        for (const auto& [key, rec] : entries) {
            if (steps.empty() || steps.back() != key.first) steps.push_back(key.first);
        }
        return steps;
    }
};

// Per-call feature overrides. A null function leaves the generated value
// untouched; otherwise the function returns the (blended) replacement for one
// frame's tap value. Counters make injection activity observable in tests.
struct TapOverride {
    std::function<Tensor(const std::string& tap, int64_t frame, const Tensor& generated)> conv;
    std::function<Tensor(const std::string& tap, int64_t frame, const Tensor& generated)> attn_q;
    std::function<Tensor(const std::string& tap, int64_t frame, const Tensor& generated)> attn_k;

    bool empty() const { return !conv && !attn_q && !attn_k; }
};

// What a denoiser evaluation needs to know beyond (z, condition): which
// schedule index it runs at, whether to record taps, and active overrides.
struct DenoiseCall {
    int step_index = 0;                       // schedule index of the evaluation
    FeatureTrace* record = nullptr;           // non-null during inversion
    int record_step = -1;                     // trace key for recording
    const TapOverride* overrides = nullptr;   // non-null during guided sampling
};

// The denoiser contract: condition, control residuals and model weights are
// captured inside the closure by the caller.
using DenoiserFn = std::function<Tensor(const Tensor& z, const DenoiseCall& call)>;

// Per-step hook factory used by ddim_sample / edm guided loops; receives the
// trace key of the mirrored inversion update.
using HookProvider = std::function<TapOverride(int trace_step)>;

// ---- forward noising ----

inline Latent add_noise(const Latent& z0, const NoiseSchedule& s, int t, const Tensor& eps) {
    z0.validate();
    R2V_CHECK(eps.same_shape(z0.data), "add_noise: eps shape mismatch");
    R2V_CHECK(t >= 0 && t < s.steps_total(), "add_noise: step out of range");
    Latent out = z0;
    if (s.kind == ScheduleKind::VariancePreserving) {
        double a = std::sqrt(s.abar(t));
        double b = std::sqrt(1.0 - s.abar(t));
        for (int64_t i = 0; i < out.data.numel(); i++) {
            out.data[i] = a * z0.data[i] + b * eps[i];
        }
    } else {
        double sg = s.sigma(t);
        for (int64_t i = 0; i < out.data.numel(); i++) {
            out.data[i] = z0.data[i] + sg * eps[i];
        }
    }
    return out;
}

// ---- DDIM (variance preserving, eta = 0) ----

// x0_hat = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t);
// z_prev = sqrt(abar_prev) x0_hat + sqrt(1-abar_prev) eps.
// Runs in either direction (t_prev above or below t). t_prev == t is the
// exact identity.
inline Latent ddim_step(const Latent& z_t, const Tensor& eps_hat, const NoiseSchedule& s, int t,
                        int t_prev) {
    R2V_CHECK(s.kind == ScheduleKind::VariancePreserving, "ddim_step: needs VP schedule");
    R2V_CHECK(t >= 0 && t < s.steps_total() && t_prev >= 0 && t_prev < s.steps_total(),
              "ddim_step: step index out of range");
    R2V_CHECK(eps_hat.same_shape(z_t.data), "ddim_step: eps shape mismatch");
    if (t_prev == t) return z_t;
    double a_t = std::sqrt(s.abar(t));
    double b_t = std::sqrt(1.0 - s.abar(t));
    double a_p = std::sqrt(s.abar(t_prev));
    double b_p = std::sqrt(1.0 - s.abar(t_prev));
    Latent out = z_t;
    for (int64_t i = 0; i < out.data.numel(); i++) {
        double x0 = (z_t.data[i] - b_t * eps_hat[i]) / a_t;
        out.data[i] = a_p * x0 + b_p * eps_hat[i];
    }
    return out;
}

// Deterministic DDIM inversion: walks the grid toward higher noise using the
// denoiser's own predictions, recording every declared tap at each update.
inline std::pair<Latent, FeatureTrace> ddim_invert(const Latent& z0, const DenoiserFn& denoiser,
                                                   const NoiseSchedule& schedule, int steps) {
    z0.validate();
    FeatureTrace trace;
    auto grid = schedule.sample_grid(steps);
    Latent z = z0;
    for (int j = 0; j + 1 < static_cast<int>(grid.size()); j++) {
        int t_lo = grid[static_cast<size_t>(j)];
        int t_hi = grid[static_cast<size_t>(j) + 1];
        DenoiseCall call;
        call.step_index = t_lo;
        call.record = &trace;
        call.record_step = t_lo;
        Tensor eps_hat = denoiser(z.data, call);
        if (!eps_hat.all_finite()) {
            throw NumericError("ddim_invert: non-finite prediction at step " + std::to_string(t_lo));
        }
        z = ddim_step(z, eps_hat, schedule, t_lo, t_hi);
    }
    return {z, trace};
}

// Deterministic DDIM descent with optional per-step injection hooks. Hooks
// that override nothing leave the trajectory bit-identical.
inline Latent ddim_sample(const Latent& z_T, const DenoiserFn& denoiser,
                          const NoiseSchedule& schedule, int steps,
                          const HookProvider& hooks = nullptr) {
    z_T.validate();
    auto grid = schedule.sample_grid(steps);
    Latent z = z_T;
    for (int j = static_cast<int>(grid.size()) - 2; j >= 0; j--) {
        int t_lo = grid[static_cast<size_t>(j)];
        int t_hi = grid[static_cast<size_t>(j) + 1];
        TapOverride ov;
        DenoiseCall call;
        call.step_index = t_hi;
        if (hooks) {
            ov = hooks(t_lo);
            if (!ov.empty()) call.overrides = &ov;
        }
        Tensor eps_hat = denoiser(z.data, call);
        if (!eps_hat.all_finite()) {
            throw NumericError("ddim_sample: non-finite prediction at step " + std::to_string(t_hi));
        }
        z = ddim_step(z, eps_hat, schedule, t_hi, t_lo);
    }
    return z;
}

// ---- EDM-style noise ladder (deterministic Euler on the PF-ODE) ----

// z moves along d z / d sigma = eps_hat with eps_hat = (z - x0_hat) / sigma.
// At sigma == 0 the drift is defined as zero.
inline Latent edm_step(const Latent& z, const Tensor& eps_hat, double sigma_from, double sigma_to) {
    R2V_CHECK(eps_hat.same_shape(z.data), "edm_step: eps shape mismatch");
    Latent out = z;
    double d = sigma_to - sigma_from;
    for (int64_t i = 0; i < out.data.numel(); i++) {
        out.data[i] = z.data[i] + d * eps_hat[i];
    }
    return out;
}

// Inversion along the ladder toward sigma_max. The model is still evaluated at
// the sigma = 0 terminal so its features enter the trace, but the state update
// there uses zero drift.
inline std::pair<Latent, FeatureTrace> edm_invert(const Latent& z0, const DenoiserFn& denoiser,
                                                  const NoiseSchedule& ladder, int steps) {
    z0.validate();
    R2V_CHECK(ladder.kind == ScheduleKind::NoiseLadder, "edm_invert: needs ladder schedule");
    FeatureTrace trace;
    auto grid = ladder.sample_grid(steps);
    Latent z = z0;
    for (int j = static_cast<int>(grid.size()) - 1; j >= 1; j--) {
        int lv_lo = grid[static_cast<size_t>(j)];      // lower sigma (current state)
        int lv_hi = grid[static_cast<size_t>(j) - 1];  // higher sigma (target)
        DenoiseCall call;
        call.step_index = lv_lo;
        call.record = &trace;
        call.record_step = lv_lo;
        Tensor eps_hat = denoiser(z.data, call);
        if (!eps_hat.all_finite()) {
            throw NumericError("edm_invert: non-finite prediction at level " + std::to_string(lv_lo));
        }
        double s_from = ladder.sigma(lv_lo);
        double s_to = ladder.sigma(lv_hi);
        if (s_from == 0.0) {
            // zero drift at the clean terminal: state unchanged
            continue;
        }
        z = edm_step(z, eps_hat, s_from, s_to);
    }
    return {z, trace};
}

// Plain (single-trajectory) ladder descent; the bidirectional interpolation
// loop builds on edm_step directly.
inline Latent edm_sample(const Latent& z_noisy, const DenoiserFn& denoiser,
                         const NoiseSchedule& ladder, int steps,
                         const HookProvider& hooks = nullptr) {
    z_noisy.validate();
    R2V_CHECK(ladder.kind == ScheduleKind::NoiseLadder, "edm_sample: needs ladder schedule");
    auto grid = ladder.sample_grid(steps);
    Latent z = z_noisy;
    for (int j = 0; j + 1 < static_cast<int>(grid.size()); j++) {
        int lv_hi = grid[static_cast<size_t>(j)];
        int lv_lo = grid[static_cast<size_t>(j) + 1];
        TapOverride ov;
        DenoiseCall call;
        call.step_index = lv_hi;
        if (hooks) {
            ov = hooks(lv_lo);  // mirrored inversion update recorded at lv_lo
            if (!ov.empty()) call.overrides = &ov;
        }
        Tensor eps_hat = denoiser(z.data, call);
        if (!eps_hat.all_finite()) {
            throw NumericError("edm_sample: non-finite prediction at level " + std::to_string(lv_hi));
        }
        z = edm_step(z, eps_hat, ladder.sigma(lv_hi), ladder.sigma(lv_lo));
    }
    return z;
}

}  // namespace r2v
