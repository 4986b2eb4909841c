#pragma once

// Small image/video denoiser networks trainable from scratch. The UNet keeps
// the structural features the guidance mechanisms rely on: declared conv and
// self-attention tap points, a zero-initialized depth-control branch, LoRA
// attachment sites on attention/feedforward projections, cross-attention over
// a deterministic prompt embedding, and (video variant) temporal attention
// plus conditioning-frame channel concatenation.
//
// Latent "VAE" is an exact space-to-channel rearrangement, so encode/decode
// round-trips are bitwise and the diffusion mechanisms stay testable.

#include "r2v/autodiff.hpp"
#include "r2v/diffusion.hpp"

#include <memory>
#include <optional>

namespace r2v {

// ---- latent encode/decode ----

// (H,W,3) image -> (3*4^levels, H/2^l, W/2^l) latent; pure index permutation.
inline Tensor encode_image(const Tensor& img, int levels = 1) {
    R2V_CHECK(img.ndim() == 3 && img.shape[2] == 3, "encode: image must be HxWx3");
    int64_t h = img.shape[0], w = img.shape[1], c = 3;
    // start in channel-first layout
    Tensor cur({c, h, w});
    for (int64_t y = 0; y < h; y++) {
        for (int64_t x = 0; x < w; x++) {
            for (int64_t ch = 0; ch < c; ch++) {
                cur[(ch * h + y) * w + x] = img.at3(y, x, ch);
            }
        }
    }
    for (int l = 0; l < levels; l++) {
        R2V_CHECK(h % 2 == 0 && w % 2 == 0, "encode: dims must be divisible by 2 per level");
        Tensor next({c * 4, h / 2, w / 2});
        for (int64_t ch = 0; ch < c; ch++) {
            for (int64_t dy = 0; dy < 2; dy++) {
                for (int64_t dx = 0; dx < 2; dx++) {
                    int64_t oc = (dy * 2 + dx) * c + ch;
                    for (int64_t y = 0; y < h / 2; y++) {
                        for (int64_t x = 0; x < w / 2; x++) {
                            next[(oc * (h / 2) + y) * (w / 2) + x] =
                                cur[(ch * h + (2 * y + dy)) * w + (2 * x + dx)];
                        }
                    }
                }
            }
        }
        cur = std::move(next);
        c *= 4;
        h /= 2;
        w /= 2;
    }
    return cur;
}

inline Tensor decode_image(const Tensor& latent, int levels = 1) {
    R2V_CHECK(latent.ndim() == 3, "decode: latent must be CxHxW");
    Tensor cur = latent;
    int64_t c = cur.shape[0], h = cur.shape[1], w = cur.shape[2];
    for (int l = 0; l < levels; l++) {
        R2V_CHECK(c % 4 == 0, "decode: channels must be divisible by 4 per level");
        Tensor next({c / 4, h * 2, w * 2});
        int64_t nc = c / 4;
        for (int64_t ch = 0; ch < nc; ch++) {
            for (int64_t dy = 0; dy < 2; dy++) {
                for (int64_t dx = 0; dx < 2; dx++) {
                    int64_t ic = (dy * 2 + dx) * nc + ch;
                    for (int64_t y = 0; y < h; y++) {
                        for (int64_t x = 0; x < w; x++) {
                            next[(ch * (h * 2) + (2 * y + dy)) * (w * 2) + (2 * x + dx)] =
                                cur[(ic * h + y) * w + x];
                        }
                    }
                }
            }
        }
        cur = std::move(next);
        c /= 4;
        h *= 2;
        w *= 2;
    }
    // back to HxWx3
    R2V_CHECK(c == 3, "decode: expected 3 output channels");
    Tensor img({h, w, 3});
    for (int64_t y = 0; y < h; y++) {
        for (int64_t x = 0; x < w; x++) {
            for (int64_t ch = 0; ch < 3; ch++) {
                img.at3(y, x, ch) = cur[(ch * h + y) * w + x];
            }
        }
    }
    return img;
}

// [0,1] image values <-> centered model space
inline Tensor to_model_space(const Tensor& t) {
    Tensor out = t;
    for (auto& v : out.data) v = 2.0 * v - 1.0;
    return out;
}

inline Tensor from_model_space(const Tensor& t) {
    Tensor out = t;
    for (auto& v : out.data) v = std::min(1.0, std::max(0.0, (v + 1.0) / 2.0));
    return out;
}

// ---- prompt embedding ----

// Deterministic hash-based token embedder over template strings like
// "a box in checkerboard". Equal strings always produce equal embeddings.
struct PromptEmbedding {
    std::string text;
    Tensor tokens;  // (n_tokens, context_dim)
};

inline PromptEmbedding embed_prompt(const std::string& text, int64_t context_dim) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        if (ch == ' ' || ch == '\t') {
            if (!cur.empty()) words.push_back(cur), cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) words.push_back(cur);

    PromptEmbedding e;
    e.text = text;
    int64_t n = std::max<int64_t>(1, static_cast<int64_t>(words.size()));
    e.tokens = Tensor::zeros({n, context_dim});
    for (int64_t i = 0; i < static_cast<int64_t>(words.size()); i++) {
        Rng rng(fnv1a64(words[static_cast<size_t>(i)]));
        double s = 1.0 / std::sqrt(static_cast<double>(context_dim));
        for (int64_t j = 0; j < context_dim; j++) {
            e.tokens.at2(i, j) = rng.normal() * s;
        }
    }
    return e;
}

// ---- denoiser spec ----

struct TapInfo {
    std::string id;
    TapKind kind;
};

struct DenoiserSpec {
    int64_t latent_channels = 12;
    int64_t latent_h = 16;
    int64_t latent_w = 16;
    std::vector<int64_t> widths = {24, 32};  // level 0 (full res), level 1 (half res)
    std::vector<bool> attn_at_level = {true, true};
    int64_t context_dim = 24;
    int64_t time_embed_dim = 48;
    int groups = 4;
    bool video = false;
    int64_t max_frames = 16;

    void validate() const {
        R2V_CHECK(widths.size() == 2 && attn_at_level.size() == 2,
                  "spec: expects exactly two resolution levels");
        R2V_CHECK(latent_h % 4 == 0 && latent_w % 4 == 0, "spec: latent dims must divide by 4");
        for (int64_t w : widths) {
            R2V_CHECK(w % groups == 0, "spec: widths must be divisible by groups");
        }
        R2V_CHECK(latent_channels >= 1 && context_dim >= 1 && time_embed_dim >= 2, "spec: dims");
        bool any_sa = attn_at_level[0] || attn_at_level[1];
        R2V_CHECK(any_sa, "spec: at least one self-attention site required");
        R2V_CHECK(max_frames >= 1, "spec: max_frames");
    }

    // conv taps on every up-block residual output; sa taps at every
    // self-attention site (down / mid / up).
    std::vector<TapInfo> declared_taps() const {
        std::vector<TapInfo> taps;
        if (attn_at_level[0]) taps.push_back({"down0.attn", TapKind::SelfAttention});
        if (attn_at_level[1]) taps.push_back({"down1.attn", TapKind::SelfAttention});
        taps.push_back({"mid.attn", TapKind::SelfAttention});
        taps.push_back({"up1.res", TapKind::Conv});
        if (attn_at_level[1]) taps.push_back({"up1.attn", TapKind::SelfAttention});
        taps.push_back({"up0.res", TapKind::Conv});
        if (attn_at_level[0]) taps.push_back({"up0.attn", TapKind::SelfAttention});
        return taps;
    }

    std::vector<std::string> up_conv_tap_ids() const { return {"up1.res", "up0.res"}; }

    std::vector<std::string> up_sa_tap_ids() const {
        std::vector<std::string> ids;
        if (attn_at_level[1]) ids.push_back("up1.attn");
        if (attn_at_level[0]) ids.push_back("up0.attn");
        return ids;
    }

    bool has_tap(const std::string& id) const {
        for (const auto& t : declared_taps()) {
            if (t.id == id) return true;
        }
        return false;
    }

    // spatial tap resolution: level 0 runs at latent res, level 1 and mid at
    // half / quarter
    std::pair<int64_t, int64_t> tap_resolution(const std::string& id) const {
        if (id.rfind("down0", 0) == 0 || id.rfind("up0", 0) == 0) return {latent_h, latent_w};
        if (id.rfind("down1", 0) == 0 || id.rfind("up1", 0) == 0) return {latent_h / 2, latent_w / 2};
        return {latent_h / 4, latent_w / 4};
    }
};

// Map a schedule index to the scalar the timestep embedding consumes.
inline double noise_position(const NoiseSchedule& s, int index) {
    if (s.kind == ScheduleKind::VariancePreserving) return static_cast<double>(index);
    double sg = s.sigma(index);
    return 1000.0 * sg / (1.0 + sg);
}

inline Tensor sinusoidal_embedding(double pos, int64_t dim) {
    Tensor e({1, dim});
    int64_t half = dim / 2;
    for (int64_t i = 0; i < half; i++) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        e.at2(0, 2 * i) = std::sin(pos * freq);
        e.at2(0, 2 * i + 1) = std::cos(pos * freq);
    }
    return e;
}

// ---- LoRA adapter ----

struct LoraEntry {
    ad::Value A;  // (rank, d_in)
    ad::Value B;  // (d_out, rank), zero-initialized
};

struct LoraAdapter {
    int64_t rank = 4;
    double scale = 0.0;  // defaults to 1/rank at attach time
    uint64_t seed = 0;
    std::map<std::string, LoraEntry> entries;

    std::vector<ad::Value> trainable() const {
        std::vector<ad::Value> out;
        for (const auto& [name, e] : entries) {
            out.push_back(e.A);
            out.push_back(e.B);
        }
        return out;
    }

    void set_trainable(bool on) const {
        for (const auto& [name, e] : entries) {
            e.A->needs_grad = on;
            e.B->needs_grad = on;
        }
    }
};

// ---- control branch ----

// Residuals added at the two encoder levels and the mid block. With freshly
// initialized (zero) output projections every residual is exactly zero.
struct ControlResidualSet {
    std::vector<ad::Value> levels;  // [level0 (F,w0,h,w), level1 (F,w1,h/2,w/2), mid (F,w1,h/4,w/4)]
    double strength = 1.0;
};

// ---- the denoiser ----

class Denoiser {
public:
    DenoiserSpec spec;

    Denoiser(DenoiserSpec s, uint64_t seed) : spec(std::move(s)) {
        spec.validate();
        Rng rng(seed);
        build(rng);
    }

    // named parameters in registration order
    const std::vector<std::pair<std::string, ad::Value>>& parameters() const { return params_; }

    ad::Value find_param(const std::string& name) const {
        for (const auto& [n, v] : params_) {
            if (n == name) return v;
        }
        throw ContractError("denoiser: no parameter named " + name);
    }

    void set_trainable(bool on) const {
        for (const auto& [n, v] : params_) v->needs_grad = on;
    }

    uint64_t weights_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [n, v] : params_) {
            h = fnv1a64(n, h);
            h = fnv1a64(v->val.ptr(), static_cast<size_t>(v->val.numel()) * sizeof(double), h);
        }
        return h;
    }

    // LoRA attachment points: every attention q/k/v/out and feedforward
    // projection, with their (d_out, d_in) shapes.
    std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>> lora_targets() const {
        return lora_targets_;
    }

    void attach_lora(std::shared_ptr<LoraAdapter> adapter) {
        for (const auto& [name, e] : adapter->entries) {
            bool known = false;
            for (const auto& [tname, dims] : lora_targets_) {
                if (tname == name) {
                    R2V_CONFIG_CHECK(e.A->val.shape[1] == dims.second &&
                                         e.B->val.shape[0] == dims.first,
                                     "lora: entry shape mismatch for " + name);
                    known = true;
                    break;
                }
            }
            if (!known) throw ConfigError("lora: unknown target layer '" + name + "'");
        }
        lora_ = std::move(adapter);
    }

    void detach_lora() { lora_.reset(); }
    std::shared_ptr<LoraAdapter> attached_lora() const { return lora_; }

    struct Inputs {
        const PromptEmbedding* prompt = nullptr;
        const ControlResidualSet* control = nullptr;
        const Tensor* image_cond = nullptr;  // (C,h,w) clean conditioning latent (video)
        bool extended_attention = false;
    };

    // Inference entry: returns the predicted noise, same shape as z.
    Tensor denoise(const Tensor& z, double noise_pos, const DenoiseCall& call,
                   const Inputs& in) const {
        ad::Value out = forward(ad::constant(z), noise_pos, call, in);
        return out->val;
    }

    // Training/graph entry.
    ad::Value forward(ad::Value z, double noise_pos, const DenoiseCall& call,
                      const Inputs& in) const {
        R2V_CHECK(in.prompt != nullptr, "denoise: prompt required");
        R2V_CHECK(z->val.ndim() == 4, "denoise: z must be FxCxhxw");
        int64_t F = z->val.shape[0];
        R2V_CHECK(z->val.shape[1] == spec.latent_channels && z->val.shape[2] == spec.latent_h &&
                      z->val.shape[3] == spec.latent_w,
                  "denoise: latent shape mismatch");
        R2V_CHECK(F >= 1 && F <= spec.max_frames, "denoise: frame count out of range");
        if (spec.video) {
            R2V_CHECK(in.image_cond != nullptr, "denoise: video variant requires image_cond");
            R2V_CHECK(in.image_cond->shape ==
                          std::vector<int64_t>({spec.latent_channels, spec.latent_h, spec.latent_w}),
                      "denoise: image_cond shape mismatch");
        }
        if (in.control != nullptr) {
            R2V_CHECK(in.control->levels.size() == 3, "denoise: control set needs 3 levels");
        }

        using namespace ad;

        // conditioning-frame concat (video): same clean latent on every frame
        Value x = z;
        if (spec.video) {
            Tensor rep({F, spec.latent_channels, spec.latent_h, spec.latent_w});
            int64_t per = spec.latent_channels * spec.latent_h * spec.latent_w;
            for (int64_t f = 0; f < F; f++) {
                std::memcpy(rep.ptr() + f * per, in.image_cond->ptr(),
                            static_cast<size_t>(per) * sizeof(double));
            }
            x = concat({x, constant(std::move(rep))}, 1);
        }

        // timestep embedding, replicated per frame
        Tensor sin1 = sinusoidal_embedding(noise_pos, spec.time_embed_dim);
        Tensor sinF({F, spec.time_embed_dim});
        for (int64_t f = 0; f < F; f++) {
            std::memcpy(sinF.ptr() + f * spec.time_embed_dim, sin1.ptr(),
                        static_cast<size_t>(spec.time_embed_dim) * sizeof(double));
        }
        Value temb = linear(silu(linear(constant(std::move(sinF)), p("temb.fc1.w"), p("temb.fc1.b"))),
                            p("temb.fc2.w"), p("temb.fc2.b"));

        Value ctx = constant(in.prompt->tokens);

        auto ctrl = [&](int level) -> Value {
            if (in.control == nullptr) return nullptr;
            Value r = in.control->levels[static_cast<size_t>(level)];
            if (in.control->strength != 1.0) r = scale(r, in.control->strength);
            return r;
        };

        // ---- encoder ----
        Value h0 = conv2d(x, p("conv_in.w"), p("conv_in.b"));
        Value d0 = res_block("down0.res", h0, temb);
        if (spec.attn_at_level[0]) d0 = attn_block("down0.attn", d0, ctx, call, in.extended_attention);
        if (spec.video) d0 = temporal_block("down0.temporal", d0);
        if (Value r0 = ctrl(0)) d0 = add(d0, r0);

        Value h1 = conv2d(d0, p("down0.down.w"), p("down0.down.b"), 2, 1);
        Value d1 = res_block("down1.res", h1, temb);
        if (spec.attn_at_level[1]) d1 = attn_block("down1.attn", d1, ctx, call, in.extended_attention);
        if (spec.video) d1 = temporal_block("down1.temporal", d1);
        if (Value r1 = ctrl(1)) d1 = add(d1, r1);

        Value hm = conv2d(d1, p("down1.down.w"), p("down1.down.b"), 2, 1);
        Value m = res_block("mid.res1", hm, temb);
        m = attn_block("mid.attn", m, ctx, call, in.extended_attention);
        if (spec.video) m = temporal_block("mid.temporal", m);
        m = res_block("mid.res2", m, temb);
        if (Value r2 = ctrl(2)) m = add(m, r2);

        // ---- decoder ----
        Value u1 = concat({upsample_nearest2x(m), d1}, 1);
        u1 = res_block("up1.res", u1, temb);
        u1 = conv_tap("up1.res", u1, call);
        if (spec.attn_at_level[1]) u1 = attn_block("up1.attn", u1, ctx, call, in.extended_attention);
        if (spec.video) u1 = temporal_block("up1.temporal", u1);

        Value u0 = concat({upsample_nearest2x(u1), d0}, 1);
        u0 = res_block("up0.res", u0, temb);
        u0 = conv_tap("up0.res", u0, call);
        if (spec.attn_at_level[0]) u0 = attn_block("up0.attn", u0, ctx, call, in.extended_attention);
        if (spec.video) u0 = temporal_block("up0.temporal", u0);

        Value out = group_norm(u0, p("out.gn.g"), p("out.gn.b"), spec.groups);
        out = conv2d(silu(out), p("out.conv.w"), p("out.conv.b"));
        return out;
    }

private:
    std::vector<std::pair<std::string, ad::Value>> params_;
    std::map<std::string, ad::Value> by_name_;
    std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>> lora_targets_;
    std::shared_ptr<LoraAdapter> lora_;

    ad::Value p(const std::string& name) const {
        auto it = by_name_.find(name);
        R2V_CHECK(it != by_name_.end(), "denoiser: missing parameter " + name);
        return it->second;
    }

    ad::Value add_param(const std::string& name, Tensor t) {
        auto v = ad::param(std::move(t));
        v->needs_grad = false;  // enabled explicitly by training code
        params_.emplace_back(name, v);
        by_name_[name] = v;
        return v;
    }

    static Tensor conv_init(int64_t co, int64_t ci, int64_t k, Rng& rng) {
        double std = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
        return Tensor::randn({co, ci, k, k}, rng, std);
    }

    static Tensor linear_init(int64_t out, int64_t in, Rng& rng) {
        double std = 1.0 / std::sqrt(static_cast<double>(in));
        return Tensor::randn({out, in}, rng, std);
    }

    void add_linear(const std::string& name, int64_t out, int64_t in, Rng& rng,
                    bool zero_init = false, bool lora_site = false) {
        add_param(name + ".w", zero_init ? Tensor::zeros({out, in}) : linear_init(out, in, rng));
        add_param(name + ".b", Tensor::zeros({out}));
        if (lora_site) lora_targets_.push_back({name, {out, in}});
    }

    void add_res_block(const std::string& name, int64_t cin, int64_t cout, Rng& rng) {
        add_param(name + ".gn1.g", Tensor::ones({cin}));
        add_param(name + ".gn1.b", Tensor::zeros({cin}));
        add_param(name + ".conv1.w", conv_init(cout, cin, 3, rng));
        add_param(name + ".conv1.b", Tensor::zeros({cout}));
        add_param(name + ".temb.w", linear_init(cout, spec.time_embed_dim, rng));
        add_param(name + ".temb.b", Tensor::zeros({cout}));
        add_param(name + ".gn2.g", Tensor::ones({cout}));
        add_param(name + ".gn2.b", Tensor::zeros({cout}));
        add_param(name + ".conv2.w", conv_init(cout, cout, 3, rng));
        add_param(name + ".conv2.b", Tensor::zeros({cout}));
        if (cin != cout) {
            add_param(name + ".skip.w", conv_init(cout, cin, 1, rng));
            add_param(name + ".skip.b", Tensor::zeros({cout}));
        }
    }

    void add_attn_block(const std::string& name, int64_t c, Rng& rng) {
        add_param(name + ".ln1.g", Tensor::ones({c}));
        add_param(name + ".ln1.b", Tensor::zeros({c}));
        add_linear(name + ".sa.q", c, c, rng, false, true);
        add_linear(name + ".sa.k", c, c, rng, false, true);
        add_linear(name + ".sa.v", c, c, rng, false, true);
        add_linear(name + ".sa.out", c, c, rng, false, true);
        add_param(name + ".ln2.g", Tensor::ones({c}));
        add_param(name + ".ln2.b", Tensor::zeros({c}));
        add_linear(name + ".ca.q", c, c, rng, false, true);
        add_linear(name + ".ca.k", c, spec.context_dim, rng, false, true);
        add_linear(name + ".ca.v", c, spec.context_dim, rng, false, true);
        add_linear(name + ".ca.out", c, c, rng, false, true);
        add_param(name + ".ln3.g", Tensor::ones({c}));
        add_param(name + ".ln3.b", Tensor::zeros({c}));
        add_linear(name + ".ff.in", 2 * c, c, rng, false, true);
        add_linear(name + ".ff.out", c, 2 * c, rng, false, true);
    }

    void add_temporal_block(const std::string& name, int64_t c, Rng& rng) {
        add_param(name + ".ln.g", Tensor::ones({c}));
        add_param(name + ".ln.b", Tensor::zeros({c}));
        add_linear(name + ".q", c, c, rng);
        add_linear(name + ".k", c, c, rng);
        add_linear(name + ".v", c, c, rng);
        // zero-init output projection: the block is transparent at init
        add_linear(name + ".out", c, c, rng, true);
    }

    void build(Rng& rng) {
        int64_t w0 = spec.widths[0], w1 = spec.widths[1];
        int64_t cin = spec.latent_channels * (spec.video ? 2 : 1);
        add_param("temb.fc1.w", linear_init(spec.time_embed_dim, spec.time_embed_dim, rng));
        add_param("temb.fc1.b", Tensor::zeros({spec.time_embed_dim}));
        add_param("temb.fc2.w", linear_init(spec.time_embed_dim, spec.time_embed_dim, rng));
        add_param("temb.fc2.b", Tensor::zeros({spec.time_embed_dim}));
        add_param("conv_in.w", conv_init(w0, cin, 3, rng));
        add_param("conv_in.b", Tensor::zeros({w0}));

        add_res_block("down0.res", w0, w0, rng);
        if (spec.attn_at_level[0]) add_attn_block("down0.attn", w0, rng);
        if (spec.video) add_temporal_block("down0.temporal", w0, rng);
        add_param("down0.down.w", conv_init(w1, w0, 3, rng));
        add_param("down0.down.b", Tensor::zeros({w1}));

        add_res_block("down1.res", w1, w1, rng);
        if (spec.attn_at_level[1]) add_attn_block("down1.attn", w1, rng);
        if (spec.video) add_temporal_block("down1.temporal", w1, rng);
        add_param("down1.down.w", conv_init(w1, w1, 3, rng));
        add_param("down1.down.b", Tensor::zeros({w1}));

        add_res_block("mid.res1", w1, w1, rng);
        add_attn_block("mid.attn", w1, rng);
        if (spec.video) add_temporal_block("mid.temporal", w1, rng);
        add_res_block("mid.res2", w1, w1, rng);

        add_res_block("up1.res", w1 + w1, w1, rng);
        if (spec.attn_at_level[1]) add_attn_block("up1.attn", w1, rng);
        if (spec.video) add_temporal_block("up1.temporal", w1, rng);

        add_res_block("up0.res", w1 + w0, w0, rng);
        if (spec.attn_at_level[0]) add_attn_block("up0.attn", w0, rng);
        if (spec.video) add_temporal_block("up0.temporal", w0, rng);

        add_param("out.gn.g", Tensor::ones({w0}));
        add_param("out.gn.b", Tensor::zeros({w0}));
        add_param("out.conv.w", conv_init(spec.latent_channels, w0, 3, rng));
        add_param("out.conv.b", Tensor::zeros({spec.latent_channels}));
    }

    // Dense layer with optional LoRA delta: y = W0 x + b + s * B (A x).
    // The delta is skipped when B is still exactly zero and no gradient is
    // requested, which keeps a fresh adapter bitwise transparent.
    ad::Value lora_linear(const std::string& name, ad::Value x) const {
        ad::Value y = ad::linear(x, p(name + ".w"), p(name + ".b"));
        if (!lora_) return y;
        auto it = lora_->entries.find(name);
        if (it == lora_->entries.end()) return y;
        const LoraEntry& e = it->second;
        bool training = e.A->needs_grad || e.B->needs_grad || x->needs_grad;
        if (!training) {
            bool all_zero = true;
            for (double v : e.B->val.data) {
                if (v != 0.0) {
                    all_zero = false;
                    break;
                }
            }
            if (all_zero) return y;
        }
        ad::Value delta = ad::linear_nobias(ad::linear_nobias(x, e.A), e.B);
        return ad::add(y, ad::scale(delta, lora_->scale));
    }

    ad::Value res_block(const std::string& name, ad::Value x, ad::Value temb) const {
        using namespace ad;
        Value h = group_norm(x, p(name + ".gn1.g"), p(name + ".gn1.b"), spec.groups);
        h = conv2d(silu(h), p(name + ".conv1.w"), p(name + ".conv1.b"));
        Value tb = linear(silu(temb), p(name + ".temb.w"), p(name + ".temb.b"));
        h = add_bias_nc(h, tb);
        h = group_norm(h, p(name + ".gn2.g"), p(name + ".gn2.b"), spec.groups);
        h = conv2d(silu(h), p(name + ".conv2.w"), p(name + ".conv2.b"));
        Value skip = x;
        if (by_name_.count(name + ".skip.w")) {
            skip = conv2d(x, p(name + ".skip.w"), p(name + ".skip.b"), 1, 0);
        }
        R2V_CHECK(skip->val.shape[1] == h->val.shape[1], "res_block: channel mismatch");
        return add(skip, h);
    }

    // Record a conv tap and/or apply its override, frame by frame.
    ad::Value conv_tap(const std::string& tap, ad::Value h, const DenoiseCall& call) const {
        if (call.record != nullptr) {
            TapRecord rec;
            rec.kind = TapKind::Conv;
            rec.conv = h->val;
            call.record->put(call.record_step, tap, std::move(rec));
        }
        if (call.overrides != nullptr && call.overrides->conv) {
            int64_t F = h->val.shape[0];
            int64_t per = h->val.numel() / F;
            Tensor replaced = h->val;
            for (int64_t f = 0; f < F; f++) {
                Tensor frame({h->val.shape[1], h->val.shape[2], h->val.shape[3]});
                std::memcpy(frame.ptr(), h->val.ptr() + f * per,
                            static_cast<size_t>(per) * sizeof(double));
                Tensor out = call.overrides->conv(tap, f, frame);
                R2V_CHECK(out.same_shape(frame), "conv tap override: shape mismatch");
                std::memcpy(replaced.ptr() + f * per, out.ptr(),
                            static_cast<size_t>(per) * sizeof(double));
            }
            // overrides are an inference-time mechanism; the replaced tensor
            // enters the graph as a constant
            return ad::constant(std::move(replaced));
        }
        return h;
    }

    // (F,C,h,w) <-> (F, h*w, C)
    static ad::Value to_tokens(ad::Value x) {
        auto s = x->val.shape;
        return ad::reshape(ad::permute(x, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
    }
    static ad::Value from_tokens(ad::Value t, int64_t h, int64_t w) {
        auto s = t->val.shape;
        return ad::permute(ad::reshape(t, {s[0], h, w, s[2]}), {0, 3, 1, 2});
    }

    static Tensor frame_of(const Tensor& t, int64_t f) {
        int64_t per = t.numel() / t.shape[0];
        Tensor out(std::vector<int64_t>(t.shape.begin() + 1, t.shape.end()));
        std::memcpy(out.ptr(), t.ptr() + f * per, static_cast<size_t>(per) * sizeof(double));
        return out;
    }

    // Self-attention + cross-attention + feedforward on spatial tokens.
    // Records/overrides q and k at the sa tap; v always stays generated.
    // With extended attention every frame attends to keys/values concatenated
    // over all frames.
    ad::Value attn_block(const std::string& name, ad::Value x, ad::Value ctx,
                         const DenoiseCall& call, bool extended) const {
        using namespace ad;
        int64_t F = x->val.shape[0];
        int64_t c = x->val.shape[1];
        int64_t hh = x->val.shape[2], ww = x->val.shape[3];
        int64_t T = hh * ww;
        double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(c));

        Value tokens = to_tokens(x);  // (F, T, c)
        Value flat = reshape(tokens, {F * T, c});

        // --- self attention ---
        Value n1 = layer_norm(flat, p(name + ".ln1.g"), p(name + ".ln1.b"));
        Value q = lora_linear(name + ".sa.q", n1);
        Value k = lora_linear(name + ".sa.k", n1);
        Value v = lora_linear(name + ".sa.v", n1);
        Value q3 = reshape(q, {F, T, c});
        Value k3 = reshape(k, {F, T, c});
        Value v3 = reshape(v, {F, T, c});

        if (call.record != nullptr) {
            TapRecord rec;
            rec.kind = TapKind::SelfAttention;
            rec.q = q3->val;
            rec.k = k3->val;
            call.record->put(call.record_step, name, std::move(rec));
        }
        if (call.overrides != nullptr && (call.overrides->attn_q || call.overrides->attn_k)) {
            Tensor q_new = q3->val;
            Tensor k_new = k3->val;
            int64_t per = T * c;
            for (int64_t f = 0; f < F; f++) {
                if (call.overrides->attn_q) {
                    Tensor out = call.overrides->attn_q(name, f, frame_of(q3->val, f));
                    R2V_CHECK(out.numel() == per, "attn q override: shape mismatch");
                    std::memcpy(q_new.ptr() + f * per, out.ptr(),
                                static_cast<size_t>(per) * sizeof(double));
                }
                if (call.overrides->attn_k) {
                    Tensor out = call.overrides->attn_k(name, f, frame_of(k3->val, f));
                    R2V_CHECK(out.numel() == per, "attn k override: shape mismatch");
                    std::memcpy(k_new.ptr() + f * per, out.ptr(),
                                static_cast<size_t>(per) * sizeof(double));
                }
            }
            q3 = constant(std::move(q_new));
            k3 = constant(std::move(k_new));
        }

        Value sa_out;
        if (extended && F > 1) {
            // concatenated keys/values across all frames (Eq. 2 layout)
            Value k_all = reshape(k3, {F * T, c});
            Value v_all = reshape(v3, {F * T, c});
            std::vector<Value> outs;
            for (int64_t f = 0; f < F; f++) {
                Value qf = reshape(slice(q3, 0, f, 1), {T, c});
                Value scores = scale(matmul(qf, permute(k_all, {1, 0})), inv_sqrt_d);
                Value of = matmul(softmax_lastdim(scores), v_all);  // (T, c)
                outs.push_back(reshape(of, {1, T, c}));
            }
            sa_out = concat(outs, 0);
        } else {
            Value scores = scale(bmm(q3, permute(k3, {0, 2, 1})), inv_sqrt_d);
            sa_out = bmm(softmax_lastdim(scores), v3);
        }
        Value sa_proj = lora_linear(name + ".sa.out", reshape(sa_out, {F * T, c}));
        flat = add(flat, sa_proj);

        // --- cross attention over the prompt tokens ---
        Value n2 = layer_norm(flat, p(name + ".ln2.g"), p(name + ".ln2.b"));
        Value q2 = lora_linear(name + ".ca.q", n2);              // (F*T, c)
        Value k2 = lora_linear(name + ".ca.k", ctx);             // (n_ctx, c)
        Value v2 = lora_linear(name + ".ca.v", ctx);
        Value scores2 = scale(matmul(q2, permute(k2, {1, 0})), inv_sqrt_d);
        Value ca_out = matmul(softmax_lastdim(scores2), v2);     // (F*T, c)
        flat = add(flat, lora_linear(name + ".ca.out", ca_out));

        // --- feedforward ---
        Value n3 = layer_norm(flat, p(name + ".ln3.g"), p(name + ".ln3.b"));
        Value ff = lora_linear(name + ".ff.out", silu(lora_linear(name + ".ff.in", n3)));
        flat = add(flat, ff);

        return from_tokens(reshape(flat, {F, T, c}), hh, ww);
    }

    // Attention over the frame axis per spatial location. No positional
    // encoding: the mixing is permutation-equivariant in time, and the output
    // projection starts at zero so the block is transparent at init.
    ad::Value temporal_block(const std::string& name, ad::Value x) const {
        using namespace ad;
        int64_t F = x->val.shape[0];
        int64_t c = x->val.shape[1];
        int64_t hh = x->val.shape[2], ww = x->val.shape[3];
        int64_t S = hh * ww;
        double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(c));
        Value tok = permute(reshape(x, {F, c, S}), {2, 0, 1});  // (S, F, c)
        Value flat = reshape(tok, {S * F, c});
        Value n = layer_norm(flat, p(name + ".ln.g"), p(name + ".ln.b"));
        Value q = reshape(linear(n, p(name + ".q.w"), p(name + ".q.b")), {S, F, c});
        Value k = reshape(linear(n, p(name + ".k.w"), p(name + ".k.b")), {S, F, c});
        Value v = reshape(linear(n, p(name + ".v.w"), p(name + ".v.b")), {S, F, c});
        Value scores = scale(bmm(q, permute(k, {0, 2, 1})), inv_sqrt_d);
        Value out = bmm(softmax_lastdim(scores), v);  // (S, F, c)
        Value proj = linear(reshape(out, {S * F, c}), p(name + ".out.w"), p(name + ".out.b"));
        Value mixed = add(flat, proj);
        Value back = permute(reshape(mixed, {S, F, c}), {1, 2, 0});  // (F, c, S)
        return reshape(back, {F, c, hh, ww});
    }
};

// ---- control encoder ----

class ControlEncoder {
public:
    DenoiserSpec spec;

    ControlEncoder(const DenoiserSpec& s, uint64_t seed) : spec(s) {
        Rng rng(seed);
        int64_t w0 = spec.widths[0], w1 = spec.widths[1];
        add_param("c0.w", conv_init(w0, 1, 3, rng));
        add_param("c0.b", Tensor::zeros({w0}));
        add_param("c1.w", conv_init(w1, w0, 3, rng));
        add_param("c1.b", Tensor::zeros({w1}));
        add_param("c2.w", conv_init(w1, w1, 3, rng));
        add_param("c2.b", Tensor::zeros({w1}));
        // zero-initialized output projections
        add_param("z0.w", Tensor::zeros({w0, w0, 1, 1}));
        add_param("z0.b", Tensor::zeros({w0}));
        add_param("z1.w", Tensor::zeros({w1, w1, 1, 1}));
        add_param("z1.b", Tensor::zeros({w1}));
        add_param("z2.w", Tensor::zeros({w1, w1, 1, 1}));
        add_param("z2.b", Tensor::zeros({w1}));
    }

    const std::vector<std::pair<std::string, ad::Value>>& parameters() const { return params_; }

    void set_trainable(bool on) const {
        for (const auto& [n, v] : params_) v->needs_grad = on;
    }

    uint64_t weights_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [n, v] : params_) {
            h = fnv1a64(n, h);
            h = fnv1a64(v->val.ptr(), static_cast<size_t>(v->val.numel()) * sizeof(double), h);
        }
        return h;
    }

    // depth: (F, 1, H, W) at image resolution (2x the latent grid)
    ControlResidualSet encode(const Tensor& depth, double strength = 1.0) const {
        using namespace ad;
        R2V_CHECK(depth.ndim() == 4 && depth.shape[1] == 1, "control: depth must be Fx1xHxW");
        R2V_CHECK(depth.shape[2] == spec.latent_h * 2 && depth.shape[3] == spec.latent_w * 2,
                  "control: depth resolution must be twice the latent grid");
        Value d = constant(depth);
        Value c0 = silu(conv2d(d, p("c0.w"), p("c0.b"), 2, 1));   // latent res
        Value c1 = silu(conv2d(c0, p("c1.w"), p("c1.b"), 2, 1));  // half
        Value c2 = silu(conv2d(c1, p("c2.w"), p("c2.b"), 2, 1));  // quarter
        ControlResidualSet set;
        set.strength = strength;
        set.levels = {conv2d(c0, p("z0.w"), p("z0.b"), 1, 0), conv2d(c1, p("z1.w"), p("z1.b"), 1, 0),
                      conv2d(c2, p("z2.w"), p("z2.b"), 1, 0)};
        return set;
    }

private:
    std::vector<std::pair<std::string, ad::Value>> params_;
    std::map<std::string, ad::Value> by_name_;

    static Tensor conv_init(int64_t co, int64_t ci, int64_t k, Rng& rng) {
        double std = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
        return Tensor::randn({co, ci, k, k}, rng, std);
    }

    ad::Value add_param(const std::string& name, Tensor t) {
        auto v = ad::param(std::move(t));
        v->needs_grad = false;
        params_.emplace_back(name, v);
        by_name_[name] = v;
        return v;
    }

    ad::Value p(const std::string& name) const {
        auto it = by_name_.find(name);
        R2V_CHECK(it != by_name_.end(), "control: missing parameter " + name);
        return it->second;
    }
};

// Depth map (H,W) -> normalized control input (1,1,H,W): covered pixels map
// to 1/(1+z), invisible pixels to 0.
inline Tensor control_depth_input(const Tensor& depth) {
    R2V_CHECK(depth.ndim() == 2, "control input: depth must be HxW");
    Tensor out({1, 1, depth.shape[0], depth.shape[1]});
    for (int64_t i = 0; i < depth.numel(); i++) {
        out[i] = depth[i] > 0.0 ? 1.0 / (1.0 + depth[i]) : 0.0;
    }
    return out;
}

// Fresh LoRA adapter over all of the denoiser's target layers (or a subset).
inline std::shared_ptr<LoraAdapter> make_lora_adapter(const Denoiser& model, int64_t rank,
                                                      uint64_t seed, double scale = 0.0) {
    auto adapter = std::make_shared<LoraAdapter>();
    adapter->rank = rank;
    adapter->seed = seed;
    adapter->scale = (scale > 0.0) ? scale : 1.0 / static_cast<double>(rank);
    Rng rng(seed);
    for (const auto& [name, dims] : model.lora_targets()) {
        LoraEntry e;
        double std = 1.0 / std::sqrt(static_cast<double>(dims.second));
        e.A = ad::param(Tensor::randn({rank, dims.second}, rng, std));
        e.B = ad::param(Tensor::zeros({dims.first, rank}));
        e.A->needs_grad = false;
        e.B->needs_grad = false;
        adapter->entries[name] = std::move(e);
    }
    return adapter;
}

}  // namespace r2v
