#pragma once

// LoRA customization of the image denoiser to a single input image, with
// multi-view foreground augmentation. The augmented loss term is masked to
// the foreground and weighted by lambda; means are taken over elements, the
// masked term over masked elements only.

#include "r2v/scene.hpp"
#include "r2v/training.hpp"

namespace r2v {

struct MultiViewSample {
    Tensor image;  // (H,W,3) in [0,1]
    Mask mask;     // image-resolution foreground coverage
    PromptEmbedding prompt;

    void validate() const {
        R2V_CHECK(image.ndim() == 3 && image.shape[2] == 3, "view: image must be HxWx3");
        R2V_CHECK(mask.h == image.shape[0] && mask.w == image.shape[1], "view: mask size mismatch");
        R2V_CHECK(mask.count_true() > 0, "view: mask true-region is empty");
    }
};

struct CustomizationConfig {
    int64_t rank = 8;
    double lr = 5e-3;    // plain SGD
    int steps = 300;
    double lambda = 1.0;
    uint64_t seed = 0;
    int encode_levels = 1;

    void validate() const {
        R2V_CONFIG_CHECK(rank >= 1, "customization: rank must be positive");
        R2V_CONFIG_CHECK(lr > 0.0, "customization: lr must be positive");
        R2V_CONFIG_CHECK(steps >= 1, "customization: steps must be positive");
        R2V_CONFIG_CHECK(lambda >= 0.0, "customization: lambda must be nonnegative");
    }
};

// Latent-resolution boolean mask expanded over channels as a {0,1} tensor.
inline std::vector<uint8_t> latent_mask_bytes(const Mask& latent_mask, int64_t channels) {
    std::vector<uint8_t> bytes;
    bytes.reserve(static_cast<size_t>(channels * latent_mask.h * latent_mask.w));
    for (int64_t c = 0; c < channels; c++) {
        bytes.insert(bytes.end(), latent_mask.v.begin(), latent_mask.v.end());
    }
    return bytes;
}

struct CustomizationBatch {
    // input-image term
    Tensor z_t;           // (1,C,h,w)
    Tensor eps;           // same shape
    int t = 0;
    const PromptEmbedding* c_input = nullptr;
    // augmented-view term
    Tensor z_aug_t;
    Tensor eps_aug;
    int t_aug = 0;
    const PromptEmbedding* c_fg = nullptr;
    Mask latent_mask;     // latent-resolution foreground mask
};

// Eq.-1-style loss:
//   mean|eps - eps_theta(z_t, c_i, t)|^2
//   + lambda * mean_M|(eps' - eps_theta(z'_t, c_fg, t')) * M|^2
// The masked mean divides by the number of masked elements, so lambda keeps
// one meaning across views of different sizes.
inline ad::Value customization_loss(const Denoiser& model, const NoiseSchedule& schedule,
                                    const CustomizationBatch& batch, double lambda) {
    using namespace ad;
    R2V_CHECK(batch.c_input != nullptr && batch.c_fg != nullptr, "loss: prompts required");
    R2V_CHECK(batch.eps.same_shape(batch.z_t), "loss: input eps shape mismatch");
    R2V_CHECK(batch.eps_aug.same_shape(batch.z_aug_t), "loss: aug eps shape mismatch");
    int64_t mask_count = batch.latent_mask.count_true();
    R2V_CHECK(mask_count > 0, "loss: empty foreground mask");
    R2V_CHECK(batch.latent_mask.h == batch.z_aug_t.shape[2] &&
                  batch.latent_mask.w == batch.z_aug_t.shape[3],
              "loss: mask must be at latent resolution");

    Denoiser::Inputs in_input;
    in_input.prompt = batch.c_input;
    Value eps_hat =
        model.forward(constant(batch.z_t), noise_position(schedule, batch.t), {}, in_input);
    Value term_input = mean_sq(sub(eps_hat, constant(batch.eps)));

    Denoiser::Inputs in_aug;
    in_aug.prompt = batch.c_fg;
    Value eps_hat_aug =
        model.forward(constant(batch.z_aug_t), noise_position(schedule, batch.t_aug), {}, in_aug);
    Value diff = sub(eps_hat_aug, constant(batch.eps_aug));

    int64_t channels = batch.z_aug_t.shape[1];
    Tensor mask01({batch.z_aug_t.shape[0], channels, batch.latent_mask.h, batch.latent_mask.w});
    for (int64_t c = 0; c < channels; c++) {
        for (size_t i = 0; i < batch.latent_mask.v.size(); i++) {
            mask01[c * static_cast<int64_t>(batch.latent_mask.v.size()) + static_cast<int64_t>(i)] =
                batch.latent_mask.v[i] ? 1.0 : 0.0;
        }
    }
    Value masked = mul(diff, constant(std::move(mask01)));
    Value term_aug =
        scale(sum_all(mul(masked, masked)), 1.0 / static_cast<double>(mask_count * channels));

    return add(term_input, scale(term_aug, lambda));
}

// Builds novel-view training views for a foreground mesh with "a {object}"
// prompts; azimuth coverage comes from foreground_novel_views.
inline std::vector<MultiViewSample> make_multiview_samples(const Mesh& fg, int n_views,
                                                           double radius, int res,
                                                           const std::string& fg_prompt,
                                                           int64_t context_dim) {
    auto views = foreground_novel_views(fg, n_views, radius, res, res);
    std::vector<MultiViewSample> out;
    for (auto& [rgb, mask] : views) {
        MultiViewSample s;
        s.image = std::move(rgb);
        s.mask = std::move(mask);
        s.prompt = embed_prompt(fg_prompt, context_dim);
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

// Per-step SGD on adapter parameters only: the input image plus one uniformly
// drawn augmented view. Base weights never change.
inline std::shared_ptr<LoraAdapter> train_customization(Denoiser& model, const Tensor& input_image,
                                                        const PromptEmbedding& c_input,
                                                        const std::vector<MultiViewSample>& views,
                                                        const NoiseSchedule& schedule,
                                                        const CustomizationConfig& cfg) {
    cfg.validate();
    R2V_CHECK(!views.empty(), "customization: need at least one novel view");
    for (const auto& v : views) v.validate();
    schedule.validate();

    auto adapter = make_lora_adapter(model, cfg.rank, derive_seed(cfg.seed, "lora-init"));
    model.attach_lora(adapter);
    model.set_trainable(false);
    adapter->set_trainable(true);

    Tensor input_latent = to_model_space(encode_image(input_image, cfg.encode_levels));
    int64_t lh = input_latent.shape[1], lw = input_latent.shape[2];

    struct PreparedView {
        Tensor latent;
        Mask latent_mask;
        const PromptEmbedding* prompt;
    };
    std::vector<PreparedView> prepared;
    for (const auto& v : views) {
        PreparedView pv;
        pv.latent = to_model_space(encode_image(v.image, cfg.encode_levels));
        pv.latent_mask = downsample_mask(v.mask, lh, lw);
        R2V_CHECK(pv.latent_mask.count_true() > 0,
                  "customization: view mask empty at latent resolution");
        pv.prompt = &v.prompt;
        prepared.push_back(std::move(pv));
    }

    int T = schedule.steps_total();
    Rng rng(derive_seed(cfg.seed, "lora-train"));
    Sgd opt(cfg.lr);
    auto params = adapter->trainable();

    for (int step = 0; step < cfg.steps; step++) {
        ad::zero_grad(params);
        const PreparedView& view =
            prepared[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(prepared.size()) - 1))];

        CustomizationBatch batch;
        batch.t = static_cast<int>(rng.randint(0, T - 1));
        batch.eps = Tensor::randn({1, input_latent.shape[0], lh, lw}, rng);
        batch.z_t = add_noise(Latent::image(input_latent), schedule, batch.t, batch.eps).data;
        batch.c_input = &c_input;
        batch.t_aug = static_cast<int>(rng.randint(0, T - 1));
        batch.eps_aug = Tensor::randn({1, view.latent.shape[0], lh, lw}, rng);
        batch.z_aug_t = add_noise(Latent::image(view.latent), schedule, batch.t_aug, batch.eps_aug).data;
        batch.c_fg = view.prompt;
        batch.latent_mask = view.latent_mask;

        ad::Value loss = customization_loss(model, schedule, batch, cfg.lambda);
        if (!std::isfinite(loss->val[0])) {
            throw TrainingError("customization diverged at step " + std::to_string(step));
        }
        ad::backward(loss);
        opt.step(params);
    }

    adapter->set_trainable(false);
    for (const auto& p : params) p->grad = Tensor();
    return adapter;
}

// Masked denoising loss of one view under fixed (t, eps) draws; the held-out
// evaluation used by the multi-view ablation. The noise-level band defaults
// to the content-sensitive middle of the schedule: at the extremes the
// eps-target is either trivial or unpredictable and view identity washes out.
inline double heldout_view_loss(const Denoiser& model, const MultiViewSample& view,
                                const NoiseSchedule& schedule, int encode_levels, uint64_t seed,
                                int n_draws = 8, double t_lo_frac = 0.15, double t_hi_frac = 0.6) {
    Tensor latent = to_model_space(encode_image(view.image, encode_levels));
    Mask lmask = downsample_mask(view.mask, latent.shape[1], latent.shape[2]);
    R2V_CHECK(lmask.count_true() > 0, "heldout: empty latent mask");
    Rng rng(seed);
    int T = schedule.steps_total();
    int t_lo = static_cast<int>(t_lo_frac * T);
    int t_hi = std::max(t_lo + 1, static_cast<int>(t_hi_frac * T) - 1);
    double total = 0.0;
    for (int i = 0; i < n_draws; i++) {
        int t = static_cast<int>(rng.randint(t_lo, t_hi));
        Tensor eps = Tensor::randn({1, latent.shape[0], latent.shape[1], latent.shape[2]}, rng);
        Latent z_t = add_noise(Latent::image(latent), schedule, t, eps);
        Denoiser::Inputs in;
        in.prompt = &view.prompt;
        Tensor eps_hat = model.denoise(z_t.data, noise_position(schedule, t), {}, in);
        double acc = 0.0;
        int64_t count = 0;
        int64_t hw = latent.shape[1] * latent.shape[2];
        for (int64_t c = 0; c < latent.shape[0]; c++) {
            for (int64_t p = 0; p < hw; p++) {
                if (!lmask.v[static_cast<size_t>(p)]) continue;
                double d = eps_hat[c * hw + p] - eps[c * hw + p];
                acc += d * d;
                count++;
            }
        }
        total += acc / static_cast<double>(count);
    }
    return total / n_draws;
}

}  // namespace r2v
