#pragma once

// Denoising-score-matching training for the toy image and video models, plus
// the optimizers shared with LoRA customization. Fully seeded: identical
// configs produce identical weights.

#include "r2v/denoiser.hpp"

namespace r2v {

struct Sgd {
    double lr;
    explicit Sgd(double lr_) : lr(lr_) {}

    void step(const std::vector<ad::Value>& params) {
        for (const auto& p : params) {
            if (p->grad.shape != p->val.shape) continue;  // no gradient this round
            for (int64_t i = 0; i < p->val.numel(); i++) {
                p->val[i] -= lr * p->grad[i];
            }
        }
    }
};

struct Adam {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<Tensor> m, v;

    explicit Adam(double lr_) : lr(lr_) {}

    void step(const std::vector<ad::Value>& params) {
        if (m.empty()) {
            for (const auto& p : params) {
                m.push_back(Tensor::zeros(p->val.shape));
                v.push_back(Tensor::zeros(p->val.shape));
            }
        }
        R2V_CHECK(m.size() == params.size(), "adam: parameter set changed between steps");
        t++;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < params.size(); i++) {
            const auto& p = params[i];
            if (p->grad.shape != p->val.shape) continue;
            for (int64_t j = 0; j < p->val.numel(); j++) {
                double g = p->grad[j];
                m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
                v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
                p->val[j] -= lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + eps);
            }
        }
    }
};

struct TrainConfig {
    double lr = 2e-3;
    int steps = 400;
    int batch = 2;
    uint64_t seed = 0;
    double control_dropout = 0.3;  // fraction of steps trained without control input
};

struct TrainStats {
    double heldout_before = 0.0;
    double heldout_after = 0.0;
    double final_train_loss = 0.0;
};

struct ImageSample {
    Tensor latent;    // (C,h,w), model space
    PromptEmbedding prompt;
    Tensor depth_in;  // (1,1,H,W) control input; empty = no control available
};

struct VideoSample {
    Tensor latents;   // (F,C,h,w), model space
    PromptEmbedding prompt;
    Tensor depth_in;  // (F,1,H,W)
};

namespace train_detail {

struct TrainableGuard {
    const Denoiser* model;
    const ControlEncoder* control;
    TrainableGuard(const Denoiser* m, const ControlEncoder* c) : model(m), control(c) {
        model->set_trainable(true);
        if (control) control->set_trainable(true);
    }
    ~TrainableGuard() {
        model->set_trainable(false);
        if (control) control->set_trainable(false);
    }
};

inline std::vector<ad::Value> collect_params(const Denoiser& model, const ControlEncoder* control) {
    std::vector<ad::Value> out;
    for (const auto& [n, v] : model.parameters()) out.push_back(v);
    if (control) {
        for (const auto& [n, v] : control->parameters()) out.push_back(v);
    }
    return out;
}

}  // namespace train_detail

// Standard eps-prediction loss on image samples; trains the denoiser and
// (when given) the depth-control encoder jointly. Control input is dropped at
// random during a fraction of steps so the model also works unconditioned.
inline TrainStats train_denoiser(Denoiser& model, ControlEncoder* control,
                                 const std::vector<ImageSample>& samples,
                                 const NoiseSchedule& schedule, const TrainConfig& cfg) {
    R2V_CHECK(!samples.empty(), "train: dataset is empty");
    R2V_CHECK(!model.spec.video, "train_denoiser: use train_video_denoiser for video specs");
    schedule.validate();
    int T = schedule.steps_total();

    // fixed held-out evaluation pairs (sample, t, eps)
    struct EvalCase {
        size_t idx;
        int t;
        Tensor eps;
    };
    Rng eval_rng(derive_seed(cfg.seed, "train-eval"));
    std::vector<EvalCase> eval_cases;
    for (int i = 0; i < 8; i++) {
        EvalCase ec;
        ec.idx = static_cast<size_t>(eval_rng.randint(0, static_cast<int64_t>(samples.size()) - 1));
        ec.t = static_cast<int>(eval_rng.randint(0, T - 1));
        const auto& s = samples[ec.idx];
        ec.eps = Tensor::randn(s.latent.shape, eval_rng);
        eval_cases.push_back(std::move(ec));
    }

    auto eval_heldout = [&]() {
        double total = 0.0;
        for (const auto& ec : eval_cases) {
            const auto& s = samples[ec.idx];
            Latent z0 = Latent::image(s.latent);
            Latent z_t = add_noise(z0, schedule, ec.t, ec.eps.reshaped(z0.data.shape));
            Denoiser::Inputs in;
            in.prompt = &s.prompt;
            ControlResidualSet ctrl;
            if (control != nullptr && s.depth_in.numel() > 0) {
                ctrl = control->encode(s.depth_in);
                in.control = &ctrl;
            }
            Tensor eps_hat = model.denoise(z_t.data, noise_position(schedule, ec.t), {}, in);
            Tensor diff = eps_hat - ec.eps.reshaped(eps_hat.shape);
            total += dot(diff, diff) / static_cast<double>(diff.numel());
        }
        return total / static_cast<double>(eval_cases.size());
    };

    TrainStats stats;
    stats.heldout_before = eval_heldout();

    train_detail::TrainableGuard guard(&model, control);
    auto params = train_detail::collect_params(model, control);
    Adam opt(cfg.lr);
    Rng rng(derive_seed(cfg.seed, "train-denoiser"));

    for (int step = 0; step < cfg.steps; step++) {
        ad::zero_grad(params);
        double step_loss = 0.0;
        for (int b = 0; b < cfg.batch; b++) {
            const auto& s = samples[static_cast<size_t>(
                rng.randint(0, static_cast<int64_t>(samples.size()) - 1))];
            int t = static_cast<int>(rng.randint(0, T - 1));
            Tensor eps = Tensor::randn({1, s.latent.shape[0], s.latent.shape[1], s.latent.shape[2]},
                                       rng);
            Latent z_t = add_noise(Latent::image(s.latent), schedule, t, eps);

            Denoiser::Inputs in;
            in.prompt = &s.prompt;
            ControlResidualSet ctrl;
            bool use_control =
                control != nullptr && s.depth_in.numel() > 0 && rng.uniform() >= cfg.control_dropout;
            if (use_control) {
                ctrl = control->encode(s.depth_in);
                in.control = &ctrl;
            }
            ad::Value eps_hat =
                model.forward(ad::constant(z_t.data), noise_position(schedule, t), {}, in);
            ad::Value loss = ad::scale(ad::mean_sq(ad::sub(eps_hat, ad::constant(eps))),
                                       1.0 / cfg.batch);
            if (!std::isfinite(loss->val[0])) {
                throw TrainingError("train_denoiser: loss diverged at step " + std::to_string(step));
            }
            step_loss += loss->val[0];
            ad::backward(loss);
        }
        opt.step(params);
        stats.final_train_loss = step_loss;
    }

    for (const auto& p : params) p->grad = Tensor();
    stats.heldout_after = eval_heldout();
    return stats;
}

// Video-model training: one clip per step, conditioned on its clean first
// frame (channel concatenation), noise levels drawn from the ladder.
inline TrainStats train_video_denoiser(Denoiser& model, ControlEncoder* control,
                                       const std::vector<VideoSample>& samples,
                                       const NoiseSchedule& ladder, const TrainConfig& cfg) {
    R2V_CHECK(!samples.empty(), "train: dataset is empty");
    R2V_CHECK(model.spec.video, "train_video_denoiser: spec must be a video variant");
    R2V_CHECK(ladder.kind == ScheduleKind::NoiseLadder, "train_video_denoiser: needs ladder");
    int levels = ladder.steps_total();
    // skip the sigma = 0 terminal: the eps target is undefined there
    int max_level = levels - 2;
    R2V_CHECK(max_level >= 0, "train_video_denoiser: ladder too short");

    struct EvalCase {
        size_t idx;
        int lv;
        Tensor eps;
    };
    Rng eval_rng(derive_seed(cfg.seed, "train-video-eval"));
    std::vector<EvalCase> eval_cases;
    for (int i = 0; i < 4; i++) {
        EvalCase ec;
        ec.idx = static_cast<size_t>(eval_rng.randint(0, static_cast<int64_t>(samples.size()) - 1));
        ec.lv = static_cast<int>(eval_rng.randint(0, max_level));
        ec.eps = Tensor::randn(samples[ec.idx].latents.shape, eval_rng);
        eval_cases.push_back(std::move(ec));
    }

    auto eval_heldout = [&]() {
        double total = 0.0;
        for (const auto& ec : eval_cases) {
            const auto& s = samples[ec.idx];
            Latent z0;
            z0.data = s.latents;
            z0.frame_indices.resize(static_cast<size_t>(s.latents.shape[0]));
            for (size_t f = 0; f < z0.frame_indices.size(); f++) {
                z0.frame_indices[f] = static_cast<int64_t>(f);
            }
            Latent z_t = add_noise(z0, ladder, ec.lv, ec.eps);
            Tensor cond({s.latents.shape[1], s.latents.shape[2], s.latents.shape[3]});
            std::memcpy(cond.ptr(), s.latents.ptr(), static_cast<size_t>(cond.numel()) * sizeof(double));
            Denoiser::Inputs in;
            in.prompt = &s.prompt;
            in.image_cond = &cond;
            ControlResidualSet ctrl;
            if (control != nullptr && s.depth_in.numel() > 0) {
                ctrl = control->encode(s.depth_in);
                in.control = &ctrl;
            }
            Tensor eps_hat = model.denoise(z_t.data, noise_position(ladder, ec.lv), {}, in);
            Tensor diff = eps_hat - ec.eps;
            total += dot(diff, diff) / static_cast<double>(diff.numel());
        }
        return total / static_cast<double>(eval_cases.size());
    };

    TrainStats stats;
    stats.heldout_before = eval_heldout();

    train_detail::TrainableGuard guard(&model, control);
    auto params = train_detail::collect_params(model, control);
    Adam opt(cfg.lr);
    Rng rng(derive_seed(cfg.seed, "train-video"));

    for (int step = 0; step < cfg.steps; step++) {
        ad::zero_grad(params);
        const auto& s =
            samples[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(samples.size()) - 1))];
        int lv = static_cast<int>(rng.randint(0, max_level));
        Tensor eps = Tensor::randn(s.latents.shape, rng);
        Latent z0;
        z0.data = s.latents;
        z0.frame_indices.resize(static_cast<size_t>(s.latents.shape[0]));
        for (size_t f = 0; f < z0.frame_indices.size(); f++) {
            z0.frame_indices[f] = static_cast<int64_t>(f);
        }
        Latent z_t = add_noise(z0, ladder, lv, eps);

        Tensor cond({s.latents.shape[1], s.latents.shape[2], s.latents.shape[3]});
        std::memcpy(cond.ptr(), s.latents.ptr(), static_cast<size_t>(cond.numel()) * sizeof(double));
        Denoiser::Inputs in;
        in.prompt = &s.prompt;
        in.image_cond = &cond;
        ControlResidualSet ctrl;
        bool use_control =
            control != nullptr && s.depth_in.numel() > 0 && rng.uniform() >= cfg.control_dropout;
        if (use_control) {
            ctrl = control->encode(s.depth_in);
            in.control = &ctrl;
        }

        ad::Value eps_hat = model.forward(ad::constant(z_t.data), noise_position(ladder, lv), {}, in);
        ad::Value loss = ad::mean_sq(ad::sub(eps_hat, ad::constant(eps)));
        if (!std::isfinite(loss->val[0])) {
            throw TrainingError("train_video_denoiser: loss diverged at step " + std::to_string(step));
        }
        stats.final_train_loss = loss->val[0];
        ad::backward(loss);
        opt.step(params);
    }

    for (const auto& p : params) p->grad = Tensor();
    stats.heldout_after = eval_heldout();
    return stats;
}

}  // namespace r2v
