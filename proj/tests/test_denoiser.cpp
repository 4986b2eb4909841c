#include "r2v/datagen.hpp"
#include "r2v/training.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace r2v;

namespace {

DenoiserSpec tiny_spec(bool video = false) {
    DenoiserSpec s;
    s.latent_channels = 12;
    s.latent_h = 8;
    s.latent_w = 8;
    s.widths = {8, 12};
    s.attn_at_level = {true, true};
    s.context_dim = 8;
    s.time_embed_dim = 16;
    s.groups = 4;
    s.video = video;
    s.max_frames = 8;
    return s;
}

Tensor random_latent_tensor(Rng& rng, const DenoiserSpec& s, int64_t f = 1) {
    return Tensor::randn({f, s.latent_channels, s.latent_h, s.latent_w}, rng);
}

}  // namespace

TEST_CASE("encode/decode: exact invertible rearrangement") {
    Rng rng(3);
    Tensor img = Tensor::uniform({16, 16, 3}, rng, 0.0, 1.0);
    Tensor lat = encode_image(img, 1);
    REQUIRE(lat.shape == std::vector<int64_t>{12, 8, 8});
    Tensor back = decode_image(lat, 1);
    REQUIRE(bitwise_equal(back, img));

    Tensor lat2 = encode_image(img, 2);
    REQUIRE(lat2.shape == std::vector<int64_t>{48, 4, 4});
    REQUIRE(bitwise_equal(decode_image(lat2, 2), img));

    Tensor flat = Tensor::full({4, 4, 3}, 0.37);
    Tensor latc = encode_image(flat, 1);
    for (int64_t i = 0; i < latc.numel(); i++) REQUIRE(latc[i] == 0.37);
}

TEST_CASE("prompt embedding is deterministic and word-sensitive") {
    PromptEmbedding a = embed_prompt("a red box in checkerboard", 16);
    PromptEmbedding b = embed_prompt("a red box in checkerboard", 16);
    PromptEmbedding c = embed_prompt("a blue box in checkerboard", 16);
    REQUIRE(bitwise_equal(a.tokens, b.tokens));
    REQUIRE(!bitwise_equal(a.tokens, c.tokens));
    REQUIRE(a.tokens.shape[0] == 5);
    PromptEmbedding empty = embed_prompt("", 16);
    REQUIRE(empty.tokens.shape[0] == 1);  // single null token
}

TEST_CASE("denoiser: output shape, determinism, tap recording") {
    auto spec = tiny_spec();
    Denoiser model(spec, 99);
    Rng rng(4);
    Tensor z = random_latent_tensor(rng, spec);
    PromptEmbedding prompt = embed_prompt("a red box", spec.context_dim);
    Denoiser::Inputs in;
    in.prompt = &prompt;

    Tensor e1 = model.denoise(z, 10.0, {}, in);
    REQUIRE(e1.shape == z.shape);
    REQUIRE(e1.all_finite());

    Tensor e2 = model.denoise(z, 10.0, {}, in);
    REQUIRE(bitwise_equal(e1, e2));

    FeatureTrace t1, t2;
    DenoiseCall c1;
    c1.record = &t1;
    c1.record_step = 42;
    DenoiseCall c2;
    c2.record = &t2;
    c2.record_step = 42;
    model.denoise(z, 10.0, c1, in);
    model.denoise(z, 10.0, c2, in);
    REQUIRE(t1.size() == spec.declared_taps().size());
    for (const auto& tap : spec.declared_taps()) {
        const TapRecord& r1 = t1.get(42, tap.id);
        const TapRecord& r2 = t2.get(42, tap.id);
        if (tap.kind == TapKind::Conv) {
            REQUIRE(bitwise_equal(r1.conv, r2.conv));
        } else {
            REQUIRE(bitwise_equal(r1.q, r2.q));
            REQUIRE(bitwise_equal(r1.k, r2.k));
        }
    }
}

TEST_CASE("denoiser: zero-initialized control branch is bitwise transparent") {
    auto spec = tiny_spec();
    Denoiser model(spec, 7);
    ControlEncoder control(spec, 8);
    Rng rng(5);
    Tensor z = random_latent_tensor(rng, spec);
    Tensor depth = Tensor::uniform({1, 1, spec.latent_h * 2, spec.latent_w * 2}, rng, 0.0, 1.0);
    PromptEmbedding prompt = embed_prompt("a box", spec.context_dim);

    ControlResidualSet ctrl = control.encode(depth);
    for (const auto& lv : ctrl.levels) {
        for (double v : lv->val.data) REQUIRE(v == 0.0);
    }

    Denoiser::Inputs plain;
    plain.prompt = &prompt;
    Denoiser::Inputs with_ctrl;
    with_ctrl.prompt = &prompt;
    with_ctrl.control = &ctrl;
    Tensor a = model.denoise(z, 3.0, {}, plain);
    Tensor b = model.denoise(z, 3.0, {}, with_ctrl);
    REQUIRE(bitwise_equal(a, b));
}

TEST_CASE("denoiser: no-op hooks leave output bit-identical") {
    auto spec = tiny_spec();
    Denoiser model(spec, 17);
    Rng rng(6);
    Tensor z = random_latent_tensor(rng, spec, 2);
    PromptEmbedding prompt = embed_prompt("a box", spec.context_dim);
    Denoiser::Inputs in;
    in.prompt = &prompt;

    Tensor base = model.denoise(z, 5.0, {}, in);

    TapOverride ov;
    int fired = 0;
    ov.conv = [&](const std::string&, int64_t, const Tensor& g) {
        fired++;
        return g;
    };
    ov.attn_q = [&](const std::string&, int64_t, const Tensor& g) {
        fired++;
        return g;
    };
    ov.attn_k = [&](const std::string&, int64_t, const Tensor& g) {
        fired++;
        return g;
    };
    DenoiseCall call;
    call.overrides = &ov;
    Tensor hooked = model.denoise(z, 5.0, call, in);
    REQUIRE(fired > 0);
    REQUIRE(bitwise_equal(base, hooked));
}

TEST_CASE("denoiser: replaying recorded conv features reproduces the output") {
    auto spec = tiny_spec();
    Denoiser model(spec, 23);
    Rng rng(7);
    Tensor z = random_latent_tensor(rng, spec);
    PromptEmbedding prompt = embed_prompt("a box", spec.context_dim);
    Denoiser::Inputs in;
    in.prompt = &prompt;

    FeatureTrace trace;
    DenoiseCall rec;
    rec.record = &trace;
    rec.record_step = 0;
    Tensor base = model.denoise(z, 2.0, rec, in);

    TapOverride ov;
    ov.conv = [&](const std::string& tap, int64_t f, const Tensor& g) {
        const TapRecord& r = trace.get(0, tap);
        Tensor out(g.shape);
        std::memcpy(out.ptr(), r.conv.ptr() + f * g.numel(),
                    static_cast<size_t>(g.numel()) * sizeof(double));
        return out;
    };
    ov.attn_q = [&](const std::string& tap, int64_t f, const Tensor& g) {
        const TapRecord& r = trace.get(0, tap);
        Tensor out(g.shape);
        std::memcpy(out.ptr(), r.q.ptr() + f * g.numel(),
                    static_cast<size_t>(g.numel()) * sizeof(double));
        return out;
    };
    DenoiseCall call;
    call.overrides = &ov;
    Tensor replay = model.denoise(z, 2.0, call, in);
    REQUIRE(max_abs_diff(base, replay) < 1e-6);
}

TEST_CASE("denoiser: video F=1 matches image variant given shared weights") {
    auto ispec = tiny_spec(false);
    auto vspec = tiny_spec(true);
    Denoiser image(ispec, 31);
    Denoiser video(vspec, 32);

    // copy shared layers; zero the conditioning half of conv_in so the extra
    // channels contribute nothing
    for (const auto& [name, v] : video.parameters()) {
        if (name == "conv_in.w") {
            Tensor& w = v->val;
            for (auto& x : w.data) x = 0.0;
            const Tensor& iw = image.find_param("conv_in.w")->val;
            // video conv_in: (w0, 2C, 3, 3); first C input channels get the
            // image weights
            int64_t co = iw.shape[0], ci = iw.shape[1];
            for (int64_t o = 0; o < co; o++) {
                for (int64_t c = 0; c < ci; c++) {
                    for (int64_t i = 0; i < 9; i++) {
                        w[((o * 2 * ci) + c) * 9 + i] = iw[(o * ci + c) * 9 + i];
                    }
                }
            }
        } else if (name.find(".temporal.") == std::string::npos) {
            v->val = image.find_param(name)->val;
        }
        // temporal blocks stay at their init: zero output projections make
        // them transparent
    }

    Rng rng(8);
    Tensor z = random_latent_tensor(rng, ispec, 1);
    Tensor cond = Tensor::randn({ispec.latent_channels, ispec.latent_h, ispec.latent_w}, rng);
    PromptEmbedding prompt = embed_prompt("a box", ispec.context_dim);

    Denoiser::Inputs iin;
    iin.prompt = &prompt;
    Tensor out_image = image.denoise(z, 4.0, {}, iin);

    Denoiser::Inputs vin;
    vin.prompt = &prompt;
    vin.image_cond = &cond;
    Tensor out_video = video.denoise(z, 4.0, {}, vin);

    REQUIRE(max_abs_diff(out_image, out_video) < 1e-12);
}

TEST_CASE("denoiser: shape and contract violations rejected") {
    auto spec = tiny_spec();
    Denoiser model(spec, 41);
    PromptEmbedding prompt = embed_prompt("a box", spec.context_dim);
    Denoiser::Inputs in;
    in.prompt = &prompt;
    Rng rng(9);
    Tensor bad = Tensor::randn({1, 3, 8, 8}, rng);
    REQUIRE_THROWS_AS(model.denoise(bad, 1.0, {}, in), ContractError);

    auto vspec = tiny_spec(true);
    Denoiser vid(vspec, 42);
    Tensor z = random_latent_tensor(rng, vspec, 2);
    REQUIRE_THROWS_AS(vid.denoise(z, 1.0, {}, in), ContractError);  // missing image_cond
}

TEST_CASE("train_denoiser: memorizes one sample, deterministic, gradient-checked") {
    auto spec = tiny_spec();
    auto schedule = NoiseSchedule::variance_preserving(100);

    // single training sample: a rendered box
    Mesh box = make_box(0.5, 0.5, 0.5, {0.9, 0.1, 0.1}, {0.1, 0.1, 0.9});
    Camera cam = Camera::look_at({0, 0.6, -1.8}, {0, 0, 0}, {0, 1, 0}, 1.0, 1.0, 0.05, 20.0);
    GuidancePack pack = rasterize({{&box, RigidTransform{}, true}}, cam, 16, 16);
    ImageSample sample = pack_to_image_sample(pack, "a red box", spec.context_dim, 1, false);

    SECTION("loss decreases and training is reproducible") {
        TrainConfig cfg;
        cfg.lr = 2e-3;
        cfg.steps = 120;
        cfg.batch = 1;
        cfg.seed = 7;
        Denoiser m1(spec, 100);
        TrainStats st = train_denoiser(m1, nullptr, {sample}, schedule, cfg);
        REQUIRE(st.heldout_after < st.heldout_before);

        Denoiser m2(spec, 100);
        train_denoiser(m2, nullptr, {sample}, schedule, cfg);
        REQUIRE(m1.weights_hash() == m2.weights_hash());

        Denoiser m3(spec, 100);
        cfg.seed = 8;
        train_denoiser(m3, nullptr, {sample}, schedule, cfg);
        REQUIRE(m1.weights_hash() != m3.weights_hash());
    }

    SECTION("DSM loss gradient matches central finite differences") {
        Denoiser model(spec, 101);
        model.set_trainable(true);
        Rng rng(10);
        int t = 40;
        Tensor eps = Tensor::randn({1, spec.latent_channels, spec.latent_h, spec.latent_w}, rng);
        Latent z_t = add_noise(Latent::image(sample.latent), schedule, t, eps);

        auto loss_fn = [&]() {
            Denoiser::Inputs in;
            in.prompt = &sample.prompt;
            ad::Value eps_hat =
                model.forward(ad::constant(z_t.data), noise_position(schedule, t), {}, in);
            return ad::mean_sq(ad::sub(eps_hat, ad::constant(eps)));
        };
        ad::Value loss = loss_fn();
        ad::backward(loss);

        Rng pick(11);
        const auto& params = model.parameters();
        double worst = 0.0;
        for (int trial = 0; trial < 6; trial++) {
            const auto& [name, p] =
                params[static_cast<size_t>(pick.randint(0, static_cast<int64_t>(params.size()) - 1))];
            if (p->grad.shape != p->val.shape) continue;
            int64_t i = pick.randint(0, p->val.numel() - 1);
            double h = 1e-5;
            double orig = p->val[i];
            p->val[i] = orig + h;
            double fp = loss_fn()->val[0];
            p->val[i] = orig - h;
            double fm = loss_fn()->val[0];
            p->val[i] = orig;
            double fd = (fp - fm) / (2 * h);
            double an = p->grad[i];
            double denom = std::max({std::abs(fd), std::abs(an), 1e-7});
            worst = std::max(worst, std::abs(fd - an) / denom);
        }
        REQUIRE(worst < 1e-4);
    }
}

TEST_CASE("train_video_denoiser: loss decreases on a tiny clip set") {
    auto spec = tiny_spec(true);
    spec.max_frames = 4;
    auto ladder = NoiseSchedule::noise_ladder(8, 5.0, 0.05);

    DataGenConfig dg;
    dg.image_size = 16;
    dg.context_dim = spec.context_dim;
    dg.scene_count = 0;
    dg.fg_only_count = 0;
    dg.video_clip_count = 2;
    dg.clip_frames = 3;
    dg.seed = 5;
    GeneratedData data = generate_training_data(dg);
    REQUIRE(data.video_samples.size() == 4);  // both orientations

    TrainConfig cfg;
    cfg.lr = 2e-3;
    cfg.steps = 60;
    cfg.seed = 3;
    Denoiser model(spec, 200);
    TrainStats st = train_video_denoiser(model, nullptr, data.video_samples, ladder, cfg);
    REQUIRE(st.heldout_after < st.heldout_before);
}
