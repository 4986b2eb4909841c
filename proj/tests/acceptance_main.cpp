// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exit code 0 iff all pass.
//
// The directional experiments share one set of trained fixture models (built
// once, reported as "fixture"). Pass criterion numbers as arguments to run a
// subset, e.g. `acceptance 1 4 5`.

#include "r2v/datagen.hpp"
#include "r2v/interpolate.hpp"
#include "r2v/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>

using namespace r2v;

#ifndef R2V_SOURCE_DIR
#define R2V_SOURCE_DIR "."
#endif

namespace {

struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define ACCEPT(cond, what)                                              \
    do {                                                                \
        if (!(cond)) throw CheckFailure(std::string("failed: ") + what); \
    } while (0)

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// ---- the bundled scene (same content as demos/box_orbit.scene) ----

SceneAnimation bundled_scene(int n_frames = 33, double orbit_deg = 50.0, double spin_rad = 1.5707963) {
    SceneAnimation s;
    s.n_frames = n_frames;
    s.foreground = make_box(0.5, 0.5, 0.5, {0.85, 0.15, 0.15}, {0.15, 0.15, 0.85});
    s.background = make_checker_plane(5, 5, 6, {0.85, 0.85, 0.85}, {0.22, 0.22, 0.32});
    for (int f = 0; f < n_frames; f++) {
        RigidTransform t;
        t.translation = {0, 0.3, 0};
        t.rotation = Mat3::axis_angle({0, 1, 0}, spin_rad * f / (n_frames - 1));
        s.fg_transforms.push_back(t);
    }
    Camera base = Camera::look_at({0, 1.1, -2.4}, {0, 0.25, 0}, {0, 1, 0},
                                  55.0 * 3.14159265358979 / 180.0, 1.0, 0.05, 60.0);
    TrajectoryParams tp;
    tp.orbit_angle = orbit_deg * 3.14159265358979 / 180.0;
    tp.orbit_center = {0, 0.25, 0};
    s.camera_track = make_camera_trajectory(base, TrajectoryKind::Orbit, tp, n_frames);
    return s;
}

// ---- shared trained fixture ----

struct Fixture {
    DenoiserSpec ispec, vspec;
    NoiseSchedule ischedule = NoiseSchedule::variance_preserving(1000, 1e-4, 0.008);
    NoiseSchedule ladder = NoiseSchedule::noise_ladder(41, 3.0, 0.02);
    std::unique_ptr<Denoiser> image, video;
    std::unique_ptr<ControlEncoder> ictrl, vctrl;
    std::unique_ptr<LearnedDepthEstimator> estimator;
    SceneAnimation scene;
    std::vector<GuidancePack> packs;
    PromptEmbedding prompt, fg_prompt;
};

Fixture& fixture() {
    static std::unique_ptr<Fixture> fix;
    if (fix) return *fix;
    auto t0 = std::chrono::steady_clock::now();
    fix = std::make_unique<Fixture>();
    fix->ispec.latent_channels = 12;
    fix->ispec.latent_h = 16;
    fix->ispec.latent_w = 16;
    fix->ispec.widths = {16, 24};
    fix->ispec.context_dim = 24;
    fix->ispec.time_embed_dim = 48;
    fix->ispec.groups = 4;
    fix->vspec = fix->ispec;
    fix->vspec.video = true;
    fix->vspec.max_frames = 16;

    DataGenConfig dg;
    dg.image_size = 32;
    dg.context_dim = 24;
    dg.scene_count = 20;
    dg.fg_only_count = 8;
    dg.video_clip_count = 8;
    dg.clip_frames = 6;
    dg.seed = 11;
    GeneratedData data = generate_training_data(dg);

    fix->image = std::make_unique<Denoiser>(fix->ispec, 1);
    fix->ictrl = std::make_unique<ControlEncoder>(fix->ispec, 2);
    {
        TrainConfig tc;
        tc.lr = 2e-3;
        tc.steps = 700;
        tc.batch = 2;
        tc.seed = 5;
        train_denoiser(*fix->image, fix->ictrl.get(), data.image_samples, fix->ischedule, tc);
    }
    fix->video = std::make_unique<Denoiser>(fix->vspec, 3);
    fix->vctrl = std::make_unique<ControlEncoder>(fix->vspec, 4);
    {
        TrainConfig tc;
        tc.lr = 2e-3;
        tc.steps = 700;
        tc.seed = 6;
        train_video_denoiser(*fix->video, fix->vctrl.get(), data.video_samples, fix->ladder, tc);
    }
    fix->estimator = std::make_unique<LearnedDepthEstimator>(7, 24);
    {
        LearnedDepthEstimator::FitConfig fc;
        fc.steps = 900;
        fc.seed = 8;
        fix->estimator->fit(data.depth_pairs, fc);
    }
    fix->scene = bundled_scene();
    fix->packs = render_animation(fix->scene, 32, 32);
    fix->prompt = embed_prompt("a red box in checkerboard", 24);
    fix->fg_prompt = embed_prompt("a red box", 24);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("fixture: trained toy models + rendered bundled scene (%.1fs)\n", secs);
    return *fix;
}

// shared conditioning closure for the fixture image model
DenoiserFn image_fn(Fixture& F, const ControlResidualSet* ctrl) {
    return [&F, ctrl](const Tensor& z, const DenoiseCall& call) {
        Denoiser::Inputs in;
        in.prompt = &F.prompt;
        in.control = ctrl;
        return F.image->denoise(z, noise_position(F.ischedule, call.step_index), call, in);
    };
}

// ---- criteria ----

// 1. rasterizer oracles
std::string crit1() {
    Camera cam;
    cam.vertical_fov = 1.5707963267948966;
    Mesh quad = make_quad(1.0, 1.0, {1, 0, 0});
    RigidTransform t;
    t.translation = {0, 0, 2};
    GuidancePack pack = rasterize({{&quad, t, true}}, cam, 64, 64);
    double worst = 0.0;
    int64_t covered = 0;
    for (int64_t i = 0; i < pack.depth.numel(); i++) {
        if (pack.coverage_mask.v[static_cast<size_t>(i)]) {
            worst = std::max(worst, std::abs(pack.depth[i] - 2.0));
            covered++;
        }
    }
    ACCEPT(covered > 0, "quad not rendered");
    ACCEPT(worst < 1e-5, "fronto-parallel quad depth error " + fmt(worst));

    // z-buffer ordering exact, independent of draw order
    Mesh red = make_quad(1.0, 1.0, {1, 0, 0});
    Mesh blue = make_quad(1.0, 1.0, {0, 0, 1});
    RigidTransform t1, t2;
    t1.translation = {0, 0, 1};
    t2.translation = {0, 0, 2};
    for (bool red_first : {true, false}) {
        std::vector<MeshInstance> order =
            red_first ? std::vector<MeshInstance>{{&red, t1, true}, {&blue, t2, false}}
                      : std::vector<MeshInstance>{{&blue, t2, false}, {&red, t1, true}};
        GuidancePack p = rasterize(order, cam, 33, 33);
        ACCEPT(p.depth.at2(16, 16) == 1.0, "occlusion depth not exact");
        ACCEPT(p.rgb.at3(16, 16, 0) == 1.0 && p.rgb.at3(16, 16, 2) == 0.0,
               "occlusion color wrong");
    }

    // mask algebra on 100 randomized scenes
    Rng rng(2024);
    for (int trial = 0; trial < 100; trial++) {
        Mesh fg = make_box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                           {rng.uniform(), rng.uniform(), rng.uniform()},
                           {rng.uniform(), rng.uniform(), rng.uniform()});
        Mesh bg = make_checker_plane(4.0, 4.0, 4, {0.9, 0.9, 0.9}, {0.1, 0.1, 0.2});
        RigidTransform ft;
        ft.translation = {rng.uniform(-1, 1), rng.uniform(-0.5, 0.8), rng.uniform(-1, 1)};
        ft.rotation = Mat3::axis_angle({rng.normal(), rng.normal(), rng.normal() + 2.0},
                                       rng.uniform(0, 6.28));
        Camera c = Camera::look_at({rng.uniform(-2, 2), rng.uniform(0.5, 2.5), rng.uniform(-3, -1.5)},
                                   {0, 0, 0}, {0, 1, 0}, rng.uniform(0.5, 1.8), 1.0, 0.05, 50.0);
        GuidancePack p = rasterize({{&bg, RigidTransform{}, false}, {&fg, ft, true}}, c, 24, 24);
        p.validate();
        Mask inv = invisible_region_mask(p);
        for (size_t i = 0; i < inv.v.size(); i++) {
            ACCEPT((inv.v[i] & p.coverage_mask.v[i]) == 0, "fg/coverage/invisible algebra");
            ACCEPT((inv.v[i] | p.coverage_mask.v[i]) == 1, "invisible = not coverage");
            ACCEPT(!(p.fg_mask.v[i] && !p.coverage_mask.v[i]), "fg outside coverage");
        }
    }
    return "quad depth err " + fmt(worst) + "; occlusion exact; 100 random scenes";
}

// 2. DDIM algebra + trained-model round trip
std::string crit2() {
    Rng rng(6);
    auto s200 = NoiseSchedule::variance_preserving(200);
    Latent z;
    z.data = Tensor::randn({1, 4, 6, 6}, rng);
    z.frame_indices = {0};
    Tensor eps = Tensor::randn(z.data.shape, rng);
    double worst_rt = 0.0;
    for (auto [t, tp] : std::vector<std::pair<int, int>>{{150, 40}, {199, 0}, {10, 180}}) {
        Latent mid = ddim_step(z, eps, s200, t, tp);
        Latent back = ddim_step(mid, eps, s200, tp, t);
        worst_rt = std::max(worst_rt, relative_error(back.data, z.data));
    }
    ACCEPT(worst_rt < 1e-10, "step/inverse round trip " + fmt(worst_rt));

    double worst_cf = 0.0;
    DenoiserFn zero = [](const Tensor& zz, const DenoiseCall&) { return Tensor::zeros(zz.shape); };
    for (int T : {10, 100, 631, 1000}) {
        auto s = NoiseSchedule::variance_preserving(T);
        int steps = std::min(T - 1, 17);
        auto [z_inv, trace] = ddim_invert(z, zero, s, steps);
        double f = std::sqrt(s.abar(T - 1) / s.abar(0));
        worst_cf = std::max(worst_cf, relative_error(z_inv.data, z.data * f));
        Latent z0 = ddim_sample(z_inv, zero, s, steps);
        worst_cf = std::max(worst_cf, relative_error(z0.data, z.data));
    }
    ACCEPT(worst_cf < 1e-8, "zero-predictor closed forms " + fmt(worst_cf));

    Fixture& F = fixture();
    double worst_recon = 0.0;
    for (int k : {0, 16, 32}) {
        const GuidancePack& pack = F.packs[static_cast<size_t>(k)];
        Tensor lat = to_model_space(encode_image(pack.rgb, 1));
        ControlResidualSet ctrl = F.ictrl->encode(control_depth_input(pack.depth));
        DenoiserFn fn = image_fn(F, &ctrl);
        auto [z_inv, trace] = ddim_invert(Latent::image(lat), fn, F.ischedule, 50);
        Latent back = ddim_sample(z_inv, fn, F.ischedule, 50);
        worst_recon = std::max(worst_recon, relative_error(back.data, lat.reshaped(back.data.shape)));
    }
    ACCEPT(worst_recon < 5e-2, "trained-model 50-step reconstruction " + fmt(worst_recon));
    return "round trip " + fmt(worst_rt) + "; closed forms " + fmt(worst_cf) +
           "; 50-step reconstruction " + fmt(worst_recon);
}

// 3. Eq. 1 suite
std::string crit3() {
    DenoiserSpec spec;
    spec.latent_channels = 12;
    spec.latent_h = 8;
    spec.latent_w = 8;
    spec.widths = {8, 12};
    spec.context_dim = 8;
    spec.time_embed_dim = 16;
    spec.groups = 4;
    auto schedule = NoiseSchedule::variance_preserving(100);
    Denoiser model(spec, 21);
    PromptEmbedding ci = embed_prompt("a red box in checkerboard", 8);
    PromptEmbedding cf = embed_prompt("a red box", 8);

    auto make_batch = [&](uint64_t seed) {
        Rng rng(seed);
        CustomizationBatch b;
        Tensor in_lat = Tensor::randn({12, 8, 8}, rng);
        Tensor aug_lat = Tensor::randn({12, 8, 8}, rng);
        b.t = 20;
        b.t_aug = 55;
        b.eps = Tensor::randn({1, 12, 8, 8}, rng);
        b.eps_aug = Tensor::randn({1, 12, 8, 8}, rng);
        b.z_t = add_noise(Latent::image(in_lat), schedule, b.t, b.eps).data;
        b.z_aug_t = add_noise(Latent::image(aug_lat), schedule, b.t_aug, b.eps_aug).data;
        b.c_input = &ci;
        b.c_fg = &cf;
        b.latent_mask = Mask(8, 8, false);
        for (int64_t y = 2; y < 7; y++) {
            for (int64_t x = 1; x < 5; x++) b.latent_mask.at(y, x) = 1;
        }
        return b;
    };

    // affinity in lambda
    CustomizationBatch b = make_batch(31);
    double l0 = customization_loss(model, schedule, b, 0.0)->val[0];
    double l1 = customization_loss(model, schedule, b, 1.0)->val[0];
    double l2 = customization_loss(model, schedule, b, 2.0)->val[0];
    double affinity = std::abs((l2 - l1) - (l1 - l0));
    ACCEPT(affinity < 1e-9, "affinity defect " + fmt(affinity));

    // masked locality under random target perturbations
    Rng prng(37);
    for (int trial = 0; trial < 10; trial++) {
        CustomizationBatch pb = make_batch(40 + static_cast<uint64_t>(trial));
        double before = customization_loss(model, schedule, pb, 1.3)->val[0];
        int64_t hw = 64;
        for (int64_t c = 0; c < 12; c++) {
            for (int64_t p = 0; p < hw; p++) {
                if (!pb.latent_mask.v[static_cast<size_t>(p)]) {
                    pb.eps_aug[c * hw + p] += prng.normal() * 5.0;
                }
            }
        }
        double after = customization_loss(model, schedule, pb, 1.3)->val[0];
        ACCEPT(before == after, "mask locality violated: " + fmt(before) + " vs " + fmt(after));
    }

    // analytic zero-predictor value
    Denoiser zero_model(spec, 22);
    zero_model.find_param("out.conv.w")->val =
        Tensor::zeros(zero_model.find_param("out.conv.w")->val.shape);
    zero_model.find_param("out.conv.b")->val = Tensor::zeros({12});
    CustomizationBatch zb = make_batch(51);
    double lambda = 1.7;
    double loss = customization_loss(zero_model, schedule, zb, lambda)->val[0];
    double term_input = mean(hadamard(zb.eps, zb.eps));
    double term_aug = 0.0;
    int64_t cnt = 0;
    for (int64_t c = 0; c < 12; c++) {
        for (int64_t p = 0; p < 64; p++) {
            if (zb.latent_mask.v[static_cast<size_t>(p)]) {
                term_aug += zb.eps_aug[c * 64 + p] * zb.eps_aug[c * 64 + p];
                cnt++;
            }
        }
    }
    term_aug /= static_cast<double>(cnt);
    double analytic_err = std::abs(loss - (term_input + lambda * term_aug));
    ACCEPT(analytic_err < 1e-9, "zero-predictor analytic " + fmt(analytic_err));

    // gradient vs central finite differences on adapter entries
    auto adapter = make_lora_adapter(model, 3, 42);
    Rng brng(43);
    for (auto& [name, e] : adapter->entries) {
        e.B->val = Tensor::randn(e.B->val.shape, brng, 0.05);
    }
    model.attach_lora(adapter);
    adapter->set_trainable(true);
    CustomizationBatch gb = make_batch(61);
    auto loss_fn = [&]() { return customization_loss(model, schedule, gb, 1.0); };
    ad::Value lv = loss_fn();
    ad::backward(lv);
    Rng pick(45);
    double worst_fd = 0.0;
    int checked = 0;
    for (const auto& [name, e] : adapter->entries) {
        if (checked >= 4) break;
        for (ad::Value p : {e.A, e.B}) {
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
            worst_fd = std::max(worst_fd, std::abs(fd - an) / denom);
        }
        checked++;
    }
    model.detach_lora();
    ACCEPT(worst_fd < 1e-4, "gradient vs finite differences " + fmt(worst_fd));
    return "affinity " + fmt(affinity) + "; locality exact; analytic " + fmt(analytic_err) +
           "; grad fd " + fmt(worst_fd);
}

// 4. Eq. 2 suite
std::string crit4() {
    Rng rng(2);

    // n = 1: Eq. 2 equals standard attention (independent hand evaluation)
    Tensor q = Tensor::randn({5, 4}, rng);
    Tensor k = Tensor::randn({5, 4}, rng);
    Tensor v = Tensor::randn({5, 4}, rng);
    Tensor ext = extended_attention({q, k, v});
    double worst_n1 = 0.0;
    for (int64_t i = 0; i < 5; i++) {
        std::vector<double> row(5);
        double mx = -1e300;
        for (int64_t j = 0; j < 5; j++) {
            double sc = 0.0;
            for (int64_t d = 0; d < 4; d++) sc += q.at2(i, d) * k.at2(j, d);
            row[static_cast<size_t>(j)] = sc / 2.0;
            mx = std::max(mx, row[static_cast<size_t>(j)]);
        }
        double zsum = 0.0;
        for (auto& x : row) {
            x = std::exp(x - mx);
            zsum += x;
        }
        for (int64_t d = 0; d < 4; d++) {
            double expect = 0.0;
            for (int64_t j = 0; j < 5; j++) expect += row[static_cast<size_t>(j)] / zsum * v.at2(j, d);
            worst_n1 = std::max(worst_n1, std::abs(ext.at2(i, d) - expect));
        }
    }
    ACCEPT(worst_n1 < 1e-12, "n=1 reduction " + fmt(worst_n1));

    // duplicated keys/values renormalize
    Tensor k2({10, 4}), v2({10, 4});
    std::memcpy(k2.ptr(), k.ptr(), 20 * sizeof(double));
    std::memcpy(k2.ptr() + 20, k.ptr(), 20 * sizeof(double));
    std::memcpy(v2.ptr(), v.ptr(), 20 * sizeof(double));
    std::memcpy(v2.ptr() + 20, v.ptr(), 20 * sizeof(double));
    Tensor dup = extended_attention({q, k2, v2});
    double dup_err = max_abs_diff(ext, dup);
    ACCEPT(dup_err < 1e-6, "duplication identity " + fmt(dup_err));

    // scalar brute-force oracle
    Tensor sq({1, 1}), sk({3, 1}), sv({3, 1});
    sq[0] = 0.8;
    sk[0] = 0.5;
    sk[1] = -1.0;
    sk[2] = 2.0;
    sv[0] = 1.0;
    sv[1] = 2.0;
    sv[2] = 3.0;
    double s0 = std::exp(0.4), s1 = std::exp(-0.8), s2 = std::exp(1.6);
    double expect = (s0 + 2 * s1 + 3 * s2) / (s0 + s1 + s2);
    double scalar_err = std::abs(extended_attention({sq, sk, sv})[0] - expect);
    ACCEPT(scalar_err < 1e-6, "scalar oracle " + fmt(scalar_err));

    // softmax rows sum to 1: with v = ones, the output must be ones
    Tensor ones_v = Tensor::ones({10, 4});
    Tensor qa = Tensor::randn({7, 4}, rng);
    Tensor ka = Tensor::randn({10, 4}, rng);
    Tensor row_sums = extended_attention({qa, ka, ones_v});
    double worst_rows = 0.0;
    for (int64_t i = 0; i < row_sums.numel(); i++) {
        worst_rows = std::max(worst_rows, std::abs(row_sums[i] - 1.0));
    }
    ACCEPT(worst_rows < 1e-6, "softmax row sums " + fmt(worst_rows));
    return "n=1 " + fmt(worst_n1) + "; dup " + fmt(dup_err) + "; scalar " + fmt(scalar_err) +
           "; rows " + fmt(worst_rows);
}

// 5. injection contract
std::string crit5() {
    DenoiserSpec spec;
    spec.latent_channels = 12;
    spec.latent_h = 8;
    spec.latent_w = 8;
    spec.widths = {8, 12};
    spec.context_dim = 8;
    spec.time_embed_dim = 16;
    spec.groups = 4;
    Denoiser model(spec, 77);
    ControlEncoder control(spec, 78);
    auto schedule = NoiseSchedule::variance_preserving(100);
    PromptEmbedding prompt = embed_prompt("a red box in checkerboard", 8);

    SceneAnimation scene = bundled_scene(2);
    auto packs = render_animation(scene, 16, 16);
    std::vector<const GuidancePack*> pp = {&packs[0], &packs[1]};
    std::vector<int64_t> idx = {0, 8};

    KeyframeGenConfig base_cfg;
    base_cfg.steps = 10;
    base_cfg.injection.conv_taps.clear();
    base_cfg.injection.sa_taps.clear();
    KeyframeSet plain = generate_keyframes(pp, idx, model, &control, prompt, schedule, base_cfg);

    // tau = 1 everywhere: bitwise no-op
    KeyframeGenConfig gated = base_cfg;
    gated.injection.tau_conv = 1.0;
    gated.injection.tau_sa = 1.0;
    gated.injection.conv_taps = spec.up_conv_tap_ids();
    gated.injection.sa_taps = spec.up_sa_tap_ids();
    KeyframeSet hooked = generate_keyframes(pp, idx, model, &control, prompt, schedule, gated);
    for (size_t i = 0; i < plain.frames.size(); i++) {
        ACCEPT(bitwise_equal(plain.frames[i], hooked.frames[i]), "tau=1 not a bitwise no-op");
    }

    // all-invisible masks: bitwise no-op
    Camera cam = Camera::look_at({0, 1, -2}, {0, 0, 0}, {0, 1, 0}, 1.0, 1.0, 0.05, 10.0);
    GuidancePack e1 = rasterize({}, cam, 16, 16);
    GuidancePack e2 = e1;
    std::vector<const GuidancePack*> empties = {&e1, &e2};
    KeyframeGenConfig inject_on = base_cfg;
    inject_on.injection.tau_conv = 0.0;
    inject_on.injection.tau_sa = 0.0;
    inject_on.injection.conv_taps = spec.up_conv_tap_ids();
    inject_on.injection.sa_taps = spec.up_sa_tap_ids();
    KeyframeSet w_inj = generate_keyframes(empties, idx, model, &control, prompt, schedule, inject_on);
    KeyframeSet wo_inj = generate_keyframes(empties, idx, model, &control, prompt, schedule, base_cfg);
    for (size_t i = 0; i < w_inj.frames.size(); i++) {
        ACCEPT(bitwise_equal(w_inj.frames[i], wo_inj.frames[i]),
               "all-invisible masks not a bitwise no-op");
    }

    // firing counts under the paper's tau values
    int64_t conv_fired = 0, sa_fired = 0, conv_expect = 0, sa_expect = 0;
    for (int steps : {10, 50}) {
        KeyframeGenConfig cc = base_cfg;
        cc.steps = steps;
        cc.extended_attention = false;
        cc.control_strength = 0.0;
        cc.injection.tau_conv = 0.4;
        cc.injection.tau_sa = 0.0;
        cc.injection.conv_taps = spec.up_conv_tap_ids();
        cc.injection.sa_taps = spec.up_sa_tap_ids();
        cc.injection.counters = std::make_shared<InjectionCounters>();
        std::vector<const GuidancePack*> one = {&packs[0]};
        generate_keyframes(one, {0}, model, nullptr, prompt, schedule, cc);
        auto grid = schedule.sample_grid(steps);
        int64_t conv_steps = 0;
        for (int j = 0; j < steps; j++) {
            if (grid[static_cast<size_t>(j)] >= 0.4 * 100) conv_steps++;
        }
        conv_fired += cc.injection.counters->conv_firings;
        sa_fired += cc.injection.counters->sa_firings;
        conv_expect += conv_steps * static_cast<int64_t>(spec.up_conv_tap_ids().size());
        sa_expect += static_cast<int64_t>(steps) * static_cast<int64_t>(spec.up_sa_tap_ids().size());
    }
    ACCEPT(conv_fired == conv_expect, "conv firings " + std::to_string(conv_fired) + " != " +
                                          std::to_string(conv_expect));
    ACCEPT(sa_fired == sa_expect,
           "sa firings " + std::to_string(sa_fired) + " != " + std::to_string(sa_expect));
    return "tau=1 and invisible-mask bitwise no-ops; firings conv " + std::to_string(conv_fired) +
           " sa " + std::to_string(sa_fired) + " as computed";
}

// 6. multi-view customization directional check
std::string crit6() {
    Fixture& F = fixture();
    auto views = make_multiview_samples(F.scene.foreground, 5, 2.0, 32, "a red box", 24);
    MultiViewSample heldout;
    Camera cam = novel_view_camera(F.scene.foreground, 3.14159265358979, 2.0, 32, 32);
    GuidancePack hp = rasterize({{&F.scene.foreground, RigidTransform{}, true}}, cam, 32, 32);
    heldout.image = hp.rgb;
    heldout.mask = hp.coverage_mask;
    heldout.prompt = F.fg_prompt;
    heldout.validate();

    std::vector<double> with_aug, without_aug;
    for (uint64_t seed : {101, 102, 103, 104, 105}) {
        for (double lambda : {0.0, 1.0}) {
            CustomizationConfig cc;
            cc.rank = 8;
            cc.lr = 1e-2;
            cc.steps = 400;
            cc.lambda = lambda;
            cc.seed = seed;
            train_customization(*F.image, F.packs[0].rgb, F.prompt, views, F.ischedule, cc);
            double loss = heldout_view_loss(*F.image, heldout, F.ischedule, 1, 999, 16);
            F.image->detach_lora();
            (lambda == 0.0 ? without_aug : with_aug).push_back(loss);
        }
    }
    double med1 = median(with_aug);
    double med0 = median(without_aug);
    ACCEPT(med1 < med0, "median held-out loss lambda=1 " + fmt(med1) + " !< lambda=0 " + fmt(med0));
    return "held-out 180deg loss: lambda=1 median " + fmt(med1) + " < lambda=0 median " + fmt(med0);
}

// 7. guidance directional check (keyframes + interpolation)
std::string crit7() {
    Fixture& F = fixture();
    std::vector<int64_t> idx = {0, 8, 16, 24, 32};
    std::vector<GuidancePack> kpacks;
    for (auto i : idx) kpacks.push_back(F.packs[static_cast<size_t>(i)]);
    std::vector<const GuidancePack*> kp;
    for (auto& p : kpacks) kp.push_back(&p);

    // keyframes: guided (deterministic) vs unguided over 3 init seeds
    KeyframeGenConfig gc;
    gc.steps = 30;
    gc.injection.conv_taps = F.ispec.up_conv_tap_ids();
    gc.injection.sa_taps = F.ispec.up_sa_tap_ids();
    KeyframeSet guided_kf = generate_keyframes(kp, idx, *F.image, F.ictrl.get(), F.prompt,
                                               F.ischedule, gc);
    double kf_guided = d_rmse_vs_packs(guided_kf.frames, kpacks, *F.estimator);
    std::vector<double> kf_unguided;
    for (uint64_t seed : {11, 12, 13}) {
        KeyframeGenConfig uc;
        uc.steps = 30;
        uc.use_inverted_init = false;
        uc.control_strength = 0.0;
        uc.seed = seed;
        KeyframeSet un = generate_keyframes(kp, idx, *F.image, nullptr, F.prompt, F.ischedule, uc);
        kf_unguided.push_back(d_rmse_vs_packs(un.frames, kpacks, *F.estimator));
    }
    double kf_un_med = median(kf_unguided);
    ACCEPT(kf_guided < kf_un_med,
           "keyframe D-RMSE guided " + fmt(kf_guided) + " !< unguided " + fmt(kf_un_med));

    // interpolation: guided chain vs unguided chains
    KeyframeSet render_kfs;
    render_kfs.frame_indices = idx;
    for (auto i : idx) render_kfs.frames.push_back(F.packs[static_cast<size_t>(i)].rgb);
    InterpolationConfig ic;
    ic.steps = 40;
    ic.injection.conv_taps = {"up1.res"};
    ic.injection.sa_taps = {"mid.attn", "up1.attn", "up0.attn"};
    ChainResult guided_chain = chain(render_kfs, F.packs, *F.video, F.vctrl.get(), F.prompt,
                                     F.ladder, ic);
    double in_guided = d_rmse_vs_packs(guided_chain.frames, F.packs, *F.estimator);
    std::vector<double> in_unguided;
    for (uint64_t seed : {21, 22, 23}) {
        InterpolationConfig uc;
        uc.steps = 40;
        uc.use_inverted_init = false;
        uc.control_strength = 0.0;
        uc.seed = seed;
        ChainResult un = chain(render_kfs, F.packs, *F.video, nullptr, F.prompt, F.ladder, uc);
        in_unguided.push_back(d_rmse_vs_packs(un.frames, F.packs, *F.estimator));
    }
    double in_un_med = median(in_unguided);
    ACCEPT(in_guided < in_un_med,
           "interp D-RMSE guided " + fmt(in_guided) + " !< unguided " + fmt(in_un_med));
    return "keyframes " + fmt(kf_guided) + " < " + fmt(kf_un_med) + "; interpolation " +
           fmt(in_guided) + " < " + fmt(in_un_med);
}

// 8. interpolation contracts
std::string crit8() {
    Fixture& F = fixture();
    Rng rng(5);

    // fusion convexity + exact endpoints
    Latent fwd, rev;
    fwd.data = Tensor::randn({5, 3, 4, 4}, rng);
    rev.data = Tensor::randn({5, 3, 4, 4}, rng);
    for (int64_t i = 0; i < 5; i++) {
        fwd.frame_indices.push_back(i);
        rev.frame_indices.push_back(i);
    }
    FusionWeights w = FusionWeights::linear(5);
    ACCEPT(w.alphas.front() == 0.0 && w.alphas.back() == 1.0, "alpha endpoints not exact");
    Latent fused = fuse(fwd, rev, w);
    int64_t per = fwd.data.numel() / 5;
    for (int64_t f = 0; f < 5; f++) {
        for (int64_t i = 0; i < per; i++) {
            double lo = std::min(fwd.data[f * per + i], rev.data[f * per + i]);
            double hi = std::max(fwd.data[f * per + i], rev.data[f * per + i]);
            ACCEPT(fused.data[f * per + i] >= lo && fused.data[f * per + i] <= hi,
                   "fusion convexity violated");
        }
    }
    ACCEPT(bitwise_equal(Tensor(std::vector<int64_t>{per},
                                std::vector<double>(fused.data.data.begin(),
                                                    fused.data.data.begin() + per)),
                         Tensor(std::vector<int64_t>{per},
                                std::vector<double>(fwd.data.data.begin(),
                                                    fwd.data.data.begin() + per))),
           "frame 0 not exactly the forward branch");

    // trained video model EDM round trip (25 steps)
    {
        std::vector<const GuidancePack*> seg;
        std::vector<int64_t> idx;
        for (int i = 0; i < 6; i++) {
            seg.push_back(&F.packs[static_cast<size_t>(i)]);
            idx.push_back(i);
        }
        Latent z;
        Tensor lat0 = to_model_space(encode_image(seg[0]->rgb, 1));
        z.data = Tensor({6, lat0.shape[0], lat0.shape[1], lat0.shape[2]});
        for (int f = 0; f < 6; f++) {
            Tensor lat = to_model_space(encode_image(seg[static_cast<size_t>(f)]->rgb, 1));
            std::memcpy(z.data.ptr() + f * lat.numel(), lat.ptr(),
                        static_cast<size_t>(lat.numel()) * sizeof(double));
            z.frame_indices.push_back(f);
        }
        Tensor depths({6, 1, 32, 32});
        for (int f = 0; f < 6; f++) {
            Tensor din = control_depth_input(seg[static_cast<size_t>(f)]->depth);
            std::memcpy(depths.ptr() + f * din.numel(), din.ptr(),
                        static_cast<size_t>(din.numel()) * sizeof(double));
        }
        ControlResidualSet ctrl = F.vctrl->encode(depths);
        DenoiserFn fn = [&](const Tensor& zz, const DenoiseCall& call) {
            Denoiser::Inputs in;
            in.prompt = &F.prompt;
            in.image_cond = &lat0;
            in.control = &ctrl;
            return F.video->denoise(zz, noise_position(F.ladder, call.step_index), call, in);
        };
        auto [z_inv, trace] = edm_invert(z, fn, F.ladder, 25);
        Latent back = edm_sample(z_inv, fn, F.ladder, 25);
        double rt = relative_error(back.data, z.data);
        ACCEPT(rt < 1e-1, "video 25-step round trip " + fmt(rt));
    }

    // static segment reproduces the shared keyframe
    double worst_ssim = 1.0;
    {
        const GuidancePack& pack = F.packs[0];
        std::vector<const GuidancePack*> seg(5, &pack);
        std::vector<int64_t> idx = {0, 1, 2, 3, 4};
        InterpolationConfig ic;
        ic.steps = 40;
        ic.injection.conv_taps = F.vspec.up_conv_tap_ids();
        for (const auto& tap : F.vspec.declared_taps()) {
            if (tap.kind == TapKind::SelfAttention) ic.injection.sa_taps.push_back(tap.id);
        }
        auto frames = interpolate(pack.rgb, pack.rgb, seg, idx, *F.video, F.vctrl.get(), F.prompt,
                                  F.ladder, ic);
        for (const auto& f : frames) worst_ssim = std::min(worst_ssim, ssim(f, pack.rgb));
        ACCEPT(worst_ssim >= 0.95, "static-segment SSIM " + fmt(worst_ssim));
    }

    // 61-frame chain of 4 segments on the 16-frame model, segment isolation
    {
        SceneAnimation long_scene = bundled_scene(61);
        auto packs61 = render_animation(long_scene, 32, 32);
        KeyframeSet kfs;
        kfs.frame_indices = {0, 15, 30, 45, 60};
        for (auto i : kfs.frame_indices) kfs.frames.push_back(packs61[static_cast<size_t>(i)].rgb);
        InterpolationConfig ic;
        ic.steps = 25;
        ic.injection.conv_taps = {"up1.res"};
        ic.injection.sa_taps = {"mid.attn", "up1.attn", "up0.attn"};
        ChainResult res = chain(kfs, packs61, *F.video, F.vctrl.get(), F.prompt, F.ladder, ic);
        ACCEPT(res.frames.size() == 61, "chain length " + std::to_string(res.frames.size()) +
                                            " != 61");
        ACCEPT(res.segment_hashes.size() == 4, "expected 4 segments");

        // regenerating segment 2 in isolation reproduces its hash exactly
        std::vector<const GuidancePack*> seg;
        std::vector<int64_t> idx;
        for (int64_t i = 30; i <= 45; i++) {
            seg.push_back(&packs61[static_cast<size_t>(i)]);
            idx.push_back(i);
        }
        auto remade = interpolate(kfs.frames[2], kfs.frames[3], seg, idx, *F.video, F.vctrl.get(),
                                  F.prompt, F.ladder, ic);
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& fr : remade) {
            uint64_t fh = tensor_hash(fr);
            h = fnv1a64(&fh, sizeof(fh), h);
        }
        ACCEPT(h == res.segment_hashes[2], "segment regeneration hash mismatch");
    }
    return "convexity + exact endpoints; video round trip ok; static SSIM " + fmt(worst_ssim) +
           "; 61-frame chain with isolated segments";
}

// 9. two-stage vs single-stage directional check. Both arms run the full
// interpolation guidance (inverted init, depth control, feature injection);
// the single-stage arm conditions each segment on the previous segment's
// last output frame, starting from the input image.
std::string crit9() {
    Fixture& F = fixture();
    std::vector<double> two_stage, single_stage;
    struct Variant {
        double orbit_deg;
        double spin;
    };
    // seed-jittered variants of the bundled scene: independent experiments
    std::vector<Variant> variants = {{50.0, 1.5707963}, {62.0, 1.92}, {38.0, 1.22}};
    for (const auto& v : variants) {
        SceneAnimation sc = bundled_scene(33, v.orbit_deg, v.spin);
        auto pk = render_animation(sc, 32, 32);
        std::vector<int64_t> idx = {0, 8, 16, 24, 32};
        std::vector<const GuidancePack*> kp;
        for (auto i : idx) kp.push_back(&pk[static_cast<size_t>(i)]);

        KeyframeGenConfig kg;
        kg.steps = 30;
        kg.injection.conv_taps = F.ispec.up_conv_tap_ids();
        kg.injection.sa_taps = F.ispec.up_sa_tap_ids();
        KeyframeSet kfs = generate_keyframes(kp, idx, *F.image, F.ictrl.get(), F.prompt,
                                             F.ischedule, kg);

        InterpolationConfig ic;
        ic.steps = 25;
        ic.injection.conv_taps = {"up1.res"};
        ic.injection.sa_taps = {"mid.attn", "up1.attn", "up0.attn"};
        ChainResult two = chain(kfs, pk, *F.video, F.vctrl.get(), F.prompt, F.ladder, ic);
        auto single = chain_autoregressive(pk[0].rgb, idx, pk, *F.video, F.vctrl.get(), F.prompt,
                                           F.ladder, ic);
        DefaultEmbedder emb;
        two_stage.push_back(consistency(two.frames, emb));
        single_stage.push_back(consistency(single, emb));
    }
    double med2 = median(two_stage);
    double med1 = median(single_stage);
    ACCEPT(med2 > med1, "two-stage consistency median " + fmt(med2) +
                            " does not exceed single-stage median " + fmt(med1) +
                            " (see decisions ledger: the toy models lack the pretrained-prior "
                            "failure mode this directional claim rests on)");
    return "consistency: two-stage median " + fmt(med2) + " > single-stage median " + fmt(med1);
}

// 10. determinism + metric self-identities
std::string crit10() {
    // metric identities
    Rng rng(3);
    Tensor x = Tensor::uniform({24, 24, 3}, rng, 0.0, 1.0);
    double self_ssim = ssim(x, x);
    ACCEPT(std::abs(self_ssim - 1.0) < 1e-9, "ssim(x,x) " + fmt(self_ssim));

    SceneAnimation sc = bundled_scene(3);
    auto packs = render_animation(sc, 16, 16);
    ReferenceDepthEstimator ref(packs);
    std::vector<Tensor> rframes;
    for (const auto& p : packs) rframes.push_back(p.rgb);
    double self_drmse = d_rmse_vs_packs(rframes, packs, ref);
    ACCEPT(self_drmse == 0.0, "d_rmse(d,d) " + fmt(self_drmse));

    DefaultEmbedder emb;
    double self_cons = consistency({x, x, x}, emb);
    ACCEPT(std::abs(self_cons - 1.0) < 1e-6, "consistency of identical frames " + fmt(self_cons));

    // cmd_demo twice with one seed -> identical metric reports
    fs::path scene_src = fs::path(R2V_SOURCE_DIR) / "demos" / "box_orbit.scene";
    fs::path cfg_src = fs::path(R2V_SOURCE_DIR) / "demos" / "demo_config.json";
    ACCEPT(fs::exists(scene_src) && fs::exists(cfg_src), "bundled demo files missing");

    auto run_demo = [&](const std::string& tag) {
        fs::path out = fs::temp_directory_path() / ("r2v_accept_demo_" + tag);
        fs::remove_all(out);
        RunConfig cfg = RunConfig::load(cfg_src.string(), out.string(), std::nullopt, true);
        cfg.doc["scene"] = scene_src.string();
        // keep the determinism check affordable: shrink the heavy stages
        cfg.doc["image_model"]["train_steps"] = 120;
        cfg.doc["video_model"]["train_steps"] = 80;
        cfg.doc["depth_estimator"]["steps"] = 80;
        cfg.doc["customization"]["steps"] = 60;
        cfg.doc["keyframes"]["steps"] = 15;
        cfg.doc["interpolation"]["steps"] = 12;
        Pipeline pipe(cfg);
        json report = pipe.cmd_demo();
        fs::remove_all(out);
        return report;
    };
    json a = run_demo("a");
    json b = run_demo("b");
    ACCEPT(a == b, "cmd_demo reports differ under one seed");
    ACCEPT(a.contains("ssim") && a.contains("d_rmse") && a.contains("consistency"),
           "report missing metric keys");
    return "demo reports identical; ssim(x,x)=1, d_rmse(d,d)=0, consistency(id)=1";
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> selected;
    for (int i = 1; i < argc; i++) selected.insert(std::atoi(argv[i]));

    struct Criterion {
        int id;
        const char* name;
        bool needs_fixture;
        std::function<std::string()> run;
    };
    std::vector<Criterion> criteria = {
        {1, "rasterizer oracle", false, crit1},
        {2, "DDIM algebra + trained round trip", true, crit2},
        {3, "Eq.1 customization loss suite", false, crit3},
        {4, "Eq.2 extended attention suite", false, crit4},
        {5, "injection contract", false, crit5},
        {6, "multi-view customization directional", true, crit6},
        {7, "guidance directional (keyframes + interpolation)", true, crit7},
        {8, "interpolation contracts", true, crit8},
        {9, "two-stage vs single-stage directional", true, crit9},
        {10, "determinism + metric identities", false, crit10},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        if (c.needs_fixture) fixture();  // shared setup, timed on its own line
        auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool pass = true;
        try {
            detail = c.run();
        } catch (const std::exception& e) {
            pass = false;
            detail = e.what();
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%s] criterion %d: %s — %s (%.1fs)\n", pass ? "PASS" : "FAIL", c.id, c.name,
                    detail.c_str(), secs);
        std::fflush(stdout);
        if (!pass) failures++;
    }
    if (failures > 0) {
        std::printf("%d criterion(s) failed\n", failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
