#pragma once

// Evaluation suite: SSIM, D-RMSE against rendered depth, and embedding-based
// consecutive-frame consistency / input-similarity scores. The embedder and
// depth estimator are pluggable; the defaults are deterministic stand-ins for
// CLIP and DepthAnything, so absolute numbers are self-consistent within this
// project rather than comparable to published scores.

#include "r2v/rasterizer.hpp"
#include "r2v/training.hpp"

namespace r2v {

// ---- embedder ----

struct Embedder {
    virtual ~Embedder() = default;
    // unit-norm feature vector; the all-zero vector when the image degenerates
    virtual Tensor embed(const Tensor& image) const = 0;
};

// Downsample to a fixed grid, flatten, zero-mean, L2-normalize.
struct DefaultEmbedder : Embedder {
    int64_t grid = 16;

    Tensor embed(const Tensor& image) const override {
        R2V_CHECK(image.ndim() == 3 && image.shape[2] == 3, "embed: image must be HxWx3");
        int64_t h = image.shape[0], w = image.shape[1];
        Tensor feat({grid * grid * 3});
        for (int64_t gy = 0; gy < grid; gy++) {
            int64_t y0 = gy * h / grid, y1 = std::max(y0 + 1, (gy + 1) * h / grid);
            for (int64_t gx = 0; gx < grid; gx++) {
                int64_t x0 = gx * w / grid, x1 = std::max(x0 + 1, (gx + 1) * w / grid);
                double acc[3] = {0, 0, 0};
                int64_t n = 0;
                for (int64_t y = y0; y < y1; y++) {
                    for (int64_t x = x0; x < x1; x++) {
                        for (int c = 0; c < 3; c++) acc[c] += image.at3(y, x, c);
                        n++;
                    }
                }
                for (int64_t c = 0; c < 3; c++) {
                    feat[(gy * grid + gx) * 3 + c] = acc[c] / static_cast<double>(n);
                }
            }
        }
        double m = mean(feat);
        for (auto& v : feat.data) v -= m;
        double n2 = norm2(feat);
        if (n2 < 1e-12) return Tensor::zeros(feat.shape);  // degenerate: constant image
        for (auto& v : feat.data) v /= n2;
        return feat;
    }
};

// ---- SSIM ----

// Standard Gaussian-window SSIM, mean over channels and valid window
// positions. Inputs in [0,1] (L = 1 by default).
inline double ssim(const Tensor& a, const Tensor& b, int window = 11, double sigma = 1.5,
                   double k1 = 0.01, double k2 = 0.03, double L = 1.0) {
    R2V_CHECK(a.same_shape(b), "ssim: shape mismatch");
    R2V_CHECK(a.ndim() == 3 && a.shape[2] == 3, "ssim: images must be HxWx3");
    R2V_CHECK(window % 2 == 1 && window >= 3, "ssim: window must be odd and >= 3");
    int64_t h = a.shape[0], w = a.shape[1];
    R2V_CHECK(h >= window && w >= window, "ssim: image smaller than window");

    std::vector<double> g(static_cast<size_t>(window));
    double gsum = 0.0;
    int half = window / 2;
    for (int i = 0; i < window; i++) {
        double d = i - half;
        g[static_cast<size_t>(i)] = std::exp(-d * d / (2 * sigma * sigma));
        gsum += g[static_cast<size_t>(i)];
    }
    for (auto& v : g) v /= gsum;

    double c1 = (k1 * L) * (k1 * L);
    double c2 = (k2 * L) * (k2 * L);
    double total = 0.0;
    int64_t count = 0;
    for (int c = 0; c < 3; c++) {
        for (int64_t y = half; y < h - half; y++) {
            for (int64_t x = half; x < w - half; x++) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (int dy = -half; dy <= half; dy++) {
                    double wy = g[static_cast<size_t>(dy + half)];
                    for (int dx = -half; dx <= half; dx++) {
                        double wgt = wy * g[static_cast<size_t>(dx + half)];
                        double va = a.at3(y + dy, x + dx, c);
                        double vb = b.at3(y + dy, x + dx, c);
                        mx += wgt * va;
                        my += wgt * vb;
                        sxx += wgt * va * va;
                        syy += wgt * vb * vb;
                        sxy += wgt * va * vb;
                    }
                }
                double vx = sxx - mx * mx;
                double vy = syy - my * my;
                double cxy = sxy - mx * my;
                double num = (2 * mx * my + c1) * (2 * cxy + c2);
                double den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
                count++;
            }
        }
    }
    return total / static_cast<double>(count);
}

// ---- depth estimators ----

struct DepthEstimator {
    virtual ~DepthEstimator() = default;
    // (H,W) nonnegative depth for an (H,W,3) image
    virtual Tensor estimate(const Tensor& image) const = 0;
};

inline std::vector<Tensor> normalize_depth_sequence(const std::vector<Tensor>& depths,
                                                    const std::vector<Mask>& coverage);

// Ground-truth lookup for rendered content: returns the stored (normalized)
// depth of the pack whose RGB matches the query bit-exactly. Generated frames
// need the learned estimator instead.
struct ReferenceDepthEstimator : DepthEstimator {
    std::map<uint64_t, Tensor> by_rgb_hash;

    explicit ReferenceDepthEstimator(const std::vector<GuidancePack>& packs) {
        std::vector<Tensor> depths;
        std::vector<Mask> cov;
        for (const auto& p : packs) {
            depths.push_back(p.depth);
            cov.push_back(p.coverage_mask);
        }
        auto norm = normalize_depth_sequence(depths, cov);
        for (size_t i = 0; i < packs.size(); i++) {
            by_rgb_hash[tensor_hash(packs[i].rgb)] = norm[i];
        }
    }

    Tensor estimate(const Tensor& image) const override {
        auto it = by_rgb_hash.find(tensor_hash(image));
        R2V_CHECK(it != by_rgb_hash.end(),
                  "reference depth estimator only knows rendered frames; use the learned estimator "
                  "for generated content");
        return it->second;
    }
};

// Tiny convolutional depth regressor trained on rasterizer (rgb, depth)
// pairs; the desk-scale DepthAnything stand-in. Input channels are RGB plus
// normalized x/y coordinates; the target is 1/(1+z) with 0 for empty pixels.
class LearnedDepthEstimator : public DepthEstimator {
public:
    explicit LearnedDepthEstimator(uint64_t seed, int64_t hidden = 16) : hidden_(hidden) {
        Rng rng(seed);
        auto conv_init = [&rng](int64_t co, int64_t ci, int64_t k) {
            return Tensor::randn({co, ci, k, k}, rng, 1.0 / std::sqrt(static_cast<double>(ci * k * k)));
        };
        add("c1.w", conv_init(hidden, 5, 3));
        add("c1.b", Tensor::zeros({hidden}));
        add("c2.w", conv_init(hidden, hidden, 3));
        add("c2.b", Tensor::zeros({hidden}));
        add("c3.w", conv_init(1, hidden, 3));
        add("c3.b", Tensor::zeros({1}));
    }

    Tensor estimate(const Tensor& image) const override {
        ad::Value out = forward(ad::constant(with_coords(image)));
        Tensor d({image.shape[0], image.shape[1]});
        for (int64_t i = 0; i < d.numel(); i++) {
            d[i] = std::min(1.0, std::max(0.0, out->val[i]));
        }
        return d;
    }

    struct FitConfig {
        double lr = 2e-3;
        int steps = 250;
        uint64_t seed = 0;
    };

    // pairs: (HxWx3 rgb, HxW normalized depth)
    void fit(const std::vector<std::pair<Tensor, Tensor>>& pairs, const FitConfig& cfg) {
        R2V_CHECK(!pairs.empty(), "depth estimator: no training pairs");
        for (const auto& [n, v] : params_) v->needs_grad = true;
        std::vector<ad::Value> plist;
        for (const auto& [n, v] : params_) plist.push_back(v);
        Adam opt(cfg.lr);
        Rng rng(derive_seed(cfg.seed, "depth-estimator"));
        for (int step = 0; step < cfg.steps; step++) {
            ad::zero_grad(plist);
            const auto& [rgb, depth] =
                pairs[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(pairs.size()) - 1))];
            ad::Value pred = forward(ad::constant(with_coords(rgb)));
            Tensor target = depth.reshaped({1, 1, depth.shape[0], depth.shape[1]});
            ad::Value loss = ad::mean_sq(ad::sub(pred, ad::constant(target)));
            if (!std::isfinite(loss->val[0])) {
                throw TrainingError("depth estimator diverged at step " + std::to_string(step));
            }
            ad::backward(loss);
            opt.step(plist);
        }
        for (const auto& [n, v] : params_) {
            v->needs_grad = false;
            v->grad = Tensor();
        }
    }

    const std::vector<std::pair<std::string, ad::Value>>& parameters() const { return params_; }

    uint64_t weights_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [n, v] : params_) {
            h = fnv1a64(n, h);
            h = fnv1a64(v->val.ptr(), static_cast<size_t>(v->val.numel()) * sizeof(double), h);
        }
        return h;
    }

private:
    int64_t hidden_;
    std::vector<std::pair<std::string, ad::Value>> params_;
    std::map<std::string, ad::Value> by_name_;

    void add(const std::string& name, Tensor t) {
        auto v = ad::param(std::move(t));
        v->needs_grad = false;
        params_.emplace_back(name, v);
        by_name_[name] = v;
    }

    ad::Value p(const std::string& n) const { return by_name_.at(n); }

    static Tensor with_coords(const Tensor& image) {
        R2V_CHECK(image.ndim() == 3 && image.shape[2] == 3, "depth estimator: image must be HxWx3");
        int64_t h = image.shape[0], w = image.shape[1];
        Tensor x({1, 5, h, w});
        for (int64_t y = 0; y < h; y++) {
            for (int64_t xx = 0; xx < w; xx++) {
                for (int c = 0; c < 3; c++) x[(static_cast<int64_t>(c) * h + y) * w + xx] = image.at3(y, xx, c);
                x[(3 * h + y) * w + xx] = static_cast<double>(xx) / std::max<int64_t>(1, w - 1);
                x[(4 * h + y) * w + xx] = static_cast<double>(y) / std::max<int64_t>(1, h - 1);
            }
        }
        return x;
    }

    ad::Value forward(ad::Value x) const {
        using namespace ad;
        Value h1 = silu(conv2d(x, p("c1.w"), p("c1.b")));
        Value h2 = silu(conv2d(h1, p("c2.w"), p("c2.b")));
        return conv2d(h2, p("c3.w"), p("c3.b"));
    }
};

// ---- depth normalization and D-RMSE ----

// Affine min-max normalization over covered pixels across the whole sequence.
inline std::vector<Tensor> normalize_depth_sequence(const std::vector<Tensor>& depths,
                                                    const std::vector<Mask>& coverage) {
    R2V_CHECK(depths.size() == coverage.size(), "normalize: count mismatch");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (size_t f = 0; f < depths.size(); f++) {
        for (int64_t i = 0; i < depths[f].numel(); i++) {
            if (!coverage[f].v[static_cast<size_t>(i)]) continue;
            lo = std::min(lo, depths[f][i]);
            hi = std::max(hi, depths[f][i]);
        }
    }
    R2V_CHECK(std::isfinite(lo), "normalize: zero coverage across sequence");
    double span = (hi > lo) ? (hi - lo) : 1.0;
    std::vector<Tensor> out;
    for (size_t f = 0; f < depths.size(); f++) {
        Tensor d(depths[f].shape);
        for (int64_t i = 0; i < d.numel(); i++) {
            d[i] = coverage[f].v[static_cast<size_t>(i)] ? (depths[f][i] - lo) / span : 0.0;
        }
        out.push_back(std::move(d));
    }
    return out;
}

// RMSE between estimated depth of `frames` and the reference depth, over
// coverage pixels only. Both the references and the estimator's outputs must
// already be normalized to [0,1] (estimators here return relative depth).
inline double d_rmse(const std::vector<Tensor>& frames, const std::vector<Tensor>& reference_depths,
                     const std::vector<Mask>& coverage, const DepthEstimator& estimator) {
    R2V_CHECK(frames.size() == reference_depths.size() && frames.size() == coverage.size(),
              "d_rmse: count mismatch");
    R2V_CHECK(!frames.empty(), "d_rmse: empty sequence");
    double acc = 0.0;
    int64_t count = 0;
    for (size_t f = 0; f < frames.size(); f++) {
        Tensor est = estimator.estimate(frames[f]);
        R2V_CHECK(est.same_shape(reference_depths[f]), "d_rmse: depth shape mismatch");
        for (int64_t i = 0; i < reference_depths[f].numel(); i++) {
            if (!coverage[f].v[static_cast<size_t>(i)]) continue;
            double d = est[i] - reference_depths[f][i];
            acc += d * d;
            count++;
        }
    }
    R2V_CHECK(count > 0, "d_rmse: zero coverage");
    return std::sqrt(acc / static_cast<double>(count));
}

// Convenience: reference depths and coverage from guidance packs, normalized
// by the module's rule.
inline double d_rmse_vs_packs(const std::vector<Tensor>& frames,
                              const std::vector<GuidancePack>& packs,
                              const DepthEstimator& estimator) {
    R2V_CHECK(frames.size() == packs.size(), "d_rmse: frame/pack count mismatch");
    std::vector<Tensor> refs;
    std::vector<Mask> cov;
    for (const auto& p : packs) {
        refs.push_back(p.depth);
        cov.push_back(p.coverage_mask);
    }
    std::vector<Tensor> refs_norm = normalize_depth_sequence(refs, cov);
    return d_rmse(frames, refs_norm, cov, estimator);
}

// ---- embedding similarities ----

inline double consistency(const std::vector<Tensor>& frames, const Embedder& embedder) {
    R2V_CHECK(frames.size() >= 2, "consistency: need at least two frames");
    double acc = 0.0;
    Tensor prev = embedder.embed(frames[0]);
    for (size_t f = 1; f < frames.size(); f++) {
        Tensor cur = embedder.embed(frames[f]);
        acc += dot(prev, cur);
        prev = std::move(cur);
    }
    return acc / static_cast<double>(frames.size() - 1);
}

inline double input_similarity(const std::vector<Tensor>& frames, const Tensor& input_image,
                               const Embedder& embedder) {
    R2V_CHECK(!frames.empty(), "input_similarity: empty sequence");
    Tensor ref = embedder.embed(input_image);
    double acc = 0.0;
    for (const auto& f : frames) {
        acc += dot(ref, embedder.embed(f));
    }
    return acc / static_cast<double>(frames.size());
}

}  // namespace r2v
