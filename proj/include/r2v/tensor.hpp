#pragma once

// Dense row-major double tensor. Everything in the library runs in float64 so
// gradient checks against central finite differences are meaningful.

#include "r2v/common.hpp"

#include <algorithm>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>

namespace r2v {

struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }

    Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        R2V_CHECK(static_cast<int64_t>(data.size()) == numel_of(shape), "tensor: data size does not match shape");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            R2V_CHECK(d >= 0, "tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    double& at2(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    double at2(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
    double& at3(int64_t i, int64_t j, int64_t k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    double at3(int64_t i, int64_t j, int64_t k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    double& at4(int64_t i, int64_t j, int64_t k, int64_t l) {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    double at4(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int64_t> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor ones(std::vector<int64_t> s) { return full(std::move(s), 1.0); }

    static Tensor randn(std::vector<int64_t> s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.data) {
            v = rng.normal() * stddev;
        }
        return t;
    }

    static Tensor uniform(std::vector<int64_t> s, Rng& rng, double lo, double hi) {
        Tensor t(std::move(s));
        for (auto& v : t.data) {
            v = rng.uniform(lo, hi);
        }
        return t;
    }

    Tensor reshaped(std::vector<int64_t> s) const {
        R2V_CHECK(numel_of(s) == numel(), "reshape: element count mismatch");
        return Tensor(std::move(s), data);
    }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < shape.size(); i++) {
            os << shape[i] << (i + 1 < shape.size() ? "," : "");
        }
        os << ")";
        return os.str();
    }
};

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    R2V_CHECK(a.same_shape(b), "tensor add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); i++) {
        out[i] += b[i];
    }
    return out;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
    R2V_CHECK(a.same_shape(b), "tensor sub: shape mismatch");
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); i++) {
        out[i] -= b[i];
    }
    return out;
}

inline Tensor operator*(const Tensor& a, double s) {
    Tensor out = a;
    for (auto& v : out.data) {
        v *= s;
    }
    return out;
}

inline Tensor operator*(double s, const Tensor& a) { return a * s; }

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    R2V_CHECK(a.same_shape(b), "hadamard: shape mismatch");
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); i++) {
        out[i] *= b[i];
    }
    return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
    R2V_CHECK(a.same_shape(b), "dot: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); i++) {
        s += a[i] * b[i];
    }
    return s;
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double mean(const Tensor& a) {
    R2V_CHECK(a.numel() > 0, "mean of empty tensor");
    double s = 0.0;
    for (double v : a.data) {
        s += v;
    }
    return s / static_cast<double>(a.numel());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    R2V_CHECK(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); i++) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

// ||a - b|| / max(||b||, eps)
inline double relative_error(const Tensor& a, const Tensor& b, double eps = 1e-12) {
    R2V_CHECK(a.same_shape(b), "relative_error: shape mismatch");
    double num = 0.0;
    double den = 0.0;
    for (int64_t i = 0; i < a.numel(); i++) {
        double d = a[i] - b[i];
        num += d * d;
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), eps);
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        return false;
    }
    return std::memcmp(a.ptr(), b.ptr(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

inline uint64_t tensor_hash(const Tensor& t) {
    uint64_t h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int64_t));
    return fnv1a64(t.ptr(), static_cast<size_t>(t.numel()) * sizeof(double), h);
}

// 2D boolean grid used for coverage / foreground / visibility masks.
struct Mask {
    int64_t h = 0;
    int64_t w = 0;
    std::vector<uint8_t> v;

    Mask() = default;
    Mask(int64_t h_, int64_t w_, bool init = false)
        : h(h_), w(w_), v(static_cast<size_t>(h_ * w_), init ? 1 : 0) {}

    uint8_t& at(int64_t y, int64_t x) { return v[static_cast<size_t>(y * w + x)]; }
    uint8_t at(int64_t y, int64_t x) const { return v[static_cast<size_t>(y * w + x)]; }

    int64_t count_true() const {
        int64_t n = 0;
        for (uint8_t b : v) {
            n += b ? 1 : 0;
        }
        return n;
    }

    Mask operator~() const {
        Mask out(h, w);
        for (size_t i = 0; i < v.size(); i++) {
            out.v[i] = v[i] ? 0 : 1;
        }
        return out;
    }

    bool operator==(const Mask& o) const { return h == o.h && w == o.w && v == o.v; }

    // true iff this is a subset of o
    bool subset_of(const Mask& o) const {
        R2V_CHECK(h == o.h && w == o.w, "mask subset: shape mismatch");
        for (size_t i = 0; i < v.size(); i++) {
            if (v[i] && !o.v[i]) {
                return false;
            }
        }
        return true;
    }
};

// Area-average then threshold at 0.5; the fixed rule for bringing pixel-space
// masks down to latent or tap resolution.
inline Mask downsample_mask(const Mask& m, int64_t oh, int64_t ow) {
    R2V_CHECK(oh > 0 && ow > 0, "downsample_mask: bad target size");
    Mask out(oh, ow);
    for (int64_t y = 0; y < oh; y++) {
        int64_t y0 = y * m.h / oh;
        int64_t y1 = std::max(y0 + 1, (y + 1) * m.h / oh);
        for (int64_t x = 0; x < ow; x++) {
            int64_t x0 = x * m.w / ow;
            int64_t x1 = std::max(x0 + 1, (x + 1) * m.w / ow);
            int64_t total = 0;
            int64_t on = 0;
            for (int64_t yy = y0; yy < y1; yy++) {
                for (int64_t xx = x0; xx < x1; xx++) {
                    total++;
                    on += m.at(yy, xx) ? 1 : 0;
                }
            }
            out.at(y, x) = (2 * on >= total) ? 1 : 0;
        }
    }
    return out;
}

}  // namespace r2v
