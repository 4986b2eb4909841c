#pragma once

// Reverse-mode autodiff over Tensor. Graphs are built per call and freed when
// the last Value handle drops; ops whose inputs all have needs_grad == false
// skip tape bookkeeping, so inference pays only for the forward math.

#include "r2v/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>

namespace r2v {
namespace ad {

struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    std::vector<Value> parents;
    std::function<void(Node&)> back;

    void ensure_grad() {
        if (grad.shape != val.shape) {
            grad = Tensor::zeros(val.shape);
        }
    }
};

inline Value constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    return n;
}

inline Value param(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->needs_grad = true;
    return n;
}

inline Value make_op(Tensor out, std::vector<Value> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(out);
    for (const auto& p : parents) {
        if (p->needs_grad) {
            n->needs_grad = true;
            break;
        }
    }
    if (n->needs_grad) {
        n->parents = std::move(parents);
        n->back = std::move(back);
    }
    return n;
}

// Topological backward from a scalar root.
inline void backward(const Value& root) {
    R2V_CHECK(root->val.numel() == 1, "backward: root must be scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            idx++;
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) {
        n->ensure_grad();
    }
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->back) {
            for (auto& p : n->parents) {
                if (p->needs_grad) {
                    p->ensure_grad();
                }
            }
            n->back(*n);
        }
    }
}

inline void zero_grad(const std::vector<Value>& params) {
    for (const auto& p : params) {
        p->grad = Tensor();
    }
}

// ---- elementwise ----

inline Value add(const Value& a, const Value& b) {
    Tensor out = a->val + b->val;
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            for (int64_t i = 0; i < n.grad.numel(); i++) a->grad[i] += n.grad[i];
        }
        if (b->needs_grad) {
            for (int64_t i = 0; i < n.grad.numel(); i++) b->grad[i] += n.grad[i];
        }
    });
}

inline Value sub(const Value& a, const Value& b) {
    Tensor out = a->val - b->val;
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            for (int64_t i = 0; i < n.grad.numel(); i++) a->grad[i] += n.grad[i];
        }
        if (b->needs_grad) {
            for (int64_t i = 0; i < n.grad.numel(); i++) b->grad[i] -= n.grad[i];
        }
    });
}

inline Value mul(const Value& a, const Value& b) {
    Tensor out = hadamard(a->val, b->val);
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            for (int64_t i = 0; i < n.grad.numel(); i++) a->grad[i] += n.grad[i] * b->val[i];
        }
        if (b->needs_grad) {
            for (int64_t i = 0; i < n.grad.numel(); i++) b->grad[i] += n.grad[i] * a->val[i];
        }
    });
}

inline Value scale(const Value& a, double s) {
    Tensor out = a->val * s;
    return make_op(std::move(out), {a}, [a, s](Node& n) {
        if (a->needs_grad) {
            for (int64_t i = 0; i < n.grad.numel(); i++) a->grad[i] += n.grad[i] * s;
        }
    });
}

inline Value silu(const Value& a) {
    Tensor out = a->val;
    for (auto& v : out.data) {
        v = v / (1.0 + std::exp(-v));
    }
    return make_op(std::move(out), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        for (int64_t i = 0; i < n.grad.numel(); i++) {
            double x = a->val[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            a->grad[i] += n.grad[i] * (s * (1.0 + x * (1.0 - s)));
        }
    });
}

// out = mask ? a : b, elementwise. Grads route through the selected branch.
inline Value select_blend(const std::vector<uint8_t>& mask, const Value& a, const Value& b) {
    R2V_CHECK(a->val.same_shape(b->val), "select_blend: shape mismatch");
    R2V_CHECK(static_cast<int64_t>(mask.size()) == a->val.numel(), "select_blend: mask size mismatch");
    Tensor out = b->val;
    for (int64_t i = 0; i < out.numel(); i++) {
        if (mask[static_cast<size_t>(i)]) out[i] = a->val[i];
    }
    return make_op(std::move(out), {a, b}, [a, b, mask](Node& n) {
        for (int64_t i = 0; i < n.grad.numel(); i++) {
            if (mask[static_cast<size_t>(i)]) {
                if (a->needs_grad) a->grad[i] += n.grad[i];
            } else {
                if (b->needs_grad) b->grad[i] += n.grad[i];
            }
        }
    });
}

// ---- shape ----

inline Value reshape(const Value& a, std::vector<int64_t> shape) {
    Tensor out = a->val.reshaped(std::move(shape));
    return make_op(std::move(out), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        for (int64_t i = 0; i < n.grad.numel(); i++) a->grad[i] += n.grad[i];
    });
}

namespace detail {
inline std::vector<int64_t> strides_of(const std::vector<int64_t>& shape) {
    std::vector<int64_t> st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; i--) {
        st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
    }
    return st;
}
// flat index mapping for permute: out_flat -> in_flat
inline void permute_map(const std::vector<int64_t>& in_shape, const std::vector<int>& axes,
                        std::vector<int64_t>& map) {
    size_t nd = in_shape.size();
    std::vector<int64_t> out_shape(nd);
    for (size_t i = 0; i < nd; i++) out_shape[i] = in_shape[static_cast<size_t>(axes[i])];
    auto in_st = strides_of(in_shape);
    auto out_st = strides_of(out_shape);
    int64_t n = Tensor::numel_of(in_shape);
    map.resize(static_cast<size_t>(n));
    std::vector<int64_t> idx(nd, 0);
    for (int64_t o = 0; o < n; o++) {
        int64_t rem = o;
        int64_t src = 0;
        for (size_t d = 0; d < nd; d++) {
            int64_t c = rem / out_st[d];
            rem -= c * out_st[d];
            src += c * in_st[static_cast<size_t>(axes[d])];
        }
        map[static_cast<size_t>(o)] = src;
    }
}
}  // namespace detail

inline Value permute(const Value& a, const std::vector<int>& axes) {
    R2V_CHECK(axes.size() == a->val.shape.size(), "permute: axes rank mismatch");
    std::vector<int64_t> out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); i++) out_shape[i] = a->val.shape[static_cast<size_t>(axes[i])];
    auto map = std::make_shared<std::vector<int64_t>>();
    detail::permute_map(a->val.shape, axes, *map);
    Tensor out(out_shape);
    for (int64_t o = 0; o < out.numel(); o++) out[o] = a->val[(*map)[static_cast<size_t>(o)]];
    return make_op(std::move(out), {a}, [a, map](Node& n) {
        if (!a->needs_grad) return;
        for (int64_t o = 0; o < n.grad.numel(); o++) a->grad[(*map)[static_cast<size_t>(o)]] += n.grad[o];
    });
}

inline Value concat(const std::vector<Value>& xs, int dim) {
    R2V_CHECK(!xs.empty(), "concat: empty input");
    auto shape = xs[0]->val.shape;
    int nd = static_cast<int>(shape.size());
    R2V_CHECK(dim >= 0 && dim < nd, "concat: bad dim");
    int64_t total = 0;
    for (const auto& x : xs) {
        R2V_CHECK(static_cast<int>(x->val.shape.size()) == nd, "concat: rank mismatch");
        for (int d = 0; d < nd; d++) {
            if (d != dim) {
                R2V_CHECK(x->val.shape[static_cast<size_t>(d)] == shape[static_cast<size_t>(d)],
                          "concat: shape mismatch off-dim");
            }
        }
        total += x->val.shape[static_cast<size_t>(dim)];
    }
    auto out_shape = shape;
    out_shape[static_cast<size_t>(dim)] = total;

    // outer = product of dims before `dim`, inner = product after
    int64_t outer = 1;
    for (int d = 0; d < dim; d++) outer *= shape[static_cast<size_t>(d)];
    int64_t inner = 1;
    for (int d = dim + 1; d < nd; d++) inner *= shape[static_cast<size_t>(d)];

    Tensor out(out_shape);
    int64_t out_row = total * inner;
    int64_t off = 0;
    for (const auto& x : xs) {
        int64_t len = x->val.shape[static_cast<size_t>(dim)] * inner;
        for (int64_t r = 0; r < outer; r++) {
            std::memcpy(out.ptr() + r * out_row + off, x->val.ptr() + r * len,
                        static_cast<size_t>(len) * sizeof(double));
        }
        off += len;
    }
    std::vector<Value> parents = xs;
    return make_op(std::move(out), parents, [parents, outer, inner, out_row](Node& n) {
        int64_t off2 = 0;
        for (const auto& x : parents) {
            int64_t len = x->val.numel() / std::max<int64_t>(outer, 1);
            if (x->needs_grad) {
                for (int64_t r = 0; r < outer; r++) {
                    const double* g = n.grad.ptr() + r * out_row + off2;
                    double* dst = x->grad.ptr() + r * len;
                    for (int64_t i = 0; i < len; i++) dst[i] += g[i];
                }
            }
            off2 += len;
        }
    });
}

inline Value slice(const Value& a, int dim, int64_t start, int64_t len) {
    const auto& shape = a->val.shape;
    int nd = static_cast<int>(shape.size());
    R2V_CHECK(dim >= 0 && dim < nd, "slice: bad dim");
    R2V_CHECK(start >= 0 && len >= 0 && start + len <= shape[static_cast<size_t>(dim)], "slice: out of range");
    auto out_shape = shape;
    out_shape[static_cast<size_t>(dim)] = len;
    int64_t outer = 1;
    for (int d = 0; d < dim; d++) outer *= shape[static_cast<size_t>(d)];
    int64_t inner = 1;
    for (int d = dim + 1; d < nd; d++) inner *= shape[static_cast<size_t>(d)];
    int64_t in_row = shape[static_cast<size_t>(dim)] * inner;
    int64_t out_row = len * inner;
    Tensor out(out_shape);
    for (int64_t r = 0; r < outer; r++) {
        std::memcpy(out.ptr() + r * out_row, a->val.ptr() + r * in_row + start * inner,
                    static_cast<size_t>(out_row) * sizeof(double));
    }
    return make_op(std::move(out), {a}, [a, outer, in_row, out_row, start, inner](Node& n) {
        if (!a->needs_grad) return;
        for (int64_t r = 0; r < outer; r++) {
            const double* g = n.grad.ptr() + r * out_row;
            double* dst = a->grad.ptr() + r * in_row + start * inner;
            for (int64_t i = 0; i < out_row; i++) dst[i] += g[i];
        }
    });
}

// ---- linear algebra ----

namespace detail {
// c (m,n) += a (m,k) * b (k,n)
inline void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; i++) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t p = 0; p < k; p++) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (int64_t j = 0; j < n; j++) crow[j] += av * brow[j];
        }
    }
}
// c (m,n) += a (m,k) * b^T where b is (n,k)
inline void gemm_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; i++) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t j = 0; j < n; j++) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (int64_t p = 0; p < k; p++) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}
// c (m,n) += a^T * b where a is (k,m), b is (k,n)
inline void gemm_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < k; p++) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (int64_t i = 0; i < m; i++) {
            double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; j++) crow[j] += av * brow[j];
        }
    }
}
}  // namespace detail

// a (m,k) x b (k,n) -> (m,n)
inline Value matmul(const Value& a, const Value& b) {
    R2V_CHECK(a->val.ndim() == 2 && b->val.ndim() == 2, "matmul: need 2D");
    int64_t m = a->val.shape[0], k = a->val.shape[1], n = b->val.shape[1];
    R2V_CHECK(b->val.shape[0] == k, "matmul: inner dim mismatch");
    Tensor out({m, n});
    detail::gemm_acc(a->val.ptr(), b->val.ptr(), out.ptr(), m, k, n);
    return make_op(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
        if (a->needs_grad) detail::gemm_nt_acc(nd.grad.ptr(), b->val.ptr(), a->grad.ptr(), m, n, k);
        if (b->needs_grad) detail::gemm_tn_acc(a->val.ptr(), nd.grad.ptr(), b->grad.ptr(), k, m, n);
    });
}

// y = x (N,in) * w^T (out,in) + bias(out). Token-wise dense layer.
inline Value linear(const Value& x, const Value& w, const Value& b) {
    R2V_CHECK(x->val.ndim() == 2 && w->val.ndim() == 2, "linear: need 2D");
    int64_t N = x->val.shape[0], in = x->val.shape[1], out_dim = w->val.shape[0];
    R2V_CHECK(w->val.shape[1] == in, "linear: weight in-dim mismatch");
    bool has_bias = b != nullptr;
    if (has_bias) {
        R2V_CHECK(b->val.numel() == out_dim, "linear: bias dim mismatch");
    }
    Tensor out({N, out_dim});
    detail::gemm_nt_acc(x->val.ptr(), w->val.ptr(), out.ptr(), N, in, out_dim);
    if (has_bias) {
        for (int64_t i = 0; i < N; i++) {
            for (int64_t j = 0; j < out_dim; j++) out.at2(i, j) += b->val[j];
        }
    }
    std::vector<Value> parents = has_bias ? std::vector<Value>{x, w, b} : std::vector<Value>{x, w};
    return make_op(std::move(out), parents, [x, w, b, has_bias, N, in, out_dim](Node& n) {
        if (x->needs_grad) detail::gemm_acc(n.grad.ptr(), w->val.ptr(), x->grad.ptr(), N, out_dim, in);
        if (w->needs_grad) detail::gemm_tn_acc(n.grad.ptr(), x->val.ptr(), w->grad.ptr(), out_dim, N, in);
        if (has_bias && b->needs_grad) {
            for (int64_t i = 0; i < N; i++) {
                for (int64_t j = 0; j < out_dim; j++) b->grad[j] += n.grad.at2(i, j);
            }
        }
    });
}

inline Value linear_nobias(const Value& x, const Value& w) { return linear(x, w, nullptr); }

// batched matmul: a (B,m,k) x b (B,k,n) -> (B,m,n)
inline Value bmm(const Value& a, const Value& b) {
    R2V_CHECK(a->val.ndim() == 3 && b->val.ndim() == 3, "bmm: need 3D");
    int64_t B = a->val.shape[0], m = a->val.shape[1], k = a->val.shape[2], n = b->val.shape[2];
    R2V_CHECK(b->val.shape[0] == B && b->val.shape[1] == k, "bmm: shape mismatch");
    Tensor out({B, m, n});
    for (int64_t i = 0; i < B; i++) {
        detail::gemm_acc(a->val.ptr() + i * m * k, b->val.ptr() + i * k * n, out.ptr() + i * m * n, m, k, n);
    }
    return make_op(std::move(out), {a, b}, [a, b, B, m, k, n](Node& nd) {
        for (int64_t i = 0; i < B; i++) {
            if (a->needs_grad) {
                detail::gemm_nt_acc(nd.grad.ptr() + i * m * n, b->val.ptr() + i * k * n,
                                    a->grad.ptr() + i * m * k, m, n, k);
            }
            if (b->needs_grad) {
                detail::gemm_tn_acc(a->val.ptr() + i * m * k, nd.grad.ptr() + i * m * n,
                                    b->grad.ptr() + i * k * n, k, m, n);
            }
        }
    });
}

inline Value softmax_lastdim(const Value& a) {
    const auto& shape = a->val.shape;
    int64_t cols = shape.back();
    int64_t rows = a->val.numel() / cols;
    Tensor out = a->val;
    for (int64_t r = 0; r < rows; r++) {
        double* p = out.ptr() + r * cols;
        double mx = p[0];
        for (int64_t j = 1; j < cols; j++) mx = std::max(mx, p[j]);
        double s = 0.0;
        for (int64_t j = 0; j < cols; j++) {
            p[j] = std::exp(p[j] - mx);
            s += p[j];
        }
        for (int64_t j = 0; j < cols; j++) p[j] /= s;
    }
    return make_op(std::move(out), {a}, [a, rows, cols](Node& n) {
        if (!a->needs_grad) return;
        for (int64_t r = 0; r < rows; r++) {
            const double* y = n.val.ptr() + r * cols;
            const double* g = n.grad.ptr() + r * cols;
            double acc = 0.0;
            for (int64_t j = 0; j < cols; j++) acc += y[j] * g[j];
            double* dst = a->grad.ptr() + r * cols;
            for (int64_t j = 0; j < cols; j++) dst[j] += y[j] * (g[j] - acc);
        }
    });
}

// ---- reductions ----

inline Value sum_all(const Value& a) {
    double s = 0.0;
    for (double v : a->val.data) s += v;
    Tensor out({1});
    out[0] = s;
    return make_op(std::move(out), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        double g = n.grad[0];
        for (int64_t i = 0; i < a->grad.numel(); i++) a->grad[i] += g;
    });
}

inline Value mean_all(const Value& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->val.numel()));
}

// mean of squared entries; the denoising-score-matching building block
inline Value mean_sq(const Value& a) {
    return mean_all(mul(a, a));
}

// ---- conv / norm / resampling ----

namespace detail {
struct ConvDims {
    int64_t N, C, H, W, Co, kh, kw, Ho, Wo;
    int stride, pad;
};
inline ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    ConvDims d;
    d.N = x.shape[0];
    d.C = x.shape[1];
    d.H = x.shape[2];
    d.W = x.shape[3];
    d.Co = w.shape[0];
    d.kh = w.shape[2];
    d.kw = w.shape[3];
    d.stride = stride;
    d.pad = pad;
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    return d;
}
inline void im2col(const double* x, const ConvDims& d, double* col) {
    // col: (C*kh*kw, Ho*Wo)
    int64_t ow = d.Ho * d.Wo;
    for (int64_t c = 0; c < d.C; c++) {
        for (int64_t ky = 0; ky < d.kh; ky++) {
            for (int64_t kx = 0; kx < d.kw; kx++) {
                double* crow = col + ((c * d.kh + ky) * d.kw + kx) * ow;
                for (int64_t oy = 0; oy < d.Ho; oy++) {
                    int64_t iy = oy * d.stride + ky - d.pad;
                    for (int64_t ox = 0; ox < d.Wo; ox++) {
                        int64_t ix = ox * d.stride + kx - d.pad;
                        double v = 0.0;
                        if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W) {
                            v = x[(c * d.H + iy) * d.W + ix];
                        }
                        crow[oy * d.Wo + ox] = v;
                    }
                }
            }
        }
    }
}
inline void col2im_acc(const double* col, const ConvDims& d, double* x) {
    int64_t ow = d.Ho * d.Wo;
    for (int64_t c = 0; c < d.C; c++) {
        for (int64_t ky = 0; ky < d.kh; ky++) {
            for (int64_t kx = 0; kx < d.kw; kx++) {
                const double* crow = col + ((c * d.kh + ky) * d.kw + kx) * ow;
                for (int64_t oy = 0; oy < d.Ho; oy++) {
                    int64_t iy = oy * d.stride + ky - d.pad;
                    if (iy < 0 || iy >= d.H) continue;
                    for (int64_t ox = 0; ox < d.Wo; ox++) {
                        int64_t ix = ox * d.stride + kx - d.pad;
                        if (ix < 0 || ix >= d.W) continue;
                        x[(c * d.H + iy) * d.W + ix] += crow[oy * d.Wo + ox];
                    }
                }
            }
        }
    }
}
}  // namespace detail

// x (N,C,H,W), w (Co,C,kh,kw), b (Co) -> (N,Co,Ho,Wo)
inline Value conv2d(const Value& x, const Value& w, const Value& b, int stride = 1, int pad = 1) {
    R2V_CHECK(x->val.ndim() == 4 && w->val.ndim() == 4, "conv2d: need 4D input and weight");
    R2V_CHECK(x->val.shape[1] == w->val.shape[1], "conv2d: channel mismatch");
    auto d = detail::conv_dims(x->val, w->val, stride, pad);
    R2V_CHECK(d.Ho > 0 && d.Wo > 0, "conv2d: empty output");
    bool has_bias = b != nullptr;
    if (has_bias) R2V_CHECK(b->val.numel() == d.Co, "conv2d: bias mismatch");

    int64_t ksz = d.C * d.kh * d.kw;
    int64_t ow = d.Ho * d.Wo;
    Tensor out({d.N, d.Co, d.Ho, d.Wo});
    std::vector<double> col(static_cast<size_t>(ksz * ow));
    for (int64_t n = 0; n < d.N; n++) {
        detail::im2col(x->val.ptr() + n * d.C * d.H * d.W, d, col.data());
        detail::gemm_acc(w->val.ptr(), col.data(), out.ptr() + n * d.Co * ow, d.Co, ksz, ow);
        if (has_bias) {
            double* o = out.ptr() + n * d.Co * ow;
            for (int64_t co = 0; co < d.Co; co++) {
                double bv = b->val[co];
                for (int64_t i = 0; i < ow; i++) o[co * ow + i] += bv;
            }
        }
    }
    std::vector<Value> parents = has_bias ? std::vector<Value>{x, w, b} : std::vector<Value>{x, w};
    return make_op(std::move(out), parents, [x, w, b, has_bias, d, ksz, ow](Node& n) {
        std::vector<double> col(static_cast<size_t>(ksz * ow));
        std::vector<double> dcol(static_cast<size_t>(ksz * ow));
        for (int64_t s = 0; s < d.N; s++) {
            const double* gy = n.grad.ptr() + s * d.Co * ow;
            if (w->needs_grad) {
                detail::im2col(x->val.ptr() + s * d.C * d.H * d.W, d, col.data());
                // dW (Co,ksz) += gy (Co,ow) * col^T (ow,ksz)
                detail::gemm_nt_acc(gy, col.data(), w->grad.ptr(), d.Co, ow, ksz);
            }
            if (x->needs_grad) {
                std::fill(dcol.begin(), dcol.end(), 0.0);
                // dcol (ksz,ow) += W^T (ksz,Co) * gy (Co,ow)
                detail::gemm_tn_acc(w->val.ptr(), gy, dcol.data(), ksz, d.Co, ow);
                detail::col2im_acc(dcol.data(), d, x->grad.ptr() + s * d.C * d.H * d.W);
            }
            if (has_bias && b->needs_grad) {
                for (int64_t co = 0; co < d.Co; co++) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < ow; i++) acc += gy[co * ow + i];
                    b->grad[co] += acc;
                }
            }
        }
    });
}

// GroupNorm over (C/groups, H, W) per sample/group, affine per channel.
inline Value group_norm(const Value& x, const Value& gamma, const Value& beta, int groups,
                        double eps = 1e-5) {
    R2V_CHECK(x->val.ndim() == 4, "group_norm: need 4D");
    int64_t N = x->val.shape[0], C = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    R2V_CHECK(C % groups == 0, "group_norm: channels not divisible by groups");
    R2V_CHECK(gamma->val.numel() == C && beta->val.numel() == C, "group_norm: affine dims");
    int64_t cg = C / groups;
    int64_t gsz = cg * H * W;

    Tensor out({N, C, H, W});
    auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(N * groups));
    auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(N * groups));
    for (int64_t n = 0; n < N; n++) {
        for (int64_t g = 0; g < groups; g++) {
            const double* p = x->val.ptr() + (n * C + g * cg) * H * W;
            double m = 0.0;
            for (int64_t i = 0; i < gsz; i++) m += p[i];
            m /= static_cast<double>(gsz);
            double var = 0.0;
            for (int64_t i = 0; i < gsz; i++) {
                double dlt = p[i] - m;
                var += dlt * dlt;
            }
            var /= static_cast<double>(gsz);
            double is = 1.0 / std::sqrt(var + eps);
            (*mu)[static_cast<size_t>(n * groups + g)] = m;
            (*istd)[static_cast<size_t>(n * groups + g)] = is;
            double* o = out.ptr() + (n * C + g * cg) * H * W;
            for (int64_t c = 0; c < cg; c++) {
                double gm = gamma->val[g * cg + c];
                double bt = beta->val[g * cg + c];
                for (int64_t i = 0; i < H * W; i++) {
                    o[c * H * W + i] = (p[c * H * W + i] - m) * is * gm + bt;
                }
            }
        }
    }
    return make_op(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, mu, istd, N, C, H, W, groups, cg, gsz](Node& n) {
        for (int64_t s = 0; s < N; s++) {
            for (int64_t g = 0; g < groups; g++) {
                const double* xp = x->val.ptr() + (s * C + g * cg) * H * W;
                const double* gp = n.grad.ptr() + (s * C + g * cg) * H * W;
                double m = (*mu)[static_cast<size_t>(s * groups + g)];
                double is = (*istd)[static_cast<size_t>(s * groups + g)];
                // accumulate per-group stats of dyhat = dy * gamma
                double sum_dyh = 0.0;
                double sum_dyh_xhat = 0.0;
                for (int64_t c = 0; c < cg; c++) {
                    double gm = gamma->val[g * cg + c];
                    for (int64_t i = 0; i < H * W; i++) {
                        double xhat = (xp[c * H * W + i] - m) * is;
                        double dyh = gp[c * H * W + i] * gm;
                        sum_dyh += dyh;
                        sum_dyh_xhat += dyh * xhat;
                        if (gamma->needs_grad) gamma->grad[g * cg + c] += gp[c * H * W + i] * xhat;
                        if (beta->needs_grad) beta->grad[g * cg + c] += gp[c * H * W + i];
                    }
                }
                if (x->needs_grad) {
                    double inv = 1.0 / static_cast<double>(gsz);
                    double* dx = x->grad.ptr() + (s * C + g * cg) * H * W;
                    for (int64_t c = 0; c < cg; c++) {
                        double gm = gamma->val[g * cg + c];
                        for (int64_t i = 0; i < H * W; i++) {
                            double xhat = (xp[c * H * W + i] - m) * is;
                            double dyh = gp[c * H * W + i] * gm;
                            dx[c * H * W + i] += is * (dyh - inv * sum_dyh - xhat * inv * sum_dyh_xhat);
                        }
                    }
                }
            }
        }
    });
}

// LayerNorm over the last dim, affine.
inline Value layer_norm(const Value& x, const Value& gamma, const Value& beta, double eps = 1e-5) {
    int64_t cols = x->val.shape.back();
    int64_t rows = x->val.numel() / cols;
    R2V_CHECK(gamma->val.numel() == cols && beta->val.numel() == cols, "layer_norm: affine dims");
    Tensor out(x->val.shape);
    auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; r++) {
        const double* p = x->val.ptr() + r * cols;
        double m = 0.0;
        for (int64_t j = 0; j < cols; j++) m += p[j];
        m /= static_cast<double>(cols);
        double var = 0.0;
        for (int64_t j = 0; j < cols; j++) {
            double dlt = p[j] - m;
            var += dlt * dlt;
        }
        var /= static_cast<double>(cols);
        double is = 1.0 / std::sqrt(var + eps);
        (*mu)[static_cast<size_t>(r)] = m;
        (*istd)[static_cast<size_t>(r)] = is;
        double* o = out.ptr() + r * cols;
        for (int64_t j = 0; j < cols; j++) o[j] = (p[j] - m) * is * gamma->val[j] + beta->val[j];
    }
    return make_op(std::move(out), {x, gamma, beta}, [x, gamma, beta, mu, istd, rows, cols](Node& n) {
        for (int64_t r = 0; r < rows; r++) {
            const double* xp = x->val.ptr() + r * cols;
            const double* gp = n.grad.ptr() + r * cols;
            double m = (*mu)[static_cast<size_t>(r)];
            double is = (*istd)[static_cast<size_t>(r)];
            double sum_dyh = 0.0, sum_dyh_xhat = 0.0;
            for (int64_t j = 0; j < cols; j++) {
                double xhat = (xp[j] - m) * is;
                double dyh = gp[j] * gamma->val[j];
                sum_dyh += dyh;
                sum_dyh_xhat += dyh * xhat;
                if (gamma->needs_grad) gamma->grad[j] += gp[j] * xhat;
                if (beta->needs_grad) beta->grad[j] += gp[j];
            }
            if (x->needs_grad) {
                double inv = 1.0 / static_cast<double>(cols);
                double* dx = x->grad.ptr() + r * cols;
                for (int64_t j = 0; j < cols; j++) {
                    double xhat = (xp[j] - m) * is;
                    double dyh = gp[j] * gamma->val[j];
                    dx[j] += is * (dyh - inv * sum_dyh - xhat * inv * sum_dyh_xhat);
                }
            }
        }
    });
}

inline Value upsample_nearest2x(const Value& x) {
    R2V_CHECK(x->val.ndim() == 4, "upsample: need 4D");
    int64_t N = x->val.shape[0], C = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    Tensor out({N, C, 2 * H, 2 * W});
    for (int64_t nc = 0; nc < N * C; nc++) {
        const double* p = x->val.ptr() + nc * H * W;
        double* o = out.ptr() + nc * 4 * H * W;
        for (int64_t y = 0; y < H; y++) {
            for (int64_t xx = 0; xx < W; xx++) {
                double v = p[y * W + xx];
                o[(2 * y) * 2 * W + 2 * xx] = v;
                o[(2 * y) * 2 * W + 2 * xx + 1] = v;
                o[(2 * y + 1) * 2 * W + 2 * xx] = v;
                o[(2 * y + 1) * 2 * W + 2 * xx + 1] = v;
            }
        }
    }
    return make_op(std::move(out), {x}, [x, N, C, H, W](Node& n) {
        if (!x->needs_grad) return;
        for (int64_t nc = 0; nc < N * C; nc++) {
            const double* g = n.grad.ptr() + nc * 4 * H * W;
            double* dx = x->grad.ptr() + nc * H * W;
            for (int64_t y = 0; y < H; y++) {
                for (int64_t xx = 0; xx < W; xx++) {
                    dx[y * W + xx] += g[(2 * y) * 2 * W + 2 * xx] + g[(2 * y) * 2 * W + 2 * xx + 1] +
                                      g[(2 * y + 1) * 2 * W + 2 * xx] + g[(2 * y + 1) * 2 * W + 2 * xx + 1];
                }
            }
        }
    });
}

// x (N,C,H,W) + bias (N,C) broadcast over H,W. Timestep conditioning path.
inline Value add_bias_nc(const Value& x, const Value& b) {
    R2V_CHECK(x->val.ndim() == 4 && b->val.ndim() == 2, "add_bias_nc: shapes");
    int64_t N = x->val.shape[0], C = x->val.shape[1], HW = x->val.shape[2] * x->val.shape[3];
    R2V_CHECK(b->val.shape[0] == N && b->val.shape[1] == C, "add_bias_nc: bias shape");
    Tensor out = x->val;
    for (int64_t n = 0; n < N; n++) {
        for (int64_t c = 0; c < C; c++) {
            double bv = b->val.at2(n, c);
            double* o = out.ptr() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; i++) o[i] += bv;
        }
    }
    return make_op(std::move(out), {x, b}, [x, b, N, C, HW](Node& nd) {
        if (x->needs_grad) {
            for (int64_t i = 0; i < nd.grad.numel(); i++) x->grad[i] += nd.grad[i];
        }
        if (b->needs_grad) {
            for (int64_t n = 0; n < N; n++) {
                for (int64_t c = 0; c < C; c++) {
                    const double* g = nd.grad.ptr() + (n * C + c) * HW;
                    double acc = 0.0;
                    for (int64_t i = 0; i < HW; i++) acc += g[i];
                    b->grad.at2(n, c) += acc;
                }
            }
        }
    });
}

}  // namespace ad
}  // namespace r2v
