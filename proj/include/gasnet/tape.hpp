#pragma once

// Reverse-mode autodiff over dense tensors, sized for small 3D conv nets.
// A Tape owns the graph of one forward pass; ops compute eagerly and, when
// recording, register a backward closure. Gradients live on the tape, not
// on the tensors, so parameter structs stay plain data.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "gasnet/rng.hpp"
#include "gasnet/tensor.hpp"

namespace gasnet::ad {

struct VarId {
    int v = -1;
    bool valid() const { return v >= 0; }
};

namespace detail {

// x: (C, D, H, W) -> col: (C*k^3, P) row-major, P = Do*Ho*Wo
template <class T>
void im2col3d(const T* x, int C, int D, int H, int W, int k, int stride,
              int pad, int Do, int Ho, int Wo, T* col) {
    const int64_t P = static_cast<int64_t>(Do) * Ho * Wo;
    const int64_t plane = static_cast<int64_t>(D) * H * W;
    int64_t r = 0;
    for (int c = 0; c < C; ++c)
        for (int kd = 0; kd < k; ++kd)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw, ++r) {
                    T* dst = col + r * P;
                    const T* src = x + c * plane;
                    int64_t p = 0;
                    for (int od = 0; od < Do; ++od) {
                        const int id = od * stride - pad + kd;
                        const bool dok = static_cast<unsigned>(id) < static_cast<unsigned>(D);
                        for (int oh = 0; oh < Ho; ++oh) {
                            const int ih = oh * stride - pad + kh;
                            const bool hok = dok && static_cast<unsigned>(ih) < static_cast<unsigned>(H);
                            const T* row = src + (static_cast<int64_t>(id) * H + ih) * W;
                            for (int ow = 0; ow < Wo; ++ow, ++p) {
                                const int iw = ow * stride - pad + kw;
                                dst[p] = (hok && static_cast<unsigned>(iw) < static_cast<unsigned>(W))
                                             ? row[iw]
                                             : T(0);
                            }
                        }
                    }
                }
}

// col: (C*k^3, P) -> accumulate into x: (C, D, H, W)
template <class T>
void col2im3d(const T* col, int C, int D, int H, int W, int k, int stride,
              int pad, int Do, int Ho, int Wo, T* x) {
    const int64_t P = static_cast<int64_t>(Do) * Ho * Wo;
    const int64_t plane = static_cast<int64_t>(D) * H * W;
    int64_t r = 0;
    for (int c = 0; c < C; ++c)
        for (int kd = 0; kd < k; ++kd)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw, ++r) {
                    const T* src = col + r * P;
                    T* dst = x + c * plane;
                    int64_t p = 0;
                    for (int od = 0; od < Do; ++od) {
                        const int id = od * stride - pad + kd;
                        const bool dok = static_cast<unsigned>(id) < static_cast<unsigned>(D);
                        for (int oh = 0; oh < Ho; ++oh) {
                            const int ih = oh * stride - pad + kh;
                            const bool hok = dok && static_cast<unsigned>(ih) < static_cast<unsigned>(H);
                            T* row = dst + (static_cast<int64_t>(id) * H + ih) * W;
                            for (int ow = 0; ow < Wo; ++ow, ++p) {
                                const int iw = ow * stride - pad + kw;
                                if (hok && static_cast<unsigned>(iw) < static_cast<unsigned>(W))
                                    row[iw] += src[p];
                            }
                        }
                    }
                }
}

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

template <class T>
class Tape {
public:
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    VarId leaf(Tensor<T> t, bool needs_grad = false) {
        return push(std::move(t), needs_grad && record_, {});
    }
    VarId constant(Tensor<T> t) { return leaf(std::move(t), false); }

    const Tensor<T>& val(VarId id) const { return nodes_[id.v].val; }
    const Shape& shape(VarId id) const { return nodes_[id.v].val.shape; }

    // Gradient of a node after backward(); zeros if the node was unreachable.
    Tensor<T> grad(VarId id) {
        auto& n = nodes_[id.v];
        if (!n.grad.defined()) n.grad = Tensor<T>(n.val.shape);
        return n.grad;
    }

    T scalar(VarId id) const {
        const auto& t = nodes_[id.v].val;
        if (t.size() != 1) throw ShapeError("scalar() on tensor of size != 1");
        return t[0];
    }

    void backward(VarId root) {
        if (!record_) throw Error("backward() on a non-recording tape");
        auto& rg = ensure_grad(root.v);
        std::fill(rg.buf->begin(), rg.buf->end(), T(1));
        for (int i = root.v; i >= 0; --i) {
            auto& n = nodes_[i];
            if (n.back && n.grad.defined()) n.back();
        }
    }

    // ---- elementwise ----

    VarId add(VarId a, VarId b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        check_same_shape(ta.shape, tb.shape, "add");
        Tensor<T> out(ta.shape);
        for (int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
        return push(std::move(out), wants(a) || wants(b), [this, a, b](int o) {
            const auto& g = nodes_[o].grad;
            if (wants(a)) accum(a, [&](int64_t i) { return g[i]; });
            if (wants(b)) accum(b, [&](int64_t i) { return g[i]; });
        });
    }

    VarId sub(VarId a, VarId b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        check_same_shape(ta.shape, tb.shape, "sub");
        Tensor<T> out(ta.shape);
        for (int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] - tb[i];
        return push(std::move(out), wants(a) || wants(b), [this, a, b](int o) {
            const auto& g = nodes_[o].grad;
            if (wants(a)) accum(a, [&](int64_t i) { return g[i]; });
            if (wants(b)) accum(b, [&](int64_t i) { return -g[i]; });
        });
    }

    VarId mul(VarId a, VarId b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        check_same_shape(ta.shape, tb.shape, "mul");
        Tensor<T> out(ta.shape);
        for (int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
        return push(std::move(out), wants(a) || wants(b), [this, a, b](int o) {
            const auto& g = nodes_[o].grad;
            const auto& va = nodes_[a.v].val;
            const auto& vb = nodes_[b.v].val;
            if (wants(a)) accum(a, [&](int64_t i) { return g[i] * vb[i]; });
            if (wants(b)) accum(b, [&](int64_t i) { return g[i] * va[i]; });
        });
    }

    // alpha * a + beta
    VarId scale_add(VarId a, T alpha, T beta) {
        const auto& ta = val(a);
        Tensor<T> out(ta.shape);
        for (int64_t i = 0; i < out.size(); ++i) out[i] = alpha * ta[i] + beta;
        return push(std::move(out), wants(a), [this, a, alpha](int o) {
            const auto& g = nodes_[o].grad;
            accum(a, [&](int64_t i) { return alpha * g[i]; });
        });
    }

    VarId relu(VarId x) {
        const auto& tx = val(x);
        Tensor<T> out(tx.shape);
        for (int64_t i = 0; i < out.size(); ++i) out[i] = tx[i] > T(0) ? tx[i] : T(0);
        return push(std::move(out), wants(x), [this, x](int o) {
            const auto& g = nodes_[o].grad;
            const auto& vx = nodes_[x.v].val;
            accum(x, [&](int64_t i) { return vx[i] > T(0) ? g[i] : T(0); });
        });
    }

    VarId leaky_relu(VarId x, T slope) {
        const auto& tx = val(x);
        Tensor<T> out(tx.shape);
        for (int64_t i = 0; i < out.size(); ++i)
            out[i] = tx[i] > T(0) ? tx[i] : slope * tx[i];
        return push(std::move(out), wants(x), [this, x, slope](int o) {
            const auto& g = nodes_[o].grad;
            const auto& vx = nodes_[x.v].val;
            accum(x, [&](int64_t i) { return vx[i] > T(0) ? g[i] : slope * g[i]; });
        });
    }

    VarId sigmoid_(VarId x) {
        const auto& tx = val(x);
        Tensor<T> out(tx.shape);
        for (int64_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-tx[i]));
        VarId id = push(std::move(out), wants(x), {});
        set_back(id, [this, x, id](int o) {
            const auto& g = nodes_[o].grad;
            const auto& y = nodes_[id.v].val;
            accum(x, [&](int64_t i) { return g[i] * y[i] * (T(1) - y[i]); });
        });
        return id;
    }

    VarId tanh_(VarId x) {
        const auto& tx = val(x);
        Tensor<T> out(tx.shape);
        for (int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(tx[i]);
        VarId id = push(std::move(out), wants(x), {});
        set_back(id, [this, x, id](int o) {
            const auto& g = nodes_[o].grad;
            const auto& y = nodes_[id.v].val;
            accum(x, [&](int64_t i) { return g[i] * (T(1) - y[i] * y[i]); });
        });
        return id;
    }

    // clamp to [lo, hi]; gradient passes only strictly inside
    VarId clamp_(VarId x, T lo, T hi) {
        const auto& tx = val(x);
        Tensor<T> out(tx.shape);
        for (int64_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, tx[i]));
        return push(std::move(out), wants(x), [this, x, lo, hi](int o) {
            const auto& g = nodes_[o].grad;
            const auto& vx = nodes_[x.v].val;
            accum(x, [&](int64_t i) { return (vx[i] > lo && vx[i] < hi) ? g[i] : T(0); });
        });
    }

    // probability clamp p -> clamp(p, eps, 1-eps)
    VarId clamp_prob(VarId x, T eps) { return clamp_(x, eps, T(1) - eps); }

    VarId log_(VarId x) {
        const auto& tx = val(x);
        Tensor<T> out(tx.shape);
        for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(tx[i]);
        return push(std::move(out), wants(x), [this, x](int o) {
            const auto& g = nodes_[o].grad;
            const auto& vx = nodes_[x.v].val;
            accum(x, [&](int64_t i) { return g[i] / vx[i]; });
        });
    }

    // ---- reductions ----

    VarId mean_all(VarId x) {
        const auto& tx = val(x);
        T s = 0;
        for (int64_t i = 0; i < tx.size(); ++i) s += tx[i];
        const T inv = T(1) / static_cast<T>(tx.size());
        Tensor<T> out = Tensor<T>::full({1}, s * inv);
        return push(std::move(out), wants(x), [this, x, inv](int o) {
            const T g = nodes_[o].grad[0] * inv;
            accum(x, [&](int64_t) { return g; });
        });
    }

    // (N, C, D, H, W) -> (N): mean over everything but batch
    VarId spatial_mean(VarId x) {
        const auto& tx = val(x);
        const int N = tx.shape[0];
        const int64_t m = tx.size() / N;
        Tensor<T> out({N});
        for (int n = 0; n < N; ++n) {
            T s = 0;
            const T* p = tx.data() + n * m;
            for (int64_t i = 0; i < m; ++i) s += p[i];
            out[n] = s / static_cast<T>(m);
        }
        return push(std::move(out), wants(x), [this, x, N, m](int o) {
            const auto& g = nodes_[o].grad;
            auto& gx = ensure_grad(x.v);
            for (int n = 0; n < N; ++n) {
                const T gv = g[n] / static_cast<T>(m);
                T* p = gx.data() + n * m;
                for (int64_t i = 0; i < m; ++i) p[i] += gv;
            }
        });
    }

    // (N, C, D, H, W) -> (N): max over everything but batch (first argmax wins)
    VarId max_spatial(VarId x) {
        const auto& tx = val(x);
        const int N = tx.shape[0];
        const int64_t m = tx.size() / N;
        Tensor<T> out({N});
        auto arg = std::make_shared<std::vector<int64_t>>(N);
        for (int n = 0; n < N; ++n) {
            const T* p = tx.data() + n * m;
            int64_t best = 0;
            for (int64_t i = 1; i < m; ++i)
                if (p[i] > p[best]) best = i;
            (*arg)[n] = best;
            out[n] = p[best];
        }
        return push(std::move(out), wants(x), [this, x, N, m, arg](int o) {
            const auto& g = nodes_[o].grad;
            auto& gx = ensure_grad(x.v);
            for (int n = 0; n < N; ++n) gx[n * m + (*arg)[n]] += g[n];
        });
    }

    // smooth max per volume: (1/temp) * log(sum exp(temp * x))
    VarId lse_spatial(VarId x, T temp) {
        const auto& tx = val(x);
        const int N = tx.shape[0];
        const int64_t m = tx.size() / N;
        Tensor<T> out({N});
        auto weights = std::make_shared<std::vector<T>>(tx.size());
        for (int n = 0; n < N; ++n) {
            const T* p = tx.data() + n * m;
            T mx = p[0];
            for (int64_t i = 1; i < m; ++i) mx = std::max(mx, p[i]);
            T s = 0;
            for (int64_t i = 0; i < m; ++i) s += std::exp(temp * (p[i] - mx));
            out[n] = mx + std::log(s) / temp;
            T* w = weights->data() + n * m;
            for (int64_t i = 0; i < m; ++i) w[i] = std::exp(temp * (p[i] - mx)) / s;
        }
        return push(std::move(out), wants(x), [this, x, N, m, weights](int o) {
            const auto& g = nodes_[o].grad;
            auto& gx = ensure_grad(x.v);
            for (int n = 0; n < N; ++n) {
                const T* w = weights->data() + n * m;
                T* p = gx.data() + n * m;
                for (int64_t i = 0; i < m; ++i) p[i] += g[n] * w[i];
            }
        });
    }

    // weighted sum of scalar nodes -> {1}
    VarId wsum(const std::vector<std::pair<VarId, T>>& items) {
        T s = 0;
        bool ng = false;
        for (const auto& [id, w] : items) {
            s += w * scalar(id);
            ng = ng || wants(id);
        }
        auto its = std::make_shared<std::vector<std::pair<VarId, T>>>(items);
        return push(Tensor<T>::full({1}, s), ng, [this, its](int o) {
            const T g = nodes_[o].grad[0];
            for (const auto& [id, w] : *its)
                if (wants(id)) ensure_grad(id.v)[0] += g * w;
        });
    }

    // ---- losses ----

    VarId mse_loss(VarId a, VarId b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        check_same_shape(ta.shape, tb.shape, "mse_loss");
        const int64_t n = ta.size();
        T s = 0;
        for (int64_t i = 0; i < n; ++i) {
            const T d = ta[i] - tb[i];
            s += d * d;
        }
        const T inv = T(1) / static_cast<T>(n);
        return push(Tensor<T>::full({1}, s * inv), wants(a) || wants(b),
                    [this, a, b, inv](int o) {
                        const T g = nodes_[o].grad[0];
                        const auto& va = nodes_[a.v].val;
                        const auto& vb = nodes_[b.v].val;
                        if (wants(a))
                            accum(a, [&](int64_t i) { return g * T(2) * (va[i] - vb[i]) * inv; });
                        if (wants(b))
                            accum(b, [&](int64_t i) { return -g * T(2) * (va[i] - vb[i]) * inv; });
                    });
    }

    // Mean binary cross entropy over voxels whose target != 2.
    // Targets must be in {0, 1, 2}; returns 0 when every voxel is ignored.
    VarId bce_masked(VarId pred, const Tensor<T>& target, T eps) {
        const auto& tp = val(pred);
        check_same_shape(tp.shape, target.shape, "bce_masked");
        const int64_t n = tp.size();
        int64_t count = 0;
        T s = 0;
        for (int64_t i = 0; i < n; ++i) {
            const T t = target[i];
            if (t == T(2)) continue;
            if (t != T(0) && t != T(1))
                throw ValidationError("bce_masked: invalid label value " + std::to_string(t));
            const T p = std::min(T(1) - eps, std::max(eps, tp[i]));
            s += -(t * std::log(p) + (T(1) - t) * std::log(T(1) - p));
            ++count;
        }
        const T loss = count ? s / static_cast<T>(count) : T(0);
        auto tgt = target;  // shared buffer
        return push(Tensor<T>::full({1}, loss), wants(pred) && count > 0,
                    [this, pred, tgt, eps, count](int o) {
                        const T g = nodes_[o].grad[0] / static_cast<T>(count);
                        const auto& vp = nodes_[pred.v].val;
                        accum(pred, [&](int64_t i) -> T {
                            const T t = tgt[i];
                            if (t == T(2)) return T(0);
                            const T raw = vp[i];
                            if (raw <= eps || raw >= T(1) - eps) return T(0);
                            return g * (-t / raw + (T(1) - t) / (T(1) - raw));
                        });
                    });
    }

    // ---- shape ops ----

    VarId concat_ch(VarId a, VarId b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (ta.shape.size() != 5 || tb.shape.size() != 5)
            throw ShapeError("concat_ch expects 5-d tensors");
        for (int i : {0, 2, 3, 4})
            if (ta.shape[i] != tb.shape[i])
                throw ShapeError("concat_ch: non-channel dims differ");
        const int N = ta.shape[0], Ca = ta.shape[1], Cb = tb.shape[1];
        const int64_t m = static_cast<int64_t>(ta.shape[2]) * ta.shape[3] * ta.shape[4];
        Shape os = ta.shape;
        os[1] = Ca + Cb;
        Tensor<T> out(os);
        for (int n = 0; n < N; ++n) {
            std::memcpy(out.data() + n * (Ca + Cb) * m, ta.data() + n * Ca * m,
                        sizeof(T) * Ca * m);
            std::memcpy(out.data() + (n * (Ca + Cb) + Ca) * m, tb.data() + n * Cb * m,
                        sizeof(T) * Cb * m);
        }
        return push(std::move(out), wants(a) || wants(b),
                    [this, a, b, N, Ca, Cb, m](int o) {
                        const auto& g = nodes_[o].grad;
                        if (wants(a)) {
                            auto& ga = ensure_grad(a.v);
                            for (int n = 0; n < N; ++n)
                                for (int64_t i = 0; i < Ca * m; ++i)
                                    ga[n * Ca * m + i] += g[n * (Ca + Cb) * m + i];
                        }
                        if (wants(b)) {
                            auto& gb = ensure_grad(b.v);
                            for (int n = 0; n < N; ++n)
                                for (int64_t i = 0; i < Cb * m; ++i)
                                    gb[n * Cb * m + i] += g[(n * (Ca + Cb) + Ca) * m + i];
                        }
                    });
    }

    VarId upsample_nearest2(VarId x) {
        const auto& tx = val(x);
        if (tx.shape.size() != 5) throw ShapeError("upsample_nearest2 expects 5-d");
        const int N = tx.shape[0], C = tx.shape[1], D = tx.shape[2], H = tx.shape[3],
                  W = tx.shape[4];
        Tensor<T> out({N, C, 2 * D, 2 * H, 2 * W});
        const int64_t im = static_cast<int64_t>(D) * H * W;
        const int64_t om = im * 8;
        for (int nc = 0; nc < N * C; ++nc) {
            const T* src = tx.data() + nc * im;
            T* dst = out.data() + nc * om;
            for (int d = 0; d < 2 * D; ++d)
                for (int h = 0; h < 2 * H; ++h) {
                    const T* srow = src + (static_cast<int64_t>(d / 2) * H + h / 2) * W;
                    T* drow = dst + (static_cast<int64_t>(d) * 2 * H + h) * 2 * W;
                    for (int w = 0; w < 2 * W; ++w) drow[w] = srow[w / 2];
                }
        }
        return push(std::move(out), wants(x), [this, x, N, C, D, H, W](int o) {
            const auto& g = nodes_[o].grad;
            auto& gx = ensure_grad(x.v);
            const int64_t im = static_cast<int64_t>(D) * H * W;
            const int64_t om = im * 8;
            for (int nc = 0; nc < N * C; ++nc) {
                T* dst = gx.data() + nc * im;
                const T* src = g.data() + nc * om;
                for (int d = 0; d < 2 * D; ++d)
                    for (int h = 0; h < 2 * H; ++h) {
                        T* drow = dst + (static_cast<int64_t>(d / 2) * H + h / 2) * W;
                        const T* srow = src + (static_cast<int64_t>(d) * 2 * H + h) * 2 * W;
                        for (int w = 0; w < 2 * W; ++w) drow[w / 2] += srow[w];
                    }
            }
        });
    }

    // ---- conv ----

    // x: (N, Ci, D, H, W), w: (Co, Ci, k, k, k), b: (Co)
    VarId conv3d(VarId x, VarId w, VarId b, int stride, int pad) {
        const auto& tx = val(x);
        const auto& tw = val(w);
        const auto& tb = val(b);
        if (tx.shape.size() != 5 || tw.shape.size() != 5)
            throw ShapeError("conv3d expects 5-d input and weight");
        const int N = tx.shape[0], Ci = tx.shape[1], D = tx.shape[2], H = tx.shape[3],
                  W = tx.shape[4];
        const int Co = tw.shape[0], k = tw.shape[2];
        if (tw.shape[1] != Ci) throw ShapeError("conv3d: channel mismatch");
        if (tb.shape != Shape{Co}) throw ShapeError("conv3d: bias shape mismatch");
        const int Do = (D + 2 * pad - k) / stride + 1;
        const int Ho = (H + 2 * pad - k) / stride + 1;
        const int Wo = (W + 2 * pad - k) / stride + 1;
        if (Do <= 0 || Ho <= 0 || Wo <= 0)
            throw ShapeError("conv3d: output would be empty");
        const int64_t P = static_cast<int64_t>(Do) * Ho * Wo;
        const int64_t K = static_cast<int64_t>(Ci) * k * k * k;

        Tensor<T> out({N, Co, Do, Ho, Wo});
        const bool pointwise = (k == 1 && stride == 1);
        AVec<T> col;
        if (!pointwise) col.resize(K * P);
        using Mat = detail::MatRM<T>;
        Eigen::Map<const Mat> Wm(tw.data(), Co, K);
        for (int n = 0; n < N; ++n) {
            const T* xin = tx.data() + static_cast<int64_t>(n) * Ci * D * H * W;
            Eigen::Map<Mat> Om(out.data() + static_cast<int64_t>(n) * Co * P, Co, P);
            if (pointwise) {
                Eigen::Map<const Mat> Xm(xin, Ci, P);
                Om.noalias() = Wm * Xm;
            } else {
                detail::im2col3d(xin, Ci, D, H, W, k, stride, pad, Do, Ho, Wo, col.data());
                Eigen::Map<const Mat> Cm(col.data(), K, P);
                Om.noalias() = Wm * Cm;
            }
            for (int c = 0; c < Co; ++c) Om.row(c).array() += tb[c];
        }

        return push(std::move(out), wants(x) || wants(w) || wants(b),
                    [this, x, w, b, stride, pad, N, Ci, D, H, W, Co, k, Do, Ho, Wo, P,
                     K, pointwise](int o) {
                        using Mat = detail::MatRM<T>;
                        const auto& g = nodes_[o].grad;
                        const auto& vx = nodes_[x.v].val;
                        const auto& vw = nodes_[w.v].val;
                        const bool need_x = wants(x), need_w = wants(w), need_b = wants(b);
                        AVec<T> col, dcol;
                        if (!pointwise && (need_w || need_x)) {
                            col.resize(K * P);
                            if (need_x) dcol.resize(K * P);
                        }
                        Eigen::Map<const Mat> Wm(vw.data(), Co, K);
                        for (int n = 0; n < N; ++n) {
                            Eigen::Map<const Mat> Gm(
                                g.data() + static_cast<int64_t>(n) * Co * P, Co, P);
                            const T* xin =
                                vx.data() + static_cast<int64_t>(n) * Ci * D * H * W;
                            if (pointwise) {
                                if (need_w) {
                                    Eigen::Map<const Mat> Xm(xin, Ci, P);
                                    Eigen::Map<Mat> dWm(ensure_grad(w.v).data(), Co, K);
                                    dWm.noalias() += Gm * Xm.transpose();
                                }
                                if (need_x) {
                                    Eigen::Map<Mat> dXm(
                                        ensure_grad(x.v).data() +
                                            static_cast<int64_t>(n) * Ci * P,
                                        Ci, P);
                                    dXm.noalias() += Wm.transpose() * Gm;
                                }
                            } else {
                                if (need_w || need_x)
                                    detail::im2col3d(xin, Ci, D, H, W, k, stride, pad, Do,
                                                     Ho, Wo, col.data());
                                if (need_w) {
                                    Eigen::Map<const Mat> Cm(col.data(), K, P);
                                    Eigen::Map<Mat> dWm(ensure_grad(w.v).data(), Co, K);
                                    dWm.noalias() += Gm * Cm.transpose();
                                }
                                if (need_x) {
                                    Eigen::Map<Mat> dCm(dcol.data(), K, P);
                                    dCm.noalias() = Wm.transpose() * Gm;
                                    detail::col2im3d(
                                        dcol.data(), Ci, D, H, W, k, stride, pad, Do, Ho,
                                        Wo,
                                        ensure_grad(x.v).data() +
                                            static_cast<int64_t>(n) * Ci * D * H * W);
                                }
                            }
                            if (need_b) {
                                auto& gb = ensure_grad(b.v);
                                for (int c = 0; c < Co; ++c) gb[c] += Gm.row(c).sum();
                            }
                        }
                    });
    }

    // Normalizes w by its leading singular value, estimated by power
    // iteration on the (Co, rest) matricization. On a recording tape the
    // persistent `u` (owned by the layer) is warm-started and updated; on a
    // non-recording tape the iteration runs on a local copy, so evaluation
    // is a pure function of (w, u). Gradient uses the converged u v^T
    // direction.
    VarId spectral_norm(VarId w, AVec<T>* u, int max_iter = 50,
                        T tol = std::numeric_limits<T>::epsilon() * 100) {
        const auto& tw = val(w);
        const int Co = tw.shape[0];
        const int64_t K = tw.size() / Co;
        using Mat = detail::MatRM<T>;
        using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
        Eigen::Map<const Mat> M(tw.data(), Co, K);
        if (static_cast<int>(u->size()) != Co) {
            u->resize(Co);
            for (int i = 0; i < Co; ++i)
                (*u)[i] = static_cast<T>(rng::normal(0x5eed, 0x5eed, i));
        }
        AVec<T> u_local;
        T* u_data = u->data();
        if (!record_) {
            u_local = *u;
            u_data = u_local.data();
        }
        Eigen::Map<Vec> uv(u_data, Co);
        uv.normalize();
        Vec vv(K);
        T sigma = 0;
        for (int it = 0; it < max_iter; ++it) {
            vv.noalias() = M.transpose() * uv;
            vv.normalize();
            uv.noalias() = M * vv;
            const T n = uv.norm();
            uv /= n;
            const T s = uv.dot(M * vv);
            if (it > 0 && std::abs(s - sigma) <= tol * std::max(T(1), s)) {
                sigma = s;
                break;
            }
            sigma = s;
        }
        sigma = std::max(sigma, std::numeric_limits<T>::min());
        Tensor<T> out(tw.shape);
        const T inv = T(1) / sigma;
        for (int64_t i = 0; i < out.size(); ++i) out[i] = tw[i] * inv;
        auto usave = std::make_shared<std::vector<T>>(u_data, u_data + Co);
        auto vsave = std::make_shared<std::vector<T>>(vv.data(), vv.data() + K);
        VarId id = push(std::move(out), wants(w), {});
        set_back(id, [this, w, id, usave, vsave, sigma, Co, K](int o) {
            const auto& g = nodes_[o].grad;
            const auto& wsn = nodes_[id.v].val;
            T dot = 0;
            for (int64_t i = 0; i < g.size(); ++i) dot += g[i] * wsn[i];
            auto& gw = ensure_grad(w.v);
            const T inv = T(1) / sigma;
            for (int a = 0; a < Co; ++a)
                for (int64_t b = 0; b < K; ++b) {
                    const int64_t i = a * K + b;
                    gw[i] += (g[i] - dot * (*usave)[a] * (*vsave)[b]) * inv;
                }
        });
        return id;
    }

    // Group normalization with per-channel affine. gamma, beta: (C).
    VarId group_norm(VarId x, VarId gamma, VarId beta, int groups, T eps = T(1e-5)) {
        const auto& tx = val(x);
        if (tx.shape.size() != 5) throw ShapeError("group_norm expects 5-d");
        const int N = tx.shape[0], C = tx.shape[1];
        const int64_t sp = static_cast<int64_t>(tx.shape[2]) * tx.shape[3] * tx.shape[4];
        if (C % groups != 0) throw ShapeError("group_norm: C % groups != 0");
        const int cg = C / groups;
        const int64_t m = cg * sp;
        const auto& tg = val(gamma);
        const auto& tb = val(beta);
        if (tg.shape != Shape{C} || tb.shape != Shape{C})
            throw ShapeError("group_norm: affine shape mismatch");

        Tensor<T> out(tx.shape);
        auto mu = std::make_shared<std::vector<T>>(N * groups);
        auto istd = std::make_shared<std::vector<T>>(N * groups);
        for (int n = 0; n < N; ++n)
            for (int gi = 0; gi < groups; ++gi) {
                const T* p = tx.data() + (static_cast<int64_t>(n) * C + gi * cg) * sp;
                T s = 0;
                for (int64_t i = 0; i < m; ++i) s += p[i];
                const T mean = s / static_cast<T>(m);
                T v = 0;
                for (int64_t i = 0; i < m; ++i) {
                    const T d = p[i] - mean;
                    v += d * d;
                }
                const T is = T(1) / std::sqrt(v / static_cast<T>(m) + eps);
                (*mu)[n * groups + gi] = mean;
                (*istd)[n * groups + gi] = is;
                T* q = out.data() + (static_cast<int64_t>(n) * C + gi * cg) * sp;
                for (int c = 0; c < cg; ++c) {
                    const T ga = tg[gi * cg + c], be = tb[gi * cg + c];
                    for (int64_t i = 0; i < sp; ++i)
                        q[c * sp + i] = ga * (p[c * sp + i] - mean) * is + be;
                }
            }

        return push(std::move(out), wants(x) || wants(gamma) || wants(beta),
                    [this, x, gamma, beta, groups, N, C, cg, sp, m, mu, istd](int o) {
                        const auto& g = nodes_[o].grad;
                        const auto& vx = nodes_[x.v].val;
                        const auto& vg = nodes_[gamma.v].val;
                        const bool nx = wants(x), ng = wants(gamma), nb = wants(beta);
                        for (int n = 0; n < N; ++n)
                            for (int gi = 0; gi < groups; ++gi) {
                                const int64_t base =
                                    (static_cast<int64_t>(n) * C + gi * cg) * sp;
                                const T mean = (*mu)[n * groups + gi];
                                const T is = (*istd)[n * groups + gi];
                                if (ng || nb) {
                                    for (int c = 0; c < cg; ++c) {
                                        T dg = 0, db = 0;
                                        const T* gp = g.data() + base + c * sp;
                                        const T* xp = vx.data() + base + c * sp;
                                        for (int64_t i = 0; i < sp; ++i) {
                                            dg += gp[i] * (xp[i] - mean) * is;
                                            db += gp[i];
                                        }
                                        if (ng) ensure_grad(gamma.v)[gi * cg + c] += dg;
                                        if (nb) ensure_grad(beta.v)[gi * cg + c] += db;
                                    }
                                }
                                if (nx) {
                                    // dxhat = g * gamma; reduce then redistribute
                                    T sum_dxhat = 0, sum_dxhat_xc = 0;
                                    for (int c = 0; c < cg; ++c) {
                                        const T ga = vg[gi * cg + c];
                                        const T* gp = g.data() + base + c * sp;
                                        const T* xp = vx.data() + base + c * sp;
                                        for (int64_t i = 0; i < sp; ++i) {
                                            const T dxh = gp[i] * ga;
                                            sum_dxhat += dxh;
                                            sum_dxhat_xc += dxh * (xp[i] - mean);
                                        }
                                    }
                                    const T inv_m = T(1) / static_cast<T>(m);
                                    auto& gx = ensure_grad(x.v);
                                    for (int c = 0; c < cg; ++c) {
                                        const T ga = vg[gi * cg + c];
                                        const T* gp = g.data() + base + c * sp;
                                        const T* xp = vx.data() + base + c * sp;
                                        T* dxp = gx.data() + base + c * sp;
                                        for (int64_t i = 0; i < sp; ++i) {
                                            const T xc = xp[i] - mean;
                                            const T dxh = gp[i] * ga;
                                            dxp[i] += is * (dxh - inv_m * sum_dxhat -
                                                            xc * is * is * inv_m *
                                                                sum_dxhat_xc);
                                        }
                                    }
                                }
                            }
                    });
    }

private:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;
        bool needs_grad = false;
        std::function<void()> back;
    };

    bool wants(VarId id) const { return nodes_[id.v].needs_grad; }

    Tensor<T>& ensure_grad(int i) {
        auto& n = nodes_[i];
        if (!n.grad.defined()) n.grad = Tensor<T>(n.val.shape);
        return n.grad;
    }

    template <class F>
    void accum(VarId id, F&& fn) {
        auto& g = ensure_grad(id.v);
        const int64_t n = g.size();
        for (int64_t i = 0; i < n; ++i) g[i] += fn(i);
    }

    // Creates a node; `back_with_out` receives the node's own index.
    VarId push(Tensor<T> val, bool needs_grad,
               std::function<void(int)> back_with_out) {
        Node n;
        n.val = std::move(val);
        n.needs_grad = needs_grad && record_;
        nodes_.push_back(std::move(n));
        const int id = static_cast<int>(nodes_.size()) - 1;
        if (nodes_[id].needs_grad && back_with_out)
            nodes_[id].back = [this, id, fn = std::move(back_with_out)]() { fn(id); };
        return VarId{id};
    }

    void set_back(VarId id, std::function<void(int)> fn) {
        if (nodes_[id.v].needs_grad)
            nodes_[id.v].back = [this, id, f = std::move(fn)]() { f(id.v); };
    }

    std::vector<Node> nodes_;
    bool record_;
};

}  // namespace gasnet::ad
