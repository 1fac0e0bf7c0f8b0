#pragma once

// The three trainable functions: segmenter S (U-Net, group norm, sigmoid
// head), generator G (CycleGAN-flavored encoder/resblocks/decoder, instance
// norm, tanh head) and discriminator D (strided spectral-normalized convs,
// patch map pooled to one probability per volume).

#include <limits>
#include <string>
#include <vector>

#include "gasnet/rng.hpp"
#include "gasnet/tape.hpp"

namespace gasnet::nets {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::VarId;

struct SegmenterConfig {
    int in_channels = 1;
    int base_channels = 16;  // paper scale; phantom runs use 4
    int depth = 4;           // encoder levels
};

struct GeneratorConfig {
    int in_channels = 1;
    int base_channels = 16;
    int n_resblocks = 2;
};

struct DiscriminatorConfig {
    int in_channels = 1;
    int base_channels = 16;
    int n_downsamples = 3;
    bool spectral_norm = true;
};

inline void validate(const SegmenterConfig& c) {
    if (c.base_channels < 1) throw ConfigError("segmenter: base_channels >= 1 required");
    if (c.depth < 2) throw ConfigError("segmenter: depth >= 2 required");
}
inline void validate(const GeneratorConfig& c) {
    if (c.base_channels < 1) throw ConfigError("generator: base_channels >= 1 required");
    if (c.n_resblocks < 0) throw ConfigError("generator: n_resblocks >= 0 required");
}
inline void validate(const DiscriminatorConfig& c) {
    if (c.base_channels < 1) throw ConfigError("discriminator: base_channels >= 1 required");
    if (c.n_downsamples < 1) throw ConfigError("discriminator: n_downsamples >= 1 required");
}

template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> m, v;  // optimizer moments, allocated with the param

    void init(std::string n, Shape s) {
        name = std::move(n);
        value = Tensor<T>(s);
        m = Tensor<T>(s);
        v = Tensor<T>(std::move(s));
    }
};

// Collects (param, tape leaf) pairs during a forward pass so the optimizer
// can read gradients afterwards. Pass nullptr to run a net frozen: gradients
// still flow through its ops but none are accumulated on its weights.
// A parameter bound several times in one graph (e.g. S forwarded on multiple
// batches) maps to a single shared leaf so its gradients accumulate there.
template <class T>
struct Bindings {
    std::vector<std::pair<Param<T>*, VarId>> items;

    VarId find(const Param<T>* p) const {
        for (const auto& [q, id] : items)
            if (q == p) return id;
        return VarId{};
    }
};

template <class T>
VarId bind(Tape<T>& t, Param<T>& p, Bindings<T>* bn) {
    if (bn) {
        const VarId existing = bn->find(&p);
        if (existing.valid()) return existing;
    }
    VarId id = t.leaf(p.value, bn != nullptr);
    if (bn) bn->items.push_back({&p, id});
    return id;
}

namespace detail {

template <class T>
void gaussian_init(Tensor<T>& w, int fan_in, T gain, rng::Stream& rs) {
    const T std = gain / std::sqrt(static_cast<T>(fan_in));
    for (int64_t i = 0; i < w.size(); ++i)
        w[i] = static_cast<T>(rs.next_normal()) * std;
}

inline int gn_groups(int channels) { return channels % 4 == 0 ? 4 : 1; }

template <class T>
constexpr T open_eps() {
    return std::is_same_v<T, float> ? T(1e-6) : T(1e-12);
}

}  // namespace detail

template <class T>
struct Conv3dLayer {
    Param<T> w, b;
    int stride = 1, pad = 1, k = 3;

    void init(const std::string& name, int co, int ci, int kk, int s, T gain,
              rng::Stream& rs) {
        k = kk;
        stride = s;
        pad = kk / 2;
        w.init(name + ".w", {co, ci, kk, kk, kk});
        b.init(name + ".b", {co});
        detail::gaussian_init(w.value, ci * kk * kk * kk, gain, rs);
    }

    VarId forward(Tape<T>& t, VarId x, Bindings<T>* bn) {
        return t.conv3d(x, bind(t, w, bn), bind(t, b, bn), stride, pad);
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

template <class T>
struct NormLayer {
    Param<T> gamma, beta;
    int groups = 1;

    void init(const std::string& name, int channels, int g) {
        groups = g;
        gamma.init(name + ".gamma", {channels});
        beta.init(name + ".beta", {channels});
        std::fill(gamma.value.buf->begin(), gamma.value.buf->end(), T(1));
    }

    VarId forward(Tape<T>& t, VarId x, Bindings<T>* bn) {
        return t.group_norm(x, bind(t, gamma, bn), bind(t, beta, bn), groups);
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

// ---------------------------------------------------------------- segmenter

template <class T>
class Segmenter3D {
public:
    Segmenter3D() = default;
    Segmenter3D(const SegmenterConfig& cfg, uint64_t seed) : cfg_(cfg) {
        validate(cfg);
        rng::Stream rs(seed, rng::kStreamInitS);
        const int L = cfg.depth;
        auto ch = [&](int l) { return cfg.base_channels << l; };
        enc_.resize(L);
        int cin = cfg.in_channels;
        for (int l = 0; l < L; ++l) {
            enc_[l].init("S.enc" + std::to_string(l), cin, ch(l), rs);
            cin = ch(l);
            if (l < L - 1) {
                down_.emplace_back();
                down_.back().init("S.down" + std::to_string(l), ch(l + 1), ch(l), 3, 2,
                                  std::sqrt(T(2)), rs);
                cin = ch(l + 1);
            }
        }
        for (int l = L - 2; l >= 0; --l) {
            up_.emplace_back();
            up_.back().init("S.up" + std::to_string(l), ch(l), ch(l + 1), 3, 1,
                            std::sqrt(T(2)), rs);
            dec_.emplace_back();
            dec_.back().init("S.dec" + std::to_string(l), 2 * ch(l), ch(l), rs);
        }
        head_.init("S.head", 1, ch(0), 1, 1, T(1), rs);
        // start from near-empty masks
        head_.b.value[0] = T(-2);
    }

    const SegmenterConfig& config() const { return cfg_; }

    // (N,1,D,H,W) -> (N,1,D,H,W) in [0,1]
    VarId forward(Tape<T>& t, VarId x, Bindings<T>* bn = nullptr) {
        const auto& s = t.shape(x);
        const int div = 1 << (cfg_.depth - 1);
        for (int i : {2, 3, 4})
            if (s[i] % div != 0)
                throw ShapeError("segmenter: spatial dims " + ad::shape_str(s) +
                                 " not divisible by " + std::to_string(div));
        std::vector<VarId> skips;
        VarId h = x;
        for (int l = 0; l < cfg_.depth; ++l) {
            h = enc_[l].forward(t, h, bn);
            if (l < cfg_.depth - 1) {
                skips.push_back(h);
                h = t.relu(down_[l].forward(t, h, bn));
            }
        }
        for (size_t i = 0; i < up_.size(); ++i) {
            h = t.upsample_nearest2(h);
            h = t.relu(up_[i].forward(t, h, bn));
            h = t.concat_ch(h, skips[skips.size() - 1 - i]);
            h = dec_[i].forward(t, h, bn);
        }
        return t.sigmoid_(head_.forward(t, h, bn));
    }

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        for (auto& b : enc_) b.collect(out);
        for (auto& c : down_) c.collect(out);
        for (auto& c : up_) c.collect(out);
        for (auto& b : dec_) b.collect(out);
        head_.collect(out);
        return out;
    }

private:
    struct DoubleConv {
        Conv3dLayer<T> c1, c2;
        NormLayer<T> n1, n2;
        void init(const std::string& name, int cin, int cout, rng::Stream& rs) {
            c1.init(name + ".c1", cout, cin, 3, 1, std::sqrt(T(2)), rs);
            n1.init(name + ".n1", cout, detail::gn_groups(cout));
            c2.init(name + ".c2", cout, cout, 3, 1, std::sqrt(T(2)), rs);
            n2.init(name + ".n2", cout, detail::gn_groups(cout));
        }
        VarId forward(Tape<T>& t, VarId x, Bindings<T>* bn) {
            x = t.relu(n1.forward(t, c1.forward(t, x, bn), bn));
            return t.relu(n2.forward(t, c2.forward(t, x, bn), bn));
        }
        void collect(std::vector<Param<T>*>& out) {
            c1.collect(out);
            n1.collect(out);
            c2.collect(out);
            n2.collect(out);
        }
    };

    SegmenterConfig cfg_;
    std::vector<DoubleConv> enc_, dec_;
    std::vector<Conv3dLayer<T>> down_, up_;
    Conv3dLayer<T> head_;
};

// ---------------------------------------------------------------- generator

template <class T>
class Generator3D {
public:
    Generator3D() = default;
    Generator3D(const GeneratorConfig& cfg, uint64_t seed) : cfg_(cfg) {
        validate(cfg);
        rng::Stream rs(seed, rng::kStreamInitG);
        const int b = cfg.base_channels;
        stem_.init("G.stem", b, cfg.in_channels, 3, 1, std::sqrt(T(2)), rs);
        stem_n_.init("G.stem_n", b, b);
        down1_.init("G.down1", 2 * b, b, 3, 2, std::sqrt(T(2)), rs);
        down1_n_.init("G.down1_n", 2 * b, 2 * b);
        down2_.init("G.down2", 4 * b, 2 * b, 3, 2, std::sqrt(T(2)), rs);
        down2_n_.init("G.down2_n", 4 * b, 4 * b);
        res_.resize(cfg.n_resblocks);
        for (int i = 0; i < cfg.n_resblocks; ++i)
            res_[i].init("G.res" + std::to_string(i), 4 * b, rs);
        up1_.init("G.up1", 2 * b, 4 * b, 3, 1, std::sqrt(T(2)), rs);
        up1_n_.init("G.up1_n", 2 * b, 2 * b);
        up2_.init("G.up2", b, 2 * b, 3, 1, std::sqrt(T(2)), rs);
        up2_n_.init("G.up2_n", b, b);
        head_.init("G.head", 1, b, 3, 1, T(1), rs);
    }

    const GeneratorConfig& config() const { return cfg_; }

    // (N,1,D,H,W) -> same shape in [-1,1]
    VarId forward(Tape<T>& t, VarId x, Bindings<T>* bn = nullptr) {
        const auto& s = t.shape(x);
        for (int i : {2, 3, 4})
            if (s[i] % 4 != 0)
                throw ShapeError("generator: spatial dims " + ad::shape_str(s) +
                                 " not divisible by 4");
        VarId h = t.relu(stem_n_.forward(t, stem_.forward(t, x, bn), bn));
        h = t.relu(down1_n_.forward(t, down1_.forward(t, h, bn), bn));
        h = t.relu(down2_n_.forward(t, down2_.forward(t, h, bn), bn));
        for (auto& r : res_) h = r.forward(t, h, bn);
        h = t.upsample_nearest2(h);
        h = t.relu(up1_n_.forward(t, up1_.forward(t, h, bn), bn));
        h = t.upsample_nearest2(h);
        h = t.relu(up2_n_.forward(t, up2_.forward(t, h, bn), bn));
        return t.tanh_(head_.forward(t, h, bn));
    }

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        stem_.collect(out);
        stem_n_.collect(out);
        down1_.collect(out);
        down1_n_.collect(out);
        down2_.collect(out);
        down2_n_.collect(out);
        for (auto& r : res_) r.collect(out);
        up1_.collect(out);
        up1_n_.collect(out);
        up2_.collect(out);
        up2_n_.collect(out);
        head_.collect(out);
        return out;
    }

private:
    struct ResBlock {
        Conv3dLayer<T> c1, c2;
        NormLayer<T> n1, n2;
        void init(const std::string& name, int ch, rng::Stream& rs) {
            c1.init(name + ".c1", ch, ch, 3, 1, std::sqrt(T(2)), rs);
            n1.init(name + ".n1", ch, ch);  // instance norm
            c2.init(name + ".c2", ch, ch, 3, 1, T(1), rs);
            n2.init(name + ".n2", ch, ch);
        }
        VarId forward(Tape<T>& t, VarId x, Bindings<T>* bn) {
            VarId h = t.relu(n1.forward(t, c1.forward(t, x, bn), bn));
            h = n2.forward(t, c2.forward(t, h, bn), bn);
            return t.add(x, h);
        }
        void collect(std::vector<Param<T>*>& out) {
            c1.collect(out);
            n1.collect(out);
            c2.collect(out);
            n2.collect(out);
        }
    };

    GeneratorConfig cfg_;
    Conv3dLayer<T> stem_, down1_, down2_, up1_, up2_, head_;
    NormLayer<T> stem_n_, down1_n_, down2_n_, up1_n_, up2_n_;
    std::vector<ResBlock> res_;
};

// ------------------------------------------------------------ discriminator

template <class T>
class Discriminator3D {
public:
    Discriminator3D() = default;
    Discriminator3D(const DiscriminatorConfig& cfg, uint64_t seed) : cfg_(cfg) {
        validate(cfg);
        rng::Stream rs(seed, rng::kStreamInitD);
        int cin = cfg.in_channels;
        for (int i = 0; i < cfg.n_downsamples; ++i) {
            const int cout = std::min(cfg.base_channels << i, 8 * cfg.base_channels);
            layers_.emplace_back();
            layers_.back().conv.init("D.conv" + std::to_string(i), cout, cin, 3, 2,
                                     std::sqrt(T(2)), rs);
            layers_.back().init_u(rs);
            cin = cout;
        }
        head_.conv.init("D.head", 1, cin, 3, 1, T(1), rs);
        head_.init_u(rs);
    }

    const DiscriminatorConfig& config() const { return cfg_; }

    // (N,1,D,H,W) -> (N) probabilities in the open interval (0,1)
    VarId forward(Tape<T>& t, VarId x, Bindings<T>* bn = nullptr) {
        VarId h = x;
        for (auto& l : layers_) h = t.leaky_relu(l.forward(t, *this, bn, h), T(0.2));
        h = head_.forward(t, *this, bn, h);  // patch response map
        h = t.spatial_mean(h);
        h = t.sigmoid_(h);
        return t.clamp_prob(h, detail::open_eps<T>());
    }

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        for (auto& l : layers_) l.conv.collect(out);
        head_.conv.collect(out);
        return out;
    }

    // persistent power-iteration vectors, checkpointed with the weights
    std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (auto& l : layers_) out.push_back({l.conv.w.name + ".u", &l.u});
        out.push_back({head_.conv.w.name + ".u", &head_.u});
        return out;
    }

    // Effective (normalized) conv weights as used by the last forward; for
    // spectral-norm verification.
    std::vector<Tensor<T>> normalized_weights() {
        std::vector<Tensor<T>> out;
        Tape<T> t(false);
        for (auto& l : layers_) out.push_back(norm_weight(t, l));
        out.push_back(norm_weight(t, head_));
        return out;
    }

private:
    struct SNConv {
        Conv3dLayer<T> conv;
        Tensor<T> u;
        void init_u(rng::Stream& rs) {
            u = Tensor<T>({static_cast<int>(conv.w.value.shape[0])});
            for (int64_t i = 0; i < u.size(); ++i)
                u[i] = static_cast<T>(rs.next_normal());
        }
        VarId forward(Tape<T>& t, Discriminator3D& d, Bindings<T>* bn, VarId x) {
            VarId wv = bind(t, conv.w, bn);
            if (d.cfg_.spectral_norm) wv = t.spectral_norm(wv, u.buf.get());
            return t.conv3d(x, wv, bind(t, conv.b, bn), conv.stride, conv.pad);
        }
    };

    Tensor<T> norm_weight(Tape<T>& t, SNConv& l) {
        VarId wv = t.leaf(l.conv.w.value);
        if (cfg_.spectral_norm) wv = t.spectral_norm(wv, l.u.buf.get());
        return t.val(wv).clone();
    }

    DiscriminatorConfig cfg_;
    std::vector<SNConv> layers_;
    SNConv head_;
};

// -------------------------------------------------------------------- bundle

template <class T>
struct NetBundle {
    Segmenter3D<T> S;
    Generator3D<T> G;
    Discriminator3D<T> D;
    bool freeze_s = false, freeze_g = false, freeze_d = false;

    NetBundle() = default;
    NetBundle(const SegmenterConfig& sc, const GeneratorConfig& gc,
              const DiscriminatorConfig& dc, uint64_t seed)
        : S(sc, seed), G(gc, seed), D(dc, seed) {}
};

template <class T>
int64_t param_count(std::vector<Param<T>*> ps) {
    int64_t n = 0;
    for (auto* p : ps) n += p->value.size();
    return n;
}

}  // namespace gasnet::nets
