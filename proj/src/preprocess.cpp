#include "gasnet/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "gasnet/rng.hpp"

namespace gasnet::preprocess {

void validate(const PreprocessConfig& c) {
    if (!(c.clip_lo < c.clip_hi)) throw ConfigError("preprocess: clip_lo < clip_hi required");
    for (int s : c.target_shape)
        if (s <= 0) throw ConfigError("preprocess: target_shape must be positive");
    if (c.bbox_margin_voxels < 0) throw ConfigError("preprocess: bbox margin must be >= 0");
}

void validate(const AugmentConfig& c) {
    if (!(c.crop_fraction > 0.0 && c.crop_fraction <= 1.0))
        throw ConfigError("augment: crop_fraction in (0,1] required");
    if (c.noise_sigma < 0.0) throw ConfigError("augment: noise_sigma >= 0 required");
    if (c.max_rotation_deg < 0.0) throw ConfigError("augment: max_rotation_deg >= 0 required");
}

Volume clip_and_normalize(const Volume& vol, const PreprocessConfig& cfg) {
    validate(cfg);
    if (vol.domain != Domain::raw_hu)
        throw ValidationError("clip_and_normalize: input must be raw_hu");
    Volume out = vol;
    out.domain = Domain::unit_normalized;
    const float lo = static_cast<float>(cfg.clip_lo);
    const float hi = static_cast<float>(cfg.clip_hi);
    const float range = hi - lo;
    // endpoints map to exactly -1/+1 and 2*q-1 stays inside [-1,1]
    for (auto& x : out.data) x = 2.0f * ((std::clamp(x, lo, hi) - lo) / range) - 1.0f;
    return out;
}

Box mask_bbox(const SegMask& mask, int margin) {
    Box b;
    bool any = false;
    b.lo = {mask.shape[0], mask.shape[1], mask.shape[2]};
    b.hi = {-1, -1, -1};
    for (int d = 0; d < mask.shape[0]; ++d)
        for (int h = 0; h < mask.shape[1]; ++h)
            for (int w = 0; w < mask.shape[2]; ++w)
                if (mask.at(d, h, w) != 0.0f) {
                    any = true;
                    b.lo[0] = std::min(b.lo[0], d);
                    b.lo[1] = std::min(b.lo[1], h);
                    b.lo[2] = std::min(b.lo[2], w);
                    b.hi[0] = std::max(b.hi[0], d);
                    b.hi[1] = std::max(b.hi[1], h);
                    b.hi[2] = std::max(b.hi[2], w);
                }
    if (!any) throw ValidationError("mask_bbox: empty mask");
    for (int a = 0; a < 3; ++a) {
        b.lo[a] = std::max(0, b.lo[a] - margin);
        b.hi[a] = std::min(mask.shape[a] - 1, b.hi[a] + margin);
    }
    return b;
}

namespace {

template <class Grid>
Grid crop_impl(const Grid& g, const Box& box) {
    Grid out = g;
    out.shape = box.shape();
    out.data.resize(static_cast<size_t>(out.shape[0]) * out.shape[1] * out.shape[2]);
    int64_t i = 0;
    for (int d = box.lo[0]; d <= box.hi[0]; ++d)
        for (int h = box.lo[1]; h <= box.hi[1]; ++h)
            for (int w = box.lo[2]; w <= box.hi[2]; ++w) out.data[i++] = g.at(d, h, w);
    return out;
}

// align-corners source coordinate for 1D resize
inline double src_coord(int o, int out_n, int in_n) {
    if (out_n == 1) return (in_n - 1) / 2.0;
    return static_cast<double>(o) * (in_n - 1) / (out_n - 1);
}

inline float sample_trilinear(const Volume& v, double d, double h, double w, float fill) {
    const int D = v.shape[0], H = v.shape[1], W = v.shape[2];
    if (d < -0.5 || h < -0.5 || w < -0.5 || d > D - 0.5 || h > H - 0.5 || w > W - 0.5)
        return fill;
    const auto clampi = [](int x, int n) { return std::min(n - 1, std::max(0, x)); };
    const int d0 = clampi(static_cast<int>(std::floor(d)), D);
    const int h0 = clampi(static_cast<int>(std::floor(h)), H);
    const int w0 = clampi(static_cast<int>(std::floor(w)), W);
    const int d1 = clampi(d0 + 1, D), h1 = clampi(h0 + 1, H), w1 = clampi(w0 + 1, W);
    const double fd = std::clamp(d - d0, 0.0, 1.0);
    const double fh = std::clamp(h - h0, 0.0, 1.0);
    const double fw = std::clamp(w - w0, 0.0, 1.0);
    double acc = 0.0;
    for (int dd = 0; dd <= 1; ++dd)
        for (int hh = 0; hh <= 1; ++hh)
            for (int ww = 0; ww <= 1; ++ww) {
                const double wgt = (dd ? fd : 1 - fd) * (hh ? fh : 1 - fh) * (ww ? fw : 1 - fw);
                if (wgt == 0.0) continue;
                acc += wgt * v.at(dd ? d1 : d0, hh ? h1 : h0, ww ? w1 : w0);
            }
    return static_cast<float>(acc);
}

inline float sample_nearest(const SegMask& m, double d, double h, double w, float fill) {
    const int di = static_cast<int>(std::llround(d));
    const int hi = static_cast<int>(std::llround(h));
    const int wi = static_cast<int>(std::llround(w));
    if (di < 0 || hi < 0 || wi < 0 || di >= m.shape[0] || hi >= m.shape[1] ||
        wi >= m.shape[2])
        return fill;
    return m.at(di, hi, wi);
}

}  // namespace

Volume crop(const Volume& vol, const Box& box) { return crop_impl(vol, box); }
SegMask crop(const SegMask& mask, const Box& box) { return crop_impl(mask, box); }

Volume crop_to_lung_bbox(const Volume& vol, const SegMask& lung, int margin) {
    if (lung.shape != vol.shape)
        throw ShapeError("crop_to_lung_bbox: lung mask shape differs from volume");
    return crop(vol, mask_bbox(lung, margin));
}

Volume resize_volume(const Volume& vol, std::array<int, 3> target) {
    for (int s : target)
        if (s <= 0) throw ValidationError("resize_volume: target must be positive");
    Volume out;
    out.shape = target;
    out.spacing = vol.spacing;  // spacing-aware resampling is out of scope
    out.domain = vol.domain;
    out.data.resize(out.size());
    int64_t i = 0;
    for (int d = 0; d < target[0]; ++d) {
        const double sd = src_coord(d, target[0], vol.shape[0]);
        for (int h = 0; h < target[1]; ++h) {
            const double sh = src_coord(h, target[1], vol.shape[1]);
            for (int w = 0; w < target[2]; ++w) {
                const double sw = src_coord(w, target[2], vol.shape[2]);
                out.data[i++] = sample_trilinear(vol, sd, sh, sw, 0.0f);
            }
        }
    }
    return out;
}

SegMask resize_mask(const SegMask& mask, std::array<int, 3> target) {
    for (int s : target)
        if (s <= 0) throw ValidationError("resize_mask: target must be positive");
    SegMask out;
    out.shape = target;
    out.spacing = mask.spacing;
    out.kind = mask.kind;
    out.data.resize(out.size());
    int64_t i = 0;
    for (int d = 0; d < target[0]; ++d) {
        const double sd = src_coord(d, target[0], mask.shape[0]);
        for (int h = 0; h < target[1]; ++h) {
            const double sh = src_coord(h, target[1], mask.shape[1]);
            for (int w = 0; w < target[2]; ++w) {
                const double sw = src_coord(w, target[2], mask.shape[2]);
                out.data[i++] = sample_nearest(mask, sd, sh, sw, 0.0f);
            }
        }
    }
    return out;
}

std::pair<Volume, std::optional<SegMask>> augment(const Volume& vol,
                                                  const std::optional<SegMask>& mask,
                                                  const AugmentConfig& cfg,
                                                  uint64_t draw_index) {
    validate(cfg);
    if (vol.domain != Domain::unit_normalized)
        throw ValidationError("augment: volume must be unit_normalized");
    if (mask && mask->shape != vol.shape)
        throw ShapeError("augment: mask shape differs from volume");

    const uint64_t ds = rng::splitmix64(cfg.seed ^ (draw_index * 0x9e3779b97f4a7c15ull));
    const auto u = [&](uint64_t slot) { return rng::uniform(ds, rng::kStreamAugment, slot); };

    const double angle =
        (2.0 * u(0) - 1.0) * cfg.max_rotation_deg * M_PI / 180.0;  // depth axis only
    const double ca = std::cos(angle), sa = std::sin(angle);

    std::array<int, 3> cs{};
    std::array<int, 3> off{};
    for (int a = 0; a < 3; ++a) {
        cs[a] = std::max<int>(1, static_cast<int>(std::llround(cfg.crop_fraction * vol.shape[a])));
        off[a] = static_cast<int>(
            rng::uniform_int(ds, rng::kStreamAugment, 1 + a, 0, vol.shape[a] - cs[a]));
    }

    const double ch = (vol.shape[1] - 1) / 2.0;
    const double cw = (vol.shape[2] - 1) / 2.0;
    const bool identity_geom =
        angle == 0.0 && cs == vol.shape;  // off is forced to 0 then

    Volume out = vol;
    std::optional<SegMask> mout;
    if (mask) mout = *mask;

    if (!identity_geom) {
        // output voxel -> crop/resize-back coords -> inverse rotation
        auto source = [&](int od, int oh, int ow) {
            const double p1d = off[0] + src_coord(od, vol.shape[0], cs[0]);
            const double p1h = off[1] + src_coord(oh, vol.shape[1], cs[1]);
            const double p1w = off[2] + src_coord(ow, vol.shape[2], cs[2]);
            const double rh = ca * (p1h - ch) + sa * (p1w - cw) + ch;
            const double rw = -sa * (p1h - ch) + ca * (p1w - cw) + cw;
            return std::array<double, 3>{p1d, rh, rw};
        };
        int64_t i = 0;
        for (int d = 0; d < vol.shape[0]; ++d)
            for (int h = 0; h < vol.shape[1]; ++h)
                for (int w = 0; w < vol.shape[2]; ++w, ++i) {
                    const auto s = source(d, h, w);
                    out.data[i] = sample_trilinear(vol, s[0], s[1], s[2], -1.0f);
                    if (mout) mout->data[i] = sample_nearest(*mask, s[0], s[1], s[2], 0.0f);
                }
    }

    if (cfg.noise_sigma > 0.0) {
        for (int64_t i = 0; i < out.size(); ++i)
            out.data[i] += static_cast<float>(
                cfg.noise_sigma * rng::normal(ds, rng::kStreamAugment ^ 0xff, i));
    }
    for (auto& x : out.data) x = std::clamp(x, -1.0f, 1.0f);
    return {std::move(out), std::move(mout)};
}

SegMask extract_lung_mask_fallback(const Volume& normalized, double threshold) {
    if (normalized.domain != Domain::unit_normalized)
        throw ValidationError("lung extraction expects a normalized volume");
    const int D = normalized.shape[0], H = normalized.shape[1], W = normalized.shape[2];
    const int64_t n = normalized.size();
    std::vector<int32_t> comp(n, -1);
    std::vector<int64_t> comp_size;
    std::vector<bool> touches_border;
    const float t = static_cast<float>(threshold);

    auto idx = [&](int d, int h, int w) {
        return (static_cast<int64_t>(d) * H + h) * W + w;
    };
    for (int64_t s = 0; s < n; ++s) {
        if (comp[s] >= 0 || normalized.data[s] >= t) continue;
        const int32_t id = static_cast<int32_t>(comp_size.size());
        comp_size.push_back(0);
        touches_border.push_back(false);
        std::deque<int64_t> q{s};
        comp[s] = id;
        while (!q.empty()) {
            const int64_t c = q.front();
            q.pop_front();
            ++comp_size[id];
            const int d = static_cast<int>(c / (static_cast<int64_t>(H) * W));
            const int h = static_cast<int>((c / W) % H);
            const int w = static_cast<int>(c % W);
            if (d == 0 || h == 0 || w == 0 || d == D - 1 || h == H - 1 || w == W - 1)
                touches_border[id] = true;
            const int nb[6][3] = {{d - 1, h, w}, {d + 1, h, w}, {d, h - 1, w},
                                  {d, h + 1, w}, {d, h, w - 1}, {d, h, w + 1}};
            for (const auto& p : nb) {
                if (p[0] < 0 || p[1] < 0 || p[2] < 0 || p[0] >= D || p[1] >= H || p[2] >= W)
                    continue;
                const int64_t ni = idx(p[0], p[1], p[2]);
                if (comp[ni] < 0 && normalized.data[ni] < t) {
                    comp[ni] = id;
                    q.push_back(ni);
                }
            }
        }
    }
    std::vector<int32_t> keep;
    for (int32_t id = 0; id < static_cast<int32_t>(comp_size.size()); ++id)
        if (!touches_border[id]) keep.push_back(id);
    std::sort(keep.begin(), keep.end(),
              [&](int32_t a, int32_t b) { return comp_size[a] > comp_size[b]; });
    if (keep.empty())
        throw ValidationError("lung extraction failed: no interior low-intensity component");
    if (keep.size() > 2) keep.resize(2);

    SegMask m = SegMask::zeros(normalized.shape, MaskKind::binary);
    m.spacing = normalized.spacing;
    for (int64_t i = 0; i < n; ++i)
        if (comp[i] >= 0 &&
            std::find(keep.begin(), keep.end(), comp[i]) != keep.end())
            m.data[i] = 1.0f;
    return m;
}

PreprocessedCase preprocess_case(const Volume& vol,
                                 const std::optional<SegMask>& lesion,
                                 const std::optional<SegMask>& lung,
                                 const PreprocessConfig& cfg) {
    validate(cfg);
    Volume norm = vol.domain == Domain::raw_hu ? clip_and_normalize(vol, cfg) : vol;
    SegMask lung_mask = lung ? *lung : extract_lung_mask_fallback(norm);
    if (lung_mask.shape != norm.shape)
        throw ShapeError("preprocess_case: lung mask shape differs from volume");
    const Box box = mask_bbox(lung_mask, cfg.bbox_margin_voxels);

    PreprocessedCase out;
    out.vol = resize_volume(crop(norm, box), cfg.target_shape);
    out.lung = resize_mask(crop(lung_mask, box), cfg.target_shape);
    if (lesion) {
        if (lesion->shape != norm.shape)
            throw ShapeError("preprocess_case: lesion mask shape differs from volume");
        out.lesion = resize_mask(crop(*lesion, box), cfg.target_shape);
    }
    return out;
}

}  // namespace gasnet::preprocess
