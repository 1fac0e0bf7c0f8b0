#pragma once

// Deterministic intensity/geometry normalization and seeded training-time
// augmentation. All functions are pure; augmentation randomness is
// counter-based on (cfg.seed, draw_index).

#include <optional>
#include <utility>

#include "gasnet/voldata.hpp"

namespace gasnet::preprocess {

using voldata::Domain;
using voldata::MaskKind;
using voldata::SegMask;
using voldata::Volume;

struct PreprocessConfig {
    double clip_lo = -1250.0;  // HU
    double clip_hi = 250.0;
    std::array<int, 3> target_shape{40, 160, 160};
    int bbox_margin_voxels = 2;
};

struct AugmentConfig {
    double crop_fraction = 0.9;
    double noise_sigma = 0.02;  // normalized units
    double max_rotation_deg = 10.0;
    uint64_t seed = 0;
};

void validate(const PreprocessConfig& c);
void validate(const AugmentConfig& c);

// v -> 2*(clamp(v, lo, hi) - lo)/(hi - lo) - 1
Volume clip_and_normalize(const Volume& vol, const PreprocessConfig& cfg);

// Axis-aligned bounding box, inclusive on both ends.
struct Box {
    std::array<int, 3> lo{0, 0, 0};
    std::array<int, 3> hi{0, 0, 0};
    std::array<int, 3> shape() const {
        return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
    }
};

// Bounding box of mask positives dilated by margin, clamped to bounds.
// Throws on an all-zero mask.
Box mask_bbox(const SegMask& mask, int margin);

Volume crop(const Volume& vol, const Box& box);
SegMask crop(const SegMask& mask, const Box& box);
Volume crop_to_lung_bbox(const Volume& vol, const SegMask& lung, int margin);

// Trilinear; output range stays within [min(vol), max(vol)].
Volume resize_volume(const Volume& vol, std::array<int, 3> target);
// Nearest neighbor; label set preserved exactly.
SegMask resize_mask(const SegMask& mask, std::array<int, 3> target);

// Identical geometric transform for volume and optional mask (mask via
// nearest neighbor, no noise on the mask). Output clamped to [-1,1].
std::pair<Volume, std::optional<SegMask>> augment(const Volume& vol,
                                                  const std::optional<SegMask>& mask,
                                                  const AugmentConfig& cfg,
                                                  uint64_t draw_index);

// Threshold-plus-largest-components lung extractor for phantoms without a
// precomputed lung mask: voxels below `threshold` (normalized units) grouped
// by 6-connectivity, components touching the volume boundary discarded, the
// up-to-two largest kept.
SegMask extract_lung_mask_fallback(const Volume& normalized, double threshold = -0.25);

struct PreprocessedCase {
    Volume vol;
    std::optional<SegMask> lesion;
    SegMask lung;
};

// Full per-case pipeline: normalize (when raw HU), obtain lung mask (given
// or fallback), crop to the lung box, resize everything to target_shape.
PreprocessedCase preprocess_case(const Volume& vol,
                                 const std::optional<SegMask>& lesion,
                                 const std::optional<SegMask>& lung,
                                 const PreprocessConfig& cfg);

}  // namespace gasnet::preprocess
