#pragma once

// Rendering: PNG writer (zlib-backed), training-curve charts from the
// NDJSON log, and mid-slice overlays (TP brown, FP yellow, FN green).

#include <filesystem>
#include <vector>

#include "gasnet/voldata.hpp"

namespace gasnet::report {

namespace fs = std::filesystem;
using voldata::SegMask;
using voldata::Volume;

struct ImageRGB {
    int w = 0, h = 0;
    std::vector<uint8_t> px;  // rgb, row-major

    ImageRGB() = default;
    ImageRGB(int width, int height, uint8_t fill = 255)
        : w(width), h(height), px(static_cast<size_t>(width) * height * 3, fill) {}
    void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
        if (x < 0 || y < 0 || x >= w || y >= h) return;
        auto* p = &px[(static_cast<size_t>(y) * w + x) * 3];
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }
};

void write_png(const ImageRGB& img, const fs::path& path);

struct Series {
    std::string name;
    std::vector<double> x, y;
    std::array<uint8_t, 3> color{0, 0, 0};
};

// Simple autoscaled polyline chart.
ImageRGB plot_series(const std::vector<Series>& series, int width = 900, int height = 500);

// Writes losses.png (per-phase loss curves) and validation.png (val Dice +
// discriminator probe scores) from a training log.
void render_training_curves(const fs::path& log_path, const fs::path& out_dir);

// Middle depth slice as grayscale; value range [-1,1].
ImageRGB midslice_gray(const Volume& v, int scale = 2);

// Prediction-vs-GT coloring on the mid slice: brown TP, yellow FP, green FN.
ImageRGB midslice_overlay(const Volume& v, const SegMask& pred, const SegMask& gt,
                          int scale = 2);

// Mask-only tint (used for pseudo-label dumps: label 1 green, 2 yellow).
ImageRGB midslice_mask_tint(const Volume& v, const SegMask& mask, int scale = 2);

// Side-by-side concatenation.
ImageRGB hstack(const std::vector<ImageRGB>& imgs, int pad = 4);

}  // namespace gasnet::report
