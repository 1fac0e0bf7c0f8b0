#include "gasnet/report.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace gasnet::report {

using json = nlohmann::json;

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4],
               const std::vector<uint8_t>& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32(out, crc);
}

}  // namespace

void write_png(const ImageRGB& img, const fs::path& path) {
    if (img.w <= 0 || img.h <= 0) throw ValidationError("write_png: empty image");
    // raw scanlines with filter byte 0
    std::vector<uint8_t> raw(static_cast<size_t>(img.h) * (1 + img.w * 3));
    for (int y = 0; y < img.h; ++y) {
        uint8_t* row = raw.data() + static_cast<size_t>(y) * (1 + img.w * 3);
        row[0] = 0;
        std::memcpy(row + 1, img.px.data() + static_cast<size_t>(y) * img.w * 3,
                    static_cast<size_t>(img.w) * 3);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> deflated(bound);
    if (compress2(deflated.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) !=
        Z_OK)
        throw IoError("write_png: deflate failed");
    deflated.resize(bound);

    std::vector<uint8_t> out{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(img.w));
    put_u32(ihdr, static_cast<uint32_t>(img.h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // RGB
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", deflated);
    put_chunk(out, "IEND", {});

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("unwritable destination: " + path.string());
    os.write(reinterpret_cast<const char*>(out.data()),
             static_cast<std::streamsize>(out.size()));
    if (!os) throw IoError("write failed: " + path.string());
}

namespace {

void draw_line(ImageRGB& img, int x0, int y0, int x1, int y1,
               std::array<uint8_t, 3> c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        img.set(x0, y0, c[0], c[1], c[2]);
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

}  // namespace

ImageRGB plot_series(const std::vector<Series>& series, int width, int height) {
    ImageRGB img(width, height);
    const int ml = 50, mr = 15, mt = 15, mb = 35;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
    }
    if (ymin > ymax) {
        ymin = 0;
        ymax = 1;
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    const auto px = [&](double x) {
        return ml + static_cast<int>((x - xmin) / (xmax - xmin) * (width - ml - mr));
    };
    const auto py = [&](double y) {
        return height - mb -
               static_cast<int>((y - ymin) / (ymax - ymin) * (height - mt - mb));
    };
    // frame + quarter gridlines
    for (int gx = 0; gx <= 4; ++gx)
        draw_line(img, px(xmin + gx * (xmax - xmin) / 4), py(ymin),
                  px(xmin + gx * (xmax - xmin) / 4), py(ymax), {230, 230, 230});
    for (int gy = 0; gy <= 4; ++gy)
        draw_line(img, px(xmin), py(ymin + gy * (ymax - ymin) / 4), px(xmax),
                  py(ymin + gy * (ymax - ymin) / 4), {230, 230, 230});
    draw_line(img, ml, mt, ml, height - mb, {0, 0, 0});
    draw_line(img, ml, height - mb, width - mr, height - mb, {0, 0, 0});
    // legend swatches, top-left
    int ly = mt + 4;
    for (const auto& s : series) {
        for (int i = 0; i < 18; ++i)
            for (int j = 0; j < 6; ++j)
                img.set(ml + 6 + i, ly + j, s.color[0], s.color[1], s.color[2]);
        ly += 10;
    }
    for (const auto& s : series) {
        int lastx = 0, lasty = 0;
        bool first = true;
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            const int x = px(s.x[i]), y = py(s.y[i]);
            if (!first) draw_line(img, lastx, lasty, x, y, s.color);
            lastx = x;
            lasty = y;
            first = false;
        }
    }
    return img;
}

void render_training_curves(const fs::path& log_path, const fs::path& out_dir) {
    std::ifstream is(log_path);
    if (!is) throw IoError("missing training log: " + log_path.string());
    fs::create_directories(out_dir);

    Series total_gs{"total_gs", {}, {}, {180, 40, 40}};
    Series adv_d{"adv_d", {}, {}, {40, 60, 180}};
    Series seg_labeled{"seg_labeled", {}, {}, {40, 140, 60}};
    Series val_dice{"val_dice", {}, {}, {180, 40, 40}};
    Series d_is{"val_d_is", {}, {}, {40, 60, 180}};
    Series d_ih{"val_d_ih", {}, {}, {40, 140, 60}};
    Series d_id{"val_d_id", {}, {}, {200, 140, 40}};

    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception&) {
            continue;  // partial last line of an interrupted run
        }
        const double iter = j.value("iter", 0.0);
        const auto& l = j["losses"];
        const std::string phase = j.value("phase", "");
        auto grab = [&](Series& s, const char* key) {
            if (l.contains(key)) {
                s.x.push_back(iter);
                s.y.push_back(l[key].get<double>());
            }
        };
        if (phase == "gs" || phase == "baseline") {
            grab(total_gs, "total_gs");
            grab(seg_labeled, "seg_labeled");
        } else if (phase == "d") {
            grab(adv_d, "adv_d");
        } else if (phase == "val") {
            grab(val_dice, "val_dice");
            grab(d_is, "val_d_is");
            grab(d_ih, "val_d_ih");
            grab(d_id, "val_d_id");
        }
    }
    write_png(plot_series({total_gs, adv_d, seg_labeled}), out_dir / "losses.png");
    write_png(plot_series({val_dice, d_is, d_ih, d_id}), out_dir / "validation.png");
}

namespace {

uint8_t gray_of(float v) {
    const float t = std::clamp((v + 1.0f) * 0.5f, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::lround(t * 255.0f));
}

}  // namespace

ImageRGB midslice_gray(const Volume& v, int scale) {
    const int d = v.shape[0] / 2;
    ImageRGB img(v.shape[2] * scale, v.shape[1] * scale);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const uint8_t g = gray_of(v.at(d, y / scale, x / scale));
            img.set(x, y, g, g, g);
        }
    return img;
}

ImageRGB midslice_overlay(const Volume& v, const SegMask& pred, const SegMask& gt,
                          int scale) {
    ImageRGB img = midslice_gray(v, scale);
    const int d = v.shape[0] / 2;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const bool p = pred.at(d, y / scale, x / scale) != 0.0f;
            const bool g = gt.at(d, y / scale, x / scale) != 0.0f;
            if (p && g) img.set(x, y, 150, 90, 40);        // TP brown
            else if (p && !g) img.set(x, y, 230, 210, 40); // FP yellow
            else if (!p && g) img.set(x, y, 60, 190, 60);  // FN green
        }
    return img;
}

ImageRGB midslice_mask_tint(const Volume& v, const SegMask& mask, int scale) {
    ImageRGB img = midslice_gray(v, scale);
    const int d = v.shape[0] / 2;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const float m = mask.at(d, y / scale, x / scale);
            if (m == 1.0f) img.set(x, y, 60, 190, 60);        // lesion
            else if (m == 2.0f) img.set(x, y, 230, 210, 40);  // ignored
        }
    return img;
}

ImageRGB hstack(const std::vector<ImageRGB>& imgs, int pad) {
    int w = pad, h = 0;
    for (const auto& im : imgs) {
        w += im.w + pad;
        h = std::max(h, im.h);
    }
    ImageRGB out(w, h + 2 * pad, 20);
    int x0 = pad;
    for (const auto& im : imgs) {
        for (int y = 0; y < im.h; ++y)
            for (int x = 0; x < im.w; ++x) {
                const auto* p = &im.px[(static_cast<size_t>(y) * im.w + x) * 3];
                out.set(x0 + x, pad + y, p[0], p[1], p[2]);
            }
        x0 += im.w + pad;
    }
    return out;
}

}  // namespace gasnet::report
