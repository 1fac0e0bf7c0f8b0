#include "gasnet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>

#include "gasnet/preprocess.hpp"
#include "gasnet/rng.hpp"

namespace gasnet::phantom {

using voldata::CaseRecord;
using voldata::ClassLabel;
using voldata::Domain;
using voldata::MaskKind;
namespace fs = voldata::fs;

namespace {

// Normalized-unit shifts map to HU through the default clip window
// [-1250, 250]: 1 unit == 750 HU.
constexpr double kHuPerUnit = 750.0;
constexpr double kAirHu = -950.0;
constexpr double kBodyHu = 30.0;
constexpr double kLungHu = -800.0;

struct Vec3 {
    double d, h, w;
};

// Trilinear value noise in [-1, 1] on an integer lattice keyed by (seed, cell).
double value_noise(uint64_t seed, uint64_t stream, double d, double h, double w) {
    const auto lat = [&](int64_t i, int64_t j, int64_t k) {
        const uint64_t key = static_cast<uint64_t>(i * 73856093LL) ^
                             static_cast<uint64_t>(j * 19349663LL) ^
                             static_cast<uint64_t>(k * 83492791LL);
        return 2.0 * rng::uniform(seed, stream, key) - 1.0;
    };
    const int64_t i0 = static_cast<int64_t>(std::floor(d));
    const int64_t j0 = static_cast<int64_t>(std::floor(h));
    const int64_t k0 = static_cast<int64_t>(std::floor(w));
    const double fd = d - i0, fh = h - j0, fw = w - k0;
    double acc = 0.0;
    for (int a = 0; a <= 1; ++a)
        for (int b = 0; b <= 1; ++b)
            for (int c = 0; c <= 1; ++c)
                acc += (a ? fd : 1 - fd) * (b ? fh : 1 - fh) * (c ? fw : 1 - fw) *
                       lat(i0 + a, j0 + b, k0 + c);
    return acc;
}

double multiscale_noise(uint64_t seed, uint64_t stream, double d, double h, double w) {
    return 0.65 * value_noise(seed, stream, d / 8.0, h / 8.0, w / 8.0) +
           0.35 * value_noise(seed, stream ^ 0x77, d / 3.0, h / 3.0, w / 3.0);
}

struct Ellipsoid {
    Vec3 c, r;
    bool contains(int d, int h, int w) const {
        const double x = (d - c.d) / r.d, y = (h - c.h) / r.h, z = (w - c.w) / r.w;
        return x * x + y * y + z * z <= 1.0;
    }
};

}  // namespace

void validate(const PhantomConfig& cfg) {
    for (int s : cfg.shape)
        if (s < 8) throw ConfigError("phantom: shape axes must be >= 8");
    for (int n : {cfg.n_healthy, cfg.n_diseased, cfg.n_voxel_labeled, cfg.n_val,
                  cfg.n_test_diseased, cfg.n_test_healthy})
        if (n < 0) throw ConfigError("phantom: case counts must be >= 0");
    if (cfg.lesion_count[0] < 1 || cfg.lesion_count[1] < cfg.lesion_count[0])
        throw ConfigError("phantom: bad lesion_count range");
    if (cfg.lesion_radius[0] <= 0 || cfg.lesion_radius[1] < cfg.lesion_radius[0])
        throw ConfigError("phantom: bad lesion_radius range");
    if (cfg.intensity_shift[0] < 0 || cfg.intensity_shift[1] > 1.0 ||
        cfg.intensity_shift[1] < cfg.intensity_shift[0])
        throw ConfigError("phantom: intensity_shift must be within [0,1]");
    if (cfg.vessel_count[0] < 0 || cfg.vessel_count[1] < cfg.vessel_count[0])
        throw ConfigError("phantom: bad vessel_count range");
}

PhantomCase gen_case(const PhantomConfig& cfg, int case_index, bool diseased) {
    validate(cfg);
    const uint64_t cs = rng::splitmix64(cfg.seed ^ (0x9e3779b97f4a7c15ull * (case_index + 1)));
    rng::Stream geo(cs, rng::kStreamPhantom);

    const int D = cfg.shape[0], H = cfg.shape[1], W = cfg.shape[2];
    PhantomCase out;
    out.vol = Volume::zeros(cfg.shape, Domain::raw_hu);
    out.lung = SegMask::zeros(cfg.shape, MaskKind::binary);
    out.lesion = SegMask::zeros(cfg.shape, MaskKind::binary);

    auto jitter = [&](double lo, double hi) { return lo + (hi - lo) * geo.next_uniform(); };

    const Ellipsoid body{{(D - 1) / 2.0 + jitter(-0.4, 0.4),
                          (H - 1) / 2.0 + jitter(-1.0, 1.0),
                          (W - 1) / 2.0 + jitter(-1.0, 1.0)},
                         {0.46 * D * jitter(0.95, 1.05), 0.44 * H * jitter(0.95, 1.05),
                          0.47 * W * jitter(0.95, 1.05)}};
    Ellipsoid lungs[2];
    for (int side = 0; side < 2; ++side) {
        const double sign = side == 0 ? -1.0 : 1.0;
        lungs[side] = Ellipsoid{
            {(D - 1) / 2.0 + jitter(-0.5, 0.5), (H - 1) / 2.0 + jitter(-1.5, 1.5),
             (W - 1) / 2.0 + sign * 0.22 * W * jitter(0.9, 1.1)},
            {0.36 * D * jitter(0.9, 1.1), 0.33 * H * jitter(0.9, 1.1),
             0.16 * W * jitter(0.9, 1.1)}};
    }

    // base anatomy + smooth texture
    const double tex_hu = cfg.texture_sigma * kHuPerUnit;
    for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double hu = kAirHu;
                if (body.contains(d, h, w)) hu = kBodyHu;
                const bool in_lung = lungs[0].contains(d, h, w) || lungs[1].contains(d, h, w);
                if (in_lung) {
                    hu = kLungHu;
                    out.lung.at(d, h, w) = 1.0f;
                }
                hu += tex_hu * multiscale_noise(cs, 0x51, d, h, w);
                hu += 0.3 * tex_hu * (2.0 * rng::uniform(cs, 0x52,
                                      (static_cast<uint64_t>(d) * H + h) * W + w) - 1.0);
                out.vol.at(d, h, w) = static_cast<float>(hu);
            }

    // collect lung voxels once; used for vessel/lesion placement
    std::vector<std::array<int, 3>> lung_voxels;
    for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
                if (out.lung.at(d, h, w) != 0.0f) lung_voxels.push_back({d, h, w});
    if (lung_voxels.empty()) throw ValidationError("phantom: degenerate lungs");

    // vessel-like bright streaks, present in every case
    const int n_vessels = static_cast<int>(geo.next_int(2 * cfg.vessel_count[0],
                                                        2 * cfg.vessel_count[1]));
    for (int v = 0; v < n_vessels; ++v) {
        const auto& start = lung_voxels[static_cast<size_t>(
            geo.next_int(0, static_cast<int64_t>(lung_voxels.size()) - 1))];
        Vec3 pos{static_cast<double>(start[0]), static_cast<double>(start[1]),
                 static_cast<double>(start[2])};
        Vec3 dir{geo.next_normal() * 0.3, geo.next_normal(), geo.next_normal()};
        const double nrm = std::sqrt(dir.d * dir.d + dir.h * dir.h + dir.w * dir.w) + 1e-9;
        dir = {dir.d / nrm, dir.h / nrm, dir.w / nrm};
        const double shift_hu =
            jitter(cfg.vessel_shift[0], cfg.vessel_shift[1]) * kHuPerUnit;
        const int len = static_cast<int>(geo.next_int(8, 20));
        for (int s = 0; s < len; ++s) {
            const int pd = static_cast<int>(std::llround(pos.d));
            const int ph = static_cast<int>(std::llround(pos.h));
            const int pw = static_cast<int>(std::llround(pos.w));
            for (int dd = -1; dd <= 1; ++dd)
                for (int hh = -1; hh <= 1; ++hh)
                    for (int ww = -1; ww <= 1; ++ww) {
                        const int qd = pd + dd, qh = ph + hh, qw = pw + ww;
                        if (qd < 0 || qh < 0 || qw < 0 || qd >= D || qh >= H || qw >= W)
                            continue;
                        if (out.lung.at(qd, qh, qw) == 0.0f) continue;
                        if (dd * dd + hh * hh + ww * ww > 1) continue;  // thin tube
                        out.vol.at(qd, qh, qw) = static_cast<float>(
                            kLungHu + shift_hu +
                            tex_hu * multiscale_noise(cs, 0x51, qd, qh, qw));
                    }
            pos = {pos.d + dir.d, pos.h + dir.h, pos.w + dir.w};
            dir.h += 0.15 * geo.next_normal();
            dir.w += 0.15 * geo.next_normal();
            const double n2 =
                std::sqrt(dir.d * dir.d + dir.h * dir.h + dir.w * dir.w) + 1e-9;
            dir = {dir.d / n2, dir.h / n2, dir.w / n2};
        }
    }

    if (diseased) {
        const int n_lesions =
            static_cast<int>(geo.next_int(cfg.lesion_count[0], cfg.lesion_count[1]));
        for (int li = 0; li < n_lesions; ++li) {
            // find a center whose core ball fits inside the lung
            int cd = -1, ch = -1, cw = -1;
            double radius = 0.0;
            bool placed = false;
            for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
                const auto& cand = lung_voxels[static_cast<size_t>(
                    geo.next_int(0, static_cast<int64_t>(lung_voxels.size()) - 1))];
                radius = jitter(cfg.lesion_radius[0], cfg.lesion_radius[1]);
                const int core = std::max(1, static_cast<int>(std::floor(radius * 0.65)));
                bool fits = true;
                for (int dd = -core; dd <= core && fits; ++dd)
                    for (int hh = -core; hh <= core && fits; ++hh)
                        for (int ww = -core; ww <= core && fits; ++ww) {
                            if (dd * dd + hh * hh + ww * ww > core * core) continue;
                            const int qd = cand[0] + dd, qh = cand[1] + hh, qw = cand[2] + ww;
                            if (qd < 0 || qh < 0 || qw < 0 || qd >= D || qh >= H ||
                                qw >= W || out.lung.at(qd, qh, qw) == 0.0f)
                                fits = false;
                        }
                if (fits) {
                    cd = cand[0];
                    ch = cand[1];
                    cw = cand[2];
                    placed = true;
                }
            }
            if (!placed)
                throw ValidationError(
                    "phantom: unsatisfiable geometry, lesion radius does not fit the lung");

            const double shift_hu =
                jitter(cfg.intensity_shift[0], cfg.intensity_shift[1]) * kHuPerUnit;
            const uint64_t shape_stream = 0x60 + static_cast<uint64_t>(li);
            const int reach = static_cast<int>(std::ceil(radius * 1.35)) + 1;
            for (int dd = -reach; dd <= reach; ++dd)
                for (int hh = -reach; hh <= reach; ++hh)
                    for (int ww = -reach; ww <= reach; ++ww) {
                        const int qd = cd + dd, qh = ch + hh, qw = cw + ww;
                        if (qd < 0 || qh < 0 || qw < 0 || qd >= D || qh >= H || qw >= W)
                            continue;
                        if (out.lung.at(qd, qh, qw) == 0.0f) continue;  // stay inside lung
                        const double dist =
                            std::sqrt(double(dd) * dd + double(hh) * hh + double(ww) * ww);
                        const double rough =
                            radius * (1.0 + 0.35 * multiscale_noise(cs, shape_stream,
                                                                    qd * 2.0, qh * 2.0,
                                                                    qw * 2.0));
                        if (dist > rough) continue;
                        out.lesion.at(qd, qh, qw) = 1.0f;
                        out.vol.at(qd, qh, qw) = static_cast<float>(
                            kLungHu + shift_hu +
                            tex_hu * multiscale_noise(cs, 0x51, qd, qh, qw));
                    }
        }
    }
    return out;
}

DatasetManifest gen_phantom_dataset(const PhantomConfig& cfg, const fs::path& out_dir) {
    validate(cfg);
    fs::create_directories(out_dir);
    if (!fs::is_directory(out_dir))
        throw IoError("phantom: output directory not writable: " + out_dir.string());

    DatasetManifest manifest;
    int case_index = 0, n_h = 0, n_d = 0;

    auto emit = [&](bool diseased, const std::string& split) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%c%03d", diseased ? 'd' : 'h',
                      diseased ? n_d++ : n_h++);
        const std::string id(buf);
        const PhantomCase pc = gen_case(cfg, case_index++, diseased);
        CaseRecord rec;
        rec.case_id = id;
        rec.class_label = diseased ? ClassLabel::diseased : ClassLabel::healthy;
        rec.volume_path = out_dir / (id + ".rawvol");
        rec.lung_mask_path = out_dir / (id + "_lung.rawmask");
        rec.lesion_mask_path = out_dir / (id + "_lesion.rawmask");
        voldata::save_volume(pc.vol, rec.volume_path);
        voldata::save_mask(pc.lung, *rec.lung_mask_path);
        voldata::save_mask(pc.lesion, *rec.lesion_mask_path);
        manifest.split(split).push_back(rec);
    };

    for (int i = 0; i < cfg.n_healthy; ++i) emit(false, "train_volume_level");
    for (int i = 0; i < cfg.n_diseased; ++i) emit(true, "train_volume_level");
    for (int i = 0; i < cfg.n_voxel_labeled; ++i) emit(true, "train_voxel_level");
    for (int i = 0; i < cfg.n_val; ++i) emit(true, "val");
    for (int i = 0; i < cfg.n_test_diseased; ++i) emit(true, "test");
    for (int i = 0; i < cfg.n_test_healthy; ++i) emit(false, "test");

    voldata::save_manifest(manifest, out_dir / "manifest.json");
    return manifest;
}

SeparabilityReport lesion_separability_report(const DatasetManifest& manifest) {
    preprocess::PreprocessConfig pp;  // default clip window
    SeparabilityReport rep;
    double gap_sum = 0.0;
    for (const auto& name : DatasetManifest::split_names()) {
        for (const auto& rec : manifest.split(name)) {
            if (rec.class_label != ClassLabel::diseased || !rec.lesion_mask_path ||
                !rec.lung_mask_path)
                continue;
            Volume v = voldata::load_volume(rec.volume_path);
            if (v.domain == Domain::raw_hu) v = preprocess::clip_and_normalize(v, pp);
            const SegMask lesion = voldata::load_mask(*rec.lesion_mask_path);
            const SegMask lung = voldata::load_mask(*rec.lung_mask_path);
            double les_sum = 0, les_n = 0, lng_sum = 0, lng_n = 0;
            for (int64_t i = 0; i < v.size(); ++i) {
                if (lesion.data[i] != 0.0f) {
                    les_sum += v.data[i];
                    ++les_n;
                } else if (lung.data[i] != 0.0f) {
                    lng_sum += v.data[i];
                    ++lng_n;
                }
            }
            if (les_n == 0 || lng_n == 0) continue;
            gap_sum += les_sum / les_n - lng_sum / lng_n;
            ++rep.n_cases;
        }
    }
    if (rep.n_cases == 0) throw ValidationError("separability: no diseased cases with masks");
    rep.gap = gap_sum / rep.n_cases;
    rep.in_band = rep.gap >= 0.3 && rep.gap <= 0.7;
    if (!rep.in_band)
        std::cerr << "[phantom] warning: lesion separability gap " << rep.gap
                  << " outside target band [0.3, 0.7]\n";
    return rep;
}

}  // namespace gasnet::phantom
