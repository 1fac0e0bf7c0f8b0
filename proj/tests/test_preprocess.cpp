#include <doctest.h>

#include <cmath>

#include "gasnet/preprocess.hpp"
#include "gasnet/rng.hpp"

using namespace gasnet;
using namespace gasnet::preprocess;
using voldata::Domain;
using voldata::MaskKind;
using voldata::SegMask;
using voldata::Volume;

namespace {

Volume hu_volume(std::array<int, 3> shape, float fill = 0.0f) {
    Volume v = Volume::zeros(shape, Domain::raw_hu);
    std::fill(v.data.begin(), v.data.end(), fill);
    return v;
}

}  // namespace

TEST_CASE("clip_and_normalize maps the window onto [-1,1]") {
    PreprocessConfig cfg;  // [-1250, 250]
    Volume v = hu_volume({1, 1, 5});
    v.data = {-1250.0f, 250.0f, -500.0f, 10000.0f, -99999.0f};
    const Volume n = clip_and_normalize(v, cfg);
    CHECK(n.domain == Domain::unit_normalized);
    CHECK(n.data[0] == -1.0f);  // lower clip bound
    CHECK(n.data[1] == 1.0f);   // upper clip bound
    CHECK(n.data[2] == doctest::Approx(0.0).epsilon(1e-7));  // window midpoint
    CHECK(n.data[3] == 1.0f);   // saturated high
    CHECK(n.data[4] == -1.0f);  // saturated low

    v.domain = Domain::unit_normalized;
    CHECK_THROWS_AS(clip_and_normalize(v, cfg), ValidationError);
}

TEST_CASE("clip_and_normalize is monotone non-decreasing") {
    PreprocessConfig cfg;
    Volume v = hu_volume({1, 1, 256});
    for (int i = 0; i < 256; ++i)
        v.data[i] = static_cast<float>(-2000 + 20 * i + rng::uniform(1, 2, i) * 15);
    std::sort(v.data.begin(), v.data.end());
    const Volume n = clip_and_normalize(v, cfg);
    for (size_t i = 1; i < n.data.size(); ++i) CHECK(n.data[i] >= n.data[i - 1]);
}

TEST_CASE("lung bbox arithmetic, clamping and containment") {
    SUBCASE("exact box") {
        SegMask lung = SegMask::zeros({8, 12, 10}, MaskKind::binary);
        for (int d = 2; d <= 5; ++d)
            for (int h = 3; h <= 9; ++h)
                for (int w = 4; w <= 7; ++w) lung.at(d, h, w) = 1.0f;
        const Box b = mask_bbox(lung, 0);
        CHECK(b.shape() == std::array<int, 3>{4, 7, 4});

        Volume v = Volume::zeros({8, 12, 10}, Domain::unit_normalized);
        const Volume c = crop_to_lung_bbox(v, lung, 0);
        CHECK(c.shape == std::array<int, 3>{4, 7, 4});
    }
    SUBCASE("margin clamps at the volume edge") {
        SegMask lung = SegMask::zeros({6, 6, 6}, MaskKind::binary);
        lung.at(0, 1, 1) = 1.0f;
        lung.at(5, 4, 4) = 1.0f;
        const Box b = mask_bbox(lung, 2);
        CHECK(b.lo == std::array<int, 3>{0, 0, 0});
        CHECK(b.hi == std::array<int, 3>{5, 5, 5});
    }
    SUBCASE("empty mask is an error") {
        SegMask lung = SegMask::zeros({4, 4, 4}, MaskKind::binary);
        CHECK_THROWS_AS(mask_bbox(lung, 0), ValidationError);
    }
    SUBCASE("every positive voxel lies inside the crop (random blobs)") {
        for (uint64_t trial = 0; trial < 30; ++trial) {
            SegMask lung = SegMask::zeros({10, 14, 12}, MaskKind::binary);
            rng::Stream rs(0xc0de, trial);
            const int n = 1 + static_cast<int>(rs.next_int(0, 20));
            for (int i = 0; i < n; ++i)
                lung.at(static_cast<int>(rs.next_int(0, 9)),
                        static_cast<int>(rs.next_int(0, 13)),
                        static_cast<int>(rs.next_int(0, 11))) = 1.0f;
            const Box b = mask_bbox(lung, 1);
            for (int d = 0; d < 10; ++d)
                for (int h = 0; h < 14; ++h)
                    for (int w = 0; w < 12; ++w)
                        if (lung.at(d, h, w) != 0.0f) {
                            CHECK(d >= b.lo[0]);
                            CHECK(d <= b.hi[0]);
                            CHECK(h >= b.lo[1]);
                            CHECK(h <= b.hi[1]);
                            CHECK(w >= b.lo[2]);
                            CHECK(w <= b.hi[2]);
                        }
        }
    }
}

TEST_CASE("resize_volume: constants, identity and hand-computed corners") {
    SUBCASE("constant volume stays constant") {
        Volume v = Volume::zeros({3, 5, 4}, Domain::unit_normalized);
        std::fill(v.data.begin(), v.data.end(), 0.25f);
        const Volume r = resize_volume(v, {7, 3, 9});
        for (float x : r.data) CHECK(x == doctest::Approx(0.25).epsilon(1e-7));
    }
    SUBCASE("identity resize within 1e-6") {
        Volume v = Volume::zeros({4, 6, 5}, Domain::unit_normalized);
        for (int64_t i = 0; i < v.size(); ++i)
            v.data[i] = static_cast<float>(2 * rng::uniform(9, 1, i) - 1);
        const Volume r = resize_volume(v, v.shape);
        for (int64_t i = 0; i < v.size(); ++i)
            CHECK(std::abs(r.data[i] - v.data[i]) <= 1e-6f);
    }
    SUBCASE("2^3 corner impulse upscaled to 4^3: hand-computed trilinear weights") {
        Volume v = Volume::zeros({2, 2, 2}, Domain::unit_normalized);
        v.at(0, 0, 0) = 1.0f;
        const Volume r = resize_volume(v, {4, 4, 4});
        // source coordinate of output j is j/3; weight on corner 0 is (1 - j/3)
        CHECK(r.at(0, 0, 0) == doctest::Approx(1.0));
        CHECK(r.at(3, 3, 3) == doctest::Approx(0.0));
        CHECK(r.at(1, 1, 1) == doctest::Approx(8.0 / 27.0).epsilon(1e-6));
        CHECK(r.at(0, 0, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
        CHECK(r.at(2, 0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
        // range is contained in [min, max] of the input
        for (float x : r.data) {
            CHECK(x >= 0.0f);
            CHECK(x <= 1.0f);
        }
    }
}

TEST_CASE("resize_mask keeps label sets closed") {
    SUBCASE("binary stays binary") {
        SegMask m = SegMask::zeros({4, 4, 4}, MaskKind::binary);
        for (int64_t i = 0; i < m.size(); ++i)
            m.data[i] = rng::uniform(11, 1, i) > 0.5 ? 1.0f : 0.0f;
        const SegMask r = resize_mask(m, {7, 9, 5});
        for (float x : r.data) CHECK((x == 0.0f || x == 1.0f));
    }
    SUBCASE("pseudo3 stays in {0,1,2}") {
        SegMask m = SegMask::zeros({4, 4, 4}, MaskKind::pseudo3);
        for (int64_t i = 0; i < m.size(); ++i)
            m.data[i] = static_cast<float>(rng::hash3(12, 1, i) % 3);
        const SegMask r = resize_mask(m, {6, 6, 6});
        for (float x : r.data) CHECK((x == 0.0f || x == 1.0f || x == 2.0f));
    }
    SUBCASE("all ones stays all ones") {
        SegMask m = SegMask::zeros({3, 3, 3}, MaskKind::binary);
        std::fill(m.data.begin(), m.data.end(), 1.0f);
        const SegMask r = resize_mask(m, {5, 8, 2});
        for (float x : r.data) CHECK(x == 1.0f);
    }
}

TEST_CASE("resize transports voxel correspondence for volume/mask pairs") {
    // nearest-neighbor mask value at an output voxel must equal the mask at
    // the transported source coordinate; the volume samples the same spot
    Volume v = Volume::zeros({6, 8, 10}, Domain::unit_normalized);
    SegMask m = SegMask::zeros({6, 8, 10}, MaskKind::binary);
    for (int64_t i = 0; i < v.size(); ++i) {
        v.data[i] = static_cast<float>(2 * rng::uniform(21, 1, i) - 1);
        m.data[i] = rng::uniform(22, 1, i) > 0.5 ? 1.0f : 0.0f;
    }
    const std::array<int, 3> target{9, 5, 7};
    const SegMask rm = resize_mask(m, target);
    auto src = [](int o, int out_n, int in_n) {
        return out_n == 1 ? (in_n - 1) / 2.0 : static_cast<double>(o) * (in_n - 1) / (out_n - 1);
    };
    for (int d = 0; d < target[0]; ++d)
        for (int h = 0; h < target[1]; ++h)
            for (int w = 0; w < target[2]; ++w) {
                const int sd = static_cast<int>(std::llround(src(d, target[0], 6)));
                const int sh = static_cast<int>(std::llround(src(h, target[1], 8)));
                const int sw = static_cast<int>(std::llround(src(w, target[2], 10)));
                CHECK(rm.at(d, h, w) == m.at(sd, sh, sw));
            }
}

TEST_CASE("augment: degenerate config is the identity") {
    AugmentConfig cfg;
    cfg.crop_fraction = 1.0;
    cfg.noise_sigma = 0.0;
    cfg.max_rotation_deg = 0.0;
    cfg.seed = 5;
    Volume v = Volume::zeros({4, 6, 6}, Domain::unit_normalized);
    SegMask m = SegMask::zeros({4, 6, 6}, MaskKind::binary);
    for (int64_t i = 0; i < v.size(); ++i) {
        v.data[i] = static_cast<float>(2 * rng::uniform(31, 1, i) - 1);
        m.data[i] = rng::uniform(32, 1, i) > 0.5 ? 1.0f : 0.0f;
    }
    const auto [av, am] = augment(v, m, cfg, 17);
    CHECK(av.data == v.data);
    CHECK(am->data == m.data);
}

TEST_CASE("augment is deterministic in (seed, draw_index)") {
    AugmentConfig cfg;
    cfg.seed = 99;
    Volume v = Volume::zeros({4, 8, 8}, Domain::unit_normalized);
    for (int64_t i = 0; i < v.size(); ++i)
        v.data[i] = static_cast<float>(2 * rng::uniform(41, 1, i) - 1);
    const auto [a1, m1] = augment(v, std::nullopt, cfg, 3);
    const auto [a2, m2] = augment(v, std::nullopt, cfg, 3);
    const auto [a3, m3] = augment(v, std::nullopt, cfg, 4);
    CHECK(a1.data == a2.data);
    CHECK(a1.data != a3.data);
}

TEST_CASE("augment noise sigma matches a statistical oracle") {
    AugmentConfig cfg;
    cfg.crop_fraction = 1.0;
    cfg.max_rotation_deg = 0.0;
    cfg.noise_sigma = 0.05;
    cfg.seed = 7;
    Volume v = Volume::zeros({40, 50, 50}, Domain::unit_normalized);  // 1e5 voxels
    const auto [av, am] = augment(v, std::nullopt, cfg, 0);
    double s = 0, q = 0;
    const int64_t n = av.size();
    for (int64_t i = 0; i < n; ++i) s += av.data[i] - v.data[i];
    const double mean = s / n;
    for (int64_t i = 0; i < n; ++i) {
        const double d = av.data[i] - v.data[i] - mean;
        q += d * d;
    }
    const double sd = std::sqrt(q / (n - 1));
    CHECK(sd == doctest::Approx(0.05).epsilon(0.05));  // within 5%
}

TEST_CASE("augment clamps to [-1,1] and transports masks geometrically") {
    AugmentConfig cfg;
    cfg.crop_fraction = 0.8;
    cfg.max_rotation_deg = 15.0;
    cfg.noise_sigma = 0.1;
    cfg.seed = 13;
    Volume v = Volume::zeros({8, 16, 16}, Domain::unit_normalized);
    SegMask m = SegMask::zeros({8, 16, 16}, MaskKind::binary);
    for (int d = 3; d < 6; ++d)
        for (int h = 6; h < 10; ++h)
            for (int w = 6; w < 10; ++w) {
                v.at(d, h, w) = 0.9f;
                m.at(d, h, w) = 1.0f;
            }
    const auto [av, am] = augment(v, m, cfg, 2);
    for (float x : av.data) {
        CHECK(x >= -1.0f);
        CHECK(x <= 1.0f);
    }
    // mask stays binary and roughly tracks the bright region
    int64_t bright_and_mask = 0, mask_count = 0;
    for (int64_t i = 0; i < av.size(); ++i) {
        CHECK((am->data[i] == 0.0f || am->data[i] == 1.0f));
        if (am->data[i] == 1.0f) {
            ++mask_count;
            if (av.data[i] > 0.3f) ++bright_and_mask;
        }
    }
    REQUIRE(mask_count > 0);
    CHECK(static_cast<double>(bright_and_mask) / mask_count > 0.8);
}

TEST_CASE("fallback lung extractor finds interior low-intensity components") {
    Volume v = Volume::zeros({10, 20, 20}, Domain::unit_normalized);
    std::fill(v.data.begin(), v.data.end(), 0.6f);  // body
    // air border
    for (int d = 0; d < 10; ++d)
        for (int h = 0; h < 20; ++h)
            for (int w = 0; w < 20; ++w)
                if (d == 0 || h == 0 || w == 0 || d == 9 || h == 19 || w == 19)
                    v.at(d, h, w) = -0.8f;
    // two interior dark blobs
    for (int d = 3; d < 7; ++d)
        for (int h = 4; h < 9; ++h)
            for (int w = 3; w < 8; ++w) v.at(d, h, w) = -0.5f;
    for (int d = 3; d < 7; ++d)
        for (int h = 4; h < 9; ++h)
            for (int w = 12; w < 17; ++w) v.at(d, h, w) = -0.5f;
    const SegMask lung = extract_lung_mask_fallback(v);
    int64_t count = 0;
    for (float x : lung.data) count += x != 0.0f;
    CHECK(count == 2 * 4 * 5 * 5);
    CHECK(lung.at(4, 5, 5) == 1.0f);
    CHECK(lung.at(4, 5, 14) == 1.0f);
    CHECK(lung.at(0, 0, 0) == 0.0f);  // border air excluded
}

TEST_CASE("preprocess_case end to end on a raw HU volume") {
    PreprocessConfig cfg;
    cfg.target_shape = {8, 16, 16};
    cfg.bbox_margin_voxels = 1;
    Volume v = Volume::zeros({10, 20, 20}, Domain::raw_hu);
    std::fill(v.data.begin(), v.data.end(), 100.0f);
    SegMask lung = SegMask::zeros({10, 20, 20}, MaskKind::binary);
    SegMask lesion = SegMask::zeros({10, 20, 20}, MaskKind::binary);
    for (int d = 2; d < 8; ++d)
        for (int h = 4; h < 16; ++h)
            for (int w = 4; w < 16; ++w) {
                lung.at(d, h, w) = 1.0f;
                v.at(d, h, w) = -700.0f;
            }
    lesion.at(5, 10, 10) = 1.0f;
    const auto pc = preprocess_case(v, lesion, lung, cfg);
    CHECK(pc.vol.shape == cfg.target_shape);
    CHECK(pc.vol.domain == Domain::unit_normalized);
    CHECK(pc.lung.shape == cfg.target_shape);
    REQUIRE(pc.lesion.has_value());
    CHECK(pc.lesion->shape == cfg.target_shape);
    int64_t lesion_count = 0;
    for (float x : pc.lesion->data) lesion_count += x != 0.0f;
    CHECK(lesion_count > 0);
}
