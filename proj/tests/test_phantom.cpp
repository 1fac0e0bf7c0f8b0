#include <doctest.h>

#include <fstream>

#include "gasnet/phantom.hpp"
#include "gasnet/preprocess.hpp"

using namespace gasnet;
using namespace gasnet::phantom;
using voldata::ClassLabel;
using voldata::Domain;
namespace fs = std::filesystem;

namespace {

PhantomConfig small_cfg(uint64_t seed) {
    PhantomConfig cfg;
    cfg.shape = {12, 32, 32};
    cfg.n_healthy = 2;
    cfg.n_diseased = 2;
    cfg.n_voxel_labeled = 1;
    cfg.n_val = 1;
    cfg.n_test_diseased = 1;
    cfg.n_test_healthy = 1;
    cfg.lesion_radius = {2.0, 4.0};
    cfg.seed = seed;
    return cfg;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("gasnet_phantom_" + name);
    fs::remove_all(p);
    return p;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("phantom dataset: counts, all-zero healthy lesions, loadable manifest") {
    const auto dir = fresh_dir("basic");
    const auto manifest = gen_phantom_dataset(small_cfg(1), dir);
    CHECK(manifest.train_volume_level.size() == 4);
    CHECK(manifest.train_voxel_level.size() == 1);
    CHECK(manifest.val.size() == 1);
    CHECK(manifest.test.size() == 2);

    // generator/loader contract: reload passes all validation
    const auto reloaded = voldata::load_manifest(dir / "manifest.json");
    CHECK_NOTHROW(voldata::validate_manifest(reloaded, true, true));

    int healthy_seen = 0;
    for (const auto& rec : reloaded.train_volume_level) {
        if (rec.class_label != ClassLabel::healthy) continue;
        ++healthy_seen;
        const auto lesion = voldata::load_mask(*rec.lesion_mask_path);
        for (float x : lesion.data) CHECK(x == 0.0f);
    }
    CHECK(healthy_seen == 2);
}

TEST_CASE("every lesion voxel lies inside the lung mask") {
    const auto cfg = small_cfg(7);
    for (int idx : {0, 1, 2, 3}) {
        const PhantomCase pc = gen_case(cfg, idx, true);
        int64_t lesion_voxels = 0;
        for (int64_t i = 0; i < pc.lesion.size(); ++i)
            if (pc.lesion.data[i] != 0.0f) {
                ++lesion_voxels;
                REQUIRE(pc.lung.data[i] == 1.0f);
            }
        CHECK(lesion_voxels > 0);
    }
}

TEST_CASE("write-then-read equality for generated volumes") {
    const auto dir = fresh_dir("roundtrip");
    const auto cfg = small_cfg(3);
    const auto manifest = gen_phantom_dataset(cfg, dir);
    const PhantomCase pc = gen_case(cfg, 0, false);  // first emitted case is h000
    const auto loaded = voldata::load_volume(manifest.train_volume_level[0].volume_path);
    CHECK(loaded.domain == Domain::raw_hu);
    CHECK(loaded.data == pc.vol.data);  // bit-for-bit
}

TEST_CASE("same seed produces byte-identical datasets") {
    const auto d1 = fresh_dir("det1");
    const auto d2 = fresh_dir("det2");
    gen_phantom_dataset(small_cfg(9), d1);
    gen_phantom_dataset(small_cfg(9), d2);
    for (const auto& e : fs::directory_iterator(d1)) {
        const auto other = d2 / e.path().filename();
        REQUIRE(fs::exists(other));
        CHECK(slurp(e.path()) == slurp(other));
    }
    const auto d3 = fresh_dir("det3");
    gen_phantom_dataset(small_cfg(10), d3);
    CHECK(slurp(d1 / "h000.rawvol") != slurp(d3 / "h000.rawvol"));
}

TEST_CASE("separability gap tracks the configured shift") {
    SUBCASE("shift 0.5, no texture, no vessels -> gap ~ 0.5") {
        auto cfg = small_cfg(5);
        cfg.intensity_shift = {0.5, 0.5};
        cfg.texture_sigma = 0.0;
        cfg.vessel_count = {0, 0};
        const auto dir = fresh_dir("sep1");
        const auto manifest = gen_phantom_dataset(cfg, dir);
        const auto rep = lesion_separability_report(manifest);
        CHECK(rep.gap == doctest::Approx(0.5).epsilon(2e-3));
        CHECK(rep.in_band);
    }
    SUBCASE("shift ~0 -> gap ~ 0 with warning flag") {
        auto cfg = small_cfg(6);
        cfg.intensity_shift = {0.001, 0.002};
        cfg.texture_sigma = 0.0;
        cfg.vessel_count = {0, 0};
        const auto dir = fresh_dir("sep2");
        const auto manifest = gen_phantom_dataset(cfg, dir);
        const auto rep = lesion_separability_report(manifest);
        CHECK(std::abs(rep.gap) < 0.05);
        CHECK_FALSE(rep.in_band);
    }
    SUBCASE("default config gap lands in the target band") {
        auto cfg = small_cfg(11);
        const auto dir = fresh_dir("sep3");
        const auto manifest = gen_phantom_dataset(cfg, dir);
        const auto rep = lesion_separability_report(manifest);
        CHECK(rep.gap >= 0.3);
        CHECK(rep.gap <= 0.7);
    }
}

TEST_CASE("unsatisfiable lesion geometry is an error") {
    auto cfg = small_cfg(8);
    cfg.lesion_radius = {30.0, 31.0};  // cannot fit a 12x32x32 phantom lung
    CHECK_THROWS_WITH_AS(gen_case(cfg, 0, true), doctest::Contains("unsatisfiable"),
                         ValidationError);
}

TEST_CASE("healthy and diseased cases share the generative process outside lesions") {
    // same case index generated healthy vs diseased differs only where the
    // lesion mask is set
    const auto cfg = small_cfg(13);
    const PhantomCase h = gen_case(cfg, 4, false);
    const PhantomCase d = gen_case(cfg, 4, true);
    int64_t diff_outside = 0, lesion_n = 0;
    for (int64_t i = 0; i < h.vol.size(); ++i) {
        if (d.lesion.data[i] != 0.0f) ++lesion_n;
        else if (h.vol.data[i] != d.vol.data[i]) ++diff_outside;
    }
    CHECK(lesion_n > 0);
    CHECK(diff_outside == 0);
    CHECK(h.lung.data == d.lung.data);
}

TEST_CASE("phantom volumes survive the preprocessing pipeline") {
    const auto cfg = small_cfg(15);
    const PhantomCase pc = gen_case(cfg, 1, true);
    preprocess::PreprocessConfig pp;
    pp.target_shape = {8, 16, 16};
    const auto out = preprocess::preprocess_case(pc.vol, pc.lesion, pc.lung, pp);
    CHECK(out.vol.shape == pp.target_shape);
    CHECK(out.vol.domain == Domain::unit_normalized);
    int64_t lesion_count = 0;
    for (float x : out.lesion->data) lesion_count += x != 0.0f;
    CHECK(lesion_count > 0);
}
