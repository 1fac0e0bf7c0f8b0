#include <doctest.h>

#include <cstring>
#include <fstream>

#include "gasnet/rng.hpp"
#include "gasnet/voldata.hpp"

using namespace gasnet;
using namespace gasnet::voldata;
namespace fs = std::filesystem;

namespace {

fs::path test_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("gasnet_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Volume random_volume(std::array<int, 3> shape, uint64_t seed, Domain domain) {
    Volume v = Volume::zeros(shape, domain);
    for (int64_t i = 0; i < v.size(); ++i) {
        const double u = rng::uniform(seed, 0x1, i);
        v.data[i] = domain == Domain::raw_hu ? static_cast<float>(-1400 + 2000 * u)
                                             : static_cast<float>(2 * u - 1);
    }
    return v;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("volume round trips are lossless") {
    const auto dir = test_dir("voldata_rt");
    const Volume v = random_volume({6, 10, 8}, 7, Domain::raw_hu);

    for (const std::string name : {"a.nii", "a.nii.gz", "a.rawvol"}) {
        const fs::path p = dir / name;
        save_volume(v, p);
        const Volume r = load_volume(p);
        CHECK(r.shape == v.shape);
        CHECK(r.domain == v.domain);
        CHECK(r.data == v.data);
        CHECK(r.spacing[0] == doctest::Approx(v.spacing[0]));
    }
}

TEST_CASE("normalized volumes keep extrema and domain tag") {
    const auto dir = test_dir("voldata_norm");
    Volume v = Volume::zeros({2, 2, 2}, Domain::unit_normalized);
    v.data = {-1, 0, 1, 0.5f, -0.5f, 0.25f, 0, 1};
    const fs::path p = dir / "n.nii.gz";
    save_volume(v, p);
    const Volume r = load_volume(p);
    CHECK(r.domain == Domain::unit_normalized);
    CHECK(*std::min_element(r.data.begin(), r.data.end()) == -1.0f);
    CHECK(*std::max_element(r.data.begin(), r.data.end()) == 1.0f);
}

TEST_CASE("double save produces byte-identical files") {
    const auto dir = test_dir("voldata_det");
    const Volume v = random_volume({8, 8, 8}, 7, Domain::raw_hu);
    for (const std::string name : {"d.rawvol", "d.nii", "d.nii.gz"}) {
        save_volume(v, dir / ("1_" + name));
        save_volume(v, dir / ("2_" + name));
        CHECK(slurp(dir / ("1_" + name)) == slurp(dir / ("2_" + name)));
    }
}

TEST_CASE("volume load errors carry path and reason") {
    const auto dir = test_dir("voldata_err");
    CHECK_THROWS_WITH_AS(load_volume(dir / "nope.nii"),
                         doctest::Contains("missing file"), IoError);

    // unreadable header
    std::ofstream(dir / "bad.nii", std::ios::binary) << "this is not nifti at all";
    CHECK_THROWS_AS(load_volume(dir / "bad.nii"), IoError);

    // non-3D payload: craft a header with dim[0]=4, dim[4]=2
    Volume v = random_volume({2, 2, 2}, 1, Domain::raw_hu);
    save_volume(v, dir / "4d.nii");
    auto bytes = slurp(dir / "4d.nii");
    int16_t four = 4, two = 2;
    std::memcpy(bytes.data() + 40, &four, 2);       // dim[0]
    std::memcpy(bytes.data() + 40 + 8, &two, 2);    // dim[4]
    std::ofstream(dir / "4d.nii", std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_WITH_AS(load_volume(dir / "4d.nii"), doctest::Contains("non-3D"),
                         IoError);
}

TEST_CASE("unit_normalized range invariant is enforced") {
    Volume v = Volume::zeros({2, 2, 2}, Domain::unit_normalized);
    v.data[3] = 1.5f;
    CHECK_THROWS_AS(validate(v), ValidationError);
    v.data[3] = std::numeric_limits<float>::quiet_NaN();
    v.domain = Domain::raw_hu;
    CHECK_THROWS_AS(validate(v), ValidationError);
}

TEST_CASE("mask round trips preserve kind and labels") {
    const auto dir = test_dir("voldata_mask");
    SegMask m = SegMask::zeros({4, 4, 4}, MaskKind::pseudo3);
    for (int64_t i = 0; i < m.size(); ++i) m.data[i] = static_cast<float>(i % 3);
    for (const std::string name : {"m.rawmask", "m.nii", "m.nii.gz"}) {
        save_mask(m, dir / name);
        const SegMask r = load_mask(dir / name);
        CHECK(r.kind == MaskKind::pseudo3);
        CHECK(r.data == m.data);
    }

    SegMask p = SegMask::zeros({2, 2, 2}, MaskKind::prob);
    p.data = {0, 0.25f, 0.5f, 0.75f, 1, 0.1f, 0.9f, 0.5f};
    save_mask(p, dir / "p.rawmask");
    const SegMask rp = load_mask(dir / "p.rawmask");
    CHECK(rp.kind == MaskKind::prob);
    CHECK(rp.data == p.data);

    SegMask bad = SegMask::zeros({2, 2, 2}, MaskKind::binary);
    bad.data[0] = 3.0f;
    CHECK_THROWS_AS(validate(bad), ValidationError);
}

namespace {

struct ManifestFixture {
    fs::path dir;
    fs::path vol_path, mask_path;

    ManifestFixture() {
        dir = test_dir("voldata_manifest");
        vol_path = dir / "case.rawvol";
        mask_path = dir / "case.rawmask";
        save_volume(random_volume({4, 4, 4}, 3, Domain::raw_hu), vol_path);
        save_mask(SegMask::zeros({4, 4, 4}, MaskKind::binary), mask_path);
    }

    CaseRecord rec(const std::string& id, ClassLabel label, bool with_lesion) const {
        CaseRecord r;
        r.case_id = id;
        r.volume_path = vol_path;
        r.class_label = label;
        if (with_lesion) r.lesion_mask_path = mask_path;
        return r;
    }
};

}  // namespace

TEST_CASE("manifest save/load round trip with counts") {
    ManifestFixture fx;
    DatasetManifest m;
    m.train_volume_level = {fx.rec("h1", ClassLabel::healthy, false),
                            fx.rec("h2", ClassLabel::healthy, false),
                            fx.rec("d1", ClassLabel::diseased, false),
                            fx.rec("d2", ClassLabel::diseased, false)};
    m.train_voxel_level = {fx.rec("l1", ClassLabel::diseased, true)};
    m.val = {fx.rec("v1", ClassLabel::diseased, true)};
    m.test = {fx.rec("t1", ClassLabel::diseased, true)};
    const fs::path mp = fx.dir / "manifest.json";
    save_manifest(m, mp);
    const DatasetManifest r = load_manifest(mp);
    CHECK(r.train_volume_level.size() == 4);
    CHECK(r.train_voxel_level.size() == 1);
    CHECK(r.train_voxel_level[0].lesion_mask_path.has_value());
    CHECK(fs::exists(r.train_voxel_level[0].volume_path));
}

TEST_CASE("manifest validation rejects the spec'd violations") {
    ManifestFixture fx;

    SUBCASE("duplicate case_id") {
        DatasetManifest m;
        m.train_volume_level = {fx.rec("x", ClassLabel::healthy, false)};
        m.val = {fx.rec("x", ClassLabel::diseased, true)};
        CHECK_THROWS_WITH_AS(validate_manifest(m), doctest::Contains("duplicate"),
                             ValidationError);
    }
    SUBCASE("val record without lesion mask") {
        DatasetManifest m;
        m.val = {fx.rec("v", ClassLabel::diseased, false)};
        CHECK_THROWS_WITH_AS(validate_manifest(m), doctest::Contains("lacks"),
                             ValidationError);
    }
    SUBCASE("voxel-level record without lesion mask") {
        DatasetManifest m;
        m.train_voxel_level = {fx.rec("l", ClassLabel::diseased, false)};
        CHECK_THROWS_AS(validate_manifest(m), ValidationError);
    }
    SUBCASE("dangling path") {
        DatasetManifest m;
        auto r = fx.rec("d", ClassLabel::diseased, true);
        r.volume_path = fx.dir / "gone.rawvol";
        m.test = {r};
        CHECK_THROWS_WITH_AS(validate_manifest(m, true), doctest::Contains("dangling"),
                             ValidationError);
    }
    SUBCASE("unknown record key rejected") {
        std::ofstream(fx.dir / "bad.json")
            << R"({"test":[{"case_id":"a","volume_path":"case.rawvol",)"
            << R"("class_label":"healthy","surprise":1}]})";
        CHECK_THROWS_WITH_AS(load_manifest(fx.dir / "bad.json"),
                             doctest::Contains("unknown record key"), ValidationError);
    }
    SUBCASE("healthy case with non-zero lesion mask rejected by deep validation") {
        SegMask dirty = SegMask::zeros({4, 4, 4}, MaskKind::binary);
        dirty.data[7] = 1.0f;
        save_mask(dirty, fx.dir / "dirty.rawmask");
        DatasetManifest m;
        auto r = fx.rec("h", ClassLabel::healthy, false);
        r.lesion_mask_path = fx.dir / "dirty.rawmask";
        m.train_volume_level = {r};
        CHECK_NOTHROW(validate_manifest(m, true, false));
        CHECK_THROWS_WITH_AS(validate_manifest(m, true, true),
                             doctest::Contains("non-zero"), ValidationError);
    }
}

// Property: validation accepts exactly the manifests with no injected
// violation, over randomized manifests.
TEST_CASE("manifest validation property over randomized manifests") {
    ManifestFixture fx;
    for (uint64_t trial = 0; trial < 200; ++trial) {
        rng::Stream rs(0xbeef, trial);
        DatasetManifest m;
        bool violated = false;
        std::vector<std::string> ids;
        const int n = 2 + static_cast<int>(rs.next_int(0, 5));
        for (int i = 0; i < n; ++i) {
            const int split = static_cast<int>(rs.next_int(0, 3));
            const std::string split_name = DatasetManifest::split_names()[split];
            const bool diseased = rs.next_int(0, 1) == 1;
            std::string id = "c" + std::to_string(i);
            if (!ids.empty() && rs.next_int(0, 9) == 0) {
                id = ids[0];  // inject duplicate
                violated = true;
            }
            ids.push_back(id);
            bool with_lesion = rs.next_int(0, 1) == 1;
            const bool needs_lesion =
                split_name == "train_voxel_level" || split_name == "val";
            if (needs_lesion && !with_lesion) violated = true;
            m.split(split_name)
                .push_back(fx.rec(id, diseased ? ClassLabel::diseased : ClassLabel::healthy,
                                  with_lesion));
        }
        bool threw = false;
        try {
            validate_manifest(m);
        } catch (const ValidationError&) {
            threw = true;
        }
        CHECK(threw == violated);
    }
}
