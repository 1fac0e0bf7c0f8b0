#pragma once

// Canonical data model and I/O: volumes, masks, dataset manifests.
// Axis order is (depth, height, width) everywhere; any reorientation
// happens at load time. Supported on-disk formats: NIfTI-1 (.nii/.nii.gz)
// and the raw-phantom format (.rawvol/.rawmask payload + JSON sidecar).

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gasnet/errors.hpp"

namespace gasnet::voldata {

namespace fs = std::filesystem;

enum class Domain { raw_hu, unit_normalized };
enum class MaskKind { prob, binary, pseudo3 };

std::string to_string(Domain d);
std::string to_string(MaskKind k);
Domain domain_from_string(const std::string& s);
MaskKind kind_from_string(const std::string& s);

struct Volume {
    std::array<int, 3> shape{0, 0, 0};          // (d, h, w)
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // (dz, dy, dx) in mm
    Domain domain = Domain::raw_hu;
    std::vector<float> data;  // row-major, w fastest

    int64_t size() const {
        return static_cast<int64_t>(shape[0]) * shape[1] * shape[2];
    }
    float& at(int d, int h, int w) {
        return data[(static_cast<int64_t>(d) * shape[1] + h) * shape[2] + w];
    }
    float at(int d, int h, int w) const {
        return data[(static_cast<int64_t>(d) * shape[1] + h) * shape[2] + w];
    }
    static Volume zeros(std::array<int, 3> shape, Domain domain);
};

struct SegMask {
    std::array<int, 3> shape{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    MaskKind kind = MaskKind::binary;
    std::vector<float> data;

    int64_t size() const {
        return static_cast<int64_t>(shape[0]) * shape[1] * shape[2];
    }
    float& at(int d, int h, int w) {
        return data[(static_cast<int64_t>(d) * shape[1] + h) * shape[2] + w];
    }
    float at(int d, int h, int w) const {
        return data[(static_cast<int64_t>(d) * shape[1] + h) * shape[2] + w];
    }
    static SegMask zeros(std::array<int, 3> shape, MaskKind kind);
};

// Throws ValidationError on invariant violations (finiteness, value ranges).
void validate(const Volume& v);
void validate(const SegMask& m);

Volume load_volume(const fs::path& path);
void save_volume(const Volume& v, const fs::path& path);
SegMask load_mask(const fs::path& path);
void save_mask(const SegMask& m, const fs::path& path);

// ---- manifests ----

enum class ClassLabel { healthy, diseased };
std::string to_string(ClassLabel c);
ClassLabel class_from_string(const std::string& s);

struct CaseRecord {
    std::string case_id;
    fs::path volume_path;
    ClassLabel class_label = ClassLabel::healthy;
    std::optional<fs::path> lesion_mask_path;
    std::optional<fs::path> lung_mask_path;
};

struct DatasetManifest {
    std::vector<CaseRecord> train_volume_level;
    std::vector<CaseRecord> train_voxel_level;
    std::vector<CaseRecord> val;
    std::vector<CaseRecord> test;

    static const std::array<std::string, 4>& split_names();
    const std::vector<CaseRecord>& split(const std::string& name) const;
    std::vector<CaseRecord>& split(const std::string& name);
};

// Structural validation: unique case ids, lesion masks present where
// required. With check_paths, referenced files must exist; with deep,
// lesion masks of healthy cases are loaded and must be all zero.
void validate_manifest(const DatasetManifest& m, bool check_paths = false,
                       bool deep = false);

// Loads, resolves paths relative to the manifest directory, validates
// structure and path existence.
DatasetManifest load_manifest(const fs::path& path);
void save_manifest(const DatasetManifest& m, const fs::path& path);

}  // namespace gasnet::voldata
