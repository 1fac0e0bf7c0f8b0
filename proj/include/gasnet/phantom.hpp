#pragma once

// Procedural 3D phantom dataset with exact lesion and lung masks: the
// desk-scale stand-in for clinical data. Volumes are emitted in raw HU so
// the whole preprocessing path gets exercised. Healthy and diseased cases
// share the same generative process; lesions are the only class signal.

#include <array>

#include "gasnet/voldata.hpp"

namespace gasnet::phantom {

using voldata::DatasetManifest;
using voldata::SegMask;
using voldata::Volume;

struct PhantomConfig {
    std::array<int, 3> shape{16, 64, 64};
    int n_healthy = 40;   // train, volume-level
    int n_diseased = 40;  // train, volume-level
    int n_voxel_labeled = 1;
    int n_val = 4;
    int n_test_diseased = 10;
    int n_test_healthy = 10;
    std::array<int, 2> lesion_count{1, 3};
    std::array<double, 2> lesion_radius{2.0, 6.0};      // voxels
    std::array<double, 2> intensity_shift{0.3, 0.7};    // normalized units
    double texture_sigma = 0.05;                        // normalized units
    std::array<int, 2> vessel_count{2, 4};              // per lung; 0,0 disables
    std::array<double, 2> vessel_shift{0.35, 0.55};     // normalized units
    uint64_t seed = 0;
};

void validate(const PhantomConfig& cfg);

struct PhantomCase {
    Volume vol;      // raw HU
    SegMask lung;    // binary
    SegMask lesion;  // binary (all zero for healthy)
};

// One case, fully determined by (cfg.seed, case_index, diseased).
PhantomCase gen_case(const PhantomConfig& cfg, int case_index, bool diseased);

// Writes all cases + manifest.json under out_dir; returns the manifest.
DatasetManifest gen_phantom_dataset(const PhantomConfig& cfg,
                                    const voldata::fs::path& out_dir);

struct SeparabilityReport {
    double gap = 0.0;        // mean(lesion) - mean(healthy lung), normalized units
    bool in_band = false;    // inside the [0.3, 0.7] target band
    int n_cases = 0;
};

// Mean intensity gap between lesion voxels and non-lesion lung voxels over
// the diseased cases of the manifest; warns outside the target band.
SeparabilityReport lesion_separability_report(const DatasetManifest& manifest);

}  // namespace gasnet::phantom
