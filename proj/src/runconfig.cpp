#include "gasnet/runconfig.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>

namespace gasnet::runconfig {

namespace {

void check_keys(const YAML::Node& node, const std::set<std::string>& allowed,
                const std::string& where) {
    if (!node.IsMap()) throw ConfigError("config: '" + where + "' must be a mapping");
    for (const auto& kv : node) {
        const std::string key = kv.first.as<std::string>();
        if (!allowed.count(key))
            throw ConfigError("config: unknown key '" + where + "." + key + "'");
    }
}

template <class T>
T get_or(const YAML::Node& node, const std::string& key, T fallback,
         const std::string& where) {
    if (!node[key]) return fallback;
    try {
        return node[key].as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError("config: bad value for '" + where + "." + key + "'");
    }
}

template <class T, size_t N>
std::array<T, N> get_array(const YAML::Node& node, const std::string& key,
                           std::array<T, N> fallback, const std::string& where) {
    if (!node[key]) return fallback;
    const auto& v = node[key];
    if (!v.IsSequence() || v.size() != N)
        throw ConfigError("config: '" + where + "." + key + "' must be a sequence of " +
                          std::to_string(N));
    std::array<T, N> out;
    for (size_t i = 0; i < N; ++i) out[i] = v[i].as<T>();
    return out;
}

}  // namespace

RunConfig load_run_config(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    YAML::Node root;
    try {
        root = YAML::LoadFile(path.string());
    } catch (const YAML::Exception& e) {
        throw ConfigError("config parse error: " + std::string(e.what()));
    }
    check_keys(root, {"seed", "preprocess", "augment", "nets", "losses", "train",
                      "pseudo", "phantom"},
               "");

    RunConfig rc;
    rc.seed = get_or<uint64_t>(root, "seed", 0, "");

    if (root["preprocess"]) {
        const auto& n = root["preprocess"];
        check_keys(n, {"clip_lo", "clip_hi", "target_shape", "bbox_margin_voxels"},
                   "preprocess");
        rc.preprocess.clip_lo = get_or(n, "clip_lo", rc.preprocess.clip_lo, "preprocess");
        rc.preprocess.clip_hi = get_or(n, "clip_hi", rc.preprocess.clip_hi, "preprocess");
        rc.preprocess.target_shape =
            get_array<int, 3>(n, "target_shape", rc.preprocess.target_shape, "preprocess");
        rc.preprocess.bbox_margin_voxels =
            get_or(n, "bbox_margin_voxels", rc.preprocess.bbox_margin_voxels, "preprocess");
        preprocess::validate(rc.preprocess);
    }

    auto& aug = rc.train.augment;
    if (root["augment"]) {
        const auto& n = root["augment"];
        check_keys(n, {"crop_fraction", "noise_sigma", "max_rotation_deg", "seed",
                       "enabled"},
                   "augment");
        aug.crop_fraction = get_or(n, "crop_fraction", aug.crop_fraction, "augment");
        aug.noise_sigma = get_or(n, "noise_sigma", aug.noise_sigma, "augment");
        aug.max_rotation_deg = get_or(n, "max_rotation_deg", aug.max_rotation_deg, "augment");
        aug.seed = get_or<uint64_t>(n, "seed", 0, "augment");
        rc.train.augment_enabled = get_or(n, "enabled", true, "augment");
        preprocess::validate(aug);
    }

    if (root["nets"]) {
        const auto& n = root["nets"];
        check_keys(n, {"segmenter", "generator", "discriminator"}, "nets");
        if (n["segmenter"]) {
            const auto& s = n["segmenter"];
            check_keys(s, {"base_channels", "depth"}, "nets.segmenter");
            rc.segmenter.base_channels =
                get_or(s, "base_channels", rc.segmenter.base_channels, "nets.segmenter");
            rc.segmenter.depth = get_or(s, "depth", rc.segmenter.depth, "nets.segmenter");
        }
        if (n["generator"]) {
            const auto& g = n["generator"];
            check_keys(g, {"base_channels", "n_resblocks"}, "nets.generator");
            rc.generator.base_channels =
                get_or(g, "base_channels", rc.generator.base_channels, "nets.generator");
            rc.generator.n_resblocks =
                get_or(g, "n_resblocks", rc.generator.n_resblocks, "nets.generator");
        }
        if (n["discriminator"]) {
            const auto& d = n["discriminator"];
            check_keys(d, {"base_channels", "n_downsamples", "spectral_norm"},
                       "nets.discriminator");
            rc.discriminator.base_channels = get_or(d, "base_channels",
                                                    rc.discriminator.base_channels,
                                                    "nets.discriminator");
            rc.discriminator.n_downsamples = get_or(d, "n_downsamples",
                                                    rc.discriminator.n_downsamples,
                                                    "nets.discriminator");
            rc.discriminator.spectral_norm = get_or(d, "spectral_norm",
                                                    rc.discriminator.spectral_norm,
                                                    "nets.discriminator");
        }
        nets::validate(rc.segmenter);
        nets::validate(rc.generator);
        nets::validate(rc.discriminator);
    }

    auto& w = rc.train.weights;
    if (root["losses"]) {
        const auto& n = root["losses"];
        check_keys(n, {"lambda_s", "use_recons", "use_ig_to_d", "use_id_to_d", "use_mil",
                       "use_ps", "non_saturating_gs", "mil_smooth_max", "mil_lse_temp"},
                   "losses");
        w.lambda_s = get_or(n, "lambda_s", w.lambda_s, "losses");
        w.use_recons = get_or(n, "use_recons", w.use_recons, "losses");
        w.use_ig_to_d = get_or(n, "use_ig_to_d", w.use_ig_to_d, "losses");
        w.use_id_to_d = get_or(n, "use_id_to_d", w.use_id_to_d, "losses");
        w.use_mil = get_or(n, "use_mil", w.use_mil, "losses");
        w.use_ps = get_or(n, "use_ps", w.use_ps, "losses");
        w.non_saturating_gs = get_or(n, "non_saturating_gs", w.non_saturating_gs, "losses");
        w.mil_smooth_max = get_or(n, "mil_smooth_max", w.mil_smooth_max, "losses");
        w.mil_lse_temp = get_or(n, "mil_lse_temp", w.mil_lse_temp, "losses");
        losses::validate(w);
    }

    if (root["pseudo"]) {
        const auto& n = root["pseudo"];
        check_keys(n, {"xi"}, "pseudo");
        rc.train.pseudo.xi = get_or(n, "xi", rc.train.pseudo.xi, "pseudo");
        fusion::validate(rc.train.pseudo);
    }

    if (root["train"]) {
        const auto& n = root["train"];
        check_keys(n, {"repeat_g", "repeat_d", "iter_ps", "max_iter", "val_iter",
                       "batch_size", "lr_s", "lr_g", "lr_d"},
                   "train");
        auto& t = rc.train;
        t.repeat_g = get_or(n, "repeat_g", t.repeat_g, "train");
        t.repeat_d = get_or(n, "repeat_d", t.repeat_d, "train");
        t.iter_ps = get_or(n, "iter_ps", t.iter_ps, "train");
        t.max_iter = get_or(n, "max_iter", t.max_iter, "train");
        t.val_iter = get_or(n, "val_iter", t.val_iter, "train");
        t.batch_size = get_or(n, "batch_size", t.batch_size, "train");
        t.lr_s = get_or(n, "lr_s", t.lr_s, "train");
        t.lr_g = get_or(n, "lr_g", t.lr_g, "train");
        t.lr_d = get_or(n, "lr_d", t.lr_d, "train");
    }

    if (root["phantom"]) {
        const auto& n = root["phantom"];
        check_keys(n, {"shape", "n_healthy", "n_diseased", "n_voxel_labeled", "n_val",
                       "n_test_diseased", "n_test_healthy", "lesion_count", "lesion_radius",
                       "intensity_shift", "texture_sigma", "vessel_count", "vessel_shift"},
                   "phantom");
        auto& p = rc.phantom;
        p.shape = get_array<int, 3>(n, "shape", p.shape, "phantom");
        p.n_healthy = get_or(n, "n_healthy", p.n_healthy, "phantom");
        p.n_diseased = get_or(n, "n_diseased", p.n_diseased, "phantom");
        p.n_voxel_labeled = get_or(n, "n_voxel_labeled", p.n_voxel_labeled, "phantom");
        p.n_val = get_or(n, "n_val", p.n_val, "phantom");
        p.n_test_diseased = get_or(n, "n_test_diseased", p.n_test_diseased, "phantom");
        p.n_test_healthy = get_or(n, "n_test_healthy", p.n_test_healthy, "phantom");
        p.lesion_count = get_array<int, 2>(n, "lesion_count", p.lesion_count, "phantom");
        p.lesion_radius =
            get_array<double, 2>(n, "lesion_radius", p.lesion_radius, "phantom");
        p.intensity_shift =
            get_array<double, 2>(n, "intensity_shift", p.intensity_shift, "phantom");
        p.texture_sigma = get_or(n, "texture_sigma", p.texture_sigma, "phantom");
        p.vessel_count = get_array<int, 2>(n, "vessel_count", p.vessel_count, "phantom");
        p.vessel_shift =
            get_array<double, 2>(n, "vessel_shift", p.vessel_shift, "phantom");
        phantom::validate(p);
    }

    rc.train.seed = rc.seed;
    rc.phantom.seed = rc.seed;
    trainloop::validate(rc.train);
    return rc;
}

std::string config_hash(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("config file not found: " + path.string());
    uint64_t h = 0xcbf29ce484222325ull;
    char c;
    while (is.get(c)) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string code_version() {
#ifdef GASNET_GIT_REV
    return GASNET_GIT_REV;
#else
    return "unknown";
#endif
}

}  // namespace gasnet::runconfig
