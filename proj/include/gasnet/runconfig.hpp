#pragma once

// Umbrella run configuration: YAML on disk, schema-validated (unknown keys
// rejected) before any work happens. docs/runconfig.schema.json mirrors the
// validator.

#include <filesystem>
#include <string>

#include "gasnet/losses.hpp"
#include "gasnet/nets.hpp"
#include "gasnet/phantom.hpp"
#include "gasnet/preprocess.hpp"
#include "gasnet/trainloop.hpp"

namespace gasnet::runconfig {

namespace fs = std::filesystem;

struct RunConfig {
    uint64_t seed = 0;
    preprocess::PreprocessConfig preprocess;
    nets::SegmenterConfig segmenter;
    nets::GeneratorConfig generator;
    nets::DiscriminatorConfig discriminator;
    trainloop::TrainConfig train;  // carries LossWeights, AugmentConfig, PseudoSynthConfig
    phantom::PhantomConfig phantom;
};

// Parses and validates; throws ConfigError with the offending key on any
// schema violation. The global seed propagates into train/phantom configs.
RunConfig load_run_config(const fs::path& path);

// FNV-1a over the raw config bytes, for provenance stamps.
std::string config_hash(const fs::path& path);

std::string code_version();

}  // namespace gasnet::runconfig
