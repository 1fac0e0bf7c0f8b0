#pragma once

// Checkpoint container: "GASNETCK" magic + version byte, u64 header length,
// JSON header (metadata + tensor directory with names/dtypes/shapes/offsets),
// then the raw little-endian payload. Portable at the level of tensor names
// and shapes; see docs/formats.md.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gasnet/tensor.hpp"
#include "gasnet/voldata.hpp"

namespace gasnet::ckpt {

namespace fs = std::filesystem;

void save(const fs::path& path, const nlohmann::json& meta,
          const std::vector<std::pair<std::string, const ad::Tensor<float>*>>& tensors);

struct Loaded {
    nlohmann::json meta;
    std::map<std::string, ad::Tensor<float>> tensors;
};

Loaded load(const fs::path& path);

}  // namespace gasnet::ckpt
