#include "gasnet/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace gasnet::ckpt {

using json = nlohmann::json;

namespace {
constexpr char kMagic[8] = {'G', 'A', 'S', 'N', 'E', 'T', 'C', 'K'};
constexpr uint8_t kVersion = 1;
}  // namespace

void save(const fs::path& path, const json& meta,
          const std::vector<std::pair<std::string, const ad::Tensor<float>*>>& tensors) {
    json dir = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const uint64_t nbytes = static_cast<uint64_t>(t->size()) * 4;
        dir.push_back({{"name", name},
                       {"dtype", "f32"},
                       {"shape", t->shape},
                       {"offset", offset},
                       {"nbytes", nbytes}});
        offset += nbytes;
    }
    json header{{"meta", meta}, {"tensors", dir}};
    const std::string hs = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("unwritable checkpoint destination: " + path.string());
    os.write(kMagic, 8);
    os.put(static_cast<char>(kVersion));
    const uint64_t hlen = hs.size();
    os.write(reinterpret_cast<const char*>(&hlen), 8);
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : tensors)
        os.write(reinterpret_cast<const char*>(t->data()),
                 static_cast<std::streamsize>(t->size() * 4));
    if (!os) throw IoError("checkpoint write failed: " + path.string());
}

Loaded load(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("missing checkpoint: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path.string());
    const int version = is.get();
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    uint64_t hlen = 0;
    is.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw IoError("truncated checkpoint header: " + path.string());
    json header;
    try {
        header = json::parse(hs);
    } catch (const json::exception& e) {
        throw IoError("bad checkpoint header: " + std::string(e.what()));
    }

    Loaded out;
    out.meta = header.at("meta");
    const std::streampos payload_start = is.tellg();
    for (const auto& e : header.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        if (e.at("dtype").get<std::string>() != "f32")
            throw IoError("unsupported tensor dtype in checkpoint for " + name);
        ad::Shape shape = e.at("shape").get<ad::Shape>();
        ad::Tensor<float> t(shape);
        is.seekg(payload_start + static_cast<std::streamoff>(e.at("offset").get<uint64_t>()));
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * 4));
        if (!is) throw IoError("truncated checkpoint payload at tensor " + name);
        out.tensors.emplace(name, std::move(t));
    }
    return out;
}

}  // namespace gasnet::ckpt
