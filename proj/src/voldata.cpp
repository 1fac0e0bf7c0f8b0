#include "gasnet/voldata.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace gasnet::voldata {

using json = nlohmann::json;

std::string to_string(Domain d) {
    return d == Domain::raw_hu ? "raw_hu" : "unit_normalized";
}
std::string to_string(MaskKind k) {
    switch (k) {
        case MaskKind::prob: return "prob";
        case MaskKind::binary: return "binary";
        default: return "pseudo3";
    }
}
std::string to_string(ClassLabel c) {
    return c == ClassLabel::healthy ? "healthy" : "diseased";
}

Domain domain_from_string(const std::string& s) {
    if (s == "raw_hu") return Domain::raw_hu;
    if (s == "unit_normalized") return Domain::unit_normalized;
    throw ValidationError("unknown domain: " + s);
}
MaskKind kind_from_string(const std::string& s) {
    if (s == "prob") return MaskKind::prob;
    if (s == "binary") return MaskKind::binary;
    if (s == "pseudo3") return MaskKind::pseudo3;
    throw ValidationError("unknown mask kind: " + s);
}
ClassLabel class_from_string(const std::string& s) {
    if (s == "healthy") return ClassLabel::healthy;
    if (s == "diseased") return ClassLabel::diseased;
    throw ValidationError("unknown class label: " + s);
}

Volume Volume::zeros(std::array<int, 3> shape, Domain domain) {
    Volume v;
    v.shape = shape;
    v.domain = domain;
    v.data.assign(v.size(), 0.0f);
    return v;
}

SegMask SegMask::zeros(std::array<int, 3> shape, MaskKind kind) {
    SegMask m;
    m.shape = shape;
    m.kind = kind;
    m.data.assign(m.size(), 0.0f);
    return m;
}

void validate(const Volume& v) {
    for (int s : v.shape)
        if (s <= 0) throw ValidationError("volume: non-positive shape axis");
    if (static_cast<int64_t>(v.data.size()) != v.size())
        throw ValidationError("volume: data size does not match shape");
    for (float x : v.data)
        if (!std::isfinite(x)) throw ValidationError("volume: non-finite value");
    if (v.domain == Domain::unit_normalized)
        for (float x : v.data)
            if (x < -1.0f || x > 1.0f)
                throw ValidationError("volume: unit_normalized value outside [-1,1]");
}

void validate(const SegMask& m) {
    for (int s : m.shape)
        if (s <= 0) throw ValidationError("mask: non-positive shape axis");
    if (static_cast<int64_t>(m.data.size()) != m.size())
        throw ValidationError("mask: data size does not match shape");
    for (float x : m.data) {
        switch (m.kind) {
            case MaskKind::prob:
                if (!(x >= 0.0f && x <= 1.0f))
                    throw ValidationError("mask: prob value outside [0,1]");
                break;
            case MaskKind::binary:
                if (x != 0.0f && x != 1.0f)
                    throw ValidationError("mask: binary value not in {0,1}");
                break;
            case MaskKind::pseudo3:
                if (x != 0.0f && x != 1.0f && x != 2.0f)
                    throw ValidationError("mask: pseudo3 value not in {0,1,2}");
                break;
        }
    }
}

// ------------------------------------------------------------------- NIfTI-1

namespace {

#pragma pack(push, 1)
struct NiftiHeader {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code;
    int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t DT_UINT8 = 2;
constexpr int16_t DT_INT16 = 4;
constexpr int16_t DT_FLOAT32 = 16;

bool has_suffix(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

bool is_nifti_path(const fs::path& p) {
    const std::string s = p.string();
    return has_suffix(s, ".nii") || has_suffix(s, ".nii.gz");
}

// Reads a whole file, transparently inflating gzip.
std::vector<char> read_all_maybe_gz(const fs::path& path) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw IoError("cannot open file: " + path.string());
    std::vector<char> out;
    char buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
    const bool bad = n < 0;
    gzclose(f);
    if (bad) throw IoError("decompression failed: " + path.string());
    return out;
}

// Deterministic gzip (mtime = 0, fixed OS byte).
void write_all_gz(const fs::path& path, const char* data, size_t len) {
    z_stream strm{};
    if (deflateInit2(&strm, 6, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        throw IoError("deflateInit2 failed");
    gz_header gzh{};
    gzh.time = 0;
    gzh.os = 3;
    deflateSetHeader(&strm, &gzh);
    std::vector<char> out(deflateBound(&strm, len) + 64);
    strm.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(data));
    strm.avail_in = static_cast<uInt>(len);
    strm.next_out = reinterpret_cast<Bytef*>(out.data());
    strm.avail_out = static_cast<uInt>(out.size());
    const int rc = deflate(&strm, Z_FINISH);
    deflateEnd(&strm);
    if (rc != Z_STREAM_END) throw IoError("deflate failed");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("unwritable destination: " + path.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size() - strm.avail_out));
    if (!os) throw IoError("write failed: " + path.string());
}

void write_all(const fs::path& path, const char* data, size_t len) {
    if (has_suffix(path.string(), ".gz")) {
        write_all_gz(path, data, len);
        return;
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("unwritable destination: " + path.string());
    os.write(data, static_cast<std::streamsize>(len));
    if (!os) throw IoError("write failed: " + path.string());
}

std::string descrip_tag(const NiftiHeader& h, const std::string& key) {
    const std::string d(h.descrip, strnlen(h.descrip, sizeof(h.descrip)));
    const std::string needle = key + "=";
    const auto pos = d.find(needle);
    if (pos == std::string::npos) return {};
    auto end = d.find_first_of(" ;", pos + needle.size());
    if (end == std::string::npos) end = d.size();
    return d.substr(pos + needle.size(), end - pos - needle.size());
}

struct NiftiPayload {
    std::array<int, 3> shape;           // (d, h, w)
    std::array<double, 3> spacing;
    int16_t datatype;
    std::vector<float> data;
    NiftiHeader header;
};

NiftiPayload read_nifti(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("missing file: " + path.string());
    const auto raw = read_all_maybe_gz(path);
    if (raw.size() < sizeof(NiftiHeader))
        throw IoError("unreadable header (file too small): " + path.string());
    NiftiHeader h;
    std::memcpy(&h, raw.data(), sizeof(h));
    if (h.sizeof_hdr != 348)
        throw IoError("unreadable header (bad sizeof_hdr, expected little-endian NIfTI-1): " +
                      path.string());
    if (std::strncmp(h.magic, "n+1", 3) != 0)
        throw IoError("unreadable header (bad magic): " + path.string());
    int ndim = h.dim[0];
    for (int i = ndim; i >= 1; --i) {
        if (h.dim[i] == 1) --ndim;  // tolerate trailing singleton dims
        else break;
    }
    if (ndim != 3)
        throw IoError("non-3D payload (dim[0]=" + std::to_string(h.dim[0]) + "): " +
                      path.string());
    const int W = h.dim[1], H = h.dim[2], D = h.dim[3];
    if (W <= 0 || H <= 0 || D <= 0)
        throw IoError("non-positive dimensions: " + path.string());
    const int64_t n = static_cast<int64_t>(W) * H * D;
    const size_t off = static_cast<size_t>(h.vox_offset);
    size_t elem;
    switch (h.datatype) {
        case DT_UINT8: elem = 1; break;
        case DT_INT16: elem = 2; break;
        case DT_FLOAT32: elem = 4; break;
        default:
            throw IoError("unsupported datatype " + std::to_string(h.datatype) + ": " +
                          path.string());
    }
    if (raw.size() < off + n * elem)
        throw IoError("truncated payload: " + path.string());
    const float slope = (h.scl_slope == 0.0f) ? 1.0f : h.scl_slope;
    const float inter = h.scl_inter;
    std::vector<float> out(n);
    const char* p = raw.data() + off;
    // NIfTI stores x (width) fastest, matching our (d,h,w) row-major layout.
    for (int64_t i = 0; i < n; ++i) {
        float v;
        if (h.datatype == DT_UINT8) v = static_cast<float>(reinterpret_cast<const uint8_t*>(p)[i]);
        else if (h.datatype == DT_INT16) {
            int16_t s;
            std::memcpy(&s, p + i * 2, 2);
            v = static_cast<float>(s);
        } else {
            std::memcpy(&v, p + i * 4, 4);
        }
        out[i] = slope * v + inter;
    }
    NiftiPayload pl;
    pl.shape = {D, H, W};
    pl.spacing = {h.pixdim[3], h.pixdim[2], h.pixdim[1]};
    pl.datatype = h.datatype;
    pl.data = std::move(out);
    pl.header = h;
    return pl;
}

NiftiHeader make_header(std::array<int, 3> shape, std::array<double, 3> spacing,
                        int16_t datatype, const std::string& descrip) {
    NiftiHeader h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<int16_t>(shape[2]);  // x = width
    h.dim[2] = static_cast<int16_t>(shape[1]);  // y = height
    h.dim[3] = static_cast<int16_t>(shape[0]);  // z = depth
    for (int i = 4; i < 8; ++i) h.dim[i] = 1;
    h.datatype = datatype;
    h.bitpix = datatype == DT_UINT8 ? 8 : (datatype == DT_INT16 ? 16 : 32);
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = static_cast<float>(spacing[2]);
    h.pixdim[2] = static_cast<float>(spacing[1]);
    h.pixdim[3] = static_cast<float>(spacing[0]);
    for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2;  // millimeters
    std::snprintf(h.descrip, sizeof(h.descrip), "%s", descrip.c_str());
    h.sform_code = 1;
    h.srow_x[0] = static_cast<float>(spacing[2]);
    h.srow_y[1] = static_cast<float>(spacing[1]);
    h.srow_z[2] = static_cast<float>(spacing[0]);
    std::memcpy(h.magic, "n+1", 4);
    return h;
}

void write_nifti(const fs::path& path, const NiftiHeader& h, const void* payload,
                 size_t payload_len) {
    std::vector<char> blob(352 + payload_len, 0);
    std::memcpy(blob.data(), &h, sizeof(h));
    // 4 zero bytes at 348: no header extensions
    std::memcpy(blob.data() + 352, payload, payload_len);
    write_all(path, blob.data(), blob.size());
}

// ------------------------------------------------------------ raw phantom fmt

bool is_rawvol_path(const fs::path& p) { return has_suffix(p.string(), ".rawvol"); }
bool is_rawmask_path(const fs::path& p) { return has_suffix(p.string(), ".rawmask"); }

fs::path sidecar_path(const fs::path& p) { return fs::path(p.string() + ".json"); }

json read_sidecar(const fs::path& payload_path) {
    const fs::path sp = sidecar_path(payload_path);
    if (!fs::exists(sp)) throw IoError("missing sidecar: " + sp.string());
    std::ifstream is(sp);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw IoError("unreadable sidecar " + sp.string() + ": " + e.what());
    }
    return j;
}

std::array<int, 3> shape_from_json(const json& j, const fs::path& p) {
    if (!j.contains("shape") || !j["shape"].is_array() || j["shape"].size() != 3)
        throw IoError("sidecar missing 3-element shape: " + p.string());
    std::array<int, 3> s{};
    for (int i = 0; i < 3; ++i) s[i] = j["shape"][i].get<int>();
    return s;
}

std::vector<char> read_payload(const fs::path& path, size_t expect) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open file: " + path.string());
    std::vector<char> buf(expect);
    is.read(buf.data(), static_cast<std::streamsize>(expect));
    if (static_cast<size_t>(is.gcount()) != expect)
        throw IoError("truncated payload (non-3D or wrong shape?): " + path.string());
    return buf;
}

}  // namespace

Volume load_volume(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("missing file: " + path.string());
    Volume v;
    if (is_nifti_path(path)) {
        auto pl = read_nifti(path);
        v.shape = pl.shape;
        v.spacing = pl.spacing;
        v.data = std::move(pl.data);
        const std::string tag = descrip_tag(pl.header, "domain");
        if (!tag.empty()) {
            v.domain = domain_from_string(tag);
        } else if (pl.datatype == DT_INT16) {
            v.domain = Domain::raw_hu;
        } else {
            float lo = v.data.empty() ? 0.0f : v.data[0], hi = lo;
            for (float x : v.data) {
                lo = std::min(lo, x);
                hi = std::max(hi, x);
            }
            v.domain = (lo >= -1.0f - 1e-6f && hi <= 1.0f + 1e-6f)
                           ? Domain::unit_normalized
                           : Domain::raw_hu;
        }
    } else if (is_rawvol_path(path)) {
        const json j = read_sidecar(path);
        v.shape = shape_from_json(j, path);
        if (j.contains("spacing"))
            for (int i = 0; i < 3; ++i) v.spacing[i] = j["spacing"][i].get<double>();
        v.domain = domain_from_string(j.value("domain", "raw_hu"));
        if (j.value("dtype", "f32") != "f32")
            throw IoError("rawvol dtype must be f32: " + path.string());
        const auto buf = read_payload(path, static_cast<size_t>(v.size()) * 4);
        v.data.resize(v.size());
        std::memcpy(v.data.data(), buf.data(), buf.size());
    } else {
        throw IoError("unrecognized volume format (want .nii/.nii.gz/.rawvol): " +
                      path.string());
    }
    validate(v);
    return v;
}

void save_volume(const Volume& v, const fs::path& path) {
    validate(v);
    if (is_nifti_path(path)) {
        const auto h = make_header(v.shape, v.spacing, DT_FLOAT32,
                                   "gasnet domain=" + to_string(v.domain));
        write_nifti(path, h, v.data.data(), v.data.size() * 4);
    } else if (is_rawvol_path(path)) {
        json j;
        j["shape"] = {v.shape[0], v.shape[1], v.shape[2]};
        j["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
        j["domain"] = to_string(v.domain);
        j["dtype"] = "f32";
        std::ofstream js(sidecar_path(path), std::ios::trunc);
        if (!js) throw IoError("unwritable destination: " + sidecar_path(path).string());
        js << j.dump(2) << "\n";
        write_all(path, reinterpret_cast<const char*>(v.data.data()), v.data.size() * 4);
    } else {
        throw IoError("unrecognized volume format (want .nii/.nii.gz/.rawvol): " +
                      path.string());
    }
}

SegMask load_mask(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("missing file: " + path.string());
    SegMask m;
    if (is_nifti_path(path)) {
        auto pl = read_nifti(path);
        m.shape = pl.shape;
        m.spacing = pl.spacing;
        m.data = std::move(pl.data);
        const std::string tag = descrip_tag(pl.header, "kind");
        if (!tag.empty()) {
            m.kind = kind_from_string(tag);
        } else if (pl.datatype == DT_FLOAT32) {
            m.kind = MaskKind::prob;
        } else {
            bool has2 = false;
            for (float x : m.data) has2 = has2 || x == 2.0f;
            m.kind = has2 ? MaskKind::pseudo3 : MaskKind::binary;
        }
    } else if (is_rawmask_path(path)) {
        const json j = read_sidecar(path);
        m.shape = shape_from_json(j, path);
        if (j.contains("spacing"))
            for (int i = 0; i < 3; ++i) m.spacing[i] = j["spacing"][i].get<double>();
        m.kind = kind_from_string(j.value("kind", "binary"));
        const std::string dtype = j.value("dtype", "u8");
        if (dtype == "u8") {
            const auto buf = read_payload(path, static_cast<size_t>(m.size()));
            m.data.resize(m.size());
            for (int64_t i = 0; i < m.size(); ++i)
                m.data[i] = static_cast<float>(static_cast<uint8_t>(buf[i]));
        } else if (dtype == "f32") {
            const auto buf = read_payload(path, static_cast<size_t>(m.size()) * 4);
            m.data.resize(m.size());
            std::memcpy(m.data.data(), buf.data(), buf.size());
        } else {
            throw IoError("rawmask dtype must be u8 or f32: " + path.string());
        }
    } else {
        throw IoError("unrecognized mask format (want .nii/.nii.gz/.rawmask): " +
                      path.string());
    }
    validate(m);
    return m;
}

void save_mask(const SegMask& m, const fs::path& path) {
    validate(m);
    const bool discrete = m.kind != MaskKind::prob;
    if (is_nifti_path(path)) {
        if (discrete) {
            std::vector<uint8_t> buf(m.size());
            for (int64_t i = 0; i < m.size(); ++i) buf[i] = static_cast<uint8_t>(m.data[i]);
            const auto h = make_header(m.shape, m.spacing, DT_UINT8,
                                       "gasnet kind=" + to_string(m.kind));
            write_nifti(path, h, buf.data(), buf.size());
        } else {
            const auto h = make_header(m.shape, m.spacing, DT_FLOAT32,
                                       "gasnet kind=prob");
            write_nifti(path, h, m.data.data(), m.data.size() * 4);
        }
    } else if (is_rawmask_path(path)) {
        json j;
        j["shape"] = {m.shape[0], m.shape[1], m.shape[2]};
        j["spacing"] = {m.spacing[0], m.spacing[1], m.spacing[2]};
        j["kind"] = to_string(m.kind);
        j["dtype"] = discrete ? "u8" : "f32";
        std::ofstream js(sidecar_path(path), std::ios::trunc);
        if (!js) throw IoError("unwritable destination: " + sidecar_path(path).string());
        js << j.dump(2) << "\n";
        if (discrete) {
            std::vector<uint8_t> buf(m.size());
            for (int64_t i = 0; i < m.size(); ++i) buf[i] = static_cast<uint8_t>(m.data[i]);
            write_all(path, reinterpret_cast<const char*>(buf.data()), buf.size());
        } else {
            write_all(path, reinterpret_cast<const char*>(m.data.data()),
                      m.data.size() * 4);
        }
    } else {
        throw IoError("unrecognized mask format (want .nii/.nii.gz/.rawmask): " +
                      path.string());
    }
}

// ------------------------------------------------------------------ manifests

const std::array<std::string, 4>& DatasetManifest::split_names() {
    static const std::array<std::string, 4> names = {"train_volume_level",
                                                     "train_voxel_level", "val", "test"};
    return names;
}

const std::vector<CaseRecord>& DatasetManifest::split(const std::string& name) const {
    return const_cast<DatasetManifest*>(this)->split(name);
}

std::vector<CaseRecord>& DatasetManifest::split(const std::string& name) {
    if (name == "train_volume_level") return train_volume_level;
    if (name == "train_voxel_level") return train_voxel_level;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ValidationError("unknown split: " + name);
}

void validate_manifest(const DatasetManifest& m, bool check_paths, bool deep) {
    std::set<std::string> ids;
    for (const auto& name : DatasetManifest::split_names()) {
        for (const auto& rec : m.split(name)) {
            if (rec.case_id.empty())
                throw ValidationError("manifest: empty case_id in split " + name);
            if (!ids.insert(rec.case_id).second)
                throw ValidationError("manifest: duplicate case_id '" + rec.case_id + "'");
            if ((name == "train_voxel_level" || name == "val") && !rec.lesion_mask_path)
                throw ValidationError("manifest: case '" + rec.case_id + "' in split " +
                                      name + " lacks lesion_mask_path");
            if (check_paths) {
                auto require = [&](const fs::path& p) {
                    if (!fs::exists(p))
                        throw ValidationError("manifest: dangling path for case '" +
                                              rec.case_id + "': " + p.string());
                };
                require(rec.volume_path);
                if (rec.lesion_mask_path) require(*rec.lesion_mask_path);
                if (rec.lung_mask_path) require(*rec.lung_mask_path);
            }
            if (deep && rec.class_label == ClassLabel::healthy && rec.lesion_mask_path) {
                const SegMask lm = load_mask(*rec.lesion_mask_path);
                for (float x : lm.data)
                    if (x != 0.0f)
                        throw ValidationError("manifest: healthy case '" + rec.case_id +
                                              "' has a non-zero lesion mask");
            }
        }
    }
}

namespace {

CaseRecord record_from_json(const json& j, const fs::path& base) {
    static const std::set<std::string> known = {"case_id", "volume_path", "class_label",
                                                "lesion_mask_path", "lung_mask_path"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ValidationError("manifest: unknown record key '" + it.key() + "'");
    CaseRecord r;
    r.case_id = j.at("case_id").get<std::string>();
    r.class_label = class_from_string(j.at("class_label").get<std::string>());
    auto resolve = [&](const std::string& s) {
        fs::path p(s);
        return p.is_absolute() ? p : base / p;
    };
    r.volume_path = resolve(j.at("volume_path").get<std::string>());
    if (j.contains("lesion_mask_path") && !j["lesion_mask_path"].is_null())
        r.lesion_mask_path = resolve(j["lesion_mask_path"].get<std::string>());
    if (j.contains("lung_mask_path") && !j["lung_mask_path"].is_null())
        r.lung_mask_path = resolve(j["lung_mask_path"].get<std::string>());
    return r;
}

json record_to_json(const CaseRecord& r, const fs::path& base) {
    auto rel = [&](const fs::path& p) {
        const auto q = fs::relative(p, base);
        return (!q.empty() && q.native()[0] != '.') ? q.string() : p.string();
    };
    json j;
    j["case_id"] = r.case_id;
    j["volume_path"] = rel(r.volume_path);
    j["class_label"] = to_string(r.class_label);
    if (r.lesion_mask_path) j["lesion_mask_path"] = rel(*r.lesion_mask_path);
    if (r.lung_mask_path) j["lung_mask_path"] = rel(*r.lung_mask_path);
    return j;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("missing file: " + path.string());
    std::ifstream is(path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw IoError("unreadable manifest " + path.string() + ": " + e.what());
    }
    const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
    DatasetManifest m;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& names = DatasetManifest::split_names();
        if (std::find(names.begin(), names.end(), it.key()) == names.end())
            throw ValidationError("manifest: unknown split '" + it.key() + "'");
        for (const auto& rj : it.value()) m.split(it.key()).push_back(record_from_json(rj, base));
    }
    validate_manifest(m, /*check_paths=*/true);
    return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
    validate_manifest(m, /*check_paths=*/false);
    const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
    json j;
    for (const auto& name : DatasetManifest::split_names()) {
        j[name] = json::array();
        for (const auto& rec : m.split(name)) j[name].push_back(record_to_json(rec, base));
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("unwritable destination: " + path.string());
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace gasnet::voldata
