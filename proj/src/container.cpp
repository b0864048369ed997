#include "hamr/synthgen.hpp"

#include "json.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "container format is little-endian; big-endian hosts need byte swapping");

namespace hamr::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'H', 'A', 'M', 'R'};
constexpr uint32_t kTensorVersion = 1;
constexpr int64_t kManifestVersion = 1;

std::vector<char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    ensure(in.good(), "cannot open file: " + path);
    in.seekg(0, std::ios::end);
    auto n = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<char> bytes(static_cast<size_t>(n));
    in.read(bytes.data(), n);
    ensure(in.good(), "failed reading file: " + path);
    return bytes;
}

std::string hex_digest(const unsigned char* md, unsigned int len) {
    static const char* digits = "0123456789abcdef";
    std::string out(len * 2, '0');
    for (unsigned int i = 0; i < len; ++i) {
        out[2 * i] = digits[md[i] >> 4];
        out[2 * i + 1] = digits[md[i] & 0xf];
    }
    return out;
}

Dtype dtype_from_tag(const std::string& tag, const std::string& where) {
    if (tag == "real64") return Dtype::Real64;
    if (tag == "complex128") return Dtype::Complex128;
    ensure(false, "unknown dtype tag \"" + tag + "\" in " + where);
    return Dtype::Real64;
}

} // namespace

std::string sha256_hex_file(const std::string& path) {
    std::vector<char> bytes = read_file_bytes(path);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    ensure(EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) == 1,
           "sha256 failed for " + path);
    return hex_digest(md, len);
}

void write_tensor_file(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    ensure(out.good(), "cannot open for writing: " + path);
    out.write(kMagic, 4);
    const uint32_t version = kTensorVersion;
    const uint32_t rank = static_cast<uint32_t>(t.rank());
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&rank), 4);
    for (size_t d = 0; d < t.rank(); ++d) {
        uint64_t dim = static_cast<uint64_t>(t.dim(d));
        out.write(reinterpret_cast<const char*>(&dim), 8);
    }
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.store_size() * sizeof(double)));
    ensure(out.good(), "failed writing tensor file: " + path);
}

Tensor read_tensor_file(const std::string& path, const std::vector<int64_t>& expect_shape,
                        Dtype expect_dtype) {
    std::vector<char> bytes = read_file_bytes(path);
    ensure(bytes.size() >= 12, "tensor file too short: " + path);
    ensure(std::memcmp(bytes.data(), kMagic, 4) == 0, "bad magic bytes in " + path);
    uint32_t version = 0, rank = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&rank, bytes.data() + 8, 4);
    ensure(version == kTensorVersion,
           "unknown tensor format version " + std::to_string(version) + " in " + path);
    ensure(rank == expect_shape.size(),
           "rank mismatch in " + path + ": file has " + std::to_string(rank));
    size_t header = 12 + 8 * static_cast<size_t>(rank);
    ensure(bytes.size() >= header, "truncated header in " + path);
    for (uint32_t d = 0; d < rank; ++d) {
        uint64_t dim = 0;
        std::memcpy(&dim, bytes.data() + 12 + 8 * d, 8);
        ensure(dim == static_cast<uint64_t>(expect_shape[d]),
               "shape mismatch in " + path + " at dim " + std::to_string(d));
    }
    Tensor t(expect_shape, expect_dtype);
    size_t payload = t.store_size() * sizeof(double);
    ensure(bytes.size() == header + payload,
           "byte count mismatch in " + path + ": expected " + std::to_string(header + payload) +
               ", file has " + std::to_string(bytes.size()));
    std::memcpy(t.data(), bytes.data() + header, payload);
    return t;
}

namespace {

json tensor_entry(const std::string& dir, const std::string& file, const Tensor& t) {
    write_tensor_file(dir + "/" + file, t);
    json j;
    j["file"] = file;
    j["dtype"] = dtype_name(t.dtype());
    j["shape"] = t.shape();
    j["sha256"] = sha256_hex_file(dir + "/" + file);
    return j;
}

Tensor load_tensor_entry(const std::string& dir, const json& entry, const std::string& where) {
    std::string file = entry.at("file").get<std::string>();
    std::string path = dir + "/" + file;
    Tensor t = read_tensor_file(path, entry.at("shape").get<std::vector<int64_t>>(),
                                dtype_from_tag(entry.at("dtype").get<std::string>(), path));
    std::string want_sha = entry.at("sha256").get<std::string>();
    ensure(sha256_hex_file(path) == want_sha, "checksum mismatch for " + where + " (" + path + ")");
    return t;
}

} // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "hamr-dataset";
    manifest["format_version"] = kManifestVersion;

    manifest["centers"] = json::array();
    for (const auto& c : ds.centers) {
        c.validate();
        manifest["centers"].push_back({{"center_id", c.center_id},
                                       {"vendor", vendor_name(c.vendor_tag)},
                                       {"field_strength", c.field_strength},
                                       {"noise_sigma", c.noise_sigma},
                                       {"bias_field_strength", c.bias_field_strength},
                                       {"coil_count", c.coil_count}});
    }
    manifest["protocols"] = json::array();
    for (const auto& p : ds.protocols) {
        p.validate();
        manifest["protocols"].push_back({{"protocol_id", p.protocol_id},
                                         {"frames", p.frames},
                                         {"wall_motion_amp", p.wall_motion_amp},
                                         {"enhance_rate", p.enhance_rate},
                                         {"decay_t1", p.decay_t1},
                                         {"decay_t2", p.decay_t2}});
    }

    manifest["cases"] = json::array();
    for (const auto& c : ds.cases) {
        json jc;
        jc["case_id"] = c.case_id;
        jc["center_id"] = c.center_id;
        jc["protocol_id"] = c.protocol_id;
        jc["patient_id"] = c.patient_id;
        jc["mask"] = {{"kind", kspace::mask_kind_name(c.mask.kind)},
                      {"target_accel", c.mask.target_accel},
                      {"acs_lines", c.mask.acs_lines},
                      {"structural_px", c.mask.structural_px}};
        jc["tensors"] = {{"gt", tensor_entry(dir, c.case_id + ".gt.bin", c.gt_image)},
                         {"sens", tensor_entry(dir, c.case_id + ".sens.bin", c.sens)},
                         {"y", tensor_entry(dir, c.case_id + ".y.bin", c.y)},
                         {"mask_pattern", tensor_entry(dir, c.case_id + ".mask.bin", c.mask.pattern)}};
        manifest["cases"].push_back(std::move(jc));
    }

    std::ofstream out(dir + "/manifest.json", std::ios::trunc);
    ensure(out.good(), "cannot write manifest: " + dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    ensure(out.good(), "failed writing manifest: " + dir + "/manifest.json");
}

Dataset read_dataset(const std::string& dir) {
    std::string mpath = dir + "/manifest.json";
    json manifest;
    try {
        std::ifstream in(mpath);
        ensure(in.good(), "cannot open manifest: " + mpath);
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error("corrupt manifest " + mpath + ": " + e.what());
    }
    ensure(manifest.value("format", "") == "hamr-dataset", "not a dataset manifest: " + mpath);
    int64_t version = manifest.value("format_version", int64_t{-1});
    ensure(version == kManifestVersion,
           "unknown dataset format version " + std::to_string(version) + " in " + mpath);

    Dataset ds;
    for (const auto& jc : manifest.at("centers")) {
        CenterProfile c;
        c.center_id = jc.at("center_id").get<std::string>();
        c.vendor_tag = vendor_from_string(jc.at("vendor").get<std::string>());
        c.field_strength = jc.at("field_strength").get<double>();
        c.noise_sigma = jc.at("noise_sigma").get<double>();
        c.bias_field_strength = jc.at("bias_field_strength").get<double>();
        c.coil_count = jc.at("coil_count").get<int64_t>();
        c.validate();
        ds.centers.push_back(std::move(c));
    }
    for (const auto& jp : manifest.at("protocols")) {
        ProtocolProfile p;
        p.protocol_id = jp.at("protocol_id").get<std::string>();
        p.frames = jp.at("frames").get<int64_t>();
        p.wall_motion_amp = jp.at("wall_motion_amp").get<double>();
        p.enhance_rate = jp.at("enhance_rate").get<double>();
        p.decay_t1 = jp.at("decay_t1").get<double>();
        p.decay_t2 = jp.at("decay_t2").get<double>();
        p.validate();
        ds.protocols.push_back(std::move(p));
    }

    for (const auto& jc : manifest.at("cases")) {
        Case c;
        c.case_id = jc.at("case_id").get<std::string>();
        c.center_id = jc.at("center_id").get<std::string>();
        c.protocol_id = jc.at("protocol_id").get<std::string>();
        c.patient_id = jc.at("patient_id").get<std::string>();
        const json& jt = jc.at("tensors");
        c.gt_image = load_tensor_entry(dir, jt.at("gt"), c.case_id + "/gt");
        c.sens = load_tensor_entry(dir, jt.at("sens"), c.case_id + "/sens");
        c.y = load_tensor_entry(dir, jt.at("y"), c.case_id + "/y");
        const json& jm = jc.at("mask");
        c.mask.kind = kspace::mask_kind_from_string(jm.at("kind").get<std::string>());
        c.mask.pattern = load_tensor_entry(dir, jt.at("mask_pattern"), c.case_id + "/mask_pattern");
        c.mask.target_accel = jm.at("target_accel").get<double>();
        c.mask.acs_lines = jm.at("acs_lines").get<int64_t>();
        c.mask.structural_px = jm.at("structural_px").get<int64_t>();
        ds.cases.push_back(std::move(c));
    }
    return ds;
}

} // namespace hamr::synth
