#include "doctest.h"

#include "hamr/kspace.hpp"
#include "hamr/rng.hpp"
#include "hamr/synthgen.hpp"

#include "helpers.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace hamr;
using testutil::bit_equal;

namespace fs = std::filesystem;

namespace {

synth::CenterProfile test_center(const std::string& id, double sigma, double bias,
                                 int64_t coils) {
    synth::CenterProfile c;
    c.center_id = id;
    c.vendor_tag = synth::Vendor::B;
    c.field_strength = 3.0;
    c.noise_sigma = sigma;
    c.bias_field_strength = bias;
    c.coil_count = coils;
    return c;
}

synth::ProtocolProfile proto(const std::string& id) {
    for (const auto& p : synth::default_protocols())
        if (p.protocol_id == id) return p;
    throw std::runtime_error("no such protocol in defaults");
}

Tensor biased_complex(const Tensor& gt, const Tensor& bias) {
    int64_t T = gt.dim(0), HW = gt.dim(1) * gt.dim(2);
    Tensor out(gt.shape(), Dtype::Complex128);
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < HW; ++i)
            out.cdata()[t * HW + i] = gt.data()[t * HW + i] * bias.data()[i];
    return out;
}

bool cases_equal(const synth::Case& a, const synth::Case& b) {
    return a.case_id == b.case_id && a.center_id == b.center_id &&
           a.protocol_id == b.protocol_id && a.patient_id == b.patient_id &&
           bit_equal(a.gt_image, b.gt_image) && bit_equal(a.sens, b.sens) &&
           bit_equal(a.y, b.y) && bit_equal(a.mask.pattern, b.mask.pattern) &&
           a.mask.kind == b.mask.kind && a.mask.target_accel == b.mask.target_accel &&
           a.mask.acs_lines == b.mask.acs_lines && a.mask.structural_px == b.mask.structural_px;
}

// A scratch dir under the build tree; wiped at the start of each use.
std::string scratch_dir(const std::string& tag) {
    std::string dir = "synthgen_scratch_" + tag;
    fs::remove_all(dir);
    return dir;
}

synth::Dataset light_dataset(const std::vector<std::pair<std::string, int>>& center_counts) {
    synth::Dataset ds;
    const synth::Vendor vendors[4] = {synth::Vendor::A, synth::Vendor::B, synth::Vendor::C,
                                      synth::Vendor::D};
    const char* protos[2] = {"cine", "lge"};
    int vi = 0;
    for (const auto& [cid, n] : center_counts) {
        ds.centers.push_back(test_center(cid, 0.0, 0.1, 4));
        ds.centers.back().vendor_tag = vendors[vi++ % 4];
        for (int i = 0; i < n; ++i) {
            synth::Case k;
            k.center_id = cid;
            k.patient_id = cid + "-P" + std::to_string(i);
            k.protocol_id = protos[i % 2];
            k.case_id = k.patient_id + "-" + k.protocol_id;
            ds.cases.push_back(std::move(k));
        }
    }
    return ds;
}

} // namespace

TEST_CASE("generate_case is byte-identical for repeated calls") {
    auto center = test_center("C101", 0.004, 0.2, 4);
    auto p = proto("cine");
    synth::Case a = synth::generate_case(center, p, "C101-P000", 8.0,
                                         kspace::MaskKind::KtGaussian, 77);
    synth::Case b = synth::generate_case(center, p, "C101-P000", 8.0,
                                         kspace::MaskKind::KtGaussian, 77);
    CHECK(cases_equal(a, b));

    synth::Case c = synth::generate_case(center, p, "C101-P000", 8.0,
                                         kspace::MaskKind::KtGaussian, 78);
    CHECK_FALSE(bit_equal(a.y, c.y));
    CHECK(a.case_id == "C101-P000-cine-kt_gaussian-x8");
}

TEST_CASE("noiseless k-space equals the forward encoding of the biased phantom") {
    auto center = test_center("C102", 0.0, 0.3, 4);
    auto p = proto("mapping");
    synth::Case k = synth::generate_case(center, p, "C102-P000", 8.0,
                                         kspace::MaskKind::Uniform, 5);
    uint64_t cs = synth::case_seed_for("C102", "mapping", "C102-P000", 5);
    Tensor bias = synth::bias_field(center, cs);
    Tensor again = kspace::forward_encode(biased_complex(k.gt_image, bias), k.sens,
                                          k.mask.pattern);
    CHECK(bit_equal(k.y, again));
}

TEST_CASE("noiseless fully sampled data reconstructs |gt * bias| to 1e-10") {
    auto center = test_center("C103", 0.0, 0.4, 8);
    auto p = proto("perfusion");
    uint64_t cs = synth::case_seed_for("C103", "perfusion", "C103-P000", 9);
    Tensor gt = synth::phantom_image(p, derive_seed(cs, "anatomy"));
    Tensor bias = synth::bias_field(center, cs);
    Tensor sens = synth::sens_maps(8, 64, 64, derive_seed(cs, "sens"));
    Tensor ones({p.frames, 64, 64}, Dtype::Real64);
    for (int64_t i = 0; i < ones.numel(); ++i) ones.data()[i] = 1.0;
    Tensor target = biased_complex(gt, bias);
    Tensor recon = kspace::zero_filled_recon(kspace::forward_encode(target, sens, ones));
    double worst = 0.0;
    for (int64_t i = 0; i < recon.numel(); ++i)
        worst = std::max(worst, std::abs(recon.data()[i] - std::abs(target.cdata()[i])));
    CHECK(worst <= 1e-10);
}

TEST_CASE("cine phantom beats between frames") {
    Tensor img = synth::phantom_image(proto("cine"), 1234);
    REQUIRE(img.dim(0) == 5);
    double l2 = 0.0;
    for (int64_t i = 0; i < 64 * 64; ++i) {
        double d = img.data()[i] - img.data()[2 * 64 * 64 + i];
        l2 += d * d;
    }
    CHECK(std::sqrt(l2) > 1e-3);
}

TEST_CASE("phantom values stay in a sane range for every protocol") {
    for (const auto& p : synth::default_protocols()) {
        Tensor img = synth::phantom_image(p, 321);
        CHECK(img.dim(0) == p.frames);
        CHECK(img.min_value() >= 0.0);
        CHECK(img.max_value() <= 1.05);
        CHECK(img.max_value() > 0.5);
    }
}

TEST_CASE("sensitivity maps have unit RSS and vary smoothly") {
    for (int64_t coils : {int64_t{1}, int64_t{4}, int64_t{8}}) {
        Tensor s = synth::sens_maps(coils, 64, 64, 99);
        REQUIRE(s.dim(0) == coils);
        Tensor r = kspace::rss(s);
        double worst = 0.0;
        for (int64_t i = 0; i < r.numel(); ++i)
            worst = std::max(worst, std::abs(r.data()[i] - 1.0));
        CHECK(worst <= 1e-12);

        double jump = 0.0;
        for (int64_t c = 0; c < coils; ++c)
            for (int64_t y = 0; y < 64; ++y)
                for (int64_t x = 0; x + 1 < 64; ++x)
                    jump = std::max(jump, std::abs(s.cdata()[(c * 64 + y) * 64 + x + 1] -
                                                   s.cdata()[(c * 64 + y) * 64 + x]));
        CHECK(jump < 0.15);
    }
}

TEST_CASE("bias fields are bounded, centered at 1, and center-specific") {
    auto strong = test_center("C104", 0.0, 0.35, 4);
    uint64_t cs1 = 11, cs2 = 22;
    Tensor b1 = synth::bias_field(strong, cs1);
    Tensor b2 = synth::bias_field(strong, cs2);
    CHECK(b1.min_value() >= 1.0 - 0.35 - 1e-12);
    CHECK(b1.max_value() <= 1.0 + 0.35 + 1e-12);
    CHECK(std::abs(b1.sum_real() / double(b1.numel()) - 1.0) < 0.02);

    // same center, different case jitter: strongly correlated
    double dot = 0, n1 = 0, n2 = 0;
    for (int64_t i = 0; i < b1.numel(); ++i) {
        double u = b1.data()[i] - 1.0, v = b2.data()[i] - 1.0;
        dot += u * v;
        n1 += u * u;
        n2 += v * v;
    }
    CHECK(dot / std::sqrt(n1 * n2) > 0.9);

    auto other = test_center("C105", 0.0, 0.35, 4);
    CHECK_FALSE(bit_equal(b1, synth::bias_field(other, cs1)));
}

TEST_CASE("k-space noise has the configured std on sampled entries only") {
    double sigma = 0.01;
    auto center = test_center("C106", sigma, 0.2, 4);
    auto p = proto("cine");
    synth::Case k = synth::generate_case(center, p, "C106-P000", 8.0,
                                         kspace::MaskKind::KtGaussian, 3);
    uint64_t cs = synth::case_seed_for("C106", "cine", "C106-P000", 3);
    Tensor bias = synth::bias_field(center, cs);
    Tensor clean = kspace::forward_encode(biased_complex(k.gt_image, bias), k.sens,
                                          k.mask.pattern);

    int64_t T = 5, C = 4, HW = 64 * 64;
    double sq = 0.0;
    int64_t n = 0;
    for (int64_t t = 0; t < T; ++t)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < HW; ++i) {
                auto d = k.y.cdata()[(t * C + c) * HW + i] - clean.cdata()[(t * C + c) * HW + i];
                if (k.mask.pattern.data()[t * HW + i] == 0.0) {
                    CHECK(k.y.cdata()[(t * C + c) * HW + i] == std::complex<double>{0.0, 0.0});
                } else {
                    sq += std::norm(d);
                    n += 2;
                }
            }
    double est = std::sqrt(sq / double(n));
    CHECK(est == doctest::Approx(sigma).epsilon(0.05));
}

TEST_CASE("auto ACS width tracks the acceleration budget") {
    auto center = test_center("C107", 0.0, 0.1, 1);
    auto p = proto("lge");
    auto acs_of = [&](double accel) {
        return synth::generate_case(center, p, "C107-P000", accel, kspace::MaskKind::Radial, 1)
            .mask.acs_lines;
    };
    CHECK(acs_of(8.0) == 8);
    CHECK(acs_of(16.0) == 4);
    CHECK(acs_of(24.0) == 2);
}

TEST_CASE("invalid profiles are rejected") {
    auto center = test_center("C108", 0.0, 0.1, 4);
    synth::ProtocolProfile bad{"spiral", 3, 0, 0, 0, 0};
    CHECK_THROWS(synth::generate_case(center, bad, "C108-P000", 8.0,
                                      kspace::MaskKind::Uniform, 1));
    synth::ProtocolProfile shortcine{"cine", 4, 0.15, 0, 0, 0};
    CHECK_THROWS(shortcine.validate());

    auto coils = test_center("C109", 0.0, 0.1, 3);
    CHECK_THROWS(coils.validate());
    auto biasy = test_center("C110", 0.0, 0.7, 4);
    CHECK_THROWS(biasy.validate());
    auto field = test_center("C111", 0.0, 0.1, 4);
    field.field_strength = 7.0;
    CHECK_THROWS(field.validate());
}

TEST_CASE("dataset container round trip is exact") {
    synth::FleetSpec fleet;
    fleet.centers = {test_center("C201", 0.004, 0.2, 4), test_center("C202", 0.0, 0.1, 1)};
    fleet.patients_per_center = 1;
    synth::Dataset ds = synth::generate_dataset(fleet, 2024);
    REQUIRE(ds.cases.size() == 8);

    std::string dir = scratch_dir("roundtrip");
    synth::write_dataset(ds, dir);
    synth::Dataset back = synth::read_dataset(dir);

    REQUIRE(back.cases.size() == ds.cases.size());
    REQUIRE(back.centers.size() == 2);
    REQUIRE(back.protocols.size() == 4);
    for (size_t i = 0; i < ds.cases.size(); ++i) CHECK(cases_equal(ds.cases[i], back.cases[i]));
    CHECK(back.center("C201").noise_sigma == ds.center("C201").noise_sigma);
    CHECK(back.protocol("cine").wall_motion_amp == ds.protocol("cine").wall_motion_amp);
    CHECK(synth::vendor_name(back.center("C202").vendor_tag) == "B");
    fs::remove_all(dir);
}

TEST_CASE("container corruption is detected with the offending path") {
    synth::FleetSpec fleet;
    fleet.centers = {test_center("C301", 0.0, 0.2, 1)};
    fleet.protocols = {proto("lge")};
    fleet.patients_per_center = 1;
    synth::Dataset ds = synth::generate_dataset(fleet, 7);
    std::string dir = scratch_dir("corrupt");
    synth::write_dataset(ds, dir);
    std::string victim = dir + "/" + ds.cases[0].case_id + ".y.bin";

    SUBCASE("payload byte flip fails the checksum") {
        {
            std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
            f.seekg(0, std::ios::end);
            auto size = f.tellg();
            f.seekp(static_cast<std::streamoff>(size) - 9);
            char b;
            f.seekg(static_cast<std::streamoff>(size) - 9);
            f.read(&b, 1);
            b = static_cast<char>(b ^ 0x5a);
            f.seekp(static_cast<std::streamoff>(size) - 9);
            f.write(&b, 1);
        }
        try {
            synth::read_dataset(dir);
            FAIL("expected checksum failure");
        } catch (const std::exception& e) {
            std::string msg = e.what();
            CHECK(msg.find("checksum") != std::string::npos);
            CHECK(msg.find(victim) != std::string::npos);
        }
    }
    SUBCASE("truncated tensor file fails the byte count check") {
        fs::resize_file(victim, fs::file_size(victim) - 16);
        try {
            synth::read_dataset(dir);
            FAIL("expected byte count failure");
        } catch (const std::exception& e) {
            std::string msg = e.what();
            CHECK(msg.find("byte count") != std::string::npos);
            CHECK(msg.find(victim) != std::string::npos);
        }
    }
    SUBCASE("unknown format version is rejected") {
        std::ifstream in(dir + "/manifest.json");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        auto pos = text.find("\"format_version\": 1");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 19, "\"format_version\": 9");
        std::ofstream(dir + "/manifest.json", std::ios::trunc) << text;
        CHECK_THROWS_WITH_AS(synth::read_dataset(dir),
                             doctest::Contains("unknown dataset format version"),
                             std::runtime_error);
    }
    SUBCASE("garbage manifest is a corrupt-manifest error") {
        std::ofstream(dir + "/manifest.json", std::ios::trunc) << "{ not json";
        try {
            synth::read_dataset(dir);
            FAIL("expected corrupt manifest failure");
        } catch (const std::exception& e) {
            CHECK(std::string(e.what()).find("corrupt manifest") != std::string::npos);
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("tensor file reader validates structure") {
    std::string dir = scratch_dir("tensorio");
    fs::create_directories(dir);
    std::mt19937_64 rng(5);
    Tensor t = testutil::rand_complex({3, 4, 4}, rng);
    std::string path = dir + "/t.bin";
    synth::write_tensor_file(path, t);

    CHECK(bit_equal(synth::read_tensor_file(path, {3, 4, 4}, Dtype::Complex128), t));
    CHECK_THROWS(synth::read_tensor_file(path, {3, 4, 5}, Dtype::Complex128));
    CHECK_THROWS(synth::read_tensor_file(path, {3, 16}, Dtype::Complex128));
    CHECK_THROWS(synth::read_tensor_file(path, {3, 4, 4}, Dtype::Real64));
    CHECK_THROWS(synth::read_tensor_file(dir + "/missing.bin", {3, 4, 4}, Dtype::Complex128));

    std::ofstream(dir + "/junk.bin", std::ios::binary) << "RMAHxxxxxxxxxxxxxxxx";
    CHECK_THROWS_WITH_AS(synth::read_tensor_file(dir + "/junk.bin", {1}, Dtype::Real64),
                         doctest::Contains("bad magic"), std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("split_by_center picks the center closest to the target fraction") {
    auto ds = light_dataset({{"C001", 30}, {"C002", 30}, {"C003", 30}, {"C004", 30}, {"C005", 15}});
    auto [train, val] = synth::split_by_center(ds, 0.15);
    CHECK(val.size() == 15);
    for (size_t i : val) CHECK(ds.cases[i].center_id == "C005");
    CHECK(train.size() + val.size() == ds.cases.size());

    std::set<size_t> seen(train.begin(), train.end());
    for (size_t i : val) CHECK(seen.count(i) == 0);
    std::set<std::string> train_pat, val_pat;
    for (size_t i : train) train_pat.insert(ds.cases[i].patient_id);
    for (size_t i : val) val_pat.insert(ds.cases[i].patient_id);
    for (const auto& p : val_pat) CHECK(train_pat.count(p) == 0);

    auto [tr2, val2] = synth::split_by_center(ds, 1.0);
    CHECK(val2.size() == 30);

    auto single = light_dataset({{"C001", 5}});
    CHECK_THROWS(synth::split_by_center(single, 0.15));

    auto dup = light_dataset({{"C001", 2}, {"C002", 2}});
    dup.cases[3].patient_id = dup.cases[0].patient_id;
    CHECK_THROWS(synth::split_by_center(dup, 0.5));
}

TEST_CASE("hold_out_center partitions on the named center") {
    auto ds = light_dataset({{"C001", 4}, {"C002", 6}});
    auto [rest, held] = synth::hold_out_center(ds, "C002");
    CHECK(held.size() == 6);
    CHECK(rest.size() == 4);
    CHECK_THROWS(synth::hold_out_center(ds, "C009"));
}

TEST_CASE("split_by_center on a subset only considers the subset's centers") {
    auto ds = light_dataset({{"C001", 10}, {"C002", 10}, {"C003", 40}, {"C004", 2}});
    auto [rest, held] = synth::hold_out_center(ds, "C004");

    // within the subset C001/C002 sit at 1/6 each; C004 would be closer to
    // 0.05 overall but is gone
    auto [train, val] = synth::split_by_center(ds, rest, 0.05);
    CHECK(train.size() + val.size() == rest.size());
    CHECK(val.size() == 10);
    for (size_t i : val) {
        CHECK(ds.cases[i].center_id != "C003");
        CHECK(ds.cases[i].center_id != "C004");
    }
    std::string vc = ds.cases[val[0]].center_id;
    for (size_t i : val) CHECK(ds.cases[i].center_id == vc);
    for (size_t i : train) CHECK(ds.cases[i].center_id != vc);

    // full-dataset overload matches the subset overload on all indices
    std::vector<size_t> all(ds.cases.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    auto [tr_a, va_a] = synth::split_by_center(ds, all, 0.3);
    auto [tr_b, va_b] = synth::split_by_center(ds, 0.3);
    CHECK(tr_a == tr_b);
    CHECK(va_a == va_b);

    CHECK_THROWS(synth::split_by_center(ds, held, 0.5));  // single center left
}

TEST_CASE("stratified sampling keeps every stratum alive") {
    auto ds = light_dataset({{"C001", 20}, {"C002", 20}, {"C003", 20}, {"C004", 20}, {"C005", 20}});
    // 5 centers x 2 protocols = 10 strata of 10 cases each
    auto sub = synth::stratified_sample(ds, 0.3, 42);
    CHECK(sub.size() == 30);
    std::map<std::string, int> per;
    for (size_t i : sub) per[ds.cases[i].center_id + "/" + ds.cases[i].protocol_id]++;
    for (const auto& [key, n] : per) CHECK(n == 3);
    CHECK(per.size() == 10);

    auto all = synth::stratified_sample(ds, 1.0, 42);
    REQUIRE(all.size() == ds.cases.size());
    for (size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);

    CHECK(synth::stratified_sample(ds, 0.3, 42) == sub);
    CHECK(synth::stratified_sample(ds, 0.3, 43) != sub);
    CHECK_THROWS(synth::stratified_sample(ds, 0.0, 1));
    CHECK_THROWS(synth::stratified_sample(ds, 1.2, 1));

    auto tiny = light_dataset({{"C001", 1}, {"C002", 9}});
    auto keep = synth::stratified_sample(tiny, 0.1, 7);
    bool has_singleton = false;
    for (size_t i : keep) has_singleton |= tiny.cases[i].center_id == "C001";
    CHECK(has_singleton);
}

TEST_CASE("default fleet profiles are valid and follow the SNR rule") {
    auto centers = synth::default_centers();
    REQUIRE(centers.size() == 5);
    std::set<std::string> vendors;
    for (const auto& c : centers) {
        c.validate();
        vendors.insert(synth::vendor_name(c.vendor_tag));
    }
    CHECK(vendors.size() == 4);
    CHECK(centers[3].center_id == "C004");
    CHECK(centers[3].field_strength == 5.0);

    CHECK(synth::sigma_for_field(0.004, 1.5) > synth::sigma_for_field(0.004, 3.0));
    CHECK(synth::sigma_for_field(0.004, 3.0) > synth::sigma_for_field(0.004, 5.0));
    CHECK(synth::sigma_for_field(0.004, 3.0) == 0.004);

    for (const auto& p : synth::default_protocols()) p.validate();
    CHECK(synth::mask_kind_for("cine") == kspace::MaskKind::KtGaussian);
    CHECK(synth::mask_kind_for("mapping") == kspace::MaskKind::Uniform);
    CHECK(synth::mask_kind_for("lge") == kspace::MaskKind::Radial);
    CHECK_THROWS(synth::mask_kind_for("spiral"));
}
