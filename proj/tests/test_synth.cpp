#include "catch_amalgamated.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ibattr/synth.hpp"

using namespace ibattr;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    const auto p = fs::path("synth_test_tmp") / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

bool samples_equal(const Sample& a, const Sample& b) {
    return a.id == b.id && a.positive == b.positive && a.severity == b.severity &&
           a.ggo_fraction == b.ggo_fraction && a.image.pix == b.image.pix &&
           a.lung_mask.pix == b.lung_mask.pix && a.lesion_mask.pix == b.lesion_mask.pix;
}

}  // namespace

TEST_CASE("severity interval mapping", "[synth][severity]") {
    REQUIRE(severity_from_fraction(0.0) == SeverityClass::CT0);
    REQUIRE(severity_from_fraction(0.25) == SeverityClass::CT1);
    REQUIRE(severity_from_fraction(0.2500001) == SeverityClass::CT2);
    REQUIRE(severity_from_fraction(0.50) == SeverityClass::CT2);
    REQUIRE(severity_from_fraction(0.5000001) == SeverityClass::CT3);
    REQUIRE(severity_from_fraction(0.75) == SeverityClass::CT3);
    REQUIRE(severity_from_fraction(0.7500001) == SeverityClass::CT4);
    REQUIRE(severity_from_fraction(1.0) == SeverityClass::CT4);
    REQUIRE_THROWS_AS(severity_from_fraction(-0.1), ContractError);
    REQUIRE_THROWS_AS(severity_from_fraction(1.1), ContractError);
    REQUIRE(parse_severity("CT-3") == SeverityClass::CT3);
    REQUIRE_THROWS_AS(parse_severity("CT-7"), FormatError);
}

TEST_CASE("generate_sample per-class contracts", "[synth]") {
    SECTION("CT-0 has no lesion") {
        SplitMix64 rng(42);
        const auto s = generate_sample(rng, SeverityClass::CT0, "neg");
        REQUIRE(s.lesion_mask.count() == 0);
        REQUIRE(s.ggo_fraction == 0.0);
        REQUIRE_FALSE(s.positive);
        REQUIRE(s.severity == SeverityClass::CT0);
    }
    SECTION("CT-3 lands in (0.50, 0.75]") {
        for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
            SplitMix64 rng(seed);
            const auto s = generate_sample(rng, SeverityClass::CT3, "ct3");
            REQUIRE(s.ggo_fraction > 0.50);
            REQUIRE(s.ggo_fraction <= 0.75);
            REQUIRE(s.positive);
        }
    }
    SECTION("every class hits its interval and fraction matches the masks") {
        for (int k = 1; k <= 4; ++k) {
            for (std::uint64_t seed = 10; seed < 16; ++seed) {
                SplitMix64 rng(seed * 977 + static_cast<std::uint64_t>(k));
                const auto sev = static_cast<SeverityClass>(k);
                const auto s = generate_sample(rng, sev, "x");
                REQUIRE(severity_from_fraction(s.ggo_fraction) == sev);
                const double recomputed = static_cast<double>(s.lesion_mask.count()) /
                                          static_cast<double>(s.lung_mask.count());
                REQUIRE(s.ggo_fraction == recomputed);
            }
        }
    }
    SECTION("determinism: same stream state, identical sample") {
        SplitMix64 a(777), b(777);
        const auto s1 = generate_sample(a, SeverityClass::CT2, "d");
        const auto s2 = generate_sample(b, SeverityClass::CT2, "d");
        REQUIRE(samples_equal(s1, s2));
    }
    SECTION("lesions stay inside the lungs; pixels are 8-bit quantized") {
        SplitMix64 rng(9001);
        for (int k = 0; k <= 4; ++k) {
            const auto s = generate_sample(rng, static_cast<SeverityClass>(k), "p");
            for (std::size_t i = 0; i < s.lesion_mask.pix.size(); ++i)
                if (s.lesion_mask.pix[i]) REQUIRE(s.lung_mask.pix[i] == 1);
            for (const float v : s.image.pix) {
                REQUIRE(v >= 0.0f);
                REQUIRE(v <= 1.0f);
                const float q = std::round(v * 255.0f) / 255.0f;
                REQUIRE(v == q);
            }
        }
    }
}

TEST_CASE("generate_dataset split arithmetic", "[synth]") {
    SECTION("ten negatives split 7/3") {
        GenConfig cfg;
        cfg.counts = {10, 0, 0, 0, 0};
        const auto ds = generate_dataset(cfg, 5);
        REQUIRE(ds.samples.size() == 10);
        REQUIRE(ds.train_indices().size() == 7);
        REQUIRE(ds.test_indices().size() == 3);
        for (const auto& s : ds.samples) REQUIRE_FALSE(s.positive);
    }
    SECTION("70/30 within one sample per class") {
        GenConfig cfg;
        cfg.counts = {11, 7, 3, 0, 0};
        const auto ds = generate_dataset(cfg, 6);
        // 11 -> 8/3 (rounding toward train), 7 -> 5/2, 3 -> 3/0
        REQUIRE(ds.train_indices().size() == 8 + 5 + 3);
        REQUIRE(ds.test_indices().size() == 3 + 2 + 0);
    }
    SECTION("default config is 800 samples, 560 train / 240 test") {
        const GenConfig cfg;
        REQUIRE(cfg.total() == 800);
        int train = 0, test = 0;
        for (const int c : cfg.counts) {
            test += (3 * c) / 10;
            train += c - (3 * c) / 10;
        }
        REQUIRE(train == 560);
        REQUIRE(test == 240);
    }
    SECTION("ids are unique") {
        GenConfig cfg;
        cfg.counts = {4, 4, 0, 0, 0};
        const auto ds = generate_dataset(cfg, 7);
        std::set<std::string> ids;
        for (const auto& s : ds.samples) ids.insert(s.id);
        REQUIRE(ids.size() == ds.samples.size());
    }
}

TEST_CASE("dataset save/load round trip", "[synth][io]") {
    GenConfig cfg;
    cfg.counts = {3, 2, 1, 1, 1};
    const auto ds = generate_dataset(cfg, 99);
    const auto dir = fresh_dir("roundtrip");
    save_dataset(ds, dir);

    SECTION("round trip is exact") {
        const auto loaded = load_dataset(dir);
        REQUIRE(loaded.manifest.seed == ds.manifest.seed);
        REQUIRE(loaded.manifest.split == ds.manifest.split);
        REQUIRE(loaded.samples.size() == ds.samples.size());
        for (std::size_t i = 0; i < ds.samples.size(); ++i)
            REQUIRE(samples_equal(loaded.samples[i], ds.samples[i]));
    }
    SECTION("saving twice produces identical bytes") {
        const auto dir2 = fresh_dir("roundtrip2");
        save_dataset(ds, dir2);
        REQUIRE(slurp(fs::path(dir) / "manifest.json") ==
                slurp(fs::path(dir2) / "manifest.json"));
        REQUIRE(slurp(fs::path(dir) / ds.manifest.samples[0].image_path) ==
                slurp(fs::path(dir2) / ds.manifest.samples[0].image_path));
    }
    SECTION("missing image file is a format error naming the id") {
        const auto dir3 = fresh_dir("missing");
        save_dataset(ds, dir3);
        fs::remove(fs::path(dir3) / ds.manifest.samples[1].image_path);
        try {
            load_dataset(dir3);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(std::string(e.what()).find(ds.manifest.samples[1].id) !=
                    std::string::npos);
        }
    }
    SECTION("empty directory reports a missing manifest") {
        const auto dir4 = fresh_dir("empty");
        try {
            load_dataset(dir4);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(std::string(e.what()).find("manifest not found") != std::string::npos);
        }
    }
    SECTION("corrupt image file is an io error naming the file") {
        const auto dir5 = fresh_dir("corrupt");
        save_dataset(ds, dir5);
        const auto target = fs::path(dir5) / ds.manifest.samples[0].image_path;
        std::ofstream out(target, std::ios::binary | std::ios::trunc);
        out << "P5\n64 64\n255\nshort";
        out.close();
        try {
            load_dataset(dir5);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            REQUIRE(std::string(e.what()).find(target.filename().string()) !=
                    std::string::npos);
        }
    }
}

TEST_CASE("pgm io", "[synth][io]") {
    const auto dir = fresh_dir("pgm");
    std::vector<std::uint8_t> bytes(12);
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(i * 20);
    const auto path = (fs::path(dir) / "t.pgm").string();
    write_pgm(path, 4, 3, bytes);
    const auto img = read_pgm(path);
    REQUIRE(img.width == 4);
    REQUIRE(img.height == 3);
    REQUIRE(img.bytes == bytes);
    REQUIRE_THROWS_AS(read_pgm((fs::path(dir) / "nope.pgm").string()), IoError);
    REQUIRE_THROWS_AS(write_pgm(path, 5, 3, bytes), ContractError);
}
