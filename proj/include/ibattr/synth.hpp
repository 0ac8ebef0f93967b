#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibattr/common.hpp"
#include "ibattr/pgm.hpp"
#include "ibattr/rng.hpp"
#include "ibattr/severity.hpp"

namespace ibattr {

inline constexpr int kImageSize = 64;

struct GrayImage {
    int h = 0, w = 0;
    std::vector<float> pix;  // row-major, values in [0,1]
};

struct BinaryMask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> pix;  // row-major, {0,1}

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto v : pix) n += v;
        return n;
    }
};

// One 64x64 synthetic slice: two dark elliptical lungs on a noisy brighter
// background, with 0-4 brighter soft-edged lesion blobs confined to the
// lungs. Ground-truth masks make localization quantitatively scorable.
struct Sample {
    std::string id;
    GrayImage image;
    bool positive = false;
    BinaryMask lung_mask;
    BinaryMask lesion_mask;
    double ggo_fraction = 0.0;  // lesion area / lung area
    SeverityClass severity = SeverityClass::CT0;
};

struct ManifestEntry {
    std::string id;
    std::string image_path;       // relative to the dataset directory
    std::string lung_mask_path;
    std::string lesion_mask_path;
    bool positive = false;
    SeverityClass severity = SeverityClass::CT0;
    double ggo_fraction = 0.0;
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    std::vector<ManifestEntry> samples;            // generation order
    std::map<std::string, std::string> split;      // id -> "train" | "test"
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<Sample> samples;  // same order as manifest.samples

    std::vector<std::size_t> split_indices(const std::string& which) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (manifest.split.at(samples[i].id) == which) idx.push_back(i);
        return idx;
    }
    std::vector<std::size_t> train_indices() const { return split_indices("train"); }
    std::vector<std::size_t> test_indices() const { return split_indices("test"); }
};

// Counts per severity class CT-0..CT-4. The default rebalances the severely
// skewed clinical distribution into something a small CNN can train on while
// keeping every class populated.
struct GenConfig {
    std::array<int, 5> counts = {400, 250, 100, 40, 10};

    int total() const {
        int t = 0;
        for (const int c : counts) t += c;
        return t;
    }
};

namespace synthdetail {

struct Ellipse {
    double cr = 0, cc = 0;       // center (row, col)
    double rr = 1, rc = 1;       // semi-axes (row, col)
    double angle = 0;            // rotation, radians

    // Normalized squared elliptical distance; <= 1 means inside.
    double dist2(double r, double c, double s = 1.0) const {
        const double dr = r - cr, dc = c - cc;
        const double ca = std::cos(angle), sa = std::sin(angle);
        const double u = ca * dc + sa * dr;
        const double v = -sa * dc + ca * dr;
        const double au = u / (s * rc), av = v / (s * rr);
        return au * au + av * av;
    }
};

inline BinaryMask rasterize_lungs(const Ellipse& left, const Ellipse& right) {
    BinaryMask m{kImageSize, kImageSize,
                 std::vector<std::uint8_t>(kImageSize * kImageSize, 0)};
    for (int r = 0; r < kImageSize; ++r)
        for (int c = 0; c < kImageSize; ++c)
            if (left.dist2(r, c) <= 1.0 || right.dist2(r, c) <= 1.0)
                m.pix[static_cast<std::size_t>(r) * kImageSize + c] = 1;
    return m;
}

// Lesion pixels at blob scale s: union of scaled blobs, clipped to the lungs.
inline std::size_t rasterize_lesions(const std::vector<Ellipse>& blobs, double s,
                                     const BinaryMask& lung, BinaryMask* out) {
    std::size_t count = 0;
    if (out) out->pix.assign(lung.pix.size(), 0);
    for (int r = 0; r < kImageSize; ++r) {
        for (int c = 0; c < kImageSize; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * kImageSize + c;
            if (!lung.pix[i]) continue;
            for (const auto& b : blobs) {
                if (b.dist2(r, c, s) <= 1.0) {
                    ++count;
                    if (out) out->pix[i] = 1;
                    break;
                }
            }
        }
    }
    return count;
}

// Target GGO interval per class, half-open (lo, hi].
inline void severity_interval(SeverityClass sev, double* lo, double* hi) {
    switch (sev) {
        case SeverityClass::CT1: *lo = 0.00; *hi = 0.25; return;
        case SeverityClass::CT2: *lo = 0.25; *hi = 0.50; return;
        case SeverityClass::CT3: *lo = 0.50; *hi = 0.75; return;
        case SeverityClass::CT4: *lo = 0.75; *hi = 1.00; return;
        default: *lo = 0; *hi = 0; return;
    }
}

}  // namespace synthdetail

// Deterministic generation from the sample's own rng stream. Lesion blobs are
// uniformly rescaled (up to 100 resize evaluations per geometry) until the
// lesion/lung area ratio lands in the class interval; if a geometry cannot
// reach the interval a fresh one is drawn.
inline Sample generate_sample(SplitMix64& rng, SeverityClass severity,
                              const std::string& id = "") {
    using namespace synthdetail;
    constexpr double kBackground = 0.78;
    constexpr double kLungLevel = 0.32;
    constexpr double kLesionContrast = 0.35;  // over lung background
    constexpr double kNoiseAmp = 0.05;

    Sample s;
    s.id = id;
    s.severity = severity;
    s.positive = severity != SeverityClass::CT0;

    for (int geometry = 0; geometry < 100; ++geometry) {
        Ellipse left{32.0 + rng.uniform(-2, 2), 20.0 + rng.uniform(-1.5, 1.5),
                     20.0 * rng.uniform(0.9, 1.1), 10.0 * rng.uniform(0.88, 1.12), 0.0};
        Ellipse right{32.0 + rng.uniform(-2, 2), 44.0 + rng.uniform(-1.5, 1.5),
                      20.0 * rng.uniform(0.9, 1.1), 10.0 * rng.uniform(0.88, 1.12), 0.0};
        BinaryMask lung = rasterize_lungs(left, right);
        const double lung_area = static_cast<double>(lung.count());
        if (lung_area < 400) continue;  // degenerate draw

        std::vector<Ellipse> blobs;
        double scale = 1.0;
        if (severity != SeverityClass::CT0) {
            double lo, hi;
            severity_interval(severity, &lo, &hi);
            const bool severe = severity >= SeverityClass::CT3;
            const int nblobs = severe ? 2 + static_cast<int>(rng.next_below(3))
                                      : 1 + static_cast<int>(rng.next_below(4));
            blobs.reserve(static_cast<std::size_t>(nblobs));
            bool placed_ok = true;
            for (int j = 0; j < nblobs; ++j) {
                // Severe cases must reach a plateau near 1.0, so the first two
                // blobs are anchored in different lungs.
                const Ellipse& host =
                    (severe && j < 2) ? (j == 0 ? left : right)
                                      : (rng.next_below(2) == 0 ? left : right);
                bool found = false;
                for (int attempt = 0; attempt < 64 && !found; ++attempt) {
                    const double r = host.cr + rng.uniform(-host.rr, host.rr);
                    const double c = host.cc + rng.uniform(-host.rc, host.rc);
                    if (host.dist2(r, c) <= 0.7 * 0.7) {  // keep centers off the rim
                        blobs.push_back(Ellipse{r, c, rng.uniform(2.5, 6.5),
                                                rng.uniform(2.5, 6.5),
                                                rng.uniform(0.0, 3.141592653589793)});
                        found = true;
                    }
                }
                if (!found) { placed_ok = false; break; }
            }
            if (!placed_ok) continue;

            // Monotone area growth in the common scale: bisect to the interval.
            // A minimum target keeps the mildest lesions visually learnable.
            const double tlo = std::max(lo + 0.02 * (hi - lo), 0.02);
            const double target = tlo + rng.uniform(0.05, 0.85) * (hi - tlo);
            int evals = 0;
            auto fraction_at = [&](double sc) {
                ++evals;
                return static_cast<double>(rasterize_lesions(blobs, sc, lung, nullptr)) /
                       lung_area;
            };
            double s_lo = 0.02, s_hi = 1.0;
            while (fraction_at(s_hi) < target && s_hi < 64.0 && evals < 100) s_hi *= 2.0;
            bool ok = false;
            double f = 0.0;
            while (evals < 100) {
                scale = 0.5 * (s_lo + s_hi);
                f = fraction_at(scale);
                if (f > lo && f <= hi) { ok = true; break; }
                if (f <= target) s_lo = scale; else s_hi = scale;
            }
            if (!ok) continue;  // regenerate with new geometry
            s.ggo_fraction = f;
        }

        s.lung_mask = lung;
        s.lesion_mask = BinaryMask{kImageSize, kImageSize, {}};
        rasterize_lesions(blobs, scale, lung, &s.lesion_mask);

        // Compose intensities, then additive noise, then 8-bit quantization so
        // the in-memory image round-trips exactly through the P5 files.
        s.image = GrayImage{kImageSize, kImageSize,
                            std::vector<float>(kImageSize * kImageSize, 0.0f)};
        for (int r = 0; r < kImageSize; ++r) {
            for (int c = 0; c < kImageSize; ++c) {
                const std::size_t i = static_cast<std::size_t>(r) * kImageSize + c;
                double v = kBackground;
                if (lung.pix[i]) {
                    v = kLungLevel;
                    if (s.lesion_mask.pix[i]) {
                        double wmax = 0.0;
                        for (const auto& b : blobs) {
                            const double d = std::sqrt(b.dist2(r, c, scale));
                            if (d > 1.0) continue;
                            // flat core, cosine ramp to zero at the rim
                            const double wgt =
                                d <= 0.7 ? 1.0
                                         : 0.5 * (1.0 + std::cos(3.141592653589793 *
                                                                 (d - 0.7) / 0.3));
                            wmax = std::max(wmax, wgt);
                        }
                        v += kLesionContrast * wmax;
                    }
                }
                v += rng.uniform(-kNoiseAmp, kNoiseAmp);
                v = std::min(1.0, std::max(0.0, v));
                const int q = static_cast<int>(std::lround(v * 255.0));
                s.image.pix[i] = static_cast<float>(q) / 255.0f;
            }
        }
        return s;
    }
    throw GenerationError("could not reach the requested lesion fraction for " +
                          severity_name(severity));
}

// Stratified 70/30 split per class, rounding toward train; the first
// train-share samples of each class (in generation order) go to train.
inline Dataset generate_dataset(const GenConfig& config, std::uint64_t seed) {
    Dataset ds;
    ds.manifest.seed = seed;
    for (int k = 0; k <= 4; ++k) {
        const auto sev = static_cast<SeverityClass>(k);
        const int count = config.counts[static_cast<std::size_t>(k)];
        if (count < 0) throw ContractError("generate_dataset: negative class count");
        const int n_test = (3 * count) / 10;
        const int n_train = count - n_test;
        for (int i = 0; i < count; ++i) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "ct%d_%04d", k, i);
            const std::string id(buf);
            SplitMix64 stream = SplitMix64::child(seed, id);
            Sample sample = generate_sample(stream, sev, id);
            ManifestEntry e;
            e.id = id;
            e.image_path = "images/" + id + ".pgm";
            e.lung_mask_path = "masks/" + id + "_lung.pgm";
            e.lesion_mask_path = "masks/" + id + "_lesion.pgm";
            e.positive = sample.positive;
            e.severity = sample.severity;
            e.ggo_fraction = sample.ggo_fraction;
            ds.manifest.samples.push_back(e);
            ds.manifest.split[id] = i < n_train ? "train" : "test";
            ds.samples.push_back(std::move(sample));
        }
    }
    return ds;
}

namespace synthdetail {

inline std::vector<std::uint8_t> image_bytes(const GrayImage& img) {
    std::vector<std::uint8_t> b(img.pix.size());
    for (std::size_t i = 0; i < b.size(); ++i)
        b[i] = static_cast<std::uint8_t>(std::lround(img.pix[i] * 255.0f));
    return b;
}

inline std::vector<std::uint8_t> mask_bytes(const BinaryMask& m) {
    std::vector<std::uint8_t> b(m.pix.size());
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = m.pix[i] ? 255 : 0;
    return b;
}

}  // namespace synthdetail

inline void save_dataset(const Dataset& ds, const std::string& directory) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(directory) / "images", ec);
    fs::create_directories(fs::path(directory) / "masks", ec);
    if (ec) throw IoError("cannot create dataset directories under: " + directory);

    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        const auto& e = ds.manifest.samples[i];
        write_pgm((fs::path(directory) / e.image_path).string(), s.image.w, s.image.h,
                  synthdetail::image_bytes(s.image));
        write_pgm((fs::path(directory) / e.lung_mask_path).string(), s.lung_mask.w,
                  s.lung_mask.h, synthdetail::mask_bytes(s.lung_mask));
        write_pgm((fs::path(directory) / e.lesion_mask_path).string(), s.lesion_mask.w,
                  s.lesion_mask.h, synthdetail::mask_bytes(s.lesion_mask));
    }

    nlohmann::json j;
    j["format"] = 1;
    j["seed"] = ds.manifest.seed;
    j["samples"] = nlohmann::json::array();
    for (const auto& e : ds.manifest.samples) {
        nlohmann::json je;
        je["id"] = e.id;
        je["image"] = e.image_path;
        je["lung_mask"] = e.lung_mask_path;
        je["lesion_mask"] = e.lesion_mask_path;
        je["label"] = e.positive ? "positive" : "negative";
        je["severity"] = severity_name(e.severity);
        je["ggo_fraction"] = e.ggo_fraction;
        j["samples"].push_back(je);
    }
    j["split"] = ds.manifest.split;

    std::ofstream out(fs::path(directory) / "manifest.json");
    if (!out) throw IoError("cannot open for writing: " + directory + "/manifest.json");
    out << j.dump(2) << "\n";  // keys sorted by the serializer: byte-stable
    if (!out) throw IoError("write failed: " + directory + "/manifest.json");
}

inline Dataset load_dataset(const std::string& directory) {
    namespace fs = std::filesystem;
    const fs::path mpath = fs::path(directory) / "manifest.json";
    if (!fs::exists(mpath)) throw FormatError("manifest not found in: " + directory);
    std::ifstream in(mpath);
    if (!in) throw IoError("cannot open: " + mpath.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed manifest " + mpath.string() + ": " + e.what());
    }

    Dataset ds;
    try {
        ds.manifest.seed = j.at("seed").get<std::uint64_t>();
        auto split = j.at("split").get<std::map<std::string, std::string>>();
        for (const auto& je : j.at("samples")) {
            ManifestEntry e;
            e.id = je.at("id").get<std::string>();
            e.image_path = je.at("image").get<std::string>();
            e.lung_mask_path = je.at("lung_mask").get<std::string>();
            e.lesion_mask_path = je.at("lesion_mask").get<std::string>();
            const auto label = je.at("label").get<std::string>();
            if (label != "positive" && label != "negative")
                throw FormatError("sample " + e.id + ": unknown label " + label);
            e.positive = label == "positive";
            e.severity = parse_severity(je.at("severity").get<std::string>());
            e.ggo_fraction = je.at("ggo_fraction").get<double>();
            if (!split.count(e.id))
                throw FormatError("sample " + e.id + ": missing split assignment");
            ds.manifest.samples.push_back(e);
        }
        ds.manifest.split = std::move(split);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest " + mpath.string() + " missing fields: " + e.what());
    }

    auto load_mask = [&](const std::string& rel, const std::string& id) {
        if (!fs::exists(fs::path(directory) / rel))
            throw FormatError("sample " + id + ": manifest references missing file " + rel);
        const PgmImage p = read_pgm((fs::path(directory) / rel).string());
        if (p.width != kImageSize || p.height != kImageSize)
            throw FormatError("sample " + id + ": mask " + rel + " is not 64x64");
        BinaryMask m{p.height, p.width, std::vector<std::uint8_t>(p.bytes.size())};
        for (std::size_t i = 0; i < p.bytes.size(); ++i) m.pix[i] = p.bytes[i] > 127 ? 1 : 0;
        return m;
    };

    for (const auto& e : ds.manifest.samples) {
        if (!fs::exists(fs::path(directory) / e.image_path))
            throw FormatError("sample " + e.id + ": manifest references missing file " +
                              e.image_path);
        const PgmImage p = read_pgm((fs::path(directory) / e.image_path).string());
        if (p.width != kImageSize || p.height != kImageSize)
            throw FormatError("sample " + e.id + ": image is not 64x64");
        Sample s;
        s.id = e.id;
        s.positive = e.positive;
        s.severity = e.severity;
        s.ggo_fraction = e.ggo_fraction;
        s.image = GrayImage{p.height, p.width, std::vector<float>(p.bytes.size())};
        for (std::size_t i = 0; i < p.bytes.size(); ++i)
            s.image.pix[i] = static_cast<float>(p.bytes[i]) / 255.0f;
        s.lung_mask = load_mask(e.lung_mask_path, e.id);
        s.lesion_mask = load_mask(e.lesion_mask_path, e.id);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace ibattr
