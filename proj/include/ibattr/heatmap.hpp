#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibattr/common.hpp"
#include "ibattr/pgm.hpp"
#include "ibattr/synth.hpp"

namespace ibattr {

// Input-resolution attribution readout. IBA heatmaps carry information
// capacity in bits; Grad-CAM heatmaps are max-normalized to [0,1].
struct Heatmap {
    int h = 64, w = 64;
    std::vector<double> values;  // row-major, >= 0
    std::string method;          // "iba" | "gradcam"
    bool roi_applied = false;
};

// Bilinear resize with half-pixel centers; resizing a constant grid yields
// the same constant.
inline std::vector<double> bilinear_resize(const std::vector<double>& src, int sh, int sw,
                                           int dh, int dw) {
    if (src.size() != static_cast<std::size_t>(sh) * sw)
        throw ContractError("bilinear_resize: source size mismatch");
    std::vector<double> dst(static_cast<std::size_t>(dh) * dw);
    const double rscale = static_cast<double>(sh) / dh;
    const double cscale = static_cast<double>(sw) / dw;
    for (int r = 0; r < dh; ++r) {
        double sr = (r + 0.5) * rscale - 0.5;
        sr = std::min(std::max(sr, 0.0), static_cast<double>(sh - 1));
        const int r0 = static_cast<int>(sr);
        const int r1 = std::min(r0 + 1, sh - 1);
        const double fr = sr - r0;
        for (int c = 0; c < dw; ++c) {
            double sc = (c + 0.5) * cscale - 0.5;
            sc = std::min(std::max(sc, 0.0), static_cast<double>(sw - 1));
            const int c0 = static_cast<int>(sc);
            const int c1 = std::min(c0 + 1, sw - 1);
            const double fc = sc - c0;
            const double v00 = src[static_cast<std::size_t>(r0) * sw + c0];
            const double v01 = src[static_cast<std::size_t>(r0) * sw + c1];
            const double v10 = src[static_cast<std::size_t>(r1) * sw + c0];
            const double v11 = src[static_cast<std::size_t>(r1) * sw + c1];
            dst[static_cast<std::size_t>(r) * dw + c] = (1 - fr) * ((1 - fc) * v00 + fc * v01) +
                                                        fr * ((1 - fc) * v10 + fc * v11);
        }
    }
    return dst;
}

// Divide by the maximum; an all-zero map stays all-zero.
inline void normalize_by_max(std::vector<double>& v) {
    double mx = 0.0;
    for (const double x : v) mx = std::max(mx, x);
    if (mx > 0.0)
        for (double& x : v) x /= mx;
}

inline void apply_roi(Heatmap& hm, const BinaryMask& roi) {
    if (roi.h != hm.h || roi.w != hm.w)
        throw ContractError("apply_roi: mask shape does not match heatmap");
    for (std::size_t i = 0; i < hm.values.size(); ++i)
        if (!roi.pix[i]) hm.values[i] = 0.0;
    hm.roi_applied = true;
}

// JSON record: the bit-exact artifact. `extras` fields are merged in
// (predictions, necessity results, ...).
inline nlohmann::json heatmap_to_json(const Heatmap& hm, const std::string& id,
                                      const nlohmann::json& extras = {}) {
    nlohmann::json j;
    j["id"] = id;
    j["method"] = hm.method;
    j["roi_applied"] = hm.roi_applied;
    j["shape"] = {hm.h, hm.w};
    auto rows = nlohmann::json::array();
    for (int r = 0; r < hm.h; ++r) {
        auto row = nlohmann::json::array();
        for (int c = 0; c < hm.w; ++c)
            row.push_back(hm.values[static_cast<std::size_t>(r) * hm.w + c]);
        rows.push_back(std::move(row));
    }
    j["values"] = std::move(rows);
    if (!extras.is_null())
        for (const auto& [k, v] : extras.items()) j[k] = v;
    return j;
}

inline Heatmap heatmap_from_json(const nlohmann::json& j) {
    Heatmap hm;
    try {
        hm.method = j.at("method").get<std::string>();
        hm.roi_applied = j.at("roi_applied").get<bool>();
        hm.h = j.at("shape")[0].get<int>();
        hm.w = j.at("shape")[1].get<int>();
        const auto& rows = j.at("values");
        if (static_cast<int>(rows.size()) != hm.h)
            throw FormatError("heatmap row count does not match shape");
        hm.values.reserve(static_cast<std::size_t>(hm.h) * hm.w);
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != hm.w)
                throw FormatError("heatmap column count does not match shape");
            for (const auto& v : row) hm.values.push_back(v.get<double>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed heatmap json: ") + e.what());
    }
    return hm;
}

// Advisory 8-bit preview, normalized to [0, max].
inline void write_heatmap_preview(const std::string& path, const Heatmap& hm) {
    double mx = 0.0;
    for (const double v : hm.values) mx = std::max(mx, v);
    std::vector<std::uint8_t> bytes(hm.values.size(), 0);
    if (mx > 0.0)
        for (std::size_t i = 0; i < bytes.size(); ++i)
            bytes[i] = static_cast<std::uint8_t>(std::lround(255.0 * hm.values[i] / mx));
    write_pgm(path, hm.w, hm.h, bytes);
}

}  // namespace ibattr
