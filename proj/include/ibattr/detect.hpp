#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "ibattr/common.hpp"
#include "ibattr/severity.hpp"
#include "ibattr/synth.hpp"

namespace ibattr {

// One connected bright region of a thresholded heatmap.
struct Detection {
    int component_id = 0;
    int area = 0;                          // pixel count
    int row_min = 0, col_min = 0;          // tight bounding box, inclusive
    int row_max = 0, col_max = 0;
    double mean_value = 0.0;               // mean normalized heatmap value inside
};

// Threshold the max-normalized heatmap at > tau inside the ROI, label
// 8-connected components, drop those smaller than min_area. Components are
// ordered by pixel count descending, ties by (row_min, col_min).
inline std::vector<Detection> detect(const std::vector<double>& heatmap, int h, int w,
                                     const BinaryMask* roi = nullptr, double tau = 0.3,
                                     int min_area = 4) {
    if (heatmap.size() != static_cast<std::size_t>(h) * w)
        throw ContractError("detect: heatmap size does not match dimensions");
    if (roi && (roi->h != h || roi->w != w))
        throw ContractError("detect: roi shape does not match heatmap");

    std::vector<double> norm(heatmap);
    double mx = 0.0;
    for (const double v : norm) mx = std::max(mx, v);
    if (mx > 0.0)
        for (double& v : norm) v /= mx;

    std::vector<std::uint8_t> fg(norm.size(), 0);
    for (std::size_t i = 0; i < norm.size(); ++i)
        fg[i] = (norm[i] > tau && (!roi || roi->pix[i])) ? 1 : 0;

    std::vector<int> label(norm.size(), 0);
    std::vector<Detection> found;
    std::vector<std::size_t> stack;
    int next_label = 0;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::size_t start = static_cast<std::size_t>(r) * w + c;
            if (!fg[start] || label[start]) continue;
            ++next_label;
            Detection d;
            d.component_id = next_label;
            d.row_min = d.row_max = r;
            d.col_min = d.col_max = c;
            double sum = 0.0;
            label[start] = next_label;
            stack.assign(1, start);
            while (!stack.empty()) {
                const std::size_t cur = stack.back();
                stack.pop_back();
                const int cr = static_cast<int>(cur) / w, cc = static_cast<int>(cur) % w;
                ++d.area;
                sum += norm[cur];
                d.row_min = std::min(d.row_min, cr);
                d.row_max = std::max(d.row_max, cr);
                d.col_min = std::min(d.col_min, cc);
                d.col_max = std::max(d.col_max, cc);
                for (int dr = -1; dr <= 1; ++dr) {
                    for (int dc = -1; dc <= 1; ++dc) {
                        if (!dr && !dc) continue;
                        const int nr = cr + dr, nc = cc + dc;
                        if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
                        const std::size_t ni = static_cast<std::size_t>(nr) * w + nc;
                        if (fg[ni] && !label[ni]) {
                            label[ni] = next_label;
                            stack.push_back(ni);
                        }
                    }
                }
            }
            d.mean_value = sum / d.area;
            if (d.area >= min_area) found.push_back(d);
        }
    }
    std::sort(found.begin(), found.end(), [](const Detection& a, const Detection& b) {
        if (a.area != b.area) return a.area > b.area;
        if (a.row_min != b.row_min) return a.row_min < b.row_min;
        return a.col_min < b.col_min;
    });
    return found;
}

struct SeverityEstimate {
    double ggo_fraction_pred = 0.0;
    SeverityClass severity_pred = SeverityClass::CT0;
};

// Heatmap-area severity: the fraction of lung pixels whose heatmap value
// exceeds tau. The heatmap is thresholded as given (callers normalize), so a
// pointwise-larger heatmap can never lower the estimate. A negative
// prediction is CT-0 by definition; a positive prediction with zero area maps
// to the minimal positive class.
inline SeverityEstimate estimate_severity(const std::vector<double>& heatmap, int h, int w,
                                          const BinaryMask& lung_mask, bool predicted_positive,
                                          double tau = 0.3) {
    if (heatmap.size() != static_cast<std::size_t>(h) * w)
        throw ContractError("estimate_severity: heatmap size does not match dimensions");
    if (lung_mask.h != h || lung_mask.w != w)
        throw ContractError("estimate_severity: lung mask shape mismatch");
    std::size_t lung = 0, hot = 0;
    for (std::size_t i = 0; i < heatmap.size(); ++i) {
        if (!lung_mask.pix[i]) continue;
        ++lung;
        if (heatmap[i] > tau) ++hot;
    }
    if (lung == 0) throw ContractError("estimate_severity: empty lung mask");

    SeverityEstimate est;
    est.ggo_fraction_pred = static_cast<double>(hot) / static_cast<double>(lung);
    if (!predicted_positive) {
        est.severity_pred = SeverityClass::CT0;
    } else if (est.ggo_fraction_pred == 0.0) {
        est.severity_pred = SeverityClass::CT1;
    } else {
        est.severity_pred = severity_from_fraction(est.ggo_fraction_pred);
    }
    return est;
}

}  // namespace ibattr
