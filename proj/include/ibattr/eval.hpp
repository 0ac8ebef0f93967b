#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ibattr/common.hpp"
#include "ibattr/detect.hpp"
#include "ibattr/gradcam.hpp"
#include "ibattr/heatmap.hpp"
#include "ibattr/iba.hpp"
#include "ibattr/model.hpp"
#include "ibattr/synth.hpp"

namespace ibattr {

// --- classification ----------------------------------------------------------

struct ClassificationMetrics {
    int tp = 0, fp = 0, tn = 0, fn = 0;
    double accuracy = 0.0;
    std::optional<double> sensitivity;  // undefined without positives
    std::optional<double> specificity;  // undefined without negatives
};

inline ClassificationMetrics classification_metrics(const std::vector<bool>& predictions,
                                                    const std::vector<bool>& labels) {
    if (predictions.size() != labels.size())
        throw ContractError("classification_metrics: length mismatch");
    ClassificationMetrics m;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i])
            ++(predictions[i] ? m.tp : m.fn);
        else
            ++(predictions[i] ? m.fp : m.tn);
    }
    const int n = m.tp + m.fp + m.tn + m.fn;
    m.accuracy = n ? static_cast<double>(m.tp + m.tn) / n : 0.0;
    if (m.tp + m.fn > 0) m.sensitivity = static_cast<double>(m.tp) / (m.tp + m.fn);
    if (m.tn + m.fp > 0) m.specificity = static_cast<double>(m.tn) / (m.tn + m.fp);
    return m;
}

// --- localization -------------------------------------------------------------

struct LocMetrics {
    double iou = 0.0;
    bool pointing_hit = false;
    double fp_area_ratio = 0.0;
};

// B = {max-normalized heatmap > tau}; IoU and false-positive area against the
// ground-truth mask; pointing = heatmap argmax (first in scan order on ties)
// falls inside the ground truth. Empty ground truth is not scorable.
inline std::optional<LocMetrics> localization_metrics(const std::vector<double>& heatmap, int h,
                                                      int w, const BinaryMask& lesion_mask,
                                                      double tau = 0.3) {
    if (heatmap.size() != static_cast<std::size_t>(h) * w)
        throw ContractError("localization_metrics: heatmap size mismatch");
    if (lesion_mask.h != h || lesion_mask.w != w)
        throw ContractError("localization_metrics: mask shape mismatch");
    if (lesion_mask.count() == 0) return std::nullopt;

    double mx = 0.0;
    for (const double v : heatmap) mx = std::max(mx, v);
    std::size_t inter = 0, uni = 0, b_size = 0, b_only = 0, argmax_i = 0;
    for (std::size_t i = 0; i < heatmap.size(); ++i) {
        if (heatmap[i] > heatmap[argmax_i]) argmax_i = i;  // strict: first wins ties
        const bool b = mx > 0.0 && heatmap[i] / mx > tau;
        const bool g = lesion_mask.pix[i] != 0;
        if (b) ++b_size;
        if (b && g) ++inter;
        if (b || g) ++uni;
        if (b && !g) ++b_only;
    }
    LocMetrics lm;
    lm.iou = uni ? static_cast<double>(inter) / uni : 0.0;
    lm.pointing_hit = lesion_mask.pix[argmax_i] != 0;
    lm.fp_area_ratio = static_cast<double>(b_only) / std::max<std::size_t>(b_size, 1);
    return lm;
}

// --- necessity check -----------------------------------------------------------

struct NecessityResult {
    bool pass = false;
    double shift = 0.0;           // |delta p_target|
    int zeroed_locations = 0;     // spatial locations forced to M = 0
    double p_masked = 0.0;
    double p_pruned = 0.0;
};

// Force M to zero at every spatial location whose channel-summed capacity is
// below eps_bits and verify the target probability barely moves. Noise-free
// surrogate eta = mu by default; draws > 0 averages over that many paired
// reparametrized draws instead.
template <typename T>
NecessityResult necessity_check(const Model<T>& model, const Tensor<T>& image,
                                const FeatureStats<T>& stats, const MaskState<T>& mask_state,
                                const CapacityMap<T>& capacity, const BottleneckConfig& cfg,
                                double eps_bits = 0.01, double delta = 0.05, int draws = 0,
                                std::uint64_t draw_seed = 0) {
    auto features = forward_capture(model, image);
    auto probs = forward_tail(model, features);
    const int target = probs[1] > probs[0] ? 1 : 0;

    auto m = derive_mask(mask_state, cfg);
    auto pruned = m.clone_data();
    const Shape& fs = features.shape();
    const std::size_t plane = static_cast<std::size_t>(fs[1]) * fs[2];
    NecessityResult res;
    for (std::size_t i = 0; i < plane; ++i) {
        if (capacity.reduced_bits[i] < eps_bits) {
            ++res.zeroed_locations;
            for (int c = 0; c < fs[0]; ++c) pruned[c * plane + i] = T(0);
        }
    }

    auto p_of = [&](const Tensor<T>& mask) {
        if (draws <= 0) {
            auto probs2 = forward_tail(model, inject_noise(features, mask, stats.mu));
            return static_cast<double>(probs2[static_cast<std::size_t>(target)]);
        }
        SplitMix64 rng = SplitMix64::child(draw_seed, "necessity");
        double acc = 0.0;
        for (int k = 0; k < draws; ++k) {
            auto eta = sample_noise(stats, rng);
            auto probs2 = forward_tail(model, inject_noise(features, mask, eta));
            acc += static_cast<double>(probs2[static_cast<std::size_t>(target)]);
        }
        return acc / draws;
    };
    res.p_masked = p_of(m);
    res.p_pruned = p_of(pruned);
    res.shift = std::abs(res.p_masked - res.p_pruned);
    res.pass = res.shift < delta;
    return res;
}

// --- per-image attribution drivers ---------------------------------------------

struct AttributionOptions {
    BottleneckConfig iba;          // seed here is the run-level seed
    double tau = 0.3;
    double eps_bits = 0.01;
    double delta = 0.05;
    int necessity_draws = 0;
    double confident_p = 0.8;
    bool apply_lung_roi = true;
};

struct AttributionRecord {
    std::string id;
    Heatmap heat;
    bool pred_positive = false;
    double p_pos = 0.0;
    double p_target = 0.0;
    int target_class = 0;
    // IBA-only fields
    bool has_iba_extras = false;
    NecessityResult necessity;
    bool prediction_preserved = false;
    double capacity_total_bits = 0.0;
};

inline std::uint64_t image_seed(std::uint64_t run_seed, const std::string& id) {
    return SplitMix64::child(run_seed, "image:" + id).next_u64();
}

template <typename T>
AttributionRecord run_iba_image(const Model<T>& model, const FeatureStats<T>& stats,
                                const Sample& sample, const AttributionOptions& opt) {
    AttributionRecord rec;
    rec.id = sample.id;
    BottleneckConfig cfg = opt.iba;
    cfg.seed = image_seed(opt.iba.seed, sample.id);

    const auto image = image_tensor<T>(sample.image);
    auto result = optimize_mask(model, image, stats, cfg);
    rec.target_class = result.target_class;
    rec.p_target = result.p_target_unmasked;

    const auto probs = predict(model, image);
    rec.p_pos = static_cast<double>(probs[1]);
    rec.pred_positive = probs[1] > probs[0];

    const BinaryMask* roi = opt.apply_lung_roi ? &sample.lung_mask : nullptr;
    rec.heat = cfg.readout_mask ? mask_heatmap(result.mask, cfg, roi)
                                : capacity_heatmap(result.capacity, roi);

    rec.has_iba_extras = true;
    rec.necessity = necessity_check(model, image, stats, result.mask, result.capacity, cfg,
                                    opt.eps_bits, opt.delta, opt.necessity_draws, cfg.seed);
    for (const double v : result.capacity.reduced_bits) rec.capacity_total_bits += v;

    {   // does the learned mask keep the decision under fresh noise?
        SplitMix64 rng = SplitMix64::child(cfg.seed, "preserve");
        auto features = forward_capture(model, image);
        auto m = derive_mask(result.mask, cfg);
        auto eta = sample_noise(stats, rng);
        auto p = forward_tail(model, inject_noise(features, m, eta));
        const int cls = p[1] > p[0] ? 1 : 0;
        rec.prediction_preserved = cls == rec.target_class;
    }
    return rec;
}

template <typename T>
AttributionRecord run_gradcam_image(const Model<T>& model, const Sample& sample,
                                    const AttributionOptions& opt) {
    AttributionRecord rec;
    rec.id = sample.id;
    const auto image = image_tensor<T>(sample.image);
    const auto probs = predict(model, image);
    rec.p_pos = static_cast<double>(probs[1]);
    rec.pred_positive = probs[1] > probs[0];
    rec.target_class = rec.pred_positive ? 1 : 0;
    rec.p_target = static_cast<double>(probs[static_cast<std::size_t>(rec.target_class)]);
    const BinaryMask* roi = opt.apply_lung_roi ? &sample.lung_mask : nullptr;
    rec.heat = gradcam_heatmap(model, image, roi);
    return rec;
}

// Extras merged into the per-image heatmap JSON so file-based evaluation can
// recover predictions and necessity results without re-running attribution.
inline nlohmann::json record_extras_json(const AttributionRecord& rec) {
    nlohmann::json e;
    e["label_pred"] = rec.pred_positive ? "positive" : "negative";
    e["p_pos"] = rec.p_pos;
    e["p_target"] = rec.p_target;
    e["target_class"] = rec.target_class;
    if (rec.has_iba_extras) {
        e["capacity_total_bits"] = rec.capacity_total_bits;
        e["prediction_preserved"] = rec.prediction_preserved;
        e["necessity"] = {{"pass", rec.necessity.pass},
                          {"shift", rec.necessity.shift},
                          {"zeroed_locations", rec.necessity.zeroed_locations},
                          {"p_masked", rec.necessity.p_masked},
                          {"p_pruned", rec.necessity.p_pruned}};
    }
    return e;
}

inline AttributionRecord record_from_json(const nlohmann::json& j, const std::string& id) {
    AttributionRecord rec;
    rec.id = id;
    rec.heat = heatmap_from_json(j);
    try {
        rec.pred_positive = j.at("label_pred").get<std::string>() == "positive";
        rec.p_pos = j.at("p_pos").get<double>();
        rec.p_target = j.at("p_target").get<double>();
        rec.target_class = j.at("target_class").get<int>();
        if (j.contains("necessity")) {
            rec.has_iba_extras = true;
            const auto& n = j.at("necessity");
            rec.necessity.pass = n.at("pass").get<bool>();
            rec.necessity.shift = n.at("shift").get<double>();
            rec.necessity.zeroed_locations = n.at("zeroed_locations").get<int>();
            rec.necessity.p_masked = n.at("p_masked").get<double>();
            rec.necessity.p_pruned = n.at("p_pruned").get<double>();
            rec.prediction_preserved = j.at("prediction_preserved").get<bool>();
            rec.capacity_total_bits = j.at("capacity_total_bits").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("heatmap json for " + id + " missing fields: " + e.what());
    }
    return rec;
}

// --- aggregation ----------------------------------------------------------------

struct LocalizationAggregate {
    int evaluated = 0, skipped = 0;
    double mean_iou = 0.0, pointing_accuracy = 0.0, mean_fp_area_ratio = 0.0;
};

struct SeverityAggregate {
    int n = 0;
    double class_agreement = 0.0;
    double ggo_mae = 0.0;
};

struct NecessityAggregate {
    int confident = 0, filtered_out = 0, passed = 0;
    double pass_rate = 0.0;
};

struct CrossArchStats {
    int pairs = 0;
    double matched_mean_iou = 0.0;
    double shuffled_mean_iou = 0.0;
};

namespace evaldetail {

// Deterministic order: aggregates must not depend on input iteration order.
inline std::vector<std::size_t> sorted_by_id(const std::vector<AttributionRecord>& recs) {
    std::vector<std::size_t> idx(recs.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return recs[a].id < recs[b].id; });
    return idx;
}

}  // namespace evaldetail

// Localization means over ground-truth positives (empty ground truth counts
// as skipped; silent drops are forbidden).
inline LocalizationAggregate aggregate_localization(
    const std::vector<AttributionRecord>& recs,
    const std::map<std::string, const Sample*>& samples_by_id, double tau) {
    LocalizationAggregate agg;
    double iou = 0, point = 0, fp = 0;
    for (const auto i : evaldetail::sorted_by_id(recs)) {
        const auto& rec = recs[i];
        const Sample& s = *samples_by_id.at(rec.id);
        const auto lm =
            localization_metrics(rec.heat.values, rec.heat.h, rec.heat.w, s.lesion_mask, tau);
        if (!lm) {
            ++agg.skipped;
            continue;
        }
        ++agg.evaluated;
        iou += lm->iou;
        point += lm->pointing_hit ? 1.0 : 0.0;
        fp += lm->fp_area_ratio;
    }
    if (agg.evaluated) {
        agg.mean_iou = iou / agg.evaluated;
        agg.pointing_accuracy = point / agg.evaluated;
        agg.mean_fp_area_ratio = fp / agg.evaluated;
    }
    return agg;
}

// Severity agreement on ground-truth positives; heatmaps are max-normalized
// before the area threshold.
inline SeverityAggregate aggregate_severity(const std::vector<AttributionRecord>& recs,
                                            const std::map<std::string, const Sample*>& samples,
                                            double tau) {
    SeverityAggregate agg;
    double mae = 0, agree = 0;
    for (const auto i : evaldetail::sorted_by_id(recs)) {
        const auto& rec = recs[i];
        const Sample& s = *samples.at(rec.id);
        if (!s.positive) continue;
        std::vector<double> norm = rec.heat.values;
        normalize_by_max(norm);
        const auto est = estimate_severity(norm, rec.heat.h, rec.heat.w, s.lung_mask,
                                           rec.pred_positive, tau);
        ++agg.n;
        mae += std::abs(est.ggo_fraction_pred - s.ggo_fraction);
        agree += est.severity_pred == s.severity ? 1.0 : 0.0;
    }
    if (agg.n) {
        agg.ggo_mae = mae / agg.n;
        agg.class_agreement = agree / agg.n;
    }
    return agg;
}

inline NecessityAggregate aggregate_necessity(const std::vector<AttributionRecord>& recs,
                                              const std::map<std::string, const Sample*>& samples,
                                              double confident_p) {
    NecessityAggregate agg;
    for (const auto i : evaldetail::sorted_by_id(recs)) {
        const auto& rec = recs[i];
        if (!samples.at(rec.id)->positive || !rec.has_iba_extras) continue;
        if (rec.p_target < confident_p) {
            ++agg.filtered_out;
            continue;
        }
        ++agg.confident;
        if (rec.necessity.pass) ++agg.passed;
    }
    agg.pass_rate = agg.confident ? static_cast<double>(agg.passed) / agg.confident : 0.0;
    return agg;
}

inline std::optional<double> aggregate_preserved(
    const std::vector<AttributionRecord>& recs,
    const std::map<std::string, const Sample*>& samples, double confident_p) {
    int confident = 0, preserved = 0;
    for (const auto& rec : recs) {
        if (!rec.has_iba_extras || !samples.at(rec.id)->positive) continue;
        if (rec.p_target < confident_p) continue;
        ++confident;
        if (rec.prediction_preserved) ++preserved;
    }
    if (!confident) return std::nullopt;
    return static_cast<double>(preserved) / confident;
}

// Agreement of binarized maps from two models on the same images, against a
// rotate-by-one shuffled pairing baseline. Maps are max-normalized and
// thresholded at tau; an empty union scores 0.
inline CrossArchStats cross_arch_consistency(const std::vector<AttributionRecord>& a,
                                             const std::vector<AttributionRecord>& b,
                                             double tau) {
    if (a.size() != b.size()) throw ContractError("cross_arch: record counts differ");
    const auto order_a = evaldetail::sorted_by_id(a);
    const auto order_b = evaldetail::sorted_by_id(b);
    const std::size_t n = a.size();
    auto binarize = [tau](const Heatmap& hm) {
        std::vector<std::uint8_t> bits(hm.values.size(), 0);
        double mx = 0.0;
        for (const double v : hm.values) mx = std::max(mx, v);
        if (mx > 0.0)
            for (std::size_t i = 0; i < bits.size(); ++i)
                bits[i] = hm.values[i] / mx > tau ? 1 : 0;
        return bits;
    };
    std::vector<std::vector<std::uint8_t>> ba(n), bb(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (a[order_a[i]].id != b[order_b[i]].id)
            throw ContractError("cross_arch: record ids do not align");
        ba[i] = binarize(a[order_a[i]].heat);
        bb[i] = binarize(b[order_b[i]].heat);
    }
    auto iou = [](const std::vector<std::uint8_t>& x, const std::vector<std::uint8_t>& y) {
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (x[i] && y[i]) ++inter;
            if (x[i] || y[i]) ++uni;
        }
        return uni ? static_cast<double>(inter) / uni : 0.0;
    };
    CrossArchStats st;
    st.pairs = static_cast<int>(n);
    for (std::size_t i = 0; i < n; ++i) {
        st.matched_mean_iou += iou(ba[i], bb[i]);
        st.shuffled_mean_iou += iou(ba[i], bb[(i + 1) % n]);
    }
    if (n) {
        st.matched_mean_iou /= static_cast<double>(n);
        st.shuffled_mean_iou /= static_cast<double>(n);
    }
    return st;
}

// --- report -----------------------------------------------------------------------

struct MethodReport {
    LocalizationAggregate loc;
    std::map<std::string, LocalizationAggregate> tau_sensitivity;
    SeverityAggregate severity;
    std::optional<NecessityAggregate> necessity;
    std::optional<double> preserved_rate;
};

struct MetricsReport {
    int schema_version = 1;
    int test_total = 0, test_positive = 0;
    double tau = 0.3;
    ClassificationMetrics classification;
    std::map<std::string, MethodReport> methods;
    std::optional<CrossArchStats> cross_arch;
};

inline nlohmann::json loc_json(const LocalizationAggregate& a) {
    return {{"mean_iou", a.mean_iou},
            {"pointing_accuracy", a.pointing_accuracy},
            {"mean_fp_area_ratio", a.mean_fp_area_ratio},
            {"evaluated", a.evaluated},
            {"skipped", a.skipped}};
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["schema_version"] = r.schema_version;
    j["dataset"] = {{"test_total", r.test_total}, {"test_positive", r.test_positive}};
    j["tau"] = r.tau;
    nlohmann::json cls;
    cls["accuracy"] = r.classification.accuracy;
    cls["sensitivity"] = r.classification.sensitivity
                             ? nlohmann::json(*r.classification.sensitivity)
                             : nlohmann::json(nullptr);
    cls["specificity"] = r.classification.specificity
                             ? nlohmann::json(*r.classification.specificity)
                             : nlohmann::json(nullptr);
    cls["tp"] = r.classification.tp;
    cls["fp"] = r.classification.fp;
    cls["tn"] = r.classification.tn;
    cls["fn"] = r.classification.fn;
    j["classification"] = cls;
    for (const auto& [name, m] : r.methods) {
        nlohmann::json jm;
        jm["localization"] = loc_json(m.loc);
        nlohmann::json taus;
        for (const auto& [t, agg] : m.tau_sensitivity) taus[t] = loc_json(agg);
        jm["tau_sensitivity"] = taus;
        jm["severity"] = {{"class_agreement", m.severity.class_agreement},
                          {"ggo_mae", m.severity.ggo_mae},
                          {"n", m.severity.n}};
        if (m.necessity)
            jm["necessity"] = {{"pass_rate", m.necessity->pass_rate},
                               {"confident", m.necessity->confident},
                               {"filtered_out", m.necessity->filtered_out},
                               {"passed", m.necessity->passed}};
        if (m.preserved_rate) jm["prediction_preserved_rate"] = *m.preserved_rate;
        j["methods"][name] = jm;
    }
    if (r.cross_arch)
        j["cross_architecture"] = {{"matched_mean_iou", r.cross_arch->matched_mean_iou},
                                   {"shuffled_mean_iou", r.cross_arch->shuffled_mean_iou},
                                   {"pairs", r.cross_arch->pairs}};
    if (r.methods.count("iba") && r.methods.count("gradcam")) {
        const auto& iba = r.methods.at("iba").loc;
        const auto& gc = r.methods.at("gradcam").loc;
        j["comparison"] = {
            {"iou_gap", iba.mean_iou - gc.mean_iou},
            {"iba_more_precise", iba.mean_iou > gc.mean_iou},
            {"iba_less_overprediction", iba.mean_fp_area_ratio < gc.mean_fp_area_ratio}};
    }
    return j;
}

inline std::string report_text(const MetricsReport& r) {
    std::ostringstream os;
    auto pct = [](double v) {
        std::ostringstream t;
        t.setf(std::ios::fixed);
        t.precision(3);
        t << v;
        return t.str();
    };
    os << "metrics report (schema " << r.schema_version << ")\n";
    os << "  test images: " << r.test_total << " (" << r.test_positive << " positive)\n";
    os << "  classification: accuracy " << pct(r.classification.accuracy) << ", sensitivity "
       << (r.classification.sensitivity ? pct(*r.classification.sensitivity) : "n/a")
       << ", specificity "
       << (r.classification.specificity ? pct(*r.classification.specificity) : "n/a") << "\n";
    os << "  localization at tau=" << r.tau << " (positives only):\n";
    os << "    method      mean_iou  pointing  fp_area  evaluated  skipped\n";
    for (const auto& [name, m] : r.methods) {
        os << "    " << name << std::string(name.size() < 12 ? 12 - name.size() : 1, ' ')
           << pct(m.loc.mean_iou) << "     " << pct(m.loc.pointing_accuracy) << "     "
           << pct(m.loc.mean_fp_area_ratio) << "    " << m.loc.evaluated << "        "
           << m.loc.skipped << "\n";
    }
    for (const auto& [name, m] : r.methods) {
        os << "  " << name << " severity: class agreement " << pct(m.severity.class_agreement)
           << ", ggo fraction MAE " << pct(m.severity.ggo_mae) << " over " << m.severity.n
           << " positives\n";
        if (m.necessity)
            os << "  " << name << " necessity: pass rate " << pct(m.necessity->pass_rate)
               << " (" << m.necessity->passed << "/" << m.necessity->confident
               << " confident, " << m.necessity->filtered_out << " filtered)\n";
        if (m.preserved_rate)
            os << "  " << name << " prediction preserved under fresh noise: "
               << pct(*m.preserved_rate) << "\n";
        os << "  " << name << " tau sensitivity:";
        for (const auto& [t, agg] : m.tau_sensitivity)
            os << "  tau=" << t << " iou=" << pct(agg.mean_iou)
               << " fp=" << pct(agg.mean_fp_area_ratio);
        os << "\n";
    }
    if (r.cross_arch)
        os << "  cross-architecture: matched IoU " << pct(r.cross_arch->matched_mean_iou)
           << " vs shuffled " << pct(r.cross_arch->shuffled_mean_iou) << " over "
           << r.cross_arch->pairs << " pairs\n";
    return os.str();
}

// --- whole-pipeline comparison ------------------------------------------------------

inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    jobs = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
    if (jobs <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(jobs));
    for (int t = 0; t < jobs; ++t) {
        workers.emplace_back([&]() {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    }
    for (auto& w : workers) w.join();
}

inline const std::vector<double> kTauTable = {0.2, 0.3, 0.4, 0.5};

inline std::string tau_key(double tau) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << tau;
    return os.str();
}

struct CompareOptions {
    AttributionOptions attribution;
    int jobs = 1;
    int stats_images = 500;  // training images used for feature statistics
};

template <typename T>
FeatureStats<T> dataset_stats(const Model<T>& model, const Dataset& data, int max_images) {
    const auto train_idx = data.train_indices();
    std::vector<Tensor<T>> images;
    for (std::size_t i = 0; i < train_idx.size() && static_cast<int>(i) < max_images; ++i)
        images.push_back(image_tensor<T>(data.samples[train_idx[i]].image));
    return estimate_stats(model, images);
}

inline std::map<std::string, const Sample*> samples_by_id(const Dataset& data) {
    std::map<std::string, const Sample*> m;
    for (const auto& s : data.samples) m[s.id] = &s;
    return m;
}

inline MethodReport build_method_report(const std::vector<AttributionRecord>& recs,
                                        const std::map<std::string, const Sample*>& by_id,
                                        const AttributionOptions& opt, bool iba_extras) {
    MethodReport mr;
    mr.loc = aggregate_localization(recs, by_id, opt.tau);
    for (const double t : kTauTable)
        mr.tau_sensitivity[tau_key(t)] = aggregate_localization(recs, by_id, t);
    mr.severity = aggregate_severity(recs, by_id, opt.tau);
    if (iba_extras) {
        mr.necessity = aggregate_necessity(recs, by_id, opt.confident_p);
        mr.preserved_rate = aggregate_preserved(recs, by_id, opt.confident_p);
    }
    return mr;
}

// Runs IBA and Grad-CAM over all test positives of `data` with `model`,
// aggregates every metric family, and (when a second model is supplied) adds
// the cross-architecture consistency block.
template <typename T>
MetricsReport compare_methods(const Model<T>& model, const Model<T>* model_b,
                              const Dataset& data, const CompareOptions& opt) {
    MetricsReport report;
    report.tau = opt.attribution.tau;
    const auto by_id = samples_by_id(data);
    const auto test_idx = data.test_indices();
    report.test_total = static_cast<int>(test_idx.size());

    std::vector<bool> preds, labels;
    for (const auto i : test_idx) {
        const auto probs = predict(model, image_tensor<T>(data.samples[i].image));
        preds.push_back(probs[1] > probs[0]);
        labels.push_back(data.samples[i].positive);
        if (data.samples[i].positive) ++report.test_positive;
    }
    report.classification = classification_metrics(preds, labels);

    std::vector<std::size_t> positives;
    for (const auto i : test_idx)
        if (data.samples[i].positive) positives.push_back(i);

    const auto stats = dataset_stats(model, data, opt.stats_images);
    std::vector<AttributionRecord> iba_recs(positives.size()), gc_recs(positives.size());
    parallel_for(positives.size(), opt.jobs, [&](std::size_t k) {
        const Sample& s = data.samples[positives[k]];
        iba_recs[k] = run_iba_image(model, stats, s, opt.attribution);
        gc_recs[k] = run_gradcam_image(model, s, opt.attribution);
    });

    report.methods["iba"] = build_method_report(iba_recs, by_id, opt.attribution, true);
    report.methods["gradcam"] = build_method_report(gc_recs, by_id, opt.attribution, false);

    if (model_b) {
        const auto stats_b = dataset_stats(*model_b, data, opt.stats_images);
        std::vector<AttributionRecord> b_recs(positives.size());
        parallel_for(positives.size(), opt.jobs, [&](std::size_t k) {
            const Sample& s = data.samples[positives[k]];
            b_recs[k] = run_iba_image(*model_b, stats_b, s, opt.attribution);
        });
        report.cross_arch = cross_arch_consistency(iba_recs, b_recs, opt.attribution.tau);
    }
    return report;
}

}  // namespace ibattr
