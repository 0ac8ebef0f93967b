// Command-line pipeline: gen-data -> train -> attribute -> evaluate/compare.
// Every stage is file-based, seeded, and byte-reproducible; each run echoes
// its fully resolved configuration next to its outputs.
//
// Exit codes: 0 success, 2 missing/unreadable inputs, 3 inconsistent inputs,
// 4 internal invariant violation.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ibattr/detect.hpp"
#include "ibattr/eval.hpp"
#include "ibattr/gradcam.hpp"
#include "ibattr/iba.hpp"
#include "ibattr/model.hpp"
#include "ibattr/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ibattr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitMissingInput = 2;
constexpr int kExitInconsistent = 3;
constexpr int kExitInternal = 4;

int default_jobs() {
    if (const char* env = std::getenv("IBATTR_JOBS")) {
        const int j = std::atoi(env);
        if (j >= 1) return j;
    }
    return 1;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

void write_json_file(const std::string& path, const json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

// Config echoes use the path strings exactly as given so that runs invoked
// with identical relative paths produce identical bytes.
void echo_config_into_dir(const std::string& dir, const json& cfg) {
    write_json_file((fs::path(dir) / "config.json").string(), cfg);
}

void echo_config_next_to_file(const std::string& out_file, const json& cfg) {
    fs::path p(out_file);
    p.replace_extension("");
    write_json_file(p.string() + ".config.json", cfg);
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) throw IoError(what + " not found: " + path);
}

void require_dataset_dir(const std::string& dir) {
    if (!fs::exists(fs::path(dir) / "manifest.json"))
        throw IoError("dataset manifest not found: " + (fs::path(dir) / "manifest.json").string());
}

// --- gen-data ---------------------------------------------------------------

struct GenDataArgs {
    std::string out;
    std::uint64_t seed = 0;
    std::string counts;
};

GenConfig parse_counts(const std::string& spec) {
    GenConfig cfg;
    if (spec.empty()) return cfg;
    cfg.counts = {0, 0, 0, 0, 0};
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos)
            throw ConfigError("bad --counts entry (want CTk=N): " + tok);
        std::string key = tok.substr(0, eq);
        for (auto& c : key) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        if (key.size() != 3 || key.rfind("CT", 0) != 0 || key[2] < '0' || key[2] > '4')
            throw ConfigError("bad --counts class (want CT0..CT4): " + tok);
        int n = 0;
        try {
            n = std::stoi(tok.substr(eq + 1));
        } catch (const std::logic_error&) {
            throw ConfigError("bad --counts value: " + tok);
        }
        if (n < 0) throw ConfigError("negative --counts value: " + tok);
        cfg.counts[static_cast<std::size_t>(key[2] - '0')] = n;
    }
    return cfg;
}

int cmd_gen_data(const GenDataArgs& a) {
    const GenConfig cfg = parse_counts(a.counts);
    std::cout << "[gen-data] generating " << cfg.total() << " samples (seed " << a.seed
              << ")\n";
    const Dataset ds = generate_dataset(cfg, a.seed);
    save_dataset(ds, a.out);
    json echo;
    echo["command"] = "gen-data";
    echo["seed"] = a.seed;
    echo["counts"] = {{"CT0", cfg.counts[0]},
                      {"CT1", cfg.counts[1]},
                      {"CT2", cfg.counts[2]},
                      {"CT3", cfg.counts[3]},
                      {"CT4", cfg.counts[4]}};
    echo_config_into_dir(a.out, echo);
    std::cout << "[gen-data] wrote " << ds.samples.size() << " samples to " << a.out << "\n";
    return kExitOk;
}

// --- train --------------------------------------------------------------------

struct TrainArgs {
    std::string data, out, arch = "A";
    std::uint64_t seed = 0;
    TrainConfig cfg;
};

int cmd_train(const TrainArgs& a) {
    require_dataset_dir(a.data);
    const Dataset ds = load_dataset(a.data);
    auto model = build_model<float>(parse_arch(a.arch), a.seed);
    TrainConfig cfg = a.cfg;
    cfg.seed = a.seed;
    std::cout << "[train] " << arch_name(model.arch) << ", " << model.parameter_count()
              << " parameters, " << cfg.epochs << " epochs\n";
    const TrainHistory history = train(model, ds, cfg);
    save_model(model, a.out);

    json jh;
    jh["arch"] = arch_name(model.arch);
    jh["epochs"] = json::array();
    for (const auto& e : history.epochs)
        jh["epochs"].push_back(
            {{"train_loss", e.train_loss}, {"test_accuracy", e.test_accuracy}});
    fs::path hist(a.out);
    hist.replace_extension("");
    write_json_file(hist.string() + ".history.json", jh);

    json echo;
    echo["command"] = "train";
    echo["data"] = a.data;
    echo["arch"] = arch_name(model.arch);
    echo["seed"] = a.seed;
    echo["epochs"] = cfg.epochs;
    echo["batch_size"] = cfg.batch_size;
    echo["learning_rate"] = cfg.learning_rate;
    echo_config_next_to_file(a.out, echo);
    if (!history.epochs.empty())
        std::cout << "[train] final test accuracy "
                  << history.epochs.back().test_accuracy << "\n";
    return kExitOk;
}

// --- attribute -------------------------------------------------------------------

struct AttributeArgs {
    std::string model, data, out;
    std::string method = "iba";
    std::uint64_t seed = 0;
    AttributionOptions opt;
    int jobs = default_jobs();
    int min_area = 4;
    bool no_roi = false;
    bool readout_mask = false;
};

json attribution_config_echo(const AttributeArgs& a) {
    json c;
    c["command"] = "attribute";
    c["model"] = a.model;
    c["data"] = a.data;
    c["method"] = a.method;
    c["seed"] = a.seed;
    c["tau"] = a.opt.tau;
    c["roi"] = !a.no_roi;
    c["jobs"] = a.jobs;
    if (a.method == "iba") {
        c["beta"] = a.opt.iba.beta;
        c["steps"] = a.opt.iba.steps;
        c["learning_rate"] = a.opt.iba.learning_rate;
        c["noise_samples"] = a.opt.iba.noise_samples;
        c["alpha_init"] = a.opt.iba.alpha_init;
        c["smooth_sigma"] = a.opt.iba.smooth_sigma;
        c["one_minus_m_floor"] = a.opt.iba.one_minus_m_floor;
        c["readout"] = a.readout_mask ? "mask" : "capacity";
        c["eps_bits"] = a.opt.eps_bits;
        c["delta"] = a.opt.delta;
    }
    return c;
}

int cmd_attribute(const AttributeArgs& args) {
    require_file(args.model, "model checkpoint");
    require_dataset_dir(args.data);
    if (args.method != "iba" && args.method != "gradcam")
        throw ConfigError("unknown method: " + args.method);

    const auto model = load_model<float>(args.model);
    const Dataset ds = load_dataset(args.data);
    AttributionOptions opt = args.opt;
    opt.iba.seed = args.seed;
    opt.iba.readout_mask = args.readout_mask;
    opt.apply_lung_roi = !args.no_roi;

    std::error_code ec;
    fs::create_directories(args.out, ec);
    if (ec) throw IoError("cannot create output directory: " + args.out);

    std::optional<FeatureStats<float>> stats;
    if (args.method == "iba") stats = dataset_stats(model, ds, 500);

    const auto test_idx = ds.test_indices();
    const json cfg_echo = attribution_config_echo(args);
    std::cout << "[attribute] " << args.method << " over " << test_idx.size()
              << " test images (jobs " << args.jobs << ")\n";

    std::vector<std::string> failures(test_idx.size());
    parallel_for(test_idx.size(), args.jobs, [&](std::size_t k) {
        const Sample& s = ds.samples[test_idx[k]];
        try {
            AttributionRecord rec = args.method == "iba"
                                        ? run_iba_image(model, *stats, s, opt)
                                        : run_gradcam_image(model, s, opt);
            json extras = record_extras_json(rec);
            extras["config"] = cfg_echo;
            write_json_file((fs::path(args.out) / (s.id + ".heat.json")).string(),
                            heatmap_to_json(rec.heat, s.id, extras));
            write_heatmap_preview((fs::path(args.out) / (s.id + ".pgm")).string(), rec.heat);

            const auto dets = detect(rec.heat.values, rec.heat.h, rec.heat.w, &s.lung_mask,
                                     opt.tau, args.min_area);
            std::vector<double> norm = rec.heat.values;
            normalize_by_max(norm);
            const auto sev = estimate_severity(norm, rec.heat.h, rec.heat.w, s.lung_mask,
                                               rec.pred_positive, opt.tau);
            json jd;
            jd["id"] = s.id;
            jd["method"] = args.method;
            jd["tau"] = opt.tau;
            jd["min_area"] = args.min_area;
            jd["detections"] = json::array();
            for (const auto& d : dets)
                jd["detections"].push_back({{"area", d.area},
                                            {"box", {d.row_min, d.col_min, d.row_max, d.col_max}},
                                            {"mean_value", d.mean_value}});
            jd["ggo_fraction_pred"] = sev.ggo_fraction_pred;
            jd["severity_pred"] = severity_name(sev.severity_pred);
            write_json_file((fs::path(args.out) / (s.id + ".det.json")).string(), jd);
        } catch (const std::exception& e) {
            failures[k] = s.id + std::string(": ") + e.what();
        }
    });
    for (const auto& f : failures)
        if (!f.empty()) throw ContractError("attribution failed for " + f);

    echo_config_into_dir(args.out, cfg_echo);
    std::cout << "[attribute] wrote " << test_idx.size() << " heatmaps to " << args.out << "\n";
    return kExitOk;
}

// --- evaluate ---------------------------------------------------------------------

struct EvaluateArgs {
    std::string model, data, heatmaps, out;
    double tau = 0.3;
    double confident_p = 0.8;
};

int cmd_evaluate(const EvaluateArgs& a) {
    require_file(a.model, "model checkpoint");
    require_dataset_dir(a.data);
    if (!fs::exists(a.heatmaps)) throw IoError("heatmap directory not found: " + a.heatmaps);

    const auto model = load_model<float>(a.model);
    const Dataset ds = load_dataset(a.data);
    const auto test_idx = ds.test_indices();

    // The heatmap set and the dataset's test split must agree exactly.
    std::vector<std::string> mismatches;
    std::map<std::string, bool> expected;  // id -> found
    for (const auto i : test_idx) expected[ds.samples[i].id] = false;
    std::size_t found = 0;
    for (const auto& entry : fs::directory_iterator(a.heatmaps)) {
        const std::string name = entry.path().filename().string();
        const std::string suffix = ".heat.json";
        if (name.size() <= suffix.size() ||
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
            continue;
        ++found;
        const std::string id = name.substr(0, name.size() - suffix.size());
        auto it = expected.find(id);
        if (it == expected.end())
            mismatches.push_back("unexpected heatmap: " + name);
        else
            it->second = true;
    }
    if (found == 0) throw FormatError("no heatmap json files in: " + a.heatmaps);
    for (const auto& [id, ok] : expected)
        if (!ok) mismatches.push_back("missing heatmap for test id: " + id);
    if (!mismatches.empty()) {
        std::sort(mismatches.begin(), mismatches.end());
        std::string msg = "heatmap/dataset id mismatch:";
        for (std::size_t i = 0; i < mismatches.size() && i < 5; ++i)
            msg += "\n  " + mismatches[i];
        throw FormatError(msg);
    }

    std::map<std::string, std::vector<AttributionRecord>> by_method;
    for (const auto i : test_idx) {
        const std::string id = ds.samples[i].id;
        std::ifstream in(fs::path(a.heatmaps) / (id + ".heat.json"));
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw FormatError("malformed heatmap json for " + id + ": " + e.what());
        }
        auto rec = record_from_json(j, id);
        by_method[rec.heat.method].push_back(std::move(rec));
    }

    MetricsReport report;
    report.tau = a.tau;
    report.test_total = static_cast<int>(test_idx.size());
    const auto by_id = samples_by_id(ds);
    std::vector<bool> preds, labels;
    for (const auto i : test_idx) {
        const auto probs = predict(model, image_tensor<float>(ds.samples[i].image));
        preds.push_back(probs[1] > probs[0]);
        labels.push_back(ds.samples[i].positive);
        if (ds.samples[i].positive) ++report.test_positive;
    }
    report.classification = classification_metrics(preds, labels);

    AttributionOptions opt;
    opt.tau = a.tau;
    opt.confident_p = a.confident_p;
    for (auto& [method, recs] : by_method) {
        std::vector<AttributionRecord> positives;
        for (auto& r : recs)
            if (by_id.at(r.id)->positive) positives.push_back(std::move(r));
        report.methods[method] =
            build_method_report(positives, by_id, opt, method == "iba");
    }

    const json jr = report_to_json(report);
    write_json_file(a.out, jr);
    fs::path txt(a.out);
    txt.replace_extension("");
    write_text_file(txt.string() + ".txt", report_text(report));

    json echo;
    echo["command"] = "evaluate";
    echo["model"] = a.model;
    echo["data"] = a.data;
    echo["heatmaps"] = a.heatmaps;
    echo["tau"] = a.tau;
    echo["confident_p"] = a.confident_p;
    echo_config_next_to_file(a.out, echo);
    std::cout << "[evaluate] wrote " << a.out << "\n";
    return kExitOk;
}

// --- compare -----------------------------------------------------------------------

struct CompareArgs {
    std::string model, model_b, data, out;
    std::uint64_t seed = 0;
    CompareOptions opt;
    std::string sweep_beta;
    int sweep_images = 30;
};

int cmd_compare(const CompareArgs& a) {
    require_file(a.model, "model checkpoint");
    if (!a.model_b.empty()) require_file(a.model_b, "second model checkpoint");
    require_dataset_dir(a.data);

    const auto model = load_model<float>(a.model);
    std::optional<Model<float>> model_b;
    if (!a.model_b.empty()) model_b = load_model<float>(a.model_b);
    const Dataset ds = load_dataset(a.data);

    CompareOptions opt = a.opt;
    opt.attribution.iba.seed = a.seed;
    std::cout << "[compare] iba vs gradcam on " << ds.test_indices().size()
              << " test images\n";
    const MetricsReport report =
        compare_methods(model, model_b ? &*model_b : nullptr, ds, opt);
    json jr = report_to_json(report);

    if (!a.sweep_beta.empty()) {
        const auto by_id = samples_by_id(ds);
        std::vector<const Sample*> positives;
        for (const auto i : ds.test_indices())
            if (ds.samples[i].positive) positives.push_back(&ds.samples[i]);
        std::sort(positives.begin(), positives.end(),
                  [](const Sample* x, const Sample* y) { return x->id < y->id; });
        if (static_cast<int>(positives.size()) > a.sweep_images)
            positives.resize(static_cast<std::size_t>(a.sweep_images));
        const auto stats = dataset_stats(model, ds, opt.stats_images);
        std::stringstream ss(a.sweep_beta);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            AttributionOptions swopt = opt.attribution;
            try {
                swopt.iba.beta = std::stod(tok);
            } catch (const std::logic_error&) {
                throw ConfigError("bad --sweep-beta value: " + tok);
            }
            std::vector<AttributionRecord> recs(positives.size());
            parallel_for(positives.size(), opt.jobs, [&](std::size_t k) {
                recs[k] = run_iba_image(model, stats, *positives[k], swopt);
            });
            jr["beta_sensitivity"][tok] =
                loc_json(aggregate_localization(recs, by_id, swopt.tau));
        }
    }

    write_json_file(a.out, jr);
    fs::path txt(a.out);
    txt.replace_extension("");
    write_text_file(txt.string() + ".txt", report_text(report));

    json echo;
    echo["command"] = "compare";
    echo["model"] = a.model;
    if (!a.model_b.empty()) echo["model_b"] = a.model_b;
    echo["data"] = a.data;
    echo["seed"] = a.seed;
    echo["tau"] = a.opt.attribution.tau;
    echo["beta"] = a.opt.attribution.iba.beta;
    echo["steps"] = a.opt.attribution.iba.steps;
    echo["jobs"] = a.opt.jobs;
    echo_config_next_to_file(a.out, echo);
    std::cout << "[compare] wrote " << a.out << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"information bottleneck attribution pipeline"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* sc_gen = app.add_subcommand("gen-data", "generate a synthetic lesion dataset");
    sc_gen->add_option("--out", gen.out, "output directory")->required();
    sc_gen->add_option("--seed", gen.seed, "generation seed")->required();
    sc_gen->add_option("--counts", gen.counts, "per-class counts, e.g. CT0=10,CT1=6");

    TrainArgs tr;
    auto* sc_train = app.add_subcommand("train", "train a classifier");
    sc_train->add_option("--data", tr.data, "dataset directory")->required();
    sc_train->add_option("--out", tr.out, "checkpoint output path")->required();
    sc_train->add_option("--arch", tr.arch, "architecture: A or B");
    sc_train->add_option("--seed", tr.seed, "training seed")->required();
    sc_train->add_option("--epochs", tr.cfg.epochs, "training epochs");
    sc_train->add_option("--batch", tr.cfg.batch_size, "mini-batch size");
    sc_train->add_option("--lr", tr.cfg.learning_rate, "Adam learning rate");

    AttributeArgs at;
    auto* sc_attr = app.add_subcommand("attribute", "write heatmaps for the test split");
    sc_attr->add_option("--model", at.model, "model checkpoint")->required();
    sc_attr->add_option("--data", at.data, "dataset directory")->required();
    sc_attr->add_option("--method", at.method, "iba or gradcam")->required();
    sc_attr->add_option("--out", at.out, "output directory")->required();
    sc_attr->add_option("--seed", at.seed, "attribution seed");
    sc_attr->add_option("--beta", at.opt.iba.beta, "bottleneck beta");
    sc_attr->add_option("--steps", at.opt.iba.steps, "optimization steps");
    sc_attr->add_option("--lr", at.opt.iba.learning_rate, "mask learning rate");
    sc_attr->add_option("--noise-samples", at.opt.iba.noise_samples, "noise draws per step");
    sc_attr->add_option("--alpha-init", at.opt.iba.alpha_init, "initial mask logit");
    sc_attr->add_option("--smooth-sigma", at.opt.iba.smooth_sigma,
                        "mask smoothing sigma (feature px, 0 disables)");
    sc_attr->add_option("--tau", at.opt.tau, "detection threshold");
    sc_attr->add_option("--min-area", at.min_area, "minimum detection area");
    sc_attr->add_option("--eps-bits", at.opt.eps_bits, "necessity capacity threshold");
    sc_attr->add_option("--delta", at.opt.delta, "necessity probability tolerance");
    sc_attr->add_option("--jobs", at.jobs, "parallel image workers");
    sc_attr->add_flag("--no-roi", at.no_roi, "skip lung-mask ROI masking");
    sc_attr->add_flag("--readout-mask", at.readout_mask,
                      "read out the mask itself instead of capacity");

    EvaluateArgs ev;
    auto* sc_eval = app.add_subcommand("evaluate", "score saved heatmaps against ground truth");
    sc_eval->add_option("--model", ev.model, "model checkpoint")->required();
    sc_eval->add_option("--data", ev.data, "dataset directory")->required();
    sc_eval->add_option("--heatmaps", ev.heatmaps, "heatmap directory")->required();
    sc_eval->add_option("--out", ev.out, "report json path")->required();
    sc_eval->add_option("--tau", ev.tau, "binarization threshold");
    sc_eval->add_option("--confident-p", ev.confident_p, "confidence filter");

    CompareArgs cp;
    auto* sc_cmp = app.add_subcommand("compare", "run both methods and write one report");
    sc_cmp->add_option("--model", cp.model, "model checkpoint")->required();
    sc_cmp->add_option("--model-b", cp.model_b, "second-architecture checkpoint");
    sc_cmp->add_option("--data", cp.data, "dataset directory")->required();
    sc_cmp->add_option("--out", cp.out, "report json path")->required();
    sc_cmp->add_option("--seed", cp.seed, "attribution seed");
    sc_cmp->add_option("--tau", cp.opt.attribution.tau, "binarization threshold");
    sc_cmp->add_option("--beta", cp.opt.attribution.iba.beta, "bottleneck beta");
    sc_cmp->add_option("--steps", cp.opt.attribution.iba.steps, "optimization steps");
    sc_cmp->add_option("--noise-samples", cp.opt.attribution.iba.noise_samples,
                       "noise draws per step");
    sc_cmp->add_option("--smooth-sigma", cp.opt.attribution.iba.smooth_sigma,
                       "mask smoothing sigma");
    sc_cmp->add_option("--jobs", cp.opt.jobs, "parallel image workers");
    sc_cmp->add_option("--sweep-beta", cp.sweep_beta,
                       "comma list of betas for a sensitivity sweep");
    sc_cmp->add_option("--sweep-images", cp.sweep_images, "positives used per sweep point");
    cp.opt.jobs = default_jobs();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitMissingInput;
    }

    try {
        if (sc_gen->parsed()) return cmd_gen_data(gen);
        if (sc_train->parsed()) return cmd_train(tr);
        if (sc_attr->parsed()) return cmd_attribute(at);
        if (sc_eval->parsed()) return cmd_evaluate(ev);
        if (sc_cmp->parsed()) return cmd_compare(cp);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissingInput;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInconsistent;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInconsistent;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitInternal;
}
