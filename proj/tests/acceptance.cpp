// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Heavy artifacts (dataset, trained models, method comparison) are
// built once and shared by later criteria.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ibattr/eval.hpp"
#include "ibattr/gradcam.hpp"
#include "ibattr/iba.hpp"
#include "ibattr/model.hpp"
#include "ibattr/synth.hpp"
#include "test_support.hpp"

using namespace ibattr;
using namespace ibattr::testsupport;
namespace fs = std::filesystem;

namespace {

struct Failure {
    std::string message;
};

void check(bool ok, const std::string& msg) {
    if (!ok) throw Failure{msg};
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

struct Context {
    std::string cli_path;
    fs::path work = "acceptance_work";

    Dataset data;
    Model<float> model_a, model_b;
    std::optional<FeatureStats<float>> stats_a;
    std::optional<MetricsReport> report;
    double train_a_seconds = 0.0;
    double train_a_accuracy = 0.0;

    std::vector<Tensor<float>> test_images;
    std::vector<std::size_t> test_idx;
};

class Runner {
public:
    explicit Runner(Context& ctx) : ctx_(ctx) {}

    void run(const std::string& name, const std::string& label,
             const std::function<std::string(Context&)>& fn) {
        using clock = std::chrono::steady_clock;
        const auto t0 = clock::now();
        try {
            const std::string detail = fn(ctx_);
            const double secs = std::chrono::duration<double>(clock::now() - t0).count();
            std::cout << "[PASS] " << name << " " << label << ": " << detail << " ("
                      << fmt(secs, 1) << "s)\n";
        } catch (const Failure& f) {
            const double secs = std::chrono::duration<double>(clock::now() - t0).count();
            std::cout << "[FAIL] " << name << " " << label << ": " << f.message << " ("
                      << fmt(secs, 1) << "s)\n";
            ++failures_;
        } catch (const std::exception& e) {
            std::cout << "[FAIL] " << name << " " << label << ": unexpected error: "
                      << e.what() << "\n";
            ++failures_;
        }
        std::cout.flush();
    }

    int failures() const { return failures_; }

private:
    Context& ctx_;
    int failures_ = 0;
};

// ---- C1: gradient correctness -----------------------------------------------

std::string c1_gradients(Context&) {
    SplitMix64 rng(20260810);
    const int points = 100;
    double worst_ops = 0.0;

    for (int p = 0; p < points; ++p) {
        {   // conv2d
            auto x = random_tensor(Shape{2, 4, 4}, rng);
            auto k = random_tensor(Shape{3, 2, 3, 3}, rng);
            auto b = random_tensor(Shape{3}, rng);
            auto w = random_weights(Shape{3, 4, 4}, rng);
            worst_ops = std::max(
                worst_ops,
                grad_check({&x, &k, &b},
                           [&](Tape<double>* t) {
                               return sum_all(mul(conv2d(x, k, b, t), w, t), t);
                           },
                           rng, 2)
                    .max_rel_err);
        }
        {   // relu + maxpool + dense chained
            auto x = random_tensor(Shape{2, 4, 4}, rng);
            auto w = random_tensor(Shape{3, 2}, rng);
            auto b = random_tensor(Shape{3}, rng);
            auto rw = random_weights(Shape{3}, rng);
            worst_ops = std::max(
                worst_ops,
                grad_check({&x, &w, &b},
                           [&](Tape<double>* t) {
                               auto pooled = global_avg_pool(maxpool2d(relu(x, t), t), t);
                               return sum_all(mul(dense(pooled, w, b, t), rw, t), t);
                           },
                           rng, 3)
                    .max_rel_err);
        }
        {   // softmax cross entropy
            auto l = random_tensor(Shape{4}, rng, 0.0, 4.0);
            const int label = static_cast<int>(rng.next_below(4));
            worst_ops = std::max(
                worst_ops,
                grad_check({&l},
                           [&](Tape<double>* t) { return softmax_cross_entropy(l, label, t); },
                           rng, 2)
                    .max_rel_err);
        }
    }
    check(worst_ops <= 1e-4, "op gradient rel err " + fmt(worst_ops, 8) + " > 1e-4");

    // full bottleneck objective, gradients in the mask logits
    const auto model = build_model<double>(Arch::DeskNetA, 91);
    SplitMix64 imgrng(92);
    Tensor<double> img(Shape{1, 64, 64});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = imgrng.uniform();
    const auto feats = forward_capture(model, img);
    FeatureStats<double> stats;
    stats.mu = Tensor<double>(model.feature_shape());
    stats.sigma = Tensor<double>(model.feature_shape());
    for (std::size_t i = 0; i < stats.mu.size(); ++i) {
        stats.mu[i] = imgrng.uniform(-0.5, 0.5);
        stats.sigma[i] = imgrng.uniform(0.25, 1.25);
    }
    BottleneckConfig cfg;
    cfg.noise_samples = 4;
    cfg.seed = 93;
    MaskState<double> ms = make_mask_state<double>(model.feature_shape(), cfg);
    for (std::size_t i = 0; i < ms.alpha.size(); ++i) ms.alpha[i] = imgrng.uniform(-3, 3);

    auto build = [&](Tape<double>* t) {
        SplitMix64 noise(cfg.seed);  // identical draws per evaluation
        if (t) return iba_objective(model, feats, ms, stats, 1, cfg, noise, *t);
        Tape<double> scratch;
        return iba_objective(model, feats, ms, stats, 1, cfg, noise, scratch);
    };
    const auto gc = grad_check({&ms.alpha}, build, rng, 100);
    check(gc.max_rel_err <= 1e-3,
          "objective gradient rel err " + fmt(gc.max_rel_err, 8) + " > 1e-3");
    return "ops worst rel err " + fmt(worst_ops, 8) + ", objective worst rel err " +
           fmt(gc.max_rel_err, 8) + " over 100 points each";
}

// ---- C2: KL closed form vs Monte-Carlo oracle ---------------------------------

std::string c2_kl_oracle(Context&) {
    SplitMix64 rng(777001);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const double m = rng.uniform(0.0, 0.99);
        const double z = rng.uniform(-3.0, 3.0);
        const double c = std::max(1.0 - m, 1e-6);
        double acc = 0.0;
        const int n = 1000000;
        for (int i = 0; i < n; ++i) {
            const double eps = rng.normal();
            const double xt = m * z + c * eps;
            acc += -std::log(c) - 0.5 * eps * eps + 0.5 * xt * xt;
        }
        const double mc = acc / n;
        worst = std::max(worst, std::abs(mc - capacity_kl_std(m, z)));
    }
    check(worst <= 1e-2, "worst |closed-form - MC| " + fmt(worst, 5) + " > 1e-2");

    int violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        double m1 = rng.uniform(0.0, 1.0 - 1e-6);
        double m2 = rng.uniform(0.0, 1.0 - 1e-6);
        if (m1 > m2) std::swap(m1, m2);
        const double z = rng.uniform(-5.0, 5.0);
        if (capacity_kl_std(m1, z) > capacity_kl_std(m2, z) + 1e-15) ++violations;
    }
    check(violations == 0, std::to_string(violations) + " monotonicity violations");
    return "worst MC gap " + fmt(worst, 5) + " over 100 points (1e6 samples each), monotone at "
           "1000 pairs";
}

// ---- dataset + training -------------------------------------------------------

std::string build_dataset(Context& ctx) {
    ctx.data = generate_dataset(GenConfig{}, 20260810);
    ctx.test_idx = ctx.data.test_indices();
    ctx.test_images.clear();
    for (const auto i : ctx.test_idx)
        ctx.test_images.push_back(image_tensor<float>(ctx.data.samples[i].image));
    check(ctx.data.samples.size() == 800, "expected 800 samples");
    check(ctx.data.train_indices().size() == 560, "expected 560 train");
    check(ctx.test_idx.size() == 240, "expected 240 test");
    return "800 samples (560 train / 240 test), seed 20260810";
}

std::string c4_train(Context& ctx) {
    using clock = std::chrono::steady_clock;
    TrainConfig cfg;
    cfg.seed = 7;

    const auto t0 = clock::now();
    ctx.model_a = build_model<float>(Arch::DeskNetA, cfg.seed);
    const auto hist = train(ctx.model_a, ctx.data, cfg);
    ctx.train_a_seconds = std::chrono::duration<double>(clock::now() - t0).count();
    ctx.train_a_accuracy = hist.epochs.back().test_accuracy;

    check(ctx.model_a.parameter_count() == 14114, "desknet-a parameter count drifted");
    check(ctx.train_a_seconds < 300.0,
          "training took " + fmt(ctx.train_a_seconds, 1) + "s >= 300s");
    check(ctx.train_a_accuracy >= 0.90,
          "test accuracy " + fmt(ctx.train_a_accuracy) + " < 0.90");

    // determinism per seed: an identical rerun reproduces the parameters bit
    // for bit
    auto rerun = build_model<float>(Arch::DeskNetA, cfg.seed);
    train(rerun, ctx.data, cfg);
    for (std::size_t p = 0; p < ctx.model_a.params.size(); ++p)
        for (std::size_t i = 0; i < ctx.model_a.params[p].size(); ++i)
            check(ctx.model_a.params[p][i] == rerun.params[p][i],
                  "retrain diverged at parameter " + ctx.model_a.param_names[p]);

    ctx.stats_a = dataset_stats(ctx.model_a, ctx.data, 500);
    return "accuracy " + fmt(ctx.train_a_accuracy) + " in " + fmt(ctx.train_a_seconds, 1) +
           "s, deterministic rerun identical";
}

// ---- C3: identity bottleneck ---------------------------------------------------

std::string c3_identity(Context& ctx) {
    SplitMix64 rng(31337);
    Tensor<float> ones(ctx.model_a.feature_shape(), 1.0f);
    for (std::size_t k = 0; k < ctx.test_images.size(); ++k) {
        const auto& img = ctx.test_images[k];
        const auto feats = forward_capture(ctx.model_a, img);
        const auto eta = sample_noise(*ctx.stats_a, rng);
        const auto via = forward_tail(ctx.model_a, inject_noise(feats, ones, eta));
        const auto direct = predict(ctx.model_a, img);
        check(via[0] == direct[0] && via[1] == direct[1],
              "bit mismatch on test image " + ctx.data.samples[ctx.test_idx[k]].id);
    }
    return "bit-identical on all " + std::to_string(ctx.test_images.size()) + " test images";
}

// ---- C5/C6/C7/C8: the comparative pipeline --------------------------------------

std::string train_model_b(Context& ctx) {
    TrainConfig cfg;
    cfg.seed = 8;
    ctx.model_b = build_model<float>(Arch::DeskNetB, cfg.seed);
    const auto hist = train(ctx.model_b, ctx.data, cfg);
    check(hist.epochs.back().test_accuracy >= 0.85,
          "desknet-b accuracy " + fmt(hist.epochs.back().test_accuracy) + " too low");
    return "desknet-b accuracy " + fmt(hist.epochs.back().test_accuracy);
}

std::string c5_comparative(Context& ctx) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    CompareOptions opt;
    opt.attribution.iba.seed = 101;
    ctx.report = compare_methods(ctx.model_a, &ctx.model_b, ctx.data, opt);
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();

    const auto& iba = ctx.report->methods.at("iba").loc;
    const auto& gc = ctx.report->methods.at("gradcam").loc;
    check(secs < 600.0, "comparison run took " + fmt(secs, 1) + "s >= 600s");
    check(iba.skipped == 0 && gc.skipped == 0, "unexpected skipped samples");
    const double gap = iba.mean_iou - gc.mean_iou;
    check(gap >= 0.05, "iou gap " + fmt(gap) + " < 0.05 (iba " + fmt(iba.mean_iou) +
                           ", gradcam " + fmt(gc.mean_iou) + ")");
    check(iba.mean_fp_area_ratio < gc.mean_fp_area_ratio,
          "fp area ratio not lower (iba " + fmt(iba.mean_fp_area_ratio) + ", gradcam " +
              fmt(gc.mean_fp_area_ratio) + ")");
    return "iou " + fmt(iba.mean_iou) + " vs " + fmt(gc.mean_iou) + " (gap " + fmt(gap) +
           "), fp " + fmt(iba.mean_fp_area_ratio) + " vs " + fmt(gc.mean_fp_area_ratio) +
           " over " + std::to_string(iba.evaluated) + " positives";
}

std::string c6_necessity(Context& ctx) {
    const auto& nec = ctx.report->methods.at("iba").necessity;
    check(nec.has_value(), "necessity aggregate missing");
    check(nec->confident > 0, "no confidently classified positives");
    check(nec->pass_rate >= 0.90, "necessity pass rate " + fmt(nec->pass_rate) + " < 0.90");
    return "pass rate " + fmt(nec->pass_rate) + " (" + std::to_string(nec->passed) + "/" +
           std::to_string(nec->confident) + " confident, " +
           std::to_string(nec->filtered_out) + " filtered)";
}

std::string c7_severity(Context& ctx) {
    check(severity_from_fraction(0.0) == SeverityClass::CT0, "fixture 0.0");
    check(severity_from_fraction(0.25) == SeverityClass::CT1, "fixture 0.25");
    check(severity_from_fraction(0.2500001) == SeverityClass::CT2, "fixture 0.2500001");
    check(severity_from_fraction(0.50) == SeverityClass::CT2, "fixture 0.50");
    check(severity_from_fraction(0.75) == SeverityClass::CT3, "fixture 0.75");
    check(severity_from_fraction(0.7500001) == SeverityClass::CT4, "fixture 0.7500001");
    check(severity_from_fraction(1.0) == SeverityClass::CT4, "fixture 1.0");

    const auto& sev = ctx.report->methods.at("iba").severity;
    check(sev.n > 0, "no severity samples");
    check(sev.ggo_mae <= 0.15, "ggo fraction MAE " + fmt(sev.ggo_mae) + " > 0.15");
    check(sev.class_agreement >= 0.60,
          "severity agreement " + fmt(sev.class_agreement) + " < 0.60");
    return "boundary fixtures exact; MAE " + fmt(sev.ggo_mae) + ", agreement " +
           fmt(sev.class_agreement) + " over " + std::to_string(sev.n) + " positives";
}

std::string c8_cross_arch(Context& ctx) {
    check(ctx.report->cross_arch.has_value(), "cross-architecture block missing");
    const auto& ca = *ctx.report->cross_arch;
    check(ca.matched_mean_iou > ca.shuffled_mean_iou,
          "matched " + fmt(ca.matched_mean_iou) + " not above shuffled " +
              fmt(ca.shuffled_mean_iou));
    return "matched " + fmt(ca.matched_mean_iou) + " > shuffled " +
           fmt(ca.shuffled_mean_iou) + " over " + std::to_string(ca.pairs) + " pairs";
}

// ---- C9: end-to-end byte determinism via the CLI --------------------------------

int run_in_dir(const fs::path& dir, const std::string& cli, const std::string& args,
               const std::string& log) {
    const std::string cmd = "cd " + dir.string() + " && " + cli + " " + args + " > " + log +
                            ".log 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string c9_determinism(Context& ctx) {
    check(!ctx.cli_path.empty(), "--cli path not supplied");
    const fs::path base = ctx.work / "determinism";
    fs::remove_all(base);
    for (const std::string run : {"r1", "r2"}) {
        const fs::path dir = base / run;
        fs::create_directories(dir);
        const std::vector<std::string> stages = {
            "gen-data --out data --seed 121 --counts CT0=12,CT1=8,CT2=4",
            "train --data data --out model.ckpt --arch A --seed 5 --epochs 2 --batch 8",
            "attribute --model model.ckpt --data data --method iba --out heat --seed 9 "
            "--steps 5 --noise-samples 4",
            "attribute --model model.ckpt --data data --method gradcam --out heatg --seed 9",
            "evaluate --model model.ckpt --data data --heatmaps heat --out report.json"};
        for (std::size_t s = 0; s < stages.size(); ++s) {
            const int rc =
                run_in_dir(dir, ctx.cli_path, stages[s], "stage" + std::to_string(s));
            check(rc == 0, run + " stage " + std::to_string(s) + " exited " +
                               std::to_string(rc));
        }
    }

    std::map<std::string, std::string> r1, r2;
    for (const auto& e : fs::recursive_directory_iterator(base / "r1"))
        if (e.is_regular_file() && e.path().extension() != ".log")
            r1[fs::relative(e.path(), base / "r1").string()] = slurp(e.path());
    for (const auto& e : fs::recursive_directory_iterator(base / "r2"))
        if (e.is_regular_file() && e.path().extension() != ".log")
            r2[fs::relative(e.path(), base / "r2").string()] = slurp(e.path());
    check(!r1.empty(), "no artifacts produced");
    check(r1.size() == r2.size(), "artifact counts differ");
    for (const auto& [rel, bytes] : r1) {
        auto it = r2.find(rel);
        check(it != r2.end(), "missing in second run: " + rel);
        check(it->second == bytes, "byte difference in " + rel);
    }
    return "byte-identical artifacts across two runs (" + std::to_string(r1.size()) +
           " files; gen-data, train, attribute x2, evaluate)";
}

// ---- additional run oracles -------------------------------------------------------

std::string o1_ct4_confidence(Context& ctx) {
    int total = 0, confident = 0;
    for (const auto i : ctx.test_idx) {
        const auto& s = ctx.data.samples[i];
        if (s.severity != SeverityClass::CT4) continue;
        ++total;
        const auto probs = predict(ctx.model_a, image_tensor<float>(s.image));
        if (probs[1] > 0.5f) ++confident;
    }
    check(total > 0, "no CT-4 test samples");
    const double rate = static_cast<double>(confident) / total;
    check(rate >= 0.95, "p_pos > 0.5 on only " + fmt(rate) + " of CT-4 test samples");
    return "p_pos > 0.5 on " + std::to_string(confident) + "/" + std::to_string(total) +
           " CT-4 test samples";
}

std::string o2_loss_decreases(Context& ctx) {
    BottleneckConfig cfg;
    cfg.seed = 404;
    int ok = 0, total = 0;
    for (const auto i : ctx.test_idx) {
        const auto& s = ctx.data.samples[i];
        BottleneckConfig c = cfg;
        c.seed = image_seed(cfg.seed, s.id);
        const auto out =
            optimize_mask(ctx.model_a, image_tensor<float>(s.image), *ctx.stats_a, c);
        ++total;
        if (out.loss_trace.back() <= out.loss_trace.front()) ++ok;
    }
    const double rate = static_cast<double>(ok) / total;
    check(rate >= 0.99, "final <= initial loss on only " + fmt(rate) + " of test images");
    return "final loss <= initial on " + std::to_string(ok) + "/" + std::to_string(total) +
           " test images";
}

std::string o3_preservation(Context& ctx) {
    const auto rate = ctx.report->methods.at("iba").preserved_rate;
    check(rate.has_value(), "no confident positives for the preservation check");
    check(*rate >= 0.90, "prediction preserved on only " + fmt(*rate));
    return "target class preserved under fresh noise on " + fmt(*rate) +
           " of confident positives";
}

std::string o4_stats_halves(Context& ctx) {
    const auto train_idx = ctx.data.train_indices();
    std::vector<Tensor<float>> all, h1, h2;
    for (std::size_t k = 0; k < train_idx.size() && k < 500; ++k) {
        auto img = image_tensor<float>(ctx.data.samples[train_idx[k]].image);
        all.push_back(img);
        (k % 2 == 0 ? h1 : h2).push_back(img);
    }
    const auto full = estimate_stats(ctx.model_a, all);
    const auto sa = estimate_stats(ctx.model_a, h1);
    const auto sb = estimate_stats(ctx.model_a, h2);
    double worst = 0.0;
    for (std::size_t i = 0; i < full.mu.size(); ++i) {
        const double avg = 0.5 * (static_cast<double>(sa.mu[i]) + sb.mu[i]);
        worst = std::max(worst, std::abs(avg - static_cast<double>(full.mu[i])));
    }
    check(worst <= 0.05, "half-split mu disagreement " + fmt(worst, 5) + " > 0.05");
    return "worst per-element |mu_full - mean(mu_halves)| = " + fmt(worst, 5);
}

}  // namespace

int main(int argc, char** argv) {
    Context ctx;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--cli") ctx.cli_path = argv[i + 1];
    fs::create_directories(ctx.work);

    Runner r(ctx);
    r.run("C1", "gradient correctness", c1_gradients);
    r.run("C2", "capacity KL oracle", c2_kl_oracle);
    r.run("D0", "default dataset", build_dataset);
    r.run("C4", "desk-scale classifier", c4_train);
    r.run("C3", "identity bottleneck", c3_identity);
    r.run("D1", "second architecture", train_model_b);
    r.run("C5", "comparative claim", c5_comparative);
    r.run("C6", "necessity guarantee", c6_necessity);
    r.run("C7", "severity mapping", c7_severity);
    r.run("C8", "cross-architecture consistency", c8_cross_arch);
    r.run("C9", "end-to-end determinism", c9_determinism);
    r.run("O1", "CT-4 confidence oracle", o1_ct4_confidence);
    r.run("O2", "mask optimization descends", o2_loss_decreases);
    r.run("O3", "prediction preservation", o3_preservation);
    r.run("O4", "feature statistics stability", o4_stats_halves);

    if (r.failures() == 0) {
        std::cout << "acceptance: all criteria passed\n";
        return 0;
    }
    std::cout << "acceptance: " << r.failures() << " criteria FAILED\n";
    return 1;
}
