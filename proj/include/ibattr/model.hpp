#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ibattr/common.hpp"
#include "ibattr/rng.hpp"
#include "ibattr/synth.hpp"
#include "ibattr/tensor.hpp"

namespace ibattr {

// Two fixed small CNNs. The attribution layer is the activation of the third
// convolution in both, at 16x16 spatial resolution:
//   desknet-a: conv16 relu pool | conv32 relu pool | conv32 relu* | pool gap fc
//   desknet-b: conv8  relu pool | conv24 relu pool | conv24 relu* | conv24 relu pool gap fc
enum class Arch { DeskNetA, DeskNetB };

inline std::string arch_name(Arch a) {
    return a == Arch::DeskNetA ? "desknet-a" : "desknet-b";
}

inline Arch parse_arch(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (s == "a" || s == "desknet-a") return Arch::DeskNetA;
    if (s == "b" || s == "desknet-b") return Arch::DeskNetB;
    throw ConfigError("unknown architecture: " + s);
}

template <typename T>
struct Model {
    Arch arch = Arch::DeskNetA;
    std::uint64_t seed = 0;

    // Parameters in declared order; names are stable and serialized.
    std::vector<std::string> param_names;
    std::vector<Tensor<T>> params;

    Tensor<T>& param(const std::string& name) {
        for (std::size_t i = 0; i < param_names.size(); ++i)
            if (param_names[i] == name) return params[i];
        throw ContractError("no parameter named " + name);
    }
    const Tensor<T>& param(const std::string& name) const {
        return const_cast<Model*>(this)->param(name);
    }

    bool has_conv4() const { return arch == Arch::DeskNetB; }

    Shape feature_shape() const {
        return arch == Arch::DeskNetA ? Shape{32, 16, 16} : Shape{24, 16, 16};
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params) n += p.size();
        return n;
    }

    // Training needs gradient buffers; attribution workers sharing the model
    // must not have them (closures would race on shared buffers).
    void set_trainable(bool on) {
        for (auto& p : params) {
            p.set_requires_grad(on);
            if (on) p.zero_grad();
        }
    }
};

template <typename T>
Model<T> build_model(Arch arch, std::uint64_t seed) {
    Model<T> m;
    m.arch = arch;
    m.seed = seed;
    SplitMix64 rng = SplitMix64::child(seed, "init:" + arch_name(arch));

    auto add_param = [&m](const std::string& name, Tensor<T> t) {
        m.param_names.push_back(name);
        m.params.push_back(std::move(t));
    };
    // He-style init for the conv stack: weight ~ normal(0, sqrt(2/fan_in)),
    // biases zero. The classifier head uses a small normal (std 0.01) so a
    // fresh model predicts near-uniformly; He scaling there would let the
    // pool/relu cascade blow the initial logits up.
    auto conv_param = [&](const std::string& name, int cout, int cin) {
        Tensor<T> w(Shape{cout, cin, 3, 3});
        const double stddev = std::sqrt(2.0 / (9.0 * cin));
        for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = static_cast<T>(stddev * rng.normal());
        add_param(name + ".w", std::move(w));
        add_param(name + ".b", Tensor<T>(Shape{cout}));
    };
    auto fc_param = [&](int out, int in) {
        Tensor<T> w(Shape{out, in});
        for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = static_cast<T>(0.01 * rng.normal());
        add_param("fc.w", std::move(w));
        add_param("fc.b", Tensor<T>(Shape{out}));
    };

    if (arch == Arch::DeskNetA) {
        conv_param("conv1", 16, 1);
        conv_param("conv2", 32, 16);
        conv_param("conv3", 32, 32);
        fc_param(2, 32);
    } else {
        conv_param("conv1", 8, 1);
        conv_param("conv2", 24, 8);
        conv_param("conv3", 24, 24);
        conv_param("conv4", 24, 24);
        fc_param(2, 24);
    }
    return m;
}

template <typename T>
Tensor<T> image_tensor(const GrayImage& img) {
    std::vector<T> v(img.pix.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(img.pix[i]);
    return Tensor<T>::from(std::move(v), Shape{1, img.h, img.w});
}

// Head of the network, up to and including the attribution layer activation.
template <typename T>
Tensor<T> forward_capture(const Model<T>& m, const Tensor<T>& image, Tape<T>* tape = nullptr) {
    if (image.shape() != Shape{1, 64, 64})
        throw ContractError("forward_capture: image must be [1,64,64], got " +
                            shape_str(image.shape()));
    auto x = conv2d(image, m.param("conv1.w"), m.param("conv1.b"), tape);
    x = relu(x, tape);
    x = maxpool2d(x, tape);
    x = conv2d(x, m.param("conv2.w"), m.param("conv2.b"), tape);
    x = relu(x, tape);
    x = maxpool2d(x, tape);
    x = conv2d(x, m.param("conv3.w"), m.param("conv3.b"), tape);
    x = relu(x, tape);  // attribution layer
    return x;
}

// Layers after the attribution layer, to class logits.
template <typename T>
Tensor<T> tail_logits(const Model<T>& m, const Tensor<T>& features, Tape<T>* tape = nullptr) {
    if (features.shape() != m.feature_shape())
        throw ContractError("tail_logits: features must be " + shape_str(m.feature_shape()) +
                            ", got " + shape_str(features.shape()));
    auto x = features;
    if (m.has_conv4()) {
        x = conv2d(x, m.param("conv4.w"), m.param("conv4.b"), tape);
        x = relu(x, tape);
    }
    x = maxpool2d(x, tape);
    x = global_avg_pool(x, tape);
    return dense(x, m.param("fc.w"), m.param("fc.b"), tape);
}

// Probability vector [p_neg, p_pos] from injected features; differentiable
// with respect to the features when run on a tape.
template <typename T>
Tensor<T> forward_tail(const Model<T>& m, const Tensor<T>& features, Tape<T>* tape = nullptr) {
    return softmax(tail_logits(m, features, tape), tape);
}

// predict is exactly forward_tail(forward_capture(.)), so the composition
// identity holds bit-for-bit by construction.
template <typename T>
Tensor<T> predict(const Model<T>& m, const Tensor<T>& image) {
    auto f = forward_capture(m, image);
    return forward_tail(m, f);
}

// --- feature statistics -----------------------------------------------------

// Per-element mean and population standard deviation of the attribution-layer
// features over a set of images; sigma is floored away from zero so Gaussian
// densities built from it stay proper.
template <typename T>
struct FeatureStats {
    Tensor<T> mu;
    Tensor<T> sigma;
    T sigma_floor = T(1e-5);
};

template <typename T>
FeatureStats<T> estimate_stats(const Model<T>& m, const std::vector<Tensor<T>>& images,
                               T sigma_floor = T(1e-5)) {
    if (images.size() < 2)
        throw ContractError("estimate_stats: need at least 2 images, got " +
                            std::to_string(images.size()));
    const Shape fshape = m.feature_shape();
    const std::size_t n = shape_numel(fshape);
    std::vector<double> sum(n, 0.0), sumsq(n, 0.0);
    for (const auto& img : images) {
        const auto f = forward_capture(m, img);
        for (std::size_t i = 0; i < n; ++i) {
            const double v = static_cast<double>(f[i]);
            sum[i] += v;
            sumsq[i] += v * v;
        }
    }
    const double inv = 1.0 / static_cast<double>(images.size());
    FeatureStats<T> st;
    st.sigma_floor = sigma_floor;
    st.mu = Tensor<T>(fshape);
    st.sigma = Tensor<T>(fshape);
    for (std::size_t i = 0; i < n; ++i) {
        const double mean = sum[i] * inv;
        const double var = std::max(0.0, sumsq[i] * inv - mean * mean);
        st.mu[i] = static_cast<T>(mean);
        st.sigma[i] = std::max(static_cast<T>(std::sqrt(var)), sigma_floor);
    }
    return st;
}

// --- training ---------------------------------------------------------------

struct TrainConfig {
    int epochs = 8;
    int batch_size = 16;
    double learning_rate = 2e-3;
    std::uint64_t seed = 0;
};

struct EpochStats {
    double train_loss = 0.0;
    double test_accuracy = 0.0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
};

// Adam on mean softmax cross-entropy over shuffled mini-batches. Fully
// deterministic for a given (seed, config, dataset).
template <typename T>
TrainHistory train(Model<T>& model, const Dataset& data, const TrainConfig& cfg) {
    if (cfg.epochs < 0 || cfg.batch_size <= 0 || cfg.learning_rate < 0)
        throw ConfigError("train: epochs/batch size/learning rate must be non-negative");
    const auto train_idx = data.train_indices();
    const auto test_idx = data.test_indices();
    bool has_pos = false, has_neg = false;
    for (const auto i : train_idx) (data.samples[i].positive ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
        throw ConfigError("train: training split must contain both classes");

    std::vector<Tensor<T>> images(data.samples.size());
    for (std::size_t i = 0; i < data.samples.size(); ++i)
        images[i] = image_tensor<T>(data.samples[i].image);

    model.set_trainable(true);
    SplitMix64 rng = SplitMix64::child(cfg.seed, "train");
    AdamState<T> opt;
    TrainHistory history;
    std::vector<std::size_t> order(train_idx);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.next_below(i)]);

        double epoch_loss = 0.0;
        Tape<T> tape;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
            for (auto& p : model.params) p.zero_grad();
            for (std::size_t s = b; s < end; ++s) {
                const auto& sample = data.samples[order[s]];
                tape.reset();
                auto feats = forward_capture(model, images[order[s]], &tape);
                auto logits = tail_logits(model, feats, &tape);
                auto loss = softmax_cross_entropy(logits, sample.positive ? 1 : 0, &tape);
                epoch_loss += static_cast<double>(loss.item());
                tape.backward(loss);
            }
            const T inv = T(1) / static_cast<T>(end - b);
            for (auto& p : model.params) {
                T* g = p.grad();
                for (std::size_t i = 0; i < p.size(); ++i) g[i] *= inv;
            }
            adam_step(model.params, opt, static_cast<T>(cfg.learning_rate));
        }

        EpochStats es;
        es.train_loss = order.empty() ? 0.0 : epoch_loss / static_cast<double>(order.size());
        std::size_t correct = 0;
        for (const auto i : test_idx) {
            const auto probs = predict(model, images[i]);
            const bool pred_pos = probs[1] > probs[0];
            if (pred_pos == data.samples[i].positive) ++correct;
        }
        es.test_accuracy =
            test_idx.empty() ? 0.0 : static_cast<double>(correct) / test_idx.size();
        history.epochs.push_back(es);
    }
    model.set_trainable(false);
    return history;
}

// --- checkpoint I/O ----------------------------------------------------------
//
// Single file: one line of header JSON (arch, seed, parameter names+shapes),
// then raw little-endian float32 for each parameter in declared order.

template <typename T>
void save_model(const Model<T>& m, const std::string& path) {
    nlohmann::json j;
    j["format"] = 1;
    j["arch"] = arch_name(m.arch);
    j["seed"] = m.seed;
    j["params"] = nlohmann::json::array();
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        nlohmann::json p;
        p["name"] = m.param_names[i];
        p["shape"] = m.params[i].shape();
        j["params"].push_back(p);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump() << "\n";
    for (const auto& p : m.params) {
        std::vector<float> raw(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) raw[i] = static_cast<float>(p[i]);
        out.write(reinterpret_cast<const char*>(raw.data()),
                  static_cast<std::streamsize>(raw.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed: " + path);
}

template <typename T>
Model<T> load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::string header;
    if (!std::getline(in, header)) throw FormatError("empty checkpoint: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed checkpoint header " + path + ": " + e.what());
    }
    Model<T> m;
    try {
        m = build_model<T>(parse_arch(j.at("arch").get<std::string>()),
                           j.at("seed").get<std::uint64_t>());
        const auto& jp = j.at("params");
        if (jp.size() != m.params.size())
            throw FormatError("checkpoint " + path + ": parameter list does not match " +
                              arch_name(m.arch));
        for (std::size_t i = 0; i < m.params.size(); ++i) {
            if (jp[i].at("name").get<std::string>() != m.param_names[i] ||
                jp[i].at("shape").get<Shape>() != m.params[i].shape())
                throw FormatError("checkpoint " + path + ": parameter " + m.param_names[i] +
                                  " does not match " + arch_name(m.arch));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint header " + path + " missing fields: " + e.what());
    }
    for (auto& p : m.params) {
        std::vector<float> raw(p.size());
        in.read(reinterpret_cast<char*>(raw.data()),
                static_cast<std::streamsize>(raw.size() * sizeof(float)));
        if (static_cast<std::size_t>(in.gcount()) != raw.size() * sizeof(float))
            throw FormatError("checkpoint " + path + ": truncated parameter data");
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<T>(raw[i]);
    }
    char extra;
    if (in.read(&extra, 1))
        throw FormatError("checkpoint " + path + ": trailing bytes after parameters");
    return m;
}

}  // namespace ibattr
