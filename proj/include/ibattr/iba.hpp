#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ibattr/common.hpp"
#include "ibattr/heatmap.hpp"
#include "ibattr/model.hpp"
#include "ibattr/rng.hpp"
#include "ibattr/tensor.hpp"

namespace ibattr {

// Per-image bottleneck: a learned mask M blends the attribution-layer
// features with Gaussian noise matched to the feature statistics,
//     x~ = x (.) M + (1 - M) (.) eta,     eta ~ N(mu, sigma^2).
// The objective trades the information still flowing through the layer
// against keeping the model's own prediction:
//     loss = mean_capacity_nats + beta * mean_K cross_entropy(tail(x~), target).
struct BottleneckConfig {
    double beta = 10.0;
    int steps = 10;
    double learning_rate = 1.0;
    int noise_samples = 10;        // K reparametrized draws per step
    double alpha_init = 5.0;       // M = sigmoid(alpha) starts near 1
    double smooth_sigma = 1.0;     // feature-map pixels; 0 disables smoothing
    double one_minus_m_floor = 1e-6;
    std::uint64_t seed = 0;
    bool readout_mask = false;     // heatmap from M rather than capacity

    void validate() const {
        if (beta < 0 || steps < 0 || noise_samples < 1 || smooth_sigma < 0 ||
            one_minus_m_floor <= 0 || one_minus_m_floor >= 1)
            throw ConfigError("bottleneck config out of range");
    }
};

// Mask logits; M is derived per use as sigmoid(alpha), optionally smoothed,
// then clamped so (1 - M) >= one_minus_m_floor.
template <typename T>
struct MaskState {
    Tensor<T> alpha;
};

template <typename T>
MaskState<T> make_mask_state(const Shape& feature_shape, const BottleneckConfig& cfg) {
    MaskState<T> ms;
    ms.alpha = Tensor<T>(feature_shape, static_cast<T>(cfg.alpha_init), true);
    return ms;
}

template <typename T>
Tensor<T> derive_mask(const MaskState<T>& ms, const BottleneckConfig& cfg,
                      Tape<T>* tape = nullptr) {
    auto m = sigmoid(ms.alpha, tape);
    if (cfg.smooth_sigma > 0) m = gaussian_blur2d(m, cfg.smooth_sigma, tape);
    return clamp_max(m, static_cast<T>(1.0 - cfg.one_minus_m_floor), tape);
}

// Per-element information capacity at feature resolution (nats), plus its
// channel-summed spatial readout in bits.
template <typename T>
struct CapacityMap {
    Tensor<T> per_element_nats;        // attribution-layer shape
    std::vector<double> reduced_bits;  // HxW spatial grid, channel-summed / ln 2
    int h = 0, w = 0;
};

// KL divergence between the noise-blended conditional and the feature
// marginal surrogate, both Gaussian. In standardized coordinates
// z = (x - mu) / sigma the conditional is N(m z, (1-m)^2) and the surrogate
// is N(0, 1), so
//     KL = -ln(1-m) + ((1-m)^2 + m^2 z^2 - 1) / 2,
// with (1-m) clamped to >= floor. Zero at m = 0, monotone nondecreasing in m.
inline double capacity_kl_std(double m, double z, double floor_ = 1e-6) {
    const double c = std::max(1.0 - m, floor_);
    return -std::log(c) + (c * c + m * m * z * z - 1.0) / 2.0;
}

inline double capacity_kl(double m, double x, double mu, double sigma, double sigma_floor = 1e-5,
                          double floor_ = 1e-6) {
    if (sigma < sigma_floor) throw ContractError("capacity_kl: sigma below floor");
    if (m < 0.0 || m > 1.0) throw ContractError("capacity_kl: mask value out of [0,1]");
    return capacity_kl_std(m, (x - mu) / sigma, floor_);
}

// Elementwise capacity with gradient in the mask:
//     dKL/dm = m/(1-m) + m + m z^2   (>= 0 on [0, 1-floor]).
template <typename T>
Tensor<T> capacity_kl_map(const Tensor<T>& m, const Tensor<T>& z, T floor_,
                          Tape<T>* tape = nullptr) {
    if (m.shape() != z.shape()) throw ContractError("capacity_kl_map: shape mismatch");
    Tensor<T> out(m.shape());
    const std::size_t n = m.size();
    for (std::size_t i = 0; i < n; ++i) {
        const T c = std::max(T(1) - m[i], floor_);
        out[i] = -std::log(c) + (c * c + m[i] * m[i] * z[i] * z[i] - T(1)) / T(2);
    }
    if (tape && m.requires_grad()) {
        auto md = m.data_handle(), zd = z.data_handle();
        out.set_requires_grad(true);
        tape->record(out, [n, floor_, md, zd, mg = m.grad_handle(), og = out.grad_handle()]() {
            for (std::size_t i = 0; i < n; ++i) {
                const T mv = (*md)[i];
                const T c = std::max(T(1) - mv, floor_);
                const T zv = (*zd)[i];
                (*mg)[i] += (*og)[i] * (mv / c + mv + mv * zv * zv);
            }
        });
    }
    return out;
}

// x~ = x (.) m + (1-m) (.) eta, all three with the attribution-layer shape.
template <typename T>
Tensor<T> inject_noise(const Tensor<T>& x, const Tensor<T>& m, const Tensor<T>& eta,
                       Tape<T>* tape = nullptr) {
    if (x.shape() != m.shape() || x.shape() != eta.shape())
        throw ContractError("inject_noise: x, mask and noise must share one shape");
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i)
        if (m[i] < T(0) || m[i] > T(1))
            throw ContractError("inject_noise: mask value outside [0,1]");
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * m[i] + (T(1) - m[i]) * eta[i];
    if (tape && detail::any_tracked<T>({&x, &m, &eta})) {
        auto xd = x.data_handle(), md = m.data_handle(), ed = eta.data_handle();
        auto xg = x.grad_handle(), mg = m.grad_handle(), eg = eta.grad_handle();
        out.set_requires_grad(true);
        tape->record(out, [=, og = out.grad_handle()]() {
            for (std::size_t i = 0; i < n; ++i) {
                const T g = (*og)[i];
                if (mg) (*mg)[i] += g * ((*xd)[i] - (*ed)[i]);
                if (xg) (*xg)[i] += g * (*md)[i];
                if (eg) (*eg)[i] += g * (T(1) - (*md)[i]);
            }
        });
    }
    return out;
}

// One draw eta ~ N(mu, sigma^2), elementwise, from the given stream.
template <typename T>
Tensor<T> sample_noise(const FeatureStats<T>& stats, SplitMix64& rng) {
    Tensor<T> eta(stats.mu.shape());
    for (std::size_t i = 0; i < eta.size(); ++i)
        eta[i] = stats.mu[i] + stats.sigma[i] * static_cast<T>(rng.normal());
    return eta;
}

// Standardized features z = (x - mu) / sigma; constant w.r.t. the mask.
template <typename T>
Tensor<T> standardize(const Tensor<T>& x, const FeatureStats<T>& stats) {
    if (x.shape() != stats.mu.shape()) throw ContractError("standardize: shape mismatch");
    Tensor<T> z(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = (x[i] - stats.mu[i]) / stats.sigma[i];
    return z;
}

// Full bottleneck objective for one image; differentiable in the mask logits.
// The capacity term is the mean per-element KL; the prediction term is the
// cross-entropy of the tail on noise-injected features, averaged over
// noise_samples reparametrized draws and weighted by beta.
template <typename T>
Tensor<T> iba_objective(const Model<T>& model, const Tensor<T>& features,
                        const MaskState<T>& mask_state, const FeatureStats<T>& stats,
                        int target_class, const BottleneckConfig& cfg, SplitMix64& rng,
                        Tape<T>& tape) {
    cfg.validate();
    if (features.shape() != model.feature_shape())
        throw ContractError("iba_objective: features do not match the attribution layer");
    auto m = derive_mask(mask_state, cfg, &tape);
    auto z = standardize(features, stats);
    auto capacity = mean_all(capacity_kl_map(m, z, static_cast<T>(cfg.one_minus_m_floor), &tape),
                             &tape);

    Tensor<T> ce_sum;
    for (int k = 0; k < cfg.noise_samples; ++k) {
        auto eta = sample_noise(stats, rng);
        auto injected = inject_noise(features, m, eta, &tape);
        auto logits = tail_logits(model, injected, &tape);
        auto ce = softmax_cross_entropy(logits, target_class, &tape);
        ce_sum = k == 0 ? ce : add(ce_sum, ce, &tape);
    }
    auto pred_term = scale(ce_sum, static_cast<T>(cfg.beta / cfg.noise_samples), &tape);
    return add(capacity, pred_term, &tape);
}

template <typename T>
struct MaskOptimization {
    MaskState<T> mask;
    CapacityMap<T> capacity;
    std::vector<double> loss_trace;  // steps+1 entries; last is post-update
    int target_class = 0;
    double p_target_unmasked = 0.0;  // model confidence on the raw image
};

template <typename T>
CapacityMap<T> capacity_at(const Tensor<T>& features, const MaskState<T>& mask_state,
                           const FeatureStats<T>& stats, const BottleneckConfig& cfg) {
    auto m = derive_mask(mask_state, cfg);
    auto z = standardize(features, stats);
    CapacityMap<T> cap;
    cap.per_element_nats = capacity_kl_map(m, z, static_cast<T>(cfg.one_minus_m_floor));
    const Shape& fs = features.shape();
    cap.h = fs[1];
    cap.w = fs[2];
    cap.reduced_bits.assign(static_cast<std::size_t>(cap.h) * cap.w, 0.0);
    const std::size_t plane = static_cast<std::size_t>(cap.h) * cap.w;
    for (int c = 0; c < fs[0]; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            cap.reduced_bits[i] += static_cast<double>(cap.per_element_nats[c * plane + i]);
    for (auto& v : cap.reduced_bits) v /= 0.6931471805599453;  // nats -> bits
    return cap;
}

// Adam on the mask logits for cfg.steps iterations. The explanation targets
// the model's own argmax on the unmasked image. Deterministic per cfg.seed.
template <typename T>
MaskOptimization<T> optimize_mask(const Model<T>& model, const Tensor<T>& image,
                                  const FeatureStats<T>& stats, const BottleneckConfig& cfg) {
    cfg.validate();
    auto features = forward_capture(model, image);
    auto probs = forward_tail(model, features);
    MaskOptimization<T> result;
    result.target_class = probs[1] > probs[0] ? 1 : 0;
    result.p_target_unmasked =
        static_cast<double>(probs[static_cast<std::size_t>(result.target_class)]);

    result.mask = make_mask_state<T>(model.feature_shape(), cfg);
    SplitMix64 rng = SplitMix64::child(cfg.seed, "iba-noise");
    AdamState<T> opt;
    std::vector<Tensor<T>> params{result.mask.alpha};
    Tape<T> tape;
    for (int step = 0; step < cfg.steps; ++step) {
        tape.reset();
        result.mask.alpha.zero_grad();
        auto loss = iba_objective(model, features, result.mask, stats, result.target_class,
                                  cfg, rng, tape);
        result.loss_trace.push_back(static_cast<double>(loss.item()));
        tape.backward(loss);
        adam_step(params, opt, static_cast<T>(cfg.learning_rate));
    }
    {   // final objective value at the optimized mask, fresh draws
        tape.reset();
        auto loss = iba_objective(model, features, result.mask, stats, result.target_class,
                                  cfg, rng, tape);
        result.loss_trace.push_back(static_cast<double>(loss.item()));
        tape.reset();
    }
    result.capacity = capacity_at(features, result.mask, stats, cfg);
    return result;
}

// Channel-summed capacity in bits, bilinearly upsampled to input resolution,
// optionally restricted to an ROI mask.
template <typename T>
Heatmap capacity_heatmap(const CapacityMap<T>& cap, const BinaryMask* roi = nullptr) {
    for (const double v : cap.reduced_bits)
        if (v < 0.0) throw ContractError("capacity_heatmap: negative capacity");
    Heatmap hm;
    hm.method = "iba";
    hm.values = bilinear_resize(cap.reduced_bits, cap.h, cap.w, hm.h, hm.w);
    for (auto& v : hm.values) v = std::max(0.0, v);
    if (roi) apply_roi(hm, *roi);
    return hm;
}

// Literal mask readout (channel mean of M), for the readout_mask variant.
template <typename T>
Heatmap mask_heatmap(const MaskState<T>& mask_state, const BottleneckConfig& cfg,
                     const BinaryMask* roi = nullptr) {
    auto m = derive_mask(mask_state, cfg);
    const Shape& s = m.shape();
    const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
    std::vector<double> mean(plane, 0.0);
    for (int c = 0; c < s[0]; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            mean[i] += static_cast<double>(m[c * plane + i]);
    for (auto& v : mean) v /= s[0];
    Heatmap hm;
    hm.method = "iba";
    hm.values = bilinear_resize(mean, s[1], s[2], hm.h, hm.w);
    if (roi) apply_roi(hm, *roi);
    return hm;
}

}  // namespace ibattr
