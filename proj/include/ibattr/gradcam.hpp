#pragma once

#include <cmath>

#include "ibattr/common.hpp"
#include "ibattr/heatmap.hpp"
#include "ibattr/model.hpp"
#include "ibattr/tensor.hpp"

namespace ibattr {

// Grad-CAM at the attribution layer, matching the IBA readout resolution.
// Channel weights are the spatial means of d logit[target] / d features (the
// pre-softmax logit; saturating softmax gradients would wash the map out),
// the map is relu(sum_c w_c A_c), upsampled and max-normalized to [0,1].
// `forced_target` < 0 targets the model's own argmax.
template <typename T>
Heatmap gradcam_heatmap(const Model<T>& model, const Tensor<T>& image,
                        const BinaryMask* roi = nullptr, int forced_target = -1) {
    auto features = forward_capture(model, image);
    features.set_requires_grad(true);

    Tape<T> tape;
    auto logits = tail_logits(model, features, &tape);
    int target = forced_target;
    if (target < 0) {
        const auto probs = softmax_values(logits.data(), logits.dim(0));
        target = probs[1] > probs[0] ? 1 : 0;
    }
    auto picked = select(logits, target, &tape);
    tape.backward(picked);

    const Shape& fs = features.shape();
    const int channels = fs[0], fh = fs[1], fw = fs[2];
    const std::size_t plane = static_cast<std::size_t>(fh) * fw;
    const T* grad = features.grad();
    const T* act = features.data();

    std::vector<double> map(plane, 0.0);
    for (int c = 0; c < channels; ++c) {
        double wsum = 0.0;
        for (std::size_t i = 0; i < plane; ++i) wsum += static_cast<double>(grad[c * plane + i]);
        const double wc = wsum / static_cast<double>(plane);
        for (std::size_t i = 0; i < plane; ++i)
            map[i] += wc * static_cast<double>(act[c * plane + i]);
    }
    for (auto& v : map) v = std::max(0.0, v);

    Heatmap hm;
    hm.method = "gradcam";
    hm.values = bilinear_resize(map, fh, fw, hm.h, hm.w);
    normalize_by_max(hm.values);
    if (roi) apply_roi(hm, *roi);
    return hm;
}

}  // namespace ibattr
