#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ibattr/common.hpp"

namespace ibattr {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (const int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major n-d array. Copies alias the underlying storage (and the
// gradient buffer when present), so a Tensor behaves like a cheap handle.
// The gradient buffer, when allocated, always matches the data shape.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : shape_(std::move(shape)) {
        for (const int d : shape_)
            if (d <= 0) throw ContractError("tensor dimensions must be positive");
        data_ = std::make_shared<std::vector<T>>(shape_numel(shape_), fill);
        if (requires_grad) set_requires_grad(true);
    }

    static Tensor from(std::vector<T> values, Shape shape, bool requires_grad = false) {
        if (values.size() != shape_numel(shape))
            throw ContractError("tensor data length does not match shape " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<T>>(std::move(values));
        if (requires_grad) t.set_requires_grad(true);
        return t;
    }

    static Tensor scalar(T value) { return from({value}, Shape{1}); }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_ ? data_->size() : 0; }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }
    T& operator[](std::size_t i) { return (*data_)[i]; }
    const T& operator[](std::size_t i) const { return (*data_)[i]; }

    bool requires_grad() const { return grad_ != nullptr; }
    void set_requires_grad(bool on) {
        if (on && !grad_) grad_ = std::make_shared<std::vector<T>>(size(), T(0));
        if (!on) grad_.reset();
    }
    T* grad() { return grad_ ? grad_->data() : nullptr; }
    const T* grad() const { return grad_ ? grad_->data() : nullptr; }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
    }

    T item() const {
        if (size() != 1) throw ContractError("item() requires a scalar tensor");
        return (*data_)[0];
    }

    // Deep copy of data only (fresh storage, no grad buffer).
    Tensor clone_data() const { return from(*data_, shape_); }

    // Shared buffer handles; used by tape closures and serialization.
    const std::shared_ptr<std::vector<T>>& data_handle() const { return data_; }
    const std::shared_ptr<std::vector<T>>& grad_handle() const { return grad_; }

private:
    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
    std::shared_ptr<std::vector<T>> grad_;
};

// Ordered record of executed operations. backward() replays the record
// exactly once, in reverse execution order. Gradients of tensors produced on
// the tape are re-seeded on every backward() call, so gradients of leaf
// tensors (parameters) accumulate across repeated calls until zeroed.
template <typename T>
class Tape {
public:
    void record(Tensor<T>& out, std::function<void()> back) {
        out.set_requires_grad(true);
        produced_.insert(static_cast<const void*>(out.data_handle().get()));
        out_grads_.push_back(out.grad_handle());
        backs_.push_back(std::move(back));
    }

    bool produced(const Tensor<T>& t) const {
        return t.defined() &&
               produced_.count(static_cast<const void*>(t.data_handle().get())) > 0;
    }

    void backward(Tensor<T>& loss) {
        if (loss.size() != 1) throw ContractError("backward: loss must be a scalar");
        if (!produced(loss)) throw ContractError("backward: loss was not produced on this tape");
        for (auto& g : out_grads_) std::fill(g->begin(), g->end(), T(0));
        loss.grad()[0] = T(1);
        for (auto it = backs_.rbegin(); it != backs_.rend(); ++it) (*it)();
    }

    void reset() {
        backs_.clear();
        out_grads_.clear();
        produced_.clear();
    }

    std::size_t op_count() const { return backs_.size(); }

private:
    std::vector<std::function<void()>> backs_;
    std::vector<std::shared_ptr<std::vector<T>>> out_grads_;
    std::unordered_set<const void*> produced_;
};

namespace detail {

template <typename T>
bool any_tracked(const std::initializer_list<const Tensor<T>*> ins) {
    for (const auto* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

// dst[r][c] += wgt * src[r+dr][c+dc] over the in-bounds range of one HxW plane.
template <typename T>
inline void shift_accumulate(T* dst, const T* src, T wgt, int h, int w, int dr, int dc) {
    const int r0 = std::max(0, -dr), r1 = std::min(h, h - dr);
    const int c0 = std::max(0, -dc), c1 = std::min(w, w - dc);
    for (int r = r0; r < r1; ++r) {
        T* drow = dst + static_cast<std::size_t>(r) * w;
        const T* srow = src + static_cast<std::size_t>(r + dr) * w + dc;
        for (int c = c0; c < c1; ++c) drow[c] += wgt * srow[c];
    }
}

// sum over (r,c) of a[r][c] * b[r+dr][c+dc], in-bounds range only.
template <typename T>
inline T shift_dot(const T* a, const T* b, int h, int w, int dr, int dc) {
    const int r0 = std::max(0, -dr), r1 = std::min(h, h - dr);
    const int c0 = std::max(0, -dc), c1 = std::min(w, w - dc);
    T acc = T(0);
    for (int r = r0; r < r1; ++r) {
        const T* arow = a + static_cast<std::size_t>(r) * w;
        const T* brow = b + static_cast<std::size_t>(r + dr) * w + dc;
        for (int c = c0; c < c1; ++c) acc += arow[c] * brow[c];
    }
    return acc;
}

}  // namespace detail

// --- forward ops with reverse-mode gradients -------------------------------
//
// Every op takes an optional tape; with a null tape (or only untracked
// inputs) it is a plain forward computation. Gradient buffers of tracked
// inputs receive accumulated (+=) contributions during tape replay.

// 3x3 cross-correlation, zero padding 1, stride 1; output spatial size equals
// input spatial size. kernels are [C_out, C_in, 3, 3], bias is [C_out].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 Tape<T>* tape = nullptr) {
    if (input.ndim() != 3) throw ContractError("conv2d: input must be [C,H,W]");
    if (kernels.ndim() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3)
        throw ContractError("conv2d: kernels must be [C_out,C_in,3,3]");
    const int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int cout = kernels.dim(0);
    if (kernels.dim(1) != cin)
        throw ContractError("conv2d: kernel C_in " + std::to_string(kernels.dim(1)) +
                            " does not match input channels " + std::to_string(cin));
    if (bias.ndim() != 1 || bias.dim(0) != cout)
        throw ContractError("conv2d: bias must be [C_out]");

    Tensor<T> out(Shape{cout, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const T* in = input.data();
    const T* k = kernels.data();
    const T* b = bias.data();
    T* o = out.data();
    for (int co = 0; co < cout; ++co) {
        T* oplane = o + co * plane;
        std::fill(oplane, oplane + plane, b[co]);
        for (int ci = 0; ci < cin; ++ci) {
            const T* iplane = in + ci * plane;
            const T* kw = k + (static_cast<std::size_t>(co) * cin + ci) * 9;
            for (int t = 0; t < 9; ++t)
                detail::shift_accumulate(oplane, iplane, kw[t], h, w, t / 3 - 1, t % 3 - 1);
        }
    }

    if (tape && detail::any_tracked<T>({&input, &kernels, &bias})) {
        auto ind = input.data_handle(), kd = kernels.data_handle();
        auto ig = input.grad_handle(), kg = kernels.grad_handle(), bg = bias.grad_handle();
        out.set_requires_grad(true);
        tape->record(out, [=, og = out.grad_handle()]() {
            const T* go = og->data();
            for (int co = 0; co < cout; ++co) {
                const T* goplane = go + co * plane;
                if (bg) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < plane; ++i) acc += goplane[i];
                    (*bg)[static_cast<std::size_t>(co)] += acc;
                }
                for (int ci = 0; ci < cin; ++ci) {
                    const std::size_t koff = (static_cast<std::size_t>(co) * cin + ci) * 9;
                    if (ig) {
                        T* giplane = ig->data() + ci * plane;
                        const T* kw = kd->data() + koff;
                        for (int t = 0; t < 9; ++t)
                            detail::shift_accumulate(giplane, goplane, kw[t], h, w,
                                                     -(t / 3 - 1), -(t % 3 - 1));
                    }
                    if (kg) {
                        const T* iplane = ind->data() + ci * plane;
                        for (int t = 0; t < 9; ++t)
                            (*kg)[koff + t] += detail::shift_dot(goplane, iplane, h, w,
                                                                 t / 3 - 1, t % 3 - 1);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    Tensor<T> out(x.shape());
    const T* xd = x.data();
    T* o = out.data();
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) o[i] = xd[i] > T(0) ? xd[i] : T(0);
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [n, xd_ = x.data_handle(), xg = x.grad_handle(),
                           og = out.grad_handle()]() {
            for (std::size_t i = 0; i < n; ++i)
                if ((*xd_)[i] > T(0)) (*xg)[i] += (*og)[i];
        });
    }
    return out;
}

// 2x2 max pooling, stride 2; spatial dims must be even. On ties the gradient
// routes entirely to the first-scanned arg max of the window.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    if (x.ndim() != 3) throw ContractError("maxpool2d: input must be [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 != 0 || w % 2 != 0)
        throw ContractError("maxpool2d: spatial dims must be even, got " + shape_str(x.shape()));
    const int oh = h / 2, ow = w / 2;
    Tensor<T> out(Shape{c, oh, ow});
    std::vector<std::size_t> argmax(out.size());
    const T* xd = x.data();
    T* o = out.data();
    std::size_t oi = 0;
    for (int ch = 0; ch < c; ++ch) {
        const T* plane = xd + static_cast<std::size_t>(ch) * h * w;
        for (int r = 0; r < oh; ++r) {
            for (int cc = 0; cc < ow; ++cc, ++oi) {
                T best = T(0);
                std::size_t besti = 0;
                bool first = true;
                for (int dr = 0; dr < 2; ++dr) {
                    for (int dc = 0; dc < 2; ++dc) {
                        const std::size_t idx =
                            static_cast<std::size_t>(2 * r + dr) * w + (2 * cc + dc);
                        if (first || plane[idx] > best) {  // strict: first wins ties
                            best = plane[idx];
                            besti = idx;
                            first = false;
                        }
                    }
                }
                o[oi] = best;
                argmax[oi] = static_cast<std::size_t>(ch) * h * w + besti;
            }
        }
    }
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [am = std::move(argmax), xg = x.grad_handle(),
                           og = out.grad_handle()]() {
            for (std::size_t i = 0; i < am.size(); ++i) (*xg)[am[i]] += (*og)[i];
        });
    }
    return out;
}

// W.x + b for W [m,n], x [n], b [m].
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias,
                Tape<T>* tape = nullptr) {
    if (x.ndim() != 1 || weights.ndim() != 2 || bias.ndim() != 1)
        throw ContractError("dense: expects x [n], W [m,n], b [m]");
    const int n = x.dim(0), m = weights.dim(0);
    if (weights.dim(1) != n || bias.dim(0) != m)
        throw ContractError("dense: shape mismatch W" + shape_str(weights.shape()) + " x" +
                            shape_str(x.shape()) + " b" + shape_str(bias.shape()));
    Tensor<T> out(Shape{m});
    const T* xd = x.data();
    const T* wd = weights.data();
    T* o = out.data();
    for (int r = 0; r < m; ++r) {
        T acc = bias[static_cast<std::size_t>(r)];
        const T* row = wd + static_cast<std::size_t>(r) * n;
        for (int cidx = 0; cidx < n; ++cidx) acc += row[cidx] * xd[cidx];
        o[static_cast<std::size_t>(r)] = acc;
    }
    if (tape && detail::any_tracked<T>({&x, &weights, &bias})) {
        auto xdh = x.data_handle(), wdh = weights.data_handle();
        auto xg = x.grad_handle(), wg = weights.grad_handle(), bg = bias.grad_handle();
        out.set_requires_grad(true);
        tape->record(out, [=, og = out.grad_handle()]() {
            const T* go = og->data();
            for (int r = 0; r < m; ++r) {
                const T g = go[static_cast<std::size_t>(r)];
                if (bg) (*bg)[static_cast<std::size_t>(r)] += g;
                const std::size_t off = static_cast<std::size_t>(r) * n;
                for (int cidx = 0; cidx < n; ++cidx) {
                    if (xg) (*xg)[static_cast<std::size_t>(cidx)] += g * (*wdh)[off + cidx];
                    if (wg) (*wg)[off + cidx] += g * (*xdh)[static_cast<std::size_t>(cidx)];
                }
            }
        });
    }
    return out;
}

// [C,H,W] -> [C], mean over the spatial plane.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    if (x.ndim() != 3) throw ContractError("global_avg_pool: input must be [C,H,W]");
    const int c = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    Tensor<T> out(Shape{c});
    const T* xd = x.data();
    for (int ch = 0; ch < c; ++ch) {
        T acc = T(0);
        const T* p = xd + static_cast<std::size_t>(ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        out[static_cast<std::size_t>(ch)] = acc / static_cast<T>(plane);
    }
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [c, plane, xg = x.grad_handle(), og = out.grad_handle()]() {
            for (int ch = 0; ch < c; ++ch) {
                const T g = (*og)[static_cast<std::size_t>(ch)] / static_cast<T>(plane);
                T* p = xg->data() + static_cast<std::size_t>(ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) p[i] += g;
            }
        });
    }
    return out;
}

// Numerically stable softmax probabilities (max-subtraction).
template <typename T>
std::vector<T> softmax_values(const T* logits, int k) {
    T mx = logits[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, logits[i]);
    std::vector<T> p(static_cast<std::size_t>(k));
    T sum = T(0);
    for (int i = 0; i < k; ++i) {
        p[static_cast<std::size_t>(i)] = std::exp(logits[i] - mx);
        sum += p[static_cast<std::size_t>(i)];
    }
    for (auto& v : p) v /= sum;
    return p;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, Tape<T>* tape = nullptr) {
    if (logits.ndim() != 1) throw ContractError("softmax: expects a vector");
    const int k = logits.dim(0);
    auto p = softmax_values(logits.data(), k);
    Tensor<T> out = Tensor<T>::from(p, Shape{k});
    if (tape && logits.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [k, p = std::move(p), lg = logits.grad_handle(),
                           og = out.grad_handle()]() {
            // g_in = (diag(p) - p p^T) g_out
            T dot = T(0);
            for (int i = 0; i < k; ++i)
                dot += p[static_cast<std::size_t>(i)] * (*og)[static_cast<std::size_t>(i)];
            for (int i = 0; i < k; ++i)
                (*lg)[static_cast<std::size_t>(i)] +=
                    p[static_cast<std::size_t>(i)] * ((*og)[static_cast<std::size_t>(i)] - dot);
        });
    }
    return out;
}

// -log softmax(logits)[label], max-subtraction stabilized. Scalar output.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, int label, Tape<T>* tape = nullptr) {
    if (logits.ndim() != 1 || logits.dim(0) < 2)
        throw ContractError("softmax_cross_entropy: logits must be a vector of length >= 2");
    const int k = logits.dim(0);
    if (label < 0 || label >= k)
        throw ContractError("softmax_cross_entropy: label " + std::to_string(label) +
                            " out of range for k=" + std::to_string(k));
    const T* ld = logits.data();
    T mx = ld[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, ld[i]);
    T sum = T(0);
    for (int i = 0; i < k; ++i) sum += std::exp(ld[i] - mx);
    const T loss = std::log(sum) - (ld[label] - mx);
    Tensor<T> out = Tensor<T>::scalar(loss);
    if (tape && logits.requires_grad()) {
        auto p = softmax_values(ld, k);
        out.set_requires_grad(true);
        tape->record(out, [k, label, p = std::move(p), lg = logits.grad_handle(),
                           og = out.grad_handle()]() {
            const T g = (*og)[0];
            for (int i = 0; i < k; ++i) {
                T d = p[static_cast<std::size_t>(i)];
                if (i == label) d -= T(1);
                (*lg)[static_cast<std::size_t>(i)] += g * d;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (a.shape() != b.shape()) throw ContractError("add: shape mismatch");
    Tensor<T> out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
    if (tape && detail::any_tracked<T>({&a, &b})) {
        out.set_requires_grad(true);
        tape->record(out, [n, ag = a.grad_handle(), bg = b.grad_handle(),
                           og = out.grad_handle()]() {
            for (std::size_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*og)[i];
                if (bg) (*bg)[i] += (*og)[i];
            }
        });
    }
    return out;
}

// Elementwise (Hadamard) product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (a.shape() != b.shape()) throw ContractError("mul: shape mismatch");
    Tensor<T> out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    if (tape && detail::any_tracked<T>({&a, &b})) {
        auto ad = a.data_handle(), bd = b.data_handle();
        out.set_requires_grad(true);
        tape->record(out, [n, ad, bd, ag = a.grad_handle(), bg = b.grad_handle(),
                           og = out.grad_handle()]() {
            for (std::size_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*og)[i] * (*bd)[i];
                if (bg) (*bg)[i] += (*og)[i] * (*ad)[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor, Tape<T>* tape = nullptr) {
    Tensor<T> out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * factor;
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [n, factor, ag = a.grad_handle(), og = out.grad_handle()]() {
            for (std::size_t i = 0; i < n; ++i) (*ag)[i] += (*og)[i] * factor;
        });
    }
    return out;
}

// constant - a, elementwise.
template <typename T>
Tensor<T> rsub_const(T constant, const Tensor<T>& a, Tape<T>* tape = nullptr) {
    Tensor<T> out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = constant - a[i];
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [n, ag = a.grad_handle(), og = out.grad_handle()]() {
            for (std::size_t i = 0; i < n; ++i) (*ag)[i] -= (*og)[i];
        });
    }
    return out;
}

// min(a, bound); gradient passes only where a < bound.
template <typename T>
Tensor<T> clamp_max(const Tensor<T>& a, T bound, Tape<T>* tape = nullptr) {
    Tensor<T> out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] < bound ? a[i] : bound;
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [n, bound, ad = a.data_handle(), ag = a.grad_handle(),
                           og = out.grad_handle()]() {
            for (std::size_t i = 0; i < n; ++i)
                if ((*ad)[i] < bound) (*ag)[i] += (*og)[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a, Tape<T>* tape = nullptr) {
    Tensor<T> out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = a[i];
        out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                           : std::exp(x) / (T(1) + std::exp(x));
    }
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [n, od = out.data_handle(), ag = a.grad_handle(),
                           og = out.grad_handle()]() {
            for (std::size_t i = 0; i < n; ++i) {
                const T s = (*od)[i];
                (*ag)[i] += (*og)[i] * s * (T(1) - s);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a, Tape<T>* tape = nullptr) {
    T acc = T(0);
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [n, ag = a.grad_handle(), og = out.grad_handle()]() {
            const T g = (*og)[0];
            for (std::size_t i = 0; i < n; ++i) (*ag)[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a, Tape<T>* tape = nullptr) {
    const std::size_t n = a.size();
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
    if (tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [n, ag = a.grad_handle(), og = out.grad_handle()]() {
            const T g = (*og)[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) (*ag)[i] += g;
        });
    }
    return out;
}

// out = vec[index], as a scalar tensor.
template <typename T>
Tensor<T> select(const Tensor<T>& vec, int index, Tape<T>* tape = nullptr) {
    if (vec.ndim() != 1) throw ContractError("select: expects a vector");
    if (index < 0 || index >= vec.dim(0)) throw ContractError("select: index out of range");
    Tensor<T> out = Tensor<T>::scalar(vec[static_cast<std::size_t>(index)]);
    if (tape && vec.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [index, vg = vec.grad_handle(), og = out.grad_handle()]() {
            (*vg)[static_cast<std::size_t>(index)] += (*og)[0];
        });
    }
    return out;
}

// Per-channel isotropic Gaussian blur on [C,H,W], truncated at radius
// ceil(3*sigma); weights are renormalized over the in-bounds support so the
// blur of a constant map is that constant everywhere, borders included.
template <typename T>
Tensor<T> gaussian_blur2d(const Tensor<T>& x, double sigma, Tape<T>* tape = nullptr) {
    if (x.ndim() != 3) throw ContractError("gaussian_blur2d: input must be [C,H,W]");
    if (sigma <= 0.0) throw ContractError("gaussian_blur2d: sigma must be positive");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    const int kw = 2 * radius + 1;
    std::vector<T> kern(static_cast<std::size_t>(kw) * kw);
    for (int dr = -radius; dr <= radius; ++dr)
        for (int dc = -radius; dc <= radius; ++dc)
            kern[static_cast<std::size_t>(dr + radius) * kw + (dc + radius)] =
                static_cast<T>(std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma)));

    const std::size_t plane = static_cast<std::size_t>(h) * w;
    // Per-pixel normalizers depend only on (h, w, radius), not the channel.
    std::vector<T> norm(plane);
    for (int r = 0; r < h; ++r) {
        for (int cc = 0; cc < w; ++cc) {
            T s = T(0);
            for (int dr = -radius; dr <= radius; ++dr) {
                if (r + dr < 0 || r + dr >= h) continue;
                for (int dc = -radius; dc <= radius; ++dc) {
                    if (cc + dc < 0 || cc + dc >= w) continue;
                    s += kern[static_cast<std::size_t>(dr + radius) * kw + (dc + radius)];
                }
            }
            norm[static_cast<std::size_t>(r) * w + cc] = s;
        }
    }

    Tensor<T> out(x.shape());
    const T* xd = x.data();
    T* o = out.data();
    for (int ch = 0; ch < c; ++ch) {
        const T* ip = xd + static_cast<std::size_t>(ch) * plane;
        T* op = o + static_cast<std::size_t>(ch) * plane;
        for (int r = 0; r < h; ++r) {
            for (int cc = 0; cc < w; ++cc) {
                T acc = T(0);
                for (int dr = -radius; dr <= radius; ++dr) {
                    if (r + dr < 0 || r + dr >= h) continue;
                    for (int dc = -radius; dc <= radius; ++dc) {
                        if (cc + dc < 0 || cc + dc >= w) continue;
                        acc += kern[static_cast<std::size_t>(dr + radius) * kw + (dc + radius)] *
                               ip[static_cast<std::size_t>(r + dr) * w + (cc + dc)];
                    }
                }
                const std::size_t pi = static_cast<std::size_t>(r) * w + cc;
                op[pi] = acc / norm[pi];
            }
        }
    }

    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [c, h, w, radius, kw, plane, kern = std::move(kern),
                           norm = std::move(norm), xg = x.grad_handle(),
                           og = out.grad_handle()]() {
            for (int ch = 0; ch < c; ++ch) {
                const T* gop = og->data() + static_cast<std::size_t>(ch) * plane;
                T* gip = xg->data() + static_cast<std::size_t>(ch) * plane;
                for (int r = 0; r < h; ++r) {
                    for (int cc = 0; cc < w; ++cc) {
                        const std::size_t pi = static_cast<std::size_t>(r) * w + cc;
                        const T g = gop[pi] / norm[pi];
                        for (int dr = -radius; dr <= radius; ++dr) {
                            if (r + dr < 0 || r + dr >= h) continue;
                            for (int dc = -radius; dc <= radius; ++dc) {
                                if (cc + dc < 0 || cc + dc >= w) continue;
                                gip[static_cast<std::size_t>(r + dr) * w + (cc + dc)] +=
                                    g * kern[static_cast<std::size_t>(dr + radius) * kw +
                                             (dc + radius)];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// --- Adam ------------------------------------------------------------------

template <typename T>
struct AdamState {
    long long step = 0;
    std::vector<std::vector<T>> m, v;  // first/second moment per parameter
};

// Standard Adam update with bias correction; gradients are read from each
// parameter's grad buffer. The step counter increments once per call.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, T lr, T beta1 = T(0.9),
               T beta2 = T(0.999), T eps = T(1e-8)) {
    if (state.m.empty() && state.v.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), T(0));
            state.v.emplace_back(p.size(), T(0));
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw ContractError("adam_step: state does not match parameter list");
    ++state.step;
    const T bc1 = T(1) - std::pow(beta1, static_cast<T>(state.step));
    const T bc2 = T(1) - std::pow(beta2, static_cast<T>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        if (!p.requires_grad()) throw ContractError("adam_step: parameter has no gradient");
        if (state.m[pi].size() != p.size())
            throw ContractError("adam_step: parameter shape changed under the optimizer");
        const T* g = p.grad();
        T* m = state.m[pi].data();
        T* v = state.v[pi].data();
        T* pd = p.data();
        const std::size_t n = p.size();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
            v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            pd[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

}  // namespace ibattr
