#pragma once

#include <dnas/ops.hpp>

#include <cmath>
#include <stdexcept>

namespace dnas {

/// Bit-width value meaning "not quantized".
inline constexpr int kFullPrecisionBits = 32;

/// Lower bound applied to the PACT clipping level before use.
inline constexpr double kAlphaFloor = 1e-3;

inline void check_bits(int k) {
    if (!((k >= 1 && k <= 8) || k == kFullPrecisionBits)) {
        throw std::invalid_argument("bit-width must be in [1,8] or 32, got " + std::to_string(k));
    }
}

/// Nearest point of {i / (2^k - 1)} to x. Inputs outside [0,1] are clamped
/// first; exact midpoints go to the larger grid value. k = 32 returns x.
template <class T>
T quantize_grid(T x, int k) {
    check_bits(k);
    if (k == kFullPrecisionBits) return x;
    x = std::clamp(x, T{0}, T{1});
    const T levels = static_cast<T>((1 << k) - 1);
    return std::floor(x * levels + T(0.5)) / levels;
}

/// Tensor form of quantize_grid with the straight-through backward rule:
/// dL/dx = dL/dy on [0,1], zero where the input was clamped.
template <class T>
Tensor<T> quantize_grid(const Tensor<T>& x, int k) {
    check_bits(k);
    if (k == kFullPrecisionBits) return x;
    return custom_gradient<T>(
        [k](const std::vector<Tensor<T>>& in) {
            std::vector<T> out(in[0].numel());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = quantize_grid(in[0][i], k);
            return out;
        },
        [](const std::vector<Tensor<T>>& in, const Tensor<T>&, std::span<const T> g) {
            std::vector<T> gx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T v = in[0][i];
                gx[i] = (v >= T{0} && v <= T{1}) ? g[i] : T{0};
            }
            return std::vector<std::vector<T>>{std::move(gx)};
        },
        {x}, x.shape(), "quantize_grid");
}

/// DoReFa weight quantization, signed form:
///   t = tanh(w) / (2 max|tanh(w)|) + 0.5,   w_k = 2 Q_k(t) - 1.
/// max|tanh(w)| is treated as a constant for the gradient. An all-zero
/// tensor maps to all zeros. k = 32 returns w itself.
template <class T>
Tensor<T> dorefa_quantize(const Tensor<T>& w, int k) {
    check_bits(k);
    if (k == kFullPrecisionBits) return w;
    T peak{0};
    for (T v : w.data()) peak = std::max(peak, std::abs(std::tanh(v)));
    if (peak == T{0}) return Tensor<T>(w.shape(), T{0});
    const auto t = add_scalar(scale(tanh(w), T{1} / (T{2} * peak)), T(0.5));
    return add_scalar(scale(quantize_grid(t, k), T{2}), T{-1});
}

/// PACT clipping to [0, alpha] followed by k-bit quantization on alpha's scale.
/// Backward: dy/dx = 1 on (0, alpha); dy/dalpha = 1 where x >= alpha, summed
/// over elements. Q_k is straight-through for both.
template <class T>
Tensor<T> pact_activation(const Tensor<T>& x, const Tensor<T>& alpha, int k) {
    check_bits(k);
    if (alpha.numel() != 1) throw ShapeError("pact_activation: alpha must be a scalar tensor");
    const T a = std::max(alpha[0], static_cast<T>(kAlphaFloor));
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T y = std::clamp(x[i], T{0}, a);
        out[i] = k == kFullPrecisionBits ? y : quantize_grid(y / a, k) * a;
    }
    auto xn = x.node(), an = alpha.node();
    return detail::make_result<T>(x.shape(), std::move(out), "pact", {&x, &alpha}, [xn, an, a](Node<T>& self) {
        const auto& g = self.grad;
        if (xn->requires_grad) {
            auto& gx = xn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T v = xn->data[i];
                if (v > T{0} && v < a) gx[i] += g[i];
            }
        }
        if (an->requires_grad) {
            T s{0};
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (xn->data[i] >= a) s += g[i];
            }
            an->ensure_grad()[0] += s;
        }
    });
}

} // namespace dnas
