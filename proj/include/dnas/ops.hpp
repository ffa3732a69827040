#pragma once

#include <dnas/tensor.hpp>

#include <cmath>
#include <limits>
#include <optional>

namespace dnas {

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
    std::vector<T> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), op, {&x}, [xn, deriv](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(xn->data[i], self.data[i]);
    });
}

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T a = A[i * K + k];
            if (a == T{0}) continue;
            const T* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t k = 0; k < K; ++k) {
        const T* b = B + k * N;
        for (std::size_t i = 0; i < M; ++i) {
            const T a = A[k * M + i];
            if (a == T{0}) continue;
            T* c = C + i * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

struct ConvGeometry {
    std::size_t n, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
    std::size_t patch() const { return cin * kh * kw; }
    std::size_t pixels() const { return oh * ow; }
};

// col[(c*kh + i)*kw + j][oy*ow + ox]
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                T* row = col + ((c * g.kh + i) * g.kw + j) * g.pixels();
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                            ix < static_cast<std::ptrdiff_t>(g.w);
                        row[oy * g.ow + ox] = inside ? x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : T{0};
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                const T* row = col + ((c * g.kh + i) * g.kw + j) * g.pixels();
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(out), "add", {&a, &b}, [an, bn](Node<T>& self) {
        detail::accumulate<T>(*an, self.grad);
        detail::accumulate<T>(*bn, self.grad);
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(out), "sub", {&a, &b}, [an, bn](Node<T>& self) {
        detail::accumulate<T>(*an, self.grad);
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(out), "mul", {&a, &b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    return detail::unary(x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
    return detail::unary(x, "add_scalar", [offset](T v) { return v + offset; }, [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    // NaN passes through so divergence stays visible downstream.
    return detail::unary(x, "relu", [](T v) { return v < T{0} ? T{0} : v; },
                         [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
    return detail::unary(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
    return detail::unary(x, "abs", [](T v) { return std::abs(v); },
                         [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
    return detail::unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel()) {
        throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
    }
    auto xn = x.node();
    return detail::make_result<T>(std::move(shape), x.values(), "reshape", {&x},
                                  [xn](Node<T>& self) { detail::accumulate<T>(*xn, self.grad); });
}

// ----------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T s{0};
    for (T v : x.data()) s += v;
    auto xn = x.node();
    return detail::make_result<T>(Shape{1}, {s}, "sum", {&x}, [xn](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

/// Global max; the gradient goes to the first maximal element.
template <class T>
Tensor<T> max(const Tensor<T>& x) {
    const auto d = x.data();
    const auto arg = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    auto xn = x.node();
    return detail::make_result<T>(Shape{1}, {d[arg]}, "max", {&x}, [xn, arg](Node<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad()[arg] += self.grad[0];
    });
}

/// [N,C,H,W] -> [N,C]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool expects [N,C,H,W], got " + to_string(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(n * c);
    const T inv = T{1} / static_cast<T>(hw);
    for (std::size_t i = 0; i < n * c; ++i) {
        T s{0};
        for (std::size_t p = 0; p < hw; ++p) s += x[i * hw + p];
        out[i] = s * inv;
    }
    auto xn = x.node();
    return detail::make_result<T>(Shape{n, c}, std::move(out), "global_avg_pool", {&x},
                                  [xn, hw, inv](Node<T>& self) {
                                      if (!xn->requires_grad) return;
                                      auto& g = xn->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                          const T v = self.grad[i] * inv;
                                          for (std::size_t p = 0; p < hw; ++p) g[i * hw + p] += v;
                                      }
                                  });
}

// --------------------------------------------------------------------- layers

/// x[N,in] * W[out,in]^T (+ b[out]) -> [N,out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
        throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
    }
    const std::size_t n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
        throw ShapeError("linear: bias shape " + to_string(bias.shape()));
    }
    std::vector<T> out(n * out_f, T{0});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t o = 0; o < out_f; ++o) {
            T s = bias.defined() ? bias[o] : T{0};
            for (std::size_t k = 0; k < in; ++k) s += x[r * in + k] * weight[o * in + k];
            out[r * out_f + o] = s;
        }
    }
    auto xn = x.node(), wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    return detail::make_result<T>(Shape{n, out_f}, std::move(out), "linear", {&x, &weight, &bias},
                                  [xn, wn, bn, n, in, out_f](Node<T>& self) {
                                      const auto& g = self.grad;
                                      if (xn->requires_grad) {
                                          auto& gx = xn->ensure_grad();
                                          detail::gemm_nn(n, in, out_f, g.data(), wn->data.data(), gx.data());
                                      }
                                      if (wn->requires_grad) {
                                          auto& gw = wn->ensure_grad();
                                          detail::gemm_tn(out_f, in, n, g.data(), xn->data.data(), gw.data());
                                      }
                                      if (bn && bn->requires_grad) {
                                          auto& gb = bn->ensure_grad();
                                          for (std::size_t r = 0; r < n; ++r)
                                              for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
                                      }
                                  });
}

/// input [N,Cin,H,W], weight [Cout,Cin,kh,kw] -> [N,Cout,H',W'] (no bias).
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride, std::size_t padding) {
    if (input.rank() != 4 || weight.rank() != 4) {
        throw ShapeError("conv2d expects rank-4 input and weight, got " + to_string(input.shape()) + " and " +
                         to_string(weight.shape()));
    }
    if (input.dim(1) != weight.dim(1)) {
        throw ShapeError("conv2d: input channels " + std::to_string(input.dim(1)) + " != weight channels " +
                         std::to_string(weight.dim(1)));
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0),
                           weight.dim(2), weight.dim(3), stride, padding, 0, 0};
    if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
        throw ShapeError("conv2d: kernel larger than padded input");
    }
    g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
    g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

    const std::size_t in_img = g.cin * g.h * g.w, out_img = g.cout * g.pixels();
    std::vector<T> out(g.n * out_img, T{0});
    std::vector<T> col(g.patch() * g.pixels());
    for (std::size_t b = 0; b < g.n; ++b) {
        detail::im2col(g, input.data().data() + b * in_img, col.data());
        detail::gemm_nn(g.cout, g.pixels(), g.patch(), weight.data().data(), col.data(), out.data() + b * out_img);
    }
    auto xn = input.node(), wn = weight.node();
    return detail::make_result<T>(
        Shape{g.n, g.cout, g.oh, g.ow}, std::move(out), "conv2d", {&input, &weight},
        [xn, wn, g, in_img, out_img](Node<T>& self) {
            const std::size_t P = g.pixels(), K = g.patch();
            std::vector<T> col(K * P), col_t(P * K), dcol(K * P);
            for (std::size_t b = 0; b < g.n; ++b) {
                const T* gout = self.grad.data() + b * out_img;
                if (wn->requires_grad) {
                    detail::im2col(g, xn->data.data() + b * in_img, col.data());
                    for (std::size_t k = 0; k < K; ++k)
                        for (std::size_t p = 0; p < P; ++p) col_t[p * K + k] = col[k * P + p];
                    detail::gemm_nn(g.cout, K, P, gout, col_t.data(), wn->ensure_grad().data());
                }
                if (xn->requires_grad) {
                    std::fill(dcol.begin(), dcol.end(), T{0});
                    detail::gemm_tn(K, P, g.cout, wn->data.data(), gout, dcol.data());
                    detail::col2im(g, dcol.data(), xn->ensure_grad().data() + b * in_img);
                }
            }
        });
}

enum class Mode { Train, Eval };

template <class T>
struct BatchNormStats {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T momentum = T(0.1);

    explicit BatchNormStats(std::size_t channels = 1)
        : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

/// Train mode normalizes with batch statistics (biased variance) and, when
/// `update_stats` is set, folds them into the running estimates (unbiased
/// variance). Eval mode uses the running estimates as constants.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                      BatchNormStats<T>& stats, Mode mode, T eps = T(1e-5), bool update_stats = true) {
    if (input.rank() != 4) throw ShapeError("batchnorm2d expects [N,C,H,W], got " + to_string(input.shape()));
    const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    if (scale.numel() != c || shift.numel() != c || stats.running_mean.numel() != c) {
        throw ShapeError("batchnorm2d: parameter size does not match channel count " + std::to_string(c));
    }
    const std::size_t m = n * hw;
    if (mode == Mode::Train && m < 2) throw ShapeError("batchnorm2d: train mode needs N*H*W >= 2");

    std::vector<T> mu(c), inv_std(c);
    if (mode == Mode::Train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T s{0};
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t p = 0; p < hw; ++p) s += input[(b * c + ch) * hw + p];
            const T mean = s / static_cast<T>(m);
            T v{0};
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t p = 0; p < hw; ++p) {
                    const T d = input[(b * c + ch) * hw + p] - mean;
                    v += d * d;
                }
            const T var = v / static_cast<T>(m);
            mu[ch] = mean;
            inv_std[ch] = T{1} / std::sqrt(var + eps);
            if (update_stats) {
                const T mom = stats.momentum;
                stats.running_mean[ch] = (T{1} - mom) * stats.running_mean[ch] + mom * mean;
                stats.running_var[ch] =
                    (T{1} - mom) * stats.running_var[ch] + mom * v / static_cast<T>(m - 1);
            }
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = stats.running_mean[ch];
            inv_std[ch] = T{1} / std::sqrt(stats.running_var[ch] + eps);
        }
    }

    std::vector<T> xhat(input.numel()), out(input.numel());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t i = (b * c + ch) * hw + p;
                xhat[i] = (input[i] - mu[ch]) * inv_std[ch];
                out[i] = scale[ch] * xhat[i] + shift[ch];
            }

    auto xn = input.node(), sn = scale.node(), bn = shift.node();
    const bool train = mode == Mode::Train;
    return detail::make_result<T>(
        input.shape(), std::move(out), "batchnorm2d", {&input, &scale, &shift},
        [xn, sn, bn, xhat = std::move(xhat), inv_std, n, c, hw, m, train](Node<T>& self) {
            const auto& g = self.grad;
            std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t i = (b * c + ch) * hw + p;
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
            if (sn->requires_grad) {
                auto& gs = sn->ensure_grad();
                for (std::size_t ch = 0; ch < c; ++ch) gs[ch] += sum_gx[ch];
            }
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
            }
            if (!xn->requires_grad) return;
            auto& gx = xn->ensure_grad();
            const T inv_m = T{1} / static_cast<T>(m);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const T k = sn->data[ch] * inv_std[ch];
                    for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t i = (b * c + ch) * hw + p;
                        if (train) {
                            gx[i] += k * (g[i] - inv_m * sum_g[ch] - inv_m * xhat[i] * sum_gx[ch]);
                        } else {
                            gx[i] += k * g[i];
                        }
                    }
                }
        });
}

/// Parameter-free residual shortcut for a block that changes resolution or
/// width: keeps every `stride`-th pixel and zero-pads channels symmetrically.
template <class T>
Tensor<T> downsample_pad(const Tensor<T>& x, std::size_t stride, std::size_t out_channels) {
    if (x.rank() != 4) throw ShapeError("downsample_pad expects [N,C,H,W]");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (out_channels < c || stride == 0) throw ShapeError("downsample_pad: cannot shrink channels");
    const std::size_t oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
    const std::size_t lo = (out_channels - c) / 2;
    std::vector<T> out(n * out_channels * oh * ow, T{0});
    auto index_in = [=](std::size_t b, std::size_t ch, std::size_t y, std::size_t xx) {
        return ((b * c + ch) * h + y * stride) * w + xx * stride;
    };
    auto index_out = [=](std::size_t b, std::size_t ch, std::size_t y, std::size_t xx) {
        return ((b * out_channels + ch + lo) * oh + y) * ow + xx;
    };
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx) out[index_out(b, ch, y, xx)] = x[index_in(b, ch, y, xx)];
    auto xn = x.node();
    return detail::make_result<T>(Shape{n, out_channels, oh, ow}, std::move(out), "downsample_pad", {&x},
                                  [=](Node<T>& self) {
                                      if (!xn->requires_grad) return;
                                      auto& g = xn->ensure_grad();
                                      for (std::size_t b = 0; b < n; ++b)
                                          for (std::size_t ch = 0; ch < c; ++ch)
                                              for (std::size_t y = 0; y < oh; ++y)
                                                  for (std::size_t xx = 0; xx < ow; ++xx)
                                                      g[index_in(b, ch, y, xx)] += self.grad[index_out(b, ch, y, xx)];
                                  });
}

// ------------------------------------------------------------ probabilistic

/// Softmax over the last dimension of a rank-1 or rank-2 tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
    if (x.rank() > 2) throw ShapeError("softmax expects rank 1 or 2");
    const std::size_t cols = x.shape().back(), rows = x.numel() / cols;
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * cols;
        T* o = out.data() + r * cols;
        const T mx = *std::max_element(in, in + cols);
        T s{0};
        for (std::size_t k = 0; k < cols; ++k) s += (o[k] = std::exp(in[k] - mx));
        for (std::size_t k = 0; k < cols; ++k) o[k] /= s;
    }
    auto xn = x.node();
    return detail::make_result<T>(x.shape(), std::move(out), "softmax", {&x}, [xn, rows, cols](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.data.data() + r * cols;
            const T* gy = self.grad.data() + r * cols;
            T dot{0};
            for (std::size_t k = 0; k < cols; ++k) dot += y[k] * gy[k];
            for (std::size_t k = 0; k < cols; ++k) g[r * cols + k] += y[k] * (gy[k] - dot);
        }
    });
}

/// Repeats a rank-1 tensor [K] into rows -> [N,K]; gradients sum over rows.
template <class T>
Tensor<T> broadcast_rows(const Tensor<T>& x, std::size_t rows) {
    if (x.rank() != 1) throw ShapeError("broadcast_rows expects a rank-1 tensor");
    const std::size_t k = x.numel();
    std::vector<T> out(rows * k);
    for (std::size_t r = 0; r < rows; ++r) std::copy(x.data().begin(), x.data().end(), out.begin() + r * k);
    auto xn = x.node();
    return detail::make_result<T>(Shape{rows, k}, std::move(out), "broadcast_rows", {&x}, [xn, rows, k](Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < k; ++j) g[j] += self.grad[r * k + j];
    });
}

/// Per-example cross-entropy of logits [N,C] against integer labels -> [N].
template <class T>
Tensor<T> cross_entropy_per_example(const Tensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw ShapeError("cross entropy expects logits [N,C]");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    if (labels.size() != n) throw ShapeError("cross entropy: label count does not match batch");
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= c) {
            throw std::out_of_range("cross entropy: label " + std::to_string(l) + " outside [0," +
                                    std::to_string(c) + ")");
        }
    }
    std::vector<T> probs(n * c), out(n);
    for (std::size_t r = 0; r < n; ++r) {
        const T* z = logits.data().data() + r * c;
        const T mx = *std::max_element(z, z + c);
        T s{0};
        for (std::size_t k = 0; k < c; ++k) s += std::exp(z[k] - mx);
        const T log_s = std::log(s);
        for (std::size_t k = 0; k < c; ++k) probs[r * c + k] = std::exp(z[k] - mx - log_s);
        out[r] = -(z[labels[r]] - mx - log_s);
    }
    auto ln = logits.node();
    std::vector<int> lab(labels.begin(), labels.end());
    return detail::make_result<T>(Shape{n}, std::move(out), "cross_entropy", {&logits},
                                  [ln, probs = std::move(probs), lab = std::move(lab), n, c](Node<T>& self) {
                                      if (!ln->requires_grad) return;
                                      auto& g = ln->ensure_grad();
                                      for (std::size_t r = 0; r < n; ++r) {
                                          const T gr = self.grad[r];
                                          for (std::size_t k = 0; k < c; ++k) {
                                              const T onehot = static_cast<int>(k) == lab[r] ? T{1} : T{0};
                                              g[r * c + k] += gr * (probs[r * c + k] - onehot);
                                          }
                                      }
                                  });
}

/// Batch-mean cross-entropy -> scalar.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    return mean(cross_entropy_per_example(logits, labels));
}

/// Weighted sum of same-shaped candidate outputs. `masks` is [K] (one mask
/// per block) or [N,K] (one per example, outputs' leading dim is N).
/// Accumulation runs in candidate order.
template <class T>
Tensor<T> mix(const Tensor<T>& masks, const std::vector<Tensor<T>>& outputs) {
    const std::size_t k = outputs.size();
    if (k == 0) throw ShapeError("mix: no candidate outputs");
    if (masks.shape().back() != k) throw ShapeError("mix: mask length does not match candidate count");
    const Shape& shape = outputs.front().shape();
    for (const auto& o : outputs) {
        if (o.shape() != shape) throw ShapeError("mix: candidate outputs differ in shape");
    }
    const bool per_example = masks.rank() == 2;
    const std::size_t n = per_example ? masks.dim(0) : 1;
    if (per_example && shape.front() != n) throw ShapeError("mix: per-example masks do not match batch");
    const std::size_t total = numel(shape), chunk = total / n;

    std::vector<T> out(total, T{0});
    for (std::size_t j = 0; j < k; ++j) {
        const auto od = outputs[j].data();
        for (std::size_t b = 0; b < n; ++b) {
            const T m = masks[b * k + j];
            for (std::size_t i = b * chunk; i < (b + 1) * chunk; ++i) out[i] += m * od[i];
        }
    }
    std::vector<Tensor<T>> inputs;
    inputs.reserve(k + 1);
    inputs.push_back(masks);
    for (const auto& o : outputs) inputs.push_back(o);
    auto mn = masks.node();
    std::vector<std::shared_ptr<Node<T>>> on;
    for (const auto& o : outputs) on.push_back(o.node());
    return detail::make_result_n<T>(shape, std::move(out), "mix", inputs, [mn, on, n, k, chunk](Node<T>& self) {
        const auto& g = self.grad;
        for (std::size_t j = 0; j < k; ++j) {
            auto& o = *on[j];
            if (mn->requires_grad) {
                auto& gm = mn->ensure_grad();
                for (std::size_t b = 0; b < n; ++b) {
                    T s{0};
                    for (std::size_t i = b * chunk; i < (b + 1) * chunk; ++i) s += g[i] * o.data[i];
                    gm[b * k + j] += s;
                }
            }
            if (o.requires_grad) {
                auto& go = o.ensure_grad();
                for (std::size_t b = 0; b < n; ++b) {
                    const T m = mn->data[b * k + j];
                    for (std::size_t i = b * chunk; i < (b + 1) * chunk; ++i) go[i] += m * g[i];
                }
            }
        }
    });
}

// ---------------------------------------------------------- custom gradient

template <class T>
using ForwardFn = std::function<std::vector<T>(const std::vector<Tensor<T>>& inputs)>;

/// Receives the inputs, the forward output and d(loss)/d(output); returns
/// one gradient buffer per input (an empty buffer means "no gradient").
template <class T>
using BackwardFn = std::function<std::vector<std::vector<T>>(
    const std::vector<Tensor<T>>& inputs, const Tensor<T>& output, std::span<const T> grad_out)>;

class ArityError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Records an op whose value comes from `forward` and whose gradient is
/// `backward` verbatim. The forward result has the shape `out_shape`.
template <class T>
Tensor<T> custom_gradient(ForwardFn<T> forward, BackwardFn<T> backward_fn, std::vector<Tensor<T>> inputs,
                          Shape out_shape, const char* name = "custom") {
    std::vector<T> value;
    {
        NoGradGuard guard;
        value = forward(inputs);
    }
    if (value.size() != numel(out_shape)) throw ShapeError("custom_gradient: forward output size mismatch");
    auto saved = inputs;
    return detail::make_result_n<T>(
        std::move(out_shape), std::move(value), name, inputs,
        [saved = std::move(saved), backward_fn = std::move(backward_fn)](Node<T>& self) {
            auto out = Tensor<T>::from_node(std::shared_ptr<Node<T>>(std::shared_ptr<Node<T>>{}, &self));
            auto grads = backward_fn(saved, out, self.grad);
            if (grads.size() != saved.size()) {
                throw ArityError("custom_gradient: backward returned " + std::to_string(grads.size()) +
                                 " gradients for " + std::to_string(saved.size()) + " inputs");
            }
            for (std::size_t i = 0; i < saved.size(); ++i) {
                if (grads[i].empty()) continue;
                if (grads[i].size() != saved[i].numel()) {
                    throw ShapeError("custom_gradient: gradient " + std::to_string(i) + " has wrong size");
                }
                detail::accumulate<T>(*saved[i].node(), grads[i]);
            }
        });
}

/// Convenience overload inferring the output shape from the first input.
template <class T>
Tensor<T> custom_gradient(ForwardFn<T> forward, BackwardFn<T> backward_fn, std::vector<Tensor<T>> inputs) {
    if (inputs.empty()) throw ArityError("custom_gradient needs at least one input");
    Shape shape = inputs.front().shape();
    return custom_gradient<T>(std::move(forward), std::move(backward_fn), std::move(inputs), std::move(shape));
}

} // namespace dnas
