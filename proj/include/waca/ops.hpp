#pragma once

// Differentiable primitives. Every op computes its forward value eagerly and,
// when a tape is active and an input requires grad, records a closure that
// accumulates input gradients from the output gradient.

#include <cmath>
#include <limits>
#include <numbers>

#include "waca/tensor.hpp"

namespace waca {

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* arg) {
    if (s.size() != rank) {
        throw DimensionError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got " +
                             shape_str(s));
    }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
    Tensor<T> y(x.shape());
    const T* px = x.ptr();
    T* py = y.mutable_ptr();
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) py[i] = f(px[i]);
    if (auto* tape = tape_for(x)) {
        y.set_requires_grad();
        tape->record([x, y, df] {
            auto gy = out_grad(y);
            auto gx = in_grad(x);
            if (gy.empty() || gx.empty()) return;
            const T* px = x.ptr();
            const T* py = y.ptr();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(px[i], py[i]);
        });
    }
    return y;
}

// Dot product with eight fixed partial sums: vectorizes under strict IEEE
// semantics and keeps a deterministic summation order.
template <class T>
T dot_lanes(const T* a, const T* b, std::size_t n) {
    T lanes[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
    T acc = T(0);
    for (; i < n; ++i) acc += a[i] * b[i];
    for (std::size_t l = 0; l < 8; ++l) acc += lanes[l];
    return acc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(
        x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// Output is clamped to the representable open interval (0,1), so saturated
// gates never round to exactly 0 or 1.
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(
        x,
        [](T v) {
            const T s = T(1) / (T(1) + std::exp(-v));
            return std::clamp(s, std::numeric_limits<T>::min(), T(1) - std::numeric_limits<T>::epsilon() / T(2));
        },
        [](T, T s) { return s * (T(1) - s); });
}

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    return detail::unary(
        x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2))); },
        [](T v, T) {
            const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
            const T pdf = std::exp(T(-0.5) * v * v) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
            return cdf + v * pdf;
        });
}

// a * x + b
template <class T>
Tensor<T> affine(const Tensor<T>& x, T a, T b) {
    return detail::unary(x, [a, b](T v) { return a * v + b; }, [a](T, T) { return a; });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a.shape(), b.shape(), "add");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y.mutable_ptr()[i] = a[i] + b[i];
    if (auto* tape = detail::tape_for(a, b)) {
        y.set_requires_grad();
        tape->record([a, b, y] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            if (auto ga = detail::in_grad(a); !ga.empty())
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
            if (auto gb = detail::in_grad(b); !gb.empty())
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i];
        });
    }
    return y;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a.shape(), b.shape(), "sub");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y.mutable_ptr()[i] = a[i] - b[i];
    if (auto* tape = detail::tape_for(a, b)) {
        y.set_requires_grad();
        tape->record([a, b, y] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            if (auto ga = detail::in_grad(a); !ga.empty())
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
            if (auto gb = detail::in_grad(b); !gb.empty())
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
        });
    }
    return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a.shape(), b.shape(), "mul");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y.mutable_ptr()[i] = a[i] * b[i];
    if (auto* tape = detail::tape_for(a, b)) {
        y.set_requires_grad();
        tape->record([a, b, y] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            if (auto ga = detail::in_grad(a); !ga.empty())
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * b[i];
            if (auto gb = detail::in_grad(b); !gb.empty())
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * a[i];
        });
    }
    return y;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same(a.shape(), b.shape(), "div");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y.mutable_ptr()[i] = a[i] / b[i];
    if (auto* tape = detail::tape_for(a, b)) {
        y.set_requires_grad();
        tape->record([a, b, y] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            if (auto ga = detail::in_grad(a); !ga.empty())
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] / b[i];
            if (auto gb = detail::in_grad(b); !gb.empty())
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i] * y[i] / b[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(acc);
    if (auto* tape = detail::tape_for(x)) {
        y.set_requires_grad();
        tape->record([x, y] {
            auto gy = detail::out_grad(y);
            auto gx = detail::in_grad(x);
            if (gy.empty() || gx.empty()) return;
            for (auto& g : gx) g += gy[0];
        });
    }
    return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw DimensionError("mean: empty tensor");
    const T n = static_cast<T>(x.numel());
    T acc = T(0);
    for (T v : x.data()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(acc / n);
    if (auto* tape = detail::tape_for(x)) {
        y.set_requires_grad();
        tape->record([x, y, n] {
            auto gy = detail::out_grad(y);
            auto gx = detail::in_grad(x);
            if (gy.empty() || gx.empty()) return;
            for (auto& g : gx) g += gy[0] / n;
        });
    }
    return y;
}

// Per-channel spatial mean, [N,C,H,W] -> [N,C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 4, "global_avg_pool", "x");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (HW == 0) throw DimensionError("global_avg_pool: empty spatial extent");
    Tensor<T> y({N, C});
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* p = x.ptr() + nc * HW;
        T acc = T(0);
        for (std::size_t i = 0; i < HW; ++i) acc += p[i];
        y.mutable_ptr()[nc] = acc / T(HW);
    }
    if (auto* tape = detail::tape_for(x)) {
        y.set_requires_grad();
        tape->record([x, y, N, C, HW] {
            auto gy = detail::out_grad(y);
            auto gx = detail::in_grad(x);
            if (gy.empty() || gx.empty()) return;
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                const T g = gy[nc] / T(HW);
                for (std::size_t i = 0; i < HW; ++i) gx[nc * HW + i] += g;
            }
        });
    }
    return y;
}

// Per-channel spatial max, [N,C,H,W] -> [N,C]. Gradient goes to the first
// maximum in row-major order.
template <class T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 4, "global_max_pool", "x");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (HW == 0) throw DimensionError("global_max_pool: empty spatial extent");
    Tensor<T> y({N, C});
    std::vector<std::size_t> argmax(N * C);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* p = x.ptr() + nc * HW;
        std::size_t best = 0;
        for (std::size_t i = 1; i < HW; ++i)
            if (p[i] > p[best]) best = i;
        argmax[nc] = best;
        y.mutable_ptr()[nc] = p[best];
    }
    if (auto* tape = detail::tape_for(x)) {
        y.set_requires_grad();
        tape->record([x, y, HW, argmax = std::move(argmax)] {
            auto gy = detail::out_grad(y);
            auto gx = detail::in_grad(x);
            if (gy.empty() || gx.empty()) return;
            for (std::size_t nc = 0; nc < argmax.size(); ++nc) gx[nc * HW + argmax[nc]] += gy[nc];
        });
    }
    return y;
}

// Per-pixel channel mean (plane 0) and channel max (plane 1), [N,C,H,W] -> [N,2,H,W].
template <class T>
Tensor<T> channel_pool_spatial(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 4, "channel_pool_spatial", "x");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (C == 0) throw DimensionError("channel_pool_spatial: zero channels");
    Tensor<T> y({N, 2, x.dim(2), x.dim(3)});
    std::vector<std::uint32_t> argmax(N * HW);
    for (std::size_t n = 0; n < N; ++n) {
        const T* xn = x.ptr() + n * C * HW;
        T* avg = y.mutable_ptr() + n * 2 * HW;
        T* mx = avg + HW;
        for (std::size_t i = 0; i < HW; ++i) {
            avg[i] = xn[i];
            mx[i] = xn[i];
            argmax[n * HW + i] = 0;
        }
        for (std::size_t c = 1; c < C; ++c) {
            const T* xc = xn + c * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                avg[i] += xc[i];
                if (xc[i] > mx[i]) {
                    mx[i] = xc[i];
                    argmax[n * HW + i] = static_cast<std::uint32_t>(c);
                }
            }
        }
        for (std::size_t i = 0; i < HW; ++i) avg[i] /= T(C);
    }
    if (auto* tape = detail::tape_for(x)) {
        y.set_requires_grad();
        tape->record([x, y, N, C, HW, argmax = std::move(argmax)] {
            auto gy = detail::out_grad(y);
            auto gx = detail::in_grad(x);
            if (gy.empty() || gx.empty()) return;
            for (std::size_t n = 0; n < N; ++n) {
                const T* gavg = gy.data() + n * 2 * HW;
                const T* gmax = gavg + HW;
                T* gxn = gx.data() + n * C * HW;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < HW; ++i) gxn[c * HW + i] += gavg[i] / T(C);
                for (std::size_t i = 0; i < HW; ++i) gxn[argmax[n * HW + i] * HW + i] += gmax[i];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Broadcast products and layout

// x[N,C,H,W] * g[N,C] broadcast over H,W.
template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& g) {
    detail::require_rank(x.shape(), 4, "scale_channels", "x");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (g.shape() != Shape{N, C}) {
        throw DimensionError("scale_channels: gate shape " + shape_str(g.shape()) + " does not match [N,C] of " +
                             shape_str(x.shape()));
    }
    Tensor<T> y(x.shape());
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T s = g[nc];
        const T* px = x.ptr() + nc * HW;
        T* py = y.mutable_ptr() + nc * HW;
        for (std::size_t i = 0; i < HW; ++i) py[i] = px[i] * s;
    }
    if (auto* tape = detail::tape_for(x, g)) {
        y.set_requires_grad();
        tape->record([x, g, y, N, C, HW] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            auto gx = detail::in_grad(x);
            auto gg = detail::in_grad(g);
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                const T* dy = gy.data() + nc * HW;
                if (!gx.empty()) {
                    const T s = g[nc];
                    for (std::size_t i = 0; i < HW; ++i) gx[nc * HW + i] += dy[i] * s;
                }
                if (!gg.empty()) {
                    const T* px = x.ptr() + nc * HW;
                    T acc = T(0);
                    for (std::size_t i = 0; i < HW; ++i) acc += dy[i] * px[i];
                    gg[nc] += acc;
                }
            }
        });
    }
    return y;
}

// x[N,C,H,W] * m[N,1,H,W] broadcast over C.
template <class T>
Tensor<T> scale_spatial(const Tensor<T>& x, const Tensor<T>& m) {
    detail::require_rank(x.shape(), 4, "scale_spatial", "x");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (m.shape() != Shape{N, 1, x.dim(2), x.dim(3)}) {
        throw DimensionError("scale_spatial: map shape " + shape_str(m.shape()) + " does not match [N,1,H,W] of " +
                             shape_str(x.shape()));
    }
    Tensor<T> y(x.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T* px = x.ptr() + (n * C + c) * HW;
            const T* pm = m.ptr() + n * HW;
            T* py = y.mutable_ptr() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) py[i] = px[i] * pm[i];
        }
    if (auto* tape = detail::tape_for(x, m)) {
        y.set_requires_grad();
        tape->record([x, m, y, N, C, HW] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            auto gx = detail::in_grad(x);
            auto gm = detail::in_grad(m);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t off = (n * C + c) * HW;
                    const T* dy = gy.data() + off;
                    const T* pm = m.ptr() + n * HW;
                    const T* px = x.ptr() + off;
                    if (!gx.empty())
                        for (std::size_t i = 0; i < HW; ++i) gx[off + i] += dy[i] * pm[i];
                    if (!gm.empty())
                        for (std::size_t i = 0; i < HW; ++i) gm[n * HW + i] += dy[i] * px[i];
                }
        });
    }
    return y;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank(a.shape(), 4, "concat_channels", "a");
    detail::require_rank(b.shape(), 4, "concat_channels", "b");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw DimensionError("concat_channels: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                             " differ outside the channel axis");
    }
    const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
    Tensor<T> y({N, Ca + Cb, a.dim(2), a.dim(3)});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(a.ptr() + n * Ca * HW, Ca * HW, y.mutable_ptr() + n * (Ca + Cb) * HW);
        std::copy_n(b.ptr() + n * Cb * HW, Cb * HW, y.mutable_ptr() + (n * (Ca + Cb) + Ca) * HW);
    }
    if (auto* tape = detail::tape_for(a, b)) {
        y.set_requires_grad();
        tape->record([a, b, y, N, Ca, Cb, HW] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            auto ga = detail::in_grad(a);
            auto gb = detail::in_grad(b);
            for (std::size_t n = 0; n < N; ++n) {
                const T* src = gy.data() + n * (Ca + Cb) * HW;
                if (!ga.empty())
                    for (std::size_t i = 0; i < Ca * HW; ++i) ga[n * Ca * HW + i] += src[i];
                if (!gb.empty())
                    for (std::size_t i = 0; i < Cb * HW; ++i) gb[n * Cb * HW + i] += src[Ca * HW + i];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Linear maps

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
};

// Cross-correlation. w: [Cout, Cin/groups, kh, kw]; b: [Cout] or empty.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Conv2dOptions opt = {}) {
    detail::require_rank(x.shape(), 4, "conv2d", "x");
    detail::require_rank(w.shape(), 4, "conv2d", "w");
    const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t G = opt.groups, s = opt.stride, p = opt.padding;
    if (G == 0 || s == 0) throw DimensionError("conv2d: groups and stride must be positive");
    if (Cin % G != 0) {
        throw DimensionError("conv2d: input channels (axis 1 of x) = " + std::to_string(Cin) +
                             " not divisible by groups = " + std::to_string(G));
    }
    if (Cout % G != 0) {
        throw DimensionError("conv2d: output channels (axis 0 of w) = " + std::to_string(Cout) +
                             " not divisible by groups = " + std::to_string(G));
    }
    const std::size_t cin_g = Cin / G, cout_g = Cout / G;
    if (w.dim(1) != cin_g) {
        throw DimensionError("conv2d: w axis 1 = " + std::to_string(w.dim(1)) + " but x axis 1 / groups = " +
                             std::to_string(cin_g));
    }
    if (!b.empty() && b.shape() != Shape{Cout}) {
        throw DimensionError("conv2d: bias shape " + shape_str(b.shape()) + " does not match Cout = " +
                             std::to_string(Cout));
    }
    if (H + 2 * p < kh || W + 2 * p < kw) {
        throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " larger than padded input (axes 2,3 of x) " + shape_str(x.shape()));
    }
    const std::size_t Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
    Tensor<T> y({N, Cout, Ho, Wo});

    // Valid output column range for a kernel column offset.
    auto col_range = [=](std::size_t kx) {
        const long lo_num = static_cast<long>(p) - static_cast<long>(kx);
        const long lo = lo_num > 0 ? (lo_num + static_cast<long>(s) - 1) / static_cast<long>(s) : 0;
        const long hi_num = static_cast<long>(W) - 1 + static_cast<long>(p) - static_cast<long>(kx);
        const long hi = hi_num < 0 ? -1 : std::min<long>(hi_num / static_cast<long>(s), static_cast<long>(Wo) - 1);
        return std::pair<long, long>{lo, hi + 1};
    };

    const T* px = x.ptr();
    const T* pw = w.ptr();
    T* py = y.mutable_ptr();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t g = 0; g < G; ++g)
            for (std::size_t ocg = 0; ocg < cout_g; ++ocg) {
                const std::size_t oc = g * cout_g + ocg;
                T* out = py + (n * Cout + oc) * Ho * Wo;
                const T bias = b.empty() ? T(0) : b[oc];
                std::fill_n(out, Ho * Wo, bias);
                for (std::size_t icg = 0; icg < cin_g; ++icg) {
                    const std::size_t ic = g * cin_g + icg;
                    const T* in = px + (n * Cin + ic) * H * W;
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const T wv = pw[((oc * cin_g + icg) * kh + ky) * kw + kx];
                            const auto [ox0, ox1] = col_range(kx);
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                                const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
                                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                const T* row = in + iy * W;
                                T* orow = out + oy * Wo;
                                const long shift = static_cast<long>(kx) - static_cast<long>(p);
                                if (s == 1) {
                                    for (long ox = ox0; ox < ox1; ++ox) orow[ox] += wv * row[ox + shift];
                                } else {
                                    for (long ox = ox0; ox < ox1; ++ox)
                                        orow[ox] += wv * row[ox * static_cast<long>(s) + shift];
                                }
                            }
                        }
                }
            }

    if (auto* tape = detail::tape_for(x, w, b)) {
        y.set_requires_grad();
        tape->record([=] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            auto gx = detail::in_grad(x);
            auto gw = detail::in_grad(w);
            auto gb = b.empty() ? std::span<T>{} : detail::in_grad(b);
            const T* px = x.ptr();
            const T* pw = w.ptr();
            const bool pointwise = kh == 1 && kw == 1 && s == 1 && p == 0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t g = 0; g < G; ++g)
                    for (std::size_t ocg = 0; ocg < cout_g; ++ocg) {
                        const std::size_t oc = g * cout_g + ocg;
                        const T* dout = gy.data() + (n * Cout + oc) * Ho * Wo;
                        if (!gb.empty()) {
                            T acc = T(0);
                            for (std::size_t i = 0; i < Ho * Wo; ++i) acc += dout[i];
                            gb[oc] += acc;
                        }
                        if (pointwise) {
                            // Whole planes are contiguous.
                            for (std::size_t icg = 0; icg < cin_g; ++icg) {
                                const std::size_t ic = g * cin_g + icg;
                                const std::size_t widx = oc * cin_g + icg;
                                const T* in = px + (n * Cin + ic) * H * W;
                                if (!gw.empty()) gw[widx] += detail::dot_lanes(dout, in, H * W);
                                if (!gx.empty()) {
                                    T* din = gx.data() + (n * Cin + ic) * H * W;
                                    const T wv = pw[widx];
                                    for (std::size_t i = 0; i < H * W; ++i) din[i] += wv * dout[i];
                                }
                            }
                            continue;
                        }
                        for (std::size_t icg = 0; icg < cin_g; ++icg) {
                            const std::size_t ic = g * cin_g + icg;
                            const T* in = px + (n * Cin + ic) * H * W;
                            T* din = gx.empty() ? nullptr : gx.data() + (n * Cin + ic) * H * W;
                            for (std::size_t ky = 0; ky < kh; ++ky)
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const std::size_t widx = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                                    const T wv = pw[widx];
                                    const auto [ox0, ox1] = col_range(kx);
                                    const long shift = static_cast<long>(kx) - static_cast<long>(p);
                                    T wacc = T(0);
                                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                                        const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
                                        if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                        const T* drow = dout + oy * Wo;
                                        const T* row = in + iy * W;
                                        T* dirow = din ? din + iy * W : nullptr;
                                        if (s == 1) {
                                            if (!gw.empty() && ox1 > ox0)
                                                wacc += detail::dot_lanes(drow + ox0, row + ox0 + shift,
                                                                          static_cast<std::size_t>(ox1 - ox0));
                                            if (dirow)
                                                for (long ox = ox0; ox < ox1; ++ox) dirow[ox + shift] += wv * drow[ox];
                                        } else {
                                            const long ss = static_cast<long>(s);
                                            if (!gw.empty())
                                                for (long ox = ox0; ox < ox1; ++ox)
                                                    wacc += drow[ox] * row[ox * ss + shift];
                                            if (dirow)
                                                for (long ox = ox0; ox < ox1; ++ox)
                                                    dirow[ox * ss + shift] += wv * drow[ox];
                                        }
                                    }
                                    if (!gw.empty()) gw[widx] += wacc;
                                }
                        }
                    }
        });
    }
    return y;
}

// y = x w^T + b. x: [N,Cin], w: [Cout,Cin], b: [Cout] or empty.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::require_rank(x.shape(), 2, "linear", "x");
    detail::require_rank(w.shape(), 2, "linear", "w");
    const std::size_t N = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);
    if (w.dim(1) != Cin) {
        throw DimensionError("linear: x axis 1 = " + std::to_string(Cin) + " but w axis 1 = " +
                             std::to_string(w.dim(1)));
    }
    if (!b.empty() && b.shape() != Shape{Cout}) {
        throw DimensionError("linear: bias shape " + shape_str(b.shape()) + " does not match w axis 0 = " +
                             std::to_string(Cout));
    }
    Tensor<T> y({N, Cout});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < Cout; ++o) {
            T acc = b.empty() ? T(0) : b[o];
            for (std::size_t i = 0; i < Cin; ++i) acc += x[n * Cin + i] * w[o * Cin + i];
            y.mutable_ptr()[n * Cout + o] = acc;
        }
    if (auto* tape = detail::tape_for(x, w, b)) {
        y.set_requires_grad();
        tape->record([x, w, b, y, N, Cin, Cout] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            auto gx = detail::in_grad(x);
            auto gw = detail::in_grad(w);
            auto gb = b.empty() ? std::span<T>{} : detail::in_grad(b);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Cout; ++o) {
                    const T d = gy[n * Cout + o];
                    if (!gb.empty()) gb[o] += d;
                    for (std::size_t i = 0; i < Cin; ++i) {
                        if (!gx.empty()) gx[n * Cin + i] += d * w[o * Cin + i];
                        if (!gw.empty()) gw[o * Cin + i] += d * x[n * Cin + i];
                    }
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Normalization

// Normalizes across the channel axis at every (n, h, w), then applies a
// per-channel affine.
template <class T>
Tensor<T> layer_norm_channelwise(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
    detail::require_rank(x.shape(), 4, "layer_norm_channelwise", "x");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
        throw DimensionError("layer_norm_channelwise: gamma/beta must be [" + std::to_string(C) + "]");
    }
    if (!(eps > T(0))) throw ConfigError("layer_norm_channelwise: eps must be positive");
    Tensor<T> y(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<T> inv_std(N * HW);
    std::vector<T> mu(HW), var(HW);
    for (std::size_t n = 0; n < N; ++n) {
        const T* xn = x.ptr() + n * C * HW;
        std::fill(mu.begin(), mu.end(), T(0));
        std::fill(var.begin(), var.end(), T(0));
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) mu[i] += xn[c * HW + i];
        for (std::size_t i = 0; i < HW; ++i) mu[i] /= T(C);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
                const T d = xn[c * HW + i] - mu[i];
                var[i] += d * d;
            }
        for (std::size_t i = 0; i < HW; ++i) inv_std[n * HW + i] = T(1) / std::sqrt(var[i] / T(C) + eps);
        for (std::size_t c = 0; c < C; ++c) {
            T* xh = xhat.mutable_ptr() + (n * C + c) * HW;
            T* yo = y.mutable_ptr() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                xh[i] = (xn[c * HW + i] - mu[i]) * inv_std[n * HW + i];
                yo[i] = gamma[c] * xh[i] + beta[c];
            }
        }
    }
    if (auto* tape = detail::tape_for(x, gamma, beta)) {
        y.set_requires_grad();
        tape->record([x, gamma, beta, y, xhat, N, C, HW, inv_std = std::move(inv_std)] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            auto gx = detail::in_grad(x);
            auto gg = detail::in_grad(gamma);
            auto gbt = detail::in_grad(beta);
            std::vector<T> s1(HW), s2(HW);
            for (std::size_t n = 0; n < N; ++n) {
                std::fill(s1.begin(), s1.end(), T(0));
                std::fill(s2.begin(), s2.end(), T(0));
                for (std::size_t c = 0; c < C; ++c) {
                    const T* dy = gy.data() + (n * C + c) * HW;
                    const T* xh = xhat.ptr() + (n * C + c) * HW;
                    T ga = T(0), gbsum = T(0);
                    for (std::size_t i = 0; i < HW; ++i) {
                        const T dxh = dy[i] * gamma[c];
                        s1[i] += dxh;
                        s2[i] += dxh * xh[i];
                        ga += dy[i] * xh[i];
                        gbsum += dy[i];
                    }
                    if (!gg.empty()) gg[c] += ga;
                    if (!gbt.empty()) gbt[c] += gbsum;
                }
                if (gx.empty()) continue;
                for (std::size_t c = 0; c < C; ++c) {
                    const T* dy = gy.data() + (n * C + c) * HW;
                    const T* xh = xhat.ptr() + (n * C + c) * HW;
                    T* dx = gx.data() + (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        const T dxh = dy[i] * gamma[c];
                        dx[i] += inv_std[n * HW + i] * (dxh - s1[i] / T(C) - xh[i] * s2[i] / T(C));
                    }
                }
            }
        });
    }
    return y;
}

// Global response normalization: each channel is scaled by its spatial L2
// norm relative to the mean norm across channels, then
// y = x + gamma * (x * n) + beta.
template <class T>
Tensor<T> grn(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
    detail::require_rank(x.shape(), 4, "grn", "x");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
        throw DimensionError("grn: gamma/beta must be [" + std::to_string(C) + "]");
    }
    if (!(eps > T(0))) throw ConfigError("grn: eps must be positive");
    std::vector<T> gnorm(N * C), scale(N * C), denom(N);
    for (std::size_t n = 0; n < N; ++n) {
        T m = T(0);
        for (std::size_t c = 0; c < C; ++c) {
            const T* xc = x.ptr() + (n * C + c) * HW;
            T acc = T(0);
            for (std::size_t i = 0; i < HW; ++i) acc += xc[i] * xc[i];
            gnorm[n * C + c] = std::sqrt(acc);
            m += gnorm[n * C + c];
        }
        denom[n] = m / T(C) + eps;
        for (std::size_t c = 0; c < C; ++c) scale[n * C + c] = gnorm[n * C + c] / denom[n];
    }
    Tensor<T> y(x.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T k = gamma[c] * scale[n * C + c] + T(1);
            const T* xc = x.ptr() + (n * C + c) * HW;
            T* yc = y.mutable_ptr() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) yc[i] = xc[i] * k + beta[c];
        }
    if (auto* tape = detail::tape_for(x, gamma, beta)) {
        y.set_requires_grad();
        tape->record([x, gamma, beta, y, N, C, HW, gnorm = std::move(gnorm), scale = std::move(scale),
                      denom = std::move(denom)] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            auto gx = detail::in_grad(x);
            auto gg = detail::in_grad(gamma);
            auto gbt = detail::in_grad(beta);
            std::vector<T> gscale(C);
            for (std::size_t n = 0; n < N; ++n) {
                T cross = T(0);
                for (std::size_t c = 0; c < C; ++c) {
                    const T* dy = gy.data() + (n * C + c) * HW;
                    const T* xc = x.ptr() + (n * C + c) * HW;
                    T dyx = T(0), dysum = T(0);
                    for (std::size_t i = 0; i < HW; ++i) {
                        dyx += dy[i] * xc[i];
                        dysum += dy[i];
                    }
                    if (!gg.empty()) gg[c] += dyx * scale[n * C + c];
                    if (!gbt.empty()) gbt[c] += dysum;
                    gscale[c] = dyx * gamma[c];
                    cross += gscale[c] * gnorm[n * C + c];
                }
                if (gx.empty()) continue;
                const T d = denom[n];
                for (std::size_t c = 0; c < C; ++c) {
                    // d loss / d gnorm_c through scale_k = gnorm_k / (mean(gnorm) + eps)
                    const T g_norm = gscale[c] / d - cross / (T(C) * d * d);
                    const T direct = gamma[c] * scale[n * C + c] + T(1);
                    const T via_norm = gnorm[n * C + c] > T(0) ? g_norm / gnorm[n * C + c] : T(0);
                    const T* dy = gy.data() + (n * C + c) * HW;
                    const T* xc = x.ptr() + (n * C + c) * HW;
                    T* dx = gx.data() + (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) dx[i] += dy[i] * direct + via_norm * xc[i];
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

struct LinearTap {
    std::size_t i0, i1;
    double frac;
};

// Half-pixel-centre (align_corners = false) source taps for one axis.
inline std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
    std::vector<LinearTap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        auto i0 = static_cast<std::size_t>(src);
        if (i0 > in - 1) i0 = in - 1;
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace detail

template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    detail::require_rank(x.shape(), 4, "resize_bilinear", "x");
    if (out_h == 0 || out_w == 0) throw DimensionError("resize_bilinear: target size must be positive");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H == 0 || W == 0) throw DimensionError("resize_bilinear: empty input");
    if (out_h == H && out_w == W) {
        // Identity size: pass values and gradients straight through.
        return affine(x, T(1), T(0));
    }
    const auto ty = detail::bilinear_taps(H, out_h);
    const auto tx = detail::bilinear_taps(W, out_w);
    Tensor<T> y({N, C, out_h, out_w});
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* in = x.ptr() + nc * H * W;
        T* out = y.mutable_ptr() + nc * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const auto& b = tx[ox];
                const T top = in[a.i0 * W + b.i0] * T(1 - b.frac) + in[a.i0 * W + b.i1] * T(b.frac);
                const T bot = in[a.i1 * W + b.i0] * T(1 - b.frac) + in[a.i1 * W + b.i1] * T(b.frac);
                out[oy * out_w + ox] = top * T(1 - a.frac) + bot * T(a.frac);
            }
        }
    }
    if (auto* tape = detail::tape_for(x)) {
        y.set_requires_grad();
        tape->record([x, y, N, C, H, W, out_h, out_w, ty, tx] {
            auto gy = detail::out_grad(y);
            auto gx = detail::in_grad(x);
            if (gy.empty() || gx.empty()) return;
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                T* din = gx.data() + nc * H * W;
                const T* dout = gy.data() + nc * out_h * out_w;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto& a = ty[oy];
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const auto& b = tx[ox];
                        const T d = dout[oy * out_w + ox];
                        din[a.i0 * W + b.i0] += d * T((1 - a.frac) * (1 - b.frac));
                        din[a.i0 * W + b.i1] += d * T((1 - a.frac) * b.frac);
                        din[a.i1 * W + b.i0] += d * T(a.frac * (1 - b.frac));
                        din[a.i1 * W + b.i1] += d * T(a.frac * b.frac);
                    }
                }
            }
        });
    }
    return y;
}

}  // namespace waca
