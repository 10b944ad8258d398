#pragma once

#include <complex>
#include <numbers>

#include "json.hpp"
#include "waca/ops.hpp"

namespace waca {

struct LossConfig {
    double w_ssim = 1.0;
    double w_huber = 1.0;
    double w_ffl = 1.0;
    double huber_delta = 1.0;  // millivolts
    std::size_t ssim_window = 7;
    double ssim_sigma = 1.5;
    double ffl_alpha = 1.0;

    void validate() const {
        if (w_ssim < 0 || w_huber < 0 || w_ffl < 0) throw ConfigError("loss: weights must be nonnegative");
        if (w_ssim == 0 && w_huber == 0 && w_ffl == 0) throw ConfigError("loss: at least one weight must be positive");
        if (!(huber_delta > 0)) throw ConfigError("loss: huber_delta must be positive");
        if (ssim_window == 0 || ssim_window % 2 == 0) throw ConfigError("loss: ssim_window must be odd");
        if (!(ssim_sigma > 0)) throw ConfigError("loss: ssim_sigma must be positive");
        if (!(ffl_alpha >= 0)) throw ConfigError("loss: ffl_alpha must be nonnegative");
    }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
    j = {{"w_ssim", c.w_ssim},       {"w_huber", c.w_huber},         {"w_ffl", c.w_ffl},
         {"huber_delta", c.huber_delta}, {"ssim_window", c.ssim_window}, {"ffl_alpha", c.ffl_alpha}};
}
inline void from_json(const nlohmann::json& j, LossConfig& c) {
    c.w_ssim = j.value("w_ssim", c.w_ssim);
    c.w_huber = j.value("w_huber", c.w_huber);
    c.w_ffl = j.value("w_ffl", c.w_ffl);
    c.huber_delta = j.value("huber_delta", c.huber_delta);
    c.ssim_window = j.value("ssim_window", c.ssim_window);
    c.ffl_alpha = j.value("ffl_alpha", c.ffl_alpha);
}

// Mean over all elements of the Huber penalty on pred - target.
template <class T>
Tensor<T> huber_loss(const Tensor<T>& pred, const Tensor<T>& target, T delta) {
    detail::require_same(pred.shape(), target.shape(), "huber_loss");
    const std::size_t n = pred.numel();
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T e = pred[i] - target[i];
        const T a = std::abs(e);
        acc += a <= delta ? T(0.5) * e * e : delta * (a - T(0.5) * delta);
    }
    Tensor<T> y = Tensor<T>::scalar(acc / static_cast<T>(n));
    if (auto* tape = detail::tape_for(pred, target)) {
        y.set_requires_grad();
        tape->record([pred, target, y, delta, n] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            auto gp = detail::in_grad(pred);
            auto gt = detail::in_grad(target);
            const T scale = gy[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const T e = pred[i] - target[i];
                const T d = std::clamp(e, -delta, delta) * scale;
                if (!gp.empty()) gp[i] += d;
                if (!gt.empty()) gt[i] -= d;
            }
        });
    }
    return y;
}

namespace detail {

// Unit-sum 2-D Gaussian window as a depthwise kernel [C,1,k,k].
template <class T>
Tensor<T> gaussian_window(std::size_t channels, std::size_t k, double sigma) {
    std::vector<double> g(k);
    double total = 0.0;
    const double c = (static_cast<double>(k) - 1.0) / 2.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double d = static_cast<double>(i) - c;
        g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        total += g[i];
    }
    for (auto& v : g) v /= total;
    Tensor<T> w({channels, 1, k, k});
    for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) w.mutable_ptr()[(ch * k + i) * k + j] = static_cast<T>(g[i] * g[j]);
    return w;
}

}  // namespace detail

// 1 - mean local SSIM with a Gaussian window (valid positions only). The
// dynamic range is the largest per-map target range in the batch, floored at 1.
template <class T>
Tensor<T> ssim_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg = {}) {
    detail::require_same(pred.shape(), target.shape(), "ssim_loss");
    detail::require_rank(pred.shape(), 4, "ssim_loss", "pred");
    const std::size_t N = pred.dim(0), C = pred.dim(1), H = pred.dim(2), W = pred.dim(3);
    const std::size_t k = cfg.ssim_window;
    if (H < k || W < k) {
        throw DimensionError("ssim_loss: maps " + shape_str(pred.shape()) + " smaller than the " + std::to_string(k) +
                             "x" + std::to_string(k) + " window");
    }
    double range = 0.0;
    for (std::size_t m = 0; m < N * C; ++m) {
        const T* t = target.ptr() + m * H * W;
        const auto [lo, hi] = std::minmax_element(t, t + H * W);
        range = std::max(range, static_cast<double>(*hi - *lo));
    }
    range = std::max(range, 1.0);
    const T c1 = static_cast<T>((0.01 * range) * (0.01 * range));
    const T c2 = static_cast<T>((0.03 * range) * (0.03 * range));

    const Tensor<T> win = detail::gaussian_window<T>(C, k, cfg.ssim_sigma);
    const Conv2dOptions dw{.stride = 1, .padding = 0, .groups = C};
    const Tensor<T> none;
    auto blur = [&](const Tensor<T>& v) { return conv2d(v, win, none, dw); };

    const Tensor<T> mu_p = blur(pred);
    const Tensor<T> mu_t = blur(target);
    const Tensor<T> mu_pp = square(mu_p);
    const Tensor<T> mu_tt = square(mu_t);
    const Tensor<T> mu_pt = mul(mu_p, mu_t);
    const Tensor<T> var_p = sub(blur(square(pred)), mu_pp);
    const Tensor<T> var_t = sub(blur(square(target)), mu_tt);
    const Tensor<T> cov = sub(blur(mul(pred, target)), mu_pt);

    const Tensor<T> num = mul(affine(mu_pt, T(2), c1), affine(cov, T(2), c2));
    const Tensor<T> den = mul(affine(add(mu_pp, mu_tt), T(1), c1), affine(add(var_p, var_t), T(1), c2));
    return affine(mean(div(num, den)), T(-1), T(1));
}

namespace detail {

// Orthonormal DFT matrix of size n, row k = frequency.
inline std::vector<std::complex<double>> dft_matrix(std::size_t n) {
    std::vector<std::complex<double>> f(n * n);
    const double norm = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t x = 0; x < n; ++x) {
            const double ang = -2.0 * std::numbers::pi * static_cast<double>((k * x) % n) / static_cast<double>(n);
            f[k * n + x] = std::polar(norm, ang);
        }
    return f;
}

// out = Fh * in * Fw^T for an H x W complex plane (Fh, Fw symmetric).
inline void dft2(const std::vector<std::complex<double>>& fh, const std::vector<std::complex<double>>& fw,
                 std::size_t H, std::size_t W, const std::complex<double>* in, std::complex<double>* out,
                 bool adjoint) {
    std::vector<std::complex<double>> tmp(H * W);
    auto coef = [adjoint](std::complex<double> c) { return adjoint ? std::conj(c) : c; };
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t v = 0; v < W; ++v) {
            std::complex<double> acc{};
            for (std::size_t j = 0; j < W; ++j) acc += in[i * W + j] * coef(fw[v * W + j]);
            tmp[i * W + v] = acc;
        }
    for (std::size_t u = 0; u < H; ++u)
        for (std::size_t v = 0; v < W; ++v) {
            std::complex<double> acc{};
            for (std::size_t i = 0; i < H; ++i) acc += coef(fh[u * H + i]) * tmp[i * W + v];
            out[u * W + v] = acc;
        }
}

}  // namespace detail

// Focal frequency loss: per map, mean over frequencies of w * |D|^2 where D
// is the orthonormal 2-D DFT of pred - target and w = |D|^alpha / max|D|^alpha.
// The weight is differentiated through (not treated as a constant). Averaged
// over all N*C maps.
template <class T>
Tensor<T> ffl_loss(const Tensor<T>& pred, const Tensor<T>& target, double alpha = 1.0) {
    detail::require_same(pred.shape(), target.shape(), "ffl_loss");
    detail::require_rank(pred.shape(), 4, "ffl_loss", "pred");
    const std::size_t maps = pred.dim(0) * pred.dim(1), H = pred.dim(2), W = pred.dim(3), K = H * W;
    const auto fh = detail::dft_matrix(H);
    const auto fw = detail::dft_matrix(W);
    std::vector<std::complex<double>> spec(maps * K);
    std::vector<double> peak(maps, 0.0);
    std::vector<std::size_t> argpeak(maps, 0);
    double total = 0.0;
    {
        std::vector<std::complex<double>> diff(K);
        for (std::size_t m = 0; m < maps; ++m) {
            for (std::size_t i = 0; i < K; ++i)
                diff[i] = static_cast<double>(pred[m * K + i]) - static_cast<double>(target[m * K + i]);
            detail::dft2(fh, fw, H, W, diff.data(), spec.data() + m * K, false);
            for (std::size_t i = 0; i < K; ++i) {
                const double a = std::abs(spec[m * K + i]);
                if (a > peak[m]) {
                    peak[m] = a;
                    argpeak[m] = i;
                }
            }
            if (peak[m] == 0.0) continue;
            double acc = 0.0;
            for (std::size_t i = 0; i < K; ++i) acc += std::pow(std::abs(spec[m * K + i]), alpha + 2.0);
            total += acc / (static_cast<double>(K) * std::pow(peak[m], alpha));
        }
    }
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(maps)));
    if (auto* tape = detail::tape_for(pred, target)) {
        y.set_requires_grad();
        tape->record([=] {
            auto gy = detail::out_grad(y);
            if (gy.empty()) return;
            auto gp = detail::in_grad(pred);
            auto gt = detail::in_grad(target);
            const double outer = static_cast<double>(gy[0]) / static_cast<double>(maps);
            std::vector<std::complex<double>> g(K), back(K);
            for (std::size_t m = 0; m < maps; ++m) {
                const double M = peak[m];
                if (M == 0.0) continue;
                const auto* D = spec.data() + m * K;
                const double scale = outer / (static_cast<double>(K) * std::pow(M, alpha));
                double mass = 0.0;
                for (std::size_t i = 0; i < K; ++i) mass += std::pow(std::abs(D[i]), alpha + 2.0);
                for (std::size_t i = 0; i < K; ++i) {
                    const double a = std::abs(D[i]);
                    double da = scale * (alpha + 2.0) * std::pow(a, alpha + 1.0);
                    if (i == argpeak[m]) da -= scale * alpha * mass / M;
                    g[i] = a > 0.0 ? da * D[i] / a : std::complex<double>{};
                }
                detail::dft2(fh, fw, H, W, g.data(), back.data(), true);
                for (std::size_t i = 0; i < K; ++i) {
                    const T d = static_cast<T>(back[i].real());
                    if (!gp.empty()) gp[m * K + i] += d;
                    if (!gt.empty()) gt[m * K + i] -= d;
                }
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> composite_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg = {}) {
    cfg.validate();
    detail::require_same(pred.shape(), target.shape(), "composite_loss");
    Tensor<T> total;
    auto accumulate = [&](const Tensor<T>& term, double w) {
        const Tensor<T> weighted = affine(term, static_cast<T>(w), T(0));
        total = total.empty() ? weighted : add(total, weighted);
    };
    if (cfg.w_ssim > 0) accumulate(ssim_loss(pred, target, cfg), cfg.w_ssim);
    if (cfg.w_huber > 0) accumulate(huber_loss(pred, target, static_cast<T>(cfg.huber_delta)), cfg.w_huber);
    if (cfg.w_ffl > 0) accumulate(ffl_loss(pred, target, cfg.ffl_alpha), cfg.w_ffl);
    return total;
}

}  // namespace waca
