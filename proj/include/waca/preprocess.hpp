#pragma once

#include <cmath>
#include <numbers>
#include <ostream>
#include <vector>

#include "json.hpp"
#include "waca/tensor.hpp"

namespace waca {

// Per-channel z-score statistics of the training features.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;
    std::vector<std::size_t> floored;  // channels whose std was floored

    std::size_t channels() const { return mean.size(); }
};

inline void to_json(nlohmann::json& j, const NormStats& s) { j = {{"mean", s.mean}, {"std", s.std}}; }
inline void from_json(const nlohmann::json& j, NormStats& s) {
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    if (s.mean.size() != s.std.size()) throw FormatError("norm stats: mean/std length mismatch");
}

inline constexpr double kStdFloor = 1e-8;

// Streaming (Chan et al. pairwise merge) mean/variance over every pixel of
// every case; features are [C,H,W] each.
template <class T>
NormStats compute_norm_stats(const std::vector<Tensor<T>>& features, std::ostream* warn = nullptr) {
    if (features.empty()) throw ConfigError("compute_norm_stats: empty training set");
    const std::size_t C = features.front().dim(0);
    std::vector<double> mean(C, 0.0), m2(C, 0.0);
    std::vector<double> count(C, 0.0);
    for (const auto& f : features) {
        if (f.rank() != 3 || f.dim(0) != C) {
            throw DimensionError("compute_norm_stats: expected [" + std::to_string(C) + ",H,W], got " +
                                 shape_str(f.shape()));
        }
        const std::size_t HW = f.dim(1) * f.dim(2);
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = f.ptr() + c * HW;
            double bmean = 0.0;
            for (std::size_t i = 0; i < HW; ++i) bmean += static_cast<double>(p[i]);
            bmean /= static_cast<double>(HW);
            double bm2 = 0.0;
            for (std::size_t i = 0; i < HW; ++i) {
                const double d = static_cast<double>(p[i]) - bmean;
                bm2 += d * d;
            }
            const double n_a = count[c], n_b = static_cast<double>(HW), n = n_a + n_b;
            const double delta = bmean - mean[c];
            mean[c] += delta * n_b / n;
            m2[c] += bm2 + delta * delta * n_a * n_b / n;
            count[c] = n;
        }
    }
    NormStats s;
    s.mean = mean;
    s.std.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
        s.std[c] = std::sqrt(m2[c] / count[c]);
        if (!(s.std[c] >= kStdFloor)) {
            s.std[c] = kStdFloor;
            s.floored.push_back(c);
            if (warn) *warn << "warning: feature channel " << c << " is constant; std floored at " << kStdFloor << "\n";
        }
    }
    return s;
}

// Works on [C,H,W] or [N,C,H,W].
template <class T>
Tensor<T> apply_zscore(const Tensor<T>& features, const NormStats& stats) {
    if (features.rank() != 3 && features.rank() != 4) {
        throw DimensionError("apply_zscore: expected rank 3 or 4, got " + shape_str(features.shape()));
    }
    const std::size_t caxis = features.rank() - 3;
    const std::size_t C = features.dim(caxis);
    if (C != stats.channels()) {
        throw DimensionError("apply_zscore: features have " + std::to_string(C) + " channels but stats have " +
                             std::to_string(stats.channels()));
    }
    const std::size_t N = caxis ? features.dim(0) : 1;
    const std::size_t HW = features.dim(caxis + 1) * features.dim(caxis + 2);
    Tensor<T> out(features.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T* src = features.ptr() + (n * C + c) * HW;
            T* dst = out.mutable_ptr() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i)
                dst[i] = static_cast<T>((static_cast<double>(src[i]) - stats.mean[c]) / stats.std[c]);
        }
    return out;
}

// Dihedral group of the square acting on the last two axes:
// 0 identity, 1 horizontal flip, 2 vertical flip, 3 rot90, 4 rot180,
// 5 rot270, 6 transpose, 7 anti-transpose.
inline constexpr int kDihedralCodes = 8;

inline bool dihedral_swaps_axes(int code) { return code == 3 || code == 5 || code == 6 || code == 7; }

template <class T>
Tensor<T> dihedral(const Tensor<T>& x, int code) {
    if (code < 0 || code >= kDihedralCodes) throw ConfigError("dihedral: code must be in 0..7");
    if (x.rank() < 2) throw DimensionError("dihedral: need at least two axes");
    const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    if (dihedral_swaps_axes(code) && H != W) {
        throw DimensionError("dihedral: rotation/transpose code " + std::to_string(code) + " needs square maps, got " +
                             shape_str(x.shape()));
    }
    const std::size_t planes = x.numel() / (H * W);
    Tensor<T> y(x.shape());
    for (std::size_t p = 0; p < planes; ++p) {
        const T* in = x.ptr() + p * H * W;
        T* out = y.mutable_ptr() + p * H * W;
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                std::size_t si = i, sj = j;
                switch (code) {
                    case 1: sj = W - 1 - j; break;
                    case 2: si = H - 1 - i; break;
                    case 3: si = j; sj = W - 1 - i; break;
                    case 4: si = H - 1 - i; sj = W - 1 - j; break;
                    case 5: si = H - 1 - j; sj = i; break;
                    case 6: si = j; sj = i; break;
                    case 7: si = H - 1 - j; sj = W - 1 - i; break;
                    default: break;
                }
                out[i * W + j] = in[si * W + sj];
            }
    }
    return y;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> dihedral_augment(const Tensor<T>& features, const Tensor<T>& target, int code) {
    return {dihedral(features, code), dihedral(target, code)};
}

namespace detail {

inline double lanczos3(double x) {
    x = std::abs(x);
    if (x < 1e-12) return 1.0;
    if (x >= 3.0) return 0.0;
    const double px = std::numbers::pi * x;
    return 3.0 * std::sin(px) * std::sin(px / 3.0) / (px * px);
}

struct Taps {
    std::vector<std::vector<double>> weights;
    std::vector<std::vector<std::size_t>> index;
};

inline Taps lanczos_taps(std::size_t in, std::size_t out) {
    Taps t;
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    const double stretch = std::max(1.0, scale);
    const double support = 3.0 * stretch;
    t.weights.resize(out);
    t.index.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
        const double centre = (static_cast<double>(o) + 0.5) * scale - 0.5;
        const auto lo = static_cast<long>(std::floor(centre - support)) + 1;
        const auto hi = static_cast<long>(std::ceil(centre + support)) - 1;
        double total = 0.0;
        for (long i = lo; i <= hi; ++i) {
            const double w = lanczos3((static_cast<double>(i) - centre) / stretch);
            if (w == 0.0) continue;
            const long clamped = std::clamp<long>(i, 0, static_cast<long>(in) - 1);
            t.weights[o].push_back(w);
            t.index[o].push_back(static_cast<std::size_t>(clamped));
            total += w;
        }
        for (auto& w : t.weights[o]) w /= total;
    }
    return t;
}

}  // namespace detail

// Separable Lanczos-3 resampling of the last two axes, edge-clamped. Used only
// on data (not differentiable); identical size is an exact copy.
template <class T>
Tensor<T> resize_lanczos(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() < 2) throw DimensionError("resize_lanczos: need at least two axes");
    if (out_h == 0 || out_w == 0) throw DimensionError("resize_lanczos: target size must be positive");
    const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    if (H == out_h && W == out_w) return x.clone();
    Shape shape = x.shape();
    shape[shape.size() - 2] = out_h;
    shape[shape.size() - 1] = out_w;
    const auto ty = detail::lanczos_taps(H, out_h);
    const auto tx = detail::lanczos_taps(W, out_w);
    const std::size_t planes = x.numel() / (H * W);
    Tensor<T> y(shape);
    std::vector<double> rows(H * out_w);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* in = x.ptr() + p * H * W;
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t o = 0; o < out_w; ++o) {
                double acc = 0.0;
                for (std::size_t k = 0; k < tx.index[o].size(); ++k) acc += tx.weights[o][k] * in[i * W + tx.index[o][k]];
                rows[i * out_w + o] = acc;
            }
        T* out = y.mutable_ptr() + p * out_h * out_w;
        for (std::size_t o = 0; o < out_h; ++o)
            for (std::size_t j = 0; j < out_w; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < ty.index[o].size(); ++k)
                    acc += ty.weights[o][k] * rows[ty.index[o][k] * out_w + j];
                out[o * out_w + j] = static_cast<T>(acc);
            }
    }
    return y;
}

}  // namespace waca
