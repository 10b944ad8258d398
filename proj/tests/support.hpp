#pragma once

// Independent reference implementations used as test oracles. None of these
// call into the library code they check.

#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <vector>

#include "waca/waca.hpp"

namespace oracle {

using waca::Tensor;

inline Tensor<double> random_tensor(waca::Shape shape, waca::Rng& rng, double lo = -1.0, double hi = 1.0) {
    return waca::uniform_tensor<double>(std::move(shape), lo, hi, rng);
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Six nested loops over the textbook definition of grouped cross-correlation.
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                             std::size_t stride, std::size_t pad, std::size_t groups) {
    const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t cin_g = Cin / groups, cout_g = Cout / groups;
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor<double> y({N, Cout, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t oc = 0; oc < Cout; ++oc)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    double acc = b.empty() ? 0.0 : b[oc];
                    const std::size_t g = oc / cout_g;
                    for (std::size_t icg = 0; icg < cin_g; ++icg)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W))
                                    continue;
                                acc += x.at(n, g * cin_g + icg, static_cast<std::size_t>(iy),
                                            static_cast<std::size_t>(ix)) *
                                       w.at(oc, icg, ky, kx);
                            }
                    y.mutable_ptr()[((n * Cout + oc) * Ho + oy) * Wo + ox] = acc;
                }
    return y;
}

inline Tensor<double> linear(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
    const std::size_t N = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);
    Tensor<double> y({N, Cout});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < Cout; ++o) {
            double acc = b[o];
            for (std::size_t i = 0; i < Cin; ++i) acc += x[n * Cin + i] * w[o * Cin + i];
            y.mutable_ptr()[n * Cout + o] = acc;
        }
    return y;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Per-(n,c) vectors from a [N,C,H,W] tensor.
inline std::vector<double> plane(const Tensor<double>& x, std::size_t n, std::size_t c) {
    const std::size_t HW = x.dim(2) * x.dim(3);
    const double* p = x.ptr() + (n * x.dim(1) + c) * HW;
    return {p, p + HW};
}

inline std::vector<std::vector<double>> gap(const Tensor<double>& x) {
    std::vector<std::vector<double>> s(x.dim(0), std::vector<double>(x.dim(1)));
    for (std::size_t n = 0; n < x.dim(0); ++n)
        for (std::size_t c = 0; c < x.dim(1); ++c) {
            double acc = 0.0;
            for (double v : plane(x, n, c)) acc += v;
            s[n][c] = acc / static_cast<double>(x.dim(2) * x.dim(3));
        }
    return s;
}

inline std::vector<std::vector<double>> gmp(const Tensor<double>& x) {
    std::vector<std::vector<double>> s(x.dim(0), std::vector<double>(x.dim(1)));
    for (std::size_t n = 0; n < x.dim(0); ++n)
        for (std::size_t c = 0; c < x.dim(1); ++c) {
            double m = -INFINITY;
            for (double v : plane(x, n, c)) m = std::max(m, v);
            s[n][c] = m;
        }
    return s;
}

// FC2(ReLU(FC1(s))) with scalar loops.
inline std::vector<double> mlp(const std::vector<double>& s, const waca::ChannelAttnParams<double>& p) {
    const std::size_t C = s.size(), h = p.fc1_w.dim(0);
    std::vector<double> hid(h), out(C);
    for (std::size_t j = 0; j < h; ++j) {
        double acc = p.fc1_b[j];
        for (std::size_t c = 0; c < C; ++c) acc += p.fc1_w[j * C + c] * s[c];
        hid[j] = std::max(0.0, acc);
    }
    for (std::size_t c = 0; c < C; ++c) {
        double acc = p.fc2_b[c];
        for (std::size_t j = 0; j < h; ++j) acc += p.fc2_w[c * h + j] * hid[j];
        out[c] = acc;
    }
    return out;
}

inline Tensor<double> scale_channels(const Tensor<double>& x, const std::vector<std::vector<double>>& g) {
    Tensor<double> y = x.clone();
    const std::size_t HW = x.dim(2) * x.dim(3);
    for (std::size_t n = 0; n < x.dim(0); ++n)
        for (std::size_t c = 0; c < x.dim(1); ++c)
            for (std::size_t i = 0; i < HW; ++i) y.mutable_ptr()[(n * x.dim(1) + c) * HW + i] *= g[n][c];
    return y;
}

struct WacaOracle {
    std::vector<std::vector<double>> a1, a2, fused;
    Tensor<double> y;
};

// Both WACA variants from the defining equations.
inline WacaOracle waca(const Tensor<double>& x, const waca::ChannelAttnParams<double>& p, double alpha, bool cbam) {
    const std::size_t N = x.dim(0), C = x.dim(1);
    WacaOracle o;
    o.a1.assign(N, std::vector<double>(C));
    o.a2 = o.fused = o.a1;
    const auto s_avg = gap(x), s_max = gmp(x);
    for (std::size_t n = 0; n < N; ++n) {
        const auto m_avg = mlp(s_avg[n], p);
        const auto m_max = mlp(s_max[n], p);
        for (std::size_t c = 0; c < C; ++c) o.a1[n][c] = sigmoid(m_avg[c] + (cbam ? m_max[c] : 0.0));
    }
    std::vector<std::vector<double>> w1(N, std::vector<double>(C));
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) w1[n][c] = 1.0 - o.a1[n][c];
    const Tensor<double> xs = scale_channels(x, w1);
    const auto t_avg = gap(xs), t_max = gmp(xs);
    for (std::size_t n = 0; n < N; ++n) {
        std::vector<double> s(C);
        for (std::size_t c = 0; c < C; ++c) s[c] = t_avg[n][c] + (cbam ? t_max[n][c] : 0.0);
        const auto m = mlp(s, p);
        for (std::size_t c = 0; c < C; ++c) {
            o.a2[n][c] = sigmoid(m[c]);
            o.fused[n][c] = alpha * o.a1[n][c] + (1.0 - alpha) * o.a2[n][c];
        }
    }
    o.y = scale_channels(x, o.fused);
    return o;
}

// Per-pixel channel mean and max, stacked as two planes.
inline Tensor<double> channel_pool(const Tensor<double>& x) {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<double> y({N, 2, H, W});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                double s = 0.0, m = -INFINITY;
                for (std::size_t c = 0; c < C; ++c) {
                    s += x.at(n, c, i, j);
                    m = std::max(m, x.at(n, c, i, j));
                }
                y.mutable_ptr()[((n * 2 + 0) * H + i) * W + j] = s / static_cast<double>(C);
                y.mutable_ptr()[((n * 2 + 1) * H + i) * W + j] = m;
            }
    return y;
}

inline Tensor<double> spatial_attention(const Tensor<double>& x, const waca::SpatialAttnParams<double>& p) {
    const std::size_t k = p.conv_w.dim(2);
    const Tensor<double> m = conv2d(channel_pool(x), p.conv_w, p.conv_b, 1, (k - 1) / 2, 1);
    Tensor<double> y = x.clone();
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) y.mutable_ptr()[(n * C + c) * HW + i] *= sigmoid(m[n * HW + i]);
    return y;
}

inline Tensor<double> attention_gate(const Tensor<double>& g, const Tensor<double>& x,
                                     const waca::AttnGateParams<double>& p) {
    const Tensor<double> a = conv2d(g, p.wg_w, p.wg_b, 1, 0, 1);
    const Tensor<double> b = conv2d(x, p.wx_w, p.wx_b, 1, 0, 1);
    Tensor<double> inter(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) inter.mutable_ptr()[i] = std::max(0.0, a[i] + b[i]);
    const Tensor<double> psi = conv2d(inter, p.psi_w, p.psi_b, 1, 0, 1);
    Tensor<double> y = x.clone();
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) y.mutable_ptr()[(n * C + c) * HW + i] *= sigmoid(psi[n * HW + i]);
    return y;
}

// Dense Gaussian elimination with partial pivoting; A is row-major n x n.
inline std::vector<double> dense_solve(std::vector<double> A, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t piv = k;
        for (std::size_t r = k + 1; r < n; ++r)
            if (std::abs(A[r * n + k]) > std::abs(A[piv * n + k])) piv = r;
        if (piv != k) {
            for (std::size_t c = 0; c < n; ++c) std::swap(A[k * n + c], A[piv * n + c]);
            std::swap(b[k], b[piv]);
        }
        for (std::size_t r = k + 1; r < n; ++r) {
            const double f = A[r * n + k] / A[k * n + k];
            if (f == 0.0) continue;
            for (std::size_t c = k; c < n; ++c) A[r * n + c] -= f * A[k * n + c];
            b[r] -= f * b[k];
        }
    }
    std::vector<double> x(n);
    for (std::size_t k = n; k-- > 0;) {
        double acc = b[k];
        for (std::size_t c = k + 1; c < n; ++c) acc -= A[k * n + c] * x[c];
        x[k] = acc / A[k * n + k];
    }
    return x;
}

// Nodal voltages of every grid node from a dense stamp built directly from
// the grid description; pads are fixed rows V = vdd.
inline std::vector<double> dense_node_voltages(const waca::PdnGrid& g) {
    std::vector<std::size_t> offset{0};
    std::vector<std::size_t> rows, cols;
    for (const auto& l : g.layers) {
        rows.push_back((g.h - 1) / l.pitch + 1);
        cols.push_back((g.w - 1) / l.pitch + 1);
        offset.push_back(offset.back() + rows.back() * cols.back());
    }
    const std::size_t n = offset.back();
    std::vector<double> A(n * n, 0.0), b(n, 0.0);
    auto stamp = [&](std::size_t a, std::size_t c, double cond) {
        A[a * n + a] += cond;
        A[c * n + c] += cond;
        A[a * n + c] -= cond;
        A[c * n + a] -= cond;
    };
    auto fac = [](const std::vector<std::vector<double>>& f, std::size_t l, std::size_t k) {
        return f.empty() || f[l].empty() ? 1.0 : f[l][k];
    };
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        for (std::size_t r = 0; r < rows[l]; ++r)
            for (std::size_t c = 0; c < cols[l]; ++c) {
                const std::size_t k = r * cols[l] + c;
                const double s = g.layers[l].sheet_conductance;
                if (c + 1 < cols[l]) stamp(offset[l] + k, offset[l] + k + 1, s * fac(g.horizontal, l, k));
                if (r + 1 < rows[l]) stamp(offset[l] + k, offset[l] + k + cols[l], s * fac(g.vertical, l, k));
            }
        if (l == 0) continue;
        const std::size_t p = g.layers[l].pitch, pl = g.layers[l - 1].pitch;
        for (std::size_t r = 0; r < rows[l]; ++r)
            for (std::size_t c = 0; c < cols[l]; ++c) {
                const std::size_t k = r * cols[l] + c;
                const double f = fac(g.via, l - 1, k);
                if (f <= 0) continue;
                const std::size_t lower = offset[l - 1] + (r * p / pl) * cols[l - 1] + (c * p / pl);
                stamp(lower, offset[l] + k, g.via_conductance * f);
            }
    }
    for (std::size_t cell = 0; cell < g.h * g.w; ++cell) b[cell] -= g.current[cell];
    for (const auto& pad : g.pads) {
        const std::size_t p = g.layers[pad.layer].pitch;
        const std::size_t k = offset[pad.layer] + (pad.i / p) * cols[pad.layer] + pad.j / p;
        for (std::size_t c = 0; c < n; ++c) A[k * n + c] = 0.0;
        A[k * n + k] = 1.0;
        b[k] = g.vdd;
    }
    return dense_solve(std::move(A), std::move(b));
}

inline std::vector<double> dense_drop_mv(const waca::PdnGrid& g) {
    const auto V = dense_node_voltages(g);
    std::vector<double> out(g.h * g.w);
    for (std::size_t cell = 0; cell < g.h * g.w; ++cell) out[cell] = (g.vdd - V[cell]) * 1000.0;
    return out;
}

// Small random multi-layer grid for solver checks. Loads are up to 2 mA per
// cell, which keeps the operating point physical (drop well below vdd).
inline waca::PdnGrid random_small_grid(waca::Rng& rng, std::size_t h, std::size_t w, std::size_t layers) {
    waca::PdnGrid g;
    g.h = h;
    g.w = w;
    std::size_t pitch = 1;
    double sheet = rng.uniform(0.5, 2.0);
    for (std::size_t l = 0; l < layers; ++l) {
        g.layers.push_back({pitch, sheet});
        pitch *= 2;
        sheet *= rng.uniform(2.0, 6.0);
    }
    g.via_conductance = rng.uniform(1.0, 10.0);
    g.horizontal.resize(layers);
    g.vertical.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t nodes = ((h - 1) / g.layers[l].pitch + 1) * ((w - 1) / g.layers[l].pitch + 1);
        for (std::size_t k = 0; k < nodes; ++k) {
            g.horizontal[l].push_back(rng.uniform(0.3, 1.5));
            g.vertical[l].push_back(rng.uniform(0.3, 1.5));
        }
    }
    g.via.resize(layers ? layers - 1 : 0);
    for (std::size_t l = 1; l < layers; ++l) {
        const std::size_t nodes = ((h - 1) / g.layers[l].pitch + 1) * ((w - 1) / g.layers[l].pitch + 1);
        for (std::size_t k = 0; k < nodes; ++k) g.via[l - 1].push_back(rng.uniform(0.5, 1.5));
    }
    const std::size_t top = layers - 1, p = g.layers[top].pitch;
    const std::size_t npads = static_cast<std::size_t>(rng.integer(1, 3));
    for (std::size_t k = 0; k < npads; ++k) {
        const waca::PadNode pad{top, static_cast<std::size_t>(rng.integer(0, static_cast<long>((h - 1) / p))) * p,
                                static_cast<std::size_t>(rng.integer(0, static_cast<long>((w - 1) / p))) * p};
        if (std::find(g.pads.begin(), g.pads.end(), pad) == g.pads.end()) g.pads.push_back(pad);
    }
    g.current.resize(h * w);
    for (auto& c : g.current) c = rng.uniform() < 0.6 ? rng.uniform(0.0, 0.002) : 0.0;
    return g;
}

// Direct 2-D DFT summation, orthonormal scaling.
inline std::vector<std::complex<double>> dft2(const std::vector<double>& x, std::size_t H, std::size_t W) {
    std::vector<std::complex<double>> out(H * W);
    const double norm = 1.0 / std::sqrt(static_cast<double>(H * W));
    for (std::size_t u = 0; u < H; ++u)
        for (std::size_t v = 0; v < W; ++v) {
            std::complex<double> acc{};
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    const double ang = -2.0 * std::numbers::pi *
                                       (static_cast<double>(u * i) / static_cast<double>(H) +
                                        static_cast<double>(v * j) / static_cast<double>(W));
                    acc += x[i * W + j] * std::polar(1.0, ang);
                }
            out[u * W + v] = acc * norm;
        }
    return out;
}

// Focal frequency loss of one map pair by direct summation, alpha = 1 style
// weights |D|^alpha / max |D|^alpha.
inline double ffl(const std::vector<double>& pred, const std::vector<double>& target, std::size_t H, std::size_t W,
                  double alpha) {
    std::vector<double> d(H * W);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = pred[i] - target[i];
    const auto D = dft2(d, H, W);
    double peak = 0.0;
    for (const auto& z : D) peak = std::max(peak, std::abs(z));
    if (peak == 0.0) return 0.0;
    double acc = 0.0;
    for (const auto& z : D) acc += std::pow(std::abs(z) / peak, alpha) * std::norm(z);
    return acc / static_cast<double>(H * W);
}

// Two-pass per-channel population mean/std over a set of [C,H,W] tensors.
inline std::pair<std::vector<double>, std::vector<double>> two_pass_stats(const std::vector<Tensor<double>>& xs) {
    const std::size_t C = xs[0].dim(0);
    std::vector<double> mean(C, 0.0), var(C, 0.0), count(C, 0.0);
    for (const auto& x : xs)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t HW = x.dim(1) * x.dim(2);
            for (std::size_t i = 0; i < HW; ++i) mean[c] += x[c * HW + i];
            count[c] += static_cast<double>(HW);
        }
    for (std::size_t c = 0; c < C; ++c) mean[c] /= count[c];
    for (const auto& x : xs)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t HW = x.dim(1) * x.dim(2);
            for (std::size_t i = 0; i < HW; ++i) var[c] += (x[c * HW + i] - mean[c]) * (x[c * HW + i] - mean[c]);
        }
    for (std::size_t c = 0; c < C; ++c) var[c] = std::sqrt(var[c] / count[c]);
    return {mean, var};
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheck {
    double max_rel_err = 0.0;  // max over tensors of ||analytic - numeric||_inf / ||numeric||_inf
    std::string worst;
};

// `loss` must build its forward pass from the current values of `params`
// and return a scalar. Inputs are perturbed in place and restored.
inline GradCheck check_gradients(const std::function<Tensor<double>()>& loss,
                                 std::vector<std::pair<std::string, Tensor<double>>> params, double h = 1e-5) {
    for (auto& [_, p] : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    waca::Tape<double> tape;
    {
        waca::TapeGuard<double> guard(tape);
        tape.backward(loss());
    }
    GradCheck out;
    for (auto& [name, p] : params) {
        const std::vector<double> analytic(p.grad().begin(), p.grad().end());
        double err = 0.0, scale = 0.0;
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double orig = values[i];
            values[i] = orig + h;
            const double up = loss().item();
            values[i] = orig - h;
            const double down = loss().item();
            values[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            err = std::max(err, std::abs(numeric - analytic[i]));
            scale = std::max(scale, std::abs(numeric));
        }
        const double rel = err / std::max(scale, 1e-12);
        if (rel >= out.max_rel_err) {
            out.max_rel_err = rel;
            out.worst = name;
        }
    }
    return out;
}

// Weighted sum of an output with a fixed random tensor, so every output
// element contributes a distinct gradient.
inline Tensor<double> probe_loss(const Tensor<double>& y, const Tensor<double>& weights) {
    return waca::sum(waca::mul(y, weights));
}

}  // namespace oracle
