#pragma once

// Channel and spatial attention: SE, CBAM channel attention, their
// weakness-aware two-stage extensions (WACA), CBAM spatial attention, the
// combined WAA module, and the skip-connection attention gate.

#include <optional>
#include <string>

#include "waca/ops.hpp"
#include "waca/random.hpp"

namespace waca {

enum class AttentionKind { none, se, cbam, waca_se, waca_cbam };

inline std::string to_string(AttentionKind k) {
    switch (k) {
        case AttentionKind::none: return "none";
        case AttentionKind::se: return "se";
        case AttentionKind::cbam: return "cbam";
        case AttentionKind::waca_se: return "waca_se";
        case AttentionKind::waca_cbam: return "waca_cbam";
    }
    return "none";
}

inline AttentionKind attention_kind_from_string(const std::string& s) {
    if (s == "none") return AttentionKind::none;
    if (s == "se") return AttentionKind::se;
    if (s == "cbam") return AttentionKind::cbam;
    if (s == "waca_se") return AttentionKind::waca_se;
    if (s == "waca_cbam") return AttentionKind::waca_cbam;
    throw ConfigError("unknown attention_kind '" + s + "' (expected none, se, cbam, waca_se, waca_cbam)");
}

inline bool is_waca(AttentionKind k) { return k == AttentionKind::waca_se || k == AttentionKind::waca_cbam; }
inline bool uses_spatial(AttentionKind k) { return k == AttentionKind::cbam || k == AttentionKind::waca_cbam; }

enum class PoolingMode { se, cbam };

struct FusionConfig {
    double alpha = 0.5;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("fusion: alpha must lie in [0, 1]");
    }
};

// Shared two-layer MLP C -> C/r -> C. Both WACA stages use the same instance.
template <class T>
struct ChannelAttnParams {
    Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;

    std::size_t channels() const { return fc2_w.dim(0); }
    std::size_t hidden() const { return fc1_w.dim(0); }

    static void check(std::size_t C, std::size_t r) {
        if (r == 0 || C % r != 0) {
            throw ConfigError("channel attention: reduction ratio " + std::to_string(r) + " must divide C = " +
                              std::to_string(C));
        }
    }

    static ChannelAttnParams zeros(std::size_t C, std::size_t r) {
        check(C, r);
        const std::size_t h = C / r;
        return {Tensor<T>({h, C}), Tensor<T>({h}), Tensor<T>({C, h}), Tensor<T>({C})};
    }

    static ChannelAttnParams create(ParamSet<T>& ps, const std::string& prefix, std::size_t C, std::size_t r,
                                    Rng& rng) {
        check(C, r);
        const std::size_t h = C / r;
        ChannelAttnParams p;
        p.fc1_w = ps.add(prefix + ".fc1.weight", trunc_normal<T>({h, C}, 0.02, rng));
        p.fc1_b = ps.add(prefix + ".fc1.bias", Tensor<T>({h}));
        p.fc2_w = ps.add(prefix + ".fc2.weight", trunc_normal<T>({C, h}, 0.02, rng));
        p.fc2_b = ps.add(prefix + ".fc2.bias", Tensor<T>({C}));
        return p;
    }

    std::size_t param_count() const { return fc1_w.numel() + fc1_b.numel() + fc2_w.numel() + fc2_b.numel(); }
};

template <class T>
struct SpatialAttnParams {
    Tensor<T> conv_w, conv_b;  // [1,2,k,k], [1]

    std::size_t kernel() const { return conv_w.dim(2); }

    static void check(std::size_t k) {
        if (k % 2 == 0) throw ConfigError("spatial attention: kernel size must be odd, got " + std::to_string(k));
    }

    static SpatialAttnParams zeros(std::size_t k = 7) {
        check(k);
        return {Tensor<T>({1, 2, k, k}), Tensor<T>({1})};
    }

    static SpatialAttnParams create(ParamSet<T>& ps, const std::string& prefix, std::size_t k, Rng& rng) {
        check(k);
        SpatialAttnParams p;
        p.conv_w = ps.add(prefix + ".weight", trunc_normal<T>({1, 2, k, k}, 0.02, rng));
        p.conv_b = ps.add(prefix + ".bias", Tensor<T>({1}));
        return p;
    }

    std::size_t param_count() const { return conv_w.numel() + conv_b.numel(); }
};

template <class T>
struct AttnGateParams {
    Tensor<T> wg_w, wg_b, wx_w, wx_b, psi_w, psi_b;

    static std::size_t intermediate(std::size_t cx) { return std::max<std::size_t>(1, (cx + 1) / 2); }

    static AttnGateParams zeros(std::size_t cg, std::size_t cx) {
        const std::size_t f = intermediate(cx);
        return {Tensor<T>({f, cg, 1, 1}), Tensor<T>({f}), Tensor<T>({f, cx, 1, 1}),
                Tensor<T>({f}),           Tensor<T>({1, f, 1, 1}), Tensor<T>({1})};
    }

    static AttnGateParams create(ParamSet<T>& ps, const std::string& prefix, std::size_t cg, std::size_t cx,
                                 Rng& rng) {
        const std::size_t f = intermediate(cx);
        AttnGateParams p;
        p.wg_w = ps.add(prefix + ".wg.weight", trunc_normal<T>({f, cg, 1, 1}, 0.02, rng));
        p.wg_b = ps.add(prefix + ".wg.bias", Tensor<T>({f}));
        p.wx_w = ps.add(prefix + ".wx.weight", trunc_normal<T>({f, cx, 1, 1}, 0.02, rng));
        p.wx_b = ps.add(prefix + ".wx.bias", Tensor<T>({f}));
        p.psi_w = ps.add(prefix + ".psi.weight", trunc_normal<T>({1, f, 1, 1}, 0.02, rng));
        p.psi_b = ps.add(prefix + ".psi.bias", Tensor<T>({1}));
        return p;
    }
};

// Per-invocation record of a channel attention pass. For SE-style pooling
// s1_max is empty; for single-stage kinds the stage-2 fields are empty and
// fused == a1.
template <class T>
struct AttentionState {
    Tensor<T> s1, s1_max, a1, w1, s2, a2, fused;
};

namespace detail {

template <class T>
void check_channels(const Tensor<T>& x, const ChannelAttnParams<T>& p, const char* op) {
    require_rank(x.shape(), 4, op, "x");
    if (x.dim(1) != p.channels()) {
        throw DimensionError(std::string(op) + ": x has " + std::to_string(x.dim(1)) +
                             " channels (axis 1) but attention params expect " + std::to_string(p.channels()));
    }
}

}  // namespace detail

// FC2(ReLU(FC1(s))) on a [N,C] descriptor.
template <class T>
Tensor<T> channel_mlp(const Tensor<T>& s, const ChannelAttnParams<T>& p) {
    return linear(relu(linear(s, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b);
}

template <class T>
Tensor<T> se_channel_gate(const Tensor<T>& x, const ChannelAttnParams<T>& p) {
    detail::check_channels(x, p, "se_channel_gate");
    return sigmoid(channel_mlp(global_avg_pool(x), p));
}

template <class T>
Tensor<T> cbam_channel_gate(const Tensor<T>& x, const ChannelAttnParams<T>& p) {
    detail::check_channels(x, p, "cbam_channel_gate");
    return sigmoid(add(channel_mlp(global_avg_pool(x), p), channel_mlp(global_max_pool(x), p)));
}

// Second WACA stage: re-gate the features left after suppressing the
// stage-1 winners by w1 = 1 - a1, with the stage-1 parameters.
template <class T>
Tensor<T> waca_stage2(const Tensor<T>& x, const Tensor<T>& a1, const ChannelAttnParams<T>& p, PoolingMode mode,
                      AttentionState<T>* state = nullptr) {
    detail::check_channels(x, p, "waca_stage2");
    const Tensor<T> w1 = affine(a1, T(-1), T(1));
    const Tensor<T> suppressed = scale_channels(x, w1);
    Tensor<T> s2 = mode == PoolingMode::se ? global_avg_pool(suppressed)
                                           : add(global_avg_pool(suppressed), global_max_pool(suppressed));
    Tensor<T> a2 = sigmoid(channel_mlp(s2, p));
    if (state) {
        state->w1 = w1;
        state->s2 = s2;
        state->a2 = a2;
    }
    return a2;
}

template <class T>
Tensor<T> waca_fuse(const Tensor<T>& a1, const Tensor<T>& a2, const FusionConfig& cfg) {
    cfg.validate();
    detail::require_same(a1.shape(), a2.shape(), "waca_fuse");
    const T alpha = static_cast<T>(cfg.alpha);
    return add(affine(a1, alpha, T(0)), affine(a2, T(1) - alpha, T(0)));
}

namespace detail {

template <class T>
std::pair<Tensor<T>, AttentionState<T>> waca_impl(const Tensor<T>& x, const ChannelAttnParams<T>& p,
                                                  const FusionConfig& cfg, PoolingMode mode, const char* op) {
    check_channels(x, p, op);
    AttentionState<T> st;
    st.s1 = global_avg_pool(x);
    Tensor<T> logits = channel_mlp(st.s1, p);
    if (mode == PoolingMode::cbam) {
        st.s1_max = global_max_pool(x);
        logits = add(logits, channel_mlp(st.s1_max, p));
    }
    st.a1 = sigmoid(logits);
    waca_stage2(x, st.a1, p, mode, &st);
    st.fused = waca_fuse(st.a1, st.a2, cfg);
    Tensor<T> y = scale_channels(x, st.fused);
    return {y, st};
}

}  // namespace detail

template <class T>
std::pair<Tensor<T>, AttentionState<T>> waca_se(const Tensor<T>& x, const ChannelAttnParams<T>& p,
                                                const FusionConfig& cfg = {}) {
    return detail::waca_impl(x, p, cfg, PoolingMode::se, "waca_se");
}

template <class T>
std::pair<Tensor<T>, AttentionState<T>> waca_cbam(const Tensor<T>& x, const ChannelAttnParams<T>& p,
                                                  const FusionConfig& cfg = {}) {
    return detail::waca_impl(x, p, cfg, PoolingMode::cbam, "waca_cbam");
}

// Single-stage baselines, recalibrated output.
template <class T>
Tensor<T> se_attention(const Tensor<T>& x, const ChannelAttnParams<T>& p) {
    return scale_channels(x, se_channel_gate(x, p));
}

template <class T>
Tensor<T> cbam_channel_attention(const Tensor<T>& x, const ChannelAttnParams<T>& p) {
    return scale_channels(x, cbam_channel_gate(x, p));
}

// m = sigmoid(conv_kxk([mean_c(x); max_c(x)])), y = x * m.
template <class T>
Tensor<T> spatial_attention(const Tensor<T>& x, const SpatialAttnParams<T>& p) {
    const std::size_t k = p.kernel();
    const Tensor<T> m =
        sigmoid(conv2d(channel_pool_spatial(x), p.conv_w, p.conv_b, {.stride = 1, .padding = (k - 1) / 2}));
    return scale_spatial(x, m);
}

// Weakness-aware attention: WACA channel stage followed by spatial attention.
template <class T>
std::pair<Tensor<T>, AttentionState<T>> waa(const Tensor<T>& x, const ChannelAttnParams<T>& chan,
                                            const SpatialAttnParams<T>& spat, const FusionConfig& cfg = {},
                                            PoolingMode mode = PoolingMode::cbam) {
    auto [y, st] = mode == PoolingMode::cbam ? waca_cbam(x, chan, cfg) : waca_se(x, chan, cfg);
    return {spatial_attention(y, spat), st};
}

// Skip-connection gate: beta = sigmoid(psi(ReLU(Wg g + Wx x))), returns x * beta.
template <class T>
Tensor<T> attention_gate(const Tensor<T>& g, const Tensor<T>& x, const AttnGateParams<T>& p,
                         Tensor<T>* coefficients = nullptr) {
    detail::require_rank(g.shape(), 4, "attention_gate", "g");
    detail::require_rank(x.shape(), 4, "attention_gate", "x");
    if (g.dim(0) != x.dim(0) || g.dim(2) != x.dim(2) || g.dim(3) != x.dim(3)) {
        throw DimensionError("attention_gate: gating signal " + shape_str(g.shape()) + " and skip features " +
                             shape_str(x.shape()) + " are not spatially aligned (axes 0,2,3)");
    }
    const Tensor<T> inter = relu(add(conv2d(g, p.wg_w, p.wg_b), conv2d(x, p.wx_w, p.wx_b)));
    const Tensor<T> beta = sigmoid(conv2d(inter, p.psi_w, p.psi_b));
    if (coefficients) *coefficients = beta;
    return scale_spatial(x, beta);
}

// Parameters one attention block of the given kind instantiates; used for
// the parameter-parity checks across the ablation family.
template <class T = double>
std::size_t attention_param_count(AttentionKind kind, std::size_t C, std::size_t r, std::size_t spatial_k = 7) {
    if (kind == AttentionKind::none) return 0;
    ParamSet<T> ps;
    Rng rng(0);
    ChannelAttnParams<T>::create(ps, "attn", C, r, rng);
    if (uses_spatial(kind)) SpatialAttnParams<T>::create(ps, "attn.spatial", spatial_k, rng);
    return ps.count();
}

}  // namespace waca
