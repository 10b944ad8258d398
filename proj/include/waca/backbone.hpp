#pragma once

// ConvNeXtV2-style blocks, CNX+attention composite blocks, and the
// attention-gated U-Net used as the IR-drop surrogate.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "json.hpp"
#include "waca/attention.hpp"
#include "waca/preprocess.hpp"
#include "waca/wtns.hpp"

namespace waca {

template <class T>
struct CnxBlockParams {
    Tensor<T> dw_w, dw_b;      // [C,1,7,7], [C]
    Tensor<T> ln_g, ln_b;      // [C]
    Tensor<T> pw1_w, pw1_b;    // [4C,C,1,1], [4C]
    Tensor<T> grn_g, grn_b;    // [4C]
    Tensor<T> pw2_w, pw2_b;    // [C,4C,1,1], [C]

    std::size_t channels() const { return dw_w.dim(0); }

    static CnxBlockParams zeros(std::size_t C) {
        return {Tensor<T>({C, 1, 7, 7}), Tensor<T>({C}),    Tensor<T>({C}),        Tensor<T>({C}),
                Tensor<T>({4 * C, C, 1, 1}), Tensor<T>({4 * C}), Tensor<T>({4 * C}), Tensor<T>({4 * C}),
                Tensor<T>({C, 4 * C, 1, 1}), Tensor<T>({C})};
    }

    static CnxBlockParams create(ParamSet<T>& ps, const std::string& prefix, std::size_t C, Rng& rng) {
        CnxBlockParams p;
        p.dw_w = ps.add(prefix + ".dw.weight", trunc_normal<T>({C, 1, 7, 7}, 0.02, rng));
        p.dw_b = ps.add(prefix + ".dw.bias", Tensor<T>({C}));
        p.ln_g = ps.add(prefix + ".ln.gamma", Tensor<T>({C}, T(1)));
        p.ln_b = ps.add(prefix + ".ln.beta", Tensor<T>({C}));
        p.pw1_w = ps.add(prefix + ".pw1.weight", trunc_normal<T>({4 * C, C, 1, 1}, 0.02, rng));
        p.pw1_b = ps.add(prefix + ".pw1.bias", Tensor<T>({4 * C}));
        // GRN starts as the identity (gamma = beta = 0), as in ConvNeXtV2.
        p.grn_g = ps.add(prefix + ".grn.gamma", Tensor<T>({4 * C}));
        p.grn_b = ps.add(prefix + ".grn.beta", Tensor<T>({4 * C}));
        p.pw2_w = ps.add(prefix + ".pw2.weight", trunc_normal<T>({C, 4 * C, 1, 1}, 0.02, rng));
        p.pw2_b = ps.add(prefix + ".pw2.bias", Tensor<T>({C}));
        return p;
    }
};

// x + pw2(GRN(GELU(pw1(LN(dwconv7x7(x))))))
template <class T>
Tensor<T> cnx_block(const Tensor<T>& x, const CnxBlockParams<T>& p) {
    detail::require_rank(x.shape(), 4, "cnx_block", "x");
    const std::size_t C = x.dim(1);
    if (C != p.channels()) {
        throw DimensionError("cnx_block: x has " + std::to_string(C) + " channels (axis 1), block expects " +
                             std::to_string(p.channels()));
    }
    Tensor<T> h = conv2d(x, p.dw_w, p.dw_b, {.stride = 1, .padding = 3, .groups = C});
    h = layer_norm_channelwise(h, p.ln_g, p.ln_b, T(1e-6));
    h = gelu(conv2d(h, p.pw1_w, p.pw1_b));
    h = grn(h, p.grn_g, p.grn_b, T(1e-6));
    h = conv2d(h, p.pw2_w, p.pw2_b);
    return add(x, h);
}

// Attention attached to one CNX block; which tensors are populated depends
// on the kind.
template <class T>
struct BlockAttention {
    AttentionKind kind = AttentionKind::none;
    ChannelAttnParams<T> channel;
    SpatialAttnParams<T> spatial;
    FusionConfig fusion;

    static BlockAttention zeros(AttentionKind kind, std::size_t C, std::size_t r, std::size_t k = 7,
                                double alpha = 0.5) {
        BlockAttention a;
        a.kind = kind;
        a.fusion.alpha = alpha;
        if (kind == AttentionKind::none) return a;
        a.channel = ChannelAttnParams<T>::zeros(C, r);
        if (uses_spatial(kind)) a.spatial = SpatialAttnParams<T>::zeros(k);
        return a;
    }

    static BlockAttention create(ParamSet<T>& ps, const std::string& prefix, AttentionKind kind, std::size_t C,
                                 std::size_t r, std::size_t k, double alpha, Rng& rng) {
        BlockAttention a;
        a.kind = kind;
        a.fusion.alpha = alpha;
        if (kind == AttentionKind::none) return a;
        a.channel = ChannelAttnParams<T>::create(ps, prefix, C, r, rng);
        if (uses_spatial(kind)) a.spatial = SpatialAttnParams<T>::create(ps, prefix + ".spatial", k, rng);
        return a;
    }
};

// Applies the block's attention. WACA kinds (and the single-stage kinds, for
// uniform introspection) report their channel gates through `state`.
template <class T>
Tensor<T> apply_attention(const Tensor<T>& x, const BlockAttention<T>& a, AttentionState<T>* state = nullptr) {
    switch (a.kind) {
        case AttentionKind::none: return x;
        case AttentionKind::se: {
            Tensor<T> gate = se_channel_gate(x, a.channel);
            if (state) state->a1 = state->fused = gate;
            return scale_channels(x, gate);
        }
        case AttentionKind::cbam: {
            Tensor<T> gate = cbam_channel_gate(x, a.channel);
            if (state) state->a1 = state->fused = gate;
            return spatial_attention(scale_channels(x, gate), a.spatial);
        }
        case AttentionKind::waca_se: {
            auto [y, st] = waca_se(x, a.channel, a.fusion);
            if (state) *state = st;
            return y;
        }
        case AttentionKind::waca_cbam: {
            auto [y, st] = waa(x, a.channel, a.spatial, a.fusion, PoolingMode::cbam);
            if (state) *state = st;
            return y;
        }
    }
    return x;
}

template <class T>
std::pair<Tensor<T>, std::optional<AttentionState<T>>> cnx_waa_block(const Tensor<T>& x, const CnxBlockParams<T>& p,
                                                                     const BlockAttention<T>& attn) {
    Tensor<T> h = cnx_block(x, p);
    if (attn.kind == AttentionKind::none) return {h, std::nullopt};
    AttentionState<T> st;
    Tensor<T> y = apply_attention(h, attn, &st);
    return {y, st};
}

struct UNetConfig {
    std::size_t in_channels = 6;
    std::vector<std::size_t> widths{16, 32, 64};
    std::size_t blocks_per_stage = 1;
    AttentionKind attention_kind = AttentionKind::waca_cbam;
    double alpha = 0.5;
    std::size_t r = 4;
    std::size_t spatial_kernel = 7;

    std::size_t stages() const { return widths.size(); }

    void validate() const {
        if (in_channels == 0) throw ConfigError("model: in_channels must be positive");
        if (widths.empty()) throw ConfigError("model: widths must be nonempty");
        for (std::size_t i = 0; i < widths.size(); ++i) {
            if (widths[i] == 0) throw ConfigError("model: widths must be positive");
            if (i && widths[i] <= widths[i - 1]) throw ConfigError("model: widths must be strictly increasing");
            if (attention_kind != AttentionKind::none && (r == 0 || widths[i] % r != 0)) {
                throw ConfigError("model: reduction ratio r = " + std::to_string(r) + " must divide every width (" +
                                  std::to_string(widths[i]) + ")");
            }
        }
        if (blocks_per_stage == 0) throw ConfigError("model: blocks_per_stage must be positive");
        if (spatial_kernel % 2 == 0) throw ConfigError("model: spatial_kernel must be odd");
        FusionConfig{alpha}.validate();
    }

    friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

inline void to_json(nlohmann::json& j, const UNetConfig& c) {
    j = {{"in_channels", c.in_channels},
         {"widths", c.widths},
         {"blocks_per_stage", c.blocks_per_stage},
         {"attention_kind", to_string(c.attention_kind)},
         {"alpha", c.alpha},
         {"r", c.r},
         {"spatial_kernel", c.spatial_kernel}};
}
inline void from_json(const nlohmann::json& j, UNetConfig& c) {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.widths = j.value("widths", c.widths);
    c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
    c.attention_kind = attention_kind_from_string(j.value("attention_kind", to_string(c.attention_kind)));
    c.alpha = j.value("alpha", c.alpha);
    c.r = j.value("r", c.r);
    c.spatial_kernel = j.value("spatial_kernel", c.spatial_kernel);
}

// Channel attention record emitted by one block during a forward pass.
template <class T>
struct BlockRecord {
    std::string block_id;
    AttentionState<T> state;
};

// Encoder: 1x1 stem, then per stage [CNX+attention x k] followed by a 2x2
// stride-2 conv (except the last stage). Decoder: bilinear x2 upsampling,
// attention gate on the skip, channel concat, 1x1 fuse conv, CNX+attention
// x k. Head: 1x1 conv to one channel, no activation.
template <class T>
class UNet {
public:
    explicit UNet(UNetConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        build(rng);
    }

    const UNetConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }
    std::size_t param_count() const { return params_.count(); }

    Tensor<T> forward(const Tensor<T>& x, std::vector<BlockRecord<T>>* records = nullptr) const {
        detail::require_rank(x.shape(), 4, "unet_forward", "x");
        if (x.dim(1) != cfg_.in_channels) {
            throw DimensionError("unet_forward: input has " + std::to_string(x.dim(1)) +
                                 " channels (axis 1), model expects " + std::to_string(cfg_.in_channels));
        }
        const std::size_t factor = std::size_t{1} << (cfg_.stages() - 1);
        if (x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
            throw ConfigError("unet_forward: spatial size " + std::to_string(x.dim(2)) + "x" +
                              std::to_string(x.dim(3)) + " not divisible by " + std::to_string(factor) + " for " +
                              std::to_string(cfg_.stages()) + " stages");
        }
        auto run_blocks = [&](Tensor<T> h, const std::vector<Block>& blocks) {
            for (const auto& b : blocks) {
                auto [y, st] = cnx_waa_block(h, b.cnx, b.attn);
                if (records && st) records->push_back({b.id, *st});
                h = y;
            }
            return h;
        };

        Tensor<T> h = conv2d(x, stem_w_, stem_b_);
        std::vector<Tensor<T>> skips;
        for (std::size_t s = 0; s < cfg_.stages(); ++s) {
            h = run_blocks(h, enc_[s]);
            if (s + 1 < cfg_.stages()) {
                skips.push_back(h);
                h = conv2d(h, down_[s].w, down_[s].b, {.stride = 2, .padding = 0});
            }
        }
        for (std::size_t s = cfg_.stages() - 1; s-- > 0;) {
            const Tensor<T>& skip = skips[s];
            const Tensor<T> up = resize_bilinear(h, skip.dim(2), skip.dim(3));
            const auto& d = dec_[s];
            const Tensor<T> gated = attention_gate(up, skip, d.gate);
            h = conv2d(concat_channels(gated, up), d.fuse_w, d.fuse_b);
            h = run_blocks(h, d.blocks);
        }
        return conv2d(h, head_w_, head_b_);
    }

private:
    struct Block {
        std::string id;
        CnxBlockParams<T> cnx;
        BlockAttention<T> attn;
    };
    struct Down {
        Tensor<T> w, b;
    };
    struct Decoder {
        AttnGateParams<T> gate;
        Tensor<T> fuse_w, fuse_b;
        std::vector<Block> blocks;
    };

    Block make_block(const std::string& id, std::size_t C, Rng& rng) {
        Block b;
        b.id = id;
        b.cnx = CnxBlockParams<T>::create(params_, id, C, rng);
        b.attn = BlockAttention<T>::create(params_, id + ".attn", cfg_.attention_kind, C, cfg_.r, cfg_.spatial_kernel,
                                           cfg_.alpha, rng);
        return b;
    }

    void build(Rng& rng) {
        const auto& w = cfg_.widths;
        stem_w_ = params_.add("stem.weight", trunc_normal<T>({w[0], cfg_.in_channels, 1, 1}, 0.02, rng));
        stem_b_ = params_.add("stem.bias", Tensor<T>({w[0]}));
        enc_.resize(cfg_.stages());
        for (std::size_t s = 0; s < cfg_.stages(); ++s) {
            for (std::size_t k = 0; k < cfg_.blocks_per_stage; ++k)
                enc_[s].push_back(make_block("enc" + std::to_string(s) + ".block" + std::to_string(k), w[s], rng));
            if (s + 1 < cfg_.stages()) {
                const std::string id = "down" + std::to_string(s);
                Down d;
                d.w = params_.add(id + ".weight", trunc_normal<T>({w[s + 1], w[s], 2, 2}, 0.02, rng));
                d.b = params_.add(id + ".bias", Tensor<T>({w[s + 1]}));
                down_.push_back(d);
            }
        }
        dec_.resize(cfg_.stages() - 1);
        for (std::size_t s = cfg_.stages() - 1; s-- > 0;) {
            const std::string id = "dec" + std::to_string(s);
            Decoder& d = dec_[s];
            d.gate = AttnGateParams<T>::create(params_, id + ".gate", w[s + 1], w[s], rng);
            d.fuse_w = params_.add(id + ".fuse.weight", trunc_normal<T>({w[s], w[s] + w[s + 1], 1, 1}, 0.02, rng));
            d.fuse_b = params_.add(id + ".fuse.bias", Tensor<T>({w[s]}));
            for (std::size_t k = 0; k < cfg_.blocks_per_stage; ++k)
                d.blocks.push_back(make_block(id + ".block" + std::to_string(k), w[s], rng));
        }
        head_w_ = params_.add("head.weight", trunc_normal<T>({1, w[0], 1, 1}, 0.02, rng));
        head_b_ = params_.add("head.bias", Tensor<T>({1}));
    }

    UNetConfig cfg_;
    ParamSet<T> params_;
    Tensor<T> stem_w_, stem_b_, head_w_, head_b_;
    std::vector<std::vector<Block>> enc_;
    std::vector<Down> down_;
    std::vector<Decoder> dec_;
};

// Copies parameter values from `src` into `dst` by name; both sets must hold
// the same names and shapes.
template <class T, class U>
void copy_params(const ParamSet<U>& src, ParamSet<T>& dst) {
    for (auto& [name, t] : dst) {
        const auto& s = src.get(name);
        if (s.shape() != t.shape()) {
            throw DimensionError("copy_params: '" + name + "' has shape " + shape_str(s.shape()) + ", expected " +
                                 shape_str(t.shape()));
        }
        auto out = t.mutable_data();
        auto in = s.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(in[i]);
    }
}

template <class T>
struct ModelCheckpoint {
    UNet<T> model;
    std::size_t epoch = 0;
    double val_f1 = 0.0;
    NormStats norm_stats;

    explicit ModelCheckpoint(UNet<T> m) : model(std::move(m)) {}
};

// Checkpoint container:
//   "WCKP" | version u8 = 1 | u32 LE header length | JSON header
//   (config, epoch, val_f1, norm_stats) | u32 LE record count |
//   records of (u32 LE name length, name bytes, WTNS tensor), in name order.
inline constexpr std::array<unsigned char, 4> kCheckpointMagic{0x57, 0x43, 0x4B, 0x50};
inline constexpr std::uint8_t kCheckpointVersion = 1;

template <class T>
void write_checkpoint(std::ostream& os, const ModelCheckpoint<T>& ck) {
    nlohmann::json header = {{"config", ck.model.config()},
                             {"epoch", ck.epoch},
                             {"val_f1", ck.val_f1},
                             {"norm_stats", ck.norm_stats}};
    const std::string text = header.dump();
    os.write(reinterpret_cast<const char*>(kCheckpointMagic.data()), 4);
    os.put(static_cast<char>(kCheckpointVersion));
    detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(ck.model.params().size()));
    for (const auto& [name, t] : ck.model.params()) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_wtns(os, t);
    }
}

template <class T>
void save_checkpoint(const ModelCheckpoint<T>& ck, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("checkpoint: cannot open '" + path.string() + "' for writing");
    write_checkpoint(os, ck);
    if (!os) throw FormatError("checkpoint: write failed for '" + path.string() + "'");
}

// Loads into a model of element type T (converting if stored otherwise) and
// verifies every name and shape against the architecture the stored config
// generates.
template <class T>
ModelCheckpoint<T> read_checkpoint(std::istream& is) {
    unsigned char magic[4];
    if (!is.read(reinterpret_cast<char*>(magic), 4) || std::memcmp(magic, kCheckpointMagic.data(), 4) != 0) {
        throw FormatError("checkpoint: bad magic");
    }
    const int version = is.get();
    if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t hlen = detail::get_u32(is);
    std::string text(hlen, '\0');
    if (!is.read(text.data(), hlen)) throw FormatError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
    }
    ModelCheckpoint<T> ck(UNet<T>(header.at("config").get<UNetConfig>()));
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.val_f1 = header.at("val_f1").get<double>();
    ck.norm_stats = header.at("norm_stats").get<NormStats>();

    const std::uint32_t count = detail::get_u32(is);
    std::vector<std::string> problems;
    std::map<std::string, bool> seen;
    for (std::uint32_t r = 0; r < count; ++r) {
        const std::uint32_t nlen = detail::get_u32(is);
        std::string name(nlen, '\0');
        if (!is.read(name.data(), nlen)) throw FormatError("checkpoint: truncated record name");
        Tensor<T> t = read_wtns<T>(is);
        auto& params = ck.model.params();
        if (!params.contains(name)) {
            problems.push_back(name + " (unexpected)");
            continue;
        }
        auto& dst = params.get(name);
        if (dst.shape() != t.shape()) {
            problems.push_back(name + " (stored " + shape_str(t.shape()) + ", expected " + shape_str(dst.shape()) + ")");
            continue;
        }
        std::copy(t.data().begin(), t.data().end(), dst.mutable_data().begin());
        seen[name] = true;
    }
    for (const auto& [name, _] : ck.model.params())
        if (!seen.count(name)) problems.push_back(name + " (missing)");
    if (!problems.empty()) {
        std::string msg = "checkpoint: parameter mismatch:";
        for (const auto& p : problems) msg += " " + p + ";";
        throw FormatError(msg);
    }
    return ck;
}

template <class T>
ModelCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint: cannot open '" + path.string() + "'");
    return read_checkpoint<T>(is);
}

}  // namespace waca
