#include "catch_amalgamated.hpp"
#include "support.hpp"

using Catch::Approx;
using waca::ChannelAttnParams;
using waca::Rng;
using waca::Tensor;

namespace {

ChannelAttnParams<double> random_channel(std::size_t C, std::size_t r, Rng& rng, double scale = 1.0) {
    auto p = ChannelAttnParams<double>::zeros(C, r);
    for (Tensor<double>* t : {&p.fc1_w, &p.fc1_b, &p.fc2_w, &p.fc2_b})
        for (auto& v : t->mutable_data()) v = rng.uniform(-scale, scale);
    return p;
}

waca::SpatialAttnParams<double> random_spatial(std::size_t k, Rng& rng) {
    auto p = waca::SpatialAttnParams<double>::zeros(k);
    for (auto& v : p.conv_w.mutable_data()) v = rng.uniform(-0.5, 0.5);
    p.conv_b.mutable_data()[0] = rng.uniform(-0.5, 0.5);
    return p;
}

double max_gate_diff(const Tensor<double>& a, const std::vector<std::vector<double>>& b) {
    double m = 0.0;
    for (std::size_t n = 0; n < b.size(); ++n)
        for (std::size_t c = 0; c < b[n].size(); ++c) m = std::max(m, std::abs(a[n * b[n].size() + c] - b[n][c]));
    return m;
}

void check_open_unit(const Tensor<double>& g) {
    for (double v : g.data()) CHECK((v > 0.0 && v < 1.0));
}

}  // namespace

TEST_CASE("SE channel gate") {
    Rng rng(1);
    const auto x = oracle::random_tensor({2, 4, 3, 3}, rng);
    const auto zero_gate = waca::se_channel_gate(x, ChannelAttnParams<double>::zeros(4, 2));
    for (double v : zero_gate.data()) CHECK(v == 0.5);

    SECTION("hand example with identity FC layers") {
        auto p = ChannelAttnParams<double>::zeros(2, 1);
        p.fc1_w = Tensor<double>({2, 2}, {1, 0, 0, 1});
        p.fc2_w = Tensor<double>({2, 2}, {1, 0, 0, 1});
        const auto a = waca::se_channel_gate(Tensor<double>({1, 2, 1, 1}, {1, -1}), p);
        CHECK(a[0] == Approx(0.7310585786300049).epsilon(1e-15));
        CHECK(a[1] == 0.5);
    }
    SECTION("invariant under spatial permutation") {
        const auto p = random_channel(4, 2, rng);
        Tensor<double> y = x.clone();
        // reverse each plane
        for (std::size_t m = 0; m < 8; ++m) std::reverse(y.mutable_ptr() + m * 9, y.mutable_ptr() + m * 9 + 9);
        const auto a = waca::se_channel_gate(x, p), b = waca::se_channel_gate(y, p);
        CHECK(oracle::max_abs_diff(a, b) < 1e-15);
    }
    CHECK_THROWS_AS(waca::se_channel_gate(x, ChannelAttnParams<double>::zeros(8, 2)), waca::DimensionError);
    CHECK_THROWS_AS(ChannelAttnParams<double>::zeros(6, 4), waca::ConfigError);
}

TEST_CASE("CBAM channel gate") {
    Rng rng(2);
    const auto x = oracle::random_tensor({1, 4, 3, 3}, rng);
    const auto zero_gate = waca::cbam_channel_gate(x, ChannelAttnParams<double>::zeros(4, 2));
    for (double v : zero_gate.data()) CHECK(v == 0.5);

    const auto p = random_channel(4, 2, rng);
    SECTION("constant planes: GAP equals GMP") {
        Tensor<double> c({1, 4, 3, 3});
        for (std::size_t ch = 0; ch < 4; ++ch)
            std::fill(c.mutable_ptr() + ch * 9, c.mutable_ptr() + ch * 9 + 9, 0.3 * double(ch) - 0.4);
        const auto a = waca::cbam_channel_gate(c, p);
        const auto m = oracle::mlp({-0.4, -0.1, 0.2, 0.5}, p);
        for (std::size_t ch = 0; ch < 4; ++ch) CHECK(a[ch] == Approx(oracle::sigmoid(2 * m[ch])).epsilon(1e-14));
    }
    SECTION("random case against the scalar oracle") {
        const auto s_avg = oracle::gap(x), s_max = oracle::gmp(x);
        const auto m1 = oracle::mlp(s_avg[0], p), m2 = oracle::mlp(s_max[0], p);
        const auto a = waca::cbam_channel_gate(x, p);
        for (std::size_t ch = 0; ch < 4; ++ch) CHECK(std::abs(a[ch] - oracle::sigmoid(m1[ch] + m2[ch])) < 1e-12);
    }
}

TEST_CASE("WACA stage 2") {
    Rng rng(3);
    const auto x = oracle::random_tensor({2, 4, 3, 3}, rng);
    auto p = random_channel(4, 2, rng);
    SECTION("saturated stage 1 suppresses everything") {
        std::fill(p.fc1_b.mutable_data().begin(), p.fc1_b.mutable_data().end(), 0.0);
        std::fill(p.fc2_b.mutable_data().begin(), p.fc2_b.mutable_data().end(), 0.0);
        const Tensor<double> ones({2, 4}, 1.0);
        for (auto mode : {waca::PoolingMode::se, waca::PoolingMode::cbam}) {
            const auto a2 = waca::waca_stage2(x, ones, p, mode);
            for (double v : a2.data()) CHECK(v == 0.5);
        }
    }
    SECTION("no suppression: stage 2 re-pools the unmodified input") {
        const Tensor<double> zeros({2, 4}, 0.0);
        CHECK(oracle::max_abs_diff(waca::waca_stage2(x, zeros, p, waca::PoolingMode::se),
                                   waca::se_channel_gate(x, p)) < 1e-15);
        // The CBAM-style stage 2 sums the pooled descriptors before the shared
        // MLP, so it matches sigma(MLP(GAP + GMP)) rather than the stage-1 gate.
        const auto a2 = waca::waca_stage2(x, zeros, p, waca::PoolingMode::cbam);
        const auto s_avg = oracle::gap(x), s_max = oracle::gmp(x);
        for (std::size_t n = 0; n < 2; ++n) {
            std::vector<double> s(4);
            for (std::size_t c = 0; c < 4; ++c) s[c] = s_avg[n][c] + s_max[n][c];
            const auto m = oracle::mlp(s, p);
            for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(a2[n * 4 + c] - oracle::sigmoid(m[c])) < 1e-15);
        }
    }
    SECTION("random case against the scalar oracle") {
        for (bool cbam : {false, true}) {
            const auto o = oracle::waca(x, p, 0.5, cbam);
            Tensor<double> a1({2, 4});
            for (std::size_t i = 0; i < 8; ++i) a1.mutable_ptr()[i] = o.a1[i / 4][i % 4];
            const auto a2 = waca::waca_stage2(x, a1, p, cbam ? waca::PoolingMode::cbam : waca::PoolingMode::se);
            CHECK(max_gate_diff(a2, o.a2) < 1e-12);
        }
    }
}

TEST_CASE("WACA fusion") {
    const Tensor<double> a({1, 3}, {0.2, 0.8, 0.5}), b({1, 3}, {0.6, 0.2, 0.5});
    CHECK(oracle::max_abs_diff(waca::waca_fuse(a, a, {0.3}), a) < 1e-15);
    CHECK(oracle::max_abs_diff(waca::waca_fuse(a, b, {1.0}), a) == 0.0);
    const auto f = waca::waca_fuse(Tensor<double>({1, 1}, 0.8), Tensor<double>({1, 1}, 0.2), {0.5});
    CHECK(f[0] == 0.5);
    CHECK_THROWS_AS(waca::waca_fuse(a, b, {1.5}), waca::ConfigError);
    CHECK_THROWS_AS(waca::waca_fuse(a, b, {-0.1}), waca::ConfigError);
    CHECK_THROWS_AS(waca::waca_fuse(a, Tensor<double>({1, 2}), {0.5}), waca::DimensionError);
}

TEST_CASE("WACA-SE and WACA-CBAM") {
    Rng rng(4);
    for (bool cbam : {false, true}) {
        DYNAMIC_SECTION((cbam ? "WACA-CBAM" : "WACA-SE")) {
            const auto x = oracle::random_tensor({1, 4, 2, 2}, rng);
            const auto p = random_channel(4, 2, rng);
            auto run = [&](double alpha) {
                return cbam ? waca::waca_cbam(x, p, {alpha}) : waca::waca_se(x, p, {alpha});
            };
            SECTION("alpha = 1 reduces to the single-stage baseline") {
                const auto base = cbam ? waca::cbam_channel_attention(x, p) : waca::se_attention(x, p);
                CHECK(oracle::max_abs_diff(run(1.0).first, base) < 1e-12);
            }
            SECTION("full state against the scalar oracle") {
                const auto [y, st] = run(0.5);
                const auto o = oracle::waca(x, p, 0.5, cbam);
                CHECK(max_gate_diff(st.a1, o.a1) < 1e-12);
                CHECK(max_gate_diff(st.a2, o.a2) < 1e-12);
                CHECK(max_gate_diff(st.fused, o.fused) < 1e-12);
                CHECK(oracle::max_abs_diff(y, o.y) < 1e-12);
                for (std::size_t i = 0; i < st.a1.numel(); ++i) CHECK(st.w1[i] == 1.0 - st.a1[i]);
                CHECK(st.s1.shape() == waca::Shape{1, 4});
                CHECK(st.s1_max.empty() == !cbam);
                check_open_unit(st.a1);
                check_open_unit(st.a2);
                check_open_unit(st.fused);
            }
        }
    }
}

TEST_CASE("no additional parameters") {
    using K = waca::AttentionKind;
    for (std::size_t C : {8, 16, 64})
        for (std::size_t r : {2, 4}) {
            CHECK(waca::attention_param_count(K::waca_se, C, r) == waca::attention_param_count(K::se, C, r));
            CHECK(waca::attention_param_count(K::waca_cbam, C, r) == waca::attention_param_count(K::cbam, C, r));
            CHECK(waca::attention_param_count(K::se, C, r) == 2 * C * (C / r) + C / r + C);
        }
}

TEST_CASE("spatial attention") {
    Rng rng(5);
    const auto x = oracle::random_tensor({2, 3, 6, 6}, rng);
    const auto z = waca::spatial_attention(x, waca::SpatialAttnParams<double>::zeros(7));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(z[i] == 0.5 * x[i]);

    const auto p = random_spatial(7, rng);
    SECTION("spatially constant input gives a constant map only away from the padded border") {
        // Zero padding makes border pixels see fewer taps; with a 1x1 kernel
        // the map is exactly constant.
        const auto p1 = random_spatial(1, rng);
        Tensor<double> c({1, 3, 4, 4});
        for (std::size_t ch = 0; ch < 3; ++ch)
            std::fill(c.mutable_ptr() + ch * 16, c.mutable_ptr() + ch * 16 + 16, double(ch) - 0.5);
        const auto y = waca::spatial_attention(c, p1);
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t i = 1; i < 16; ++i) CHECK(y[ch * 16 + i] == y[ch * 16]);
    }
    SECTION("random case against the loop oracle") {
        CHECK(oracle::max_abs_diff(waca::spatial_attention(x, p), oracle::spatial_attention(x, p)) < 1e-12);
    }
    CHECK_THROWS_AS(waca::SpatialAttnParams<double>::zeros(4), waca::ConfigError);
}

TEST_CASE("WAA") {
    Rng rng(6);
    const auto x = oracle::random_tensor({2, 4, 5, 3}, rng);
    const auto [z, zst] =
        waca::waa(x, ChannelAttnParams<double>::zeros(4, 2), waca::SpatialAttnParams<double>::zeros(7), {0.5});
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(z[i] == 0.25 * x[i]);
    CHECK(z.shape() == x.shape());

    const auto c = random_channel(4, 2, rng);
    const auto s = random_spatial(7, rng);
    const auto [y, st] = waca::waa(x, c, s, {0.5});
    const auto o = oracle::waca(x, c, 0.5, true);
    CHECK(oracle::max_abs_diff(y, oracle::spatial_attention(o.y, s)) < 1e-12);
    CHECK(max_gate_diff(st.fused, o.fused) < 1e-12);
}

TEST_CASE("attention gate") {
    Rng rng(7);
    const auto g = oracle::random_tensor({2, 3, 4, 4}, rng), x = oracle::random_tensor({2, 5, 4, 4}, rng);
    const auto z = waca::attention_gate(g, x, waca::AttnGateParams<double>::zeros(3, 5));
    CHECK(z.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(z[i] == 0.5 * x[i]);

    auto p = waca::AttnGateParams<double>::zeros(3, 5);
    for (Tensor<double>* t : {&p.wg_w, &p.wg_b, &p.wx_w, &p.wx_b, &p.psi_w, &p.psi_b})
        for (auto& v : t->mutable_data()) v = rng.uniform(-1, 1);
    Tensor<double> beta;
    const auto y = waca::attention_gate(g, x, p, &beta);
    CHECK(oracle::max_abs_diff(y, oracle::attention_gate(g, x, p)) < 1e-12);
    check_open_unit(beta);
    CHECK_THROWS_AS(waca::attention_gate(oracle::random_tensor({2, 3, 2, 2}, rng), x, p), waca::DimensionError);
}

TEST_CASE("gate range on extreme inputs") {
    Rng rng(8);
    const auto x = oracle::random_tensor({2, 8, 4, 4}, rng, -200, 200);
    const auto p = random_channel(8, 2, rng, 5.0);
    for (bool cbam : {false, true}) {
        const auto st = (cbam ? waca::waca_cbam(x, p) : waca::waca_se(x, p)).second;
        check_open_unit(st.a1);
        check_open_unit(st.a2);
        check_open_unit(st.fused);
    }
}

TEST_CASE("attention kind names") {
    using K = waca::AttentionKind;
    for (K k : {K::none, K::se, K::cbam, K::waca_se, K::waca_cbam})
        CHECK(waca::attention_kind_from_string(waca::to_string(k)) == k);
    CHECK_THROWS_AS(waca::attention_kind_from_string("waca"), waca::ConfigError);
}
