#include <sstream>

#include "catch_amalgamated.hpp"
#include "support.hpp"

using waca::Rng;
using waca::Tensor;

namespace {

Tensor<double> from(waca::Shape shape, std::vector<double> v) {
    Tensor<double> t(std::move(shape));
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
    return t;
}

bool same(const Tensor<double>& a, const Tensor<double>& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::vector<waca::CaseBundle> desk_cases(std::uint64_t first, std::size_t n, std::size_t size) {
    waca::GenConfig cfg;
    cfg.h = cfg.w = size;
    std::vector<waca::CaseBundle> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(waca::gen_case(first + i, cfg));
    return out;
}

waca::UNetConfig desk_model() {
    waca::UNetConfig c;
    c.widths = {8, 16};
    return c;
}

std::string log_text(const std::vector<waca::EpochLog>& log) {
    std::ostringstream os;
    waca::write_train_log(os, log);
    return os.str();
}

}  // namespace

TEST_CASE("normalization statistics") {
    const auto s = waca::compute_norm_stats(std::vector{from({1, 1, 2}, {1, 3})});
    CHECK(s.mean[0] == 2.0);
    CHECK(s.std[0] == 1.0);
    const auto z = waca::apply_zscore(from({1, 1, 2}, {1, 3}), s);
    CHECK(z[0] == -1.0);
    CHECK(z[1] == 1.0);

    Rng rng(21);
    std::vector<Tensor<double>> xs;
    for (int i = 0; i < 100; ++i) {
        auto x = oracle::random_tensor({3, 5 + static_cast<std::size_t>(i % 3), 4}, rng, -2.0, 7.0);
        for (std::size_t k = 0; k < x.numel() / 3; ++k) x.mutable_ptr()[k] = 1e3 + 1e-2 * x[k];  // large offset
        xs.push_back(x);
    }
    const auto stats = waca::compute_norm_stats(xs);
    const auto [mean, std] = oracle::two_pass_stats(xs);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(std::abs(stats.mean[c] - mean[c]) < 1e-10 * std::max(1.0, std::abs(mean[c])));
        CHECK(std::abs(stats.std[c] - std[c]) < 1e-10 * std::max(1.0, std[c]));
    }

    // the training set normalized by its own statistics is centred
    std::vector<Tensor<double>> zs;
    for (const auto& x : xs) zs.push_back(waca::apply_zscore(x, stats));
    const auto [zm, zsd] = oracle::two_pass_stats(zs);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(std::abs(zm[c]) < 1e-9);
        CHECK(zsd[c] == Catch::Approx(1.0).epsilon(1e-9));
    }

    SECTION("constant channel is floored with a warning") {
        std::ostringstream warn;
        const auto f = waca::compute_norm_stats(std::vector{from({2, 1, 2}, {5, 5, 1, 2})}, &warn);
        CHECK(f.std[0] == waca::kStdFloor);
        CHECK(f.floored == std::vector<std::size_t>{0});
        CHECK_THAT(warn.str(), Catch::Matchers::ContainsSubstring("channel 0"));
    }
    SECTION("errors") {
        CHECK_THROWS_AS(waca::compute_norm_stats(std::vector<Tensor<double>>{}), waca::ConfigError);
        CHECK_THROWS_AS(waca::apply_zscore(Tensor<double>({2, 3, 3}), stats), waca::DimensionError);
        CHECK(waca::apply_zscore(Tensor<double>({4, 3, 2, 2}), stats).shape() == waca::Shape{4, 3, 2, 2});
    }
}

TEST_CASE("dihedral group") {
    Rng rng(22);
    const auto x = oracle::random_tensor({2, 3, 5, 5}, rng);
    CHECK(same(waca::dihedral(x, 0), x));
    for (int code : {1, 2, 4, 6, 7}) CHECK(same(waca::dihedral(waca::dihedral(x, code), code), x));
    auto r = x;
    for (int k = 0; k < 4; ++k) {
        if (k > 0) CHECK_FALSE(same(r, x));
        r = waca::dihedral(r, 3);
    }
    CHECK(same(r, x));
    CHECK(same(waca::dihedral(waca::dihedral(x, 3), 3), waca::dihedral(x, 4)));
    CHECK(same(waca::dihedral(waca::dihedral(x, 3), 5), x));
    // flip followed by a rotation closes onto the transposes
    CHECK(same(waca::dihedral(waca::dihedral(x, 1), 3), waca::dihedral(x, 6)));
    CHECK(same(waca::dihedral(waca::dihedral(x, 1), 5), waca::dihedral(x, 7)));

    // the eight codes give eight distinct images of an asymmetric map
    const auto m = from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    for (int a = 0; a < 8; ++a)
        for (int b = a + 1; b < 8; ++b) CHECK_FALSE(same(waca::dihedral(m, a), waca::dihedral(m, b)));
    CHECK(same(waca::dihedral(m, 3), from({1, 3, 3}, {3, 6, 9, 2, 5, 8, 1, 4, 7})));
    CHECK(same(waca::dihedral(m, 1), from({1, 3, 3}, {3, 2, 1, 6, 5, 4, 9, 8, 7})));

    const auto rect = oracle::random_tensor({1, 3, 4}, rng);
    CHECK(same(waca::dihedral(waca::dihedral(rect, 2), 2), rect));
    for (int code : {3, 5, 6, 7}) CHECK_THROWS_AS(waca::dihedral(rect, code), waca::DimensionError);
    CHECK_THROWS_AS(waca::dihedral(x, 8), waca::ConfigError);

    SECTION("features and target move together, and masks commute") {
        const auto c = waca::gen_case(5, [] {
            waca::GenConfig g;
            g.h = g.w = 32;
            return g;
        }());
        for (int code = 0; code < 8; ++code) {
            const auto [f, t] = waca::dihedral_augment(c.features, c.target, code);
            for (std::size_t ch = 0; ch < waca::kFeatureChannels; ++ch) {
                const std::size_t HW = 32 * 32;
                Tensor<double> plane({1, 32, 32});
                std::copy(c.features.ptr() + ch * HW, c.features.ptr() + (ch + 1) * HW, plane.mutable_ptr());
                const auto moved = waca::dihedral(plane, code);
                CHECK(std::equal(moved.data().begin(), moved.data().end(), f.ptr() + ch * HW));
            }
            Tensor<double> mask({1, 32, 32});
            const auto m0 = waca::hotspot_mask(c.target);
            for (std::size_t i = 0; i < m0.size(); ++i) mask.mutable_ptr()[i] = m0[i];
            const auto moved_mask = waca::dihedral(mask, code);
            const auto m1 = waca::hotspot_mask(t);
            for (std::size_t i = 0; i < m1.size(); ++i) CHECK(double(m1[i]) == moved_mask[i]);
        }
    }
}

TEST_CASE("Lanczos resampling") {
    Rng rng(23);
    const auto x = oracle::random_tensor({2, 6, 6}, rng);
    CHECK(same(waca::resize_lanczos(x, 6, 6), x));
    Tensor<double> c({1, 8, 12});
    for (auto& v : c.mutable_data()) v = 3.25;
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{4, 6}, {16, 24}, {5, 7}}) {
        const auto r = waca::resize_lanczos(c, h, w);
        CHECK(r.shape() == waca::Shape{1, h, w});
        for (double v : r.data()) CHECK(v == Catch::Approx(3.25).epsilon(1e-14));
    }
    CHECK_THROWS_AS(waca::resize_lanczos(x, 0, 3), waca::DimensionError);
}

TEST_CASE("loss components") {
    Rng rng(24);
    const auto t = oracle::random_tensor({2, 1, 8, 8}, rng, 0.0, 5.0);
    const waca::LossConfig cfg;
    CHECK(waca::huber_loss(t, t, 1.0).item() == 0.0);
    CHECK(waca::ssim_loss(t, t, cfg).item() == Catch::Approx(0.0).margin(1e-12));
    CHECK(waca::ffl_loss(t, t).item() == 0.0);
    CHECK(waca::composite_loss(t, t, cfg).item() == Catch::Approx(0.0).margin(1e-12));

    CHECK(waca::huber_loss(from({1, 1, 1, 1}, {0.5}), from({1, 1, 1, 1}, {0.0}), 1.0).item() == 0.125);
    // linear branch: delta (|e| - delta / 2)
    CHECK(waca::huber_loss(from({1, 1, 1, 1}, {3.0}), from({1, 1, 1, 1}, {0.0}), 1.0).item() == 2.5);

    SECTION("focal frequency loss against direct DFT summation") {
        std::vector<double> a(16, 0.0), b(16, 0.0);
        a[5] = 1.0;
        const double direct = oracle::ffl(a, b, 4, 4, 1.0);
        const double lib = waca::ffl_loss(from({1, 1, 4, 4}, a), from({1, 1, 4, 4}, b)).item();
        CHECK(std::abs(lib - direct) < 1e-10);
        // a single-pixel difference has a flat spectrum |D| = 1/4, so every weight is 1
        CHECK(direct == Catch::Approx(1.0 / 16.0).epsilon(1e-12));

        for (double alpha : {0.0, 1.0, 2.0}) {
            const auto p = oracle::random_tensor({1, 1, 5, 6}, rng), q = oracle::random_tensor({1, 1, 5, 6}, rng);
            const double o = oracle::ffl({p.data().begin(), p.data().end()}, {q.data().begin(), q.data().end()}, 5, 6,
                                         alpha);
            CHECK(std::abs(waca::ffl_loss(p, q, alpha).item() - o) < 1e-10);
        }
    }
    SECTION("components are nonnegative and vanish only at equality") {
        for (int i = 0; i < 20; ++i) {
            const auto p = oracle::random_tensor({1, 1, 8, 8}, rng, 0.0, 5.0);
            const auto q = waca::add(p, oracle::random_tensor({1, 1, 8, 8}, rng, -0.1, 0.1));
            CHECK(waca::huber_loss(p, q, 1.0).item() > 0.0);
            CHECK(waca::ffl_loss(p, q).item() > 0.0);
            CHECK(waca::ssim_loss(p, q, cfg).item() >= -1e-12);
        }
    }
    SECTION("composite weights") {
        const auto p = oracle::random_tensor({2, 1, 8, 8}, rng, 0.0, 5.0);
        waca::LossConfig h;
        h.w_ssim = h.w_ffl = 0.0;
        CHECK(waca::composite_loss(p, t, h).item() == waca::huber_loss(p, t, 1.0).item());
        const double sum = waca::ssim_loss(p, t, cfg).item() + waca::huber_loss(p, t, 1.0).item() +
                           waca::ffl_loss(p, t).item();
        CHECK(waca::composite_loss(p, t, cfg).item() == Catch::Approx(sum).epsilon(1e-14));
        h.w_huber = 0.0;
        CHECK_THROWS_AS(h.validate(), waca::ConfigError);
        CHECK_THROWS_AS(waca::huber_loss(p, oracle::random_tensor({2, 1, 8, 7}, rng), 1.0), waca::DimensionError);
    }
    SECTION("composite gradient on 1x1x8x8 maps") {
        const auto p = oracle::random_tensor({1, 1, 8, 8}, rng, 0.0, 5.0);
        const auto q = oracle::random_tensor({1, 1, 8, 8}, rng, 0.0, 5.0);
        const auto r = oracle::check_gradients([&] { return waca::composite_loss(p, q, cfg); }, {{"pred", p}});
        CHECK(r.max_rel_err < 1e-4);
    }
}

TEST_CASE("AdamW step") {
    auto scalar_set = [](double v) {
        waca::ParamSet<double> ps;
        ps.add("w", from({1}, {v}));
        return ps;
    };
    SECTION("zero gradient and no decay leave parameters unchanged") {
        auto ps = scalar_set(1.5);
        waca::AdamWState st;
        ps.zero_grad();
        waca::adamw_step(ps, st, 0.1);
        CHECK(ps.get("w")[0] == 1.5);
        CHECK(st.t == 1);
    }
    SECTION("scalar hand oracle") {
        auto ps = scalar_set(1.0);
        waca::AdamWState st;
        ps.get("w").mutable_grad()[0] = 1.0;
        waca::adamw_step(ps, st, 0.1);
        // m_hat = 1, v_hat = 1
        CHECK(ps.get("w")[0] == Catch::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
        // second step with g = -2: hand-rolled recurrence
        ps.get("w").mutable_grad()[0] = -2.0;
        waca::adamw_step(ps, st, 0.1);
        const double m = 0.9 * 0.1 + 0.1 * -2.0, v = 0.999 * 0.001 + 0.001 * 4.0;
        const double step = (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
        CHECK(ps.get("w")[0] == Catch::Approx(1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * step).epsilon(1e-14));
    }
    SECTION("decay with zero gradient is a pure shrink") {
        auto ps = scalar_set(2.0);
        waca::AdamWState st;
        ps.zero_grad();
        waca::adamw_step(ps, st, 0.01, {.weight_decay = 0.5});
        CHECK(ps.get("w")[0] == 2.0 * (1.0 - 0.01 * 0.5));
    }
}

TEST_CASE("cosine schedule") {
    CHECK(waca::cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3);
    CHECK(waca::cosine_lr(100, 100, 1e-3, 1e-5) == Catch::Approx(1e-5).epsilon(1e-12));
    CHECK(waca::cosine_lr(50, 100, 1e-3, 1e-5) == Catch::Approx((1e-3 + 1e-5) / 2).epsilon(1e-12));
    double prev = 1.0;
    for (std::size_t s = 0; s <= 37; ++s) {
        const double lr = waca::cosine_lr(s, 37, 4e-5, 0.0);
        CHECK(lr <= prev);
        CHECK(lr >= 0.0);
        prev = lr;
    }
}

TEST_CASE("training loop") {
    const auto train_set = desk_cases(0, 16, 16);
    const auto val_set = desk_cases(100, 4, 16);
    waca::TrainConfig tc;
    tc.epochs = 20;
    tc.lr_max = 1e-3;
    tc.lr_min = 1e-5;
    tc.seed = 3;
    const waca::LossConfig lc;

    SECTION("zero epochs returns the initial model with metrics") {
        tc.epochs = 0;
        waca::UNet<float> model(desk_model(), 1);
        const auto before = waca::UNet<float>(desk_model(), 1);
        const auto r = waca::train(model, train_set, val_set, tc, lc);
        REQUIRE(r.log.size() == 1);
        CHECK(r.log[0].epoch == 0);
        CHECK(r.log[0].loss > 0.0);
        CHECK(r.best.epoch == 0);
        CHECK(r.best.val_f1 == r.log[0].val_f1);
        CHECK(r.best.norm_stats.channels() == waca::kFeatureChannels);
        for (const auto& [name, t] : r.best.model.params()) {
            const auto& o = before.params().get(name);
            CHECK(std::equal(t.data().begin(), t.data().end(), o.data().begin()));
        }
    }
    SECTION("a short run lowers the loss, is reproducible, and keeps the best epoch") {
        std::ostringstream progress;
        const auto a = waca::train(waca::UNet<float>(desk_model(), 1), train_set, val_set, tc, lc, {&progress});
        REQUIRE(a.log.size() == 21);
        CHECK(a.log[20].loss < a.log[0].loss);
        CHECK(progress.str() + "" == log_text(a.log).substr(std::string(waca::kTrainLogHeader).size() + 1));

        double best = -1.0;
        std::size_t best_epoch = 0;
        for (const auto& row : a.log)
            if (row.val_f1 > best) best = row.val_f1, best_epoch = row.epoch;
        CHECK(a.best.val_f1 == best);
        CHECK(a.best.epoch == best_epoch);
        CHECK(a.log[20].lr == Catch::Approx(waca::cosine_lr(79, 80, 1e-3, 1e-5)).epsilon(1e-12));

        const auto b = waca::train(waca::UNet<float>(desk_model(), 1), train_set, val_set, tc, lc, {.workers = 3});
        CHECK(log_text(a.log) == log_text(b.log));
        for (const auto& [name, t] : a.best.model.params()) {
            const auto& o = b.best.model.params().get(name);
            CHECK(std::equal(t.data().begin(), t.data().end(), o.data().begin()));
        }
    }
    SECTION("non-finite loss aborts naming the epoch") {
        auto bad = train_set;
        bad[2].target.mutable_ptr()[7] = std::numeric_limits<double>::quiet_NaN();
        tc.epochs = 1;
        try {
            (void)waca::train(waca::UNet<float>(desk_model(), 1), bad, val_set, tc, lc);
            FAIL("expected NumericalError");
        } catch (const waca::NumericalError& e) {
            CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("epoch 1"));
        }
    }
    SECTION("configuration errors") {
        tc.lr_min = 1.0;
        CHECK_THROWS_AS(waca::train(waca::UNet<float>(desk_model(), 1), train_set, val_set, tc, lc),
                        waca::ConfigError);
        tc.lr_min = 0.0;
        CHECK_THROWS_AS(waca::train(waca::UNet<float>(desk_model(), 1), train_set, {}, tc, lc), waca::ConfigError);
        waca::UNetConfig wrong = desk_model();
        wrong.in_channels = 4;
        tc.epochs = 0;
        CHECK_THROWS_AS(waca::train(waca::UNet<float>(wrong, 1), train_set, val_set, tc, lc), waca::DimensionError);
    }
}

TEST_CASE("training config JSON") {
    waca::TrainConfig c;
    c.epochs = 7;
    c.seed = 42;
    const nlohmann::json j = c;
    CHECK(j.at("lr_max") == 4e-5);
    const auto back = j.get<waca::TrainConfig>();
    CHECK(back.epochs == 7);
    CHECK(back.seed == 42);
    waca::LossConfig l;
    l.w_ffl = 0.5;
    CHECK(nlohmann::json(l).get<waca::LossConfig>().w_ffl == 0.5);
}
