#pragma once

// Training loop: train-only normalization, seeded shuffling and dihedral
// augmentation, composite loss, AdamW under a per-step cosine schedule, and
// best-validation-F1 checkpoint retention.

#include <ostream>

#include "json.hpp"
#include "waca/backbone.hpp"
#include "waca/casegen.hpp"
#include "waca/evalkit.hpp"
#include "waca/losses.hpp"
#include "waca/optim.hpp"
#include "waca/parallel.hpp"

namespace waca {

// Defaults are the full-scale recipe; desk runs override them.
struct TrainConfig {
    std::size_t epochs = 500;
    std::size_t batch_size = 4;
    double lr_max = 4e-5;
    double lr_min = 0.0;
    double weight_decay = 1e-3;
    std::uint64_t seed = 0;
    std::size_t train_resolution = 0;  // 0 keeps native resolution

    void validate() const {
        if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
        if (!(lr_max > 0)) throw ConfigError("train: lr_max must be positive");
        if (!(lr_min >= 0 && lr_min <= lr_max)) throw ConfigError("train: need 0 <= lr_min <= lr_max");
        if (!(weight_decay >= 0)) throw ConfigError("train: weight_decay must be nonnegative");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"lr_max", c.lr_max},
         {"lr_min", c.lr_min},
         {"weight_decay", c.weight_decay},
         {"seed", c.seed},
         {"train_resolution", c.train_resolution}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_max = j.value("lr_max", c.lr_max);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.train_resolution = j.value("train_resolution", c.train_resolution);
}

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0.0;
    double val_mae_mv = 0.0;
    double val_f1 = 0.0;
    double lr = 0.0;
};

inline constexpr const char* kTrainLogHeader = "epoch,loss,val_mae_mv,val_f1,lr";

inline void write_train_log_row(std::ostream& os, const EpochLog& r) {
    os << r.epoch << ',' << detail::fmt_g17(r.loss) << ',' << detail::fmt_g17(r.val_mae_mv) << ','
       << detail::fmt_g17(r.val_f1) << ',' << detail::fmt_g17(r.lr) << '\n';
}

inline void write_train_log(std::ostream& os, const std::vector<EpochLog>& log) {
    os << kTrainLogHeader << '\n';
    for (const auto& r : log) write_train_log_row(os, r);
}

template <class T>
struct TrainResult {
    ModelCheckpoint<T> best;
    std::vector<EpochLog> log;
};

namespace detail {

// A case normalized, resized to the training resolution, and cast to T.
template <class T>
struct Sample {
    Tensor<T> x;  // [C,H,W]
    Tensor<T> y;  // [1,H,W]
};

template <class T>
std::vector<Sample<T>> prepare(const std::vector<CaseBundle>& cases, const NormStats& stats, std::size_t res) {
    std::vector<Sample<T>> out;
    out.reserve(cases.size());
    for (const auto& c : cases) {
        Tensor<double> x = apply_zscore(c.features, stats);
        Tensor<double> y = c.target;
        if (res && (x.dim(1) != res || x.dim(2) != res)) {
            x = resize_lanczos(x, res, res);
            y = resize_lanczos(y, res, res);
        }
        out.push_back({x.cast<T>(), y.cast<T>()});
    }
    return out;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> stack(const std::vector<Sample<T>>& samples, std::span<const std::size_t> idx,
                                      std::span<const int> codes) {
    const Shape xs = samples[idx[0]].x.shape(), ys = samples[idx[0]].y.shape();
    Tensor<T> X({idx.size(), xs[0], xs[1], xs[2]});
    Tensor<T> Y({idx.size(), ys[0], ys[1], ys[2]});
    const std::size_t xn = shape_numel(xs), yn = shape_numel(ys);
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& s = samples[idx[b]];
        if (s.x.shape() != xs) throw DimensionError("train: cases in a batch must share one shape");
        const Tensor<T> x = codes.empty() ? s.x : dihedral(s.x, codes[b]);
        const Tensor<T> y = codes.empty() ? s.y : dihedral(s.y, codes[b]);
        std::copy(x.data().begin(), x.data().end(), X.mutable_ptr() + b * xn);
        std::copy(y.data().begin(), y.data().end(), Y.mutable_ptr() + b * yn);
    }
    return {X, Y};
}

// Mean F1 and MAE over validation samples at training resolution.
template <class T>
std::pair<double, double> validate(const UNet<T>& model, const std::vector<Sample<T>>& val, std::size_t workers) {
    std::vector<double> maes(val.size()), f1s(val.size());
    parallel_for(val.size(), workers, [&](std::size_t i) {
        const auto& s = val[i];
        const Tensor<T> x = s.x.view({1, s.x.dim(0), s.x.dim(1), s.x.dim(2)});
        const Tensor<double> pred = model.forward(x).template cast<double>().view(s.y.shape());
        const Tensor<double> target = s.y.template cast<double>();
        maes[i] = mae(pred, target);
        f1s[i] = f1_score(hotspot_mask(pred), hotspot_mask(target)).f1;
    });
    double mae_sum = 0.0, f1_sum = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) {
        mae_sum += maes[i];
        f1_sum += f1s[i];
    }
    const double n = static_cast<double>(val.size());
    return {mae_sum / n, f1_sum / n};
}

template <class T>
std::map<std::string, std::vector<T>> snapshot(const ParamSet<T>& ps) {
    std::map<std::string, std::vector<T>> out;
    for (const auto& [name, t] : ps) out[name] = {t.data().begin(), t.data().end()};
    return out;
}

template <class T>
void restore(ParamSet<T>& ps, const std::map<std::string, std::vector<T>>& snap) {
    for (auto& [name, t] : ps) std::copy(snap.at(name).begin(), snap.at(name).end(), t.mutable_data().begin());
}

inline bool square_maps(const Shape& s) { return s[s.size() - 1] == s[s.size() - 2]; }

}  // namespace detail

struct TrainHooks {
    std::ostream* progress = nullptr;  // receives each log row as it is produced
    std::ostream* warn = nullptr;
    std::size_t workers = 1;  // validation fan-out; results do not depend on it
};

// Trains `model` (whose parameter storage is shared with the caller's copy)
// and returns the checkpoint with the best validation F1; ties keep the
// earlier epoch. Epoch 0 records the untrained model.
template <class T>
TrainResult<T> train(UNet<T> model, const std::vector<CaseBundle>& train_set, const std::vector<CaseBundle>& val_set,
                     const TrainConfig& cfg, const LossConfig& loss_cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    loss_cfg.validate();
    if (train_set.empty()) throw ConfigError("train: empty training set");
    if (val_set.empty()) throw ConfigError("train: empty validation set");

    std::vector<Tensor<double>> feats;
    for (const auto& c : train_set) feats.push_back(c.features);
    const NormStats stats = compute_norm_stats(feats, hooks.warn);
    if (stats.channels() != model.config().in_channels) {
        throw DimensionError("train: cases have " + std::to_string(stats.channels()) +
                             " feature channels but the model expects " + std::to_string(model.config().in_channels));
    }
    const auto train_s = detail::prepare<T>(train_set, stats, cfg.train_resolution);
    const auto val_s = detail::prepare<T>(val_set, stats, cfg.train_resolution);

    const std::size_t n = train_s.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    const bool square = detail::square_maps(train_s[0].x.shape());
    static constexpr int kRectCodes[] = {0, 1, 2, 4};

    std::vector<EpochLog> log;
    auto emit = [&](const EpochLog& row) {
        log.push_back(row);
        if (hooks.progress) {
            write_train_log_row(*hooks.progress, row);
            hooks.progress->flush();
        }
    };

    // Epoch 0: the untrained model's loss over the (unaugmented) training set.
    {
        double acc = 0.0;
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const std::size_t lo = s * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
            const auto [X, Y] = detail::stack(train_s, std::span(idx).subspan(lo, hi - lo), {});
            acc += static_cast<double>(composite_loss(model.forward(X), Y, loss_cfg).item());
        }
        const auto [vmae, vf1] = detail::validate(model, val_s, hooks.workers);
        emit({0, acc / static_cast<double>(steps_per_epoch), vmae, vf1, cfg.lr_max});
    }

    auto best = detail::snapshot(model.params());
    std::size_t best_epoch = 0;
    double best_f1 = log[0].val_f1;

    AdamWState opt;
    const AdamWConfig adam{.weight_decay = cfg.weight_decay};
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng::keyed(cfg.seed, epoch).shuffle(order.begin(), order.end());
        std::vector<int> codes(n);
        for (std::size_t i = 0; i < n; ++i) {
            Rng r = Rng::keyed(cfg.seed, epoch, order[i] + 1);
            codes[i] = square ? static_cast<int>(r.integer(0, kDihedralCodes - 1)) : kRectCodes[r.integer(0, 3)];
        }
        double acc = 0.0, lr = cfg.lr_max;
        for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
            const std::size_t lo = s * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
            const auto [X, Y] = detail::stack(train_s, std::span<const std::size_t>(order).subspan(lo, hi - lo),
                                              std::span<const int>(codes).subspan(lo, hi - lo));
            model.params().zero_grad();
            Tape<T> tape;
            T value;
            {
                TapeGuard<T> guard(tape);
                const Tensor<T> loss = composite_loss(model.forward(X), Y, loss_cfg);
                value = loss.item();
                if (!std::isfinite(static_cast<double>(value))) {
                    throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                         std::to_string(s + 1));
                }
                tape.backward(loss);
            }
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            adamw_step(model.params(), opt, lr, adam);
            acc += static_cast<double>(value);
        }
        const auto [vmae, vf1] = detail::validate(model, val_s, hooks.workers);
        emit({epoch, acc / static_cast<double>(steps_per_epoch), vmae, vf1, lr});
        if (vf1 > best_f1) {
            best_f1 = vf1;
            best_epoch = epoch;
            best = detail::snapshot(model.params());
        }
    }

    detail::restore(model.params(), best);
    ModelCheckpoint<T> ck(std::move(model));
    ck.epoch = best_epoch;
    ck.val_f1 = best_f1;
    ck.norm_stats = stats;
    return {std::move(ck), std::move(log)};
}

}  // namespace waca
