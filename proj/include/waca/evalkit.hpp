#pragma once

// Contest-style scoring: MAE, hotspot masks, F1, the resize-back evaluation
// path, runtime, and report emission.

#include <chrono>
#include <concepts>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "json.hpp"
#include "waca/backbone.hpp"
#include "waca/casegen.hpp"
#include "waca/preprocess.hpp"

namespace waca {

using Mask = std::vector<std::uint8_t>;

template <class T>
double mae(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::require_same(pred.shape(), target.shape(), "mae");
    if (pred.numel() == 0) throw DimensionError("mae: empty maps");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i)
        acc += std::abs(static_cast<double>(pred[i]) - static_cast<double>(target[i]));
    return acc / static_cast<double>(pred.numel());
}

struct HotspotConfig {
    double ratio = 0.9;

    void validate() const {
        if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("hotspot: ratio must lie in (0, 1]");
    }
};

// mask_i = map_i >= ratio * max(map); all false when max(map) <= 0.
template <class T>
Mask hotspot_mask(const Tensor<T>& map, const HotspotConfig& cfg = {}) {
    cfg.validate();
    Mask mask(map.numel(), 0);
    if (map.numel() == 0) return mask;
    const double peak = static_cast<double>(*std::max_element(map.data().begin(), map.data().end()));
    if (!(peak > 0.0)) return mask;
    const double threshold = cfg.ratio * peak;
    for (std::size_t i = 0; i < map.numel(); ++i) mask[i] = static_cast<double>(map[i]) >= threshold;
    return mask;
}

struct F1Result {
    double f1 = 0.0;
    std::size_t tp = 0, fp = 0, fn = 0;
};

// 2TP / (2TP + FP + FN), with 1 when both masks are empty.
inline F1Result f1_score(const Mask& pred, const Mask& truth) {
    if (pred.size() != truth.size()) {
        throw DimensionError("f1: masks have " + std::to_string(pred.size()) + " and " + std::to_string(truth.size()) +
                             " elements");
    }
    F1Result r;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] && truth[i]) ++r.tp;
        else if (pred[i]) ++r.fp;
        else if (truth[i]) ++r.fn;
    }
    const std::size_t denom = 2 * r.tp + r.fp + r.fn;
    r.f1 = denom == 0 ? 1.0 : 2.0 * static_cast<double>(r.tp) / static_cast<double>(denom);
    return r;
}

struct EvalReport {
    std::string case_id;
    double mae_mv = 0.0;
    std::size_t tp = 0, fp = 0, fn = 0;
    double f1 = 0.0;
    double runtime_s = 0.0;
};

struct EvalConfig {
    HotspotConfig hotspot;
    std::size_t model_resolution = 0;  // 0 runs the model at the case's native size
};

// Anything that maps normalized features [1,C,h,w] to a drop map [1,1,h,w].
template <class P>
concept Predictor = requires(const P& p, const Tensor<double>& x) {
    { p.predict(x) } -> std::same_as<Tensor<double>>;
    { p.norm_stats() } -> std::convertible_to<const NormStats&>;
    { p.in_channels() } -> std::convertible_to<std::size_t>;
};

// Runs a trained UNet of element type T on double inputs.
template <class T>
class ModelPredictor {
public:
    explicit ModelPredictor(const ModelCheckpoint<T>& ck) : ck_(&ck) {}

    Tensor<double> predict(const Tensor<double>& x) const {
        if constexpr (std::is_same_v<T, double>) return ck_->model.forward(x);
        else return ck_->model.forward(x.template cast<T>()).template cast<double>();
    }
    const NormStats& norm_stats() const { return ck_->norm_stats; }
    std::size_t in_channels() const { return ck_->model.config().in_channels; }

private:
    const ModelCheckpoint<T>* ck_;
};

// normalize -> optional Lanczos to model resolution -> forward -> Lanczos
// back to native size -> metrics. Runtime covers the whole inference path.
template <Predictor P>
EvalReport evaluate_case(const P& model, const CaseBundle& c, const EvalConfig& cfg = {},
                         Tensor<double>* prediction = nullptr) {
    const std::size_t C = c.features.dim(0), H = c.features.dim(1), W = c.features.dim(2);
    if (C != model.in_channels()) {
        throw DimensionError("evaluate: case '" + c.id + "' has " + std::to_string(C) +
                             " feature channels but the model expects " + std::to_string(model.in_channels()));
    }
    const auto start = std::chrono::steady_clock::now();
    Tensor<double> x = apply_zscore(c.features, model.norm_stats()).view({1, C, H, W});
    const std::size_t res = cfg.model_resolution;
    if (res && (res != H || res != W)) x = resize_lanczos(x, res, res);
    Tensor<double> pred = model.predict(x);
    if (pred.dim(2) != H || pred.dim(3) != W) pred = resize_lanczos(pred, H, W);
    pred = pred.view({1, H, W});
    const auto stop = std::chrono::steady_clock::now();

    EvalReport r;
    r.case_id = c.id;
    r.runtime_s = std::chrono::duration<double>(stop - start).count();
    r.mae_mv = mae(pred, c.target);
    const F1Result f = f1_score(hotspot_mask(pred, cfg.hotspot), hotspot_mask(c.target, cfg.hotspot));
    r.tp = f.tp;
    r.fp = f.fp;
    r.fn = f.fn;
    r.f1 = f.f1;
    if (prediction) *prediction = pred;
    return r;
}

struct SuiteReport {
    std::vector<EvalReport> cases;
    EvalReport mean;  // case_id "mean"; counts are totals
    double f1_std = 0.0;  // population standard deviation
};

inline SuiteReport aggregate_reports(std::vector<EvalReport> reports) {
    if (reports.empty()) throw ConfigError("evaluate_suite: no cases");
    SuiteReport s;
    s.cases = std::move(reports);
    const double n = static_cast<double>(s.cases.size());
    s.mean.case_id = "mean";
    for (const auto& r : s.cases) {
        s.mean.mae_mv += r.mae_mv;
        s.mean.f1 += r.f1;
        s.mean.runtime_s += r.runtime_s;
        s.mean.tp += r.tp;
        s.mean.fp += r.fp;
        s.mean.fn += r.fn;
    }
    s.mean.mae_mv /= n;
    s.mean.f1 /= n;
    s.mean.runtime_s /= n;
    double var = 0.0;
    for (const auto& r : s.cases) var += (r.f1 - s.mean.f1) * (r.f1 - s.mean.f1);
    s.f1_std = std::sqrt(var / n);
    return s;
}

template <Predictor P>
SuiteReport evaluate_suite(const P& model, const std::vector<CaseBundle>& cases, const EvalConfig& cfg = {}) {
    std::vector<EvalReport> out;
    out.reserve(cases.size());
    for (const auto& c : cases) out.push_back(evaluate_case(model, c, cfg));
    return aggregate_reports(std::move(out));
}

namespace detail {

inline std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline constexpr const char* kReportHeader = "case,mae_mv,f1,tp,fp,fn,runtime_s";

inline void write_report_row(std::ostream& os, const EvalReport& r) {
    os << r.case_id << ',' << detail::fmt_g17(r.mae_mv) << ',' << detail::fmt_g17(r.f1) << ',' << r.tp << ','
       << r.fp << ',' << r.fn << ',' << detail::fmt_g17(r.runtime_s) << '\n';
}

inline void write_report_csv(std::ostream& os, const SuiteReport& s) {
    os << kReportHeader << '\n';
    for (const auto& r : s.cases) write_report_row(os, r);
    write_report_row(os, s.mean);
}

inline std::string hardware_summary() {
    std::string model = "unknown cpu";
    std::ifstream cpu("/proc/cpuinfo");
    for (std::string line; std::getline(cpu, line);) {
        if (line.rfind("model name", 0) == 0) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) model = line.substr(colon + 2);
            break;
        }
    }
    return model + ", " + std::to_string(std::thread::hardware_concurrency()) +
           " hardware threads, single-threaded inference";
}

inline nlohmann::json report_json(const SuiteReport& s) {
    return {{"hardware", hardware_summary()},
            {"cases", s.cases.size()},
            {"mean_mae_mv", s.mean.mae_mv},
            {"mean_f1", s.mean.f1},
            {"f1_std", s.f1_std},
            {"mean_runtime_s", s.mean.runtime_s}};
}

// Per-case panels for external plotting: prediction, both masks, absolute
// error, and a target/prediction scatter table.
inline void write_case_artifacts(const std::filesystem::path& dir, const CaseBundle& c, const Tensor<double>& pred,
                                 const HotspotConfig& hs = {}) {
    std::filesystem::create_directories(dir);
    const Shape shape = c.target.shape();
    save_wtns(dir / "pred.wtns", pred.view(shape));
    auto mask_tensor = [&](const Mask& m) {
        Tensor<double> t(shape);
        for (std::size_t i = 0; i < m.size(); ++i) t.mutable_ptr()[i] = m[i];
        return t;
    };
    save_wtns(dir / "pred_mask.wtns", mask_tensor(hotspot_mask(pred, hs)));
    save_wtns(dir / "true_mask.wtns", mask_tensor(hotspot_mask(c.target, hs)));
    Tensor<double> err(shape);
    for (std::size_t i = 0; i < err.numel(); ++i) err.mutable_ptr()[i] = std::abs(pred[i] - c.target[i]);
    save_wtns(dir / "abs_error.wtns", err);
    std::ofstream os(dir / "scatter.csv");
    if (!os) throw FormatError("infer: cannot write '" + (dir / "scatter.csv").string() + "'");
    os << "target_mv,pred_mv\n";
    for (std::size_t i = 0; i < pred.numel(); ++i)
        os << detail::fmt_g17(c.target[i]) << ',' << detail::fmt_g17(pred[i]) << '\n';
}

}  // namespace waca
