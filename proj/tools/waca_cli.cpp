// waca: data generation, training, evaluation, inference, and attention
// introspection for the WACA-UNet IR-drop surrogate.
//
// Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "waca/waca.hpp"

#ifndef WACA_VERSION
#define WACA_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

// Training and inference element type; checkpoints store it.
using Real = float;

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream is(path);
    if (!is) throw waca::ConfigError("config: cannot open '" + path + "'");
    try {
        json j = json::parse(is);
        if (!j.is_object()) throw waca::ConfigError("config: top level must be an object");
        return j;
    } catch (const json::exception& e) {
        throw waca::ConfigError("config: malformed '" + path + "': " + e.what());
    }
}

template <class C>
C section(const json& cfg, const char* name) {
    if (!cfg.contains(name)) return C{};
    try {
        return cfg.at(name).get<C>();
    } catch (const json::exception& e) {
        throw waca::ConfigError(std::string("config: bad '") + name + "' section: " + e.what());
    }
}

// Seed precedence: flag, then WACA_SEED, then the config file, then `fallback`.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::optional<std::uint64_t> from_config,
                           std::uint64_t fallback) {
    if (flag) return *flag;
    if (const char* env = std::getenv("WACA_SEED"); env && *env) {
        try {
            std::size_t used = 0;
            const auto v = std::stoull(env, &used);
            if (used != std::strlen(env)) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw waca::ConfigError(std::string("WACA_SEED is not an unsigned integer: '") + env + "'");
        }
    }
    return from_config.value_or(fallback);
}

void prepare_out_dir(const fs::path& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) throw waca::ConfigError("output: cannot create directory '" + out.string() + "'");
    const fs::path probe = out / ".write_probe";
    {
        std::ofstream os(probe);
        if (!os) throw waca::ConfigError("output: directory '" + out.string() + "' is not writable");
    }
    fs::remove(probe, ec);
}

void write_manifest(const fs::path& out, const std::string& command, const std::string& config_path,
                    std::optional<std::uint64_t> seed, const std::string& started, json extra = json::object()) {
    json m = {{"command", command},
              {"config", config_path},
              {"seed", seed ? json(*seed) : json(nullptr)},
              {"version", WACA_VERSION},
              {"started_utc", started},
              {"finished_utc", utc_now()}};
    m.update(extra);
    std::ofstream os(out / "manifest.json");
    if (!os) throw waca::ConfigError("output: cannot write manifest in '" + out.string() + "'");
    os << m.dump(2) << "\n";
}

struct GenArgs {
    std::string config, out;
    std::size_t count = 1;
    std::optional<std::uint64_t> seed;
    std::size_t workers = 1;
};

int cmd_gen_data(const GenArgs& a) {
    const std::string started = utc_now();
    const json cfg = load_config(a.config);
    const auto gen = section<waca::GenConfig>(cfg, "gen");
    gen.validate();
    std::optional<std::uint64_t> cfg_seed;
    if (cfg.contains("seed")) cfg_seed = cfg.at("seed").get<std::uint64_t>();
    const std::uint64_t seed = resolve_seed(a.seed, cfg_seed, 0);
    const fs::path out(a.out);
    prepare_out_dir(out);
    waca::parallel_for(a.count, a.workers, [&](std::size_t i) {
        const std::uint64_t s = seed + i;
        waca::save_case(waca::gen_case(s, gen), out / waca::case_id(s));
    });
    write_manifest(out, "gen-data", a.config, seed, started,
                   {{"count", a.count}, {"workers", a.workers}, {"gen", gen}});
    std::cout << "wrote " << a.count << " cases to " << out.string() << "\n";
    return 0;
}

struct TrainArgs {
    std::string config, data, val, out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs, batch_size, train_resolution;
    std::optional<double> lr_max, lr_min, weight_decay;
    std::optional<std::string> attention_kind;
    std::size_t workers = 1;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
    const std::string started = utc_now();
    const json cfg = load_config(a.config);
    auto tc = section<waca::TrainConfig>(cfg, "train");
    const auto lc = section<waca::LossConfig>(cfg, "loss");
    auto mc = section<waca::UNetConfig>(cfg, "model");
    std::optional<std::uint64_t> cfg_seed;
    if (cfg.contains("train") && cfg["train"].contains("seed")) cfg_seed = tc.seed;
    tc.seed = resolve_seed(a.seed, cfg_seed, 0);
    if (a.epochs) tc.epochs = *a.epochs;
    if (a.batch_size) tc.batch_size = *a.batch_size;
    if (a.train_resolution) tc.train_resolution = *a.train_resolution;
    if (a.lr_max) tc.lr_max = *a.lr_max;
    if (a.lr_min) tc.lr_min = *a.lr_min;
    if (a.weight_decay) tc.weight_decay = *a.weight_decay;
    if (a.attention_kind) mc.attention_kind = waca::attention_kind_from_string(*a.attention_kind);
    tc.validate();
    lc.validate();
    mc.validate();

    const auto train_set = waca::load_cases(a.data);
    const auto val_set = waca::load_cases(a.val);
    const fs::path out(a.out);
    prepare_out_dir(out);

    waca::UNet<Real> model(mc, tc.seed);
    std::ofstream log_file(out / "train_log.csv");
    if (!log_file) throw waca::ConfigError("output: cannot write train_log.csv");
    log_file << waca::kTrainLogHeader << "\n";
    waca::TrainHooks hooks{.progress = &log_file, .warn = &std::cerr, .workers = a.workers};
    auto result = waca::train(std::move(model), train_set, val_set, tc, lc, hooks);
    log_file.close();
    waca::save_checkpoint(result.best, out / "checkpoint.wckp");
    if (!a.quiet) waca::write_train_log(std::cout, result.log);
    write_manifest(out, "train", a.config, tc.seed, started,
                   {{"data", a.data},
                    {"val", a.val},
                    {"train", tc},
                    {"loss", lc},
                    {"model", mc},
                    {"best_epoch", result.best.epoch},
                    {"best_val_f1", result.best.val_f1}});
    return 0;
}

struct EvalArgs {
    std::string checkpoint, data, out;
    std::size_t resolution = 0;
    std::size_t workers = 1;
};

int cmd_eval(const EvalArgs& a) {
    const std::string started = utc_now();
    const auto ck = waca::load_checkpoint<Real>(a.checkpoint);
    const auto cases = waca::load_cases(a.data);
    const fs::path out(a.out);
    prepare_out_dir(out);
    const waca::ModelPredictor<Real> predictor(ck);
    const waca::EvalConfig ec{.hotspot = {}, .model_resolution = a.resolution};
    // Runtime is measured per case on one thread; workers only fan out cases.
    std::vector<waca::EvalReport> reports(cases.size());
    waca::parallel_for(cases.size(), a.workers,
                       [&](std::size_t i) { reports[i] = waca::evaluate_case(predictor, cases[i], ec); });
    const auto suite = waca::aggregate_reports(std::move(reports));
    {
        std::ofstream os(out / "report.csv");
        if (!os) throw waca::ConfigError("output: cannot write report.csv");
        waca::write_report_csv(os, suite);
    }
    {
        std::ofstream os(out / "report.json");
        os << waca::report_json(suite).dump(2) << "\n";
    }
    waca::write_report_csv(std::cout, suite);
    std::cout << "f1_std," << waca::detail::fmt_g17(suite.f1_std) << "\n";
    write_manifest(out, "eval", "", std::nullopt, started, {{"checkpoint", a.checkpoint}, {"data", a.data}});
    return 0;
}

struct InferArgs {
    std::string checkpoint, case_dir, out;
    std::size_t resolution = 0;
};

int cmd_infer(const InferArgs& a) {
    const std::string started = utc_now();
    const auto ck = waca::load_checkpoint<Real>(a.checkpoint);
    const auto c = waca::load_case(a.case_dir);
    const fs::path out(a.out);
    prepare_out_dir(out);
    waca::Tensor<double> pred;
    const waca::ModelPredictor<Real> predictor(ck);
    const auto report =
        waca::evaluate_case(predictor, c, {.hotspot = {}, .model_resolution = a.resolution}, &pred);
    waca::write_case_artifacts(out, c, pred);
    {
        std::ofstream os(out / "report.csv");
        os << waca::kReportHeader << "\n";
        waca::write_report_row(os, report);
    }
    std::cout << waca::kReportHeader << "\n";
    waca::write_report_row(std::cout, report);
    write_manifest(out, "infer", "", std::nullopt, started, {{"checkpoint", a.checkpoint}, {"case", a.case_dir}});
    return 0;
}

struct InspectArgs {
    std::string checkpoint, case_dir, out;
};

json gate_values(const waca::Tensor<double>& g) {
    // First batch item only; the gate is [1, C].
    return std::vector<double>(g.data().begin(), g.data().begin() + static_cast<std::ptrdiff_t>(g.dim(1)));
}

int cmd_inspect_attn(const InspectArgs& a) {
    const std::string started = utc_now();
    // Loaded in double so exported gates carry full precision.
    const auto ck = waca::load_checkpoint<double>(a.checkpoint);
    const auto& mc = ck.model.config();
    if (!waca::is_waca(mc.attention_kind)) {
        throw waca::ConfigError("inspect-attn: checkpoint uses attention kind '" + waca::to_string(mc.attention_kind) +
                                "'; only waca_se and waca_cbam carry two-stage gates");
    }
    const auto c = waca::load_case(a.case_dir);
    if (c.features.dim(0) != mc.in_channels) {
        throw waca::DimensionError("inspect-attn: case has " + std::to_string(c.features.dim(0)) +
                                   " feature channels but the model expects " + std::to_string(mc.in_channels));
    }
    const fs::path out(a.out);
    prepare_out_dir(out);
    const auto x = waca::apply_zscore(c.features, ck.norm_stats)
                       .view({1, c.features.dim(0), c.features.dim(1), c.features.dim(2)});
    std::vector<waca::BlockRecord<double>> records;
    ck.model.forward(x, &records);
    json blocks = json::array();
    for (const auto& r : records) {
        blocks.push_back({{"block_id", r.block_id},
                          {"stage1", gate_values(r.state.a1)},
                          {"stage2", gate_values(r.state.a2)},
                          {"fused", gate_values(r.state.fused)}});
    }
    const json doc = {{"attention_kind", waca::to_string(mc.attention_kind)},
                      {"alpha", mc.alpha},
                      {"case", c.id},
                      {"blocks", blocks}};
    std::ofstream os(out / "attention.json");
    if (!os) throw waca::ConfigError("output: cannot write attention.json");
    os << doc.dump(2) << "\n";
    std::cout << "wrote " << records.size() << " block records to " << (out / "attention.json").string() << "\n";
    write_manifest(out, "inspect-attn", "", std::nullopt, started, {{"checkpoint", a.checkpoint}, {"case", a.case_dir}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"WACA-UNet IR-drop surrogate toolkit"};
    app.set_version_flag("--version", std::string(WACA_VERSION));
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen-data", "generate synthetic PDN cases");
    g->add_option("--config", gen.config, "JSON config (section 'gen')")->check(CLI::ExistingFile);
    g->add_option("--out", gen.out, "output directory")->required();
    g->add_option("--count", gen.count, "number of cases")->check(CLI::PositiveNumber);
    g->add_option("--seed", gen.seed, "first seed; cases use seed..seed+count-1");
    g->add_option("--workers", gen.workers, "worker threads")->check(CLI::PositiveNumber);

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train a model and keep the best-validation-F1 checkpoint");
    t->add_option("--config", tr.config, "JSON config (sections 'train', 'loss', 'model')")->check(CLI::ExistingFile);
    t->add_option("--data", tr.data, "training case directory")->required();
    t->add_option("--val", tr.val, "validation case directory")->required();
    t->add_option("--out", tr.out, "output directory")->required();
    t->add_option("--seed", tr.seed);
    t->add_option("--epochs", tr.epochs);
    t->add_option("--batch-size", tr.batch_size);
    t->add_option("--train-resolution", tr.train_resolution);
    t->add_option("--lr-max", tr.lr_max);
    t->add_option("--lr-min", tr.lr_min);
    t->add_option("--weight-decay", tr.weight_decay);
    t->add_option("--attention-kind", tr.attention_kind, "none, se, cbam, waca_se, waca_cbam");
    t->add_option("--workers", tr.workers, "validation worker threads")->check(CLI::PositiveNumber);
    t->add_flag("--quiet", tr.quiet, "do not echo the training log");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "score a checkpoint on a case directory");
    e->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
    e->add_option("--data", ev.data)->required();
    e->add_option("--out", ev.out)->required();
    e->add_option("--resolution", ev.resolution, "model input resolution (0 = native)");
    e->add_option("--workers", ev.workers)->check(CLI::PositiveNumber);

    InferArgs in;
    auto* i = app.add_subcommand("infer", "predict one case and dump plotting artifacts");
    i->add_option("--checkpoint", in.checkpoint)->required()->check(CLI::ExistingFile);
    i->add_option("--case", in.case_dir)->required()->check(CLI::ExistingDirectory);
    i->add_option("--out", in.out)->required();
    i->add_option("--resolution", in.resolution, "model input resolution (0 = native)");

    InspectArgs ia;
    auto* ins = app.add_subcommand("inspect-attn", "export per-block WACA channel gates for one case");
    ins->add_option("--checkpoint", ia.checkpoint)->required()->check(CLI::ExistingFile);
    ins->add_option("--case", ia.case_dir)->required()->check(CLI::ExistingDirectory);
    ins->add_option("--out", ia.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& s) {
        return app.exit(s);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return kExitUsage;
    }

    try {
        if (*g) return cmd_gen_data(gen);
        if (*t) return cmd_train(tr);
        if (*e) return cmd_eval(ev);
        if (*i) return cmd_infer(in);
        if (*ins) return cmd_inspect_attn(ia);
    } catch (const waca::NumericalError& err) {
        std::cerr << "numerical error: " << err.what() << "\n";
        return kExitNumerical;
    } catch (const std::invalid_argument& err) {  // DimensionError, ConfigError
        std::cerr << "error: " << err.what() << "\n";
        return kExitData;
    } catch (const waca::FormatError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return kExitData;
    } catch (const std::filesystem::filesystem_error& err) {
        std::cerr << "filesystem error: " << err.what() << "\n";
        return kExitData;
    } catch (const nlohmann::json::exception& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
