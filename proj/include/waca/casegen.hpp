#pragma once

// Synthetic multi-layer PDN cases: randomized grids, golden IR-drop targets,
// and the six-channel feature stack of generator version 1.

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "waca/ops.hpp"
#include "waca/pdn.hpp"
#include "waca/random.hpp"
#include "waca/wtns.hpp"

namespace waca {

inline constexpr int kGenVersion = 1;
inline constexpr std::size_t kFeatureChannels = 6;

struct GenConfig {
    std::size_t h = 64, w = 64;
    // Two fine-pitch lower metals put a via under every bottom node; a coarser
    // via lattice leaves pitch-sized ripples that fragment the hotspot regions.
    std::vector<std::size_t> pitches{1, 1, 4};
    double base_sheet_conductance = 1.0;  // bottom layer
    double layer_ratio = 4.0;             // conductance ratio between adjacent layers
    double via_conductance = 4.0;
    double via_keep = 1.0;
    double via_factor_min = 0.8, via_factor_max = 1.2;
    double strap_min = 0.9, strap_max = 1.1;  // per-row / per-column multipliers
    std::size_t weak_regions_min = 1, weak_regions_max = 3;
    double weak_factor_min = 0.2, weak_factor_max = 0.5;
    std::size_t pads_min = 4, pads_max = 12;
    std::size_t blobs_min = 2, blobs_max = 6;
    double blob_sigma_min = 3.0, blob_sigma_max = 10.0;
    double background = 0.2;  // share of current spread uniformly
    double current_min = 0.5, current_max = 1.5;  // total amperes
    double vdd = 1.0;
    std::size_t coarse_factor = 4;

    std::vector<PdnLayer> layers() const {
        std::vector<PdnLayer> out;
        double g = base_sheet_conductance;
        for (std::size_t p : pitches) {
            out.push_back({p, g});
            g *= layer_ratio;
        }
        return out;
    }

    void validate() const {
        if (h < 4 || w < 4) throw ConfigError("gen: grid must be at least 4x4");
        if (pitches.empty() || pitches[0] != 1) throw ConfigError("gen: pitches must start at 1");
        for (std::size_t l = 1; l < pitches.size(); ++l)
            if (pitches[l] == 0 || pitches[l] % pitches[l - 1] != 0)
                throw ConfigError("gen: each pitch must be a multiple of the previous one");
        if (!(base_sheet_conductance > 0) || !(layer_ratio > 0) || !(via_conductance > 0))
            throw ConfigError("gen: conductances must be positive");
        if (!(via_keep > 0 && via_keep <= 1)) throw ConfigError("gen: via_keep must lie in (0, 1]");
        auto range = [](double lo, double hi, const char* what, bool positive) {
            if (!(lo <= hi) || (positive ? !(lo > 0) : !(lo >= 0)))
                throw ConfigError(std::string("gen: invalid range for ") + what);
        };
        range(via_factor_min, via_factor_max, "via factors", true);
        range(strap_min, strap_max, "strap factors", true);
        range(weak_factor_min, weak_factor_max, "weak-region factors", true);
        range(blob_sigma_min, blob_sigma_max, "blob sigma", true);
        range(current_min, current_max, "total current", false);
        if (weak_regions_min > weak_regions_max) throw ConfigError("gen: invalid weak-region count range");
        if (pads_min == 0 || pads_min > pads_max) throw ConfigError("gen: pad count range must be 1 <= min <= max");
        if (blobs_min > blobs_max) throw ConfigError("gen: invalid blob count range");
        if (!(background >= 0 && background <= 1)) throw ConfigError("gen: background must lie in [0, 1]");
        if (blobs_max == 0 && background == 0) throw ConfigError("gen: no current pattern");
        if (!(vdd > 0)) throw ConfigError("gen: vdd must be positive");
        if (coarse_factor == 0 || h % coarse_factor || w % coarse_factor)
            throw ConfigError("gen: coarse_factor must divide the grid size");
        const std::size_t top = pitches.back();
        const std::size_t top_nodes = ((h - 1) / top + 1) * ((w - 1) / top + 1);
        if (pads_max > top_nodes) throw ConfigError("gen: more pads requested than top-layer nodes");
    }
};

inline void to_json(nlohmann::json& j, const GenConfig& c) {
    j = {{"h", c.h},
         {"w", c.w},
         {"pitches", c.pitches},
         {"base_sheet_conductance", c.base_sheet_conductance},
         {"layer_ratio", c.layer_ratio},
         {"via_conductance", c.via_conductance},
         {"via_keep", c.via_keep},
         {"via_factor_min", c.via_factor_min},
         {"via_factor_max", c.via_factor_max},
         {"strap_min", c.strap_min},
         {"strap_max", c.strap_max},
         {"weak_regions_min", c.weak_regions_min},
         {"weak_regions_max", c.weak_regions_max},
         {"weak_factor_min", c.weak_factor_min},
         {"weak_factor_max", c.weak_factor_max},
         {"pads_min", c.pads_min},
         {"pads_max", c.pads_max},
         {"blobs_min", c.blobs_min},
         {"blobs_max", c.blobs_max},
         {"blob_sigma_min", c.blob_sigma_min},
         {"blob_sigma_max", c.blob_sigma_max},
         {"background", c.background},
         {"current_min", c.current_min},
         {"current_max", c.current_max},
         {"vdd", c.vdd},
         {"coarse_factor", c.coarse_factor}};
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
    GenConfig d;
#define WACA_GEN_FIELD(name) c.name = j.value(#name, d.name)
    WACA_GEN_FIELD(h);
    WACA_GEN_FIELD(w);
    WACA_GEN_FIELD(pitches);
    WACA_GEN_FIELD(base_sheet_conductance);
    WACA_GEN_FIELD(layer_ratio);
    WACA_GEN_FIELD(via_conductance);
    WACA_GEN_FIELD(via_keep);
    WACA_GEN_FIELD(via_factor_min);
    WACA_GEN_FIELD(via_factor_max);
    WACA_GEN_FIELD(strap_min);
    WACA_GEN_FIELD(strap_max);
    WACA_GEN_FIELD(weak_regions_min);
    WACA_GEN_FIELD(weak_regions_max);
    WACA_GEN_FIELD(weak_factor_min);
    WACA_GEN_FIELD(weak_factor_max);
    WACA_GEN_FIELD(pads_min);
    WACA_GEN_FIELD(pads_max);
    WACA_GEN_FIELD(blobs_min);
    WACA_GEN_FIELD(blobs_max);
    WACA_GEN_FIELD(blob_sigma_min);
    WACA_GEN_FIELD(blob_sigma_max);
    WACA_GEN_FIELD(background);
    WACA_GEN_FIELD(current_min);
    WACA_GEN_FIELD(current_max);
    WACA_GEN_FIELD(vdd);
    WACA_GEN_FIELD(coarse_factor);
#undef WACA_GEN_FIELD
}

struct CaseMeta {
    std::uint64_t seed = 0;
    double vdd_v = 1.0;
    std::size_t h = 0, w = 0;
    std::vector<PdnLayer> layers;
    int gen_version = kGenVersion;

    friend bool operator==(const CaseMeta& a, const CaseMeta& b) {
        if (a.layers.size() != b.layers.size()) return false;
        for (std::size_t l = 0; l < a.layers.size(); ++l)
            if (a.layers[l].pitch != b.layers[l].pitch ||
                a.layers[l].sheet_conductance != b.layers[l].sheet_conductance)
                return false;
        return a.seed == b.seed && a.vdd_v == b.vdd_v && a.h == b.h && a.w == b.w && a.gen_version == b.gen_version;
    }
};

inline void to_json(nlohmann::json& j, const CaseMeta& m) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : m.layers) layers.push_back({{"pitch", l.pitch}, {"sheet_conductance", l.sheet_conductance}});
    j = {{"seed", m.seed}, {"vdd_v", m.vdd_v}, {"h", m.h}, {"w", m.w}, {"layers", layers}, {"gen_version", m.gen_version}};
}

inline void from_json(const nlohmann::json& j, CaseMeta& m) {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.vdd_v = j.at("vdd_v").get<double>();
    m.h = j.at("h").get<std::size_t>();
    m.w = j.at("w").get<std::size_t>();
    m.layers.clear();
    for (const auto& l : j.at("layers"))
        m.layers.push_back({l.at("pitch").get<std::size_t>(), l.at("sheet_conductance").get<double>()});
    m.gen_version = j.at("gen_version").get<int>();
}

// One sample: features [Cf,H,W], golden drop [1,H,W] in millivolts.
struct CaseBundle {
    std::string id;
    Tensor<double> features;
    Tensor<double> target;
    CaseMeta meta;
};

inline PdnGrid random_grid(std::uint64_t seed, const GenConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    PdnGrid g;
    g.h = cfg.h;
    g.w = cfg.w;
    g.vdd = cfg.vdd;
    g.layers = cfg.layers();
    g.via_conductance = cfg.via_conductance;
    const std::size_t L = g.layers.size();

    // Straps: one multiplier per row for horizontal branches, per column for
    // vertical ones.
    g.horizontal.resize(L);
    g.vertical.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t rows = g.layer_rows(l), cols = g.layer_cols(l);
        std::vector<double> row_f(rows), col_f(cols);
        for (auto& f : row_f) f = rng.uniform(cfg.strap_min, cfg.strap_max);
        for (auto& f : col_f) f = rng.uniform(cfg.strap_min, cfg.strap_max);
        g.horizontal[l].resize(rows * cols);
        g.vertical[l].resize(rows * cols);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                g.horizontal[l][r * cols + c] = row_f[r];
                g.vertical[l][r * cols + c] = col_f[c];
            }
    }
    // Weakened rectangles on the bottom layer.
    const auto weak = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(cfg.weak_regions_min),
                                                            static_cast<std::int64_t>(cfg.weak_regions_max)));
    for (std::size_t k = 0; k < weak; ++k) {
        const std::size_t rh = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(cfg.h / 8),
                                                                    static_cast<std::int64_t>(cfg.h / 3)));
        const std::size_t rw = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(cfg.w / 8),
                                                                    static_cast<std::int64_t>(cfg.w / 3)));
        const std::size_t r0 = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(cfg.h - rh)));
        const std::size_t c0 = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(cfg.w - rw)));
        const double f = rng.uniform(cfg.weak_factor_min, cfg.weak_factor_max);
        for (std::size_t r = r0; r < r0 + rh; ++r)
            for (std::size_t c = c0; c < c0 + rw; ++c) {
                g.horizontal[0][r * cfg.w + c] *= f;
                g.vertical[0][r * cfg.w + c] *= f;
            }
    }
    // Vias: each kept with probability via_keep; every layer pair keeps at
    // least one so no layer floats.
    g.via.resize(L - 1);
    for (std::size_t l = 1; l < L; ++l) {
        auto& v = g.via[l - 1];
        v.resize(g.layer_nodes(l));
        bool any = false;
        for (auto& f : v) {
            const double keep = rng.uniform();
            const double factor = rng.uniform(cfg.via_factor_min, cfg.via_factor_max);
            f = keep < cfg.via_keep ? factor : 0.0;
            any = any || f > 0;
        }
        if (!any) v[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(v.size()) - 1))] = 1.0;
    }
    // Pads at distinct top-layer nodes.
    {
        const std::size_t top = L - 1, p = g.layers[top].pitch;
        std::vector<std::size_t> sites(g.layer_nodes(top));
        std::iota(sites.begin(), sites.end(), std::size_t{0});
        rng.shuffle(sites.begin(), sites.end());
        const auto count = static_cast<std::size_t>(
            rng.integer(static_cast<std::int64_t>(cfg.pads_min), static_cast<std::int64_t>(cfg.pads_max)));
        const std::size_t cols = g.layer_cols(top);
        for (std::size_t k = 0; k < count; ++k)
            g.pads.push_back({top, (sites[k] / cols) * p, (sites[k] % cols) * p});
    }
    // Gaussian current blobs over a uniform background, scaled to the total.
    {
        std::vector<double> pattern(cfg.h * cfg.w, 0.0);
        const auto blobs = static_cast<std::size_t>(
            rng.integer(static_cast<std::int64_t>(cfg.blobs_min), static_cast<std::int64_t>(cfg.blobs_max)));
        std::vector<double> blob(cfg.h * cfg.w);
        for (std::size_t b = 0; b < blobs; ++b) {
            const double ci = rng.uniform(0.0, static_cast<double>(cfg.h));
            const double cj = rng.uniform(0.0, static_cast<double>(cfg.w));
            const double sigma = rng.uniform(cfg.blob_sigma_min, cfg.blob_sigma_max);
            const double weight = rng.uniform(0.5, 1.5);
            double total = 0.0;
            for (std::size_t i = 0; i < cfg.h; ++i)
                for (std::size_t j = 0; j < cfg.w; ++j) {
                    const double di = static_cast<double>(i) + 0.5 - ci, dj = static_cast<double>(j) + 0.5 - cj;
                    blob[i * cfg.w + j] = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
                    total += blob[i * cfg.w + j];
                }
            for (std::size_t k = 0; k < blob.size(); ++k) pattern[k] += weight * blob[k] / total;
        }
        double blob_total = 0.0;
        for (double v : pattern) blob_total += v;
        const double bg = blobs == 0 ? 1.0 : cfg.background;
        const double amps = rng.uniform(cfg.current_min, cfg.current_max);
        g.current.resize(cfg.h * cfg.w);
        const double per_cell = bg / static_cast<double>(cfg.h * cfg.w);
        for (std::size_t k = 0; k < pattern.size(); ++k) {
            const double share = (blob_total > 0 ? (1.0 - bg) * pattern[k] / blob_total : 0.0) + per_cell;
            g.current[k] = amps * share;
        }
    }
    return g;
}

namespace detail {

// Mean conductance of the wires touching each node of layer l, reported at
// every cell covered by that node's pitch block.
inline std::vector<double> layer_conductance_map(const PdnGrid& g, std::size_t l) {
    const std::size_t rows = g.layer_rows(l), cols = g.layer_cols(l), p = g.layers[l].pitch;
    const double sheet = g.layers[l].sheet_conductance;
    std::vector<double> node_g(rows * cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            int count = 0;
            const std::size_t k = r * cols + c;
            if (c + 1 < cols) acc += g.horizontal_factor(l, k), ++count;
            if (c > 0) acc += g.horizontal_factor(l, k - 1), ++count;
            if (r + 1 < rows) acc += g.vertical_factor(l, k), ++count;
            if (r > 0) acc += g.vertical_factor(l, k - cols), ++count;
            node_g[k] = count ? sheet * acc / count : 0.0;
        }
    std::vector<double> out(g.h * g.w);
    for (std::size_t i = 0; i < g.h; ++i)
        for (std::size_t j = 0; j < g.w; ++j) out[i * g.w + j] = node_g[(i / p) * cols + j / p];
    return out;
}

// Cheap approximation of the drop: one layer carrying the summed sheet
// conductance, solved on a grid coarsened by `factor`, then upsampled.
inline std::vector<double> hypothetical_ir(const PdnGrid& g, std::size_t factor) {
    const std::size_t ch = g.h / factor, cw = g.w / factor;
    double sheet = 0.0;
    for (const auto& l : g.layers) sheet += l.sheet_conductance;
    PdnGrid coarse = uniform_grid(ch, cw, sheet);
    coarse.vdd = g.vdd;
    for (std::size_t i = 0; i < g.h; ++i)
        for (std::size_t j = 0; j < g.w; ++j) coarse.current[(i / factor) * cw + j / factor] += g.current[i * g.w + j];
    for (const auto& p : g.pads) {
        const PadNode c{0, p.i / factor, p.j / factor};
        if (std::find(coarse.pads.begin(), coarse.pads.end(), c) == coarse.pads.end()) coarse.pads.push_back(c);
    }
    const Tensor<double> drop = solve_ir_drop(coarse);
    const Tensor<double> up = resize_bilinear(drop.view({1, 1, ch, cw}), g.h, g.w);
    return {up.data().begin(), up.data().end()};
}

}  // namespace detail

// Feature stack v1:
//   0 current per cell (mA)
//   1 Chebyshev distance to the nearest pad (cells)
//   2 via count per cell
//   3 bottom-layer wire conductance
//   4 summed wire conductance of the upper layers
//   5 hypothetical IR drop (mV) from the coarse single-layer solve
inline Tensor<double> case_features(const PdnGrid& g, std::size_t coarse_factor) {
    const std::size_t H = g.h, W = g.w, HW = H * W;
    Tensor<double> f({kFeatureChannels, H, W});
    double* out = f.mutable_ptr();
    for (std::size_t k = 0; k < HW; ++k) out[k] = g.current[k] * 1000.0;
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
            std::size_t best = std::max(H, W);
            for (const auto& p : g.pads) {
                const std::size_t di = i > p.i ? i - p.i : p.i - i;
                const std::size_t dj = j > p.j ? j - p.j : p.j - j;
                best = std::min(best, std::max(di, dj));
            }
            out[HW + i * W + j] = static_cast<double>(best);
        }
    for (std::size_t l = 1; l < g.layers.size(); ++l) {
        const std::size_t p = g.layers[l].pitch, cols = g.layer_cols(l);
        for (std::size_t k = 0; k < g.layer_nodes(l); ++k)
            if (g.via_factor(l - 1, k) > 0) out[2 * HW + (k / cols) * p * W + (k % cols) * p] += 1.0;
    }
    const auto bottom = detail::layer_conductance_map(g, 0);
    std::copy(bottom.begin(), bottom.end(), out + 3 * HW);
    for (std::size_t l = 1; l < g.layers.size(); ++l) {
        const auto m = detail::layer_conductance_map(g, l);
        for (std::size_t k = 0; k < HW; ++k) out[4 * HW + k] += m[k];
    }
    const auto hyp = detail::hypothetical_ir(g, coarse_factor);
    std::copy(hyp.begin(), hyp.end(), out + 5 * HW);
    return f;
}

inline std::string case_id(std::uint64_t seed) { return "case_" + std::to_string(seed); }

inline CaseBundle gen_case(std::uint64_t seed, const GenConfig& cfg = {}) {
    const PdnGrid g = random_grid(seed, cfg);
    CaseBundle b;
    b.id = case_id(seed);
    b.target = solve_ir_drop(g);
    b.features = case_features(g, cfg.coarse_factor);
    b.meta = {seed, cfg.vdd, cfg.h, cfg.w, g.layers, kGenVersion};
    return b;
}

inline void save_case(const CaseBundle& b, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_wtns(dir / "features.wtns", b.features);
    save_wtns(dir / "target.wtns", b.target);
    std::ofstream os(dir / "meta.json", std::ios::binary);
    if (!os) throw FormatError("case: cannot write '" + (dir / "meta.json").string() + "'");
    os << nlohmann::json(b.meta).dump(2) << "\n";
}

inline CaseBundle load_case(const std::filesystem::path& dir) {
    CaseBundle b;
    b.id = dir.filename().string();
    if (b.id.empty()) b.id = dir.parent_path().filename().string();
    b.features = load_wtns<double>(dir / "features.wtns");
    b.target = load_wtns<double>(dir / "target.wtns");
    std::ifstream is(dir / "meta.json");
    if (!is) throw FormatError("case: missing meta.json in '" + dir.string() + "'");
    try {
        b.meta = nlohmann::json::parse(is).get<CaseMeta>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("case: malformed meta.json in '" + dir.string() + "': " + e.what());
    }
    if (b.features.rank() != 3 || b.target.rank() != 3 || b.target.dim(0) != 1 ||
        b.features.dim(1) != b.target.dim(1) || b.features.dim(2) != b.target.dim(2)) {
        throw FormatError("case: '" + dir.string() + "' has features " + shape_str(b.features.shape()) +
                          " and target " + shape_str(b.target.shape()) + ", expected [C,H,W] and [1,H,W]");
    }
    return b;
}

// Every case_* directory under `root`, ordered by name.
inline std::vector<std::filesystem::path> list_cases(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw FormatError("data: '" + root.string() + "' is not a directory");
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(root))
        if (e.is_directory() && e.path().filename().string().rfind("case_", 0) == 0) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw FormatError("data: no case_* directories in '" + root.string() + "'");
    return out;
}

inline std::vector<CaseBundle> load_cases(const std::filesystem::path& root) {
    std::vector<CaseBundle> out;
    for (const auto& p : list_cases(root)) out.push_back(load_case(p));
    return out;
}

}  // namespace waca
