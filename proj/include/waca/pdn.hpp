#pragma once

// Multi-layer resistive power grid, modified nodal analysis, and a
// Jacobi-preconditioned conjugate-gradient solver for the static IR drop.

#include <cmath>
#include <cstdint>
#include <queue>
#include <vector>

#include "waca/tensor.hpp"

namespace waca {

struct ConvergenceError : NumericalError {
    ConvergenceError(const std::string& what, double residual, std::size_t iterations)
        : NumericalError(what), residual(residual), iterations(iterations) {}
    double residual;
    std::size_t iterations;
};

struct PdnLayer {
    std::size_t pitch = 1;           // node spacing in cells
    double sheet_conductance = 1.0;  // siemens per branch before multipliers
};

struct PadNode {
    std::size_t layer = 0, i = 0, j = 0;
    friend bool operator==(const PadNode&, const PadNode&) = default;
};

// Nodes of layer l sit at cells (i, j) with i, j multiples of its pitch.
// Layer 0 has pitch 1, so every cell is a layer-0 node, and each pitch
// divides the next so upper nodes coincide with lower ones; vias join
// coincident nodes of adjacent layers.
struct PdnGrid {
    std::size_t h = 0, w = 0;
    std::vector<PdnLayer> layers;
    // Per-layer multipliers over that layer's node grid: horizontal[l][k]
    // scales the branch leaving node k to the right, vertical[l][k] the one
    // leaving downward. Empty means all ones.
    std::vector<std::vector<double>> horizontal, vertical;
    // via[l][k] multiplies the via between layer l and l + 1 at node k of
    // layer l + 1; 0 removes the via. Empty means all ones.
    std::vector<std::vector<double>> via;
    double via_conductance = 1.0;
    double vdd = 1.0;
    std::vector<PadNode> pads;
    std::vector<double> current;  // amperes drawn at each cell, row-major h*w

    std::size_t layer_rows(std::size_t l) const { return (h - 1) / layers[l].pitch + 1; }
    std::size_t layer_cols(std::size_t l) const { return (w - 1) / layers[l].pitch + 1; }
    std::size_t layer_nodes(std::size_t l) const { return layer_rows(l) * layer_cols(l); }

    std::size_t layer_offset(std::size_t l) const {
        std::size_t off = 0;
        for (std::size_t k = 0; k < l; ++k) off += layer_nodes(k);
        return off;
    }
    std::size_t node_count() const { return layer_offset(layers.size()); }

    // Global index of the node of layer l at cell (i, j), which must lie on
    // that layer's node grid.
    std::size_t node(std::size_t l, std::size_t i, std::size_t j) const {
        const std::size_t p = layers[l].pitch;
        return layer_offset(l) + (i / p) * layer_cols(l) + j / p;
    }

    void validate() const {
        if (h == 0 || w == 0) throw ConfigError("pdn grid: dimensions must be positive");
        if (layers.empty()) throw ConfigError("pdn grid: at least one layer required");
        if (layers[0].pitch != 1) throw ConfigError("pdn grid: layer 0 must have pitch 1");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            if (layers[l].pitch == 0) throw ConfigError("pdn grid: pitch must be positive");
            if (l && layers[l].pitch % layers[l - 1].pitch != 0)
                throw ConfigError("pdn grid: each pitch must be a multiple of the one below");
            if (!(layers[l].sheet_conductance > 0)) throw ConfigError("pdn grid: sheet conductance must be positive");
        }
        if (!(via_conductance > 0)) throw ConfigError("pdn grid: via conductance must be positive");
        auto check_factors = [&](const std::vector<std::vector<double>>& f, std::size_t count, const char* what,
                                 bool allow_zero, std::size_t shift) {
            if (f.empty()) return;
            if (f.size() != count) throw ConfigError(std::string("pdn grid: ") + what + " needs one entry per layer");
            for (std::size_t l = 0; l < f.size(); ++l) {
                if (f[l].empty()) continue;
                if (f[l].size() != layer_nodes(l + shift))
                    throw ConfigError(std::string("pdn grid: ") + what + " size mismatch on layer " +
                                      std::to_string(l + shift));
                for (double v : f[l])
                    if (!(allow_zero ? v >= 0 : v > 0))
                        throw ConfigError(std::string("pdn grid: ") + what + " multipliers must be " +
                                          (allow_zero ? "nonnegative" : "positive"));
            }
        };
        check_factors(horizontal, layers.size(), "horizontal", false, 0);
        check_factors(vertical, layers.size(), "vertical", false, 0);
        check_factors(via, layers.size() - 1, "via", true, 1);
        if (pads.empty()) throw ConfigError("pdn grid: no pad node, the system is singular");
        for (const auto& p : pads) {
            if (p.layer >= layers.size() || p.i >= h || p.j >= w || p.i % layers[p.layer].pitch != 0 ||
                p.j % layers[p.layer].pitch != 0) {
                throw ConfigError("pdn grid: pad (" + std::to_string(p.layer) + "," + std::to_string(p.i) + "," +
                                  std::to_string(p.j) + ") is not a grid node");
            }
        }
        if (current.size() != h * w) throw ConfigError("pdn grid: current map must have h*w entries");
        for (double c : current)
            if (!(c >= 0) || !std::isfinite(c)) throw ConfigError("pdn grid: currents must be finite and nonnegative");
    }

    double horizontal_factor(std::size_t l, std::size_t k) const {
        return horizontal.empty() || horizontal[l].empty() ? 1.0 : horizontal[l][k];
    }
    double vertical_factor(std::size_t l, std::size_t k) const {
        return vertical.empty() || vertical[l].empty() ? 1.0 : vertical[l][k];
    }
    double via_factor(std::size_t l, std::size_t k) const { return via.empty() || via[l].empty() ? 1.0 : via[l][k]; }
};

// A single-layer grid with uniform branches, no pads, and zero current.
inline PdnGrid uniform_grid(std::size_t h, std::size_t w, double conductance) {
    PdnGrid g;
    g.h = h;
    g.w = w;
    g.layers = {{1, conductance}};
    g.current.assign(h * w, 0.0);
    return g;
}

struct Branch {
    std::size_t a, b;
    double g;
};

// Every resistive branch of the grid (wires and vias), each listed once.
inline std::vector<Branch> grid_branches(const PdnGrid& grid) {
    std::vector<Branch> out;
    for (std::size_t l = 0; l < grid.layers.size(); ++l) {
        const std::size_t rows = grid.layer_rows(l), cols = grid.layer_cols(l), off = grid.layer_offset(l);
        const double sheet = grid.layers[l].sheet_conductance;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t k = r * cols + c;
                if (c + 1 < cols) out.push_back({off + k, off + k + 1, sheet * grid.horizontal_factor(l, k)});
                if (r + 1 < rows) out.push_back({off + k, off + k + cols, sheet * grid.vertical_factor(l, k)});
            }
        if (l == 0) continue;
        const std::size_t p = grid.layers[l].pitch;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t k = r * cols + c;
                const double f = grid.via_factor(l - 1, k);
                if (f > 0) out.push_back({grid.node(l - 1, r * p, c * p), off + k, grid.via_conductance * f});
            }
    }
    return out;
}

// Compressed sparse row matrix.
struct CsrMatrix {
    std::size_t n = 0;
    std::vector<std::size_t> row_ptr;
    std::vector<std::size_t> col;
    std::vector<double> val;

    void multiply(std::span<const double> x, std::span<double> y) const {
        for (std::size_t r = 0; r < n; ++r) {
            double acc = 0.0;
            for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) acc += val[k] * x[col[k]];
            y[r] = acc;
        }
    }

    double diagonal(std::size_t r) const {
        for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k)
            if (col[k] == r) return val[k];
        return 0.0;
    }
};

inline constexpr std::size_t kPadNode = static_cast<std::size_t>(-1);

// G V = J over the non-pad nodes. `load` is J - G * (vdd * 1), which equals
// minus the load current at each unknown; it is the right-hand side of the
// equivalent system for the drop vdd - V and is kept exactly.
struct MnaSystem {
    CsrMatrix G;
    std::vector<double> J;
    std::vector<double> load;
    std::vector<std::size_t> unknown_of_node;  // kPadNode for pads
    double vdd = 1.0;

    std::size_t size() const { return G.n; }
};

inline MnaSystem assemble_mna(const PdnGrid& grid) {
    grid.validate();
    const std::size_t nodes = grid.node_count();
    MnaSystem sys;
    sys.vdd = grid.vdd;
    sys.unknown_of_node.assign(nodes, 0);
    for (const auto& p : grid.pads) sys.unknown_of_node[grid.node(p.layer, p.i, p.j)] = kPadNode;
    std::size_t n = 0;
    for (auto& u : sys.unknown_of_node)
        if (u != kPadNode) u = n++;

    const auto branches = grid_branches(grid);

    // Every node must reach a pad, otherwise its block of G is singular.
    {
        std::vector<std::vector<std::size_t>> adj(nodes);
        for (const auto& b : branches) {
            adj[b.a].push_back(b.b);
            adj[b.b].push_back(b.a);
        }
        std::vector<char> seen(nodes, 0);
        std::queue<std::size_t> q;
        for (std::size_t v = 0; v < nodes; ++v)
            if (sys.unknown_of_node[v] == kPadNode) {
                seen[v] = 1;
                q.push(v);
            }
        while (!q.empty()) {
            const std::size_t v = q.front();
            q.pop();
            for (std::size_t u : adj[v])
                if (!seen[u]) {
                    seen[u] = 1;
                    q.push(u);
                }
        }
        for (std::size_t v = 0; v < nodes; ++v)
            if (!seen[v]) throw ConfigError("mna: node " + std::to_string(v) + " has no path to a pad; singular system");
    }

    std::vector<std::map<std::size_t, double>> rows(n);
    sys.J.assign(n, 0.0);
    sys.load.assign(n, 0.0);
    for (const auto& b : branches) {
        const std::size_t ua = sys.unknown_of_node[b.a], ub = sys.unknown_of_node[b.b];
        if (ua != kPadNode) {
            rows[ua][ua] += b.g;
            if (ub != kPadNode) rows[ua][ub] -= b.g;
            else sys.J[ua] += b.g * grid.vdd;
        }
        if (ub != kPadNode) {
            rows[ub][ub] += b.g;
            if (ua != kPadNode) rows[ub][ua] -= b.g;
            else sys.J[ub] += b.g * grid.vdd;
        }
    }
    for (std::size_t cell = 0; cell < grid.h * grid.w; ++cell) {
        const std::size_t u = sys.unknown_of_node[cell];
        if (u == kPadNode) continue;
        sys.J[u] -= grid.current[cell];
        sys.load[u] = -grid.current[cell];
    }

    sys.G.n = n;
    sys.G.row_ptr.assign(1, 0);
    for (const auto& row : rows) {
        for (const auto& [c, v] : row) {
            sys.G.col.push_back(c);
            sys.G.val.push_back(v);
        }
        sys.G.row_ptr.push_back(sys.G.col.size());
    }
    return sys;
}

struct CgStats {
    std::size_t iterations = 0;
    double residual = 0.0;  // ||G V - J|| / ||J||
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

// Solves G V = J starting from V = vdd. The iteration runs on the correction
// E = V - vdd, whose right-hand side is `load` when present, so small drops
// keep full relative precision. Convergence is declared on the true residual
// ||G V - J|| <= tol * ||J||, tightened to tol * ||load|| when that is smaller.
inline std::vector<double> solve_cg(const MnaSystem& sys, double tol = 1e-10, std::size_t max_iter = 0,
                                    CgStats* stats = nullptr) {
    const std::size_t n = sys.size();
    if (max_iter == 0) max_iter = std::max<std::size_t>(1000, 20 * n);
    std::vector<double> V(n, sys.vdd);
    if (n == 0) return V;

    std::vector<double> b = sys.load;
    if (b.size() != n) {
        std::vector<double> gv(n);
        sys.G.multiply(V, gv);
        b.resize(n);
        for (std::size_t i = 0; i < n; ++i) b[i] = sys.J[i] - gv[i];
    }
    const double norm_j = std::sqrt(detail::dot(sys.J, sys.J));
    const double norm_b = std::sqrt(detail::dot(b, b));
    if (norm_b == 0.0) {
        if (stats) *stats = {0, 0.0};
        return V;
    }
    const double target = tol * (norm_j > 0 ? std::min(norm_j, norm_b) : norm_b);

    std::vector<double> inv_diag(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double d = sys.G.diagonal(i);
        if (!(d > 0)) throw NumericalError("solve_cg: nonpositive diagonal at row " + std::to_string(i));
        inv_diag[i] = 1.0 / d;
    }

    std::vector<double> E(n, 0.0), r = b, z(n), p(n), q(n);
    std::size_t it = 0;
    double rnorm = norm_b;
    while (it < max_iter) {
        for (std::size_t i = 0; i < n; ++i) z[i] = inv_diag[i] * r[i];
        p = z;
        double rz = detail::dot(r, z);
        while (it < max_iter && rnorm > target) {
            sys.G.multiply(p, q);
            const double pq = detail::dot(p, q);
            if (!(pq > 0)) throw NumericalError("solve_cg: matrix is not positive definite");
            const double a = rz / pq;
            for (std::size_t i = 0; i < n; ++i) {
                E[i] += a * p[i];
                r[i] -= a * q[i];
            }
            ++it;
            rnorm = std::sqrt(detail::dot(r, r));
            for (std::size_t i = 0; i < n; ++i) z[i] = inv_diag[i] * r[i];
            const double rz_next = detail::dot(r, z);
            const double beta = rz_next / rz;
            rz = rz_next;
            for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
        }
        // The recurrence residual drifts from the true one; confirm, and
        // restart from the true residual if they disagree.
        sys.G.multiply(E, q);
        for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - q[i];
        rnorm = std::sqrt(detail::dot(r, r));
        if (rnorm <= target) break;
        if (it >= max_iter) break;
    }
    for (std::size_t i = 0; i < n; ++i) V[i] = sys.vdd + E[i];
    const double rel = rnorm / (norm_j > 0 ? norm_j : norm_b);
    if (stats) *stats = {it, rel};
    if (rnorm > target) {
        throw ConvergenceError("solve_cg: no convergence after " + std::to_string(it) +
                                   " iterations, relative residual " + std::to_string(rel),
                               rel, it);
    }
    return V;
}

// Drop at every layer-0 cell in millivolts, [1, H, W]. Pad cells are exactly
// zero; roundoff below zero is clamped.
inline Tensor<double> ir_drop_map(const PdnGrid& grid, const MnaSystem& sys, std::span<const double> V) {
    Tensor<double> out({1, grid.h, grid.w});
    double* o = out.mutable_ptr();
    for (std::size_t cell = 0; cell < grid.h * grid.w; ++cell) {
        const std::size_t u = sys.unknown_of_node[cell];
        o[cell] = u == kPadNode ? 0.0 : std::max(0.0, (sys.vdd - V[u]) * 1000.0);
    }
    return out;
}

inline Tensor<double> solve_ir_drop(const PdnGrid& grid, double tol = 1e-10) {
    const MnaSystem sys = assemble_mna(grid);
    const auto V = solve_cg(sys, tol);
    return ir_drop_map(grid, sys, V);
}

}  // namespace waca
