#pragma once

#include <array>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "maenas/operations.hpp"
#include "maenas/search_space.hpp"

namespace maenas {

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SupernetConfig {
    SearchSpace space = SearchSpace::darts();
    int num_cells = 5;
    int init_channels = 16;
    // layer indices that halve resolution; empty means {n/3, 2n/3}
    std::vector<int> reduction_positions;
    int stem_multiplier = 3;
    int in_channels = 3;

    std::vector<int> reductions() const {
        if (!reduction_positions.empty()) return reduction_positions;
        return {num_cells / 3, 2 * num_cells / 3};
    }

    void validate() const {
        if (num_cells < 3) throw std::invalid_argument("supernet needs at least 3 cells");
        if (init_channels < 1) throw std::invalid_argument("init_channels must be positive");
        auto r = reductions();
        if (r.size() != 2) throw std::invalid_argument("exactly two reduction positions are required");
        if (!(r[0] > 0 && r[1] > r[0] && r[1] < num_cells))
            throw std::invalid_argument("reduction positions must satisfy 0 < r1 < r2 < num_cells");
        for (const CellSpec* c : space.cells()) c->validate();
        if (space.macro == Macro::darts && !space.reduction)
            throw std::invalid_argument("darts macro needs a reduction cell spec");
    }
};

/// Encoder features at full, half and quarter input resolution.
struct FeaturePyramid {
    Var f1, f2, f3;
};

/// Per-cell-kind (edges x ops) mixing matrices.
using CellWeights = std::map<CellKind, Var>;

/// Differentiable softmax(alpha) mixing weights.
inline CellWeights mixture_weights(const ArchParams& arch) {
    CellWeights w;
    for (const auto& [k, a] : arch.alpha) w[k] = softmax_rows(a);
    return w;
}

/// One-hot weights that keep only the genotype's operations; every other path is zero.
inline CellWeights child_weights(const Genotype& g, const SearchSpace& space) {
    auto violations = validate_genotype(g, space);
    if (!violations.empty()) throw std::invalid_argument("genotype not expressible in the supernet: " + violations.front());
    CellWeights w;
    for (const CellSpec* spec : space.cells()) {
        Tensor t({spec->num_edges(), spec->num_ops()});
        const CellGenotype& cg = g.cell(spec->cell_kind);
        for (size_t n = 0; n < cg.size(); ++n) {
            const int node = spec->num_inputs + static_cast<int>(n);
            for (const auto& e : cg[n]) {
                int edge = *spec->find_edge(e.predecessor, node);
                t[static_cast<size_t>(edge) * spec->num_ops() + spec->op_index(e.op)] = 1.f;
            }
        }
        w[spec->cell_kind] = Var::constant(std::move(t));
    }
    return w;
}

/// All candidate operations of one edge.
class MixedOp {
public:
    MixedOp(ParamStore& ps, const std::string& name, const CellSpec& spec, int c, int stride, const OpOptions& opt) {
        for (OpKind k : spec.op_set) ops_.push_back(make_operation(k, ps, name + "." + op_name(k), c, stride, opt));
    }

    /// sum_k w[row, k] * o_k(x). Operations with an exactly-zero constant weight are not evaluated;
    /// returns an undefined Var when nothing contributes.
    Var forward(const Var& x, const Var& weights, int row, const ForwardContext& ctx) const {
        const int K = static_cast<int>(ops_.size());
        const bool fixed = !weights.requires_grad();
        std::vector<Var> outs(static_cast<size_t>(K));
        bool any = false;
        for (int k = 0; k < K; ++k) {
            if (fixed && weights.value()[static_cast<size_t>(row) * K + k] == 0.f) continue;
            outs[k] = ops_[k]->forward(x, ctx);
            if (!outs[k].value().all_finite())
                throw NonFiniteError("non-finite output from operation " + op_name(ops_[k]->kind()) + " on edge row " +
                                     std::to_string(row));
            any = true;
        }
        if (!any) return Var();
        return weighted_sum(outs, weights, row);
    }

    const CandidateOp& op(int k) const { return *ops_.at(k); }
    int size() const { return static_cast<int>(ops_.size()); }

private:
    std::vector<std::unique_ptr<CandidateOp>> ops_;
};

enum class CellOutput { concat_nodes, last_node };

/// A relaxed cell: x_j = sum over incoming edges (i, j) of mixed_op(x_i).
class SearchCell {
public:
    SearchCell(ParamStore& ps, const std::string& name, const CellSpec& spec, int c, bool reduction, const OpOptions& opt,
               CellOutput output)
        : spec_(spec), output_(output), reduction_(reduction), c_(c) {
        for (int e = 0; e < spec.num_edges(); ++e) {
            const int stride = reduction && spec.edges[e].from < spec.num_inputs ? 2 : 1;
            edges_.emplace_back(ps, name + ".edge" + std::to_string(spec.edges[e].from) + "_" + std::to_string(spec.edges[e].to),
                                spec, c, stride, opt);
        }
    }

    Var forward(const std::vector<Var>& inputs, const Var& weights, const ForwardContext& ctx) const {
        if (static_cast<int>(inputs.size()) != spec_.num_inputs)
            throw std::invalid_argument("cell expects " + std::to_string(spec_.num_inputs) + " inputs, got " +
                                        std::to_string(inputs.size()));
        const auto& w = weights.value();
        if (w.rank() != 2 || w.dim(0) != spec_.num_edges() || w.dim(1) != spec_.num_ops())
            throw std::invalid_argument("cell weights shaped " + shape_str(w.shape()) + " do not fit the cell");
        for (const auto& in : inputs)
            if (in.shape() != inputs[0].shape())
                throw std::invalid_argument("cell inputs disagree: " + shape_str(in.shape()) + " vs " +
                                            shape_str(inputs[0].shape()));
        std::vector<Var> states(inputs.begin(), inputs.end());
        for (int j = spec_.num_inputs; j < spec_.total_nodes(); ++j) {
            std::vector<Var> terms;
            for (int e : spec_.incoming(j)) {
                Var t = edges_[e].forward(states[spec_.edges[e].from], weights, e, ctx);
                if (t.defined()) terms.push_back(t);
            }
            if (terms.empty()) {
                const auto& s = inputs[0].shape();
                const int f = reduction_ ? 2 : 1;
                terms.push_back(Var::constant(Tensor({s[0], c_, s[2] / f, s[3] / f})));
            }
            states.push_back(terms.size() == 1 ? terms[0] : add_n(terms));
        }
        if (output_ == CellOutput::last_node) return states.back();
        return concat_channels(std::vector<Var>(states.begin() + spec_.num_inputs, states.end()));
    }

    const MixedOp& edge(int e) const { return edges_.at(e); }
    int out_channels() const { return output_ == CellOutput::last_node ? c_ : c_ * spec_.num_nodes; }

private:
    CellSpec spec_;
    CellOutput output_;
    bool reduction_;
    int c_;
    std::vector<MixedOp> edges_;
};

/// Weight-sharing encoder: stem, stacked relaxed cells, three resolution taps.
class Supernet {
public:
    Supernet(const SupernetConfig& cfg, ParamStore& ps) : cfg_(cfg) {
        cfg.validate();
        const auto red = cfg.reductions();
        is_reduction_.assign(static_cast<size_t>(cfg.num_cells), false);
        for (int r : red) is_reduction_[r] = true;
        const OpOptions opt{false, cfg.space.macro == Macro::darts};
        const int C = cfg.init_channels;

        if (cfg.space.macro == Macro::darts) {
            const int c_stem = cfg.stem_multiplier * C;
            stem_conv_ = Conv2d(ps, "stem.conv", cfg.in_channels, c_stem, 3, {1, 1, 1, 1});
            stem_bn_ = BatchNorm2d(ps, "stem.bn", c_stem, true);
            int c_pp = c_stem, c_p = c_stem, c_cur = C;
            bool red_prev = false;
            for (int i = 0; i < cfg.num_cells; ++i) {
                const bool red_i = is_reduction_[i];
                if (red_i) c_cur *= 2;
                const std::string name = "cell" + std::to_string(i);
                Layer L;
                if (red_prev) L.pre0 = std::make_unique<FactorizedReduce>(ps, name + ".pre0", c_pp, c_cur, false);
                else L.pre0 = std::make_unique<ReLUConvBN>(ps, name + ".pre0", c_pp, c_cur, 1, 1, 0, false);
                L.pre1 = std::make_unique<ReLUConvBN>(ps, name + ".pre1", c_p, c_cur, 1, 1, 0, false);
                const CellSpec& spec = red_i ? *cfg.space.reduction : cfg.space.normal;
                L.cell = std::make_unique<SearchCell>(ps, name, spec, c_cur, red_i, opt, CellOutput::concat_nodes);
                L.kind = spec.cell_kind;
                c_pp = c_p;
                c_p = L.cell->out_channels();
                out_channels_.push_back(c_p);
                layers_.push_back(std::move(L));
                red_prev = red_i;
            }
        } else {
            stem_conv_ = Conv2d(ps, "stem.conv", cfg.in_channels, C, 3, {1, 1, 1, 1});
            stem_bn_ = BatchNorm2d(ps, "stem.bn", C, true);
            int c = C;
            for (int i = 0; i < cfg.num_cells; ++i) {
                const std::string name = "layer" + std::to_string(i);
                Layer L;
                if (is_reduction_[i]) {
                    L.resblock = std::make_unique<ResidualReduction>(ps, name, c, 2 * c, false);
                    c *= 2;
                } else {
                    L.cell = std::make_unique<SearchCell>(ps, name, cfg.space.normal, c, false, opt, CellOutput::last_node);
                    L.kind = CellKind::normal;
                }
                out_channels_.push_back(c);
                layers_.push_back(std::move(L));
            }
        }
    }

    FeaturePyramid forward_features(const Var& images, const CellWeights& weights, const ForwardContext& ctx) const {
        const auto red = cfg_.reductions();
        const int tap1 = red[0] - 1, tap2 = red[1] - 1, tap3 = cfg_.num_cells - 1;
        FeaturePyramid pyr;
        Var stem = stem_bn_(stem_conv_(images), ctx);
        Var s0 = stem, s1 = stem;
        for (int i = 0; i < cfg_.num_cells; ++i) {
            const Layer& L = layers_[i];
            Var out;
            if (L.resblock) {
                out = L.resblock->forward(s1, ctx);
            } else if (cfg_.space.macro == Macro::darts) {
                out = L.cell->forward({L.pre0->forward(s0, ctx), L.pre1->forward(s1, ctx)}, weights_for(weights, L.kind), ctx);
            } else {
                out = L.cell->forward({s1}, weights_for(weights, L.kind), ctx);
            }
            s0 = s1;
            s1 = out;
            if (i == tap1) pyr.f1 = out;
            if (i == tap2) pyr.f2 = out;
            if (i == tap3) pyr.f3 = out;
        }
        return pyr;
    }

    /// Channel counts of F1, F2, F3.
    std::array<int, 3> pyramid_channels() const {
        const auto red = cfg_.reductions();
        return {out_channels_[red[0] - 1], out_channels_[red[1] - 1], out_channels_.back()};
    }

    const SupernetConfig& config() const { return cfg_; }

    /// The relaxed cell at a layer, or nullptr for a fixed residual block.
    const SearchCell* cell(int layer) const { return layers_.at(layer).cell.get(); }

private:
    struct Layer {
        std::unique_ptr<CandidateOp> pre0, pre1;
        std::unique_ptr<SearchCell> cell;
        std::unique_ptr<ResidualReduction> resblock;
        CellKind kind = CellKind::normal;
    };

    static const Var& weights_for(const CellWeights& w, CellKind k) {
        auto it = w.find(k);
        if (it == w.end()) throw std::invalid_argument("no mixing weights for " + cell_kind_name(k) + " cells");
        return it->second;
    }

    SupernetConfig cfg_;
    Conv2d stem_conv_;
    BatchNorm2d stem_bn_;
    std::vector<Layer> layers_;
    std::vector<bool> is_reduction_;
    std::vector<int> out_channels_;
};

} // namespace maenas
