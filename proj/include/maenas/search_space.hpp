#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "maenas/autograd.hpp"
#include "maenas/io.hpp"

namespace maenas {

using json = nlohmann::json;

enum class OpKind {
    none,
    skip_connect,
    sep_conv_3x3,
    sep_conv_5x5,
    dil_conv_3x3,
    dil_conv_5x5,
    max_pool_3x3,
    avg_pool_3x3,
    conv_1x1,
    conv_3x3,
};

struct OperationKind {
    OpKind id;
    std::string_view name;
    bool is_parametric;
    bool is_skip;
};

inline constexpr std::array<OperationKind, 10> kOperationTable{{
    {OpKind::none, "none", false, false},
    {OpKind::skip_connect, "skip_connect", false, true},
    {OpKind::sep_conv_3x3, "sep_conv_3x3", true, false},
    {OpKind::sep_conv_5x5, "sep_conv_5x5", true, false},
    {OpKind::dil_conv_3x3, "dil_conv_3x3", true, false},
    {OpKind::dil_conv_5x5, "dil_conv_5x5", true, false},
    {OpKind::max_pool_3x3, "max_pool_3x3", false, false},
    {OpKind::avg_pool_3x3, "avg_pool_3x3", false, false},
    {OpKind::conv_1x1, "conv_1x1", true, false},
    {OpKind::conv_3x3, "conv_3x3", true, false},
}};

inline const OperationKind& op_info(OpKind k) { return kOperationTable[static_cast<size_t>(k)]; }
inline std::string op_name(OpKind k) { return std::string(op_info(k).name); }

inline OpKind op_from_name(std::string_view name) {
    for (const auto& o : kOperationTable)
        if (o.name == name) return o.id;
    throw std::invalid_argument("unknown operation '" + std::string(name) + "'");
}

inline std::vector<OpKind> darts_op_set() {
    return {OpKind::none,         OpKind::max_pool_3x3, OpKind::avg_pool_3x3, OpKind::skip_connect,
            OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3, OpKind::dil_conv_5x5};
}

inline std::vector<OpKind> nb201_op_set() {
    return {OpKind::none, OpKind::skip_connect, OpKind::conv_1x1, OpKind::conv_3x3, OpKind::avg_pool_3x3};
}

enum class CellKind { normal, reduction };

inline std::string cell_kind_name(CellKind k) { return k == CellKind::normal ? "normal" : "reduction"; }

inline CellKind cell_kind_from_name(std::string_view s) {
    if (s == "normal") return CellKind::normal;
    if (s == "reduction") return CellKind::reduction;
    throw std::invalid_argument("unknown cell kind '" + std::string(s) + "'");
}

/// How a cell is discretized: DARTS keeps the two strongest inputs per node,
/// NAS-Bench-201 style cells keep one operation on every edge.
enum class EdgeSelection { top2, every_edge };

enum class Macro { darts, nb201 };

inline std::string macro_name(Macro m) { return m == Macro::darts ? "darts" : "nb201"; }
inline Macro macro_from_name(std::string_view s) {
    if (s == "darts") return Macro::darts;
    if (s == "nb201") return Macro::nb201;
    throw std::invalid_argument("unknown search space '" + std::string(s) + "' (expected darts or nb201)");
}

struct Edge {
    int from;
    int to;
    bool operator==(const Edge&) const = default;
};

/// Node numbering: cell inputs are 0..num_inputs-1, intermediate nodes follow.
struct CellSpec {
    int num_inputs = 2;
    int num_nodes = 4;
    std::vector<Edge> edges;
    std::vector<OpKind> op_set;
    CellKind cell_kind = CellKind::normal;
    EdgeSelection selection = EdgeSelection::top2;

    int total_nodes() const { return num_inputs + num_nodes; }
    int num_edges() const { return static_cast<int>(edges.size()); }
    int num_ops() const { return static_cast<int>(op_set.size()); }

    std::vector<int> incoming(int node) const {
        std::vector<int> idx;
        for (int e = 0; e < num_edges(); ++e)
            if (edges[e].to == node) idx.push_back(e);
        return idx;
    }

    std::optional<int> find_edge(int from, int to) const {
        for (int e = 0; e < num_edges(); ++e)
            if (edges[e].from == from && edges[e].to == to) return e;
        return std::nullopt;
    }

    int op_index(OpKind k) const {
        auto it = std::find(op_set.begin(), op_set.end(), k);
        return it == op_set.end() ? -1 : static_cast<int>(it - op_set.begin());
    }

    /// Fully connected DAG: every earlier node feeds every intermediate node.
    static CellSpec dense(int num_inputs, int num_nodes, std::vector<OpKind> ops, CellKind kind, EdgeSelection sel) {
        CellSpec s;
        s.num_inputs = num_inputs;
        s.num_nodes = num_nodes;
        s.op_set = std::move(ops);
        s.cell_kind = kind;
        s.selection = sel;
        for (int j = num_inputs; j < num_inputs + num_nodes; ++j)
            for (int i = 0; i < j; ++i) s.edges.push_back({i, j});
        s.validate();
        return s;
    }

    void validate() const {
        if (num_inputs < 1 || num_nodes < 1) throw std::invalid_argument("cell needs at least one input and one node");
        if (op_set.empty()) throw std::invalid_argument("cell op_set is empty");
        for (size_t i = 0; i < op_set.size(); ++i)
            for (size_t j = i + 1; j < op_set.size(); ++j)
                if (op_set[i] == op_set[j]) throw std::invalid_argument("duplicate op " + op_name(op_set[i]) + " in op_set");
        for (const auto& e : edges) {
            if (e.from < 0 || e.from >= e.to || e.to < num_inputs || e.to >= total_nodes())
                throw std::invalid_argument("illegal edge " + std::to_string(e.from) + "->" + std::to_string(e.to));
        }
        const size_t min_in = selection == EdgeSelection::top2 ? 2 : 1;
        for (int j = num_inputs; j < total_nodes(); ++j)
            if (incoming(j).size() < min_in)
                throw std::invalid_argument("node " + std::to_string(j) + " has fewer than " + std::to_string(min_in) +
                                            " incoming edges");
    }
};

struct SearchSpace {
    Macro macro = Macro::darts;
    CellSpec normal;
    std::optional<CellSpec> reduction;

    static SearchSpace darts(std::vector<OpKind> ops = darts_op_set(), int nodes = 4) {
        SearchSpace s;
        s.macro = Macro::darts;
        s.normal = CellSpec::dense(2, nodes, ops, CellKind::normal, EdgeSelection::top2);
        s.reduction = CellSpec::dense(2, nodes, ops, CellKind::reduction, EdgeSelection::top2);
        return s;
    }

    static SearchSpace nb201(std::vector<OpKind> ops = nb201_op_set(), int nodes = 3) {
        SearchSpace s;
        s.macro = Macro::nb201;
        s.normal = CellSpec::dense(1, nodes, std::move(ops), CellKind::normal, EdgeSelection::every_edge);
        return s;
    }

    std::vector<const CellSpec*> cells() const {
        std::vector<const CellSpec*> v{&normal};
        if (reduction) v.push_back(&*reduction);
        return v;
    }

    const CellSpec& cell(CellKind k) const {
        if (k == CellKind::normal) return normal;
        if (!reduction) throw std::invalid_argument("search space has no reduction cell");
        return *reduction;
    }
};

/// Continuous architecture parameters: one (edges x ops) matrix per searchable cell kind.
struct ArchParams {
    std::map<CellKind, Var> alpha;

    static ArchParams zeros(const SearchSpace& space) {
        ArchParams a;
        for (const CellSpec* c : space.cells())
            a.alpha[c->cell_kind] = Var::leaf(Tensor({c->num_edges(), c->num_ops()}));
        return a;
    }

    /// Small random init around zero.
    static ArchParams random(const SearchSpace& space, std::mt19937_64& rng, double scale = 1e-3) {
        ArchParams a = zeros(space);
        for (auto& [k, v] : a.alpha)
            for (float& x : v.mutable_value().values()) x = static_cast<float>(scale * standard_normal(rng));
        return a;
    }

    const Var& of(CellKind k) const {
        auto it = alpha.find(k);
        if (it == alpha.end()) throw std::invalid_argument("no architecture parameters for " + cell_kind_name(k) + " cells");
        return it->second;
    }

    bool all_finite() const {
        return std::all_of(alpha.begin(), alpha.end(), [](const auto& kv) { return kv.second.value().all_finite(); });
    }

    std::vector<Var> vars() const {
        std::vector<Var> v;
        for (const auto& [k, a] : alpha) v.push_back(a);
        return v;
    }

    ArchParams clone() const {
        ArchParams a;
        for (const auto& [k, v] : alpha) a.alpha[k] = Var::leaf(v.value());
        return a;
    }
};

inline std::vector<double> softmax(std::span<const float> row) {
    double m = -INFINITY;
    for (float v : row) m = std::max(m, static_cast<double>(v));
    std::vector<double> p(row.size());
    double s = 0;
    for (size_t i = 0; i < row.size(); ++i) s += p[i] = std::exp(static_cast<double>(row[i]) - m);
    for (double& v : p) v /= s;
    return p;
}

/// Mixture weights of one edge of a cell.
inline std::vector<double> edge_weights(const ArchParams& arch, const CellSpec& spec, int edge) {
    if (edge < 0 || edge >= spec.num_edges())
        throw std::out_of_range("unknown edge #" + std::to_string(edge) + " in " + cell_kind_name(spec.cell_kind) + " cell");
    const Tensor& a = arch.of(spec.cell_kind).value();
    if (a.dim(0) != spec.num_edges() || a.dim(1) != spec.num_ops())
        throw std::invalid_argument("architecture parameters shaped " + shape_str(a.shape()) + " do not fit the cell");
    return softmax(std::span<const float>(a.data() + static_cast<size_t>(edge) * spec.num_ops(), spec.num_ops()));
}

inline std::vector<double> edge_weights(const ArchParams& arch, const CellSpec& spec, Edge edge) {
    auto e = spec.find_edge(edge.from, edge.to);
    if (!e)
        throw std::out_of_range("unknown edge " + std::to_string(edge.from) + "->" + std::to_string(edge.to) + " in " +
                                cell_kind_name(spec.cell_kind) + " cell");
    return edge_weights(arch, spec, *e);
}

struct GenotypeEntry {
    OpKind op;
    int predecessor;
    bool operator==(const GenotypeEntry&) const = default;
};

/// Per intermediate node, the chosen (operation, predecessor) pairs.
using CellGenotype = std::vector<std::vector<GenotypeEntry>>;

struct Genotype {
    static constexpr int kSchemaVersion = 1;
    int schema_version = kSchemaVersion;
    std::map<CellKind, CellGenotype> cells;
    std::optional<std::string> config_hash;

    bool operator==(const Genotype& o) const { return schema_version == o.schema_version && cells == o.cells; }

    const CellGenotype& cell(CellKind k) const {
        auto it = cells.find(k);
        if (it == cells.end()) throw std::invalid_argument("genotype has no " + cell_kind_name(k) + " cell");
        return it->second;
    }
};

inline json genotype_to_json(const Genotype& g) {
    json kinds = json::object();
    for (const auto& [kind, nodes] : g.cells) {
        json jn = json::array();
        for (const auto& node : nodes) {
            json pairs = json::array();
            for (const auto& e : node) pairs.push_back(json::array({op_name(e.op), e.predecessor}));
            jn.push_back(pairs);
        }
        kinds[cell_kind_name(kind)] = jn;
    }
    json j = {{"schema_version", g.schema_version}, {"cell_kinds", kinds}};
    if (g.config_hash) j["config_hash"] = *g.config_hash;
    return j;
}

inline std::string genotype_to_string(const Genotype& g) { return genotype_to_json(g).dump(2) + "\n"; }

inline Genotype genotype_from_json(const json& j) {
    if (!j.is_object() || !j.contains("schema_version") || !j.contains("cell_kinds"))
        throw std::invalid_argument("genotype JSON needs schema_version and cell_kinds");
    Genotype g;
    g.schema_version = j.at("schema_version").get<int>();
    if (g.schema_version != Genotype::kSchemaVersion)
        throw std::invalid_argument("unsupported genotype schema_version " + std::to_string(g.schema_version));
    for (const auto& [key, nodes] : j.at("cell_kinds").items()) {
        CellGenotype cg;
        for (const auto& node : nodes) {
            std::vector<GenotypeEntry> entries;
            for (const auto& pair : node) {
                if (!pair.is_array() || pair.size() != 2) throw std::invalid_argument("genotype entry must be [op, predecessor]");
                entries.push_back({op_from_name(pair[0].get<std::string>()), pair[1].get<int>()});
            }
            cg.push_back(std::move(entries));
        }
        g.cells[cell_kind_from_name(key)] = std::move(cg);
    }
    for (const auto& [key, _] : j.items())
        if (key != "schema_version" && key != "cell_kinds" && key != "config_hash")
            throw std::invalid_argument("unknown genotype field '" + key + "'");
    if (j.contains("config_hash")) g.config_hash = j.at("config_hash").get<std::string>();
    return g;
}

inline Genotype genotype_from_string(std::string_view s) { return genotype_from_json(json::parse(s)); }

inline std::string genotype_hash(const Genotype& g) {
    Genotype bare = g;
    bare.config_hash.reset();
    return sha256_hex(genotype_to_string(bare)).substr(0, 16);
}

namespace detail {

struct BestOp {
    int op_index = -1;
    double weight = -1;
};

// argmax over non-none ops; strict comparison keeps the lowest op-set index on ties
inline BestOp best_non_none(const CellSpec& spec, const std::vector<double>& w) {
    BestOp b;
    for (int k = 0; k < spec.num_ops(); ++k) {
        if (spec.op_set[k] == OpKind::none) continue;
        if (w[k] > b.weight) b = {k, w[k]};
    }
    return b;
}

} // namespace detail

/// Discretizes one cell from its per-edge mixture weights (rows of `weights`).
inline CellGenotype derive_cell(const CellSpec& spec, const std::vector<std::vector<double>>& weights) {
    CellGenotype out;
    for (int j = spec.num_inputs; j < spec.total_nodes(); ++j) {
        std::vector<std::pair<int, detail::BestOp>> cands;
        for (int e : spec.incoming(j)) {
            auto best = detail::best_non_none(spec, weights[e]);
            if (best.op_index < 0) throw std::invalid_argument("op_set has no operation other than none");
            cands.emplace_back(e, best);
        }
        std::vector<GenotypeEntry> node;
        if (spec.selection == EdgeSelection::top2) {
            if (cands.size() < 2)
                throw std::invalid_argument("node " + std::to_string(j) + " has fewer than 2 candidate incoming edges");
            std::stable_sort(cands.begin(), cands.end(), [&](const auto& a, const auto& b) {
                if (a.second.weight != b.second.weight) return a.second.weight > b.second.weight;
                return spec.edges[a.first].from < spec.edges[b.first].from;
            });
            cands.resize(2);
        }
        for (const auto& [e, best] : cands) node.push_back({spec.op_set[best.op_index], spec.edges[e].from});
        std::sort(node.begin(), node.end(), [](const auto& a, const auto& b) { return a.predecessor < b.predecessor; });
        out.push_back(std::move(node));
    }
    return out;
}

inline Genotype derive_genotype(const ArchParams& arch, const SearchSpace& space) {
    Genotype g;
    for (const CellSpec* spec : space.cells()) {
        std::vector<std::vector<double>> w;
        for (int e = 0; e < spec->num_edges(); ++e) w.push_back(edge_weights(arch, *spec, e));
        g.cells[spec->cell_kind] = derive_cell(*spec, w);
    }
    return g;
}

/// Every violated genotype invariant, in a stable order. Empty means valid.
inline std::vector<std::string> validate_genotype(const Genotype& g, const SearchSpace& space) {
    std::vector<std::string> v;
    if (g.schema_version != Genotype::kSchemaVersion)
        v.push_back("schema_version " + std::to_string(g.schema_version) + " is not " +
                    std::to_string(Genotype::kSchemaVersion));
    for (const auto& [kind, _] : g.cells) {
        if (kind == CellKind::reduction && !space.reduction)
            v.push_back("reduction cell present but the search space has none");
    }
    for (const CellSpec* spec : space.cells()) {
        const std::string cname = cell_kind_name(spec->cell_kind);
        auto it = g.cells.find(spec->cell_kind);
        if (it == g.cells.end()) {
            v.push_back(cname + ": cell missing");
            continue;
        }
        const CellGenotype& cg = it->second;
        if (static_cast<int>(cg.size()) != spec->num_nodes)
            v.push_back(cname + ": " + std::to_string(cg.size()) + " nodes, expected " + std::to_string(spec->num_nodes));
        for (size_t n = 0; n < cg.size(); ++n) {
            const int node = spec->num_inputs + static_cast<int>(n);
            const std::string where = cname + " node " + std::to_string(node);
            const size_t expected =
                spec->selection == EdgeSelection::top2 ? 2 : spec->incoming(node).size();
            if (cg[n].size() != expected)
                v.push_back(where + ": " + std::to_string(cg[n].size()) + " entries, expected " + std::to_string(expected));
            std::vector<int> preds;
            for (const auto& e : cg[n]) {
                if (e.op == OpKind::none) v.push_back(where + ": operation none is not allowed");
                else if (spec->op_index(e.op) < 0) v.push_back(where + ": operation " + op_name(e.op) + " not in op_set");
                if (e.predecessor < 0 || e.predecessor >= node)
                    v.push_back(where + ": predecessor " + std::to_string(e.predecessor) + " must be in [0, " +
                                std::to_string(node) + ")");
                else if (!spec->find_edge(e.predecessor, node))
                    v.push_back(where + ": no edge from " + std::to_string(e.predecessor));
                if (std::find(preds.begin(), preds.end(), e.predecessor) != preds.end())
                    v.push_back(where + ": predecessor " + std::to_string(e.predecessor) + " used twice");
                preds.push_back(e.predecessor);
            }
        }
    }
    return v;
}

} // namespace maenas
