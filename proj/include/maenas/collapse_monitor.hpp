#pragma once

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "maenas/search_space.hpp"

namespace maenas {

struct SkipCounts {
    int normal = 0;
    int reduction = 0;
};

/// skip_connect entries per cell kind. Throws on a genotype that fails validation.
inline SkipCounts count_skip_connections(const Genotype& g, const SearchSpace& space) {
    auto problems = validate_genotype(g, space);
    if (!problems.empty()) throw std::invalid_argument("invalid genotype: " + problems.front());
    SkipCounts c;
    for (const auto& [kind, nodes] : g.cells) {
        int n = 0;
        for (const auto& node : nodes)
            for (const auto& e : node) n += e.op == OpKind::skip_connect;
        (kind == CellKind::normal ? c.normal : c.reduction) = n;
    }
    return c;
}

/// One architecture snapshot, taken at the start of the search and after every epoch.
struct AlphaSnapshot {
    int epoch = 0;
    int64_t step = 0;
    ArchParams alpha;
};

/// Per snapshot, per edge of `kind` cells: the softmax weight of skip_connect.
inline std::vector<std::vector<double>> dominance_trace(const std::vector<AlphaSnapshot>& history,
                                                        const SearchSpace& space, CellKind kind = CellKind::normal) {
    const CellSpec& spec = space.cell(kind);
    const int k = spec.op_index(OpKind::skip_connect);
    std::vector<std::vector<double>> out;
    out.reserve(history.size());
    for (const auto& snap : history) {
        std::vector<double> row;
        for (int e = 0; e < spec.num_edges(); ++e) row.push_back(k < 0 ? 0.0 : edge_weights(snap.alpha, spec, e)[k]);
        out.push_back(std::move(row));
    }
    return out;
}

struct CollapseReport {
    int skip_count_normal = 0;
    int skip_count_reduction = 0;
    int threshold = 4;
    bool collapsed = false;
    std::vector<int> epochs;
    std::vector<std::vector<double>> dominance; // [snapshot][edge], normal cell
};

inline bool collapse_flag(const CollapseReport& r) { return r.skip_count_normal >= r.threshold; }

inline CollapseReport make_collapse_report(const Genotype& g, const SearchSpace& space,
                                           const std::vector<AlphaSnapshot>& history, int threshold = 4) {
    CollapseReport r;
    const SkipCounts c = count_skip_connections(g, space);
    r.skip_count_normal = c.normal;
    r.skip_count_reduction = c.reduction;
    r.threshold = threshold;
    r.collapsed = collapse_flag(r);
    for (const auto& s : history) r.epochs.push_back(s.epoch);
    r.dominance = dominance_trace(history, space, CellKind::normal);
    return r;
}

inline nlohmann::json collapse_report_json(const CollapseReport& r) {
    return {{"skip_count_normal", r.skip_count_normal},
            {"skip_count_reduction", r.skip_count_reduction},
            {"threshold", r.threshold},
            {"collapsed", r.collapsed},
            {"epochs", r.epochs},
            {"skip_weight_per_edge", r.dominance}};
}

/// Line plot of skip weight per edge over snapshots, plain SVG.
inline std::string dominance_svg(const CollapseReport& r) {
    const double W = 640, H = 360, L = 50, R = 20, T = 20, B = 40;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"" << H - 8 << "\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n";
    os << "<text x=\"12\" y=\"" << H / 2 << "\" font-size=\"12\" transform=\"rotate(-90 12 " << H / 2
       << ")\" text-anchor=\"middle\">skip weight</text>\n";
    const size_t n = r.dominance.size();
    if (n == 0) {
        os << "</svg>\n";
        return os.str();
    }
    double ymax = 0;
    for (const auto& row : r.dominance)
        for (double v : row) ymax = std::max(ymax, v);
    ymax = ymax > 0 ? ymax * 1.05 : 1.0;
    const int last_epoch = r.epochs.empty() ? 1 : std::max(1, r.epochs.back());
    auto px = [&](size_t i) { return L + (W - L - R) * (r.epochs.empty() ? 0.0 : double(r.epochs[i]) / last_epoch); };
    auto py = [&](double v) { return H - B - (H - T - B) * v / ymax; };
    const size_t edges = r.dominance.front().size();
    for (size_t e = 0; e < edges; ++e) {
        char color[16];
        std::snprintf(color, sizeof color, "hsl(%d,60%%,45%%)", static_cast<int>(360 * e / std::max<size_t>(edges, 1)));
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
        for (size_t i = 0; i < n; ++i) os << px(i) << ',' << py(r.dominance[i][e]) << ' ';
        os << "\"/>\n";
    }
    os << "<text x=\"" << L + 4 << "\" y=\"" << T + 10 << "\" font-size=\"11\">max " << ymax / 1.05 << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

} // namespace maenas
