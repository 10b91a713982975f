#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "maenas/objective.hpp"
#include "maenas/retrain.hpp"

namespace maenas {

namespace detail {

inline int64_t merge_count(std::vector<double>& v, std::vector<double>& tmp, size_t lo, size_t hi) {
    if (hi - lo < 2) return 0;
    const size_t mid = lo + (hi - lo) / 2;
    int64_t inv = merge_count(v, tmp, lo, mid) + merge_count(v, tmp, mid, hi);
    size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            inv += static_cast<int64_t>(mid - i);
            tmp[k++] = v[j++];
        } else {
            tmp[k++] = v[i++];
        }
    }
    while (i < mid) tmp[k++] = v[i++];
    while (j < hi) tmp[k++] = v[j++];
    std::copy(tmp.begin() + static_cast<std::ptrdiff_t>(lo), tmp.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return inv;
}

// pairs tied within runs of equal values of a sorted sequence
template <class Eq>
int64_t tied_pairs(size_t n, Eq eq) {
    int64_t t = 0;
    size_t run = 1;
    for (size_t i = 1; i <= n; ++i) {
        if (i < n && eq(i - 1, i)) {
            ++run;
        } else {
            t += static_cast<int64_t>(run * (run - 1) / 2);
            run = 1;
        }
    }
    return t;
}

} // namespace detail

/// (concordant - discordant) / total pairs, O(n log n). Tied pairs count as neither.
inline double kendall_tau(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("kendall_tau: length mismatch (" + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
    const size_t n = a.size();
    if (n < 2) throw std::invalid_argument("kendall_tau: need at least 2 items");
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return a[i] != a[j] ? a[i] < a[j] : b[i] < b[j]; });
    std::vector<double> bs(n), tmp(n);
    for (size_t i = 0; i < n; ++i) bs[i] = b[idx[i]];
    const int64_t ties_a = detail::tied_pairs(n, [&](size_t i, size_t j) { return a[idx[i]] == a[idx[j]]; });
    const int64_t ties_ab = detail::tied_pairs(n, [&](size_t i, size_t j) {
        return a[idx[i]] == a[idx[j]] && b[idx[i]] == b[idx[j]];
    });
    const int64_t discordant = detail::merge_count(bs, tmp, 0, n);
    const int64_t ties_b = detail::tied_pairs(n, [&](size_t i, size_t j) { return bs[i] == bs[j]; });
    const int64_t total = static_cast<int64_t>(n * (n - 1) / 2);
    const int64_t concordant = total - ties_a - ties_b + ties_ab - discordant;
    return static_cast<double>(concordant - discordant) / static_cast<double>(total);
}

inline double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
    return kendall_tau(std::span<const double>(a), std::span<const double>(b));
}

/// Indices ordered best-first by descending score; equal scores keep ascending model id.
inline std::vector<int> ranking_order(std::span<const double> scores) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return scores[i] > scores[j]; });
    return order;
}

/// rank[i] = position of model i in ranking_order (0 = best).
inline std::vector<int> ranks_from_scores(std::span<const double> scores) {
    const auto order = ranking_order(scores);
    std::vector<int> rank(scores.size());
    for (size_t p = 0; p < order.size(); ++p) rank[static_cast<size_t>(order[p])] = static_cast<int>(p);
    return rank;
}

inline bool has_ties(std::span<const double> scores) {
    std::vector<double> s(scores.begin(), scores.end());
    std::sort(s.begin(), s.end());
    return std::adjacent_find(s.begin(), s.end()) != s.end();
}

/// One-sided p-value: share of seeded permutations of `b` whose tau with `a` is at least the observed tau.
inline double permutation_p_value(std::span<const double> a, std::span<const double> b, int permutations,
                                  uint64_t seed) {
    if (permutations < 1) throw std::invalid_argument("permutation_p_value: permutations must be >= 1");
    const double observed = kendall_tau(a, b);
    std::vector<double> shuffled(b.begin(), b.end());
    auto rng = rng_for(seed, {0x7065726dULL});
    int at_least = 0;
    for (int p = 0; p < permutations; ++p) {
        for (size_t i = shuffled.size() - 1; i > 0; --i) std::swap(shuffled[i], shuffled[uniform_index(rng, i + 1)]);
        if (kendall_tau(a, shuffled) >= observed - 1e-12) ++at_least;
    }
    return (at_least + 1.0) / (permutations + 1.0);
}

// ---- genotype enumeration -------------------------------------------------

/// Number of distinct genotypes of a single-cell every-edge space.
inline int64_t genotype_space_size(const SearchSpace& space) {
    const CellSpec& spec = space.normal;
    if (space.reduction || spec.selection != EdgeSelection::every_edge)
        throw std::invalid_argument("genotype enumeration needs a single every-edge cell");
    int k = 0;
    for (OpKind o : spec.op_set) k += o != OpKind::none;
    int64_t total = 1;
    for (int e = 0; e < spec.num_edges(); ++e) {
        if (total > (int64_t{1} << 40) / std::max(k, 1)) throw std::invalid_argument("genotype space too large to enumerate");
        total *= k;
    }
    return total;
}

/// The genotype with mixed-radix index `id`: edge e gets op digit e (edge 0 least significant), ops in op_set order.
inline Genotype genotype_from_index(const SearchSpace& space, int64_t id) {
    const int64_t total = genotype_space_size(space);
    if (id < 0 || id >= total) throw std::out_of_range("genotype index " + std::to_string(id) + " outside the space");
    const CellSpec& spec = space.normal;
    std::vector<OpKind> ops;
    for (OpKind o : spec.op_set)
        if (o != OpKind::none) ops.push_back(o);
    const int64_t K = static_cast<int64_t>(ops.size());
    CellGenotype cg(static_cast<size_t>(spec.num_nodes));
    for (int e = 0; e < spec.num_edges(); ++e) {
        const Edge& ed = spec.edges[static_cast<size_t>(e)];
        cg[static_cast<size_t>(ed.to - spec.num_inputs)].push_back({ops[static_cast<size_t>(id % K)], ed.from});
        id /= K;
    }
    for (auto& node : cg)
        std::sort(node.begin(), node.end(), [](const auto& x, const auto& y) { return x.predecessor < y.predecessor; });
    Genotype g;
    g.cells[CellKind::normal] = std::move(cg);
    return g;
}

inline std::vector<Genotype> enumerate_genotypes(const SearchSpace& space) {
    const int64_t total = genotype_space_size(space);
    std::vector<Genotype> out;
    out.reserve(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) out.push_back(genotype_from_index(space, i));
    return out;
}

/// `n` distinct genotype indices drawn without replacement, in draw order.
inline std::vector<int64_t> sample_genotype_indices(const SearchSpace& space, int n, uint64_t seed) {
    const int64_t total = genotype_space_size(space);
    if (n < 0 || n > total)
        throw std::invalid_argument("sample_n " + std::to_string(n) + " exceeds the space size " + std::to_string(total));
    std::vector<int64_t> ids(static_cast<size_t>(total));
    std::iota(ids.begin(), ids.end(), int64_t{0});
    auto rng = rng_for(seed, {0x62656e6368ULL});
    for (int i = 0; i < n; ++i) {
        const uint64_t j = static_cast<uint64_t>(i) + uniform_index(rng, static_cast<uint64_t>(total - i));
        std::swap(ids[static_cast<size_t>(i)], ids[j]);
    }
    ids.resize(static_cast<size_t>(n));
    return ids;
}

// ---- micro-benchmark ------------------------------------------------------

struct MicroBenchEntry {
    int model_id = 0;
    int64_t genotype_index = 0;
    Genotype genotype;
    double accuracy = 0;      // ground truth, final epoch
    double best_accuracy = 0;
    int epochs = 0;
    uint64_t train_seed = 0;
    size_t params = 0;
    double seconds = 0;
    std::optional<double> reconstruction_score;
};

inline nlohmann::json bench_entry_json(const MicroBenchEntry& e) {
    nlohmann::json j = {{"model_id", e.model_id},
                        {"genotype_index", e.genotype_index},
                        {"genotype", genotype_to_json(e.genotype)},
                        {"genotype_hash", genotype_hash(e.genotype)},
                        {"accuracy", e.accuracy},
                        {"best_accuracy", e.best_accuracy},
                        {"epochs", e.epochs},
                        {"train_seed", e.train_seed},
                        {"params", e.params},
                        {"seconds", e.seconds}};
    if (e.reconstruction_score) j["reconstruction_score"] = *e.reconstruction_score;
    return j;
}

inline MicroBenchEntry bench_entry_from_json(const nlohmann::json& j) {
    MicroBenchEntry e;
    e.model_id = j.at("model_id").get<int>();
    e.genotype_index = j.at("genotype_index").get<int64_t>();
    e.genotype = genotype_from_json(j.at("genotype"));
    e.accuracy = j.at("accuracy").get<double>();
    e.best_accuracy = j.at("best_accuracy").get<double>();
    e.epochs = j.at("epochs").get<int>();
    e.train_seed = j.at("train_seed").get<uint64_t>();
    e.params = j.at("params").get<size_t>();
    e.seconds = j.value("seconds", 0.0);
    if (j.contains("reconstruction_score")) e.reconstruction_score = j.at("reconstruction_score").get<double>();
    if (!(e.accuracy >= 0.0 && e.accuracy <= 1.0))
        throw std::invalid_argument("bench entry " + std::to_string(e.model_id) + ": accuracy outside [0, 1]");
    return e;
}

struct MicroBench {
    std::vector<MicroBenchEntry> entries;
    int requested = 0;
    bool partial = false;
};

inline std::vector<MicroBenchEntry> read_bench_store(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p))
        throw std::runtime_error("bench file " + p.string() + " not found; run the bench command first");
    std::vector<MicroBenchEntry> out;
    std::istringstream in(read_text(p));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(bench_entry_from_json(nlohmann::json::parse(line)));
    return out;
}

struct BenchBudget {
    RetrainConfig train;
    double max_seconds = 0; // wall-clock limit for the whole bench; 0 = none
};

inline uint64_t bench_train_seed(uint64_t seed, int model_id) {
    auto r = rng_for(seed, {0x7472616eULL, static_cast<uint64_t>(model_id)});
    return r() >> 1;
}

/// Trains `sample_n` seeded-sampled genotypes from scratch. Entries already present in `store` (same model id and
/// genotype) are reused; new ones are appended as they finish. Stops early, flagged partial, when the budget runs out.
inline MicroBench build_micro_bench(const SearchSpace& space, int sample_n, const BenchBudget& budget,
                                    const LabeledSet& train, const LabeledSet& test, uint64_t seed,
                                    const std::filesystem::path& store = {},
                                    const std::function<void(const MicroBenchEntry&)>& on_entry = {}) {
    const auto ids = sample_genotype_indices(space, sample_n, seed);
    std::vector<MicroBenchEntry> cached;
    if (!store.empty() && std::filesystem::exists(store)) cached = read_bench_store(store);
    MicroBench bench;
    bench.requested = sample_n;
    const auto t0 = std::chrono::steady_clock::now();
    for (int m = 0; m < sample_n; ++m) {
        auto hit = std::find_if(cached.begin(), cached.end(), [&](const MicroBenchEntry& e) {
            return e.model_id == m && e.genotype_index == ids[static_cast<size_t>(m)];
        });
        if (hit != cached.end()) {
            bench.entries.push_back(*hit);
            continue;
        }
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (budget.max_seconds > 0 && elapsed >= budget.max_seconds) {
            bench.partial = true;
            break;
        }
        MicroBenchEntry e;
        e.model_id = m;
        e.genotype_index = ids[static_cast<size_t>(m)];
        e.genotype = genotype_from_index(space, e.genotype_index);
        RetrainConfig rc = budget.train;
        rc.seed = bench_train_seed(seed, m);
        DiscreteNetwork net(e.genotype, space, rc, train.num_classes);
        const TrainResult r = train_from_scratch(net, train, test);
        e.accuracy = r.final_accuracy;
        e.best_accuracy = r.best_accuracy;
        e.epochs = rc.epochs;
        e.train_seed = rc.seed;
        e.params = net.summarize(train.images.height(), train.images.width()).parameters;
        e.seconds = r.seconds;
        if (!store.empty()) append_line(store, bench_entry_json(e).dump());
        if (on_entry) on_entry(e);
        bench.entries.push_back(std::move(e));
    }
    return bench;
}

// ---- reconstruction ranking -----------------------------------------------

/// Reconstruction score of each genotype as a child of the trained supernet (inherited weights, shared masks).
inline std::vector<double> reconstruction_scores(MaskedAutoencoder& supernet, const std::vector<Genotype>& genotypes,
                                                 const ImageSet& eval_set, const ScoreOptions& opt) {
    std::vector<double> s;
    s.reserve(genotypes.size());
    for (const auto& g : genotypes)
        s.push_back(reconstruction_score(supernet, child_weights(g, supernet.config().supernet.space), eval_set, opt));
    return s;
}

/// Genotype positions ordered by descending reconstruction score.
inline std::vector<int> rank_by_reconstruction(MaskedAutoencoder& supernet, const std::vector<Genotype>& genotypes,
                                               const ImageSet& eval_set, const ScoreOptions& opt) {
    const auto s = reconstruction_scores(supernet, genotypes, eval_set, opt);
    return ranking_order(s);
}

struct RankingReport {
    double tau = 0;
    int n_models = 0;
    double p_value = 1;
    int permutations = 0;
    std::vector<int> accuracy_ranking; // model positions, best first
    std::vector<int> score_ranking;
    bool accuracy_ties = false;
    bool score_ties = false;
};

/// Kendall tau between the accuracy ranking and the reconstruction-score ranking (ties broken by model id).
inline RankingReport correlation_report(std::span<const double> accuracy, std::span<const double> scores,
                                        int permutations = 10000, uint64_t seed = 0) {
    if (accuracy.empty()) throw std::invalid_argument("correlation_report: empty bench");
    if (accuracy.size() != scores.size()) throw std::invalid_argument("correlation_report: score count mismatch");
    RankingReport r;
    r.n_models = static_cast<int>(accuracy.size());
    r.accuracy_ranking = ranking_order(accuracy);
    r.score_ranking = ranking_order(scores);
    r.accuracy_ties = has_ties(accuracy);
    r.score_ties = has_ties(scores);
    r.permutations = permutations;
    if (r.n_models < 2) return r;
    // ranks are 0 = best; negate so larger means better on both sides
    auto to_key = [](const std::vector<int>& ranks) {
        std::vector<double> k;
        for (int x : ranks) k.push_back(-static_cast<double>(x));
        return k;
    };
    const auto ka = to_key(ranks_from_scores(accuracy));
    const auto kb = to_key(ranks_from_scores(scores));
    r.tau = kendall_tau(ka, kb);
    r.p_value = permutation_p_value(ka, kb, permutations, seed);
    return r;
}

inline nlohmann::json ranking_report_json(const RankingReport& r) {
    return {{"tau", r.tau},
            {"n_models", r.n_models},
            {"p_value", r.p_value},
            {"permutations", r.permutations},
            {"accuracy_ranking", r.accuracy_ranking},
            {"score_ranking", r.score_ranking},
            {"accuracy_ties", r.accuracy_ties},
            {"score_ties", r.score_ties}};
}

/// Bar per dataset of Kendall tau, on a [-1, 1] axis.
inline std::string tau_bar_svg(const std::vector<std::pair<std::string, double>>& bars) {
    const double W = 120.0 + 90.0 * static_cast<double>(bars.size()), H = 300, L = 50, T = 20, B = 40;
    const double mid = T + (H - T - B) / 2, half = (H - T - B) / 2;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << mid << "\" x2=\"" << W - 10 << "\" y2=\"" << mid << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << T + 4 << "\" font-size=\"11\" text-anchor=\"end\">1</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << H - B + 4 << "\" font-size=\"11\" text-anchor=\"end\">-1</text>\n";
    os << "<text x=\"14\" y=\"" << mid << "\" font-size=\"12\" transform=\"rotate(-90 14 " << mid
       << ")\" text-anchor=\"middle\">Kendall tau</text>\n";
    for (size_t i = 0; i < bars.size(); ++i) {
        const double tau = std::clamp(bars[i].second, -1.0, 1.0);
        const double x = L + 30 + 90.0 * static_cast<double>(i);
        const double y = tau >= 0 ? mid - tau * half : mid;
        os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"50\" height=\"" << std::abs(tau) * half
           << "\" fill=\"steelblue\"/>\n";
        os << "<text x=\"" << x + 25 << "\" y=\"" << H - B + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
           << bars[i].first << "</text>\n";
        os << "<text x=\"" << x + 25 << "\" y=\"" << (tau >= 0 ? y - 4 : y + std::abs(tau) * half + 12)
           << "\" font-size=\"11\" text-anchor=\"middle\">" << std::round(tau * 1000) / 1000 << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace maenas
