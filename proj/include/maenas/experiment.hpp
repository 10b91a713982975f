#pragma once

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maenas/analysis.hpp"
#include "maenas/bilevel_search.hpp"
#include "maenas/collapse_monitor.hpp"
#include "maenas/config.hpp"
#include "maenas/retrain.hpp"

namespace maenas {

struct RunOptions {
    bool overwrite = false;
    bool resume = false;
    std::ostream* log = nullptr;
};

// ---- data -----------------------------------------------------------------

/// Label-free images for the search; standardized with their own channel statistics.
inline ImageSet load_search_images(const ExperimentConfig& c) {
    RawDataset raw;
    if (c.dataset.kind == DatasetKind::synthetic) raw = make_synthetic(c.dataset.search_images, c.dataset.image_size, c.dataset.seed);
    else raw = load_cifar10(c.data_root(), true, c.dataset.search_images);
    Tensor images = std::move(raw.images);
    standardize(images, compute_channel_stats(images));
    return ImageSet{std::move(images)};
}

struct LabeledData {
    LabeledSet train, test;
};

/// Labeled train/test sets for retraining and the micro-benchmark; both standardized with train statistics.
inline LabeledData load_labeled(const ExperimentConfig& c) {
    RawDataset tr, te;
    if (c.dataset.kind == DatasetKind::synthetic) {
        tr = make_synthetic(c.dataset.train_images, c.dataset.image_size, c.dataset.seed + 1);
        te = make_synthetic(c.dataset.test_images, c.dataset.image_size, c.dataset.seed + 2);
    } else {
        tr = load_cifar10(c.data_root(), true, c.dataset.train_images);
        te = load_cifar10(c.data_root(), false, c.dataset.test_images);
    }
    const ChannelStats st = compute_channel_stats(tr.images);
    standardize(tr.images, st);
    standardize(te.images, st);
    return {LabeledSet{ImageSet{std::move(tr.images)}, std::move(tr.labels), tr.num_classes},
            LabeledSet{ImageSet{std::move(te.images)}, std::move(te.labels), te.num_classes}};
}

// ---- experiment directories -------------------------------------------------

inline void prepare_output_dir(const std::filesystem::path& dir, const RunOptions& opt) {
    namespace fs = std::filesystem;
    if (fs::exists(dir) && !fs::is_directory(dir)) throw ConfigError({"output_dir: '" + dir.string() + "' is a file"});
    if (fs::exists(dir) && !fs::is_empty(dir) && !opt.resume) {
        if (!opt.overwrite)
            throw ConfigError({"output_dir: '" + dir.string() + "' already exists and is not empty; pass --overwrite to replace it"});
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

inline void refuse_clobber(const std::filesystem::path& p, const RunOptions& opt) {
    if (std::filesystem::exists(p) && !opt.overwrite)
        throw ConfigError({"'" + p.string() + "' already exists; pass --overwrite to replace it"});
}

inline nlohmann::json config_record(const ExperimentConfig& c) {
    auto j = c.to_json();
    j["config_hash"] = c.hash();
    return j;
}

/// Reads the config.json an experiment directory was created with.
inline ExperimentConfig load_experiment_config(const std::filesystem::path& dir) {
    const auto p = dir / "config.json";
    if (!std::filesystem::exists(p))
        throw ConfigError({"'" + dir.string() + "' is not an experiment directory (no config.json); run the search command first"});
    auto j = nlohmann::json::parse(read_text(p));
    const std::string recorded = j.value("config_hash", "");
    j.erase("config_hash");
    ExperimentConfig c = parse_config(j, false);
    if (!recorded.empty() && recorded != c.hash())
        throw ConfigError({p.string() + ": config_hash " + recorded + " does not match its contents (" + c.hash() + ")"});
    return c;
}

// ---- search ----------------------------------------------------------------

struct SearchOutcome {
    Genotype genotype;
    CollapseReport collapse;
    std::filesystem::path dir;
    int64_t steps = 0;
};

inline nlohmann::json alpha_history_json(const std::vector<AlphaSnapshot>& history) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& s : history) {
        nlohmann::json row = {{"epoch", s.epoch}, {"step", s.step}};
        for (const auto& [kind, v] : s.alpha.alpha) {
            nlohmann::json m = nlohmann::json::array();
            const Tensor& t = v.value();
            for (int e = 0; e < t.dim(0); ++e)
                m.push_back(std::vector<float>(t.data() + static_cast<size_t>(e) * t.dim(1),
                                               t.data() + static_cast<size_t>(e + 1) * t.dim(1)));
            row[cell_kind_name(kind)] = m;
        }
        a.push_back(row);
    }
    return a;
}

/// Runs the bilevel search and writes config.json, checkpoints/, metrics.jsonl, genotype.json and report/.
inline SearchOutcome cmd_search(const ExperimentConfig& c, const RunOptions& opt = {}) {
    namespace fs = std::filesystem;
    const fs::path dir = c.output_path();
    prepare_output_dir(dir, opt);
    const std::string hash = c.hash();
    if (opt.resume && fs::exists(dir / "config.json")) {
        const ExperimentConfig prev = load_experiment_config(dir);
        if (prev.hash() != hash)
            throw ConfigError({"cannot resume: '" + dir.string() + "' was created by configuration " + prev.hash() +
                               ", this one is " + hash});
    }
    atomic_write(dir / "config.json", config_record(c).dump(2) + "\n");

    SearchState state(c.model, c.search);
    state.config_hash = hash;
    if (opt.resume && checkpoint_exists(dir / "checkpoints")) {
        load_checkpoint(state, dir / "checkpoints");
        if (opt.log) *opt.log << "resuming at step " << state.step << "\n";
    }
    const ImageSet data = load_search_images(c);
    SearchOptions so;
    so.checkpoint_dir = dir / "checkpoints";
    so.checkpoint_every = c.checkpoint_every;
    so.metrics_path = dir / "metrics.jsonl";
    if (opt.log)
        so.on_step = [&](const StepMetrics& m) {
            *opt.log << "step " << m.step << " epoch " << m.epoch << " train " << std::setprecision(5) << m.train_loss
                     << " val " << m.val_loss << " skips " << m.skip_count_snapshot << "\n";
        };
    SearchResult res = run_search(state, data, so);

    SearchOutcome out;
    out.dir = dir;
    out.steps = state.step;
    out.genotype = res.genotype;
    out.genotype.config_hash = hash;
    atomic_write(dir / "genotype.json", genotype_to_string(out.genotype));
    out.collapse = make_collapse_report(out.genotype, state.space(), state.history, c.collapse_threshold);
    auto cj = collapse_report_json(out.collapse);
    cj["config_hash"] = hash;
    atomic_write(dir / "report" / "collapse.json", cj.dump(2) + "\n");
    atomic_write(dir / "report" / "dominance.svg", dominance_svg(out.collapse));
    atomic_write(dir / "report" / "alpha_history.json", alpha_history_json(state.history).dump() + "\n");
    const nlohmann::json meta = {{"config_hash", hash},
                                 {"decoder", c.model.decoder.use_hierarchical ? "hierarchical" : "flat"},
                                 {"hierarchical_decoder", c.model.decoder.use_hierarchical},
                                 {"order", order_name(c.search.order)},
                                 {"seed", c.seed},
                                 {"mask_ratio", c.mask.mask_ratio},
                                 {"patch_size", c.mask.patch_size},
                                 {"steps", state.step},
                                 {"genotype_hash", genotype_hash(out.genotype)},
                                 {"skip_count_normal", out.collapse.skip_count_normal},
                                 {"skip_count_reduction", out.collapse.skip_count_reduction},
                                 {"collapsed", out.collapse.collapsed}};
    atomic_write(dir / "report" / "metadata.json", meta.dump(2) + "\n");
    return out;
}

/// Genotype from the checkpoint of an experiment directory; written to `output` when given.
inline Genotype cmd_derive(const std::filesystem::path& exp_dir, const std::filesystem::path& output = {},
                           const RunOptions& opt = {}) {
    const ExperimentConfig c = load_experiment_config(exp_dir);
    if (!checkpoint_exists(exp_dir / "checkpoints"))
        throw ConfigError({"'" + exp_dir.string() + "' has no checkpoint; run the search command first"});
    SearchState state(c.model, c.search);
    state.config_hash = c.hash();
    load_checkpoint(state, exp_dir / "checkpoints");
    Genotype g = derive_genotype(state.arch(), state.space());
    g.config_hash = c.hash();
    if (!output.empty()) {
        refuse_clobber(output, opt);
        atomic_write(output, genotype_to_string(g));
    }
    return g;
}

// ---- retrain ---------------------------------------------------------------

inline Genotype read_genotype_file(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) throw ConfigError({"genotype file '" + p.string() + "' not found"});
    try {
        return genotype_from_string(read_text(p));
    } catch (const std::exception& e) {
        throw ConfigError({p.string() + ": " + e.what()});
    }
}

/// Trains the genotype from scratch; results JSON goes to `output` when given.
inline nlohmann::json cmd_retrain(const ExperimentConfig& c, const Genotype& g, const std::filesystem::path& output = {},
                                  const RunOptions& opt = {}, const LabeledData* data = nullptr) {
    const SearchSpace& space = c.model.supernet.space;
    auto problems = validate_genotype(g, space);
    if (!problems.empty()) {
        std::vector<std::string> p;
        for (const auto& x : problems) p.push_back("genotype: " + x);
        throw ConfigError(p);
    }
    if (!output.empty()) refuse_clobber(output, opt);
    std::optional<LabeledData> loaded;
    if (!data) {
        loaded = load_labeled(c);
        data = &*loaded;
    }
    DiscreteNetwork net(g, space, c.retrain, data->train.num_classes);
    const TrainResult r = train_from_scratch(net, data->train, data->test, [&](const EpochRecord& e) {
        if (opt.log)
            *opt.log << "epoch " << e.epoch << " loss " << std::setprecision(4) << e.train_loss << " test acc "
                     << e.test_accuracy << "\n";
    });
    auto j = retrain_results_json(net, r, net.summarize(data->train.images.height(), data->train.images.width()));
    j["config_hash"] = c.hash();
    if (g.config_hash) j["genotype_config_hash"] = *g.config_hash;
    if (!output.empty()) atomic_write(output, j.dump(2) + "\n");
    return j;
}

// ---- sweep -----------------------------------------------------------------

struct SweepRow {
    double ratio = 0;
    int patch = 0;
    std::optional<int> skip_count_normal;
    std::optional<int> skip_count_reduction;
    std::optional<bool> collapsed;
    std::optional<double> accuracy;
    std::string error;
};

inline std::string sweep_cell_name(double ratio, int patch) {
    std::ostringstream os;
    os << "r" << ratio << "_p" << patch;
    return os.str();
}

/// One search per (ratio, patch) cell, optionally followed by retraining. A failing cell is recorded, not fatal.
inline std::vector<SweepRow> cmd_sweep(const ExperimentConfig& c, const RunOptions& opt = {}) {
    namespace fs = std::filesystem;
    const fs::path dir = c.output_path() / "sweep";
    std::optional<LabeledData> labeled;
    std::vector<SweepRow> rows;
    for (double ratio : c.sweep.ratios)
        for (int patch : c.sweep.patches) {
            SweepRow row{ratio, patch, {}, {}, {}, {}, {}};
            try {
                ExperimentConfig cell = c;
                cell.mask.mask_ratio = cell.search.mask_ratio = ratio;
                cell.mask.patch_size = cell.search.patch_size = patch;
                cell.mask.validate();
                cell.output_dir = (dir / sweep_cell_name(ratio, patch)).string();
                if (opt.log) *opt.log << "sweep cell ratio " << ratio << " patch " << patch << "\n";
                const SearchOutcome so = cmd_search(cell, opt);
                row.skip_count_normal = so.collapse.skip_count_normal;
                row.skip_count_reduction = so.collapse.skip_count_reduction;
                row.collapsed = so.collapse.collapsed;
                if (c.sweep.retrain) {
                    if (!labeled) labeled = load_labeled(c);
                    RunOptions ro = opt;
                    ro.overwrite = true;
                    auto r = cmd_retrain(cell, so.genotype, so.dir / "retrain.json", ro, &*labeled);
                    row.accuracy = r.at("accuracy").get<double>();
                }
            } catch (const std::exception& e) {
                row.error = e.what();
                if (opt.log) *opt.log << "  failed: " << e.what() << "\n";
            }
            rows.push_back(row);
        }
    nlohmann::json table = nlohmann::json::array();
    std::ostringstream csv;
    csv << "ratio,patch,skip_count_normal,skip_count_reduction,collapsed,accuracy,error\n";
    auto opt_str = [](const auto& o) {
        std::ostringstream s;
        if (o) s << *o;
        return s.str();
    };
    for (const auto& r : rows) {
        nlohmann::json j = {{"ratio", r.ratio}, {"patch", r.patch}};
        j["skip_count_normal"] = r.skip_count_normal ? nlohmann::json(*r.skip_count_normal) : nlohmann::json();
        j["skip_count_reduction"] = r.skip_count_reduction ? nlohmann::json(*r.skip_count_reduction) : nlohmann::json();
        j["collapsed"] = r.collapsed ? nlohmann::json(*r.collapsed) : nlohmann::json();
        j["accuracy"] = r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json();
        j["error"] = r.error.empty() ? nlohmann::json() : nlohmann::json(r.error);
        table.push_back(j);
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        csv << r.ratio << ',' << r.patch << ',' << opt_str(r.skip_count_normal) << ',' << opt_str(r.skip_count_reduction)
            << ',' << (r.collapsed ? (*r.collapsed ? "true" : "false") : "") << ',' << opt_str(r.accuracy) << ',' << err
            << '\n';
    }
    atomic_write(dir / "sweep.json", nlohmann::json({{"config_hash", c.hash()}, {"rows", table}}).dump(2) + "\n");
    atomic_write(dir / "sweep.csv", csv.str());
    return rows;
}

// ---- micro-benchmark and correlation ----------------------------------------

inline std::filesystem::path default_bench_path(const ExperimentConfig& c) { return c.output_path() / "bench.jsonl"; }

inline MicroBench cmd_bench(const ExperimentConfig& c, const RunOptions& opt = {}, std::filesystem::path store = {}) {
    const SearchSpace& space = c.model.supernet.space;
    genotype_space_size(space);
    if (store.empty()) store = default_bench_path(c);
    if (opt.overwrite && std::filesystem::exists(store)) std::filesystem::remove(store);
    if (store.has_parent_path()) std::filesystem::create_directories(store.parent_path());
    const LabeledData data = load_labeled(c);
    BenchBudget budget{c.analysis.bench, c.analysis.max_seconds};
    MicroBench bench = build_micro_bench(space, c.analysis.sample_n, budget, data.train, data.test, c.seed, store,
                                         [&](const MicroBenchEntry& e) {
                                             if (opt.log)
                                                 *opt.log << "model " << e.model_id << " accuracy " << e.accuracy << "\n";
                                         });
    const nlohmann::json summary = {{"config_hash", c.hash()},
                                    {"requested", bench.requested},
                                    {"completed", bench.entries.size()},
                                    {"partial", bench.partial}};
    std::filesystem::path sp = store;
    sp.replace_extension(".summary.json");
    atomic_write(sp, summary.dump(2) + "\n");
    return bench;
}

/// Scores every bench genotype with the trained supernet of `supernet_dir` and correlates with bench accuracy.
inline RankingReport cmd_analyze(const ExperimentConfig& c, const RunOptions& opt = {}, std::filesystem::path bench_path = {},
                                 std::filesystem::path supernet_dir = {}) {
    if (bench_path.empty()) bench_path = default_bench_path(c);
    if (supernet_dir.empty()) supernet_dir = c.output_path();
    if (!std::filesystem::exists(bench_path))
        throw ConfigError({"bench file '" + bench_path.string() + "' not found; run `maenas bench` first or pass --bench"});
    const auto entries = read_bench_store(bench_path);
    if (entries.empty()) throw ConfigError({"bench file '" + bench_path.string() + "' has no entries"});
    const ExperimentConfig sc = load_experiment_config(supernet_dir);
    if (!checkpoint_exists(supernet_dir / "checkpoints"))
        throw ConfigError({"'" + supernet_dir.string() + "' has no supernet checkpoint; run the search command first"});
    SearchState state(sc.model, sc.search);
    state.config_hash = sc.hash();
    load_checkpoint(state, supernet_dir / "checkpoints");

    ExperimentConfig eval_cfg = c;
    eval_cfg.dataset.test_images = c.analysis.eval_images;
    const ImageSet eval_set = load_labeled(eval_cfg).test.images;
    ScoreOptions so;
    so.mask = sc.mask;
    so.mask_seed = c.analysis.mask_seed;
    so.calibration_images = c.analysis.calibration_images;

    std::vector<Genotype> gs;
    std::vector<double> acc;
    for (const auto& e : entries) {
        gs.push_back(e.genotype);
        acc.push_back(e.accuracy);
    }
    const auto scores = reconstruction_scores(state.model(), gs, eval_set, so);
    RankingReport r = correlation_report(acc, scores, c.analysis.permutations, c.seed);
    if (opt.log && (r.accuracy_ties || r.score_ties)) *opt.log << "ties present; broken by model id\n";

    nlohmann::json rows = nlohmann::json::array();
    for (size_t i = 0; i < entries.size(); ++i)
        rows.push_back({{"model_id", entries[i].model_id},
                        {"genotype_hash", genotype_hash(entries[i].genotype)},
                        {"accuracy", acc[i]},
                        {"reconstruction_score", scores[i]}});
    auto j = ranking_report_json(r);
    j["entries"] = rows;
    j["config_hash"] = c.hash();
    j["supernet_config_hash"] = sc.hash();
    const auto rep = c.output_path() / "report";
    atomic_write(rep / "correlation.json", j.dump(2) + "\n");
    atomic_write(rep / "correlation.svg", tau_bar_svg({{dataset_kind_name(c.dataset.kind), r.tau}}));
    return r;
}

/// Writes one mask as PNG plus a JSON description next to it.
inline PatchMask cmd_mask_dump(const MaskSpec& spec, uint64_t seed, const std::filesystem::path& png, const RunOptions& opt = {}) {
    spec.validate();
    refuse_clobber(png, opt);
    const PatchMask m = generate_mask(spec, seed);
    if (png.has_parent_path()) std::filesystem::create_directories(png.parent_path());
    write_mask_png(png, m);
    std::filesystem::path js = png;
    js.replace_extension(".json");
    atomic_write(js, mask_dump_json(m, spec.mask_ratio, seed).dump(2) + "\n");
    return m;
}

} // namespace maenas
