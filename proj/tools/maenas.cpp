// maenas: search, derive, retrain, sweep, bench, analyze, mask-dump.
//
// Exit codes: 0 success, 2 invalid configuration or arguments, 3 divergence, 1 anything else.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "maenas/maenas.hpp"

namespace {

using namespace maenas;

struct Overrides {
    std::optional<uint64_t> seed;
    std::optional<double> mask_ratio;
    std::optional<int> patch_size;
    bool no_hd = false;
    std::optional<std::string> order;
    std::string device = "cpu";
    std::vector<double> ratios;
    std::vector<int> patches;
};

ExperimentConfig load_with_overrides(const std::string& path, const Overrides& o, bool check_data = true) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError({path + ": not valid JSON (" + e.what() + ")"});
    } catch (const std::runtime_error& e) {
        throw ConfigError({std::string("--config: ") + e.what()});
    }
    if (!j.is_object()) throw ConfigError({path + ": top level must be an object"});
    if (o.device != "cpu") throw ConfigError({"--device: only 'cpu' is supported, got '" + o.device + "'"});
    if (o.seed) j["seed"] = *o.seed;
    if (o.mask_ratio) j["mask"]["ratio"] = *o.mask_ratio;
    if (o.patch_size) j["mask"]["patch_size"] = *o.patch_size;
    if (o.no_hd) j["decoder"]["hierarchical"] = false;
    if (o.order) j["search"]["order"] = *o.order;
    if (!o.ratios.empty()) j["sweep"]["ratios"] = o.ratios;
    if (!o.patches.empty()) j["sweep"]["patches"] = o.patches;
    return parse_config(j, check_data);
}

void add_overrides(CLI::App* app, Overrides& o) {
    app->add_option("--seed", o.seed, "Run seed");
    app->add_option("--mask-ratio", o.mask_ratio, "Fraction of patches masked");
    app->add_option("--patch-size", o.patch_size, "Mask patch side in pixels");
    app->add_flag("--no-hd", o.no_hd, "Decode from the last feature map only");
    app->add_option("--order", o.order, "Architecture gradient: first or second")->check(CLI::IsMember({"first", "second"}));
    app->add_option("--device", o.device, "Compute device (cpu)");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked-autoencoder differentiable architecture search"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config;
    Overrides ov;
    RunOptions run;
    run.log = &std::cerr;
    bool quiet = false;
    app.add_flag("--quiet", quiet, "No progress output");

    auto* search = app.add_subcommand("search", "Run the bilevel search and write an experiment directory");
    search->add_option("--config", config, "Experiment config (JSON)")->required();
    add_overrides(search, ov);
    search->add_flag("--overwrite", run.overwrite, "Replace an existing experiment directory");
    search->add_flag("--resume", run.resume, "Continue from the experiment's checkpoint");

    std::string exp_dir, out_path;
    auto* derive = app.add_subcommand("derive", "Derive the genotype from an experiment's checkpoint");
    derive->add_option("--experiment", exp_dir, "Experiment directory")->required();
    derive->add_option("--output", out_path, "Where to write the genotype (default: print)");
    derive->add_flag("--overwrite", run.overwrite, "Replace an existing output file");

    std::string genotype_path;
    auto* retrain = app.add_subcommand("retrain", "Train a genotype from scratch with labels");
    retrain->add_option("--config", config, "Experiment config (JSON)")->required();
    retrain->add_option("--genotype", genotype_path, "Genotype file (default: <output_dir>/genotype.json)");
    retrain->add_option("--output", out_path, "Results file (default: <output_dir>/retrain.json)");
    add_overrides(retrain, ov);
    retrain->add_flag("--overwrite", run.overwrite, "Replace an existing results file");

    auto* sweep = app.add_subcommand("sweep", "Search over a mask_ratio x patch_size grid");
    sweep->add_option("--config", config, "Experiment config (JSON)")->required();
    sweep->add_option("--ratios", ov.ratios, "Mask ratios (default from config)");
    sweep->add_option("--patches", ov.patches, "Patch sizes (default from config)");
    add_overrides(sweep, ov);
    sweep->add_flag("--overwrite", run.overwrite, "Replace existing sweep cells");

    std::string bench_path;
    auto* bench = app.add_subcommand("bench", "Train sampled genotypes of a single-cell space for ground truth");
    bench->add_option("--config", config, "Experiment config (JSON)")->required();
    bench->add_option("--bench", bench_path, "Bench store (default: <output_dir>/bench.jsonl)");
    add_overrides(bench, ov);
    bench->add_flag("--overwrite", run.overwrite, "Discard an existing bench store");

    auto* analyze = app.add_subcommand("analyze", "Kendall tau between reconstruction score and bench accuracy");
    analyze->add_option("--config", config, "Experiment config (JSON)")->required();
    analyze->add_option("--bench", bench_path, "Bench store (default: <output_dir>/bench.jsonl)");
    analyze->add_option("--supernet", exp_dir, "Experiment directory of the trained supernet (default: <output_dir>)");
    add_overrides(analyze, ov);

    MaskSpec mspec;
    uint64_t mseed = 0;
    int image_size = 32;
    auto* mdump = app.add_subcommand("mask-dump", "Write one mask as PNG and JSON");
    mdump->add_option("--seed", mseed, "Mask seed");
    mdump->add_option("--mask-ratio", mspec.mask_ratio, "Fraction of patches masked");
    mdump->add_option("--patch-size", mspec.patch_size, "Patch side in pixels");
    mdump->add_option("--image-size", image_size, "Image side in pixels");
    mdump->add_option("--output", out_path, "PNG path")->required();
    mdump->add_flag("--overwrite", run.overwrite, "Replace an existing PNG");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    if (quiet) run.log = nullptr;

    try {
        if (search->parsed()) {
            const auto c = load_with_overrides(config, ov);
            const auto out = cmd_search(c, run);
            std::cout << out.dir.string() << "/genotype.json\n";
        } else if (derive->parsed()) {
            const auto g = cmd_derive(exp_dir, out_path, run);
            if (out_path.empty()) std::cout << genotype_to_string(g);
            else std::cout << out_path << "\n";
        } else if (retrain->parsed()) {
            const auto c = load_with_overrides(config, ov);
            if (genotype_path.empty()) genotype_path = (c.output_path() / "genotype.json").string();
            if (out_path.empty()) out_path = (c.output_path() / "retrain.json").string();
            const auto j = cmd_retrain(c, read_genotype_file(genotype_path), out_path, run);
            std::cout << "accuracy " << j.at("accuracy").get<double>() << "\n";
        } else if (sweep->parsed()) {
            const auto c = load_with_overrides(config, ov);
            const auto rows = cmd_sweep(c, run);
            int failed = 0;
            for (const auto& r : rows) failed += !r.error.empty();
            std::cout << (c.output_path() / "sweep" / "sweep.csv").string() << "\n";
            if (failed) std::cerr << failed << " of " << rows.size() << " sweep cells failed\n";
        } else if (bench->parsed()) {
            const auto c = load_with_overrides(config, ov);
            const auto b = cmd_bench(c, run, bench_path);
            std::cout << b.entries.size() << " of " << b.requested << " models" << (b.partial ? " (partial)" : "") << "\n";
        } else if (analyze->parsed()) {
            const auto c = load_with_overrides(config, ov);
            const auto r = cmd_analyze(c, run, bench_path, exp_dir);
            std::cout << "tau " << r.tau << " p " << r.p_value << " n " << r.n_models << "\n";
        } else if (mdump->parsed()) {
            mspec.image_h = mspec.image_w = image_size;
            cmd_mask_dump(mspec, mseed, out_path, run);
            std::cout << out_path << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return 3;
    } catch (const NonFiniteError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
