#pragma once

#include <cstdlib>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "maenas/bilevel_search.hpp"
#include "maenas/retrain.hpp"

namespace maenas {

/// Every problem found in a configuration, not just the first.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(std::vector<std::string> problems)
        : std::invalid_argument(join(problems)), problems_(std::move(problems)) {}
    const std::vector<std::string>& problems() const { return problems_; }

private:
    static std::string join(const std::vector<std::string>& p) {
        std::string s = "invalid configuration:";
        for (const auto& x : p) s += "\n  " + x;
        return s;
    }
    std::vector<std::string> problems_;
};

enum class DatasetKind { cifar10, synthetic };

struct DatasetConfig {
    DatasetKind kind = DatasetKind::cifar10;
    std::string root; // CIFAR-10 binary directory; MAENAS_DATA_ROOT when empty
    int search_images = 10000;
    int train_images = 10000;
    int test_images = 2000;
    int image_size = 32; // synthetic only; CIFAR-10 is 32
    uint64_t seed = 0;
};

struct AnalysisConfig {
    int sample_n = 30;
    RetrainConfig bench;
    double max_seconds = 0;
    int eval_images = 500;
    uint64_t mask_seed = 20240101;
    int calibration_images = 256;
    int permutations = 10000;
};

struct SweepConfig {
    std::vector<double> ratios{0.1, 0.3, 0.5, 0.7};
    std::vector<int> patches{2, 4, 8, 16};
    bool retrain = true;
};

struct ExperimentConfig {
    std::string output_dir = "runs/default";
    uint64_t seed = 0;
    DatasetConfig dataset;
    AutoencoderConfig model;
    MaskSpec mask;
    SearchConfig search;
    int checkpoint_every = 0;
    RetrainConfig retrain;
    int collapse_threshold = 4;
    SweepConfig sweep;
    AnalysisConfig analysis;

    /// Resolved as JSON: every field, defaults included, keys sorted.
    nlohmann::json to_json() const;
    std::string hash() const;
    std::filesystem::path output_path() const;
    std::filesystem::path data_root() const;
};

namespace detail {

class Section {
public:
    Section(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {
        if (!j_.is_object()) {
            errors_.push_back(where() + "must be an object");
            valid_ = false;
        }
    }

    template <class T>
    void get(const char* key, T& out) {
        if (!valid_ || !j_.contains(key)) return;
        used_.insert(key);
        const auto& v = j_.at(key);
        if (!check<T>(v)) {
            errors_.push_back(where() + key + ": expected " + type_name<T>() + ", got " + v.dump());
            return;
        }
        out = v.get<T>();
    }

    Section sub(const char* key) {
        static const nlohmann::json empty = nlohmann::json::object();
        if (!valid_ || !j_.contains(key)) return Section(empty, path_ + key + ".", errors_);
        used_.insert(key);
        return Section(j_.at(key), path_ + key + ".", errors_);
    }

    bool has(const char* key) const { return valid_ && j_.contains(key); }
    void error(const std::string& key, const std::string& msg) { errors_.push_back(where() + key + ": " + msg); }

    void finish() {
        if (!valid_) return;
        for (const auto& [k, _] : j_.items())
            if (!used_.count(k)) errors_.push_back(where() + k + ": unknown key");
    }

    const std::string& path() const { return path_; }

private:
    std::string where() const { return path_.empty() ? "" : path_; }

    template <class T>
    static bool check(const nlohmann::json& v) {
        if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
        else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
        else if constexpr (std::is_unsigned_v<T>) return v.is_number_unsigned();
        else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
        else if constexpr (std::is_floating_point_v<T>) return v.is_number();
        else {
            if (!v.is_array()) return false;
            for (const auto& e : v)
                if (!check<typename T::value_type>(e)) return false;
            return true;
        }
    }

    template <class T>
    static std::string type_name() {
        if constexpr (std::is_same_v<T, bool>) return "boolean";
        else if constexpr (std::is_same_v<T, std::string>) return "string";
        else if constexpr (std::is_unsigned_v<T>) return "non-negative integer";
        else if constexpr (std::is_integral_v<T>) return "integer";
        else if constexpr (std::is_floating_point_v<T>) return "number";
        else return "array of " + type_name<typename T::value_type>();
    }

    const nlohmann::json& j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> used_;
    bool valid_ = true;
};

inline void read_retrain(Section s, RetrainConfig& r) {
    s.get("layers", r.layers);
    s.get("init_channels", r.init_channels);
    s.get("epochs", r.epochs);
    s.get("batch_size", r.batch_size);
    s.get("lr", r.lr);
    s.get("lr_min", r.lr_min);
    s.get("momentum", r.momentum);
    s.get("weight_decay", r.weight_decay);
    s.get("grad_clip", r.grad_clip);
    s.get("crop_flip", r.crop_flip);
    s.get("cutout", r.cutout);
    s.get("cutout_length", r.cutout_length);
    double dp = r.drop_path_prob;
    s.get("drop_path_prob", dp);
    r.drop_path_prob = static_cast<float>(dp);
    s.get("auxiliary", r.auxiliary);
    s.get("auxiliary_weight", r.auxiliary_weight);
    s.get("stem_multiplier", r.stem_multiplier);
    s.get("reduction_positions", r.reduction_positions);
    s.get("max_steps_per_epoch", r.max_steps_per_epoch);
    s.get("eval_batch", r.eval_batch);
    if (s.has("seed")) s.error("seed", "set the top-level seed instead");
    for (const auto& p : r.problems()) s.error("", p);
    s.finish();
}

inline nlohmann::json retrain_section_json(const RetrainConfig& r) {
    auto j = retrain_config_json(r);
    j.erase("seed");
    return j;
}

} // namespace detail

inline std::string dataset_kind_name(DatasetKind k) { return k == DatasetKind::cifar10 ? "cifar10" : "synthetic"; }

inline std::filesystem::path ExperimentConfig::data_root() const {
    if (!dataset.root.empty()) return dataset.root;
    if (const char* e = std::getenv("MAENAS_DATA_ROOT"); e && *e) return e;
    return {};
}

inline std::filesystem::path ExperimentConfig::output_path() const {
    std::filesystem::path p = output_dir;
    if (p.is_relative())
        if (const char* e = std::getenv("MAENAS_OUTPUT_ROOT"); e && *e) return std::filesystem::path(e) / p;
    return p;
}

inline nlohmann::json ExperimentConfig::to_json() const {
    using nlohmann::json;
    const SupernetConfig& sn = model.supernet;
    json ops = json::array();
    for (OpKind o : sn.space.normal.op_set) ops.push_back(op_name(o));
    return {
        {"output_dir", output_dir},
        {"seed", seed},
        {"dataset",
         {{"kind", dataset_kind_name(dataset.kind)},
          {"root", dataset.root},
          {"search_images", dataset.search_images},
          {"train_images", dataset.train_images},
          {"test_images", dataset.test_images},
          {"image_size", dataset.image_size},
          {"seed", dataset.seed}}},
        {"supernet",
         {{"space", macro_name(sn.space.macro)},
          {"ops", ops},
          {"nodes", sn.space.normal.num_nodes},
          {"num_cells", sn.num_cells},
          {"init_channels", sn.init_channels},
          {"reduction_positions", sn.reduction_positions},
          {"stem_multiplier", sn.stem_multiplier}}},
        {"mask", {{"ratio", mask.mask_ratio}, {"patch_size", mask.patch_size}, {"zero_fill", model.zero_fill_mask}}},
        {"decoder", {{"embed_width", model.decoder.embed_width}, {"hierarchical", model.decoder.use_hierarchical}}},
        {"search",
         {{"epochs", search.epochs},
          {"batch_size", search.batch_size},
          {"w_lr", search.w_lr},
          {"w_lr_min", search.w_lr_min},
          {"w_momentum", search.w_momentum},
          {"w_weight_decay", search.w_weight_decay},
          {"grad_clip", search.grad_clip},
          {"alpha_lr", search.alpha_lr},
          {"alpha_weight_decay", search.alpha_weight_decay},
          {"alpha_beta1", search.alpha_beta1},
          {"alpha_beta2", search.alpha_beta2},
          {"split_fraction", search.split_fraction},
          {"order", order_name(search.order)},
          {"max_steps_per_epoch", search.max_steps_per_epoch},
          {"checkpoint_every", checkpoint_every}}},
        {"retrain", detail::retrain_section_json(retrain)},
        {"collapse", {{"threshold", collapse_threshold}}},
        {"sweep", {{"ratios", sweep.ratios}, {"patches", sweep.patches}, {"retrain", sweep.retrain}}},
        {"analysis",
         {{"sample_n", analysis.sample_n},
          {"bench", detail::retrain_section_json(analysis.bench)},
          {"max_seconds", analysis.max_seconds},
          {"eval_images", analysis.eval_images},
          {"mask_seed", analysis.mask_seed},
          {"calibration_images", analysis.calibration_images},
          {"permutations", analysis.permutations}}},
    };
}

/// 16 hex digits of the sha256 of the resolved configuration; output_dir and dataset.root are excluded
/// so moving an experiment does not change its identity.
inline std::string ExperimentConfig::hash() const {
    auto j = to_json();
    j.erase("output_dir");
    j["dataset"].erase("root");
    return sha256_hex(j.dump()).substr(0, 16);
}

/// Parses and validates a configuration. Throws ConfigError listing every problem.
inline ExperimentConfig parse_config(const nlohmann::json& j, bool check_data = true) {
    std::vector<std::string> errors;
    ExperimentConfig c;
    detail::Section root(j, "", errors);
    root.get("output_dir", c.output_dir);
    root.get("seed", c.seed);
    if (c.output_dir.empty()) root.error("output_dir", "must not be empty");

    {
        auto s = root.sub("dataset");
        std::string kind = dataset_kind_name(c.dataset.kind);
        s.get("kind", kind);
        if (kind == "cifar10") c.dataset.kind = DatasetKind::cifar10;
        else if (kind == "synthetic") c.dataset.kind = DatasetKind::synthetic;
        else s.error("kind", "must be 'cifar10' or 'synthetic', got '" + kind + "'");
        s.get("root", c.dataset.root);
        s.get("search_images", c.dataset.search_images);
        s.get("train_images", c.dataset.train_images);
        s.get("test_images", c.dataset.test_images);
        s.get("image_size", c.dataset.image_size);
        s.get("seed", c.dataset.seed);
        if (c.dataset.search_images < 2) s.error("search_images", "must be >= 2");
        if (c.dataset.train_images < 1) s.error("train_images", "must be >= 1");
        if (c.dataset.test_images < 1) s.error("test_images", "must be >= 1");
        if (c.dataset.kind == DatasetKind::cifar10 && c.dataset.image_size != 32)
            s.error("image_size", "CIFAR-10 images are 32x32");
        if (c.dataset.image_size < 8) s.error("image_size", "must be >= 8");
        s.finish();
        if (check_data && c.dataset.kind == DatasetKind::cifar10) {
            const auto r = c.data_root();
            if (r.empty()) errors.push_back("dataset.root: required for cifar10 (or set MAENAS_DATA_ROOT)");
            else if (!cifar10_available(r))
                errors.push_back("dataset.root: no CIFAR-10 binary batches found under '" + r.string() + "'");
        }
    }
    {
        auto s = root.sub("supernet");
        std::string space = "darts";
        s.get("space", space);
        std::vector<std::string> ops;
        s.get("ops", ops);
        int nodes = space == "nb201" ? 3 : 4;
        s.get("nodes", nodes);
        SupernetConfig& sn = c.model.supernet;
        s.get("num_cells", sn.num_cells);
        s.get("init_channels", sn.init_channels);
        s.get("reduction_positions", sn.reduction_positions);
        s.get("stem_multiplier", sn.stem_multiplier);
        std::vector<OpKind> op_kinds;
        for (const auto& o : ops) {
            try {
                op_kinds.push_back(op_from_name(o));
            } catch (const std::exception& e) {
                s.error("ops", e.what());
            }
        }
        if (nodes < 1) s.error("nodes", "must be >= 1");
        else if (space == "darts") sn.space = SearchSpace::darts(ops.empty() ? darts_op_set() : op_kinds, nodes);
        else if (space == "nb201") sn.space = SearchSpace::nb201(ops.empty() ? nb201_op_set() : op_kinds, nodes);
        else s.error("space", "must be 'darts' or 'nb201', got '" + space + "'");
        try {
            sn.validate();
        } catch (const std::exception& e) {
            s.error("", e.what());
        }
        s.finish();
    }
    {
        auto s = root.sub("mask");
        s.get("ratio", c.mask.mask_ratio);
        s.get("patch_size", c.mask.patch_size);
        s.get("zero_fill", c.model.zero_fill_mask);
        c.mask.image_h = c.mask.image_w = c.dataset.image_size;
        try {
            c.mask.validate();
        } catch (const std::exception& e) {
            s.error("", e.what());
        }
        s.finish();
    }
    {
        auto s = root.sub("decoder");
        s.get("embed_width", c.model.decoder.embed_width);
        s.get("hierarchical", c.model.decoder.use_hierarchical);
        if (c.model.decoder.embed_width < 1) s.error("embed_width", "must be >= 1");
        s.finish();
    }
    {
        auto s = root.sub("search");
        SearchConfig& sc = c.search;
        s.get("epochs", sc.epochs);
        s.get("batch_size", sc.batch_size);
        s.get("w_lr", sc.w_lr);
        s.get("w_lr_min", sc.w_lr_min);
        s.get("w_momentum", sc.w_momentum);
        s.get("w_weight_decay", sc.w_weight_decay);
        s.get("grad_clip", sc.grad_clip);
        s.get("alpha_lr", sc.alpha_lr);
        s.get("alpha_weight_decay", sc.alpha_weight_decay);
        s.get("alpha_beta1", sc.alpha_beta1);
        s.get("alpha_beta2", sc.alpha_beta2);
        s.get("split_fraction", sc.split_fraction);
        std::string order = order_name(sc.order);
        s.get("order", order);
        if (order == "first" || order == "second") sc.order = order_from_name(order);
        else s.error("order", "must be 'first' or 'second', got '" + order + "'");
        s.get("max_steps_per_epoch", sc.max_steps_per_epoch);
        s.get("checkpoint_every", c.checkpoint_every);
        if (c.checkpoint_every < 0) s.error("checkpoint_every", "must be >= 0");
        sc.mask_ratio = c.mask.mask_ratio;
        sc.patch_size = c.mask.patch_size;
        sc.seed = c.seed;
        for (const auto& p : sc.problems())
            if (p.find("mask_ratio") == std::string::npos && p.find("patch_size") == std::string::npos) s.error("", p);
        if (sc.batch_size >= 1 && sc.split_fraction > 0 && sc.split_fraction < 1) {
            const int n = c.dataset.search_images;
            const int val = static_cast<int>(std::llround(sc.split_fraction * n));
            if (std::min(val, n - val) < sc.batch_size)
                s.error("batch_size", "larger than the smaller search split (" + std::to_string(std::min(val, n - val)) +
                                          " images)");
        }
        s.finish();
    }
    detail::read_retrain(root.sub("retrain"), c.retrain);
    c.retrain.seed = c.seed;
    {
        auto s = root.sub("collapse");
        s.get("threshold", c.collapse_threshold);
        if (c.collapse_threshold < 0) s.error("threshold", "must be >= 0");
        s.finish();
    }
    {
        auto s = root.sub("sweep");
        s.get("ratios", c.sweep.ratios);
        s.get("patches", c.sweep.patches);
        s.get("retrain", c.sweep.retrain);
        if (c.sweep.ratios.empty() || c.sweep.patches.empty()) s.error("", "grid must be non-empty");
        for (double r : c.sweep.ratios)
            if (!(r >= 0 && r <= 1)) s.error("ratios", "ratio " + std::to_string(r) + " outside [0, 1]");
        for (int p : c.sweep.patches)
            if (p < 1 || c.dataset.image_size % p) s.error("patches", "patch " + std::to_string(p) + " does not tile the image");
        s.finish();
    }
    {
        auto s = root.sub("analysis");
        AnalysisConfig& a = c.analysis;
        a.bench.layers = 5;
        a.bench.epochs = 10;
        s.get("sample_n", a.sample_n);
        if (s.has("bench")) detail::read_retrain(s.sub("bench"), a.bench);
        s.get("max_seconds", a.max_seconds);
        s.get("eval_images", a.eval_images);
        s.get("mask_seed", a.mask_seed);
        s.get("calibration_images", a.calibration_images);
        s.get("permutations", a.permutations);
        a.bench.seed = c.seed;
        if (a.sample_n < 1) s.error("sample_n", "must be >= 1");
        if (a.eval_images < 1) s.error("eval_images", "must be >= 1");
        if (a.permutations < 1) s.error("permutations", "must be >= 1");
        if (a.calibration_images < 0) s.error("calibration_images", "must be >= 0");
        if (a.max_seconds < 0) s.error("max_seconds", "must be >= 0");
        s.finish();
    }
    root.finish();
    if (!errors.empty()) throw ConfigError(std::move(errors));
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& p, bool check_data = true) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(p));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError({p.string() + ": not valid JSON (" + e.what() + ")"});
    } catch (const std::runtime_error& e) {
        throw ConfigError({std::string("config: ") + e.what()});
    }
    return parse_config(j, check_data);
}

} // namespace maenas
