#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "maenas/autoencoder.hpp"
#include "maenas/collapse_monitor.hpp"
#include "maenas/data.hpp"
#include "maenas/optim.hpp"

namespace maenas {

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class SearchOrder { first, second };

inline std::string order_name(SearchOrder o) { return o == SearchOrder::first ? "first" : "second"; }
inline SearchOrder order_from_name(std::string_view s) {
    if (s == "first") return SearchOrder::first;
    if (s == "second") return SearchOrder::second;
    throw std::invalid_argument("order must be 'first' or 'second', got '" + std::string(s) + "'");
}

struct SearchConfig {
    int epochs = 25;
    int batch_size = 64;
    double w_lr = 0.025;
    double w_lr_min = 0.001;
    double w_momentum = 0.9;
    double w_weight_decay = 3e-4;
    double grad_clip = 5.0;
    double alpha_lr = 3e-4;
    double alpha_weight_decay = 1e-3;
    double alpha_beta1 = 0.5;
    double alpha_beta2 = 0.999;
    double mask_ratio = 0.5;
    int patch_size = 4;
    double split_fraction = 0.5;
    SearchOrder order = SearchOrder::first;
    uint64_t seed = 0;
    // caps iterations per epoch; 0 = as many as the split allows
    int max_steps_per_epoch = 0;

    std::vector<std::string> problems() const {
        std::vector<std::string> p;
        if (epochs < 0) p.push_back("search.epochs must be >= 0");
        if (batch_size < 1) p.push_back("search.batch_size must be >= 1");
        if (!(split_fraction > 0.0 && split_fraction < 1.0)) p.push_back("search.split_fraction must be in (0, 1)");
        if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) p.push_back("search.mask_ratio must be in [0, 1]");
        if (patch_size < 1) p.push_back("search.patch_size must be >= 1");
        if (w_lr < 0 || alpha_lr < 0) p.push_back("learning rates must be >= 0");
        if (max_steps_per_epoch < 0) p.push_back("search.max_steps_per_epoch must be >= 0");
        return p;
    }

    void validate() const {
        auto p = problems();
        if (!p.empty()) throw std::invalid_argument(p.front());
    }
};

/// Supernet weights, architecture parameters and both optimizers.
class SearchState {
public:
    SearchState(const AutoencoderConfig& model_cfg, const SearchConfig& cfg)
        : cfg_(cfg), model_(std::make_unique<MaskedAutoencoder>(model_cfg, cfg.seed)) {
        cfg.validate();
        auto rng = rng_for(cfg.seed, {0x616c706861ULL});
        arch_ = ArchParams::random(model_cfg.supernet.space, rng);
        w_opt_ = std::make_unique<Sgd>(model_->params().vars(), cfg.w_momentum, cfg.w_weight_decay);
        a_opt_ = std::make_unique<Adam>(arch_.vars(), cfg.alpha_lr, cfg.alpha_beta1, cfg.alpha_beta2, cfg.alpha_weight_decay);
    }

    MaskedAutoencoder& model() { return *model_; }
    const MaskedAutoencoder& model() const { return *model_; }
    ArchParams& arch() { return arch_; }
    const ArchParams& arch() const { return arch_; }
    Sgd& weight_optimizer() { return *w_opt_; }
    Adam& arch_optimizer() { return *a_opt_; }
    const SearchConfig& config() const { return cfg_; }
    const SearchSpace& space() const { return model_->config().supernet.space; }

    MaskSpec mask_spec(int h, int w) const { return {h, w, cfg_.patch_size, cfg_.mask_ratio}; }

    int64_t step = 0;
    std::string config_hash;
    std::vector<AlphaSnapshot> history;

private:
    SearchConfig cfg_;
    std::unique_ptr<MaskedAutoencoder> model_;
    ArchParams arch_;
    std::unique_ptr<Sgd> w_opt_;
    std::unique_ptr<Adam> a_opt_;
};

namespace detail {

/// Temporarily switches requires_grad off on a set of leaves.
class FreezeScope {
public:
    explicit FreezeScope(const std::vector<Var>& vars) : vars_(vars) {
        for (auto& v : vars_) v.node()->requires_grad = false;
    }
    ~FreezeScope() {
        for (auto& v : vars_) v.node()->requires_grad = true;
    }
    FreezeScope(const FreezeScope&) = delete;
    FreezeScope& operator=(const FreezeScope&) = delete;

private:
    std::vector<Var> vars_;
};

inline CellWeights detached_weights(const ArchParams& arch) {
    NoGradGuard ng;
    CellWeights w;
    for (const auto& [k, a] : arch.alpha) w[k] = Var::constant(softmax_rows(a).value());
    return w;
}

inline std::vector<PatchMask> batch_masks(const MaskSpec& spec, uint64_t seed, int64_t step, uint64_t stream, int n) {
    std::vector<PatchMask> m;
    m.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        m.push_back(generate_mask(spec, mask_seed(seed, static_cast<uint64_t>(step), stream, static_cast<uint64_t>(i))));
    return m;
}

inline void check_finite(double loss, const char* where, int64_t step) {
    if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "non-finite " << where << " loss (" << loss << ") at step " << step;
        throw DivergenceError(os.str());
    }
}

} // namespace detail

inline constexpr uint64_t kTrainStream = 1;
inline constexpr uint64_t kValStream = 2;

/// Masks for one step of a split; a pure function of (seed, step, split).
inline std::vector<PatchMask> step_masks(const SearchState& s, const Tensor& batch, uint64_t stream) {
    return detail::batch_masks(s.mask_spec(batch.dim(2), batch.dim(3)), s.config().seed, s.step, stream, batch.dim(0));
}

/// One SGD step on the supernet weights against the masked reconstruction loss. alpha is not touched.
inline double weight_step(SearchState& s, const Tensor& train_batch, double lr) {
    auto masks = step_masks(s, train_batch, kTrainStream);
    const CellWeights w = detail::detached_weights(s.arch());
    s.weight_optimizer().zero_grad();
    auto out = s.model().forward(train_batch, masks, w, ForwardContext{});
    const double loss = out.loss.value()[0];
    detail::check_finite(loss, "train", s.step);
    backward(out.loss);
    clip_grad_norm(s.weight_optimizer().params(), s.config().grad_clip);
    s.weight_optimizer().step(lr);
    s.weight_optimizer().zero_grad();
    if (!s.model().params().all_finite()) throw DivergenceError("non-finite supernet weights after step " + std::to_string(s.step));
    return loss;
}

namespace detail {

inline double alpha_grad_first_order(SearchState& s, const Tensor& val_batch) {
    auto masks = step_masks(s, val_batch, kValStream);
    FreezeScope freeze(s.weight_optimizer().params());
    auto out = s.model().forward(val_batch, masks, mixture_weights(s.arch()), ForwardContext{});
    const double loss = out.loss.value()[0];
    check_finite(loss, "validation", s.step);
    backward(out.loss);
    return loss;
}

/// Unrolled approximation: grad_alpha L_val(w', alpha) - xi * finite-difference Hessian-vector product,
/// with w' = w - xi * (momentum-buffer + dL_train/dw) one virtual step ahead.
inline double alpha_grad_second_order(SearchState& s, const Tensor& val_batch, const Tensor& train_batch, double xi) {
    auto& params = s.model().params();
    const auto wvars = s.weight_optimizer().params();
    const auto avars = s.arch().vars();
    const ParamSnapshot saved = ParamSnapshot::take(params);
    auto train_masks = step_masks(s, train_batch, kTrainStream);
    auto val_masks = step_masks(s, val_batch, kValStream);

    // virtual step
    {
        FreezeScope fa(avars);
        for (auto v : wvars) v.zero_grad();
        auto out = s.model().forward(train_batch, train_masks, detached_weights(s.arch()), ForwardContext{});
        check_finite(out.loss.value()[0], "unrolled train", s.step);
        backward(out.loss);
        const auto& buf = s.weight_optimizer().momentum_buffers();
        const float mom = static_cast<float>(s.weight_optimizer().momentum());
        const float wd = static_cast<float>(s.weight_optimizer().weight_decay());
        for (size_t i = 0; i < wvars.size(); ++i) {
            Var v = wvars[i];
            Tensor& w = v.mutable_value();
            const Tensor& g = v.grad();
            for (size_t j = 0; j < w.numel(); ++j) {
                const float gj = v.has_grad() ? g[j] : 0.f;
                w[j] -= static_cast<float>(xi) * (mom * buf[i][j] + gj + wd * w[j]);
            }
            v.zero_grad();
        }
    }

    // gradients of the validation loss at w'
    for (auto a : avars) a.zero_grad();
    auto out = s.model().forward(val_batch, val_masks, mixture_weights(s.arch()), ForwardContext{});
    const double val_loss = out.loss.value()[0];
    check_finite(val_loss, "validation", s.step);
    backward(out.loss);
    std::vector<Tensor> dalpha;
    for (const auto& a : avars) dalpha.push_back(a.has_grad() ? a.grad() : zeros_like(a.value()));
    std::vector<Tensor> dw;
    double sq = 0;
    for (const auto& v : wvars) {
        dw.push_back(v.has_grad() ? v.grad() : zeros_like(v.value()));
        sq += dw.back().squared_norm();
    }
    for (auto v : wvars) v.zero_grad();
    for (auto a : avars) a.zero_grad();

    // finite-difference Hessian-vector product around the real w
    saved.restore(params);
    const double r = 0.01 / std::max(std::sqrt(sq), 1e-12);
    auto grad_alpha_at = [&](double sign) {
        for (size_t i = 0; i < wvars.size(); ++i) {
            Var v = wvars[i];
            v.mutable_value() = saved.values[i];
            v.mutable_value().axpy(static_cast<float>(sign * r), dw[i]);
        }
        FreezeScope fw(wvars);
        for (auto a : avars) a.zero_grad();
        auto o = s.model().forward(train_batch, train_masks, mixture_weights(s.arch()), ForwardContext{});
        backward(o.loss);
        std::vector<Tensor> g;
        for (const auto& a : avars) g.push_back(a.has_grad() ? a.grad() : zeros_like(a.value()));
        return g;
    };
    auto gp = grad_alpha_at(+1);
    auto gm = grad_alpha_at(-1);
    saved.restore(params);

    for (size_t i = 0; i < avars.size(); ++i) {
        Tensor g = dalpha[i];
        for (size_t j = 0; j < g.numel(); ++j) g[j] -= static_cast<float>(xi * (gp[i][j] - gm[i][j]) / (2 * r));
        Var a = avars[i];
        a.mutable_grad() = std::move(g);
    }
    return val_loss;
}

} // namespace detail

/// One architecture step on the validation split. First order holds w fixed; second order uses the
/// unrolled approximation with step size `xi` (the current weight learning rate) and also needs a train batch.
inline double alpha_step(SearchState& s, const Tensor& val_batch, const Tensor* train_batch = nullptr, double xi = 0.0) {
    for (auto a : s.arch().vars()) a.zero_grad();
    double loss;
    if (s.config().order == SearchOrder::second) {
        if (!train_batch) throw std::invalid_argument("second-order alpha_step needs a train batch");
        loss = detail::alpha_grad_second_order(s, val_batch, *train_batch, xi);
    } else {
        loss = detail::alpha_grad_first_order(s, val_batch);
    }
    s.arch_optimizer().step();
    for (auto a : s.arch().vars()) a.zero_grad();
    if (!s.arch().all_finite()) throw DivergenceError("non-finite architecture parameters after step " + std::to_string(s.step));
    return loss;
}

struct StepMetrics {
    int64_t step = 0;
    int epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    int skip_count_snapshot = 0;
    double lr = 0;

    nlohmann::json to_json() const {
        return {{"step", step}, {"epoch", epoch}, {"train_loss", train_loss}, {"val_loss", val_loss},
                {"skip_count_snapshot", skip_count_snapshot}, {"lr", lr}};
    }
};

/// Disjoint train/val split of the search images.
struct SearchSplit {
    std::vector<int> train, val;
};

inline SearchSplit search_split(int n, const SearchConfig& cfg) {
    auto s = split_indices(n, cfg.split_fraction, cfg.seed);
    return {std::move(s.first), std::move(s.second)};
}

inline int iterations_per_epoch(const SearchSplit& split, const SearchConfig& cfg) {
    int it = static_cast<int>(std::min(split.train.size(), split.val.size())) / cfg.batch_size;
    if (cfg.max_steps_per_epoch > 0) it = std::min(it, cfg.max_steps_per_epoch);
    return it;
}

// ---- checkpoints ----------------------------------------------------------

inline constexpr int kCheckpointSchemaVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

class BlobWriter {
public:
    void put(const std::string& name, const Tensor& t) {
        u32(static_cast<uint32_t>(name.size()));
        buf_.append(name);
        u32(static_cast<uint32_t>(t.rank()));
        for (int d : t.shape()) u32(static_cast<uint32_t>(d));
        buf_.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(float));
        ++count_;
    }
    std::string finish() const {
        std::string out = "MAENASCK";
        const uint32_t c = count_;
        out.append(reinterpret_cast<const char*>(&c), 4);
        return out + buf_;
    }

private:
    void u32(uint32_t v) { buf_.append(reinterpret_cast<const char*>(&v), 4); }
    std::string buf_;
    uint32_t count_ = 0;
};

class BlobReader {
public:
    explicit BlobReader(const std::string& b) : b_(b) {
        if (b_.size() < 12 || b_.compare(0, 8, "MAENASCK") != 0) throw CheckpointError("checkpoint blob: bad magic");
        pos_ = 8;
        count_ = u32();
    }
    bool next(std::string& name, Tensor& t) {
        if (read_ == count_) return false;
        const uint32_t len = u32();
        need(len);
        name.assign(b_, pos_, len);
        pos_ += len;
        const uint32_t rank = u32();
        Shape shape;
        for (uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(u32()));
        const size_t n = shape_numel(shape);
        need(n * sizeof(float));
        std::vector<float> data(n);
        std::memcpy(data.data(), b_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
        t = Tensor(std::move(shape), std::move(data));
        ++read_;
        return true;
    }

private:
    void need(size_t n) const {
        if (pos_ + n > b_.size()) throw CheckpointError("checkpoint blob: truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, b_.data() + pos_, 4);
        pos_ += 4;
        return v;
    }
    const std::string& b_;
    size_t pos_ = 0;
    uint32_t count_ = 0, read_ = 0;
};

inline std::vector<std::pair<std::string, Tensor*>> state_tensors(SearchState& s) {
    std::vector<std::pair<std::string, Tensor*>> t;
    auto& ps = s.model().params();
    for (const auto& [name, v] : ps.params()) {
        Var h = v;
        t.emplace_back("w/" + name, &h.mutable_value());
    }
    for (const auto& [name, b] : ps.buffers()) {
        t.emplace_back("bn/" + name + "/mean", &b->running_mean);
        t.emplace_back("bn/" + name + "/var", &b->running_var);
    }
    for (auto& [kind, a] : s.arch().alpha) {
        Var h = a;
        t.emplace_back("alpha/" + cell_kind_name(kind), &h.mutable_value());
    }
    auto& mom = s.weight_optimizer().momentum_buffers();
    for (size_t i = 0; i < mom.size(); ++i) t.emplace_back("sgd/" + ps.params()[i].first, &mom[i]);
    auto& m = s.arch_optimizer().first_moments();
    auto& v = s.arch_optimizer().second_moments();
    for (size_t i = 0; i < m.size(); ++i) {
        t.emplace_back("adam/m/" + std::to_string(i), &m[i]);
        t.emplace_back("adam/v/" + std::to_string(i), &v[i]);
    }
    return t;
}

} // namespace detail

/// Writes `state.bin` (tensors) and `state.json` (metadata with the blob's sha256) into `dir`.
inline void save_checkpoint(SearchState& s, const std::filesystem::path& dir) {
    detail::BlobWriter w;
    for (auto& [name, t] : detail::state_tensors(s)) w.put(name, *t);
    for (size_t i = 0; i < s.history.size(); ++i)
        for (const auto& [kind, a] : s.history[i].alpha.alpha)
            w.put("hist/" + std::to_string(i) + "/" + cell_kind_name(kind), a.value());
    const std::string blob = w.finish();

    nlohmann::json meta;
    meta["schema_version"] = kCheckpointSchemaVersion;
    meta["step"] = s.step;
    meta["config_hash"] = s.config_hash;
    meta["rng"] = {{"seed", s.config().seed}, {"masks", "keyed by (seed, step, split, sample)"},
                   {"batches", "keyed by (seed, epoch)"}};
    meta["adam_steps"] = s.arch_optimizer().steps();
    nlohmann::json bn = nlohmann::json::array();
    for (const auto& [_, b] : s.model().params().buffers()) bn.push_back(b->num_batches_tracked);
    meta["bn_batches_tracked"] = bn;
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& h : s.history) hist.push_back({{"epoch", h.epoch}, {"step", h.step}});
    meta["history"] = hist;
    meta["blob_bytes"] = blob.size();
    meta["blob_sha256"] = sha256_hex(blob);
    std::filesystem::create_directories(dir);
    atomic_write(dir / "state.bin", blob);
    atomic_write(dir / "state.json", meta.dump(2) + "\n");
}

inline bool checkpoint_exists(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir / "state.json") && std::filesystem::exists(dir / "state.bin");
}

/// Restores a state saved by save_checkpoint into `s`, which must have been built from the same configuration.
inline void load_checkpoint(SearchState& s, const std::filesystem::path& dir) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(read_text(dir / "state.json"));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("checkpoint metadata unreadable: " + std::string(e.what()));
    }
    const int version = meta.value("schema_version", -1);
    if (version != kCheckpointSchemaVersion)
        throw CheckpointError("checkpoint schema_version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointSchemaVersion) + ")");
    const std::string blob = read_text(dir / "state.bin");
    const std::string expected = meta.at("blob_sha256").get<std::string>();
    const std::string actual = sha256_hex(blob);
    if (expected != actual)
        throw CheckpointError("checkpoint corrupt: hash mismatch, expected " + expected + " got " + actual);
    const std::string cfg_hash = meta.at("config_hash").get<std::string>();
    if (!s.config_hash.empty() && cfg_hash != s.config_hash)
        throw CheckpointError("checkpoint was written by configuration " + cfg_hash + ", not " + s.config_hash);

    std::map<std::string, Tensor> stored;
    {
        detail::BlobReader r(blob);
        std::string name;
        Tensor t;
        while (r.next(name, t)) stored.emplace(name, std::move(t));
    }
    for (auto& [name, t] : detail::state_tensors(s)) {
        auto it = stored.find(name);
        if (it == stored.end()) throw CheckpointError("checkpoint lacks tensor " + name);
        if (it->second.shape() != t->shape())
            throw CheckpointError("checkpoint tensor " + name + " has shape " + shape_str(it->second.shape()) +
                                  ", expected " + shape_str(t->shape()));
        *t = it->second;
    }
    const auto& bn = meta.at("bn_batches_tracked");
    const auto& bufs = s.model().params().buffers();
    if (bn.size() != bufs.size()) throw CheckpointError("checkpoint BN buffer count mismatch");
    for (size_t i = 0; i < bufs.size(); ++i) bufs[i].second->num_batches_tracked = bn[i].get<int64_t>();
    s.arch_optimizer().set_steps(meta.at("adam_steps").get<int64_t>());
    s.step = meta.at("step").get<int64_t>();
    s.history.clear();
    const auto& hist = meta.at("history");
    for (size_t i = 0; i < hist.size(); ++i) {
        AlphaSnapshot snap{hist[i].at("epoch").get<int>(), hist[i].at("step").get<int64_t>(), {}};
        for (const auto& [kind, _] : s.arch().alpha) {
            auto it = stored.find("hist/" + std::to_string(i) + "/" + cell_kind_name(kind));
            if (it == stored.end()) throw CheckpointError("checkpoint lacks alpha snapshot " + std::to_string(i));
            snap.alpha.alpha[kind] = Var::leaf(it->second);
        }
        s.history.push_back(std::move(snap));
    }
}

// ---- the search loop --------------------------------------------------------

struct SearchOptions {
    std::filesystem::path checkpoint_dir; // empty: no checkpoints
    int checkpoint_every = 0;             // steps between checkpoints; 0 = end of each epoch only
    std::filesystem::path metrics_path;   // JSON lines, one per step; empty: not written
    int64_t stop_after_step = -1;         // return early once this many steps are done
    std::function<void(const StepMetrics&)> on_step;
};

struct SearchResult {
    std::vector<StepMetrics> metrics; // steps executed by this call
    Genotype genotype;
    bool completed = false;
};

namespace detail {

inline void truncate_metrics(const std::filesystem::path& p, int64_t keep_below) {
    if (!std::filesystem::exists(p)) return;
    std::istringstream in(read_text(p));
    std::string line, kept;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (nlohmann::json::parse(line).at("step").get<int64_t>() < keep_below) kept += line + "\n";
    }
    atomic_write(p, kept);
}

inline std::vector<int> epoch_order(const std::vector<int>& ids, uint64_t seed, int epoch, uint64_t split) {
    auto perm = permutation(static_cast<int>(ids.size()), seed, {0x6570ULL, static_cast<uint64_t>(epoch), split});
    std::vector<int> out;
    out.reserve(ids.size());
    for (int p : perm) out.push_back(ids[static_cast<size_t>(p)]);
    return out;
}

} // namespace detail

/// Alternates alpha_step (val split) and weight_step (train split) from s.step until all epochs are done.
/// A state loaded from a checkpoint continues the exact trajectory of the run that wrote it.
inline SearchResult run_search(SearchState& s, const ImageSet& data, const SearchOptions& opt = {}) {
    const SearchConfig& cfg = s.config();
    const SearchSplit split = search_split(data.size(), cfg);
    const int ipe = iterations_per_epoch(split, cfg);
    if (cfg.epochs > 0 && ipe == 0)
        throw std::invalid_argument("search split of " + std::to_string(data.size()) + " images is too small for batch " +
                                    std::to_string(cfg.batch_size));
    const int64_t total = static_cast<int64_t>(cfg.epochs) * ipe;
    if (!opt.metrics_path.empty()) {
        if (s.step == 0 && std::filesystem::exists(opt.metrics_path)) std::filesystem::remove(opt.metrics_path);
        detail::truncate_metrics(opt.metrics_path, s.step);
        if (opt.metrics_path.has_parent_path()) std::filesystem::create_directories(opt.metrics_path.parent_path());
    }
    if (s.history.empty()) s.history.push_back({0, 0, s.arch().clone()});

    SearchResult res;
    const auto B = static_cast<size_t>(cfg.batch_size);
    int cached_epoch = -1;
    std::vector<int> train_order, val_order;
    while (s.step < total) {
        const int epoch = static_cast<int>(s.step / ipe);
        const size_t it = static_cast<size_t>(s.step % ipe);
        if (epoch != cached_epoch) {
            train_order = detail::epoch_order(split.train, cfg.seed, epoch, 0);
            val_order = detail::epoch_order(split.val, cfg.seed, epoch, 1);
            cached_epoch = epoch;
        }
        const Tensor tb = data.batch(std::span<const int>(train_order).subspan(it * B, B));
        const Tensor vb = data.batch(std::span<const int>(val_order).subspan(it * B, B));
        const double lr = cosine_lr(cfg.w_lr, cfg.w_lr_min, epoch, cfg.epochs);

        StepMetrics m;
        m.step = s.step;
        m.epoch = epoch;
        m.lr = lr;
        m.val_loss = alpha_step(s, vb, &tb, lr);
        m.train_loss = weight_step(s, tb, lr);
        ++s.step;
        m.skip_count_snapshot = count_skip_connections(derive_genotype(s.arch(), s.space()), s.space()).normal;

        const bool epoch_end = s.step % ipe == 0;
        if (epoch_end) s.history.push_back({epoch + 1, s.step, s.arch().clone()});
        if (!opt.metrics_path.empty()) append_line(opt.metrics_path, m.to_json().dump());
        if (opt.on_step) opt.on_step(m);
        res.metrics.push_back(m);
        if (!opt.checkpoint_dir.empty() &&
            (epoch_end || (opt.checkpoint_every > 0 && s.step % opt.checkpoint_every == 0)))
            save_checkpoint(s, opt.checkpoint_dir);
        if (opt.stop_after_step >= 0 && s.step >= opt.stop_after_step && s.step < total) {
            res.genotype = derive_genotype(s.arch(), s.space());
            return res;
        }
    }
    if (!opt.checkpoint_dir.empty()) save_checkpoint(s, opt.checkpoint_dir);
    res.genotype = derive_genotype(s.arch(), s.space());
    if (!s.config_hash.empty()) res.genotype.config_hash = s.config_hash;
    res.completed = true;
    return res;
}

} // namespace maenas
