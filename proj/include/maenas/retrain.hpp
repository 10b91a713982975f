#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "maenas/bilevel_search.hpp"
#include "maenas/data.hpp"
#include "maenas/operations.hpp"
#include "maenas/optim.hpp"

namespace maenas {

struct RetrainConfig {
    int layers = 8;
    int init_channels = 16;
    int epochs = 20;
    int batch_size = 96;
    double lr = 0.025;
    double lr_min = 0.0;
    double momentum = 0.9;
    double weight_decay = 3e-4;
    double grad_clip = 5.0;
    bool crop_flip = true;
    bool cutout = false;
    int cutout_length = 16;
    float drop_path_prob = 0.f;
    bool auxiliary = false;
    double auxiliary_weight = 0.4;
    int stem_multiplier = 3;
    std::vector<int> reduction_positions; // empty: layers/3 and 2*layers/3
    uint64_t seed = 0;
    int max_steps_per_epoch = 0;          // 0 = full epochs
    int eval_batch = 200;

    std::vector<int> reductions() const {
        if (!reduction_positions.empty()) return reduction_positions;
        return {layers / 3, 2 * layers / 3};
    }

    std::vector<std::string> problems() const {
        std::vector<std::string> p;
        if (layers < 1) p.push_back("retrain.layers must be >= 1");
        if (init_channels < 1) p.push_back("retrain.init_channels must be >= 1");
        if (epochs < 0) p.push_back("retrain.epochs must be >= 0");
        if (batch_size < 1) p.push_back("retrain.batch_size must be >= 1");
        if (eval_batch < 1) p.push_back("retrain.eval_batch must be >= 1");
        if (stem_multiplier < 1) p.push_back("retrain.stem_multiplier must be >= 1");
        if (!(drop_path_prob >= 0.f && drop_path_prob < 1.f)) p.push_back("retrain.drop_path_prob must be in [0, 1)");
        if (cutout && cutout_length < 1) p.push_back("retrain.cutout_length must be >= 1");
        if (max_steps_per_epoch < 0) p.push_back("retrain.max_steps_per_epoch must be >= 0");
        for (int r : reductions())
            if (r < 0 || r >= layers) p.push_back("retrain reduction position " + std::to_string(r) + " outside [0, layers)");
        return p;
    }

    void validate() const {
        auto p = problems();
        if (!p.empty()) throw std::invalid_argument(p.front());
    }
};

/// Genotype using `op` on every selected slot: the first two incoming edges per node for top-2 cells, all edges otherwise.
inline Genotype uniform_genotype(const SearchSpace& space, OpKind op) {
    Genotype g;
    for (const CellSpec* spec : space.cells()) {
        CellGenotype cg;
        for (int n = 0; n < spec->num_nodes; ++n) {
            const int node = spec->num_inputs + n;
            std::vector<GenotypeEntry> entries;
            for (int e : spec->incoming(node)) entries.push_back({op, spec->edges[static_cast<size_t>(e)].from});
            std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.predecessor < b.predecessor; });
            if (spec->selection == EdgeSelection::top2 && entries.size() > 2) entries.resize(2);
            cg.push_back(std::move(entries));
        }
        g.cells[spec->cell_kind] = std::move(cg);
    }
    return g;
}

namespace detail {

inline Var apply_drop_path(const Var& x, const ForwardContext& ctx) {
    if (!ctx.training || ctx.drop_path_prob <= 0.f || !ctx.rng) return x;
    const float keep_prob = 1.f - ctx.drop_path_prob;
    std::vector<uint8_t> keep(static_cast<size_t>(x.shape()[0]));
    for (auto& k : keep) k = uniform01(*ctx.rng) < keep_prob;
    return drop_path(x, keep, keep_prob);
}

} // namespace detail

/// A cell with exactly the genotype's operations; each node sums its chosen inputs.
class DiscreteCell {
public:
    DiscreteCell(ParamStore& ps, const std::string& name, const CellSpec& spec, const CellGenotype& g, int c,
                 bool reduction, bool concat_output)
        : spec_(spec), genotype_(g), concat_(concat_output) {
        const OpOptions opt{true, false};
        for (size_t n = 0; n < g.size(); ++n) {
            std::vector<std::unique_ptr<CandidateOp>> node_ops;
            for (const auto& e : g[n]) {
                const int stride = reduction && e.predecessor < spec.num_inputs ? 2 : 1;
                node_ops.push_back(make_operation(e.op, ps,
                                                  name + ".n" + std::to_string(n + spec.num_inputs) + ".from" +
                                                      std::to_string(e.predecessor),
                                                  c, stride, opt));
            }
            ops_.push_back(std::move(node_ops));
        }
    }

    Var forward(std::vector<Var> states, const ForwardContext& ctx) const {
        for (size_t n = 0; n < genotype_.size(); ++n) {
            std::vector<Var> terms;
            for (size_t k = 0; k < genotype_[n].size(); ++k) {
                const auto& op = *ops_[n][k];
                Var h = op.forward(states.at(static_cast<size_t>(genotype_[n][k].predecessor)), ctx);
                if (dynamic_cast<const IdentityOp*>(&op) == nullptr) h = detail::apply_drop_path(h, ctx);
                terms.push_back(h);
            }
            states.push_back(terms.size() == 1 ? terms[0] : add_n(terms));
        }
        if (!concat_) return states.back();
        return concat_channels(std::vector<Var>(states.begin() + spec_.num_inputs, states.end()));
    }

    int num_nodes() const { return static_cast<int>(genotype_.size()); }

private:
    CellSpec spec_;
    CellGenotype genotype_;
    bool concat_;
    std::vector<std::vector<std::unique_ptr<CandidateOp>>> ops_;
};

/// Auxiliary classifier on the 8x8 feature map after the second reduction.
class AuxiliaryHead {
public:
    AuxiliaryHead(ParamStore& ps, int c, int classes)
        : conv1_(ps, "aux.conv1", c, 128, 1, {}), bn1_(ps, "aux.bn1", 128, true), conv2_(ps, "aux.conv2", 128, 768, 2, {}),
          bn2_(ps, "aux.bn2", 768, true), fc_(ps, "aux.fc", 768, classes) {}

    Var forward(const Var& x, const ForwardContext& ctx) const {
        Var y = pool2d(relu(x), PoolKind::avg, 5, 3, 0);
        y = relu(bn1_(conv1_(y), ctx));
        y = relu(bn2_(conv2_(y), ctx));
        return fc_(global_avg_pool(y));
    }

private:
    Conv2d conv1_;
    BatchNorm2d bn1_;
    Conv2d conv2_;
    BatchNorm2d bn2_;
    Linear fc_;
};

struct NetworkSummary {
    size_t parameters = 0;      // excluding the auxiliary head
    size_t cell_parameters = 0; // parameters inside discrete cells, preprocessing excluded
    int64_t macs = 0;           // multiply-accumulates of convolutions and linear layers for one image
};

/// Discrete network stacked from a genotype; owns its parameters.
class DiscreteNetwork {
public:
    DiscreteNetwork(const Genotype& g, const SearchSpace& space, const RetrainConfig& cfg, int num_classes,
                    int in_channels = 3)
        : cfg_(cfg), space_(space), genotype_(g), params_(std::make_unique<ParamStore>(cfg.seed)) {
        cfg.validate();
        auto problems = validate_genotype(g, space);
        if (!problems.empty()) throw std::invalid_argument("invalid genotype: " + problems.front());
        const auto red = cfg.reductions();
        std::vector<bool> is_red(static_cast<size_t>(cfg.layers), false);
        for (int r : red) is_red[static_cast<size_t>(r)] = true;
        ParamStore& ps = *params_;
        const int C = cfg.init_channels;
        if (space.macro == Macro::darts) {
            const int c_stem = cfg.stem_multiplier * C;
            stem_conv_ = Conv2d(ps, "stem.conv", in_channels, c_stem, 3, {1, 1, 1, 1});
            stem_bn_ = BatchNorm2d(ps, "stem.bn", c_stem, true);
            int c_pp = c_stem, c_p = c_stem, c_cur = C;
            bool red_prev = false;
            for (int i = 0; i < cfg.layers; ++i) {
                const bool red_i = is_red[static_cast<size_t>(i)];
                if (red_i) c_cur *= 2;
                const std::string name = "pre" + std::to_string(i);
                Layer L;
                if (red_prev) L.pre0 = std::make_unique<FactorizedReduce>(ps, name + ".0", c_pp, c_cur, true);
                else L.pre0 = std::make_unique<ReLUConvBN>(ps, name + ".0", c_pp, c_cur, 1, 1, 0, true);
                L.pre1 = std::make_unique<ReLUConvBN>(ps, name + ".1", c_p, c_cur, 1, 1, 0, true);
                const CellKind kind = red_i ? CellKind::reduction : CellKind::normal;
                L.cell = std::make_unique<DiscreteCell>(ps, "cell" + std::to_string(i), space.cell(kind), g.cell(kind),
                                                        c_cur, red_i, true);
                c_pp = c_p;
                c_p = c_cur * space.cell(kind).num_nodes;
                layers_.push_back(std::move(L));
                red_prev = red_i;
                if (cfg.auxiliary && i == red.back()) {
                    aux_after_ = i;
                    aux_ = std::make_unique<AuxiliaryHead>(ps, c_p, num_classes);
                }
            }
            classifier_ = Linear(ps, "classifier", c_p, num_classes);
        } else {
            stem_conv_ = Conv2d(ps, "stem.conv", in_channels, C, 3, {1, 1, 1, 1});
            stem_bn_ = BatchNorm2d(ps, "stem.bn", C, true);
            int c = C;
            for (int i = 0; i < cfg.layers; ++i) {
                Layer L;
                if (is_red[static_cast<size_t>(i)]) {
                    L.resblock = std::make_unique<ResidualReduction>(ps, "res" + std::to_string(i), c, 2 * c, true);
                    c *= 2;
                } else {
                    L.cell = std::make_unique<DiscreteCell>(ps, "cell" + std::to_string(i), space.normal,
                                                            g.cell(CellKind::normal), c, false, false);
                }
                layers_.push_back(std::move(L));
            }
            last_bn_ = BatchNorm2d(ps, "lastact.bn", c, true);
            classifier_ = Linear(ps, "classifier", c, num_classes);
        }
    }

    /// Logits (N, classes). When `aux_logits` is given and the auxiliary head is enabled, it receives that head's logits.
    Var forward(const Tensor& images, const ForwardContext& ctx, Var* aux_logits = nullptr) const {
        Var x = Var::constant(images);
        Var s = stem_bn_(stem_conv_(x), ctx);
        Var s0 = s, s1 = s;
        for (size_t i = 0; i < layers_.size(); ++i) {
            const Layer& L = layers_[i];
            Var out;
            if (L.resblock) out = L.resblock->forward(s1, ctx);
            else if (space_.macro == Macro::darts) out = L.cell->forward({L.pre0->forward(s0, ctx), L.pre1->forward(s1, ctx)}, ctx);
            else out = L.cell->forward({s1}, ctx);
            s0 = s1;
            s1 = out;
            if (aux_ && aux_logits && ctx.training && static_cast<int>(i) == aux_after_) *aux_logits = aux_->forward(s1, ctx);
        }
        if (space_.macro == Macro::nb201) s1 = relu(last_bn_(s1, ctx));
        return classifier_(global_avg_pool(s1));
    }

    NetworkSummary summarize(int height, int width) const {
        NetworkSummary s;
        for (const auto& [name, p] : params_->params()) {
            if (name.rfind("aux.", 0) == 0) continue;
            s.parameters += p.value().numel();
            if (name.rfind("cell", 0) == 0) s.cell_parameters += p.value().numel();
        }
        NoGradGuard ng;
        const ParamSnapshot saved = ParamSnapshot::take(*params_);
        MacCounter macs;
        forward(Tensor({1, in_channels(), height, width}), ForwardContext::eval());
        s.macs = macs.count();
        saved.restore(*params_);
        return s;
    }

    ParamStore& params() { return *params_; }
    const ParamStore& params() const { return *params_; }
    const Genotype& genotype() const { return genotype_; }
    const RetrainConfig& config() const { return cfg_; }
    bool has_auxiliary() const { return aux_ != nullptr; }

private:
    struct Layer {
        std::unique_ptr<CandidateOp> pre0, pre1;
        std::unique_ptr<DiscreteCell> cell;
        std::unique_ptr<ResidualReduction> resblock;
    };

    int in_channels() const { return stem_conv_.weight.value().dim(1); }

    RetrainConfig cfg_;
    SearchSpace space_;
    Genotype genotype_;
    std::unique_ptr<ParamStore> params_;
    Conv2d stem_conv_;
    BatchNorm2d stem_bn_;
    BatchNorm2d last_bn_;
    std::vector<Layer> layers_;
    std::unique_ptr<AuxiliaryHead> aux_;
    int aux_after_ = -1;
    Linear classifier_;
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double train_accuracy = 0;
    double test_accuracy = 0;
};

struct TrainResult {
    double final_accuracy = 0;
    double best_accuracy = 0;
    std::vector<EpochRecord> curve;
    double seconds = 0;
};

/// Top-1 accuracy in eval mode.
inline double evaluate_accuracy(const DiscreteNetwork& net, const LabeledSet& data, int batch = 200) {
    if (data.size() == 0) throw std::invalid_argument("evaluate_accuracy: empty dataset");
    NoGradGuard ng;
    int correct = 0;
    for (int b = 0; b < data.size(); b += batch) {
        std::vector<int> idx;
        for (int i = b; i < std::min(data.size(), b + batch); ++i) idx.push_back(i);
        Var logits = net.forward(data.images.batch(idx), ForwardContext::eval());
        const Tensor& l = logits.value();
        const int K = l.dim(1);
        for (size_t k = 0; k < idx.size(); ++k) {
            const float* row = l.data() + k * static_cast<size_t>(K);
            const int pred = static_cast<int>(std::max_element(row, row + K) - row);
            correct += pred == data.labels[static_cast<size_t>(idx[k])];
        }
    }
    return static_cast<double>(correct) / data.size();
}

/// Supervised training from scratch: momentum SGD, cosine schedule per epoch, optional augmentation.
inline TrainResult train_from_scratch(DiscreteNetwork& net, const LabeledSet& train, const LabeledSet& test,
                                      const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    const RetrainConfig& cfg = net.config();
    if (train.size() == 0) throw std::invalid_argument("train_from_scratch: empty training set");
    const auto t0 = std::chrono::steady_clock::now();
    Sgd opt(net.params().vars(), cfg.momentum, cfg.weight_decay);
    TrainResult res;
    const int n = train.size();
    int steps = (n + cfg.batch_size - 1) / cfg.batch_size;
    if (cfg.max_steps_per_epoch > 0) steps = std::min(steps, cfg.max_steps_per_epoch);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs);
        const auto order = permutation(n, cfg.seed, {0x7274ULL, static_cast<uint64_t>(epoch)});
        auto aug_rng = rng_for(cfg.seed, {0x617567ULL, static_cast<uint64_t>(epoch)});
        ForwardContext ctx;
        ctx.drop_path_prob = cfg.epochs > 0 ? cfg.drop_path_prob * epoch / cfg.epochs : 0.f;
        ctx.rng = &aug_rng;
        double loss_sum = 0;
        int correct = 0, seen = 0;
        for (int s = 0; s < steps; ++s) {
            const int b = s * cfg.batch_size;
            std::span<const int> idx = std::span<const int>(order).subspan(
                static_cast<size_t>(b), static_cast<size_t>(std::min(cfg.batch_size, n - b)));
            Tensor batch = train.images.batch(idx);
            if (cfg.crop_flip) batch = augment_crop_flip(batch, 4, aug_rng);
            if (cfg.cutout) apply_cutout(batch, cfg.cutout_length, aug_rng);
            std::vector<int> labels;
            for (int i : idx) labels.push_back(train.labels[static_cast<size_t>(i)]);

            opt.zero_grad();
            Var aux;
            Var logits = net.forward(batch, ctx, &aux);
            Var loss = cross_entropy(logits, labels);
            if (aux.defined()) loss = add(loss, scale(cross_entropy(aux, labels), static_cast<float>(cfg.auxiliary_weight)));
            const double lv = loss.value()[0];
            if (!std::isfinite(lv))
                throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + " step " + std::to_string(s));
            backward(loss);
            clip_grad_norm(opt.params(), cfg.grad_clip);
            opt.step(lr);
            loss_sum += lv * static_cast<double>(idx.size());
            seen += static_cast<int>(idx.size());
            const Tensor& l = logits.value();
            const int K = l.dim(1);
            for (size_t k = 0; k < idx.size(); ++k) {
                const float* row = l.data() + k * static_cast<size_t>(K);
                correct += static_cast<int>(std::max_element(row, row + K) - row) == labels[k];
            }
        }
        opt.zero_grad();
        EpochRecord r{epoch, lr, seen ? loss_sum / seen : 0.0, seen ? static_cast<double>(correct) / seen : 0.0,
                      evaluate_accuracy(net, test, cfg.eval_batch)};
        res.best_accuracy = std::max(res.best_accuracy, r.test_accuracy);
        res.curve.push_back(r);
        if (on_epoch) on_epoch(r);
    }
    res.final_accuracy = res.curve.empty() ? evaluate_accuracy(net, test, cfg.eval_batch) : res.curve.back().test_accuracy;
    if (res.curve.empty()) res.best_accuracy = res.final_accuracy;
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

inline nlohmann::json retrain_config_json(const RetrainConfig& c) {
    return {{"layers", c.layers},
            {"init_channels", c.init_channels},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"lr_min", c.lr_min},
            {"momentum", c.momentum},
            {"weight_decay", c.weight_decay},
            {"grad_clip", c.grad_clip},
            {"crop_flip", c.crop_flip},
            {"cutout", c.cutout},
            {"cutout_length", c.cutout_length},
            {"drop_path_prob", c.drop_path_prob},
            {"auxiliary", c.auxiliary},
            {"auxiliary_weight", c.auxiliary_weight},
            {"stem_multiplier", c.stem_multiplier},
            {"reduction_positions", c.reduction_positions},
            {"seed", c.seed},
            {"max_steps_per_epoch", c.max_steps_per_epoch},
            {"eval_batch", c.eval_batch}};
}

/// Results record: genotype hash, accuracy, size, and the flags that shaped training.
inline nlohmann::json retrain_results_json(const DiscreteNetwork& net, const TrainResult& r, const NetworkSummary& s) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& e : r.curve)
        curve.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss},
                         {"train_accuracy", e.train_accuracy}, {"test_accuracy", e.test_accuracy}});
    const auto& c = net.config();
    return {{"genotype_hash", genotype_hash(net.genotype())},
            {"accuracy", r.final_accuracy},
            {"best_accuracy", r.best_accuracy},
            {"params", s.parameters},
            {"cell_params", s.cell_parameters},
            {"macs", s.macs},
            {"flags", {{"crop_flip", c.crop_flip}, {"cutout", c.cutout}, {"drop_path_prob", c.drop_path_prob},
                       {"auxiliary", c.auxiliary}}},
            {"config", retrain_config_json(c)},
            {"curve", curve},
            {"seconds", r.seconds}};
}

} // namespace maenas
