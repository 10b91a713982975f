#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maenas/io.hpp"
#include "maenas/ops.hpp"

namespace maenas {

struct ForwardContext {
    bool training = true;
    // accumulate BN statistics as a plain average instead of an EMA
    bool recalibrate_bn = false;
    float drop_path_prob = 0.f;
    std::mt19937_64* rng = nullptr;

    BnOptions bn() const {
        BnOptions o;
        o.training = training || recalibrate_bn;
        if (recalibrate_bn) o.momentum.reset();
        return o;
    }

    static ForwardContext eval() { return ForwardContext{false}; }
};

/// Owns the trainable tensors and BN buffers of a model, in registration order.
class ParamStore {
public:
    explicit ParamStore(uint64_t init_seed = 0) : rng_(rng_for(init_seed, {0x706172616dULL})) {}

    Var add(const std::string& name, Tensor init) {
        if (!names_.insert(name).second) throw std::logic_error("duplicate parameter name " + name);
        params_.emplace_back(name, Var::leaf(std::move(init)));
        return params_.back().second;
    }

    std::shared_ptr<BnBuffers> add_bn_buffers(const std::string& name, int channels) {
        if (!names_.insert(name + "#bn").second) throw std::logic_error("duplicate buffer name " + name);
        buffers_.emplace_back(name, std::make_shared<BnBuffers>(channels));
        return buffers_.back().second;
    }

    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the common default for conv and linear layers.
    Tensor uniform_fan_in(Shape shape, int fan_in) {
        Tensor t(std::move(shape));
        const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (float& v : t.values()) v = static_cast<float>((2.0 * uniform01(rng_) - 1.0) * b);
        return t;
    }

    const std::vector<std::pair<std::string, Var>>& params() const { return params_; }
    const std::vector<std::pair<std::string, std::shared_ptr<BnBuffers>>>& buffers() const { return buffers_; }

    std::vector<Var> vars() const {
        std::vector<Var> v;
        v.reserve(params_.size());
        for (const auto& [n, p] : params_) v.push_back(p);
        return v;
    }

    size_t num_parameters() const {
        size_t n = 0;
        for (const auto& [_, p] : params_) n += p.value().numel();
        return n;
    }

    void zero_grad() {
        for (auto& [_, p] : params_) p.zero_grad();
    }

    void reset_bn_statistics() {
        for (auto& [_, b] : buffers_) b->reset();
    }

    bool all_finite() const {
        for (const auto& [_, p] : params_)
            if (!p.value().all_finite()) return false;
        return true;
    }

    std::mt19937_64& rng() { return rng_; }

private:
    std::vector<std::pair<std::string, Var>> params_;
    std::vector<std::pair<std::string, std::shared_ptr<BnBuffers>>> buffers_;
    std::unordered_set<std::string> names_;
    std::mt19937_64 rng_;
};

struct Conv2d {
    Var weight;
    std::optional<Var> bias;
    ConvParams p;

    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int k, ConvParams params, bool with_bias = false)
        : p(params) {
        const int fan_in = cin / params.groups * k * k;
        weight = ps.add(name + ".weight", ps.uniform_fan_in({cout, cin / params.groups, k, k}, fan_in));
        if (with_bias) bias = ps.add(name + ".bias", ps.uniform_fan_in({cout}, fan_in));
    }

    Var operator()(const Var& x) const { return conv2d(x, weight, bias, p); }
    int out_channels() const { return weight.value().dim(0); }
};

struct BatchNorm2d {
    std::optional<Var> gamma;
    std::optional<Var> beta;
    std::shared_ptr<BnBuffers> buffers;

    BatchNorm2d() = default;
    BatchNorm2d(ParamStore& ps, const std::string& name, int channels, bool affine) {
        if (affine) {
            gamma = ps.add(name + ".gamma", Tensor({channels}, 1.f));
            beta = ps.add(name + ".beta", Tensor({channels}, 0.f));
        }
        buffers = ps.add_bn_buffers(name, channels);
    }

    Var operator()(const Var& x, const ForwardContext& ctx) const {
        return batch_norm(x, gamma, beta, buffers.get(), ctx.bn());
    }
};

struct Linear {
    Var weight;
    std::optional<Var> bias;

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out) {
        weight = ps.add(name + ".weight", ps.uniform_fan_in({out, in}, in));
        bias = ps.add(name + ".bias", ps.uniform_fan_in({out}, in));
    }

    Var operator()(const Var& x) const { return linear(x, weight, bias); }
};

/// Gradient-free copy of every parameter value and BN buffer, for snapshot/restore.
struct ParamSnapshot {
    std::vector<Tensor> values;
    std::vector<BnBuffers> buffers;

    static ParamSnapshot take(const ParamStore& ps) {
        ParamSnapshot s;
        for (const auto& [_, p] : ps.params()) s.values.push_back(p.value());
        for (const auto& [_, b] : ps.buffers()) s.buffers.push_back(*b);
        return s;
    }

    void restore(ParamStore& ps) const {
        for (size_t i = 0; i < ps.params().size(); ++i) {
            Var v = ps.params()[i].second;
            v.mutable_value() = values.at(i);
        }
        for (size_t i = 0; i < ps.buffers().size(); ++i) *ps.buffers()[i].second = buffers.at(i);
    }
};

} // namespace maenas
