#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "maenas/maenas.hpp"

namespace maenas::testing {

inline Tensor random_tensor(Shape s, uint64_t seed, double scale = 1.0) {
    auto rng = rng_for(seed, {0x74657374ULL});
    Tensor t(std::move(s));
    for (float& v : t.values()) v = static_cast<float>(scale * standard_normal(rng));
    return t;
}

/// Compares backward() against central differences of sum(f(inputs) * R) for every element of every input.
inline void expect_gradients_match(const std::function<Var(const std::vector<Var>&)>& f, std::vector<Var> inputs,
                                   double eps = 1e-2, double tol = 2e-2, const std::string& what = "") {
    Tensor probe;
    auto loss = [&](const std::vector<Var>& in) {
        Var y = f(in);
        if (probe.empty()) probe = random_tensor(y.shape(), 99);
        return sum_all(mul_const(y, probe));
    };
    for (auto& v : inputs) v.zero_grad();
    backward(loss(inputs));
    for (size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        ASSERT_TRUE(inputs[k].has_grad()) << what << " input " << k << " got no gradient";
        const Tensor analytic = inputs[k].grad();
        Tensor& x = inputs[k].mutable_value();
        for (size_t i = 0; i < x.numel(); ++i) {
            const float orig = x[i];
            double lp, lm;
            {
                NoGradGuard ng;
                x[i] = orig + static_cast<float>(eps);
                lp = loss(inputs).value()[0];
                x[i] = orig - static_cast<float>(eps);
                lm = loss(inputs).value()[0];
            }
            x[i] = orig;
            const double numeric = (lp - lm) / (2 * eps);
            EXPECT_NEAR(analytic[i], numeric, tol * std::max(1.0, std::abs(numeric)))
                << what << " input " << k << " element " << i;
        }
    }
}

inline ImageSet synthetic_images(int n, int size, uint64_t seed) {
    auto raw = make_synthetic(n, size, seed);
    standardize(raw.images, compute_channel_stats(raw.images));
    return ImageSet{std::move(raw.images)};
}

inline LabeledSet synthetic_labeled(int n, int size, uint64_t seed, const ChannelStats* stats = nullptr) {
    auto raw = make_synthetic(n, size, seed);
    standardize(raw.images, stats ? *stats : compute_channel_stats(raw.images));
    return LabeledSet{ImageSet{std::move(raw.images)}, std::move(raw.labels), raw.num_classes};
}

inline SearchSpace micro_space() {
    return SearchSpace::nb201({OpKind::skip_connect, OpKind::conv_3x3, OpKind::avg_pool_3x3}, 3);
}

inline AutoencoderConfig tiny_autoencoder(Macro macro = Macro::darts, bool hd = true) {
    AutoencoderConfig c;
    c.supernet.space = macro == Macro::darts ? SearchSpace::darts() : SearchSpace::nb201();
    c.supernet.num_cells = 5;
    c.supernet.init_channels = 4;
    c.decoder.embed_width = 8;
    c.decoder.use_hierarchical = hd;
    return c;
}

} // namespace maenas::testing
