#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>

#include "maenas/nn.hpp"
#include "maenas/supernet.hpp"

namespace maenas {

struct DecoderConfig {
    int embed_width = 64;
    bool use_hierarchical = true;
    int output_channels = 3;

    void validate() const {
        if (embed_width <= 0) throw std::invalid_argument("decoder embed_width must be positive");
        if (output_channels <= 0) throw std::invalid_argument("decoder output_channels must be positive");
    }
};

/// Reconstruction head. Hierarchical mode projects each pyramid level with a 1x1 conv,
/// upsamples to full resolution, sums, and maps to pixels with a 1x1 linear head.
/// Flat mode uses F3 only (the F1/F2 projections do not exist).
class HierarchicalDecoder {
public:
    HierarchicalDecoder(ParamStore& ps, const DecoderConfig& cfg, std::array<int, 3> pyramid_channels) : cfg_(cfg) {
        cfg.validate();
        if (cfg.use_hierarchical) {
            proj1_ = Conv2d(ps, "decoder.proj1", pyramid_channels[0], cfg.embed_width, 1, {}, true);
            proj2_ = Conv2d(ps, "decoder.proj2", pyramid_channels[1], cfg.embed_width, 1, {}, true);
        }
        proj3_ = Conv2d(ps, "decoder.proj3", pyramid_channels[2], cfg.embed_width, 1, {}, true);
        head_ = Conv2d(ps, "decoder.head", cfg.embed_width, cfg.output_channels, 1, {}, true);
    }

    Var decode(const FeaturePyramid& pyr) const {
        check_pyramid(pyr);
        Var sum = add_n({(*proj1_)(pyr.f1), upsample_nearest((*proj2_)(pyr.f2), 2), upsample_nearest(proj3_(pyr.f3), 4)});
        return head_(sum);
    }

    Var decode_flat(const FeaturePyramid& pyr) const {
        check_pyramid(pyr);
        return head_(upsample_nearest(proj3_(pyr.f3), 4));
    }

    Var operator()(const FeaturePyramid& pyr) const { return cfg_.use_hierarchical ? decode(pyr) : decode_flat(pyr); }

    const DecoderConfig& config() const { return cfg_; }
    const std::optional<Conv2d>& proj1() const { return proj1_; }
    const std::optional<Conv2d>& proj2() const { return proj2_; }
    const Conv2d& proj3() const { return proj3_; }
    const Conv2d& head() const { return head_; }

    void zero_biases() {
        for (Conv2d* c : {proj1_ ? &*proj1_ : nullptr, proj2_ ? &*proj2_ : nullptr, &proj3_, &head_})
            if (c && c->bias) c->bias->mutable_value().fill(0.f);
    }

private:
    void check_pyramid(const FeaturePyramid& pyr) const {
        if (!pyr.f3.defined()) throw std::invalid_argument("pyramid has no F3");
        const auto& s3 = pyr.f3.shape();
        if (cfg_.use_hierarchical) {
            if (!pyr.f1.defined() || !pyr.f2.defined()) throw std::invalid_argument("pyramid is missing F1 or F2");
            const auto& s1 = pyr.f1.shape();
            const auto& s2 = pyr.f2.shape();
            if (s2[2] * 2 != s1[2] || s2[3] * 2 != s1[3] || s3[2] * 4 != s1[2] || s3[3] * 4 != s1[3] ||
                s1[0] != s2[0] || s1[0] != s3[0])
                throw std::invalid_argument("pyramid resolution violation: F1 " + shape_str(s1) + ", F2 " + shape_str(s2) +
                                            ", F3 " + shape_str(s3));
        }
    }

    DecoderConfig cfg_;
    std::optional<Conv2d> proj1_, proj2_;
    Conv2d proj3_;
    Conv2d head_;
};

} // namespace maenas
