#pragma once

#include <memory>
#include <vector>

#include "maenas/decoder.hpp"
#include "maenas/masking.hpp"
#include "maenas/supernet.hpp"

namespace maenas {

struct AutoencoderConfig {
    SupernetConfig supernet;
    DecoderConfig decoder;
    // fill masked pixels with zeros instead of the learnable embedding
    bool zero_fill_mask = false;
};

/// Supernet encoder + reconstruction decoder + mask embedding; every tensor lives in one ParamStore.
class MaskedAutoencoder {
public:
    struct Output {
        Var prediction;
        Var loss;
        size_t masked_elements = 0;
        FeaturePyramid pyramid;
    };

    MaskedAutoencoder(const AutoencoderConfig& cfg, uint64_t seed)
        : cfg_(cfg), params_(std::make_unique<ParamStore>(seed)),
          encoder_(std::make_unique<Supernet>(cfg.supernet, *params_)),
          decoder_(std::make_unique<HierarchicalDecoder>(*params_, cfg.decoder, encoder_->pyramid_channels())) {
        if (cfg.zero_fill_mask) {
            embedding_ = Var::constant(Tensor({cfg.supernet.in_channels}));
        } else {
            Tensor e({cfg.supernet.in_channels});
            for (float& v : e.values()) v = static_cast<float>(0.02 * standard_normal(params_->rng()));
            embedding_ = params_->add("mask_embedding", std::move(e));
        }
    }

    Output forward(const Tensor& batch, const std::vector<PatchMask>& masks, const CellWeights& weights,
                   const ForwardContext& ctx) const {
        MaskedBatch mb = apply_mask(batch, masks, embedding_);
        Output out;
        out.pyramid = encoder_->forward_features(mb.images, weights, ctx);
        out.prediction = (*decoder_)(out.pyramid);
        auto [loss, count] = masked_l1(out.prediction, mb.originals, mb.pixel_mask);
        out.loss = loss;
        out.masked_elements = count;
        return out;
    }

    ParamStore& params() { return *params_; }
    const ParamStore& params() const { return *params_; }
    const Supernet& encoder() const { return *encoder_; }
    HierarchicalDecoder& decoder() { return *decoder_; }
    const HierarchicalDecoder& decoder() const { return *decoder_; }
    const Var& mask_embedding() const { return embedding_; }
    const AutoencoderConfig& config() const { return cfg_; }

private:
    AutoencoderConfig cfg_;
    std::unique_ptr<ParamStore> params_;
    std::unique_ptr<Supernet> encoder_;
    std::unique_ptr<HierarchicalDecoder> decoder_;
    Var embedding_;
};

} // namespace maenas
