#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "maenas/autoencoder.hpp"
#include "maenas/data.hpp"

namespace maenas {

struct MaskedLoss {
    double value = 0.0;
    size_t masked_element_count = 0;
};

/// Mean |pred - target| over masked pixel-channel elements; unmasked elements are never read.
inline MaskedLoss masked_l1_loss(const Tensor& pred, const Tensor& target, std::span<const uint8_t> pixel_mask) {
    if (!pred.same_shape(target) || pred.rank() != 4)
        throw std::invalid_argument("masked_l1_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                                    shape_str(target.shape()));
    const int N = pred.dim(0), C = pred.dim(1);
    const size_t HW = static_cast<size_t>(pred.dim(2)) * pred.dim(3);
    if (pixel_mask.size() != N * HW) throw std::invalid_argument("masked_l1_loss: mask shape mismatch");
    MaskedLoss l;
    double s = 0;
    for (int n = 0; n < N; ++n)
        for (size_t i = 0; i < HW; ++i) {
            if (!pixel_mask[n * HW + i]) continue;
            for (int c = 0; c < C; ++c) {
                const size_t o = (static_cast<size_t>(n) * C + c) * HW + i;
                s += std::abs(static_cast<double>(pred[o]) - static_cast<double>(target[o]));
            }
            l.masked_element_count += static_cast<size_t>(C);
        }
    if (l.masked_element_count == 0) throw std::invalid_argument("masked_l1_loss: no masked elements, mean is undefined");
    l.value = s / static_cast<double>(l.masked_element_count);
    return l;
}

struct ScoreOptions {
    MaskSpec mask;
    uint64_t mask_seed = 20240101;
    int batch_size = 64;
    // BN statistics are re-estimated on this many images before scoring; 0 keeps stored statistics
    int calibration_images = 256;
    int calibration_batch = 64;
};

/// The mask used for evaluation image `index`; identical for every model scored with the same seed.
inline PatchMask scoring_mask(const ScoreOptions& opt, int index) {
    return generate_mask(opt.mask, mask_seed(opt.mask_seed, 0, 0x73636f7265ULL, static_cast<uint64_t>(index)));
}

/// Re-estimates BN running statistics under the given cell weights. No parameter changes.
inline void recalibrate_bn(MaskedAutoencoder& model, const CellWeights& weights, const ImageSet& data,
                           const ScoreOptions& opt) {
    NoGradGuard ng;
    model.params().reset_bn_statistics();
    ForwardContext ctx;
    ctx.training = false;
    ctx.recalibrate_bn = true;
    const int n = std::min(opt.calibration_images, data.size());
    for (int b = 0; b < n; b += opt.calibration_batch) {
        std::vector<int> idx;
        std::vector<PatchMask> masks;
        for (int i = b; i < std::min(n, b + opt.calibration_batch); ++i) {
            idx.push_back(i);
            masks.push_back(scoring_mask(opt, i));
        }
        model.forward(data.batch(idx), masks, weights, ctx);
    }
}

/// Per-image masked l1 losses under fixed masks, eval-mode BN.
inline std::vector<double> per_image_losses(const MaskedAutoencoder& model, const CellWeights& weights,
                                            const ImageSet& data, const ScoreOptions& opt) {
    NoGradGuard ng;
    const ForwardContext ctx = ForwardContext::eval();
    std::vector<double> losses;
    losses.reserve(static_cast<size_t>(data.size()));
    for (int b = 0; b < data.size(); b += opt.batch_size) {
        std::vector<int> idx;
        std::vector<PatchMask> masks;
        for (int i = b; i < std::min(data.size(), b + opt.batch_size); ++i) {
            idx.push_back(i);
            masks.push_back(scoring_mask(opt, i));
        }
        Tensor batch = data.batch(idx);
        auto out = model.forward(batch, masks, weights, ctx);
        const size_t per = static_cast<size_t>(batch.dim(1)) * batch.dim(2) * batch.dim(3);
        for (size_t k = 0; k < idx.size(); ++k) {
            Tensor p({1, batch.dim(1), batch.dim(2), batch.dim(3)},
                     std::vector<float>(out.prediction.value().data() + k * per, out.prediction.value().data() + (k + 1) * per));
            Tensor t({1, batch.dim(1), batch.dim(2), batch.dim(3)},
                     std::vector<float>(batch.data() + k * per, batch.data() + (k + 1) * per));
            auto pm = masks[k].pixel_mask();
            losses.push_back(masked_l1_loss(p, t, pm).value);
        }
    }
    return losses;
}

/// -1 x mean masked l1 loss over the evaluation set; higher is better, 0 is perfect.
inline double reconstruction_score(MaskedAutoencoder& model, const CellWeights& weights, const ImageSet& eval_set,
                                   const ScoreOptions& opt) {
    if (eval_set.size() == 0) throw std::invalid_argument("reconstruction_score: empty evaluation set");
    std::optional<ParamSnapshot> saved;
    if (opt.calibration_images > 0) {
        saved = ParamSnapshot::take(model.params());
        recalibrate_bn(model, weights, eval_set, opt);
    }
    auto losses = per_image_losses(model, weights, eval_set, opt);
    if (saved) saved->restore(model.params());
    double s = 0;
    for (double l : losses) s += l;
    return -(s / static_cast<double>(losses.size()));
}

} // namespace maenas
