#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "maenas/io.hpp"
#include "maenas/ops.hpp"

namespace maenas {

struct MaskSpec {
    int image_h = 32;
    int image_w = 32;
    int patch_size = 4;
    double mask_ratio = 0.5;

    int grid_h() const { return image_h / patch_size; }
    int grid_w() const { return image_w / patch_size; }
    int num_patches() const { return grid_h() * grid_w(); }
    int num_masked() const { return static_cast<int>(std::llround(mask_ratio * num_patches())); }

    void validate() const {
        if (patch_size <= 0) throw std::invalid_argument("patch_size must be positive");
        if (image_h <= 0 || image_w <= 0) throw std::invalid_argument("image size must be positive");
        if (image_h % patch_size || image_w % patch_size)
            throw std::invalid_argument("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                        " is not divisible by patch_size " + std::to_string(patch_size));
        if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
            throw std::invalid_argument("mask_ratio " + std::to_string(mask_ratio) + " outside [0, 1]");
    }
};

/// Patch grid, row-major, nonzero = masked.
struct PatchMask {
    int grid_h = 0;
    int grid_w = 0;
    int patch_size = 0;
    std::vector<uint8_t> grid;

    int image_h() const { return grid_h * patch_size; }
    int image_w() const { return grid_w * patch_size; }

    /// Pixel-level expansion, image_h x image_w, row-major.
    std::vector<uint8_t> pixel_mask() const {
        std::vector<uint8_t> px(static_cast<size_t>(image_h()) * image_w());
        for (int y = 0; y < image_h(); ++y)
            for (int x = 0; x < image_w(); ++x)
                px[static_cast<size_t>(y) * image_w() + x] = grid[(y / patch_size) * grid_w + x / patch_size];
        return px;
    }

    std::vector<int> masked_indices() const {
        std::vector<int> idx;
        for (size_t i = 0; i < grid.size(); ++i)
            if (grid[i]) idx.push_back(static_cast<int>(i));
        return idx;
    }

    bool operator==(const PatchMask&) const = default;
};

/// Masks exactly round(ratio * n_patches) patches, sampled uniformly without replacement.
inline PatchMask generate_mask(const MaskSpec& spec, uint64_t seed) {
    spec.validate();
    PatchMask m{spec.grid_h(), spec.grid_w(), spec.patch_size, std::vector<uint8_t>(spec.num_patches(), 0)};
    std::vector<int> order(spec.num_patches());
    std::iota(order.begin(), order.end(), 0);
    auto rng = rng_for(seed);
    const int k = spec.num_masked();
    // partial Fisher-Yates: the first k slots are a uniform k-subset
    for (int i = 0; i < k; ++i) {
        int j = i + static_cast<int>(uniform_index(rng, static_cast<uint64_t>(spec.num_patches() - i)));
        std::swap(order[i], order[j]);
        m.grid[order[i]] = 1;
    }
    return m;
}

/// Seed of the mask for one sample of one step of a run.
inline uint64_t mask_seed(uint64_t run_seed, uint64_t step, uint64_t stream, uint64_t sample) {
    return rng_for(run_seed, {0x6d61736bULL, step, stream, sample})();
}

struct MaskStatistics {
    int masked_count = 0;
    double ratio_realized = 0.0;
};

inline MaskStatistics mask_statistics(const PatchMask& m) {
    MaskStatistics s;
    for (uint8_t g : m.grid) s.masked_count += g ? 1 : 0;
    s.ratio_realized = m.grid.empty() ? 0.0 : static_cast<double>(s.masked_count) / static_cast<double>(m.grid.size());
    return s;
}

struct MaskedBatch {
    Tensor originals;               // (N, 3, H, W)
    Var images;                     // masked input fed to the encoder
    std::vector<uint8_t> pixel_mask; // N*H*W
};

/// Substitutes each sample's masked pixels with the per-channel embedding.
inline MaskedBatch apply_mask(const Tensor& batch, const std::vector<PatchMask>& masks, const Var& embedding) {
    detail::require_rank4(batch, "apply_mask");
    const int N = batch.dim(0), H = batch.dim(2), W = batch.dim(3);
    if (static_cast<int>(masks.size()) != N)
        throw std::invalid_argument("apply_mask: " + std::to_string(masks.size()) + " masks for a batch of " +
                                    std::to_string(N));
    MaskedBatch out;
    out.originals = batch;
    out.pixel_mask.reserve(static_cast<size_t>(N) * H * W);
    for (const auto& m : masks) {
        if (m.image_h() != H || m.image_w() != W)
            throw std::invalid_argument("apply_mask: mask covers " + std::to_string(m.image_h()) + "x" +
                                        std::to_string(m.image_w()) + ", batch is " + std::to_string(H) + "x" +
                                        std::to_string(W));
        auto px = m.pixel_mask();
        out.pixel_mask.insert(out.pixel_mask.end(), px.begin(), px.end());
    }
    out.images = mask_fill(batch, out.pixel_mask, embedding);
    return out;
}

inline MaskedBatch apply_mask(const Tensor& batch, const PatchMask& mask, const Var& embedding) {
    return apply_mask(batch, std::vector<PatchMask>(static_cast<size_t>(batch.dim(0)), mask), embedding);
}

/// Grayscale PNG of a pixel mask, masked = white.
inline void write_mask_png(const fs::path& path, const PatchMask& m) {
    const auto px = m.pixel_mask();
    const int H = m.image_h(), W = m.image_w();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
    if (!fp) throw std::runtime_error("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(W));
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) row[x] = px[static_cast<size_t>(y) * W + x] ? 255 : 0;
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline nlohmann::json mask_dump_json(const PatchMask& m, double ratio, uint64_t seed) {
    return {{"patch_size", m.patch_size}, {"ratio", ratio}, {"seed", seed}, {"masked_patches", m.masked_indices()}};
}

} // namespace maenas
