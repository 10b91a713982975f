#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "maenas/io.hpp"
#include "maenas/tensor.hpp"

namespace maenas {

struct ChannelStats {
    std::array<double, 3> mean{0, 0, 0};
    std::array<double, 3> stddev{1, 1, 1};
};

/// Per-channel mean and population std of an (N, 3, H, W) batch.
inline ChannelStats compute_channel_stats(const Tensor& images) {
    ChannelStats s;
    const int N = images.dim(0), C = images.dim(1);
    const size_t HW = static_cast<size_t>(images.dim(2)) * images.dim(3);
    for (int c = 0; c < C && c < 3; ++c) {
        double sum = 0, sq = 0;
        for (int n = 0; n < N; ++n) {
            const float* p = images.data() + (static_cast<size_t>(n) * C + c) * HW;
            for (size_t i = 0; i < HW; ++i) sum += p[i];
        }
        const double m = sum / static_cast<double>(N * HW);
        for (int n = 0; n < N; ++n) {
            const float* p = images.data() + (static_cast<size_t>(n) * C + c) * HW;
            for (size_t i = 0; i < HW; ++i) sq += (p[i] - m) * (p[i] - m);
        }
        s.mean[c] = m;
        s.stddev[c] = std::max(std::sqrt(sq / static_cast<double>(N * HW)), 1e-8);
    }
    return s;
}

inline void standardize(Tensor& images, const ChannelStats& s) {
    const int N = images.dim(0), C = images.dim(1);
    const size_t HW = static_cast<size_t>(images.dim(2)) * images.dim(3);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float* p = images.data() + (static_cast<size_t>(n) * C + c) * HW;
            const float m = static_cast<float>(s.mean[c]), inv = static_cast<float>(1.0 / s.stddev[c]);
            for (size_t i = 0; i < HW; ++i) p[i] = (p[i] - m) * inv;
        }
}

/// Unlabeled images, already standardized. The label-free search path only ever sees this type.
struct ImageSet {
    Tensor images; // (N, 3, H, W)

    int size() const { return images.empty() ? 0 : images.dim(0); }
    int height() const { return images.dim(2); }
    int width() const { return images.dim(3); }
    Tensor batch(std::span<const int> idx) const { return images.gather_batch(idx); }

    ImageSet subset(std::span<const int> idx) const { return {images.gather_batch(idx)}; }
};

struct LabeledSet {
    ImageSet images;
    std::vector<int> labels;
    int num_classes = 10;

    int size() const { return images.size(); }

    LabeledSet subset(std::span<const int> idx) const {
        LabeledSet s{images.subset(idx), {}, num_classes};
        for (int i : idx) s.labels.push_back(labels.at(i));
        return s;
    }
};

/// Raw pixels in [0, 1] plus labels, prior to standardization.
struct RawDataset {
    Tensor images;
    std::vector<int> labels;
    int num_classes = 10;
};

/// Reads the CIFAR-10 binary format (1 label byte + 3072 pixel bytes per record).
inline RawDataset load_cifar10_files(const std::vector<fs::path>& files, int max_images) {
    constexpr int kRecord = 1 + 3 * 32 * 32;
    std::vector<float> pixels;
    std::vector<int> labels;
    std::vector<unsigned char> rec(kRecord);
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open CIFAR-10 file " + f.string());
        while ((max_images <= 0 || static_cast<int>(labels.size()) < max_images) &&
               in.read(reinterpret_cast<char*>(rec.data()), kRecord)) {
            if (rec[0] > 9) throw std::runtime_error("corrupt CIFAR-10 record in " + f.string());
            labels.push_back(rec[0]);
            for (int i = 1; i < kRecord; ++i) pixels.push_back(static_cast<float>(rec[i]) / 255.f);
        }
    }
    if (labels.empty()) throw std::runtime_error("no CIFAR-10 records read");
    const int n = static_cast<int>(labels.size());
    return {Tensor({n, 3, 32, 32}, std::move(pixels)), std::move(labels), 10};
}

inline RawDataset load_cifar10(const fs::path& dir, bool train, int max_images) {
    fs::path base = dir;
    if (fs::exists(dir / "cifar-10-batches-bin")) base = dir / "cifar-10-batches-bin";
    std::vector<fs::path> files{base / (train ? "data_batch_1.bin" : "test_batch.bin")};
    if (!fs::exists(files[0])) throw std::runtime_error("CIFAR-10 file not found: " + files[0].string());
    // later training batches are optional; a subset needs only the first
    for (int i = 2; train && i <= 5 && fs::exists(base / ("data_batch_" + std::to_string(i) + ".bin")); ++i)
        files.push_back(base / ("data_batch_" + std::to_string(i) + ".bin"));
    return load_cifar10_files(files, max_images);
}

inline bool cifar10_available(const fs::path& dir) {
    fs::path base = fs::exists(dir / "cifar-10-batches-bin") ? dir / "cifar-10-batches-bin" : dir;
    return fs::exists(base / "data_batch_1.bin") && fs::exists(base / "test_batch.bin");
}

namespace detail {

inline void paint(Tensor& t, int n, int y, int x, const std::array<float, 3>& rgb, float a) {
    for (int c = 0; c < 3; ++c) {
        float& p = t.at(n, c, y, x);
        p = (1 - a) * p + a * rgb[c];
    }
}

} // namespace detail

/// Procedural 10-class image set: stripes at four orientations, disc, ring, square, cross,
/// checkerboard and triangle, with random colors, placement, scale and pixel noise.
inline RawDataset make_synthetic(int n, int size, uint64_t seed, int num_classes = 10) {
    if (n <= 0 || size < 8) throw std::invalid_argument("synthetic dataset needs n > 0 and size >= 8");
    if (num_classes < 2 || num_classes > 10) throw std::invalid_argument("synthetic dataset supports 2..10 classes");
    RawDataset d{Tensor({n, 3, size, size}), std::vector<int>(static_cast<size_t>(n)), num_classes};
    auto rng = rng_for(seed, {0x73796e7468ULL});
    const double S = size;
    for (int i = 0; i < n; ++i) {
        const int cls = static_cast<int>(uniform_index(rng, static_cast<uint64_t>(num_classes)));
        d.labels[i] = cls;
        std::array<float, 3> bg{}, fg{};
        for (int c = 0; c < 3; ++c) {
            bg[c] = static_cast<float>(uniform01(rng));
            fg[c] = static_cast<float>(uniform01(rng));
        }
        // keep foreground distinguishable from background
        for (int c = 0; c < 3; ++c)
            if (std::abs(fg[c] - bg[c]) < 0.3f) fg[c] = bg[c] > 0.5f ? bg[c] - 0.4f : bg[c] + 0.4f;
        const double cx = S * (0.3 + 0.4 * uniform01(rng)), cy = S * (0.3 + 0.4 * uniform01(rng));
        const double r = S * (0.18 + 0.14 * uniform01(rng));
        const double freq = 2.0 * 3.141592653589793 / (S * (0.12 + 0.1 * uniform01(rng)));
        const double phase = 6.283185307179586 * uniform01(rng);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                for (int c = 0; c < 3; ++c) d.images.at(i, c, y, x) = bg[c];
                const double dx = x - cx, dy = y - cy, dist = std::sqrt(dx * dx + dy * dy);
                double a = 0;
                switch (cls) {
                case 0: a = std::sin(freq * y + phase) > 0 ? 1 : 0; break;
                case 1: a = std::sin(freq * x + phase) > 0 ? 1 : 0; break;
                case 2: a = std::sin(freq * (x + y) * 0.7071 + phase) > 0 ? 1 : 0; break;
                case 3: a = std::sin(freq * (x - y) * 0.7071 + phase) > 0 ? 1 : 0; break;
                case 4: a = dist < r ? 1 : 0; break;
                case 5: a = (dist < r && dist > 0.55 * r) ? 1 : 0; break;
                case 6: a = (std::abs(dx) < 0.8 * r && std::abs(dy) < 0.8 * r) ? 1 : 0; break;
                case 7: a = ((std::abs(dx) < 0.25 * r || std::abs(dy) < 0.25 * r) && dist < 1.3 * r) ? 1 : 0; break;
                case 8: {
                    const int cell = std::max(2, static_cast<int>(r / 2));
                    a = (((x / cell) + (y / cell)) % 2) ? 1 : 0;
                    break;
                }
                default: a = (dy > -r && dy < r && std::abs(dx) < (dy + r) * 0.5) ? 1 : 0; break;
                }
                if (a > 0) detail::paint(d.images, i, y, x, fg, static_cast<float>(a));
                for (int c = 0; c < 3; ++c) {
                    float& p = d.images.at(i, c, y, x);
                    p = std::clamp(p + static_cast<float>(0.08 * standard_normal(rng)), 0.f, 1.f);
                }
            }
    }
    return d;
}

/// Seeded disjoint split covering [0, n): the first round(fraction * n) shuffled indices form `first`.
struct IndexSplit {
    std::vector<int> first, second;
};

inline IndexSplit split_indices(int n, double fraction, uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split fraction must be in (0, 1)");
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = rng_for(seed, {0x73706c6974ULL});
    for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[uniform_index(rng, static_cast<uint64_t>(i + 1))]);
    const int k = static_cast<int>(std::llround(fraction * n));
    IndexSplit s;
    s.first.assign(idx.begin(), idx.begin() + k);
    s.second.assign(idx.begin() + k, idx.end());
    std::sort(s.first.begin(), s.first.end());
    std::sort(s.second.begin(), s.second.end());
    return s;
}

/// Seeded permutation of [0, n).
inline std::vector<int> permutation(int n, uint64_t seed, std::initializer_list<uint64_t> stream) {
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = rng_for(seed, stream);
    for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[uniform_index(rng, static_cast<uint64_t>(i + 1))]);
    return idx;
}

/// Random crop with zero padding and horizontal flip, per sample.
inline Tensor augment_crop_flip(const Tensor& batch, int pad, std::mt19937_64& rng) {
    const int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    Tensor out(batch.shape());
    for (int n = 0; n < N; ++n) {
        const int oy = static_cast<int>(uniform_index(rng, 2 * pad + 1)) - pad;
        const int ox = static_cast<int>(uniform_index(rng, 2 * pad + 1)) - pad;
        const bool flip = uniform_index(rng, 2) == 1;
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int sy = y + oy, sx0 = x + ox;
                    const int sx = flip ? W - 1 - sx0 : sx0;
                    out.at(n, c, y, x) = (sy >= 0 && sy < H && sx0 >= 0 && sx0 < W) ? batch.at(n, c, sy, sx) : 0.f;
                }
    }
    return out;
}

/// Zeroes one square of side `length` per sample, centred uniformly at random.
inline void apply_cutout(Tensor& batch, int length, std::mt19937_64& rng) {
    const int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    for (int n = 0; n < N; ++n) {
        const int cy = static_cast<int>(uniform_index(rng, static_cast<uint64_t>(H)));
        const int cx = static_cast<int>(uniform_index(rng, static_cast<uint64_t>(W)));
        for (int y = std::max(0, cy - length / 2); y < std::min(H, cy + length / 2); ++y)
            for (int x = std::max(0, cx - length / 2); x < std::min(W, cx + length / 2); ++x)
                for (int c = 0; c < C; ++c) batch.at(n, c, y, x) = 0.f;
    }
}

} // namespace maenas
