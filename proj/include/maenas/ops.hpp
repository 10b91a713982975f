#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "maenas/autograd.hpp"

namespace maenas {

// Differentiable primitives on NCHW float tensors. Convolutions run per sample so that
// a sample's result does not depend on what else is in the batch.

namespace detail {
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline void require_rank4(const Tensor& t, const char* op) {
    if (t.rank() != 4) throw std::invalid_argument(std::string(op) + ": expected NCHW input, got " + shape_str(t.shape()));
}

inline int64_t& mac_counter() {
    thread_local int64_t macs = 0;
    return macs;
}
} // namespace detail

/// Multiply-accumulate tally of conv/linear forwards on this thread.
class MacCounter {
public:
    MacCounter() : start_(detail::mac_counter()) {}
    int64_t count() const { return detail::mac_counter() - start_; }

private:
    int64_t start_;
};

struct ConvParams {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
    int groups = 1;
};

inline int conv_out_size(int in, int k, const ConvParams& p) {
    return (in + 2 * p.pad - p.dilation * (k - 1) - 1) / p.stride + 1;
}

namespace detail {

struct ConvGeom {
    int n, cin, h, w, cout, kh, kw, ho, wo, cin_g, cout_g;
    ConvParams p;
};

inline ConvGeom conv_geometry(const Tensor& x, const Tensor& w, const ConvParams& p) {
    require_rank4(x, "conv2d");
    if (w.rank() != 4) throw std::invalid_argument("conv2d: weight must be rank 4");
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, 0, 0, p};
    if (p.groups <= 0 || g.cin % p.groups || g.cout % p.groups)
        throw std::invalid_argument("conv2d: channels not divisible by groups");
    g.cin_g = g.cin / p.groups;
    g.cout_g = g.cout / p.groups;
    if (w.dim(1) != g.cin_g)
        throw std::invalid_argument("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                                    shape_str(x.shape()));
    g.ho = conv_out_size(g.h, g.kh, p);
    g.wo = conv_out_size(g.w, g.kw, p);
    if (g.ho <= 0 || g.wo <= 0) throw std::invalid_argument("conv2d: empty output for input " + shape_str(x.shape()));
    return g;
}

inline bool is_pointwise(const ConvGeom& g) {
    return g.kh == 1 && g.kw == 1 && g.p.stride == 1 && g.p.pad == 0 && g.p.groups == 1;
}

inline bool is_depthwise(const ConvGeom& g) { return g.p.groups == g.cin && g.cout == g.cin && g.p.groups > 1; }

inline void im2col(const float* x, const ConvGeom& g, int group, float* col) {
    const int L = g.ho * g.wo;
    for (int c = 0; c < g.cin_g; ++c) {
        const float* xc = x + static_cast<size_t>(group * g.cin_g + c) * g.h * g.w;
        for (int i = 0; i < g.kh; ++i)
            for (int j = 0; j < g.kw; ++j) {
                float* row = col + static_cast<size_t>((c * g.kh + i) * g.kw + j) * L;
                for (int oh = 0; oh < g.ho; ++oh) {
                    int ih = oh * g.p.stride - g.p.pad + i * g.p.dilation;
                    float* dst = row + oh * g.wo;
                    if (ih < 0 || ih >= g.h) {
                        std::fill(dst, dst + g.wo, 0.f);
                        continue;
                    }
                    for (int ow = 0; ow < g.wo; ++ow) {
                        int iw = ow * g.p.stride - g.p.pad + j * g.p.dilation;
                        dst[ow] = (iw >= 0 && iw < g.w) ? xc[ih * g.w + iw] : 0.f;
                    }
                }
            }
    }
}

inline void col2im(const float* col, const ConvGeom& g, int group, float* dx) {
    const int L = g.ho * g.wo;
    for (int c = 0; c < g.cin_g; ++c) {
        float* dxc = dx + static_cast<size_t>(group * g.cin_g + c) * g.h * g.w;
        for (int i = 0; i < g.kh; ++i)
            for (int j = 0; j < g.kw; ++j) {
                const float* row = col + static_cast<size_t>((c * g.kh + i) * g.kw + j) * L;
                for (int oh = 0; oh < g.ho; ++oh) {
                    int ih = oh * g.p.stride - g.p.pad + i * g.p.dilation;
                    if (ih < 0 || ih >= g.h) continue;
                    for (int ow = 0; ow < g.wo; ++ow) {
                        int iw = ow * g.p.stride - g.p.pad + j * g.p.dilation;
                        if (iw >= 0 && iw < g.w) dxc[ih * g.w + iw] += row[oh * g.wo + ow];
                    }
                }
            }
    }
}

inline void depthwise_forward(const float* x, const float* w, float* y, const ConvGeom& g) {
    for (int c = 0; c < g.cin; ++c) {
        const float* xc = x + static_cast<size_t>(c) * g.h * g.w;
        const float* wc = w + static_cast<size_t>(c) * g.kh * g.kw;
        float* yc = y + static_cast<size_t>(c) * g.ho * g.wo;
        for (int oh = 0; oh < g.ho; ++oh)
            for (int ow = 0; ow < g.wo; ++ow) {
                float acc = 0.f;
                for (int i = 0; i < g.kh; ++i) {
                    int ih = oh * g.p.stride - g.p.pad + i * g.p.dilation;
                    if (ih < 0 || ih >= g.h) continue;
                    for (int j = 0; j < g.kw; ++j) {
                        int iw = ow * g.p.stride - g.p.pad + j * g.p.dilation;
                        if (iw >= 0 && iw < g.w) acc += wc[i * g.kw + j] * xc[ih * g.w + iw];
                    }
                }
                yc[oh * g.wo + ow] = acc;
            }
    }
}

inline void depthwise_backward(const float* x, const float* w, const float* dy, float* dx, float* dw,
                               const ConvGeom& g) {
    for (int c = 0; c < g.cin; ++c) {
        const float* xc = x + static_cast<size_t>(c) * g.h * g.w;
        const float* wc = w + static_cast<size_t>(c) * g.kh * g.kw;
        const float* dyc = dy + static_cast<size_t>(c) * g.ho * g.wo;
        float* dxc = dx ? dx + static_cast<size_t>(c) * g.h * g.w : nullptr;
        float* dwc = dw ? dw + static_cast<size_t>(c) * g.kh * g.kw : nullptr;
        for (int oh = 0; oh < g.ho; ++oh)
            for (int ow = 0; ow < g.wo; ++ow) {
                float d = dyc[oh * g.wo + ow];
                if (d == 0.f) continue;
                for (int i = 0; i < g.kh; ++i) {
                    int ih = oh * g.p.stride - g.p.pad + i * g.p.dilation;
                    if (ih < 0 || ih >= g.h) continue;
                    for (int j = 0; j < g.kw; ++j) {
                        int iw = ow * g.p.stride - g.p.pad + j * g.p.dilation;
                        if (iw < 0 || iw >= g.w) continue;
                        if (dxc) dxc[ih * g.w + iw] += d * wc[i * g.kw + j];
                        if (dwc) dwc[i * g.kw + j] += d * xc[ih * g.w + iw];
                    }
                }
            }
    }
}

} // namespace detail

/// 2-D cross-correlation with optional bias; weight layout (Cout, Cin/groups, kh, kw).
inline Var conv2d(const Var& x, const Var& weight, const std::optional<Var>& bias, ConvParams p) {
    using namespace detail;
    const ConvGeom g = conv_geometry(x.value(), weight.value(), p);
    const size_t in_stride = static_cast<size_t>(g.cin) * g.h * g.w;
    const size_t out_stride = static_cast<size_t>(g.cout) * g.ho * g.wo;
    const int L = g.ho * g.wo;
    const int K = g.cin_g * g.kh * g.kw;
    Tensor y({g.n, g.cout, g.ho, g.wo});
    const float* xd = x.value().data();
    const float* wd = weight.value().data();
    mac_counter() += static_cast<int64_t>(g.n) * g.cout * L * K;

    if (is_depthwise(g)) {
        for (int n = 0; n < g.n; ++n) depthwise_forward(xd + n * in_stride, wd, y.data() + n * out_stride, g);
    } else if (is_pointwise(g)) {
        CMapMat W(wd, g.cout, g.cin);
        for (int n = 0; n < g.n; ++n) {
            MapMat Y(y.data() + n * out_stride, g.cout, L);
            Y.noalias() = W * CMapMat(xd + n * in_stride, g.cin, L);
        }
    } else {
        std::vector<float> col(static_cast<size_t>(K) * L);
        for (int n = 0; n < g.n; ++n)
            for (int gr = 0; gr < p.groups; ++gr) {
                im2col(xd + n * in_stride, g, gr, col.data());
                CMapMat W(wd + static_cast<size_t>(gr) * g.cout_g * K, g.cout_g, K);
                MapMat Y(y.data() + n * out_stride + static_cast<size_t>(gr) * g.cout_g * L, g.cout_g, L);
                Y.noalias() = W * CMapMat(col.data(), K, L);
            }
    }
    if (bias) {
        const float* b = bias->value().data();
        for (int n = 0; n < g.n; ++n)
            for (int c = 0; c < g.cout; ++c) {
                float* yc = y.data() + n * out_stride + static_cast<size_t>(c) * L;
                for (int i = 0; i < L; ++i) yc[i] += b[c];
            }
    }

    std::vector<Var> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return make_result(std::move(y), "conv2d", inputs, [g, in_stride, out_stride, L, K](Node& self) {
        Node& xn = *self.parents[0];
        Node& wn = *self.parents[1];
        const float* dy = self.grad.data();
        const float* xd = xn.value.data();
        const float* wd = wn.value.data();
        float* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        float* dw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            float* db = self.parents[2]->grad_buffer().data();
            for (int n = 0; n < g.n; ++n)
                for (int c = 0; c < g.cout; ++c) {
                    const float* dyc = dy + n * out_stride + static_cast<size_t>(c) * L;
                    double s = 0;
                    for (int i = 0; i < L; ++i) s += dyc[i];
                    db[c] += static_cast<float>(s);
                }
        }
        if (is_depthwise(g)) {
            for (int n = 0; n < g.n; ++n)
                depthwise_backward(xd + n * in_stride, wd, dy + n * out_stride, dx ? dx + n * in_stride : nullptr, dw, g);
        } else if (is_pointwise(g)) {
            CMapMat W(wd, g.cout, g.cin);
            for (int n = 0; n < g.n; ++n) {
                CMapMat DY(dy + n * out_stride, g.cout, L);
                if (dw) MapMat(dw, g.cout, g.cin).noalias() += DY * CMapMat(xd + n * in_stride, g.cin, L).transpose();
                if (dx) MapMat(dx + n * in_stride, g.cin, L).noalias() += W.transpose() * DY;
            }
        } else {
            std::vector<float> col(static_cast<size_t>(K) * L);
            RowMat dcol(K, L);
            for (int n = 0; n < g.n; ++n)
                for (int gr = 0; gr < g.p.groups; ++gr) {
                    CMapMat DY(dy + n * out_stride + static_cast<size_t>(gr) * g.cout_g * L, g.cout_g, L);
                    CMapMat W(wd + static_cast<size_t>(gr) * g.cout_g * K, g.cout_g, K);
                    if (dw) {
                        im2col(xd + n * in_stride, g, gr, col.data());
                        MapMat(dw + static_cast<size_t>(gr) * g.cout_g * K, g.cout_g, K).noalias() +=
                            DY * CMapMat(col.data(), K, L).transpose();
                    }
                    if (dx) {
                        dcol.noalias() = W.transpose() * DY;
                        col2im(dcol.data(), g, gr, dx + n * in_stride);
                    }
                }
        }
    });
}

/// Running statistics of a batch-norm layer.
struct BnBuffers {
    Tensor running_mean;
    Tensor running_var;
    int64_t num_batches_tracked = 0;

    explicit BnBuffers(int channels = 0)
        : running_mean({channels}, 0.f), running_var({channels}, 1.f) {}
    void reset() {
        running_mean.fill(0.f);
        running_var.fill(1.f);
        num_batches_tracked = 0;
    }
};

struct BnOptions {
    bool training = true;
    // nullopt: cumulative moving average (used for statistics recalibration)
    std::optional<float> momentum = 0.1f;
    float eps = 1e-5f;
};

inline Var batch_norm(const Var& x, const std::optional<Var>& gamma, const std::optional<Var>& beta,
                      BnBuffers* buffers, const BnOptions& opt) {
    detail::require_rank4(x.value(), "batch_norm");
    const int N = x.value().dim(0), C = x.value().dim(1);
    const int HW = x.value().dim(2) * x.value().dim(3);
    const size_t M = static_cast<size_t>(N) * HW;
    Tensor y(x.value().shape());
    Tensor xhat(x.value().shape());
    std::vector<float> inv_std(static_cast<size_t>(C));
    const float* xd = x.value().data();
    const bool use_batch = opt.training || buffers == nullptr;

    for (int c = 0; c < C; ++c) {
        double mean, var;
        if (use_batch) {
            double s = 0, s2 = 0;
            for (int n = 0; n < N; ++n) {
                const float* p = xd + (static_cast<size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) s += p[i];
            }
            mean = s / static_cast<double>(M);
            for (int n = 0; n < N; ++n) {
                const float* p = xd + (static_cast<size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) s2 += (p[i] - mean) * (p[i] - mean);
            }
            var = s2 / static_cast<double>(M);
            if (opt.training && buffers) {
                double unbiased = M > 1 ? s2 / static_cast<double>(M - 1) : var;
                double f = opt.momentum ? *opt.momentum : 1.0 / static_cast<double>(buffers->num_batches_tracked + 1);
                buffers->running_mean[c] = static_cast<float>((1 - f) * buffers->running_mean[c] + f * mean);
                buffers->running_var[c] = static_cast<float>((1 - f) * buffers->running_var[c] + f * unbiased);
            }
        } else {
            mean = buffers->running_mean[c];
            var = buffers->running_var[c];
        }
        float is = static_cast<float>(1.0 / std::sqrt(var + opt.eps));
        inv_std[c] = is;
        float g = gamma ? gamma->value()[c] : 1.f;
        float b = beta ? beta->value()[c] : 0.f;
        float m = static_cast<float>(mean);
        for (int n = 0; n < N; ++n) {
            size_t off = (static_cast<size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) {
                float h = (xd[off + i] - m) * is;
                xhat[off + i] = h;
                y[off + i] = h * g + b;
            }
        }
    }
    if (opt.training && buffers) ++buffers->num_batches_tracked;

    std::vector<Var> inputs{x};
    const bool has_gamma = gamma.has_value(), has_beta = beta.has_value();
    if (gamma) inputs.push_back(*gamma);
    if (beta) inputs.push_back(*beta);
    return make_result(std::move(y), "batch_norm", inputs,
                       [xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, HW, M, use_batch, has_gamma,
                        has_beta](Node& self) {
                           Node& xn = *self.parents[0];
                           Node* gn = has_gamma ? self.parents[1].get() : nullptr;
                           Node* bn = has_beta ? self.parents[has_gamma ? 2 : 1].get() : nullptr;
                           const float* dy = self.grad.data();
                           float* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
                           for (int c = 0; c < C; ++c) {
                               double sdy = 0, sdyx = 0;
                               for (int n = 0; n < N; ++n) {
                                   size_t off = (static_cast<size_t>(n) * C + c) * HW;
                                   for (int i = 0; i < HW; ++i) {
                                       sdy += dy[off + i];
                                       sdyx += static_cast<double>(dy[off + i]) * xhat[off + i];
                                   }
                               }
                               if (gn && gn->requires_grad) gn->grad_buffer()[c] += static_cast<float>(sdyx);
                               if (bn && bn->requires_grad) bn->grad_buffer()[c] += static_cast<float>(sdy);
                               if (!dx) continue;
                               float g = gn ? gn->value[c] : 1.f;
                               float k = g * inv_std[c];
                               for (int n = 0; n < N; ++n) {
                                   size_t off = (static_cast<size_t>(n) * C + c) * HW;
                                   if (use_batch) {
                                       float mdy = static_cast<float>(sdy / static_cast<double>(M));
                                       float mdyx = static_cast<float>(sdyx / static_cast<double>(M));
                                       for (int i = 0; i < HW; ++i)
                                           dx[off + i] += k * (dy[off + i] - mdy - xhat[off + i] * mdyx);
                                   } else {
                                       for (int i = 0; i < HW; ++i) dx[off + i] += k * dy[off + i];
                                   }
                               }
                           }
                       });
}

inline Var relu(const Var& x) {
    Tensor y(x.value().shape());
    const float* xd = x.value().data();
    for (size_t i = 0; i < y.numel(); ++i) y[i] = xd[i] > 0.f ? xd[i] : 0.f;
    return make_result(std::move(y), "relu", {x}, [](Node& self) {
        Node& xn = *self.parents[0];
        float* dx = xn.grad_buffer().data();
        for (size_t i = 0; i < self.grad.numel(); ++i)
            if (self.value[i] > 0.f) dx[i] += self.grad[i];
    });
}

inline Var add(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor y = a.value();
    y += b.value();
    return make_result(std::move(y), "add", {a, b}, [](Node& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) p->accumulate(self.grad);
    });
}

inline Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("add_n: no inputs");
    Tensor y = xs[0].value();
    for (size_t i = 1; i < xs.size(); ++i) {
        if (!xs[i].value().same_shape(y))
            throw std::invalid_argument("add_n: spatial/channel mismatch " + shape_str(xs[i].shape()) + " vs " +
                                        shape_str(y.shape()));
        y += xs[i].value();
    }
    return make_result(std::move(y), "add_n", xs, [](Node& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) p->accumulate(self.grad);
    });
}

inline Var scale(const Var& x, float a) {
    Tensor y = x.value();
    y.scale(a);
    return make_result(std::move(y), "scale", {x}, [a](Node& self) {
        Tensor g = self.grad;
        self.parents[0]->accumulate(g.scale(a));
    });
}

/// Row-wise softmax of a (rows, K) matrix.
inline Var softmax_rows(const Var& logits) {
    const Tensor& z = logits.value();
    if (z.rank() != 2) throw std::invalid_argument("softmax_rows: expected a matrix");
    const int R = z.dim(0), K = z.dim(1);
    Tensor y(z.shape());
    for (int r = 0; r < R; ++r) {
        float m = -std::numeric_limits<float>::infinity();
        for (int k = 0; k < K; ++k) m = std::max(m, z[r * K + k]);
        double s = 0;
        for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(z[r * K + k]) - m);
        for (int k = 0; k < K; ++k) y[r * K + k] = static_cast<float>(std::exp(static_cast<double>(z[r * K + k]) - m) / s);
    }
    return make_result(std::move(y), "softmax", {logits}, [R, K](Node& self) {
        Tensor& dz = self.parents[0]->grad_buffer();
        for (int r = 0; r < R; ++r) {
            double dot = 0;
            for (int k = 0; k < K; ++k) dot += static_cast<double>(self.grad[r * K + k]) * self.value[r * K + k];
            for (int k = 0; k < K; ++k)
                dz[r * K + k] += self.value[r * K + k] * static_cast<float>(self.grad[r * K + k] - dot);
        }
    });
}

/// sum_k weights[row, k] * xs[k]; undefined entries of xs contribute nothing.
inline Var weighted_sum(const std::vector<Var>& xs, const Var& weights, int row) {
    const Tensor& w = weights.value();
    const int K = w.dim(1);
    if (static_cast<int>(xs.size()) != K)
        throw std::invalid_argument("weighted_sum: " + std::to_string(xs.size()) + " inputs for " + std::to_string(K) +
                                    " weights");
    const Var* first = nullptr;
    for (const auto& x : xs)
        if (x.defined()) {
            first = &x;
            break;
        }
    if (!first) throw std::invalid_argument("weighted_sum: all inputs empty");
    Tensor y(first->value().shape());
    std::vector<Var> inputs{weights};
    std::vector<int> slots;
    for (int k = 0; k < K; ++k) {
        if (!xs[k].defined()) continue;
        if (!xs[k].value().same_shape(y))
            throw std::invalid_argument("weighted_sum: operand " + std::to_string(k) + " has shape " +
                                        shape_str(xs[k].shape()) + ", expected " + shape_str(y.shape()));
        y.axpy(w[row * K + k], xs[k].value());
        inputs.push_back(xs[k]);
        slots.push_back(k);
    }
    return make_result(std::move(y), "weighted_sum", inputs, [row, K, slots](Node& self) {
        Node& wn = *self.parents[0];
        for (size_t s = 0; s < slots.size(); ++s) {
            Node& xn = *self.parents[s + 1];
            const int k = slots[s];
            if (wn.requires_grad) {
                double dot = 0;
                for (size_t i = 0; i < self.grad.numel(); ++i) dot += static_cast<double>(self.grad[i]) * xn.value[i];
                wn.grad_buffer()[row * K + k] += static_cast<float>(dot);
            }
            if (xn.requires_grad) {
                Tensor& dx = xn.grad_buffer();
                dx.axpy(wn.value[row * K + k], self.grad);
            }
        }
    });
}

enum class PoolKind { max, avg };

/// Pooling with implicit padding; average pooling divides by the in-bounds count.
inline Var pool2d(const Var& x, PoolKind kind, int k, int stride, int pad) {
    detail::require_rank4(x.value(), "pool2d");
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    Tensor y({N, C, Ho, Wo});
    std::vector<int> argmax(kind == PoolKind::max ? y.numel() : 0);
    const float* xd = x.value().data();
    size_t o = 0;
    for (int nc = 0; nc < N * C; ++nc) {
        const float* xp = xd + static_cast<size_t>(nc) * H * W;
        for (int oh = 0; oh < Ho; ++oh)
            for (int ow = 0; ow < Wo; ++ow, ++o) {
                int h0 = std::max(oh * stride - pad, 0), h1 = std::min(oh * stride - pad + k, H);
                int w0 = std::max(ow * stride - pad, 0), w1 = std::min(ow * stride - pad + k, W);
                if (kind == PoolKind::max) {
                    float best = -std::numeric_limits<float>::infinity();
                    int bi = h0 * W + w0;
                    for (int h = h0; h < h1; ++h)
                        for (int w = w0; w < w1; ++w)
                            if (xp[h * W + w] > best) {
                                best = xp[h * W + w];
                                bi = h * W + w;
                            }
                    y[o] = best;
                    argmax[o] = bi;
                } else {
                    double s = 0;
                    for (int h = h0; h < h1; ++h)
                        for (int w = w0; w < w1; ++w) s += xp[h * W + w];
                    y[o] = static_cast<float>(s / ((h1 - h0) * (w1 - w0)));
                }
            }
    }
    return make_result(std::move(y), "pool2d",
                       {x}, [kind, k, stride, pad, N, C, H, W, Ho, Wo, argmax = std::move(argmax)](Node& self) {
                           float* dx = self.parents[0]->grad_buffer().data();
                           size_t o = 0;
                           for (int nc = 0; nc < N * C; ++nc) {
                               float* dxp = dx + static_cast<size_t>(nc) * H * W;
                               for (int oh = 0; oh < Ho; ++oh)
                                   for (int ow = 0; ow < Wo; ++ow, ++o) {
                                       float d = self.grad[o];
                                       if (kind == PoolKind::max) {
                                           dxp[argmax[o]] += d;
                                           continue;
                                       }
                                       int h0 = std::max(oh * stride - pad, 0), h1 = std::min(oh * stride - pad + k, H);
                                       int w0 = std::max(ow * stride - pad, 0), w1 = std::min(ow * stride - pad + k, W);
                                       float share = d / static_cast<float>((h1 - h0) * (w1 - w0));
                                       for (int h = h0; h < h1; ++h)
                                           for (int w = w0; w < w1; ++w) dxp[h * W + w] += share;
                                   }
                           }
                       });
}

inline Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const int N = xs[0].value().dim(0), H = xs[0].value().dim(2), W = xs[0].value().dim(3);
    std::vector<int> chans;
    int C = 0;
    for (const auto& x : xs) {
        detail::require_rank4(x.value(), "concat_channels");
        if (x.value().dim(0) != N || x.value().dim(2) != H || x.value().dim(3) != W)
            throw std::invalid_argument("concat_channels: spatial mismatch " + shape_str(x.shape()) + " vs " +
                                        shape_str(xs[0].shape()));
        chans.push_back(x.value().dim(1));
        C += chans.back();
    }
    const size_t HW = static_cast<size_t>(H) * W;
    Tensor y({N, C, H, W});
    for (int n = 0; n < N; ++n) {
        size_t off = 0;
        for (size_t i = 0; i < xs.size(); ++i) {
            const float* src = xs[i].value().data() + static_cast<size_t>(n) * chans[i] * HW;
            std::copy_n(src, chans[i] * HW, y.data() + (static_cast<size_t>(n) * C) * HW + off);
            off += chans[i] * HW;
        }
    }
    return make_result(std::move(y), "concat", xs, [chans, N, C, HW](Node& self) {
        for (int n = 0; n < N; ++n) {
            size_t off = 0;
            for (size_t i = 0; i < chans.size(); ++i) {
                Node& p = *self.parents[i];
                if (p.requires_grad) {
                    float* dst = p.grad_buffer().data() + static_cast<size_t>(n) * chans[i] * HW;
                    const float* src = self.grad.data() + static_cast<size_t>(n) * C * HW + off;
                    for (size_t j = 0; j < chans[i] * HW; ++j) dst[j] += src[j];
                }
                off += chans[i] * HW;
            }
        }
    });
}

inline Var upsample_nearest(const Var& x, int factor) {
    detail::require_rank4(x.value(), "upsample_nearest");
    if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
    if (factor == 1) return x;
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    const int Ho = H * factor, Wo = W * factor;
    Tensor y({N, C, Ho, Wo});
    const float* xd = x.value().data();
    for (int nc = 0; nc < N * C; ++nc)
        for (int h = 0; h < Ho; ++h)
            for (int w = 0; w < Wo; ++w)
                y[(static_cast<size_t>(nc) * Ho + h) * Wo + w] = xd[(static_cast<size_t>(nc) * H + h / factor) * W + w / factor];
    return make_result(std::move(y), "upsample", {x}, [N, C, H, W, Ho, Wo, factor](Node& self) {
        float* dx = self.parents[0]->grad_buffer().data();
        for (int nc = 0; nc < N * C; ++nc)
            for (int h = 0; h < Ho; ++h)
                for (int w = 0; w < Wo; ++w)
                    dx[(static_cast<size_t>(nc) * H + h / factor) * W + w / factor] +=
                        self.grad[(static_cast<size_t>(nc) * Ho + h) * Wo + w];
    });
}

/// x[:, :, 1:, 1:]
inline Var crop_shift(const Var& x) {
    detail::require_rank4(x.value(), "crop_shift");
    const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
    Tensor y({N, C, H - 1, W - 1});
    for (int nc = 0; nc < N * C; ++nc)
        for (int h = 1; h < H; ++h)
            for (int w = 1; w < W; ++w)
                y[(static_cast<size_t>(nc) * (H - 1) + h - 1) * (W - 1) + w - 1] =
                    x.value()[(static_cast<size_t>(nc) * H + h) * W + w];
    return make_result(std::move(y), "crop_shift", {x}, [N, C, H, W](Node& self) {
        float* dx = self.parents[0]->grad_buffer().data();
        for (int nc = 0; nc < N * C; ++nc)
            for (int h = 1; h < H; ++h)
                for (int w = 1; w < W; ++w)
                    dx[(static_cast<size_t>(nc) * H + h) * W + w] +=
                        self.grad[(static_cast<size_t>(nc) * (H - 1) + h - 1) * (W - 1) + w - 1];
    });
}

/// (N, C, H, W) -> (N, C)
inline Var global_avg_pool(const Var& x) {
    detail::require_rank4(x.value(), "global_avg_pool");
    const int N = x.value().dim(0), C = x.value().dim(1);
    const int HW = x.value().dim(2) * x.value().dim(3);
    Tensor y({N, C});
    for (int nc = 0; nc < N * C; ++nc) {
        double s = 0;
        for (int i = 0; i < HW; ++i) s += x.value()[static_cast<size_t>(nc) * HW + i];
        y[nc] = static_cast<float>(s / HW);
    }
    return make_result(std::move(y), "global_avg_pool", {x}, [N, C, HW](Node& self) {
        float* dx = self.parents[0]->grad_buffer().data();
        for (int nc = 0; nc < N * C; ++nc) {
            float d = self.grad[nc] / static_cast<float>(HW);
            for (int i = 0; i < HW; ++i) dx[static_cast<size_t>(nc) * HW + i] += d;
        }
    });
}

/// (N, F) x (O, F)^T + b -> (N, O)
inline Var linear(const Var& x, const Var& weight, const std::optional<Var>& bias) {
    using namespace detail;
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("linear: expected (N, F) input, got " + shape_str(xv.shape()));
    const int N = xv.dim(0), F = xv.dim(1), O = weight.value().dim(0);
    if (weight.value().dim(1) != F) throw std::invalid_argument("linear: feature mismatch");
    Tensor y({N, O});
    MapMat(y.data(), N, O).noalias() = CMapMat(xv.data(), N, F) * CMapMat(weight.value().data(), O, F).transpose();
    if (bias)
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) y[n * O + o] += bias->value()[o];
    mac_counter() += static_cast<int64_t>(N) * O * F;
    std::vector<Var> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return make_result(std::move(y), "linear", inputs, [N, F, O](Node& self) {
        Node& xn = *self.parents[0];
        Node& wn = *self.parents[1];
        CMapMat DY(self.grad.data(), N, O);
        if (xn.requires_grad) MapMat(xn.grad_buffer().data(), N, F).noalias() += DY * CMapMat(wn.value.data(), O, F);
        if (wn.requires_grad) MapMat(wn.grad_buffer().data(), O, F).noalias() += DY.transpose() * CMapMat(xn.value.data(), N, F);
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            Tensor& db = self.parents[2]->grad_buffer();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) db[o] += self.grad[n * O + o];
        }
    });
}

/// Mean softmax cross-entropy over the batch.
inline Var cross_entropy(const Var& logits, std::span<const int> labels) {
    const Tensor& z = logits.value();
    const int N = z.dim(0), K = z.dim(1);
    if (static_cast<int>(labels.size()) != N) throw std::invalid_argument("cross_entropy: label count mismatch");
    Tensor prob(z.shape());
    double loss = 0;
    for (int n = 0; n < N; ++n) {
        if (labels[n] < 0 || labels[n] >= K) throw std::invalid_argument("cross_entropy: label out of range");
        float m = -std::numeric_limits<float>::infinity();
        for (int k = 0; k < K; ++k) m = std::max(m, z[n * K + k]);
        double s = 0;
        for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(z[n * K + k]) - m);
        for (int k = 0; k < K; ++k) prob[n * K + k] = static_cast<float>(std::exp(static_cast<double>(z[n * K + k]) - m) / s);
        loss += -(static_cast<double>(z[n * K + labels[n]]) - m - std::log(s));
    }
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result(Tensor({1}, {static_cast<float>(loss / N)}), "cross_entropy", {logits},
                       [prob = std::move(prob), lab = std::move(lab), N, K](Node& self) {
                           Tensor& dz = self.parents[0]->grad_buffer();
                           float g = self.grad[0] / static_cast<float>(N);
                           for (int n = 0; n < N; ++n)
                               for (int k = 0; k < K; ++k)
                                   dz[n * K + k] += g * (prob[n * K + k] - (k == lab[n] ? 1.f : 0.f));
                       });
}

/// Replaces masked pixels of a data batch with a per-channel embedding.
/// pixel_mask holds N*H*W bytes, nonzero = masked.
inline Var mask_fill(const Tensor& images, std::span<const uint8_t> pixel_mask, const Var& embedding) {
    detail::require_rank4(images, "mask_fill");
    const int N = images.dim(0), C = images.dim(1);
    const int HW = images.dim(2) * images.dim(3);
    if (pixel_mask.size() != static_cast<size_t>(N) * HW)
        throw std::invalid_argument("mask_fill: mask has " + std::to_string(pixel_mask.size()) + " entries, batch needs " +
                                    std::to_string(static_cast<size_t>(N) * HW));
    if (embedding.value().numel() != static_cast<size_t>(C))
        throw std::invalid_argument("mask_fill: embedding width differs from channel count");
    Tensor y = images;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < HW; ++i)
                if (pixel_mask[static_cast<size_t>(n) * HW + i])
                    y[(static_cast<size_t>(n) * C + c) * HW + i] = embedding.value()[c];
    std::vector<uint8_t> m(pixel_mask.begin(), pixel_mask.end());
    return make_result(std::move(y), "mask_fill", {embedding}, [m = std::move(m), N, C, HW](Node& self) {
        Tensor& de = self.parents[0]->grad_buffer();
        for (int c = 0; c < C; ++c) {
            double s = 0;
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < HW; ++i)
                    if (m[static_cast<size_t>(n) * HW + i]) s += self.grad[(static_cast<size_t>(n) * C + c) * HW + i];
            de[c] += static_cast<float>(s);
        }
    });
}

/// Mean absolute error over masked pixel-channel elements. Returns the loss and the element count.
inline std::pair<Var, size_t> masked_l1(const Var& pred, const Tensor& target, std::span<const uint8_t> pixel_mask) {
    const Tensor& p = pred.value();
    detail::require_rank4(p, "masked_l1");
    if (!p.same_shape(target))
        throw std::invalid_argument("masked_l1: prediction " + shape_str(p.shape()) + " vs target " +
                                    shape_str(target.shape()));
    const int N = p.dim(0), C = p.dim(1);
    const int HW = p.dim(2) * p.dim(3);
    if (pixel_mask.size() != static_cast<size_t>(N) * HW) throw std::invalid_argument("masked_l1: mask shape mismatch");
    size_t count = 0;
    double s = 0;
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < HW; ++i) {
            if (!pixel_mask[static_cast<size_t>(n) * HW + i]) continue;
            for (int c = 0; c < C; ++c) {
                size_t o = (static_cast<size_t>(n) * C + c) * HW + i;
                s += std::abs(static_cast<double>(p[o]) - target[o]);
            }
            count += static_cast<size_t>(C);
        }
    if (count == 0) throw std::invalid_argument("masked_l1: no masked elements, mean is undefined");
    std::vector<uint8_t> m(pixel_mask.begin(), pixel_mask.end());
    Var loss = make_result(Tensor({1}, {static_cast<float>(s / static_cast<double>(count))}), "masked_l1", {pred},
                           [target, m = std::move(m), N, C, HW, count](Node& self) {
                               Node& pn = *self.parents[0];
                               Tensor& dp = pn.grad_buffer();
                               float g = self.grad[0] / static_cast<float>(count);
                               for (int n = 0; n < N; ++n)
                                   for (int i = 0; i < HW; ++i) {
                                       if (!m[static_cast<size_t>(n) * HW + i]) continue;
                                       for (int c = 0; c < C; ++c) {
                                           size_t o = (static_cast<size_t>(n) * C + c) * HW + i;
                                           float d = pn.value[o] - target[o];
                                           dp[o] += d > 0.f ? g : (d < 0.f ? -g : 0.f);
                                       }
                                   }
                           });
    return {loss, count};
}

/// Scales each sample by keep[n] / keep_prob.
inline Var drop_path(const Var& x, std::span<const uint8_t> keep, float keep_prob) {
    const int N = x.value().dim(0);
    const size_t stride = x.value().numel() / static_cast<size_t>(N);
    std::vector<float> f(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) f[n] = keep[n] ? 1.f / keep_prob : 0.f;
    Tensor y = x.value();
    for (int n = 0; n < N; ++n)
        for (size_t i = 0; i < stride; ++i) y[n * stride + i] *= f[n];
    return make_result(std::move(y), "drop_path", {x}, [f, stride, N](Node& self) {
        Tensor& dx = self.parents[0]->grad_buffer();
        for (int n = 0; n < N; ++n)
            for (size_t i = 0; i < stride; ++i) dx[n * stride + i] += f[n] * self.grad[n * stride + i];
    });
}

/// Sum of all elements as a scalar.
inline Var sum_all(const Var& x) {
    return make_result(Tensor({1}, {static_cast<float>(x.value().sum())}), "sum_all", {x}, [](Node& self) {
        Tensor& dx = self.parents[0]->grad_buffer();
        for (size_t i = 0; i < dx.numel(); ++i) dx[i] += self.grad[0];
    });
}

/// Elementwise product with a constant tensor.
inline Var mul_const(const Var& x, const Tensor& c) {
    if (!x.value().same_shape(c)) throw std::invalid_argument("mul_const: shape mismatch");
    Tensor y = x.value();
    for (size_t i = 0; i < y.numel(); ++i) y[i] *= c[i];
    return make_result(std::move(y), "mul_const", {x}, [c](Node& self) {
        Tensor& dx = self.parents[0]->grad_buffer();
        for (size_t i = 0; i < dx.numel(); ++i) dx[i] += c[i] * self.grad[i];
    });
}

} // namespace maenas
