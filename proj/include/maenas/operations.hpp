#pragma once

#include <memory>
#include <string>

#include "maenas/nn.hpp"
#include "maenas/search_space.hpp"

namespace maenas {

// Candidate operations. All keep the channel count except FactorizedReduce and ReLUConvBN,
// which are also used for preprocessing.

class CandidateOp {
public:
    virtual ~CandidateOp() = default;
    virtual Var forward(const Var& x, const ForwardContext& ctx) const = 0;
    virtual OpKind kind() const = 0;
};

class ZeroOp final : public CandidateOp {
public:
    explicit ZeroOp(int stride) : stride_(stride) {}
    Var forward(const Var& x, const ForwardContext&) const override {
        const auto& s = x.shape();
        return Var::constant(Tensor({s[0], s[1], (s[2] + stride_ - 1) / stride_, (s[3] + stride_ - 1) / stride_}));
    }
    OpKind kind() const override { return OpKind::none; }

private:
    int stride_;
};

class IdentityOp final : public CandidateOp {
public:
    Var forward(const Var& x, const ForwardContext&) const override { return x; }
    OpKind kind() const override { return OpKind::skip_connect; }
};

class ReLUConvBN final : public CandidateOp {
public:
    ReLUConvBN(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride, int pad, bool affine,
               OpKind tag = OpKind::conv_3x3)
        : conv_(ps, name + ".conv", cin, cout, k, {stride, pad, 1, 1}), bn_(ps, name + ".bn", cout, affine), tag_(tag) {}
    Var forward(const Var& x, const ForwardContext& ctx) const override { return bn_(conv_(relu(x)), ctx); }
    OpKind kind() const override { return tag_; }

private:
    Conv2d conv_;
    BatchNorm2d bn_;
    OpKind tag_;
};

/// Stride-2 reduction by two offset 1x1 convolutions.
class FactorizedReduce final : public CandidateOp {
public:
    FactorizedReduce(ParamStore& ps, const std::string& name, int cin, int cout, bool affine)
        : conv1_(ps, name + ".conv1", cin, cout / 2, 1, {2, 0, 1, 1}),
          conv2_(ps, name + ".conv2", cin, cout - cout / 2, 1, {2, 0, 1, 1}),
          bn_(ps, name + ".bn", cout, affine) {}
    Var forward(const Var& x, const ForwardContext& ctx) const override {
        if (x.shape()[2] % 2 || x.shape()[3] % 2)
            throw std::invalid_argument("FactorizedReduce needs even spatial size, got " + shape_str(x.shape()));
        Var r = relu(x);
        return bn_(concat_channels({conv1_(r), conv2_(crop_shift(r))}), ctx);
    }
    OpKind kind() const override { return OpKind::skip_connect; }

private:
    Conv2d conv1_, conv2_;
    BatchNorm2d bn_;
};

class SepConv final : public CandidateOp {
public:
    SepConv(ParamStore& ps, const std::string& name, int c, int k, int stride, int pad, bool affine, OpKind tag)
        : dw1_(ps, name + ".dw1", c, c, k, {stride, pad, 1, c}), pw1_(ps, name + ".pw1", c, c, 1, {}),
          bn1_(ps, name + ".bn1", c, affine), dw2_(ps, name + ".dw2", c, c, k, {1, pad, 1, c}),
          pw2_(ps, name + ".pw2", c, c, 1, {}), bn2_(ps, name + ".bn2", c, affine), tag_(tag) {}
    Var forward(const Var& x, const ForwardContext& ctx) const override {
        Var y = bn1_(pw1_(dw1_(relu(x))), ctx);
        return bn2_(pw2_(dw2_(relu(y))), ctx);
    }
    OpKind kind() const override { return tag_; }

private:
    Conv2d dw1_, pw1_;
    BatchNorm2d bn1_;
    Conv2d dw2_, pw2_;
    BatchNorm2d bn2_;
    OpKind tag_;
};

class DilConv final : public CandidateOp {
public:
    DilConv(ParamStore& ps, const std::string& name, int c, int k, int stride, int pad, int dil, bool affine, OpKind tag)
        : dw_(ps, name + ".dw", c, c, k, {stride, pad, dil, c}), pw_(ps, name + ".pw", c, c, 1, {}),
          bn_(ps, name + ".bn", c, affine), tag_(tag) {}
    Var forward(const Var& x, const ForwardContext& ctx) const override { return bn_(pw_(dw_(relu(x))), ctx); }
    OpKind kind() const override { return tag_; }

private:
    Conv2d dw_, pw_;
    BatchNorm2d bn_;
    OpKind tag_;
};

class PoolOp final : public CandidateOp {
public:
    PoolOp(ParamStore& ps, const std::string& name, PoolKind pk, int c, int stride, bool with_bn, OpKind tag)
        : kind_(pk), stride_(stride), tag_(tag) {
        if (with_bn) bn_ = BatchNorm2d(ps, name + ".bn", c, false);
    }
    Var forward(const Var& x, const ForwardContext& ctx) const override {
        Var y = pool2d(x, kind_, 3, stride_, 1);
        return bn_ ? (*bn_)(y, ctx) : y;
    }
    OpKind kind() const override { return tag_; }

private:
    PoolKind kind_;
    int stride_;
    std::optional<BatchNorm2d> bn_;
    OpKind tag_;
};

struct OpOptions {
    bool affine = false;
    // DARTS search cells follow each pooling op with a non-affine BN
    bool pool_bn = true;
};

inline std::unique_ptr<CandidateOp> make_operation(OpKind kind, ParamStore& ps, const std::string& name, int c,
                                                   int stride, const OpOptions& opt) {
    switch (kind) {
    case OpKind::none: return std::make_unique<ZeroOp>(stride);
    case OpKind::skip_connect:
        if (stride == 1) return std::make_unique<IdentityOp>();
        return std::make_unique<FactorizedReduce>(ps, name, c, c, opt.affine);
    case OpKind::sep_conv_3x3: return std::make_unique<SepConv>(ps, name, c, 3, stride, 1, opt.affine, kind);
    case OpKind::sep_conv_5x5: return std::make_unique<SepConv>(ps, name, c, 5, stride, 2, opt.affine, kind);
    case OpKind::dil_conv_3x3: return std::make_unique<DilConv>(ps, name, c, 3, stride, 2, 2, opt.affine, kind);
    case OpKind::dil_conv_5x5: return std::make_unique<DilConv>(ps, name, c, 5, stride, 4, 2, opt.affine, kind);
    case OpKind::max_pool_3x3: return std::make_unique<PoolOp>(ps, name, PoolKind::max, c, stride, opt.pool_bn, kind);
    case OpKind::avg_pool_3x3: return std::make_unique<PoolOp>(ps, name, PoolKind::avg, c, stride, opt.pool_bn, kind);
    case OpKind::conv_1x1: return std::make_unique<ReLUConvBN>(ps, name, c, c, 1, stride, 0, opt.affine, kind);
    case OpKind::conv_3x3: return std::make_unique<ReLUConvBN>(ps, name, c, c, 3, stride, 1, opt.affine, kind);
    }
    throw std::logic_error("unhandled operation kind");
}

/// NAS-Bench-201 style residual block between stages: halves resolution, sets channel count.
class ResidualReduction {
public:
    ResidualReduction(ParamStore& ps, const std::string& name, int cin, int cout, bool affine)
        : a_(ps, name + ".a", cin, cout, 3, 2, 1, affine), b_(ps, name + ".b", cout, cout, 3, 1, 1, affine),
          shortcut_(ps, name + ".shortcut", cin, cout, 1, {}) {}

    Var forward(const Var& x, const ForwardContext& ctx) const {
        Var main = b_.forward(a_.forward(x, ctx), ctx);
        Var skip = shortcut_(pool2d(x, PoolKind::avg, 2, 2, 0));
        return add(main, skip);
    }

private:
    ReLUConvBN a_, b_;
    Conv2d shortcut_;
};

} // namespace maenas
