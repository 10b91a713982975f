#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace maenas {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ')';
    return os.str();
}

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

/// Dense row-major float tensor. Image batches use NCHW.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.f)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i < 0 ? rank() + i : i)); }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    std::vector<float>& storage() { return data_; }
    const std::vector<float>& storage() const { return data_; }

    float& operator[](size_t i) { return data_[i]; }
    float operator[](size_t i) const { return data_[i]; }

    float& at(int n, int c, int h, int w) {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    float at(int n, int c, int h, int w) const {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
    }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    double squared_norm() const {
        double s = 0;
        for (float v : data_) s += static_cast<double>(v) * v;
        return s;
    }

    Tensor& operator+=(const Tensor& o) {
        check_same(o, "+=");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Tensor& axpy(float a, const Tensor& o) {
        check_same(o, "axpy");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += a * o.data_[i];
        return *this;
    }

    Tensor& scale(float a) {
        for (float& v : data_) v *= a;
        return *this;
    }

    /// Selects samples [begin, end) along the leading dimension.
    Tensor slice_batch(int begin, int end) const {
        if (rank() == 0 || begin < 0 || end > shape_[0] || begin > end)
            throw std::out_of_range("batch slice out of range");
        size_t stride = numel() / static_cast<size_t>(shape_[0]);
        Shape s = shape_;
        s[0] = end - begin;
        return Tensor(std::move(s), std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                       data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
    }

    /// Gathers samples by index along the leading dimension.
    Tensor gather_batch(std::span<const int> idx) const {
        size_t stride = numel() / static_cast<size_t>(shape_[0]);
        Shape s = shape_;
        s[0] = static_cast<int>(idx.size());
        Tensor out(std::move(s));
        for (size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 0 || idx[i] >= shape_[0]) throw std::out_of_range("gather index out of range");
            std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(idx[i] * stride), stride,
                        out.data_.begin() + static_cast<std::ptrdiff_t>(i * stride));
        }
        return out;
    }

private:
    void check_same(const Tensor& o, const char* what) const {
        if (shape_ != o.shape_)
            throw std::invalid_argument(std::string("shape mismatch in ") + what + ": " + shape_str(shape_) +
                                        " vs " + shape_str(o.shape_));
    }

    Shape shape_;
    std::vector<float> data_;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0;
    for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

} // namespace maenas
