#include "radlads/tensor.hpp"

#include <cmath>
#include <cstring>

namespace radlads {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) {
        check(e >= 0, "negative extent in shape ", shape_str(s));
        n *= e;
    }
    return n;
}

Tensor Tensor::zeros(Shape shape, Dtype dtype) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.numel_ = shape_numel(t.shape_);
    t.dtype_ = dtype;
    if (dtype == Dtype::f32)
        t.f32_.assign(static_cast<size_t>(t.numel_), 0.0f);
    else
        t.f64_.assign(static_cast<size_t>(t.numel_), 0.0);
    return t;
}

Tensor Tensor::full(Shape shape, double value, Dtype dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    t.fill(value);
    return t;
}

Tensor Tensor::scalar(double value, Dtype dtype) { return full({}, value, dtype); }

Tensor Tensor::from(Shape shape, const std::vector<double>& values, Dtype dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    check(static_cast<int64_t>(values.size()) == t.numel_, "value count ", values.size(),
          " does not match shape ", shape_str(t.shape_));
    for (int64_t i = 0; i < t.numel_; ++i) t.set_at(i, values[static_cast<size_t>(i)]);
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, Dtype dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    for (int64_t i = 0; i < t.numel_; ++i) t.set_at(i, rng.normal(0.0, stddev));
    return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi, Dtype dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    for (int64_t i = 0; i < t.numel_; ++i) t.set_at(i, lo + (hi - lo) * rng.uniform());
    return t;
}

int64_t Tensor::dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    check(i >= 0 && i < r, "axis ", i, " out of range for shape ", shape_str(shape_));
    return shape_[static_cast<size_t>(i)];
}

double Tensor::item_at(int64_t i) const {
    return dtype_ == Dtype::f32 ? static_cast<double>(f32_[static_cast<size_t>(i)])
                                : f64_[static_cast<size_t>(i)];
}

void Tensor::set_at(int64_t i, double v) {
    if (dtype_ == Dtype::f32)
        f32_[static_cast<size_t>(i)] = static_cast<float>(v);
    else
        f64_[static_cast<size_t>(i)] = v;
}

double Tensor::item() const {
    check(numel_ == 1, "item() on tensor of shape ", shape_str(shape_));
    return item_at(0);
}

Tensor Tensor::astype(Dtype target) const {
    if (target == dtype_) return clone();
    Tensor out = zeros(shape_, target);
    for (int64_t i = 0; i < numel_; ++i) out.set_at(i, item_at(i));
    return out;
}

Tensor Tensor::clone() const { return *this; }

Tensor Tensor::reshaped(Shape new_shape) const {
    check(shape_numel(new_shape) == numel_, "cannot reshape ", shape_str(shape_), " to ",
          shape_str(new_shape));
    Tensor out = *this;
    out.shape_ = std::move(new_shape);
    return out;
}

void Tensor::fill(double v) {
    for (int64_t i = 0; i < numel_; ++i) set_at(i, v);
}

bool Tensor::all_finite() const {
    bool ok = true;
    with_dtype(dtype_, [&]<class T>(T) {
        for (T x : data<T>())
            if (!std::isfinite(static_cast<double>(x))) {
                ok = false;
                break;
            }
    });
    return ok;
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (dtype_ != other.dtype_ || shape_ != other.shape_) return false;
    return std::memcmp(raw_data(), other.raw_data(), raw_size()) == 0;
}

double Tensor::max_abs_diff(const Tensor& other) const {
    check(numel_ == other.numel_, "max_abs_diff: size mismatch ", shape_str(shape_), " vs ",
          shape_str(other.shape_));
    double m = 0.0;
    for (int64_t i = 0; i < numel_; ++i) m = std::max(m, std::fabs(item_at(i) - other.item_at(i)));
    return m;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (int64_t i = 0; i < numel_; ++i) m = std::max(m, std::fabs(item_at(i)));
    return m;
}

const void* Tensor::raw_data() const {
    return dtype_ == Dtype::f32 ? static_cast<const void*>(f32_.data())
                                : static_cast<const void*>(f64_.data());
}

void* Tensor::raw_data() {
    return dtype_ == Dtype::f32 ? static_cast<void*>(f32_.data())
                                : static_cast<void*>(f64_.data());
}

}  // namespace radlads
