#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "radlads/common.hpp"
#include "radlads/rng.hpp"

namespace radlads {

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }
inline size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense row-major n-dimensional array holding float32 or float64 elements.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, Dtype dtype);
    static Tensor full(Shape shape, double value, Dtype dtype);
    static Tensor scalar(double value, Dtype dtype);
    // row-major data, converted to the requested dtype
    static Tensor from(Shape shape, const std::vector<double>& values, Dtype dtype);
    static Tensor randn(Shape shape, Rng& rng, double stddev, Dtype dtype);
    static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, Dtype dtype);

    const Shape& shape() const { return shape_; }
    Dtype dtype() const { return dtype_; }
    int64_t numel() const { return numel_; }
    bool defined() const { return numel_ > 0 || !shape_.empty(); }
    int64_t dim(int i) const;  // supports negative indices
    int rank() const { return static_cast<int>(shape_.size()); }

    template <class T>
    std::span<T> data();
    template <class T>
    std::span<const T> data() const;

    // dtype-agnostic element access (converting); fine for tests and scalar plumbing,
    // not for kernels
    double item_at(int64_t flat_index) const;
    void set_at(int64_t flat_index, double v);
    double item() const;  // numel()==1

    Tensor astype(Dtype target) const;
    Tensor clone() const;
    Tensor reshaped(Shape new_shape) const;

    void fill(double v);
    bool all_finite() const;
    bool bit_equal(const Tensor& other) const;
    double max_abs_diff(const Tensor& other) const;
    double max_abs() const;

    // raw little-endian bytes of the element buffer (host is little-endian x86/arm)
    const void* raw_data() const;
    void* raw_data();
    size_t raw_size() const { return static_cast<size_t>(numel_) * dtype_size(dtype_); }

private:
    Shape shape_;
    int64_t numel_ = 0;
    Dtype dtype_ = Dtype::f32;
    std::vector<float> f32_;
    std::vector<double> f64_;
};

template <>
inline std::span<float> Tensor::data<float>() {
    return {f32_.data(), f32_.size()};
}
template <>
inline std::span<double> Tensor::data<double>() {
    return {f64_.data(), f64_.size()};
}
template <>
inline std::span<const float> Tensor::data<float>() const {
    return {f32_.data(), f32_.size()};
}
template <>
inline std::span<const double> Tensor::data<double>() const {
    return {f64_.data(), f64_.size()};
}

// calls fn with a value of the element type as a tag: fn(float{}) or fn(double{})
template <class Fn>
decltype(auto) with_dtype(Dtype d, Fn&& fn) {
    if (d == Dtype::f32) return fn(float{});
    return fn(double{});
}

}  // namespace radlads
