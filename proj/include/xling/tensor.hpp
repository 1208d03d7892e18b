#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "xling/rng.hpp"

namespace xling {

namespace kernels {

// Dot product with four independent accumulators so the compiler can keep
// the reduction in vector registers without -ffast-math. The summation
// order is fixed, which keeps results bit-reproducible for a given build.
inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// y += alpha * x
inline void axpy(double* y, double alpha, const double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y += a (elementwise)
inline void add(double* y, const double* a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a[i];
}

// y += a * b (elementwise product)
inline void add_mul(double* y, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a[i] * b[i];
}

}  // namespace kernels

// Dense row-major tensor of 64-bit floats. Rank 1 and 2 cover everything
// this project needs; the shape is kept generic for serialization.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(count(shape_), 0.0);
    }

    Tensor(std::initializer_list<double> values)
        : shape_{static_cast<int>(values.size())}, data_(values) {}

    static Tensor zeros(const std::vector<int>& shape) { return Tensor(shape); }

    static Tensor full(const std::vector<int>& shape, double v) {
        Tensor t(shape);
        t.fill(v);
        return t;
    }

    static Tensor matrix(int rows, int cols) { return Tensor({rows, cols}); }

    static Tensor uniform(const std::vector<int>& shape, double lo, double hi, Rng& rng) {
        Tensor t(shape);
        for (double& x : t.data_) x = rng.uniform(lo, hi);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    int rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? shape_[0] : 0); }
    int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? 1 : 0); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }

    double* row(int r) { return data_.data() + static_cast<std::size_t>(r) * shape_[1]; }
    const double* row(int r) const { return data_.data() + static_cast<std::size_t>(r) * shape_[1]; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(0.0); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double l2_norm_squared() const { return kernels::dot(data(), data(), size()); }

    void add_scaled(const Tensor& x, double alpha) {
        require_same_shape(x, "add_scaled");
        kernels::axpy(data(), alpha, x.data(), size());
    }

    void scale(double alpha) {
        for (double& x : data_) x *= alpha;
    }

    void require_same_shape(const Tensor& o, const char* where) const {
        if (!same_shape(o))
            throw std::invalid_argument(std::string(where) + ": shape mismatch " +
                                        shape_string() + " vs " + o.shape_string());
    }

    std::string shape_string() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

    static std::size_t count(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

}  // namespace xling
