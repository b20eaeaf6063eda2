/* SPDX-FileCopyrightText: 2026 The LumiNet Desk Authors
 * SPDX-License-Identifier: Apache-2.0 */
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "luminet/error.hpp"
#include "luminet/rng.hpp"

namespace luminet {

/// Dense row-major tensor of rank 1..4. The last dimension is the fastest
/// moving one; images and feature maps use (H, W, C) or (N, H, W, C).
template <class T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(size_t(numel_of(shape_)), T(0));
    }

    static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<int> shape, T v) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static TensorT from(std::vector<int> shape, std::vector<T> values) {
        TensorT t;
        t.shape_ = std::move(shape);
        if (int64_t(values.size()) != numel_of(t.shape_))
            throw ShapeError("TensorT::from: value count does not match shape");
        t.data_ = std::move(values);
        return t;
    }

    static TensorT randn(std::vector<int> shape, Rng& rng, T stddev = T(1)) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) v = T(rng.normal()) * stddev;
        return t;
    }

    int rank() const { return int(shape_.size()); }
    int dim(int i) const { return shape_[size_t(i)]; }
    const std::vector<int>& shape() const { return shape_; }
    int64_t numel() const { return int64_t(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[size_t(i)]; }
    const T& operator[](int64_t i) const { return data_[size_t(i)]; }

    T& at(int i, int j) { return data_[size_t(i) * shape_[1] + j]; }
    const T& at(int i, int j) const { return data_[size_t(i) * shape_[1] + j]; }

    T& at(int i, int j, int k) {
        return data_[(size_t(i) * shape_[1] + j) * shape_[2] + k];
    }
    const T& at(int i, int j, int k) const {
        return data_[(size_t(i) * shape_[1] + j) * shape_[2] + k];
    }

    T& at(int i, int j, int k, int l) {
        return data_[((size_t(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    const T& at(int i, int j, int k, int l) const {
        return data_[((size_t(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    TensorT reshaped(std::vector<int> shape) const {
        if (numel_of(shape) != numel())
            throw ShapeError("reshape: element count mismatch " + shape_str() );
        TensorT t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << ")";
        return os.str();
    }

    template <class U>
    TensorT<U> cast() const {
        TensorT<U> t;
        t.shape_ = shape_;
        t.data_.resize(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) t.data_[i] = U(data_[i]);
        return t;
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeError("tensor dims must be positive");
            n *= d;
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;

template <class T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

} // namespace luminet
