#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mmgen/core/error.hpp"
#include "mmgen/core/rng.hpp"

namespace mmgen {

// Dense row-major tensor. Rank is dynamic but small (<= 3 in practice).
template <typename T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(count(shape), T(0)) {}

    static int64_t count(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int64_t> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor from(std::vector<int64_t> s, std::vector<T> values) {
        if (count(s) != static_cast<int64_t>(values.size()))
            throw ShapeError("Tensor::from: value count does not match shape");
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(values);
        return t;
    }

    static Tensor randn(std::vector<int64_t> s, Rng& rng, T sigma = T(1)) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = static_cast<T>(rng.normal()) * sigma;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    // 2D / 3D accessors (row-major).
    T& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
    T at2(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }
    T& at3(int64_t a, int64_t b, int64_t c) {
        return data[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
    }
    T at3(int64_t a, int64_t b, int64_t c) const {
        return data[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int64_t> s) const {
        if (count(s) != numel()) throw ShapeError("reshape: element count mismatch");
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    void add_(const Tensor& o, T scale = T(1)) {
        if (!same_shape(o)) throw ShapeError("add_: shape mismatch");
        for (size_t i = 0; i < data.size(); ++i) data[i] += scale * o.data[i];
    }

    void scale_(T s) {
        for (auto& v : data) v *= s;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    T m = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const T d = std::abs(a.data[i] - b.data[i]);
        if (d > m) m = d;
    }
    return m;
}

}  // namespace mmgen
