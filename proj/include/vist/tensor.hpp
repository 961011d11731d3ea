#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "vist/common.hpp"

namespace vist {

// Dense row-major tensor. The library only ever needs rank <= 2; vectors are
// stored as 1 x n matrices so every kernel op works on one layout.
template <class T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> v;

    Tensor() = default;
    Tensor(std::initializer_list<int> s, T fill = T(0)) : shape(s) { v.assign(count(shape), fill); }
    explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
        v.assign(count(shape), fill);
    }

    static std::size_t count(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) n *= std::size_t(d);
        return n;
    }

    std::size_t size() const { return v.size(); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

    T& at(int r, int c) { return v[std::size_t(r) * cols() + c]; }
    T at(int r, int c) const { return v[std::size_t(r) * cols() + c]; }
    T& operator[](std::size_t i) { return v[i]; }
    T operator[](std::size_t i) const { return v[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(T x) { std::fill(v.begin(), v.end(), x); }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(double(x))) return false;
        return true;
    }

    static Tensor zeros(int r, int c) { return Tensor({r, c}); }

    static Tensor randn(int r, int c, Rng& rng, T stddev = T(1)) {
        Tensor t({r, c});
        for (auto& x : t.v) x = T(rng.next_normal()) * stddev;
        return t;
    }

    static Tensor uniform(int r, int c, Rng& rng, T lo = T(-1), T hi = T(1)) {
        Tensor t({r, c});
        for (auto& x : t.v) x = lo + (hi - lo) * T(rng.next_double());
        return t;
    }

    // Glorot-style init for a [fan_in x fan_out] weight.
    static Tensor glorot(int r, int c, Rng& rng) {
        T s = T(std::sqrt(2.0 / double(r + c)));
        return randn(r, c, rng, s);
    }

    Tensor row(int r) const {
        Tensor out({1, cols()});
        for (int c = 0; c < cols(); ++c) out.at(0, c) = at(r, c);
        return out;
    }
};

template <class T>
void check_finite(const Tensor<T>& t, const char* what) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite values in ") + what);
}

}  // namespace vist
