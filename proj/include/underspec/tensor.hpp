#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "underspec/errors.hpp"

namespace underspec {

// Dense row-major 64-bit float array. Kept deliberately minimal: the models in
// this library are small MLPs, so everything is plain loops over contiguous
// doubles.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shp, double fill = 0.0)
        : shape(std::move(shp)), data(count(shape), fill) {}

    Tensor(std::vector<std::size_t> shp, std::vector<double> values)
        : shape(std::move(shp)), data(std::move(values)) {
        if (count(shape) != data.size()) {
            fail(ErrorKind::ShapeMismatch,
                 "tensor data length " + std::to_string(data.size()) +
                     " does not match shape product " + std::to_string(count(shape)));
        }
    }

    static std::size_t count(const std::vector<std::size_t>& shp) {
        std::size_t n = 1;
        for (std::size_t d : shp) n *= d;
        return shp.empty() ? 0 : n;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

    double* row(std::size_t r) { return data.data() + r * cols(); }
    const double* row(std::size_t r) const { return data.data() + r * cols(); }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void require_finite(const std::string& what) const {
        if (!all_finite()) fail(ErrorKind::NonFinite, what + " contains a non-finite value");
    }
};

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(const Vec& a) { return dot(a, a); }

inline void axpy(double alpha, const Vec& x, Vec& y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline bool all_finite(const Vec& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

} // namespace underspec
