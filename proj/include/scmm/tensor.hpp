#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "scmm/common.hpp"

namespace scmm {

// Dense row-major 2-D tensor of doubles. Vectors are 1xN or Nx1, scalars 1x1.
struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Tensor row(std::vector<double> v) {
        Tensor t;
        t.rows = 1;
        t.cols = v.size();
        t.data = std::move(v);
        return t;
    }

    static Tensor scalar(double v) { return row({v}); }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    double* row_ptr(std::size_t r) { return data.data() + r * cols; }
    const double* row_ptr(std::size_t r) const { return data.data() + r * cols; }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    std::string shape_str() const {
        return std::to_string(rows) + "x" + std::to_string(cols);
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    void quantize_f32_inplace() {
        for (double& v : data) v = quantize_f32(v);
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool bit_equal(const Tensor& o) const {
        if (!same_shape(o)) return false;
        return std::memcmp(data.data(), o.data.data(), data.size() * sizeof(double)) == 0;
    }
};

// c = a * b. Loop order chosen for stride-1 inner access.
inline void matmul_into(const Tensor& a, const Tensor& b, Tensor& c) {
    if (a.cols != b.rows) throw data_error("matmul shape mismatch: " + a.shape_str() + " * " + b.shape_str());
    c.rows = a.rows;
    c.cols = b.cols;
    c.data.assign(a.rows * b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row_ptr(i);
        double* crow = c.row_ptr(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            double av = arow[k];
            if (av == 0.0) continue;
            const double* brow = b.row_ptr(k);
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
        }
    }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    Tensor c;
    matmul_into(a, b, c);
    return c;
}

inline Tensor transpose(const Tensor& a) {
    Tensor t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline double euclidean(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

} // namespace scmm
