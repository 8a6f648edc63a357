#ifndef METAVD_TENSOR_HPP
#define METAVD_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace metavd {

struct KernelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor of 64-bit floats. The only storage type the compute
// kernel knows about; shapes are kept explicit so mismatches fail loudly.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> v;

    Tensor() = default;
    Tensor(std::vector<size_t> s, std::vector<double> values) : shape(std::move(s)), v(std::move(values)) {}

    static Tensor zeros(std::vector<size_t> s) {
        size_t n = 1;
        for (size_t d : s) n *= d;
        Tensor t;
        t.shape = std::move(s);
        t.v.assign(n, 0.0);
        return t;
    }

    static Tensor full(std::vector<size_t> s, double value) {
        Tensor t = zeros(std::move(s));
        for (double& x : t.v) x = value;
        return t;
    }

    size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }

    size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

    double& operator()(size_t i, size_t j) { return v[i * cols() + j]; }
    double operator()(size_t i, size_t j) const { return v[i * cols() + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const;
};

inline bool Tensor::all_finite() const {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

inline std::string shape_str(const Tensor& t) {
    std::string s = "(";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + ")";
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b)) {
        throw KernelError(std::string(where) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

// y += s * x, elementwise.
inline void axpy(Tensor& y, double s, const Tensor& x) {
    require_same_shape(y, x, "axpy");
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] += s * x.v[i];
}

} // namespace metavd

#endif
