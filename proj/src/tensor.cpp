#include "mmbc/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <sstream>

namespace mmbc {

namespace {
using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;
} // namespace

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape, float fill) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
}

Tensor Tensor::scalar(float v) {
    Tensor t(std::vector<int64_t>{1});
    t.data_[0] = v;
    return t;
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<float> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("from_data: " + shape_str(shape) + " does not match buffer size " +
                         std::to_string(data.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

bool Tensor::all_finite() const {
    // A running sum catches any NaN/Inf in one pass; fall back to an exact
    // scan only when the sum itself is suspicious (e.g. benign overflow).
    double s = 0.0;
    for (float v : data_) s += v;
    if (std::isfinite(s)) return true;
    for (float v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

void mm_nn(const Tensor& a, const Tensor& b, Tensor& out) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    CMap A(a.data(), m, k), B(b.data(), k, n);
    MMap C(out.data(), m, n);
    C.noalias() = A * B;
}

void mm_nt(const Tensor& a, const Tensor& b, Tensor& out) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    CMap A(a.data(), m, k), B(b.data(), n, k);
    MMap C(out.data(), m, n);
    C.noalias() = A * B.transpose();
}

void mm_tn(const Tensor& a, const Tensor& b, Tensor& out) {
    const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    CMap A(a.data(), k, m), B(b.data(), k, n);
    MMap C(out.data(), m, n);
    C.noalias() = A.transpose() * B;
}

} // namespace mmbc
