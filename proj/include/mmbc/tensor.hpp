#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmbc {

class NumericsError : public std::runtime_error {
public:
    explicit NumericsError(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Dense row-major f32 tensor. Rank is 1 or 2 in practice (vectors and
// [batch, features] matrices); shape is kept generic for slicing helpers.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape, float fill = 0.0f);
    Tensor(std::initializer_list<int64_t> shape, float fill = 0.0f)
        : Tensor(std::vector<int64_t>(shape), fill) {}

    static Tensor scalar(float v);
    static Tensor from_data(std::vector<int64_t> shape, std::vector<float> data);

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
    float& at2(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
    float at2(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    // Rows/cols for rank-2 access; rank-1 tensors are treated as a single row.
    int64_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    int64_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

private:
    std::vector<int64_t> shape_;
    std::vector<float> data_;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

// Raw kernels (Eigen-backed). Shapes must already agree.
void mm_nn(const Tensor& a, const Tensor& b, Tensor& out);  // [m,k]x[k,n]
void mm_nt(const Tensor& a, const Tensor& b, Tensor& out);  // [m,k]x[n,k]^T
void mm_tn(const Tensor& a, const Tensor& b, Tensor& out);  // [k,m]^T x [k,n]

} // namespace mmbc
