#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace aol {

/// Dense row-major tensor of doubles (last index fastest).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), data_(check_numel(shape_), 0.0) {}

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::size_t>(check_numel(shape_)) != data_.size())
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    /// Same data, new shape (element count must match).
    Tensor reshaped(std::vector<int> new_shape) const {
        Tensor t;
        t.shape_ = std::move(new_shape);
        if (check_numel(t.shape_) != numel())
            throw std::invalid_argument("reshaped: element count mismatch");
        t.data_ = data_;
        return t;
    }

    bool all_finite() const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(double v) { data_.assign(data_.size(), v); }

private:
    static std::int64_t check_numel(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
            n *= d;
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

std::string shape_to_string(const std::vector<int>& shape);

inline std::int64_t numel_of_shape(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

// ---- elementwise helpers ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double alpha);
double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);
double max_abs(const Tensor& a);

// ---- matrix ops ----

/// C = A (n x m) * B (m x p).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- 2-D cross-correlation ----

enum class Padding { SameZero, Valid, Maximal };

Padding padding_from_string(const std::string& s);
std::string padding_to_string(Padding p);

struct ConvGeometry {
    int kernel = 1;
    int stride = 1;
    Padding padding = Padding::SameZero;
    int in_channels = 1;
    int out_channels = 1;
};

/// Zero padding added before the first row/column for the given mode.
/// SameZero splits k-1 as floor((k-1)/2) before and the rest after.
int pad_before(const ConvGeometry& g);
int pad_after(const ConvGeometry& g);

/// Output spatial extent for an input extent n.
int conv_output_extent(int n, const ConvGeometry& g);

/// out[i,j,b] = sum_{p,q,a} P[p,q,a,b] * xpad[i*s+p, j*s+q, a].
/// x is [h,w,c_in], kernel is [k,k,c_in,c_out].
Tensor conv2d(const Tensor& x, const Tensor& kernel, const ConvGeometry& g);

/// Gradient of conv2d w.r.t. the input, given dL/d(out).
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& kernel,
                         const ConvGeometry& g, int in_h, int in_w);

/// Gradient of conv2d w.r.t. the kernel.
Tensor conv2d_grad_kernel(const Tensor& grad_out, const Tensor& x, const ConvGeometry& g);

}  // namespace aol
