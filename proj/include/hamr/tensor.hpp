#pragma once

#include <complex>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace hamr {

using cplx = std::complex<double>;

inline void ensure(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

enum class Dtype { Real64, Complex128 };

inline const char* dtype_name(Dtype dt) {
    return dt == Dtype::Real64 ? "real64" : "complex128";
}

/// Dense row-major tensor. Complex values are stored as interleaved
/// real/imag doubles, which is also the serialized layout.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<int64_t> shape, Dtype dt);

    static Tensor zeros(std::vector<int64_t> shape, Dtype dt = Dtype::Real64);
    static Tensor full(std::vector<int64_t> shape, double v);
    static Tensor scalar(double v);
    static Tensor from_values(std::vector<int64_t> shape, std::vector<double> vals);

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return numel_; }
    Dtype dtype() const { return dtype_; }
    bool is_complex() const { return dtype_ == Dtype::Complex128; }
    bool defined() const { return !shape_.empty() || numel_ == 1; }

    // Flat element access. r()/set_r() require real dtype; c()/set_c() work
    // for both (imaginary part of a real tensor reads as 0).
    double r(int64_t i) const;
    double& r(int64_t i);
    cplx c(int64_t i) const;
    void set_c(int64_t i, cplx v);

    double* data() { return store_.data(); }
    const double* data() const { return store_.data(); }
    size_t store_size() const { return store_.size(); }

    cplx* cdata();
    const cplx* cdata() const;

    Tensor to_complex() const;   // real -> complex with zero imaginary part
    Tensor real_part() const;
    Tensor conj() const;

    double max_abs() const;
    double max_value() const;    // real tensors only
    double min_value() const;
    double sum_real() const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // Row-major offsets for the common ranks.
    int64_t idx2(int64_t a, int64_t b) const { return a * shape_[1] + b; }
    int64_t idx3(int64_t a, int64_t b, int64_t c) const {
        return (a * shape_[1] + b) * shape_[2] + c;
    }
    int64_t idx4(int64_t a, int64_t b, int64_t c, int64_t d) const {
        return ((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d;
    }

    std::string shape_str() const;

private:
    std::vector<int64_t> shape_;
    Dtype dtype_ = Dtype::Real64;
    int64_t numel_ = 0;
    std::vector<double> store_;
};

int64_t shape_numel(const std::vector<int64_t>& shape);

}  // namespace hamr
