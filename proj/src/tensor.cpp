#include "hamr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace hamr {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        ensure(d > 0, "tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int64_t> shape, Dtype dt)
    : shape_(std::move(shape)), dtype_(dt) {
    numel_ = shape_numel(shape_);
    store_.assign(static_cast<size_t>(numel_) * (is_complex() ? 2 : 1), 0.0);
}

Tensor Tensor::zeros(std::vector<int64_t> shape, Dtype dt) {
    return Tensor(std::move(shape), dt);
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape), Dtype::Real64);
    std::fill(t.store_.begin(), t.store_.end(), v);
    return t;
}

Tensor Tensor::scalar(double v) {
    Tensor t({1}, Dtype::Real64);
    t.store_[0] = v;
    return t;
}

Tensor Tensor::from_values(std::vector<int64_t> shape, std::vector<double> vals) {
    Tensor t(std::move(shape), Dtype::Real64);
    ensure(static_cast<int64_t>(vals.size()) == t.numel_,
           "from_values: element count does not match shape");
    std::copy(vals.begin(), vals.end(), t.store_.begin());
    return t;
}

double Tensor::r(int64_t i) const {
    ensure(!is_complex(), "r() on complex tensor");
    return store_[static_cast<size_t>(i)];
}

double& Tensor::r(int64_t i) {
    ensure(!is_complex(), "r() on complex tensor");
    return store_[static_cast<size_t>(i)];
}

cplx Tensor::c(int64_t i) const {
    if (is_complex()) {
        size_t k = static_cast<size_t>(i) * 2;
        return {store_[k], store_[k + 1]};
    }
    return {store_[static_cast<size_t>(i)], 0.0};
}

void Tensor::set_c(int64_t i, cplx v) {
    ensure(is_complex(), "set_c() on real tensor");
    size_t k = static_cast<size_t>(i) * 2;
    store_[k] = v.real();
    store_[k + 1] = v.imag();
}

cplx* Tensor::cdata() {
    ensure(is_complex(), "cdata() on real tensor");
    return reinterpret_cast<cplx*>(store_.data());
}

const cplx* Tensor::cdata() const {
    ensure(is_complex(), "cdata() on real tensor");
    return reinterpret_cast<const cplx*>(store_.data());
}

Tensor Tensor::to_complex() const {
    if (is_complex()) return *this;
    Tensor out(shape_, Dtype::Complex128);
    for (int64_t i = 0; i < numel_; ++i) out.set_c(i, {store_[static_cast<size_t>(i)], 0.0});
    return out;
}

Tensor Tensor::real_part() const {
    if (!is_complex()) return *this;
    Tensor out(shape_, Dtype::Real64);
    for (int64_t i = 0; i < numel_; ++i) out.r(i) = c(i).real();
    return out;
}

Tensor Tensor::conj() const {
    if (!is_complex()) return *this;
    Tensor out = *this;
    double* d = out.data();
    for (int64_t i = 0; i < numel_; ++i) d[2 * i + 1] = -d[2 * i + 1];
    return out;
}

double Tensor::max_abs() const {
    double m = 0.0;
    if (is_complex()) {
        for (int64_t i = 0; i < numel_; ++i) m = std::max(m, std::abs(c(i)));
    } else {
        for (int64_t i = 0; i < numel_; ++i) m = std::max(m, std::abs(store_[static_cast<size_t>(i)]));
    }
    return m;
}

double Tensor::max_value() const {
    ensure(!is_complex(), "max_value() on complex tensor");
    double m = store_[0];
    for (int64_t i = 1; i < numel_; ++i) m = std::max(m, store_[static_cast<size_t>(i)]);
    return m;
}

double Tensor::min_value() const {
    ensure(!is_complex(), "min_value() on complex tensor");
    double m = store_[0];
    for (int64_t i = 1; i < numel_; ++i) m = std::min(m, store_[static_cast<size_t>(i)]);
    return m;
}

double Tensor::sum_real() const {
    double s = 0.0;
    if (is_complex()) {
        for (int64_t i = 0; i < numel_; ++i) s += c(i).real();
    } else {
        for (int64_t i = 0; i < numel_; ++i) s += store_[static_cast<size_t>(i)];
    }
    return s;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ",";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

}  // namespace hamr
