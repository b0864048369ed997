#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "hamr/tensor.hpp"

namespace hamr::diff {

class Tape;

/// Handle into a tape. Cheap to copy; only valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    int64_t id = -1;

    bool ok() const { return tape != nullptr && id >= 0; }
    const Tensor& val() const;
    const std::vector<int64_t>& shape() const { return val().shape(); }
    bool is_complex() const { return val().is_complex(); }
    bool requires_grad() const;
};

/// Reverse-mode tape. Nodes are recorded in evaluation order, which is a
/// topological order by construction, so backward is a single reverse sweep.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = false);
    Var constant(Tensor value) { return leaf(std::move(value), false); }
    Var scalar(double v, bool requires_grad = false) {
        return leaf(Tensor::scalar(v), requires_grad);
    }

    /// Record an op result. The closure receives the tape and the node's own
    /// id; it reads grad(id) and accumulates into the parents. Pass an empty
    /// function when no parent needs gradients.
    Var record(Tensor value, bool requires_grad,
               std::function<void(Tape&, int64_t)> backward_fn);

    const Tensor& val(int64_t id) const;
    bool requires_grad(int64_t id) const;

    /// Gradient accumulator, allocated as zeros on first touch.
    Tensor& grad_accum(int64_t id);
    bool has_grad(int64_t id) const;
    const Tensor& grad(int64_t id) const;  // hard error when absent
    Tensor grad_or_zeros(int64_t id) const;

    /// Seeds d(out)/d(out) = 1 (out must be a real scalar) and runs the
    /// reverse sweep. Gradients accumulate; call zero_grad between passes
    /// if fresh values are wanted.
    void backward(const Var& out);

    void zero_grad();
    int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

private:
    struct Node {
        Tensor value;
        std::unique_ptr<Tensor> grad;
        bool requires_grad = false;
        std::function<void(Tape&, int64_t)> backward_fn;
    };
    std::vector<Node> nodes_;

    const Node& at(int64_t id) const;
    Node& at(int64_t id);
};

}  // namespace hamr::diff
