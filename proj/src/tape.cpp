#include "hamr/tape.hpp"

namespace hamr::diff {

const Tensor& Var::val() const {
    ensure(ok(), "Var: dangling handle");
    return tape->val(id);
}

bool Var::requires_grad() const {
    ensure(ok(), "Var: dangling handle");
    return tape->requires_grad(id);
}

const Tape::Node& Tape::at(int64_t id) const {
    ensure(id >= 0 && id < size(), "Tape: node id out of range");
    return nodes_[static_cast<size_t>(id)];
}

Tape::Node& Tape::at(int64_t id) {
    ensure(id >= 0 && id < size(), "Tape: node id out of range");
    return nodes_[static_cast<size_t>(id)];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, size() - 1};
}

Var Tape::record(Tensor value, bool requires_grad,
                 std::function<void(Tape&, int64_t)> backward_fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward_fn = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return Var{this, size() - 1};
}

const Tensor& Tape::val(int64_t id) const { return at(id).value; }

bool Tape::requires_grad(int64_t id) const { return at(id).requires_grad; }

Tensor& Tape::grad_accum(int64_t id) {
    Node& n = at(id);
    if (!n.grad) n.grad = std::make_unique<Tensor>(Tensor::zeros(n.value.shape(), n.value.dtype()));
    return *n.grad;
}

bool Tape::has_grad(int64_t id) const { return at(id).grad != nullptr; }

const Tensor& Tape::grad(int64_t id) const {
    const Node& n = at(id);
    ensure(n.grad != nullptr, "Tape: gradient was never produced for this node");
    return *n.grad;
}

Tensor Tape::grad_or_zeros(int64_t id) const {
    const Node& n = at(id);
    if (n.grad) return *n.grad;
    return Tensor::zeros(n.value.shape(), n.value.dtype());
}

void Tape::backward(const Var& out) {
    ensure(out.ok() && out.tape == this, "backward: output not on this tape");
    const Node& o = at(out.id);
    ensure(!o.value.is_complex() && o.value.numel() == 1,
           "backward: output must be a real scalar");
    ensure(o.requires_grad, "backward: output does not depend on any parameter");
    grad_accum(out.id).r(0) = 1.0;
    for (int64_t i = out.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.requires_grad || !n.grad || !n.backward_fn) continue;
        n.backward_fn(*this, i);
    }
}

void Tape::zero_grad() {
    for (Node& n : nodes_) n.grad.reset();
}

}  // namespace hamr::diff
