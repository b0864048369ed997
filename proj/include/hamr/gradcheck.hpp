#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hamr/ops.hpp"

namespace hamr::diff {

/// Finite-difference comparison for one differentiable graph. Errors are
/// reported per input tensor as inf-norm ratios:
///   ||g_ad - g_fd||_inf / max(||g_ad||_inf, ||g_fd||_inf, 1e-12)
struct GradReport {
    struct ParamError {
        std::string name;
        double rel_err = 0.0;
        double analytic_inf = 0.0;
        double fd_inf = 0.0;
    };
    std::string op_name;
    std::vector<ParamError> per_param;
    double max_rel_err = 0.0;

    bool pass(double tol) const { return max_rel_err <= tol; }
    std::string str() const;
};

/// graph must build a real scalar output from the given leaves. Central
/// differences with h = 1e-6 * max(1, |theta|); complex inputs are probed on
/// their real and imaginary slots separately. When max_probe_per_input > 0,
/// larger inputs are probed on an evenly strided subset of slots.
GradReport grad_check(const std::string& op_name,
                      const std::function<Var(Tape&, const std::vector<Var>&)>& graph,
                      const std::vector<Tensor>& inputs,
                      const std::vector<std::string>& names = {},
                      int64_t max_probe_per_input = -1);

}  // namespace hamr::diff
