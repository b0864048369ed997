#include "hamr/gradcheck.hpp"

#include <cmath>
#include <sstream>

namespace hamr::diff {

namespace {

double eval_scalar(const std::function<Var(Tape&, const std::vector<Var>&)>& graph,
                   const std::vector<Tensor>& inputs) {
    Tape t;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& in : inputs) leaves.push_back(t.leaf(in, false));
    Var out = graph(t, leaves);
    const Tensor& v = out.val();
    ensure(!v.is_complex() && v.numel() == 1, "grad_check: graph must produce a real scalar");
    return v.r(0);
}

}  // namespace

GradReport grad_check(const std::string& op_name,
                      const std::function<Var(Tape&, const std::vector<Var>&)>& graph,
                      const std::vector<Tensor>& inputs,
                      const std::vector<std::string>& names,
                      int64_t max_probe_per_input) {
    GradReport rep;
    rep.op_name = op_name;

    // Analytic pass.
    std::vector<Tensor> analytic;
    {
        Tape t;
        std::vector<Var> leaves;
        for (const Tensor& in : inputs) leaves.push_back(t.leaf(in, true));
        Var out = graph(t, leaves);
        const Tensor& v = out.val();
        ensure(!v.is_complex() && v.numel() == 1, "grad_check: graph must produce a real scalar");
        t.backward(out);
        for (const Var& l : leaves) analytic.push_back(t.grad_or_zeros(l.id));
    }

    std::vector<Tensor> work = inputs;
    for (size_t p = 0; p < inputs.size(); ++p) {
        int64_t slots = static_cast<int64_t>(work[p].store_size());
        int64_t stride = 1;
        if (max_probe_per_input > 0 && slots > max_probe_per_input)
            stride = (slots + max_probe_per_input - 1) / max_probe_per_input;

        double a_inf = 0.0, f_inf = 0.0, d_inf = 0.0;
        double* slot = work[p].data();
        const double* ga = analytic[p].data();
        for (int64_t s = 0; s < slots; s += stride) {
            double theta = slot[s];
            double h = 1e-6 * std::max(1.0, std::abs(theta));
            slot[s] = theta + h;
            double fp = eval_scalar(graph, work);
            slot[s] = theta - h;
            double fm = eval_scalar(graph, work);
            slot[s] = theta;
            double gfd = (fp - fm) / (2.0 * h);
            a_inf = std::max(a_inf, std::abs(ga[s]));
            f_inf = std::max(f_inf, std::abs(gfd));
            d_inf = std::max(d_inf, std::abs(ga[s] - gfd));
        }
        GradReport::ParamError pe;
        pe.name = p < names.size() ? names[p] : ("input" + std::to_string(p));
        pe.analytic_inf = a_inf;
        pe.fd_inf = f_inf;
        pe.rel_err = d_inf / std::max({a_inf, f_inf, 1e-12});
        rep.max_rel_err = std::max(rep.max_rel_err, pe.rel_err);
        rep.per_param.push_back(std::move(pe));
    }
    return rep;
}

std::string GradReport::str() const {
    std::ostringstream os;
    os << op_name << ": max_rel_err=" << max_rel_err;
    for (const ParamError& p : per_param)
        os << "  [" << p.name << " rel=" << p.rel_err << " |ad|=" << p.analytic_inf
           << " |fd|=" << p.fd_inf << "]";
    return os.str();
}

}  // namespace hamr::diff
