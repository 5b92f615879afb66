#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "poguise/tensor.hpp"

namespace poguise {

// Numerical-vs-analytic gradient comparison. `fn` must build a scalar loss
// from the given leaves each time it is called (the graph is rebuilt per
// evaluation). Run in double; float loses too many digits for h = 1e-5.
struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;
    std::string worst; // "leaf{k}[i]" of the worst element
    bool ok(double tol) const { return max_rel_err < tol; }
};

template <typename T>
GradCheckResult grad_check(const std::function<TensorPtr<T>(const std::vector<TensorPtr<T>>&)>& fn,
                           std::vector<TensorPtr<T>> leaves, T h = T(1e-5)) {
    for (auto& l : leaves) l->requires_grad = true;

    auto loss = fn(leaves);
    for (auto& l : leaves) l->zero_grad();
    backward(loss);

    GradCheckResult res;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        auto& leaf = leaves[k];
        leaf->ensure_grad();
        for (std::size_t i = 0; i < leaf->data.size(); ++i) {
            const T saved = leaf->data[i];
            T fp, fm;
            {
                NoGradGuard no_graph; // numeric evaluations only need values
                leaf->data[i] = saved + h;
                fp = fn(leaves)->data[0];
                leaf->data[i] = saved - h;
                fm = fn(leaves)->data[0];
                leaf->data[i] = saved;
            }

            const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * h);
            const double analytic = static_cast<double>(leaf->grad[i]);
            const double denom =
                std::max({std::abs(numeric), std::abs(analytic), 1e-8});
            const double rel = std::abs(numeric - analytic) / denom;
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = "leaf" + std::to_string(k) + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

} // namespace poguise
