#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "piilab/rng.hpp"
#include "piilab/tensor.hpp"

namespace piilab::testutil {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(-scale, scale);
    return t;
}

// Central finite-difference gradient check. `build` must construct the scalar
// loss from the supplied leaf Vars (one per parameter, same order) and be a
// pure function of the parameter values. Returns the max relative error over
// all parameter entries, with rel = |a - fd| / max(|a|, |fd|, 1e-4).
inline double fd_max_rel_err(std::vector<Tensor>& params,
                             const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                             double step = 1e-5) {
    auto eval = [&]() {
        Tape t;
        std::vector<Var> vars;
        vars.reserve(params.size());
        for (auto& p : params) vars.push_back(t.param(p));
        Var loss = build(t, vars);
        return t.val(loss).data[0];
    };

    // Analytic gradients.
    for (auto& p : params) {
        p.ensure_grad();
        p.zero_grad();
    }
    {
        Tape t;
        std::vector<Var> vars;
        for (auto& p : params) vars.push_back(t.param(p));
        Var loss = build(t, vars);
        t.backward(loss);
    }

    double worst = 0.0;
    for (auto& p : params) {
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double keep = p.data[i];
            p.data[i] = keep + step;
            const double fp = eval();
            p.data[i] = keep - step;
            const double fm = eval();
            p.data[i] = keep;
            const double fd = (fp - fm) / (2.0 * step);
            const double a = p.grad[i];
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace piilab::testutil
