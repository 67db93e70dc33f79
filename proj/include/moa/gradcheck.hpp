// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient checking. Run with double tensors; float
// rounding drowns the h=1e-5 probes.

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "moa/tensor.hpp"

namespace moa {

struct GradCheckOptions {
    double h = 1e-5;
    // Probe at most this many coordinates per parameter (all if numel is
    // smaller); keeps whole-model checks tractable.
    int max_probes_per_param = 0;  // 0 = probe everything
    uint64_t probe_seed = 0x9c0ffeeULL;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    size_t probes = 0;
    std::string worst_param;
    size_t worst_index = 0;
};

// f() must rebuild the scalar loss from the current parameter values on every
// call. Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
inline GradCheckReport grad_check(const std::function<DTensor()>& f,
                                  const ParamRefs<double>& params,
                                  const GradCheckOptions& opt = {}) {
    for (auto* p : params) p->value.zero_grad();
    DTensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericsError("grad_check: non-finite loss");
    backward(loss);

    // Snapshot analytic gradients before poking values.
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto* p : params)
        analytic.push_back(p->value.grad ? *p->value.grad : std::vector<double>(p->numel(), 0.0));

    GradCheckReport rep;
    Rng probe_rng(opt.probe_seed);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto* p = params[pi];
        if (!p->trainable) continue;
        const size_t n = p->numel();
        std::vector<size_t> idxs;
        if (opt.max_probes_per_param <= 0 || n <= static_cast<size_t>(opt.max_probes_per_param)) {
            idxs.resize(n);
            for (size_t i = 0; i < n; ++i) idxs[i] = i;
        } else {
            for (int i = 0; i < opt.max_probes_per_param; ++i)
                idxs.push_back(probe_rng.below(n));
        }
        for (size_t idx : idxs) {
            double& slot = (*p->value.data)[idx];
            const double saved = slot;
            double fp, fm;
            {
                NoGradGuard ng;
                slot = saved + opt.h;
                fp = f().item();
                slot = saved - opt.h;
                fm = f().item();
                slot = saved;
            }
            const double numeric = (fp - fm) / (2.0 * opt.h);
            const double a = analytic[pi][idx];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            const double rel = std::fabs(a - numeric) / denom;
            ++rep.probes;
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst_param = p->name;
                rep.worst_index = idx;
            }
        }
    }
    return rep;
}

}  // namespace moa
