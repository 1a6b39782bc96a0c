#pragma once

// Central-difference gradient checking shared by the autodiff, objective,
// encoder and head tests. Everything runs in f64.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gradcell/optim.hpp"
#include "gradcell/tape.hpp"

namespace fd {

using gradcell::ad::Parameter;
using gradcell::ad::Tape;
using gradcell::ad::Value;

// Builds the scalar loss from the current parameter values. Must be a pure
// function of those values (any randomness pinned to fixed stream triples).
using BuildFn = std::function<Value(Tape&)>;

struct Report {
    double max_rel_err = 0.0;
    std::string worst;  // "param[i]"
    std::int64_t coords_checked = 0;
};

inline double eval_loss(const BuildFn& build) {
    Tape tape(Tape::Mode::no_grad);
    Value loss = build(tape);
    return loss.tensor().at(0);
}

// Checks every coordinate of every parameter unless stride > 1, in which
// case coordinates are sampled at that stride (offset varies per tensor).
inline Report check(const std::vector<Parameter*>& params, const BuildFn& build,
                    std::int64_t stride = 1, double h_scale = 1e-5) {
    gradcell::ad::zero_grads(params);
    {
        Tape tape(Tape::Mode::grad);
        Value loss = build(tape);
        tape.backward(loss);
    }

    Report rep;
    std::int64_t salt = 0;
    for (Parameter* p : params) {
        const auto n = p->value.numel();
        ++salt;
        for (std::int64_t i = salt % std::max<std::int64_t>(stride, 1); i < n; i += stride) {
            const double x0 = p->value.at(i);
            const double h = h_scale * std::max(1.0, std::abs(x0));

            p->value.set(i, x0 + h);
            const double fp = eval_loss(build);
            p->value.set(i, x0 - h);
            const double fm = eval_loss(build);
            p->value.set(i, x0);

            const double fd = (fp - fm) / (2.0 * h);
            const double an = p->grad.at(i);
            const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = p->name + "[" + std::to_string(i) + "]";
            }
            ++rep.coords_checked;
        }
    }
    return rep;
}

}  // namespace fd
