/* SPDX-FileCopyrightText: 2026 The LumiNet Desk Authors
 * SPDX-License-Identifier: Apache-2.0 */
#pragma once

#include <functional>
#include <vector>

#include "luminet/graph.hpp"
#include "luminet/rng.hpp"
#include "luminet/tensor.hpp"

namespace luminet::testutil {

using DTensor = TensorT<double>;
using DGraph = GraphT<double>;
using DVar = VarT<double>;

/// Builds a scalar loss from graph inputs. Called repeatedly with perturbed
/// copies of the same tensors for central differences.
using LossBuilder = std::function<DVar(DGraph&, std::vector<DVar>&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    bool ok = true;
};

/// Central-difference gradient check of `build` w.r.t. every element of every
/// input (or a sampled subset when inputs are large).
inline GradCheckResult gradcheck(std::vector<DTensor> inputs, const LossBuilder& build,
                                 double tol = 1e-5, double h = 1e-5, int max_checks_per_input = 64,
                                 uint64_t sample_seed = 7) {
    auto eval = [&](const std::vector<DTensor>& in) {
        DGraph g;
        std::vector<DVar> xs;
        for (const auto& t : in) xs.push_back(g.constant(t));
        DVar loss = build(g, xs);
        return loss.value()[0];
    };

    // analytic gradients
    DGraph g;
    std::vector<DVar> xs;
    for (const auto& t : inputs) xs.push_back(g.input(t));
    DVar loss = build(g, xs);
    g.backward(loss);
    std::vector<DTensor> analytic;
    for (auto& x : xs)
        analytic.push_back(g.has_grad(x.id) ? g.grad(x.id) : DTensor::zeros(x.value().shape()));

    GradCheckResult res;
    Rng rng(sample_seed);
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        const int64_t n = inputs[ti].numel();
        std::vector<int64_t> idx;
        if (n <= max_checks_per_input) {
            for (int64_t i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (int c = 0; c < max_checks_per_input; ++c)
                idx.push_back(int64_t(rng.randint(uint32_t(n))));
        }
        for (int64_t i : idx) {
            std::vector<DTensor> plus = inputs, minus = inputs;
            plus[ti][i] += h;
            minus[ti][i] -= h;
            const double num = (eval(plus) - eval(minus)) / (2 * h);
            const double ana = analytic[ti][i];
            const double rel = std::abs(num - ana) / std::max(1.0e-6, std::abs(num) + std::abs(ana));
            res.max_rel_err = std::max(res.max_rel_err, rel);
            if (rel > tol) res.ok = false;
        }
    }
    return res;
}

inline DTensor drandn(std::vector<int> shape, uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return DTensor::randn(std::move(shape), rng, stddev);
}

} // namespace luminet::testutil
