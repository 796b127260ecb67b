#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mdseg/rng.hpp"
#include "mdseg/tensor.hpp"

namespace testutil {

// Central finite differences against the analytic gradient. loss_fn must
// rebuild the graph from the parameters' current data on every call. Returns
// the worst relative error over elements with |analytic| > threshold.
inline double max_grad_rel_err(std::vector<mdseg::Tensor> params,
                               const std::function<mdseg::Tensor()>& loss_fn,
                               double step = 1e-5, double threshold = 1e-8) {
    using mdseg::Tensor;
    for (auto& p : params) p.zero_grad();
    mdseg::backward(loss_fn());
    std::vector<std::vector<double>> analytic;
    for (auto& p : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0));

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double keep = data[i];
            data[i] = keep + step;
            const double up = loss_fn().item();
            data[i] = keep - step;
            const double down = loss_fn().item();
            data[i] = keep;
            const double fd = (up - down) / (2.0 * step);
            const double an = analytic[pi][i];
            const double denom = std::max(std::abs(an), std::abs(fd));
            if (denom <= threshold) continue;
            worst = std::max(worst, std::abs(an - fd) / denom);
        }
    }
    return worst;
}

inline mdseg::Tensor random_tensor(std::vector<std::size_t> shape, mdseg::Rng& rng,
                                   bool requires_grad = true, double scale = 1.0) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> data(n);
    for (double& v : data) v = scale * rng.normal();
    return mdseg::Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace testutil
