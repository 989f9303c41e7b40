#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "capsgan/ops.hpp"

namespace testutil {

using namespace capsgan;

inline Tensor randu(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f,
                    bool requires_grad = false) {
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Central finite differences on sampled coordinates of every parameter,
// compared against the recorded backward pass. Returns the worst
// |analytic - fd| / max(1, |analytic|, |fd|).
//
// Central differences are only a valid derivative oracle where the loss is
// smooth across the probe window; a kinked activation crossing zero inside
// [-h, h] makes the estimate itself wrong. Coordinates where the h and h/2
// estimates disagree are therefore discarded (the oracle, not the gradient,
// is invalid there); most samples must survive, so a systematically wrong
// backward pass still fails on the smooth coordinates.
inline double gradcheck(std::vector<Tensor> params, const std::function<Tensor()>& f,
                        float h = 1e-3f, int samples_per_tensor = 12, uint64_t seed = 99) {
    for (auto& p : params) p.zero_grad();
    Tensor loss = f();
    loss.backward();
    std::vector<std::vector<float>> analytic;
    for (auto& p : params)
        analytic.push_back(p.has_grad() ? p.grad()
                                        : std::vector<float>(static_cast<size_t>(p.numel()), 0.0f));

    double f0 = static_cast<double>(loss.item());
    Rng rng(seed);
    double max_err = 0.0;
    int64_t valid = 0, skipped = 0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        int64_t n = p.numel();
        int64_t count = std::min<int64_t>(samples_per_tensor, n);
        for (int64_t s = 0; s < count; ++s) {
            int64_t idx = rng.uniform_int(n);
            float orig = p.data()[static_cast<size_t>(idx)];
            auto eval_at = [&](float delta) {
                NoGradGuard ng;
                p.data()[static_cast<size_t>(idx)] = orig + delta;
                return static_cast<double>(f().item());
            };
            double fp = eval_at(h), fm = eval_at(-h);
            double fd_h = (fp - fm) / (2.0 * static_cast<double>(h));
            double fd_h2 = (eval_at(h / 2) - eval_at(-h / 2)) / static_cast<double>(h);
            p.data()[static_cast<size_t>(idx)] = orig;
            // fp32 evaluation noise as seen by the difference quotients
            double fd_noise = 4.0 * 1.2e-7 * std::max(1.0, std::abs(f0)) / static_cast<double>(h);
            double scale = std::max({1.0, std::abs(fd_h), std::abs(fd_h2)});
            double slope_plus = (fp - f0) / static_cast<double>(h);
            double slope_minus = (f0 - fm) / static_cast<double>(h);
            bool scale_inconsistent = std::abs(fd_h - fd_h2) > 3e-3 * scale + fd_noise;
            bool one_sided_gap =
                std::abs(slope_plus - slope_minus) >
                2e-2 * std::max({1.0, std::abs(slope_plus), std::abs(slope_minus)}) + 2.0 * fd_noise;
            if (scale_inconsistent || one_sided_gap) {
                ++skipped;
                continue;
            }
            ++valid;
            double an = analytic[pi][static_cast<size_t>(idx)];
            double err = std::abs(an - fd_h) / std::max({1.0, std::abs(an), std::abs(fd_h)});
            max_err = std::max(max_err, err);
        }
    }
    if (valid < skipped) return 1e9;  // oracle unusable at this configuration
    return max_err;
}

// Moves a freshly initialized network to a generic point in parameter space
// so end-to-end derivative checks see O(1) signals instead of the
// near-symmetric zero-gradient init.
inline void jitter_params(NamedTensors params, Rng& rng, float weight_scale = 5.0f,
                          float noise_std = 0.1f) {
    for (auto& [name, p] : params) {
        (void)name;
        for (auto& v : p.data()) v = weight_scale * v + noise_std * rng.normal();
    }
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

// largest |analytic gradient| entry over the given parameters; guards
// derivative checks against vacuously flat configurations
inline double max_abs_grad(std::vector<Tensor> params, const std::function<Tensor()>& f) {
    for (auto& p : params) p.zero_grad();
    f().backward();
    double m = 0.0;
    for (auto& p : params)
        if (p.has_grad())
            for (float g : p.grad()) m = std::max(m, std::abs(static_cast<double>(g)));
    return m;
}

inline bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace testutil
