// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/sandbox.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

#include "usdiff/diffusion.hpp"
#include "usdiff/kv.hpp"

namespace usdiff {

Tensor<double> analytic_eps(const Tensor<double>& x_t, int t, const GaussianSpec& g, const NoiseSchedule& s)
{
    if (t < 1 || t > s.T) {
        throw ContractError("analytic_eps: t outside [1, T]");
    }
    if (!(g.sigma0 > 0.0)) {
        throw ContractError("analytic_eps: sigma0 must be positive");
    }
    const double ab = s.alpha_bar[t];
    const double denom = ab * g.sigma0 * g.sigma0 + 1.0 - ab;
    const double k = std::sqrt(1.0 - ab) / denom;
    std::vector<double> out(x_t.values());
    const double shift = std::sqrt(ab) * g.mu0;
    for (auto& v : out) {
        v = k * (v - shift);
    }
    return Tensor<double>::from(x_t.shape(), std::move(out));
}

double wasserstein_1d(std::span<const double> samples, const GaussianSpec& g)
{
    if (samples.empty()) {
        throw ContractError("wasserstein_1d: empty sample");
    }
    if (!(g.sigma0 > 0.0)) {
        throw ContractError("wasserstein_1d: sigma0 must be positive");
    }
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    const boost::math::normal_distribution<double> dist(g.mu0, g.sigma0);
    const double n = static_cast<double>(sorted.size());
    double acc = 0.0;
    for (size_t i = 0; i < sorted.size(); ++i) {
        acc += std::abs(sorted[i] - boost::math::quantile(dist, (static_cast<double>(i) + 0.5) / n));
    }
    return acc / n;
}

double SandboxReport::mean_avg() const { return std::accumulate(mean.begin(), mean.end(), 0.0) / mean.size(); }
double SandboxReport::var_avg() const { return std::accumulate(var.begin(), var.end(), 0.0) / var.size(); }
double SandboxReport::w1_avg() const { return std::accumulate(w1.begin(), w1.end(), 0.0) / w1.size(); }

SandboxReport run_sandbox(const StepPlan& plan, const GaussianSpec& g, const NoiseSchedule& s, int n, uint64_t seed,
                          double eta)
{
    if (n < 1000) {
        throw ContractError("run_sandbox: n must be >= 1000");
    }
    if (g.dim < 1) {
        throw ContractError("run_sandbox: dim must be >= 1");
    }
    NoGradGuard no_grad;
    Rng rng(seed);
    const EpsFn<double> eps_fn = [&](const Tensor<double>& x, int t) { return analytic_eps(x, t, g, s); };
    const SampleResult<double> res = sample<double>(eps_fn, plan, {n, g.dim}, s, rng, eta);

    SandboxReport r;
    r.strategy = to_string(plan.strategy);
    r.K = plan.K();
    r.eta = eta;
    r.n = n;
    r.seed = seed;
    r.denoiser_calls = res.denoiser_calls;
    const auto& v = res.x0.values();
    std::vector<double> column(n);
    for (int d = 0; d < g.dim; ++d) {
        double m = 0.0;
        for (int i = 0; i < n; ++i) {
            column[i] = v[static_cast<size_t>(i) * g.dim + d];
            m += column[i];
        }
        m /= n;
        double var = 0.0;
        for (double x : column) {
            var += (x - m) * (x - m);
        }
        r.mean.push_back(m);
        r.var.push_back(var / (n - 1));
        r.w1.push_back(wasserstein_1d(column, g));
    }
    return r;
}

std::string sandbox_csv_header() { return "strategy,K,eta,n,mean,var,w1,denoiser_calls,seed"; }

std::string sandbox_csv_row(const SandboxReport& r)
{
    return r.strategy + "," + std::to_string(r.K) + "," + format_double(r.eta) + "," + std::to_string(r.n) + "," +
           format_double(r.mean_avg()) + "," + format_double(r.var_avg()) + "," + format_double(r.w1_avg()) + "," +
           std::to_string(r.denoiser_calls) + "," + std::to_string(r.seed);
}

} // namespace usdiff
