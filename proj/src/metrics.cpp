// Copyright 2026 The usdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "usdiff/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "usdiff/kv.hpp"

namespace usdiff {

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
double rmse_impl(const Tensor<T>& pred, const Tensor<T>& gt)
{
    if (!pred.defined() || !gt.defined() || pred.shape() != gt.shape()) {
        throw ContractError("rmse: shapes must match");
    }
    const auto& a = pred.values();
    const auto& b = gt.values();
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        // Both operands map to [0,1] by x -> (x + 1) / 2.
        const double d = 0.5 * (static_cast<double>(a[i]) - static_cast<double>(b[i]));
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(a.size()));
}

// Mean and unbiased covariance of n rows of length dim.
void moments(const std::vector<double>& x, int dim, Eigen::VectorXd& mu, Eigen::MatrixXd& cov)
{
    const auto n = static_cast<Eigen::Index>(x.size() / dim);
    if (n < 2 || static_cast<size_t>(n) * dim != x.size()) {
        throw ContractError("frechet: need at least two feature rows");
    }
    const Eigen::Map<const MatrixRM> m(x.data(), n, dim);
    mu = m.colwise().mean().transpose();
    const MatrixRM centered = m.rowwise() - mu.transpose();
    cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    cov = 0.5 * (cov + cov.transpose()).eval();
}

// Eigen-decomposition of a symmetric matrix that must be PSD up to rounding.
Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> psd_eigen(const Eigen::MatrixXd& m, const char* what)
{
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) {
        throw NumericError(std::string("frechet: eigen-decomposition failed for ") + what);
    }
    const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    if (es.eigenvalues().minCoeff() < -1e-8 * scale) {
        throw NumericError(std::string("frechet: ") + what + " is not positive semi-definite");
    }
    return es;
}

} // namespace

double rmse(const Tensor<float>& pred, const Tensor<float>& gt) { return rmse_impl(pred, gt); }
double rmse(const Tensor<double>& pred, const Tensor<double>& gt) { return rmse_impl(pred, gt); }

FeatureExtractor::FeatureExtractor(uint64_t feature_seed, int64_t input_size) : input_size_(input_size)
{
    if (input_size < 1) {
        throw ContractError("feature extractor: input size must be positive");
    }
    Rng rng(feature_seed, 0xFEA7);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(input_size));
    w1_.resize(static_cast<size_t>(kHidden * input_size));
    for (auto& v : w1_) {
        v = rng.normal() * s1;
    }
    const double s2 = 1.0 / std::sqrt(static_cast<double>(kHidden));
    w2_.resize(static_cast<size_t>(kOut) * kHidden);
    for (auto& v : w2_) {
        v = rng.normal() * s2;
    }
}

std::vector<double> FeatureExtractor::features(const Tensor<float>& images) const
{
    if (!images.defined() || images.rank() < 2 || images.numel() / images.dim(0) != input_size_) {
        throw ContractError("feature extractor: expected [n, ...] with " + std::to_string(input_size_) +
                            " elements per item");
    }
    const auto n = static_cast<Eigen::Index>(images.dim(0));
    MatrixRM x(n, input_size_);
    const auto& v = images.values();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        x.data()[i] = v[static_cast<size_t>(i)];
    }
    const Eigen::Map<const MatrixRM> w1(w1_.data(), kHidden, input_size_);
    const Eigen::Map<const MatrixRM> w2(w2_.data(), kOut, kHidden);
    MatrixRM h = x * w1.transpose();
    h = h.unaryExpr([](double z) { return z / (1.0 + std::exp(-z)); });
    const MatrixRM f = h * w2.transpose();
    return {f.data(), f.data() + f.size()};
}

double frechet_from_features(const std::vector<double>& a, const std::vector<double>& b, int dim)
{
    if (dim < 1) {
        throw ContractError("frechet: dim must be positive");
    }
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    moments(a, dim, mu_a, cov_a);
    moments(b, dim, mu_b, cov_b);

    const auto es_a = psd_eigen(cov_a, "covariance of the first set");
    psd_eigen(cov_b, "covariance of the second set");
    const Eigen::VectorXd root = es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd sqrt_a = es_a.eigenvectors() * root.asDiagonal() * es_a.eigenvectors().transpose();
    Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
    inner = 0.5 * (inner + inner.transpose()).eval();
    const auto es_inner = psd_eigen(inner, "the covariance product");
    const double tr_sqrt = es_inner.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    const double fd = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, fd);
}

double frechet_proxy(const Tensor<float>& set_a, const Tensor<float>& set_b, uint64_t feature_seed)
{
    if (!set_a.defined() || !set_b.defined() || set_a.rank() != 4 || set_b.rank() != 4) {
        throw ContractError("frechet_proxy: expected [n,3,H,W] image sets");
    }
    if (set_a.dim(0) < 50 || set_b.dim(0) < 50) {
        throw ContractError("frechet_proxy: each set needs at least 50 images");
    }
    const Shape item_a(set_a.shape().begin() + 1, set_a.shape().end());
    const Shape item_b(set_b.shape().begin() + 1, set_b.shape().end());
    if (item_a != item_b) {
        throw ContractError("frechet_proxy: image shapes differ");
    }
    const FeatureExtractor fx(feature_seed, numel(item_a));
    return frechet_from_features(fx.features(set_a), fx.features(set_b), FeatureExtractor::kOut);
}

std::string results_csv_header() { return "checkpoint,task,direction,metric,value,n,seed,plan_strategy,K"; }

std::string results_csv_row(const EvalReport& r)
{
    return r.checkpoint + "," + to_string(r.task.kind) + "," + to_string(r.task.direction) + "," + r.metric() + "," +
           format_double(r.value()) + "," + std::to_string(r.n) + "," + std::to_string(r.seed) + "," +
           r.plan_strategy + "," + std::to_string(r.K);
}

} // namespace usdiff
