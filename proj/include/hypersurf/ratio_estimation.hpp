#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "hypersurf/density_family.hpp"
#include "hypersurf/spectral.hpp"

namespace hypersurf {

// W(s, p) = log nu_{h_s}(theta_p) for every skeleton point s and pooled sample p.
struct LogWeightMatrix {
    Eigen::MatrixXd W;  // k x M
    std::vector<std::size_t> chain_of;
    std::vector<std::size_t> counts;
    Eigen::VectorXd proportions;  // counts / M

    std::size_t k() const { return static_cast<std::size_t>(W.rows()); }
    std::size_t size() const { return static_cast<std::size_t>(W.cols()); }
    std::size_t chain_begin(std::size_t l) const;

    // Counts sum to M, every column has a finite entry.
    void validate() const;
};

// With validate = false, all -inf columns are left for the caller to report.
LogWeightMatrix build_log_weight_matrix(const DensityFamily& family, const std::vector<Hyperparameter>& skeleton,
                                        const SamplePool& pool, bool validate = true);

struct SolverOptions {
    double tolerance = 1e-10;  // max_j |gradient_j| / N
    int max_iterations = 500;
};

struct SolverDiagnostics {
    int iterations = 0;
    int fixed_point_steps = 0;
    double gradient_norm = 0.0;  // max_j |gradient_j| / N at the returned point
    bool converged = false;
};

struct RatioEstimate {
    Eigen::VectorXd d_hat;      // length k, d_hat(0) = 1
    Eigen::MatrixXd sigma_hat;  // (k-1) x (k-1), asymptotic covariance of sqrt(N)(d_hat - d)
    std::size_t N = 0;
    SolverDiagnostics solver;
    std::vector<Hyperparameter> skeleton;  // optional provenance
};

// Reverse-logistic log quasi-likelihood in eta = log d coordinates with
// eta_1 = 0; `eta_free` holds eta_2..eta_k. Gradient and Hessian are with
// respect to eta_free when requested.
double quasi_log_likelihood(const LogWeightMatrix& lw, const Eigen::VectorXd& eta_free,
                            Eigen::VectorXd* gradient = nullptr, Eigen::MatrixXd* hessian = nullptr);

// Maximizes the quasi-likelihood (damped Newton, fixed-point fallback).
// Fills d_hat, N and solver diagnostics; sigma_hat is left empty.
RatioEstimate estimate_d(const LogWeightMatrix& lw, const SolverOptions& opt = {});

// Sandwich estimate B^{-1} S B^{-1} mapped from eta to d coordinates.
Eigen::MatrixXd estimate_sigma(const LogWeightMatrix& lw, const Eigen::VectorXd& d_hat,
                               const SpectralConfig& cfg = {});

RatioEstimate estimate_ratios(const LogWeightMatrix& lw, const SpectralConfig& cfg = {},
                              const SolverOptions& opt = {});

nlohmann::json to_json(const RatioEstimate& r);
RatioEstimate ratio_estimate_from_json(const nlohmann::json& j);

}  // namespace hypersurf
