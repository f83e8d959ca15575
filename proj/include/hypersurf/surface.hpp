#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hypersurf/density_family.hpp"
#include "hypersurf/ratio_estimation.hpp"
#include "hypersurf/spectral.hpp"

namespace hypersurf {

// Everything stage 2 needs that does not depend on the grid point h. Built
// once from fresh chains and the stage-1 ratios; read-only afterwards.
struct Stage2Workspace {
    const DensityFamily* family = nullptr;  // must outlive the workspace
    std::vector<Hyperparameter> skeleton;
    SamplePool pool;
    LogWeightMatrix lw;
    RatioEstimate ratios;
    SpectralConfig spectral;

    // log sum_s a_s nu_{h_s}(theta_p) / d_s
    Eigen::VectorXd log_den;
    // Control variates Z^(j), j = 2..k: (nu_j/d_j - nu_1) / denominator. n x (k-1)
    Eigen::MatrixXd Z;
    // psi_j = a_j nu_j / (d_j^2 * denominator), j = 2..k. n x (k-1)
    Eigen::MatrixXd psi;
    // Per-chain sample means of psi, k x (k-1).
    Eigen::MatrixXd psi_chain_mean;
    Eigen::VectorXd Z_mean;

    // Least squares design [1, Z], factored once.
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> design;
    Eigen::Index design_rank = 0;
    bool design_degenerate = false;

    std::size_t n() const { return lw.size(); }
    std::size_t k() const { return lw.k(); }
    // q = n / N; zero when no stage-1 sample size is recorded.
    double q() const { return ratios.N ? static_cast<double>(n()) / static_cast<double>(ratios.N) : 0.0; }
};

// Throws SupportViolation when some stage-2 sample has zero mixture density.
Stage2Workspace prepare_workspace(const DensityFamily& family, const std::vector<Hyperparameter>& skeleton,
                                  SamplePool pool, RatioEstimate ratios, const SpectralConfig& spectral = {});

// Y_p = exp(shift) * y[p], with y in [0, 1] so that nothing overflows.
struct PointTerms {
    Hyperparameter h;
    double shift = kNegInf;
    Eigen::VectorXd y;
    Eigen::VectorXd log_nu;  // log nu_h(theta_p)

    bool vanishes() const { return shift == kNegInf; }
    double scale() const { return std::exp(shift); }
};

PointTerms point_terms(const Stage2Workspace& ws, const Hyperparameter& h);

double bf_hat(const Stage2Workspace& ws, const PointTerms& pt);
double bf_hat(const Stage2Workspace& ws, const Hyperparameter& h);

struct CvEstimate {
    double estimate = 0.0;
    Eigen::VectorXd beta;  // beta_2..beta_k
    bool degenerate = false;
};

CvEstimate bf_cv_hat(const Stage2Workspace& ws, const PointTerms& pt);
CvEstimate bf_cv_hat(const Stage2Workspace& ws, const Hyperparameter& h);

// Ratio estimate of E_{h,y} f for a function column of the pool. NaN (with a
// warning) when nu_h vanishes on every sample.
double pe_hat(const Stage2Workspace& ws, const PointTerms& pt, const Eigen::Ref<const Eigen::VectorXd>& f);
double pe_hat(const Stage2Workspace& ws, const Hyperparameter& h, const std::string& f_id);

// d B(h, h1) / dh. Throws UnsupportedOperation for families without gradients.
Eigen::VectorXd bf_gradient_hat(const Stage2Workspace& ws, const PointTerms& pt);
Eigen::VectorXd bf_gradient_hat(const Stage2Workspace& ws, const Hyperparameter& h);

struct GridAxis {
    double min = 0.0;
    double max = 0.0;
    double step = 1.0;

    std::vector<double> values() const;
};

struct Grid {
    std::vector<std::string> coord_names;
    std::vector<Hyperparameter> points;

    std::size_t size() const { return points.size(); }
};

// Cartesian product; the last axis varies fastest.
Grid make_product_grid(const std::vector<std::string>& names, const std::vector<GridAxis>& axes);

struct VarianceBreakdown {
    double stage1_term = 0.0;  // q * vec' Sigma vec
    double stage2_term = 0.0;
    double total = 0.0;
    double q = 0.0;
    double se = 0.0;  // sqrt(total / n)
};

struct SurfaceRecord {
    Hyperparameter h;
    double bf = 0.0;
    double bf_cv = 0.0;
    Eigen::VectorXd beta;
    bool cv_degenerate = false;
    std::vector<double> pe;  // one per requested function
    Eigen::VectorXd gradient;  // empty unless requested

    // Filled by the variance report.
    VarianceBreakdown var_bf;
    VarianceBreakdown var_bf_cv;
    std::vector<VarianceBreakdown> var_pe;
    bool has_variance = false;
    std::vector<std::string> warnings;
};

struct SurfaceOptions {
    std::vector<std::string> functions;
    bool gradient = false;
};

std::vector<SurfaceRecord> surface(const Stage2Workspace& ws, const Grid& grid, const SurfaceOptions& opt = {});

}  // namespace hypersurf
