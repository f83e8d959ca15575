#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hypersurf/surface.hpp"

namespace hypersurf {

// Stage-2 long-run variance of the plain estimator: sum_l a_l lrv(Y_l).
double tau_sq_hat(const Stage2Workspace& ws, const PointTerms& pt);

// Same on U = Y - Z beta; beta as returned by bf_cv_hat.
double sigma_sq_hat(const Stage2Workspace& ws, const PointTerms& pt, const Eigen::VectorXd& beta);

struct GammaRho {
    Eigen::Matrix2d gamma = Eigen::Matrix2d::Zero();  // long-run covariance of (f Y, Y)
    double rho = 0.0;
    bool defined = true;  // false when the Bayes factor estimate is 0
};

GammaRho gamma_rho_hat(const Stage2Workspace& ws, const PointTerms& pt, const Eigen::Ref<const Eigen::VectorXd>& f);

// Sensitivities of each estimator to d_2..d_k.
Eigen::VectorXd c_hat(const Stage2Workspace& ws, const PointTerms& pt);
Eigen::VectorXd w_hat(const Stage2Workspace& ws, const PointTerms& pt, const Eigen::VectorXd& beta);
Eigen::VectorXd v_hat(const Stage2Workspace& ws, const PointTerms& pt, const Eigen::Ref<const Eigen::VectorXd>& f,
                      double pe);

// total = q vec' Sigma vec + stage2, se = sqrt(total / n).
VarianceBreakdown assemble_variance(const Eigen::VectorXd& vec, const Eigen::MatrixXd& sigma, double stage2, double q,
                                    std::size_t n);

// Fills the variance fields of records produced by surface() with the same
// workspace and function list.
void annotate_variance(const Stage2Workspace& ws, std::vector<SurfaceRecord>& records,
                       const std::vector<std::string>& functions);

enum class EstimatorKind { bf, bf_cv };

struct VarianceSurface {
    std::vector<Hyperparameter> points;
    std::vector<VarianceBreakdown> breakdown;
    std::size_t argmax = 0;
    double max_total = 0.0;
};

VarianceSurface variance_surface(const Stage2Workspace& ws, const Grid& grid, EstimatorKind kind = EstimatorKind::bf_cv);
VarianceSurface variance_surface(const std::vector<SurfaceRecord>& records, EstimatorKind kind = EstimatorKind::bf_cv);

struct PlanInputs {
    double t1 = 0.0;  // seconds per chain step
    double t2 = 0.0;  // seconds per grid-term evaluation
    double g = 0.0;   // number of grid points
    double T = 0.0;   // time budget in seconds
    double v1 = 0.0;  // stage-1 variance component (coefficient of q)
    double v2 = 0.0;  // stage-2 variance component

    void check() const;
};

struct PlanResult {
    double q_opt = 0.0;
    double n = 0.0;
    double N = 0.0;
    double V_opt = 0.0;
    std::vector<std::pair<double, double>> curve;  // (q, V(q))
};

double planned_variance(const PlanInputs& in, double q);
PlanResult q_opt(const PlanInputs& in, std::size_t curve_points = 41);

}  // namespace hypersurf
