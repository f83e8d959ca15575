#pragma once

#include <cstddef>
#include <span>

#include <Eigen/Dense>

namespace hypersurf {

// Bartlett lag-window long-run (co)variance estimation. One rule is shared
// by every variance estimate in the library so the pieces stay comparable.
struct SpectralConfig {
    double truncation_constant = 1.5;
    std::size_t min_length = 10;

    // L = floor(c * n^(1/3)), at least 1.
    std::size_t truncation(std::size_t n) const;
};

// gamma_0 + 2 * sum_{k=1..L} (1 - k/(L+1)) gamma_k with autocovariances
// centered at the series mean (divisor n); clipped at 0.
double spectral_lrv(std::span<const double> series, const SpectralConfig& cfg = {});

// Long-run cross-covariance of two equally long series:
// c_xy(0) + sum_k w_k (c_xy(k) + c_yx(k)). Evaluated with the same scalar
// operations for every argument pair, so cross(x, x) == cross(x, y) bitwise
// whenever x == y.
double spectral_lrcross(std::span<const double> x, std::span<const double> y, const SpectralConfig& cfg = {});

// Matrix version for an n x p block of series (one column per coordinate).
// Symmetric by construction.
Eigen::MatrixXd spectral_lrcov(const Eigen::Ref<const Eigen::MatrixXd>& series,
                               const SpectralConfig& cfg = {});

// Eigenvalue clipping at zero.
Eigen::MatrixXd project_psd(const Eigen::MatrixXd& m);

}  // namespace hypersurf
