#include "hypersurf/spectral.hpp"

#include <algorithm>
#include <cmath>

#include "hypersurf/common.hpp"

namespace hypersurf {

std::size_t SpectralConfig::truncation(std::size_t n) const {
    const auto L = static_cast<std::size_t>(std::floor(truncation_constant * std::cbrt(static_cast<double>(n))));
    return std::max<std::size_t>(1, std::min(L, n > 1 ? n - 1 : 1));
}

namespace {
std::vector<double> centered(std::span<const double> x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    std::vector<double> c(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) c[i] = x[i] - mean;
    return c;
}
}  // namespace

double spectral_lrcross(std::span<const double> x, std::span<const double> y, const SpectralConfig& cfg) {
    const std::size_t n = x.size();
    if (y.size() != n) throw InvalidArgument("spectral_lrcross: series lengths differ");
    if (n < cfg.min_length)
        throw InvalidArgument("series too short for spectral variance (length " + std::to_string(n) + ")");
    const std::vector<double> cx = centered(x);
    const std::vector<double> cy = centered(y);
    const auto nd = static_cast<double>(n);
    auto lagged = [&](const std::vector<double>& a, const std::vector<double>& b, std::size_t k) {
        double s = 0.0;
        for (std::size_t t = k; t < n; ++t) s += a[t] * b[t - k];
        return s / nd;
    };
    const std::size_t L = cfg.truncation(n);
    double total = lagged(cx, cy, 0);
    for (std::size_t k = 1; k <= L; ++k) {
        const double wk = 1.0 - static_cast<double>(k) / static_cast<double>(L + 1);
        total += wk * (lagged(cx, cy, k) + lagged(cy, cx, k));
    }
    return total;
}

double spectral_lrv(std::span<const double> x, const SpectralConfig& cfg) {
    return std::max(spectral_lrcross(x, x, cfg), 0.0);
}

Eigen::MatrixXd spectral_lrcov(const Eigen::Ref<const Eigen::MatrixXd>& series, const SpectralConfig& cfg) {
    const auto n = static_cast<std::size_t>(series.rows());
    if (n < cfg.min_length)
        throw InvalidArgument("series too short for spectral variance (length " + std::to_string(n) + ")");
    const Eigen::MatrixXd c = series.rowwise() - series.colwise().mean();
    const auto nd = static_cast<double>(n);
    const std::size_t L = cfg.truncation(n);
    Eigen::MatrixXd out = (c.transpose() * c) / nd;
    for (std::size_t k = 1; k <= L; ++k) {
        const auto len = static_cast<Eigen::Index>(n - k);
        // lag_k(i, j) = (1/n) sum_t c(t+k, i) c(t, j)
        Eigen::MatrixXd lag = c.bottomRows(len).transpose() * c.topRows(len) / nd;
        const double wk = 1.0 - static_cast<double>(k) / static_cast<double>(L + 1);
        out += wk * (lag + lag.transpose());
    }
    return 0.5 * (out + out.transpose());
}

Eigen::MatrixXd project_psd(const Eigen::MatrixXd& m) {
    if (m.size() == 0) return m;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
    Eigen::MatrixXd out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

}  // namespace hypersurf
