#include "hypersurf/surface.hpp"

#include <algorithm>
#include <cmath>

#include "hypersurf/parallel.hpp"

namespace hypersurf {

Stage2Workspace prepare_workspace(const DensityFamily& family, const std::vector<Hyperparameter>& skeleton,
                                  SamplePool pool, RatioEstimate ratios, const SpectralConfig& spectral) {
    const std::size_t k = skeleton.size();
    if (ratios.d_hat.size() != static_cast<Eigen::Index>(k))
        throw InvalidArgument("stage-1 ratio estimate has " + std::to_string(ratios.d_hat.size()) +
                              " entries but the skeleton has " + std::to_string(k) + " points");
    if (!(ratios.d_hat.array() > 0).all() || !ratios.d_hat.allFinite())
        throw InvalidArgument("stage-1 ratio estimate must be finite and strictly positive");
    Stage2Workspace ws;
    ws.family = &family;
    ws.skeleton = skeleton;
    ws.spectral = spectral;
    ws.lw = build_log_weight_matrix(family, skeleton, pool, false);
    ws.pool = std::move(pool);
    ws.ratios = std::move(ratios);

    const auto K = static_cast<Eigen::Index>(k);
    const std::size_t n = ws.n();
    const auto N = static_cast<Eigen::Index>(n);
    Eigen::VectorXd log_d = ws.ratios.d_hat.array().log();
    Eigen::VectorXd off = ws.lw.proportions.array().log() - log_d.array();
    ws.log_den.resize(N);
    ws.Z.resize(N, K - 1);
    ws.psi.resize(N, K - 1);
    parallel_for(num_blocks(n), [&](std::size_t b) {
        const std::size_t hi = std::min(n, (b + 1) * kReductionBlock);
        std::vector<double> c(k);
        for (std::size_t p = b * kReductionBlock; p < hi; ++p) {
            const auto pi = static_cast<Eigen::Index>(p);
            for (Eigen::Index s = 0; s < K; ++s) c[static_cast<std::size_t>(s)] = ws.lw.W(s, pi) + off(s);
            const double ld = log_sum_exp(c);
            if (ld == kNegInf)
                throw SupportViolation("stage-2 sample " + std::to_string(p) + " (chain " +
                                       std::to_string(ws.lw.chain_of[p] + 1) +
                                       ") has zero density under every skeleton prior");
            ws.log_den(pi) = ld;
            const double r1 = std::exp(ws.lw.W(0, pi) - ld);
            for (Eigen::Index j = 1; j < K; ++j) {
                const double rj = std::exp(ws.lw.W(j, pi) - log_d(j) - ld);
                ws.Z(pi, j - 1) = rj - r1;
                ws.psi(pi, j - 1) = ws.lw.proportions(j) * rj / ws.ratios.d_hat(j);
            }
        }
    });

    ws.psi_chain_mean.resize(K, K - 1);
    for (std::size_t l = 0; l < k; ++l) {
        const auto b = static_cast<Eigen::Index>(ws.lw.chain_begin(l));
        const auto len = static_cast<Eigen::Index>(ws.lw.counts[l]);
        ws.psi_chain_mean.row(static_cast<Eigen::Index>(l)) = ws.psi.middleRows(b, len).colwise().mean();
    }
    ws.Z_mean = ws.Z.colwise().mean().transpose();

    Eigen::MatrixXd X(N, K);
    X.col(0).setOnes();
    X.rightCols(K - 1) = ws.Z;
    ws.design.setThreshold(1e-10);
    ws.design.compute(X);
    ws.design_rank = ws.design.rank();
    ws.design_degenerate = ws.design_rank < K;
    if (ws.design_degenerate)
        warn("control-variate design has rank " + std::to_string(ws.design_rank) + " < " + std::to_string(K) +
             "; using the minimum-norm least-squares coefficients");
    return ws;
}

PointTerms point_terms(const Stage2Workspace& ws, const Hyperparameter& h) {
    ws.family->check(h);
    PointTerms pt;
    pt.h = h;
    const std::size_t n = ws.n();
    const auto N = static_cast<Eigen::Index>(n);
    pt.log_nu.resize(N);
    Eigen::VectorXd r(N);
    for (std::size_t p = 0; p < n; ++p) {
        const auto pi = static_cast<Eigen::Index>(p);
        pt.log_nu(pi) = ws.family->log_weight(h, ws.pool.feature_row(p));
        r(pi) = pt.log_nu(pi) - ws.log_den(pi);
    }
    pt.shift = n ? r.maxCoeff() : kNegInf;
    if (pt.vanishes()) {
        pt.y = Eigen::VectorXd::Zero(N);
        return pt;
    }
    pt.y = (r.array() - pt.shift).exp();
    return pt;
}

double bf_hat(const Stage2Workspace&, const PointTerms& pt) {
    if (pt.vanishes()) return 0.0;
    return pt.scale() * pt.y.mean();
}

double bf_hat(const Stage2Workspace& ws, const Hyperparameter& h) {
    const auto pt = point_terms(ws, h);
    if (pt.vanishes()) warn("prior at " + h.str() + " vanishes on every stage-2 sample; Bayes factor estimate is 0");
    return bf_hat(ws, pt);
}

CvEstimate bf_cv_hat(const Stage2Workspace& ws, const PointTerms& pt) {
    CvEstimate cv;
    const auto K = static_cast<Eigen::Index>(ws.k());
    cv.degenerate = ws.design_degenerate;
    cv.beta = Eigen::VectorXd::Zero(K - 1);
    if (pt.vanishes()) return cv;
    const double ybar = pt.y.mean();
    if (K == 1) {
        cv.estimate = pt.scale() * ybar;
        return cv;
    }
    const Eigen::VectorXd coef = ws.design.solve(pt.y);
    const Eigen::VectorXd b = coef.tail(K - 1);
    cv.estimate = pt.scale() * (ybar - b.dot(ws.Z_mean));
    cv.beta = pt.scale() * b;
    return cv;
}

CvEstimate bf_cv_hat(const Stage2Workspace& ws, const Hyperparameter& h) { return bf_cv_hat(ws, point_terms(ws, h)); }

double pe_hat(const Stage2Workspace& ws, const PointTerms& pt, const Eigen::Ref<const Eigen::VectorXd>& f) {
    if (static_cast<std::size_t>(f.size()) != ws.n()) throw InvalidArgument("pe_hat: function column has wrong length");
    double pos = 0.0, neg = 0.0, den = 0.0;
    for (Eigen::Index p = 0; p < f.size(); ++p) {
        const double y = pt.y(p);
        den += y;
        if (f(p) > 0)
            pos += f(p) * y;
        else if (f(p) < 0)
            neg += -f(p) * y;
    }
    if (!(den > 0)) return std::numeric_limits<double>::quiet_NaN();
    return (pos - neg) / den;
}

double pe_hat(const Stage2Workspace& ws, const Hyperparameter& h, const std::string& f_id) {
    const auto pt = point_terms(ws, h);
    const double v = pe_hat(ws, pt, ws.pool.function_column(f_id));
    if (std::isnan(v)) warn("posterior expectation of " + f_id + " undefined at " + h.str() + ": prior vanishes on every sample");
    return v;
}

Eigen::VectorXd bf_gradient_hat(const Stage2Workspace& ws, const PointTerms& pt) {
    if (!ws.family->has_gradient())
        throw UnsupportedOperation(ws.family->name() + " family provides no prior-weight gradient");
    const std::size_t dim = ws.family->hyper_dim();
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
    if (pt.vanishes()) return acc;
    std::vector<double> g(dim);
    for (std::size_t p = 0; p < ws.n(); ++p) {
        const double y = pt.y(static_cast<Eigen::Index>(p));
        if (y == 0.0) continue;
        ws.family->grad_log_weight(pt.h, ws.pool.feature_row(p), g);
        for (std::size_t c = 0; c < dim; ++c) acc(static_cast<Eigen::Index>(c)) += g[c] * y;
    }
    return pt.scale() * acc / static_cast<double>(ws.n());
}

Eigen::VectorXd bf_gradient_hat(const Stage2Workspace& ws, const Hyperparameter& h) {
    return bf_gradient_hat(ws, point_terms(ws, h));
}

std::vector<double> GridAxis::values() const {
    if (!std::isfinite(min) || !std::isfinite(max) || !(step > 0) || max < min)
        throw InvalidArgument("grid axis needs finite min <= max and a positive step");
    const auto count = static_cast<std::size_t>(std::floor((max - min) / step + 1e-9)) + 1;
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = std::round((min + static_cast<double>(i) * step) * 1e12) / 1e12;
    return out;
}

Grid make_product_grid(const std::vector<std::string>& names, const std::vector<GridAxis>& axes) {
    if (names.size() != axes.size()) throw InvalidArgument("grid: one name per axis required");
    Grid grid;
    grid.coord_names = names;
    std::vector<std::vector<double>> vals;
    for (const auto& a : axes) vals.push_back(a.values());
    std::vector<double> cur(axes.size());
    auto rec = [&](auto&& self, std::size_t d) -> void {
        if (d == axes.size()) {
            grid.points.emplace_back(cur);
            return;
        }
        for (double v : vals[d]) {
            cur[d] = v;
            self(self, d + 1);
        }
    };
    if (!axes.empty()) rec(rec, 0);
    return grid;
}

std::vector<SurfaceRecord> surface(const Stage2Workspace& ws, const Grid& grid, const SurfaceOptions& opt) {
    std::vector<std::size_t> fidx;
    for (const auto& id : opt.functions) fidx.push_back(ws.pool.function_index(id));
    std::vector<SurfaceRecord> out(grid.size());
    parallel_for(grid.size(), [&](std::size_t i) {
        SurfaceRecord& rec = out[i];
        const auto pt = point_terms(ws, grid.points[i]);
        rec.h = pt.h;
        if (pt.vanishes()) rec.warnings.push_back("prior vanishes on every stage-2 sample");
        rec.bf = bf_hat(ws, pt);
        const auto cv = bf_cv_hat(ws, pt);
        rec.bf_cv = cv.estimate;
        rec.beta = cv.beta;
        rec.cv_degenerate = cv.degenerate;
        for (std::size_t j = 0; j < fidx.size(); ++j)
            rec.pe.push_back(pe_hat(ws, pt, ws.pool.function_values.col(static_cast<Eigen::Index>(fidx[j]))));
        if (opt.gradient) rec.gradient = bf_gradient_hat(ws, pt);
    });
    std::size_t nwarn = 0;
    for (const auto& r : out) nwarn += r.warnings.empty() ? 0 : 1;
    if (nwarn) warn(std::to_string(nwarn) + " of " + std::to_string(out.size()) + " grid points raised support warnings");
    return out;
}

}  // namespace hypersurf
