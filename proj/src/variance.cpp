#include "hypersurf/variance.hpp"

#include <cmath>

#include "hypersurf/parallel.hpp"

namespace hypersurf {

namespace {

std::span<const double> chain_span(const Stage2Workspace& ws, const Eigen::VectorXd& v, std::size_t l) {
    return {v.data() + ws.lw.chain_begin(l), ws.lw.counts[l]};
}

double weighted_lrv(const Stage2Workspace& ws, const Eigen::VectorXd& v) {
    double s = 0.0;
    for (std::size_t l = 0; l < ws.k(); ++l)
        s += ws.lw.proportions(static_cast<Eigen::Index>(l)) * spectral_lrv(chain_span(ws, v, l), ws.spectral);
    return s;
}

}  // namespace

double tau_sq_hat(const Stage2Workspace& ws, const PointTerms& pt) {
    if (pt.vanishes()) return 0.0;
    const double s = pt.scale();
    return s * s * weighted_lrv(ws, pt.y);
}

double sigma_sq_hat(const Stage2Workspace& ws, const PointTerms& pt, const Eigen::VectorXd& beta) {
    if (pt.vanishes()) return 0.0;
    if (beta.size() != static_cast<Eigen::Index>(ws.k()) - 1) throw InvalidArgument("sigma_sq_hat: beta has wrong length");
    const double s = pt.scale();
    Eigen::VectorXd u = pt.y;
    if (beta.size() > 0) u.noalias() -= ws.Z * (beta / s);
    return s * s * weighted_lrv(ws, u);
}

GammaRho gamma_rho_hat(const Stage2Workspace& ws, const PointTerms& pt, const Eigen::Ref<const Eigen::VectorXd>& f) {
    GammaRho out;
    const double bt = pt.y.mean();
    if (pt.vanishes() || !(bt > 0)) {
        out.defined = false;
        out.rho = std::numeric_limits<double>::quiet_NaN();
        return out;
    }
    const Eigen::VectorXd fy = f.cwiseProduct(pt.y);
    double g11 = 0.0, g12 = 0.0, g22 = 0.0;
    for (std::size_t l = 0; l < ws.k(); ++l) {
        const double a = ws.lw.proportions(static_cast<Eigen::Index>(l));
        const auto x = chain_span(ws, fy, l);
        const auto y = chain_span(ws, pt.y, l);
        g11 += a * spectral_lrcross(x, x, ws.spectral);
        g12 += a * spectral_lrcross(x, y, ws.spectral);
        g22 += a * spectral_lrcross(y, y, ws.spectral);
    }
    const double I = pe_hat(ws, pt, f);
    // gradient of u/v at (I B, B) is (1/B, -I/B); the scale cancels
    double rho = ((g11 - 2.0 * I * g12) + I * I * g22) / (bt * bt);
    out.rho = std::max(rho, 0.0);
    const double s2 = pt.scale() * pt.scale();
    out.gamma << g11 * s2, g12 * s2, g12 * s2, g22 * s2;
    return out;
}

Eigen::VectorXd c_hat(const Stage2Workspace& ws, const PointTerms& pt) {
    if (pt.vanishes()) return Eigen::VectorXd::Zero(ws.psi.cols());
    return pt.scale() * (ws.psi.transpose() * pt.y) / static_cast<double>(ws.n());
}

Eigen::VectorXd w_hat(const Stage2Workspace& ws, const PointTerms& pt, const Eigen::VectorXd& beta) {
    const auto km1 = static_cast<Eigen::Index>(ws.k()) - 1;
    if (beta.size() != km1) throw InvalidArgument("w_hat: beta has wrong length");
    Eigen::VectorXd w = c_hat(ws, pt);
    for (Eigen::Index t = 0; t < km1; ++t) {
        double term3 = 0.0;
        for (Eigen::Index j = 0; j < km1; ++j)
            term3 += beta(j) * (ws.psi_chain_mean(0, t) - ws.psi_chain_mean(j + 1, t));
        w(t) += beta(t) / ws.ratios.d_hat(t + 1) + term3;
    }
    return w;
}

Eigen::VectorXd v_hat(const Stage2Workspace& ws, const PointTerms& pt, const Eigen::Ref<const Eigen::VectorXd>& f,
                      double pe) {
    const auto km1 = ws.psi.cols();
    Eigen::VectorXd v = Eigen::VectorXd::Zero(km1);
    const double den = pt.y.sum();
    if (pt.vanishes() || !(den > 0)) return v;
    for (Eigen::Index p = 0; p < pt.y.size(); ++p) {
        const double c = (f(p) - pe) * pt.y(p);
        if (c != 0.0) v += c * ws.psi.row(p).transpose();
    }
    return v / den;
}

VarianceBreakdown assemble_variance(const Eigen::VectorXd& vec, const Eigen::MatrixXd& sigma, double stage2, double q,
                                    std::size_t n) {
    VarianceBreakdown b;
    b.q = q;
    b.stage2_term = stage2;
    if (vec.size() > 0 && sigma.size() > 0) {
        if (sigma.rows() != vec.size() || sigma.cols() != vec.size())
            throw InvalidArgument("assemble_variance: Sigma does not match the sensitivity vector");
        b.stage1_term = std::max(0.0, q * vec.dot(sigma * vec));
    }
    b.total = b.stage1_term + b.stage2_term;
    b.se = n ? std::sqrt(b.total / static_cast<double>(n)) : std::numeric_limits<double>::quiet_NaN();
    return b;
}

void annotate_variance(const Stage2Workspace& ws, std::vector<SurfaceRecord>& records,
                       const std::vector<std::string>& functions) {
    std::vector<std::size_t> fidx;
    for (const auto& id : functions) fidx.push_back(ws.pool.function_index(id));
    const double q = ws.q();
    const Eigen::MatrixXd& sigma = ws.ratios.sigma_hat;
    parallel_for(records.size(), [&](std::size_t i) {
        SurfaceRecord& rec = records[i];
        const auto pt = point_terms(ws, rec.h);
        rec.var_bf = assemble_variance(c_hat(ws, pt), sigma, tau_sq_hat(ws, pt), q, ws.n());
        Eigen::VectorXd beta = rec.beta;
        if (beta.size() != static_cast<Eigen::Index>(ws.k()) - 1) beta = bf_cv_hat(ws, pt).beta;
        rec.var_bf_cv = assemble_variance(w_hat(ws, pt, beta), sigma, sigma_sq_hat(ws, pt, beta), q, ws.n());
        rec.var_pe.clear();
        for (std::size_t j = 0; j < fidx.size(); ++j) {
            const auto f = ws.pool.function_values.col(static_cast<Eigen::Index>(fidx[j]));
            const double pe = j < rec.pe.size() ? rec.pe[j] : pe_hat(ws, pt, f);
            const auto gr = gamma_rho_hat(ws, pt, f);
            if (!gr.defined) {
                rec.warnings.push_back("delta-method variance undefined for " + functions[j]);
                VarianceBreakdown nan;
                nan.q = q;
                nan.stage1_term = nan.stage2_term = nan.total = nan.se = std::numeric_limits<double>::quiet_NaN();
                rec.var_pe.push_back(nan);
                continue;
            }
            rec.var_pe.push_back(assemble_variance(v_hat(ws, pt, f, pe), sigma, gr.rho, q, ws.n()));
        }
        rec.has_variance = true;
    });
}

VarianceSurface variance_surface(const std::vector<SurfaceRecord>& records, EstimatorKind kind) {
    VarianceSurface vs;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (!r.has_variance) throw InvalidArgument("variance_surface: record without variance fields");
        vs.points.push_back(r.h);
        vs.breakdown.push_back(kind == EstimatorKind::bf ? r.var_bf : r.var_bf_cv);
        const double t = vs.breakdown.back().total;
        if (i == 0 || t > vs.max_total) {
            vs.max_total = t;
            vs.argmax = i;
        }
    }
    return vs;
}

VarianceSurface variance_surface(const Stage2Workspace& ws, const Grid& grid, EstimatorKind kind) {
    auto records = surface(ws, grid);
    annotate_variance(ws, records, {});
    return variance_surface(records, kind);
}

void PlanInputs::check() const {
    if (!(t1 > 0) || !(t2 >= 0) || !(g >= 0) || !(T > 0) || !(v1 > 0) || !(v2 > 0) || !std::isfinite(t2) ||
        !std::isfinite(g))
        throw InvalidArgument("plan inputs must be positive (t2 and g may be zero)");
}

double planned_variance(const PlanInputs& in, double q) {
    return (in.v1 + in.v2 / q) * ((q + 1.0) * in.t1 + q * in.g * in.t2) / in.T;
}

PlanResult q_opt(const PlanInputs& in, std::size_t curve_points) {
    in.check();
    PlanResult r;
    r.q_opt = std::sqrt(in.v2 * in.t1 / (in.v1 * (in.t1 + in.g * in.t2)));
    r.n = r.q_opt * in.T / ((r.q_opt + 1.0) * in.t1 + r.q_opt * in.g * in.t2);
    r.N = r.n / r.q_opt;
    r.V_opt = planned_variance(in, r.q_opt);
    for (std::size_t i = 0; i < curve_points; ++i) {
        const double e = curve_points > 1 ? -2.0 + 4.0 * static_cast<double>(i) / static_cast<double>(curve_points - 1) : 0.0;
        const double q = r.q_opt * std::pow(10.0, e);
        r.curve.emplace_back(q, planned_variance(in, q));
    }
    return r;
}

}  // namespace hypersurf
