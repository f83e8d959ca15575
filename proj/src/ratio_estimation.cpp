#include "hypersurf/ratio_estimation.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "hypersurf/parallel.hpp"

namespace hypersurf {

std::size_t LogWeightMatrix::chain_begin(std::size_t l) const {
    std::size_t b = 0;
    for (std::size_t i = 0; i < l; ++i) b += counts.at(i);
    return b;
}

void LogWeightMatrix::validate() const {
    if (k() == 0) throw InvalidArgument("log-weight matrix has no skeleton rows");
    if (counts.size() != k()) throw InvalidArgument("log-weight matrix: one chain per skeleton point required");
    if (std::accumulate(counts.begin(), counts.end(), std::size_t{0}) != size() || chain_of.size() != size())
        throw InvalidArgument("log-weight matrix: chain counts do not sum to the number of samples");
    for (std::size_t p = 0; p < size(); ++p) {
        const auto col = W.col(static_cast<Eigen::Index>(p));
        if (col.maxCoeff() == kNegInf)
            throw ConnectivityError("sample " + std::to_string(p) + " (chain " + std::to_string(chain_of[p] + 1) +
                                    ") has zero weight under every skeleton prior");
        if ((col.array() == std::numeric_limits<double>::infinity()).any())
            throw InvalidArgument("log weight +inf at sample " + std::to_string(p));
    }
}

LogWeightMatrix build_log_weight_matrix(const DensityFamily& family, const std::vector<Hyperparameter>& skeleton,
                                        const SamplePool& pool, bool validate) {
    if (skeleton.empty()) throw InvalidArgument("skeleton must contain at least one point");
    if (skeleton.size() != pool.num_chains())
        throw InvalidArgument("skeleton has " + std::to_string(skeleton.size()) + " points but " +
                              std::to_string(pool.num_chains()) + " chains were supplied");
    for (const auto& h : skeleton) family.check(h);
    LogWeightMatrix lw;
    const auto k = static_cast<Eigen::Index>(skeleton.size());
    const std::size_t M = pool.size();
    lw.W.resize(k, static_cast<Eigen::Index>(M));
    lw.chain_of = pool.chain_of;
    lw.counts = pool.counts;
    lw.proportions.resize(k);
    for (Eigen::Index s = 0; s < k; ++s)
        lw.proportions(s) = static_cast<double>(pool.counts[static_cast<std::size_t>(s)]) / static_cast<double>(M);
    parallel_for(num_blocks(M), [&](std::size_t b) {
        const std::size_t hi = std::min(M, (b + 1) * kReductionBlock);
        for (std::size_t p = b * kReductionBlock; p < hi; ++p) {
            const auto row = pool.feature_row(p);
            for (Eigen::Index s = 0; s < k; ++s) {
                double v;
                try {
                    v = family.log_weight(skeleton[static_cast<std::size_t>(s)], row);
                } catch (const std::exception& e) {
                    throw Error("log weight evaluation failed at skeleton " + std::to_string(s + 1) + ", sample " +
                                std::to_string(p) + ": " + e.what());
                }
                lw.W(s, static_cast<Eigen::Index>(p)) = v;
            }
        }
    });
    if (validate) lw.validate();
    return lw;
}

namespace {

struct Partial {
    double value = 0.0;
    Eigen::VectorXd grad;
    Eigen::MatrixXd hess;
};

// log A_s - eta_s for every s, with eta_1 = 0
Eigen::VectorXd offsets(const LogWeightMatrix& lw, const Eigen::VectorXd& eta_free) {
    const auto k = static_cast<Eigen::Index>(lw.k());
    Eigen::VectorXd off(k);
    for (Eigen::Index s = 0; s < k; ++s) off(s) = std::log(lw.proportions(s)) - (s == 0 ? 0.0 : eta_free(s - 1));
    return off;
}

// Membership probabilities p_s(theta_p) for all p; returns k x M.
Eigen::MatrixXd membership(const LogWeightMatrix& lw, const Eigen::VectorXd& off) {
    const auto k = static_cast<Eigen::Index>(lw.k());
    const std::size_t M = lw.size();
    Eigen::MatrixXd P(k, static_cast<Eigen::Index>(M));
    parallel_for(num_blocks(M), [&](std::size_t b) {
        const std::size_t hi = std::min(M, (b + 1) * kReductionBlock);
        Eigen::VectorXd c(k);
        for (std::size_t p = b * kReductionBlock; p < hi; ++p) {
            const auto pi = static_cast<Eigen::Index>(p);
            c = lw.W.col(pi) + off;
            const double mx = c.maxCoeff();
            c = (c.array() - mx).exp();
            P.col(pi) = c / c.sum();
        }
    });
    return P;
}

std::string list_chains(const std::vector<std::size_t>& chains) {
    std::ostringstream os;
    for (std::size_t i = 0; i < chains.size(); ++i) os << (i ? ", " : "") << chains[i] + 1;
    return os.str();
}

// Chains that cannot be linked to chain 1 through samples with non-negligible
// membership probability in another chain.
std::vector<std::size_t> disconnected_chains(const LogWeightMatrix& lw, const Eigen::VectorXd& off) {
    const std::size_t k = lw.k();
    const Eigen::MatrixXd P = membership(lw, off);
    std::vector<std::vector<char>> adj(k, std::vector<char>(k, 0));
    for (std::size_t p = 0; p < lw.size(); ++p) {
        const std::size_t l = lw.chain_of[p];
        for (std::size_t s = 0; s < k; ++s)
            if (s != l && P(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(p)) > 1e-12) adj[l][s] = adj[s][l] = 1;
    }
    std::vector<char> seen(k, 0);
    std::vector<std::size_t> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
        const std::size_t a = stack.back();
        stack.pop_back();
        for (std::size_t b = 0; b < k; ++b)
            if (adj[a][b] && !seen[b]) {
                seen[b] = 1;
                stack.push_back(b);
            }
    }
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < k; ++s)
        if (!seen[s]) out.push_back(s);
    return out;
}

}  // namespace

double quasi_log_likelihood(const LogWeightMatrix& lw, const Eigen::VectorXd& eta_free, Eigen::VectorXd* gradient,
                            Eigen::MatrixXd* hessian) {
    const auto k = static_cast<Eigen::Index>(lw.k());
    if (eta_free.size() != k - 1) throw InvalidArgument("quasi_log_likelihood: eta has wrong length");
    const Eigen::VectorXd off = offsets(lw, eta_free);
    const std::size_t M = lw.size();
    const std::size_t nb = num_blocks(M);
    const bool want_g = gradient || hessian;
    std::vector<Partial> parts(nb);
    parallel_for(nb, [&](std::size_t b) {
        Partial& part = parts[b];
        if (want_g) part.grad = Eigen::VectorXd::Zero(k);
        if (hessian) part.hess = Eigen::MatrixXd::Zero(k, k);
        Eigen::VectorXd c(k);
        const std::size_t hi = std::min(M, (b + 1) * kReductionBlock);
        for (std::size_t p = b * kReductionBlock; p < hi; ++p) {
            const auto pi = static_cast<Eigen::Index>(p);
            const auto l = static_cast<Eigen::Index>(lw.chain_of[p]);
            c = lw.W.col(pi) + off;
            const double mx = c.maxCoeff();
            c = (c.array() - mx).exp();
            const double tot = c.sum();
            part.value += lw.W(l, pi) + off(l) - (mx + std::log(tot));
            if (!want_g) continue;
            c /= tot;
            part.grad += c;
            part.grad(l) -= 1.0;
            if (hessian) {
                part.hess.diagonal() -= c;
                part.hess.noalias() += c * c.transpose();
            }
        }
    });
    double value = 0.0;
    Eigen::VectorXd g = Eigen::VectorXd::Zero(k);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(k, k);
    for (const auto& part : parts) {
        value += part.value;
        if (want_g) g += part.grad;
        if (hessian) H += part.hess;
    }
    if (gradient) *gradient = g.tail(k - 1);
    if (hessian) *hessian = H.bottomRightCorner(k - 1, k - 1);
    return value;
}

RatioEstimate estimate_d(const LogWeightMatrix& lw, const SolverOptions& opt) {
    lw.validate();
    RatioEstimate r;
    r.N = lw.size();
    const auto k = static_cast<Eigen::Index>(lw.k());
    if (k == 1) {
        r.d_hat = Eigen::VectorXd::Ones(1);
        r.sigma_hat.resize(0, 0);
        r.solver.converged = true;
        return r;
    }
    const double N = static_cast<double>(lw.size());
    Eigen::VectorXd eta = Eigen::VectorXd::Zero(k - 1);
    Eigen::VectorXd g;
    Eigen::MatrixXd H;
    double val = quasi_log_likelihood(lw, eta, &g, &H);
    auto gnorm = [&](const Eigen::VectorXd& v) { return v.cwiseAbs().maxCoeff() / N; };

    auto fixed_point_step = [&] {
        const Eigen::VectorXd off = offsets(lw, eta);
        const Eigen::MatrixXd P = membership(lw, off);
        // sum_p nu_j / sum_s A_s nu_s / d_s = d_j * sum_p p_j / A_j
        Eigen::VectorXd d(k);
        for (Eigen::Index j = 0; j < k; ++j) {
            const double dj = j == 0 ? 1.0 : std::exp(eta(j - 1));
            d(j) = dj * P.row(j).sum() / (lw.proportions(j) * N);
        }
        for (Eigen::Index j = 1; j < k; ++j) eta(j - 1) = std::log(d(j)) - std::log(d(0));
        ++r.solver.fixed_point_steps;
    };

    int it = 0;
    for (; it < opt.max_iterations; ++it) {
        if (gnorm(g) < opt.tolerance) break;
        bool accepted = false;
        const Eigen::MatrixXd B = -H;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(B);
        if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
            const Eigen::VectorXd step = ldlt.solve(g);
            if (step.allFinite()) {
                for (double t = 1.0; t > 1e-8; t *= 0.5) {
                    const Eigen::VectorXd cand = eta + t * step;
                    Eigen::VectorXd gc;
                    Eigen::MatrixXd Hc;
                    const double vc = quasi_log_likelihood(lw, cand, &gc, &Hc);
                    const bool up = vc > val;
                    const bool flat = vc >= val - 1e-12 * (1.0 + std::abs(val)) && gnorm(gc) < gnorm(g);
                    if (std::isfinite(vc) && (up || flat)) {
                        eta = cand;
                        val = vc;
                        g = gc;
                        H = Hc;
                        accepted = true;
                        break;
                    }
                }
            }
        }
        if (!accepted) {
            fixed_point_step();
            val = quasi_log_likelihood(lw, eta, &g, &H);
        }
    }
    r.solver.iterations = it;
    r.solver.gradient_norm = gnorm(g);
    r.solver.converged = r.solver.gradient_norm < opt.tolerance;

    const Eigen::VectorXd off = offsets(lw, eta);
    const auto lost = disconnected_chains(lw, off);
    if (!lost.empty())
        throw ConnectivityError("chains " + list_chains(lost) +
                                " do not overlap with the chain at the first skeleton point; ratios are not identified");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(-H, Eigen::EigenvaluesOnly);
    if (!(es.eigenvalues().minCoeff() > 1e-12 * es.eigenvalues().maxCoeff()))
        throw ConnectivityError("quasi-likelihood Hessian is singular at the optimum");
    if (!r.solver.converged)
        warn("ratio solver stopped after " + std::to_string(it) + " iterations with gradient norm " +
             std::to_string(r.solver.gradient_norm));

    r.d_hat.resize(k);
    r.d_hat(0) = 1.0;
    for (Eigen::Index j = 1; j < k; ++j) r.d_hat(j) = std::exp(eta(j - 1));
    return r;
}

Eigen::MatrixXd estimate_sigma(const LogWeightMatrix& lw, const Eigen::VectorXd& d_hat, const SpectralConfig& cfg) {
    const auto k = static_cast<Eigen::Index>(lw.k());
    if (d_hat.size() != k) throw InvalidArgument("estimate_sigma: d_hat has wrong length");
    if (k == 1) return Eigen::MatrixXd(0, 0);
    Eigen::VectorXd eta = d_hat.tail(k - 1).array().log();
    eta.array() -= std::log(d_hat(0));
    const Eigen::MatrixXd P = membership(lw, offsets(lw, eta));
    const double N = static_cast<double>(lw.size());

    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(k - 1, k - 1);
    for (std::size_t p = 0; p < lw.size(); ++p) {
        const Eigen::VectorXd pv = P.col(static_cast<Eigen::Index>(p)).tail(k - 1);
        B.diagonal() += pv;
        B.noalias() -= pv * pv.transpose();
    }
    B /= N;

    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(k - 1, k - 1);
    std::vector<Eigen::MatrixXd> per_chain(lw.k());
    parallel_for(lw.k(), [&](std::size_t l) {
        const std::size_t begin = lw.chain_begin(l);
        const auto n_l = static_cast<Eigen::Index>(lw.counts[l]);
        Eigen::MatrixXd score(n_l, k - 1);
        for (Eigen::Index i = 0; i < n_l; ++i) {
            const auto p = static_cast<Eigen::Index>(begin) + i;
            for (Eigen::Index j = 1; j < k; ++j)
                score(i, j - 1) = (static_cast<Eigen::Index>(l) == j ? 1.0 : 0.0) - P(j, p);
        }
        per_chain[l] = spectral_lrcov(score, cfg);
    });
    for (std::size_t l = 0; l < lw.k(); ++l) S += lw.proportions(static_cast<Eigen::Index>(l)) * per_chain[l];
    S = project_psd(S);

    Eigen::LLT<Eigen::MatrixXd> llt(B);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(B, Eigen::EigenvaluesOnly);
    if (llt.info() != Eigen::Success || !(es.eigenvalues().minCoeff() > 1e-12 * es.eigenvalues().maxCoeff()))
        throw ConnectivityError("membership information matrix is singular; skeleton chains do not overlap");
    const Eigen::MatrixXd Binv = llt.solve(Eigen::MatrixXd::Identity(k - 1, k - 1));
    Eigen::MatrixXd sigma_eta = Binv * S * Binv;
    const Eigen::VectorXd dd = d_hat.tail(k - 1);
    Eigen::MatrixXd sigma = dd.asDiagonal() * sigma_eta * dd.asDiagonal();
    return 0.5 * (sigma + sigma.transpose());
}

RatioEstimate estimate_ratios(const LogWeightMatrix& lw, const SpectralConfig& cfg, const SolverOptions& opt) {
    RatioEstimate r = estimate_d(lw, opt);
    r.sigma_hat = estimate_sigma(lw, r.d_hat, cfg);
    return r;
}

nlohmann::json to_json(const RatioEstimate& r) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["d_hat"] = std::vector<double>(r.d_hat.data(), r.d_hat.data() + r.d_hat.size());
    auto rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < r.sigma_hat.rows(); ++i) {
        std::vector<double> row(static_cast<std::size_t>(r.sigma_hat.cols()));
        for (Eigen::Index c = 0; c < r.sigma_hat.cols(); ++c) row[static_cast<std::size_t>(c)] = r.sigma_hat(i, c);
        rows.push_back(row);
    }
    j["sigma_hat"] = rows;
    j["N"] = r.N;
    j["solver"] = {{"iterations", r.solver.iterations},
                   {"fixed_point_steps", r.solver.fixed_point_steps},
                   {"gradient_norm", r.solver.gradient_norm},
                   {"converged", r.solver.converged}};
    auto sk = nlohmann::json::array();
    for (const auto& h : r.skeleton) sk.push_back(h.coords);
    j["skeleton"] = sk;
    return j;
}

RatioEstimate ratio_estimate_from_json(const nlohmann::json& j) {
    if (j.contains("schema_version") && j["schema_version"].get<int>() != 1)
        throw InvalidArgument("ratio estimate has unsupported schema_version " + j["schema_version"].dump());
    RatioEstimate r;
    const auto d = j.at("d_hat").get<std::vector<double>>();
    r.d_hat = Eigen::Map<const Eigen::VectorXd>(d.data(), static_cast<Eigen::Index>(d.size()));
    const auto& rows = j.at("sigma_hat");
    const auto n = static_cast<Eigen::Index>(rows.size());
    r.sigma_hat.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto row = rows.at(static_cast<std::size_t>(i)).get<std::vector<double>>();
        if (static_cast<Eigen::Index>(row.size()) != n) throw InvalidArgument("sigma_hat is not square");
        for (Eigen::Index c = 0; c < n; ++c) r.sigma_hat(i, c) = row[static_cast<std::size_t>(c)];
    }
    if (n != r.d_hat.size() - 1) throw InvalidArgument("sigma_hat dimension does not match d_hat");
    r.N = j.at("N").get<std::size_t>();
    if (j.contains("solver")) {
        const auto& s = j["solver"];
        r.solver.iterations = s.value("iterations", 0);
        r.solver.fixed_point_steps = s.value("fixed_point_steps", 0);
        r.solver.gradient_norm = s.value("gradient_norm", 0.0);
        r.solver.converged = s.value("converged", false);
    }
    if (j.contains("skeleton"))
        for (const auto& h : j["skeleton"]) r.skeleton.emplace_back(h.get<std::vector<double>>());
    return r;
}

}  // namespace hypersurf
