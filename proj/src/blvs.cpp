#include "hypersurf/blvs.hpp"

#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace hypersurf::blvs {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') {
            quoted = !quoted;
        } else if (ch == ',' && !quoted) {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    for (auto& s : out) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        s = (b == std::string::npos) ? std::string{} : s.substr(b, e - b + 1);
    }
    return out;
}

double parse_number(const std::string& s, std::size_t row, const std::string& col) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size() || !std::isfinite(v))
        throw DataError("cannot parse value '" + s + "' in column '" + col + "' at data row " + std::to_string(row + 1));
    return v;
}

std::vector<Eigen::Index> mask_indices(ModelMask gamma, std::size_t q) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < q; ++i)
        if (gamma >> i & 1ULL) idx.push_back(static_cast<Eigen::Index>(i));
    return idx;
}

// Cholesky factor of X_gamma' X_gamma with a relative pivot check.
struct Factor {
    Eigen::MatrixXd L;
    Eigen::VectorXd b;  // L^{-1} X_gamma' y
};

std::optional<Factor> factor(const Eigen::MatrixXd& xtx, const Eigen::VectorXd& xty, const std::vector<Eigen::Index>& idx) {
    const auto k = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd A(k, k);
    Eigen::VectorXd r(k);
    for (Eigen::Index a = 0; a < k; ++a) {
        r(a) = xty(idx[a]);
        for (Eigen::Index c = 0; c < k; ++c) A(a, c) = xtx(idx[a], idx[c]);
    }
    Factor f;
    f.L = Eigen::MatrixXd::Zero(k, k);
    for (Eigen::Index j = 0; j < k; ++j) {
        double d = A(j, j) - f.L.row(j).head(j).squaredNorm();
        if (!(A(j, j) > 0) || !(d > 1e-10 * A(j, j))) return std::nullopt;
        const double ljj = std::sqrt(d);
        f.L(j, j) = ljj;
        for (Eigen::Index i = j + 1; i < k; ++i)
            f.L(i, j) = (A(i, j) - f.L.row(i).head(j).dot(f.L.row(j).head(j))) / ljj;
    }
    f.b = f.L.triangularView<Eigen::Lower>().solve(r);
    return f;
}

}  // namespace

Dataset ingest_csv(const std::string& path, const std::string& response_name,
                   const std::vector<std::string>& binary_names) {
    std::ifstream in(path);
    if (!in) throw InputNotFound("cannot open dataset file '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError("dataset file '" + path + "' is empty");
    const auto header = split_csv_line(line);
    const std::set<std::string> binary(binary_names.begin(), binary_names.end());
    for (const auto& b : binary)
        if (std::find(header.begin(), header.end(), b) == header.end())
            throw DataError("column '" + b + "' not found in '" + path + "'");
    const auto resp_it = std::find(header.begin(), header.end(), response_name);
    if (resp_it == header.end()) throw DataError("response column '" + response_name + "' not found in '" + path + "'");
    const auto resp_col = static_cast<std::size_t>(resp_it - header.begin());

    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw DataError("row " + std::to_string(rows.size() + 1) + " of '" + path + "' has " +
                            std::to_string(cells.size()) + " fields, expected " + std::to_string(header.size()));
        std::vector<double> vals;
        for (std::size_t c = 0; c < cells.size(); ++c) vals.push_back(parse_number(cells[c], rows.size(), header[c]));
        rows.push_back(std::move(vals));
    }
    if (rows.empty()) throw DataError("dataset file '" + path + "' has no data rows");

    Dataset ds;
    ds.response_name = response_name;
    const auto m = static_cast<Eigen::Index>(rows.size());
    const auto q = static_cast<Eigen::Index>(header.size() - 1);
    ds.y.resize(m);
    ds.X.resize(m, q);
    auto transform = [&](double v, std::size_t r, const std::string& col, bool take_log) {
        if (!take_log) return v;
        if (!(v > 0))
            throw DataError("non-positive value " + std::to_string(v) + " in log-transformed column '" + col +
                            "' at data row " + std::to_string(r + 1));
        return std::log(v);
    };
    Eigen::Index j = 0;
    for (std::size_t c = 0; c < header.size(); ++c) {
        const bool take_log = binary.count(header[c]) == 0;
        if (c == resp_col) {
            for (Eigen::Index r = 0; r < m; ++r) ds.y(r) = transform(rows[r][c], r, header[c], take_log);
            continue;
        }
        ds.names.push_back(header[c]);
        ds.log_transformed.push_back(take_log);
        for (Eigen::Index r = 0; r < m; ++r) ds.X(r, j) = transform(rows[r][c], r, header[c], take_log);
        ++j;
    }
    for (Eigen::Index c = 0; c < q; ++c)
        if (ds.X.col(c).maxCoeff() == ds.X.col(c).minCoeff())
            throw DataError("predictor '" + ds.names[c] + "' is constant");
    return ds;
}

void BlvsHyper::check() const {
    if (!(w > 0.0 && w < 1.0) || !(g > 0.0) || !std::isfinite(g))
        throw InvalidHyperparameter("blvs hyperparameter requires w in (0,1) and g > 0, got (" + std::to_string(w) +
                                    ", " + std::to_string(g) + ")");
}

BlvsHyper BlvsHyper::from(const Hyperparameter& h) {
    if (h.dim() != 2) throw InvalidHyperparameter("blvs hyperparameter must be (w, g), got " + h.str());
    BlvsHyper b{h.coords[0], h.coords[1]};
    b.check();
    return b;
}

Blvs::Blvs(Dataset data) : data_(std::move(data)) {
    if (data_.q() == 0 || data_.q() > 64) throw InvalidArgument("blvs: need 1..64 predictors");
    if (data_.m() < 3) throw InvalidArgument("blvs: need at least 3 observations");
    ybar_ = data_.y.mean();
    yc_ = data_.y.array() - ybar_;
    Xc_ = data_.X.rowwise() - data_.X.colwise().mean();
    tss_ = yc_.squaredNorm();
    if (!(tss_ > 0)) throw DataError("response is constant");
    xtx_ = Xc_.transpose() * Xc_;
    xty_ = Xc_.transpose() * yc_;
}

void Blvs::check(const Hyperparameter& h) const { (void)BlvsHyper::from(h); }

double Blvs::log_weight(const Hyperparameter& h, std::span<const double> f) const {
    const double w = h.coords[0], g = h.coords[1];
    const double qg = f[0];
    const double qd = static_cast<double>(q());
    return qg * std::log(w) + (qd - qg) * std::log1p(-w) - 0.5 * qg * std::log(g) - f[1] / (2.0 * g);
}

void Blvs::grad_log_weight(const Hyperparameter& h, std::span<const double> f, std::span<double> out) const {
    const double w = h.coords[0], g = h.coords[1];
    const double qg = f[0];
    const double qd = static_cast<double>(q());
    out[0] = qg / w - (qd - qg) / (1.0 - w);
    out[1] = -qg / (2.0 * g) + f[1] / (2.0 * g * g);
}

void Blvs::features(const ModelState& s, std::span<double> out) const {
    count_state_evaluation();
    const auto idx = mask_indices(s.gamma, q());
    if (static_cast<Eigen::Index>(idx.size()) != s.beta.size())
        throw InvalidArgument("model state: beta length does not match gamma");
    Eigen::VectorXd fitted = Eigen::VectorXd::Zero(Xc_.rows());
    for (std::size_t a = 0; a < idx.size(); ++a) fitted += Xc_.col(idx[a]) * s.beta(static_cast<Eigen::Index>(a));
    out[0] = static_cast<double>(idx.size());
    out[1] = fitted.squaredNorm() / (s.sigma * s.sigma);
}

double Blvs::log_prior_weight_blvs(const BlvsHyper& h, const ModelState& s) const {
    return log_prior_weight(h.to_hyper(), s);
}

Eigen::Vector2d Blvs::grad_log_prior_weight_blvs(const BlvsHyper& h, const ModelState& s) const {
    h.check();
    double f[2];
    features(s, f);
    Eigen::Vector2d g;
    grad_log_weight(h.to_hyper(), f, {g.data(), 2});
    return g;
}

ModelFit Blvs::fit(ModelMask gamma) const {
    const auto idx = mask_indices(gamma, q());
    ModelFit out;
    out.size = static_cast<int>(idx.size());
    if (idx.empty()) return out;
    if (idx.size() + 2 > m()) throw SingularDesign("model with " + std::to_string(idx.size()) + " predictors exceeds m - 2");
    const auto f = factor(xtx_, xty_, idx);
    if (!f) throw SingularDesign("design matrix for model " + std::to_string(gamma) + " is rank deficient");
    const double rss = std::max(tss_ - f->b.squaredNorm(), 0.0);
    out.rss_ratio = rss / tss_;
    return out;
}

double Blvs::log_marginal(const ModelFit& fit, double g, std::size_t m) {
    const double md = static_cast<double>(m);
    return 0.5 * (md - 1.0 - fit.size) * std::log1p(g) - 0.5 * (md - 1.0) * std::log1p(g * fit.rss_ratio);
}

double Blvs::log_marginal(ModelMask gamma, double g) const { return log_marginal(fit(gamma), g, m()); }

double Blvs::log_model_prior(ModelMask gamma, double w) const {
    const double qg = popcount(gamma);
    return qg * std::log(w) + (static_cast<double>(q()) - qg) * std::log1p(-w);
}

double Blvs::conditional_inclusion_prob(ModelMask gamma, std::size_t i, const BlvsHyper& h) const {
    const ModelMask with = gamma | (1ULL << i);
    const ModelMask without = gamma & ~(1ULL << i);
    auto lp = [&](ModelMask mk) {
        try {
            return log_model_prior(mk, h.w) + log_marginal(mk, h.g);
        } catch (const SingularDesign&) {
            return kNegInf;
        }
    };
    const double l1 = lp(with), l0 = lp(without);
    if (l1 == kNegInf && l0 == kNegInf) throw SingularDesign("both neighbours of model are rank deficient");
    if (l1 == kNegInf) return 0.0;
    if (l0 == kNegInf) return 1.0;
    return 1.0 / (1.0 + std::exp(l0 - l1));
}

std::vector<ModelState> Blvs::sample_posterior(const ChainSpec& spec) const {
    return gibbs_run(BlvsHyper::from(spec.h), spec);
}

std::vector<ModelState> Blvs::gibbs_run(const BlvsHyper& h, const ChainSpec& spec) const {
    spec.validate();
    h.check();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> norm(0.0, 1.0);
    std::gamma_distribution<double> gam(0.5 * (static_cast<double>(m()) - 1.0), 1.0);
    std::set<ModelMask> warned;

    auto log_post = [&](ModelMask mk) {
        try {
            return log_model_prior(mk, h.w) + log_marginal(mk, h.g);
        } catch (const SingularDesign&) {
            if (warned.insert(mk).second)
                warn("gibbs: model " + std::to_string(mk) + " has a rank-deficient design; treated as prior probability zero");
            return kNegInf;
        }
    };

    ModelMask gamma = 0;
    double cur = log_post(gamma);
    const double shrink = h.g / (1.0 + h.g);
    std::vector<ModelState> out;
    out.reserve(spec.length);
    for (std::size_t sweep = 0; sweep < spec.burn_in + spec.length; ++sweep) {
        for (std::size_t i = 0; i < q(); ++i) {
            const ModelMask other = gamma ^ (1ULL << i);
            const double lo = log_post(other);
            // probability of moving to `other`
            double p_other;
            if (lo == kNegInf)
                p_other = 0.0;
            else if (cur == kNegInf)
                p_other = 1.0;
            else
                p_other = 1.0 / (1.0 + std::exp(cur - lo));
            if (unif(rng) < p_other) {
                gamma = other;
                cur = lo;
            }
        }
        const auto idx = mask_indices(gamma, q());
        ModelState s;
        s.gamma = gamma;
        Eigen::VectorXd beta_draw(static_cast<Eigen::Index>(idx.size()));
        double rss_ratio = 1.0;
        std::optional<Factor> f;
        if (!idx.empty()) {
            f = factor(xtx_, xty_, idx);
            if (!f) throw SingularDesign("gibbs: current model became rank deficient");
            rss_ratio = std::max(tss_ - f->b.squaredNorm(), 0.0) / tss_;
        }
        const double S = tss_ * (1.0 + h.g * rss_ratio) / (1.0 + h.g);
        const double sigma2 = S / (2.0 * gam(rng));
        s.sigma = std::sqrt(sigma2);
        s.beta0 = ybar_ + s.sigma / std::sqrt(static_cast<double>(m())) * norm(rng);
        if (f) {
            Eigen::VectorXd z(beta_draw.size());
            for (Eigen::Index a = 0; a < z.size(); ++a) z(a) = norm(rng);
            // beta ~ N(shrink * beta_ols, shrink * sigma^2 (X'X)^{-1}), X'X = L L'
            const Eigen::VectorXd rhs = shrink * f->b + std::sqrt(shrink) * s.sigma * z;
            beta_draw = f->L.transpose().triangularView<Eigen::Upper>().solve(rhs);
        }
        s.beta = std::move(beta_draw);
        if (sweep >= spec.burn_in) out.push_back(std::move(s));
    }
    return out;
}

std::vector<FunctionOfTheta<ModelState>> Blvs::functions(const std::vector<std::string>& ids) const {
    std::vector<FunctionOfTheta<ModelState>> out;
    for (const auto& id : ids) {
        if (id == "one") {
            out.push_back({id, [](const ModelState&) { return 1.0; }});
            continue;
        }
        if (id == "gamma:*") {
            for (std::size_t i = 0; i < q(); ++i)
                out.push_back({"gamma:" + data_.names[i],
                               [i](const ModelState& s) { return static_cast<double>(s.gamma >> i & 1ULL); }});
            continue;
        }
        if (id.rfind("gamma:", 0) == 0) {
            const std::string nm = id.substr(6);
            const auto it = std::find(data_.names.begin(), data_.names.end(), nm);
            if (it == data_.names.end()) throw InvalidArgument("unknown predictor '" + nm + "' in function '" + id + "'");
            const auto i = static_cast<std::size_t>(it - data_.names.begin());
            out.push_back({id, [i](const ModelState& s) { return static_cast<double>(s.gamma >> i & 1ULL); }});
            continue;
        }
        throw InvalidArgument("unknown blvs function '" + id + "'");
    }
    return out;
}

ModelSpace::ModelSpace(const Blvs& model) : m_(model.m()), q_(model.q()) {
    if (q_ > Blvs::kMaxEnumerate)
        throw InvalidArgument("enumeration supports at most " + std::to_string(Blvs::kMaxEnumerate) + " predictors, got " +
                              std::to_string(q_));
    const std::size_t n = std::size_t{1} << q_;
    fits_.resize(n);
    valid_.assign(n, true);
    std::vector<char> ok(n, 1);
    parallel_for(num_blocks(n), [&](std::size_t b) {
        const std::size_t hi = std::min(n, (b + 1) * kReductionBlock);
        for (std::size_t mk = b * kReductionBlock; mk < hi; ++mk) {
            try {
                fits_[mk] = model.fit(mk);
            } catch (const SingularDesign&) {
                ok[mk] = 0;
            }
        }
    });
    for (std::size_t mk = 0; mk < n; ++mk) valid_[mk] = ok[mk] != 0;
}

EnumerationResult ModelSpace::enumerate_posterior(const BlvsHyper& h, bool keep) const {
    h.check();
    const std::size_t n = fits_.size();
    std::vector<double> lw(n);
    const double lw1 = std::log(h.w), lw0 = std::log1p(-h.w);
    double mx = kNegInf;
    for (std::size_t mk = 0; mk < n; ++mk) {
        if (!valid_[mk]) {
            lw[mk] = kNegInf;
            continue;
        }
        const double qg = fits_[mk].size;
        lw[mk] = qg * lw1 + (static_cast<double>(q_) - qg) * lw0 + Blvs::log_marginal(fits_[mk], h.g, m_);
        mx = std::max(mx, lw[mk]);
    }
    double total = 0.0;
    Eigen::VectorXd incl = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(q_));
    for (std::size_t mk = 0; mk < n; ++mk) {
        if (lw[mk] == kNegInf) continue;
        const double e = std::exp(lw[mk] - mx);
        total += e;
        for (std::size_t i = 0; i < q_; ++i)
            if (mk >> i & 1U) incl(static_cast<Eigen::Index>(i)) += e;
    }
    EnumerationResult r;
    r.log_marginal = mx + std::log(total);
    r.inclusion_probs = incl / total;
    if (keep) r.log_model_weights = std::move(lw);
    return r;
}

double ModelSpace::log_marginal_h(const BlvsHyper& h) const {
    h.check();
    const double lw1 = std::log(h.w), lw0 = std::log1p(-h.w);
    double mx = kNegInf;
    std::vector<double> lw(fits_.size(), kNegInf);
    for (std::size_t mk = 0; mk < fits_.size(); ++mk) {
        if (!valid_[mk]) continue;
        const double qg = fits_[mk].size;
        lw[mk] = qg * lw1 + (static_cast<double>(q_) - qg) * lw0 + Blvs::log_marginal(fits_[mk], h.g, m_);
        mx = std::max(mx, lw[mk]);
    }
    double total = 0.0;
    for (double v : lw)
        if (v != kNegInf) total += std::exp(v - mx);
    return mx + std::log(total);
}

double ModelSpace::exact_bf(const BlvsHyper& h, const BlvsHyper& h1) const {
    return std::exp(log_marginal_h(h) - log_marginal_h(h1));
}

void write_chain_csv(const std::string& path, const Blvs& model, const std::vector<ModelState>& chain) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write chain file '" + path + "'");
    out.precision(17);
    out << "sweep,gamma,sigma,beta0";
    for (const auto& nm : model.data().names) out << ",beta_" << nm;
    out << '\n';
    for (std::size_t s = 0; s < chain.size(); ++s) {
        const auto& st = chain[s];
        out << s << ',';
        for (std::size_t i = 0; i < model.q(); ++i) out << ((st.gamma >> i & 1ULL) ? '1' : '0');
        out << ',' << st.sigma << ',' << st.beta0;
        Eigen::Index a = 0;
        for (std::size_t i = 0; i < model.q(); ++i) {
            out << ',';
            if (st.gamma >> i & 1ULL) out << st.beta(a++);
        }
        out << '\n';
    }
}

}  // namespace hypersurf::blvs
