#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hypersurf/density_family.hpp"

namespace hypersurf::blvs {

using ModelMask = std::uint64_t;  // bit i set <=> predictor i included

inline int popcount(ModelMask m) { return __builtin_popcountll(m); }

struct Dataset {
    Eigen::VectorXd y;
    Eigen::MatrixXd X;  // m x q
    std::string response_name;
    std::vector<std::string> names;
    std::vector<bool> log_transformed;

    std::size_t m() const { return static_cast<std::size_t>(X.rows()); }
    std::size_t q() const { return static_cast<std::size_t>(X.cols()); }
};

// Reads a headed CSV. Every column except those in binary_names is
// log-transformed, the response included. Columns other than the response
// become predictors in file order.
Dataset ingest_csv(const std::string& path, const std::string& response_name,
                   const std::vector<std::string>& binary_names);

struct BlvsHyper {
    double w = 0.5;
    double g = 1.0;

    void check() const;
    static BlvsHyper from(const Hyperparameter& h);
    Hyperparameter to_hyper() const { return Hyperparameter{w, g}; }
};

struct ModelState {
    ModelMask gamma = 0;
    double sigma = 1.0;
    double beta0 = 0.0;
    Eigen::VectorXd beta;  // included coefficients, in column order

    int q_gamma() const { return popcount(gamma); }
};

// Least-squares summary of one model on the centered design.
struct ModelFit {
    int size = 0;
    double rss_ratio = 1.0;  // RSS / TSS = 1 - R^2
};

struct EnumerationResult {
    double log_marginal = 0.0;        // log m_h up to a constant shared by all h
    Eigen::VectorXd inclusion_probs;  // length q
    std::vector<double> log_model_weights;  // per mask, unnormalized log posterior (optional)
};

struct GibbsOptions {
    bool record_model_weights = false;
};

// Bayesian linear variable selection with an independence Bernoulli(w) prior on
// gamma and Zellner's g-prior on the coefficients; h = (w, g).
// Predictors and response are centered internally.
class Blvs final : public Model<ModelState> {
public:
    explicit Blvs(Dataset data);

    std::string name() const override { return "blvs"; }
    std::size_t hyper_dim() const override { return 2; }
    std::vector<std::string> coord_names() const override { return {"w", "g"}; }
    // (q_gamma, ||X_gamma beta_gamma||^2 / sigma^2)
    std::size_t feature_dim() const override { return 2; }
    void check(const Hyperparameter& h) const override;
    double log_weight(const Hyperparameter& h, std::span<const double> features) const override;
    bool has_gradient() const override { return true; }
    void grad_log_weight(const Hyperparameter& h, std::span<const double> features,
                         std::span<double> out) const override;

    std::vector<ModelState> sample_posterior(const ChainSpec& spec) const override;
    void features(const ModelState& s, std::span<double> out) const override;

    const Dataset& data() const { return data_; }
    std::size_t m() const { return data_.m(); }
    std::size_t q() const { return data_.q(); }
    const Eigen::MatrixXd& centered_X() const { return Xc_; }

    // Throws SingularDesign when X_gamma is rank deficient.
    ModelFit fit(ModelMask gamma) const;
    // log m(y | gamma, g) - log m(y | empty model, g).
    double log_marginal(ModelMask gamma, double g) const;
    static double log_marginal(const ModelFit& fit, double g, std::size_t m);
    double log_model_prior(ModelMask gamma, double w) const;

    // P(gamma_i = 1 | gamma_{-i}, y) with (beta, sigma) integrated out.
    // Rank-deficient neighbours have probability zero.
    double conditional_inclusion_prob(ModelMask gamma, std::size_t i, const BlvsHyper& h) const;

    std::vector<ModelState> gibbs_run(const BlvsHyper& h, const ChainSpec& spec) const;

    // Direct evaluation of the representative log prior weight from a state.
    double log_prior_weight_blvs(const BlvsHyper& h, const ModelState& s) const;
    Eigen::Vector2d grad_log_prior_weight_blvs(const BlvsHyper& h, const ModelState& s) const;

    // Inclusion indicators f_i(theta) = gamma_i, id "gamma:<name>", plus "one".
    std::vector<FunctionOfTheta<ModelState>> functions(const std::vector<std::string>& ids) const;

    static constexpr std::size_t kMaxEnumerate = 25;

private:
    Dataset data_;
    Eigen::MatrixXd Xc_;
    Eigen::VectorXd yc_;
    double ybar_ = 0.0;
    double tss_ = 0.0;
    Eigen::MatrixXd xtx_;
    Eigen::VectorXd xty_;
};

// Exact posterior quantities over all 2^q models. The per-model fits do not
// depend on h and are computed once.
class ModelSpace {
public:
    explicit ModelSpace(const Blvs& model);

    EnumerationResult enumerate_posterior(const BlvsHyper& h, bool keep_model_weights = false) const;
    double log_marginal_h(const BlvsHyper& h) const;
    double exact_bf(const BlvsHyper& h, const BlvsHyper& h1) const;
    std::size_t num_models() const { return fits_.size(); }

private:
    std::size_t m_, q_;
    std::vector<ModelFit> fits_;
    std::vector<bool> valid_;
};

// Chain output record: sweep, gamma bits, sigma, beta0, then q beta slots
// (empty for excluded predictors).
void write_chain_csv(const std::string& path, const Blvs& model, const std::vector<ModelState>& chain);

}  // namespace hypersurf::blvs
