#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hypersurf/common.hpp"
#include "hypersurf/parallel.hpp"

namespace hypersurf {

// A family of priors {nu_h} on a parameter theta, seen through a compact
// per-sample feature vector. log_weight(h, features(theta)) is log nu_h(theta)
// up to an additive term that depends on theta only; every estimator uses
// differences of log weights at the same theta, so that term cancels.
class DensityFamily {
public:
    virtual ~DensityFamily() = default;

    virtual std::string name() const = 0;
    virtual std::size_t hyper_dim() const = 0;
    virtual std::vector<std::string> coord_names() const = 0;
    virtual std::size_t feature_dim() const = 0;

    // Throws InvalidHyperparameter when h is outside the family's domain.
    virtual void check(const Hyperparameter& h) const = 0;

    // May return -inf (nu_h(theta) = 0); never +inf.
    virtual double log_weight(const Hyperparameter& h, std::span<const double> features) const = 0;

    virtual bool has_gradient() const { return false; }
    // d log nu_h / dh, one entry per hyperparameter coordinate.
    virtual void grad_log_weight(const Hyperparameter& h, std::span<const double> features,
                                 std::span<double> out) const;
};

template <class State>
struct FunctionOfTheta {
    std::string id;
    std::function<double(const State&)> eval;
};

// Model-level contract: how to sample posteriors and how to reduce a state to
// the features the weight evaluator consumes.
template <class State>
class Model : public DensityFamily {
public:
    using state_type = State;

    virtual std::vector<State> sample_posterior(const ChainSpec& spec) const = 0;
    virtual void features(const State& s, std::span<double> out) const = 0;

    double log_prior_weight(const Hyperparameter& h, const State& s) const {
        check(h);
        std::vector<double> f(feature_dim());
        features(s, f);
        return log_weight(h, f);
    }

    // Number of state-level density evaluations (features + log_prior_weight)
    // since construction; lets callers verify that cached stages do not touch
    // the model again.
    std::size_t state_evaluations() const { return state_evals_.load(); }

protected:
    void count_state_evaluation() const { ++state_evals_; }

private:
    mutable std::atomic<std::size_t> state_evals_{0};
};

// Pooled samples from k chains, reduced to features and function values.
// Samples are stored chain by chain, in chain order.
struct SamplePool {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> features;  // M x feature_dim
    std::vector<std::size_t> chain_of;
    std::vector<std::size_t> counts;
    std::vector<std::string> function_ids;
    Eigen::MatrixXd function_values;  // M x (#functions)

    std::size_t size() const { return chain_of.size(); }
    std::size_t num_chains() const { return counts.size(); }
    std::size_t chain_begin(std::size_t l) const;
    std::span<const double> feature_row(std::size_t p) const {
        return {features.data() + p * static_cast<std::size_t>(features.cols()),
                static_cast<std::size_t>(features.cols())};
    }
    std::size_t function_index(const std::string& id) const;
    Eigen::VectorXd function_column(const std::string& id) const;
};

template <class State>
SamplePool make_pool(const Model<State>& model, const std::vector<std::vector<State>>& chains,
                     const std::vector<FunctionOfTheta<State>>& functions = {}) {
    SamplePool pool;
    std::size_t total = 0;
    for (const auto& c : chains) {
        if (c.empty()) throw InvalidArgument("make_pool: empty chain");
        pool.counts.push_back(c.size());
        total += c.size();
    }
    const auto fd = static_cast<Eigen::Index>(model.feature_dim());
    pool.features.resize(static_cast<Eigen::Index>(total), fd);
    pool.function_values.resize(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(functions.size()));
    for (const auto& f : functions) pool.function_ids.push_back(f.id);
    pool.chain_of.resize(total);
    std::vector<std::size_t> offsets;
    std::size_t p = 0;
    for (std::size_t l = 0; l < chains.size(); ++l) {
        offsets.push_back(p);
        for (std::size_t i = 0; i < chains[l].size(); ++i) pool.chain_of[p++] = l;
    }
    parallel_for(chains.size(), [&](std::size_t l) {
        for (std::size_t i = 0; i < chains[l].size(); ++i) {
            const std::size_t row = offsets[l] + i;
            model.features(chains[l][i], {pool.features.data() + row * static_cast<std::size_t>(fd),
                                          static_cast<std::size_t>(fd)});
            for (std::size_t j = 0; j < functions.size(); ++j)
                pool.function_values(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j)) =
                    functions[j].eval(chains[l][i]);
        }
    });
    return pool;
}

// Draws one chain per skeleton point, each with its own derived seed.
template <class State>
std::vector<std::vector<State>> sample_chains(const Model<State>& model, const std::vector<Hyperparameter>& skeleton,
                                              std::size_t length, std::size_t burn_in, std::uint64_t base_seed) {
    std::vector<std::vector<State>> chains(skeleton.size());
    parallel_for(skeleton.size(), [&](std::size_t l) {
        ChainSpec spec{skeleton[l], length, burn_in, derive_seed(base_seed, l)};
        chains[l] = model.sample_posterior(spec);
    });
    return chains;
}

// Conjugate normal model: y | theta ~ N(theta, like_sd^2), theta ~ N(h, prior_sd^2).
// Posterior, marginal likelihood and Bayes factors are closed form.
class ToyModel final : public Model<double> {
public:
    enum class Sampler { iid, ar1 };

    struct Options {
        double y_obs = 0.0;
        double prior_sd = 1.0;
        double like_sd = 1.0;
        Sampler sampler = Sampler::iid;
        double phi = 0.5;  // lag-1 coefficient of the AR(1) variant
    };

    ToyModel() : ToyModel(Options{}) {}
    explicit ToyModel(Options opt);

    std::string name() const override { return "toy"; }
    std::size_t hyper_dim() const override { return 1; }
    std::vector<std::string> coord_names() const override { return {"h"}; }
    std::size_t feature_dim() const override { return 1; }
    void check(const Hyperparameter& h) const override;
    double log_weight(const Hyperparameter& h, std::span<const double> features) const override;
    bool has_gradient() const override { return true; }
    void grad_log_weight(const Hyperparameter& h, std::span<const double> features,
                         std::span<double> out) const override;

    std::vector<double> sample_posterior(const ChainSpec& spec) const override;
    void features(const double& theta, std::span<double> out) const override;

    const Options& options() const { return opt_; }
    double posterior_mean(double h) const;
    double posterior_var() const;
    double exact_bf(double h, double h1) const;
    // f_id in {"one", "identity", "square"}
    double exact_pe(const std::string& f_id, double h) const;

    static std::vector<FunctionOfTheta<double>> functions(const std::vector<std::string>& ids);

private:
    Options opt_;
};

// Unit-variance closed forms.
double toy_exact_bf(double h, double h1, double y);
double toy_exact_pe(const std::string& f_id, double h, double y);

}  // namespace hypersurf
