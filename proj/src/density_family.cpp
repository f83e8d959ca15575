#include "hypersurf/density_family.hpp"

#include <random>

namespace hypersurf {

void DensityFamily::grad_log_weight(const Hyperparameter&, std::span<const double>, std::span<double>) const {
    throw UnsupportedOperation(name() + " family provides no prior-weight gradient");
}

std::size_t SamplePool::chain_begin(std::size_t l) const {
    std::size_t b = 0;
    for (std::size_t i = 0; i < l; ++i) b += counts.at(i);
    return b;
}

std::size_t SamplePool::function_index(const std::string& id) const {
    for (std::size_t j = 0; j < function_ids.size(); ++j)
        if (function_ids[j] == id) return j;
    throw InvalidArgument("unknown function '" + id + "'");
}

Eigen::VectorXd SamplePool::function_column(const std::string& id) const {
    return function_values.col(static_cast<Eigen::Index>(function_index(id)));
}

ToyModel::ToyModel(Options opt) : opt_(opt) {
    if (!(opt_.prior_sd > 0) || !(opt_.like_sd > 0)) throw InvalidArgument("toy model: standard deviations must be positive");
    if (!std::isfinite(opt_.y_obs)) throw InvalidArgument("toy model: y must be finite");
    if (!(std::abs(opt_.phi) < 1.0)) throw InvalidArgument("toy model: |phi| must be < 1");
}

void ToyModel::check(const Hyperparameter& h) const {
    if (h.dim() != 1 || !std::isfinite(h.coords[0]))
        throw InvalidHyperparameter("toy family expects one finite coordinate, got " + h.str());
}

double ToyModel::log_weight(const Hyperparameter& h, std::span<const double> f) const {
    const double z = (f[0] - h.coords[0]) / opt_.prior_sd;
    return -0.5 * z * z;
}

void ToyModel::grad_log_weight(const Hyperparameter& h, std::span<const double> f, std::span<double> out) const {
    out[0] = (f[0] - h.coords[0]) / (opt_.prior_sd * opt_.prior_sd);
}

void ToyModel::features(const double& theta, std::span<double> out) const {
    count_state_evaluation();
    out[0] = theta;
}

double ToyModel::posterior_var() const {
    const double pp = 1.0 / (opt_.prior_sd * opt_.prior_sd);
    const double lp = 1.0 / (opt_.like_sd * opt_.like_sd);
    return 1.0 / (pp + lp);
}

double ToyModel::posterior_mean(double h) const {
    const double pp = 1.0 / (opt_.prior_sd * opt_.prior_sd);
    const double lp = 1.0 / (opt_.like_sd * opt_.like_sd);
    return (h * pp + opt_.y_obs * lp) / (pp + lp);
}

double ToyModel::exact_bf(double h, double h1) const {
    // y ~ N(h, prior_sd^2 + like_sd^2) marginally
    const double v = opt_.prior_sd * opt_.prior_sd + opt_.like_sd * opt_.like_sd;
    const double a = opt_.y_obs - h;
    const double b = opt_.y_obs - h1;
    return std::exp((b * b - a * a) / (2.0 * v));
}

double ToyModel::exact_pe(const std::string& f_id, double h) const {
    const double mu = posterior_mean(h);
    if (f_id == "one") return 1.0;
    if (f_id == "identity") return mu;
    if (f_id == "square") return posterior_var() + mu * mu;
    throw InvalidArgument("unknown toy function '" + f_id + "'");
}

std::vector<double> ToyModel::sample_posterior(const ChainSpec& spec) const {
    spec.validate();
    check(spec.h);
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> z(0.0, 1.0);
    const double mu = posterior_mean(spec.h.coords[0]);
    const double sd = std::sqrt(posterior_var());
    std::vector<double> out;
    out.reserve(spec.length);
    if (opt_.sampler == Sampler::iid) {
        for (std::size_t i = 0; i < spec.burn_in; ++i) (void)z(rng);
        for (std::size_t i = 0; i < spec.length; ++i) out.push_back(mu + sd * z(rng));
        return out;
    }
    const double innov = sd * std::sqrt(1.0 - opt_.phi * opt_.phi);
    double x = mu + sd * z(rng);  // stationary start
    for (std::size_t i = 0; i < spec.burn_in + spec.length; ++i) {
        x = mu + opt_.phi * (x - mu) + innov * z(rng);
        if (i >= spec.burn_in) out.push_back(x);
    }
    return out;
}

std::vector<FunctionOfTheta<double>> ToyModel::functions(const std::vector<std::string>& ids) {
    std::vector<FunctionOfTheta<double>> out;
    for (const auto& id : ids) {
        if (id == "one")
            out.push_back({id, [](const double&) { return 1.0; }});
        else if (id == "identity")
            out.push_back({id, [](const double& t) { return t; }});
        else if (id == "square")
            out.push_back({id, [](const double& t) { return t * t; }});
        else
            throw InvalidArgument("unknown toy function '" + id + "'");
    }
    return out;
}

double toy_exact_bf(double h, double h1, double y) {
    return std::exp(-(y - h) * (y - h) / 4.0 + (y - h1) * (y - h1) / 4.0);
}

double toy_exact_pe(const std::string& f_id, double h, double y) {
    ToyModel::Options o;
    o.y_obs = y;
    return ToyModel(o).exact_pe(f_id, h);
}

}  // namespace hypersurf
