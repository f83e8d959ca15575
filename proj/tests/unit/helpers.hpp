#pragma once

#include <memory>
#include <string>
#include <vector>

#include "hypersurf/density_family.hpp"
#include "hypersurf/ratio_estimation.hpp"
#include "hypersurf/surface.hpp"

namespace testing {

using hypersurf::Hyperparameter;

inline std::vector<Hyperparameter> toy_skeleton(std::initializer_list<double> hs) {
    std::vector<Hyperparameter> s;
    for (double h : hs) s.push_back(Hyperparameter{h});
    return s;
}

inline hypersurf::SamplePool toy_pool(const hypersurf::ToyModel& model, const std::vector<Hyperparameter>& skeleton,
                                      std::size_t length, std::uint64_t seed,
                                      const std::vector<std::string>& fns = {}) {
    const auto chains = hypersurf::sample_chains(model, skeleton, length, 0, seed);
    return hypersurf::make_pool(model, chains, hypersurf::ToyModel::functions(fns));
}

// Two-stage toy study held together so the workspace's family pointer stays valid.
struct ToyStudy {
    std::unique_ptr<hypersurf::ToyModel> model;
    hypersurf::RatioEstimate ratios;
    std::unique_ptr<hypersurf::Stage2Workspace> ws;
};

inline ToyStudy toy_study(const std::vector<Hyperparameter>& skeleton, std::size_t N, std::size_t n, std::uint64_t seed,
                          const std::vector<std::string>& fns = {}, hypersurf::ToyModel::Options opt = {}) {
    ToyStudy s;
    s.model = std::make_unique<hypersurf::ToyModel>(opt);
    const auto p1 = toy_pool(*s.model, skeleton, N, seed);
    s.ratios = hypersurf::estimate_ratios(hypersurf::build_log_weight_matrix(*s.model, skeleton, p1));
    auto p2 = toy_pool(*s.model, skeleton, n, seed + 1000003, fns);
    s.ws = std::make_unique<hypersurf::Stage2Workspace>(
        hypersurf::prepare_workspace(*s.model, skeleton, std::move(p2), s.ratios));
    return s;
}

}  // namespace testing
