#include <cmath>
#include <numeric>

#include <doctest.h>

#include "helpers.hpp"
#include "hypersurf/blvs.hpp"
#include "hypersurf/parallel.hpp"
#include "hypersurf/variance.hpp"

using namespace hypersurf;
using testing::toy_skeleton;
using testing::toy_study;

namespace {

// Uniform(0, h) priors, to exercise support handling. Features are theta.
class UniformFamily final : public Model<double> {
public:
    std::string name() const override { return "uniform"; }
    std::size_t hyper_dim() const override { return 1; }
    std::vector<std::string> coord_names() const override { return {"h"}; }
    std::size_t feature_dim() const override { return 1; }
    void check(const Hyperparameter& h) const override {
        if (h.dim() != 1 || !(h[0] > 0)) throw InvalidHyperparameter("uniform family needs h > 0");
    }
    double log_weight(const Hyperparameter& h, std::span<const double> f) const override {
        return f[0] >= 0 && f[0] <= h[0] ? -std::log(h[0]) : kNegInf;
    }
    std::vector<double> sample_posterior(const ChainSpec&) const override { return {}; }
    void features(const double& t, std::span<double> out) const override { out[0] = t; }
};

std::vector<std::vector<double>> uniform_chains(std::vector<double> upper, std::size_t n) {
    std::vector<std::vector<double>> c;
    for (double u : upper) {
        std::vector<double> x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = u * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        c.push_back(x);
    }
    return c;
}

}  // namespace

TEST_SUITE("surface") {

TEST_CASE("grid construction") {
    const Grid g = make_product_grid({"w", "g"}, {GridAxis{0.1, 0.91, 0.03}, GridAxis{4, 100, 3}});
    CHECK(g.size() == 924);
    CHECK(g.points[0] == Hyperparameter{0.1, 4.0});
    CHECK(g.points[1] == Hyperparameter{0.1, 7.0});  // last axis fastest
    CHECK(g.points.back() == Hyperparameter{0.91, 100.0});
    CHECK(GridAxis{0.0, 1.0, 0.1}.values().size() == 11);
    CHECK(GridAxis{0.0, 1.0, 0.1}.values()[3] == 0.3);
    CHECK(GridAxis{2.0, 2.0, 1.0}.values().size() == 1);
    CHECK_THROWS_AS(GridAxis({1.0, 0.0, 0.1}).values(), InvalidArgument);
    CHECK_THROWS_AS(GridAxis({0.0, 1.0, 0.0}).values(), InvalidArgument);
    CHECK_THROWS_AS(make_product_grid({"w"}, {GridAxis{0, 1, 1}, GridAxis{0, 1, 1}}), InvalidArgument);
}

TEST_CASE("toy Bayes factor within 3 standard errors of the exact value") {
    const auto s = toy_study(toy_skeleton({0.0, 1.0}), 20000, 20000, 21);
    Grid grid{{"h"}, {Hyperparameter{0.5}}};
    auto recs = surface(*s.ws, grid);
    annotate_variance(*s.ws, recs, {});
    const double exact = std::exp(-0.0625);
    CHECK(std::abs(recs[0].bf - exact) < 3 * recs[0].var_bf.se);
    CHECK(std::abs(recs[0].bf_cv - exact) < 3 * recs[0].var_bf_cv.se);
}

TEST_CASE("single skeleton point: bf(h1) = 1 and pe is the chain average") {
    const auto s = toy_study(toy_skeleton({0.2}), 500, 700, 22, {"identity"});
    CHECK(bf_hat(*s.ws, Hyperparameter{0.2}) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(bf_cv_hat(*s.ws, Hyperparameter{0.2}).estimate == doctest::Approx(1.0).epsilon(1e-14));
    const Eigen::VectorXd x = s.ws->pool.function_column("identity");
    CHECK(pe_hat(*s.ws, Hyperparameter{0.2}, "identity") == doctest::Approx(x.mean()).epsilon(1e-12));
    const auto recs = surface(*s.ws, Grid{{"h"}, {Hyperparameter{0.2}}});
    CHECK(recs.size() == 1);
}

TEST_CASE("identical skeleton densities: control variates vanish") {
    const auto s = toy_study(toy_skeleton({0.0, 0.0}), 2000, 2000, 23);
    CHECK(s.ws->Z.cwiseAbs().maxCoeff() < 1e-12);
    for (double h : {-0.5, 0.0, 0.8}) {
        const auto cv = bf_cv_hat(*s.ws, Hyperparameter{h});
        CHECK(cv.estimate == doctest::Approx(bf_hat(*s.ws, Hyperparameter{h})).epsilon(1e-10));
    }
}

TEST_CASE("posterior expectation of the constant function is exactly 1") {
    const auto s = toy_study(toy_skeleton({0.0, 1.0, -1.0}), 1000, 1000, 24, {"one"});
    for (double h : {-3.0, -0.2, 0.0, 1.7, 6.0})
        CHECK(std::abs(pe_hat(*s.ws, Hyperparameter{h}, "one") - 1.0) < 1e-12);
}

TEST_CASE("indicator expectations stay in [0, 1]") {
    const auto s = toy_study(toy_skeleton({0.0, 1.0}), 1000, 1000, 25, {"identity"});
    const Eigen::VectorXd theta = s.ws->pool.function_column("identity");
    const Eigen::VectorXd ind = (theta.array() > 0.3).cast<double>();
    for (double h = -3.0; h <= 4.0; h += 0.25) {
        const double p = pe_hat(*s.ws, point_terms(*s.ws, Hyperparameter{h}), ind);
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
    }
}

TEST_CASE("gradient matches central differences of the same estimator") {
    const auto s = toy_study(toy_skeleton({0.0, 1.0}), 3000, 3000, 26);
    for (double h : {-0.5, 0.3, 1.4}) {
        const double e = 1e-6;
        const double fd = (bf_hat(*s.ws, Hyperparameter{h + e}) - bf_hat(*s.ws, Hyperparameter{h - e})) / (2 * e);
        const double g = bf_gradient_hat(*s.ws, Hyperparameter{h})(0);
        CHECK(std::abs(g - fd) <= 1e-6 * std::max(1.0, std::abs(g)));
    }
}

TEST_CASE("grid evaluation never touches the model's density code") {
    const auto s = toy_study(toy_skeleton({0.0, 1.0}), 500, 500, 27, {"identity"});
    const auto before = s.model->state_evaluations();
    const Grid grid = make_product_grid({"h"}, {GridAxis{-1, 2, 0.01}});
    auto recs = surface(*s.ws, grid, SurfaceOptions{{"identity"}, true});
    annotate_variance(*s.ws, recs, {"identity"});
    CHECK(recs.size() == 301);
    CHECK(s.model->state_evaluations() == before);
}

TEST_CASE("results do not depend on the thread count") {
    const auto s = toy_study(toy_skeleton({0.0, 1.0, 2.0}), 3000, 3000, 28, {"identity"});
    const Grid grid = make_product_grid({"h"}, {GridAxis{-1, 3, 0.1}});
    set_num_threads(1);
    auto a = surface(*s.ws, grid, SurfaceOptions{{"identity"}, false});
    annotate_variance(*s.ws, a, {"identity"});
    set_num_threads(4);
    auto b = surface(*s.ws, grid, SurfaceOptions{{"identity"}, false});
    annotate_variance(*s.ws, b, {"identity"});
    set_num_threads(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].bf == b[i].bf);
        CHECK(a[i].bf_cv == b[i].bf_cv);
        CHECK(a[i].pe[0] == b[i].pe[0]);
        CHECK(a[i].var_bf_cv.total == b[i].var_bf_cv.total);
    }
}

TEST_CASE("far extrapolation stays finite") {
    const auto s = toy_study(toy_skeleton({0.0, 1.0}), 500, 500, 29, {"identity"});
    for (double h : {-40.0, 40.0}) {
        const auto r = surface(*s.ws, Grid{{"h"}, {Hyperparameter{h}}}, SurfaceOptions{{"identity"}, false})[0];
        CHECK(std::isfinite(r.bf));
        CHECK(std::isfinite(r.bf_cv));
        CHECK(std::isfinite(r.pe[0]));
    }
}

TEST_CASE("BLVS extreme g stays finite") {
    blvs::Dataset d;
    d.X = Eigen::MatrixXd::Random(30, 4);
    d.y = d.X.col(0) + 0.3 * Eigen::VectorXd::Random(30);
    d.names = {"a", "b", "c", "d"};
    d.log_transformed = {false, false, false, false};
    const blvs::Blvs model(d);
    const std::vector<Hyperparameter> skel{{0.5, 15.0}, {0.3, 225.0}};
    const auto c1 = sample_chains(model, skel, 500, 50, 1), c2 = sample_chains(model, skel, 500, 50, 2);
    const auto ratios = estimate_ratios(build_log_weight_matrix(model, skel, make_pool(model, c1)));
    const auto ws = prepare_workspace(model, skel, make_pool(model, c2), ratios);
    for (const auto& h : {Hyperparameter{0.9, 4.0}, Hyperparameter{0.05, 1e4}}) {
        CHECK(std::isfinite(bf_hat(ws, h)));
        CHECK(std::isfinite(bf_cv_hat(ws, h).estimate));
    }
}

TEST_CASE("support handling") {
    const UniformFamily fam;
    const std::vector<Hyperparameter> skel{{1.0}, {2.0}};
    // every stage-2 sample outside both supports
    auto bad = make_pool(fam, uniform_chains({1.0, 2.0}, 50));
    bad.features(3, 0) = 5.0;
    RatioEstimate r;
    r.d_hat = Eigen::Vector2d(1.0, 1.0);
    r.sigma_hat = Eigen::MatrixXd::Zero(1, 1);
    r.N = 100;
    CHECK_THROWS_AS(prepare_workspace(fam, skel, bad, r), SupportViolation);

    const auto good = make_pool(fam, uniform_chains({1.0, 2.0}, 50));
    const auto lw = build_log_weight_matrix(fam, skel, good);
    const auto est = estimate_ratios(lw);
    // nu_1 / nu_2 integrate to 1 each: d_2 = 1
    CHECK(est.d_hat(1) == doctest::Approx(1.0).epsilon(0.05));
    const auto ws = prepare_workspace(fam, skel, good, est);
    // h = 0.001 vanishes on every sample
    std::vector<std::string> warnings;
    set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
    CHECK(bf_hat(ws, Hyperparameter{0.001}) == 0.0);
    const Eigen::VectorXd f = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(ws.n()));
    CHECK(std::isnan(pe_hat(ws, point_terms(ws, Hyperparameter{0.001}), f)));
    set_warning_sink(nullptr);
    CHECK_FALSE(warnings.empty());
    CHECK_THROWS_AS(bf_gradient_hat(ws, Hyperparameter{1.5}), UnsupportedOperation);
}

TEST_CASE("workspace rejects mismatched ratios") {
    const ToyModel m;
    const auto skel = toy_skeleton({0.0, 1.0});
    RatioEstimate r;
    r.d_hat = Eigen::Vector3d(1, 1, 1);
    r.sigma_hat = Eigen::MatrixXd::Zero(2, 2);
    CHECK_THROWS_AS(prepare_workspace(m, skel, testing::toy_pool(m, skel, 20, 1), r), InvalidArgument);
    r.d_hat = Eigen::Vector2d(1, -1);
    r.sigma_hat = Eigen::MatrixXd::Zero(1, 1);
    CHECK_THROWS_AS(prepare_workspace(m, skel, testing::toy_pool(m, skel, 20, 1), r), InvalidArgument);
}

}  // TEST_SUITE
