#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include <doctest.h>

#include "hypersurf/study.hpp"

#ifndef HYPERSURF_CONFIG_DIR
#define HYPERSURF_CONFIG_DIR "configs"
#endif
#ifndef HYPERSURF_CLI
#define HYPERSURF_CLI "hypersurf"
#endif

using namespace hypersurf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("hypersurf_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& sub = "") const { return (sub.empty() ? path : path / sub).string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

json toy_json() {
    return json::parse(R"({
      "model": {"type": "toy", "y": 0.0},
      "skeleton": [0.0, 1.0],
      "stage1": {"length": 800, "seed": 1},
      "stage2": {"length": 600, "seed": 2},
      "grid": {"axes": [{"min": -0.5, "max": 1.5, "step": 0.25}]},
      "functions": ["identity"]
    })");
}

int run_cli(const std::string& args, const std::string& log) {
    const int rc = std::system((std::string(HYPERSURF_CLI) + " " + args + " > " + log + " 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_SUITE("study") {

TEST_CASE("config parsing") {
    const auto c = StudyConfig::from_json(toy_json());
    CHECK(c.model.type == "toy");
    CHECK(c.skeleton.size() == 2);
    CHECK(c.stage1.lengths == std::vector<std::size_t>{800, 800});
    CHECK(c.grid().size() == 9);
    CHECK(c.grid().coord_names == std::vector<std::string>{"h"});
    CHECK(c.functions == std::vector<std::string>{"identity"});

    auto j = toy_json();
    j["baseline"] = 1.0;
    const auto b = StudyConfig::from_json(j);
    CHECK(b.skeleton.front() == Hyperparameter{1.0});
    CHECK(b.skeleton.back() == Hyperparameter{0.0});
    CHECK(b.hash() != c.hash());

    j = toy_json();
    j["baseline"] = 0.5;
    CHECK_THROWS_AS(StudyConfig::from_json(j), InvalidArgument);
    j = toy_json();
    j["stage2"]["seed"] = 1;
    CHECK_THROWS_AS(StudyConfig::from_json(j), InvalidArgument);
    j = toy_json();
    j["skeleton"] = json::array();
    CHECK_THROWS_AS(StudyConfig::from_json(j), InvalidArgument);
    j = toy_json();
    j["model"]["type"] = "probit";
    CHECK_THROWS_AS(StudyConfig::from_json(j), InvalidArgument);
    j = toy_json();
    j["stage1"]["length"] = {10, 20, 30};
    CHECK_THROWS_AS(StudyConfig::from_json(j), InvalidArgument);
    j = toy_json();
    j["stage1"]["length"] = {10, 20};
    CHECK(StudyConfig::from_json(j).stage1.lengths == std::vector<std::size_t>{10, 20});
}

TEST_CASE("product skeleton and explicit grid points") {
    const auto j = json::parse(R"({
      "model": {"type": "blvs", "dataset": "UScrime.csv"},
      "baseline": [0.5, 15],
      "skeleton": {"product": [[0.3, 0.5], [15, 50]]},
      "stage1": {"length": 10, "seed": 1},
      "stage2": {"length": 10, "seed": 2},
      "grid": {"points": [[0.65, 20], [0.5, 20]]}
    })");
    const auto c = StudyConfig::from_json(j, "/data");
    CHECK(c.skeleton.size() == 4);
    CHECK(c.skeleton.front() == Hyperparameter{0.5, 15.0});
    CHECK(c.grid().size() == 2);
    CHECK(c.grid().coord_names == std::vector<std::string>{"w", "g"});
    CHECK(c.model.dataset == "/data/UScrime.csv");
}

TEST_CASE("seed overrides") {
    auto j = toy_json();
    apply_seed_override(j, "stage2=17");
    CHECK(j["stage2"]["seed"] == 17);
    apply_seed_override(j, "stage1.seed=5");
    CHECK(j["stage1"]["seed"] == 5);
    CHECK_THROWS_AS(apply_seed_override(j, "stage2"), InvalidArgument);
    CHECK_THROWS_AS(apply_seed_override(j, "stage2.length=4"), InvalidArgument);
    CHECK_THROWS_AS(apply_seed_override(j, "stage3=4"), InvalidArgument);
    CHECK_THROWS_AS(apply_seed_override(j, "stage2=-4"), InvalidArgument);
}

TEST_CASE("config files allow comments and resolve relative paths") {
    TempDir d("cfg");
    std::ofstream(d.path / "c.json") << "// toy\n" << toy_json().dump(2) << "\n";
    const auto c = load_config(d.str("c.json"), {"stage1=9"});
    CHECK(c.stage1.seed == 9);
    CHECK_THROWS_AS(load_config(d.str("missing.json")), InputNotFound);
    std::ofstream(d.path / "bad.json") << "{ nope";
    CHECK_THROWS_AS(load_config(d.str("bad.json")), InvalidArgument);
}

TEST_CASE("runs are deterministic") {
    TempDir d("det");
    const auto c = StudyConfig::from_json(toy_json());
    cmd_run(c, Stage::both, d.str("a"));
    cmd_run(c, Stage::both, d.str("b"));
    CHECK(slurp(d.path / "a/surface.csv") == slurp(d.path / "b/surface.csv"));
    CHECK(slurp(d.path / "a/variance.csv") == slurp(d.path / "b/variance.csv"));
    CHECK(slurp(d.path / "a/ratio_estimate.json") == slurp(d.path / "b/ratio_estimate.json"));
    const auto m = json::parse(slurp(d.path / "a/manifest.json"));
    CHECK(m["config_hash"] == c.hash());
    CHECK(m["outputs"].contains("surface"));
}

TEST_CASE("stages run separately reproduce a joint run") {
    TempDir d("stages");
    const auto c = StudyConfig::from_json(toy_json());
    cmd_run(c, Stage::both, d.str("joint"));
    cmd_run(c, Stage::one, d.str("split"));
    CHECK_FALSE(fs::exists(d.path / "split/surface.csv"));
    const std::string ratios = slurp(d.path / "split/ratio_estimate.json");
    cmd_run(c, Stage::two, d.str("split"));
    CHECK(slurp(d.path / "joint/surface.csv") == slurp(d.path / "split/surface.csv"));

    // a new stage-2 seed changes the surface but leaves stage 1 untouched
    auto j = toy_json();
    apply_seed_override(j, "stage2=99");
    cmd_run(StudyConfig::from_json(j), Stage::two, d.str("split"));
    CHECK(slurp(d.path / "split/ratio_estimate.json") == ratios);
    CHECK(slurp(d.path / "joint/surface.csv") != slurp(d.path / "split/surface.csv"));

    // stored ratios for another skeleton are refused
    j = toy_json();
    j["skeleton"] = {0.0, 2.0};
    CHECK_THROWS_AS(cmd_run(StudyConfig::from_json(j), Stage::two, d.str("split")), InvalidArgument);
    CHECK_THROWS_AS(cmd_run(c, Stage::two, d.str("empty")), InputNotFound);
}

TEST_CASE("surface comparison") {
    TempDir d("cmp");
    const auto c = StudyConfig::from_json(toy_json());
    cmd_run(c, Stage::both, d.str());
    const auto self = compare_surfaces(d.str("surface.csv"), d.str("surface.csv"));
    CHECK(self.points == 9);
    CHECK(self.rmse_bf == 0.0);
    CHECK(self.rmse_bf_cv == 0.0);
    CHECK(self.max_abs_bf_cv == 0.0);
    const auto rep = cmd_oracle(c, d.str(), d.str());
    REQUIRE(rep);
    CHECK(fs::exists(d.path / "oracle.csv"));
    CHECK(fs::exists(d.path / "oracle_comparison.json"));
    CHECK(rep->rmse_bf_cv > 0.0);
    CHECK(rep->rmse_bf_cv < 0.1);
    const auto t = read_csv(d.str("oracle.csv"));
    CHECK(t.rows.size() == 9);
    CHECK(std::stod(t.rows[2][t.column("bf_hat")]) == doctest::Approx(std::exp(-0.0)).epsilon(1e-12));  // h = 0
}

TEST_CASE("toy z-scores against the oracle are roughly standard normal") {
    TempDir d("z");
    auto j = toy_json();
    j["skeleton"] = {0.0, 1.0, -0.5};
    j["stage1"]["length"] = 3000;
    j["stage2"]["length"] = 3000;
    j["grid"] = json::parse(R"({"axes": [{"min": -0.5, "max": 1.0, "step": 0.1}]})");
    std::vector<double> z;
    for (int rep = 0; rep < 40; ++rep) {
        j["stage1"]["seed"] = 1000 + 2 * rep;
        j["stage2"]["seed"] = 1001 + 2 * rep;
        const auto c = StudyConfig::from_json(j);
        cmd_run(c, Stage::both, d.str());
        const auto r = cmd_oracle(c, d.str(), d.str());
        z.insert(z.end(), r->z.begin(), r->z.end());
    }
    double mean = 0.0, sd = 0.0;
    for (double v : z) mean += v;
    mean /= static_cast<double>(z.size());
    for (double v : z) sd += (v - mean) * (v - mean);
    sd = std::sqrt(sd / static_cast<double>(z.size() - 1));
    CHECK(std::abs(mean) < 0.2);
    CHECK(sd >= 0.8);
    CHECK(sd <= 1.25);
}

TEST_CASE("planning output") {
    TempDir d("plan");
    auto j = toy_json();
    j["plan"] = json::parse(R"({"points": [[0.5], [1.2]], "budget_seconds": 30, "estimator": "bf_cv"})");
    const auto p = cmd_plan(StudyConfig::from_json(j), d.str());
    CHECK(fs::exists(d.path / "plan.json"));
    CHECK(p["pilot_points"].size() == 2);
    CHECK(p["q_opt"].get<double>() > 0.0);
    CHECK(p["suggested_n"].get<double>() > 0.0);
    CHECK(p["estimator"] == "bf_cv");
}

TEST_CASE("command line") {
    TempDir d("cli");
    const std::string log = d.str("log.txt");
    const std::string cfg = std::string(HYPERSURF_CONFIG_DIR) + "/toy_smoke.json";

    const auto t0 = std::chrono::steady_clock::now();
    CHECK(run_cli("run --config " + cfg + " --out " + d.str("smoke"), log) == 0);
    CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 10.0);
    for (const char* f : {"surface.csv", "surface.json", "variance.csv", "variance_summary.json", "ratio_estimate.json",
                          "manifest.json"})
        CHECK_MESSAGE(fs::exists(d.path / "smoke" / f), f);

    CHECK(run_cli("oracle --config " + cfg + " --out " + d.str("smoke") + " --estimate " + d.str("smoke"), log) == 0);
    CHECK(fs::exists(d.path / "smoke/oracle_z.csv"));

    // missing inputs exit with status 2
    CHECK(run_cli("run --config " + d.str("nope.json"), log) == 2);
    std::ofstream(d.path / "blvs.json") << R"({"model": {"type": "blvs", "dataset": "absent.csv"},
        "skeleton": [[0.5, 15]], "stage1": {"length": 10, "seed": 1}, "stage2": {"length": 10, "seed": 2},
        "grid": {"points": [[0.5, 15]]}})";
    CHECK(run_cli("run --config " + d.str("blvs.json") + " --out " + d.str("b"), log) == 2);
    CHECK(slurp(log).find("absent.csv") != std::string::npos);

    // bad arguments
    CHECK(run_cli("run --config " + cfg + " --stage 3", log) != 0);
    CHECK(run_cli("validate --replications 3", log) == 2);
}

}  // TEST_SUITE
