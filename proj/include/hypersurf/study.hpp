#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypersurf/density_family.hpp"
#include "hypersurf/surface.hpp"
#include "hypersurf/variance.hpp"

namespace hypersurf {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kVersion = "0.1.0";

struct StageConfig {
    std::vector<std::size_t> lengths;  // one per skeleton point
    std::size_t burn_in = 0;
    std::uint64_t seed = 0;

    std::size_t total() const;
};

struct ModelConfig {
    std::string type;  // "toy" or "blvs"
    std::string dataset;
    std::string response = "y";
    std::vector<std::string> binary;
    ToyModel::Options toy;
};

struct PlanConfig {
    std::vector<Hyperparameter> points;  // pilot h values; empty = whole grid
    double budget_seconds = 3600.0;
    std::string estimator = "bf";  // bf or bf_cv
};

// One study, read from a JSON file. Relative paths resolve against the
// directory holding the config.
struct StudyConfig {
    ModelConfig model;
    std::vector<Hyperparameter> skeleton;  // first entry is the baseline h1
    StageConfig stage1, stage2;
    std::vector<std::string> grid_names;
    std::vector<GridAxis> grid_axes;
    std::vector<Hyperparameter> grid_points;  // explicit list, used when no axes are given
    std::vector<std::string> functions;
    SpectralConfig spectral;
    std::string output = "out";
    bool write_chains = false;
    bool gradient = false;
    PlanConfig plan;

    nlohmann::json raw;

    static StudyConfig from_json(const nlohmann::json& j, const std::string& base_dir = ".");
    Grid grid() const;
    std::string hash() const;  // FNV-1a of the canonical JSON, hex
};

StudyConfig load_config(const std::string& path, const std::vector<std::string>& seed_overrides = {});

// "stage1=7", "stage2.seed=9" or any dotted path ending in "seed".
void apply_seed_override(nlohmann::json& raw, const std::string& kv);

enum class Stage { one, two, both };

struct RunSummary {
    std::string out_dir;
    std::size_t grid_points = 0;
    double stage1_seconds = 0.0;
    double stage2_seconds = 0.0;
    double t1 = 0.0;  // seconds per chain step
    double t2 = 0.0;  // seconds per grid term
};

// Writes ratio_estimate.json (stage 1), surface.csv, surface.json,
// variance.csv, variance_summary.json (stage 2) and manifest.json.
RunSummary cmd_run(const StudyConfig& cfg, Stage stage, const std::string& out_dir);

struct ComparisonReport {
    std::size_t points = 0;
    double rmse_bf = 0.0, rmse_bf_cv = 0.0;
    double max_abs_bf = 0.0, max_abs_bf_cv = 0.0;
    double z_mean = 0.0, z_sd = 0.0;  // bf_cv z-scores where se > 0
    std::vector<double> z;
    std::vector<std::pair<std::string, double>> rmse_pe;

    nlohmann::json to_json() const;
};

// Reads two surface CSVs with the same grid and compares estimate columns.
ComparisonReport compare_surfaces(const std::string& estimate_csv, const std::string& reference_csv);

// Writes oracle.csv (exact surface, same schema as surface.csv) and, when an
// estimate directory is given, oracle_comparison.json and oracle_z.csv.
std::optional<ComparisonReport> cmd_oracle(const StudyConfig& cfg, const std::string& out_dir,
                                           const std::string& estimate_dir = "");

// Pilot run at the configured sizes; measures t1 and t2, estimates v1, v2 at
// the plan points and writes plan.json.
nlohmann::json cmd_plan(const StudyConfig& cfg, const std::string& out_dir);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const;
};
CsvTable read_csv(const std::string& path);

}  // namespace hypersurf
