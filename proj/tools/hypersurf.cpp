#include <iostream>

#include <CLI11.hpp>

#include "hypersurf/study.hpp"
#include "hypersurf/validation.hpp"

using namespace hypersurf;

namespace {

int fail(const std::exception& e, int code) {
    std::cerr << "hypersurf: " << e.what() << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bayes-factor and posterior-expectation surfaces from multi-chain MCMC output"};
    app.require_subcommand(1);

    std::string config_path, out_dir, stage_name = "both", estimate_dir;
    std::vector<std::string> seed_overrides;
    unsigned threads = 0;
    app.add_option("--threads", threads, "worker threads (0 = all cores)");

    auto* run = app.add_subcommand("run", "two-stage estimation over the configured grid");
    run->add_option("--config", config_path, "study config (JSON)")->required();
    run->add_option("--out", out_dir, "output directory (default: config output)");
    run->add_option("--stage", stage_name, "1, 2 or both")->check(CLI::IsMember({"1", "2", "both"}));
    run->add_option("--seed-override", seed_overrides, "KEY=VALUE, e.g. stage2=17");

    auto* oracle = app.add_subcommand("oracle", "exact surfaces and comparison with an estimate directory");
    oracle->add_option("--config", config_path, "study config (JSON)")->required();
    oracle->add_option("--out", out_dir, "output directory (default: config output)");
    oracle->add_option("--estimate", estimate_dir, "directory holding surface.csv to compare");

    auto* plan = app.add_subcommand("plan", "pilot run and stage-size planning");
    plan->add_option("--config", config_path, "pilot config (JSON)")->required();
    plan->add_option("--out", out_dir, "output directory (default: config output)");
    plan->add_option("--seed-override", seed_overrides, "KEY=VALUE");

    ValidationOptions vopt;
    auto* validate = app.add_subcommand("validate", "toy replication suites");
    validate->add_option("--replications", vopt.replications, "replications per suite (default: suite-specific)");
    validate->add_option("--seed", vopt.seed, "base seed");
    validate->add_option("--corrupt-d", vopt.corrupt_d, "scale stage-2 ratios by this factor (negative control)");

    CLI11_PARSE(app, argc, argv);
    set_num_threads(threads);

    try {
        if (*validate) {
            bool all = true;
            for (const auto& r : run_validation(vopt)) {
                std::cout << (r.pass ? "PASS " : "FAIL ") << r.id << ' ' << r.name << ": " << r.detail << '\n';
                all = all && r.pass;
            }
            return all ? 0 : 1;
        }
        const StudyConfig cfg = load_config(config_path, seed_overrides);
        const std::string dir = out_dir.empty() ? cfg.output : out_dir;
        if (*run) {
            const Stage st = stage_name == "1" ? Stage::one : stage_name == "2" ? Stage::two : Stage::both;
            const auto s = cmd_run(cfg, st, dir);
            std::cout << "wrote " << s.out_dir << " (" << s.grid_points << " grid points, stage 1 " << s.stage1_seconds
                      << " s, stage 2 " << s.stage2_seconds << " s)\n";
        } else if (*oracle) {
            const auto rep = cmd_oracle(cfg, dir, estimate_dir);
            if (rep)
                std::cout << rep->to_json().dump(2) << '\n';
            else
                std::cout << "wrote " << dir << "/oracle.csv\n";
        } else if (*plan) {
            std::cout << cmd_plan(cfg, dir).dump(2) << '\n';
        }
    } catch (const InputNotFound& e) {
        return fail(e, 2);
    } catch (const InvalidArgument& e) {
        return fail(e, 2);
    } catch (const std::exception& e) {
        return fail(e, 1);
    }
    return 0;
}
