// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--configs DIR] [--known-red ID]... [ID]...
//
// With no IDs every criterion runs. Exit status is 0 when all selected
// criteria pass, 77 when the only failures are listed with --known-red and 1
// otherwise. The FAIL line is printed either way.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hypersurf/blvs.hpp"
#include "hypersurf/ratio_estimation.hpp"
#include "hypersurf/study.hpp"
#include "hypersurf/surface.hpp"
#include "hypersurf/validation.hpp"
#include "hypersurf/variance.hpp"

#ifndef HYPERSURF_CONFIG_DIR
#define HYPERSURF_CONFIG_DIR "configs"
#endif

using namespace hypersurf;

namespace {

std::string fmt(double v, int prec = 4) {
    std::ostringstream o;
    o.precision(prec);
    o << v;
    return o.str();
}

// Everything a BLVS criterion needs from one two-stage run.
struct BlvsRun {
    StudyConfig cfg;
    std::unique_ptr<blvs::Blvs> model;
    std::unique_ptr<Stage2Workspace> ws;
    std::vector<std::string> fids;
    double seconds = 0.0;
};

SamplePool draw(const blvs::Blvs& model, const StudyConfig& cfg, const StageConfig& st,
                const std::vector<FunctionOfTheta<blvs::ModelState>>& fns) {
    std::vector<std::vector<blvs::ModelState>> chains(cfg.skeleton.size());
    parallel_for(cfg.skeleton.size(), [&](std::size_t l) {
        chains[l] = model.sample_posterior(ChainSpec{cfg.skeleton[l], st.lengths[l], st.burn_in, derive_seed(st.seed, l)});
    });
    return make_pool(model, chains, fns);
}

BlvsRun run_blvs(const std::string& config_path, bool with_functions) {
    const auto t0 = std::chrono::steady_clock::now();
    BlvsRun r;
    r.cfg = load_config(config_path);
    r.model = std::make_unique<blvs::Blvs>(
        blvs::ingest_csv(r.cfg.model.dataset, r.cfg.model.response, r.cfg.model.binary));
    const SamplePool p1 = draw(*r.model, r.cfg, r.cfg.stage1, {});
    const auto ratios = estimate_ratios(build_log_weight_matrix(*r.model, r.cfg.skeleton, p1), r.cfg.spectral);
    const auto fns = with_functions ? r.model->functions(r.cfg.functions)
                                    : std::vector<FunctionOfTheta<blvs::ModelState>>{};
    SamplePool p2 = draw(*r.model, r.cfg, r.cfg.stage2, fns);
    r.fids = p2.function_ids;
    r.ws = std::make_unique<Stage2Workspace>(
        prepare_workspace(*r.model, r.cfg.skeleton, std::move(p2), ratios, r.cfg.spectral));
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

std::string skeleton1_config(const std::string& dir) { return dir + "/uscrime_skeleton1.json"; }
std::string refined_config(const std::string& dir) { return dir + "/uscrime_skeleton2.json"; }

CheckResult check_a1(const std::string& dir) {
    CheckResult c{"A1", "BLVS Bayes-factor surface vs enumeration", false, ""};
    const BlvsRun run = run_blvs(skeleton1_config(dir), false);
    const blvs::ModelSpace space(*run.model);
    const Grid grid = run.cfg.grid();
    const auto h1 = blvs::BlvsHyper::from(run.cfg.skeleton.front());
    const auto recs = surface(*run.ws, grid);
    double ss_cv = 0.0, ss = 0.0;
    for (const auto& r : recs) {
        const double exact = space.exact_bf(blvs::BlvsHyper::from(r.h), h1);
        ss_cv += (r.bf_cv - exact) * (r.bf_cv - exact);
        ss += (r.bf - exact) * (r.bf - exact);
    }
    const double n = static_cast<double>(recs.size());
    const double rmse_cv = std::sqrt(ss_cv / n);
    c.pass = recs.size() == 924 && rmse_cv < 0.06;
    c.detail = std::to_string(recs.size()) + " points, cv rmse " + fmt(rmse_cv) + " (limit 0.06), plain rmse " +
               fmt(std::sqrt(ss / n)) + ", " + fmt(run.seconds, 3) + " s";
    return c;
}

CheckResult check_a2(const std::string& dir) {
    CheckResult c{"A2", "BLVS surface argmax and B((w,225),(0.65,20))", false, ""};
    const BlvsRun run = run_blvs(skeleton1_config(dir), false);
    const Grid grid = run.cfg.grid();
    const auto recs = surface(*run.ws, grid);
    std::size_t best = 0;
    for (std::size_t i = 1; i < recs.size(); ++i)
        if (recs[i].bf_cv > recs[best].bf_cv) best = i;
    const double w = recs[best].h[0], g = recs[best].h[1];
    const bool arg_ok = w >= 0.56 - 1e-9 && w <= 0.74 + 1e-9 && g >= 10 - 1e-9 && g <= 31 + 1e-9;

    const double ref = bf_cv_hat(*run.ws, Hyperparameter{0.65, 20.0}).estimate;
    std::set<double> ws_axis;
    for (const auto& p : grid.points) ws_axis.insert(p[0]);
    double worst = 0.0;
    for (double wv : ws_axis) worst = std::max(worst, bf_cv_hat(*run.ws, Hyperparameter{wv, 225.0}).estimate / ref);
    c.pass = arg_ok && worst < 0.02;
    c.detail = "argmax (" + fmt(w) + ", " + fmt(g) + ") value " + fmt(recs[best].bf_cv) +
               ", max_w B((w,225),(0.65,20)) " + fmt(worst, 3) + " (limit 0.02)";
    return c;
}

CheckResult check_a3(const std::string& dir) {
    CheckResult c{"A3", "BLVS inclusion probabilities at (0.65,20) and (0.5,20)", false, ""};
    // Published values, variables in dataset column order.
    const std::map<std::string, std::vector<double>> published = {
        {"0.65,20", {0.93, 0.39, 0.99, 0.70, 0.51, 0.34, 0.35, 0.52, 0.83, 0.40, 0.76, 0.55, 1.00, 0.96, 0.55}},
        {"0.5,20", {0.85, 0.29, 0.97, 0.67, 0.45, 0.22, 0.22, 0.38, 0.70, 0.27, 0.62, 0.38, 1.00, 0.90, 0.39}},
    };
    const BlvsRun run = run_blvs(skeleton1_config(dir), true);
    const blvs::ModelSpace space(*run.model);
    const auto& names = run.model->data().names;
    Grid grid{{"w", "g"}, {Hyperparameter{0.65, 20.0}, Hyperparameter{0.5, 20.0}}};
    auto recs = surface(*run.ws, grid, SurfaceOptions{run.fids, false});
    annotate_variance(*run.ws, recs, run.fids);

    double worst_pub = 0.0, worst_z = 0.0;
    std::string worst_pub_at, worst_z_at;
    bool ok = true;
    for (const auto& r : recs) {
        const std::string key = fmt(r.h[0]) + "," + fmt(r.h[1]);
        const auto exact = space.enumerate_posterior(blvs::BlvsHyper::from(r.h)).inclusion_probs;
        const auto& pub = published.at(key);
        for (std::size_t i = 0; i < names.size(); ++i) {
            const std::size_t j = std::find(run.fids.begin(), run.fids.end(), "gamma:" + names[i]) - run.fids.begin();
            if (j == run.fids.size()) throw Error("missing inclusion function for " + names[i]);
            const double est = r.pe[j];
            const double se = r.var_pe[j].se;
            const double dpub = std::abs(est - pub[i]);
            const double z = std::abs(est - exact(static_cast<Eigen::Index>(i))) / se;
            if (dpub > worst_pub) worst_pub = dpub, worst_pub_at = names[i] + "@(" + key + ")";
            if (z > worst_z) worst_z = z, worst_z_at = names[i] + "@(" + key + ")";
            ok = ok && dpub <= 0.03 + 1e-12 && std::isfinite(z) && z < 3.0;
        }
    }
    c.pass = ok;
    c.detail = "max |est - published| " + fmt(worst_pub, 3) + " at " + worst_pub_at + " (limit 0.03), max |z| vs enumeration " +
               fmt(worst_z, 3) + " at " + worst_z_at + " (limit 3)";
    return c;
}

CheckResult check_a4(const std::string& dir) {
    CheckResult c{"A4", "max variance reduction from skeleton refinement", false, ""};
    auto max_var = [](const std::string& path, Hyperparameter& at) {
        const BlvsRun run = run_blvs(path, false);
        const auto vs = variance_surface(*run.ws, run.cfg.grid(), EstimatorKind::bf_cv);
        at = vs.points[vs.argmax];
        return vs.max_total;
    };
    Hyperparameter at1, at2;
    const double v1 = max_var(skeleton1_config(dir), at1);
    const double v2 = max_var(refined_config(dir), at2);
    const double ratio = v1 / v2;
    c.pass = ratio >= 6.0 && ratio <= 12.0;
    c.detail = "max var " + fmt(v1) + " at " + at1.str() + " vs " + fmt(v2) + " at " + at2.str() + ", ratio " + fmt(ratio, 3) +
               " (accept 6-12)";
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    std::string dir = HYPERSURF_CONFIG_DIR;
    std::set<std::string> wanted, known_red;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--configs" && i + 1 < argc)
            dir = argv[++i];
        else if (a == "--known-red" && i + 1 < argc)
            known_red.insert(argv[++i]);
        else
            wanted.insert(a);
    }
    set_warning_sink([](const std::string&) {});

    const ValidationOptions vopt;
    const std::vector<std::pair<std::string, std::function<CheckResult()>>> checks = {
        {"A1", [&] { return check_a1(dir); }},
        {"A2", [&] { return check_a2(dir); }},
        {"A3", [&] { return check_a3(dir); }},
        {"A4", [&] { return check_a4(dir); }},
        {"V1", [&] { return validate_ratio_coverage(vopt); }},
        {"V2", [&] { return validate_variance_formulas(vopt); }},
        {"V3", [&] { return validate_exact_identities(vopt); }},
        {"V4", [&] { return validate_cv_reduction(vopt); }},
    };

    bool unexpected = false, any_fail = false;
    for (const auto& [id, fn] : checks) {
        if (!wanted.empty() && !wanted.count(id)) continue;
        CheckResult r;
        try {
            r = fn();
        } catch (const std::exception& e) {
            r = CheckResult{id, "error", false, e.what()};
        }
        std::cout << (r.pass ? "PASS " : "FAIL ") << id << ' ' << r.name << ": " << r.detail << std::endl;
        if (!r.pass) {
            any_fail = true;
            if (!known_red.count(id)) unexpected = true;
        }
    }
    if (unexpected) return 1;
    return any_fail ? 77 : 0;
}
