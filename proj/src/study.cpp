#include "hypersurf/study.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hypersurf/blvs.hpp"
#include "hypersurf/ratio_estimation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hypersurf {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

Hyperparameter to_hyper(const json& j) {
    if (j.is_number()) return Hyperparameter{j.get<double>()};
    return Hyperparameter(j.get<std::vector<double>>());
}

std::vector<Hyperparameter> parse_points(const json& j) {
    std::vector<Hyperparameter> out;
    if (j.is_object() && j.contains("product")) {
        std::vector<std::vector<double>> axes = j["product"].get<std::vector<std::vector<double>>>();
        std::vector<double> cur(axes.size());
        auto rec = [&](auto&& self, std::size_t d) -> void {
            if (d == axes.size()) {
                out.emplace_back(cur);
                return;
            }
            for (double v : axes[d]) {
                cur[d] = v;
                self(self, d + 1);
            }
        };
        if (!axes.empty()) rec(rec, 0);
        return out;
    }
    for (const auto& p : j) out.push_back(to_hyper(p));
    return out;
}

StageConfig parse_stage(const json& j, std::size_t k, const std::string& name) {
    StageConfig s;
    if (!j.contains("length")) throw InvalidArgument("config: " + name + ".length is required");
    const auto& len = j["length"];
    if (len.is_array()) {
        s.lengths = len.get<std::vector<std::size_t>>();
        if (s.lengths.size() != k)
            throw InvalidArgument("config: " + name + ".length lists " + std::to_string(s.lengths.size()) +
                                  " chains for " + std::to_string(k) + " skeleton points");
    } else {
        s.lengths.assign(k, len.get<std::size_t>());
    }
    for (auto l : s.lengths)
        if (l == 0) throw InvalidArgument("config: " + name + " chain length must be positive");
    s.burn_in = j.value("burn_in", std::size_t{0});
    if (!j.contains("seed")) throw InvalidArgument("config: " + name + ".seed is required");
    s.seed = j["seed"].get<std::uint64_t>();
    return s;
}

std::string fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InputNotFound("cannot open '" + path.string() + "'");
    return json::parse(in);
}

// Calls f(model, functions) with the configured model.
template <class F>
auto with_model(const StudyConfig& cfg, F&& f) {
    if (cfg.model.type == "toy") {
        ToyModel model(cfg.model.toy);
        return f(model, ToyModel::functions(cfg.functions));
    }
    blvs::Blvs model(blvs::ingest_csv(cfg.model.dataset, cfg.model.response, cfg.model.binary));
    return f(model, model.functions(cfg.functions));
}

void write_chain(const fs::path& path, const ToyModel&, const std::vector<double>& chain) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write chain file '" + path.string() + "'");
    out << "sweep,theta\n";
    for (std::size_t i = 0; i < chain.size(); ++i) out << i + 1 << ',' << num(chain[i]) << '\n';
}

void write_chain(const fs::path& path, const blvs::Blvs& model, const std::vector<blvs::ModelState>& chain) {
    blvs::write_chain_csv(path.string(), model, chain);
}

template <class M, class State = typename M::state_type>
SamplePool draw_pool(const M& model, const std::vector<Hyperparameter>& skeleton, const StageConfig& st,
                     const std::vector<FunctionOfTheta<State>>& fns, const fs::path* chain_dir, const std::string& tag) {
    std::vector<std::vector<State>> chains(skeleton.size());
    parallel_for(skeleton.size(), [&](std::size_t l) {
        chains[l] = model.sample_posterior(ChainSpec{skeleton[l], st.lengths[l], st.burn_in, derive_seed(st.seed, l)});
    });
    if (chain_dir)
        for (std::size_t l = 0; l < chains.size(); ++l)
            write_chain(*chain_dir / (tag + "_chain_" + std::to_string(l + 1) + ".csv"), model, chains[l]);
    return make_pool(model, chains, fns);
}

void write_surface_csv(const fs::path& path, const Grid& grid, const std::vector<std::string>& fids,
                       const std::vector<SurfaceRecord>& recs, bool gradient) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    for (const auto& n : grid.coord_names) out << n << ',';
    out << "bf_hat,bf_cv_hat,se_bf,se_bf_cv";
    for (const auto& f : fids) out << ",pe_" << f << ",se_" << f;
    if (gradient)
        for (const auto& n : grid.coord_names) out << ",dbf_d" << n;
    out << '\n';
    for (const auto& r : recs) {
        for (double c : r.h.coords) out << num(c) << ',';
        out << num(r.bf) << ',' << num(r.bf_cv) << ',' << num(r.var_bf.se) << ',' << num(r.var_bf_cv.se);
        for (std::size_t j = 0; j < fids.size(); ++j) out << ',' << num(r.pe[j]) << ',' << num(r.var_pe[j].se);
        if (gradient)
            for (Eigen::Index c = 0; c < r.gradient.size(); ++c) out << ',' << num(r.gradient(c));
        out << '\n';
    }
}

void write_variance_csv(const fs::path& path, const Grid& grid, const std::vector<SurfaceRecord>& recs) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    for (const auto& n : grid.coord_names) out << n << ',';
    out << "estimator,stage1_term,stage2_term,total,se\n";
    for (const auto& r : recs) {
        for (const auto& [name, v] : {std::pair{"bf", &r.var_bf}, std::pair{"bf_cv", &r.var_bf_cv}}) {
            for (double c : r.h.coords) out << num(c) << ',';
            out << name << ',' << num(v->stage1_term) << ',' << num(v->stage2_term) << ',' << num(v->total) << ','
                << num(v->se) << '\n';
        }
    }
}

json variance_summary(const std::vector<SurfaceRecord>& recs, const Grid& grid) {
    json j;
    j["schema_version"] = kSchemaVersion;
    for (auto kind : {EstimatorKind::bf, EstimatorKind::bf_cv}) {
        const auto vs = variance_surface(recs, kind);
        const auto& b = vs.breakdown[vs.argmax];
        json e;
        e["argmax"] = vs.points[vs.argmax].coords;
        e["max_total"] = vs.max_total;
        e["stage1_term"] = b.stage1_term;
        e["stage2_term"] = b.stage2_term;
        e["se"] = b.se;
        e["q"] = b.q;
        j[kind == EstimatorKind::bf ? "bf" : "bf_cv"] = e;
    }
    j["coord_names"] = grid.coord_names;
    j["grid_points"] = recs.size();
    return j;
}

json ratio_json(const RatioEstimate& r, const StudyConfig& cfg) {
    json j = to_json(r);
    j["config_hash"] = cfg.hash();
    j["stage1_seed"] = cfg.stage1.seed;
    return j;
}

void check_skeleton_match(const RatioEstimate& r, const StudyConfig& cfg) {
    if (r.skeleton.empty()) return;
    bool ok = r.skeleton.size() == cfg.skeleton.size();
    for (std::size_t s = 0; ok && s < r.skeleton.size(); ++s)
        ok = r.skeleton[s].dim() == cfg.skeleton[s].dim() &&
             std::equal(r.skeleton[s].coords.begin(), r.skeleton[s].coords.end(), cfg.skeleton[s].coords.begin(),
                        [](double a, double b) { return std::abs(a - b) <= 1e-12 * (1.0 + std::abs(b)); });
    if (!ok) throw InvalidArgument("stored ratio estimate was computed for a different skeleton");
}

json load_manifest(const fs::path& dir) {
    const fs::path p = dir / "manifest.json";
    if (fs::exists(p)) {
        try {
            return read_json(p);
        } catch (const std::exception&) {
        }
    }
    return json::object();
}

}  // namespace

std::size_t StageConfig::total() const {
    std::size_t t = 0;
    for (auto l : lengths) t += l;
    return t;
}

StudyConfig StudyConfig::from_json(const json& j, const std::string& base_dir) {
    StudyConfig c;
    c.raw = j;
    const auto& m = j.at("model");
    c.model.type = m.at("type").get<std::string>();
    if (c.model.type == "toy") {
        c.model.toy.y_obs = m.value("y", 0.0);
        c.model.toy.prior_sd = m.value("prior_sd", 1.0);
        c.model.toy.like_sd = m.value("like_sd", 1.0);
        c.model.toy.phi = m.value("phi", 0.5);
        const std::string s = m.value("sampler", std::string("iid"));
        if (s == "iid")
            c.model.toy.sampler = ToyModel::Sampler::iid;
        else if (s == "ar1")
            c.model.toy.sampler = ToyModel::Sampler::ar1;
        else
            throw InvalidArgument("config: toy sampler must be iid or ar1");
    } else if (c.model.type == "blvs") {
        fs::path p = m.at("dataset").get<std::string>();
        if (p.is_relative()) p = fs::path(base_dir) / p;
        c.model.dataset = p.lexically_normal().string();
        c.model.response = m.value("response", std::string("y"));
        c.model.binary = m.value("binary", std::vector<std::string>{});
    } else {
        throw InvalidArgument("config: unknown model type '" + c.model.type + "'");
    }

    c.skeleton = parse_points(j.at("skeleton"));
    if (c.skeleton.empty()) throw InvalidArgument("config: skeleton must be nonempty");
    for (const auto& h : c.skeleton)
        if (h.dim() != c.skeleton[0].dim()) throw InvalidArgument("config: skeleton points differ in dimension");
    if (j.contains("baseline")) {
        const Hyperparameter b = to_hyper(j["baseline"]);
        auto it = std::find(c.skeleton.begin(), c.skeleton.end(), b);
        if (it == c.skeleton.end()) throw InvalidArgument("config: baseline " + b.str() + " is not a skeleton point");
        std::rotate(c.skeleton.begin(), it, it + 1);
    }
    const std::size_t k = c.skeleton.size();
    c.stage1 = parse_stage(j.at("stage1"), k, "stage1");
    c.stage2 = parse_stage(j.at("stage2"), k, "stage2");
    if (c.stage1.seed == c.stage2.seed)
        throw InvalidArgument("config: stage1 and stage2 seeds must differ (the stages must be independent)");

    c.grid_names = c.model.type == "toy" ? std::vector<std::string>{"h"} : std::vector<std::string>{"w", "g"};
    if (j.contains("grid")) {
        const auto& g = j["grid"];
        if (g.contains("names")) c.grid_names = g["names"].get<std::vector<std::string>>();
        if (g.contains("axes")) {
            for (const auto& a : g["axes"])
                c.grid_axes.push_back({a.at("min").get<double>(), a.at("max").get<double>(), a.at("step").get<double>()});
            if (c.grid_axes.size() != c.grid_names.size())
                throw InvalidArgument("config: grid needs one axis per hyperparameter coordinate");
        } else if (g.contains("points")) {
            c.grid_points = parse_points(g["points"]);
        }
    }
    if (c.grid_axes.empty() && c.grid_points.empty()) c.grid_points = c.skeleton;

    c.functions = j.value("functions", std::vector<std::string>{});
    if (j.contains("spectral")) {
        c.spectral.truncation_constant = j["spectral"].value("truncation_constant", c.spectral.truncation_constant);
        c.spectral.min_length = j["spectral"].value("min_length", c.spectral.min_length);
    }
    c.output = j.value("output", std::string("out"));
    c.write_chains = j.value("write_chains", false);
    c.gradient = j.value("gradient", false);
    if (j.contains("plan")) {
        const auto& p = j["plan"];
        if (p.contains("points")) c.plan.points = parse_points(p["points"]);
        c.plan.budget_seconds = p.value("budget_seconds", c.plan.budget_seconds);
        c.plan.estimator = p.value("estimator", c.plan.estimator);
        if (c.plan.estimator != "bf" && c.plan.estimator != "bf_cv")
            throw InvalidArgument("config: plan.estimator must be bf or bf_cv");
    }
    return c;
}

Grid StudyConfig::grid() const {
    if (!grid_axes.empty()) return make_product_grid(grid_names, grid_axes);
    Grid g;
    g.coord_names = grid_names;
    g.points = grid_points;
    return g;
}

std::string StudyConfig::hash() const { return fnv1a(raw.dump()); }

void apply_seed_override(json& raw, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidArgument("seed override must look like KEY=VALUE, got '" + kv + "'");
    std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);
    if (key.find('.') == std::string::npos) key += ".seed";
    if (key.size() < 4 || key.substr(key.size() - 4) != "seed")
        throw InvalidArgument("seed override key must name a seed, got '" + key + "'");
    std::uint64_t seed;
    try {
        if (val.empty() || !std::isdigit(static_cast<unsigned char>(val[0]))) throw std::invalid_argument("sign");
        std::size_t used = 0;
        seed = std::stoull(val, &used);
        if (used != val.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
        throw InvalidArgument("seed override value must be an unsigned integer, got '" + val + "'");
    }
    json* node = &raw;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i])) throw InvalidArgument("seed override: config has no section '" + parts[i] + "'");
        node = &(*node)[parts[i]];
    }
    (*node)[parts.back()] = seed;
}

StudyConfig load_config(const std::string& path, const std::vector<std::string>& seed_overrides) {
    std::ifstream in(path);
    if (!in) throw InputNotFound("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
        throw InvalidArgument("config file '" + path + "' is not valid JSON: " + e.what());
    }
    for (const auto& kv : seed_overrides) apply_seed_override(j, kv);
    try {
        return StudyConfig::from_json(j, fs::path(path).parent_path().string());
    } catch (const json::exception& e) {
        throw InvalidArgument("config file '" + path + "': " + e.what());
    }
}

RunSummary cmd_run(const StudyConfig& cfg, Stage stage, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    RunSummary summary;
    summary.out_dir = out_dir;
    json manifest = load_manifest(dir);
    manifest["schema_version"] = kSchemaVersion;
    manifest["version"] = kVersion;
    manifest["config_hash"] = cfg.hash();
    manifest["config"] = cfg.raw;
    manifest["threads"] = num_threads();
    manifest["compiler"] = __VERSION__;
    if (!manifest.contains("outputs")) manifest["outputs"] = json::object();

    with_model(cfg, [&](const auto& model, const auto& fns) {
        const fs::path* chain_dir = cfg.write_chains ? &dir : nullptr;
        RatioEstimate ratios;
        if (stage != Stage::two) {
            const auto t0 = Clock::now();
            const auto fns0 = decltype(fns){};
            const SamplePool pool = draw_pool(model, cfg.skeleton, cfg.stage1, fns0, chain_dir, "stage1");
            const double ts = seconds_since(t0);
            const auto lw = build_log_weight_matrix(model, cfg.skeleton, pool);
            ratios = estimate_ratios(lw, cfg.spectral);
            ratios.skeleton = cfg.skeleton;
            write_json(dir / "ratio_estimate.json", ratio_json(ratios, cfg));
            summary.stage1_seconds = seconds_since(t0);
            const double steps = static_cast<double>(cfg.stage1.total() + cfg.stage1.burn_in * cfg.skeleton.size());
            summary.t1 = ts / steps;
            manifest["stage1"] = {{"seed", cfg.stage1.seed},
                                  {"lengths", cfg.stage1.lengths},
                                  {"burn_in", cfg.stage1.burn_in},
                                  {"wall_seconds", summary.stage1_seconds},
                                  {"t1_seconds_per_step", summary.t1},
                                  {"solver_iterations", ratios.solver.iterations},
                                  {"solver_gradient_norm", ratios.solver.gradient_norm}};
            manifest["outputs"]["ratio_estimate"] = "ratio_estimate.json";
        }
        if (stage == Stage::one) return;
        if (stage == Stage::two) {
            ratios = ratio_estimate_from_json(read_json(dir / "ratio_estimate.json"));
            check_skeleton_match(ratios, cfg);
        }
        const auto t0 = Clock::now();
        SamplePool pool = draw_pool(model, cfg.skeleton, cfg.stage2, fns, chain_dir, "stage2");
        const double ts = seconds_since(t0);
        const auto fids = pool.function_ids;
        const Stage2Workspace ws = prepare_workspace(model, cfg.skeleton, std::move(pool), ratios, cfg.spectral);
        const Grid grid = cfg.grid();
        const auto te = Clock::now();
        const std::size_t evals_before = model.state_evaluations();
        SurfaceOptions opt{fids, cfg.gradient};
        auto recs = surface(ws, grid, opt);
        const double t_grid = seconds_since(te);
        annotate_variance(ws, recs, fids);
        if (model.state_evaluations() != evals_before)
            throw Error("internal: grid evaluation re-entered the model's density code");
        write_surface_csv(dir / "surface.csv", grid, fids, recs, cfg.gradient);
        write_variance_csv(dir / "variance.csv", grid, recs);
        write_json(dir / "variance_summary.json", variance_summary(recs, grid));
        json side;
        side["schema_version"] = kSchemaVersion;
        side["config_hash"] = cfg.hash();
        side["stage1_seed"] = cfg.stage1.seed;
        side["stage2_seed"] = cfg.stage2.seed;
        side["d_hat"] = std::vector<double>(ratios.d_hat.data(), ratios.d_hat.data() + ratios.d_hat.size());
        side["d_hat_source"] = stage == Stage::two ? "ratio_estimate.json (stored)" : "ratio_estimate.json (this run)";
        side["N"] = ratios.N;
        side["n"] = ws.n();
        side["q"] = ws.q();
        side["coord_names"] = grid.coord_names;
        side["functions"] = fids;
        side["cv_design_rank"] = ws.design_rank;
        std::size_t warned = 0;
        for (const auto& r : recs) warned += r.warnings.empty() ? 0 : 1;
        side["points_with_warnings"] = warned;
        write_json(dir / "surface.json", side);
        summary.grid_points = grid.size();
        summary.stage2_seconds = seconds_since(t0);
        const double steps = static_cast<double>(cfg.stage2.total() + cfg.stage2.burn_in * cfg.skeleton.size());
        if (summary.t1 == 0.0) summary.t1 = ts / steps;
        summary.t2 = t_grid / (static_cast<double>(grid.size()) * static_cast<double>(ws.n()));
        manifest["stage2"] = {{"seed", cfg.stage2.seed},
                              {"lengths", cfg.stage2.lengths},
                              {"burn_in", cfg.stage2.burn_in},
                              {"wall_seconds", summary.stage2_seconds},
                              {"t2_seconds_per_term", summary.t2},
                              {"grid_points", grid.size()}};
        manifest["outputs"]["surface"] = "surface.csv";
        manifest["outputs"]["surface_metadata"] = "surface.json";
        manifest["outputs"]["variance"] = "variance.csv";
        manifest["outputs"]["variance_summary"] = "variance_summary.json";
    });
    write_json(dir / "manifest.json", manifest);
    return summary;
}

std::size_t CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    throw DataError("CSV has no column '" + name + "'");
}

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputNotFound("cannot open '" + path + "'");
    CsvTable t;
    std::string line;
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) out.push_back(cell);
        if (!s.empty() && s.back() == ',') out.emplace_back();
        return out;
    };
    if (!std::getline(in, line)) throw DataError("'" + path + "' is empty");
    t.header = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        t.rows.push_back(split(line));
        if (t.rows.back().size() != t.header.size()) throw DataError("'" + path + "' has a ragged row");
    }
    return t;
}

json ComparisonReport::to_json() const {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["points"] = points;
    j["rmse_bf"] = rmse_bf;
    j["rmse_bf_cv"] = rmse_bf_cv;
    j["max_abs_error_bf"] = max_abs_bf;
    j["max_abs_error_bf_cv"] = max_abs_bf_cv;
    j["z_mean_bf_cv"] = z_mean;
    j["z_sd_bf_cv"] = z_sd;
    json pe = json::object();
    for (const auto& [id, v] : rmse_pe) pe[id] = v;
    j["rmse_pe"] = pe;
    return j;
}

ComparisonReport compare_surfaces(const std::string& estimate_csv, const std::string& reference_csv) {
    const CsvTable est = read_csv(estimate_csv);
    const CsvTable ref = read_csv(reference_csv);
    if (est.rows.size() != ref.rows.size()) throw DataError("surfaces have different numbers of grid points");
    const std::size_t nc = est.column("bf_hat");
    if (ref.column("bf_hat") != nc) throw DataError("surfaces have different coordinate columns");
    auto d = [](const std::string& s) { return std::stod(s); };
    ComparisonReport r;
    r.points = est.rows.size();
    const std::size_t bf = nc, cv = est.column("bf_cv_hat"), se = est.column("se_bf_cv");
    const std::size_t rbf = ref.column("bf_hat"), rcv = ref.column("bf_cv_hat");
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> pe_cols;
    for (std::size_t c = 0; c < est.header.size(); ++c)
        if (est.header[c].rfind("pe_", 0) == 0)
            for (std::size_t rc = 0; rc < ref.header.size(); ++rc)
                if (ref.header[rc] == est.header[c]) pe_cols.push_back({est.header[c].substr(3), {c, rc}});
    std::vector<double> pe_sq(pe_cols.size(), 0.0);
    double s_bf = 0.0, s_cv = 0.0;
    for (std::size_t i = 0; i < r.points; ++i) {
        const auto& a = est.rows[i];
        const auto& b = ref.rows[i];
        for (std::size_t c = 0; c < nc; ++c)
            if (std::abs(d(a[c]) - d(b[c])) > 1e-9 * (1.0 + std::abs(d(b[c]))))
                throw DataError("surfaces disagree on grid coordinates at row " + std::to_string(i + 1));
        const double e1 = d(a[bf]) - d(b[rbf]);
        const double e2 = d(a[cv]) - d(b[rcv]);
        s_bf += e1 * e1;
        s_cv += e2 * e2;
        r.max_abs_bf = std::max(r.max_abs_bf, std::abs(e1));
        r.max_abs_bf_cv = std::max(r.max_abs_bf_cv, std::abs(e2));
        const double s = d(a[se]);
        r.z.push_back(s > 0 ? e2 / s : std::numeric_limits<double>::quiet_NaN());
        for (std::size_t j = 0; j < pe_cols.size(); ++j) {
            const double e = d(a[pe_cols[j].second.first]) - d(b[pe_cols[j].second.second]);
            pe_sq[j] += e * e;
        }
    }
    const double n = static_cast<double>(std::max<std::size_t>(r.points, 1));
    r.rmse_bf = std::sqrt(s_bf / n);
    r.rmse_bf_cv = std::sqrt(s_cv / n);
    for (std::size_t j = 0; j < pe_cols.size(); ++j) r.rmse_pe.push_back({pe_cols[j].first, std::sqrt(pe_sq[j] / n)});
    double zs = 0.0, zss = 0.0;
    std::size_t nz = 0;
    for (double z : r.z)
        if (std::isfinite(z)) {
            zs += z;
            zss += z * z;
            ++nz;
        }
    if (nz) {
        r.z_mean = zs / static_cast<double>(nz);
        r.z_sd = nz > 1 ? std::sqrt(std::max(0.0, (zss - static_cast<double>(nz) * r.z_mean * r.z_mean) /
                                                      static_cast<double>(nz - 1)))
                        : 0.0;
    }
    return r;
}

std::optional<ComparisonReport> cmd_oracle(const StudyConfig& cfg, const std::string& out_dir,
                                           const std::string& estimate_dir) {
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    const Grid grid = cfg.grid();
    const Hyperparameter& h1 = cfg.skeleton.front();
    std::vector<std::string> fids;
    std::vector<double> bf(grid.size());
    std::vector<std::vector<double>> pe(grid.size());

    if (cfg.model.type == "toy") {
        const ToyModel model(cfg.model.toy);
        for (const auto& f : ToyModel::functions(cfg.functions)) fids.push_back(f.id);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            model.check(grid.points[i]);
            bf[i] = model.exact_bf(grid.points[i][0], h1[0]);
            for (const auto& f : fids) pe[i].push_back(model.exact_pe(f, grid.points[i][0]));
        }
    } else {
        const blvs::Blvs model(blvs::ingest_csv(cfg.model.dataset, cfg.model.response, cfg.model.binary));
        std::vector<long> which;  // predictor index, -1 for the constant
        for (const auto& f : model.functions(cfg.functions)) {
            fids.push_back(f.id);
            if (f.id == "one") {
                which.push_back(-1);
                continue;
            }
            const std::string name = f.id.substr(f.id.find(':') + 1);
            const auto& names = model.data().names;
            which.push_back(std::find(names.begin(), names.end(), name) - names.begin());
        }
        const blvs::ModelSpace space(model);
        const auto b1 = blvs::BlvsHyper::from(h1);
        parallel_for(grid.size(), [&](std::size_t i) {
            const auto h = blvs::BlvsHyper::from(grid.points[i]);
            bf[i] = space.exact_bf(h, b1);
            if (fids.empty()) return;
            const auto en = space.enumerate_posterior(h);
            for (long w : which) pe[i].push_back(w < 0 ? 1.0 : en.inclusion_probs(w));
        });
    }

    {
        std::ofstream out(dir / "oracle.csv");
        if (!out) throw DataError("cannot write oracle.csv in '" + out_dir + "'");
        for (const auto& n : grid.coord_names) out << n << ',';
        out << "bf_hat,bf_cv_hat,se_bf,se_bf_cv";
        for (const auto& f : fids) out << ",pe_" << f << ",se_" << f;
        out << '\n';
        for (std::size_t i = 0; i < grid.size(); ++i) {
            for (double c : grid.points[i].coords) out << num(c) << ',';
            out << num(bf[i]) << ',' << num(bf[i]) << ",0,0";
            for (double v : pe[i]) out << ',' << num(v) << ",0";
            out << '\n';
        }
    }
    if (estimate_dir.empty()) return std::nullopt;
    auto rep = compare_surfaces((fs::path(estimate_dir) / "surface.csv").string(), (dir / "oracle.csv").string());
    write_json(dir / "oracle_comparison.json", rep.to_json());
    std::ofstream zout(dir / "oracle_z.csv");
    for (const auto& n : grid.coord_names) zout << n << ',';
    zout << "z_bf_cv\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
        for (double c : grid.points[i].coords) zout << num(c) << ',';
        zout << num(rep.z[i]) << '\n';
    }
    return rep;
}

json cmd_plan(const StudyConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    json out;
    with_model(cfg, [&](const auto& model, const auto&) {
        const auto t0 = Clock::now();
        using State = typename std::decay_t<decltype(model)>::state_type;
        const std::vector<FunctionOfTheta<State>> nofn;
        const SamplePool p1 = draw_pool(model, cfg.skeleton, cfg.stage1, nofn, nullptr, "");
        SamplePool p2 = draw_pool(model, cfg.skeleton, cfg.stage2, nofn, nullptr, "");
        const double steps = static_cast<double>(cfg.stage1.total() + cfg.stage2.total() +
                                                 2 * cfg.stage1.burn_in * cfg.skeleton.size());
        const double t1 = seconds_since(t0) / steps;
        auto ratios = estimate_ratios(build_log_weight_matrix(model, cfg.skeleton, p1), cfg.spectral);
        const Stage2Workspace ws = prepare_workspace(model, cfg.skeleton, std::move(p2), ratios, cfg.spectral);
        const Grid grid = cfg.grid();
        const auto& pts = cfg.plan.points.empty() ? grid.points : cfg.plan.points;
        const bool cv = cfg.plan.estimator == "bf_cv";

        const auto te = Clock::now();
        for (const auto& h : grid.points) (void)bf_hat(ws, point_terms(ws, h));
        const double t2 = seconds_since(te) / (static_cast<double>(grid.size()) * static_cast<double>(ws.n()));

        json per = json::array();
        std::vector<double> v1s, v2s, qs;
        for (const auto& h : pts) {
            const auto pt = point_terms(ws, h);
            double v1, v2;
            if (cv) {
                const auto est = bf_cv_hat(ws, pt);
                const auto w = w_hat(ws, pt, est.beta);
                v1 = w.size() ? w.dot(ratios.sigma_hat * w) : 0.0;
                v2 = sigma_sq_hat(ws, pt, est.beta);
            } else {
                const auto c = c_hat(ws, pt);
                v1 = c.size() ? c.dot(ratios.sigma_hat * c) : 0.0;
                v2 = tau_sq_hat(ws, pt);
            }
            json e{{"h", h.coords}, {"v1", v1}, {"v2", v2}};
            if (v1 > 0 && v2 > 0) {
                PlanInputs in{t1, t2, static_cast<double>(grid.size()), cfg.plan.budget_seconds, v1, v2};
                const double q = q_opt(in, 0).q_opt;
                e["q_opt"] = q;
                qs.push_back(q);
                v1s.push_back(v1);
                v2s.push_back(v2);
            }
            per.push_back(e);
        }
        auto median = [](std::vector<double> v) {
            if (v.empty()) return 0.0;
            std::sort(v.begin(), v.end());
            const std::size_t m = v.size() / 2;
            return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
        };
        out["schema_version"] = kSchemaVersion;
        out["config_hash"] = cfg.hash();
        out["estimator"] = cfg.plan.estimator;
        out["t1"] = t1;
        out["t2"] = t2;
        out["g"] = grid.size();
        out["T"] = cfg.plan.budget_seconds;
        out["pilot_points"] = per;
        if (qs.empty()) {
            out["q_opt"] = nullptr;
            out["note"] = "pilot variance components vanish at every plan point; no recommendation";
            return;
        }
        PlanInputs in{t1, t2, static_cast<double>(grid.size()), cfg.plan.budget_seconds, median(v1s), median(v2s)};
        const auto plan = q_opt(in);
        out["v1"] = in.v1;
        out["v2"] = in.v2;
        out["q_opt"] = plan.q_opt;
        out["q_opt_spread"] = {*std::min_element(qs.begin(), qs.end()), *std::max_element(qs.begin(), qs.end())};
        out["suggested_n"] = plan.n;
        out["suggested_N"] = plan.N;
        out["V_opt"] = plan.V_opt;
        json curve = json::array();
        for (const auto& [q, v] : plan.curve) curve.push_back({q, v});
        out["V_curve"] = curve;
    });
    write_json(fs::path(out_dir) / "plan.json", out);
    return out;
}

}  // namespace hypersurf
