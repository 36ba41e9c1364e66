// rigtune command-line interface.
//
//   rigtune repro     — re-run the embedded demo studies and write their CSV
//                       artifacts; exit 0 iff every pinned threshold passes.
//   rigtune calibrate — fit rig parameters to an expression corpus from a
//                       config file; writes the fitted rig and a report.
//   rigtune finetune  — run a stage pipeline over tracker parameters from a
//                       config file; writes the tuned rig, per-stage
//                       before/after CSVs, and optimizer trace dumps.
//
// Every command writes its artifacts under --out together with a
// manifest.json listing each file and a content hash. Outputs are
// deterministic for a fixed (config, seed): no timestamps or machine
// identifiers appear in any artifact.

#include <rigtune/experiments.hpp>
#include <rigtune/io.hpp>
#include <rigtune/subprocess_tracker.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rigtune;

namespace {

// ---------------------------------------------------------------------------
// Artifact store: collect named files, then write them plus a manifest whose
// hashes make byte-level determinism checkable.

class ArtifactStore {
public:
    ArtifactStore(std::string command, fs::path out_dir, std::uint64_t seed)
        : command_(std::move(command)), out_dir_(std::move(out_dir)), seed_(seed) {}

    void add(const std::string& name, std::string content) {
        files_[name] = std::move(content);
    }

    void add_json(const std::string& name, const json& j) {
        add(name, j.dump(2) + "\n");
    }

    void write() const {
        fs::create_directories(out_dir_);
        json manifest;
        manifest["format_version"] = 1;
        manifest["command"] = command_;
        manifest["seed"] = seed_;
        json outputs = json::array();
        for (const auto& [name, content] : files_) {
            write_file(out_dir_ / name, content);
            char hash[32];
            std::snprintf(hash, sizeof(hash), "%016llx",
                          static_cast<unsigned long long>(
                              fnv1a(content.data(), content.size())));
            outputs.push_back({{"file", name},
                               {"bytes", content.size()},
                               {"fnv1a", std::string(hash)}});
        }
        manifest["outputs"] = outputs;
        write_file(out_dir_ / "manifest.json", manifest.dump(2) + "\n");
    }

private:
    static void write_file(const fs::path& path, const std::string& content) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot open for writing: " + path.string());
        out << content;
        if (!out) throw ConfigError("write failed: " + path.string());
    }

    std::string command_;
    fs::path out_dir_;
    std::uint64_t seed_;
    std::map<std::string, std::string> files_;  // sorted => stable manifest
};

// ---------------------------------------------------------------------------
// Strict config parsing: unknown fields are rejected by name, and the
// format_version must match.

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& context) {
    if (!j.is_object()) throw ConfigError(context + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            std::string list;
            for (const std::string& name : allowed)
                list += (list.empty() ? "" : ", ") + name;
            throw ConfigError(context + ": unknown field '" + key +
                              "' (allowed: " + list + ")");
        }
    }
}

void check_format_version(const json& j, const std::string& context) {
    if (!j.contains("format_version"))
        throw ConfigError(context + ": missing format_version");
    if (!j["format_version"].is_number_integer() ||
        j["format_version"].get<int>() != 1)
        throw ConfigError(context + ": unsupported format_version (expected 1)");
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback,
         const std::string& context) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(context + ": field '" + key + "' has the wrong type");
    }
}

std::string get_string(const json& j, const std::string& key,
                       const std::string& context) {
    if (!j.contains(key) || !j.at(key).is_string())
        throw ConfigError(context + ": missing string field '" + key + "'");
    return j.at(key).get<std::string>();
}

json load_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

// Paths inside a config file are resolved against the config's directory.
std::string resolve_path(const std::string& raw, const fs::path& config_dir) {
    fs::path p(raw);
    if (p.is_absolute()) return p.string();
    return (config_dir / p).string();
}

// ---------------------------------------------------------------------------
// Shared corpus loading: rig + expression templates + geometry capture.

struct LoadedProblem {
    std::unique_ptr<Rig> rig;
    std::vector<ExpressionPair> pairs;
};

LoadedProblem load_problem(const json& config, const fs::path& config_dir,
                           const std::map<std::string, IndexList>& masks) {
    LoadedProblem out;
    out.rig = load_rig(resolve_path(get_string(config, "rig", "config"), config_dir));
    const std::vector<ExpressionTemplate> templates = load_expression_set(
        resolve_path(get_string(config, "expressions", "config"), config_dir));
    const std::map<std::string, Vec> capture = load_capture(
        resolve_path(get_string(config, "capture", "config"), config_dir));

    if (out.rig->control_names().empty())
        throw ConfigError("config: rig file carries no control names; expression "
                          "templates cannot be resolved");

    for (const ExpressionTemplate& tmpl : templates) {
        ExpressionPair pair;
        pair.name = tmpl.name;
        pair.kind = tmpl.kind;
        pair.weight = tmpl.weight;
        pair.c = resolve_controls(tmpl, out.rig->control_names());
        const auto found = capture.find(tmpl.name);
        if (found == capture.end())
            throw ConfigError("capture file has no geometry for expression '" +
                              tmpl.name + "'");
        pair.v = found->second;
        if (pair.v.size() != out.rig->m_geometry())
            throw ConfigError("expression '" + tmpl.name + "': geometry has " +
                              std::to_string(pair.v.size()) + " entries, rig expects " +
                              std::to_string(out.rig->m_geometry()));
        const auto masked = masks.find(tmpl.name);
        if (masked != masks.end()) pair.geometry_mask = masked->second;
        out.pairs.push_back(std::move(pair));
    }
    if (out.pairs.empty()) throw ConfigError("config: expression set is empty");
    return out;
}

std::map<std::string, IndexList> parse_masks(const json& config) {
    std::map<std::string, IndexList> masks;
    if (!config.contains("masks")) return masks;
    const json& m = config["masks"];
    if (!m.is_object())
        throw ConfigError("config: 'masks' must map expression names to row lists");
    for (const auto& [name, rows] : m.items()) {
        if (!rows.is_array())
            throw ConfigError("config: mask for '" + name + "' must be an array");
        IndexList list;
        for (const auto& row : rows) {
            if (!row.is_number_integer())
                throw ConfigError("config: mask rows for '" + name +
                                  "' must be integers");
            list.push_back(row.get<int>());
        }
        masks[name] = list;
    }
    return masks;
}

// ---------------------------------------------------------------------------
// repro

int cmd_repro(const std::string& out_dir, std::uint64_t seed, int jobs,
              const std::string& only) {
    const std::vector<std::string> known = repro_targets();
    std::vector<std::string> names;
    if (only.empty()) {
        names = known;
    } else {
        std::string item;
        std::stringstream stream(only);
        while (std::getline(stream, item, ',')) {
            if (item.empty()) continue;
            if (std::find(known.begin(), known.end(), item) == known.end()) {
                std::string list;
                for (const std::string& k : known)
                    list += (list.empty() ? "" : ", ") + k;
                throw ConfigError("unknown repro target '" + item +
                                  "' (known: " + list + ")");
            }
            names.push_back(item);
        }
        if (names.empty()) throw ConfigError("--only selected no targets");
    }

    // Targets are independent and deterministic; run them on a small pool and
    // then write everything in the stable target order.
    std::vector<ExperimentResult> results(names.size());
    std::vector<std::exception_ptr> errors(names.size());
    std::atomic<std::size_t> next{0};
    const int workers =
        std::max(1, std::min<int>(jobs, static_cast<int>(names.size())));
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= names.size()) return;
            try {
                results[i] = run_repro_target(names[i], seed);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& error : errors)
        if (error) std::rethrow_exception(error);

    ArtifactStore store("repro", out_dir, seed);
    json summary = json::array();
    int failed_checks = 0;
    for (const ExperimentResult& result : results) {
        int target_failures = 0;
        for (const CsvTable& table : result.artifacts)
            store.add(table.filename, table.to_string());
        json checks = json::array();
        for (const CheckResult& check : result.checks) {
            checks.push_back(
                {{"name", check.name}, {"pass", check.pass}, {"detail", check.detail}});
            if (!check.pass) {
                ++failed_checks;
                ++target_failures;
                std::printf("FAIL %s: %s: %s\n", result.target.c_str(),
                            check.name.c_str(), check.detail.c_str());
            }
        }
        summary.push_back({{"target", result.target},
                           {"pass", target_failures == 0},
                           {"checks", checks}});
        std::printf("%s %s (%zu checks, %zu artifacts)\n",
                    target_failures == 0 ? "ok  " : "FAIL", result.target.c_str(),
                    result.checks.size(), result.artifacts.size());
    }
    json report;
    report["format_version"] = 1;
    report["targets"] = summary;
    store.add_json("repro_report.json", report);
    store.write();
    std::printf("%s: %d failing check(s) across %zu target(s); artifacts in %s\n",
                failed_checks == 0 ? "PASS" : "FAIL", failed_checks, names.size(),
                out_dir.c_str());
    return failed_checks == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// calibrate

int cmd_calibrate(const std::string& config_path, const std::string& out_dir,
                  std::uint64_t seed, int /*jobs*/) {
    const fs::path config_file(config_path);
    const json config = load_json_file(config_file);
    check_format_version(config, "calibrate config");
    check_keys(config,
               {"format_version", "rig", "expressions", "capture", "options", "masks"},
               "calibrate config");
    json options = config.contains("options") ? config["options"] : json::object();
    check_keys(options,
               {"epsilon_reg", "augment", "activation_tol", "use_theta_prior"},
               "calibrate config options");
    const double epsilon_reg =
        get_or<double>(options, "epsilon_reg", 0.0, "calibrate options");
    const bool augment = get_or<bool>(options, "augment", false, "calibrate options");
    const double activation_tol =
        get_or<double>(options, "activation_tol", 1e-9, "calibrate options");
    const bool use_prior =
        get_or<bool>(options, "use_theta_prior", false, "calibrate options");

    const std::map<std::string, IndexList> masks = parse_masks(config);
    LoadedProblem problem = load_problem(config, config_file.parent_path(), masks);
    Rig& rig = *problem.rig;

    // Optional control augmentation: inactive target entries are replaced by
    // the initial rig's own tracking of the captured geometry.
    json augmented_log = json::array();
    if (augment) {
        const DirectTracker tracker(rig, SolveMode::lm(1e-8));
        for (ExpressionPair& pair : problem.pairs) {
            const Vec tracked = tracker.track(pair.v, rig.theta());
            const Vec c_aug = augment_controls(pair.c, tracked, activation_tol);
            json entries = json::array();
            for (int i = 0; i < pair.c.size(); ++i)
                if (c_aug[i] != pair.c[i]) entries.push_back(i);
            if (!entries.empty())
                augmented_log.push_back({{"expression", pair.name},
                                         {"controls", entries}});
            pair.c = c_aug;
        }
    }

    CalibrationConfig cal;
    cal.epsilon_reg = epsilon_reg;
    if (use_prior) cal.theta_prior = rig.theta();
    const Vec fitted = fit_rig_params(rig, problem.pairs, cal);

    const std::unique_ptr<Rig> fitted_rig = rig.clone();
    fitted_rig->set_theta(fitted);

    json per_expression = json::array();
    double total_residual = 0.0;
    for (const ExpressionPair& pair : problem.pairs) {
        const Vec r = fitted_rig->eval(pair.c, fitted) - pair.v;
        double sq = 0.0;
        if (pair.geometry_mask.empty()) {
            sq = r.squaredNorm();
        } else {
            // Masked rows are excluded from the fit and from the residual.
            for (int row = 0; row < r.size(); ++row)
                if (std::find(pair.geometry_mask.begin(), pair.geometry_mask.end(),
                              row) != pair.geometry_mask.end())
                    sq += r[row] * r[row];
        }
        total_residual += pair.weight * sq;
        json entry;
        entry["expression"] = pair.name;
        entry["kind"] = pair_kind_name(pair.kind);
        entry["weight"] = pair.weight;
        entry["residual_sq"] = sq;
        if (!pair.geometry_mask.empty()) {
            entry["masked_to_rows"] = pair.geometry_mask;
            entry["rows_excluded"] =
                static_cast<int>(fitted_rig->m_geometry()) -
                static_cast<int>(pair.geometry_mask.size());
        }
        per_expression.push_back(entry);
    }

    json report;
    report["format_version"] = 1;
    report["epsilon_reg"] = epsilon_reg;
    report["augment"] = augment;
    report["use_theta_prior"] = use_prior;
    report["total_weighted_residual_sq"] = total_residual;
    report["augmented"] = augmented_log;
    report["per_expression"] = per_expression;
    {
        char hash[32];
        std::snprintf(hash, sizeof(hash), "%016llx",
                      static_cast<unsigned long long>(fingerprint(fitted)));
        report["theta_fingerprint"] = std::string(hash);
    }

    ArtifactStore store("calibrate", out_dir, seed);
    store.add("fitted_rig.json", rig_to_json(*fitted_rig).dump(2) + "\n");
    store.add_json("report.json", report);
    store.write();
    std::printf("ok calibrate: %zu expressions, total weighted residual %.6e; "
                "artifacts in %s\n",
                problem.pairs.size(), total_residual, out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// finetune

OptimizerConfig parse_optimizer(const json& j, std::uint64_t seed) {
    check_keys(j,
               {"step_size", "max_iters", "line_search", "max_halvings",
                "sample_every", "trace_every", "grad_tol", "loss_tol"},
               "finetune config optimizer");
    OptimizerConfig opt;
    opt.step_size = get_or<double>(j, "step_size", opt.step_size, "optimizer");
    opt.max_iters = get_or<int>(j, "max_iters", opt.max_iters, "optimizer");
    const std::string search =
        get_or<std::string>(j, "line_search", "halving", "optimizer");
    if (search == "halving")
        opt.line_search = OptimizerConfig::LineSearch::halving;
    else if (search == "none")
        opt.line_search = OptimizerConfig::LineSearch::none;
    else
        throw ConfigError("optimizer: unknown line_search '" + search +
                          "' (allowed: halving, none)");
    opt.max_halvings = get_or<int>(j, "max_halvings", opt.max_halvings, "optimizer");
    opt.sample_every = get_or<int>(j, "sample_every", 10, "optimizer");
    opt.trace_every = get_or<int>(j, "trace_every", opt.trace_every, "optimizer");
    opt.grad_tol = get_or<double>(j, "grad_tol", opt.grad_tol, "optimizer");
    opt.loss_tol = get_or<double>(j, "loss_tol", opt.loss_tol, "optimizer");
    opt.seed = seed;
    return opt;
}

DiffConfig parse_diff(const json& j, std::uint64_t seed) {
    check_keys(j, {"mode", "directions", "step"}, "finetune config diff");
    const std::string mode = get_or<std::string>(j, "mode", "none", "diff");
    if (mode == "none") return DiffConfig::zero_dvhat();
    if (mode == "analytic") return DiffConfig::analytic_dvhat();
    if (mode != "estimated")
        throw ConfigError("diff: unknown mode '" + mode +
                          "' (allowed: none, analytic, estimated)");
    const int directions = get_or<int>(j, "directions", 2, "diff");
    if (directions < 1) throw ConfigError("diff: directions must be >= 1");
    StepPolicy policy = StepPolicy::adaptive(true);
    if (j.contains("step")) {
        const json& step = j["step"];
        if (step.is_string()) {
            const std::string name = step.get<std::string>();
            if (name == "adaptive")
                policy = StepPolicy::adaptive(false);
            else if (name == "adaptive_frozen")
                policy = StepPolicy::adaptive(true);
            else
                throw ConfigError("diff: unknown step policy '" + name +
                                  "' (allowed: adaptive, adaptive_frozen, or a "
                                  "number)");
        } else if (step.is_number()) {
            policy = StepPolicy::fixed_step(step.get<double>());
        } else {
            throw ConfigError("diff: 'step' must be a string policy or a number");
        }
    }
    return DiffConfig::estimated_dvhat(
        DirectionStrategy::random(directions, seed), policy);
}

ObjectiveConfig parse_objective(const json& j) {
    check_keys(j, {"gamma1", "gamma2", "gamma3", "gamma_eps", "vplus_mode"},
               "finetune config objective");
    ObjectiveConfig obj;
    obj.gamma1 = get_or<double>(j, "gamma1", 1.0, "objective");
    obj.gamma2 = get_or<double>(j, "gamma2", 0.0, "objective");
    obj.gamma3 = get_or<double>(j, "gamma3", 0.0, "objective");
    obj.gamma_eps = get_or<double>(j, "gamma_eps", 0.0, "objective");
    const std::string vplus =
        get_or<std::string>(j, "vplus_mode", "rig_recomputed", "objective");
    if (vplus == "rig_recomputed")
        obj.vplus_mode = VplusMode::rig_recomputed;
    else if (vplus == "pair_geometry")
        obj.vplus_mode = VplusMode::pair_geometry;
    else
        throw ConfigError("objective: unknown vplus_mode '" + vplus +
                          "' (allowed: rig_recomputed, pair_geometry)");
    return obj;
}

std::string csv_cell(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", x);
    return buf;
}

int cmd_finetune(const std::string& config_path, const std::string& out_dir,
                 std::uint64_t seed, int /*jobs*/, const std::string& tracker_flag) {
    const fs::path config_file(config_path);
    const json config = load_json_file(config_file);
    check_format_version(config, "finetune config");
    check_keys(config,
               {"format_version", "rig", "expressions", "capture", "mode", "stages",
                "suppression_weight", "objective", "optimizer", "diff",
                "tracker_timeout_ms"},
               "finetune config");

    const std::string mode_name = get_string(config, "mode", "finetune config");
    PipelineMode mode;
    if (mode_name == "open_source")
        mode = PipelineMode::open_source;
    else if (mode_name == "black_box")
        mode = PipelineMode::black_box;
    else
        throw ConfigError("finetune config: unknown mode '" + mode_name +
                          "' (allowed: open_source, black_box)");

    LoadedProblem problem =
        load_problem(config, config_file.parent_path(), parse_masks(config));
    const auto* joint = dynamic_cast<const JointPsdRig*>(problem.rig.get());
    if (!joint)
        throw ConfigError("finetune: the stage pipeline needs a joint_psd rig "
                          "(it derives the primary/spurious split from the rig)");

    ObjectiveConfig base =
        parse_objective(config.contains("objective") ? config["objective"]
                                                     : json::object());
    base.theta_R = joint->theta();

    const double suppression_weight = get_or<double>(
        config, "suppression_weight", 0.5, "finetune config");
    std::vector<StageConfig> all_stages = standard_stages(
        PipelineMode::open_source, *joint, base, suppression_weight);

    PipelineConfig pipeline;
    pipeline.mode = mode;
    if (config.contains("stages")) {
        if (!config["stages"].is_array())
            throw ConfigError("finetune config: 'stages' must be an array of names");
        for (const auto& entry : config["stages"]) {
            if (!entry.is_string())
                throw ConfigError("finetune config: stage names must be strings");
            const std::string name = entry.get<std::string>();
            bool found = false;
            for (const StageConfig& stage : all_stages)
                if (stage_name(stage.stage_id) == name) {
                    pipeline.stages.push_back(stage);
                    found = true;
                    break;
                }
            if (!found) {
                std::string list;
                for (const StageConfig& stage : all_stages)
                    list += (list.empty() ? "" : ", ") + stage_name(stage.stage_id);
                throw ConfigError("finetune config: unknown stage '" + name +
                                  "' (available: " + list + ")");
            }
        }
        if (pipeline.stages.empty())
            throw ConfigError("finetune config: 'stages' selected nothing");
    } else {
        pipeline.stages = standard_stages(mode, *joint, base, suppression_weight);
    }
    pipeline.opt = parse_optimizer(
        config.contains("optimizer") ? config["optimizer"] : json::object(), seed);
    pipeline.diff =
        parse_diff(config.contains("diff") ? config["diff"] : json::object(), seed);
    pipeline.supervision = base;
    pipeline.primary_mask = joint->primary_mask();

    // Tracker selection: the built-in reference tracker solves through the
    // rig itself; subprocess trackers speak the line-delimited JSON protocol.
    std::unique_ptr<Tracker> tracker;
    if (tracker_flag == "builtin") {
        tracker = std::make_unique<DirectTracker>(*joint, SolveMode::lm(1e-8));
    } else if (tracker_flag.rfind("subprocess:", 0) == 0) {
        const std::string command = tracker_flag.substr(std::string("subprocess:").size());
        if (command.empty())
            throw ConfigError("--tracker subprocess: requires a command");
        const int timeout_ms = get_or<int>(config, "tracker_timeout_ms", 10000,
                                           "finetune config");
        tracker = std::make_unique<SubprocessTracker>(
            command, joint->n_controls(), joint->m_geometry(), joint->theta_size(),
            timeout_ms);
    } else {
        throw ConfigError("--tracker must be 'builtin' or 'subprocess:CMD'");
    }

    const Vec theta_init = joint->theta();
    const PipelineReport result =
        run_pipeline(pipeline, theta_init, problem.pairs, *tracker, *joint);

    // Artifacts: tuned rig, stage summary CSV, per-stage optimizer traces,
    // and a JSON report carrying the capability audit.
    ArtifactStore store("finetune", out_dir, seed);

    const std::unique_ptr<Rig> tuned = joint->clone();
    tuned->set_theta(result.theta_out);
    store.add("tuned_rig.json", rig_to_json(*tuned).dump(2) + "\n");

    CsvTable stages_csv;
    stages_csv.filename = "stages.csv";
    stages_csv.header = {"stage",
                         "total_before",
                         "total_after",
                         "gamma1_primary_before",
                         "gamma1_primary_after",
                         "spurious_before",
                         "spurious_after",
                         "samples"};
    for (const StageSummary& s : result.summaries)
        stages_csv.rows.push_back({s.stage, csv_cell(s.total_before),
                                   csv_cell(s.total_after),
                                   csv_cell(s.gamma1_primary_before),
                                   csv_cell(s.gamma1_primary_after),
                                   csv_cell(s.spurious_before),
                                   csv_cell(s.spurious_after),
                                   std::to_string(s.samples)});
    store.add(stages_csv.filename, stages_csv.to_string());

    for (const StageTrace& trace : result.stage_traces) {
        CsvTable csv;
        csv.filename = "trace_" + trace.stage + ".csv";
        csv.header = {"run",      "updates",   "total",      "gamma1",
                      "gamma2",   "gamma3",    "gamma_eps",  "grad_norm",
                      "step_scale"};
        for (std::size_t run = 0; run < trace.runs.size(); ++run)
            for (const TraceRow& row : trace.runs[run])
                csv.rows.push_back({std::to_string(run), std::to_string(row.updates),
                                    csv_cell(row.loss.total), csv_cell(row.loss.gamma1),
                                    csv_cell(row.loss.gamma2), csv_cell(row.loss.gamma3),
                                    csv_cell(row.loss.gamma_eps),
                                    csv_cell(row.grad_norm), csv_cell(row.step_scale)});
        store.add(csv.filename, csv.to_string());
    }

    json report;
    report["format_version"] = 1;
    report["mode"] = mode_name;
    report["initial_total"] = result.initial_eval.total;
    json summaries = json::array();
    for (const StageSummary& s : result.summaries)
        summaries.push_back({{"stage", s.stage},
                             {"total_before", s.total_before},
                             {"total_after", s.total_after},
                             {"gamma1_primary_before", s.gamma1_primary_before},
                             {"gamma1_primary_after", s.gamma1_primary_after},
                             {"spurious_before", s.spurious_before},
                             {"spurious_after", s.spurious_after},
                             {"samples", s.samples}});
    report["stages"] = summaries;
    report["capability_audit"] = {
        {"supports_decimation", result.tracker_caps.supports_decimation},
        {"exposes_internals", result.tracker_caps.exposes_internals},
        {"decimation_used", result.decimation_used}};
    {
        char hash[32];
        std::snprintf(hash, sizeof(hash), "%016llx",
                      static_cast<unsigned long long>(fingerprint(result.theta_out)));
        report["theta_fingerprint"] = std::string(hash);
    }
    store.add_json("report.json", report);
    store.write();

    const StageSummary& last = result.summaries.back();
    std::printf("ok finetune (%s): %zu stages, total %.6e -> %.6e, primary "
                "%.6e -> %.6e; artifacts in %s\n",
                mode_name.c_str(), result.summaries.size(),
                result.summaries.front().total_before, last.total_after,
                result.summaries.front().gamma1_primary_before,
                last.gamma1_primary_after, out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rig parameter calibration and tracker fine-tuning toolkit"};
    app.require_subcommand(1);

    std::string out_dir;
    std::uint64_t seed = 1;
    int jobs = 1;
    std::string only;
    std::string config_path;
    std::string tracker_flag = "builtin";

    CLI::App* repro = app.add_subcommand(
        "repro", "re-run the embedded demo studies and check their thresholds");
    repro->add_option("--out", out_dir, "output directory")->default_val("repro_out");
    repro->add_option("--seed", seed, "base seed for seeded studies")->default_val(1);
    repro->add_option("--jobs", jobs, "parallel workers across targets")
        ->default_val(1);
    repro->add_option("--only", only, "comma-separated subset of targets");

    CLI::App* calibrate =
        app.add_subcommand("calibrate", "fit rig parameters to a corpus");
    calibrate->add_option("--config", config_path, "config JSON path")->required();
    calibrate->add_option("--out", out_dir, "output directory")
        ->default_val("calibrate_out");
    calibrate->add_option("--seed", seed, "seed (recorded in the manifest)")
        ->default_val(1);
    calibrate->add_option("--jobs", jobs, "reserved; calibration is direct")
        ->default_val(1);

    CLI::App* finetune =
        app.add_subcommand("finetune", "run a stage pipeline over tracker params");
    finetune->add_option("--config", config_path, "config JSON path")->required();
    finetune->add_option("--out", out_dir, "output directory")
        ->default_val("finetune_out");
    finetune->add_option("--seed", seed, "seed for the optimizer and estimator")
        ->default_val(1);
    finetune->add_option("--jobs", jobs, "reserved; stages run sequentially")
        ->default_val(1);
    finetune->add_option("--tracker", tracker_flag,
                         "'builtin' or 'subprocess:CMD' (line-delimited JSON)")
        ->default_val("builtin");

    CLI11_PARSE(app, argc, argv);

    try {
        if (repro->parsed()) return cmd_repro(out_dir, seed, jobs, only);
        if (calibrate->parsed()) return cmd_calibrate(config_path, out_dir, seed, jobs);
        if (finetune->parsed())
            return cmd_finetune(config_path, out_dir, seed, jobs, tracker_flag);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 2;
}
