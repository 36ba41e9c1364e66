// Gradient-descent fine-tuning of tracking-rig parameters with implicit
// tracker derivatives (zeroed, analytic, or secant-estimated dvhat/dtheta),
// plus the staged pipelines: per-expression decimated runs, filtered-primary
// runs, spurious-control suppression, and spurious-column polishing, with
// sample supervision through the full tracker.
#pragma once

#include <rigtune/implicit_diff.hpp>
#include <rigtune/objectives.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace rigtune {

struct OptimizerConfig {
    double step_size = 1e-2;
    long max_iters = 1000;
    double grad_tol = 0.0;      // stop when ||grad|| <= grad_tol
    double loss_tol = 0.0;      // >0: stop when a step decreases the loss by less
    double stop_at_loss = 0.0;  // >0: stop once total loss reaches this value
    enum class LineSearch { none, halving };
    LineSearch line_search = LineSearch::none;
    int max_halvings = 20;
    long sample_every = 0;  // >0: record a trajectory sample every N updates
    long trace_every = 1;   // record a trace row every N updates (stops always traced)
    std::uint64_t seed = 0;
};

// How per-pair dT/dtheta is obtained each iteration.
struct DiffConfig {
    enum class Mode {
        none,       // drop the observation-derivative correction entirely
        analytic,   // closed-form dvhat for perturbed trackers on linear rigs
        estimated,  // secant estimates refreshed along probe directions
    };
    Mode mode = Mode::none;
    DirectionStrategy directions = DirectionStrategy::random(1, 0);
    StepPolicy step_policy = StepPolicy::adaptive(/*freeze_after_first=*/true);
    double reg_eps = 0.0;  // implicit-solve regularization
    // Diagnostics. dvhat_observer fires once per pair per iteration with the
    // dvhat matrix entering that pair's implicit solve (empty when mode is
    // none); probe_trace is forwarded to the secant estimator and sees every
    // probe direction with its step selection.
    std::function<void(long updates, std::size_t pair, const Mat& dvhat)>
        dvhat_observer;
    DiffTrace probe_trace;

    static DiffConfig zero_dvhat() { return {}; }
    static DiffConfig analytic_dvhat() {
        DiffConfig d;
        d.mode = Mode::analytic;
        return d;
    }
    static DiffConfig estimated_dvhat(DirectionStrategy directions,
                                      StepPolicy policy = StepPolicy::adaptive(true)) {
        DiffConfig d;
        d.mode = Mode::estimated;
        d.directions = std::move(directions);
        d.step_policy = policy;
        return d;
    }
};

struct TraceRow {
    long updates = 0;  // completed parameter updates when the row was recorded
    LossBreakdown loss;
    double grad_norm = std::numeric_limits<double>::quiet_NaN();
    double step_scale = std::numeric_limits<double>::quiet_NaN();
};

struct ThetaSample {
    long updates = 0;
    Vec theta;
};

struct OptimizationReport {
    std::vector<TraceRow> trace;
    std::vector<ThetaSample> trajectory;  // always contains theta_hat
    Vec theta_hat;
    long iterations = 0;  // completed parameter updates
    std::string stop_reason;
    long objective_evals = 0;
    long probe_evals = 0;
    double wall_seconds = 0.0;

    // First trace row whose total loss is at or below `target` (-1 if never).
    long first_at_or_below(double target) const {
        for (const TraceRow& row : trace)
            if (row.loss.total <= target) return row.updates;
        return -1;
    }
};

using IterationHook = std::function<void(long updates, const Vec& theta)>;

namespace detail {

// Per-pair differentiation state resolved against the objective's tracker
// variant: where the implicit solve happens and how probes evaluate.
struct PairDiff {
    JacobianEstimate estimate;
    StepState step_state;
    bool warm = false;
};

struct DiffSpace {
    const Rig* solve_rig = nullptr;     // full rig, or the decimated sub-rig
    std::optional<Decimation> dec;      // decimated only
    std::unique_ptr<DirectTracker> sub_tracker;
    IndexList active;                   // on the FULL theta
    IndexList solve_active;             // parameter columns on solve_rig's theta

    bool decimated() const { return dec.has_value(); }
};

inline const TrackerVariant& tracker_variant_of(const ObjectiveConfig& objective) {
    static const TrackerVariant kFull{};
    const TrackerVariant* variant = nullptr;
    auto claim = [&](const TrackerVariant& v) {
        if (!variant)
            variant = &v;
        else if (*variant != v)
            throw ConfigError("fine_tune: mixed tracker variants");
    };
    if (objective.gamma1 > 0.0 || !objective.extra_gamma1_terms.empty())
        claim(objective.variant_gamma1);
    if (objective.gamma2 > 0.0) claim(objective.variant_gamma2);
    if (objective.gamma3 > 0.0) claim(objective.variant_gamma3);
    return variant ? *variant : kFull;
}

inline DiffSpace resolve_diff_space(const ObjectiveConfig& objective,
                                    const Tracker& tracker, const Rig& rig) {
    DiffSpace space;
    space.active = active_or_all(objective.active_theta, rig.theta_size());
    const TrackerVariant& variant = tracker_variant_of(objective);
    if (variant.kind == TrackerVariant::Kind::decimated) {
        if (!tracker.caps().supports_decimation)
            throw CapabilityError("fine_tune: tracker does not support decimation");
        const auto* direct = dynamic_cast<const DirectTracker*>(&tracker);
        if (!direct)
            throw CapabilityError("fine_tune: decimation needs a rig-backed tracker");
        space.dec = decimate_problem(rig, FilterMask{variant.mask});
        if (space.active != space.dec->theta_indices)
            throw ConfigError(
                "fine_tune: decimated runs must activate exactly the reachable "
                "parameters");
        space.sub_tracker =
            std::make_unique<DirectTracker>(*space.dec->sub_rig, direct->mode());
        space.solve_rig = space.dec->sub_rig.get();
        space.solve_active = {};  // every sub-rig parameter
    } else {
        space.solve_rig = &rig;
        space.solve_active = space.active;
    }
    return space;
}

}  // namespace detail

// One gradient-descent run over the objective's active parameters. Parameters
// outside the active set are preserved bit-for-bit. Jacobian estimates are
// warm-started per expression across iterations.
inline OptimizationReport fine_tune(const ObjectiveConfig& objective,
                                    const std::vector<ExpressionPair>& pairs,
                                    const Vec& theta_init, const Tracker& tracker,
                                    const Rig& rig, const OptimizerConfig& opt,
                                    const DiffConfig& diff = {},
                                    const IterationHook& hook = {}) {
    check_dim(theta_init.size() == rig.theta_size(), "fine_tune: theta size mismatch");
    check_dim(opt.max_iters >= 1 && opt.step_size > 0.0,
              "fine_tune: invalid optimizer config");
    const auto t_start = std::chrono::steady_clock::now();

    detail::DiffSpace space = detail::resolve_diff_space(objective, tracker, rig);
    const IndexList& active = space.active;

    OptimizationReport report;
    Vec theta = theta_init;
    report.trajectory.push_back({0, theta});

    // Evaluation of the secant-probe field for pair k at the current theta:
    // active components substituted into the frozen full vector.
    auto probe_field = [&](std::size_t k, const Vec& theta_now) -> VectorField {
        if (space.decimated()) {
            const Rig* sub = space.solve_rig;
            const DirectTracker* sub_tracker = space.sub_tracker.get();
            const Vec v = pairs[k].v;
            return [sub, sub_tracker, v, &report](const Vec& theta_d) -> Vec {
                ++report.probe_evals;
                return tracker_rig_eval(*sub_tracker, *sub, v, theta_d);
            };
        }
        const Vec v = pairs[k].v;
        const Tracker* trk = &tracker;
        const Rig* rg = &rig;
        Vec base = theta_now;
        IndexList act = active;
        return [trk, rg, v, base, act, &report](const Vec& theta_a) -> Vec {
            ++report.probe_evals;
            Vec full = base;
            for (std::size_t a = 0; a < act.size(); ++a)
                full[act[a]] = theta_a[static_cast<Eigen::Index>(a)];
            return tracker_rig_eval(*trk, *rg, v, full);
        };
    };
    auto active_theta_of = [&](const Vec& full) -> Vec {
        if (space.decimated()) return space.dec->restrict_theta(full);
        Vec out(static_cast<Eigen::Index>(active.size()));
        for (std::size_t a = 0; a < active.size(); ++a)
            out[static_cast<Eigen::Index>(a)] = full[active[a]];
        return out;
    };
    auto tracked_controls = [&](std::size_t k, const Vec& theta_now) -> Vec {
        return space.decimated()
                   ? space.sub_tracker->track(pairs[k].v,
                                              space.dec->restrict_theta(theta_now))
                   : tracker.track(pairs[k].v, theta_now);
    };

    std::vector<detail::PairDiff> diffs(pairs.size());

    // Per-pair dT/dtheta at the current point, refreshing secant estimates.
    auto compute_dT = [&](const Vec& theta_now, long updates) -> std::vector<Mat> {
        std::vector<Mat> dT(pairs.size());
        const Vec theta_active = active_theta_of(theta_now);
        const Vec theta_solve =
            space.decimated() ? space.dec->restrict_theta(theta_now) : theta_now;

        // Steepest-descent probing needs the pre-update gradient, which needs
        // the pre-update estimates solved through to dT.
        Vec sd_direction;
        if (diff.mode == DiffConfig::Mode::estimated &&
            diff.directions.mode == DirectionStrategy::Mode::steepest_descent) {
            std::vector<Mat> pre(pairs.size());
            for (std::size_t k = 0; k < pairs.size(); ++k) {
                const Mat dvhat =
                    diffs[k].warm
                        ? diffs[k].estimate.matrix
                        : Mat::Zero(space.solve_rig->m_geometry(),
                                    static_cast<Eigen::Index>(active.size()));
                pre[k] = solve_dT_dtheta(*space.solve_rig, tracked_controls(k, theta_now),
                                         dvhat, theta_solve, diff.reg_eps,
                                         space.solve_active);
            }
            const Vec g =
                grad_objective(objective, pairs, theta_now, tracker, rig, pre);
            sd_direction = g.norm() > 0.0 ? Vec(-g.normalized()) : Vec();
        }

        for (std::size_t k = 0; k < pairs.size(); ++k) {
            Mat dvhat;
            switch (diff.mode) {
                case DiffConfig::Mode::none:
                    break;
                case DiffConfig::Mode::analytic: {
                    if (space.decimated())
                        throw CapabilityError(
                            "fine_tune: analytic dvhat is not available for "
                            "decimated runs");
                    const auto* perturbed =
                        dynamic_cast<const PerturbedTracker*>(&tracker);
                    if (!perturbed)
                        throw CapabilityError(
                            "fine_tune: analytic dvhat needs a perturbed tracker");
                    const Mat full =
                        perturbed_dvhat_analytic(*perturbed, pairs[k].v, theta_now);
                    dvhat.resize(full.rows(), static_cast<Eigen::Index>(active.size()));
                    for (std::size_t a = 0; a < active.size(); ++a)
                        dvhat.col(static_cast<Eigen::Index>(a)) = full.col(active[a]);
                    break;
                }
                case DiffConfig::Mode::estimated: {
                    DirectionStrategy strategy = diff.directions;
                    if (strategy.mode == DirectionStrategy::Mode::random)
                        strategy.seed = derive_seed(
                            derive_seed(opt.seed, 0xd1f, strategy.seed),
                            static_cast<std::uint64_t>(updates),
                            static_cast<std::uint64_t>(k));
                    else if (strategy.mode == DirectionStrategy::Mode::steepest_descent) {
                        if (sd_direction.size() > 0)
                            strategy = DirectionStrategy::fixed({sd_direction});
                        else  // flat start: fall back to one seeded random probe
                            strategy = DirectionStrategy::random(
                                1, derive_seed(opt.seed, static_cast<std::uint64_t>(
                                                             updates),
                                               static_cast<std::uint64_t>(k)));
                    }
                    const VectorField u = probe_field(k, theta_now);
                    diffs[k].estimate = estimate_dvhat_dtheta(
                        u, theta_active, strategy,
                        diffs[k].warm ? &diffs[k].estimate : nullptr, diff.step_policy,
                        &diffs[k].step_state, diff.probe_trace);
                    diffs[k].warm = true;
                    dvhat = diffs[k].estimate.matrix;
                    break;
                }
            }
            if (diff.dvhat_observer) diff.dvhat_observer(updates, k, dvhat);
            dT[k] = solve_dT_dtheta(*space.solve_rig, tracked_controls(k, theta_now),
                                    dvhat, theta_solve, diff.reg_eps,
                                    space.solve_active);
        }
        return dT;
    };

    auto evaluate = [&](const Vec& theta_now) -> LossBreakdown {
        ++report.objective_evals;
        return eval_objective(objective, pairs, theta_now, tracker, rig);
    };
    auto finish = [&](long updates, const std::string& reason) {
        report.iterations = updates;
        report.stop_reason = reason;
        report.theta_hat = theta;
        const ThetaSample& last = report.trajectory.back();
        if (last.updates != updates || (last.theta - theta).norm() != 0.0)
            report.trajectory.push_back({updates, theta});
        report.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
                .count();
    };

    long updates = 0;
    double prev_total = std::numeric_limits<double>::quiet_NaN();
    while (true) {
        LossBreakdown loss;
        try {
            loss = evaluate(theta);
        } catch (const TrackerError& e) {
            throw TrackerError(std::string(e.what()) + " (at update " +
                               std::to_string(updates) + ")");
        }
        if (!std::isfinite(loss.total))
            throw NonFiniteError("fine_tune: non-finite loss at update " +
                                 std::to_string(updates) + " (theta fingerprint " +
                                 std::to_string(fingerprint(theta)) + ")");
        if (hook) hook(updates, theta);

        auto trace_stop = [&](const std::string& reason, double grad_norm) {
            TraceRow row;
            row.updates = updates;
            row.loss = loss;
            row.grad_norm = grad_norm;
            report.trace.push_back(row);
            finish(updates, reason);
        };
        if (opt.stop_at_loss > 0.0 && loss.total <= opt.stop_at_loss) {
            trace_stop("target_loss", std::numeric_limits<double>::quiet_NaN());
            return report;
        }
        if (opt.loss_tol > 0.0 && updates > 0 && prev_total - loss.total < opt.loss_tol) {
            trace_stop("loss_tol", std::numeric_limits<double>::quiet_NaN());
            return report;
        }
        if (updates >= opt.max_iters) {
            trace_stop("max_iters", std::numeric_limits<double>::quiet_NaN());
            return report;
        }
        prev_total = loss.total;

        std::vector<Mat> dT;
        Vec g;
        try {
            dT = compute_dT(theta, updates);
            g = grad_objective(objective, pairs, theta, tracker, rig, dT);
        } catch (const TrackerError& e) {
            throw TrackerError(std::string(e.what()) + " (at update " +
                               std::to_string(updates) + ")");
        }
        const double grad_norm = g.norm();
        if (grad_norm <= opt.grad_tol) {
            trace_stop("grad_tol", grad_norm);
            return report;
        }

        // Step on the active entries only; halving line search never accepts
        // an increase.
        double scale = 1.0;
        Vec theta_next;
        bool accepted = false;
        for (int h = 0;; ++h) {
            theta_next = theta;
            for (std::size_t a = 0; a < active.size(); ++a)
                theta_next[active[a]] -=
                    opt.step_size * scale * g[static_cast<Eigen::Index>(a)];
            if (opt.line_search == OptimizerConfig::LineSearch::none) {
                accepted = true;
                break;
            }
            const double trial = evaluate(theta_next).total;
            if (std::isfinite(trial) && trial <= loss.total) {
                accepted = true;
                break;
            }
            if (h >= opt.max_halvings) break;
            scale *= 0.5;
        }
        if (!accepted) {
            trace_stop("line_search_stall", grad_norm);
            return report;
        }

        if (updates % std::max<long>(1, opt.trace_every) == 0) {
            TraceRow row;
            row.updates = updates;
            row.loss = loss;
            row.grad_norm = grad_norm;
            row.step_scale = scale;
            report.trace.push_back(row);
        }

        theta = theta_next;
        ++updates;
        if (opt.sample_every > 0 && updates % opt.sample_every == 0)
            report.trajectory.push_back({updates, theta});
    }
}

// ---------------------------------------------------------------------------
// Stages.

enum class StageId {
    S1_decimated,
    S2_filtered_primary,
    S3_add_spurious_suppression,
    S4_spurious_columns,
};

inline std::string stage_name(StageId id) {
    switch (id) {
        case StageId::S1_decimated: return "S1_decimated";
        case StageId::S2_filtered_primary: return "S2_filtered_primary";
        case StageId::S3_add_spurious_suppression: return "S3_add_spurious_suppression";
        case StageId::S4_spurious_columns: return "S4_spurious_columns";
    }
    return "unknown";
}

struct StageConfig {
    StageId stage_id = StageId::S2_filtered_primary;
    ObjectiveConfig objective;
    IndexList active_theta;  // empty = all (minus frozen)
    IndexList frozen_theta;
    bool per_expression = false;
};

struct StageResult {
    Vec theta_out;
    std::vector<ThetaSample> samples;
    std::vector<OptimizationReport> reports;
};

namespace detail {

inline IndexList subtract_indices(const IndexList& base, const IndexList& minus) {
    IndexList out;
    for (int idx : base)
        if (std::find(minus.begin(), minus.end(), idx) == minus.end())
            out.push_back(idx);
    return out;
}

// Controls an expression actually drives (the decimation mask for S1).
inline Mask controls_mask_of(const ExpressionPair& pair, double tol = 1e-9) {
    Mask mask(static_cast<std::size_t>(pair.c.size()), 0);
    for (int i = 0; i < pair.c.size(); ++i)
        if (std::abs(pair.c[i]) > tol) mask[static_cast<std::size_t>(i)] = 1;
    return mask;
}

}  // namespace detail

// Runs one stage. Per-expression mode decimates the problem to each
// expression's own controls and runs the expressions independently, then
// merges the disjoint parameter updates; expressions whose reachable
// parameter sets coincide are run sequentially (they refine the same
// parameters), while partial overlaps are a hard error.
inline StageResult run_stage(const StageConfig& stage, const Vec& theta_in,
                             const std::vector<ExpressionPair>& pairs,
                             const Tracker& tracker, const Rig& rig,
                             const OptimizerConfig& opt, const DiffConfig& diff = {}) {
    check_dim(!pairs.empty(), "run_stage: no pairs");
    for (int idx : stage.active_theta)
        if (std::find(stage.frozen_theta.begin(), stage.frozen_theta.end(), idx) !=
            stage.frozen_theta.end())
            throw ConfigError("run_stage: parameter " + std::to_string(idx) +
                              " is both active and frozen");

    StageResult result;
    result.theta_out = theta_in;

    if (!stage.per_expression) {
        ObjectiveConfig objective = stage.objective;
        const IndexList base =
            detail::active_or_all(stage.active_theta, rig.theta_size());
        objective.active_theta = detail::subtract_indices(base, stage.frozen_theta);
        if (objective.active_theta.empty()) return result;  // fully clamped
        OptimizationReport report =
            fine_tune(objective, pairs, theta_in, tracker, rig, opt, diff);
        result.theta_out = report.theta_hat;
        result.samples = report.trajectory;
        result.reports.push_back(std::move(report));
        return result;
    }

    if (stage.stage_id == StageId::S1_decimated && !tracker.caps().supports_decimation)
        throw CapabilityError("run_stage: S1 requires a tracker that supports "
                              "decimation");

    // Group expressions by their reachable parameter set, preserving order.
    struct Group {
        IndexList theta_indices;
        Mask mask;
        std::vector<std::size_t> pair_indices;
    };
    std::vector<Group> groups;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const Mask mask = detail::controls_mask_of(pairs[k]);
        if (mask_count(mask) == 0) continue;  // neutral pose: nothing reachable
        const Decimation dec = decimate_problem(rig, FilterMask{mask});
        bool placed = false;
        for (Group& group : groups) {
            if (group.theta_indices == dec.theta_indices) {
                group.pair_indices.push_back(k);
                // Widen the control mask so all member expressions survive the
                // decimation (identical parameter reach implies same columns).
                for (std::size_t i = 0; i < mask.size(); ++i)
                    group.mask[i] = group.mask[i] || mask[i];
                placed = true;
                break;
            }
        }
        if (!placed) groups.push_back({dec.theta_indices, mask, {k}});
    }
    for (std::size_t a = 0; a < groups.size(); ++a)
        for (std::size_t b = a + 1; b < groups.size(); ++b)
            for (int idx : groups[a].theta_indices)
                if (std::find(groups[b].theta_indices.begin(),
                              groups[b].theta_indices.end(),
                              idx) != groups[b].theta_indices.end())
                    throw MergeConflictError(
                        "run_stage: parameter " + std::to_string(idx) +
                        " is reachable from both '" +
                        pairs[groups[a].pair_indices.front()].name + "' and '" +
                        pairs[groups[b].pair_indices.front()].name + "'");

    for (const Group& group : groups) {
        // Independent groups all start from theta_in; their updates touch
        // disjoint parameters and are merged into theta_out. Within a group,
        // expressions run sequentially on the shared parameters.
        Vec theta_group = theta_in;
        for (std::size_t k : group.pair_indices) {
            ObjectiveConfig objective = stage.objective;
            const TrackerVariant variant = TrackerVariant::decimated(group.mask);
            if (objective.gamma1 > 0.0 || !objective.extra_gamma1_terms.empty())
                objective.variant_gamma1 = variant;
            if (objective.gamma2 > 0.0) objective.variant_gamma2 = variant;
            if (objective.gamma3 > 0.0) objective.variant_gamma3 = variant;
            objective.active_theta = group.theta_indices;
            for (int idx : group.theta_indices)
                if (std::find(stage.frozen_theta.begin(), stage.frozen_theta.end(),
                              idx) != stage.frozen_theta.end())
                    throw ConfigError("run_stage: frozen parameter " +
                                      std::to_string(idx) +
                                      " is reachable from expression '" +
                                      pairs[k].name + "'");
            OptimizationReport report = fine_tune(objective, {pairs[k]}, theta_group,
                                                  tracker, rig, opt, diff);
            theta_group = report.theta_hat;
            for (const ThetaSample& sample : report.trajectory)
                result.samples.push_back(sample);
            result.reports.push_back(std::move(report));
        }
        for (int idx : group.theta_indices) result.theta_out[idx] = theta_group[idx];
    }
    return result;
}

// Re-scores sampled parameter vectors with the full tracker and returns the
// best one (earliest sample wins ties).
inline Vec select_best_sample(const std::vector<ThetaSample>& samples,
                              const std::vector<ExpressionPair>& pairs,
                              const Tracker& full_tracker, const Rig& rig,
                              const ObjectiveConfig& criterion) {
    check_dim(!samples.empty(), "select_best_sample: no samples");
    double best = std::numeric_limits<double>::infinity();
    const Vec* best_theta = nullptr;
    for (const ThetaSample& sample : samples) {
        const double score =
            eval_objective(criterion, pairs, sample.theta, full_tracker, rig).total;
        if (score < best) {
            best = score;
            best_theta = &sample.theta;
        }
    }
    return *best_theta;
}

// ---------------------------------------------------------------------------
// Pipelines.

enum class PipelineMode { open_source, black_box };

// Sum of absolute tracker activations on non-primary controls.
inline double spurious_activation_sum(const Tracker& tracker,
                                      const std::vector<ExpressionPair>& pairs,
                                      const Vec& theta, const Mask& primary) {
    check_dim(static_cast<int>(primary.size()) == tracker.n_controls(),
              "spurious_activation_sum: mask length mismatch");
    double sum = 0.0;
    for (const ExpressionPair& pair : pairs) {
        const Vec c = tracker.track(pair.v, theta);
        for (int i = 0; i < c.size(); ++i)
            if (!primary[static_cast<std::size_t>(i)]) sum += std::abs(c[i]);
    }
    return sum;
}

struct StageSummary {
    std::string stage;
    double total_before = 0.0;
    double total_after = 0.0;
    double gamma1_primary_before = 0.0;
    double gamma1_primary_after = 0.0;
    double spurious_before = 0.0;
    double spurious_after = 0.0;
    long samples = 0;
};

struct PipelineConfig {
    PipelineMode mode = PipelineMode::open_source;
    std::vector<StageConfig> stages;
    OptimizerConfig opt;
    DiffConfig diff;
    ObjectiveConfig supervision;  // full-tracker re-scoring criterion
    bool supervise_after_stage1 = true;
    Mask primary_mask;  // reporting: which controls are primary
};

// Optimizer traces of one pipeline stage: one trace per optimizer run inside
// the stage (per expression group for the decimated stage, one otherwise).
struct StageTrace {
    std::string stage;
    std::vector<std::vector<TraceRow>> runs;
};

struct PipelineReport {
    Vec theta_out;
    std::vector<StageSummary> summaries;
    std::vector<StageTrace> stage_traces;
    LossBreakdown initial_eval;
    // Capability audit: the tracker's advertised capabilities at entry, and
    // whether any executed stage actually decimated it. A report showing
    // supports_decimation == false and decimation_used == false is the
    // black-box guarantee; the throwing gates in run_stage and the decimated
    // objective variant make a contradicting run impossible.
    TrackerCaps tracker_caps{};
    bool decimation_used = false;
};

inline PipelineReport run_pipeline(const PipelineConfig& config, const Vec& theta_init,
                                   const std::vector<ExpressionPair>& pairs,
                                   const Tracker& tracker, const Rig& rig) {
    if (config.mode == PipelineMode::black_box)
        for (const StageConfig& stage : config.stages)
            if (stage.stage_id == StageId::S1_decimated)
                throw ConfigError(
                    "run_pipeline: a black-box tracker has no decimated stage");

    ObjectiveConfig primary_metric = config.supervision;
    primary_metric.gamma1 = 1.0;
    primary_metric.gamma2 = primary_metric.gamma3 = primary_metric.gamma_eps = 0.0;
    primary_metric.extra_gamma1_terms.clear();
    if (!config.primary_mask.empty())
        primary_metric.variant_gamma1 = TrackerVariant::filtered(config.primary_mask);

    auto metrics = [&](const Vec& theta, double& total, double& gamma1_primary,
                       double& spurious) {
        total = eval_objective(config.supervision, pairs, theta, tracker, rig).total;
        gamma1_primary =
            eval_objective(primary_metric, pairs, theta, tracker, rig).gamma1;
        spurious = config.primary_mask.empty()
                       ? 0.0
                       : spurious_activation_sum(tracker, pairs, theta,
                                                 config.primary_mask);
    };

    PipelineReport report;
    report.tracker_caps = tracker.caps();
    report.initial_eval =
        eval_objective(config.supervision, pairs, theta_init, tracker, rig);
    report.theta_out = theta_init;

    Vec theta = theta_init;
    for (const StageConfig& stage : config.stages) {
        if (stage.stage_id == StageId::S1_decimated) report.decimation_used = true;
        StageSummary summary;
        summary.stage = stage_name(stage.stage_id);
        metrics(theta, summary.total_before, summary.gamma1_primary_before,
                summary.spurious_before);

        StageResult result =
            run_stage(stage, theta, pairs, tracker, rig, config.opt, config.diff);
        theta = result.theta_out;
        summary.samples = static_cast<long>(result.samples.size());

        StageTrace trace;
        trace.stage = summary.stage;
        for (const OptimizationReport& run : result.reports)
            trace.runs.push_back(run.trace);
        report.stage_traces.push_back(std::move(trace));

        if (stage.stage_id == StageId::S1_decimated && config.supervise_after_stage1 &&
            !result.samples.empty()) {
            std::vector<ThetaSample> candidates = result.samples;
            candidates.push_back({-1, theta});
            theta = select_best_sample(candidates, pairs, tracker, rig,
                                       config.supervision);
        }

        metrics(theta, summary.total_after, summary.gamma1_primary_after,
                summary.spurious_after);
        report.summaries.push_back(summary);
    }
    report.theta_out = theta;
    return report;
}

// ---------------------------------------------------------------------------
// Helpers shared by stage builders.

// Parameter indices living in the columns of the masked-on controls. For a
// joint-matrix rig a column is owned by a control subset; it counts as masked
// on only when every member control is.
inline IndexList params_for_controls(const Rig& rig, const Mask& controls) {
    check_dim(static_cast<int>(controls.size()) == rig.n_controls(),
              "params_for_controls: mask length mismatch");
    IndexList out;
    if (const auto* joint = dynamic_cast<const JointPsdRig*>(&rig)) {
        for (int k = 0; k < joint->theta_size(); ++k) {
            const std::vector<int>& subset =
                joint->psd_spec()[static_cast<std::size_t>(joint->param_column(k))];
            bool all_on = true;
            for (int ctrl : subset)
                if (!controls[static_cast<std::size_t>(ctrl)]) all_on = false;
            if (all_on) out.push_back(k);
        }
        return out;
    }
    if (const auto* linear = dynamic_cast<const LinearRig*>(&rig)) {
        const int n = linear->n_controls();
        for (int k = 0; k < linear->theta_size(); ++k)
            if (controls[static_cast<std::size_t>(k % n)]) out.push_back(k);
        return out;
    }
    throw CapabilityError("params_for_controls: unsupported rig type");
}

inline Mask invert_mask(const Mask& mask) {
    Mask out(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? 0 : 1;
    return out;
}

// The standard stage schedule over a joint rig with a primary/spurious
// control split: per-expression decimated runs, filtered-primary tracking,
// the same plus spurious-activation suppression, and finally the spurious
// columns alone with the primary columns frozen. Black-box trackers cannot
// be decimated, so their schedule starts at the filtered stage.
inline std::vector<StageConfig> standard_stages(PipelineMode mode,
                                                const JointPsdRig& rig,
                                                const ObjectiveConfig& base,
                                                double suppression_weight = 0.5) {
    const Mask& primary = rig.primary_mask();
    const Mask spurious = invert_mask(primary);
    const bool has_spurious = mask_count(spurious) > 0;

    StageConfig s1;
    s1.stage_id = StageId::S1_decimated;
    s1.per_expression = true;
    s1.objective = base;

    StageConfig s2;
    s2.stage_id = StageId::S2_filtered_primary;
    s2.objective = base;
    s2.objective.variant_gamma1 = TrackerVariant::filtered(primary);

    if (!has_spurious) {
        if (mode == PipelineMode::black_box) return {s2};
        return {s1, s2};
    }

    StageConfig s3 = s2;
    s3.stage_id = StageId::S3_add_spurious_suppression;
    s3.objective.extra_gamma1_terms.push_back(
        ExtraControlTerm{spurious, /*target_zero=*/true, suppression_weight});

    StageConfig s4;
    s4.stage_id = StageId::S4_spurious_columns;
    s4.objective = base;
    s4.active_theta = params_for_controls(rig, spurious);
    s4.frozen_theta = params_for_controls(rig, primary);

    if (mode == PipelineMode::black_box) return {s2, s3, s4};
    return {s1, s2, s3, s4};
}

}  // namespace rigtune
