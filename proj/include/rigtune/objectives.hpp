// The fine-tuning loss family over tracking-rig parameters: control-space
// supervision (gamma1 plus optional masked suppression terms), geometry
// reconstruction through the reference rig (gamma2) and through the tracking
// rig (gamma3), and a parameter prior (gamma_eps); analytic gradients given
// dT/dtheta per expression; the direct least-squares baseline; and the
// derivative-estimate diagnostic.
#pragma once

#include <rigtune/fitting.hpp>
#include <rigtune/io.hpp>
#include <rigtune/tracker.hpp>

#include <cmath>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace rigtune {

// Which view of the tracker a loss term sees.
struct TrackerVariant {
    enum class Kind { full, filtered, decimated };
    Kind kind = Kind::full;
    Mask mask;  // control mask for filtered/decimated

    static TrackerVariant full() { return {}; }
    static TrackerVariant filtered(Mask mask) {
        return {Kind::filtered, std::move(mask)};
    }
    static TrackerVariant decimated(Mask mask) {
        return {Kind::decimated, std::move(mask)};
    }
    bool operator==(const TrackerVariant& other) const {
        return kind == other.kind && mask == other.mask;
    }
    bool operator!=(const TrackerVariant& other) const { return !(*this == other); }
};

// Additional control-space penalty (e.g. drive spurious controls to zero).
struct ExtraControlTerm {
    Mask mask;                // controls the term reads
    bool target_zero = true;  // false: compare to the pair's target controls
    double weight = 1.0;
};

enum class VplusMode {
    rig_recomputed,  // v_plus := R(c_target; theta_R), never read from file
    pair_geometry,   // v_plus := the pair's stored geometry
};

struct ObjectiveConfig {
    double gamma1 = 1.0;
    double gamma2 = 1.0;
    double gamma3 = 0.0;
    double gamma_eps = 1e-3;
    TrackerVariant variant_gamma1;
    TrackerVariant variant_gamma2;
    TrackerVariant variant_gamma3;
    std::vector<ExtraControlTerm> extra_gamma1_terms;
    Vec theta_R;
    IndexList active_theta;  // empty = all parameters
    VplusMode vplus_mode = VplusMode::rig_recomputed;
};

struct LossBreakdown {
    // Raw (unweighted) residual sums per term.
    double gamma1 = 0.0;
    double gamma2 = 0.0;
    double gamma3 = 0.0;
    double gamma_eps = 0.0;
    std::vector<double> extra;
    // Weighted tracker-term contribution of each expression, in pair order.
    std::vector<double> per_expression;
    std::vector<std::string> expression_names;
    // Weighted sum of all terms.
    double total = 0.0;
};

namespace detail {

inline IndexList active_or_all(const IndexList& active, int theta_size) {
    if (!active.empty()) {
        for (int idx : active)
            check_dim(idx >= 0 && idx < theta_size,
                      "objective: active parameter index out of range");
        return active;
    }
    IndexList all(static_cast<std::size_t>(theta_size));
    for (int i = 0; i < theta_size; ++i) all[static_cast<std::size_t>(i)] = i;
    return all;
}

inline void validate_objective(const ObjectiveConfig& config, const Rig& rig) {
    check_dim(config.gamma1 >= 0.0 && config.gamma2 >= 0.0 && config.gamma3 >= 0.0 &&
                  config.gamma_eps >= 0.0,
              "objective: negative weight");
    bool any = config.gamma1 > 0.0 || config.gamma2 > 0.0 || config.gamma3 > 0.0 ||
               config.gamma_eps > 0.0;
    for (const ExtraControlTerm& term : config.extra_gamma1_terms) {
        check_dim(term.weight >= 0.0, "objective: negative extra-term weight");
        check_dim(static_cast<int>(term.mask.size()) == rig.n_controls(),
                  "objective: extra-term mask length mismatch");
        any = any || term.weight > 0.0;
    }
    if (!any) throw ConfigError("objective: every weight is zero");
    check_dim(config.theta_R.size() == rig.theta_size(),
              "objective: theta_R size mismatch");
    for (const TrackerVariant* variant :
         {&config.variant_gamma1, &config.variant_gamma2, &config.variant_gamma3})
        if (variant->kind != TrackerVariant::Kind::full)
            check_dim(static_cast<int>(variant->mask.size()) == rig.n_controls(),
                      "objective: variant mask length mismatch");
}

// A tracker variant resolved against a concrete tracker and rig.
struct VariantContext {
    TrackerVariant variant;
    std::optional<Decimation> dec;                 // decimated only
    std::unique_ptr<DirectTracker> sub_tracker;    // decimated only

    // Tracker output in the term's comparison space (restricted when
    // decimated), embedded into the full control space for rig evals, and raw
    // (pre-filter) for extra control terms, whose masks select their own rows
    // independently of the variant filter.
    struct Tracked {
        Vec c_loss;
        Vec c_full;
        Vec c_raw;
    };

    Tracked track(const Tracker& tracker, const Vec& v, const Vec& theta_T) const {
        Tracked out;
        switch (variant.kind) {
            case TrackerVariant::Kind::full:
                out.c_full = tracker.track(v, theta_T);
                out.c_loss = out.c_full;
                out.c_raw = out.c_full;
                break;
            case TrackerVariant::Kind::filtered: {
                out.c_raw = tracker.track(v, theta_T);
                out.c_full = out.c_raw;
                for (int i = 0; i < out.c_full.size(); ++i)
                    if (!variant.mask[static_cast<std::size_t>(i)]) out.c_full[i] = 0.0;
                out.c_loss = out.c_full;
                break;
            }
            case TrackerVariant::Kind::decimated: {
                out.c_loss = sub_tracker->track(v, dec->restrict_theta(theta_T));
                out.c_full = dec->embed_controls(out.c_loss);
                out.c_raw = out.c_full;
                break;
            }
        }
        return out;
    }

    Vec restrict_target(const Vec& c) const {
        return variant.kind == TrackerVariant::Kind::decimated ? dec->restrict_controls(c)
                                                               : c;
    }
};

inline VariantContext resolve_variant(const TrackerVariant& variant,
                                      const Tracker& tracker, const Rig& rig) {
    VariantContext ctx;
    ctx.variant = variant;
    if (variant.kind == TrackerVariant::Kind::decimated) {
        if (!tracker.caps().supports_decimation)
            throw CapabilityError("objective: tracker does not support decimation");
        const auto* direct = dynamic_cast<const DirectTracker*>(&tracker);
        if (!direct)
            throw CapabilityError(
                "objective: decimated variant needs a rig-backed tracker");
        ctx.dec = decimate_problem(rig, FilterMask{variant.mask});
        ctx.sub_tracker =
            std::make_unique<DirectTracker>(*ctx.dec->sub_rig, direct->mode());
    }
    return ctx;
}

inline double masked_squared_norm(const Vec& r, const IndexList& rows) {
    if (rows.empty()) return r.squaredNorm();
    double sum = 0.0;
    for (int row : rows) sum += r[row] * r[row];
    return sum;
}

}  // namespace detail

inline LossBreakdown eval_objective(const ObjectiveConfig& config,
                                    const std::vector<ExpressionPair>& pairs,
                                    const Vec& theta_T, const Tracker& tracker,
                                    const Rig& rig) {
    check_dim(!pairs.empty(), "eval_objective: no pairs");
    check_dim(theta_T.size() == rig.theta_size(), "eval_objective: theta size mismatch");
    detail::validate_objective(config, rig);

    const bool need1 = config.gamma1 > 0.0 || !config.extra_gamma1_terms.empty();
    const bool need2 = config.gamma2 > 0.0;
    const bool need3 = config.gamma3 > 0.0;

    detail::VariantContext ctx1, ctx2, ctx3;
    if (need1) ctx1 = detail::resolve_variant(config.variant_gamma1, tracker, rig);
    if (need2) ctx2 = detail::resolve_variant(config.variant_gamma2, tracker, rig);
    if (need3) ctx3 = detail::resolve_variant(config.variant_gamma3, tracker, rig);

    LossBreakdown out;
    out.extra.assign(config.extra_gamma1_terms.size(), 0.0);
    out.per_expression.reserve(pairs.size());
    out.expression_names.reserve(pairs.size());

    for (const ExpressionPair& pair : pairs) {
        const double w = pair.weight;
        double expr_total = 0.0;

        detail::VariantContext::Tracked t1, t2, t3;
        if (need1) t1 = ctx1.track(tracker, pair.v, theta_T);
        if (need2)
            t2 = config.variant_gamma2 == config.variant_gamma1 && need1
                     ? t1
                     : ctx2.track(tracker, pair.v, theta_T);
        if (need3) {
            if (config.variant_gamma3 == config.variant_gamma1 && need1)
                t3 = t1;
            else if (config.variant_gamma3 == config.variant_gamma2 && need2)
                t3 = t2;
            else
                t3 = ctx3.track(tracker, pair.v, theta_T);
        }

        if (config.gamma1 > 0.0) {
            const double term =
                w * (t1.c_loss - ctx1.restrict_target(pair.c)).squaredNorm();
            out.gamma1 += term;
            expr_total += config.gamma1 * term;
        }
        for (std::size_t j = 0; j < config.extra_gamma1_terms.size(); ++j) {
            const ExtraControlTerm& term = config.extra_gamma1_terms[j];
            double sum = 0.0;
            for (int i = 0; i < rig.n_controls(); ++i) {
                if (!term.mask[static_cast<std::size_t>(i)]) continue;
                const double target = term.target_zero ? 0.0 : pair.c[i];
                const double r = t1.c_raw[i] - target;
                sum += r * r;
            }
            out.extra[j] += w * sum;
            expr_total += term.weight * w * sum;
        }
        if (need2) {
            const Vec vhat = rig.eval(t2.c_full, config.theta_R);
            const Vec vplus = config.vplus_mode == VplusMode::rig_recomputed
                                  ? rig.eval(pair.c, config.theta_R)
                                  : pair.v;
            const double term =
                w * detail::masked_squared_norm(vhat - vplus, pair.geometry_mask);
            out.gamma2 += term;
            expr_total += config.gamma2 * term;
        }
        if (need3) {
            const Vec vhat = rig.eval(t3.c_full, theta_T);
            const double term =
                w * detail::masked_squared_norm(vhat - pair.v, pair.geometry_mask);
            out.gamma3 += term;
            expr_total += config.gamma3 * term;
        }
        out.per_expression.push_back(expr_total);
        out.expression_names.push_back(pair.name);
    }

    if (config.gamma_eps > 0.0) {
        const IndexList active =
            detail::active_or_all(config.active_theta, rig.theta_size());
        double sum = 0.0;
        for (int idx : active) {
            const double d = theta_T[idx] - config.theta_R[idx];
            sum += d * d;
        }
        out.gamma_eps = sum;
    }

    out.total = config.gamma1 * out.gamma1 + config.gamma2 * out.gamma2 +
                config.gamma3 * out.gamma3 + config.gamma_eps * out.gamma_eps;
    for (std::size_t j = 0; j < out.extra.size(); ++j)
        out.total += config.extra_gamma1_terms[j].weight * out.extra[j];
    return out;
}

// Analytic gradient over the active parameters, given dT/dtheta per pair
// (rows in the tracker-term comparison space, columns over active_theta).
inline Vec grad_objective(const ObjectiveConfig& config,
                          const std::vector<ExpressionPair>& pairs, const Vec& theta_T,
                          const Tracker& tracker, const Rig& rig,
                          const std::vector<Mat>& dT_dtheta) {
    check_dim(!pairs.empty(), "grad_objective: no pairs");
    check_dim(dT_dtheta.size() == pairs.size(),
              "grad_objective: one dT/dtheta per pair required");
    detail::validate_objective(config, rig);

    const bool need1 = config.gamma1 > 0.0 || !config.extra_gamma1_terms.empty();
    const bool need2 = config.gamma2 > 0.0;
    const bool need3 = config.gamma3 > 0.0;

    // All tracker-dependent terms must share one variant so a single
    // dT/dtheta per pair is meaningful.
    const TrackerVariant* variant = nullptr;
    auto claim = [&](const TrackerVariant& v) {
        if (!variant)
            variant = &v;
        else if (*variant != v)
            throw ConfigError("grad_objective: mixed tracker variants");
    };
    if (need1) claim(config.variant_gamma1);
    if (need2) claim(config.variant_gamma2);
    if (need3) claim(config.variant_gamma3);

    const IndexList active = detail::active_or_all(config.active_theta, rig.theta_size());
    Vec g = Vec::Zero(static_cast<Eigen::Index>(active.size()));

    if (variant) {
        detail::VariantContext ctx = detail::resolve_variant(*variant, tracker, rig);
        const int loss_dim = variant->kind == TrackerVariant::Kind::decimated
                                 ? static_cast<int>(ctx.dec->active_controls.size())
                                 : rig.n_controls();

        for (std::size_t k = 0; k < pairs.size(); ++k) {
            const ExpressionPair& pair = pairs[k];
            const double w = pair.weight;
            check_dim(dT_dtheta[k].rows() == loss_dim &&
                          dT_dtheta[k].cols() == static_cast<Eigen::Index>(active.size()),
                      "grad_objective: dT/dtheta shape mismatch");
            Mat dT = dT_dtheta[k];
            if (variant->kind == TrackerVariant::Kind::filtered)
                for (int i = 0; i < loss_dim; ++i)
                    if (!variant->mask[static_cast<std::size_t>(i)]) dT.row(i).setZero();

            const detail::VariantContext::Tracked t = ctx.track(tracker, pair.v, theta_T);

            if (config.gamma1 > 0.0) {
                const Vec r = t.c_loss - ctx.restrict_target(pair.c);
                g += 2.0 * config.gamma1 * w * (dT.transpose() * r);
            }
            for (const ExtraControlTerm& term : config.extra_gamma1_terms) {
                if (term.weight == 0.0) continue;
                Vec r = Vec::Zero(loss_dim);
                for (int i = 0; i < rig.n_controls(); ++i) {
                    if (!term.mask[static_cast<std::size_t>(i)]) continue;
                    int row = i;
                    if (variant->kind == TrackerVariant::Kind::decimated) {
                        row = -1;
                        for (std::size_t d = 0; d < ctx.dec->active_controls.size(); ++d)
                            if (ctx.dec->active_controls[d] == i)
                                row = static_cast<int>(d);
                        if (row < 0) continue;  // masked control was decimated away
                    }
                    const double target = term.target_zero ? 0.0 : pair.c[i];
                    r[row] = t.c_raw[i] - target;
                }
                // Extra terms read the raw tracker output, so their gradient
                // flows through the unfiltered rows of dT/dtheta.
                g += 2.0 * term.weight * w * (dT_dtheta[k].transpose() * r);
            }

            // Embed decimated control derivatives into full control space once
            // for the geometry terms.
            auto embed_rows = [&](const Mat& m) -> Mat {
                if (variant->kind != TrackerVariant::Kind::decimated) return m;
                Mat full = Mat::Zero(rig.n_controls(), m.cols());
                for (std::size_t d = 0; d < ctx.dec->active_controls.size(); ++d)
                    full.row(ctx.dec->active_controls[d]) =
                        m.row(static_cast<Eigen::Index>(d));
                return full;
            };

            if (need2 || need3) {
                const Mat dT_full = embed_rows(dT);
                if (need2) {
                    const Vec vhat = rig.eval(t.c_full, config.theta_R);
                    const Vec vplus = config.vplus_mode == VplusMode::rig_recomputed
                                          ? rig.eval(pair.c, config.theta_R)
                                          : pair.v;
                    Vec r = vhat - vplus;
                    if (!pair.geometry_mask.empty()) {
                        Vec masked = Vec::Zero(r.size());
                        for (int row : pair.geometry_mask) masked[row] = r[row];
                        r = masked;
                    }
                    const Mat jc = rig.jac_controls(t.c_full, config.theta_R);
                    g += 2.0 * config.gamma2 * w *
                         (dT_full.transpose() * (jc.transpose() * r));
                }
                if (need3) {
                    const Vec vhat = rig.eval(t.c_full, theta_T);
                    Vec r = vhat - pair.v;
                    if (!pair.geometry_mask.empty()) {
                        Vec masked = Vec::Zero(r.size());
                        for (int row : pair.geometry_mask) masked[row] = r[row];
                        r = masked;
                    }
                    const Mat jc = rig.jac_controls(t.c_full, theta_T);
                    g += 2.0 * config.gamma3 * w *
                         (dT_full.transpose() * (jc.transpose() * r));
                    const Mat jp = Mat(rig.jac_params(t.c_full));
                    for (std::size_t a = 0; a < active.size(); ++a)
                        g[static_cast<Eigen::Index>(a)] +=
                            2.0 * config.gamma3 * w * jp.col(active[a]).dot(r);
                }
            }
        }
    }

    if (config.gamma_eps > 0.0) {
        check_dim(theta_T.size() == config.theta_R.size(),
                  "grad_objective: theta size mismatch");
        for (std::size_t a = 0; a < active.size(); ++a)
            g[static_cast<Eigen::Index>(a)] +=
                2.0 * config.gamma_eps * (theta_T[active[a]] - config.theta_R[active[a]]);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Direct least-squares baseline: fit A row-wise to the stacked pairs.

struct DirectFitResult {
    Mat a_hat;
    Vec theta;   // row-major flattening of a_hat
    double l_d = 0.0;
    bool rank_deficient = false;  // minimum-norm solution was taken
};

inline DirectFitResult direct_fit(const std::vector<ExpressionPair>& pairs) {
    check_dim(!pairs.empty(), "direct_fit: no pairs");
    const int n = static_cast<int>(pairs[0].c.size());
    const int m = static_cast<int>(pairs[0].v.size());
    const int k = static_cast<int>(pairs.size());

    Mat c(n, k), v(m, k);
    for (int j = 0; j < k; ++j) {
        check_dim(pairs[static_cast<std::size_t>(j)].c.size() == n &&
                      pairs[static_cast<std::size_t>(j)].v.size() == m,
                  "direct_fit: inconsistent pair dimensions");
        const double sw = std::sqrt(pairs[static_cast<std::size_t>(j)].weight);
        c.col(j) = sw * pairs[static_cast<std::size_t>(j)].c;
        v.col(j) = sw * pairs[static_cast<std::size_t>(j)].v;
    }

    // Solve C^T A^T = V^T in the least-squares sense, row of A at a time.
    Eigen::CompleteOrthogonalDecomposition<Mat> cod(c.transpose());
    DirectFitResult out;
    out.rank_deficient = cod.rank() < n;
    out.a_hat = cod.solve(v.transpose()).transpose();
    out.l_d = (out.a_hat * c - v).squaredNorm();
    out.theta = Vec(n * m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.theta[i * n + j] = out.a_hat(i, j);
    return out;
}

// Sum of squared Frobenius distances between derivative estimates and their
// analytic counterparts.
inline double diagnostic_lvhat(const std::vector<Mat>& estimates,
                               const std::vector<Mat>& analytic) {
    check_dim(estimates.size() == analytic.size(), "diagnostic_lvhat: count mismatch");
    double sum = 0.0;
    for (std::size_t k = 0; k < estimates.size(); ++k) {
        check_dim(estimates[k].rows() == analytic[k].rows() &&
                      estimates[k].cols() == analytic[k].cols(),
                  "diagnostic_lvhat: shape mismatch");
        sum += (estimates[k] - analytic[k]).squaredNorm();
    }
    return sum;
}

// ---------------------------------------------------------------------------
// Serialization.

inline Json breakdown_to_json(const LossBreakdown& b) {
    Json j;
    j["gamma1"] = b.gamma1;
    j["gamma2"] = b.gamma2;
    j["gamma3"] = b.gamma3;
    j["gamma_eps"] = b.gamma_eps;
    j["extra"] = b.extra;
    Json per = Json::object();
    for (std::size_t k = 0; k < b.per_expression.size(); ++k)
        per[b.expression_names[k]] = b.per_expression[k];
    j["per_expression"] = per;
    j["total"] = b.total;
    return j;
}

inline std::string format_full(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

inline std::string loss_csv_header(const ObjectiveConfig& config) {
    std::string line = "iteration,gamma1,gamma2,gamma3,gamma_eps";
    for (std::size_t j = 0; j < config.extra_gamma1_terms.size(); ++j)
        line += ",extra" + std::to_string(j);
    return line + ",total,grad_norm";
}

inline std::string loss_csv_row(long iteration, const LossBreakdown& b,
                                double grad_norm) {
    std::string line = std::to_string(iteration);
    for (double x : {b.gamma1, b.gamma2, b.gamma3, b.gamma_eps})
        line += "," + format_full(x);
    for (double x : b.extra) line += "," + format_full(x);
    line += "," + format_full(b.total) + "," + format_full(grad_norm);
    return line;
}

}  // namespace rigtune
