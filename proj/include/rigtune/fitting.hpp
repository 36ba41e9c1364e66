// Rig calibration: fit rig parameters to (control, geometry) expression
// pairs with optional regularization, per-pair weights and geometry masks,
// plus the named expression-template sets used for guided capture.
#pragma once

#include <rigtune/rig.hpp>

#include <algorithm>
#include <cstdio>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace rigtune {

enum class PairKind { captured, constraint, surrogate };

inline std::string pair_kind_name(PairKind k) {
    switch (k) {
        case PairKind::captured: return "captured";
        case PairKind::constraint: return "constraint";
        case PairKind::surrogate: return "surrogate";
    }
    return "unknown";
}

inline PairKind pair_kind_from_name(const std::string& s) {
    if (s == "captured") return PairKind::captured;
    if (s == "constraint") return PairKind::constraint;
    if (s == "surrogate") return PairKind::surrogate;
    throw ConfigError("unknown pair kind: " + s);
}

// One calibration observation: controls c should produce geometry v.
// An empty geometry_mask means all rows participate.
struct ExpressionPair {
    std::string name;
    Vec c;
    Vec v;
    PairKind kind = PairKind::captured;
    IndexList geometry_mask;
    double weight = 1.0;
};

struct CalibrationConfig {
    double epsilon_reg = 0.0;  // Tikhonov weight toward theta_prior
    Vec theta_prior;           // empty: use the rig's current parameters
    IndexList active_param_set;  // empty: all parameters are free
};

// Returns pair with the given active-geometry-row mask set.
inline ExpressionPair mask_geometry(ExpressionPair pair, IndexList mask) {
    check_dim(!mask.empty(), "mask_geometry: empty mask makes the pair degenerate");
    std::sort(mask.begin(), mask.end());
    mask.erase(std::unique(mask.begin(), mask.end()), mask.end());
    check_dim(mask.front() >= 0 && mask.back() < pair.v.size(),
              "mask_geometry: mask row out of range");
    pair.geometry_mask = std::move(mask);
    return pair;
}

// Keeps the activated entries of c and fills the rest from the tracker
// output (Heaviside blend; an entry counts as activated when
// |c_i| > activation_tol).
inline Vec augment_controls(const Vec& c, const Vec& tracker_output,
                            double activation_tol = 1e-9) {
    check_dim(c.size() == tracker_output.size(), "augment_controls: length mismatch");
    Vec out = tracker_output;
    for (int i = 0; i < c.size(); ++i)
        if (std::abs(c[i]) > activation_tol) out[i] = c[i];
    return out;
}

// Constraint pair whose control vector activates two named controls at once
// and whose target geometry is supplied by the caller (e.g. a closed-lips
// scan for a lip-seal constraint).
inline ExpressionPair constraint_pair_sum(std::string name, int n_controls,
                                          int control_a, int control_b, Vec v,
                                          double weight = 1.0) {
    check_dim(control_a >= 0 && control_a < n_controls && control_b >= 0 &&
                  control_b < n_controls && control_a != control_b,
              "constraint_pair_sum: control indices out of range");
    ExpressionPair p;
    p.name = std::move(name);
    p.c = Vec::Zero(n_controls);
    p.c[control_a] = 1.0;
    p.c[control_b] = 1.0;
    p.v = std::move(v);
    p.kind = PairKind::constraint;
    p.weight = weight;
    return p;
}

// Least-squares calibration of the rig parameters.
//
// Minimizes sum_k w_k ||R(c_k; theta) - v_k||^2 (restricted to each pair's
// geometry mask) + epsilon_reg^2 ||theta - theta_prior||^2 over the active
// parameter set; inactive parameters are returned equal to theta_prior.
//
// Both supported rig families are linear in theta and every parameter
// touches exactly one geometry row, so the problem separates into one small
// least-squares solve per geometry row. With regularization the normal
// equations are solved by a symmetric factorization (with an
// orthogonal-decomposition fallback); without it, a rank check raises
// UnderdeterminedError naming the free parameters.
inline Vec fit_rig_params(const Rig& rig, const std::vector<ExpressionPair>& pairs,
                          const CalibrationConfig& config = {}) {
    check_dim(!pairs.empty(), "fit_rig_params: need at least one pair");
    const int m = rig.m_geometry();
    const int n = rig.n_controls();
    const int t = rig.theta_size();

    Vec prior = config.theta_prior.size() ? config.theta_prior : rig.theta();
    check_dim(prior.size() == t, "fit_rig_params: theta_prior size mismatch");
    const double eps = config.epsilon_reg;
    check_dim(eps >= 0.0, "fit_rig_params: epsilon_reg must be nonnegative");

    Mask active(static_cast<std::size_t>(t), 1);
    if (!config.active_param_set.empty()) {
        active.assign(static_cast<std::size_t>(t), 0);
        for (int idx : config.active_param_set) {
            check_dim(idx >= 0 && idx < t, "fit_rig_params: active parameter out of range");
            active[static_cast<std::size_t>(idx)] = 1;
        }
    }

    // Active parameters grouped by the geometry row they touch.
    std::vector<IndexList> row_params(static_cast<std::size_t>(m));
    for (int j = 0; j < t; ++j) {
        if (!active[static_cast<std::size_t>(j)]) continue;
        const int r = rig.param_geometry_row(j);
        check_dim(r >= 0 && r < m, "fit_rig_params: parameter row out of range");
        row_params[static_cast<std::size_t>(r)].push_back(j);
    }

    // Per-pair parameter Jacobians (theta-independent for these families).
    std::vector<Mat> jacs;
    std::vector<Mask> row_in_mask;
    jacs.reserve(pairs.size());
    for (const auto& pair : pairs) {
        check_dim(pair.c.size() == n && pair.v.size() == m,
                  "fit_rig_params: pair dimension mismatch");
        check_dim(pair.weight >= 0.0, "fit_rig_params: negative pair weight");
        jacs.push_back(Mat(rig.jac_params(pair.c)));
        Mask in_mask(static_cast<std::size_t>(m), 1);
        if (!pair.geometry_mask.empty()) {
            in_mask.assign(static_cast<std::size_t>(m), 0);
            for (int r : pair.geometry_mask) {
                check_dim(r >= 0 && r < m, "fit_rig_params: mask row out of range");
                in_mask[static_cast<std::size_t>(r)] = 1;
            }
        }
        row_in_mask.push_back(std::move(in_mask));
    }

    Vec theta = prior;
    std::string deficiency_report;
    int deficiency_count = 0;

    for (int r = 0; r < m; ++r) {
        const IndexList& params = row_params[static_cast<std::size_t>(r)];
        if (params.empty()) continue;
        const int cols = static_cast<int>(params.size());

        // Stack one equation per pair whose mask includes this row.
        std::vector<int> eq_pairs;
        for (std::size_t k = 0; k < pairs.size(); ++k)
            if (row_in_mask[k][static_cast<std::size_t>(r)]) eq_pairs.push_back(static_cast<int>(k));

        Mat b = Mat::Zero(static_cast<Eigen::Index>(eq_pairs.size()), cols);
        Vec rhs = Vec::Zero(static_cast<Eigen::Index>(eq_pairs.size()));
        for (std::size_t e = 0; e < eq_pairs.size(); ++e) {
            const int k = eq_pairs[e];
            const double sw = std::sqrt(pairs[static_cast<std::size_t>(k)].weight);
            double target = pairs[static_cast<std::size_t>(k)].v[r];
            // Contributions of inactive parameters stay fixed at the prior.
            for (int j = 0; j < t; ++j)
                if (!active[static_cast<std::size_t>(j)] && rig.param_geometry_row(j) == r)
                    target -= jacs[static_cast<std::size_t>(k)](r, j) * prior[j];
            for (int idx = 0; idx < cols; ++idx)
                b(static_cast<Eigen::Index>(e), idx) =
                    sw * jacs[static_cast<std::size_t>(k)](r, params[static_cast<std::size_t>(idx)]);
            rhs[static_cast<Eigen::Index>(e)] = sw * target;
        }

        Vec sol;
        if (eps > 0.0) {
            Vec prior_r(cols);
            for (int idx = 0; idx < cols; ++idx)
                prior_r[idx] = prior[params[static_cast<std::size_t>(idx)]];
            const Mat h = b.transpose() * b + (eps * eps) * Mat::Identity(cols, cols);
            const Vec g = b.transpose() * rhs + (eps * eps) * prior_r;
            Eigen::LDLT<Mat> ldlt(h);
            if (ldlt.info() == Eigen::Success) {
                sol = ldlt.solve(g);
            } else {
                Eigen::CompleteOrthogonalDecomposition<Mat> cod(h);
                sol = cod.solve(g);
            }
        } else {
            Eigen::ColPivHouseholderQR<Mat> qr(b);
            qr.setThreshold(1e-10);
            const int rank = static_cast<int>(qr.rank());
            if (rank < cols) {
                // Pivot columns beyond the numerical rank are the free ones.
                IndexList free_params;
                const auto& perm = qr.colsPermutation().indices();
                for (int idx = rank; idx < cols; ++idx)
                    free_params.push_back(params[static_cast<std::size_t>(perm[idx])]);
                std::sort(free_params.begin(), free_params.end());
                deficiency_count += cols - rank;
                if (!deficiency_report.empty()) deficiency_report += "; ";
                deficiency_report += "row " + std::to_string(r) + ": " +
                                     std::to_string(cols - rank) +
                                     " null dimension(s) over parameter(s) [" +
                                     join_ints(free_params) + "] from " +
                                     std::to_string(eq_pairs.size()) + " equation(s)";
                continue;
            }
            Eigen::CompleteOrthogonalDecomposition<Mat> cod(b);
            cod.setThreshold(1e-10);
            sol = cod.solve(rhs);
        }
        for (int idx = 0; idx < cols; ++idx)
            theta[params[static_cast<std::size_t>(idx)]] = sol[idx];
    }

    if (deficiency_count > 0)
        throw UnderdeterminedError(
            "fit_rig_params: system is underdetermined with epsilon_reg = 0 (" +
            std::to_string(deficiency_count) + " total null dimension(s)): " +
            deficiency_report);
    check_finite(theta, "fit_rig_params: non-finite parameters");
    return theta;
}

// -------------------------------------------------------------------------
// Named expression templates (controls only; geometry comes from capture
// files or a generating rig).

struct ExpressionTemplate {
    std::string name;
    PairKind kind = PairKind::captured;
    double weight = 1.0;
    // Control activations by name; every control not listed is zero.
    std::vector<std::pair<std::string, double>> controls;
};

enum class ExpressionSetKind { person19, puppet15, synthetic };

// Resolves a template's named activations against a rig's control names.
inline Vec resolve_controls(const ExpressionTemplate& expr,
                            const std::vector<std::string>& control_names) {
    Vec c = Vec::Zero(static_cast<Eigen::Index>(control_names.size()));
    for (const auto& [name, value] : expr.controls) {
        const auto it = std::find(control_names.begin(), control_names.end(), name);
        if (it == control_names.end())
            throw ConfigError("resolve_controls: unknown control '" + name + "'");
        c[static_cast<Eigen::Index>(it - control_names.begin())] = value;
    }
    return c;
}

// Control names implied by an expression-template set, in first-use order.
inline std::vector<std::string> template_control_names(
    const std::vector<ExpressionTemplate>& set) {
    std::vector<std::string> names;
    for (const auto& expr : set)
        for (const auto& [name, value] : expr.controls)
            if (std::find(names.begin(), names.end(), name) == names.end())
                names.push_back(name);
    return names;
}

// Guided-capture template sets. Activation values are invented analogues:
// each non-neutral expression drives its own control, and the only overlap
// is the jaw-open pair, whose extreme variant pushes the same control
// further.
inline std::vector<ExpressionTemplate> make_expression_set(ExpressionSetKind kind,
                                                           std::uint64_t seed = 0) {
    std::vector<ExpressionTemplate> set;
    auto add = [&set](const std::string& name,
                      std::vector<std::pair<std::string, double>> controls) {
        ExpressionTemplate t;
        t.name = name;
        t.controls = std::move(controls);
        set.push_back(std::move(t));
    };

    if (kind == ExpressionSetKind::person19) {
        add("neutral", {});
        for (const char* name :
             {"brows down", "brows up", "eyes wide", "eyes close", "nose wrinkle",
              "cheek puff", "teeth grimace", "corner pull", "mouth stretch",
              "corner depress", "lip press", "pursed lips", "mouth funnel",
              "lip bite"})
            add(name, {{name, 1.0}});
        add("jaw open", {{"jaw open", 1.0}});
        add("jaw open extreme", {{"jaw open", 1.4}});
        add("jaw left", {{"jaw left", 1.0}});
        add("jaw right", {{"jaw right", 1.0}});
        return set;
    }
    if (kind == ExpressionSetKind::puppet15) {
        add("neutral", {});
        for (const char* name :
             {"eyes close", "eyes wide", "brows raise", "brows down",
              "teeth grimace", "pursed smile", "corner depress"})
            add(name, {{name, 1.0}});
        add("jaw open", {{"jaw open", 1.0}});
        add("jaw left", {{"jaw left", 1.0}});
        add("jaw right", {{"jaw right", 1.0}});
        for (const char* name : {"OO", "CH", "M/B/P", "F/V"})
            add(name, {{name, 1.0}});
        return set;
    }

    // Synthetic analogue of the 19-expression set: seeded activation values,
    // disjoint controls except the jaw-open analogue pair.
    Rng rng(derive_seed(seed, 0x5e7, 0));
    add("neutral", {});
    for (int i = 0; i < 14; ++i) {
        char ctrl[16];
        std::snprintf(ctrl, sizeof(ctrl), "ctrl%02d", i);
        char name[16];
        std::snprintf(name, sizeof(name), "expr%02d", i + 1);
        add(name, {{ctrl, rng.uniform(0.6, 1.1)}});
    }
    const double jaw = rng.uniform(0.6, 1.1);
    add("expr15", {{"ctrl14", jaw}});
    add("expr16", {{"ctrl14", 1.4 * jaw}});
    add("expr17", {{"ctrl15", rng.uniform(0.6, 1.1)}});
    add("expr18", {{"ctrl16", rng.uniform(0.6, 1.1)}});
    return set;
}

}  // namespace rigtune
