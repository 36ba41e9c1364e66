// Black-box differentiation of a tracker: Broyden-style secant estimation
// of d v_hat / d theta from forward differences, adaptive finite-difference
// step selection on a decade grid, and the implicit-equation solve that
// converts the estimate into d T / d theta.
#pragma once

#include <rigtune/rig.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace rigtune {

// u: parameter vector -> observation vector (typically theta -> v_hat).
using VectorField = std::function<Vec(const Vec&)>;

// Running secant estimate of du/dtheta at an anchor point.
struct JacobianEstimate {
    Mat matrix;        // rows: u output, cols: parameters
    Vec anchor_theta;  // anchor the estimate refers to
    int update_count = 0;

    static JacobianEstimate zero(int out_dim, const Vec& anchor) {
        JacobianEstimate est;
        est.matrix = Mat::Zero(out_dim, anchor.size());
        est.anchor_theta = anchor;
        return est;
    }
};

namespace detail {

inline void check_unit_direction(const Vec& d, const std::string& who) {
    check_dim(std::abs(d.norm() - 1.0) <= 1e-8, who + ": direction must be unit length");
}

inline Vec eval_checked(const VectorField& u_eval, const Vec& theta,
                        const std::string& who) {
    Vec out = u_eval(theta);
    if (!out.allFinite())
        throw NonFiniteError(who + ": non-finite output at theta fingerprint " +
                             std::to_string(fingerprint(theta)));
    return out;
}

// Rank-one secant update with the anchor value already evaluated.
inline void secant_update_inplace(JacobianEstimate& est, const VectorField& u_eval,
                                  const Vec& u0, const Vec& direction, double s) {
    check_unit_direction(direction, "secant_update");
    check_dim(s > 0.0, "secant_update: step must be positive");
    check_dim(direction.size() == est.anchor_theta.size(),
              "secant_update: direction size mismatch");
    const Vec u1 =
        eval_checked(u_eval, est.anchor_theta + s * direction, "secant_update");
    check_dim(u1.size() == est.matrix.rows(), "secant_update: output size mismatch");
    const Vec fd = (u1 - u0) / s;
    est.matrix += (fd - est.matrix * direction) * direction.transpose();
    ++est.update_count;
}

}  // namespace detail

// One Broyden-style rank-one correction: afterwards the estimate reproduces
// the forward difference of u along `direction` exactly (to round-off).
inline JacobianEstimate secant_update(JacobianEstimate est, const VectorField& u_eval,
                                      const Vec& direction, double s) {
    const Vec u0 = detail::eval_checked(u_eval, est.anchor_theta, "secant_update");
    check_dim(u0.size() == est.matrix.rows(), "secant_update: output size mismatch");
    detail::secant_update_inplace(est, u_eval, u0, direction, s);
    return est;
}

// ---------------------------------------------------------------------------
// Finite-difference step selection.

inline std::vector<double> default_step_grid() {
    return {1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2};
}

struct StepSelection {
    std::vector<double> s_grid;
    // Sensitivity of the one-direction difference quotient at each interior
    // grid point: || q(s) - q(s_prev) || + || q(s) - q(s_next) ||. Since the
    // probe direction is unit length, the vector norms equal the Frobenius
    // norms of the corresponding rank-one matrix differences.
    std::vector<double> l_delta_profile;
    double chosen_s = 0.0;
};

inline StepSelection select_step(const VectorField& u_eval, const Vec& anchor,
                                 const Vec& direction,
                                 const std::vector<double>& grid = default_step_grid()) {
    detail::check_unit_direction(direction, "select_step");
    check_dim(grid.size() >= 3, "select_step: grid needs at least 3 entries");
    for (std::size_t i = 0; i + 1 < grid.size(); ++i)
        check_dim(grid[i] > 0.0 && grid[i] < grid[i + 1],
                  "select_step: grid must be positive and increasing");

    const Vec u0 = u_eval(anchor);
    std::vector<Vec> quotients;
    quotients.reserve(grid.size());
    for (double s : grid) {
        const Vec u1 = u_eval(anchor + s * direction);
        quotients.push_back((u1 - u0) / s);
    }

    StepSelection sel;
    sel.s_grid = grid;
    sel.l_delta_profile.reserve(grid.size() - 2);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i + 1 < grid.size(); ++i) {
        const double l_delta = (quotients[i] - quotients[i - 1]).norm() +
                               (quotients[i] - quotients[i + 1]).norm();
        sel.l_delta_profile.push_back(l_delta);
        // NaNs never win; smallest-s tie-break via strict less-than.
        if (std::isfinite(l_delta) && l_delta < best) {
            best = l_delta;
            sel.chosen_s = grid[i];
        }
    }
    if (!(best < std::numeric_limits<double>::infinity()))
        throw NonFiniteError("select_step: sensitivity profile has no finite entry");
    return sel;
}

// ---------------------------------------------------------------------------
// Direction strategies and step policies for the estimator.

struct DirectionStrategy {
    enum class Mode { random, steepest_descent, fixed_list };
    Mode mode = Mode::random;
    int count = 1;
    std::uint64_t seed = 0;
    std::vector<Vec> directions;  // fixed_list mode
    // steepest_descent mode: gradient of the active objective w.r.t. theta
    // given the current (pre-update) estimate; the emitted direction is the
    // normalized negative gradient.
    std::function<Vec(const JacobianEstimate&)> gradient_fn;

    static DirectionStrategy random(int count, std::uint64_t seed) {
        DirectionStrategy s;
        s.mode = Mode::random;
        s.count = count;
        s.seed = seed;
        return s;
    }
    static DirectionStrategy steepest_descent(
        std::function<Vec(const JacobianEstimate&)> gradient_fn, int count = 1,
        std::uint64_t seed = 0) {
        DirectionStrategy s;
        s.mode = Mode::steepest_descent;
        s.count = count;
        s.seed = seed;
        s.gradient_fn = std::move(gradient_fn);
        return s;
    }
    static DirectionStrategy fixed(std::vector<Vec> directions) {
        DirectionStrategy s;
        s.mode = Mode::fixed_list;
        s.directions = std::move(directions);
        s.count = static_cast<int>(s.directions.size());
        return s;
    }
};

struct StepPolicy {
    enum class Kind { fixed, adaptive };
    Kind kind = Kind::adaptive;
    double fixed_s = 1e-4;
    // Adaptive only: run the grid search once, then reuse the chosen s for
    // every later direction (the sensitivity profile has a wide flat basin,
    // so freezing is safe and avoids the per-direction grid cost).
    bool freeze_after_first = false;

    static StepPolicy fixed_step(double s) { return {Kind::fixed, s, false}; }
    static StepPolicy adaptive(bool freeze_after_first = false) {
        return {Kind::adaptive, 1e-4, freeze_after_first};
    }
};

// Carries the frozen step across estimator calls (e.g. optimizer iterations).
struct StepState {
    double frozen_s = 0.0;
};

// Per-update diagnostic row for trace dumps.
struct DiffTraceRow {
    int direction_index = 0;
    double s = 0.0;
    double l_delta = 0.0;          // profile value at the chosen s (0 if fixed)
    double secant_residual = 0.0;  // post-update, relative
    const StepSelection* selection = nullptr;  // full profile when adaptive
};
using DiffTrace = std::function<void(const DiffTraceRow&)>;

// Builds/refreshes a secant estimate of du/dtheta at `anchor`: starting from
// the warm estimate (re-anchored) or zero, applies one rank-one update per
// emitted direction with the configured step policy.
inline JacobianEstimate estimate_dvhat_dtheta(const VectorField& u_eval, const Vec& anchor,
                                              const DirectionStrategy& strategy,
                                              const JacobianEstimate* warm = nullptr,
                                              const StepPolicy& policy = {},
                                              StepState* state = nullptr,
                                              const DiffTrace& trace = {}) {
    const Vec u0 = detail::eval_checked(u_eval, anchor, "estimate_dvhat_dtheta");
    JacobianEstimate est;
    if (warm) {
        check_dim(warm->matrix.cols() == anchor.size() &&
                      warm->matrix.rows() == u0.size(),
                  "estimate_dvhat_dtheta: warm estimate size mismatch");
        est = *warm;
        est.anchor_theta = anchor;  // re-anchor; warm start keeps the matrix
    } else {
        est = JacobianEstimate::zero(static_cast<int>(u0.size()), anchor);
    }

    const int t = static_cast<int>(anchor.size());
    Rng rng(derive_seed(strategy.seed, 0xd14, static_cast<std::uint64_t>(t)));
    const int count = strategy.mode == DirectionStrategy::Mode::fixed_list
                          ? static_cast<int>(strategy.directions.size())
                          : strategy.count;

    for (int k = 0; k < count; ++k) {
        Vec d;
        switch (strategy.mode) {
            case DirectionStrategy::Mode::random:
                d = rng.normal_vec(t);
                break;
            case DirectionStrategy::Mode::steepest_descent: {
                check_dim(static_cast<bool>(strategy.gradient_fn),
                          "estimate_dvhat_dtheta: steepest descent needs a gradient");
                d = -strategy.gradient_fn(est);
                if (d.norm() == 0.0) d = rng.normal_vec(t);  // flat: probe randomly
                break;
            }
            case DirectionStrategy::Mode::fixed_list:
                d = strategy.directions[static_cast<std::size_t>(k)];
                break;
        }
        const double norm = d.norm();
        check_dim(norm > 0.0, "estimate_dvhat_dtheta: zero direction");
        d /= norm;

        double s = policy.fixed_s;
        double l_delta = 0.0;
        StepSelection sel;
        bool have_selection = false;
        if (policy.kind == StepPolicy::Kind::adaptive) {
            if (policy.freeze_after_first && state && state->frozen_s > 0.0) {
                s = state->frozen_s;
            } else {
                sel = select_step(u_eval, anchor, d);
                have_selection = true;
                s = sel.chosen_s;
                for (std::size_t i = 1; i + 1 < sel.s_grid.size(); ++i)
                    if (sel.s_grid[i] == s) l_delta = sel.l_delta_profile[i - 1];
                if (policy.freeze_after_first && state) state->frozen_s = s;
            }
        }

        detail::secant_update_inplace(est, u_eval, u0, d, s);

        if (trace) {
            DiffTraceRow row;
            row.direction_index = k;
            row.s = s;
            row.l_delta = l_delta;
            const Vec u1 = u_eval(anchor + s * d);
            const Vec fd = (u1 - u0) / s;
            row.secant_residual =
                (est.matrix * d - fd).norm() / std::max(1.0, fd.norm());
            row.selection = have_selection ? &sel : nullptr;
            trace(row);
        }
    }
    return est;
}

// ---------------------------------------------------------------------------
// Implicit solve: (dR/dc) (dT/dtheta) = -dR/dtheta + dvhat/dtheta.

// `dvhat` may be empty (the drop-the-term simplification); `active` selects
// the parameter columns of interest (empty = all). The result is
// n_controls x |active|.
inline Mat solve_dT_dtheta(const Rig& rig, const Vec& c, const Mat& dvhat,
                           const Vec& theta_T, double reg_eps = 0.0,
                           const IndexList& active = {}) {
    check_dim(c.size() == rig.n_controls(), "solve_dT_dtheta: control size mismatch");
    check_dim(theta_T.size() == rig.theta_size(), "solve_dT_dtheta: theta size mismatch");
    check_dim(reg_eps >= 0.0, "solve_dT_dtheta: negative regularization");

    const Mat j = rig.jac_controls(c, theta_T);  // m x n
    const Mat dr_dtheta_full = Mat(rig.jac_params(c));

    const int t_active =
        active.empty() ? rig.theta_size() : static_cast<int>(active.size());
    Mat rhs(j.rows(), t_active);
    if (active.empty()) {
        rhs = -dr_dtheta_full;
    } else {
        for (int k = 0; k < t_active; ++k) {
            const int idx = active[static_cast<std::size_t>(k)];
            check_dim(idx >= 0 && idx < rig.theta_size(),
                      "solve_dT_dtheta: active index out of range");
            rhs.col(k) = -dr_dtheta_full.col(idx);
        }
    }
    if (dvhat.size() > 0) {
        check_dim(dvhat.rows() == j.rows() && dvhat.cols() == t_active,
                  "solve_dT_dtheta: dvhat size mismatch");
        rhs += dvhat;
    }

    if (reg_eps > 0.0) {
        // Normal equations with the epsilon rows appended: they solve
        // argmin ||J X - rhs||^2 + eps^2 ||X||^2 column by column.
        const double e2 = reg_eps * reg_eps;
        const Mat h = j.transpose() * j + e2 * Mat::Identity(j.cols(), j.cols());
        Eigen::LDLT<Mat> ldlt(h);
        if (ldlt.info() == Eigen::Success) return ldlt.solve(j.transpose() * rhs);
        Eigen::CompleteOrthogonalDecomposition<Mat> cod(h);
        return cod.solve(j.transpose() * rhs);
    }

    Eigen::CompleteOrthogonalDecomposition<Mat> cod(j);
    if (cod.rank() < j.cols())
        throw SingularMatrixError(
            "solve_dT_dtheta: control jacobian is rank-deficient (rank " +
            std::to_string(cod.rank()) + " of " + std::to_string(j.cols()) +
            ") and reg_eps is zero");
    return cod.solve(rhs);
}

}  // namespace rigtune
