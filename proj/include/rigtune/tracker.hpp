// Tracker abstraction: geometry in, controls out, parameterized by the
// tracking-rig parameters theta_T. Concrete reference trackers (direct
// inverse-rig solvers and deliberately perturbed variants), control
// filtering, problem decimation, and a line-delimited JSON subprocess
// bridge for external black-box trackers.
#pragma once

#include <rigtune/rig.hpp>

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace rigtune {

// ---------------------------------------------------------------------------
// Solve modes for inverse-rig solves.

struct SolveMode {
    enum class Kind { inverse, least_squares, min_norm, lm };
    Kind kind = Kind::lm;
    double epsilon = 1e-8;  // only used by Kind::lm

    static SolveMode inverse() { return {Kind::inverse, 0.0}; }
    static SolveMode least_squares() { return {Kind::least_squares, 0.0}; }
    static SolveMode min_norm() { return {Kind::min_norm, 0.0}; }
    static SolveMode lm(double eps) { return {Kind::lm, eps}; }
};

namespace detail {

// Linear solve of J c ~= v under the given mode. J is dense m x n.
inline Vec solve_linear(const Mat& j, const Vec& v, const SolveMode& mode,
                        const std::string& who) {
    switch (mode.kind) {
        case SolveMode::Kind::inverse: {
            check_dim(j.rows() == j.cols(), who + ": inverse mode needs a square matrix");
            Eigen::FullPivLU<Mat> lu(j);
            if (!lu.isInvertible())
                throw SingularMatrixError(who + ": matrix is singular in inverse mode");
            return lu.solve(v);
        }
        case SolveMode::Kind::least_squares: {
            Eigen::ColPivHouseholderQR<Mat> qr(j);
            return qr.solve(v);
        }
        case SolveMode::Kind::min_norm: {
            Eigen::CompleteOrthogonalDecomposition<Mat> cod(j);
            return cod.solve(v);
        }
        case SolveMode::Kind::lm: {
            const double e2 = mode.epsilon * mode.epsilon;
            const Mat h = j.transpose() * j + e2 * Mat::Identity(j.cols(), j.cols());
            return Eigen::LDLT<Mat>(h).solve(j.transpose() * v);
        }
    }
    throw TrackerError(who + ": unknown solve mode");
}

}  // namespace detail

// Inverse-rig solve: find c with R(c; theta) ~= v under the given mode.
// Linear rigs solve in one shot; the nonlinear joint product-column rig is
// solved by Gauss-Newton (step halving on non-decrease) on the residual —
// augmented with the Tikhonov term when mode is lm, so lm yields the true
// regularized minimizer of ||R(c) - v||^2 + eps^2 ||c||^2.
inline Vec track_direct(const Rig& rig, const Vec& v, const SolveMode& mode = {},
                        const Vec* theta_override = nullptr) {
    const Vec& theta = theta_override ? *theta_override : rig.theta();
    check_dim(v.size() == rig.m_geometry(), "track_direct: geometry size mismatch");
    check_dim(theta.size() == rig.theta_size(), "track_direct: theta size mismatch");

    if (const auto* linear = dynamic_cast<const LinearRig*>(&rig)) {
        return detail::solve_linear(linear->matrix_view(theta), v, mode, "track_direct");
    }

    // Gauss-Newton for nonlinear rigs.
    const double e2 =
        mode.kind == SolveMode::Kind::lm ? mode.epsilon * mode.epsilon : 0.0;
    Vec c = Vec::Zero(rig.n_controls());
    auto objective = [&](const Vec& x) {
        const Vec f = rig.eval(x, theta) - v;
        return f.squaredNorm() + e2 * x.squaredNorm();
    };
    double obj = objective(c);
    for (int iter = 0; iter < 200; ++iter) {
        const Vec f = rig.eval(c, theta) - v;
        const Mat j = rig.jac_controls(c, theta);
        const Vec grad = j.transpose() * f + e2 * c;
        if (grad.norm() < 1e-10) break;
        Vec step;
        if (mode.kind == SolveMode::Kind::lm) {
            const Mat h = j.transpose() * j + e2 * Mat::Identity(j.cols(), j.cols());
            step = -Eigen::LDLT<Mat>(h).solve(grad);
        } else if (mode.kind == SolveMode::Kind::inverse) {
            check_dim(j.rows() == j.cols(),
                      "track_direct: inverse mode needs a square jacobian");
            Eigen::FullPivLU<Mat> lu(j);
            if (!lu.isInvertible())
                throw SingularMatrixError("track_direct: singular jacobian in inverse mode");
            step = -lu.solve(f);
        } else {
            step = -detail::solve_linear(j, f, mode, "track_direct");
        }
        // Step halving on non-decrease.
        double scale = 1.0;
        bool accepted = false;
        for (int h = 0; h < 40; ++h) {
            const Vec cand = c + scale * step;
            const double cand_obj = objective(cand);
            if (cand_obj < obj) {
                c = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if (!accepted) break;  // stalled: no descent along the step
    }
    check_finite(c, "track_direct: non-finite controls");
    return c;
}

// ---------------------------------------------------------------------------
// Control perturbations for the deliberately imperfect reference trackers.

struct ControlPerturbation {
    enum class Mode { T1_additive, T2_rig_scaled };
    Mode mode = Mode::T1_additive;
    // Control offset as a function of the geometry input.
    std::function<Vec(const Vec&)> c_tilde;

    static ControlPerturbation t1(std::function<Vec(const Vec&)> f) {
        return {Mode::T1_additive, std::move(f)};
    }
    static ControlPerturbation t2(std::function<Vec(const Vec&)> f) {
        return {Mode::T2_rig_scaled, std::move(f)};
    }
    static ControlPerturbation t1_constant(Vec offset) {
        return {Mode::T1_additive, [offset = std::move(offset)](const Vec&) { return offset; }};
    }
    static ControlPerturbation t2_constant(Vec offset) {
        return {Mode::T2_rig_scaled, [offset = std::move(offset)](const Vec&) { return offset; }};
    }
};

// Imperfect inversion: T1 adds the offset directly to the solve result;
// T2 pushes the offset through the rig first (A * c_tilde for linear rigs).
inline Vec track_perturbed(const Rig& rig, const Vec& v,
                           const ControlPerturbation& perturbation,
                           const SolveMode& mode = {},
                           const Vec* theta_override = nullptr) {
    const Vec base = track_direct(rig, v, mode, theta_override);
    if (!perturbation.c_tilde) return base;
    const Vec offset = perturbation.c_tilde(v);
    check_dim(offset.size() == rig.n_controls(),
              "track_perturbed: c_tilde size mismatch");
    if (perturbation.mode == ControlPerturbation::Mode::T1_additive) return base + offset;
    const Vec& theta = theta_override ? *theta_override : rig.theta();
    return base + rig.eval(offset, theta);
}

// ---------------------------------------------------------------------------
// Tracker interface.

struct TrackerCaps {
    bool supports_decimation = false;
    bool exposes_internals = false;
};

class Tracker {
public:
    virtual ~Tracker() = default;
    // Deterministic: identical (v, theta_T) must yield identical controls.
    virtual Vec track(const Vec& v, const Vec& theta_T) const = 0;
    virtual TrackerCaps caps() const = 0;
    virtual int n_controls() const = 0;
    virtual int m_geometry() const = 0;
    virtual int theta_size() const = 0;
};

// Active-control mask (diagonal Heaviside matrix H; idempotent by
// construction since entries are 0/1).
struct FilterMask {
    Mask active;

    int count() const { return mask_count(active); }
    IndexList indices() const { return mask_indices(active); }
    bool is_active(int i) const {
        return active[static_cast<std::size_t>(i)] != 0;
    }
};

// Reference tracker that inverts a rig it owns.
class DirectTracker : public Tracker {
public:
    DirectTracker(std::unique_ptr<Rig> rig, SolveMode mode = {})
        : rig_(std::move(rig)), mode_(mode) {}
    DirectTracker(const Rig& rig, SolveMode mode = {}) : rig_(rig.clone()), mode_(mode) {}

    Vec track(const Vec& v, const Vec& theta_T) const override {
        return track_direct(*rig_, v, mode_, &theta_T);
    }
    TrackerCaps caps() const override { return {true, true}; }
    int n_controls() const override { return rig_->n_controls(); }
    int m_geometry() const override { return rig_->m_geometry(); }
    int theta_size() const override { return rig_->theta_size(); }
    const Rig& rig() const { return *rig_; }
    const SolveMode& mode() const { return mode_; }

private:
    std::unique_ptr<Rig> rig_;
    SolveMode mode_;
};

// Reference tracker with a deliberate inversion error.
class PerturbedTracker : public Tracker {
public:
    PerturbedTracker(std::unique_ptr<Rig> rig, ControlPerturbation perturbation,
                     SolveMode mode = {})
        : rig_(std::move(rig)), perturbation_(std::move(perturbation)), mode_(mode) {}
    PerturbedTracker(const Rig& rig, ControlPerturbation perturbation, SolveMode mode = {})
        : rig_(rig.clone()), perturbation_(std::move(perturbation)), mode_(mode) {}

    Vec track(const Vec& v, const Vec& theta_T) const override {
        return track_perturbed(*rig_, v, perturbation_, mode_, &theta_T);
    }
    TrackerCaps caps() const override { return {false, true}; }
    int n_controls() const override { return rig_->n_controls(); }
    int m_geometry() const override { return rig_->m_geometry(); }
    int theta_size() const override { return rig_->theta_size(); }
    const Rig& rig() const { return *rig_; }
    const ControlPerturbation& perturbation() const { return perturbation_; }
    const SolveMode& mode() const { return mode_; }

private:
    std::unique_ptr<Rig> rig_;
    ControlPerturbation perturbation_;
    SolveMode mode_;
};

// T_H = H * T: zero out filtered control entries; the inner tracker still
// sees the full problem.
class FilteredTracker : public Tracker {
public:
    FilteredTracker(std::shared_ptr<const Tracker> inner, FilterMask mask)
        : inner_(std::move(inner)), mask_(std::move(mask)) {
        check_dim(static_cast<int>(mask_.active.size()) == inner_->n_controls(),
                  "FilteredTracker: mask length mismatch");
    }

    Vec track(const Vec& v, const Vec& theta_T) const override {
        Vec c = inner_->track(v, theta_T);
        for (int i = 0; i < c.size(); ++i)
            if (!mask_.is_active(i)) c[i] = 0.0;
        return c;
    }
    TrackerCaps caps() const override { return inner_->caps(); }
    int n_controls() const override { return inner_->n_controls(); }
    int m_geometry() const override { return inner_->m_geometry(); }
    int theta_size() const override { return inner_->theta_size(); }
    const FilterMask& mask() const { return mask_; }

private:
    std::shared_ptr<const Tracker> inner_;
    FilterMask mask_;
};

inline std::shared_ptr<Tracker> filter_tracker(std::shared_ptr<const Tracker> inner,
                                               FilterMask mask) {
    return std::make_shared<FilteredTracker>(std::move(inner), std::move(mask));
}

// ---------------------------------------------------------------------------
// Problem decimation: restrict a rig to active controls and the parameters
// reachable from them.

struct Decimation {
    std::unique_ptr<Rig> sub_rig;  // R_D: active controls only, all geometry rows
    IndexList theta_indices;       // position k of sub theta <- full theta index
    IndexList active_controls;     // position k of sub controls <- full control index
    int full_n_controls = 0;
    int full_theta_size = 0;

    Vec embed_controls(const Vec& c_d) const {
        check_dim(c_d.size() == static_cast<Eigen::Index>(active_controls.size()),
                  "Decimation: sub control size mismatch");
        Vec c = Vec::Zero(full_n_controls);
        for (std::size_t k = 0; k < active_controls.size(); ++k)
            c[active_controls[k]] = c_d[static_cast<Eigen::Index>(k)];
        return c;
    }
    Vec restrict_controls(const Vec& c) const {
        check_dim(c.size() == full_n_controls, "Decimation: full control size mismatch");
        Vec c_d(static_cast<Eigen::Index>(active_controls.size()));
        for (std::size_t k = 0; k < active_controls.size(); ++k)
            c_d[static_cast<Eigen::Index>(k)] = c[active_controls[k]];
        return c_d;
    }
    Vec restrict_theta(const Vec& theta) const {
        check_dim(theta.size() == full_theta_size, "Decimation: full theta size mismatch");
        Vec t(static_cast<Eigen::Index>(theta_indices.size()));
        for (std::size_t k = 0; k < theta_indices.size(); ++k)
            t[static_cast<Eigen::Index>(k)] = theta[theta_indices[k]];
        return t;
    }
    Vec embed_theta(const Vec& theta_d, Vec theta_full) const {
        check_dim(theta_d.size() == static_cast<Eigen::Index>(theta_indices.size()) &&
                      theta_full.size() == full_theta_size,
                  "Decimation: theta size mismatch");
        for (std::size_t k = 0; k < theta_indices.size(); ++k)
            theta_full[theta_indices[k]] = theta_d[static_cast<Eigen::Index>(k)];
        return theta_full;
    }
};

inline Decimation decimate_problem(const Rig& rig, const FilterMask& mask) {
    check_dim(static_cast<int>(mask.active.size()) == rig.n_controls(),
              "decimate_problem: mask length mismatch");
    Decimation d;
    d.active_controls = mask.indices();
    d.full_n_controls = rig.n_controls();
    d.full_theta_size = rig.theta_size();
    check_dim(!d.active_controls.empty(), "decimate_problem: empty mask");

    if (const auto* linear = dynamic_cast<const LinearRig*>(&rig)) {
        const int n = linear->n_controls();
        const int m = linear->m_geometry();
        const int n_sub = static_cast<int>(d.active_controls.size());
        auto sub = std::make_unique<LinearRig>(n_sub, m);
        Vec sub_theta(static_cast<Eigen::Index>(m) * n_sub);
        for (int i = 0; i < m; ++i) {
            for (int k = 0; k < n_sub; ++k) {
                const int j = d.active_controls[static_cast<std::size_t>(k)];
                d.theta_indices.push_back(i * n + j);
                sub_theta[static_cast<Eigen::Index>(i) * n_sub + k] =
                    linear->theta()[i * n + j];
            }
        }
        sub->set_theta(sub_theta);
        d.sub_rig = std::move(sub);
        return d;
    }

    const auto* joint = dynamic_cast<const JointPsdRig*>(&rig);
    check_dim(joint != nullptr, "decimate_problem: unsupported rig type");

    // Controls remap: full index -> compact index.
    std::vector<int> remap(static_cast<std::size_t>(joint->n_controls()), -1);
    for (std::size_t k = 0; k < d.active_controls.size(); ++k)
        remap[static_cast<std::size_t>(d.active_controls[k])] = static_cast<int>(k);

    // Keep the PSD columns whose subsets are fully active; their nonzeros
    // are the reachable parameters.
    std::vector<std::vector<int>> sub_spec;
    std::vector<int> sub_rows, sub_cols;
    std::vector<double> sub_vals;
    for (int col = 0; col < joint->p_psd(); ++col) {
        const auto& subset = joint->psd_spec()[static_cast<std::size_t>(col)];
        bool all_active = true;
        for (int ctrl : subset)
            if (remap[static_cast<std::size_t>(ctrl)] < 0) all_active = false;
        if (!all_active) continue;
        std::vector<int> mapped;
        for (int ctrl : subset) mapped.push_back(remap[static_cast<std::size_t>(ctrl)]);
        std::sort(mapped.begin(), mapped.end());
        const int sub_col = static_cast<int>(sub_spec.size());
        sub_spec.push_back(std::move(mapped));
        for (int k = joint->col_ptr()[static_cast<std::size_t>(col)];
             k < joint->col_ptr()[static_cast<std::size_t>(col) + 1]; ++k) {
            d.theta_indices.push_back(k);
            sub_rows.push_back(joint->row_idx()[static_cast<std::size_t>(k)]);
            sub_cols.push_back(sub_col);
            sub_vals.push_back(joint->theta()[k]);
        }
    }
    check_dim(!d.theta_indices.empty(), "decimate_problem: no reachable parameters");
    d.sub_rig = std::make_unique<JointPsdRig>(
        static_cast<int>(d.active_controls.size()), joint->m_geometry(), sub_spec,
        sub_rows, sub_cols,
        Eigen::Map<const Vec>(sub_vals.data(), static_cast<Eigen::Index>(sub_vals.size())));
    return d;
}

// ---------------------------------------------------------------------------
// v_hat: geometry the tracker's controls reproduce on the tracking rig,
// optionally minus a correction evaluator.

using GeometryCorrection = std::function<Vec(const Vec& v, const Vec& theta_T)>;

inline Vec tracker_rig_eval(const Tracker& tracker, const Rig& rig, const Vec& v,
                            const Vec& theta_T,
                            const GeometryCorrection& correction = {}) {
    const Vec c = tracker.track(v, theta_T);
    Vec v_hat = rig.eval(c, theta_T);
    if (correction) v_hat -= correction(v, theta_T);
    return v_hat;
}

// Analytic d v_hat / d theta for the perturbed reference trackers on an
// invertible linear rig: the solve-then-re-evaluate round trip leaves v
// itself theta-independent, so only the perturbation term differentiates.
inline Mat perturbed_dvhat_analytic(const PerturbedTracker& tracker, const Vec& v,
                                    const Vec& theta_T) {
    const auto* linear = dynamic_cast<const LinearRig*>(&tracker.rig());
    if (!linear)
        throw CapabilityError("perturbed_dvhat_analytic: linear rigs only");
    check_dim(theta_T.size() == linear->theta_size(),
              "perturbed_dvhat_analytic: theta size mismatch");
    const Vec c_tilde = tracker.perturbation().c_tilde
                            ? tracker.perturbation().c_tilde(v)
                            : Vec(Vec::Zero(linear->n_controls()));
    if (tracker.perturbation().mode == ControlPerturbation::Mode::T1_additive) {
        // v_hat = v + A c_tilde.
        return Mat(linear->jac_params(c_tilde));
    }
    // v_hat = v + A^2 c_tilde.
    const Mat a = linear->matrix_view(theta_T);
    return a * Mat(linear->jac_params(c_tilde)) + Mat(linear->jac_params(a * c_tilde));
}

}  // namespace rigtune
