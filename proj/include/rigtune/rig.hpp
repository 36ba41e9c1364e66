#pragma once

#include "rigtune/common.hpp"

#include <algorithm>
#include <memory>

namespace rigtune {

// A rig maps a control vector c (length n) to a geometry vector v (length m).
// Both rig families below are linear in their parameter vector theta for any
// fixed c, which the fitting and implicit-differentiation code relies on.
class Rig {
public:
    virtual ~Rig() = default;

    virtual int n_controls() const = 0;
    virtual int m_geometry() const = 0;
    virtual int theta_size() const = 0;

    virtual const Vec& theta() const = 0;
    virtual void set_theta(const Vec& theta) = 0;

    // Evaluate with the stored parameters, or with a borrowed parameter
    // vector (no mutation; used heavily by finite-difference probing).
    Vec eval(const Vec& c) const { return eval(c, theta()); }
    virtual Vec eval(const Vec& c, const Vec& theta) const = 0;

    // d eval / d c at (c, theta), dense m x n.
    Mat jac_controls(const Vec& c) const { return jac_controls(c, theta()); }
    virtual Mat jac_controls(const Vec& c, const Vec& theta) const = 0;

    // d eval / d theta at c, sparse m x theta_size. Independent of theta for
    // these rig families.
    virtual SpMat jac_params(const Vec& c) const = 0;

    // Geometry row a parameter feeds; every parameter of these families
    // touches exactly one row, making least-squares fits row-separable.
    virtual int param_geometry_row(int theta_index) const = 0;

    virtual std::unique_ptr<Rig> clone() const = 0;

    std::unique_ptr<Rig> with_theta(const Vec& theta) const {
        auto r = clone();
        r->set_theta(theta);
        return r;
    }

    const std::vector<std::string>& control_names() const { return control_names_; }
    void set_control_names(std::vector<std::string> names) {
        if (!names.empty())
            check_dim(static_cast<int>(names.size()) == n_controls(),
                      "control_names: size mismatch");
        control_names_ = std::move(names);
    }

protected:
    void check_eval_input(const Vec& c, const Vec& theta) const {
        check_dim(c.size() == n_controls(), "rig eval: control vector has size " +
                                                std::to_string(c.size()) + ", expected " +
                                                std::to_string(n_controls()));
        check_dim(theta.size() == theta_size(), "rig eval: theta has size " +
                                                    std::to_string(theta.size()) + ", expected " +
                                                    std::to_string(theta_size()));
        check_finite(c, "rig eval: controls");
        check_finite(theta, "rig eval: theta");
    }

private:
    std::vector<std::string> control_names_;
};

// Dense linear rig v = A c + b. theta holds the rows of A concatenated
// (row-major), so theta[i*n + j] = A(i, j). b defaults to zero.
class LinearRig : public Rig {
public:
    LinearRig(int n, int m) : n_(n), m_(m), theta_(Vec::Zero(m * n)) {
        check_dim(n > 0 && m > 0, "LinearRig: dimensions must be positive");
    }

    LinearRig(int n, int m, Vec theta) : LinearRig(n, m) { set_theta(theta); }

    static LinearRig from_matrix(const Mat& a) {
        LinearRig rig(static_cast<int>(a.cols()), static_cast<int>(a.rows()));
        rig.set_matrix(a);
        return rig;
    }

    int n_controls() const override { return n_; }
    int m_geometry() const override { return m_; }
    int theta_size() const override { return n_ * m_; }

    const Vec& theta() const override { return theta_; }
    void set_theta(const Vec& theta) override {
        check_dim(theta.size() == theta_size(), "LinearRig: theta size mismatch");
        theta_ = theta;
    }


    Mat matrix() const { return matrix_view(theta_); }
    void set_matrix(const Mat& a) {
        check_dim(a.rows() == m_ && a.cols() == n_, "LinearRig: matrix shape mismatch");
        for (int i = 0; i < m_; ++i)
            for (int j = 0; j < n_; ++j) theta_[i * n_ + j] = a(i, j);
    }

    Mat matrix_view(const Vec& theta) const {
        check_dim(theta.size() == theta_size(), "LinearRig: theta size mismatch");
        return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                              Eigen::RowMajor>>(theta.data(), m_, n_);
    }

    using Rig::eval;
    Vec eval(const Vec& c, const Vec& theta) const override {
        check_eval_input(c, theta);
        return matrix_view(theta) * c;
    }

    using Rig::jac_controls;
    Mat jac_controls(const Vec& c, const Vec& theta) const override {
        check_eval_input(c, theta);
        return matrix_view(theta);
    }

    SpMat jac_params(const Vec& c) const override {
        check_dim(c.size() == n_, "LinearRig jac_params: control size mismatch");
        SpMat d(m_, theta_size());
        d.reserve(Eigen::VectorXi::Constant(theta_size(), 1));
        for (int i = 0; i < m_; ++i)
            for (int j = 0; j < n_; ++j) d.insert(i, i * n_ + j) = c[j];
        d.makeCompressed();
        return d;
    }

    int param_geometry_row(int theta_index) const override { return theta_index / n_; }

    std::unique_ptr<Rig> clone() const override { return std::make_unique<LinearRig>(*this); }

private:
    int n_, m_;
    Vec theta_;
};

// Pose-space-descriptor expansion: entry j is the product of the controls
// named by subset j. The first n subsets are the singletons {0}..{n-1}, so
// the expansion starts with a copy of c.
inline Vec psd_expand(const std::vector<std::vector<int>>& psd_spec, const Vec& c) {
    Vec out(static_cast<Eigen::Index>(psd_spec.size()));
    for (std::size_t j = 0; j < psd_spec.size(); ++j) {
        double prod = 1.0;
        for (int i : psd_spec[j]) {
            check_dim(i >= 0 && i < c.size(), "psd_expand: control index out of range");
            prod *= c[i];
        }
        out[static_cast<Eigen::Index>(j)] = prod;
    }
    return out;
}

// d psd_expand / d c, dense p x n.
inline Mat psd_jacobian(const std::vector<std::vector<int>>& psd_spec, const Vec& c) {
    Mat d = Mat::Zero(static_cast<Eigen::Index>(psd_spec.size()), c.size());
    for (std::size_t j = 0; j < psd_spec.size(); ++j) {
        const auto& subset = psd_spec[j];
        for (std::size_t a = 0; a < subset.size(); ++a) {
            double prod = 1.0;
            for (std::size_t b = 0; b < subset.size(); ++b)
                if (b != a) prod *= c[subset[b]];
            d(static_cast<Eigen::Index>(j), subset[a]) += prod;
        }
    }
    return d;
}

// Sparse joint-matrix rig: v = M * psd(c), where M is m x p and its nonzero
// entries are the parameter vector. Nonzeros are kept in compressed-column
// order, so the parameters belonging to one PSD column are contiguous.
class JointPsdRig : public Rig {
public:
    JointPsdRig(int n, int m, std::vector<std::vector<int>> psd_spec,
                const std::vector<int>& rows, const std::vector<int>& cols, Vec values,
                Mask primary = {})
        : n_(n), m_(m), psd_spec_(std::move(psd_spec)) {
        p_ = static_cast<int>(psd_spec_.size());
        check_dim(n > 0 && m > 0, "JointPsdRig: dimensions must be positive");
        check_dim(p_ >= n, "JointPsdRig: psd_spec must include the identity prefix");
        for (int j = 0; j < p_; ++j) {
            auto& subset = psd_spec_[j];
            check_dim(!subset.empty(), "JointPsdRig: empty PSD subset");
            std::sort(subset.begin(), subset.end());
            check_dim(std::adjacent_find(subset.begin(), subset.end()) == subset.end(),
                      "JointPsdRig: duplicate control in PSD subset");
            check_dim(subset.front() >= 0 && subset.back() < n,
                      "JointPsdRig: PSD subset index out of range");
            if (j < n)
                check_dim(subset.size() == 1 && subset[0] == j,
                          "JointPsdRig: first n PSD entries must be the singletons {0}..{n-1}");
        }
        {
            auto sorted_spec = psd_spec_;
            std::sort(sorted_spec.begin(), sorted_spec.end());
            check_dim(std::adjacent_find(sorted_spec.begin(), sorted_spec.end()) ==
                          sorted_spec.end(),
                      "JointPsdRig: duplicate PSD subset");
        }
        check_dim(rows.size() == cols.size() &&
                      static_cast<Eigen::Index>(rows.size()) == values.size(),
                  "JointPsdRig: rows/cols/values size mismatch");

        const int nnz = static_cast<int>(rows.size());
        std::vector<int> order(nnz);
        for (int k = 0; k < nnz; ++k) order[k] = k;
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (cols[a] != cols[b]) return cols[a] < cols[b];
            return rows[a] < rows[b];
        });

        col_ptr_.assign(p_ + 1, 0);
        row_idx_.resize(nnz);
        theta_.resize(nnz);
        for (int k = 0; k < nnz; ++k) {
            const int src = order[k];
            check_dim(rows[src] >= 0 && rows[src] < m, "JointPsdRig: row index out of range");
            check_dim(cols[src] >= 0 && cols[src] < p_, "JointPsdRig: column index out of range");
            if (k > 0 && cols[order[k - 1]] == cols[src] && rows[order[k - 1]] == rows[src])
                throw DimensionError("JointPsdRig: duplicate (row, col) entry");
            row_idx_[k] = rows[src];
            theta_[k] = values[src];
            ++col_ptr_[cols[src] + 1];
        }
        for (int j = 0; j < p_; ++j) col_ptr_[j + 1] += col_ptr_[j];

        if (primary.empty()) primary.assign(static_cast<std::size_t>(n_), 1);
        check_dim(static_cast<int>(primary.size()) == n_, "JointPsdRig: primary mask size mismatch");
        primary_ = std::move(primary);
    }

    int n_controls() const override { return n_; }
    int m_geometry() const override { return m_; }
    int p_psd() const { return p_; }
    int theta_size() const override { return static_cast<int>(row_idx_.size()); }

    const Vec& theta() const override { return theta_; }
    void set_theta(const Vec& theta) override {
        check_dim(theta.size() == theta_size(), "JointPsdRig: theta size mismatch");
        theta_ = theta;
    }

    const std::vector<std::vector<int>>& psd_spec() const { return psd_spec_; }
    const std::vector<int>& col_ptr() const { return col_ptr_; }
    const std::vector<int>& row_idx() const { return row_idx_; }
    const Mask& primary_mask() const { return primary_; }
    void set_primary_mask(Mask primary) {
        check_dim(static_cast<int>(primary.size()) == n_, "JointPsdRig: primary mask size mismatch");
        primary_ = std::move(primary);
    }

    int param_column(int theta_index) const {
        const auto it = std::upper_bound(col_ptr_.begin(), col_ptr_.end(), theta_index);
        return static_cast<int>(it - col_ptr_.begin()) - 1;
    }

    using Rig::eval;
    Vec eval(const Vec& c, const Vec& theta) const override {
        check_eval_input(c, theta);
        const Vec pv = psd_expand(psd_spec_, c);
        Vec v = Vec::Zero(m_);
        for (int j = 0; j < p_; ++j) {
            const double pj = pv[j];
            if (pj == 0.0) continue;
            for (int k = col_ptr_[j]; k < col_ptr_[j + 1]; ++k) v[row_idx_[k]] += theta[k] * pj;
        }
        return v;
    }

    using Rig::jac_controls;
    Mat jac_controls(const Vec& c, const Vec& theta) const override {
        check_eval_input(c, theta);
        Mat j_out = Mat::Zero(m_, n_);
        for (int j = 0; j < p_; ++j) {
            const auto& subset = psd_spec_[j];
            for (std::size_t a = 0; a < subset.size(); ++a) {
                double prod = 1.0;
                for (std::size_t b = 0; b < subset.size(); ++b)
                    if (b != a) prod *= c[subset[b]];
                if (prod == 0.0) continue;
                for (int k = col_ptr_[j]; k < col_ptr_[j + 1]; ++k)
                    j_out(row_idx_[k], subset[a]) += theta[k] * prod;
            }
        }
        return j_out;
    }

    SpMat jac_params(const Vec& c) const override {
        check_dim(c.size() == n_, "JointPsdRig jac_params: control size mismatch");
        const Vec pv = psd_expand(psd_spec_, c);
        SpMat d(m_, theta_size());
        d.reserve(Eigen::VectorXi::Constant(theta_size(), 1));
        for (int j = 0; j < p_; ++j)
            for (int k = col_ptr_[j]; k < col_ptr_[j + 1]; ++k) d.insert(row_idx_[k], k) = pv[j];
        d.makeCompressed();
        return d;
    }

    int param_geometry_row(int theta_index) const override { return row_idx_[theta_index]; }

    std::unique_ptr<Rig> clone() const override { return std::make_unique<JointPsdRig>(*this); }

private:
    int n_, p_, m_;
    std::vector<std::vector<int>> psd_spec_;
    std::vector<int> col_ptr_;
    std::vector<int> row_idx_;
    Vec theta_;
    Mask primary_;
};

inline Vec eval_rig(const Rig& rig, const Vec& c) { return rig.eval(c); }
inline Mat rig_jacobian_controls(const Rig& rig, const Vec& c) { return rig.jac_controls(c); }
inline SpMat rig_jacobian_params(const Rig& rig, const Vec& c) { return rig.jac_params(c); }

}  // namespace rigtune
