// Deterministic synthetic benchmark: seeded sparse joint rigs with grouped
// product-column structure, multiplicative rig perturbations, expression
// template sets, and train/holdout corpora with provenance metadata.
#pragma once

#include <rigtune/io.hpp>
#include <rigtune/rig.hpp>
#include <rigtune/fitting.hpp>
#include <rigtune/tracker.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace rigtune {

struct SyntheticSpec {
    int n_controls = 12;
    int p_psd = 20;
    int m_geometry = 60;
    int sparsity_per_column = 6;
    double primary_fraction = 5.0 / 6.0;
    double perturb_magnitude = 0.15;
    std::uint64_t seed = 1;

    // Small benchmark that keeps every suite fast.
    static SyntheticSpec desk() { return {}; }
    // Production-scale dimensions; generation stays cheap, solving does not.
    static SyntheticSpec production() {
        SyntheticSpec s;
        s.n_controls = 174;
        s.p_psd = 814;
        s.m_geometry = 7830;
        s.sparsity_per_column = 30;
        return s;
    }
};

namespace detail {

// Controls are covered by consecutive groups; the non-singleton PSD columns
// are 2- and 3-subsets within a group, plus exactly one cross-group pair
// that only holdout poses activate. The group size is the smallest one whose
// within-group subsets can host all required extra columns.
struct PsdPlan {
    int group_size = 0;
    std::vector<std::vector<int>> groups;
    std::vector<std::vector<int>> extra_subsets;  // cross-group pair last
};

inline PsdPlan psd_plan(const SyntheticSpec& spec) {
    const int n = spec.n_controls;
    const int extra = spec.p_psd - spec.n_controls;
    check_dim(n >= 1 && spec.p_psd >= n, "synthetic: p_psd must be >= n_controls");

    PsdPlan plan;
    if (extra == 0) {
        plan.group_size = n;
        std::vector<int> all(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
        plan.groups.push_back(all);
        return plan;
    }
    check_dim(n >= 3, "synthetic: product columns need at least three controls");

    const int within_needed = extra - 1;  // one column is the cross-group pair
    auto chunks = [&](int g) {
        std::vector<std::vector<int>> groups;
        for (int start = 0; start < n; start += g) {
            std::vector<int> group;
            for (int i = start; i < std::min(n, start + g); ++i) group.push_back(i);
            groups.push_back(group);
        }
        return groups;
    };
    auto capacity = [&](int g) {
        long total = 0;
        for (const auto& group : chunks(g)) {
            const long s = static_cast<long>(group.size());
            total += s * (s - 1) / 2 + s * (s - 1) * (s - 2) / 6;
        }
        return total;
    };
    int g = 2;
    while (capacity(g) < within_needed) {
        ++g;
        if (g > n)
            throw DimensionError(
                "synthetic: cannot host " + std::to_string(extra) +
                " product columns over " + std::to_string(n) + " controls");
    }
    plan.group_size = g;
    plan.groups = chunks(g);
    if (plan.groups.size() < 2)
        throw DimensionError(
            "synthetic: the cross-group column needs at least two groups");

    // Within-group subsets: every group's pairs first, then every group's
    // triples, so short prefixes spread across groups.
    std::vector<std::vector<int>> pairs_first;
    for (const auto& group : plan.groups) {
        const int s = static_cast<int>(group.size());
        for (int a = 0; a < s; ++a)
            for (int b = a + 1; b < s; ++b)
                pairs_first.push_back({group[a], group[b]});
    }
    for (const auto& group : plan.groups) {
        const int s = static_cast<int>(group.size());
        for (int a = 0; a < s; ++a)
            for (int b = a + 1; b < s; ++b)
                for (int c = b + 1; c < s; ++c)
                    pairs_first.push_back({group[a], group[b], group[c]});
    }
    check_dim(static_cast<long>(pairs_first.size()) >= within_needed,
              "synthetic: internal capacity mismatch");
    plan.extra_subsets.assign(pairs_first.begin(),
                              pairs_first.begin() + within_needed);
    plan.extra_subsets.push_back({g - 1, g});  // cross-group pair, last column
    return plan;
}

}  // namespace detail

// Deterministic seeded rig: identity PSD prefix, grouped product columns,
// exactly `sparsity_per_column` nonzeros per column, and a primary-control
// prefix mask covering `primary_fraction` of the controls.
inline JointPsdRig generate_rig(const SyntheticSpec& spec) {
    check_dim(spec.n_controls >= 1 && spec.m_geometry >= 1,
              "synthetic: dimensions must be positive");
    check_dim(spec.sparsity_per_column >= 1, "synthetic: sparsity must be >= 1");
    check_dim(spec.sparsity_per_column <= spec.m_geometry,
              "synthetic: sparsity exceeds the geometry dimension");
    check_dim(spec.primary_fraction > 0.0 && spec.primary_fraction <= 1.0,
              "synthetic: primary_fraction must be in (0, 1]");

    const detail::PsdPlan plan = detail::psd_plan(spec);
    std::vector<std::vector<int>> psd_spec;
    for (int i = 0; i < spec.n_controls; ++i) psd_spec.push_back({i});
    for (const auto& subset : plan.extra_subsets) psd_spec.push_back(subset);

    std::vector<int> rows, cols;
    Vec values(static_cast<Eigen::Index>(psd_spec.size()) * spec.sparsity_per_column);
    Eigen::Index next = 0;
    std::vector<int> pool(static_cast<std::size_t>(spec.m_geometry));
    for (std::size_t j = 0; j < psd_spec.size(); ++j) {
        Rng rng(derive_seed(spec.seed, 0x516, static_cast<std::uint64_t>(j)));
        for (int i = 0; i < spec.m_geometry; ++i) pool[static_cast<std::size_t>(i)] = i;
        for (int k = 0; k < spec.sparsity_per_column; ++k) {
            const int swap = k + rng.uniform_int(spec.m_geometry - k);
            std::swap(pool[static_cast<std::size_t>(k)],
                      pool[static_cast<std::size_t>(swap)]);
            rows.push_back(pool[static_cast<std::size_t>(k)]);
            cols.push_back(static_cast<int>(j));
        }
        for (int k = 0; k < spec.sparsity_per_column; ++k) values[next++] = rng.normal();
    }

    const int n_primary = std::clamp(
        static_cast<int>(std::llround(spec.primary_fraction * spec.n_controls)), 1,
        spec.n_controls);
    Mask primary(static_cast<std::size_t>(spec.n_controls), 0);
    for (int i = 0; i < n_primary; ++i) primary[static_cast<std::size_t>(i)] = 1;

    return JointPsdRig(spec.n_controls, spec.m_geometry, psd_spec, rows, cols, values,
                       primary);
}

// Multiplicative perturbation of every stored parameter: theta_i is scaled by
// (1 + magnitude * xi_i) with seeded unit-variance noise. The sparsity
// pattern is structural and therefore untouched; magnitude zero returns the
// rig bit-for-bit.
inline JointPsdRig perturb_rig(const JointPsdRig& rig, double magnitude,
                               std::uint64_t seed) {
    check_dim(magnitude >= 0.0, "perturb_rig: magnitude must be nonnegative");
    Rng rng(derive_seed(seed, 0x9e7, 1));
    Vec theta = rig.theta();
    for (Eigen::Index k = 0; k < theta.size(); ++k)
        theta[k] *= (1.0 + magnitude * rng.normal());
    JointPsdRig out = rig;
    out.set_theta(theta);
    return out;
}

enum class CorpusSplit { train, holdout };

inline std::string corpus_split_name(CorpusSplit split) {
    return split == CorpusSplit::train ? "train" : "holdout";
}

// Expression templates (controls only; geometry is filled by the corpus
// generator). Training poses: the neutral pose; per control group, one named
// pose plus two seeded range-of-motion variations (varied amplitudes keep
// the product columns identifiable for calibration); and an "extreme"
// variant of the first group's pose at 1.4x amplitude that shares its
// control support. Holdout poses are convex combinations of two or three
// group poses plus one pose that activates the cross-group product column,
// which no training pose touches (unless `spanning_train` asks for a
// training pose on it too).
inline std::vector<ExpressionPair> synthetic_templates(const SyntheticSpec& spec,
                                                       CorpusSplit split,
                                                       bool spanning_train = false) {
    const detail::PsdPlan plan = detail::psd_plan(spec);
    const int n = spec.n_controls;
    const bool has_cross = !plan.extra_subsets.empty();

    // Group poses are shared by both splits.
    std::vector<Vec> group_poses;
    for (std::size_t g = 0; g < plan.groups.size(); ++g) {
        Rng rng(derive_seed(spec.seed, 0x7a1, static_cast<std::uint64_t>(g)));
        Vec c = Vec::Zero(n);
        for (int ctrl : plan.groups[g]) c[ctrl] = rng.uniform(0.4, 1.0);
        group_poses.push_back(c);
    }
    auto make_pair = [&](const std::string& name, const Vec& c) {
        ExpressionPair pair;
        pair.name = name;
        pair.c = c;
        pair.kind = PairKind::captured;
        return pair;
    };

    std::vector<ExpressionPair> out;
    if (split == CorpusSplit::train) {
        out.push_back(make_pair("neutral", Vec::Zero(n)));
        for (std::size_t g = 0; g < plan.groups.size(); ++g) {
            out.push_back(make_pair(
                g == 0 ? "jaw open" : "group" + std::to_string(g), group_poses[g]));
            for (int r = 1; r <= 2; ++r) {
                Rng rng(derive_seed(spec.seed, 0x70e,
                                    static_cast<std::uint64_t>(g) * 16 +
                                        static_cast<std::uint64_t>(r)));
                Vec c = Vec::Zero(n);
                for (int ctrl : plan.groups[g]) c[ctrl] = rng.uniform(0.1, 1.0);
                out.push_back(make_pair(
                    "g" + std::to_string(g) + " rom" + std::to_string(r), c));
            }
        }
        out.push_back(make_pair("jaw open extreme", Vec(1.4 * group_poses[0])));
        if (spanning_train && has_cross) {
            const auto& cross = plan.extra_subsets.back();
            Vec c = Vec::Zero(n);
            c[cross[0]] = 0.6;
            c[cross[1]] = 0.9;
            out.push_back(make_pair("cross span", c));
        }
        return out;
    }

    const int n_groups = static_cast<int>(plan.groups.size());
    for (int i = 0; i <= n_groups; ++i) {
        Rng rng(derive_seed(spec.seed, 0xb1ed, static_cast<std::uint64_t>(i)));
        int k = std::min(n_groups, 2 + rng.uniform_int(2));
        std::vector<int> idx(static_cast<std::size_t>(n_groups));
        for (int g = 0; g < n_groups; ++g) idx[static_cast<std::size_t>(g)] = g;
        rng.shuffle(idx);
        Vec weights(k);
        for (int t = 0; t < k; ++t) weights[t] = rng.uniform(0.2, 1.0);
        weights /= weights.sum();
        Vec c = Vec::Zero(n);
        for (int t = 0; t < k; ++t) c += weights[t] * group_poses[static_cast<std::size_t>(idx[static_cast<std::size_t>(t)])];
        out.push_back(make_pair("blend" + std::to_string(i), c));
    }
    if (has_cross) {
        const auto& cross = plan.extra_subsets.back();
        Vec c = Vec::Zero(n);
        c[cross[0]] = 0.7;
        c[cross[1]] = 0.8;
        out.push_back(make_pair("cross activation", c));
    }
    return out;
}

struct Corpus {
    std::vector<ExpressionPair> pairs;
    Json metadata;
};

// Evaluates templates through the source rig and attaches provenance
// metadata: the generating spec and seed, the source parameter fingerprint,
// a content hash, and which PSD columns the poses actually reach.
inline Corpus generate_corpus(const Rig& source,
                              const std::vector<ExpressionPair>& templates,
                              CorpusSplit split, const SyntheticSpec& spec) {
    Corpus corpus;
    std::uint64_t content = 0xcbf29ce484222325ull;
    std::vector<char> column_active;
    const auto* joint = dynamic_cast<const JointPsdRig*>(&source);
    column_active.assign(
        static_cast<std::size_t>(joint ? joint->p_psd() : source.n_controls()), 0);

    for (const ExpressionPair& t : templates) {
        ExpressionPair pair = t;
        pair.v = source.eval(pair.c, source.theta());
        content = derive_seed(content, fingerprint(pair.c), fingerprint(pair.v));
        if (joint) {
            const Vec pv = psd_expand(joint->psd_spec(), pair.c);
            for (Eigen::Index j = 0; j < pv.size(); ++j)
                if (pv[j] != 0.0) column_active[static_cast<std::size_t>(j)] = 1;
        } else {
            for (Eigen::Index j = 0; j < pair.c.size(); ++j)
                if (pair.c[j] != 0.0) column_active[static_cast<std::size_t>(j)] = 1;
        }
        corpus.pairs.push_back(std::move(pair));
    }

    bool spanning = true;
    std::vector<int> active_columns;
    for (std::size_t j = 0; j < column_active.size(); ++j) {
        if (column_active[j])
            active_columns.push_back(static_cast<int>(j));
        else
            spanning = false;
    }

    corpus.metadata = Json{
        {"format", "rigtune-corpus"},
        {"version", 1},
        {"split", corpus_split_name(split)},
        {"seed", spec.seed},
        {"spec",
         Json{{"n_controls", spec.n_controls},
              {"p_psd", spec.p_psd},
              {"m_geometry", spec.m_geometry},
              {"sparsity_per_column", spec.sparsity_per_column},
              {"primary_fraction", spec.primary_fraction},
              {"perturb_magnitude", spec.perturb_magnitude},
              {"seed", spec.seed}}},
        {"theta_fingerprint", fingerprint(source.theta())},
        {"content_hash", content},
        {"psd_columns_active", active_columns},
        {"psd_spanning", spanning},
        {"pair_count", corpus.pairs.size()},
    };
    return corpus;
}

inline Corpus generate_corpus(const Rig& source, const SyntheticSpec& spec,
                              CorpusSplit split, bool spanning_train = false) {
    return generate_corpus(source, synthetic_templates(spec, split, spanning_train),
                           split, spec);
}

// Weighted rendered-geometry error of candidate parameters against captured
// geometry.
inline double geometry_error(const Rig& rig, const Vec& theta,
                             const std::vector<ExpressionPair>& pairs) {
    double err = 0.0;
    for (const ExpressionPair& pair : pairs)
        err += pair.weight * (rig.eval(pair.c, theta) - pair.v).squaredNorm();
    return err;
}

// Round-trip error of a tracking-rig candidate: geometry is tracked with
// theta_T, re-rendered with the rendering parameters, and compared to the
// capture.
inline double tracking_geometry_error(const Tracker& tracker, const Rig& render,
                                      const Vec& theta_T, const Vec& theta_R,
                                      const std::vector<ExpressionPair>& pairs) {
    double err = 0.0;
    for (const ExpressionPair& pair : pairs)
        err += pair.weight *
               (render.eval(tracker.track(pair.v, theta_T), theta_R) - pair.v)
                   .squaredNorm();
    return err;
}

}  // namespace rigtune
