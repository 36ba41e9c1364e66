#include <catch2/catch_amalgamated.hpp>

#include <rigtune/optimizer.hpp>
#include <rigtune/synthetic.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

using namespace rigtune;

TEST_CASE("desk rig generation is deterministic with the pinned shape") {
    const SyntheticSpec spec = SyntheticSpec::desk();
    const JointPsdRig rig = generate_rig(spec);
    CHECK(rig.n_controls() == 12);
    CHECK(rig.p_psd() == 20);
    CHECK(rig.m_geometry() == 60);
    CHECK(rig.theta_size() == 120);

    // Every column carries exactly the requested sparsity.
    for (int j = 0; j < rig.p_psd(); ++j)
        CHECK(rig.col_ptr()[static_cast<std::size_t>(j + 1)] -
                  rig.col_ptr()[static_cast<std::size_t>(j)] ==
              6);
    // Identity PSD prefix, then grouped product columns, cross-group last.
    for (int j = 0; j < rig.n_controls(); ++j)
        CHECK(rig.psd_spec()[static_cast<std::size_t>(j)] == std::vector<int>{j});
    for (int j = rig.n_controls(); j < rig.p_psd(); ++j) {
        const auto& subset = rig.psd_spec()[static_cast<std::size_t>(j)];
        CHECK(subset.size() >= 2);
        CHECK(subset.size() <= 3);
    }
    const auto& cross = rig.psd_spec().back();
    REQUIRE(cross.size() == 2);
    CHECK(cross == std::vector<int>{2, 3});  // last of group 0, first of group 1
    CHECK(mask_count(rig.primary_mask()) == 10);
    for (int i = 0; i < 10; ++i) CHECK(rig.primary_mask()[static_cast<std::size_t>(i)]);

    const JointPsdRig again = generate_rig(spec);
    CHECK(fingerprint(rig.theta()) == fingerprint(again.theta()));
    CHECK(rig.col_ptr() == again.col_ptr());
    CHECK(rig.row_idx() == again.row_idx());

    SyntheticSpec other = spec;
    other.seed = 2;
    CHECK(fingerprint(generate_rig(other).theta()) != fingerprint(rig.theta()));
}

TEST_CASE("production-scale generation stays cheap and shaped") {
    const SyntheticSpec spec = SyntheticSpec::production();
    const JointPsdRig rig = generate_rig(spec);
    CHECK(rig.n_controls() == 174);
    CHECK(rig.p_psd() == 814);
    CHECK(rig.m_geometry() == 7830);
    CHECK(rig.theta_size() == 814 * 30);
    // All subsets of the non-singleton columns stay within one group except
    // for the final cross-group pair.
    const auto& cross = rig.psd_spec().back();
    CHECK(cross.size() == 2);
    CHECK(cross[1] == cross[0] + 1);
}

TEST_CASE("infeasible synthetic specs are rejected") {
    SyntheticSpec spec = SyntheticSpec::desk();
    spec.sparsity_per_column = 0;
    CHECK_THROWS_AS(generate_rig(spec), DimensionError);
    spec = SyntheticSpec::desk();
    spec.sparsity_per_column = 61;
    CHECK_THROWS_AS(generate_rig(spec), DimensionError);
    spec = SyntheticSpec::desk();
    spec.n_controls = 3;
    spec.p_psd = 10;  // 3 singletons + 4 possible products < 10
    CHECK_THROWS_AS(generate_rig(spec), DimensionError);
    spec = SyntheticSpec::desk();
    spec.n_controls = 2;
    spec.p_psd = 3;
    CHECK_THROWS_AS(generate_rig(spec), DimensionError);
    spec = SyntheticSpec::desk();
    spec.primary_fraction = 0.0;
    CHECK_THROWS_AS(generate_rig(spec), DimensionError);
}

TEST_CASE("multiplicative perturbation is seeded and sparsity-preserving") {
    const SyntheticSpec spec = SyntheticSpec::desk();
    const JointPsdRig rig = generate_rig(spec);

    SECTION("zero magnitude is the identity, bit for bit") {
        const JointPsdRig same = perturb_rig(rig, 0.0, 99);
        CHECK(std::memcmp(same.theta().data(), rig.theta().data(),
                          sizeof(double) *
                              static_cast<std::size_t>(rig.theta_size())) == 0);
    }

    SECTION("relative spread tracks the magnitude") {
        const JointPsdRig perturbed = perturb_rig(rig, 0.1, 7);
        double sum_sq = 0.0;
        for (int k = 0; k < rig.theta_size(); ++k) {
            const double rel =
                (perturbed.theta()[k] - rig.theta()[k]) / rig.theta()[k];
            sum_sq += rel * rel;
        }
        const double rms = std::sqrt(sum_sq / rig.theta_size());
        INFO("relative rms " << rms);
        CHECK(rms >= 0.08);
        CHECK(rms <= 0.12);
        CHECK(perturbed.col_ptr() == rig.col_ptr());
        CHECK(perturbed.row_idx() == rig.row_idx());
    }

    SECTION("same seed, same result; different seed, different result") {
        const JointPsdRig a = perturb_rig(rig, 0.15, 5);
        const JointPsdRig b = perturb_rig(rig, 0.15, 5);
        const JointPsdRig c = perturb_rig(rig, 0.15, 6);
        CHECK(fingerprint(a.theta()) == fingerprint(b.theta()));
        CHECK(fingerprint(a.theta()) != fingerprint(c.theta()));
    }
}

TEST_CASE("template sets cover the groups and keep the cross column out of train") {
    const SyntheticSpec spec = SyntheticSpec::desk();
    const auto train = synthetic_templates(spec, CorpusSplit::train);
    const auto holdout = synthetic_templates(spec, CorpusSplit::holdout);

    // Neutral first; jaw pair shares support at 1.4x amplitude.
    CHECK(train.front().name == "neutral");
    CHECK(train.front().c.norm() == 0.0);
    const ExpressionPair* jaw = nullptr;
    const ExpressionPair* extreme = nullptr;
    for (const auto& pair : train) {
        if (pair.name == "jaw open") jaw = &pair;
        if (pair.name == "jaw open extreme") extreme = &pair;
    }
    REQUIRE(jaw != nullptr);
    REQUIRE(extreme != nullptr);
    CHECK((extreme->c - 1.4 * jaw->c).norm() == 0.0);

    // Each non-neutral train pose stays within one group of three controls.
    for (const auto& pair : train) {
        if (pair.name == "neutral") continue;
        std::set<int> groups_hit;
        for (int i = 0; i < pair.c.size(); ++i)
            if (pair.c[i] != 0.0) groups_hit.insert(i / 3);
        CHECK(groups_hit.size() == 1);
    }

    // No holdout pose equals a train pose.
    for (const auto& h : holdout)
        for (const auto& t : train) CHECK((h.c - t.c).norm() > 0.0);

    // The cross pose exists only in holdout and fires exactly the final
    // product column.
    const ExpressionPair* cross = nullptr;
    for (const auto& pair : holdout)
        if (pair.name == "cross activation") cross = &pair;
    REQUIRE(cross != nullptr);
    const JointPsdRig rig = generate_rig(spec);
    const Vec pv = psd_expand(rig.psd_spec(), cross->c);
    for (int j = rig.n_controls(); j < rig.p_psd() - 1; ++j) CHECK(pv[j] == 0.0);
    CHECK(pv[rig.p_psd() - 1] != 0.0);

    // Spanning-train variant adds a cross pose to train.
    const auto spanning = synthetic_templates(spec, CorpusSplit::train, true);
    CHECK(spanning.size() == train.size() + 1);
    CHECK(spanning.back().name == "cross span");
}

TEST_CASE("corpora carry faithful provenance metadata") {
    const SyntheticSpec spec = SyntheticSpec::desk();
    const JointPsdRig rig = generate_rig(spec);

    const Corpus train = generate_corpus(rig, spec, CorpusSplit::train);
    const Corpus holdout = generate_corpus(rig, spec, CorpusSplit::holdout);

    // The neutral pose maps to exactly zero geometry.
    REQUIRE(train.pairs.front().name == "neutral");
    CHECK(train.pairs.front().v.norm() == 0.0);
    for (const auto& pair : train.pairs)
        CHECK((pair.v - rig.eval(pair.c, rig.theta())).norm() == 0.0);

    CHECK(train.metadata.at("split") == "train");
    CHECK(train.metadata.at("seed") == spec.seed);
    CHECK(train.metadata.at("theta_fingerprint") == fingerprint(rig.theta()));
    CHECK(train.metadata.at("pair_count") == train.pairs.size());

    // Default train coverage misses exactly the final cross-group column.
    CHECK(train.metadata.at("psd_spanning") == false);
    const auto active =
        train.metadata.at("psd_columns_active").get<std::vector<int>>();
    CHECK(static_cast<int>(active.size()) == rig.p_psd() - 1);
    CHECK(std::find(active.begin(), active.end(), rig.p_psd() - 1) == active.end());

    // The holdout split reaches the cross column; the spanning train variant
    // covers everything.
    const auto hold_active =
        holdout.metadata.at("psd_columns_active").get<std::vector<int>>();
    CHECK(std::find(hold_active.begin(), hold_active.end(), rig.p_psd() - 1) !=
          hold_active.end());
    const Corpus spanning = generate_corpus(rig, spec, CorpusSplit::train, true);
    CHECK(spanning.metadata.at("psd_spanning") == true);

    // Purity: regeneration is byte-identical, and the hash sees the data.
    const Corpus again = generate_corpus(rig, spec, CorpusSplit::train);
    CHECK(train.metadata.at("content_hash") == again.metadata.at("content_hash"));
    CHECK(train.metadata.at("content_hash") != holdout.metadata.at("content_hash"));
}

TEST_CASE("calibration on a spanning corpus recovers the generator") {
    const SyntheticSpec spec = SyntheticSpec::desk();
    const JointPsdRig truth = generate_rig(spec);
    const Corpus corpus = generate_corpus(truth, spec, CorpusSplit::train, true);

    JointPsdRig structure = truth;
    structure.set_theta(Vec::Zero(truth.theta_size()));
    const Vec fitted = fit_rig_params(structure, corpus.pairs);
    CHECK((fitted - truth.theta()).norm() <=
          1e-6 * std::max(1.0, truth.theta().norm()));

    // And the fit carries over to unseen poses.
    const Corpus holdout = generate_corpus(truth, spec, CorpusSplit::holdout);
    CHECK(geometry_error(structure, fitted, holdout.pairs) <= 1e-8);
}

TEST_CASE("a non-spanning corpus leaves visible holdout error") {
    const SyntheticSpec spec = SyntheticSpec::desk();
    const JointPsdRig truth = generate_rig(spec);
    const Corpus train = generate_corpus(truth, spec, CorpusSplit::train);
    REQUIRE(train.metadata.at("psd_spanning") == false);

    JointPsdRig structure = truth;
    structure.set_theta(Vec::Zero(truth.theta_size()));
    CalibrationConfig config;
    config.epsilon_reg = 1e-8;  // pins the unobserved cross column near zero
    const Vec fitted = fit_rig_params(structure, train.pairs, config);

    const Corpus holdout = generate_corpus(truth, spec, CorpusSplit::holdout);
    CHECK(geometry_error(structure, fitted, holdout.pairs) > 1e-6);
}

TEST_CASE("fitted parameters beat hand-perturbed parameters on holdout") {
    // Rig-fitting comparison: for each seeded trial the data-fitted rig must
    // render unseen poses better than the manually perturbed rig.
    for (std::uint64_t trial = 1; trial <= 3; ++trial) {
        SyntheticSpec spec = SyntheticSpec::desk();
        spec.seed = trial;
        const JointPsdRig truth = generate_rig(spec);
        const JointPsdRig manual =
            perturb_rig(truth, spec.perturb_magnitude, derive_seed(spec.seed, 0xa, 1));

        const Corpus train = generate_corpus(truth, spec, CorpusSplit::train, true);
        const Corpus holdout = generate_corpus(truth, spec, CorpusSplit::holdout);

        JointPsdRig structure = truth;
        structure.set_theta(Vec::Zero(truth.theta_size()));
        const Vec fitted = fit_rig_params(structure, train.pairs);

        const double err_fit = geometry_error(structure, fitted, holdout.pairs);
        const double err_manual =
            geometry_error(structure, manual.theta(), holdout.pairs);
        INFO("trial " << trial << ": fitted " << err_fit << " manual " << err_manual);
        CHECK(err_fit <= err_manual);
        CHECK(err_fit <= 1e-8);
        CHECK(err_manual > 1e-3);
    }
}

TEST_CASE("fine-tuning an imperfect tracker improves holdout round trips") {
    // Tracking-rig comparison smoke: an offset-perturbed tracker starts from
    // the manual parameters and is fine-tuned on the training split; the
    // holdout round-trip error must drop.
    SyntheticSpec spec = SyntheticSpec::desk();
    spec.seed = 3;
    const JointPsdRig truth = generate_rig(spec);
    const JointPsdRig manual = perturb_rig(truth, 0.05, 11);

    Rng noise(derive_seed(spec.seed, 0xc7, 2));
    const Vec tilde = 0.02 * noise.normal_vec(truth.n_controls());
    const PerturbedTracker tracker(truth, ControlPerturbation::t1_constant(tilde),
                                   SolveMode::lm(1e-8));

    const Corpus train = generate_corpus(truth, spec, CorpusSplit::train);
    const Corpus holdout = generate_corpus(truth, spec, CorpusSplit::holdout);

    ObjectiveConfig objective;
    objective.gamma1 = 0.0;
    objective.gamma2 = 1.0;
    objective.gamma3 = 0.0;
    objective.gamma_eps = 0.0;
    objective.theta_R = truth.theta();

    OptimizerConfig opt;
    opt.step_size = 5e-2;
    opt.max_iters = 120;
    opt.line_search = OptimizerConfig::LineSearch::halving;
    opt.trace_every = 20;

    const double before = tracking_geometry_error(tracker, truth, manual.theta(),
                                                  truth.theta(), holdout.pairs);
    const OptimizationReport report =
        fine_tune(objective, train.pairs, manual.theta(), tracker, truth, opt,
                  DiffConfig::estimated_dvhat(DirectionStrategy::random(2, 17),
                                              StepPolicy::adaptive(true)));
    const double after = tracking_geometry_error(tracker, truth, report.theta_hat,
                                                 truth.theta(), holdout.pairs);
    INFO("holdout round trip " << before << " -> " << after << " in "
                               << report.iterations << " updates");
    CHECK(after < before);
    CHECK(report.trace.back().loss.total < report.trace.front().loss.total);
}
