import numpy as np
import pytest

from crm_toolkit.affine_hull import in_affine_hull
from crm_toolkit.attribute_space import AttributeSpec, GroupSet, full_grid
from crm_toolkit.crm_adapt import (
    ABLATION_NAMES,
    ExtrapolatedBias,
    TestPredictor,
    TrainConfig,
    ablation_variants,
    argmax_groups,
    b_star_table,
    build_predictor,
    compositional_risk,
    dense_log_posterior,
    describe_predictor,
    empirical_test_prior,
    extrapolate_bias,
    fit_crm,
    fit_erm_attribute,
    log_predict,
    marginalize,
    predict,
    predictor_logits,
    stratified_split,
)
from crm_toolkit.energy_model import (
    energies,
    group_energies,
    init_energy_model,
    log_posterior_train,
    oracle_energy_model,
    train_logits,
)
from crm_toolkit.errors import (
    ConfigError,
    DimensionMismatchError,
    EmptySupportError,
    InvalidGroupError,
    TrainingDivergedError,
)
from crm_toolkit.evaluation import evaluate, oracle_agreement
from crm_toolkit.synthetic_aed import (
    Dataset,
    bayes_posterior,
    quadrant_group,
    sample_dataset,
    uniform_prior,
    with_test_prior,
)

SHORT = TrainConfig(learning_rate=1e-2, batch_size=64, steps=50, seed=0)


def _zero_model(scenario):
    support = scenario.train_support
    return init_energy_model(scenario.spec, support, np.log(uniform_prior(support)), 2, init_scale=0.0)


class TestTrainConfig:
    def test_from_settings(self):
        cfg = TrainConfig.from_settings({"LearningRate": 0.05, "Steps": 10, "Patience": 3}, seed=3, batch_size=7)
        assert cfg.learning_rate == 0.05
        assert cfg.steps == 10
        assert cfg.patience == 3
        assert cfg.seed == 3
        assert cfg.batch_size == 7

    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": 0.0},
        {"batch_size": 0},
        {"validation_fraction": 1.0},
        {"patience": 0},
        {"feature_map": "bogus"},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestStratifiedSplit:
    def test_partition(self):
        labels = np.array([[0, 0]] * 10 + [[1, 1]] * 5 + [[0, 1]])
        tr, va = stratified_split(labels, 0.2, seed=0)
        assert sorted(np.concatenate([tr, va]).tolist()) == list(range(16))
        assert len(set(tr.tolist()) & set(va.tolist())) == 0
        assert len(va) == 2 + 1
        # the singleton group stays in training
        assert 15 in tr.tolist()

    def test_seeded(self):
        labels = np.repeat(np.array([[0, 0], [1, 0]]), 20, axis=0)
        a = stratified_split(labels, 0.25, seed=5)
        b = stratified_split(labels, 0.25, seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestZeroEnergyModel:
    def test_b_star_is_zero(self, quadrant_scenario, quadrant_train, quadrant_grid):
        b = extrapolate_bias(_zero_model(quadrant_scenario), quadrant_train, quadrant_grid)
        np.testing.assert_allclose(b.values, 0.0, atol=1e-12)
        assert b.n_samples == len(quadrant_train)

    def test_predict_is_uniform(self, quadrant_scenario, quadrant_train, quadrant_grid):
        model = _zero_model(quadrant_scenario)
        predictor = build_predictor(model, extrapolate_bias(model, quadrant_train, quadrant_grid))
        np.testing.assert_allclose(predict(predictor, np.array([[0.3, -2.0], [5.0, 1.0]])), 0.25)

    def test_empty_train(self, quadrant_scenario, quadrant_grid):
        empty = Dataset(np.zeros((0, 2)), np.zeros((0, 2), dtype=int))
        with pytest.raises(EmptySupportError):
            extrapolate_bias(_zero_model(quadrant_scenario), empty, quadrant_grid)

    def test_chunking_does_not_change_b_star(self, quadrant_model, quadrant_train, quadrant_grid):
        a = extrapolate_bias(quadrant_model, quadrant_train, quadrant_grid)
        b = extrapolate_bias(quadrant_model, quadrant_train, quadrant_grid, chunk=777)
        np.testing.assert_allclose(a.values, b.values, rtol=1e-12, atol=1e-12)


class TestMarginalize:
    def test_uniform(self, quadrant_grid):
        np.testing.assert_allclose(marginalize(np.full(4, 0.25), quadrant_grid, 0), [0.5, 0.5])

    def test_concentrated(self, quadrant_grid):
        post = np.array([0.0, 0.0, 1.0, 0.0])
        np.testing.assert_allclose(marginalize(post, quadrant_grid, 0), [0.0, 1.0])
        np.testing.assert_allclose(marginalize(post, quadrant_grid, 1), [1.0, 0.0])

    def test_bad_attribute(self, quadrant_grid):
        with pytest.raises(InvalidGroupError):
            marginalize(np.full(4, 0.25), quadrant_grid, 2)


class TestFitCrm:
    def test_loss_decreases(self, quadrant_model):
        assert quadrant_model.history["final_loss"] < quadrant_model.history["initial_loss"]
        assert quadrant_model.history["stopped_step"] == 3000

    def test_train_posterior_matches_bayes(self, quadrant_model, quadrant_aed, quadrant_scenario):
        held_out = sample_dataset(quadrant_aed, "train", quadrant_scenario, 5000, seed=1)
        ours = np.exp(log_posterior_train(quadrant_model, held_out.features))
        ref = bayes_posterior(held_out.features, quadrant_aed, quadrant_scenario.train_support,
                              quadrant_scenario.train_prior)
        _, tv = oracle_agreement(ours, ref)
        assert tv <= 0.05

    def test_b_star_matches_b_hat_on_train_groups(self, quadrant_model, quadrant_b_star):
        for z, b_hat in quadrant_model.bias_table().items():
            assert abs(quadrant_b_star.value(z) - b_hat) <= 0.05

    def test_unseen_b_star_is_finite(self, quadrant_b_star):
        assert np.isfinite(quadrant_b_star.value(quadrant_group(-1, -1)))

    def test_deterministic(self, quadrant_train, quadrant_scenario):
        a = fit_crm(quadrant_train, quadrant_scenario, SHORT)
        b = fit_crm(quadrant_train, quadrant_scenario, SHORT)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_nan_inputs_diverge(self, quadrant_train, quadrant_scenario):
        bad = Dataset(np.full_like(quadrant_train.features[:200], np.nan), quadrant_train.labels[:200])
        with pytest.raises(TrainingDivergedError) as info:
            fit_crm(bad, quadrant_scenario, SHORT)
        assert info.value.step == 1

    def test_early_stopping(self, quadrant_train, quadrant_scenario):
        cfg = TrainConfig(learning_rate=5e-2, batch_size=32, steps=2000, seed=0, patience=1, eval_every=10)
        model = fit_crm(quadrant_train.subset(np.arange(2000)), quadrant_scenario, cfg)
        assert "best_val_loss" in model.history
        assert model.history["stopped_step"] < 2000

    def test_mlp_feature_map_trains(self, quadrant_train, quadrant_scenario):
        cfg = TrainConfig(learning_rate=1e-2, batch_size=128, steps=200, seed=0, feature_map="mlp",
                          hidden_width=8, init_scale=0.5)
        model = fit_crm(quadrant_train.subset(np.arange(4000)), quadrant_scenario, cfg)
        assert model.history["final_loss"] < model.history["initial_loss"]


class TestTestPredictor:
    def test_agrees_with_bayes(self, quadrant_predictor, quadrant_test, quadrant_aed, quadrant_grid):
        ours = predict(quadrant_predictor, quadrant_test.features)
        ref = bayes_posterior(quadrant_test.features, quadrant_aed, quadrant_grid, uniform_prior(quadrant_grid))
        agree, _ = oracle_agreement(ours, ref, quadrant_predictor.test_support, quadrant_grid)
        assert agree >= 0.95

    def test_predicts_unseen_quadrant(self, quadrant_predictor, quadrant_test):
        X = quadrant_test.features
        corner = (X[:, 0] < 0) & (X[:, 1] < 0)
        pred = argmax_groups(predict(quadrant_predictor, X[corner]), quadrant_predictor.test_support)
        hit = np.all(pred == np.asarray(quadrant_group(-1, -1)), axis=1)
        assert hit.mean() >= 0.90

    def test_marginal_boundary(self, quadrant_predictor):
        X = np.array([[1.0, -2.0], [1.0, 2.0], [-1.0, 2.0], [-1.0, -2.0]])
        z1 = marginalize(predict(quadrant_predictor, X), quadrant_predictor.test_support, 0)
        assert z1[0, 1] > 0.5 and z1[1, 1] > 0.5
        assert z1[2, 1] < 0.5 and z1[3, 1] < 0.5

    def test_test_and_train_logits_differ_by_a_constant(self, quadrant_model, quadrant_predictor, rng):
        X = rng.standard_normal((50, 2)) * 2.0
        test = predictor_logits(quadrant_predictor, X)
        train = train_logits(quadrant_model, X).logits
        for j, z in enumerate(quadrant_model.train_support):
            diff = test[:, quadrant_predictor.test_support.index_of(z)] - train[:, j]
            assert np.ptp(diff) <= 1e-9

    def test_unseen_logit_is_affine_combination_of_train_energies(self, quadrant_model, quadrant_predictor, rng):
        unseen = quadrant_group(-1, -1)
        train = quadrant_model.train_support
        alpha = in_affine_hull(unseen, train).coefficients
        X = rng.standard_normal((50, 2)) * 2.0
        combined = -group_energies(energies(quadrant_model, X), train) @ alpha
        k = quadrant_predictor.test_support.index_of(unseen)
        diff = predictor_logits(quadrant_predictor, X)[:, k] - combined
        np.testing.assert_allclose(diff, quadrant_predictor.test_log_prior[k] - quadrant_predictor.bias[k],
                                   rtol=0, atol=1e-9)

    def test_single_input(self, quadrant_predictor):
        out = log_predict(quadrant_predictor, np.array([0.2, 0.1]))
        assert out.shape == (4,)
        assert np.exp(out).sum() == pytest.approx(1.0)

    def test_dimension_mismatch(self, quadrant_predictor):
        with pytest.raises(DimensionMismatchError):
            predict(quadrant_predictor, np.zeros((2, 3)))

    def test_prior_must_normalize(self, quadrant_model, quadrant_grid):
        with pytest.raises(InvalidGroupError):
            TestPredictor(quadrant_model, quadrant_grid, np.zeros(4), np.zeros(4))

    def test_describe(self, quadrant_predictor):
        assert describe_predictor(quadrant_predictor) == "CRM over [(1,1), (1,2), (2,1), (2,2)]"

    def test_b_star_table(self, quadrant_model, quadrant_b_star):
        rows = b_star_table(quadrant_b_star, quadrant_model)
        assert [r[0] for r in rows] == ["0 0", "0 1", "1 0", "1 1"]
        assert rows[0][2] == ""
        assert all(r[2] != "" for r in rows[1:])


class TestBootstrap:
    def test_std_error(self, quadrant_model, quadrant_train, quadrant_grid):
        b = extrapolate_bias(quadrant_model, quadrant_train.subset(np.arange(3000)), quadrant_grid,
                             n_bootstrap=20, seed=1)
        assert b.std_error.shape == (4,)
        assert np.all(np.isfinite(b.std_error)) and np.all(b.std_error > 0)
        assert isinstance(b, ExtrapolatedBias)


class TestErm:
    def test_never_predicts_dropped_group(self, quadrant_erm, quadrant_test):
        pred = argmax_groups(dense_log_posterior(quadrant_erm, quadrant_test.features), quadrant_erm.support)
        report = evaluate(pred, quadrant_test.labels)
        assert report.group_acc[quadrant_group(-1, -1)] == 0.0
        assert report.worst_group_acc == 0.0

    def test_matches_crm_on_train_distribution(self, quadrant_erm, quadrant_model, quadrant_aed, quadrant_scenario):
        held_out = sample_dataset(quadrant_aed, "train", quadrant_scenario, 5000, seed=2)
        support = quadrant_scenario.train_support
        erm = evaluate(argmax_groups(dense_log_posterior(quadrant_erm, held_out.features), support), held_out.labels)
        crm = evaluate(argmax_groups(log_posterior_train(quadrant_model, held_out.features), support),
                       held_out.labels)
        assert abs(erm.average_acc - crm.average_acc) <= 0.02

    def test_compositional_risk(self, quadrant_erm, quadrant_predictor, quadrant_test):
        erm_lp = dense_log_posterior(quadrant_erm, quadrant_test.features)
        assert compositional_risk(erm_lp, quadrant_erm.support, quadrant_test.labels) == float("inf")
        crm_lp = log_predict(quadrant_predictor, quadrant_test.features)
        assert np.isfinite(compositional_risk(crm_lp, quadrant_predictor.test_support, quadrant_test.labels))

    def test_attribute_head(self, quadrant_train, quadrant_scenario):
        clf = fit_erm_attribute(quadrant_train, quadrant_scenario, SHORT, attribute=0)
        assert clf.n_classes == 2
        assert dense_log_posterior(clf, np.zeros((3, 2))).shape == (3, 2)
        with pytest.raises(InvalidGroupError):
            fit_erm_attribute(quadrant_train, quadrant_scenario, SHORT, attribute=2)


class TestAblation:
    def test_names_and_order(self, quadrant_model, quadrant_train, quadrant_scenario, quadrant_b_star):
        variants = ablation_variants(quadrant_model, quadrant_train, quadrant_scenario, b_star=quadrant_b_star)
        assert tuple(variants) == ABLATION_NAMES
        assert all(v.metadata["unseen_b_hat"] == "0" for v in variants.values())

    def test_crm_variant_is_the_predictor(self, quadrant_model, quadrant_train, quadrant_scenario,
                                          quadrant_b_star, quadrant_predictor, quadrant_test):
        variants = ablation_variants(quadrant_model, quadrant_train, quadrant_scenario, b_star=quadrant_b_star)
        X = quadrant_test.features[:500]
        np.testing.assert_allclose(predict(variants["CRM"], X), predict(quadrant_predictor, X))

    def test_variants_normalize(self, quadrant_model, quadrant_train, quadrant_scenario, quadrant_test):
        variants = ablation_variants(quadrant_model, quadrant_train, quadrant_scenario,
                                     test_labels=quadrant_test.labels)
        for v in variants.values():
            np.testing.assert_allclose(predict(v, quadrant_test.features[:100]).sum(axis=1), 1.0)

    def test_b_hat_on_unseen_group_is_zero(self, quadrant_model, quadrant_train, quadrant_scenario,
                                           quadrant_b_star):
        variants = ablation_variants(quadrant_model, quadrant_train, quadrant_scenario, b_star=quadrant_b_star)
        v = variants["Bias B̂+Unf Prior"]
        assert v.bias[v.test_support.index_of(quadrant_group(-1, -1))] == 0.0

    def test_true_bias_is_constant_on_quadrants(self, quadrant_aed, quadrant_scenario, quadrant_train,
                                                quadrant_b_star, rng):
        train_support = quadrant_scenario.train_support
        log_prior = np.log(uniform_prior(train_support))
        oracle = oracle_energy_model(quadrant_aed, train_support, log_prior)
        assert np.ptp(oracle.params["B"]) <= 1e-12

        X = rng.standard_normal((300, 2)) * 2.0
        before = log_posterior_train(oracle, X)
        oracle.params["B"] = oracle.params["B"] - oracle.params["B"].mean()
        np.testing.assert_allclose(log_posterior_train(oracle, X), before, atol=1e-12)

        # with B centred at zero, filling the unseen group with 0 is the exact bias
        hat = ablation_variants(oracle, quadrant_train, quadrant_scenario, b_star=quadrant_b_star)["Bias B̂+Unf Prior"]
        grid = quadrant_scenario.test_support
        ref = bayes_posterior(X, quadrant_aed, grid, uniform_prior(grid))
        assert np.max(0.5 * np.abs(predict(hat, X) - ref).sum(axis=1)) <= 1e-9

    def test_empirical_prior_helps_on_imbalanced_test(self, quadrant_model, quadrant_train, quadrant_scenario,
                                                      quadrant_b_star, quadrant_aed):
        skewed = with_test_prior(quadrant_scenario, [0.05, 0.05, 0.1, 0.8])
        test = sample_dataset(quadrant_aed, "test", skewed, 10000, seed=3)
        variants = ablation_variants(quadrant_model, quadrant_train, skewed, test_labels=test.labels,
                                     b_star=quadrant_b_star)
        acc = {}
        for name in ("CRM", "Bias B*+Emp Prior"):
            v = variants[name]
            acc[name] = evaluate(argmax_groups(predict(v, test.features), v.test_support), test.labels).average_acc
        assert acc["Bias B*+Emp Prior"] >= acc["CRM"]

    def test_empirical_test_prior(self, quadrant_grid):
        labels = np.array([[0, 0], [1, 1], [1, 1], [1, 1]])
        np.testing.assert_allclose(empirical_test_prior(labels, quadrant_grid), [0.25, 0.0, 0.0, 0.75])
        with pytest.raises(EmptySupportError):
            empirical_test_prior(np.zeros((0, 2), dtype=int), quadrant_grid)


def test_full_support_prior_swap_matches_bayes(quadrant_aed):
    """With nothing dropped, swapping the prior in the predictor reweights the oracle posterior exactly."""
    grid = full_grid(quadrant_aed.spec)
    test_prior = np.array([0.4, 0.3, 0.2, 0.1])
    model = oracle_energy_model(quadrant_aed, grid, np.log(uniform_prior(grid)))
    predictor = TestPredictor(model, grid, np.log(test_prior), model.params["B"])
    X = np.random.default_rng(0).standard_normal((200, 2)) * 2.0
    ref = bayes_posterior(X, quadrant_aed, grid, test_prior)
    _, tv = oracle_agreement(predict(predictor, X), ref)
    assert tv <= 1e-6


def test_single_group_scenario_predicts_certainty():
    spec = AttributeSpec((2, 2))
    support = GroupSet.of(spec, [(0, 1)])
    model = init_energy_model(spec, support, np.zeros(1), 2, init_scale=0.2)
    b = extrapolate_bias(model, Dataset(np.ones((5, 2)), np.array([[0, 1]] * 5)), support)
    np.testing.assert_allclose(predict(build_predictor(model, b), np.zeros((2, 2))), 1.0)
