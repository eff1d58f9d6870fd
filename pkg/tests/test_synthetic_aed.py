import numpy as np
import pytest

from crm_toolkit.attribute_space import AttributeSpec, GroupSet, full_grid
from crm_toolkit.errors import DimensionTooSmallError, EmptySupportError, InvalidGroupError
from crm_toolkit.synthetic_aed import (
    Dataset,
    GaussianAedSpec,
    ShiftScenario,
    affine_log_density,
    attribute_energies,
    bayes_posterior,
    drop_group,
    drop_groups,
    full_support_scenario,
    group_log_density,
    make_2d_quadrant_spec,
    make_orthogonal_means,
    quadrant_bayes_group_accuracy,
    quadrant_group,
    retain_random_fraction,
    sample_dataset,
    uniform_prior,
)


class TestOrthogonalMeans:
    def test_twenty_orthonormal_means(self):
        aed = make_orthogonal_means(AttributeSpec((10, 10)), n=100, seed=0)
        assert aed.means.shape == (20, 100)
        np.testing.assert_allclose(aed.means @ aed.means.T, np.eye(20), atol=1e-10)

    def test_scale(self):
        aed = make_orthogonal_means(AttributeSpec((3, 3)), n=10, seed=1, scale=2.0)
        np.testing.assert_allclose(np.linalg.norm(aed.means, axis=1), 2.0)

    def test_single_mean(self):
        aed = make_orthogonal_means(AttributeSpec((1,)), n=1, seed=0)
        assert abs(abs(aed.means[0, 0]) - 1.0) <= 1e-12

    def test_dimension_too_small(self):
        with pytest.raises(DimensionTooSmallError):
            make_orthogonal_means(AttributeSpec((10, 10)), n=19, seed=0)

    def test_seeded(self):
        a = make_orthogonal_means(AttributeSpec((2, 3)), n=8, seed=4)
        b = make_orthogonal_means(AttributeSpec((2, 3)), n=8, seed=4)
        np.testing.assert_array_equal(a.means, b.means)
        assert a.spec_id() == b.spec_id()

    def test_json_roundtrip(self):
        a = make_orthogonal_means(AttributeSpec((2, 3)), n=8, seed=4)
        b = GaussianAedSpec.from_json(a.to_json())
        np.testing.assert_array_equal(a.means, b.means)
        assert a.spec_id() == b.spec_id()


class TestQuadrantSpec:
    def test_means_and_variance(self, quadrant_aed):
        assert quadrant_aed.variance == pytest.approx(1.0)
        np.testing.assert_allclose(quadrant_aed.group_mean(quadrant_group(1, 1)), [1.0, 1.0])
        np.testing.assert_allclose(quadrant_aed.group_mean(quadrant_group(-1, -1)), [-1.0, -1.0])
        np.testing.assert_allclose(quadrant_aed.group_mean(quadrant_group(-1, 1)), [-1.0, 1.0])

    def test_density_peaks_at_own_mean(self, quadrant_aed):
        z = quadrant_group(1, 1)
        here = group_log_density(quadrant_aed, np.array([1.0, 1.0]), z)
        there = group_log_density(quadrant_aed, np.array([-1.0, -1.0]), z)
        assert here[0] > there[0]
        assert here[0] == pytest.approx(-np.log(2.0 * np.pi))

    def test_attribute_energies(self, quadrant_aed):
        E = attribute_energies(quadrant_aed, np.array([[2.0, 0.0]]))
        # w ||x - mu||^2 for mu in (-2,0), (2,0), (0,-2), (0,2)
        np.testing.assert_allclose(E[0], [4.0, 0.0, 2.0, 2.0])

    def test_orthant_ceiling(self, quadrant_aed):
        acc = quadrant_bayes_group_accuracy(quadrant_aed)
        assert len(acc) == 4
        for v in acc.values():
            assert v == pytest.approx(0.707861, abs=1e-4)

    def test_orthant_ceiling_needs_quadrant(self):
        with pytest.raises(DimensionTooSmallError):
            quadrant_bayes_group_accuracy(make_orthogonal_means(AttributeSpec((2, 2)), n=4, seed=0))


class TestScenarios:
    def test_drop_one_quadrant(self, quadrant_scenario):
        assert len(quadrant_scenario.train_support) == 3
        assert len(quadrant_scenario.test_support) == 4
        assert list(quadrant_scenario.dropped()) == [quadrant_group(-1, -1)]
        np.testing.assert_allclose(quadrant_scenario.train_prior, np.full(3, 1.0 / 3.0))
        assert quadrant_scenario.satisfies_compositional_shift()

    def test_drop_eighty_percent(self):
        spec = AttributeSpec((10, 10))
        keep = {(0, j) for j in range(10)} | {(i, 0) for i in range(10)} | {(1, 1)}
        dropped = [z for z in full_grid(spec) if z not in keep]
        scenario = drop_groups(full_grid(spec), dropped)
        assert len(scenario.train_support) == 20
        assert len(scenario.test_support) == 100

    def test_drop_unknown_group(self):
        spec = AttributeSpec((2, 2))
        with pytest.raises(InvalidGroupError):
            drop_group(GroupSet.of(spec, [(0, 0), (0, 1)]), (1, 1))

    def test_drop_everything(self):
        spec = AttributeSpec((1, 1))
        with pytest.raises(EmptySupportError):
            drop_group(full_grid(spec), (0, 0))

    def test_compositional_shift_violation(self):
        spec = AttributeSpec((2, 2))
        train = GroupSet.of(spec, [(0, 0)])
        test = GroupSet.of(spec, [(0, 0), (1, 1)])
        scenario = ShiftScenario(train, test, uniform_prior(train), uniform_prior(test))
        assert not scenario.satisfies_compositional_shift()
        with pytest.raises(InvalidGroupError):
            scenario.check_compositional_shift()

    def test_prior_must_sum_to_one(self):
        grid = full_grid(AttributeSpec((2, 2)))
        with pytest.raises(InvalidGroupError):
            ShiftScenario(grid, grid, [0.5, 0.5, 0.5, 0.0], uniform_prior(grid))

    def test_retain_fraction(self):
        spec = AttributeSpec((10, 10))
        a = retain_random_fraction(spec, 0.2, seed=3)
        b = retain_random_fraction(spec, 0.2, seed=3)
        assert len(a.train_support) == 20
        assert list(a.train_support) == list(b.train_support)
        assert list(a.train_support) == sorted(a.train_support)

    def test_json_roundtrip(self, quadrant_scenario):
        back = ShiftScenario.from_json(quadrant_scenario.to_json())
        assert list(back.train_support) == list(quadrant_scenario.train_support)
        np.testing.assert_array_equal(back.test_prior, quadrant_scenario.test_prior)


class TestSampling:
    def test_group_frequencies(self, quadrant_aed):
        prior = np.array([0.1, 0.2, 0.3, 0.4])
        scenario = full_support_scenario(quadrant_aed.spec, test_prior=prior)
        n = 100000
        data = sample_dataset(quadrant_aed, "test", scenario, n, seed=0)
        freq = data.group_counts(scenario.test_support) / n
        sigma = np.sqrt(prior * (1.0 - prior) / n)
        assert np.all(np.abs(freq - prior) <= 4.0 * sigma)

    def test_group_means(self, quadrant_aed, quadrant_train):
        for z in quadrant_train.observed_support(quadrant_aed.spec):
            rows = np.all(quadrant_train.labels == np.asarray(z), axis=1)
            tol = 4.0 / np.sqrt(rows.sum())
            np.testing.assert_allclose(quadrant_train.features[rows].mean(axis=0), quadrant_aed.group_mean(z),
                                       atol=tol)

    def test_dropped_group_never_sampled(self, quadrant_train, quadrant_aed):
        assert quadrant_group(-1, -1) not in quadrant_train.observed_support(quadrant_aed.spec)

    def test_zero_prior_group(self, quadrant_aed):
        scenario = full_support_scenario(quadrant_aed.spec, test_prior=[0.5, 0.5, 0.0, 0.0])
        data = sample_dataset(quadrant_aed, "test", scenario, 5000, seed=1)
        assert set(data.groups()) <= {(0, 0), (0, 1)}

    def test_seeded(self, quadrant_aed, quadrant_scenario):
        a = sample_dataset(quadrant_aed, "train", quadrant_scenario, 100, seed=9)
        b = sample_dataset(quadrant_aed, "train", quadrant_scenario, 100, seed=9)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_no_samples(self, quadrant_aed, quadrant_scenario):
        with pytest.raises(EmptySupportError):
            sample_dataset(quadrant_aed, "train", quadrant_scenario, 0, seed=0)

    def test_dataset_row_mismatch(self):
        with pytest.raises(InvalidGroupError):
            Dataset(np.zeros((3, 2)), np.zeros((2, 2), dtype=int))


class TestBayesPosterior:
    def test_positive_corner(self, quadrant_aed, quadrant_grid):
        post = bayes_posterior(np.array([2.0, 2.0]), quadrant_aed, quadrant_grid, uniform_prior(quadrant_grid))
        assert quadrant_grid[int(np.argmax(post))] == quadrant_group(1, 1)
        assert post.sum() == pytest.approx(1.0)

    def test_equidistant_point(self, quadrant_aed, quadrant_grid):
        post = bayes_posterior(np.array([0.0, 0.0]), quadrant_aed, quadrant_grid, uniform_prior(quadrant_grid))
        np.testing.assert_allclose(post, np.full(4, 0.25))

    def test_three_group_support(self, quadrant_aed, quadrant_scenario):
        support = quadrant_scenario.train_support
        post = bayes_posterior(np.array([0.5, 0.5]), quadrant_aed, support, uniform_prior(support))
        assert support[int(np.argmax(post))] == quadrant_group(1, 1)

    def test_zero_prior_gets_zero_mass(self, quadrant_aed, quadrant_grid):
        post = bayes_posterior(np.array([-1.0, -1.0]), quadrant_aed, quadrant_grid, [0.0, 1 / 3, 1 / 3, 1 / 3])
        assert post[0] == 0.0
        assert post.sum() == pytest.approx(1.0)


def test_affine_density_reproduces_unseen_group(quadrant_aed):
    train = GroupSet.of(quadrant_aed.spec, [(0, 1), (1, 0), (1, 1)])
    X = np.random.default_rng(0).standard_normal((50, 2)) * 2.0
    np.testing.assert_allclose(affine_log_density(quadrant_aed, X, train, [1.0, 1.0, -1.0]),
                               group_log_density(quadrant_aed, X, (0, 0)), atol=1e-9)


def test_affine_density_on_orthogonal_spec():
    aed = make_orthogonal_means(AttributeSpec((3, 3)), n=8, seed=2, energy_weight=0.5)
    train = GroupSet.of(aed.spec, [(0, 1), (2, 0), (2, 1)])
    X = np.random.default_rng(1).standard_normal((20, 8))
    np.testing.assert_allclose(affine_log_density(aed, X, train, [1.0, 1.0, -1.0]),
                               group_log_density(aed, X, (0, 0)), atol=1e-9)


def test_conditionals_factor_over_attribute_energies():
    # log p(x|z) = -sum_i E_i(x, z_i) + b(z), with b free of x
    aed = make_orthogonal_means(AttributeSpec((3, 4)), n=10, seed=4, energy_weight=0.5)
    X = np.random.default_rng(2).standard_normal((100, 10)) * 1.5
    E = attribute_energies(aed, X)
    w, m = aed.energy_weight, aed.spec.m
    for z in full_grid(aed.spec):
        cols = [off + v for off, v in zip(aed.spec.offsets, z)]
        mu = aed.means[cols]
        b = (w * (mu * mu).sum() - m * w * (aed.group_mean(z) @ aed.group_mean(z))
             - 0.5 * aed.ambient_dim * np.log(2.0 * np.pi * aed.variance))
        np.testing.assert_allclose(group_log_density(aed, X, z) + E[:, cols].sum(axis=1), b, rtol=0, atol=1e-9)
