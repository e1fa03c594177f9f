import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stainbalance.exceptions import EmptyDataset, IndexOutOfRange
from stainbalance.sampling import (
    class_balanced_plan,
    class_prior,
    instance_balanced_plan,
    stratified_split,
)


def labels_from_counts(counts):
    return np.repeat(np.arange(len(counts)), counts)


class TestClassPrior:
    def test_symmetric(self):
        assert class_prior([10, 10, 10], 0) == pytest.approx(1 / 3, abs=1e-15)

    def test_examples(self):
        assert class_prior([10, 30, 60], 2) == pytest.approx(0.6, abs=1e-15)
        assert class_prior([1, 9999], 0) == pytest.approx(1e-4, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            class_prior([1, 2], 2)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            class_prior([5], 0)

    @given(st.lists(st.integers(1, 10**6), min_size=2, max_size=20))
    def test_sums_to_one(self, counts):
        total = sum(class_prior(counts, j) for j in range(len(counts)))
        assert abs(total - 1) <= 1e-12


class TestInstanceBalanced:
    def test_permutation(self):
        plan = instance_balanced_plan([0, 1, 1, 0, 1], seed=3)
        assert sorted(plan.indices.tolist()) == [0, 1, 2, 3, 4]
        assert plan.regime == "instance_balanced"

    def test_deterministic(self):
        a = instance_balanced_plan(np.zeros(50, int), 9)
        b = instance_balanced_plan(np.zeros(50, int), 9)
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            instance_balanced_plan([], 0)

    def test_first_position_uniform(self):
        labels = np.zeros(6, int)
        first = np.array([instance_balanced_plan(labels, s).indices[0] for s in range(10_000)])
        freq = np.bincount(first, minlength=6) / first.size
        assert np.all(np.abs(freq - 1 / 6) <= 0.02)

    @settings(max_examples=50)
    @given(st.integers(1, 300), st.integers(0, 2**32))
    def test_is_permutation(self, n, seed):
        plan = instance_balanced_plan(np.zeros(n, int), seed)
        np.testing.assert_array_equal(np.sort(plan.indices), np.arange(n))

    def test_plan_immutable(self):
        plan = instance_balanced_plan([0, 1], 0)
        with pytest.raises(ValueError):
            plan.indices[0] = 1


class TestClassBalanced:
    def test_two_class_extreme(self):
        labels = labels_from_counts([100, 1])
        plan = class_balanced_plan(labels, 100_000, seed=1)
        freq = np.mean(labels[plan.indices] == 1)
        assert abs(freq - 0.5) <= 0.01

    def test_balanced_case_uniform_over_indices(self):
        labels = labels_from_counts([50, 50])
        plan = class_balanced_plan(labels, 200_000, seed=2)
        freq = np.bincount(plan.indices, minlength=100) / 200_000
        # binomial sd at p=0.01 is ~2.2e-4; 5 sd
        assert np.all(np.abs(freq - 0.01) <= 1.2e-3)

    def test_default_draws_and_range(self):
        labels = labels_from_counts([7, 3])
        plan = class_balanced_plan(labels, seed=0)
        assert len(plan) == 10
        assert plan.indices.min() >= 0 and plan.indices.max() < 10

    def test_deterministic(self):
        labels = labels_from_counts([30, 5, 2])
        a = class_balanced_plan(labels, 500, seed=11)
        b = class_balanced_plan(labels, 500, seed=11)
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            class_balanced_plan([], 10, 0)

    @settings(max_examples=10, deadline=None)
    @given(st.lists(st.integers(1, 3000), min_size=2, max_size=10), st.integers(0, 1000))
    def test_converges_to_uniform(self, counts, seed):
        labels = labels_from_counts(counts)
        plan = class_balanced_plan(labels, 100_000, seed)
        freq = np.bincount(labels[plan.indices], minlength=len(counts)) / 100_000
        assert np.max(np.abs(freq - 1 / len(counts))) < 0.01


class TestStratifiedSplit:
    def test_every_class_in_val(self):
        labels = labels_from_counts([200, 30, 2])
        tr, va = stratified_split(labels, 0.1, seed=0)
        assert set(labels[va]) == {0, 1, 2}
        assert np.bincount(labels[va]).tolist() == [20, 3, 1]
        assert np.intersect1d(tr, va).size == 0
        assert tr.size + va.size == labels.size

    def test_deterministic(self):
        labels = labels_from_counts([40, 9])
        a = stratified_split(labels, 0.1, 5)
        b = stratified_split(labels, 0.1, 5)
        np.testing.assert_array_equal(a[1], b[1])
