import numpy as np
import pytest

from cohort_split import FoldPlan, Partition, SplitMix64, stratified_kfold, stratified_split
from errors import ClassTooSmallError, InvalidRatiosError


def _labels(n_pos, n_neg, seed=0):
    labels = np.array([1] * n_pos + [0] * n_neg)
    np.random.default_rng(seed).shuffle(labels)
    return labels


def test_registry_sized_split():
    partition = stratified_split(_labels(201, 994), (0.70, 0.15, 0.15), seed=42)
    assert partition.sizes == (836, 179, 180)


def test_exact_division_single_class():
    assert stratified_split([0] * 10, (0.8, 0.1, 0.1), seed=1).sizes == (8, 1, 1)


def test_remainder_allocation_per_class():
    labels = _labels(6, 14)
    partition = stratified_split(labels, (0.5, 0.25, 0.25), seed=3)
    assert partition.sizes == (10, 5, 5)
    positives = [int(labels[partition.train].sum()), int(labels[partition.validation].sum()), int(labels[partition.test].sum())]
    assert positives == [3, 1, 2]


def _assert_partition_bounds(labels, partition, ratios):
    labels = np.asarray(labels)
    subsets = (partition.train, partition.validation, partition.test)
    for cls in (0, 1):
        count = int((labels == cls).sum())
        for subset, ratio in zip(subsets, ratios):
            in_subset = int((labels[subset] == cls).sum())
            assert abs(in_subset - ratio * count) < 1 + 1e-9, (cls, count, ratio, in_subset)
    smallest = min(len(s) for s in subsets)
    if smallest == 0:
        return
    prevalence = labels.mean()
    for subset in subsets:
        assert abs(labels[subset].mean() - prevalence) <= 1.0 / smallest + 1e-12


def test_small_four_by_four_split_stays_within_class_bounds():
    labels = _labels(4, 4)
    partition = stratified_split(labels, seed=1)
    assert int(labels[partition.test].sum()) <= 1
    assert sum(partition.sizes) == 8


@pytest.mark.parametrize("seed", [1, 42])
def test_default_ratios_respect_class_bounds(seed):
    for n_pos in range(3, 80):
        for n_neg in range(3, 80, 4):
            labels = _labels(n_pos, n_neg, seed=n_pos)
            _assert_partition_bounds(labels, stratified_split(labels, seed=seed), (0.70, 0.15, 0.15))


@pytest.mark.parametrize("seed", [0, 7, 2024])
def test_random_ratios_respect_class_bounds(seed):
    rng = np.random.default_rng(seed)
    for _ in range(300):
        a, b, c = rng.uniform(0.05, 1.0, size=3)
        r_train, r_val = a / (a + b + c), b / (a + b + c)
        ratios = (r_train, r_val, 1.0 - r_train - r_val)
        labels = _labels(int(rng.integers(3, 60)), int(rng.integers(3, 120)), seed=int(rng.integers(1000)))
        partition = stratified_split(labels, ratios, seed=int(rng.integers(1000)))
        assert sum(partition.sizes) == len(labels)
        _assert_partition_bounds(labels, partition, ratios)


def test_subsets_are_disjoint_and_exhaustive():
    rng = np.random.default_rng(9)
    for trial in range(20):
        n_pos = int(rng.integers(7, 60))
        n_neg = int(rng.integers(7, 200))
        labels = _labels(n_pos, n_neg, seed=trial)
        partition = stratified_split(labels, seed=trial)
        rows = partition.train + partition.validation + partition.test
        assert sorted(rows) == list(range(n_pos + n_neg))
        for subset in (partition.train, partition.validation, partition.test):
            assert subset == sorted(subset)
            # every class appears in every subset
            assert set(labels[subset].tolist()) == {0, 1}


def test_split_is_deterministic_and_seed_sensitive():
    labels = _labels(40, 160)
    first = stratified_split(labels, seed=42)
    assert stratified_split(labels, seed=42) == first
    assert stratified_split(labels, seed=43).test != first.test


def test_split_errors():
    labels = _labels(10, 10)
    with pytest.raises(InvalidRatiosError):
        stratified_split(labels, (0.7, 0.2, 0.2))
    with pytest.raises(InvalidRatiosError):
        stratified_split(labels, (1.0, 0.0, 0.0))
    with pytest.raises(InvalidRatiosError):
        stratified_split(labels, (0.5, 0.5))
    with pytest.raises(ClassTooSmallError):
        stratified_split(_labels(2, 30))


def test_partition_dict_round_trip():
    partition = stratified_split(_labels(10, 30), seed=5)
    assert Partition.from_dict(partition.to_dict()) == partition


def test_kfold_balanced_small():
    labels = np.array([1, 0] * 5)
    plan = stratified_kfold(labels, k=5, seed=42)
    assert plan.k == 5
    for fold in range(5):
        _, held_out = plan.fold_indices(fold)
        assert sorted(labels[held_out].tolist()) == [0, 1]


def test_kfold_sizes_on_training_subset():
    plan = stratified_kfold(_labels(141, 695), k=5, seed=42)
    sizes = [len(plan.fold_indices(f)[1]) for f in range(5)]
    assert sum(sizes) == 836
    assert set(sizes) <= {167, 168}


def test_kfold_per_class_counts_differ_by_at_most_one():
    labels = _labels(23, 77, seed=2)
    plan = stratified_kfold(labels, k=4, seed=8)
    for cls in (0, 1):
        counts = [int((labels[plan.fold_indices(f)[1]] == cls).sum()) for f in range(4)]
        assert max(counts) - min(counts) <= 1


def test_kfold_train_and_held_out_partition_rows():
    plan = stratified_kfold(_labels(12, 30), k=3, seed=1)
    for fold in range(3):
        train, held_out = plan.fold_indices(fold)
        assert set(train).isdisjoint(held_out)
        assert len(train) + len(held_out) == 42


def test_kfold_deterministic_and_round_trips():
    labels = _labels(20, 50)
    plan = stratified_kfold(labels, k=5, seed=42)
    assert stratified_kfold(labels, k=5, seed=42) == plan
    assert FoldPlan.from_dict(plan.to_dict()) == plan


def test_kfold_errors():
    with pytest.raises(ClassTooSmallError):
        stratified_kfold(_labels(3, 20), k=5)
    with pytest.raises(ClassTooSmallError):
        stratified_kfold(_labels(10, 10), k=1)


def test_splitmix64_reference_stream():
    # first outputs for seed 0
    rng = SplitMix64(0)
    assert rng.next_u64() == 0xE220A8397B1DCDAF
    assert rng.next_u64() == 0x6E789E6AA1B965F4


def test_shuffle_is_a_permutation():
    items = list(range(50))
    shuffled = SplitMix64(7).shuffle(list(items))
    assert sorted(shuffled) == items
    assert shuffled != items
