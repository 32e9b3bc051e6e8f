"""Deterministic stratified holdout splits and k-fold plans.

Shuffling uses SplitMix64 driving a Fisher-Yates shuffle so that the same
seed yields the same partition on every platform.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import List

import numpy as np

from errors import ClassTooSmallError, InvalidRatiosError

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
SUBSETS = ('train', 'validation', 'test')


class SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & _MASK64

    def next_u64(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle"""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]
        return items


@dataclass
class Partition:
    train: List[int]
    validation: List[int]
    test: List[int]
    seed: int

    @property
    def sizes(self):
        return len(self.train), len(self.validation), len(self.test)

    def to_dict(self):
        return {'seed': self.seed, 'train': self.train, 'validation': self.validation, 'test': self.test}

    @classmethod
    def from_dict(cls, data):
        return cls(train=list(data['train']), validation=list(data['validation']),
                   test=list(data['test']), seed=int(data['seed']))


@dataclass
class FoldPlan:
    k: int
    assignments: List[int]
    seed: int = 0

    def fold_indices(self, fold):
        """(train positions, held-out positions) for one fold"""
        a = np.asarray(self.assignments)
        return np.flatnonzero(a != fold), np.flatnonzero(a == fold)

    def to_dict(self):
        return {'k': self.k, 'seed': self.seed, 'assignments': self.assignments}

    @classmethod
    def from_dict(cls, data):
        return cls(k=int(data['k']), assignments=list(data['assignments']), seed=int(data.get('seed', 0)))


def _class_members(labels):
    labels = np.asarray(labels).astype(int)
    return {c: [int(i) for i in np.flatnonzero(labels == c)] for c in sorted(set(labels.tolist()))}


def _subset_totals(n, ratios):
    """Held-out total rounds up, test rounds up inside it, train gets the rest"""
    r_train, r_val, r_test = ratios
    held_out = math.ceil(n * (r_val + r_test) - 1e-9)
    test = math.ceil(held_out * r_test / (r_val + r_test) - 1e-9)
    return [n - held_out, held_out - test, test]


def _allocate(class_counts, ratios, totals):
    """Per-class subset sizes.

    Every class gets floor(ratio * count) rows per subset and places its
    leftover rows (at most two) in distinct subsets whose share has a
    fractional part, so no subset exceeds ceil(ratio * count) for any class.
    Among those placements the one closest to the cohort subset totals wins,
    then the one with the largest remainders, then the first in class order.
    """
    classes = sorted(class_counts)
    floors = {c: [math.floor(r * class_counts[c] + 1e-9) for r in ratios] for c in classes}
    frac = {c: [r * class_counts[c] - f for r, f in zip(ratios, floors[c])] for c in classes}

    options = []
    for c in classes:
        leftover = class_counts[c] - sum(floors[c])
        open_subsets = [s for s in range(3) if frac[c][s] > 1e-9]
        options.append(list(itertools.combinations(open_subsets, leftover)))

    best, best_key = None, None
    for choice in itertools.product(*options):
        sizes = [sum(floors[c][s] for c in classes) for s in range(3)]
        gain = 0.0
        for c, extra in zip(classes, choice):
            for s in extra:
                sizes[s] += 1
                gain += frac[c][s]
        key = (sum(abs(a - t) for a, t in zip(sizes, totals)), -round(gain, 12))
        if best_key is None or key < best_key:
            best, best_key = choice, key

    if best_key[0]:
        logger.warning(f"Subset totals {totals} not reachable within per-class bounds; off by {best_key[0]} rows")
    alloc = {c: list(floors[c]) for c in classes}
    for c, extra in zip(classes, best):
        for s in extra:
            alloc[c][s] += 1
    return alloc


def stratified_split(labels, ratios=(0.70, 0.15, 0.15), seed=42):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise InvalidRatiosError(f"Ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatiosError(f"Ratios must sum to 1, got {sum(ratios)!r}")

    members = _class_members(labels)
    for c, rows in members.items():
        if len(rows) < 3:
            logger.error(f"Class {c} has only {len(rows)} members")
            raise ClassTooSmallError(f"Class {c} has {len(rows)} members; at least 3 are needed for a three-way split")

    n = sum(len(rows) for rows in members.values())
    totals = _subset_totals(n, ratios)
    alloc = _allocate({c: len(rows) for c, rows in members.items()}, ratios, totals)

    rng = SplitMix64(seed)
    subsets = ([], [], [])
    for c, rows in members.items():
        shuffled = rng.shuffle(list(rows))
        start = 0
        for s, size in enumerate(alloc[c]):
            subsets[s].extend(shuffled[start:start + size])
            start += size

    partition = Partition(train=sorted(subsets[0]), validation=sorted(subsets[1]), test=sorted(subsets[2]), seed=int(seed))
    logger.info(f"Stratified split (seed {seed}): sizes {partition.sizes}")
    return partition


def stratified_kfold(labels, k=5, seed=42):
    """Per-class round-robin fold assignment after a seeded shuffle"""
    if k < 2:
        raise ClassTooSmallError(f"k must be at least 2, got {k}")
    members = _class_members(labels)
    for c, rows in members.items():
        if len(rows) < k:
            logger.error(f"Class {c} has {len(rows)} members, fewer than k={k}")
            raise ClassTooSmallError(f"Class {c} has {len(rows)} members; at least k={k} are needed")

    rng = SplitMix64(seed)
    assignments = [0] * sum(len(rows) for rows in members.values())
    offset = 0
    for c, rows in members.items():
        for i, row in enumerate(rng.shuffle(list(rows))):
            assignments[row] = (offset + i) % k
        offset = (offset + len(rows)) % k
    return FoldPlan(k=k, assignments=assignments, seed=int(seed))
