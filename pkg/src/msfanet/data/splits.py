"""Cross-validation splits."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError


def kfold_splits(sample_ids, k: int = 5, seed: int = 0):
    """Shuffle ids under ``seed`` and cut k folds of (train_ids, test_ids).

    Test sets are pairwise disjoint and their union is the full id list.
    """
    ids = list(sample_ids)
    if k < 2:
        raise ContractError(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise ContractError(f"need at least k={k} samples, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = []
    base, extra = divmod(len(ids), k)
    start = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        test = shuffled[start:start + size]
        train = shuffled[:start] + shuffled[start + size:]
        folds.append((train, test))
        start += size
    return folds
