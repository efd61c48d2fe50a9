from __future__ import annotations

from collections import defaultdict

import numpy as np

from ..errors import ValidationError
from .types import TrialPair


def split_by_class_count(trials: list[TrialPair], num_classes: int, holdout_fraction: float = 0.2,
                         seed: int = 0) -> tuple[list[TrialPair], list[TrialPair]]:
    """Keep the first ``num_classes`` concept ids, then split each concept's trials.

    Both halves preserve input order. A concept with >= 2 trials always contributes at
    least one test trial.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ValidationError("holdout_fraction must lie in (0, 1)")
    concepts = sorted({t.concept_id for t in trials})
    if num_classes < 1 or num_classes > len(concepts):
        raise ValidationError(f"asked for {num_classes} classes but only {len(concepts)} are available")
    keep = set(concepts[:num_classes])
    by_concept: dict[int, list[int]] = defaultdict(list)
    for i, t in enumerate(trials):
        if t.concept_id in keep:
            by_concept[t.concept_id].append(i)

    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for concept in sorted(by_concept):
        idx = by_concept[concept]
        n_test = int(round(len(idx) * holdout_fraction))
        if len(idx) >= 2:
            n_test = min(max(n_test, 1), len(idx) - 1)
        chosen = rng.permutation(len(idx))[:n_test]
        test_idx.update(idx[j] for j in chosen)

    train = [t for i, t in enumerate(trials) if t.concept_id in keep and i not in test_idx]
    test = [t for i, t in enumerate(trials) if i in test_idx]
    return train, test
