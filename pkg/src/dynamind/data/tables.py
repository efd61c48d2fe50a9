"""Concept -> coarse category / attribute table used for label remapping."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import ValidationError

ATTRIBUTE_TASKS = ("color", "fast_slow", "numbers", "human_face", "human")


@dataclass(frozen=True)
class ConceptTable:
    coarse_categories: tuple[str, ...]
    concepts: tuple[dict, ...]

    @property
    def num_concepts(self) -> int:
        return len(self.concepts)

    @property
    def num_coarse(self) -> int:
        return len(self.coarse_categories)

    def coarse_of(self, concept_id: int) -> int:
        if not 0 <= concept_id < self.num_concepts:
            raise ValidationError(f"concept id {concept_id} outside [0, {self.num_concepts})")
        return int(self.concepts[concept_id]["coarse_id"])

    def label_map(self, task: str) -> tuple[np.ndarray, list]:
        """Return (concept -> remapped label index, label values) for a remapping task."""
        if task == "coarse":
            return np.array([c["coarse_id"] for c in self.concepts]), list(self.coarse_categories)
        if task not in ATTRIBUTE_TASKS:
            raise ValidationError(f"unknown attribute task '{task}'")
        raw = [c[task] for c in self.concepts]
        values = sorted(set(raw), key=str)
        index = {v: i for i, v in enumerate(values)}
        return np.array([index[v] for v in raw]), values


@lru_cache(maxsize=None)
def _load(path: str | None) -> ConceptTable:
    if path is None:
        text = resources.files("dynamind.data.resources").joinpath("concepts.json").read_text()
    else:
        text = Path(path).read_text()
    spec = json.loads(text)
    concepts = tuple(sorted(spec["concepts"], key=lambda c: c["concept_id"]))
    if [c["concept_id"] for c in concepts] != list(range(len(concepts))):
        raise ValidationError("concept ids in the table must be 0..n-1")
    return ConceptTable(tuple(spec["coarse_categories"]), concepts)


def load_concept_table(path: str | None = None) -> ConceptTable:
    return _load(None if path in (None, "", "default") else str(path))
