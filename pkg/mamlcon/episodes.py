#!/usr/bin/env python3
"""
Continual-learning scenarios and episode sampling

A scenario N<n>:CS<cs>:CA<ca> with K shots describes one continual
learning lifetime: cs classes first, then ca more per update step until n
classes are known. An Episode is one concrete draw of that lifetime from
a labelled dataset, with disjoint support and test examples per class and
a fresh random class -> head-index label map.
"""

import logging
import re
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data import FeatureArchive, pad_or_truncate
from .error_handling import SamplingError, ValidationError

logger = logging.getLogger(__name__)

SCENARIO_PATTERN = re.compile(r"N(\d+):CS(\d+):CA(\d+)")
DEFAULT_K_TEST = 5


@dataclass(frozen=True)
class ScenarioSpec:
    n_final: int
    cs: int
    ca: int
    k: int

    def __post_init__(self):
        if self.n_final < 1:
            raise ValidationError(f"N must be at least 1, got {self.n_final}")
        if not 1 <= self.cs <= self.n_final:
            raise ValidationError(f"CS must lie in [1, N={self.n_final}], got {self.cs}",
                                  {"n_final": self.n_final, "cs": self.cs})
        if self.ca < 1:
            raise ValidationError(f"CA must be at least 1, got {self.ca}")
        if self.k < 1:
            raise ValidationError(f"K must be at least 1, got {self.k}")

    @property
    def notation(self) -> str:
        return f"N{self.n_final}:CS{self.cs}:CA{self.ca}"

    def __str__(self) -> str:
        return f"{self.notation} K={self.k}"


def parse_scenario(text: str, k: int) -> ScenarioSpec:
    """Parse `N<int>:CS<int>:CA<int>` (case-sensitive, no whitespace)."""
    match = SCENARIO_PATTERN.fullmatch(text) if isinstance(text, str) else None
    if match is None:
        raise ValidationError(f"malformed scenario {text!r}; expected N<int>:CS<int>:CA<int>", {"scenario": text})
    n_final, cs, ca = (int(group) for group in match.groups())
    return ScenarioSpec(n_final=n_final, cs=cs, ca=ca, k=k)


def class_schedule(spec: ScenarioSpec) -> List[int]:
    """Group sizes: cs, then ca repeatedly, with the last addition clamped so the total is n_final."""
    sizes = [spec.cs]
    total = spec.cs
    while total < spec.n_final:
        added = min(spec.ca, spec.n_final - total)
        sizes.append(added)
        total += added
    return sizes


def group_labels(sizes: Sequence[int]) -> List[str]:
    """Human labels for consecutive groups, e.g. [5, 5] -> ['1-5', '6-10']."""
    labels = []
    start = 1
    for size in sizes:
        end = start + size - 1
        labels.append(str(start) if size == 1 else f"{start}-{end}")
        start = end + 1
    return labels


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """class_id -> stacked examples [n_examples, frames, coeffs]."""
    classes: Dict[int, np.ndarray]
    frames: int
    coeffs: int
    names: Optional[Dict[int, str]] = None

    def __post_init__(self):
        for class_id, examples in self.classes.items():
            if examples.ndim != 3 or examples.shape[1:] != (self.frames, self.coeffs):
                raise ValidationError(f"class {class_id} examples have shape {examples.shape}, "
                                      f"expected [n, {self.frames}, {self.coeffs}]")

    @property
    def class_ids(self) -> List[int]:
        return sorted(self.classes)

    def counts(self) -> Dict[int, int]:
        return {class_id: int(self.classes[class_id].shape[0]) for class_id in self.class_ids}

    @classmethod
    def from_archive(cls, archive: FeatureArchive, target_frames: Optional[int] = None) -> "LabeledDataset":
        """Group archive records by class, padding or truncating to a common frame count."""
        frames = target_frames or archive.target_frames or max((r.n_frames for r in archive.records), default=1)
        classes = {}
        for class_id, records in archive.by_class().items():
            if records:
                classes[class_id] = np.stack([pad_or_truncate(r.features, frames) for r in records])
        return cls(classes=classes, frames=frames, coeffs=archive.n_coeffs, names=dict(archive.classes))

    def subset(self, class_ids: Iterable[int]) -> "LabeledDataset":
        ids = list(class_ids)
        names = {i: self.names[i] for i in ids if i in self.names} if self.names else None
        return LabeledDataset({i: self.classes[i] for i in ids}, self.frames, self.coeffs, names)

    def split_classes(self, heldout: int, rng: np.random.Generator) -> Tuple["LabeledDataset", "LabeledDataset"]:
        """Random disjoint (meta-train, held-out) class split."""
        ids = self.class_ids
        if not 0 < heldout < len(ids):
            raise ValidationError(f"heldout_classes must lie in [1, {len(ids) - 1}], got {heldout}")
        order = rng.permutation(len(ids))
        heldout_ids = sorted(ids[i] for i in order[:heldout])
        train_ids = sorted(ids[i] for i in order[heldout:])
        return self.subset(train_ids), self.subset(heldout_ids)


def check_dataset(data: LabeledDataset, spec: ScenarioSpec, k_test: int = DEFAULT_K_TEST) -> List[int]:
    """
    Eligible classes (those with at least K + k_test examples).

    Raises:
        SamplingError: fewer than N eligible classes; details carry the deficit
    """
    needed = spec.k + k_test
    counts = data.counts()
    eligible = [class_id for class_id, count in counts.items() if count >= needed]
    if len(eligible) < spec.n_final:
        short = {class_id: count for class_id, count in counts.items() if count < needed}
        deficit = {
            "classes_needed": spec.n_final,
            "classes_eligible": len(eligible),
            "examples_needed_per_class": needed,
            "short_classes": short,
        }
        raise SamplingError(
            f"dataset cannot supply {spec.notation} with K={spec.k}: {len(eligible)} of {len(counts)} classes "
            f"have the {needed} examples required, {spec.n_final} needed",
            {"deficit": deficit},
        )
    return eligible


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSlot:
    class_id: int
    support: np.ndarray
    test: np.ndarray
    support_index: np.ndarray
    test_index: np.ndarray


@dataclass(frozen=True)
class Episode:
    groups: Tuple[Tuple[ClassSlot, ...], ...]
    label_map: Dict[int, int]
    n_max: int

    @property
    def group_sizes(self) -> List[int]:
        return [len(group) for group in self.groups]

    @property
    def class_ids(self) -> List[int]:
        return [slot.class_id for group in self.groups for slot in group]

    def heads(self, class_ids: Iterable[int]) -> np.ndarray:
        return np.array([self.label_map[class_id] for class_id in class_ids], dtype=np.int64)

    def classes_through(self, group: int) -> List[int]:
        return [slot.class_id for g in self.groups[:group + 1] for slot in g]

    def mask_through(self, group: int) -> np.ndarray:
        mask = np.zeros(self.n_max, dtype=bool)
        mask[self.heads(self.classes_through(group))] = True
        return mask

    def slots_batch(self, slots: Iterable[ClassSlot], attr: str) -> Tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for slot in slots:
            examples = getattr(slot, attr)
            xs.append(examples)
            ys.append(np.full(examples.shape[0], self.label_map[slot.class_id], dtype=np.int64))
        return np.concatenate(xs)[:, None, :, :], np.concatenate(ys)

    def support_batch(self, group: int) -> Tuple[np.ndarray, np.ndarray]:
        """Support inputs [B, 1, frames, coeffs] and head labels for one group."""
        return self.slots_batch(self.groups[group], "support")

    def test_batch(self, groups: Optional[Iterable[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Test inputs and head labels for the given groups (all groups by default)."""
        selected = range(len(self.groups)) if groups is None else groups
        return self.slots_batch([slot for g in selected for slot in self.groups[g]], "test")


def sample_episode(data: LabeledDataset, spec: ScenarioSpec, n_max: int, rng: np.random.Generator,
                   k_test: int = DEFAULT_K_TEST) -> Episode:
    """
    Draw N classes without replacement and, per class, K support and
    k_test disjoint test examples; the label map is freshly randomised.
    """
    if n_max < spec.n_final:
        raise ValidationError(f"head size {n_max} smaller than N={spec.n_final}")
    if k_test < 1:
        raise ValidationError(f"k_test must be at least 1, got {k_test}")
    eligible = check_dataset(data, spec, k_test)

    chosen = rng.choice(np.array(eligible), size=spec.n_final, replace=False)
    slots = []
    for class_id in chosen.tolist():
        examples = data.classes[class_id]
        order = rng.permutation(examples.shape[0])
        support_index = order[:spec.k]
        test_index = order[spec.k:spec.k + k_test]
        slots.append(ClassSlot(class_id, examples[support_index], examples[test_index], support_index, test_index))

    heads = rng.permutation(n_max)[:spec.n_final]
    label_map = {slot.class_id: int(head) for slot, head in zip(slots, heads)}

    groups = []
    start = 0
    for size in class_schedule(spec):
        groups.append(tuple(slots[start:start + size]))
        start += size
    return Episode(groups=tuple(groups), label_map=label_map, n_max=n_max)


def shuffle_labels(episode: Episode, rng: np.random.Generator) -> Episode:
    """Assign every class a new head index; examples and grouping are unchanged."""
    class_ids = episode.class_ids
    heads = rng.permutation(episode.n_max)[:len(class_ids)]
    return replace(episode, label_map={class_id: int(head) for class_id, head in zip(class_ids, heads)})
