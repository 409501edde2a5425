"""Group-level cosine similarity of concept latents and the grouping rules feeding it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..dataset import Dataset
from ..errors import ValidationError


@dataclass
class ConceptGroup:
    label: str
    members: np.ndarray  # (n, D)

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim != 2 or len(self.members) == 0:
            raise ValidationError(f"group {self.label!r} is empty or not an (n, D) array")


def class_similarity(groups: Sequence[ConceptGroup]) -> np.ndarray:
    """Mean cosine similarity over all member pairs of groups i and j.

    Averaging unit vectors first gives the same number in O(n D):
    mean_{a, b} <u_a, u_b> = <mean u_a, mean u_b>.
    """
    if len(groups) < 2:
        raise ValidationError("need at least two groups")
    dims = {g.members.shape[1] for g in groups}
    if len(dims) != 1:
        raise ValidationError(f"groups disagree in latent dim: {sorted(dims)}")
    means = []
    for g in groups:
        n = np.linalg.norm(g.members, axis=1, keepdims=True)
        if np.any(n == 0):
            raise ValidationError(f"group {g.label!r} holds a zero vector")
        means.append((g.members / n).mean(axis=0))
    m = np.stack(means)
    s = m @ m.T
    s = 0.5 * (s + s.T)
    return np.clip(s, -1.0, 1.0)


def diagonal_fraction(sim: np.ndarray) -> float:
    """Fraction of rows whose maximum sits on the diagonal (ties count)."""
    sim = np.asarray(sim)
    return float(np.mean(np.diag(sim) >= sim.max(axis=1)))


def groups_from_segments(dataset: Dataset, concept_labels: Sequence[np.ndarray]) -> list[ConceptGroup]:
    """One group per gt segment label, pooling every timestep inside such segments."""
    pools: dict[str, list[np.ndarray]] = {}
    for demo, lab in zip(dataset.demos, concept_labels):
        if demo.gt_segments is None:
            continue
        for name, a, b in demo.gt_segments:
            pools.setdefault(name, []).append(lab[a - 1:b - 1])
    if not pools:
        raise ValidationError("dataset carries no gt segments")
    return [ConceptGroup(k, np.concatenate(v)) for k, v in sorted(pools.items())]


MOTION_AXES = (("x", 0, "right", "left"), ("y", 1, "forward", "backward"), ("gripper", 2, "open", "close"))
STILL_FRACTION = 0.2


def motion_classes(actions: np.ndarray, max_speed: np.ndarray) -> list[list[str]]:
    """Per-axis class of every row: still when strictly below 20% of the max, else a direction."""
    out = []
    for name, col, pos, neg in MOTION_AXES:
        v = actions[:, col]
        still = (np.abs(v) < STILL_FRACTION * max_speed[col]) | (v == 0)
        out.append([f"{name}:still" if s else f"{name}:{pos if x > 0 else neg}" for s, x in zip(still, v)])
    return out


def group_by_motion(dataset: Dataset, concept_labels: Sequence[np.ndarray]) -> list[ConceptGroup]:
    """Group latents by commanded motion along each axis; empty classes are dropped."""
    acts = np.concatenate([d.actions for d in dataset.demos])
    lats = np.concatenate(list(concept_labels))
    if len(acts) != len(lats):
        raise ValidationError("concept labels do not line up with dataset timesteps")
    max_speed = np.abs(acts).max(axis=0)
    pools: dict[str, list[int]] = {}
    for classes in motion_classes(acts, max_speed):
        for i, c in enumerate(classes):
            pools.setdefault(c, []).append(i)
    return [ConceptGroup(k, lats[idx]) for k, idx in sorted(pools.items())]
