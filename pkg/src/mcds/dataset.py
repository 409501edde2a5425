"""Trajectory data types, the ``MCDS`` file format and windowing rules.

Timesteps are 1-indexed wherever interval arithmetic happens: a demo of
length ``T`` covers ``[1, T+1)`` and ``gt_segments`` use that convention.
Arrays are ordinary 0-indexed numpy arrays, so timestep ``t`` lives at row
``t - 1``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, Literal, Sequence

import numpy as np

from .container import read_container, write_container
from .errors import FormatError, ValidationError

DATASET_MAGIC = b"MCDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    dim: int
    recon_norm: Literal["L2", "L1"] = "L2"

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"modality {self.name!r}: dim must be >= 1")
        if self.recon_norm not in ("L2", "L1"):
            raise ValidationError(f"modality {self.name!r}: recon_norm must be L2 or L1")

    def to_dict(self) -> dict:
        return {"name": self.name, "dim": self.dim, "recon_norm": self.recon_norm}


@dataclass(eq=False)
class Demonstration:
    task_id: str
    obs: list[np.ndarray]  # one (T, dim) float32 array per modality
    actions: np.ndarray  # (T, action_dim) float32
    gt_segments: list[tuple[str, int, int]] | None = None

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    def frame(self, t: int) -> list[np.ndarray]:
        """Observation vectors at 1-indexed timestep ``t``."""
        return [o[t - 1] for o in self.obs]

    def __eq__(self, other):
        if not isinstance(other, Demonstration):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and len(self.obs) == len(other.obs)
            and all(np.array_equal(a, b) for a, b in zip(self.obs, other.obs))
            and np.array_equal(self.actions, other.actions)
            and _norm_segments(self.gt_segments) == _norm_segments(other.gt_segments)
        )


def _norm_segments(segs):
    if segs is None:
        return None
    return [(str(lab), int(a), int(b)) for lab, a, b in segs]


@dataclass(eq=False)
class Dataset:
    modalities: list[ModalitySpec]
    action_dim: int
    demos: list[Demonstration] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate modality names: {names}")

    def __len__(self):
        return len(self.demos)

    def __iter__(self) -> Iterator[Demonstration]:
        return iter(self.demos)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.modalities == other.modalities
            and self.action_dim == other.action_dim
            and self.seed == other.seed
            and len(self.demos) == len(other.demos)
            and all(a == b for a, b in zip(self.demos, other.demos))
        )

    @property
    def task_ids(self) -> list[str]:
        return sorted({d.task_id for d in self.demos})

    def validate(self) -> None:
        for i, demo in enumerate(self.demos):
            validate_demo(demo, self.modalities, self.action_dim, where=f"demo {i}")


def validate_demo(demo: Demonstration, modalities: Sequence[ModalitySpec], action_dim: int, where: str = "demo") -> None:
    T = demo.length
    if T < 1:
        raise ValidationError(f"{where}: empty trajectory")
    if len(demo.obs) != len(modalities):
        raise ValidationError(f"{where}: expected {len(modalities)} modalities, got {len(demo.obs)}")
    for spec, arr in zip(modalities, demo.obs):
        if arr.shape != (T, spec.dim):
            raise ValidationError(f"{where}: modality {spec.name!r} has shape {arr.shape}, expected {(T, spec.dim)}")
    if demo.actions.shape != (T, action_dim):
        raise ValidationError(f"{where}: actions have shape {demo.actions.shape}, expected {(T, action_dim)}")
    if demo.gt_segments is not None:
        check_partition([(a, b) for _, a, b in demo.gt_segments], T, where=where)


def check_partition(intervals: Sequence[tuple[int, int]], T: int, where: str = "") -> None:
    """Raise unless ``intervals`` are ordered, non-empty and tile ``[1, T+1)``."""
    pos = 1
    for a, b in intervals:
        if a != pos or b <= a:
            raise ValidationError(f"{where}: intervals {list(intervals)} do not partition [1, {T + 1})")
        pos = b
    if pos != T + 1:
        raise ValidationError(f"{where}: intervals {list(intervals)} do not partition [1, {T + 1})")


# ---------------------------------------------------------------- file format


def write_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    dataset.validate()
    chunks, demos, offset = [], [], 0
    for demo in dataset.demos:
        parts = [np.ascontiguousarray(o, dtype="<f4") for o in demo.obs]
        parts.append(np.ascontiguousarray(demo.actions, dtype="<f4"))
        raw = b"".join(p.tobytes() for p in parts)
        demos.append({
            "task_id": demo.task_id,
            "length": demo.length,
            "offset": offset,
            "nbytes": len(raw),
            "gt_segments": None if demo.gt_segments is None else [list(s) for s in _norm_segments(demo.gt_segments)],
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "modalities": [m.to_dict() for m in dataset.modalities],
        "action_dim": dataset.action_dim,
        "num_demos": len(dataset.demos),
        "seed": dataset.seed,
        "dtype": "<f4",
        "payload_order": "per demo: each modality (T, dim) in declared order, then actions (T, action_dim); row t-1 holds timestep t",
        "demos": demos,
    }
    write_container(path, DATASET_MAGIC, DATASET_VERSION, manifest, b"".join(chunks))


def read_dataset(path: str | os.PathLike) -> Dataset:
    _, manifest, payload = read_container(path, DATASET_MAGIC, (DATASET_VERSION,))
    try:
        modalities = [ModalitySpec(m["name"], int(m["dim"]), m["recon_norm"]) for m in manifest["modalities"]]
        action_dim = int(manifest["action_dim"])
        entries = manifest["demos"]
        seed = int(manifest["seed"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: manifest missing field {exc}") from None
    if len(entries) != manifest.get("num_demos"):
        raise ValidationError(f"{path}: demo count {manifest.get('num_demos')} disagrees with {len(entries)} entries")
    row = sum(m.dim for m in modalities) + action_dim
    demos = []
    for i, e in enumerate(entries):
        T = int(e["length"])
        if e["nbytes"] != 4 * T * row:
            raise ValidationError(f"{path}: demo {i} has {e['nbytes']} bytes, manifest dims imply {4 * T * row}")
        lo = e["offset"]
        if lo + e["nbytes"] > len(payload):
            raise FormatError(f"{path}: demo {i} runs past end of file")
        flat = payload[lo:lo + e["nbytes"]]
        arrays, pos = [], 0
        for d in [m.dim for m in modalities] + [action_dim]:
            n = 4 * T * d
            arrays.append(np.frombuffer(flat[pos:pos + n], dtype="<f4").reshape(T, d).astype(np.float32))
            pos += n
        segs = e.get("gt_segments")
        demos.append(Demonstration(
            task_id=e["task_id"],
            obs=arrays[:-1],
            actions=arrays[-1],
            gt_segments=None if segs is None else [(s[0], int(s[1]), int(s[2])) for s in segs],
        ))
    ds = Dataset(modalities, action_dim, demos, seed)
    ds.validate()
    return ds


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class Window:
    demo_index: int
    start: int  # 1-indexed first timestep
    length: int
    padded_tail: int = 0


def make_windows(demo: Demonstration | int, t_context: int, demo_index: int = 0,
                 mode: Literal["train", "label"] = "train") -> list[Window]:
    """Windows of ``t_context`` frames over a demo.

    ``train`` returns every valid start position. ``label`` returns the
    distinct windows that :func:`labeling_window` designates, in order.
    Demos shorter than ``t_context`` get a single tail-padded window.
    """
    if t_context < 1:
        raise ValidationError("t_context must be >= 1")
    T = demo if isinstance(demo, int) else demo.length
    if mode not in ("train", "label"):
        raise ValidationError(f"unknown window mode {mode!r}")
    if T < t_context:
        return [Window(demo_index, 1, t_context, t_context - T)]
    # starts 1..T-Tc label their own first step; the last one labels the tail,
    # so both modes enumerate the same windows
    return [Window(demo_index, s, t_context) for s in range(1, T - t_context + 2)]


def labeling_window(T: int, t_context: int, t: int, demo_index: int = 0) -> tuple[Window, int]:
    """The window whose output supplies the concept at timestep ``t``.

    Returns the window and the 0-based offset of ``t`` inside it. A window
    starts at ``t`` while a full window still fits, otherwise it is pinned
    to end at the last timestep so the concept sees as much future as
    possible.
    """
    if not 1 <= t <= T:
        raise ValidationError(f"timestep {t} outside [1, {T}]")
    if T < t_context:
        return Window(demo_index, 1, t_context, t_context - T), t - 1
    start = t if t <= T - t_context else T - t_context + 1
    return Window(demo_index, start, t_context), t - start


def window_indices(window: Window, T: int) -> np.ndarray:
    """0-based row indices of a window's frames, padding repeats row T-1."""
    idx = np.arange(window.start - 1, window.start - 1 + window.length)
    return np.minimum(idx, T - 1)


def window_frames(demo: Demonstration, window: Window) -> list[np.ndarray]:
    idx = window_indices(window, demo.length)
    return [o[idx] for o in demo.obs]
