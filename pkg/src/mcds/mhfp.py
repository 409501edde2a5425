"""Coherence segmentation of concept sequences and the multi-horizon goal predictor.

Segment boundaries use 1-indexed timesteps: a sequence of length ``T``
is tiled by half-open intervals ``[g_k, g_{k+1})`` with ``g_1 = 1`` and the
last end at ``T + 1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .cmcn import reconstruction_loss
from .dataset import ModalitySpec
from .encoder import ModalityEmbedding
from .errors import ValidationError
from .nets import MLP, TransformerStack, check_finite


def spherical_distance(z, u) -> float:
    """Angle between ``z`` and ``u`` divided by pi; lies in [0, 1].

    Uses 2 atan2(|a - b|, |a + b|) on the normalized vectors, which stays
    exact near 0 and 1 where arccos of a rounded dot product does not.
    """
    z = np.asarray(z, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    nz, nu = np.linalg.norm(z), np.linalg.norm(u)
    if nz == 0 or nu == 0:
        raise ValidationError("spherical distance is undefined for a zero vector")
    a, b = z / nz, u / nu
    return float(2 * np.arctan2(np.linalg.norm(a - b), np.linalg.norm(a + b)) / np.pi)


def pairwise_spherical(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValidationError("spherical distance is undefined for a zero vector")
    u = z / n
    diff = np.linalg.norm(u[:, None, :] - u[None, :, :], axis=-1)
    summ = np.linalg.norm(u[:, None, :] + u[None, :, :], axis=-1)
    return 2 * np.arctan2(diff, summ) / np.pi


@dataclass(frozen=True)
class Segmentation:
    intervals: tuple[tuple[int, int], ...]
    epsilon: float
    T: int

    @property
    def K(self) -> int:
        return len(self.intervals)

    @property
    def starts(self) -> list[int]:
        return [a for a, _ in self.intervals]

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "T": self.T, "intervals": [list(iv) for iv in self.intervals]}


def segment_from_distances(dist: np.ndarray, epsilon: float) -> Segmentation:
    """Greedy left-to-right growth over a precomputed distance matrix.

    An interval keeps absorbing the next step while that step is strictly
    closer than ``epsilon`` to every step already inside it.
    """
    T = dist.shape[0]
    close = dist < epsilon
    intervals = []
    b = 1
    while b <= T:
        e = b + 1
        while e <= T and close[b - 1:e - 1, e - 1].all():
            e += 1
        intervals.append((b, e))
        b = e
    return Segmentation(tuple(intervals), float(epsilon), T)


def derive_subprocesses(concepts, epsilon: float) -> Segmentation:
    if not 0.0 <= epsilon <= 1.0:
        raise ValidationError(f"epsilon={epsilon} outside [0, 1]")
    return segment_from_distances(pairwise_spherical(concepts), epsilon)


def terminal_index(t: int, seg: Segmentation) -> int:
    """End of the interval holding ``t``, clamped to ``T``."""
    if not 1 <= t <= seg.T:
        raise ValidationError(f"timestep {t} outside [1, {seg.T}]")
    for a, b in seg.intervals:
        if a <= t < b:
            return min(seg.T, b)
    raise AssertionError("segmentation does not cover t")  # pragma: no cover


def terminal_indices(seg: Segmentation) -> np.ndarray:
    """Terminal timestep for t = 1..T as an int array (1-indexed values)."""
    out = np.empty(seg.T, dtype=np.int64)
    for a, b in seg.intervals:
        out[a - 1:b - 1] = min(seg.T, b)
    return out


# ---------------------------------------------------------------- predictor


@dataclass
class MHFPConfig:
    mlp_hidden: int = 128
    d_model: int = 64
    depth: int = 4
    heads: int = 4
    decoder_hidden: int = 128
    ffn_mult: int = 2

    def validate(self):
        if self.d_model % self.heads:
            raise ValidationError("mhfp.d_model must be divisible by mhfp.heads")
        if self.depth < 1:
            raise ValidationError("mhfp.depth must be >= 1")

    def to_dict(self):
        return asdict(self)


class FuturePredictor(nn.Module):
    """Causal transformer predicting each step's sub-process terminal observation."""

    def __init__(self, modalities: Sequence[ModalitySpec], concept_dim: int, t_context: int, cfg: MHFPConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dims = [m.dim for m in modalities]
        self.embed = ModalityEmbedding(dims + [concept_dim], cfg.mlp_hidden, cfg.d_model)
        self.eps_embed = MLP([1, cfg.mlp_hidden, cfg.d_model])
        self.temporal = nn.Parameter(torch.randn(t_context, cfg.d_model) * 0.02)
        self.transformer = TransformerStack(cfg.d_model, cfg.depth, cfg.heads, cfg.ffn_mult)
        self.decoders = nn.ModuleList(MLP([cfg.d_model, cfg.decoder_hidden, cfg.decoder_hidden, d]) for d in dims)

    def forward(self, frames: Sequence[torch.Tensor], concepts: torch.Tensor, eps: torch.Tensor) -> list[torch.Tensor]:
        """``eps`` is (B,) for one coherence value per window, or (B, T) per step."""
        B = concepts.shape[0]
        e = self.eps_embed(eps.reshape(B, -1, 1).to(concepts.dtype))
        h = self.embed(list(frames) + [concepts]) + self.temporal + e
        h = self.transformer(h, causal=True, name="mhfp")
        return [check_finite(dec(h), "mhfp output") for dec in self.decoders]


def predict_goal(model: FuturePredictor, window_frames, concepts, epsilon) -> list[torch.Tensor]:
    eps = torch.as_tensor(epsilon, dtype=concepts.dtype).reshape(-1)
    if torch.any((eps < 0) | (eps > 1)):
        raise ValidationError("epsilon outside [0, 1]")
    return model(window_frames, concepts, eps.expand(concepts.shape[0]))


def goal_targets(frames: Sequence[torch.Tensor], index: np.ndarray) -> list[torch.Tensor]:
    """Gather per-step targets; ``index`` is (B, T) of 1-indexed timesteps."""
    idx = torch.as_tensor(index - 1, dtype=torch.long)
    return [torch.gather(f, 1, idx.unsqueeze(-1).expand(-1, -1, f.shape[-1])) for f in frames]


def batch_terminal_indices(concepts: torch.Tensor, eps: np.ndarray) -> np.ndarray:
    """Segment every window's (detached) latents at its own epsilon."""
    z = concepts.detach().cpu().double().numpy()
    out = np.empty(z.shape[:2], dtype=np.int64)
    for b in range(z.shape[0]):
        out[b] = terminal_indices(derive_subprocesses(z[b], float(eps[b])))
    return out


def next_indices(B: int, T: int) -> np.ndarray:
    return np.tile(np.minimum(np.arange(2, T + 2), T), (B, 1))


def mhfp_loss(model: FuturePredictor, frames: Sequence[torch.Tensor], concepts: torch.Tensor,
              modalities: Sequence[ModalitySpec], rng: np.random.Generator,
              eps: np.ndarray | None = None) -> tuple[torch.Tensor, np.ndarray]:
    """Goal-prediction loss with one epsilon ~ U[0, 1] drawn per window.

    Targets come from segmenting the current latents, which are detached
    for that purpose only; gradients still reach the encoder through the
    predictor's concept input.
    """
    B = concepts.shape[0]
    if eps is None:
        eps = rng.random(B)
    eps = np.asarray(eps, dtype=np.float64).reshape(B)
    targets = goal_targets(frames, batch_terminal_indices(concepts, eps))
    preds = model(frames, concepts, torch.as_tensor(eps, dtype=concepts.dtype))
    return reconstruction_loss(preds, targets, modalities), eps
