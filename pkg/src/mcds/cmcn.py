"""Cross-modal correlation network: mask some modalities, rebuild all of them.

Modality indices are 0-based in code.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .dataset import ModalitySpec
from .encoder import ModalityEmbedding
from .errors import ValidationError
from .nets import MLP, TransformerStack, check_finite


@dataclass
class CMCNConfig:
    mlp_hidden: int = 128
    d_model: int = 64
    depth: int = 4
    heads: int = 4
    decoder_hidden: int = 128
    ffn_mult: int = 2

    def validate(self):
        if self.d_model % self.heads:
            raise ValidationError("cmcn.d_model must be divisible by cmcn.heads")
        if self.depth < 1:
            raise ValidationError("cmcn.depth must be >= 1")

    def to_dict(self):
        return asdict(self)


def sample_mask(M: int, rng: np.random.Generator) -> frozenset[int]:
    """Uniform draw over the 2**M - 1 non-empty subsets of modality indices."""
    if M < 1:
        raise ValidationError("need at least one modality to mask")
    code = int(rng.integers(1, 2 ** M))
    return frozenset(m for m in range(M) if code >> m & 1)


def mask_matrix(patterns: Sequence[frozenset[int]], M: int) -> np.ndarray:
    """(B, M) array with 1 where a modality is kept, 0 where masked."""
    keep = np.ones((len(patterns), M))
    for b, pat in enumerate(patterns):
        keep[b, list(pat)] = 0.0
    return keep


def apply_mask(frame: Sequence, pattern: frozenset[int]) -> list:
    for m in pattern:
        if not 0 <= m < len(frame):
            raise ValidationError(f"mask index {m} outside [0, {len(frame)})")
    return [x * 0 if m in pattern else x for m, x in enumerate(frame)]


def reconstruction_loss(preds: Sequence[torch.Tensor], targets: Sequence[torch.Tensor],
                        modalities: Sequence[ModalitySpec]) -> torch.Tensor:
    """Mean over leading dims of the per-modality norm of the residual, summed over modalities."""
    if len(preds) != len(targets) or len(preds) != len(modalities):
        raise ValidationError("predictions, targets and modality specs disagree in count")
    total = None
    for p, t, spec in zip(preds, targets, modalities):
        if p.shape != t.shape:
            raise ValidationError(f"{spec.name}: prediction shape {tuple(p.shape)} != target shape {tuple(t.shape)}")
        ord = 2 if spec.recon_norm == "L2" else 1
        term = torch.linalg.vector_norm(p - t, ord=ord, dim=-1).mean()
        total = term if total is None else total + term
    return total


cmcn_loss = reconstruction_loss


class CrossModalNet(nn.Module):
    def __init__(self, modalities: Sequence[ModalitySpec], concept_dim: int, t_context: int, cfg: CMCNConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dims = [m.dim for m in modalities]
        self.embed = ModalityEmbedding(dims + [concept_dim], cfg.mlp_hidden, cfg.d_model)
        self.temporal = nn.Parameter(torch.randn(t_context, cfg.d_model) * 0.02)
        self.transformer = TransformerStack(cfg.d_model, cfg.depth, cfg.heads, cfg.ffn_mult)
        self.decoders = nn.ModuleList(MLP([cfg.d_model, cfg.decoder_hidden, cfg.decoder_hidden, d]) for d in dims)

    def forward(self, masked_frames: Sequence[torch.Tensor], concepts: torch.Tensor) -> list[torch.Tensor]:
        """Rebuild every modality at every step; inputs are (B, T, dim)."""
        h = self.embed(list(masked_frames) + [concepts]) + self.temporal
        h = self.transformer(h, causal=False, name="cmcn")
        return [check_finite(dec(h), "cmcn output") for dec in self.decoders]


def reconstruct(model: CrossModalNet, masked_frames, concepts) -> list[torch.Tensor]:
    return model(masked_frames, concepts)
