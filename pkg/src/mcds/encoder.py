"""Concept encoder: observation window -> unit-norm concept latents."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .dataset import Dataset, ModalitySpec, labeling_window, make_windows, window_indices
from .errors import ValidationError
from .nets import MLP, TransformerStack

NORM_FLOOR = 1e-12


@dataclass
class EncoderConfig:
    mlp_hidden: int = 128
    d_model: int = 64
    depth: int = 4
    heads: int = 4
    t_context: int = 20
    ffn_mult: int = 2

    def validate(self):
        if self.d_model % self.heads:
            raise ValidationError("encoder.d_model must be divisible by encoder.heads")
        if self.depth < 1:
            raise ValidationError("encoder.depth must be >= 1")
        if self.t_context < 1:
            raise ValidationError("encoder.t_context must be >= 1")

    def to_dict(self):
        return asdict(self)


def unit_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / torch.linalg.vector_norm(x, dim=-1, keepdim=True).clamp_min(NORM_FLOOR)


class ModalityEmbedding(nn.Module):
    """One 2-layer MLP per modality; the frame embedding is their sum."""

    def __init__(self, dims: Sequence[int], hidden: int, d_model: int):
        super().__init__()
        self.dims = list(dims)
        self.mlps = nn.ModuleList(MLP([d, hidden, d_model]) for d in dims)

    def forward(self, frames: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(frames) != len(self.mlps):
            raise ValidationError(f"expected {len(self.mlps)} modalities, got {len(frames)}")
        out = None
        for x, d, mlp in zip(frames, self.dims, self.mlps):
            if x.shape[-1] != d:
                raise ValidationError(f"modality vector has dim {x.shape[-1]}, expected {d}")
            h = mlp(x)
            out = h if out is None else out + h
        return out


class ConceptEncoder(nn.Module):
    def __init__(self, modalities: Sequence[ModalitySpec], cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embed = ModalityEmbedding([m.dim for m in modalities], cfg.mlp_hidden, cfg.d_model)
        self.temporal = nn.Parameter(torch.randn(cfg.t_context, cfg.d_model) * 0.02)
        self.transformer = TransformerStack(cfg.d_model, cfg.depth, cfg.heads, cfg.ffn_mult)

    def embed_frame(self, frame: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.embed(frame)

    def forward(self, frames: Sequence[torch.Tensor]) -> torch.Tensor:
        """``frames``: per-modality (B, T_context, dim). Returns (B, T_context, d_model)."""
        T = frames[0].shape[-2]
        if T != self.cfg.t_context:
            raise ValidationError(f"window length {T} != t_context {self.cfg.t_context}")
        h = self.embed(frames) + self.temporal
        return unit_normalize(self.transformer(h, causal=False, name="encoder"))


def _param_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


@torch.no_grad()
def encode(encoder: ConceptEncoder, window_frames: Sequence[np.ndarray]) -> np.ndarray:
    """Encode one window given as per-modality (T_context, dim) arrays."""
    dt = _param_dtype(encoder)
    x = [torch.as_tensor(np.asarray(f), dtype=dt).unsqueeze(0) for f in window_frames]
    return encoder(x)[0].cpu().numpy()


@torch.no_grad()
def label_dataset(dataset: Dataset, encoder: ConceptEncoder, batch_size: int = 256) -> list[np.ndarray]:
    """Concept latent for every timestep of every demo, shape (T_i, d_model).

    Each timestep takes its latent from the window chosen by
    :func:`mcds.dataset.labeling_window`.
    """
    encoder.eval()
    tc = encoder.cfg.t_context
    dt = _param_dtype(encoder)
    jobs = []  # (demo index, window)
    for i, demo in enumerate(dataset.demos):
        jobs.extend((i, w) for w in make_windows(demo, tc, i, mode="label"))
    outputs: dict[tuple[int, int], np.ndarray] = {}
    for lo in range(0, len(jobs), batch_size):
        chunk = jobs[lo:lo + batch_size]
        frames = []
        for m in range(len(dataset.modalities)):
            rows = [dataset.demos[i].obs[m][window_indices(w, dataset.demos[i].length)] for i, w in chunk]
            frames.append(torch.as_tensor(np.stack(rows), dtype=dt))
        z = encoder(frames).cpu().numpy()
        for (i, w), zi in zip(chunk, z):
            outputs[(i, w.start)] = zi
    labels = []
    for i, demo in enumerate(dataset.demos):
        T = demo.length
        out = np.empty((T, encoder.cfg.d_model), dtype=np.float32)
        for t in range(1, T + 1):
            w, off = labeling_window(T, tc, t, i)
            out[t - 1] = outputs[(i, w.start)][off]
        labels.append(out)
    return labels
