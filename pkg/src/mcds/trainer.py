"""Joint concept-discovery training.

Each iteration: encode a batch of windows, draw one mask pattern per window
and score the cross-modal reconstruction, draw one epsilon per window,
segment the fresh latents and score goal prediction, then take a single
AdamW step over encoder, CMCN and predictor together.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import CheckpointBundle, capture, load_checkpoint, restore, restore_rng, save_checkpoint
from .cmcn import CMCNConfig, CrossModalNet, mask_matrix, reconstruction_loss, sample_mask
from .container import fingerprint
from .dataset import Dataset, ModalitySpec, make_windows, window_indices
from .encoder import ConceptEncoder, EncoderConfig
from .errors import NumericError, ValidationError
from .mhfp import FuturePredictor, MHFPConfig, batch_terminal_indices, goal_targets, next_indices

log = logging.getLogger(__name__)

ABLATIONS = ("full", "all-mask", "next", "next-n")


@dataclass
class TrainConfig:
    lambda_mm: float = 1.0
    lambda_mh: float = 1.0
    ablation: Literal["full", "all-mask", "next", "next-n"] = "full"
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    seed: int = 0
    checkpoint_every: int = 500

    def validate(self):
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"unknown ablation mode {self.ablation!r}")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.lambda_mm < 0 or self.lambda_mh < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.ablation == "full" and (self.lambda_mm <= 0 or self.lambda_mh <= 0):
            log.warning("full mode with a zero loss weight (lambda_mm=%s, lambda_mh=%s)", self.lambda_mm, self.lambda_mh)

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cmcn: CMCNConfig = field(default_factory=CMCNConfig)
    mhfp: MHFPConfig = field(default_factory=MHFPConfig)

    def to_dict(self):
        return {"encoder": self.encoder.to_dict(), "cmcn": self.cmcn.to_dict(), "mhfp": self.mhfp.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), CMCNConfig(**d["cmcn"]), MHFPConfig(**d["mhfp"]))


class ConceptModel(nn.Module):
    def __init__(self, modalities: Sequence[ModalitySpec], cfg: ModelConfig):
        super().__init__()
        self.modalities = list(modalities)
        self.cfg = cfg
        tc, dz = cfg.encoder.t_context, cfg.encoder.d_model
        self.encoder = ConceptEncoder(modalities, cfg.encoder)
        self.cmcn = CrossModalNet(modalities, dz, tc, cfg.cmcn)
        self.mhfp = FuturePredictor(modalities, dz, tc, cfg.mhfp)


def concept_fingerprint(modalities: Sequence[ModalitySpec], model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    return fingerprint({
        "modalities": [m.to_dict() for m in modalities],
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
    })


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr/10 to lr, then cosine decay back to lr/10.

    ``iteration`` is 0-based; the floor is reached on the final iteration.
    """
    floor = cfg.lr / 10
    if iteration < cfg.warmup:
        return floor + (cfg.lr - floor) * iteration / cfg.warmup
    span = max(1, cfg.iterations - 1 - cfg.warmup)
    progress = min(1.0, (iteration - cfg.warmup) / span)
    return floor + 0.5 * (cfg.lr - floor) * (1 + math.cos(math.pi * progress))


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


class WindowBank:
    """All training windows of a dataset stacked into per-modality tensors."""

    def __init__(self, dataset: Dataset, t_context: int, dtype=torch.float32):
        per_mod: list[list[np.ndarray]] = [[] for _ in dataset.modalities]
        self.windows = []
        for i, demo in enumerate(dataset.demos):
            for w in make_windows(demo, t_context, i, mode="train"):
                idx = window_indices(w, demo.length)
                for m, o in enumerate(demo.obs):
                    per_mod[m].append(o[idx])
                self.windows.append(w)
        if not self.windows:
            raise ValidationError("dataset has no demonstrations")
        self.frames = [torch.as_tensor(np.stack(rows), dtype=dtype) for rows in per_mod]

    def __len__(self):
        return len(self.windows)

    def batch(self, idx: np.ndarray) -> list[torch.Tensor]:
        t = torch.as_tensor(idx, dtype=torch.long)
        return [f[t] for f in self.frames]


def joint_loss(frames: Sequence[torch.Tensor], model: ConceptModel, rng: np.random.Generator,
               cfg: TrainConfig) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the mask-and-predict and goal-prediction terms.

    Returns the loss tensor (float64) and a breakdown of python floats.
    Random draws, in order: one mask pattern per window, then the horizon
    variable (epsilon per window, or n per step in ``next-n`` mode).
    """
    cfg.validate()
    modalities = model.modalities
    M = len(modalities)
    B, T = frames[0].shape[:2]
    z = model.encoder(frames)

    if cfg.ablation == "all-mask":
        patterns = [frozenset(range(M))] * B
    else:
        patterns = [sample_mask(M, rng) for _ in range(B)]
    keep = torch.as_tensor(mask_matrix(patterns, M), dtype=z.dtype)
    masked = [f * keep[:, m, None, None] for m, f in enumerate(frames)]
    loss_mm = reconstruction_loss(model.cmcn(masked, z), frames, modalities)

    if cfg.ablation in ("full", "all-mask"):
        eps = rng.random(B)
        index = batch_terminal_indices(z, eps)
        cond = torch.as_tensor(eps, dtype=z.dtype)
    elif cfg.ablation == "next":
        index = next_indices(B, T)
        cond = torch.zeros(B, dtype=z.dtype)
    else:  # next-n
        n = next_n_offsets(B, T, rng)
        index = np.arange(1, T + 1)[None, :] + n
        cond = torch.as_tensor(n / T, dtype=z.dtype)
    preds = model.mhfp(frames, z, cond)
    loss_mh = reconstruction_loss(preds, goal_targets(frames, index), modalities)

    loss = cfg.lambda_mm * loss_mm.double() + cfg.lambda_mh * loss_mh.double()
    parts = {"loss_mm": float(loss_mm.detach()), "loss_mh": float(loss_mh.detach()), "loss": float(loss.detach())}
    return loss, parts


def next_n_offsets(B: int, T: int, rng: np.random.Generator) -> np.ndarray:
    """n ~ U{1, ..., T - t} for each step t; the final step has no future and gets 0."""
    remaining = T - np.arange(1, T + 1)  # T - t
    u = rng.random((B, T))
    return np.where(remaining > 0, 1 + np.floor(u * remaining).astype(np.int64), 0)


def ablation_loss(frames: Sequence[torch.Tensor], model: ConceptModel, rng: np.random.Generator,
                  cfg: TrainConfig) -> tuple[torch.Tensor, dict]:
    if cfg.ablation not in ABLATIONS:
        raise ValidationError(f"unknown ablation mode {cfg.ablation!r}")
    if cfg.ablation == "full":
        raise ValidationError("ablation_loss needs a non-full ablation mode")
    return joint_loss(frames, model, rng, cfg)


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: ConceptModel
    bundle: CheckpointBundle
    metrics: list[dict]


def build_model(modalities: Sequence[ModalitySpec], model_cfg: ModelConfig, seed: int) -> ConceptModel:
    torch.manual_seed(seed)
    return ConceptModel(modalities, model_cfg)


def model_from_bundle(bundle: CheckpointBundle) -> ConceptModel:
    modalities = [ModalitySpec(**m) for m in bundle.meta["modalities"]]
    model = ConceptModel(modalities, ModelConfig.from_dict(bundle.meta["model"]))
    restore(bundle, model)
    model.eval()
    return model


def train(dataset: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
          resume: str | os.PathLike | CheckpointBundle | None = None,
          on_iteration: Callable[[dict], None] | None = None) -> TrainResult:
    """Run (or continue) training.

    With ``out_dir`` set, ``metrics.jsonl`` and ``checkpoint.mcck`` are
    written there; the checkpoint is refreshed every ``checkpoint_every``
    iterations and at the end. A non-finite loss aborts the run and leaves
    the last good checkpoint untouched.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    modalities = dataset.modalities
    fp = concept_fingerprint(modalities, model_cfg, cfg)
    meta = {"kind": "concepts", "modalities": [m.to_dict() for m in modalities], "model": model_cfg.to_dict(),
            "train": cfg.to_dict()}

    model = build_model(modalities, model_cfg, cfg.seed)
    optimizer = make_optimizer(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    metrics: list[dict] = []
    if resume is not None:
        bundle = resume if isinstance(resume, CheckpointBundle) else load_checkpoint(resume)
        bundle.check_fingerprint(fp, "resume checkpoint")
        restore(bundle, model, optimizer)
        rng = restore_rng(bundle)
        start = bundle.iteration

    bank = WindowBank(dataset, model_cfg.encoder.t_context)
    metrics_file = None
    ckpt_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path = out / "checkpoint.mcck"
        metrics_path = out / "metrics.jsonl"
        if start == 0:
            metrics_path.write_text("")
        else:
            _truncate_metrics(metrics_path, start)
        metrics_file = open(metrics_path, "a")

    model.train()
    try:
        for it in range(start, cfg.iterations):
            lr = lr_at(it, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = rng.integers(0, len(bank), size=cfg.batch_size)
            loss, parts = joint_loss(bank.batch(idx), model, rng, cfg)
            if not math.isfinite(parts["loss"]):
                raise NumericError(f"non-finite loss at iteration {it + 1}; last good checkpoint kept")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            record = {"iteration": it + 1, "loss": parts["loss"], "loss_mm": parts["loss_mm"],
                      "loss_mh": parts["loss_mh"], "lr": lr}
            metrics.append(record)
            if metrics_file is not None:
                metrics_file.write(json.dumps(record) + "\n")
            if on_iteration is not None:
                on_iteration(record)
            done = it + 1 == cfg.iterations
            if ckpt_path is not None and ((it + 1) % cfg.checkpoint_every == 0 or done):
                metrics_file.flush()
                save_checkpoint(capture(model, optimizer, iteration=it + 1, fingerprint=fp, rng=rng, meta=meta), ckpt_path)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    model.eval()
    bundle = capture(model, optimizer, iteration=cfg.iterations, fingerprint=fp, rng=rng, meta=meta)
    return TrainResult(model, bundle, metrics)


def _truncate_metrics(path: Path, keep_until: int) -> None:
    if not path.exists():
        path.write_text("")
        return
    lines = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["iteration"] <= keep_until]
    path.write_text("".join(ln + "\n" for ln in lines))


def read_metrics(path: str | os.PathLike) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln]


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
