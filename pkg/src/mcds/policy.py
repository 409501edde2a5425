"""Behavior cloning with an auxiliary concept-prediction head.

The backbone is a stack of residual MLP blocks over the current
observation window and a learned task embedding. The action head reads the
last block; the concept head reads block ``concept_layer``. Both emit
chunks covering the same ``chunk`` future steps.

Actions are regressed in a normalized space (divided by the per-dimension
maximum magnitude seen in the training data).
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import env as envlib
from .checkpoint import CheckpointBundle, capture, restore
from .container import fingerprint
from .dataset import Dataset, ModalitySpec
from .errors import NumericError, ValidationError
from .nets import MLP
from .trainer import TrainConfig, lr_at, make_optimizer

log = logging.getLogger(__name__)

SPLITS = ("train-layout", "novel-layout", "two-stage")


@dataclass
class PolicyConfig:
    depth: int = 3
    width: int = 128
    obs_window: int = 2
    chunk: int = 4
    task_embed_dim: int = 16
    concept_layer: int = 1
    lambda_mc: float = 0.1

    def validate(self):
        if self.depth < 1 or self.width < 1:
            raise ValidationError("policy.depth and policy.width must be >= 1")
        if not 0 <= self.concept_layer < self.depth:
            raise ValidationError(f"policy.concept_layer must lie in [0, {self.depth})")
        if self.lambda_mc < 0:
            raise ValidationError("policy.lambda_mc must be >= 0")
        if self.obs_window < 1 or self.chunk < 1:
            raise ValidationError("policy.obs_window and policy.chunk must be >= 1")

    def to_dict(self):
        return asdict(self)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.ln = nn.LayerNorm(width)
        self.mlp = MLP([width, 2 * width, width])

    def forward(self, x):
        return x + self.mlp(self.ln(x))


class Head(nn.Module):
    def __init__(self, width: int, chunk: int, out_dim: int):
        super().__init__()
        self.chunk, self.out_dim = chunk, out_dim
        self.ln = nn.LayerNorm(width)
        self.mlp = MLP([width, width, chunk * out_dim])

    def forward(self, h):
        return self.mlp(self.ln(h)).view(h.shape[0], self.chunk, self.out_dim)


class ConceptPolicy(nn.Module):
    def __init__(self, modalities: Sequence[ModalitySpec], action_dim: int, concept_dim: int,
                 task_ids: Sequence[str], cfg: PolicyConfig, action_scale: np.ndarray | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.modalities = list(modalities)
        self.action_dim = action_dim
        self.concept_dim = concept_dim
        self.task_ids = list(task_ids)
        self._task_index = {t: i for i, t in enumerate(self.task_ids)}
        obs_dim = sum(m.dim for m in modalities)
        self.task_embed = nn.Embedding(len(self.task_ids), cfg.task_embed_dim)
        self.inp = nn.Linear(cfg.obs_window * obs_dim + cfg.task_embed_dim, cfg.width)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.width) for _ in range(cfg.depth))
        self.action_head = Head(cfg.width, cfg.chunk, action_dim)
        # built last so the rest of the network initializes identically for every concept_layer
        self.concept_head = Head(cfg.width, cfg.chunk, concept_dim)
        scale = np.ones(action_dim) if action_scale is None else np.asarray(action_scale)
        self.register_buffer("action_scale", torch.as_tensor(scale, dtype=torch.float32))

    def task_index(self, task_ids: Iterable[str]) -> torch.Tensor:
        out = []
        for t in task_ids:
            if t not in self._task_index:
                raise ValidationError(f"unknown task id {t!r}")
            out.append(self._task_index[t])
        return torch.as_tensor(out, dtype=torch.long)

    def forward(self, obs: torch.Tensor, task: torch.Tensor):
        """``obs``: (B, obs_window * obs_dim); ``task``: (B,) task indices.

        Returns normalized action chunk, concept chunk and the final hidden state.
        """
        h = self.inp(torch.cat([obs, self.task_embed(task).to(obs.dtype)], dim=-1))
        concept_h = None
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i == self.cfg.concept_layer:
                concept_h = h
        return self.action_head(h), self.concept_head(concept_h), h


def policy_forward(policy: ConceptPolicy, obs_window: np.ndarray, task_id: str):
    """Single-sample forward; returns (actions in env units, concepts, hidden)."""
    dt = next(policy.parameters()).dtype
    task = policy.task_index([task_id])
    with torch.no_grad():
        a, z, h = policy(torch.as_tensor(obs_window, dtype=dt).reshape(1, -1), task)
    return (a[0] * policy.action_scale.to(dt)).numpy(), z[0].numpy(), h[0].numpy()


def policy_loss(pred_actions, gt_actions, pred_concepts, gt_concepts, lambda_mc: float):
    """Mean per-step action error norm plus ``lambda_mc`` times the concept error norm."""
    act = torch.linalg.vector_norm(pred_actions - gt_actions, dim=-1).mean()
    con = torch.linalg.vector_norm(pred_concepts - gt_concepts, dim=-1).mean()
    loss = act.double() + lambda_mc * con.double()
    return loss, {"loss": float(loss.detach()), "loss_action": float(act.detach()), "loss_concept": float(con.detach())}


# ---------------------------------------------------------------- data


def flat_obs(dataset: Dataset, demo_index: int) -> np.ndarray:
    """(T, obs_dim) concatenation of all modalities."""
    return np.concatenate(dataset.demos[demo_index].obs, axis=1)


def obs_history(frames: np.ndarray, t: int, window: int) -> np.ndarray:
    """Frames t-window+1..t (1-indexed), repeating frame 1 before the start, flattened."""
    idx = np.maximum(np.arange(t - window, t), 0)
    return frames[idx].reshape(-1)


def chunk_rows(t: int, T: int, chunk: int) -> np.ndarray:
    """0-based rows for steps t..t+chunk-1, clamped to the final step."""
    return np.minimum(np.arange(t - 1, t - 1 + chunk), T - 1)


def build_policy_data(dataset: Dataset, concept_labels: Sequence[np.ndarray] | None, cfg: PolicyConfig):
    obs, tasks, acts, cons = [], [], [], []
    for i, demo in enumerate(dataset.demos):
        T = demo.length
        frames = flat_obs(dataset, i)
        for t in range(1, T + 1):
            rows = chunk_rows(t, T, cfg.chunk)
            obs.append(obs_history(frames, t, cfg.obs_window))
            tasks.append(demo.task_id)
            acts.append(demo.actions[rows])
            if concept_labels is not None:
                cons.append(concept_labels[i][rows])
    return (np.stack(obs).astype(np.float32), tasks, np.stack(acts).astype(np.float32),
            None if concept_labels is None else np.stack(cons).astype(np.float32))


def check_labels(dataset: Dataset, concept_labels: Sequence[np.ndarray]) -> int:
    if len(concept_labels) != len(dataset.demos):
        raise ValidationError(f"{len(concept_labels)} label arrays for {len(dataset.demos)} demos")
    dims = set()
    for i, (demo, lab) in enumerate(zip(dataset.demos, concept_labels)):
        if lab.ndim != 2 or lab.shape[0] != demo.length:
            raise ValidationError(f"demo {i}: labels have shape {lab.shape}, demo length is {demo.length}")
        dims.add(lab.shape[1])
    if len(dims) != 1:
        raise ValidationError(f"inconsistent concept dims {sorted(dims)}")
    return dims.pop()


@dataclass
class PolicyResult:
    policy: ConceptPolicy
    bundle: CheckpointBundle
    metrics: list[dict]


def policy_fingerprint(modalities, policy_cfg: PolicyConfig, train_cfg: TrainConfig, concept_dim: int) -> str:
    return fingerprint({"modalities": [m.to_dict() for m in modalities], "policy": policy_cfg.to_dict(),
                        "train": train_cfg.to_dict(), "concept_dim": concept_dim})


def train_policy(dataset: Dataset, concept_labels: Sequence[np.ndarray], policy_cfg: PolicyConfig,
                 train_cfg: TrainConfig, task_ids: Sequence[str] | None = None) -> PolicyResult:
    policy_cfg.validate()
    concept_dim = check_labels(dataset, concept_labels)
    task_ids = sorted(task_ids) if task_ids is not None else dataset.task_ids
    obs, tasks, acts, cons = build_policy_data(dataset, concept_labels, policy_cfg)
    scale = np.maximum(np.abs(acts).reshape(-1, dataset.action_dim).max(axis=0), 1e-6)

    torch.manual_seed(train_cfg.seed)
    policy = ConceptPolicy(dataset.modalities, dataset.action_dim, concept_dim, task_ids, policy_cfg, scale)
    optimizer = make_optimizer(policy.parameters(), train_cfg)
    rng = np.random.default_rng(train_cfg.seed)

    obs_t = torch.as_tensor(obs)
    task_t = policy.task_index(tasks)
    acts_t = torch.as_tensor(acts) / policy.action_scale
    cons_t = torch.as_tensor(cons)
    metrics = []
    policy.train()
    for it in range(train_cfg.iterations):
        lr = lr_at(it, train_cfg)
        for g in optimizer.param_groups:
            g["lr"] = lr
        idx = torch.as_tensor(rng.integers(0, len(obs), size=train_cfg.batch_size), dtype=torch.long)
        pa, pz, _ = policy(obs_t[idx], task_t[idx])
        loss, parts = policy_loss(pa, acts_t[idx], pz, cons_t[idx], policy_cfg.lambda_mc)
        if not math.isfinite(parts["loss"]):
            raise NumericError(f"non-finite policy loss at iteration {it + 1}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        metrics.append({"iteration": it + 1, **parts, "lr": lr})
    policy.eval()
    meta = {"kind": "policy", "modalities": [m.to_dict() for m in dataset.modalities], "action_dim": dataset.action_dim,
            "concept_dim": concept_dim, "task_ids": task_ids, "policy": policy_cfg.to_dict(), "train": train_cfg.to_dict()}
    fp = policy_fingerprint(dataset.modalities, policy_cfg, train_cfg, concept_dim)
    bundle = capture(policy, optimizer, iteration=train_cfg.iterations, fingerprint=fp, rng=rng, meta=meta)
    return PolicyResult(policy, bundle, metrics)


def policy_from_bundle(bundle: CheckpointBundle) -> ConceptPolicy:
    m = bundle.meta
    policy = ConceptPolicy([ModalitySpec(**d) for d in m["modalities"]], m["action_dim"], m["concept_dim"],
                           m["task_ids"], PolicyConfig(**m["policy"]))
    restore(bundle, policy)
    policy.eval()
    return policy


# ---------------------------------------------------------------- rollouts


class ExpertAgent:
    def reset(self, state):
        pass

    def act(self, state, obs):
        return envlib.expert_policy(state)


class RandomAgent:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reset(self, state):
        pass

    def act(self, state, obs):
        lim = state.spec.max_step * state.spec.arena_size
        return np.array([self.rng.uniform(-lim, lim), self.rng.uniform(-lim, lim),
                         self.rng.uniform(-envlib.GRIP_RATE, envlib.GRIP_RATE)])


class PolicyAgent:
    """Re-plans every step and executes the first action of the predicted chunk."""

    def __init__(self, policy: ConceptPolicy):
        self.policy = policy
        self.history: list[np.ndarray] = []

    def reset(self, state):
        self.history = []

    def act(self, state, obs):
        self.history.append(np.concatenate(obs))
        frames = np.stack(self.history)
        window = obs_history(frames, len(frames), self.policy.cfg.obs_window)
        actions, _, _ = policy_forward(self.policy, window, state.task_id)
        return actions[0]


def split_spec(env_spec: envlib.EnvSpec, split: str) -> envlib.EnvSpec:
    family = {"train-layout": "single-place", "novel-layout": "novel-layout", "two-stage": "two-stage"}
    if split not in family:
        raise ValidationError(f"unknown split {split!r}")
    return replace(env_spec, family=family[split])


@dataclass
class EvalResult:
    success: dict[str, float]
    episodes: list[dict] = field(default_factory=list)


def evaluate_policy(agent, env_spec: envlib.EnvSpec, n_episodes: int, seed: int,
                    splits: Sequence[str] = SPLITS) -> EvalResult:
    """Success rate per split; episode seeds never overlap demonstration seeds."""
    rates, episodes = {}, []
    for s_idx, split in enumerate(splits):
        spec = split_spec(env_spec, split)
        wins = 0
        for i in range(n_episodes):
            es = int(np.random.SeedSequence([int(seed), 0xE7A1, s_idx, i]).generate_state(1)[0])
            state = envlib.reset(spec, es)
            obs_rng = np.random.default_rng([es, 2])
            agent.reset(state)
            done = success = False
            while not done:
                action = agent.act(state, envlib.observe(state, obs_rng))
                state, done, success = envlib.step(state, np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0))
            wins += success
            episodes.append({"split": split, "episode": i, "seed": es, "task_id": state.task_id,
                             "success": bool(success), "steps": state.step_count})
        rates[split] = wins / n_episodes
    return EvalResult(rates, episodes)


# ---------------------------------------------------------------- sweep


def success_stderr(rates: Sequence[float], n_episodes: int) -> float:
    """Across-seed standard error, or the binomial one for a single seed."""
    r = np.asarray(rates, dtype=np.float64)
    if len(r) > 1:
        return float(r.std(ddof=1) / np.sqrt(len(r)))
    p = float(r[0])
    return math.sqrt(p * (1 - p) / n_episodes)


def sweep_policy(dataset: Dataset, concept_labels, env_spec: envlib.EnvSpec, base_cfg: PolicyConfig,
                 train_cfg: TrainConfig, lambdas: Sequence[float], layers: Sequence[int], seeds: Sequence[int],
                 n_episodes: int, splits: Sequence[str] = SPLITS) -> list[dict]:
    """Grid over (concept_layer, lambda_mc); one row per grid cell and split."""
    task_ids = envlib.all_task_ids(env_spec)
    rows = []
    for L in layers:
        for lam in lambdas:
            per_seed: dict[str, list[float]] = {s: [] for s in splits}
            for seed in seeds:
                cfg = replace(base_cfg, concept_layer=L, lambda_mc=lam)
                res = train_policy(dataset, concept_labels, cfg, replace(train_cfg, seed=seed), task_ids)
                ev = evaluate_policy(PolicyAgent(res.policy), env_spec, n_episodes, seed, splits)
                for s in splits:
                    per_seed[s].append(ev.success[s])
                log.info("sweep L=%d lambda_mc=%g seed=%d: %s", L, lam, seed, ev.success)
            for s in splits:
                rows.append({"L": L, "lambda_mc": lam, "split": s, "success_rate": float(np.mean(per_seed[s])),
                             "stderr": success_stderr(per_seed[s], n_episodes),
                             "seeds": " ".join(str(x) for x in seeds)})
    return rows


SWEEP_FIELDS = ("L", "lambda_mc", "split", "success_rate", "stderr", "seeds")


def write_rows_csv(rows: Sequence[dict], path: str | os.PathLike, fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})
