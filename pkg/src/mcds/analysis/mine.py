"""Mutual information by neural estimation, and conditional MI by decomposition.

Each MI term trains a small statistics network T(a, b) to maximize the
Donsker-Varadhan bound E_joint[T] - log E_marginal[exp T], where the
marginal is formed by shuffling b. The bound is evaluated on a held-out
split so that an overfit network cannot inflate the estimate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..errors import ValidationError

log = logging.getLogger(__name__)

MIN_SAMPLES = 1000


@dataclass
class MINEConfig:
    hidden_mult: float = 1.5
    iterations: int = 2000
    batch_size: int = 4096
    lr: float = 1e-2
    ema: float = 0.01
    holdout: float = 0.3
    eval_shuffles: int = 8
    restarts: int = 3
    candidates: int = 3  # inits per restart; the best final training bound is kept
    seed: int = 0

    def to_dict(self):
        return asdict(self)


class StatNet(nn.Module):
    """Two-layer statistics network on the concatenated pair."""

    def __init__(self, in_dim: int, hidden_mult: float):
        super().__init__()
        h = hidden_size(in_dim, hidden_mult)
        self.net = nn.Sequential(nn.Linear(in_dim, h), nn.Tanh(), nn.Linear(h, 1))

    def forward(self, a, b):
        return self.net(torch.cat([a, b], dim=-1)).squeeze(-1)


def hidden_size(in_dim: int, hidden_mult: float) -> int:
    return max(1, math.ceil(hidden_mult * in_dim))


class StatNetBank(nn.Module):
    """Many independent :class:`StatNet` instances evaluated with one batched matmul.

    Net k sees its own term's inputs, zero-padded to a shared width; its
    padded hidden units are switched off by a fixed mask, so each net
    behaves exactly like an unpadded one of its own size.
    """

    def __init__(self, dims_a: list[int], dims_b: list[int], hidden_mult: float, gen: torch.Generator):
        super().__init__()
        K = len(dims_a)
        self.da, self.db = max(dims_a), max(dims_b)
        hs = [hidden_size(a + b, hidden_mult) for a, b in zip(dims_a, dims_b)]
        H = max(hs)
        w1 = torch.zeros(K, self.da + self.db, H)
        b1 = torch.zeros(K, 1, H)
        w2 = torch.zeros(K, H, 1)
        b2 = torch.zeros(K, 1, 1)
        mask = torch.zeros(K, 1, H)
        for k, (a, b, h) in enumerate(zip(dims_a, dims_b, hs)):
            # nn.Linear's default init bounds: 1/sqrt(fan_in)
            rows = list(range(a)) + list(range(self.da, self.da + b))
            u1, u2 = 1 / math.sqrt(a + b), 1 / math.sqrt(h)
            w1[k, rows, :h] = (torch.rand(a + b, h, generator=gen) * 2 - 1) * u1
            b1[k, 0, :h] = (torch.rand(h, generator=gen) * 2 - 1) * u1
            w2[k, :h, 0] = (torch.rand(h, generator=gen) * 2 - 1) * u2
            b2[k, 0, 0] = (torch.rand(1, generator=gen) * 2 - 1) * u2
            mask[k, 0, :h] = 1.0
        self.w1, self.b1, self.w2, self.b2 = (nn.Parameter(t) for t in (w1, b1, w2, b2))
        self.register_buffer("mask", mask)

    def forward(self, a, b):
        """``a``: (K, n, da), ``b``: (K, n, db) -> (K, n)."""
        h = torch.tanh(torch.baddbmm(self.b1, torch.cat([a, b], dim=-1), self.w1)) * self.mask
        return torch.baddbmm(self.b2, h, self.w2).squeeze(-1)


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    keep = sd > 0
    return (x[:, keep] - x[:, keep].mean(axis=0)) / sd[keep]


def is_degenerate(x: np.ndarray) -> bool:
    return bool(np.all(_as_2d(x).std(axis=0) == 0))


def _logmeanexp(t: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.logsumexp(t, dim) - math.log(t.shape[dim])


def _pad(x: np.ndarray, width: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, width - x.shape[1])))


def mine_terms(pairs: list[tuple[np.ndarray, np.ndarray]], cfg: MINEConfig) -> np.ndarray:
    """Held-out Donsker-Varadhan estimates, shape (len(pairs), restarts).

    Within a restart every term uses the same train/test split and the same
    minibatch and shuffle indices; restarts differ in split, draws and init.
    """
    pairs = [(_standardize(_as_2d(a)), _standardize(_as_2d(b))) for a, b in pairs]
    n = len(pairs[0][0])
    if any(len(a) != n or len(b) != n for a, b in pairs):
        raise ValidationError("sample arrays are not aligned")
    P, R = len(pairs), cfg.restarts
    da, db = max(a.shape[1] for a, _ in pairs), max(b.shape[1] for _, b in pairs)
    A = torch.as_tensor(np.stack([_pad(a, da) for a, _ in pairs]), dtype=torch.float32)  # (P, n, da)
    B = torch.as_tensor(np.stack([_pad(b, db) for _, b in pairs]), dtype=torch.float32)

    n_test = max(2, int(round(cfg.holdout * n)))
    bs = min(cfg.batch_size, n - n_test)
    rngs = [np.random.default_rng([cfg.seed, r, 0x1E]) for r in range(R)]
    splits = [rng.permutation(n) for rng in rngs]
    test = np.stack([s[:n_test] for s in splits])  # (R, n_test)
    train = [s[n_test:] for s in splits]
    draws = np.stack([tr[rng.integers(0, len(tr), size=(cfg.iterations, 2, bs))] for tr, rng in zip(train, rngs)], axis=1)
    draws = torch.as_tensor(draws)  # (iterations, R, 2, bs)

    C = cfg.candidates
    gen = torch.Generator().manual_seed(int(rngs[0].integers(2 ** 31)))
    # net k = (p * R + r) * C + c: term p, restart r, candidate init c
    K = P * R * C
    term = torch.arange(P).repeat_interleave(R * C)[:, None]
    rep = torch.arange(R).repeat_interleave(C).repeat(P)
    bank = StatNetBank([pairs[k // (R * C)][0].shape[1] for k in range(K)],
                       [pairs[k // (R * C)][1].shape[1] for k in range(K)], cfg.hidden_mult, gen)
    opt = torch.optim.Adam(bank.parameters(), lr=cfg.lr)
    ma = None
    for it, step in enumerate(draws):
        for g in opt.param_groups:
            g["lr"] = cfg.lr * 0.5 * (1 + math.cos(math.pi * it / cfg.iterations))
        idx, shuf = step[rep, 0], step[rep, 1]  # (K, bs)
        a = A[term, idx]
        joint = bank(a, B[term, idx]).mean(dim=1)
        et = torch.exp(bank(a, B[term, shuf]))
        m = et.mean(dim=1).detach()
        ma = m if ma is None else (1 - cfg.ema) * ma + cfg.ema * m
        # gradient of log E[exp T] with the denominator replaced by its running mean
        loss = -(joint - et.mean(dim=1) / ma).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()

    with torch.no_grad():
        # pick a candidate per (term, restart) by the bound on its own training split
        a, b = A[term, idx], B[term, idx]
        fit = (bank(a, b).mean(dim=1) - _logmeanexp(bank(a, B[term, shuf]), 1)).view(P * R, C)
        best = torch.arange(P * R) * C + fit.argmax(dim=1)
        tidx = torch.as_tensor(test)[rep]
        a, b = A[term, tidx], B[term, tidx]
        joint = bank(a, b).mean(dim=1)
        vals = []
        for _ in range(cfg.eval_shuffles):
            perm = torch.as_tensor(np.stack([rng.permutation(n_test) for rng in rngs]))[rep]
            vals.append(joint - _logmeanexp(bank(a, torch.gather(b, 1, perm[..., None].expand_as(b))), 1))
        est = torch.stack(vals).mean(dim=0)[best]
    return est.double().numpy().reshape(P, R)


@dataclass
class MIResult:
    mean: float
    std: float
    restarts: list[float] = field(default_factory=list)
    degenerate: bool = False


def _result(vals) -> MIResult:
    vals = [float(v) for v in vals]
    return MIResult(float(np.mean(vals)), float(np.std(vals)), vals)


def _degenerate(cfg: MINEConfig, tag: str) -> MIResult:
    log.warning("MI term %s involves a constant variable; reporting 0", tag)
    return MIResult(0.0, 0.0, [0.0] * cfg.restarts, degenerate=True)


def estimate_mi(a, b, cfg: MINEConfig | None = None, tag: str = "I(A:B)") -> MIResult:
    cfg = cfg or MINEConfig()
    if is_degenerate(a) or is_degenerate(b):
        return _degenerate(cfg, tag)
    return _result(mine_terms([(a, b)], cfg)[0])


@dataclass
class CMIResult:
    cmi: float
    std: float
    terms: dict[str, MIResult]

    def to_dict(self) -> dict:
        return {"cmi": self.cmi, "std": self.std,
                "terms": {k: {"mean": v.mean, "std": v.std, "restarts": v.restarts, "degenerate": v.degenerate}
                          for k, v in self.terms.items()}}


TERMS = ("I(X:Y)", "I(XY:Z)", "I(X:Z)", "I(Y:Z)")
SIGNS = (1, 1, -1, -1)


def estimate_cmi(x, y, z, cfg: MINEConfig | None = None) -> CMIResult:
    """I(X:Y|Z) = I(X:Y) + I(XY:Z) - I(X:Z) - I(Y:Z), each term estimated separately.

    The reported spread is the std over restarts of the per-restart sum.
    """
    return estimate_cmi_many([(x, y, z)], cfg)[0]


def estimate_cmi_many(triples, cfg: MINEConfig | None = None) -> list[CMIResult]:
    """Several conditional-MI problems over the same sample count, trained as one batch."""
    cfg = cfg or MINEConfig()
    pairs, where = [], []
    for i, (x, y, z) in enumerate(triples):
        x, y, z = _as_2d(x), _as_2d(y), _as_2d(z)
        if not len(x) == len(y) == len(z):
            raise ValidationError("x, y, z must hold the same number of samples")
        if len(x) < MIN_SAMPLES:
            raise ValidationError(f"need at least {MIN_SAMPLES} samples, got {len(x)}")
        spec = ((x, y), (np.concatenate([x, y], axis=1), z), (x, z), (y, z))
        for name, (a, b) in zip(TERMS, spec):
            if not (is_degenerate(a) or is_degenerate(b)):
                pairs.append((a, b))
                where.append((i, name))
    n = {len(a) for a, _ in pairs}
    if len(n) > 1:
        raise ValidationError("all triples in one batch must share the sample count")
    est = mine_terms(pairs, cfg) if pairs else np.zeros((0, cfg.restarts))
    found = {w: est[k] for k, w in enumerate(where)}
    out = []
    for i in range(len(triples)):
        terms = {name: _result(found[(i, name)]) if (i, name) in found else _degenerate(cfg, name) for name in TERMS}
        per_restart = np.sum([s * np.asarray(terms[k].restarts) for k, s in zip(TERMS, SIGNS)], axis=0)
        out.append(CMIResult(float(per_restart.mean()), float(per_restart.std()), terms))
    return out


def gaussian_cmi(cov: np.ndarray, ix, iy, iz) -> float:
    """Closed-form I(X:Y|Z) in nats for a jointly Gaussian vector."""
    cov = np.asarray(cov, dtype=np.float64)

    def logdet(idx):
        idx = list(idx)
        return np.linalg.slogdet(cov[np.ix_(idx, idx)])[1]

    ix, iy, iz = list(ix), list(iy), list(iz)
    return 0.5 * (logdet(ix + iz) + logdet(iy + iz) - logdet(iz) - logdet(ix + iy + iz))
