"""Predicted sub-process goals next to the observations that actually ended each sub-process."""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..dataset import Demonstration, labeling_window, window_frames
from ..env import EnvSpec, decode_scene
from ..mhfp import derive_subprocesses, terminal_indices


def default_timesteps(T: int, n: int = 5) -> list[int]:
    return sorted({int(t) for t in np.linspace(1, T, min(n, T)).round()})


@torch.no_grad()
def goal_gallery(model, demo: Demonstration, eps_list: Sequence[float], timesteps: Sequence[int] | None = None) -> list[dict]:
    """One row per (epsilon, timestep).

    The window feeding timestep t is the one the labeler uses. Within it the
    latents are segmented at epsilon and the predictor's output at t's
    position is compared against the frame at the terminal index.
    """
    model.eval()
    tc = model.cfg.encoder.t_context
    T = demo.length
    timesteps = default_timesteps(T) if timesteps is None else list(timesteps)
    dt = next(model.parameters()).dtype
    rows = []
    for eps in eps_list:
        for t in timesteps:
            w, off = labeling_window(T, tc, t)
            frames = [torch.as_tensor(f, dtype=dt).unsqueeze(0) for f in window_frames(demo, w)]
            z = model.encoder(frames)
            term_w = terminal_indices(derive_subprocesses(z[0].double().numpy(), eps))[off]
            terminal = min(T, w.start + int(term_w) - 1)
            preds = model.mhfp(frames, z, torch.full((1,), float(eps), dtype=dt))
            pred = [p[0, off].numpy().astype(np.float64) for p in preds]
            true = [o[terminal - 1].astype(np.float64) for o in demo.obs]
            errs = [float(np.linalg.norm(p - q, ord=2 if m.recon_norm == "L2" else 1))
                    for p, q, m in zip(pred, true, model.modalities)]
            rows.append({"eps": float(eps), "t": t, "terminal": terminal, "error": float(sum(errs)),
                         "pred": pred, "true": true})
    return rows


def gallery_error(rows: Sequence[dict]) -> float:
    return float(np.mean([r["error"] for r in rows]))


def write_gallery(rows: Sequence[dict], modalities, out_dir: str | os.PathLike,
                  env_spec: EnvSpec | None = None, tag: str = "gallery") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["eps", "t", "terminal", "error"]
    for kind in ("pred", "true"):
        for m in modalities:
            cols += [f"{kind}_{m.name}_{k}" for k in range(m.dim)]
    with open(out / f"{tag}.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            vals = [r["eps"], r["t"], r["terminal"], r["error"]]
            for kind in ("pred", "true"):
                for v in r[kind]:
                    vals += [float(x) for x in v]
            w.writerow(vals)
    if env_spec is not None and modalities[0].name == "scene":
        plot_gallery(rows, env_spec, out / f"{tag}.png")


def plot_gallery(rows: Sequence[dict], env_spec: EnvSpec, path) -> None:
    """Arena sketches: true terminal layout (filled) against the predicted one (hollow)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    eps_vals = sorted({r["eps"] for r in rows})
    ts = sorted({r["t"] for r in rows})
    fig, axes = plt.subplots(len(eps_vals), len(ts), figsize=(2 * len(ts), 2 * len(eps_vals)), squeeze=False)
    colors = plt.get_cmap("tab10")
    for r in rows:
        ax = axes[eps_vals.index(r["eps"])][ts.index(r["t"])]
        true, pred = decode_scene(r["true"][0], env_spec), decode_scene(r["pred"][0], env_spec)
        for g in true["goals"]:
            ax.add_patch(plt.Circle(g, env_spec.goal_radius / env_spec.arena_size, color="0.85"))
        for k, (o, p) in enumerate(zip(true["objects"], pred["objects"])):
            ax.plot(*o, "s", color=colors(k), ms=6)
            ax.plot(*p, "s", mfc="none", color=colors(k), ms=6)
        ax.plot(*true["gripper"], "k+", ms=8)
        ax.plot(*pred["gripper"], "kx", ms=6)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(f"eps={r['eps']:.2f} t={r['t']}->{r['terminal']}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=90)
    plt.close(fig)
