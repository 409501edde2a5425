"""Coarse-to-fine segmentations of concept sequences across coherence thresholds."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ValidationError
from ..mhfp import derive_subprocesses

BOUNDARY_TOLERANCE = 2


def dominates(coarse: Sequence[int], fine: Sequence[int]) -> bool:
    """The k-th start of the coarse split is never earlier than the k-th start of the fine one."""
    return len(coarse) <= len(fine) and all(c >= f for c, f in zip(coarse, fine))


def interior(starts: Sequence[int]) -> list[int]:
    return [s for s in starts if s > 1]


def match_counts(pred: Sequence[int], gt: Sequence[int], tol: int = BOUNDARY_TOLERANCE) -> tuple[int, int]:
    """(gt boundaries with a prediction within tol, predictions with a gt boundary within tol)."""
    p, g = np.asarray(pred), np.asarray(gt)
    if len(p) == 0 or len(g) == 0:
        return 0, 0
    close = np.abs(p[:, None] - g[None, :]) <= tol
    return int(close.any(axis=0).sum()), int(close.any(axis=1).sum())


def boundary_agreement(pred_by_eps: dict[float, list[list[int]]], gt: list[list[int]],
                       tol: int = BOUNDARY_TOLERANCE) -> dict:
    """Pooled precision/recall/F1 per epsilon; the score is recall at the best-F1 epsilon.

    Recall alone would always favour epsilon = 0 (a boundary at every step),
    so the threshold is picked by F1 and recall is read off there.
    """
    rows = []
    n_gt = sum(len(g) for g in gt)
    for eps, preds in pred_by_eps.items():
        hit_gt = hit_pred = n_pred = 0
        for p, g in zip(preds, gt):
            a, b = match_counts(p, g, tol)
            hit_gt, hit_pred, n_pred = hit_gt + a, hit_pred + b, n_pred + len(p)
        recall = hit_gt / n_gt if n_gt else 1.0
        precision = hit_pred / n_pred if n_pred else (1.0 if n_gt == 0 else 0.0)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        rows.append({"eps": eps, "precision": precision, "recall": recall, "f1": f1})
    best = max(rows, key=lambda r: (r["f1"], -r["eps"]))
    return {"tolerance": tol, "per_eps": rows, "best_eps": best["eps"], "score": best["recall"]}


def hierarchy_report(concept_labels: Sequence[np.ndarray], eps_list: Sequence[float],
                     gt_segments: Sequence | None = None, out_dir: str | os.PathLike | None = None,
                     max_plots: int = 4) -> dict:
    eps_list = [float(e) for e in eps_list]
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise ValidationError("eps_list must be sorted ascending")
    demos, violations = [], 0
    pred_by_eps: dict[float, list[list[int]]] = {e: [] for e in eps_list}
    for i, lab in enumerate(concept_labels):
        segs = [derive_subprocesses(lab, e) for e in eps_list]
        rows = [{"eps": e, "K": s.K, "starts": s.starts} for e, s in zip(eps_list, segs)]
        dom = all(dominates(b.starts, a.starts) for a, b in zip(segs, segs[1:]))
        mono = all(b.K <= a.K for a, b in zip(segs, segs[1:]))
        violations += (not dom) + (not mono)
        demos.append({"demo": i, "T": len(lab), "rows": rows, "dominance_ok": dom, "k_nonincreasing": mono})
        for e, s in zip(eps_list, segs):
            pred_by_eps[e].append(interior(s.starts))
    report = {"eps": eps_list, "demos": demos, "violations": violations}
    if gt_segments is not None and any(g is not None for g in gt_segments):
        keep = [j for j, g in enumerate(gt_segments) if g is not None]
        gt = [interior([a for _, a, _ in gt_segments[j]]) for j in keep]
        report["agreement"] = boundary_agreement({e: [pred_by_eps[e][j] for j in keep] for e in eps_list}, gt)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "hierarchy.json").write_text(json.dumps(report, indent=1))
        for d in demos[:max_plots]:
            gt = None if gt_segments is None else gt_segments[d["demo"]]
            plot_timeline(d, gt, out / f"hierarchy_demo{d['demo']}.png")
    return report


def plot_timeline(demo_report: dict, gt_segments, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = list(reversed(demo_report["rows"]))  # coarsest on top
    T = demo_report["T"]
    n = len(rows) + (gt_segments is not None)
    fig, ax = plt.subplots(figsize=(8, 0.35 * n + 1))
    cmap = plt.get_cmap("tab20")
    for r, row in enumerate(rows):
        ends = row["starts"][1:] + [T + 1]
        for k, (a, b) in enumerate(zip(row["starts"], ends)):
            ax.barh(r, b - a, left=a, color=cmap(k % 20), edgecolor="k", linewidth=0.3)
    labels = [f"eps={row['eps']:.2f}" for row in rows]
    if gt_segments is not None:
        names = sorted({s[0] for s in gt_segments})
        for name, a, b in gt_segments:
            ax.barh(len(rows), b - a, left=a, color=cmap(names.index(name) * 2 % 20), edgecolor="k", linewidth=0.3)
        labels.append("gt")
    ax.set_yticks(range(n))
    ax.set_yticklabels(labels)
    ax.invert_yaxis()
    ax.set_xlim(1, T + 1)
    ax.set_xlabel("timestep")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
