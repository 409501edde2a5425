"""Batch studies over trained concept models and their dataset labels."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .diversity import diversity_sweep
from .gallery import gallery_error, goal_gallery, write_gallery
from .hierarchy import hierarchy_report
from .mine import MINEConfig, estimate_cmi, estimate_cmi_many
from .similarity import ConceptGroup, class_similarity, diagonal_fraction, group_by_motion, groups_from_segments


def modality_cmi(dataset, concept_labels: Sequence[np.ndarray], n_samples: int, cfg: MINEConfig,
                 seed: int = 0) -> dict:
    """I(o_a : o_b | z) for every pair of modalities on a random subset of timesteps."""
    rng = np.random.default_rng([seed, 0xC41])
    obs = [np.concatenate([d.obs[m] for d in dataset.demos]) for m in range(len(dataset.modalities))]
    z = np.concatenate(list(concept_labels))
    idx = rng.choice(len(z), size=min(n_samples, len(z)), replace=False)
    names = [m.name for m in dataset.modalities]
    pairs = [(i, j) for i in range(len(names)) for j in range(i + 1, len(names))]
    res = estimate_cmi_many([(obs[i][idx], obs[j][idx], z[idx]) for i, j in pairs], cfg)
    out = {f"{names[i]}|{names[j]}": r.to_dict() for (i, j), r in zip(pairs, res)}
    return {"pairs": out, "mean": float(np.mean([r.cmi for r in res])), "n_samples": int(len(idx))}


def _write_matrix(path: Path, labels, mat) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([""] + list(labels))
        for lab, row in zip(labels, mat):
            w.writerow([lab] + [f"{v:.6f}" for v in row])


def _heatmap(path: Path, labels, mat, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(labels), 0.8 + 0.6 * len(labels)))
    im = ax.imshow(mat, cmap="viridis")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_yticks(range(len(labels)))
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_title(title, fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def run_analyses(which: Sequence[str], dataset, concept_labels, model, acfg, env_spec, out_dir) -> dict:
    out = Path(out_dir)
    summary: dict = {}
    if "similarity" in which:
        summary["similarity"] = {}
        for name, fn in (("segments", groups_from_segments), ("motion", group_by_motion)):
            groups = fn(dataset, concept_labels)
            sim = class_similarity(groups)
            labels = [g.label for g in groups]
            _write_matrix(out / f"similarity_{name}.csv", labels, sim)
            _heatmap(out / f"similarity_{name}.png", labels, sim, f"group similarity ({name})")
            summary["similarity"][name] = {"labels": labels, "diagonal_fraction": diagonal_fraction(sim),
                                           "sizes": [len(g.members) for g in groups]}
    if "hierarchy" in which:
        rep = hierarchy_report(concept_labels, acfg.hierarchy_eps, [d.gt_segments for d in dataset.demos],
                               out / "hierarchy")
        summary["hierarchy"] = {"violations": rep["violations"], "agreement": rep.get("agreement")}
    if "diversity" in which:
        z = np.concatenate(list(concept_labels)).astype(np.float64)
        rng = np.random.default_rng([acfg.mine.seed, 0xD17])
        z = z[rng.choice(len(z), size=min(acfg.diversity_samples, len(z)), replace=False)]
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        rows = diversity_sweep(z, acfg.diversity_eps)
        with open(out / "diversity.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["eps", "clusters"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        summary["diversity"] = rows
    if "gallery" in which:
        rows = goal_gallery(model, dataset.demos[acfg.gallery_demo], acfg.gallery_eps)
        write_gallery(rows, model.modalities, out / "gallery", env_spec)
        summary["gallery"] = {"mean_error": gallery_error(rows), "rows": len(rows)}
    if "cmi" in which:
        res = modality_cmi(dataset, concept_labels, acfg.cmi_samples, acfg.mine, acfg.mine.seed)
        (out / "cmi.json").write_text(json.dumps(res, indent=1))
        summary["cmi"] = {"mean": res["mean"], "pairs": {k: v["cmi"] for k, v in res["pairs"].items()}}
    return summary


__all__ = [
    "ConceptGroup", "class_similarity", "diagonal_fraction", "group_by_motion", "groups_from_segments",
    "MINEConfig", "estimate_cmi", "estimate_cmi_many", "modality_cmi",
    "diversity_sweep", "hierarchy_report", "goal_gallery", "run_analyses",
]
