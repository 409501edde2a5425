"""Concept diversity as the number of density clusters across radii."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.cluster import DBSCAN

from ..errors import ValidationError


def diversity_sweep(latents, eps_grid: Sequence[float]) -> list[dict]:
    """Cluster counts per radius with min-points 1, so every point lands in a cluster.

    With a single required point, clusters are the connected components of
    the graph linking points at Euclidean distance <= eps.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValidationError("latents must be a non-empty (n, D) array")
    if not np.allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-4):
        raise ValidationError("latents must be unit-norm")
    rows = []
    for eps in eps_grid:
        if not 0 < eps <= 1:
            raise ValidationError(f"eps={eps} outside (0, 1]")
        labels = DBSCAN(eps=float(eps), min_samples=1).fit(x).labels_
        rows.append({"eps": float(eps), "clusters": int(len(np.unique(labels)))})
    return rows
