"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def sphere_dist(a, b) -> float:
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    c = sum(x * y for x, y in zip(a, b)) / (na * nb)
    return math.acos(max(-1.0, min(1.0, c))) / math.pi


def oracle_distances(z) -> np.ndarray:
    """Pairwise arccos(cos similarity) / pi, computed the textbook way."""
    z = np.asarray(z, dtype=np.float64)
    u = z / np.linalg.norm(z, axis=1, keepdims=True)
    return np.arccos(np.clip(u @ u.T, -1.0, 1.0)) / np.pi


def brute_segments(z, eps, dist=None):
    """Each interval is the longest run from its start whose every pair is closer than eps.

    Every candidate extension re-checks the whole block of pairwise distances.
    """
    T = len(z)
    if dist is None:
        zz = [list(map(float, v)) for v in z]
        dist = np.array([[sphere_dist(a, b) for b in zz] for a in zz]) if T else np.zeros((0, 0))
    out, b = [], 1
    while b <= T:
        best = b + 1
        for e in range(b + 2, T + 2):  # candidate interval [b, e)
            block = dist[b - 1:e - 1, b - 1:e - 1]
            off = block[~np.eye(e - b, dtype=bool)]
            if np.all(off < eps):
                best = e
            else:
                break
        out.append((b, best))
        b = best
    return out


def brute_terminal(t, intervals, T):
    ends = [e for s, e in intervals if s <= t]
    return min(T, ends[-1])


def random_corpus(n, seed=0, max_T=50, dims=(2, 8, 64)):
    """Unit-latent sequences built as noisy random walks so segments of all sizes appear."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        T = int(rng.integers(1, max_T + 1))
        D = int(rng.choice(dims))
        step = rng.choice([0.05, 0.2, 0.6, 2.0])
        z = np.cumsum(rng.standard_normal((T, D)) * step, axis=0) + rng.standard_normal(D)
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        out.append(z)
    return out


EPS_GRID = [round(0.05 * i, 2) for i in range(21)]


def central_difference(f, params, coords, h=1e-6):
    """Central finite differences of scalar ``f()`` at selected (tensor index, flat index) coordinates."""
    import torch

    out = []
    with torch.no_grad():
        for pi, fi in coords:
            flat = params[pi].view(-1)
            old = flat[fi].item()
            flat[fi] = old + h
            up = f().item()
            flat[fi] = old - h
            down = f().item()
            flat[fi] = old
            out.append((up - down) / (2 * h))
    return np.array(out)
