import json
import warnings

import numpy as np
import pytest
import torch

from mcds.analysis import (ConceptGroup, class_similarity, diagonal_fraction, diversity_sweep, goal_gallery,
                           group_by_motion, groups_from_segments, hierarchy_report)
from mcds.analysis.gallery import write_gallery
from mcds.analysis.hierarchy import boundary_agreement, dominates, match_counts
from mcds.analysis.mine import (MINEConfig, StatNet, StatNetBank, estimate_cmi, estimate_cmi_many, estimate_mi,
                                gaussian_cmi)
from mcds.analysis.similarity import motion_classes
from mcds.errors import ValidationError
from mcds.labels import read_labels, write_labels
from mcds.trainer import build_model
from conftest import random_unit
from oracles import random_corpus

# I(X:Y|Z) for unit-variance (X, Y, Z) with corr(X,Y)=0.8, corr(X,Z)=corr(Y,Z)=0.5, via the partial
# correlation (0.8 - 0.25) / 0.75 and -log(1 - r^2) / 2, worked out by hand
GAUSS_COV = np.array([[1.0, 0.8, 0.5], [0.8, 1.0, 0.5], [0.5, 0.5, 1.0]])
GAUSS_CMI = 0.3858547515315239


# ---------------------------------------------------------------- similarity


def brute_similarity(groups):
    n = len(groups)
    out = np.zeros((n, n))
    for i, gi in enumerate(groups):
        for j, gj in enumerate(groups):
            tot = 0.0
            for a in gi.members:
                for b in gj.members:
                    tot += float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
            out[i, j] = tot / (len(gi.members) * len(gj.members))
    return out


def test_similarity_examples():
    u = np.array([[0.6, 0.8]])
    assert np.allclose(class_similarity([ConceptGroup("a", u), ConceptGroup("b", u)]), np.ones((2, 2)))
    s = class_similarity([ConceptGroup("a", [[1.0, 0]]), ConceptGroup("b", [[0, 1.0]])])
    assert np.allclose(s, np.eye(2))
    with pytest.raises(ValidationError):
        ConceptGroup("x", np.zeros((0, 2)))
    with pytest.raises(ValidationError):
        class_similarity([ConceptGroup("a", u)])


def test_similarity_matches_double_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        groups = [ConceptGroup(str(k), rng.standard_normal((rng.integers(1, 15), 6))) for k in range(rng.integers(2, 6))]
        s = class_similarity(groups)
        assert np.max(np.abs(s - brute_similarity(groups))) < 1e-9
        assert np.array_equal(s, s.T) and np.all(np.abs(s) <= 1)


def test_diagonal_fraction():
    assert diagonal_fraction(np.array([[1, 0.5], [0.9, 0.8]])) == 0.5
    assert diagonal_fraction(np.eye(3)) == 1.0


def test_motion_classes_threshold_and_zero():
    acts = np.array([[0.0, 0.0, 0.0], [0.2, -0.19, 1.0], [1.0, -1.0, -1.0]])
    cls = motion_classes(acts, np.abs(acts).max(axis=0))
    assert [c[0] for c in cls] == ["x:still", "y:still", "gripper:still"]
    assert cls[0][1] == "x:right"  # exactly 20% of max counts as moving
    assert cls[1][1] == "y:still"
    assert cls[2][2] == "gripper:close"


def test_group_by_motion_partitions_each_axis(small_dataset):
    labels = [random_unit(np.random.default_rng(i), d.length, 4) for i, d in enumerate(small_dataset.demos)]
    groups = group_by_motion(small_dataset, labels)
    total = sum(d.length for d in small_dataset.demos)
    assert sum(len(g.members) for g in groups) == 3 * total
    for axis in ("x", "y", "gripper"):
        assert sum(len(g.members) for g in groups if g.label.startswith(axis + ":")) == total


def test_groups_from_segments(small_dataset):
    labels = [random_unit(np.random.default_rng(i), d.length, 4) for i, d in enumerate(small_dataset.demos)]
    groups = groups_from_segments(small_dataset, labels)
    assert [g.label for g in groups] == ["grasp", "place", "reach", "transport"]
    assert sum(len(g.members) for g in groups) == sum(d.length for d in small_dataset.demos)


# ---------------------------------------------------------------- diversity


def union_find_count(x, eps):
    n = len(x)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(x[i] - x[j]) <= eps:
                parent[find(i)] = find(j)
    return len({find(i) for i in range(n)})


def test_diversity_matches_components_and_is_monotone():
    rng = np.random.default_rng(0)
    grid = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0]
    for _ in range(100):
        n, d = int(rng.integers(1, 201)), int(rng.choice([2, 3, 8]))
        x = random_unit(rng, n, d)
        counts = [r["clusters"] for r in diversity_sweep(x, grid)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        if n <= 60:
            assert counts == [union_find_count(x, e) for e in grid]


def test_diversity_extremes():
    rng = np.random.default_rng(1)
    x = np.array([1.0, 0, 0]) + 0.2 * rng.standard_normal((30, 3))  # a small cap: all distances < 1
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    d = np.linalg.norm(x[:, None] - x[None], axis=-1)
    lo, hi = d[d > 0].min(), d.max()
    assert hi < 1
    assert diversity_sweep(x, [hi * 1.001])[0]["clusters"] == 1
    assert diversity_sweep(x, [lo * 0.5])[0]["clusters"] == 30
    with pytest.raises(ValidationError):
        diversity_sweep(x * 2, [0.1])
    with pytest.raises(ValidationError):
        diversity_sweep(x, [0.0])


# ---------------------------------------------------------------- hierarchy


def test_boundary_helpers():
    assert dominates([1, 5, 9], [1, 3, 6, 8])
    assert not dominates([1, 2], [1, 3])
    assert match_counts([10, 20], [12, 30]) == (1, 1)
    res = boundary_agreement({0.0: [[4, 9, 15, 21]], 0.5: [[5]]}, [[4]])
    assert res["best_eps"] == 0.5 and res["score"] == 1.0


def test_hierarchy_report(tmp_path, small_dataset):
    labels = random_corpus(6, seed=3)
    eps = [round(0.1 * i, 1) for i in range(11)]
    rep = hierarchy_report(labels, eps, out_dir=tmp_path)
    assert rep["violations"] == 0
    for d in rep["demos"]:
        Ks = [r["K"] for r in d["rows"]]
        assert Ks[0] == d["T"] and all(a >= b for a, b in zip(Ks, Ks[1:]))
    assert json.loads((tmp_path / "hierarchy.json").read_text())["eps"] == eps
    assert (tmp_path / "hierarchy_demo0.png").exists()
    with pytest.raises(ValidationError):
        hierarchy_report(labels, [0.5, 0.1])

    slabs = [random_unit(np.random.default_rng(i), d.length, 4) for i, d in enumerate(small_dataset.demos)]
    rep = hierarchy_report(slabs, eps, [d.gt_segments for d in small_dataset.demos])
    assert 0.0 <= rep["agreement"]["score"] <= 1.0


# ---------------------------------------------------------------- gallery


def test_gallery_shape_and_eps_zero(tmp_path, small_dataset, tiny_cfg):
    model = build_model(small_dataset.modalities, tiny_cfg, 0)
    demo = small_dataset.demos[0]
    rows = goal_gallery(model, demo, [0.0, 0.3, 1.0], timesteps=[1, 4, demo.length])
    assert len(rows) == 9
    for r in rows[:3]:
        assert r["terminal"] == min(demo.length, r["t"] + 1)
    assert [r["terminal"] for r in rows if r["t"] == demo.length] == [demo.length] * 3
    write_gallery(rows, small_dataset.modalities, tmp_path)
    assert len((tmp_path / "gallery.csv").read_text().splitlines()) == 10


# ---------------------------------------------------------------- labels file


def test_labels_round_trip(tmp_path):
    labs = [np.random.default_rng(i).random((5 + i, 3)).astype(np.float32) for i in range(3)]
    write_labels(labs, tmp_path / "l.mccl", {"x": 1})
    back, prov = read_labels(tmp_path / "l.mccl")
    assert prov == {"x": 1} and all(np.array_equal(a, b) for a, b in zip(labs, back))
    with pytest.raises(ValidationError):
        write_labels([np.zeros((2, 3)), np.zeros((2, 4))], tmp_path / "m.mccl", {})


# ---------------------------------------------------------------- MINE


def test_gaussian_oracle():
    assert gaussian_cmi(GAUSS_COV, [0], [1], [2]) == pytest.approx(GAUSS_CMI, abs=1e-12)
    assert gaussian_cmi(np.eye(3), [0], [1], [2]) == pytest.approx(0.0, abs=1e-12)


def test_bank_matches_reference_net():
    gen = torch.Generator().manual_seed(0)
    bank = StatNetBank([1, 3], [2, 2], 1.5, gen)
    a, b = torch.randn(2, 50, 3), torch.randn(2, 50, 2)
    a[0, :, 1:] = 0
    ref = StatNet(3, 1.5)
    with torch.no_grad():
        ref.net[0].weight.copy_(bank.w1[0, [0, 3, 4], :5].T)
        ref.net[0].bias.copy_(bank.b1[0, 0, :5])
        ref.net[2].weight.copy_(bank.w2[0, :5, 0][None])
        ref.net[2].bias.copy_(bank.b2[0, 0])
        assert torch.allclose(bank(a, b)[0], ref(a[0, :, :1], b[0]), atol=1e-6)


def test_cmi_input_checks():
    x = np.random.default_rng(0).standard_normal(999)
    with pytest.raises(ValidationError):
        estimate_cmi(x, x, x)
    y = np.zeros(1200)
    with pytest.raises(ValidationError):
        estimate_cmi(y, y[:-1], y)


def test_degenerate_variable_reports_zero():
    rng = np.random.default_rng(0)
    cfg = MINEConfig(iterations=50, restarts=1, candidates=1)
    x, z = rng.standard_normal(1000), rng.standard_normal(1000)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        res = estimate_cmi(x, np.ones(1000), z, cfg)
    assert res.terms["I(X:Y)"].mean == 0 and res.terms["I(Y:Z)"].mean == 0
    assert estimate_mi(np.ones(1000), x, cfg).mean == 0


def test_independent_triples_near_zero():
    rng = np.random.default_rng(5)
    triples = [tuple(rng.standard_normal((3, 1000))) for _ in range(50)]
    res = estimate_cmi_many(triples, MINEConfig(restarts=1, candidates=1))
    assert np.mean([abs(r.cmi) for r in res]) < 0.1


def test_conditioning_on_x_itself():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(5000)
    y = 0.9 * x + np.sqrt(1 - 0.81) * rng.standard_normal(5000)
    assert abs(estimate_cmi(x, y, x, MINEConfig()).cmi) < 0.1
