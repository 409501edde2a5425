import csv
from dataclasses import replace

import numpy as np
import pytest
import torch

from mcds import env as E
from mcds.encoder import label_dataset
from mcds.errors import ValidationError
from mcds.policy import (ConceptPolicy, ExpertAgent, PolicyAgent, PolicyConfig, RandomAgent, SWEEP_FIELDS,
                         build_policy_data, chunk_rows, evaluate_policy, obs_history, policy_forward, policy_loss,
                         success_stderr, sweep_policy, train_policy, write_rows_csv)
from mcds.trainer import TrainConfig, build_model
from conftest import tiny_model_config

CFG = PolicyConfig(depth=3, width=16, obs_window=2, chunk=3, task_embed_dim=4, concept_layer=1, lambda_mc=0.1)


@pytest.fixture(scope="module")
def labels(small_dataset):
    torch.set_num_threads(1)
    return label_dataset(small_dataset, build_model(small_dataset.modalities, tiny_model_config(), 0).encoder)


def _policy(ds, cfg=CFG, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    return ConceptPolicy(ds.modalities, ds.action_dim, 16, ds.task_ids, cfg).to(dtype)


def _batch(ds, labels, cfg=CFG, n=32):
    obs, tasks, acts, cons = build_policy_data(ds, labels, cfg)
    idx = np.random.default_rng(0).integers(0, len(obs), n)
    return (torch.as_tensor(obs[idx], dtype=torch.float64), [tasks[i] for i in idx],
            torch.as_tensor(acts[idx], dtype=torch.float64), torch.as_tensor(cons[idx], dtype=torch.float64))


def test_config_validation():
    with pytest.raises(ValidationError):
        replace(CFG, concept_layer=3).validate()
    with pytest.raises(ValidationError):
        replace(CFG, lambda_mc=-1.0).validate()


def test_forward_shapes_and_unknown_task(small_dataset):
    p = _policy(small_dataset)
    obs_dim = sum(m.dim for m in small_dataset.modalities)
    a, z, h = policy_forward(p, np.zeros(2 * obs_dim), small_dataset.task_ids[0])
    assert a.shape == (3, small_dataset.action_dim) and z.shape == (3, 16) and h.shape == (16,)
    with pytest.raises(ValidationError):
        policy_forward(p, np.zeros(2 * obs_dim), "no-such-task")


def test_concept_head_ignores_layers_above_L(small_dataset, labels):
    obs, tasks, _, _ = _batch(small_dataset, labels)
    p = _policy(small_dataset)
    task = p.task_index(tasks)
    a0, z0, _ = p(obs, task)
    with torch.no_grad():
        for prm in p.blocks[2].parameters():
            prm.add_(torch.randn_like(prm))
        for prm in p.action_head.parameters():
            prm.add_(1.0)
    a1, z1, _ = p(obs, task)
    assert torch.equal(z0, z1) and not torch.equal(a0, a1)


def test_loss_examples():
    a = torch.randn(4, 3, 3, dtype=torch.float64)
    z = torch.randn(4, 3, 5, dtype=torch.float64)
    assert policy_loss(a, a, z, z, 0.5)[0].item() == 0
    za = torch.randn_like(z)
    loss, parts = policy_loss(a + 1, a, z, za, 0.0)
    assert loss.item() == parts["loss_action"]
    loss, parts = policy_loss(a + 1, a, z, za, 0.3)
    assert abs(parts["loss"] - (parts["loss_action"] + 0.3 * parts["loss_concept"])) < 1e-9


def test_zero_lambda_isolates_concept_head(small_dataset, labels):
    obs, tasks, acts, cons = _batch(small_dataset, labels)
    p = _policy(small_dataset)
    pa, pz, _ = p(obs, p.task_index(tasks))
    policy_loss(pa, acts, pz, cons, 0.0)[0].backward()
    assert all(prm.grad is None or torch.all(prm.grad == 0) for prm in p.concept_head.parameters())


def test_concept_scale_invariance(small_dataset, labels):
    obs, tasks, acts, cons = _batch(small_dataset, labels)
    c, lam = 7.0, 0.2
    grads, losses = [], []
    for scale, lm in ((1.0, lam), (c, lam / c)):
        p = _policy(small_dataset)
        pa, pz, _ = p(obs, p.task_index(tasks))
        loss, parts = policy_loss(pa, acts, pz * scale, cons * scale, lm)
        loss.backward()
        losses.append(loss.item())
        grads.append(torch.cat([q.grad.reshape(-1) for q in p.parameters() if q.grad is not None]))
    assert losses[0] == pytest.approx(losses[1], rel=1e-12)
    assert torch.allclose(grads[0], grads[1], rtol=1e-9, atol=1e-12)


def test_data_helpers():
    frames = np.arange(10.0).reshape(5, 2)
    assert np.array_equal(obs_history(frames, 1, 3), [0, 1, 0, 1, 0, 1])
    assert np.array_equal(obs_history(frames, 4, 2), [4, 5, 6, 7])
    assert np.array_equal(chunk_rows(4, 5, 3), [3, 4, 4])


def test_misaligned_labels_rejected(small_dataset, labels):
    bad = list(labels)
    bad[0] = bad[0][:-1]
    with pytest.raises(ValidationError):
        train_policy(small_dataset, bad, CFG, TrainConfig(iterations=1))
    with pytest.raises(ValidationError):
        train_policy(small_dataset, labels[:-1], CFG, TrainConfig(iterations=1))


def test_training_deterministic_and_logs_terms(small_dataset, labels):
    tc = TrainConfig(iterations=20, batch_size=16, warmup=2, seed=4)
    a = train_policy(small_dataset, labels, CFG, tc)
    b = train_policy(small_dataset, labels, CFG, tc)
    assert a.metrics == b.metrics
    assert {"loss_action", "loss_concept"} <= set(a.metrics[0])
    assert all(np.array_equal(a.bundle.params[k], b.bundle.params[k]) for k in a.bundle.params)


def _final_concept_loss(metrics, k=50):
    return float(np.mean([m["loss_concept"] for m in metrics[-k:]]))


def test_concept_loss_decreases_and_shuffled_labels_fit_worse(small_dataset, labels):
    cat = np.concatenate(labels)
    lens = np.cumsum([len(x) for x in labels])[:-1]
    true_l, shuf_l = [], []
    for seed in range(4):
        perm = np.random.default_rng(seed).permutation(len(cat))
        shuffled = np.split(cat[perm], lens)
        tc = TrainConfig(iterations=400, batch_size=32, warmup=20, seed=seed)
        res = train_policy(small_dataset, labels, CFG, tc)
        assert _final_concept_loss(res.metrics) < np.mean([m["loss_concept"] for m in res.metrics[:10]])
        true_l.append(_final_concept_loss(res.metrics))
        shuf_l.append(_final_concept_loss(train_policy(small_dataset, shuffled, CFG, tc).metrics))
    assert all(s > t for s, t in zip(shuf_l, true_l))


def test_expert_and_random_agents():
    spec = E.EnvSpec(noise=0.0, obs_noise=0.0)
    ev = evaluate_policy(ExpertAgent(), spec, 30, seed=0)
    assert all(r == 1.0 for r in ev.success.values())
    rnd = evaluate_policy(RandomAgent(0), E.EnvSpec(), 100, seed=0, splits=("train-layout",))
    assert rnd.success["train-layout"] <= 0.03


def test_evaluation_deterministic(small_dataset, labels):
    res = train_policy(small_dataset, labels, CFG, TrainConfig(iterations=5, batch_size=8, warmup=1),
                       E.all_task_ids(E.EnvSpec()))
    runs = [evaluate_policy(PolicyAgent(res.policy), E.EnvSpec(), 3, seed=9).episodes for _ in range(2)]
    assert runs[0] == runs[1]
    assert {e["split"] for e in runs[0]} == {"train-layout", "novel-layout", "two-stage"}


def test_success_stderr():
    assert success_stderr([0.5], 100) == pytest.approx(0.05)
    assert success_stderr([0.2, 0.4], 10) == pytest.approx(0.1)


def test_tiny_sweep_csv(tmp_path, small_dataset, labels):
    rows = sweep_policy(small_dataset, labels, E.EnvSpec(), CFG, TrainConfig(iterations=3, batch_size=8, warmup=1),
                        [0.0, 1.0], [0, 2], [0], 1, splits=("two-stage",))
    write_rows_csv(rows, tmp_path / "s.csv", SWEEP_FIELDS)
    with open(tmp_path / "s.csv") as f:
        got = list(csv.DictReader(f))
    assert [(r["L"], r["lambda_mc"]) for r in got] == [("0", "0.0"), ("0", "1.0"), ("2", "0.0"), ("2", "1.0")]
    assert tuple(got[0]) == SWEEP_FIELDS
