import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ein.dynamics import GeneratorConfig, Regime, generate_dataset
from ein.ingest import Record
from ein.model import collate, predict_proba, target_counts, target_distributions
from ein.stance import StateLabels, states_from_stances
from ein.training import (
    TrainConfig,
    TrainingError,
    batch_losses,
    build_model,
    joint_loss,
    kl_state_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)

from conftest import random_parents, tree_from_parents


def _labels(tree, states):
    return StateLabels(tree.event_id, dict(states), {})


def test_targets_worked_example():
    # root; a (Support), b (Denial); c under a (Support)
    t = tree_from_parents([-1, 0, 0, 1])
    d = target_distributions(t, _labels(t, {1: 0, 2: 1, 3: 0}))
    np.testing.assert_allclose(d, [[1 / 3, 1 / 3, 1 / 3], [0, 2 / 3, 1 / 3]])


def test_targets_star_and_errors():
    t = tree_from_parents([-1, 0, 0, 0, 0])
    np.testing.assert_array_equal(target_distributions(t, _labels(t, {v: 0 for v in range(1, 5)})), [[0, 1, 0]])
    with pytest.raises(ValueError):
        target_counts(tree_from_parents([-1]), _labels(tree_from_parents([-1]), {}))


@given(st.integers(2, 40), st.integers(0, 2**31))
def test_targets_sum_exactly_and_cover_monotonically(n, seed):
    rng = np.random.default_rng(seed)
    t = tree_from_parents(random_parents(rng, n))
    labels = _labels(t, {v: int(rng.integers(2)) for v in range(1, n)})
    counts = target_counts(t, labels)
    assert all(Fraction(int(c.sum()), n - 1) == 1 for c in counts)
    assert np.all(np.diff(counts[:, 0]) <= 0) and counts[-1, 0] == 0
    assert np.all(target_distributions(t, labels) >= 0)


def test_kl_examples():
    p = torch.tensor([[0.5, 0.25, 0.25]], dtype=torch.float64)
    q = torch.tensor([[0.25, 0.5, 0.25]], dtype=torch.float64)
    assert float(kl_state_loss(p, q)) == pytest.approx(0.5 * math.log(2) + 0.25 * math.log(0.5), abs=1e-12)
    assert float(kl_state_loss(p, q)) == pytest.approx(0.1733, abs=1e-4)
    assert float(kl_state_loss(p, p)) == pytest.approx(0.0, abs=1e-12)
    assert float(kl_state_loss(p.repeat(2, 1), q.repeat(2, 1))) == pytest.approx(2 * float(kl_state_loss(p, q)))
    # zero target entries contribute nothing, zero predictions are floored
    z = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    assert float(kl_state_loss(z, z)) == pytest.approx(0.0, abs=1e-12)
    assert math.isfinite(float(kl_state_loss(torch.tensor([[1.0, 0.0, 0.0]]), z)))
    mask = torch.tensor([True, False])
    assert float(kl_state_loss(torch.cat([p, p]), torch.cat([p, q]), mask)) == pytest.approx(0.0, abs=1e-12)


@given(
    st.lists(st.lists(st.floats(1e-3, 1.0), min_size=3, max_size=3), min_size=1, max_size=6),
    st.lists(st.lists(st.floats(1e-3, 1.0), min_size=3, max_size=3), min_size=6, max_size=6),
)
@settings(max_examples=200)
def test_kl_nonnegative(ps, qs):
    p = torch.tensor(ps, dtype=torch.float64)
    p = p / p.sum(-1, keepdim=True)
    q = torch.tensor(qs[: len(ps)], dtype=torch.float64)
    q = q / q.sum(-1, keepdim=True)
    assert float(kl_state_loss(p, q)) >= -1e-12


def test_joint_loss_examples():
    logits = torch.zeros(1, 2, dtype=torch.float64)
    for y in (0, 1):
        assert float(joint_loss(logits, torch.tensor([y]), torch.tensor([5.0]), 0.0)) == pytest.approx(math.log(2))
    assert float(joint_loss(logits, torch.tensor([0]), torch.tensor([0.2], dtype=torch.float64), 0.5)) == pytest.approx(math.log(2) + 0.1)
    confident = torch.tensor([[30.0, -30.0]], dtype=torch.float64)
    assert float(joint_loss(confident, torch.tensor([0]), torch.tensor([0.0]), 1.0)) < 1e-12
    # unlabeled trees only contribute cross-entropy
    two = torch.zeros(2, 2, dtype=torch.float64)
    kl = torch.tensor([0.4, 100.0], dtype=torch.float64)
    val = joint_loss(two, torch.tensor([0, 1]), kl, 1.0, has_states=torch.tensor([True, False]))
    assert float(val) == pytest.approx(math.log(2) + 0.4)


def _tiny_dataset(count=60, seed=0, dim=6):
    gen = GeneratorConfig(regimes=(Regime(0.6, 0.2, 3, 12, 4), Regime(0.2, 0.6, 3, 12, 4)), dim=dim, sigma=1.0)
    return [Record(t, l) for t, l in generate_dataset(gen, count, seed)]


def _cfg(**kw):
    base = dict(backbone="gcn", layers=1, hidden=8, dropout=0.0, epochs=3, batch_size=16, patience=5, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_lambda_zero_gives_no_score_proj_gradient():
    data = _tiny_dataset(20)
    model = build_model(6, _cfg(lam=0.0))
    total, _, _ = batch_losses(model, collate(data), _cfg(lam=0.0))
    total.backward()
    g = model.encoder.score_proj.grad
    assert g is None or torch.all(g == 0)
    assert model.encoder.W_x.grad is not None and torch.any(model.encoder.W_x.grad != 0)
    model.zero_grad()
    total, _, _ = batch_losses(model, collate(data), _cfg(lam=0.5))
    total.backward()
    assert torch.any(model.encoder.score_proj.grad != 0)


def test_training_is_deterministic():
    data = _tiny_dataset(60)
    a = train(data[:40], data[40:], _cfg())
    b = train(data[:40], data[40:], _cfg())
    assert a.log == b.log
    for (n1, p1), (n2, p2) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)


def test_training_log_and_early_stopping():
    data = _tiny_dataset(60)
    res = train(data[:40], data[40:], _cfg(epochs=30, patience=2))
    keys = {"epoch", "L_r", "L_p", "alpha", "beta", "val_acc", "val_auc", "val_f1"}
    assert all(keys <= set(e) for e in res.log)
    assert len(res.log) < 30 or res.best_epoch <= 30
    accs = [e["val_acc"] for e in res.log]
    assert res.best_epoch == 1 + accs.index(max(accs))
    if len(res.log) < 30:
        assert len(res.log) - res.best_epoch == 2
    probs = predict_proba(res.model, data[40:])
    got = np.mean((probs >= 0.5) == np.array([r.tree.label for r in data[40:]]))
    assert got == pytest.approx(max(accs))


def test_state_loss_decreases():
    data = _tiny_dataset(200, dim=8)
    res = train(data, [], _cfg(epochs=10, lam=1.0, lr=5e-3))
    assert res.log[-1]["L_p"] < res.log[0]["L_p"]


def test_empty_and_nan():
    with pytest.raises(TrainingError):
        train([], [], _cfg())
    data = _tiny_dataset(4)
    bad = data[0].tree.with_features(np.full_like(data[0].tree.features, np.nan))
    with pytest.raises(TrainingError, match="non-finite"):
        train([Record(bad, data[0].labels)], [], _cfg())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(alpha0="sometimes")
    r1 = TrainConfig(alpha0="random", beta0="random", seed=4).initial_rates()
    assert r1 == TrainConfig(alpha0="random", beta0="random", seed=4).initial_rates()
    assert r1[0] != r1[1] and all(0 <= x <= 1 for x in r1)
    assert TrainConfig.from_dict({"lam": 0.1, "unknown": 1}).lam == 0.1


def test_checkpoint_roundtrip(tmp_path):
    data = _tiny_dataset(30)
    res = train(data[:20], data[20:], _cfg(epochs=2, dtype="float64", alpha0=0.3, beta0=0.1))
    path = tmp_path / "m.pt"
    save_checkpoint(path, res.model, res.config, {"train": {"lambda": 0.5}})
    model, cfg, blob = load_checkpoint(path)
    assert cfg == res.config and blob["seed"] == 3 and blob["run_config"] == {"train": {"lambda": 0.5}}
    assert blob["shapes"]["encoder.W_x"] == [8, 18]
    np.testing.assert_array_equal(predict_proba(model, data), predict_proba(res.model, data))
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "junk.pt")


@pytest.mark.parametrize("kind", ["gcn", "resgcn", "bigcn"])
def test_joint_loss_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(11)
    t = tree_from_parents([-1, 0, 0, 1, 3], features=rng.normal(size=(5, 3)), label=1)
    labels = StateLabels("e", states_from_stances(t, {1: 0, 2: 1, 3: 1, 4: 0}), {1: 0, 2: 1, 3: 1, 4: 0})
    cfg = _cfg(backbone=kind, layers=2, hidden=2, dtype="float64", lam=0.7, alpha0=0.3, beta0=0.2)
    model = build_model(3, cfg)
    batch = collate([Record(t, labels)], dtype=torch.float64)
    model.train()

    def f():
        return batch_losses(model, batch, cfg)[0]

    model.zero_grad()
    f().backward()
    h = 1e-5
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                fp = f().item()
                flat[i] = old - h
                fm = f().item()
                flat[i] = old
            fd = (fp - fm) / (2 * h)
            g = grad[i].item()
            assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 1e-6), (name, i, fd, g)
