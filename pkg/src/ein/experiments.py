"""Synthetic-oracle experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import GeneratorConfig, Regime, generate_dataset
from .encoder import learned_support_share
from .evaluation import compute_metrics, stage_table
from .ingest import Record, SplitSpec, split
from .model import predict_proba
from .training import TrainConfig, train


def _records(gen: GeneratorConfig, count: int, seed: int) -> list[Record]:
    return [Record(t, l) for t, l in generate_dataset(gen, count, seed)]


# ---------------------------------------------------------------------------
# parameter recovery


@dataclass
class RecoveryResult:
    seed: int
    alpha: float
    beta: float
    share: float
    first_L_p: float
    last_L_p: float
    predicted_share: float
    seconds: float


def recovery_generator(alpha: float = 0.2, beta: float = 0.6, dim: int = 16) -> GeneratorConfig:
    regime = Regime(alpha, beta, min_nodes=5, max_nodes=40, max_depth=8)
    return GeneratorConfig(regimes=(regime, regime), dim=dim, sigma=1.0)


def parameter_recovery(
    seed: int,
    count: int = 1000,
    alpha: float = 0.2,
    beta: float = 0.6,
    cfg: TrainConfig | None = None,
) -> RecoveryResult:
    """Fit the encoder with the state loss alone and read back alpha / (alpha + beta)."""
    cfg = cfg or TrainConfig(backbone="gcn", layers=1, hidden=16, dropout=0.0, lr=1e-2, epochs=30)
    cfg = replace(cfg, seed=seed, ce_weight=0.0, lam=1.0 if cfg.lam == 0 else cfg.lam)
    gen = recovery_generator(alpha, beta, dim=16)
    data = _records(gen, count, seed)
    t0 = time.perf_counter()
    result = train(data, [], cfg)
    enc = result.model.encoder
    # Support share implied by the fitted final-stage distributions, for contrast with the rates
    final = []
    for r in data[:200]:
        p = stage_table(result.model, r.tree)[-1]
        final.append(p[1] / (p[1] + p[2]))
    return RecoveryResult(
        seed,
        float(enc.alpha.detach()),
        float(enc.beta.detach()),
        learned_support_share(enc),
        result.log[0]["L_p"],
        result.log[-1]["L_p"],
        float(np.mean(final)),
        time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# separability


@dataclass
class SeparabilityResult:
    seed: int
    backbone_acc: float
    ein_acc: float
    seconds: float
    extra: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.ein_acc - self.backbone_acc


def separability_generator(sigma: float = 0.3, dim: int = 32) -> GeneratorConfig:
    """Two regimes that differ in dynamics, size and depth; node features follow stances only.

    Below the first level a stance flips with probability 2p(1 - p) in both
    regimes, so the features carry little class signal beyond depth one.
    """
    return GeneratorConfig(
        regimes=(Regime(0.6, 0.2, 5, 30, 4), Regime(0.2, 0.6, 10, 40, 8)),
        dim=dim,
        sigma=sigma,
        feature_source="stance",
    )


def separability(
    seed: int,
    count: int = 2000,
    sigma: float = 0.3,
    lam: float = 0.5,
    cfg: TrainConfig | None = None,
) -> SeparabilityResult:
    """Test accuracy of backbone-only vs EIN on the same split and seed."""
    cfg = cfg or TrainConfig(backbone="bigcn", hidden=32, lr=5e-3, epochs=30, patience=10)
    data = _records(separability_generator(sigma), count, seed)
    tr, va, te = split(data, SplitSpec(seed=seed), label_of=lambda r: r.tree.label)
    labels = [r.tree.label for r in te]
    t0 = time.perf_counter()
    accs = {}
    for use_epi in (False, True):
        res = train(tr, va, replace(cfg, seed=seed, use_epi=use_epi, lam=lam))
        accs[use_epi] = compute_metrics(predict_proba(res.model, te), labels)[0]
    return SeparabilityResult(seed, accs[False], accs[True], time.perf_counter() - t0)


def summarize(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
