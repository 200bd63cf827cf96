"""Losses, optimisation loop and checkpoint IO."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .backbones import BackboneConfig
from .encoder import set_rates
from .evaluation import compute_metrics
from .ingest import Record
from .model import EIN, collate, predict_proba, target_counts, target_distributions  # noqa: F401

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-8
CHECKPOINT_FORMAT = "ein-checkpoint/1"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    backbone: str = "bigcn"
    layers: int = 2
    hidden: int = 64
    dropout: float = 0.2
    lam: float = 0.5
    ce_weight: float = 1.0
    alpha0: Union[float, str] = 0.25
    beta0: Union[float, str] = 0.25
    dynamics: str = "eusd"
    use_epi: bool = True
    lr: float = 5e-4
    rate_lr: Optional[float] = None
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    dtype: str = "float32"
    deterministic: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        for name in ("alpha0", "beta0"):
            v = getattr(self, name)
            if isinstance(v, str) and v != "random":
                raise ValueError(f"{name} must be a number in [0, 1] or 'random'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.backbone, self.layers, self.hidden, self.dropout)

    def initial_rates(self) -> tuple[float, float]:
        """Resolve 'random' initialisations (independent uniform draws) from the seed."""
        rng = np.random.default_rng([self.seed, 7919])
        a = float(rng.uniform()) if self.alpha0 == "random" else float(self.alpha0)
        b = float(rng.uniform()) if self.beta0 == "random" else float(self.beta0)
        return a, b


# ---------------------------------------------------------------------------
# losses


def kl_state_loss(targets: torch.Tensor, p_hat: torch.Tensor, stage_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-tree sum over stages of ``KL(target || predicted)``.

    ``targets``/``p_hat`` have shape ``(..., T, 3)``; masked stages contribute 0.
    """
    log_q = torch.log(p_hat.clamp_min(PROB_FLOOR))
    per_stage = (torch.xlogy(targets, targets) - targets * log_q).sum(-1)
    if stage_mask is not None:
        per_stage = per_stage * stage_mask.to(per_stage.dtype)
    return per_stage.sum(-1)


def joint_loss(logits: torch.Tensor, label: torch.Tensor, kl: torch.Tensor, lam: float, has_states: Optional[torch.Tensor] = None, ce_weight: float = 1.0) -> torch.Tensor:
    """``ce_weight * CE + lam * KL`` averaged over the batch.

    The KL term is averaged over trees that carry state labels only.
    """
    logits = logits.reshape(-1, 2)
    label = label.reshape(-1)
    kl = kl.reshape(-1)
    l_r = F.cross_entropy(logits, label)
    if has_states is None:
        has_states = torch.ones_like(label, dtype=torch.bool)
    l_p = kl[has_states].mean() if bool(has_states.any()) else kl.sum() * 0.0
    return ce_weight * l_r + lam * l_p


def batch_losses(model: EIN, batch, cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, L_r, L_p) for one batch."""
    logits, p_hat = model(batch)
    l_r = F.cross_entropy(logits, batch.y)
    if p_hat is not None and bool(batch.labeled.any()):
        kl = kl_state_loss(batch.targets, p_hat, batch.stage_mask)
        l_p = kl[batch.labeled].mean()
    else:
        l_p = torch.zeros((), dtype=logits.dtype)
    total = cfg.ce_weight * l_r
    if cfg.lam > 0:
        total = total + cfg.lam * l_p
    return total, l_r, l_p


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: EIN
    config: TrainConfig
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def build_model(in_dim: int, cfg: TrainConfig) -> EIN:
    torch.manual_seed(cfg.seed)
    alpha0, beta0 = cfg.initial_rates()
    model = EIN(in_dim, cfg.backbone_config(), cfg.use_epi, alpha0, beta0, cfg.dynamics).to(cfg.torch_dtype)
    if model.encoder is not None:
        set_rates(model.encoder, alpha0, beta0)  # re-derive raw rates at full precision
    return model


def _param_groups(model: EIN, cfg: TrainConfig) -> list[dict]:
    rates = [p for n, p in model.named_parameters() if n.endswith(("alpha_raw", "beta_raw"))]
    rest = [p for n, p in model.named_parameters() if not n.endswith(("alpha_raw", "beta_raw"))]
    groups = [{"params": rest}]
    if rates:
        groups.append({"params": rates, "lr": cfg.rate_lr or cfg.lr, "weight_decay": 0.0})
    return groups


def _rates(model: EIN) -> dict:
    if model.encoder is None:
        return {}
    return {"alpha": float(model.encoder.alpha.detach()), "beta": float(model.encoder.beta.detach())}


def train(
    train_records: Sequence[Record],
    val_records: Sequence[Record],
    cfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Mini-batch Adam with early stopping on validation accuracy.

    The returned model holds the parameters from the best validation epoch
    (the last epoch when no validation data is given).
    """
    if not train_records:
        raise TrainingError("empty training split")
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
    in_dim = train_records[0].tree.features.shape[1]
    model = build_model(in_dim, cfg)
    opt = torch.optim.Adam(_param_groups(model, cfg), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    dtype = cfg.torch_dtype

    result = TrainResult(model, cfg)
    best_acc, best_state, stale = -math.inf, None, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train_records))
        sums = np.zeros(2)
        for start in range(0, len(order), cfg.batch_size):
            batch = collate([train_records[i] for i in order[start : start + cfg.batch_size]], dtype=dtype)
            total, l_r, l_p = batch_losses(model, batch, cfg)
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} (L_r={float(l_r.detach())}, L_p={float(l_p.detach())}, rates={_rates(model)})"
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += (float(l_r.detach()) * batch.size, float(l_p.detach()) * batch.size)
        entry = {"epoch": epoch, "L_r": float(sums[0] / len(order)), "L_p": float(sums[1] / len(order)), **_rates(model)}
        if val_records:
            probs = predict_proba(model, val_records)
            acc, auc, f1 = compute_metrics(probs, [r.tree.label for r in val_records])
            entry.update(val_acc=acc, val_auc=auc, val_f1=f1)
            if acc > best_acc:
                best_acc, best_state, stale = acc, copy.deepcopy(model.state_dict()), 0
                result.best_epoch = epoch
            else:
                stale += 1
        else:
            result.best_epoch = epoch
        result.log.append(entry)
        logger.info("epoch %d %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in entry.items()})
        if val_records and stale >= cfg.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: EIN, cfg: TrainConfig, run_config: Optional[dict] = None) -> None:
    params = {name: t.detach().cpu() for name, t in model.state_dict().items()}
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": __version__,
            "seed": cfg.seed,
            "in_dim": model.in_dim,
            "train_config": asdict(cfg),
            "run_config": run_config or {},
            "shapes": {name: list(t.shape) for name, t in params.items()},
            "params": params,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[EIN, TrainConfig, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an EIN checkpoint")
    cfg = TrainConfig.from_dict(blob["train_config"])
    model = EIN(blob["in_dim"], cfg.backbone_config(), cfg.use_epi, 0.25, 0.25, cfg.dynamics).to(cfg.torch_dtype)
    model.load_state_dict(blob["params"])
    model.eval()
    return model, cfg, blob
