"""The full detector: backbone + epidemiology encoder + linear decoding head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .backbones import Backbone, BackboneConfig, batch_adjacency, fuse_predict
from .encoder import EpiEncoder, unroll_length
from .ingest import Record


@dataclass
class Batch:
    x: torch.Tensor
    adj: dict[str, torch.Tensor]
    graph_index: torch.Tensor
    n_nodes: torch.Tensor
    T: torch.Tensor
    y: torch.Tensor
    targets: torch.Tensor
    stage_mask: torch.Tensor
    labeled: torch.Tensor

    @property
    def size(self) -> int:
        return int(self.y.shape[0])


def target_counts(tree, labels) -> np.ndarray:
    """Integer (Unknown, Support, Denial) node counts per stage t = 1..T, shape ``(T, 3)``.

    At stage t a non-root node is Unknown if it sits deeper than t, else it
    carries its state label.
    """
    if tree.n < 2:
        raise ValueError(f"event {tree.event_id}: stage targets need at least one response")
    d = tree.depths[1:]
    state = np.array([labels.states[v] for v in range(1, tree.n)])
    T = unroll_length(tree)
    out = np.empty((T, 3), dtype=np.int64)
    for t in range(1, T + 1):
        reached = d <= t
        out[t - 1] = ((~reached).sum(), (reached & (state == 0)).sum(), (reached & (state == 1)).sum())
    return out


def target_distributions(tree, labels) -> np.ndarray:
    return target_counts(tree, labels) / (tree.n - 1)


def collate(records: Sequence[Record], kinds: Sequence[str] = ("down", "up", "sym"), dtype=torch.float32) -> Batch:
    trees = [r.tree for r in records]
    if any(t.features is None for t in trees):
        raise ValueError("all trees need features before batching")
    x = torch.from_numpy(np.concatenate([t.features for t in trees])).to(dtype)
    parents = [t.parents for t in trees]
    adj = {k: batch_adjacency(parents, k, dtype) for k in kinds}
    graph_index = torch.from_numpy(np.repeat(np.arange(len(trees)), [t.n for t in trees]))
    T = torch.tensor([unroll_length(t) for t in trees])
    t_max = int(T.max())
    targets = torch.zeros(len(trees), t_max, 3, dtype=dtype)
    stage_mask = torch.arange(t_max)[None, :] < T[:, None]
    labeled = torch.zeros(len(trees), dtype=torch.bool)
    for i, r in enumerate(records):
        if r.labels is not None and r.tree.n >= 2:
            targets[i, : int(T[i])] = torch.from_numpy(target_distributions(r.tree, r.labels))
            labeled[i] = True
    return Batch(
        x=x,
        adj=adj,
        graph_index=graph_index,
        n_nodes=torch.tensor([t.n for t in trees], dtype=dtype),
        T=T,
        y=torch.tensor([t.label for t in trees]),
        targets=targets,
        stage_mask=stage_mask,
        labeled=labeled,
    )


class EIN(nn.Module):
    """Backbone embedding ``x_f`` plus encoder embedding ``x_g``, decoded by ``W_l``.

    With ``use_epi=False`` the encoder is dropped and the model is the plain
    backbone classifier.
    """

    def __init__(
        self,
        in_dim: int,
        backbone: BackboneConfig = BackboneConfig(),
        use_epi: bool = True,
        alpha0: float = 0.25,
        beta0: float = 0.25,
        dynamics: str = "eusd",
    ):
        super().__init__()
        self.in_dim = in_dim
        self.backbone = Backbone(in_dim, backbone)
        self.encoder: Optional[EpiEncoder] = (
            EpiEncoder(in_dim, self.backbone.out_dim, alpha0, beta0, dynamics) if use_epi else None
        )
        self.W_l = nn.Parameter(torch.empty(2, self.backbone.out_dim))
        nn.init.xavier_uniform_(self.W_l)

    def forward(self, batch: Batch) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Returns class logits ``(B, 2)`` and stage distributions ``(B, max T, 3)`` (or None)."""
        x_f = self.backbone(batch.x, batch.adj, batch.graph_index, batch.size)
        if self.encoder is None:
            logits, _ = fuse_predict(x_f, torch.zeros_like(x_f), self.W_l)
            return logits, None
        x_g, p_hat = self.encoder(batch.n_nodes, batch.T)
        logits, _ = fuse_predict(x_f, x_g, self.W_l)
        return logits, p_hat


@torch.no_grad()
def predict_proba(model: EIN, records: Sequence[Record], batch_size: int = 256) -> np.ndarray:
    """Rumor-class probability per record."""
    model.eval()
    dtype = model.W_l.dtype
    out = []
    for i in range(0, len(records), batch_size):
        logits, _ = model(collate(records[i : i + batch_size], dtype=dtype))
        out.append(torch.softmax(logits, dim=-1)[:, 1].double().numpy())
    return np.concatenate(out) if out else np.zeros(0)
