"""Minimal GCN / ResGCN / BiGCN backbones with mean pooling, and the fusion head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tree import PropagationTree

BACKBONES = ("gcn", "resgcn", "bigcn")
DIRECTIONS = ("down", "up", "sym")


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "bigcn"
    layers: int = 2
    hidden: int = 64
    dropout: float = 0.2

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.kind!r}")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("need at least one layer and a positive hidden size")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden if self.kind == "bigcn" else self.hidden


def _edges(parents: np.ndarray, direction: str) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of A + I, where row i aggregates from column j.

    ``down``: each node reads its parent (top-down propagation); ``up``: each
    node reads its children; ``sym``: both.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    n = len(parents)
    child = np.flatnonzero(parents >= 0)
    par = parents[child]
    loops = np.arange(n)
    if direction == "down":
        rows, cols = child, par
    elif direction == "up":
        rows, cols = par, child
    else:
        rows, cols = np.concatenate([child, par]), np.concatenate([par, child])
    return np.concatenate([loops, rows]), np.concatenate([loops, cols])


def _normalized_edges(parents: np.ndarray, direction: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols = _edges(parents, direction)
    deg = np.bincount(rows, minlength=len(parents)).astype(float)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return rows, cols, inv_sqrt[rows] * inv_sqrt[cols]


def normalized_adjacency(tree: PropagationTree, direction: str = "sym") -> np.ndarray:
    """Dense ``D^{-1/2} (A + I) D^{-1/2}`` with D the row degree of ``A + I``."""
    rows, cols, w = _normalized_edges(tree.parents, direction)
    out = np.zeros((tree.n, tree.n))
    out[rows, cols] = w
    return out


def batch_adjacency(parent_arrays: Sequence[np.ndarray], direction: str, dtype=torch.float32) -> torch.Tensor:
    """Block-diagonal sparse normalized adjacency for a batch of trees."""
    rows, cols, vals = [], [], []
    offset = 0
    for parents in parent_arrays:
        r, c, w = _normalized_edges(parents, direction)
        rows.append(r + offset)
        cols.append(c + offset)
        vals.append(w)
        offset += len(parents)
    index = torch.from_numpy(np.stack([np.concatenate(rows), np.concatenate(cols)]))
    return torch.sparse_coo_tensor(index, torch.from_numpy(np.concatenate(vals)).to(dtype), (offset, offset), check_invariants=False).coalesce()


def mean_pool(h: torch.Tensor, graph_index: torch.Tensor, n_graphs: int) -> torch.Tensor:
    sums = torch.zeros(n_graphs, h.shape[1], dtype=h.dtype).index_add_(0, graph_index, h)
    counts = torch.bincount(graph_index, minlength=n_graphs).to(h.dtype).clamp_min(1)
    return sums / counts[:, None]


class GCNStack(nn.Module):
    def __init__(self, in_dim: int, hidden: int, layers: int, dropout: float, residual: bool = False):
        super().__init__()
        self.in_dim = in_dim
        self.residual = residual
        self.dropout = dropout
        dims = [in_dim] + [hidden] * layers
        self.lins = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(layers))

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_dim:
            raise ValueError(f"feature dim {x.shape[1]} does not match backbone input {self.in_dim}")
        h = x
        for i, lin in enumerate(self.lins):
            if i:
                h_in = h
                h = F.dropout(h, self.dropout, self.training)
            out = F.relu(torch.sparse.mm(adj, lin(h)) if adj.is_sparse else adj @ lin(h))
            h = out + h_in if (self.residual and i) else out
        return h


class Backbone(nn.Module):
    """Produces the pooled tree representation ``x_f``."""

    def __init__(self, in_dim: int, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.in_dim = in_dim
        if cfg.kind == "bigcn":
            self.down = GCNStack(in_dim, cfg.hidden, cfg.layers, cfg.dropout)
            self.up = GCNStack(in_dim, cfg.hidden, cfg.layers, cfg.dropout)
        else:
            self.stack = GCNStack(in_dim, cfg.hidden, cfg.layers, cfg.dropout, residual=cfg.kind == "resgcn")

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def forward(self, x: torch.Tensor, adj: dict[str, torch.Tensor], graph_index: torch.Tensor, n_graphs: int) -> torch.Tensor:
        if self.cfg.kind == "bigcn":
            return torch.cat(
                [
                    mean_pool(self.down(x, adj["down"]), graph_index, n_graphs),
                    mean_pool(self.up(x, adj["up"]), graph_index, n_graphs),
                ],
                dim=1,
            )
        return mean_pool(self.stack(x, adj["sym"]), graph_index, n_graphs)


def fuse_predict(x_f: torch.Tensor, x_g: torch.Tensor, W_l: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``logits = W_l (x_f + x_g)``; returns ``(logits, probs)``."""
    if x_f.shape != x_g.shape:
        raise ValueError(f"x_f {tuple(x_f.shape)} and x_g {tuple(x_g.shape)} must match")
    logits = (x_f + x_g) @ W_l.T
    return logits, torch.softmax(logits, dim=-1)
