"""Epidemiology-informed encoder.

State embeddings for Unknown/Support/Denial are initialised from the tree size
and unrolled for one step per tree level with the discrete eUSD recursion::

    U_0 = n (1 - a - b) W_u0          S_0 = b_s          D_0 = b_d
    U_{t+1} = U_t - a U_t - b U_t
    S_{t+1} = W_s (S_t + a W_u U_t)
    D_{t+1} = W_d (D_t + b W_u U_t)

and the tree embedding is ``x_g = W_x [U_T; S_T; D_T]``. The encoder sees a
tree only through its node count and depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .tree import PropagationTree, depth

RATE_EPS = 1e-4
DYNAMICS = ("eusd", "usd")


def rate_from_raw(raw: torch.Tensor) -> torch.Tensor:
    """Map an unconstrained real into the open interval (RATE_EPS, 1 - RATE_EPS)."""
    return RATE_EPS + (1.0 - 2.0 * RATE_EPS) * torch.sigmoid(raw)


def raw_from_rate(rate: float) -> float:
    p = (rate - RATE_EPS) / (1.0 - 2.0 * RATE_EPS)
    p = min(max(p, RATE_EPS), 1.0 - RATE_EPS)
    return math.log(p / (1.0 - p))


@dataclass
class EncoderState:
    """Stacked state embeddings, shape ``(T + 1, batch, h)``; index 0 is the initial state."""

    U: torch.Tensor
    S: torch.Tensor
    D: torch.Tensor


class EpiEncoder(nn.Module):
    def __init__(
        self,
        dim: int,
        out_dim: int,
        alpha0: float = 0.25,
        beta0: float = 0.25,
        dynamics: str = "eusd",
    ):
        super().__init__()
        if dynamics not in DYNAMICS:
            raise ValueError(f"unknown dynamics {dynamics!r}")
        self.dim = dim
        self.out_dim = out_dim
        self.dynamics = dynamics
        self.W_u0 = nn.Parameter(torch.empty(dim))
        self.b_s = nn.Parameter(torch.empty(dim))
        self.b_d = nn.Parameter(torch.empty(dim))
        self.W_u = nn.Parameter(torch.empty(dim, dim))
        self.W_s = nn.Parameter(torch.empty(dim, dim))
        self.W_d = nn.Parameter(torch.empty(dim, dim))
        self.W_x = nn.Parameter(torch.empty(out_dim, 3 * dim))
        self.score_proj = nn.Parameter(torch.empty(3, dim))
        self.alpha_raw = nn.Parameter(torch.tensor(raw_from_rate(alpha0)))
        self.beta_raw = nn.Parameter(torch.tensor(raw_from_rate(beta0)))
        self.reset_parameters()

    def reset_parameters(self):
        scale = 1.0 / math.sqrt(self.dim)
        nn.init.normal_(self.W_u0, std=0.1 * scale)
        nn.init.normal_(self.b_s, std=scale)
        nn.init.normal_(self.b_d, std=scale)
        # orthogonal transitions keep deep unrolls from exploding or vanishing
        for w in (self.W_u, self.W_s, self.W_d):
            nn.init.orthogonal_(w)
        nn.init.xavier_uniform_(self.W_x)
        nn.init.normal_(self.score_proj, std=scale)

    @property
    def alpha(self) -> torch.Tensor:
        return rate_from_raw(self.alpha_raw)

    @property
    def beta(self) -> torch.Tensor:
        return rate_from_raw(self.beta_raw)

    def keep_rate(self) -> torch.Tensor:
        # (1 - a - b) as one factor: U - aU - bU cancels badly when a + b is near 1
        return 1.0 - self.alpha - self.beta

    def init_states(self, n_nodes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Initial embeddings for a batch of node counts, each ``(batch, h)``."""
        n_nodes = n_nodes.to(self.W_u0.dtype).reshape(-1, 1)
        b_u = self.keep_rate() * self.W_u0
        U0 = n_nodes * b_u
        S0 = self.b_s.expand(U0.shape[0], -1)
        D0 = self.b_d.expand(U0.shape[0], -1)
        return U0, S0, D0

    def unroll(self, T: int, U0: torch.Tensor, S0: torch.Tensor, D0: torch.Tensor) -> EncoderState:
        if T < 1:
            raise ValueError("T must be at least 1")
        a, b, keep = self.alpha, self.beta, self.keep_rate()
        Us, Ss, Ds = [U0], [S0], [D0]
        U, S, D = U0, S0, D0
        for _ in range(T):
            if self.dynamics == "eusd":
                to_s = a * U
                to_d = b * U
                U_next = keep * U
                S_next = (S + to_s @ self.W_u.T) @ self.W_s.T
                D_next = (D + to_d @ self.W_u.T) @ self.W_d.T
            else:
                # bilinear USD: flow out of Unknown scales with the (squashed) Support/Denial mass
                to_s = a * U * torch.sigmoid(S)
                to_d = b * U * torch.sigmoid(D)
                U_next = U - to_s - to_d
                S_next = (S + to_s @ self.W_u.T) @ self.W_s.T
                D_next = (D + to_d @ self.W_u.T) @ self.W_d.T
            U, S, D = U_next, S_next, D_next
            Us.append(U)
            Ss.append(S)
            Ds.append(D)
        return EncoderState(torch.stack(Us), torch.stack(Ss), torch.stack(Ds))

    def state_scores(self, states: EncoderState) -> torch.Tensor:
        """Softmax over per-state scores for stages 1..T, shape ``(batch, T, 3)``."""
        scores = torch.stack(
            [
                states.U[1:] @ self.score_proj[0],
                states.S[1:] @ self.score_proj[1],
                states.D[1:] @ self.score_proj[2],
            ],
            dim=-1,
        )
        return torch.softmax(scores, dim=-1).transpose(0, 1)

    def forward(self, n_nodes: torch.Tensor, T: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a batch given node counts and unroll lengths.

        Returns ``x_g`` of shape ``(batch, out_dim)`` and predicted stage
        distributions ``(batch, max T, 3)``; rows past a tree's own ``T`` are
        padding.
        """
        T = T.reshape(-1).long()
        t_max = int(T.max())
        states = self.unroll(t_max, *self.init_states(n_nodes))
        idx = torch.arange(T.shape[0])
        final = torch.cat([states.U[T, idx], states.S[T, idx], states.D[T, idx]], dim=-1)
        x_g = final @ self.W_x.T
        return x_g, self.state_scores(states)


def unroll_length(tree: PropagationTree) -> int:
    """Number of encoder steps for a tree; root-only trees still take one step."""
    return max(depth(tree), 1)


def encode(tree: PropagationTree, encoder: EpiEncoder) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-tree convenience wrapper: ``(x_g, p_hat)`` with ``p_hat`` of shape ``(T, 3)``."""
    dtype = encoder.W_u0.dtype
    x_g, p_hat = encoder(torch.tensor([tree.n], dtype=dtype), torch.tensor([unroll_length(tree)]))
    return x_g[0], p_hat[0]


def learned_support_share(encoder: EpiEncoder) -> float:
    a, b = float(encoder.alpha.detach()), float(encoder.beta.detach())
    return a / (a + b)


def set_rates(encoder: EpiEncoder, alpha: Optional[float] = None, beta: Optional[float] = None) -> None:
    with torch.no_grad():
        if alpha is not None:
            encoder.alpha_raw.fill_(raw_from_rate(alpha))
        if beta is not None:
            encoder.beta_raw.fill_(raw_from_rate(beta))
