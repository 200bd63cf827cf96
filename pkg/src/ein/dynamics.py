"""Population-level Unknown/Support/Denial dynamics and a synthetic cascade generator.

The environmental model moves Unknown mass to Support at rate ``alpha * e`` and
to Denial at rate ``beta * e``; the classic USD variant instead couples the
transitions bilinearly to the current Support/Denial mass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .stance import StateLabels, states_from_stances
from .tree import Node, PropagationTree, canonical_order

logger = logging.getLogger(__name__)

ENVIRONMENT_RATE = 1.0


@dataclass(frozen=True)
class EusdParams:
    alpha: float
    beta: float
    e: float = ENVIRONMENT_RATE

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError(f"rates must lie in [0, 1], got alpha={self.alpha}, beta={self.beta}")
        if self.alpha + self.beta > 1.0:
            raise ValueError("alpha + beta > 1 makes the discrete step overshoot")
        if self.e <= 0:
            raise ValueError("environment rate must be positive")


@dataclass(frozen=True)
class PopulationState:
    U: float
    S: float
    D: float

    def __post_init__(self):
        if min(self.U, self.S, self.D) < 0:
            raise ValueError(f"negative population {self}")

    @property
    def total(self) -> float:
        return self.U + self.S + self.D

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.U, self.S, self.D)


def step_eusd(state: PopulationState, p: EusdParams) -> PopulationState:
    to_s = p.alpha * state.U * p.e
    to_d = p.beta * state.U * p.e
    return PopulationState(state.U - to_s - to_d, state.S + to_s, state.D + to_d)


def euler_eusd(initial: PopulationState, p: EusdParams, t: float, n_steps: int) -> PopulationState:
    """Forward-difference solution at time ``t`` using ``n_steps`` equal substeps."""
    dt = t / n_steps
    sub = EusdParams(p.alpha * dt, p.beta * dt, p.e)
    state = initial
    for _ in range(n_steps):
        state = step_eusd(state, sub)
    return state


def solve_eusd_closed_form(initial: PopulationState, p: EusdParams, t: float) -> PopulationState:
    rate = (p.alpha + p.beta) * p.e
    if rate == 0:
        raise ValueError("alpha + beta must be positive")
    if t < 0:
        raise ValueError("t must be nonnegative")
    decay = math.exp(-rate * t)
    moved = initial.U * (1.0 - decay)
    share = p.alpha / (p.alpha + p.beta)
    return PopulationState(
        initial.U * decay,
        initial.S + share * moved,
        initial.D + (1.0 - share) * moved,
    )


def step_usd(state: PopulationState, p: EusdParams) -> PopulationState:
    """One unit step of the bilinear USD model on population fractions."""
    u, s, d = state.as_tuple()
    if abs(u + s + d - 1.0) > 1e-9:
        raise ValueError(f"USD state must be normalized fractions, sum is {u + s + d}")
    to_s = p.alpha * u * s
    to_d = p.beta * u * d
    outflow = to_s + to_d
    if outflow > u:
        logger.warning("USD step clamped: outflow %.6g exceeds unknown mass %.6g", outflow, u)
        scale = u / outflow
        to_s *= scale
        to_d *= scale
        return PopulationState(0.0, s + to_s, d + to_d)
    return PopulationState(u - outflow, s + to_s, d + to_d)


# ---------------------------------------------------------------------------
# synthetic cascades

SUPPORT_PHRASES = ("i believe this", "so sad, praying", "stay safe everyone", "confirmed by my friend", "thanks for sharing")
DENY_PHRASES = ("this is fake", "i doubt it", "rumor, do not share", "that is a lie", "false report")


@dataclass(frozen=True)
class Regime:
    alpha: float
    beta: float
    min_nodes: int = 5
    max_nodes: int = 40
    max_depth: int = 8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"invalid regime rates {self.alpha}, {self.beta}")
        if not 1 <= self.min_nodes <= self.max_nodes:
            raise ValueError(f"invalid node range [{self.min_nodes}, {self.max_nodes}]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")

    @property
    def support_probability(self) -> float:
        return self.alpha / (self.alpha + self.beta)


@dataclass(frozen=True)
class GeneratorConfig:
    """Per-class regimes (index = event label) plus feature synthesis settings.

    ``feature_source`` picks whether a node's pattern vector follows its state
    (relative to the root) or its stance (relative to its parent).
    """

    regimes: tuple[Regime, ...] = (
        Regime(alpha=0.6, beta=0.2),
        Regime(alpha=0.2, beta=0.6),
    )
    dim: int = 200
    sigma: float = 1.0
    signal: float = 1.0
    feature_source: str = "state"
    pattern_seed: int = 0

    def __post_init__(self):
        if not self.regimes:
            raise ValueError("need at least one regime")
        if self.dim < 2:
            raise ValueError("feature dim must be at least 2 for orthogonal patterns")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.feature_source not in ("state", "stance"):
            raise ValueError(f"unknown feature_source {self.feature_source!r}")

    def patterns(self) -> tuple[np.ndarray, np.ndarray]:
        """Orthogonal support/denial pattern vectors of norm ``signal``."""
        rng = np.random.default_rng(self.pattern_seed)
        q, _ = np.linalg.qr(rng.standard_normal((self.dim, 2)))
        return self.signal * q[:, 0], self.signal * q[:, 1]


def generate_synthetic_tree(
    gen: GeneratorConfig,
    rng: np.random.Generator,
    label: Optional[int] = None,
    event_id: Optional[str] = None,
) -> tuple[PropagationTree, StateLabels]:
    if label is None:
        label = int(rng.integers(len(gen.regimes)))
    if not 0 <= label < len(gen.regimes):
        raise ValueError(f"no regime for label {label}")
    regime = gen.regimes[label]
    n = int(rng.integers(regime.min_nodes, regime.max_nodes + 1))
    event_id = event_id or f"synth-{label}-{int(rng.integers(1 << 31))}"

    parents = [-1]
    depths = [0]
    eligible = [0]
    for i in range(1, n):
        p = eligible[int(rng.integers(len(eligible)))]
        parents.append(p)
        depths.append(depths[p] + 1)
        if depths[i] < regime.max_depth:
            eligible.append(i)

    support = rng.random(n) < regime.support_probability
    states = {i: 0 if support[i] else 1 for i in range(1, n)}
    stances = {i: states[i] ^ (states[parents[i]] if parents[i] > 0 else 0) for i in range(1, n)}

    texts = [f"source post {event_id}"]
    for i in range(1, n):
        phrases = DENY_PHRASES if stances[i] else SUPPORT_PHRASES
        texts.append(phrases[int(rng.integers(len(phrases)))])

    m_s, m_d = gen.patterns()
    x = gen.sigma * rng.standard_normal((n, gen.dim))
    for i in range(1, n):
        flag = states[i] if gen.feature_source == "state" else stances[i]
        x[i] += m_d if flag else m_s

    order = canonical_order(parents)
    pos = {old: new for new, old in enumerate(order)}
    nodes = tuple(
        Node(pos[old], None if old == 0 else pos[parents[old]], texts[old]) for old in order
    )
    states = {pos[v]: s for v, s in states.items()}
    stances = {pos[v]: s for v, s in stances.items()}
    tree = PropagationTree(event_id=event_id, nodes=nodes, label=label, features=x[order])
    return tree, StateLabels(event_id, states, stances)


def generate_dataset(gen: GeneratorConfig, count: int, seed: int) -> list[tuple[PropagationTree, StateLabels]]:
    """Class-balanced synthetic corpus; tree ``i`` uses its own spawned seed."""
    if count < 1:
        raise ValueError("count must be positive")
    seeds = np.random.SeedSequence(seed).spawn(count)
    out = []
    for i, ss in enumerate(seeds):
        label = i % len(gen.regimes)
        out.append(generate_synthetic_tree(gen, np.random.default_rng(ss), label=label, event_id=f"synth-{seed}-{i:06d}"))
    return out
