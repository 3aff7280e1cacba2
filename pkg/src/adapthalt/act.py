"""Graves-style adaptive computation time, used as the comparison baseline.

Halting activations are summed until they reach ``1 - epsilon``; the last
weight is replaced by the remainder so the weights add up to one. Unlike the
original, the weights combine the per-step output distributions rather than
hidden states, so both halting schemes share the same cell and output head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adaptive import Stepper, StepwiseModel
from .autodiff import Graph

DEFAULT_EPSILON = 0.01


@dataclass(frozen=True)
class ActTrace:
    h: tuple[float, ...]
    n_halt: int
    remainder: float
    weights: tuple[float, ...]

    @property
    def steps_used(self) -> int:
        return self.n_halt


def act_weights(h: Sequence[float], N: int, epsilon: float = DEFAULT_EPSILON) -> ActTrace:
    """Threshold rule on a halting sequence (entries past the halt are ignored)."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if N < 1:
        raise ValueError("N must be >= 1")
    total = 0.0
    n_halt = N
    for n in range(1, N + 1):
        if n > len(h):
            raise ValueError(f"halting sequence has {len(h)} entries, run needs more")
        if total + h[n - 1] >= 1.0 - epsilon:
            n_halt = n
            break
        total += h[n - 1]
    # recompute the prefix left to right so the remainder pairs with the same sum
    prefix = 0.0
    for i in range(n_halt - 1):
        prefix += h[i]
    remainder = 1.0 - prefix
    weights = tuple(float(x) for x in h[: n_halt - 1]) + (remainder,)
    return ActTrace(tuple(float(x) for x in h[:n_halt]), n_halt, remainder, weights)


def act_ponder(trace: ActTrace) -> float:
    """Steps used plus remainder."""
    return trace.n_halt + trace.remainder


@dataclass
class ActResult:
    Y: np.ndarray
    steps_used: int
    trace: ActTrace
    intermediates: list[np.ndarray]


def act_run(model: StepwiseModel, x: np.ndarray, N: int, epsilon: float = DEFAULT_EPSILON) -> ActResult:
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    g = Graph(record=False)
    stepper = model.bind(g)
    x_id = g.leaf(x)
    state = stepper.initial_state(x_id)
    hs: list[float] = []
    ys: list[np.ndarray] = []
    total = 0.0
    for n in range(1, N + 1):
        y, h, state = stepper.step(state, x_id)
        hs.append(float(g.value(h)[0]))
        ys.append(g.value(y).copy())
        if total + hs[-1] >= 1.0 - epsilon:
            break
        total += hs[-1]
    trace = act_weights(hs, N, epsilon)
    Y = np.zeros_like(ys[0])
    for w, y in zip(trace.weights, ys):
        Y = Y + w * y
    return ActResult(Y, trace.n_halt, trace, ys)


@dataclass
class ActForward:
    graph: Graph
    Y: int
    ponder: int
    n_halt: np.ndarray
    stepper: Stepper


def act_training_forward(
    model: StepwiseModel, x: np.ndarray, N: int, epsilon: float = DEFAULT_EPSILON,
    graph: Graph | None = None,
) -> ActForward:
    """Batched ACT unroll on the tape.

    The halting step is read off the forward values (not differentiable); the
    weights and remainder are built from constant masks so gradient flows into
    every ``h_i`` that was used before the halt.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    g = graph if graph is not None else Graph()
    stepper = model.bind(g)
    x_id = g.leaf(x)
    state = stepper.initial_state(x_id)
    ys, hs = [], []
    for _ in range(N):
        y, h, state = stepper.step(state, x_id)
        ys.append(y)
        hs.append(h)
    hv = np.stack([g.value(h)[..., 0] for h in hs], axis=-1)  # [..., N]
    crossed = np.cumsum(hv, axis=-1) >= 1.0 - epsilon
    crossed[..., -1] = True
    n_halt = np.argmax(crossed, axis=-1) + 1
    steps = np.arange(1, N + 1)
    lt = (steps < n_halt[..., None]).astype(np.float64)
    eq = (steps == n_halt[..., None]).astype(np.float64)

    used = None
    for i in range(N - 1):
        if not lt[..., i].any():
            continue
        term = g.multiply(hs[i], g.leaf(lt[..., i : i + 1]))
        used = term if used is None else g.add(used, term)
    remainder = g.one_minus(used) if used is not None else g.leaf(np.ones(hv.shape[:-1] + (1,)))

    Y = None
    for i in range(N):
        parts = []
        if lt[..., i].any():
            parts.append(g.multiply(hs[i], g.leaf(lt[..., i : i + 1])))
        if eq[..., i].any():
            parts.append(g.multiply(remainder, g.leaf(eq[..., i : i + 1])))
        if not parts:
            continue
        w = parts[0] if len(parts) == 1 else g.add(parts[0], parts[1])
        term = g.multiply(ys[i], w)
        Y = term if Y is None else g.add(Y, term)
    ponder = g.add(remainder, g.leaf(n_halt[..., None].astype(np.float64)))
    return ActForward(g, Y, ponder, n_halt, stepper)
