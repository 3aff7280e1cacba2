"""Differentiable adaptive computation time: halting chain, accumulator, halting test.

A stepwise model emits, at step ``n``, a class distribution ``y_n`` and a
halting signal ``h_n`` in [0, 1]. The chain ``p_n = h_n * p_{n-1}`` (``p_0 = 1``)
caps how much every later step may still move the answer, and the accumulator

    a_n = y_n * p_{n-1} + a_{n-1} * (1 - p_{n-1}),    a_0 = 0

is the running answer. Training unrolls all ``N`` steps on the autodiff tape;
inference stops at the first step where the top class provably cannot be
overtaken in the remaining ``N - n`` steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .autodiff import Graph

SLACK = 1e-12


class Stepper(Protocol):
    n_classes: int

    def initial_state(self, x: int) -> int: ...

    def step(self, state: int, x: int) -> tuple[int, int, int]:
        """Return node ids ``(y_n, h_n, next_state)``."""


class StepwiseModel(Protocol):
    def bind(self, graph: Graph) -> Stepper: ...


@dataclass(frozen=True)
class HaltingTrace:
    h: tuple[float, ...]
    p: tuple[float, ...]

    @classmethod
    def from_h(cls, h: Sequence[float]) -> "HaltingTrace":
        p, prev = [], 1.0
        for hn in h:
            prev = update_p(prev, hn)
            p.append(prev)
        return cls(tuple(float(x) for x in h), tuple(p))

    def __len__(self) -> int:
        return len(self.h)


@dataclass
class AccumulatorState:
    a: np.ndarray
    p_carry: float = 1.0
    n: int = 0

    @classmethod
    def initial(cls, n_classes: int) -> "AccumulatorState":
        return cls(np.zeros(n_classes), 1.0, 0)


@dataclass(frozen=True)
class HaltDecision:
    halt: bool
    top_class: int
    runner_up: int
    lower_bound: float
    upper_bound: float
    d: int


def _check_unit(name: str, x: float) -> None:
    if not (-SLACK <= x <= 1.0 + SLACK):
        raise ValueError(f"{name}={x!r} outside [0, 1]")


def update_p(p_prev: float, h_n: float) -> float:
    _check_unit("p_prev", p_prev)
    _check_unit("h_n", h_n)
    return h_n * p_prev


def accumulate(acc: AccumulatorState, y_n: np.ndarray) -> AccumulatorState:
    """One accumulator update; the caller advances ``p_carry`` with ``update_p``."""
    y_n = np.asarray(y_n, dtype=np.float64)
    if y_n.shape != acc.a.shape:
        raise ValueError(f"y_n has shape {y_n.shape}, accumulator has {acc.a.shape}")
    if abs(float(np.sum(y_n)) - 1.0) > 1e-9 or np.any(y_n < 0):
        raise ValueError("y_n is not a probability vector")
    p = acc.p_carry
    a = y_n * p + acc.a * (1.0 - p)
    return AccumulatorState(a, p, acc.n + 1)


def implicit_weights(trace: HaltingTrace | np.ndarray, N: int) -> np.ndarray:
    """Weights ``beta`` with ``a_N = sum_i beta_i y_i``.

    Built step by step: each new step enters with weight ``p_{n-1}`` and all
    earlier weights shrink by ``1 - p_{n-1}``. Only ``p_1 .. p_{N-1}`` enter, so
    a trace of length ``N - 1`` suffices. ``trace`` may also be an array of
    chains with shape [..., L]; the result then has shape [..., N].
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    p = np.asarray(trace.p if isinstance(trace, HaltingTrace) else trace, dtype=np.float64)
    have = 0 if p.ndim == 0 else p.shape[-1]
    if have == 0 or have < N - 1:
        raise ValueError(f"trace has {have} entries, need at least {max(N - 1, 1)}")
    beta = np.zeros(p.shape[:-1] + (N,))
    for n in range(1, N + 1):
        p_prev = np.ones(p.shape[:-1]) if n == 1 else p[..., n - 2]
        beta[..., : n - 1] *= (1.0 - p_prev)[..., None]
        beta[..., n - 1] = p_prev
    return beta


def ponder_cost(trace: HaltingTrace, N: int) -> float:
    if len(trace.p) < N:
        raise ValueError(f"trace has {len(trace.p)} entries, need {N}")
    return float(sum(trace.p[:N]))


def composite_loss(task_loss: float, rho: float, tau: float) -> float:
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return task_loss + tau * rho


def bound_top(pr_top: float, p_n: float, d: int) -> float:
    """Lowest value the current top class can reach after ``d`` more steps."""
    return pr_top * (1.0 - p_n) ** d


def bound_runner_up(pr_ru: float, p_n: float, d: int) -> float:
    """Highest value the runner-up can reach after ``d`` more steps."""
    return pr_ru + p_n * d


def top_two(a: np.ndarray) -> tuple[int, int]:
    """Argmax (lowest index on ties) and the best remaining class."""
    a = np.asarray(a)
    if a.shape[-1] < 2:
        raise ValueError("halting test needs at least 2 classes")
    order = np.argsort(-a, kind="stable")
    return int(order[0]), int(order[1])


def should_halt(acc: AccumulatorState, p_n: float, d: int) -> HaltDecision:
    if acc.n < 1:
        raise ValueError("no step has been accumulated yet")
    if d < 0:
        raise ValueError("d must be >= 0")
    c_star, c_ru = top_two(acc.a)
    lower = bound_top(float(acc.a[c_star]), p_n, d)
    upper = bound_runner_up(float(acc.a[c_ru]), p_n, d)
    if acc.a[c_star] == acc.a[c_ru]:
        halt = lower > upper
    else:
        halt = lower >= upper
    return HaltDecision(bool(halt), c_star, c_ru, lower, upper, d)


def halt_mask(a: np.ndarray, p_n: np.ndarray, d: int) -> np.ndarray:
    """Vectorized ``should_halt`` over rows of ``a`` ([B, C]) with ``p_n`` ([B])."""
    order = np.argsort(-a, axis=-1, kind="stable")
    rows = np.arange(a.shape[0])
    top = a[rows, order[:, 0]]
    ru = a[rows, order[:, 1]]
    lower = top * (1.0 - p_n) ** d
    upper = ru + p_n * d
    return np.where(top == ru, lower > upper, lower >= upper)


# ---------------------------------------------------------------------------
# graph-level forward passes


@dataclass
class ForwardPass:
    """Node ids of one unrolled DACT computation on ``graph``."""

    graph: Graph
    Y: int
    rho: int
    h: list[int] = field(default_factory=list)
    p: list[int] = field(default_factory=list)
    y: list[int] = field(default_factory=list)
    a: list[int] = field(default_factory=list)
    stepper: Stepper | None = None

    def value(self, node: int) -> np.ndarray:
        return self.graph.value(node)

    def trace(self) -> HaltingTrace:
        # single-sample view
        return HaltingTrace(
            tuple(float(self.value(i).reshape(-1)[0]) for i in self.h),
            tuple(float(self.value(i).reshape(-1)[0]) for i in self.p),
        )

    @property
    def intermediates(self) -> list[np.ndarray]:
        return [self.value(i) for i in self.y]


def run_training_forward(
    model: StepwiseModel, x: np.ndarray, N: int, graph: Graph | None = None
) -> ForwardPass:
    """Unroll all ``N`` steps on the tape, chaining the halting recurrences.

    ``x`` may be one input vector or a [B, D] batch. ``rho`` is a per-sample
    node with trailing dim 1; ``Y`` is ``a_N``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    g = graph if graph is not None else Graph()
    stepper = model.bind(g)
    x_id = g.leaf(x)
    lead = np.shape(x)[:-1]
    state = stepper.initial_state(x_id)
    p_prev = g.leaf(np.ones(lead + (1,)))
    a_prev = g.leaf(np.zeros(lead + (stepper.n_classes,)))
    fp = ForwardPass(g, -1, -1, stepper=stepper)
    rho = None
    for _ in range(N):
        y, h, state = stepper.step(state, x_id)
        a_prev = g.add(g.multiply(y, p_prev), g.multiply(a_prev, g.one_minus(p_prev)))
        p_prev = g.multiply(h, p_prev)
        rho = p_prev if rho is None else g.add(rho, p_prev)
        fp.h.append(h)
        fp.p.append(p_prev)
        fp.y.append(y)
        fp.a.append(a_prev)
    fp.Y = a_prev
    fp.rho = rho
    return fp


def composite_loss_node(g: Graph, fp: ForwardPass, targets, tau: float) -> tuple[int, int, int]:
    """Batch-mean cross-entropy plus ``tau`` times batch-mean ponder cost.

    Returns ``(loss, task_loss, mean_rho)`` node ids.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    task = cross_entropy_node(g, fp.Y, targets)
    batch = int(np.prod(g.value(fp.rho).shape[:-1], dtype=np.int64))
    mean_rho = g.scale(g.sum(fp.rho), 1.0 / batch)
    if tau == 0:
        return task, task, mean_rho
    return g.add(task, g.scale(mean_rho, tau)), task, mean_rho


def cross_entropy_node(g: Graph, probs: int, targets) -> int:
    targets = np.asarray(targets, dtype=np.int64)
    picked = g.index_select(probs, targets)
    n = max(int(targets.size), 1)
    return g.scale(g.sum(g.log(picked)), -1.0 / n)


@dataclass
class InferenceResult:
    Y: np.ndarray
    steps_used: int
    trace: HaltingTrace
    intermediates: list[np.ndarray]
    halted_early: bool

    @property
    def final_class(self) -> int:
        return top_two(self.Y)[0]


def run_inference(
    model: StepwiseModel,
    x: np.ndarray,
    N: int,
    halting_enabled: bool = True,
    keep_intermediates: bool = True,
) -> InferenceResult:
    """Step one input sequentially and stop at the first provable halt."""
    if N < 1:
        raise ValueError("N must be >= 1")
    g = Graph(record=False)
    stepper = model.bind(g)
    x_id = g.leaf(x)
    state = stepper.initial_state(x_id)
    p_prev = g.leaf(np.ones(1))
    a_prev = g.leaf(np.zeros(stepper.n_classes))
    hs, ps, ys = [], [], []
    steps = N
    for n in range(1, N + 1):
        y, h, state = stepper.step(state, x_id)
        a_prev = g.add(g.multiply(y, p_prev), g.multiply(a_prev, g.one_minus(p_prev)))
        p_prev = g.multiply(h, p_prev)
        hs.append(float(g.value(h)[0]))
        ps.append(float(g.value(p_prev)[0]))
        if keep_intermediates:
            ys.append(g.value(y).copy())
        if halting_enabled and n < N:
            acc = AccumulatorState(g.value(a_prev), ps[-1], n)
            if should_halt(acc, ps[-1], N - n).halt:
                steps = n
                break
    return InferenceResult(
        g.value(a_prev).copy(), steps, HaltingTrace(tuple(hs), tuple(ps)), ys, steps < N
    )


def accumulate_sequence(h: Sequence[float], ys: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Plain-float reference unroll; returns ``a_1 .. a_N``."""
    acc = AccumulatorState.initial(len(ys[0]))
    out = []
    for hn, y in zip(h, ys):
        acc = accumulate(acc, y)
        acc.p_carry = update_p(acc.p_carry, hn)
        out.append(acc.a)
    return out

