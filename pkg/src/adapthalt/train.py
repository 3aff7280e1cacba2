"""Minibatch training, evaluation, and time-penalty sweeps.

Three methods share the same cell:

* ``dact``: cross-entropy on the accumulated answer plus ``tau`` times the
  ponder cost, all ``N`` steps unrolled; halts only at evaluation.
* ``act``: cross-entropy on the remainder-weighted answer plus ``tau`` times
  (steps used + remainder).
* ``fixed``: cross-entropy on ``y_N``; ``tau`` is ignored.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import act as act_mod
from .adaptive import composite_loss_node, cross_entropy_node, halt_mask, run_training_forward
from .autodiff import Graph, NonFiniteError, ParamStore
from .cells import GRUCell, init_params
from .tasks import Sample, TaskSpec, generate, split, stack

log = logging.getLogger(__name__)

METHODS = ("dact", "act", "fixed")


class SoundnessError(AssertionError):
    """Halting changed a prediction relative to the full unroll."""


@dataclass
class TrainConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    n_train: int = 20000
    n_eval: int = 4000
    state_dim: int = 64
    N: int = 10
    method: str = "dact"
    tau: float = 0.0
    epsilon: float = act_mod.DEFAULT_EPSILON
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    checkpoint: str | None = None

    def __post_init__(self) -> None:
        if isinstance(self.task, dict):
            self.task = TaskSpec(**self.task)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if min(self.n_train, self.n_eval, self.batch_size, self.epochs, self.state_dim) < 1:
            raise ValueError("sizes must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["task"] = self.task.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    mean_steps: float
    mean_rho: float


@dataclass
class HistogramRow:
    complexity: int
    mean_steps: float
    n_samples: int
    accuracy: float


@dataclass
class EvalResult:
    accuracy: float
    mean_steps: float
    mean_rho: float
    histogram: list[HistogramRow]
    steps: np.ndarray
    predictions: np.ndarray
    records: list[dict[str, Any]]
    spearman: float
    violations: int = 0

    def summary(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "mean_steps": self.mean_steps,
            "mean_rho": self.mean_rho,
            "spearman_steps_vs_complexity": self.spearman,
            "soundness_violations": self.violations,
            "histogram": [asdict(r) for r in self.histogram],
        }


@dataclass
class RunMetrics:
    epochs: list[EpochMetrics]
    best_epoch: int
    best_accuracy: float
    steps_at_best: float
    rho_at_best: float
    spearman_at_best: float
    histogram: list[HistogramRow]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# data


def make_data(config: TrainConfig) -> tuple[list[Sample], list[Sample]]:
    samples = generate(config.task, config.n_train + config.n_eval)
    frac = config.n_train / (config.n_train + config.n_eval)
    return split(samples, frac, config.task.seed)


# ---------------------------------------------------------------------------
# evaluation


def _unroll(params: ParamStore, x: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched no-grad unroll; returns ``y`` [N, B, C] and ``h`` [N, B]."""
    g = Graph(record=False)
    bound = GRUCell(params).bind(g)
    x_id = g.leaf(x)
    state = bound.initial_state(x_id)
    ys, hs = [], []
    for _ in range(N):
        y, h, state = bound.step(state, x_id)
        ys.append(g.value(y))
        hs.append(g.value(h)[:, 0])
    return np.stack(ys), np.stack(hs)


def dact_accumulate(ys: np.ndarray, hs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Accumulator and chain for every step: ``a`` [N, B, C], ``p`` [N, B]."""
    N, B, C = ys.shape
    a = np.zeros((N, B, C))
    p = np.zeros((N, B))
    a_prev = np.zeros((B, C))
    p_prev = np.ones((B, 1))
    for n in range(N):
        a_prev = ys[n] * p_prev + a_prev * (1.0 - p_prev)
        p_prev = hs[n][:, None] * p_prev
        a[n] = a_prev
        p[n] = p_prev[:, 0]
    return a, p


def dact_halt_steps(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    """First step at which the halting test fires (``N`` if never)."""
    N, B, _ = a.shape
    steps = np.full(B, N)
    open_ = np.ones(B, dtype=bool)
    for n in range(1, N):
        idx = np.flatnonzero(open_)
        if idx.size == 0:
            break
        fire = halt_mask(a[n - 1, idx], p[n - 1, idx], N - n)
        steps[idx[fire]] = n
        open_[idx[fire]] = False
    return steps


def evaluate_model(
    params: ParamStore,
    samples: Sequence[Sample],
    method: str,
    N: int,
    mode: str = "halting",
    epsilon: float = act_mod.DEFAULT_EPSILON,
    audit: bool = True,
    records: bool = False,
) -> EvalResult:
    """Accuracy, steps, and per-complexity histogram for one model and dataset.

    In halting mode for ``dact`` every halted prediction is compared against
    the full unroll; with ``audit`` a mismatch raises :class:`SoundnessError`.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if mode not in ("halting", "full"):
        raise ValueError("mode must be 'halting' or 'full'")
    x, targets, ks = stack(samples)
    ys, hs = _unroll(params, x, N)
    B = x.shape[0]
    rows = np.arange(B)
    violations = 0
    extra: dict[str, np.ndarray] = {}
    if method == "dact":
        a, p = dact_accumulate(ys, hs)
        rho = p.sum(axis=0)
        if mode == "halting":
            steps = dact_halt_steps(a, p)
            Y = a[steps - 1, rows]
            full_pred = np.argmax(a[-1], axis=1)
            violations = int(np.sum(np.argmax(Y, axis=1) != full_pred))
            if audit and violations:
                raise SoundnessError(f"{violations} halted predictions differ from the full unroll")
        else:
            steps = np.full(B, N)
            Y = a[-1]
        extra["p"] = p.T
    elif method == "act":
        hv = hs.T
        crossed = np.cumsum(hv, axis=1) >= 1.0 - epsilon
        crossed[:, -1] = True
        n_halt = np.argmax(crossed, axis=1) + 1
        step_idx = np.arange(1, N + 1)
        lt = step_idx[None, :] < n_halt[:, None]
        prefix = np.where(lt, hv, 0.0).sum(axis=1)
        remainder = 1.0 - prefix
        w = np.where(lt, hv, 0.0) + np.where(step_idx[None, :] == n_halt[:, None], remainder[:, None], 0.0)
        Y = np.einsum("bn,nbc->bc", w, ys)
        rho = n_halt + remainder
        steps = n_halt if mode == "halting" else np.full(B, N)
        extra["p"] = 1.0 - np.cumsum(hv, axis=1)
    else:
        Y = ys[-1]
        rho = np.zeros(B)
        steps = np.full(B, N)
        extra["p"] = np.ones((B, N))
    pred = np.argmax(Y, axis=1)
    correct = pred == targets
    hist = []
    for k in sorted(set(int(v) for v in ks)):
        m = ks == k
        hist.append(HistogramRow(k, float(steps[m].mean()), int(m.sum()), float(correct[m].mean())))
    if np.all(steps == steps[0]) or np.all(ks == ks[0]):
        rho_s = 0.0
    else:
        rho_s = float(spearmanr(steps, ks).statistic)
    recs: list[dict[str, Any]] = []
    if records:
        inter = np.argmax(ys, axis=2).T
        for i in range(B):
            n = int(steps[i])
            recs.append({
                "sample_id": i,
                "method": method,
                "steps_used": n,
                "halted_early": bool(n < N),
                "h": [float(v) for v in hs[:n, i]],
                "p": [float(v) for v in extra["p"][i, :n]],
                "intermediate_argmax": [int(v) for v in inter[i, :n]],
                "final_class": int(pred[i]),
                "target_class": int(targets[i]),
                "complexity": int(ks[i]),
            })
    return EvalResult(
        accuracy=float(correct.mean()),
        mean_steps=float(steps.mean()),
        mean_rho=float(np.mean(rho)),
        histogram=hist,
        steps=steps,
        predictions=pred,
        records=recs,
        spearman=rho_s,
        violations=violations,
    )


# ---------------------------------------------------------------------------
# training


def batch_loss(params: ParamStore, config: TrainConfig, x: np.ndarray, t: np.ndarray, graph: Graph) -> tuple[int, dict[str, int]]:
    """Build the training objective for one minibatch; returns the loss node and param nodes."""
    cell = GRUCell(params)
    if config.method == "dact":
        fp = run_training_forward(cell, x, config.N, graph)
        loss, _, _ = composite_loss_node(graph, fp, t, config.tau)
        return loss, fp.stepper.nodes
    if config.method == "act":
        af = act_mod.act_training_forward(cell, x, config.N, config.epsilon, graph)
        task = cross_entropy_node(graph, af.Y, t)
        if config.tau == 0:
            return task, af.stepper.nodes
        mean_ponder = graph.scale(graph.sum(af.ponder), 1.0 / x.shape[0])
        return graph.add(task, graph.scale(mean_ponder, config.tau)), af.stepper.nodes
    bound = cell.bind(graph)
    x_id = graph.leaf(x)
    state = bound.initial_state(x_id)
    for _ in range(config.N):
        y, _h, state = bound.step(state, x_id)
    return cross_entropy_node(graph, y, t), bound.nodes


def train_model(
    config: TrainConfig,
    data: tuple[Sequence[Sample], Sequence[Sample]] | None = None,
) -> tuple[ParamStore, RunMetrics]:
    """Adam on the method's objective; keeps the best-eval-accuracy weights."""
    train_set, eval_set = data if data is not None else make_data(config)
    spec = config.task
    params = init_params(spec.input_dim, config.state_dim, spec.n_classes, config.seed)
    x_all, t_all, _ = stack(train_set)
    rng = np.random.default_rng(config.seed + 1_000_003)
    history: list[EpochMetrics] = []
    best: tuple[float, int, ParamStore, EvalResult] | None = None
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            g = Graph()
            loss, nodes = batch_loss(params, config, x_all[idx], t_all[idx], g)
            value = float(g.value(loss))
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = g.backward(loss)
            params.adam_step(
                {name: grads[i] for name, i in nodes.items()},
                config.lr, config.beta1, config.beta2, config.adam_eps,
            )
            total += value * len(idx)
            count += len(idx)
        ev = evaluate_model(params, eval_set, config.method, config.N, "halting", config.epsilon)
        history.append(EpochMetrics(epoch, total / count, ev.accuracy, ev.mean_steps, ev.mean_rho))
        log.info(
            "%s tau=%g seed=%d epoch %d loss=%.4f acc=%.4f steps=%.2f",
            config.method, config.tau, config.seed, epoch, total / count, ev.accuracy, ev.mean_steps,
        )
        if best is None or ev.accuracy > best[0]:
            best = (ev.accuracy, epoch, params.copy(), ev)
    assert best is not None
    acc, best_epoch, best_params, ev = best
    if config.checkpoint:
        # the path itself is left out so a checkpoint's bytes do not depend on where it lives
        meta_config = replace(config, checkpoint=None).to_dict()
        best_params.save(config.checkpoint, {"config": meta_config, "epoch": best_epoch})
    metrics = RunMetrics(
        epochs=history,
        best_epoch=best_epoch,
        best_accuracy=acc,
        steps_at_best=ev.mean_steps,
        rho_at_best=ev.mean_rho,
        spearman_at_best=ev.spearman,
        histogram=ev.histogram,
    )
    return best_params, metrics


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRun:
    method: str
    tau: float
    seed: int
    metrics: RunMetrics | None
    error: str | None = None


def _run_one(config: TrainConfig) -> tuple[RunMetrics | None, str | None]:
    try:
        _, metrics = train_model(config)
        return metrics, None
    except Exception as exc:  # recorded per run, sweep continues
        return None, f"{type(exc).__name__}: {exc}"


def sweep(
    base: TrainConfig,
    taus: Sequence[float],
    seeds: Sequence[int],
    methods: Sequence[str] = ("dact",),
    jobs: int = 1,
) -> list[SweepRun]:
    """Train every (method, tau, seed); ``fixed`` runs once per seed and is shared across taus."""
    if not taus or not seeds or not methods:
        raise ValueError("taus, seeds and methods must be non-empty")
    plan: list[tuple[str, float, int]] = [(m, float(t), int(s)) for m in methods for t in taus for s in seeds]
    unique: dict[tuple[str, float, int], TrainConfig] = {}
    for m, t, s in plan:
        key = (m, 0.0 if m == "fixed" else t, s)
        if key not in unique:
            unique[key] = replace(base, method=m, tau=key[1], seed=s, checkpoint=None)
    keys = list(unique)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_one, [unique[k] for k in keys]))
    else:
        outcomes = [_run_one(unique[k]) for k in keys]
    done = dict(zip(keys, outcomes))
    runs = []
    for m, t, s in plan:
        metrics, err = done[(m, 0.0 if m == "fixed" else t, s)]
        runs.append(SweepRun(m, t, s, metrics, err))
    return runs


def per_tau_means(runs: Sequence[SweepRun]) -> list[dict[str, Any]]:
    out = []
    groups: dict[tuple[str, float], list[RunMetrics]] = {}
    for r in runs:
        if r.metrics is not None:
            groups.setdefault((r.method, r.tau), []).append(r.metrics)
    for (m, t), ms in groups.items():
        out.append({
            "method": m,
            "tau": t,
            "n_runs": len(ms),
            "accuracy": float(np.mean([x.best_accuracy for x in ms])),
            "mean_steps": float(np.mean([x.steps_at_best for x in ms])),
            "spearman": float(np.mean([x.spearman_at_best for x in ms])),
        })
    return out


# ---------------------------------------------------------------------------
# output files

METRICS_COLUMNS = ("method", "tau", "seed", "epoch", "loss", "accuracy", "mean_steps", "mean_rho")
HISTOGRAM_COLUMNS = ("method", "tau", "seed", "complexity", "mean_steps", "n_samples", "accuracy")


def _fmt(v: Any) -> str:
    # repr round-trips floats exactly and does not depend on locale
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: str | Path, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_metrics_csv(path: str | Path, runs: Sequence[SweepRun]) -> None:
    rows = [
        (r.method, r.tau, r.seed, e.epoch, e.loss, e.accuracy, e.mean_steps, e.mean_rho)
        for r in runs if r.metrics is not None for e in r.metrics.epochs
    ]
    write_csv(path, METRICS_COLUMNS, rows)


def write_histogram_csv(path: str | Path, runs: Sequence[SweepRun]) -> None:
    rows = [
        (r.method, r.tau, r.seed, h.complexity, h.mean_steps, h.n_samples, h.accuracy)
        for r in runs if r.metrics is not None for h in r.metrics.histogram
    ]
    write_csv(path, HISTOGRAM_COLUMNS, rows)


def write_summary_json(path: str | Path, payload: dict[str, Any], timestamp: bool = True) -> None:
    """Deterministic JSON; the only run-dependent field is the top-level ``generated_at``."""
    doc = dict(payload)
    if timestamp:
        doc["generated_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_records_jsonl(path: str | Path, records: Sequence[dict[str, Any]]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def sweep_summary(base: TrainConfig, taus: Sequence[float], seeds: Sequence[int], methods: Sequence[str],
                  runs: Sequence[SweepRun]) -> dict[str, Any]:
    return {
        "config": base.to_dict(),
        "taus": [float(t) for t in taus],
        "seeds": [int(s) for s in seeds],
        "methods": list(methods),
        "per_tau": per_tau_means(runs),
        "runs": [
            {"method": r.method, "tau": r.tau, "seed": r.seed, "error": r.error,
             "best_epoch": r.metrics.best_epoch if r.metrics else None,
             "best_accuracy": r.metrics.best_accuracy if r.metrics else None,
             "steps_at_best": r.metrics.steps_at_best if r.metrics else None,
             "spearman_at_best": r.metrics.spearman_at_best if r.metrics else None}
            for r in runs
        ],
    }
