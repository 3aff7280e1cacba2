"""Brute-force audits of the closed-form claims behind the halting scheme.

Every check draws its randomness from a dedicated ``numpy`` generator seeded
from ``(ORACLE_STREAM, seed)``, so reports are reproducible and independent of
training RNG. Halting signals are drawn uniform on [0, 1]; class distributions
are drawn uniform on the simplex by normalizing i.i.d. exponentials.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .adaptive import (
    AccumulatorState,
    bound_runner_up,
    bound_top,
    composite_loss_node,
    implicit_weights,
    run_training_forward,
    should_halt,
)
from .autodiff import Graph, ParamStore, finite_diff_gradient, relative_error
from .cells import GRUCell, init_params
from .train import dact_accumulate

ORACLE_STREAM = 0x0AC7
MAX_STORED = 25
BOUND_SLACK = 1e-12


@dataclass
class Report:
    name: str
    n_checked: int = 0
    n_violations: int = 0
    violations: list[dict[str, Any]] = field(default_factory=list)
    stats: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.n_violations == 0

    def flag(self, **row: Any) -> None:
        self.n_violations += 1
        if len(self.violations) < MAX_STORED:
            self.violations.append(row)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        stats = ", ".join(f"{k}={_fmt(v)}" for k, v in self.stats.items())
        return f"[{status}] {self.name}: {self.n_checked} checked, {self.n_violations} violations ({stats})"


def _fmt(v: Any) -> str:
    return f"{v:.3g}" if isinstance(v, float) else str(v)


def oracle_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([ORACLE_STREAM, seed])


def simplex(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    e = rng.exponential(size=shape)
    return e / e.sum(axis=-1, keepdims=True)


def closed_form_weights(p: np.ndarray, N: int) -> np.ndarray:
    """``beta_i = p_{i-1} * prod_{j=i}^{N-1} (1 - p_j)`` evaluated directly."""
    lead = p.shape[:-1]
    p_full = np.concatenate([np.ones(lead + (1,)), p[..., : N - 1]], axis=-1)  # p_0 .. p_{N-1}
    beta = np.empty(lead + (N,))
    for i in range(1, N + 1):
        tail = np.prod(1.0 - p_full[..., i:N], axis=-1)
        beta[..., i - 1] = p_full[..., i - 1] * tail
    return beta


# ---------------------------------------------------------------------------


def verify_weighted_sum(n_trials: int = 100_000, N_range: tuple[int, int] = (1, 12), seed: int = 0,
                        n_classes: int = 4, tol: float = 1e-12) -> Report:
    """Accumulator unroll equals the implicit-weight mixture; weights form a distribution."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = oracle_rng(seed)
    rep = Report("weighted_sum")
    Ns = list(range(N_range[0], N_range[1] + 1))
    per = np.full(len(Ns), n_trials // len(Ns))
    per[: n_trials % len(Ns)] += 1
    dev = sum_dev = closed_dev = 0.0
    min_beta = np.inf
    for N, T in zip(Ns, per):
        if T == 0:
            continue
        h = rng.uniform(size=(T, N))
        y = simplex(rng, (T, N, n_classes))
        a, p = dact_accumulate(np.moveaxis(y, 1, 0), h.T)
        a_N = a[-1]
        beta = implicit_weights(p.T, N)
        mix = np.einsum("tn,tnc->tc", beta, y)
        d_mix = np.abs(a_N - mix).max(axis=1)
        d_sum = np.abs(beta.sum(axis=1) - 1.0)
        d_closed = np.abs(beta - closed_form_weights(p.T, N)).max(axis=1)
        bad = (d_mix > tol) | (d_sum > tol) | (d_closed > tol) | (beta.min(axis=1) < 0)
        for t in np.flatnonzero(bad):
            rep.flag(N=N, trial=int(t), mix_dev=float(d_mix[t]), sum_dev=float(d_sum[t]),
                     closed_dev=float(d_closed[t]))
        rep.n_checked += int(T)
        dev = max(dev, float(d_mix.max()))
        sum_dev = max(sum_dev, float(d_sum.max()))
        closed_dev = max(closed_dev, float(d_closed.max()))
        min_beta = min(min_beta, float(beta.min()))
    rep.stats = {"max_abs_deviation": dev, "max_weight_sum_error": sum_dev,
                 "max_closed_form_gap": closed_dev, "min_weight": min_beta}
    return rep


def _continue(a: np.ndarray, p: np.ndarray, y: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Advance accumulators ``a`` [M, C] with carries ``p`` [M] through ``y`` [M, d, C], ``h`` [M, d]."""
    p = p[:, None]
    for j in range(y.shape[1]):
        a = y[:, j] * p + a * (1.0 - p)
        p = h[:, j : j + 1] * p
    return a


def verify_halting_soundness(n_traces: int = 1000, n_continuations: int = 10_000, N: int = 10,
                             C: int = 3, seed: int = 0, zero_fraction: float = 0.1) -> Report:
    """Collect ``n_traces`` halt events and try to overturn each one.

    Each event gets the adversarial continuation (all future mass on the
    runner-up, ``h = 1``) and ``n_continuations`` random ones. A fraction of
    prefixes get an exact ``h = 0`` so the frozen-answer case is exercised.
    """
    if n_traces < 1 or n_continuations < 1:
        raise ValueError("counts must be >= 1")
    if C < 2:
        raise ValueError("need at least 2 classes")
    rng = oracle_rng(seed + 1)
    rep = Report("halting_soundness")
    events = attempts = frozen = 0
    steps_hist = np.zeros(N + 1, dtype=int)
    while events < n_traces:
        attempts += 1
        if attempts > 1000 * n_traces:
            raise RuntimeError("halting test almost never fires for this configuration")
        h = rng.uniform(size=N)
        if rng.uniform() < zero_fraction:
            h[rng.integers(0, N)] = 0.0
        y = simplex(rng, (N, C))
        acc = AccumulatorState.initial(C)
        halted_at = None
        for n in range(1, N):
            acc = AccumulatorState(y[n - 1] * acc.p_carry + acc.a * (1.0 - acc.p_carry),
                                   acc.p_carry * h[n - 1], n)
            if should_halt(acc, acc.p_carry, N - n).halt:
                halted_at = n
                break
        if halted_at is None:
            continue
        events += 1
        n, d = halted_at, N - halted_at
        steps_hist[n] += 1
        decision = should_halt(acc, acc.p_carry, d)
        c_star, c_ru = decision.top_class, decision.runner_up

        adv_y = np.zeros((1, d, C))
        adv_y[..., c_ru] = 1.0
        a_adv = _continue(acc.a[None], np.array([acc.p_carry]), adv_y, np.ones((1, d)))
        if int(np.argmax(a_adv[0])) != c_star:
            rep.flag(kind="adversarial", event=events, step=n, a_n=acc.a.tolist(), p_n=acc.p_carry)
        rep.n_checked += 1

        ys = simplex(rng, (n_continuations, d, C))
        hs = rng.uniform(size=(n_continuations, d))
        a_rand = _continue(np.broadcast_to(acc.a, (n_continuations, C)).copy(),
                           np.full(n_continuations, acc.p_carry), ys, hs)
        flips = np.flatnonzero(np.argmax(a_rand, axis=1) != c_star)
        for f in flips:
            rep.flag(kind="random", event=events, step=n, continuation=int(f), p_n=acc.p_carry)
        rep.n_checked += n_continuations
        if acc.p_carry == 0.0:
            frozen += 1
            if not np.all(a_rand == acc.a) or not np.all(a_adv == acc.a):
                rep.flag(kind="frozen_changed", event=events, step=n)
    rep.stats = {"halt_events": events, "prefixes_drawn": attempts, "frozen_events": frozen,
                 "halt_step_counts": steps_hist[1:].tolist()}
    return rep


def verify_bounds(n_trials: int = 100_000, seed: int = 0, N_range: tuple[int, int] = (2, 12),
                  C: int = 4) -> Report:
    """Realized final probabilities against product-form and simplified bounds at every prefix."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = oracle_rng(seed + 2)
    rep = Report("bounds")
    Ns = list(range(N_range[0], N_range[1] + 1))
    per = np.full(len(Ns), n_trials // len(Ns))
    per[: n_trials % len(Ns)] += 1
    min_gap_top = min_gap_ru = np.inf
    for N, T in zip(Ns, per):
        if T == 0:
            continue
        # mix slow and fast decaying chains
        h = rng.uniform(size=(T, N)) ** rng.choice([0.05, 0.3, 1.0], size=(T, 1))
        y = simplex(rng, (T, N, C))
        a, p = dact_accumulate(np.moveaxis(y, 1, 0), h.T)
        a = np.moveaxis(a, 0, 1)  # [T, N, C]
        p = p.T  # [T, N]
        rows = np.arange(T)
        for n in range(1, N):
            d = N - n
            order = np.argsort(-a[:, n - 1], axis=1, kind="stable")
            cs, cr = order[:, 0], order[:, 1]
            top_n, ru_n = a[rows, n - 1, cs], a[rows, n - 1, cr]
            top_N, ru_N = a[rows, -1, cs], a[rows, -1, cr]
            future = p[:, n - 1 : N - 1]  # p_n .. p_{N-1}
            keep = np.prod(1.0 - future, axis=1)
            inflow = np.zeros(T)
            for i in range(future.shape[1]):
                inflow += future[:, i] * np.prod(1.0 - future[:, i + 1 :], axis=1)
            prod_top = top_n * keep
            prod_ru = ru_n * keep + inflow
            simp_top = bound_top(top_n, p[:, n - 1], d)
            simp_ru = bound_runner_up(ru_n, p[:, n - 1], d)
            checks = {
                "realized_top>=product": top_N >= prod_top - BOUND_SLACK,
                "product_top>=simplified": prod_top >= simp_top - BOUND_SLACK,
                "realized_ru<=product": ru_N <= prod_ru + BOUND_SLACK,
                "product_ru<=simplified": prod_ru <= simp_ru + BOUND_SLACK,
            }
            for label, ok in checks.items():
                for t in np.flatnonzero(~ok):
                    rep.flag(check=label, N=N, n=n, trial=int(t))
                rep.n_checked += int(T)
            min_gap_top = min(min_gap_top, float(np.min(top_N - simp_top)))
            min_gap_ru = min(min_gap_ru, float(np.min(simp_ru - ru_N)))
    rep.stats = {"trials": int(n_trials), "min_top_margin": min_gap_top, "min_runner_up_margin": min_gap_ru}
    return rep


def _toy_problem(model_dims: tuple[int, int, int], seed: int, batch: int):
    input_dim, state_dim, n_classes = model_dims
    rng = oracle_rng(seed + 3)
    params = init_params(input_dim, state_dim, n_classes, seed)
    # push biases off zero so every path carries gradient
    for name in params.names():
        if name.startswith("b_"):
            params.params[name] = rng.uniform(-0.5, 0.5, size=params[name].shape)
    x = rng.uniform(-1, 1, size=(batch, input_dim)) if batch > 1 else rng.uniform(-1, 1, size=input_dim)
    t = rng.integers(0, n_classes, size=batch) if batch > 1 else int(rng.integers(0, n_classes))
    return params, x, t


def composite_loss_and_grads(params: ParamStore, x: np.ndarray, targets, N: int, tau: float):
    g = Graph()
    fp = run_training_forward(GRUCell(params), x, N, g)
    loss, _, _ = composite_loss_node(g, fp, np.atleast_1d(targets), tau)
    grads = g.backward(loss)
    return float(g.value(loss)), fp.stepper.param_grads(grads)


def verify_gradients(model_dims: tuple[int, int, int] = (3, 4, 2), N: int = 3, seed: int = 0,
                     tau: float = 0.01, batch: int = 1, step: float = 1e-5, tol: float = 1e-6) -> Report:
    """Backward pass through ``N`` unrolled steps against central differences."""
    params, x, t = _toy_problem(model_dims, seed, batch)
    rep = Report("gradients")

    def loss_at(vals, tau=tau):
        return composite_loss_and_grads(ParamStore(vals), x, t, N, tau)[0]

    _, ad = composite_loss_and_grads(params, x, t, N, tau)
    fd = finite_diff_gradient(loss_at, params, step)
    err = relative_error(ad, fd)
    per_tensor = {k: relative_error({k: ad[k]}, {k: fd[k]}) for k in ad}
    rep.n_checked = params.n_scalars()
    if err >= tol:
        rep.flag(check="backward_vs_fd", rel_err=err)

    # the ponder term contributes exactly tau * d(rho)
    _, ad0 = composite_loss_and_grads(params, x, t, N, 0.0)
    _, ad1 = composite_loss_and_grads(params, x, t, N, 1.0)
    g = Graph()
    fp = run_training_forward(GRUCell(params), x, N, g)
    batch_n = int(np.prod(g.value(fp.rho).shape[:-1], dtype=np.int64))
    grho = fp.stepper.param_grads(g.backward(g.scale(g.sum(fp.rho), 1.0 / batch_n)))
    ponder_err = relative_error({k: ad1[k] - ad0[k] for k in ad0}, grho)
    if ponder_err >= tol:
        rep.flag(check="ponder_term", rel_err=ponder_err)

    # central differences are second order: halving the step quarters the error
    big = 1e-2
    e1 = relative_error(ad, finite_diff_gradient(loss_at, params, big))
    e2 = relative_error(ad, finite_diff_gradient(loss_at, params, big / 2))
    ratio = e1 / e2 if e2 > 0 else float("inf")
    if not 3.0 <= ratio <= 5.0:
        rep.flag(check="richardson", ratio=ratio)
    rep.stats = {"max_rel_err": err, "worst_tensor": max(per_tensor, key=per_tensor.get),
                 "ponder_term_rel_err": ponder_err, "richardson_ratio": ratio,
                 "n_params": params.n_scalars(), "N": N, "tau": tau}
    return rep


SUITES = ("weighted_sum", "soundness", "bounds", "gradients")


def run_suite(suite: str = "all", seed: int = 0, quick: bool = False) -> list[Report]:
    names = SUITES if suite == "all" else (suite,)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suite(s) {sorted(unknown)}; choose from {SUITES} or 'all'")
    scale = 10 if quick else 1
    reports = []
    for name in names:
        if name == "weighted_sum":
            reports.append(verify_weighted_sum(100_000 // scale, seed=seed))
        elif name == "soundness":
            reports.append(verify_halting_soundness(1000 // scale, 10_000 // scale, seed=seed))
        elif name == "bounds":
            reports.append(verify_bounds(100_000 // scale, seed=seed))
        else:
            reports.append(verify_gradients(seed=seed))
    return reports


def reports_json(reports: list[Report]) -> str:
    return json.dumps({"passed": all(r.passed for r in reports),
                       "reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True)
