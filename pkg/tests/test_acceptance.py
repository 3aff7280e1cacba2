"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The behavioral criteria (5, 6, 7) train real models at the desk-scale defaults
(20k train / 4k eval samples, 30 epochs, state 64, N = 10). On a single core
the whole file takes a little over an hour; runs are spread over all
available cores.
"""

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from adapthalt.act import act_weights
from adapthalt.cli import main as cli_main
from adapthalt.oracle import verify_bounds, verify_gradients, verify_halting_soundness, verify_weighted_sum
from adapthalt.tasks import TaskSpec
from adapthalt.train import TrainConfig, evaluate_model, make_data, per_tau_means, sweep, train_model

TAUS = (0.0, 1e-3, 5e-3, 1e-2, 5e-2)
SEEDS = (1, 2, 3)
JOBS = os.cpu_count() or 1
SCALE = dict(n_train=20_000, n_eval=4_000, epochs=30, N=10, state_dim=64)
PARITY = TaskSpec("prefix_parity", length=8, k_max=8, seed=0)
CHAIN = TaskSpec("chain_arith", length=8, k_max=8, seed=0)
CHAIN_TAU = 5e-3


# -- exact properties ----------------------------------------------------------


def test_criterion_1_convex_combination(report_criterion):
    t0 = time.perf_counter()
    rep = verify_weighted_sum(100_000, (1, 12), seed=0)
    elapsed = time.perf_counter() - t0
    ok = rep.passed and rep.stats["max_abs_deviation"] <= 1e-12 and rep.stats["max_weight_sum_error"] <= 1e-12
    ok = ok and elapsed < 10
    report_criterion(1, "convex combination", ok,
                     f"{rep.n_checked} draws, max |a_N - mix| {rep.stats['max_abs_deviation']:.2e}, "
                     f"max |sum beta - 1| {rep.stats['max_weight_sum_error']:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_halting_soundness(report_criterion, chain_runs):
    t0 = time.perf_counter()
    rep = verify_halting_soundness(1000, 10_000, seed=0)
    elapsed = time.perf_counter() - t0
    # every trained DACT model: halting and full evaluation give the same predictions
    mismatched = 0
    for params, cfg in chain_runs["dact_models"]:
        _, ev = make_data(cfg)
        halting = evaluate_model(params, ev, "dact", cfg.N, "halting", audit=False)
        full = evaluate_model(params, ev, "dact", cfg.N, "full")
        mismatched += int(halting.accuracy != full.accuracy or halting.violations != 0)
    ok = rep.passed and mismatched == 0 and elapsed < 120
    report_criterion(2, "halting soundness", ok,
                     f"{rep.stats['halt_events']} halt events x (adversarial + 10^4 random), "
                     f"{rep.n_violations} flips; {len(chain_runs['dact_models'])} trained models, "
                     f"{mismatched} halting/full mismatches; {elapsed:.1f}s")
    assert ok


def test_criterion_3_bounds(report_criterion):
    t0 = time.perf_counter()
    rep = verify_bounds(100_000, seed=0)
    elapsed = time.perf_counter() - t0
    ok = rep.passed and elapsed < 30
    report_criterion(3, "bound audit", ok,
                     f"{rep.stats['trials']} futures, {rep.n_checked} prefix checks, "
                     f"{rep.n_violations} violations, {elapsed:.1f}s")
    assert ok


def test_criterion_4_gradients(report_criterion):
    t0 = time.perf_counter()
    rep = verify_gradients((3, 4, 2), N=3, seed=0, tau=0.01)
    rep4 = verify_gradients((3, 4, 2), N=4, seed=1, tau=0.05, batch=3)
    elapsed = time.perf_counter() - t0
    worst = max(rep.stats["max_rel_err"], rep4.stats["max_rel_err"])
    ok = rep.passed and rep4.passed and worst < 1e-6 and rep.stats["n_params"] <= 500 and elapsed < 60
    report_criterion(4, "gradient audit", ok,
                     f"{rep.stats['n_params']} params, N=3 and N=4, max rel err {worst:.2e}, "
                     f"Richardson ratio {rep.stats['richardson_ratio']:.2f}, {elapsed:.1f}s")
    assert ok


def test_criterion_8_act_construction(report_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    bad_sum = bad_halt = 0
    for _ in range(10_000):
        N = int(rng.integers(1, 16))
        h = rng.uniform(size=N) * rng.choice([0.1, 0.3, 1.0])
        eps = float(rng.choice([0.01, 0.05, 0.3]))
        tr = act_weights(h, N, eps)
        bad_sum += sum(tr.weights) != 1.0
        running, first = 0.0, N
        for n in range(1, N + 1):
            running += h[n - 1]
            if running >= 1 - eps:
                first = n
                break
        bad_halt += tr.n_halt != first
    elapsed = time.perf_counter() - t0
    ok = bad_sum == 0 and bad_halt == 0 and elapsed < 5
    report_criterion(8, "ACT construction", ok,
                     f"10^4 traces, {bad_sum} weight sums != 1, {bad_halt} non-minimal halts, {elapsed:.2f}s")
    assert ok


# -- behavioral reproductions ----------------------------------------------------


@pytest.fixture(scope="session")
def parity_sweep():
    base = TrainConfig(task=PARITY, method="dact", **SCALE)
    dact = sweep(base, TAUS, SEEDS, ("dact",), jobs=JOBS)
    act = sweep(base, TAUS, SEEDS[:1], ("act",), jobs=JOBS)
    return dact, act


def _train(cfg):
    return train_model(cfg)


@pytest.fixture(scope="session")
def chain_runs():
    base = TrainConfig(task=CHAIN, **SCALE)
    dact_cfgs = [replace(base, method="dact", tau=CHAIN_TAU, seed=s) for s in SEEDS]
    with ProcessPoolExecutor(max_workers=JOBS) as pool:
        dact = list(pool.map(_train, dact_cfgs))
    m = float(np.mean([metrics.steps_at_best for _, metrics in dact]))
    n_fixed = max(1, int(round(m)))
    fixed_cfgs = [replace(base, method="fixed", N=n_fixed, seed=s) for s in SEEDS]
    with ProcessPoolExecutor(max_workers=JOBS) as pool:
        fixed = list(pool.map(_train, fixed_cfgs))
    return {
        "dact_models": [(p, c) for (p, _), c in zip(dact, dact_cfgs)],
        "dact": [metrics for _, metrics in dact],
        "fixed": [metrics for _, metrics in fixed],
        "mean_steps": m,
        "n_fixed": n_fixed,
    }


def _table(rows):
    return "\n".join(
        f"    {r['method']:>5} tau={r['tau']:<7g} acc={r['accuracy']:.4f} steps={r['mean_steps']:.3f} "
        f"spearman={r['spearman']:+.3f} (n={r['n_runs']})"
        for r in rows
    )


def test_criterion_5_tau_responsiveness(report_criterion, acceptance_note, parity_sweep):
    dact, act = parity_sweep
    errors = [r.error for r in dact if r.error]
    means = {r["tau"]: r for r in per_tau_means(dact)}
    steps = [means[t]["mean_steps"] for t in TAUS] if len(means) == len(TAUS) else []
    monotone = bool(steps) and all(a >= b for a, b in zip(steps, steps[1:]))
    spread = steps[0] - steps[-1] if steps else float("nan")
    ok = not errors and monotone and spread >= 2.0
    report_criterion(5, "tau responsiveness", ok,
                     f"mean steps per tau {[round(s, 3) for s in steps]}, non-increasing={monotone}, "
                     f"spread {spread:.3f} (need >= 2.0), run errors {errors}")
    acceptance_note("  DACT prefix_parity (3 seeds):\n" + _table(per_tau_means(dact)))
    acceptance_note("  ACT prefix_parity (1 seed, reported only):\n" + _table(per_tau_means(act)))
    assert ok


def test_criterion_6_complexity_correlation(report_criterion, acceptance_note, parity_sweep):
    dact, _ = parity_sweep
    runs = [r for r in dact if r.tau == 1e-3 and r.metrics is not None]
    rhos = [r.metrics.spearman_at_best for r in runs]
    mean_rho = float(np.mean(rhos)) if rhos else float("nan")
    ok = len(runs) == len(SEEDS) and mean_rho >= 0.5
    report_criterion(6, "complexity correlation", ok,
                     f"tau=1e-3 Spearman per seed {[round(x, 3) for x in rhos]}, mean {mean_rho:.3f} (need >= 0.5)")
    for r in runs:
        hist = ", ".join(f"k={h.complexity}:{h.mean_steps:.2f}" for h in r.metrics.histogram)
        acceptance_note(f"  seed {r.seed}: spearman {r.metrics.spearman_at_best:+.3f}; steps by k {hist}")
    assert ok


def test_criterion_7_adaptive_vs_fixed(report_criterion, acceptance_note, chain_runs):
    dact_acc = float(np.mean([m.best_accuracy for m in chain_runs["dact"]]))
    fixed_acc = float(np.mean([m.best_accuracy for m in chain_runs["fixed"]]))
    ok = dact_acc >= fixed_acc
    report_criterion(7, "adaptive vs fixed at matched compute", ok,
                     f"DACT {dact_acc:.4f} at m={chain_runs['mean_steps']:.2f} vs fixed N={chain_runs['n_fixed']} "
                     f"{fixed_acc:.4f} (margin {dact_acc - fixed_acc:+.4f})")
    for d, f, s in zip(chain_runs["dact"], chain_runs["fixed"], SEEDS):
        acceptance_note(f"  seed {s}: DACT {d.best_accuracy:.4f} at {d.steps_at_best:.2f} steps, "
                        f"fixed N={chain_runs['n_fixed']} {f.best_accuracy:.4f}")
    assert ok


# -- reproducibility ---------------------------------------------------------------


def _strip_volatile(path):
    doc = json.loads(path.read_text())
    doc.pop("generated_at", None)
    doc.get("config", {}).pop("checkpoint", None)
    return doc


def test_criterion_9_reproducibility(report_criterion, tmp_path):
    small = ["--n-train", "300", "--n-eval", "150", "--state-dim", "8", "--N", "5", "--epochs", "2"]
    outputs = []
    for rep in ("first", "second"):
        root = tmp_path / rep
        assert cli_main(["train", *small, "--tau", "0.01", "--out-dir", str(root / "train")]) == 0
        assert cli_main(["eval", "--checkpoint", str(root / "train" / "checkpoint.bin"),
                         "--out-dir", str(root / "eval")]) == 0
        assert cli_main(["sweep", *small, "--taus", "0", "0.01", "--seeds", "1", "2",
                         "--methods", "dact", "act", "fixed", "--out-dir", str(root / "sweep")]) == 0
        outputs.append(root)
    files = ["train/metrics.csv", "train/histogram.csv", "train/checkpoint.bin", "eval/histogram.csv",
             "eval/records.jsonl", "sweep/metrics.csv", "sweep/histogram.csv"]
    differing = [f for f in files if (outputs[0] / f).read_bytes() != (outputs[1] / f).read_bytes()]
    for f in ("train/summary.json", "eval/summary.json", "sweep/summary.json"):
        if _strip_volatile(outputs[0] / f) != _strip_volatile(outputs[1] / f):
            differing.append(f)
    ok = not differing
    report_criterion(9, "reproducibility", ok,
                     f"{len(files) + 3} output files compared across repeated train/eval/sweep; differing: {differing}")
    assert ok
