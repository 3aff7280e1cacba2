"""Synthetic classification tasks with a ground-truth complexity label.

Each sample's input is a one-hot complexity selector ``k`` followed by a
payload; the target is a task function of the payload that consumes ``k``
payload elements, so ``k`` is the difficulty group of the sample.

* ``prefix_parity``: ``L`` random bits, target = parity of the first ``k`` bits.
* ``chain_arith``: ``L`` digits 0-9, target = (sum of the first ``k`` digits) mod 10.
* ``nested_lookup``: a permutation of ``0..L-1`` read as pointers, target = the
  index reached after ``k`` hops from position 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KINDS = ("prefix_parity", "chain_arith", "nested_lookup")
DATASET_FORMAT = "ADAPTHALT-DATA-1"


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "prefix_parity"
    length: int = 8
    k_max: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; choose from {KINDS}")
        if self.length < 1 or self.k_max < 1:
            raise ValueError("length and k_max must be >= 1")
        if self.k_max > self.length:
            raise ValueError(f"k_max={self.k_max} exceeds payload length {self.length}")

    @property
    def n_classes(self) -> int:
        return {"prefix_parity": 2, "chain_arith": 10}.get(self.kind, self.length)

    @property
    def payload_dim(self) -> int:
        # bits are one signed scalar each (+1/-1); digits and pointers are one-hot
        width = {"prefix_parity": 1, "chain_arith": 10}.get(self.kind, self.length)
        return self.length * width

    @property
    def input_dim(self) -> int:
        return self.k_max + self.payload_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Sample:
    input: np.ndarray
    target: int
    complexity: int
    payload: tuple[int, ...] = ()


def task_target(kind: str, payload: Sequence[int], k: int) -> int:
    """Direct evaluation of the task function."""
    if kind == "prefix_parity":
        return int(sum(payload[:k]) % 2)
    if kind == "chain_arith":
        return int(sum(payload[:k]) % 10)
    if kind == "nested_lookup":
        pos = 0
        for _ in range(k):
            pos = payload[pos]
        return int(pos)
    raise ValueError(f"unknown task kind {kind!r}")


def encode(spec: TaskSpec, payload: Sequence[int], k: int) -> np.ndarray:
    selector = np.zeros(spec.k_max)
    selector[k - 1] = 1.0
    if spec.kind == "prefix_parity":
        body = 2.0 * np.asarray(payload, dtype=np.float64) - 1.0
    else:
        width = 10 if spec.kind == "chain_arith" else spec.length
        body = np.zeros((spec.length, width))
        body[np.arange(spec.length), np.asarray(payload)] = 1.0
        body = body.reshape(-1)
    return np.concatenate([selector, body])


def decode_payload(spec: TaskSpec, x: np.ndarray) -> tuple[list[int], int]:
    """Recover ``(payload, k)`` from an encoded input."""
    x = np.asarray(x)
    k = int(np.argmax(x[: spec.k_max])) + 1
    body = x[spec.k_max :]
    if spec.kind == "prefix_parity":
        return [int(v > 0) for v in body], k
    width = 10 if spec.kind == "chain_arith" else spec.length
    return [int(v) for v in np.argmax(body.reshape(spec.length, width), axis=1)], k


def generate(spec: TaskSpec, n_samples: int) -> list[Sample]:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(spec.seed)
    samples = []
    for _ in range(n_samples):
        k = int(rng.integers(1, spec.k_max + 1))
        if spec.kind == "prefix_parity":
            payload = rng.integers(0, 2, size=spec.length)
        elif spec.kind == "chain_arith":
            payload = rng.integers(0, 10, size=spec.length)
        else:
            payload = rng.permutation(spec.length)
        payload = tuple(int(v) for v in payload)
        samples.append(
            Sample(encode(spec, payload, k), task_target(spec.kind, payload, k), k, payload)
        )
    return samples


def split(samples: Sequence[Sample], train_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Stratified-by-complexity shuffle split with an exact overall train size."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(round(train_fraction * len(samples)))
    if n_train == 0 or n_train == len(samples):
        raise ValueError("split leaves one side empty")
    rng = np.random.default_rng(seed)
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.complexity, []).append(i)
    keys = sorted(groups)
    for k in keys:
        rng.shuffle(groups[k])
    # largest-remainder allocation keeps strata proportional and the total exact
    quotas = {k: train_fraction * len(groups[k]) for k in keys}
    take = {k: int(np.floor(quotas[k])) for k in keys}
    short = n_train - sum(take.values())
    by_remainder = sorted(keys, key=lambda k: (-(quotas[k] - take[k]), k))
    for k in by_remainder[:short]:
        take[k] += 1
    train_idx, eval_idx = [], []
    for k in keys:
        train_idx.extend(groups[k][: take[k]])
        eval_idx.extend(groups[k][take[k] :])
    train_idx.sort()
    eval_idx.sort()
    return [samples[i] for i in train_idx], [samples[i] for i in eval_idx]


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([s.input for s in samples])
    y = np.array([s.target for s in samples], dtype=np.int64)
    k = np.array([s.complexity for s in samples], dtype=np.int64)
    return x, y, k


def save_dataset(path: str | Path, spec: TaskSpec, samples: Iterable[Sample], header_extra: dict | None = None) -> None:
    header = {"format": DATASET_FORMAT, "task_spec": spec.to_dict(), "n_classes": spec.n_classes,
              "input_dim": spec.input_dim}
    header.update(header_extra or {})
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            row = {"input": [float(v) for v in s.input], "target": s.target, "complexity": s.complexity}
            fh.write(json.dumps(row) + "\n")


def load_dataset(path: str | Path) -> tuple[TaskSpec, list[Sample]]:
    with open(path) as fh:
        header = json.loads(fh.readline() or "null")
        if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a dataset file (missing {DATASET_FORMAT} header)")
        spec = TaskSpec(**header["task_spec"])
        samples = []
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            x = np.asarray(row["input"], dtype=np.float64)
            if x.shape != (spec.input_dim,):
                raise ValueError(f"{path}: input of length {x.size}, expected {spec.input_dim}")
            payload, _ = decode_payload(spec, x)
            samples.append(Sample(x, int(row["target"]), int(row["complexity"]), tuple(payload)))
    return spec, samples
