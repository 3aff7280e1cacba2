"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a fixed set of primitives, an append-only
tape, and a single reverse sweep. Tensors are plain ``numpy.float64`` arrays;
a leading batch axis is allowed on every primitive so a minibatch can share one
tape. Broadcasting is limited to the two cases the reasoning cell needs:
a bias vector added to every row, and a per-row scalar (trailing dim 1)
multiplied into a row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import numpy as np

CHECKPOINT_MAGIC = "ADAPTHALT-CKPT-1"
LOG_CLAMP = 1e-300

PRIMITIVES = (
    "add",
    "subtract",
    "multiply",
    "scale",
    "matvec",
    "sigmoid",
    "tanh",
    "softmax",
    "log",
    "concat",
    "sum",
    "one_minus",
    "index_select",
)


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up while finite checking is enabled."""


def as_tensor(value: Any) -> np.ndarray:
    return np.array(value, dtype=np.float64)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attr: Any = None


# ---------------------------------------------------------------------------
# forward rules


def _shape_error(op: str, *shapes: tuple[int, ...]) -> ShapeError:
    joined = ", ".join(str(list(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible operand shapes {joined}")


def _is_row_bias(a: np.ndarray, b: np.ndarray) -> bool:
    return a.ndim == b.ndim + 1 and a.shape[1:] == b.shape


def _is_row_scalar(a: np.ndarray, b: np.ndarray) -> bool:
    # b holds one scalar per row of a
    return a.ndim >= 1 and b.shape == a.shape[:-1] + (1,) and a.shape != b.shape


def _check_additive(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and not _is_row_bias(a, b):
        raise _shape_error(op, a.shape, b.shape)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward(op: str, vals: list[np.ndarray], attr: Any) -> np.ndarray:
    if op in ("add", "subtract"):
        a, b = vals
        _check_additive(op, a, b)
        return a + b if op == "add" else a - b
    if op == "multiply":
        a, b = vals
        if a.shape != b.shape and not _is_row_scalar(a, b) and not _is_row_scalar(b, a):
            raise _shape_error(op, a.shape, b.shape)
        return a * b
    if op == "scale":
        (a,) = vals
        return a * float(attr)
    if op == "matvec":
        w, x = vals
        if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
            raise _shape_error(op, w.shape, x.shape)
        return x @ w.T if x.ndim == 2 else w @ x
    if op == "sigmoid":
        return _sigmoid(vals[0])
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "softmax":
        if vals[0].ndim == 0:
            raise _shape_error(op, vals[0].shape)
        return _softmax(vals[0])
    if op == "log":
        return np.log(np.maximum(vals[0], LOG_CLAMP))
    if op == "concat":
        lead = vals[0].shape[:-1]
        if any(v.ndim == 0 or v.shape[:-1] != lead for v in vals):
            raise _shape_error(op, *(v.shape for v in vals))
        return np.concatenate(vals, axis=-1)
    if op == "sum":
        return np.asarray(np.sum(vals[0]), dtype=np.float64)
    if op == "one_minus":
        return 1.0 - vals[0]
    if op == "index_select":
        (x,) = vals
        idx = np.asarray(attr, dtype=np.int64)
        if x.ndim == 1:
            if idx.ndim > 1 or np.any((idx < 0) | (idx >= x.shape[0])):
                raise _shape_error(op, x.shape, idx.shape)
            return x[idx]
        if x.ndim == 2 and idx.shape == (x.shape[0],):
            if np.any((idx < 0) | (idx >= x.shape[1])):
                raise _shape_error(op, x.shape, idx.shape)
            return x[np.arange(x.shape[0]), idx]
        raise _shape_error(op, x.shape, idx.shape)
    raise ValueError(f"unknown primitive {op!r}")


# ---------------------------------------------------------------------------
# backward rules: return one gradient per input


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if grad.ndim == len(shape) + 1:
        return grad.sum(axis=0)
    # per-row scalar operand
    return grad.sum(axis=-1, keepdims=True)


def _vjp(node: Node, vals: list[np.ndarray], g: np.ndarray) -> list[np.ndarray]:
    op, out = node.op, node.value
    if op == "add":
        return [_unbroadcast(g, v.shape) for v in vals]
    if op == "subtract":
        return [_unbroadcast(g, vals[0].shape), -_unbroadcast(g, vals[1].shape)]
    if op == "multiply":
        a, b = vals
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
    if op == "scale":
        return [g * float(node.attr)]
    if op == "matvec":
        w, x = vals
        if x.ndim == 2:
            return [g.T @ x, g @ w]
        return [np.outer(g, x), w.T @ g]
    if op == "sigmoid":
        return [g * out * (1.0 - out)]
    if op == "tanh":
        return [g * (1.0 - out * out)]
    if op == "softmax":
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return [out * (g - dot)]
    if op == "log":
        x = vals[0]
        safe = np.maximum(x, LOG_CLAMP)
        return [np.where(x > LOG_CLAMP, g / safe, 0.0)]
    if op == "concat":
        grads, start = [], 0
        for v in vals:
            stop = start + v.shape[-1]
            grads.append(g[..., start:stop])
            start = stop
        return grads
    if op == "sum":
        return [np.full(vals[0].shape, float(g))]
    if op == "one_minus":
        return [-g]
    if op == "index_select":
        x = vals[0]
        idx = np.asarray(node.attr, dtype=np.int64)
        dx = np.zeros_like(x)
        if x.ndim == 1:
            np.add.at(dx, idx, g)
        else:
            dx[np.arange(x.shape[0]), idx] += g
        return [dx]
    raise ValueError(f"unknown primitive {op!r}")


class Graph:
    """Append-only tape of primitive applications.

    Node ids are positions on the tape, so every input id refers to an earlier
    node. With ``record=False`` the tape still caches values (node ids stay
    valid) but ``backward`` is refused; this is the inference mode.
    """

    def __init__(self, record: bool = True, check_finite: bool = False):
        self.record = record
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.grads: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def leaf(self, value: Any) -> int:
        arr = as_tensor(value)
        self._check(arr, "leaf")
        self.nodes.append(Node("leaf", (), arr))
        return len(self.nodes) - 1

    def apply(self, op: str, inputs: Iterable[int], attr: Any = None) -> int:
        inputs = tuple(inputs)
        if op not in PRIMITIVES:
            raise ValueError(f"unknown primitive {op!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{op}: input id {i} is not on the tape")
        out = _forward(op, [self.nodes[i].value for i in inputs], attr)
        self._check(out, op)
        self.nodes.append(Node(op, inputs, out, attr))
        return len(self.nodes) - 1

    def _check(self, arr: np.ndarray, op: str) -> None:
        if self.check_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{op} produced a non-finite value (node {len(self.nodes)})")

    # thin wrappers so model code reads naturally
    def add(self, a: int, b: int) -> int:
        return self.apply("add", (a, b))

    def subtract(self, a: int, b: int) -> int:
        return self.apply("subtract", (a, b))

    def multiply(self, a: int, b: int) -> int:
        return self.apply("multiply", (a, b))

    def scale(self, a: int, c: float) -> int:
        return self.apply("scale", (a,), float(c))

    def matvec(self, w: int, x: int) -> int:
        return self.apply("matvec", (w, x))

    def sigmoid(self, a: int) -> int:
        return self.apply("sigmoid", (a,))

    def tanh(self, a: int) -> int:
        return self.apply("tanh", (a,))

    def softmax(self, a: int) -> int:
        return self.apply("softmax", (a,))

    def log(self, a: int) -> int:
        return self.apply("log", (a,))

    def concat(self, *parts: int) -> int:
        return self.apply("concat", parts)

    def sum(self, a: int) -> int:
        return self.apply("sum", (a,))

    def one_minus(self, a: int) -> int:
        return self.apply("one_minus", (a,))

    def index_select(self, a: int, indices: Any) -> int:
        return self.apply("index_select", (a,), np.asarray(indices, dtype=np.int64))

    def backward(self, loss: int) -> list[np.ndarray]:
        """Reverse sweep from a scalar node; returns one gradient per node."""
        if not self.record:
            raise RuntimeError("backward called on a non-recording graph")
        out = self.nodes[loss].value
        if out.size != 1:
            raise ShapeError(f"backward: loss must be scalar-shaped, got {list(out.shape)}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss] = np.ones_like(out)
        for i in range(loss, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or not node.inputs:
                continue
            vals = [self.nodes[j].value for j in node.inputs]
            for j, gj in zip(node.inputs, _vjp(node, vals, g)):
                grads[j] = gj if grads[j] is None else grads[j] + gj
        self.grads = [np.zeros_like(n.value) if g is None else g for n, g in zip(self.nodes, grads)]
        return self.grads


def forward_primitive(graph: Graph, op: str, inputs: Iterable[int], attr: Any = None) -> int:
    return graph.apply(op, inputs, attr)


def backward(graph: Graph, loss_node: int) -> dict[int, np.ndarray]:
    return dict(enumerate(graph.backward(loss_node)))


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints


@dataclass
class ParamStore:
    """Named parameters with Adam moment slots."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        self.params = {k: as_tensor(v) for k, v in self.params.items()}
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def add(self, name: str, value: Any) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = as_tensor(value)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
        )

    def n_scalars(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def adam_step(
        self,
        grads: Mapping[str, np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.step += 1
        c1 = 1.0 - beta1**self.step
        c2 = 1.0 - beta2**self.step
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            self.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def save(self, path: str | Path, meta: Mapping[str, Any] | None = None) -> None:
        """Write ``magic\\n`` + JSON index line + little-endian float64 payload."""
        index = {
            "format": CHECKPOINT_MAGIC,
            "meta": dict(meta or {}),
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
        }
        with open(path, "wb") as fh:
            fh.write((CHECKPOINT_MAGIC + "\n").encode())
            fh.write((json.dumps(index, sort_keys=True) + "\n").encode())
            for v in self.params.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> tuple["ParamStore", dict[str, Any]]:
        with open(path, "rb") as fh:
            magic = fh.readline().decode().rstrip("\n")
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint (header {magic!r})")
            index = json.loads(fh.readline().decode())
            params = {}
            for entry in index["tensors"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape, dtype=np.int64))
                raw = fh.read(8 * count)
                if len(raw) != 8 * count:
                    raise ValueError(f"{path}: truncated tensor {entry['name']!r}")
                params[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            if fh.read(1):
                raise ValueError(f"{path}: trailing bytes after last tensor")
        return cls(params), index.get("meta", {})


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_gradient(
    f: Callable[[dict[str, np.ndarray]], float],
    params: ParamStore | Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` for every scalar parameter entry."""
    if step <= 0:
        raise ValueError("step must be positive")
    source = params.params if isinstance(params, ParamStore) else params
    work = {k: as_tensor(v).copy() for k, v in source.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f(work))
            flat[i] = orig - step
            down = float(f(work))
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"f is non-finite near {name}[{i}]")
            gflat[i] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||) over all entries."""
    keys = sorted(a)
    if sorted(b) != keys:
        raise KeyError("gradient maps have different keys")
    va = np.concatenate([np.ravel(a[k]) for k in keys]) if keys else np.zeros(0)
    vb = np.concatenate([np.ravel(b[k]) for k in keys]) if keys else np.zeros(0)
    denom = max(np.linalg.norm(va), np.linalg.norm(vb))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(va - vb) / denom)

