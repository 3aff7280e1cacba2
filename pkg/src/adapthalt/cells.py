"""Weight-shared gated recurrent cell with a class head and a halting head.

The same parameters are applied at every step to the static task input:

    z = sigmoid(W_z [s; x] + b_z)
    r = sigmoid(W_r [s; x] + b_r)
    c = tanh(W_c [r * s; x] + b_c)
    s' = (1 - z) * s + z * c
    y = softmax(W_y s' + b_y)
    h = sigmoid(w_h s' + b_h)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, ParamStore

PARAM_NAMES = ("W_z", "b_z", "W_r", "b_r", "W_c", "b_c", "W_y", "b_y", "w_h", "b_h")


@dataclass(frozen=True)
class CellDims:
    input_dim: int
    state_dim: int
    n_classes: int

    def shapes(self) -> dict[str, tuple[int, ...]]:
        joint = self.state_dim + self.input_dim
        return {
            "W_z": (self.state_dim, joint),
            "b_z": (self.state_dim,),
            "W_r": (self.state_dim, joint),
            "b_r": (self.state_dim,),
            "W_c": (self.state_dim, joint),
            "b_c": (self.state_dim,),
            "W_y": (self.n_classes, self.state_dim),
            "b_y": (self.n_classes,),
            "w_h": (1, self.state_dim),
            "b_h": (1,),
        }


@dataclass
class StepOutput:
    y: int
    h: int
    state: int


def init_params(input_dim: int, state_dim: int, n_classes: int, seed: int) -> ParamStore:
    """Xavier-uniform weights, zero biases."""
    if min(input_dim, state_dim, n_classes) < 1:
        raise ValueError("all dimensions must be >= 1")
    dims = CellDims(input_dim, state_dim, n_classes)
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in dims.shapes().items():
        if len(shape) == 2:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            store.add(name, rng.uniform(-bound, bound, size=shape))
        else:
            store.add(name, np.zeros(shape))
    return store


def dims_of(params: ParamStore) -> CellDims:
    state_dim, joint = params["W_z"].shape
    return CellDims(joint - state_dim, state_dim, params["W_y"].shape[0])


class GRUCell:
    """Stepwise model over a :class:`ParamStore`; satisfies the ``bind`` protocol."""

    def __init__(self, params: ParamStore):
        self.params = params
        self.dims = dims_of(params)
        expected = self.dims.shapes()
        for name in PARAM_NAMES:
            if name not in params or params[name].shape != expected[name]:
                raise ValueError(f"parameter {name} missing or mis-shaped")

    @property
    def n_classes(self) -> int:
        return self.dims.n_classes

    def bind(self, graph: Graph) -> "BoundCell":
        return BoundCell(self, graph)


class BoundCell:
    def __init__(self, cell: GRUCell, graph: Graph):
        self.graph = graph
        self.dims = cell.dims
        self.n_classes = cell.dims.n_classes
        self.nodes = {name: graph.leaf(cell.params[name]) for name in PARAM_NAMES}

    def initial_state(self, x: int) -> int:
        lead = self.graph.value(x).shape[:-1]
        return self.graph.leaf(np.zeros(lead + (self.dims.state_dim,)))

    def step(self, state: int, x: int) -> tuple[int, int, int]:
        g, w = self.graph, self.nodes
        if g.value(x).shape[-1] != self.dims.input_dim:
            raise ValueError(
                f"input has {g.value(x).shape[-1]} features, cell expects {self.dims.input_dim}"
            )
        sx = g.concat(state, x)
        z = g.sigmoid(g.add(g.matvec(w["W_z"], sx), w["b_z"]))
        r = g.sigmoid(g.add(g.matvec(w["W_r"], sx), w["b_r"]))
        rsx = g.concat(g.multiply(r, state), x)
        cand = g.tanh(g.add(g.matvec(w["W_c"], rsx), w["b_c"]))
        new_state = g.add(g.multiply(g.one_minus(z), state), g.multiply(z, cand))
        y = g.softmax(g.add(g.matvec(w["W_y"], new_state), w["b_y"]))
        h = g.sigmoid(g.add(g.matvec(w["w_h"], new_state), w["b_h"]))
        return y, h, new_state

    def param_grads(self, grads: list[np.ndarray]) -> dict[str, np.ndarray]:
        return {name: grads[i] for name, i in self.nodes.items()}


def cell_step(params: ParamStore, state: np.ndarray, x: np.ndarray, graph: Graph) -> StepOutput:
    bound = GRUCell(params).bind(graph)
    y, h, s = bound.step(graph.leaf(state), graph.leaf(x))
    return StepOutput(y, h, s)


def fixed_forward(params: ParamStore, x: np.ndarray, N: int, graph: Graph) -> int:
    """Run exactly ``N`` steps, ignore the halting head, return the ``y_N`` node."""
    if N < 1:
        raise ValueError("N must be >= 1")
    bound = GRUCell(params).bind(graph)
    x_id = graph.leaf(x)
    state = bound.initial_state(x_id)
    for _ in range(N):
        y, _h, state = bound.step(state, x_id)
    return y
