"""
Minimal dense-tensor core with reverse-mode differentiation.

Only the primitives the training losses need are implemented: linear map,
bias add, rectifier, row-wise L2 normalize / softmax / log-softmax, log, exp,
scalar multiply/divide, inner products, row gathers, sum/mean reductions and
same-shape elementwise add/sub/mul. There is no general broadcasting.

All values are 64-bit floats. Every primitive checks its output for NaN/Inf.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import GraphError, NumericError, ShapeError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


# ============================================================
# TENSOR
# ============================================================

class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


def constant(values) -> Tensor:
    """Leaf tensor that never receives a gradient."""
    return Tensor(values, requires_grad=False)


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise ShapeError(message)


# ============================================================
# GRAPH (tape)
# ============================================================

@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    # backward(grad_out, input_values, output_values) -> one grad per input
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]]


class Graph:
    """
    Ordered record of primitive applications.

    With record=False the primitives still compute (and validate) values but
    nothing is kept, so no gradient can ever flow through the result. The key
    encoder runs this way.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: List[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _apply(self, op: str, inputs: Sequence[Tensor], forward, backward) -> Tensor:
        with np.errstate(all="ignore"):
            values = np.asarray(forward(*[t.values for t in inputs]), dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NumericError(f"non-finite value produced by {op}")
        out = Tensor(values)
        if self.record:
            self.nodes.append(Node(op, tuple(inputs), out, forward, backward))
        return out

    # --- linear algebra ---

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        _expect(a.values.ndim == 2 and b.values.ndim == 2, f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
        _expect(a.shape[1] == b.shape[0], f"matmul shape mismatch {a.shape} @ {b.shape}")
        return self._apply(
            "matmul", (a, b),
            lambda av, bv: av @ bv,
            lambda g, ins, out: (g @ ins[1].T, ins[0].T @ g),
        )

    def add_bias(self, x: Tensor, b: Tensor) -> Tensor:
        _expect(x.values.ndim == 2 and b.values.ndim == 1, f"add_bias needs (n, p) and (p,), got {x.shape} and {b.shape}")
        _expect(x.shape[1] == b.shape[0], f"bias width {b.shape[0]} does not match {x.shape}")
        return self._apply(
            "add_bias", (x, b),
            lambda xv, bv: xv + bv,
            lambda g, ins, out: (g, g.sum(axis=0)),
        )

    def linear(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        return self.add_bias(self.matmul(x, weight), bias)

    def inner(self, a: Tensor, b: Tensor) -> Tensor:
        """Pairwise inner products of rows: out[i, j] = <a_i, b_j>."""
        _expect(a.values.ndim == 2 and b.values.ndim == 2, f"inner needs 2-D operands, got {a.shape} and {b.shape}")
        _expect(a.shape[1] == b.shape[1], f"inner dimension mismatch {a.shape} vs {b.shape}")
        return self._apply(
            "inner", (a, b),
            lambda av, bv: av @ bv.T,
            lambda g, ins, out: (g @ ins[1], g.T @ ins[0]),
        )

    # --- nonlinearities ---

    def relu(self, x: Tensor) -> Tensor:
        return self._apply(
            "relu", (x,),
            lambda xv: np.maximum(xv, 0.0),
            lambda g, ins, out: (g * (ins[0] > 0.0),),
        )

    def l2normalize_rows(self, x: Tensor) -> Tensor:
        """
        Rows divided by their norm. A row with norm <= 1e-12 maps to the first
        axis and gets zero gradient, so every output row lies on the unit sphere.
        """
        _expect(x.values.ndim == 2, f"l2normalize_rows needs a 2-D tensor, got {x.shape}")

        def forward(xv):
            norms = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True))
            out = xv / np.maximum(norms, NORM_EPS)
            dead = norms[:, 0] <= NORM_EPS
            if np.any(dead):
                out[dead] = 0.0
                out[dead, 0] = 1.0
            return out

        def backward(g, ins, out):
            xv = ins[0]
            norms = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True))
            denom = np.maximum(norms, NORM_EPS)
            active = (norms > NORM_EPS).astype(np.float64)
            proj = np.sum(out * g, axis=1, keepdims=True)
            return (active * (g - out * proj) / denom,)

        return self._apply("l2normalize_rows", (x,), forward, backward)

    def softmax_rows(self, x: Tensor) -> Tensor:
        _expect(x.values.ndim == 2, f"softmax_rows needs a 2-D tensor, got {x.shape}")

        def forward(xv):
            shifted = np.exp(xv - xv.max(axis=1, keepdims=True))
            return shifted / shifted.sum(axis=1, keepdims=True)

        def backward(g, ins, out):
            return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

        return self._apply("softmax_rows", (x,), forward, backward)

    def log_softmax_rows(self, x: Tensor) -> Tensor:
        """Fused log(softmax(x)) computed through log-sum-exp."""
        _expect(x.values.ndim == 2, f"log_softmax_rows needs a 2-D tensor, got {x.shape}")

        def forward(xv):
            shifted = xv - xv.max(axis=1, keepdims=True)
            return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

        def backward(g, ins, out):
            return (g - np.exp(out) * np.sum(g, axis=1, keepdims=True),)

        return self._apply("log_softmax_rows", (x,), forward, backward)

    def log(self, x: Tensor) -> Tensor:
        return self._apply(
            "log", (x,),
            np.log,
            lambda g, ins, out: (g / ins[0],),
        )

    def exp(self, x: Tensor) -> Tensor:
        return self._apply(
            "exp", (x,),
            np.exp,
            lambda g, ins, out: (g * out,),
        )

    # --- scalar ops ---

    def scale(self, x: Tensor, factor: float) -> Tensor:
        factor = float(factor)
        return self._apply(
            "scale", (x,),
            lambda xv: xv * factor,
            lambda g, ins, out: (g * factor,),
        )

    def div(self, x: Tensor, divisor: float) -> Tensor:
        divisor = float(divisor)
        if divisor == 0.0:
            raise NumericError("division by zero")
        return self._apply(
            "div", (x,),
            lambda xv: xv / divisor,
            lambda g, ins, out: (g / divisor,),
        )

    # --- indexing ---

    def gather(self, x: Tensor, index: Sequence[int]) -> Tensor:
        """out[i] = x[i, index[i]]."""
        idx = np.asarray(index, dtype=np.int64)
        _expect(x.values.ndim == 2 and idx.shape == (x.shape[0],), f"gather index {idx.shape} does not fit {x.shape}")
        rows = np.arange(x.shape[0])

        def backward(g, ins, out):
            grad = np.zeros_like(ins[0])
            grad[rows, idx] = g
            return (grad,)

        return self._apply("gather", (x,), lambda xv: xv[rows, idx], backward)

    def take_rows(self, x: Tensor, rows: Sequence[int]) -> Tensor:
        sel = np.asarray(rows, dtype=np.int64)
        _expect(x.values.ndim == 2 and sel.ndim == 1, f"take_rows needs (n, d) and a 1-D index, got {x.shape}")

        def backward(g, ins, out):
            grad = np.zeros_like(ins[0])
            np.add.at(grad, sel, g)
            return (grad,)

        return self._apply("take_rows", (x,), lambda xv: xv[sel], backward)

    # --- reductions ---

    def sum(self, x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        def backward(g, ins, out):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, ins[0].shape).copy(),)

        return self._apply("sum", (x,), lambda xv: np.sum(xv, axis=axis, keepdims=keepdims), backward)

    def mean(self, x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        count = x.size if axis is None else x.shape[axis]
        _expect(count > 0, "mean over an empty axis")

        def backward(g, ins, out):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, ins[0].shape).copy(),)

        return self._apply("mean", (x,), lambda xv: np.mean(xv, axis=axis, keepdims=keepdims), backward)

    # --- elementwise ---

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _expect(a.shape == b.shape, f"add shape mismatch {a.shape} vs {b.shape}")
        return self._apply("add", (a, b), np.add, lambda g, ins, out: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _expect(a.shape == b.shape, f"sub shape mismatch {a.shape} vs {b.shape}")
        return self._apply("sub", (a, b), np.subtract, lambda g, ins, out: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _expect(a.shape == b.shape, f"mul shape mismatch {a.shape} vs {b.shape}")
        return self._apply("mul", (a, b), np.multiply, lambda g, ins, out: (g * ins[1], g * ins[0]))

    # ============================================================
    # REPLAY / BACKWARD
    # ============================================================

    def replay(self) -> Tensor:
        """Re-run every recorded primitive in order from the current leaf values."""
        if not self.nodes:
            raise GraphError("nothing recorded to replay")
        fresh: Dict[int, np.ndarray] = {}
        last = None
        with np.errstate(all="ignore"):
            for node in self.nodes:
                args = [fresh.get(id(t), t.values) for t in node.inputs]
                last = np.asarray(node.forward(*args), dtype=np.float64)
                fresh[id(node.output)] = last
        return Tensor(last)

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None) -> int:
        """
        Propagate gradients from `output` to every tensor with requires_grad=True.
        Leaf gradients accumulate into `.grad`. Returns the number of nodes visited.
        """
        if not self.nodes:
            raise GraphError("backward called before any forward was recorded")
        if not any(node.output is output for node in self.nodes):
            raise GraphError("output was not produced by this graph")

        if seed is None:
            seed = np.ones_like(output.values)
        seed = np.asarray(seed, dtype=np.float64)
        _expect(seed.shape == output.shape, f"seed shape {seed.shape} does not match output {output.shape}")

        grads: Dict[int, np.ndarray] = {id(output): seed}
        visited = 0
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            visited += 1
            in_values = [t.values for t in node.inputs]
            with np.errstate(all="ignore"):
                in_grads = node.backward(g_out, in_values, node.output.values)
            for tensor, g in zip(node.inputs, in_grads):
                if g is None:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + g if key in grads else g

        # whatever is left belongs to leaves
        for node in self.nodes:
            for tensor in node.inputs:
                key = id(tensor)
                if tensor.requires_grad and key in grads:
                    g = grads.pop(key)
                    if not np.all(np.isfinite(g)):
                        raise NumericError(f"non-finite gradient for {tensor.name or 'tensor'}")
                    tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
        return visited


# ============================================================
# FINITE-DIFFERENCE ORACLE
# ============================================================

@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


def relative_error(analytic: float, numeric: float) -> float:
    """
    |a - n| / max(|a|, |n|, 1): absolute error for gradients below one, relative
    above. Pure relative error would fail small coordinates on finite-difference
    round-off alone (about 1e-10 at h = 1e-6).
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)


def gradcheck(
    fn: Callable[[Graph], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-6,
    grad_floor: float = 1e-8,
    name: str = "",
) -> GradcheckResult:
    """
    Compare analytic gradients of the scalar fn(graph) against central
    finite differences for every coordinate of `params`.
    """
    graph = Graph()
    out = fn(graph)
    if out.size != 1:
        raise ShapeError(f"gradcheck needs a scalar output, got {out.shape}")
    for p in params:
        p.grad = None
    if graph.nodes:
        graph.backward(out)

    worst = 0.0
    checked = 0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        flat_grad = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn(Graph(record=False)).item()
            flat[i] = orig - h
            f_minus = fn(Graph(record=False)).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            # a coordinate counts when either side sees a gradient, so a dropped gradient still fails
            if max(abs(flat_grad[i]), abs(numeric)) <= grad_floor:
                continue
            worst = max(worst, relative_error(float(flat_grad[i]), numeric))
            checked += 1

    passed = worst < tol
    if not passed:
        logger.warning(f"gradcheck {name or 'fn'}: max relative error {worst:.3e} over {checked} coords")
    return GradcheckResult(name=name, max_rel_error=worst, checked=checked, passed=passed)
