"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

The universal numeric carrier is a C-contiguous float32 ndarray ("tensor").
Every op computes internally in float64 and rounds back to the working dtype,
so dot products and reductions are accumulated at 64-bit regardless of array
order. A Graph is a flat tape of primitive ops; nodes can only reference
earlier nodes, which makes the graph acyclic by construction. Graphs are
immutable after construction except through set_parameter().

Supported primitives: matmul, add, scale, gelu, tanh, layer_norm, mean_pool,
softmax, sigmoid, l2_normalize, mse_loss, softmax_cross_entropy,
binary_cross_entropy, concat, slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

DTYPE = np.float32
LAYER_NORM_EPS = 1e-5

Tensor = np.ndarray


class GraphError(Exception):
    """Structural problem while building or running a graph."""


class ShapeError(GraphError):
    """Input shapes incompatible with an op; message names the node."""


class NumericError(GraphError):
    """A node produced NaN/Inf."""


def as_tensor(x) -> Tensor:
    """Coerce to a C-contiguous float32 array."""
    return np.ascontiguousarray(np.asarray(x, dtype=DTYPE))


def require_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains NaN or Inf")
    return arr


def l2_normalize_rows(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize the last axis to unit Euclidean norm.

    Zero rows come back as zero rows; the second return value is a boolean
    mask flagging them so callers can decide whether that is an error.
    """
    x = np.asarray(arr, dtype=np.float64)
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    zero = norms[..., 0] == 0.0
    safe = np.where(norms == 0.0, 1.0, norms)
    out = (x / safe).astype(arr.dtype if arr.dtype.kind == "f" else DTYPE)
    return out, zero


@dataclass(frozen=True)
class Node:
    """Handle to one tape entry."""

    graph: "Graph" = field(repr=False)
    index: int
    name: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class Graph:
    """Tape of primitive ops over named leaf tensors.

    Leaves are either inputs (bound at run time) or parameters (stored in the
    graph, marked trainable or frozen). Ops append nodes; shape validation
    happens at build time and errors name the offending node.
    """

    def __init__(self):
        self._ops: list[dict] = []
        self._params: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}
        self._input_shapes: dict[str, tuple[int, ...]] = {}
        self._outputs: dict[str, Node] = {}
        self._names: set[str] = set()

    # -- leaves ------------------------------------------------------------

    def input(self, name: str, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        node = self._append("input", [], shape, name=name)
        self._input_shapes[name] = shape
        return node

    def parameter(self, name: str, value, trainable: bool = True) -> Node:
        value = as_tensor(value)
        node = self._append("param", [], value.shape, name=name)
        self._params[name] = value
        self._trainable[name] = bool(trainable)
        return node

    def set_parameter(self, name: str, value) -> None:
        """Explicit parameter update; the one permitted mutation."""
        if name not in self._params:
            raise GraphError(f"unknown parameter '{name}'")
        value = as_tensor(value)
        if value.shape != self._params[name].shape:
            raise ShapeError(
                f"parameter '{name}' has shape {self._params[name].shape}, "
                f"got {value.shape}"
            )
        self._params[name] = value

    def get_parameter(self, name: str) -> np.ndarray:
        return self._params[name]

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def output(self, name: str, node: Node) -> Node:
        self._outputs[name] = node
        return node

    @property
    def outputs(self) -> dict[str, Node]:
        return dict(self._outputs)

    # -- op construction ----------------------------------------------------

    def _append(self, op: str, args: list[Node], shape, name=None, **attrs) -> Node:
        for a in args:
            if a.graph is not self:
                raise GraphError(f"node '{a.name}' belongs to a different graph")
        idx = len(self._ops)
        name = name or f"{op}_{idx}"
        if name in self._names:
            raise GraphError(f"duplicate node name '{name}'")
        self._names.add(name)
        node = Node(self, idx, name, tuple(int(s) for s in shape))
        self._ops.append(
            {"op": op, "args": [a.index for a in args], "node": node, "attrs": attrs}
        )
        return node

    def matmul(self, a: Node, b: Node, transpose_a=False, transpose_b=False,
               name=None) -> Node:
        sa = _t2(a.shape, transpose_a)
        sb = _t2(b.shape, transpose_b)
        if len(sa) < 2 or len(sb) < 2:
            raise ShapeError(f"matmul '{name or 'matmul'}': operands must be >=2-D")
        if sa[-1] != sb[-2]:
            raise ShapeError(
                f"matmul '{name or f'matmul_{len(self._ops)}'}': inner dims "
                f"{sa} x {sb} do not match"
            )
        try:
            batch = np.broadcast_shapes(sa[:-2], sb[:-2])
        except ValueError as e:
            raise ShapeError(f"matmul batch dims incompatible: {sa} x {sb}") from e
        shape = batch + (sa[-2], sb[-1])
        return self._append("matmul", [a, b], shape, name=name,
                            ta=transpose_a, tb=transpose_b)

    def add(self, a: Node, b: Node, name=None) -> Node:
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError as e:
            raise ShapeError(
                f"add '{name or f'add_{len(self._ops)}'}': cannot broadcast "
                f"{a.shape} + {b.shape}"
            ) from e
        return self._append("add", [a, b], shape, name=name)

    def scale(self, x: Node, s, name=None) -> Node:
        """Multiply by a python float or by a scalar node (shape () or (1,))."""
        if isinstance(s, Node):
            if s.size != 1:
                raise ShapeError(
                    f"scale '{name or f'scale_{len(self._ops)}'}': scale node "
                    f"must be scalar, got shape {s.shape}"
                )
            return self._append("scale", [x, s], x.shape, name=name)
        return self._append("scale", [x], x.shape, name=name, const=float(s))

    def gelu(self, x: Node, name=None) -> Node:
        return self._append("gelu", [x], x.shape, name=name)

    def tanh(self, x: Node, name=None) -> Node:
        return self._append("tanh", [x], x.shape, name=name)

    def sigmoid(self, x: Node, name=None) -> Node:
        return self._append("sigmoid", [x], x.shape, name=name)

    def layer_norm(self, x: Node, gain: Node | None = None,
                   bias: Node | None = None, name=None) -> Node:
        d = x.shape[-1]
        args = [x]
        if gain is not None:
            if gain.shape != (d,):
                raise ShapeError(f"layer_norm gain shape {gain.shape} != ({d},)")
            args.append(gain)
        if bias is not None:
            if gain is None:
                raise GraphError("layer_norm bias requires gain")
            if bias.shape != (d,):
                raise ShapeError(f"layer_norm bias shape {bias.shape} != ({d},)")
            args.append(bias)
        return self._append("layer_norm", args, x.shape, name=name)

    def mean_pool(self, x: Node, axis: int, name=None) -> Node:
        axis = axis % len(x.shape)
        shape = x.shape[:axis] + x.shape[axis + 1:]
        return self._append("mean_pool", [x], shape, name=name, axis=axis)

    def softmax(self, x: Node, name=None) -> Node:
        return self._append("softmax", [x], x.shape, name=name)

    def l2_normalize(self, x: Node, name=None) -> Node:
        return self._append("l2_normalize", [x], x.shape, name=name)

    def mse_loss(self, a: Node, b: Node, name=None) -> Node:
        if a.shape != b.shape:
            raise ShapeError(
                f"mse_loss '{name or f'mse_loss_{len(self._ops)}'}': "
                f"{a.shape} vs {b.shape}"
            )
        return self._append("mse_loss", [a, b], (), name=name)

    def softmax_cross_entropy(self, logits: Node, targets: Node, name=None) -> Node:
        """Mean over rows of logsumexp(z) - sum(t*z); targets are probability
        rows and receive no gradient."""
        if logits.shape != targets.shape or len(logits.shape) != 2:
            raise ShapeError(
                f"softmax_cross_entropy expects matching [N,C], got "
                f"{logits.shape} vs {targets.shape}"
            )
        return self._append("softmax_ce", [logits, targets], (), name=name)

    def binary_cross_entropy(self, logits: Node, targets: Node, name=None) -> Node:
        """Mean elementwise BCE from logits, log-sum-exp stabilized; targets
        receive no gradient."""
        if logits.shape != targets.shape:
            raise ShapeError(
                f"binary_cross_entropy shapes differ: {logits.shape} vs "
                f"{targets.shape}"
            )
        return self._append("binary_ce", [logits, targets], (), name=name)

    def concat(self, xs: list[Node], axis: int, name=None) -> Node:
        if not xs:
            raise GraphError("concat of zero tensors")
        axis = axis % len(xs[0].shape)
        base = xs[0].shape
        for x in xs[1:]:
            if len(x.shape) != len(base) or any(
                s != b for i, (s, b) in enumerate(zip(x.shape, base)) if i != axis
            ):
                raise ShapeError(f"concat shapes incompatible along axis {axis}")
        shape = list(base)
        shape[axis] = sum(x.shape[axis] for x in xs)
        return self._append("concat", list(xs), shape, name=name, axis=axis)

    def slice(self, x: Node, axis: int, start: int, stop: int, name=None) -> Node:
        axis = axis % len(x.shape)
        if not (0 <= start < stop <= x.shape[axis]):
            raise ShapeError(
                f"slice [{start}:{stop}] out of range for axis {axis} of "
                f"{x.shape}"
            )
        shape = list(x.shape)
        shape[axis] = stop - start
        return self._append("slice", [x], shape, name=name,
                            axis=axis, start=start, stop=stop)

    # -- execution -----------------------------------------------------------

    def run(self, inputs: dict[str, np.ndarray] | None = None,
            dtype=DTYPE, param_overrides=None) -> "Evaluation":
        return Evaluation(self, inputs or {}, dtype, param_overrides or {})


def _t2(shape, transpose):
    if transpose and len(shape) >= 2:
        return shape[:-2] + (shape[-1], shape[-2])
    return shape


def _swap_last2(arr):
    return np.swapaxes(arr, -1, -2)


def _unbroadcast(grad, shape):
    """Sum gradient over axes that numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Evaluation:
    """One forward pass over a graph: node values plus backward()."""

    def __init__(self, graph: Graph, inputs, dtype, param_overrides):
        self.graph = graph
        self.dtype = np.dtype(dtype)
        self._values: list[np.ndarray] = []
        self.zero_norm_nodes: set[str] = set()
        self._execute(inputs, param_overrides)

    def _leaf(self, arr):
        return np.asarray(arr, dtype=self.dtype)

    def _round(self, arr):
        return np.asarray(arr, dtype=self.dtype)

    def _execute(self, inputs, overrides):
        g = self.graph
        for rec in g._ops:
            op, node, attrs = rec["op"], rec["node"], rec["attrs"]
            args = [self._values[i] for i in rec["args"]]
            if op == "input":
                if node.name not in inputs:
                    raise GraphError(f"missing input '{node.name}'")
                val = self._leaf(inputs[node.name])
                if val.shape != node.shape:
                    raise ShapeError(
                        f"input '{node.name}' expects shape {node.shape}, "
                        f"got {val.shape}"
                    )
            elif op == "param":
                src = overrides.get(node.name, g._params[node.name])
                val = self._leaf(src)
                if val.shape != node.shape:
                    raise ShapeError(
                        f"parameter '{node.name}' expects shape {node.shape}, "
                        f"got {val.shape}"
                    )
            else:
                val = self._round(self._forward_op(op, node, args, attrs))
            require_finite(val, f"node '{node.name}'")
            self._values.append(val)

    def _forward_op(self, op, node, args, attrs):
        a64 = [np.asarray(a, dtype=np.float64) for a in args]
        if op == "matmul":
            a, b = a64
            if attrs["ta"]:
                a = _swap_last2(a)
            if attrs["tb"]:
                b = _swap_last2(b)
            return a @ b
        if op == "add":
            return a64[0] + a64[1]
        if op == "scale":
            s = a64[1].reshape(()) if len(a64) == 2 else attrs["const"]
            return a64[0] * s
        if op == "gelu":
            x = a64[0]
            return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
        if op == "tanh":
            return np.tanh(a64[0])
        if op == "sigmoid":
            return _stable_sigmoid(a64[0])
        if op == "layer_norm":
            x = a64[0]
            mu = x.mean(axis=-1, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=-1, keepdims=True)
            xhat = xc / np.sqrt(var + LAYER_NORM_EPS)
            if len(a64) >= 2:
                xhat = xhat * a64[1]
            if len(a64) == 3:
                xhat = xhat + a64[2]
            return xhat
        if op == "mean_pool":
            return a64[0].mean(axis=attrs["axis"])
        if op == "softmax":
            z = a64[0] - a64[0].max(axis=-1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=-1, keepdims=True)
        if op == "l2_normalize":
            out, zero = l2_normalize_rows(a64[0])
            if zero.any():
                self.zero_norm_nodes.add(node.name)
            return out
        if op == "mse_loss":
            d = a64[0] - a64[1]
            return np.mean(d * d)
        if op == "softmax_ce":
            z, t = a64
            m = z.max(axis=-1, keepdims=True)
            lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
            return np.mean(lse - (t * z).sum(axis=-1))
        if op == "binary_ce":
            z, y = a64
            return np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))
        if op == "concat":
            return np.concatenate(a64, axis=attrs["axis"])
        if op == "slice":
            idx = [slice(None)] * a64[0].ndim
            idx[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
            return a64[0][tuple(idx)]
        raise GraphError(f"unknown op '{op}'")

    def value(self, node: Node) -> np.ndarray:
        return self._values[node.index]

    @property
    def outputs(self) -> dict[str, np.ndarray]:
        return {name: self._values[n.index] for name, n in self.graph._outputs.items()}

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss for every trainable leaf.

        Frozen leaves get no entry. Gradient accumulation runs in float64 and
        is rounded to the working dtype at the end.
        """
        if loss.size != 1:
            raise GraphError(
                f"backward needs a scalar loss, node '{loss.name}' has shape "
                f"{loss.shape}"
            )
        g = self.graph
        grads: list[np.ndarray | None] = [None] * len(g._ops)
        grads[loss.index] = np.ones(loss.shape, dtype=np.float64)
        for rec in reversed(g._ops[: loss.index + 1]):
            node = rec["node"]
            gout = grads[node.index]
            if gout is None or rec["op"] in ("input", "param"):
                continue
            for argidx, garg in self._backward_op(rec, gout):
                if garg is None:
                    continue
                if grads[argidx] is None:
                    grads[argidx] = garg
                else:
                    grads[argidx] = grads[argidx] + garg
        out = {}
        for rec in g._ops:
            node = rec["node"]
            if rec["op"] == "param" and g._trainable[node.name]:
                gacc = grads[node.index]
                if gacc is None:
                    gacc = np.zeros(node.shape, dtype=np.float64)
                out[node.name] = np.asarray(gacc, dtype=self.dtype)
        return out

    def _backward_op(self, rec, gout):
        op, attrs = rec["op"], rec["attrs"]
        args = rec["args"]
        vals = [np.asarray(self._values[i], dtype=np.float64) for i in args]
        shapes = [self.graph._ops[i]["node"].shape for i in args]
        gout = np.asarray(gout, dtype=np.float64)

        if op == "matmul":
            a, b = vals
            ta, tb = attrs["ta"], attrs["tb"]
            ae = _swap_last2(a) if ta else a
            be = _swap_last2(b) if tb else b
            ga = gout @ _swap_last2(be)
            gb = _swap_last2(ae) @ gout
            if ta:
                ga = _swap_last2(ga)
            if tb:
                gb = _swap_last2(gb)
            return [(args[0], _unbroadcast(ga, shapes[0])),
                    (args[1], _unbroadcast(gb, shapes[1]))]
        if op == "add":
            return [(args[0], _unbroadcast(gout, shapes[0])),
                    (args[1], _unbroadcast(gout, shapes[1]))]
        if op == "scale":
            if len(args) == 2:
                x, s = vals
                return [(args[0], gout * s.reshape(())),
                        (args[1], np.sum(gout * x).reshape(shapes[1]))]
            return [(args[0], gout * attrs["const"])]
        if op == "gelu":
            x = vals[0]
            cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            return [(args[0], gout * (cdf + x * pdf))]
        if op == "tanh":
            y = np.tanh(vals[0])
            return [(args[0], gout * (1.0 - y * y))]
        if op == "sigmoid":
            y = _stable_sigmoid(vals[0])
            return [(args[0], gout * y * (1.0 - y))]
        if op == "layer_norm":
            x = vals[0]
            d = x.shape[-1]
            mu = x.mean(axis=-1, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
            xhat = xc * inv
            gxhat = gout * vals[1] if len(args) >= 2 else gout
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
            res = [(args[0], gx)]
            if len(args) >= 2:
                lead = tuple(range(gout.ndim - 1))
                res.append((args[1], (gout * xhat).sum(axis=lead)))
            if len(args) == 3:
                lead = tuple(range(gout.ndim - 1))
                res.append((args[2], gout.sum(axis=lead)))
            return res
        if op == "mean_pool":
            ax = attrs["axis"]
            n = shapes[0][ax]
            return [(args[0], np.repeat(np.expand_dims(gout / n, ax), n, axis=ax))]
        if op == "softmax":
            y = self._forward_op("softmax", None, [vals[0]], {})
            dot = (gout * y).sum(axis=-1, keepdims=True)
            return [(args[0], y * (gout - dot))]
        if op == "l2_normalize":
            x = vals[0]
            norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
            zero = norms == 0.0
            safe = np.where(zero, 1.0, norms)
            y = x / safe
            dot = (gout * y).sum(axis=-1, keepdims=True)
            gx = (gout - y * dot) / safe
            gx = np.where(zero, 0.0, gx)
            return [(args[0], gx)]
        if op == "mse_loss":
            a, b = vals
            n = a.size
            ga = gout * 2.0 * (a - b) / n
            return [(args[0], ga), (args[1], -ga)]
        if op == "softmax_ce":
            z, t = vals
            n = z.shape[0]
            p = self._forward_op("softmax", None, [z], {})
            return [(args[0], gout * (p - t) / n), (args[1], None)]
        if op == "binary_ce":
            z, y = vals
            return [(args[0], gout * (_stable_sigmoid(z) - y) / z.size),
                    (args[1], None)]
        if op == "concat":
            ax = attrs["axis"]
            res, off = [], 0
            for i, idx in enumerate(args):
                w = shapes[i][ax]
                sl = [slice(None)] * gout.ndim
                sl[ax] = slice(off, off + w)
                res.append((idx, gout[tuple(sl)]))
                off += w
            return res
        if op == "slice":
            gx = np.zeros(shapes[0], dtype=np.float64)
            sl = [slice(None)] * gx.ndim
            sl[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
            gx[tuple(sl)] = gout
            return [(args[0], gx)]
        raise GraphError(f"no backward for op '{op}'")


def _stable_sigmoid(z):
    return expit(np.asarray(z, dtype=np.float64))


def forward(graph: Graph, inputs: dict[str, np.ndarray] | None = None
            ) -> dict[str, np.ndarray]:
    """Evaluate the graph and return its named outputs."""
    return graph.run(inputs).outputs


def backward(graph: Graph, loss: Node,
             inputs: dict[str, np.ndarray] | None = None
             ) -> dict[str, np.ndarray]:
    """Forward then reverse pass; returns gradients per trainable leaf."""
    return graph.run(inputs).backward(loss)


def grad_check(graph: Graph, loss: Node, leaf: str, epsilon: float = 1e-3,
               inputs: dict[str, np.ndarray] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Both sides are evaluated in float64 so that the finite-difference
    truncation error, not float32 rounding, dominates. Relative error per
    element is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    if not graph.is_trainable(leaf):
        raise GraphError(f"leaf '{leaf}' is frozen")
    inputs = inputs or {}
    run = graph.run(inputs, dtype=np.float64)
    analytic = run.backward(loss)[leaf]

    base = np.asarray(graph.get_parameter(leaf), dtype=np.float64)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            pert = flat.copy()
            pert[i] += sign * epsilon
            val = graph.run(
                inputs, dtype=np.float64,
                param_overrides={leaf: pert.reshape(base.shape)},
            ).value(loss)
            num_flat[i] += sign * float(val)
        num_flat[i] /= 2.0 * epsilon

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
