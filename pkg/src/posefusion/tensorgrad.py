"""Minimal reverse-mode differentiation over double-precision arrays.

The engine is deliberately closed-world: it provides exactly the forward
operations needed by the heatmap predictor and the fusion chain, a tape
that records them, a backward pass, an Adam optimizer, a checkpoint
format, and a finite-difference verification oracle. Other modules may
register their own nodes (with hand-derived adjoints) through
``Tape.record``.

Everything is float64. NaN or Inf appearing in an op's output raises
immediately, naming the op.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TensorGradError",
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "backward",
    "add",
    "subtract",
    "multiply",
    "scalar_divide",
    "conv2d",
    "relu",
    "linear",
    "softmax_over_set",
    "weighted_sum",
    "euclidean_norm",
    "mean",
    "AdamState",
    "adam_step",
    "finite_difference_check",
    "save_checkpoint",
    "load_checkpoint",
]


class TensorGradError(Exception):
    """Base error for the differentiation engine."""


class ShapeError(TensorGradError):
    """Operands have incompatible shapes."""


class NonFiniteError(TensorGradError):
    """An op produced NaN or Inf."""


class Tensor:
    """A double-precision array with a gradient-participation flag.

    Tensors are value carriers only; the computation structure lives on
    the tape. Hashing is by identity, so tensors key gradient dicts.
    """

    __slots__ = ("values", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: "callable"
    name: str


class Tape:
    """Ordered record of executed operations, consumed once by backward."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, inputs, output: Tensor, vjp, name: str = "custom") -> None:
        """Register a node. ``vjp(grad_out)`` must return one gradient array
        (or None) per input, in order."""
        if self._consumed:
            raise TensorGradError("tape already consumed by a backward pass")
        self._nodes.append(_Node(tuple(inputs), output, vjp, name))


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")


def _result(tape: Tape | None, inputs, values, vjp, name: str) -> Tensor:
    _check_finite(values, name)
    out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
    if tape is not None and out.requires_grad:
        tape.record(inputs, out, vjp, name)
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# forward ops


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _result(tape, (a, b), a.values + b.values, lambda g: (g, g), "add")


def subtract(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "subtract")
    return _result(tape, (a, b), a.values - b.values, lambda g: (g, -g), "subtract")


def multiply(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "multiply")
    av, bv = a.values, b.values
    return _result(tape, (a, b), av * bv, lambda g: (g * bv, g * av), "multiply")


def scalar_divide(tape: Tape | None, a: Tensor, s: float) -> Tensor:
    if s == 0:
        raise TensorGradError("scalar_divide: divisor is zero")
    return _result(tape, (a,), a.values / s, lambda g: (g / s,), "scalar_divide")


def relu(tape: Tape | None, a: Tensor) -> Tensor:
    gate = a.values > 0
    return _result(tape, (a,), np.where(gate, a.values, 0.0), lambda g: (g * gate,), "relu")


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W), zero-padded by 1 -> (C*9, N*H*W) patch matrix."""
    n, c, h, w = x.shape
    hw = h * w
    padded = np.zeros((n, c, h + 2, w + 2))
    padded[:, :, 1:-1, 1:-1] = x
    cols = np.empty((c * 9, n * hw))
    for i in range(n):
        dst = cols[:, i * hw:(i + 1) * hw].reshape(c, 9, h, w)
        k = 0
        for ki in range(3):
            for kj in range(3):
                dst[:, k] = padded[i, :, ki:ki + h, kj:kj + w]
                k += 1
    return cols


def _col2im(cols: np.ndarray, n: int, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col: scatter (C*9, N*H*W) back into (N, C, H, W)."""
    hw = h * w
    padded = np.zeros((n, c, h + 2, w + 2))
    for i in range(n):
        src = cols[:, i * hw:(i + 1) * hw].reshape(c, 9, h, w)
        k = 0
        for ki in range(3):
            for kj in range(3):
                padded[i, :, ki:ki + h, kj:kj + w] += src[:, k]
                k += 1
    return padded[:, :, 1:-1, 1:-1]


def conv2d(tape: Tape | None, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    x: (C_in, H, W), weight: (C_out, C_in, 3, 3), bias: (C_out,).
    An (N, C_in, H, W) input is treated as a stack of independent images
    (shared-weight application across views in one call).
    """
    if x.values.ndim not in (3, 4) or weight.values.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: bad operand shapes {x.shape}, {weight.shape}")
    batched = x.values.ndim == 4
    xv = x.values if batched else x.values[None]
    n, c_in, h, w = xv.shape
    c_out = weight.shape[0]
    if weight.shape[1] != c_in or bias.shape != (c_out,):
        raise ShapeError(f"conv2d: incompatible shapes {x.shape}, {weight.shape}, {bias.shape}")
    cols = _im2col(xv)
    wmat = weight.values.reshape(c_out, c_in * 9)
    y = (wmat @ cols + bias.values[:, None]).reshape(c_out, n, h, w).swapaxes(0, 1)
    y = y if batched else y[0]

    def vjp(g):
        gv = g if batched else g[None]
        gmat = np.ascontiguousarray(gv.swapaxes(0, 1)).reshape(c_out, n * h * w)
        gx = _col2im(wmat.T @ gmat, n, c_in, h, w)
        gw = (gmat @ cols.T).reshape(c_out, c_in, 3, 3)
        gb = gmat.sum(axis=1)
        return (gx if batched else gx[0]), gw, gb

    return _result(tape, (x, weight, bias), y, vjp, "conv2d")


def linear(tape: Tape | None, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer y = W x + b for a 1-D input."""
    if x.values.ndim != 1 or weight.values.ndim != 2:
        raise ShapeError(f"linear: bad operand shapes {x.shape}, {weight.shape}")
    m, n = weight.shape
    if x.shape != (n,) or bias.shape != (m,):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {weight.shape}, {bias.shape}")
    xv, wv = x.values, weight.values
    y = wv @ xv + bias.values

    def vjp(g):
        return wv.T @ g, np.outer(g, xv), g

    return _result(tape, (x, weight, bias), y, vjp, "linear")


def softmax_over_set(tape: Tape | None, values: Tensor, valid_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over a flat set of activations, stabilised by max subtraction.

    Entries flagged invalid are expected to already carry the exclusion
    value epsilon (see the heatmap module); they stay in the softmax
    domain and receive the (numerically zero) weight exp(eps - max)/Z.
    The mask only guards against a fully invalid set.
    """
    if values.values.ndim != 1:
        raise ShapeError(f"softmax_over_set: input must be 1-D, got {values.shape}")
    if valid_mask is not None:
        valid_mask = np.asarray(valid_mask, dtype=bool)
        if valid_mask.shape != values.shape:
            raise ShapeError(
                f"softmax_over_set: mask shape {valid_mask.shape} != values shape {values.shape}"
            )
        if not valid_mask.any():
            raise TensorGradError("softmax_over_set: no valid entries in set")
    v = values.values
    e = np.exp(v - v.max())
    p = e / e.sum()

    def vjp(g):
        return (p * (g - np.dot(g, p)),)

    return _result(tape, (values,), p, vjp, "softmax_over_set")


def weighted_sum(tape: Tape | None, coords: np.ndarray, weights: Tensor) -> Tensor:
    """Sum of coordinate rows weighted per entry: (I, k) x (I,) -> (k,).

    Coordinates are data (back-projected pixel positions), not a
    differentiated quantity; gradients flow to the weights only.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if weights.values.ndim != 1 or coords.ndim != 2 or coords.shape[0] != weights.shape[0]:
        raise ShapeError(
            f"weighted_sum: incompatible shapes coords {coords.shape}, weights {weights.shape}"
        )
    y = coords.T @ weights.values

    def vjp(g):
        return (coords @ g,)

    return _result(tape, (weights,), y, vjp, "weighted_sum")


def euclidean_norm(tape: Tape | None, x: Tensor) -> Tensor:
    """L2 norm of a vector, as a scalar tensor. Subgradient 0 at the origin."""
    xv = x.values
    n = float(np.linalg.norm(xv))

    def vjp(g):
        if n == 0.0:
            return (np.zeros_like(xv),)
        return (g * xv / n,)

    return _result(tape, (x,), np.float64(n), vjp, "euclidean_norm")


def mean(tape: Tape | None, x: Tensor) -> Tensor:
    """Arithmetic mean of all entries, as a scalar tensor."""
    size = x.size
    if size == 0:
        raise ShapeError("mean: empty tensor")
    y = x.values.mean()

    def vjp(g):
        return (np.full(x.shape, g / size),)

    return _result(tape, (x,), y, vjp, "mean")


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over the tape; returns gradients for every tensor
    that has requires_grad set. Each node is visited exactly once."""
    if loss.values.ndim != 0:
        raise TensorGradError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape._consumed:
        raise TensorGradError("backward: tape already consumed")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    alive: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape._nodes):
        g_out = grads.pop(id(node.output), None)
        alive.pop(id(node.output), None)
        if g_out is None:
            continue
        g_ins = node.vjp(g_out)
        if len(g_ins) != len(node.inputs):
            raise TensorGradError(f"node '{node.name}' returned {len(g_ins)} gradients "
                                  f"for {len(node.inputs)} inputs")
        for t, g in zip(node.inputs, g_ins):
            if g is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=np.float64)
                alive[key] = t
    return {t: grads[key].reshape(t.shape) for key, t in alive.items() if t.requires_grad}


# ---------------------------------------------------------------------------
# finite-difference verification


def finite_difference_check(fn, point: Tensor, step: float = 1e-6) -> float:
    """Compare the taped gradient of ``fn`` against central differences.

    ``fn(tape, x)`` must build a scalar Tensor from ``x`` (deterministically).
    Returns max over components of |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    x = Tensor(point.values.copy(), requires_grad=True)
    tape = Tape()
    out = fn(tape, x)
    if out.values.ndim != 0:
        raise TensorGradError("finite_difference_check: fn must return a scalar tensor")
    analytic = backward(tape, out).get(x)
    if analytic is None:
        analytic = np.zeros(x.shape)

    flat = x.values.reshape(-1)
    fd = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(None, x).item()
        flat[i] = orig - step
        lo = fn(None, x).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * step)

    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.abs(a))
    return float(np.max(np.abs(a - fd) / denom)) if flat.size else 0.0


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter moment accumulators for the Adam update."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on params and state.

    Parameters without a gradient entry are treated as zero-gradient.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != param shape {p.shape} for '{name}'")
        m = state.m.setdefault(name, np.zeros(p.shape))
        v = state.v.setdefault(name, np.zeros(p.shape))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.values -= update


# ---------------------------------------------------------------------------
# checkpoints: one-line JSON header, then little-endian float64 payload


def save_checkpoint(path, params: dict[str, Tensor], extra: dict | None = None) -> None:
    """Write parameters atomically: temp file in the target directory, then rename."""
    header = {
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("ascii") + b"\n"
    payload = b"".join(
        np.ascontiguousarray(v.values, dtype="<f8").tobytes() for v in params.values()
    )
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    """Read a checkpoint; returns (params, extra-header-dict)."""
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise TensorGradError(f"checkpoint {path}: bad header: {e}") from e
        payload = f.read()
    params: dict[str, Tensor] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise TensorGradError(f"checkpoint {path}: truncated payload at '{entry['name']}'")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").reshape(shape).copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True)
        offset += nbytes
    if offset != len(payload):
        raise TensorGradError(f"checkpoint {path}: {len(payload) - offset} trailing bytes")
    return params, header.get("extra", {})
