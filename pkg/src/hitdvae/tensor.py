"""Differentiable float64 tensor engine with tape-based reverse-mode autodiff.

Every layer, the sequence model and all training losses compute with
`Tensor`. The graph is dynamic: each op records its inputs together with a
vector-Jacobian-product closure, and `backward()` on a scalar walks the tape
once, accumulating gradients into every requires-grad ancestor. Data arrays
are treated as immutable once a tensor participates in a graph; gradient
buffers are the only mutable state.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradError",
    "GradCheckError",
    "CheckpointError",
    "concat",
    "stack",
    "where",
    "l1_norm",
    "l2_norm",
    "no_grad",
    "grad_enabled",
    "AdamState",
    "adam_step",
    "global_norm",
    "clip_grad_norm",
    "zero_grads",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class GradError(RuntimeError):
    """Backward-pass misuse: non-scalar loss, missing gradient, detached graph."""


class GradCheckError(RuntimeError):
    """Finite-difference check hit a non-finite value."""


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


_GRAD_STACK = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the block (generation / eval fast path)."""
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


def grad_enabled() -> bool:
    return _GRAD_STACK[-1]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over axes that were broadcast so it matches `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_vjp", "name")

    # make ndarray (op) Tensor defer to the Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    # ------------------------------------------------------------------
    # basics

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # ------------------------------------------------------------------
    # graph construction

    @staticmethod
    def _node(data: np.ndarray, inputs: Sequence["Tensor"], vjp) -> "Tensor":
        out = Tensor(data)
        if grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._prev = tuple(inputs)
            out._vjp = vjp
        return out

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _check_broadcast(self, other: "Tensor", op: str) -> None:
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise ShapeError(f"{op}: shapes {self.shape} and {other.shape} do not broadcast") from None

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        other = self._coerce(other)
        self._check_broadcast(other, "add")
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._node(a.data + b.data, (a, b), vjp)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        self._check_broadcast(other, "sub")
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return self._node(a.data - b.data, (a, b), vjp)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        self._check_broadcast(other, "mul")
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return self._node(a.data * b.data, (a, b), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        self._check_broadcast(other, "div")
        a, b = self, other

        def vjp(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb

        return self._node(a.data / b.data, (a, b), vjp)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        a = self

        def vjp(g):
            return (-g,)

        return self._node(-a.data, (a,), vjp)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ShapeError("pow supports scalar exponents only")
        a = self

        def vjp(g):
            return (g * p * np.power(a.data, p - 1),)

        return self._node(np.power(a.data, p), (a,), vjp)

    # ------------------------------------------------------------------
    # linear algebra / structure

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

        def vjp(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            return ga, gb

        return self._node(np.matmul(a.data, b.data), (a, b), vjp)

    def transpose(self, axes: Sequence[int] | None = None):
        a = self
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def vjp(g):
            return (np.transpose(g, inv),)

        return self._node(np.transpose(a.data, axes), (a,), vjp)

    @property
    def T(self):
        return self.transpose()

    def reshape(self, shape):
        a = self
        shape = tuple(shape)

        def vjp(g):
            return (g.reshape(a.shape),)

        return self._node(a.data.reshape(shape), (a,), vjp)

    def __getitem__(self, idx):
        a = self
        out = a.data[idx]
        advanced = isinstance(idx, (np.ndarray, list)) or (
            isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx)
        )

        def vjp(g):
            full = np.zeros_like(a.data)
            if advanced:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return self._node(np.array(out, dtype=np.float64), (a,), vjp)

    # ------------------------------------------------------------------
    # elementwise nonlinearities

    def exp(self):
        a = self
        out = np.exp(a.data)

        def vjp(g):
            return (g * out,)

        return self._node(out, (a,), vjp)

    def log(self):
        a = self

        def vjp(g):
            return (g / a.data,)

        return self._node(np.log(a.data), (a,), vjp)

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def vjp(g):
            return (g * 0.5 / out,)

        return self._node(out, (a,), vjp)

    def tanh(self):
        a = self
        out = np.tanh(a.data)

        def vjp(g):
            return (g * (1.0 - out * out),)

        return self._node(out, (a,), vjp)

    def sigmoid(self):
        a = self
        x = a.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def vjp(g):
            return (g * out * (1.0 - out),)

        return self._node(out, (a,), vjp)

    def relu(self):
        a = self
        mask = a.data > 0

        def vjp(g):
            return (g * mask,)

        return self._node(a.data * mask, (a,), vjp)

    def abs(self):
        a = self

        def vjp(g):
            return (g * np.sign(a.data),)

        return self._node(np.abs(a.data), (a,), vjp)

    def arccos(self):
        a = self

        def vjp(g):
            return (-g / np.sqrt(1.0 - a.data * a.data),)

        return self._node(np.arccos(a.data), (a,), vjp)

    def clip(self, lo: float, hi: float):
        a = self
        inside = (a.data >= lo) & (a.data <= hi)

        def vjp(g):
            return (g * inside,)

        return self._node(np.clip(a.data, lo, hi), (a,), vjp)

    # ------------------------------------------------------------------
    # reductions / softmax

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return self._node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        if axis is None:
            n = a.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = 1
            for ax in axes:
                n *= a.shape[ax]

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g / n, a.shape),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, a.shape),)

        return self._node(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)

    def softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def vjp(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),)

        return self._node(out, (a,), vjp)

    # ------------------------------------------------------------------
    # backward

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all requires-grad ancestors.

        Repeated calls accumulate additively; each call propagates only its
        own adjoints, so gradients of a sum equal the sum of gradients.
        """
        if self.data.size != 1:
            raise GradError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradError("loss is not connected to a gradient graph")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in seen and child.requires_grad:
                    stack.append((child, False))

        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for inp, ig in zip(node._prev, node._vjp(g)):
                if ig is None or not inp.requires_grad:
                    continue
                prev = adjoint.get(id(inp))
                adjoint[id(inp)] = ig if prev is None else prev + ig


# ----------------------------------------------------------------------
# free functions


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._node(out, tensors, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else axis + t.ndim + 1, 1)
        expanded.append(t.reshape(shape))
    return concat(expanded, axis=axis)


def where(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Keep `x` where mask is true, else the constant `fill` (no grad there)."""
    x = Tensor._coerce(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ShapeError(f"where: mask {mask.shape} does not broadcast with {x.shape}") from None
    out = np.where(mask, x.data, fill)

    def vjp(g):
        return (_unbroadcast(g * mask, x.shape),)

    return Tensor._node(out, (x,), vjp)


def l1_norm(x: Tensor) -> Tensor:
    return x.abs().sum()


def l2_norm(x: Tensor) -> Tensor:
    return (x * x).sum().sqrt()


# ----------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam moment buffers for a fixed parameter list.

    Defaults follow the usual (beta1=0.9, beta2=0.999, eps=1e-8); the step
    count increases by one per update.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are cleared afterwards."""
    params = list(params)
    if len(params) != len(state.params):
        raise GradError(f"adam_step: {len(params)} params vs state of {len(state.params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradError(f"adam_step: parameter {i} ({p.name or 'unnamed'}) has no gradient")
        if p.grad.shape != state.m[i].shape:
            raise ShapeError(f"adam_step: gradient shape {p.grad.shape} vs moment {state.m[i].shape}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None


def global_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    norm = global_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------
# finite differences


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               step: float = 1e-5) -> float:
    """Compare analytic gradients of the scalar `f()` against central differences.

    Returns the max over all coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``. `f` must be deterministic
    and recompute from the params' current data.
    """
    if step <= 0:
        raise ValueError("grad_check step must be positive")
    params = list(params)
    zero_grads(params)
    out = f()
    if out.data.size != 1:
        raise GradError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)

    worst = 0.0
    for pi, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data.reshape(()))
            flat[i] = orig - step
            fm = float(f().data.reshape(()))
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = gflat[i]
            if not (np.isfinite(a) and np.isfinite(numeric)):
                name = p.name or f"param{pi}"
                raise GradCheckError(f"non-finite gradient at {name}[{i}]: analytic={a} numeric={numeric}")
            rel = abs(a - numeric) / max(1.0, abs(a))
            if rel > worst:
                worst = rel
    return worst


# ----------------------------------------------------------------------
# checkpoint I/O

_MAGIC = b"HDT1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays as one binary blob with a JSON index header.

    Files are canonical: arrays are laid out in sorted name order, so saving
    the result of `load_checkpoint` reproduces the bytes exactly.
    """
    index: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        index[name] = {"shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = {"format": "hitdvae-checkpoint", "version": 1, "dtype": "<f8", "arrays": index}
    if meta is not None:
        header["meta"] = meta
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back arrays and metadata written by `save_checkpoint` (bit-exact)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated at byte {len(blob)} (header length missing)")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    if len(blob) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated at byte {len(blob)} (header needs {12 + hlen})")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if header.get("format") != "hitdvae-checkpoint" or header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported format/version {header.get('format')}/{header.get('version')}")
    payload = blob[12 + hlen:]
    arrays: dict[str, np.ndarray] = {}
    for name, entry in header["arrays"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated at payload byte {len(payload)}, array {name!r} needs {end}")
        arrays[name] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
    return arrays, header.get("meta", {})
