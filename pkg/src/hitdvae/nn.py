"""Differentiable building blocks: graph convolutions, masked multi-head
attention with post-norm residual blocks, GRU cell, MLPs and an affine
coupling flow for pose density estimation."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, concat, where

LOGTWOPI = math.log(2.0 * math.pi)


class Module:
    """Tiny parameter container; submodules and Tensor attributes are walked
    in definition order, so parameter naming is deterministic."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for attr, value in self.__dict__.items():
            key = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ShapeError(f"state dict mismatch: missing={missing} unexpected={unexpected}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"state dict: {k} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.copy()


def _init(rng: np.random.Generator, shape, scale: float | None = None) -> np.ndarray:
    fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
    s = scale if scale is not None else 1.0 / math.sqrt(fan_in)
    return rng.normal(0.0, s, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = _init(rng, (in_dim, out_dim))
        self.weight = Tensor(w, requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True, name="bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = Tensor(np.ones(dim), requires_grad=True, name="gain")
        self.bias = Tensor(np.zeros(dim), requires_grad=True, name="bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * ((var + self.eps) ** -0.5) * self.gain + self.bias


def sinusoidal_encoding(positions: Sequence[int], dim: int) -> np.ndarray:
    """Standard sin/cos positional code rows for the given integer positions."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * (2.0 * np.arange(half) / dim))[None, :]
    angles = pos * freqs
    enc = np.zeros((len(positions), dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles[:, : dim // 2])
    return enc


def causal_mask(n: int) -> np.ndarray:
    """Visible iff key position j < query position t (strictly before)."""
    return np.tril(np.ones((n, n), dtype=bool), k=-1)


def shifted_causal_mask(num_queries: int, num_keys: int) -> np.ndarray:
    """Mask for query rows covering frames 2..T against keys for frames 1..T:
    row i (frame i+2) sees keys 0..i (frames 1..i+1)."""
    return np.tril(np.ones((num_queries, num_keys), dtype=bool), k=0)


_MASK_FILL = -1e30


class MultiHeadAttention(Module):
    """Scaled dot-product attention with additive masking plus a post-norm
    residual feed-forward block. Hidden keys receive exactly zero weight."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"model width {dim} not divisible by head count {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.ff1 = Linear(dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, dim, rng)
        self.norm_attn = LayerNorm(dim)
        self.norm_ff = LayerNorm(dim)

    def attend(self, query: Tensor, keys: Tensor, values: Tensor,
               mask: np.ndarray | None = None) -> Tensor:
        tq = query.shape[0]
        tk = keys.shape[0]
        if query.shape[-1] != self.dim or keys.shape[-1] != self.dim:
            raise ShapeError(f"attention width mismatch: {query.shape} / {keys.shape} vs dim {self.dim}")
        if keys.shape[0] != values.shape[0]:
            raise ShapeError(f"keys {keys.shape} and values {values.shape} disagree on length")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (tq, tk):
                raise ShapeError(f"mask shape {mask.shape} vs (queries, keys)=({tq}, {tk})")
            starved = ~mask.any(axis=1)
            if starved.any():
                rows = np.nonzero(starved)[0].tolist()
                raise ShapeError(f"attention mask leaves query rows {rows} with no visible key")

        h, dk = self.heads, self.head_dim
        q = self.q_proj(query).reshape((tq, h, dk)).transpose((1, 0, 2))
        k = self.k_proj(keys).reshape((tk, h, dk)).transpose((1, 0, 2))
        v = self.v_proj(values).reshape((tk, h, dk)).transpose((1, 0, 2))
        scores = (q @ k.transpose((0, 2, 1))) * (1.0 / math.sqrt(dk))
        if mask is not None:
            scores = where(mask[None, :, :], scores, _MASK_FILL)
        attn = scores.softmax(axis=-1)
        mixed = (attn @ v).transpose((1, 0, 2)).reshape((tq, self.dim))
        return self.out_proj(mixed)

    def __call__(self, query: Tensor, keys_values: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        x = self.norm_attn(query + self.attend(query, keys_values, keys_values, mask))
        return self.norm_ff(x + self.ff2(self.ff1(x).relu()))


class GcnBlock(Module):
    """Graph convolution X' = act(A @ X @ W) with a fully learnable adjacency,
    initialised near the identity."""

    def __init__(self, nodes: int, in_dim: int, out_dim: int, rng: np.random.Generator,
                 activation: str = "tanh"):
        if activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation tag {activation!r}")
        if out_dim <= 0:
            raise ShapeError(f"output width must be positive, got {out_dim}")
        self.nodes = nodes
        self.activation = activation
        adj = np.eye(nodes) + rng.normal(0.0, 0.01, size=(nodes, nodes))
        self.adjacency = Tensor(adj, requires_grad=True, name="adjacency")
        self.weight = Tensor(_init(rng, (in_dim, out_dim)), requires_grad=True, name="weight")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2] != self.nodes:
            raise ShapeError(f"gcn expects {self.nodes} nodes, got features of shape {x.shape}")
        out = self.adjacency @ x @ self.weight
        return out.tanh() if self.activation == "tanh" else out


class GruCell(Module):
    """Standard gated recurrent unit: h' = u*h + (1-u)*tanh(Wc x + Uc (r*h))."""

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        for gate in ("r", "u", "c"):
            setattr(self, f"w_{gate}", Tensor(_init(rng, (in_dim, hidden_dim)),
                                              requires_grad=True, name=f"w_{gate}"))
            setattr(self, f"u_{gate}", Tensor(_init(rng, (hidden_dim, hidden_dim)),
                                              requires_grad=True, name=f"u_{gate}"))
            setattr(self, f"b_{gate}", Tensor(np.zeros(hidden_dim),
                                              requires_grad=True, name=f"b_{gate}"))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"gru input width {x.shape[-1]} vs configured {self.in_dim}")
        if h.shape[-1] != self.hidden_dim:
            raise ShapeError(f"gru hidden width {h.shape[-1]} vs configured {self.hidden_dim}")
        reset = (x @ self.w_r + h @ self.u_r + self.b_r).sigmoid()
        update = (x @ self.w_u + h @ self.u_u + self.b_u).sigmoid()
        candidate = (x @ self.w_c + (reset * h) @ self.u_c + self.b_c).tanh()
        return update * h + (1.0 - update) * candidate


class Mlp(Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int,
                 rng: np.random.Generator, zero_last: bool = False):
        self.inner = Linear(in_dim, hidden_dim, rng)
        self.outer = Linear(hidden_dim, out_dim, rng, zero_init=zero_last)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(self.inner(x).tanh())


class CouplingLayer(Module):
    """One affine coupling: the masked half conditions a scale/shift of the rest.
    Scale outputs are tanh-bounded to keep the map well conditioned."""

    SCALE_CAP = 2.0

    def __init__(self, dim: int, hidden_dim: int, mask: np.ndarray, rng: np.random.Generator):
        self.mask = np.asarray(mask, dtype=np.float64)
        self.scale_net = Mlp(dim, hidden_dim, dim, rng, zero_last=True)
        self.shift_net = Mlp(dim, hidden_dim, dim, rng, zero_last=True)

    def _scale_shift(self, anchored: Tensor) -> tuple[Tensor, Tensor]:
        s = self.scale_net(anchored).tanh() * self.SCALE_CAP
        t = self.shift_net(anchored)
        return s, t

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        keep, move = self.mask, 1.0 - self.mask
        anchored = x * keep
        s, t = self._scale_shift(anchored)
        y = anchored + move * (x * s.exp() + t)
        log_det = (s * move).sum(axis=-1)
        return y, log_det

    def inverse(self, y: Tensor) -> Tensor:
        keep, move = self.mask, 1.0 - self.mask
        anchored = y * keep
        s, t = self._scale_shift(anchored)
        return anchored + move * ((y - t) * (-s).exp())


class CouplingFlow(Module):
    """Stack of affine couplings with alternating coordinate masks; exactly
    invertible, with a closed-form log-determinant."""

    def __init__(self, dim: int, rng: np.random.Generator,
                 layers: int = 4, hidden_dim: int = 32):
        if dim < 2:
            raise ShapeError(f"coupling flow needs dim >= 2, got {dim}")
        self.dim = dim
        masks = []
        base = (np.arange(dim) % 2).astype(np.float64)
        for i in range(layers):
            masks.append(base if i % 2 == 0 else 1.0 - base)
        self.layers = [CouplingLayer(dim, hidden_dim, m, rng) for m in masks]
        self.calibration = 0.0  # typical-pose -log-prob, set after pretraining

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        log_det = Tensor(np.zeros(x.shape[:-1]))
        for layer in self.layers:
            x, ld = layer.forward(x)
            log_det = log_det + ld
        return x, log_det

    def inverse(self, z: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            z = layer.inverse(z)
        return z

    def log_prob(self, x: Tensor) -> Tensor:
        """Log density under the flow: standard normal base plus log|det J|."""
        if x.shape[-1] != self.dim:
            raise ShapeError(f"flow dim {self.dim} vs input width {x.shape[-1]}")
        z, log_det = self.forward(x)
        base = (z * z).sum(axis=-1) * -0.5 - 0.5 * self.dim * LOGTWOPI
        out = base + log_det
        if not np.all(np.isfinite(out.data)):
            for i, layer in enumerate(self.layers):
                probe, _ = CouplingFlow._partial_forward(self.layers[: i + 1], x)
                if not np.all(np.isfinite(probe.data)):
                    raise FloatingPointError(f"flow produced non-finite values at layer {i}")
            raise FloatingPointError("flow log-prob non-finite")
        return out

    @staticmethod
    def _partial_forward(layers, x: Tensor) -> tuple[Tensor, Tensor]:
        log_det = Tensor(np.zeros(x.shape[:-1]))
        for layer in layers:
            x, ld = layer.forward(x)
            log_det = log_det + ld
        return x, log_det
