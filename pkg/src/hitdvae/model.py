"""Sequential latent-variable motion model.

Encoder: a per-frame spatial GCN feeds (a) a temporal GCN that infers one
clip-level latent from a fixed-length window, and (b) a full-attention
transformer block that infers one latent per frame (non-causal, every
posterior may see the whole sequence).

Decoder: a separately trained spatial GCN extracts features of past poses;
one masked-attention block predicts each frame's latent prior from previous
latents, another emits the pose mean from the frame latent and past pose
features. Frame 1 has no prior/emission (no initial-state model); causal
masks make frame t depend only on strictly earlier frames.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import PoseSequence
from .nn import (GcnBlock, Linear, Module, MultiHeadAttention, ShapeError,
                 shifted_causal_mask, sinusoidal_encoding)
from .tensor import Tensor, concat, no_grad

LOGTWOPI = math.log(2.0 * math.pi)


class DiagGaussian:
    """Mean / log-variance pair; rows are independent diagonal Gaussians."""

    def __init__(self, mean: Tensor, logvar: Tensor):
        if mean.shape != logvar.shape:
            raise ShapeError(f"mean {mean.shape} vs logvar {logvar.shape}")
        self.mean = mean
        self.logvar = logvar

    @property
    def shape(self):
        return self.mean.shape

    def __len__(self) -> int:
        return self.mean.shape[0]


def reparameterize(g: DiagGaussian, noise: np.ndarray) -> Tensor:
    """mean + exp(logvar/2) * noise; differentiable in the distribution params."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise ShapeError(f"noise shape {noise.shape} vs distribution {g.mean.shape}")
    return g.mean + (g.logvar * 0.5).exp() * Tensor(noise)


def gaussian_log_density(x: np.ndarray, mean: np.ndarray, logvar: np.ndarray) -> float:
    """Sum of diagonal-Gaussian log densities over all coordinates."""
    x, mean, logvar = (np.asarray(a, dtype=np.float64) for a in (x, mean, logvar))
    var = np.exp(logvar)
    return float(np.sum(-0.5 * (LOGTWOPI + logvar + (x - mean) ** 2 / var)))


@dataclass
class ModelConfig:
    joints: int = 9
    frame_latent_dim: int = 16
    seq_latent_dim: int = 32
    seq_latent_window: int = 15
    encoder_dim: int = 64
    encoder_heads: int = 4
    encoder_ff: int = 256
    decoder_dim: int = 256
    decoder_heads: int = 4
    decoder_ff: int = 1024
    sgcn_blocks: int = 1
    sgcn_hidden: int = 8
    tgcn_blocks: int = 4
    tgcn_hidden: int = 64
    logvar_clamp: float = 10.0
    positional_encoding: bool = True
    flow_layers: int = 4
    flow_hidden: int = 32

    def __post_init__(self):
        if self.encoder_dim % self.encoder_heads != 0:
            raise ShapeError(f"encoder_dim {self.encoder_dim} not divisible by {self.encoder_heads} heads")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ShapeError(f"decoder_dim {self.decoder_dim} not divisible by {self.decoder_heads} heads")
        for name in ("joints", "frame_latent_dim", "seq_latent_dim", "seq_latent_window",
                     "sgcn_blocks", "sgcn_hidden", "tgcn_blocks", "tgcn_hidden",
                     "flow_layers", "flow_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def feature_dim(self) -> int:
        return self.joints * self.sgcn_hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {f.name for f in fields(ModelConfig)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        missing = sorted(known - set(d))
        if missing:
            raise ValueError(f"missing model config keys: {missing}")
        return ModelConfig(**d)

    @staticmethod
    def micro() -> "ModelConfig":
        """Tiny configuration for finite-difference checks."""
        return ModelConfig(joints=3, frame_latent_dim=2, seq_latent_dim=2,
                           seq_latent_window=3, encoder_dim=8, encoder_heads=2,
                           encoder_ff=16, decoder_dim=12, decoder_heads=2,
                           decoder_ff=24, sgcn_blocks=1, sgcn_hidden=2,
                           tgcn_blocks=1, tgcn_hidden=4, flow_layers=4, flow_hidden=8)


def _gcn_chain(nodes: int, in_dim: int, hidden: int, blocks: int,
               rng: np.random.Generator) -> list[GcnBlock]:
    chain = [GcnBlock(nodes, in_dim, hidden, rng)]
    for _ in range(blocks - 1):
        chain.append(GcnBlock(nodes, hidden, hidden, rng))
    return chain


def _tile_rows(vec: Tensor, n: int) -> Tensor:
    """Repeat a 1-d tensor as n rows (single matmul node)."""
    d = vec.shape[0]
    return Tensor(np.ones((n, 1))) @ vec.reshape((1, d))


class HiTDVAE(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = config
        self.config = c
        f = c.feature_dim
        self.enc_sgcn = _gcn_chain(c.joints, 3, c.sgcn_hidden, c.sgcn_blocks, rng)
        self.dec_sgcn = _gcn_chain(c.joints, 3, c.sgcn_hidden, c.sgcn_blocks, rng)
        self.w_tgcn = _gcn_chain(c.seq_latent_window, f, c.tgcn_hidden, c.tgcn_blocks, rng)
        self.w_head = Linear(c.seq_latent_window * c.tgcn_hidden, 2 * c.seq_latent_dim, rng)
        self.enc_q = Linear(f + c.seq_latent_dim, c.encoder_dim, rng)
        self.enc_kv = Linear(f + c.seq_latent_dim, c.encoder_dim, rng)
        self.enc_block = MultiHeadAttention(c.encoder_dim, c.encoder_heads, c.encoder_ff, rng)
        self.enc_head = Linear(c.encoder_dim, 2 * c.frame_latent_dim, rng)
        self.prior_q = Linear(f + c.seq_latent_dim, c.encoder_dim, rng)
        self.prior_kv = Linear(c.frame_latent_dim, c.encoder_dim, rng)
        self.prior_block = MultiHeadAttention(c.encoder_dim, c.encoder_heads, c.encoder_ff, rng)
        self.prior_head = Linear(c.encoder_dim, 2 * c.frame_latent_dim, rng)
        self.emit_q = Linear(c.frame_latent_dim + c.seq_latent_dim, c.decoder_dim, rng)
        self.emit_kv = Linear(f, c.decoder_dim, rng)
        self.emit_block = MultiHeadAttention(c.decoder_dim, c.decoder_heads, c.decoder_ff, rng)
        self.emit_head = Linear(c.decoder_dim, (c.joints - 1) * 3, rng)

    # ------------------------------------------------------------------
    # helpers

    def _positions(self, positions, dim: int) -> Tensor | None:
        if not self.config.positional_encoding:
            return None
        return Tensor(sinusoidal_encoding(positions, dim))

    @staticmethod
    def _add_pos(x: Tensor, pos: Tensor | None) -> Tensor:
        return x if pos is None else x + pos

    def _split_gaussian(self, out: Tensor, width: int) -> DiagGaussian:
        mean = out[..., :width]
        logvar = out[..., width:].clip(-self.config.logvar_clamp, self.config.logvar_clamp)
        return DiagGaussian(mean, logvar)

    @staticmethod
    def _pose_tensor(poses) -> Tensor:
        if isinstance(poses, PoseSequence):
            return Tensor(poses.data)
        if isinstance(poses, Tensor):
            return poses
        return Tensor(np.asarray(poses, dtype=np.float64))

    # ------------------------------------------------------------------
    # encoder

    def extract_pose_features(self, poses, which: str) -> Tensor:
        """Per-frame spatial-GCN features, flattened to (frames, J*hidden).

        Encoder and decoder keep disjoint feature extractors."""
        if which not in ("encoder", "decoder"):
            raise ValueError(f"which must be 'encoder' or 'decoder', got {which!r}")
        x = self._pose_tensor(poses)
        if x.shape[-2] != self.config.joints:
            raise ShapeError(f"pose joint count {x.shape[-2]} vs configured {self.config.joints}")
        chain = self.enc_sgcn if which == "encoder" else self.dec_sgcn
        h = x
        for block in chain:
            h = block(h)
        t = h.shape[0]
        return h.reshape((t, self.config.feature_dim))

    def infer_w(self, poses) -> DiagGaussian:
        """Posterior of the clip-level latent from a fixed-length window."""
        x = self._pose_tensor(poses)
        win = self.config.seq_latent_window
        if x.shape[0] != win:
            raise ShapeError(f"clip-latent inference needs exactly {win} frames, got {x.shape[0]}")
        feats = self.extract_pose_features(x, "encoder")
        h = feats
        for block in self.w_tgcn:
            h = block(h)
        flat = h.reshape((1, win * self.config.tgcn_hidden))
        out = self.w_head(flat).reshape((2 * self.config.seq_latent_dim,))
        return self._split_gaussian(out, self.config.seq_latent_dim)

    def infer_z(self, poses, w: Tensor) -> DiagGaussian:
        """Per-frame latent posteriors; full (non-causal) attention over all frames."""
        feats = self.extract_pose_features(poses, "encoder")
        t = feats.shape[0]
        rows = concat([feats, _tile_rows(w, t)], axis=1)
        pos = self._positions(range(1, t + 1), self.config.encoder_dim)
        q = self._add_pos(self.enc_q(rows), pos)
        kv = self._add_pos(self.enc_kv(rows), pos)
        h = self.enc_block(q, kv, mask=None)
        return self._split_gaussian(self.enc_head(h), self.config.frame_latent_dim)

    # ------------------------------------------------------------------
    # decoder, parallel (training) forms: frames 2..T in one masked pass

    def prior_z_sequence(self, pose_feats: Tensor, z_rows: Tensor, w: Tensor) -> DiagGaussian:
        """Latent priors for frames 2..T; row i is frame i+2, seeing latents < that frame."""
        t = pose_feats.shape[0]
        if z_rows.shape[0] != t:
            raise ShapeError(f"{z_rows.shape[0]} latents vs {t} pose-feature rows")
        q_in = concat([pose_feats[: t - 1], _tile_rows(w, t - 1)], axis=1)
        q = self._add_pos(self.prior_q(q_in),
                          self._positions(range(2, t + 1), self.config.encoder_dim))
        kv = self._add_pos(self.prior_kv(z_rows),
                           self._positions(range(1, t + 1), self.config.encoder_dim))
        h = self.prior_block(q, kv, mask=shifted_causal_mask(t - 1, t))
        return self._split_gaussian(self.prior_head(h), self.config.frame_latent_dim)

    def emission_sequence(self, z_rows: Tensor, w: Tensor, pose_feats: Tensor) -> Tensor:
        """Pose means for frames 2..T, each attending to strictly earlier pose features."""
        t = pose_feats.shape[0]
        if z_rows.shape[0] != t:
            raise ShapeError(f"{z_rows.shape[0]} latents vs {t} pose-feature rows")
        q_in = concat([z_rows[1:], _tile_rows(w, t - 1)], axis=1)
        q = self._add_pos(self.emit_q(q_in),
                          self._positions(range(2, t + 1), self.config.decoder_dim))
        kv = self._add_pos(self.emit_kv(pose_feats),
                           self._positions(range(1, t + 1), self.config.decoder_dim))
        h = self.emit_block(q, kv, mask=shifted_causal_mask(t - 1, t))
        flat = self.emit_head(h)
        body = flat.reshape((t - 1, self.config.joints - 1, 3))
        root = Tensor(np.zeros((t - 1, 1, 3)))
        return concat([root, body], axis=1)

    # ------------------------------------------------------------------
    # decoder, single-frame (rollout) forms

    def prior_z(self, t: int, prev_pose_feature: Tensor, z_history: Tensor,
                w: Tensor) -> DiagGaussian:
        """Prior of frame t's latent given the previous pose's features and
        latents of frames < t. Frame 1 has no prior."""
        if t < 2:
            raise ValueError(f"no initial-state model: latent prior needs t >= 2, got t={t}")
        if z_history.shape[0] < t - 1:
            raise ShapeError(f"latent history has {z_history.shape[0]} rows, frame {t} needs {t - 1}")
        hist = z_history[: t - 1]
        feat = prev_pose_feature.reshape((1, self.config.feature_dim))
        q_in = concat([feat, w.reshape((1, self.config.seq_latent_dim))], axis=1)
        q = self._add_pos(self.prior_q(q_in), self._positions([t], self.config.encoder_dim))
        kv = self._add_pos(self.prior_kv(hist),
                           self._positions(range(1, t), self.config.encoder_dim))
        h = self.prior_block(q, kv, mask=None)
        out = self.prior_head(h).reshape((2 * self.config.frame_latent_dim,))
        return self._split_gaussian(out, self.config.frame_latent_dim)

    def emit_x(self, t: int, z_t: Tensor, w: Tensor, pose_history_features: Tensor) -> Tensor:
        """Mean pose of frame t given its latent and features of frames < t;
        the root joint is structurally zero."""
        if t < 2:
            raise ValueError(f"no initial-state model: emission needs t >= 2, got t={t}")
        if pose_history_features.shape[0] < t - 1:
            raise ShapeError(
                f"pose-feature history has {pose_history_features.shape[0]} rows, frame {t} needs {t - 1}")
        hist = pose_history_features[: t - 1]
        q_in = concat([z_t.reshape((1, self.config.frame_latent_dim)),
                       w.reshape((1, self.config.seq_latent_dim))], axis=1)
        q = self._add_pos(self.emit_q(q_in), self._positions([t], self.config.decoder_dim))
        kv = self._add_pos(self.emit_kv(hist),
                           self._positions(range(1, t), self.config.decoder_dim))
        h = self.emit_block(q, kv, mask=None)
        body = self.emit_head(h).reshape((self.config.joints - 1, 3))
        return concat([Tensor(np.zeros((1, 3))), body], axis=0)

    # ------------------------------------------------------------------

    def joint_log_density(self, poses: np.ndarray, z_rows: np.ndarray,
                          w: np.ndarray) -> float:
        """Log joint of (poses, latents, clip latent) under the generative
        factorization, covering frames 2..T (frame 1 carries no model terms)."""
        poses = np.asarray(poses, dtype=np.float64)
        z_rows = np.asarray(z_rows, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        with no_grad():
            feats = self.extract_pose_features(poses, "decoder")
            priors = self.prior_z_sequence(feats, Tensor(z_rows), Tensor(w))
            means = self.emission_sequence(Tensor(z_rows), Tensor(w), feats)
        total = gaussian_log_density(w, np.zeros_like(w), np.zeros_like(w))
        total += gaussian_log_density(z_rows[1:], priors.mean.data, priors.logvar.data)
        flat = poses[1:].reshape(len(poses) - 1, -1)
        emitted = means.data.reshape(len(poses) - 1, -1)
        total += gaussian_log_density(flat, emitted, np.zeros_like(flat))
        return total
