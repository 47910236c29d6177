"""Autoregressive rollout: given an observed prefix, infer the clip latent
and the observed frames' latents from the posterior, then alternately sample
each new frame's latent from its prior and emit the pose mean, feeding
generated frames back as context. The K rollouts are independent, each with
its own noise stream, so any horizon shares its prefix with longer ones."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .data import PoseSequence
from .model import HiTDVAE
from .tensor import Tensor, no_grad


class GenerationError(ValueError):
    pass


class NoiseStream:
    """Sequential standard-normal draws; all-zero in mean mode."""

    def __init__(self, rng: np.random.Generator | None):
        self.rng = rng

    def normal(self, shape) -> np.ndarray:
        if self.rng is None:
            return np.zeros(shape)
        return self.rng.standard_normal(shape)


def thread_count(requested: int | None = None) -> int:
    """Worker cap: explicit argument, else the HITDVAE_THREADS env var, else 1."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("HITDVAE_THREADS")
    return max(1, int(env)) if env else 1


def _sample(dist, noise: np.ndarray) -> np.ndarray:
    return dist.mean.data + np.exp(0.5 * dist.logvar.data) * noise


def rollout(model: HiTDVAE, observed: np.ndarray, horizon: int,
            noise: NoiseStream, sample_history: bool = True) -> np.ndarray:
    """One trajectory of observed-prefix + horizon generated frames.

    Noise is consumed in a fixed per-step order (clip latent, observed-frame
    latents, then one draw per generated frame), so a longer horizon with the
    same stream reproduces the shorter rollout as its prefix exactly."""
    observed = np.asarray(observed, dtype=np.float64)
    o = observed.shape[0]
    c = model.config
    if horizon < 1:
        raise GenerationError(f"horizon must be >= 1, got {horizon}")
    if o < 2:
        raise GenerationError(f"need at least 2 observed frames, got {o}")
    if o < c.seq_latent_window:
        raise GenerationError(
            f"observed length {o} is below the clip-latent window {c.seq_latent_window}")

    with no_grad():
        w_post = model.infer_w(observed[o - c.seq_latent_window:])
        w_arr = _sample(w_post, noise.normal(c.seq_latent_dim))
        w = Tensor(w_arr)
        z_post = model.infer_z(observed, w)
        hist_noise = noise.normal((o, c.frame_latent_dim))
        if sample_history:
            z_rows = _sample(z_post, hist_noise)
        else:
            z_rows = z_post.mean.data.copy()
        feats = model.extract_pose_features(observed, "decoder").data
        poses = list(observed)
        for t in range(o + 1, o + horizon + 1):
            prior = model.prior_z(t, Tensor(feats[t - 2:t - 1]), Tensor(z_rows), w)
            z_t = _sample(prior, noise.normal(c.frame_latent_dim)).reshape(1, -1)
            z_rows = np.concatenate([z_rows, z_t], axis=0)
            pose = model.emit_x(t, Tensor(z_t), w, Tensor(feats)).data
            if not np.all(np.isfinite(pose)):
                raise GenerationError(f"non-finite pose generated at frame {t}")
            poses.append(pose)
            new_feat = model.extract_pose_features(pose[None, :, :], "decoder").data
            feats = np.concatenate([feats, new_feat], axis=0)
    return np.stack(poses)


def generate(model: HiTDVAE, observed: PoseSequence, horizon: int, samples: int,
             seed: int, mode: str = "sample", sample_history: bool = True,
             threads: int | None = None) -> list[PoseSequence]:
    """K independent rollouts; sample k's noise stream is seeded seed^k.
    The observed prefix of every output is bit-identical to the input."""
    if mode not in ("sample", "mean"):
        raise GenerationError(f"mode must be 'sample' or 'mean', got {mode!r}")
    if samples < 1:
        raise GenerationError(f"need at least one sample, got {samples}")
    obs = observed.data if isinstance(observed, PoseSequence) else np.asarray(observed)
    o = obs.shape[0]

    def run(k: int) -> np.ndarray:
        if mode == "mean":
            stream = NoiseStream(None)
        else:
            stream = NoiseStream(np.random.default_rng(seed ^ k))
        out = rollout(model, obs, horizon, stream,
                      sample_history=(mode == "sample" and sample_history))
        out[:o] = obs
        return out

    workers = min(thread_count(threads), samples)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(samples)))
    else:
        results = [run(k) for k in range(samples)]
    return [PoseSequence(r, obs_len=o) for r in results]


def generate_mean(model: HiTDVAE, observed: PoseSequence, horizon: int) -> PoseSequence:
    """Deterministic rollout taking the mean at every stochastic node."""
    return generate(model, observed, horizon, samples=1, seed=0, mode="mean")[0]
