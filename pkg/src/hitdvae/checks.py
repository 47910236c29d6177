"""End-to-end finite-difference verification on a micro configuration:
4 frames, 3 joints, 2-wide latents, K=2 samples. The whole training loss is
treated as a deterministic function of the model parameters (noise draws,
scheduled-sampling selection and multimodal set are frozen) and compared
against central differences."""

from __future__ import annotations

import numpy as np

from .data import Skeleton
from .losses import LossWeights, select_multimodal
from .model import HiTDVAE, ModelConfig
from .nn import CouplingFlow
from .tensor import grad_check
from .trainer import StepInputs, _teacher_forced_candidates, scheduled_input, sequence_loss

MICRO_FRAMES = 4
MICRO_SAMPLES = 2


def micro_setup(seed: int = 0, elbo_only: bool = False):
    """Model, frozen flow, weights and frozen step inputs for the micro check."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig.micro()
    skeleton = Skeleton.minimal3()
    model = HiTDVAE(cfg, seed=seed)
    flow = CouplingFlow(cfg.joints * 3, np.random.default_rng(seed + 1),
                        layers=cfg.flow_layers, hidden_dim=cfg.flow_hidden)
    for p in flow.parameters():
        p.requires_grad = False

    def random_seq() -> np.ndarray:
        seq = 0.3 * rng.standard_normal((MICRO_FRAMES, cfg.joints, 3))
        seq[:, 0, :] = 0.0
        return seq

    gt = random_seq()
    pool = np.stack([random_seq() for _ in range(3)])
    noise_w = rng.standard_normal(cfg.seq_latent_dim)
    noise_z = rng.standard_normal((MICRO_SAMPLES, MICRO_FRAMES, cfg.frame_latent_dim))
    candidates = _teacher_forced_candidates(gt, model, 0, cfg.seq_latent_window,
                                            noise_w, noise_z[0])
    mixed, sel = scheduled_input(gt, candidates, 0.5, np.random.default_rng(seed + 2),
                                 protected=2)
    mm = select_multimodal(pool, gt, obs_len=2, mean_limb=skeleton.mean_limb_length(),
                           threshold=1e9, cap=2)
    inputs = StepInputs(gt=gt, mixed=mixed, selection=sel, noise_w=noise_w,
                        noise_z=noise_z, w_start=0, mm=mm)
    weights = LossWeights.humaneva()
    if elbo_only:
        weights = LossWeights(recon=10, multimodal=5, kl_frame=0.5, kl_seq=0.1,
                              div_lower=0, div_upper=0, limb=0, angle=0,
                              flow_prior=0, alpha_lower=15, alpha_upper=50)
    return model, flow, skeleton, weights, inputs


def micro_total_loss_gradcheck(seed: int = 0, step: float = 1e-5,
                               elbo_only: bool = False) -> float:
    """Max relative error of the analytic gradient of the full training loss
    over all model parameters."""
    model, flow, skeleton, weights, inputs = micro_setup(seed, elbo_only=elbo_only)

    def f():
        return sequence_loss(model, flow, skeleton, weights, 1.0, inputs)[0]

    return grad_check(f, model.parameters(), step=step)
