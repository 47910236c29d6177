"""Training objectives: best-of-K reconstruction, multi-modal reconstruction,
KL terms for both latent levels, body-part diversity, and the three pose
realism penalties (limb length, hinge angles, flow prior)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .data import Skeleton
from .model import DiagGaussian
from .nn import CouplingFlow, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    recon: float
    multimodal: float
    kl_frame: float
    kl_seq: float
    div_lower: float
    div_upper: float
    limb: float
    angle: float
    flow_prior: float
    alpha_lower: float
    alpha_upper: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise LossError(f"loss weight {f.name} must be non-negative, got {v}")
        if self.alpha_lower <= 0 or self.alpha_upper <= 0:
            raise LossError("diversity normalizers must be strictly positive")

    @staticmethod
    def humaneva() -> "LossWeights":
        return LossWeights(recon=10, multimodal=5, kl_frame=0.5, kl_seq=0.1,
                           div_lower=0.1, div_upper=0.2, limb=100, angle=1,
                           flow_prior=0.001, alpha_lower=15, alpha_upper=50)

    @staticmethod
    def h36m() -> "LossWeights":
        return LossWeights(recon=20, multimodal=10, kl_frame=0.5, kl_seq=0.1,
                           div_lower=0.1, div_upper=0.2, limb=100, angle=1,
                           flow_prior=0.01, alpha_lower=100, alpha_upper=300)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        known = {f.name for f in fields(LossWeights)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown loss weight keys: {unknown}")
        missing = sorted(known - set(d))
        if missing:
            raise ValueError(f"missing loss weight keys: {missing}")
        return LossWeights(**d)


@dataclass
class LossBreakdown:
    """Weighted per-term contributions; `total` is their plain sum."""

    recon: float
    multimodal: float
    kl_frame: float
    kl_seq: float
    div_lower: float
    div_upper: float
    limb: float
    angle: float
    flow_prior: float
    total: float

    TERMS = ("recon", "multimodal", "kl_frame", "kl_seq", "div_lower",
             "div_upper", "limb", "angle", "flow_prior")

    @property
    def div(self) -> float:
        return self.div_lower + self.div_upper

    @staticmethod
    def csv_header() -> str:
        return "epoch,step," + ",".join(LossBreakdown.TERMS) + ",total"

    def csv_row(self, epoch: int, step: int) -> str:
        vals = [getattr(self, t) for t in self.TERMS] + [self.total]
        return f"{epoch},{step}," + ",".join(f"{v:.10g}" for v in vals)


@dataclass
class MultiModalSet:
    """Pseudo-ground-truth futures whose last observed pose nearly matches
    the target's."""

    sequences: np.ndarray  # (M, T, J, 3)

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.float64)
        if self.sequences.ndim != 4 or self.sequences.shape[0] < 1:
            raise LossError(f"multimodal set must be (M>=1, T, J, 3), got {self.sequences.shape}")

    def __len__(self) -> int:
        return self.sequences.shape[0]


def select_multimodal(pool: np.ndarray, target: np.ndarray, obs_len: int,
                      mean_limb: float, threshold: float = 0.1,
                      cap: int = 10) -> MultiModalSet:
    """Pick pool sequences whose pose at the last observed frame lies within a
    relative distance of the target's; always returns at least the nearest."""
    pool = np.asarray(pool, dtype=np.float64)
    anchor = obs_len - 1
    d = np.linalg.norm(
        pool[:, anchor].reshape(len(pool), -1) - target[anchor].reshape(-1), axis=1)
    d = d / mean_limb
    order = np.argsort(d, kind="stable")
    chosen = [i for i in order if d[i] <= threshold][:cap]
    if not chosen:
        chosen = [int(order[0])]
    return MultiModalSet(pool[chosen])


def _mean_sq(a: Tensor, b: np.ndarray) -> Tensor:
    diff = a - Tensor(b)
    return (diff * diff).mean()


def _min_over(scalars: list[Tensor]) -> Tensor:
    idx = int(np.argmin([s.data for s in scalars]))
    return scalars[idx]


def recon_losses(samples: list[Tensor], gt: np.ndarray,
                 mm: MultiModalSet | None = None) -> tuple[Tensor, Tensor]:
    """Best-of-K squared error against the ground truth, and its mean over
    the pseudo-ground-truth set (min over samples taken per member).

    The squared norm is averaged over frames*joints*3 so weights are
    sequence-length invariant."""
    if not samples:
        raise LossError("reconstruction needs at least one generated sample")
    gt = np.asarray(gt, dtype=np.float64)
    for s in samples:
        if s.shape != gt.shape:
            raise ShapeError(f"sample shape {s.shape} vs ground truth {gt.shape}")
    l_r = _min_over([_mean_sq(s, gt) for s in samples])
    if mm is None:
        return l_r, Tensor(0.0)
    per_member = []
    for m in range(len(mm)):
        ref = mm.sequences[m]
        if ref.shape != gt.shape:
            raise ShapeError(f"pseudo-ground-truth shape {ref.shape} vs target {gt.shape}")
        per_member.append(_min_over([_mean_sq(s, ref) for s in samples]))
    l_mm = per_member[0]
    for term in per_member[1:]:
        l_mm = l_mm + term
    return l_r, l_mm * (1.0 / len(mm))


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the
    last axis (one value per row)."""
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"posterior width {q.mean.shape} vs prior width {p.mean.shape}")
    dm = q.mean - p.mean
    term = p.logvar - q.logvar + (q.logvar.exp() + dm * dm) * (-p.logvar).exp() - 1.0
    return term.sum(axis=-1) * 0.5


def kl_z(posteriors: DiagGaussian, priors: DiagGaussian) -> Tensor:
    """Per-frame KL averaged over frames (rows)."""
    return kl_diag(posteriors, priors).mean()


def kl_w(posterior: DiagGaussian) -> Tensor:
    """KL to the standard normal prior."""
    mu, lv = posterior.mean, posterior.logvar
    return (lv.exp() + mu * mu - 1.0 - lv).sum() * 0.5


def diversity_loss(samples: list[Tensor], skeleton: Skeleton,
                   weights: LossWeights) -> tuple[Tensor, float, float]:
    """Pairwise repulsion on lower/upper body parts:
    sum_p lambda_p * (2/(K(K-1))) * sum_{k<k'} exp(-L1(part diff)/alpha_p).

    Returns the combined tensor plus the two weighted part values."""
    k = len(samples)
    if k < 2:
        raise LossError(f"diversity needs K >= 2 samples, got {k}")
    pair_scale = 2.0 / (k * (k - 1))
    partvals: dict[str, Tensor] = {}
    for part, idx, lam, alpha in (
        ("lower", skeleton.lower_body, weights.div_lower, weights.alpha_lower),
        ("upper", skeleton.upper_body, weights.div_upper, weights.alpha_upper),
    ):
        idx = np.asarray(idx, dtype=int)
        slices = [s[:, idx, :] for s in samples]
        acc = None
        for i in range(k):
            for j in range(i + 1, k):
                l1 = (slices[i] - slices[j]).abs().sum()
                term = (l1 * (-1.0 / alpha)).exp()
                acc = term if acc is None else acc + term
        partvals[part] = acc * (pair_scale * lam)
    combined = partvals["lower"] + partvals["upper"]
    return combined, partvals["lower"].item(), partvals["upper"].item()


def limb_loss(sample: Tensor, skeleton: Skeleton) -> Tensor:
    """Mean squared deviation of per-frame limb lengths from the skeleton's
    reference lengths."""
    parents = np.asarray([e[0] for e in skeleton.edges], dtype=int)
    children = np.asarray([e[1] for e in skeleton.edges], dtype=int)
    ref = np.asarray(skeleton.lengths, dtype=np.float64)
    diff = sample[:, children, :] - sample[:, parents, :]
    lengths = (diff * diff).sum(axis=-1).sqrt()
    dev = lengths - Tensor(ref)
    return (dev * dev).mean()


def angle_loss(sample: Tensor, skeleton: Skeleton) -> Tensor:
    """Sum of squared hinge-angle violations outside each hinge's limits.
    Hinges with a degenerate (near zero-length) limb in any frame are skipped
    and reported via the module logger."""
    total: Tensor | None = None
    skipped: list[int] = []
    for hidx, ((p, j, c), (lo, hi)) in enumerate(zip(skeleton.hinges, skeleton.hinge_limits)):
        u = sample[:, p, :] - sample[:, j, :]
        v = sample[:, c, :] - sample[:, j, :]
        nu = (u * u).sum(axis=-1).sqrt()
        nv = (v * v).sum(axis=-1).sqrt()
        if np.any(nu.data < 1e-9) or np.any(nv.data < 1e-9):
            skipped.append(hidx)
            continue
        cos = ((u * v).sum(axis=-1) / (nu * nv)).clip(-1.0 + 1e-12, 1.0 - 1e-12)
        ang = cos.arccos()
        over = (ang - hi).relu()
        under = (Tensor(np.full(ang.shape, lo)) - ang).relu()
        viol = (over * over).sum() + (under * under).sum()
        total = viol if total is None else total + viol
    if skipped:
        names = [f"{skeleton.joint_names[skeleton.hinges[i][1]]}({i})" for i in skipped]
        log.warning("angle loss skipped degenerate hinges: %s", ", ".join(names))
    return total if total is not None else Tensor(0.0)


def nf_loss(sample: Tensor, flow: CouplingFlow, calibration: float | None = None) -> Tensor:
    """Mean negative log-probability of the frames under the pose prior,
    offset by the calibration constant and clamped below at zero so only
    below-typical-probability poses are penalized."""
    t = sample.shape[0]
    flat = sample.reshape((t, int(np.prod(sample.shape[1:]))))
    nll = flow.log_prob(flat) * -1.0
    c = flow.calibration if calibration is None else calibration
    return (nll.mean() - c).relu()


def total_loss(recon: Tensor, multimodal: Tensor, klf: Tensor, kls: Tensor,
               div_combined: Tensor, div_lower: float, div_upper: float,
               limb: Tensor, angle: Tensor, flow_prior: Tensor,
               weights: LossWeights, anneal: float) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum; KL terms are scaled by the annealing multiplier. The
    diversity tensor already carries its per-part weights."""
    if not 0.0 <= anneal <= 1.0:
        raise LossError(f"anneal multiplier must be in [0, 1], got {anneal}")
    named = {"recon": recon, "multimodal": multimodal, "kl_frame": klf,
             "kl_seq": kls, "diversity": div_combined, "limb": limb,
             "angle": angle, "flow_prior": flow_prior}
    for name, t in named.items():
        if not np.all(np.isfinite(t.data)):
            raise LossError(f"loss term {name} is not finite")
    total = (recon * weights.recon + multimodal * weights.multimodal
             + (klf * weights.kl_frame + kls * weights.kl_seq) * anneal
             + div_combined
             + limb * weights.limb + angle * weights.angle
             + flow_prior * weights.flow_prior)
    breakdown = LossBreakdown(
        recon=recon.item() * weights.recon,
        multimodal=multimodal.item() * weights.multimodal,
        kl_frame=klf.item() * weights.kl_frame * anneal,
        kl_seq=kls.item() * weights.kl_seq * anneal,
        div_lower=div_lower,
        div_upper=div_upper,
        limb=limb.item() * weights.limb,
        angle=angle.item() * weights.angle,
        flow_prior=flow_prior.item() * weights.flow_prior,
        total=total.item(),
    )
    return total, breakdown
