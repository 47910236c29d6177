"""Training loop: inference pass, scheduled-sampled generation pass,
multi-term loss, Adam step; plus KL annealing and flow-prior pretraining.

Per step and per sequence: the encoder sees ground truth and produces the
clip-latent posterior (from a random fixed-length window) and per-frame
posteriors; K latent draws drive K emission passes over a decoder input
sequence in which, after a protected observed prefix, ground-truth frames
are replaced by the model's own teacher-forced generations with the
scheduled-sampling probability.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import Corpus, Skeleton
from .losses import (LossBreakdown, LossError, LossWeights, MultiModalSet,
                     angle_loss, diversity_loss, kl_w, kl_z, limb_loss,
                     nf_loss, recon_losses, select_multimodal, total_loss)
from .model import DiagGaussian, HiTDVAE, ModelConfig, reparameterize
from .nn import CouplingFlow, Module
from .tensor import (AdamState, Tensor, adam_step, clip_grad_norm,
                     no_grad, save_checkpoint, load_checkpoint, zero_grads)

log = logging.getLogger(__name__)

GRAD_CLIP_NORM = 5.0


@dataclass
class TrainSchedule:
    epochs: int = 500
    samples_per_epoch: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    kl_anneal_epochs: int = 20
    ss_ramp_epochs: int = 80
    k_samples: int = 50
    seq_len: int = 75
    obs_len: int = 15
    w_window: int = 15
    checkpoint_every: int = 100
    resample_seq_latent: bool = False

    def __post_init__(self):
        for name in ("epochs", "samples_per_epoch", "batch_size", "kl_anneal_epochs",
                     "ss_ramp_epochs", "k_samples", "seq_len", "obs_len", "w_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"schedule field {name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.w_window > self.seq_len:
            raise ValueError(f"w_window {self.w_window} exceeds seq_len {self.seq_len}")
        if self.obs_len >= self.seq_len:
            raise ValueError(f"obs_len {self.obs_len} must be below seq_len {self.seq_len}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainSchedule":
        known = {f.name for f in fields(TrainSchedule)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown schedule keys: {unknown}")
        missing = sorted(known - set(d))
        if missing:
            raise ValueError(f"missing schedule keys: {missing}")
        return TrainSchedule(**d)


def ss_probability(epoch: int, schedule: TrainSchedule) -> float:
    """Scheduled-sampling replacement probability: zero through the KL
    annealing epochs, then a linear ramp to one."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    raw = (epoch - schedule.kl_anneal_epochs) / schedule.ss_ramp_epochs
    return float(min(max(raw, 0.0), 1.0))


def kl_anneal(epoch: int, schedule: TrainSchedule) -> float:
    """Linear KL warm-up multiplier reaching one after the annealing epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return float(min(epoch / schedule.kl_anneal_epochs, 1.0))


def scheduled_input(gt: np.ndarray, generated: np.ndarray, p: float,
                    rng: np.random.Generator,
                    protected: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame input selection: frame i uses the generated candidate with
    probability p, ground truth otherwise, decided independently. The first
    `protected` frames (and frame 0, which has no candidate) always stay
    ground truth. Returns (mixed sequence, selection mask)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"replacement probability must be in [0, 1], got {p}")
    t = gt.shape[0]
    sel = np.zeros(t, dtype=bool)
    eligible = np.arange(t) >= max(protected, 1)
    if p > 0.0:
        sel[eligible] = rng.random(int(eligible.sum())) < p
    mixed = gt.copy()
    if sel.any():
        mixed[sel] = generated[sel]
    return mixed, sel


@dataclass
class StepInputs:
    """Everything one sequence's loss depends on, frozen so the loss is a
    deterministic function of the model parameters."""

    gt: np.ndarray              # (T, J, 3)
    mixed: np.ndarray           # (T, J, 3) decoder input after scheduled sampling
    selection: np.ndarray       # (T,) bool, True = generated frame used
    noise_w: np.ndarray         # (d_w,)
    noise_z: np.ndarray         # (K, T, d_z)
    w_start: int                # window start for clip-latent inference
    mm: MultiModalSet


def prepare_step_inputs(seq: np.ndarray, model: HiTDVAE, schedule: TrainSchedule,
                        epoch: int, rng: np.random.Generator,
                        mm_pool: np.ndarray, skeleton: Skeleton) -> StepInputs:
    c = model.config
    t = seq.shape[0]
    k = schedule.k_samples
    w_start = int(rng.integers(0, t - schedule.w_window + 1))
    noise_w = rng.standard_normal(c.seq_latent_dim)
    noise_z = rng.standard_normal((k, t, c.frame_latent_dim))
    p = ss_probability(epoch, schedule)
    if p > 0.0:
        candidates = _teacher_forced_candidates(seq, model, w_start, schedule.w_window,
                                                noise_w, noise_z[0])
    else:
        candidates = np.zeros_like(seq)
    mixed, sel = scheduled_input(seq, candidates, p, rng, schedule.obs_len)
    mm = select_multimodal(mm_pool, seq, schedule.obs_len, skeleton.mean_limb_length())
    return StepInputs(gt=seq, mixed=mixed, selection=sel, noise_w=noise_w,
                      noise_z=noise_z, w_start=w_start, mm=mm)


def _teacher_forced_candidates(seq: np.ndarray, model: HiTDVAE, w_start: int,
                               w_window: int, noise_w: np.ndarray,
                               noise_z: np.ndarray) -> np.ndarray:
    """One teacher-forced generation pass; its means become the per-frame
    candidates for scheduled sampling (constants on the tape)."""
    with no_grad():
        w_post = model.infer_w(seq[w_start:w_start + w_window])
        w = reparameterize(w_post, noise_w)
        z_post = model.infer_z(seq, w)
        z = reparameterize(z_post, noise_z)
        feats = model.extract_pose_features(seq, "decoder")
        means = model.emission_sequence(z, w, feats)
    out = np.zeros_like(seq)
    out[1:] = means.data
    return out


def sequence_loss(model: HiTDVAE, flow: CouplingFlow, skeleton: Skeleton,
                  weights: LossWeights, anneal: float,
                  inputs: StepInputs) -> tuple[Tensor, LossBreakdown]:
    """Inference pass, K-sample generation pass, all loss terms. Deterministic
    given `inputs`."""
    gt = inputs.gt
    k = inputs.noise_z.shape[0]
    w_post = model.infer_w(gt[inputs.w_start:inputs.w_start + model.config.seq_latent_window])
    w = reparameterize(w_post, inputs.noise_w)
    z_post = model.infer_z(gt, w)
    z_samples = [reparameterize(z_post, inputs.noise_z[i]) for i in range(k)]

    feats = model.extract_pose_features(inputs.mixed, "decoder")
    emissions = [model.emission_sequence(z_i, w, feats) for z_i in z_samples]
    priors = model.prior_z_sequence(feats, z_samples[0], w)
    post_tail = DiagGaussian(z_post.mean[1:], z_post.logvar[1:])

    l_r, l_mm = recon_losses(emissions, gt[1:], MultiModalSet(inputs.mm.sequences[:, 1:]))
    l_kl_frame = kl_z(post_tail, priors)
    l_kl_seq = kl_w(w_post)
    div, div_l, div_u = diversity_loss(emissions, skeleton, weights)
    scale = 1.0 / k
    l_limb = _mean_terms([limb_loss(e, skeleton) for e in emissions], scale)
    l_angle = _mean_terms([angle_loss(e, skeleton) for e in emissions], scale)
    l_nf = _mean_terms([nf_loss(e, flow) for e in emissions], scale)
    return total_loss(l_r, l_mm, l_kl_frame, l_kl_seq, div, div_l, div_u,
                      l_limb, l_angle, l_nf, weights, anneal)


def _mean_terms(terms: list[Tensor], scale: float) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * scale


def train_step(batch: list[np.ndarray], model: HiTDVAE, flow: CouplingFlow,
               skeleton: Skeleton, weights: LossWeights, schedule: TrainSchedule,
               opt_state: AdamState, epoch: int,
               rng: np.random.Generator, mm_pool: np.ndarray) -> LossBreakdown | None:
    """One optimizer step over a batch (gradients accumulated per element).
    A non-finite loss aborts the step with parameters untouched; returns the
    mean breakdown, or None when aborted."""
    params = model.parameters()
    zero_grads(params)
    anneal = kl_anneal(epoch, schedule)
    breakdowns = []
    inv = 1.0 / len(batch)
    for seq in batch:
        inputs = prepare_step_inputs(seq, model, schedule, epoch, rng, mm_pool, skeleton)
        try:
            loss, breakdown = sequence_loss(model, flow, skeleton, weights, anneal, inputs)
        except LossError as e:
            log.warning("step aborted at epoch %d: %s", epoch, e)
            zero_grads(params)
            return None
        (loss * inv).backward()
        breakdowns.append(breakdown)
    clip_grad_norm(params, GRAD_CLIP_NORM)
    adam_step(params, opt_state)
    return _mean_breakdown(breakdowns)


def _mean_breakdown(breakdowns: list[LossBreakdown]) -> LossBreakdown:
    n = len(breakdowns)
    vals = {t: sum(getattr(b, t) for b in breakdowns) / n
            for t in LossBreakdown.TERMS}
    vals["total"] = sum(b.total for b in breakdowns) / n
    return LossBreakdown(**vals)


# ----------------------------------------------------------------------
# corpus windows


def training_windows(corpus: Corpus, seq_len: int) -> np.ndarray:
    """All training-split windows of the requested length (stride seq_len//2),
    used both as the step-sampling pool and the multimodal candidate pool."""
    windows = []
    for clip in corpus.subset("train"):
        frames = clip.poses.frames
        if frames < seq_len:
            continue
        stride = max(1, seq_len // 2)
        starts = list(range(0, frames - seq_len + 1, stride))
        if (frames - seq_len) not in starts:
            starts.append(frames - seq_len)
        for s in starts:
            windows.append(clip.poses.data[s:s + seq_len])
    if not windows:
        raise ValueError(f"no training clip is at least {seq_len} frames long")
    return np.stack(windows)


def fit(model: HiTDVAE, corpus: Corpus, flow: CouplingFlow, weights: LossWeights,
        schedule: TrainSchedule, seed: int, out_dir=None,
        log_rows: list | None = None) -> list[LossBreakdown]:
    """Full training run; returns the per-step loss history. When `out_dir`
    is given, appends CSV rows to loss.csv and writes periodic checkpoints."""
    if schedule.w_window != model.config.seq_latent_window:
        raise ValueError(
            f"schedule w_window {schedule.w_window} must match the model's "
            f"clip-latent window {model.config.seq_latent_window}")
    rng = np.random.default_rng(seed)
    pool = training_windows(corpus, schedule.seq_len)
    opt = AdamState(model.parameters(), lr=schedule.learning_rate)
    history: list[LossBreakdown] = []
    csv_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "loss.csv"
        csv_path.write_text(LossBreakdown.csv_header() + "\n", encoding="utf-8")
    steps_per_epoch = max(1, schedule.samples_per_epoch // schedule.batch_size)
    step = 0
    for epoch in range(schedule.epochs):
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, len(pool), schedule.batch_size)
            batch = [pool[i] for i in idx]
            breakdown = train_step(batch, model, flow, corpus.skeleton, weights,
                                   schedule, opt, epoch, rng, pool)
            if breakdown is None:
                continue
            history.append(breakdown)
            if log_rows is not None:
                log_rows.append(breakdown)
            if csv_path is not None:
                with open(csv_path, "a", encoding="utf-8") as fh:
                    fh.write(breakdown.csv_row(epoch, step) + "\n")
            step += 1
        if out_dir is not None and schedule.checkpoint_every > 0 and (
                (epoch + 1) % schedule.checkpoint_every == 0 or epoch + 1 == schedule.epochs):
            save_training_state(Path(out_dir) / f"checkpoint_{epoch + 1:05d}.ckpt",
                                model, opt, rng, epoch + 1, step)
    return history


# ----------------------------------------------------------------------
# training-state checkpoints


def save_training_state(path, model: HiTDVAE, opt: AdamState,
                        rng: np.random.Generator, epoch: int, step: int) -> None:
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        arrays[f"adam.m.{i:04d}"] = m
        arrays[f"adam.v.{i:04d}"] = v
    meta = {
        "kind": "hitdvae-model",
        "config": model.config.to_dict(),
        "epoch": epoch,
        "step": step,
        "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                 "eps": opt.eps, "step_count": opt.step_count},
        "rng_state": _encode_rng(rng),
    }
    save_checkpoint(path, arrays, meta)


def load_model(path, config: ModelConfig | None = None) -> HiTDVAE:
    """Model-only restore; validates the stored config against the given one."""
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "hitdvae-model":
        raise ValueError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    stored = ModelConfig.from_dict(meta["config"])
    if config is not None and stored != config:
        diffs = [f.name for f in fields(ModelConfig)
                 if getattr(stored, f.name) != getattr(config, f.name)]
        raise ValueError(f"{path}: checkpoint config differs from supplied config in {diffs}")
    model = HiTDVAE(stored, seed=0)
    model.load_state_dict({k[len("model."):]: v for k, v in arrays.items()
                           if k.startswith("model.")})
    return model


def load_training_state(path) -> tuple[HiTDVAE, AdamState, np.random.Generator, int, int]:
    arrays, meta = load_checkpoint(path)
    model = load_model(path)
    a = meta["adam"]
    opt = AdamState(model.parameters(), lr=a["lr"], beta1=a["beta1"],
                    beta2=a["beta2"], eps=a["eps"])
    opt.step_count = a["step_count"]
    n = len(opt.params)
    opt.m = [arrays[f"adam.m.{i:04d}"] for i in range(n)]
    opt.v = [arrays[f"adam.v.{i:04d}"] for i in range(n)]
    rng = np.random.default_rng()
    rng.bit_generator.state = _decode_rng(meta["rng_state"])
    return model, opt, rng, meta["epoch"], meta["step"]


def _encode_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {"bit_generator": state["bit_generator"],
            "state": str(state["state"]["state"]),
            "inc": str(state["state"]["inc"]),
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"]}


def _decode_rng(enc: dict) -> dict:
    return {"bit_generator": enc["bit_generator"],
            "state": {"state": int(enc["state"]), "inc": int(enc["inc"])},
            "has_uint32": enc["has_uint32"],
            "uinteger": enc["uinteger"]}


# ----------------------------------------------------------------------
# flow pretraining


class FlowDivergence(RuntimeError):
    pass


def pretrain_flow(poses: np.ndarray, flow: CouplingFlow, steps: int,
                  seed: int, batch_size: int = 64, lr: float = 1e-3,
                  freeze: bool = True) -> list[float]:
    """Maximum-likelihood training of the pose prior on flattened poses
    (N, D). Sets the calibration constant to the median train negative
    log-probability and freezes the flow afterwards. On divergence the last
    stable parameters are restored and FlowDivergence is raised."""
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 2 or len(poses) == 0:
        raise ValueError(f"flow pretraining needs a non-empty (N, D) pose array, got {poses.shape}")
    rng = np.random.default_rng(seed)
    params = flow.parameters()
    opt = AdamState(params, lr=lr)
    history: list[float] = []
    stable = flow.state_dict()
    diverged = False
    for step in range(steps):
        idx = rng.integers(0, len(poses), batch_size)
        x = Tensor(poses[idx])
        try:
            lp = flow.log_prob(x)
        except FloatingPointError:
            diverged = True
            break
        loss = lp.mean() * -1.0
        if not np.isfinite(loss.data):
            diverged = True
            break
        zero_grads(params)
        loss.backward()
        clip_grad_norm(params, GRAD_CLIP_NORM)
        adam_step(params, opt)
        history.append(-loss.item())
        if step % 25 == 0:
            stable = flow.state_dict()
    if diverged:
        flow.load_state_dict(stable)
        raise FlowDivergence(f"flow training diverged after {len(history)} steps; "
                             "restored last stable parameters")
    with no_grad():
        nll = -flow.log_prob(Tensor(poses)).data
    flow.calibration = float(np.median(nll))
    if freeze:
        for p in params:
            p.requires_grad = False
    return history


def corpus_pose_pool(corpus: Corpus, split: str = "train") -> np.ndarray:
    """All frames of a split, flattened to (N, J*3), for flow pretraining."""
    frames = [c.poses.data.reshape(c.poses.frames, -1) for c in corpus.subset(split)]
    return np.concatenate(frames, axis=0)


def save_flow(path, flow: CouplingFlow, dim: int, layers: int, hidden: int) -> None:
    meta = {"kind": "hitdvae-flow", "dim": dim, "layers": layers,
            "hidden": hidden, "calibration": flow.calibration}
    save_checkpoint(path, flow.state_dict(), meta)


def load_flow(path) -> CouplingFlow:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "hitdvae-flow":
        raise ValueError(f"{path}: not a flow checkpoint (kind={meta.get('kind')!r})")
    flow = CouplingFlow(meta["dim"], np.random.default_rng(0),
                        layers=meta["layers"], hidden_dim=meta["hidden"])
    flow.load_state_dict(arrays)
    flow.calibration = float(meta["calibration"])
    for p in flow.parameters():
        p.requires_grad = False
    return flow
