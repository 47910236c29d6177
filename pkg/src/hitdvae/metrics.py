"""Evaluation: pairwise diversity, best/medium displacement errors and their
multi-modal versions, a GRU action classifier used both for recognition
accuracy and as the feature extractor behind the Frechet distance."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .nn import GruCell, Linear, Module
from .tensor import AdamState, Tensor, adam_step, no_grad, save_checkpoint, load_checkpoint, zero_grads

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


# ----------------------------------------------------------------------
# explicit metrics


def apd(samples: np.ndarray) -> float:
    """Average L2 distance over ordered pairs of flattened future sequences."""
    samples = np.asarray(samples, dtype=np.float64)
    k = samples.shape[0]
    if k < 2:
        raise MetricError(f"pairwise diversity needs K >= 2 samples, got {k}")
    flat = samples.reshape(k, -1)
    total = 0.0
    for i in range(k):
        d = np.linalg.norm(flat - flat[i], axis=1)
        total += float(d.sum())
    return total / (k * (k - 1))


def _per_sample_errors(samples: np.ndarray, gt: np.ndarray,
                       frame_norm: bool) -> tuple[np.ndarray, np.ndarray]:
    """(ade_k, fde_k) per sample. frame_norm=True takes the L2 norm per frame
    and averages over frames; otherwise the flattened-sequence norm over G."""
    k, g = samples.shape[0], samples.shape[1]
    diff = samples - gt[None]
    per_frame = np.linalg.norm(diff.reshape(k, g, -1), axis=2)
    if frame_norm:
        ade = per_frame.mean(axis=1)
    else:
        ade = np.linalg.norm(diff.reshape(k, -1), axis=1) / g
    fde = per_frame[:, -1]
    return ade, fde


def _medium_index(samples: np.ndarray, gt: np.ndarray) -> int:
    """Sample of rank ceil(K/2) by whole-future L2 distance (stable ties)."""
    k = samples.shape[0]
    d = np.linalg.norm(samples.reshape(k, -1) - gt.reshape(-1), axis=1)
    order = np.argsort(d, kind="stable")
    return int(order[math.ceil(k / 2) - 1])


def displacement_errors(samples: np.ndarray, gt: np.ndarray, mode: str = "best",
                        frame_norm: bool = True) -> tuple[float, float]:
    """(ADE, FDE) against the ground-truth future. Mode 'best' minimizes each
    metric independently over samples; 'medium' reports the median-distance
    sample's errors."""
    samples = np.asarray(samples, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if samples.shape[0] < 1:
        raise MetricError("need at least one sample")
    if samples.shape[1:] != gt.shape:
        raise MetricError(f"sample shape {samples.shape[1:]} vs ground truth {gt.shape}")
    ade, fde = _per_sample_errors(samples, gt, frame_norm)
    if mode == "best":
        return float(ade.min()), float(fde.min())
    if mode == "medium":
        idx = _medium_index(samples, gt)
        return float(ade[idx]), float(fde[idx])
    raise MetricError(f"mode must be 'best' or 'medium', got {mode!r}")


def mm_displacement_errors(samples: np.ndarray, mm_futures: np.ndarray,
                           mode: str = "best", frame_norm: bool = True) -> tuple[float, float]:
    """Displacement errors averaged over the pseudo-ground-truth futures,
    with best/medium selection done per member."""
    samples = np.asarray(samples, dtype=np.float64)
    mm_futures = np.asarray(mm_futures, dtype=np.float64)
    if mm_futures.ndim != samples.ndim or mm_futures.shape[0] < 1:
        raise MetricError(f"multi-modal set must be non-empty with shape (M, G, J, 3), got {mm_futures.shape}")
    ades, fdes = [], []
    for ref in mm_futures:
        a, f = displacement_errors(samples, ref, mode, frame_norm)
        ades.append(a)
        fdes.append(f)
    return float(np.mean(ades)), float(np.mean(fdes))


# ----------------------------------------------------------------------
# GRU action classifier


class ActionClassifier(Module):
    """Two stacked GRU layers; the final hidden state of the second layer is
    the feature vector, a linear head maps it to class logits."""

    def __init__(self, input_dim: int, classes: list[str], hidden_dim: int = 128,
                 seed: int = 0):
        if len(classes) < 2:
            raise MetricError(f"classifier needs >= 2 classes, got {classes}")
        rng = np.random.default_rng(seed)
        self.classes = list(classes)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.gru1 = GruCell(input_dim, hidden_dim, rng)
        self.gru2 = GruCell(hidden_dim, hidden_dim, rng)
        self.head = Linear(hidden_dim, len(classes), rng)

    def _final_hidden(self, batch: Tensor) -> Tensor:
        """batch: (B, T, D) -> (B, hidden)."""
        b, t, d = batch.shape
        if d != self.input_dim:
            raise MetricError(f"classifier input width {d} vs configured {self.input_dim}")
        h1 = Tensor(np.zeros((b, self.hidden_dim)))
        h2 = Tensor(np.zeros((b, self.hidden_dim)))
        for i in range(t):
            x_t = batch[:, i, :]
            h1 = self.gru1(x_t, h1)
            h2 = self.gru2(h1, h2)
        return h2

    def logits(self, batch: Tensor) -> Tensor:
        return self.head(self._final_hidden(batch))

    def features(self, sequences: np.ndarray) -> np.ndarray:
        """Final-hidden-state features for (N, T, J, 3) sequences."""
        x = _flatten_frames(sequences)
        with no_grad():
            return self._final_hidden(Tensor(x)).data.copy()

    def predict(self, sequences: np.ndarray) -> list[str]:
        x = _flatten_frames(sequences)
        with no_grad():
            out = self.logits(Tensor(x)).data
        return [self.classes[i] for i in np.argmax(out, axis=1)]


def _flatten_frames(sequences: np.ndarray) -> np.ndarray:
    sequences = np.asarray(sequences, dtype=np.float64)
    n, t = sequences.shape[0], sequences.shape[1]
    return sequences.reshape(n, t, -1)


def _cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    probs = logits.softmax(axis=-1)
    rows = np.arange(len(targets))
    picked = probs[rows, targets]
    return picked.log().mean() * -1.0


def train_classifier(sequences: np.ndarray, labels: list[str], seed: int = 0,
                     epochs: int = 30, batch_size: int = 32, lr: float = 1e-3,
                     holdout: float = 0.2, hidden_dim: int = 128,
                     min_per_class: int = 20) -> tuple[ActionClassifier, float]:
    """Train on a held-in split and report held-out accuracy. Classes with a
    more than 10:1 imbalance are flagged via the module logger."""
    sequences = np.asarray(sequences, dtype=np.float64)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise MetricError(f"need >= 2 classes, got {classes}")
    counts = {c: labels.count(c) for c in classes}
    short = {c: n for c, n in counts.items() if n < min_per_class}
    if short:
        raise MetricError(f"classes below the {min_per_class}-sequence minimum: {short}")
    if max(counts.values()) > 10 * min(counts.values()):
        log.warning("class imbalance exceeds 10:1: %s", counts)

    rng = np.random.default_rng(seed)
    y = np.array([classes.index(l) for l in labels])
    order = rng.permutation(len(sequences))
    n_hold = max(1, int(round(holdout * len(sequences))))
    hold, fit_idx = order[:n_hold], order[n_hold:]
    x = _flatten_frames(sequences)

    clf = ActionClassifier(x.shape[2], classes, hidden_dim=hidden_dim, seed=seed)
    params = clf.parameters()
    opt = AdamState(params, lr=lr)
    for _ in range(epochs):
        perm = rng.permutation(fit_idx)
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            zero_grads(params)
            loss = _cross_entropy(clf.logits(Tensor(x[idx])), y[idx])
            loss.backward()
            adam_step(params, opt)
    preds = clf.predict(sequences[hold])
    acc = float(np.mean([p == classes[t] for p, t in zip(preds, y[hold])]))
    return clf, acc


def recognition_accuracy(classifier: ActionClassifier, sequences: np.ndarray,
                         labels: list[str]) -> float:
    """Fraction of sequences classified as their conditioning class."""
    unknown = sorted(set(labels) - set(classifier.classes))
    if unknown:
        raise MetricError(f"labels not known to the classifier: {unknown}")
    preds = classifier.predict(sequences)
    return float(np.mean([p == t for p, t in zip(preds, labels)]))


def save_classifier(path, clf: ActionClassifier) -> None:
    meta = {"kind": "hitdvae-classifier", "classes": clf.classes,
            "input_dim": clf.input_dim, "hidden_dim": clf.hidden_dim}
    save_checkpoint(path, clf.state_dict(), meta)


def load_classifier(path) -> ActionClassifier:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "hitdvae-classifier":
        raise MetricError(f"{path}: not a classifier checkpoint")
    clf = ActionClassifier(meta["input_dim"], meta["classes"],
                           hidden_dim=meta["hidden_dim"], seed=0)
    clf.load_state_dict(arrays)
    return clf


# ----------------------------------------------------------------------
# Frechet distance


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise MetricError(f"covariance {self.cov.shape} vs mean of size {self.mean.size}")

    @staticmethod
    def from_features(features: np.ndarray) -> "FeatureStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise MetricError(f"need (N>=2, D) features, got {features.shape}")
        cov = np.cov(features, rowvar=False)
        cov = 0.5 * (cov + cov.T)
        return FeatureStats(mean=features.mean(axis=0), cov=cov)


def _check_psd(stats: FeatureStats, label: str, tol: float = 1e-8) -> np.ndarray:
    cov = stats.cov
    asym = float(np.max(np.abs(cov - cov.T)))
    if asym > 1e-10:
        raise MetricError(f"{label} covariance asymmetric by {asym:.3g}")
    vals = np.linalg.eigvalsh(cov)
    if vals.min() < -tol:
        raise MetricError(f"{label} covariance not PSD: min eigenvalue {vals.min():.3g}")
    return cov


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    sym = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real: FeatureStats, gen: FeatureStats) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^1/2), the matrix square root
    taken by eigendecomposition of the symmetrized S1^1/2 S2 S1^1/2."""
    c1 = _check_psd(real, "first")
    c2 = _check_psd(gen, "second")
    if c1.shape != c2.shape:
        raise MetricError(f"feature dims differ: {c1.shape} vs {c2.shape}")
    s1h = _psd_sqrt(c1)
    inner = s1h @ c2 @ s1h
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    d = real.mean - gen.mean
    return float(d @ d + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt)


# ----------------------------------------------------------------------
# report


REPORT_COLUMNS = ["acc", "fid", "apd", "ade_b", "fde_b", "mmade_b", "mmfde_b",
                  "ade_m", "fde_m", "mmade_m", "mmfde_m"]


@dataclass
class MetricReport:
    acc: float
    fid: float
    apd: float
    ade_b: float
    fde_b: float
    mmade_b: float
    mmfde_b: float
    ade_m: float
    fde_m: float
    mmade_m: float
    mmfde_m: float
    n_sequences: int
    k_samples: int
    m_multimodal: float
    ade_norm: str = "per-frame"

    def check_invariants(self) -> None:
        pairs = [("ade_b", "ade_m"), ("fde_b", "fde_m"),
                 ("mmade_b", "mmade_m"), ("mmfde_b", "mmfde_m")]
        for b, m in pairs:
            if getattr(self, b) > getattr(self, m) + 1e-12:
                raise MetricError(f"report invariant violated: {b} > {m}")
        for col in REPORT_COLUMNS[2:]:
            if getattr(self, col) < 0:
                raise MetricError(f"negative distance metric {col}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def csv_header(self) -> str:
        return ",".join(REPORT_COLUMNS)

    def csv_row(self) -> str:
        return ",".join(f"{getattr(self, c):.10g}" for c in REPORT_COLUMNS)
