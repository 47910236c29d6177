"""End-to-end evaluation: generate K futures per test window, score explicit
metrics against the ground truth and multimodal candidate futures, and score
implicit metrics (recognition accuracy, Frechet distance) through the GRU
classifier's features."""

from __future__ import annotations

import numpy as np

from .data import Corpus, PoseSequence
from .generator import generate
from .losses import select_multimodal
from .metrics import (ActionClassifier, FeatureStats, MetricReport, apd,
                      displacement_errors, fid, mm_displacement_errors,
                      recognition_accuracy)
from .model import HiTDVAE
from .trainer import training_windows


def test_windows(corpus: Corpus, seq_len: int) -> tuple[np.ndarray, list[str]]:
    """First seq_len frames of every test clip, with labels."""
    windows, labels = [], []
    for clip in corpus.subset("test"):
        if clip.poses.frames >= seq_len:
            windows.append(clip.poses.data[:seq_len])
            labels.append(clip.label)
    if not windows:
        raise ValueError(f"no test clip reaches {seq_len} frames")
    return np.stack(windows), labels


def shuffled_baseline(windows: np.ndarray, seed: int) -> np.ndarray:
    """Frame-order-destroyed copies of the windows (dynamics removed)."""
    rng = np.random.default_rng(seed)
    out = windows.copy()
    for i in range(len(out)):
        out[i] = out[i][rng.permutation(out.shape[1])]
    return out


def evaluate(model: HiTDVAE, corpus: Corpus, classifier: ActionClassifier,
             obs_len: int, horizon: int, k_samples: int, seed: int,
             mode: str = "sample", frame_norm: bool = True,
             threads: int | None = None) -> MetricReport:
    seq_len = obs_len + horizon
    windows, labels = test_windows(corpus, seq_len)
    pool = training_windows(corpus, seq_len)
    mean_limb = corpus.skeleton.mean_limb_length()

    per = {name: [] for name in ("apd", "ade_b", "fde_b", "mmade_b", "mmfde_b",
                                 "ade_m", "fde_m", "mmade_m", "mmfde_m")}
    mm_sizes = []
    gen_sequences, gen_labels = [], []
    for i, (window, label) in enumerate(zip(windows, labels)):
        observed = PoseSequence(window[:obs_len], obs_len=obs_len)
        rollouts = generate(model, observed, horizon, k_samples,
                            seed=(seed * 1000003 + i) % (2 ** 63), mode=mode,
                            threads=threads)
        full = np.stack([r.data for r in rollouts])
        futures = full[:, obs_len:]
        gt_future = window[obs_len:]
        mm = select_multimodal(pool, window, obs_len, mean_limb)
        mm_futures = mm.sequences[:, obs_len:]
        mm_sizes.append(len(mm))

        if k_samples >= 2:
            per["apd"].append(apd(futures))
        a, f = displacement_errors(futures, gt_future, "best", frame_norm)
        per["ade_b"].append(a)
        per["fde_b"].append(f)
        a, f = displacement_errors(futures, gt_future, "medium", frame_norm)
        per["ade_m"].append(a)
        per["fde_m"].append(f)
        a, f = mm_displacement_errors(futures, mm_futures, "best", frame_norm)
        per["mmade_b"].append(a)
        per["mmfde_b"].append(f)
        a, f = mm_displacement_errors(futures, mm_futures, "medium", frame_norm)
        per["mmade_m"].append(a)
        per["mmfde_m"].append(f)

        gen_sequences.append(full)
        gen_labels.extend([label] * k_samples)

    all_generated = np.concatenate(gen_sequences, axis=0)
    acc = recognition_accuracy(classifier, all_generated, gen_labels)
    real_stats = FeatureStats.from_features(classifier.features(windows))
    gen_stats = FeatureStats.from_features(classifier.features(all_generated))
    fid_value = fid(real_stats, gen_stats)

    report = MetricReport(
        acc=acc, fid=fid_value,
        apd=float(np.mean(per["apd"])) if per["apd"] else 0.0,
        ade_b=float(np.mean(per["ade_b"])), fde_b=float(np.mean(per["fde_b"])),
        mmade_b=float(np.mean(per["mmade_b"])), mmfde_b=float(np.mean(per["mmfde_b"])),
        ade_m=float(np.mean(per["ade_m"])), fde_m=float(np.mean(per["fde_m"])),
        mmade_m=float(np.mean(per["mmade_m"])), mmfde_m=float(np.mean(per["mmfde_m"])),
        n_sequences=len(windows), k_samples=k_samples,
        m_multimodal=float(np.mean(mm_sizes)),
        ade_norm="per-frame" if frame_norm else "flattened",
    )
    report.check_invariants()
    return report


def corpus_intrinsic_apd(corpus: Corpus, obs_len: int, horizon: int,
                         max_groups: int = 50) -> float:
    """Mean pairwise distance between futures of different test clips of the
    same class: the corpus's own diversity scale."""
    seq_len = obs_len + horizon
    windows, labels = test_windows(corpus, seq_len)
    futures = windows[:, obs_len:]
    by_label: dict[str, list[np.ndarray]] = {}
    for f, l in zip(futures, labels):
        by_label.setdefault(l, []).append(f)
    values = []
    for group in list(by_label.values())[:max_groups]:
        if len(group) >= 2:
            values.append(apd(np.stack(group)))
    return float(np.mean(values))
