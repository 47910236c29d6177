"""Synthetic labeled motion corpus: skeleton definition, kinematic clip
generators, clip file I/O, preprocessing and SVG stick-figure export.

Clips are built by forward kinematics from unit limb directions, so limb
lengths are constant by construction and every clip satisfies the skeleton's
angle limits; the realism losses are therefore exact-zero on real data and
discriminate generated data.
"""

from __future__ import annotations

import base64
import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GENERATOR_VERSION = "1"
CLIP_FORMAT = "hitdvae-motion"
CORPUS_FORMAT = "hitdvae-corpus"


class MotionDataError(ValueError):
    """Malformed clip/corpus file or infeasible generator spec."""


@dataclass
class Skeleton:
    joint_names: list[str]
    edges: list[tuple[int, int]]          # (parent, child)
    lengths: list[float]                  # meters, one per edge
    lower_body: list[int]
    upper_body: list[int]
    hinges: list[tuple[int, int, int]]    # (parent, joint, child)
    hinge_limits: list[tuple[float, float]]  # radians

    def __post_init__(self):
        j = len(self.joint_names)
        if len(self.edges) != len(self.lengths):
            raise MotionDataError(f"{len(self.edges)} edges vs {len(self.lengths)} lengths")
        parent_of: dict[int, int] = {}
        for p, c in self.edges:
            if c in parent_of:
                raise MotionDataError(f"joint {c} has two parents")
            if not (0 <= p < j and 0 <= c < j):
                raise MotionDataError(f"edge ({p},{c}) out of range for {j} joints")
            parent_of[c] = p
        if 0 in parent_of:
            raise MotionDataError("root joint 0 must not have a parent")
        for c in range(1, j):
            seen, cur = set(), c
            while cur != 0:
                if cur in seen or cur not in parent_of:
                    raise MotionDataError(f"edges do not form a tree rooted at 0 (joint {c})")
                seen.add(cur)
                cur = parent_of[cur]
        lower, upper = set(self.lower_body), set(self.upper_body)
        non_root = set(range(1, j))
        if lower & upper or (lower | upper) != non_root:
            raise MotionDataError("lower/upper partition must disjointly cover all non-root joints")
        if len(self.hinges) != len(self.hinge_limits):
            raise MotionDataError("hinge/limit count mismatch")

    @property
    def joints(self) -> int:
        return len(self.joint_names)

    def mean_limb_length(self) -> float:
        return float(np.mean(self.lengths))

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "edges": [list(e) for e in self.edges],
            "lengths": list(self.lengths),
            "lower_body": list(self.lower_body),
            "upper_body": list(self.upper_body),
            "hinges": [list(h) for h in self.hinges],
            "hinge_limits": [list(h) for h in self.hinge_limits],
        }

    FIELD_NAMES = ("joint_names", "edges", "lengths", "lower_body",
                   "upper_body", "hinges", "hinge_limits")

    @staticmethod
    def from_dict(d: dict) -> "Skeleton":
        known = set(Skeleton.FIELD_NAMES)
        unknown = sorted(set(d) - known)
        if unknown:
            raise MotionDataError(f"unknown skeleton keys: {unknown}")
        missing = sorted(known - set(d))
        if missing:
            raise MotionDataError(f"missing skeleton keys: {missing}")
        return Skeleton(
            joint_names=list(d["joint_names"]),
            edges=[tuple(e) for e in d["edges"]],
            lengths=[float(x) for x in d["lengths"]],
            lower_body=list(d["lower_body"]),
            upper_body=list(d["upper_body"]),
            hinges=[tuple(h) for h in d["hinges"]],
            hinge_limits=[tuple(float(x) for x in h) for h in d["hinge_limits"]],
        )

    @staticmethod
    def default9() -> "Skeleton":
        """9-joint body: root/pelvis, spine, head, two 2-joint arms, two
        single-link legs."""
        return Skeleton(
            joint_names=["root", "spine", "head", "l_shoulder", "l_hand",
                         "r_shoulder", "r_hand", "l_foot", "r_foot"],
            edges=[(0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (0, 7), (0, 8)],
            lengths=[0.45, 0.25, 0.22, 0.40, 0.22, 0.40, 0.85, 0.85],
            lower_body=[7, 8],
            upper_body=[1, 2, 3, 4, 5, 6],
            hinges=[(0, 1, 2), (1, 3, 4), (1, 5, 6), (1, 0, 7), (1, 0, 8)],
            hinge_limits=[(2.0, 3.15), (0.5, 3.15), (0.5, 3.15), (1.8, 3.15), (1.8, 3.15)],
        )

    @staticmethod
    def minimal3() -> "Skeleton":
        """Tiny 3-joint chain used by the micro configuration."""
        return Skeleton(
            joint_names=["root", "mid", "tip"],
            edges=[(0, 1), (1, 2)],
            lengths=[0.5, 0.4],
            lower_body=[1],
            upper_body=[2],
            hinges=[(0, 1, 2)],
            hinge_limits=[(1.2, 1.9)],
        )


@dataclass
class PoseSequence:
    """Root-centered joint trajectory of shape (frames, joints, 3)."""

    data: np.ndarray
    obs_len: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise MotionDataError(f"pose sequence must be (T, J, 3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            bad = np.argwhere(~np.isfinite(self.data))[0]
            raise MotionDataError(f"non-finite coordinate at frame {bad[0]}, joint {bad[1]}")
        if np.any(self.data[:, 0, :] != 0.0):
            raise MotionDataError("root joint must be zero in every frame (run preprocess first)")
        if not (0 <= self.obs_len <= self.frames):
            raise MotionDataError(f"observed prefix {self.obs_len} outside [0, {self.frames}]")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def joints(self) -> int:
        return self.data.shape[1]

    @property
    def gen_len(self) -> int:
        return self.frames - self.obs_len


@dataclass
class MotionClip:
    skeleton: Skeleton
    poses: PoseSequence
    label: str
    fps: float
    source: str = ""
    meta: dict = field(default_factory=dict)


def preprocess(coords: np.ndarray, obs_len: int = 0) -> PoseSequence:
    """Remove global translation: subtract the root joint from every frame."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise MotionDataError(f"expected raw coordinates (T, J, 3), got {coords.shape}")
    centered = coords - coords[:, :1, :]
    centered[:, 0, :] = 0.0
    return PoseSequence(centered, obs_len=obs_len)


# ----------------------------------------------------------------------
# synthetic generators


def _fk(skeleton: Skeleton, directions: dict[tuple[int, int], np.ndarray],
        frames: int) -> np.ndarray:
    """Positions from per-edge unit directions; root pinned at the origin."""
    out = np.zeros((frames, skeleton.joints, 3))
    for (p, c), length in zip(skeleton.edges, skeleton.lengths):
        d = directions[(p, c)]
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        out[:, c, :] = out[:, p, :] + d / norm * length
    return out


def _sin(t: np.ndarray, freq: float, phase: float) -> np.ndarray:
    return np.sin(2.0 * math.pi * freq * t + phase)


def _dirs_static(frames: int, vec) -> np.ndarray:
    return np.tile(np.asarray(vec, dtype=np.float64), (frames, 1))


def _walk(t, freq, amp, phase, frames):
    swing = amp * 0.45 * _sin(t, freq, phase)
    bob = 0.05 * _sin(t, 2 * freq, phase)
    d = {}
    d[(0, 1)] = np.stack([np.zeros(frames), np.ones(frames), bob], axis=1)
    d[(1, 2)] = np.stack([np.zeros(frames), np.ones(frames), 0.05 * _sin(t, 2 * freq, phase + 0.5)], axis=1)
    d[(1, 3)] = _dirs_static(frames, (-1.0, -0.25, 0.0))
    d[(1, 5)] = _dirs_static(frames, (1.0, -0.25, 0.0))
    d[(3, 4)] = np.stack([np.full(frames, -0.10), -np.ones(frames), -0.8 * swing], axis=1)
    d[(5, 6)] = np.stack([np.full(frames, 0.10), -np.ones(frames), 0.8 * swing], axis=1)
    d[(0, 7)] = np.stack([np.full(frames, -0.18), -np.ones(frames), swing], axis=1)
    d[(0, 8)] = np.stack([np.full(frames, 0.18), -np.ones(frames), -swing], axis=1)
    return d


def _wave(t, freq, amp, phase, frames):
    sway = amp * 0.7 * _sin(t, freq, phase)
    d = {}
    d[(0, 1)] = _dirs_static(frames, (0.0, 1.0, 0.0))
    d[(1, 2)] = _dirs_static(frames, (0.0, 1.0, 0.0))
    d[(1, 3)] = _dirs_static(frames, (-1.0, -0.25, 0.0))
    d[(3, 4)] = _dirs_static(frames, (-0.2, -1.0, 0.0))
    d[(1, 5)] = _dirs_static(frames, (1.0, 0.3, 0.0))
    d[(5, 6)] = np.stack([sway, np.ones(frames), np.full(frames, 0.2)], axis=1)
    d[(0, 7)] = _dirs_static(frames, (-0.18, -1.0, 0.0))
    d[(0, 8)] = _dirs_static(frames, (0.18, -1.0, 0.0))
    return d


def _squat(t, freq, amp, phase, frames):
    swing = amp * 0.40 * _sin(t, freq, phase)
    lean = -0.5 * swing
    d = {}
    d[(0, 1)] = np.stack([np.zeros(frames), np.ones(frames), lean], axis=1)
    d[(1, 2)] = np.stack([np.zeros(frames), np.ones(frames), lean], axis=1)
    d[(1, 3)] = _dirs_static(frames, (-1.0, -0.15, 0.25))
    d[(3, 4)] = _dirs_static(frames, (-0.15, -0.25, 1.0))
    d[(1, 5)] = _dirs_static(frames, (1.0, -0.15, 0.25))
    d[(5, 6)] = _dirs_static(frames, (0.15, -0.25, 1.0))
    d[(0, 7)] = np.stack([np.full(frames, -0.18), -np.ones(frames), swing], axis=1)
    d[(0, 8)] = np.stack([np.full(frames, 0.18), -np.ones(frames), swing], axis=1)
    return d


def _turn(t, freq, amp, phase, frames):
    yaw = amp * 0.8 * _sin(t, freq, phase)
    cos, sin = np.cos(yaw), np.sin(yaw)
    d = {}
    d[(0, 1)] = _dirs_static(frames, (0.0, 1.0, 0.0))
    d[(1, 2)] = _dirs_static(frames, (0.0, 1.0, 0.0))
    d[(1, 3)] = np.stack([-cos, np.full(frames, -0.25), -sin], axis=1)
    d[(3, 4)] = np.stack([-0.25 * cos, -np.ones(frames), -0.25 * sin], axis=1)
    d[(1, 5)] = np.stack([cos, np.full(frames, -0.25), sin], axis=1)
    d[(5, 6)] = np.stack([0.25 * cos, -np.ones(frames), 0.25 * sin], axis=1)
    d[(0, 7)] = _dirs_static(frames, (-0.18, -1.0, 0.0))
    d[(0, 8)] = _dirs_static(frames, (0.18, -1.0, 0.0))
    return d


GENERATORS = {"walk": _walk, "wave": _wave, "squat": _squat, "turn": _turn}
_BASE_FREQ = {"walk": 1.0, "wave": 1.2, "squat": 0.7, "turn": 0.6}


def angle_violation_total(poses: np.ndarray, skeleton: Skeleton) -> float:
    """Sum of squared hinge-angle violations; exact zero for feasible clips."""
    total = 0.0
    for (p, j, c), (lo, hi) in zip(skeleton.hinges, skeleton.hinge_limits):
        u = poses[:, p, :] - poses[:, j, :]
        v = poses[:, c, :] - poses[:, j, :]
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        ok = (nu > 1e-9) & (nv > 1e-9)
        cosang = np.clip(np.sum(u * v, axis=1)[ok] / (nu[ok] * nv[ok]), -1.0, 1.0)
        ang = np.arccos(cosang)
        total += float(np.sum(np.maximum(ang - hi, 0.0) ** 2))
        total += float(np.sum(np.maximum(lo - ang, 0.0) ** 2))
    return total


def limb_deviation_max(poses: np.ndarray, skeleton: Skeleton) -> float:
    worst = 0.0
    for (p, c), length in zip(skeleton.edges, skeleton.lengths):
        d = np.linalg.norm(poses[:, c, :] - poses[:, p, :], axis=1)
        worst = max(worst, float(np.max(np.abs(d - length))))
    return worst


@dataclass
class Corpus:
    skeleton: Skeleton
    clips: list[MotionClip]
    splits: list[str]              # "train" / "test", parallel to clips
    seed: int
    fps: float
    jitter: float

    def subset(self, split: str) -> list[MotionClip]:
        return [c for c, s in zip(self.clips, self.splits) if s == split]

    @property
    def labels(self) -> list[str]:
        return sorted({c.label for c in self.clips})


def synth_corpus(classes: list[str], clips_per_class: int, frames: int, seed: int,
                 fps: float = 25.0, jitter: float = 1.0,
                 skeleton: Skeleton | None = None) -> Corpus:
    """Deterministic parametric corpus; 80/20 train/test split by clip index."""
    if len(classes) < 2:
        raise MotionDataError(f"need at least 2 action classes, got {classes}")
    unknown = [c for c in classes if c not in GENERATORS]
    if unknown:
        raise MotionDataError(f"unknown action classes {unknown}; available: {sorted(GENERATORS)}")
    skeleton = skeleton or Skeleton.default9()
    rng = np.random.default_rng(seed)
    t = np.arange(frames) / fps
    clips: list[MotionClip] = []
    splits: list[str] = []
    for label in classes:
        base_freq = _BASE_FREQ[label]
        for i in range(clips_per_class):
            freq = base_freq * (1.0 + jitter * rng.uniform(-0.25, 0.25))
            amp = 1.0 + jitter * rng.uniform(-0.15, 0.15)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            coords = _fk(skeleton, GENERATORS[label](t, freq, amp, phase, frames), frames)
            poses = preprocess(coords)
            if angle_violation_total(poses.data, skeleton) > 0.0:
                raise MotionDataError(
                    f"generator parameters for {label} clip {i} violate hinge limits")
            clips.append(MotionClip(
                skeleton=skeleton, poses=poses, label=label, fps=fps,
                source=f"synth/{label}/{GENERATOR_VERSION}",
                meta={"freq": freq, "amp": amp, "phase": phase, "index": i}))
            splits.append("test" if i % 5 == 4 else "train")
    return Corpus(skeleton=skeleton, clips=clips, splits=splits, seed=seed,
                  fps=fps, jitter=jitter)


# ----------------------------------------------------------------------
# clip file I/O


def save_clip(clip: MotionClip, path, body: str = "b64") -> None:
    if body not in ("b64", "csv"):
        raise MotionDataError(f"unknown body format {body!r}")
    t, j = clip.poses.frames, clip.poses.joints
    header = {
        "format": CLIP_FORMAT, "version": 1, "label": clip.label, "fps": clip.fps,
        "frames": t, "joints": j, "body": body, "source": clip.source,
        "meta": clip.meta, "skeleton": clip.skeleton.to_dict(),
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    if body == "b64":
        raw = np.ascontiguousarray(clip.poses.data, dtype="<f8").tobytes()
        lines.append(base64.b64encode(raw).decode("ascii"))
    else:
        flat = clip.poses.data.reshape(t, j * 3)
        for row in flat:
            lines.append(",".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_clip(path) -> MotionClip:
    text = Path(path).read_text(encoding="utf-8")
    nl = text.find("\n")
    if nl < 0:
        raise MotionDataError(f"{path}: no body after header (file ends at byte {len(text)})")
    try:
        header = json.loads(text[:nl])
    except json.JSONDecodeError as e:
        raise MotionDataError(f"{path}: bad header JSON: {e}") from None
    if header.get("format") != CLIP_FORMAT:
        raise MotionDataError(f"{path}: not a motion clip (format={header.get('format')!r})")
    if header.get("version") != 1:
        raise MotionDataError(f"{path}: unsupported version {header.get('version')!r}")
    t, j = int(header["frames"]), int(header["joints"])
    body = text[nl + 1:]
    body_offset = nl + 1
    if header["body"] == "b64":
        try:
            raw = base64.b64decode(body.strip().encode("ascii"), validate=True)
        except Exception as e:
            raise MotionDataError(f"{path}: bad base64 body at byte {body_offset}: {e}") from None
        expected = t * j * 3 * 8
        if len(raw) != expected:
            raise MotionDataError(
                f"{path}: truncated body at byte {body_offset}: expected {expected} bytes, got {len(raw)}")
        coords = np.frombuffer(raw, dtype="<f8").reshape(t, j, 3).copy()
    elif header["body"] == "csv":
        rows = [r for r in body.splitlines() if r.strip()]
        if len(rows) != t:
            raise MotionDataError(f"{path}: expected {t} body rows, got {len(rows)}")
        coords = np.empty((t, j * 3))
        for i, row in enumerate(rows):
            cells = row.split(",")
            if len(cells) != j * 3:
                raise MotionDataError(f"{path}: row {i} has {len(cells)} columns, expected {j * 3}")
            coords[i] = [float(c) for c in cells]
        coords = coords.reshape(t, j, 3)
    else:
        raise MotionDataError(f"{path}: unknown body format {header['body']!r}")
    if not np.all(np.isfinite(coords)):
        bad = np.argwhere(~np.isfinite(coords))[0]
        raise MotionDataError(f"{path}: non-finite value at frame {bad[0]}, joint {bad[1]}")
    return MotionClip(
        skeleton=Skeleton.from_dict(header["skeleton"]),
        poses=PoseSequence(coords),
        label=header["label"], fps=float(header["fps"]),
        source=header.get("source", ""), meta=header.get("meta", {}))


def save_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (clip, split) in enumerate(zip(corpus.clips, corpus.splits)):
        fname = f"clips/{clip.label}_{i:04d}.mclip"
        save_clip(clip, out / fname)
        entries.append({"file": fname, "label": clip.label, "split": split})
    manifest = {
        "format": CORPUS_FORMAT, "version": 1, "seed": corpus.seed,
        "generator_version": GENERATOR_VERSION, "fps": corpus.fps,
        "jitter": corpus.jitter, "skeleton": corpus.skeleton.to_dict(),
        "clips": entries,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out / "manifest.json"


def load_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MotionDataError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != CORPUS_FORMAT:
        raise MotionDataError(f"{manifest_path}: not a corpus manifest")
    skeleton = Skeleton.from_dict(manifest["skeleton"])
    clips, splits = [], []
    for entry in manifest["clips"]:
        clips.append(load_clip(root / entry["file"]))
        splits.append(entry["split"])
    return Corpus(skeleton=skeleton, clips=clips, splits=splits,
                  seed=int(manifest["seed"]), fps=float(manifest["fps"]),
                  jitter=float(manifest["jitter"]))


# ----------------------------------------------------------------------
# SVG rendering

_PLANES = {"xy": (0, 1), "xz": (0, 2), "zy": (2, 1), "yz": (1, 2)}


def _palette(n: int) -> list[str]:
    colors = []
    for i in range(n):
        r, g, b = colorsys.hsv_to_rgb(i / max(n, 1), 0.75, 0.85)
        colors.append(f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}")
    return colors


def render_svg(sequences: list[np.ndarray], skeleton: Skeleton,
               frames: list[int], plane: str = "zy", spacing: float = 2.2,
               scale: float = 100.0, margin: float = 40.0) -> str:
    """Stick figures for the selected frames, one stroke color per sequence.

    Emits exactly len(sequences) * len(frames) * len(edges) line elements.
    """
    if plane not in _PLANES:
        raise MotionDataError(f"unknown projection plane {plane!r}; use one of {sorted(_PLANES)}")
    ax, ay = _PLANES[plane]
    colors = _palette(len(sequences))
    width = margin * 2 + scale * spacing * max(len(frames), 1)
    height = margin * 2 + scale * 2.4
    mid_y = height / 2.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">'
    ]
    for si, seq in enumerate(sequences):
        seq = np.asarray(seq, dtype=np.float64)
        for fi, frame in enumerate(frames):
            offset_x = margin + scale * spacing * (fi + 0.5)
            pose = seq[frame]
            for p, c in skeleton.edges:
                x1 = offset_x + scale * pose[p, ax]
                y1 = mid_y - scale * pose[p, ay]
                x2 = offset_x + scale * pose[c, ax]
                y2 = mid_y - scale * pose[c, ay]
                parts.append(
                    f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                    f'stroke="{colors[si]}" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts)
