"""Command-line entry point for the whole pipeline: corpus synthesis, flow
pretraining, model training, generation, evaluation, gradient checking and
SVG rendering. Every run writes a manifest (config echo, seed, build id,
input hashes); failures exit nonzero with a machine-readable error JSON."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checks import micro_total_loss_gradcheck
from .config import ConfigError, RunConfig, load_config
from .data import (GENERATORS, MotionClip, load_clip, load_corpus, render_svg,
                   save_clip, save_corpus, synth_corpus)
from .evaluation import evaluate
from .generator import generate, thread_count
from .metrics import load_classifier, save_classifier, train_classifier
from .nn import CouplingFlow
from .reporting import loss_figure, metrics_figure
from .trainer import (corpus_pose_pool, fit, load_flow, load_model,
                      pretrain_flow, save_flow)


class CliUsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_id() -> str:
    """Content hash of the installed package sources."""
    digest = hashlib.sha256()
    pkg = Path(__file__).parent
    for f in sorted(pkg.glob("*.py")):
        digest.update(f.name.encode())
        digest.update(f.read_bytes())
    return f"{__version__}+src.{digest.hexdigest()[:12]}"


def _write_manifest(out_dir: Path, command: str, seed: int | None,
                    config: RunConfig | None, inputs: dict[str, Path],
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "seed": seed,
        "build_id": build_id(),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "config": config.to_dict() if config is not None else None,
        "input_hashes": {name: _sha256(Path(p)) for name, p in inputs.items()},
    }
    if extra:
        manifest.update(extra)
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    classes = [c for c in args.classes.split(",") if c]
    corpus = synth_corpus(classes, args.clips_per_class, args.frames,
                          seed=args.seed, fps=args.fps, jitter=args.jitter)
    out = _out_dir(args)
    manifest_path = save_corpus(corpus, out)
    _write_manifest(out, "synth", args.seed, None, {"corpus_manifest": manifest_path},
                    extra={"classes": classes, "clips_per_class": args.clips_per_class,
                           "frames": args.frames})
    print(json.dumps({"corpus": str(out), "clips": len(corpus.clips)}))
    return 0


def _cmd_pretrain_flow(args) -> int:
    corpus = load_corpus(args.corpus)
    if args.config:
        cfg = load_config(args.config)
        layers, hidden = cfg.model.flow_layers, cfg.model.flow_hidden
    else:
        cfg, layers, hidden = None, args.layers, args.hidden
    dim = corpus.skeleton.joints * 3
    flow = CouplingFlow(dim, np.random.default_rng(args.seed), layers=layers,
                        hidden_dim=hidden)
    pool = corpus_pose_pool(corpus, "train")
    history = pretrain_flow(pool, flow, steps=args.steps, seed=args.seed,
                            batch_size=args.batch, lr=args.lr)
    out = _out_dir(args)
    flow_path = out / "flow.ckpt"
    save_flow(flow_path, flow, dim=dim, layers=layers, hidden=hidden)
    _write_manifest(out, "pretrain-flow", args.seed, cfg,
                    {"corpus_manifest": Path(args.corpus) / "manifest.json"},
                    extra={"steps": args.steps, "final_log_prob": history[-1],
                           "calibration": flow.calibration})
    print(json.dumps({"flow": str(flow_path), "calibration": flow.calibration,
                      "final_log_prob": history[-1]}))
    return 0


def _check_flow_matches(flow_path: Path, cfg: RunConfig) -> None:
    from .tensor import load_checkpoint
    _, meta = load_checkpoint(flow_path)
    expect = {"dim": cfg.skeleton.joints * 3, "layers": cfg.model.flow_layers,
              "hidden": cfg.model.flow_hidden}
    actual = {k: meta.get(k) for k in expect}
    if actual != expect:
        raise ConfigError(f"flow checkpoint {flow_path} has {actual}, config expects {expect}")


def _check_corpus_matches(corpus, cfg: RunConfig, label: str) -> None:
    if corpus.skeleton.to_dict() != cfg.skeleton.to_dict():
        raise ConfigError(f"{label}: corpus skeleton differs from the config's skeleton")


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    corpus = load_corpus(args.corpus)
    _check_corpus_matches(corpus, cfg, "train")
    _check_flow_matches(Path(args.flow), cfg)
    flow = load_flow(args.flow)
    from .model import HiTDVAE
    model = HiTDVAE(cfg.model, seed=args.seed)
    out = _out_dir(args)
    history = fit(model, corpus, flow, cfg.weights, cfg.schedule,
                  seed=args.seed, out_dir=out)
    loss_figure(history, out / "loss_curves.png")
    final = out / "model.ckpt"
    from .tensor import save_checkpoint
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    save_checkpoint(final, arrays, meta={"kind": "hitdvae-model",
                                         "config": cfg.model.to_dict(),
                                         "epoch": cfg.schedule.epochs,
                                         "adam": None, "rng_state": None})
    _write_manifest(out, "train", args.seed, cfg,
                    {"corpus_manifest": Path(args.corpus) / "manifest.json",
                     "flow": Path(args.flow)},
                    extra={"steps": len(history),
                           "final_total_loss": history[-1].total if history else None})
    print(json.dumps({"checkpoint": str(final), "steps": len(history),
                      "final_total_loss": history[-1].total if history else None}))
    return 0


def _cmd_generate(args) -> int:
    cfg = load_config(args.config)
    model = load_model(args.checkpoint, cfg.model)
    clip = load_clip(args.input)
    obs = args.obs_frames if args.obs_frames is not None else cfg.schedule.obs_len
    horizon = args.horizon if args.horizon is not None else cfg.schedule.seq_len - obs
    k = args.samples if args.samples is not None else cfg.schedule.k_samples
    if clip.poses.frames < obs:
        raise CliUsageError(f"input clip has {clip.poses.frames} frames, "
                            f"observation needs {obs}")
    from .data import PoseSequence
    observed = PoseSequence(clip.poses.data[:obs], obs_len=obs)
    rollouts = generate(model, observed, horizon, k, seed=args.seed,
                        mode=args.mode, threads=args.threads)
    out = _out_dir(args)
    files = []
    for i, seq in enumerate(rollouts):
        gen_clip = MotionClip(skeleton=clip.skeleton, poses=seq, label=clip.label,
                              fps=clip.fps, source="generated",
                              meta={"sample": i, "seed": args.seed ^ i,
                                    "mode": args.mode})
        fname = f"sample_{i:03d}.mclip"
        save_clip(gen_clip, out / fname)
        files.append(fname)
    _write_manifest(out, "generate", args.seed, cfg,
                    {"checkpoint": Path(args.checkpoint), "input": Path(args.input)},
                    extra={"samples": files, "sample_seeds": [args.seed ^ i for i in range(k)],
                           "obs_frames": obs, "horizon": horizon, "mode": args.mode})
    print(json.dumps({"out": str(out), "samples": len(files)}))
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    corpus = load_corpus(args.corpus)
    _check_corpus_matches(corpus, cfg, "eval")
    model = load_model(args.checkpoint, cfg.model)
    obs = args.obs_frames if args.obs_frames is not None else cfg.schedule.obs_len
    horizon = args.horizon if args.horizon is not None else cfg.schedule.seq_len - obs
    k = args.samples if args.samples is not None else cfg.schedule.k_samples
    out = _out_dir(args)
    inputs = {"checkpoint": Path(args.checkpoint),
              "corpus_manifest": Path(args.corpus) / "manifest.json"}
    if args.classifier:
        classifier = load_classifier(args.classifier)
        held_out = None
        inputs["classifier"] = Path(args.classifier)
    else:
        from .trainer import training_windows
        pool = training_windows(corpus, obs + horizon)
        labels = _window_labels(corpus, obs + horizon)
        classifier, held_out = train_classifier(pool, labels, seed=args.seed)
        save_classifier(out / "classifier.ckpt", classifier)
    report = evaluate(model, corpus, classifier, obs_len=obs, horizon=horizon,
                      k_samples=k, seed=args.seed, mode=args.mode,
                      threads=args.threads)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(
        report.csv_header() + "\n" + report.csv_row() + "\n", encoding="utf-8")
    metrics_figure(report, out / "metrics.png")
    _write_manifest(out, "eval", args.seed, cfg, inputs,
                    extra={"obs_frames": obs, "horizon": horizon, "samples": k,
                           "classifier_held_out_acc": held_out})
    print(report.csv_header())
    print(report.csv_row())
    return 0


def _window_labels(corpus, seq_len: int) -> list[str]:
    from .trainer import training_windows  # same stride/window rule
    labels = []
    for clip in corpus.subset("train"):
        frames = clip.poses.frames
        if frames < seq_len:
            continue
        stride = max(1, seq_len // 2)
        starts = list(range(0, frames - seq_len + 1, stride))
        if (frames - seq_len) not in starts:
            starts.append(frames - seq_len)
        labels.extend([clip.label] * len(starts))
    return labels


def _cmd_gradcheck(args) -> int:
    err = micro_total_loss_gradcheck(seed=args.seed)
    result = {"max_rel_error": err, "threshold": 1e-4, "passed": bool(err < 1e-4)}
    print(json.dumps(result))
    if args.out:
        out = _out_dir(args)
        (out / "gradcheck.json").write_text(json.dumps(result, indent=1) + "\n",
                                            encoding="utf-8")
        _write_manifest(out, "gradcheck", args.seed, None, {})
    return 0 if result["passed"] else 1


def _cmd_render(args) -> int:
    clips = [load_clip(p) for p in args.input]
    skeleton = clips[0].skeleton
    frames = []
    if args.frames:
        frames = [int(x) for x in args.frames.split(",") if x != ""]
    else:
        t = clips[0].poses.frames
        frames = list(range(0, t, max(1, t // 8)))
    svg = render_svg([c.poses.data for c in clips], skeleton, frames,
                     plane=args.plane)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(svg, encoding="utf-8")
    print(json.dumps({"svg": str(args.out), "sequences": len(clips),
                      "frames": len(frames)}))
    return 0


# ----------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="hitdvae", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic labeled corpus")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--classes", default=",".join(sorted(GENERATORS)))
    s.add_argument("--clips-per-class", type=int, default=100)
    s.add_argument("--frames", type=int, default=40)
    s.add_argument("--fps", type=float, default=25.0)
    s.add_argument("--jitter", type=float, default=1.0)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("pretrain-flow", help="train the pose-prior flow")
    s.add_argument("--corpus", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--hidden", type=int, default=32)
    s.set_defaults(func=_cmd_pretrain_flow)

    s = sub.add_parser("train", help="train the generative model")
    s.add_argument("--config", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--flow", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("generate", help="roll out future motions")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="observation clip file")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--obs-frames", type=int, default=None)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--samples", type=int, default=None)
    s.add_argument("--mode", choices=("sample", "mean"), default="sample")
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=_cmd_generate)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--classifier", default=None)
    s.add_argument("--obs-frames", type=int, default=None)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--samples", type=int, default=None)
    s.add_argument("--mode", choices=("sample", "mean"), default="sample")
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("gradcheck", help="micro-config finite-difference suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("render", help="stick-figure SVG export")
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", default=None, help="comma-separated frame indices")
    s.add_argument("--plane", choices=("xy", "xz", "zy", "yz"), default="zy")
    s.set_defaults(func=_cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except Exception as e:  # all failures surface as machine-readable JSON
        payload = {"error": {"type": type(e).__name__, "message": str(e)}}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
