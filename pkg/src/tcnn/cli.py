"""``tcnn`` command-line entry point.

Exit codes: 0 success, 1 oracle/assertion failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import anchors as anchors_mod
from . import evaluation, formats, gradcheck, training
from .network import SKIP_SOURCES, get_preset
from .tensor_io import atomic_write, read_tensor, write_tensor

log = logging.getLogger("tcnn")

SCALES = {"paper": "paper_300x400", "desk": "desk_60x80"}
ANNOTATIONS = "annotations.txt"
VIDEO_DIR = "videos"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    "seed": "0", "threads": "1", "scale": "desk", "k": "40", "alpha": "0.2,0.5",
    "skip_source": "conv2", "threshold": "0.5", "nms": "0.3", "factor": "0.01",
}

LR_SCALES = {"paper": {}, "desk": training.DESK_LR_SCALES}


def resolve(args) -> dict:
    """Merge defaults, the ``--config`` file and command-line flags (flags win)."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg.update(formats.read_config(args.config))
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
    for key in ("seed", "threads", "scale", "k", "alpha", "skip_source"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = str(val)
    if cfg["scale"] not in SCALES and cfg["scale"] not in SCALES.values():
        raise UsageError(f"unknown scale {cfg['scale']!r}")
    if cfg["skip_source"] not in SKIP_SOURCES + ("none",):
        raise UsageError(f"unknown skip source {cfg['skip_source']!r}")
    return cfg


def preset_of(cfg):
    return get_preset(SCALES.get(cfg["scale"], cfg["scale"]))


def alphas_of(cfg) -> list[float]:
    try:
        return [float(a) for a in cfg["alpha"].split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"bad alpha list {cfg['alpha']!r}") from None


def train_config(cfg) -> training.TrainConfig:
    keys = {k: v for k, v in cfg.items() if k in training.TrainConfig.__dataclass_fields__}
    keys["seed"] = cfg["seed"]
    scale = cfg["scale"] if cfg["scale"] in SCALES else {v: k for k, v in SCALES.items()}[cfg["scale"]]
    for k, v in LR_SCALES[scale].items():
        keys.setdefault(k, v)
    if "total_batches" not in cfg:
        base = training.TrainConfig.scaled(float(cfg["factor"]))
        keys.setdefault("total_batches", str(base.total_batches))
        keys.setdefault("lr_drop_batches", str(base.lr_drop_batches))
    return training.TrainConfig.from_mapping(keys)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def save_dataset(directory, pairs) -> None:
    directory = Path(directory)
    for video, ann in pairs:
        write_tensor(directory / VIDEO_DIR / f"{ann.video_id}.tcnt", video)
    formats.write_annotations(directory / ANNOTATIONS, [a for _, a in pairs])


def load_dataset(directory):
    directory = Path(directory)
    anns = formats.read_annotations(directory / ANNOTATIONS)
    videos = [read_tensor(directory / VIDEO_DIR / f"{a.video_id}.tcnt") for a in anns]
    for v, a in zip(videos, anns):
        if v.ndim != 4 or v.shape[1] != a.num_frames:
            raise UsageError(f"video {a.video_id}: tensor {v.shape} does not match {a.num_frames} annotated frames")
    return videos, anns


def normalised_sizes(anns, frame_size) -> np.ndarray:
    fh, fw = frame_size
    return np.array([[(b[2] - b[0]) / fw, (b[3] - b[1]) / fh]
                     for a in anns for b in a.boxes if b is not None]).reshape(-1, 2)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    from .synth import SynthSpec, generate

    preset = preset_of(cfg)
    spec = SynthSpec(num_classes=args.classes, num_videos=args.videos, frame_size=preset.frame_size,
                     frames_per_video=args.frames, untrimmed=args.untrimmed,
                     distractor_rate=args.distractor_rate, seed=int(cfg["seed"]), id_prefix=args.prefix)
    save_dataset(args.out, generate(spec))
    print(f"wrote {spec.num_videos} videos to {args.out}")
    return 0


def cmd_anchors(args, cfg) -> int:
    anns = formats.read_annotations(args.annotations)
    k = args.num_anchors
    try:
        res = anchors_mod.kmeans_anchors(normalised_sizes(anns, preset_of(cfg).frame_size), k, int(cfg["seed"]))
    except anchors_mod.InsufficientBoxes as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    formats.write_anchors(args.out, res.anchors)
    print(f"wrote {len(res)} anchors to {args.out} after {res.iterations} iterations")
    return 0


def cmd_train(args, cfg) -> int:
    from .model import TCNN

    videos, anns = load_dataset(args.data)
    anchors = formats.read_anchors(args.anchors)
    tcfg = train_config(cfg)
    skip = None if cfg["skip_source"] == "none" else cfg["skip_source"]
    num_classes = args.classes or max(a.label for a in anns)
    model = TCNN(preset_of(cfg), anchors, num_classes, skip, seed=int(cfg["seed"]))
    result = training.alternate_train(model, training.Dataset(videos, anns), tcfg)
    model.save(args.out)
    training.write_loss_csv(Path(args.out) / "losses.csv", result.losses)
    print(f"trained {len(training.STAGES)} stages x {tcfg.total_batches} batches; checkpoint in {args.out}")
    return 0


def cmd_detect(args, cfg) -> int:
    from .model import TCNN
    from .pipeline import detect_videos

    model = TCNN.load(args.checkpoint)
    videos, anns = load_dataset(args.data)
    dets = detect_videos(model, videos, [a.video_id for a in anns], threshold=float(cfg["threshold"]),
                         k=int(cfg["k"]), nms=float(cfg["nms"]))
    formats.write_detections(args.out, dets)
    print(f"wrote {len(dets)} detections to {args.out}")
    return 0


def _csv(rows, cols) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerows(rows)
    return buf.getvalue()


def cmd_eval(args, cfg) -> int:
    dets = formats.read_detections(args.detections)
    anns = formats.read_annotations(args.annotations)
    out = Path(args.out)
    ap_rows, pr_rows, roc_rows = [], [], []
    for alpha in alphas_of(cfg):
        for metric, fn in (("frame", evaluation.frame_map), ("video", evaluation.video_map)):
            res = fn(dets, anns, alpha)
            for note in res.notes:
                print(f"note: {note}", file=sys.stderr)
            for c, ap in res.per_class.items():
                ap_rows.append([metric, alpha, c, f"{ap:.6f}"])
                cur = res.curves[c]
                pr_rows.extend([metric, alpha, c, f"{t:.6f}", f"{p:.6f}", f"{r:.6f}"]
                               for t, p, r in zip(cur.thresholds, cur.precision, cur.recall))
            ap_rows.append([metric, alpha, "mean", f"{res.mean:.6f}"])
        curve, auc = evaluation.roc_auc(dets, anns, alpha)
        ap_rows.append(["auc", alpha, "all", f"{auc:.6f}"])
        roc_rows.extend([alpha, f"{t:.6f}", f"{tp:.6f}", f"{fp:.6f}"]
                        for t, tp, fp in zip(curve.thresholds, curve.tpr, curve.fpr))
    atomic_write(out / "ap.csv", _csv(ap_rows, ["metric", "alpha", "class", "value"]))
    atomic_write(out / "pr_curves.csv", _csv(pr_rows, ["metric", "alpha", "class", "threshold", "precision", "recall"]))
    atomic_write(out / "roc.csv", _csv(roc_rows, ["alpha", "threshold", "tpr", "fpr"]))
    for row in ap_rows:
        print(" ".join(str(v) for v in row))
    return 0


def cmd_gradcheck(args, cfg) -> int:
    reports = gradcheck.run_checks(args.instances, int(cfg["seed"]))
    print(gradcheck.format_report(reports))
    return 0 if all(r.passed for r in reports) else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--scale", choices=sorted(SCALES))
    common.add_argument("--alpha", help="comma-separated IoU thresholds")
    common.add_argument("--k", type=int, help="linked sequences kept per video")
    common.add_argument("--skip-source", dest="skip_source", choices=SKIP_SOURCES + ("none",))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tcnn", description="Tube-CNN action detection on 3D feature cubes.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--videos", type=int, default=20)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--frames", type=int, default=24)
    s.add_argument("--untrimmed", action="store_true")
    s.add_argument("--distractor-rate", type=float, default=0.0)
    s.add_argument("--prefix", default="v")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("anchors", parents=[common], help="cluster anchor shapes")
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--num-anchors", type=int, default=12)
    s.set_defaults(func=cmd_anchors)

    s = sub.add_parser("train", parents=[common], help="alternating four-stage training")
    s.add_argument("--data", required=True)
    s.add_argument("--anchors", required=True)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--classes", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", parents=[common], help="detect actions in a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", parents=[common], help="score a detection file")
    s.add_argument("--detections", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--out", required=True, help="directory for the CSV reports")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient report")
    s.add_argument("--instances", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve(args)
        with threadpool_limits(int(cfg["threads"])):
            return args.func(args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except training.TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
