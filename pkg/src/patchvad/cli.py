"""Command-line pipeline: synthesize, train, score, evaluate, export.

Exit codes are stable: 0 success, 1 usage or configuration problem,
2 data/ingestion problem, 3 numeric failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import config_hash, file_hash, load_checkpoint, read_manifest
from .data import FrameStore, SynthSpec, load_manifest, synth_corpus
from .errors import (ConfigError, DataError, EvaluationError, NumericError,
                     PatchVadError)
from .evaluation import (LabeledScores, append_summary, export_curve, pr_ap,
                         roc_auc)
from .losses import LossWeights
from .model import ModelConfig, export_filters
from .scoring import (available_modes, fit_weights, read_score_table,
                      read_weight_maps, score_video, write_score_table,
                      write_weight_maps)
from .trainer import TrainConfig, train


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; remap them onto exit code 1."""

    def error(self, message):
        raise ConfigError(message)


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"size must look like 80x60, got {text!r}")
    try:
        w, h = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"size must be two integers, got {text!r}")
    return w, h


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty; "
                          "pass --force to write into it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _checkpoint_id(path, model) -> str:
    """Config hash plus file hash prefix; stamped on every derived artifact."""
    return f"{config_hash(model.config)}.{file_hash(path)[:12]}"


# ----- subcommands -----

def cmd_synth(args) -> int:
    w, h = _parse_size(args.size)
    _prepare_out(Path(args.out), args.force)
    spec = SynthSpec(out_dir=args.out, frame_w=w, frame_h=h,
                     train_videos=args.train_videos,
                     test_videos=args.test_videos,
                     frames_per_video=args.frames, seed=args.seed,
                     anomaly_kind=args.anomaly_kind,
                     anomaly_cells=args.anomaly_cells)
    train_m, test_m = synth_corpus(spec)
    print(train_m)
    print(test_m)
    return 0


def cmd_train(args) -> int:
    weights = LossWeights(lambda_l2=args.lambda_l2,
                          lambda_grad=args.lambda_grad,
                          lambda_G=args.lambda_G,
                          lambda_R=args.lambda_R,
                          lambda_C=args.lambda_C)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         lr_generator=args.lr_generator,
                         lr_discriminator=args.lr_discriminator,
                         seed=args.seed, weights=weights,
                         checkpoint_every=args.checkpoint_every)
    out = Path(args.out)
    if args.resume is None:
        _prepare_out(out, args.force)
    manifest = load_manifest(args.manifest)
    use_adversarial = (args.adversarial if args.adversarial is not None
                       else args.decoder)
    model_config = ModelConfig(frame_w=manifest.frame_size[0],
                               frame_h=manifest.frame_size[1],
                               use_decoder=args.decoder,
                               use_adversarial=use_adversarial)
    ckpt = train(args.manifest, config, out, model_config=model_config,
                 resume_from=args.resume)
    print(f"checkpoint {ckpt}")
    rows = (out / "losses.csv").read_text().strip().split("\n")
    if len(rows) > 1:
        print(f"final {rows[0]}")
        print(f"final {rows[-1]}")
    return 0


def cmd_score(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.mode not in available_modes(model):
        raise ConfigError(
            f"mode {args.mode} not available for this checkpoint "
            f"(has: {', '.join(available_modes(model))})")
    out = _prepare_out(Path(args.out), args.force)
    ckpt_id = _checkpoint_id(args.checkpoint, model)
    cache_key = f"{ckpt_id}:{file_hash(args.train_manifest)[:12]}"
    cache = Path(str(args.checkpoint) + ".weights.json")
    weights = None
    if cache.exists():
        try:
            weights = read_weight_maps(cache, cache_key)
        except DataError:
            weights = None  # stale cache from another checkpoint/corpus
    if weights is None:
        weights = fit_weights(model, FrameStore(load_manifest(args.train_manifest)),
                              batch_cap=args.batch_cap)
        write_weight_maps(cache, weights, cache_key)
    test_store = FrameStore(load_manifest(args.test_manifest))
    for video in range(len(test_store.manifest.videos)):
        vid = test_store.manifest.videos[video].vid
        result = score_video(model, test_store, video, weights,
                             batch_cap=args.batch_cap,
                             collect_maps=args.dump_maps)
        write_score_table(out / f"score_{vid}.csv", vid, result, args.mode,
                          ckpt_id)
        if args.dump_maps:
            stacked = {m: np.stack(g) for m, g in result["maps"].items()}
            np.savez(out / f"maps_{vid}.npz", **stacked)
        print(f"{vid} frames={result['frames']}")
    return 0


def cmd_eval(args) -> int:
    tables = sorted(Path(args.scores).glob("score_*.csv"))
    if not tables:
        raise DataError(f"no score tables under {args.scores}")
    manifest = load_manifest(args.manifest)
    truth = {v.vid: v.ground_truth for v in manifest.videos}
    items = []
    checkpoints, modes = set(), set()
    for table in tables:
        meta, cols = read_score_table(table)
        vid = meta["video"]
        modes.add(meta["mode"])
        checkpoints.add(meta["checkpoint"])
        if truth.get(vid) is None:
            raise EvaluationError(f"video {vid} has no ground truth in "
                                  f"{args.manifest}")
        items.append((vid, cols[f"n_{meta['mode']}"], truth[vid]))
    if len(modes) != 1 or len(checkpoints) != 1:
        raise DataError("score tables mix modes or checkpoints; "
                        "evaluate one scoring run at a time")
    data = LabeledScores.concat(items)
    out = Path(args.out) if args.out else Path(args.scores)
    out.mkdir(parents=True, exist_ok=True)
    summary = out / "eval_summary.txt"
    with open(summary, "w") as fh:
        fh.write(f"checkpoint {checkpoints.pop()}\n")
        fh.write(f"mode {modes.pop()}\n")
    results = {}
    if args.metric in ("auc", "both"):
        results["auc"] = roc_auc(data)
        export_curve(data, "roc", out / "roc_curve.csv")
    if args.metric in ("ap", "both"):
        results["ap"] = pr_ap(data)
        export_curve(data, "pr", out / "pr_curve.csv")
    for name, value in results.items():
        append_summary(summary, name, value, data)
        print(f"{name} {value:.6f}")
    return 0


def cmd_filters(args) -> int:
    from PIL import Image
    model = load_checkpoint(args.checkpoint)
    grid = export_filters(model, scale=args.scale)
    Image.fromarray(grid).save(args.out)
    print(args.out)
    return 0


def cmd_dump(args) -> int:
    config, entries, blob_size, _ = read_manifest(args.checkpoint)
    print(json.dumps(config.to_dict(), sort_keys=True))
    for name, shape, _ in entries:
        print(f"{name} {'x'.join(map(str, shape))}")
    print(f"blob {blob_size} bytes")
    return 0


# ----- parser wiring -----

def build_parser() -> _Parser:
    parser = _Parser(prog="patchvad",
                     description="Frame-level video anomaly detection from "
                                 "grayscale frame-triple cuboids.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--size", default="80x60", help="frame WxH, multiples of 10")
    p.add_argument("--train-videos", type=int, default=4)
    p.add_argument("--test-videos", type=int, default=2)
    p.add_argument("--frames", type=int, default=100, help="frames per video")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--anomaly-kind", choices=("invert", "permute"),
                   default="invert")
    p.add_argument("--anomaly-cells", type=int, default=6)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=3072)
    p.add_argument("--lr-generator", type=float, default=2e-4)
    p.add_argument("--lr-discriminator", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-l2", type=float, default=1.0)
    p.add_argument("--lambda-grad", type=float, default=1.0 / 3.0)
    p.add_argument("--lambda-G", type=float, default=0.25)
    p.add_argument("--lambda-R", type=float, default=1.0)
    p.add_argument("--lambda-C", type=float, default=1.0)
    p.add_argument("--decoder", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--adversarial", action=argparse.BooleanOptionalAction,
                   default=None, help="defaults to the decoder setting")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a test corpus with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-manifest", required=True,
                   help="corpus the fusion weights are fitted on")
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("R", "xy", "Rxy"), default="Rxy")
    p.add_argument("--batch-cap", type=int, default=3072)
    p.add_argument("--dump-maps", action="store_true",
                   help="also write per-frame fused score maps")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="frame-level metrics from score tables")
    p.add_argument("--scores", required=True, help="directory of score tables")
    p.add_argument("--manifest", required=True,
                   help="test manifest carrying ground truth")
    p.add_argument("--metric", choices=("auc", "ap", "both"), default="both")
    p.add_argument("--out", default=None,
                   help="defaults to the scores directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("filters", help="export first-layer filters as an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=12)
    p.set_defaults(func=cmd_filters)

    p = sub.add_parser("dump", help="print a checkpoint's config and tensors")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except PatchVadError as exc:  # base-class fallback: internal invariant broke
        print(f"error: {exc}", file=sys.stderr)
        return 3
