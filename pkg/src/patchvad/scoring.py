"""Cuboid scores, weighted fusion, and frame-level normality scores.

Per cuboid, three scores measure abnormality: the maximum absolute
reconstruction error (power alpha), and for each grid axis the mean
power-beta deviation between the one-hot true position and the softmax
estimate. Score maps of one frame triple are fused per grid position
with weights learned from the training set (1 minus the average training
score at that position). The frame-level score is the population
standard deviation of the fused map, then normalized by the per-video
maximum.

Fusion modes: "R" (reconstruction only), "xy" (position only, the mode
that survives decoder ablation), "Rxy" (everything).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .data import DEPTH, FrameStore, PATCH
from .errors import ConfigError, DataError, PatchVadError
from .model import ForwardOutputs, HybridModel

log = logging.getLogger(__name__)

ALPHA_DEFAULT = 1.0
BETA_DEFAULT = 2.0

MODES = {"R": ("R",), "xy": ("x", "y"), "Rxy": ("R", "x", "y")}


@dataclass
class ScoreMap:
    kind: str  # R | x | y | fused
    grid: np.ndarray  # [grid_h, grid_w]
    frame: int = 0
    vid: str = ""


@dataclass
class WeightMaps:
    """Per-kind fusion weights on the grid."""
    maps: dict[str, np.ndarray]
    alpha: float = ALPHA_DEFAULT
    beta: float = BETA_DEFAULT

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(sorted(self.maps))


def batch_cuboid_scores(values: np.ndarray, outputs: ForwardOutputs,
                        label_x: np.ndarray, label_y: np.ndarray,
                        alpha: float = ALPHA_DEFAULT,
                        beta: float = BETA_DEFAULT) -> dict[str, np.ndarray]:
    """Per-sample scores {R?, x, y} for a batch of cuboids."""
    n = values.shape[0]
    out = {}
    if outputs.reconstruction is not None:
        err = np.abs(values.astype(np.float64) - outputs.reconstruction)
        out["R"] = (err ** alpha).reshape(n, -1).max(axis=1)
    rows = np.arange(n)
    for kind, probs, labels in (("x", outputs.prob_x, label_x),
                                ("y", outputs.prob_y, label_y)):
        d = probs.astype(np.float64).copy()
        d[rows, labels] -= 1.0
        out[kind] = np.mean(np.abs(d) ** beta, axis=1)
    return out


def cuboid_scores(values: np.ndarray, outputs: ForwardOutputs,
                  label_x: int, label_y: int,
                  alpha: float = ALPHA_DEFAULT,
                  beta: float = BETA_DEFAULT) -> tuple[float | None, float, float]:
    """(s_R, s_x, s_y) for a single cuboid; s_R is None without a decoder."""
    single = ForwardOutputs(
        None if outputs.reconstruction is None
        else outputs.reconstruction.reshape(1, PATCH, PATCH, DEPTH),
        np.atleast_2d(outputs.prob_x), np.atleast_2d(outputs.prob_y))
    s = batch_cuboid_scores(values.reshape(1, PATCH, PATCH, DEPTH), single,
                            np.array([label_x]), np.array([label_y]),
                            alpha, beta)
    return (float(s["R"][0]) if "R" in s else None,
            float(s["x"][0]), float(s["y"][0]))


def _triple_batches_one(store: FrameStore, video: int, batch_cap: int):
    """Yield (video, [t...], values, lx, ly) covering whole frame triples."""
    g = store.grid_w * store.grid_h
    per = max(1, batch_cap // g)
    base = int(store._base[video])
    for lo in range(0, store.triples(video), per):
        ts = range(lo, min(lo + per, store.triples(video)))
        idx = np.arange(base + ts.start * g, base + ts.stop * g)
        vals, lx, ly = store.gather(idx)
        yield video, list(ts), vals, lx, ly


def _triple_batches(store: FrameStore, batch_cap: int = 3072):
    for v in range(store.n_videos):
        yield from _triple_batches_one(store, v, batch_cap)


def fit_weights(model: HybridModel, store: FrameStore,
                alpha: float = ALPHA_DEFAULT, beta: float = BETA_DEFAULT,
                batch_cap: int = 3072) -> WeightMaps:
    """Streamed per-position training-score averages, turned into weights."""
    if store.total_cuboids == 0:
        raise ConfigError("cannot fit fusion weights on an empty training set")
    gh, gw = store.grid_h, store.grid_w
    kinds = ("R", "x", "y") if model.config.use_decoder else ("x", "y")
    sums = {k: np.zeros((gh, gw)) for k in kinds}
    count = np.zeros((gh, gw), dtype=np.int64)
    for _, _, vals, lx, ly in _triple_batches(store, batch_cap):
        outputs = model.forward_generator(vals, "eval")
        scores = batch_cuboid_scores(vals, outputs, lx, ly, alpha, beta)
        for k in kinds:
            np.add.at(sums[k], (ly, lx), scores[k])
        np.add.at(count, (ly, lx), 1)
    if np.any(count == 0):
        raise ConfigError("training set leaves grid positions uncovered")
    maps = {}
    for k in kinds:
        w = 1.0 - sums[k] / count
        if np.any(w < 0):
            log.warning("clamping %d negative fusion weights for kind %s",
                        int(np.sum(w < 0)), k)
            w = np.maximum(w, 0.0)
        maps[k] = w
    return WeightMaps(maps, alpha, beta)


def fuse(maps: dict[str, np.ndarray], weights: WeightMaps,
         kinds: tuple[str, ...]) -> np.ndarray:
    """Elementwise weighted sum of the selected score maps."""
    fused = None
    for k in kinds:
        if k not in maps or k not in weights.maps:
            raise ConfigError(f"score kind {k!r} unavailable for fusion")
        grid = maps[k]
        if fused is not None and grid.shape != fused.shape:
            raise PatchVadError(f"score map shape mismatch for kind {k!r}")
        if grid.shape != weights.maps[k].shape:
            raise PatchVadError(f"weight map shape mismatch for kind {k!r}")
        term = weights.maps[k] * grid
        fused = term if fused is None else fused + term
    return fused


def frame_score(grid: np.ndarray) -> float:
    """Population standard deviation of the fused map."""
    return float(np.std(grid.astype(np.float64)))


def normalize_video(scores) -> np.ndarray:
    """Divide by the per-video maximum; an all-zero video stays all zero."""
    arr = np.asarray(scores, dtype=np.float64)
    m = arr.max() if arr.size else 0.0
    return arr / m if m > 0 else np.zeros_like(arr)


def available_modes(model: HybridModel) -> list[str]:
    return list(MODES) if model.config.use_decoder else ["xy"]


def score_video(model: HybridModel, store: FrameStore, video: int,
                weights: WeightMaps, batch_cap: int = 3072,
                collect_maps: bool = False) -> dict:
    """Frame scores for one video, every fusion mode, with the tail rule.

    Triples start at frames 0..n-3; the last two frames inherit the final
    computed score so every frame has one. Returns {"frames": n,
    "scores": {mode: [n]}, "normalized": {mode: [n]}, "maps": optional}.
    """
    modes = available_modes(model)
    n = store.manifest.videos[video].n_frames
    gh, gw = store.grid_h, store.grid_w
    per_mode = {m: [] for m in modes}
    fused_maps = {m: [] for m in modes} if collect_maps else None
    for v, ts, vals, lx, ly in _triple_batches_one(store, video, batch_cap):
        outputs = model.forward_generator(vals, "eval")
        scores = batch_cuboid_scores(vals, outputs, lx, ly,
                                     weights.alpha, weights.beta)
        g = gh * gw
        for bi, t in enumerate(ts):
            sl = slice(bi * g, (bi + 1) * g)
            maps = {k: s[sl].reshape(gh, gw) for k, s in scores.items()}
            for m in modes:
                fused = fuse(maps, weights, MODES[m])
                per_mode[m].append(frame_score(fused))
                if collect_maps:
                    fused_maps[m].append(fused)
    out_scores = {}
    out_norm = {}
    for m in modes:
        s = per_mode[m]
        s = s + [s[-1]] * (n - len(s))
        arr = np.asarray(s)
        out_scores[m] = arr
        out_norm[m] = normalize_video(arr)
    result = {"frames": n, "scores": out_scores, "normalized": out_norm}
    if collect_maps:
        result["maps"] = fused_maps
    return result


# ----- persistence -----

def write_weight_maps(path, weights: WeightMaps, checkpoint_hash: str) -> None:
    doc = {"checkpoint": checkpoint_hash,
           "alpha": weights.alpha, "beta": weights.beta,
           "kinds": list(weights.kinds),
           "maps": {k: weights.maps[k].tolist() for k in weights.kinds}}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_weight_maps(path, expect_checkpoint_hash: str | None = None) -> WeightMaps:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read weight maps {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"weight maps {path} not valid JSON: {e}") from e
    if expect_checkpoint_hash is not None and doc.get("checkpoint") != \
            expect_checkpoint_hash:
        raise DataError(f"weight maps {path} belong to checkpoint "
                        f"{doc.get('checkpoint')!r}, not the one being scored")
    maps = {k: np.asarray(v, dtype=np.float64) for k, v in doc["maps"].items()}
    return WeightMaps(maps, float(doc["alpha"]), float(doc["beta"]))


def write_score_table(path, video_id: str, result: dict, mode: str,
                      checkpoint_hash: str) -> None:
    """Comma-separated frame scores with provenance comment headers."""
    modes = list(result["scores"])
    cols = ["frame"] + [f"s_{m}" for m in modes] + [f"n_{m}" for m in modes]
    lines = [f"# checkpoint {checkpoint_hash}",
             f"# mode {mode}",
             f"# video {video_id}",
             ",".join(cols)]
    for t in range(result["frames"]):
        row = [str(t)]
        row += [repr(float(result["scores"][m][t])) for m in modes]
        row += [repr(float(result["normalized"][m][t])) for m in modes]
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_score_table(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (metadata from comment headers, column arrays)."""
    meta = {}
    header = None
    rows = []
    try:
        with open(path) as fh:
            for ln in fh:
                ln = ln.rstrip("\n")
                if not ln:
                    continue
                if ln.startswith("#"):
                    parts = ln[1:].strip().split(None, 1)
                    if len(parts) == 2:
                        meta[parts[0]] = parts[1]
                    continue
                if header is None:
                    header = ln.split(",")
                    continue
                rows.append([float(x) for x in ln.split(",")])
    except OSError as e:
        raise DataError(f"cannot read score table {path}: {e}") from e
    except ValueError as e:
        raise DataError(f"malformed score table {path}: {e}") from e
    if header is None or not rows:
        raise DataError(f"score table {path} has no data")
    arr = np.asarray(rows)
    return meta, {name: arr[:, i] for i, name in enumerate(header)}
