"""Dataset ingestion, cuboid extraction, batch assembly, synthetic corpora.

A dataset is a JSON manifest next to per-video directories of numbered
image files. Frames are converted to grayscale luma, bilinearly resized
to the manifest's frame size, and scaled to [0,1]. Training samples are
10x10x3 spatio-temporal cuboids: a 10x10 patch cut from the same grid
cell of three consecutive frames, labeled with its grid column l_x and
row l_y.

Manifest format:

    {"split": "train", "frame_size": [160, 120],
     "videos": [{"id": "v000", "frames": "v000/*.png",
                 "ground_truth": "v000_gt.txt" or null}, ...]}

Paths are relative to the manifest's directory; globs are sorted. Ground
truth holds one 0/1 line per frame (test split).
"""

from __future__ import annotations

import glob as globmod
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

PATCH = 10
DEPTH = 3


@dataclass
class VideoEntry:
    vid: str
    frame_paths: list[str]
    ground_truth: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)


@dataclass
class DatasetManifest:
    split: str
    frame_size: tuple[int, int]  # (W, H)
    videos: list[VideoEntry]
    root: str = "."
    path: str = ""

    @property
    def grid_w(self) -> int:
        return self.frame_size[0] // PATCH

    @property
    def grid_h(self) -> int:
        return self.frame_size[1] // PATCH


def load_manifest(path) -> DatasetManifest:
    path = os.fspath(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e
    root = os.path.dirname(os.path.abspath(path))
    try:
        split = raw["split"]
        fw, fh_ = int(raw["frame_size"][0]), int(raw["frame_size"][1])
        videos_raw = raw["videos"]
    except (KeyError, TypeError, IndexError) as e:
        raise DataError(f"manifest {path} missing required field: {e}") from e
    if split not in ("train", "test"):
        raise DataError(f"manifest {path}: split must be train or test, got {split!r}")
    if fw % PATCH or fh_ % PATCH or fw < PATCH or fh_ < PATCH:
        raise DataError(f"manifest {path}: frame size {fw}x{fh_} not divisible by 10")
    videos = []
    for v in videos_raw:
        vid = v["id"]
        frames = sorted(globmod.glob(os.path.join(root, v["frames"])))
        if len(frames) < DEPTH:
            raise DataError(
                f"video {vid!r} has {len(frames)} frames; needs at least {DEPTH}")
        gt = None
        gt_rel = v.get("ground_truth")
        if gt_rel is not None:
            gt = _read_ground_truth(os.path.join(root, gt_rel))
            if len(gt) != len(frames):
                raise DataError(
                    f"video {vid!r}: {len(gt)} ground-truth labels for "
                    f"{len(frames)} frames")
        videos.append(VideoEntry(vid, frames, gt))
    if not videos:
        raise DataError(f"manifest {path} lists no videos")
    return DatasetManifest(split, (fw, fh_), videos, root, path)


def _read_ground_truth(path: str) -> np.ndarray:
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as e:
        raise DataError(f"cannot read ground truth {path}: {e}") from e
    out = np.empty(len(lines), dtype=np.int64)
    for i, ln in enumerate(lines):
        if ln not in ("0", "1"):
            raise DataError(f"{path}:{i + 1}: ground-truth line must be 0 or 1")
        out[i] = int(ln)
    return out


def bilinear_resize(img: np.ndarray, target_wh: tuple[int, int]) -> np.ndarray:
    """Resize [H,W] with half-pixel-center sampling and edge clamping."""
    h, w = img.shape
    tw, th = target_wh
    if (w, h) == (tw, th):
        return img.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo)

    y0, y1, wy = coords(h, th)
    x0, x1, wx = coords(w, tw)
    wy = wy[:, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def load_frame(path, target_wh: tuple[int, int]) -> np.ndarray:
    """Decode an image to grayscale [H,W,1] in [0,1] at the target size."""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I", "I;16", "F"):
                arr = np.asarray(im, dtype=np.float64)
                if im.mode == "L":
                    arr /= 255.0
                elif im.mode in ("I", "I;16"):
                    arr /= 65535.0
            else:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                arr = (0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1]
                       + 0.114 * rgb[:, :, 2])
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise DataError(f"cannot decode frame {path}: {e}") from e
    return bilinear_resize(arr, target_wh)[:, :, None]


@dataclass
class Cuboid:
    """One labeled 10x10x3 training sample."""
    values: np.ndarray
    l_x: int
    l_y: int
    vid: str = ""
    start: int = 0


def extract_cuboids(f0: np.ndarray, f1: np.ndarray, f2: np.ndarray,
                    vid: str = "", start: int = 0) -> list[Cuboid]:
    """Cut three same-sized frames into grid cuboids, row-major."""
    if not (f0.shape == f1.shape == f2.shape):
        raise DataError(f"frame shape mismatch: {f0.shape} {f1.shape} {f2.shape}")
    h, w = f0.shape[:2]
    if h % PATCH or w % PATCH:
        raise DataError(f"frame size {w}x{h} not divisible by {PATCH}")
    stack = np.concatenate([np.atleast_3d(f) for f in (f0, f1, f2)], axis=2)
    out = []
    for j in range(h // PATCH):
        for i in range(w // PATCH):
            vals = stack[j * PATCH:(j + 1) * PATCH, i * PATCH:(i + 1) * PATCH, :]
            out.append(Cuboid(vals.copy(), i, j, vid, start))
    return out


class FrameStore:
    """All frames of a dataset in memory, sliced into grid patches.

    Per video, frames are stored as [n, grid_h, grid_w, 10, 10] float32 so
    a cuboid gather is pure fancy indexing. The flat cuboid index space is
    video-major, then triple start, then grid row-major cell.
    """

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.grid_w, self.grid_h = manifest.grid_w, manifest.grid_h
        self._patches = []
        self._starts = []  # triples per video
        base = [0]
        g = self.grid_w * self.grid_h
        for v in manifest.videos:
            frames = np.stack(
                [load_frame(p, manifest.frame_size)[:, :, 0] for p in v.frame_paths]
            ).astype(np.float32)
            n, h, w = frames.shape
            self._patches.append(
                np.ascontiguousarray(
                    frames.reshape(n, self.grid_h, PATCH, self.grid_w, PATCH)
                    .transpose(0, 1, 3, 2, 4)))
            self._starts.append(n - DEPTH + 1)
            base.append(base[-1] + self._starts[-1] * g)
        self._base = np.asarray(base, dtype=np.int64)
        if self.total_cuboids == 0:
            raise DataError("dataset yields no cuboids")

    @property
    def total_cuboids(self) -> int:
        return int(self._base[-1])

    @property
    def n_videos(self) -> int:
        return len(self._patches)

    def triples(self, video: int) -> int:
        return self._starts[video]

    def gather(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(values [N,10,10,3], l_x, l_y) for flat cuboid indices."""
        flat = np.asarray(flat, dtype=np.int64)
        g = self.grid_w * self.grid_h
        v = np.searchsorted(self._base, flat, side="right") - 1
        rem = flat - self._base[v]
        t = rem // g
        cell = rem % g
        ly = cell // self.grid_w
        lx = cell % self.grid_w
        vals = np.empty((len(flat), PATCH, PATCH, DEPTH), dtype=np.float32)
        for vid in np.unique(v):
            sel = np.nonzero(v == vid)[0]
            p = self._patches[vid]
            tt, jj, ii = t[sel], ly[sel], lx[sel]
            for k in range(DEPTH):
                vals[sel, :, :, k] = p[tt + k, jj, ii]
        return vals, lx, ly

    def frame_cells(self, video: int, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All grid cuboids of one frame triple, row-major cell order."""
        g = self.grid_w * self.grid_h
        base = int(self._base[video]) + t * g
        return self.gather(np.arange(base, base + g))


def epoch_permutation(store: FrameStore, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(store.total_cuboids)


def iterate_batches(store: FrameStore, perm: np.ndarray, batch_size: int,
                    start_batch: int = 0):
    """Yield (values, l_x, l_y) batches; the last partial batch is emitted."""
    if batch_size <= 0:
        raise DataError(f"batch size must be positive, got {batch_size}")
    for lo in range(start_batch * batch_size, len(perm), batch_size):
        yield store.gather(perm[lo:lo + batch_size])


def batches(store: FrameStore, batch_size: int, rng: np.random.Generator):
    """One shuffled epoch over every (video, start, position) triple."""
    yield from iterate_batches(store, epoch_permutation(store, rng), batch_size)


# ----- synthetic corpus -----

@dataclass
class SynthSpec:
    """Recipe for a deterministic synthetic corpus.

    Normal frames tile the grid with a brightness gradient that encodes
    the column and a drifting stripe texture whose frequency and
    amplitude encode the row, so each axis of the position is learnable
    on its own. Test videos invert (or permute) a fixed set of cells
    during a marked interval.
    """
    out_dir: str
    frame_w: int = 80
    frame_h: int = 60
    train_videos: int = 4
    test_videos: int = 2
    frames_per_video: int = 100
    seed: int = 0
    anomaly_kind: str = "invert"  # or "permute"
    anomaly_cells: int = 6

    def __post_init__(self):
        if self.frame_w % PATCH or self.frame_h % PATCH:
            raise DataError("synthetic frame size must be divisible by 10")
        if self.anomaly_kind not in ("invert", "permute"):
            raise DataError(f"unknown anomaly kind {self.anomaly_kind!r}")
        if self.frames_per_video < DEPTH:
            raise DataError("videos need at least 3 frames")


def _normal_frame(spec: SynthSpec, phase: float, t: int) -> np.ndarray:
    # each axis gets its own cue: the column sets the cell's mean brightness,
    # the row sets the frequency and amplitude of a vertical stripe pattern;
    # whole-period stripes average to zero so the cues never mix
    gw, gh = spec.frame_w // PATCH, spec.frame_h // PATCH
    vv = np.tile(np.arange(PATCH)[:, None], (1, PATCH))
    frame = np.empty((spec.frame_h, spec.frame_w))
    for j in range(gh):
        for i in range(gw):
            mu = 0.2 + 0.6 * i / max(gw - 1, 1)
            b = 1 + (j % 3)
            amp = 0.06 + 0.04 * (j // 3)
            tex = amp * np.sin(2 * np.pi * b * vv / PATCH + phase + 0.15 * t)
            cell = np.clip(mu + tex, 0.0, 1.0)
            frame[j * PATCH:(j + 1) * PATCH, i * PATCH:(i + 1) * PATCH] = cell
    return frame


def _apply_anomaly(frame: np.ndarray, cells: np.ndarray, kind: str,
                   gw: int) -> np.ndarray:
    out = frame.copy()

    def block(c):
        j, i = divmod(int(c), gw)
        return slice(j * PATCH, (j + 1) * PATCH), slice(i * PATCH, (i + 1) * PATCH)

    if kind == "invert":
        for c in cells:
            sy, sx = block(c)
            out[sy, sx] = 1.0 - out[sy, sx]
    else:  # cyclic content swap between the chosen cells
        sources = [frame[block(c)[0], block(c)[1]].copy() for c in cells]
        for pos, c in enumerate(cells):
            sy, sx = block(c)
            out[sy, sx] = sources[(pos + 1) % len(cells)]
    return out


def synth_corpus(spec: SynthSpec) -> tuple[str, str]:
    """Write the corpus to disk; returns (train manifest path, test manifest path)."""
    os.makedirs(spec.out_dir, exist_ok=True)
    gw = spec.frame_w // PATCH
    gh = spec.frame_h // PATCH
    manifests = {}
    for split, count in (("train", spec.train_videos), ("test", spec.test_videos)):
        videos = []
        for v in range(count):
            vid = f"{split}_{v:03d}"
            vdir = os.path.join(spec.out_dir, vid)
            os.makedirs(vdir, exist_ok=True)
            rng = np.random.default_rng([spec.seed, 0 if split == "train" else 1, v])
            phase = float(rng.uniform(0, 2 * np.pi))
            n = spec.frames_per_video
            gt = np.zeros(n, dtype=np.int64)
            cells = rng.choice(gw * gh, size=min(spec.anomaly_cells, gw * gh),
                               replace=False) if spec.anomaly_cells else np.empty(0)
            lo, hi = int(0.4 * n), int(0.6 * n)
            for t in range(n):
                frame = _normal_frame(spec, phase, t)
                if split == "test" and len(cells) and lo <= t <= hi:
                    frame = _apply_anomaly(frame, cells, spec.anomaly_kind, gw)
                    gt[t] = 1
                img = Image.fromarray(
                    np.round(frame * 255.0).astype(np.uint8), mode="L")
                img.save(os.path.join(vdir, f"frame_{t:04d}.png"))
            entry = {"id": vid, "frames": f"{vid}/*.png", "ground_truth": None}
            if split == "test":
                gt_rel = f"{vid}_gt.txt"
                with open(os.path.join(spec.out_dir, gt_rel), "w") as fh:
                    fh.write("\n".join(str(int(x)) for x in gt) + "\n")
                entry["ground_truth"] = gt_rel
            videos.append(entry)
        mpath = os.path.join(spec.out_dir, f"{split}_manifest.json")
        with open(mpath, "w") as fh:
            json.dump({"split": split,
                       "frame_size": [spec.frame_w, spec.frame_h],
                       "videos": videos}, fh, indent=1)
            fh.write("\n")
        manifests[split] = mpath
    return manifests["train"], manifests["test"]
