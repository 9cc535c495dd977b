"""Alternating generator/discriminator optimization with transactional steps.

Each step snapshots every persistent array first. When adversarial
training is on, the discriminator takes one SGD update (real batch, then
the current reconstructions) before the generator's Adam update; the
generator's adversarial gradient flows through a fresh discriminator
forward so it sees the just-updated weights. A non-finite loss or
gradient anywhere aborts the step: the snapshot is restored, the
incident is logged, and training continues with the next batch.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import file_hash, load_checkpoint, save_checkpoint
from .data import FrameStore, epoch_permutation, iterate_batches, load_manifest
from .errors import ConfigError
from .losses import (LossReport, LossWeights,
                     adversarial_generator_loss_backward,
                     classification_loss_backward, discriminator_loss,
                     discriminator_loss_backward, reconstruction_loss_backward)
from .model import HybridModel, ModelConfig, generator_loss_from_outputs
from .optim import Adam, Sgd

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step") + LossReport.COLUMNS


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 3072
    lr_generator: float = 2e-4
    lr_discriminator: float = 1e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0  # epochs between periodic saves, 0 = final only

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ConfigError("learning rates must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint cadence cannot be negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


class Trainer:
    def __init__(self, model: HybridModel, store: FrameStore,
                 config: TrainConfig, out_dir):
        self.model = model
        self.store = store
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.adversarial = model.config.use_adversarial
        # with the discriminator off its loss term must not exist at all
        self.weights = (config.weights if self.adversarial
                        else replace(config.weights, lambda_G=0.0))
        self.opt_g = Adam(model.generator_params(), lr=config.lr_generator)
        self.opt_d = (Sgd(model.discriminator_params(), lr=config.lr_discriminator)
                      if self.adversarial else None)
        self.shuffle_rng = np.random.default_rng([config.seed, 1])
        self.model_rng = np.random.default_rng([config.seed, 2])
        self.epoch = 0
        self.batch_in_epoch = 0
        self.step = 0
        self.perm: np.ndarray | None = None
        self.incidents: list[str] = []

    # ----- state snapshot / rollback -----

    def _all_params(self):
        out = list(self.opt_g.params)
        if self.opt_d is not None:
            out.extend(self.opt_d.params)
        return out

    def _snapshot(self):
        tensors = [arr.copy() for _, arr in self.model.named_tensors()]
        slots = [(None if p.m is None else p.m.copy(),
                  None if p.v is None else p.v.copy())
                 for p in self._all_params()]
        return tensors, slots, self.opt_g.t

    def _restore(self, snap) -> None:
        tensors, slots, t = snap
        for (_, arr), saved in zip(self.model.named_tensors(), tensors):
            arr[...] = saved
        for p, (m, v) in zip(self._all_params(), slots):
            p.m, p.v = m, v
        self.opt_g.t = t

    def _incident(self, what: str) -> None:
        msg = (f"epoch {self.epoch} batch {self.batch_in_epoch}: "
               f"non-finite {what}; step rolled back")
        self.incidents.append(msg)
        log.error(msg)
        with open(self.out_dir / "incidents.log", "a") as fh:
            fh.write(msg + "\n")

    @staticmethod
    def _grads_finite(params) -> bool:
        return all(np.isfinite(p.grad).all() for p in params)

    # ----- one optimization step -----

    def train_step(self, vals: np.ndarray, lx: np.ndarray,
                   ly: np.ndarray) -> LossReport | None:
        """One D update (if adversarial) then one G update; None = rolled back."""
        snap = self._snapshot()
        model, w = self.model, self.weights
        out = model.forward_generator(vals, "train", rng=self.model_rng)

        d_loss = 0.0
        if self.adversarial:
            self.opt_d.zero_grad()
            d_real = model.forward_discriminator(vals, "train")
            # the loss splits per input, so each backward uses one side only
            dd_real, _ = discriminator_loss_backward(d_real, d_real)
            model.backward_discriminator(dd_real)
            d_fake = model.forward_discriminator(out.reconstruction.copy(), "train")
            _, dd_fake = discriminator_loss_backward(d_fake, d_fake)
            model.backward_discriminator(dd_fake)
            d_loss = discriminator_loss(d_real, d_fake)
            if not np.isfinite(d_loss) or not self._grads_finite(self.opt_d.params):
                self._restore(snap)
                self._incident("discriminator loss or gradient")
                return None
            self.opt_d.step()

        self.opt_g.zero_grad()
        dpx, dpy = classification_loss_backward(out.prob_x, out.prob_y, lx, ly)
        dpx *= w.lambda_C
        dpy *= w.lambda_C
        d_recon = None
        d_fake_g = None
        if model.config.use_decoder:
            d_recon = w.lambda_R * reconstruction_loss_backward(
                vals, out.reconstruction, w)
        if self.adversarial:
            d_fake_g = model.forward_discriminator(out.reconstruction, "train")
            dd = adversarial_generator_loss_backward(d_fake_g, w.lambda_G)
            d_recon = d_recon + model.backward_discriminator(dd, need_dx=True)
        rep = generator_loss_from_outputs(vals, out, lx, ly, w, d_fake=d_fake_g)
        rep.discriminator = d_loss
        model.backward_generator(out, d_recon, dpx, dpy)
        if not np.isfinite(rep.total_G) or not self._grads_finite(self.opt_g.params):
            self._restore(snap)
            self._incident("generator loss or gradient")
            return None
        self.opt_g.step()
        self.step += 1
        return rep

    # ----- logging -----

    def _log_row(self, rep: LossReport) -> None:
        path = self.out_dir / "losses.csv"
        if not path.exists():
            path.write_text(",".join(LOG_COLUMNS) + "\n")
        cells = [str(self.epoch), str(self.step)]
        cells += [f"{v:.17g}" for v in rep.as_row()]
        with open(path, "a") as fh:
            fh.write(",".join(cells) + "\n")

    # ----- persistence -----

    def save(self, tag: str) -> Path:
        """Checkpoint plus a resume sidecar capturing optimizer and rng state."""
        path = self.out_dir / f"checkpoint_{tag}.ckpt"
        save_checkpoint(path, self.model)
        arrays = {}
        if self.perm is not None:
            arrays["perm"] = self.perm
        for p in self._all_params():
            if p.m is not None:
                arrays[f"m.{p.name}"] = p.m
                arrays[f"v.{p.name}"] = p.v
        np.savez(str(path) + ".resume.npz", **arrays)
        meta = {
            "train_config": self.config.to_dict(),
            "model_config": self.model.config.to_dict(),
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
            "step": self.step,
            "adam_t": self.opt_g.t,
            "has_perm": self.perm is not None,
            "shuffle_rng": self.shuffle_rng.bit_generator.state,
            "model_rng": self.model_rng.bit_generator.state,
        }
        with open(str(path) + ".resume.json", "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
        return path

    @classmethod
    def resume(cls, checkpoint_path, store: FrameStore, out_dir=None) -> "Trainer":
        checkpoint_path = Path(checkpoint_path)
        with open(str(checkpoint_path) + ".resume.json") as fh:
            meta = json.load(fh)
        model = load_checkpoint(checkpoint_path)
        config = TrainConfig.from_dict(meta["train_config"])
        tr = cls(model, store, config, out_dir or checkpoint_path.parent)
        tr.epoch = meta["epoch"]
        tr.batch_in_epoch = meta["batch_in_epoch"]
        tr.step = meta["step"]
        tr.opt_g.t = meta["adam_t"]
        tr.shuffle_rng.bit_generator.state = meta["shuffle_rng"]
        tr.model_rng.bit_generator.state = meta["model_rng"]
        with np.load(str(checkpoint_path) + ".resume.npz") as npz:
            if meta["has_perm"]:
                tr.perm = npz["perm"].copy()
            for p in tr._all_params():
                if f"m.{p.name}" in npz:
                    p.m = npz[f"m.{p.name}"].copy()
                    p.v = npz[f"v.{p.name}"].copy()
        return tr

    # ----- epoch loop -----

    def run(self, max_steps: int | None = None) -> Path:
        """Train to the configured epoch count; returns the final checkpoint.

        max_steps stops early after that many applied updates and saves a
        resumable "paused" checkpoint instead of the final one.
        """
        t0 = time.monotonic()
        paused = False
        while self.epoch < self.config.epochs and not paused:
            if self.perm is None:
                self.perm = epoch_permutation(self.store, self.shuffle_rng)
            for vals, lx, ly in iterate_batches(self.store, self.perm,
                                                self.config.batch_size,
                                                self.batch_in_epoch):
                if max_steps is not None and self.step >= max_steps:
                    paused = True
                    break
                rep = self.train_step(vals, lx, ly)
                self.batch_in_epoch += 1
                if rep is not None:
                    self._log_row(rep)
            if not paused:
                self.epoch += 1
                self.batch_in_epoch = 0
                self.perm = None
                cadence = self.config.checkpoint_every
                if cadence and self.epoch % cadence == 0 and self.epoch < self.config.epochs:
                    self.save(f"epoch{self.epoch:03d}")
        path = self.save("paused" if paused else "final")
        if not paused:
            self._write_summary(path, time.monotonic() - t0)
        return path

    def _write_summary(self, checkpoint_path: Path, wall_seconds: float) -> None:
        summary = {
            "train_config": self.config.to_dict(),
            "model_config": self.model.config.to_dict(),
            "assumptions": [
                "epoch count and batch schedule are defaults, not tuned",
                "constant learning rates, no decay",
                "discriminator/generator update ratio fixed at 1:1",
            ],
            "epochs_run": self.epoch,
            "steps": self.step,
            "parameters": self.model.parameter_count(),
            "incidents": self.incidents,
            "checkpoint": checkpoint_path.name,
            "checkpoint_sha256": file_hash(checkpoint_path),
            "wall_seconds": round(wall_seconds, 3),
        }
        with open(self.out_dir / "run_summary.json", "w") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)


def train(manifest_path, config: TrainConfig, out_dir,
          model_config: ModelConfig | None = None,
          resume_from=None) -> Path:
    """Load data, build or resume a trainer, and run it to completion."""
    manifest = load_manifest(manifest_path)
    store = FrameStore(manifest)
    if resume_from is not None:
        trainer = Trainer.resume(resume_from, store, out_dir)
    else:
        if model_config is None:
            model_config = ModelConfig(frame_w=manifest.frame_size[0],
                                       frame_h=manifest.frame_size[1])
        model = HybridModel(model_config, seed=config.seed)
        trainer = Trainer(model, store, config, out_dir)
    return trainer.run()


def labeled_corpus_scores(model, store: FrameStore, weights, mode: str):
    """Per-video normalized frame scores joined with ground truth."""
    from .evaluation import LabeledScores
    from .scoring import score_video
    items = []
    for video in range(len(store.manifest.videos)):
        entry = store.manifest.videos[video]
        if entry.ground_truth is None:
            raise ConfigError(f"video {entry.vid} has no ground truth to evaluate")
        result = score_video(model, store, video, weights)
        items.append((entry.vid, result["normalized"][mode], entry.ground_truth))
    return LabeledScores.concat(items)


def ablation_matrix(train_manifest, test_manifest, config: TrainConfig,
                    out_dir) -> dict:
    """Train every valid decoder/adversarial combination and tabulate AUC."""
    from .evaluation import roc_auc
    from .scoring import available_modes, fit_weights
    out_dir = Path(out_dir)
    train_mani = load_manifest(train_manifest)
    test_store = FrameStore(load_manifest(test_manifest))
    rows = []
    for use_decoder, use_adversarial in ((True, True), (True, False),
                                         (False, False)):
        tag = f"dec{int(use_decoder)}_adv{int(use_adversarial)}"
        mc = ModelConfig(frame_w=train_mani.frame_size[0],
                         frame_h=train_mani.frame_size[1],
                         use_decoder=use_decoder,
                         use_adversarial=use_adversarial)
        ckpt = train(train_manifest, config, out_dir / tag, model_config=mc)
        model = load_checkpoint(ckpt)
        train_store = FrameStore(train_mani)
        weights = fit_weights(model, train_store)
        aucs = {}
        for mode in available_modes(model):
            aucs[mode] = roc_auc(labeled_corpus_scores(model, test_store,
                                                       weights, mode))
        rows.append({"use_decoder": use_decoder,
                     "use_adversarial": use_adversarial,
                     "checkpoint": str(ckpt), "auc": aucs})
    report = {"rows": rows}
    with open(out_dir / "ablation.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    return report
