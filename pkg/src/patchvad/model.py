"""The hybrid network: encoder, decoder, position classifier, discriminator.

One encoder feeds two heads. The decoder reconstructs the input cuboid;
the classifier predicts the cuboid's grid column and row through two
softmax towers fed by a concatenated multi-scale feature (1x1-reduced
block-1 and block-2 maps plus the raw block-3 latent, 7104 values for a
10x10x3 cuboid). A small convolutional discriminator scores cuboids as
real or reconstructed during adversarial training.

Layer shapes per block (cuboid input 10x10x3):
  encoder   10x10x32 -> 10x10x64 | 5x5x64 -> 5x5x128 | 3x3x128 -> 3x3x256
  decoder   3x3x128 | 5x5x128 -> 5x5x64 | 10x10x64 -> 10x10x32 | 10x10x3
  classifier branches 3200 + 1600 + 2304 = 7104 -> two towers 1024 -> 1024
  discriminator 5x5x32 -> 3x3x64 -> 2x2x128 -> 2x2x1 -> fc -> sigmoid
The first encoder block carries no batch normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .layers import (BatchNorm, Conv2d, Deconv2d, Dense, Dropout, LeakyRelu,
                     Relu, sigmoid, sigmoid_backward, softmax, softmax_backward)

PATCH = 10
DEPTH = 3


@dataclass
class ModelConfig:
    """Architecture switches; the grid is derived from the frame size."""
    frame_w: int = 160
    frame_h: int = 120
    use_decoder: bool = True
    use_adversarial: bool = True

    def __post_init__(self):
        if self.frame_w <= 0 or self.frame_h <= 0:
            raise ConfigError("frame dimensions must be positive")
        if self.frame_w % PATCH or self.frame_h % PATCH:
            raise ConfigError(
                f"frame size {self.frame_w}x{self.frame_h} not divisible by {PATCH}")
        if self.use_adversarial and not self.use_decoder:
            raise ConfigError("adversarial training requires the decoder")

    @property
    def grid_w(self) -> int:
        return self.frame_w // PATCH

    @property
    def grid_h(self) -> int:
        return self.frame_h // PATCH

    def to_dict(self) -> dict:
        return {"frame_w": self.frame_w, "frame_h": self.frame_h,
                "patch": PATCH, "depth": DEPTH,
                "use_decoder": self.use_decoder,
                "use_adversarial": self.use_adversarial}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(frame_w=d["frame_w"], frame_h=d["frame_h"],
                   use_decoder=d["use_decoder"],
                   use_adversarial=d["use_adversarial"])


@dataclass
class ForwardOutputs:
    """Generator outputs for one batch."""
    reconstruction: np.ndarray | None
    prob_x: np.ndarray
    prob_y: np.ndarray


class HybridModel:
    """Built network with explicit forward/backward wiring."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        reg = {}

        def add(name, layer):
            reg[name] = layer
            return layer

        dt = dtype
        # encoder (block 1 has no batchnorm)
        self.e1c1 = add("enc1.conv1", Conv2d(DEPTH, 32, 3, 1, rng, "enc1.conv1", dt))
        self.e1c2 = add("enc1.conv2", Conv2d(32, 64, 3, 1, rng, "enc1.conv2", dt))
        self.e1act = LeakyRelu(0.2)
        self.e2c1 = add("enc2.conv1", Conv2d(64, 64, 3, 2, rng, "enc2.conv1", dt))
        self.e2c2 = add("enc2.conv2", Conv2d(64, 128, 3, 1, rng, "enc2.conv2", dt))
        self.e2bn = add("enc2.bn", BatchNorm(128, "enc2.bn", dtype=dt))
        self.e2act = LeakyRelu(0.2)
        self.e3c1 = add("enc3.conv1", Conv2d(128, 128, 3, 2, rng, "enc3.conv1", dt))
        self.e3c2 = add("enc3.conv2", Conv2d(128, 256, 3, 1, rng, "enc3.conv2", dt))
        self.e3bn = add("enc3.bn", BatchNorm(256, "enc3.bn", dtype=dt))
        self.e3act = LeakyRelu(0.2)

        if config.use_decoder:
            self.d1conv = add("dec1.conv", Conv2d(256, 128, 3, 1, rng, "dec1.conv", dt))
            self.d1bn = add("dec1.bn", BatchNorm(128, "dec1.bn", dtype=dt))
            self.d1act = Relu()
            self.d2deconv = add("dec2.deconv",
                                Deconv2d(128, 128, 3, 2, (5, 5), rng, "dec2.deconv", dt))
            self.d2conv = add("dec2.conv", Conv2d(128, 64, 3, 1, rng, "dec2.conv", dt))
            self.d2bn = add("dec2.bn", BatchNorm(64, "dec2.bn", dtype=dt))
            self.d2drop = Dropout(0.5)
            self.d2act = Relu()
            self.d3deconv = add("dec3.deconv",
                                Deconv2d(64, 64, 3, 2, (10, 10), rng, "dec3.deconv", dt))
            self.d3conv = add("dec3.conv", Conv2d(64, 32, 3, 1, rng, "dec3.conv", dt))
            self.d3bn = add("dec3.bn", BatchNorm(32, "dec3.bn", dtype=dt))
            self.d3drop = Dropout(0.5)
            self.d3act = Relu()
            self.dout = add("dec.out", Conv2d(32, DEPTH, 3, 1, rng, "dec.out", dt))

        # classifier: 1x1 reductions on blocks 1-2, raw block-3 latent
        self.cr1 = add("clf.reduce1", Conv2d(64, 32, 1, 1, rng, "clf.reduce1", dt))
        self.cr2 = add("clf.reduce2", Conv2d(128, 64, 1, 1, rng, "clf.reduce2", dt))
        self.feature_len = 32 * PATCH * PATCH + 64 * 5 * 5 + 256 * 3 * 3
        self.towers = {}
        for axis, classes in (("x", config.grid_w), ("y", config.grid_h)):
            fc1 = add(f"clf.{axis}.fc1", Dense(self.feature_len, 1024, rng,
                                               f"clf.{axis}.fc1", dt))
            fc2 = add(f"clf.{axis}.fc2", Dense(1024, 1024, rng, f"clf.{axis}.fc2", dt))
            out = add(f"clf.{axis}.out", Dense(1024, classes, rng, f"clf.{axis}.out", dt))
            self.towers[axis] = {"fc1": fc1, "r1": Relu(), "drop1": Dropout(0.5),
                                 "fc2": fc2, "r2": Relu(), "drop2": Dropout(0.5),
                                 "out": out}

        if config.use_decoder:
            self.kc1 = add("disc.conv1", Conv2d(DEPTH, 32, 3, 2, rng, "disc.conv1", dt))
            self.kact1 = LeakyRelu(0.2)
            self.kc2 = add("disc.conv2", Conv2d(32, 64, 3, 2, rng, "disc.conv2", dt))
            self.kbn2 = add("disc.bn2", BatchNorm(64, "disc.bn2", dtype=dt))
            self.kact2 = LeakyRelu(0.2)
            self.kc3 = add("disc.conv3", Conv2d(64, 128, 3, 2, rng, "disc.conv3", dt))
            self.kbn3 = add("disc.bn3", BatchNorm(128, "disc.bn3", dtype=dt))
            self.kact3 = LeakyRelu(0.2)
            self.kc4 = add("disc.conv4", Conv2d(128, 1, 1, 1, rng, "disc.conv4", dt))
            self.kbn4 = add("disc.bn4", BatchNorm(1, "disc.bn4", dtype=dt))
            self.kfc = add("disc.fc", Dense(4, 1, rng, "disc.fc", dt))

        self._layers = reg
        self._cache = {}

    # ----- parameter enumeration -----

    def generator_params(self):
        out = []
        for name, layer in self._layers.items():
            if not name.startswith("disc."):
                out.extend(layer.params())
        return out

    def discriminator_params(self):
        return [p for name, layer in self._layers.items()
                if name.startswith("disc.") for p in layer.params()]

    def parameter_count(self) -> int:
        return sum(p.value.size for ps in (self.generator_params(),
                                           self.discriminator_params()) for p in ps)

    def named_tensors(self):
        """All persistent arrays in deterministic order, for checkpointing."""
        out = []
        for name, layer in self._layers.items():
            for p in layer.params():
                out.append((p.name, p.value))
            if isinstance(layer, BatchNorm):
                out.append((f"{name}.running_mean", layer.running_mean))
                out.append((f"{name}.running_var", layer.running_var))
        return out

    # ----- generator -----

    def forward_generator(self, batch: np.ndarray, mode: str,
                          rng: np.random.Generator | None = None,
                          trace: dict | None = None) -> ForwardOutputs:
        if batch.ndim != 4 or batch.shape[1:] != (PATCH, PATCH, DEPTH):
            raise ConfigError(f"expected cuboid batch [N,10,10,3], got {batch.shape}")
        if mode == "train" and rng is None:
            raise ConfigError("train-mode forward needs an rng for dropout")

        def tr(name, arr):
            if trace is not None:
                trace[name] = tuple(arr.shape[1:])
            return arr

        h = tr("enc1.conv1", self.e1c1.forward(batch))
        h = tr("enc1.conv2", self.e1c2.forward(h))
        e1 = tr("enc1.out", self.e1act.forward(h))
        h = tr("enc2.conv1", self.e2c1.forward(e1))
        h = tr("enc2.conv2", self.e2c2.forward(h))
        h = self.e2bn.forward(h, mode)
        e2 = tr("enc2.out", self.e2act.forward(h))
        h = tr("enc3.conv1", self.e3c1.forward(e2))
        h = tr("enc3.conv2", self.e3c2.forward(h))
        h = self.e3bn.forward(h, mode)
        e3 = tr("enc3.out", self.e3act.forward(h))

        recon = None
        if self.config.use_decoder:
            h = tr("dec1.conv", self.d1conv.forward(e3))
            h = self.d1bn.forward(h, mode)
            h = self.d1act.forward(h)
            h = tr("dec2.deconv", self.d2deconv.forward(h))
            h = tr("dec2.conv", self.d2conv.forward(h))
            h = self.d2bn.forward(h, mode)
            h = self.d2drop.forward(h, mode, rng)
            h = self.d2act.forward(h)
            h = tr("dec3.deconv", self.d3deconv.forward(h))
            h = tr("dec3.conv", self.d3conv.forward(h))
            h = self.d3bn.forward(h, mode)
            h = self.d3drop.forward(h, mode, rng)
            h = self.d3act.forward(h)
            recon = tr("dec.out", self.dout.forward(h))

        n = batch.shape[0]
        r1 = tr("clf.branch1.conv", self.cr1.forward(e1))
        r2 = tr("clf.branch2.conv", self.cr2.forward(e2))
        f1 = tr("clf.branch1.flat", r1.reshape(n, -1))
        f2 = tr("clf.branch2.flat", r2.reshape(n, -1))
        f3 = tr("clf.branch3.flat", e3.reshape(n, -1))
        feat = tr("clf.feature", np.concatenate([f1, f2, f3], axis=1))
        self._cache["splits"] = (f1.shape[1], f2.shape[1])
        self._cache["shapes"] = (r1.shape, r2.shape, e3.shape)

        probs = {}
        for axis in ("x", "y"):
            t = self.towers[axis]
            h = tr(f"clf.{axis}.hidden1", t["fc1"].forward(feat))
            h = t["r1"].forward(h)
            h = t["drop1"].forward(h, mode, rng)
            h = tr(f"clf.{axis}.hidden2", t["fc2"].forward(h))
            h = t["r2"].forward(h)
            h = t["drop2"].forward(h, mode, rng)
            logits = tr(f"clf.{axis}.out", t["out"].forward(h))
            probs[axis] = softmax(logits)
        return ForwardOutputs(recon, probs["x"], probs["y"])


    def backward_generator(self, outputs: ForwardOutputs,
                           d_recon: np.ndarray | None,
                           d_prob_x: np.ndarray | None,
                           d_prob_y: np.ndarray | None) -> None:
        """Accumulate generator gradients.

        d_recon is the loss gradient w.r.t. the reconstruction (adversarial
        contribution already folded in by the caller); d_prob_x/d_prob_y are
        gradients w.r.t. the softmax outputs.
        """
        d_feat = None
        for axis, dprob, probs in (("x", d_prob_x, outputs.prob_x),
                                   ("y", d_prob_y, outputs.prob_y)):
            if dprob is None:
                continue
            t = self.towers[axis]
            d = softmax_backward(dprob, probs)
            d = t["out"].backward(d)
            d = t["drop2"].backward(d)
            d = t["r2"].backward(d)
            d = t["fc2"].backward(d)
            d = t["drop1"].backward(d)
            d = t["r1"].backward(d)
            d = t["fc1"].backward(d)
            d_feat = d if d_feat is None else d_feat + d

        d_e1 = d_e2 = d_e3 = None
        if d_feat is not None:
            s1, s2 = self._cache["splits"]
            sh1, sh2, sh3 = self._cache["shapes"]
            d_e1 = self.cr1.backward(d_feat[:, :s1].reshape(sh1))
            d_e2 = self.cr2.backward(d_feat[:, s1:s1 + s2].reshape(sh2))
            d_e3 = np.ascontiguousarray(d_feat[:, s1 + s2:]).reshape(sh3)

        if d_recon is not None:
            d = self.dout.backward(d_recon)
            d = self.d3act.backward(d)
            d = self.d3drop.backward(d)
            d = self.d3bn.backward(d)
            d = self.d3conv.backward(d)
            d = self.d3deconv.backward(d)
            d = self.d2act.backward(d)
            d = self.d2drop.backward(d)
            d = self.d2bn.backward(d)
            d = self.d2conv.backward(d)
            d = self.d2deconv.backward(d)
            d = self.d1act.backward(d)
            d = self.d1bn.backward(d)
            d = self.d1conv.backward(d)
            d_e3 = d if d_e3 is None else d_e3 + d

        if d_e3 is None:
            return
        d = self.e3act.backward(d_e3)
        d = self.e3bn.backward(d)
        d = self.e3c2.backward(d)
        d = self.e3c1.backward(d)
        d_e2 = d if d_e2 is None else d_e2 + d
        d = self.e2act.backward(d_e2)
        d = self.e2bn.backward(d)
        d = self.e2c2.backward(d)
        d = self.e2c1.backward(d)
        d_e1 = d if d_e1 is None else d_e1 + d
        d = self.e1act.backward(d_e1)
        d = self.e1c2.backward(d)
        self.e1c1.backward(d, need_dx=False)

    # ----- discriminator -----

    def forward_discriminator(self, batch: np.ndarray, mode: str,
                              trace: dict | None = None) -> np.ndarray:
        if not self.config.use_adversarial:
            raise ConfigError("discriminator forward with adversarial training disabled")
        if batch.ndim != 4 or batch.shape[1:] != (PATCH, PATCH, DEPTH):
            raise ConfigError(f"expected cuboid batch [N,10,10,3], got {batch.shape}")

        def tr(name, arr):
            if trace is not None:
                trace[name] = tuple(arr.shape[1:])
            return arr

        h = tr("disc.block1", self.kact1.forward(self.kc1.forward(batch)))
        h = self.kc2.forward(h)
        h = self.kbn2.forward(h, mode)
        h = tr("disc.block2", self.kact2.forward(h))
        h = self.kc3.forward(h)
        h = self.kbn3.forward(h, mode)
        h = tr("disc.block3", self.kact3.forward(h))
        h = tr("disc.block4.conv", self.kc4.forward(h))
        h = self.kbn4.forward(h, mode)
        n = batch.shape[0]
        flat = h.reshape(n, 4)
        logit = tr("disc.fc", self.kfc.forward(flat))
        prob = sigmoid(logit[:, 0])
        self._cache["disc_prob"] = prob
        return prob

    def backward_discriminator(self, d_prob: np.ndarray,
                               need_dx: bool = False) -> np.ndarray | None:
        prob = self._cache["disc_prob"]
        d = sigmoid_backward(d_prob, prob)[:, None]
        d = self.kfc.backward(d)
        d = d.reshape(-1, 2, 2, 1)
        d = self.kbn4.backward(d)
        d = self.kc4.backward(d)
        d = self.kact3.backward(d)
        d = self.kbn3.backward(d)
        d = self.kc3.backward(d)
        d = self.kact2.backward(d)
        d = self.kbn2.backward(d)
        d = self.kc2.backward(d)
        d = self.kact1.backward(d)
        return self.kc1.backward(d, need_dx=need_dx)

    # ----- introspection -----

    def shape_trace(self, n: int = 2) -> dict[str, tuple]:
        """Per-layer output sizes from an actual eval-mode forward."""
        trace: dict[str, tuple] = {}
        batch = np.zeros((n, PATCH, PATCH, DEPTH), dtype=self.dtype)
        self.forward_generator(batch, "eval", trace=trace)
        if self.config.use_adversarial:
            self.forward_discriminator(batch, "eval", trace=trace)
        return trace


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> HybridModel:
    return HybridModel(config, seed=seed, dtype=dtype)


def generator_loss_from_outputs(c, outputs: ForwardOutputs, label_x, label_y,
                                weights, d_fake=None):
    """Loss-report adapter working directly from ForwardOutputs."""
    from .losses import generator_loss
    return generator_loss(c, outputs.reconstruction, outputs.prob_x,
                          outputs.prob_y, label_x, label_y, weights, d_fake)


def filter_grid(w: np.ndarray, scale: int = 12, pad: int = 1) -> np.ndarray:
    """Render [3,3,Cin,Cout] filters as one uint8 tile grid.

    Each output channel becomes a tile normalized to its own min/max; the
    3 input channels map to RGB. Tiles are nearest-upscaled and arranged
    in a near-square grid on a mid-gray background.
    """
    k, _, cin, cout = w.shape
    cols = int(np.ceil(np.sqrt(cout * 4 / 3)))
    rows = int(np.ceil(cout / cols))
    tile = k * scale
    img = np.full((rows * (tile + pad) + pad, cols * (tile + pad) + pad, 3),
                  128, dtype=np.uint8)
    for idx in range(cout):
        f = w[:, :, :, idx].astype(np.float64)
        lo, hi = f.min(), f.max()
        norm = (f - lo) / (hi - lo) if hi > lo else np.full_like(f, 0.5)
        if cin == 1:
            norm = np.repeat(norm, 3, axis=2)
        elif cin != 3:
            norm = np.repeat(norm.mean(axis=2, keepdims=True), 3, axis=2)
        t = np.repeat(np.repeat((norm * 255).astype(np.uint8), scale, 0), scale, 1)
        r, c = divmod(idx, cols)
        y0 = pad + r * (tile + pad)
        x0 = pad + c * (tile + pad)
        img[y0:y0 + tile, x0:x0 + tile] = t
    return img


def export_filters(model: HybridModel, scale: int = 12) -> np.ndarray:
    """First-layer encoder filters as an image grid (32 tiles at base config)."""
    return filter_grid(model.e1c1.w.value, scale=scale)


def filter_difference_grid(model_a: HybridModel, model_b: HybridModel,
                           scale: int = 12) -> np.ndarray:
    """Tile-wise |A - B| of the first-layer filters, each tile normalized."""
    diff = np.abs(model_a.e1c1.w.value.astype(np.float64)
                  - model_b.e1c1.w.value.astype(np.float64))
    return filter_grid(diff, scale=scale)
