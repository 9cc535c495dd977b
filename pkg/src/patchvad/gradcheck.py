"""Finite-difference verification of analytic gradients.

Each check scalarizes an op through a fixed random projection, evaluates
central differences (step 1e-5) at double precision on a sample of
entries per tensor, and reports the scale-normalized maximum deviation.
A failing check is a report outcome, not an exception.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses
from .layers import (BatchNorm, Conv2d, Deconv2d, Dense, Dropout, LeakyRelu,
                     Relu, sigmoid, sigmoid_backward, softmax, softmax_backward)

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class TensorCheck:
    name: str
    rel_err: float
    samples: int


@dataclass
class GradCheckReport:
    op: str
    seed: int
    tolerance: float
    tensors: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((t.rel_err for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        worst = max(self.tensors, key=lambda t: t.rel_err, default=None)
        tag = "ok" if self.passed else "FAIL"
        where = f" worst={worst.name}" if worst else ""
        return f"{self.op}[seed {self.seed}]: {tag} max_rel={self.max_rel_err:.3e}{where}"


def check_gradients(op: str, run: Callable[[bool], tuple[float, dict | None]],
                    tensors: dict[str, np.ndarray], *, seed: int = 0,
                    tolerance: float = TOLERANCE, step: float = STEP,
                    samples: int = 25,
                    rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued computation to numerics.

    run(True) returns (loss, {name: grad}) and run(False) returns
    (loss, None); both must be deterministic given the current tensor
    values. tensors maps names to the arrays perturbed in place.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    _, grads = run(True)
    report = GradCheckReport(op=op, seed=seed, tolerance=tolerance)
    for name, arr in tensors.items():
        g = grads[name]
        n_s = min(samples, arr.size)
        idx = rng.choice(arr.size, size=n_s, replace=False)
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        analytic = gflat[idx]
        numeric = np.empty(n_s)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            hi, _ = run(False)
            flat[i] = old - step
            lo, _ = run(False)
            flat[i] = old
            numeric[j] = (hi - lo) / (2 * step)
        scale = max(np.abs(analytic).max(initial=0.0),
                    np.abs(numeric).max(initial=0.0))
        rel = 0.0 if scale < 1e-8 else float(np.abs(analytic - numeric).max() / scale)
        report.tensors.append(TensorCheck(name, rel, n_s))
    return report


def _projected(forward: Callable[[], np.ndarray], proj: np.ndarray,
               backward: Callable[[np.ndarray], dict]) -> Callable:
    def run(want_grads: bool):
        out = forward()
        loss = float(np.sum(out * proj, dtype=np.float64))
        return (loss, backward(proj.copy()) if want_grads else None)
    return run


def _check_dense(seed: int, **kw) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    layer = Dense(6, 4, rng, dtype=np.float64)
    x = rng.normal(size=(3, 6))
    proj = rng.normal(size=(3, 4))

    def backward(p):
        layer.w.zero_grad(); layer.b.zero_grad()
        dx = layer.backward(p)
        return {"x": dx, "w": layer.w.grad, "b": layer.b.grad}

    run = _projected(lambda: layer.forward(x), proj, backward)
    return check_gradients("dense", run,
                           {"x": x, "w": layer.w.value, "b": layer.b.value},
                           seed=seed, **kw)


def _check_conv(seed: int, stride: int, k: int, **kw) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    layer = Conv2d(2, 3, k, stride, rng, dtype=np.float64)
    x = rng.normal(size=(2, 5, 5, 2))
    proj = rng.normal(size=layer.forward(x).shape)

    def backward(p):
        layer.w.zero_grad(); layer.b.zero_grad()
        dx = layer.backward(p)
        return {"x": dx, "w": layer.w.grad, "b": layer.b.grad}

    run = _projected(lambda: layer.forward(x), proj, backward)
    return check_gradients(f"conv{k}x{k}_s{stride}", run,
                           {"x": x, "w": layer.w.value, "b": layer.b.value},
                           seed=seed, **kw)


def _check_deconv(seed: int, zin, target, **kw) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    layer = Deconv2d(3, 2, 3, 2, target, rng, dtype=np.float64)
    z = rng.normal(size=(2, *zin, 3))
    proj = rng.normal(size=(2, *target, 2))

    def backward(p):
        layer.w.zero_grad(); layer.b.zero_grad()
        dz = layer.backward(p)
        return {"z": dz, "w": layer.w.grad, "b": layer.b.grad}

    run = _projected(lambda: layer.forward(z), proj, backward)
    return check_gradients(f"deconv_{zin[0]}to{target[0]}", run,
                           {"z": z, "w": layer.w.value, "b": layer.b.value},
                           seed=seed, **kw)


def _check_batchnorm(seed: int, **kw) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    bn = BatchNorm(3, dtype=np.float64)
    bn.gamma.value = rng.normal(size=3) + 1.0
    bn.beta.value = rng.normal(size=3)
    x = rng.normal(size=(2, 4, 4, 3))
    proj = rng.normal(size=(2, 4, 4, 3))

    def forward():
        saved = (bn.running_mean.copy(), bn.running_var.copy())
        out = bn.forward(x, "train")
        bn.running_mean, bn.running_var = saved
        return out

    def backward(p):
        bn.gamma.zero_grad(); bn.beta.zero_grad()
        dx = bn.backward(p)
        return {"x": dx, "gamma": bn.gamma.grad, "beta": bn.beta.grad}

    run = _projected(forward, proj, backward)
    return check_gradients("batchnorm_train", run,
                           {"x": x, "gamma": bn.gamma.value, "beta": bn.beta.value},
                           seed=seed, **kw)


def _check_activation(seed: int, kind: str, **kw) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 6))
    proj = rng.normal(size=(4, 6))
    if kind == "leaky_relu":
        layer = LeakyRelu(0.2)
        run = _projected(lambda: layer.forward(x), proj,
                         lambda p: {"x": layer.backward(p)})
    elif kind == "relu":
        layer = Relu()
        run = _projected(lambda: layer.forward(x), proj,
                         lambda p: {"x": layer.backward(p)})
    elif kind == "sigmoid":
        run = _projected(lambda: sigmoid(x), proj,
                         lambda p: {"x": sigmoid_backward(p, sigmoid(x))})
    elif kind == "softmax":
        run = _projected(lambda: softmax(x), proj,
                         lambda p: {"x": softmax_backward(p, softmax(x))})
    else:
        raise ValueError(kind)
    return check_gradients(kind, run, {"x": x}, seed=seed, **kw)


def _check_dropout(seed: int, **kw) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 6))
    proj = rng.normal(size=(6, 6))
    layer = Dropout(0.5)

    def forward():
        # identical mask on every evaluation so the map stays deterministic
        return layer.forward(x, "train", np.random.default_rng(seed + 999))

    run = _projected(forward, proj, lambda p: {"x": layer.backward(p)})
    return check_gradients("dropout_train", run, {"x": x}, seed=seed, **kw)


def _check_recon_loss(seed: int, **kw) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    w = losses.LossWeights()
    c = rng.normal(size=(2, 10, 10, 3))
    m = rng.normal(size=(2, 10, 10, 3))

    def run(want_grads: bool):
        val = losses.reconstruction_loss(c, m, w)
        g = {"m": losses.reconstruction_loss_backward(c, m, w)} if want_grads else None
        return val, g

    return check_gradients("reconstruction_loss", run, {"m": m}, seed=seed, **kw)


def _check_clf_loss(seed: int, **kw) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    px = rng.uniform(0.05, 1.0, size=(3, 16))
    py = rng.uniform(0.05, 1.0, size=(3, 12))
    lx = rng.integers(0, 16, size=3)
    ly = rng.integers(0, 12, size=3)

    def run(want_grads: bool):
        val = losses.classification_loss(px, py, lx, ly)
        g = None
        if want_grads:
            dpx, dpy = losses.classification_loss_backward(px, py, lx, ly)
            g = {"px": dpx, "py": dpy}
        return val, g

    return check_gradients("classification_loss", run, {"px": px, "py": py},
                           seed=seed, **kw)


def _check_adv_loss(seed: int, **kw) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.05, 0.95, size=5)

    def run(want_grads: bool):
        val = losses.adversarial_generator_loss(d, 0.25)
        g = {"d": losses.adversarial_generator_loss_backward(d, 0.25)} \
            if want_grads else None
        return val, g

    return check_gradients("adversarial_G_loss", run, {"d": d}, seed=seed, **kw)


def _check_disc_loss(seed: int, **kw) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.05, 0.95, size=4)
    f = rng.uniform(0.05, 0.95, size=4)

    def run(want_grads: bool):
        val = losses.discriminator_loss(r, f)
        g = None
        if want_grads:
            dr, df = losses.discriminator_loss_backward(r, f)
            g = {"r": dr, "f": df}
        return val, g

    return check_gradients("discriminator_loss", run, {"r": r, "f": f},
                           seed=seed, **kw)


def standard_suite(seeds=range(20), samples: int = 12) -> list[GradCheckReport]:
    """Finite-difference checks for every layer kind and every loss."""
    reports = []
    for seed in seeds:
        kw = {"samples": samples}
        reports.append(_check_dense(seed, **kw))
        reports.append(_check_conv(seed, 1, 3, **kw))
        reports.append(_check_conv(seed, 2, 3, **kw))
        reports.append(_check_conv(seed, 1, 1, **kw))
        reports.append(_check_deconv(seed, (3, 3), (5, 5), **kw))
        reports.append(_check_deconv(seed, (5, 5), (10, 10), **kw))
        reports.append(_check_batchnorm(seed, **kw))
        for kind in ("leaky_relu", "relu", "sigmoid", "softmax"):
            reports.append(_check_activation(seed, kind, **kw))
        reports.append(_check_dropout(seed, **kw))
        reports.append(_check_recon_loss(seed, **kw))
        reports.append(_check_clf_loss(seed, **kw))
        reports.append(_check_adv_loss(seed, **kw))
        reports.append(_check_disc_loss(seed, **kw))
    return reports
