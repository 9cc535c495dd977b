"""Training objectives.

The generator objective combines three terms: a reconstruction loss
(squared L2 plus an L1 penalty on the mismatch of absolute forward
differences along x, y and t), a two-axis cross-entropy for the position
classifier, and an adversarial term. The discriminator has the usual
two-sided log loss. Per-cuboid terms are element sums; batches are
averaged so the lambda weights keep their meaning across batch sizes.

All functions accept a single cuboid [10,10,3] (layout rows, columns,
time) or a batch [N,10,10,3], and accumulate scalars in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

LOG_CLAMP = 1e-12


@dataclass
class LossWeights:
    """Relative weights of the objective terms."""
    lambda_l2: float = 1.0
    lambda_grad: float = 1.0 / 3.0
    lambda_G: float = 0.25
    lambda_R: float = 1.0
    lambda_C: float = 1.0

    def __post_init__(self):
        for name in ("lambda_l2", "lambda_grad", "lambda_G", "lambda_R", "lambda_C"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be nonnegative")


@dataclass
class LossReport:
    """Per-step loss components, batch-averaged."""
    recon_l2: float = 0.0
    recon_grad: float = 0.0
    classification: float = 0.0
    adversarial_G: float = 0.0
    discriminator: float = 0.0
    total_G: float = 0.0

    COLUMNS = ("recon_l2", "recon_grad", "classification", "adversarial_G",
               "discriminator", "total_G")

    def as_row(self) -> list[float]:
        return [getattr(self, c) for c in self.COLUMNS]


def _batched(c: np.ndarray) -> np.ndarray:
    if c.ndim == 3:
        return c[None]
    if c.ndim == 4:
        return c
    raise DataError(f"expected a cuboid or batch of cuboids, got shape {c.shape}")


_AXIS = {"y": 1, "x": 2, "t": 3}


def grad3d(c: np.ndarray, axis: str) -> np.ndarray:
    """Forward difference along x (columns), y (rows) or t (time).

    The output is one element shorter along the chosen axis; no boundary
    values are fabricated.
    """
    if axis not in _AXIS:
        raise DataError(f"unknown gradient axis {axis!r}")
    cb = _batched(c)
    ax = _AXIS[axis]
    if cb.shape[ax] < 2:
        raise DataError(f"axis {axis!r} too short for a forward difference")
    out = np.diff(cb, axis=ax)
    return out if c.ndim == 4 else out[0]


def _recon_terms(c: np.ndarray, m_c: np.ndarray) -> tuple[float, float]:
    """(sum of squared errors, sum of |grad-magnitude| mismatches), batch-averaged."""
    cb, mb = _batched(c), _batched(m_c)
    if cb.shape != mb.shape:
        raise DataError(f"shape mismatch {c.shape} vs {m_c.shape}")
    n = cb.shape[0]
    l2 = float(np.sum((cb.astype(np.float64) - mb) ** 2, dtype=np.float64)) / n
    g = 0.0
    for ax in ("x", "y", "t"):
        dc = np.abs(grad3d(cb, ax)).astype(np.float64)
        dm = np.abs(grad3d(mb, ax))
        g += float(np.sum(np.abs(dc - dm), dtype=np.float64))
    return l2, g / n


def reconstruction_loss(c: np.ndarray, m_c: np.ndarray, w: LossWeights) -> float:
    l2, g = _recon_terms(c, m_c)
    return w.lambda_l2 * l2 + w.lambda_grad * g


def reconstruction_loss_backward(c: np.ndarray, m_c: np.ndarray,
                                 w: LossWeights) -> np.ndarray:
    """Gradient of reconstruction_loss w.r.t. the reconstruction m_c."""
    cb, mb = _batched(c), _batched(m_c)
    n = cb.shape[0]
    dm = (2.0 * w.lambda_l2 / n) * (mb - cb)
    scale = w.lambda_grad / n
    for ax_name, ax in _AXIS.items():
        dc = np.diff(cb, axis=ax)
        dmm = np.diff(mb, axis=ax)
        # d/d(diff) of |abs(diff c) - abs(diff m)| w.r.t. the m differences
        inner = -np.sign(np.abs(dc) - np.abs(dmm)) * np.sign(dmm) * scale
        sl_lo = [slice(None)] * 4
        sl_hi = [slice(None)] * 4
        sl_lo[ax] = slice(None, -1)
        sl_hi[ax] = slice(1, None)
        dm[tuple(sl_lo)] -= inner
        dm[tuple(sl_hi)] += inner
    dm = dm.astype(m_c.dtype, copy=False)
    return dm if m_c.ndim == 4 else dm[0]


def _check_labels(p: np.ndarray, labels: np.ndarray, what: str) -> None:
    if np.any(labels < 0) or np.any(labels >= p.shape[1]):
        raise DataError(f"{what} label out of range for {p.shape[1]} classes")


def classification_loss(px: np.ndarray, py: np.ndarray,
                        label_x: np.ndarray, label_y: np.ndarray) -> float:
    """Two-axis cross-entropy, probabilities clamped below at 1e-12."""
    px = np.atleast_2d(px)
    py = np.atleast_2d(py)
    label_x = np.atleast_1d(np.asarray(label_x, dtype=np.int64))
    label_y = np.atleast_1d(np.asarray(label_y, dtype=np.int64))
    _check_labels(px, label_x, "x")
    _check_labels(py, label_y, "y")
    n = px.shape[0]
    rows = np.arange(n)
    lx = np.log(np.maximum(px[rows, label_x].astype(np.float64), LOG_CLAMP))
    ly = np.log(np.maximum(py[rows, label_y].astype(np.float64), LOG_CLAMP))
    return float(-(lx.sum() + ly.sum()) / n)


def classification_loss_backward(px: np.ndarray, py: np.ndarray,
                                 label_x: np.ndarray, label_y: np.ndarray
                                 ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the two softmax outputs (zero where clamped)."""
    px2, py2 = np.atleast_2d(px), np.atleast_2d(py)
    label_x = np.atleast_1d(np.asarray(label_x, dtype=np.int64))
    label_y = np.atleast_1d(np.asarray(label_y, dtype=np.int64))
    n = px2.shape[0]
    rows = np.arange(n)
    out = []
    for p, lab in ((px2, label_x), (py2, label_y)):
        dp = np.zeros_like(p)
        hit = p[rows, lab]
        live = hit > LOG_CLAMP
        dp[rows[live], lab[live]] = -1.0 / (n * hit[live])
        out.append(dp)
    dpx, dpy = out
    if px.ndim == 1:
        dpx, dpy = dpx[0], dpy[0]
    return dpx, dpy


def adversarial_generator_loss(d_fake: np.ndarray, lambda_G: float) -> float:
    """-lambda_G * mean log D(reconstruction)."""
    d = np.maximum(np.atleast_1d(d_fake).astype(np.float64), LOG_CLAMP)
    return float(-lambda_G * np.mean(np.log(d)))


def adversarial_generator_loss_backward(d_fake: np.ndarray,
                                        lambda_G: float) -> np.ndarray:
    d = np.atleast_1d(d_fake)
    n = d.shape[0]
    dd = np.where(d > LOG_CLAMP, -lambda_G / (n * np.maximum(d, LOG_CLAMP)), 0.0)
    dd = dd.astype(d.dtype, copy=False)
    return dd if np.ndim(d_fake) else dd[0]


def generator_loss(c: np.ndarray, m_c: np.ndarray | None,
                   px: np.ndarray | None, py: np.ndarray | None,
                   label_x: np.ndarray, label_y: np.ndarray,
                   w: LossWeights, d_fake: np.ndarray | None = None) -> LossReport:
    """Assemble the full generator objective.

    m_c is None when the decoder is ablated (pure classifier); d_fake is
    None when adversarial training is off, which drops the first term.
    """
    rep = LossReport()
    if m_c is not None:
        rep.recon_l2, rep.recon_grad = _recon_terms(c, m_c)
    if px is not None:
        rep.classification = classification_loss(px, py, label_x, label_y)
    if d_fake is not None and w.lambda_G != 0.0:
        rep.adversarial_G = adversarial_generator_loss(d_fake, w.lambda_G)
    recon = w.lambda_l2 * rep.recon_l2 + w.lambda_grad * rep.recon_grad
    rep.total_G = rep.adversarial_G + w.lambda_R * recon + w.lambda_C * rep.classification
    return rep


def discriminator_loss(d_real: np.ndarray, d_fake: np.ndarray) -> float:
    """-1/2 log D(real) - 1/2 log(1 - D(fake)), batch-averaged."""
    r = np.clip(np.atleast_1d(d_real).astype(np.float64), LOG_CLAMP, 1 - LOG_CLAMP)
    f = np.clip(np.atleast_1d(d_fake).astype(np.float64), LOG_CLAMP, 1 - LOG_CLAMP)
    return float(-0.5 * np.mean(np.log(r)) - 0.5 * np.mean(np.log(1.0 - f)))


def discriminator_loss_backward(d_real: np.ndarray, d_fake: np.ndarray
                                ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the real/fake discriminator outputs (zero where clamped)."""
    r = np.atleast_1d(d_real)
    f = np.atleast_1d(d_fake)
    nr, nf = r.shape[0], f.shape[0]
    in_r = (r > LOG_CLAMP) & (r < 1 - LOG_CLAMP)
    in_f = (f > LOG_CLAMP) & (f < 1 - LOG_CLAMP)
    dr = np.where(in_r, -0.5 / (nr * np.clip(r, LOG_CLAMP, None)), 0.0)
    df = np.where(in_f, 0.5 / (nf * np.clip(1.0 - f, LOG_CLAMP, None)), 0.0)
    dr = dr.astype(r.dtype, copy=False)
    df = df.astype(f.dtype, copy=False)
    if np.ndim(d_real) == 0:
        dr = dr[0]
    if np.ndim(d_fake) == 0:
        df = df[0]
    return dr, df
