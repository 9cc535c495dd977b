"""Dense-tensor layers with hand-written forward/backward passes.

Everything is plain numpy in NHWC layout. Each layer caches what its
backward pass needs during forward; backward accumulates parameter
gradients in place and returns the gradient w.r.t. its input. Training
runs in float32; gradient checking builds float64 instances.

Convolution padding is SAME-with-ceil: the output spatial size is
ceil(in/stride) and the zero padding is split as evenly as possible with
the extra row/column on the bottom/right.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError


def assert_finite(arr: np.ndarray, what: str = "tensor") -> None:
    """Debug check: raise NumericError if arr has NaNs or infinities."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Parameter:
    """A trainable tensor: value, gradient, and per-optimizer state slots."""

    __slots__ = ("name", "value", "grad", "m", "v")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = None  # Adam first moment, allocated on first step
        self.v = None  # Adam second moment

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0


def scaled_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    """Weight init: uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def same_ceil_geometry(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size and (lo, hi) zero padding for SAME-with-ceil convolution."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def _pad_nhwc(x: np.ndarray, pt: int, pb: int, pl: int, pr: int) -> np.ndarray:
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Padded input [N,Hp,Wp,C] -> patch matrix [N*Ho*Wo, C*k*k].

    Per-patch layout is (channel, ky, kx), matching the weight reshape in
    conv_forward.
    """
    view = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = view.shape[:3]
    return np.ascontiguousarray(view).reshape(n * ho * wo, -1)


def _w_as_matrix(w: np.ndarray) -> np.ndarray:
    """[k,k,Cin,Cout] -> [Cin*k*k, Cout] in im2col patch order."""
    k, _, cin, cout = w.shape
    return np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(cin * k * k, cout)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                 stride: int) -> tuple[np.ndarray, np.ndarray]:
    """SAME-with-ceil convolution. Returns (output, padded input for backward)."""
    n, h, wd, cin = x.shape
    k = w.shape[0]
    if w.shape[2] != cin:
        raise ConfigError(f"conv input has {cin} channels, filters expect {w.shape[2]}")
    ho, pt, pb = same_ceil_geometry(h, k, stride)
    wo, pl, pr = same_ceil_geometry(wd, k, stride)
    xp = _pad_nhwc(x, pt, pb, pl, pr)
    cols = _im2col(xp, k, stride)
    out = cols @ _w_as_matrix(w)
    if b is not None:
        out += b
    return out.reshape(n, ho, wo, w.shape[3]), xp


def conv_backward_input(dout: np.ndarray, w: np.ndarray, stride: int,
                        x_shape: tuple[int, ...]) -> np.ndarray:
    """Gradient of conv_forward w.r.t. its unpadded input.

    Scatters each kernel offset's contribution into the padded canvas with
    strided slice adds, then crops the padding off. Handles the general
    case, including stride>1 tails the forward windows never touched.
    """
    n, h, wd, cin = x_shape
    k = w.shape[0]
    _, pt, pb = same_ceil_geometry(h, k, stride)
    _, pl, pr = same_ceil_geometry(wd, k, stride)
    _, ho, wo, cout = dout.shape
    hp, wp = h + pt + pb, wd + pl + pr
    dmat = dout.reshape(n * ho * wo, cout)
    dxp = np.zeros((n, hp, wp, cin), dtype=dout.dtype)
    for dy in range(k):
        for dx in range(k):
            contrib = (dmat @ w[dy, dx].T).reshape(n, ho, wo, cin)
            dxp[:, dy:dy + (ho - 1) * stride + 1:stride,
                dx:dx + (wo - 1) * stride + 1:stride, :] += contrib
    return np.ascontiguousarray(dxp[:, pt:pt + h, pl:pl + wd, :])


def conv_backward_filters(xp: np.ndarray, dout: np.ndarray, k: int,
                          stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv_forward w.r.t. filters and bias, from the padded input."""
    n, ho, wo, cout = dout.shape
    cin = xp.shape[3]
    dmat = dout.reshape(n * ho * wo, cout)
    dw = np.empty((k, k, cin, cout), dtype=dout.dtype)
    for dy in range(k):
        for dx in range(k):
            xs = xp[:, dy:dy + (ho - 1) * stride + 1:stride,
                    dx:dx + (wo - 1) * stride + 1:stride, :]
            xs = np.ascontiguousarray(xs).reshape(n * ho * wo, cin)
            dw[dy, dx] = xs.T @ dmat
    db = dmat.sum(axis=0)
    return dw, db


class Conv2d:
    """3x3 or 1x1 convolution, stride 1 or 2, SAME-with-ceil padding."""

    def __init__(self, cin: int, cout: int, k: int, stride: int,
                 rng: np.random.Generator, name: str = "conv", dtype=np.float32):
        if k not in (1, 3):
            raise ConfigError(f"unsupported kernel size {k}")
        if stride not in (1, 2):
            raise ConfigError(f"unsupported stride {stride}")
        self.k, self.stride = k, stride
        fan = k * k
        self.w = Parameter(scaled_uniform(rng, (k, k, cin, cout),
                                          cin * fan, cout * fan, dtype), f"{name}.w")
        self.b = Parameter(np.zeros(cout, dtype=dtype), f"{name}.b")
        self._xp = None
        self._x_shape = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._xp = conv_forward(x, self.w.value, self.b.value, self.stride)
        self._x_shape = x.shape
        return out

    def backward(self, dout: np.ndarray, need_dx: bool = True) -> np.ndarray | None:
        dw, db = conv_backward_filters(self._xp, dout, self.k, self.stride)
        self.w.grad += dw
        self.b.grad += db
        dx = None
        if need_dx:
            dx = conv_backward_input(dout, self.w.value, self.stride, self._x_shape)
        self._xp = None
        return dx


class Deconv2d:
    """Stride-2 transpose convolution with an explicit output size.

    The output size of a strided transpose convolution is ambiguous
    (both 3->5 and 5->10 occur here), so the target is a constructor
    argument. Forward is the exact adjoint of the SAME-with-ceil
    convolution that maps target_hw back to the input size.
    """

    def __init__(self, cin: int, cout: int, k: int, stride: int,
                 target_hw: tuple[int, int], rng: np.random.Generator,
                 name: str = "deconv", dtype=np.float32):
        if stride != 2:
            raise ConfigError("deconv supports stride 2 only")
        self.k, self.stride, self.target_hw = k, stride, target_hw
        self.cin, self.cout = cin, cout
        fan = k * k
        # weights stored as the matching conv's filters: [k,k,Cout,Cin]
        self.w = Parameter(scaled_uniform(rng, (k, k, cout, cin),
                                          cin * fan, cout * fan, dtype), f"{name}.w")
        self.b = Parameter(np.zeros(cout, dtype=dtype), f"{name}.b")
        self._z = None

    def params(self):
        return [self.w, self.b]

    def _check(self, z: np.ndarray) -> None:
        th, tw = self.target_hw
        if (-(-th // self.stride), -(-tw // self.stride)) != z.shape[1:3]:
            raise ConfigError(
                f"deconv target {self.target_hw} is incompatible with input "
                f"{z.shape[1:3]} at stride {self.stride}")

    def forward(self, z: np.ndarray) -> np.ndarray:
        self._check(z)
        n = z.shape[0]
        th, tw = self.target_hw
        y = conv_backward_input(z, self.w.value, self.stride,
                                (n, th, tw, self.cout))
        y += self.b.value
        self._z = z
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dz, dyp = conv_forward(dy, self.w.value, None, self.stride)
        dw, _ = conv_backward_filters(dyp, self._z, self.k, self.stride)
        self.w.grad += dw
        self.b.grad += dy.sum(axis=(0, 1, 2))
        self._z = None
        return dz


class Dense:
    """Affine map on [N, F] inputs."""

    def __init__(self, fin: int, fout: int, rng: np.random.Generator,
                 name: str = "fc", dtype=np.float32):
        self.w = Parameter(scaled_uniform(rng, (fin, fout), fin, fout, dtype),
                           f"{name}.w")
        self.b = Parameter(np.zeros(fout, dtype=dtype), f"{name}.b")
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.w.shape[0]:
            raise ConfigError(f"dense input width {x.shape[1]} != {self.w.shape[0]}")
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, dout: np.ndarray, need_dx: bool = True) -> np.ndarray | None:
        self.w.grad += self._x.T @ dout
        self.b.grad += dout.sum(axis=0)
        dx = dout @ self.w.value.T if need_dx else None
        self._x = None
        return dx


class BatchNorm:
    """Per-channel batch normalization over the trailing axis.

    Train mode uses batch statistics (population variance) and updates the
    running stats by exponential moving average; eval mode uses the running
    stats. The reduction must cover at least 2 samples per channel in train
    mode, otherwise the variance is degenerate. Momentum 0.9 lets a few
    hundred training steps fully flush the initial running stats; slower
    decays leave enough of the init variance to distort eval forwards.
    """

    def __init__(self, c: int, name: str = "bn", eps: float = 1e-5,
                 momentum: float = 0.9, dtype=np.float32):
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(c, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(c, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self._xhat = None
        self._invstd = None
        self._mode = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        axes = tuple(range(x.ndim - 1))
        self._mode = mode
        if mode == "train":
            m = int(np.prod(x.shape[:-1]))
            if m < 2:
                raise ConfigError("batchnorm train mode needs >= 2 samples per channel")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean *= self.momentum
            self.running_mean += (1 - self.momentum) * mean
            self.running_var *= self.momentum
            self.running_var += (1 - self.momentum) * var
        else:
            mean, var = self.running_mean, self.running_var
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * invstd
        self._xhat, self._invstd = xhat, invstd
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        axes = tuple(range(dout.ndim - 1))
        xhat, invstd = self._xhat, self._invstd
        self.gamma.grad += (dout * xhat).sum(axis=axes)
        self.beta.grad += dout.sum(axis=axes)
        dxhat = dout * self.gamma.value
        if self._mode == "train":
            m = np.prod(dout.shape[:-1])
            dx = (invstd / m) * (m * dxhat - dxhat.sum(axis=axes)
                                 - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * invstd
        self._xhat = None
        return dx.astype(dout.dtype, copy=False)


class Dropout:
    """Inverted dropout: scales survivors by 1/(1-p) so eval is the identity."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability {p} outside [0, 1)")
        self.p = p
        self._mask = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, mode: str,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if mode != "train" or self.p == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.p
        self._mask = rng.random(x.shape, dtype=np.float32 if x.dtype == np.float32
                                else np.float64) < keep
        return x * (self._mask.astype(x.dtype) / keep)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return dout
        dx = dout * (self._mask.astype(dout.dtype) / (1.0 - self.p))
        self._mask = None
        return dx


class LeakyRelu:
    """max(x, slope*x); the encoder/discriminator activation (slope 0.2)."""

    def __init__(self, slope: float = 0.2):
        self.slope = slope
        self._out = None

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = np.where(x > 0, x, x * x.dtype.type(self.slope))
        self._out = out
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx = dout * np.where(self._out > 0, dout.dtype.type(1), dout.dtype.type(self.slope))
        self._out = None
        return dx


class Relu:
    """max(x, 0); the decoder/classifier activation."""

    def __init__(self):
        self._out = None

    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = np.maximum(x, 0)
        self._out = out
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx = dout * (self._out > 0)
        self._out = None
        return dx


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * out * (1.0 - out)


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Gradient through softmax given dL/d(probabilities)."""
    inner = (dout * out).sum(axis=-1, keepdims=True)
    return (dout - inner) * out


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, x * slope)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)
