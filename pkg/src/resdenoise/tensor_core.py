"""Minimal NHWC numeric kernel with hand-written backward rules.

Tensors are plain ``numpy.ndarray`` objects laid out as
``(batch, height, width, channels)`` in C order. Every forward function
returns ``(output, cache)``; the matching ``*_backward`` consumes the
upstream gradient and the cache. Convolution weights are stored as
``(kernel_h, kernel_w, in_channels, out_channels)``.

Training runs in float32. float64 is used for gradient verification only.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


@dataclass
class Parameter:
    """A named tensor with an accumulated gradient."""

    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Rng:
    """Seeded PCG64 source that hands out independent named streams.

    ``Rng(seed).stream("noise", "img-003", 4)`` always yields the same
    generator state, whatever other streams were drawn before it, so
    datasets can be materialised in any order.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    @staticmethod
    def _key(part) -> int:
        if isinstance(part, (int, np.integer)):
            return int(part) & 0xFFFFFFFF
        return zlib.crc32(str(part).encode("utf-8"))

    def stream(self, *names) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=tuple(self._key(n) for n in names))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, *names) -> "Rng":
        return Rng(int(self.stream(*names).integers(0, 2**63 - 1)))


def _check_rank4(x: np.ndarray, what: str = "input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 (batch, height, width, channels), got shape {x.shape}")


# -- convolution ----------------------------------------------------------


def conv2d(x, weight, bias, stride: int = 1):
    """Zero-padded 'same' convolution with a 1x1 or 3x3 kernel.

    With ``stride=2`` the output is ``ceil(h/2) x ceil(w/2)``; the feature
    extractor uses that mode.
    """
    _check_rank4(x)
    kh, kw, cin, cout = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"kernel must be 1x1 or 3x3, got weight shape {weight.shape}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} incompatible with weight shape {weight.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"unsupported stride {stride}")
    n, h, w, _ = x.shape
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    if kh == 1:
        cols = xp[:, ::stride, ::stride, :].reshape(-1, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        # (n, ho, wo, cin, kh, kw) -> (n, ho, wo, kh, kw, cin)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    out = cols @ weight.reshape(-1, cout) + bias
    cache = (x.shape, cols, weight, stride)
    return out.reshape(n, ho, wo, cout), cache


def conv2d_backward(dout, cache):
    """Return ``(dx, dweight, dbias)``."""
    xshape, cols, weight, stride = cache
    kh, kw, cin, cout = weight.shape
    n, h, w, _ = xshape
    d2 = dout.reshape(-1, cout)
    dweight = (cols.T @ d2).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    dcols = d2 @ weight.reshape(-1, cout).T
    ho, wo = dout.shape[1], dout.shape[2]
    if kh == 1:
        dx = np.zeros(xshape, dtype=dout.dtype)
        dx[:, ::stride, ::stride, :] = dcols.reshape(n, ho, wo, cin)
        return dx, dweight, dbias
    pad = kh // 2
    dcols = dcols.reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    return dxp[:, pad:pad + h, pad:pad + w, :], dweight, dbias


def conv2d_transpose(x, weight, bias):
    """2x2, stride-2 transposed convolution: (h, w) -> (2h, 2w).

    Each input pixel scatters ``x[n, i, j] @ weight[a, b]`` to output
    pixel ``(2i + a, 2j + b)``.
    """
    _check_rank4(x)
    if weight.ndim != 4 or weight.shape[:2] != (2, 2):
        raise ShapeError(f"transposed conv expects a 2x2 kernel, got weight shape {weight.shape}")
    _, _, cin, cout = weight.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d_transpose: input shape {x.shape} incompatible with weight shape {weight.shape}")
    n, h, w, _ = x.shape
    wmat = weight.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    y = (x.reshape(-1, cin) @ wmat).reshape(n, h, w, 2, 2, cout)
    y = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, cout) + bias
    return y, (x, weight)


def conv2d_transpose_backward(dout, cache):
    x, weight = cache
    _, _, cin, cout = weight.shape
    n, h, w, _ = x.shape
    d = dout.reshape(n, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
    wmat = weight.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    dx = (d @ wmat.T).reshape(x.shape)
    dweight = (x.reshape(-1, cin).T @ d).reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3)
    dbias = dout.reshape(-1, cout).sum(axis=0)
    return dx, np.ascontiguousarray(dweight), dbias


# -- pooling --------------------------------------------------------------


def maxpool2(x):
    """2x2 max pool with stride 2.

    Backward routes the gradient to the first maximal element of each
    window in row-major order.
    """
    _check_rank4(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got shape {x.shape}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    xshape, idx = cache
    n, h, w, c = xshape
    dwin = np.zeros(idx.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(xshape)
    return dx


# -- normalisation --------------------------------------------------------


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray


def batchnorm(x, gamma, beta, state: BatchNormState, train: bool, eps: float = BN_EPSILON,
              momentum: float = BN_MOMENTUM):
    """Per-channel batch normalisation.

    In train mode the batch statistics (biased variance) normalise the
    input and are folded into ``state`` with ``momentum``; in infer mode
    the running statistics are used and ``state`` is left alone.
    """
    _check_rank4(x)
    if x.shape[0] == 0 or x.size == 0:
        raise ShapeError(f"batchnorm got an empty batch, shape {x.shape}")
    if gamma.shape != (x.shape[3],):
        raise ShapeError(f"batchnorm: gamma shape {gamma.shape} incompatible with input shape {x.shape}")
    if train:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        state.running_mean[...] = momentum * state.running_mean + (1 - momentum) * mean
        state.running_var[...] = momentum * state.running_var + (1 - momentum) * var
    else:
        mean = state.running_mean.astype(x.dtype, copy=False)
        var = state.running_var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma, train)


def batchnorm_backward(dout, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    m = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
    return dx, dgamma, dbeta


# -- elementwise ----------------------------------------------------------


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    # saturated values round to exactly 0 or 1; keep them strictly inside
    if np.issubdtype(out.dtype, np.floating):
        info = np.finfo(out.dtype)
        np.clip(out, info.smallest_subnormal, 1.0 - info.epsneg, out=out)
    return out, out


def sigmoid_backward(dout, out):
    return dout * out * (1.0 - out)


def silu(x):
    s, _ = sigmoid(x)
    return x * s, (x, s)


def silu_backward(dout, cache):
    x, s = cache
    return dout * s * (1.0 + x * (1.0 - s))


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


def concat_channels(a, b):
    if a.ndim != 4 or b.ndim != 4 or a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} are incompatible")
    return np.concatenate([a, b], axis=3), a.shape[3]


def concat_channels_backward(dout, split):
    return dout[..., :split], dout[..., split:]


# -- verification ---------------------------------------------------------


class GradCheckError(ArithmeticError):
    pass


def grad_check(f: Callable[[], float], params: Sequence[Parameter], step: float = 1e-4) -> float:
    """Compare analytic gradients with central finite differences.

    ``f`` evaluates the scalar loss for the current parameter values and,
    as a side effect, writes the analytic gradient into every
    ``param.grad``. Parameters should hold float64 values.

    Returns the max over all elements of
    ``|analytic - numeric| / max(1, |numeric|)``. The analytic gradients
    are left in ``param.grad`` afterwards.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    base = f()
    if not np.isfinite(base):
        raise GradCheckError(f"non-finite loss {base!r} at the unperturbed point")
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite loss while perturbing {p.name}[{i}]")
            num = (fp - fm) / (2 * step)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    for p, g in zip(params, analytic):
        p.grad = g
    return worst


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()
