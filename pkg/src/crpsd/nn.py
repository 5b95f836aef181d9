"""A small dense-tensor network engine on numpy.

Tensors are ``(N, C, H, W)`` arrays. Each operator comes as a forward
function returning ``(out, cache)`` and a backward function consuming the
upstream gradient and that cache.
"""
from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "conv2d",
    "conv2d_backward",
    "transposed_conv2d",
    "transposed_conv2d_backward",
    "max_pool2",
    "max_pool2_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "concat_channels",
    "concat_channels_backward",
    "balanced_xent_loss",
    "balanced_xent_with_logits",
    "binary_xent_with_logits",
    "SGD",
    "he_normal",
    "bilinear_kernel",
    "grad_check",
    "GradCheckReport",
    "save_params",
    "load_params",
    "dumps_params",
    "loads_params",
    "ModelFormatError",
    "PROB_EPS",
]

PROB_EPS = 1e-7
MAGIC = b"CRPW"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


# -- convolution ------------------------------------------------------------


def _windows(x, kh, kw, stride):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation. ``weight`` is ``(out_c, in_c, kh, kw)``."""
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ValueError(f"input has {c} channels, kernel expects {ic}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride)[:, :, :oh, :ow]
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out), (x.shape, xp, weight, stride, padding)


def conv2d_backward(grad, cache):
    """Returns ``(dx, dweight, dbias)``."""
    x_shape, xp, weight, stride, padding = cache
    oc, ic, kh, kw = weight.shape
    n, _, oh, ow = grad.shape
    win = _windows(xp, kh, kw, stride)[:, :, :oh, :ow]
    dweight = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
    dbias = grad.sum(axis=(0, 2, 3))
    dcol = np.tensordot(grad, weight, axes=([1], [0]))  # (n, oh, ow, ic, kh, kw)
    dxp = np.zeros(xp.shape, dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcol[..., i, j].transpose(0, 3, 1, 2)
    h, w = x_shape[2:]
    dx = dxp[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(dx), dweight, dbias


def transposed_conv2d(x, weight, stride=1, bias=None):
    """Adjoint of :func:`conv2d` without padding.

    ``weight`` is ``(in_c, out_c, kh, kw)``, the same array a convolution from
    ``out_c`` to ``in_c`` channels would use. Output side: ``(H-1)*stride + k``.
    """
    n, c, h, w = x.shape
    ic, oc, kh, kw = weight.shape
    if c != ic:
        raise ValueError(f"input has {c} channels, kernel expects {ic}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = np.zeros((n, oc, (h - 1) * stride + kh, (w - 1) * stride + kw), dtype=np.result_type(x, weight))
    col = np.tensordot(x, weight, axes=([1], [0]))  # (n, h, w, oc, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += col[..., i, j].transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out, (x, weight, stride)


def transposed_conv2d_backward(grad, cache):
    """Returns ``(dx, dweight, dbias)``."""
    x, weight, stride = cache
    ic, oc, kh, kw = weight.shape
    h, w = x.shape[2:]
    win = _windows(grad, kh, kw, stride)[:, :, :h, :w]  # (n, oc, h, w, kh, kw)
    dx = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dweight = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    dbias = grad.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dweight, dbias


# -- pooling and elementwise ------------------------------------------------


def max_pool2(x):
    """2x2 max pooling, stride 2. Odd sizes replicate the last row/column."""
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else x
    hh, ww = xp.shape[2] // 2, xp.shape[3] // 2
    blocks = xp.reshape(n, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww, 4)
    idx = blocks.argmax(axis=4)  # first max wins, row-major in the window
    out = np.take_along_axis(blocks, idx[..., None], axis=4)[..., 0]
    return out, (x.shape, idx)


def max_pool2_backward(grad, cache):
    (n, c, h, w), idx = cache
    hh, ww = idx.shape[2:]
    blocks = np.zeros((n, c, hh, ww, 4), dtype=grad.dtype)
    np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=4)
    dxp = blocks.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * ww)
    if 2 * hh != h:
        dxp[:, :, h - 1, :] += dxp[:, :, h, :]
    if 2 * ww != w:
        dxp[:, :, :, w - 1] += dxp[:, :, :, w]
    return np.ascontiguousarray(dxp[:, :, :h, :w])


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad, mask):
    return grad * mask


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(grad, out):
    return grad * out * (1.0 - out)


def concat_channels(inputs):
    shapes = {(t.shape[0],) + t.shape[2:] for t in inputs}
    if len(shapes) != 1:
        raise ValueError(f"cannot concatenate tensors of shapes {[t.shape for t in inputs]}")
    sizes = [t.shape[1] for t in inputs]
    return np.concatenate(inputs, axis=1), sizes


def concat_channels_backward(grad, sizes):
    return np.split(grad, np.cumsum(sizes)[:-1], axis=1)


# -- losses -----------------------------------------------------------------


def _balance(gt):
    gt = np.asarray(gt).astype(bool)
    alpha = 1.0 - gt.sum() / gt.size
    return gt, alpha


def balanced_xent_loss(pred, gt, eps=PROB_EPS):
    """Class-balanced cross-entropy summed over pixels.

    ``alpha = |Y-| / |Y|`` weighs the salient pixels and ``1 - alpha`` the
    background. Returns ``(loss, dloss/dpred)``.
    """
    pred = np.asarray(pred)
    if pred.shape != np.shape(gt):
        raise ValueError(f"prediction {pred.shape} and mask {np.shape(gt)} differ")
    gt, alpha = _balance(gt)
    p = np.clip(pred.astype(np.float64), eps, 1.0 - eps)
    loss = -alpha * np.log(p[gt]).sum() - (1.0 - alpha) * np.log1p(-p[~gt]).sum()
    grad = np.where(gt, -alpha / p, (1.0 - alpha) / (1.0 - p))
    inside = (pred > eps) & (pred < 1.0 - eps)
    return float(loss), (grad * inside).astype(pred.dtype)


def balanced_xent_with_logits(logits, gt, eps=PROB_EPS):
    """Same loss as :func:`balanced_xent_loss` on ``sigmoid(logits)``.

    Returns ``(loss, probabilities, dloss/dlogits)``.
    """
    logits = np.asarray(logits)
    if logits.shape != np.shape(gt):
        raise ValueError(f"prediction {logits.shape} and mask {np.shape(gt)} differ")
    p, _ = sigmoid(logits)
    gt, alpha = _balance(gt)
    pc = np.clip(p.astype(np.float64), eps, 1.0 - eps)
    loss = -alpha * np.log(pc[gt]).sum() - (1.0 - alpha) * np.log1p(-pc[~gt]).sum()
    inside = (p > eps) & (p < 1.0 - eps)
    grad = np.where(gt, -alpha * (1.0 - p), (1.0 - alpha) * p) * inside
    return float(loss), p, grad.astype(logits.dtype)


def binary_xent_with_logits(logits, target, eps=PROB_EPS):
    """Plain (unbalanced) binary cross-entropy averaged over elements."""
    p, _ = sigmoid(logits)
    target = np.asarray(target, dtype=np.float64)
    pc = np.clip(p.astype(np.float64), eps, 1.0 - eps)
    loss = -(target * np.log(pc) + (1 - target) * np.log1p(-pc)).mean()
    grad = (p - target) / p.size
    return float(loss), p, grad.astype(np.asarray(logits).dtype)


# -- optimisation -----------------------------------------------------------


@dataclass
class SGD:
    """Momentum SGD: ``v <- momentum*v - lr*g``; ``w <- w + v``. Updates in place.

    With ``clip_norm`` set, a step whose gradients have a larger global L2 norm
    is rescaled to that norm first.
    """

    lr: float = 1e-3
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)
    clip_norm: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    def step(self, params: dict, grads: dict) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, g in grads.items():
            w = params[name]
            if g.shape != w.shape:
                raise ValueError(f"{name}: gradient {g.shape} does not match parameter {w.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(w)
            v = self.momentum * v - self.lr * scale * g
            self.velocity[name] = v.astype(w.dtype)
            w += self.velocity[name]


def he_normal(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def bilinear_kernel(size: int) -> np.ndarray:
    """Separable bilinear upsampling kernel of side ``size`` (factor ceil(size/2))."""
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size)
    k1 = 1 - np.abs(og - center) / factor
    return np.outer(k1, k1)


# -- gradient verification --------------------------------------------------


@dataclass
class GradCheckReport:
    entries: list  # (name, flat index, analytic, numeric, relative error)

    @property
    def max_error(self) -> float:
        return max((e[4] for e in self.entries), default=0.0)

    def by_parameter(self) -> dict:
        out = {}
        for name, _, _, _, err in self.entries:
            out[name] = max(out.get(name, 0.0), err)
        return out


def grad_check(loss_fn, params: dict, fraction=0.05, step=1e-5, seed=0, min_samples=20) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)``. A random ``fraction`` of
    the scalar parameters (at least ``min_samples``) is probed. Parameters
    should be float64.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(params)
    names = list(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    count = min(total, max(min_samples, int(round(fraction * total))))
    picks = np.sort(rng.choice(total, size=count, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    entries = []
    for p in picks:
        t = int(np.searchsorted(offsets, p, side="right") - 1)
        name, idx = names[t], int(p - offsets[t])
        flat = params[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        up, _ = loss_fn(params)
        flat[idx] = orig - step
        down, _ = loss_fn(params)
        flat[idx] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(grads[name].reshape(-1)[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        entries.append((name, idx, analytic, numeric, err))
    return GradCheckReport(entries)


# -- serialization ----------------------------------------------------------


def dumps_params(params: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_params(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise ModelFormatError("not a CRPW parameter file")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format version {version}")
        pos = 12
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(data):
                raise ModelFormatError("truncated tensor data")
            params[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise ModelFormatError(f"truncated parameter file: {exc}") from exc
    if pos != len(data):
        raise ModelFormatError("trailing bytes after last tensor")
    return params


def save_params(path, params: dict) -> None:
    with open(os.fspath(path), "wb") as fh:
        fh.write(dumps_params(params))


def load_params(path) -> dict:
    with open(os.fspath(path), "rb") as fh:
        return loads_params(fh.read())
