"""Pixel-level, region-level and fusion networks, and their training loops."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .imaging import resize_bilinear
from .regions import RegionPartition, centerline_superpixels
from .superpixel import SuperpixelFeatures, superpixel_features

log = logging.getLogger(__name__)

__all__ = [
    "PixelNetConfig",
    "RegionNetConfig",
    "FusionNetConfig",
    "PixelNet",
    "RegionNet",
    "FusionNet",
    "TrainedModel",
    "RegionSample",
    "pixel_forward",
    "region_window",
    "region_windows",
    "region_saliency",
    "fuse_forward",
    "train_region_net",
    "train_pixel_net",
    "train_joint",
    "image_tensor",
    "fusion_input",
]


def image_tensor(img, dtype=np.float32):
    """(H, W, 3) uint8 -> (1, 3, H, W), zero-centred."""
    x = np.asarray(img, dtype=np.float64).transpose(2, 0, 1)[None] / 255.0 - 0.5
    return x.astype(dtype)


def fusion_input(img, pixel_map, region_map, dtype=np.float32):
    """Stack RGB in [0, 1] with the two saliency maps: (1, 5, H, W)."""
    img = np.asarray(img)
    if not (img.shape[:2] == np.shape(pixel_map) == np.shape(region_map)):
        raise ValueError("image and saliency maps must share dimensions")
    rgb = img.astype(np.float64).transpose(2, 0, 1) / 255.0
    return np.concatenate([rgb, np.asarray(pixel_map)[None], np.asarray(region_map)[None]])[None].astype(dtype)


# -- pixel-level network ----------------------------------------------------


@dataclass(frozen=True)
class PixelNetConfig:
    block_channels: tuple = (16, 32, 64, 64)
    convs_per_block: int = 2
    up_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if len(self.block_channels) < 2:
            raise ValueError("the pixel net needs at least two blocks")

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.block_channels)


class PixelNet:
    """Conv blocks; the last two block outputs are upsampled, stacked and scored."""

    def __init__(self, config: PixelNetConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: PixelNetConfig, rng, dtype=np.float32):
        p = {}
        in_c = 3
        for b, out_c in enumerate(config.block_channels):
            for c in range(config.convs_per_block):
                p[f"block{b}.conv{c}.weight"] = nn.he_normal(rng, (out_c, in_c, 3, 3), in_c * 9, dtype)
                p[f"block{b}.conv{c}.bias"] = np.zeros(out_c, dtype)
                in_c = out_c
        for j, (b, stride) in enumerate(cls._up_layers(config)):
            ch = config.block_channels[b]
            mix = rng.standard_normal((ch, config.up_channels, 1, 1)) * np.sqrt(2.0 / ch)
            p[f"up{j}.weight"] = (mix * nn.bilinear_kernel(2 * stride)).astype(dtype)
            p[f"up{j}.bias"] = np.zeros(config.up_channels, dtype)
        fan = 2 * config.up_channels
        p["score.weight"] = nn.he_normal(rng, (1, fan, 1, 1), fan, dtype)
        p["score.bias"] = np.zeros(1, dtype)
        return cls(config, p)

    @staticmethod
    def _up_layers(config):
        nb = len(config.block_channels)
        return [(nb - 2, 2 ** (nb - 1)), (nb - 1, 2**nb)]

    def forward(self, x):
        """(N, 3, H, W) with H, W divisible by the total stride -> logits (N, 1, H, W)."""
        p, cfg = self.params, self.config
        h, w = x.shape[2:]
        if h % cfg.total_stride or w % cfg.total_stride:
            raise ValueError(f"input {h}x{w} not divisible by {cfg.total_stride}")
        caches = []
        outs = []
        t = x
        for b in range(len(cfg.block_channels)):
            for c in range(cfg.convs_per_block):
                t, cc = nn.conv2d(t, p[f"block{b}.conv{c}.weight"], p[f"block{b}.conv{c}.bias"], padding=1)
                t, rc = nn.relu(t)
                caches.append((cc, rc))
            t, pc = nn.max_pool2(t)
            caches.append(pc)
            outs.append(t)
        ups, up_caches = [], []
        for j, (b, stride) in enumerate(self._up_layers(cfg)):
            u, uc = nn.transposed_conv2d(outs[b], p[f"up{j}.weight"], stride, p[f"up{j}.bias"])
            off = stride // 2
            ups.append(u[:, :, off : off + h, off : off + w])
            up_caches.append((uc, u.shape, off))
        cat, sizes = nn.concat_channels(ups)
        logits, sc = nn.conv2d(cat, p["score.weight"], p["score.bias"])
        return logits, (caches, up_caches, sizes, sc, (h, w))

    def backward(self, dlogits, cache) -> dict:
        p, cfg = self.params, self.config
        caches, up_caches, sizes, sc, (h, w) = cache
        g = {}
        dcat, g["score.weight"], g["score.bias"] = nn.conv2d_backward(dlogits, sc)
        dups = nn.concat_channels_backward(dcat, sizes)
        nb = len(cfg.block_channels)
        dblock = [None] * nb
        for j, (b, _) in enumerate(self._up_layers(cfg)):
            uc, ushape, off = up_caches[j]
            du = np.zeros(ushape, dtype=dlogits.dtype)
            du[:, :, off : off + h, off : off + w] = dups[j]
            dblock[b], g[f"up{j}.weight"], g[f"up{j}.bias"] = nn.transposed_conv2d_backward(du, uc)
        it = iter(reversed(caches))
        dt = None
        for b in reversed(range(nb)):
            if dblock[b] is not None:
                dt = dblock[b] if dt is None else dt + dblock[b]
            dt = nn.max_pool2_backward(dt, next(it))
            for c in reversed(range(cfg.convs_per_block)):
                cc, rc = next(it)
                dt = nn.relu_backward(dt, rc)
                dt, g[f"block{b}.conv{c}.weight"], g[f"block{b}.conv{c}.bias"] = nn.conv2d_backward(dt, cc)
        return g


def _pad_to_multiple(x, mult):
    h, w = x.shape[2:]
    ph, pw = (-h) % mult, (-w) % mult
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return x


# -- region-level network ---------------------------------------------------


@dataclass(frozen=True)
class RegionNetConfig:
    window_size: int = 51
    conv_channels: tuple = (16, 32, 64)
    fc_widths: tuple = (64, 1)

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "fc_widths", tuple(int(c) for c in self.fc_widths))
        if not self.fc_widths or self.fc_widths[-1] != 1:
            raise ValueError("the region net must end in a single output")

    @property
    def feature_size(self) -> int:
        s = self.window_size
        for _ in self.conv_channels:
            s = (s + 1) // 2
        return s


class RegionNet:
    """conv3x3 -> relu -> pool per stage, then fully connected layers.

    Fully connected layers are convolutions whose kernel spans the whole
    feature map (first) or 1x1 (the rest).
    """

    def __init__(self, config: RegionNetConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: RegionNetConfig, rng, dtype=np.float32):
        p = {}
        in_c = 3
        for i, out_c in enumerate(config.conv_channels):
            p[f"conv{i}.weight"] = nn.he_normal(rng, (out_c, in_c, 3, 3), in_c * 9, dtype)
            p[f"conv{i}.bias"] = np.zeros(out_c, dtype)
            in_c = out_c
        k = config.feature_size
        for i, out_c in enumerate(config.fc_widths):
            fan = in_c * k * k
            p[f"fc{i}.weight"] = nn.he_normal(rng, (out_c, in_c, k, k), fan, dtype)
            p[f"fc{i}.bias"] = np.zeros(out_c, dtype)
            in_c, k = out_c, 1
        return cls(config, p)

    def forward(self, x):
        """(N, 3, S, S) windows -> logits (N,)."""
        p, cfg = self.params, self.config
        caches = []
        t = x
        for i in range(len(cfg.conv_channels)):
            t, cc = nn.conv2d(t, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=1)
            t, rc = nn.relu(t)
            t, pc = nn.max_pool2(t)
            caches.append((cc, rc, pc))
        nfc = len(cfg.fc_widths)
        for i in range(nfc):
            t, fc = nn.conv2d(t, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
            rc = None
            if i < nfc - 1:
                t, rc = nn.relu(t)
            caches.append((fc, rc))
        return t.reshape(-1), (caches, t.shape)

    def backward(self, dlogits, cache) -> dict:
        cfg = self.config
        caches, shape = cache
        g = {}
        dt = dlogits.reshape(shape)
        nconv = len(cfg.conv_channels)
        for i in reversed(range(len(cfg.fc_widths))):
            fc, rc = caches[nconv + i]
            if rc is not None:
                dt = nn.relu_backward(dt, rc)
            dt, g[f"fc{i}.weight"], g[f"fc{i}.bias"] = nn.conv2d_backward(dt, fc)
        for i in reversed(range(nconv)):
            cc, rc, pc = caches[i]
            dt = nn.max_pool2_backward(dt, pc)
            dt = nn.relu_backward(dt, rc)
            dt, g[f"conv{i}.weight"], g[f"conv{i}.bias"] = nn.conv2d_backward(dt, cc)
        return g

    def predict(self, windows, batch_size=64) -> np.ndarray:
        """Sigmoid outputs for a stack of (N, S, S, 3) windows."""
        out = []
        dtype = self.params["conv0.weight"].dtype
        for s in range(0, len(windows), batch_size):
            chunk = np.asarray(windows[s : s + batch_size], dtype=np.float64)
            x = (chunk.transpose(0, 3, 1, 2) / 255.0 - 0.5).astype(dtype)
            logits, _ = self.forward(x)
            out.append(nn.sigmoid(logits.astype(np.float64))[0])
        return np.concatenate(out) if out else np.zeros(0)


# -- fusion network ---------------------------------------------------------


@dataclass(frozen=True)
class FusionNetConfig:
    # (out_channels, kernel) per layer; padding keeps the spatial size
    layers: tuple = ((16, 3), (16, 3), (1, 3))

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((int(c), int(k)) for c, k in self.layers))
        if self.layers[-1][0] != 1:
            raise ValueError("the fusion net must emit one channel")
        if any(k % 2 == 0 for _, k in self.layers):
            raise ValueError("fusion kernels must have odd size")


class FusionNet:
    IN_CHANNELS = 5

    def __init__(self, config: FusionNetConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: FusionNetConfig, rng, dtype=np.float32):
        p = {}
        in_c = cls.IN_CHANNELS
        for i, (out_c, k) in enumerate(config.layers):
            p[f"conv{i}.weight"] = nn.he_normal(rng, (out_c, in_c, k, k), in_c * k * k, dtype)
            p[f"conv{i}.bias"] = np.zeros(out_c, dtype)
            in_c = out_c
        return cls(config, p)

    def forward(self, x):
        if x.shape[1] != self.IN_CHANNELS:
            raise ValueError(f"fusion input needs {self.IN_CHANNELS} channels, got {x.shape[1]}")
        caches = []
        t = x
        last = len(self.config.layers) - 1
        for i, (_, k) in enumerate(self.config.layers):
            t, cc = nn.conv2d(t, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], padding=k // 2)
            rc = None
            if i < last:
                t, rc = nn.relu(t)
            caches.append((cc, rc))
        return t, caches

    def backward(self, dlogits, caches):
        """Returns ``(grads, dinput)``."""
        g = {}
        dt = dlogits
        for i in reversed(range(len(self.config.layers))):
            cc, rc = caches[i]
            if rc is not None:
                dt = nn.relu_backward(dt, rc)
            dt, g[f"conv{i}.weight"], g[f"conv{i}.bias"] = nn.conv2d_backward(dt, cc)
        return g, dt


# -- assembled model --------------------------------------------------------


@dataclass
class TrainedModel:
    pixel: PixelNet
    region: RegionNet
    fusion: FusionNet
    seed: int = 0

    @classmethod
    def init(cls, pixel_cfg=PixelNetConfig(), region_cfg=RegionNetConfig(), fusion_cfg=FusionNetConfig(), seed=0, dtype=np.float32):
        from .seeding import derive_seed

        return cls(
            pixel=PixelNet.init(pixel_cfg, np.random.default_rng(derive_seed("init.pixel", seed)), dtype),
            region=RegionNet.init(region_cfg, np.random.default_rng(derive_seed("init.region", seed)), dtype),
            fusion=FusionNet.init(fusion_cfg, np.random.default_rng(derive_seed("init.fusion", seed)), dtype),
            seed=seed,
        )

    def all_params(self) -> dict:
        out = {}
        for prefix, net in (("pixel", self.pixel), ("region", self.region), ("fusion", self.fusion)):
            for k, v in net.params.items():
                out[f"{prefix}/{k}"] = v
        return out

    @staticmethod
    def split_params(flat: dict) -> dict:
        out = {"pixel": {}, "region": {}, "fusion": {}}
        for key, v in flat.items():
            prefix, _, name = key.partition("/")
            if prefix not in out:
                raise nn.ModelFormatError(f"unexpected tensor {key}")
            out[prefix][name] = v
        return out


def _pixel_logits(net: PixelNet, img):
    x = image_tensor(img, net.params["score.weight"].dtype)
    h, w = x.shape[2:]
    xp = _pad_to_multiple(x, net.config.total_stride)
    logits, cache = net.forward(xp)
    return logits, cache, (h, w)


def pixel_forward(model, img) -> np.ndarray:
    """Pixel-level saliency map with the same size as ``img``.

    ``model`` is a :class:`TrainedModel` or a bare :class:`PixelNet`.
    """
    net = model.pixel if isinstance(model, TrainedModel) else model
    img = np.asarray(img)
    if min(img.shape[:2]) < net.config.total_stride:
        raise ValueError(f"image {img.shape[1]}x{img.shape[0]} smaller than the total stride {net.config.total_stride}")
    logits, _, (h, w) = _pixel_logits(net, img)
    prob, _ = nn.sigmoid(logits[0, 0, :h, :w].astype(np.float64))
    return prob


def fuse_forward(model, img, pixel_map, region_map) -> np.ndarray:
    net = model.fusion if isinstance(model, TrainedModel) else model
    x = fusion_input(img, pixel_map, region_map, net.params["conv0.weight"].dtype)
    logits, _ = net.forward(x)
    prob, _ = nn.sigmoid(logits[0, 0].astype(np.float64))
    return prob


# -- region windows ---------------------------------------------------------


def region_window(img, center, out_size: int) -> np.ndarray:
    """Square context window around ``center`` = (x, y) that contains the image.

    Area outside the image is filled with the image's mean colour; the window
    is then resized to ``out_size`` square and returned as uint8.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    cx, cy = int(center[0]), int(center[1])
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"center {center} outside the {w}x{h} image")
    half = max(cx, w - 1 - cx, cy, h - 1 - cy)
    side = 2 * half + 1
    fill = np.floor(img.reshape(-1, img.shape[2]).mean(axis=0) + 0.5).astype(np.uint8)
    win = np.empty((side, side, img.shape[2]), dtype=np.uint8)
    win[:] = fill
    y0, x0 = half - cy, half - cx
    win[y0 : y0 + h, x0 : x0 + w] = img
    return np.clip(np.floor(resize_bilinear(win, out_size, out_size) + 0.5), 0, 255).astype(np.uint8)


def _centers(features: SuperpixelFeatures, shape):
    h, w = shape
    cx = np.clip(np.rint(features.xy[:, 0]).astype(np.int64), 0, w - 1)
    cy = np.clip(np.rint(features.xy[:, 1]).astype(np.int64), 0, h - 1)
    return cx, cy


def region_windows(img, partition: RegionPartition, labels, m=5, seed=None, out_size=51, features=None):
    """Windows for every region's centerline superpixels.

    Returns ``(windows, owner)`` where ``owner[i]`` is the region of window i.
    """
    if features is None:
        features = superpixel_features(np.zeros(np.shape(labels) + (3,)), labels)
    chosen = centerline_superpixels(partition, labels, m=m, seed=seed, features=features)
    cx, cy = _centers(features, np.shape(labels))
    windows, owner = [], []
    for r, sps in enumerate(chosen):
        for s in sps:
            windows.append(region_window(img, (cx[s], cy[s]), out_size))
            owner.append(r)
    return np.array(windows), np.array(owner, dtype=np.int64)


def region_saliency(model, img, partition: RegionPartition, labels, m=5, seed=None, features=None) -> np.ndarray:
    """Paint each region with the mean region-net score of its windows."""
    net = model.region if isinstance(model, TrainedModel) else model
    windows, owner = region_windows(img, partition, labels, m, seed, net.config.window_size, features)
    scores = net.predict(windows)
    sums = np.bincount(owner, weights=scores, minlength=partition.region_count)
    counts = np.bincount(owner, minlength=partition.region_count)
    value = sums / np.maximum(counts, 1)
    return value[partition.region_of[np.asarray(labels)]]


# -- training ---------------------------------------------------------------


@dataclass
class RegionSample:
    """An image with its ground truth and precomputed region partition."""

    image: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    partition: RegionPartition
    features: SuperpixelFeatures | None = None
    region_map: np.ndarray | None = None
    name: str = ""


def _region_training_set(samples, m, window_size, rng):
    windows, targets = [], []
    for s in samples:
        win, owner = region_windows(s.image, s.partition, s.labels, m, rng, window_size, s.features)
        pix_region = s.partition.region_of[s.labels]
        gt_mean = np.bincount(pix_region.ravel(), weights=np.asarray(s.mask, dtype=np.float64).ravel(), minlength=s.partition.region_count)
        gt_mean /= np.bincount(pix_region.ravel(), minlength=s.partition.region_count)
        windows.append(win)
        targets.append((gt_mean[owner] >= 0.5).astype(np.float64))
    return np.concatenate(windows), np.concatenate(targets)


@dataclass
class TrainingHistory:
    losses: list = field(default_factory=list)
    pixel_losses: list = field(default_factory=list)
    fusion_losses: list = field(default_factory=list)


def train_region_net(samples, net: RegionNet, epochs=30, seed=0, lr=1e-2, momentum=0.9, m=5, batch_size=16):
    """Train ``net`` in place on region windows; returns the per-epoch mean BCE."""
    if not samples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    windows, targets = _region_training_set(samples, m, net.config.window_size, rng)
    dtype = net.params["conv0.weight"].dtype
    x_all = (windows.astype(np.float64).transpose(0, 3, 1, 2) / 255.0 - 0.5).astype(dtype)
    opt = nn.SGD(lr=lr, momentum=momentum)
    history = TrainingHistory()
    for epoch in range(epochs):
        order = rng.permutation(len(targets))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            logits, cache = net.forward(x_all[idx])
            loss, _, dlogits = nn.binary_xent_with_logits(logits, targets[idx])
            total += loss * len(idx)
            opt.step(net.params, net.backward(dlogits, cache))
        history.losses.append(total / len(targets))
        log.debug("region epoch %d loss %.6f", epoch + 1, history.losses[-1])
    return history


def train_pixel_net(samples, net: PixelNet, epochs, seed=0, lr=1e-2, momentum=0.9, clip_norm=1.0):
    """Pixel net alone under the balanced loss (pre-training stage)."""
    if not samples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    opt = nn.SGD(lr=lr, momentum=momentum, clip_norm=clip_norm)
    history = TrainingHistory()
    for _ in range(epochs):
        total = 0.0
        for i in rng.permutation(len(samples)):
            s = samples[i]
            logits, cache, (h, w) = _pixel_logits(net, s.image)
            gt = _pad_mask(s.mask, logits.shape[2:])
            loss, _, dl = _masked_balanced(logits[0, 0], gt, (h, w))
            total += loss
            opt.step(net.params, net.backward(dl[None, None] / (h * w), cache))
        history.losses.append(total / len(samples))
    return history


def _pad_mask(mask, shape):
    out = np.zeros(shape, dtype=bool)
    out[: mask.shape[0], : mask.shape[1]] = np.asarray(mask).astype(bool)
    return out


def _masked_balanced(logits2d, gt_padded, size):
    # loss only on the unpadded area; padded positions get zero gradient
    h, w = size
    loss, p, g = nn.balanced_xent_with_logits(logits2d[:h, :w], gt_padded[:h, :w])
    full = np.zeros_like(logits2d)
    full[:h, :w] = g
    return loss, p, full


def train_joint(
    samples,
    pixel: PixelNet,
    fusion: FusionNet,
    epochs=200,
    seed=0,
    lr=1e-2,
    momentum=0.9,
    lam=1.0,
    train_pixel=True,
    callback=None,
    fusion_lr=None,
    clip_norm=1.0,
):
    """Jointly train pixel and fusion nets in place; region maps stay fixed.

    Per image the loss is balanced_xent(fused) + lam * balanced_xent(pixel
    map). The fused loss also reaches the pixel net through the pixel-map
    input channel. Gradients are divided by the pixel count before the SGD
    step. ``samples`` need their ``region_map`` filled in. ``fusion_lr``
    defaults to ``lr``; each optimizer clips its step to ``clip_norm``
    (``None`` disables clipping). Returns per-epoch mean losses (pixel sums).
    """
    if not samples:
        raise ValueError("empty training set")
    if any(s.region_map is None for s in samples):
        raise ValueError("samples need precomputed region maps")
    rng = np.random.default_rng(seed)
    opt = nn.SGD(lr=lr, momentum=momentum, clip_norm=clip_norm)
    fopt = nn.SGD(lr=fusion_lr or lr, momentum=momentum, clip_norm=clip_norm)
    history = TrainingHistory()
    for epoch in range(epochs):
        tot = tot_p = tot_f = 0.0
        for i in rng.permutation(len(samples)):
            s = samples[i]
            loss, lp, lf, grads = joint_loss_and_grads(s.image, s.mask, s.region_map, pixel, fusion, lam, train_pixel)
            n_pix = s.mask.size
            grads = {k: v / n_pix for k, v in grads.items()}
            tot, tot_p, tot_f = tot + loss, tot_p + lp, tot_f + lf
            pix_g = {k[6:]: v for k, v in grads.items() if k.startswith("pixel/")}
            fus_g = {k[7:]: v for k, v in grads.items() if k.startswith("fusion/")}
            _step(opt, "pixel/", pixel.params, pix_g)
            _step(fopt, "fusion/", fusion.params, fus_g)
        n = len(samples)
        history.losses.append(tot / n)
        history.pixel_losses.append(tot_p / n)
        history.fusion_losses.append(tot_f / n)
        if callback is not None:
            callback(epoch, history)
    return history


def _step(opt, prefix, params, grads):
    if not grads:
        return
    prefixed = {prefix + k: params[k] for k in grads}
    opt.step(prefixed, {prefix + k: v for k, v in grads.items()})


def joint_loss_and_grads(img, mask, region_map, pixel: PixelNet, fusion: FusionNet, lam=1.0, train_pixel=True):
    """Loss and gradients of the composite pixel + fusion graph for one image.

    Returns ``(total, pixel_loss, fusion_loss, grads)`` with grads keyed
    ``pixel/<name>`` and ``fusion/<name>``.
    """
    logits, cache, (h, w) = _pixel_logits(pixel, img)
    gt_pad = _pad_mask(mask, logits.shape[2:])
    lp, pmap, dlp = _masked_balanced(logits[0, 0], gt_pad, (h, w))
    dtype = fusion.params["conv0.weight"].dtype
    x = fusion_input(img, pmap, region_map, dtype)
    flogits, fcache = fusion.forward(x)
    lf, _, dlf = nn.balanced_xent_with_logits(flogits[0, 0], np.asarray(mask).astype(bool))
    fgrads, dx = fusion.backward(dlf[None, None].astype(dtype), fcache)
    grads = {f"fusion/{k}": v for k, v in fgrads.items()}
    if train_pixel:
        # d(fused loss)/d(pixel map) -> d/d(pixel logits) through the sigmoid
        dmap = np.zeros_like(logits[0, 0])
        dmap[:h, :w] = dx[0, 3] * pmap * (1.0 - pmap)
        dlogits = (lam * dlp + dmap)[None, None].astype(logits.dtype)
        grads.update({f"pixel/{k}": v for k, v in pixel.backward(dlogits, cache).items()})
    return lf + lam * lp, lp, lf, grads
