"""The four batch commands: regions, train, predict, eval."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from .. import metrics, nn
from ..imaging import load_image, load_mask, quantize, save_label_png, save_png
from ..nets import (
    FusionNet,
    PixelNet,
    RegionNet,
    RegionSample,
    TrainedModel,
    fuse_forward,
    pixel_forward,
    region_saliency,
    train_joint,
    train_pixel_net,
    train_region_net,
)
from ..regions import format_merge_trace, generate_regions
from ..seeding import derive_seed
from .config import ConfigError, RunConfig
from .dataset import ManifestError, ingest, list_images, load_fixations
from .plots import fbeta_bars, pr_plot

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("crpsd", "psd", "rsd")
MODEL_FILE = "model.crpw"
SIDECAR_FILE = "model.cfg"
# config fields that define a trained model (paths are left out of the sidecar)
MODEL_KEYS = (
    "n", "compactness", "k", "t", "a", "m",
    "pixel_blocks", "pixel_convs", "pixel_up_channels",
    "region_window", "region_channels", "region_fc", "fusion_layers",
    "lr", "region_lr", "fusion_lr", "momentum", "clip_norm", "epochs", "region_epochs",
    "pixel_pretrain_epochs", "fusion_pretrain_epochs", "lam", "seed",
)  # fmt: skip


class CommandError(RuntimeError):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CRPSD_THREADS", "") or os.cpu_count() or 1))
    except ValueError:
        return 1


def _pmap(fn, items):
    items = list(items)
    workers = min(worker_count(), len(items)) or 1
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _regions(cfg: RunConfig, img):
    return generate_regions(img, n=cfg.n, compactness=cfg.compactness, config=cfg.cluster_config())


def _select_seed(cfg: RunConfig) -> int:
    return derive_seed("select", cfg.seed)


def _palette(count):
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(max(count, 1), 3), dtype=np.uint8)
    return pal


# -- regions ----------------------------------------------------------------


def cmd_regions(cfg: RunConfig, out_dir: str) -> list:
    """Superpixel/region diagnostics for every image. Returns the CSV rows."""
    manifest = list_images(cfg.image_dir, cfg.dataset)
    os.makedirs(out_dir, exist_ok=True)

    def work(entry):
        img = load_image(entry.image)
        labels, _, partition = _regions(cfg, img)
        return entry.stem, labels, partition

    rows = []
    for stem, labels, partition in _pmap(work, manifest):
        regions = partition.pixel_regions
        if partition.region_count <= 256:
            im = Image.fromarray(regions.astype(np.uint8), mode="P")
            im.putpalette(_palette(256).ravel().tolist())
            im.save(os.path.join(out_dir, f"{stem}.regions.png"), format="PNG")
        else:
            save_label_png(os.path.join(out_dir, f"{stem}.regions.png"), regions)
        save_label_png(os.path.join(out_dir, f"{stem}.superpixels.png"), labels)
        with open(os.path.join(out_dir, f"{stem}.merges.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_merge_trace(partition))
        rows.append((stem, int(labels.max()) + 1, partition.region_count))
    with open(os.path.join(out_dir, "regions.csv"), "w", encoding="utf-8") as fh:
        fh.write("image,superpixelCount,regionCount\n")
        for row in rows:
            fh.write("%s,%d,%d\n" % row)
    return rows


# -- model files --------------------------------------------------------------


def save_model(model: TrainedModel, cfg: RunConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, MODEL_FILE)
    nn.save_params(path, model.all_params())
    text = cfg.to_text().splitlines()
    keep = [line for line in text if line.split(" = ", 1)[0] in MODEL_KEYS]
    with open(os.path.join(out_dir, SIDECAR_FILE), "w", encoding="utf-8") as fh:
        fh.write("\n".join(keep) + "\n")
    return path


def load_model(path: str) -> tuple:
    """Load ``model.crpw`` and its sidecar; returns ``(model, config)``."""
    sidecar = os.path.join(os.path.dirname(os.path.abspath(path)), SIDECAR_FILE)
    if not os.path.isfile(path):
        raise CommandError(f"model file not found: {path}")
    if not os.path.isfile(sidecar):
        raise CommandError(f"model sidecar not found: {sidecar}")
    with open(sidecar, encoding="utf-8") as fh:
        cfg = RunConfig.from_text(fh.read())
    parts = TrainedModel.split_params(nn.load_params(path))
    ref = TrainedModel.init(cfg.pixel_config(), cfg.region_config(), cfg.fusion_config(), seed=cfg.seed)
    for name, net in (("pixel", ref.pixel), ("region", ref.region), ("fusion", ref.fusion)):
        got = parts[name]
        if set(got) != set(net.params):
            raise nn.ModelFormatError(f"{name} tensors do not match the sidecar configuration")
        for key, arr in net.params.items():
            if got[key].shape != arr.shape:
                raise nn.ModelFormatError(f"{name}/{key}: shape {got[key].shape}, expected {arr.shape}")
    model = TrainedModel(
        pixel=PixelNet(cfg.pixel_config(), parts["pixel"]),
        region=RegionNet(cfg.region_config(), parts["region"]),
        fusion=FusionNet(cfg.fusion_config(), parts["fusion"]),
        seed=cfg.seed,
    )
    return model, cfg


# -- train --------------------------------------------------------------------


def _write_log(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in row) + "\n")


def load_samples(cfg: RunConfig, manifest) -> list:
    def work(entry):
        img = load_image(entry.image)
        mask = load_mask(entry.mask, cfg.mask_threshold)
        if img.shape[:2] != mask.shape:
            raise CommandError(f"{entry.stem}: image and ground truth sizes differ")
        labels, feats, partition = _regions(cfg, img)
        return RegionSample(img, mask, labels, partition, feats, name=entry.stem)

    samples = _pmap(work, manifest)
    for s in samples:
        if s.mask.all() or not s.mask.any():
            log.warning("%s: ground truth has a single class; the balanced loss degenerates", s.name)
    return samples


def train_model(cfg: RunConfig, samples) -> tuple:
    """Staged training: region net, pixel/fusion pre-training, joint training.

    Returns ``(model, logs)`` with ``logs`` mapping file names to (header, rows).
    """
    model = TrainedModel.init(cfg.pixel_config(), cfg.region_config(), cfg.fusion_config(), seed=cfg.seed)
    logs = {}

    hist = train_region_net(
        samples, model.region, epochs=cfg.region_epochs, seed=derive_seed("train.region", cfg.seed),
        lr=cfg.region_lr, momentum=cfg.momentum, m=cfg.m,
    )  # fmt: skip
    logs["region_log.csv"] = ("epoch,loss", [(i + 1, v) for i, v in enumerate(hist.losses)])

    for s in samples:
        s.region_map = region_saliency(model, s.image, s.partition, s.labels, cfg.m, _select_seed(cfg), s.features)

    hist = train_pixel_net(
        samples, model.pixel, cfg.pixel_pretrain_epochs, seed=derive_seed("train.pixel", cfg.seed),
        lr=cfg.lr, momentum=cfg.momentum, clip_norm=cfg.clip_norm,
    )  # fmt: skip
    logs["pixel_pretrain_log.csv"] = ("epoch,loss", [(i + 1, v) for i, v in enumerate(hist.losses)])

    hist = train_joint(
        samples, model.pixel, model.fusion, epochs=cfg.fusion_pretrain_epochs,
        seed=derive_seed("train.fusion", cfg.seed), lr=cfg.lr, fusion_lr=cfg.fusion_lr,
        momentum=cfg.momentum, lam=0.0, train_pixel=False, clip_norm=cfg.clip_norm,
    )  # fmt: skip
    logs["fusion_pretrain_log.csv"] = ("epoch,loss", [(i + 1, v) for i, v in enumerate(hist.fusion_losses)])

    hist = train_joint(
        samples, model.pixel, model.fusion, epochs=cfg.epochs, seed=derive_seed("train.joint", cfg.seed),
        lr=cfg.lr, fusion_lr=cfg.fusion_lr, momentum=cfg.momentum, lam=cfg.lam, clip_norm=cfg.clip_norm,
    )  # fmt: skip
    logs["train_log.csv"] = (
        "epoch,loss,pixel_loss,fusion_loss",
        [(i + 1, a, b, c) for i, (a, b, c) in enumerate(zip(hist.losses, hist.pixel_losses, hist.fusion_losses))],
    )
    return model, logs


def cmd_train(cfg: RunConfig, out_dir: str) -> str:
    manifest = ingest(cfg.image_dir, cfg.mask_dir, name=cfg.dataset)
    samples = load_samples(cfg, manifest)
    model, logs = train_model(cfg, samples)
    path = save_model(model, cfg, out_dir)
    for fname, (header, rows) in logs.items():
        _write_log(os.path.join(out_dir, fname), header, rows)
    return path


# -- predict --------------------------------------------------------------------


def predict_maps(model: TrainedModel, cfg: RunConfig, img) -> dict:
    """RSD, PSD and CRPSD maps for one image."""
    labels, feats, partition = _regions(cfg, img)
    rsd = region_saliency(model, img, partition, labels, cfg.m, _select_seed(cfg), feats)
    psd = pixel_forward(model, img)
    crpsd = fuse_forward(model, img, psd, rsd)
    return {"rsd": rsd, "psd": psd, "crpsd": crpsd}


def encode_map(smap) -> np.ndarray:
    return np.clip(quantize(smap), 0, 255).astype(np.uint8)


def cmd_predict(cfg: RunConfig, out_dir: str) -> list:
    model_path = cfg.model or os.path.join(cfg.out_dir, MODEL_FILE)
    model, model_cfg = load_model(model_path)
    # region generation settings come from the model
    run_cfg = cfg.replace(**{k: getattr(model_cfg, k) for k in ("n", "compactness", "k", "t", "a", "m", "seed")})
    manifest = list_images(cfg.image_dir, cfg.dataset)
    os.makedirs(out_dir, exist_ok=True)

    def work(entry):
        return entry.stem, predict_maps(model, run_cfg, load_image(entry.image))

    written = []
    for stem, maps in _pmap(work, manifest):
        for method in METHODS:
            path = os.path.join(out_dir, f"{stem}.{method}.png")
            save_png(path, encode_map(maps[method]))
            written.append(path)
    return written


# -- eval -------------------------------------------------------------------------


def _load_prediction(path):
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return arr / 255.0


def evaluate(cfg: RunConfig, pred_dir: str) -> dict:
    """Per-method evaluation reports keyed by method name."""
    if cfg.image_dir:
        manifest = ingest(cfg.image_dir, cfg.mask_dir, cfg.fixation_dir or None, cfg.dataset)
    else:
        manifest = ingest(cfg.mask_dir, cfg.mask_dir, cfg.fixation_dir or None, cfg.dataset)
    methods = [m for m in METHODS if any(os.path.isfile(os.path.join(pred_dir, f"{e.stem}.{m}.png")) for e in manifest)]
    if not methods:
        raise CommandError(f"no predictions found in {pred_dir}")
    missing = [
        f"{e.stem}.{m}.png" for m in methods for e in manifest if not os.path.isfile(os.path.join(pred_dir, f"{e.stem}.{m}.png"))
    ]
    if missing:
        raise CommandError("missing predictions: " + ", ".join(missing))

    fixations = {e.stem: load_fixations(e.fixations) for e in manifest if e.fixations}
    masks = {e.stem: load_mask(e.mask, cfg.mask_threshold) for e in manifest}

    def negatives_for(stem, shape):
        h, w = shape
        others = [pts for s, pts in fixations.items() if s != stem]
        if not others:
            return None
        pts = np.concatenate(others)
        keep = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
        return pts[keep]

    reports = {}
    for method in methods:

        def work(entry, method=method):
            smap = _load_prediction(os.path.join(pred_dir, f"{entry.stem}.{method}.png"))
            gt = masks[entry.stem]
            if smap.shape != gt.shape:
                raise CommandError(f"{entry.stem}.{method}.png: size {smap.shape} differs from ground truth {gt.shape}")
            fix = fixations.get(entry.stem)
            neg = negatives_for(entry.stem, gt.shape) if fix is not None else None
            try:
                return metrics.evaluate_image(smap, gt, entry.stem, fix, neg)
            except metrics.EmptyGroundTruthError:
                return entry.stem

        results = _pmap(work, manifest)
        excluded = [r for r in results if isinstance(r, str)]
        for stem in excluded:
            log.warning("%s: empty ground truth, excluded from %s means", stem, method)
        per_image = [r for r in results if not isinstance(r, str)]
        if not per_image:
            raise CommandError(f"{method}: every ground truth is empty")
        reports[method] = metrics.aggregate(per_image, method, excluded)
    return reports


def report_json(reports: dict, dataset: str) -> dict:
    out = {"schemaVersion": SCHEMA_VERSION, "dataset": dataset, "methods": {}}
    for method, agg in reports.items():
        out["methods"][method] = {
            "dataset": agg.scalars(),
            "imageCount": len(agg.images),
            "excluded": list(agg.excluded),
            "images": [{"image": r.name, **r.scalars()} for r in agg.images],
        }
    return out


def cmd_eval(cfg: RunConfig, out_dir: str) -> dict:
    pred_dir = cfg.pred_dir or out_dir
    reports = evaluate(cfg, pred_dir)
    os.makedirs(out_dir, exist_ok=True)
    doc = report_json(reports, cfg.dataset)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    for method, agg in reports.items():
        with open(os.path.join(out_dir, f"pr_{method}.csv"), "w", encoding="utf-8") as fh:
            fh.write(agg.pr().to_csv())
    pr_plot(os.path.join(out_dir, "pr_curves.svg"), {m: r.pr() for m, r in reports.items()})
    fbeta_bars(os.path.join(out_dir, "fbeta.svg"), {m: (r.mean_fb, r.adaptive_fb) for m, r in reports.items()})
    return doc


__all__ = [
    "CommandError",
    "ConfigError",
    "ManifestError",
    "cmd_regions",
    "cmd_train",
    "cmd_predict",
    "cmd_eval",
    "train_model",
    "load_samples",
    "save_model",
    "load_model",
    "predict_maps",
    "evaluate",
    "report_json",
    "encode_map",
]
