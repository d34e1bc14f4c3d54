"""Training (Adam on the mixed loss), evaluation and single-file denoising."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import AdamState, Checkpoint
from .data import (
    AugmentConfig,
    DatasetSplit,
    ImageRecord,
    NoiseConfig,
    add_noise,
    augment,
    load_image,
    preprocess,
    save_image,
)
from .model import FeatureExtractor, ModelConfig, ResUNet, init_resunet
from .objectives import LossConfig, SsimParams, combined_loss, psnr_paper, psnr_standard, ssim
from .tensor_core import Rng, ShapeError, zero_grads

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "psnr_paper_noisy",
    "psnr_std_noisy",
    "ssim_noisy",
    "psnr_paper_denoised",
    "psnr_std_denoised",
    "ssim_denoised",
)
METRICS_HEADER = ("id", "source", "sigma") + METRIC_COLUMNS


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-4
    alpha: float = 0.8
    batch_size: int = 8
    seed: int = 0
    keep_best_on_val: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    extractor_channels: tuple = (16, 32, 64)
    extractor_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        LossConfig(self.alpha)


def adam_step(params, state: AdamState, lr: float):
    """One bias-corrected Adam update of every trainable parameter, in place.

    All gradients are checked before anything is modified; a non-finite
    gradient raises ``NumericalError`` naming the parameter and leaves
    parameters and state untouched.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for parameter {p.name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        g = p.grad.astype(p.value.dtype, copy=False)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.value.dtype, copy=False)


def _stack(records):
    return np.concatenate([r.pixels for r in records], axis=0)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


def _val_inputs(records, cfg: TrainConfig, rng: Rng):
    noisy = [add_noise(r, cfg.noise, rng.stream("val-noise", r.id))[0] for r in records]
    return _stack(noisy), _stack(records)


def _batched_loss(model, extractor, loss_cfg, x, y, batch_size):
    total = 0.0
    for s in range(0, len(x), batch_size):
        pred = model.forward(x[s:s + batch_size], train=False)
        total += combined_loss(y[s:s + batch_size], pred, loss_cfg, extractor) * len(pred)
    return total / len(x)


def train(split: DatasetSplit, records, cfg: TrainConfig, callback=None):
    """Fit a Residual U-Net on clean images, pairing each with a fresh noisy copy.

    ``records`` maps record id to a preprocessed ``ImageRecord`` (a list is
    accepted too). Noise and augmentation are redrawn every epoch for the
    training split; validation noise is fixed per image.

    Returns ``(Checkpoint, TrainHistory)``.
    """
    if not isinstance(records, dict):
        records = {r.id: r for r in records}
    if not split.train or not split.val:
        raise ValueError("training needs non-empty train and val splits")
    dims = (cfg.model.input_height, cfg.model.input_width)
    for rid in split.train + split.val:
        if records[rid].dims != dims:
            raise ShapeError(f"record {rid} has dims {records[rid].dims}, model expects {dims}")

    rng = Rng(cfg.seed)
    model = init_resunet(cfg.model)
    extractor = FeatureExtractor(cfg.extractor_channels, cfg.extractor_seed)
    params = model.parameters()
    loss_cfg = LossConfig(cfg.alpha)
    adam = AdamState()
    history = TrainHistory()
    val_x, val_y = _val_inputs([records[i] for i in split.val], cfg, rng)
    best, best_tensors = np.inf, None
    started = time.perf_counter()

    train_ids = list(split.train)
    for epoch in range(cfg.epochs):
        order = rng.stream("shuffle", epoch).permutation(len(train_ids))
        epoch_loss = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            clean, noisy = [], []
            for i in order[start:start + cfg.batch_size]:
                rec = records[train_ids[i]]
                if cfg.augment is not None:
                    rec = augment(rec, cfg.augment, rng.stream("augment", epoch, rec.id))
                clean.append(rec)
                noisy.append(add_noise(rec, cfg.noise, rng.stream("noise", epoch, rec.id))[0])
            x, y = _stack(noisy), _stack(clean)
            pred = model.forward(x, train=True)
            loss, grad = combined_loss(y, pred, loss_cfg, extractor, return_grad=True)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            zero_grads(params)
            model.backward(grad)
            adam_step(params, adam, cfg.learning_rate)
            epoch_loss += loss * len(x)
        epoch_loss /= len(train_ids)
        val = _batched_loss(model, extractor, loss_cfg, val_x, val_y, cfg.batch_size)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(epoch_loss)
        history.val_loss.append(val)
        if val < best:
            best, history.best_epoch = val, epoch
            if cfg.keep_best_on_val:
                best_tensors = {n: a.copy() for n, a in model.named_tensors()}
        log.info("epoch %d/%d  train %.6f  val %.6f", epoch + 1, cfg.epochs, epoch_loss, val)
        if callback is not None:
            callback(epoch, epoch_loss, val)
    history.seconds = time.perf_counter() - started

    final_epoch = cfg.epochs - 1
    if cfg.keep_best_on_val and best_tensors is not None:
        for name, arr in model.named_tensors():
            arr[...] = best_tensors[name]
        final_epoch = history.best_epoch
    meta = {
        "epoch": final_epoch,
        "epochs_run": cfg.epochs,
        "seed": cfg.seed,
        "learning_rate": cfg.learning_rate,
        "alpha": cfg.alpha,
        "batch_size": cfg.batch_size,
        "train_loss": history.train_loss,
        "val_loss": history.val_loss,
    }
    return Checkpoint.from_model(model, extractor, adam, meta), history


# -- evaluation -----------------------------------------------------------


@dataclass
class MetricsReport:
    rows: list  # dicts keyed by METRICS_HEADER
    aggregates: dict  # source -> column -> summary dict

    def to_csv(self, path):
        write_metrics_csv(self.rows, path)


def summarize(values) -> dict:
    """Five-number summary plus mean and population std."""
    v = np.asarray(values, dtype=np.float64)
    # identical values (including all-inf PSNRs of noiseless inputs) have zero spread
    constant = bool(np.all(v == v[0]))
    with np.errstate(invalid="ignore"):
        q = np.full(5, v[0]) if constant else np.percentile(v, [0, 25, 50, 75, 100])
        std = 0.0 if constant else float(v.std())
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "std": std,
        "min": float(q[0]),
        "q1": float(q[1]),
        "median": float(q[2]),
        "q3": float(q[3]),
        "max": float(q[4]),
    }


def format_mean_std(summary: dict, digits=3) -> str:
    return f"{summary['mean']:.{digits}f} ± {summary['std']:.{digits}f}"


def aggregate(rows) -> dict:
    out = {}
    for source in sorted({r["source"] for r in rows}):
        sel = [r for r in rows if r["source"] == source]
        out[source] = {c: summarize([r[c] for r in sel]) for c in ("sigma",) + METRIC_COLUMNS}
    return out


def _image_metrics(clean, other, ssim_params):
    return psnr_paper(clean, other), psnr_standard(clean, other), ssim(clean, other, ssim_params)


def evaluate(ckpt, records, noise: NoiseConfig, seed: int = 0, ssim_params: SsimParams | None = None):
    """Score noisy and denoised versions of every record against the clean image.

    ``ckpt`` may be a ``Checkpoint`` or a ``ResUNet``. Each record's noise
    comes from its own substream of ``seed`` so results do not depend on
    record order.
    """
    model = ckpt if isinstance(ckpt, ResUNet) else ckpt.to_model()
    cfg = model.config
    rng = Rng(seed)
    rows = []
    for rec in sorted(records, key=lambda r: r.id):
        if rec.dims != (cfg.input_height, cfg.input_width):
            raise ShapeError(
                f"record {rec.id} has dims {rec.dims}, checkpoint expects {(cfg.input_height, cfg.input_width)}"
            )
        noisy, sigma = add_noise(rec, noise, rng.stream("eval-noise", rec.id))
        denoised = model.predict(noisy.pixels)
        clean = rec.pixels[0, :, :, 0].astype(np.float64)
        n = _image_metrics(clean, noisy.pixels[0, :, :, 0], ssim_params)
        d = _image_metrics(clean, denoised[0, :, :, 0], ssim_params)
        rows.append(dict(zip(METRICS_HEADER, (rec.id, rec.source, sigma) + n + d)))
    return MetricsReport(rows, aggregate(rows))


def write_metrics_csv(rows, path):
    lines = [",".join(METRICS_HEADER)]
    for r in rows:
        lines.append(",".join([r["id"], r["source"]] + [repr(float(r[c])) for c in METRICS_HEADER[2:]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def denoise_array(model: ResUNet, image) -> np.ndarray:
    """Denoise one 2-D image already at model dims; returns float output in (0, 1)."""
    return model.predict(np.asarray(image, dtype=np.float32)[None, :, :, None])[0, :, :, 0]


def denoise_file(ckpt, input_path, output_path, reference_path=None):
    """Preprocess, denoise and write an 8-bit raster.

    With ``reference_path`` returns both PSNR variants of the written
    output against the (preprocessed) reference; otherwise ``None``.
    """
    model = ckpt if isinstance(ckpt, ResUNet) else ckpt.to_model()
    dims = (model.config.input_height, model.config.input_width)
    rec = preprocess(load_image(input_path), dims)
    out = denoise_array(model, rec.image)
    save_image(output_path, out)
    if reference_path is None:
        return None
    ref = preprocess(load_image(reference_path), dims).image.astype(np.float64)
    written = load_image(output_path).image.astype(np.float64)
    return {"psnr_paper": psnr_paper(ref, written), "psnr_standard": psnr_standard(ref, written)}


def records_from_arrays(images, prefix="img", source="external"):
    return [ImageRecord(f"{prefix}-{i:05d}", img, source) for i, img in enumerate(images)]
