"""Image I/O, preprocessing, splitting, augmentation, noise and OCT-like phantoms.

Images travel as ``ImageRecord`` objects whose ``pixels`` array has shape
``(1, H, W, 1)``, dtype float32, values in [0, 1].
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor_core import Rng

POSTERIOR = "posterior"
ANTERIOR = "anterior"
EXTERNAL = "external"
SOURCES = (POSTERIOR, ANTERIOR, EXTERNAL)
SPLITS = ("train", "val", "test")

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Unreadable, corrupt or unsupported raster file."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class ManifestError(ValueError):
    pass


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    source: str = EXTERNAL
    original_dims: tuple = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[None, :, :, None]
        if px.ndim != 4 or px.shape[0] != 1 or px.shape[3] != 1:
            raise ValueError(f"record {self.id!r}: pixels must be (1, H, W, 1), got {px.shape}")
        self.pixels = px
        if self.original_dims is None:
            self.original_dims = self.dims

    @property
    def dims(self):
        return self.pixels.shape[1], self.pixels.shape[2]

    @property
    def image(self):
        """The 2-D view of the pixels."""
        return self.pixels[0, :, :, 0]


@dataclass
class NoiseConfig:
    sigma_min: float = 0.02
    sigma_max: float = 0.5
    clip: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sigma_min <= self.sigma_max:
            raise ValueError(f"need 0 <= sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}")


@dataclass
class AugmentConfig:
    max_rotation_degrees: float = 10.0
    max_translation_pixels: float = 10.0
    interpolation: str = "bilinear"
    fill: float = 0.0
    seed: int = 0


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    fractions: tuple = (0.70, 0.15, 0.15)
    seed: int = 0

    def ids(self, name):
        return getattr(self, name)


# -- raster I/O -----------------------------------------------------------


def _read_pgm(path, raw: bytes):
    # binary P5 header: magic, width, height, maxval separated by whitespace; '#' starts a comment
    tokens = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(raw):
            raise ImageFormatError(path, "truncated PGM header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
    pos += 1  # exactly one whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(path, f"malformed PGM header {tokens!r}") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError(path, f"invalid PGM dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(path, f"only 8-bit PGM (maxval 255) is supported, got maxval {maxval}")
    body = raw[pos:pos + width * height]
    if len(body) != width * height:
        raise ImageFormatError(path, f"PGM raster truncated: expected {width * height} bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def _read_png(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                raise ImageFormatError(path, f"expected 8-bit grayscale PNG, got mode {im.mode}")
            return np.array(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types on corrupt data
        raise ImageFormatError(path, f"corrupt PNG ({exc})") from exc


def read_raster(path) -> np.ndarray:
    """Read an 8-bit grayscale P5 PGM or PNG into a uint8 array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(path, exc.strerror or str(exc)) from exc
    if raw[:2] == b"P5":
        return _read_pgm(path, raw)
    if raw[:8] == _PNG_MAGIC:
        return _read_png(path)
    raise ImageFormatError(path, "unsupported format (expected binary PGM 'P5' or PNG)")


def quantize(pixels) -> np.ndarray:
    """[0, 1] floats to uint8 by rounding half to even."""
    return np.round(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_raster(path, image_u8: np.ndarray):
    """Write a 2-D uint8 array; format from the suffix (.pgm or .png)."""
    path = Path(path)
    img = np.ascontiguousarray(image_u8, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        h, w = img.shape
        path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(img, mode="L").save(path, format="PNG")
    else:
        raise ImageFormatError(path, f"cannot write format {suffix!r}; use .pgm or .png")


def load_image(path, id=None, source=EXTERNAL) -> ImageRecord:
    img = read_raster(path)
    px = img.astype(np.float32) / np.float32(255.0)
    return ImageRecord(id or Path(path).stem, px, source, img.shape)


def save_image(path, rec_or_pixels):
    px = rec_or_pixels.pixels if isinstance(rec_or_pixels, ImageRecord) else np.asarray(rec_or_pixels)
    write_raster(path, quantize(px.reshape(px.shape[-3], px.shape[-2]) if px.ndim == 4 else px))


# -- preprocessing --------------------------------------------------------


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    h, w = img.shape
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img.astype(np.float64), [yy, xx], order=1, mode="nearest")


def preprocess(rec: ImageRecord, target) -> ImageRecord:
    """Zero-pad symmetrically when the image fits inside ``target``, else resize.

    An odd padding remainder goes to the bottom/right.
    """
    th, tw = target
    h, w = rec.dims
    if (h, w) == (th, tw):
        return rec
    img = rec.image
    if h <= th and w <= tw:
        top, left = (th - h) // 2, (tw - w) // 2
        out = np.pad(img, ((top, th - h - top), (left, tw - w - left)))
    else:
        out = np.clip(resize_bilinear(img, th, tw), 0.0, 1.0)
    return ImageRecord(rec.id, out, rec.source, rec.original_dims)


# -- splitting ------------------------------------------------------------


def largest_remainder(n: int, fractions) -> list:
    quotas = [n * f for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(records, fractions=(0.70, 0.15, 0.15), rng=0) -> DatasetSplit:
    """Seeded shuffle then a largest-remainder partition into train/val/test ids."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    ids = [r.id if isinstance(r, ImageRecord) else str(r) for r in records]
    if len(ids) < 3:
        raise ValueError(f"need at least 3 records to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")
    seed = rng.seed if isinstance(rng, Rng) else int(rng)
    perm = Rng(seed).stream("split").permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n_train, n_val, _ = largest_remainder(len(ids), fractions)
    return DatasetSplit(
        shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:], tuple(fractions), seed
    )


# -- augmentation and noise -----------------------------------------------


def affine_warp(img: np.ndarray, angle_degrees: float, dx: float, dy: float, fill: float = 0.0) -> np.ndarray:
    """Rotate about the image centre, then shift by (dx, dy) pixels.

    Positive ``dx`` moves content right, positive ``dy`` moves it down.
    Samples are bilinear; points that fall outside the source get ``fill``.
    """
    h, w = img.shape
    theta = math.radians(angle_degrees)
    c, s = math.cos(theta), math.sin(theta)
    # output (r, q) samples input at R^-1 ((r, q) - centre - t) + centre
    inv = np.array([[c, s], [-s, c]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - inv @ (centre + np.array([dy, dx]))
    return ndimage.affine_transform(img.astype(np.float64), inv, offset=offset, order=1, mode="constant", cval=fill)


def draw_augmentation(cfg: AugmentConfig, gen: np.random.Generator):
    angle = gen.uniform(-cfg.max_rotation_degrees, cfg.max_rotation_degrees)
    dx, dy = gen.uniform(-cfg.max_translation_pixels, cfg.max_translation_pixels, size=2)
    return float(angle), float(dx), float(dy)


def augment(rec: ImageRecord, cfg: AugmentConfig, gen: np.random.Generator) -> ImageRecord:
    """Random rotation and translation, clamped to [0, 1]."""
    angle, dx, dy = draw_augmentation(cfg, gen)
    return apply_augmentation(rec, angle, dx, dy, cfg.fill)


def apply_augmentation(rec: ImageRecord, angle, dx, dy, fill=0.0) -> ImageRecord:
    if angle == 0 and dx == 0 and dy == 0:
        return rec
    out = np.clip(affine_warp(rec.image, angle, dx, dy, fill), 0.0, 1.0)
    return ImageRecord(rec.id, out, rec.source, rec.original_dims)


def add_noise(rec: ImageRecord, cfg: NoiseConfig, gen: np.random.Generator):
    """Additive Gaussian noise with one sigma per image drawn from [sigma_min, sigma_max].

    Returns ``(noisy_record, sigma)``.
    """
    sigma = float(gen.uniform(cfg.sigma_min, cfg.sigma_max))
    noisy = rec.pixels.astype(np.float64) + sigma * gen.standard_normal(rec.pixels.shape)
    if cfg.clip:
        noisy = np.clip(noisy, 0.0, 1.0)
    return ImageRecord(rec.id, noisy.astype(np.float32), rec.source, rec.original_dims), sigma


# -- phantoms -------------------------------------------------------------


@dataclass
class PhantomConfig:
    """Synthetic OCT-like scan.

    ``n_layers`` and ``n_vessels`` of ``None`` are drawn per image (4-8
    and 1-3). ``curvature`` is the peak boundary displacement in pixels,
    ``None`` meaning a random 2-8 % of the height.
    """

    family: str = POSTERIOR
    height: int = 200
    width: int = 400
    n_layers: int | None = None
    curvature: float | None = None
    n_vessels: int | None = None
    shadow_factor: tuple = (0.35, 0.6)
    background: tuple = (0.04, 0.12)
    speckle: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in (POSTERIOR, ANTERIOR):
            raise ValueError(f"unknown phantom family {self.family!r}")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"phantom dims too small: {self.height}x{self.width}")
        if self.n_layers is not None and not 1 <= self.n_layers:
            raise ValueError("n_layers must be positive")


def _coverage(signed_dist):
    # fraction of a pixel on the positive side of an edge at the given signed distance
    return np.clip(signed_dist + 0.5, 0.0, 1.0)


def _distinct_levels(gen, n, lo, hi, min_gap):
    levels = [gen.uniform(lo, hi)]
    while len(levels) < n:
        v = gen.uniform(lo, hi)
        if abs(v - levels[-1]) >= min_gap:
            levels.append(v)
    return levels


def _posterior(cfg: PhantomConfig, gen):
    h, w = cfg.height, cfg.width
    n_layers = cfg.n_layers or int(gen.integers(4, 9))
    n_vessels = cfg.n_vessels if cfg.n_vessels is not None else int(gen.integers(1, 4))
    amp = cfg.curvature if cfg.curvature is not None else gen.uniform(0.02, 0.08) * h
    bg = gen.uniform(*cfg.background)
    top = gen.uniform(0.15, 0.3) * h
    total = gen.uniform(0.4, 0.55) * h
    weights = gen.uniform(0.5, 1.5, n_layers)
    bounds = top + np.concatenate([[0.0], np.cumsum(weights / weights.sum() * total)])
    if cfg.curvature == 0:
        bounds = np.round(bounds)
    levels = [bg] + _distinct_levels(gen, n_layers, 0.25, 0.95, 0.1) + [bg]
    period = gen.uniform(0.8, 2.0) * w
    phase = gen.uniform(0, 2 * np.pi)

    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    offset = amp * np.sin(2 * np.pi * cols / period + phase)
    img = np.full((h, w), levels[0])
    for k, b in enumerate(bounds, start=1):
        # pixel row y spans [y, y+1); area below the boundary b + offset
        img += (levels[k] - levels[k - 1]) * np.clip(rows + 1 - (b + offset), 0.0, 1.0)
    shade = np.ones((1, w))
    for _ in range(n_vessels):
        centre = gen.uniform(0.05, 0.95) * w
        half = gen.uniform(1.5, 4.0)
        strength = 1.0 - gen.uniform(*cfg.shadow_factor)
        edge = _coverage(half - np.abs(cols - centre))
        shade = shade * (1.0 - strength * edge)
    below_top = np.clip(rows + 1 - (bounds[0] + offset), 0.0, 1.0)
    return img * (1.0 - below_top * (1.0 - shade))


def _tissue_texture(gen, shape, corr=0.8):
    # zero-mean, unit-std granular field with ~corr px correlation length
    field = ndimage.gaussian_filter(gen.standard_normal(shape), corr)
    return field / field.std()


def _anterior(cfg: PhantomConfig, gen):
    h, w = cfg.height, cfg.width
    bg = gen.uniform(*cfg.background)
    rows = np.arange(h, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(w, dtype=np.float64)[None, :] + 0.5

    # cornea continuing into a thicker scleral wall: an elliptical shell
    cx = w * gen.uniform(0.45, 0.55)
    cy = h * gen.uniform(0.85, 1.0)
    a = w * gen.uniform(0.38, 0.46)
    b = h * gen.uniform(0.6, 0.75)
    r = np.sqrt(((cols - cx) / a) ** 2 + ((rows - cy) / b) ** 2)
    depth = np.clip((rows - (cy - b)) / b, 0.0, 1.0)  # 0 at the corneal apex
    thick = h * (gen.uniform(0.04, 0.06) + gen.uniform(0.06, 0.12) * depth ** 2)
    shell = np.minimum(_coverage((1.0 - r) * b), _coverage((r - 1.0) * b + thick))
    # signal fades with depth below the apex
    fade = 1.0 - gen.uniform(0.3, 0.5) * depth
    cornea_level = gen.uniform(0.7, 0.95)
    stroma = 1.0 + gen.uniform(0.15, 0.3) * _tissue_texture(gen, (h, w))
    tissue = np.zeros((h, w))
    tissue += shell * cornea_level * fade * stroma

    # iris: two tapered wedges with coarse stromal texture
    iris_level = gen.uniform(0.4, 0.65)
    iris_tex = 1.0 + gen.uniform(0.3, 0.45) * _tissue_texture(gen, (h, w), corr=1.2)
    y_root = cy - b * gen.uniform(0.3, 0.45)
    iris = np.zeros((h, w))
    tips = []
    for side in (-1, 1):
        root_x = cx + side * a * gen.uniform(0.8, 0.92)
        tip_x = cx + side * a * gen.uniform(0.15, 0.3)
        tip_y = y_root - h * gen.uniform(0.0, 0.06)
        root_half = h * gen.uniform(0.05, 0.08)
        along = (cols - root_x) / (tip_x - root_x)
        t = np.clip(along, 0.0, 1.0)
        centre_y = y_root + t * (tip_y - y_root)
        half = root_half * (1.0 - t)
        wedge = _coverage(half - np.abs(rows - centre_y)) * ((along >= 0) & (along <= 1))
        iris = np.maximum(iris, wedge)
        tips.append((tip_x, tip_y))
    tissue += (1.0 - shell) * iris * iris_level * fade * iris_tex

    # faint lens capsule arc spanning the pupil, deeper and dimmer than everything else
    (lx, ly), (rx, ry) = sorted(tips)
    lens_cx, lens_r = (lx + rx) / 2.0, (rx - lx) * gen.uniform(0.7, 0.9)
    lens_cy = (ly + ry) / 2.0 + lens_r * gen.uniform(0.6, 0.8)
    ring = np.abs(np.hypot(cols - lens_cx, rows - lens_cy) - lens_r)
    lens = _coverage(h * 0.012 - ring) * (rows < lens_cy) * (1.0 - shell) * (1.0 - iris)
    tissue += lens * gen.uniform(0.2, 0.3) * fade

    covered = np.clip(shell + iris * (1.0 - shell) + lens, 0.0, 1.0)
    return bg * (1.0 - covered) + tissue


def generate_phantom(cfg: PhantomConfig, gen: np.random.Generator | None = None, id=None) -> ImageRecord:
    """Draw one synthetic scan. Deterministic for a given generator state or ``cfg.seed``."""
    gen = gen if gen is not None else Rng(cfg.seed).stream("phantom", cfg.family)
    img = _posterior(cfg, gen) if cfg.family == POSTERIOR else _anterior(cfg, gen)
    if cfg.speckle > 0:
        img = img * (1.0 + cfg.speckle * gen.standard_normal(img.shape))
    img = np.clip(img, 0.0, 1.0)
    return ImageRecord(id or f"{cfg.family}-{cfg.seed}", img, cfg.family)


def generate_phantoms(cfg: PhantomConfig, count: int, seed: int = 0, prefix=None) -> list:
    """``count`` phantoms, each from its own named substream of ``seed``."""
    rng = Rng(seed)
    prefix = prefix or cfg.family
    return [
        generate_phantom(cfg, rng.stream("phantom", cfg.family, i), id=f"{prefix}-{i:04d}")
        for i in range(count)
    ]


# -- manifests ------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    path: Path
    split: str
    source: str


def read_manifest(path) -> list:
    """Parse ``id<TAB>relative_path<TAB>split<TAB>source`` lines.

    Paths are resolved against the manifest's directory. Blank lines and
    lines starting with '#' are skipped.
    """
    path = Path(path)
    base = path.parent
    entries = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"{path}: {exc.strerror or exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        rid, rel, split, source = parts
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        if source not in SOURCES:
            raise ManifestError(f"{path}:{lineno}: unknown source {source!r}")
        entries.append(ManifestEntry(rid, base / rel, split, source))
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate record ids")
    return entries


def write_manifest(path, entries):
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for e in entries:
        rel = os.path.relpath(Path(e.path).resolve(), base)
        lines.append(f"{e.id}\t{Path(rel).as_posix()}\t{e.split}\t{e.source}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest_records(entries, target=None, split=None) -> list:
    """Load (and optionally preprocess) every manifest entry, or those of one split."""
    records = []
    for e in entries:
        if split is not None and e.split != split:
            continue
        rec = load_image(e.path, e.id, e.source)
        records.append(preprocess(rec, target) if target else rec)
    return records


def split_from_manifest(entries) -> DatasetSplit:
    parts = {s: [e.id for e in entries if e.split == s] for s in SPLITS}
    return DatasetSplit(parts["train"], parts["val"], parts["test"])
