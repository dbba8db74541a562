"""Data sources: synthetic images, 2-D Gaussian sample sets, PNM files, sample-set files."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialize

log = logging.getLogger(__name__)

PALETTE = np.array([
    [0.95, 0.95, 0.92],
    [0.10, 0.10, 0.12],
    [0.85, 0.20, 0.15],
    [0.15, 0.55, 0.25],
    [0.15, 0.30, 0.80],
    [0.95, 0.80, 0.15],
    [0.55, 0.25, 0.65],
    [0.20, 0.70, 0.75],
])


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    """Images ``[N, H, W, C]`` in [-1, 1], optional labels ``[N, label_dim]``."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,H,W,C], got {self.images.shape}")
        if len(self.images) and not (self.images.min() >= -1 and self.images.max() <= 1):
            raise ValueError("images must lie in [-1, 1]")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError("labels and images differ in count")
        self.images.setflags(write=False)

    def __len__(self) -> int:
        return len(self.images)

    def split(self, holdout_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Deterministic tail split: the last ``ceil(fraction * N)`` items are held out."""
        n_hold = max(1, math.ceil(len(self) * holdout_fraction))
        if n_hold >= len(self):
            raise ValueError("holdout would leave no training data")
        cut = len(self) - n_hold
        lab = self.labels
        return (Dataset(self.images[:cut], None if lab is None else lab[:cut]),
                Dataset(self.images[cut:], None if lab is None else lab[cut:]))


@dataclass
class SampleSet:
    source_id: str
    samples: np.ndarray
    kind: str = "fake"

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.kind not in ("real", "fake"):
            raise ValueError(f"kind must be real or fake, got {self.kind!r}")
        if len(self.samples) == 0:
            raise ValueError(f"sample set {self.source_id!r} is empty")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def item_shape(self) -> tuple[int, ...]:
        return self.samples.shape[1:]


# ------------------------------------------------------------------ generators


def make_gaussian_2d(mean, count: int, seed: int, source_id: str | None = None,
                     kind: str = "fake") -> SampleSet:
    """Samples from N(mean, I) in two dimensions."""
    if count < 1:
        raise ValueError("count must be >= 1")
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (2,):
        raise ValueError("mean must be a 2-vector")
    pts = np.random.default_rng(seed).standard_normal((count, 2)) + mean
    return SampleSet(source_id or f"gauss[{mean[0]:g},{mean[1]:g}]", pts, kind)


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 100
    image_size: int = 32
    channels: int = 3
    max_shapes: int = 3
    seed: int = 0


def _draw_shape(img: np.ndarray, rng: np.random.Generator, color: np.ndarray) -> None:
    s = img.shape[0]
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    kind = rng.integers(3)
    cy, cx = rng.uniform(0.2, 0.8, size=2) * s
    if kind == 0:
        ry, rx = rng.uniform(0.12, 0.35, size=2) * s
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    elif kind == 1:
        hy, hx = rng.uniform(0.1, 0.3, size=2) * s
        mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    else:
        period = rng.uniform(0.15, 0.3) * s
        angle = rng.uniform(0, np.pi)
        phase = (xx * np.cos(angle) + yy * np.sin(angle)) / period
        half = rng.uniform(0.2, 0.4) * s
        mask = ((phase % 1.0) < 0.5) & (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    img[mask] = color


def make_synthetic_images(spec: SyntheticSpec) -> Dataset:
    """Flat-colour scenes of ellipses, rectangles and stripe patches with hard edges."""
    if spec.count < 1 or spec.image_size < 4 or spec.channels not in (1, 3):
        raise ValueError(f"invalid synthetic spec {spec}")
    out = np.empty((spec.count, spec.image_size, spec.image_size, spec.channels), dtype=np.float32)
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        idx = rng.permutation(len(PALETTE))
        img = np.empty((spec.image_size, spec.image_size, 3))
        img[:] = PALETTE[idx[0]]
        for j in range(1 + rng.integers(spec.max_shapes)):
            _draw_shape(img, rng, PALETTE[idx[1 + j]])
        if spec.channels == 1:
            img = img.mean(axis=-1, keepdims=True)
        out[i] = img * 2 - 1
    return Dataset(out)


# ---------------------------------------------------------------------- images


def to_bytes(values: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255]; out-of-range values are clipped."""
    return np.rint(np.clip((np.asarray(values, dtype=np.float64) + 1) / 2, 0, 1) * 255).astype(np.uint8)


def from_bytes(values: np.ndarray, maxval: int = 255) -> np.ndarray:
    return (np.asarray(values, dtype=np.float32) / maxval * 2 - 1).astype(np.float32)


def write_image(path: str | os.PathLike, image, clamp: bool = True) -> Path:
    """Binary PPM (3 channels) or PGM (1 channel).

    Signed residuals use the same ``(r + 1) / 2`` map, so a zero residual
    renders mid-gray. With ``clamp=False`` out-of-range values raise instead
    of being clipped.
    """
    arr = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[-1] not in (1, 3):
        raise ValueError(f"expected an [H,W,1] or [H,W,3] image, got {arr.shape}")
    if not clamp and (arr.min() < -1 or arr.max() > 1):
        raise ValueError("image values outside [-1, 1] and clamp is off")
    h, w, c = arr.shape
    magic = b"P6" if c == 3 else b"P5"
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(to_bytes(arr).tobytes())
    return path


def _pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ParseError("truncated PNM header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1  # one whitespace byte precedes the raster


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Decode a binary PGM/PPM into ``[H, W, C]`` floats in [-1, 1]."""
    data = Path(path).read_bytes()
    tokens, offset = _pnm_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"{path}: malformed PNM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ParseError(f"{path}: bad PNM dimensions or maxval")
    c = 3 if magic == b"P6" else 1
    dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * c * dt.itemsize
    raster = data[offset:offset + need]
    if len(raster) != need:
        raise ParseError(f"{path}: raster truncated ({len(raster)} of {need} bytes)")
    return from_bytes(np.frombuffer(raster, dtype=dt).reshape(h, w, c), maxval)


def _decode_any(path: Path) -> np.ndarray:
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return read_pnm(path)
    from PIL import Image  # optional, only for non-PNM files

    with Image.open(path) as im:
        im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[..., None]
    return from_bytes(arr)


def _resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    h, w, _ = img.shape
    if (h, w) == (size, size):
        return img

    def coords(n):
        x = (np.arange(size) + 0.5) * n / size - 0.5
        x = np.clip(x, 0, n - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, (x - lo)

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return (top * (1 - fy)[:, None, None] + bot * fy[:, None, None]).astype(np.float32)


def _fit(img: np.ndarray, size: int, channels: int) -> np.ndarray:
    h, w, c = img.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = _resize_bilinear(img[top:top + side, left:left + side], size)
    if c != channels:
        img = np.repeat(img, 3, axis=-1) if channels == 3 else img.mean(axis=-1, keepdims=True)
    return np.clip(img, -1, 1).astype(np.float32)


def load_image_dir(path: str | os.PathLike, target_size: int, channels: int = 3) -> Dataset:
    """Center-crop, resize and normalize every decodable image in a folder (sorted by name)."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    images = []
    for f in sorted(p for p in root.iterdir() if p.is_file()):
        try:
            img = _decode_any(f)
        except Exception as exc:  # noqa: BLE001 - any undecodable file is skipped
            log.warning("skipping %s: %s", f, exc)
            continue
        images.append(_fit(img, target_size, channels))
    if not images:
        raise ValueError(f"no decodable images in {root}")
    return Dataset(np.stack(images))


# ------------------------------------------------------------------ sample sets


def write_sample_set(path: str | os.PathLike, sset: SampleSet) -> Path:
    """CSV (``x,y`` per line) for 2-D points, the binary tensor format otherwise."""
    path = Path(path)
    if sset.samples.ndim == 2 and sset.samples.shape[1] == 2 and path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y"])
            for x, y in sset.samples:
                w.writerow([repr(float(x)), repr(float(y))])
        return path
    serialize.save(path, {
        "samples": np.asarray(sset.samples),
        "source_id": np.frombuffer(sset.source_id.encode(), dtype=np.uint8),
        "kind": np.frombuffer(sset.kind.encode(), dtype=np.uint8),
    })
    return path


def _read_csv(path: Path, kind: str) -> SampleSet:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header
                raise ParseError(f"{path}:{lineno}: not a number: {row!r}") from None
    if not rows:
        raise ParseError(f"{path}: no samples")
    return SampleSet(path.stem, np.array(rows), kind)


def read_sample_set(path: str | os.PathLike, kind: str = "fake") -> SampleSet:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_csv(path, kind)
    try:
        arrays = serialize.load(path)
    except serialize.FormatError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if "samples" not in arrays:
        raise ParseError(f"{path}: no 'samples' tensor")
    source = bytes(arrays["source_id"]).decode() if "source_id" in arrays else path.stem
    stored_kind = bytes(arrays["kind"]).decode() if "kind" in arrays else kind
    return SampleSet(source, arrays["samples"], stored_kind)
