"""Grayscale image I/O, CSV manifests, and the synthetic plaque generator."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, ParameterError

LABELS = {0: "Asymptomatic", 1: "Symptomatic"}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width) or self.pixels.dtype != np.uint8:
            raise FormatError(f"pixel array {self.pixels.shape}/{self.pixels.dtype} "
                              f"does not match {self.height}x{self.width} uint8")

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "GrayImage":
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        return cls(pixels.shape[1], pixels.shape[0], pixels)

    def to_array(self) -> np.ndarray:
        """Intensities scaled to [0, 1], shape (H, W, 1)."""
        return (self.pixels.astype(np.float64) / 255.0)[:, :, None]


# ---------------------------------------------------------------- PGM / PNG

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_pgm(data: bytes, name: str = "<bytes>") -> GrayImage:
    if not data.startswith(b"P5"):
        raise FormatError(f"{name}: not a binary PGM (magic {data[:2]!r}, expected b'P5')")
    pos, fields = 2, []
    for label in ("width", "height", "maxval"):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{name}: truncated header, missing {label}")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"{name}: bad {label} {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{name}: unsupported maxval {maxval} (only 255)")
    if width < 1 or height < 1:
        raise FormatError(f"{name}: bad dimensions {width}x{height}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"{name}: missing whitespace after header")
    pos += 1
    payload = data[pos:]
    if len(payload) < width * height:
        raise FormatError(f"{name}: truncated pixel payload ({len(payload)} of {width * height} bytes)")
    pixels = np.frombuffer(payload[: width * height], dtype=np.uint8).reshape(height, width).copy()
    return GrayImage(width, height, pixels)


def encode_pgm(image: GrayImage) -> bytes:
    return b"P5\n%d %d\n255\n" % (image.width, image.height) + image.pixels.tobytes()


def _read_png(path: Path) -> GrayImage:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode != "L":
            raise FormatError(f"{path}: unsupported PNG mode {im.mode!r} (only 8-bit grayscale 'L')")
        return GrayImage.from_array(np.asarray(im))


def resize_bilinear(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of a 2-d float array."""
    h, w = arr.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return arr.copy()

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def load_image(path, size: tuple[int, int] | None = None) -> GrayImage:
    """Read a P5 PGM (maxval 255) or an 8-bit grayscale PNG, optionally
    resampled to ``size`` = (height, width)."""
    path = Path(path)
    head = path.read_bytes()[:8]
    if head.startswith(b"P5"):
        img = decode_pgm(path.read_bytes(), str(path))
    elif head.startswith(b"\x89PNG"):
        img = _read_png(path)
    else:
        raise FormatError(f"{path}: unsupported image format (magic {head[:4]!r})")
    if size is not None and (img.height, img.width) != tuple(size):
        resized = resize_bilinear(img.pixels.astype(np.float64), tuple(size))
        img = GrayImage.from_array(np.clip(np.rint(resized), 0, 255).astype(np.uint8))
    return img


def save_image(image: GrayImage, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(image.pixels, mode="L").save(path)
    else:
        path.write_bytes(encode_pgm(image))


def save_rgb(pixels: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="RGB").save(path)


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    group: str
    split: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    @property
    def groups(self) -> list[str]:
        return [e.group for e in self.entries]

    def class_counts(self) -> tuple[int, int]:
        labels = self.labels
        return int(np.sum(labels == 0)), int(np.sum(labels == 1))

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.entries) if e.split == split], dtype=np.int64)

    def with_splits(self, splits) -> "DatasetManifest":
        return DatasetManifest([replace(e, split=s) for e, s in zip(self.entries, splits)], self.root)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path) -> DatasetManifest:
    """CSV with header ``path,label,group`` and an optional ``split`` column.

    Blank groups default to the path. Relative image paths resolve against the
    manifest's directory.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty manifest")
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["path", "label", "group"] or header[3:] not in ([], ["split"]):
        raise FormatError(f"{path}: header must be path,label,group[,split], got {','.join(header)}")
    entries, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        img, label, group = (c.strip() for c in row[:3])
        if label not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        if img in seen:
            raise FormatError(f"{path}:{lineno}: duplicate path {img!r}")
        seen.add(img)
        split = row[3].strip() or None if len(row) > 3 else None
        if split is not None and split not in SPLITS:
            raise FormatError(f"{path}:{lineno}: split must be one of {SPLITS}, got {split!r}")
        entries.append(ManifestEntry(img, int(label), group or img, split))
    if not entries:
        raise FormatError(f"{path}: manifest has no entries")
    return DatasetManifest(entries, path.parent)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with_split = any(e.split is not None for e in manifest.entries)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "group"] + (["split"] if with_split else []))
        for e in manifest.entries:
            w.writerow([e.path, e.label, e.group] + ([e.split or ""] if with_split else []))


def load_images(manifest: DatasetManifest, size: tuple[int, int]) -> np.ndarray:
    """All manifest images as a float batch (N, H, W, 1) in [0, 1]."""
    return np.stack([load_image(manifest.resolve(e), size).to_array() for e in manifest.entries])


# ---------------------------------------------------------------- synthetic data


def _speckle(rng: np.random.Generator, shape) -> np.ndarray:
    field_ = rng.rayleigh(1.0, shape)
    field_ = ndimage.gaussian_filter(field_, 0.8)
    return field_ / field_.mean()


def synth_image(rng: np.random.Generator, size: int, positive: bool, signal: float) -> np.ndarray:
    """One synthetic plaque crop as a float array in [0, 1].

    Both classes consume the random stream identically; with ``signal`` 0 the
    positive-only hypoechoic region is not darkened at all.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size * (0.5 + rng.uniform(-0.06, 0.06))
    cx = size * (0.5 + rng.uniform(-0.06, 0.06))
    a = size * rng.uniform(0.30, 0.40)  # horizontal semi-axis
    b = size * rng.uniform(0.18, 0.26)  # vertical semi-axis
    echo = rng.uniform(0.55, 0.75)
    background = rng.uniform(0.05, 0.12)
    plaque = ((yy - cy) / b) ** 2 + ((xx - cx) / a) ** 2 <= 1.0

    # dark region hugging the lower plaque boundary
    rx = a * rng.uniform(0.35, 0.5)
    ry = b * rng.uniform(0.55, 0.75)
    hx = cx + a * rng.uniform(-0.3, 0.3)
    hy = cy + b * rng.uniform(0.85, 1.0)
    region = plaque & ((((yy - hy) / ry) ** 2 + ((xx - hx) / rx) ** 2) <= 1.0)

    img = np.full((size, size), background)
    img[plaque] = echo
    if positive:
        img[region] = echo * (1.0 - 0.8 * signal)
    img = ndimage.gaussian_filter(img, 1.0)
    img = img * _speckle(rng, (size, size)) + rng.normal(0.0, 0.02, (size, size))
    return np.clip(img, 0.0, 1.0)


def synth_generate(n_neg: int, n_pos: int, out_dir, size: int = 96, seed: int = 0,
                   signal: float = 1.0) -> DatasetManifest:
    """Write ``n_neg + n_pos`` PGM crops plus ``manifest.csv`` to ``out_dir``."""
    if n_neg < 1 or n_pos < 1:
        raise ParameterError(f"need at least one image per class, got {n_neg}/{n_pos}")
    if not 0.0 <= signal <= 1.0:
        raise ParameterError(f"signal must be in [0, 1], got {signal}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    labels = np.array([0] * n_neg + [1] * n_pos)
    order = np.random.default_rng([seed, 0]).permutation(len(labels))
    entries = []
    for i, label in enumerate(labels[order]):
        arr = synth_image(np.random.default_rng([seed, 1, i]), size, bool(label), signal)
        name = f"images/case{i:04d}.pgm"
        save_image(GrayImage.from_array(np.rint(arr * 255).astype(np.uint8)), out / name)
        entries.append(ManifestEntry(name, int(label), f"case{i:04d}"))
    manifest = DatasetManifest(entries, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
