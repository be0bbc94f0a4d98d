"""MNIST IDX ingestion and image augmentations.

Images are float64 arrays shaped (H, W, C) with values in [0, 1]; batches
are (B, H, W, C).
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MAX_DEGREES = 30.0
CROP_RANGE = (0.25, 1.0)


class IdxParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    split_tag: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.split_tag not in ("train", "test"):
            raise ValueError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]


def parse_idx_raw(blob: bytes) -> tuple[int, np.ndarray]:
    """Validate an IDX container and return ``(magic, uint8 payload shaped by its dims)``."""
    if len(blob) < 4:
        raise IdxParseError(f"header truncated: need 4 bytes, got {len(blob)}", len(blob))
    (magic,) = struct.unpack(">I", blob[:4])
    if magic not in (IMAGES_MAGIC, LABELS_MAGIC):
        raise IdxParseError(f"bad magic 0x{magic:08x}; expected 0x{IMAGES_MAGIC:08x} or 0x{LABELS_MAGIC:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise IdxParseError(f"dimension header truncated: need {header_end} bytes, got {len(blob)}", len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    expected = 1
    for d in dims:
        expected *= d
        if expected > 2**40:
            raise IdxParseError(f"dimension sizes {dims} overflow", 4)
    actual = len(blob) - header_end
    if actual < expected:
        raise IdxParseError(
            f"truncated payload: expected {expected} bytes, got {actual}", header_end + actual
        )
    if actual > expected:
        raise IdxParseError(
            f"trailing data: expected {expected} payload bytes, got {actual}", header_end + expected
        )
    return magic, np.frombuffer(blob, dtype=np.uint8, count=expected, offset=header_end).reshape(dims)


def parse_idx(blob: bytes) -> np.ndarray:
    """Parse an IDX image or label container.

    Images come back as float64 in [0, 1] shaped (N, rows, cols); labels as
    int64 shaped (N,).
    """
    magic, raw = parse_idx_raw(blob)
    if magic == LABELS_MAGIC:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / 255.0


def encode_idx(array: np.ndarray, kind: str) -> bytes:
    """Serialize images in [0, 1] (N, rows, cols) or integer labels (N,) to IDX."""
    a = np.asarray(array)
    if kind == "images":
        if a.ndim != 3:
            raise ValueError("images must be (N, rows, cols)")
        payload = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
        magic = IMAGES_MAGIC
    elif kind == "labels":
        if a.ndim != 1:
            raise ValueError("labels must be 1-D")
        payload = a.astype(np.uint8)
        magic = LABELS_MAGIC
    else:
        raise ValueError(f"kind must be 'images' or 'labels', got {kind!r}")
    return struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + payload.tobytes()


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_file(path) -> np.ndarray:
    return parse_idx(_read_maybe_gzip(path))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"missing MNIST file {stem}[.gz] in {directory}")


def load_mnist(directory, split: str, n: int | None = None, seed: int = 0) -> LabeledDataset:
    """Load an MNIST split as single-channel images, optionally a seeded subsample of ``n``."""
    directory = Path(directory)
    prefix = {"train": "train", "test": "t10k"}[split]
    img_raw = _read_maybe_gzip(_find(directory, f"{prefix}-images-idx3-ubyte"))
    labels = parse_idx(_read_maybe_gzip(_find(directory, f"{prefix}-labels-idx1-ubyte")))
    # keep the full split as uint8; only the subsample is converted to float
    magic, pixels = parse_idx_raw(img_raw)
    if magic != IMAGES_MAGIC:
        raise IdxParseError("expected an image container", 0)
    if len(pixels) != len(labels):
        raise ValueError(f"{len(pixels)} images but {len(labels)} labels in {split} split")
    if n is not None and n < len(labels):
        idx = np.sort(np.random.default_rng(seed).choice(len(labels), size=n, replace=False))
    else:
        idx = np.arange(len(labels))
    images = pixels[idx].astype(np.float64)[..., None] / 255.0
    return LabeledDataset(images, labels[idx], split)


def to_three_channel(img: np.ndarray) -> np.ndarray:
    """Replicate the single channel of one image or a batch of images."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 1:
        raise ValueError(f"expected a single-channel image, got {img.shape[-1]} channels")
    return np.repeat(img, 3, axis=-1)


def _bilinear(batch: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (B, H, W, C) images at per-image coordinates (B, h, w); zero outside."""
    b, h, w, c = batch.shape
    ph, pw = h + 2, w + 2
    padded = np.zeros((b, ph, pw, c))
    padded[:, 1:-1, 1:-1] = batch
    flat = padded.reshape(b * ph * pw, c)
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = (ys - y0).reshape(b, -1, 1)
    wx = (xs - x0).reshape(b, -1, 1)
    # +1 for the zero border; clipping after the shift keeps far-out samples on the border
    iy = y0.astype(np.int64).reshape(b, -1) + 1
    ix = x0.astype(np.int64).reshape(b, -1) + 1
    y0, y1 = np.clip(iy, 0, ph - 1), np.clip(iy + 1, 0, ph - 1)
    x0, x1 = np.clip(ix, 0, pw - 1), np.clip(ix + 1, 0, pw - 1)
    base = (np.arange(b) * ph * pw)[:, None]
    r0 = base + y0 * pw
    r1 = base + y1 * pw
    top = flat[r0 + x0] * (1 - wx) + flat[r0 + x1] * wx
    bottom = flat[r1 + x0] * (1 - wx) + flat[r1 + x1] * wx
    return (top * (1 - wy) + bottom * wy).reshape(b, *ys.shape[1:], c)


def rotate_batch(batch: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    """Rotate each square image about its centre by its own angle (bilinear, black fill)."""
    batch = np.asarray(batch, dtype=np.float64)
    b, h, w, _ = batch.shape
    if h != w:
        raise ValueError(f"rotation expects square images, got {h}x{w}")
    theta = np.deg2rad(np.asarray(degrees, dtype=np.float64)).reshape(b, 1, 1)
    centre = (h - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - centre, np.arange(w) - centre, indexing="ij")
    cos, sin = np.cos(theta), np.sin(theta)
    # inverse map: output pixel p samples the input at R(-theta) p
    src_y = cos * yy - sin * xx + centre
    src_x = sin * yy + cos * xx + centre
    out = _bilinear(batch, src_y, src_x)
    zero = np.asarray(degrees).reshape(b) == 0
    out[zero] = batch[zero]
    return np.clip(out, 0.0, 1.0)


def random_rotation(img: np.ndarray, seed, degrees: float | None = None) -> np.ndarray:
    """Rotate by an angle drawn from Unif(-30, 30) degrees, or by ``degrees`` if given."""
    if degrees is None:
        degrees = np.random.default_rng(seed).uniform(-MAX_DEGREES, MAX_DEGREES)
    return rotate_batch(np.asarray(img)[None], np.array([degrees]))[0]


def random_colors(n: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(0.0, 1.0, size=(n, 3))
    return u / u.max(axis=1, keepdims=True)


def colorize(img: np.ndarray, color) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 3:
        raise ValueError("colorize expects three-channel images")
    return np.clip(img * np.asarray(color, dtype=np.float64), 0.0, 1.0)


def random_colorize(img: np.ndarray, seed, color=None) -> np.ndarray:
    """Tint a black-and-white three-channel image with a random colour whose largest channel is 1."""
    if color is None:
        color = random_colors(1, np.random.default_rng(seed))[0]
    return colorize(img, color)


def _crop_window(h: int, fraction: float, rng: np.random.Generator):
    side = max(2, int(round(fraction * h)))
    side = min(side, h)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, h - side + 1))
    return top, left, side


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def random_crop_resize(img: np.ndarray, seed, fraction: float | None = None) -> np.ndarray:
    """Crop a square window whose side is ``fraction`` of the image side, then resize back.

    ``fraction`` is drawn from Unif(0.25, 1) when not given. The window
    position is uniform within the image.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h != w:
        raise ValueError(f"crop expects square images, got {h}x{w}")
    rng = np.random.default_rng(seed)
    if fraction is None:
        fraction = rng.uniform(*CROP_RANGE)
    top, left, side = _crop_window(h, fraction, rng)
    crop = img[top : top + side, left : left + side]
    if side == h:
        return crop.copy()
    return np.clip(resize(crop, h, w), 0.0, 1.0)


def crop_window(h: int, seed, fraction: float | None = None) -> tuple[int, int, int]:
    """The (top, left, side) window ``random_crop_resize`` would use."""
    rng = np.random.default_rng(seed)
    if fraction is None:
        fraction = rng.uniform(*CROP_RANGE)
    return _crop_window(h, fraction, rng)


def _image_seeds(seed: int, n: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)


def color_dataset(ds: LabeledDataset, seed: int) -> LabeledDataset:
    """Three-channel copy of a test set with one random colour per image."""
    imgs = to_three_channel(ds.images) if ds.images.shape[-1] == 1 else ds.images
    colors = np.stack([random_colors(1, np.random.default_rng(int(s)))[0] for s in _image_seeds(seed, len(ds))])
    return LabeledDataset(np.clip(imgs * colors[:, None, None, :], 0.0, 1.0), ds.labels.copy(), ds.split_tag)


def crop_dataset(ds: LabeledDataset, seed: int) -> LabeledDataset:
    imgs = to_three_channel(ds.images) if ds.images.shape[-1] == 1 else ds.images
    out = np.stack([random_crop_resize(im, int(s)) for im, s in zip(imgs, _image_seeds(seed, len(ds)))])
    return LabeledDataset(out, ds.labels.copy(), ds.split_tag)
