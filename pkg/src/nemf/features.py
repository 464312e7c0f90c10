"""Dense descriptor grids and the 4D cosine cost volume.

The extractor here is a deterministic, training-free stand-in for a deep
backbone.  Real backbone features can be brought in through the ``NMFT``
container (:func:`export_features` / :func:`import_features`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptFileError, FormatError, NonFiniteError, ShapeError

FEATURE_MAGIC = b"NMFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHIII")
N_ORIENT = 8


@dataclass
class ImagePair:
    source: np.ndarray
    target: np.ndarray
    source_id: str = ""
    target_id: str = ""

    def __post_init__(self):
        for name in ("source", "target"):
            img = np.asarray(getattr(self, name), dtype=np.float64)
            if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
                raise ShapeError(f"{name} image must be HxW or HxWx{{1,3}}, got {img.shape}")
            if min(img.shape[:2]) < 16:
                raise ShapeError(f"{name} image must be at least 16x16, got {img.shape[:2]}")
            setattr(self, name, img)

    @property
    def source_shape(self) -> tuple[int, int]:
        return self.source.shape[:2]

    @property
    def target_shape(self) -> tuple[int, int]:
        return self.target.shape[:2]


@dataclass(frozen=True)
class ExtractorConfig:
    grid: tuple[int, int] = (16, 16)
    patch: int = 8
    proj_dim: int = 16
    seed: int = 0

    def dim(self, channels: int) -> int:
        return channels + N_ORIENT + self.proj_dim


@dataclass
class FeatureGrid:
    values: np.ndarray  # (h, w, d) float32
    provenance: str = "handcrafted"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ShapeError(f"feature grid must be (h, w, d), got {self.values.shape}")
        if self.provenance not in ("handcrafted", "imported"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def read_image(path) -> np.ndarray:
    """Decode PNG/PPM/... into floats in [0, 1], shape (H, W) or (H, W, 3)."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        elif im.mode in ("L", "P", "1", "LA"):
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def cell_centers(extent: int, cells: int) -> np.ndarray:
    """Pixel coordinate of each grid cell (corners aligned with the image)."""
    if cells == 1:
        return np.array([(extent - 1) / 2.0])
    return np.arange(cells) * (extent - 1) / (cells - 1)


def _orientation_channels(gray: np.ndarray):
    gy = (np.roll(gray, -1, axis=0) - np.roll(gray, 1, axis=0)) / 2.0
    gx = (np.roll(gray, -1, axis=1) - np.roll(gray, 1, axis=1)) / 2.0
    mag = np.hypot(gy, gx)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi / N_ORIENT)).astype(int), N_ORIENT - 1)
    return mag, bins


def extract_handcrafted(image: np.ndarray, config: ExtractorConfig = ExtractorConfig()) -> FeatureGrid:
    """Per-cell descriptor: mean colour | 8-bin gradient histogram | random projection.

    Patches are gathered with wraparound indexing, so circularly shifting the
    image by a whole number of cell strides shifts the grid accordingly.
    The projection sees the patch at two scales (central crop at full
    resolution and the whole patch 2x2-averaged).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    H, W, C = img.shape
    P = config.patch
    if P < 2 or P % 2:
        raise ValueError(f"patch size must be even and >= 2, got {P}")
    if H < P or W < P:
        raise ShapeError(f"image {H}x{W} is smaller than the patch size {P}")
    h, w = config.grid

    offs = np.arange(P) - P // 2
    rows = (np.round(cell_centers(H, h)).astype(int)[:, None] + offs) % H
    cols = (np.round(cell_centers(W, w)).astype(int)[:, None] + offs) % W
    patches = img[rows[:, None, :, None], cols[None, :, None, :]]  # h, w, P, P, C

    mean_color = patches.mean(axis=(2, 3))

    mag, bins = _orientation_channels(img.mean(axis=2))
    pmag = mag[rows[:, None, :, None], cols[None, :, None, :]].reshape(h, w, -1)
    pbin = bins[rows[:, None, :, None], cols[None, :, None, :]].reshape(h, w, -1)
    onehot = pbin[..., None] == np.arange(N_ORIENT)
    hog = (onehot * pmag[..., None]).sum(axis=2) / (P * P)

    q = P // 4
    inner = patches[:, :, q:q + P // 2, q:q + P // 2, :]
    coarse = patches.reshape(h, w, P // 2, 2, P // 2, 2, C).mean(axis=(3, 5))
    raw = np.concatenate([inner.reshape(h, w, -1), coarse.reshape(h, w, -1)], axis=-1)
    proj = np.random.default_rng(config.seed).standard_normal((raw.shape[-1], config.proj_dim))
    proj /= np.sqrt(raw.shape[-1])

    values = np.concatenate([mean_color, hog, raw @ proj], axis=-1)
    return FeatureGrid(values, "handcrafted", {"image_shape": (H, W), "config": config})


def export_features(grid: FeatureGrid, path) -> None:
    h, w, d = grid.shape
    payload = np.ascontiguousarray(grid.values, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, h, w, d) + payload)


def import_features(path) -> FeatureGrid:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CorruptFileError(f"{path}: {len(blob)} bytes is shorter than the feature header")
    magic, version, h, w, d = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature container version {version}")
    expected = h * w * d * 4
    got = len(blob) - _HEADER.size
    if got != expected:
        raise CorruptFileError(f"{path}: payload has {got} bytes, header {h}x{w}x{d} needs {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(h, w, d)
    bad = np.argwhere(~np.isfinite(values))
    if len(bad):
        raise NonFiniteError(f"{path}: non-finite feature at index {tuple(int(v) for v in bad[0])}")
    return FeatureGrid(values.astype(np.float32), "imported")


def correlate(src: FeatureGrid, tgt: FeatureGrid) -> np.ndarray:
    """Cosine similarity between every source and every target descriptor.

    Returns a float64 array of shape (h_s, w_s, h_t, w_t).  Descriptors with
    zero norm have similarity 0 with everything.
    """
    a = np.asarray(src.values if isinstance(src, FeatureGrid) else src, dtype=np.float64)
    b = np.asarray(tgt.values if isinstance(tgt, FeatureGrid) else tgt, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"correlate: channel mismatch {a.shape[-1]} vs {b.shape[-1]}")
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    a = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    b = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    cost = np.einsum("ijc,klc->ijkl", a, b)
    return np.clip(cost, -1.0, 1.0)
