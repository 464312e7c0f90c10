"""Annotations, synthetic ground truth, PCK and field-slice export.

Keypoints inside the package are ``[x_row, x_col, y_row, y_col]`` pixel
coordinates.  The JSON-lines annotation files use the image convention
instead: every keypoint is ``[xs, ys, xt, yt]`` with ``x`` the column and
``y`` the row, and bounding boxes are ``[x0, y0, x1, y1]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import AnnotationError, GuardError, ShapeError
from .features import ExtractorConfig, ImagePair, correlate, extract_handcrafted, read_image
from .field import sigmoid_np
from .inference import EXHAUSTIVE_GUARD, FlowField, lattice_points
from .training import TrainPair

PCK_THRESHOLDS = (0.01, 0.03, 0.05, 0.1, 0.15)
WARP_FAMILIES = ("identity", "translation", "rigid", "affine", "tps")


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

@dataclass
class PairAnnotation:
    src: str
    tgt: str
    keypoints: np.ndarray  # (n, 4) [x_row, x_col, y_row, y_col]
    bbox: tuple[float, float, float, float] | None = None  # x0, y0, x1, y1 in the target image
    category: str = ""
    src_shape: tuple[int, int] | None = None
    tgt_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 4)

    def validate(self) -> None:
        if self.src_shape is None or self.tgt_shape is None:
            raise AnnotationError("image shapes unknown")
        kps = self.keypoints
        if not np.all(np.isfinite(kps)):
            raise AnnotationError("non-finite keypoint")
        for name, shape, cols in (("source", self.src_shape, (0, 1)), ("target", self.tgt_shape, (2, 3))):
            pts = kps[:, cols]
            bad = np.flatnonzero((pts < 0).any(axis=1) | (pts[:, 0] > shape[0] - 1) | (pts[:, 1] > shape[1] - 1))
            if bad.size:
                r, c = pts[bad[0]]
                raise AnnotationError(f"{name} keypoint {bad[0]} at (x={c:g}, y={r:g}) outside {shape[1]}x{shape[0]} image")
        if self.bbox is not None:
            x0, y0, x1, y1 = self.bbox
            H, W = self.tgt_shape
            if not (0 <= x0 <= x1 <= W and 0 <= y0 <= y1 <= H):
                raise AnnotationError(f"bbox {list(self.bbox)} outside {W}x{H} target image")

    def to_json(self) -> dict:
        kp = self.keypoints
        rec = {"src": self.src, "tgt": self.tgt,
               "kps": np.column_stack([kp[:, 1], kp[:, 0], kp[:, 3], kp[:, 2]]).tolist(),
               "bbox": None if self.bbox is None else [float(v) for v in self.bbox],
               "category": self.category}
        if self.src_shape is not None:
            rec["src_shape"] = list(self.src_shape)
        if self.tgt_shape is not None:
            rec["tgt_shape"] = list(self.tgt_shape)
        return rec


def _from_json(rec: dict, base: Path) -> PairAnnotation:
    for key in ("src", "tgt", "kps"):
        if key not in rec:
            raise AnnotationError(f"missing field {key!r}")
    kps = np.asarray(rec["kps"], dtype=np.float64)
    if kps.size == 0:
        kps = kps.reshape(0, 4)
    if kps.ndim != 2 or kps.shape[1] != 4:
        raise AnnotationError(f"kps must be a list of [xs, ys, xt, yt], got shape {kps.shape}")
    shapes = []
    for side in ("src", "tgt"):
        if f"{side}_shape" in rec:
            shapes.append(tuple(int(v) for v in rec[f"{side}_shape"]))
        elif rec[side].startswith("synthetic:"):
            raise AnnotationError(f"{side} is synthetic but {side}_shape is missing")
        else:
            path = Path(rec[side]) if Path(rec[side]).is_absolute() else base / rec[side]
            if not path.exists():
                raise AnnotationError(f"missing image {rec[side]}")
            with Image.open(path) as im:
                shapes.append((im.height, im.width))
    ann = PairAnnotation(rec["src"], rec["tgt"], np.column_stack([kps[:, 1], kps[:, 0], kps[:, 3], kps[:, 2]]),
                         tuple(rec["bbox"]) if rec.get("bbox") is not None else None,
                         str(rec.get("category", "")), shapes[0], shapes[1])
    ann.validate()
    return ann


@dataclass
class LoadReport:
    records: list[PairAnnotation] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)  # (line number, message)

    def summary(self) -> str:
        return f"{len(self.records)} records loaded, {len(self.errors)} rejected"


def load_dataset(path, format: str = "jsonl") -> LoadReport:
    """Read a JSON-lines annotation file; bad records are reported, not fatal."""
    if format != "jsonl":
        raise ValueError(f"unsupported annotation format {format!r}")
    path = Path(path)
    report = LoadReport()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise AnnotationError("record is not a JSON object")
            report.records.append(_from_json(rec, path.parent))
        except (json.JSONDecodeError, AnnotationError, ValueError, TypeError, OSError) as exc:
            report.errors.append((lineno, str(exc)))
    return report


def write_dataset(annotations, path) -> None:
    with open(path, "w") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_json()) + "\n")


# ---------------------------------------------------------------------------
# synthetic pairs
# ---------------------------------------------------------------------------

@dataclass
class SyntheticWarp:
    """Smooth invertible map from source to target pixel coordinates (row, col)."""

    family: str
    shape: tuple[int, int]
    matrix: np.ndarray = field(default_factory=lambda: np.eye(2))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    bumps: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # row, col, d_row, d_col
    sigma: float = 6.0

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.shape, dtype=np.float64) - 1) / 2

    def _bump(self, p: np.ndarray) -> np.ndarray:
        out = np.zeros_like(p)
        for r, c, dr, dc in self.bumps:
            w = np.exp(-((p[..., 0] - r) ** 2 + (p[..., 1] - c) ** 2) / (2 * self.sigma ** 2))
            out[..., 0] += dr * w
            out[..., 1] += dc * w
        return out

    def forward(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        q = (p - self.center) @ self.matrix.T + self.center + self.offset
        return q + self._bump(p)

    def inverse(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        inv = np.linalg.inv(self.matrix)
        p = (q - self.center - self.offset) @ inv.T + self.center
        if len(self.bumps):
            # forward = affine + bump with a contractive bump, so fixed-point iteration converges
            target = p
            for _ in range(100):
                p = target - self._bump(p) @ inv.T
        return p


def make_warp(family: str, shape, rng: np.random.Generator, **fixed) -> SyntheticWarp:
    """Random warp of one family; keyword arguments pin individual parameters."""
    if family not in WARP_FAMILIES:
        raise ValueError(f"unknown warp family {family!r}; expected one of {WARP_FAMILIES}")
    H, W = shape
    span = 0.12 * min(H, W)
    offset = np.asarray(fixed.get("offset", rng.uniform(-span, span, 2)), dtype=np.float64)
    if family == "identity":
        return SyntheticWarp(family, tuple(shape))
    if family == "translation":
        return SyntheticWarp(family, tuple(shape), offset=offset)
    theta = float(fixed.get("angle", rng.uniform(-0.25, 0.25)))
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    if family == "rigid":
        return SyntheticWarp(family, tuple(shape), matrix=rot, offset=offset)
    if "matrix" in fixed:
        matrix = np.asarray(fixed["matrix"], dtype=np.float64)
    else:
        s = rng.uniform(0.88, 1.12, 2)
        shear = rng.uniform(-0.12, 0.12)
        matrix = rot @ np.array([[s[0], shear], [0.0, s[1]]])
    if family == "affine":
        return SyntheticWarp(family, tuple(shape), matrix=matrix, offset=offset)
    sigma = 0.25 * min(H, W)
    n = 4
    # small amplitudes relative to sigma keep the bump map contractive
    amp = rng.uniform(-0.15, 0.15, (n, 2)) * sigma
    centers = rng.uniform(0, 1, (n, 2)) * (np.array(shape) - 1)
    return SyntheticWarp(family, tuple(shape), matrix=matrix, offset=offset * 0.5,
                         bumps=np.column_stack([centers, amp]), sigma=sigma)


@dataclass(frozen=True)
class Texture:
    """Continuous procedural RGB texture: sinusoids, blobs and soft disks."""

    waves: np.ndarray  # (C, n, 4): amplitude, f_row, f_col, phase
    blobs: np.ndarray  # (m, 6): row, col, sigma, amplitude per channel x3
    disks: np.ndarray  # (k, 6): row, col, radius, amplitude per channel x3

    @classmethod
    def random(cls, rng: np.random.Generator, shape) -> "Texture":
        H, W = shape
        n, m, k = 6, 6, 4
        freq = rng.uniform(1.0, 5.0, (3, n)) / max(H, W)
        ang = rng.uniform(0, np.pi, (3, n))
        waves = np.stack([rng.uniform(0.2, 0.6, (3, n)), freq * np.sin(ang), freq * np.cos(ang),
                          rng.uniform(0, 2 * np.pi, (3, n))], axis=-1)
        ext = np.array([H, W]) - 1
        blobs = np.column_stack([rng.uniform(-0.1, 1.1, (m, 2)) * ext, rng.uniform(1.5, 4.0, m),
                                 rng.uniform(-1.5, 1.5, (m, 3))])
        disks = np.column_stack([rng.uniform(0, 1, (k, 2)) * ext, rng.uniform(2.0, 5.0, k),
                                 rng.uniform(-1.0, 1.0, (k, 3))])
        return cls(waves, blobs, disks)

    def __call__(self, p: np.ndarray) -> np.ndarray:
        r, c = p[..., 0], p[..., 1]
        out = np.zeros(p.shape[:-1] + (3,))
        for ch in range(3):
            for amp, fr, fc, ph in self.waves[ch]:
                out[..., ch] += amp * np.sin(2 * np.pi * (fr * r + fc * c) + ph)
        for br, bc, s, *amp in self.blobs:
            w = np.exp(-((r - br) ** 2 + (c - bc) ** 2) / (2 * s * s))
            out += w[..., None] * np.asarray(amp)
        for dr, dc, rad, *amp in self.disks:
            w = 1 / (1 + np.exp((np.hypot(r - dr, c - dc) - rad) / 0.6))
            out += w[..., None] * np.asarray(amp)
        return 0.5 + 0.5 * np.tanh(0.8 * out)


@dataclass
class SyntheticPair:
    images: ImagePair
    annotation: PairAnnotation
    flow: FlowField  # dense ground truth on the source pixel lattice
    warp: SyntheticWarp


def pixel_grid(shape) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(shape[0], dtype=np.float64), np.arange(shape[1], dtype=np.float64),
                             indexing="ij")
    return np.stack([rows, cols], axis=-1)


def synthesize(warp: SyntheticWarp, texture: Texture, rng: np.random.Generator, keypoints: int = 20,
               kp_lattice=(16, 16), name: str = "synthetic:0") -> SyntheticPair:
    """Render a source image, its warped copy, the exact dense flow and keypoints.

    Keypoints are drawn without replacement from the ``kp_lattice`` points of
    the source image whose image under the warp stays inside the target.
    """
    shape = warp.shape
    grid = pixel_grid(shape)
    src = texture(grid)
    tgt = texture(warp.inverse(grid))
    dense = warp.forward(grid)
    flow = FlowField(dense, shape, shape, provenance="synthetic")

    lat = lattice_points(shape, kp_lattice).reshape(-1, 2)
    mapped = warp.forward(lat)
    ext = np.array(shape, dtype=np.float64) - 1
    ok = np.flatnonzero(np.all((mapped >= 0) & (mapped <= ext), axis=1))
    pick = np.sort(rng.choice(ok, size=min(keypoints, ok.size), replace=False))
    kps = np.column_stack([lat[pick], mapped[pick]])
    ann = PairAnnotation(name, name + ":target", kps, (0.0, 0.0, float(shape[1]), float(shape[0])),
                         warp.family, tuple(shape), tuple(shape))
    return SyntheticPair(ImagePair(src, tgt, name, ann.tgt), ann, flow, warp)


def generate_synthetic(count: int, family: str = "rigid", seed: int = 0, shape=(31, 31),
                       keypoints: int = 20, kp_lattice=(16, 16), **fixed) -> list[SyntheticPair]:
    """``count`` textured pairs related by random warps of ``family``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    children = np.random.SeedSequence(seed).spawn(count)
    return [_synthetic_one(child, family, seed, i, shape, keypoints, kp_lattice, fixed)
            for i, child in enumerate(children)]


def _synthetic_one(child, family, seed, index, shape, keypoints, kp_lattice, fixed) -> SyntheticPair:
    rng = np.random.default_rng(child)
    warp = make_warp(family, shape, rng, **fixed)
    tex = Texture.random(rng, shape)
    return synthesize(warp, tex, rng, keypoints, kp_lattice, name=f"synthetic:{family}:{seed}:{index}")


def synthetic_pair(family: str, seed: int, index: int, shape=(31, 31), keypoints: int = 20,
                   kp_lattice=(16, 16), **fixed) -> SyntheticPair:
    """Regenerate pair ``index`` of ``generate_synthetic(..., family, seed)`` on its own.

    Spawned seed sequences do not depend on how many siblings exist, so this
    equals the corresponding element of any batch that contains it.
    """
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")
    child = np.random.SeedSequence(seed, spawn_key=(index,))
    return _synthetic_one(child, family, seed, index, shape, keypoints, kp_lattice, fixed)


def parse_synthetic_name(name: str):
    """``synthetic:<family>:<seed>:<index>[:target]`` -> (family, seed, index, is_target) or None."""
    parts = name.split(":")
    if parts[0] != "synthetic" or len(parts) not in (4, 5) or (len(parts) == 5 and parts[4] != "target"):
        return None
    try:
        return parts[1], int(parts[2]), int(parts[3]), len(parts) == 5
    except ValueError:
        return None


def resolve_images(annotation: PairAnnotation, root=".") -> ImagePair:
    """Load the two images an annotation refers to.

    Synthetic references are regenerated; anything else is an image path
    relative to ``root``.
    """
    ref = parse_synthetic_name(annotation.src)
    if ref is not None:
        family, seed, index, _ = ref
        s = synthetic_pair(family, seed, index, shape=annotation.src_shape)
        return ImagePair(s.images.source, s.images.target, annotation.src, annotation.tgt)
    images = []
    for name in (annotation.src, annotation.tgt):
        path = Path(root) / name
        if not path.exists():
            raise AnnotationError(f"missing image {path}")
        images.append(read_image(path))
    return ImagePair(images[0], images[1], annotation.src, annotation.tgt)


def prepare_pair(images: ImagePair, annotation: PairAnnotation,
                 extractor: ExtractorConfig = ExtractorConfig()) -> TrainPair:
    """Features and cost volume for one annotated pair."""
    c = correlate(extract_handcrafted(images.source, extractor), extract_handcrafted(images.target, extractor))
    return TrainPair(c, tuple(images.source_shape), tuple(images.target_shape),
                     annotation.keypoints.copy(), annotation.src)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def pck_reference(annotation: PairAnnotation, norm: str = "bbox") -> float:
    """``max(H, W)`` of the target bounding box (``bbox``) or target image (``img``)."""
    if norm == "bbox":
        if annotation.bbox is None:
            raise AnnotationError("bbox normalization needs a bounding box")
        x0, y0, x1, y1 = annotation.bbox
        return float(max(x1 - x0, y1 - y0))
    if norm == "img":
        return float(max(annotation.tgt_shape))
    raise ValueError(f"unknown PCK normalization {norm!r}")


def pck(predicted, ground_truth, alpha: float, reference: float) -> float:
    """Fraction of keypoints within ``alpha * reference`` pixels (inclusive)."""
    pred = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ShapeError(f"pck: {len(pred)} predictions for {len(gt)} keypoints")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(gt) == 0:
        return float("nan")
    d = np.hypot(*(pred - gt).T)
    return float(np.mean(d <= alpha * reference))


def pck_table(predictions, annotations, thresholds=PCK_THRESHOLDS, norm: str = "bbox") -> dict[float, float]:
    """PCK pooled over all keypoints of all pairs, per threshold."""
    out = {}
    for a in thresholds:
        hits, total = 0.0, 0
        for pred, ann in zip(predictions, annotations, strict=True):
            n = len(ann.keypoints)
            if n:
                hits += pck(pred, ann.keypoints[:, 2:], a, pck_reference(ann, norm)) * n
                total += n
        out[a] = hits / total if total else float("nan")
    return out


# ---------------------------------------------------------------------------
# field slices
# ---------------------------------------------------------------------------

def export_field_slice(field_, source_point, resolution, path=None, sigma: float = 0.0,
                       guard: int = EXHAUSTIVE_GUARD, batch_size: int = 4096) -> np.ndarray:
    """Scores ``M([x, y])`` for ``y`` on a ``resolution`` lattice over the target image.

    Optional Gaussian smoothing (``sigma`` in lattice cells; 0 = raw).  With
    ``path`` the grid is written as CSV: ``#`` metadata lines, the header
    ``row,col,score`` and one line per lattice point in row-major order.
    """
    h, w = resolution
    if h < 1 or w < 1:
        raise ValueError(f"resolution must be positive, got {resolution}")
    if h * w > guard:
        raise GuardError(f"field slice needs {h * w} evaluations, guard is {guard}")
    pts_t = lattice_points(field_.tgt_shape, (h, w)).reshape(-1, 2)
    src = np.broadcast_to(np.asarray(source_point, dtype=np.float64), pts_t.shape)
    logits = field_.logits(np.column_stack([src, pts_t]), batch_size)
    grid = sigmoid_np(logits.astype(np.float64)).reshape(h, w)
    if sigma > 0:
        grid = ndimage.gaussian_filter(grid, sigma, mode="nearest")
    if path is not None:
        coords = pts_t.reshape(h, w, 2)
        with open(path, "w") as fh:
            fh.write(f"# source_row={float(source_point[0])!r}\n# source_col={float(source_point[1])!r}\n")
            fh.write(f"# resolution={h}x{w}\n# target_shape={field_.tgt_shape[0]}x{field_.tgt_shape[1]}\n")
            fh.write(f"# smoothing_sigma={float(sigma)!r}\n")
            fh.write("row,col,score\n")
            for i in range(h):
                for j in range(w):
                    fh.write(f"{float(coords[i, j, 0])!r},{float(coords[i, j, 1])!r},{float(grid[i, j])!r}\n")
    return grid


def read_field_slice(path) -> tuple[dict, np.ndarray]:
    meta, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif line and line != "row,col,score":
            rows.append([float(v) for v in line.split(",")])
    h, w = (int(v) for v in meta["resolution"].split("x"))
    return meta, np.asarray(rows)[:, 2].reshape(h, w)
