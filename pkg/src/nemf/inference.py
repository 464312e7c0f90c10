"""Dense correspondence inference on a matching field.

Flows live on a *source lattice*: ``h x w`` points spread over the source
image with corners aligned (point ``i`` of ``n`` along an axis of extent
``E`` sits at pixel ``i (E - 1) / (n - 1)``).  A flow stores, per lattice
point, its matched target position in target-image pixels.

A PatchMatch round scores, for every source point at once, the current
match, the displacements of its lattice neighbours applied at the point,
and ``R`` uniformly drawn target-lattice points; the best candidate wins
and ties keep the earlier candidate (the current match comes first).  All
points read the previous round's flow, so the update is synchronous.

Coordinate optimization then runs gradient descent on ``-log M`` with
respect to the target coordinate only, in normalized ``[-1, 1]``
coordinates, and keeps the best iterate if it beats the starting score.

Candidates are compared by their pre-sigmoid logits, which order the same
way as the scores but do not saturate in single precision.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

from .errors import CorruptFileError, FormatError, GuardError, ShapeError, VersionError

EXHAUSTIVE_GUARD = 10_000_000
FLOW_MAGIC = "NMFF"
FLOW_VERSION = 1


def lattice_axis(extent: int, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"lattice size must be positive, got {n}")
    if n == 1:
        return np.array([(extent - 1) / 2.0])
    return np.arange(n) * ((extent - 1) / (n - 1))


def lattice_points(shape, lattice) -> np.ndarray:
    """(h, w, 2) pixel coordinates of an ``h x w`` lattice over an image of ``shape``."""
    rows = lattice_axis(shape[0], lattice[0])
    cols = lattice_axis(shape[1], lattice[1])
    r, c = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([r, c], axis=-1)


def nearest_lattice_index(points, shape, lattice) -> np.ndarray:
    """(n, 2) integer lattice indices nearest to pixel ``points``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.empty(pts.shape, dtype=np.int64)
    for a in range(2):
        n, E = lattice[a], shape[a]
        out[:, a] = 0 if n == 1 else np.clip(np.rint(pts[:, a] * (n - 1) / (E - 1)), 0, n - 1)
    return out


# ---------------------------------------------------------------------------
# flow fields
# ---------------------------------------------------------------------------

@dataclass
class FlowField:
    targets: np.ndarray  # (h, w, 2) matched target pixel per source lattice point
    src_shape: tuple[int, int]
    tgt_shape: tuple[int, int]
    provenance: str = "nemf"

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim != 3 or self.targets.shape[2] != 2:
            raise ShapeError(f"flow targets must be (h, w, 2), got {self.targets.shape}")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("flow contains non-finite entries")
        self.src_shape = tuple(int(v) for v in self.src_shape)
        self.tgt_shape = tuple(int(v) for v in self.tgt_shape)

    @property
    def lattice(self) -> tuple[int, int]:
        return self.targets.shape[:2]

    @property
    def sources(self) -> np.ndarray:
        return lattice_points(self.src_shape, self.lattice)

    @property
    def displacement(self) -> np.ndarray:
        return self.targets - self.sources

    def copy(self) -> "FlowField":
        return FlowField(self.targets.copy(), self.src_shape, self.tgt_shape, self.provenance)

    def transfer(self, points) -> np.ndarray:
        """Targets of arbitrary source pixels by bilinear interpolation of the displacement."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        h, w = self.lattice
        coords = np.stack([pts[:, 0] * ((h - 1) / (self.src_shape[0] - 1)) if h > 1 else np.zeros(len(pts)),
                           pts[:, 1] * ((w - 1) / (self.src_shape[1] - 1)) if w > 1 else np.zeros(len(pts))])
        disp = self.displacement
        out = np.stack([map_coordinates(disp[..., a], coords, order=1, mode="nearest") for a in range(2)], axis=1)
        return pts + out

    # -- persistence -------------------------------------------------------

    def header(self) -> str:
        h, w = self.lattice
        return (f"{FLOW_MAGIC} {FLOW_VERSION}\n"
                f"src_shape={self.src_shape[0]} {self.src_shape[1]}\n"
                f"tgt_shape={self.tgt_shape[0]} {self.tgt_shape[1]}\n"
                f"lattice={h} {w}\n"
                f"provenance={self.provenance}\n"
                "layout=dy,dx float32 little-endian row-major\n"
                "END\n")

    def save(self, path) -> None:
        """Text header, then (dy, dx) displacement pairs as float32."""
        payload = np.ascontiguousarray(self.displacement, dtype="<f4").tobytes()
        Path(path).write_bytes(self.header().encode() + payload)

    @classmethod
    def load(cls, path) -> "FlowField":
        blob = Path(path).read_bytes()
        end = blob.find(b"END\n")
        if not blob.startswith(FLOW_MAGIC.encode() + b" ") or end < 0:
            raise FormatError(f"{path}: not an {FLOW_MAGIC} flow file")
        lines = blob[:end].decode().splitlines()
        version = int(lines[0].split()[1])
        if version != FLOW_VERSION:
            raise VersionError(f"{path}: flow file version {version}, expected {FLOW_VERSION}")
        meta = dict(line.split("=", 1) for line in lines[1:])
        try:
            src = tuple(int(v) for v in meta["src_shape"].split())
            tgt = tuple(int(v) for v in meta["tgt_shape"].split())
            h, w = (int(v) for v in meta["lattice"].split())
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: malformed flow header") from exc
        payload = blob[end + 4:]
        if len(payload) != h * w * 2 * 4:
            raise CorruptFileError(f"{path}: expected {h * w * 8} payload bytes, found {len(payload)}")
        disp = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float64)
        return cls(lattice_points(src, (h, w)) + disp, src, tgt, meta.get("provenance", ""))

    def save_png(self, path, max_magnitude: float | None = None) -> None:
        """Colour-wheel rendering of the displacement (hue = direction, saturation = length)."""
        Image.fromarray(flow_to_color(self.displacement, max_magnitude)).save(path)


def _color_wheel() -> np.ndarray:
    segments = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)),
                (4, (0, 255, 0), (0, 255, 255)), (11, (0, 255, 255), (0, 0, 255)),
                (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, a, b in segments:
        t = np.arange(n)[:, None] / n
        rows.append((1 - t) * np.array(a) + t * np.array(b))
    return np.concatenate(rows) / 255.0


def flow_to_color(disp: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """(h, w, 2) (dy, dx) -> (h, w, 3) uint8 on the standard optical-flow colour wheel."""
    wheel = _color_wheel()
    dy, dx = disp[..., 0], disp[..., 1]
    mag = np.hypot(dy, dx)
    top = max_magnitude if max_magnitude else max(float(mag.max()), 1e-12)
    rad = np.clip(mag / top, 0, 1)
    ang = np.arctan2(-dy, -dx) / np.pi  # [-1, 1]
    fk = (ang + 1) / 2 * (len(wheel) - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % len(wheel)
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    col = 1 - rad[..., None] * (1 - col)
    return np.round(col * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InferenceConfig:
    rounds: int = 10  # N
    step: float = 3e-4  # alpha, in normalized coordinates
    inner_steps: int = 10
    random: int = 4  # R
    neighborhood: int = 8
    batch_size: int = 4096
    keypoints_only: bool = False
    coord_opt: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.step < 0:
            raise ValueError("step must be >= 0")
        if self.random < 0 or self.inner_steps < 0:
            raise ValueError("random and inner_steps must be >= 0")
        if self.neighborhood not in (4, 8):
            raise ValueError("neighborhood must be 4 or 8")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _offsets(neighborhood: int):
    if neighborhood == 4:
        return [(-1, 0), (0, -1), (0, 1), (1, 0)]
    return [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]


def _queries(sources: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return np.concatenate([sources, targets], axis=-1).reshape(-1, 4)


def initialize_flow(V: np.ndarray, src_shape, tgt_shape, lattice=None) -> FlowField:
    """Hard argmax of each source cell's target slice of the pooled volume.

    Lattice points use the slice of their nearest source cell; ties go to the
    lowest row-major target cell.
    """
    V = np.asarray(V)
    if V.ndim != 4:
        raise ShapeError(f"initialize_flow: expected a 4D pooled volume, got {V.shape}")
    gh, gw, th, tw = V.shape
    lattice = tuple(lattice) if lattice is not None else (gh, gw)
    src = lattice_points(src_shape, lattice).reshape(-1, 2)
    cells = nearest_lattice_index(src, src_shape, (gh, gw))
    best = np.argmax(V.reshape(gh, gw, th * tw)[cells[:, 0], cells[:, 1]], axis=1)
    tgt = lattice_points(tgt_shape, (th, tw)).reshape(-1, 2)[best]
    return FlowField(tgt.reshape(lattice + (2,)), src_shape, tgt_shape, "init")


def patchmatch_round(field, flow: FlowField, cfg: InferenceConfig, rng: np.random.Generator,
                     tgt_lattice) -> tuple[FlowField, np.ndarray]:
    """One synchronous propagation + random search step; returns the flow and its logits."""
    h, w = flow.lattice
    src = flow.sources
    disp = flow.displacement
    hi = np.array(flow.tgt_shape, dtype=np.float64) - 1
    cands = [flow.targets]
    for di, dj in _offsets(cfg.neighborhood):
        shifted = disp.copy()  # outside the lattice the point re-proposes itself
        rs, re = max(0, -di), h - max(0, di)
        cs, ce = max(0, -dj), w - max(0, dj)
        shifted[rs:re, cs:ce] = disp[rs + di:re + di, cs + dj:ce + dj]
        cands.append(np.clip(src + shifted, 0, hi))
    if cfg.random:
        tl = lattice_points(flow.tgt_shape, tgt_lattice)
        ri = rng.integers(0, tgt_lattice[0], size=(h, w, cfg.random))
        ci = rng.integers(0, tgt_lattice[1], size=(h, w, cfg.random))
        rand = tl[ri, ci]
        cands.extend(rand[:, :, k] for k in range(cfg.random))
    Y = np.stack(cands, axis=2)  # h, w, C, 2
    C = Y.shape[2]
    X = np.broadcast_to(src[:, :, None, :], Y.shape)
    z = field.logits(_queries(X, Y), cfg.batch_size).reshape(h, w, C)
    pick = np.argmax(z, axis=2)
    new = np.take_along_axis(Y, pick[:, :, None, None], axis=2)[:, :, 0]
    best = np.take_along_axis(z, pick[:, :, None], axis=2)[:, :, 0]
    return FlowField(new, flow.src_shape, flow.tgt_shape, "patchmatch"), best


def coordinate_optimize(field, flow: FlowField, cfg: InferenceConfig, logits: np.ndarray | None = None,
                        mask: np.ndarray | None = None) -> tuple[FlowField, np.ndarray]:
    """Guarded gradient descent on the target coordinate of every (masked) point.

    ``logits`` are the current per-point logits (computed if omitted).  A
    point moves to its best iterate only when that strictly beats its
    current logit, so no point's score ever drops.
    """
    h, w = flow.lattice
    if logits is None:
        logits = field.logits(_queries(flow.sources, flow.targets), cfg.batch_size).reshape(h, w)
    out_t, out_z = flow.targets.copy(), np.array(logits, copy=True)
    sel = np.ones((h, w), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if cfg.step == 0 or cfg.inner_steps == 0 or not sel.any():
        return FlowField(out_t, flow.src_shape, flow.tgt_shape, "coord_opt"), out_z
    x = flow.sources[sel]
    y = flow.targets[sel]
    best_y, best_z = y.copy(), out_z[sel].copy()
    hi = np.array(flow.tgt_shape, dtype=np.float64) - 1
    # a step of alpha in normalized units is alpha * ((E - 1) / 2)^2 per pixel of gradient
    gain = cfg.step * (hi / 2) ** 2
    _, g = field.logits_and_grad(np.concatenate([x, y], axis=1), cfg.batch_size)
    for k in range(cfg.inner_steps):
        y = np.clip(y - gain * g, 0, hi)
        q = np.concatenate([x, y], axis=1)
        if k + 1 < cfg.inner_steps:
            z, g = field.logits_and_grad(q, cfg.batch_size)
        else:
            z = field.logits(q, cfg.batch_size)
        better = z > best_z
        best_y[better] = y[better]
        best_z[better] = z[better]
    out_t[sel] = best_y
    out_z[sel] = best_z
    return FlowField(out_t, flow.src_shape, flow.tgt_shape, "coord_opt"), out_z


@dataclass
class InferenceResult:
    flow: FlowField
    logits: np.ndarray  # (h, w) final per-point logits
    history: np.ndarray  # (N + 1, h, w) logits after initialization and after each round
    seconds: dict = field(default_factory=dict)
    evaluations: int = 0


def infer_dense(field, V: np.ndarray, cfg: InferenceConfig = InferenceConfig(), src_lattice=None,
                tgt_lattice=None, keypoints=None) -> InferenceResult:
    """Initialize from ``V``, then ``N`` rounds of PatchMatch followed by coordinate optimization.

    ``keypoints`` (n, 2) source pixels restrict coordinate optimization to
    their nearest lattice points when ``cfg.keypoints_only`` is set.
    """
    t0 = time.perf_counter()
    start_evals = getattr(field, "evaluations", 0)
    V = np.asarray(V)
    tgt_lattice = tuple(tgt_lattice) if tgt_lattice is not None else V.shape[2:]
    flow = initialize_flow(V, field.src_shape, field.tgt_shape, src_lattice)
    h, w = flow.lattice
    mask = None
    if cfg.keypoints_only:
        if keypoints is None:
            raise ValueError("keypoints_only needs keypoints")
        idx = nearest_lattice_index(keypoints, field.src_shape, (h, w))
        mask = np.zeros((h, w), dtype=bool)
        mask[idx[:, 0], idx[:, 1]] = True
    rng = np.random.default_rng(cfg.seed)
    z = field.logits(_queries(flow.sources, flow.targets), cfg.batch_size).reshape(h, w)
    history = [z]
    t_pm = t_co = 0.0
    for _ in range(cfg.rounds):
        t = time.perf_counter()
        flow, z = patchmatch_round(field, flow, cfg, rng, tgt_lattice)
        t_pm += time.perf_counter() - t
        if cfg.coord_opt:
            t = time.perf_counter()
            flow, z = coordinate_optimize(field, flow, cfg, z, mask)
            t_co += time.perf_counter() - t
        history.append(z)
    flow.provenance = "patchmatch+coord_opt" if cfg.coord_opt else "patchmatch"
    seconds = {"patchmatch": t_pm, "coord_opt": t_co, "total": time.perf_counter() - t0}
    return InferenceResult(flow, z, np.stack(history), seconds,
                           getattr(field, "evaluations", 0) - start_evals)


def match_exhaustive(field, points, tgt_lattice, guard: int = EXHAUSTIVE_GUARD,
                     batch_size: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Best target-lattice point for every source pixel in ``points`` (n, 2)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    tl = lattice_points(field.tgt_shape, tgt_lattice).reshape(-1, 2)
    total = len(pts) * len(tl)
    if total > guard:
        raise GuardError(f"exhaustive search needs {total} evaluations, guard is {guard}")
    best_t = np.empty_like(pts)
    best_z = np.empty(len(pts))
    chunk = max(1, 65536 // len(tl))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        X = np.repeat(p, len(tl), axis=0)
        Y = np.tile(tl, (len(p), 1))
        z = field.logits(np.concatenate([X, Y], axis=1), batch_size).reshape(len(p), len(tl))
        k = np.argmax(z, axis=1)
        best_t[s:s + chunk] = tl[k]
        best_z[s:s + chunk] = z[np.arange(len(p)), k]
    return best_t, best_z


def infer_exhaustive(field, src_lattice, tgt_lattice, guard: int = EXHAUSTIVE_GUARD,
                     batch_size: int = 4096) -> tuple[FlowField, np.ndarray]:
    """True argmax of the field over the target lattice for every source lattice point."""
    total = int(np.prod(src_lattice)) * int(np.prod(tgt_lattice))
    if total > guard:
        raise GuardError(f"exhaustive search needs {total} evaluations, guard is {guard}")
    src = lattice_points(field.src_shape, src_lattice)
    t, z = match_exhaustive(field, src.reshape(-1, 2), tgt_lattice, guard, batch_size)
    h, w = src_lattice
    return FlowField(t.reshape(h, w, 2), field.src_shape, field.tgt_shape, "exhaustive"), z.reshape(h, w)
