"""The implicit matching field ``M(p) = sigmoid(f(encode(p), phi(C', p)))``.

A query ``p = [x_row, x_col, y_row, y_col]`` is given in pixel coordinates
of the source (x) and target (y) images.  Each coordinate is normalized to
``[-1, 1]`` by ``t = 2 p / (extent - 1) - 1`` before the sinusoidal encoding.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .cost_embed import EmbedConfig, EmbedderParams, interpolate
from .errors import CorruptFileError, FormatError, ShapeError, VersionError
from .params import ParamSet, he_uniform
from .tensor import Tensor

ROW_BLOCK = 256


@dataclass(frozen=True)
class FieldConfig:
    octaves: int = 10  # L
    hidden: int = 256
    blocks: int = 3
    channels: int = 16  # K, must match the embedder
    dtype: str = "float32"

    @property
    def input_dim(self) -> int:
        return 4 * 2 * (self.octaves + 1)


def encode(t, octaves: int) -> Tensor:
    """Sinusoidal lift of every scalar in ``t`` (N, m) to (N, m * 2 (L + 1)).

    Per scalar the layout is ``[sin(2^0 pi t), cos(2^0 pi t), ..., sin(2^L pi t), cos(2^L pi t)]``.
    """
    if octaves < 0:
        raise ValueError(f"octave count must be >= 0, got {octaves}")
    t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64))
    n, m = t.shape
    freqs = (2.0 ** np.arange(octaves + 1) * np.pi).astype(t.dtype)
    args = t.reshape(n, m, 1).broadcast_to((n, m, octaves + 1)) * freqs
    s = T.sin(args).reshape(n, m * (octaves + 1), 1)
    c = T.cos(args).reshape(n, m * (octaves + 1), 1)
    return T.concat([s, c], axis=2).reshape(n, 2 * m * (octaves + 1))


def normalize_points(points: Tensor, src_shape, tgt_shape) -> Tensor:
    extents = np.array([src_shape[0], src_shape[1], tgt_shape[0], tgt_shape[1]], dtype=np.float64)
    scale = np.where(extents > 1, 2.0 / np.maximum(extents - 1, 1), 0.0).astype(points.dtype)
    shift = np.where(extents > 1, -1.0, 0.0).astype(points.dtype)
    return points * scale + shift


class FieldModel(ParamSet):
    """Residual MLP; the cost feature vector is added before every block."""

    prefix = "field."

    def __init__(self, config: FieldConfig = FieldConfig(), seed: int = 0):
        super().__init__(config)
        rng = np.random.default_rng(seed)
        H, K, dt = config.hidden, config.channels, config.dtype
        self.add("input.weight", he_uniform(rng, config.input_dim, (config.input_dim, H), dt))
        self.add("input.bias", np.zeros(H))
        for b in range(config.blocks):
            self.add(f"block{b}.cond.weight", he_uniform(rng, K, (K, H), dt))
            self.add(f"block{b}.cond.bias", np.zeros(H))
            for j in range(2):
                self.add(f"block{b}.fc{j}.weight", he_uniform(rng, H, (H, H), dt))
                self.add(f"block{b}.fc{j}.bias", np.zeros(H))
        bound = 1.0 / np.sqrt(H)
        self.add("head.weight", rng.uniform(-bound, bound, size=(H, 1)))
        self.add("head.bias", np.zeros(1))
        self.meta: dict = {}

    def frozen(self) -> "FieldModel":
        """Shallow copy whose parameters do not record gradients."""
        twin = copy.copy(self)
        twin.params = {k: Tensor(v.data) for k, v in self.params.items()}
        return twin

    def logits(self, encoded: Tensor, phi: Tensor) -> Tensor:
        cfg = self.config
        if encoded.shape[1] != cfg.input_dim or phi.shape[1] != cfg.channels:
            raise ShapeError(f"field: expected inputs (N, {cfg.input_dim}) and (N, {cfg.channels}), "
                             f"got {encoded.shape} and {phi.shape}")
        p = self.params
        h = encoded @ p["input.weight"] + p["input.bias"]
        for b in range(cfg.blocks):
            h = h + (phi @ p[f"block{b}.cond.weight"] + p[f"block{b}.cond.bias"])
            net = T.relu(h) @ p[f"block{b}.fc0.weight"] + p[f"block{b}.fc0.bias"]
            h = h + (T.relu(net) @ p[f"block{b}.fc1.weight"] + p[f"block{b}.fc1.bias"])
        z = T.relu(h) @ p["head.weight"] + p["head.bias"]
        return z.reshape(-1)


def field_logits(model: FieldModel, vol: Tensor, points, src_shape, tgt_shape) -> Tensor:
    """Pre-sigmoid field values at (N, 4) pixel-coordinate query points."""
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=vol.dtype))
    if vol.shape[-1] != model.config.channels:
        raise ShapeError(f"field: volume has {vol.shape[-1]} channels, model expects {model.config.channels}")
    enc = encode(normalize_points(pts, src_shape, tgt_shape), model.config.octaves)
    phi = interpolate(vol, pts, src_shape, tgt_shape)
    return model.logits(enc, phi)


def evaluate(model: FieldModel, vol: Tensor, points, src_shape, tgt_shape) -> Tensor:
    """Match scores in (0, 1) for a batch of query points."""
    return T.sigmoid(field_logits(model, vol, points, src_shape, tgt_shape))


def _blocks(points: np.ndarray, batch_size: int):
    """Yield (start, rows, n): fixed ROW_BLOCK-row blocks, the last one padded."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    for s in range(0, len(points), ROW_BLOCK):
        rows = points[s:s + ROW_BLOCK]
        n = len(rows)
        if n < ROW_BLOCK:
            rows = np.concatenate([rows, np.repeat(rows[:1], ROW_BLOCK - n, axis=0)])
        yield s, rows, n


class MatchingField:
    """A trained model bound to one cost feature volume, for inference.

    Queries are always evaluated in blocks of exactly ``ROW_BLOCK`` rows
    (the last block padded), so every matrix product has the same shape and
    each row's result is bitwise independent of the batch it arrived in.
    ``batch_size`` is validated but cannot change the result.
    """

    def __init__(self, model: FieldModel, vol, src_shape, tgt_shape):
        self.model = model.frozen()
        data = vol.data if isinstance(vol, Tensor) else np.asarray(vol)
        self.vol = Tensor(data.astype(model.config.dtype))
        self.src_shape = tuple(src_shape)
        self.tgt_shape = tuple(tgt_shape)
        self.evaluations = 0

    @property
    def dtype(self):
        return self.vol.dtype

    def _logits(self, pts):
        return field_logits(self.model, self.vol, pts, self.src_shape, self.tgt_shape)

    def logits(self, points: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        """Pre-sigmoid values; same ordering as the scores, without saturation."""
        points = np.asarray(points, dtype=self.dtype).reshape(-1, 4)
        out = np.empty(len(points), dtype=self.dtype)
        with T.no_grad():
            for s, rows, n in _blocks(points, batch_size):
                out[s:s + n] = self._logits(rows).data[:n]
        self.evaluations += len(points)
        return out

    def scores(self, points: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        return sigmoid_np(self.logits(points, batch_size))

    def logits_and_grad(self, points: np.ndarray, batch_size: int = 4096):
        """Logits and the gradient of ``-log M`` w.r.t. the target coordinates (N, 2)."""
        points = np.asarray(points, dtype=self.dtype).reshape(-1, 4)
        logits = np.empty(len(points), dtype=self.dtype)
        grads = np.empty((len(points), 2), dtype=self.dtype)
        for s, rows, n in _blocks(points, batch_size):
            leaf = Tensor(rows, requires_grad=True)
            z = self._logits(leaf)
            # d(-log sigmoid(z))/dz = sigmoid(z) - 1, applied as a constant weight
            T.backward(T.sum_(z * Tensor(sigmoid_np(z.data) - 1)))
            logits[s:s + n] = z.data[:n]
            grads[s:s + n] = leaf.grad[:n, 2:]
        self.evaluations += len(points)
        return logits, grads


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return T.sigmoid(Tensor(z)).data


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

WEIGHT_MAGIC = b"NMFW"
WEIGHT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _config_block(model: FieldModel, embedder: EmbedderParams, meta: dict | None) -> dict:
    return {"field": asdict(model.config), "embed": asdict(embedder.config), "meta": meta or {}}


def save_model(model: FieldModel, embedder: EmbedderParams, path, meta: dict | None = None) -> None:
    """Write both parameter sets to an NMFW file plus a ``.json`` sidecar.

    Layout: magic | u16 version | u32 config length | config JSON |
    u32 tensor count | per tensor: u16 name length, name, u8 dtype code,
    u8 ndim, u32 dims..., little-endian payload.
    """
    if model.config.channels != embedder.config.channels:
        raise ShapeError("field and embedder disagree on the channel count")
    meta = meta if meta is not None else model.meta
    config = _config_block(model, embedder, meta)
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    tensors = list(embedder.state().items()) + list(model.state().items())
    parts = [WEIGHT_MAGIC, struct.pack("<HI", WEIGHT_VERSION, len(cfg_bytes)), cfg_bytes,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        code = _CODES[arr.dtype]
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))
    Path(str(path) + ".json").write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptFileError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_weights(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.take(4) != WEIGHT_MAGIC:
        raise FormatError(f"{path}: not an NMFW weight file")
    version, cfg_len = r.unpack("<HI")
    if version != WEIGHT_VERSION:
        raise VersionError(f"{path}: weight file version {version}, expected {WEIGHT_VERSION}")
    try:
        config = json.loads(r.take(cfg_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable config block") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode()
        except UnicodeDecodeError as exc:
            raise CorruptFileError(f"{path}: bad tensor name") from exc
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CorruptFileError(f"{path}: tensor {name} has unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(blob):
        raise CorruptFileError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return config, tensors


def load_model(path, overrides: dict | None = None) -> tuple[FieldModel, EmbedderParams]:
    """Rebuild both parameter sets from an NMFW file.

    ``overrides`` patches field or embedder config keys (e.g. ``{"octaves": 4}``)
    before the tensors are checked against the resulting shapes.
    """
    config, tensors = read_weights(path)
    fcfg = dict(config["field"])
    ecfg = dict(config["embed"])
    ecfg["grid"] = tuple(ecfg["grid"])
    for key, value in (overrides or {}).items():
        if key in fcfg:
            fcfg[key] = value
        elif key in ecfg:
            ecfg[key] = value
        else:
            raise KeyError(f"unknown config key {key!r}")
    model = FieldModel(FieldConfig(**fcfg))
    embedder = EmbedderParams(EmbedConfig(**ecfg))
    for pset in (embedder, model):
        for name, p in pset.named():
            key = pset.prefix + name
            if key not in tensors:
                raise ShapeError(f"{path}: missing tensor {key}")
            arr = tensors[key]
            if arr.shape != p.shape:
                raise ShapeError(f"{path}: tensor {key} has shape {arr.shape}, config implies {p.shape}")
            p.data = arr.copy()
    known = {pset.prefix + n for pset in (embedder, model) for n in pset.params}
    extra = sorted(set(tensors) - known)
    if extra:
        raise ShapeError(f"{path}: unexpected tensors {extra}")
    model.meta = config.get("meta", {})
    return model, embedder
