"""Sampling-based training of the field MLP and the cost embedder.

Each step draws, for every keypoint pair ``(x, x')`` of the selected image
pairs, one candidate set of ``S`` query points: the ground truth first,
then ``S - 1`` uniform negatives over the target plane.  With the
bidirectional flag a mirrored set is added, holding ``x'`` fixed and drawing
the negatives over the source plane.

The matching loss is a softmax cross-entropy over each candidate set with
logits ``logit(M) / tau``; ``loss_form="literal"`` switches to the plain
``-log M`` of the ground truth alone.  The flow loss is the end-point error
between the soft-argmax of the pooled volume and the annotated targets,
measured in target-grid cells at the annotated source cells only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .cost_embed import EmbedConfig, EmbedderParams, embed, grid_scale, pool
from .errors import NonFiniteLossError, ShapeError
from .field import FieldConfig, FieldModel, field_logits, save_model
from .tensor import Tensor


@dataclass
class TrainPair:
    """One image pair reduced to what training needs.

    ``keypoints`` is (n, 4) ``[x_row, x_col, y_row, y_col]`` in pixels.
    """

    cost: np.ndarray
    src_shape: tuple[int, int]
    tgt_shape: tuple[int, int]
    keypoints: np.ndarray
    name: str = ""


@dataclass(frozen=True)
class TrainConfig:
    lambda_f: float = 1.0
    lambda_c: float = 1.0
    tau: float = 0.07
    tau_sa: float = 0.02
    samples: int = 50
    lr: float = 3e-5
    weight_decay: float = 0.01
    steps: int = 500
    seed: int = 0
    bidirectional: bool = True
    loss_form: str = "softmax"
    pairs_per_step: int = 1
    hidden: int = 256
    octaves: int = 10
    channels: int = 16
    dtype: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.tau <= 0 or self.tau_sa <= 0:
            raise ValueError("temperatures must be positive")
        if self.samples < 2:
            raise ValueError(f"samples must be >= 2, got {self.samples}")
        if self.lambda_f < 0 or self.lambda_c < 0:
            raise ValueError("loss weights must be non-negative")
        if self.loss_form not in ("softmax", "literal"):
            raise ValueError(f"unknown loss_form {self.loss_form!r}")
        if self.steps < 0 or self.pairs_per_step < 1:
            raise ValueError("steps must be >= 0 and pairs_per_step >= 1")


def sample_batch(keypoints, src_shape, tgt_shape, samples: int, rng: np.random.Generator,
                 bidirectional: bool = True) -> np.ndarray:
    """Candidate sets (M, S, 4); the ground truth is always at index 0."""
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 4)
    if len(kps) == 0:
        raise ValueError("sample_batch: annotation has no keypoint pairs")
    n, neg = len(kps), samples - 1
    fwd = np.repeat(kps[:, None, :], samples, axis=1)
    fwd[:, 1:, 2] = rng.uniform(0, tgt_shape[0] - 1, size=(n, neg))
    fwd[:, 1:, 3] = rng.uniform(0, tgt_shape[1] - 1, size=(n, neg))
    if not bidirectional:
        return fwd
    bwd = np.repeat(kps[:, None, :], samples, axis=1)
    bwd[:, 1:, 0] = rng.uniform(0, src_shape[0] - 1, size=(n, neg))
    bwd[:, 1:, 1] = rng.uniform(0, src_shape[1] - 1, size=(n, neg))
    return np.concatenate([fwd, bwd])


def classification_loss(logits: Tensor, tau: float = 0.07, form: str = "softmax") -> Tensor:
    """Mean matching loss over candidate sets; ``logits`` is (M, S), truth in column 0."""
    if form == "literal":
        return T.mean(-T.log(T.sigmoid(logits[:, 0])))
    return T.mean(-T.log_softmax(logits * (1.0 / tau), axis=1)[:, 0])


def matching_loss(model: FieldModel, vol: Tensor, candidates: np.ndarray, src_shape, tgt_shape,
                  tau: float = 0.07, form: str = "softmax") -> Tensor:
    M, S, _ = candidates.shape
    z = field_logits(model, vol, candidates.reshape(M * S, 4), src_shape, tgt_shape)
    return classification_loss(z.reshape(M, S), tau, form)


def soft_argmax(slices, tau: float = 0.02) -> Tensor:
    """Expected (row, col) grid position under ``softmax(slice / tau)``; slices is (M, h, w)."""
    s = slices if isinstance(slices, Tensor) else Tensor(np.asarray(slices, dtype=np.float64))
    M, h, w = s.shape
    prob = T.softmax(s.reshape(M, h * w) * (1.0 / tau), axis=1)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(s.dtype)
    return prob @ Tensor(coords)


def _row_norm(d: Tensor) -> Tensor:
    """Euclidean norm per row, with a zero (sub)gradient at the origin."""
    n = np.sqrt((d.data ** 2).sum(axis=1))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        return (np.where(n > 0, g / safe, 0.0)[:, None] * d.data,)

    return T.make_op(n, (d,), bw, "row_norm")


def source_cells(keypoints, src_shape, tgt_shape, grid) -> np.ndarray:
    """Nearest source grid cell (row, col) of every keypoint."""
    scale = grid_scale(src_shape, tgt_shape, grid)
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 4)
    cells = np.rint(kps[:, :2] * scale[:2]).astype(np.int64)
    return np.clip(cells, 0, np.array(grid[:2]) - 1)


def epe_loss(vol, keypoints, src_shape, tgt_shape, tau_sa: float = 0.02) -> Tensor:
    """Mean end-point error (grid cells) of the soft-argmax flow at annotated cells."""
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 4)
    if len(kps) == 0:
        raise ValueError("epe_loss: annotation has no keypoint pairs")
    V = pool(vol) if vol.ndim == 5 else vol
    grid = V.shape
    cells = source_cells(kps, src_shape, tgt_shape, grid)
    flat = V.reshape(grid[0] * grid[1], grid[2], grid[3])
    slices = T.gather(flat, cells[:, 0] * grid[1] + cells[:, 1], axis=0)
    pred = soft_argmax(slices, tau_sa)
    gt = kps[:, 2:] * grid_scale(src_shape, tgt_shape, grid)[2:]
    return endpoint_error(pred, gt)


def endpoint_error(pred, gt) -> Tensor:
    """Mean Euclidean distance between matching rows of two (n, 2) flows."""
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    return T.mean(_row_norm(p - Tensor(np.asarray(gt, dtype=p.dtype))))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 3e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.lr == 0:
                continue
            p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainResult:
    model: FieldModel
    embedder: EmbedderParams
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)


def init_params(cfg: TrainConfig, grid) -> tuple[FieldModel, EmbedderParams]:
    seeds = np.random.SeedSequence(cfg.seed).generate_state(2)
    model = FieldModel(FieldConfig(octaves=cfg.octaves, hidden=cfg.hidden, channels=cfg.channels,
                                   dtype=cfg.dtype), seed=int(seeds[0]))
    embedder = EmbedderParams(EmbedConfig(grid=tuple(grid), channels=cfg.channels, dtype=cfg.dtype),
                              seed=int(seeds[1]))
    return model, embedder


def pair_losses(model, embedder, pair: TrainPair, cfg: TrainConfig, rng) -> tuple[Tensor | None, Tensor | None]:
    vol = embed(pair.cost, embedder)
    lf = lc = None
    if cfg.lambda_f > 0:
        cand = sample_batch(pair.keypoints, pair.src_shape, pair.tgt_shape, cfg.samples, rng, cfg.bidirectional)
        lf = matching_loss(model, vol, cand, pair.src_shape, pair.tgt_shape, cfg.tau, cfg.loss_form)
    if cfg.lambda_c > 0:
        lc = epe_loss(vol, pair.keypoints, pair.src_shape, pair.tgt_shape, cfg.tau_sa)
    return lf, lc


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L_f", "L_c", "L_total"])
        for step, lf, lc, tot in trace:
            w.writerow([step, repr(lf), repr(lc), repr(tot)])


def train(pairs: list[TrainPair], cfg: TrainConfig = TrainConfig(), out_dir=None,
          progress: Callable[[int, float], None] | None = None, meta: dict | None = None) -> TrainResult:
    """Run ``cfg.steps`` AdamW steps on ``lambda_f * L_f + lambda_c * L_c``.

    Step ``s`` uses pairs ``s * P, ..., s * P + P - 1`` (mod the pair count)
    and records the losses it computed before its update.  With ``out_dir``
    the trace goes to ``loss.csv`` and checkpoints to ``step_<n>.nmfw`` every
    ``checkpoint_every`` steps plus ``final.nmfw``; ``meta`` is stored in
    every checkpoint's config block.
    """
    if not pairs:
        raise ValueError("train: need at least one annotated pair")
    grid = pairs[0].cost.shape
    for p in pairs:
        if p.cost.shape != grid:
            raise ShapeError(f"train: pair {p.name!r} has cost grid {p.cost.shape}, expected {grid}")
    model, embedder = init_params(cfg, grid)
    params = embedder.parameters() + model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {}, seed=cfg.seed, steps=cfg.steps)
    result = TrainResult(model, embedder)

    for step in range(cfg.steps):
        lf_terms, lc_terms = [], []
        for i in range(cfg.pairs_per_step):
            lf, lc = pair_losses(model, embedder, pairs[(step * cfg.pairs_per_step + i) % len(pairs)], cfg, rng)
            lf_terms.append(lf)
            lc_terms.append(lc)
        scale = 1.0 / cfg.pairs_per_step
        total = None
        values = {}
        for name, terms, lam in (("L_f", lf_terms, cfg.lambda_f), ("L_c", lc_terms, cfg.lambda_c)):
            if terms[0] is None:
                values[name] = 0.0
                continue
            term = T.sum_(T.stack(terms)) * scale
            values[name] = float(term.data)
            if not np.isfinite(values[name]):
                raise NonFiniteLossError(name, step, values[name])
            total = term * lam if total is None else total + term * lam
        tot = values["L_f"] * cfg.lambda_f + values["L_c"] * cfg.lambda_c
        result.trace.append((step, values["L_f"], values["L_c"], tot))
        if progress is not None:
            progress(step, tot)
        if total is not None:
            for p in params:
                p.grad = None
            T.backward(total)
            opt.step()
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_model(model, embedder, out / f"step_{step + 1}.nmfw", meta=dict(meta, step=step + 1))

    if out is not None:
        write_trace(result.trace, out / "loss.csv")
        save_model(model, embedder, out / "final.nmfw", meta=meta)
    model.meta = meta
    return result
