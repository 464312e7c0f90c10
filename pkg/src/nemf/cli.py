"""Command-line entry point: ``nemf train | infer | eval | export-field | gen-synthetic``.

Every option can also come from a flat ``key=value`` config file
(``--config``) or from ``--set key=value``.  Precedence, lowest first:
built-in defaults, config file, ``--set``, explicit flags.  Each run writes
``effective_config.txt`` to its output directory; passing that file back via
``--config`` repeats the run.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from .cost_embed import embed, pool
from .errors import NemfError, NonFiniteError
from .features import ExtractorConfig, write_image
from .field import MatchingField, load_model
from .inference import EXHAUSTIVE_GUARD, InferenceConfig, infer_dense, infer_exhaustive, match_exhaustive
from .training import TrainConfig, train

log = logging.getLogger("nemf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "NEMF_SEED"


class UsageError(NemfError):
    """Bad arguments, config keys or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# option values
# ---------------------------------------------------------------------------

def shape_arg(text: str) -> tuple[int, int]:
    """``"16x12"`` -> (16, 12); a single number means a square."""
    try:
        parts = [int(v) for v in str(text).lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected HxW with positive sizes, got {text!r}")
    return parts[0], parts[1]


def floats_arg(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple) and len(value) == 2 and all(isinstance(v, int) for v in value):
        return f"{value[0]}x{value[1]}"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class Options:
    """The config-addressable options of one subcommand."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.flags: dict[str, tuple[str, bool]] = {}  # key -> (flag, is_bool)

    def add(self, key: str, *, type=str, **kw):
        flag = "--" + key.replace("_", "-")
        if type is bool:
            self.parser.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, **kw)
        else:
            self.parser.add_argument(flag, dest=key, type=type, **kw)
        self.flags[key] = (flag, type is bool)

    def tokens(self, key: str, value: str, origin: str) -> list[str]:
        key = key.strip().replace("-", "_")
        if key not in self.flags:
            raise UsageError(f"{origin}: unknown config key {key!r} for '{self.parser.prog}'")
        flag, is_bool = self.flags[key]
        if not is_bool:
            return [f"{flag}={value}"]
        v = value.strip().lower()
        if v in _TRUE:
            return [flag]
        if v in _FALSE:
            return ["--no-" + flag[2:]]
        raise UsageError(f"{origin}: {key} expects true or false, got {value!r}")

    def effective(self, args: argparse.Namespace) -> dict[str, str]:
        return {k: format_value(getattr(args, k)) for k in sorted(self.flags) if getattr(args, k) is not None}


def read_config(path) -> list[tuple[str, str, str]]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip(), f"{path}:{lineno}"))
    return out


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(opts: Options, out_default: str):
    p = opts.parser
    p.add_argument("--config", help="flat key=value file of option defaults")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one option")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    opts.add("out", default=out_default, help="output directory")
    opts.add("seed", type=int, default=None, help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    opts.add("threads", type=int, default=None, help="bound BLAS/OpenMP threads")


def _inputs(opts: Options):
    opts.add("data", default=None, help="annotation file (JSON lines)")
    opts.add("synthetic", type=int, default=None, help="use N generated pairs instead of --data")
    opts.add("family", default="rigid", choices=D.WARP_FAMILIES, help="warp family for synthetic pairs")
    opts.add("data_seed", type=int, default=0, help="seed of the synthetic pair generator")
    opts.add("image_size", type=shape_arg, default=(31, 31), help="synthetic image size HxW")
    opts.add("keypoints", type=int, default=20, help="keypoints per synthetic pair")


def _checkpoint(opts: Options):
    opts.add("checkpoint", default=None, help="NMFW weight file from 'nemf train'")
    opts.add("batch_size", type=int, default=4096, help="field queries per batch; never changes results")
    opts.add("guard", type=int, default=EXHAUSTIVE_GUARD, help="max field evaluations for exhaustive passes")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, Options]]:
    parser = argparse.ArgumentParser(prog="nemf", description="Neural matching fields for dense correspondence.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    options = {}

    def command(name, help_):
        opts = Options(sub.add_parser(name, help=help_, description=help_))
        options[name] = opts
        return opts

    o = command("train", "Train a matching field from keypoint-annotated pairs.")
    _common(o, "nemf-train")
    _inputs(o)
    o.add("grid", type=shape_arg, default=(16, 16), help="coarse cost-volume resolution per image")
    o.add("patch", type=int, default=8, help="descriptor patch size in pixels")
    o.add("proj_dim", type=int, default=16, help="random-projection descriptor channels")
    o.add("extractor_seed", type=int, default=0, help="seed of the descriptor projection")
    o.add("log_every", type=int, default=25, help="progress line every N steps")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        kw = {"choices": ("softmax", "literal")} if f.name == "loss_form" else {}
        if f.name == "dtype":
            kw = {"choices": ("float32", "float64")}
        o.add(f.name, type=type(f.default), default=f.default, **kw)

    o = command("infer", "Dense flow between image pairs from a trained field.")
    _common(o, "nemf-infer")
    _inputs(o)
    _checkpoint(o)
    o.add("strategy", default="patchmatch", choices=("patchmatch", "exhaustive"), help="search strategy")
    o.add("src_lattice", type=shape_arg, default=None, help="source lattice HxW (default: every pixel)")
    o.add("tgt_lattice", type=shape_arg, default=None, help="target lattice HxW (default: every pixel)")
    o.add("png", type=bool, default=False, help="also write colour-coded flow images")
    for f in dataclasses.fields(InferenceConfig):
        if f.name in ("seed", "batch_size"):
            continue
        kw = {"choices": (4, 8)} if f.name == "neighborhood" else {}
        o.add(f.name, type=type(f.default), default=f.default, **kw)

    o = command("eval", "PCK of predicted keypoints against annotations.")
    _common(o, "nemf-eval")
    _inputs(o)
    o.add("predictions", default=None, help="keypoints.json written by 'nemf infer'")
    o.add("thresholds", type=floats_arg, default=D.PCK_THRESHOLDS, help="comma-separated alpha_pck values")
    o.add("norm", default="bbox", choices=("bbox", "img"), help="PCK reference size")

    o = command("export-field", "Field scores over the target image for one source point.")
    _common(o, "nemf-export")
    _inputs(o)
    _checkpoint(o)
    o.add("index", type=int, default=0, help="which pair of the input set")
    o.add("source_row", type=float, default=None, help="source point row (default: image centre)")
    o.add("source_col", type=float, default=None, help="source point column (default: image centre)")
    o.add("resolution", type=shape_arg, default=None, help="target lattice HxW (default: every pixel)")
    o.add("sigma", type=float, default=0.0, help="Gaussian smoothing in lattice cells; 0 = raw")

    o = command("gen-synthetic", "Write a synthetic annotated benchmark.")
    _common(o, "nemf-synthetic")
    o.add("count", type=int, default=20, help="number of pairs")
    o.add("family", default="rigid", choices=D.WARP_FAMILIES, help="warp family")
    o.add("data_seed", type=int, default=0, help="seed of the generator")
    o.add("image_size", type=shape_arg, default=(31, 31), help="image size HxW")
    o.add("keypoints", type=int, default=20, help="keypoints per pair")
    return parser, options


def parse(argv: list[str]) -> tuple[argparse.Namespace, Options]:
    """Parse once to find the command and config sources, then again with them applied."""
    parser, options = build_parser()
    args = parser.parse_args(argv)
    opts = options[args.command]
    if args.config or args.set:
        tokens = []
        if args.config:
            for key, value, origin in read_config(args.config):
                tokens += opts.tokens(key, value, origin)
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            tokens += opts.tokens(key, value, "--set")
        i = argv.index(args.command)
        args = parser.parse_args(argv[:i + 1] + tokens + argv[i + 1:])
    if args.seed is None:
        env = os.environ.get(SEED_ENV)
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return args, opts


def write_effective_config(path: Path, args: argparse.Namespace, opts: Options) -> None:
    lines = [f"# nemf {args.command}", f"# repeat with: nemf {args.command} --config {path.name}"]
    lines += [f"{k}={v}" for k, v in opts.effective(args).items()]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# shared steps
# ---------------------------------------------------------------------------

def load_annotated(args, images: bool = True) -> list[tuple[object, D.PairAnnotation]]:
    """(images, annotation) pairs from ``--data`` or ``--synthetic``; images are None unless asked for."""
    if args.data and args.synthetic:
        raise UsageError("give either --data or --synthetic, not both")
    if args.data:
        path = Path(args.data)
        if not path.exists():
            raise UsageError(f"annotation file {path} not found")
        report = D.load_dataset(path)
        for line, msg in report.errors:
            log.warning("%s:%d: %s", path, line, msg)
        log.info("%s: %s", path, report.summary())
        if not report.records:
            raise UsageError(f"{path}: no usable records")
        return [(D.resolve_images(a, path.parent) if images else None, a) for a in report.records]
    if args.synthetic:
        if args.synthetic < 1:
            raise UsageError("--synthetic needs a positive count")
        pairs = D.generate_synthetic(args.synthetic, args.family, args.data_seed, args.image_size, args.keypoints)
        return [(s.images, s.annotation) for s in pairs]
    raise UsageError("no input pairs: give --data FILE or --synthetic N")


def load_checkpoint(path):
    if not path:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    model, embedder = load_model(path)
    ext = dict(model.meta.get("extractor", {}))
    if "grid" in ext:
        ext["grid"] = tuple(ext["grid"])
    return model, embedder, ExtractorConfig(**ext)


def bind_field(model, embedder, extractor, images, annotation):
    pair = D.prepare_pair(images, annotation, extractor)
    vol = embed(pair.cost, embedder)
    return MatchingField(model, vol, pair.src_shape, pair.tgt_shape), pool(vol).data


def _xy(points) -> list[list[float]]:
    """(n, 2) row/col -> [[x, y], ...] as stored in annotation files."""
    return [[float(c), float(r)] for r, c in np.asarray(points, dtype=np.float64).reshape(-1, 2)]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    inputs = load_annotated(args)
    cfg = TrainConfig(seed=args.seed, **{f.name: getattr(args, f.name)
                                         for f in dataclasses.fields(TrainConfig) if f.name != "seed"})
    ext = ExtractorConfig(grid=args.grid, patch=args.patch, proj_dim=args.proj_dim, seed=args.extractor_seed)
    pairs = [D.prepare_pair(img, ann, ext) for img, ann in inputs]
    log.info("training on %d pairs, cost grid %s, %d steps", len(pairs), pairs[0].cost.shape, cfg.steps)

    def progress(step, total):
        if step % max(args.log_every, 1) == 0 or step == cfg.steps - 1:
            log.info("step %5d  L_total %.6g", step, total)

    t = time.perf_counter()
    result = train(pairs, cfg, out_dir=args.out, progress=progress,
                   meta={"extractor": dataclasses.asdict(ext)})
    if result.trace:
        log.info("loss %.6g -> %.6g in %.1f s", result.trace[0][3], result.trace[-1][3], time.perf_counter() - t)
    log.info("wrote %s", Path(args.out) / "final.nmfw")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, embedder, ext = load_checkpoint(args.checkpoint)
    inputs = load_annotated(args)
    out = Path(args.out)
    (out / "flows").mkdir(exist_ok=True)
    icfg = None
    if args.strategy == "patchmatch":
        icfg = InferenceConfig(rounds=args.rounds, step=args.step, inner_steps=args.inner_steps,
                               random=args.random, neighborhood=args.neighborhood, batch_size=args.batch_size,
                               keypoints_only=args.keypoints_only, coord_opt=args.coord_opt, seed=args.seed)
    elif args.batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    predictions, report = [], []
    tracemalloc.start()
    try:
        for i, (images, ann) in enumerate(inputs):
            tracemalloc.reset_peak()
            t = time.perf_counter()
            field, V = bind_field(model, embedder, ext, images, ann)
            src_lat = args.src_lattice or field.src_shape
            tgt_lat = args.tgt_lattice or field.tgt_shape
            kps = ann.keypoints[:, :2]
            if icfg is None:
                flow, _ = infer_exhaustive(field, src_lat, tgt_lat, args.guard, args.batch_size)
                pred = match_exhaustive(field, kps, tgt_lat, args.guard, args.batch_size)[0] if len(kps) else kps
                seconds = {}
            else:
                res = infer_dense(field, V, icfg, src_lat, tgt_lat, keypoints=kps)
                flow, seconds = res.flow, dict(res.seconds)
                pred = flow.transfer(kps)
            seconds["total"] = time.perf_counter() - t
            flow.save(out / "flows" / f"{i:04d}.nmff")
            if args.png:
                flow.save_png(out / "flows" / f"{i:04d}.png")
            predictions.append({"src": ann.src, "tgt": ann.tgt, "kps": _xy(pred)})
            peak = tracemalloc.get_traced_memory()[1]
            report.append({"pair": i, "src": ann.src, "seconds": seconds, "evaluations": field.evaluations,
                           "peak_bytes": peak})
            log.info("pair %d: %.2f s, %d field evaluations, peak %.1f MiB",
                     i, seconds["total"], field.evaluations, peak / 2 ** 20)
    finally:
        tracemalloc.stop()
    (out / "keypoints.json").write_text(json.dumps({"pairs": predictions}, indent=1) + "\n")
    summary = {"strategy": args.strategy, "batch_size": args.batch_size, "pairs": report,
               "mean_seconds": float(np.mean([r["seconds"]["total"] for r in report])),
               "max_peak_bytes": max(r["peak_bytes"] for r in report)}
    (out / "report.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"{args.strategy}: {len(report)} pairs, {summary['mean_seconds']:.3f} s/pair, "
          f"peak memory {summary['max_peak_bytes'] / 2 ** 20:.1f} MiB")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.predictions:
        raise UsageError("--predictions is required")
    path = Path(args.predictions)
    if not path.exists():
        raise UsageError(f"predictions file {path} not found")
    try:
        records = json.loads(path.read_text())["pairs"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"{path}: not a keypoints.json file ({exc})") from None
    anns = [a for _, a in load_annotated(args, images=False)]
    if len(records) != len(anns):
        raise UsageError(f"alignment mismatch: {len(records)} predicted pairs, {len(anns)} annotated")
    preds = []
    for i, (rec, ann) in enumerate(zip(records, anns)):
        if (rec.get("src"), rec.get("tgt")) != (ann.src, ann.tgt):
            raise UsageError(f"alignment mismatch at pair {i}: prediction for {rec.get('src')!r}, "
                             f"annotation for {ann.src!r}")
        p = np.asarray(rec.get("kps", []), dtype=np.float64).reshape(-1, 2)[:, ::-1]
        if len(p) != len(ann.keypoints):
            raise UsageError(f"alignment mismatch at pair {i}: {len(p)} predicted keypoints, "
                             f"{len(ann.keypoints)} annotated")
        preds.append(p)
    table = D.pck_table(preds, anns, args.thresholds, args.norm)
    n = sum(len(a.keypoints) for a in anns)
    header = ["norm", "keypoints"] + [format_value(a) for a in table]
    row = [args.norm, str(n)] + [format_value(float(v)) for v in table.values()]
    (Path(args.out) / "pck.csv").write_text(",".join(header) + "\n" + ",".join(row) + "\n")
    print("alpha_pck " + " ".join(f"{a:>7g}" for a in table))
    print("PCK       " + " ".join(f"{v:7.4f}" for v in table.values()))
    return EXIT_OK


def cmd_export_field(args) -> int:
    model, embedder, ext = load_checkpoint(args.checkpoint)
    inputs = load_annotated(args)
    if not 0 <= args.index < len(inputs):
        raise UsageError(f"--index {args.index} out of range for {len(inputs)} pairs")
    images, ann = inputs[args.index]
    field, _ = bind_field(model, embedder, ext, images, ann)
    h, w = field.src_shape
    x = (args.source_row if args.source_row is not None else (h - 1) / 2,
         args.source_col if args.source_col is not None else (w - 1) / 2)
    if not (0 <= x[0] <= h - 1 and 0 <= x[1] <= w - 1):
        raise UsageError(f"source point {x} outside the {h}x{w} source image")
    path = Path(args.out) / "field_slice.csv"
    grid = D.export_field_slice(field, x, args.resolution or field.tgt_shape, path, args.sigma,
                                args.guard, args.batch_size)
    r, c = np.unravel_index(np.argmax(grid), grid.shape)
    log.info("wrote %s (%dx%d), peak score %.4f at lattice (%d, %d)", path, *grid.shape, grid.max(), r, c)
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    out = Path(args.out)
    if args.count < 1:
        raise UsageError("--count must be positive")
    pairs = D.generate_synthetic(args.count, args.family, args.data_seed, args.image_size, args.keypoints)
    (out / "images").mkdir(exist_ok=True)
    (out / "flows").mkdir(exist_ok=True)
    for i, s in enumerate(pairs):
        write_image(out / "images" / f"{i:04d}_src.png", s.images.source)
        write_image(out / "images" / f"{i:04d}_tgt.png", s.images.target)
        s.flow.save(out / "flows" / f"{i:04d}.nmff")
    D.write_dataset([s.annotation for s in pairs], out / "annotations.jsonl")
    log.info("wrote %d %s pairs to %s", len(pairs), args.family, out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "export-field": cmd_export_field, "gen-synthetic": cmd_gen_synthetic}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, opts = parse(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"nemf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(message)s", force=True)
    limits = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_effective_config(out / "effective_config.txt", args, opts)
        with limits:
            return COMMANDS[args.command](args)
    except NonFiniteError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (NemfError, ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
