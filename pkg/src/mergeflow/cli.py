"""Command-line front end.

Exit codes: 0 success, 2 usage/validation, 3 I/O or file format, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .config import build_config
from .errors import DegenerateEmbedding, FormatError, InvalidArgument, InvalidState, NumericError
from .flowcore import LossCurve, SolverConfig, disentangle_reverse, merge_forward, train
from .flownet import init_velocity_net, read_checkpoint
from .metrics import (EvalReport, class_means, evaluate_model, interp_probe, roundtrip_cosines,
                      scatter_rows, _test_cells)
from .synthgen import EmbeddingGrid, default_grid, read_grid, split_grid, write_grid

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

GRID_FILE = "grid.scf"
MODEL_FILE = "model.sck"


class IOFailure(Exception):
    pass


def fmt(x):
    return format(float(x), ".9g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if header:
            w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_vectors(path):
    """Vectors from a CSV (one per line) or an SCF1 grid (all cells, row-major)."""
    path = Path(path)
    if path.suffix == ".scf":
        g = read_grid(path)
        return g.z.reshape(-1, g.embed_dim).astype(np.float64)
    rows = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if row:
                try:
                    rows.append([float(v) for v in row])
                except ValueError:
                    raise InvalidArgument(f"{path}: non-numeric entry in vector file") from None
    if len({len(r) for r in rows}) > 1:
        raise InvalidArgument(f"{path}: vectors have differing lengths")
    return np.array(rows, dtype=np.float64)


def write_vectors(path, vectors):
    vectors = np.atleast_2d(vectors)
    if path is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        for v in vectors:
            w.writerow([fmt(x) for x in v])
        return
    if Path(path).suffix == ".scf":
        unit = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        write_grid(EmbeddingGrid(unit.reshape(len(unit), 1, 1, -1).astype(np.float32),
                                 provenance="imported"), path)
    else:
        write_csv(path, None, [[float(x) for x in v] for v in vectors])


@contextlib.contextmanager
def locked_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create output directory {path}: {exc}") from None
    lock = FileLock(str(path / ".mergeflow.lock"), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        raise IOFailure(f"output directory {path} is locked by another command") from None
    try:
        yield path
    finally:
        lock.release()


def _thread_limits():
    n = os.environ.get("SCFLOW_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    try:
        return threadpool_limits(max(1, int(n)))
    except ValueError:
        raise InvalidArgument(f"SCFLOW_THREADS must be an integer, got {n!r}") from None


def _config(args, keys):
    return build_config(args.config, {k: getattr(args, k, None) for k in keys})


def _load_grid(path):
    try:
        return read_grid(path)
    except FileNotFoundError:
        raise IOFailure(f"grid file not found: {path}") from None


def _load_checkpoint(path):
    try:
        return read_checkpoint(path)
    except FileNotFoundError:
        raise IOFailure(f"checkpoint not found: {path}") from None


def _split_from_checkpoint(ckpt, grid):
    tc = ckpt.train_config
    return split_grid(grid, tc.get("train_fraction", 0.7), tc.get("split_seed", tc.get("seed", 1)))


# ---------------------------------------------------------------- commands

DATA_KEYS = ["contents", "styles", "views", "dim", "factor_dim", "hidden_dim", "noise", "seed"]
TRAIN_KEYS = ["seed", "train_fraction", "widths", "time_freqs", "epochs", "batches",
              "batch_size", "lr", "nfe"]
EVAL_KEYS = ["nfe", "method", "roundtrip_nfe", "knn_ks", "recall_ks", "restarts",
             "merge_triplets", "seed"]


def cmd_gen_data(args):
    cfg = _config(args, DATA_KEYS)
    with locked_dir(args.out) as out:
        grid = default_grid(cfg.contents, cfg.styles, cfg.views, cfg.factor_dim,
                            cfg.hidden_dim, cfg.dim, cfg.noise, cfg.seed)
        write_grid(grid, out / GRID_FILE)
        sidecar = {k: getattr(cfg, k) for k in DATA_KEYS}
        (out / "grid.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / GRID_FILE}: {grid.n_contents * grid.n_styles} cells "
          f"({grid.n_contents} contents x {grid.n_styles} styles), {grid.n_views} views, "
          f"embed_dim {grid.embed_dim}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args, TRAIN_KEYS)
    grid = _load_grid(args.grid)
    cfg.dim = grid.embed_dim
    split = split_grid(grid, cfg.train_fraction, cfg.seed)
    tcfg = cfg.train_config()
    extra = {"train_fraction": cfg.train_fraction, "split_seed": cfg.seed}
    with locked_dir(args.out) as out:
        ckpt_path = out / MODEL_FILE
        if args.resume:
            if Path(args.resume).resolve() == ckpt_path.resolve():
                raise InvalidArgument("--resume must not point at the checkpoint being written")
            ckpt = _load_checkpoint(args.resume)
            prev = {k: ckpt.train_config.get(k) for k in tcfg.to_dict() if k != "epochs"}
            now = {k: v for k, v in tcfg.to_dict().items() if k != "epochs"}
            if prev != now or ckpt.arch != cfg.arch():
                raise InvalidArgument("resume checkpoint was trained with a different configuration")
            params, adam, rng_state = ckpt.params, ckpt.adam, ckpt.rng_state
            curve = LossCurve(list(ckpt.history.get("train_loss", [])),
                              list(ckpt.history.get("heldout_loss", [])))
        else:
            params, adam, rng_state, curve = init_velocity_net(cfg.arch(), cfg.seed), None, None, None

        def progress(epoch, tr, ho):
            print(f"epoch {epoch}/{tcfg.epochs} train_loss={fmt(tr)} heldout_loss={fmt(ho)}",
                  flush=True)

        result = train(params, split, tcfg, adam=adam, rng_state=rng_state, curve=curve,
                       checkpoint_path=ckpt_path, progress=progress, checkpoint_meta=extra)
        write_csv(out / "loss.csv", ["epoch", "train_loss", "heldout_loss"], result.curve.rows())
    print(f"wrote {ckpt_path} and {out / 'loss.csv'}")
    return EXIT_OK


def cmd_infer(args):
    if args.nfe is not None and args.nfe < 1:
        raise InvalidArgument(f"--nfe must be >= 1, got {args.nfe}")
    ckpt = _load_checkpoint(args.checkpoint)
    dim = ckpt.arch.embed_dim
    if args.input:
        try:
            vectors = read_vectors(args.input)
        except FileNotFoundError:
            raise IOFailure(f"input not found: {args.input}") from None
    elif args.grid and args.cell:
        g = _load_grid(args.grid)
        try:
            vectors = np.array([g.z[i, j, v] for i, j, v in args.cell], dtype=np.float64)
        except IndexError:
            raise InvalidArgument("--cell index outside the grid") from None
    else:
        raise InvalidArgument("give --input, or --grid with --cell")
    if vectors.ndim != 2 or vectors.shape[1] != dim:
        got = vectors.shape[1] if vectors.ndim == 2 else 0
        raise InvalidArgument(f"vector length mismatch: expected {dim}, got {got}")
    nfe = args.nfe or 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if args.direction == "forward":
            if len(vectors) != 2:
                raise InvalidArgument(f"forward needs 2 vectors (content, style), got {len(vectors)}")
            out = merge_forward(ckpt.params, vectors[0], vectors[1],
                                SolverConfig("forward_01", nfe, args.method))
            write_vectors(args.output, out)
        else:
            if len(vectors) != 1:
                raise InvalidArgument(f"reverse needs 1 vector, got {len(vectors)}")
            zc, zs = disentangle_reverse(ckpt.params, vectors[0],
                                         SolverConfig("reverse_10", nfe, args.method))
            write_vectors(args.output, np.stack([zc, zs]))
            if args.roundtrip:
                cos = roundtrip_cosines(ckpt.params, vectors, nfe, args.method)[0]
                print(f"roundtrip_cosine={fmt(cos)}", file=sys.stderr if args.output is None else sys.stdout)
    return EXIT_OK


def cmd_eval(args):
    from . import plots

    cfg = _config(args, EVAL_KEYS)
    ckpt = _load_checkpoint(args.checkpoint)
    grid = _load_grid(args.grid)
    split = _split_from_checkpoint(ckpt, grid)
    with locked_dir(args.out) as out:
        report = evaluate_model(ckpt.params, split, cfg.eval_config(),
                                extra_hash={"train": ckpt.train_config, "step": ckpt.adam.step})
        (out / "report.json").write_text(report.to_json() + "\n")
        rows = scatter_rows(ckpt.params, split, cfg.nfe, cfg.method)
        write_csv(out / "pca.csv", ["x", "y", "content_id", "style_id", "space"], rows)
        plots.pca_scatter(rows, out / "pca.svg")
    for k in sorted(report.metrics):
        print(f"{k} = {fmt(report.metrics[k])}")
    for k in sorted(report.diagnostics):
        print(f"[baseline] {k} = {fmt(report.diagnostics[k])}")
    return EXIT_OK


INTERP_SPACES = ("content", "style", "raw_content", "raw_style")


def _parse_pairs(text):
    pairs = []
    for chunk in text.split(";"):
        if chunk.strip():
            a, b = (int(x) for x in chunk.split(","))
            pairs.append((a, b))
    return pairs


def cmd_interp(args):
    from . import plots

    ckpt = _load_checkpoint(args.checkpoint)
    grid = _load_grid(args.grid)
    split = _split_from_checkpoint(ckpt, grid)
    _, raw, content, style = _test_cells(split)
    nfe = args.nfe or 1
    zc, zs = disentangle_reverse(ckpt.params, raw, SolverConfig("reverse_10", nfe, args.method))
    points, labels = {"content": (zc, content), "style": (zs, style),
                      "raw_content": (raw, content), "raw_style": (raw, style)}[args.space]
    classes, means = class_means(points, labels)
    lookup = {int(c): m for c, m in zip(classes, means)}
    try:
        pairs = _parse_pairs(args.pairs) if args.pairs else [(int(classes[0]), int(classes[1]))]
    except ValueError:
        raise InvalidArgument(f"--pairs must look like '0,1;2,3', got {args.pairs!r}") from None
    rows, curves = [], {}
    with locked_dir(args.out) as out:
        for a, b in pairs:
            if a not in lookup or b not in lookup:
                raise InvalidArgument(f"class pair ({a}, {b}) not among test classes {sorted(lookup)}")
            probe = interp_probe(lookup[a], lookup[b], args.steps)
            lam = np.linspace(0.0, 1.0, args.steps)
            label = f"{a}-{b}"
            curves[label] = (lam, probe.sim_a, probe.sim_b)
            rows.extend((label, args.space, float(l), float(sa), float(sb))
                        for l, sa, sb in zip(lam, probe.sim_a, probe.sim_b))
            print(f"pair {label} ({args.space}): violations={probe.monotonicity_violations} "
                  f"max_second_diff={fmt(probe.max_second_diff)}")
        write_csv(out / "interp.csv", ["pair", "space", "lambda", "sim_a", "sim_b"], rows)
        plots.interp_curves(curves, out / "interp.svg")
    return EXIT_OK


def cmd_report(args):
    from . import plots

    run = Path(args.dir)
    report_path = run / "report.json"
    if not report_path.exists():
        raise IOFailure(f"missing {report_path}; run 'eval' first")
    report = EvalReport.from_json(report_path.read_text())
    with locked_dir(args.out or run) as out:
        write_csv(out / "metrics.csv", ["metric", "value"],
                  [(k, float(report.metrics[k])) for k in sorted(report.metrics)])
        made = ["metrics.csv"]
        if (run / "loss.csv").exists():
            with open(run / "loss.csv", newline="") as f:
                rows = [tuple(float(v) for v in r) for r in list(csv.reader(f))[1:]]
            plots.loss_curve(rows, out / "loss.svg")
            made.append("loss.svg")
        if (run / "pca.csv").exists():
            with open(run / "pca.csv", newline="") as f:
                rows = [(float(r[0]), float(r[1]), int(r[2]), int(r[3]), r[4])
                        for r in list(csv.reader(f))[1:]]
            plots.pca_scatter(rows, out / "pca.svg")
            made.append("pca.svg")
        if (run / "interp.csv").exists():
            curves = {}
            with open(run / "interp.csv", newline="") as f:
                for r in list(csv.reader(f))[1:]:
                    lam, sa, sb = curves.setdefault(r[0], ([], [], []))
                    lam.append(float(r[2]))
                    sa.append(float(r[3]))
                    sb.append(float(r[4]))
            plots.interp_curves(curves, out / "interp.svg")
            made.append("interp.svg")
    width = max(len(k) for k in report.metrics)
    for k in sorted(report.metrics):
        print(f"{k:<{width}}  {fmt(report.metrics[k])}")
    print("wrote " + ", ".join(str(out / m) for m in made))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_common(p):
    p.add_argument("--config", help="flat 'key = value' config file")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mergeflow",
        description="Flow-matching merge/disentangle laboratory on synthetic embedding grids.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic content x style grid")
    _add_common(p)
    p.add_argument("--styles", type=int)
    p.add_argument("--contents", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--dim", type=int, help="embedding dimension")
    p.add_argument("--factor-dim", dest="factor_dim", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--noise", type=float, help="per-view noise sigma")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", default="data", help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the velocity field on a grid")
    _add_common(p)
    p.add_argument("--grid", default=os.path.join("data", GRID_FILE))
    p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--widths", help="hidden widths, comma separated")
    p.add_argument("--time-freqs", dest="time_freqs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batches", type=int, help="batches per epoch")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("-o", "--out", default="run", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="merge (forward) or disentangle (reverse) vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", choices=("forward", "reverse"), required=True)
    p.add_argument("--nfe", type=int)
    p.add_argument("--method", choices=("euler", "midpoint"), default="euler")
    p.add_argument("--input", help="CSV (one vector per line) or .scf grid")
    p.add_argument("--grid", help="take vectors from this grid via --cell")
    p.add_argument("--cell", nargs=3, type=int, action="append", metavar=("I", "J", "V"))
    p.add_argument("--roundtrip", action="store_true",
                   help="after reverse, merge back and print the cosine to the input")
    p.add_argument("-o", "--output", help="CSV or .scf output (default: stdout)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metric battery, PCA scatter and report JSON")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", default=os.path.join("data", GRID_FILE))
    p.add_argument("--nfe", type=int)
    p.add_argument("--method", choices=("euler", "midpoint"))
    p.add_argument("--roundtrip-nfe", dest="roundtrip_nfe", type=int)
    p.add_argument("--knn-ks", dest="knn_ks")
    p.add_argument("--recall-ks", dest="recall_ks")
    p.add_argument("--restarts", type=int)
    p.add_argument("--merge-triplets", dest="merge_triplets", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", default="run")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interp", help="linear interpolation probe between class means")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", default=os.path.join("data", GRID_FILE))
    p.add_argument("--space", choices=INTERP_SPACES, default="content")
    p.add_argument("--pairs", help="class id pairs, e.g. '3,7;5,9'")
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--nfe", type=int)
    p.add_argument("--method", choices=("euler", "midpoint"), default="euler")
    p.add_argument("-o", "--out", default="run")
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("report", help="render figures and a metrics table from a run directory")
    p.add_argument("--dir", default="run")
    p.add_argument("-o", "--out", help="figure directory (default: --dir)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limits():
            return args.func(args)
    except (InvalidArgument, InvalidState, DegenerateEmbedding) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (IOFailure, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
