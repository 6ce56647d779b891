"""Command-line front end: ``train``, ``plan``, ``gen-synth`` and ``eval``.

Values come from built-in defaults, then the ``--config`` file (flat
``key = value`` lines), then command-line flags; later sources win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import dataio
from .errors import AlsError, CapacityError, ConfigError, InputError
from .parallel import (
    ONE_PHASE,
    SCHEMES,
    ScaleUpUpdater,
    Topology,
    parse_groups,
    plan_partition,
    smallest_feasible_q,
)
from .solver import SolverConfig, als_train, rmse
from .sparse import csr_to_csc

_logger = logging.getLogger("alsgrid")

EXIT_CODES = {"input": 2, "capacity": 3, "numerical": 4, "io": 5}
METRICS_HEADER = ["iteration", "wall_seconds", "train_J", "test_RMSE", "baseline_RMSE"]


@dataclass
class RunConfig:
    dataset: str = ""
    format: str = "triplet_text"
    holdout: float = 0.1
    f: int = 10
    lam: float = 0.05
    iterations: int = 10
    bin: int = 16
    batch_rows: int = 8192
    seed: int = 0
    accumulate_double: bool = True
    workers: int = 1
    groups: str = ""
    capacity: float = math.inf
    headroom: float = 0.0
    reduce: str = ONE_PHASE
    threads: int = 0
    checkpoint_dir: str = ""
    metrics: str = "metrics.csv"
    resume: bool = False

    # keys that change the numbers a run produces
    DIGEST_KEYS = ("dataset", "format", "holdout", "f", "lambda", "seed", "accumulate_double")

    def validate(self):
        if self.f < 1:
            raise InputError(f"f must be >= 1, got {self.f}")
        if self.iterations < 0:
            raise InputError(f"iterations must be >= 0, got {self.iterations}")
        if not 0 < self.holdout < 1:
            raise InputError(f"holdout must lie in (0, 1), got {self.holdout}")
        if self.workers < 1:
            raise InputError(f"workers must be >= 1, got {self.workers}")
        if self.reduce not in SCHEMES:
            raise InputError(f"reduce must be one of {SCHEMES}, got {self.reduce!r}")
        if self.format not in dataio.FORMATS:
            raise InputError(f"format must be one of {dataio.FORMATS}")
        SolverConfig(self.lam, self.bin, self.batch_rows, self.accumulate_double)
        self.topology()
        return self

    def solver_config(self):
        return SolverConfig(self.lam, self.bin, self.batch_rows, self.accumulate_double,
                            threads=self.threads or self.workers)

    def topology(self):
        groups = parse_groups(self.groups) if self.groups else None
        return Topology(self.workers, groups, self.capacity)

    def items(self):
        for fl in fields(self):
            key = "lambda" if fl.name == "lam" else fl.name
            yield key, getattr(self, fl.name)

    def to_text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.items())

    def digest(self):
        values = dict(self.items())
        return dataio.config_digest("".join(f"{k}={_fmt(values[k])}\n" for k in self.DIGEST_KEYS))

    @classmethod
    def from_text(cls, text, base=None):
        cfg = base or cls()
        types = {("lambda" if fl.name == "lam" else fl.name): fl.type for fl in fields(cls)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            cfg.set(key, value)
        return cfg

    def set(self, key, value):
        name = "lam" if key == "lambda" else key
        current = getattr(self, name)
        try:
            if isinstance(current, bool):
                parsed = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                parsed = int(value)
            elif isinstance(current, float):
                parsed = float(value)
            else:
                parsed = str(value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r} for {key}") from exc
        setattr(self, name, parsed)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- dataset resolution --------------------------------------------------------


def _parse_planted(spec):
    opts = dict(m=1000, n=800, rank=4, density=0.05, seed=0)
    body = spec.split(":", 1)[1] if ":" in spec else ""
    for part in filter(None, body.split(",")):
        if "=" not in part:
            raise InputError(f"bad planted option {part!r}")
        k, v = part.split("=", 1)
        if k not in opts:
            raise InputError(f"unknown planted option {k!r}")
        opts[k] = float(v) if k == "density" else int(v)
    return opts


def load_dataset(cfg):
    """A file path, or ``planted:m=..,n=..,rank=..,density=..,seed=..``."""
    if not cfg.dataset:
        raise InputError("no dataset given (--dataset or 'dataset' in the config)")
    if cfg.dataset.startswith("planted"):
        o = _parse_planted(cfg.dataset)
        r, _, _ = dataio.planted_instance(o["m"], o["n"], o["rank"], o["density"], o["seed"])
        return r
    return dataio.load_ratings(cfg.dataset, cfg.format)


# -- subcommands ---------------------------------------------------------------


def _choose_grids(cfg, m, n, nnz):
    """Grid shapes for the X and Theta updates, or ``None`` for the
    single-worker path."""
    topo = cfg.topology()
    shapes = []
    for rows, cols in ((m, n), (n, m)):
        if cfg.workers > 1:
            p = min(cfg.workers, cols)
            q = smallest_feasible_q(rows, cols, nnz, cfg.f, p, cfg.capacity, cfg.headroom)
            if q is None:
                raise CapacityError(f"no q fits p={p} workers within capacity {cfg.capacity:,.0f}")
        else:
            plan = plan_partition(rows, cols, nnz, cfg.f, Topology(1, capacity=cfg.capacity), cfg.headroom)
            p, q = plan.p, plan.q
        shapes.append((p, q))
    if cfg.workers == 1 and all(s == (1, 1) for s in shapes):
        return None
    topos = []
    for p, _ in shapes:
        topos.append(topo if p == topo.workers else Topology.flat(p, cfg.capacity))
    return shapes, topos


def _read_metrics(path, upto):
    rows = []
    if Path(path).exists():
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if int(row["iteration"]) <= upto:
                    rows.append([row[k] for k in METRICS_HEADER])
    return rows


def cmd_train(cfg):
    cfg.validate()
    full = load_dataset(cfg)
    train, test = dataio.split_train_test(full, cfg.holdout, cfg.seed)
    r_csc = csr_to_csc(train)
    solver_cfg = cfg.solver_config()
    baseline = (
        float(np.sqrt(np.mean((test.values.astype(np.float64) - train.values.mean(dtype=np.float64)) ** 2)))
        if len(test) and train.nnz
        else float("nan")
    )

    x_step = theta_step = None
    grids = _choose_grids(cfg, train.rows, train.cols, train.nnz)
    if grids is not None:
        (shape_x, shape_t), (topo_x, topo_t) = grids
        _logger.info("scale-up path: X grid p,q=%s, Theta grid p,q=%s", shape_x, shape_t)
        updater = ScaleUpUpdater(
            train, r_csc, solver_cfg, shape_x, shape_t, topo_x, topo_t,
            scheme=cfg.reduce, threads=cfg.threads or cfg.workers, headroom=cfg.headroom,
        )
        x_step, theta_step = updater.x_step, updater.theta_step

    digest = cfg.digest()
    writer = None
    resume = None
    done = 0
    if cfg.checkpoint_dir:
        ckdir = Path(cfg.checkpoint_dir)
        ckdir.mkdir(parents=True, exist_ok=True)
        if cfg.resume:
            cp = dataio.restore_latest(ckdir, digest=digest)
            if cp is not None:
                resume = (cp.iteration, cp.which, cp.factor)
                done = cp.iteration if cp.which == "T" else cp.iteration - 1
                _logger.info("resuming after %s@%d", cp.which, cp.iteration)
        dataio.write_triplets(ckdir / "test_split.txt", test)
        (ckdir / "run.conf").write_text(cfg.to_text())
        writer = dataio.CheckpointWriter(ckdir, digest)

    prior = _read_metrics(cfg.metrics, done) if resume else []
    metrics_path = Path(cfg.metrics)
    if metrics_path.parent != Path(""):
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
    with open(metrics_path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(METRICS_HEADER)
        out.writerows(prior)
        fh.flush()

        def on_iteration(mt):
            out.writerow([mt.iteration, f"{mt.wall_seconds:.6f}", repr(mt.train_loss),
                          repr(mt.test_rmse), repr(baseline)])
            fh.flush()

        try:
            result = als_train(
                train, r_csc, test, solver_cfg, cfg.iterations, rank=cfg.f, seed=cfg.seed,
                resume=resume, x_step=x_step, theta_step=theta_step,
                on_half_step=writer.submit if writer else None,
                on_iteration=on_iteration, track_half_steps=False,
            )
        finally:
            if writer:
                writer.close()
    if result.history:
        last = result.history[-1]
        print(f"iterations={last.iteration} train_J={last.train_loss:.6g} "
              f"test_RMSE={last.test_rmse:.6f} baseline_RMSE={baseline:.6f}")
    else:
        print("iterations=0")
    return 0


def cmd_plan(m, n, nnz, f, topo, headroom=0.0):
    plan = plan_partition(m, n, nnz, f, topo, headroom)
    print(plan.describe())
    return plan


def cmd_gensynth(base_path, horiz, vert, out_path, fmt="binary_cache", noise=0.0, seed=0):
    base = dataio.load_ratings(base_path, fmt)
    out = dataio.duplicate_synthesize(base, horiz, vert, noise=noise, seed=seed)
    dataio.write_binary_cache(out_path, out)
    print(f"wrote {out.rows}x{out.cols} with {out.nnz} ratings to {out_path}")
    return 0


def cmd_eval(checkpoint_dir, test_file):
    cp_x = dataio.restore_latest(checkpoint_dir, which="X")
    cp_t = dataio.restore_latest(checkpoint_dir, which="T")
    if cp_x is None or cp_t is None:
        raise InputError(f"{checkpoint_dir} needs checkpoints for both X and Theta")
    if cp_x.factor.shape[1] != cp_t.factor.shape[1]:
        raise ConfigError(f"rank mismatch: X has f={cp_x.factor.shape[1]}, Theta has f={cp_t.factor.shape[1]}")
    if cp_x.digest != cp_t.digest:
        raise ConfigError("X and Theta checkpoints come from different configurations")
    value = rmse(dataio.read_triplets(test_file), cp_x.factor, cp_t.factor)
    print(f"{value:.6f}")
    return value


# -- argument parsing ----------------------------------------------------------

TRAIN_FLAGS = {
    "seed": int, "iterations": int, "f": int, "lambda": float, "bin": int,
    "batch-rows": int, "workers": int, "groups": str, "capacity": float,
    "headroom": float, "threads": int, "metrics": str, "checkpoint-dir": str,
    "dataset": str, "format": str, "holdout": float,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="alsgrid",
        description="Alternating least squares matrix factorization.",
        epilog="Precedence: built-in defaults < --config file < command-line flags.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train factors and write per-iteration metrics")
    tr.add_argument("--config", help="flat 'key = value' config file")
    for flag, typ in TRAIN_FLAGS.items():
        tr.add_argument(f"--{flag}", type=typ, default=None)
    tr.add_argument("--reduce", choices=["one-phase", "two-phase"], default=None)
    tr.add_argument("--resume", action="store_true", default=None)
    tr.add_argument("--single-precision", action="store_true", default=None,
                    help="accumulate normal equations in float32")

    pl = sub.add_parser("plan", help="choose the (p, q) grid for a problem shape")
    pl.add_argument("--m", type=int, required=True)
    pl.add_argument("--n", type=int, required=True)
    pl.add_argument("--nnz", type=int, required=True)
    pl.add_argument("--f", type=int, required=True)
    pl.add_argument("--capacity", type=float, required=True, help="per-worker capacity in scalars")
    pl.add_argument("--headroom", type=float, default=0.0)
    pl.add_argument("--workers", type=int, default=1)
    pl.add_argument("--groups", default="")

    gs = sub.add_parser("gen-synth", help="duplicate a rating matrix into a larger one")
    gs.add_argument("base")
    gs.add_argument("out")
    gs.add_argument("--horiz", type=int, required=True, help="copies along the rows")
    gs.add_argument("--vert", type=int, required=True, help="copies along the columns")
    gs.add_argument("--format", default="binary_cache", choices=dataio.FORMATS)
    gs.add_argument("--noise", type=float, default=0.0)
    gs.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="RMSE of checkpointed factors on a test file")
    ev.add_argument("checkpoint_dir")
    ev.add_argument("test_file")
    return parser


def config_from_args(args):
    cfg = RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg = RunConfig.from_text(text, cfg)
    for flag in TRAIN_FLAGS:
        value = getattr(args, flag.replace("-", "_"))
        if value is not None:
            cfg.set(flag.replace("-", "_"), value)
    if args.reduce is not None:
        cfg.reduce = args.reduce.replace("-", "_")
    if args.resume:
        cfg.resume = True
    if args.single_precision:
        cfg.accumulate_double = False
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "train":
            return cmd_train(config_from_args(args))
        if args.command == "plan":
            groups = parse_groups(args.groups) if args.groups else None
            cmd_plan(args.m, args.n, args.nnz, args.f,
                     Topology(args.workers, groups, args.capacity), args.headroom)
            return 0
        if args.command == "gen-synth":
            return cmd_gensynth(args.base, args.horiz, args.vert, args.out,
                                args.format, args.noise, args.seed)
        if args.command == "eval":
            cmd_eval(args.checkpoint_dir, args.test_file)
            return 0
    except AlsError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 2


if __name__ == "__main__":
    sys.exit(main())
