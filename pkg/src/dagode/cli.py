"""Command-line experiment runner.

Subcommands::

    dagode generate  [--config F] [--seed N] [--out DIR]
    dagode fit       [DATA] [--config F] [--algorithm A] [--threshold W] [--out DIR]
    dagode evaluate  PRED TRUTH
    dagode benchmark [--config F] [--threads N] [--out DIR]
    dagode defaults  [--algorithm A]

Exit codes: 0 success, 2 config error, 3 data error, 4 optimization
failure, 5 some benchmark seeds failed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, datagen, graphs, learners, odeflow
from .errors import (ContractError, DecompositionError, GenerationError, NumericError,
                     OptimizationError, ParseError)
from .rng import make_rng

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_OPTIM, EXIT_PARTIAL = 0, 2, 3, 4, 5
ALGORITHMS = ("notears", "dagode")
GENERATORS = ("gp_anm", "linear_sem")
SACHS_SHAPE = (7466, 11)
SACHS_NOTE = ("rows pooled across all experimental conditions (including interventions) "
              "and treated as observational")


class ConfigError(ContractError):
    pass


# -- bundled data -------------------------------------------------------------

def data_path(name):
    return Path(str(resources.files("dagode") / "data" / name))


def sachs_paths():
    return data_path("sachs.csv"), data_path("sachs_consensus.tsv")


def _is_bundled_sachs(path):
    try:
        return Path(path).resolve() == sachs_paths()[0].resolve()
    except OSError:
        return False


def load_dataset(path):
    """Read a headed numeric CSV into a :class:`Dataset`.

    A truth graph is attached when a ``.edges.tsv`` sidecar exists (or for
    the bundled Sachs data, its consensus network).
    """
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"no such data file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(c.strip() for c in rows[0]):
        raise ParseError("empty file, expected a header row", line=1)
    names = [c.strip() for c in rows[0]]
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names):
            raise ParseError(f"expected {len(names)} fields, got {len(row)}", line=lineno)
        try:
            values.append([float(c) for c in row])
        except ValueError as exc:
            raise ParseError(f"non-numeric cell ({exc})", line=lineno) from None
    if not values:
        raise ParseError("no data rows after the header", line=2)
    x = np.array(values)
    if not np.isfinite(x).all():
        raise ParseError("non-finite values in data")
    meta = {"source": str(path)}
    truth = None
    if _is_bundled_sachs(path):
        if x.shape != SACHS_SHAPE:
            raise ParseError(f"bundled Sachs data has shape {x.shape}, expected {SACHS_SHAPE}")
        truth = graphs.load_dag(sachs_paths()[1], names=names)
        meta.update(dataset="sachs", pooled_interventions=True, note=SACHS_NOTE)
    elif datagen.sidecar(path, "edges").is_file():
        truth = graphs.load_dag(datagen.sidecar(path, "edges"), names=names)
    meta_file = datagen.sidecar(path, "meta")
    if meta_file.is_file():
        meta.update(json.loads(meta_file.read_text(encoding="utf-8")))
    return datagen.Dataset(x, names, truth, meta)


def sachs_dataset():
    return load_dataset(sachs_paths()[0])


# -- configuration ------------------------------------------------------------

@dataclass
class GeneratorSpec:
    type: str = "gp_anm"
    d: int = 10
    k: float = 1.0
    n: int = 1000
    noise: str = "gaussian"
    seed: int = 0
    repeats: int = 5


@dataclass
class PathSpec:
    data: str = ""
    truth: str = ""
    out: str = "runs"


@dataclass
class ExperimentConfig:
    """Everything a CLI task needs.  ``source`` is the config text as read."""

    task: str = "benchmark"
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    algorithm: str = "dagode"
    learner: learners.LearnerConfig = field(default_factory=learners.LearnerConfig.dag_ode)
    paths: PathSpec = field(default_factory=PathSpec)
    threads: int = 1
    source: str = ""
    overrides: dict = field(default_factory=dict)

    def validate(self):
        g = self.generator
        if g.type not in GENERATORS:
            raise ConfigError(f"generator.type must be one of {GENERATORS}")
        if g.noise not in datagen.NOISE_TYPES:
            raise ConfigError(f"generator.noise must be one of {datagen.NOISE_TYPES}")
        if g.d < 2 or g.n < 1 or g.repeats < 1 or g.k < 0:
            raise ConfigError("need d >= 2, n >= 1, repeats >= 1 and k >= 0")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.task == "fit" and not self.paths.data:
            raise ConfigError("fit needs a data path")
        if self.task == "fit" and self.paths.data != "sachs" and not Path(self.paths.data).is_file():
            raise ConfigError(f"data file not found: {self.paths.data}")
        if self.paths.truth and not Path(self.paths.truth).is_file():
            raise ConfigError(f"truth file not found: {self.paths.truth}")
        return self


def learner_defaults(algorithm):
    return learners.LearnerConfig.notears() if algorithm == "notears" else learners.LearnerConfig.dag_ode()


def _coerce(text, default, key):
    text = text.strip()
    try:
        if key == "threshold":
            return None if text.lower() in ("gap", "none", "") else float(text)
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def _apply(obj, items, section):
    known = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in items:
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        changes[key] = _coerce(text, getattr(obj, key), key)
    try:
        return dataclasses.replace(obj, **changes)
    except ContractError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_config(text, task="benchmark"):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    unknown = set(parser.sections()) - {"generator", "learner", "paths"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    learner_items = dict(parser.items("learner")) if parser.has_section("learner") else {}
    algorithm = learner_items.pop("algorithm", "dagode").strip()
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
    cfg = ExperimentConfig(task=task, algorithm=algorithm, learner=learner_defaults(algorithm),
                           source=text)
    if parser.has_section("generator"):
        cfg.generator = _apply(cfg.generator, parser.items("generator"), "generator")
    cfg.learner = _apply(cfg.learner, learner_items.items(), "learner")
    if parser.has_section("paths"):
        cfg.paths = _apply(cfg.paths, parser.items("paths"), "paths")
    return cfg


def render_config(cfg):
    """INI text for ``cfg`` (what ``defaults`` prints)."""
    out = ["[generator]"]
    out += [f"{k} = {v}" for k, v in dataclasses.asdict(cfg.generator).items()]
    out += ["", "[learner]", f"algorithm = {cfg.algorithm}"]
    for f in dataclasses.fields(cfg.learner):
        v = getattr(cfg.learner, f.name)
        if f.name == "threshold" and v is None:
            v = "gap"
        elif isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        out.append(f"{f.name} = {v}")
    out += ["", "[paths]"] + [f"{k} = {v}" for k, v in dataclasses.asdict(cfg.paths).items()]
    return "\n".join(out) + "\n"


def default_config(algorithm="dagode"):
    cfg = ExperimentConfig(algorithm=algorithm, learner=learner_defaults(algorithm))
    cfg.source = render_config(cfg)
    return cfg


def config_hash(text):
    return odeflow.config_hash(text)


# -- running fits ---------------------------------------------------------------

def fit(data, algorithm, cfg):
    if algorithm == "notears":
        return learners.fit_notears_linear(data, cfg)
    return learners.fit_dag_ode(data, cfg)


def _fmt(v):
    return repr(float(v))


def write_adjacency(adj, names, path):
    lines = [",".join(names)] + [",".join(_fmt(v) for v in row) for row in adj]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_trace(trace, path):
    lines = ["outer_iter,loss,h,rho,lambda,accepted"]
    lines += [f"{e.outer},{_fmt(e.loss)},{_fmt(e.h)},{_fmt(e.rho)},{_fmt(e.lam)},{int(e.accepted)}"
              for e in trace]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def threshold_sweep(adj, truth, names=()):
    """SHD and TPR of the thresholded graph at every distinct cut point."""
    vals = np.unique(adj[~np.eye(adj.shape[0], dtype=bool)])
    rows = []
    for omega in np.concatenate([[0.0], vals]):
        m = graphs.shd(learners.threshold(adj, float(omega), names), truth)
        rows.append((float(omega), m.predicted_edges, m.shd, m.tpr))
    return rows


def write_run(result, out, truth=None, model_seed=None, cfg_hash=None):
    """Persist one fit; returns the metrics dict (or None without truth)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    names = result.names
    write_adjacency(result.adjacency, names, out / "adjacency.csv")
    graphs.write_edge_list(result.dag, out / "graph.tsv", names=names,
                           header=[f"threshold {result.threshold!r}"])
    write_trace(result.trace, out / "trace.csv")
    if result.model is not None:
        odeflow.save_checkpoint(result.model, out / "checkpoint.json", model_seed, cfg_hash)
    if truth is None:
        return None
    graphs.write_edge_list(truth, out / "truth.tsv", names=names)
    sweep = threshold_sweep(result.adjacency, truth, tuple(names))
    lines = ["omega,predicted_edges,shd,tpr"] + [f"{_fmt(o)},{e},{s},{_fmt(t)}" for o, e, s, t in sweep]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return graphs.shd(result.dag, truth).as_dict()


def make_problem(gen, seed):
    """ER graph and dataset for one benchmark seed."""
    g = graphs.sample_er(gen.d, gen.k, make_rng([seed, 0]))
    if gen.type == "gp_anm":
        return datagen.gen_gp_anm(g, gen.n, seed=seed)
    return datagen.gen_linear_sem(g, gen.n, noise=gen.noise, seed=seed)


def run_seed(cfg, seed, out):
    """One benchmark repetition; never raises, failures are recorded."""
    start = time.perf_counter()
    entry = {"seed": seed, "status": "ok"}
    try:
        ds = make_problem(cfg.generator, seed)
        run_dir = Path(out) / f"seed_{seed:04d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        datagen.save_dataset(ds, run_dir / "data.csv")
        res = fit(ds, cfg.algorithm, cfg.learner.replace(seed=seed))
        entry["metrics"] = write_run(res, run_dir, ds.truth, seed, config_hash(cfg.source))
        entry.update(h_final=res.h_final, converged=res.converged, threshold=res.threshold,
                     true_edges=len(ds.truth))
    except (ContractError, GenerationError, DecompositionError, NumericError,
            OptimizationError, ParseError) as exc:
        entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    entry["wall_clock_s"] = time.perf_counter() - start
    return entry


def _summary(values):
    if not values:
        return None
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"median": float(med), "iqr": float(q3 - q1)}


@dataclass
class RunReport:
    runs: list
    config_echo: str
    config_hash: str
    algorithm: str
    version: str = __version__
    overrides: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def failed(self):
        return [r for r in self.runs if r["status"] != "ok"]

    def aggregate(self):
        ok = [r["metrics"] for r in self.runs if r["status"] == "ok" and r.get("metrics")]
        return {"n_ok": len(ok), "n_failed": len(self.failed),
                "shd": _summary([m["shd"] for m in ok]),
                "tpr": _summary([m["tpr"] for m in ok])}

    def metrics_block(self):
        """Deterministic JSON of per-seed metrics and aggregates (no timings)."""
        per_seed = [{k: r.get(k) for k in ("seed", "status", "metrics", "h_final", "converged",
                                            "threshold", "error")}
                    for r in sorted(self.runs, key=lambda r: r["seed"])]
        return json.dumps({"runs": per_seed, "aggregate": self.aggregate()},
                          sort_keys=True, indent=1)

    def to_dict(self):
        return {"version": self.version, "algorithm": self.algorithm,
                "config_hash": self.config_hash, "config_echo": self.config_echo,
                "overrides": self.overrides, "metadata": self.metadata,
                "runs": sorted(self.runs, key=lambda r: r["seed"]),
                "aggregate": self.aggregate()}

    def write(self, out):
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1),
                                         encoding="utf-8")
        (out / "metrics.json").write_text(self.metrics_block() + "\n", encoding="utf-8")


def _run_seed_star(args):
    return run_seed(*args)


def run_benchmark(cfg, out=None):
    """Generate, fit and score ``repeats`` seeds; writes per-seed dirs and the report."""
    cfg.validate()
    out = Path(out or cfg.paths.out)
    seeds = [cfg.generator.seed + i for i in range(cfg.generator.repeats)]
    jobs = [(cfg, s, out) for s in seeds]
    if cfg.threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.threads, len(seeds))) as pool:
            runs = list(pool.map(_run_seed_star, jobs))
    else:
        runs = [run_seed(*j) for j in jobs]
    runs.sort(key=lambda r: r["seed"])
    report = RunReport(runs, cfg.source, config_hash(cfg.source), cfg.algorithm,
                       overrides=dict(cfg.overrides),
                       metadata={"generator": dataclasses.asdict(cfg.generator)})
    report.write(out)
    return report


# -- evaluate -----------------------------------------------------------------

def evaluate(pred_path, truth_path):
    """Score a predicted edge-list file against a truth edge-list file."""
    p_names, p_edges = graphs.read_edge_list(pred_path)
    t_names, _ = graphs.read_edge_list(truth_path)
    if set(p_names) != set(t_names):
        only_p = sorted(set(p_names) - set(t_names))
        only_t = sorted(set(t_names) - set(p_names))
        raise ContractError(f"node sets differ: only in prediction {only_p}, only in truth {only_t}")
    truth = graphs.load_dag(truth_path)
    pred = graphs.load_dag(pred_path, names=truth.names)
    return graphs.shd(pred, truth)


def metrics_table(m):
    rows = [("SHD", m.shd), ("TPR", f"{m.tpr:.4f}"), ("predicted edges", m.predicted_edges),
            ("reversed", m.reversed), ("missing", m.missing), ("extra", m.extra)]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


# -- entry point ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dagode", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--algorithm", choices=ALGORITHMS)
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--threads", type=int)

    common(sub.add_parser("generate", help="sample an ER graph and a dataset"))
    sp = sub.add_parser("fit", help="fit a learner to a CSV dataset ('sachs' for the bundled data)")
    sp.add_argument("data", nargs="?")
    sp.add_argument("--truth", help="truth edge list to score against")
    common(sp)
    sp = sub.add_parser("evaluate", help="score a predicted edge list against a truth edge list")
    sp.add_argument("pred")
    sp.add_argument("truth")
    common(sub.add_parser("benchmark", help="repeat generate+fit+score over seeds"))
    sp = sub.add_parser("defaults", help="print the default config")
    sp.add_argument("--algorithm", choices=ALGORITHMS, default="dagode")
    return p


def _load_cfg(args):
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config(path.read_text(encoding="utf-8"), args.command)
    else:
        cfg = default_config(args.algorithm or "dagode")
        cfg.task = args.command
    over = {}
    if args.algorithm and args.algorithm != cfg.algorithm:
        cfg.algorithm = args.algorithm
        cfg.learner = learner_defaults(args.algorithm)
        over["algorithm"] = args.algorithm
    if args.seed is not None:
        cfg.generator = dataclasses.replace(cfg.generator, seed=args.seed)
        cfg.learner = cfg.learner.replace(seed=args.seed)
        over["seed"] = args.seed
    if args.threshold is not None:
        cfg.learner = cfg.learner.replace(threshold=args.threshold)
        over["threshold"] = args.threshold
    if args.threads is not None:
        cfg.threads = args.threads
        over["threads"] = args.threads
    if args.out:
        cfg.paths = dataclasses.replace(cfg.paths, out=args.out)
    if getattr(args, "data", None):
        cfg.paths = dataclasses.replace(cfg.paths, data=args.data)
    if getattr(args, "truth", None):
        cfg.paths = dataclasses.replace(cfg.paths, truth=args.truth)
    cfg.overrides = over
    return cfg.validate()


def _cmd_generate(cfg):
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = make_problem(cfg.generator, cfg.generator.seed)
    datagen.save_dataset(ds, out / "data.csv")
    print(f"wrote {out / 'data.csv'} ({ds.n} x {ds.d}, {len(ds.truth)} true edges)")
    return EXIT_OK


def _cmd_fit(cfg):
    ds = sachs_dataset() if cfg.paths.data == "sachs" else load_dataset(cfg.paths.data)
    truth = ds.truth
    if cfg.paths.truth:
        truth = graphs.load_dag(cfg.paths.truth, names=ds.names)
    start = time.perf_counter()
    res = fit(ds, cfg.algorithm, cfg.learner)
    elapsed = time.perf_counter() - start
    out = Path(cfg.paths.out)
    metrics = write_run(res, out, truth, cfg.learner.seed, config_hash(cfg.source))
    run = {"seed": cfg.learner.seed, "status": "ok", "metrics": metrics,
           "h_final": res.h_final, "converged": res.converged, "threshold": res.threshold,
           "wall_clock_s": elapsed}
    meta = {k: v for k, v in ds.meta.items() if k in ("dataset", "pooled_interventions", "note",
                                                       "source", "generator")}
    RunReport([run], cfg.source, config_hash(cfg.source), cfg.algorithm,
              overrides=cfg.overrides, metadata=meta).write(out)
    print(f"{len(res.dag)} edges, h = {res.h_final:.3g}, converged = {res.converged}")
    if metrics:
        print(metrics_table(graphs.Metrics(**metrics)))
    return EXIT_OK


def _cmd_benchmark(cfg):
    report = run_benchmark(cfg)
    print(report.metrics_block())
    return EXIT_PARTIAL if report.failed else EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "defaults":
            sys.stdout.write(render_config(default_config(args.algorithm)))
            return EXIT_OK
        if args.command == "evaluate":
            try:
                m = evaluate(args.pred, args.truth)
            except (OSError, ParseError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_DATA
            print(metrics_table(m))
            print(json.dumps(m.as_dict(), sort_keys=True))
            return EXIT_OK
        cfg = _load_cfg(args)
        return {"generate": _cmd_generate, "fit": _cmd_fit,
                "benchmark": _cmd_benchmark}[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, GenerationError, DecompositionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OptimizationError, NumericError) as exc:
        print(f"optimization failed: {exc}", file=sys.stderr)
        return EXIT_OPTIM
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
