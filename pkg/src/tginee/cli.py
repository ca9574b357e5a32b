"""Command-line front end: ``generate``, ``fit``, ``eval``, ``sweep``, ``diagnose``, ``perturb``.

Settings are dotted ``key=value`` pairs (``fit.rank``, ``synth.rho``, ...).
They are merged from built-in defaults, then an optional ``--config`` file,
then command-line flags. Every output directory receives ``config.echo``
with the effective settings, which can be passed back through ``--config``
to reproduce a run. Wall-clock timings go only to ``run.log``.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _rng
from .covariance import write_w_csv
from .errors import ConfigError, TgineeError
from .estimator import FitConfig, fit, load_checkpoint, save_checkpoint
from .evaluation import (
    SplitSpec,
    auc,
    diagnostics,
    drop_layer,
    factor_scorer,
    kruskal_check,
    layer_context_similarity,
    link_prediction_auc,
    split_triplets,
    suggest_rank,
    triangle_prediction,
    zero_shot_layer_score,
)
from .link_fn import KINDS, LinkFunction
from .sampling import sample_non_edges
from .synth import SynthSpec, generate, generate_heterogeneous, perturb
from .tensor_core import read_edgelist, write_edgelist

log = logging.getLogger("tginee")

GRAPH_FILE = "graph.edges"


# -- key registry ---------------------------------------------------------


def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("auto", "none", ""):
        return None
    return float(text)


def _opt_int(text):
    if text is None or str(text).strip().lower() in ("auto", "none", ""):
        return None
    return int(text)


def _fmt(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    flag: str
    help: str = ""
    choices: tuple | None = None


KEYS = [
    Key("seed", int, 0, "seed", "root seed for the init, sampling and perturb streams"),
    Key("synth.n", int, 100, "n", "number of nodes"),
    Key("synth.M", int, 3, "M", "number of layers"),
    Key("synth.rho", float, 0.2, "rho", "weight of the shared base table"),
    Key("synth.base_kind", str, "uniform_random", "base-kind", choices=("uniform_random", "block")),
    Key("synth.block_sizes", str, "", "block-sizes", "comma-separated community sizes"),
    Key("synth.within_prob", float, 0.3, "within-prob"),
    Key("synth.between_prob", float, 0.05, "between-prob"),
    Key("synth.base_jitter", float, 0.0, "base-jitter"),
    Key("synth.layer_rho", str, "", "layer-rho", "heterogeneous weights, e.g. 0-1:0.1,0-2:0.5,1-2:0.2"),
    Key("synth.truth", _bool, False, "truth", "also write the truth table"),
    Key("link.kind", str, "logit", "link", choices=KINDS),
    Key("link.s", float, 1.0, "s", "sparsity coefficient of sparse_logit"),
    Key("link.clamp_eps", float, 1e-6, "clamp-eps"),
    Key("fit.rank", int, 32, "rank"),
    Key("fit.learning_rate", float, 0.01, "learning-rate"),
    Key("fit.weight_decay", float, 1e-5, "weight-decay"),
    Key("fit.epochs", int, 50, "epochs"),
    Key("fit.batch_size", int, 10000, "batch-size"),
    Key("fit.gee_lambda", float, 0.1, "gee-lambda"),
    Key("fit.cov_refresh_every", int, 5, "cov-refresh-every"),
    Key("fit.momentum_mu", float, 0.9, "momentum-mu"),
    Key("fit.warmup_epochs", int, 5, "warmup-epochs"),
    Key("fit.mode", str, "full_batch", "mode", choices=("full_batch", "mini_batch")),
    Key("fit.init_scale", float, 0.1, "init-scale"),
    Key("fit.optimizer", str, "adam", "optimizer", choices=("adam", "sgd")),
    Key("fit.bce_weight", float, 1.0, "bce-weight"),
    Key("fit.estimate_w", _bool, True, "estimate-w"),
    Key("fit.include_diagonal", _bool, True, "include-diagonal"),
    Key("fit.gee_full_fiber", _bool, False, "gee-full-fiber"),
    Key("fit.ridge_eps", _opt_float, None, "ridge-eps"),
    Key("fit.normalize_correlation", _bool, False, "normalize-correlation"),
    Key("fit.holdout", _bool, True, "holdout", "fit on the training split only"),
    Key("sampling.neg_ratio", int, 3, "neg-ratio"),
    Key("sampling.shuffle", _bool, True, "shuffle"),
    Key("sampling.seed", _opt_int, None, "sampling-seed", "defaults to the root seed"),
    Key("split.train_frac", float, 0.8, "train-frac"),
    Key("split.val_frac", float, 0.1, "val-frac"),
    Key("split.test_frac", float, 0.1, "test-frac"),
    Key("split.seed", int, 42, "split-seed"),
    Key("eval.task", str, "link", "task", choices=("link", "triangle")),
    Key("eval.part", str, "test", "part", choices=("train", "val", "test")),
    Key("eval.zero_shot_layer", _opt_int, None, "zero-shot-layer"),
    Key("eval.strategy", str, "mean_beta", "strategy", choices=("mean_beta", "nearest_beta", "provided_beta")),
    Key("eval.provided_beta", str, "", "provided-beta", "comma-separated beta row for provided_beta"),
    Key("eval.max_triangles", int, 200, "max-triangles"),
    Key("eval.triangle_strategy", str, "mask", "triangle-strategy", choices=("mask", "refit")),
    Key("perturb.ratio", float, 0.0, "ratio"),
    Key("diagnose.R", int, 32, "R"),
    Key("diagnose.C", float, 8.0, "C"),
]
KEY_INDEX = {k.name: k for k in KEYS}
ALIASES = {"lr": "fit.learning_rate", "lambda": "fit.gee_lambda", "d": "fit.rank"}


def parse_value(key, text):
    spec = KEY_INDEX.get(key)
    if spec is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = spec.parse(text) if isinstance(text, str) or text is None else text
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {key}: {exc}") from exc
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(f"{key} must be one of {spec.choices}, got {value!r}")
    return value


def read_config_file(path):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config file: {exc.strerror}") from exc
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEY_INDEX:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = parse_value(key, value)
    return out


def resolve_config(args) -> dict:
    """Defaults, then ``--config``, then flags and ``--set`` pairs."""
    cfg = {k.name: k.default for k in KEYS}
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    for k in KEYS:
        value = getattr(args, _dest(k), None)
        if value is not None:
            cfg[k.name] = parse_value(k.name, value)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = parse_value(key.strip(), value.strip())
    return cfg


def echo_config(cfg) -> str:
    return "".join(f"{k}={_fmt(cfg[k])}\n" for k in sorted(cfg))


def config_hash(cfg) -> str:
    return hashlib.sha256(echo_config(cfg).encode()).hexdigest()[:12]


def _dest(key) -> str:
    return "opt_" + key.name.replace(".", "__")


# -- config to domain objects -------------------------------------------------


def make_link(cfg) -> LinkFunction:
    return LinkFunction(cfg["link.kind"], cfg["link.s"], cfg["link.clamp_eps"])


def make_fit_config(cfg) -> FitConfig:
    return FitConfig(
        rank=cfg["fit.rank"],
        link=make_link(cfg),
        learning_rate=cfg["fit.learning_rate"],
        weight_decay=cfg["fit.weight_decay"],
        epochs=cfg["fit.epochs"],
        batch_size=cfg["fit.batch_size"],
        gee_lambda=cfg["fit.gee_lambda"],
        cov_refresh_every=cfg["fit.cov_refresh_every"],
        momentum_mu=cfg["fit.momentum_mu"],
        warmup_epochs=cfg["fit.warmup_epochs"],
        neg_ratio=cfg["sampling.neg_ratio"],
        mode=cfg["fit.mode"],
        seed=cfg["seed"],
        init_scale=cfg["fit.init_scale"],
        optimizer=cfg["fit.optimizer"],
        bce_weight=cfg["fit.bce_weight"],
        estimate_w=cfg["fit.estimate_w"],
        include_diagonal=cfg["fit.include_diagonal"],
        gee_full_fiber=cfg["fit.gee_full_fiber"],
        ridge_eps=cfg["fit.ridge_eps"],
        normalize_correlation=cfg["fit.normalize_correlation"],
        shuffle=cfg["sampling.shuffle"],
        sampling_seed=cfg["sampling.seed"],
    )


def make_split_spec(cfg) -> SplitSpec:
    return SplitSpec(cfg["split.train_frac"], cfg["split.val_frac"], cfg["split.test_frac"], cfg["split.seed"])


def parse_layer_rho(text):
    if not text:
        return None
    out = {}
    for item in text.split(","):
        try:
            pair, value = item.split(":")
            a, b = pair.split("-")
            out[(int(a), int(b))] = float(value)
        except ValueError as exc:
            raise ConfigError(f"bad synth.layer_rho entry {item!r}; expected a-b:value") from exc
    return out


def make_synth_spec(cfg) -> SynthSpec:
    sizes = cfg["synth.block_sizes"]
    try:
        block_sizes = tuple(int(s) for s in sizes.split(",")) if sizes else None
    except ValueError as exc:
        raise ConfigError(f"bad synth.block_sizes {sizes!r}") from exc
    return SynthSpec(
        n=cfg["synth.n"],
        M=cfg["synth.M"],
        rho=cfg["synth.rho"],
        base_kind=cfg["synth.base_kind"],
        block_sizes=block_sizes,
        within_prob=cfg["synth.within_prob"],
        between_prob=cfg["synth.between_prob"],
        base_jitter=cfg["synth.base_jitter"],
        layer_rho=parse_layer_rho(cfg["synth.layer_rho"]),
        seed=cfg["seed"],
    )


# -- output helpers -----------------------------------------------------------


class RunDir:
    def __init__(self, path, cfg):
        self.path = Path(path)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(exc.errno, f"cannot create output directory: {exc.strerror}", str(self.path)) from exc
        self.write("config.echo", echo_config(cfg))
        self.start = time.perf_counter()
        self._log = []

    def file(self, name) -> Path:
        return self.path / name

    def write(self, name, text):
        self.file(name).write_text(text)

    def note(self, message):
        self._log.append(message)

    def close(self, command):
        wall = time.perf_counter() - self.start
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        lines = [f"{stamp} {command}"] + self._log + [f"wall_time_s={wall:.3f}"]
        self.write("run.log", "\n".join(lines) + "\n")


def write_kv(path, metrics):
    Path(path).write_text("".join(f"{k}={_fmt(v)}\n" for k, v in metrics.items()))


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _load_graph(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(2, "no such file", str(path))
    return read_edgelist(path)


# -- commands -------------------------------------------------------------------


def cmd_generate(args, cfg):
    spec = make_synth_spec(cfg)
    out = RunDir(args.out, cfg)
    if spec.layer_rho is not None:
        graph, truth, sim = generate_heterogeneous(spec)
        write_w_csv(sim, out.file("planted_similarity.csv"))
    else:
        graph, truth = generate(spec)
    write_edgelist(graph, out.file(GRAPH_FILE))
    if cfg["synth.truth"]:
        truth.write(out.file("truth.tsv"))
    counts = {f"edges_layer{m}": graph.num_edges(m) for m in range(graph.M)}
    write_kv(out.file("metrics.kv"), {"n": graph.n, "M": graph.M, "edges": graph.num_edges(), **counts})
    out.close("generate")
    print(f"wrote {out.file(GRAPH_FILE)} ({graph.num_edges()} edges)")


def _training_graph(graph, cfg):
    if not cfg["fit.holdout"]:
        return graph, None
    split = split_triplets(graph, make_split_spec(cfg))
    return split.train_graph(graph), split


def cmd_fit(args, cfg):
    graph = _load_graph(args.input)
    train, _ = _training_graph(graph, cfg)
    config = make_fit_config(cfg)
    out = RunDir(args.out, cfg)
    report = fit(train, config)
    save_checkpoint(out.file("model.ckpt"), report.factors, report.link, report.w_final)
    write_w_csv(report.w_final, out.file("W.csv"))
    rows = [(e + 1, *map(float, row)) for e, row in enumerate(report.loss_trace)]
    write_csv(out.file("loss.csv"), ["epoch", "bce", "gee", "total"], rows)
    if report.score_norm_trace:
        write_csv(out.file("score_norm.csv"), ["refresh", "score_norm"], list(enumerate(report.score_norm_trace, 1)))
    write_kv(out.file("metrics.kv"), report.diagnostics.as_dict())
    out.note(f"fit_wall_time_s={report.wall_time:.3f}")
    out.close("fit")
    last = report.loss_trace[-1]
    print(f"epochs={len(report.loss_trace)} bce={last[0]:.6g} gee={last[1]:.6g} total={last[2]:.6g}")


def _evaluate(graph, cfg, factors, link, split=None):
    metrics = {}
    task = cfg["eval.task"]
    if cfg["eval.zero_shot_layer"] is not None:
        metrics.update(_zero_shot(graph, cfg))
    elif task == "link":
        split = split_triplets(graph, make_split_spec(cfg)) if split is None else split
        pos, neg = split.part(cfg["eval.part"])
        metrics["auc"] = link_prediction_auc(factors, link, pos, neg)
        metrics["positives"] = len(pos)
        metrics["negatives"] = len(neg)
    if task == "triangle":
        config = make_fit_config(cfg)
        result = triangle_prediction(
            graph,
            lambda g: factor_scorer(fit(g, config).factors, config.link),
            _rng.stream(cfg["seed"], "triangle"),
            cfg["eval.max_triangles"],
            cfg["eval.triangle_strategy"],
        )
        metrics["triangle_accuracy"] = result.accuracy
        metrics["triangle_trials"] = result.trials
    return metrics


def _zero_shot(graph, cfg):
    layer = cfg["eval.zero_shot_layer"]
    if not 0 <= layer < graph.M:
        raise ConfigError(f"eval.zero_shot_layer={layer} outside [0, {graph.M})")
    config = make_fit_config(cfg)
    trained = drop_layer(graph, layer)
    report = fit(trained, config)
    pos = graph.layer_edges(layer)
    pos = pos[pos[:, 0] != pos[:, 1]]
    if len(pos) == 0:
        raise ConfigError(f"layer {layer} has no edges to score")
    rng = _rng.stream(cfg["seed"], "zero_shot")
    n = graph.n
    # dense layers have fewer non-edges than edges
    k = min(len(pos), n * (n - 1) // 2 - len(pos))
    if k < 1:
        raise ConfigError(f"layer {layer} has no non-edges to score")
    codes = sample_non_edges(n, pos[:, 0] * n + pos[:, 1], k, rng)
    neg = np.column_stack([codes // n, codes % n])
    beta = None
    if cfg["eval.provided_beta"]:
        beta = np.array([float(x) for x in cfg["eval.provided_beta"].split(",")])
    similarity = layer_context_similarity(trained, range(trained.M))
    strategy = cfg["eval.strategy"]
    s_pos = zero_shot_layer_score(report.factors, config.link, pos, strategy, beta, similarity)
    s_neg = zero_shot_layer_score(report.factors, config.link, neg, strategy, beta, similarity)
    labels = np.r_[np.ones(len(s_pos)), np.zeros(len(s_neg))]
    return {"zero_shot_layer": layer, "zero_shot_strategy": strategy, "zero_shot_auc": auc(np.r_[s_pos, s_neg], labels)}


def cmd_eval(args, cfg):
    graph = _load_graph(args.input)
    factors = link = None
    needs_model = cfg["eval.task"] == "link" and cfg["eval.zero_shot_layer"] is None
    if needs_model:
        if not args.model:
            raise ConfigError("link-prediction eval needs --model <checkpoint>")
        model = Path(args.model)
        if model.is_dir():
            model = model / "model.ckpt"
        if not model.exists():
            raise FileNotFoundError(2, "no such file", str(model))
        factors, link, _ = load_checkpoint(model)
        if factors.dims.n != graph.n or factors.dims.M != graph.M:
            raise ConfigError(f"checkpoint dims {factors.dims} do not match graph n={graph.n}, M={graph.M}")
    metrics = _evaluate(graph, cfg, factors, link)
    out = RunDir(args.out, cfg)
    write_kv(out.file("metrics.kv"), metrics)
    write_csv(out.file("metrics.csv"), list(metrics), [list(metrics.values())])
    out.close("eval")
    for k, v in metrics.items():
        print(f"{k}={_fmt(v)}")


def _parse_grid(items):
    axes = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {item!r}")
        key, values = item.split("=", 1)
        key = ALIASES.get(key.strip(), key.strip())
        parsed = [parse_value(key, v.strip()) for v in values.split(",") if v.strip()]
        if not parsed:
            raise ConfigError(f"grid axis {key} has no values")
        axes.append((key, parsed))
    return axes


def cmd_sweep(args, cfg):
    axes = _parse_grid(args.grid)
    noise = [float(x) for x in args.perturb.split(",")] if args.perturb else [0.0]
    if not axes and not args.perturb:
        raise ConfigError("empty grid: pass at least one --grid key=values or --perturb ratios")
    graph = _load_graph(args.input) if args.input else generate(make_synth_spec(cfg))[0]
    out = RunDir(args.out, cfg)
    split = split_triplets(graph, make_split_spec(cfg))
    train_clean = split.train_graph(graph)
    keys = [k for k, _ in axes]
    header = ["cell", "config_hash", *keys, "noise_ratio", "repeats", "auc_mean", "auc_std"]
    rows = []
    combos = list(itertools.product(*[v for _, v in axes])) if axes else [()]
    for cell, values in enumerate(itertools.product(combos, noise)):
        combo, ratio = values
        cell_cfg = dict(cfg)
        cell_cfg.update(zip(keys, combo))
        aucs = []
        for rep in range(args.repeats):
            seed = cfg["seed"] + rep
            cell_cfg["seed"] = seed
            train = train_clean
            if ratio > 0:
                train = perturb(train_clean, ratio, _rng.stream(seed, "perturb")).graph
            report = fit(train, make_fit_config(cell_cfg))
            aucs.append(link_prediction_auc(report.factors, report.link, split.test, split.test_neg))
        cell_cfg["seed"] = cfg["seed"]
        std = float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0
        rows.append([cell, config_hash(cell_cfg), *combo, ratio, args.repeats, float(np.mean(aucs)), std])
        out.note(f"cell {cell} done")
    write_csv(out.file("sweep.csv"), header, rows)
    out.close("sweep")
    print(f"wrote {out.file('sweep.csv')} ({len(rows)} rows)")


def cmd_diagnose(args, cfg):
    graph = _load_graph(args.input)
    R = cfg["diagnose.R"]
    diag = diagnostics(graph, R, C=cfg["diagnose.C"])
    report = diag.as_dict()
    if args.kruskal:
        if not args.model:
            raise ConfigError("--kruskal needs --model <checkpoint>")
        factors, _, _ = load_checkpoint(args.model)
        k_alpha, k_beta, ok = kruskal_check(factors)
        report.update(k_alpha=k_alpha, k_beta=k_beta, kruskal_ok=ok, kruskal_R=factors.dims.R)
    if args.suggest_rank:
        report["suggested_R"] = suggest_rank(graph.n, graph.M, cfg["diagnose.C"])
    if args.out:
        out = RunDir(args.out, cfg)
        write_kv(out.file("metrics.kv"), report)
        out.close("diagnose")
    for k, v in report.items():
        if v is not None:
            print(f"{k}={_fmt(v)}")


def cmd_perturb(args, cfg):
    graph = _load_graph(args.input)
    result = perturb(graph, cfg["perturb.ratio"], _rng.stream(cfg["seed"], "perturb"))
    out = RunDir(args.out, cfg)
    write_edgelist(result.graph, out.file(GRAPH_FILE))
    metrics = {}
    for m in range(graph.M):
        metrics[f"deleted_layer{m}"] = int(result.deleted[m])
        metrics[f"added_layer{m}"] = int(result.added[m])
        metrics[f"shortfall_layer{m}"] = int(result.shortfall[m])
    write_kv(out.file("metrics.kv"), metrics)
    out.close("perturb")
    print(f"wrote {out.file(GRAPH_FILE)} ({result.graph.num_edges()} edges)")


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
    "perturb": cmd_perturb,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tginee", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--out", required=name not in ("diagnose",), help="output directory")
        if name != "generate":
            p.add_argument("--input", required=name != "sweep", help="edge-list file")
        if name in ("eval", "diagnose"):
            p.add_argument("--model", help="checkpoint file or fit output directory")
        if name == "sweep":
            p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="grid axis (repeatable)")
            p.add_argument("--repeats", type=int, default=1)
            p.add_argument("--perturb", help="comma-separated noise ratios applied to the training graph")
        if name == "diagnose":
            p.add_argument("--kruskal", action="store_true")
            p.add_argument("--suggest-rank", action="store_true")
        group = p.add_argument_group("settings")
        for k in KEYS:
            flags = [f"--{k.flag}"]
            flags += [f"--{a}" for a, target in ALIASES.items() if target == k.name]
            group.add_argument(*flags, dest=_dest(k), default=None, help=k.help or k.name)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "repeats", 1) < 1:
            raise ConfigError("--repeats must be >= 1")
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except TgineeError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except OSError as exc:
        where = f"{exc.filename}: " if exc.filename else ""
        print(f"io-error: {where}{exc.strerror or exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
