"""Experiment harness: ``warnprop <verb> --config cfg.json --out dir``.

Every verb writes CSV files whose rows carry the config digest and the base
seed. Cells (n, replicate) draw from independent streams derived from the
seed, so results do not depend on ``--threads``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import change_process as cp
from . import ghat_model as gh
from .dist_fixed_point import bisect_threshold, iterate_to_limit
from .errors import DomainError, NumericError, ResourceError
from .graph_model import assumption_report
from .gw_tree import history_distribution
from .instances import (instance_from_config, kcore_core_fraction, kcore_scalar_threshold, sample_graph)
from .wp_engine import changes_since, extract_core, initialize, run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INCONCLUSIVE = 0, 2, 3, 4

VERBS = ("converge", "threshold", "contiguity", "subcritical", "assumptions")

_num = {"type": "number"}
_int_list = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}
SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "instance": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": {"type": "string"}, "params": {"type": "object"}},
        },
        "n": _int_list,
        "replicates": {"type": "integer", "minimum": 1},
        "t0": {"type": "integer", "minimum": 0},
        "deltas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "normalize": {"enum": ["edges", "vertices"]},
        "max_rounds": {"type": "integer", "minimum": 1},
        "grid": {"type": "array", "items": _num, "minItems": 1},
        "grid_param": {"type": "string"},
        "bisect": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"lo": _num, "hi": _num, "tol": {"type": "number", "exclusiveMinimum": 0}},
        },
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "history_samples": {"type": "integer", "minimum": 1},
        "samples": {"type": "integer", "minimum": 2},
        "t_max": {"type": "integer", "minimum": 1},
        "pad_eps": {"type": "number", "exclusiveMinimum": 0},
        "min_freq": {"type": "number", "minimum": 0},
        "radius": {"type": "integer", "minimum": 0, "maximum": 5},
        "tree_samples": {"type": "integer", "minimum": 1},
    },
    "required": ["instance"],
}

DEFAULTS = {
    "n": [10_000],
    "replicates": 1,
    "t0": 3,
    "deltas": [0.01],
    "normalize": "edges",
    "max_rounds": 1000,
    "grid_param": "degree_family",
    "tol": 1e-10,
    "samples": 100_000,
    "t_max": 20,
    "pad_eps": 1e-6,
    "min_freq": 0.01,
    "radius": 2,
    "tree_samples": 10_000,
}


class ConfigError(Exception):
    pass


def load_config(text: str) -> dict:
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}")
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        line = _line_of(text, exc)
        at = f" (line {line})" if line else ""
        raise ConfigError(f"config error at {where}{at}: {exc.message}")
    return cfg


def _line_of(text: str, exc) -> int | None:
    """Line of the offending key, found by name; None when it cannot be located."""
    keys = [p for p in exc.absolute_path if isinstance(p, str)]
    if exc.validator == "additionalProperties" and isinstance(exc.instance, dict):
        allowed = exc.schema.get("properties", {})
        keys = [k for k in exc.instance if k not in allowed][:1] or keys
    if not keys:
        return 1 if text.strip() else None
    needle = json.dumps(keys[-1])
    for no, line in enumerate(text.splitlines(), 1):
        if needle + ":" in line.replace(" ", "").replace("\t", ""):
            return no
    return None


def digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


class Table:
    """CSV writer that stamps every row with digest and seed."""

    def __init__(self, header, dig: str, seed: int):
        self.header = ["config_digest", "seed", *header]
        self.rows: list[list[str]] = []
        self.dig, self.seed = dig, seed

    def add(self, *values):
        self.rows.append([self.dig, str(self.seed), *(_fmt(v) for v in values)])

    def text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        w.writerows(self.rows)
        return buf.getvalue()


def _cells(cfg):
    return [(n, r) for n in cfg["n"] for r in range(cfg["replicates"])]


def _cell_rng(seed: int, n: int, rep: int, salt: int = 0):
    return np.random.default_rng(np.random.SeedSequence([seed, salt, n, rep]))


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _bundle(cfg, override=None):
    params = dict(cfg["instance"].get("params", {}))
    if override:
        params.update(override)
    try:
        return instance_from_config(cfg["instance"]["name"], params)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None


# -- verbs ------------------------------------------------------------------------

def run_converge(cfg, seed, threads):
    dig = digest(cfg)
    bundle = _bundle(cfg)
    trace = Table(["n", "replicate", "round", "changes", "changes_since"], dig, seed)
    summary = Table(["n", "replicate", "delta", "scale", "t0", "final_round", "converged"], dig, seed)

    def cell(c):
        n, rep = c
        rng = _cell_rng(seed, n, rep)
        g = sample_graph(bundle, n, rng)
        mg = initialize(g, bundle.Q0, rng, keep_history=False)
        _, tr = run(mg, bundle.rule, cfg["max_rounds"])
        return n, rep, g, tr

    for n, rep, g, tr in _map(cell, _cells(cfg), threads):
        for t in range(tr.final_round + 1):
            trace.add(n, rep, t, tr.changes[t - 1] if t else "", changes_since(tr, t))
        scale = g.num_directed if cfg["normalize"] == "edges" else g.n
        for d in cfg["deltas"]:
            t0 = next((t for t in range(tr.final_round + 1) if changes_since(tr, t) < d * scale), "")
            summary.add(n, rep, d, scale, t0, tr.final_round, int(tr.converged))
    return {"converge.csv": trace, "converge_summary.csv": summary}, EXIT_OK


def run_threshold(cfg, seed, threads):
    dig = digest(cfg)
    base = _bundle(cfg)
    if base.name != "kcore":
        raise ConfigError("threshold scans are defined for the kcore instance")
    k_core = int(base.params["k_core"])
    key = cfg["grid_param"]
    grid = cfg.get("grid")
    if not grid:
        raise ConfigError("threshold needs a non-empty 'grid'")
    rows = Table(["c", "fixpoint_mass", "core_predicted", "n", "replicate", "core_empirical"], dig, seed)

    def point(ic):
        i, c = ic
        b = _bundle(cfg, {key: c})
        lim = iterate_to_limit(b.model, b.rule, b.Q0, tol=cfg["tol"], max_iters=100_000)
        mass = lim.P.prob_of_label(0, 0, "1")
        pred = float(kcore_core_fraction(b, lim.P)[0])
        emp = []
        for n, rep in _cells(cfg):
            rng = _cell_rng(seed, n, rep, salt=i + 1)
            g = sample_graph(b, n, rng)
            mg, _ = run(initialize(g, b.Q0, rng, keep_history=False), b.rule, cfg["max_rounds"])
            emp.append((n, rep, len(extract_core(mg, b.rule)) / g.n))
        return c, mass, pred, emp

    for c, mass, pred, emp in _map(point, list(enumerate(grid)), threads):
        for n, rep, frac in emp:
            rows.add(c, mass, pred, n, rep, frac)
    summary = Table(["method", "threshold"], dig, seed)
    summary.add("scalar_oracle", kcore_scalar_threshold(k_core))
    if "bisect" in cfg:
        bs = cfg["bisect"]
        res = bisect_threshold(lambda c: _bundle(cfg, {key: c}).model, base.rule, base.Q0,
                               bs.get("lo", 0.5), bs.get("hi", 10.0),
                               lambda P: P.prob_of_label(0, 0, "1"), tol=bs.get("tol", 1e-4))
        summary.add("bisection", res.threshold)
    return {"threshold.csv": rows, "threshold_summary.csv": summary}, EXIT_OK


def run_contiguity(cfg, seed, threads):
    dig = digest(cfg)
    b = _bundle(cfg)
    t0 = cfg["t0"]
    hist_rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    # the census comparison needs a history law much sharper than the census noise
    Qhist = history_distribution(b.model, b.rule, t0, b.Q0, cfg.get("history_samples", 1_000_000), hist_rng)

    def cell(c):
        n, rep = c
        rng_g = _cell_rng(seed, n, rep, salt=1)
        rng_h = _cell_rng(seed, n, rep, salt=2)
        g = sample_graph(b, n, rng_g)
        mg = gh.wp_messaged_graph(g, b.rule, b.Q0, t0, rng_g)
        sizes = np.bincount(g.types, minlength=b.model.k)
        res = gh.build_ghat(b.model, b.rule, sizes, b.Q0, t0, rng_h, Qhist=Qhist)
        return n, rep, mg, res

    results = _map(cell, _cells(cfg), threads)
    ghat = Table(["n", "replicate", "edges", "deleted", "imbalance", "parity", "simplicity", "repaired",
                  "matching_ok"], dig, seed)
    comp = Table(["n", "type", "compilation", "freq_G", "freq_Ghat", "relative_gap"], dig, seed)
    A = b.alphabet
    S = len(A)
    for n in cfg["n"]:
        mine = [r for r in results if r[0] == n]
        for _, rep, mg, res in mine:
            d = res.deleted
            ghat.add(n, rep, res.mg.graph.num_edges, d.total, d.imbalance, d.parity, d.simplicity,
                     res.repaired, int(gh.check_matching(res)))
        f1 = gh.compilation_frequencies([r[2] for r in mine])
        f2 = gh.compilation_frequencies([r[3].mg for r in mine])
        for (t, key), gap in gh.compilation_gap(f1, f2, cfg["min_freq"]).items():
            label = " ".join(
                f"{A.format_history(gh.decode([code // S], S, t0 + 1)[0])}/{code % S}" for code in key)
            comp.add(n, t + 1, label or "empty", f1.get((t, key), 0.0), f2.get((t, key), 0.0), gap)
    census = gh.census_to_csv(results[-1][3].census, A) if results else ""
    out = {"contiguity_ghat.csv": ghat, "contiguity_compilations.csv": comp}
    qt = Table(["mu1", "mu2", "q"], dig, seed)
    for (m1, m2), q in gh.q_table(Qhist).items():
        qt.add(A.format_history(m1), A.format_history(m2), q)
    out["q_table.csv"] = qt
    ct = Table(["out_story", "in_story", "count"], dig, seed)
    for row in list(csv.reader(io.StringIO(census)))[1:]:
        ct.add(*row)
    out["census.csv"] = ct
    return out, EXIT_OK


def run_subcritical(cfg, seed, threads):
    dig = digest(cfg)
    grid = cfg.get("grid") or [None]
    key = cfg["grid_param"]
    conf = {k: cfg[k] for k in ("tol", "t_max", "samples", "pad_eps")}
    conf["history_samples"] = cfg.get("history_samples", 20_000)
    conf["t0"] = cfg.get("t0")

    def point(ic):
        i, c = ic
        b = _bundle(cfg, None if c is None else {key: c})
        rng = np.random.default_rng(np.random.SeedSequence([seed, 104729, i]))
        return c, cp.subcriticality_verdict(b.model, b.rule, b.Q0, conf, rng)

    verdicts = Table(["param", "rho", "stderr", "gamma", "certificate", "verdict", "pairs", "rho_prime"],
                     dig, seed)
    matrix = Table(["param", "produced", "source", "entry", "stderr"], dig, seed)
    code = EXIT_OK
    for c, rep in _map(point, list(enumerate(grid)), threads):
        row = rep.summary_row()
        verdicts.add("" if c is None else c, *row.values())
        for line in list(csv.reader(io.StringIO(rep.matrix.to_csv())))[1:]:
            matrix.add("" if c is None else c, *line)
        if rep.verdict == cp.INCONCLUSIVE:
            code = EXIT_INCONCLUSIVE
    return {"subcritical.csv": verdicts, "transition_matrix.csv": matrix}, code


def run_assumptions(cfg, seed, threads):
    dig = digest(cfg)
    b = _bundle(cfg)

    def cell(c):
        n, rep = c
        rng = _cell_rng(seed, n, rep)
        g = sample_graph(b, n, rng)
        model = b.model if b.model.k == 1 else None
        return n, rep, assumption_report(g, model, cfg["radius"], cfg["tree_samples"], cfg["t0"], rng)

    rows = Table(["n", "replicate", "metric", "type", "value"], dig, seed)
    for n, rep, rep_rows in _map(cell, _cells(cfg), threads):
        for metric, t, v in rep_rows:
            rows.add(n, rep, metric, t, v)
    return {"assumptions.csv": rows}, EXIT_OK


RUNNERS = {
    "converge": run_converge,
    "threshold": run_threshold,
    "contiguity": run_contiguity,
    "subcritical": run_subcritical,
    "assumptions": run_assumptions,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="warnprop", description="Warning Propagation experiments")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        s = sub.add_parser(verb)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", required=True, type=Path)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--threads", type=int, default=1)
    return p


def execute(verb: str, cfg_text: str, out: Path, seed: int = 0, threads: int = 1) -> int:
    cfg = {**DEFAULTS, **load_config(cfg_text)}
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    if threads < 1:
        raise ConfigError("threads must be positive")
    tables, code = RUNNERS[verb](cfg, seed, threads)
    out.mkdir(parents=True, exist_ok=True)
    for name, table in tables.items():
        (out / name).write_text(table.text())
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = args.config.read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return execute(args.verb, text, args.out, args.seed, args.threads)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ResourceError, FloatingPointError, MemoryError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
