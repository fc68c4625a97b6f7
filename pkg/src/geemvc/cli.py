"""Command-line front end: ``fit``, ``select`` and ``simulate``.

Unit data is a long CSV with ``cluster_id``, ``unit_index``, ``response`` and
covariate columns.  Pair covariates come from a CSV keyed by
``(cluster_id, j, k)`` (``j < k`` are ``unit_index`` values) or from a built-in
design: ``toeplitz-lags`` (columns ``lag1``, ``lag2``, ...) or
``intercept-only`` (column ``intercept``).

Formulas list columns joined by ``+``.  The mean and scale formulas get an
intercept unless they contain ``-1``; the correlation formula gets one only
when it lists ``1``.  The left-hand side of the mean formula names the
response column and falls back to ``response``.

Exit codes: 0 success, 2 configuration or input-format error, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import GEEError
from .fitter import FitOptions, fit
from .model import (
    COMPONENTS,
    Cluster,
    ClusterDataset,
    LinkSpec,
    ModelSpec,
    WorkingStructure,
    get_variance_function,
    n_pairs,
    pair_indices,
)
from .selection import STRATEGIES, penalty_name, select
from .simulate import (
    SCENARIOS,
    parameter_names,
    replicate_dataset,
    run_diagnostic_study,
    run_estimation_study,
    run_selection_study,
    scenario_config,
    toeplitz_design,
)
from .variance import block_diagnostics, sandwich

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
PAIR_DESIGNS = ("toeplitz-lags", "intercept-only")
COMMANDS = ("fit", "select", "simulate")


class ConfigError(ValueError):
    """Bad flags, config file or input file contents."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    command: str
    data: str | None = None
    pairs: str | None = None
    pair_design: str | None = None
    mean: str = "response~"
    scale: str = "~"
    corr: str | None = None
    mean_link: str = "identity"
    scale_link: str = "log"
    corr_link: str = "identity"
    variance: str = "constant-one"
    r2: str = "identity"
    r3: str = "identity"
    v3_mode: str = "delta-scaled"
    max_iter: int = 100
    tol: float = 1e-8
    criterion: str = "lic_joint"
    penalty: str = "log_n"
    symmetrize: bool = False
    scenario: str | None = None
    study: str | None = None
    replicates: int = 200
    n_clusters: int = 300
    seed: int = 0
    methods: list = field(default_factory=lambda: ["lic_joint", "lic_marginal", "qic_yf", "qic_lp"])
    penalties: list = field(default_factory=lambda: ["log_n", "two"])
    emit_data: str | None = None
    output: str | None = None
    format: str = "json"
    workers: int | None = None

    @property
    def model(self) -> ModelSpec:
        return ModelSpec(
            LinkSpec.from_names(self.mean_link, self.scale_link, self.corr_link),
            get_variance_function(self.variance),
            WorkingStructure(self.r2, self.r3, self.v3_mode),
        )


_FIELDS = {f.name for f in fields(RunConfig)}
_LIST_KEYS = ("methods", "penalties")


@dataclass(frozen=True)
class Formula:
    response: str | None
    terms: tuple[str, ...]
    intercept: bool

    @property
    def columns(self) -> list[str]:
        return (["intercept"] if self.intercept else []) + list(self.terms)


def parse_formula(text: str, auto_intercept: bool = True, where: str = "formula") -> Formula:
    """``"y~x1+x2"`` into response and terms; see the module docstring for intercepts."""
    if text is None:
        text = "~"
    if "~" in text:
        lhs, rhs = text.split("~", 1)
    else:
        lhs, rhs = "", text
    lhs = lhs.strip() or None
    intercept = auto_intercept
    terms = []
    rhs = rhs.replace("-1", "+-1").replace(" ", "")
    for tok in filter(None, rhs.split("+")):
        if tok == "-1" or tok == "0":
            intercept = False
        elif tok == "1":
            intercept = True
        elif tok.isidentifier() or all(c.isalnum() or c in "_." for c in tok):
            if tok in terms:
                raise ConfigError(f"{where}: term {tok!r} repeated")
            terms.append(tok)
        else:
            raise ConfigError(f"{where}: cannot parse term {tok!r}")
    if not intercept and not terms:
        raise ConfigError(f"{where}: no columns")
    return Formula(lhs, tuple(terms), intercept)


def _norm_key(key: str) -> str:
    return key.replace("-", "_")


def _canon(value: str) -> str:
    return value.lower().replace("-", "_")


def _load_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    out = {}
    for key, value in raw.items():
        name = _norm_key(key)
        if name not in _FIELDS:
            raise ConfigError(f"{path}: unknown field {key!r}")
        out[name] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geemvc",
        description="Joint mean, scale and correlation regression for clustered data.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with default values for any flag")
        p.add_argument("--output", "-o", help="output file (default: stdout)")
        p.add_argument("--format", choices=("json", "csv"))
        p.add_argument("--workers", type=int, help="process count (default: GEEMVC_THREADS or CPUs)")

    def model_flags(p):
        p.add_argument("--data", help="unit-level CSV")
        p.add_argument("--pairs", help="pair-level CSV keyed by cluster_id, j, k")
        p.add_argument("--pair-design", choices=PAIR_DESIGNS, help="built-in pair covariates")
        p.add_argument("--mean", help="mean formula, e.g. y~x1+x2")
        p.add_argument("--scale", help="scale formula, e.g. ~z1")
        p.add_argument("--corr", help="correlation formula, e.g. ~lag1+lag2")
        p.add_argument("--mean-link", choices=("identity", "log"))
        p.add_argument("--scale-link", choices=("log", "identity"))
        p.add_argument("--corr-link", choices=("identity", "fisher-z"))
        p.add_argument("--variance", choices=("constant-one", "tanh-shift"))
        p.add_argument("--r2", help="working R2: identity, cs:u or ar1:u")
        p.add_argument("--r3", help="working R3: identity, cs:u or ar1:u")
        p.add_argument("--v3-mode", choices=("delta-scaled", "plain-identity"))
        p.add_argument("--max-iter", type=int)
        p.add_argument("--tol", type=float)

    p_fit = sub.add_parser("fit", help="fit the model to a dataset")
    common(p_fit)
    model_flags(p_fit)

    p_sel = sub.add_parser("select", help="choose covariates for each component")
    common(p_sel)
    model_flags(p_sel)
    p_sel.add_argument("--criterion", help=f"one of {', '.join(s.replace('_', '-') for s in STRATEGIES)}")
    p_sel.add_argument("--penalty", help="bic (log n) or aic (2)")
    p_sel.add_argument("--symmetrize", action="store_true", default=None,
                       help="use the symmetric part of the slope matrix in the LIC loss")

    p_sim = sub.add_parser("simulate", help="run a Monte-Carlo scenario study")
    common(p_sim)
    p_sim.add_argument("--scenario", choices=sorted(SCENARIOS))
    p_sim.add_argument("--study", choices=("estimation", "selection", "diagnostic"))
    p_sim.add_argument("--replicates", type=int)
    p_sim.add_argument("--n-clusters", type=int)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--methods", help="comma-separated selection methods")
    p_sim.add_argument("--penalties", help="comma-separated penalties")
    p_sim.add_argument("--emit-data", metavar="DIR", help="also write replicate 0 as CSV files")
    return parser


def parse_config(argv=None, parser: argparse.ArgumentParser | None = None) -> RunConfig:
    """Flags over config-file values over defaults, then validated."""
    parser = parser or build_parser()
    ns = vars(parser.parse_args(argv))
    ns.pop("verbose", None)
    command = ns.pop("command")
    values = _load_config_file(ns.pop("config")) if ns.get("config") else {}
    values.pop("command", None)
    for key, value in ns.items():
        if value is not None:
            values[key] = value
    for key in _LIST_KEYS:
        if isinstance(values.get(key), str):
            values[key] = [v.strip() for v in values[key].split(",") if v.strip()]
    cfg = RunConfig(command=command, **values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.command in ("fit", "select"):
        if not cfg.data:
            raise ConfigError("data path required")
        if cfg.pairs and cfg.pair_design:
            raise ConfigError("conflicting flags: --pairs and --pair-design")
        if cfg.pair_design and cfg.pair_design not in PAIR_DESIGNS:
            raise ConfigError(f"pair_design: unknown design {cfg.pair_design!r}")
        parse_formula(cfg.mean, True, "mean")
        parse_formula(cfg.scale, True, "scale")
        if cfg.corr is not None:
            parse_formula(cfg.corr, False, "corr")
        try:
            cfg.model
            FitOptions(cfg.max_iter, cfg.tol)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if cfg.command == "select":
        cfg.criterion = _canon(cfg.criterion)
        if cfg.criterion not in STRATEGIES:
            raise ConfigError(f"criterion: unknown {cfg.criterion!r}")
        try:
            cfg.penalty = penalty_name(cfg.penalty)
        except ValueError as exc:
            raise ConfigError(f"penalty: {exc}") from None
        if cfg.penalty not in ("log_n", "two"):
            raise ConfigError(f"penalty: unknown {cfg.penalty!r}")
    if cfg.command == "simulate":
        if not cfg.scenario:
            raise ConfigError("scenario required")
        if cfg.scenario not in SCENARIOS:
            raise ConfigError(f"scenario: unknown {cfg.scenario!r}")
        if cfg.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if cfg.n_clusters < 1:
            raise ConfigError("n_clusters must be at least 1")
        cfg.methods = [_canon(m) for m in cfg.methods]
        bad = [m for m in cfg.methods if m not in STRATEGIES]
        if bad:
            raise ConfigError(f"methods: unknown {bad}")
        cfg.penalties = [penalty_name(p) for p in cfg.penalties]
        bad = [p for p in cfg.penalties if p not in ("log_n", "two")]
        if bad:
            raise ConfigError(f"penalties: unknown {bad}")
        if cfg.study is None:
            cfg.study = {"est": "estimation", "sel": "selection"}.get(cfg.scenario[:3], "diagnostic")
    if cfg.format not in ("json", "csv"):
        raise ConfigError(f"format: unknown {cfg.format!r}")


# ---------------------------------------------------------------------------
# data files
# ---------------------------------------------------------------------------


def _read_csv(path: str) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise ConfigError(f"{path}: empty file") from None
            rows = [(reader.line_num, row) for row in reader if row and any(c.strip() for c in row)]
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    if len(set(header)) != len(header):
        raise ConfigError(f"{path}:1: duplicate column names")
    for line, row in rows:
        if len(row) != len(header):
            raise ConfigError(f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
    return header, rows


def _column(path, header, name, what="column") -> int:
    try:
        return header.index(name)
    except ValueError:
        raise ConfigError(f"{path}:1: unknown {what} {name!r}") from None


def _number(path, line, name, text, integer=False):
    try:
        value = int(text) if integer else float(text)
    except ValueError:
        kind = "integer" if integer else "number"
        raise ConfigError(f"{path}:{line}: {name} is not a {kind}: {text!r}") from None
    if not integer and not math.isfinite(value):
        raise ConfigError(f"{path}:{line}: {name} is not finite")
    return value


def _design(path, header, rows, formula: Formula, line_nos) -> np.ndarray:
    cols = [_column(path, header, t) for t in formula.terms]
    out = np.empty((len(rows), len(formula.columns)))
    for i, (row, line) in enumerate(zip(rows, line_nos)):
        vals = [_number(path, line, header[c], row[c]) for c in cols]
        out[i] = ([1.0] if formula.intercept else []) + vals
    return out


def load_dataset(cfg: RunConfig) -> tuple[ClusterDataset, dict[str, list[str]]]:
    """Read the unit and pair files named in ``cfg``; also return column names."""
    path = cfg.data
    header, rows = _read_csv(path)
    mean_f = parse_formula(cfg.mean, True, "mean")
    scale_f = parse_formula(cfg.scale, True, "scale")
    for req in ("cluster_id", "unit_index"):
        _column(path, header, req, "required column")
    response = mean_f.response if mean_f.response in header else "response"
    _column(path, header, response, "response column")
    cid_col, idx_col, y_col = (header.index(c) for c in ("cluster_id", "unit_index", response))

    units: dict[int, list] = {}
    for line, row in rows:
        cid = _number(path, line, "cluster_id", row[cid_col], integer=True)
        idx = _number(path, line, "unit_index", row[idx_col], integer=True)
        units.setdefault(cid, []).append((idx, line, row))
    if not units:
        raise ConfigError(f"{path}: no data rows")

    pair_table = None
    if cfg.pairs:
        pair_table = _read_pairs(cfg.pairs)
        pair_header = pair_table[0]
    else:
        design = cfg.pair_design or "toeplitz-lags"
        max_m = max(len(v) for v in units.values())
        pair_header = (
            [f"lag{i}" for i in range(1, max(max_m, 2))] if design == "toeplitz-lags" else ["intercept"]
        )
    if cfg.corr is None:
        corr_f = Formula(None, tuple(h for h in pair_header if h != "intercept"), "intercept" in pair_header)
    else:
        corr_f = parse_formula(cfg.corr, False, "corr")
    corr_src = "pairs file" if cfg.pairs else "pair design"
    for t in corr_f.terms:
        if t not in pair_header:
            raise ConfigError(f"{cfg.pairs or cfg.pair_design or 'toeplitz-lags'}: unknown column {t!r} in {corr_src}")

    clusters = []
    for cid in sorted(units):
        entries = sorted(units[cid], key=lambda e: e[0])
        idxs = [e[0] for e in entries]
        if len(set(idxs)) != len(idxs):
            raise ConfigError(f"{path}:{entries[0][1]}: repeated unit_index in cluster {cid}")
        lines = [e[1] for e in entries]
        rws = [e[2] for e in entries]
        y = np.array([_number(path, ln, response, r[y_col]) for ln, r in zip(lines, rws)])
        X1 = _design(path, header, rws, mean_f, lines)
        X2 = _design(path, header, rws, scale_f, lines)
        X3 = _pair_design_rows(cfg, pair_table, corr_f, cid, idxs)
        clusters.append(Cluster(cid, y, X1, X2, X3))
    names = {"mean": mean_f.columns, "scale": scale_f.columns, "corr": corr_f.columns}
    return ClusterDataset(tuple(clusters)), names


def _read_pairs(path: str):
    header, rows = _read_csv(path)
    keys = [_column(path, header, c, "required column") for c in ("cluster_id", "j", "k")]
    table: dict[tuple[int, int, int], tuple[int, list[str]]] = {}
    for line, row in rows:
        key = tuple(_number(path, line, header[c], row[c], integer=True) for c in keys)
        if key[1] >= key[2]:
            raise ConfigError(f"{path}:{line}: pairs need j < k")
        if key in table:
            raise ConfigError(f"{path}:{line}: duplicate pair {key}")
        table[key] = (line, row)
    return header, table, path


def _pair_design_rows(cfg, pair_table, corr_f: Formula, cid: int, idxs: list[int]) -> np.ndarray:
    m = len(idxs)
    out = np.zeros((n_pairs(m), len(corr_f.columns)))
    if m < 2:
        return out
    start = 1 if corr_f.intercept else 0
    if corr_f.intercept:
        out[:, 0] = 1.0
    if pair_table is None:
        if corr_f.terms:
            lags = toeplitz_design(m, max(m - 1, 1))
            for c, t in enumerate(corr_f.terms):
                if t == "intercept":
                    out[:, start + c] = 1.0
                else:
                    lag = int(t[3:])
                    if lag <= m - 1:
                        out[:, start + c] = lags[:, lag - 1]
        return out
    header, table, path = pair_table
    cols = [header.index(t) for t in corr_f.terms]
    jj, kk = pair_indices(m)
    for row_i, (a, b) in enumerate(zip(jj, kk)):
        key = (cid, idxs[a], idxs[b])
        if key not in table:
            raise ConfigError(f"{path}: missing pair {key}")
        line, row = table[key]
        for c, col in enumerate(cols):
            out[row_i, start + c] = _number(path, line, header[col], row[col])
    return out


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _json_value(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json_value(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(isinstance(v, (int, float, np.number, bool)) or v is None for v in seq):
            return "[" + ", ".join(_json_value(v, indent, level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + _json_value(v, indent, level + 1) for v in seq) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return "%.17g" % x if math.isfinite(x) else "null"
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def dumps_json(obj) -> str:
    """JSON with every float written to 17 significant digits."""
    return _json_value(obj, 2, 0) + "\n"


def _csv_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "%.6g" % float(v)
    return str(v)


def dumps_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    header = list(rows[0])
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(h, "")) for h in header))
    return "\n".join(lines) + "\n"


def _write(cfg: RunConfig, payload: dict, rows: list[dict]) -> None:
    text = dumps_json(payload) if cfg.format == "json" else dumps_csv(rows)
    if cfg.output:
        try:
            Path(cfg.output).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {cfg.output}: {exc.strerror}") from exc
    else:
        sys.stdout.write(text)


def _model_dict(cfg: RunConfig) -> dict:
    m = cfg.model
    return dict(links=m.links.names(), variance=m.variance.kind, working=m.working.describe())


def _coefficient_rows(names, theta, sw) -> list[dict]:
    rows = []
    se_yf, se_lp = sw.se_yf, sw.se_lp
    est = theta.stacked
    i = 0
    for comp in COMPONENTS:
        for col in names[comp]:
            rows.append(dict(component=comp, column=col, estimate=est[i], se_yf=se_yf[i], se_lp=se_lp[i]))
            i += 1
    return rows


def _diagnostics_dict(diag) -> dict:
    return dict(
        norm_b=diag.norm_b,
        norm_d=diag.norm_d,
        norm_e=diag.norm_e,
        scaled_e=diag.scaled_e,
        rho_mean=diag.rho_mean,
        rho_histogram=[
            dict(lower=a, upper=b, count=int(c))
            for a, b, c in zip(diag.rho_edges[:-1], diag.rho_edges[1:], diag.rho_counts)
        ],
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def run_fit(cfg: RunConfig) -> int:
    data, names = load_dataset(cfg)
    model = cfg.model
    res = fit(data, model, FitOptions(cfg.max_iter, cfg.tol))
    sw = sandwich(data, res.theta, model)
    rows = _coefficient_rows(names, res.theta, sw)
    payload = dict(
        command="fit",
        converged=res.converged,
        iterations=res.iterations,
        n_clusters=data.n,
        n_units=data.n_units,
        model=_model_dict(cfg),
        coefficients=rows,
        u_max=list(res.u_norms),
        clamp_count=res.clamp_count,
        pd_repair_count=res.pd_repair_count,
        diagnostics=_diagnostics_dict(block_diagnostics(data, res.theta, model)),
    )
    _write(cfg, payload, rows)
    return EXIT_OK if res.converged else EXIT_NUMERIC


def intercept_positions(names: dict) -> dict[str, tuple[int, ...]]:
    """Columns kept in every candidate: each component's intercept, if it has one."""
    return {c: (cols.index("intercept"),) if "intercept" in cols else () for c, cols in names.items()}


def run_select(cfg: RunConfig) -> int:
    data, names = load_dataset(cfg)
    model = cfg.model
    opts = FitOptions(cfg.max_iter, cfg.tol)
    result = select(data, model, cfg.criterion, cfg.penalty, forced=intercept_positions(names),
                    symmetrize=cfg.symmetrize, opts=opts, workers=cfg.workers)
    active = result.chosen.active_columns(names)
    criteria = []
    for v in result.criteria:
        entry = dict(component=v.component or "all")
        entry.update(v.support.active_columns(names))
        entry.update(loss=v.loss, penalty=v.penalty, total=v.total, feasible=v.feasible)
        criteria.append(entry)
    payload = dict(
        command="select",
        criterion=result.strategy,
        penalty=result.penalty,
        penalty_scale=result.penalty_scale,
        n_clusters=data.n,
        model=_model_dict(cfg),
        chosen=active,
        criteria=criteria,
    )
    rows = []
    if result.refit is not None and result.refit_sandwich is not None:
        sub_names = {c: active[c] for c in COMPONENTS}
        refit_rows = _coefficient_rows(sub_names, result.refit.theta, result.refit_sandwich)
        payload["refit"] = dict(converged=result.refit.converged, coefficients=refit_rows)
        rows = refit_rows
    _write(cfg, payload, rows)
    return EXIT_OK


def emit_dataset(data: ClusterDataset, directory: str, cfg: RunConfig, links: dict, variance: str) -> None:
    """Write a dataset as unit and pair CSVs plus a config that refits it."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    p, r, q = data.dims
    xs = [f"x{i}" for i in range(1, p)]
    zs = [f"z{i}" for i in range(1, r)]
    hs = [f"h{i}" for i in range(1, q + 1)]
    with open(out / "units.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "unit_index", "response", *xs, *zs])
        for c in data.clusters:
            for j in range(c.m):
                w.writerow([c.id, j + 1, repr(float(c.y[j])),
                            *(repr(float(v)) for v in c.X1[j, 1:]),
                            *(repr(float(v)) for v in c.X2[j, 1:])])
    with open(out / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "j", "k", *hs])
        for c in data.clusters:
            jj, kk = pair_indices(c.m)
            for row, (a, b) in enumerate(zip(jj, kk)):
                w.writerow([c.id, a + 1, b + 1, *(repr(float(v)) for v in c.X3[row])])
    fit_cfg = dict(
        data=str(out / "units.csv"),
        pairs=str(out / "pairs.csv"),
        mean="response~" + "+".join(xs),
        scale="~" + "+".join(zs),
        corr="~" + "+".join(hs),
        mean_link=links["mean"],
        scale_link=links["scale"],
        corr_link=links["corr"],
        variance=variance,
    )
    (out / "config.json").write_text(dumps_json(fit_cfg))


def run_simulate(cfg: RunConfig) -> int:
    scen = scenario_config(cfg.scenario, replicates=cfg.replicates, n_clusters=cfg.n_clusters, seed=cfg.seed)
    header = dict(
        command="simulate",
        scenario=scen.scenario,
        study=cfg.study,
        seed=scen.seed,
        replicates=scen.replicates,
        n_clusters=scen.n_clusters,
        truth=dict(zip(parameter_names(*scen.true_theta.dims), scen.true_theta.stacked)),
    )
    if cfg.study == "estimation":
        summary = run_estimation_study(scen, workers=cfg.workers)
        payload = {**header, **summary.to_dict()}
        rows = summary.estimation_rows()
    elif cfg.study == "selection":
        summary = run_selection_study(scen, cfg.methods, cfg.penalties, workers=cfg.workers)
        payload = {**header, **summary.to_dict()}
        rows = summary.selection_rows()
    else:
        diag = run_diagnostic_study(scen, workers=cfg.workers)
        payload = {**header, **diag.to_dict()}
        rows = payload["rho_histogram"]
    if cfg.emit_data:
        model = scen.model
        emit_dataset(replicate_dataset(scen, 0), cfg.emit_data, cfg, model.links.names(), model.variance.kind)
    _write(cfg, payload, rows)
    return EXIT_OK


def run(cfg: RunConfig) -> int:
    handler = {"fit": run_fit, "select": run_select, "simulate": run_simulate}[cfg.command]
    return handler(cfg)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(
        level=logging.INFO if ("-v" in argv or "--verbose" in argv) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = parse_config(argv, parser)
        return run(cfg)
    except ConfigError as exc:
        print(f"geemvc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GEEError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"geemvc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"geemvc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"geemvc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
