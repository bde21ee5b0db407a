"""Experiment pipeline shared by the command line and the acceptance suite.

One run directory holds one environment configuration::

    config.toml
    data/seed<s>/{negative,unlabeled,holdout_negative,holdout_unlabeled}.*
    reference.json
    runs/<method>/seed<s>/{cost.ckpt,cost_curve.csv,policy.ckpt,policy_curve.csv,
                            eval.json,record.json}
    summary.csv  exact.csv  sweep.csv  sweep_summary.csv  report/
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cmdp import Policy, TabularCmdp, exact_policy_eval, solve_constrained, solve_unconstrained
from .config import ExperimentConfig, load_config
from .data import (
    NON_PREFERRED,
    PREFERRED,
    TrajectoryDataset,
    assemble_datasets,
    class_summary,
    config_hash,
    generate_raw_pool,
    label_pool,
    load_dataset,
    save_dataset,
)
from .errors import SafeMilError, TrainingError
from .evaluation import (
    CSV_COLUMNS,
    CVAR_LEVELS,
    Baselines,
    EvalReport,
    SeedResult,
    compute_baselines,
    evaluate_policy,
    format_value,
    normalize,
    rows_to_csv,
)
from .mil import train_cost_model
from .nn import load_checkpoint, save_checkpoint
from .policy import learn_policy

log = logging.getLogger(__name__)

COST_METHODS = ("safemil-trajectory", "safemil-transition", "safemil-threshold")
EXACT_COLUMNS = ("method", "env", "seed", "exact_return", "exact_cost", "exact_norm_return")
SWEEP_COLUMNS = ("sweep", "K", "H") + CSV_COLUMNS + ("status",)
SWEEP_SUMMARY_COLUMNS = ("sweep", "K", "H", "method", "env", "seeds", "norm_return",
                         "norm_return_lo", "norm_return_hi", "norm_cost", "norm_cost_lo",
                         "norm_cost_hi")


# ---------------------------------------------------------------------------
# data


@dataclass
class Datasets:
    d_n: TrajectoryDataset
    d_u: TrajectoryDataset
    holdout: tuple
    summary: dict = field(default_factory=dict)

    NAMES = ("negative", "unlabeled", "holdout_negative", "holdout_unlabeled")

    def all(self) -> tuple:
        return (self.d_n, self.d_u) + tuple(self.holdout)

    def save(self, directory) -> dict:
        directory = Path(directory)
        paths = {}
        for name, ds in zip(self.NAMES, self.all()):
            paths[name] = save_dataset(ds, directory / f"{name}.jsonl")
        (directory / "summary.json").write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n")
        return paths

    @classmethod
    def load(cls, directory) -> "Datasets":
        directory = Path(directory)
        d_n, d_u, h_n, h_u = (load_dataset(directory / f"{n}.jsonl", with_annotations=True)
                              for n in cls.NAMES)
        summary = json.loads((directory / "summary.json").read_text())
        return cls(d_n, d_u, (h_n, h_u), summary)


def expert_policies(env: TabularCmdp, scale: float) -> tuple[Policy, Policy]:
    """(safe, risky): constrained optimum at a tightened threshold, reward optimum."""
    return solve_constrained(env.with_threshold(env.threshold * scale)), solve_unconstrained(env)


def _seed_ints(*key) -> list:
    return [int(x) for x in np.random.SeedSequence(list(key)).generate_state(4)]


def generate_datasets(env: TabularCmdp, config: ExperimentConfig, seed: int) -> Datasets:
    """Raw pool, labelling, then disjoint training and held-out D^N / D^U."""
    spec = config.data
    safe, risky = expert_policies(env, spec.safe_threshold_scale)
    s_expert, s_random, s_assemble, s_holdout = _seed_ints(spec.seed, seed)
    pool = generate_raw_pool(env, safe, risky, spec.n_expert, spec.epsilon, seed=s_expert)
    if spec.n_random:
        uniform = Policy.uniform(env)
        pool += generate_raw_pool(env, uniform, uniform, spec.n_random, 0.0, seed=s_random)
    preferred, non_preferred, _ = label_pool(pool, spec.reward_quantile, spec.cost_hi, spec.cost_lo)
    provenance = config_hash({"env": asdict(config.env), "data": asdict(spec), "seed": seed})
    kw = dict(n_unlabeled=spec.n_unlabeled, n_negative=spec.n_negative, alpha=spec.alpha,
              num_states=env.num_states, num_actions=env.num_actions, provenance=provenance)
    d_n, d_u = assemble_datasets(preferred, non_preferred, seed=s_assemble, **kw)
    used = {id(t) for t in d_n} | {id(t) for t in d_u}
    # leftovers of the labelled classes form the held-out datasets
    rest_p = [t for t in preferred if id(t) not in used]
    rest_n = [t for t in non_preferred if id(t) not in used]
    holdout = assemble_datasets(rest_p, rest_n, seed=s_holdout, **kw)
    summary = {
        "env": env.name,
        "seed": seed,
        "provenance": provenance,
        "alpha": d_u.alpha,
        "counts": {"negative": len(d_n), "unlabeled": len(d_u)},
        "classes": {PREFERRED: class_summary(preferred), NON_PREFERRED: class_summary(non_preferred)},
    }
    return Datasets(d_n, d_u, holdout, summary)


# ---------------------------------------------------------------------------
# reference


@dataclass
class Reference:
    policy: Policy
    baselines: Baselines
    exact: Baselines

    def to_dict(self) -> dict:
        return {"baselines": asdict(self.baselines), "exact": asdict(self.exact),
                "policy": self.policy.probs.tolist()}


def solve_reference(env: TabularCmdp, config: ExperimentConfig) -> Reference:
    ref = solve_constrained(env)
    ev = config.eval
    base = compute_baselines(env, ref, ev.episodes, ev.eval_seed, ev.baseline)
    exact = compute_baselines(env, ref, mode="exact")
    return Reference(ref, base, exact)


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class MethodResult:
    method: str
    seed: int
    policy: Policy
    policy_curve: list
    cost_model: object = None
    cost_curve: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


class CostCache:
    """Cost models keyed by (seed, K, H), trained once per process."""

    def __init__(self):
        self.models = {}

    def get(self, config: ExperimentConfig, data: Datasets, seed: int, K=None, H=None):
        cfg = config.cost_config(seed, K, H)
        key = (seed, cfg.K, cfg.H)
        if key not in self.models:
            t0 = time.perf_counter()
            try:
                model, curve = train_cost_model(data.d_n, data.d_u, cfg, holdout=data.holdout)
            except TrainingError as exc:
                raise StageError("cost", exc) from exc
            self.models[key] = (model, curve, time.perf_counter() - t0)
        return self.models[key]


class StageError(SafeMilError):
    """A training failure tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


def train_method(config: ExperimentConfig, data: Datasets, method: str, seed: int,
                 cache: CostCache | None = None, K=None, H=None) -> MethodResult:
    cache = cache or CostCache()
    result = MethodResult(method, seed, None, [])
    cost_model = None
    if method in COST_METHODS:
        cost_model, result.cost_curve, result.timings["cost"] = cache.get(config, data, seed, K, H)
        result.cost_model = cost_model
    t0 = time.perf_counter()
    try:
        result.policy, result.policy_curve = learn_policy(
            config.policy_config(method, seed), data.d_u, data.d_n, cost_model)
    except TrainingError as exc:
        raise StageError("policy", exc) from exc
    result.timings["policy"] = time.perf_counter() - t0
    return result


def evaluate_seed(env: TabularCmdp, config: ExperimentConfig, policy: Policy, seed: int) -> SeedResult:
    stats = evaluate_policy(env, policy, config.eval.episodes, config.eval.eval_seed)
    return SeedResult(seed, stats.returns, stats.costs)


def make_report(config: ExperimentConfig, method: str, env_name: str, seeds: list,
                baselines: Baselines) -> EvalReport:
    ev = config.eval
    return EvalReport(method, env_name, seeds, baselines, ev.resamples, ev.level, ev.eval_seed)


def exact_metrics(env: TabularCmdp, policy: Policy, reference: Reference) -> dict:
    ret, cost = exact_policy_eval(env, policy, discounted=True)
    ret_u, _ = exact_policy_eval(env, policy, discounted=False)
    ex = reference.exact
    norm, _ = normalize(ret_u, 0.0, (ex.ref_return, ex.ref_cost), ex.random_return)
    return {"exact_return": ret, "exact_cost": cost, "exact_norm_return": norm}


# ---------------------------------------------------------------------------
# persistence


@dataclass
class RunRecord:
    method: str
    env: str
    seed: int
    config: dict
    provenance: str
    artifacts: dict
    metrics: dict = field(default_factory=dict)
    exact: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    status: str = "ok"
    stage: str | None = None
    error: str | None = None

    def write(self, path) -> None:
        path = Path(path)
        missing = [p for p in self.artifacts.values() if not (path.parent / p).exists()]
        if missing:
            raise FileNotFoundError(f"run record references missing artifacts {missing}")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def write_curve(path, rows: list, columns: tuple) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


def run_dir(out, method: str, seed: int) -> Path:
    return Path(out) / "runs" / method / f"seed{seed}"


def save_method(out, config: ExperimentConfig, env: TabularCmdp, result: MethodResult,
                provenance: str) -> RunRecord:
    d = run_dir(out, result.method, result.seed)
    d.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    if result.cost_model is not None:
        save_checkpoint(d / "cost.ckpt", result.cost_model, extra={"kind": "cost"})
        write_curve(d / "cost_curve.csv", result.cost_curve, ("step", "loss", "holdout_pair_accuracy"))
        artifacts.update(cost_checkpoint="cost.ckpt", cost_curve="cost_curve.csv")
    save_checkpoint(d / "policy.ckpt", result.policy.model,
                    step=config.policy.steps, extra={"kind": "policy", "method": result.method})
    write_curve(d / "policy_curve.csv", result.policy_curve, ("step", "objective"))
    artifacts.update(policy_checkpoint="policy.ckpt", policy_curve="policy_curve.csv")
    record = RunRecord(result.method, env.name, result.seed, config.to_dict(), provenance,
                       artifacts, timings=result.timings)
    record.write(d / "record.json")
    return record


def load_policy(out, method: str, seed: int, env: TabularCmdp) -> Policy:
    model, _ = load_checkpoint(run_dir(out, method, seed) / "policy.ckpt")
    policy = Policy("mlp", model=model)
    policy.table(env)  # shape check against the environment
    return policy


def failure_record(out, config, env, method, seed, exc: StageError) -> RunRecord:
    d = run_dir(out, method, seed)
    d.mkdir(parents=True, exist_ok=True)
    rec = RunRecord(method, env.name, seed, config.to_dict(), "", {}, status="failed",
                    stage=exc.stage, error=str(exc.cause))
    rec.write(d / "record.json")
    return rec


# ---------------------------------------------------------------------------
# suite, sweep, report


class Workspace:
    """Environment, reference and per-seed datasets for one configuration."""

    def __init__(self, config: ExperimentConfig, out=None):
        self.config = config
        self.out = Path(out) if out is not None else None
        self.env = config.env.build()
        self._reference = None
        self._data = {}
        self.costs = CostCache()
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            config.save(self.out / "config.toml")

    @property
    def reference(self) -> Reference:
        if self._reference is None:
            self._reference = solve_reference(self.env, self.config)
            if self.out is not None:
                (self.out / "reference.json").write_text(
                    json.dumps(self._reference.to_dict(), sort_keys=True) + "\n")
        return self._reference

    def data(self, seed: int) -> Datasets:
        if seed not in self._data:
            directory = self.out / "data" / f"seed{seed}" if self.out is not None else None
            if directory is not None and (directory / "summary.json").exists():
                self._data[seed] = Datasets.load(directory)
            else:
                self._data[seed] = generate_datasets(self.env, self.config, seed)
                if directory is not None:
                    self._data[seed].save(directory)
        return self._data[seed]


@dataclass
class SuiteResult:
    rows: list
    exact_rows: list
    reports: dict
    records: list

    def summary_csv(self) -> str:
        return rows_to_csv(self.rows)

    def exact_csv(self) -> str:
        return rows_to_csv(self.exact_rows, columns=EXACT_COLUMNS)


def run_suite(config: ExperimentConfig, out=None, methods=None, seeds=None,
              workspace: Workspace | None = None) -> SuiteResult:
    """Train and evaluate every (method, seed); write artifacts when ``out`` is set."""
    ws = workspace or Workspace(config, out)
    methods = list(methods or config.methods)
    seeds = list(config.eval.seeds if seeds is None else seeds)
    ref = ws.reference
    rows, exact_rows, records, reports = [], [], [], {}
    for method in methods:
        per_seed = []
        for seed in seeds:
            data = ws.data(seed)
            try:
                result = train_method(config, data, method, seed, ws.costs)
            except StageError as exc:
                log.error("%s seed %d failed: %s", method, seed, exc)
                if ws.out is not None:
                    records.append(failure_record(ws.out, config, ws.env, method, seed, exc))
                continue
            seed_res = evaluate_seed(ws.env, config, result.policy, seed)
            report = make_report(config, method, ws.env.name, [seed_res], ref.baselines)
            exact = exact_metrics(ws.env, result.policy, ref)
            per_seed.append(seed_res)
            rows.extend(report.rows())
            exact_rows.append({"method": method, "env": ws.env.name, "seed": seed, **exact})
            if ws.out is not None:
                rec = save_method(ws.out, config, ws.env, result, data.summary["provenance"])
                d = run_dir(ws.out, method, seed)
                (d / "eval.json").write_text(report.to_json() + "\n")
                rec.artifacts["eval"] = "eval.json"
                rec.metrics = report.metrics
                rec.exact = exact
                rec.write(d / "record.json")
                records.append(rec)
        if per_seed:
            reports[method] = make_report(config, method, ws.env.name, per_seed, ref.baselines)
    result = SuiteResult(rows, exact_rows, reports, records)
    if ws.out is not None:
        (ws.out / "summary.csv").write_text(result.summary_csv())
        (ws.out / "exact.csv").write_text(result.exact_csv())
    return result


def sweep_cells(config: ExperimentConfig) -> list:
    """(sweep, K, H) cells: K varies at the configured H, H at the configured K."""
    cells = [("K", int(k), config.cost.H) for k in config.sweep.K]
    cells += [("H", config.cost.K, int(h)) for h in config.sweep.H]
    return cells


@dataclass
class SweepResult:
    rows: list
    summary: list
    reports: dict

    def csv(self) -> str:
        return rows_to_csv(self.rows, columns=SWEEP_COLUMNS)

    def summary_csv(self) -> str:
        return rows_to_csv(self.summary, columns=SWEEP_SUMMARY_COLUMNS)

    def report(self, sweep: str, K: int, H: int, method: str) -> EvalReport:
        return self.reports[(sweep, K, H, method)]


def run_sweep(config: ExperimentConfig, out=None, workspace: Workspace | None = None,
              cells=None, seeds=None) -> SweepResult:
    """Bag-size and segment-length sensitivity; a failed cell does not stop the sweep."""
    ws = workspace or Workspace(config, out)
    ref = ws.reference
    seeds = list(config.eval.seeds if seeds is None else seeds)
    rows, summary, reports = [], [], {}
    for sweep, K, H in cells or sweep_cells(config):
        for method in config.sweep.methods:
            per_seed = []
            for seed in seeds:
                base = {"sweep": sweep, "K": K, "H": H}
                try:
                    result = train_method(config, ws.data(seed), method, seed, ws.costs, K, H)
                except StageError as exc:
                    log.error("sweep cell %s K=%d H=%d %s seed %d failed: %s",
                              sweep, K, H, method, seed, exc)
                    nan_row = {c: float("nan") for c in CSV_COLUMNS}
                    nan_row.update(method=method, env=ws.env.name, seed=seed)
                    rows.append({**base, **nan_row, "status": f"failed:{exc.stage}"})
                    continue
                seed_res = evaluate_seed(ws.env, config, result.policy, seed)
                per_seed.append(seed_res)
                row = make_report(config, method, ws.env.name, [seed_res], ref.baselines).rows()[0]
                rows.append({**base, **row, "status": "ok"})
            if not per_seed:
                continue
            rep = make_report(config, method, ws.env.name, per_seed, ref.baselines)
            reports[(sweep, K, H, method)] = rep
            m, ci = rep.metrics, rep.metrics["ci"]
            summary.append({"sweep": sweep, "K": K, "H": H, "method": method, "env": ws.env.name,
                            "seeds": len(per_seed),
                            "norm_return": m["norm_return"], "norm_return_lo": ci["norm_return"][0],
                            "norm_return_hi": ci["norm_return"][1], "norm_cost": m["norm_cost"],
                            "norm_cost_lo": ci["norm_cost"][0], "norm_cost_hi": ci["norm_cost"][1]})
    result = SweepResult(rows, summary, reports)
    if ws.out is not None:
        (ws.out / "sweep.csv").write_text(result.csv())
        (ws.out / "sweep_summary.csv").write_text(result.summary_csv())
    return result


TABLE_COLUMNS = ("method", "seeds", "return", "return_lo", "return_hi", "cost", "cost_lo",
                 "cost_hi", "norm_return", "norm_return_lo", "norm_return_hi", "norm_cost",
                 "norm_cost_lo", "norm_cost_hi") + tuple(
    f"cvar{k}{s}" for k in CVAR_LEVELS for s in ("", "_lo", "_hi"))
CURVE_COLUMNS = ("method", "k", "cvar", "cvar_lo", "cvar_hi")


def build_report(out) -> dict:
    """Aggregate per-seed evaluations under ``out`` into tables.

    Returns {"tables": {env: rows}, "curves": {env: rows}, "missing": [...]}
    and writes them to ``out/report``.  Missing runs are listed, not fatal.
    """
    out = Path(out)
    groups = {}
    for path in sorted(out.glob("runs/*/seed*/eval.json")):
        rep = EvalReport.from_dict(json.loads(path.read_text()))
        groups.setdefault((rep.env, rep.method), []).append(rep)
    missing = _missing_runs(out, groups)
    tables, curves = {}, {}
    for (env, method), reps in sorted(groups.items()):
        seeds = sorted((s for r in reps for s in r.seeds), key=lambda s: s.seed)
        first = reps[0]
        agg = EvalReport(method, env, seeds, first.baselines, first.resamples, first.level,
                         first.bootstrap_seed)
        m, ci = agg.metrics, agg.metrics["ci"]
        row = {"method": method, "seeds": len(seeds)}
        for key in ("return", "cost", "norm_return", "norm_cost"):
            row[key], row[f"{key}_lo"], row[f"{key}_hi"] = m[key], *ci[key]
        for k in CVAR_LEVELS:
            row[f"cvar{k}"], row[f"cvar{k}_lo"], row[f"cvar{k}_hi"] = (
                m["cvar_cost"][k], *ci[f"cvar{k}"])
            curves.setdefault(env, []).append({"method": method, "k": k, "cvar": m["cvar_cost"][k],
                                               "cvar_lo": ci[f"cvar{k}"][0],
                                               "cvar_hi": ci[f"cvar{k}"][1]})
        tables.setdefault(env, []).append(row)
    report_dir = out / "report"
    report_dir.mkdir(exist_ok=True)
    for env, rows in tables.items():
        (report_dir / f"table_{env}.csv").write_text(rows_to_csv(rows, columns=TABLE_COLUMNS))
        (report_dir / f"cvar_curve_{env}.csv").write_text(
            rows_to_csv(curves[env], columns=CURVE_COLUMNS))
    (report_dir / "missing.txt").write_text("".join(f"{m}\n" for m in missing))
    return {"tables": tables, "curves": curves, "missing": missing}


def _missing_runs(out: Path, groups: dict) -> list:
    cfg_path = out / "config.toml"
    if not cfg_path.exists():
        return []
    config = load_config(cfg_path)
    present = {(r.method, s.seed) for reps in groups.values() for r in reps for s in r.seeds}
    return [f"{m}/seed{s}" for m in config.methods for s in config.eval.seeds
            if (m, s) not in present]
