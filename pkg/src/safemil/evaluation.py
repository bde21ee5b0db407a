"""Evaluation metrics: normalised return/cost, CVaR tails and bootstrap CIs."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .cmdp import Policy, TabularCmdp, exact_policy_eval, rollouts
from .errors import ContractError

CVAR_LEVELS = (50, 30, 20, 10)
CSV_COLUMNS = ("method", "env", "seed", "return", "cost", "cvar50", "cvar30", "cvar20",
               "cvar10", "norm_return", "norm_cost")


@dataclass
class EpisodeStats:
    returns: np.ndarray
    costs: np.ndarray

    def __len__(self) -> int:
        return self.returns.shape[0]

    @property
    def mean_return(self) -> float:
        return float(self.returns.mean())

    @property
    def mean_cost(self) -> float:
        return float(self.costs.mean())


def evaluate_policy(env: TabularCmdp, policy: Policy, episodes: int = 50, seed=0,
                    discounted: bool = False) -> EpisodeStats:
    """Episodic returns and costs of ``episodes`` independent rollouts."""
    if episodes < 1:
        raise ContractError("need at least one episode")
    gamma = env.discount if discounted else None
    trajs = rollouts(env, policy, episodes, seed)
    return EpisodeStats(np.array([t.total_reward(gamma) for t in trajs]),
                        np.array([t.total_cost(gamma) for t in trajs]))


@dataclass(frozen=True)
class Baselines:
    """Reference (constrained optimum) return/cost and random-policy return."""

    ref_return: float
    ref_cost: float
    random_return: float
    mode: str = "rollout"


def compute_baselines(env: TabularCmdp, reference: Policy, episodes: int = 50, seed=0,
                      mode: str = "rollout", discounted: bool = False) -> Baselines:
    """Baselines measured with the evaluation protocol itself, or exactly.

    ``mode="rollout"`` reuses the evaluation seed, so evaluating the reference
    or the uniform policy reproduces its own baseline episode for episode.
    """
    uniform = Policy.uniform(env)
    if mode == "rollout":
        ref = evaluate_policy(env, reference, episodes, seed, discounted)
        rnd = evaluate_policy(env, uniform, episodes, seed, discounted)
        return Baselines(ref.mean_return, ref.mean_cost, rnd.mean_return, mode)
    if mode == "exact":
        r_ref, c_ref = exact_policy_eval(env, reference, discounted)
        r_rnd, _ = exact_policy_eval(env, uniform, discounted)
        return Baselines(r_ref, c_ref, r_rnd, mode)
    raise ContractError(f"unknown baseline mode {mode!r}")


def normalize(ret, cost, reference: tuple, random_return: float):
    """((R - R_rand) / (R_ref - R_rand), C - C_ref); works elementwise."""
    r_ref, c_ref = reference
    span = r_ref - random_return
    if span == 0:
        raise ContractError("reference return equals random return; normalisation undefined")
    ret, cost = np.asarray(ret, dtype=np.float64), np.asarray(cost, dtype=np.float64)
    out_r, out_c = (ret - random_return) / span, cost - c_ref
    if out_r.ndim == 0:
        return float(out_r), float(out_c)
    return out_r, out_c


def cvar_cost(costs, k_percent: float, reference_cost: float = 0.0) -> float:
    """Mean of the worst ceil(n k / 100) episode costs, minus the reference."""
    costs = np.asarray(costs, dtype=np.float64).reshape(-1)
    if costs.size == 0:
        raise ContractError("no episode costs")
    if not 0 < k_percent <= 100:
        raise ContractError("k must lie in (0, 100]")
    m = math.ceil(costs.size * k_percent / 100.0 - 1e-9)
    order = np.lexsort((np.arange(costs.size), -costs))
    return float(costs[order[:m]].mean() - reference_cost)


def bootstrap_ci(values, resamples: int = 1000, level: float = 0.95, seed=0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean.

    ``values`` is a flat sequence, or a list of per-seed sequences; the latter
    resamples seeds and then episodes within each drawn seed.
    """
    if not 0 < level < 1:
        raise ContractError("level must lie in (0, 1)")
    groups = _groups(values)
    if groups is None:
        flat = np.asarray(values, dtype=np.float64).reshape(-1)
        if flat.size == 0:
            raise ContractError("no values to bootstrap")
        if flat.size == 1:
            warnings.warn("bootstrap of a single value gives a degenerate interval",
                          RuntimeWarning, stacklevel=2)
            return float(flat[0]), float(flat[0])
        rng = np.random.default_rng(seed)
        means = flat[rng.integers(0, flat.size, (resamples, flat.size))].mean(axis=1)
    else:
        if len(groups) == 1 and groups[0].size == 1:
            v = float(groups[0][0])
            warnings.warn("bootstrap of a single value gives a degenerate interval",
                          RuntimeWarning, stacklevel=2)
            return v, v
        rng = np.random.default_rng(seed)
        n_groups = len(groups)
        means = np.empty(resamples)
        for b in range(resamples):
            picks = rng.integers(0, n_groups, n_groups)
            means[b] = np.mean([groups[g][rng.integers(0, groups[g].size, groups[g].size)].mean()
                                for g in picks])
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [tail, 100.0 - tail])
    return float(lo), float(hi)


def _groups(values):
    if isinstance(values, np.ndarray) and values.dtype != object:
        return None
    values = list(values)
    if values and all(np.ndim(v) == 1 for v in values):
        groups = [np.asarray(v, dtype=np.float64) for v in values]
        if any(g.size == 0 for g in groups):
            raise ContractError("empty seed group")
        return groups
    return None


@dataclass
class SeedResult:
    seed: int
    returns: list
    costs: list

    def __post_init__(self):
        self.returns = [float(x) for x in self.returns]
        self.costs = [float(x) for x in self.costs]


@dataclass
class EvalReport:
    method: str
    env: str
    seeds: list
    baselines: Baselines
    resamples: int = 1000
    level: float = 0.95
    bootstrap_seed: int = 0
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.seeds:
            raise ContractError("report needs at least one seed")
        self.metrics = self._metrics()

    @property
    def reference(self) -> tuple:
        return self.baselines.ref_return, self.baselines.ref_cost

    def seed_row(self, res: SeedResult) -> dict:
        nr, nc = normalize(np.mean(res.returns), np.mean(res.costs), self.reference,
                           self.baselines.random_return)
        row = {"method": self.method, "env": self.env, "seed": res.seed,
               "return": float(np.mean(res.returns)), "cost": float(np.mean(res.costs))}
        for k in CVAR_LEVELS:
            row[f"cvar{k}"] = cvar_cost(res.costs, k, self.baselines.ref_cost)
        row["norm_return"], row["norm_cost"] = nr, nc
        return row

    def rows(self) -> list:
        return [self.seed_row(s) for s in self.seeds]

    def _metrics(self) -> dict:
        rows = self.rows()
        ci = {}
        norm_r, norm_c = [], []
        for s in self.seeds:
            r, c = normalize(s.returns, s.costs, self.reference, self.baselines.random_return)
            norm_r.append(np.atleast_1d(r))
            norm_c.append(np.atleast_1d(c))
        kw = dict(resamples=self.resamples, level=self.level, seed=self.bootstrap_seed)
        ci["norm_return"] = self._ci(norm_r, **kw)
        ci["norm_cost"] = self._ci(norm_c, **kw)
        ci["return"] = self._ci([np.asarray(s.returns) for s in self.seeds], **kw)
        ci["cost"] = self._ci([np.asarray(s.costs) for s in self.seeds], **kw)
        for k in CVAR_LEVELS:
            ci[f"cvar{k}"] = self._ci([r[f"cvar{k}"] for r in rows], **kw)
        out = {key: float(np.mean([r[key] for r in rows]))
               for key in ("return", "cost", "norm_return", "norm_cost")}
        out["cvar_cost"] = {k: float(np.mean([r[f"cvar{k}"] for r in rows])) for k in CVAR_LEVELS}
        out["ci"] = ci
        return out

    @staticmethod
    def _ci(values, **kw):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return list(bootstrap_ci(values, **kw))

    @property
    def normalized_return(self) -> float:
        return self.metrics["norm_return"]

    @property
    def normalized_cost(self) -> float:
        return self.metrics["norm_cost"]

    @property
    def cvar(self) -> dict:
        return self.metrics["cvar_cost"]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "env": self.env,
            "baselines": asdict(self.baselines),
            "bootstrap": {"resamples": self.resamples, "level": self.level,
                          "seed": self.bootstrap_seed},
            "seeds": [asdict(s) for s in self.seeds],
            "metrics": self.metrics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        b = d["bootstrap"]
        return cls(d["method"], d["env"], [SeedResult(**s) for s in d["seeds"]],
                   Baselines(**d["baselines"]), b["resamples"], b["level"], b["seed"])

    def to_csv(self, header: bool = True) -> str:
        return rows_to_csv(self.rows(), header)


def format_value(x) -> str:
    return repr(x) if isinstance(x, float) else str(x)


def rows_to_csv(rows, header: bool = True, columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()
