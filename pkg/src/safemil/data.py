"""Behaviour datasets: raw pools, preferred/non-preferred labelling, D^N / D^U.

Files on disk are JSON Lines.  The training file holds only ``{"steps": ...}``
per line; hidden rewards, costs and provenance tags go to an aligned
``.eval.jsonl`` sidecar; a ``.manifest.json`` records role, counts and alpha.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .cmdp import Policy, TabularCmdp, Trajectory, rollouts
from .errors import ConfigError, ContractError, GenerationError, ParseError

ROLES = ("non_preferred", "unlabeled", "eval_only")
PREFERRED, NON_PREFERRED = "preferred", "non_preferred"


@dataclass(eq=False)
class TrajectoryDataset:
    trajectories: list
    role: str
    num_states: int
    num_actions: int
    alpha: float | None = None
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractError(f"unknown dataset role {self.role!r}")
        for tr in self.trajectories:
            if len(tr) == 0:
                raise ContractError("empty trajectory in dataset")
            if tr.states.min() < 0 or tr.states.max() >= self.num_states:
                raise ContractError("state id out of range")
            if tr.actions.min() < 0 or tr.actions.max() >= self.num_actions:
                raise ContractError("action id out of range")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([len(t) for t in self.trajectories], dtype=np.int64)

    @cached_property
    def pair_ids(self) -> np.ndarray:
        """Padded (N, max_len) array of ``state * num_actions + action``."""
        out = np.zeros((len(self), int(self.lengths.max(initial=1))), dtype=np.int64)
        for i, tr in enumerate(self.trajectories):
            out[i, : len(tr)] = tr.states * self.num_actions + tr.actions
        return out

    @cached_property
    def tags(self) -> np.ndarray:
        return np.array([t.tag or "" for t in self.trajectories])

    def transitions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (states, actions, trajectory index, timestep)."""
        states = np.concatenate([t.states for t in self.trajectories])
        actions = np.concatenate([t.actions for t in self.trajectories])
        owner = np.repeat(np.arange(len(self)), self.lengths)
        step = np.concatenate([np.arange(n) for n in self.lengths])
        return states, actions, owner, step

    def training_view(self) -> "TrajectoryDataset":
        return TrajectoryDataset([t.training_view() for t in self.trajectories], self.role,
                                 self.num_states, self.num_actions, self.alpha,
                                 self.provenance, dict(self.meta))

    def subset(self, indices, role: str | None = None) -> "TrajectoryDataset":
        trajs = [self.trajectories[i] for i in indices]
        return TrajectoryDataset(trajs, role or self.role, self.num_states, self.num_actions,
                                 None, self.provenance, dict(self.meta))


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# generation


def noisy_policy(env: TabularCmdp, policy: Policy, epsilon: float) -> Policy:
    """Mix ``policy`` with the uniform policy at rate ``epsilon``."""
    table = policy.table(env)
    return Policy("tabular", (1.0 - epsilon) * table + epsilon / env.num_actions)


def generate_raw_pool(env: TabularCmdp, safe: Policy, risky: Policy, n: int,
                      epsilon: float = 0.05, seed: int = 0) -> list:
    """``n`` annotated rollouts: first half from noisy ``safe``, rest from noisy ``risky``."""
    if n < 2:
        raise ConfigError("raw pool needs n >= 2")
    if not 0 <= epsilon <= 0.3:
        raise ConfigError("epsilon must lie in [0, 0.3]")
    safe_seed, risky_seed = np.random.SeedSequence(seed).spawn(2)
    n_safe = n // 2
    pool = rollouts(env, noisy_policy(env, safe, epsilon), n_safe, safe_seed)
    pool += rollouts(env, noisy_policy(env, risky, epsilon), n - n_safe, risky_seed)
    for i, tr in enumerate(pool):
        tr.tag = "safe" if i < n_safe else "risky"
    return pool


def label_pool(pool, reward_quantile: float = 0.5, cost_hi: float = 0.75,
               cost_lo: float = 0.25, gamma: float | None = None):
    """Split a pool into (preferred, non_preferred, discarded).

    High-return trajectories are those at or above the ``reward_quantile``
    quantile of total reward.  Among them, total cost at or above the
    ``cost_hi`` quantile marks non-preferred and at or below ``cost_lo`` marks
    preferred.  Totals are undiscounted unless ``gamma`` is given.  Returned
    trajectories are copies carrying the class as their tag.
    """
    if not (0 < cost_lo < cost_hi < 1) or not 0 <= reward_quantile < 1:
        raise ConfigError("need 0 < cost_lo < cost_hi < 1 and 0 <= reward_quantile < 1")
    pool = list(pool)
    if not pool:
        raise GenerationError("empty pool")
    rewards = np.array([t.total_reward(gamma) for t in pool])
    costs = np.array([t.total_cost(gamma) for t in pool])
    r_cut = np.quantile(rewards, reward_quantile)
    hi_cut = np.quantile(costs, cost_hi)
    lo_cut = np.quantile(costs, cost_lo)
    if hi_cut <= lo_cut:
        raise GenerationError(
            f"degenerate cost quantiles ({lo_cut:g} >= {hi_cut:g}); "
            "increase pool diversity (epsilon, noise levels) or pool size"
        )
    high = rewards >= r_cut
    non_pref = high & (costs >= hi_cut)
    pref = high & (costs <= lo_cut)
    if not pref.any() or not non_pref.any():
        raise GenerationError(
            f"labelling produced {int(pref.sum())} preferred and {int(non_pref.sum())} "
            "non-preferred trajectories; adjust quantiles or generator settings"
        )

    def tagged(tr, tag):
        return Trajectory(tr.states, tr.actions, tr.rewards, tr.costs, tag)

    preferred = [tagged(t, PREFERRED) for t, m in zip(pool, pref) if m]
    non_preferred = [tagged(t, NON_PREFERRED) for t, m in zip(pool, non_pref) if m]
    discarded = [t for t, p, q in zip(pool, pref, non_pref) if not (p or q)]
    return preferred, non_preferred, discarded


def assemble_datasets(preferred, non_preferred, n_unlabeled: int = 200, n_negative: int = 50,
                      alpha: float = 0.5, seed: int = 0, *, num_states: int,
                      num_actions: int, provenance: str = ""):
    """Draw disjoint D^N and D^U (mixture with preferred fraction alpha)."""
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    if n_unlabeled < 1 or n_negative < 1:
        raise ConfigError("dataset sizes must be positive")
    n_pref = int(round(alpha * n_unlabeled))
    n_bad = n_unlabeled - n_pref
    if n_pref > len(preferred) or n_negative + n_bad > len(non_preferred):
        raise GenerationError(
            f"need {n_pref} preferred and {n_negative + n_bad} non-preferred trajectories, "
            f"have {len(preferred)} and {len(non_preferred)}; enlarge the raw pool"
        )
    rng = np.random.default_rng(seed)
    bad = rng.permutation(len(non_preferred))
    good = rng.permutation(len(preferred))[:n_pref]
    negatives = [non_preferred[i] for i in bad[:n_negative]]
    unlabeled = [preferred[i] for i in good] + [non_preferred[i] for i in bad[n_negative:n_negative + n_bad]]
    unlabeled = [unlabeled[i] for i in rng.permutation(len(unlabeled))]
    d_n = TrajectoryDataset(negatives, "non_preferred", num_states, num_actions,
                            provenance=provenance)
    d_u = TrajectoryDataset(unlabeled, "unlabeled", num_states, num_actions,
                            alpha=n_pref / n_unlabeled, provenance=provenance)
    return d_n, d_u


def class_summary(trajectories, gamma: float | None = None) -> dict:
    """Counts and mean hidden return/cost, in the style of a dataset table."""
    if not trajectories:
        return {"count": 0, "mean_return": float("nan"), "mean_cost": float("nan")}
    return {
        "count": len(trajectories),
        "mean_return": float(np.mean([t.total_reward(gamma) for t in trajectories])),
        "mean_cost": float(np.mean([t.total_cost(gamma) for t in trajectories])),
    }


# ---------------------------------------------------------------------------
# persistence


def _paths(path) -> tuple[Path, Path, Path]:
    path = Path(path)
    stem = path.name[: -len(".jsonl")] if path.name.endswith(".jsonl") else path.name
    return path, path.with_name(stem + ".eval.jsonl"), path.with_name(stem + ".manifest.json")


def save_dataset(dataset: TrajectoryDataset, path) -> Path:
    """Write training view, eval sidecar (if annotated) and manifest."""
    train_path, eval_path, manifest_path = _paths(path)
    train_path.parent.mkdir(parents=True, exist_ok=True)
    with train_path.open("w") as fh:
        for tr in dataset.trajectories:
            fh.write(json.dumps({"steps": [[int(s), int(a)] for s, a in tr.steps]}) + "\n")
    annotated = all(t.rewards is not None and t.costs is not None for t in dataset)
    if annotated:
        with eval_path.open("w") as fh:
            for tr in dataset.trajectories:
                fh.write(json.dumps({"rewards": tr.rewards.tolist(), "costs": tr.costs.tolist(),
                                     "tag": tr.tag}) + "\n")
    manifest = {
        "role": dataset.role,
        "count": len(dataset),
        "num_states": dataset.num_states,
        "num_actions": dataset.num_actions,
        "alpha": dataset.alpha,
        "provenance": dataset.provenance,
        "sidecar": eval_path.name if annotated else None,
        "meta": dataset.meta,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return train_path


def _read_jsonl(path: Path, expected: int, keys: set) -> list:
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        raise ParseError("file does not end with a newline (truncated?)", path, len(lines))
    rows = []
    for lineno, line in enumerate(lines, start=1):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", path, lineno) from None
        if not isinstance(row, dict) or set(row) - keys or not set(row) & keys:
            raise ParseError(f"unexpected fields {sorted(row) if isinstance(row, dict) else row}",
                             path, lineno)
        rows.append(row)
    if len(rows) != expected:
        raise ParseError(f"expected {expected} records, found {len(rows)}", path, len(rows) + 1)
    return rows


def load_dataset(path, with_annotations: bool = False) -> TrajectoryDataset:
    """Load a dataset; hidden annotations only when ``with_annotations``."""
    train_path, eval_path, manifest_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ParseError("missing manifest", manifest_path) from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid manifest: {exc.msg}", manifest_path, exc.lineno) from None
    rows = _read_jsonl(train_path, int(manifest["count"]), {"steps"})
    trajectories = []
    for lineno, row in enumerate(rows, start=1):
        steps = row["steps"]
        if (not isinstance(steps, list) or not steps
                or not all(isinstance(p, list) and len(p) == 2 for p in steps)):
            raise ParseError("steps must be a non-empty list of [state, action]", train_path, lineno)
        arr = np.asarray(steps, dtype=np.int64)
        trajectories.append(Trajectory(arr[:, 0], arr[:, 1]))
    if with_annotations:
        if not manifest.get("sidecar"):
            raise ParseError("dataset has no evaluation sidecar", manifest_path)
        side = _read_jsonl(eval_path, len(trajectories), {"rewards", "costs", "tag"})
        for lineno, (tr, row) in enumerate(zip(trajectories, side), start=1):
            try:
                tr.rewards = np.asarray(row["rewards"], dtype=np.float64)
                tr.costs = np.asarray(row["costs"], dtype=np.float64)
                tr.tag = row.get("tag")
                Trajectory(tr.states, tr.actions, tr.rewards, tr.costs)
            except (KeyError, ContractError) as exc:
                raise ParseError(f"sidecar misaligned: {exc}", eval_path, lineno) from None
    try:
        return TrajectoryDataset(trajectories, manifest["role"], int(manifest["num_states"]),
                                 int(manifest["num_actions"]), manifest.get("alpha"),
                                 manifest.get("provenance", ""), manifest.get("meta", {}))
    except ContractError as exc:
        raise ParseError(str(exc), train_path) from None

