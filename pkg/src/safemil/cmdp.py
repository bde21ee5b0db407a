"""Finite-horizon tabular constrained MDPs.

Two synthetic families stand in for the benchmark tasks: :func:`build_speed_chain`
(move fast, sprinting costs) and :func:`build_hazard_grid` (reach a goal around
hazard cells).  :func:`solve_constrained` gives the exact reference policy used
to normalise metrics; :func:`solve_unconstrained` gives the risky expert.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import ConfigError, ContractError, InfeasibleError

STAY, WALK, SPRINT = 0, 1, 2
UP, RIGHT, DOWN, LEFT = 0, 1, 2, 3
_MOVES = {UP: (-1, 0), RIGHT: (0, 1), DOWN: (1, 0), LEFT: (0, -1)}

SOLVER_CAP = 20_000  # max num_states * num_actions accepted by the exact solvers


@dataclass(frozen=True, eq=False)
class TabularCmdp:
    num_states: int
    num_actions: int
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    cost: np.ndarray  # (S, A)
    threshold: float
    discount: float
    horizon: int
    initial_dist: np.ndarray  # (S,)
    terminal: frozenset = frozenset()
    name: str = "cmdp"
    meta: dict = field(default_factory=dict, compare=False)
    # Optional realised per-transition values (S, A, S); reward/cost are their
    # expectations under ``transition``.  Rollouts annotate with these.
    reward_outcome: np.ndarray | None = None
    cost_outcome: np.ndarray | None = None

    def __post_init__(self):
        S, A = self.num_states, self.num_actions
        if S < 1 or A < 1:
            raise ConfigError("need at least one state and one action")
        for name, shape in (("transition", (S, A, S)), ("reward", (S, A)),
                            ("cost", (S, A)), ("initial_dist", (S,))):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(-1) - 1)) > 1e-9:
            raise ConfigError("transition rows must be distributions")
        if np.any(self.cost < 0):
            raise ConfigError("costs must be non-negative")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1) > 1e-9:
            raise ConfigError("initial distribution must sum to 1")
        if not 0 < self.discount < 1:
            raise ConfigError("discount must lie in (0, 1)")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.threshold < 0:
            raise ConfigError("threshold must be >= 0")
        object.__setattr__(self, "terminal", frozenset(int(s) for s in self.terminal))
        for name, mean in (("reward_outcome", self.reward), ("cost_outcome", self.cost)):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (S, A, S):
                raise ConfigError(f"{name} must have shape {(S, A, S)}")
            if np.max(np.abs((self.transition * arr).sum(-1) - mean)) > 1e-9:
                raise ConfigError(f"{name} is inconsistent with its expected table")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.cost_outcome is not None and np.any(self.cost_outcome < 0):
            raise ConfigError("costs must be non-negative")

    def with_threshold(self, threshold: float) -> "TabularCmdp":
        return TabularCmdp(self.num_states, self.num_actions, self.transition, self.reward,
                           self.cost, float(threshold), self.discount, self.horizon,
                           self.initial_dist, self.terminal, self.name, dict(self.meta),
                           self.reward_outcome, self.cost_outcome)


@dataclass
class Trajectory:
    """State-action sequence; rewards/costs/tag are evaluation-only annotations."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray | None = None
    costs: np.ndarray | None = None
    tag: str | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.states.shape != self.actions.shape or self.states.ndim != 1:
            raise ContractError("states and actions must be 1-D and aligned")
        for name in ("rewards", "costs"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.float64)
                if val.shape != self.states.shape:
                    raise ContractError(f"{name} length differs from steps")
                setattr(self, name, val)

    def __len__(self) -> int:
        return int(self.states.shape[0])

    @property
    def steps(self) -> list[tuple[int, int]]:
        return list(zip(self.states.tolist(), self.actions.tolist()))

    def training_view(self) -> "Trajectory":
        return Trajectory(self.states.copy(), self.actions.copy())

    def total_reward(self, gamma: float | None = None) -> float:
        return _episode_sum(self.rewards, gamma)

    def total_cost(self, gamma: float | None = None) -> float:
        return _episode_sum(self.costs, gamma)


def _episode_sum(values, gamma):
    if values is None:
        raise ContractError("trajectory carries no hidden annotations")
    if gamma is None:
        return float(values.sum())
    return float(values @ gamma ** np.arange(values.shape[0]))


@dataclass
class Policy:
    """Tabular stochastic policy or softmax network over one-hot states.

    Tabular probabilities are either stationary ``(S, A)`` or time-indexed
    ``(T, S, A)``.
    """

    kind: str
    probs: np.ndarray | None = None
    model: object = None

    def __post_init__(self):
        if self.kind == "tabular":
            p = np.asarray(self.probs, dtype=np.float64)
            if p.ndim not in (2, 3):
                raise ContractError("tabular policy needs an (S, A) or (T, S, A) table")
            check_distribution_rows(p)
            self.probs = p
        elif self.kind == "mlp":
            if self.model is None or self.model.head != "softmax":
                raise ContractError("mlp policy needs a softmax-head model")
        else:
            raise ContractError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def uniform(cls, env: TabularCmdp) -> "Policy":
        return cls("tabular", np.full((env.num_states, env.num_actions), 1.0 / env.num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=np.int64)
        return cls("tabular", np.eye(num_actions)[actions])

    def table(self, env: TabularCmdp) -> np.ndarray:
        """Time-indexed probabilities of shape (T, S, A)."""
        if self.kind == "mlp":
            if self.model.input_size != env.num_states or self.model.layer_sizes[-1] != env.num_actions:
                raise ContractError("policy network does not match the environment")
            p = self.model(np.eye(env.num_states))
        else:
            p = self.probs
        if p.shape[-2:] != (env.num_states, env.num_actions):
            raise ContractError(f"policy shape {p.shape} does not match environment")
        if p.ndim == 2:
            return np.broadcast_to(p, (env.horizon,) + p.shape)
        if p.shape[0] != env.horizon:
            raise ContractError("time-indexed policy length differs from horizon")
        return p

    def greedy_actions(self, env: TabularCmdp) -> np.ndarray:
        return self.table(env).argmax(axis=-1)


def check_distribution_rows(p: np.ndarray, tol: float = 1e-9) -> None:
    if np.any(p < 0) or np.max(np.abs(p.sum(axis=-1) - 1.0)) > tol:
        raise ContractError("action probabilities must be non-negative and sum to 1")


# ---------------------------------------------------------------------------
# environments


def build_speed_chain(length: int = 10, horizon: int = 8, threshold: float = 2.0,
                      gamma: float = 0.99) -> TabularCmdp:
    """Chain where stay/walk/sprint advance 0/1/2 cells; sprinting costs 1."""
    if length < 4:
        raise ConfigError("speed chain needs length >= 4")
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    S, A = length, 3
    P = np.zeros((S, A, S))
    r = np.zeros((S, A))
    c = np.zeros((S, A))
    for s in range(S):
        for a, step in ((STAY, 0), (WALK, 1), (SPRINT, 2)):
            nxt = min(s + step, S - 1)
            P[s, a, nxt] = 1.0
            r[s, a] = nxt - s
        c[s, SPRINT] = 1.0
    rho = np.zeros(S)
    rho[0] = 1.0
    return TabularCmdp(S, A, P, r, c, float(threshold), float(gamma), int(horizon), rho,
                       name="speed_chain", meta={"length": length})


def build_hazard_grid(side: int = 5, hazard_cells=((3, 2), (4, 2)), horizon: int = 12,
                      threshold: float = 0.1, gamma: float = 0.99, slip: float = 0.05,
                      start=None, goal=None) -> TabularCmdp:
    """``side`` x ``side`` grid; reach ``goal`` (absorbing) while avoiding hazards.

    Start defaults to the bottom-left cell and goal to the bottom-right cell, so
    the bottom row is the unique shortest route.  With probability ``slip`` the
    move goes in one of the other three directions.  Rewards and costs are the
    expectations over the next cell: +1 for entering the goal, -0.01 otherwise,
    and cost 1 for ending the step on a hazard cell.
    """
    if side < 3:
        raise ConfigError("hazard grid needs side >= 3")
    if not 0 <= slip < 0.5:
        raise ConfigError("slip must lie in [0, 0.5)")
    start = (side - 1, 0) if start is None else tuple(start)
    goal = (side - 1, side - 1) if goal is None else tuple(goal)
    hazards = {tuple(int(v) for v in h) for h in hazard_cells}
    for cell in hazards | {start, goal}:
        if not (0 <= cell[0] < side and 0 <= cell[1] < side):
            raise ConfigError(f"cell {cell} outside the grid")
    if start in hazards or goal in hazards:
        raise ConfigError("start and goal must not be hazard cells")
    if start == goal:
        raise ConfigError("start and goal must differ")

    def idx(cell):
        return cell[0] * side + cell[1]

    S, A = side * side, 4
    g = idx(goal)
    hz = np.zeros(S)
    for h in hazards:
        hz[idx(h)] = 1.0
    enter = np.full(S, -0.01)
    enter[g] = 1.0
    P = np.zeros((S, A, S))
    for row in range(side):
        for col in range(side):
            s = idx((row, col))
            if s == g:
                P[s, :, s] = 1.0
                continue
            for a in range(A):
                for b, (dr, dc) in _MOVES.items():
                    prob = 1.0 - slip if b == a else slip / 3.0
                    if prob == 0.0:
                        continue
                    nr = min(max(row + dr, 0), side - 1)
                    nc = min(max(col + dc, 0), side - 1)
                    P[s, a, idx((nr, nc))] += prob
    r_out = np.broadcast_to(enter, (S, A, S)).copy()
    c_out = np.broadcast_to(hz, (S, A, S)).copy()
    r_out[g] = 0.0
    c_out[g] = 0.0
    r = (P * r_out).sum(-1)
    c = (P * c_out).sum(-1)
    rho = np.zeros(S)
    rho[idx(start)] = 1.0
    meta = {"side": side, "hazards": sorted(hazards), "start": start, "goal": goal, "slip": slip}
    return TabularCmdp(S, A, P, r, c, float(threshold), float(gamma), int(horizon), rho,
                       terminal=frozenset({g}), name="hazard_grid", meta=meta,
                       reward_outcome=r_out, cost_outcome=c_out)


# ---------------------------------------------------------------------------
# sampling and exact evaluation


def _sample(cdf: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf, u, side="right")), cdf.shape[0] - 1)


def rollout(env: TabularCmdp, policy: Policy, seed) -> Trajectory:
    """Sample one episode; stops early when a terminal state is entered."""
    table = policy.table(env)
    rng = np.random.default_rng(seed)
    return _rollout(env, np.cumsum(table, axis=-1), np.cumsum(env.transition, axis=-1), rng)


def rollouts(env: TabularCmdp, policy: Policy, n: int, seed) -> list[Trajectory]:
    """``n`` episodes from one generator stream seeded by ``seed``."""
    table = policy.table(env)
    rng = np.random.default_rng(seed)
    pol_cdf = np.cumsum(table, axis=-1)
    env_cdf = np.cumsum(env.transition, axis=-1)
    return [_rollout(env, pol_cdf, env_cdf, rng) for _ in range(n)]


def _rollout(env, pol_cdf, env_cdf, rng) -> Trajectory:
    T = env.horizon
    u = rng.random(2 * T + 1)
    s = _sample(np.cumsum(env.initial_dist), u[0])
    states, actions, nexts = [], [], []
    for t in range(T):
        a = _sample(pol_cdf[t, s], u[2 * t + 1])
        states.append(s)
        actions.append(a)
        s = _sample(env_cdf[s, a], u[2 * t + 2])
        nexts.append(s)
        if s in env.terminal:
            break
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    if env.reward_outcome is None:
        rewards = env.reward[states, actions]
    else:
        rewards = env.reward_outcome[states, actions, nexts]
    if env.cost_outcome is None:
        costs = env.cost[states, actions]
    else:
        costs = env.cost_outcome[states, actions, nexts]
    return Trajectory(states, actions, rewards, costs)


def exact_policy_eval(env: TabularCmdp, policy: Policy, discounted: bool = True) -> tuple[float, float]:
    """Expected (return, cost) over the horizon by backward induction.

    With ``discounted=False`` the undiscounted episodic sums are returned.
    """
    table = policy.table(env)
    g = env.discount if discounted else 1.0
    v_r = np.zeros(env.num_states)
    v_c = np.zeros(env.num_states)
    for t in range(env.horizon - 1, -1, -1):
        q_r = env.reward + g * env.transition @ v_r
        q_c = env.cost + g * env.transition @ v_c
        v_r = (table[t] * q_r).sum(-1)
        v_c = (table[t] * q_c).sum(-1)
    return float(env.initial_dist @ v_r), float(env.initial_dist @ v_c)


# ---------------------------------------------------------------------------
# solvers


def _check_cap(env: TabularCmdp) -> None:
    if env.num_states * env.num_actions > SOLVER_CAP:
        raise ConfigError(f"environment too large for exact solving (> {SOLVER_CAP} pairs)")


def solve_unconstrained(env: TabularCmdp) -> Policy:
    """Greedy finite-horizon value iteration on reward; ties go to the lowest action."""
    _check_cap(env)
    T, S, A = env.horizon, env.num_states, env.num_actions
    v = np.zeros(S)
    probs = np.zeros((T, S, A))
    for t in range(T - 1, -1, -1):
        q = env.reward + env.discount * env.transition @ v
        best = q.max(axis=1, keepdims=True)
        acts = np.argmax(q >= best - 1e-12 * np.maximum(1.0, np.abs(best)), axis=1)
        probs[t, np.arange(S), acts] = 1.0
        v = q[np.arange(S), acts]
    return Policy("tabular", probs)


def _occupancy_lp(env: TabularCmdp):
    """Equality system for time-indexed occupancies x[t, s, a] (flattened)."""
    T, S, A = env.horizon, env.num_states, env.num_actions
    n = T * S * A
    rows, cols, vals = [], [], []
    b_eq = np.zeros(T * S)
    # sum_a x[0, s, a] = rho(s);  sum_a x[t+1, s', a] = sum_{s,a} P(s'|s,a) x[t, s, a]
    for t in range(T):
        for s in range(S):
            r = t * S + s
            base = (t * S + s) * A
            rows += [r] * A
            cols += list(range(base, base + A))
            vals += [1.0] * A
    b_eq[:S] = env.initial_dist
    P = env.transition.reshape(S * A, S)
    nz_sa, nz_next = np.nonzero(P)
    for t in range(T - 1):
        rows += ((t + 1) * S + nz_next).tolist()
        cols += (t * S * A + nz_sa).tolist()
        vals += (-P[nz_sa, nz_next]).tolist()
    A_eq = sp.csr_matrix((vals, (rows, cols)), shape=(T * S, n))
    disc = np.repeat(env.discount ** np.arange(T), S * A)
    r_vec = disc * np.tile(env.reward.ravel(), T)
    c_vec = disc * np.tile(env.cost.ravel(), T)
    return A_eq, b_eq, r_vec, c_vec


def solve_constrained(env: TabularCmdp, tol: float = 1e-9) -> Policy:
    """Return-maximising policy with expected discounted cost <= threshold.

    Solved as a linear program over time-indexed occupancy measures.  A second
    LP keeps the optimal return (up to ``tol``) and minimises cost, which
    breaks ties toward lower cost.  The result may be stochastic.
    """
    _check_cap(env)
    T, S, A = env.horizon, env.num_states, env.num_actions
    A_eq, b_eq, r_vec, c_vec = _occupancy_lp(env)
    min_cost = linprog(c_vec, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if min_cost.status != 0:
        raise InfeasibleError(f"occupancy LP failed: {min_cost.message}")
    if min_cost.fun > env.threshold + 1e-9:
        raise InfeasibleError(
            f"threshold {env.threshold} below the minimum achievable cost {min_cost.fun:.6g}"
        )
    first = linprog(-r_vec, A_ub=c_vec[None, :], b_ub=[env.threshold], A_eq=A_eq, b_eq=b_eq,
                    bounds=(0, None), method="highs")
    if first.status != 0:
        raise InfeasibleError(f"occupancy LP failed: {first.message}")
    best = -first.fun
    floor = best - tol * max(1.0, abs(best))
    second = linprog(c_vec, A_ub=np.vstack([c_vec, -r_vec]), b_ub=[env.threshold, -floor],
                     A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    x = (second.x if second.status == 0 else first.x).reshape(T, S, A)
    return Policy("tabular", occupancy_to_policy(x))


def occupancy_to_policy(x: np.ndarray) -> np.ndarray:
    """Normalise occupancies per (t, s); unvisited states get action 0."""
    x = np.clip(x, 0.0, None)
    mass = x.sum(axis=-1, keepdims=True)
    fallback = np.zeros_like(x)
    fallback[..., 0] = 1.0
    safe_mass = np.where(mass > 1e-12, mass, 1.0)
    return np.where(mass > 1e-12, x / safe_mass, fallback)


def env_from_spec(spec: dict) -> TabularCmdp:
    """Build an environment from its JSON/TOML description."""
    spec = dict(spec)
    kind = spec.get("kind")
    common = {k: spec[k] for k in ("horizon", "threshold", "gamma") if k in spec}
    if kind == "speed_chain":
        return build_speed_chain(length=int(spec.get("length", 10)), **common)
    if kind == "hazard_grid":
        kwargs = dict(common)
        for key in ("side", "slip", "start", "goal"):
            if key in spec:
                kwargs[key] = spec[key]
        if "hazards" in spec:
            kwargs["hazard_cells"] = [tuple(h) for h in spec["hazards"]]
        return build_hazard_grid(**kwargs)
    raise ConfigError(f"unknown environment kind {kind!r}")
