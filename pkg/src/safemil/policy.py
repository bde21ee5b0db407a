"""Policy extraction by (weighted) behaviour cloning, plus the baselines.

All learners share one softmax network over one-hot states.  Because states
are tabular, each step evaluates the network once on the identity matrix and
gathers the log-probabilities of the sampled (state, action) pairs.

Weighted BC samples transitions in proportion to their weight and minimises
the mean negative log-likelihood; the expected gradient equals the weighted
objective up to one global factor.  ``sampling="uniform"`` instead draws
uniformly and multiplies each term by its weight (optionally self-normalised
per batch).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .cmdp import Policy
from .data import TrajectoryDataset
from .errors import ConfigError, ContractError, TrainingError
from .mil import cost_table, encode_pairs, sample_bags
from .nn import MlpModel, OptimizerState, Tensor, adam_step, backward

log = logging.getLogger(__name__)

METHODS = (
    "safemil-trajectory",
    "safemil-transition",
    "safemil-threshold",
    "bc-unlabeled",
    "trex-wbc",
    "dwbc-nu",
)
SAMPLING = ("proportional", "uniform")
D_CLAMP = (0.05, 0.95)


@dataclass
class PolicyLearnConfig:
    method: str = "safemil-trajectory"
    beta: float = 0.5
    threshold: float | None = None
    eta: float = 0.5
    gamma: float = 0.99
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    hidden: tuple = (64, 64)
    seed: int = 0
    log_every: int = 100
    sampling: str = "proportional"
    self_normalize: bool = False
    reward_steps: int = 2000
    reward_snippet: int = 5
    reward_batch: int = 32

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.threshold is not None and self.threshold < 0:
            raise ConfigError("threshold must be non-negative")
        if not 0 < self.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.sampling not in SAMPLING:
            raise ConfigError(f"sampling must be one of {SAMPLING}")
        for name in ("steps", "batch_size", "log_every", "reward_steps", "reward_snippet",
                     "reward_batch"):
            if getattr(self, name) < (0 if name.endswith("steps") else 1):
                raise ConfigError(f"{name} out of range")
        self.hidden = tuple(self.hidden)


# ---------------------------------------------------------------------------
# weights


def trajectory_costs(cost_model, dataset: TrajectoryDataset, gamma: float) -> np.ndarray:
    """Discounted predicted cost of every full trajectory (t from 0)."""
    table = cost_table(cost_model, dataset.num_states, dataset.num_actions).data
    steps = np.arange(dataset.pair_ids.shape[1])
    mask = steps < dataset.lengths[:, None]
    return np.where(mask, table[dataset.pair_ids] * gamma ** steps, 0.0).sum(axis=1)


def trajectory_weight(cost, trajectory, gamma: float, beta: float) -> float:
    """exp(-C / beta) with C the discounted predicted cost of the trajectory.

    ``cost`` is an (S, A) table of per-step costs or a plain number taken as
    C itself.  For a cost network use :func:`trajectory_weights`.
    """
    if beta <= 0:
        raise ConfigError("beta must be positive")
    if np.isscalar(cost):
        return float(np.exp(-float(cost) / beta))
    table = np.asarray(cost, dtype=np.float64)
    if table.ndim != 2:
        raise ContractError("trajectory_weight needs an (S, A) cost table")
    ds = TrajectoryDataset([trajectory], "eval_only", *table.shape)
    return float(np.exp(-trajectory_costs(table, ds, gamma)[0] / beta))


def trajectory_weights(cost_model, dataset: TrajectoryDataset, gamma: float, beta: float) -> np.ndarray:
    return np.exp(-trajectory_costs(cost_model, dataset, gamma) / beta)


def transition_weights(cost_model, dataset: TrajectoryDataset) -> np.ndarray:
    """Per-transition 1 - c_hat(s, a), in flattened transition order."""
    table = cost_table(cost_model, dataset.num_states, dataset.num_actions).data
    states, actions, _, _ = dataset.transitions()
    return 1.0 - table[states * dataset.num_actions + actions]


def default_threshold(cost_model, dataset: TrajectoryDataset, gamma: float,
                      alpha: float | None = None) -> float:
    """The alpha-quantile of discounted predicted costs over the dataset."""
    alpha = dataset.alpha if alpha is None else alpha
    if alpha is None:
        raise ConfigError("threshold not given and dataset carries no alpha")
    return float(np.quantile(trajectory_costs(cost_model, dataset, gamma), alpha))


def select_preferred(cost_model, dataset: TrajectoryDataset, gamma: float,
                     threshold: float) -> TrajectoryDataset:
    """Trajectories whose discounted predicted cost is at most ``threshold``."""
    if threshold < 0:
        raise ConfigError("threshold must be non-negative")
    keep = np.flatnonzero(trajectory_costs(cost_model, dataset, gamma) <= threshold)
    if keep.size == 0:
        warnings.warn(f"no trajectory has predicted cost <= {threshold:g}", RuntimeWarning,
                      stacklevel=2)
    return dataset.subset(keep)


# ---------------------------------------------------------------------------
# behaviour cloning


def make_policy_model(num_states: int, num_actions: int, hidden=(64, 64), seed: int = 0) -> MlpModel:
    return MlpModel.create([num_states, *hidden, num_actions], "softmax", seed)


def policy_log_table(model: MlpModel, num_states: int, theta: Tensor | None = None) -> Tensor:
    """Flattened (S*A,) log-probabilities, index ``s * A + a``."""
    return model.log_probs(np.eye(num_states), theta).reshape(-1)


def weighted_nll_loss(theta: Tensor, model: MlpModel, pair_ids: np.ndarray,
                      weights: np.ndarray | None = None, normalize: bool = False) -> Tensor:
    """Batch BC loss: mean of w * (-log pi(a|s)); ``normalize`` divides by sum w."""
    num_states = model.input_size
    nll = -policy_log_table(model, num_states, theta).take(pair_ids)
    if weights is None:
        return nll.mean()
    weights = np.asarray(weights, dtype=np.float64)
    if normalize:
        total = weights.sum()
        if total <= 0:
            raise ContractError("batch weights sum to zero")
        return (nll * weights).sum() / total
    return (nll * weights).mean()


class _BatchSampler:
    """Batch index stream over weighted transitions."""

    def __init__(self, weights: np.ndarray, mode: str, rng: np.random.Generator):
        self.rng, self.mode = rng, mode
        self.n = weights.shape[0]
        if mode == "proportional":
            cdf = np.cumsum(weights)
            self.cdf = cdf / cdf[-1]

    def draw(self, size: int) -> np.ndarray:
        u = self.rng.random(size)
        if self.mode == "proportional":
            return np.minimum(np.searchsorted(self.cdf, u, side="right"), self.n - 1)
        return np.floor(u * self.n).astype(np.int64)


def _check_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ContractError(f"expected {n} transition weights, got shape {weights.shape}")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ContractError("weights must be finite and non-negative")
    if not weights.any():
        raise ContractError("all weights are zero")
    return weights


def _rngs(seed: int, tag: int, n: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, tag]).spawn(n)]


def train_bc(dataset: TrajectoryDataset, config: PolicyLearnConfig, weights=None):
    """Weighted BC on flattened transitions; returns (Policy, curve).

    ``weights`` is per transition (in ``dataset.transitions()`` order) or
    ``None`` for plain BC.  ``curve`` rows hold ``step`` and ``objective``, the
    mean batch loss since the previous row.
    """
    if len(dataset) == 0:
        raise ContractError("cannot clone an empty dataset")
    states, actions, _, _ = dataset.transitions()
    pairs = states * dataset.num_actions + actions
    weights = _check_weights(weights, pairs.shape[0])
    model = make_policy_model(dataset.num_states, dataset.num_actions, config.hidden, config.seed)
    (rng,) = _rngs(config.seed, 0x6263, 1)
    sampler = _BatchSampler(weights, config.sampling, rng)
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    params, curve, window = model.params, [], []
    for step in range(1, config.steps + 1):
        idx = sampler.draw(config.batch_size)
        w = None if config.sampling == "proportional" else weights[idx]
        theta = Tensor(params, requires_grad=True)
        loss = weighted_nll_loss(theta, model, pairs[idx], w, config.self_normalize)
        params = _step(opt, params, theta, loss, "policy", step)
        window.append(float(loss.data))
        if step % config.log_every == 0:
            curve.append({"step": step, "objective": float(np.mean(window))})
            window = []
    return Policy("mlp", model=model.copy(params)), curve


def _step(opt, params, theta, loss, stage, step):
    if not np.isfinite(loss.data):
        raise TrainingError(f"{stage} loss is {loss.data} at step {step}")
    backward(loss)
    return adam_step(opt, params, theta.grad)


def per_transition(dataset: TrajectoryDataset, per_trajectory: np.ndarray) -> np.ndarray:
    return np.repeat(per_trajectory, dataset.lengths)


def train_safemil_policy(d_u: TrajectoryDataset, cost_model, config: PolicyLearnConfig):
    """Policy extraction from the unlabeled data under a learned cost model."""
    if config.method == "safemil-trajectory":
        w = per_transition(d_u, trajectory_weights(cost_model, d_u, config.gamma, config.beta))
        return train_bc(d_u, config, w)
    if config.method == "safemil-transition":
        return train_bc(d_u, config, transition_weights(cost_model, d_u))
    if config.method == "safemil-threshold":
        b_hat = config.threshold
        if b_hat is None:
            b_hat = default_threshold(cost_model, d_u, config.gamma)
        chosen = select_preferred(cost_model, d_u, config.gamma, b_hat)
        if len(chosen) == 0:
            raise TrainingError(f"threshold {b_hat:g} selects no trajectories")
        return train_bc(chosen, config)
    raise ConfigError(f"{config.method!r} is not a SafeMIL method")


# ---------------------------------------------------------------------------
# T-REX with weighted BC


def make_reward_model(num_states: int, num_actions: int, hidden=(64, 64), seed: int = 0) -> MlpModel:
    return MlpModel.create([num_states + num_actions, *hidden, 1], "linear", seed)


def trex_loss(theta: Tensor, model: MlpModel, better, worse) -> Tensor:
    """Pairwise loss for "``better`` snippets outrank ``worse``": softplus(R_w - R_b)."""
    table = model.apply(encode_pairs(better.num_states, better.num_actions), theta)

    def returns(batch):
        return (table.take(batch.pair_ids) * batch.mask.astype(np.float64)).sum(axis=-1).sum(axis=-1)

    return (returns(worse) - returns(better)).softplus().mean()


def train_reward_model(d_n: TrajectoryDataset, d_u: TrajectoryDataset, config: PolicyLearnConfig):
    """Fit r(s, a) so that unlabeled snippets outrank non-preferred ones."""
    if len(d_n) == 0 or len(d_u) == 0:
        raise ContractError("reward training needs non-empty D^N and D^U")
    model = make_reward_model(d_u.num_states, d_u.num_actions, config.hidden, config.seed)
    (rng,) = _rngs(config.seed, 0x7472, 1)
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    params, losses = model.params, []
    for step in range(1, config.reward_steps + 1):
        better = sample_bags(d_u, 1, config.reward_snippet, rng, config.reward_batch)
        worse = sample_bags(d_n, 1, config.reward_snippet, rng, config.reward_batch)
        theta = Tensor(params, requires_grad=True)
        loss = trex_loss(theta, model, better, worse)
        params = _step(opt, params, theta, loss, "reward", step)
        losses.append(float(loss.data))
    return model.copy(params), losses


def reward_table(model: MlpModel, num_states: int, num_actions: int) -> np.ndarray:
    return model(encode_pairs(num_states, num_actions))


def train_trex_wbc(d_n: TrajectoryDataset, d_u: TrajectoryDataset, config: PolicyLearnConfig):
    """Reward learning by ranking, then BC weighted by sigmoid(r(s, a)).

    Returns (Policy, curve, reward_model).
    """
    reward, _ = train_reward_model(d_n, d_u, config)
    table = reward_table(reward, d_u.num_states, d_u.num_actions)
    states, actions, _, _ = d_u.transitions()
    r = table[states * d_u.num_actions + actions]
    policy, curve = train_bc(d_u, config, 0.5 * (1.0 + np.tanh(0.5 * r)))
    return policy, curve, reward


# ---------------------------------------------------------------------------
# DWBC with negative-unlabeled discriminator


def make_discriminator(num_states: int, num_actions: int, hidden=(64, 64), seed: int = 0) -> MlpModel:
    return MlpModel.create([num_states + num_actions + 1, *hidden, 1], "sigmoid", seed)


def disc_features(log_pi: np.ndarray, num_states: int, num_actions: int) -> np.ndarray:
    """Rows ``s * A + a``: one-hot(s), one-hot(a), log pi(a|s)."""
    return np.hstack([encode_pairs(num_states, num_actions), log_pi.reshape(-1, 1)])


def dwbc_disc_loss(theta: Tensor, model: MlpModel, features: np.ndarray, pairs_n: np.ndarray,
                   pairs_u: np.ndarray, eta: float) -> Tensor:
    """eta E_N[-log d] + E_U[-log(1-d)] - eta E_N[-log(1-d)], d clamped.

    ``features`` holds one row per (s, a) pair; the batches index into it.
    """
    lo, hi = D_CLAMP
    d = model.apply(features, theta).clip(lo, hi)
    d_n, d_u = d.take(pairs_n), d.take(pairs_u)
    return (-(d_n.log().mean()) * eta - (1.0 - d_u).log().mean()
            + (1.0 - d_n).log().mean() * eta)


def discriminator_table(model: MlpModel, log_pi: np.ndarray, num_states: int,
                        num_actions: int) -> np.ndarray:
    """Clamped d for every (s, a) pair, flattened."""
    lo, hi = D_CLAMP
    return np.clip(model(disc_features(log_pi, num_states, num_actions)), lo, hi)


def train_dwbc_nu(d_n: TrajectoryDataset, d_u: TrajectoryDataset, config: PolicyLearnConfig,
                  fixed_d: float | None = None):
    """Alternate one discriminator step and one weighted-BC step.

    The policy samples D^U transitions uniformly and weights each term by
    1 - d(s, a, log pi(a|s)), with log pi taken from the policy before its
    update.  ``fixed_d`` replaces the discriminator by a constant (used to
    check the reduction to plain BC).  Returns (Policy, curve, discriminator).
    """
    if len(d_n) == 0 or len(d_u) == 0:
        raise ContractError("DWBC-NU needs non-empty D^N and D^U")
    S, A = d_u.num_states, d_u.num_actions
    pairs_u = _pairs(d_u)
    pairs_n = _pairs(d_n)
    pi_model = make_policy_model(S, A, config.hidden, config.seed)
    disc = make_discriminator(S, A, config.hidden, config.seed + 1)
    (pi_rng,) = _rngs(config.seed, 0x6263, 1)
    (d_rng,) = _rngs(config.seed, 0x6477, 1)
    pi_sampler = _BatchSampler(np.ones(len(pairs_u)), "uniform", pi_rng)
    pi_opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    d_opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    pi_params, d_params = pi_model.params, disc.params
    curve, window = [], []
    for step in range(1, config.steps + 1):
        idx = pi_sampler.draw(config.batch_size)
        batch = pairs_u[idx]
        if fixed_d is None:
            log_pi = policy_log_table(pi_model, S, Tensor(pi_params)).data
            feats = disc_features(log_pi, S, A)
            bn = pairs_n[d_rng.integers(0, len(pairs_n), config.batch_size)]
            bu = pairs_u[d_rng.integers(0, len(pairs_u), config.batch_size)]
            theta_d = Tensor(d_params, requires_grad=True)
            d_loss = dwbc_disc_loss(theta_d, disc, feats, bn, bu, config.eta)
            d_params = _step(d_opt, d_params, theta_d, d_loss, "discriminator", step)
            lo, hi = D_CLAMP
            d = np.clip(disc.apply(feats, Tensor(d_params)).data, lo, hi)[batch]
        else:
            d = np.full(batch.shape, float(fixed_d))
        theta = Tensor(pi_params, requires_grad=True)
        loss = weighted_nll_loss(theta, pi_model, batch, 1.0 - d, config.self_normalize)
        pi_params = _step(pi_opt, pi_params, theta, loss, "policy", step)
        window.append(float(loss.data))
        if step % config.log_every == 0:
            curve.append({"step": step, "objective": float(np.mean(window))})
            window = []
    return Policy("mlp", model=pi_model.copy(pi_params)), curve, disc.copy(d_params)


def _pairs(dataset: TrajectoryDataset) -> np.ndarray:
    states, actions, _, _ = dataset.transitions()
    return states * dataset.num_actions + actions


def learn_policy(config: PolicyLearnConfig, d_u: TrajectoryDataset, d_n: TrajectoryDataset | None = None,
                 cost_model=None):
    """Dispatch on ``config.method``; returns (Policy, curve)."""
    if config.method == "bc-unlabeled":
        return train_bc(d_u, config)
    if config.method == "trex-wbc":
        return train_trex_wbc(d_n, d_u, config)[:2]
    if config.method == "dwbc-nu":
        return train_dwbc_nu(d_n, d_u, config)[:2]
    if cost_model is None:
        raise ContractError(f"{config.method} needs a trained cost model")
    return train_safemil_policy(d_u, cost_model, config)
