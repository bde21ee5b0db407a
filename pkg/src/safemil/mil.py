"""Cost learning from negative and unlabeled bags of trajectory segments.

A bag holds K segments of up to H steps drawn with replacement from one
dataset.  Its score is the mean over segments of the discounted predicted cost,
with the discount restarting at each segment's first step.  Negative bags
should outscore unlabeled ones; the Bradley-Terry loss enforces that.

Every state-action pair of a tabular problem is scored once per step (the
"cost table").  A batch of bags reduces to integer visit counts per (bag,
pair, step); scores are then one matrix product with the table.  Counting is
exact, so a score does not depend on the order of the segments in its bag.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import PREFERRED, TrajectoryDataset
from .errors import ConfigError, ContractError, TrainingError
from .nn import MlpModel, OptimizerState, Tensor, adam_step, as_tensor, backward

log = logging.getLogger(__name__)

NEGATIVE, UNLABELED = "negative", "unlabeled"


def encode_pairs(num_states: int, num_actions: int) -> np.ndarray:
    """One-hot state concatenated with one-hot action, row ``s * A + a``."""
    eye_s, eye_a = np.eye(num_states), np.eye(num_actions)
    return np.hstack([np.repeat(eye_s, num_actions, axis=0), np.tile(eye_a, (num_states, 1))])


def make_cost_model(num_states: int, num_actions: int, hidden=(64, 64), seed: int = 0,
                    embed: int | None = None) -> MlpModel:
    """Sigmoid-headed cost network; ``embed`` adds a linear input projection."""
    sizes = [num_states + num_actions] + ([embed] if embed else []) + list(hidden) + [1]
    return MlpModel.create(sizes, "sigmoid", seed, linear_first=bool(embed))


def cost_table(cost, num_states: int, num_actions: int, theta: Tensor | None = None):
    """Predicted cost for every (s, a) pair.

    ``cost`` is a sigmoid :class:`MlpModel` (returns a Tensor, differentiable
    through ``theta``) or an explicit array of shape (S, A) / (S*A,), used for
    ground-truth substitution.
    """
    if isinstance(cost, MlpModel):
        if cost.head != "sigmoid":
            raise ContractError("cost model must have a sigmoid head")
        if cost.input_size != num_states + num_actions:
            raise ContractError("cost model input does not match the dataset")
        return cost.apply(encode_pairs(num_states, num_actions), theta)
    table = np.asarray(cost, dtype=np.float64).reshape(-1)
    if table.shape[0] != num_states * num_actions:
        raise ContractError("cost table size does not match the dataset")
    return Tensor(table)


@dataclass
class Bag:
    """K segments (each an (h, 2) array of state/action) with a bag label."""

    segments: list
    label: str
    H: int
    sources: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def K(self) -> int:
        return len(self.segments)


@dataclass
class BagBatch:
    """Vectorised bags: pair ids (n, K, H), validity mask and source rows."""

    pair_ids: np.ndarray
    mask: np.ndarray
    sources: np.ndarray
    label: str
    num_states: int
    num_actions: int

    def __len__(self) -> int:
        return self.pair_ids.shape[0]

    @property
    def K(self) -> int:
        return self.pair_ids.shape[1]

    @property
    def H(self) -> int:
        return self.pair_ids.shape[2]

    def design(self, gamma: float) -> np.ndarray:
        """(n, S*A) matrix D with bag scores ``D @ table / K``."""
        n, _, H = self.pair_ids.shape
        SA = self.num_states * self.num_actions
        t = np.arange(H)
        keys = ((np.arange(n)[:, None, None] * SA + self.pair_ids) * H + t)[self.mask]
        counts = np.bincount(keys, minlength=n * SA * H).reshape(n, SA, H)
        return counts @ (gamma ** t)

    def bag(self, i: int) -> Bag:
        segs = []
        for ids, m in zip(self.pair_ids[i], self.mask[i]):
            ids = ids[m]
            segs.append(np.stack([ids // self.num_actions, ids % self.num_actions], axis=1))
        return Bag(segs, self.label, self.H, self.sources[i].copy())


def bag_label(dataset: TrajectoryDataset) -> str:
    return NEGATIVE if dataset.role == "non_preferred" else UNLABELED


def sample_bags(dataset: TrajectoryDataset, K: int, H: int, rng: np.random.Generator,
                n: int = 1) -> BagBatch:
    """Draw ``n`` bags; each segment picks a trajectory uniformly with
    replacement, then a start uniformly over positions that fit H steps."""
    if len(dataset) == 0:
        raise ContractError("cannot sample bags from an empty dataset")
    if K < 1 or H < 1:
        raise ConfigError("K and H must be >= 1")
    src = rng.integers(0, len(dataset), size=(n, K))
    lengths = dataset.lengths[src]
    n_starts = np.maximum(lengths - H, 0) + 1
    start = np.floor(rng.random((n, K)) * n_starts).astype(np.int64)
    offsets = np.arange(H)
    width = dataset.pair_ids.shape[1]
    pos = np.minimum(start[..., None] + offsets, width - 1)
    ids = dataset.pair_ids.ravel()[src[..., None] * width + pos]
    mask = offsets < np.minimum(lengths, H)[..., None]
    ids *= mask
    return BagBatch(ids, mask, src, bag_label(dataset), dataset.num_states, dataset.num_actions)


def sample_bag(dataset: TrajectoryDataset, K: int, H: int, rng: np.random.Generator) -> Bag:
    return sample_bags(dataset, K, H, rng, 1).bag(0)


def lemma1_probability(alpha: float, K: int) -> float:
    """Chance that K with-replacement draws include a preferred trajectory."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    if int(K) != K or K < 1:
        raise ContractError("K must be a positive integer")
    return 1.0 - (1.0 - alpha) ** int(K)


def contains_preferred(batch: BagBatch, dataset: TrajectoryDataset) -> np.ndarray:
    """Per bag: does any segment come from a trajectory tagged preferred?"""
    return (dataset.tags[batch.sources] == PREFERRED).any(axis=1)


def batch_scores(table: Tensor, batch: BagBatch, gamma: float) -> Tensor:
    """Bag scores (n,) from a per-pair cost table tensor."""
    return (Tensor(batch.design(gamma)) @ table) / batch.K


def bag_scores(cost, batch: BagBatch, gamma: float) -> np.ndarray:
    table = cost_table(cost, batch.num_states, batch.num_actions)
    return batch_scores(table, batch, gamma).data


def bag_score(cost, bag: Bag, gamma: float, num_states: int, num_actions: int) -> float:
    """Score of a single bag: mean over segments of the discounted cost sum."""
    if bag.K == 0:
        raise ContractError("bag has no segments")
    H = max(bag.H, max(len(s) for s in bag.segments))
    ids = np.zeros((1, bag.K, H), dtype=np.int64)
    mask = np.zeros((1, bag.K, H), dtype=bool)
    for k, seg in enumerate(bag.segments):
        seg = np.asarray(seg, dtype=np.int64).reshape(-1, 2)
        if seg.size and (seg[:, 0].max() >= num_states or seg[:, 1].max() >= num_actions):
            raise ContractError("segment ids out of range for the cost model")
        ids[0, k, : len(seg)] = seg[:, 0] * num_actions + seg[:, 1]
        mask[0, k, : len(seg)] = True
    batch = BagBatch(ids, mask, bag.sources, bag.label, num_states, num_actions)
    return float(bag_scores(cost, batch, gamma)[0])


def bt_loss(score_n, score_u):
    """Bradley-Terry loss for "negative outranks unlabeled": softplus(u - n)."""
    if isinstance(score_n, Tensor) or isinstance(score_u, Tensor):
        return (as_tensor(score_u) - as_tensor(score_n)).softplus()
    return np.logaddexp(0.0, np.asarray(score_u, dtype=np.float64) - score_n)


@dataclass
class CostModelConfig:
    gamma: float = 0.99
    K: int = 128
    H: int = 5
    batch_size: int = 32
    steps: int = 5000
    lr: float = 1e-3
    weight_decay: float = 0.01
    hidden: tuple = (64, 64)
    embed: int | None = None
    seed: int = 0
    log_every: int = 100
    holdout_pairs: int = 200

    def __post_init__(self):
        if self.K < 1 or self.H < 1:
            raise ConfigError("K and H must be >= 1")
        if self.batch_size < 1 or self.steps < 0 or self.log_every < 1:
            raise ConfigError("batch_size, steps and log_every must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        self.hidden = tuple(self.hidden)


def mil_loss(theta: Tensor, model: MlpModel, neg: BagBatch, unl: BagBatch, gamma: float) -> Tensor:
    """Mean Bradley-Terry loss over paired negative/unlabeled bags."""
    table = cost_table(model, neg.num_states, neg.num_actions, theta)
    return bt_loss(batch_scores(table, neg, gamma), batch_scores(table, unl, gamma)).mean()


def pair_ordering_accuracy(cost, d_n: TrajectoryDataset, d_u: TrajectoryDataset, K: int,
                           H: int, gamma: float, n_pairs: int, rng) -> float:
    """Fraction of fresh (negative, unlabeled) bag pairs with the negative scoring higher."""
    neg = sample_bags(d_n, K, H, rng, n_pairs)
    unl = sample_bags(d_u, K, H, rng, n_pairs)
    table = cost_table(cost, d_n.num_states, d_n.num_actions)
    return float(np.mean(batch_scores(table, neg, gamma).data > batch_scores(table, unl, gamma).data))


def train_cost_model(d_n: TrajectoryDataset, d_u: TrajectoryDataset, config: CostModelConfig,
                     holdout: tuple | None = None):
    """Fit the cost network; returns (model, curve).

    ``curve`` rows are dicts with ``step``, ``loss`` (mean batch loss since the
    previous row) and ``holdout_pair_accuracy`` on ``holdout = (d_n, d_u)``
    (fresh bags from the training data when not given).
    """
    if len(d_n) == 0 or len(d_u) == 0:
        raise ContractError("cost training needs non-empty D^N and D^U")
    if (d_n.num_states, d_n.num_actions) != (d_u.num_states, d_u.num_actions):
        raise ContractError("datasets disagree on state/action counts")
    S, A = d_n.num_states, d_n.num_actions
    model = make_cost_model(S, A, config.hidden, config.seed, config.embed)
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    root = np.random.SeedSequence([config.seed, 0x6D696C])
    rng = np.random.default_rng(root.spawn(1)[0])
    eval_rng = np.random.default_rng(root.spawn(2)[1])
    hold_n, hold_u = holdout if holdout is not None else (d_n, d_u)
    params = model.params
    curve, window = [], []
    for step in range(1, config.steps + 1):
        neg = sample_bags(d_n, config.K, config.H, rng, config.batch_size)
        unl = sample_bags(d_u, config.K, config.H, rng, config.batch_size)
        theta = Tensor(params, requires_grad=True)
        loss = mil_loss(theta, model, neg, unl, config.gamma)
        if not np.isfinite(loss.data):
            raise TrainingError(f"cost loss is {loss.data} at step {step}")
        backward(loss)
        params = adam_step(opt, params, theta.grad)
        window.append(float(loss.data))
        if step % config.log_every == 0:
            acc = pair_ordering_accuracy(model.copy(params), hold_n, hold_u, config.K, config.H,
                                         config.gamma, config.holdout_pairs, eval_rng)
            curve.append({"step": step, "loss": float(np.mean(window)),
                          "holdout_pair_accuracy": acc})
            log.debug("cost step %d loss %.4f acc %.3f", step, curve[-1]["loss"], acc)
            window = []
    return model.copy(params), curve


def mean_cost_by_tag(cost, dataset: TrajectoryDataset) -> dict:
    """Mean predicted cost over transitions grouped by hidden trajectory tag."""
    table = cost_table(cost, dataset.num_states, dataset.num_actions).data
    states, actions, owner, _ = dataset.transitions()
    values = table[states * dataset.num_actions + actions]
    tags = dataset.tags[owner]
    return {str(t): float(values[tags == t].mean()) for t in np.unique(tags)}
