import numpy as np
import pytest

from safemil.cmdp import Trajectory
from safemil.data import NON_PREFERRED, PREFERRED, TrajectoryDataset
from safemil.errors import ConfigError, ContractError, TrainingError
from safemil.mil import (
    NEGATIVE,
    UNLABELED,
    Bag,
    CostModelConfig,
    bag_score,
    bag_scores,
    bt_loss,
    contains_preferred,
    cost_table,
    encode_pairs,
    lemma1_probability,
    make_cost_model,
    mean_cost_by_tag,
    mil_loss,
    pair_ordering_accuracy,
    sample_bag,
    sample_bags,
    train_cost_model,
)
from safemil.nn import Tensor, grad_check


def separable(n_pref, n_non, length=10, role="unlabeled"):
    """S=2, A=2: preferred trajectories only visit (0, 0), non-preferred only (1, 1)."""
    trajs = [Trajectory(np.zeros(length), np.zeros(length), tag=PREFERRED) for _ in range(n_pref)]
    trajs += [Trajectory(np.ones(length), np.ones(length), tag=NON_PREFERRED) for _ in range(n_non)]
    return TrajectoryDataset(trajs, role, 2, 2)


def random_cost_model(S, A, seed):
    model = make_cost_model(S, A, hidden=(8, 8), seed=seed)
    rng = np.random.default_rng(seed)
    return model.copy(rng.normal(0, 0.6, model.num_params))


class TestSampling:
    def test_single_trajectory_full_length(self, rng):
        ds = TrajectoryDataset([Trajectory([0, 1, 2], [1, 0, 1])], "unlabeled", 3, 2)
        bag = sample_bag(ds, 3, 3, rng)
        assert bag.K == 3 and bag.label == UNLABELED
        for seg in bag.segments:
            assert seg.tolist() == [[0, 1], [1, 0], [2, 1]]

    def test_long_H_gives_whole_trajectories(self, rng):
        trajs = [Trajectory([0, 1], [0, 0]), Trajectory([2, 2, 1, 0], [1, 1, 0, 0])]
        ds = TrajectoryDataset(trajs, "non_preferred", 3, 2)
        bag = sample_bag(ds, 20, 50, rng)
        assert bag.label == NEGATIVE
        for seg, src in zip(bag.segments, bag.sources):
            assert seg.tolist() == [list(p) for p in trajs[src].steps]

    def test_segments_are_contiguous(self, chain_data, rng):
        batch = sample_bags(chain_data.d_u, 16, 5, rng, n=10)
        assert batch.pair_ids.shape == (10, 16, 5)
        for i in range(10):
            bag = batch.bag(i)
            for seg, src in zip(bag.segments, bag.sources):
                tr = chain_data.d_u.trajectories[src]
                full = np.stack([tr.states, tr.actions], 1)
                assert len(seg) == min(5, len(tr))
                starts = [j for j in range(len(tr) - len(seg) + 1)
                          if np.array_equal(full[j:j + len(seg)], seg)]
                assert starts

    def test_start_positions_uniform(self, rng):
        ds = TrajectoryDataset([Trajectory(np.arange(6), np.zeros(6))], "unlabeled", 6, 1)
        batch = sample_bags(ds, 1, 3, rng, n=40_000)
        first = batch.pair_ids[:, 0, 0]
        freq = np.bincount(first, minlength=6) / len(first)
        assert np.all(freq[4:] == 0)
        assert np.allclose(freq[:4], 0.25, atol=0.01)

    def test_errors(self, rng):
        empty = TrajectoryDataset([], "unlabeled", 2, 2)
        with pytest.raises(ContractError):
            sample_bag(empty, 2, 2, rng)
        with pytest.raises(ConfigError):
            sample_bag(separable(1, 1), 0, 2, rng)

    def test_containment_monte_carlo(self):
        rng = np.random.default_rng(7)
        ds = separable(25, 75)
        n = 100_000
        hits = contains_preferred(sample_bags(ds, 8, 1, rng, n), ds)
        p = lemma1_probability(0.25, 8)
        assert abs(hits.mean() - p) < 3 * np.sqrt(p * (1 - p) / n)


class TestContainmentProbability:
    @pytest.mark.parametrize("alpha,K,expected", [
        (0.5, 1, 0.5), (0.25, 8, 1 - 0.75 ** 8), (0.0, 5, 0.0), (1.0, 3, 1.0), (0.5, 64, 1 - 0.5 ** 64)])
    def test_values(self, alpha, K, expected):
        assert lemma1_probability(alpha, K) == expected

    def test_example_digits(self):
        assert lemma1_probability(0.25, 8) == pytest.approx(0.8998871, abs=1e-7)

    def test_monotone(self):
        alphas = np.linspace(0, 1, 21)
        for K in (1, 2, 8, 64):
            vals = [lemma1_probability(a, K) for a in alphas]
            assert np.all(np.diff(vals) >= 0)
        for a in (0.1, 0.5, 0.9):
            vals = [lemma1_probability(a, K) for K in range(1, 40)]
            assert np.all(np.diff(vals) >= 0)

    @pytest.mark.parametrize("alpha,K", [(-0.1, 2), (1.2, 2), (0.5, 0), (0.5, 2.5)])
    def test_bad_input(self, alpha, K):
        with pytest.raises(ContractError):
            lemma1_probability(alpha, K)


class TestScore:
    def test_zero_model_half(self):
        model = make_cost_model(3, 2, hidden=(4,))
        bag = Bag([np.array([[0, 1]]), np.array([[2, 0]])], UNLABELED, 1)
        assert bag_score(model, bag, 0.99, 3, 2) == 0.5

    def test_geometric_sum(self):
        bag = Bag([np.array([[0, 0], [1, 1], [0, 1]])], UNLABELED, 3)
        assert bag_score(np.ones((2, 2)), bag, 0.9, 2, 2) == pytest.approx(2.71, abs=1e-12)

    def test_discount_restarts_per_segment(self):
        table = np.array([[0.0, 0.0], [1.0, 0.0]])
        bag = Bag([np.array([[1, 0], [1, 0], [0, 0]]), np.array([[0, 0], [1, 0]])], NEGATIVE, 3)
        assert bag_score(table, bag, 0.9, 2, 2) == pytest.approx((1.9 + 0.9) / 2, abs=1e-12)

    def test_shape_mismatch(self):
        bag = Bag([np.array([[3, 0]])], UNLABELED, 1)
        with pytest.raises(ContractError):
            bag_score(make_cost_model(3, 2), bag, 0.9, 3, 2)
        with pytest.raises(ContractError):
            cost_table(make_cost_model(4, 2), 3, 2)
        with pytest.raises(ContractError):
            cost_table(np.ones(5), 3, 2)

    def test_encoding(self):
        enc = encode_pairs(3, 2)
        assert enc.shape == (6, 5)
        assert enc[3].tolist() == [0, 1, 0, 0, 1]

    def test_permutation_invariance(self, chain, chain_data):
        model = random_cost_model(chain.num_states, chain.num_actions, 3)
        rng = np.random.default_rng(0)
        batch = sample_bags(chain_data.d_u, 16, 5, rng, 50)
        for i in range(50):
            bag = batch.bag(i)
            ref = bag_score(model, bag, 0.99, chain.num_states, chain.num_actions)
            for _ in range(20):
                order = rng.permutation(bag.K)
                perm = Bag([bag.segments[j] for j in order], bag.label, bag.H)
                assert bag_score(model, perm, 0.99, chain.num_states, chain.num_actions) == ref

    def test_batch_matches_single(self, chain, chain_data, rng):
        model = random_cost_model(chain.num_states, chain.num_actions, 5)
        batch = sample_bags(chain_data.d_n, 8, 5, rng, 12)
        scores = bag_scores(model, batch, 0.95)
        for i in range(12):
            single = bag_score(model, batch.bag(i), 0.95, chain.num_states, chain.num_actions)
            assert scores[i] == pytest.approx(single, rel=1e-14)

    def test_bounds(self, grid, grid_data, rng):
        for seed in range(5):
            model = random_cost_model(grid.num_states, grid.num_actions, seed)
            batch = sample_bags(grid_data.d_u, 8, 10, rng, 100)
            scores = bag_scores(model, batch, 0.99)
            assert np.all(scores > 0)
            assert np.all(scores < sum(0.99 ** t for t in range(10)))


class TestBradleyTerry:
    def test_values(self):
        assert bt_loss(0.3, 0.3) == pytest.approx(np.log(2), abs=1e-15)
        assert bt_loss(1.0, 0.0) == pytest.approx(0.313262, abs=1e-6)
        assert bt_loss(800.0, 0.0) == 0.0
        assert np.isfinite(bt_loss(-800.0, 0.0))

    def test_tensor_matches_numpy(self):
        n, u = np.array([0.1, 2.0, -3.0]), np.array([0.5, -1.0, 40.0])
        assert np.allclose(bt_loss(Tensor(n), Tensor(u)).data, bt_loss(n, u), rtol=1e-14)

    def test_ordering_rate_with_true_costs(self):
        """True costs, non-preferred strictly costlier: ordering rate equals the containment probability."""
        table = np.array([[0.0, 0.0], [0.0, 1.0]])
        rng = np.random.default_rng(11)
        n = 100_000
        for alpha, K in ((0.5, 2), (0.25, 4)):
            d_u = separable(int(alpha * 100), 100 - int(alpha * 100))
            d_n = separable(0, 50, role="non_preferred")
            neg = bag_scores(table, sample_bags(d_n, K, 5, rng, n), 0.99)
            unl = bag_scores(table, sample_bags(d_u, K, 5, rng, n), 0.99)
            p = lemma1_probability(alpha, K)
            rate = np.mean(neg > unl)
            assert abs(rate - p) < 3 * np.sqrt(p * (1 - p) / n)


class TestTraining:
    def test_loss_gradient(self, chain, chain_data):
        rng = np.random.default_rng(1)
        S, A = chain.num_states, chain.num_actions
        for seed in range(5):
            model = random_cost_model(S, A, seed)
            neg = sample_bags(chain_data.d_n, 4, 5, rng, 6)
            unl = sample_bags(chain_data.d_u, 4, 5, rng, 6)
            rep = grad_check(model.params, lambda th: mil_loss(th, model, neg, unl, 0.99))
            assert rep.max_rel_error < 1e-4, rep

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            CostModelConfig(K=0)
        with pytest.raises(ConfigError):
            CostModelConfig(gamma=1.5)

    def test_separable_loss(self):
        d_u = separable(100, 100)
        d_n = separable(0, 50, role="non_preferred")
        cfg = CostModelConfig(K=64, H=10, steps=3000, log_every=500, holdout_pairs=100)
        model, curve = train_cost_model(d_n, d_u, cfg)
        assert [r["step"] for r in curve] == [500, 1000, 1500, 2000, 2500, 3000]
        assert curve[-1]["loss"] < 0.1
        assert curve[-1]["holdout_pair_accuracy"] == 1.0
        table = cost_table(model, 2, 2).data
        assert table[3] > 0.9 and table[0] < 0.1

    def test_deterministic(self, chain_data):
        cfg = CostModelConfig(K=8, steps=30, log_every=10)
        a, ca = train_cost_model(chain_data.d_n, chain_data.d_u, cfg)
        b, cb = train_cost_model(chain_data.d_n, chain_data.d_u, cfg)
        assert np.array_equal(a.params, b.params) and ca == cb

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts(self, chain_data):
        cfg = CostModelConfig(K=4, steps=5, lr=float("nan"))
        with pytest.raises(TrainingError):
            train_cost_model(chain_data.d_n, chain_data.d_u, cfg)

    def test_empty(self, chain_data):
        empty = TrajectoryDataset([], "non_preferred", chain_data.d_u.num_states,
                                  chain_data.d_u.num_actions)
        with pytest.raises(ContractError):
            train_cost_model(empty, chain_data.d_u, CostModelConfig(steps=1))

    def test_chain_separation(self, chain_data):
        cfg = CostModelConfig(K=64, H=5, steps=2000, log_every=1000)
        model, _ = train_cost_model(chain_data.d_n, chain_data.d_u, cfg)
        by_tag = mean_cost_by_tag(model, chain_data.d_u)
        assert by_tag[NON_PREFERRED] - by_tag[PREFERRED] >= 0.1
        acc = pair_ordering_accuracy(model, *chain_data.holdout, 64, 5, 0.99, 1000,
                                     np.random.default_rng(9))
        assert acc >= lemma1_probability(0.5, 64) - 0.05
