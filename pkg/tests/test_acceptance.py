"""Numbered acceptance checks.

Each test records a PASS/FAIL line (printed at the end of the pytest run under
"acceptance") and then asserts the same condition.  The default suite and
sweep are built once per session; the determinism check repeats the suite from
scratch in a second directory.
"""

import itertools
import time

import numpy as np
import pytest

from safemil.cmdp import Policy, TabularCmdp, exact_policy_eval, solve_constrained
from safemil.config import preset
from safemil.data import NON_PREFERRED, PREFERRED
from safemil.evaluation import (
    bootstrap_ci,
    compute_baselines,
    cvar_cost,
    evaluate_policy,
    normalize,
)
from safemil.experiment import Workspace, run_suite, run_sweep
from safemil.mil import (
    BagBatch,
    bag_scores,
    contains_preferred,
    lemma1_probability,
    make_cost_model,
    mean_cost_by_tag,
    mil_loss,
    pair_ordering_accuracy,
    sample_bags,
    train_cost_model,
)
from safemil.nn import grad_check
from safemil.policy import (
    disc_features,
    dwbc_disc_loss,
    make_discriminator,
    make_policy_model,
    make_reward_model,
    per_transition,
    trajectory_weights,
    transition_weights,
    trex_loss,
    weighted_nll_loss,
)

ENVS = ("speed_chain", "hazard_grid")


def perturbed(model, seed, scale=0.5):
    return model.copy(np.random.default_rng(seed).normal(0, scale, model.num_params))


def overlap(a, b):
    return a[0] <= b[1] and b[0] <= a[1]


def fmt(ci):
    return f"[{ci[0]:.3f}, {ci[1]:.3f}]"


@pytest.fixture(scope="session")
def suites(tmp_path_factory):
    out = {}
    for name in ENVS:
        t0 = time.perf_counter()
        ws = Workspace(preset(name), tmp_path_factory.mktemp(name))
        out[name] = (ws, run_suite(ws.config, workspace=ws), time.perf_counter() - t0)
    return out


@pytest.fixture(scope="session")
def chain_sweep(suites):
    ws = suites["speed_chain"][0]
    t0 = time.perf_counter()
    result = run_sweep(ws.config, workspace=ws)
    return result, time.perf_counter() - t0


# ---------------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_bag_containment_frequency(chain_data, acceptance):
    t0 = time.perf_counter()
    d_u = chain_data.d_u
    pref = np.flatnonzero(d_u.tags == PREFERRED)
    non = np.flatnonzero(d_u.tags == NON_PREFERRED)
    quarter = d_u.subset(np.concatenate([pref[:33], non[:99]]))
    rng = np.random.default_rng(2024)
    n = 100_000
    parts, ok = [], True
    for alpha, K, data in ((0.25, 8, quarter), (0.5, 16, d_u), (0.5, 64, d_u)):
        assert np.mean(data.tags == PREFERRED) == alpha
        freq = contains_preferred(sample_bags(data, K, 1, rng, n), data).mean()
        p = lemma1_probability(alpha, K)
        se = np.sqrt(p * (1 - p) / n)
        good = abs(freq - p) <= 3 * se
        ok &= bool(good)
        parts.append(f"a={alpha},K={K}: {freq:.5f} vs {p:.5f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30
    acceptance(1, ok, f"{'; '.join(parts)} ({elapsed:.1f}s)")
    assert ok


@pytest.mark.criterion(2)
def test_permutation_invariance(chain, chain_data, acceptance):
    t0 = time.perf_counter()
    model = perturbed(make_cost_model(chain.num_states, chain.num_actions), 7)
    rng = np.random.default_rng(3)
    batch = sample_bags(chain_data.d_u, 16, 5, rng, 1000)
    base = bag_scores(model, batch, 0.99)
    mismatches = 0
    for _ in range(20):
        order = np.argsort(rng.random((len(batch), batch.K)), axis=1)
        take = np.arange(len(batch))[:, None], order
        perm = BagBatch(batch.pair_ids[take], batch.mask[take], batch.sources[take], batch.label,
                        batch.num_states, batch.num_actions)
        mismatches += int(np.sum(bag_scores(model, perm, 0.99) != base))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    acceptance(2, ok, f"{mismatches} of 20000 permuted scores differ ({elapsed:.1f}s)")
    assert ok


@pytest.mark.criterion(3)
def test_gradients(chain, grid, chain_data, grid_data, acceptance):
    t0 = time.perf_counter()
    worst = {}
    for i in range(6):
        env, data = (chain, chain_data) if i % 2 == 0 else (grid, grid_data)
        S, A = env.num_states, env.num_actions
        rng = np.random.default_rng(i)
        cost = perturbed(make_cost_model(S, A, (12, 12)), 100 + i)
        policy = perturbed(make_policy_model(S, A, (12, 12)), 200 + i)
        reward = perturbed(make_reward_model(S, A, (12, 12)), 300 + i)
        disc = perturbed(make_discriminator(S, A, (12, 12)), 400 + i, 0.3)

        neg = sample_bags(data.d_n, 8, 5, rng, 6)
        unl = sample_bags(data.d_u, 8, 5, rng, 6)
        states, actions, _, _ = data.d_u.transitions()
        idx = rng.integers(0, states.shape[0], 64)
        pairs = (states * A + actions)[idx]
        w_traj = per_transition(data.d_u, trajectory_weights(cost, data.d_u, 0.99, 0.5))[idx]
        w_step = transition_weights(cost, data.d_u)[idx]
        better = sample_bags(data.d_u, 1, 5, rng, 8)
        worse = sample_bags(data.d_n, 1, 5, rng, 8)
        log_pi = np.log(rng.dirichlet(np.ones(A), S))
        feats = disc_features(log_pi, S, A)
        bn, bu = rng.integers(0, S * A, 32), rng.integers(0, S * A, 32)

        checks = {
            "bag ranking": (cost, lambda th: mil_loss(th, cost, neg, unl, 0.99)),
            "trajectory-weighted BC": (policy, lambda th: weighted_nll_loss(th, policy, pairs, w_traj)),
            "transition-weighted BC": (policy, lambda th: weighted_nll_loss(th, policy, pairs, w_step)),
            "T-REX": (reward, lambda th: trex_loss(th, reward, better, worse)),
            "DWBC-NU": (disc, lambda th: dwbc_disc_loss(th, disc, feats, bn, bu, 0.5)),
        }
        for name, (model, fn) in checks.items():
            err = grad_check(model.params, fn, n_coords=64, step=1e-5, seed=i).max_rel_error
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance(3, ok, f"max rel. error over 6 models: {detail} ({elapsed:.1f}s)")
    assert ok


def enumerate_deterministic(env):
    """Discounted (return, cost) of every deterministic time-dependent policy."""
    T, S, A = env.horizon, env.num_states, env.num_actions
    out = [exact_policy_eval(env, Policy("tabular", np.eye(A)[np.array(ch).reshape(T, S)]))
           for ch in itertools.product(range(A), repeat=T * S)]
    return np.array(out)


@pytest.mark.criterion(4)
def test_lp_matches_enumeration(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    # (S, A, T) with at most A^(S*T) = 4096 deterministic policies
    shapes = [(2, 2, 4), (3, 2, 4), (4, 2, 3), (2, 3, 3), (3, 3, 2), (4, 2, 2), (2, 3, 2), (3, 2, 3)]
    gaps, excess = [], []
    for i in range(20):
        S, A, T = shapes[i % len(shapes)]
        env = TabularCmdp(S, A, rng.dirichlet(np.ones(S), (S, A)), rng.uniform(-1, 1, (S, A)),
                          rng.uniform(0, 1, (S, A)), 0.0, 0.9, T, rng.dirichlet(np.ones(S)))
        table = enumerate_deterministic(env)
        lo, hi = table[:, 1].min(), table[:, 1].max()
        env = env.with_threshold(lo + rng.uniform(0.1, 0.9) * (hi - lo))
        best = table[table[:, 1] <= env.threshold + 1e-12, 0].max()
        r, c = exact_policy_eval(env, solve_constrained(env))
        gaps.append(best - r)
        excess.append(c - env.threshold)
    elapsed = time.perf_counter() - t0
    ok = max(gaps) <= 1e-6 and max(excess) <= 1e-6 and elapsed < 60
    acceptance(4, ok, f"max(best det. - LP return) {max(gaps):.2e}, max(LP cost - b) "
                      f"{max(excess):.2e} over 20 CMDPs ({elapsed:.1f}s)")
    assert ok


@pytest.mark.criterion(5)
def test_cost_model_separation(chain_data, acceptance):
    cfg = preset("speed_chain").cost_config(0, K=64, H=5)
    t0 = time.perf_counter()
    model, _ = train_cost_model(chain_data.d_n, chain_data.d_u, cfg, holdout=chain_data.holdout)
    acc = pair_ordering_accuracy(model, *chain_data.holdout, 64, 5, cfg.gamma, 1000,
                                 np.random.default_rng(5))
    by_tag = mean_cost_by_tag(model, chain_data.holdout[1])
    gap = by_tag[NON_PREFERRED] - by_tag[PREFERRED]
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.90 and gap >= 0.1 and elapsed < 180
    acceptance(5, ok, f"held-out pair accuracy {acc:.3f}, mean c_hat non-preferred "
                      f"{by_tag[NON_PREFERRED]:.3f} vs preferred {by_tag[PREFERRED]:.3f} "
                      f"({cfg.steps} steps, {elapsed:.1f}s)")
    assert ok


def exact_by_method(suite):
    out = {}
    for row in suite.exact_rows:
        out.setdefault(row["method"], []).append(row)
    return out


@pytest.mark.criterion(6)
def test_safety_headline(suites, acceptance):
    ok, parts = True, []
    for name in ENVS:
        ws, suite, elapsed = suites[name]
        rows = exact_by_method(suite)
        sm_cost = np.median([r["exact_cost"] for r in rows["safemil-trajectory"]])
        bc_cost = np.median([r["exact_cost"] for r in rows["bc-unlabeled"]])
        sm_ret = np.median([r["exact_norm_return"] for r in rows["safemil-trajectory"]])
        b = ws.env.threshold
        good = sm_cost <= b and sm_cost < bc_cost and sm_ret >= 0.8
        ok &= bool(good)
        parts.append(f"{name}: cost {sm_cost:.3f} (b={b:g}, BC {bc_cost:.3f}), "
                     f"norm. return {sm_ret:.3f} [suite {elapsed:.0f}s]")
    acceptance(6, ok, "; ".join(parts))
    assert ok


def sweep_ci(sweep, kind, K, H):
    return sweep.report(kind, K, H, "safemil-trajectory").metrics


@pytest.mark.criterion(7)
def test_bag_size_trend(chain_sweep, acceptance):
    sweep, elapsed = chain_sweep
    H = preset("speed_chain").cost.H
    big, small = sweep_ci(sweep, "K", 128, H), sweep_ci(sweep, "K", 1, H)
    ci_big, ci_small = big["ci"]["norm_cost"], small["ci"]["norm_cost"]
    ok = big["norm_cost"] <= small["norm_cost"] and ci_big[1] <= ci_small[0]
    acceptance(7, ok, f"norm. cost K=128 {big['norm_cost']:.3f} {fmt(ci_big)} vs K=1 "
                      f"{small['norm_cost']:.3f} {fmt(ci_small)} [sweep {elapsed:.0f}s]")
    assert ok


@pytest.mark.criterion(8)
def test_segment_length_stability(chain_sweep, acceptance):
    sweep, _ = chain_sweep
    cis = {H: sweep_ci(sweep, "H", 128, H) for H in (1, 5, 10)}
    ok = all(overlap(cis[a]["ci"]["norm_cost"], cis[b]["ci"]["norm_cost"])
             for a, b in itertools.combinations(cis, 2))
    detail = ", ".join(f"H={H} {m['norm_cost']:.3f} {fmt(m['ci']['norm_cost'])}"
                       for H, m in cis.items())
    acceptance(8, ok, f"norm. cost at K=128: {detail}")
    assert ok


@pytest.mark.criterion(9)
def test_weighting_ablation(suites, acceptance):
    ok, parts = True, []
    for name in ENVS:
        reports = suites[name][1].reports
        traj = reports["safemil-trajectory"].metrics
        step = reports["safemil-transition"].metrics
        good = overlap(traj["ci"]["norm_cost"], step["ci"]["norm_cost"])
        ok &= good
        parts.append(f"{name}: trajectory {traj['norm_cost']:.3f} {fmt(traj['ci']['norm_cost'])}, "
                     f"transition {step['norm_cost']:.3f} {fmt(step['ci']['norm_cost'])}")
    acceptance(9, ok, "; ".join(parts))
    assert ok


@pytest.mark.criterion(10)
def test_metric_fixed_points(chain, grid, acceptance):
    ok, parts = True, []
    for env in (chain, grid):
        ref = solve_constrained(env)
        ev = preset(env.name).eval
        base = compute_baselines(env, ref, ev.episodes, ev.eval_seed)
        stats = evaluate_policy(env, ref, ev.episodes, ev.eval_seed)
        nr, nc = normalize(stats.mean_return, stats.mean_cost, (base.ref_return, base.ref_cost),
                           base.random_return)
        sigma = stats.costs.std(ddof=1) / np.sqrt(ev.episodes)
        rnd = evaluate_policy(env, Policy.uniform(env), ev.episodes, ev.eval_seed)
        nr_rand, _ = normalize(rnd.mean_return, 0.0, (base.ref_return, 0.0), base.random_return)
        good = 0.95 <= nr <= 1.05 and abs(nc) <= 3 * sigma + 1e-12 and abs(nr_rand) <= 0.05
        ok &= good
        parts.append(f"{env.name}: reference ({nr:.3f}, {nc:.3f}), random {nr_rand:.3f}")
    acceptance(10, ok, "; ".join(parts))
    assert ok


@pytest.mark.criterion(11)
def test_cvar(acceptance):
    examples = [([0, 0, 0, 0, 10], 20, 0.0, 10.0), (list(range(1, 11)), 30, 0.0, 9.0),
                ([4.0] * 6, 20, 1.5, 2.5)]
    exact = all(cvar_cost(c, k, ref) == want for c, k, ref, want in examples)
    rng = np.random.default_rng(11)
    violations = 0
    for _ in range(1000):
        costs = rng.gamma(0.5, 2.0, rng.integers(1, 100))
        vals = [cvar_cost(costs, k) for k in (10, 20, 30, 50, 70, 100)]
        violations += sum(a < b for a, b in zip(vals, vals[1:]))
    ok = exact and violations == 0
    acceptance(11, ok, f"examples exact: {exact}; monotonicity violations: {violations}/1000 vectors")
    assert ok


@pytest.mark.criterion(12)
def test_determinism(suites, tmp_path_factory, acceptance):
    same = []
    for name in ENVS:
        ws1 = suites[name][0]
        ws2 = Workspace(preset(name), tmp_path_factory.mktemp(f"{name}_again"))
        run_suite(ws2.config, workspace=ws2)
        for f in ("summary.csv", "exact.csv"):
            same.append((ws1.out / f).read_bytes() == (ws2.out / f).read_bytes())
    ok = all(same)
    acceptance(12, ok, f"{sum(same)}/{len(same)} CSV files byte-identical across two full runs")
    assert ok


def test_bootstrap_on_suite_matches(suites):
    """The reported intervals are the bootstrap of the per-seed episodes."""
    rep = suites["speed_chain"][1].reports["bc-unlabeled"]
    want = bootstrap_ci([np.asarray(s.costs) for s in rep.seeds], resamples=rep.resamples,
                        level=rep.level, seed=rep.bootstrap_seed)
    assert tuple(rep.metrics["ci"]["cost"]) == want
