import numpy as np
import pytest

from conftest import make_experience, make_state
from quadrl.agent.dqn import (
    FLAT_WIDTH,
    N_ACTIONS,
    QNET,
    Hyperparams,
    build_network,
    encode_states,
    epsilon_schedule,
    q_values,
    q_values_batch,
    select_action,
    sync_target,
    td_targets,
    train_step,
)
from quadrl.domain.errors import NonFiniteError, ShapeError
from quadrl.domain.models import IMAGE_SIZE, Experience, StackedState
from quadrl.nn.adam import AdamState
from quadrl.replay.buffer import ReplayBuffer


def _random_states(n, seed=0):
    rng = np.random.default_rng(seed)
    shape = (IMAGE_SIZE, IMAGE_SIZE)
    return [
        StackedState(
            rng.uniform(0.0, 20.0, shape).astype(np.float32),
            rng.uniform(0.0, 20.0, shape).astype(np.float32),
            rng.uniform(-1.0, 1.0, 3).astype(np.float32),
        )
        for _ in range(n)
    ]


# =============================================================================
# Architecture
# =============================================================================

class TestArchitecture:

    def test_shapes(self):
        params = build_network(0)
        images, vel = encode_states([make_state(4.0), make_state(8.0)], 20.0)
        q, cache = QNET.forward(params, (images, vel))
        assert cache["z1"].shape == (2, 16, 14, 14)
        assert cache["z2"].shape == (2, 8, 12, 12)
        assert cache["flat_width"] == FLAT_WIDTH == 1152
        assert cache["cat"].shape == (2, 1152 + 16)
        assert q.shape == (2, N_ACTIONS) == (2, 2)

    def test_layer_table(self):
        table = build_network(0).shape_table()
        assert table == [
            ("conv", (16, 2, 6, 6), (16,)),
            ("conv", (8, 16, 3, 3), (8,)),
            ("dense", (16, 3), (16,)),
            ("dense", (256, 1168), (256,)),
            ("dense", (2, 256), (2,)),
        ]

    def test_same_seed_same_network(self):
        assert build_network(5).equal(build_network(5))
        assert not build_network(5).equal(build_network(6))

    def test_inputs_scaled_by_max_range(self):
        images, vel = encode_states([make_state(10.0, (1.0, 0.25, 0.0))], 20.0)
        assert np.all(images == 0.5)
        assert vel.tolist() == [[1.0, 0.25, 0.0]]
        with pytest.raises(ShapeError):
            encode_states([], 20.0)

    def test_q_values_single_matches_batch(self):
        params = build_network(1)
        s = make_state(6.0)
        assert np.allclose(q_values(params, s), q_values_batch(params, [s, make_state(2.0)])[0], atol=1e-5)


# =============================================================================
# Exploration
# =============================================================================

class TestEpsilon:

    def test_endpoints(self):
        assert epsilon_schedule(0, 15000) == 1.0
        assert epsilon_schedule(15000, 15000) == 0.0
        assert epsilon_schedule(40000, 15000) == 0.0
        assert epsilon_schedule(7500, 15000) == pytest.approx(0.5)

    def test_monotone(self):
        eps = [epsilon_schedule(a, 15000) for a in range(0, 16000, 250)]
        assert all(x >= y for x, y in zip(eps, eps[1:]))

    def test_negative_count(self):
        with pytest.raises(ValueError):
            epsilon_schedule(-1, 100)

    def test_greedy_ties_lowest(self):
        rng = np.random.default_rng(0)
        assert select_action(np.array([1.0, 1.0]), 0.0, rng) == 0
        assert select_action(np.array([0.0, 2.0]), 0.0, rng) == 1

    def test_random_covers_both_actions(self):
        rng = np.random.default_rng(0)
        q = np.array([5.0, 0.0])
        picks = np.array([select_action(q, 1.0, rng) for _ in range(100_000)])
        assert abs(picks.mean() - 0.5) <= 0.01

    def test_bias_shift_keeps_greedy_choice(self):
        params = build_network(4)
        states = _random_states(16, seed=4)
        before = q_values_batch(params, states)
        params.layers[-1].bias += np.float32(7.0)
        after = q_values_batch(params, states)
        assert np.allclose(after, before + 7.0, atol=1e-4)
        rng = np.random.default_rng(0)
        assert [select_action(q, 0.0, rng) for q in after] == [select_action(q, 0.0, rng) for q in before]

    def test_zero_head_ties_to_first_action(self):
        params = build_network(0)
        params.layers[-1].weight[:] = 0.0
        params.layers[-1].bias[:] = 0.0
        q = q_values(params, make_state(0.0))
        assert q.tolist() == [0.0, 0.0]
        assert select_action(q, 0.0, np.random.default_rng(0)) == 0

    def test_swapped_head_rows_swap_outputs(self):
        params = build_network(2)
        states = _random_states(6, seed=2)
        q = q_values_batch(params, states)
        head = params.layers[-1]
        head.weight[:] = head.weight[::-1].copy()
        head.bias[:] = head.bias[::-1].copy()
        assert np.allclose(q_values_batch(params, states), q[:, ::-1], atol=1e-6)

    def test_batch_order_follows_input(self):
        params = build_network(3)
        states = _random_states(7, seed=3)
        perm = np.random.default_rng(3).permutation(len(states))
        q = q_values_batch(params, states)
        shuffled = q_values_batch(params, [states[i] for i in perm])
        assert np.allclose(shuffled, q[perm], atol=1e-5)

    def test_invalid_epsilon(self):
        with pytest.raises(ValueError):
            select_action(np.zeros(2), 1.5, np.random.default_rng(0))


# =============================================================================
# Learning
# =============================================================================

class TestLearning:

    def test_hyperparams_validation(self):
        assert Hyperparams().target_sync_every == 150
        with pytest.raises(ValueError):
            Hyperparams(gamma=1.5)
        with pytest.raises(ValueError):
            Hyperparams(batch_size=0)

    def test_td_targets(self):
        target = build_network(2)
        live = make_experience(r=3.0, done=False)
        dead = make_experience(r=-100.0, done=True)
        y = td_targets([live, dead], target, gamma=0.9)
        q_next = q_values(target, live.s_next).astype(np.float64)
        assert y[0] == pytest.approx(3.0 + 0.9 * q_next.max(), rel=1e-6)
        assert y[1] == -100.0

    def test_train_step_fits_a_fixed_batch(self):
        params = build_network(0)
        target = sync_target(params)
        adam = AdamState.for_params(params, lr=1e-3)
        batch = [make_experience(r=3.0, a=i % 2, value=2.0 + i) for i in range(8)]
        first = train_step(params, target, batch, adam, gamma=0.9)
        for _ in range(60):
            last = train_step(params, target, batch, adam, gamma=0.9)
        assert last < first
        assert params.version == 61
        assert target.version == 0

    def test_sync_target_is_a_copy(self):
        params = build_network(0)
        target = sync_target(params)
        params.layers[-1].bias[0] += 1.0
        assert not target.equal(params)

    def test_non_finite_loss_aborts(self):
        params = build_network(0)
        before = params.copy()
        bad = Experience(s=make_state(), a=0, s_next=make_state(), r=float("nan"), done=True)
        with pytest.raises(NonFiniteError):
            train_step(params, sync_target(params), [bad], AdamState.for_params(params))
        assert params.equal(before)


# =============================================================================
# Small deterministic MDP
# =============================================================================

# state -> action -> (next state or None for terminal, reward)
MDP = {
    0: {0: (1, 0.0), 1: (2, -1.0)},
    1: {0: (2, 0.0), 1: (None, 1.0)},
    2: {0: (None, 10.0), 1: (0, 0.0)},
}
GAMMA = 0.9


def value_iteration(mdp, gamma, sweeps=200):
    q = {s: {a: 0.0 for a in acts} for s, acts in mdp.items()}
    for _ in range(sweeps):
        for s, acts in mdp.items():
            for a, (nxt, r) in acts.items():
                q[s][a] = r + (0.0 if nxt is None else gamma * max(q[nxt].values()))
    return q


def _mdp_state(s):
    vel = np.zeros(3)
    vel[s] = 1.0
    return make_state(5.0 * (s + 1), vel)


@pytest.mark.slow
def test_learns_small_mdp_q_values():
    q_star = value_iteration(MDP, GAMMA)
    values = [v for acts in q_star.values() for v in acts.values()]
    tol = 0.05 * (max(values) - min(values))

    states = {s: _mdp_state(s) for s in MDP}
    transitions = []
    for s, acts in MDP.items():
        for a, (nxt, r) in acts.items():
            s_next = states[s] if nxt is None else states[nxt]
            transitions.append(Experience(s=states[s], a=a, s_next=s_next, r=r, done=nxt is None))
    buffer = ReplayBuffer(capacity=600, allowed_rewards=None)
    buffer.push(transitions * 100)

    rng = np.random.default_rng(0)
    params = build_network(0)
    target = sync_target(params)
    adam = AdamState.for_params(params, lr=1e-3)
    worst = np.inf
    for step in range(1, 20_001):
        train_step(params, target, buffer.sample(32, rng), adam, gamma=GAMMA)
        if step % 150 == 0:
            target = sync_target(params)
        if step % 500 == 0:
            q = q_values_batch(params, [states[s] for s in MDP])
            worst = max(abs(float(q[s][a]) - q_star[s][a]) for s in MDP for a in MDP[s])
            if worst <= tol:
                break
    assert worst <= tol
