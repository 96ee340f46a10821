"""Reward shaping, discounted returns, replay buffer, TD3 mechanics,
episode execution in both adaptation modes, curriculum, and usage metrics."""

import math

import numpy as np
import pytest
from scipy import stats

from slimnav import pathoracle, worldsim
from slimnav.auxtrain import (CurriculumController, EpisodeLog, EpisodeStep,
                              ReplayBuffer, RewardWeights, TD3Agent, TD3Config,
                              check_gate, compute_eta, format_percent,
                              q_return, random_walk_probe, reward, run_episode,
                              train_auxiliary, ConstraintConfig)
from slimnav.errors import ConfigError
from slimnav.slimnet import MLPSpec, SlimmableMLP, active_params
from slimnav.worldsim import ACTIVE, COLLIDED, OBS_WIDTH, REACHED

from td3_toy import train_toy_agent


# ---------------------------------------------------------------------------
# reward arithmetic

def test_reward_weights_validation():
    with pytest.raises(ConfigError):
        RewardWeights(collision=-1.0)
    with pytest.raises(ConfigError):
        RewardWeights(sensing=-0.01)


def test_reward_branches():
    w = RewardWeights(collision=10, goal=10, progress=1, time=0.1,
                      compute=0.1, sensing=0.05)
    assert reward(5.0, COLLIDED, 1.0, 3, 3, w) == -10.0
    assert reward(-2.0, REACHED, 0.25, 1, 0, w) == 10.0
    # worked case: d=1, rho=0.5, p=(3,1)
    got = reward(1.0, ACTIVE, 0.5, 3, 1, w)
    want = math.tanh(1.0) - 0.1 - 0.1 * 0.5 - 0.05 * (3 + 1)
    assert got == pytest.approx(want, abs=1e-15)
    assert got == pytest.approx(0.41159415595576, abs=1e-12)
    # all non-terminal terms vanish except the time penalty
    assert reward(0.0, ACTIVE, 0.0, 0, 0, w) == pytest.approx(-0.1)


def test_q_return_cases():
    assert q_return([1.0, 1.0, 1.0], 0.5) == pytest.approx(1.75)
    rewards = [3.0, -1.0, 2.0, 0.5]
    assert q_return(rewards, 0.0, 2) == 2.0
    # recursion identity on a random episode
    rng = np.random.default_rng(0)
    eps = list(rng.normal(size=20))
    for t in range(19):
        assert q_return(eps, 0.9, t) == pytest.approx(
            eps[t] + 0.9 * q_return(eps, 0.9, t + 1), rel=1e-12)
    with pytest.raises(ValueError):
        q_return(eps, 1.5)
    with pytest.raises(ValueError):
        q_return(eps, 0.9, 20)


def test_random_walk_probe_noiseless_goal_only():
    w = RewardWeights(collision=0, goal=5, progress=0, time=0,
                      compute=0, sensing=0)
    res = random_walk_probe(w, 0.9, n_walks=3, seed=1, step_std=0.0)
    # 100 m out, 1 m steps, 2 m goal radius: terminal on step 98
    assert res.mean_steps == 98
    assert res.mean_q == pytest.approx(0.9 ** 97 * 5.0, rel=1e-12)
    assert res.std_q == pytest.approx(0.0, abs=1e-15)


def test_random_walk_probe_stalled_walk_is_negative():
    res = random_walk_probe(RewardWeights(), 0.95, n_walks=2, seed=2,
                            step_mean=0.0, step_std=0.0, max_steps=50)
    assert res.mean_q < 0.0
    assert res.mean_steps == 50


def test_random_walk_probe_default_weights_positive():
    res = random_walk_probe(RewardWeights(), 0.99, n_walks=300, seed=3)
    assert res.mean_q > 0.0
    assert res.q_values.shape == (300,)


# ---------------------------------------------------------------------------
# replay buffer

def test_buffer_validation_and_fifo_eviction():
    with pytest.raises(ConfigError):
        ReplayBuffer(0, 2, 1)
    buf = ReplayBuffer(4, 1, 1)
    for i in range(6):
        buf.add([float(i)], [0.0], float(i), [0.0], 0.0)
    assert buf.size == 4
    # oldest two (0, 1) were evicted in insertion order
    assert sorted(buf.states[:, 0].tolist()) == [2.0, 3.0, 4.0, 5.0]
    assert buf.ptr == 2


def test_buffer_sampling_without_replacement():
    buf = ReplayBuffer(32, 1, 1)
    for i in range(32):
        buf.add([float(i)], [0.0], float(i), [0.0], 0.0)
    s, a, r, s2, done = buf.sample(32, np.random.default_rng(0))
    assert sorted(r.tolist()) == [float(i) for i in range(32)]
    assert s.dtype == np.float64
    with pytest.raises(ValueError):
        buf.sample(33, np.random.default_rng(0))


def test_buffer_stores_float32():
    buf = ReplayBuffer(2, 1, 1)
    buf.add([math.pi], [math.e], math.tau, [1.0 / 3.0], 1.0)
    s, a, r, s2, done = buf.sample(1, np.random.default_rng(0))
    assert s[0, 0] == np.float32(math.pi)
    assert s[0, 0] != math.pi
    assert done[0] == 1.0


# ---------------------------------------------------------------------------
# TD3 agent

def test_td3_config_validation():
    with pytest.raises(ConfigError):
        TD3Config(gamma=1.0)
    with pytest.raises(ConfigError):
        TD3Config(tau=0.0)
    with pytest.raises(ConfigError):
        TD3Config(policy_delay=0)
    with pytest.raises(ConfigError):
        TD3Config(batch_size=256, buffer_capacity=128)


def test_actor_respects_action_bounds():
    agent = TD3Agent(3, [0.25], [1.0], TD3Config(batch_size=8), seed=0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = agent.act(rng.normal(size=3) * 5)
        assert 0.25 <= a[0] <= 1.0
    noisy = agent.noisy_act(rng.normal(size=3), rng)
    assert 0.25 <= noisy[0] <= 1.0


def test_random_action_uniform_within_bounds():
    agent = TD3Agent(2, [1.0, 0.0], [3.0, 3.0], TD3Config(batch_size=8), seed=0)
    rng = np.random.default_rng(1)
    draws = np.array([agent.random_action(rng) for _ in range(500)])
    assert draws[:, 0].min() >= 1.0 and draws[:, 0].max() <= 3.0
    assert draws[:, 1].min() >= 0.0 and draws[:, 1].max() <= 3.0
    assert stats.kstest(draws[:, 0], stats.uniform(1.0, 2.0).cdf).pvalue > 0.01
    assert stats.kstest(draws[:, 1], stats.uniform(0.0, 3.0).cdf).pvalue > 0.01


def filled_buffer(agent, n, seed):
    buf = ReplayBuffer(max(n, agent.cfg.batch_size), agent.state_dim,
                       agent.action_dim)
    rng = np.random.default_rng(seed)
    for _ in range(n):
        buf.add(rng.normal(size=agent.state_dim),
                rng.uniform(agent.low, agent.high),
                rng.normal(), rng.normal(size=agent.state_dim),
                0.0)
    return buf


def test_polyak_tau_one_copies_networks():
    cfg = TD3Config(tau=1.0, policy_delay=1, batch_size=16)
    agent = TD3Agent(4, [-1.0], [1.0], cfg, actor_hidden=(8,),
                     critic_hidden=(8,), seed=3)
    buf = filled_buffer(agent, 32, 0)
    agent.update(buf, np.random.default_rng(0))
    for net, tgt in ((agent.actor, agent.actor_target),
                     (agent.critic1, agent.critic1_target),
                     (agent.critic2, agent.critic2_target)):
        for p, q in zip(net.weights + net.biases, tgt.weights + tgt.biases):
            assert np.array_equal(p, q)


def test_actor_updates_only_on_delay():
    cfg = TD3Config(policy_delay=3, batch_size=16)
    agent = TD3Agent(4, [-1.0], [1.0], cfg, actor_hidden=(8,),
                     critic_hidden=(8,), seed=4)
    buf = filled_buffer(agent, 64, 1)
    rng = np.random.default_rng(2)
    before = [w.copy() for w in agent.actor.weights]
    l1 = agent.update(buf, rng)
    l2 = agent.update(buf, rng)
    assert math.isnan(l1["actor"]) and math.isnan(l2["actor"])
    assert all(np.array_equal(a, b) for a, b in zip(before, agent.actor.weights))
    l3 = agent.update(buf, rng)
    assert not math.isnan(l3["actor"])
    assert any(not np.array_equal(a, b)
               for a, b in zip(before, agent.actor.weights))


def test_done_transitions_regress_to_reward():
    # with done=1 everywhere the bootstrap is cut: critics regress to the
    # constant reward regardless of the target networks
    cfg = TD3Config(batch_size=32, policy_delay=10**9)
    agent = TD3Agent(2, [-1.0], [1.0], cfg, critic_hidden=(16, 16), seed=5)
    buf = ReplayBuffer(64, 2, 1)
    rng = np.random.default_rng(3)
    for _ in range(64):
        buf.add(rng.normal(size=2), rng.uniform(-1, 1, size=1), 2.5,
                rng.normal(size=2), 1.0)
    for _ in range(1500):
        agent.update(buf, rng)
    s, a, *_ = buf.sample(32, rng)
    q = agent.critic1.forward(np.concatenate([s, a], axis=1))
    assert np.allclose(q, 2.5, atol=0.2)


def test_td3_learns_toy_task_one_seed():
    initial, best, updates = train_toy_agent(seed=0, max_updates=5000)
    assert updates <= 5000
    assert best >= initial + 0.5 * abs(initial)


# ---------------------------------------------------------------------------
# curriculum

def test_curriculum_controller():
    with pytest.raises(ConfigError):
        CurriculumController(start=0.0)
    with pytest.raises(ConfigError):
        CurriculumController(threshold=0.0)
    cur = CurriculumController(start=10, increment=10, maximum=40, threshold=0.8)
    assert cur.update(0.5) == 10.0          # below threshold: stays
    assert cur.update(0.8) == 20.0          # exactly at threshold: advances
    assert cur.update(1.0) == 30.0
    assert cur.update(1.0) == 40.0
    assert cur.update(1.0) == 40.0          # capped
    assert cur.update(0.0) == 40.0          # never decreases


# ---------------------------------------------------------------------------
# episode execution

@pytest.fixture(scope="module")
def small_world():
    grid = worldsim.generate_world((20, 20, 8), resolution=1.0)
    nav_spec = MLPSpec(u=4 * OBS_WIDTH, q=(16, 8), v=3,
                       output_activation="tanh", output_scale=2.0)
    nav = SlimmableMLP(nav_spec, seed=0)
    return grid, nav


def test_run_episode_rejects_bad_mode(small_world):
    grid, nav = small_world
    with pytest.raises(ConfigError):
        run_episode(grid, nav, mode="Q", spawn=[3.5, 3.5, 3.5],
                    goal=[10.5, 3.5, 3.5])


def test_run_episode_fixed_rho_accounting(small_world):
    grid, nav = small_world
    log = run_episode(grid, nav, mode="C", spawn=[3.5, 3.5, 3.5],
                      goal=[16.5, 16.5, 3.5], fixed_rho=0.5, max_steps=6)
    assert 1 <= log.path_steps <= 6
    for s in log.steps:
        assert s.rho == 0.5
        assert (s.p_f, s.p_d) == (3, 3)
        assert s.m_active == active_params(nav.spec, 0.5)[0]


def test_run_episode_policy_min_rho_clipped(small_world):
    grid, nav = small_world
    log = run_episode(grid, nav, mode="C", spawn=[3.5, 3.5, 3.5],
                      goal=[16.5, 16.5, 3.5], rho_min=0.25,
                      policy=lambda x: np.array([-7.0]), max_steps=5)
    for s in log.steps:
        assert s.rho == 0.25
        assert s.m_active == active_params(nav.spec, 0.25)[0]


def test_run_episode_sensing_mask_lags_one_step(small_world):
    grid, nav = small_world
    emitted = []

    def policy(x):
        emitted.append((1.0, 0.0) if len(emitted) % 2 == 0 else (2.4, 7.0))
        return np.asarray(emitted[-1])

    log = run_episode(grid, nav, mode="S", spawn=[3.5, 3.5, 3.5],
                      goal=[16.5, 16.5, 3.5], policy=policy, max_steps=4)
    # first acquisition is always max power; each later acquisition uses the
    # levels emitted (rounded and clipped) on the previous step
    assert (log.steps[0].p_f, log.steps[0].p_d) == (3, 3)
    want = [(1, 0), (2, 3), (1, 0)]
    for s, w in zip(log.steps[1:], want):
        assert (s.p_f, s.p_d) == w
    for s in log.steps:
        assert s.rho == 1.0


def test_run_episode_transition_chain(small_world):
    grid, nav = small_world
    transitions = []
    log = run_episode(grid, nav, mode="C", spawn=[3.5, 3.5, 3.5],
                      goal=[16.5, 16.5, 3.5], fixed_rho=1.0, max_steps=5,
                      transition_sink=lambda *t: transitions.append(t))
    assert len(transitions) == log.path_steps
    for (s, a, r, s2, done), nxt in zip(transitions[:-1], transitions[1:]):
        assert done == 0.0
        assert np.array_equal(s2, nxt[0])
    s, a, r, s2, done = transitions[-1]
    if log.outcome == "timeout":
        assert done == 0.0
        assert not np.array_equal(s, s2)     # freshly sensed terminal state
    else:
        assert done == 1.0
    assert [t[2] for t in transitions] == log.rewards


def test_run_episode_vertical_lock(small_world):
    grid, nav = small_world
    log = run_episode(grid, nav, mode="C", spawn=[3.5, 3.5, 3.5],
                      goal=[16.5, 16.5, 3.5], vertical_locked=True,
                      max_steps=8)
    for s in log.steps:
        assert s.position[2] == pytest.approx(3.5)


# ---------------------------------------------------------------------------
# gate checking and usage metrics

def fake_log(outcome, n_steps, optimal_steps, rho=1.0, p_f=3, p_d=3):
    steps = [EpisodeStep(position=np.zeros(3), rho=rho, p_f=p_f, p_d=p_d,
                         reward=0.0, m_active=0, mean_forward_depth=0.0,
                         mean_downward_depth=0.0) for _ in range(n_steps)]
    return EpisodeLog(steps=steps, outcome=outcome, spawn=np.zeros(3),
                      goal=np.ones(3), optimal_steps=optimal_steps,
                      optimal_length=float(optimal_steps))


def test_check_gate():
    ok, v = check_gate([fake_log(REACHED, 10, 8), fake_log(REACHED, 12, 8)], 1.5)
    assert ok and v == []
    ok, v = check_gate([fake_log(REACHED, 13, 8)], 1.5)
    assert not ok and "exceeds beta" in v[0]
    ok, v = check_gate([fake_log(COLLIDED, 3, 8)], 1.5)
    assert not ok and "collided" in v[0]


def test_constraint_config_validation():
    with pytest.raises(ConfigError):
        ConstraintConfig(beta=0.9)
    with pytest.raises(ConfigError):
        ConstraintConfig(alpha=1.5)


def test_compute_eta_table_values():
    spec = MLPSpec(u=8, q=(4, 2), v=1)
    # craft step-level powers averaging (2.6, 2.2): five steps
    logs = [fake_log(REACHED, 1, 1, rho=1.0, p_f=f, p_d=d)
            for f, d in ((3, 3), (3, 3), (2, 2), (2, 2), (3, 1))]
    rep = compute_eta(logs, spec)
    assert rep.mean_p_f == pytest.approx(2.6)
    assert rep.mean_p_d == pytest.approx(2.2)
    assert rep.eta_w == pytest.approx(0.80)
    assert format_percent(rep.eta_w) == "80%"
    assert rep.eta_m == pytest.approx(1.0)    # rho stayed 1
    assert rep.n_episodes == 5 and rep.n_steps == 5


def test_compute_eta_rounding_case():
    spec = MLPSpec(u=8, q=(4, 2), v=1)
    # means (2.9, 0.73): eta_w = 3.63 / 6 = 60.5%
    pairs = [(3, 1)] * 73 + [(3, 0)] * 17 + [(2, 0)] * 10
    logs = [fake_log(REACHED, 1, 1, p_f=f, p_d=d) for f, d in pairs]
    rep = compute_eta(logs, spec)
    assert rep.eta_w == pytest.approx(0.605)
    assert format_percent(rep.eta_w, 1) == "60.5%"
    assert format_percent(rep.eta_w) == "61%"


def test_compute_eta_ignores_failures_and_requires_success():
    spec = MLPSpec(u=8, q=(4, 2), v=1)
    logs = [fake_log(REACHED, 2, 2, rho=0.5),
            fake_log(COLLIDED, 2, 2, rho=0.0, p_f=0, p_d=0)]
    rep = compute_eta(logs, spec)
    assert rep.mean_rho == pytest.approx(0.5)
    assert rep.n_episodes == 1
    with pytest.raises(ValueError):
        compute_eta([fake_log(COLLIDED, 2, 2)], spec)


def test_format_percent_half_up():
    assert format_percent(0.805) == "81%"
    assert format_percent(0.804) == "80%"
    assert format_percent(0.5) == "50%"
    assert format_percent(0.12345, 1) == "12.3%"


# ---------------------------------------------------------------------------
# auxiliary training loop (structure smoke; learning is covered by the
# acceptance suite's long runs)

def test_train_auxiliary_smoke():
    grid = worldsim.generate_world((20, 20, 8), resolution=1.0, density=0.05,
                                   seed=2)
    graph = pathoracle.build_graph(grid, vertical_locked=True)
    regions = pathoracle.partition_regions(grid, (0.6, 0.2, 0.2))
    sampler = pathoracle.TaskSampler(graph, regions, flight_z=3)
    nav = SlimmableMLP(MLPSpec(u=4 * OBS_WIDTH, q=(16, 8), v=3,
                               output_activation="tanh", output_scale=2.0),
                       seed=0)
    cfg = TD3Config(batch_size=32, exploration_steps=150,
                    buffer_capacity=5000, max_episode_steps=25)
    res = train_auxiliary([sampler], nav, "C", cfg, RewardWeights(),
                          ConstraintConfig(), seed=0, total_env_steps=260,
                          eval_every_episodes=8, eval_episodes=2,
                          gate_episodes=3, gate_distance=6.0,
                          curriculum=CurriculumController(start=6.0, maximum=6.0),
                          actor_hidden=(8,), critic_hidden=(8,))
    assert res.env_steps >= 260
    assert res.exploration_actions.shape[1] == 1
    assert np.all(res.exploration_actions >= 0.25 - 1e-12)
    assert np.all(res.exploration_actions <= 1.0 + 1e-12)
    assert len(res.update_log) > 0
    assert res.gate.episodes and len(res.gate.episodes) == 3
    # an untrained navigation network cannot pass the gate; the failure is
    # reported, not hidden
    assert res.gate.ok == (len(res.gate.violations) == 0)
    assert "gate" in res.gate.summary()
    for log in res.episodes:
        for s in log.steps:
            assert 0.25 - 1e-12 <= s.rho <= 1.0 + 1e-12
