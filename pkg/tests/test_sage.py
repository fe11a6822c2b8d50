import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from reachguard import dynamics as D
from reachguard import hj_grid as H
from reachguard import sage as S
from reachguard.critics import T_FAILURE, T_NONE, critic_q
from reachguard.envs import DoubleIntegratorEnv, TrackEnv


# -- gate ---------------------------------------------------------------------

def test_gate_examples():
    assert S.gate(5.0, 3.0) == S.PASS_THROUGH
    assert S.gate(2.9, 3.0) == S.INTERVENE
    assert S.gate(3.0, 3.0) == S.PASS_THROUGH


def test_gate_nonfinite_intervenes_and_counts():
    cfg = S.GateConfig(epsilon=1.0)
    for q in (math.nan, math.inf, -math.inf, 2.0):
        S.gate(q, cfg.epsilon, cfg)
    assert cfg.nonfinite == 3
    assert cfg.interventions == 3


def test_gate_config_validation():
    with pytest.raises(ValueError):
        S.GateConfig(epsilon=-0.5)
    with pytest.raises(ValueError):
        S.GateConfig(source="oracle")


@given(st.floats(-10, 10), st.floats(0, 10))
def test_gate_threshold_property(q, eps):
    assert (S.gate(q, eps) == S.PASS_THROUGH) == (q >= eps)


# -- static policy on the double integrator -----------------------------------

@pytest.fixture(scope="module")
def di_grid_small():
    model = D.double_integrator()
    spec = H.default_spec("di", (81, 81))
    V, _ = H.solve(spec, model, H.default_l("di"), H.make_control_mesh(model, 21), 0.05, 0.9999,
                   tol=1e-8, max_iters=5000, scheme="rk4")
    return V


def test_static_di_brakes_toward_interior(di_grid_small):
    pol = S.StaticSafetyPolicy(di_grid_small, D.double_integrator(), 0.05)
    assert S.static_policy_action(pol, np.array([0.7, 1.0]))[0] == -1.0
    assert S.static_policy_action(pol, np.array([-0.7, -1.0]))[0] == 1.0


def test_static_outside_grid_falls_back(di_grid_small):
    pol = S.StaticSafetyPolicy(di_grid_small, D.double_integrator(), 0.05)
    u = pol.action(np.array([3.0, 1.0]))
    assert u[0] == -1.0 and pol.fallbacks == 1


def test_static_rejects_unconverged(di_grid_small):
    V = di_grid_small.copy()
    V.metadata["converged"] = False
    with pytest.raises(ValueError):
        S.StaticSafetyPolicy(V, D.double_integrator(), 0.05)


def test_bike_fallback_is_full_brake():
    assert np.array_equal(S.fallback_action(D.bike(), np.zeros(4)), [D.bike().control_lo[0], 0.0])


# -- safety actor --------------------------------------------------------------

class QuadraticCritic:
    """Frozen Q(x, u) = -(u - target)^2 with the Mlp forward/backward interface."""

    def __init__(self, obs_dim, target=0.3):
        self.obs_dim = obs_dim
        self.target = target

    def forward(self, inp):
        u = inp[:, self.obs_dim:]
        return -np.sum((u - self.target) ** 2, axis=1, keepdims=True), inp

    def __call__(self, inp):
        return self.forward(inp)[0]

    def backward(self, cache, dy):
        g = np.zeros_like(cache)
        g[:, self.obs_dim:] = -2.0 * (cache[:, self.obs_dim:] - self.target) * dy
        return [], g


def _sac(obs_dim=2, alpha=0.2, lr=3e-3, seed=0):
    return S.SafetyActorCritic(obs_dim, D.double_integrator(), np.random.default_rng(seed), hidden=(16, 16),
                               lr=lr, alpha=alpha)


def test_safety_actor_finds_quadratic_argmax():
    sac = _sac(alpha=0.0, lr=3e-3)
    sac.critic = QuadraticCritic(2)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(64, 2))
    for _ in range(2000):
        S.update_safety_actor(sac, {"x": x}, rng)
    mean_action = sac.actor.act(x, deterministic=True)
    assert np.all(np.abs(mean_action - 0.3) < 0.02)


def test_entropy_only_widens_policy_to_squashed_maximum():
    # with a zero critic only the entropy term acts; the tanh-corrected entropy
    # peaks at log std ~ -0.13 (mean 0), so the spread grows to there, not to the clamp
    sac = _sac(alpha=0.2, lr=1e-2)
    sac.critic = QuadraticCritic(2)
    sac.critic.forward = lambda inp: (np.zeros((len(inp), 1)), inp)
    sac.critic.backward = lambda cache, dy: ([], np.zeros_like(cache))
    sac.actor.net.biases[-1][1] = -3.0
    rng = np.random.default_rng(2)
    x = rng.normal(size=(64, 2))
    mu0, ls0 = sac.actor.dist(x)[:2]
    for _ in range(3000):
        S.update_safety_actor(sac, {"x": x}, rng)
    mu, ls = sac.actor.dist(x)[:2]
    assert ls0.mean() < -2.5
    assert abs(ls.mean() + 0.13) < 0.15
    assert np.abs(mu).mean() < 0.1


def test_safety_actor_gradient_matches_finite_difference():
    sac = _sac(alpha=0.2)
    x = np.array([[0.3, -0.5]])
    xi = np.array([[0.7]])

    def objective():
        s = sac.actor.sample(x, xi)
        q = critic_q(sac.critic, x, s["u_n"])
        return float(np.mean(sac.alpha * s["logp"] - q))

    s = sac.actor.sample(x, xi)
    inp = np.concatenate([x, s["u_n"]], axis=1)
    _, cache = sac.critic.forward(inp)
    _, gx = sac.critic.backward(cache, np.ones((1, 1)))
    grads = sac.actor.backward(s, -gx[:, 2:], sac.alpha)
    h = 1e-6
    for p, g in zip(sac.actor.net.params, grads):
        flat = p.reshape(-1)
        for i in range(0, flat.size, max(1, flat.size // 7)):
            old = flat[i]
            flat[i] = old + h
            up = objective()
            flat[i] = old - h
            down = objective()
            flat[i] = old
            assert g.reshape(-1)[i] == pytest.approx((up - down) / (2 * h), abs=1e-5)


# -- safety critic --------------------------------------------------------------

def _chain_batch(n, rng, l_a=1.0, l_b=0.5):
    # two states as one-hot features: A -> B, B -> B
    is_a = rng.random(n) < 0.5
    x = np.where(is_a[:, None], [1.0, 0.0], [0.0, 1.0])
    x_next = np.tile([0.0, 1.0], (n, 1))
    return {"x": x, "u": rng.uniform(-1, 1, (n, 1)), "x_next": x_next, "l_x": np.where(is_a, l_a, l_b),
            "l_next": np.full(n, l_b), "terminal": np.full(n, T_NONE), "r": np.zeros(n)}


def test_safety_critic_chain_matches_dp():
    sac = _sac(lr=3e-3)
    sac.tau = 0.1
    rng = np.random.default_rng(0)
    g = 0.9
    for _ in range(3000):
        S.update_safety_critic(sac, _chain_batch(64, rng), g, rng)
    u = np.linspace(-1, 1, 11)[:, None]
    qa = critic_q(sac.critic, np.tile([1.0, 0.0], (11, 1)), u)
    qb = critic_q(sac.critic, np.tile([0.0, 1.0], (11, 1)), u)
    # exact fixed point: V(B) = 0.5, V(A) = (1 - g) * 1 + g * min(1, 0.5)
    assert np.all(np.abs(qb - 0.5) < 0.01)
    assert np.all(np.abs(qa - (0.1 + 0.9 * 0.5)) < 0.01)


def test_safety_critic_gamma_zero_regresses_onto_l():
    sac = _sac(lr=3e-3)
    rng = np.random.default_rng(4)
    for _ in range(2000):
        b = _chain_batch(64, rng, l_a=0.8, l_b=-0.3)
        S.update_safety_critic(sac, b, 0.0, rng)
    u = np.zeros((1, 1))
    assert critic_q(sac.critic, np.array([[1.0, 0.0]]), u)[0] == pytest.approx(0.8, abs=0.01)
    assert critic_q(sac.critic, np.array([[0.0, 1.0]]), u)[0] == pytest.approx(-0.3, abs=0.01)


def test_safety_critic_failure_targets_are_l():
    sac = _sac(lr=3e-3)
    rng = np.random.default_rng(5)
    for _ in range(2000):
        b = _chain_batch(64, rng, l_a=-0.2, l_b=-0.6)
        b["terminal"] = np.full(64, T_FAILURE)
        S.update_safety_critic(sac, b, 0.95, rng)
    u = np.zeros((1, 1))
    assert critic_q(sac.critic, np.array([[1.0, 0.0]]), u)[0] == pytest.approx(-0.2, abs=0.01)


# -- performance agent ----------------------------------------------------------

def test_sac_target_gamma_zero_is_reward():
    r = np.array([0.5, -1.0])
    y = S.sac_target(r, np.array([9.0, 9.0]), np.array([8.0, 7.0]), np.array([-2.0, 3.0]), 0.0, 0.2,
                     np.array([True, True]))
    assert np.array_equal(y, r)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 0.999))
def test_sac_min_target_property(q1, q2, logp, g):
    y = S.sac_target(0.0, np.array([q1]), np.array([q2]), np.array([logp]), g, 0.2, np.array([True]))
    assert y[0] <= g * (max(q1, q2) - 0.2 * logp) + 1e-9


def test_sac_bandit_finds_zero_action():
    model = D.double_integrator()
    agent = S.PerformanceAgent.create(2, model, np.random.default_rng(0), hidden=(32, 32), lr=3e-3, gamma=0.0)
    rng = np.random.default_rng(1)
    for _ in range(2000):
        u = rng.uniform(-1, 1, (128, 1))
        batch = {"x": np.zeros((128, 2)), "u": u, "r": -u[:, 0] ** 2, "x_next": np.zeros((128, 2)),
                 "terminal": np.full(128, T_NONE)}
        S.sac_update(agent, batch, rng)
    assert abs(agent.action(np.zeros(2), deterministic=True)[0]) < 0.05


def test_twin_critics_same_shape():
    agent = S.PerformanceAgent.create(3, D.dubins(), np.random.default_rng(0))
    assert [p.shape for p in agent.q1.params] == [p.shape for p in agent.q2.params]
    assert agent.alpha == 0.2 and agent.gamma == 0.99 and agent.tau == 0.005


# -- gated stepping ---------------------------------------------------------------

def _controllers(di_grid_small, eps):
    model = D.double_integrator()
    pol = S.StaticSafetyPolicy(di_grid_small, model, 0.05)
    propose = lambda o, r, d: r.uniform(-1, 1, 1)  # noqa: E731
    return (S.GatedController(model, propose, S.GateConfig(eps), pol),
            S.GatedController(model, propose, None, None))


def _roll(ctrl, seed, steps=150):
    env = DoubleIntegratorEnv(seed=seed)
    obs = env.reset("random")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(steps):
        rec = S.sage_step(env, obs, ctrl, None, rng)
        out.append((rec.u.copy(), rec.source))
        obs = rec.result.obs
        if rec.result.done:
            obs = env.reset("random")
    return out


def test_gate_never_fires_at_minus_infinity(di_grid_small):
    gated, plain = _controllers(di_grid_small, -math.inf)
    a, b = _roll(gated, 11), _roll(plain, 11)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))
    assert gated.gate_cfg.interventions == 0


def test_gate_always_fires_at_plus_infinity(di_grid_small):
    gated, _ = _controllers(di_grid_small, math.inf)
    out = _roll(gated, 12, 60)
    assert all(src == "safety" for _, src in out)
    assert gated.gate_cfg.interventions == 60


def test_gate_audit_and_counter(di_grid_small):
    gated, _ = _controllers(di_grid_small, 0.3)
    env = DoubleIntegratorEnv(seed=3)
    obs = env.reset("random")
    rng = np.random.default_rng(3)
    fired = 0
    for _ in range(300):
        rng_copy = np.random.default_rng()
        rng_copy.bit_generator.state = rng.bit_generator.state
        proposed = rng_copy.uniform(-1, 1, 1)
        q = gated.safety.q(obs.state, proposed)
        rec = S.sage_step(env, obs, gated, None, rng)
        assert rec.q_s == q
        if q >= 0.3:
            assert rec.source == "performance" and np.array_equal(rec.u, proposed)
        else:
            fired += 1
            assert rec.source == "safety"
        obs = env.reset("random") if rec.result.done else rec.result.obs
    assert fired == gated.gate_cfg.interventions and fired > 0


# -- training loop ------------------------------------------------------------------

def _small_cfg(mode, **kw):
    base = dict(mode=mode, safety="static", epsilon=0.2, total_steps=600, warmup=200, eval_interval=300,
                batch_size=32, buffer_size=5000, hidden=(16, 16))
    base.update(kw)
    return S.SageConfig(**base)


def test_replay_audit(di_grid_small):
    mk = lambda seed=None: DoubleIntegratorEnv(seed=seed)  # noqa: E731
    r1 = S.sage_train(mk, _small_cfg("sage"), seed=0, static_value=di_grid_small)
    assert r1.buffer_size == 600 and r1.interventions > 0
    r2 = S.sage_train(mk, _small_cfg("safesac"), seed=0, static_value=di_grid_small)
    assert r2.buffer_size == r2.pass_through < 600


def test_sage_train_deterministic_csv(di_grid_small, tmp_path):
    mk = lambda seed=None: DoubleIntegratorEnv(seed=seed)  # noqa: E731
    S.sage_train(mk, _small_cfg("sage"), seed=5, static_value=di_grid_small, out_dir=tmp_path / "a")
    S.sage_train(mk, _small_cfg("sage"), seed=5, static_value=di_grid_small, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "train_metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "train_metrics.csv").read_bytes()
    assert a.splitlines()[0] == b"step,episode,ECP,avg_speed,interventions,return"
    assert len(a.splitlines()) == 3
    assert list((tmp_path / "a" / "checkpoints").glob("actor_600.mlpc"))


def test_neural_safety_mode_runs():
    mk = lambda seed=None: DoubleIntegratorEnv(seed=seed)  # noqa: E731
    res = S.sage_train(mk, _small_cfg("sage", safety="neural", epsilon=0.0), seed=1)
    assert res.buffer_size == 600 and len(res.metrics) == 2


def test_static_mode_requires_grid():
    mk = lambda seed=None: DoubleIntegratorEnv(seed=seed)  # noqa: E731
    with pytest.raises(ValueError):
        S.sage_train(mk, _small_cfg("sage"), seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        S.SageConfig(mode="ppo")
    with pytest.raises(ValueError):
        S.SageConfig(epsilon=-1.0)


# -- track shield (default-resolution grids, cached) ----------------------------------

@pytest.fixture(scope="module")
def track_policy(stadium_segments):
    return S.StaticSafetyPolicy(stadium_segments, D.bike(), 0.1)


@pytest.mark.slow
def test_drifting_left_steers_right_and_brakes(stadium, track_policy):
    s = 200.0
    p = stadium.point(s)
    n = stadium.normal(s)
    hd = float(stadium.heading(s))
    x = np.array([*(p + 3.8 * n), 20.0, (hd + 0.25) % (2 * math.pi)])
    u = track_policy.action(x)
    lo = D.bike().control_lo
    assert u[0] == lo[0] and u[1] == lo[1]


@pytest.mark.slow
def test_centerline_cruise_never_gated(stadium, track_policy):
    for s in (120.0, 200.0, 260.0):
        p = stadium.point(s)
        x = np.array([*p, 10.0, float(stadium.heading(s)) % (2 * math.pi)])
        assert S.gate(track_policy.q(x, np.zeros(2)), 3.0) == S.PASS_THROUGH


@pytest.mark.slow
def test_stopped_car_any_action_passes(stadium, track_policy):
    rng = np.random.default_rng(0)
    s = 200.0
    p = stadium.point(s)
    x = np.array([*p, 0.0, float(stadium.heading(s)) % (2 * math.pi)])
    for _ in range(20):
        u = rng.uniform(D.bike().control_lo, D.bike().control_hi)
        assert S.gate(track_policy.q(x, u), 3.0) == S.PASS_THROUGH


@pytest.mark.slow
def test_matched_model_shield_keeps_car_on_track(stadium, track_policy):
    env = TrackEnv(stadium, seed=0)
    rng = np.random.default_rng(0)
    starts = 0
    while starts < 100:
        s = rng.uniform(0, stadium.total_length)
        d = rng.uniform(-4.0, 4.0)
        p = stadium.point(s) + d * stadium.normal(s)
        x = np.array([*p, rng.uniform(0, 30), (float(stadium.heading(s)) + rng.uniform(-0.5, 0.5)) % (2 * math.pi)])
        if track_policy.state_value(x) < 3.0:
            continue
        starts += 1
        env.reset("fixed")
        env.state = x
        env._frame = None
        for _ in range(300):
            res = env.step(track_policy.action(env.state))
            assert res.obs.l_x >= 0.0
            if res.done:
                assert res.reason != "off_track"
                break
