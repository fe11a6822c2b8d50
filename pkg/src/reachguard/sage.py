"""Dual-policy safe control: a performance SAC agent filtered by a safety gate.

The gate passes the performance action through when the safety value of the
proposed action is at least ``epsilon``; otherwise the safety policy acts.
The safety side is either a neural actor-critic trained with the HJ backup or
a static policy read off a solved value grid.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dynamics as dyn
from . import hj_grid as hj
from .critics import (CriticConfig, DivergenceError, ReplayBuffer, Transition, critic_q, gamma_schedule,
                      hj_target, polyak_update, terminal_from_reason, T_FAILURE, T_SUCCESS)
from .envs import Env, EnvObs, EpisodeLog, compute_metrics, run_episode
from .neural import AdamState, GaussianPolicyHead, Mlp, adam_step, save_mlp

log = logging.getLogger(__name__)

PASS_THROUGH = "pass_through"
INTERVENE = "intervene"
METRIC_COLUMNS = ("step", "episode", "ECP", "avg_speed", "interventions", "return")


# --------------------------------------------------------------------------
# gate
# --------------------------------------------------------------------------

@dataclass
class GateConfig:
    epsilon: float = 3.0
    source: str = "static"
    interventions: int = 0
    nonfinite: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0 and not self.epsilon == -math.inf:
            raise ValueError("epsilon must be non-negative")
        if self.source not in ("neural", "static"):
            raise ValueError("gate source must be 'neural' or 'static'")


def gate(safety_value: float, epsilon: float, config: GateConfig | None = None) -> str:
    """Pass through iff the safety value is at least ``epsilon``; non-finite values intervene."""
    finite = math.isfinite(safety_value)
    decision = PASS_THROUGH if finite and safety_value >= epsilon else INTERVENE
    if config is not None:
        if not finite:
            config.nonfinite += 1
        if decision == INTERVENE:
            config.interventions += 1
    return decision


# --------------------------------------------------------------------------
# static safety policy
# --------------------------------------------------------------------------

def fallback_action(model: dyn.SystemModel, state) -> np.ndarray:
    """Full brake and zero steer for the bike; the braking/neutral action otherwise."""
    lo, hi = model.control_lo, model.control_hi
    if model.name == "bike":
        return np.array([lo[0], 0.0])
    if model.name == "double_integrator":
        return np.array([lo[0] if state[1] > 0 else hi[0]])
    return np.clip(np.zeros(model.dim_u), lo, hi)


class StaticSafetyPolicy:
    """Safety value and controller derived from a solved grid (single or segmented)."""

    def __init__(self, value, model: dyn.SystemModel, dt: float):
        if isinstance(value, hj.ValueGrid):
            if value.metadata.get("converged") is False:
                raise ValueError("static safety grid did not converge")
        else:
            bad = [s.index for s in value.segments if s.grid is None]
            if bad:
                raise ValueError(f"segments {bad} have no solved grid")
        self.value = value
        self.model = model
        self.dt = float(dt)
        self.fallbacks = 0

    def state_value(self, X):
        if isinstance(self.value, hj.ValueGrid):
            return self.value.interpolate(X)
        return self.value.value(X)

    def q(self, state, u) -> float:
        """Value of the state reached after one nominal step under ``u``."""
        x_next = dyn.integrate_step(self.model, state, u, self.dt)
        return float(np.atleast_1d(self.state_value(x_next))[0])

    def action(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if isinstance(self.value, hj.ValueGrid):
            spec = self.value.spec
            inside = all(spec.periodic[i] or spec.lo[i] <= state[i] <= spec.hi[i] for i in range(spec.ndim))
            grad = hj.value_gradient(self.value, state) if inside else None
        else:
            grad, inside = self.value.gradient(state, return_inside=True)
        if not inside:
            self.fallbacks += 1
            return fallback_action(self.model, state)
        return np.asarray(self.model.optimal_control(grad), dtype=float)


def static_policy_action(policy: StaticSafetyPolicy, x) -> np.ndarray:
    return policy.action(x)


# --------------------------------------------------------------------------
# shared actor-critic plumbing
# --------------------------------------------------------------------------

def _all_finite(arrs) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrs)


def _q_and_grad_u(critic: Mlp, x, u_n):
    inp = np.concatenate([x, u_n], axis=1)
    q, cache = critic.forward(inp)
    _, gx = critic.backward(cache, np.ones_like(q))
    return q[:, 0], gx[:, x.shape[1]:]


class SafetyActorCritic:
    """Neural safety policy and HJ critic over (features, normalised action)."""

    def __init__(self, obs_dim: int, model: dyn.SystemModel, rng, hidden=(64, 64, 32), lr: float = 3e-3,
                 tau: float = 0.05, alpha: float = 0.2, mode: str = "avoid",
                 critic_config: CriticConfig | None = None):
        self.model = model
        self.obs_dim = obs_dim
        self.act_dim = model.dim_u
        self.actor = GaussianPolicyHead.create(obs_dim, self.act_dim, hidden, "relu", rng,
                                               model.control_lo, model.control_hi)
        self.critic = Mlp.create([obs_dim + self.act_dim, *hidden, 1], "relu", rng)
        self.target = self.critic.copy()
        self.actor_opt = AdamState.for_params(self.actor.net.params, lr)
        self.critic_opt = AdamState.for_params(self.critic.params, lr)
        self.tau = tau
        self.alpha = alpha
        self.mode = mode
        self.config = critic_config or CriticConfig(rule="hj", tau=tau, lr=lr)
        self.skipped = 0

    def q(self, features, u) -> float:
        u_n = self.actor.unscale(np.atleast_2d(u))
        return float(critic_q(self.critic, np.atleast_2d(features), u_n)[0])

    def action(self, features, rng=None, deterministic=False):
        return self.actor.act(features, rng, deterministic)


def update_safety_critic(sac: SafetyActorCritic, batch: dict, gamma: float, rng) -> float:
    """Regress Q_S onto the discounted safety backup with u' drawn from the safety actor."""
    n = len(batch["x"])
    s_next = sac.actor.sample(batch["x_next"], rng.standard_normal((n, sac.act_dim)))
    q_next = critic_q(sac.target, batch["x_next"], s_next["u_n"])
    y = hj_target(batch["l_x"], q_next, gamma, batch["terminal"], sac.mode, batch["l_next"])
    q, cache = sac.critic.forward(np.concatenate([batch["x"], batch["u"]], axis=1))
    err = q[:, 0] - y
    grads, _ = sac.critic.backward(cache, (err / n)[:, None])
    if not _all_finite(grads):
        sac.skipped += 1
        return float("nan")
    adam_step(sac.critic.params, grads, sac.critic_opt)
    polyak_update(sac.target.params, sac.critic.params, sac.tau)
    return 0.5 * float(np.mean(err ** 2))


def update_safety_actor(sac: SafetyActorCritic, batch: dict, rng) -> float:
    """Ascend E[Q_S(x, pi_S(x)) - alpha log pi_S] through the critic's action gradient."""
    x = batch["x"]
    n = len(x)
    s = sac.actor.sample(x, rng.standard_normal((n, sac.act_dim)))
    q, dq_du = _q_and_grad_u(sac.critic, x, s["u_n"])
    grads = sac.actor.backward(s, -dq_du / n, sac.alpha / n)
    if not _all_finite(grads):
        sac.skipped += 1
        return float("nan")
    adam_step(sac.actor.net.params, grads, sac.actor_opt)
    return float(np.mean(sac.alpha * s["logp"] - q))


@dataclass
class PerformanceAgent:
    actor: GaussianPolicyHead
    q1: Mlp
    q2: Mlp
    q1_target: Mlp
    q2_target: Mlp
    actor_opt: AdamState
    q1_opt: AdamState
    q2_opt: AdamState
    alpha: float = 0.2
    gamma: float = 0.99
    tau: float = 0.005
    skipped: int = 0

    @classmethod
    def create(cls, obs_dim: int, model: dyn.SystemModel, rng, hidden=(64, 64, 32), lr: float = 3e-3,
               alpha: float = 0.2, gamma: float = 0.99, tau: float = 0.005) -> "PerformanceAgent":
        act_dim = model.dim_u
        actor = GaussianPolicyHead.create(obs_dim, act_dim, hidden, "relu", rng, model.control_lo, model.control_hi)
        q1 = Mlp.create([obs_dim + act_dim, *hidden, 1], "relu", rng)
        q2 = Mlp.create([obs_dim + act_dim, *hidden, 1], "relu", rng)
        return cls(actor, q1, q2, q1.copy(), q2.copy(), AdamState.for_params(actor.net.params, lr),
                   AdamState.for_params(q1.params, lr), AdamState.for_params(q2.params, lr), alpha, gamma, tau)

    def action(self, features, rng=None, deterministic=False):
        return self.actor.act(features, rng, deterministic)


def sac_target(r, q1_next, q2_next, logp_next, gamma, alpha, bootstrap):
    """``r + gamma * bootstrap * (min(q1', q2') - alpha log pi(u'|x'))``."""
    soft = np.minimum(q1_next, q2_next) - alpha * logp_next
    return np.asarray(r, dtype=float) + gamma * np.asarray(bootstrap, dtype=float) * soft


def sac_update(agent: PerformanceAgent, batch: dict, rng) -> dict:
    x, u, x_next = batch["x"], batch["u"], batch["x_next"]
    n = len(x)
    act_dim = agent.actor.act_dim
    s_next = agent.actor.sample(x_next, rng.standard_normal((n, act_dim)))
    q1n = critic_q(agent.q1_target, x_next, s_next["u_n"])
    q2n = critic_q(agent.q2_target, x_next, s_next["u_n"])
    bootstrap = ~np.isin(batch["terminal"], (T_FAILURE, T_SUCCESS))
    y = sac_target(batch["r"], q1n, q2n, s_next["logp"], agent.gamma, agent.alpha, bootstrap)

    inp = np.concatenate([x, u], axis=1)
    losses = {}
    staged = []
    for name, net in (("q1", agent.q1), ("q2", agent.q2)):
        q, cache = net.forward(inp)
        err = q[:, 0] - y
        g, _ = net.backward(cache, (err / n)[:, None])
        staged.append(g)
        losses[name] = 0.5 * float(np.mean(err ** 2))

    s = agent.actor.sample(x, rng.standard_normal((n, act_dim)))
    qa, ga = _q_and_grad_u(agent.q1, x, s["u_n"])
    qb, gb = _q_and_grad_u(agent.q2, x, s["u_n"])
    use_a = (qa <= qb)[:, None]
    dq_du = np.where(use_a, ga, gb)
    actor_grads = agent.actor.backward(s, -dq_du / n, agent.alpha / n)
    losses["actor"] = float(np.mean(agent.alpha * s["logp"] - np.minimum(qa, qb)))

    if not (_all_finite(staged[0]) and _all_finite(staged[1]) and _all_finite(actor_grads)):
        agent.skipped += 1
        return {k: float("nan") for k in losses}
    adam_step(agent.q1.params, staged[0], agent.q1_opt)
    adam_step(agent.q2.params, staged[1], agent.q2_opt)
    adam_step(agent.actor.net.params, actor_grads, agent.actor_opt)
    polyak_update(agent.q1_target.params, agent.q1.params, agent.tau)
    polyak_update(agent.q2_target.params, agent.q2.params, agent.tau)
    return losses


# --------------------------------------------------------------------------
# the gated step and training loop
# --------------------------------------------------------------------------

@dataclass
class SageConfig:
    mode: str = "sage"                 # sage, safesac, sac, random, saferandom
    safety: str = "static"             # static or neural (ignored for sac / random)
    epsilon: float = 3.0
    total_steps: int = 50_000
    warmup: int = 2000
    eval_interval: int = 5000
    eval_episodes: int = 1
    batch_size: int = 256
    buffer_size: int = 250_000
    hidden: tuple = (64, 64, 32)
    lr: float = 3e-3
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.2
    safety_tau: float = 0.05
    safety_gamma_start: float = 0.85
    safety_gamma_end: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in ("sage", "safesac", "sac", "random", "saferandom"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.safety not in ("static", "neural"):
            raise ValueError(f"unknown safety source {self.safety!r}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.eval_interval <= 0 or self.total_steps < 0:
            raise ValueError("eval_interval must be positive and total_steps non-negative")

    @property
    def gated(self) -> bool:
        return self.mode in ("sage", "safesac", "saferandom")

    @property
    def learns(self) -> bool:
        return self.mode in ("sage", "safesac", "sac")


@dataclass
class StepRecord:
    result: object
    u: np.ndarray
    source: str
    stored: bool
    q_s: float = float("nan")


class GatedController:
    """Proposes a performance action and routes it through the gate."""

    def __init__(self, model, propose: Callable, gate_cfg: GateConfig | None, safety=None):
        self.model = model
        self.propose = propose
        self.gate_cfg = gate_cfg
        self.safety = safety

    def safety_value(self, obs: EnvObs, u) -> float:
        if isinstance(self.safety, StaticSafetyPolicy):
            return self.safety.q(obs.state, u)
        return self.safety.q(obs.features, u)

    def safety_action(self, obs: EnvObs, rng, deterministic):
        if isinstance(self.safety, StaticSafetyPolicy):
            return self.safety.action(obs.state)
        return self.safety.action(obs.features, rng, deterministic)

    def __call__(self, obs: EnvObs, rng=None, deterministic=False):
        u = self.model.clamp_control(self.propose(obs, rng, deterministic))
        if self.gate_cfg is None or self.safety is None:
            return u, "performance", float("nan")
        try:
            q = self.safety_value(obs, u)
        except (dyn.NumericalError, ValueError):
            q = float("nan")
        if gate(q, self.gate_cfg.epsilon, self.gate_cfg) == PASS_THROUGH:
            return u, "performance", q
        return self.model.clamp_control(self.safety_action(obs, rng, deterministic)), "safety", q


def sage_step(env: Env, obs: EnvObs, controller: GatedController, buffer: ReplayBuffer | None,
              rng, store: str = "all") -> StepRecord:
    """One gated environment step; ``store`` is 'all' (SAGE) or 'performance' (SafeSAC)."""
    u, source, q = controller(obs, rng)
    res = env.step(u)
    stored = buffer is not None and (store == "all" or source == "performance")
    if stored:
        term = terminal_from_reason(res.reason)
        lo, hi = env.model.control_lo, env.model.control_hi
        buffer.add(Transition(obs.features, 2.0 * (u - lo) / (hi - lo) - 1.0, res.reward, res.obs.features,
                              term, obs.l_x, int(term == "failure"), res.obs.l_x, res.obs.state))
    return StepRecord(res, u, source, stored, q)


@dataclass
class SageResult:
    metrics: list = field(default_factory=list)
    buffer_size: int = 0
    total_steps: int = 0
    pass_through: int = 0
    interventions: int = 0
    train_episodes: int = 0
    perf: PerformanceAgent | None = None
    safety: object = None


def _evaluate(env: Env, controller: GatedController, episodes: int, rng=None):
    """Fixed-spawn episodes; deterministic unless ``rng`` is given (random baselines)."""
    out = []
    for _ in range(episodes):
        ep = run_episode(env, lambda o: controller(o, rng, rng is None)[:2], spawn="fixed", seed=0)
        out.append((compute_metrics(ep), float(np.sum(ep.rewards))))
    return out


def sage_train(make_env: Callable[..., Env], config: SageConfig, seed: int = 0, static_value=None,
               out_dir: str | Path | None = None, progress: Callable | None = None) -> SageResult:
    """Train (or just roll out, for the random modes) and evaluate periodically.

    Evaluation uses a fixed spawn and the deterministic performance action.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_env, s_eval, s_net, s_buf, s_act = ss.spawn(5)
    env = make_env(seed=np.random.default_rng(s_env))
    eval_env = make_env(seed=np.random.default_rng(s_eval))
    rng_net = np.random.default_rng(s_net)
    rng = np.random.default_rng(s_act)
    eval_rng = np.random.default_rng(s_eval.spawn(1)[0])
    model = env.model
    obs = env.reset("random")
    obs_dim = len(obs.features)

    perf = None
    if config.learns:
        perf = PerformanceAgent.create(obs_dim, model, rng_net, config.hidden, config.lr, config.alpha,
                                       config.gamma, config.tau)

    safety = None
    neural = None
    if config.gated:
        if config.safety == "static":
            if static_value is None:
                raise ValueError("static safety requires a solved value grid")
            safety = StaticSafetyPolicy(static_value, model, env.dt)
        else:
            neural = SafetyActorCritic(obs_dim, model, rng_net, config.hidden, config.lr, config.safety_tau,
                                       config.alpha, model.mode)
            safety = neural

    def propose(o, r, deterministic):
        if perf is None or (not deterministic and steps_done < config.warmup):
            return r.uniform(model.control_lo, model.control_hi) if r is not None else _midpoint(model)
        return perf.action(o.features, None if deterministic else r, deterministic)

    gate_cfg = GateConfig(config.epsilon, config.safety) if config.gated else None
    controller = GatedController(model, propose, gate_cfg, safety)
    eval_gate = GateConfig(config.epsilon, config.safety) if config.gated else None
    eval_controller = GatedController(model, propose, eval_gate, safety)

    buffer = None
    if config.learns or neural is not None:
        buffer = ReplayBuffer(config.buffer_size, obs_dim, model.dim_u, len(obs.state),
                              np.random.default_rng(s_buf))
    store = "performance" if config.mode == "safesac" else "all"

    result = SageResult(perf=perf, safety=safety)
    steps_done = 0
    ep_count = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    for step in range(1, config.total_steps + 1):
        rec = sage_step(env, obs, controller, buffer, rng, store)
        steps_done = step
        if rec.source == "performance":
            result.pass_through += 1
        else:
            result.interventions += 1
        obs = rec.result.obs
        if rec.result.done:
            ep_count += 1
            obs = env.reset("random")
        if buffer is not None and step >= config.warmup and len(buffer) >= config.batch_size:
            if perf is not None:
                losses = sac_update(perf, buffer.sample(config.batch_size), rng)
                if not all(math.isfinite(v) for v in losses.values()) and perf.skipped > 100:
                    _abort(out_dir, perf, step)
            if neural is not None:
                g = gamma_schedule(step - config.warmup, max(config.total_steps - config.warmup, 1),
                                   config.safety_gamma_start, config.safety_gamma_end)
                b = buffer.sample(config.batch_size)
                update_safety_critic(neural, b, g, rng)
                update_safety_actor(neural, b, rng)
        if step % config.eval_interval == 0:
            evals = _evaluate(eval_env, eval_controller, config.eval_episodes, None if perf else eval_rng)
            row = {"step": step, "episode": ep_count,
                   "ECP": float(np.mean([m.ecp for m, _ in evals])),
                   "avg_speed": float(np.mean([m.avg_speed for m, _ in evals])),
                   "interventions": float(np.mean([m.interventions for m, _ in evals])),
                   "return": float(np.mean([r for _, r in evals]))}
            result.metrics.append(row)
            if progress is not None:
                progress(row)
        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0 and perf:
            save_checkpoint(out_dir, perf, neural, step)
    result.buffer_size = len(buffer) if buffer is not None else 0
    result.total_steps = steps_done
    result.train_episodes = ep_count
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(result.metrics, out_dir / "train_metrics.csv")
        if perf is not None:
            save_checkpoint(out_dir, perf, neural, steps_done)
    return result


def _midpoint(model):
    return 0.5 * (model.control_lo + model.control_hi)


def _abort(out_dir, perf, step):
    if out_dir is not None:
        save_checkpoint(out_dir, perf, None, step)
    raise DivergenceError(f"performance agent diverged at step {step}")


def save_checkpoint(out_dir, perf: PerformanceAgent, neural: SafetyActorCritic | None, step: int) -> None:
    d = Path(out_dir) / "checkpoints"
    d.mkdir(parents=True, exist_ok=True)
    save_mlp(perf.actor.net, d / f"actor_{step}.mlpc")
    save_mlp(perf.q1, d / f"q1_{step}.mlpc")
    save_mlp(perf.q2, d / f"q2_{step}.mlpc")
    if neural is not None:
        save_mlp(neural.actor.net, d / f"safety_actor_{step}.mlpc")
        save_mlp(neural.critic, d / f"safety_critic_{step}.mlpc")


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"], r["episode"]] + [repr(float(r[k])) for k in METRIC_COLUMNS[2:]])


def config_dict(config: SageConfig) -> dict:
    return asdict(config)


def random_rollouts(env: Env, episodes: int, seed: int, controller: GatedController | None = None,
                    spawn: str = "fixed") -> list[EpisodeLog]:
    """Episodes under uniform random proposals, optionally gated."""
    rng = np.random.default_rng(seed)
    env.rng = rng
    if controller is None:
        controller = GatedController(env.model, lambda o, r, d: env.sample_action(), None)
    return [run_episode(env, lambda o: controller(o, rng)[:2], spawn=spawn) for _ in range(episodes)]
