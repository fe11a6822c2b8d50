"""Safety critics: HJ, SQRL and conservative (CQL-style) learning rules.

The HJ critic is a value in units of ``l`` (larger is safer). The SQRL and
CQL critics estimate discounted failure cost (larger is less safe), so their
AUROC score is the negated critic output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from . import dynamics as dyn
from . import hj_grid as hj
from .envs import DoubleIntegratorEnv, DubinsEnv, Env
from .neural import AdamState, Mlp, adam_step, save_mlp

log = logging.getLogger(__name__)

TERMINALS = ("none", "failure", "success", "timeout")
T_NONE, T_FAILURE, T_SUCCESS, T_TIMEOUT = range(4)
GAMMA_CAP = 1.0 - 1e-6


class DivergenceError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# transitions and replay
# --------------------------------------------------------------------------

@dataclass
class Transition:
    x: np.ndarray
    u: np.ndarray
    r: float
    x_next: np.ndarray
    terminal: str = "none"
    l_x: float = 0.0
    cost: int = 0
    l_next: float = float("nan")
    state_next: np.ndarray | None = None

    def __post_init__(self):
        if self.terminal not in TERMINALS:
            raise ValueError(f"terminal must be one of {TERMINALS}")
        if int(self.cost) != int(self.terminal == "failure"):
            raise ValueError("cost must be 1 exactly on failure terminals")


def terminal_from_reason(reason: str | None) -> str:
    if reason is None:
        return "none"
    if reason == "off_track":
        return "failure"
    if reason in ("success", "lap_complete"):
        return "success"
    return "timeout"


class ReplayBuffer:
    """Ring storage with uniform sampling; optional proportional priorities."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, state_dim: int | None = None,
                 rng=None, prioritized: bool = False, priority_eps: float = 1e-3):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.rng = np.random.default_rng() if rng is None else rng
        sd = state_dim or obs_dim
        self.x = np.zeros((capacity, obs_dim))
        self.u = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.x_next = np.zeros((capacity, obs_dim))
        self.state_next = np.zeros((capacity, sd))
        self.terminal = np.zeros(capacity, dtype=np.int8)
        self.l_x = np.zeros(capacity)
        self.l_next = np.zeros(capacity)
        self.cost = np.zeros(capacity)
        self.prioritized = prioritized
        self.priority = np.zeros(capacity)
        self.priority_eps = priority_eps
        self.size = 0
        self.ptr = 0
        self.total_added = 0

    def __len__(self):
        return self.size

    def add(self, tr: Transition) -> None:
        i = self.ptr
        self.x[i] = tr.x
        self.u[i] = tr.u
        self.r[i] = tr.r
        self.x_next[i] = tr.x_next
        if tr.state_next is not None:
            self.state_next[i] = tr.state_next
        self.terminal[i] = TERMINALS.index(tr.terminal)
        self.l_x[i] = tr.l_x
        self.l_next[i] = tr.l_next
        self.cost[i] = tr.cost
        self.priority[i] = self.priority[:self.size].max() if self.size else 1.0
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def sample(self, batch_size: int) -> dict:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        if self.prioritized:
            p = self.priority[:self.size]
            idx = self.rng.choice(self.size, size=batch_size, p=p / p.sum())
        else:
            idx = self.rng.integers(0, self.size, size=batch_size)
        return {"idx": idx, "x": self.x[idx], "u": self.u[idx], "r": self.r[idx],
                "x_next": self.x_next[idx], "state_next": self.state_next[idx],
                "terminal": self.terminal[idx], "l_x": self.l_x[idx], "l_next": self.l_next[idx],
                "cost": self.cost[idx]}

    def update_priorities(self, idx, td_error) -> None:
        if self.prioritized:
            self.priority[idx] = np.abs(td_error) + self.priority_eps


# --------------------------------------------------------------------------
# targets and losses
# --------------------------------------------------------------------------

def hj_target(l_x, q_next, gamma, terminal=None, mode: str = "avoid", l_next=None):
    """Discounted safety backup ``(1 - g) l + g min(l, q')``.

    Failure and timeout terminals bootstrap from ``l_x`` itself. In reach mode
    the clip is a max and success terminals bootstrap from ``l_next``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    l_x = np.asarray(l_x, dtype=float)
    q = np.asarray(q_next, dtype=float)
    if terminal is not None:
        t = np.asarray(terminal)
        if t.dtype.kind in "US":
            t = np.vectorize(TERMINALS.index)(t)
        q = np.where((t == T_FAILURE) | (t == T_TIMEOUT), l_x, q)
        if mode == "reach" and l_next is not None:
            q = np.where(t == T_SUCCESS, np.asarray(l_next, dtype=float), q)
        elif mode == "avoid":
            q = np.where(t == T_SUCCESS, l_x, q)
    clip = np.minimum(l_x, q) if mode == "avoid" else np.maximum(l_x, q)
    out = (1.0 - gamma) * l_x + gamma * clip
    return float(out) if out.ndim == 0 else out


def hj_target_known_policy(l_x, q_next_at_pistar, gamma, terminal=None, mode="avoid", l_next=None):
    """Same backup, with ``q_next`` taken at the known optimal safe action."""
    return hj_target(l_x, q_next_at_pistar, gamma, terminal, mode, l_next)


def sqrl_target(cost, q_next, gamma_s, terminal=None):
    """Failure-cost backup ``C + g (1 - C) q'``; success terminals carry no future cost."""
    if not 0.0 <= gamma_s < 1.0:
        raise ValueError("gamma_s must lie in [0, 1)")
    c = np.asarray(cost, dtype=float)
    q = np.asarray(q_next, dtype=float)
    if terminal is not None:
        q = np.where(np.asarray(terminal) == T_SUCCESS, 0.0, q)
    out = c + gamma_s * (1.0 - c) * q
    return float(out) if out.ndim == 0 else out


def cql_loss(q_data, targets, q_pi, alpha: float):
    """``0.5 MSE(Q, y) - alpha (E_pi Q - E_D Q)``; returns (loss, dL/dq_data, dL/dq_pi)."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    q_data = np.asarray(q_data, dtype=float)
    targets = np.asarray(targets, dtype=float)
    q_pi = np.asarray(q_pi, dtype=float)
    n, m = len(q_data), len(q_pi)
    err = q_data - targets
    loss = 0.5 * np.mean(err ** 2) - alpha * (np.mean(q_pi) - np.mean(q_data))
    return float(loss), err / n + alpha / n, np.full(m, -alpha / m)


def polyak_update(target_params, online_params, tau: float):
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    if len(target_params) != len(online_params):
        raise ValueError("parameter lists differ in length")
    for t, o in zip(target_params, online_params):
        if t.shape != o.shape:
            raise ValueError("parameter shapes differ")
        t *= 1.0 - tau
        t += tau * o
    return target_params


def gamma_schedule(step, total_steps, g0=0.85, g1=1.0) -> float:
    if total_steps <= 0:
        return min(g1, GAMMA_CAP)
    frac = min(max(step / total_steps, 0.0), 1.0)
    return min(g0 + (g1 - g0) * frac, GAMMA_CAP)


# --------------------------------------------------------------------------
# AUROC
# --------------------------------------------------------------------------

def auroc(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counted one half."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def critic_q(critic: Mlp, features, actions) -> np.ndarray:
    return critic(np.concatenate([features, actions], axis=1))[:, 0]


def action_gradient(critic: Mlp, features, actions) -> np.ndarray:
    """dQ/du at the given inputs, one row per sample."""
    inp = np.concatenate([features, actions], axis=1)
    _, cache = critic.forward(inp)
    _, gx = critic.backward(cache, np.ones((len(inp), 1)))
    return gx[:, features.shape[1]:]


def eval_auroc_on_mesh(critic: Mlp, features, actions, labels, sign: float = 1.0, chunk: int = 20000) -> float:
    scores = np.concatenate([critic_q(critic, features[i:i + chunk], actions[i:i + chunk])
                             for i in range(0, len(features), chunk)])
    return auroc(sign * scores, labels)


# --------------------------------------------------------------------------
# classical benchmark setup
# --------------------------------------------------------------------------

@dataclass
class ClassicalTask:
    name: str
    model: dyn.SystemModel
    grid: hj.ValueGrid
    make_env: Callable[..., Env]
    mode: str
    mesh_states: np.ndarray
    mesh_features: np.ndarray
    mesh_actions: np.ndarray      # normalised optimal safe actions
    labels: np.ndarray
    info: dict = field(default_factory=dict)

    def features(self, states) -> np.ndarray:
        env = self.make_env()
        return np.array([env.features(s) for s in states])

    def optimal_action(self, states) -> np.ndarray:
        """Normalised optimal safe action from the grid gradient sign rule."""
        u = hj.optimal_action_from_grid(self.grid, self.model, np.atleast_2d(states))
        lo, hi = self.model.control_lo, self.model.control_hi
        return 2.0 * (u - lo) / (hi - lo) - 1.0


def band_filtered_labels(label_fn, mesh, h):
    """Labels on ``mesh`` plus a mask dropping points whose label flips within one cell."""
    labels = label_fn(mesh)
    keep = np.ones(len(mesh), dtype=bool)
    d = mesh.shape[1]
    for offs in np.array(np.meshgrid(*[[-1, 0, 1]] * d, indexing="ij")).reshape(d, -1).T:
        if not offs.any():
            continue
        keep &= label_fn(mesh + offs * h) == labels
    return labels, keep


def _mesh(lo, hi, n, periodic=None):
    axes = []
    for i, (a, b, k) in enumerate(zip(lo, hi, n)):
        if periodic and periodic[i]:
            axes.append(a + (b - a) * np.arange(k) / k)
        else:
            axes.append(np.linspace(a, b, k))
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(lo))


def di_task(grid_n=161, grid_gamma=0.9999, mesh_n=101, timeout=200, controls=21) -> ClassicalTask:
    model = dyn.double_integrator()
    spec = hj.default_spec("di", (grid_n, grid_n))
    V, _ = hj.solve(spec, model, hj.default_l("di"), hj.make_control_mesh(model, controls), 0.05,
                    grid_gamma, tol=1e-8, max_iters=5000, scheme="rk4")
    mesh = _mesh(spec.lo, spec.hi, (mesh_n, mesh_n))
    labels, keep = band_filtered_labels(lambda X: dyn.di_safe_oracle(X[:, 0], X[:, 1]), mesh, spec.spacing)
    mesh = mesh[keep]
    labels = labels[keep]
    task = ClassicalTask("di", model, V, partial(DoubleIntegratorEnv, timeout=timeout),
                         "avoid", mesh, mesh.copy(), None, labels)
    task.mesh_actions = task.optimal_action(mesh)
    task.info = {"grid_gamma": grid_gamma, "mesh_points": int(len(mesh)), "safe_fraction": float(labels.mean())}
    return task


def dubins_grid(n=(65, 65, 48), gamma=0.9999, arena=3.0, margin=0.2, controls=5, dt=0.05):
    """Reach value for the unit disk inside a square arena whose exit is absorbing."""
    model = dyn.dubins()
    b = arena + margin
    spec = hj.GridSpec((-b, -b, 0.0), (b, b, 2 * math.pi), n, (False, False, True))
    X = spec.nodes()
    active = (np.abs(X[:, 0]) <= arena) & (np.abs(X[:, 1]) <= arena)
    V, res = hj.solve(spec, model, hj.default_l("dubins"), hj.make_control_mesh(model, controls), dt, gamma,
                      tol=1e-7, max_iters=30000, mode="reach", active=active)
    V.metadata["arena"] = arena
    return V, res


def dubins_task(grid_n=(65, 65, 48), grid_gamma=0.9999, mesh_n=(101, 101, 36), timeout=200, arena=3.0) -> ClassicalTask:
    model = dyn.dubins()
    V, _ = dubins_grid(grid_n, grid_gamma, arena)
    mesh = _mesh((-arena, -arena, 0.0), (arena, arena, 2 * math.pi), mesh_n, (False, False, True))
    mesh = mesh[np.hypot(mesh[:, 0], mesh[:, 1]) > 1.0]
    labels, keep = band_filtered_labels(lambda X: V.interpolate(X) >= 0, mesh, V.spec.spacing)
    mesh = mesh[keep]
    labels = labels[keep]
    mk = partial(DubinsEnv, timeout=timeout, arena=arena)
    feats = np.column_stack([mesh[:, 0], mesh[:, 1], np.cos(mesh[:, 2]), np.sin(mesh[:, 2])])
    task = ClassicalTask("dubins", model, V, mk, "reach", mesh, feats, None, labels)
    task.mesh_actions = task.optimal_action(mesh)
    task.info = {"grid_gamma": grid_gamma, "mesh_points": int(len(mesh)), "safe_fraction": float(labels.mean())}
    return task


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class CriticConfig:
    rule: str = "hj"
    hidden: tuple = (16, 16)
    activation: str = "relu"
    lr: float = 1e-3
    batch_size: int = 64
    buffer_size: int = 10_000
    gamma_start: float = 0.85
    gamma_end: float = 1.0
    gamma_s: float = 0.9
    tau: float = 0.1
    alpha_cql: float = 0.0
    total_steps: int = 25_000
    warmup: int = 1000
    eval_every: int = 1000
    prioritized: bool = False

    def __post_init__(self):
        if self.rule not in ("hj", "sqrl", "cql"):
            raise ValueError(f"unknown rule {self.rule!r}")
        for g in (self.gamma_start, self.gamma_s):
            if not 0.0 <= g < 1.0:
                raise ValueError(f"gamma {g} outside [0, 1)")
        if not 0.0 <= self.gamma_end <= 1.0:
            raise ValueError("gamma_end must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.alpha_cql < 0:
            raise ValueError("alpha_cql must be non-negative")

    @classmethod
    def for_rule(cls, rule: str, **overrides) -> "CriticConfig":
        base = {"hj": {}, "sqrl": {"lr": 3e-4, "gamma_s": 0.9, "tau": 0.1},
                "cql": {"lr": 2e-4, "gamma_s": 0.99, "tau": 0.1, "alpha_cql": 0.01}}[rule]
        return cls(rule=rule, **{**base, **overrides})


@dataclass
class CriticResult:
    critic: Mlp
    curve: list                  # (step, auroc)
    losses: list
    gamma_final: float
    nan_skips: int = 0


def train_safety_critic(task: ClassicalTask, config: CriticConfig, seed=0,
                        checkpoint_dir: str | Path | None = None) -> CriticResult:
    """Fill a buffer with a uniform random behaviour policy and fit the critic online."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env_seed, net_seed, buf_seed = ss.spawn(3)
    env = task.make_env(seed=np.random.default_rng(env_seed))
    rng_net = np.random.default_rng(net_seed)
    obs = env.reset("random")
    obs_dim = len(obs.features)
    act_dim = task.model.dim_u
    critic = Mlp.create([obs_dim + act_dim, *config.hidden, 1], config.activation, rng_net)
    target = critic.copy()
    opt = AdamState.for_params(critic.params, config.lr)
    buf = ReplayBuffer(config.buffer_size, obs_dim, act_dim, len(obs.state),
                       np.random.default_rng(buf_seed), config.prioritized)
    lo, hi = task.model.control_lo, task.model.control_hi
    sign = 1.0 if config.rule == "hj" else -1.0
    curve, losses = [], []
    gamma = config.gamma_start
    for step in range(1, config.total_steps + 1):
        u = env.sample_action()
        res = env.step(u)
        term = terminal_from_reason(res.reason)
        buf.add(Transition(obs.features, 2.0 * (u - lo) / (hi - lo) - 1.0, res.reward, res.obs.features,
                           term, obs.l_x, int(term == "failure"), res.obs.l_x, res.obs.state))
        obs = env.reset("random") if res.done else res.obs
        if step >= config.warmup and len(buf) >= config.batch_size:
            gamma = gamma_schedule(step - config.warmup, config.total_steps - config.warmup,
                                   config.gamma_start, config.gamma_end)
            loss = _critic_update(task, config, critic, target, opt, buf, gamma)
            if not math.isfinite(loss):
                if checkpoint_dir is not None:
                    Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                    save_mlp(critic, Path(checkpoint_dir) / f"critic_diverged_{step}.mlpc")
                raise DivergenceError(f"critic loss became non-finite at step {step}")
            losses.append(loss)
        if step % config.eval_every == 0:
            curve.append((step, eval_auroc_on_mesh(critic, task.mesh_features, task.mesh_actions,
                                                   task.labels, sign)))
    return CriticResult(critic, curve, losses, gamma, opt.nan_skips)


def _critic_update(task, config, critic, target, opt, buf, gamma) -> float:
    b = buf.sample(config.batch_size)
    u_next = task.optimal_action(b["state_next"])
    q_next = critic_q(target, b["x_next"], u_next)
    if config.rule == "hj":
        y = hj_target_known_policy(b["l_x"], q_next, gamma, b["terminal"], task.mode, b["l_next"])
    else:
        y = sqrl_target(b["cost"], q_next, config.gamma_s, b["terminal"])
    inp = np.concatenate([b["x"], b["u"]], axis=1)
    q, cache = critic.forward(inp)
    if config.rule == "cql" and config.alpha_cql > 0:
        pi_inp = np.concatenate([b["x"], task.optimal_action(_states_from(task, b))], axis=1)
        q_pi, cache_pi = critic.forward(pi_inp)
        loss, g_data, g_pi = cql_loss(q[:, 0], y, q_pi[:, 0], config.alpha_cql)
        grads, _ = critic.backward(cache, g_data[:, None])
        grads_pi, _ = critic.backward(cache_pi, g_pi[:, None])
        grads = [a + c for a, c in zip(grads, grads_pi)]
    else:
        err = q[:, 0] - y
        loss = 0.5 * float(np.mean(err ** 2))
        grads, _ = critic.backward(cache, (err / len(err))[:, None])
    buf.update_priorities(b["idx"], q[:, 0] - y)
    adam_step(critic.params, grads, opt)
    polyak_update(target.params, critic.params, config.tau)
    return float(loss)


def _states_from(task, batch):
    """Raw states for the data points of a batch (features are invertible here)."""
    x = batch["x"]
    if task.name == "dubins":
        return np.column_stack([x[:, 0], x[:, 1], np.mod(np.arctan2(x[:, 3], x[:, 2]), 2 * math.pi)])
    return x


def with_overrides(cfg: CriticConfig, **kw) -> CriticConfig:
    return replace(cfg, **kw)
