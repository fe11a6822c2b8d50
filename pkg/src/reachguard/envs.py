"""Episodic environments: double-integrator keep-in, Dubins reach, and a bike on a spline track."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .track import ProgressTracker, SplineTrack

DONE_REASONS = ("lap_complete", "off_track", "timeout", "no_progress", "success")
FEATURE_VERSION = "track-features-v1"
CURVATURE_LOOKAHEAD = (0.0, 10.0, 30.0, 60.0)
CURVATURE_SCALE = 50.0


class EnvUsageError(RuntimeError):
    pass


@dataclass
class EnvObs:
    features: np.ndarray
    l_x: float
    state: np.ndarray


@dataclass
class StepResult:
    obs: EnvObs
    reward: float
    done: bool
    reason: str | None = None
    info: dict = field(default_factory=dict)


@dataclass
class EpisodeMetrics:
    ecp: float
    avg_speed: float
    duration: float
    interventions: int
    min_l: float
    reason: str | None = None


@dataclass
class EpisodeLog:
    dt: float
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    l_values: list = field(default_factory=list)
    speeds: list = field(default_factory=list)
    progress: list = field(default_factory=list)
    sources: list = field(default_factory=list)
    reason: str | None = None

    def record(self, state, u, r, l_x, speed, progress, source="performance"):
        self.states.append(np.array(state, dtype=float))
        self.actions.append(np.array(u, dtype=float))
        self.rewards.append(float(r))
        self.l_values.append(float(l_x))
        self.speeds.append(float(speed))
        self.progress.append(float(progress))
        self.sources.append(source)

    def __len__(self):
        return len(self.rewards)


def compute_metrics(log: EpisodeLog) -> EpisodeMetrics:
    if len(log) == 0:
        raise ValueError("empty episode log")
    ecp = 1.0 if log.reason in ("lap_complete", "success") else min(log.progress[-1], 1.0)
    return EpisodeMetrics(
        ecp=float(ecp),
        avg_speed=float(np.mean(log.speeds)),
        duration=len(log) * log.dt,
        interventions=sum(1 for s in log.sources if s == "safety"),
        min_l=float(min(log.l_values)),
        reason=log.reason,
    )


def write_episode_csv(log: EpisodeLog, path) -> None:
    nx = len(log.states[0]) if log.states else 0
    nu = len(log.actions[0]) if log.actions else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
                   + ["r", "l_x", "gate_source"])
        for k in range(len(log)):
            w.writerow([k] + [repr(float(v)) for v in log.states[k]] + [repr(float(v)) for v in log.actions[k]]
                       + [repr(log.rewards[k]), repr(log.l_values[k]), log.sources[k]])


class Env:
    """Shared bookkeeping; subclasses supply dynamics, l, spawns and termination."""

    name = "env"

    def __init__(self, model: dyn.SystemModel, dt: float, timeout: int, seed=None):
        self.model = model
        self.dt = float(dt)
        self.timeout = int(timeout)
        self.rng = np.random.default_rng(seed)
        self.state = None
        self.done = True
        self.t = 0

    @property
    def obs_dim(self) -> int:
        return len(self.features(self.initial_state("fixed")))

    @property
    def act_dim(self) -> int:
        return self.model.dim_u

    def sample_action(self) -> np.ndarray:
        return self.rng.uniform(self.model.control_lo, self.model.control_hi)

    def reset(self, spawn: str = "random", seed=None) -> EnvObs:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if spawn not in ("random", "fixed"):
            raise ValueError(f"spawn must be 'random' or 'fixed', got {spawn!r}")
        self.state = self.initial_state(spawn)
        self.done = False
        self.t = 0
        self._on_reset()
        return self.observe()

    def observe(self) -> EnvObs:
        return EnvObs(self.features(self.state), self.l(self.state), self.state.copy())

    def step(self, u) -> StepResult:
        if self.done or self.state is None:
            raise EnvUsageError("step called on a finished episode; call reset first")
        u = self.model.clamp_control(u)
        prev = self.state
        self.state = dyn.integrate_step(self.model, prev, u, self.dt)
        self.t += 1
        reward, reason, info = self._transition(prev, u)
        if reason is None and self.t >= self.timeout:
            reason = "timeout"
        self.done = reason is not None
        if not math.isfinite(reward):
            raise dyn.NumericalError("non-finite reward")
        return StepResult(self.observe(), reward, self.done, reason, info)

    # hooks
    def _on_reset(self):
        pass

    def initial_state(self, spawn):
        raise NotImplementedError

    def features(self, state):
        raise NotImplementedError

    def l(self, state) -> float:
        raise NotImplementedError

    def _transition(self, prev, u):
        raise NotImplementedError

    def speed(self, state) -> float:
        raise NotImplementedError

    def progress(self) -> float:
        raise NotImplementedError


class DoubleIntegratorEnv(Env):
    """Keep the particle inside [-1, 1]; reward is distance covered per step."""

    name = "di"

    def __init__(self, dt=0.05, timeout=200, spawn_box=((-1.0, -2.0), (1.0, 2.0)), seed=None):
        super().__init__(dyn.double_integrator(), dt, timeout, seed)
        self.spawn_box = (np.asarray(spawn_box[0], float), np.asarray(spawn_box[1], float))

    def initial_state(self, spawn):
        if spawn == "fixed":
            return np.zeros(2)
        return self.rng.uniform(*self.spawn_box)

    def features(self, state):
        return np.asarray(state, dtype=float).copy()

    def l(self, state) -> float:
        return 1.0 - abs(float(state[0]))

    def _transition(self, prev, u):
        reward = abs(float(self.state[1])) * self.dt
        reason = "off_track" if self.l(self.state) < 0 else None
        return reward, reason, {}

    def speed(self, state):
        return abs(float(state[1]))

    def progress(self):
        return self.t / self.timeout


class DubinsEnv(Env):
    """Reach the unit disk; leaving the square arena is a failure."""

    name = "dubins"

    def __init__(self, dt=0.05, timeout=200, arena=3.0, seed=None):
        super().__init__(dyn.dubins(), dt, timeout, seed)
        self.arena = float(arena)

    def initial_state(self, spawn):
        if spawn == "fixed":
            return np.array([-2.0, -2.0, 0.0])
        while True:
            xy = self.rng.uniform(-self.arena, self.arena, size=2)
            if math.hypot(*xy) > 1.0:
                return np.array([xy[0], xy[1], self.rng.uniform(0.0, 2 * math.pi)])

    def features(self, state):
        x, y, phi = state
        return np.array([x, y, math.cos(phi), math.sin(phi)])

    def l(self, state) -> float:
        return 1.0 - math.hypot(float(state[0]), float(state[1]))

    def _transition(self, prev, u):
        x, y, _ = self.state
        if max(abs(x), abs(y)) > self.arena:
            return 0.0, "off_track", {}
        if self.l(self.state) >= 0:
            return 1.0, "success", {}
        return 0.0, None, {}

    def speed(self, state):
        return dyn.DUBINS_SPEED

    def progress(self):
        return self.t / self.timeout


class TrackEnv(Env):
    """Kinematic bike on a closed spline track.

    Features: [d / width, heading error, v / 30, curvature at s + {0, 10, 30, 60} m
    times 50, l / width].  Reward per step is ``w1 * v * dt / track_length``
    minus ``w2`` times any excursion past the boundary, so a full lap earns ``w1``.
    """

    name = "track"

    def __init__(self, track: SplineTrack | None = None, dt=0.1, timeout=3000, spawn_speed=(5.0, 15.0),
                 fixed_spawn=(0.0, 10.0), reward_weights=(1000.0, 1.0), no_progress_steps=100,
                 no_progress_min=0.1, model: dyn.SystemModel | None = None, seed=None):
        super().__init__(model or dyn.bike(), dt, timeout, seed)
        self.track = track or SplineTrack.default()
        self.spawn_speed = spawn_speed
        self.fixed_spawn = fixed_spawn
        self.w1, self.w2 = reward_weights
        self.no_progress_steps = int(no_progress_steps)
        self.no_progress_min = float(no_progress_min)
        self._frame = None
        self._frame_key = None
        self.tracker = None
        self._window = deque()

    def _spawn_at(self, s, v):
        p = self.track.point(s)
        return np.array([p[0], p[1], v, float(self.track.heading(s)) % (2 * math.pi)])

    def initial_state(self, spawn):
        if spawn == "fixed":
            return self._spawn_at(*self.fixed_spawn)
        s = self.rng.uniform(0.0, self.track.total_length)
        return self._spawn_at(s, self.rng.uniform(*self.spawn_speed))

    def _on_reset(self):
        self._frame = None
        fr = self._sync_frame()
        self.tracker = ProgressTracker(self.track, fr.s)
        self._window = deque([0.0], maxlen=self.no_progress_steps + 1)

    def _sync_frame(self):
        key = self.state[:2].tobytes()
        if self._frame is None or self._frame_key != key:
            self._frame = self.track.project(self.state[:2])
            self._frame_key = key
        return self._frame

    def observe(self) -> EnvObs:
        fr = self._sync_frame()
        l = self.track.width / 2.0 - abs(fr.d)
        return EnvObs(self._features_from(self.state, fr), l, self.state.copy())

    def _features_from(self, state, fr):
        w = self.track.width
        err = (state[3] - fr.heading + math.pi) % (2 * math.pi) - math.pi
        curv = self.track.curvature(fr.s + np.asarray(CURVATURE_LOOKAHEAD)) * CURVATURE_SCALE
        l = w / 2.0 - abs(fr.d)
        return np.concatenate([[fr.d / w, err, state[2] / 30.0], curv, [l / w]])

    def features(self, state):
        return self._features_from(state, self.track.project(np.asarray(state)[:2]))

    def l(self, state) -> float:
        return self.track.signed_distance(np.asarray(state, dtype=float)[:2])

    def _transition(self, prev, u):
        fr = self._sync_frame()
        l = self.track.width / 2.0 - abs(fr.d)
        frac = self.tracker.update(fr.s)
        self._window.append(self.tracker.best)
        L = self.track.total_length
        reward = self.w1 * (self.state[2] * self.dt / L) - self.w2 * max(0.0, -l)
        info = {"progress": frac}
        if l < 0:
            return reward, "off_track", info
        if frac >= 1.0:
            return reward, "lap_complete", info
        if len(self._window) > self.no_progress_steps and \
                self._window[-1] - self._window[0] < self.no_progress_min:
            return reward, "no_progress", info
        return reward, None, info

    def speed(self, state):
        return float(state[2])

    def progress(self):
        return self.tracker.fraction if self.tracker else 0.0


ENVS = {"di": DoubleIntegratorEnv, "double_integrator": DoubleIntegratorEnv,
        "dubins": DubinsEnv, "track": TrackEnv}


def make_env(name: str, **kwargs) -> Env:
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**kwargs)


def run_episode(env: Env, policy, spawn="fixed", seed=None, max_steps=None) -> EpisodeLog:
    """Roll out ``policy(obs) -> (u, source)`` until termination."""
    obs = env.reset(spawn, seed)
    log = EpisodeLog(env.dt)
    steps = 0
    while True:
        u, source = policy(obs)
        res = env.step(u)
        log.record(env.state, u, res.reward, res.obs.l_x, env.speed(env.state), env.progress(), source)
        steps += 1
        obs = res.obs
        if res.done:
            log.reason = res.reason
            break
        if max_steps is not None and steps >= max_steps:
            log.reason = "timeout"
            break
    return log
