"""Small 64-bit feedforward networks with hand-written reverse mode.

Batches are row-major: inputs (N, in), outputs (N, out). Weights are stored
as (in, out) matrices so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_LOG_2PI = math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)

MLP_MAGIC = b"MLPC"
MLP_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(float)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class Mlp:
    layer_sizes: list
    activations: list           # one per hidden layer; the output layer is linear
    weights: list
    biases: list

    def __post_init__(self):
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if len(self.activations) != len(self.layer_sizes) - 2:
            raise ValueError("one activation per hidden layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"parameter shapes of layer {i} do not match layer_sizes")

    @classmethod
    def create(cls, layer_sizes, activation="relu", rng=None) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng() if rng is None else rng
        sizes = [int(n) for n in layer_sizes]
        acts = [activation] * (len(sizes) - 2) if isinstance(activation, str) else list(activation)
        Ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            Ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(sizes, acts, Ws, bs)

    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_sizes), list(self.activations),
                   [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None] if single else x
        if X.ndim != 2 or X.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input width {X.shape[-1]} does not match {self.layer_sizes[0]}")
        inputs, pre, post = [], [], []
        h = X
        n_layers = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ W + b
            act = self.activations[i] if i < n_layers - 1 else "identity"
            h = _act(act, z)
            pre.append(z)
            post.append(h)
        cache = {"inputs": inputs, "pre": pre, "post": post, "single": single}
        return (h[0] if single else h), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dL_dy):
        """Gradients of a scalar loss; returns (param_grads, dL_dx)."""
        g = np.asarray(dL_dy, dtype=float)
        if cache["single"]:
            g = g[None]
        if g.shape != cache["post"][-1].shape:
            raise ValueError(f"dL_dy shape {g.shape} does not match output {cache['post'][-1].shape}")
        n_layers = len(self.weights)
        grads = [None] * (2 * n_layers)
        for i in reversed(range(n_layers)):
            act = self.activations[i] if i < n_layers - 1 else "identity"
            dz = g * _act_grad(act, cache["pre"][i], cache["post"][i])
            grads[2 * i] = cache["inputs"][i].T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            g = dz @ self.weights[i].T
        return grads, (g[0] if cache["single"] else g)

    def set_params(self, flat_list) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = flat_list[2 * i]
            self.biases[i] = flat_list[2 * i + 1]


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    m: list
    v: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    nan_skips: int = 0

    @classmethod
    def for_params(cls, params, lr: float) -> "AdamState":
        return cls(lr, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState) -> list:
    """In-place bias-corrected Adam update; non-finite gradients skip the step."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("params and grads do not match")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.nan_skips += 1
        return params
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --------------------------------------------------------------------------
# squashed Gaussian policy
# --------------------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def tanh_log_det(z):
    """log(1 - tanh(z)^2) in a form that stays finite for large |z|."""
    return 2.0 * (_LOG_2 - z - softplus(-2.0 * z))


@dataclass
class GaussianPolicyHead:
    """Network emitting mean and log std; actions are tanh-squashed into (-1, 1).

    The last layer of ``net`` has ``2 * act_dim`` outputs: means then raw log stds.
    """

    net: Mlp
    act_dim: int
    action_lo: np.ndarray = None
    action_hi: np.ndarray = None

    def __post_init__(self):
        if self.net.layer_sizes[-1] != 2 * self.act_dim:
            raise ValueError("policy net must output 2 * act_dim values")
        lo = -np.ones(self.act_dim) if self.action_lo is None else np.asarray(self.action_lo, dtype=float)
        hi = np.ones(self.act_dim) if self.action_hi is None else np.asarray(self.action_hi, dtype=float)
        self.action_lo, self.action_hi = lo, hi

    @classmethod
    def create(cls, obs_dim, act_dim, hidden=(64, 64, 32), activation="relu", rng=None,
               action_lo=None, action_hi=None) -> "GaussianPolicyHead":
        net = Mlp.create([obs_dim, *hidden, 2 * act_dim], activation, rng)
        return cls(net, act_dim, action_lo, action_hi)

    def scale(self, u_n):
        return self.action_lo + 0.5 * (np.asarray(u_n) + 1.0) * (self.action_hi - self.action_lo)

    def unscale(self, u):
        return 2.0 * (np.asarray(u) - self.action_lo) / (self.action_hi - self.action_lo) - 1.0

    def dist(self, x):
        out, cache = self.net.forward(np.atleast_2d(x))
        mu = out[:, :self.act_dim]
        raw = out[:, self.act_dim:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std, raw, cache

    def sample(self, x, xi=None):
        """Reparameterised sample; ``xi`` of zeros gives the deterministic action."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        mu, log_std, raw, cache = self.dist(x)
        xi = np.zeros_like(mu) if xi is None else np.broadcast_to(np.asarray(xi, dtype=float), mu.shape)
        std = np.exp(log_std)
        z = mu + std * xi
        u_n = np.tanh(z)
        logp = np.sum(-0.5 * xi * xi - log_std - 0.5 * _LOG_2PI - tanh_log_det(z), axis=1)
        s = {"cache": cache, "mu": mu, "log_std": log_std, "raw": raw, "std": std, "xi": xi, "z": z,
             "u_n": u_n, "logp": logp, "single": single}
        return s

    def log_prob(self, x, u_n):
        """Density of a normalised action ``u_n`` in (-1, 1)."""
        mu, log_std, _, _ = self.dist(x)
        z = np.arctanh(np.asarray(u_n, dtype=float))
        xi = (z - mu) / np.exp(log_std)
        return np.sum(-0.5 * xi * xi - log_std - 0.5 * _LOG_2PI - tanh_log_det(z), axis=1)

    def backward(self, s, dL_du_n, dL_dlogp):
        """Parameter gradients through a reparameterised sample.

        ``dL_du_n`` is (N, act_dim); ``dL_dlogp`` is (N,) or scalar.
        """
        dL_du = np.asarray(dL_du_n, dtype=float).reshape(s["u_n"].shape)
        w = np.broadcast_to(np.asarray(dL_dlogp, dtype=float), (s["u_n"].shape[0],))[:, None]
        u = s["u_n"]
        dz = dL_du * (1.0 - u * u) + w * 2.0 * np.tanh(s["z"])
        d_mu = dz
        d_ls = dz * s["std"] * s["xi"] - w
        clamped = (s["raw"] < LOG_STD_MIN) | (s["raw"] > LOG_STD_MAX)
        d_ls = np.where(clamped, 0.0, d_ls)
        grads, _ = self.net.backward(s["cache"], np.concatenate([d_mu, d_ls], axis=1))
        return grads

    def act(self, x, rng=None, deterministic=False):
        """Scaled action(s) for environment use."""
        x = np.asarray(x, dtype=float)
        mu_shape = (1 if x.ndim == 1 else len(x), self.act_dim)
        xi = np.zeros(mu_shape) if deterministic or rng is None else rng.standard_normal(mu_shape)
        s = self.sample(x, xi)
        u = self.scale(s["u_n"])
        return u[0] if x.ndim == 1 else u


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def _rel_err(a, n):
    a = np.ravel(a)
    n = np.ravel(n)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def finite_diff_check(net: Mlp, x, h: float = 1e-5, seed: int = 0) -> float:
    """Worst per-tensor relative error of ``backward`` against central differences.

    The scalar loss is a fixed random projection of the outputs.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c = np.random.default_rng(seed).normal(size=(x.shape[0], net.layer_sizes[-1]))

    def loss(inp=x):
        return float(np.sum(net.forward(inp)[0] * c))

    y, cache = net.forward(x)
    grads, gx = net.backward(cache, c)
    worst = 0.0
    for p, g in zip(net.params, grads):
        num = np.empty_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp = loss()
            p[i] = old - h
            fm = loss()
            p[i] = old
            num[i] = (fp - fm) / (2 * h)
        worst = max(worst, _rel_err(g, num))
    num = np.empty_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        num[i] = (loss(xp) - loss(xm)) / (2 * h)
    return max(worst, _rel_err(gx, num))


def min_preactivation_margin(net: Mlp, x) -> float:
    """Smallest |pre-activation| over relu units; small values sit near a kink."""
    _, cache = net.forward(np.atleast_2d(x))
    margins = [np.min(np.abs(z)) for z, a in zip(cache["pre"][:-1], net.activations) if a == "relu"]
    return float(min(margins)) if margins else math.inf


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def encode_mlp(net: Mlp) -> bytes:
    buf = io.BytesIO()
    buf.write(MLP_MAGIC)
    buf.write(struct.pack("<HH", MLP_VERSION, len(net.layer_sizes)))
    buf.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
    codes = [ACTIVATIONS.index(a) for a in net.activations]
    buf.write(struct.pack(f"<{len(codes)}B", *codes))
    for p in net.params:
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_mlp(data: bytes) -> Mlp:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError("truncated checkpoint")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != MLP_MAGIC:
        raise CheckpointFormatError("bad magic: not an MLPC checkpoint")
    version, n = struct.unpack("<HH", take(4))
    if version != MLP_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    sizes = list(struct.unpack(f"<{n}I", take(4 * n)))
    codes = struct.unpack(f"<{n - 2}B", take(n - 2)) if n > 2 else ()
    if any(c >= len(ACTIVATIONS) for c in codes):
        raise CheckpointFormatError("bad activation code")
    Ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        Ws.append(np.frombuffer(take(8 * a * b), dtype="<f8").astype(float).reshape(a, b))
        bs.append(np.frombuffer(take(8 * b), dtype="<f8").astype(float))
    if pos != len(data):
        raise CheckpointFormatError("trailing bytes after parameters")
    return Mlp(sizes, [ACTIVATIONS[c] for c in codes], Ws, bs)


def save_mlp(net: Mlp, path) -> None:
    Path(path).write_bytes(encode_mlp(net))


def load_mlp(path) -> Mlp:
    return decode_mlp(Path(path).read_bytes())


def mlp_equal(a: Mlp, b: Mlp) -> bool:
    return (a.layer_sizes == b.layer_sizes and a.activations == b.activations
            and all(x.tobytes() == y.tobytes() for x, y in zip(a.params, b.params)))
