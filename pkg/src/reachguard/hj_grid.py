"""Grid value iteration for the discounted safety Bellman recursion.

Avoid mode (keep-in): ``V <- (1 - g) l + g min(l, max_u V(x + f dt))``; the
super-zero set holds the states that can stay inside ``{l >= 0}`` forever.

Reach mode is the sign mirror: ``V <- (1 - g) l + g max(l, max_u V(x + f dt))``
with ``l`` positive on the target, so the super-zero set holds the states that
can reach the target. It is the same recursion as minimising over controls and
time on ``-l``.

Off-grid values come from multilinear interpolation; periodic dims wrap and
non-periodic dims clamp to the boundary face.
"""

from __future__ import annotations

import io
import itertools
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .dynamics import NumericalError, SystemModel, integrate_step

log = logging.getLogger(__name__)

MAGIC = b"HJVG"
FORMAT_VERSION = 1
MODES = ("avoid", "reach")


class GridFormatError(ValueError):
    pass


class DimensionMismatchError(GridFormatError):
    pass


# --------------------------------------------------------------------------
# grid geometry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    lo: tuple
    hi: tuple
    n: tuple
    periodic: tuple = None

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        n = tuple(int(v) for v in self.n)
        periodic = tuple(bool(p) for p in (self.periodic or (False,) * len(n)))
        if not (len(lo) == len(hi) == len(n) == len(periodic)):
            raise ValueError("lo, hi, n, periodic must have equal length")
        for a, b, k in zip(lo, hi, n):
            if not a < b:
                raise ValueError(f"grid bound lo={a} must be below hi={b}")
            if k < 2:
                raise ValueError("each dim needs at least 2 nodes")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "periodic", periodic)

    @property
    def ndim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(b - a) / (k if p else k - 1)
                         for a, b, k, p in zip(self.lo, self.hi, self.n, self.periodic)])

    @property
    def strides(self) -> np.ndarray:
        return np.array([int(np.prod(self.n[i + 1:])) for i in range(self.ndim)], dtype=np.int64)

    def axis(self, i: int) -> np.ndarray:
        if self.periodic[i]:
            return self.lo[i] + self.spacing[i] * np.arange(self.n[i])
        return np.linspace(self.lo[i], self.hi[i], self.n[i])

    def axes(self) -> list:
        return [self.axis(i) for i in range(self.ndim)]

    def nodes(self) -> np.ndarray:
        """All node coordinates, row-major, shape (size, ndim)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def interp_stencil(spec: GridSpec, X):
    """Corner indices, weights and out-of-bounds flags for multilinear lookup.

    Returns ``idx`` (N, 2**d) int64, ``w`` (N, 2**d) and ``oob`` (N,) bool.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N, d = X.shape
    if d != spec.ndim:
        raise DimensionMismatchError(f"query has {d} dims, grid has {spec.ndim}")
    h = spec.spacing
    strides = spec.strides
    lo_idx, hi_idx, frac = [], [], []
    oob = np.zeros(N, dtype=bool)
    for i in range(d):
        g = (X[:, i] - spec.lo[i]) / h[i]
        n = spec.n[i]
        if spec.periodic[i]:
            g = np.mod(g, n)
            i0 = np.floor(g).astype(np.int64)
            i0 = np.minimum(i0, n - 1)
            f = g - i0
            i1 = (i0 + 1) % n
        else:
            eps = 1e-9
            oob |= (g < -eps) | (g > n - 1 + eps)
            g = np.clip(g, 0.0, n - 1)
            i0 = np.minimum(np.floor(g).astype(np.int64), n - 2)
            f = g - i0
            i1 = i0 + 1
        lo_idx.append(i0 * strides[i])
        hi_idx.append(i1 * strides[i])
        frac.append(f)
    corners = 1 << d
    idx = np.zeros((N, corners), dtype=np.int64)
    w = np.ones((N, corners))
    for c, bits in enumerate(itertools.product((0, 1), repeat=d)):
        for i, b in enumerate(bits):
            if b:
                idx[:, c] += hi_idx[i]
                w[:, c] *= frac[i]
            else:
                idx[:, c] += lo_idx[i]
                w[:, c] *= 1.0 - frac[i]
    return idx, w, oob


@dataclass
class ValueGrid:
    spec: GridSpec
    values: np.ndarray
    gamma: float
    mode: str = "avoid"
    metadata: dict = field(default_factory=dict)
    stats: dict = field(default_factory=lambda: {"oob": 0, "onesided": 0}, compare=False, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.spec.size:
            raise ValueError(f"{self.values.size} values for a grid of {self.spec.size} nodes")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def __eq__(self, other):
        if not isinstance(other, ValueGrid):
            return NotImplemented
        return (self.spec == other.spec and self.gamma == other.gamma and self.mode == other.mode
                and self.metadata == other.metadata
                and self.values.tobytes() == other.values.tobytes())

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.spec.shape)

    def interpolate(self, x):
        """Multilinear value at state(s) ``x``; scalar in, scalar out."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        idx, w, oob = interp_stencil(self.spec, x)
        self.stats["oob"] += int(oob.sum())
        out = np.sum(self.values[idx] * w, axis=1)
        return float(out[0]) if single else out

    def copy(self, values=None) -> "ValueGrid":
        return ValueGrid(self.spec, self.values.copy() if values is None else values,
                         self.gamma, self.mode, dict(self.metadata))


# --------------------------------------------------------------------------
# controls
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlMesh:
    counts: tuple
    samples: np.ndarray

    def __len__(self):
        return len(self.samples)


def make_control_mesh(model: SystemModel, counts) -> ControlMesh:
    """Cartesian product of per-dim samples, endpoints included."""
    if np.isscalar(counts):
        counts = (int(counts),) * model.dim_u
    counts = tuple(int(c) for c in counts)
    if len(counts) != model.dim_u:
        raise ValueError(f"need {model.dim_u} control counts, got {len(counts)}")
    axes = []
    for i, c in enumerate(counts):
        if c < 1:
            raise ValueError("control count must be positive")
        if c == 1:
            axes.append(np.array([0.5 * (model.control_lo[i] + model.control_hi[i])]))
        else:
            axes.append(np.linspace(model.control_lo[i], model.control_hi[i], c))
    mesh = np.meshgrid(*axes, indexing="ij")
    samples = np.stack([m.ravel() for m in mesh], axis=-1)
    return ControlMesh(counts, samples)


# --------------------------------------------------------------------------
# Bellman operator
# --------------------------------------------------------------------------

def _as_node_values(spec: GridSpec, l) -> np.ndarray:
    if callable(l):
        vals = np.asarray(l(spec.nodes()), dtype=float).ravel()
    else:
        vals = np.asarray(l, dtype=float).ravel()
    if vals.size != spec.size:
        raise ValueError("l must give one value per grid node")
    return vals


def init_value(spec: GridSpec, l, gamma: float = 0.0, mode: str = "avoid", metadata=None) -> ValueGrid:
    vals = _as_node_values(spec, l)
    if not np.all(np.isfinite(vals)):
        raise ValueError("terminal function l is not finite on every node")
    return ValueGrid(spec, vals.copy(), gamma, mode, dict(metadata or {}))


class BellmanOperator:
    """Precomputed interpolation matrices, one per control sample.

    Row ``r`` of matrix ``k`` maps grid values to the interpolated value at the
    successor of active node ``r`` under control ``k``.
    """

    def __init__(self, spec: GridSpec, model: SystemModel, controls: ControlMesh, dt: float,
                 scheme: str = "euler", active=None, chunk: int = 200_000):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.spec = spec
        if active is None:
            self.active = None
            rows = np.arange(spec.size)
        else:
            self.active = np.asarray(active, dtype=bool).ravel()
            rows = np.flatnonzero(self.active)
        self.rows = rows
        self.oob = 0
        self.matrices = []
        nodes_all = None
        for u in controls.samples:
            data_parts, col_parts = [], []
            for lo in range(0, len(rows), chunk):
                r = rows[lo:lo + chunk]
                if nodes_all is None:
                    x = _nodes_at(spec, r)
                else:
                    x = nodes_all[lo:lo + chunk]
                nxt = integrate_step(model, x, np.broadcast_to(u, (len(r), model.dim_u)), dt, scheme)
                idx, w, oob = interp_stencil(spec, nxt)
                self.oob += int(oob.sum())
                col_parts.append(idx.astype(np.int32 if spec.size < 2**31 else np.int64))
                data_parts.append(w)
            cols = np.concatenate(col_parts).ravel()
            data = np.concatenate(data_parts).ravel()
            corners = 1 << spec.ndim
            indptr = np.arange(0, len(rows) * corners + 1, corners)
            self.matrices.append(sp.csr_matrix((data, cols, indptr), shape=(len(rows), spec.size)))

    def best(self, values: np.ndarray, opt=np.maximum) -> np.ndarray:
        out = self.matrices[0] @ values
        for m in self.matrices[1:]:
            opt(out, m @ values, out=out)
        return out

    def argbest(self, values: np.ndarray) -> np.ndarray:
        stacked = np.stack([m @ values for m in self.matrices], axis=1)
        return np.argmax(stacked, axis=1)


def _nodes_at(spec: GridSpec, flat_idx) -> np.ndarray:
    sub = np.unravel_index(flat_idx, spec.shape)
    return np.stack([spec.axis(i)[sub[i]] for i in range(spec.ndim)], axis=-1)


def _apply(V: ValueGrid, l_vals, best, gamma, rows):
    out = V.values.copy()
    lv = l_vals if rows is None else l_vals[rows]
    if V.mode == "avoid":
        new = (1.0 - gamma) * lv + gamma * np.minimum(lv, best)
    else:
        new = (1.0 - gamma) * lv + gamma * np.maximum(lv, best)
    if rows is None:
        out = new
    else:
        out[rows] = new
    bad = ~np.isfinite(out)
    if bad.any():
        raise NumericalError(f"{int(bad.sum())} non-finite values after sweep "
                             f"(first at node {int(np.flatnonzero(bad)[0])})")
    return out


def bellman_sweep(V_k: ValueGrid, model: SystemModel, l, controls: ControlMesh, dt: float,
                  gamma: float, scheme: str = "euler", operator: BellmanOperator | None = None) -> ValueGrid:
    """One Jacobi sweep of the discounted safety recursion; reads only ``V_k``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    l_vals = _as_node_values(V_k.spec, l)
    if operator is None:
        operator = BellmanOperator(V_k.spec, model, controls, dt, scheme)
        V_k.stats["oob"] += operator.oob
    best = operator.best(V_k.values)
    rows = None if operator.active is None else operator.rows
    vals = _apply(V_k, l_vals, best, gamma, rows)
    return ValueGrid(V_k.spec, vals, gamma, V_k.mode, dict(V_k.metadata))


def solve(spec: GridSpec, model: SystemModel, l, controls: ControlMesh, dt: float, gamma: float,
          tol: float = 1e-6, max_iters: int = 1000, mode: str | None = None, scheme: str = "euler",
          V0=None, active=None, progress: Callable | None = None):
    """Iterate sweeps until the sup-norm change drops below ``tol``.

    Returns ``(grid, residuals)``; ``grid.metadata['converged']`` records whether
    the tolerance was met within ``max_iters``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    mode = mode or model.mode
    l_vals = _as_node_values(spec, l)
    if not np.all(np.isfinite(l_vals)):
        raise ValueError("terminal function l is not finite on every node")
    op = BellmanOperator(spec, model, controls, dt, scheme, active=active)
    meta = {
        "system": model.name, "controls": list(controls.counts), "dt": dt, "scheme": scheme,
        "tol": tol, "max_iters": max_iters,
    }
    V = ValueGrid(spec, l_vals.copy() if V0 is None else np.asarray(V0, dtype=float).copy(),
                  gamma, mode, meta)
    V.stats["oob"] += op.oob
    rows = None if op.active is None else op.rows
    residuals = []
    converged = False
    for k in range(max_iters):
        best = op.best(V.values)
        new = _apply(V, l_vals, best, gamma, rows)
        r = float(np.max(np.abs(new - V.values)))
        residuals.append(r)
        V.values = new
        if progress is not None:
            progress(k, r)
        if r < tol:
            converged = True
            break
    V.metadata.update(iterations=len(residuals), converged=converged,
                      residuals=residuals[-2000:], final_residual=residuals[-1] if residuals else None)
    if not converged:
        log.warning("solve did not converge in %d iterations (residual %.3g)", max_iters, residuals[-1])
    return V, residuals


# --------------------------------------------------------------------------
# gradients and controls from a grid
# --------------------------------------------------------------------------

def value_gradient(V: ValueGrid, x, return_flags: bool = False):
    """Central differences with one grid spacing per dim, via interpolation.

    Near a non-periodic boundary the difference becomes one-sided and the
    query is flagged (counted in ``V.stats['onesided']``).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    spec = V.spec
    h = spec.spacing
    N, d = X.shape
    grad = np.empty((N, d))
    flags = np.zeros(N, dtype=bool)
    for i in range(d):
        plus = X.copy()
        minus = X.copy()
        step_p = np.full(N, h[i])
        step_m = np.full(N, h[i])
        if not spec.periodic[i]:
            low = X[:, i] - h[i] < spec.lo[i] - 1e-12
            high = X[:, i] + h[i] > spec.hi[i] + 1e-12
            step_m[low] = 0.0
            step_p[high] = 0.0
            flags |= low | high
        plus[:, i] += step_p
        minus[:, i] -= step_m
        vp = V.interpolate(plus)
        vm = V.interpolate(minus)
        denom = step_p + step_m
        grad[:, i] = np.where(denom > 0, (vp - vm) / np.where(denom > 0, denom, 1.0), 0.0)
    V.stats["onesided"] += int(flags.sum())
    if single:
        grad, flags = grad[0], bool(flags[0])
    return (grad, flags) if return_flags else grad


def optimal_action_from_grid(V: ValueGrid, model: SystemModel, x) -> np.ndarray:
    return model.optimal_control(value_gradient(V, x))


def hamiltonian_argmax(V: ValueGrid, model: SystemModel, x, controls: ControlMesh) -> np.ndarray:
    """Brute-force maximiser of <f(x, u), grad V(x)> over a control mesh."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    g = value_gradient(V, X)
    scores = np.stack([np.sum(model.f(X, np.broadcast_to(u, (len(X), model.dim_u))) * g, axis=1)
                       for u in controls.samples], axis=1)
    return controls.samples[np.argmax(scores, axis=1)]


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def _encode(V: ValueGrid) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", FORMAT_VERSION, V.spec.ndim))
    for i in range(V.spec.ndim):
        buf.write(struct.pack("<ddIB", V.spec.lo[i], V.spec.hi[i], V.spec.n[i], int(V.spec.periodic[i])))
    buf.write(struct.pack("<dB", V.gamma, MODES.index(V.mode)))
    meta = json.dumps(V.metadata, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(V.values.astype("<f8").tobytes())
    return buf.getvalue()


def _decode(data: bytes, expected_dim: int | None = None) -> ValueGrid:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise GridFormatError("truncated grid file")
        chunk = view[pos:pos + n]
        pos += n
        return bytes(chunk)

    if take(4) != MAGIC:
        raise GridFormatError("bad magic: not an HJVG grid file")
    version, ndim = struct.unpack("<HH", take(4))
    if version != FORMAT_VERSION:
        raise GridFormatError(f"unsupported grid format version {version}")
    if expected_dim is not None and ndim != expected_dim:
        raise DimensionMismatchError(f"grid has {ndim} dims, expected {expected_dim}")
    lo, hi, n, per = [], [], [], []
    for _ in range(ndim):
        a, b, k, p = struct.unpack("<ddIB", take(21))
        lo.append(a), hi.append(b), n.append(k), per.append(bool(p))
    gamma, mode_b = struct.unpack("<dB", take(9))
    if mode_b >= len(MODES):
        raise GridFormatError(f"bad mode byte {mode_b}")
    (mlen,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GridFormatError(f"corrupt metadata: {exc}") from None
    spec = GridSpec(tuple(lo), tuple(hi), tuple(n), tuple(per))
    raw = take(8 * spec.size)
    if pos != len(view):
        raise GridFormatError("trailing bytes after grid values")
    values = np.frombuffer(raw, dtype="<f8").astype(float)
    return ValueGrid(spec, values, gamma, MODES[mode_b], meta)


def save_grid(V: ValueGrid, path) -> None:
    Path(path).write_bytes(_encode(V))


def load_grid(path, expected_dim: int | None = None) -> ValueGrid:
    return _decode(Path(path).read_bytes(), expected_dim)


def default_l(system: str):
    """Terminal function for the classical benchmarks."""
    if system in ("double_integrator", "di"):
        return lambda X: 1.0 - np.abs(X[:, 0])
    if system == "dubins":
        return lambda X: 1.0 - np.hypot(X[:, 0], X[:, 1])
    raise ValueError(f"no default l for {system!r}")


def default_spec(system: str, n=None) -> GridSpec:
    if system in ("double_integrator", "di"):
        n = n or (161, 161)
        return GridSpec((-1.1, -2.0), (1.1, 2.0), n, (False, False))
    if system == "dubins":
        n = n or (61, 61, 48)
        return GridSpec((-3.0, -3.0, 0.0), (3.0, 3.0, 2 * math.pi), n, (False, False, True))
    raise ValueError(f"no default grid for {system!r}")


# --------------------------------------------------------------------------
# segment-wise tubes along a track
# --------------------------------------------------------------------------

@dataclass
class TrackSegment:
    """One local grid: core arclength range, window, and the local frame."""

    index: int
    core: tuple          # (s0, s1) owned arclength range
    window: tuple        # (s0, s1) solved range, may wrap past the seam
    origin: np.ndarray   # world position of the local frame origin
    theta: float         # rotation of the local frame
    grid: ValueGrid

    def to_local(self, X: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = X[:, 0] - self.origin[0]
        dy = X[:, 1] - self.origin[1]
        out = X.copy()
        out[:, 0] = c * dx + s * dy
        out[:, 1] = -s * dx + c * dy
        out[:, 3] = np.mod(X[:, 3] - self.theta, 2 * math.pi)
        return out

    def to_world(self, XL: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        out = XL.copy()
        out[:, 0] = self.origin[0] + c * XL[:, 0] - s * XL[:, 1]
        out[:, 1] = self.origin[1] + s * XL[:, 0] + c * XL[:, 1]
        out[:, 3] = np.mod(XL[:, 3] + self.theta, 2 * math.pi)
        return out

    def inside(self, XL: np.ndarray) -> np.ndarray:
        spec = self.grid.spec
        return ((XL[:, 0] >= spec.lo[0]) & (XL[:, 0] <= spec.hi[0])
                & (XL[:, 1] >= spec.lo[1]) & (XL[:, 1] <= spec.hi[1]))


def _arc_gap(s, a, L):
    """Forward arclength from ``a`` to ``s`` on a loop of length ``L``."""
    return np.mod(np.asarray(s) - a, L)


def segment_solve(track, model: SystemModel, segment_length: float = 150.0, overlap: float = 50.0,
                  h_xy: float = 0.75, n_v: int = 5, n_phi: int = 40, margin: float = 5.0,
                  controls=(2, 3), dt: float = 0.1, gamma: float = 0.9999, tol: float = 1e-4,
                  max_iters: int = 300, scheme: str = "euler", progress: Callable | None = None,
                  indices=None):
    """Solve the keep-in tube of ``model`` on overlapping arclength windows.

    Each window covers its core range plus ``overlap`` meters on both sides.
    The local grid is aligned with the window chord and spans the road band
    plus ``margin``; nodes farther than ``margin`` outside the road, or whose
    closest centerline point lies outside the window, are held at ``l``.
    ``indices`` restricts the work to some segments; the others stay unsolved
    and their queries fall back to ``l``.
    """
    if model.dim_x != 4:
        raise ValueError("segment_solve expects the 4-state bike model")
    if not segment_length > 0 or overlap < 0:
        raise ValueError("segment_length must be positive and overlap non-negative")
    L = track.total_length
    n_seg = max(1, int(math.ceil(L / segment_length - 1e-9)))
    core_len = L / n_seg
    v_max = model.saturated_dims.get(2, (0.0, 30.0))[1]
    cmesh = controls if isinstance(controls, ControlMesh) else make_control_mesh(model, controls)
    half = track.width / 2.0
    segments = []
    wanted = set(range(n_seg)) if indices is None else {int(i) % n_seg for i in indices}
    for k in range(n_seg):
        c0, c1 = k * core_len, (k + 1) * core_len
        w0, w1 = c0 - overlap, c1 + overlap
        ss = np.linspace(w0, w1, max(int(math.ceil((w1 - w0) / 1.0)), 2) + 1)
        pts = track.point(ss)
        chord = pts[-1] - pts[0]
        theta = math.atan2(chord[1], chord[0]) if np.linalg.norm(chord) > 1e-6 else float(track.heading(c0))
        origin = pts.mean(axis=0)
        seg0 = TrackSegment(k, (c0, c1), (w0 % L, w1 % L), origin, theta, None)
        if k not in wanted:
            segments.append(seg0)
            continue
        loc = seg0.to_local(np.column_stack([pts, np.zeros((len(pts), 2))]))
        pad = half + margin
        lo_xy = loc[:, :2].min(axis=0) - pad
        hi_xy = loc[:, :2].max(axis=0) + pad
        nx = int(math.ceil((hi_xy[0] - lo_xy[0]) / h_xy)) + 1
        ny = int(math.ceil((hi_xy[1] - lo_xy[1]) / h_xy)) + 1
        hi_xy = lo_xy + h_xy * (np.array([nx, ny]) - 1)
        spec = GridSpec((lo_xy[0], lo_xy[1], 0.0, 0.0), (hi_xy[0], hi_xy[1], v_max, 2 * math.pi),
                        (nx, ny, n_v, n_phi), (False, False, False, True))
        # l and activity depend on position only
        gx, gy = np.meshgrid(spec.axis(0), spec.axis(1), indexing="ij")
        plane = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size), np.zeros(gx.size)])
        world = seg0.to_world(plane)
        s_xy, d_xy, _ = track.project_many(world[:, :2])
        l_xy = half - np.abs(d_xy)
        in_window = _arc_gap(s_xy, w0 % L, L) <= (w1 - w0)
        act_xy = (l_xy >= -margin) & in_window
        reps = n_v * n_phi
        l_vals = np.repeat(l_xy, reps)
        active = np.repeat(act_xy, reps)
        V, res = solve(spec, model, l_vals, cmesh, dt, gamma, tol=tol, max_iters=max_iters,
                       mode="avoid", scheme=scheme, active=active)
        V.metadata.update(segment=k, core=[c0, c1], window=[w0, w1], origin=origin.tolist(), theta=theta,
                          active_nodes=int(active.sum()))
        seg0.grid = V
        segments.append(seg0)
        if progress is not None:
            progress(k, n_seg, res)
    return SegmentedValue(track, model, segments)


class SegmentedValue:
    """Dispatches world-frame queries to the segment owning their arclength."""

    def __init__(self, track, model: SystemModel, segments: list):
        self.track = track
        self.model = model
        self.segments = segments
        self.core_len = track.total_length / len(segments)
        self.stats = {"fallback": 0, "oob": 0}

    def owner(self, s) -> np.ndarray:
        k = np.floor(np.asarray(s) / self.core_len).astype(int)
        return np.clip(k, 0, len(self.segments) - 1)

    def _dispatch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s, d, _ = self.track.project_many(X[:, :2])
        return X, self.owner(s), self.track.width / 2.0 - np.abs(d)

    def value(self, X):
        """Safety value at world states (N, 4); falls back to l outside all grids."""
        x = np.asarray(X, dtype=float)
        X, own, l = self._dispatch(x)
        out = l.copy()
        for k in np.unique(own):
            m = own == k
            seg = self.segments[k]
            XL = seg.to_local(X[m])
            ok = seg.inside(XL) if seg.grid is not None else np.zeros(int(m.sum()), dtype=bool)
            vals = l[m].copy()
            if ok.any():
                vals[ok] = seg.grid.interpolate(XL[ok])
            self.stats["fallback"] += int((~ok).sum())
            out[m] = vals
        return float(out[0]) if x.ndim == 1 else out

    def gradient(self, X, return_inside: bool = False):
        """World-frame gradient of the owning segment's value (zeros on fallback)."""
        x = np.asarray(X, dtype=float)
        X, own, _ = self._dispatch(x)
        out = np.zeros_like(X)
        inside = np.zeros(len(X), dtype=bool)
        for k in np.unique(own):
            m = own == k
            seg = self.segments[k]
            XL = seg.to_local(X[m])
            ok = seg.inside(XL) if seg.grid is not None else np.zeros(int(m.sum()), dtype=bool)
            g = np.zeros_like(XL)
            if ok.any():
                g[ok] = value_gradient(seg.grid, XL[ok])
            self.stats["fallback"] += int((~ok).sum())
            c, s = math.cos(seg.theta), math.sin(seg.theta)
            gw = g.copy()
            gw[:, 0] = c * g[:, 0] - s * g[:, 1]
            gw[:, 1] = s * g[:, 0] + c * g[:, 1]
            out[m] = gw
            inside[m] = ok
        if x.ndim == 1:
            out, inside = out[0], bool(inside[0])
        return (out, inside) if return_inside else out

    def segment_value(self, k: int, X):
        """Value from segment ``k`` regardless of ownership (NaN outside its grid)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        seg = self.segments[k]
        out = np.full(len(X), np.nan)
        if seg.grid is None:
            return out
        XL = seg.to_local(X)
        ok = seg.inside(XL)
        if ok.any():
            out[ok] = seg.grid.interpolate(XL[ok])
        return out

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        index = {"format": "hjvg-segments", "version": 1, "n_segments": len(self.segments),
                 "track_length": self.track.total_length, "width": self.track.width,
                 "segments": []}
        for seg in self.segments:
            if seg.grid is None:
                raise ValueError(f"segment {seg.index} was never solved")
            name = f"seg_{seg.index:03d}.hjvg"
            save_grid(seg.grid, path / name)
            index["segments"].append({"file": name, "core": list(seg.core), "window": list(seg.window),
                                      "origin": seg.origin.tolist(), "theta": seg.theta})
        (path / "segments.json").write_text(json.dumps(index, indent=1))

    @classmethod
    def load(cls, path, track, model: SystemModel) -> "SegmentedValue":
        path = Path(path)
        try:
            index = json.loads((path / "segments.json").read_text())
        except FileNotFoundError:
            raise GridFormatError(f"{path} has no segments.json") from None
        if index.get("format") != "hjvg-segments":
            raise GridFormatError("not a segmented grid directory")
        if abs(index["track_length"] - track.total_length) > 1e-6:
            raise GridFormatError("segmented grid was solved for a different track")
        segs = []
        for i, e in enumerate(index["segments"]):
            g = load_grid(path / e["file"], expected_dim=4)
            segs.append(TrackSegment(i, tuple(e["core"]), tuple(e["window"]),
                                     np.asarray(e["origin"], dtype=float), float(e["theta"]), g))
        return cls(track, model, segs)
