"""Closed cubic-spline racetrack: projection, signed distance, lap progress."""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

ARC_TABLE_STEP = 0.01   # m
COARSE_STEP = 0.5       # m
NEWTON_ITERS = 20
NEWTON_TOL = 1e-8


class TrackFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrackFrame:
    s: float
    d: float
    heading: float


class SplineTrack:
    """Periodic cubic spline through ``control_points`` (chord-length knots).

    Travel direction follows the order of the control points; ``d`` is
    positive to the left of it.
    """

    def __init__(self, control_points, width: float):
        pts = np.asarray(control_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
            raise ValueError("need at least 4 (x, y) control points")
        if not width > 0:
            raise ValueError("track width must be positive")
        if np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        self.control_points = pts
        self.width = float(width)

        closed = np.vstack([pts, pts[:1]])
        knots = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(closed, axis=0), axis=1))])
        self._spline = CubicSpline(knots, closed, bc_type="periodic")
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)
        self._t_max = knots[-1]

        # arclength lookup: parameter t <-> arclength s
        n_fine = max(int(math.ceil(self._t_max / ARC_TABLE_STEP)) * 4, 1000)
        t_fine = np.linspace(0.0, self._t_max, n_fine + 1)
        speed = np.linalg.norm(self._d1(t_fine), axis=1)
        seg = 0.5 * (speed[1:] + speed[:-1]) * np.diff(t_fine)
        s_fine = np.concatenate([[0.0], np.cumsum(seg)])
        self.total_length = float(s_fine[-1])
        n_tab = int(math.ceil(self.total_length / ARC_TABLE_STEP))
        self._s_tab = np.linspace(0.0, self.total_length, n_tab + 1)
        self._t_tab = np.interp(self._s_tab, s_fine, t_fine)
        self._t_fine, self._s_fine = t_fine, s_fine

        n_coarse = max(int(math.ceil(self.total_length / COARSE_STEP)), 8)
        self._coarse_s = np.linspace(0.0, self.total_length, n_coarse, endpoint=False)
        self._coarse_t = self.t_of_s(self._coarse_s)
        self._coarse_xy = self._spline(self._coarse_t)

    # -- parameterisation ---------------------------------------------------

    def t_of_s(self, s):
        s = np.mod(np.asarray(s, dtype=float), self.total_length)
        return np.interp(s, self._s_tab, self._t_tab)

    def s_of_t(self, t):
        t = np.mod(np.asarray(t, dtype=float), self._t_max)
        return np.interp(t, self._t_fine, self._s_fine)

    def point(self, s) -> np.ndarray:
        return self._spline(self.t_of_s(s))

    def tangent(self, s) -> np.ndarray:
        d1 = self._d1(self.t_of_s(s))
        return d1 / np.linalg.norm(d1, axis=-1, keepdims=True)

    def heading(self, s):
        d1 = self._d1(self.t_of_s(s))
        return np.arctan2(d1[..., 1], d1[..., 0])

    def normal(self, s) -> np.ndarray:
        t = self.tangent(s)
        return np.stack([-t[..., 1], t[..., 0]], axis=-1)

    def curvature(self, s):
        t = self.t_of_s(s)
        d1, d2 = self._d1(t), self._d2(t)
        num = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
        return num / np.linalg.norm(d1, axis=-1) ** 3

    # -- projection -----------------------------------------------------------

    def _newton(self, t, p):
        """Refine parameters ``t`` (n,) toward the closest points to ``p`` (n, 2)."""
        t = np.array(t, dtype=float)
        active = np.ones(len(t), dtype=bool)
        for _ in range(NEWTON_ITERS):
            c = self._spline(t)
            d1 = self._d1(t)
            d2 = self._d2(t)
            r = c - p
            g = np.sum(r * d1, axis=1)
            h = np.sum(d1 * d1, axis=1) + np.sum(r * d2, axis=1)
            h = np.where(h > 1e-12, h, np.sum(d1 * d1, axis=1))
            step = np.where(active, g / h, 0.0)
            # keep the update local to the coarse bracket
            step = np.clip(step, -COARSE_STEP, COARSE_STEP)
            t = t - step
            moved = np.abs(step) * np.linalg.norm(d1, axis=1)
            active &= moved > NEWTON_TOL
            if not active.any():
                break
        return np.mod(t, self._t_max)

    def _frames(self, t, p):
        c = self._spline(t)
        d1 = self._d1(t)
        tan = d1 / np.linalg.norm(d1, axis=1, keepdims=True)
        r = p - c
        d = tan[:, 0] * r[:, 1] - tan[:, 1] * r[:, 0]
        return self.s_of_t(t), d, np.arctan2(tan[:, 1], tan[:, 0]), np.linalg.norm(r, axis=1)

    def project(self, p) -> TrackFrame:
        """Closest centerline point to ``p``; ties go to the smaller arclength."""
        p = np.asarray(p, dtype=float)
        if p.shape != (2,) or not np.all(np.isfinite(p)):
            raise ValueError("p must be a finite 2-vector")
        dist2 = np.sum((self._coarse_xy - p) ** 2, axis=1)
        prev, nxt = np.roll(dist2, 1), np.roll(dist2, -1)
        is_min = (dist2 <= prev) & (dist2 <= nxt)
        best = math.sqrt(dist2.min())
        # every local minimum that could still be the global one after refinement
        cand = np.flatnonzero(is_min & (np.sqrt(dist2) <= best + COARSE_STEP))
        if len(cand) == 0:
            cand = np.array([int(np.argmin(dist2))])
        t = self._newton(self._coarse_t[cand], np.repeat(p[None], len(cand), axis=0))
        s, d, hd, dist = self._frames(t, np.repeat(p[None], len(cand), axis=0))
        s = np.where(s >= self.total_length, 0.0, s)
        order = np.lexsort((s, np.round(dist, 9)))
        i = order[0]
        return TrackFrame(float(s[i]), float(d[i]), float(hd[i]))

    def project_many(self, P, chunk: int = 2048):
        """Batched projection: returns arrays (s, d, heading)."""
        P = np.asarray(P, dtype=float).reshape(-1, 2)
        out_s = np.empty(len(P))
        out_d = np.empty(len(P))
        out_h = np.empty(len(P))
        for lo in range(0, len(P), chunk):
            p = P[lo:lo + chunk]
            d2 = ((p[:, None, 0] - self._coarse_xy[None, :, 0]) ** 2
                  + (p[:, None, 1] - self._coarse_xy[None, :, 1]) ** 2)
            idx = np.argmin(d2, axis=1)
            t = self._newton(self._coarse_t[idx], p)
            s, d, hd, _ = self._frames(t, p)
            out_s[lo:lo + chunk] = np.where(s >= self.total_length, 0.0, s)
            out_d[lo:lo + chunk] = d
            out_h[lo:lo + chunk] = hd
        return out_s, out_d, out_h

    def signed_distance(self, p) -> float:
        """Distance to the nearer road edge: positive inside, negative outside."""
        return self.width / 2.0 - abs(self.project(p).d)

    def signed_distance_many(self, P) -> np.ndarray:
        _, d, _ = self.project_many(P)
        return self.width / 2.0 - np.abs(d)

    def boundary_polygons(self, step: float = ARC_TABLE_STEP):
        """Left and right road edges sampled every ``step`` meters."""
        s = np.arange(0.0, self.total_length, step)
        c = self.point(s)
        nrm = self.normal(s)
        half = self.width / 2.0
        return c + half * nrm, c - half * nrm

    # -- io -------------------------------------------------------------------

    @classmethod
    def from_file(cls, path) -> "SplineTrack":
        text = Path(path).read_text()
        return cls._parse(text, str(path))

    @classmethod
    def default(cls) -> "SplineTrack":
        text = resources.files("reachguard").joinpath("data/stadium.txt").read_text()
        return cls._parse(text, "stadium.txt")

    @classmethod
    def _parse(cls, text: str, origin: str) -> "SplineTrack":
        width = None
        pts = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "width":
                if len(parts) != 2:
                    raise TrackFormatError(f"{origin}:{lineno}: expected 'width <w>'")
                width = float(parts[1])
                continue
            if len(parts) != 2:
                raise TrackFormatError(f"{origin}:{lineno}: expected 'x y'")
            try:
                pts.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise TrackFormatError(f"{origin}:{lineno}: non-numeric coordinate") from None
        if width is None:
            raise TrackFormatError(f"{origin}: missing 'width' header")
        return cls(pts, width)

    def to_file(self, path):
        lines = [f"width {self.width!r}"] + [f"{float(x)!r} {float(y)!r}" for x, y in self.control_points]
        Path(path).write_text("\n".join(lines) + "\n")


def progress_fraction(track: SplineTrack, s_start: float, s_now: float, direction: int = 1) -> float:
    """Fraction of a lap from ``s_start`` to ``s_now`` in the racing direction."""
    L = track.total_length
    delta = ((s_now - s_start) * direction) % L
    return delta / L


class ProgressTracker:
    """Accumulates signed arclength steps and keeps the farthest point reached.

    Per-step increments are wrapped into (-L/2, L/2], so seam crossings are
    handled; the reported progress never decreases.
    """

    def __init__(self, track: SplineTrack, s_start: float, direction: int = 1):
        self.track = track
        self.direction = direction
        self.s_last = s_start
        self.accumulated = 0.0
        self.best = 0.0

    def update(self, s_now: float) -> float:
        L = self.track.total_length
        step = ((s_now - self.s_last) * self.direction + L / 2.0) % L - L / 2.0
        self.accumulated += step
        self.s_last = s_now
        self.best = max(self.best, self.accumulated)
        return self.best / L

    @property
    def fraction(self) -> float:
        return self.best / self.track.total_length
