"""Carleman weights, the conjugated heat operator and measured Carleman ratios.

The weight is ``phi(x, t) = exp(lam_c (d(x) - beta (t - t0)^2))`` and
``w = exp(2 s phi)``.  Conjugating ``L0 = d_t - Lap`` gives

    e^{s phi} L0(e^{-s phi} v)
        = v_t - Lap v + 2 s grad phi . grad v + (-s phi_t + s Lap phi - s^2 |grad phi|^2) v.

Spatial derivatives of test fields use the second-order stencils of
:mod:`parainverse.grid` (zero ghost values), which need no symmetry across the
walls; ``e^{s phi} v`` is not odd-extendable in general.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .forward import ProblemSpec, time_derivative_frames
from .grid import (
    Grid,
    SpaceTimeField,
    face_measure,
    fd_gradient,
    fd_laplacian,
    normal_derivative,
    trapezoid_weights,
)

logger = logging.getLogger(__name__)

__all__ = [
    "CarlemanParams",
    "WeightPair",
    "CarlemanTerms",
    "WeightOverflow",
    "build_weights",
    "conjugated_operator",
    "conjugation_defect",
    "carleman_ratio",
    "perturbed_ratio",
    "test_ensemble",
    "carleman_sweep",
    "perturbed_sweep",
    "sweep_growth",
]

LOG_LIMIT = 700.0
DEGENERATE = 1e-14


class WeightOverflow(OverflowError):
    """``s * max(phi)`` is beyond what double precision can exponentiate."""


def _coord_gradient(grid: Grid, d: np.ndarray) -> list:
    # np.gradient with edge_order=2 is exact on quadratics, enough for weight functions.
    return [np.gradient(d, x, axis=i, edge_order=2) for i, x in enumerate(grid.coords())]


@dataclass
class CarlemanParams:
    """Weight-generating function ``d`` on the grid and the scalars of ``phi``.

    ``omega`` optionally masks the exceptional set where ``|grad d|`` may vanish.
    """

    grid: Grid
    d_fn: np.ndarray
    lam_c: float = 2.0
    beta: float = 1.0
    s_c: float = 4.0
    t0: float = 0.5
    omega: Optional[np.ndarray] = None

    def __post_init__(self):
        self.d_fn = self.grid.check(self.d_fn)
        if self.d_fn.shape != self.grid.shape:
            raise ValueError("d_fn must be a single field on the grid")
        if not self.lam_c >= 1:
            raise ValueError("lam_c must be at least 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.s_c >= 0:
            raise ValueError("s_c must be nonnegative")
        if np.any(self.d_fn < 0):
            raise ValueError("d_fn must be nonnegative")
        gnorm = np.sqrt(sum(g ** 2 for g in self.grad_d))
        outside = np.ones(self.grid.shape, bool) if self.omega is None else ~np.asarray(self.omega, bool)
        if np.any(gnorm[outside] <= 0) and np.any(self.d_fn != 0):
            raise ValueError("|grad d| must be positive outside omega")

    @classmethod
    def default(cls, grid: Grid, t0: float = 0.5, lam_c: float = 2.0, beta: float = 1.0, s_c: float = 4.0):
        """``d = x_1 / L_1``: vanishes only on the unobserved face ``x_1 = 0``, ``|grad d|`` constant."""
        return cls(grid, grid.mesh()[0] / grid.lengths[0], lam_c, beta, s_c, t0)

    def with_s(self, s_c: float) -> "CarlemanParams":
        return replace(self, s_c=s_c)

    @property
    def grad_d(self) -> list:
        return _coord_gradient(self.grid, self.d_fn)

    @property
    def lap_d(self) -> np.ndarray:
        out = 0.0
        for i, (g, x) in enumerate(zip(self.grad_d, self.grid.coords())):
            out = out + np.gradient(g, x, axis=i, edge_order=2)
        return out + np.zeros(self.grid.shape)


@dataclass
class WeightPair:
    """``phi`` on the frames and ``log w = 2 s phi`` (``w`` itself on demand)."""

    phi: SpaceTimeField
    log_w: np.ndarray
    params: CarlemanParams

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.log_w)

    @property
    def phi_t(self) -> np.ndarray:
        p = self.params
        dt = (self.phi.times - p.t0).reshape((-1,) + (1,) * p.grid.dim)
        return -2 * p.lam_c * p.beta * dt * self.phi.frames

    @property
    def grad_phi(self) -> list:
        p = self.params
        return [p.lam_c * self.phi.frames * g for g in p.grad_d]

    @property
    def lap_phi(self) -> np.ndarray:
        p = self.params
        g2 = sum(g ** 2 for g in p.grad_d)
        return p.lam_c * self.phi.frames * p.lap_d + p.lam_c ** 2 * self.phi.frames * g2

    def decay_constant(self) -> float:
        """``c`` in ``w(t_end) <= e^{-c s} max_x w(t0)``: ``2 min_x [phi(x,t0) - phi(x,t_end)]``."""
        p = self.params
        lam_d = p.lam_c * p.d_fn
        ends = [self.phi.times[0], self.phi.times[-1]]
        gap = [np.exp(lam_d) - np.exp(lam_d - p.lam_c * p.beta * (t - p.t0) ** 2) for t in ends]
        return float(2 * min(np.min(g) for g in gap))


def build_weights(params: CarlemanParams, grid: Grid, times: np.ndarray) -> WeightPair:
    """Evaluate ``phi`` and ``log w`` exactly on ``grid x times``.

    Raises :class:`WeightOverflow` when ``s * max(phi)`` exceeds 700.
    """
    if grid != params.grid:
        raise ValueError("params live on a different grid")
    times = np.asarray(times, dtype=float)
    tt = (times - params.t0).reshape((-1,) + (1,) * grid.dim)
    expo = params.lam_c * (params.d_fn - params.beta * tt ** 2)
    top = params.s_c * float(np.exp(np.max(expo)))
    if top > LOG_LIMIT:
        raise WeightOverflow(
            f"s*max(phi) = {top:.4g} > {LOG_LIMIT}; lower s_c below {LOG_LIMIT / np.exp(np.max(expo)):.4g}"
        )
    phi = np.exp(expo)
    return WeightPair(SpaceTimeField(grid, times, phi), 2 * params.s_c * phi, params)


def _frames(v) -> tuple:
    return v.grid, v.times, v.frames, v.dt


def conjugated_operator(v: SpaceTimeField, params: CarlemanParams, weights: WeightPair | None = None) -> SpaceTimeField:
    """``v_t - Lap v + 2 s grad phi . grad v + (-s phi_t + s Lap phi - s^2 |grad phi|^2) v``."""
    grid, times, V, dt = _frames(v)
    wp = weights or build_weights(params, grid, times)
    s = params.s_c
    out = time_derivative_frames(V, dt) - fd_laplacian(grid, V)
    if s == 0:
        return v.with_frames(out)
    gphi = wp.grad_phi
    for gp, gv in zip(gphi, fd_gradient(grid, V)):
        out = out + 2 * s * gp * gv
    g2 = sum(g ** 2 for g in gphi)
    out = out + (-s * wp.phi_t + s * wp.lap_phi - s ** 2 * g2) * V
    return v.with_frames(out)


def conjugation_defect(v: SpaceTimeField, params: CarlemanParams) -> float:
    """Relative L^2 gap between the assembled operator and ``e^{s phi}(d_t - Lap)(e^{-s phi} v)``.

    Both sides use the same discrete derivatives, so the gap is the product
    rule's discretization error.
    """
    grid, times, V, dt = _frames(v)
    wp = build_weights(params, grid, times)
    s = params.s_c
    damp = np.exp(-s * wp.phi.frames)
    u = damp * V
    direct = (time_derivative_frames(u, dt) - fd_laplacian(grid, u)) / damp
    lv = conjugated_operator(v, params, wp).frames
    wts = trapezoid_weights(times).reshape((-1,) + (1,) * grid.dim)
    num = np.sqrt(np.sum(wts * (lv - direct) ** 2))
    den = np.sqrt(np.sum(wts * lv ** 2))
    return float(num / den) if den > 0 else float(num)


@dataclass
class CarlemanTerms:
    """Both sides of a Carleman inequality and their ratio (``None`` if degenerate)."""

    lhs: float
    operator_term: float
    boundary_term: float
    ratio: Optional[float]
    s_c: float
    extras: dict = field(default_factory=dict)

    @property
    def rhs(self) -> float:
        return self.operator_term + self.boundary_term

    @property
    def skipped(self) -> bool:
        return self.ratio is None


def _integral(grid: Grid, times: np.ndarray, a: np.ndarray) -> float:
    wts = trapezoid_weights(times).reshape((-1,) + (1,) * grid.dim)
    return float(np.sum(wts * a) * grid.cell_volume)


def _lhs(grid, times, V, dt, s, wp) -> float:
    vt = time_derivative_frames(V, dt)
    lap = fd_laplacian(grid, V)
    gv = fd_gradient(grid, V)
    g2v = sum(g ** 2 for g in gv)
    g2phi = sum(g ** 2 for g in wp.grad_phi)
    dens = s * g2v + s ** 3 * g2phi * V ** 2
    if s > 0:
        dens = dens + (vt ** 2 + lap ** 2) / s
    return _integral(grid, times, dens)


def _boundary(grid, times, V, s, faces) -> float:
    wts = trapezoid_weights(times)
    total = 0.0
    for face in faces:
        dn = normal_derivative(grid, V, face)
        per_t = np.sum((dn ** 2).reshape(dn.shape[0], -1), axis=1) * face_measure(grid, face)
        total += s * float(np.sum(wts * per_t))
    # Window-end energy; it carries the e^{-cs} factor relative to the weight at t0.
    for k in (0, -1):
        vk = V[k]
        total += float(np.sum(vk ** 2) * grid.cell_volume)
        total += float(sum(np.sum(g ** 2) for g in fd_gradient(grid, vk)) * grid.cell_volume)
    return total


def carleman_ratio(v: SpaceTimeField, params: CarlemanParams, faces=("x1+",)) -> CarlemanTerms:
    """``int (|v_t|^2 + |Lap v|^2)/s + s |grad v|^2 + s^3 |grad phi|^2 |v|^2`` over
    ``int |L_phi v|^2 + s int_{Gamma x I} |d_nu v|^2 + end terms``.

    The ratio is homogeneous of degree zero in ``v``.
    """
    grid, times, V, dt = _frames(v)
    wp = build_weights(params, grid, times)
    s = params.s_c
    lhs = _lhs(grid, times, V, dt, s, wp)
    op = _integral(grid, times, conjugated_operator(v, params, wp).frames ** 2)
    bd = _boundary(grid, times, V, s, faces)
    ratio = None if max(lhs, op + bd) < DEGENERATE else lhs / (op + bd)
    return CarlemanTerms(lhs, op, bd, ratio, s, {"decay_constant": wp.decay_constant()})


def perturbed_ratio(z: SpaceTimeField, u: SpaceTimeField, spec: ProblemSpec, params: CarlemanParams) -> CarlemanTerms:
    """Carleman ratio for ``v = e^{s phi} z`` against ``int |(d_t R) f + K(u, z)|^2 w``.

    ``K = alpha z . grad u`` with coefficients ``b_tilde = b + alpha u`` and
    ``c_tilde = c + 2 lam u``.  Everything is rescaled by ``e^{-s max phi}``,
    which cancels in the ratio and keeps the weight in range.  ``extras``
    carries the absorption integrals ``int |b_tilde . grad v|^2`` and
    ``int |(c_tilde - s b_tilde . grad phi) v|^2`` next to ``int |grad v|^2``
    and ``int |v|^2``.
    """
    grid, times = z.grid, z.times
    wp = build_weights(params, grid, times)
    s = params.s_c
    shift = s * float(np.max(wp.phi.frames))
    scale = np.exp(s * wp.phi.frames - shift)
    V = scale * z.frames

    lhs = _lhs(grid, times, V, z.dt, s, wp)
    bd = _boundary(grid, times, V, s, spec.faces)
    src = np.stack([spec.source.dt(t) * spec.f_true for t in times])
    gu = fd_gradient(grid, u.frames)
    k = sum(a * z.frames * g for a, g in zip(spec.alpha, gu))
    op = _integral(grid, times, (scale * (src + k)) ** 2)

    btil = [bi + a * u.frames for bi, a in zip(spec.b, spec.alpha)]
    ctil = spec.c + 2 * spec.lam * u.frames
    gv = fd_gradient(grid, V)
    gphi = wp.grad_phi
    drift = sum(b * g for b, g in zip(btil, gv))
    pot = ctil - s * sum(b * g for b, g in zip(btil, gphi))
    extras = {
        "absorb_drift": _integral(grid, times, drift ** 2),
        "absorb_potential": _integral(grid, times, (pot * V) ** 2),
        "grad_v": _integral(grid, times, sum(g ** 2 for g in gv)),
        "v": _integral(grid, times, V ** 2),
        "log_scale": 2 * shift,
        "decay_constant": wp.decay_constant(),
    }
    ratio = None if max(lhs, op + bd) < DEGENERATE else lhs / (op + bd)
    return CarlemanTerms(lhs, op, bd, ratio, s, extras)


def _bump(times: np.ndarray, center: float, width: float) -> np.ndarray:
    r = (times - center) / width
    out = np.zeros_like(times)
    inside = np.abs(r) < 1
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def test_ensemble(grid: Grid, times: np.ndarray, size: int = 20) -> list:
    """Sine modes in ``x`` times smooth bumps in ``t`` that vanish at the window ends."""
    times = np.asarray(times, dtype=float)
    t_lo, t_hi = times[0], times[-1]
    span = t_hi - t_lo
    bumps = [
        (t_lo + 0.5 * span, 0.45 * span),
        (t_lo + 0.3 * span, 0.25 * span),
        (t_lo + 0.7 * span, 0.25 * span),
        (t_lo + 0.5 * span, 0.2 * span),
    ]
    X = grid.mesh()
    out = []
    for i in range(size):
        k = 1 + i % 5
        center, width = bumps[(i // 5) % len(bumps)]
        shape = np.ones(grid.shape)
        for j, (x, L) in enumerate(zip(X, grid.lengths)):
            shape = shape * np.sin((k if j == 0 else 1) * np.pi * x / L)
        frames = _bump(times, center, width).reshape((-1,) + (1,) * grid.dim) * shape
        out.append(SpaceTimeField(grid, times, frames))
    return out


def carleman_sweep(params: CarlemanParams, ensemble: list, s_values, faces=("x1+",)) -> list:
    """Rows ``(s_C, lam_C, beta, ensemble_id, lhs, rhs, ratio)`` for every pair."""
    rows = []
    for s in s_values:
        p = params.with_s(float(s))
        for i, v in enumerate(ensemble):
            t = carleman_ratio(v, p, faces)
            rows.append({
                "s_C": float(s), "lam_C": p.lam_c, "beta": p.beta, "ensemble_id": i,
                "lhs": t.lhs, "rhs": t.rhs, "ratio": t.ratio,
            })
    return rows


def sweep_growth(rows: list) -> Optional[float]:
    """Largest rise of the per-``s_C`` maximum ratio along the sweep.

    ``max_{i<j} peak_j / peak_i`` over increasing ``s_C``; a ratio that falls
    as ``s_C`` grows is bounded and gives a value of at most 1.
    """
    s_values = sorted({r["s_C"] for r in rows})
    peak = [max(r["ratio"] for r in rows if r["s_C"] == s and r["ratio"] is not None) for s in s_values]
    if len(peak) < 2 or min(peak) <= 0:
        return None
    return max(peak[j] / peak[i] for i in range(len(peak)) for j in range(i + 1, len(peak)))


def perturbed_sweep(grid: Grid, eps_values, s_c: float = 4.0, dt: float = 1e-4, lam_c: float = 2.0,
                    beta: float = 1.0, problem_kw: dict | None = None) -> list:
    """Perturbed ratio along an ``eps`` ladder, next to the linear problem at the same ``eps``.

    The ratio is homogeneous of degree zero, so the linear value does not move
    with ``eps``; ``departure = |ratio / linear_ratio - 1|`` isolates the
    effect of the nonlinear coefficients and ``K``.
    """
    from .forward import default_problem, solve, time_derivative

    problem_kw = dict(problem_kw or {})
    rows = []
    for eps in eps_values:
        out = {}
        for linear in (True, False):
            spec = default_problem(grid, eps=eps, dt=dt, linear=linear, **problem_kw)
            u = solve(spec, dt=dt)
            params = CarlemanParams.default(grid, spec.t0, lam_c, beta, s_c)
            out[linear] = perturbed_ratio(time_derivative(u), u, spec, params)
        nl, lin = out[False], out[True]
        rows.append({
            "eps": float(eps), "s_C": float(s_c), "ratio": nl.ratio, "linear_ratio": lin.ratio,
            "departure": abs(nl.ratio / lin.ratio - 1.0),
            "lhs": nl.lhs, "rhs": nl.rhs,
            "absorb_drift": nl.extras["absorb_drift"], "absorb_potential": nl.extras["absorb_potential"],
        })
    return rows
