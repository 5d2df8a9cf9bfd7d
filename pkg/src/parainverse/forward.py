"""Semilinear parabolic forward model on the window ``I = (t0 - delta, t0 + delta)``.

    u_t - Lap u - b . grad u - c u = lam u^2 + alpha . (u grad u) + R(x, t) f(x)

with zero Dirichlet data.  Time stepping is first-order IMEX: the Laplacian is
implicit (diagonal in the sine basis), everything else explicit.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .dyadic import besov_norm
from .grid import (
    Grid,
    SpaceTimeField,
    as_torus,
    boundary_trace,
    gradient,
    heat_solve,
    laplacian,
    normal_derivative,
    parse_face,
    restrict,
    torus_gradient,
)
from .paraproduct import paralinearize, paraproduct, partition_for

logger = logging.getLogger(__name__)

__all__ = [
    "SolverBlowUp",
    "SourceFactor",
    "ProblemSpec",
    "ObservationData",
    "default_problem",
    "solve",
    "integrate",
    "spin_up",
    "time_derivative",
    "time_derivative_matrix",
    "time_derivative_frames",
    "observe",
    "residual_z_equation",
]

BLOWUP = 1e6


class SolverBlowUp(FloatingPointError):
    """The explicit part of the scheme diverged."""


@dataclass
class SourceFactor:
    """``R(x, t) = base(x) + slope(x) (t - t0)``; closed form in ``t``."""

    base: np.ndarray
    slope: np.ndarray
    t0: float

    def __call__(self, t: float) -> np.ndarray:
        return self.base + self.slope * (t - self.t0)

    def dt(self, t: float) -> np.ndarray:
        return self.slope


@dataclass
class ProblemSpec:
    grid: Grid
    b: np.ndarray
    c: np.ndarray
    lam: float
    alpha: tuple
    source: SourceFactor
    f_true: np.ndarray
    u_init: np.ndarray
    t0: float = 0.5
    delta: float = 0.1
    r_floor: float = 1.0
    faces: tuple = ("x1+",)
    eps: Optional[float] = None

    def __post_init__(self):
        g = self.grid
        self.b = np.broadcast_to(np.asarray(self.b, dtype=float), (g.dim,) + g.shape).copy()
        self.c = np.broadcast_to(np.asarray(self.c, dtype=float), g.shape).copy()
        self.alpha = tuple(float(a) for a in np.atleast_1d(self.alpha))
        self.f_true = g.check(self.f_true)
        self.u_init = g.check(self.u_init)
        self.faces = tuple(self.faces)
        self.validate()

    def validate(self) -> None:
        g = self.grid
        if len(self.alpha) != g.dim:
            raise ValueError("alpha needs one entry per axis")
        if not self.delta > 0 or not self.t0 - self.delta >= 0:
            raise ValueError("window (t0 - delta, t0 + delta) must be positive and inside (0, T)")
        for name in ("b", "c", "f_true", "u_init"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} must be finite")
        r0 = np.abs(self.source(self.t0))
        if self.r_floor <= 0 or np.min(r0) < self.r_floor * (1 - 1e-12):
            bad = np.unravel_index(np.argmin(r0), r0.shape)
            raise ValueError(f"|R(x, t0)| >= r0 > 0 violated at node {bad}: {r0[bad]}")
        for face in self.faces:
            parse_face(g, face)

    @property
    def window(self) -> tuple:
        return self.t0 - self.delta, self.t0 + self.delta

    @property
    def is_linear(self) -> bool:
        return self.lam == 0 and not any(self.alpha)

    def linearized(self) -> "ProblemSpec":
        return replace(self, lam=0.0, alpha=(0.0,) * self.grid.dim)

    def scaled(self, tau: float) -> "ProblemSpec":
        """Same problem with ``u_init`` and ``f_true`` multiplied by ``tau``."""
        return replace(self, u_init=tau * self.u_init, f_true=tau * self.f_true)

    def times(self, dt: float) -> np.ndarray:
        steps = 2 * self.delta / dt
        n = int(round(steps))
        if abs(steps - n) > 1e-6 * max(1.0, steps):
            raise ValueError(f"dt={dt} does not divide the window length {2 * self.delta}")
        return self.t0 - self.delta + dt * np.arange(n + 1)

    def describe(self) -> dict:
        return {
            "grid": self.grid.describe(),
            "lam": self.lam,
            "alpha": list(self.alpha),
            "t0": self.t0,
            "delta": self.delta,
            "r_floor": self.r_floor,
            "faces": list(self.faces),
            "eps": self.eps,
        }


def _default_shapes(grid: Grid) -> tuple:
    X = grid.mesh()
    u0 = np.ones(grid.shape)
    f0 = np.ones(grid.shape)
    for x, L in zip(X, grid.lengths):
        y = x / L
        u0 = u0 * (np.sin(np.pi * y) + 0.5 * np.sin(2 * np.pi * y))
        f0 = f0 * np.sin(np.pi * y) * np.exp(-((y - 0.55) ** 2) / (2 * 0.15**2))
    return u0, 5.0 * f0


def default_problem(
    grid: Optional[Grid] = None,
    eps: float = 0.05,
    lam: float = 1.0,
    alpha=None,
    b: float = 0.5,
    c: float = -1.0,
    t0: float = 0.5,
    delta: float = 0.1,
    dt: float = 1e-4,
    s: Optional[float] = None,
    faces: tuple = ("x1+",),
    linear: bool = False,
    warm_start: bool = True,
) -> ProblemSpec:
    """Workbench defaults.

    The initial shape and the source are scaled together by ``tau`` so that
    ``sup_t ||u(t)||_{B^s} ~ eps`` on the window (two secant sweeps).  With
    ``warm_start`` the window's initial state is the spin-up of the scaled
    shape from ``t = 0`` (see :func:`spin_up`).
    """
    grid = grid or Grid.uniform(256)
    if alpha is None:
        alpha = (0.3,) + (0.0,) * (grid.dim - 1)
    if s is None:
        s = 1.0 if grid.dim == 1 else 1.5
    u0, f0 = _default_shapes(grid)
    source = SourceFactor(np.ones(grid.shape), np.ones(grid.shape), t0)
    spec = ProblemSpec(grid, b, c, lam, alpha, source, f0, u0, t0, delta, 1.0, faces, eps)
    if linear:
        spec = spec.linearized()
    if eps == 0:
        return spec.scaled(0.0)

    def at_scale(tau):
        f = tau * f0
        u_init = spin_up(spec, tau * u0, f, dt) if warm_start else tau * u0
        return replace(spec, u_init=u_init, f_true=f)

    tau = 1.0
    for _ in range(2):
        level = _window_besov_sup(at_scale(tau), dt, s)
        tau *= eps / level
    out = at_scale(tau)
    out.eps = eps
    return out


def _window_besov_sup(spec: ProblemSpec, dt: float, s: float) -> float:
    u = integrate(spec, spec.f_true, dt)
    stride = max(1, (u.shape[0] - 1) // 40)
    return float(np.max(besov_norm(u[::stride], s, partition_for(spec.grid))))


# ---------------------------------------------------------------------------
# time stepping


def _explicit_rhs(spec: ProblemSpec, u: np.ndarray, grads: list, t: float, f: np.ndarray) -> np.ndarray:
    rhs = (spec.c + spec.lam * u) * u + spec.source(t) * f
    for bi, ai, gi in zip(spec.b, spec.alpha, grads):
        rhs = rhs + (bi + ai * u) * gi
    return rhs


def _march(spec: ProblemSpec, u: np.ndarray, f: np.ndarray, times: np.ndarray,
           extra_source: Optional[Callable[[float], np.ndarray]] = None, keep: bool = True) -> np.ndarray:
    grid = spec.grid
    dt = times[1] - times[0]
    frames = np.empty((times.size,) + u.shape) if keep else None
    if keep:
        frames[0] = u
    h = min(grid.spacing)
    warned = False
    for n in range(times.size - 1):
        grads = gradient(grid, u)
        rhs = _explicit_rhs(spec, u, grads, times[n], f)
        if extra_source is not None:
            rhs = rhs + extra_source(times[n])
        u = heat_solve(grid, u + dt * rhs, dt)
        if keep:
            frames[n + 1] = u
        peak = np.max(np.abs(u))
        if not np.isfinite(peak) or peak > BLOWUP:
            raise SolverBlowUp(f"|u| reached {peak:.3g} at t={times[n + 1]:.6g} (step {n + 1})")
        if not warned:
            drift = max(np.max(np.abs(bi)) + abs(ai) * peak for bi, ai in zip(spec.b, spec.alpha))
            if dt * drift / h > 1.0:
                warnings.warn(f"CFL number {dt * drift / h:.3g} exceeds 1", RuntimeWarning)
                warned = True
    return frames if keep else u


def integrate(
    spec: ProblemSpec,
    f: np.ndarray,
    dt: float,
    extra_source: Optional[Callable[[float], np.ndarray]] = None,
    u_init: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Run the IMEX scheme on the window; returns all frames, shape ``(nt,) + f.shape``.

    ``f`` may carry leading batch axes; every member shares ``spec``'s
    coefficients and (unless ``u_init`` is given) its initial state.
    """
    f = spec.grid.check(f)
    u = np.broadcast_to(spec.u_init if u_init is None else u_init, f.shape).astype(float)
    return _march(spec, u, f, spec.times(dt), extra_source)


def spin_up(spec: ProblemSpec, u_start: np.ndarray, f: np.ndarray, dt: float) -> np.ndarray:
    """State at ``t0 - delta`` reached from ``u_start`` at ``t = 0``.

    Starting the window from a state produced by the dynamics makes it
    compatible with the Dirichlet condition to all orders, so ``u_t`` and
    its derivatives carry no initial boundary layer.
    """
    start = spec.t0 - spec.delta
    n = int(round(start / dt))
    if n < 1:
        return np.asarray(u_start, dtype=float)
    times = start - dt * np.arange(n, -1, -1)
    return _march(spec, np.asarray(u_start, dtype=float), f, times, keep=False)


def solve(
    spec: ProblemSpec,
    f: Optional[np.ndarray] = None,
    dt: float = 1e-4,
    extra_source: Optional[Callable[[float], np.ndarray]] = None,
) -> SpaceTimeField:
    """Solution on the window; ``f`` defaults to ``spec.f_true``."""
    f = spec.f_true if f is None else f
    return SpaceTimeField(spec.grid, spec.times(dt), integrate(spec, f, dt, extra_source))


# ---------------------------------------------------------------------------
# time derivative


def time_derivative_matrix(nt: int, dt: float) -> sp.csr_matrix:
    """Sparse ``(nt, nt)`` matrix of :func:`time_derivative` acting on the frame axis."""
    if nt < 3:
        raise ValueError("at least three frames are needed")
    rows, cols, vals = [], [], []
    for i in range(1, nt - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5, 0.5]
    rows += [0, 0, 0, nt - 1, nt - 1, nt - 1]
    cols += [0, 1, 2, nt - 3, nt - 2, nt - 1]
    vals += [-1.5, 2.0, -0.5, 0.5, -2.0, 1.5]
    return sp.csr_matrix((np.array(vals) / dt, (rows, cols)), shape=(nt, nt))


def time_derivative(u):
    """``z = d u / dt``: centred differences inside, one-sided second order at the ends."""
    return u.with_frames(time_derivative_frames(u.frames, u.dt))


def time_derivative_frames(frames: np.ndarray, dt: float) -> np.ndarray:
    if frames.shape[0] < 3:
        raise ValueError("at least three frames are needed")
    out = np.empty_like(frames, dtype=float)
    out[1:-1] = (frames[2:] - frames[:-2]) / (2 * dt)
    # Written in differences so constants in time give exactly zero.
    out[0] = (4 * (frames[1] - frames[0]) - (frames[2] - frames[0])) / (2 * dt)
    out[-1] = ((frames[-3] - frames[-1]) - 4 * (frames[-2] - frames[-1])) / (2 * dt)
    return out


# ---------------------------------------------------------------------------
# observations


@dataclass
class ObservationData:
    """Measured data on ``Gamma x I`` and the interior snapshot.

    ``z_trace[k]`` and ``dz_trace[k]`` belong to ``faces[k]`` and have shape
    ``(nt,) + face_shape``.  On a Dirichlet face the trace of ``z`` is zero
    and so are the tangential derivatives, so ``dz_trace`` keeps only the
    derivative along the face's axis.
    """

    times: np.ndarray
    faces: tuple
    z_trace: list
    dz_trace: list
    snapshot: np.ndarray
    noise_level: float
    seed: int
    t0: float
    clean_rms: dict = field(default_factory=dict)

    def perturbation(self, other: "ObservationData") -> dict:
        """Relative L^2 differences of every signal against ``other``."""
        out = {}
        for k, face in enumerate(self.faces):
            for name, a, b in (("z", self.z_trace[k], other.z_trace[k]),
                               ("dz", self.dz_trace[k], other.dz_trace[k])):
                ref = np.linalg.norm(b)
                out[f"{name}:{face}"] = float(np.linalg.norm(a - b) / ref) if ref > 0 else 0.0
        ref = np.linalg.norm(other.snapshot)
        out["snapshot"] = float(np.linalg.norm(self.snapshot - other.snapshot) / ref) if ref > 0 else 0.0
        return out


def _rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(a * a))) if a.size else 0.0


def observe(u: SpaceTimeField, spec: ProblemSpec, noise_level: float = 0.0, seed: int = 0) -> ObservationData:
    """Extract ``(z, grad z)`` on the observed faces and ``u(t0)``; add relative noise.

    Every signal gets i.i.d. Gaussian noise with standard deviation
    ``noise_level * RMS(clean signal)`` from its own child of ``SeedSequence(seed)``.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be nonnegative")
    grid = spec.grid
    n0 = u.index_of(spec.t0)
    z = time_derivative(u).frames
    z_tr = [boundary_trace(grid, z, face) for face in spec.faces]
    dz_tr = [normal_derivative(grid, z, face) for face in spec.faces]
    snap = u.frames[n0].copy()

    signals = z_tr + dz_tr + [snap]
    names = [f"z:{f}" for f in spec.faces] + [f"dz:{f}" for f in spec.faces] + ["snapshot"]
    children = np.random.SeedSequence(seed).spawn(len(signals))
    rms = {}
    noisy = []
    for name, sig, child in zip(names, signals, children):
        rms[name] = _rms(sig)
        if noise_level > 0:
            sig = sig + noise_level * rms[name] * np.random.default_rng(child).standard_normal(sig.shape)
        noisy.append(sig)
    nf = len(spec.faces)
    return ObservationData(
        times=u.times.copy(),
        faces=tuple(spec.faces),
        z_trace=noisy[:nf],
        dz_trace=noisy[nf:2 * nf],
        snapshot=noisy[-1],
        noise_level=float(noise_level),
        seed=int(seed),
        t0=spec.t0,
        clean_rms=rms,
    )


# ---------------------------------------------------------------------------
# differentiated equation


def residual_z_equation(u: SpaceTimeField, z: SpaceTimeField, spec: ProblemSpec,
                        form: str = "paraproduct") -> SpaceTimeField:
    """Residual of the equation satisfied by ``z = u_t``.

    ``form="paraproduct"`` differentiates ``N(u) = T_{2 lam u} u + T_{alpha u}.grad u + R_N(u)``:

        z_t - Lap z - b.grad z - c z - T_{alpha u}.grad z - T_{2 lam u} z
            = (d_t R) f + d_t R_N(u) + T_{alpha z}.grad u + T_{2 lam z} u

    ``form="exact"`` uses pointwise coefficients:

        z_t - Lap z - (b + alpha u).grad z - (c + 2 lam u) z = (d_t R) f + (alpha z).grad u
    """
    grid = spec.grid
    if u.frames.shape != z.frames.shape or not np.allclose(u.times, z.times):
        raise ValueError("u and z must share grids")
    zt = time_derivative_frames(z.frames, z.dt)
    gz = gradient(grid, z.frames)
    res = zt - laplacian(grid, z.frames) - spec.c * z.frames
    for bi, gi in zip(spec.b, gz):
        res = res - bi * gi
    src = np.stack([spec.source.dt(t) * spec.f_true for t in z.times])
    res = res - src
    if spec.is_linear:
        return z.with_frames(res)

    if form == "exact":
        gu = gradient(grid, u.frames)
        res = res - 2 * spec.lam * u.frames * z.frames
        for ak, gzk, guk in zip(spec.alpha, gz, gu):
            res = res - ak * (u.frames * gzk + z.frames * guk)
        return z.with_frames(res)
    if form != "paraproduct":
        raise ValueError(f"unknown form {form!r}")

    part = partition_for(grid)
    # Gradients are even across the walls, so take them on the torus
    # rather than odd-embedding nodal values.
    wu, wz = as_torus(grid, u.frames), as_torus(grid, z.frames)
    para = 2 * spec.lam * (paraproduct(grid, wu, wz, part) + paraproduct(grid, wz, wu, part))
    for ak, gzk, guk in zip(spec.alpha, torus_gradient(grid, wz), torus_gradient(grid, wu)):
        if ak:
            para = para + ak * (paraproduct(grid, wu, gzk, part) + paraproduct(grid, wz, guk, part))
    rn = paralinearize(grid, u.frames, spec.lam, spec.alpha, part).remainder_N
    para = para + time_derivative_frames(rn, u.dt)
    return z.with_frames(res - restrict(grid, para))
