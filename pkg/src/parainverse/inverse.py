"""Source reconstruction from boundary data of ``u_t`` and the snapshot ``u(., t0)``.

Two methods:

* ``direct_slice`` rearranges the equation at ``t = t0`` given the full
  interior ``u_t(., t0)``; it needs data beyond what is observed and serves
  as a discretization check.
* ``tikhonov`` minimizes an output least-squares functional over ``f`` with a
  discrete adjoint gradient and nonlinear conjugate gradients.

All routines accept a leading batch axis on ``f`` (and on stacked data) so
noise ladders and seed ensembles run through a single time loop.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .carleman import CarlemanParams, build_weights
from .forward import (
    ObservationData,
    ProblemSpec,
    integrate,
    observe,
    solve,
    time_derivative,
    time_derivative_frames,
    time_derivative_matrix,
)
from .grid import (
    Grid,
    face_measure,
    gradient,
    gradient_adjoint,
    heat_solve,
    laplacian,
    normal_derivative,
    normal_derivative_adjoint,
    parse_face,
    trapezoid_weights,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ReconstructionConfig",
    "ReconstructionResult",
    "KappaFit",
    "DegenerateRegression",
    "omega0_mask",
    "relative_error",
    "direct_slice",
    "stack_observations",
    "forward_misfit",
    "gradient_f",
    "reconstruct",
    "reconstruct_batch",
    "data_norm",
    "kappa_fit",
]

METHODS = ("direct_slice", "tikhonov")
PRECONDITIONERS = ("hessian", "none")
HESSIAN_MAX_UNKNOWNS = 1024
HESSIAN_CHUNK = 32
J_FLOOR = 1e-8
HESSIAN_FLOOR = 1e-10  # relative to the largest data-Hessian eigenvalue


@dataclass
class ReconstructionConfig:
    method: str = "tikhonov"
    gamma: float = 1e-8
    max_iters: int = 200
    grad_tol: float = 1e-6
    snapshot_weight: float = 1.0
    time_h1_weight: float = 1e-3
    carleman_weighting: Optional[CarlemanParams] = None
    omega0_margin: float = 0.1
    dt: float = 1e-4
    preconditioner: str = "hessian"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.gamma < 0 or self.snapshot_weight < 0 or self.time_h1_weight < 0:
            raise ValueError("gamma and misfit weights must be nonnegative")
        if self.max_iters < 0 or not self.grad_tol >= 0:
            raise ValueError("max_iters and grad_tol must be nonnegative")
        if not 0 <= self.omega0_margin < 1:
            raise ValueError("omega0_margin must lie in [0, 1)")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}")


@dataclass
class ReconstructionResult:
    f_rec: np.ndarray
    misfit_history: list
    data_norm: float
    error_L2_omega0: Optional[float]
    iterations: int
    converged: bool
    error_L2_omega: Optional[float] = None
    grad_norm: Optional[float] = None


# ---------------------------------------------------------------------------
# subdomain and errors


def omega0_mask(grid: Grid, faces: Sequence[str], margin: float = 0.1) -> np.ndarray:
    """Nodes farther than ``margin * L_i`` from every unobserved face."""
    observed = {parse_face(grid, f) for f in faces}
    mask = np.ones(grid.shape, bool)
    for axis, (x, L) in enumerate(zip(grid.mesh(), grid.lengths)):
        if (axis, False) not in observed:
            mask &= x > margin * L
        if (axis, True) not in observed:
            mask &= x < (1 - margin) * L
    return mask


def relative_error(f: np.ndarray, ref: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """``||f - ref|| / ||ref||`` over ``mask`` (nodal sums; batch axes kept).

    A zero reference gives 0 when ``f`` matches it and ``inf`` otherwise.
    """
    mask = np.ones(ref.shape[ref.ndim - (mask.ndim if mask is not None else ref.ndim):], bool) \
        if mask is None else mask
    diff = np.where(mask, f - ref, 0.0)
    refm = np.where(mask, ref, 0.0)
    axes = tuple(range(diff.ndim - mask.ndim, diff.ndim))
    num = np.sqrt(np.sum(diff ** 2, axis=axes))
    den = np.sqrt(np.sum(refm ** 2, axis=tuple(range(refm.ndim - mask.ndim, refm.ndim))))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / den, np.where(num > 0, np.inf, 0.0))


# ---------------------------------------------------------------------------
# direct slice


def direct_slice(u_t0: np.ndarray, z_t0: np.ndarray, spec: ProblemSpec) -> np.ndarray:
    """``f = (z - Lap u - b.grad u - c u - lam u^2 - alpha.(u grad u)) / R(., t0)``.

    Derivatives are the spectral ones the solver uses, so the only error left
    is the time discretisation of ``u`` and ``z``.
    """
    grid = spec.grid
    u, z = grid.check(u_t0), grid.check(z_t0)
    r0 = spec.source(spec.t0)
    bad = np.abs(r0) < spec.r_floor * (1 - 1e-12)
    if np.any(bad):
        node = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"|R(x, t0)| below the floor at node {node}: {r0[node]}")
    rhs = z - laplacian(grid, u) - spec.c * u - spec.lam * u * u
    for bi, ai, gi in zip(spec.b, spec.alpha, gradient(grid, u)):
        rhs = rhs - (bi + ai * u) * gi
    return rhs / r0


# ---------------------------------------------------------------------------
# data handling


def stack_observations(items: Sequence[ObservationData]) -> ObservationData:
    """Stack data sets along a batch axis (after time for traces, first for snapshots)."""
    first = items[0]
    return ObservationData(
        times=first.times,
        faces=first.faces,
        z_trace=[np.stack([o.z_trace[k] for o in items], axis=1) for k in range(len(first.faces))],
        dz_trace=[np.stack([o.dz_trace[k] for o in items], axis=1) for k in range(len(first.faces))],
        snapshot=np.stack([o.snapshot for o in items]),
        noise_level=first.noise_level,
        seed=first.seed,
        t0=first.t0,
    )


def _h1_time(g: np.ndarray, times: np.ndarray, dt: float) -> np.ndarray:
    wq = trapezoid_weights(times).reshape((-1,) + (1,) * (g.ndim - 1))
    dg = time_derivative_frames(g, dt)
    return np.sum(wq * (g ** 2 + dg ** 2), axis=0)


def data_norm(data: ObservationData, grid: Grid, reference: Optional[ObservationData] = None) -> np.ndarray:
    """``||(u_t, d_nu u_t)||_{H^1(Gamma x I)} + ||u(t0)||_{H^2(Omega)}``.

    With ``reference`` the norm of the difference is returned.  The trace
    norm is L^2 plus the discrete time derivative (plus the tangential
    derivative in 2D); the snapshot norm is ``||(I - Lap) u||_{L^2}`` in the
    sine basis.
    """
    dt = data.times[1] - data.times[0]
    trace_sq = 0.0
    for k, face in enumerate(data.faces):
        for name in ("z_trace", "dz_trace"):
            g = getattr(data, name)[k]
            if reference is not None:
                g = g - getattr(reference, name)[k]
            axis, _ = parse_face(grid, face)
            mu = face_measure(grid, face)
            dens = _h1_time(g, data.times, dt)
            if grid.dim == 2:
                other = 1 - axis
                wq = trapezoid_weights(data.times).reshape((-1,) + (1,) * (g.ndim - 1))
                dens = dens + np.sum(wq * np.gradient(g, grid.spacing[other], axis=-1) ** 2, axis=0)
                dens = np.sum(dens, axis=-1)
            trace_sq = trace_sq + mu * dens
    snap = data.snapshot if reference is None else data.snapshot - reference.snapshot
    w = snap - laplacian(grid, snap)
    snap_norm = np.sqrt(np.sum(w ** 2, axis=grid.axes) * grid.cell_volume)
    return np.sqrt(trace_sq) + snap_norm


# ---------------------------------------------------------------------------
# misfit and adjoint gradient


class _Objective:
    """Discrete output least-squares functional and its exact adjoint.

    Data are held with one flattened batch axis; ``members`` selects which
    batch entries a call evaluates, so converged members drop out of the
    time loop.  ``gamma`` may differ per member.
    """

    def __init__(self, spec: ProblemSpec, data: ObservationData, cfg: ReconstructionConfig, gamma=None):
        self.spec, self.cfg = spec, cfg
        self.grid = grid = spec.grid
        self.times = spec.times(cfg.dt)
        if self.times.size != data.times.size or not np.allclose(self.times, data.times):
            raise ValueError("data time grid does not match the solver")
        if tuple(data.faces) != tuple(spec.faces):
            raise ValueError("data faces do not match the problem")
        self.batched = data.snapshot.ndim > grid.dim
        nt = self.times.size
        snap = grid.check(data.snapshot)
        self.snapshot = snap.reshape((-1,) + grid.shape)
        self.nb = self.snapshot.shape[0]
        fdim = grid.dim - 1
        self.dz = [np.reshape(a, (nt, self.nb) + a.shape[a.ndim - fdim:] if fdim else (nt, self.nb))
                   for a in data.dz_trace]
        self.z = [np.reshape(a, (nt, self.nb) + a.shape[a.ndim - fdim:] if fdim else (nt, self.nb))
                  for a in data.z_trace]
        self.gamma = np.broadcast_to(cfg.gamma if gamma is None else np.asarray(gamma, float), (self.nb,))
        self.dt = cfg.dt
        self.D = time_derivative_matrix(nt, self.dt)
        self.wq = trapezoid_weights(self.times)
        self.n0 = int(round((spec.t0 - self.times[0]) / self.dt))
        self.face_w = [None for _ in spec.faces]
        self.snap_w = 1.0
        if cfg.carleman_weighting is not None:
            wp = build_weights(cfg.carleman_weighting, grid, self.times)
            # Normalising by the peak keeps the weight in range; it rescales J only.
            logw = wp.log_w - np.max(wp.log_w)
            for k, face in enumerate(spec.faces):
                axis, high = parse_face(grid, face)
                idx = grid.points[axis] - 1 if high else 0
                self.face_w[k] = np.exp(np.take(logw, idx, axis=1 + axis))[:, None]
            self.snap_w = np.exp(logw[self.n0])

    def _dt_apply(self, g: np.ndarray, transpose: bool = False) -> np.ndarray:
        M = self.D.T if transpose else self.D
        return np.asarray(M @ g.reshape(g.shape[0], -1)).reshape(g.shape)

    def _wq(self, g: np.ndarray) -> np.ndarray:
        return self.wq.reshape((-1,) + (1,) * (g.ndim - 1))

    def _misfit(self, U: np.ndarray, f: np.ndarray, members: np.ndarray, need_sources: bool):
        grid, cfg = self.grid, self.cfg
        fd = grid.dim - 1
        sum_face = lambda a: np.sum(a, axis=(0,) + tuple(range(2, 2 + fd)))  # noqa: E731
        J = self.gamma[members] * np.sum(f * f, axis=grid.axes) * grid.cell_volume
        src = np.zeros_like(U) if need_sources else None
        tau = cfg.time_h1_weight
        for k, face in enumerate(self.spec.faces):
            mu = face_measure(grid, face)
            cw = 1.0 if self.face_w[k] is None else self.face_w[k]
            nd = normal_derivative(grid, U, face)
            r = self._dt_apply(nd) - self.dz[k][:, members]
            r0 = -self.z[k][:, members]
            for res in (r, r0):
                dr = self._dt_apply(res)
                J = J + mu * sum_face(self._wq(res) * cw * (res * res + tau * dr * dr))
            if need_sources:
                wr = self._wq(r) * cw
                g_r = 2 * mu * (wr * r + tau * self._dt_apply(wr * self._dt_apply(r), transpose=True))
                src += normal_derivative_adjoint(grid, self._dt_apply(g_r, transpose=True), face)
        if cfg.snapshot_weight > 0:
            diff = U[self.n0] - self.snapshot[members]
            wsum = cfg.snapshot_weight * grid.cell_volume
            J = J + wsum * np.sum(self.snap_w * diff * diff, axis=grid.axes)
            if need_sources:
                src[self.n0] += 2 * wsum * self.snap_w * diff
        return J, src

    def _members(self, f, members):
        return np.arange(f.shape[0]) if members is None else np.asarray(members)

    def value(self, f: np.ndarray, members=None) -> np.ndarray:
        members = self._members(f, members)
        U = integrate(self.spec, f, self.dt)
        return self._misfit(U, f, members, need_sources=False)[0]

    def value_and_gradient(self, f: np.ndarray, members=None):
        """``J`` and the L^2 Riesz representer of ``dJ/df`` (discrete adjoint)."""
        spec, grid = self.spec, self.grid
        members = self._members(f, members)
        U = integrate(spec, f, self.dt)
        J, src = self._misfit(U, f, members, need_sources=True)
        dt, times = self.dt, self.times
        nonlinear_adv = any(spec.alpha)
        lam_next = src[-1]
        gf = np.zeros_like(f)
        for n in range(times.size - 2, -1, -1):
            q = heat_solve(grid, lam_next, dt)
            gf += dt * spec.source(times[n]) * q
            u = U[n]
            jt = (spec.c + 2 * spec.lam * u) * q
            grads = gradient(grid, u) if nonlinear_adv else None
            for i, (bi, ai) in enumerate(zip(spec.b, spec.alpha)):
                if ai:
                    jt = jt + ai * grads[i] * q + gradient_adjoint(grid, (bi + ai * u) * q, i)
                else:
                    jt = jt + gradient_adjoint(grid, bi * q, i)
            lam_next = src[n] + q + dt * jt
        grad = gf / grid.cell_volume + 2 * _bcast(grid, self.gamma[members]) * f
        return J, grad


def _as_batch(grid: Grid, f: np.ndarray) -> tuple:
    f = grid.check(f)
    return f.reshape((-1,) + grid.shape), f.shape[: f.ndim - grid.dim]


def forward_misfit(f: np.ndarray, spec: ProblemSpec, data: ObservationData, cfg: ReconstructionConfig):
    """``J(f)``: a float for a single data set, else one value per batch member."""
    obj = _Objective(spec, data, cfg)
    fb, lead = _as_batch(spec.grid, np.broadcast_to(f, (obj.nb,) + spec.grid.shape) if obj.batched else f)
    J = obj.value(fb)
    return J if obj.batched else float(J[0])


def gradient_f(f: np.ndarray, spec: ProblemSpec, data: ObservationData, cfg: ReconstructionConfig) -> np.ndarray:
    """L^2 gradient of :func:`forward_misfit`, exact for the discrete scheme."""
    obj = _Objective(spec, data, cfg)
    fb, lead = _as_batch(spec.grid, np.broadcast_to(f, (obj.nb,) + spec.grid.shape) if obj.batched else f)
    g = obj.value_and_gradient(fb)[1]
    return g if obj.batched else g[0]


# ---------------------------------------------------------------------------
# optimizer


def _inner(grid: Grid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=grid.axes) * grid.cell_volume


def _bcast(grid: Grid, a: np.ndarray) -> np.ndarray:
    return np.reshape(a, np.shape(a) + (1,) * grid.dim)


class _HessianPreconditioner:
    """``(H_data + 2 gamma I)^{-1}`` with ``H_data`` the data Hessian of the linear part.

    With zero initial state, zero data and zero ``gamma`` the gradient of the
    linearised misfit at ``e_j`` is exactly the column ``H_data e_j``; the
    columns are computed in batched chunks.  For the linear problem the preconditioned
    direction is the Newton step.
    """

    def __init__(self, obj: _Objective):
        grid = obj.grid
        n = int(np.prod(grid.shape))
        spec = obj.spec.linearized().scaled(0.0)
        cfg = ReconstructionConfig(**{**obj.cfg.__dict__, "gamma": 0.0})
        cols = []
        basis = np.eye(n).reshape((n,) + grid.shape)
        for start in range(0, n, HESSIAN_CHUNK):
            chunk = basis[start:start + HESSIAN_CHUNK]
            zobj = _zero_data_objective(obj, spec, cfg, chunk.shape[0])
            g = zobj.value_and_gradient(chunk)[1]
            cols.append(g.reshape(chunk.shape[0], n))
        H = np.concatenate(cols).T
        H = 0.5 * (H + H.T)
        self.evals, self.evecs = np.linalg.eigh(H)
        self.evals = np.maximum(self.evals, HESSIAN_FLOOR * self.evals[-1])
        self.gamma = obj.gamma
        self.shape = grid.shape

    def __call__(self, g: np.ndarray, members: np.ndarray) -> np.ndarray:
        flat = g.reshape(g.shape[0], -1)
        coef = flat @ self.evecs
        denom = self.evals[None, :] + 2 * self.gamma[members][:, None]
        denom = np.where(denom > 0, denom, np.inf)
        return ((coef / denom) @ self.evecs.T).reshape(g.shape)


def _zero_data_objective(obj: _Objective, spec: ProblemSpec, cfg: ReconstructionConfig, nb: int) -> _Objective:
    grid = obj.grid
    nt = obj.times.size
    faces = spec.faces
    fshape = lambda k: obj.dz[k].shape[2:]  # noqa: E731
    data = ObservationData(
        times=obj.times, faces=faces,
        z_trace=[np.zeros((nt, nb) + fshape(k)) for k in range(len(faces))],
        dz_trace=[np.zeros((nt, nb) + fshape(k)) for k in range(len(faces))],
        snapshot=np.zeros((nb,) + grid.shape), noise_level=0.0, seed=0, t0=spec.t0,
    )
    return _Objective(spec, data, cfg, 0.0)


def _identity(g: np.ndarray, members: np.ndarray) -> np.ndarray:
    return g


def _ncg(obj: _Objective, f0: np.ndarray, cfg: ReconstructionConfig):
    """Preconditioned Polak-Ribiere+ conjugate gradients with Armijo backtracking, batched.

    The trial step comes from a quadratic fit through ``J(0)``, the slope
    and one probe value, so a quadratic objective is minimised exactly along
    each direction.  Members leave the loop once converged or stuck.
    """
    grid = obj.grid
    f = f0.copy()
    nb = f.shape[0]
    J, g = obj.value_and_gradient(f)
    use_h = cfg.preconditioner == "hessian" and int(np.prod(grid.shape)) <= HESSIAN_MAX_UNKNOWNS
    if cfg.preconditioner == "hessian" and not use_h:
        logger.warning("grid too large for the Hessian preconditioner; running unpreconditioned")
    P = _HessianPreconditioner(obj) if use_h and cfg.max_iters > 0 else _identity
    everyone = np.arange(nb)
    pg = P(g, everyone)
    # Stopping uses the P-norm of the gradient (the Newton decrement when
    # P is the inverse Hessian), relative to its starting value.
    gnorm = lambda a, pa: np.sqrt(np.maximum(_inner(grid, a, pa), 0.0))  # noqa: E731
    gnorm0 = gnorm(g, pg)
    floor = cfg.grad_tol * np.maximum(gnorm0, 1e-300)
    d = -pg
    newton = P is not _identity
    step = np.ones(nb) if newton else 1.0 / np.maximum(np.sqrt(_inner(grid, g, g)), 1e-300)
    history = [J.copy()]
    active = gnorm0 > floor
    stalled = np.zeros(nb, bool)
    iters = np.zeros(nb, int)
    for _ in range(cfg.max_iters):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        slope = _inner(grid, g[idx], d[idx])
        reset = slope >= 0
        if np.any(reset):
            d[idx[reset]] = -pg[idx[reset]]
            slope = _inner(grid, g[idx], d[idx])
        probe = np.ones(idx.size) if newton else step[idx]
        J_probe = obj.value(f[idx] + _bcast(grid, probe) * d[idx], idx)
        curv = (J_probe - J[idx] - slope * probe) / probe ** 2
        a = np.where(curv > 0, -slope / (2 * np.where(curv > 0, curv, 1.0)), 2 * probe)
        accepted = np.zeros(idx.size, bool)
        f_new, J_new, g_new = f[idx].copy(), J[idx].copy(), g[idx].copy()
        # J carries a rounding floor from the time loop; decreases below it
        # cannot be resolved, so such members are treated as converged.
        resolvable = np.abs(slope) > J_FLOOR * np.maximum(np.abs(J[idx]), 1e-300)
        todo = np.flatnonzero(resolvable)
        for _ in range(30):
            if todo.size == 0:
                break
            trial = f[idx[todo]] + _bcast(grid, a[todo]) * d[idx[todo]]
            Jt = obj.value(trial, idx[todo])
            ok = Jt <= J[idx[todo]] + 1e-4 * a[todo] * slope[todo]
            sel = todo[ok]
            f_new[sel], J_new[sel] = trial[ok], Jt[ok]
            accepted[sel] = True
            todo = todo[~ok]
            a[todo] *= 0.5
            todo = todo[a[todo] * np.abs(slope[todo]) > J_FLOOR * np.abs(J[idx[todo]])]
        if np.any(accepted):
            sel = np.flatnonzero(accepted)
            _, g_new[sel] = obj.value_and_gradient(f_new[sel], idx[sel])
        g_old, pg_old = g[idx], pg[idx]
        pg_new = P(g_new, idx)
        beta = _inner(grid, pg_new, g_new - g_old) / np.maximum(_inner(grid, g_old, pg_old), 1e-300)
        beta = np.maximum(beta, 0.0)
        d[idx] = np.where(_bcast(grid, accepted), -pg_new + _bcast(grid, beta) * d[idx], d[idx])
        f[idx], J[idx], g[idx], pg[idx] = f_new, J_new, g_new, pg_new
        step[idx] = np.where(accepted, a, step[idx])
        iters[idx] += accepted
        history.append(J.copy())
        stalled[idx] = ~accepted & ~resolvable
        active[idx] = accepted & (gnorm(g_new, pg_new) > floor[idx])
    gn = gnorm(g, pg)
    return f, np.array(history), iters, (gn <= floor) | stalled, gn


def reconstruct_batch(spec: ProblemSpec, data: ObservationData, cfg: ReconstructionConfig,
                      f0: Optional[np.ndarray] = None, f_true: Optional[np.ndarray] = None,
                      gamma=None) -> list:
    """Tikhonov reconstruction of every member of (possibly stacked) data.

    ``gamma`` overrides ``cfg.gamma`` and may hold one value per member.
    """
    grid = spec.grid
    if cfg.method != "tikhonov":
        raise ValueError("batched reconstruction runs the tikhonov method only")
    obj = _Objective(spec, data, cfg, gamma)
    mask = omega0_mask(grid, spec.faces, cfg.omega0_margin)
    norms = np.broadcast_to(np.atleast_1d(data_norm(data, grid)).reshape(-1), (obj.nb,))
    f0 = np.zeros((obj.nb,) + grid.shape) if f0 is None else np.broadcast_to(f0, (obj.nb,) + grid.shape).copy()
    f_rec, hist, iters, conv, gn = _ncg(obj, f0, cfg)
    if not np.all(conv):
        logger.warning("%d of %d reconstructions stopped above grad_tol (max_iters or failed line search)",
                       int(np.sum(~conv)), obj.nb)
    everywhere = np.ones(grid.shape, bool)
    out = []
    for i in range(obj.nb):
        err0 = err = None
        if f_true is not None:
            ref = np.broadcast_to(f_true, (obj.nb,) + grid.shape)[i]
            err0 = float(relative_error(f_rec[i], ref, mask))
            err = float(relative_error(f_rec[i], ref, everywhere))
        # Rows after a member stopped repeat its last value; keep the accepted ones.
        h = [float(v) for v in hist[: iters[i] + 1, i]]
        out.append(ReconstructionResult(f_rec[i], h, float(norms[i]), err0, int(iters[i]), bool(conv[i]),
                                        err, float(gn[i])))
    return out


def reconstruct(spec: ProblemSpec, data: ObservationData, cfg: ReconstructionConfig,
                f0: Optional[np.ndarray] = None, u=None) -> ReconstructionResult:
    """Run the configured method on one data set; errors are against ``spec.f_true``.

    ``direct_slice`` reads the interior ``u_t(., t0)`` from the solution ``u``
    (a :class:`~parainverse.grid.SpaceTimeField`).
    """
    grid = spec.grid
    if cfg.method == "direct_slice":
        if u is None:
            raise ValueError("direct_slice needs the interior solution u")
        mask = omega0_mask(grid, spec.faces, cfg.omega0_margin)
        f_rec = direct_slice(data.snapshot, time_derivative(u).at(spec.t0), spec)
        return ReconstructionResult(
            f_rec, [], float(data_norm(data, grid)), float(relative_error(f_rec, spec.f_true, mask)), 0, True,
            float(relative_error(f_rec, spec.f_true, np.ones(grid.shape, bool))),
        )
    return reconstruct_batch(spec, data, cfg, f0, spec.f_true)[0]


# ---------------------------------------------------------------------------
# stability exponent


class DegenerateRegression(ValueError):
    """The noise ladder has no spread to regress on."""


@dataclass
class KappaFit:
    kappa: float
    intercept: float
    r2: float
    ci: tuple
    rows: list = field(default_factory=list)
    residuals: list = field(default_factory=list)


def _regress(x: np.ndarray, y: np.ndarray) -> tuple:
    if x.size < 2 or np.ptp(x) == 0 or not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise DegenerateRegression("noise ladder has no spread (or non-finite values)")
    res = stats.linregress(x, y)
    dof = x.size - 2
    tq = stats.t.ppf(0.975, dof) if dof > 0 else np.inf
    ci = (float(res.slope - tq * res.stderr), float(res.slope + tq * res.stderr))
    resid = y - (res.intercept + res.slope * x)
    return float(res.slope), float(res.intercept), float(res.rvalue ** 2), ci, resid


def kappa_fit(spec: ProblemSpec, cfg: ReconstructionConfig, noise_levels: Sequence[float], seeds: Sequence[int],
              gamma_rule: str = "proportional", gamma_scale: float = 0.1) -> KappaFit:
    """Fit ``error ~ C * perturbation^kappa`` over a noise ladder.

    For each level the data are perturbed with every seed and reconstructed
    with ``gamma = gamma_scale * level`` (``gamma_rule="proportional"``) or
    ``cfg.gamma`` (``"fixed"``).  The error of a member is measured on
    ``Omega_0`` against the reconstruction from clean data at the same
    ``gamma`` (the truth run), which isolates how data perturbations move
    the estimate.  The abscissa is the median data-perturbation norm.
    """
    levels = np.asarray(noise_levels, dtype=float)
    if levels.size == 0 or np.all(levels == 0):
        raise DegenerateRegression("noise ladder is empty or all zero")
    if np.any(levels <= 0):
        raise DegenerateRegression("noise levels must be positive")
    if gamma_rule not in ("proportional", "fixed"):
        raise ValueError("gamma_rule must be 'proportional' or 'fixed'")
    span = np.log10(levels.max() / levels.min())
    if np.unique(levels).size < 4 or span < 1.5 or len(seeds) < 10:
        logger.warning("weak kappa design: %d levels over %.2f decades with %d seeds "
                       "(want >= 4 levels, >= 1.5 decades, >= 10 seeds)", np.unique(levels).size, span, len(seeds))
    grid = spec.grid
    u = solve(spec, dt=cfg.dt)
    clean = observe(u, spec, 0.0, 0)
    mask = omega0_mask(grid, spec.faces, cfg.omega0_margin)

    noisy, clean_list = [], []
    for lev in levels:
        for sd in seeds:
            noisy.append(observe(u, spec, float(lev), int(sd)))
        clean_list.append(clean)
    stacked = stack_observations(noisy + clean_list)
    gam = levels * gamma_scale if gamma_rule == "proportional" else np.full(levels.shape, cfg.gamma)
    nseed = len(seeds)
    gammas = np.concatenate([np.repeat(gam, nseed), gam])

    results = reconstruct_batch(spec, stacked, cfg, gamma=gammas)
    f_rec = np.stack([r.f_rec for r in results])
    noisy_rec = f_rec[: levels.size * nseed].reshape(levels.size, nseed, *grid.shape)
    truth_rec = f_rec[levels.size * nseed:]
    pert = np.atleast_1d(data_norm(stack_observations(noisy), grid, stack_observations(
        [clean] * len(noisy)))).reshape(levels.size, nseed)

    rows = []
    for i, lev in enumerate(levels):
        err = relative_error(noisy_rec[i], truth_rec[i], mask)
        err_true = relative_error(noisy_rec[i], spec.f_true, mask)
        q1, med, q3 = np.percentile(err, [25, 50, 75])
        rows.append({
            "noise": float(lev), "gamma": float(gam[i]), "data_norm": float(np.median(pert[i])),
            "median_error": float(med), "q1_error": float(q1), "q3_error": float(q3),
            "median_error_vs_truth": float(np.median(err_true)),
        })
    x = np.log([r["data_norm"] for r in rows])
    y = np.log([r["median_error"] for r in rows])
    k, b, r2, ci, resid = _regress(x, y)
    logger.info("kappa_hat=%.4f R2=%.4f CI=(%.3f, %.3f)", k, r2, *ci)
    return KappaFit(k, b, r2, ci, rows, [float(v) for v in resid])
