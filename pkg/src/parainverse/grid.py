"""Discrete box domain, Dirichlet fields and their spectral calculus.

Fields live on the interior nodes ``x_j = j*h`` (``j = 1..N``) of the box
``(0, L_1) x ... x (0, L_n)`` with ``h = L/(N+1)``.  A spatial field is a
plain ``ndarray`` whose trailing axes equal ``grid.shape``; any leading axes
are treated as a batch.  For FFT based analysis a Dirichlet field is extended
oddly to the torus of doubled length (``M = 2(N+1)`` points per axis), where
the boundary planes sit on torus nodes and carry zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Grid",
    "SpaceTimeField",
    "embed",
    "even_embed",
    "restrict",
    "restrict_adjoint",
    "embed_adjoint",
    "torus_gradient",
    "laplacian",
    "gradient",
    "gradient_adjoint",
    "heat_solve",
    "fd_laplacian",
    "fd_gradient",
    "parse_face",
    "boundary_trace",
    "normal_derivative",
    "normal_derivative_adjoint",
    "l2_norm",
    "l2_inner",
    "trapezoid_weights",
]


@dataclass(frozen=True)
class Grid:
    """Uniform interior grid of a box in dimension 1 or 2.

    Parameters
    ----------
    lengths : tuple of float
        Side lengths ``L_i`` of the box.
    points : tuple of int
        Interior node counts ``N_i`` per axis.  ``N_i + 1`` must be a power of
        two so the doubled torus has ``2(N_i + 1)`` points, a fast FFT length.
    """

    lengths: tuple
    points: tuple

    def __post_init__(self):
        lengths = tuple(float(v) for v in np.atleast_1d(self.lengths))
        points = tuple(int(v) for v in np.atleast_1d(self.points))
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "points", points)
        if len(lengths) != len(points) or len(points) not in (1, 2):
            raise ValueError("grid dimension must be 1 or 2 with one length per axis")
        for L, n in zip(lengths, points):
            if not L > 0:
                raise ValueError(f"box length must be positive, got {L}")
            if n < 31 or (n + 1) & n:
                raise ValueError(f"interior node count N must have N+1 a power of two, N >= 31; got {n}")

    @classmethod
    def uniform(cls, cells: int = 256, length: float = 1.0, dim: int = 1) -> "Grid":
        """Box ``(0, length)^dim`` with ``cells`` intervals per axis (``cells - 1`` interior nodes)."""
        return cls((length,) * dim, (cells - 1,) * dim)

    @property
    def cells(self) -> tuple:
        return tuple(n + 1 for n in self.points)

    @property
    def dim(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple:
        return self.points

    @property
    def spacing(self) -> tuple:
        return tuple(L / (n + 1) for L, n in zip(self.lengths, self.points))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def torus_shape(self) -> tuple:
        return tuple(2 * (n + 1) for n in self.points)

    @property
    def axes(self) -> tuple:
        """Trailing array axes that carry space."""
        return tuple(range(-self.dim, 0))

    def coords(self) -> list:
        return [h * np.arange(1, n + 1) for h, n in zip(self.spacing, self.points)]

    def mesh(self) -> list:
        return np.meshgrid(*self.coords(), indexing="ij")

    def torus_mesh(self) -> list:
        """Node coordinates of the doubled torus, ``y in [0, 2L)``."""
        axes = [h * np.arange(m) for h, m in zip(self.spacing, self.torus_shape)]
        return np.meshgrid(*axes, indexing="ij")

    def wavenumbers(self) -> list:
        """Physical angular wavenumbers ``k*pi/L`` of the torus FFT, per axis, broadcastable."""
        out = []
        for i, (h, m) in enumerate(zip(self.spacing, self.torus_shape)):
            k = 2 * np.pi * np.fft.fftfreq(m, d=h)
            shape = [1] * self.dim
            shape[i] = m
            out.append(k.reshape(shape))
        return out

    def sine_eigenvalues(self) -> np.ndarray:
        """``-sum_i (k_i pi / L_i)^2`` on the DST-I index grid (negative Laplacian spectrum)."""
        lam = 0.0
        for i, (L, n) in enumerate(zip(self.lengths, self.points)):
            k = np.pi * np.arange(1, n + 1) / L
            shape = [1] * self.dim
            shape[i] = n
            lam = lam + (k ** 2).reshape(shape)
        return np.asarray(lam)

    def check(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[u.ndim - self.dim:] != self.shape:
            raise ValueError(f"field shape {u.shape} does not end with grid shape {self.shape}")
        return u

    def describe(self) -> dict:
        return {"dim": self.dim, "lengths": list(self.lengths), "points": list(self.points)}


@dataclass
class SpaceTimeField:
    """Frames of a spatial field on a uniform time grid inside the window."""

    grid: Grid
    times: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.shape[0] != self.times.size:
            raise ValueError("one frame per time is required")
        if self.frames.shape[1:] != self.grid.shape:
            raise ValueError("frames must live on the grid")
        if self.times.size > 1:
            steps = np.diff(self.times)
            if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(abs(steps[0]), 1e-300):
                raise ValueError("times must be strictly increasing with a uniform step")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def nt(self) -> int:
        return self.times.size

    def index_of(self, t: float) -> int:
        n = int(round((t - self.times[0]) / self.dt))
        if not 0 <= n < self.nt or abs(self.times[n] - t) > 1e-8 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the frame grid")
        return n

    def at(self, t: float) -> np.ndarray:
        return self.frames[self.index_of(t)]

    def with_frames(self, frames: np.ndarray) -> "SpaceTimeField":
        return SpaceTimeField(self.grid, self.times.copy(), frames)


# ---------------------------------------------------------------------------
# torus embedding


def _odd_axis(u: np.ndarray, axis: int) -> np.ndarray:
    n = u.shape[axis]
    shape = list(u.shape)
    shape[axis] = 2 * (n + 1)
    w = np.zeros(shape)
    sl = [slice(None)] * u.ndim
    sl[axis] = slice(1, n + 1)
    w[tuple(sl)] = u
    sl[axis] = slice(n + 2, None)
    w[tuple(sl)] = -np.flip(u, axis=axis)
    return w


def _odd_axis_adjoint(w: np.ndarray, axis: int) -> np.ndarray:
    m = w.shape[axis]
    n = m // 2 - 1
    sl = [slice(None)] * w.ndim
    sl[axis] = slice(1, n + 1)
    a = w[tuple(sl)]
    sl[axis] = slice(n + 2, None)
    return a - np.flip(w[tuple(sl)], axis=axis)


def embed(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Odd extension of a Dirichlet field to the doubled torus."""
    w = grid.check(u)
    for ax in grid.axes:
        w = _odd_axis(w, w.ndim + ax)
    return w


def embed_adjoint(grid: Grid, w: np.ndarray) -> np.ndarray:
    """Transpose of :func:`embed` with respect to the Euclidean inner products."""
    for ax in grid.axes:
        w = _odd_axis_adjoint(w, w.ndim + ax)
    return w


def even_embed(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Even extension of a coefficient field (boundary values by quadratic extrapolation).

    Coefficients such as ``b`` or ``c`` need not vanish on the boundary; the even
    reflection keeps them continuous on the torus.  Constants map to constants.
    """
    w = grid.check(u)
    for ax in grid.axes:
        axis = w.ndim + ax
        n = w.shape[axis]
        first = [np.take(w, i, axis=axis) for i in (0, 1, 2)]
        last = [np.take(w, n - 1 - i, axis=axis) for i in (0, 1, 2)]
        lo = 3 * first[0] - 3 * first[1] + first[2]
        hi = 3 * last[0] - 3 * last[1] + last[2]
        w = np.concatenate(
            [np.expand_dims(lo, axis), w, np.expand_dims(hi, axis), np.flip(w, axis=axis)],
            axis=axis,
        )
    return w


def restrict(grid: Grid, w: np.ndarray) -> np.ndarray:
    """Interior nodes of a torus field."""
    w = np.asarray(w)
    sl = [slice(None)] * w.ndim
    for ax, n in zip(grid.axes, grid.points):
        sl[w.ndim + ax] = slice(1, n + 1)
    return w[tuple(sl)]


def restrict_adjoint(grid: Grid, u: np.ndarray) -> np.ndarray:
    lead = u.shape[: u.ndim - grid.dim]
    w = np.zeros(lead + grid.torus_shape)
    sl = [slice(None)] * w.ndim
    for ax, n in zip(grid.axes, grid.points):
        sl[w.ndim + ax] = slice(1, n + 1)
    w[tuple(sl)] = u
    return w


def as_torus(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Accept either a spatial field (odd-embedded) or an existing torus field."""
    u = np.asarray(u, dtype=float)
    tail = u.shape[u.ndim - grid.dim:]
    if tail == grid.torus_shape:
        return u
    if tail == grid.shape:
        return embed(grid, u)
    raise ValueError(f"array of shape {u.shape} is neither a grid nor a torus field")


# ---------------------------------------------------------------------------
# spectral derivatives


def torus_gradient(grid: Grid, w: np.ndarray) -> list:
    """Spectral partial derivatives of a torus field (Nyquist coefficient dropped)."""
    w = np.asarray(w, dtype=float)
    axes = tuple(w.ndim + ax for ax in grid.axes)
    what = np.fft.fftn(w, axes=axes)
    out = []
    for i, k in enumerate(grid.wavenumbers()):
        m = grid.torus_shape[i]
        k = k.copy()
        k.flat[m // 2] = 0.0
        out.append(np.real(np.fft.ifftn(1j * k * what, axes=axes)))
    return out


def _axis_wavenumbers(grid: Grid, axis: int, ndim: int) -> np.ndarray:
    n, L = grid.points[axis], grid.lengths[axis]
    shape = [1] * ndim
    shape[ndim + grid.axes[axis]] = n
    return (np.pi * np.arange(1, n + 1) / L).reshape(shape)


def _cosine_synthesis(grid: Grid, b: np.ndarray, axis: int) -> np.ndarray:
    """``sum_k b_k sqrt(2/(N+1)) cos(pi j k/(N+1))`` at ``j = 1..N`` (a symmetric map)."""
    ax = b.ndim + grid.axes[axis]
    n = grid.points[axis]
    pad = [(0, 0)] * b.ndim
    pad[ax] = (1, 1)
    y = sfft.dct(np.pad(b, pad), type=1, axis=ax)
    return np.take(y, np.arange(1, n + 1), axis=ax) * (0.5 * np.sqrt(2.0 / (n + 1)))


def gradient(grid: Grid, u: np.ndarray) -> list:
    """Spectral gradient of a Dirichlet field on the interior nodes.

    Equal to differentiating the odd extension on the torus; evaluated as a
    sine analysis followed by a cosine synthesis along each axis.
    """
    u = np.asarray(u, dtype=float)
    out = []
    for i in range(grid.dim):
        ax = u.ndim + grid.axes[i]
        a = sfft.dst(u, type=1, axis=ax, norm="ortho")
        out.append(_cosine_synthesis(grid, a * _axis_wavenumbers(grid, i, u.ndim), i))
    return out


def gradient_adjoint(grid: Grid, g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of ``gradient(grid, .)[axis]``."""
    g = np.asarray(g, dtype=float)
    c = _cosine_synthesis(grid, g, axis) * _axis_wavenumbers(grid, axis, g.ndim)
    return sfft.dst(c, type=1, axis=g.ndim + grid.axes[axis], norm="ortho")


def _dst(grid: Grid, u: np.ndarray) -> np.ndarray:
    return sfft.dstn(u, type=1, axes=grid.axes, norm="ortho")


def laplacian(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Dirichlet Laplacian through the sine eigenbasis (exact on sine modes)."""
    u = grid.check(u)
    return _dst(grid, -grid.sine_eigenvalues() * _dst(grid, u))


def heat_solve(grid: Grid, u: np.ndarray, dt: float) -> np.ndarray:
    """Apply ``(I - dt*Laplacian)^{-1}``; symmetric, so it is its own adjoint."""
    return _dst(grid, _dst(grid, u) / (1.0 + dt * grid.sine_eigenvalues()))


def fd_laplacian(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Second-order centred-difference Laplacian with zero Dirichlet ghost values."""
    u = grid.check(u)
    out = np.zeros_like(u)
    for ax, h in zip(grid.axes, grid.spacing):
        axis = u.ndim + ax
        pad = [(0, 0)] * u.ndim
        pad[axis] = (1, 1)
        p = np.pad(u, pad)
        n = u.shape[axis]
        out += (np.take(p, range(2, n + 2), axis=axis) - 2 * u + np.take(p, range(0, n), axis=axis)) / h**2
    return out


def fd_gradient(grid: Grid, u: np.ndarray) -> list:
    """Second-order centred-difference gradient with zero Dirichlet ghost values."""
    u = grid.check(u)
    out = []
    for ax, h in zip(grid.axes, grid.spacing):
        axis = u.ndim + ax
        pad = [(0, 0)] * u.ndim
        pad[axis] = (1, 1)
        p = np.pad(u, pad)
        n = u.shape[axis]
        out.append((np.take(p, range(2, n + 2), axis=axis) - np.take(p, range(0, n), axis=axis)) / (2 * h))
    return out


# ---------------------------------------------------------------------------
# boundary faces


def parse_face(grid: Grid, face: str) -> tuple:
    """Face ids are ``"x1-"`` (``x_1 = 0``), ``"x1+"`` (``x_1 = L_1``), ``"x2-"``, ..."""
    try:
        if face[0] != "x" or face[-1] not in "+-":
            raise ValueError
        axis = int(face[1:-1]) - 1
    except (ValueError, IndexError):
        raise ValueError(f"invalid face id {face!r}") from None
    if not 0 <= axis < grid.dim:
        raise ValueError(f"face {face!r} does not exist on a {grid.dim}D grid")
    return axis, face[-1] == "+"


def boundary_trace(grid: Grid, u: np.ndarray, face: str) -> np.ndarray:
    """Dirichlet trace on a face; identically zero for fields on this grid."""
    axis, _ = parse_face(grid, face)
    u = grid.check(u)
    return np.zeros_like(np.take(u, 0, axis=u.ndim - grid.dim + axis))


def normal_derivative(grid: Grid, u: np.ndarray, face: str) -> np.ndarray:
    """``d u / d x_i`` on the face normal to axis ``i`` (one-sided, second order).

    The derivative is taken along the positive coordinate direction on both
    faces of an axis; the boundary value itself is the Dirichlet zero.
    """
    axis, high = parse_face(grid, face)
    u = grid.check(u)
    axis = u.ndim - grid.dim + axis
    h = grid.spacing[axis - u.ndim + grid.dim]
    n = u.shape[axis]
    if high:
        return (-4 * np.take(u, n - 1, axis=axis) + np.take(u, n - 2, axis=axis)) / (2 * h)
    return (4 * np.take(u, 0, axis=axis) - np.take(u, 1, axis=axis)) / (2 * h)


def normal_derivative_adjoint(grid: Grid, g: np.ndarray, face: str) -> np.ndarray:
    """Transpose of :func:`normal_derivative`: face values back onto grid nodes."""
    axis, high = parse_face(grid, face)
    g = np.asarray(g, dtype=float)
    lead = g.shape[: g.ndim - (grid.dim - 1)]
    out = np.zeros(lead + grid.shape)
    axis_full = len(lead) + axis
    h = grid.spacing[axis]
    n = grid.points[axis]
    idx = [slice(None)] * out.ndim
    if high:
        pairs = ((n - 1, -4.0), (n - 2, 1.0))
    else:
        pairs = ((0, 4.0), (1, -1.0))
    for j, wgt in pairs:
        idx[axis_full] = j
        out[tuple(idx)] += wgt * g / (2 * h)
    return out


def face_measure(grid: Grid, face: str) -> float:
    """Quadrature weight of one face node (1 in 1D)."""
    axis, _ = parse_face(grid, face)
    return float(np.prod([h for i, h in enumerate(grid.spacing) if i != axis]))


# ---------------------------------------------------------------------------
# quadrature


def l2_inner(grid: Grid, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Nodal L^2(Omega) inner product over the trailing grid axes."""
    return np.sum(u * v, axis=grid.axes) * grid.cell_volume


def l2_norm(grid: Grid, u: np.ndarray) -> np.ndarray:
    return np.sqrt(l2_inner(grid, u, u))


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    """Trapezoid quadrature weights on a (uniform or not) time grid."""
    times = np.asarray(times, dtype=float)
    if times.size == 1:
        return np.ones(1)
    w = np.zeros_like(times)
    dt = np.diff(times)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w
