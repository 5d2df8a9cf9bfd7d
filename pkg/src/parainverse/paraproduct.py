"""Bony decomposition, commutators and the paralinearization of ``N(u, grad u)``.

All products are formed on the torus with the 2/3 rule: both factors are
projected onto ``|k_i| <= M_i/3`` and so is the pointwise product.  Because the
projection is linear and commutes with the dyadic multipliers, the three Bony
pieces add up to the dealiased product to round-off.

Inputs may be grid fields (odd-embedded on the fly) or torus fields; outputs
are torus fields.  Use :func:`parainverse.grid.restrict` for nodal values.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dyadic import BlockSet, DyadicPartition, besov_norm, decompose
from .grid import Grid, as_torus, l2_norm, restrict, torus_gradient, trapezoid_weights

__all__ = [
    "BonySplit",
    "Paralinearization",
    "partition_for",
    "dealias",
    "product",
    "paraproduct",
    "bony_remainder",
    "bony_split",
    "commutator",
    "commutator_sum",
    "paralinearize",
    "remainder_scaling_report",
    "sup_norm",
    "band_limited_fields",
    "MeasuredConstants",
    "measure_constants",
    "gradient_besov_norm",
]


@lru_cache(maxsize=32)
def partition_for(grid: Grid, profile: str = "raised_cosine") -> DyadicPartition:
    return DyadicPartition(grid, profile)


@lru_cache(maxsize=32)
def _dealias_mask(grid: Grid) -> np.ndarray:
    masks = []
    for i, m in enumerate(grid.torus_shape):
        k = np.fft.rfftfreq(m) * m if i == grid.dim - 1 else np.fft.fftfreq(m) * m
        shape = [1] * grid.dim
        shape[i] = k.size
        masks.append((np.abs(k) <= m // 3).reshape(shape))
    out = masks[0]
    for mk in masks[1:]:
        out = out & mk
    return out


def dealias(grid: Grid, w: np.ndarray) -> np.ndarray:
    """Zero the top third of the torus spectrum."""
    what = np.fft.rfftn(w, axes=grid.axes)
    return np.fft.irfftn(what * _dealias_mask(grid), s=grid.torus_shape, axes=grid.axes)


def product(grid: Grid, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dealiased product ``D(Du * Dv)`` of two fields, returned on the torus."""
    return dealias(grid, dealias(grid, as_torus(grid, u)) * dealias(grid, as_torus(grid, v)))


def sup_norm(grid: Grid, u: np.ndarray) -> np.ndarray:
    """``max |u|`` over the interior nodes."""
    inner = restrict(grid, as_torus(grid, u))
    return np.max(np.abs(inner).reshape(inner.shape[: inner.ndim - grid.dim] + (-1,)), axis=-1)


def _blocks(grid: Grid, u: np.ndarray, partition: DyadicPartition | None) -> BlockSet:
    partition = partition or partition_for(grid)
    # Pre-projecting keeps every block-by-block product alias free.
    return decompose(dealias(grid, as_torus(grid, u)), partition)


def paraproduct(grid: Grid, u: np.ndarray, v: np.ndarray, partition: DyadicPartition | None = None) -> np.ndarray:
    """``T_u v = sum_q S_{q-1}u Delta_q v`` (low frequencies of ``u`` times high of ``v``)."""
    bu, bv = _blocks(grid, u, partition), _blocks(grid, v, partition)
    qm = bu.partition.q_max
    # S_{q-1}u is the running sum of blocks -1..q-2; pair it with Delta_q v for q >= 1.
    low = np.cumsum(bu.torus_blocks[:qm], axis=0)
    return dealias(grid, np.sum(low * bv.torus_blocks[2:qm + 2], axis=0))


def bony_remainder(grid: Grid, u: np.ndarray, v: np.ndarray, partition: DyadicPartition | None = None) -> np.ndarray:
    """``R(u, v) = sum_{|q-q'|<=1} Delta_q u Delta_{q'} v``."""
    bu, bv = _blocks(grid, u, partition), _blocks(grid, v, partition)
    tb = bv.torus_blocks
    near = tb.copy()
    near[1:] += tb[:-1]
    near[:-1] += tb[1:]
    return dealias(grid, np.sum(bu.torus_blocks * near, axis=0))


@dataclass
class BonySplit:
    """``uv = T_u v + T_v u + R(u, v)`` with all pieces on the torus."""

    Tu_v: np.ndarray
    Tv_u: np.ndarray
    remainder: np.ndarray

    def total(self) -> np.ndarray:
        return self.Tu_v + self.Tv_u + self.remainder


def bony_split(grid: Grid, u: np.ndarray, v: np.ndarray, partition: DyadicPartition | None = None) -> BonySplit:
    return BonySplit(
        paraproduct(grid, u, v, partition),
        paraproduct(grid, v, u, partition),
        bony_remainder(grid, u, v, partition),
    )


def _as_vector(grid: Grid, a) -> list:
    if isinstance(a, (list, tuple)):
        return [as_torus(grid, ai) for ai in a]
    a = as_torus(grid, a)
    if grid.dim == 1:
        return [a]
    if a.ndim >= grid.dim + 1 and a.shape[0] == grid.dim:
        return [ai for ai in a]
    raise ValueError("vector coefficient needs one component per axis")


def commutator(grid: Grid, a, u: np.ndarray, q: int, partition: DyadicPartition | None = None) -> np.ndarray:
    """``[Delta_q, a] . grad u = Delta_q(a . grad u) - a . Delta_q grad u`` on the torus.

    ``a`` is a vector coefficient (one torus or grid field per axis; a single
    field is accepted in 1D).  Products are dealiased, so a torus-constant
    ``a`` commutes to round-off.
    """
    partition = partition or partition_for(grid)
    partition.index(q)
    mult = partition.multiplier(q)
    comps = _as_vector(grid, a)
    grads = torus_gradient(grid, as_torus(grid, u))
    out = 0.0
    for ai, gi in zip(comps, grads):
        gi_q = np.fft.irfftn(mult * np.fft.rfftn(gi, axes=grid.axes), s=grid.torus_shape, axes=grid.axes)
        prod_q = np.fft.irfftn(
            mult * np.fft.rfftn(product(grid, ai, gi), axes=grid.axes), s=grid.torus_shape, axes=grid.axes
        )
        out = out + prod_q - product(grid, ai, gi_q)
    return out


def commutator_sum(grid: Grid, a, u: np.ndarray, s: float, partition: DyadicPartition | None = None) -> float:
    """``sum_q 2^{qs} ||[Delta_q, a] . grad u||_{L^2(Omega)}``."""
    partition = partition or partition_for(grid)
    total = 0.0
    for q in partition.q_values:
        c = commutator(grid, a, u, int(q), partition)
        total = total + 2.0 ** (s * q) * l2_norm(grid, restrict(grid, c))
    return total


def gradient_besov_norm(grid: Grid, a, s: float, partition: DyadicPartition | None = None) -> float:
    """``sum_{i,j} ||d_j a_i||_{B^s}`` for a vector coefficient."""
    partition = partition or partition_for(grid)
    total = 0.0
    for ai in _as_vector(grid, a):
        for gj in torus_gradient(grid, ai):
            total = total + besov_norm(gj, s, partition)
    return total


@dataclass
class Paralinearization:
    """Pieces of ``N(u) = T_{a(u)} u + T_{d(u)} . grad u + R(u)``.

    ``a_of_u = 2*lam*u`` and ``d_of_u = alpha*u`` are grid fields;
    ``para_reaction``, ``para_convection``, ``remainder_N`` and ``nonlinearity``
    are torus fields.  ``b_shift = alpha*u`` and ``c_shift = lam*u`` are the
    exact multiplication coefficients: with them the equation reads
    ``u_t - Lap u - (b + b_shift).grad u - (c + c_shift) u = R f`` with no
    remainder.
    """

    a_of_u: np.ndarray
    d_of_u: np.ndarray
    para_reaction: np.ndarray
    para_convection: np.ndarray
    remainder_reaction: np.ndarray
    remainder_convection: np.ndarray
    nonlinearity: np.ndarray
    b_shift: np.ndarray
    c_shift: np.ndarray

    @property
    def remainder_N(self) -> np.ndarray:
        return self.remainder_reaction + self.remainder_convection

    def assembled(self) -> np.ndarray:
        return self.para_reaction + self.para_convection + self.remainder_N


def paralinearize(grid: Grid, u: np.ndarray, lam: float, alpha, partition: DyadicPartition | None = None) -> Paralinearization:
    """Bony paralinearization of ``lam*u^2 + alpha.(u grad u)``.

    ``u`` is a grid field (or a batch of them).  The remainder collects
    ``lam*R(u,u)`` and ``sum_k alpha_k (T_{d_k u} u + R(u, d_k u))``.
    """
    partition = partition or partition_for(grid)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if alpha.size != grid.dim:
        raise ValueError("alpha needs one entry per axis")
    u = grid.check(u)
    w = as_torus(grid, u)
    grads = torus_gradient(grid, w)

    Tuu = paraproduct(grid, w, w, partition)
    para_reaction = 2.0 * lam * Tuu
    rem_reaction = lam * bony_remainder(grid, w, w, partition)
    para_conv = 0.0
    rem_conv = 0.0
    nonlin = lam * product(grid, w, w)
    for ak, gk in zip(alpha, grads):
        if ak == 0.0:
            continue
        para_conv = para_conv + ak * paraproduct(grid, w, gk, partition)
        rem_conv = rem_conv + ak * (paraproduct(grid, gk, w, partition) + bony_remainder(grid, w, gk, partition))
        nonlin = nonlin + ak * product(grid, w, gk)
    zeros = np.zeros_like(w)
    return Paralinearization(
        a_of_u=2.0 * lam * u,
        d_of_u=np.stack([ak * u for ak in alpha]),
        para_reaction=para_reaction,
        para_convection=para_conv + zeros,
        remainder_reaction=rem_reaction,
        remainder_convection=rem_conv + zeros,
        nonlinearity=nonlin,
        b_shift=np.stack([ak * u for ak in alpha]),
        c_shift=lam * u,
    )


def remainder_scaling_report(grid: Grid, ensemble, lam: float, alpha, s: float,
                             partition: DyadicPartition | None = None) -> list:
    """Ratios ``||R_i(u)||_{L^1 B^s} / (eps ||u||_{L^1 B^{s+2}})`` per ensemble member.

    ``ensemble`` yields :class:`~parainverse.grid.SpaceTimeField` objects; ``eps``
    is measured as ``sup_t ||u(t)||_{B^s}``.  Zero fields are reported with
    ``skipped=True``.
    """
    partition = partition or partition_for(grid)
    rows = []
    for i, field in enumerate(ensemble):
        frames = field.frames
        wts = trapezoid_weights(field.times)
        eps = float(np.max(besov_norm(frames, s, partition)))
        high = float(np.sum(wts * besov_norm(frames, s + 2, partition)))
        if eps == 0.0 or high == 0.0:
            rows.append({"sample": i, "eps": eps, "skipped": True})
            continue
        pl = paralinearize(grid, frames, lam, alpha, partition)
        r1 = float(np.sum(wts * besov_norm(pl.remainder_reaction, s, partition)))
        r2 = float(np.sum(wts * besov_norm(pl.remainder_convection, s, partition)))
        rows.append({
            "sample": i, "eps": eps, "skipped": False,
            "R1_L1Bs": r1, "R2_L1Bs": r2, "u_L1Bs2": high,
            "ratio_R1": r1 / (eps * high), "ratio_R2": r2 / (eps * high),
        })
    return rows


# ---------------------------------------------------------------------------
# measured inequality constants


def band_limited_fields(grid: Grid, rng: np.random.Generator, size: int, kmax: int = 8) -> np.ndarray:
    """Random sine series with modes ``1..kmax`` per axis and ``1/k`` decay.

    The same ``rng`` draws give the same continuum function on every grid, so
    constants measured on such fields can be compared across resolutions.
    """
    k = np.arange(1, kmax + 1)
    coeff = rng.standard_normal((size,) + (kmax,) * grid.dim)
    X = grid.mesh()
    basis = [np.sin(np.pi * np.multiply.outer(k, x / L)) for x, L in zip(X, grid.lengths)]
    if grid.dim == 1:
        out = np.einsum("sk,kx->sx", coeff / k, basis[0])
    else:
        w = coeff / np.multiply.outer(k, k)
        out = np.einsum("skl,kxy,lxy->sxy", w, basis[0], basis[1])
    return out


@dataclass
class MeasuredConstants:
    """Largest observed ratio for each inequality over a sample of fields."""

    algebra: float
    paraproduct: float
    remainder: float
    commutator: float
    trials: int
    s: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("algebra", "paraproduct", "remainder", "commutator", "trials", "s")}


def measure_constants(grid: Grid, trials: int = 100, s: float | None = None, seed: int = 0,
                      kmax: int = 8, partition: DyadicPartition | None = None) -> MeasuredConstants:
    """Sample the algebra, paraproduct, remainder and commutator ratios.

    * algebra: ``||uv||_{B^s} / (||u||_{B^s} ||v||_{B^s})``
    * paraproduct: ``||T_u v||_{B^s} / (||u||_inf ||v||_{B^s})``
    * remainder: ``||R(u, u)||_{B^s} / ||u||_{B^s}^2``
    * commutator: ``sum_q 2^{qs} ||[Delta_q, a].grad u|| / (||grad a||_{B^{n/2}} ||u||_{B^s})``
    """
    partition = partition or partition_for(grid)
    s = (1.0 if grid.dim == 1 else 1.5) if s is None else s
    rng = np.random.default_rng(seed)
    u = band_limited_fields(grid, rng, trials, kmax)
    v = band_limited_fields(grid, rng, trials, kmax)
    a = band_limited_fields(grid, rng, trials, kmax)
    nu, nv = besov_norm(u, s, partition), besov_norm(v, s, partition)
    alg = besov_norm(product(grid, u, v), s, partition) / (nu * nv)
    para = besov_norm(paraproduct(grid, u, v, partition), s, partition) / (sup_norm(grid, u) * nv)
    rem = besov_norm(bony_remainder(grid, u, u, partition), s, partition) / nu ** 2
    comm = []
    for i in range(trials):
        ai = [a[i]] * grid.dim if grid.dim > 1 else a[i]
        num = commutator_sum(grid, ai, u[i], s, partition)
        comm.append(num / (gradient_besov_norm(grid, ai, grid.dim / 2, partition) * nu[i]))
    return MeasuredConstants(float(alg.max()), float(para.max()), float(rem.max()), float(max(comm)), trials, s)
