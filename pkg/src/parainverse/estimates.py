"""Energy bookkeeping on the window: coefficient smallness, the dyadic energy
ratio and the closed a priori bound, all measured on solver output."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dyadic import besov_norm
from .forward import ProblemSpec
from .grid import SpaceTimeField, trapezoid_weights
from .paraproduct import paralinearize, partition_for, sup_norm

logger = logging.getLogger(__name__)

__all__ = [
    "EnergyReport",
    "ClosedBound",
    "coefficient_smallness",
    "embedding_constant",
    "heat_kernel_check",
    "energy_report",
    "closed_bound_check",
]


def coefficient_smallness(u: SpaceTimeField, spec: ProblemSpec) -> tuple:
    """``(||b_hat - b||_inf, ||c_hat - c||_inf)`` over the window.

    ``b_hat - b = alpha u`` (sup over components) and ``c_hat - c = lam u``.
    """
    umax = float(np.max(np.abs(u.frames))) if u.frames.size else 0.0
    db = max(abs(a) for a in spec.alpha) * umax
    dc = abs(spec.lam) * umax
    return db, dc


def embedding_constant(u: SpaceTimeField, s: float) -> float:
    """Largest ``||u(t)||_inf / ||u(t)||_{B^s}`` over the frames (0 for zero fields)."""
    part = partition_for(u.grid)
    bs = besov_norm(u.frames, s, part)
    sup = sup_norm(u.grid, u.frames)
    ok = bs > 0
    return float(np.max(sup[ok] / bs[ok])) if np.any(ok) else 0.0


def heat_kernel_check(times: np.ndarray, q_values, c: float = 1.0, tol: float = 0.05) -> dict:
    """Trapezoid value of ``sup_t int_{t_start}^t exp(-c 4^q (t - tau)) dtau`` per ``q``.

    Each entry holds the quadrature value, the bound ``4^{-q}/c`` and whether
    the value stays below ``(1 + tol)`` times the bound.
    """
    times = np.asarray(times, dtype=float)
    out = {}
    for q in q_values:
        rate = c * 4.0 ** q
        # The supremum over t is attained at the window end.
        tau = times
        vals = np.exp(-rate * (times[-1] - tau))
        value = float(np.sum(trapezoid_weights(tau) * vals))
        bound = float(4.0 ** (-q) / c)
        out[int(q)] = {"value": value, "bound": bound, "ok": bool(value <= bound * (1 + tol))}
    return out


@dataclass
class EnergyReport:
    """``lhs = ||u||_{L^inf B^s} + ||u||_{L^1 B^{s+2}}`` against its data terms."""

    lhs: float
    sup_term: float
    integral_term: float
    initial: float
    source: float
    remainder: float
    ratio: Optional[float]
    eps_measured: float
    s: float
    heat_kernel: dict = field(default_factory=dict)

    @property
    def rhs_terms(self) -> tuple:
        return self.initial, self.source, self.remainder

    @property
    def skipped(self) -> bool:
        return self.ratio is None

    def to_json(self) -> str:
        d = asdict(self)
        d["heat_kernel"] = {str(k): v for k, v in self.heat_kernel.items()}
        return json.dumps(d, sort_keys=True)


def _time_norms(u: SpaceTimeField, spec: ProblemSpec, s: float) -> dict:
    part = partition_for(u.grid)
    wts = trapezoid_weights(u.times)
    bs = besov_norm(u.frames, s, part)
    bs2 = besov_norm(u.frames, s + 2, part)
    rf = np.stack([spec.source(t) * spec.f_true for t in u.times])
    out = {
        "sup": float(np.max(bs)),
        "integral": float(np.sum(wts * bs2)),
        "initial": float(besov_norm(u.at(spec.t0), s, part)),
        "source": float(np.sum(wts * besov_norm(rf, s, part))),
        "remainder": 0.0,
    }
    if not spec.is_linear:
        rn = paralinearize(u.grid, u.frames, spec.lam, spec.alpha, part).remainder_N
        out["remainder"] = float(np.sum(wts * besov_norm(rn, s, part)))
    return out


def energy_report(u: SpaceTimeField, spec: ProblemSpec, s: float, c: float = 1.0) -> EnergyReport:
    """Dyadic energy ratio ``lhs / (||u(t0)||_{B^s} + ||R f||_{L^1 B^s} + ||R_N(u)||_{L^1 B^s})``.

    The ratio is ``None`` when every data term vanishes.
    """
    n = _time_norms(u, spec, s)
    lhs = n["sup"] + n["integral"]
    rhs = n["initial"] + n["source"] + n["remainder"]
    ratio = lhs / rhs if rhs > 0 else None
    hk = heat_kernel_check(u.times, partition_for(u.grid).q_values, c)
    report = EnergyReport(lhs, n["sup"], n["integral"], n["initial"], n["source"], n["remainder"],
                          ratio, n["sup"], s, hk)
    logger.info("energy ratio %s at eps=%.4g", ratio, n["sup"])
    return report


@dataclass
class ClosedBound:
    ratio: Optional[float]
    eps_measured: float
    threshold: float
    status: str

    @property
    def in_regime(self) -> bool:
        return self.status == "ok"


def closed_bound_check(u: SpaceTimeField, spec: ProblemSpec, s: float, threshold: float = 0.2) -> ClosedBound:
    """``lhs / (||u(t0)||_{B^s} + ||R f||_{L^1 B^s})`` with the remainder absorbed.

    Runs whose measured ``eps`` exceeds ``threshold`` are reported with status
    ``"outside smallness regime"`` rather than rejected.
    """
    n = _time_norms(u, spec, s)
    rhs = n["initial"] + n["source"]
    lhs = n["sup"] + n["integral"]
    if rhs == 0:
        return ClosedBound(None, n["sup"], threshold, "skipped")
    status = "ok" if n["sup"] <= threshold else "outside smallness regime"
    return ClosedBound(lhs / rhs, n["sup"], threshold, status)
