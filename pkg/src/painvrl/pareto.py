"""Two-objective min-norm (MGDA) weights for the ERM/IRM trade-off."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-12
STATIONARY_TOL = 1e-10


@dataclass(frozen=True)
class ParetoWeights:
    w_erm: float
    w_irm: float
    raw: float = float("nan")  # pre-clip closed-form value, diagnostics only

    def __post_init__(self):
        if not (0.0 <= self.w_erm <= 1.0 and 0.0 <= self.w_irm <= 1.0):
            raise ValueError(f"weights outside [0, 1]: {self.w_erm}, {self.w_irm}")
        if abs(self.w_erm + self.w_irm - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    @classmethod
    def fixed(cls, w_erm: float) -> "ParetoWeights":
        return cls(float(w_erm), 1.0 - float(w_erm), float(w_erm))


@dataclass
class DescentCheck:
    dot_erm: float
    dot_irm: float
    sq_norm: float
    kkt_stationary: bool

    @property
    def zeta(self) -> float:
        return 0.0 if self.kkt_stationary else -self.sq_norm


def _pair(g_erm, g_irm):
    a = np.asarray(g_erm, dtype=np.float64).ravel()
    b = np.asarray(g_irm, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"gradient length mismatch: {a.size} vs {b.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("gradients must be finite")
    return a, b


def solve_weights(g_erm, g_irm) -> ParetoWeights:
    """Minimiser of ||w g_erm + (1-w) g_irm||^2 over w in [0, 1], in closed form.

    Equal gradients make the closed form 0/0; every w gives the same direction there
    and (0.5, 0.5) is returned.
    """
    a, b = _pair(g_erm, g_irm)
    diff = a - b
    denom = float(diff @ diff)
    if denom < DEGENERATE_TOL:
        return ParetoWeights(0.5, 0.5, 0.5)
    raw = float((b - a) @ b) / denom
    w = min(1.0, max(0.0, raw))
    return ParetoWeights(w, 1.0 - w, raw)


def combined_direction(g_erm, g_irm, w: ParetoWeights) -> np.ndarray:
    a, b = _pair(g_erm, g_irm)
    return w.w_erm * a + w.w_irm * b


def check_descent(g_erm, g_irm, w: ParetoWeights) -> DescentCheck:
    """Evaluate both directional derivatives along dm = -combined_direction."""
    a, b = _pair(g_erm, g_irm)
    dm = -combined_direction(a, b, w)
    sq = float(dm @ dm)
    return DescentCheck(float(a @ dm), float(b @ dm), sq, bool(np.sqrt(sq) < STATIONARY_TOL))


def oracle_min_norm(g_erm, g_irm, grid_steps: int = 100_000) -> float:
    """Brute-force grid search for the min-norm convex weight (independent of the closed form)."""
    a, b = _pair(g_erm, g_irm)
    if grid_steps < 1:
        raise ValueError("grid_steps must be >= 1")
    # ||w a + (1-w) b||^2 = w^2 aa + 2 w (1-w) ab + (1-w)^2 bb, evaluated on the grid
    aa, ab, bb = float(a @ a), float(a @ b), float(b @ b)
    w = np.linspace(0.0, 1.0, grid_steps + 1)
    norms = w * w * aa + 2.0 * w * (1.0 - w) * ab + (1.0 - w) ** 2 * bb
    return float(w[int(np.argmin(norms))])
