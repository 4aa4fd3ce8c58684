"""Flat parameter layouts and the central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class ParamLayout:
    """Named-segment layout mapping a dict of arrays to one flat vector and back."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.names = list(shapes)
        self.shapes = {n: tuple(shapes[n]) for n in self.names}
        self.slices = {}
        start = 0
        for n in self.names:
            size = int(np.prod(self.shapes[n], dtype=np.int64))
            self.slices[n] = slice(start, start + size)
            start += size
        self.size = start

    @classmethod
    def of(cls, arrays: dict[str, np.ndarray]) -> "ParamLayout":
        return cls({n: np.shape(a) for n, a in arrays.items()})

    def flatten(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size, dtype=np.float64)
        for n in self.names:
            out[self.slices[n]] = np.asarray(arrays[n], dtype=np.float64).ravel()
        return out

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected a vector of length {self.size}, got shape {vec.shape}")
        return {n: vec[self.slices[n]].reshape(self.shapes[n]).copy() for n in self.names}

    def segment_of(self, index: int) -> str:
        for n in self.names:
            s = self.slices[n]
            if s.start <= index < s.stop:
                return n
        raise IndexError(index)


@dataclass
class GradReport:
    max_abs_diff: float
    max_rel_diff: float
    worst_index: int
    passed: bool

    @property
    def pass_(self) -> bool:
        return self.passed


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_k) - f(x - h e_k)) / 2h`` for every coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value probing coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def check_gradient(analytic, numeric, tol: float = 1e-4, floor: float = 1e-6) -> GradReport:
    """Relative error ``|a - n| / max(|a|, |n|, floor)`` per coordinate.

    ``floor`` keeps coordinates whose true value is below the difference quotient's
    rounding noise (about 1e-10 at h = 1e-5) from dominating the report.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ValueError(f"length mismatch: {a.size} vs {n.size}")
    if a.size == 0:
        return GradReport(0.0, 0.0, -1, True)
    diff = np.abs(a - n)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    worst = int(np.argmax(rel))
    max_rel = float(rel[worst])
    return GradReport(float(diff.max()), max_rel, worst, max_rel <= tol)
