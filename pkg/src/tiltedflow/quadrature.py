"""Scalar quadrature used by the verification suites."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import integrate

from .schedule import ScheduleSpec, chi


def adaptive_simpson(f: Callable[[float], float], a: float, b: float, tol: float = 1e-12,
                     max_depth: int = 60) -> float:
    """Adaptive Simpson rule with Richardson correction (explicit stack, no recursion)."""
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) * (fa + 4 * fm + fb) / 6
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    total = 0.0
    while stack:
        lo, hi, flo, fmid, fhi, est, eps, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = (mid - lo) * (flo + 4 * flm + fmid) / 6
        right = (hi - mid) * (fmid + 4 * frm + fhi) / 6
        delta = left + right - est
        if depth >= max_depth or abs(delta) <= 15 * eps:
            total += left + right + delta / 15
        else:
            stack.append((lo, mid, flo, flm, fmid, left, eps / 2, depth + 1))
            stack.append((mid, hi, fmid, frm, fhi, right, eps / 2, depth + 1))
    return total


def integrated_chi(sched: ScheduleSpec, sigma1: float, t: float, upper: float = 1 - 1e-10,
                   tol: float = 1e-8) -> float:
    """∫_t^upper χ_s ds by adaptive Simpson."""
    return adaptive_simpson(lambda s: float(chi(sched, sigma1, s)), t, upper, tol)


def integral(f: Callable[[float], float], a: float, b: float, tol: float = 1e-13) -> float:
    """Adaptive Gauss–Kronrod quadrature; endpoints are never evaluated."""
    val, _ = integrate.quad(f, a, b, epsabs=tol, epsrel=tol, limit=500)
    return float(val)


def gauss_legendre(f: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                   n: int = 41) -> float:
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return float(half * np.sum(w * f(0.5 * (a + b) + half * x)))
