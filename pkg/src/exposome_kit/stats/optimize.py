"""Scalar minimization on a closed interval (golden section + parabolic steps)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

GOLDEN = 0.5 * (3.0 - math.sqrt(5.0))


class ConvergenceError(RuntimeError):
    """Raised when the iteration budget runs out before the bracket closes.

    ``best`` holds the best ``(x, fx)`` pair seen so far.
    """

    def __init__(self, message: str, best: tuple[float, float]):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class MinimizeResult:
    x: float
    fun: float
    iterations: int
    evaluations: int


def brent_minimize(
    f: Callable[[float], float],
    a: float,
    b: float,
    xtol: float = 1e-9,
    rtol: float = 1.5e-8,
    max_iter: int = 500,
) -> MinimizeResult:
    """Minimize ``f`` on ``[a, b]`` with Brent's method.

    Golden-section steps keep the bracket shrinking; parabolic interpolation
    through the three best points is used whenever it lands safely inside.
    The bracket is closed once its half-width falls below
    ``2 * (rtol * |x| + xtol / 3)``.
    """
    if not a < b:
        raise ValueError(f"empty interval [{a}, {b}]")
    x = w = v = a + GOLDEN * (b - a)
    fx = fw = fv = f(x)
    n_eval = 1
    d = e = 0.0
    for it in range(1, max_iter + 1):
        mid = 0.5 * (a + b)
        tol1 = rtol * abs(x) + xtol / 3.0
        tol2 = 2.0 * tol1
        if abs(x - mid) <= tol2 - 0.5 * (b - a):
            return MinimizeResult(x, fx, it - 1, n_eval)
        golden_step = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            e_prev, e = e, d
            if abs(p) < abs(0.5 * q * e_prev) and q * (a - x) < p < q * (b - x):
                d = p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = tol1 if x < mid else -tol1
                golden_step = False
        if golden_step:
            e = (b - x) if x < mid else (a - x)
            d = GOLDEN * e
        u = x + (d if abs(d) >= tol1 else math.copysign(tol1, d))
        fu = f(u)
        n_eval += 1
        if fu <= fx:
            if u < x:
                b = x
            else:
                a = x
            v, fv = w, fw
            w, fw = x, fx
            x, fx = u, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, fv = w, fw
                w, fw = u, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    raise ConvergenceError(f"no convergence after {max_iter} iterations", (x, fx))
