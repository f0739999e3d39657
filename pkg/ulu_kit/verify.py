"""
Independent numerical oracles: central finite differences, sup-norm
distances, bounded minimization and the derivative-gap experiment for a
piecewise split at an arbitrary point.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from .activations import (PIECEWISE_KINDS, ActivationKind, ActivationSpec, AdaptiveParams, _ulu_dx, batch_eval,
                          batch_grad_beta)
from .errors import InvalidSpecError

logger = logging.getLogger(__name__)

ScalarFunction = Callable[[float], float]

# Named closeness claims of the approximation figure: (ULU, reference)
APPROXIMATION_PAIRS = (
    ("ulu(10,10)", "relu"),
    ("ulu(0.5,0.5)", "silu"),
    ("ulu(0.8,0.8)", "gelu"),
    ("ulu(0.55,0.8)", "mish"),
)

# h'' jumps at 0 for these, so a central difference straddling 0 is off by O(h)
KINKED_KINDS = PIECEWISE_KINDS | {ActivationKind.ELU}


@dataclass(frozen=True)
class FdConfig:
    step: float = 1e-5
    scheme: str = "central"

    def __post_init__(self):
        if not (0 < self.step < 1e-2):
            raise InvalidSpecError(f"Finite-difference step must be in (0, 1e-2), got {self.step}")
        if self.scheme != "central":
            raise InvalidSpecError(f"Only central differences are supported, got scheme {self.scheme!r}")


@dataclass(frozen=True)
class GapReport:
    """One-sided derivatives of the split function h at the split point a"""
    a: float
    alpha1: float
    alpha2: float
    left_limit: float
    right_limit: float
    gap: float


def fd_derivative(f: ScalarFunction, x, cfg: FdConfig = FdConfig()):
    """
    Central finite difference (f(x+h) - f(x-h)) / 2h.

    Works on scalars, or elementwise on arrays when f is vectorized.
    """
    h = cfg.step
    return (f(x + h) - f(x - h)) / (2.0 * h)


def derivative_gap(a: float, alpha1: float, alpha2: float) -> GapReport:
    """
    Jump in h'(x) at the split point a of
    h(x) = 0.5x(tanh(alpha1 x)+1) for x < a, 0.5x(tanh(alpha2 x)+1) for x >= a.

    Both sides use the analytic branch derivative, so a = 0 gives an exact 0.

    Args:
        a: Split point
        alpha1: Coefficient of the left branch
        alpha2: Coefficient of the right branch

    Returns:
        GapReport with left/right one-sided derivatives and their difference
    """
    if not (alpha1 > 0 and alpha2 > 0):
        raise InvalidSpecError(f"Branch coefficients must be positive, got ({alpha1}, {alpha2})")

    point = np.float64(a)
    left = float(_ulu_dx(point, alpha1, alpha1))
    right = float(_ulu_dx(point, alpha2, alpha2))
    return GapReport(
        a=float(a),
        alpha1=float(alpha1),
        alpha2=float(alpha2),
        left_limit=left,
        right_limit=right,
        gap=right - left,
    )


def sup_norm_distance(f, g, lo: float, hi: float, n: int) -> float:
    """
    Max of |f - g| over n equispaced points of [lo, hi]

    Args:
        f, g: Vectorized functions of a float64 array
        lo, hi: Interval bounds, lo < hi
        n: Number of grid points, at least 2

    Returns:
        The largest absolute difference seen on the grid
    """
    if not lo < hi:
        raise InvalidSpecError(f"Interval must satisfy lo < hi, got [{lo}, {hi}]")
    if n < 2:
        raise InvalidSpecError(f"Need at least 2 grid points, got {n}")

    xs = np.linspace(lo, hi, n)
    return float(np.max(np.abs(np.asarray(f(xs)) - np.asarray(g(xs)))))


def find_minimum(f: ScalarFunction, lo: float, hi: float) -> Tuple[float, float]:
    """Bounded scalar minimization; returns (x*, f(x*))"""
    if not lo < hi:
        raise InvalidSpecError(f"Interval must satisfy lo < hi, got [{lo}, {hi}]")
    result = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    return float(result.x), float(result.fun)


def _compare(analytic: np.ndarray, numeric: np.ndarray, rel_tol: float, abs_tol: float) -> dict:
    abs_err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(numeric), np.finfo(np.float64).tiny)
    rel_err = np.where(abs_err > abs_tol, abs_err / scale, 0.0)
    failures = int(np.count_nonzero((abs_err > abs_tol) & (rel_err > rel_tol)))
    return {
        "points": int(analytic.size),
        "max_abs_err": float(abs_err.max()) if abs_err.size else 0.0,
        "max_rel_err": float(rel_err.max()) if rel_err.size else 0.0,
        "failures": failures,
        "passed": failures == 0 and bool(np.all(np.isfinite(analytic))),
    }


def gradient_check_table(specs: Iterable[ActivationSpec], grid_points: int = 2001,
                         lo: float = -10.0, hi: float = 10.0, rel_tol: float = 1e-6,
                         abs_tol: float = 1e-9, cfg: FdConfig = FdConfig()) -> pd.DataFrame:
    """
    Compare every analytic derivative against central finite differences

    Activations in KINKED_KINDS skip grid points closer than one step to 0,
    where the difference quotient straddles the jump in the second derivative.

    Args:
        specs: Activations to check; AULU specs also check both beta gradients
        grid_points: Number of equispaced points on [lo, hi]
        lo, hi: Grid bounds
        rel_tol, abs_tol: A point passes if either tolerance holds
        cfg: Finite-difference configuration

    Returns:
        DataFrame with one row per (activation, quantity)
    """
    xs_full = np.linspace(lo, hi, grid_points)
    rows: List[dict] = []

    for spec in specs:
        xs = xs_full
        if spec.kind in KINKED_KINDS:
            xs = xs_full[np.abs(xs_full) >= cfg.step]

        numeric = fd_derivative(spec.value, xs, cfg)
        row = {"activation": str(spec), "quantity": "dx"}
        row.update(_compare(spec.derivative(xs), numeric, rel_tol, abs_tol))
        rows.append(row)

        if spec.is_adaptive:
            p = spec.initial_adaptive_params()
            g1, g2 = batch_grad_beta(p, xs)
            numeric_b1 = fd_derivative(lambda b: batch_eval(AdaptiveParams(b, p.beta2), xs), p.beta1, cfg)
            numeric_b2 = fd_derivative(lambda b: batch_eval(AdaptiveParams(p.beta1, b), xs), p.beta2, cfg)
            for quantity, analytic, numeric_beta in (("dbeta1", g1, numeric_b1), ("dbeta2", g2, numeric_b2)):
                row = {"activation": str(spec), "quantity": quantity}
                row.update(_compare(analytic, numeric_beta, rel_tol, abs_tol))
                rows.append(row)

    table = pd.DataFrame(rows, columns=["activation", "quantity", "points", "max_abs_err",
                                        "max_rel_err", "failures", "passed"])
    logger.info("Gradient check: %d of %d rows passed", int(table["passed"].sum()), len(table))
    return table


def approximation_table(lo: float = -5.0, hi: float = 5.0, n: int = 10001) -> pd.DataFrame:
    """Sup-norm distance between each named ULU setting and the activation it mimics"""
    xs = np.linspace(lo, hi, n)
    rows = []
    for ulu_text, reference_text in APPROXIMATION_PAIRS:
        ulu = ActivationSpec.parse(ulu_text)
        reference = ActivationSpec.parse(reference_text)
        diff = np.abs(ulu.value(xs) - reference.value(xs))
        worst = int(np.argmax(diff))
        rows.append({
            "ulu": str(ulu),
            "reference": str(reference),
            "sup_norm": float(diff[worst]),
            "argmax_x": float(xs[worst]),
        })
    return pd.DataFrame(rows)
