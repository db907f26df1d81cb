"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import NumericError


def numerical_gradient(fn: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fp = fn()
        flat[j] = orig - eps
        fm = fn()
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite forward value during gradient check")
        gflat[j] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest entrywise discrepancy relative to the array's gradient scale.

    Normalising by the array's largest gradient magnitude (rather than
    entrywise) keeps round-off in near-zero entries from dominating.
    """
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def grad_check(
    fn: Callable[[], float],
    arrays: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    floor: float = 1e-8,
) -> float:
    """Maximum relative error between ``analytic`` and central differences.

    ``fn`` evaluates the scalar objective from the current contents of
    ``arrays``; each array is perturbed in place and restored. ``floor`` is
    the smallest gradient scale an error is measured against.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = fn()
    if not np.isfinite(base):
        raise NumericError("non-finite forward value")
    worst = 0.0
    for name, arr in arrays.items():
        num = numerical_gradient(fn, arr, eps)
        worst = max(worst, relative_error(np.asarray(analytic[name]), num, floor))
    return worst


def noise_floor(value: float, eps: float = 1e-6, factor: float = 1e5) -> float:
    """Gradient scale below which central differences of ``value`` are mostly round-off."""
    return factor * np.finfo(np.float64).eps * max(abs(value), 1.0) / eps


def check_params(
    fn: Callable[[], float],
    backward: Callable[[], Mapping[str, np.ndarray] | None],
    params,
    inputs=None,
    eps=1e-6,
    floor=1e-8,
):
    """Grad-check a ParameterSet (plus optional input arrays).

    ``backward`` must zero the parameter grads, run forward and backward, and
    return a mapping of input-name -> gradient for ``inputs``.
    """
    input_grads = backward() or {}
    arrays = {p.name: p.value for p in params}
    analytic = {p.name: p.grad.copy() for p in params}
    for name, arr in (inputs or {}).items():
        arrays[name] = arr
        analytic[name] = input_grads[name]
    return grad_check(fn, arrays, analytic, eps, floor)
