"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic vs numeric gradients."""

    max_rel_err: float
    worst_index: tuple
    n_coords: int
    passed: bool
    rel_err: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    analytic: np.ndarray = field(repr=False)


def grad_check(fn, grad, point, epsilon: float = 1e-5, tolerance: float = 1e-4):
    """Probe every coordinate of ``point`` with central differences.

    Args:
        fn: maps an array shaped like ``point`` to a float.
        grad: analytic gradient of fn at ``point`` (same shape).
        point: evaluation point; not modified.
        epsilon: half-width of the central-difference stencil.
        tolerance: max relative error admitted by ``report.passed``.

    The relative error for a coordinate uses max(|analytic|, |numeric|) as
    the scale; when both magnitudes are below 1e-6 the absolute difference
    is used instead (a vanishing gradient has no meaningful relative scale).

    A non-finite fn value at the base point or at any probe is rejected.
    """
    point = np.array(point, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != point.shape:
        raise ValueError(
            f"grad_check: gradient shape {grad.shape} does not match point {point.shape}"
        )
    if epsilon <= 0:
        raise ValueError("grad_check: epsilon must be positive")

    base = float(fn(point))
    if not np.isfinite(base):
        raise ValueError("grad_check: fn returned a non-finite value at the base point")

    flat = point.ravel()
    numeric = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(fn(point))
        flat[i] = orig - epsilon
        fm = float(fn(point))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(
                f"grad_check: fn returned a non-finite value probing coordinate {i}"
            )
        numeric[i] = (fp - fm) / (2.0 * epsilon)

    analytic = grad.ravel()
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    rel = np.where(scale > 1e-6, diff / np.maximum(scale, 1e-300), diff)

    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(
        max_rel_err=max_rel,
        worst_index=np.unravel_index(worst, point.shape) if rel.size else (),
        n_coords=flat.size,
        passed=bool(max_rel <= tolerance),
        rel_err=rel.reshape(point.shape),
        numeric=numeric.reshape(point.shape),
        analytic=grad.reshape(point.shape),
    )


def pack_arrays(arrays):
    """Flatten a list of arrays into one vector; returns (vec, shapes)."""
    shapes = [np.asarray(a).shape for a in arrays]
    if not arrays:
        return np.zeros(0), shapes
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays]), shapes


def unpack_vector(vec, shapes):
    """Inverse of :func:`pack_arrays`."""
    out = []
    ofs = 0
    for s in shapes:
        n = int(np.prod(s, dtype=np.int64)) if s else 1
        out.append(np.asarray(vec[ofs : ofs + n]).reshape(s))
        ofs += n
    return out


def check_packed(f_and_grad, arrays, epsilon: float = 1e-5, tolerance: float = 1e-4):
    """Gradient-check a scalar function of several arrays at once.

    ``f_and_grad(list_of_arrays)`` must return ``(value, list_of_grads)``
    with one gradient per input array. All inputs are packed into a single
    flat point so one report covers every coordinate of every array.
    """
    point, shapes = pack_arrays(arrays)
    _, grads = f_and_grad(unpack_vector(point, shapes))
    grad_vec, _ = pack_arrays(grads)

    def fn(vec):
        value, _ = f_and_grad(unpack_vector(vec, shapes))
        return value

    return grad_check(fn, grad_vec, point, epsilon=epsilon, tolerance=tolerance)
