"""Finite-difference verification of tape gradients (float64 only)."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .engine import NonFiniteError, NumericsError, Tape, Tensor, precision

REL_ERR_FLOOR = 1e-8


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERR_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _eval_scalar(f: Callable[[Tensor], Tensor], x: Tensor) -> float:
    out = f(x)
    val = out.item()
    if not np.isfinite(val):
        raise NonFiniteError("non-finite function value during grad check")
    return val


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` maps one tensor to a scalar tensor and must be deterministic;
    evaluation runs in float64. Relative error per coordinate uses the
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    with precision("float64"):
        x_arr = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        xt = Tensor(x_arr, requires_grad=True, dtype=np.float64)
        tape = Tape()
        with tape:
            out = f(xt)
        analytic = tape.backward(out, [xt])[id(xt)].data

        flat = xt.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _eval_scalar(f, xt)
            flat[i] = orig - eps
            fm = _eval_scalar(f, xt)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
        return _rel_err(analytic.reshape(-1), numeric)


def grad_check_params(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> dict[str, float]:
    """Per-tensor max relative error for a loss closing over ``params``.

    All parameter tensors must already be float64; the closure is re-run
    (without a tape) after each in-place coordinate perturbation.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise NumericsError(f"grad_check_params needs float64 params, {name} is {p.data.dtype}")
    with precision("float64"):
        tape = Tape()
        with tape:
            loss = f()
        grads = tape.backward(loss, list(params.values()))

        errors: dict[str, float] = {}
        for name, p in params.items():
            analytic = grads[id(p)].data.reshape(-1)
            flat = p.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * eps)
            errors[name] = _rel_err(analytic, numeric)
        return errors
