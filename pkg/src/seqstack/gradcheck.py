"""Finite-difference verification of tape gradients.

Central differences against the analytic gradients from backward(). Checks
must run in float64; at float32 the difference quotient loses too many digits
to certify anything. The step is small enough that a relu kink sitting inside
the probe window (which makes the two-sided quotient average the slopes of
both sides) is vanishingly rare, while float64 keeps roundoff near 1e-10.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError, NumericsError
from .tensor import Tensor, backward, no_grad, tape_scope

DEFAULT_STEP = 1e-6


def finite_difference_check(
    build_loss: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = DEFAULT_STEP,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare analytic and numeric gradients for every parameter.

    `build_loss` must rebuild the scalar loss from scratch on each call and be
    deterministic (fix any dropout stream, or disable it). Returns the maximum
    relative error per parameter, where the relative error of one entry is
    |ad - fd| / max(|ad|, |fd|, 1e-8).

    With `max_entries`, a random subset of entries per parameter is probed
    (requires `rng`); otherwise every entry is.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ContractError(
                f"finite_difference_check requires float64 parameters; {name!r} is "
                f"{p.data.dtype.name}"
            )
    if max_entries is not None and rng is None:
        raise ContractError("max_entries sampling needs an rng")

    for p in params.values():
        p.zero_grad()
    with tape_scope():
        loss = build_loss()
        backward(loss)

    def loss_value() -> float:
        with tape_scope(), no_grad():
            return build_loss().item()

    worst: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(analytic)):
            raise NumericsError(f"analytic gradient of {name!r} is not finite")
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            indices = rng.choice(n, size=max_entries, replace=False)
        else:
            indices = np.arange(n)
        a_flat = analytic.reshape(-1)
        worst_rel = 0.0
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            hi = loss_value()
            flat[i] = original - step
            lo = loss_value()
            flat[i] = original
            fd = (hi - lo) / (2.0 * step)
            if not np.isfinite(fd):
                raise NumericsError(f"numeric gradient of {name!r} is not finite")
            ad = float(a_flat[i])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
            if rel > worst_rel:
                worst_rel = rel
        worst[name] = worst_rel
    return worst
