"""Composite training objective: neighborhood-preservation losses, dynamic
convex weighting, and the perturbation-radius ramp schedule.

The two bound losses measure, over the query instances only, the mean squared
Euclidean distance between an embedding and the lower/upper face of its
propagated box.  The total loss is a convex combination of classification and
bound losses; in dynamic mode the weights are a softmax over the three loss
values (temperature ``gamma``), recomputed every step and treated as
constants of the step, so no gradient flows through the weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bounds import IntervalTensor
from .tensor import NonFiniteError, add, mul, sub, sum_, value_of


@dataclass
class LossTriple:
    """Classification, lower-bound, and upper-bound loss terms.

    Entries may be tape nodes during training; :meth:`values` extracts plain
    floats for logging and weight computation.
    """

    l_ce: object
    l_lb: object
    l_ub: object

    def values(self) -> tuple[float, float, float]:
        vals = tuple(float(value_of(x)) for x in (self.l_ce, self.l_lb, self.l_ub))
        if not all(math.isfinite(v) for v in vals):
            raise NonFiniteError(f"non-finite loss values {vals}")
        if vals[1] < 0 or vals[2] < 0:
            raise ValueError("bound losses must be non-negative")
        return vals


@dataclass(frozen=True)
class WeightTriple:
    w_ce: float
    w_lb: float
    w_ub: float
    mode: str = "dynamic"

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_ce, self.w_lb, self.w_ub)

    def validate(self, tol: float = 1e-9) -> None:
        t = self.as_tuple()
        if any(w < -tol for w in t) or abs(sum(t) - 1.0) > tol:
            raise ValueError(f"weights {t} are not on the probability simplex")


def bound_losses(centers, box: IntervalTensor):
    """Mean squared distance from each embedding row to the box faces.

    ``centers`` has one row per query instance; ``box`` faces are aligned
    row-for-row.  These losses apply to query instances only; support
    instances never contribute.  Returns ``(l_lb, l_ub)``.
    """
    n = np.shape(value_of(centers))[0]
    for face in (box.lower, box.upper):
        if np.shape(value_of(face)) != np.shape(value_of(centers)):
            raise ValueError(
                f"box face shape {np.shape(value_of(face))} does not match "
                f"centers {np.shape(value_of(centers))}"
            )
    d_lo = sub(centers, box.lower)
    d_up = sub(centers, box.upper)
    l_lb = mul(sum_(mul(d_lo, d_lo)), 1.0 / n)
    l_ub = mul(sum_(mul(d_up, d_up)), 1.0 / n)
    return l_lb, l_ub


def dynamic_weights(losses, gamma: float) -> WeightTriple:
    """Softmax across the three loss values with temperature ``gamma``.

    Larger losses receive larger weights, prioritizing whichever term
    currently dominates.  Computed with max-shift stabilization on detached
    loss values.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    vals = losses.values() if isinstance(losses, LossTriple) else tuple(losses)
    scaled = [v / gamma for v in vals]
    shift = max(scaled)
    e = [math.exp(s - shift) for s in scaled]
    z = sum(e)
    return WeightTriple(e[0] / z, e[1] / z, e[2] / z, mode="dynamic")


def static_weights(w_ce: float, w_lb: float, w_ub: float) -> WeightTriple:
    w = WeightTriple(w_ce, w_lb, w_ub, mode="static")
    w.validate()
    return w


def total_loss(losses: LossTriple, weights: WeightTriple):
    """Convex combination of the three losses; weights are step constants."""
    weights.validate()
    return add(
        add(mul(losses.l_ce, weights.w_ce), mul(losses.l_lb, weights.w_lb)),
        mul(losses.l_ub, weights.w_ub),
    )


def epsilon_schedule(t: int, max_steps: int, eps: float) -> float:
    """Linear ramp from 0 to ``eps`` over the first 90% of training.

    After step ``ceil(0.9 * max_steps)`` the radius stays at ``eps``; the ramp
    is clamped so the value never exceeds ``eps``.
    """
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    if t < 0 or t > max_steps:
        raise ValueError(f"step {t} outside 0..{max_steps}")
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    if t > math.ceil(0.9 * max_steps):
        return eps
    return min(t / (0.9 * max_steps), 1.0) * eps
