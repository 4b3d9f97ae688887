"""Artificial-task construction by interpolating toward propagated bounds.

For each class k of a task, a coefficient pair is drawn: a mixing weight
``lam_k ~ Beta(alpha, beta)`` and a fair coin ``nu_k`` choosing the lower or
upper face.  Every instance of class k is then replaced by the convex
combination ``(1 - lam_k) * embedding + lam_k * face`` of its own embedding
and the chosen face of its own box, so interpolated instances always stay
inside their boxes.  Labels are unchanged.  Two plain mixup variants (at the
input or at the embedding layer) pair two tasks position-by-position and are
kept as ablation baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import IntervalTensor, propagate_prefix
from .episodes import Task
from .layers import Network, forward
from .tensor import add, mul, value_of


MODES = ("ibpi", "ibpi_no_bound_loss", "mixup_input", "mixup_embedding")


@dataclass(frozen=True)
class MixCoefficients:
    """Per-class mixing weights ``lam`` in [0,1] and face choices ``nu`` in {0,1}."""

    lam: np.ndarray
    nu: np.ndarray
    alpha: float
    beta: float

    def __post_init__(self):
        if np.any(self.lam < 0) or np.any(self.lam > 1):
            raise ValueError("mixing weights must lie in [0, 1]")
        if not np.all(np.isin(self.nu, (0, 1))):
            raise ValueError("face choices must be 0 or 1")


@dataclass
class InterpolatedTask:
    """Instances of an artificial task, with the source task's labels.

    ``space`` is ``"embedding"`` for bound-based and embedding-mixup modes
    (instances are consumed by the classifier head) and ``"input"`` for input
    mixup (instances are consumed by the full network).
    """

    support_h: object
    support_y: np.ndarray
    query_h: object
    query_y: np.ndarray
    mode: str
    space: str


def sample_mix(n_classes: int, alpha: float, beta: float, rng) -> MixCoefficients:
    """Independent Beta(alpha, beta) weight and fair face choice per class."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("Beta parameters must be positive")
    lam = rng.beta(alpha, beta, size=n_classes)
    nu = rng.integers(0, 2, size=n_classes)
    return MixCoefficients(lam, nu, alpha, beta)


def interpolate(center, box: IntervalTensor, lam: float, nu: int):
    """Convex step from an embedding toward one face of its box."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    face = box.upper if nu else box.lower
    return add(mul(center, 1.0 - lam), mul(face, lam))


def _per_row(coeff_values, labels, reference):
    labels = np.asarray(labels)
    trail = [1] * (np.ndim(value_of(reference)) - 1)
    return coeff_values[labels].astype(np.float64).reshape(-1, *trail)


def interpolate_batch(centers, box: IntervalTensor, labels, coeffs: MixCoefficients):
    """Apply per-class coefficients row-wise over a labeled batch."""
    lam = _per_row(coeffs.lam, labels, centers)
    nu = _per_row(coeffs.nu, labels, centers)
    face = add(mul(box.lower, 1.0 - nu), mul(box.upper, nu))
    return add(mul(centers, 1.0 - lam), mul(face, lam))


def mix_batch(first, second, labels, coeffs: MixCoefficients):
    """Per-class convex combination of two aligned batches."""
    if np.shape(value_of(first)) != np.shape(value_of(second)):
        raise ValueError("mixed batches must have identical shapes")
    lam = _per_row(coeffs.lam, labels, first)
    return add(mul(first, 1.0 - lam), mul(second, lam))


def make_interpolated_task(
    task: Task,
    network: Network,
    eps: float,
    mode: str,
    coeffs: MixCoefficients | None = None,
    query_coeffs: MixCoefficients | None = None,
    rng=None,
    alpha: float = 0.5,
    beta: float = 0.5,
    pair_task: Task | None = None,
    tape=None,
    params=None,
    support_bounds=None,
    query_bounds=None,
    shared_coeffs: bool = True,
) -> InterpolatedTask:
    """Build one artificial task in the requested mode.

    Bound-based modes interpolate every support and query instance toward a
    face of its propagated box.  One coefficient pair per class is shared
    across the support and query sets unless ``query_coeffs`` is given (or
    ``shared_coeffs=False``, which draws a second set from ``rng``).  Mixup
    modes combine same-position instances of ``task`` and ``pair_task``;
    labels always come from ``task``.  ``support_bounds``/``query_bounds``
    reuse already propagated boxes (tape nodes during training); ``params``
    are prefix parameter nodes for propagations done here.
    """
    if mode not in MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if coeffs is None:
        if rng is None:
            raise ValueError("need either coefficients or an rng")
        coeffs = sample_mix(task.ways, alpha, beta, rng)
    if query_coeffs is None:
        if shared_coeffs:
            query_coeffs = coeffs
        else:
            if rng is None:
                raise ValueError("independent query coefficients need an rng")
            query_coeffs = sample_mix(task.ways, coeffs.alpha, coeffs.beta, rng)

    if mode in ("ibpi", "ibpi_no_bound_loss"):
        if support_bounds is None:
            support_bounds = propagate_prefix(
                network, task.support_x, eps, tape=tape, params=params
            )
        if query_bounds is None:
            query_bounds = propagate_prefix(
                network, task.query_x, eps, tape=tape, params=params
            )
        support_h = interpolate_batch(
            support_bounds.center, support_bounds.box, task.support_y, coeffs
        )
        query_h = interpolate_batch(
            query_bounds.center, query_bounds.box, task.query_y, query_coeffs
        )
        space = "embedding"
    else:
        if pair_task is None:
            raise ValueError(f"mode {mode!r} requires a second task to mix with")
        if mode == "mixup_input":
            support_h = mix_batch(
                task.support_x, pair_task.support_x, task.support_y, coeffs
            )
            query_h = mix_batch(
                task.query_x, pair_task.query_x, task.query_y, query_coeffs
            )
            space = "input"
        else:  # mixup_embedding
            prefix = network.prefix
            emb_a_s = forward(prefix, task.support_x, tape=tape, params=params)
            emb_b_s = forward(prefix, pair_task.support_x, tape=tape, params=params)
            emb_a_q = forward(prefix, task.query_x, tape=tape, params=params)
            emb_b_q = forward(prefix, pair_task.query_x, tape=tape, params=params)
            support_h = mix_batch(emb_a_s, emb_b_s, task.support_y, coeffs)
            query_h = mix_batch(emb_a_q, emb_b_q, task.query_y, query_coeffs)
            space = "embedding"

    return InterpolatedTask(
        support_h=support_h,
        support_y=task.support_y.copy(),
        query_h=query_h,
        query_y=task.query_y.copy(),
        mode=mode,
        space=space,
    )


def should_interpolate(learner: str, batch_size: int, rng, probability: float | None = None):
    """Boolean mask over batch positions marking where interpolation fires.

    The meta-learner interpolates exactly one uniformly chosen task per batch;
    the prototype learner (batch size 1) interpolates with probability 0.25
    per step.  ``probability`` overrides the firing rate; 0 disables.
    """
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    mask = np.zeros(batch_size, dtype=bool)
    if learner == "maml":
        p = 1.0 if probability is None else probability
        if p > 0 and rng.uniform() < p:
            mask[rng.integers(0, batch_size)] = True
    elif learner == "protonet":
        p = 0.25 if probability is None else probability
        mask[:] = rng.uniform(size=batch_size) < p
    else:
        raise ValueError(f"unknown learner {learner!r}")
    return mask
