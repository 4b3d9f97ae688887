"""Interval propagation of axis-aligned boxes through network prefixes.

An input box ``[x - eps, x + eps]`` is pushed layer by layer: affine layers
map the box center and radius (radius through the elementwise absolute
weights), elementwise monotone layers and max pooling apply to the lower and
upper faces separately.  The propagated box is guaranteed to contain the
image of every point of the input box, and for a single affine, relu, or
maxpool layer each output face is attained by some input point.

All entry points accept tape nodes as well as plain arrays, so bound
computations are differentiable with respect to the network parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import LayerSpec, Network, batch_stats, bn_affine, _bn_broadcast
from .tensor import (
    abs_,
    add,
    check_finite,
    conv2d,
    matmul,
    maxpool2d,
    mul,
    relu,
    reshape,
    sub,
    transpose,
    value_of,
)


@dataclass
class IntervalTensor:
    """Axis-aligned box: coordinatewise lower and upper faces (equal shapes)."""

    lower: object
    upper: object

    def values(self) -> "IntervalTensor":
        return IntervalTensor(value_of(self.lower), value_of(self.upper))

    def width(self):
        return sub(self.upper, self.lower)

    def validate(self, tol: float = 0.0) -> None:
        lo, up = value_of(self.lower), value_of(self.upper)
        if np.shape(lo) != np.shape(up):
            raise ValueError(f"box face shapes differ: {np.shape(lo)} vs {np.shape(up)}")
        check_finite(lo, "box lower face")
        check_finite(up, "box upper face")
        if np.any(lo > up + tol):
            raise ValueError("box has lower > upper")


@dataclass
class BoundResult:
    """Embedding of an instance together with its propagated box."""

    center: object
    box: IntervalTensor

    def values(self) -> "BoundResult":
        return BoundResult(value_of(self.center), self.box.values())

    def validate(self, tol: float = 1e-9) -> None:
        self.box.validate(tol=tol)
        c = value_of(self.center)
        lo, up = value_of(self.box.lower), value_of(self.box.upper)
        if np.any(c < lo - tol) or np.any(c > up + tol):
            raise ValueError("center outside propagated box")


def epsilon_box(x, eps: float) -> IntervalTensor:
    """The l-infinity ball ``[x - eps, x + eps]`` as a box."""
    if eps < 0:
        raise ValueError(f"epsilon must be non-negative, got {eps}")
    return IntervalTensor(sub(x, eps), add(x, eps))


def _affine_box(box: IntervalTensor, apply_center, apply_radius) -> IntervalTensor:
    mu = mul(add(box.lower, box.upper), 0.5)
    psi = mul(sub(box.upper, box.lower), 0.5)
    mu_out = apply_center(mu)
    psi_out = apply_radius(psi)
    return IntervalTensor(sub(mu_out, psi_out), add(mu_out, psi_out))


def propagate_layer(
    layer: LayerSpec,
    box: IntervalTensor,
    weight=None,
    bias=None,
    frozen_stats=None,
) -> IntervalTensor:
    """Push a box through one layer.

    ``weight``/``bias`` override stored parameters (typically tape nodes).
    Batchnorm uses ``frozen_stats`` when given; otherwise statistics are taken
    from the box midpoint batch, matching the per-step frozen-affine
    treatment of batchnorm.
    """
    box.validate()
    w = layer.weight if weight is None else weight
    b = layer.bias if bias is None else bias
    kind = layer.kind

    if kind == "fully_connected":
        return _affine_box(
            box,
            lambda mu: add(matmul(mu, transpose(w)), b),
            lambda psi: matmul(psi, transpose(abs_(w))),
        )
    if kind == "conv2d":
        # positive/negative kernel split; equal to the center/radius form
        w_pos = relu(w)
        w_neg = sub(w, w_pos)
        zero_b = np.zeros(np.shape(value_of(b)))
        lower = add(
            conv2d(box.lower, w_pos, b, stride=layer.stride),
            conv2d(box.upper, w_neg, zero_b, stride=layer.stride),
        )
        upper = add(
            conv2d(box.upper, w_pos, b, stride=layer.stride),
            conv2d(box.lower, w_neg, zero_b, stride=layer.stride),
        )
        return IntervalTensor(lower, upper)
    if kind == "batchnorm":
        if frozen_stats is None:
            frozen_stats = batch_stats(mul(add(box.lower, box.upper), 0.5), layer)
        scale, shift = bn_affine(layer, *frozen_stats, gamma=w, beta=b)
        ref = box.lower
        scale_b = _bn_broadcast(ref, scale)
        shift_b = _bn_broadcast(ref, shift)
        abs_scale_b = _bn_broadcast(ref, abs_(scale))
        return _affine_box(
            box,
            lambda mu: add(mul(mu, scale_b), shift_b),
            lambda psi: mul(psi, abs_scale_b),
        )
    if kind == "relu":
        return IntervalTensor(relu(box.lower), relu(box.upper))
    if kind == "maxpool2d":
        return IntervalTensor(
            maxpool2d(box.lower, layer.window, layer.stride),
            maxpool2d(box.upper, layer.window, layer.stride),
        )
    if kind == "flatten":
        n = np.shape(value_of(box.lower))[0]
        return IntervalTensor(
            reshape(box.lower, (n, -1)), reshape(box.upper, (n, -1))
        )
    raise ValueError(f"unknown layer kind {kind!r}")


def propagate_prefix(
    network: Network, x, eps: float, tape=None, params=None
) -> BoundResult:
    """Forward ``x`` through the embedding prefix while propagating its box.

    Returns the ordinary layer-``S`` activation as ``center`` and the box
    obtained by pushing ``[x - eps, x + eps]`` through the same layers.
    Batchnorm statistics come from the center activations and are reused for
    the box, so both passes see the identical per-step affine map.
    """
    from .layers import apply_layer, make_param_nodes  # cycle-free local import

    check_finite(x, "bound propagation input")
    if params is None and tape is not None:
        params = make_param_nodes(network.prefix, tape)
    center = x
    box = epsilon_box(x, eps)
    for i, layer in enumerate(network.prefix):
        entry = params[i] if params is not None else {}
        w, b = entry.get("weight"), entry.get("bias")
        frozen = None
        if layer.kind == "batchnorm":
            frozen = batch_stats(center, layer)
        center = apply_layer(layer, center, weight=w, bias=b, frozen_stats=frozen)
        box = propagate_layer(layer, box, weight=w, bias=b, frozen_stats=frozen)
        check_finite(box.lower, f"box lower after layer {i}")
        check_finite(box.upper, f"box upper after layer {i}")
    result = BoundResult(center, box)
    result.validate()
    return result


def task_bounds(network: Network, instances, eps: float) -> list[BoundResult]:
    """Per-instance bound results for a batch, in input order."""
    arr = value_of(instances)
    if np.shape(arr)[0] == 0:
        raise ValueError("empty instance batch")
    batched = propagate_prefix(network, arr, eps).values()
    out = []
    for i in range(arr.shape[0]):
        out.append(
            BoundResult(
                batched.center[i],
                IntervalTensor(batched.box.lower[i], batched.box.upper[i]),
            )
        )
    return out
