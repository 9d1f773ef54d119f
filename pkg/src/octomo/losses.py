"""Training objective: reprojection MSE plus TV and boundary-consistency terms.

Each regularizer returns ``(value, grads)`` where ``grads`` maps a parameter
group name to arrays shaped like the parameters (features always, decoder
for the decoded TV variant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import field, kernels
from .errors import ConfigurationError, InputError
from .octree import ACTIVE

FEATURES = "features"
DECODED = "decoded"
TV_VARIANTS = (FEATURES, DECODED)
BC_POINTS = 5


@dataclass(frozen=True)
class LossWeights:
    lambda_tv: float = 2e-5
    lambda_bc: float = 0.01
    tv_variant: str = FEATURES

    def __post_init__(self):
        if self.lambda_tv < 0 or self.lambda_bc < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.tv_variant not in TV_VARIANTS:
            raise ConfigurationError(f"unknown TV variant {self.tv_variant!r}")


def mse_loss(predicted, target):
    """Batch mean of squared differences; returns ``(value, dL/dpredicted)``."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise InputError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise InputError("empty batch")
    r = p - t
    return float(np.mean(r * r)), 2.0 * r / r.size


def tv_loss(tree, volumes, decoder=None, variant=FEATURES, out=None, weight=1.0):
    """Total variation over the lattices of all ACTIVE leaves.

    Each node's sum of absolute forward differences is scaled by its edge
    length; the total is divided by the number of (edge, channel) terms, so
    a single unit step across one axis of one ``G = 2`` root grid gives 4/12.

    ``weight`` scales the returned gradients (not the value). With ``out``,
    the feature gradient is added into that array, which is returned as
    ``grads["features"]``.
    """
    if variant not in TV_VARIANTS:
        raise ConfigurationError(f"unknown TV variant {variant!r}")
    leaves = tree.active_leaves()
    grads = {"features": np.zeros_like(volumes.data) if out is None else out}
    if len(leaves) == 0:
        return 0.0, grads
    slots = np.ascontiguousarray(tree.slot[leaves], dtype=np.int64)
    scale = np.ascontiguousarray(tree.size[leaves], dtype=np.float64)
    G, F = volumes.G, volumes.F
    if variant == FEATURES:
        count = len(leaves) * 3 * G * G * (G - 1) * F
        total = kernels.tv_grid(volumes.data, slots, scale, grads["features"], weight / count)
        return total / count, grads
    if decoder is None:
        raise InputError("decoded TV needs the decoder")
    feats = volumes.data[slots]
    sigma, cache = decoder.forward(feats.reshape(-1, F))
    sgrid = np.ascontiguousarray(sigma, dtype=np.float64).reshape(len(leaves), G, G, G, 1)
    count = len(leaves) * 3 * G * G * (G - 1)
    g = np.zeros_like(sgrid)
    total = kernels.tv_grid(sgrid, np.arange(len(leaves), dtype=np.int64), scale, g, weight / count)
    g_f, dgrads = decoder.backward(cache, g.reshape(-1))
    grads["features"][slots] += g_f.reshape(feats.shape).astype(volumes.dtype)
    grads["decoder"] = dgrads
    return total / count, grads


def boundary_points(tree, pairs, Q=BC_POINTS):
    """Quadrature points on each shared face: ``(low, high, local_low, local_high)`` per point."""
    if not pairs:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy(), np.empty((0, 3)), np.empty((0, 3))
    c = (np.arange(Q) + 0.5) / Q
    a_ids, b_ids, pts = [], [], []
    for a, b, rect in pairs:
        u, v = [k for k in range(3) if k != rect.axis]
        U, V = np.meshgrid(c, c, indexing="ij")
        p = np.empty((Q * Q, 3))
        p[:, rect.axis] = rect.lo[rect.axis]
        p[:, u] = rect.lo[u] + U.ravel() * (rect.hi[u] - rect.lo[u])
        p[:, v] = rect.lo[v] + V.ravel() * (rect.hi[v] - rect.lo[v])
        pts.append(p)
        a_ids.append(np.full(Q * Q, a))
        b_ids.append(np.full(Q * Q, b))
    a = np.concatenate(a_ids)
    b = np.concatenate(b_ids)
    p = np.concatenate(pts)
    la = np.clip((p - tree.box_min[a]) / tree.size[a][:, None], 0.0, 1.0)
    lb = np.clip((p - tree.box_min[b]) / tree.size[b][:, None], 0.0, 1.0)
    return a, b, la, lb


def bc_loss(tree, volumes, pairs=None, Q=BC_POINTS, points=None, out=None, weight=1.0):
    """Mean L1 feature mismatch across shared faces of adjacent ACTIVE leaves.

    Both sides are evaluated with their own node's interpolation at ``Q x Q``
    midpoint-rule points per shared rectangle; the L1 norm over channels is
    averaged over points. ``points`` may carry a cached ``boundary_points``
    result; ``out`` and ``weight`` behave as in ``tv_loss``.
    """
    grads = {"features": np.zeros_like(volumes.data) if out is None else out}
    if points is None:
        if pairs is None:
            pairs = tree.neighbor_pairs()
        pairs = [p for p in pairs if tree.state[p[0]] == ACTIVE and tree.state[p[1]] == ACTIVE]
        points = boundary_points(tree, pairs, Q)
    a, b, la, lb = points
    if len(a) == 0:
        return 0.0, grads
    sa, sb = tree.slot[a], tree.slot[b]
    fa = field.gather(volumes, sa, la).astype(np.float64)
    fb = field.gather(volumes, sb, lb).astype(np.float64)
    d = fa - fb
    norm = len(d)
    value = float(np.sum(np.abs(d))) / norm
    s = (np.sign(d) * (weight / norm)).astype(volumes.dtype)
    field.scatter(grads["features"], sa, la, s)
    field.scatter(grads["features"], sb, lb, np.ascontiguousarray(-s))
    return value, grads


def total_loss(mse, tv, bc, weights):
    """Weighted sum and the separately logged terms."""
    total = mse + weights.lambda_tv * tv + weights.lambda_bc * bc
    return total, {"mse": mse, "tv": tv, "bc": bc, "total": total}
