"""Neural scene representation: per-leaf feature grids and the shared decoder.

Each grid leaf owns a ``G x G x G`` lattice of ``F``-channel features with
vertices at node-local coordinates ``j / (G - 1)``, so lattice points lie on
the node faces. Features for all grid leaves live in one tensor of shape
``(n_slots, G, G, G, F)`` indexed ``[slot, ix, iy, iz, channel]``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ConsistencyError, InputError, NumericError
from .octree import ACTIVE

HIDDEN = 64
# rows per decoder block: keeps the (rows, 64) activations cache resident
CHUNK = 512


def vertex_coords(G):
    """Local coordinates of the ``G`` lattice positions along one axis."""
    return np.arange(G) / (G - 1)


def vertex_grid(G):
    """Local coordinates of all lattice vertices, shape ``(G, G, G, 3)``."""
    c = vertex_coords(G)
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


class FeatureVolumes:
    def __init__(self, data):
        data = np.ascontiguousarray(data)
        if data.ndim != 5 or not (data.shape[1] == data.shape[2] == data.shape[3]) or data.shape[1] < 2:
            raise InputError(f"feature tensor must be (S, G, G, G, F) with G >= 2, got {data.shape}")
        self.data = data

    @classmethod
    def initialize(cls, n_slots, G, F, rng, std=0.01, mean=0.0, dtype=np.float64):
        data = rng.normal(mean, std, size=(n_slots, G, G, G, F)).astype(dtype)
        return cls(data)

    @property
    def G(self):
        return self.data.shape[1]

    @property
    def F(self):
        return self.data.shape[4]

    @property
    def n_slots(self):
        return self.data.shape[0]

    @property
    def dtype(self):
        return self.data.dtype

    def copy(self):
        return FeatureVolumes(self.data.copy())

    def grid(self, slot):
        return self.data[slot]


def interpolate(grid, local):
    """Trilinear blend of the 8 lattice vertices enclosing ``local`` in one grid."""
    local = np.asarray(local, dtype=np.float64)
    if local.shape != (3,) or np.any(local < 0.0) or np.any(local > 1.0):
        raise InputError(f"local coordinate {local} outside [0, 1]^3")
    grid = np.asarray(grid)
    G = grid.shape[0]
    g = local * (G - 1)
    i0 = np.clip(np.floor(g).astype(int), 0, G - 2)
    w = g - i0
    out = np.zeros(grid.shape[-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wt = (w[0] if dx else 1 - w[0]) * (w[1] if dy else 1 - w[1]) * (w[2] if dz else 1 - w[2])
                out += wt * grid[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return out


def gather(volumes, slots, local, backend=None):
    """Feature vector per sample via indirect (slot, local) lookup; input order kept."""
    k = backend or kernels
    return k.gather(volumes.data, np.ascontiguousarray(slots, dtype=np.int64),
                    np.ascontiguousarray(local, dtype=np.float64))


def gather_samples(batch, tree, volumes, backend=None):
    """``gather`` for a sample batch; every sample must sit in an ACTIVE leaf."""
    nodes = batch.node
    if len(nodes) and np.any(tree.state[nodes] != ACTIVE):
        raise ConsistencyError("sample refers to a node that is not ACTIVE")
    return gather(volumes, tree.slot[nodes], batch.local, backend)


def scatter(grad, slots, local, g, backend=None):
    """Adjoint of ``gather``: add ``g`` into the ``grad`` tensor (same shape as features)."""
    k = backend or kernels
    g = np.ascontiguousarray(g)
    return k.scatter(grad, np.ascontiguousarray(slots, dtype=np.int64),
                     np.ascontiguousarray(local, dtype=np.float64), g)


def gather_vjp_local(volumes, slots, local, g, backend=None):
    """Gradient of ``<g, gather(...)>`` with respect to the local coordinates."""
    k = backend or kernels
    return k.gather_vjp_local(volumes.data, np.ascontiguousarray(slots, dtype=np.int64),
                              np.ascontiguousarray(local, dtype=np.float64), np.ascontiguousarray(g))


# --------------------------------------------------------------------------
# decoder

def silu(x):
    return x * expit(x)


def _silu(z):
    """``(silu(z), sigmoid(z))`` through the fused kernel."""
    z = np.ascontiguousarray(z)
    h = np.empty_like(z)
    s = np.multiply(z, 0.5, dtype=z.dtype)
    np.tanh(s, out=s)
    kernels.silu_forward(z, h, s)
    return h, s


def softplus(x):
    return np.logaddexp(0.0, x)


class Decoder:
    """Shared map from feature vectors to positive density.

    ``kind="mlp"``: ``F -> 64 -> 64 -> 1`` with SiLU between layers and a
    SoftPlus output. ``kind="identity"``: SoftPlus of the single feature
    channel (no parameters), the no-decoder baseline.
    """

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, kind, params=None, n_features=None):
        if kind not in ("mlp", "identity"):
            raise InputError(f"unknown decoder kind {kind!r}")
        self.kind = kind
        self.params = dict(params or {})
        if kind == "identity":
            self.params = {}
            self.n_features = 1
        else:
            self.n_features = self.params["w1"].shape[0]

    @classmethod
    def mlp(cls, n_features, rng, hidden=HIDDEN, output_bias=-1.0, dtype=np.float64):
        def layer(fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
            return w, b

        w1, b1 = layer(n_features, hidden)
        w2, b2 = layer(hidden, hidden)
        w3, b3 = layer(hidden, 1)
        b3[:] = output_bias
        return cls("mlp", dict(w1=w1, b1=b1, w2=w2, b2=b2, w3=w3, b3=b3))

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def zeros(cls, n_features, hidden=HIDDEN, dtype=np.float64):
        p = dict(
            w1=np.zeros((n_features, hidden), dtype), b1=np.zeros(hidden, dtype),
            w2=np.zeros((hidden, hidden), dtype), b2=np.zeros(hidden, dtype),
            w3=np.zeros((hidden, 1), dtype), b3=np.zeros(1, dtype),
        )
        return cls("mlp", p)

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self):
        d = Decoder(self.kind, {k: v.copy() for k, v in self.params.items()})
        d.n_features = self.n_features
        return d

    def forward(self, f):
        """Density per row of ``f``; returns ``(sigma, cache)`` for ``backward``."""
        f = np.asarray(f)
        if f.ndim != 2 or f.shape[1] != self.n_features:
            raise InputError(f"expected features of width {self.n_features}, got {f.shape}")
        if self.kind == "identity":
            z = f[:, 0]
            return softplus(z), (f, z)
        sigma = np.empty(len(f), dtype=np.result_type(f.dtype, self.params["w1"].dtype))
        for a in range(0, len(f), CHUNK):
            sigma[a:a + CHUNK] = softplus(self._hidden(f[a:a + CHUNK])[-1])
        return sigma, (f,)

    def _hidden(self, f):
        p = self.params
        z1 = f @ p["w1"]
        z1 += p["b1"]
        h1, s1 = _silu(z1)
        z2 = h1 @ p["w2"]
        z2 += p["b2"]
        h2, s2 = _silu(z2)
        z3 = (h2 @ p["w3"])[:, 0] + p["b3"][0]
        return z1, h1, s1, z2, h2, s2, z3

    def __call__(self, f):
        return self.decode(f)

    def decode(self, f):
        f = np.asarray(f)
        if not np.all(np.isfinite(f)):
            raise NumericError("non-finite decoder input", stage="decode")
        return self.forward(f)[0]

    def backward(self, cache, g_sigma):
        """Gradients ``(dL/df, {param: dL/dparam})`` for upstream ``dL/dsigma``."""
        if self.kind == "identity":
            f, z = cache
            g_f = np.zeros_like(f)
            g_f[:, 0] = g_sigma * expit(z)
            return g_f, {}
        p = self.params
        (f,) = cache
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        g_f = np.empty(f.shape, dtype=np.result_type(f.dtype, p["w1"].dtype))
        for a in range(0, len(f), CHUNK):
            fc = f[a:a + CHUNK]
            z1, h1, s1, z2, h2, s2, z3 = self._hidden(fc)
            dt = h1.dtype
            g3 = (g_sigma[a:a + CHUNK] * expit(z3)).astype(dt)
            grads["w3"] += h2.T @ g3[:, None]
            grads["b3"] += g3.sum()
            gz2 = np.multiply(g3[:, None], p["w3"][:, 0][None, :])
            kernels.silu_backward(gz2, z2, s2)
            grads["w2"] += h1.T @ gz2
            grads["b2"] += gz2.sum(axis=0)
            gz1 = gz2 @ p["w2"].T
            kernels.silu_backward(gz1, z1, s1)
            grads["w1"] += fc.T @ gz1
            grads["b1"] += gz1.sum(axis=0)
            g_f[a:a + CHUNK] = gz1 @ p["w1"].T
        return g_f, grads

    def to_arrays(self):
        return dict(self.params)

    @classmethod
    def from_arrays(cls, kind, arrays):
        if kind == "identity":
            return cls.identity()
        return cls("mlp", {k: np.asarray(arrays[k]) for k in cls.PARAM_NAMES})
