"""Turn ray segments into weighted sample lists.

Each segment gets ``k = ceil(N * extent / diag)`` samples, placed at the
midpoints of ``k`` equal sub-intervals (UNIFORM, evaluation) or at one random
point per sub-interval (STRATIFIED, training). Integration weights are the
central-difference lengths between neighbouring sample midpoints, clamped to
the segment ends, so they telescope to the segment extent.

Stratified offsets come from a counter-based hash of
``(seed, epoch, ray id, node id, sample index)``: the draw for a sample never
depends on batch composition or evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, InputError

UNIFORM = "uniform"
STRATIFIED = "stratified"
MODES = (UNIFORM, STRATIFIED)

_K_TOL = 1e-9
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix(x):
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def stratified_key(seed, epoch, ray_id, node_id):
    """64-bit stream key for one (ray, segment, epoch)."""
    with np.errstate(over="ignore"):
        h = _mix(np.asarray(seed, dtype=np.uint64) + _GOLD)
        h = _mix(h ^ np.asarray(epoch, dtype=np.uint64))
        h = _mix(h ^ np.asarray(ray_id, dtype=np.int64).astype(np.uint64))
        return _mix(h ^ np.asarray(node_id, dtype=np.int64).astype(np.uint64))


def hash_unit(key, j):
    """Uniform in [0, 1) from a stream key and a counter."""
    with np.errstate(over="ignore"):
        h = _mix(np.asarray(key, dtype=np.uint64) + np.asarray(j, dtype=np.int64).astype(np.uint64) * _GOLD)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def sample_count(extent, node_diag, N):
    if N < 1:
        raise InputError("N must be >= 1")
    k = max(1, math.ceil(N * extent / node_diag - _K_TOL))
    if k > N:
        raise ConsistencyError(f"segment longer than its node diagonal ({extent} > {node_diag})")
    return k


def place_samples(t_start, t_end, k, mode=UNIFORM, key=0):
    if k < 1:
        raise InputError("k must be >= 1")
    h = (t_end - t_start) / k
    j = np.arange(k)
    if mode == UNIFORM:
        frac = np.full(k, 0.5)
    elif mode == STRATIFIED:
        frac = hash_unit(key, j)
    else:
        raise InputError(f"unknown sampling mode {mode!r}")
    return t_start + (j + frac) * h


def delta_weights(ts, t_start, t_end):
    ts = np.asarray(ts, dtype=np.float64)
    if len(ts) == 0:
        raise InputError("no samples")
    if np.any(np.diff(ts) <= 0):
        raise InputError("sample positions must be strictly increasing")
    if len(ts) == 1:
        return np.array([t_end - t_start])
    mid = 0.5 * (ts[:-1] + ts[1:])
    upper = np.append(mid, t_end)
    lower = np.insert(mid, 0, t_start)
    return upper - lower


@dataclass
class SampleBatch:
    """Flattened samples for a batch of rays.

    Segment arrays are indexed by segment; sample arrays by sample. ``frac``
    is each sample's relative position ``(j + u) / k`` inside its segment and
    ``weight_coef`` its ``delta / extent``; both are what the pose adjoint
    needs to move segment end points.
    """

    n_rays: int
    seg_ray: np.ndarray
    seg_node: np.ndarray
    seg_t0: np.ndarray
    seg_t1: np.ndarray
    seg_axis0: np.ndarray
    seg_axis1: np.ndarray
    seg_k: np.ndarray
    ray: np.ndarray
    node: np.ndarray
    seg: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    frac: np.ndarray
    weight_coef: np.ndarray
    local: np.ndarray

    @property
    def n_samples(self):
        return len(self.t)

    def take_rays(self, mask):
        """Sub-batch of the rays where ``mask`` is true (ray ids are renumbered)."""
        mask = np.asarray(mask, dtype=bool)
        new_id = np.cumsum(mask) - 1
        ks = mask[self.seg_ray]
        kp = mask[self.ray]
        seg_new = np.cumsum(ks) - 1
        return SampleBatch(
            int(mask.sum()), new_id[self.seg_ray[ks]], self.seg_node[ks], self.seg_t0[ks], self.seg_t1[ks],
            self.seg_axis0[ks], self.seg_axis1[ks], self.seg_k[ks],
            new_id[self.ray[kp]], self.node[kp], seg_new[self.seg[kp]], self.t[kp], self.delta[kp],
            self.frac[kp], self.weight_coef[kp], self.local[kp],
        )


def build_samples(tree, origins, directions, N, mode=UNIFORM, seed=0, epoch=0, ray_ids=None, backend=None):
    """Traverse and sample a batch of rays.

    ``ray_ids`` are global ray identifiers (view * pixels + pixel index) used
    to key stratified draws; default is the batch position.
    """
    if mode not in MODES:
        raise InputError(f"unknown sampling mode {mode!r}")
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    directions = np.ascontiguousarray(directions, dtype=np.float64)
    n_rays = len(origins)
    s_ray, s_node, t0, t1, ax0, ax1 = tree.traverse_batch(origins, directions, backend=backend)
    ext = t1 - t0
    diag = tree.size[s_node] * math.sqrt(3.0)
    k = np.maximum(np.ceil(N * ext / diag - _K_TOL), 1).astype(np.int64)
    if len(k) and k.max() > N:
        raise ConsistencyError("segment longer than its node diagonal")
    total = int(k.sum())
    seg = np.repeat(np.arange(len(k)), k)
    starts = np.cumsum(k) - k
    j = np.arange(total) - starts[seg]
    kk = k[seg]
    if mode == UNIFORM:
        u = np.full(total, 0.5)
    else:
        ids = np.arange(n_rays) if ray_ids is None else np.asarray(ray_ids, dtype=np.int64)
        key = stratified_key(seed, epoch, ids[s_ray], s_node)
        u = hash_unit(key[seg], j)
    frac = (j + u) / kk
    h = ext[seg] / kk
    t = t0[seg] + (j + u) * h

    # central-difference weights within each segment
    last = j == kk - 1
    first = j == 0
    t_next = np.zeros(total)
    t_next[:-1] = t[1:]
    t_prev = np.zeros(total)
    t_prev[1:] = t[:-1]
    upper = np.where(last, t1[seg], 0.5 * (t + t_next))
    lower = np.where(first, t0[seg], 0.5 * (t_prev + t))
    delta = upper - lower
    coef = np.where(ext[seg] > 0, delta / np.where(ext[seg] > 0, ext[seg], 1.0), 0.0)

    r = s_ray[seg]
    nodes = s_node[seg]
    x = origins[r] + t[:, None] * directions[r]
    local = np.clip((x - tree.box_min[nodes]) / tree.size[nodes][:, None], 0.0, 1.0)
    return SampleBatch(n_rays, s_ray, s_node, t0, t1, ax0, ax1, k, r, nodes, seg, t, delta, frac, coef, local)
