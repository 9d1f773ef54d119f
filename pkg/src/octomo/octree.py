"""Sparse octree over the reconstruction cube.

Nodes live in flat arrays indexed by node id. Octant ``c`` of a node has bit
``i`` set when that child lies on the high side of the parent's centre along
axis ``i`` (x, y, z), and points exactly on a splitting plane belong to the
high octant. Leaves that carry a feature grid have a non-negative ``slot``
into the feature tensor; EMPTY leaves keep their slot so that culling is
reversible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, ConsistencyError, InputError
from .geometry import BOX_MAX, BOX_MIN

INTERIOR, ACTIVE, EMPTY = 0, 1, 2
STATE_NAMES = {INTERIOR: "INTERIOR", ACTIVE: "ACTIVE", EMPTY: "EMPTY"}
MAX_DEPTH = 8
SEGMENT_EPS = 1e-9

_OCTANT_BITS = np.array([[(c >> k) & 1 for k in range(3)] for c in range(8)], dtype=np.float64)


@dataclass(frozen=True)
class OctreeNode:
    id: int
    parent: int | None
    children: tuple | None
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    depth: int
    state: int
    slot: int


@dataclass(frozen=True)
class RaySegment:
    node_id: int
    t_start: float
    t_end: float


@dataclass(frozen=True)
class FaceRect:
    """Axis-aligned rectangle shared by two face-adjacent leaves.

    ``axis`` is the face normal; ``lo``/``hi`` are the rectangle corners (equal
    along ``axis``).
    """

    axis: int
    lo: np.ndarray
    hi: np.ndarray

    @property
    def area(self):
        e = self.hi - self.lo
        return float(np.prod(np.delete(e, self.axis)))


class SparseOctree:
    def __init__(self, parent, children, depth, box_min, state, slot):
        self.parent = np.asarray(parent, dtype=np.int64)
        self.children = np.asarray(children, dtype=np.int64).reshape(-1, 8)
        self.depth = np.asarray(depth, dtype=np.int64)
        self.box_min = np.asarray(box_min, dtype=np.float64).reshape(-1, 3)
        self.state = np.asarray(state, dtype=np.int8)
        self.slot = np.asarray(slot, dtype=np.int64)
        self._kernel_arrays = None

    # -- construction -----------------------------------------------------

    @classmethod
    def build_uniform(cls, depth, max_depth=MAX_DEPTH):
        if depth < 0:
            raise ConfigurationError("depth must be >= 0")
        if depth > max_depth:
            raise ConfigurationError(f"depth {depth} exceeds the maximum tree depth {max_depth}")
        b = _Builder()
        root = b.add(-1, 0, BOX_MIN)
        frontier = [root]
        for _ in range(depth):
            nxt = []
            for n in frontier:
                nxt.extend(b.split(n))
            frontier = nxt
        tree = b.finish()
        tree.assign_slots()
        return tree

    def copy(self):
        return SparseOctree(self.parent.copy(), self.children.copy(), self.depth.copy(),
                            self.box_min.copy(), self.state.copy(), self.slot.copy())

    def split(self, node_id):
        """Subdivide an ACTIVE leaf into 8 ACTIVE children (slot -1); returns child ids.

        Meant for building test topologies; training refinement goes through
        the ``refine`` module, which also moves feature grids.
        """
        if not self.is_leaf(node_id):
            raise InputError(f"node {node_id} is not a leaf")
        if self.depth[node_id] >= MAX_DEPTH:
            raise ConfigurationError("maximum tree depth reached")
        n0 = self.n_nodes
        half = self.size_of(node_id) / 2
        ids = np.arange(n0, n0 + 8)
        self.parent = np.concatenate([self.parent, np.full(8, node_id)])
        self.children = np.concatenate([self.children, -np.ones((8, 8), dtype=np.int64)])
        self.depth = np.concatenate([self.depth, np.full(8, self.depth[node_id] + 1)])
        self.box_min = np.concatenate([self.box_min, self.box_min[node_id] + half * _OCTANT_BITS])
        self.state = np.concatenate([self.state, np.full(8, ACTIVE, dtype=np.int8)])
        self.slot = np.concatenate([self.slot, -np.ones(8, dtype=np.int64)])
        self.children[node_id] = ids
        self.state[node_id] = INTERIOR
        self.slot[node_id] = -1
        self._kernel_arrays = None
        return ids

    def assign_slots(self):
        """Number all non-interior leaves consecutively in node order."""
        leaves = self.leaves()
        self.slot[:] = -1
        self.slot[leaves] = np.arange(len(leaves))
        self._kernel_arrays = None

    def set_state(self, node_ids, state):
        node_ids = np.atleast_1d(node_ids)
        if np.any(self.children[node_ids, 0] >= 0):
            raise InputError("only leaves can be ACTIVE or EMPTY")
        self.state[node_ids] = state
        self._kernel_arrays = None

    # -- queries ----------------------------------------------------------

    @property
    def n_nodes(self):
        return len(self.parent)

    @property
    def size(self):
        """Edge length of every node's cube."""
        return np.ldexp(1.0, -self.depth)

    def size_of(self, node_id):
        return float(np.ldexp(1.0, -int(self.depth[node_id])))

    @property
    def box_max(self):
        return self.box_min + self.size[:, None]

    def diag(self):
        return self.size * np.sqrt(3.0)

    def is_leaf(self, node_id):
        return self.children[node_id, 0] < 0

    def leaves(self):
        return np.flatnonzero(self.children[:, 0] < 0)

    def active_leaves(self):
        return np.flatnonzero((self.children[:, 0] < 0) & (self.state == ACTIVE))

    def empty_leaves(self):
        return np.flatnonzero((self.children[:, 0] < 0) & (self.state == EMPTY))

    @property
    def n_slots(self):
        return int(self.slot.max(initial=-1)) + 1

    def slot_to_node(self):
        out = np.full(self.n_slots, -1, dtype=np.int64)
        has = self.slot >= 0
        out[self.slot[has]] = np.flatnonzero(has)
        return out

    def node(self, node_id):
        ch = self.children[node_id]
        return OctreeNode(
            id=int(node_id),
            parent=None if self.parent[node_id] < 0 else int(self.parent[node_id]),
            children=None if ch[0] < 0 else tuple(int(c) for c in ch),
            aabb_min=self.box_min[node_id].copy(),
            aabb_max=self.box_min[node_id] + self.size_of(node_id),
            depth=int(self.depth[node_id]),
            state=int(self.state[node_id]),
            slot=int(self.slot[node_id]),
        )

    def max_depth(self):
        return int(self.depth.max())

    def kernel_arrays(self):
        if self._kernel_arrays is None:
            self._kernel_arrays = (
                np.ascontiguousarray(self.children),
                np.ascontiguousarray(self.state),
                np.ascontiguousarray(self.box_min),
                np.ascontiguousarray(self.size),
            )
        return self._kernel_arrays

    # -- traversal --------------------------------------------------------

    def traverse(self, ray, eps=SEGMENT_EPS):
        """Segments of one ray through ACTIVE leaves, sorted by entry.

        Reference implementation (recursive descent with per-node slab
        tests); the batched path is ``traverse_batch``.
        """
        o = np.asarray(ray.origin, dtype=np.float64)
        d = np.asarray(ray.direction, dtype=np.float64)
        out = []

        def visit(n):
            hit = _slab(o, d, self.box_min[n], self.size_of(n))
            if hit is None or not hit[1] - hit[0] >= eps:
                return
            if self.children[n, 0] >= 0:
                for c in self.children[n]:
                    visit(c)
            elif self.state[n] == ACTIVE:
                out.append(RaySegment(int(n), hit[0], hit[1]))

        visit(0)
        out.sort(key=lambda s: s.t_start)
        return out

    def traverse_batch(self, origins, directions, eps=SEGMENT_EPS, backend=None):
        """Batched traversal; returns ``(ray, node, t0, t1, axis0, axis1)`` arrays."""
        k = backend or kernels
        return k.traverse(*self.kernel_arrays(), np.ascontiguousarray(origins, dtype=np.float64),
                          np.ascontiguousarray(directions, dtype=np.float64), eps)

    def locate(self, point):
        """Leaf containing ``point`` and the point's local coordinate in ``[0, 1]^3``."""
        nodes, local = self.locate_batch(np.asarray(point, dtype=np.float64)[None])
        return int(nodes[0]), local[0]

    def locate_batch(self, points):
        p = np.asarray(points, dtype=np.float64)
        if np.any(p < -0.5) or np.any(p > 0.5):
            raise InputError("point outside the reconstruction cube")
        node = np.zeros(len(p), dtype=np.int64)
        while True:
            inner = self.children[node, 0] >= 0
            if not inner.any():
                break
            idx = np.flatnonzero(inner)
            n = node[idx]
            centre = self.box_min[n] + (self.size[n] / 2)[:, None]
            bits = (p[idx] >= centre).astype(np.int64)
            octant = bits[:, 0] | (bits[:, 1] << 1) | (bits[:, 2] << 2)
            node[idx] = self.children[n, octant]
        local = np.clip((p - self.box_min[node]) / self.size[node][:, None], 0.0, 1.0)
        return node, local

    # -- adjacency --------------------------------------------------------

    def neighbor_pairs(self):
        """Unordered face-adjacent pairs of ACTIVE leaves with the shared rectangle.

        Each pair is reported once as ``(low_side, high_side, FaceRect)``. A
        leaf probes just across each face for a neighbour at least as large;
        equal-size neighbours are only looked for on the high side.
        """
        active = self.active_leaves()
        if len(active) == 0:
            return []
        offset = np.ldexp(1.0, -(self.max_depth() + 2))
        size = self.size[active]
        lo = self.box_min[active]
        centre = lo + size[:, None] / 2
        pairs = []
        for axis in range(3):
            for sign in (1, -1):
                probe = centre.copy()
                probe[:, axis] = lo[:, axis] + (size if sign > 0 else 0.0) + sign * offset
                inside = (probe[:, axis] > -0.5) & (probe[:, axis] < 0.5)
                idx = np.flatnonzero(inside)
                if len(idx) == 0:
                    continue
                nb, _ = self.locate_batch(probe[idx])
                mine = active[idx]
                d_me = self.depth[mine]
                d_nb = self.depth[nb]
                ok = (self.children[nb, 0] < 0) & (self.state[nb] == ACTIVE)
                ok &= (d_nb <= d_me) if sign > 0 else (d_nb < d_me)
                for i in np.flatnonzero(ok):
                    a, b = (mine[i], nb[i]) if sign > 0 else (nb[i], mine[i])
                    j = idx[i]
                    rlo = lo[j].copy()
                    rhi = lo[j] + size[j]
                    face = lo[j, axis] + (size[j] if sign > 0 else 0.0)
                    rlo[axis] = rhi[axis] = face
                    pairs.append((int(a), int(b), FaceRect(axis, rlo, rhi)))
        pairs.sort(key=lambda t: (t[0], t[1]))
        return pairs

    # -- validation / serialization ----------------------------------------

    def check_invariants(self):
        ch = self.children
        inner = ch[:, 0] >= 0
        if np.any(inner & (self.state != INTERIOR)):
            raise ConsistencyError("interior node not marked INTERIOR")
        if np.any(~inner & (self.state == INTERIOR)):
            raise ConsistencyError("leaf marked INTERIOR")
        for n in np.flatnonzero(inner):
            kids = ch[n]
            if np.any(kids < 0) or np.any(self.parent[kids] != n):
                raise ConsistencyError(f"node {n} has an incomplete child set")
            expect = self.box_min[n] + self.size_of(n) / 2 * _OCTANT_BITS
            if not np.array_equal(self.box_min[kids], expect) or np.any(self.depth[kids] != self.depth[n] + 1):
                raise ConsistencyError(f"children of node {n} do not partition it")
        leaves = self.leaves()
        vol = float(np.sum(self.size[leaves] ** 3))
        if abs(vol - 1.0) > 1e-12:
            raise ConsistencyError("leaf volumes do not sum to the root volume")
        if np.any(self.slot[self.state == ACTIVE] < 0):
            raise ConsistencyError("ACTIVE leaf without a feature slot")
        return True

    def to_arrays(self):
        return {
            "parent": self.parent,
            "children": self.children,
            "depth": self.depth,
            "box_min": self.box_min,
            "state": self.state,
            "slot": self.slot,
        }

    @classmethod
    def from_arrays(cls, a):
        t = cls(a["parent"], a["children"], a["depth"], a["box_min"], a["state"], a["slot"])
        t.check_invariants()
        return t

    def __repr__(self):
        return (f"SparseOctree(nodes={self.n_nodes}, active={len(self.active_leaves())}, "
                f"empty={len(self.empty_leaves())}, max_depth={self.max_depth()})")


class _Builder:
    """List-backed incremental construction of a tree."""

    def __init__(self):
        self.parent, self.children, self.depth, self.box_min = [], [], [], []
        self.state, self.slot = [], []

    def add(self, parent, depth, box_min, state=ACTIVE, slot=-1):
        self.parent.append(parent)
        self.children.append([-1] * 8)
        self.depth.append(depth)
        self.box_min.append(np.asarray(box_min, dtype=np.float64))
        self.state.append(state)
        self.slot.append(slot)
        return len(self.parent) - 1

    def split(self, n):
        half = np.ldexp(1.0, -(self.depth[n] + 1))
        ids = [self.add(n, self.depth[n] + 1, self.box_min[n] + half * _OCTANT_BITS[c]) for c in range(8)]
        self.children[n] = ids
        self.state[n] = INTERIOR
        self.slot[n] = -1
        return ids

    def finish(self):
        return SparseOctree(self.parent, self.children, self.depth, np.array(self.box_min),
                            self.state, self.slot)


def _slab(o, d, bmin, size):
    lo = hi = 0.0
    for k in range(3):
        bmax = bmin[k] + size
        if d[k] == 0.0:
            if bmin[k] <= o[k] and (o[k] < bmax or o[k] == bmax == BOX_MAX[k]):
                lk, hk = -np.inf, np.inf
            else:
                return None
        else:
            ta = (bmin[k] - o[k]) / d[k]
            tb = (bmax - o[k]) / d[k]
            lk, hk = (ta, tb) if ta < tb else (tb, ta)
        if k == 0:
            lo, hi = lk, hk
        else:
            lo = max(lo, lk)
            hi = min(hi, hk)
    return max(lo, 0.0), hi
