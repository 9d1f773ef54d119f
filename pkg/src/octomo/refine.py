"""Tree structure optimization: node error, budgeted split/merge planning,
empty-space culling and feature transfer.

The planner solves, exactly, a small combinatorial model on the current
tree. Every ACTIVE leaf may KEEP (error ``E``, one leaf) or SPLIT (error
``alpha * E``, eight leaves); an interior node whose eight children are all
ACTIVE leaves may MERGE them (error = sum of the children's errors, one
leaf). EMPTY leaves are kept as they are and do not count against the leaf
budget. The optimum over all combinations with at most ``T_max`` ACTIVE
leaves comes from a bottom-up min-plus dynamic program over
``(node, leaf count)``. Among equal-error plans the one with fewest
structural changes wins, then the one with fewest leaves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import field
from .errors import ConfigurationError, InputError
from .field import FeatureVolumes, vertex_grid
from .octree import ACTIVE, EMPTY, MAX_DEPTH, _OCTANT_BITS, _Builder

KEEP = 0
SPLIT = 1
MERGE = 2
ACTION_NAMES = {KEEP: "KEEP", SPLIT: "SPLIT", MERGE: "MERGE"}

_SUBDIVIDED = 3  # planner-internal: interior node left subdivided


class NodeErrorTable:
    """Per-node accumulators of ``sum(delta * residual^2)``, max density and visits."""

    def __init__(self, n_nodes):
        self.accum = np.zeros(n_nodes)
        self.sigma_max = np.zeros(n_nodes)
        self.visits = np.zeros(n_nodes, dtype=np.int64)

    @property
    def n_nodes(self):
        return len(self.accum)

    def reset(self, n_nodes=None):
        self.__init__(self.n_nodes if n_nodes is None else n_nodes)

    def errors(self, floor=0.0):
        """``E(n) = max(sigma_max, floor) * accum``."""
        return np.maximum(self.sigma_max, floor) * self.accum


def accumulate_error(table, batch, residuals, sigmas):
    """Add one batch: ``residuals`` per ray, ``sigmas`` per sample."""
    residuals = np.asarray(residuals, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if len(residuals) != batch.n_rays or len(sigmas) != batch.n_samples:
        raise InputError("residuals/densities do not match the batch")
    n = table.n_nodes
    table.accum += np.bincount(batch.node, weights=batch.delta * residuals[batch.ray] ** 2, minlength=n)
    np.maximum.at(table.sigma_max, batch.node, sigmas)
    table.visits += np.bincount(batch.node, minlength=n)
    return table


@dataclass
class TreePlan:
    """Planner output.

    ``action`` has one entry per node of the source tree: KEEP or SPLIT for
    ACTIVE leaves, MERGE for interior nodes whose children collapse, and -1
    everywhere else.
    """

    action: np.ndarray
    n_leaves: int
    predicted_error: float

    def nodes_with(self, action):
        return np.flatnonzero(self.action == action)


def _minplus(a, b):
    """``c[k] = min_i a[i] + b[k - i]`` and the minimizing ``i`` (lowest on ties)."""
    L = len(a)
    c = np.full(L, np.inf)
    arg = np.full(L, -1, dtype=np.int64)
    for i in np.flatnonzero(np.isfinite(a)):
        cand = a[i] + b[:L - i]
        better = cand < c[i:]
        c[i:][better] = cand[better]
        arg[i:][better] = i
    return c, arg


def plan_tree(tree, errors, T_max, alpha=0.25, depth_max=MAX_DEPTH):
    """Exact budgeted configuration for the split/keep/merge model described above."""
    if T_max < 1:
        raise ConfigurationError("leaf budget T_max must be >= 1")
    if not 0 <= alpha < 1:
        raise ConfigurationError("alpha must lie in [0, 1)")
    errors = np.asarray(errors, dtype=np.float64)
    if len(errors) != tree.n_nodes or np.any(errors < 0):
        raise InputError("need one nonnegative error per node")
    # tie-break toward fewer structural changes without affecting real optima
    eta = 1e-12 * (float(errors.sum()) + 1e-300)
    L = T_max + 1
    children = tree.children
    best = {}
    choice = {}
    args = {}

    order = np.argsort(-tree.depth, kind="stable")  # deepest first
    for n in order:
        n = int(n)
        tab = np.full(L, np.inf)
        ch = np.full(L, -1, dtype=np.int64)
        if children[n, 0] < 0:
            if tree.state[n] == EMPTY:
                tab[0] = errors[n]
                ch[0] = KEEP
            else:
                tab[1] = errors[n]
                ch[1] = KEEP
                if tree.depth[n] < depth_max and 8 < L:
                    s = alpha * errors[n] + eta
                    if s < tab[8]:
                        tab[8] = s
                        ch[8] = SPLIT
        else:
            kids = children[n]
            acc = best[int(kids[0])]
            steps = []
            for c in kids[1:]:
                acc, arg = _minplus(acc, best[int(c)])
                steps.append(arg)
            tab[:] = acc
            ch[np.isfinite(acc)] = _SUBDIVIDED
            args[n] = steps
            if np.all(children[kids, 0] < 0) and np.all(tree.state[kids] == ACTIVE):
                m = float(errors[kids].sum()) + eta
                if m < tab[1]:
                    tab[1] = m
                    ch[1] = MERGE
        best[n] = tab
        choice[n] = ch

    root = best[0]
    finite = np.flatnonzero(np.isfinite(root))
    if len(finite) == 0:
        raise ConfigurationError(f"no valid configuration fits {T_max} leaves")
    b = int(finite[np.argmin(root[finite])])  # argmin returns the smallest count on ties

    action = np.full(tree.n_nodes, -1, dtype=np.int64)
    total_err = 0.0
    stack = [(0, b)]
    while stack:
        n, k = stack.pop()
        c = int(choice[n][k])
        if c == _SUBDIVIDED:
            kids = children[n]
            for j in range(7, 0, -1):
                i = int(args[n][j - 1][k])
                stack.append((int(kids[j]), k - i))
                k = i
            stack.append((int(kids[0]), k))
        elif c == MERGE:
            action[n] = MERGE
            total_err += float(errors[children[n]].sum())
        elif c == SPLIT:
            action[n] = SPLIT
            total_err += alpha * errors[n]
        else:
            if tree.state[n] == ACTIVE:
                action[n] = KEEP
            total_err += errors[n]
    return TreePlan(action, b, total_err)


def plan_leaf_count(tree, plan):
    """Number of ACTIVE leaves the plan produces."""
    act = tree.active_leaves()
    n = len(act) + 7 * int(np.sum(plan.action == SPLIT)) - 7 * int(np.sum(plan.action == MERGE))
    return n


# --------------------------------------------------------------------------
# feature transfer

def _split_grids(grid):
    """Eight child grids resampled from one parent grid (octant order)."""
    G = grid.shape[0]
    vg = vertex_grid(G)
    out = []
    for c in range(8):
        local = ((_OCTANT_BITS[c] + vg) / 2).reshape(-1, 3)
        f = field.gather(FeatureVolumes(grid[None]), np.zeros(len(local), dtype=np.int64), local)
        out.append(f.reshape(grid.shape))
    return out


def _merge_grids(grids):
    """Parent grid resampled from eight child grids (octant order)."""
    G = grids[0].shape[0]
    p = vertex_grid(G).reshape(-1, 3)
    bits = (p >= 0.5).astype(np.int64)
    octant = bits[:, 0] | (bits[:, 1] << 1) | (bits[:, 2] << 2)
    local = np.clip(2 * p - bits, 0.0, 1.0)
    f = field.gather(FeatureVolumes(np.stack(grids)), octant, local)
    return f.reshape(grids[0].shape)


def transfer_features(tree, volumes, plan):
    """Build the planned tree and move features onto it.

    SPLIT children are trilinear resamplings of the parent grid; a MERGE
    parent resamples its children. Kept leaves (ACTIVE or EMPTY) keep their
    grids. Returns ``(new_tree, new_volumes, node_map)`` where ``node_map``
    sends every old node that survives to its new id (-1 otherwise).
    """
    b = _Builder()
    grids = []
    node_map = np.full(tree.n_nodes, -1, dtype=np.int64)

    def leaf_grid(n):
        return volumes.data[tree.slot[n]]

    def emit(new, grid):
        b.slot[new] = len(grids)
        grids.append(grid)

    stack = [(0, -1, -1)]  # (old node, new parent, octant)
    root_new = None
    while stack:
        n, parent_new, oct_ = stack.pop()
        if parent_new < 0:
            new = b.add(-1, 0, tree.box_min[0], state=tree.state[n])
            root_new = new
        else:
            new = b.children[parent_new][oct_]
            b.state[new] = tree.state[n]
        node_map[n] = new
        a = plan.action[n]
        if tree.children[n, 0] >= 0:
            if a == MERGE:
                b.state[new] = ACTIVE
                emit(new, _merge_grids([leaf_grid(c) for c in tree.children[n]]))
                continue
            b.split(new)
            for j in range(7, -1, -1):
                stack.append((int(tree.children[n, j]), new, j))
        elif a == SPLIT:
            kids = b.split(new)
            for k, g in zip(kids, _split_grids(leaf_grid(n))):
                emit(k, g)
        else:
            emit(new, leaf_grid(n))
    assert root_new == 0
    new_tree = b.finish()
    # slots follow node order so the tensor layout is canonical
    slots = np.array(new_tree.slot)
    leaves = np.flatnonzero(slots >= 0)
    data = np.stack([grids[slots[n]] for n in leaves]) if len(leaves) else volumes.data[:0]
    new_tree.slot[:] = -1
    new_tree.slot[leaves] = np.arange(len(leaves))
    new_tree.check_invariants()
    return new_tree, FeatureVolumes(data.astype(volumes.dtype)), node_map


# --------------------------------------------------------------------------
# culling

def leaf_max_density(tree, volumes, decoder, table=None, chunk=1 << 16):
    """Max decoded density over each leaf's lattice vertices (and observed samples)."""
    leaves = tree.leaves()
    G, F = volumes.G, volumes.F
    flat = volumes.data[tree.slot[leaves]].reshape(-1, F)
    sig = np.empty(len(flat))
    for s in range(0, len(flat), chunk):
        sig[s:s + chunk] = decoder.decode(flat[s:s + chunk])
    m = sig.reshape(len(leaves), G ** 3).max(axis=1)
    if table is not None and table.n_nodes == tree.n_nodes:
        m = np.maximum(m, table.sigma_max[leaves])
    out = np.zeros(tree.n_nodes)
    out[leaves] = m
    return out


def cull_empty(tree, volumes, decoder, tau_rel=0.01, table=None):
    """Mark leaves below ``tau_rel * global max`` EMPTY and re-activate the rest.

    Feature grids are untouched, so a leaf culled too early comes back as
    soon as its decoded density rises. Returns ``(n_culled, n_revived)``.
    """
    if tau_rel < 0:
        raise ConfigurationError("tau_rel must be >= 0")
    leaves = tree.leaves()
    if len(leaves) == 0:
        return 0, 0
    m = leaf_max_density(tree, volumes, decoder, table)
    thresh = tau_rel * m[leaves].max()
    low = m[leaves] < thresh
    was = tree.state[leaves]
    culled = leaves[low & (was == ACTIVE)]
    revived = leaves[~low & (was == EMPTY)]
    if len(culled):
        tree.set_state(culled, EMPTY)
    if len(revived):
        tree.set_state(revived, ACTIVE)
    return len(culled), len(revived)


# --------------------------------------------------------------------------
# trigger

def refinement_trigger(history, window=5, threshold=0.005, milestones=(), epoch=None):
    """Whether the loss curve has flattened (or a milestone epoch was reached).

    Compares the mean of the last ``window`` losses with the mean of the
    window one epoch earlier; a relative improvement below ``threshold``
    counts as converged.
    """
    if epoch is not None and epoch in set(milestones):
        return True
    h = np.asarray(history, dtype=np.float64)
    if window < 1 or len(h) < window + 1:
        return False
    now = h[-window:].mean()
    prev = h[-window - 1:-1].mean()
    if prev <= 0:
        return True
    return bool((prev - now) / prev < threshold)


def apply_refinement(scene, table, T_max, alpha=0.25, depth_max=MAX_DEPTH, tau_rel=0.01,
                     error_floor=0.0, cull=True):
    """Plan, rebuild and cull in one go; returns a summary dict."""
    before = len(scene.tree.active_leaves())
    errors = table.errors(error_floor) if table.n_nodes == scene.tree.n_nodes else np.zeros(scene.tree.n_nodes)
    plan = plan_tree(scene.tree, errors, T_max, alpha, depth_max)
    tree, volumes, node_map = transfer_features(scene.tree, scene.volumes, plan)
    new_table = NodeErrorTable(tree.n_nodes)
    keep = node_map >= 0
    new_table.sigma_max[node_map[keep]] = table.sigma_max[keep] if table.n_nodes == len(node_map) else 0.0
    scene.tree, scene.volumes = tree, volumes
    culled = revived = 0
    if cull:
        culled, revived = cull_empty(tree, volumes, scene.decoder, tau_rel, new_table)
    return {
        "leaves_before": before,
        "leaves_after": len(tree.active_leaves()),
        "split": int(np.sum(plan.action == SPLIT)),
        "merged": int(np.sum(plan.action == MERGE)),
        "culled": culled,
        "revived": revived,
        "predicted_error": float(plan.predicted_error),
    }
