import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octomo import kernels
from octomo.errors import ConfigurationError, ConsistencyError, InputError
from octomo.geometry import Ray, intersect_aabb_batch
from octomo.octree import ACTIVE, EMPTY, INTERIOR, SparseOctree

from conftest import random_rays


def adaptive_tree(seed, n_splits=6, max_depth=4):
    rng = np.random.default_rng(seed)
    tree = SparseOctree.build_uniform(1)
    for _ in range(n_splits):
        leaves = [n for n in tree.active_leaves() if tree.depth[n] < max_depth]
        tree.split(int(rng.choice(leaves)))
    tree.assign_slots()
    return tree


@pytest.mark.parametrize("depth,leaves", [(0, 1), (1, 8), (2, 64), (3, 512)])
def test_build_uniform_leaf_count(depth, leaves):
    tree = SparseOctree.build_uniform(depth)
    assert len(tree.active_leaves()) == leaves
    assert tree.check_invariants()


def test_depth3_edge_length():
    tree = SparseOctree.build_uniform(3)
    assert np.all(tree.size[tree.active_leaves()] == 1 / 8)


def test_depth_limit():
    with pytest.raises(ConfigurationError):
        SparseOctree.build_uniform(3, max_depth=2)
    with pytest.raises(ConfigurationError):
        SparseOctree.build_uniform(-1)


def test_children_partition_parent():
    tree = adaptive_tree(0)
    for n in np.flatnonzero(tree.state == INTERIOR):
        kids = tree.children[n]
        assert np.isclose(np.sum(tree.size[kids] ** 3), tree.size[n] ** 3)
        lo = tree.box_min[kids]
        assert np.all(lo >= tree.box_min[n]) and np.all(lo + tree.size[kids][:, None] <= tree.box_max[n] + 1e-15)
    assert tree.check_invariants()


def test_invariant_checker_catches_breakage():
    tree = SparseOctree.build_uniform(1)
    tree.state[0] = ACTIVE
    with pytest.raises(ConsistencyError):
        tree.check_invariants()


def test_axial_ray_two_segments():
    tree = SparseOctree.build_uniform(1)
    ray = Ray(np.array([-2.0, -0.25, -0.25]), np.array([1.0, 0, 0]), (0, 0), 0)
    segs = tree.traverse(ray)
    assert len(segs) == 2
    assert [s.t_end - s.t_start for s in segs] == [0.5, 0.5]
    assert segs[0].t_end == segs[1].t_start


def test_empty_leaf_is_skipped():
    tree = SparseOctree.build_uniform(1)
    ray = Ray(np.array([-2.0, -0.25, -0.25]), np.array([1.0, 0, 0]), (0, 0), 0)
    first = tree.traverse(ray)[0].node_id
    tree.set_state(first, EMPTY)
    segs = tree.traverse(ray)
    assert len(segs) == 1 and segs[0].node_id != first


def test_traversal_completeness_against_root_chord():
    # oracle: slab test on the root box only, 10^4 random rays
    tree = SparseOctree.build_uniform(3)
    rng = np.random.default_rng(0)
    o, d = random_rays(rng, 10_000, spread=0.6)
    r, _, t0, t1, _, _ = tree.traverse_batch(o, d)
    total = np.bincount(r, weights=t1 - t0, minlength=len(o))
    n0, n1 = intersect_aabb_batch(o, d)
    chord = np.maximum(n1 - n0, 0.0)
    assert np.max(np.abs(total - chord)) < 1e-9


def test_traversal_sorted_and_contiguous():
    tree = adaptive_tree(2)
    rng = np.random.default_rng(1)
    o, d = random_rays(rng, 2000)
    r, _, t0, t1, _, _ = tree.traverse_batch(o, d)
    same = r[1:] == r[:-1]
    assert np.all(t0[1:][same] > t0[:-1][same])
    assert np.max(np.abs(t0[1:][same] - t1[:-1][same])) < 1e-12


def test_batch_traversal_matches_reference_and_backends():
    tree = adaptive_tree(3)
    tree.set_state(tree.active_leaves()[:3], EMPTY)
    rng = np.random.default_rng(2)
    o, d = random_rays(rng, 300)
    out = {name: tree.traverse_batch(o, d, backend=mod) for name, mod in kernels.backends().items()}
    ref = out["python"]
    for name, got in out.items():
        for a, b in zip(ref, got):
            assert np.array_equal(a, b), name
    r, n, t0, t1 = ref[:4]
    for i in range(0, 300, 17):
        segs = tree.traverse(Ray(o[i], d[i], (0, 0), 0))
        m = r == i
        assert [s.node_id for s in segs] == list(n[m])
        assert np.allclose([s.t_start for s in segs], t0[m], atol=1e-15)


def test_locate_origin_goes_to_high_octant():
    tree = SparseOctree.build_uniform(1)
    node, local = tree.locate([0.0, 0.0, 0.0])
    assert node == tree.children[0, 7]
    assert np.array_equal(local, np.zeros(3))


def test_locate_leaf_centre():
    tree = adaptive_tree(4)
    for n in tree.active_leaves()[:10]:
        c = tree.box_min[n] + tree.size[n] / 2
        node, local = tree.locate(c)
        assert node == n and np.allclose(local, 0.5)


def test_locate_rejects_outside():
    with pytest.raises(InputError):
        SparseOctree.build_uniform(1).locate([0.6, 0, 0])


def test_locate_matches_brute_force_scan():
    # oracle: scan all leaf boxes with the half-open rule (closed on the +0.5 face)
    tree = adaptive_tree(5, n_splits=10)
    rng = np.random.default_rng(0)
    p = rng.uniform(-0.5, 0.5, (100_000, 3))
    p[:100] = np.round(p[:100] * 8) / 8  # exact boundaries
    nodes, _ = tree.locate_batch(p)
    leaves = tree.leaves()
    lo = tree.box_min[leaves]
    hi = lo + tree.size[leaves][:, None]
    inside = np.all((p[:, None] >= lo[None]) & ((p[:, None] < hi[None]) | ((hi[None] == 0.5) & (p[:, None] == 0.5))), axis=2)
    assert np.all(inside.sum(axis=1) == 1)
    assert np.array_equal(leaves[np.argmax(inside, axis=1)], nodes)


def test_neighbor_pairs_depth1_count():
    assert len(SparseOctree.build_uniform(1).neighbor_pairs()) == 12


def test_neighbor_pairs_one_split_octant():
    tree = SparseOctree.build_uniform(1)
    a = tree.children[0, 0]
    tree.split(a)
    tree.assign_slots()
    b = tree.children[0, 1]  # +x neighbour of octant 0
    across = [p for p in tree.neighbor_pairs() if b in p[:2] and tree.parent[p[0] if p[1] == b else p[1]] == a]
    assert len(across) == 4


def _brute_pairs(tree):
    act = tree.active_leaves()
    out = set()
    for i, a in enumerate(act):
        for b in act[i + 1:]:
            la, ha = tree.box_min[a], tree.box_max[a]
            lb, hb = tree.box_min[b], tree.box_max[b]
            for ax in range(3):
                touch = ha[ax] == lb[ax] or hb[ax] == la[ax]
                others = [k for k in range(3) if k != ax]
                overlap = all(min(ha[k], hb[k]) - max(la[k], lb[k]) > 0 for k in others)
                if touch and overlap:
                    out.add(frozenset((int(a), int(b))))
    return out


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_neighbor_pairs_match_brute_force(seed):
    tree = adaptive_tree(seed, n_splits=5, max_depth=3)
    got = {frozenset(p[:2]) for p in tree.neighbor_pairs()}
    assert got == _brute_pairs(tree)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_partition_property(seed):
    tree = adaptive_tree(seed, n_splits=4)
    p = np.random.default_rng(seed).uniform(-0.5, 0.5, (10_000, 3))
    nodes, _ = tree.locate_batch(p)
    assert np.all(tree.children[nodes, 0] < 0)
    lo = tree.box_min[nodes]
    assert np.all(p >= lo) and np.all(p <= lo + tree.size[nodes][:, None])


def test_arrays_roundtrip():
    tree = adaptive_tree(7)
    t2 = SparseOctree.from_arrays(tree.to_arrays())
    for k, v in tree.to_arrays().items():
        assert np.array_equal(v, t2.to_arrays()[k])


@pytest.mark.parametrize("name", sorted(kernels.backends()))
def test_ray_on_shared_faces_counted_once(name):
    tree = SparseOctree.build_uniform(2)
    o = np.array([[-2.0, 0.0, 0.0], [-2.0, 0.25, -0.25], [-2.0, 0.5, 0.5], [-2.0, -0.5, 0.1]])
    d = np.tile([1.0, 0.0, 0.0], (4, 1))
    ray, node, t0, t1, *_ = tree.traverse_batch(o, d, backend=kernels.backends()[name])
    assert np.allclose(np.bincount(ray, weights=t1 - t0, minlength=4), 1.0)
    assert np.bincount(ray, minlength=4).tolist() == [4, 4, 4, 4]
    for r in range(4):
        ref = tree.traverse(Ray(o[r], d[r], (0, 0), 0))
        assert [s.node_id for s in ref] == node[ray == r].tolist()
