"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on the same inputs under both backends; the table reports
the best wall time of ``--repeat`` runs and the speedup, and checks that the
two backends agree.
"""

import argparse
import json
import time

import numpy as np

from octomo import kernels
from octomo.field import FeatureVolumes
from octomo.geometry import Geometry, fit_intrinsics, make_circular_trajectory
from octomo.octree import SparseOctree
from octomo.scene import pixel_grid


def _rays(n_views, width):
    intr = fit_intrinsics(width, width, 2.0)
    geo = Geometry(make_circular_trajectory(n_views, 2 * np.pi, 2.0, intr), intr)
    px = pixel_grid(intr.shape)
    vid = np.repeat(np.arange(n_views), len(px))
    o, d, _ = geo.rays(vid, np.tile(px, (n_views, 1)))
    return np.ascontiguousarray(o), np.ascontiguousarray(d)


def cases(seed=0):
    rng = np.random.default_rng(seed)
    tree = SparseOctree.build_uniform(3, 8)
    o, d = _rays(2, 64)
    karr = tree.kernel_arrays()
    vols = FeatureVolumes.initialize(tree.n_slots, 9, 8, rng, dtype=np.float32)
    n = 200_000
    slots = rng.integers(0, tree.n_slots, n).astype(np.int64)
    local = rng.uniform(0, 1, (n, 3))
    g = rng.normal(size=(n, 8)).astype(np.float32)
    volume = rng.uniform(0, 1, (48, 48, 48))
    z = rng.normal(size=(50_000, 64)).astype(np.float32)

    def silu(mod):
        h = np.empty_like(z)
        s = np.tanh(0.5 * z)
        mod.silu_forward(z, h, s)
        gg = np.ones_like(z)
        mod.silu_backward(gg, z, s)
        return h, gg

    tv_slots = np.arange(tree.n_slots, dtype=np.int64)
    tv_scale = np.full(tree.n_slots, 0.125)

    def tv(mod):
        grad = np.zeros_like(vols.data)
        return mod.tv_grid(vols.data, tv_slots, tv_scale, grad, 1e-3), grad

    p0 = rng.normal(size=vols.data.size).astype(np.float32)
    pg = rng.normal(size=p0.size).astype(np.float32)

    def adam(mod):
        p, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
        for _ in range(3):
            mod.adam_update(p, pg, m, v, 0.9, 0.999, 1e-2, 0.1, 0.001, 1e-8)
        return p

    def scatter(mod):
        out = np.zeros_like(vols.data)
        mod.scatter(out, slots, local, g)
        return out

    return {
        "traverse (512 leaves, 8k rays)": lambda m: m.traverse(*karr, o, d, 1e-9)[2],
        "gather (200k samples, G=9, F=8)": lambda m: m.gather(vols.data, slots, local),
        "scatter (200k samples)": scatter,
        "march (48^3 volume, 8k rays)": lambda m: m.march(volume, o, d, 0.5 / 48),
        "march_adjoint (48^3, 8k rays)": lambda m: m.march_adjoint(volume.shape, o, d, 0.5 / 48,
                                                                   np.ones(len(o))),
        "silu fwd+bwd (50k x 64)": silu,
        "tv_grid (512 grids, G=9, F=8)": tv,
        "adam x3 (3M float32 params)": adam,
    }


def _time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def _agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(x, float) - np.asarray(y, float)), initial=0.0))
               for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    mods = kernels.backends()
    if "cython" not in mods:
        print("compiled backend unavailable; only the numpy fallback can be timed")
    rows = []
    for name, fn in cases().items():
        row = {"kernel": name}
        outs = {}
        for b, mod in mods.items():
            row[b], outs[b] = _time(lambda: fn(mod), args.repeat)
        if "cython" in mods:
            row["speedup"] = row["python"] / row["cython"]
            row["max_abs_diff"] = _agree(outs["python"], outs["cython"])
        rows.append(row)
    print(f"{'kernel':<34}{'numpy s':>10}{'cython s':>10}{'speedup':>9}{'max|diff|':>11}")
    for r in rows:
        print(f"{r['kernel']:<34}{r['python']:>10.4f}{r.get('cython', np.nan):>10.4f}"
              f"{r.get('speedup', np.nan):>9.1f}{r.get('max_abs_diff', np.nan):>11.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
