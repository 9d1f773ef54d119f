"""Vectorized numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``OCTOMO_PURE_PYTHON=1``.
Arithmetic mirrors the compiled kernels operation by operation so both
backends agree to rounding (usually bit-for-bit).
"""

import numpy as np

_RAY_CHUNK = 512
_POINT_CHUNK = 1 << 16
_ROOT_MAX = 0.5


def _slab(o, d, bmin, bmax):
    # o, d: (R, 1, 3); bmin, bmax: (1, L, 3)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ta = (bmin - o) / d
        tb = (bmax - o) / d
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    par = d == 0.0
    if par.any():
        # half-open cells so a ray lying on a shared face belongs to one side
        inside = (o >= bmin) & ((o < bmax) | ((o == bmax) & (bmax == _ROOT_MAX)))
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    ax0 = np.argmax(lo, axis=-1)
    ax1 = np.argmin(hi, axis=-1)
    tn = np.take_along_axis(lo, ax0[..., None], -1)[..., 0]
    tf = np.take_along_axis(hi, ax1[..., None], -1)[..., 0]
    clipped = tn < 0.0
    tn = np.where(clipped, 0.0, tn)
    ax0 = np.where(clipped, -1, ax0)
    return tn, tf, ax0, ax1


def traverse(children, state, box_min, size, origins, directions, eps):
    """Segments of every ray through ACTIVE leaves, ray-major and sorted by entry.

    Brute force over all active leaves in ray chunks; returns
    ``(ray, node, t0, t1, axis0, axis1)`` with ``axis0 = -1`` when the entry
    was clipped at ``t = 0``.
    """
    leaves = np.flatnonzero((children[:, 0] < 0) & (state == 1))
    bmin = box_min[leaves][None]
    bmax = (box_min[leaves] + size[leaves][:, None])[None]
    outs = []
    n = len(origins)
    for s in range(0, n, _RAY_CHUNK):
        o = origins[s:s + _RAY_CHUNK, None, :]
        d = directions[s:s + _RAY_CHUNK, None, :]
        tn, tf, a0, a1 = _slab(o, d, bmin, bmax)
        r, l = np.nonzero(tf - tn >= eps)
        if len(r) == 0:
            continue
        t0 = tn[r, l]
        order = np.lexsort((t0, r))
        r, l = r[order], l[order]
        outs.append((r + s, leaves[l], tn[r, l], tf[r, l], a0[r, l], a1[r, l]))
    if not outs:
        e = np.empty(0)
        ei = np.empty(0, dtype=np.int64)
        return ei, ei.copy(), e, e.copy(), np.empty(0, np.int8), np.empty(0, np.int8)
    cols = list(zip(*outs))
    return (
        np.concatenate(cols[0]).astype(np.int64),
        np.concatenate(cols[1]).astype(np.int64),
        np.concatenate(cols[2]),
        np.concatenate(cols[3]),
        np.concatenate(cols[4]).astype(np.int8),
        np.concatenate(cols[5]).astype(np.int8),
    )


def _corners(G, local):
    g = local * (G - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, G - 2)
    w = g - i0
    return i0, w


def gather(features, slots, local):
    """Trilinear lookup of per-sample feature vectors ``(n, F)`` from ``(S, G, G, G, F)`` grids."""
    S, G, _, _, F = features.shape
    flat = features.reshape(-1, F)
    n = len(slots)
    out = np.empty((n, F), dtype=features.dtype)
    for s in range(0, n, _POINT_CHUNK):
        sl = slots[s:s + _POINT_CHUNK]
        i0, w = _corners(G, local[s:s + _POINT_CHUNK])
        base = ((sl * G + i0[:, 0]) * G + i0[:, 1]) * G + i0[:, 2]
        wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
        acc = np.zeros((len(sl), F), dtype=np.float64)
        for dx in (0, 1):
            fx = wx if dx else 1.0 - wx
            for dy in (0, 1):
                fy = wy if dy else 1.0 - wy
                for dz in (0, 1):
                    fz = wz if dz else 1.0 - wz
                    idx = base + (dx * G + dy) * G + dz
                    acc += (fx * fy * fz)[:, None] * flat[idx]
        out[s:s + _POINT_CHUNK] = acc
    return out


def scatter(grad_features, slots, local, g):
    """Adjoint of ``gather``: accumulate ``g (n, F)`` into ``grad_features`` in place."""
    S, G, _, _, F = grad_features.shape
    flat = grad_features.reshape(-1, F)
    total = flat.shape[0]
    n = len(slots)
    for s in range(0, n, _POINT_CHUNK):
        sl = slots[s:s + _POINT_CHUNK]
        gs = g[s:s + _POINT_CHUNK]
        i0, w = _corners(G, local[s:s + _POINT_CHUNK])
        base = ((sl * G + i0[:, 0]) * G + i0[:, 1]) * G + i0[:, 2]
        wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
        for dx in (0, 1):
            fx = wx if dx else 1.0 - wx
            for dy in (0, 1):
                fy = wy if dy else 1.0 - wy
                for dz in (0, 1):
                    fz = wz if dz else 1.0 - wz
                    idx = base + (dx * G + dy) * G + dz
                    wt = fx * fy * fz
                    for c in range(F):
                        flat[:, c] += np.bincount(idx, weights=wt * gs[:, c], minlength=total).astype(flat.dtype)
    return grad_features


def gather_vjp_local(features, slots, local, g):
    """Gradient of ``sum(g * gather(features, slots, local))`` with respect to ``local``."""
    S, G, _, _, F = features.shape
    flat = features.reshape(-1, F)
    n = len(slots)
    out = np.empty((n, 3))
    for s in range(0, n, _POINT_CHUNK):
        sl = slots[s:s + _POINT_CHUNK]
        gs = g[s:s + _POINT_CHUNK]
        i0, w = _corners(G, local[s:s + _POINT_CHUNK])
        base = ((sl * G + i0[:, 0]) * G + i0[:, 1]) * G + i0[:, 2]
        wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
        acc = np.zeros((len(sl), 3))
        for dx in (0, 1):
            fx, gx = (wx, 1.0) if dx else (1.0 - wx, -1.0)
            for dy in (0, 1):
                fy, gy = (wy, 1.0) if dy else (1.0 - wy, -1.0)
                for dz in (0, 1):
                    fz, gz = (wz, 1.0) if dz else (1.0 - wz, -1.0)
                    idx = base + (dx * G + dy) * G + dz
                    proj = np.sum(flat[idx] * gs, axis=1)
                    acc[:, 0] += gx * fy * fz * proj
                    acc[:, 1] += fx * gy * fz * proj
                    acc[:, 2] += fx * fy * gz * proj
        out[s:s + _POINT_CHUNK] = acc * (G - 1)
    return out


def _march_setup(shape, origins, directions, step):
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ta = (-0.5 - o) / d
        tb = (0.5 - o) / d
    lo = np.where(d == 0.0, np.where(np.abs(o) <= 0.5, -np.inf, np.inf), np.minimum(ta, tb))
    hi = np.where(d == 0.0, np.where(np.abs(o) <= 0.5, np.inf, -np.inf), np.maximum(ta, tb))
    tn = np.maximum(lo.max(axis=1), 0.0)
    tf = hi.min(axis=1)
    hit = tf > tn
    m = np.where(hit, np.ceil((tf - tn) / step), 0).astype(np.int64)
    m = np.where(hit, np.maximum(m, 1), 0)
    h = np.where(hit, (tf - tn) / np.maximum(m, 1), 0.0)
    return o, d, tn, m, h


def _march_points(shape, o, d, tn, m, h, rays):
    counts = m[rays]
    total = int(counts.sum())
    ray_of = np.repeat(rays, counts)
    starts = np.cumsum(counts) - counts
    j = np.arange(total) - np.repeat(starts, counts)
    t = tn[ray_of] + (j + 0.5) * h[ray_of]
    x = o[ray_of] + t[:, None] * d[ray_of]
    dims = np.array(shape, dtype=np.float64)
    g = (x + 0.5) * dims - 0.5
    g = np.clip(g, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(g).astype(np.int64), np.array(shape) - 2)
    w = g - i0
    return ray_of, i0, w


def march(volume, origins, directions, step):
    """Line integrals through a voxel volume ``[x, y, z]`` with trilinear sampling.

    Midpoint rule on ``ceil(chord / step)`` equal sub-steps; edge values are
    held constant up to the cube boundary and density is zero outside.
    """
    vol = np.ascontiguousarray(volume)
    shape = vol.shape
    o, d, tn, m, h = _march_setup(shape, origins, directions, step)
    out = np.zeros(len(o))
    flat = vol.reshape(-1)
    rays = np.flatnonzero(m > 0)
    per = max(1, _POINT_CHUNK * 4 // max(1, int(m.max(initial=1))))
    for s in range(0, len(rays), per):
        rr = rays[s:s + per]
        ray_of, i0, w = _march_points(shape, o, d, tn, m, h, rr)
        val = np.zeros(len(ray_of))
        for dx in (0, 1):
            fx = w[:, 0] if dx else 1.0 - w[:, 0]
            for dy in (0, 1):
                fy = w[:, 1] if dy else 1.0 - w[:, 1]
                for dz in (0, 1):
                    fz = w[:, 2] if dz else 1.0 - w[:, 2]
                    idx = ((i0[:, 0] + dx) * shape[1] + i0[:, 1] + dy) * shape[2] + i0[:, 2] + dz
                    val += fx * fy * fz * flat[idx]
        out += np.bincount(ray_of, weights=val * h[ray_of], minlength=len(o))
    return out


def march_adjoint(shape, origins, directions, step, values):
    """Transpose of ``march``: back-project per-ray ``values`` into a volume."""
    o, d, tn, m, h = _march_setup(shape, origins, directions, step)
    total = int(np.prod(shape))
    acc = np.zeros(total)
    rays = np.flatnonzero(m > 0)
    per = max(1, _POINT_CHUNK * 4 // max(1, int(m.max(initial=1))))
    for s in range(0, len(rays), per):
        rr = rays[s:s + per]
        ray_of, i0, w = _march_points(shape, o, d, tn, m, h, rr)
        base = values[ray_of] * h[ray_of]
        for dx in (0, 1):
            fx = w[:, 0] if dx else 1.0 - w[:, 0]
            for dy in (0, 1):
                fy = w[:, 1] if dy else 1.0 - w[:, 1]
                for dz in (0, 1):
                    fz = w[:, 2] if dz else 1.0 - w[:, 2]
                    idx = ((i0[:, 0] + dx) * shape[1] + i0[:, 1] + dy) * shape[2] + i0[:, 2] + dz
                    acc += np.bincount(idx, weights=fx * fy * fz * base, minlength=total)
    return acc.reshape(shape)


def silu_forward(z, h, s):
    """On entry ``s`` holds ``tanh(z / 2)``; on exit ``s = sigmoid(z)``, ``h = z * s``."""
    s *= 0.5
    s += 0.5
    np.multiply(z, s, out=h)


def silu_backward(g, z, s):
    """In place: ``g *= s * (1 + z * (1 - s))``."""
    t = 1.0 - s
    t *= z
    t += 1.0
    t *= s
    g *= t


def tv_grid(data, slots, scale, grad, grad_scale):
    """Sum of ``scale * |forward difference|`` over the lattice axes of ``slots``;
    adds ``grad_scale`` times its subgradient into ``grad``."""
    total = 0.0
    for s0 in range(0, len(slots), 64):
        sl = slots[s0:s0 + 64]
        grid = data[sl].astype(np.float64)
        w = scale[s0:s0 + 64].reshape(-1, 1, 1, 1, 1)
        g = np.zeros(grid.shape)
        for ax in (1, 2, 3):
            d = np.diff(grid, axis=ax)
            total += float(np.sum(np.abs(d) * w))
            sg = np.sign(d) * w
            hi = [slice(None)] * 5
            lo = [slice(None)] * 5
            hi[ax] = slice(1, None)
            lo[ax] = slice(None, -1)
            g[tuple(hi)] += sg
            g[tuple(lo)] -= sg
        grad[sl] += (g * grad_scale).astype(grad.dtype)
    return total


def adam_update(p, g, m, v, beta1, beta2, lr, c1, c2, eps):
    """One in-place Adam update of flat arrays (bias corrections ``c1``, ``c2``)."""
    g = g.astype(np.float64)
    mi = beta1 * m + (1.0 - beta1) * g
    vi = beta2 * v + (1.0 - beta2) * g * g
    m[...] = mi
    v[...] = vi
    p[...] = p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
