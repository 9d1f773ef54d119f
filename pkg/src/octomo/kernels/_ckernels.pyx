# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: octree traversal, indirect trilinear gather/scatter,
the voxel ray-march projector and the decoder activations. Signatures match
``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, fabs, sqrt, INFINITY
from libc.stdlib cimport malloc, realloc, free

cnp.import_array()

ctypedef fused real:
    float
    double

ctypedef fused real2:
    float
    double

cdef struct Seg:
    long long ray
    long long node
    double t0
    double t1
    signed char a0
    signed char a1


cdef inline bint _slab(const double* o, const double* d, const double* bmin, double size,
                       double* tn, double* tf, signed char* a0, signed char* a1) noexcept nogil:
    cdef double lo = 0.0, hi = 0.0, lk, hk, ta, tb, bmax
    cdef signed char alo = 0, ahi = 0
    cdef int k
    for k in range(3):
        bmax = bmin[k] + size
        if d[k] == 0.0:
            # half-open cells so a ray lying on a shared face belongs to one side
            if o[k] >= bmin[k] and (o[k] < bmax or (o[k] == bmax and bmax == 0.5)):
                lk = -INFINITY
                hk = INFINITY
            else:
                lk = INFINITY
                hk = -INFINITY
        else:
            ta = (bmin[k] - o[k]) / d[k]
            tb = (bmax - o[k]) / d[k]
            if ta < tb:
                lk = ta
                hk = tb
            else:
                lk = tb
                hk = ta
        if k == 0:
            lo = lk
            hi = hk
        else:
            if lk > lo:
                lo = lk
                alo = k
            if hk < hi:
                hi = hk
                ahi = k
    if lo < 0.0:
        lo = 0.0
        alo = -1
    tn[0] = lo
    tf[0] = hi
    a0[0] = alo
    a1[0] = ahi
    return True


def traverse(const long long[:, ::1] children, const signed char[::1] state,
             const double[:, ::1] box_min, const double[::1] size,
             const double[:, ::1] origins, const double[:, ::1] directions, double eps):
    """Top-down descent per ray; segments of ACTIVE leaves sorted by entry."""
    cdef Py_ssize_t n_rays = origins.shape[0]
    cdef Py_ssize_t cap = 1024, count = 0, r, start, i, j
    cdef Seg* buf = <Seg*> malloc(cap * sizeof(Seg))
    cdef Seg tmp
    cdef long long stack[128]
    cdef int sp
    cdef long long node
    cdef double tn, tf
    cdef signed char a0, a1
    cdef int c
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for r in range(n_rays):
                start = count
                sp = 0
                stack[sp] = 0
                sp += 1
                while sp > 0:
                    sp -= 1
                    node = stack[sp]
                    _slab(&origins[r, 0], &directions[r, 0], &box_min[node, 0], size[node],
                          &tn, &tf, &a0, &a1)
                    if not (tf - tn >= eps):
                        continue
                    if children[node, 0] >= 0:
                        for c in range(8):
                            stack[sp] = children[node, c]
                            sp += 1
                    elif state[node] == 1:
                        if count == cap:
                            cap *= 2
                            buf = <Seg*> realloc(buf, cap * sizeof(Seg))
                            if buf == NULL:
                                with gil:
                                    raise MemoryError()
                        buf[count].ray = r
                        buf[count].node = node
                        buf[count].t0 = tn
                        buf[count].t1 = tf
                        buf[count].a0 = a0
                        buf[count].a1 = a1
                        count += 1
                # insertion sort of this ray's segments by entry
                for i in range(start + 1, count):
                    tmp = buf[i]
                    j = i - 1
                    while j >= start and buf[j].t0 > tmp.t0:
                        buf[j + 1] = buf[j]
                        j -= 1
                    buf[j + 1] = tmp
        ray = np.empty(count, dtype=np.int64)
        nodes = np.empty(count, dtype=np.int64)
        t0 = np.empty(count)
        t1 = np.empty(count)
        ax0 = np.empty(count, dtype=np.int8)
        ax1 = np.empty(count, dtype=np.int8)
        _copy_segs(buf, count, ray, nodes, t0, t1, ax0, ax1)
    finally:
        free(buf)
    return ray, nodes, t0, t1, ax0, ax1


cdef void _copy_segs(Seg* buf, Py_ssize_t count, long long[::1] ray, long long[::1] nodes,
                     double[::1] t0, double[::1] t1, signed char[::1] ax0, signed char[::1] ax1) noexcept:
    cdef Py_ssize_t i
    for i in range(count):
        ray[i] = buf[i].ray
        nodes[i] = buf[i].node
        t0[i] = buf[i].t0
        t1[i] = buf[i].t1
        ax0[i] = buf[i].a0
        ax1[i] = buf[i].a1


cdef inline void _corner_setup(int G, const double* loc, Py_ssize_t* i0, double* w) noexcept nogil:
    cdef int k
    cdef double g
    cdef Py_ssize_t ii
    for k in range(3):
        g = loc[k] * (G - 1)
        ii = <Py_ssize_t> floor(g)
        if ii < 0:
            ii = 0
        if ii > G - 2:
            ii = G - 2
        i0[k] = ii
        w[k] = g - ii


def gather(real[:, :, :, :, ::1] features, const long long[::1] slots, const double[:, ::1] local):
    cdef Py_ssize_t n = slots.shape[0], i, c
    cdef int G = features.shape[1], F = features.shape[4]
    cdef Py_ssize_t i0[3]
    cdef double w[3]
    cdef double fx, fy, fz, wt
    cdef int dx, dy, dz
    cdef double* acc = <double*> malloc(F * sizeof(double))
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, F), dtype=dtype)
    cdef real[:, ::1] o = out
    cdef long long s
    try:
        with nogil:
            for i in range(n):
                s = slots[i]
                _corner_setup(G, &local[i, 0], i0, w)
                for c in range(F):
                    acc[c] = 0.0
                for dx in range(2):
                    fx = w[0] if dx else 1.0 - w[0]
                    for dy in range(2):
                        fy = w[1] if dy else 1.0 - w[1]
                        for dz in range(2):
                            fz = w[2] if dz else 1.0 - w[2]
                            wt = fx * fy * fz
                            for c in range(F):
                                acc[c] += wt * features[s, i0[0] + dx, i0[1] + dy, i0[2] + dz, c]
                for c in range(F):
                    o[i, c] = <real> acc[c]
    finally:
        free(acc)
    return out


def scatter(real[:, :, :, :, ::1] grad_features, const long long[::1] slots,
            const double[:, ::1] local, real2[:, ::1] g):
    cdef Py_ssize_t n = slots.shape[0], i, c
    cdef int G = grad_features.shape[1], F = grad_features.shape[4]
    cdef Py_ssize_t i0[3]
    cdef double w[3]
    cdef double fx, fy, fz, wt
    cdef int dx, dy, dz
    cdef long long s
    with nogil:
        for i in range(n):
            s = slots[i]
            _corner_setup(G, &local[i, 0], i0, w)
            for dx in range(2):
                fx = w[0] if dx else 1.0 - w[0]
                for dy in range(2):
                    fy = w[1] if dy else 1.0 - w[1]
                    for dz in range(2):
                        fz = w[2] if dz else 1.0 - w[2]
                        wt = fx * fy * fz
                        for c in range(F):
                            grad_features[s, i0[0] + dx, i0[1] + dy, i0[2] + dz, c] += <real> (wt * g[i, c])
    return np.asarray(grad_features)


def gather_vjp_local(real[:, :, :, :, ::1] features, const long long[::1] slots,
                     const double[:, ::1] local, real2[:, ::1] g):
    cdef Py_ssize_t n = slots.shape[0], i, c
    cdef int G = features.shape[1], F = features.shape[4]
    cdef Py_ssize_t i0[3]
    cdef double w[3]
    cdef double fx, fy, fz, gx, gy, gz, proj, ax, ay, az
    cdef int dx, dy, dz
    cdef long long s
    out = np.empty((n, 3))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            s = slots[i]
            _corner_setup(G, &local[i, 0], i0, w)
            ax = 0.0
            ay = 0.0
            az = 0.0
            for dx in range(2):
                if dx:
                    fx = w[0]
                    gx = 1.0
                else:
                    fx = 1.0 - w[0]
                    gx = -1.0
                for dy in range(2):
                    if dy:
                        fy = w[1]
                        gy = 1.0
                    else:
                        fy = 1.0 - w[1]
                        gy = -1.0
                    for dz in range(2):
                        if dz:
                            fz = w[2]
                            gz = 1.0
                        else:
                            fz = 1.0 - w[2]
                            gz = -1.0
                        proj = 0.0
                        for c in range(F):
                            proj = proj + features[s, i0[0] + dx, i0[1] + dy, i0[2] + dz, c] * g[i, c]
                        ax = ax + gx * fy * fz * proj
                        ay = ay + fx * gy * fz * proj
                        az = az + fx * fy * gz * proj
            o[i, 0] = ax * (G - 1)
            o[i, 1] = ay * (G - 1)
            o[i, 2] = az * (G - 1)
    return out


cdef inline bint _cube_hit(const double* o, const double* d, double* tn_out, double* tf_out) noexcept nogil:
    cdef double lo = -INFINITY, hi = INFINITY, ta, tb, lk, hk
    cdef int k
    for k in range(3):
        if d[k] == 0.0:
            if o[k] >= -0.5 and o[k] <= 0.5:
                lk = -INFINITY
                hk = INFINITY
            else:
                lk = INFINITY
                hk = -INFINITY
        else:
            ta = (-0.5 - o[k]) / d[k]
            tb = (0.5 - o[k]) / d[k]
            lk = ta if ta < tb else tb
            hk = tb if ta < tb else ta
        if lk > lo:
            lo = lk
        if hk < hi:
            hi = hk
    if lo < 0.0:
        lo = 0.0
    tn_out[0] = lo
    tf_out[0] = hi
    return hi > lo


cdef inline void _voxel_corner(const Py_ssize_t* shape, const double* x,
                               Py_ssize_t* i0, double* w) noexcept nogil:
    cdef int k
    cdef double g
    cdef Py_ssize_t ii
    for k in range(3):
        g = (x[k] + 0.5) * shape[k] - 0.5
        if g < 0.0:
            g = 0.0
        if g > shape[k] - 1.0:
            g = shape[k] - 1.0
        ii = <Py_ssize_t> floor(g)
        if ii > shape[k] - 2:
            ii = shape[k] - 2
        i0[k] = ii
        w[k] = g - ii


def march(real[:, :, ::1] volume, const double[:, ::1] origins,
          const double[:, ::1] directions, double step):
    cdef Py_ssize_t n = origins.shape[0], r, j, m
    cdef Py_ssize_t shape[3]
    shape[0] = volume.shape[0]
    shape[1] = volume.shape[1]
    shape[2] = volume.shape[2]
    cdef double tn, tf, h, t, val, fx, fy, fz, acc
    cdef double x[3]
    cdef double w[3]
    cdef Py_ssize_t i0[3]
    cdef int dx, dy, dz, k
    out = np.zeros(n)
    cdef double[::1] o = out
    with nogil:
        for r in range(n):
            if not _cube_hit(&origins[r, 0], &directions[r, 0], &tn, &tf):
                continue
            m = <Py_ssize_t> ceil((tf - tn) / step)
            if m < 1:
                m = 1
            h = (tf - tn) / m
            acc = 0.0
            for j in range(m):
                t = tn + (j + 0.5) * h
                for k in range(3):
                    x[k] = origins[r, k] + t * directions[r, k]
                _voxel_corner(shape, x, i0, w)
                val = 0.0
                for dx in range(2):
                    fx = w[0] if dx else 1.0 - w[0]
                    for dy in range(2):
                        fy = w[1] if dy else 1.0 - w[1]
                        for dz in range(2):
                            fz = w[2] if dz else 1.0 - w[2]
                            val = val + fx * fy * fz * volume[i0[0] + dx, i0[1] + dy, i0[2] + dz]
                acc = acc + val * h
            o[r] = acc
    return out


def march_adjoint(shape_in, const double[:, ::1] origins, const double[:, ::1] directions,
                  double step, const double[::1] values):
    cdef Py_ssize_t n = origins.shape[0], r, j, m
    cdef Py_ssize_t shape[3]
    shape[0] = shape_in[0]
    shape[1] = shape_in[1]
    shape[2] = shape_in[2]
    cdef double tn, tf, h, t, fx, fy, fz, base
    cdef double x[3]
    cdef double w[3]
    cdef Py_ssize_t i0[3]
    cdef int dx, dy, dz, k
    out = np.zeros((shape[0], shape[1], shape[2]))
    cdef double[:, :, ::1] acc = out
    with nogil:
        for r in range(n):
            if not _cube_hit(&origins[r, 0], &directions[r, 0], &tn, &tf):
                continue
            m = <Py_ssize_t> ceil((tf - tn) / step)
            if m < 1:
                m = 1
            h = (tf - tn) / m
            base = values[r] * h
            for j in range(m):
                t = tn + (j + 0.5) * h
                for k in range(3):
                    x[k] = origins[r, k] + t * directions[r, k]
                _voxel_corner(shape, x, i0, w)
                for dx in range(2):
                    fx = w[0] if dx else 1.0 - w[0]
                    for dy in range(2):
                        fy = w[1] if dy else 1.0 - w[1]
                        for dz in range(2):
                            fz = w[2] if dz else 1.0 - w[2]
                            acc[i0[0] + dx, i0[1] + dy, i0[2] + dz] += fx * fy * fz * base
    return out


def silu_forward(real[:, ::1] z, real[:, ::1] h, real[:, ::1] s):
    """Finish ``silu``: on entry ``s`` holds ``tanh(z / 2)`` (numpy's vectorized
    tanh beats scalar libm exp); on exit ``s = sigmoid(z)`` and ``h = z * s``."""
    cdef Py_ssize_t i, n = z.shape[0] * z.shape[1]
    cdef real half = 0.5
    if n == 0:
        return
    cdef real *zp = &z[0, 0]
    cdef real *hp = &h[0, 0]
    cdef real *sp = &s[0, 0]
    with nogil:
        for i in range(n):
            sp[i] = half * sp[i] + half
            hp[i] = zp[i] * sp[i]


def silu_backward(real[:, ::1] g, real[:, ::1] z, real[:, ::1] s):
    """In place: ``g *= s * (1 + z * (1 - s))`` (derivative of ``z * sigmoid(z)``)."""
    cdef Py_ssize_t i, n = g.shape[0] * g.shape[1]
    cdef real one = 1
    if n == 0:
        return
    cdef real *gp = &g[0, 0]
    cdef real *zp = &z[0, 0]
    cdef real *sp = &s[0, 0]
    with nogil:
        for i in range(n):
            gp[i] = gp[i] * sp[i] * (one + zp[i] * (one - sp[i]))


cdef inline double _tv_edge(real* p, real* gp, Py_ssize_t a, Py_ssize_t b, double w, double g) noexcept nogil:
    cdef double d = <double>p[b] - <double>p[a]
    cdef double sg = g * ((d > 0) - (d < 0))
    gp[b] += <real>sg
    gp[a] -= <real>sg
    return w * fabs(d)


def tv_grid(real[:, :, :, :, ::1] data, const long long[::1] slots, const double[::1] scale,
            real[:, :, :, :, ::1] grad, double grad_scale):
    """Sum of ``scale * |forward difference|`` over the three lattice axes of the
    listed slots; adds ``grad_scale`` times its subgradient into ``grad``."""
    cdef Py_ssize_t n = slots.shape[0], a, i, j, k, c, idx
    cdef Py_ssize_t G = data.shape[1], F = data.shape[4]
    cdef Py_ssize_t sz = F, sy = G * F, sx = G * G * F
    cdef double w, g, total = 0.0
    cdef real* p
    cdef real* gp
    if n == 0:
        return 0.0
    with nogil:
        for a in range(n):
            p = &data[slots[a], 0, 0, 0, 0]
            gp = &grad[slots[a], 0, 0, 0, 0]
            w = scale[a]
            g = w * grad_scale
            for i in range(G):
                for j in range(G):
                    for k in range(G):
                        idx = i * sx + j * sy + k * sz
                        for c in range(F):
                            if i + 1 < G:
                                total += _tv_edge(p, gp, idx + c, idx + c + sx, w, g)
                            if j + 1 < G:
                                total += _tv_edge(p, gp, idx + c, idx + c + sy, w, g)
                            if k + 1 < G:
                                total += _tv_edge(p, gp, idx + c, idx + c + sz, w, g)
    return total


def adam_update(real[::1] p, const real[::1] g, real[::1] m, real[::1] v, double beta1, double beta2,
                double lr, double c1, double c2, double eps):
    """One in-place Adam update of flat arrays (bias corrections ``c1``, ``c2``)."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi, mi, vi
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = <real>mi
            v[i] = <real>vi
            p[i] = <real>(p[i] - lr * (mi / c1) / (sqrt(vi / c2) + eps))
