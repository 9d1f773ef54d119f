"""Reverse-mode gradients for the fixed rendering pipeline.

``forward`` records every intermediate of one ray batch on a ``Tape``;
``backward`` walks the stages in reverse with hand-written adjoints:

    rays -> traverse/sample -> gather -> decode -> integrate -> radiometry

Pose gradients flow through sample positions (``x = o + t d``) and through
the segment end points, which are slab-plane crossings
``t = (plane - o_a) / d_a``; sample counts and node assignments are
piecewise constant and contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import field
from .errors import InputError, NumericError
from .render import integrate
from .sampler import STRATIFIED


@dataclass
class Tape:
    view_ids: np.ndarray
    pixels: np.ndarray
    targets: np.ndarray
    origins: np.ndarray
    directions: np.ndarray
    ray_cache: tuple
    batch: object
    slots: np.ndarray
    features: np.ndarray
    decoder_cache: tuple
    sigma: np.ndarray
    integral: np.ndarray
    predicted: np.ndarray
    background: np.ndarray

    @property
    def residual(self):
        """``predicted - (target + background correction)`` per ray."""
        return self.predicted - (self.targets + self.background)


def _check(x, stage):
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values", stage=stage)


def forward(scene, view_ids, pixels, targets, mode=STRATIFIED, seed=0, epoch=0):
    view_ids = np.asarray(view_ids, dtype=np.int64)
    pixels = np.asarray(pixels, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if not len(view_ids) == len(pixels) == len(targets):
        raise InputError("view ids, pixels and targets must align")
    batch, o, d, cache = scene.sample(view_ids, pixels, mode, seed, epoch)
    slots = scene.tree.slot[batch.node]
    f = field.gather_samples(batch, scene.tree, scene.volumes)
    _check(f, "gather")
    sigma, dcache = scene.decoder.forward(f)
    _check(sigma, "decode")
    sigma = sigma.astype(np.float64)
    integral = integrate(batch, sigma)
    rad = scene.radiometry
    predicted = rad.apply(integral, view_ids)
    _check(predicted, "radiometry")
    bg = rad.background_at(view_ids, pixels)
    return Tape(view_ids, pixels, targets, o, d, cache, batch, slots, f, dcache, sigma, integral,
                predicted, bg)


def zero_grads(scene):
    """Gradient buffers shaped like every parameter, grouped like ``ParamGroup``s."""
    rad = scene.radiometry
    return {
        "features": {"features": np.zeros_like(scene.volumes.data)},
        "decoder": {k: np.zeros_like(v) for k, v in scene.decoder.params.items()},
        "poses": {"rotation": np.zeros_like(scene.geometry.delta_rot),
                  "translation": np.zeros_like(scene.geometry.delta_trans)},
        "radiometry": {k: np.zeros_like(v) for k, v in rad.arrays().items()},
    }


def backward(scene, tape, g_residual, grads, enabled=("features", "decoder")):
    """Accumulate ``dL/dparam`` into ``grads`` given ``g_residual = dL/dresidual``.

    ``enabled`` lists the groups (``features``, ``decoder``, ``poses``) and
    radiometric parts (``exposure``, ``bias``, ``response``, ``background``)
    whose buffers are written; everything else stays untouched.
    """
    enabled = set(enabled)
    g = np.asarray(g_residual, dtype=np.float64)
    _check(g, "loss")
    rad = scene.radiometry
    batch = tape.batch

    if "background" in enabled:
        grads["radiometry"]["background"] += rad.background_vjp(tape.view_ids, tape.pixels, -g)
    g_int, rgrads = rad.apply_vjp(tape.integral, tape.view_ids, g)
    for k in ("exposure", "bias", "response"):
        if k in enabled:
            grads["radiometry"][k] += rgrads[k]
    _check(g_int, "radiometry")

    need_f = enabled & {"features", "poses"}
    need = need_f or "decoder" in enabled
    if not need or batch.n_samples == 0:
        return grads
    g_sigma = g_int[batch.ray] * batch.delta
    g_f, dgrads = scene.decoder.backward(tape.decoder_cache, g_sigma)
    _check(g_f, "decode")
    if "decoder" in enabled:
        for k, v in dgrads.items():
            grads["decoder"][k] += v
    if "features" in enabled:
        field.scatter(grads["features"]["features"], tape.slots, batch.local,
                      g_f.astype(scene.volumes.dtype, copy=False))
    if "poses" in enabled:
        g_rot, g_trans = _pose_backward(scene, tape, g_int, g_f)
        _check(g_rot, "pose")
        grads["poses"]["rotation"] += g_rot
        grads["poses"]["translation"] += g_trans
    return grads


def _pose_backward(scene, tape, g_int, g_f):
    batch = tape.batch
    tree = scene.tree
    d = tape.directions
    n_rays = batch.n_rays

    g_local = field.gather_vjp_local(scene.volumes, tape.slots, batch.local,
                                     g_f.astype(scene.volumes.dtype, copy=False))
    g_x = g_local / tree.size[batch.node][:, None]
    r = batch.ray
    g_t = np.sum(g_x * d[r], axis=1)
    g_delta = g_int[r] * tape.sigma

    g_o = np.zeros((n_rays, 3))
    g_d = np.zeros((n_rays, 3))
    for k in range(3):
        g_o[:, k] = np.bincount(r, weights=g_x[:, k], minlength=n_rays)
        g_d[:, k] = np.bincount(r, weights=g_x[:, k] * batch.t, minlength=n_rays)

    # samples -> segment end points: t = t0 + frac (t1 - t0), delta = coef (t1 - t0)
    n_seg = len(batch.seg_t0)
    s = batch.seg
    g_t0 = np.bincount(s, weights=g_t * (1.0 - batch.frac) - g_delta * batch.weight_coef, minlength=n_seg)
    g_t1 = np.bincount(s, weights=g_t * batch.frac + g_delta * batch.weight_coef, minlength=n_seg)

    # end points -> rays: t = (plane - o_a) / d_a
    sr = batch.seg_ray
    for t_end, axis, g_end in ((batch.seg_t0, batch.seg_axis0, g_t0), (batch.seg_t1, batch.seg_axis1, g_t1)):
        ok = axis >= 0
        a = axis[ok].astype(np.int64)
        rr = sr[ok]
        da = d[rr, a]
        ge = g_end[ok]
        idx = rr * 3 + a
        g_o.ravel()[:] += np.bincount(idx, weights=-ge / da, minlength=3 * n_rays)
        g_d.ravel()[:] += np.bincount(idx, weights=-ge * t_end[ok] / da, minlength=3 * n_rays)

    return scene.geometry.rays_vjp(tape.ray_cache, g_o, g_d)
