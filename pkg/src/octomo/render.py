"""Image formation: ray integrals and the radiometric sensor model.

Predicted pixel values live in log-absorption space. For view ``v`` and
pixel ``p`` the model predicts::

    exp(e_v) * response(integral) + b_v

and compares it with the measured target ``y(p) + dB_v(p)``, where ``y`` is
the precomputed absorption ``B0(p) - I(p)`` and ``dB`` is a learnable
low-resolution correction of the reference image, bilinearly upsampled to the
detector. ``response`` is a monotone piecewise-linear curve on ``[0, x_max]``
(linearly extrapolated beyond) built from softplus-positive increments and
normalized so that ``response(x_max) = x_max``; equal increments give the
identity.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ConsistencyError, InputError
from .field import softplus

_IDENTITY_INCREMENT = float(np.log(np.expm1(1.0)))  # softplus^-1(1)


def integrate(batch, sigmas):
    """Per-ray sum of ``sigma * delta`` (scatter-add over samples)."""
    sigmas = np.asarray(sigmas)
    if len(sigmas) != batch.n_samples:
        raise ConsistencyError(f"{len(sigmas)} densities for {batch.n_samples} samples")
    return np.bincount(batch.ray, weights=sigmas * batch.delta, minlength=batch.n_rays)


class RadiometricModel:
    def __init__(self, n_views, detector_shape, x_max=1.0, n_knots=16, background_res=8,
                 per_view_background=False):
        if n_knots < 1 or background_res < 2:
            raise InputError("need n_knots >= 1 and background_res >= 2")
        self.n_views = n_views
        self.detector_shape = tuple(detector_shape)
        self.x_max = float(x_max)
        self.exposure = np.zeros(n_views)  # log-domain multiplier e_v
        self.bias = np.zeros(n_views)
        self.response = np.full(n_knots, _IDENTITY_INCREMENT)
        n_bg = n_views if per_view_background else 1
        self.background = np.zeros((n_bg, background_res, background_res))

    @property
    def n_knots(self):
        return len(self.response)

    @property
    def per_view_background(self):
        return self.background.shape[0] > 1

    def arrays(self):
        return {"exposure": self.exposure, "bias": self.bias, "response": self.response,
                "background": self.background}

    def load_arrays(self, d):
        self.exposure = np.array(d["exposure"], dtype=np.float64)
        self.bias = np.array(d["bias"], dtype=np.float64)
        self.response = np.array(d["response"], dtype=np.float64)
        self.background = np.array(d["background"], dtype=np.float64)

    def copy(self):
        m = RadiometricModel(self.n_views, self.detector_shape, self.x_max, self.n_knots,
                             self.background.shape[1], self.per_view_background)
        m.load_arrays({k: v.copy() for k, v in self.arrays().items()})
        return m

    # -- response curve ---------------------------------------------------

    def knot_values(self):
        """Curve values at the ``K + 1`` knot positions ``x_max * j / K``."""
        s = softplus(self.response)
        return self.x_max * np.concatenate([[0.0], np.cumsum(s)]) / s.sum()

    def _response_terms(self, x):
        K = self.n_knots
        s = softplus(self.response)
        S = s.sum()
        pos = x * (K / self.x_max)
        k = np.clip(np.floor(pos).astype(np.int64), 0, K - 1)
        frac = pos - k
        cum = np.concatenate([[0.0], np.cumsum(s)])
        P = cum[k] + s[k] * frac
        return s, S, k, frac, P

    def apply_response(self, x):
        x = np.asarray(x, dtype=np.float64)
        s, S, k, frac, P = self._response_terms(x)
        return self.x_max * P / S

    def response_vjp(self, x, g):
        """``(dL/dx, dL/dtheta)`` for upstream ``g = dL/dresponse(x)``."""
        K = self.n_knots
        s, S, k, frac, P = self._response_terms(x)
        g_x = g * K * s[k] / S
        # dr/ds_j = (x_max/S) (c_j - P/S) with c_j = 1 (j < k), frac (j == k), 0 otherwise
        above = np.bincount(k, weights=g, minlength=K)
        full = np.concatenate([np.cumsum(above[::-1])[::-1][1:], [0.0]])  # sum over rows with k > j
        at = np.bincount(k, weights=g * frac, minlength=K)
        g_s = (self.x_max / S) * (full + at) - (self.x_max / S ** 2) * np.sum(g * P)
        return g_x, g_s * expit(self.response)

    # -- background -------------------------------------------------------

    def _bg_weights(self, pixels):
        H, W = self.detector_shape
        R = self.background.shape[1]
        u = np.clip((pixels[:, 0] + 0.5) / W * R - 0.5, 0.0, R - 1.0)
        v = np.clip((pixels[:, 1] + 0.5) / H * R - 0.5, 0.0, R - 1.0)
        iu = np.minimum(np.floor(u).astype(np.int64), R - 2)
        iv = np.minimum(np.floor(v).astype(np.int64), R - 2)
        return iu, iv, u - iu, v - iv

    def background_at(self, view_ids, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        layer = np.asarray(view_ids) if self.per_view_background else np.zeros(len(pixels), dtype=np.int64)
        iu, iv, wu, wv = self._bg_weights(pixels)
        B = self.background
        return ((1 - wv) * ((1 - wu) * B[layer, iv, iu] + wu * B[layer, iv, iu + 1])
                + wv * ((1 - wu) * B[layer, iv + 1, iu] + wu * B[layer, iv + 1, iu + 1]))

    def background_vjp(self, view_ids, pixels, g):
        pixels = np.asarray(pixels, dtype=np.float64)
        layer = np.asarray(view_ids) if self.per_view_background else np.zeros(len(pixels), dtype=np.int64)
        iu, iv, wu, wv = self._bg_weights(pixels)
        n_bg, R, _ = self.background.shape
        out = np.zeros(n_bg * R * R)
        base = layer * R * R
        for dv, fv in ((0, 1 - wv), (1, wv)):
            for du, fu in ((0, 1 - wu), (1, wu)):
                idx = base + (iv + dv) * R + iu + du
                out += np.bincount(idx, weights=g * fv * fu, minlength=out.size)
        return out.reshape(self.background.shape)

    # -- full model -------------------------------------------------------

    def apply(self, integral, view_ids):
        """``exp(e_v) * response(integral) + b_v``."""
        view_ids = np.asarray(view_ids)
        return np.exp(self.exposure[view_ids]) * self.apply_response(integral) + self.bias[view_ids]

    def apply_vjp(self, integral, view_ids, g):
        """Gradients of ``<g, apply(integral, view_ids)>``.

        Returns ``(dL/dintegral, {"exposure", "bias", "response"})``.
        """
        view_ids = np.asarray(view_ids)
        gain = np.exp(self.exposure[view_ids])
        r = self.apply_response(integral)
        g_x, g_theta = self.response_vjp(integral, g * gain)
        n = self.n_views
        grads = {
            "exposure": np.bincount(view_ids, weights=g * gain * r, minlength=n),
            "bias": np.bincount(view_ids, weights=g, minlength=n),
            "response": g_theta,
        }
        return g_x, grads


def apply_radiometry(integral, model, view_id, pixel=None):
    """Predicted log-space value(s) for ray integral(s) of one view."""
    integral = np.atleast_1d(np.asarray(integral, dtype=np.float64))
    out = model.apply(integral, np.full(len(integral), view_id))
    return out if out.size > 1 else float(out[0])


def render_view(scene, view_id, pixel_subset=None, mode="uniform", radiometry=True, seed=0, epoch=0):
    """Render a full detector image (or only ``pixel_subset``, an ``(n, 2)`` array of ``(u, v)``)."""
    return scene.render_view(view_id, pixel_subset=pixel_subset, mode=mode, radiometry=radiometry,
                             seed=seed, epoch=epoch)
