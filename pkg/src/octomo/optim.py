"""Parameter groups and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, ConsistencyError

DEFAULT_LR = {"features": 1e-2, "decoder": 1e-3, "poses": 1e-4, "radiometry": 1e-3}


@dataclass
class ParamGroup:
    """Named arrays updated in place, with matching gradient buffers.

    ``frozen`` lists keys inside the group that never move (e.g. the
    radiometric parts that are switched off).
    """

    name: str
    params: dict
    lr: float
    enabled: bool = True
    frozen: set = field(default_factory=set)
    grads: dict = None

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigurationError("learning rate must be >= 0")
        if self.grads is None:
            self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        for k, v in self.params.items():
            if self.grads[k].shape != v.shape:
                raise ConfigurationError(f"gradient buffer for {self.name}.{k} has the wrong shape")

    def active_keys(self):
        if not self.enabled:
            return []
        return [k for k in self.params if k not in self.frozen]

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0


class Adam:
    """Bias-corrected Adam with one step counter per group.

    A group's counter only advances on steps where it is enabled, so a group
    unlocked late (pose calibration after warmup) starts with a proper
    first-step bias correction.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        self.groups = {g.name: g for g in groups}
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}
        for g in groups:
            self._init_state(g)

    def _init_state(self, g):
        self.m[g.name] = {k: np.zeros_like(v) for k, v in g.params.items()}
        self.v[g.name] = {k: np.zeros_like(v) for k, v in g.params.items()}
        self.t[g.name] = 0

    def reset_group(self, group):
        """Replace a group (new arrays after refinement) and zero its moments."""
        self.groups[group.name] = group
        self._init_state(group)

    def step(self):
        b1, b2 = self.beta1, self.beta2
        for name, g in self.groups.items():
            keys = g.active_keys()
            if not keys:
                continue
            self.t[name] += 1
            t = self.t[name]
            c1 = 1.0 - b1 ** t
            c2 = 1.0 - b2 ** t
            for k in keys:
                p = g.params[k]
                if not p.flags.c_contiguous:
                    raise ConsistencyError(f"parameter {name}.{k} must be C-contiguous for in-place updates")
                gr = np.ascontiguousarray(g.grads[k], dtype=p.dtype)
                kernels.adam_update(p.reshape(-1), gr.reshape(-1), self.m[name][k].reshape(-1),
                                    self.v[name][k].reshape(-1), b1, b2, g.lr, c1, c2, self.eps)

    def state_arrays(self):
        """Flat ``{name: array}`` view of the optimizer state (for checkpoints)."""
        out = {}
        for name in self.groups:
            out[f"{name}.t"] = np.array([self.t[name]], dtype=np.int64)
            for k in self.m[name]:
                out[f"{name}.{k}.m"] = self.m[name][k]
                out[f"{name}.{k}.v"] = self.v[name][k]
        return out

    def load_state_arrays(self, arrays):
        for name in self.groups:
            self.t[name] = int(arrays[f"{name}.t"][0])
            for k in self.m[name]:
                self.m[name][k][...] = arrays[f"{name}.{k}.m"]
                self.v[name][k][...] = arrays[f"{name}.{k}.v"]
