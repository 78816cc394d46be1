"""View-direction encoding and the two shared MLP heads.

Both heads are plain ReLU perceptrons with hand-written reverse passes.
Layer counts follow the usual convention of counting neuron layers, so the
density head is ``m -> 64 -> 16`` and the radiance head ``31 -> 64 -> 64 -> 3``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError

SH_DIM = 16
GEO_DIM = 15
HIDDEN = 64
DENSITY_CLAMP = 15.0

_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
_C1 = 0.4886025119029199  # sqrt(3 / (4 pi))
_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)
_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
       0.3731763325901154, 1.445305721320277)


def sh_encode(d) -> np.ndarray:
    """Real spherical harmonics of bands 0..3 at unit directions.

    Ordered by (l, m) with m = -l..l; no Condon-Shortley phase:

        Y00 = 0.28209479
        Y1m = 0.48860251 * (y, z, x)
        Y2m = 1.09254843 * (xy, yz), 0.31539157 * (3z^2 - 1),
              1.09254843 * xz, 0.54627422 * (x^2 - y^2)
        Y3m = 0.59004359 * y(3x^2 - y^2), 2.89061144 * xyz,
              0.45704580 * y(5z^2 - 1), 0.37317633 * z(5z^2 - 3),
              0.45704580 * x(5z^2 - 1), 1.44530572 * z(x^2 - y^2),
              0.59004359 * x(x^2 - 3y^2)

    Accepts a single 3-vector or an (n, 3) array; directions are renormalized.
    """
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    d = d.reshape(-1, 3)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise DomainError("cannot encode a zero direction")
    x, y, z = (d / norm).T
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((len(d), SH_DIM))
    out[:, 0] = _C0
    out[:, 1] = _C1 * y
    out[:, 2] = _C1 * z
    out[:, 3] = _C1 * x
    out[:, 4] = _C2[0] * x * y
    out[:, 5] = _C2[0] * y * z
    out[:, 6] = _C2[1] * (3 * zz - 1)
    out[:, 7] = _C2[0] * x * z
    out[:, 8] = _C2[2] * (xx - yy)
    out[:, 9] = _C3[0] * y * (3 * xx - yy)
    out[:, 10] = _C3[1] * x * y * z
    out[:, 11] = _C3[2] * y * (5 * zz - 1)
    out[:, 12] = _C3[3] * z * (5 * zz - 3)
    out[:, 13] = _C3[2] * x * (5 * zz - 1)
    out[:, 14] = _C3[4] * z * (xx - yy)
    out[:, 15] = _C3[0] * x * (xx - 3 * yy)
    return out[0] if single else out


class Mlp:
    """Fully connected ReLU network without output activation.

    ``weights[k]`` has shape (in, out); ``grads`` mirrors ``params``.
    """

    def __init__(self, widths, dtype=np.float32, rng: np.random.Generator | None = None):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise DomainError("an MLP needs at least an input and an output width")
        self.dtype = np.dtype(dtype)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            W = np.zeros((fan_in, fan_out), dtype=self.dtype)
            if rng is not None:
                limit = math.sqrt(6.0 / fan_in)
                W[:] = rng.uniform(-limit, limit, W.shape)
            self.weights.append(W)
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))
        self.weight_grads = [np.zeros_like(W) for W in self.weights]
        self.bias_grads = [np.zeros_like(b) for b in self.biases]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @property
    def grads(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weight_grads, self.bias_grads):
            out += [W, b]
        return out

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def zero_grad(self) -> None:
        for g in self.grads:
            g[:] = 0

    def forward(self, x, return_cache: bool = False):
        h = np.asarray(x, dtype=self.dtype)
        if h.shape[-1] != self.widths[0]:
            raise DomainError(f"expected input width {self.widths[0]}, got {h.shape[-1]}")
        acts = [h]
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W
            h += b
            if k < last:
                np.maximum(h, 0, out=h)
            acts.append(h)
        return (h, acts) if return_cache else h

    __call__ = forward

    def backward(self, acts, grad_out, input_from: int = 0) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. input
        columns ``input_from:``."""
        g = np.asarray(grad_out, dtype=self.dtype)
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                g = g * (acts[k + 1] > 0)
            self.weight_grads[k] += acts[k].T @ g
            self.bias_grads[k] += g.sum(axis=0)
            W = self.weights[k] if k else self.weights[0][input_from:]
            g = g @ W.T
        return g


def density_mlp(input_dim: int, dtype=np.float32, rng=None) -> Mlp:
    return Mlp([input_dim, HIDDEN, 1 + GEO_DIM], dtype, rng)


def radiance_mlp(dtype=np.float32, rng=None) -> Mlp:
    return Mlp([SH_DIM + GEO_DIM, HIDDEN, HIDDEN, 3], dtype, rng)


def density_head(mlp: Mlp, feat, return_cache: bool = False):
    """Features -> (sigma, geometry features); sigma = exp(clamp(raw, +-15))."""
    feat = np.asarray(feat)
    single = feat.ndim == 1
    raw, acts = mlp.forward(np.atleast_2d(feat), return_cache=True)
    if raw.shape[1] != 1 + GEO_DIM:
        raise DomainError("density head must output 16 values")
    sigma = np.exp(np.clip(raw[:, 0], -DENSITY_CLAMP, DENSITY_CLAMP))
    geo = raw[:, 1:]
    if single:
        sigma, geo = sigma[0], geo[0]
    if return_cache:
        return sigma, geo, (raw, acts)
    return sigma, geo


def density_head_backward(mlp: Mlp, cache, g_sigma, g_geo) -> np.ndarray:
    raw, acts = cache
    g_sigma = np.asarray(g_sigma, dtype=mlp.dtype).reshape(-1)
    r0 = raw[:, 0]
    inside = (r0 > -DENSITY_CLAMP) & (r0 < DENSITY_CLAMP)
    g_raw = np.empty_like(raw)
    g_raw[:, 0] = g_sigma * np.exp(np.clip(r0, -DENSITY_CLAMP, DENSITY_CLAMP)) * inside
    g_raw[:, 1:] = np.asarray(g_geo).reshape(len(raw), GEO_DIM)
    return mlp.backward(acts, g_raw)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def radiance_head(mlp: Mlp, sh, geo, return_cache: bool = False):
    sh = np.asarray(sh)
    geo = np.asarray(geo)
    single = sh.ndim == 1
    sh2, geo2 = np.atleast_2d(sh), np.atleast_2d(geo)
    if sh2.shape[1] != SH_DIM or geo2.shape[1] != GEO_DIM:
        raise DomainError("radiance head expects 16 SH and 15 geometry inputs")
    x = np.concatenate([sh2.astype(mlp.dtype, copy=False), geo2.astype(mlp.dtype, copy=False)], axis=1)
    raw, acts = mlp.forward(x, return_cache=True)
    rgb = _sigmoid(raw)
    out = rgb[0] if single else rgb
    if return_cache:
        return out, (rgb, acts)
    return out


def radiance_head_backward(mlp: Mlp, cache, g_rgb, need_sh: bool = True):
    """Returns (d/d sh, d/d geo); d/d sh is None unless ``need_sh``."""
    rgb, acts = cache
    g_raw = np.asarray(g_rgb, dtype=mlp.dtype).reshape(rgb.shape) * rgb * (1 - rgb)
    if need_sh:
        g_in = mlp.backward(acts, g_raw)
        return g_in[:, :SH_DIM], g_in[:, SH_DIM:]
    return None, mlp.backward(acts, g_raw, input_from=SH_DIM)
