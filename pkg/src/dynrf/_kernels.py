"""Compiled inner loops for grid encodings and compositing.

All kernels are single-pass loops with a fixed iteration order, so results are
bit-reproducible for a given input. Scatter kernels iterate level-major: every
level owns a disjoint slice of the parameter vector.
"""

import numpy as np
from numba import njit

# XOR-hash multipliers per input dimension
PRIMES = np.array([1, 2654435761, 805459861, 3674653429], dtype=np.uint64)
P1 = np.uint64(2654435761)
P2 = np.uint64(805459861)

@njit(cache=True, inline="always")
def _locate(v, K):
    if v < 0.0:
        v = 0.0
    elif v > 1.0:
        v = 1.0
    v = v * K
    i = int(v)
    if i >= K:
        i = K - 1
    return i, v - i


@njit(cache=True, inline="always")
def _slots3(ix, iy, iz, K, hashed, m):
    if hashed:
        a0 = np.int64(ix)
        a1 = np.int64(ix + 1)
        b0 = np.int64(np.uint64(iy) * P1)
        b1 = np.int64(np.uint64(iy + 1) * P1)
        c0 = np.int64(np.uint64(iz) * P2)
        c1 = np.int64(np.uint64(iz + 1) * P2)
        return ((a0 ^ b0 ^ c0) & m, (a1 ^ b0 ^ c0) & m, (a0 ^ b1 ^ c0) & m, (a1 ^ b1 ^ c0) & m,
                (a0 ^ b0 ^ c1) & m, (a1 ^ b0 ^ c1) & m, (a0 ^ b1 ^ c1) & m, (a1 ^ b1 ^ c1) & m)
    K1 = K + 1
    i000 = ix + K1 * (iy + K1 * iz)
    i001 = i000 + K1 * K1
    return (i000, i000 + 1, i000 + K1, i000 + K1 + 1,
            i001, i001 + 1, i001 + K1, i001 + K1 + 1)


@njit(cache=True)
def grid3_forward(x, params, offsets, res, hashed, mask, F, out):
    """Trilinear multi-resolution lookup, specialised for 3D inputs."""
    n = x.shape[0]
    L = res.shape[0]
    m = np.int64(mask)
    for l in range(L):
        K = res[l]
        h = hashed[l]
        tab = params[offsets[l]:offsets[l + 1]]
        for s in range(n):
            ix, fx = _locate(x[s, 0], K)
            iy, fy = _locate(x[s, 1], K)
            iz, fz = _locate(x[s, 2], K)
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            i0, i1, i2, i3, i4, i5, i6, i7 = _slots3(ix, iy, iz, K, h, m)
            w0 = gx * gy * gz
            w1 = fx * gy * gz
            w2 = gx * fy * gz
            w3 = fx * fy * gz
            w4 = gx * gy * fz
            w5 = fx * gy * fz
            w6 = gx * fy * fz
            w7 = fx * fy * fz
            if F == 2:  # the common case, unrolled
                c = 2 * l
                i0 *= 2
                i1 *= 2
                i2 *= 2
                i3 *= 2
                i4 *= 2
                i5 *= 2
                i6 *= 2
                i7 *= 2
                out[s, c] = (w0 * tab[i0] + w1 * tab[i1] + w2 * tab[i2] + w3 * tab[i3]
                             + w4 * tab[i4] + w5 * tab[i5] + w6 * tab[i6] + w7 * tab[i7])
                out[s, c + 1] = (w0 * tab[i0 + 1] + w1 * tab[i1 + 1] + w2 * tab[i2 + 1]
                                 + w3 * tab[i3 + 1] + w4 * tab[i4 + 1] + w5 * tab[i5 + 1]
                                 + w6 * tab[i6 + 1] + w7 * tab[i7 + 1])
                continue
            for f in range(F):
                out[s, l * F + f] = (
                    w0 * tab[i0 * F + f] + w1 * tab[i1 * F + f]
                    + w2 * tab[i2 * F + f] + w3 * tab[i3 * F + f]
                    + w4 * tab[i4 * F + f] + w5 * tab[i5 * F + f]
                    + w6 * tab[i6 * F + f] + w7 * tab[i7 * F + f])


@njit(cache=True)
def grid3_backward(x, grad_out, offsets, res, hashed, mask, F, grad_params):
    n = x.shape[0]
    L = res.shape[0]
    m = np.int64(mask)
    for l in range(L):
        K = res[l]
        h = hashed[l]
        tab = grad_params[offsets[l]:offsets[l + 1]]
        for s in range(n):
            ix, fx = _locate(x[s, 0], K)
            iy, fy = _locate(x[s, 1], K)
            iz, fz = _locate(x[s, 2], K)
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            i0, i1, i2, i3, i4, i5, i6, i7 = _slots3(ix, iy, iz, K, h, m)
            if F == 2:
                w0 = gx * gy * gz
                w1 = fx * gy * gz
                w2 = gx * fy * gz
                w3 = fx * fy * gz
                w4 = gx * gy * fz
                w5 = fx * gy * fz
                w6 = gx * fy * fz
                w7 = fx * fy * fz
                for f in range(2):
                    g = grad_out[s, 2 * l + f]
                    tab[2 * i0 + f] += w0 * g
                    tab[2 * i1 + f] += w1 * g
                    tab[2 * i2 + f] += w2 * g
                    tab[2 * i3 + f] += w3 * g
                    tab[2 * i4 + f] += w4 * g
                    tab[2 * i5 + f] += w5 * g
                    tab[2 * i6 + f] += w6 * g
                    tab[2 * i7 + f] += w7 * g
                continue
            for f in range(F):
                g = grad_out[s, l * F + f]
                tab[i0 * F + f] += gx * gy * gz * g
                tab[i1 * F + f] += fx * gy * gz * g
                tab[i2 * F + f] += gx * fy * gz * g
                tab[i3 * F + f] += fx * fy * gz * g
                tab[i4 * F + f] += gx * gy * fz * g
                tab[i5 * F + f] += fx * gy * fz * g
                tab[i6 * F + f] += gx * fy * fz * g
                tab[i7 * F + f] += fx * fy * fz * g


@njit(cache=True)
def _corners(x, s, K, hashed, mask, D, w, idx):
    """Fill the 2**D corner weights and table slots of sample ``s`` at one level."""
    ncorner = 1 << D
    for c in range(ncorner):
        w[c] = 1.0
        idx[c] = 0
    stride = 1
    for d in range(D):
        i, f = _locate(x[s, d], K)
        p = PRIMES[d]
        for c in range(ncorner):
            if (c >> d) & 1:
                w[c] *= f
                coord = i + 1
            else:
                w[c] *= 1.0 - f
                coord = i
            if hashed:
                idx[c] ^= np.int64(np.uint64(coord) * p)
            else:
                idx[c] += coord * stride
        stride *= K + 1
    if hashed:
        m = np.int64(mask)
        for c in range(ncorner):
            idx[c] &= m


@njit(cache=True)
def grid_forward(x, params, offsets, res, hashed, mask, F, out):
    """Multi-resolution (hashed or dense) multilinear lookup; writes out[n, L*F]."""
    n, D = x.shape
    L = res.shape[0]
    ncorner = 1 << D
    w = np.empty(ncorner, np.float64)
    idx = np.empty(ncorner, np.int64)
    for l in range(L):
        K = res[l]
        off = offsets[l]
        h = hashed[l]
        for s in range(n):
            _corners(x, s, K, h, mask, D, w, idx)
            for f in range(F):
                acc = 0.0
                for c in range(ncorner):
                    acc += w[c] * params[off + idx[c] * F + f]
                out[s, l * F + f] = acc


@njit(cache=True)
def grid_backward(x, grad_out, offsets, res, hashed, mask, F, grad_params):
    """Scatter upstream gradients onto the 2**D corner entries of every level."""
    n, D = x.shape
    L = res.shape[0]
    ncorner = 1 << D
    w = np.empty(ncorner, np.float64)
    idx = np.empty(ncorner, np.int64)
    for l in range(L):
        K = res[l]
        off = offsets[l]
        h = hashed[l]
        for s in range(n):
            _corners(x, s, K, h, mask, D, w, idx)
            for f in range(F):
                g = grad_out[s, l * F + f]
                for c in range(ncorner):
                    grad_params[off + idx[c] * F + f] += w[c] * g


@njit(cache=True)
def lerp1d_forward(x, params, R, out):
    n, m = out.shape
    for s in range(n):
        i, t = _locate(x[s], R - 1)
        a = i * m
        b = a + m
        for f in range(m):
            out[s, f] = (1.0 - t) * params[a + f] + t * params[b + f]


@njit(cache=True)
def lerp1d_backward(x, grad_out, R, grad_params):
    n, m = grad_out.shape
    for s in range(n):
        i, t = _locate(x[s], R - 1)
        a = i * m
        b = a + m
        for f in range(m):
            g = grad_out[s, f]
            grad_params[a + f] += (1.0 - t) * g
            grad_params[b + f] += t * g


@njit(cache=True)
def composite_forward(sigma, rgb, delta, offsets, t_min, weights, color, acc, stop):
    """Emission-absorption quadrature per ray over packed samples.

    ``stop[r]`` receives the index one past the last sample that contributed
    (early termination once transmittance drops below ``t_min``).
    """
    R = offsets.shape[0] - 1
    for r in range(R):
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        m = 0.0
        end = offsets[r + 1]
        i = offsets[r]
        while i < end:
            if T < t_min:
                break
            a = 1.0 - np.exp(-sigma[i] * delta[i])
            w = T * a
            weights[i] = w
            c0 += w * rgb[i, 0]
            c1 += w * rgb[i, 1]
            c2 += w * rgb[i, 2]
            m += w
            T = T * (1.0 - a)
            i += 1
        stop[r] = i
        for k in range(i, end):
            weights[k] = 0.0
        color[r, 0] = c0
        color[r, 1] = c1
        color[r, 2] = c2
        acc[r] = m


@njit(cache=True)
def composite_backward(sigma, rgb, delta, offsets, weights, stop, g_color, g_acc, g_sigma, g_rgb):
    """Reverse of ``composite_forward`` (early-termination index held fixed)."""
    R = offsets.shape[0] - 1
    for r in range(R):
        start = offsets[r]
        end = stop[r]
        gc0 = g_color[r, 0]
        gc1 = g_color[r, 1]
        gc2 = g_color[r, 2]
        gm = g_acc[r]
        for k in range(end, offsets[r + 1]):
            g_sigma[k] = 0.0
            g_rgb[k, 0] = 0.0
            g_rgb[k, 1] = 0.0
            g_rgb[k, 2] = 0.0
        # suffix = sum_{i>k} s_i w_i
        suffix = 0.0
        # transmittance after sample k, recovered from the forward weights
        T = 1.0
        for k in range(start, end):
            T = T * (1.0 - (1.0 - np.exp(-sigma[k] * delta[k])))
        for k in range(end - 1, start - 1, -1):
            w = weights[k]
            s = gc0 * rgb[k, 0] + gc1 * rgb[k, 1] + gc2 * rgb[k, 2] + gm
            g_tau = s * T - suffix
            g_sigma[k] = g_tau * delta[k]
            g_rgb[k, 0] = w * gc0
            g_rgb[k, 1] = w * gc1
            g_rgb[k, 2] = w * gc2
            suffix += s * w
            T = T + w


@njit(cache=True)
def analytic_render(o, d, centers, radii, palette, phase, sigma_max, falloff,
                    bound_r, n_steps, t_min, color, acc):
    """Midpoint quadrature of the soft-sphere scene along each ray's chord
    through the bounding sphere of radius ``bound_r``.

    Color is skipped for samples whose weight is below 1e-15."""
    R = o.shape[0]
    K = centers.shape[0]
    P = palette.shape[0]
    for r in range(R):
        color[r, 0] = 0.0
        color[r, 1] = 0.0
        color[r, 2] = 0.0
        acc[r] = 0.0
        b = o[r, 0] * d[r, 0] + o[r, 1] * d[r, 1] + o[r, 2] * d[r, 2]
        c = o[r, 0] * o[r, 0] + o[r, 1] * o[r, 1] + o[r, 2] * o[r, 2] - bound_r * bound_r
        disc = b * b - c
        if disc <= 0.0:
            continue
        sq = np.sqrt(disc)
        lo = max(-b - sq, 0.0)
        hi = -b + sq
        if hi <= lo:
            continue
        h = (hi - lo) / n_steps
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        m = 0.0
        for i in range(n_steps):
            if T < t_min:
                break
            a = lo + (i + 0.5) * h
            px = o[r, 0] + a * d[r, 0]
            py = o[r, 1] + a * d[r, 1]
            pz = o[r, 2] + a * d[r, 2]
            best = 0
            best_sd = np.inf
            best_dist = 0.0
            rx = 0.0
            ry = 0.0
            rz = 0.0
            for k in range(K):
                ex = px - centers[k, 0]
                ey = py - centers[k, 1]
                ez = pz - centers[k, 2]
                dist = np.sqrt(ex * ex + ey * ey + ez * ez)
                sd = dist - radii[k]
                if sd < best_sd:
                    best, best_sd, best_dist = k, sd, dist
                    rx, ry, rz = ex, ey, ez
            sigma = sigma_max / (1.0 + np.exp(best_sd / falloff))
            alpha = 1.0 - np.exp(-sigma * h)
            w = T * alpha
            T = T * (1.0 - alpha)
            m += w
            if w < 1e-15:
                continue
            inv = 1.0 / max(best_dist, 1e-12)
            pal = min(best, P - 1)
            nx = rx * inv
            ny = ry * inv
            nz = rz * inv
            c0 += w * min(max(palette[pal, 0] + 0.25 * nx + 0.15 * np.sin(3.0 * nx + phase[0]), 0.0), 1.0)
            c1 += w * min(max(palette[pal, 1] + 0.25 * ny + 0.15 * np.sin(3.0 * ny + phase[1]), 0.0), 1.0)
            c2 += w * min(max(palette[pal, 2] + 0.25 * nz + 0.15 * np.sin(3.0 * nz + phase[2]), 0.0), 1.0)
        color[r, 0] = c0
        color[r, 1] = c1
        color[r, 2] = c2
        acc[r] = m


@njit(cache=True)
def _voxel(p, lo, size, n):
    i = int(np.floor((p - lo) / size * n))
    return min(max(i, 0), n - 1)


@njit(cache=True)
def _brick_bit(word, iy, iz):
    return (word >> np.uint64(((iy & 7) << 3) | (iz & 7))) & np.uint64(1) != 0


# Occupancy lookups below read 8x8x8 bricks packed one cache line each: word
# ``x & 7`` of brick (x >> 3, y >> 3, z >> 3) holds bit ``(y & 7) * 8 + (z & 7)``.
# Helpers take scalars only; passing arrays per step costs refcount traffic.


@njit(cache=True)
def count_occupied(o, d, lo, hi, rays, jitter, n_steps, bricks, coarse, dims, frames, bmin, bsize,
                   counts):
    """Retained-sample count per ray for stratified samples over [lo, hi]."""
    nx, ny, nz = dims[0], dims[1], dims[2]
    for j in range(rays.shape[0]):
        r = rays[j]
        h = (hi[r] - lo[r]) / n_steps
        n = 0
        for i in range(n_steps):
            a = lo[r] + (i + jitter[j]) * h
            ix = _voxel(o[r, 0] + a * d[r, 0], bmin[0], bsize[0], nx)
            iy = _voxel(o[r, 1] + a * d[r, 1], bmin[1], bsize[1], ny)
            iz = _voxel(o[r, 2] + a * d[r, 2], bmin[2], bsize[2], nz)
            f = frames[r]
            if coarse[f, ix >> 3, iy >> 3, iz >> 3] and _brick_bit(
                    bricks[f, ix >> 3, iy >> 3, iz >> 3, ix & 7], iy, iz):
                n += 1
        counts[r] = n


@njit(cache=True)
def fill_occupied(o, d, lo, hi, rays, jitter, n_steps, bricks, coarse, dims, frames, bmin, bsize,
                  offsets, alpha_out, delta_out, pos_out, ray_out):
    nx, ny, nz = dims[0], dims[1], dims[2]
    for j in range(rays.shape[0]):
        r = rays[j]
        h = (hi[r] - lo[r]) / n_steps
        k = offsets[r]
        for i in range(n_steps):
            a = lo[r] + (i + jitter[j]) * h
            if i + 1 < n_steps:
                delta = (lo[r] + (i + 1 + jitter[j]) * h) - a
            else:
                delta = hi[r] - a
            px = o[r, 0] + a * d[r, 0]
            py = o[r, 1] + a * d[r, 1]
            pz = o[r, 2] + a * d[r, 2]
            ix = _voxel(px, bmin[0], bsize[0], nx)
            iy = _voxel(py, bmin[1], bsize[1], ny)
            iz = _voxel(pz, bmin[2], bsize[2], nz)
            f = frames[r]
            if coarse[f, ix >> 3, iy >> 3, iz >> 3] and _brick_bit(
                    bricks[f, ix >> 3, iy >> 3, iz >> 3, ix & 7], iy, iz):
                alpha_out[k] = a
                delta_out[k] = delta
                pos_out[k, 0] = px
                pos_out[k, 1] = py
                pos_out[k, 2] = pz
                ray_out[k] = r
                k += 1
