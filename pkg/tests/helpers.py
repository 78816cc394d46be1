"""Independent reference implementations used as test oracles."""

import itertools
import math

import numpy as np

HASH_PRIMES = (1, 2654435761, 805459861, 3674653429)


def exact_resolutions(levels, k_min, k_max):
    """Largest integer K with K**(L-1) <= k_min**(L-1-l) * k_max**l, in exact integers."""
    if levels == 1:
        return [k_min]
    out = []
    for l in range(levels):
        bound = k_min ** (levels - 1 - l) * k_max ** l
        k = int(round(k_min ** (1 - l / (levels - 1)) * k_max ** (l / (levels - 1))))
        while k ** (levels - 1) > bound:
            k -= 1
        while (k + 1) ** (levels - 1) <= bound:
            k += 1
        out.append(k)
    return out


def level_is_hashed(K, dim, table_log2, hash_all=False, dense_only=False):
    if dense_only:
        return False
    return hash_all or (K + 1) ** dim > 2 ** table_log2


def vertex_slot(corner, K, dim, table_log2, hashed):
    if hashed:
        h = 0
        for c, p in zip(corner, HASH_PRIMES):
            h ^= (c * p) % 2 ** 64
        return h & (2 ** table_log2 - 1)
    slot, stride = 0, 1
    for c in corner:
        slot += c * stride
        stride *= K + 1
    return slot


def brute_force_encode(x, tables, resolutions, hashed, dim, F, table_log2):
    """Per-point, per-level sum over the 2**dim lattice corners.

    ``tables[l]`` is the (entries, F) parameter table of level l.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, dim)
    out = np.zeros((len(x), len(resolutions) * F))
    for n, p in enumerate(x):
        for l, K in enumerate(resolutions):
            base, frac = [], []
            for v in p:
                v = min(max(float(v), 0.0), 1.0) * K
                i = min(int(math.floor(v)), K - 1)
                base.append(i)
                frac.append(v - i)
            for bits in itertools.product((0, 1), repeat=dim):
                w = 1.0
                for b, f in zip(bits, frac):
                    w *= f if b else 1.0 - f
                corner = [i + b for i, b in zip(base, bits)]
                slot = vertex_slot(corner, K, dim, table_log2, hashed[l])
                out[n, l * F:(l + 1) * F] += w * tables[l][slot]
    return out


def scalar_lerp(x, vectors):
    R = len(vectors)
    v = min(max(x, 0.0), 1.0) * (R - 1)
    i = min(int(math.floor(v)), R - 2)
    t = v - i
    return (1 - t) * vectors[i] + t * vectors[i + 1]


def scalar_composite(sigma, rgb, delta, t_min=1e-4):
    """Emission-absorption sum written as a plain loop over samples."""
    T = 1.0
    color = np.zeros(3)
    acc = 0.0
    weights = []
    for s, c, d in zip(sigma, rgb, delta):
        if T < t_min:
            weights.append(0.0)
            continue
        a = 1.0 - math.exp(-s * d)
        w = T * a
        weights.append(w)
        color += w * np.asarray(c)
        acc += w
        T *= 1.0 - a
    return color, acc, np.array(weights)


def gradient_check(loss_fn, params, analytic, rng, n=200, eps=1e-5, rtol=1e-3, atol=1e-9):
    """Central differences on ``n`` entries of the flat array ``params``.

    Entries are drawn from those with a nonzero analytic gradient.
    Returns the fraction within ``rtol`` relative or ``atol`` absolute error.
    """
    flat = params.reshape(-1)
    g = np.asarray(analytic).reshape(-1)
    candidates = np.nonzero(g != 0)[0]
    if len(candidates) == 0:
        candidates = np.arange(flat.size)
    idx = rng.choice(candidates, size=min(n, len(candidates)), replace=False)
    ok = 0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = loss_fn()
        flat[i] = old - eps
        down = loss_fn()
        flat[i] = old
        num = (up - down) / (2 * eps)
        err = abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-30)
        ok += err < rtol or abs(num - g[i]) < atol
    return ok / len(idx)


def gradient_check_many(loss_fn, pairs, rng, n=200, eps=1e-4, rtol=1e-3, atol=0.0):
    """Like :func:`gradient_check` but drawing ``n`` entries across several
    (param, grad) arrays. Returns (pass fraction, list of failures)."""
    pool = [(k, i) for k, (_, g) in enumerate(pairs) for i in np.nonzero(g.reshape(-1))[0]]
    pick = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    grads = [np.array(g, copy=True).reshape(-1) for _, g in pairs]
    fails = []
    for j in pick:
        k, i = pool[j]
        flat = pairs[k][0].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        up = loss_fn()
        flat[i] = old - eps
        down = loss_fn()
        flat[i] = old
        num = (up - down) / (2 * eps)
        a = grads[k][i]
        err = abs(num - a) / max(abs(num), abs(a), 1e-30)
        if not (err < rtol or abs(num - a) < atol):
            fails.append((k, int(i), num, a))
    return 1 - len(fails) / len(pick), fails


def scalar_ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Window-by-window SSIM with explicit weighted sums, averaged over channels."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    half = (size - 1) / 2
    w = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma)) for j in range(size)]
         for i in range(size)]
    total = sum(map(sum, w))
    w = [[v / total for v in row] for row in w]
    c1, c2 = k1 * k1, k2 * k2
    per_channel = []
    for ch in range(a.shape[2]):
        vals = []
        for r in range(a.shape[0] - size + 1):
            for c in range(a.shape[1] - size + 1):
                mx = my = sxx = syy = sxy = 0.0
                for i in range(size):
                    for j in range(size):
                        x, y, wt = a[r + i, c + j, ch], b[r + i, c + j, ch], w[i][j]
                        mx += wt * x
                        my += wt * y
                        sxx += wt * x * x
                        syy += wt * y * y
                        sxy += wt * x * y
                vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        per_channel.append(sum(vals) / len(vals))
    return sum(per_channel) / len(per_channel)


def greedy_oracle(bits_list, threshold, pool):
    """Recomputes the expansion factor of each candidate run from scratch."""
    segments, s, n = [], 0, len(bits_list)
    max_len = max(size for size, _ in pool)
    while s < n:
        length = 1
        while s + length < n and length < max_len:
            run = bits_list[s:s + length + 1]
            union = np.zeros_like(run[0])
            for b in run:
                union = union | b
            if union.sum() / run[0].sum() > threshold:
                break
            length += 1
        cap = min(c for size, c in pool if size >= length)
        segments.append((s, length, cap))
        s += length
    return segments


def field_oracle(field, p, t):
    """Combine the component grids by hand for each decomposition."""
    q = np.concatenate([p, t[:, None]], axis=1)
    c = dict(field.components)
    if field.backend == "humanrf":
        terms = [("xyz", [0, 1, 2], "t", 3), ("xyt", [0, 1, 3], "z", 2),
                 ("xzt", [0, 2, 3], "y", 1), ("yzt", [1, 2, 3], "x", 0)]
        return sum(c[a].encode(q[:, ax]) * c[b].sample(q[:, bx]) for a, ax, b, bx in terms)
    if field.backend == "hex4d":
        pairs = [("xy", [0, 1], "zt", [2, 3]), ("yz", [1, 2], "xt", [0, 3]), ("xz", [0, 2], "yt", [1, 3])]
        return sum(c[a].encode(q[:, ax]) * c[b].encode(q[:, bx]) for a, ax, b, bx in pairs)
    return c["xyzt"].encode(q)
