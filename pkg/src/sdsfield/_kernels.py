"""Compiled trilinear gather/scatter loops used by :mod:`sdsfield.field`.

Serial on purpose: scatter-adds happen in point order, which keeps gradients
bitwise reproducible.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def _cell(points, p, lo, scale, nx, ny, nz):
    ux = (points[p, 0] - lo[0]) * scale[0]
    uy = (points[p, 1] - lo[1]) * scale[1]
    uz = (points[p, 2] - lo[2]) * scale[2]
    inside = (ux >= 0.0) and (uy >= 0.0) and (uz >= 0.0) and ux <= nx - 1 and uy <= ny - 1 and uz <= nz - 1
    ix = min(max(int(np.floor(ux)), 0), nx - 2)
    iy = min(max(int(np.floor(uy)), 0), ny - 2)
    iz = min(max(int(np.floor(uz)), 0), nz - 2)
    fx = min(max(ux - ix, 0.0), 1.0)
    fy = min(max(uy - iy, 0.0), 1.0)
    fz = min(max(uz - iz, 0.0), 1.0)
    return inside, ix, iy, iz, fx, fy, fz


@numba.njit(cache=True)
def trilinear_gather(values, nx, ny, nz, lo, scale, points):
    """Interpolate ``values`` (V, C) at ``points`` (P, 3); zero outside the box."""
    n_points = points.shape[0]
    n_ch = values.shape[1]
    out = np.zeros((n_points, n_ch))
    inside_all = np.zeros(n_points, dtype=np.bool_)
    for p in range(n_points):
        inside, ix, iy, iz, fx, fy, fz = _cell(points, p, lo, scale, nx, ny, nz)
        if not inside:
            continue
        inside_all[p] = True
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    w = wx * wy * wz
                    v = ((ix + dx) * ny + iy + dy) * nz + iz + dz
                    for c in range(n_ch):
                        out[p, c] += w * values[v, c]
    return out, inside_all


@numba.njit(cache=True)
def trilinear_scatter(grad, nx, ny, nz, lo, scale, points, out):
    """Adjoint of :func:`trilinear_gather`: add ``grad`` (P, C) into ``out`` (V, C)."""
    n_points = points.shape[0]
    n_ch = grad.shape[1]
    for p in range(n_points):
        inside, ix, iy, iz, fx, fy, fz = _cell(points, p, lo, scale, nx, ny, nz)
        if not inside:
            continue
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    w = wx * wy * wz
                    v = ((ix + dx) * ny + iy + dy) * nz + iz + dz
                    for c in range(n_ch):
                        out[v, c] += w * grad[p, c]
    return out


@numba.njit(cache=True)
def scatter_activated(g_density, g_color, act, nx, ny, nz, lo, scale, points, out):
    """Chain upstream grads through the activations, then scatter into ``out`` (V, 4).

    Uses ``d softplus(x)/dx = 1 - exp(-softplus(x))`` and ``d sigmoid = s (1 - s)``
    so only the activated values are needed.
    """
    n_points = points.shape[0]
    g = np.empty(4)
    for p in range(n_points):
        inside, ix, iy, iz, fx, fy, fz = _cell(points, p, lo, scale, nx, ny, nz)
        if not inside:
            continue
        g[0] = g_density[p] * -math.expm1(-act[p, 0])
        for c in range(3):
            s = act[p, c + 1]
            g[c + 1] = g_color[p, c] * s * (1.0 - s)
        if g[0] == 0.0 and g[1] == 0.0 and g[2] == 0.0 and g[3] == 0.0:
            continue
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    w = wx * wy * wz
                    v = ((ix + dx) * ny + iy + dy) * nz + iz + dz
                    for c in range(4):
                        out[v, c] += w * g[c]
    return out


@numba.njit(cache=True)
def take_merged(order, a, b):
    """Rows of per-ray blocks ``a`` (R*N, C) and ``b`` (R*M, C) rearranged by ``order`` (R, N+M)."""
    n_rays, total = order.shape
    n = a.shape[0] // n_rays
    m = b.shape[0] // n_rays
    n_ch = a.shape[1]
    out = np.empty((n_rays * total, n_ch), dtype=a.dtype)
    for r in range(n_rays):
        for k in range(total):
            o = order[r, k]
            dst = r * total + k
            if o < n:
                src = r * n + o
                for c in range(n_ch):
                    out[dst, c] = a[src, c]
            else:
                src = r * m + o - n
                for c in range(n_ch):
                    out[dst, c] = b[src, c]
    return out


@numba.njit(cache=True)
def _softplus(x):
    return x + math.log1p(math.exp(-x)) if x > 0.0 else math.log1p(math.exp(x))


@numba.njit(cache=True)
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def query_points(values, nx, ny, nz, lo, scale, points):
    """Fused gather + activation for 4-channel ``values``. Returns (pre (P, 4), act (P, 4), inside (P,))."""
    n_points = points.shape[0]
    pre = np.zeros((n_points, 4))
    act = np.zeros((n_points, 4))
    inside_all = np.zeros(n_points, dtype=np.bool_)
    sx = ny * nz
    for p in range(n_points):
        ux = (points[p, 0] - lo[0]) * scale[0]
        uy = (points[p, 1] - lo[1]) * scale[1]
        uz = (points[p, 2] - lo[2]) * scale[2]
        if not (ux >= 0.0 and uy >= 0.0 and uz >= 0.0 and ux <= nx - 1 and uy <= ny - 1 and uz <= nz - 1):
            continue
        inside_all[p] = True
        ix = min(int(ux), nx - 2)
        iy = min(int(uy), ny - 2)
        iz = min(int(uz), nz - 2)
        fx = ux - ix
        fy = uy - iy
        fz = uz - iz
        base = (ix * ny + iy) * nz + iz
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        a3 = 0.0
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wxy = wx * (fy if dy else 1.0 - fy)
                for dz in range(2):
                    w = wxy * (fz if dz else 1.0 - fz)
                    v = base + dx * sx + dy * nz + dz
                    a0 += w * values[v, 0]
                    a1 += w * values[v, 1]
                    a2 += w * values[v, 2]
                    a3 += w * values[v, 3]
        pre[p, 0] = a0
        pre[p, 1] = a1
        pre[p, 2] = a2
        pre[p, 3] = a3
        act[p, 0] = _softplus(a0)
        act[p, 1] = _sigmoid(a1)
        act[p, 2] = _sigmoid(a2)
        act[p, 3] = _sigmoid(a3)
    return pre, act, inside_all


@numba.njit(cache=True)
def ray_points(origins, directions, z):
    """``origins[r] + z[r, i] * directions[r]`` flattened to (R * N, 3)."""
    n_rays, n = z.shape
    out = np.empty((n_rays * n, 3))
    for r in range(n_rays):
        for i in range(n):
            for a in range(3):
                out[r * n + i, a] = origins[r, a] + z[r, i] * directions[r, a]
    return out


@numba.njit(cache=True)
def composite(z, sigma, color, delta_cap, dedup_tol, background, opacity_floor):
    """Per-ray emission-absorption compositing plus weight moments.

    Returns (rgb, color_out, opacity, weights, transmittance, depth,
    disparity, zvar, background_mask); see :func:`sdsfield.renderer.render`.
    """
    n_rays, n = z.shape
    rgb = np.zeros((n_rays, 3))
    col = np.empty((n_rays, 3))
    opacity = np.zeros(n_rays)
    w = np.empty((n_rays, n))
    trans = np.empty((n_rays, n))
    depth = np.zeros(n_rays)
    disp = np.zeros(n_rays)
    var = np.zeros(n_rays)
    bg = np.zeros(n_rays, dtype=np.bool_)
    for r in range(n_rays):
        prefix = 0.0
        total = 0.0
        for i in range(n):
            d = z[r, i + 1] - z[r, i] if i < n - 1 else delta_cap
            if d <= dedup_tol:
                d = 0.0
            tau = sigma[r, i] * d
            t = math.exp(-prefix)
            wi = t * -math.expm1(-tau)
            trans[r, i] = t
            w[r, i] = wi
            prefix += tau
            total += wi
            for c in range(3):
                rgb[r, c] += wi * color[r, i, c]
        opacity[r] = total
        for c in range(3):
            col[r, c] = rgb[r, c] + (1.0 - total) * background[c]
        if not total > opacity_floor:
            bg[r] = True
            continue
        # normalise first so that a single nonzero weight becomes exactly 1
        mu = 0.0
        for i in range(n):
            mu += z[r, i] * (w[r, i] / total)
        v = 0.0
        for i in range(n):
            dz = z[r, i] - mu
            v += dz * dz * (w[r, i] / total)
        depth[r] = mu
        var[r] = v
        disp[r] = 1.0 / mu if mu > 0.0 else 0.0
    return rgb, col, opacity, w, trans, depth, disp, var, bg


@numba.njit(cache=True)
def composite_grad(z, color, delta_cap, dedup_tol, background, weights, trans, opacity, depth, disp, zvar, bg,
                   g_color, g_rgb, g_opacity, g_depth, g_disp, g_zvar):
    """Adjoint of :func:`composite`. Returns (g_sigma, g_sample_color, g_background)."""
    n_rays, n = z.shape
    g_sigma = np.empty((n_rays, n))
    g_scol = np.empty((n_rays, n, 3))
    g_bg = np.zeros(3)
    g_w = np.empty(n)
    for r in range(n_rays):
        gc0 = g_color[r, 0] + g_rgb[r, 0]
        gc1 = g_color[r, 1] + g_rgb[r, 1]
        gc2 = g_color[r, 2] + g_rgb[r, 2]
        base = g_opacity[r] - (g_color[r, 0] * background[0] + g_color[r, 1] * background[1]
                               + g_color[r, 2] * background[2])
        for c in range(3):
            g_bg[c] += (1.0 - opacity[r]) * g_color[r, c]
        inv_o = 0.0
        g_mu = 0.0
        if not bg[r]:
            inv_o = 1.0 / opacity[r]
            g_mu = g_depth[r]
            if disp[r] > 0.0:
                g_mu -= g_disp[r] / (depth[r] * depth[r])
        for i in range(n):
            gw = color[r, i, 0] * gc0 + color[r, i, 1] * gc1 + color[r, i, 2] * gc2 + base
            if inv_o > 0.0:
                dz = z[r, i] - depth[r]
                gw += g_mu * inv_o * dz + g_zvar[r] * inv_o * (dz * dz - zvar[r])
            g_w[i] = gw
            wi = weights[r, i]
            g_scol[r, i, 0] = wi * gc0
            g_scol[r, i, 1] = wi * gc1
            g_scol[r, i, 2] = wi * gc2
        # nu_i depends on tau_k for k <= i: g_tau_k = g_w_k T_{k+1} - sum_{i>k} g_w_i nu_i
        suffix = 0.0
        for i in range(n - 1, -1, -1):
            wi = weights[r, i]
            d = z[r, i + 1] - z[r, i] if i < n - 1 else delta_cap
            if d <= dedup_tol:
                d = 0.0
            g_tau = g_w[i] * (trans[r, i] - wi) - suffix
            g_sigma[r, i] = g_tau * d
            suffix += g_w[i] * wi
    return g_sigma, g_scol, g_bg


@numba.njit(cache=True)
def invert_cdf(edges, cdf, u):
    """Map uniforms ``u`` (R, K) through piecewise-linear CDFs (R, N + 1); rows sorted on return.

    Each uniform lands in the last bin whose lower CDF value is <= u. The
    uniforms are sorted first so one forward walk over the bins suffices.
    """
    n_rays, k = u.shape
    n_bins = cdf.shape[1] - 1
    out = np.empty((n_rays, k))
    us = np.empty(k)
    for r in range(n_rays):
        for j in range(k):
            us[j] = u[r, j]
        us.sort()
        b = 0
        for j in range(k):
            uj = us[j]
            while b < n_bins - 1 and cdf[r, b + 1] <= uj:
                b += 1
            c_lo = cdf[r, b]
            mass = cdf[r, b + 1] - c_lo
            frac = (uj - c_lo) / mass if mass > 0.0 else 0.0
            frac = min(max(frac, 0.0), 1.0)
            out[r, j] = edges[r, b] + frac * (edges[r, b + 1] - edges[r, b])
    return out


@numba.njit(cache=True)
def merge_rows(a, b):
    """Row-wise merge of sorted (R, N) and (R, M); ties take ``a`` first.

    Returns (merged, order) with ``order`` indexing the concatenation [a, b].
    """
    n_rays, n = a.shape
    m = b.shape[1]
    merged = np.empty((n_rays, n + m))
    order = np.empty((n_rays, n + m), dtype=np.int64)
    for r in range(n_rays):
        i = 0
        j = 0
        for k in range(n + m):
            if j >= m or (i < n and a[r, i] <= b[r, j]):
                merged[r, k] = a[r, i]
                order[r, k] = i
                i += 1
            else:
                merged[r, k] = b[r, j]
                order[r, k] = n + j
                j += 1
    return merged, order
