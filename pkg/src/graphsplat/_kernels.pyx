# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: ray-integral splatting, voxel evaluation and the
trilinear ray marcher. ``_fallback.py`` mirrors every function here."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, floor

cnp.import_array()

cdef double SQRT_2PI = 2.5066282746310002


def render_forward(const double[:, ::1] origins, const double[:, ::1] dirs, long ncols,
                   const long[:, ::1] boxes, const double[:, ::1] pos,
                   const double[:, ::1] prec, const double[::1] rho):
    cdef Py_ssize_t npix = origins.shape[0]
    cdef Py_ssize_t m = pos.shape[0]
    out = np.zeros(npix, dtype=np.float64)
    cdef double[::1] img = out
    cdef Py_ssize_t i, r, c, p
    cdef double pxx, pyy, pzz, pxy, pxz, pyz
    cdef double qx, qy, qz, dx, dy, dz, ax, ay, az, a, b, cc
    for i in range(m):
        if rho[i] == 0.0:
            continue
        pxx = prec[i, 0]; pyy = prec[i, 1]; pzz = prec[i, 2]
        pxy = prec[i, 3]; pxz = prec[i, 4]; pyz = prec[i, 5]
        for r in range(boxes[i, 0], boxes[i, 1]):
            for c in range(boxes[i, 2], boxes[i, 3]):
                p = r * ncols + c
                dx = dirs[p, 0]; dy = dirs[p, 1]; dz = dirs[p, 2]
                qx = origins[p, 0] - pos[i, 0]
                qy = origins[p, 1] - pos[i, 1]
                qz = origins[p, 2] - pos[i, 2]
                ax = pxx * dx + pxy * dy + pxz * dz
                ay = pxy * dx + pyy * dy + pyz * dz
                az = pxz * dx + pyz * dy + pzz * dz
                a = dx * ax + dy * ay + dz * az
                b = qx * ax + qy * ay + qz * az
                cc = (qx * (pxx * qx + pxy * qy + pxz * qz)
                      + qy * (pxy * qx + pyy * qy + pyz * qz)
                      + qz * (pxz * qx + pyz * qy + pzz * qz))
                img[p] += rho[i] * SQRT_2PI / sqrt(a) * exp(-0.5 * (cc - b * b / a))
    return out


def render_backward(const double[:, ::1] origins, const double[:, ::1] dirs, long ncols,
                    const long[:, ::1] boxes, const double[:, ::1] pos,
                    const double[:, ::1] prec, const double[::1] rho,
                    const double[::1] dl_dimg):
    cdef Py_ssize_t m = pos.shape[0]
    d_rho_a = np.zeros(m, dtype=np.float64)
    d_pos_a = np.zeros((m, 3), dtype=np.float64)
    d_prec_a = np.zeros((m, 6), dtype=np.float64)
    cdef double[::1] d_rho = d_rho_a
    cdef double[:, ::1] d_pos = d_pos_a
    cdef double[:, ::1] d_prec = d_prec_a
    cdef Py_ssize_t i, r, c, p
    cdef double pxx, pyy, pzz, pxy, pxz, pyz, g, base, val, h, ba
    cdef double qx, qy, qz, dx, dy, dz, ax, ay, az, a, b, cc, mx, my, mz
    cdef double s_rho, sx, sy, sz, sxx, syy, szz, sxy, sxz, syz
    for i in range(m):
        pxx = prec[i, 0]; pyy = prec[i, 1]; pzz = prec[i, 2]
        pxy = prec[i, 3]; pxz = prec[i, 4]; pyz = prec[i, 5]
        s_rho = 0.0; sx = 0.0; sy = 0.0; sz = 0.0
        sxx = 0.0; syy = 0.0; szz = 0.0; sxy = 0.0; sxz = 0.0; syz = 0.0
        for r in range(boxes[i, 0], boxes[i, 1]):
            for c in range(boxes[i, 2], boxes[i, 3]):
                p = r * ncols + c
                g = dl_dimg[p]
                if g == 0.0:
                    continue
                dx = dirs[p, 0]; dy = dirs[p, 1]; dz = dirs[p, 2]
                qx = origins[p, 0] - pos[i, 0]
                qy = origins[p, 1] - pos[i, 1]
                qz = origins[p, 2] - pos[i, 2]
                ax = pxx * dx + pxy * dy + pxz * dz
                ay = pxy * dx + pyy * dy + pyz * dz
                az = pxz * dx + pyz * dy + pzz * dz
                a = dx * ax + dy * ay + dz * az
                b = qx * ax + qy * ay + qz * az
                cc = (qx * (pxx * qx + pxy * qy + pxz * qz)
                      + qy * (pxy * qx + pyy * qy + pyz * qz)
                      + qz * (pxz * qx + pyz * qy + pzz * qz))
                base = SQRT_2PI / sqrt(a) * exp(-0.5 * (cc - b * b / a))
                s_rho += g * base
                val = g * rho[i] * base
                ba = b / a
                mx = qx - ba * dx
                my = qy - ba * dy
                mz = qz - ba * dz
                # d/dp = val * A m
                sx += val * (pxx * mx + pxy * my + pxz * mz)
                sy += val * (pxy * mx + pyy * my + pyz * mz)
                sz += val * (pxz * mx + pyz * my + pzz * mz)
                # d/dA = -val/2 (d d^T / a + m m^T)
                h = -0.5 * val
                sxx += h * (dx * dx / a + mx * mx)
                syy += h * (dy * dy / a + my * my)
                szz += h * (dz * dz / a + mz * mz)
                sxy += h * (dx * dy / a + mx * my)
                sxz += h * (dx * dz / a + mx * mz)
                syz += h * (dy * dz / a + my * mz)
        d_rho[i] = s_rho
        d_pos[i, 0] = sx; d_pos[i, 1] = sy; d_pos[i, 2] = sz
        d_prec[i, 0] = sxx; d_prec[i, 1] = syy; d_prec[i, 2] = szz
        d_prec[i, 3] = sxy; d_prec[i, 4] = sxz; d_prec[i, 5] = syz
    return d_rho_a, d_pos_a, d_prec_a


def voxel_forward(const long[::1] tile_ptr, const long[::1] tile_kernels,
                  const long[:, ::1] tile_boxes, const long[:, ::1] boxes,
                  const double[::1] origin, const double[::1] spacing, dims,
                  const double[:, ::1] pos, const double[:, ::1] prec,
                  const double[::1] rho, double r2):
    cdef long nx = dims[0], ny = dims[1], nz = dims[2]
    out = np.zeros((nx, ny, nz), dtype=np.float64)
    cdef double[:, :, ::1] vol = out
    cdef Py_ssize_t t, e, i, ix, iy, iz
    cdef long x0, x1, y0, y1, z0, z1
    cdef double pxx, pyy, pzz, pxy, pxz, pyz, qx, qy, qz, maha
    for t in range(tile_ptr.shape[0] - 1):
        for e in range(tile_ptr[t], tile_ptr[t + 1]):
            i = tile_kernels[e]
            if rho[i] == 0.0:
                continue
            x0 = max(tile_boxes[t, 0], boxes[i, 0]); x1 = min(tile_boxes[t, 1], boxes[i, 1])
            y0 = max(tile_boxes[t, 2], boxes[i, 2]); y1 = min(tile_boxes[t, 3], boxes[i, 3])
            z0 = max(tile_boxes[t, 4], boxes[i, 4]); z1 = min(tile_boxes[t, 5], boxes[i, 5])
            pxx = prec[i, 0]; pyy = prec[i, 1]; pzz = prec[i, 2]
            pxy = prec[i, 3]; pxz = prec[i, 4]; pyz = prec[i, 5]
            for ix in range(x0, x1):
                qx = origin[0] + ix * spacing[0] - pos[i, 0]
                for iy in range(y0, y1):
                    qy = origin[1] + iy * spacing[1] - pos[i, 1]
                    for iz in range(z0, z1):
                        qz = origin[2] + iz * spacing[2] - pos[i, 2]
                        maha = (pxx * qx * qx + pyy * qy * qy + pzz * qz * qz
                                + 2.0 * (pxy * qx * qy + pxz * qx * qz + pyz * qy * qz))
                        if maha <= r2:
                            vol[ix, iy, iz] += rho[i] * exp(-0.5 * maha)
    return out


def voxel_backward(const long[:, ::1] boxes, const double[::1] origin,
                   const double[::1] spacing, const double[:, :, ::1] dl_dvol,
                   const double[:, ::1] pos, const double[:, ::1] prec,
                   const double[::1] rho, double r2):
    cdef Py_ssize_t m = pos.shape[0]
    d_rho_a = np.zeros(m, dtype=np.float64)
    d_pos_a = np.zeros((m, 3), dtype=np.float64)
    d_prec_a = np.zeros((m, 6), dtype=np.float64)
    cdef double[::1] d_rho = d_rho_a
    cdef double[:, ::1] d_pos = d_pos_a
    cdef double[:, ::1] d_prec = d_prec_a
    cdef Py_ssize_t i, ix, iy, iz
    cdef double pxx, pyy, pzz, pxy, pxz, pyz, qx, qy, qz, maha, g, G, val
    cdef double s_rho, sx, sy, sz, sxx, syy, szz, sxy, sxz, syz
    for i in range(m):
        pxx = prec[i, 0]; pyy = prec[i, 1]; pzz = prec[i, 2]
        pxy = prec[i, 3]; pxz = prec[i, 4]; pyz = prec[i, 5]
        s_rho = 0.0; sx = 0.0; sy = 0.0; sz = 0.0
        sxx = 0.0; syy = 0.0; szz = 0.0; sxy = 0.0; sxz = 0.0; syz = 0.0
        for ix in range(boxes[i, 0], boxes[i, 1]):
            qx = origin[0] + ix * spacing[0] - pos[i, 0]
            for iy in range(boxes[i, 2], boxes[i, 3]):
                qy = origin[1] + iy * spacing[1] - pos[i, 1]
                for iz in range(boxes[i, 4], boxes[i, 5]):
                    g = dl_dvol[ix, iy, iz]
                    if g == 0.0:
                        continue
                    qz = origin[2] + iz * spacing[2] - pos[i, 2]
                    maha = (pxx * qx * qx + pyy * qy * qy + pzz * qz * qz
                            + 2.0 * (pxy * qx * qy + pxz * qx * qz + pyz * qy * qz))
                    if maha > r2:
                        continue
                    G = exp(-0.5 * maha)
                    s_rho += g * G
                    val = g * rho[i] * G
                    # x - p = q, so d/dp = val * A q
                    sx += val * (pxx * qx + pxy * qy + pxz * qz)
                    sy += val * (pxy * qx + pyy * qy + pyz * qz)
                    sz += val * (pxz * qx + pyz * qy + pzz * qz)
                    val = -0.5 * val
                    sxx += val * qx * qx
                    syy += val * qy * qy
                    szz += val * qz * qz
                    sxy += val * qx * qy
                    sxz += val * qx * qz
                    syz += val * qy * qz
        d_rho[i] = s_rho
        d_pos[i, 0] = sx; d_pos[i, 1] = sy; d_pos[i, 2] = sz
        d_prec[i, 0] = sxx; d_prec[i, 1] = syy; d_prec[i, 2] = szz
        d_prec[i, 3] = sxy; d_prec[i, 4] = sxz; d_prec[i, 5] = syz
    return d_rho_a, d_pos_a, d_prec_a


def march_rays(const double[:, :, ::1] vol, const double[::1] origin,
               const double[::1] spacing, const double[:, ::1] starts,
               const double[:, ::1] dirs, const double[::1] t0,
               const long[::1] nsteps, const double[::1] steps):
    """Midpoint-rule line integrals of the trilinear interpolant (zero outside)."""
    cdef Py_ssize_t nray = starts.shape[0]
    cdef long nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    out = np.zeros(nray, dtype=np.float64)
    cdef double[::1] res = out
    cdef Py_ssize_t k, n
    cdef long i0, j0, k0, a, bb, cc
    cdef double t, fx, fy, fz, wx, wy, wz, acc, val, w, step
    for n in range(nray):
        acc = 0.0
        step = steps[n]
        for k in range(nsteps[n]):
            t = t0[n] + (k + 0.5) * step
            fx = (starts[n, 0] + t * dirs[n, 0] - origin[0]) / spacing[0]
            fy = (starts[n, 1] + t * dirs[n, 1] - origin[1]) / spacing[1]
            fz = (starts[n, 2] + t * dirs[n, 2] - origin[2]) / spacing[2]
            if fx <= -1.0 or fy <= -1.0 or fz <= -1.0 or fx >= nx or fy >= ny or fz >= nz:
                continue
            i0 = <long>floor(fx); j0 = <long>floor(fy); k0 = <long>floor(fz)
            wx = fx - i0; wy = fy - j0; wz = fz - k0
            val = 0.0
            for a in range(2):
                if i0 + a < 0 or i0 + a >= nx:
                    continue
                for bb in range(2):
                    if j0 + bb < 0 or j0 + bb >= ny:
                        continue
                    for cc in range(2):
                        if k0 + cc < 0 or k0 + cc >= nz:
                            continue
                        w = ((wx if a else 1.0 - wx) * (wy if bb else 1.0 - wy)
                             * (wz if cc else 1.0 - wz))
                        val += w * vol[i0 + a, j0 + bb, k0 + cc]
            acc += val
        res[n] = acc * step
    return out
