"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and results (up to floating-point summation order). Loops run
over kernels; the work inside each kernel footprint is vectorized.
"""
import numpy as np

SQRT_2PI = np.sqrt(2 * np.pi)


def _sym(p6):
    xx, yy, zz, xy, xz, yz = p6
    return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])


def _pixels(box, ncols):
    r = np.arange(box[0], box[1])
    c = np.arange(box[2], box[3])
    return (r[:, None] * ncols + c[None, :]).reshape(-1)


def _ray_terms(origins, dirs, pix, p, A):
    d = dirs[pix]
    q = origins[pix] - p
    Ad = d @ A
    a = np.einsum("ni,ni->n", d, Ad)
    b = np.einsum("ni,ni->n", q, Ad)
    c = np.einsum("ni,ij,nj->n", q, A, q)
    base = SQRT_2PI / np.sqrt(a) * np.exp(-0.5 * (c - b * b / a))
    return d, q, a, b, base


def render_forward(origins, dirs, ncols, boxes, pos, prec, rho):
    img = np.zeros(origins.shape[0])
    for i in range(pos.shape[0]):
        if rho[i] == 0.0 or boxes[i, 0] >= boxes[i, 1] or boxes[i, 2] >= boxes[i, 3]:
            continue
        pix = _pixels(boxes[i], ncols)
        _, _, _, _, base = _ray_terms(origins, dirs, pix, pos[i], _sym(prec[i]))
        img[pix] += rho[i] * base
    return img


def render_backward(origins, dirs, ncols, boxes, pos, prec, rho, dl_dimg):
    m = pos.shape[0]
    d_rho = np.zeros(m)
    d_pos = np.zeros((m, 3))
    d_prec = np.zeros((m, 6))
    for i in range(m):
        if boxes[i, 0] >= boxes[i, 1] or boxes[i, 2] >= boxes[i, 3]:
            continue
        pix = _pixels(boxes[i], ncols)
        g = dl_dimg[pix]
        keep = g != 0.0
        if not np.any(keep):
            continue
        pix, g = pix[keep], g[keep]
        A = _sym(prec[i])
        d, q, a, b, base = _ray_terms(origins, dirs, pix, pos[i], A)
        d_rho[i] = np.sum(g * base)
        val = g * rho[i] * base
        m_vec = q - (b / a)[:, None] * d
        d_pos[i] = (val[:, None] * m_vec).sum(axis=0) @ A
        h = -0.5 * val
        dd = d / np.sqrt(a)[:, None]
        S = np.einsum("n,ni,nj->ij", h, dd, dd) + np.einsum("n,ni,nj->ij", h, m_vec, m_vec)
        d_prec[i] = [S[0, 0], S[1, 1], S[2, 2], S[0, 1], S[0, 2], S[1, 2]]
    return d_rho, d_pos, d_prec


def _box_points(box, origin, spacing):
    ax = [origin[k] + np.arange(box[2 * k], box[2 * k + 1]) * spacing[k] for k in range(3)]
    return ax


def voxel_forward(tile_ptr, tile_kernels, tile_boxes, boxes, origin, spacing, dims,
                  pos, prec, rho, r2):
    vol = np.zeros(tuple(int(d) for d in dims))
    for t in range(tile_ptr.shape[0] - 1):
        for i in tile_kernels[tile_ptr[t]:tile_ptr[t + 1]]:
            if rho[i] == 0.0:
                continue
            lo = np.maximum(tile_boxes[t, 0::2], boxes[i, 0::2])
            hi = np.minimum(tile_boxes[t, 1::2], boxes[i, 1::2])
            if np.any(hi <= lo):
                continue
            box = np.stack([lo, hi], axis=1).reshape(-1)
            gx, gy, gz = np.meshgrid(*_box_points(box, origin, spacing), indexing="ij")
            q = np.stack([gx, gy, gz], axis=-1) - pos[i]
            maha = np.einsum("...i,ij,...j->...", q, _sym(prec[i]), q)
            val = np.where(maha <= r2, rho[i] * np.exp(-0.5 * maha), 0.0)
            vol[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += val
    return vol


def voxel_backward(boxes, origin, spacing, dl_dvol, pos, prec, rho, r2):
    m = pos.shape[0]
    d_rho = np.zeros(m)
    d_pos = np.zeros((m, 3))
    d_prec = np.zeros((m, 6))
    for i in range(m):
        b = boxes[i]
        if b[0] >= b[1] or b[2] >= b[3] or b[4] >= b[5]:
            continue
        g = dl_dvol[b[0]:b[1], b[2]:b[3], b[4]:b[5]]
        if not np.any(g):
            continue
        gx, gy, gz = np.meshgrid(*_box_points(b, origin, spacing), indexing="ij")
        q = np.stack([gx, gy, gz], axis=-1) - pos[i]
        A = _sym(prec[i])
        maha = np.einsum("...i,ij,...j->...", q, A, q)
        G = np.where(maha <= r2, np.exp(-0.5 * maha), 0.0) * g
        d_rho[i] = G.sum()
        val = (rho[i] * G).reshape(-1)
        qf = q.reshape(-1, 3)
        d_pos[i] = (val[:, None] * qf).sum(axis=0) @ A
        S = -0.5 * np.einsum("n,ni,nj->ij", val, qf, qf)
        d_prec[i] = [S[0, 0], S[1, 1], S[2, 2], S[0, 1], S[0, 2], S[1, 2]]
    return d_rho, d_pos, d_prec


def march_rays(vol, origin, spacing, starts, dirs, t0, nsteps, steps):
    from scipy.ndimage import map_coordinates

    out = np.zeros(starts.shape[0])
    chunk = 4096
    for s in range(0, starts.shape[0], chunk):
        sl = slice(s, s + chunk)
        n = nsteps[sl]
        kmax = int(n.max()) if n.size else 0
        if kmax == 0:
            continue
        k = np.arange(kmax) + 0.5
        t = t0[sl][:, None] + k[None, :] * steps[sl][:, None]
        pts = starts[sl][:, None, :] + t[..., None] * dirs[sl][:, None, :]
        idx = (pts - origin) / spacing
        vals = map_coordinates(vol, idx.reshape(-1, 3).T, order=1, mode="grid-constant",
                               cval=0.0, prefilter=False).reshape(idx.shape[:2])
        vals[k[None, :] >= n[:, None]] = 0.0
        out[sl] = vals.sum(axis=1) * steps[sl]
    return out
