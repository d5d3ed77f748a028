"""Pure NumPy implementations of the hot voxel kernels.

Layouts are batch-first, channel-second throughout: volumes are
(B, C, D, H, W) and displacement fields are (B, 3, D, H, W), where
displacement channel c moves samples along spatial axis c (0=depth,
1=height, 2=width), in voxel units.

Convolutions are expressed as one GEMM per kernel offset, so the heavy
arithmetic runs inside BLAS; pooling and warping use vectorized
gather/scatter. The compiled backend in ``_native.pyx`` implements the
same contracts with direct loops.
"""

import numpy as np

__all__ = [
    "conv3d_forward",
    "conv3d_backward",
    "maxpool_forward",
    "maxpool_backward",
    "warp_forward",
    "warp_backward",
    "warp_nearest",
]


def _conv_out_extents(extents, k, stride, pad):
    out = []
    for ext, s, p in zip(extents, stride, pad):
        span = ext + 2 * p - k
        out.append(span // s + 1)
    return tuple(out)


def _pad_spatial(x, pad):
    pd, ph, pw = pad
    if pd == 0 and ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _shifted(xpad, off, out_ext, stride):
    kd, kh, kw = off
    do, ho, wo = out_ext
    sd, sh, sw = stride
    return xpad[
        :,
        :,
        kd : kd + (do - 1) * sd + 1 : sd,
        kh : kh + (ho - 1) * sh + 1 : sh,
        kw : kw + (wo - 1) * sw + 1 : sw,
    ]


def conv3d_forward(x, w, b, stride, pad):
    """Cross-correlate x (B,C,D,H,W) with w (Cout,Cin,k,k,k) plus bias."""
    bsz, cin = x.shape[:2]
    cout, k = w.shape[0], w.shape[2]
    out_ext = _conv_out_extents(x.shape[2:], k, stride, pad)
    xpad = _pad_spatial(x, pad)
    nvox = int(np.prod(out_ext))
    acc = np.zeros((bsz * nvox, cout), dtype=x.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                xs = _shifted(xpad, (kd, kh, kw), out_ext, stride)
                xm = xs.transpose(0, 2, 3, 4, 1).reshape(-1, cin)
                acc += xm @ w[:, :, kd, kh, kw].T
    y = acc.reshape(bsz, *out_ext, cout).transpose(0, 4, 1, 2, 3)
    y = np.ascontiguousarray(y)
    if b is not None:
        y += b.reshape(1, cout, 1, 1, 1)
    return y


def conv3d_backward(x, w, gy, stride, pad, need_dx=True, need_dw=True):
    """Gradients of conv3d_forward w.r.t. input, weights and bias."""
    bsz, cin = x.shape[:2]
    cout, k = w.shape[0], w.shape[2]
    out_ext = gy.shape[2:]
    gym = gy.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
    db = gy.sum(axis=(0, 2, 3, 4))
    dw = np.zeros_like(w) if need_dw else None
    dxpad = None
    xpad = _pad_spatial(x, pad)
    if need_dx:
        dxpad = np.zeros_like(xpad)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                if need_dw:
                    xs = _shifted(xpad, (kd, kh, kw), out_ext, stride)
                    xm = xs.transpose(0, 2, 3, 4, 1).reshape(-1, cin)
                    dw[:, :, kd, kh, kw] = gym.T @ xm
                if need_dx:
                    contrib = gym @ w[:, :, kd, kh, kw]
                    contrib = contrib.reshape(bsz, *out_ext, cin)
                    target = _shifted(dxpad, (kd, kh, kw), out_ext, stride)
                    target += contrib.transpose(0, 4, 1, 2, 3)
    dx = None
    if need_dx:
        pd, ph, pw = pad
        d, h, wd = x.shape[2:]
        dx = np.ascontiguousarray(
            dxpad[:, :, pd : pd + d, ph : ph + h, pw : pw + wd]
        )
    return dx, dw, db


def maxpool_forward(x, window):
    """Max over non-overlapping window^3 blocks.

    Returns the pooled array and, per output voxel, the flat spatial
    index of the winning input voxel (ties: lowest flat index).
    """
    bsz, c, d, h, w = x.shape
    do, ho, wo = d // window, h // window, w // window
    xr = x.reshape(bsz, c, do, window, ho, window, wo, window)
    xt = xr.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        bsz, c, do, ho, wo, window**3
    )
    local = np.argmax(xt, axis=-1)
    y = np.take_along_axis(xt, local[..., None], axis=-1)[..., 0]
    kd = local // (window * window)
    kh = (local // window) % window
    kw = local % window
    gz = np.arange(do).reshape(1, 1, do, 1, 1) * window + kd
    gy = np.arange(ho).reshape(1, 1, 1, ho, 1) * window + kh
    gx = np.arange(wo).reshape(1, 1, 1, 1, wo) * window + kw
    idx = (gz * h + gy) * w + gx
    return np.ascontiguousarray(y), idx.astype(np.int64)


def maxpool_backward(gy, idx, x_shape):
    """Scatter the pooled gradient back to the argmax positions."""
    bsz, c = x_shape[:2]
    nspace = int(np.prod(x_shape[2:]))
    dxf = np.zeros((bsz, c, nspace), dtype=gy.dtype)
    np.put_along_axis(
        dxf, idx.reshape(bsz, c, -1), gy.reshape(bsz, c, -1), axis=2
    )
    return dxf.reshape(x_shape)


def _sample_coords(disp, extents):
    """Clamped sample coordinates and trilinear corner indices/fractions."""
    d, h, w = extents
    dt = disp.dtype
    gz = np.arange(d, dtype=dt).reshape(1, d, 1, 1)
    gy = np.arange(h, dtype=dt).reshape(1, 1, h, 1)
    gx = np.arange(w, dtype=dt).reshape(1, 1, 1, w)
    sz = np.clip(gz + disp[:, 0], 0, d - 1)
    sy = np.clip(gy + disp[:, 1], 0, h - 1)
    sx = np.clip(gx + disp[:, 2], 0, w - 1)
    iz0 = sz.astype(np.int64)
    iy0 = sy.astype(np.int64)
    ix0 = sx.astype(np.int64)
    fz = sz - iz0
    fy = sy - iy0
    fx = sx - ix0
    iz1 = np.minimum(iz0 + 1, d - 1)
    iy1 = np.minimum(iy0 + 1, h - 1)
    ix1 = np.minimum(ix0 + 1, w - 1)
    return (iz0, iy0, ix0), (iz1, iy1, ix1), (fz, fy, fx)


def _corner_flats(lo, hi, extents):
    """Flat spatial indices of the 8 surrounding corners, z/y/x bit order."""
    d, h, w = extents
    iz = (lo[0], hi[0])
    iy = (lo[1], hi[1])
    ix = (lo[2], hi[2])
    flats = []
    for bz in (0, 1):
        for by in (0, 1):
            for bx in (0, 1):
                flats.append((iz[bz] * h + iy[by]) * w + ix[bx])
    return flats


def _corner_weights(frac):
    fz, fy, fx = frac
    wz = (1 - fz, fz)
    wy = (1 - fy, fy)
    wx = (1 - fx, fx)
    weights = []
    for bz in (0, 1):
        for by in (0, 1):
            for bx in (0, 1):
                weights.append(wz[bz] * wy[by] * wx[bx])
    return weights


def warp_forward(vol, disp):
    """Trilinear resampling of vol (B,C,D,H,W) at identity + disp."""
    bsz, c = vol.shape[:2]
    ext = vol.shape[2:]
    lo, hi, frac = _sample_coords(disp, ext)
    flats = _corner_flats(lo, hi, ext)
    weights = _corner_weights(frac)
    vf = vol.reshape(bsz, c, -1)
    out = np.zeros((bsz, c) + tuple(ext), dtype=vol.dtype)
    for flat, wgt in zip(flats, weights):
        vals = np.take_along_axis(vf, flat.reshape(bsz, 1, -1), axis=2)
        out += wgt[:, None] * vals.reshape(bsz, c, *ext)
    return out


def warp_backward(vol, disp, gy, need_dvol=True, need_ddisp=True):
    """Gradients of warp_forward w.r.t. the volume and the displacement."""
    bsz, c = vol.shape[:2]
    ext = vol.shape[2:]
    d, h, w = ext
    lo, hi, frac = _sample_coords(disp, ext)
    flats = _corner_flats(lo, hi, ext)
    weights = _corner_weights(frac)
    fz, fy, fx = frac
    vf = vol.reshape(bsz, c, -1)

    dvol = None
    if need_dvol:
        dvf = np.zeros_like(vf)
        for flat, wgt in zip(flats, weights):
            vals = (wgt[:, None] * gy).reshape(bsz, c, -1)
            fl = flat.reshape(bsz, -1)
            for bi in range(bsz):
                for ci in range(c):
                    np.add.at(dvf[bi, ci], fl[bi], vals[bi, ci])
        dvol = dvf.reshape(vol.shape)

    ddisp = None
    if need_ddisp:
        corners = [
            np.take_along_axis(vf, flat.reshape(bsz, 1, -1), axis=2).reshape(
                bsz, c, *ext
            )
            for flat in flats
        ]
        # corner order is (bz, by, bx) bits: index = bz*4 + by*2 + bx
        wz = (1 - fz, fz)
        wy = (1 - fy, fy)
        wx = (1 - fx, fx)
        dz = np.zeros_like(fz)
        dy = np.zeros_like(fy)
        dx_ = np.zeros_like(fx)
        for by in (0, 1):
            for bx in (0, 1):
                diff = (corners[4 + by * 2 + bx] - corners[by * 2 + bx]) * gy
                dz += (wy[by] * wx[bx]) * diff.sum(axis=1)
        for bz in (0, 1):
            for bx in (0, 1):
                diff = (corners[bz * 4 + 2 + bx] - corners[bz * 4 + bx]) * gy
                dy += (wz[bz] * wx[bx]) * diff.sum(axis=1)
        for bz in (0, 1):
            for by in (0, 1):
                diff = (corners[bz * 4 + by * 2 + 1] - corners[bz * 4 + by * 2]) * gy
                dx_ += (wz[bz] * wy[by]) * diff.sum(axis=1)
        ddisp = np.stack([dz, dy, dx_], axis=1)
    return dvol, ddisp


def warp_nearest(labels, disp):
    """Nearest-neighbor warp of an integer label grid (D,H,W).

    Sample positions are rounded half-to-even and border-clamped, so an
    exact integer translation reproduces the lattice shift exactly.
    """
    d, h, w = labels.shape
    dt = disp.dtype
    gz = np.arange(d, dtype=dt).reshape(d, 1, 1)
    gy = np.arange(h, dtype=dt).reshape(1, h, 1)
    gx = np.arange(w, dtype=dt).reshape(1, 1, w)
    iz = np.clip(np.rint(gz + disp[0]), 0, d - 1).astype(np.int64)
    iy = np.clip(np.rint(gy + disp[1]), 0, h - 1).astype(np.int64)
    ix = np.clip(np.rint(gx + disp[2]), 0, w - 1).astype(np.int64)
    return labels[iz, iy, ix]
