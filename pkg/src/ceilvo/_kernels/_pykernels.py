"""Pure numpy fallback for the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def bilinear(img, u, v):
    """Bilinear samples of ``img`` at ``(u, v)`` plus the exact partials of the interpolant.

    Points outside ``[0, w-1] x [0, h-1]`` get ``ok = False`` and zeros elsewhere.
    """
    h, w = img.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ok = (u >= 0.0) & (u <= w - 1) & (v >= 0.0) & (v <= h - 1)
    uu = np.where(ok, u, 0.0)
    vv = np.where(ok, v, 0.0)
    x0 = np.minimum(np.floor(uu).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(vv).astype(np.intp), h - 2)
    fx = uu - x0
    fy = vv - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    val = (1.0 - fy) * ((1.0 - fx) * i00 + fx * i01) + fy * ((1.0 - fx) * i10 + fx * i11)
    du = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    dv = (1.0 - fx) * (i10 - i00) + fx * (i11 - i01)
    val[~ok] = 0.0
    du[~ok] = 0.0
    dv[~ok] = 0.0
    return val, du, dv, ok


def downsample2(img):
    h, w = img.shape[0] // 2, img.shape[1] // 2
    c = img[: 2 * h, : 2 * w]
    return 0.25 * (c[0::2, 0::2] + c[0::2, 1::2] + c[1::2, 0::2] + c[1::2, 1::2])


def central_gradient(img):
    p = np.pad(img, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy
