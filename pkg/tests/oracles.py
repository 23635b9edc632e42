"""Independent reference computations used by the tests.

Nothing here imports the package's metric or warp code.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def gaussian_2d(size=11, sigma=1.5):
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ssim_terms_direct(x, y, win, c1, c2):
    """Mean luminance and contrast-structure terms, one window at a time."""
    wx = sliding_window_view(x, win.shape)
    wy = sliding_window_view(y, win.shape)
    mx = np.einsum("ijkl,kl->ij", wx, win)
    my = np.einsum("ijkl,kl->ij", wy, win)
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx = np.einsum("ijkl,kl->ij", dx * dx, win)
    vy = np.einsum("ijkl,kl->ij", dy * dy, win)
    cxy = np.einsum("ijkl,kl->ij", dx * dy, win)
    lum = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
    cs = (2 * cxy + c2) / (vx + vy + c2)
    return lum.mean(), cs.mean()


def downsample2(img):
    h, w = img.shape[0] - img.shape[0] % 2, img.shape[1] - img.shape[1] % 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def msssim_direct(a, b, data_range=1.0):
    weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    win = gaussian_2d()
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        val = 1.0
        for j, w in enumerate(weights):
            lum, cs = ssim_terms_direct(x, y, win, c1, c2)
            if j == len(weights) - 1:
                val *= max(lum * cs, 0.0) ** w
            else:
                val *= max(cs, 0.0) ** w
                x, y = downsample2(x), downsample2(y)
        scores.append(val)
    return float(np.mean(scores))


def bilinear_sample(img, x, y):
    """Sample one point with border clamping, scalar loop form."""
    h, w = img.shape[:2]
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return ((1 - ay) * ((1 - ax) * img[y0, x0] + ax * img[y0, x1])
            + ay * ((1 - ax) * img[y1, x0] + ax * img[y1, x1]))


def translate(img, dx, dy):
    """``out(x, y) = img(x - dx, y - dy)`` on the interior; edges replicate."""
    h, w = img.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[ys][:, xs]
