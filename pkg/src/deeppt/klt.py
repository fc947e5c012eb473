"""Pyramidal Lucas-Kanade point tracking with a forward-backward check."""
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator


def build_pyramid(img, levels=3):
    """Level 0 is the image (float64); each next level is a 2x2 block mean."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    base = np.asarray(img, dtype=np.float64)
    h, w = base.shape
    if (h >> (levels - 1)) < 1 or (w >> (levels - 1)) < 1:
        raise ValueError(f"{h}x{w} image too small for {levels} pyramid levels")
    pyr = [base]
    for _ in range(levels - 1):
        prev = pyr[-1]
        h2, w2 = prev.shape[0] // 2, prev.shape[1] // 2
        pyr.append(prev[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3)))
    return pyr


def _gradients(img):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = (img[:, 2:] - img[:, :-2]) / 2.0
    gy[1:-1, :] = (img[2:, :] - img[:-2, :]) / 2.0
    return gx, gy


def _sample(img, xs, ys):
    return ndimage.map_coordinates(img, [ys.ravel(), xs.ravel()], order=1, mode="nearest")


def check_margins(pyr, p, window):
    """Raise ValueError unless the window around ``p`` fits at every level."""
    half = window // 2
    x, y = p
    for level, img in enumerate(pyr):
        s = 2.0**level
        lx, ly = x / s, y / s
        h, w = img.shape
        if not (half + 1 <= lx <= w - half - 2 and half + 1 <= ly <= h - half - 2):
            raise ValueError(f"point ({x:.2f}, {y:.2f}) too close to the border for level {level}")


def lk_track_point(pyr_t, pyr_t1, p, window=11, iterations=20, eps=0.01):
    """Coarse-to-fine iterative Lucas-Kanade for one point.

    Returns ``(p_new, converged)``. ``converged`` is False when the
    structure tensor is near-singular at any level or the finest level
    hits the iteration cap without the update dropping below ``eps``.
    """
    if len(pyr_t) != len(pyr_t1):
        raise ValueError("pyramids differ in depth")
    p = np.asarray(p, dtype=np.float64)
    check_margins(pyr_t, p, window)
    half = window // 2
    offs = np.arange(-half, half + 1, dtype=np.float64)
    wy, wx = np.meshgrid(offs, offs, indexing="ij")
    min_eig = 1e-6 * window * window
    guess = np.zeros(2)
    converged = True
    for level in range(len(pyr_t) - 1, -1, -1):
        img_t, img_t1 = pyr_t[level], pyr_t1[level]
        gx, gy = _gradients(img_t)
        px, py = p / 2.0**level
        xs, ys = wx + px, wy + py
        ix = _sample(gx, xs, ys)
        iy = _sample(gy, xs, ys)
        tmpl = _sample(img_t, xs, ys)
        G = np.array([[ix @ ix, ix @ iy], [ix @ iy, iy @ iy]])
        if np.linalg.eigvalsh(G)[0] < min_eig:
            return p + guess * 2.0**level, False
        d = np.zeros(2)
        level_done = False
        for _ in range(iterations):
            warped = _sample(img_t1, xs + guess[0] + d[0], ys + guess[1] + d[1])
            err = tmpl - warped
            delta = np.linalg.solve(G, np.array([err @ ix, err @ iy]))
            d += delta
            if np.hypot(*delta) < eps:
                level_done = True
                break
        if level == 0:
            converged = level_done
            guess = guess + d
        else:
            guess = 2.0 * (guess + d)
    return p + guess, converged


def fb_track(pyr_t, pyr_t1, p, window=11, iterations=20, eps=0.01, fb_threshold=1.0):
    """Forward then backward LK. Returns ``(p_new, reliable, fb_error)``.

    ``fb_error`` is infinite when the backward pass cannot start because
    the forward result left the valid margins.
    """
    p = np.asarray(p, dtype=np.float64)
    fwd, ok_f = lk_track_point(pyr_t, pyr_t1, p, window, iterations, eps)
    try:
        back, ok_b = lk_track_point(pyr_t1, pyr_t, fwd, window, iterations, eps)
    except ValueError:
        return fwd, False, float("inf")
    fb_err = float(np.hypot(*(p - back)))
    return fwd, bool(ok_f and ok_b and fb_err <= fb_threshold), fb_err


class KLTTracker(BaseEstimator):
    """Forward-backward pyramidal KLT, the comparison baseline.

    Stateless: :meth:`fit` is a no-op kept for estimator compatibility.
    """

    def __init__(self, levels=3, window=11, iterations=20, eps=0.01, fb_threshold=1.0):
        self.levels = levels
        self.window = window
        self.iterations = iterations
        self.eps = eps
        self.fb_threshold = fb_threshold

    def fit(self, X=None, y=None):
        return self

    def track(self, img_t, img_t1, points):
        """Track (N, 2) ``(x, y)`` points. Returns new points, reliable flags, fb errors.

        Points that fail the margin check come back unchanged and unreliable.
        """
        pyr_t = build_pyramid(img_t, self.levels)
        pyr_t1 = build_pyramid(img_t1, self.levels)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        out = points.copy()
        reliable = np.zeros(len(points), dtype=bool)
        fb = np.full(len(points), np.inf)
        for i, p in enumerate(points):
            try:
                out[i], reliable[i], fb[i] = fb_track(
                    pyr_t, pyr_t1, p, self.window, self.iterations, self.eps, self.fb_threshold
                )
            except ValueError:
                continue
        return out, reliable, fb
