"""Hot pixel loops used by the reference recovery backends.

Each kernel has a numba implementation (``*_nb``) and a vectorised numpy
implementation (``*_np``). The public wrappers dispatch on
:func:`sbprobe._accel.use_numba`, so ``SBPROBE_DISABLE_NUMBA=1`` switches the
whole package to the numpy path. Both paths compute the same quantity; the
iterative harmonic fill agrees to the solver tolerance, the others to
round-off.

All kernels take float64 ``(h, w, c)`` arrays and never modify their input.
"""
from __future__ import annotations

import numpy as np

from ._accel import njit, use_numba

# ---------------------------------------------------------------------------
# harmonic (diffusion) fill
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _harmonic_fill_nb(pixels, known, tol, max_iter, omega):
    h, w, c = pixels.shape
    out = pixels.copy()
    n_unknown = 0
    for y in range(h):
        for x in range(w):
            if not known[y, x]:
                n_unknown += 1
    if n_unknown == 0:
        return out
    ys = np.empty(n_unknown, np.int64)
    xs = np.empty(n_unknown, np.int64)
    k = 0
    n_known = 0
    for y in range(h):
        for x in range(w):
            if known[y, x]:
                n_known += 1
            else:
                ys[k] = y
                xs[k] = x
                k += 1
    for ch in range(c):
        init = 0.5
        if n_known > 0:
            s = 0.0
            for y in range(h):
                for x in range(w):
                    if known[y, x]:
                        s += pixels[y, x, ch]
            init = s / n_known
        for i in range(n_unknown):
            out[ys[i], xs[i], ch] = init
        if n_known == 0:
            continue
        for _ in range(max_iter):
            delta = 0.0
            for i in range(n_unknown):
                y = ys[i]
                x = xs[i]
                acc = 0.0
                cnt = 0
                if y > 0:
                    acc += out[y - 1, x, ch]
                    cnt += 1
                if y < h - 1:
                    acc += out[y + 1, x, ch]
                    cnt += 1
                if x > 0:
                    acc += out[y, x - 1, ch]
                    cnt += 1
                if x < w - 1:
                    acc += out[y, x + 1, ch]
                    cnt += 1
                old = out[y, x, ch]
                new = old + omega * (acc / cnt - old)
                out[y, x, ch] = new
                d = abs(new - old)
                if d > delta:
                    delta = d
            if delta < tol:
                break
    return out


def _harmonic_fill_np(pixels, known, tol, max_iter, omega=None):
    # Jacobi sweeps; omega is accepted for signature parity and ignored.
    h, w, c = pixels.shape
    out = pixels.copy()
    unknown = ~known
    if not unknown.any():
        return out
    n_known = int(known.sum())
    for ch in range(c):
        init = float(pixels[:, :, ch][known].mean()) if n_known else 0.5
        out[:, :, ch][unknown] = init
    if n_known == 0:
        return out
    cnt = np.zeros((h, w))
    cnt[1:, :] += 1
    cnt[:-1, :] += 1
    cnt[:, 1:] += 1
    cnt[:, :-1] += 1
    cnt = cnt[:, :, None]
    for _ in range(max_iter):
        acc = np.zeros_like(out)
        acc[1:] += out[:-1]
        acc[:-1] += out[1:]
        acc[:, 1:] += out[:, :-1]
        acc[:, :-1] += out[:, 1:]
        upd = acc / cnt
        delta = np.abs(upd - out)[unknown].max()
        out[unknown] = upd[unknown]
        if delta < tol:
            break
    return out


def harmonic_fill(pixels: np.ndarray, known: np.ndarray, tol: float = 1e-7,
                  max_iter: int = 20000, omega: float = 1.6) -> np.ndarray:
    """Fill ``~known`` pixels with the discrete harmonic interpolant of the known ones.

    Known pixels are returned bit-identical. Unknown pixels solve the
    4-neighbour Laplace equation; at the image border missing neighbours are
    dropped (zero-flux boundary). If no pixel is
    known the hole is filled with 0.5.
    """
    pixels = np.ascontiguousarray(pixels, dtype=np.float64)
    known = np.ascontiguousarray(known, dtype=np.bool_)
    if use_numba():
        return _harmonic_fill_nb(pixels, known, float(tol), int(max_iter), float(omega))
    return _harmonic_fill_np(pixels, known, float(tol), int(max_iter))


# ---------------------------------------------------------------------------
# median filter
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True, inline="always")
def _reflect(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


@njit(cache=True, nogil=True)
def _median_nb(pixels, radius):
    h, w, c = pixels.shape
    out = np.empty_like(pixels)
    size = (2 * radius + 1) ** 2
    buf = np.empty(size, np.float64)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                k = 0
                for dy in range(-radius, radius + 1):
                    yy = _reflect(y + dy, h)
                    for dx in range(-radius, radius + 1):
                        # insertion sort while filling; the window size is odd
                        v = pixels[yy, _reflect(x + dx, w), ch]
                        j = k
                        while j > 0 and buf[j - 1] > v:
                            buf[j] = buf[j - 1]
                            j -= 1
                        buf[j] = v
                        k += 1
                out[y, x, ch] = buf[size // 2]
    return out


def _median_np(pixels, radius):
    padded = np.pad(pixels, ((radius, radius), (radius, radius), (0, 0)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (2 * radius + 1, 2 * radius + 1), axis=(0, 1))
    return np.median(win.reshape(win.shape[0], win.shape[1], win.shape[2], -1), axis=-1)


def median_filter(pixels: np.ndarray, radius: int) -> np.ndarray:
    """Per-channel median over a (2r+1)^2 window with mirror borders."""
    pixels = np.ascontiguousarray(pixels, dtype=np.float64)
    if radius <= 0:
        return pixels.copy()
    if radius >= min(pixels.shape[:2]):
        raise ValueError("median radius must be smaller than the image")
    if use_numba():
        return _median_nb(pixels, int(radius))
    return _median_np(pixels, int(radius))


# ---------------------------------------------------------------------------
# non-local means
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _nlmeans_nb(pixels, patch, search, h2):
    h, w, c = pixels.shape
    pr = patch
    pad = patch + search
    hp = h + 2 * pad
    wp = w + 2 * pad
    padded = np.empty((hp, wp, c), np.float64)
    for y in range(hp):
        yy = _reflect(y - pad, h)
        for x in range(wp):
            xx = _reflect(x - pad, w)
            for ch in range(c):
                padded[y, x, ch] = pixels[yy, xx, ch]
    norm = float((2 * pr + 1) ** 2 * c)
    out = np.empty_like(pixels)
    acc = np.empty(c, np.float64)
    for y in range(h):
        for x in range(w):
            py = y + pad
            px = x + pad
            wsum = 0.0
            for ch in range(c):
                acc[ch] = 0.0
            for sy in range(-search, search + 1):
                for sx in range(-search, search + 1):
                    d2 = 0.0
                    for dy in range(-pr, pr + 1):
                        for dx in range(-pr, pr + 1):
                            for ch in range(c):
                                diff = padded[py + dy, px + dx, ch] - padded[py + sy + dy, px + sx + dx, ch]
                                d2 += diff * diff
                    wt = np.exp(-(d2 / norm) / h2)
                    wsum += wt
                    for ch in range(c):
                        acc[ch] += wt * padded[py + sy, px + sx, ch]
            for ch in range(c):
                out[y, x, ch] = acc[ch] / wsum
    return out


def _nlmeans_np(pixels, patch, search, h2):
    h, w, c = pixels.shape
    pad = patch + search
    padded = np.pad(pixels, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    core_h, core_w = h + 2 * patch, w + 2 * patch
    centre = padded[search:search + core_h, search:search + core_w]
    norm = float((2 * patch + 1) ** 2 * c)
    acc = np.zeros_like(pixels)
    wsum = np.zeros((h, w))
    k = 2 * patch + 1
    for sy in range(-search, search + 1):
        for sx in range(-search, search + 1):
            shifted = padded[search + sy:search + sy + core_h, search + sx:search + sx + core_w]
            sq = ((centre - shifted) ** 2).sum(axis=2)
            win = np.lib.stride_tricks.sliding_window_view(sq, (k, k))
            d2 = win.sum(axis=(2, 3))
            wt = np.exp(-(d2 / norm) / h2)
            wsum += wt
            acc += wt[:, :, None] * shifted[patch:patch + h, patch:patch + w]
    return acc / wsum[:, :, None]


def nl_means(pixels: np.ndarray, patch_radius: int = 1, search_radius: int = 3,
             strength: float = 0.1) -> np.ndarray:
    """Non-local means with exp(-mean_sq_patch_dist / strength^2) weights."""
    pixels = np.ascontiguousarray(pixels, dtype=np.float64)
    if strength <= 0:
        raise ValueError("strength must be positive")
    if patch_radius + search_radius >= min(pixels.shape[:2]):
        raise ValueError("patch + search radius must be smaller than the image")
    h2 = float(strength) ** 2
    if use_numba():
        return _nlmeans_nb(pixels, int(patch_radius), int(search_radius), h2)
    return _nlmeans_np(pixels, int(patch_radius), int(search_radius), h2)
