"""Quality indices over (H, W, B) cubes: PSNR, SSIM, SAM.

PSNR and SSIM are computed per band against a peak/dynamic range of 1 and
averaged over bands (the usual convention for hyperspectral stacks). SAM
is the mean per-pixel angle between the two spectra, in radians. All
internal arithmetic is float64 regardless of input dtype.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensors import ConfigError, ShapeError


class MetricError(ValueError):
    """The metric is undefined for these inputs."""


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.ndim != 3 or ref.ndim != 3:
        raise ShapeError("metrics expect (H, W, B) cubes")
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr_per_band(x, ref):
    """10 log10(1 / MSE_b) per band; +inf where a band is identical."""
    x, ref = _pair(x, ref)
    mse = np.mean((x - ref) ** 2, axis=(0, 1))
    out = np.full(mse.shape, np.inf)
    nz = mse > 0
    out[nz] = 10.0 * np.log10(1.0 / mse[nz])
    return out


def psnr(x, ref):
    """Band-averaged PSNR in dB (+inf if every band is identical)."""
    return float(np.mean(psnr_per_band(x, ref)))


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _windowed_mean(plane, win):
    """Weighted mean over every valid (fully inside) window position."""
    v = sliding_window_view(plane, win.shape)
    return np.tensordot(v, win, axes=([2, 3], [0, 1]))


def ssim(x, ref, k1=0.01, k2=0.03, data_range=1.0):
    """Mean structural similarity: 11x11 Gaussian windows (sigma 1.5) over
    the valid region of each band, averaged over windows and bands."""
    x, ref = _pair(x, ref)
    h, w, _ = x.shape
    if h < 11 or w < 11:
        raise ConfigError(f"spatial extent {h}x{w} too small for an 11x11 window")
    win = _gaussian_window()
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for band in range(x.shape[2]):
        a = x[:, :, band]
        b = ref[:, :, band]
        mu_a = _windowed_mean(a, win)
        mu_b = _windowed_mean(b, win)
        # Moment form: var = E[x^2] - mu^2, cov = E[xy] - mu_a mu_b.
        var_a = _windowed_mean(a * a, win) - mu_a * mu_a
        var_b = _windowed_mean(b * b, win) - mu_b * mu_b
        cov = _windowed_mean(a * b, win) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def sam(x, ref):
    """Mean spectral angle in radians over pixels where both spectra are
    nonzero; errors out if no pixel qualifies.

    Computed through the chord between unit spectra, 2 asin(|u - v| / 2),
    which equals acos of the clamped cosine but stays exact for colinear
    inputs instead of losing the angle to roundoff near cos = 1.
    """
    x, ref = _pair(x, ref)
    nx = np.sqrt(np.sum(x * x, axis=2))
    nr = np.sqrt(np.sum(ref * ref, axis=2))
    valid = (nx > 0) & (nr > 0)
    if not valid.any():
        raise MetricError("spectral angle undefined: every pixel has a zero spectrum")
    u = x[valid] / nx[valid][:, None]
    v = ref[valid] / nr[valid][:, None]
    chord = np.sqrt(np.sum((u - v) ** 2, axis=1))
    # The clip keeps asin's argument in range, the same guard a direct
    # arccos(cos) form needs for |cos| slightly above 1.
    angles = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    return float(np.mean(angles))


def metrics_triple(x, ref):
    """(psnr dB, ssim, sam radians) in one call."""
    return psnr(x, ref), ssim(x, ref), sam(x, ref)
