"""Seeded synthesis of every corruption regime used for training and tests.

Cubes are (H, W, B) arrays with values nominally in [0, 1]. Noise is
purely additive or replacing; nothing is clipped afterwards, so values
may leave [0, 1]. Gaussian strengths are quoted on the 0..255 intensity
scale and divided by 255 before use.

Regimes:
  gaussian-iid     one sigma for the whole cube
  case 1           per-band sigma drawn uniform from [10, 70]
  case 2           case 1 plus stripes on a third of the bands
  case 3           case 1 plus dead (zeroed) columns on a third of the bands
  case 4           case 1 plus salt-and-pepper pixels on a third of the bands
  case 5           case 1 everywhere, then each band independently gets each
                   sparse type with probability 1/3 (redrawn until at least
                   one band is hit)

Every draw comes from numpy's PCG64 via default_rng, seeded through
SeedSequence([*seed_path, op_tag, band]): one substream per op per band,
so evaluation order can never change the result. Seeds may be a single
int or a sequence of ints. The sparse-noise parameters the literature
leaves open are fixed here and recorded in the CorruptionReport: stripes
add a per-column constant offset of magnitude uniform [0.05, 0.15] with
random sign, deadlines are width-1 columns set to exactly 0, impulse
pixels are replaced by 0 or 1 equiprobably.
"""

import math

import numpy as np

# Op tags keep the per-op substreams disjoint under a shared user seed.
_TAG_IID = 1
_TAG_NONIID = 2
_TAG_STRIPE = 3
_TAG_DEADLINE = 4
_TAG_IMPULSE = 5
_TAG_CASE5 = 6

CASES = (1, 2, 3, 4, 5)


class NoiseError(ValueError):
    """Invalid noise parameters."""


def _seed_path(seed):
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def _rng(seed, *path):
    return np.random.default_rng(np.random.SeedSequence(_seed_path(seed) + list(path)))


def _check_cube(x):
    x = np.asarray(x)
    if x.ndim != 3:
        raise NoiseError(f"cube must have axes (H, W, B), got {x.ndim} axes")
    return x


class CorruptionReport:
    """Record of exactly what a synthesis call did, for reproducibility.

    Band numbers are 1-based in the report (and in its text form); column
    and pixel counts refer to single bands.
    """

    def __init__(self, regime):
        self.regime = regime
        self.sigma_per_band = None
        self.stripes = {}      # band -> sorted list of column indices
        self.deadlines = {}    # band -> sorted list of column indices
        self.impulses = {}     # band -> (fraction, pixel count)
        self.notes = {}

    def sparse_band_count(self):
        bands = set(self.stripes) | set(self.deadlines) | set(self.impulses)
        return len(bands)

    def merge(self, other):
        if other.sigma_per_band is not None:
            self.sigma_per_band = other.sigma_per_band
        self.stripes.update(other.stripes)
        self.deadlines.update(other.deadlines)
        self.impulses.update(other.impulses)
        self.notes.update(other.notes)
        return self

    def to_text(self):
        lines = [f"regime: {self.regime}"]
        if self.sigma_per_band is not None:
            sig = " ".join(f"{s:.6f}" for s in self.sigma_per_band)
            lines.append(f"sigma-per-band (0..255 scale): {sig}")
        for label, table in (("stripe", self.stripes), ("deadline", self.deadlines)):
            for band in sorted(table):
                cols = " ".join(str(c) for c in table[band])
                lines.append(f"{label} band {band}: columns {cols}")
        for band in sorted(self.impulses):
            frac, count = self.impulses[band]
            lines.append(f"impulse band {band}: fraction {frac:.6f} pixels {count}")
        for key in sorted(self.notes):
            lines.append(f"note {key}: {self.notes[key]}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def add_gaussian_iid(x, sigma, seed):
    """y = x + N(0, (sigma/255)^2), elementwise, no clipping."""
    x = _check_cube(x)
    if sigma < 0:
        raise NoiseError(f"sigma must be non-negative, got {sigma}")
    y = x.copy()
    if sigma == 0:
        return y
    h, w, b = x.shape
    for band in range(b):
        n = _rng(seed, _TAG_IID, band).normal(0.0, sigma / 255.0, size=(h, w))
        y[:, :, band] += n.astype(x.dtype, copy=False)
    return y


def add_noniid_gaussian(x, seed):
    """Per-band Gaussian with sigma_b drawn uniform from [10, 70]."""
    x = _check_cube(x)
    h, w, b = x.shape
    sigmas = _rng(seed, _TAG_NONIID, 0).uniform(10.0, 70.0, size=b)
    y = x.copy()
    for band in range(b):
        n = _rng(seed, _TAG_NONIID, 1 + band).normal(0.0, sigmas[band] / 255.0, size=(h, w))
        y[:, :, band] += n.astype(x.dtype, copy=False)
    report = CorruptionReport("noniid-gaussian")
    report.sigma_per_band = [float(s) for s in sigmas]
    return y, report


def _sparse_band_count(b):
    """A third of the bands, rounded down, at least one."""
    return max(1, b // 3)


def _pick_bands(x, seed, tag):
    b = x.shape[2]
    master = _rng(seed, tag, 0)
    k = _sparse_band_count(b)
    return sorted(int(v) for v in master.choice(b, size=k, replace=False))


def _column_count(rng, w):
    """5% to 15% of columns; the count is clamped so the realized fraction
    stays inside the range wherever the width allows it."""
    u = rng.uniform(0.05, 0.15)
    lo = max(1, math.ceil(0.05 * w))
    hi = max(lo, math.floor(0.15 * w))
    return min(max(int(round(u * w)), lo), hi)


def _stripe_band(y, band, rng, report):
    h, w, _ = y.shape
    cols = sorted(int(c) for c in rng.choice(w, size=_column_count(rng, w), replace=False))
    mags = rng.uniform(0.05, 0.15, size=len(cols))
    signs = np.where(rng.random(len(cols)) < 0.5, -1.0, 1.0)
    for col, mag, sign in zip(cols, mags, signs):
        y[:, col, band] += np.asarray(sign * mag, dtype=y.dtype)
    report.stripes[band + 1] = cols


def _deadline_band(y, band, rng, report):
    h, w, _ = y.shape
    cols = sorted(int(c) for c in rng.choice(w, size=_column_count(rng, w), replace=False))
    for col in cols:
        y[:, col, band] = 0.0
    report.deadlines[band + 1] = cols


def _impulse_band(y, band, rng, report):
    h, w, _ = y.shape
    frac = rng.uniform(0.10, 0.70)
    count = int(round(frac * h * w))
    flat = rng.choice(h * w, size=count, replace=False)
    vals = rng.integers(0, 2, size=count).astype(y.dtype)
    plane = y[:, :, band].reshape(-1)
    plane[flat] = vals
    y[:, :, band] = plane.reshape(h, w)
    report.impulses[band + 1] = (float(frac), count)


def _add_sparse(x, seed, tag, apply_band, regime):
    x = _check_cube(x)
    y = x.copy()
    report = CorruptionReport(regime)
    for band in _pick_bands(x, seed, tag):
        apply_band(y, band, _rng(seed, tag, 1 + band), report)
    return y, report


def add_stripes(x, seed):
    """Constant-offset stripes on a third of the bands; other bands are
    left bit-identical."""
    y, report = _add_sparse(x, seed, _TAG_STRIPE, _stripe_band, "stripes")
    report.notes["stripe-amplitude"] = "uniform 0.05..0.15, random sign, whole column"
    return y, report


def add_deadline(x, seed):
    """Width-1 dead columns (exact zeros) on a third of the bands."""
    return _add_sparse(x, seed, _TAG_DEADLINE, _deadline_band, "deadline")


def add_impulse(x, seed):
    """Salt-and-pepper pixels on a third of the bands; the per-band
    fraction is drawn uniform from [0.10, 0.70] and hit exactly."""
    y, report = _add_sparse(x, seed, _TAG_IMPULSE, _impulse_band, "impulse")
    report.notes["impulse-values"] = "replaced pixels set to 0 or 1 equiprobably"
    return y, report


def synthesize_case(x, case, seed):
    """One of the five compound regimes; returns (cube, CorruptionReport).

    Cases 2-4 are the per-band Gaussian of case 1 followed by one sparse
    noise type. Case 5 is the case-1 Gaussian followed by per-band coin
    flips (probability 1/3 each) for stripes, deadlines and impulses,
    redrawn until at least one band gets at least one sparse corruption.
    """
    x = _check_cube(x)
    if case not in CASES:
        raise NoiseError(f"case must be one of {CASES}, got {case}")
    base = _seed_path(seed)
    y, report = add_noniid_gaussian(x, base + [0])
    report.regime = f"case-{case}"
    if case == 1:
        return y, report
    if case == 2:
        y2, rep2 = add_stripes(y, base + [1])
    elif case == 3:
        y2, rep2 = add_deadline(y, base + [1])
    elif case == 4:
        y2, rep2 = add_impulse(y, base + [1])
    else:
        y2, rep2 = _case5_sparse(y, base + [1])
    return y2, report.merge(rep2)


def _case5_sparse(y, seed):
    h, w, b = y.shape
    master = _rng(seed, _TAG_CASE5, 0)
    while True:
        coins = master.random((b, 3)) < (1.0 / 3.0)
        if coins.any():
            break
    out = y.copy()
    report = CorruptionReport("mixture-sparse")
    appliers = (_stripe_band, _deadline_band, _impulse_band)
    for band in range(b):
        for kind in range(3):
            if coins[band, kind]:
                appliers[kind](out, band, _rng(seed, _TAG_CASE5, 1 + band, kind), report)
    report.notes["mixture-rule"] = (
        "per band, each sparse type applied with probability 1/3; "
        "redrawn until at least one hit"
    )
    report.notes["stripe-amplitude"] = "uniform 0.05..0.15, random sign, whole column"
    report.notes["impulse-values"] = "replaced pixels set to 0 or 1 equiprobably"
    return out, report
