"""Spectral-dependency diagnostics computed from a captured pooling trace.

Unrolling the gated recurrence writes each hidden state as a sum of per-band
contributions: for a forward pass

    h_j = sum_{i <= j} phi_j(z_i),
    phi_j(z_i) = f_j * f_{j-1} * ... * f_{i+1} * (1 - f_i) * z_i

and the mirror-image sum over i >= j for a backward pass.  The strength of
band i's contribution to band j is measured as the Frobenius norm of the
element-wise ratio phi_j(z_i) / h_j, giving a band-by-band matrix whose rows
say which input bands an output band actually drew from.

Hidden elements with |h| below an epsilon are excluded from the ratio (the
count of exclusions is kept as metadata); a hidden state that is zero
everywhere yields an absent entry.  Absent entries, including the empty
triangle of a one-directional trace, are stored as NaN, never as 0.
"""

import csv
import io

import numpy as np

from .qru import BACKWARD, FORWARD, PoolingTrace, _band_order
from .tensors import ConfigError


class GcsMatrix:
    """Band-contribution matrix for one directional trace.

    `values[i, j]` (zero-based) is the contribution strength of band i+1 to
    band j+1; undefined cells are NaN.  `excluded[j]` counts hidden elements
    of band j+1 dropped by the epsilon guard, out of `h_numel` per band.
    """

    __slots__ = ("values", "direction", "h_numel", "excluded", "eps")

    def __init__(self, values, direction, h_numel, excluded, eps):
        self.values = values
        self.direction = direction
        self.h_numel = h_numel
        self.excluded = excluded
        self.eps = eps

    @property
    def n_bands(self):
        return self.values.shape[0]

    def defined(self):
        return ~np.isnan(self.values)


def _check_band_index(name, value, n_bands):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise ConfigError(f"{name} must be an integer band index, got {value!r}")
    if value < 1 or value > n_bands:
        raise ConfigError(f"{name}={value} outside the band range 1..{n_bands}")


def phi(trace, i, j):
    """Contribution of band i to hidden state j (1-based band indices).

    The walk runs in the trace's own direction, so a forward trace requires
    i <= j and a backward trace requires i >= j.
    """
    if not isinstance(trace, PoolingTrace):
        raise ConfigError("phi needs a single-direction pooling trace")
    n_bands = trace.z.shape[-1]
    _check_band_index("i", i, n_bands)
    _check_band_index("j", j, n_bands)
    order = list(_band_order(n_bands, trace.direction))
    pos = {band: p for p, band in enumerate(order)}
    pi, pj = pos[i - 1], pos[j - 1]
    if pi > pj:
        raise ConfigError(
            f"band {i} is processed after band {j} in a {trace.direction} trace")
    out = (1.0 - trace.f[..., i - 1]) * trace.z[..., i - 1]
    for p in range(pi + 1, pj + 1):
        out = out * trace.f[..., order[p]]
    return out


def gcs_matrix(trace, eps=1e-6):
    """Band-contribution matrix of one trace.

    Contributions are accumulated incrementally along the walk (each step
    multiplies all earlier contributions by the new gate), so the whole
    matrix costs one extra recurrence pass rather than one per cell.
    """
    if not isinstance(trace, PoolingTrace):
        raise ConfigError("gcs_matrix needs a single-direction pooling trace")
    z = np.asarray(trace.z, dtype=np.float64)
    f = np.asarray(trace.f, dtype=np.float64)
    h = np.asarray(trace.h, dtype=np.float64)
    n_bands = z.shape[-1]
    h_numel = int(np.prod(z.shape[:-1]))
    values = np.full((n_bands, n_bands), np.nan)
    excluded = np.zeros(n_bands, dtype=np.int64)
    order = list(_band_order(n_bands, trace.direction))
    contrib = np.zeros_like(z)
    for p, b in enumerate(order):
        gate = f[..., b]
        for earlier in order[:p]:
            contrib[..., earlier] *= gate
        contrib[..., b] = (1.0 - gate) * z[..., b]
        include = np.abs(h[..., b]) >= eps
        excluded[b] = h_numel - int(np.count_nonzero(include))
        if excluded[b] == h_numel:
            continue
        denom = h[..., b][include]
        for i in order[:p + 1]:
            ratio = contrib[..., i][include] / denom
            values[i, b] = float(np.sqrt(np.sum(ratio * ratio)))
    return GcsMatrix(values, trace.direction, h_numel, excluded, eps)


class RelativeBands:
    """Per-output-band counts of contributing bands, split by side."""

    __slots__ = ("total", "forward", "backward", "threshold")

    def __init__(self, total, fwd, bwd, threshold):
        self.total = total
        self.forward = fwd
        self.backward = bwd
        self.threshold = threshold


def relative_bands(gcs, h_numels=None):
    """Count, per output band j, the bands whose contribution is at least a
    10 percent perturbation: GCS_ij >= 0.1 * sqrt(numel of h_j).

    The split counts classify contributors by side: `forward[j]` counts
    i < j and `backward[j]` counts i > j; the diagonal lands in neither
    split but does count toward `total`.
    """
    n_bands = gcs.n_bands
    if h_numels is None:
        numels = np.full(n_bands, gcs.h_numel, dtype=np.float64)
    else:
        numels = np.asarray(h_numels, dtype=np.float64)
        if numels.shape != (n_bands,):
            raise ConfigError(f"need one numel per band, got shape {numels.shape}")
    threshold = 0.1 * np.sqrt(numels)
    with np.errstate(invalid="ignore"):
        hit = gcs.defined() & (gcs.values >= threshold[np.newaxis, :])
    total = hit.sum(axis=0).astype(np.int64)
    rows = np.arange(n_bands)[:, np.newaxis]
    cols = np.arange(n_bands)[np.newaxis, :]
    fwd = (hit & (rows < cols)).sum(axis=0).astype(np.int64)
    bwd = (hit & (rows > cols)).sum(axis=0).astype(np.int64)
    return RelativeBands(total, fwd, bwd, threshold)


def relative_band_histogram(matrices):
    """Empirical distribution of relative-band counts, pooled over every
    output band of every matrix; index k holds the number of observations
    with exactly k relative bands."""
    totals = []
    for m in matrices:
        totals.extend(relative_bands(m).total.tolist())
    if not totals:
        raise ConfigError("no traces to pool a histogram from")
    return np.bincount(np.asarray(totals, dtype=np.int64))


def pooling_traces(net_traces, layer):
    """The pooling traces of one layer out of a network forward pass
    (one trace per direction branch; zero-based layer index)."""
    units = net_traces["units"]
    if layer < 0 or layer >= len(units):
        raise ConfigError(f"layer {layer} outside 0..{len(units) - 1}")
    unit_trace = units[layer]
    branches = unit_trace[1]
    if not (isinstance(branches, list)
            and all(isinstance(t, PoolingTrace) for t in branches)):
        raise ConfigError(f"layer {layer} has no pooling recurrence to analyze")
    return branches


def overlay_values(matrices):
    """Single dense view of one or more triangular matrices (element-wise
    max, ignoring absent cells); used for the combined heat map."""
    if not matrices:
        raise ConfigError("nothing to overlay")
    out = matrices[0].values.copy()
    for m in matrices[1:]:
        if m.values.shape != out.shape:
            raise ConfigError("matrices to overlay must share a band count")
        out = np.fmax(out, m.values)
    return out


def gcs_to_csv(gcs):
    """CSV rendering: comment lines carry the metadata, then one header row
    and one row per contributing band; absent cells are empty."""
    buf = io.StringIO()
    buf.write(f"# direction: {gcs.direction}\n")
    buf.write(f"# eps: {gcs.eps:g}\n")
    buf.write(f"# h_numel: {gcs.h_numel}\n")
    buf.write("# excluded: " + ",".join(str(int(e)) for e in gcs.excluded) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    n = gcs.n_bands
    writer.writerow(["band"] + [str(j + 1) for j in range(n)])
    for i in range(n):
        row = [str(i + 1)]
        for j in range(n):
            v = gcs.values[i, j]
            row.append("" if np.isnan(v) else f"{v:.8g}")
        writer.writerow(row)
    return buf.getvalue()


def values_to_pgm(values):
    """Binary PGM (P5) heat map of a contribution matrix; absent cells are
    black and the largest defined value maps to white."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 2:
        raise ConfigError("heat map needs a 2-d matrix")
    finite = np.isfinite(vals)
    top = float(vals[finite].max()) if finite.any() else 0.0
    pixels = np.zeros(vals.shape, dtype=np.uint8)
    if top > 0:
        scaled = np.where(finite, vals / top, 0.0)
        pixels = np.round(255.0 * scaled).astype(np.uint8)
    header = f"P5\n{vals.shape[1]} {vals.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes()
