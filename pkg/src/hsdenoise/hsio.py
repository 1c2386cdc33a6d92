"""Cube container format, patch extraction, normalization, synthetic data.

The on-disk container ("HSI1") is deliberately minimal and fully pinned:

  magic    4 bytes   b"HSI1"
  version  u16 LE    1
  H, W, B  u32 LE    positive extents
  values   H*W*B little-endian float32, row-major with the band axis
           fastest (C order of an (H, W, B) array)

so a 2x2x1 cube occupies 4 + 2 + 12 + 16 = 34 bytes, and read(write(c))
is bit-exact on every host.  External 31-band datasets are not parsed
here; see `convert_external` for the mapping recipe.
"""

import struct

import numpy as np
from scipy import ndimage

from .tensors import ConfigError, ShapeError

MAGIC = b"HSI1"
VERSION = 1

AUGMENT_TAGS = ("rotate", "rescale")
RESCALE_FACTORS = (1.0, 0.75, 0.5)


class HsiError(ValueError):
    """Malformed cube container."""


def write_hsi(path, cube):
    """Write an (H, W, B) cube to the HSI1 container."""
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ShapeError(f"cube must be (H, W, B), got shape {cube.shape}")
    if min(cube.shape) < 1:
        raise ShapeError(f"cube extents must be positive, got {cube.shape}")
    h, w, b = cube.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIII", VERSION, h, w, b))
        fh.write(np.ascontiguousarray(cube, dtype="<f4").tobytes())


def read_hsi(path):
    """Read an HSI1 container back into a float32 (H, W, B) array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise HsiError("bad magic at byte 0: not an HSI1 cube file")
    if len(blob) < 18:
        raise HsiError(f"truncated header: need 18 bytes, file has {len(blob)}")
    version, h, w, b = struct.unpack("<HIII", blob[4:18])
    if version != VERSION:
        raise HsiError(f"unsupported version {version} at byte 4")
    if h < 1 or w < 1 or b < 1:
        raise HsiError(f"non-positive extent in header at byte 6: {(h, w, b)}")
    expected = 4 * h * w * b
    actual = len(blob) - 18
    if actual < expected:
        raise HsiError(
            f"truncated payload at byte 18: expected {expected} bytes "
            f"of samples, got {actual}")
    if actual > expected:
        raise HsiError(
            f"trailing bytes after payload at byte {18 + expected}: "
            f"expected {expected} bytes of samples, got {actual}")
    values = np.frombuffer(blob, dtype="<f4", count=h * w * b, offset=18)
    return values.reshape(h, w, b).copy()


class Patch:
    """One extracted patch plus enough provenance to re-extract it."""

    __slots__ = ("data", "source_id", "scale", "row", "col", "rotation")

    def __init__(self, data, source_id, scale, row, col, rotation):
        self.data = data
        self.source_id = source_id
        self.scale = scale
        self.row = row
        self.col = col
        self.rotation = rotation


def _augment_tags(augment):
    if augment is True:
        return set(AUGMENT_TAGS)
    if augment in (False, None):
        return set()
    tags = {augment} if isinstance(augment, str) else set(augment)
    bad = tags - set(AUGMENT_TAGS)
    if bad:
        raise ConfigError(f"unknown augmentation tags {sorted(bad)}; "
                          f"expected among {AUGMENT_TAGS}")
    return tags


def _rescaled(cube, scale):
    if scale == 1.0:
        return cube
    # Cubic-spline resample of the spatial axes only; the spectrum is kept
    # at full length.
    return ndimage.zoom(cube, (scale, scale, 1.0), order=3)


def extract_patches(cube, spatial=64, stride=None, augment=False, source_id=0):
    """Grid crops of (spatial, spatial, B) with optional augmentation.

    Enumeration order is deterministic: scales (1.0 first) outermost, grid
    positions row-major, rotations innermost.  Scales that shrink the cube
    below the patch size are skipped.
    """
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ShapeError(f"cube must be (H, W, B), got shape {cube.shape}")
    if spatial < 1:
        raise ConfigError(f"patch size must be positive, got {spatial}")
    if cube.shape[0] < spatial or cube.shape[1] < spatial:
        raise ShapeError(
            f"cube spatial extents {cube.shape[:2]} smaller than patch {spatial}")
    if stride is None:
        stride = spatial
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    tags = _augment_tags(augment)
    scales = RESCALE_FACTORS if "rescale" in tags else (1.0,)
    rotations = (0, 1, 2, 3) if "rotate" in tags else (0,)
    patches = []
    for scale in scales:
        scaled = _rescaled(cube, scale)
        if scaled.shape[0] < spatial or scaled.shape[1] < spatial:
            continue
        for row in range(0, scaled.shape[0] - spatial + 1, stride):
            for col in range(0, scaled.shape[1] - spatial + 1, stride):
                crop = scaled[row:row + spatial, col:col + spatial]
                for rot in rotations:
                    data = np.ascontiguousarray(np.rot90(crop, rot))
                    patches.append(Patch(data, source_id, scale, row, col, rot))
    return patches


def re_extract(cube, patch):
    """Rebuild one patch's data from its source cube and provenance."""
    scaled = _rescaled(np.asarray(cube), patch.scale)
    size = patch.data.shape[0]
    crop = scaled[patch.row:patch.row + size, patch.col:patch.col + size]
    if crop.shape[:2] != (size, size):
        raise ShapeError(f"provenance does not fit the cube: {crop.shape}")
    return np.ascontiguousarray(np.rot90(crop, patch.rotation))


class NormalizationRecord:
    """Affine rescale parameters, enough to undo a normalize()."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        self.lo = lo
        self.hi = hi


def normalize(cube):
    """Min-max rescale of the whole cube into [0, 1].

    One affine map for the full cube, not per band: per-band scaling would
    change spectral angles and so distort any angle-based comparison.
    """
    cube = np.asarray(cube)
    lo = float(cube.min())
    hi = float(cube.max())
    if hi <= lo:
        raise ConfigError(f"constant cube (all values {lo}) cannot be normalized")
    return (cube - lo) / (hi - lo), NormalizationRecord(lo, hi)


def denormalize(cube, record):
    """Invert a normalize() using its record."""
    return np.asarray(cube) * (record.hi - record.lo) + record.lo


def gen_synthetic(height, width, bands, seed, rank=4):
    """Seeded synthetic cube in [0, 1]: a sum of `rank` separable terms,
    each a smooth random spatial texture times a smooth spectral bump."""
    if min(height, width, bands) < 1:
        raise ConfigError(f"extents must be positive, got {(height, width, bands)}")
    if rank < 1:
        raise ConfigError(f"rank must be positive, got {rank}")
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, bands)
    cube = np.zeros((height, width, bands))
    for _ in range(rank):
        sigma = rng.uniform(1.5, 5.0)
        texture = ndimage.gaussian_filter(rng.normal(size=(height, width)), sigma)
        span = texture.max() - texture.min()
        if span > 0:
            texture = (texture - texture.min()) / span
        center = rng.uniform(0.0, 1.0)
        bandwidth = rng.uniform(0.15, 0.5)
        spectrum = np.exp(-0.5 * ((grid - center) / bandwidth) ** 2)
        cube += rng.uniform(0.3, 1.0) * texture[:, :, np.newaxis] * spectrum
    lo, hi = cube.min(), cube.max()
    if hi > lo:
        cube = (cube - lo) / (hi - lo)
    return cube.astype(np.float32)


def convert_external(path):
    """Not implemented on purpose: no dataset-specific parsers ship here.

    Recipe for 31-band reflectance data or similar: load the source with its
    own tooling into an (H, W, 31) float array, normalize() it into [0, 1],
    and write_hsi() the result.  Everything downstream consumes HSI1.
    """
    raise NotImplementedError(
        "load the data externally, normalize it, and write_hsi it; "
        "see the convert_external docstring for the mapping")
