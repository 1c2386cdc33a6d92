"""Residual encoder-decoder assembly of quasi-recurrent units.

The standard network is twelve layers: a feature extractor, a five-layer
encoder that halves H and W twice while growing channels, a mirrored
five-layer decoder that upsamples back with transposed convs, and a
single-channel reconstructor. Spectral extent is never strided, so one
model runs on any band count.

Skip connections add each encoder-side output to the input of its
mirrored decoder-side layer (layer k pairs with layer n+1-k). A global
residual adds the network input to the reconstructor output, so the body
only has to learn the noise. Directions follow a schedule: bidirectional
at both ends, alternating forward/backward in between.

Weights serialize to the "Q3DW" container, little-endian and bit-exact;
see save_weights for the byte layout.
"""

import struct

import numpy as np

from .qru import (
    BACKWARD,
    BIDIRECTIONAL,
    C3dUnit,
    FORWARD,
    QruParams,
    QruUnit,
    make_variant,
)
from .tensors import ConfigError, ConvKernel, ConvSpec, ShapeError

SCHEDULE_MODES = ("alternating", "forward", "bidirectional")


class WeightsError(ValueError):
    """Weights file is not a valid Q3DW container."""


class LayerSpec:
    """One layer's wiring: channels, stride, direction, unit kind."""

    __slots__ = ("cin", "cout", "stride", "transposed", "direction", "kind")

    def __init__(self, cin, cout, stride, transposed, direction, kind):
        self.cin = int(cin)
        self.cout = int(cout)
        self.stride = tuple(int(s) for s in stride)
        self.transposed = bool(transposed)
        self.direction = direction
        self.kind = kind


class NetworkConfig:
    """Ordered layer list plus the global-residual flag.

    Skip merging is always elementwise addition; the config validates that
    mirrored layers produce compatible channel counts and spatial scales
    so those additions are well defined.
    """

    def __init__(self, layers, global_residual=True):
        if len(layers) < 3:
            raise ConfigError("network needs at least 3 layers")
        self.layers = list(layers)
        self.global_residual = bool(global_residual)
        self.skip_merge = "add"
        self._validate()

    def _validate(self):
        n = len(self.layers)
        for j in range(1, n):
            if self.layers[j].cin != self.layers[j - 1].cout:
                raise ConfigError(
                    f"layer {j + 1} consumes {self.layers[j].cin} channels but "
                    f"layer {j} produces {self.layers[j - 1].cout}"
                )
        # Spatial scale after each layer, as a (num, den) rational per axis.
        scales = []
        num, den = [1, 1, 1], [1, 1, 1]
        for spec in self.layers:
            for ax in range(3):
                if spec.transposed:
                    den[ax] *= spec.stride[ax]
                else:
                    num[ax] *= spec.stride[ax]
            scales.append((tuple(num), tuple(den)))
        for j in self._skip_targets():
            src = self._skip_source(j)
            if self.layers[j].cin != self.layers[src].cout:
                raise ConfigError(
                    f"skip into layer {j + 1} mixes {self.layers[j].cin} and "
                    f"{self.layers[src].cout} channels"
                )
            a, b = scales[j - 1], scales[src]
            if any(a[0][ax] * b[1][ax] != b[0][ax] * a[1][ax] for ax in range(3)):
                raise ConfigError(f"skip into layer {j + 1} mixes different spatial scales")
        final = scales[-1]
        if final[0] != final[1]:
            raise ConfigError("network output extents do not match the input extents")

    def _skip_targets(self):
        """Zero-based indices of decoder-side layers that receive a skip."""
        n = len(self.layers)
        return [j for j in range(n) if 2 * (j + 1) > n + 1]

    def _skip_source(self, j):
        """Zero-based index of the encoder-side layer feeding a skip into j."""
        return len(self.layers) - j - 1

    def downsample_factor(self):
        """Required divisibility of (H, W, B) at the network input."""
        req = [1, 1, 1]
        for spec in self.layers:
            if not spec.transposed:
                for ax in range(3):
                    req[ax] *= spec.stride[ax]
        return tuple(req)


def direction_schedule(n_layers, mode="alternating"):
    """Per-layer directions: bidirectional ends with an alternating middle
    that starts forward at layer 2; or the all-forward / all-bidirectional
    ablation schedules."""
    if mode not in SCHEDULE_MODES:
        raise ConfigError(f"unknown schedule mode {mode!r}")
    if n_layers < 3:
        raise ConfigError("direction schedule needs at least 3 layers")
    if mode == "forward":
        return [FORWARD] * n_layers
    if mode == "bidirectional":
        return [BIDIRECTIONAL] * n_layers
    dirs = [BIDIRECTIONAL]
    for i in range(1, n_layers - 1):
        dirs.append(FORWARD if (i % 2) == 1 else BACKWARD)
    dirs.append(BIDIRECTIONAL)
    return dirs


# (cout, spatial stride, transposed) rows of the standard 12-layer network,
# before any width multiplier. Band stride is always 1.
_STANDARD_ROWS = [
    (16, 1, False),
    (16, 1, False),
    (32, 2, False),
    (32, 1, False),
    (64, 2, False),
    (64, 1, False),
    (64, 1, False),
    (32, 2, True),
    (32, 1, False),
    (16, 2, True),
    (16, 1, False),
    (1, 1, False),
]


def standard_config(kind="qru3d", width_multiplier=1.0, schedule="alternating",
                    global_residual=True):
    """The benchmark 12-layer configuration, optionally width-scaled (the
    final single-channel output is never scaled)."""
    factory = make_variant(kind, width_multiplier)
    dirs = direction_schedule(len(_STANDARD_ROWS), schedule)
    layers = []
    cin = 1
    for (cout, s, transposed), d in zip(_STANDARD_ROWS, dirs):
        cout_eff = cout if cout == 1 else factory.scaled_width(cout)
        layers.append(LayerSpec(cin, cout_eff, (s, s, 1), transposed, d, kind))
        cin = cout_eff
    return NetworkConfig(layers, global_residual)


def desk_config(width=8, n_layers=3, kind="qru3d", schedule="alternating",
                global_residual=True):
    """Tiny stride-free preset for gradient checks and toy training."""
    dirs = direction_schedule(n_layers, schedule)
    layers = []
    cin = 1
    for i, d in enumerate(dirs):
        cout = 1 if i == n_layers - 1 else width
        layers.append(LayerSpec(cin, cout, (1, 1, 1), False, d, kind))
        cin = cout
    return NetworkConfig(layers, global_residual)


class Model:
    """A NetworkConfig with one built unit per layer."""

    def __init__(self, config, units):
        self.config = config
        self.units = units

    def param_arrays(self):
        out = []
        for u in self.units:
            out.extend(u.param_arrays())
        return out

    def param_count(self):
        return sum(u.param_count() for u in self.units)

    def param_names(self):
        out = []
        for j, u in enumerate(self.units):
            out.extend(f"layer{j + 1:02d}.{name}" for name in u.param_names())
        return out

    def astype(self, dtype):
        """Copy of the model with all parameters cast (float64 shadow for
        gradient checking)."""
        return Model(self.config, [u.astype(dtype) for u in self.units])

    def forward(self, x, keep_traces=False):
        """Run the network; returns (output, traces or None).

        Traces hold each unit's own trace plus every layer output, enough
        for backward() and for the spectral-dependency diagnostics.
        """
        x = np.asarray(x)
        if x.ndim != 5:
            raise ShapeError("input must have axes (batch, channel, height, width, band)")
        if x.shape[1] != self.config.layers[0].cin:
            raise ShapeError(
                f"input has {x.shape[1]} channels, network expects {self.config.layers[0].cin}"
            )
        req = self.config.downsample_factor()
        for ax, name in ((0, "H"), (1, "W"), (2, "B")):
            if x.shape[2 + ax] % req[ax] != 0:
                raise ConfigError(
                    f"{name} extent {x.shape[2 + ax]} not divisible by {req[ax]}"
                )
        n = len(self.units)
        skip_targets = set(self.config._skip_targets())
        outputs = []
        unit_traces = [] if keep_traces else None
        cur = x
        for j, unit in enumerate(self.units):
            if j in skip_targets:
                cur = cur + outputs[self.config._skip_source(j)]
            cur, tr = unit.forward(cur, keep_trace=keep_traces)
            outputs.append(cur)
            if keep_traces:
                unit_traces.append(tr)
        y = outputs[-1]
        if self.config.global_residual:
            y = y + x
        if keep_traces:
            return y, {"input": x, "outputs": outputs, "units": unit_traces}
        return y, None

    def backward(self, traces, grad_output):
        """Reverse pass through skips and residual; returns (grad_input,
        per-parameter grads in param_arrays() order)."""
        if traces is None:
            raise ValueError("backward needs traces from forward(keep_traces=True)")
        n = len(self.units)
        skip_targets = set(self.config._skip_targets())
        # pending[j] accumulates the gradient w.r.t. layer j's output
        # (1-based; index 0 is the network input).
        pending = [None] * (n + 1)
        pending[n] = np.array(grad_output, copy=True)
        param_grads = [None] * n
        for j in range(n - 1, -1, -1):
            g = pending[j + 1]
            gx, grads_j = self.units[j].backward(traces["units"][j], g)
            param_grads[j] = grads_j
            if pending[j] is None:
                pending[j] = gx
            else:
                pending[j] = pending[j] + gx
            if j in skip_targets:
                src = self.config._skip_source(j) + 1
                if pending[src] is None:
                    pending[src] = gx.copy()
                else:
                    pending[src] = pending[src] + gx
        grad_input = pending[0]
        if self.config.global_residual:
            grad_input = grad_input + grad_output
        flat = []
        for grads_j in param_grads:
            flat.extend(grads_j)
        return grad_input, flat


def build_network(config, seed, dtype=np.float32):
    """Instantiate every layer with He-style init, deterministic by seed."""
    rng = np.random.default_rng(seed)
    units = []
    for spec in config.layers:
        factory = make_variant(spec.kind)
        units.append(
            factory.build(rng, spec.cin, spec.cout, spec.stride, spec.direction,
                          spec.transposed, dtype)
        )
    return Model(config, units)


# --- Q3DW weights container -------------------------------------------------
#
#   magic   4 bytes  "Q3DW"
#   version u16 LE   currently 1
#   layers  u16 LE
#   then per layer:
#     variant   u8   0 = qru3d, 1 = qru2d, 2 = c3d
#     direction u8   0 = forward, 1 = backward, 2 = bidirectional
#     cout, cin, kh, kw, kb        u32 LE each
#     stride pairs (num, den) x 3  u32 LE each; den > 1 marks an
#                                  upsampling (transposed) layer of
#                                  fractional stride num/den
#     kernel banks in declaration order, each as weight then bias,
#     float32 LE, C-contiguous
#
# Bank declarations: forward/backward carry [wz, wf]; bidirectional
# [wz_fwd, wf_fwd, wz_bwd, wf_bwd]; c3d a single [w]. The global-residual
# flag is a runtime option, not part of the container.

MAGIC = b"Q3DW"
VERSION = 1
_VARIANT_TAGS = {"qru3d": 0, "qru2d": 1, "c3d": 2}
_VARIANT_NAMES = {v: k for k, v in _VARIANT_TAGS.items()}
_DIR_TAGS = {FORWARD: 0, BACKWARD: 1, BIDIRECTIONAL: 2}
_DIR_NAMES = {v: k for k, v in _DIR_TAGS.items()}


def save_weights(path, model):
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<HH", VERSION, len(model.units))
    for spec, unit in zip(model.config.layers, model.units):
        buf += struct.pack("<BB", _VARIANT_TAGS[spec.kind], _DIR_TAGS[spec.direction])
        kh, kw, kb = unit.kernels()[0].ksize
        buf += struct.pack("<5I", spec.cout, spec.cin, kh, kw, kb)
        for s in spec.stride:
            num, den = (1, s) if spec.transposed else (s, 1)
            buf += struct.pack("<II", num, den)
        for kern in unit.kernels():
            buf += np.ascontiguousarray(kern.weight, dtype="<f4").tobytes()
            buf += np.ascontiguousarray(kern.bias, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_weights(path, global_residual=True):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise WeightsError(f"bad magic {raw[:4]!r} at offset 0, expected {MAGIC!r}")
    version, n_layers = struct.unpack_from("<HH", raw, 4)
    if version != VERSION:
        raise WeightsError(f"unsupported weights version {version} at offset 4")
    off = 8
    layer_specs = []
    units = []
    for j in range(n_layers):
        try:
            vtag, dtag = struct.unpack_from("<BB", raw, off)
            cout, cin, kh, kw, kb = struct.unpack_from("<5I", raw, off + 2)
            pairs = struct.unpack_from("<6I", raw, off + 22)
        except struct.error as exc:
            raise WeightsError(f"truncated layer header at offset {off}") from exc
        off += 46
        if vtag not in _VARIANT_NAMES or dtag not in _DIR_NAMES:
            raise WeightsError(f"unknown variant/direction tags in layer {j + 1}")
        kind = _VARIANT_NAMES[vtag]
        direction = _DIR_NAMES[dtag]
        nums, dens = pairs[0::2], pairs[1::2]
        if any(d < 1 or n < 1 for n, d in zip(nums, dens)):
            raise WeightsError(f"invalid stride pair in layer {j + 1}")
        transposed = any(d > 1 for d in dens)
        stride = tuple(d if transposed else n for n, d in zip(nums, dens))
        wshape = ((cin, cout) if transposed else (cout, cin)) + (kh, kw, kb)
        n_banks = 1 if kind == "c3d" else (4 if direction == BIDIRECTIONAL else 2)
        kernels = []
        for _ in range(n_banks):
            wn = int(np.prod(wshape))
            need = (wn + cout) * 4
            if off + need > len(raw):
                raise WeightsError(
                    f"truncated payload at offset {off}: need {need} more bytes"
                )
            w = np.frombuffer(raw, dtype="<f4", count=wn, offset=off).reshape(wshape)
            off += wn * 4
            b = np.frombuffer(raw, dtype="<f4", count=cout, offset=off)
            off += cout * 4
            kernels.append(ConvKernel(w.copy(), b.copy()))
        spec = ConvSpec(stride, (kh // 2, kw // 2, kb // 2))
        if kind == "c3d":
            units.append(C3dUnit(kernels[0], spec, transposed))
        else:
            params = [QruParams(kernels[i], kernels[i + 1]) for i in range(0, n_banks, 2)]
            units.append(QruUnit(params, spec, direction, transposed))
        layer_specs.append(LayerSpec(cin, cout, stride, transposed, direction, kind))
    if off != len(raw):
        raise WeightsError(f"{len(raw) - off} trailing bytes at offset {off}")
    return Model(NetworkConfig(layer_specs, global_residual), units)
