"""Quasi-recurrent 3D units: gated conv banks plus a recurrence over bands.

A unit computes a candidate tensor Z = tanh(conv(x, wz)) and a gate tensor
F = sigmoid(conv(x, wf)), then mixes them along the spectral axis with

    h_b = f_b * h_{b-1} + (1 - f_b) * z_b,    h_0 = 0

either front-to-back (forward), back-to-front (backward), or both with
independent parameter banks whose hidden states are added elementwise
(bidirectional). Ablation variants swap the 3x3x3 kernels for 3x3x1
(qru2d) or drop the gate and recurrence entirely (c3d).

The recurrence is sequential in the band index but elementwise over
(batch, channel, height, width), so each step is one vectorized blend.
"""

import numpy as np

from .tensors import (
    ConfigError,
    ConvKernel,
    ConvSpec,
    ShapeError,
    activate,
    activate_grad,
    conv3d_backward,
    conv3d_forward,
    he_init,
    tconv3d_backward,
    tconv3d_forward,
)

FORWARD = "forward"
BACKWARD = "backward"
BIDIRECTIONAL = "bidirectional"
DIRECTIONS = (FORWARD, BACKWARD, BIDIRECTIONAL)


class QruParams:
    """One direction's parameter pair: candidate bank wz and gate bank wf."""

    __slots__ = ("wz", "wf")

    def __init__(self, wz, wf):
        if wz.weight.shape != wf.weight.shape:
            raise ShapeError(
                f"wz and wf banks must match: {wz.weight.shape} vs {wf.weight.shape}"
            )
        self.wz = wz
        self.wf = wf


class PoolingTrace:
    """Captured (z, f, h) of one directional pass, for backward and GCS."""

    __slots__ = ("z", "f", "h", "direction")

    def __init__(self, z, f, h, direction):
        self.z = z
        self.f = f
        self.h = h
        self.direction = direction


def gates_forward(x, params, spec, transposed=False):
    """Candidate and gate tensors from the two conv banks of one direction."""
    conv = tconv3d_forward if transposed else conv3d_forward
    z = activate(conv(x, params.wz, spec), "tanh")
    f = activate(conv(x, params.wf, spec), "sigmoid")
    return z, f


def _band_order(n_bands, direction):
    if direction == FORWARD:
        return range(n_bands)
    if direction == BACKWARD:
        return range(n_bands - 1, -1, -1)
    raise ConfigError(f"pooling direction must be forward or backward, got {direction!r}")


def qru_pool_forward(z, f, direction):
    """Run the gated recurrence along the band axis; h starts at zero."""
    if z.shape != f.shape:
        raise ShapeError(f"z shape {z.shape} != f shape {f.shape}")
    h = np.empty_like(z)
    prev = np.zeros(z.shape[:-1], dtype=z.dtype)
    for b in _band_order(z.shape[-1], direction):
        prev = f[..., b] * prev + (1.0 - f[..., b]) * z[..., b]
        h[..., b] = prev
    return h


def qru_pool_backward(trace, grad_h):
    """Exact reverse of the recurrence: gradients w.r.t. z and f.

    Walking the band order backwards, the accumulated hidden gradient
    g_b = grad_h_b + f_{b+1} * g_{b+1} feeds
        grad_z_b = (1 - f_b) * g_b
        grad_f_b = (h_{b-1} - z_b) * g_b
    with indices read in the trace's own direction.
    """
    z, f, h = trace.z, trace.f, trace.h
    if grad_h.shape != z.shape:
        raise ShapeError(f"grad_h shape {grad_h.shape} != trace shape {z.shape}")
    gz = np.empty_like(z)
    gf = np.empty_like(f)
    order = list(_band_order(z.shape[-1], trace.direction))
    carry = np.zeros(z.shape[:-1], dtype=z.dtype)
    zero_prev = np.zeros(z.shape[:-1], dtype=z.dtype)
    for pos in range(len(order) - 1, -1, -1):
        b = order[pos]
        g = grad_h[..., b] + carry
        h_prev = h[..., order[pos - 1]] if pos > 0 else zero_prev
        gz[..., b] = (1.0 - f[..., b]) * g
        gf[..., b] = (h_prev - z[..., b]) * g
        carry = f[..., b] * g
    return gz, gf


def qru3d_forward(x, params, spec, direction, params_back=None, transposed=False):
    """One unit application: gates then pooling; bidirectional adds both
    directional passes, run with independent parameter sets."""
    if direction == BIDIRECTIONAL:
        if params_back is None:
            raise ConfigError("bidirectional unit needs a second parameter set")
        zf, ff = gates_forward(x, params, spec, transposed)
        zb, fb = gates_forward(x, params_back, spec, transposed)
        return qru_pool_forward(zf, ff, FORWARD) + qru_pool_forward(zb, fb, BACKWARD)
    z, f = gates_forward(x, params, spec, transposed)
    return qru_pool_forward(z, f, direction)


class QruUnit:
    """A gated unit: one or two QruParams, a ConvSpec, and a direction.

    `transposed` selects the upsampling (adjoint) convolution, in which
    case the stride is read as the fractional stride 1/s.
    """

    variant = "qru3d"

    def __init__(self, params_list, spec, direction, transposed=False):
        if direction not in DIRECTIONS:
            raise ConfigError(f"unknown direction {direction!r}")
        need = 2 if direction == BIDIRECTIONAL else 1
        if len(params_list) != need:
            raise ConfigError(f"{direction} unit needs {need} parameter sets")
        self.params_list = list(params_list)
        self.spec = spec
        self.direction = direction
        self.transposed = transposed

    def _branch_dirs(self):
        if self.direction == BIDIRECTIONAL:
            return [FORWARD, BACKWARD]
        return [self.direction]

    def forward(self, x, keep_trace=False):
        y = None
        traces = [] if keep_trace else None
        for params, d in zip(self.params_list, self._branch_dirs()):
            z, f = gates_forward(x, params, self.spec, self.transposed)
            h = qru_pool_forward(z, f, d)
            y = h if y is None else y + h
            if keep_trace:
                traces.append(PoolingTrace(z, f, h, d))
        if keep_trace:
            return y, (x, traces)
        return y, None

    def backward(self, trace, grad_y):
        x, branch_traces = trace
        conv_bwd = tconv3d_backward if self.transposed else conv3d_backward
        gx = None
        grads = []
        for params, tr in zip(self.params_list, branch_traces):
            gz, gf = qru_pool_backward(tr, grad_y)
            gz_pre = activate_grad(tr.z, gz, "tanh")
            gf_pre = activate_grad(tr.f, gf, "sigmoid")
            gxz, gwz, gbz = conv_bwd(x, params.wz, self.spec, gz_pre)
            gxf, gwf, gbf = conv_bwd(x, params.wf, self.spec, gf_pre)
            gx = gxz + gxf if gx is None else gx + gxz + gxf
            grads.extend([gwz, gbz, gwf, gbf])
        return gx, grads

    def param_arrays(self):
        out = []
        for p in self.params_list:
            out.extend([p.wz.weight, p.wz.bias, p.wf.weight, p.wf.bias])
        return out

    def kernels(self):
        out = []
        for p in self.params_list:
            out.extend([p.wz, p.wf])
        return out

    def param_count(self):
        return sum(a.size for a in self.param_arrays())

    def param_names(self):
        out = []
        if self.direction == BIDIRECTIONAL:
            tags = ["fwd", "bwd"]
        else:
            tags = ["fwd" if self.direction == FORWARD else "bwd"]
        for tag in tags:
            for bank in ("wz", "wf"):
                out.extend([f"{tag}.{bank}.weight", f"{tag}.{bank}.bias"])
        return out

    def astype(self, dtype):
        params = [QruParams(p.wz.astype(dtype), p.wf.astype(dtype)) for p in self.params_list]
        return QruUnit(params, self.spec, self.direction, self.transposed)


class C3dUnit:
    """Ablation unit: plain conv plus tanh, no gate, no recurrence.

    `activation` accepts "identity" as a test hook so gradient checkers can
    probe an exactly linear layer.
    """

    variant = "c3d"

    def __init__(self, kernel, spec, transposed=False, activation="tanh"):
        self.kernel = kernel
        self.spec = spec
        self.transposed = transposed
        self.activation = activation
        self.direction = FORWARD

    def forward(self, x, keep_trace=False):
        conv = tconv3d_forward if self.transposed else conv3d_forward
        y = activate(conv(x, self.kernel, self.spec), self.activation)
        return y, ((x, y) if keep_trace else None)

    def backward(self, trace, grad_y):
        x, y = trace
        conv_bwd = tconv3d_backward if self.transposed else conv3d_backward
        g_pre = activate_grad(y, grad_y, self.activation)
        gx, gw, gb = conv_bwd(x, self.kernel, self.spec, g_pre)
        return gx, [gw, gb]

    def param_arrays(self):
        return [self.kernel.weight, self.kernel.bias]

    def kernels(self):
        return [self.kernel]

    def param_count(self):
        return self.kernel.weight.size + self.kernel.bias.size

    def param_names(self):
        return ["w.weight", "w.bias"]

    def astype(self, dtype):
        return C3dUnit(self.kernel.astype(dtype), self.spec, self.transposed,
                       self.activation)


VARIANT_KINDS = ("qru3d", "qru2d", "c3d")


class VariantFactory:
    """Builds units of one kind, with an optional hidden-width multiplier
    (applied by the network to every width except the final output)."""

    def __init__(self, kind, width_multiplier=1.0):
        if kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown unit kind {kind!r}; expected one of {VARIANT_KINDS}")
        self.kind = kind
        self.width_multiplier = float(width_multiplier)

    def scaled_width(self, width):
        return max(1, int(round(width * self.width_multiplier)))

    @property
    def ksize(self):
        return (3, 3, 1) if self.kind == "qru2d" else (3, 3, 3)

    @property
    def pad(self):
        kh, kw, kb = self.ksize
        return (kh // 2, kw // 2, kb // 2)

    def _new_kernel(self, rng, cin, cout, transposed, dtype):
        shape = ((cin, cout) if transposed else (cout, cin)) + self.ksize
        fan_in = cin * int(np.prod(self.ksize))
        weight = he_init(rng, shape, fan_in, dtype)
        return ConvKernel(weight, np.zeros(cout, dtype=dtype))

    def build(self, rng, cin, cout, stride, direction, transposed=False, dtype=np.float32):
        spec = ConvSpec(stride, self.pad)
        if self.kind == "c3d":
            return C3dUnit(self._new_kernel(rng, cin, cout, transposed, dtype), spec, transposed)
        n_sets = 2 if direction == BIDIRECTIONAL else 1
        params = [
            QruParams(
                self._new_kernel(rng, cin, cout, transposed, dtype),
                self._new_kernel(rng, cin, cout, transposed, dtype),
            )
            for _ in range(n_sets)
        ]
        return QruUnit(params, spec, direction, transposed)


def make_variant(kind, width_multiplier=1.0):
    """Unit-constructor factory for the ablation table variants."""
    return VariantFactory(kind, width_multiplier)
