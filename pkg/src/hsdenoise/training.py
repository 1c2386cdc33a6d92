"""Training loop, optimizer, epoch schedule, and gradient checking.

The optimizer keeps its moment vectors in float64 even when the model
parameters are float32; update arithmetic happens in float64 and only the
final step is cast back to the parameter dtype.  Together with the seeded
per-epoch RNG streams this makes a run reproducible bit for bit, including
across an interrupt/resume boundary.

Optimizer state sidecar format (Q3DA), little-endian throughout:

  magic     4 bytes  b"Q3DA"
  version   u16      1
  step      u64      number of optimizer steps taken so far
  epoch     u32      number of completed epochs
  n_arrays  u32      parameter array count
  beta1     f64
  beta2     f64
  eps       f64
  then per parameter array:
    ndim    u32
    dims    ndim x u32
    m       float64 raw bytes, C order
    v       float64 raw bytes, C order
"""

import csv
import io
import os
import struct
import time

import numpy as np

from .metrics import psnr
from .network import WeightsError, save_weights
from .noise import add_gaussian_iid, synthesize_case
from .qru import ConfigError
from .tensors import ShapeError


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to `pred`."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype)


class AdamState:
    """First/second moment estimates, kept in float64 regardless of the
    parameter dtype.  `epoch` counts completed epochs so a resumed run can
    pick up exactly where the interrupted one stopped."""

    __slots__ = ("m", "v", "step", "epoch", "beta1", "beta2", "eps")

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.step = 0
        self.epoch = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(state, params, grads, lr):
    """One Adam update, in place on `params`.

    Moments and the bias-corrected update are computed in float64; the final
    delta is cast to each parameter's dtype.
    """
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ConfigError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        g64 = g.astype(np.float64)
        m *= b1
        m += (1.0 - b1) * g64
        v *= b2
        v += (1.0 - b2) * (g64 * g64)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p -= update.astype(p.dtype)


def save_optimizer_state(path, state):
    """Write an Adam state sidecar (format documented in the module header)."""
    with open(path, "wb") as fh:
        fh.write(b"Q3DA")
        fh.write(struct.pack("<HQII", 1, state.step, state.epoch, len(state.m)))
        fh.write(struct.pack("<ddd", state.beta1, state.beta2, state.eps))
        for m, v in zip(state.m, state.v):
            fh.write(struct.pack("<I", m.ndim))
            fh.write(struct.pack(f"<{m.ndim}I", *m.shape))
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_optimizer_state(path):
    """Read an Adam state sidecar back into an AdamState."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset, count, what):
        if offset + count > len(blob):
            raise WeightsError(
                f"optimizer state truncated at byte {len(blob)}: "
                f"need {count} bytes for {what} at offset {offset}")
        return blob[offset:offset + count]

    if need(0, 4, "magic") != b"Q3DA":
        raise WeightsError("bad magic at byte 0: not an optimizer state file")
    version, step, epoch, n_arrays = struct.unpack("<HQII", need(4, 18, "header"))
    if version != 1:
        raise WeightsError(f"unsupported optimizer state version {version} at byte 4")
    beta1, beta2, eps = struct.unpack("<ddd", need(22, 24, "hyperparameters"))
    offset = 46
    state = AdamState.__new__(AdamState)
    state.m, state.v = [], []
    state.step, state.epoch = step, epoch
    state.beta1, state.beta2, state.eps = beta1, beta2, eps
    for idx in range(n_arrays):
        (ndim,) = struct.unpack("<I", need(offset, 4, f"array {idx} ndim"))
        offset += 4
        dims = struct.unpack(f"<{ndim}I", need(offset, 4 * ndim, f"array {idx} dims"))
        offset += 4 * ndim
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        nbytes = 8 * count
        m = np.frombuffer(need(offset, nbytes, f"array {idx} m"), dtype="<f8").reshape(dims).copy()
        offset += nbytes
        v = np.frombuffer(need(offset, nbytes, f"array {idx} v"), dtype="<f8").reshape(dims).copy()
        offset += nbytes
        state.m.append(m)
        state.v.append(v)
    if offset != len(blob):
        raise WeightsError(f"trailing bytes after optimizer state at byte {offset}")
    return state


class StageSpec:
    """Settings for one epoch: learning rate, batch size, noise regime."""

    __slots__ = ("stage", "lr", "batch_size", "regime", "sigma", "sigma_range", "cases")

    def __init__(self, stage, lr, batch_size, regime,
                 sigma=None, sigma_range=None, cases=None):
        self.stage = stage
        self.lr = lr
        self.batch_size = batch_size
        self.regime = regime
        self.sigma = sigma
        self.sigma_range = sigma_range
        self.cases = cases


def schedule_for_epoch(epoch):
    """Stage settings for a zero-based epoch of the 100-epoch curriculum.

    Stage 1 (epochs 0-29):  fixed sigma 50, batch 16, lr 1e-3 then 1e-4
    at epoch 20.  Stage 2 (30-49): blind sigma drawn from [30, 70], batch
    64, lr 1e-3 / 1e-4 at 35 / 1e-5 at 45.  Stage 3 (50-99): mixed
    complex cases 1-4, batch 64, lr 1e-3 / 1e-4 at 85 / 1e-5 at 95.
    """
    if not isinstance(epoch, (int, np.integer)) or isinstance(epoch, bool):
        raise ConfigError(f"epoch must be an integer, got {epoch!r}")
    if epoch < 0 or epoch >= 100:
        raise ConfigError(f"epoch {epoch} outside the schedule range [0, 100)")
    if epoch < 30:
        lr = 1e-3 if epoch < 20 else 1e-4
        return StageSpec(1, lr, 16, "fixed", sigma=50.0)
    if epoch < 50:
        if epoch < 35:
            lr = 1e-3
        elif epoch < 45:
            lr = 1e-4
        else:
            lr = 1e-5
        return StageSpec(2, lr, 64, "blind", sigma_range=(30.0, 70.0))
    if epoch < 85:
        lr = 1e-3
    elif epoch < 95:
        lr = 1e-4
    else:
        lr = 1e-5
    return StageSpec(3, lr, 64, "mixture", cases=(1, 2, 3, 4))


class TrainOptions:
    """Knobs for `train`.  policy "schedule" follows the staged curriculum;
    policy "fixed" uses a constant lr/batch/sigma (handy for small runs)."""

    __slots__ = ("seed", "epochs", "start_epoch", "policy", "lr", "batch_size",
                 "sigma", "val_patches", "checkpoint_dir", "checkpoint_epochs",
                 "max_steps_per_epoch")

    def __init__(self, seed=0, epochs=100, start_epoch=0, policy="schedule",
                 lr=1e-3, batch_size=16, sigma=50.0, val_patches=None,
                 checkpoint_dir=None, checkpoint_epochs=(50, 100),
                 max_steps_per_epoch=None):
        if policy not in ("schedule", "fixed"):
            raise ConfigError(f"unknown training policy {policy!r}")
        if epochs <= 0:
            raise ConfigError("epochs must be positive")
        if start_epoch < 0 or start_epoch >= epochs:
            raise ConfigError(f"start epoch {start_epoch} outside [0, {epochs})")
        self.seed = seed
        self.epochs = epochs
        self.start_epoch = start_epoch
        self.policy = policy
        self.lr = lr
        self.batch_size = batch_size
        self.sigma = sigma
        self.val_patches = val_patches
        self.checkpoint_dir = checkpoint_dir
        self.checkpoint_epochs = tuple(checkpoint_epochs)
        self.max_steps_per_epoch = max_steps_per_epoch


class TrainLog:
    """Per-epoch records.  The CSV rendering deliberately omits wall time so
    two runs with the same seed produce identical artifacts; timing is
    reported on stdout only."""

    def __init__(self):
        self.rows = []

    def add(self, epoch, stage, lr, batch_size, loss, val_psnr, seconds):
        self.rows.append({"epoch": epoch, "stage": stage, "lr": lr,
                          "batch_size": batch_size, "loss": loss,
                          "val_psnr": val_psnr, "seconds": seconds})

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "stage", "lr", "batch_size", "loss", "val_psnr"])
        for row in self.rows:
            val = "" if row["val_psnr"] is None else f"{row['val_psnr']:.6f}"
            writer.writerow([row["epoch"], row["stage"], f"{row['lr']:.8g}",
                             row["batch_size"], f"{row['loss']:.10e}", val])
        return buf.getvalue()


def _stage_for(options, epoch):
    if options.policy == "schedule":
        return schedule_for_epoch(epoch)
    return StageSpec(0, options.lr, options.batch_size, "fixed", sigma=options.sigma)


def _corrupt(clean, stage, seed_path):
    """Noisy version of one clean patch (C, H, W, B) under the stage regime.

    The seed path pins the corruption to (run seed, epoch, sample slot), so
    the same patch in the same slot of the same epoch is always corrupted
    identically, independent of batch boundaries.
    """
    cube = np.ascontiguousarray(clean[0])
    if stage.regime == "fixed":
        noisy = add_gaussian_iid(cube, stage.sigma, seed_path)
    elif stage.regime == "blind":
        rng = np.random.default_rng(list(seed_path) + [0])
        lo, hi = stage.sigma_range
        sigma = float(rng.uniform(lo, hi))
        noisy = add_gaussian_iid(cube, sigma, list(seed_path) + [1])
    elif stage.regime == "mixture":
        rng = np.random.default_rng(list(seed_path) + [0])
        case = int(stage.cases[rng.integers(0, len(stage.cases))])
        noisy, _ = synthesize_case(cube, case, list(seed_path) + [1])
    else:
        raise ConfigError(f"unknown noise regime {stage.regime!r}")
    return noisy[np.newaxis].astype(clean.dtype)


def _val_psnr(model, val_pairs):
    scores = []
    for noisy, clean in val_pairs:
        out, _ = model.forward(noisy[np.newaxis])
        scores.append(psnr(np.clip(out[0, 0], 0.0, 1.0), clean[0]))
    return float(np.mean(scores))


def _build_val_pairs(val_patches, seed):
    """Fix the validation corruption once (sigma 50 iid) so the metric is
    comparable across epochs and runs."""
    pairs = []
    for i, clean in enumerate(val_patches):
        noisy = add_gaussian_iid(clean[0], 50.0, [seed, 999_983, i])
        pairs.append((noisy[np.newaxis].astype(clean.dtype), clean))
    return pairs


def train(model, patches, options, state=None, log_fn=None):
    """Run the training loop over a list of clean patches (each (1, H, W, B)).

    Returns (state, log).  Pass back the returned state (or one loaded from a
    Q3DA sidecar) with options.start_epoch set to resume; a resumed run
    reproduces the uninterrupted one bit for bit because every random choice
    is keyed by (seed, epoch) rather than by any carried-over RNG state.
    """
    if not patches:
        raise ConfigError("no training patches")
    params = model.param_arrays()
    if state is None:
        state = AdamState(params)
    elif len(state.m) != len(params) or any(
            m.shape != p.shape for m, p in zip(state.m, params)):
        raise ConfigError("optimizer state does not match this model")
    log = TrainLog()
    say = log_fn if log_fn is not None else (lambda s: None)
    val_pairs = _build_val_pairs(options.val_patches, options.seed) \
        if options.val_patches else None

    for epoch in range(options.start_epoch, options.epochs):
        stage = _stage_for(options, epoch)
        t0 = time.perf_counter()
        rng = np.random.default_rng([options.seed, epoch])
        order = rng.permutation(len(patches))
        losses = []
        steps = 0
        for start in range(0, len(order), stage.batch_size):
            if options.max_steps_per_epoch is not None and steps >= options.max_steps_per_epoch:
                break
            slots = order[start:start + stage.batch_size]
            clean = np.stack([patches[i] for i in slots])
            noisy = np.stack([
                _corrupt(patches[i], stage, [options.seed, epoch, int(slot)])
                for slot, i in zip(range(start, start + len(slots)), slots)])
            out, traces = model.forward(noisy, keep_traces=True)
            loss, grad = mse_loss(out, clean)
            _, grads = model.backward(traces, grad)
            adam_step(state, params, grads, stage.lr)
            losses.append(loss)
            steps += 1
        state.epoch = epoch + 1
        seconds = time.perf_counter() - t0
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        val = _val_psnr(model, val_pairs) if val_pairs else None
        log.add(epoch, stage.stage, stage.lr, stage.batch_size, mean_loss, val, seconds)
        val_txt = "" if val is None else f"  val_psnr {val:.2f}"
        say(f"epoch {epoch:3d}  stage {stage.stage}  lr {stage.lr:g}  "
            f"loss {mean_loss:.4e}{val_txt}  ({seconds:.1f}s)")
        if options.checkpoint_dir and (epoch + 1) in options.checkpoint_epochs:
            os.makedirs(options.checkpoint_dir, exist_ok=True)
            tag = f"epoch{epoch + 1:03d}"
            save_weights(f"{options.checkpoint_dir}/weights_{tag}.q3dw", model)
            save_optimizer_state(f"{options.checkpoint_dir}/optim_{tag}.q3da", state)
    return state, log


class GradCheckReport:
    """Per-parameter-group comparison of analytic vs numeric gradients."""

    __slots__ = ("rows", "tolerance")

    def __init__(self, rows, tolerance):
        self.rows = rows
        self.tolerance = tolerance

    @property
    def max_rel_err(self):
        return max(r[1] for r in self.rows) if self.rows else 0.0

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance

    def format(self):
        width = max(len(r[0]) for r in self.rows) if self.rows else 4
        lines = [f"{'group'.ljust(width)}  rel_err     verdict"]
        for name, err in self.rows:
            verdict = "ok" if err <= self.tolerance else "FAIL"
            lines.append(f"{name.ljust(width)}  {err:.4e}  {verdict}")
        lines.append(f"max {self.max_rel_err:.4e}  tolerance {self.tolerance:.1e}  "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(target, x, tolerance=1e-3, eps=1e-3, grad_output=None):
    """Central-difference check of every parameter gradient of a unit or model.

    The target is shadowed in float64 before anything is measured; the check
    perturbs each float64 parameter by +/-eps and compares the resulting loss
    slope against the analytic backward pass, reporting the max relative
    error per parameter group (relative to max(|analytic|, |numeric|, 1e-6)).
    `target` is a Model or any unit exposing forward/backward/param_arrays.
    """
    shadow = target.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    params = shadow.param_arrays()
    names = shadow.param_names()

    # Positional flag: units and models agree on the argument order.
    out, traces = shadow.forward(x64, True)
    if grad_output is None:
        gy = np.ones_like(out) / out.size
    else:
        gy = np.asarray(grad_output, dtype=np.float64)

    def loss():
        y, _ = shadow.forward(x64)
        return float(np.sum(y * gy))

    _, analytic = shadow.backward(traces, gy)
    rows = []
    for name, p, g in zip(names, params, analytic):
        worst = 0.0
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat_p.size):
            keep = flat_p[i]
            flat_p[i] = keep + eps
            hi = loss()
            flat_p[i] = keep - eps
            lo = loss()
            flat_p[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(flat_g[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(flat_g[i] - numeric) / denom)
        rows.append((name, worst))
    return GradCheckReport(rows, tolerance)
