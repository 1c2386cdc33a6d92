"""Acceptance suite: one test per published target, at the stated tolerance."""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from reference_impls import pool_phi_sum, ssim_direct
from hsdenoise.cli import _gradcheck_cases
from hsdenoise.hsio import extract_patches, gen_synthetic
from hsdenoise.metrics import psnr, sam, ssim
from hsdenoise.network import build_network, desk_config, save_weights, standard_config
from hsdenoise.noise import add_gaussian_iid, synthesize_case
from hsdenoise.qru import BACKWARD, FORWARD, make_variant, qru_pool_forward
from hsdenoise.training import TrainOptions, grad_check, schedule_for_epoch, train

SRC = Path(__file__).resolve().parents[1] / "src"


def _ok(name):
    print(f"[ACCEPT] {name}: PASS", flush=True)


class TestAcceptance:
    def test_parameter_counts(self):
        """Five architecture variants land within 2% of their published sizes."""
        targets = [
            (dict(), 860_000),
            (dict(kind="c3d"), 430_000),
            (dict(kind="c3d", width_multiplier=2.0), 1_720_000),
            (dict(kind="qru2d"), 290_000),
            (dict(schedule="bidirectional"), 1_720_000),
        ]
        for kwargs, want in targets:
            got = build_network(standard_config(**kwargs), seed=0).param_count()
            assert abs(got - want) <= 0.02 * want, (kwargs, got, want)
        _ok("parameter counts")

    def test_shape_table(self):
        """Each benchmark layer emits the published output size; bands stay free."""
        t0 = time.perf_counter()
        model = build_network(standard_config(), seed=1)
        x = np.zeros((1, 1, 64, 64, 31), dtype=np.float32)
        y, traces = model.forward(x, keep_traces=True)
        want = [
            (16, 64, 64, 31),
            (16, 64, 64, 31),
            (32, 32, 32, 31),
            (32, 32, 32, 31),
            (64, 16, 16, 31),
            (64, 16, 16, 31),
            (64, 16, 16, 31),
            (32, 32, 32, 31),
            (32, 32, 32, 31),
            (16, 64, 64, 31),
            (16, 64, 64, 31),
            (1, 64, 64, 31),
        ]
        got = [o.shape[1:] for o in traces["outputs"]]
        assert got == want
        assert y.shape == x.shape
        for bands in (5, 10, 31):
            xb = np.zeros((1, 1, 64, 64, bands), dtype=np.float32)
            yb, _ = model.forward(xb)
            assert yb.shape == xb.shape
        assert time.perf_counter() - t0 < 30.0
        _ok("shape table")

    def test_gradient_suite(self):
        """Backprop matches eps=1e-3 central differences to 1e-3 on every unit type."""
        t0 = time.perf_counter()
        for name, target, x in _gradcheck_cases(seed=3):
            report = grad_check(target, x, tolerance=1e-3, eps=1e-3)
            assert report.passed, (name, report.max_rel_err)
        assert time.perf_counter() - t0 < 300.0
        _ok("gradient suite")

    def test_pooling_unfold_decomposition(self):
        """Recurrent pooling equals the per-band contribution sum on 100 traces."""
        rng = np.random.default_rng(33)
        for trial in range(100):
            bands = int(rng.integers(1, 17))
            ch = int(rng.integers(1, 4))
            hw = int(rng.integers(2, 5))
            z = rng.standard_normal((ch, hw, hw, bands))
            f = 1.0 / (1.0 + np.exp(-rng.standard_normal((ch, hw, hw, bands))))
            direction = FORWARD if trial % 2 == 0 else BACKWARD
            h = qru_pool_forward(z, f, direction)
            if direction == FORWARD:
                zz, ff, hh = z, f, h
            else:
                zz, ff, hh = z[..., ::-1], f[..., ::-1], h[..., ::-1]
            for j in range(bands):
                want = pool_phi_sum(zz, ff, j)
                assert np.abs(hh[..., j] - want).max() <= 1e-5
        _ok("pooling decomposition")

    def test_causality_and_receptive_field(self):
        """One forward unit is causal past b+1; stacks reach every band pair."""
        rng = np.random.default_rng(21)
        unit = make_variant("qru3d").build(rng, 1, 2, (1, 1, 1), FORWARD)
        x = rng.uniform(0.0, 1.0, size=(1, 1, 6, 6, 8)).astype(np.float32)
        base, _ = unit.forward(x)
        for p in range(8):
            bumped = x.copy()
            bumped[..., p] += 0.5
            moved, _ = unit.forward(bumped)
            diff = np.abs(moved - base).max(axis=(0, 1, 2, 3))
            assert diff.max() > 0.0
            early = diff[: max(p - 1, 0)]
            if early.size:
                assert early.max() < 1e-6

        fwd = make_variant("qru3d").build(rng, 1, 3, (1, 1, 1), FORWARD)
        bwd = make_variant("qru3d").build(rng, 3, 2, (1, 1, 1), BACKWARD)
        mid, _ = fwd.forward(x)
        stacked_base, _ = bwd.forward(mid)
        for p in range(8):
            bumped = x.copy()
            bumped[..., p] += 0.5
            mid, _ = fwd.forward(bumped)
            moved, _ = bwd.forward(mid)
            diff = np.abs(moved - stacked_base).max(axis=(0, 1, 2, 3))
            assert (diff > 0.0).all(), p

        model = build_network(standard_config(), seed=22)
        x0 = rng.uniform(0.2, 0.8, size=(1, 1, 16, 16, 31)).astype(np.float32)
        batch = np.repeat(x0, 32, axis=0)
        for i in range(31):
            batch[i + 1, ..., i] += 0.5
        ys, _ = model.forward(batch)
        for i in range(31):
            diff = np.abs(ys[i + 1] - ys[0]).max(axis=(0, 1, 2))
            assert (diff > 0.0).all(), i
        _ok("causality and receptive field")

    def test_noise_statistics(self):
        """Sparse cases hit 10 of 31 bands with fractions inside the stated ranges."""
        clean = gen_synthetic(32, 64, 31, seed=55)
        width = clean.shape[1]
        for trial in range(20):
            _, rep = synthesize_case(clean, 1, seed=[60, trial])
            sig = np.asarray(rep.sigma_per_band, dtype=float)
            assert sig.shape == (31,)
            assert sig.min() >= 10.0 and sig.max() <= 70.0
            for case in (2, 3, 4):
                _, rep = synthesize_case(clean, case, seed=[60, trial, case])
                assert rep.sparse_band_count() == 10, (case, trial)
                for cols in rep.stripes.values():
                    assert 0.05 <= len(cols) / width <= 0.15
                for cols in rep.deadlines.values():
                    assert 0.05 <= len(cols) / width <= 0.15
                for frac, _count in rep.impulses.values():
                    assert 0.10 <= frac <= 0.70
        _ok("noise statistics")

    def test_metric_values(self):
        """PSNR/SSIM/SAM closed-form anchors plus the direct windowed-SSIM oracle."""
        rng = np.random.default_rng(6)
        x = rng.uniform(0.2, 0.8, size=(64, 64, 4))
        assert abs(psnr(x + 0.1, x) - 20.0) <= 1e-6
        assert ssim(x, x) == 1.0
        assert sam(x, 2.0 * x) == 0.0
        ref = rng.uniform(0.0, 1.0, size=(64, 64, 4))
        noisy = np.clip(ref + rng.normal(0.0, 0.08, size=ref.shape), 0.0, 1.0)
        mine = ssim(noisy, ref)
        oracle = np.mean([ssim_direct(noisy[:, :, b], ref[:, :, b]) for b in range(4)])
        assert abs(mine - float(oracle)) <= 1e-4
        _ok("metric values")

    def test_desk_training(self):
        """200 optimizer steps on 64 toy patches beat the noisy input by 3 dB."""
        t0 = time.perf_counter()
        patches = []
        for s in range(9):
            cube = gen_synthetic(32, 64, 8, seed=[100, s])
            for p in extract_patches(cube, spatial=16, stride=16):
                patches.append(np.ascontiguousarray(p.data[np.newaxis], dtype=np.float32))
        train_patches, held_out = patches[:64], patches[64:72]
        model = build_network(desk_config(width=6, n_layers=3, global_residual=False), seed=7)
        options = TrainOptions(seed=11, epochs=50, policy="fixed", lr=1e-2,
                               batch_size=16, sigma=25.0)
        _, log = train(model, train_patches, options)
        losses = [row["loss"] for row in log.rows]
        assert losses[-1] < 0.5 * losses[0]
        noisy_scores, denoised_scores = [], []
        for i, clean in enumerate(held_out):
            noisy = add_gaussian_iid(clean[0], 25.0, [500, i]).astype(np.float32)
            noisy_scores.append(psnr(np.clip(noisy, 0.0, 1.0), clean[0]))
            out, _ = model.forward(noisy[np.newaxis, np.newaxis])
            denoised_scores.append(psnr(np.clip(out[0, 0], 0.0, 1.0), clean[0]))
        gain = float(np.mean(denoised_scores) - np.mean(noisy_scores))
        assert gain >= 3.0, gain
        assert time.perf_counter() - t0 < 600.0
        _ok("desk training")

    def test_schedule_fidelity(self):
        """Every epoch of the 100-epoch curriculum matches the published table."""
        for epoch in range(100):
            s = schedule_for_epoch(epoch)
            if epoch < 30:
                assert s.stage == 1
                assert s.regime == "fixed" and s.sigma == 50.0
                assert s.batch_size == 16
                assert s.lr == (1e-3 if epoch < 20 else 1e-4)
            elif epoch < 50:
                assert s.stage == 2
                assert s.regime == "blind" and s.sigma_range == (30.0, 70.0)
                assert s.batch_size == 64
                assert s.lr == (1e-3 if epoch < 35 else 1e-4 if epoch < 45 else 1e-5)
            else:
                assert s.stage == 3
                assert s.regime == "mixture" and s.cases == (1, 2, 3, 4)
                assert s.batch_size == 64
                assert s.lr == (1e-3 if epoch < 85 else 1e-4 if epoch < 95 else 1e-5)
        _ok("schedule fidelity")

    def _run_workflow(self, root):
        os.makedirs(root, exist_ok=True)
        env = dict(os.environ)
        env["PYTHONPATH"] = str(SRC) + os.pathsep + env.get("PYTHONPATH", "")

        def run(*args):
            proc = subprocess.run([sys.executable, "-m", "hsdenoise", *args],
                                  cwd=root, env=env, capture_output=True, text=True)
            assert proc.returncode == 0, (args, proc.stderr)

        run("gen-synthetic", "--out", "clean.hsi", "--height", "24",
            "--width", "24", "--bands", "8", "--seed", "9")
        run("add-noise", "clean.hsi", "noisy.hsi", "--case", "5",
            "--seed", "7", "--report", "report.txt")
        save_weights(os.path.join(root, "weights.q3dw"),
                     build_network(desk_config(width=3), seed=5))
        run("denoise", "noisy.hsi", "denoised.hsi", "--weights", "weights.q3dw")
        run("eval", "denoised.hsi", "noisy.hsi", "--clean", "clean.hsi",
            "--out", "metrics.csv")
        blobs = {}
        for name in sorted(os.listdir(root)):
            with open(os.path.join(root, name), "rb") as fh:
                blobs[name] = fh.read()
        return blobs

    def test_cli_workflow_determinism(self, tmp_path):
        """A full CLI workflow repeated with the same seeds is bit-identical."""
        a = self._run_workflow(str(tmp_path / "a"))
        b = self._run_workflow(str(tmp_path / "b"))
        assert sorted(a) == sorted(b)
        for name in a:
            assert a[name] == b[name], name
        _ok("cli workflow determinism")
