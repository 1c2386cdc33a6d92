"""Command-line surface binding the library into reproducible workflows.

One executable with subcommands: train, denoise, add-noise, eval, gcs,
gradcheck, gen-synthetic.  Every command is deterministic given its flags
and seeds; artifacts embed the resolved settings (text artifacts as leading
comment lines, binary artifacts via a .meta sidecar) and never carry
timestamps.

The HSDENOISE_THREADS environment variable sets a default thread count for
the underlying math libraries; it is applied before numpy is first imported,
which is why this module defers all numeric imports into the commands.
"""

import argparse
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_env():
    value = os.environ.get("HSDENOISE_THREADS")
    if not value:
        return
    if not value.isdigit() or int(value) < 1:
        raise ValueError(
            f"HSDENOISE_THREADS must be a positive integer, got {value!r}")
    for var in _THREAD_VARS:
        os.environ.setdefault(var, value)


def _bool_key(text):
    lowered = str(text).strip().lower()
    if lowered in ("on", "true", "1", "yes"):
        return True
    if lowered in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _choice_key(*options):
    def cast(text):
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return cast


# The documented RunConfig key set: key -> (caster, default). CLI flags
# override file keys; file keys override these defaults.
CONFIG_KEYS = {
    "preset": (_choice_key("desk", "benchmark"), "desk"),
    "kind": (_choice_key("qru3d", "qru2d", "c3d"), "qru3d"),
    "schedule": (_choice_key("alternating", "forward", "bidirectional"), "alternating"),
    "width-multiplier": (float, 1.0),
    "width": (int, 8),
    "layers": (int, 3),
    "residual": (_bool_key, True),
    "seed": (int, 0),
    "epochs": (int, 100),
    "policy": (_choice_key("schedule", "fixed"), "schedule"),
    "lr": (float, 1e-3),
    "batch-size": (int, 16),
    "sigma": (float, 50.0),
    "patch-size": (int, 64),
    "patch-stride": (int, 0),
    "augment": (_choice_key("none", "rotate", "rescale", "full"), "none"),
}


def parse_config_file(path):
    """Read `key = value` lines; unknown keys are rejected outright."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, text = line.partition("=")
            key = key.strip()
            text = text.strip()
            if key not in CONFIG_KEYS:
                known = ", ".join(sorted(CONFIG_KEYS))
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r} (known: {known})")
            caster = CONFIG_KEYS[key][0]
            try:
                values[key] = caster(text)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def resolve_settings(args):
    """Defaults, overridden by the config file, overridden by flags."""
    settings = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    if getattr(args, "config", None):
        settings.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            settings[key] = flag
    return settings


def _meta_lines(command, settings):
    lines = [f"# command: {command}"]
    for key in sorted(settings):
        lines.append(f"# {key}: {settings[key]}")
    return "\n".join(lines) + "\n"


def _write_meta(path, command, settings):
    with open(path, "w") as fh:
        fh.write(_meta_lines(command, settings))


def _augment_value(name):
    return {"none": False, "full": True, "rotate": ("rotate",),
            "rescale": ("rescale",)}[name]


def cmd_gen_synthetic(args):
    from .hsio import gen_synthetic, write_hsi
    cube = gen_synthetic(args.height, args.width, args.bands, args.seed, rank=args.rank)
    write_hsi(args.out, cube)
    _write_meta(args.out + ".meta", "gen-synthetic", {
        "height": args.height, "width": args.width, "bands": args.bands,
        "seed": args.seed, "rank": args.rank, "out": args.out})
    print(f"wrote {args.out} ({args.height}x{args.width}x{args.bands})")
    return 0


def cmd_add_noise(args):
    from .hsio import read_hsi, write_hsi
    from .noise import CorruptionReport, add_gaussian_iid, synthesize_case
    cube = read_hsi(args.input)
    if args.case is not None:
        noisy, report = synthesize_case(cube, args.case, args.seed)
        regime = f"case {args.case}"
    else:
        noisy = add_gaussian_iid(cube, args.iid_sigma, args.seed)
        report = CorruptionReport("iid-gaussian")
        report.sigma_per_band = [float(args.iid_sigma)] * cube.shape[2]
        regime = f"iid sigma {args.iid_sigma:g}"
    write_hsi(args.output, noisy.astype(cube.dtype))
    report_path = args.report or args.output + ".report.txt"
    with open(report_path, "w") as fh:
        fh.write(_meta_lines("add-noise", {
            "input": args.input, "output": args.output,
            "case": args.case, "iid-sigma": args.iid_sigma, "seed": args.seed}))
        fh.write(report.to_text())
    print(f"wrote {args.output} ({regime}); report in {report_path}")
    return 0


def cmd_denoise(args):
    import numpy as np
    from .hsio import read_hsi, write_hsi
    from .network import load_weights
    model = load_weights(args.weights, global_residual=args.residual)
    cube = read_hsi(args.input)
    req = model.config.downsample_factor()
    for axis, name in ((0, "H"), (1, "W"), (2, "B")):
        if cube.shape[axis] % req[axis] != 0:
            raise ValueError(
                f"{name} extent {cube.shape[axis]} not divisible by {req[axis]}; "
                f"crop or pad the cube so the encoder can downsample")
    x = np.ascontiguousarray(cube[np.newaxis, np.newaxis], dtype=np.float32)
    out, _ = model.forward(x)
    restored = np.clip(out[0, 0], 0.0, 1.0).astype(np.float32)
    write_hsi(args.output, restored)
    _write_meta(args.output + ".meta", "denoise", {
        "weights": args.weights, "input": args.input, "output": args.output,
        "residual": args.residual})
    print(f"wrote {args.output} ({cube.shape[0]}x{cube.shape[1]}x{cube.shape[2]})")
    return 0


def cmd_eval(args):
    from .hsio import read_hsi
    from .metrics import psnr, psnr_per_band, sam, ssim
    clean = read_hsi(args.clean).astype("float64")
    bands = clean.shape[2]
    lines = [_meta_lines("eval", {"clean": args.clean}).rstrip("\n")]
    header = ["file", "mpsnr", "mssim", "sam"]
    header += [f"psnr_b{j + 1}" for j in range(bands)]
    lines.append(",".join(header))
    for path in args.inputs:
        cube = read_hsi(path).astype("float64")
        if cube.shape != clean.shape:
            raise ValueError(
                f"{path} shape {cube.shape} does not match clean {clean.shape}")
        row = [path, f"{psnr(cube, clean):.6f}", f"{ssim(cube, clean):.6f}",
               f"{sam(cube, clean):.6f}"]
        row += [f"{v:.6f}" for v in psnr_per_band(cube, clean)]
        lines.append(",".join(row))
        print(f"{path}: mpsnr {row[1]} mssim {row[2]} sam {row[3]}")
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return 0


def _layer_index(text, n_layers):
    if text == "first":
        return 0
    if text == "last":
        return n_layers - 1
    try:
        number = int(text)
    except ValueError:
        raise ValueError(f"--layer takes 'first', 'last', or a 1-based index, got {text!r}")
    if number < 1 or number > n_layers:
        raise ValueError(f"--layer {number} outside 1..{n_layers}")
    return number - 1


def cmd_gcs(args):
    import numpy as np
    from .gcs import (GcsMatrix, gcs_matrix, gcs_to_csv, overlay_values,
                      pooling_traces, relative_bands, values_to_pgm)
    from .hsio import read_hsi
    from .network import load_weights
    model = load_weights(args.weights, global_residual=args.residual)
    cube = read_hsi(args.input)
    req = model.config.downsample_factor()
    for axis, name in ((0, "H"), (1, "W"), (2, "B")):
        if cube.shape[axis] % req[axis] != 0:
            raise ValueError(
                f"{name} extent {cube.shape[axis]} not divisible by {req[axis]}; "
                f"crop or pad the cube so the encoder can downsample")
    layer = _layer_index(args.layer, len(model.units))
    parent = os.path.dirname(args.out_prefix)
    if parent:
        os.makedirs(parent, exist_ok=True)
    x = np.ascontiguousarray(cube[np.newaxis, np.newaxis], dtype=np.float32)
    _, traces = model.forward(x, keep_traces=True)
    matrices = [gcs_matrix(t, eps=args.eps) for t in pooling_traces(traces, layer)]
    meta = {"weights": args.weights, "input": args.input,
            "layer": args.layer, "eps": args.eps}
    written = []
    for m in matrices:
        path = f"{args.out_prefix}.{m.direction}.csv"
        with open(path, "w") as fh:
            fh.write(_meta_lines("gcs", meta))
            fh.write(gcs_to_csv(m))
        written.append(path)
    combined = GcsMatrix(overlay_values(matrices), "combined",
                         matrices[0].h_numel,
                         np.maximum.reduce([m.excluded for m in matrices]),
                         args.eps)
    rel = relative_bands(combined)
    rel_path = f"{args.out_prefix}.relative.csv"
    with open(rel_path, "w") as fh:
        fh.write(_meta_lines("gcs", meta))
        fh.write("band,total,forward,backward\n")
        for j in range(combined.n_bands):
            fh.write(f"{j + 1},{rel.total[j]},{rel.forward[j]},{rel.backward[j]}\n")
    written.append(rel_path)
    pgm_path = f"{args.out_prefix}.pgm"
    with open(pgm_path, "wb") as fh:
        fh.write(values_to_pgm(combined.values))
    written.append(pgm_path)
    _write_meta(f"{args.out_prefix}.meta", "gcs", meta)
    print("wrote " + " ".join(written))
    return 0


def _gradcheck_cases(seed):
    import numpy as np
    from .network import build_network, desk_config
    from .qru import make_variant

    def sample(shape, tag):
        rng = np.random.default_rng([seed, tag])
        return (0.5 * rng.standard_normal(shape)).astype(np.float32)

    def rng(tag):
        return np.random.default_rng([seed, tag])

    c3d = make_variant("c3d")
    qru3d = make_variant("qru3d")
    qru2d = make_variant("qru2d")
    cases = [
        ("conv3d unit", c3d.build(rng(0), 2, 3, (1, 1, 1), "forward"),
         sample((1, 2, 4, 4, 3), 100)),
        ("conv3d stride-2 unit", c3d.build(rng(1), 2, 2, (2, 2, 1), "forward"),
         sample((1, 2, 4, 4, 3), 101)),
        ("tconv3d unit", c3d.build(rng(2), 2, 2, (2, 2, 1), "forward", transposed=True),
         sample((1, 2, 2, 2, 3), 102)),
        ("qru3d forward unit", qru3d.build(rng(3), 1, 2, (1, 1, 1), "forward"),
         sample((1, 1, 4, 4, 3), 103)),
        ("qru3d backward unit", qru3d.build(rng(4), 1, 2, (1, 1, 1), "backward"),
         sample((1, 1, 4, 4, 3), 104)),
        ("qru3d bidirectional unit", qru3d.build(rng(5), 1, 2, (1, 1, 1), "bidirectional"),
         sample((1, 1, 4, 4, 3), 105)),
        ("qru2d forward unit", qru2d.build(rng(6), 1, 2, (1, 1, 1), "forward"),
         sample((1, 1, 4, 4, 3), 106)),
        ("reduced network", build_network(desk_config(width=3, n_layers=3), seed),
         sample((1, 1, 5, 5, 4), 107)),
        ("reduced c3d network", build_network(desk_config(width=3, n_layers=3, kind="c3d"), seed),
         sample((1, 1, 5, 5, 4), 108)),
    ]
    return cases


def cmd_gradcheck(args):
    from .training import grad_check
    failures = 0
    for name, target, x in _gradcheck_cases(args.seed):
        report = grad_check(target, x, tolerance=args.tolerance, eps=args.eps)
        status = "PASS" if report.passed else "FAIL"
        print(f"== {name}: {status} (max rel err {report.max_rel_err:.3e})")
        if args.verbose or not report.passed:
            print(report.format())
        if not report.passed:
            failures += 1
    if failures:
        print(f"{failures} gradient check(s) failed", file=sys.stderr)
        return 1
    print("all gradient checks passed")
    return 0


def _load_patch_arrays(paths, size, stride, augment):
    import numpy as np
    from .hsio import extract_patches, read_hsi
    arrays = []
    bands = None
    for path in paths:
        cube = read_hsi(path)
        if bands is None:
            bands = cube.shape[2]
        elif cube.shape[2] != bands:
            raise ValueError(
                f"{path} has {cube.shape[2]} bands, earlier cubes had {bands}")
        for patch in extract_patches(cube, spatial=size, stride=stride,
                                     augment=augment):
            arrays.append(np.ascontiguousarray(patch.data[np.newaxis],
                                               dtype=np.float32))
    return arrays


def cmd_train(args):
    from .network import build_network, desk_config, load_weights, save_weights, standard_config
    from .training import TrainOptions, load_optimizer_state, save_optimizer_state, train
    settings = resolve_settings(args)
    stride = settings["patch-stride"] or settings["patch-size"]
    augment = _augment_value(settings["augment"])
    patches = _load_patch_arrays(args.data, settings["patch-size"], stride, augment)
    if not patches:
        raise ValueError("no training patches extracted from --data")
    val_patches = None
    if args.val:
        val_patches = _load_patch_arrays(args.val, settings["patch-size"],
                                         settings["patch-size"], False)

    if args.resume_weights:
        model = load_weights(args.resume_weights, global_residual=settings["residual"])
    else:
        if settings["preset"] == "benchmark":
            config = standard_config(kind=settings["kind"],
                                     width_multiplier=settings["width-multiplier"],
                                     schedule=settings["schedule"],
                                     global_residual=settings["residual"])
        else:
            config = desk_config(width=settings["width"],
                                 n_layers=settings["layers"],
                                 kind=settings["kind"],
                                 schedule=settings["schedule"],
                                 global_residual=settings["residual"])
        model = build_network(config, settings["seed"])

    state = None
    start_epoch = 0
    if args.resume_state:
        state = load_optimizer_state(args.resume_state)
        start_epoch = state.epoch
    options = TrainOptions(
        seed=settings["seed"], epochs=settings["epochs"], start_epoch=start_epoch,
        policy=settings["policy"], lr=settings["lr"],
        batch_size=settings["batch-size"], sigma=settings["sigma"],
        val_patches=val_patches, checkpoint_dir=args.out_dir,
        max_steps_per_epoch=args.max_steps_per_epoch)
    os.makedirs(args.out_dir, exist_ok=True)
    state, log = train(model, patches, options, state=state, log_fn=print)
    save_weights(os.path.join(args.out_dir, "weights_final.q3dw"), model)
    save_optimizer_state(os.path.join(args.out_dir, "optim_final.q3da"), state)
    log_path = os.path.join(args.out_dir, "trainlog.csv")
    with open(log_path, "w") as fh:
        fh.write(_meta_lines("train", settings))
        fh.write(log.to_csv())
    print(f"wrote {log_path} and final weights in {args.out_dir}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hsdenoise",
        description="Hyperspectral denoising toolkit: train, apply, and "
                    "inspect band-recurrent denoising networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a seeded synthetic cube")
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--bands", type=int, default=31)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rank", type=int, default=4)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("add-noise", help="corrupt a cube and write a report")
    p.add_argument("input")
    p.add_argument("output")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--case", type=int, choices=(1, 2, 3, 4, 5))
    group.add_argument("--iid-sigma", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_add_noise)

    p = sub.add_parser("denoise", help="apply trained weights to a cube")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--weights", required=True)
    p.add_argument("--residual", type=_bool_key, default=True,
                   help="global residual on/off (must match training)")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="metrics of cubes against a clean cube")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--clean", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gcs", help="band-contribution analysis of one layer")
    p.add_argument("input")
    p.add_argument("--weights", required=True)
    p.add_argument("--layer", default="first",
                   help="'first', 'last', or a 1-based layer index")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--residual", type=_bool_key, default=True)
    p.set_defaults(func=cmd_gcs)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--data", nargs="+", required=True, help="training cubes (.hsi)")
    p.add_argument("--val", nargs="*", default=(), help="validation cubes (.hsi)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume-weights")
    p.add_argument("--resume-state")
    p.add_argument("--max-steps-per-epoch", type=int)
    for key, (caster, _) in CONFIG_KEYS.items():
        p.add_argument(f"--{key}", type=caster, default=None, dest=key.replace("-", "_"))
    p.set_defaults(func=cmd_train)

    return parser


def main(argv=None):
    try:
        _apply_thread_env()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
