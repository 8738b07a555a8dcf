"""Command-line front end: capture gradients, attack, score, compare.

Subcommands
    gradients   one forward/backward pass on the configured image,
                gradient capture written to a flat binary file
    attack      reconstruct the image from a gradient capture; writes
                raw + denoised PPMs and a JSON report
    metric      rank-deficiency leakage score of the configured model
    suite       the four stock variants under both activation suites,
                with a combined comparison table

Experiment config is a plain key=value text file ('#' comments)::

    model=variant1.cfg          # model description (see gradleak.net)
    dataset=test_batch.bin      # CIFAR-10 binary batch ...
    image_index=0               # ... record to use, or instead:
    image=target.ppm            # a PPM image (then supply label=)
    seed=0                      # overrides the model config seed
    label=3                     # label override (optional)
    tv_weight=0.15
    out=results
    max_iters=5000              # solver knobs
    tol=1e-10
    pullback_weight=1.0
    step_init=1.0
    flip_pullback_branch=0

Relative paths are resolved against the config file's directory.  Flags
--seed/--label/--out override the config.  Exit codes: 0 success,
1 configuration error, 2 numerical failure.  Set GRADLEAK_LOG=info (or
debug) for progress logging.

Gradient file format ("GLK1"): magic bytes, then little-endian
uint32 block count and int32 label, then per array block a uint32 ndim,
ndim uint32 dims, and the float64 data.  Blocks are the conv kernel
gradients front to back, the FC weight gradient, and the FC bias
gradient; round-trips are bit-exact.
"""

import argparse
import json
import logging
import os
import struct
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from gradleak import imaging, net, secmetric
from gradleak.attack import AttackError, SolverOptions, copa_attack

log = logging.getLogger("gradleak")

GRADIENT_MAGIC = b"GLK1"

#: activation pairs run by the suite subcommand, keyed by directory name
SUITES = (
    ("tanh", ("tanh", "tanh")),
    ("mixed", ("leakyrelu", "sigmoid")),
)


class ConfigError(Exception):
    """Anything wrong with configs, paths, or file contents (exit 1)."""


# ---------------------------------------------------------------------------
# experiment config


@dataclass
class ExperimentConfig:
    model: str | None = None
    dataset: str | None = None
    image_index: int = 0
    image: str | None = None
    seed: int | None = None
    label: int | None = None
    tv_weight: float = 0.15
    out: str = "."
    max_iters: int = 5000
    tol: float = 1e-10
    pullback_weight: float = 1.0
    step_init: float = 1.0
    flip_pullback_branch: bool = False
    raw: dict = field(default_factory=dict)  # values as written, for the echo

    def solver_options(self):
        return SolverOptions(max_iters=self.max_iters, tol=self.tol,
                             pullback_weight=self.pullback_weight,
                             step_init=self.step_init,
                             flip_pullback_branch=self.flip_pullback_branch)


def _parse_bool(value):
    low = value.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


_CONFIG_PARSERS = {
    "model": str, "dataset": str, "image": str, "out": str,
    "image_index": int, "seed": int, "label": int,
    "tv_weight": float, "tol": float, "pullback_weight": float,
    "step_init": float, "max_iters": int,
    "flip_pullback_branch": _parse_bool,
}
_PATH_KEYS = ("model", "dataset", "image", "out")


def parse_experiment_config(text, base_dir="."):
    """Parse config text; relative paths resolve against base_dir."""
    cfg = ExperimentConfig()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, "
                              f"got {raw_line.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        parser = _CONFIG_PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: bad value for "
                              f"{key}: {exc}") from None
        cfg.raw[key] = value
        if key in _PATH_KEYS:
            parsed = os.path.normpath(os.path.join(base_dir, parsed))
        setattr(cfg, key, parsed)
    if cfg.tv_weight < 0:
        raise ConfigError("tv_weight must be >= 0")
    try:
        cfg.solver_options()
    except ValueError as exc:
        raise ConfigError(f"bad solver options: {exc}") from None
    return cfg


def load_experiment_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_experiment_config(text, base_dir=os.path.dirname(path) or ".")


# ---------------------------------------------------------------------------
# gradient capture files


def write_gradient_file(path, capture):
    """Serialize a GradientCapture; see the module docstring for layout."""
    blocks = list(capture.kernels) + [capture.fc_weight, capture.fc_bias]
    with open(path, "wb") as fh:
        fh.write(GRADIENT_MAGIC)
        fh.write(struct.pack("<Ii", len(blocks), capture.label))
        for arr in blocks:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_gradient_file(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read gradient file {path}: {exc}") from None

    def fail():
        return ConfigError(f"{path} is not a valid gradient file")

    if len(data) < 12 or data[:4] != GRADIENT_MAGIC:
        raise fail()
    count, label = struct.unpack_from("<Ii", data, 4)
    pos, blocks = 12, []
    for _ in range(count):
        if pos + 4 > len(data):
            raise fail()
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if ndim > 8 or pos + 4 * ndim > len(data):
            raise fail()
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + size > len(data):
            raise fail()
        blocks.append(np.frombuffer(data, dtype="<f8", count=size // 8,
                                    offset=pos).reshape(shape).copy())
        pos += size
    if pos != len(data) or len(blocks) < 3:
        raise fail()
    kernels, fc_w, fc_b = blocks[:-2], blocks[-2], blocks[-1]
    if fc_w.ndim != 2 or fc_b.ndim != 1 or any(k.ndim != 4 for k in kernels):
        raise fail()
    return net.GradientCapture(kernels=tuple(kernels), fc_weight=fc_w,
                               fc_bias=fc_b, label=int(label))


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _load_model(cfg):
    if not cfg.model:
        raise ConfigError("config needs model=<path>")
    try:
        model_cfg = net.load_model_config(cfg.model)
    except OSError as exc:
        raise ConfigError(f"cannot read model config: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seed = cfg.seed if cfg.seed is not None else model_cfg.seed
    weights = net.init_weights(model_cfg.spec, seed,
                               model_cfg.init_low, model_cfg.init_high)
    return model_cfg.spec, weights, seed


def _load_reference(cfg):
    """Returns (image, label or None, human-readable source string)."""
    if cfg.image:
        try:
            image = imaging.load_image(cfg.image)
        except OSError as exc:
            raise ConfigError(f"cannot read image: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return image, None, cfg.raw.get("image", cfg.image)
    if cfg.dataset:
        try:
            image, label = imaging.load_cifar10(cfg.dataset, cfg.image_index)
        except OSError as exc:
            raise ConfigError(f"cannot read dataset: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        ref = f"{cfg.raw.get('dataset', cfg.dataset)}[{cfg.image_index}]"
        return image, label, ref
    raise ConfigError("config needs dataset=<path> or image=<path>")


def _resolve_label(cfg, file_label, spec):
    label = cfg.label if cfg.label is not None else file_label
    if label is None:
        raise ConfigError("no label available: supply label= in the config "
                          "(PPM inputs carry no label)")
    if not 0 <= label < spec.class_count:
        raise ConfigError(f"label {label} out of range for "
                          f"{spec.class_count} classes")
    return int(label)


def _check_capture(spec, capture):
    shapes = [k.shape for k in capture.kernels]
    expect = [(l.geom.out_channels, l.geom.in_channels, l.geom.kernel_size,
               l.geom.kernel_size) for l in spec.convs]
    if (shapes != expect
            or capture.fc_weight.shape != (spec.fc.out_dim, spec.fc.in_dim)
            or capture.fc_bias.shape != (spec.fc.out_dim,)):
        raise ConfigError("gradient file does not match the model config "
                          f"(gradient shapes {shapes}, model wants {expect})")


def _out_dir(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _config_echo(cfg):
    return dict(sorted(cfg.raw.items()))


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_attack_pipeline(cfg, spec, weights, capture, reference, image_ref,
                        seed, out_dir):
    """Attack + denoise + score + metric; returns the report dict.

    Label precedence: explicit config/flag override, else inference from
    gradient signs when the FC input activation keeps values nonnegative
    (sigmoid), else the label stored in the gradient file.
    """
    _check_capture(spec, capture)
    if cfg.label is not None:
        label_arg, source = cfg.label, "override"
    elif spec.convs[-1].activation.kind == "sigmoid":
        label_arg, source = None, "inferred"
    else:
        label_arg, source = capture.label, "file"
    log.info("attack: label source %s", source)
    result = copa_attack(spec, weights, capture, label=label_arg,
                         opts=cfg.solver_options())
    timings = dict(result.timings)

    t0 = time.perf_counter()
    raw_image = result.image
    clipped = np.clip(raw_image, 0.0, 1.0)
    denoised = imaging.tv_denoise(clipped, weight=cfg.tv_weight)
    timings["denoise"] = time.perf_counter() - t0
    quality_raw = imaging.quality(reference, raw_image)
    quality_tv = imaging.quality(reference, denoised)

    t0 = time.perf_counter()
    metric = secmetric.security_metric(
        spec, weights, reference, result.label,
        probe_info={"seed": seed, "image": image_ref})
    timings["metric"] = time.perf_counter() - t0

    raw_path = os.path.join(out_dir, "reconstruction_raw.ppm")
    tv_path = os.path.join(out_dir, "reconstruction_denoised.ppm")
    imaging.save_image(raw_path, clipped)
    imaging.save_image(tv_path, denoised)

    layers = []
    for i, (system, sol) in enumerate(zip(result.systems,
                                          result.conv_solutions)):
        t0 = time.perf_counter()
        rank = system.rank
        timings[f"rank{i}"] = time.perf_counter() - t0
        layers.append({
            "index": i, "mode": sol.mode, "rows": system.rows,
            "cols": system.cols, "rank": rank,
            "iterations": sol.iterations,
            "residual_norm": sol.residual_norm,
        })
    report = {
        "config": _config_echo(cfg),
        "seed": seed,
        "image": image_ref,
        "label": {"value": result.label, "source": source},
        "fc": {"mode": result.fc_solution.mode,
               "residual_norm": result.fc_solution.residual_norm},
        "layers": layers,
        "metric": metric.as_dict(),
        "quality": {"raw": quality_raw.as_dict(),
                    "denoised": quality_tv.as_dict()},
        "timings": timings,
    }
    return report


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradients(cfg):
    spec, weights, seed = _load_model(cfg)
    reference, file_label, image_ref = _load_reference(cfg)
    if reference.shape != spec.input_shape:
        raise ConfigError(f"image shape {reference.shape} does not match "
                          f"model input {spec.input_shape}")
    label = _resolve_label(cfg, file_label, spec)
    log.info("gradients: %s label=%d seed=%d", image_ref, label, seed)
    _, capture, _ = net.loss_and_gradients(spec, weights, reference, label)
    out_dir = _out_dir(cfg)
    path = os.path.join(out_dir, "gradients.glk")
    write_gradient_file(path, capture)
    print(path)
    return 0


def cmd_attack(cfg, grads_path):
    spec, weights, seed = _load_model(cfg)
    reference, _, image_ref = _load_reference(cfg)
    if reference.shape != spec.input_shape:
        raise ConfigError(f"image shape {reference.shape} does not match "
                          f"model input {spec.input_shape}")
    capture = read_gradient_file(grads_path)
    out_dir = _out_dir(cfg)
    report = run_attack_pipeline(cfg, spec, weights, capture, reference,
                                 image_ref, seed, out_dir)
    report_path = os.path.join(out_dir, "report.json")
    _write_json(report_path, report)
    q = report["quality"]
    print(f"{report_path} mse={q['raw']['mse']:.6g} "
          f"mse_denoised={q['denoised']['mse']:.6g} "
          f"score={report['metric']['total']:g}")
    return 0


def cmd_metric(cfg, upper_bound=False):
    spec, weights, seed = _load_model(cfg)
    out_dir = _out_dir(cfg)
    if upper_bound:
        d = len(spec.convs)
        layers = []
        for j, layer in enumerate(spec.convs):
            g = layer.geom
            rows = g.output_dim + g.weight_count
            bound = min(rows, g.input_dim)
            layers.append({"index": j + 1, "rows": rows, "cols": g.input_dim,
                           "rank": bound,
                           "contribution": (d - j) / d * (bound - g.input_dim)})
        payload = {"layers": layers,
                   "total": secmetric.upper_bound_metric(spec),
                   "probe": None, "mode": "upper-bound",
                   "config": _config_echo(cfg), "seed": seed}
    else:
        reference, file_label, image_ref = _load_reference(cfg)
        if reference.shape != spec.input_shape:
            raise ConfigError(f"image shape {reference.shape} does not match "
                              f"model input {spec.input_shape}")
        label = _resolve_label(cfg, file_label, spec)
        report = secmetric.security_metric(
            spec, weights, reference, label,
            probe_info={"seed": seed, "image": image_ref})
        payload = report.as_dict()
        payload["mode"] = "probe"
        payload["config"] = _config_echo(cfg)
        payload["seed"] = seed
    path = os.path.join(out_dir, "metric.json")
    _write_json(path, payload)
    print(f"{path} total={payload['total']:g}")
    return 0


def _suite_run(cfg, variant, suite_key, activations, reference, label,
               image_ref, seed):
    spec = net.cnn3_variant(variant, activations)
    weights = net.init_weights(spec, seed)
    _, capture, _ = net.loss_and_gradients(spec, weights, reference, label)
    run_dir = os.path.join(cfg.out, f"variant{variant}_{suite_key}")
    os.makedirs(run_dir, exist_ok=True)
    write_gradient_file(os.path.join(run_dir, "gradients.glk"), capture)
    report = run_attack_pipeline(cfg, spec, weights, capture, reference,
                                 image_ref, seed, run_dir)
    report["variant"] = variant
    report["activations"] = [str(l.activation) for l in spec.convs]
    _write_json(os.path.join(run_dir, "report.json"), report)
    return report


def cmd_suite(cfg, variants=(1, 2, 3, 4), threads=1):
    reference, file_label, image_ref = _load_reference(cfg)
    if reference.shape != (3, 32, 32):
        raise ConfigError("suite models take 3x32x32 inputs, image is "
                          f"{reference.shape}")
    label = cfg.label if cfg.label is not None else file_label
    if label is None:
        raise ConfigError("no label available: supply label= in the config")
    seed = cfg.seed if cfg.seed is not None else 0
    _out_dir(cfg)
    runs = [(v, key, acts) for v in variants for key, acts in SUITES]
    log.info("suite: %d runs, %d worker(s)", len(runs), threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {
                (v, key): pool.submit(_suite_run, cfg, v, key, acts,
                                      reference, label, image_ref, seed)
                for v, key, acts in runs
            }
            reports = {k: f.result() for k, f in futures.items()}
    else:
        reports = {(v, key): _suite_run(cfg, v, key, acts, reference, label,
                                        image_ref, seed)
                   for v, key, acts in runs}

    header = (f"{'variant':<8} {'activations':<20} {'mse':>11} "
              f"{'psnr_db':>9} {'mse_tv':>11} {'psnr_tv':>9} {'score':>9}")
    lines = [header, "-" * len(header)]
    ordered = []
    for v, key, _ in runs:
        rep = reports[(v, key)]
        ordered.append(rep)
        q_raw, q_tv = rep["quality"]["raw"], rep["quality"]["denoised"]
        lines.append(
            f"{v:<8} {'+'.join(rep['activations']):<20} "
            f"{q_raw['mse']:>11.4e} {q_raw['psnr_db']:>9.3f} "
            f"{q_tv['mse']:>11.4e} {q_tv['psnr_db']:>9.3f} "
            f"{rep['metric']['total']:>9.1f}")
    table = "\n".join(lines) + "\n"
    with open(os.path.join(cfg.out, "comparison.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table)
    _write_json(os.path.join(cfg.out, "suite_report.json"),
                {"config": _config_echo(cfg), "seed": seed,
                 "image": image_ref, "runs": ordered})
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; keep 2 for numerical failures only
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="gradleak",
                     description="Gradient-inversion attack and "
                                 "rank-deficiency leakage score for small "
                                 "CNNs.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p, label_flag=True):
        p.add_argument("--config", required=True, help="experiment config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="weight seed (overrides "
                                                "config and model config)")
        if label_flag:
            p.add_argument("--label", type=int,
                           help="label override (overrides config)")

    p = sub.add_parser("gradients", help="capture gradients for one image")
    common(p)
    p = sub.add_parser("attack", help="reconstruct an image from gradients")
    common(p)
    p.add_argument("--grads", required=True, help="gradient file (GLK1)")
    p = sub.add_parser("metric", help="leakage score of the configured model")
    common(p)
    p.add_argument("--upper-bound", action="store_true",
                   help="gradient-free structural bound instead of "
                        "probe-based ranks")
    p = sub.add_parser("suite", help="stock variants under both activation "
                                     "suites")
    common(p)
    p.add_argument("--variants", default="1,2,3,4",
                   help="comma-separated subset of 1,2,3,4")
    p.add_argument("--threads", type=int, default=1,
                   help="parallel pipelines (default 1)")
    return parser


def _apply_overrides(cfg, args):
    if args.out is not None:
        cfg.out = args.out
        cfg.raw["out"] = args.out
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw["seed"] = str(args.seed)
    if getattr(args, "label", None) is not None:
        cfg.label = args.label
        cfg.raw["label"] = str(args.label)
    return cfg


def _init_logging():
    level_name = os.environ.get("GRADLEAK_LOG", "warning").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _init_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_experiment_config(args.config), args)
        if args.command == "gradients":
            return cmd_gradients(cfg)
        if args.command == "attack":
            return cmd_attack(cfg, args.grads)
        if args.command == "metric":
            return cmd_metric(cfg, upper_bound=args.upper_bound)
        try:
            variants = tuple(int(v) for v in args.variants.split(","))
        except ValueError:
            raise ConfigError(f"bad --variants value {args.variants!r}")
        if not variants or any(v not in (1, 2, 3, 4) for v in variants):
            raise ConfigError("--variants entries must be in 1..4")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return cmd_suite(cfg, variants=variants, threads=args.threads)
    except ConfigError as exc:
        print(f"gradleak: config error: {exc}", file=sys.stderr)
        return 1
    except (AttackError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"gradleak: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
