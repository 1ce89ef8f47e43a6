"""Command-line front end: ``bpfa-mri {mask,denoise,recon,sweep,dict-report}``.

Exit status is 0 on success, 1 for usage errors (bad flags or values) and 2
for runtime failures such as unreadable files.
"""

import argparse
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, bpfa
from .core import ConfigError, PatchConfig
from .harness import ExperimentPlan, dict_report, load_source, run_sweep
from .io import load_array, save_array, save_image, write_json
from .metrics import psnr
from .phantoms import add_noise
from .recon import ReconConfig, initial_image, parse_lambda, reconstruct
from .sampling import MASK_KINDS, KSpaceData, SamplingMask, apply_mask, make_mask

OUTPUT_ENV = "BPFA_MRI_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("bpfa_mri")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _rate(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"rate must be a number in (0,1], got {text!r}") from None
    if not 0.0 < v <= 1.0 or math.isnan(v):
        raise argparse.ArgumentTypeError(f"rate must lie in (0,1], got {text}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _lambda(text: str) -> float:
    try:
        return parse_lambda(text)
    except (ConfigError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_common(p):
    p.add_argument("-o", "--output-dir", help=f"output directory (default: a run-stamped folder under "
                   f"${OUTPUT_ENV}, or ./runs)")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker/BLAS thread count (default: logical cores)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def _add_hyper(p):
    g = p.add_argument_group("dictionary prior")
    g.add_argument("--K", type=_positive_int, help="dictionary truncation level (default 108)")
    g.add_argument("--c", type=float, help="beta-process concentration (default 1)")
    g.add_argument("--gamma0", type=float, help="beta-process mass, expected atoms per patch (default 5)")
    g.add_argument("--e0", type=float, help="weight-precision gamma shape (default 1)")
    g.add_argument("--f0", type=float, help="weight-precision gamma rate (default 1)")
    g.add_argument("--g0", type=float, help="noise-precision gamma shape (default: from the data)")
    g.add_argument("--h0", type=float, help="noise-precision gamma rate (default: from the data)")
    g.add_argument("--prior-strength", type=float,
                   help="data-driven g0 as a fraction of the likelihood shape (default 0.1)")
    g.add_argument("--prior-snr", type=float,
                   help="data-driven h0: prior noise variance is v / prior_snr (default 8)")


_HP_FLAGS = ("K", "c", "gamma0", "e0", "f0", "g0", "h0", "prior_strength", "prior_snr")


def _hp_overrides(args) -> dict:
    return {k: getattr(args, k) for k in _HP_FLAGS if getattr(args, k, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bpfa-mri", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("mask", help="generate a k-space sampling mask")
    p.add_argument("--kind", choices=MASK_KINDS, default="cartesian")
    p.add_argument("--rate", type=_rate, default=0.3, help="fraction of k-space to sample, in (0,1]")
    p.add_argument("--side", type=_positive_int, default=128, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--center-fraction", type=float, default=0.2,
                   help="cartesian: share of lines forced into the central band")
    p.add_argument("--decay", type=float, default=4.0, help="cartesian: variable-density exponent")
    p.add_argument("--apply", metavar="IMAGE",
                   help="also sample IMAGE (file or phantom:<kind>:<side>) and write y.bin")
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   help="with --apply: image-domain noise std before sampling")
    _add_common(p)

    p = sub.add_parser("denoise", help="BPFA denoising of a single image")
    p.add_argument("--input", required=True, help="image file or phantom:<kind>:<side>")
    p.add_argument("--sigma", type=float, default=0.0,
                   help="add noise with this std first (0: the input is already noisy)")
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--sweeps", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-side", type=_positive_int, default=6)
    p.add_argument("--scale", type=float, default=255.0, help="pixel value mapped to 1 for the sampler")
    _add_hyper(p)
    _add_common(p)

    p = sub.add_parser("recon", help="reconstruct an image from undersampled k-space")
    p.add_argument("--input", required=True, help="k-space file written by 'mask --apply' (y.bin)")
    p.add_argument("--mask", required=True, help="mask directory or mask.png")
    p.add_argument("--config", help="JSON config; flags override its values")
    p.add_argument("--truth", help="ground-truth image (file or phantom spec) for PSNR")
    p.add_argument("--lambda", dest="lam", type=_lambda, help="data weight or 'infinity' (default)")
    p.add_argument("--lambda-g", type=float, help="TV weight; 0 disables TV (default 10)")
    p.add_argument("--rho", type=float, help="ADMM penalty (default 1000)")
    p.add_argument("--iterations", type=_positive_int, help="outer iterations (default 1000)")
    p.add_argument("--patch-side", type=_positive_int, help="patch side (default 6)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("real", "complex"))
    p.add_argument("--output-select", dest="output", choices=("x", "x_bpfa"),
                   help="reported image: k-space consistent x or the dictionary proposal")
    p.add_argument("--no-dictionary", dest="use_dictionary", action="store_const", const=False,
                   help="TV only")
    p.add_argument("--scale", type=float, help="pixel value mapped to 1 for the sampler (default 255)")
    _add_hyper(p)
    _add_common(p)

    p = sub.add_parser("sweep", help="run an experiment plan")
    p.add_argument("--plan", required=True, help="JSON experiment plan")
    _add_common(p)

    p = sub.add_parser("dict-report", help="report on a saved dictionary checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    _add_common(p)
    return parser


def _output_dir(args) -> Path:
    if args.output_dir:
        out = Path(args.output_dir)
    else:
        base = Path(os.environ.get(OUTPUT_ENV) or "runs")
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        out = base / f"{args.command}-{stamp}"
        i = 1
        while out.exists():
            out = base / f"{args.command}-{stamp}-{i}"
            i += 1
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, args, config: dict, seed, extra=None) -> None:
    m = {
        "command": args.command,
        "argv": sys.argv[1:],
        "code_version": __version__,
        "config": config,
        "seed": seed,
        "threads": args.threads,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        m.update(extra)
    write_json(out / "manifest.json", m)


def _cmd_mask(args, out: Path) -> None:
    mask = make_mask(args.kind, args.side, args.rate, args.seed, args.center_fraction, args.decay)
    mask.save(out)
    extra = {"achieved_rate": mask.rate}
    if args.apply:
        name, img = load_source(args.apply)
        if img.shape[0] != args.side:
            raise ConfigError(f"image side {img.shape[0]} does not match --side {args.side}")
        observed = add_noise(img, args.noise_sigma, args.seed) if args.noise_sigma > 0 else img
        y = apply_mask(observed, mask)
        save_array(out / "y.bin", np.fft.fftshift(y.grid()),
                   description="centred k-space grid, zero where not sampled")
        save_image(out / "truth.png", img)
        save_array(out / "truth.bin", img, description=f"source image {name}")
        extra["source"] = args.apply
        print(f"zero-fill psnr {psnr(initial_image(y, ReconConfig()), img):.3f} dB")
    print(f"{args.kind} mask, achieved rate {mask.rate:.4f} -> {out}")
    cfg = {k: getattr(args, k) for k in ("kind", "rate", "side", "center_fraction", "decay",
                                         "apply", "noise_sigma")}
    _manifest(out, args, cfg, args.seed, extra)


def _cmd_denoise(args, out: Path) -> None:
    _, clean = load_source(args.input)
    if args.sigma > 0:
        noisy = add_noise(clean, args.sigma, args.noise_seed)
    else:
        noisy = clean
    overrides = _hp_overrides(args)
    hp = bpfa.HyperParams(**{"g0": 1e-6, "h0": 1e-6, **overrides})
    start = time.perf_counter()
    den, diag = bpfa.denoise(noisy, hp, sweeps=args.sweeps, seed=args.seed,
                             patch=PatchConfig(args.patch_side), scale=args.scale)
    elapsed = time.perf_counter() - start
    save_image(out / "noisy.png", noisy)
    save_image(out / "denoised.png", den)
    save_array(out / "denoised.bin", den, description="BPFA denoised image")
    dict_report(diag, out / "dictionary")
    summary = {"noise_std": diag["noise_std"], "atoms_pi_above_001": diag["atoms_pi_above_001"],
               "seconds": elapsed}
    if args.sigma > 0:
        summary["psnr_noisy"] = psnr(noisy, clean)
        summary["psnr_denoised"] = psnr(den, clean)
    write_json(out / "summary.json", summary)
    for k, v in summary.items():
        print(f"{k} {v:.4f}" if isinstance(v, float) else f"{k} {v}")
    cfg = {"input": args.input, "sigma": args.sigma, "noise_seed": args.noise_seed, "sweeps": args.sweeps,
           "patch_side": args.patch_side, "scale": args.scale, "hp": asdict(hp)}
    _manifest(out, args, cfg, args.seed)


_RECON_FLAGS = ("lam", "lambda_g", "rho", "iterations", "patch_side", "seed", "mode", "output",
                "use_dictionary", "scale")


def resolve_recon_config(args) -> ReconConfig:
    """Config file values, then flag overrides, on top of the defaults."""
    cfg = ReconConfig.load(args.config) if args.config else ReconConfig()
    over = {k: getattr(args, k) for k in _RECON_FLAGS if getattr(args, k) is not None}
    hp_over = _hp_overrides(args)
    if hp_over:
        over["hp"] = replace(cfg.hp, **hp_over)
    return replace(cfg, **over)


def _cmd_recon(args, out: Path) -> None:
    cfg = resolve_recon_config(args)
    mask = SamplingMask.load(args.mask)
    grid, header = load_array(args.input)
    if grid.shape != (mask.side, mask.side):
        raise ConfigError(f"k-space {args.input} has shape {grid.shape}, mask side is {mask.side}")
    y = KSpaceData(mask, grid[mask.selected])
    truth = None
    if args.truth:
        _, truth = load_source(args.truth)
    cfg.save(out / "config.json")
    res = reconstruct(y, cfg, ground_truth=truth, log_path=out / "log.csv")
    save_image(out / "recon.png", res.image)
    save_array(out / "recon.bin", res.image, description=f"reconstruction ({cfg.output})")
    save_array(out / "kspace.bin", np.fft.fftshift(res.kspace), description="centred k-space of x")
    if res.x_bpfa is not None:
        save_image(out / "x_bpfa.png", res.x_bpfa)
    if res.diagnostics is not None:
        dict_report(res.diagnostics, out / "dictionary")
        bpfa.save_checkpoint(out / "checkpoint", *res.model)
        print(f"noise_std {res.diagnostics['noise_std']:.4f}")
    if truth is not None:
        print(f"zero-fill psnr {psnr(initial_image(y, cfg), truth):.3f} dB")
        print(f"psnr {psnr(res.image, truth):.3f} dB")
    print(f"output -> {out}")
    _manifest(out, args, cfg.to_dict(), cfg.seed, {"input": args.input, "mask": mask.metadata()})


def _cmd_sweep(args, out: Path | None) -> None:
    plan = ExperimentPlan.load(args.plan)
    if out is not None or not plan.output_dir:
        plan = replace(plan, output_dir=str(out or _output_dir(args)))
    # Cells are independent processes; BLAS inside each stays single threaded.
    with threadpool_limits(limits=1):
        index = run_sweep(plan, workers=args.threads)
    print(f"{index['cells']} cells, {index['failed']} failed -> {plan.output_dir}")
    _manifest(Path(plan.output_dir), args, plan.to_dict(), plan.seed)


def _cmd_dict_report(args, out: Path) -> None:
    D, codes, state = bpfa.load_checkpoint(args.checkpoint)
    diag = bpfa.diagnostics(D, codes, state)
    paths = dict_report(diag, out)
    for p in paths.values():
        print(p)
    _manifest(out, args, {"checkpoint": args.checkpoint}, state.seed)


_COMMANDS = {
    "mask": _cmd_mask,
    "denoise": _cmd_denoise,
    "recon": _cmd_recon,
    "sweep": _cmd_sweep,
    "dict-report": _cmd_dict_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = os.cpu_count() or 1
    try:
        with threadpool_limits(limits=args.threads):
            # A sweep plan may name its own output directory; -o still wins.
            out = None if args.command == "sweep" and not args.output_dir else _output_dir(args)
            _COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"bpfa-mri {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"bpfa-mri {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"bpfa-mri {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
