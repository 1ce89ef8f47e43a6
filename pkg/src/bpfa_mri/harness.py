"""Experiment sweeps and reports: PSNR-vs-rate tables and dictionary summaries."""

import csv
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .core import ConfigError
from .io import load_array, load_image, save_array, save_image, write_json
from .metrics import psnr
from .phantoms import PHANTOM_KINDS, add_noise, make_phantom
from .recon import ReconConfig, initial_image, reconstruct
from .sampling import MASK_KINDS, apply_mask, make_mask

__all__ = [
    "psnr", "make_phantom", "add_noise", "ExperimentPlan", "run_sweep", "dict_report",
    "load_source", "VARIANTS", "SWEEP_FIELDS",
]

log = logging.getLogger(__name__)

VARIANTS = ("bpfa_tv", "bpfa", "tv", "zero_fill")

SWEEP_FIELDS = (
    "image", "mask_kind", "requested_rate", "achieved_rate", "variant", "seed", "iterations",
    "status", "error", "psnr", "psnr_zero_fill", "psnr_bpfa", "primal_residual_rms_first",
    "primal_residual_rms_last", "noise_std", "atoms_pi_above_001", "artifact_dir", "seconds",
)

# Columns that legitimately differ between otherwise identical runs.
TIMING_FIELDS = ("seconds",)


@dataclass
class ExperimentPlan:
    """A grid of reconstruction cells.

    ``images`` holds file paths or ``phantom:<kind>:<side>`` specs. ``recon``
    overrides :class:`ReconConfig` fields shared by every cell; ``seeds``
    drive both the mask draw and the sampler for each cell. ``noise_sigma``
    adds image-domain noise (seeded by ``seed``) before sampling.
    """

    images: list
    rates: list
    mask_kinds: list = field(default_factory=lambda: ["cartesian", "radial"])
    variants: list = field(default_factory=lambda: list(VARIANTS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    iterations: int = 200
    output_dir: str | None = None
    seed: int = 0
    noise_sigma: float = 0.0
    recon: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.images:
            raise ConfigError("plan needs at least one image")
        if not self.rates:
            raise ConfigError("plan needs at least one rate")
        for r in self.rates:
            if not 0 < r <= 1:
                raise ConfigError(f"rate {r} is outside (0,1]")
        for k in self.mask_kinds:
            if k not in MASK_KINDS:
                raise ConfigError(f"unknown mask kind {k!r}; expected one of {MASK_KINDS}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be at least 1, got {self.iterations}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        # Fail on bad overrides now rather than in every cell.
        self.base_config()

    def base_config(self) -> ReconConfig:
        d = dict(self.recon)
        d.setdefault("iterations", self.iterations)
        return ReconConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        if "images" not in d or "rates" not in d:
            raise ConfigError("plan must define 'images' and 'rates'")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"plan {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"plan {path} must hold a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_source(spec: str) -> tuple[str, np.ndarray]:
    """Resolve an image spec to ``(name, image)``.

    ``phantom:<kind>[:<side>]`` builds a synthetic phantom (side 128 by
    default); ``.bin`` files are raw arrays with a JSON sidecar; anything
    else is read as an image file.
    """
    if spec.startswith("phantom:"):
        parts = spec.split(":")
        kind = parts[1] if len(parts) > 1 else "ge-like"
        if kind not in PHANTOM_KINDS:
            raise ConfigError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
        try:
            side = int(parts[2]) if len(parts) > 2 else 128
        except ValueError as exc:
            raise ConfigError(f"bad phantom side in {spec!r}") from exc
        return f"phantom-{kind}-{side}", make_phantom(side, kind)
    path = Path(spec)
    img = load_array(path)[0] if path.suffix == ".bin" else load_image(path)
    if img.shape[0] != img.shape[1]:
        raise ConfigError(f"{path}: image must be square, got {img.shape}")
    return path.stem, img


def _rate_tag(rate: float) -> str:
    return f"{rate * 100:g}pct"


def _variant_config(base: ReconConfig, variant: str, seed: int) -> ReconConfig:
    if variant == "bpfa":
        return replace(base, lambda_g=0.0, use_dictionary=True, seed=seed)
    if variant == "tv":
        return replace(base, use_dictionary=False, seed=seed)
    return replace(base, use_dictionary=True, seed=seed)


@dataclass(frozen=True)
class _Cell:
    image_name: str
    image_spec: str
    kind: str
    rate: float
    variant: str
    seed: int

    def rel_dir(self) -> Path:
        return Path("cells") / self.image_name / self.kind / _rate_tag(self.rate) / self.variant / f"seed{self.seed}"


def _run_cell(cell: _Cell, plan: ExperimentPlan, out: Path) -> dict:
    row = {
        "image": cell.image_name, "mask_kind": cell.kind, "requested_rate": cell.rate,
        "variant": cell.variant, "seed": cell.seed, "iterations": plan.iterations,
        "artifact_dir": cell.rel_dir().as_posix(),
    }
    cell_dir = out / cell.rel_dir()
    t0 = time.perf_counter()
    try:
        _, truth = load_source(cell.image_spec)
        observed = add_noise(truth, plan.noise_sigma, plan.seed) if plan.noise_sigma > 0 else truth
        mask = make_mask(cell.kind, truth.shape[0], cell.rate, seed=cell.seed)
        y = apply_mask(observed, mask)
        row["achieved_rate"] = mask.rate
        mask.save(cell_dir)
        cfg = _variant_config(plan.base_config(), cell.variant, cell.seed)
        x0 = initial_image(y, cfg)
        row["psnr_zero_fill"] = psnr(x0, truth)
        if cell.variant == "zero_fill":
            image = x0
        else:
            cfg.save(cell_dir / "config.json")
            res = reconstruct(y, cfg, ground_truth=truth, log_path=cell_dir / "log.csv")
            image = res.image
            first, last = res.log[0], res.log[-1]
            row["primal_residual_rms_first"] = first.get("primal_residual_rms")
            row["primal_residual_rms_last"] = last.get("primal_residual_rms")
            if res.x_bpfa is not None:
                row["psnr_bpfa"] = psnr(res.x_bpfa, truth)
                save_image(cell_dir / "x_bpfa.png", res.x_bpfa)
            if res.diagnostics is not None:
                row["noise_std"] = res.diagnostics["noise_std"]
                row["atoms_pi_above_001"] = res.diagnostics["atoms_pi_above_001"]
                dict_report(res.diagnostics, cell_dir / "dictionary")
        row["psnr"] = psnr(image, truth)
        save_image(cell_dir / "image.png", image)
        save_array(cell_dir / "image.bin", image, description=f"{cell.variant} reconstruction")
        row["status"] = "ok"
    except Exception as exc:  # recorded per cell; the sweep carries on
        log.error("cell %s failed: %s", cell.rel_dir(), exc)
        log.debug("%s", traceback.format_exc())
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "error.txt").write_text(traceback.format_exc())
    row["seconds"] = time.perf_counter() - t0
    return row


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, fields, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def _summaries(rows, plan: ExperimentPlan, out: Path) -> list[Path]:
    """One PSNR-vs-rate table per mask kind: mean and std over seeds."""
    paths = []
    for kind in plan.mask_kinds:
        fields = ["image", "requested_rate"]
        for v in plan.variants:
            fields += [f"{v}_psnr_mean", f"{v}_psnr_std", f"{v}_n"]
        table = []
        for img in dict.fromkeys(r["image"] for r in rows):
            for rate in plan.rates:
                rec = {"image": img, "requested_rate": rate}
                for v in plan.variants:
                    vals = [r["psnr"] for r in rows
                            if r["image"] == img and r["mask_kind"] == kind and r["requested_rate"] == rate
                            and r["variant"] == v and r.get("status") == "ok"]
                    rec[f"{v}_n"] = len(vals)
                    if vals:
                        rec[f"{v}_psnr_mean"] = float(np.mean(vals))
                        rec[f"{v}_psnr_std"] = float(np.std(vals))
                table.append(rec)
        path = out / f"summary_{kind}.csv"
        _write_csv(path, fields, table)
        paths.append(path)
    return paths


def run_sweep(plan: ExperimentPlan, workers: int = 1) -> dict:
    """Run every (image, mask kind, rate, variant, seed) cell of ``plan``.

    Writes ``sweep.csv`` (one row per cell), ``summary_<kind>.csv`` and an
    ``index.json`` listing every artifact. Failed cells are recorded with
    their error and do not stop the sweep. Returns the index.
    """
    if not plan.output_dir:
        raise ConfigError("plan has no output_dir")
    out = Path(plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for spec in plan.images:
        try:
            names.append(load_source(spec)[0])
        except (ConfigError, OSError) as exc:
            # Unreadable source: every cell for it will fail and say why.
            log.error("image %s: %s", spec, exc)
            names.append(Path(spec).stem or spec)
    cells = [
        _Cell(name, spec, kind, rate, variant, seed)
        for name, spec in zip(names, plan.images)
        for kind in plan.mask_kinds
        for rate in plan.rates
        for variant in plan.variants
        for seed in plan.seeds
    ]
    log.info("sweep: %d cells into %s", len(cells), out)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_run_cell, cells, [plan] * len(cells), [out] * len(cells)))
    else:
        rows = []
        for c in cells:
            rows.append(_run_cell(c, plan, out))
            log.info("%s: %s psnr=%s", c.rel_dir(), rows[-1]["status"], rows[-1].get("psnr"))

    csv_path = out / "sweep.csv"
    _write_csv(csv_path, SWEEP_FIELDS, rows)
    summary_paths = _summaries(rows, plan, out)

    files = [csv_path.name] + [p.name for p in summary_paths]
    for r in rows:
        d = out / r["artifact_dir"]
        files += sorted(p.relative_to(out).as_posix() for p in d.rglob("*") if p.is_file())
    index = {
        "code_version": __version__,
        "plan": plan.to_dict(),
        "cells": len(rows),
        "failed": sum(r["status"] != "ok" for r in rows),
        "sweep_csv": csv_path.name,
        "summaries": [p.name for p in summary_paths],
        "files": files,
    }
    write_json(out / "index.json", index)
    return index


def _tile_dictionary(D: np.ndarray, side: int, upscale: int = 4) -> np.ndarray:
    """Atoms as ``side x side`` tiles, each stretched to [0, 255], on a grid."""
    K = D.shape[1]
    cols = int(math.ceil(math.sqrt(K)))
    rows = int(math.ceil(K / cols))
    cell = side * upscale + 1
    canvas = np.full((rows * cell + 1, cols * cell + 1), 255.0)
    mags = np.real(D) if not np.iscomplexobj(D) else np.abs(D)
    for k in range(K):
        a = mags[:, k].reshape(side, side)
        lo, hi = a.min(), a.max()
        a = (a - lo) / (hi - lo) * 255.0 if hi > lo else np.full_like(a, 127.5)
        r, c = divmod(k, cols)
        canvas[r * cell + 1:(r + 1) * cell, c * cell + 1:(c + 1) * cell] = np.kron(a, np.ones((upscale, upscale)))
    return canvas


def dict_report(diagnostics: dict, out_dir) -> dict:
    """Write the dictionary summary of a finished run.

    Files: ``pi_sorted.csv``, ``pi_cumulative.csv`` (last value is the
    expected number of atoms per patch), ``atoms_per_patch_hist.csv`` and
    ``dictionary.png`` (atoms ordered by decreasing ``pi``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pi = np.asarray(diagnostics["pi_sorted"], dtype=np.float64)
    order = np.asarray(diagnostics.get("order", np.arange(pi.size)))
    paths = {}

    paths["pi_sorted"] = out / "pi_sorted.csv"
    _write_csv(paths["pi_sorted"], ("rank", "atom", "pi"),
               [{"rank": i + 1, "atom": int(order[i]), "pi": float(p)} for i, p in enumerate(pi)])

    paths["pi_cumulative"] = out / "pi_cumulative.csv"
    cum = np.cumsum(pi)
    _write_csv(paths["pi_cumulative"], ("rank", "cumulative_pi"),
               [{"rank": i + 1, "cumulative_pi": float(v)} for i, v in enumerate(cum)])

    paths["histogram"] = out / "atoms_per_patch_hist.csv"
    hist = np.asarray(diagnostics["histogram"])
    _write_csv(paths["histogram"], ("atoms", "patches"),
               [{"atoms": i, "patches": int(h)} for i, h in enumerate(hist)])

    if diagnostics.get("dictionary") is not None:
        D = np.asarray(diagnostics["dictionary"])
        side = int(round(math.sqrt(D.shape[0])))
        paths["dictionary_png"] = out / "dictionary.png"
        tile = np.rint(_tile_dictionary(D, side)).astype(np.uint8)
        Image.fromarray(tile, mode="L").save(paths["dictionary_png"])
    return paths
