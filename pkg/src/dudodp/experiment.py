"""Desk-scale experiment driver: configs, datasets, priors, runs and tables.

Every function here writes its results atomically and deterministically,
so rerunning with the same configuration reproduces the output tree byte
for byte.  Nothing time-dependent is written to disk; timings go to the log.
"""

from __future__ import annotations

import concurrent.futures
import copy
import dataclasses
import io
import json
import logging
import shlex
import time
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .diffusion import AnalyticDenoiser, Normalizer, TemplatePrior, make_schedule
from .errors import ConfigurationError, ContractError, DataError, DenoiserUnavailable
from .io import atomic_write_bytes, atomic_write_json, read_array, write_array
from .mar import MODE_LABELS, MODES, FusionConfig, MarInput, dudodp_run, li_baseline, nmar_baseline, restore_metal
from .metrics import ScoreRecord, assign_groups, group_report, psnr, records_from_csv, records_to_csv, ssim
from .phantom import (METAL_HU, PhantomFamily, body_support, compute_trace, default_spectrum, generate_phantom,
                      insert_metal, make_metal_mask, monochromatic_spectrum, simulate_metal_sinogram)
from .plugin import ExternalDenoiser
from .tomography import MU_WATER, Geometry, fbp, forward_project, mu_to_hu

log = logging.getLogger(__name__)

DISPLAY_WINDOW = (-175.0, 275.0)
METHODS = ("dudodp", "li", "nmar", "ma")
SWEEP_A = (0.3, 0.4, 0.5)
SWEEP_N = (3.0, 4.0, 5.0)

DEFAULT_CONFIG = {
    "geometry": {"beam": "fan", "n_views": 96, "n_bins": 97, "image_size": 64, "pixel_spacing": 1.0},
    "phantoms": {"count": 20, "seed": 0, "jitter": 0.5, "n_lesions": 2},
    "metal": {
        "areas": [124, 53, 27, 9, 4],
        "centers": [[-0.22, 0.02], [0.22, 0.02], [0.05, -0.1], [-0.1, 0.15], [0.12, 0.12]],
        "aspect": 1.3,
        "rotation": 0.4,
        "metal_hu": METAL_HU,
    },
    "spectrum": {"n0": 1e6, "polychromatic": True, "subrays": 2},
    "prior": {"count": 100, "seed": 10000},
    "diffusion": {"T": 1000, "beta_1": 1e-4, "beta_T": 2e-2},
    "method": {
        "a": 0.4, "n": 4.0, "delta_y": 0.8, "mask_scale": 4.0, "mode": "full", "steps": 100,
        "clamp_masks": True, "update": "marginal", "seed": 0,
    },
    "report": {"group_bounds": [100, 40, 20, 6], "exclude_metal": False},
    "mu_water": MU_WATER,
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``"a.b.c=VALUE"`` -> (["a", "b", "c"], value); VALUE is JSON or a bare string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip().split("."), value


def load_config(path=None, overrides=()) -> dict:
    """Defaults, updated by an optional JSON file and then dotted overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigurationError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    for item in overrides:
        keys, value = parse_override(item)
        update = value
        for k in reversed(keys):
            update = {k: update}
        cfg = _merge(cfg, update)
    validate_config(cfg)
    return cfg


def _seed_range(block: dict) -> range:
    return range(int(block["seed"]), int(block["seed"]) + int(block["count"]))


def validate_config(cfg: dict) -> None:
    geometry_from_config(cfg)
    fusion_from_config(cfg)
    m = cfg["metal"]
    if len(m["areas"]) != len(m["centers"]) or not m["areas"]:
        raise ConfigurationError("metal.areas and metal.centers must be nonempty and of equal length")
    if cfg["phantoms"]["count"] < 1 or cfg["prior"]["count"] < 1:
        raise ConfigurationError("phantom and prior counts must be >= 1")
    overlap = set(_seed_range(cfg["phantoms"])) & set(_seed_range(cfg["prior"]))
    if overlap:
        raise ConfigurationError(f"prior and test phantom seeds overlap (e.g. {min(overlap)}); refusing to leak")
    if not cfg["mu_water"] > 0:
        raise ConfigurationError("mu_water must be positive")


def geometry_from_config(cfg: dict) -> Geometry:
    try:
        return Geometry.from_dict(cfg["geometry"])
    except TypeError as exc:
        raise ConfigurationError(f"bad geometry block: {exc}") from exc


def fusion_from_config(cfg: dict, **changes) -> FusionConfig:
    block = {k: v for k, v in cfg["method"].items() if k != "seed"}
    block.update(changes)
    try:
        return FusionConfig(**block)
    except TypeError as exc:
        raise ConfigurationError(f"bad method block: {exc}") from exc


def schedule_from_config(cfg: dict):
    d = cfg["diffusion"]
    return make_schedule(int(d["T"]), float(d["beta_1"]), float(d["beta_T"]))


def family_from_config(cfg: dict) -> PhantomFamily:
    p = cfg["phantoms"]
    return PhantomFamily(jitter=float(p["jitter"]), n_lesions=int(p["n_lesions"]))


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------

CASE_FILES = ("phantom", "metal_phantom", "gt_sinogram", "ma_sinogram", "metal_mask", "trace")


def case_id(phantom_seed: int, metal_index: int) -> str:
    return f"p{phantom_seed:05d}_m{metal_index}"


def generate_dataset(cfg: dict, out_dir) -> dict:
    """Simulate every (phantom, metal) pair and write a manifest."""
    out = Path(out_dir)
    geom = geometry_from_config(cfg)
    fam = family_from_config(cfg)
    mw = float(cfg["mu_water"])
    sp = cfg["spectrum"]
    spectrum = default_spectrum(float(sp["n0"])) if sp["polychromatic"] else monochromatic_spectrum(float(sp["n0"]))
    m = cfg["metal"]
    size = geom.image_size
    cases = []
    for pseed in _seed_range(cfg["phantoms"]):
        spec = fam.spec(pseed)
        gt = generate_phantom(spec, size, mw)
        support = body_support(spec, size)
        gt_sino = forward_project(gt, geom, subrays=int(sp["subrays"]))
        for mi, (area, center) in enumerate(zip(m["areas"], m["centers"])):
            mask = make_metal_mask(size, int(area), tuple(center), float(m["aspect"]), float(m["rotation"]))
            if np.any(mask & ~support):
                raise ConfigurationError(f"metal {mi} leaves the body of phantom {pseed}")
            with_metal = insert_metal(gt, mask, float(m["metal_hu"]), mw)
            seed = pseed * 1000 + mi
            ma = simulate_metal_sinogram(with_metal, spectrum, geom, seed, metal_mask=mask,
                                         subrays=int(sp["subrays"]), mu_water=mw)
            trace = compute_trace(mask, geom, subrays=int(sp["subrays"]))
            cid = case_id(pseed, mi)
            cdir = out / "cases" / cid
            files = {}
            for name, arr, kind, units in (
                ("phantom", gt, "image", "mu"),
                ("metal_phantom", with_metal, "image", "mu"),
                ("gt_sinogram", gt_sino, "sinogram", "line_integral"),
                ("ma_sinogram", ma, "sinogram", "line_integral"),
                ("metal_mask", mask, "image", "mask"),
                ("trace", trace, "sinogram", "mask"),
            ):
                path = write_array(cdir / name, arr, kind, units, geom if kind == "sinogram" else None)
                files[f"{name}_file"] = str(path.relative_to(out))
            cases.append({"case": cid, **files, "metal_area_px": int(mask.sum()), "seed": seed,
                          "phantom_seed": pseed, "metal_index": mi})
        log.info("phantom %d: %d metal cases", pseed, len(m["areas"]))
    manifest = {"geometry": geom.to_dict(), "mu_water": mw, "cases": cases}
    atomic_write_json(out / "config.json", cfg)
    atomic_write_json(out / "manifest.json", manifest)
    return manifest


@dataclasses.dataclass(frozen=True, eq=False)
class Case:
    id: str
    inp: MarInput
    metal_phantom: np.ndarray
    metal_area_px: int
    phantom_seed: int

    @property
    def reference(self) -> np.ndarray:
        """Scoring reference: the phantom with the display metal of y0 copied in."""
        return restore_metal(self.metal_phantom, self.inp.y0)


def load_manifest(data_dir) -> dict:
    d = Path(data_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest in {d}: {exc}") from exc
    geom = Geometry.from_dict(manifest["geometry"])
    # integrity: every file exists and has the expected shape before any method runs
    for c in manifest["cases"]:
        for name in CASE_FILES:
            arr, _ = read_array(d / c[f"{name}_file"])
            want = geom.sino_shape if "sinogram" in name or name == "trace" else geom.image_shape
            if arr.shape != want:
                raise DataError(f"{c['case']}: {name} has shape {arr.shape}, expected {want}")
    return manifest


def load_case(data_dir, entry: dict, geom: Geometry) -> Case:
    d = Path(data_dir)
    s0, _ = read_array(d / entry["ma_sinogram_file"])
    trace, _ = read_array(d / entry["trace_file"])
    mp, _ = read_array(d / entry["metal_phantom_file"])
    try:
        inp = MarInput.build(s0.astype(float), trace > 0.5, geom, mp.astype(float))
    except ContractError as exc:
        raise DataError(f"{entry['case']}: {exc}") from exc
    return Case(entry["case"], inp, mp.astype(float), int(entry["metal_area_px"]), int(entry["phantom_seed"]))


# ---------------------------------------------------------------------------
# priors and denoisers
# ---------------------------------------------------------------------------


def build_prior(cfg: dict, out_dir, test_seeds=None) -> TemplatePrior:
    """Template prior from the (held-out) prior seed range."""
    seeds = list(_seed_range(cfg["prior"]))
    test = set(_seed_range(cfg["phantoms"])) if test_seeds is None else set(test_seeds)
    if test & set(seeds):
        raise ConfigurationError("prior seeds overlap test phantom seeds; refusing to leak")
    fam = family_from_config(cfg)
    geom = geometry_from_config(cfg)
    mw = float(cfg["mu_water"])
    images = [generate_phantom(fam.spec(s), geom.image_size, mw) for s in seeds]
    prior = TemplatePrior.from_images(images, Normalizer(mu_water=mw), seeds)
    prior.save(out_dir)
    log.info("prior: %d templates, sha256 %s", prior.k, prior.checksum()[:12])
    return prior


def check_leakage(prior: TemplatePrior, manifest: dict) -> None:
    test = {int(c["phantom_seed"]) for c in manifest["cases"]}
    shared = test & set(prior.seeds)
    if shared:
        raise ConfigurationError(f"prior built from test phantom seeds {sorted(shared)[:5]}")


_WORKER: dict = {}


def _make_denoiser(spec: dict, shape, T: int):
    if spec.get("command"):
        return ExternalDenoiser(shlex.split(spec["command"]), shape, T)
    return AnalyticDenoiser(TemplatePrior.load(spec["prior"]))


def _denoiser(spec: dict, shape, T: int):
    key = (json.dumps(spec, sort_keys=True), tuple(shape), T)
    if key not in _WORKER:
        _WORKER[key] = _make_denoiser(spec, shape, T)
    return _WORKER[key]


def close_denoisers() -> None:
    for d in _WORKER.values():
        if hasattr(d, "close"):
            d.close()
    _WORKER.clear()


# ---------------------------------------------------------------------------
# running methods
# ---------------------------------------------------------------------------


def descriptor(cfg: dict, case: str, method: str, seed: int, fusion: FusionConfig | None, emit_trace: bool) -> dict:
    d = {"case": case, "method": method, "seed": seed, "emit_trace": emit_trace}
    if fusion is not None:
        d.update(mode=fusion.mode, a=fusion.a, n=fusion.n, delta_y=fusion.delta_y, steps=fusion.steps,
                 mask_scale=fusion.mask_scale, clamp_masks=fusion.clamp_masks, update=fusion.update)
    return d


def case_seed(cfg: dict, index: int) -> int:
    return int(cfg["method"]["seed"]) + index


def apply_method(case: Case, method: str, cfg: dict, fusion: FusionConfig | None, seed: int,
                 denoiser_spec: dict | None, record: bool = False):
    inp = case.inp
    geom = inp.geom
    mw = float(cfg["mu_water"])
    if method == "ma":
        return inp.y0, None
    if method == "li":
        return restore_metal(li_baseline(inp.s0, inp.trace, geom), inp.y0, mw), None
    if method == "nmar":
        return restore_metal(nmar_baseline(inp.s0, inp.trace, geom, mu_water=mw), inp.y0, mw), None
    if method == "dudodp":
        schedule = schedule_from_config(cfg)
        den = _denoiser(denoiser_spec, geom.image_shape, schedule.T)
        try:
            return dudodp_run(inp, den, schedule, fusion, seed, Normalizer(mu_water=mw), record)
        except DenoiserUnavailable as exc:
            raise DenoiserUnavailable(f"case {case.id}: {exc}") from exc
    raise ConfigurationError(f"unknown method {method!r}")


def score(case: Case, out: np.ndarray, method: str, cfg: dict) -> ScoreRecord:
    ref = case.reference
    mw = float(cfg["mu_water"])
    excl = restore_metal(np.zeros_like(ref), case.inp.y0, mw) != 0 if cfg["report"]["exclude_metal"] else None
    return ScoreRecord(case.id, method, psnr(out, ref, exclude=excl, mu_water=mw),
                       ssim(out, ref, exclude=excl, mu_water=mw), case.metal_area_px)


def preview_png(img, mu_water: float = MU_WATER) -> bytes:
    lo, hi = DISPLAY_WINDOW
    hu = mu_to_hu(np.asarray(img, dtype=float), mu_water)
    g = np.round(np.clip((hu - lo) / (hi - lo), 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(g).save(buf, format="PNG")
    return buf.getvalue()


def _work(args):
    data_dir, entry, geom_dict, method, cfg, fusion, seed, denoiser_spec, record = args
    geom = Geometry.from_dict(geom_dict)
    case = load_case(data_dir, entry, geom)
    t0 = time.perf_counter()
    out, trace = apply_method(case, method, cfg, fusion, seed, denoiser_spec, record)
    elapsed = time.perf_counter() - t0
    rec = score(case, out, method, cfg)
    snaps = None if trace is None else [np.asarray(x) for x in trace.x_dprime]
    return out, rec, snaps, elapsed


def run_method(cfg: dict, data_dir, method: str, fusion: FusionConfig | None = None,
               denoiser_spec: dict | None = None, out_dir=None, jobs: int = 1, emit_trace: bool = False,
               limit: int | None = None, tag: str | None = None):
    """Run one method over the dataset; returns (records, descriptors).

    With ``out_dir`` the reconstructions, PNG previews, scores and run
    descriptors are written below it.
    """
    if method not in METHODS:
        raise ConfigurationError(f"method must be one of {METHODS}")
    manifest = load_manifest(data_dir)
    entries = manifest["cases"][:limit] if limit else manifest["cases"]
    if method == "dudodp":
        if fusion is None:
            fusion = fusion_from_config(cfg)
        if denoiser_spec is None:
            raise ConfigurationError("dudodp needs a prior directory or a denoiser command")
        if not denoiser_spec.get("command"):
            check_leakage(TemplatePrior.load(denoiser_spec["prior"]), manifest)
    else:
        fusion = None
    tasks = [(str(data_dir), e, manifest["geometry"], method, cfg, fusion, case_seed(cfg, i), denoiser_spec,
              emit_trace) for i, e in enumerate(entries)]
    label = tag or (f"dudodp:{fusion.mode}" if method == "dudodp" else method)
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_work, tasks))
    else:
        results = [_work(t) for t in tasks]
    records, descs = [], []
    out = Path(out_dir) if out_dir is not None else None
    mw = float(cfg["mu_water"])
    geom = Geometry.from_dict(manifest["geometry"])
    for (img, rec, snaps, elapsed), task, entry in zip(results, tasks, entries):
        log.info("%s %s: psnr %.2f dB, ssim %.4f (%.2f s)", label, rec.case, rec.psnr, rec.ssim, elapsed)
        records.append(rec)
        descs.append(descriptor(cfg, rec.case, method, task[6], fusion, emit_trace))
        if out is not None:
            write_array(out / "images" / rec.case, img, "image", "mu")
            atomic_write_bytes(out / "images" / f"{rec.case}.png", preview_png(img, mw))
            if snaps:
                for k, snap in enumerate(snaps):
                    write_array(out / "traces" / rec.case / f"step_{k:04d}", snap, "image", "mu")
    records = assign_groups(records, cfg["report"]["group_bounds"])
    if out is not None:
        atomic_write_bytes(out / "scores.csv", records_to_csv(records).encode())
        atomic_write_json(out / "run.json", {"config": cfg, "geometry": geom.to_dict(), "runs": descs})
        atomic_write_json(out / "summary.json", {"method": label, **group_report(records, cfg["report"]["group_bounds"])})
    return records, descs


def _row(records, bounds) -> dict:
    rep = group_report(records, bounds)
    return {"psnr": rep["overall"]["psnr"], "ssim": rep["overall"]["ssim"], "cases": rep["overall"]["n"],
            "groups": rep["groups"]}


def ablate(cfg: dict, data_dir, denoiser_spec: dict, out_dir, jobs: int = 1, limit: int | None = None) -> dict:
    """The four module ablations (a)-(d) with shared per-case seeds, plus raw MA."""
    out = Path(out_dir)
    bounds = cfg["report"]["group_bounds"]
    rows, all_records, seeds = [], [], None
    ma, _ = run_method(cfg, data_dir, "ma", limit=limit)
    for mode in MODES:
        fusion = fusion_from_config(cfg, mode=mode)
        recs, descs = run_method(cfg, data_dir, "dudodp", fusion, denoiser_spec, jobs=jobs, limit=limit, tag=mode)
        case_seeds = {d["case"]: d["seed"] for d in descs}
        if seeds is None:
            seeds = case_seeds
        elif seeds != case_seeds:
            raise RuntimeError("ablation rows did not share seeds")
        rows.append({"label": MODE_LABELS[mode], "mode": mode, **_row(recs, bounds)})
        all_records += [dataclasses.replace(r, method=f"dudodp:{mode}") for r in recs]
    report = {"rows": rows, "ma": _row(ma, bounds), "seeds": seeds, "fusion": dataclasses.asdict(fusion_from_config(cfg))}
    atomic_write_json(out / "ablation.json", report)
    atomic_write_bytes(out / "ablation.csv", records_to_csv(list(ma) + all_records).encode())
    return report


def mask_sweep(cfg: dict, data_dir, denoiser_spec: dict, out_dir, jobs: int = 1, limit: int | None = None) -> dict:
    """3x3 grid of dynamic masks over (a, n) plus the constant mask a = 1."""
    out = Path(out_dir)
    bounds = cfg["report"]["group_bounds"]
    cells, all_records = [], []
    grid = [(a, n) for a in SWEEP_A for n in SWEEP_N] + [(1.0, float(cfg["method"]["n"]))]
    for a, n in grid:
        fusion = fusion_from_config(cfg, a=a, n=n)
        recs, _ = run_method(cfg, data_dir, "dudodp", fusion, denoiser_spec, jobs=jobs, limit=limit,
                             tag=f"a={a},n={n}")
        cells.append({"a": a, "n": n, "constant": a == 1.0, **_row(recs, bounds)})
        all_records += [dataclasses.replace(r, method=f"dudodp:a={a},n={n}") for r in recs]
    dynamic = [c for c in cells if not c["constant"]]
    best = max(dynamic, key=lambda c: c["psnr"])
    report = {
        "cells": cells,
        "best_dynamic": {"a": best["a"], "n": best["n"], "psnr": best["psnr"]},
        "constant_psnr": cells[-1]["psnr"],
        "dynamic_spread_db": max(c["psnr"] for c in dynamic) - min(c["psnr"] for c in dynamic),
    }
    atomic_write_json(out / "mask_sweep.json", report)
    atomic_write_bytes(out / "mask_sweep.csv", records_to_csv(all_records).encode())
    return report


def combine_reports(run_dirs, out_dir, bounds=None) -> dict:
    """Merge ``scores.csv`` files of several runs into one method table."""
    rows = []
    all_records = []
    for d in run_dirs:
        d = Path(d)
        try:
            recs = records_from_csv((d / "scores.csv").read_text())
            summary = json.loads((d / "summary.json").read_text())
            if bounds is None:
                bounds = json.loads((d / "run.json").read_text())["config"]["report"]["group_bounds"]
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read run directory {d}: {exc}") from exc
        label = summary.get("method", d.name)
        rows.append({"method": label, **_row(recs, bounds)})
        all_records += [dataclasses.replace(r, method=label) for r in recs]
    report = {"rows": rows, "group_bounds": list(bounds)}
    out = Path(out_dir)
    atomic_write_json(out / "report.json", report)
    atomic_write_bytes(out / "report.csv", records_to_csv(all_records).encode())
    return report
