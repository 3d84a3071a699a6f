"""Command-line entry point: ``angioatlas <subcommand> ...``.

Case settings resolve with the precedence config file > command-line flags >
built-in defaults. Relative paths inside a config file are taken relative to
the file's own directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import atlas as atlas_mod
from .imgcore import (
    GrayImage,
    atomic_write_text,
    load_frames,
    read_nifti,
    read_png_gray,
    read_png_mask,
    write_png_gray,
    write_png_mask,
)
from .metrics import (
    cohort_stats,
    mask_sample_points,
    overlay_ssim,
    read_results,
    render_histogram,
    skew_report,
    ssim,
    tre,
    write_results,
)
from .overlay import build_overlay, export_overlay
from .preproc import PreprocParams, make_mask
from .projector import load_geometry, normalized_integral, project
from .register import (
    RegistrationConfig,
    TransformPair,
    apply_transform,
    register,
    register_affine,
    register_bspline,
    save_pair,
)
from .register.transforms import load_pair

log = logging.getLogger("angioatlas")

EXIT_STAGE_FAILURE = 2


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class CaseConfig:
    atlas: Path
    lut: Path
    frames: Path
    geometry: Path
    output: Path
    site: str
    view: str = "Anteroposterior"
    case_id: str = ""
    frame_range: tuple[int, int] | None = None
    preproc: PreprocParams = field(default_factory=PreprocParams)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    stage: str = "bspline"
    truth: Path | None = None
    debug_dir: Path | None = None

    def check_paths(self) -> None:
        for name in ("atlas", "lut", "frames", "geometry"):
            p = getattr(self, name)
            if not Path(p).exists():
                raise FileNotFoundError(f"{name} path does not exist: {p}")

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "atlas": str(self.atlas),
            "lut": str(self.lut),
            "frames": str(self.frames),
            "geometry": str(self.geometry),
            "site": self.site,
            "view": self.view,
            "frame_range": list(self.frame_range) if self.frame_range else None,
            "preproc": self.preproc.to_json(),
            "registration": self.registration.to_json(),
            "stage": self.stage,
        }


_PATH_KEYS = ("atlas", "lut", "frames", "geometry", "output", "truth", "debug_dir")


def _load_json_or_path(value, base: Path) -> dict:
    if isinstance(value, dict):
        return value
    return json.loads((base / value).read_text())


def resolve_case(args: argparse.Namespace, config_path: str | None = None) -> CaseConfig:
    """Merge a case config file over command-line flags over defaults."""
    doc: dict = {}
    base = Path.cwd()
    if config_path:
        config_path = Path(config_path)
        doc = json.loads(config_path.read_text())
        base = config_path.parent
    merged: dict = {}
    for key in _PATH_KEYS + ("site", "view", "case_id", "frame_range", "stage"):
        if key in doc and doc[key] is not None:
            val = doc[key]
            merged[key] = base / val if key in _PATH_KEYS else val
        elif getattr(args, key, None) is not None:
            merged[key] = getattr(args, key)
    missing = [k for k in ("atlas", "lut", "frames", "geometry", "output", "site") if k not in merged]
    if missing:
        raise ValueError(f"missing case settings: {', '.join(missing)}")
    preproc = PreprocParams()
    if "preproc" in doc:
        preproc = PreprocParams.from_json(_load_json_or_path(doc["preproc"], base))
    elif getattr(args, "preproc", None):
        preproc = PreprocParams.from_json(json.loads(Path(args.preproc).read_text()))
    reg = RegistrationConfig()
    if "registration" in doc:
        reg = RegistrationConfig.from_json(_load_json_or_path(doc["registration"], base))
    elif getattr(args, "registration", None):
        reg = RegistrationConfig.from_json(json.loads(Path(args.registration).read_text()))
    for key in ("atlas", "lut", "frames", "geometry", "output", "truth", "debug_dir"):
        if key in merged:
            merged[key] = Path(merged[key])
    if merged.get("frame_range") is not None:
        merged["frame_range"] = tuple(int(v) for v in merged["frame_range"])
    cfg = CaseConfig(preproc=preproc, registration=reg, **merged)
    if not cfg.case_id:
        cfg = replace(cfg, case_id=cfg.output.name)
    if cfg.truth is None and config_path and (base / "truth.json").exists():
        cfg = replace(cfg, truth=base)
    return cfg


class _Timer:
    def __init__(self):
        self.stages: dict[str, float] = {}

    def run(self, stage: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        self.stages[stage] = self.stages.get(stage, 0.0) + time.perf_counter() - t0
        return out


def _versions() -> dict:
    import numba
    import PIL
    import scipy

    from . import __version__

    return {"angioatlas": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "Pillow": PIL.__version__}


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def run_pipeline(cfg: CaseConfig) -> dict:
    """Run one case end to end; returns the results row. Raises StageError."""
    timer = _Timer()
    t_start = time.perf_counter()
    timer.run("load", cfg.check_paths)
    volume = timer.run("load", read_nifti, cfg.atlas)
    lut = timer.run("load", atlas_mod.load_lut, cfg.lut)
    geometry = timer.run("load", load_geometry, cfg.geometry)
    frames = timer.run("load", load_frames, cfg.frames, cfg.frame_range, geometry.det_spacing)
    labels = timer.run("select_labels", atlas_mod.select_labels, lut, cfg.site)
    proj = timer.run("project", project, volume, labels, geometry)
    mask = timer.run("preprocess", make_mask, frames, cfg.preproc, cfg.debug_dir)
    moving = normalized_integral(proj)
    aff = timer.run("register_affine", register_affine, mask, moving, cfg.registration)
    levels = list(aff.levels)
    bspline, cost = None, aff.final_cost
    if cfg.stage == "bspline":
        bs = timer.run("register_bspline", register_bspline, mask, moving, cfg.registration, aff.transform,
                       proj.silhouette)
        bspline, cost = bs.transform, bs.final_cost
        levels += bs.levels
    pair = TransformPair(aff.transform, bspline, cfg.registration.to_json(), cost, tuple(levels))

    def score():
        sil = proj.silhouette.as_gray()
        s_aff = overlay_ssim(mask, apply_transform(sil, TransformPair(aff.transform, None)))
        s_fin = overlay_ssim(mask, apply_transform(sil, pair)) if bspline is not None else s_aff
        return s_aff, s_fin

    s_aff, s_fin = timer.run("ssim", score)
    ov = timer.run("overlay", build_overlay, proj, pair, lut)

    tre_mean = None
    seeds = {}
    if cfg.truth is not None:
        from .phantom import read_truth

        truth_pair, _ = timer.run("tre", read_truth, cfg.truth)
        seeds["phantom"] = json.loads((Path(cfg.truth) / "truth.json").read_text()).get("seed")
        pts = mask_sample_points(read_png_mask(Path(cfg.truth) / "true_mask.png", mask.spacing))
        tre_mean = timer.run("tre", tre, truth_pair, pair, pts, mask.spacing)[0]

    out = cfg.output
    background = GrayImage(np.mean([f.data for f in frames.frames], axis=0), geometry.det_spacing)

    def export():
        out.mkdir(parents=True, exist_ok=True)
        save_pair(pair, out / "transforms.json")
        write_png_mask(mask, out / "mask.png")
        export_overlay(ov, background, out / "overlay")

    timer.run("export", export)
    row = {"case_id": cfg.case_id, "site": str(atlas_mod.InjectionSite(cfg.site).value),
           "view": str(atlas_mod.ViewLabel(cfg.view).value), "ssim_affine": s_aff, "ssim_final": s_fin,
           "tre_mean_px": tre_mean, "runtime_s": time.perf_counter() - t_start}
    write_results([row], out / "results.csv")
    resolved = cfg.to_json()
    manifest = {"case_id": cfg.case_id, "versions": _versions(), "config_sha256": config_hash(resolved),
                "config": resolved, "seeds": seeds,
                "artifacts": ["transforms.json", "mask.png", "overlay_labels.png", "overlay_composite.png",
                              "overlay_legend.json", "results.csv", "timing.json"]}
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    timing = {"stages_s": timer.stages, "total_s": time.perf_counter() - t_start}
    atomic_write_text(out / "timing.json", json.dumps(timing, indent=2) + "\n")
    return row


def _pipeline_worker(item) -> tuple[str, dict | None, str | None]:
    args, path = item
    try:
        cfg = resolve_case(args, path)
    except Exception as exc:
        return path or "", None, str(StageError("config", exc))
    try:
        return cfg.case_id, run_pipeline(cfg), None
    except StageError as exc:
        return cfg.case_id, None, str(exc)


# ---------------------------------------------------------------------------
# subcommands

def cmd_pipeline(args) -> int:
    configs = args.config or [None]
    items = [(args, c) for c in configs]
    if args.jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_pipeline_worker, items))
    else:
        results = [_pipeline_worker(it) for it in items]
    rows, failed = [], 0
    for case_id, row, err in results:
        if err:
            failed += 1
            print(f"error {case_id}: {err}", file=sys.stderr)
        else:
            rows.append(row)
            print(f"{case_id}: ssim_affine={row['ssim_affine']:.4f} ssim_final={row['ssim_final']:.4f} "
                  f"runtime={row['runtime_s']:.1f}s")
    if args.results and rows:
        write_results(rows, args.results)
    return EXIT_STAGE_FAILURE if failed else 0


def cmd_project(args) -> int:
    volume = read_nifti(args.atlas)
    lut = atlas_mod.load_lut(args.lut)
    proj = project(volume, atlas_mod.select_labels(lut, args.site), load_geometry(args.geometry))
    out = Path(args.out)
    write_png_gray(normalized_integral(proj), out.with_name(out.name + "_integral.png"))
    write_png_mask(proj.silhouette, out.with_name(out.name + "_silhouette.png"))
    print(f"max path length {proj.integral.data.max():.3f} mm, silhouette {int(proj.silhouette.data.sum())} px")
    return 0


def cmd_preprocess(args) -> int:
    params = PreprocParams.from_json(json.loads(Path(args.params).read_text())) if args.params else PreprocParams()
    spacing = load_geometry(args.geometry).det_spacing if args.geometry else (1.0, 1.0)
    frames = load_frames(args.frames, args.frame_range, spacing)
    mask = make_mask(frames, params, args.debug_dir)
    write_png_mask(mask, args.out)
    print(f"mask: {int(mask.data.sum())} px")
    return 0


def cmd_register(args) -> int:
    cfg = RegistrationConfig.from_json(json.loads(Path(args.config).read_text())) if args.config \
        else RegistrationConfig()
    spacing = tuple(args.spacing)
    fixed = read_png_mask(args.fixed, spacing)
    moving = read_png_gray(args.moving, spacing)
    silhouette = read_png_mask(args.silhouette, spacing) if args.silhouette else None
    pair = register(fixed, moving, cfg, stage=args.stage, silhouette=silhouette)
    save_pair(pair, args.out)
    print(f"final cost {pair.final_cost:.6f}")
    return 0


def cmd_overlay(args) -> int:
    volume = read_nifti(args.atlas)
    lut = atlas_mod.load_lut(args.lut)
    geometry = load_geometry(args.geometry)
    proj = project(volume, atlas_mod.select_labels(lut, args.site), geometry)
    pair = load_pair(args.transforms)
    background = read_png_gray(args.background, geometry.det_spacing)
    ov = build_overlay(proj, pair, lut)
    for p in export_overlay(ov, background, args.out):
        print(p)
    return 0


def cmd_ssim(args) -> int:
    a = read_png_gray(args.a)
    b = read_png_gray(args.b)
    if args.binarize:
        a = GrayImage((a.data > 0.5).astype(np.float64), a.spacing)
        b = GrayImage((b.data > 0.5).astype(np.float64), b.spacing)
    print(f"{ssim(a, b).mean_ssim:.6f}")
    return 0


def cmd_phantom(args) -> int:
    from .phantom import WarpBounds, make_case, phantom_geometry, phantom_lut, synth_atlas, write_case

    volume = synth_atlas(args.dims, args.territories, seed=args.atlas_seed)
    geometry = phantom_geometry(args.view, args.det)
    bounds = WarpBounds.affine_only() if args.affine_only else WarpBounds()
    case = make_case(volume, geometry, phantom_lut(volume), args.site, args.view, bounds,
                     noise_sigma=args.noise, n_frames=args.frames, seed=args.seed)
    print(write_case(case, args.out))
    return 0


def cmd_stats(args) -> int:
    rows = read_results(args.results)
    values = [float(r[args.column]) for r in rows if r.get(args.column, "") != ""]
    stats = cohort_stats(values)
    print(skew_report(stats))
    if args.out:
        for p in render_histogram(stats, args.out):
            print(p)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="angioatlas", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pl = sub.add_parser("pipeline", help="run load -> project -> mask -> register -> score -> overlay")
    pl.add_argument("--config", action="append", help="case config JSON (repeatable for batch runs)")
    pl.add_argument("--atlas")
    pl.add_argument("--lut")
    pl.add_argument("--frames")
    pl.add_argument("--geometry")
    pl.add_argument("--output")
    pl.add_argument("--site", choices=[s.value for s in atlas_mod.InjectionSite])
    pl.add_argument("--view", choices=[v.value for v in atlas_mod.ViewLabel])
    pl.add_argument("--case-id", dest="case_id")
    pl.add_argument("--frame-range", dest="frame_range", type=int, nargs=2, metavar=("FIRST", "LAST"))
    pl.add_argument("--preproc", help="preprocessing params JSON")
    pl.add_argument("--registration", help="registration config JSON")
    pl.add_argument("--stage", choices=["affine", "bspline"])
    pl.add_argument("--truth", help="phantom case directory holding truth.json")
    pl.add_argument("--debug-dir", dest="debug_dir")
    pl.add_argument("--jobs", type=int, default=1)
    pl.add_argument("--results", help="combined results CSV for all cases")
    pl.set_defaults(func=cmd_pipeline)

    pr = sub.add_parser("project", help="path-length projection of a site's territories")
    for name in ("atlas", "lut", "geometry", "out"):
        pr.add_argument(f"--{name}", required=True)
    pr.add_argument("--site", required=True, choices=[s.value for s in atlas_mod.InjectionSite])
    pr.set_defaults(func=cmd_project)

    pp = sub.add_parser("preprocess", help="DSA frames -> perfusion mask")
    pp.add_argument("--frames", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--geometry")
    pp.add_argument("--params")
    pp.add_argument("--frame-range", dest="frame_range", type=int, nargs=2, metavar=("FIRST", "LAST"))
    pp.add_argument("--debug-dir", dest="debug_dir")
    pp.set_defaults(func=cmd_preprocess)

    rg = sub.add_parser("register", help="register a moving PNG onto a fixed mask PNG")
    rg.add_argument("--fixed", required=True)
    rg.add_argument("--moving", required=True)
    rg.add_argument("--out", required=True)
    rg.add_argument("--config")
    rg.add_argument("--silhouette", help="binary moving silhouette PNG for the B-spline stage")
    rg.add_argument("--spacing", type=float, nargs=2, default=(1.0, 1.0))
    rg.add_argument("--stage", choices=["affine", "bspline"], default="bspline")
    rg.set_defaults(func=cmd_register)

    ov = sub.add_parser("overlay", help="warp per-territory projections and export the label overlay")
    for name in ("atlas", "lut", "geometry", "transforms", "background", "out"):
        ov.add_argument(f"--{name}", required=True)
    ov.add_argument("--site", required=True, choices=[s.value for s in atlas_mod.InjectionSite])
    ov.set_defaults(func=cmd_overlay)

    ss = sub.add_parser("ssim", help="SSIM between two grayscale PNGs")
    ss.add_argument("a")
    ss.add_argument("b")
    ss.add_argument("--binarize", action="store_true")
    ss.set_defaults(func=cmd_ssim)

    ph = sub.add_parser("phantom", help="write a synthetic phantom case directory")
    ph.add_argument("--out", required=True)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--atlas-seed", dest="atlas_seed", type=int, default=1)
    ph.add_argument("--dims", type=int, default=64)
    ph.add_argument("--territories", type=int, default=6)
    ph.add_argument("--det", type=int, default=128)
    ph.add_argument("--site", default="LeftAnterior", choices=[s.value for s in atlas_mod.InjectionSite])
    ph.add_argument("--view", default="Anteroposterior", choices=[v.value for v in atlas_mod.ViewLabel])
    ph.add_argument("--noise", type=float, default=0.05)
    ph.add_argument("--frames", type=int, default=12)
    ph.add_argument("--affine-only", dest="affine_only", action="store_true")
    ph.set_defaults(func=cmd_phantom)

    st = sub.add_parser("stats", help="cohort SSIM statistics and histogram from a results CSV")
    st.add_argument("results")
    st.add_argument("--column", default="ssim_final")
    st.add_argument("--out", help="histogram output stem (.svg and .png)")
    st.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error [{args.command}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
