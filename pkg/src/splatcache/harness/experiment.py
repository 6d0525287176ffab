"""Experiment driver: per-frame splat -> render -> train, metrics and reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from ..cache import CacheConfig, initialize_cache, load_hierarchy, splat_all_levels
from ..pathtracer import render_frame
from ..policy import DEFAULT_CONVENTION, PolicyConfig
from ..scene import CameraPath, DEFAULT_SCENE, default_transfer_function, load_scene, orbit_path, scene_from_dict
from ..toymedium import select_convention
from ..trainer import DEFAULT_LRS, OptimizerState, ScheduleState, TrainerConfig, train_step
from .io import read_pfm, write_pfm, write_png
from .metrics import mean_luminance, psnr, rmse

MODES = ("uniform", "nee", "nee+cache", "reference")


@dataclass
class ExperimentConfig:
    scene: Optional[str] = None  # JSON scene file; None -> procedural default
    volume_dims: tuple = (128, 128, 128)
    density: float = 2.0
    resolution: tuple = (256, 256)
    spp: int = 1
    frames: int = 1
    camera_script: str = "scene"  # scene | static | orbit
    orbit_degrees: float = 30.0
    mode: str = "nee+cache"
    seed: int = 0
    # policy
    C: float = 0.5
    activation_threshold: float = 0.9
    epsilon: float = 1e-5
    beta_convention: str = DEFAULT_CONVENTION
    beta_division: bool = True
    natural_substitution: bool = True
    # cache
    N: int = 20000
    K: int = 2
    cache_seed: int = 0
    cache_dir: Optional[str] = None  # load an initialized hierarchy instead of building one
    # trainer
    train: bool = True
    cadence: int = 1
    weight_decay: float = 1e-2
    detach_denominator: bool = True
    learning_rates: dict = dc_field(default_factory=lambda: dict(DEFAULT_LRS))
    # evaluation / output
    reference: Optional[str] = None  # PFM file
    reference_spp: int = 4096
    metrics: bool = True
    warmup: int = 0
    output_dir: Optional[str] = None
    write_images: bool = True

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.volume_dims = tuple(int(v) for v in self.volume_dims)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.spp < 1 or self.reference_spp < 1:
            raise ValueError("spp must be >= 1")
        if self.camera_script not in ("scene", "static", "orbit"):
            raise ValueError("camera_script must be scene, static or orbit")

    def policy(self) -> PolicyConfig:
        return PolicyConfig(
            C=self.C,
            activation_threshold=self.activation_threshold,
            epsilon=self.epsilon,
            max_cache_length=self.K + 1,
            beta_convention=self.beta_convention,
            beta_division=self.beta_division,
            natural_substitution=self.natural_substitution,
        )

    def cache_config(self) -> CacheConfig:
        return CacheConfig(N=self.N, K=self.K, seed=self.cache_seed)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        d["volume_dims"] = list(self.volume_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        d = json.load(f)
    cfg = ExperimentConfig.from_dict(d)
    base = os.path.dirname(os.path.abspath(path))
    for key in ("scene", "reference", "cache_dir", "output_dir"):
        val = getattr(cfg, key)
        if val is not None and not os.path.isabs(val):
            setattr(cfg, key, os.path.join(base, val))
    return cfg


@dataclass
class MetricsRow:
    frame: int
    mode: str
    C: float
    spp: int
    psnr: float
    rmse: float
    mean_luminance: float
    pt_ms: float
    st_ms: float
    ot_ms: float
    mean_terminal_depth: float
    cache_hit_fraction: float

    FIELDS = (
        "frame", "mode", "C", "spp", "psnr", "rmse", "mean_luminance",
        "pt_ms", "st_ms", "ot_ms", "mean_terminal_depth", "cache_hit_fraction",
    )

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def build_scene(config: ExperimentConfig):
    """``(scene, camera_path)`` for a config."""
    if config.scene is not None:
        scene, path = load_scene(config.scene, config.resolution)
    else:
        d = json.loads(json.dumps(DEFAULT_SCENE))
        d["volume"]["dims"] = list(config.volume_dims)
        d["transfer_function"] = default_transfer_function(config.density).to_dict()
        scene, path = scene_from_dict(d, resolution=config.resolution)
    if config.camera_script == "static":
        path = CameraPath([0], [scene.camera])
    elif config.camera_script == "orbit":
        center = scene.field.center
        offset = scene.camera.position - center
        radius = float(np.hypot(offset[0], offset[2]))
        path = orbit_path(center, radius, float(offset[1]), config.frames, config.orbit_degrees, scene.camera)
    return scene, path


def render_reference(config: ExperimentConfig, frame: int = 0) -> np.ndarray:
    scene, path = build_scene(config)
    scene = scene.with_camera(path.camera_at(frame))
    fb, _ = render_frame(scene, config.reference_spp, seed=config.seed + 7919, frame=frame)
    return fb.mean()


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=MetricsRow.FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())


def read_csv(path) -> list:
    rows = []
    with open(path, newline="") as f:
        for d in csv.DictReader(f):
            rows.append(
                MetricsRow(
                    int(d["frame"]), d["mode"], float(d["C"]), int(d["spp"]),
                    *(float(d[k]) for k in MetricsRow.FIELDS[4:]),
                )
            )
    return rows


def _finite(v: float) -> float:
    return float(v) if np.isfinite(v) else float("nan")


def run_experiment(config: ExperimentConfig, reference=None, hierarchy=None):
    """Run ``config.frames`` frames; returns ``(rows, final_image, hierarchy)``.

    ``reference`` may be an array (one image for every frame) or ``None``, in
    which case ``config.reference`` is loaded. Metric modes without a
    reference raise ``FileNotFoundError``.
    """
    out = config.output_dir
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.json"), "w") as f:
            json.dump(config.to_dict(), f, indent=2)

    if config.mode == "reference":
        img = render_reference(config)
        if out is not None:
            write_pfm(os.path.join(out, "reference.pfm"), img)
            write_png(os.path.join(out, "reference.png"), img)
        row = MetricsRow(0, "reference", config.C, config.reference_spp, 99.0, 0.0, mean_luminance(img), 0.0, 0.0, 0.0, 0.0, 0.0)
        if out is not None:
            write_csv(os.path.join(out, "metrics.csv"), [row])
        return [row], img, None

    if config.metrics and reference is None:
        if config.reference is None or not os.path.exists(config.reference):
            raise FileNotFoundError("metrics requested but no reference image is available (run the reference mode first)")
        reference = read_pfm(config.reference)
    if reference is not None:
        reference = np.asarray(reference, dtype=np.float64)

    scene, path = build_scene(config)
    cached = config.mode == "nee+cache"
    policy = config.policy() if cached else None
    if cached and hierarchy is None:
        if config.cache_dir is not None:
            hierarchy = load_hierarchy(config.cache_dir)
        else:
            hierarchy = initialize_cache(scene.field, scene.tf, config.cache_config())
    schedule = opt = None
    trainer = TrainerConfig(enabled=config.train, cadence=config.cadence, detach_denominator=config.detach_denominator)
    if cached:
        schedule = ScheduleState(eta0=dict(config.learning_rates), scene_diagonal=hierarchy.scene_diagonal)
        opt = OptimizerState.for_hierarchy(hierarchy, weight_decay=config.weight_decay)

    rows = []
    img = None
    for f in range(config.frames):
        camera = path.camera_at(f)
        sc = scene.with_camera(camera)
        st_ms = ot_ms = 0.0
        imgs = None
        if cached:
            imgs = splat_all_levels(hierarchy, camera, frame=f)
            st_ms = float(sum(imgs.splat_ms))
        t0 = time.perf_counter()
        fb, buffers = render_frame(sc, config.spp, policy, imgs, frame=f, seed=config.seed, mode="uniform" if config.mode == "uniform" else "nee")
        pt_ms = (time.perf_counter() - t0) * 1e3
        if cached:
            stats = train_step(hierarchy, buffers, camera, schedule, opt, trainer, frame=f)
            ot_ms = stats.ot_ms
        img = fb.mean()
        if reference is not None:
            p, e = psnr(img, reference), rmse(img, reference)
        else:
            p = e = float("nan")
        hits = fb.stats["early_cache_hit"] / max(fb.stats["paths"], 1)
        rows.append(
            MetricsRow(f, config.mode, config.C, config.spp, _finite(p), _finite(e), mean_luminance(img),
                       pt_ms, st_ms, ot_ms, fb.stats["mean_terminal_depth"], hits)
        )
        if out is not None and config.write_images:
            write_pfm(os.path.join(out, f"frame_{f:04d}.pfm"), img)
            write_png(os.path.join(out, f"frame_{f:04d}.png"), img)
    if out is not None:
        write_csv(os.path.join(out, "metrics.csv"), rows)
    return rows, img, hierarchy


# --------------------------------------------------------------------------
# sweeps and reports


def sweep_c(config: ExperimentConfig, values=(0.0, 0.25, 0.5, 0.75, 1.0), reference=None) -> list:
    rows = []
    for C in values:
        sub = None if config.output_dir is None else os.path.join(config.output_dir, f"C_{C:g}")
        r, _, _ = run_experiment(config.replace(C=float(C), mode="nee+cache", output_dir=sub), reference)
        rows.extend(r)
    return rows


def sweep_spp(config: ExperimentConfig, values=(1, 4, 16), reference=None) -> list:
    rows = []
    for spp in values:
        sub = None if config.output_dir is None else os.path.join(config.output_dir, f"spp_{spp}")
        r, _, _ = run_experiment(config.replace(spp=int(spp), output_dir=sub), reference)
        rows.extend(r)
    return rows


ABLATIONS = {
    "full": {},
    "no_beta_division": {"beta_division": False},
    "no_natural_substitution": {"natural_substitution": False},
    "no_weight_decay": {"weight_decay": 0.0},
    "no_training": {"train": False},
}


def ablate(config: ExperimentConfig, reference=None, variants=None) -> dict:
    out = {}
    for name in variants or ABLATIONS:
        sub = None if config.output_dir is None else os.path.join(config.output_dir, name)
        rows, _, _ = run_experiment(config.replace(mode="nee+cache", output_dir=sub, **ABLATIONS[name]), reference)
        out[name] = rows
    return out


_NUMERIC = ("psnr", "rmse", "mean_luminance", "pt_ms", "st_ms", "ot_ms", "mean_terminal_depth", "cache_hit_fraction")


def _mean_row(rows) -> dict:
    d = {k: float(np.mean([getattr(r, k) for r in rows])) for k in _NUMERIC}
    d["frames"] = len(rows)
    return d


def _after_warmup(rows, warmup: int):
    kept = [r for r in rows if r.frame >= warmup]
    return kept if kept else list(rows)


def summarize(csv_paths, warmup: int = 0) -> dict:
    """Aggregate metric CSVs into per-mode, per-C and per-SPP tables."""
    if isinstance(csv_paths, (str, os.PathLike)):
        csv_paths = [csv_paths]
    if not csv_paths:
        raise ValueError("summarize needs at least one CSV")
    rows = []
    for p in csv_paths:
        rows.extend(read_csv(p))
    rows = _after_warmup(rows, warmup)

    def group(key):
        groups = {}
        for r in rows:
            groups.setdefault(key(r), []).append(r)
        return {k: _mean_row(v) for k, v in sorted(groups.items(), key=lambda kv: str(kv[0]))}

    by_mode = group(lambda r: r.mode)
    cached = [r for r in rows if r.mode == "nee+cache"]
    by_c = {}
    for r in cached:
        by_c.setdefault(r.C, []).append(r)
    c_table = {c: _mean_row(v) for c, v in sorted(by_c.items())}
    by_spp = {}
    for r in rows:
        by_spp.setdefault((r.mode, r.spp), []).append(r)
    spp_table = {k: _mean_row(v) for k, v in sorted(by_spp.items())}
    st = [v["st_ms"] for (m, _), v in spp_table.items() if m == "nee+cache"]
    st_variation = (max(st) - min(st)) / np.mean(st) if len(st) > 1 and np.mean(st) > 0 else 0.0
    best, reports = select_convention()
    toy = {conv: float(sum(r.rmse for r in reports if r.convention == conv)) for conv in sorted({r.convention for r in reports})}
    return {
        "by_mode": by_mode,
        "c_sweep": c_table,
        "spp_sweep": spp_table,
        "st_variation": float(st_variation),
        "warmup": warmup,
        "beta_convention": {"selected": best, "default": DEFAULT_CONVENTION, "toy_rmse": toy},
    }


def format_report(summary: dict) -> str:
    lines = [f"warm-up frames excluded: {summary['warmup']}", "", "per mode:"]
    hdr = f"  {'group':<18}{'frames':>7}{'PSNR':>9}{'rMSE':>11}{'lum':>9}{'PT ms':>9}{'ST ms':>9}{'OT ms':>9}{'depth':>7}{'hits':>7}"
    fmt = "  {:<18}{:>7d}{:>9.2f}{:>11.4g}{:>9.4f}{:>9.1f}{:>9.1f}{:>9.1f}{:>7.2f}{:>7.3f}"

    def line(name, v):
        return fmt.format(str(name), v["frames"], v["psnr"], v["rmse"], v["mean_luminance"], v["pt_ms"], v["st_ms"], v["ot_ms"], v["mean_terminal_depth"], v["cache_hit_fraction"])

    lines.append(hdr)
    lines += [line(k, v) for k, v in summary["by_mode"].items()]
    if summary["c_sweep"]:
        lines += ["", "C sweep (cached mode):", hdr]
        lines += [line(f"C={c:g}", v) for c, v in summary["c_sweep"].items()]
    if summary["spp_sweep"]:
        lines += ["", "SPP sweep:", hdr]
        lines += [line(f"{m} spp={s}", v) for (m, s), v in summary["spp_sweep"].items()]
        lines.append(f"  splat-stage variation across SPP: {100 * summary['st_variation']:.1f}%")
    conv = summary.get("beta_convention")
    if conv:
        scores = ", ".join(f"{k} {v:.3e}" for k, v in conv["toy_rmse"].items())
        lines += ["", f"beta convention: {conv['default']} (toy-medium oracle selects {conv['selected']}; summed rMSE {scores})"]
    return "\n".join(lines) + "\n"


def write_report(summary: dict, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "report.txt"), "w") as f:
        f.write(format_report(summary))
    with open(os.path.join(directory, "report.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["table", "group", "frames", *_NUMERIC])
        for table, key in (("mode", "by_mode"), ("c_sweep", "c_sweep"), ("spp_sweep", "spp_sweep")):
            for g, v in summary[key].items():
                w.writerow([table, g, v["frames"], *(v[k] for k in _NUMERIC)])
