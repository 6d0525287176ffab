"""Command line entry point (``splatcache``)."""

from __future__ import annotations

import argparse
import json
import os
import sys

from ..cache import initialize_cache, save_hierarchy
from .experiment import (
    ABLATIONS,
    ExperimentConfig,
    ablate,
    build_scene,
    format_report,
    load_config,
    run_experiment,
    summarize,
    sweep_c,
    sweep_spp,
    write_csv,
    write_report,
)
from .io import read_pfm
from .metrics import mean_luminance, psnr, rmse


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        changes[k] = _parse_value(v)
    if args.out is not None:
        changes["output_dir"] = args.out
    if changes:
        d = cfg.to_dict()
        d.update(changes)
        cfg = ExperimentConfig.from_dict(d)
    return cfg


def _values(text: str, cast):
    return [cast(v) for v in text.split(",") if v.strip()]


def cmd_init_cache(args) -> int:
    cfg = _config(args)
    scene, _ = build_scene(cfg)
    h = initialize_cache(scene.field, scene.tf, cfg.cache_config())
    target = args.cache_out or os.path.join(cfg.output_dir or ".", "cache")
    save_hierarchy(h, target)
    print(f"initialized levels {h.sizes()} in {h.init_ms:.1f} ms -> {target}")
    return 0


def cmd_render(args) -> int:
    cfg = _config(args)
    if cfg.mode == "reference":
        cfg = cfg.replace(mode="nee+cache")
    rows, _, _ = run_experiment(cfg)
    last = rows[-1]
    print(f"{len(rows)} frames, last PSNR {last.psnr:.2f} dB, rMSE {last.rmse:.4g}")
    return 0


def cmd_reference(args) -> int:
    cfg = _config(args).replace(mode="reference", metrics=False)
    _, img, _ = run_experiment(cfg)
    print(f"reference {img.shape[1]}x{img.shape[0]} at {cfg.reference_spp} spp, mean luminance {mean_luminance(img):.5f}")
    return 0


def cmd_sweep_c(args) -> int:
    cfg = _config(args)
    rows = sweep_c(cfg, _values(args.values, float))
    _finish(cfg, rows, args)
    return 0


def cmd_sweep_spp(args) -> int:
    cfg = _config(args)
    rows = sweep_spp(cfg, _values(args.values, int))
    _finish(cfg, rows, args)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = _values(args.variants, str) if args.variants else None
    results = ablate(cfg, variants=variants)
    for name, rows in results.items():
        kept = [r for r in rows if r.frame >= cfg.warmup] or rows
        p = sum(r.psnr for r in kept) / len(kept)
        print(f"{name:<26} PSNR {p:7.2f} dB")
    return 0


def _finish(cfg, rows, args) -> None:
    if cfg.output_dir is not None:
        path = os.path.join(cfg.output_dir, "metrics.csv")
        write_csv(path, rows)
        summary = summarize([path], cfg.warmup)
        write_report(summary, cfg.output_dir)
        print(format_report(summary), end="")


def cmd_metrics(args) -> int:
    img = read_pfm(args.image)
    ref = read_pfm(args.reference)
    print(f"PSNR {psnr(img, ref):.3f} dB  rMSE {rmse(img, ref):.6g}  mean luminance {mean_luminance(img):.6f} (reference {mean_luminance(ref):.6f})")
    return 0


def cmd_summarize(args) -> int:
    summary = summarize(args.csv, args.warmup)
    if args.out:
        write_report(summary, args.out)
    print(format_report(summary), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatcache", description="Path-space splat radiance cache for volume path tracing")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (JSON value)")
        sp.add_argument("--out", help="output directory")
        return sp

    sp = with_config(sub.add_parser("init-cache", help="initialize and save a cache hierarchy"))
    sp.add_argument("--cache-out", help="directory for the hierarchy (default <out>/cache)")
    sp.set_defaults(func=cmd_init_cache)
    with_config(sub.add_parser("render", help="run a (cached) rendering experiment")).set_defaults(func=cmd_render)
    with_config(sub.add_parser("reference", help="render the converged reference image")).set_defaults(func=cmd_reference)
    sp = with_config(sub.add_parser("sweep-c", help="sweep the sampling coefficient C"))
    sp.add_argument("--values", default="0,0.25,0.5,0.75,1.0")
    sp.set_defaults(func=cmd_sweep_c)
    sp = with_config(sub.add_parser("sweep-spp", help="sweep samples per pixel"))
    sp.add_argument("--values", default="1,4,16")
    sp.set_defaults(func=cmd_sweep_spp)
    sp = with_config(sub.add_parser("ablate", help="run ablation variants: " + ", ".join(ABLATIONS)))
    sp.add_argument("--variants", help="comma-separated subset")
    sp.set_defaults(func=cmd_ablate)
    sp = sub.add_parser("metrics", help="PSNR / rMSE of an image against a reference")
    sp.add_argument("image")
    sp.add_argument("reference")
    sp.set_defaults(func=cmd_metrics)
    sp = sub.add_parser("summarize", help="aggregate metrics CSVs into a report")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--warmup", type=int, default=0)
    sp.add_argument("--out", help="directory for report.txt / report.csv")
    sp.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except Exception as exc:  # report and exit nonzero on any error
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
