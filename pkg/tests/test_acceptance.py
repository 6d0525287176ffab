"""End-to-end acceptance criteria; each test records one pass/fail line."""

import math
import time

import numpy as np
import pytest
from scipy import optimize

from conftest import slab_scene
from splatcache.cache import CacheHierarchy, LevelImageSet, level_sizes, parameter_bytes
from splatcache.gsplat import PARAM_GROUPS, GaussianLevel, rasterize, rasterize_backward
from splatcache.harness.experiment import ExperimentConfig, render_reference, run_experiment, sweep_c, sweep_spp
from splatcache.harness.metrics import mean_luminance, psnr, rmse
from splatcache.pathtracer import render_frame
from splatcache.policy import PolicyConfig
from splatcache.scene import DEFAULT_SCENE, Camera, SphereLight, scene_from_dict
from splatcache.toymedium import default_toys, evaluate, select_convention
from splatcache.trainer import (
    DEFAULT_LRS,
    OptimizerState,
    PathBufferSet,
    ScheduleState,
    TrainerConfig,
    hdr_loss,
    lr_schedule,
    train_step,
)
from splatcache.volume import TransferFunction

EVAL = ExperimentConfig(resolution=(64, 64), N=8000, K=2, write_images=False, reference_spp=4096, camera_script="static")


@pytest.fixture(scope="module")
def reference():
    return render_reference(EVAL)


# --------------------------------------------------------------------------
# 1. gradient gate


def _random_config(rng):
    n = int(rng.integers(1, 9))
    w, h = int(rng.integers(12, 40)), int(rng.integers(12, 40))
    cam = Camera(position=(0, 0, 4), look_at=(0, 0, 0), vertical_fov=math.radians(rng.uniform(25, 60)), resolution=(w, h))
    level = GaussianLevel(
        rng.uniform(-0.7, 0.7, (n, 3)),
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(0.08, 0.3, (n, 3))),
        rng.normal(-0.5, 0.8, n),
        rng.uniform(0.05, 1.0, (n, 3)),
    )
    return level, cam, rng.normal(size=(h, w, 3))


def _fd_errors(level, cam, gimg, h=1e-6):
    grads = rasterize_backward(level, cam, gimg).as_dict()
    errs = {}
    for group in PARAM_GROUPS:
        arr = getattr(level, group)
        num, ana = [], []
        for idx in np.ndindex(arr.shape):
            plus, minus = level.copy(), level.copy()
            getattr(plus, group)[idx] += h
            getattr(minus, group)[idx] -= h
            fd = (np.sum(rasterize(plus, cam).rgb * gimg) - np.sum(rasterize(minus, cam).rgb * gimg)) / (2 * h)
            num.append(fd)
            ana.append(grads[group][idx])
        num, ana = np.array(num), np.array(ana)
        scale = np.linalg.norm(num)
        errs[group] = np.linalg.norm(ana - num) / scale if scale > 1e-9 else np.linalg.norm(ana)
    return errs


def test_criterion_1_gradient_gate(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {g: 0.0 for g in PARAM_GROUPS}
    for _ in range(30):
        errs = _fd_errors(*_random_config(rng))
        for g, e in errs.items():
            worst[g] = max(worst[g], e)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-3 and elapsed < 60.0
    detail = ", ".join(f"{g} {e:.1e}" for g, e in worst.items())
    assert criterion(1, ok, f"30 configs, worst relative error per group: {detail}; {elapsed:.1f}s"), detail


# --------------------------------------------------------------------------
# 2. unbiased core


def test_criterion_2_unbiased_core(criterion):
    sigma, bg = 1.5, 0.8
    scene = slab_scene(sigma_t=sigma, albedo=0.0, background=(bg, bg, bg), resolution=(250, 400))
    fb, _ = render_frame(scene, 1, seed=1)
    x = fb.accumulation[..., 0].ravel()  # 1e5 samples
    expected = bg * math.exp(-sigma * 1.0)
    p = expected / bg
    bound = 3 * bg * math.sqrt(p * (1 - p) / x.size)
    slab_ok = abs(x.mean() - expected) < bound

    light = SphereLight((0.5, 2.0, 0.5), 0.2, (40.0, 40.0, 40.0))
    lit = slab_scene(sigma_t=1.5, albedo=0.8, background=(0.1, 0.1, 0.1), lights=[light], resolution=(250, 400))
    u = render_frame(lit, 1, mode="uniform", seed=2)[0].accumulation[..., 0].ravel()
    v = render_frame(lit, 1, mode="nee", seed=2)[0].accumulation[..., 0].ravel()
    d = u - v  # paired by sample key
    joint = 3 * d.std(ddof=1) / math.sqrt(d.size)
    pair_ok = abs(d.mean()) < joint
    ok = slab_ok and pair_ok
    assert criterion(
        2, ok,
        f"slab mean {x.mean():.5f} vs analytic {expected:.5f} (3 sigma {bound:.5f}); "
        f"uniform-NEE paired difference {d.mean():.5f} (3 sigma {joint:.5f})",
    )


# --------------------------------------------------------------------------
# 3. cold start at 16 SPP


def test_criterion_3_cold_start(criterion, reference):
    start = time.perf_counter()
    wins, parts = 0, []
    for seed in range(3):
        cfg = EVAL.replace(spp=16, frames=64, seed=seed, cache_seed=seed)
        cached, _, _ = run_experiment(cfg.replace(mode="nee+cache"), reference)
        plain, _, _ = run_experiment(cfg.replace(mode="nee"), reference)
        pc = np.mean([r.psnr for r in cached[-8:]])
        pn = np.mean([r.psnr for r in plain[-8:]])
        wins += pc > pn
        parts.append(f"seed {seed}: {pc:.2f} vs {pn:.2f} dB")
    elapsed = time.perf_counter() - start
    ok = wins >= 2 and elapsed < 600
    assert criterion(3, ok, f"cached vs NEE PSNR over frames 56-63: {'; '.join(parts)}; {wins}/3 wins; {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 4. C sweep


def _non_increasing_with_one_inversion(values):
    return sum(b > a for a, b in zip(values, values[1:])) <= 1


def test_criterion_4_c_sweep(criterion, reference):
    warmup, frames = 40, 64
    cfg = EVAL.replace(spp=1, frames=frames, seed=11, cache_seed=11)
    cs = (0.0, 0.25, 0.5, 0.75, 1.0)
    rows = sweep_c(cfg, cs, reference)
    means = [np.mean([r.psnr for r in rows if r.C == c and r.frame >= warmup]) for c in cs]
    plain, _, _ = run_experiment(cfg.replace(mode="nee"), reference)
    nee = np.mean([r.psnr for r in plain if r.frame >= warmup])
    monotone = _non_increasing_with_one_inversion(means)
    close = abs(means[-1] - nee) <= 0.5
    table = ", ".join(f"C={c:g}: {m:.2f}" for c, m in zip(cs, means))
    assert criterion(4, monotone and close, f"PSNR after {warmup} warm-up frames: {table}; NEE {nee:.2f} dB")


# --------------------------------------------------------------------------
# 5. beta division


def _dark_scene(resolution):
    """Denser, darker variant of the procedural scene: more lotteries per path."""
    d = {k: v for k, v in DEFAULT_SCENE.items()}
    d["volume"] = dict(DEFAULT_SCENE["volume"], dims=[64, 64, 64])
    d["transfer_function"] = TransferFunction.from_points(
        [(0.0, (0.7, 0.7, 0.7), 0.0), (0.25, (0.7, 0.7, 0.7), 0.0), (0.5, (0.7, 0.68, 0.65), 2.8), (1.0, (0.65, 0.68, 0.7), 8.0)]
    ).to_dict()
    scene, _ = scene_from_dict(d, resolution=resolution)
    return scene


def test_criterion_5_beta_division(criterion):
    # toy oracle
    toy_parts, toy_ok = [], True
    for C in (0.25, 0.5, 0.75):
        on = evaluate(default_toys(), C, "store_raw", True)
        off = evaluate(default_toys(), C, "store_raw", False)
        toy_ok &= off.estimate_mean < off.reference_mean and off.rmse > on.rmse
        toy_parts.append(f"C={C}: lum {off.estimate_mean:.4f}<{off.reference_mean:.4f}, rMSE {off.rmse:.2e}>{on.rmse:.2e}")
    best, reports = select_convention()
    scores = {conv: sum(r.rmse for r in reports if r.convention == conv) for conv in ("store_raw", "store_boosted")}
    conv_ok = best == PolicyConfig().beta_convention

    # renderer: converged cache = per-pixel mean of the training records of every level
    # (the fixed point of the trainer), then identical random streams with and without beta division
    res = (32, 32)
    scene = _dark_scene(res)
    reference = render_frame(scene, 4096, seed=99)[0].mean()
    total = np.zeros((3, res[1], res[0], 3))
    count = np.zeros((3, res[1], res[0]))
    for f in range(2000):
        _, bufs = render_frame(scene, 1, frame=f, seed=5, n_record_levels=3)
        total += np.where(bufs.valid[..., None], bufs.samples, 0.0)
        count += bufs.valid
    li = LevelImageSet(total / np.maximum(count, 1)[..., None], np.ones(count.shape), frame=0)
    on = render_frame(scene, 1024, PolicyConfig(C=0.5), li, seed=6)[0].mean()
    off = render_frame(scene, 1024, PolicyConfig(C=0.5, beta_division=False), li, seed=6)[0].mean()
    lum_ref, lum_on, lum_off = mean_luminance(reference), mean_luminance(on), mean_luminance(off)
    e_on, e_off = rmse(on, reference), rmse(off, reference)
    render_ok = lum_off < lum_ref and e_off > e_on
    ok = toy_ok and conv_ok and render_ok
    assert criterion(
        5, ok,
        f"toy [{'; '.join(toy_parts)}]; convention {best} (summed toy rMSE "
        + ", ".join(f"{k} {v:.3e}" for k, v in scores.items())
        + f"); renderer lum off/on/ref {lum_off:.4f}/{lum_on:.4f}/{lum_ref:.4f}, rMSE off {e_off:.3e} vs on {e_on:.3e}",
    )


# --------------------------------------------------------------------------
# 6. splat time independent of SPP


def test_criterion_6_spp_timing(criterion):
    warmup = 4
    cfg = EVAL.replace(frames=16, metrics=False, seed=3)
    rows = sweep_spp(cfg, (1, 4, 16))
    st, pt = [], []
    for spp in (1, 4, 16):
        sel = [r for r in rows if r.spp == spp and r.frame >= warmup]
        st.append(float(np.median([r.st_ms for r in sel])))
        pt.append(float(np.median([r.pt_ms for r in sel])))
    variation = (max(st) - min(st)) / np.mean(st)
    ok = variation < 0.2 and pt[0] < pt[1] < pt[2]
    assert criterion(
        6, ok,
        "median ST ms " + "/".join(f"{v:.1f}" for v in st) + f" (variation {100 * variation:.1f}%), median PT ms "
        + "/".join(f"{v:.1f}" for v in pt),
    )


# --------------------------------------------------------------------------
# 7. structural values


def test_criterion_7_structural(criterion):
    checks = {
        "level sizes": level_sizes(300_000, 2) == [300_000, 150_000, 75_000],
        "footprint": parameter_bytes(300_000, 2) == 525_000 * 14 * 4 and round(parameter_bytes(300_000, 2) / 2**20) == 28,
        "eta(1)": all(lr_schedule(v, 1) == v for v in DEFAULT_LRS.values()),
        "eta(e)": all(abs(lr_schedule(v, math.e) - v / 2) <= 1e-12 for v in DEFAULT_LRS.values()),
        "loss 10000": abs(hdr_loss(np.zeros((1, 1, 1)), np.ones((1, 1, 1)))[0] - 1e4) <= 1e-12 * 1e4,
        "loss 1/1.01^2": abs(hdr_loss(np.ones((1, 1, 1)), np.full((1, 1, 1), 2.0))[0] - 1 / 1.01**2) <= 1e-12,
    }
    failed = [k for k, v in checks.items() if not v]
    mb = parameter_bytes(300_000, 2) / 2**20
    assert criterion(7, not failed, f"{len(checks) - len(failed)}/{len(checks)} exact checks, footprint {mb:.2f} MiB" + (f"; failed {failed}" if failed else ""))


# --------------------------------------------------------------------------
# 8. weight decay stability

REG_RES = (24, 24)
REG_SCALE_LR = 0.5
REG_FIREFLY_RATE = 0.05


def _regularization_run(weight_decay, steps=2000, seed=0):
    """Max splat scale (in scene diagonals) reached while fitting heavy-tailed targets."""
    rng = np.random.default_rng(seed)
    cam = Camera(position=(0, 0, 4), look_at=(0, 0, 0), vertical_fov=math.radians(40), resolution=REG_RES)
    xs = np.linspace(-0.8, 0.8, 6)
    pos = np.stack(np.meshgrid(xs, xs, [0.0], indexing="ij"), -1).reshape(-1, 3)
    h = CacheHierarchy([GaussianLevel.isotropic(pos, np.full(36, 0.12), np.full((36, 3), 0.2), 0.1)], scene_diagonal=2 * math.sqrt(3))
    rates = dict(DEFAULT_LRS, log_scales=REG_SCALE_LR)
    sched = ScheduleState(eta0=rates, scene_diagonal=h.scene_diagonal)
    opt = OptimizerState.for_hierarchy(h, weight_decay=weight_decay)
    peak = 0.0
    w, hh = REG_RES
    for s in range(steps):
        fire = rng.random((hh, w, 1)) < REG_FIREFLY_RATE
        target = np.where(fire, 20.0 * rng.pareto(1.5, (hh, w, 1)), 0.05) * np.ones(3)
        train_step(h, PathBufferSet(target[None], np.ones((1, hh, w), bool), frame=s), cam, sched, opt, frame=s)
        peak = max(peak, float(h.levels[0].scales.max()) / h.scene_diagonal)
    return peak


def test_criterion_8_weight_decay_stability(criterion):
    free = _regularization_run(0.0)
    decayed = _regularization_run(1e-2)
    ok = free > 10.0 and decayed <= 10.0
    assert criterion(8, ok, f"peak max-scale / scene diagonal over 2000 steps: lambda=0 {free:.1f}, lambda=1e-2 {decayed:.1f} (threshold 10)")


# --------------------------------------------------------------------------
# 9. noise2noise


def _hdr_fixed_point(targets, detach):
    """Prediction that zeroes the summed HDR-loss gradient over ``targets``."""
    def g(y):
        return float(hdr_loss(np.full((targets.size, 1), y), targets[:, None], detach_denominator=detach)[1].sum())

    return optimize.brentq(g, 1e-6, targets.max())


def _fit_single_splat(targets, detach, steps=24000, seed=0):
    """Train one splat color on draws (with replacement) from ``targets``."""
    rng = np.random.default_rng(seed)
    cam = Camera(position=(0, 0, 4), look_at=(0, 0, 0), vertical_fov=math.radians(20), resolution=(1, 1))
    level = GaussianLevel.isotropic([[0.0, 0.0, 0.0]], [5.0], [[0.3, 0.3, 0.3]], opacity=0.5)
    h = CacheHierarchy([level], scene_diagonal=1.0)
    rates = {g: 0.0 for g in PARAM_GROUPS}
    rates["colors"] = DEFAULT_LRS["colors"]
    sched = ScheduleState(eta0=rates)
    opt = OptimizerState.for_hierarchy(h, weight_decay=0.0)
    cfg = TrainerConfig(detach_denominator=detach)
    for i in range(steps):
        t = targets[rng.integers(targets.size)]
        buf = PathBufferSet(np.full((1, 1, 1, 3), t), np.ones((1, 1, 1), bool), frame=i)
        train_step(h, buf, cam, sched, opt, cfg, frame=i)
    return float(rasterize(h.levels[0], cam).rgb[0, 0, 0])


def test_criterion_9_noise2noise(criterion):
    rng = np.random.default_rng(9)
    targets = 0.5 * rng.gamma(2.0, 1.0, 500)  # mean 1.0, heavy right tail
    se = targets.std(ddof=1) / math.sqrt(targets.size)
    parts, scalar_ok = [], True
    for detach in (True, False):
        y = _fit_single_splat(targets, detach)
        star = _hdr_fixed_point(targets, detach)
        scalar_ok &= abs(y - star) < 2 * se
        parts.append(f"{'detached' if detach else 'full'} gradient: fit {y:.4f} vs weighted mean {star:.4f}")

    cam = Camera(position=(0, 0, 4), look_at=(0, 0, 0), vertical_fov=math.radians(40), resolution=(24, 24))
    xs = np.linspace(-0.8, 0.8, 6)
    pos = np.stack(np.meshgrid(xs, xs, [0.0], indexing="ij"), -1).reshape(-1, 3)
    truth = GaussianLevel.isotropic(pos, np.full(36, 0.12), np.outer(np.linspace(0.3, 1.0, 36), [1.0, 0.8, 0.6]), 0.8)
    clean = rasterize(truth, cam).rgb
    noisy = [clean * rng.exponential(1.0, clean.shape) for _ in range(500)]
    mean_image = np.mean(noisy, axis=0)
    h = CacheHierarchy([GaussianLevel.isotropic(pos, np.full(36, 0.12), np.full((36, 3), 0.2), 0.5)], scene_diagonal=2.0)
    sched, opt = ScheduleState(scene_diagonal=2.0), OptimizerState.for_hierarchy(h)
    for i, t in enumerate(noisy):
        train_step(h, PathBufferSet(t[None], np.ones((1, 24, 24), bool), frame=i), cam, sched, opt, frame=i)
    p_fit = psnr(rasterize(h.levels[0], cam).rgb, mean_image)
    p_single = max(psnr(t, mean_image) for t in noisy)
    ok = scalar_ok and p_fit > p_single
    assert criterion(9, ok, f"{'; '.join(parts)} (2 SE = {2 * se:.4f}); image PSNR {p_fit:.2f} dB vs best single target {p_single:.2f} dB")
