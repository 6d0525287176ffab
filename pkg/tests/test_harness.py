import json
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from splatcache.harness.cli import main
from splatcache.harness.experiment import (
    ExperimentConfig,
    MetricsRow,
    load_config,
    read_csv,
    run_experiment,
    summarize,
    sweep_c,
    write_csv,
    write_report,
)
from splatcache.harness.io import read_pfm, tonemap, write_pfm
from splatcache.harness.metrics import mean_luminance, psnr, rmse

TINY = dict(resolution=(8, 8), volume_dims=(16, 16, 16), N=200, K=1, reference_spp=16, write_images=False)
TIMINGS = ("pt_ms", "st_ms", "ot_ms")


def _row(frame=0, mode="nee+cache", C=0.5, spp=1, psnr_=20.0, st_ms=1.0):
    return MetricsRow(frame, mode, C, spp, psnr_, 0.1, 0.2, 3.0, st_ms, 4.0, 2.5, 0.1)


class TestMetrics:
    def test_psnr_examples(self):
        ref = np.ones((4, 4, 3))
        assert psnr(ref, ref) == 99.0
        assert psnr(np.full((4, 4, 3), 0.9), ref) == pytest.approx(20.0)

    def test_psnr_channel_permutation(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((5, 5, 3)), rng.random((5, 5, 3))
        perm = [2, 0, 1]
        assert psnr(a[..., perm], b[..., perm]) == pytest.approx(psnr(a, b))

    def test_rmse_examples(self):
        assert rmse(np.ones((1, 1, 1)), np.zeros((1, 1, 1))) == pytest.approx(100.0)
        img = np.random.default_rng(1).random((3, 3, 3))
        assert rmse(img, img) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_mean_luminance(self):
        assert mean_luminance(np.ones((2, 2, 3))) == pytest.approx(1.0)


class TestImageIO:
    @given(arrays(np.float32, (3, 5, 3), elements=st.floats(-1e6, 1e6, width=32)))
    def test_pfm_round_trip_bit_exact(self, img):
        import tempfile

        with tempfile.TemporaryDirectory() as d:
            write_pfm(os.path.join(d, "a.pfm"), img)
            back = read_pfm(os.path.join(d, "a.pfm"))
        np.testing.assert_array_equal(back, img)

    def test_pfm_grayscale_and_orientation(self, tmp_path):
        img = np.arange(6, dtype=np.float32).reshape(2, 3)
        write_pfm(tmp_path / "g.pfm", img)
        raw = (tmp_path / "g.pfm").read_bytes()
        assert raw.startswith(b"Pf\n3 2\n-1")
        # rows are stored bottom-to-top
        body = np.frombuffer(raw[-24:], dtype="<f4")
        np.testing.assert_array_equal(body, [3, 4, 5, 0, 1, 2])
        np.testing.assert_array_equal(read_pfm(tmp_path / "g.pfm"), img)

    @given(st.floats(0, 1e4), st.floats(0, 1e4))
    def test_tonemap_monotone(self, a, b):
        lo, hi = sorted((a, b))
        t = tonemap(np.array([[[lo, lo, lo]], [[hi, hi, hi]]]))
        assert np.all(t[0] <= t[1])
        assert np.all((t >= 0) & (t <= 1))


class TestSummarize:
    def test_single_row(self, tmp_path):
        row = _row()
        write_csv(tmp_path / "m.csv", [row])
        s = summarize(tmp_path / "m.csv")
        got = s["by_mode"]["nee+cache"]
        for k in ("psnr", "rmse", "mean_luminance", "pt_ms", "st_ms", "ot_ms", "mean_terminal_depth", "cache_hit_fraction"):
            assert got[k] == pytest.approx(getattr(row, k))

    def test_warmup_excluded(self, tmp_path):
        rows = [_row(frame=f, psnr_=0.0 if f < 3 else 30.0) for f in range(6)]
        write_csv(tmp_path / "m.csv", rows)
        assert summarize(tmp_path / "m.csv", warmup=3)["by_mode"]["nee+cache"]["psnr"] == pytest.approx(30.0)

    def test_c_and_spp_tables(self, tmp_path):
        rows = [_row(C=c, st_ms=10.0) for c in (0.0, 0.25, 0.5, 0.75, 1.0)]
        rows += [_row(spp=s, st_ms=st) for s, st in ((1, 10.0), (4, 11.0), (16, 12.0))]
        write_csv(tmp_path / "m.csv", rows)
        s = summarize([tmp_path / "m.csv"])
        assert len(s["c_sweep"]) == 5
        assert s["st_variation"] == pytest.approx(2.0 / 11.0, rel=0.2)
        write_report(s, tmp_path / "rep")
        text = (tmp_path / "rep" / "report.txt").read_text()
        assert "C=0.25" in text and "beta convention: store_raw" in text

    def test_csv_round_trip(self, tmp_path):
        rows = [_row(frame=i) for i in range(3)]
        write_csv(tmp_path / "m.csv", rows)
        assert read_csv(tmp_path / "m.csv") == rows


class TestExperiment:
    def test_missing_reference(self):
        cfg = ExperimentConfig(**TINY, reference="/nonexistent/ref.pfm")
        with pytest.raises(FileNotFoundError):
            run_experiment(cfg)

    def test_rows_and_images(self, tmp_path):
        ref_rows, ref, _ = run_experiment(ExperimentConfig(**TINY, mode="reference", output_dir=str(tmp_path / "ref")))
        assert os.path.exists(tmp_path / "ref" / "reference.pfm")
        cfg = ExperimentConfig(**{**TINY, "write_images": True}, frames=3, output_dir=str(tmp_path / "run"), reference=str(tmp_path / "ref" / "reference.pfm"))
        rows, img, h = run_experiment(cfg)
        assert len(rows) == 3 and img.shape == (8, 8, 3)
        names = sorted(os.listdir(tmp_path / "run"))
        assert sum(n.endswith(".pfm") for n in names) == 3 and sum(n.endswith(".png") for n in names) == 3
        for r in rows:
            assert all(np.isfinite(getattr(r, k)) for k in MetricsRow.FIELDS[2:])
            assert all(getattr(r, k) >= 0 for k in TIMINGS)

    def test_deterministic_metrics(self):
        ref = np.full((8, 8, 3), 0.05)
        cfg = ExperimentConfig(**TINY, frames=3, camera_script="orbit")
        a, _, _ = run_experiment(cfg, ref)
        b, _, _ = run_experiment(cfg, ref)
        for ra, rb in zip(a, b):
            for k in MetricsRow.FIELDS:
                if k not in TIMINGS:
                    assert getattr(ra, k) == getattr(rb, k)

    def test_c_sweep_rows(self):
        rows = sweep_c(ExperimentConfig(**TINY), reference=np.full((8, 8, 3), 0.05))
        assert [r.C for r in rows] == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_config_validation(self, tmp_path):
        with pytest.raises(ValueError):
            ExperimentConfig(mode="bogus")
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"not_a_key": 1})
        (tmp_path / "c.json").write_text(json.dumps({"reference": "r.pfm", "frames": 2}))
        cfg = load_config(tmp_path / "c.json")
        assert cfg.reference == str(tmp_path / "r.pfm") and cfg.frames == 2


class TestCli:
    def test_reference_then_metrics(self, tmp_path, capsys):
        sets = ["--set", "resolution=[8,8]", "--set", "volume_dims=[16,16,16]", "--set", "reference_spp=8", "--set", "N=100", "--set", "K=1"]
        assert main(["reference", *sets, "--out", str(tmp_path / "ref")]) == 0
        ref = str(tmp_path / "ref" / "reference.pfm")
        assert main(["render", *sets, "--set", f'reference="{ref}"', "--set", "frames=2", "--out", str(tmp_path / "r")]) == 0
        assert main(["summarize", str(tmp_path / "r" / "metrics.csv"), "--out", str(tmp_path / "s")]) == 0
        assert os.path.exists(tmp_path / "s" / "report.txt")

    def test_error_exit_code(self, tmp_path, capsys):
        assert main(["render", "--set", "reference=\"/missing.pfm\"", "--set", "resolution=[4,4]"]) != 0
        assert "error" in capsys.readouterr().err
