"""Metric oracles, evaluation harness and report rendering."""

import math

import numpy as np
import pytest

from xmsynth.data import normalize
from xmsynth.errors import DataError, DimensionError, ValidationError
from xmsynth.metrics import (
    MARKDOWN_HEADER,
    MetricsReport,
    SSIMParams,
    denormalize,
    evaluate,
    metric_mse,
    metric_psnr,
    metric_ssim,
    parse_reports,
    psnr_from_mse,
    read_reports,
    render_report,
)
from xmsynth.models import build_bundle

from oracles import gaussian_window, naive_ssim

TABLE_ROWS = [
    ("Pix2Pix GAN", 0.005846, 29.55, 0.8655),
    ("CycleGAN", 0.006941, 32.28, 0.9008),
    ("VAE", 0.006949, 24.95, 0.67),
]


class TestDenormalize:
    @pytest.mark.parametrize("value,expected", [(-1.0, 0.0), (1.0, 1.0), (0.0, 0.5), (3.0, 1.0), (-7.0, 0.0)])
    def test_points(self, value, expected):
        assert denormalize(value) == expected

    def test_inverse_of_normalize(self, rng):
        v = rng.uniform(size=(32, 32))
        assert np.max(np.abs(denormalize(normalize(v)) - v)) <= 1e-15


class TestMSE:
    def test_examples(self):
        assert metric_mse(np.ones((4, 4)), np.ones((4, 4))) == 0.0
        assert metric_mse(np.ones((4, 4)), np.zeros((4, 4))) == 1.0

    def test_direct_summation_oracle(self, rng):
        a, b = rng.uniform(size=(3, 8, 8)), rng.uniform(size=(3, 8, 8))
        total = 0.0
        for idx in np.ndindex(a.shape):
            total += (a[idx] - b[idx]) ** 2
        assert metric_mse(a, b) == pytest.approx(total / a.size, rel=1e-12)

    def test_symmetric(self, rng):
        a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
        assert metric_mse(a, b) == metric_mse(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            metric_mse(np.zeros((4, 4)), np.zeros((4, 5)))


class TestPSNR:
    def test_twenty_decibels(self):
        assert abs(psnr_from_mse(0.01) - 20.0) < 1e-9

    def test_identical_images_hit_cap(self):
        assert metric_psnr(np.full((4, 4), 0.3), np.full((4, 4), 0.3)) == pytest.approx(100.0)

    def test_table_mse_through_formula(self):
        # pooled PSNR of the fixture MSE is 22.33 dB, not the 29.55 dB its row carries
        assert round(psnr_from_mse(0.005846), 2) == 22.33
        assert psnr_from_mse(0.005846) == pytest.approx(-10 * math.log10(0.005846), rel=1e-12)

    def test_strictly_decreasing_in_noise(self, rng):
        a = rng.uniform(size=(32, 32))
        noise = rng.standard_normal((32, 32))
        values = [metric_psnr(a, a + s * noise) for s in np.linspace(0.01, 0.5, 12)]
        assert np.all(np.diff(values) < 0)


class TestSSIM:
    def test_params(self):
        p = SSIMParams()
        assert p.kernel_2d().sum() == pytest.approx(1.0, abs=1e-15)
        assert (p.c1, p.c2) == pytest.approx((1e-4, 9e-4))
        np.testing.assert_allclose(p.kernel_2d(), gaussian_window(), atol=1e-15)

    def test_matches_naive_oracle(self):
        r = np.random.default_rng(42)
        for _ in range(20):
            a = r.uniform(size=(64, 64))
            b = np.clip(a + r.normal(0, 0.2, size=(64, 64)), 0, 1)
            assert abs(metric_ssim(a, b) - naive_ssim(a, b)) < 1e-6

    def test_self_similarity_is_one(self, rng):
        a = rng.uniform(size=(64, 64))
        assert abs(metric_ssim(a, a) - 1.0) < 1e-12
        assert metric_ssim(a, a + 0) == 1.0

    def test_symmetric(self, rng):
        a, b = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))
        assert abs(metric_ssim(a, b) - metric_ssim(b, a)) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_independent_noise_near_zero(self, seed):
        r = np.random.default_rng(seed)
        assert abs(metric_ssim(r.uniform(size=(64, 64)), r.uniform(size=(64, 64)))) < 0.1

    def test_bounded(self, rng):
        for _ in range(10):
            v = metric_ssim(rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16)))
            assert -1.0 <= v <= 1.0

    def test_multichannel_averaged_first(self, rng):
        a, b = rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))
        assert metric_ssim(a, b) == metric_ssim(a.mean(axis=0), b.mean(axis=0))

    def test_smaller_than_window(self):
        with pytest.raises(DimensionError):
            metric_ssim(np.zeros((8, 8)), np.zeros((8, 8)))


@pytest.fixture
def pairs(rng):
    src = rng.uniform(-1, 1, size=(6, 1, 16, 16)).astype(np.float32)
    tgt = rng.uniform(-1, 1, size=(6, 1, 16, 16)).astype(np.float32)
    return src, tgt


class TestEvaluate:
    def test_identity_oracle(self, pairs):
        src, tgt = pairs
        lookup = {s.tobytes(): t for s, t in zip(src, tgt)}
        report = evaluate(lambda x: np.stack([lookup[s.tobytes()] for s in x]), src, tgt, name="oracle", batch_size=4)
        assert (report.mse, report.psnr_db) == (0.0, pytest.approx(100.0))
        assert report.ssim == pytest.approx(1.0, abs=1e-12)

    def test_constant_half_output(self, pairs):
        src, tgt = pairs
        report = evaluate(lambda x: np.zeros_like(x), src, tgt)
        t01 = tgt.astype(np.float64) * 0.5 + 0.5
        assert report.mse == pytest.approx(np.mean((t01 - 0.5) ** 2), rel=1e-12)

    def test_per_image_averaging(self, pairs):
        src, tgt = pairs
        report = evaluate(lambda x: np.zeros_like(x), src, tgt)
        assert report.psnr_db == pytest.approx(np.mean([psnr_from_mse(m) for m in report.per_image_mse]))
        assert len(report.per_image_ssim) == 6

    def test_counts_every_test_image(self):
        x = np.zeros((2000, 1, 12, 12), dtype=np.float32)
        assert evaluate(lambda a: a, x, x).n_images == 2000

    def test_bundle_evaluation_is_deterministic(self, rng):
        bundle = build_bundle("vae", 64, 1, 4, 8)
        src = rng.uniform(-1, 1, size=(4, 1, 64, 64)).astype(np.float32)
        a, b = evaluate(bundle, src, src), evaluate(bundle, src, src)
        assert a == b and a.model == "VAE"
        np.testing.assert_array_equal(a.per_image_ssim, b.per_image_ssim)

    def test_size_mismatch(self, rng):
        bundle = build_bundle("pix2pix", 64, 1, 4)
        x = np.zeros((2, 1, 32, 32), dtype=np.float32)
        with pytest.raises(DimensionError):
            evaluate(bundle, x, x)

    def test_empty(self):
        x = np.zeros((0, 1, 16, 16), dtype=np.float32)
        with pytest.raises(ValidationError):
            evaluate(lambda a: a, x, x)


def table_reports():
    return [MetricsReport(name, 2000, 256, 0, mse, psnr, ssim) for name, mse, psnr, ssim in TABLE_ROWS]


class TestRender:
    def test_reference_rows(self):
        lines = render_report(table_reports()).splitlines()
        assert lines[0] == "| Model | MSE ↓ | PSNR (dB) ↑ | SSIM ↑ |"
        assert lines[2:] == [
            "| Pix2Pix GAN | 0.0058 | 29.55 | 0.87 |",
            "| CycleGAN | 0.0069 | 32.28 | 0.90 |",
            "| VAE | 0.0069 | 24.95 | 0.67 |",
        ]

    def test_unrounded_vae_ssim_renders_two_decimals(self):
        # 0.6573 renders as 0.66; the fixture rows carry 0.67 as given
        report = MetricsReport("VAE", 2000, 256, 0, 0.006949, 24.95, 0.6573)
        assert render_report([report]).splitlines()[2] == "| VAE | 0.0069 | 24.95 | 0.66 |"

    def test_header_constant(self):
        assert MARKDOWN_HEADER == ("Model", "MSE ↓", "PSNR (dB) ↑", "SSIM ↑")

    def test_single_report(self):
        assert len(render_report(table_reports()[:1]).splitlines()) == 3

    def test_csv_round_trip_full_precision(self, tmp_path):
        reports = [MetricsReport("m", 3, 64, 7, 1 / 3, math.pi, 0.1 + 0.2)]
        path = tmp_path / "r.csv"
        path.write_text(render_report(reports, "csv"))
        assert read_reports(path) == reports

    def test_unknown_format(self):
        with pytest.raises(ValidationError):
            render_report(table_reports(), "html")

    @pytest.mark.parametrize(
        "body,row",
        [("VAE,10,64,0,0.1,20.0\n", 2), ("VAE,ten,64,0,0.1,20.0,0.5\n", 2), ("a,1,64,0,0.1,20,0.5\nb,0,64,0,0.1,20,0.5\n", 3)],
    )
    def test_malformed_row_is_named(self, body, row):
        text = "model,n_images,image_size,seed,mse,psnr_db,ssim\n" + body
        with pytest.raises(DataError, match=f"row {row}"):
            parse_reports(text)

    def test_bad_header(self):
        with pytest.raises(DataError, match="row 1"):
            parse_reports("name,mse\nx,1\n")

    def test_report_needs_an_image(self):
        with pytest.raises(ValidationError):
            MetricsReport("m", 0, 64, 0, 0.0, 0.0, 0.0)
