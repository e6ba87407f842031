import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ministl.metrics import (CoverageError, MetricReport, QualityAccumulator, count_params,
                             estimate_flops, gaussian_window, mae, measure_fps, mse, psnr,
                             quality_report, register_mac_counter, ssim, ssim_per_frame)

C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2


def test_mse_mae_half_grey():
    zeros, half = np.zeros((1, 10, 1, 64, 64)), np.full((1, 10, 1, 64, 64), 0.5)
    assert mse(zeros, half) == (1024.0, 0.25)
    assert mae(zeros, half) == (2048.0, 0.5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 2, 5, 4), elements=st.floats(0, 1)),
       arrays(np.float64, (2, 3, 2, 5, 4), elements=st.floats(0, 1)))
def test_mse_conventions(a, b):
    frame_sum, pixel = mse(a, b)
    assert frame_sum == pixel * 2 * 5 * 4
    assert frame_sum >= 0
    assert mse(a, a) == (0.0, 0.0)
    rep = quality_report(a, b)
    assert rep.mse_paper == rep.mse_pixel * 40
    assert -1 <= rep.ssim <= 1
    assert (rep.psnr_db == math.inf) == (rep.mse_pixel == 0)


def test_ssim_identity(rng):
    x = rng.uniform(0, 1, (2, 4, 3, 32, 32))
    assert abs(ssim(x, x) - 1) < 1e-6


def test_ssim_constant_images():
    a, b = np.zeros((1, 1, 16, 16)), np.ones((1, 1, 16, 16))
    assert abs(ssim(a, b) - C1 / (1 + C1)) < 1e-9


def ssim_loop_oracle(x, y, size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    H, W = x.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + C1) * (2 * cxy + C2) / ((mx ** 2 + my ** 2 + C1) * (vx + vy + C2)))
    return float(np.mean(vals))


def test_ssim_matches_loop_oracle(rng):
    x = rng.uniform(0, 1, (20, 18))
    y = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
    got = ssim_per_frame(x[None], y[None])
    assert abs(float(got) - ssim_loop_oracle(x, y)) < 1e-5
    assert abs(float(ssim_per_frame(y[None], x[None])) - float(got)) < 1e-12


def test_gaussian_window_normalised():
    g = gaussian_window()
    assert g.shape == (11,) and abs(g.sum() - 1) < 1e-15 and g.argmax() == 5


def test_psnr_identities():
    a = np.full((1, 1, 8, 8), 0.5)
    assert psnr(a, a) == math.inf
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-6
    noisy = [psnr(a, a + s) for s in (0.01, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(noisy, noisy[1:]))


def test_psnr_reported_magnitude():
    # per-pixel MSE of 29.80 spread over a 64x64 frame
    assert 21.3 < 10 * math.log10(1 / (29.80 / 4096)) < 21.5


def test_psnr_caps_exact_frames_in_mixed_batch():
    t = np.full((1, 2, 1, 8, 8), 0.5)
    p = t.copy()
    p[0, 1] += 0.1
    rep = quality_report(p, t)
    assert math.isfinite(rep.psnr_db) and abs(rep.psnr_db - (100 + 20) / 2) < 1e-6


def test_perfect_oracle_report(rng):
    x = rng.uniform(0, 1, (2, 3, 1, 16, 16))
    rep = quality_report(x, x)
    assert rep.mse_paper == 0 and abs(rep.ssim - 1) < 1e-6 and rep.psnr_db == math.inf


def test_accumulator_merge_equals_single_pass(rng):
    p, t = rng.uniform(0, 1, (6, 4, 1, 16, 16)), rng.uniform(0, 1, (6, 4, 1, 16, 16))
    whole = quality_report(p, t)
    a, b = QualityAccumulator(), QualityAccumulator()
    a.update(p[:2], t[:2])
    b.update(p[2:], t[2:])
    merged = a.merge(b).report()
    assert merged.mse_paper == whole.mse_paper and merged.ssim == pytest.approx(whole.ssim, abs=1e-15)
    assert merged.num_sequences == 6


def test_report_dict_round_trip():
    rep = MetricReport(mse_paper=1.0, mse_pixel=0.5, mae_paper=2.0, mae_pixel=1.0, rmse_pixel=0.7,
                       ssim=0.9, psnr_db=math.inf, fps=3.0)
    d = rep.to_dict()
    assert d["psnr_db"] == "inf" and d["conventions"]["mse_convention"] == "frame_pixel_sum"
    assert MetricReport.from_dict(d) == rep
    assert math.isnan(MetricReport.from_dict(MetricReport().to_dict()).ssim)


def test_param_counts():
    assert count_params(nn.Linear(10, 10)) == 110
    assert count_params(nn.Conv2d(16, 32, 3)) == 4640


def test_conv_macs_closed_form():
    conv = nn.Conv2d(16, 32, 3, padding=1)
    assert estimate_flops(conv, (1, 16, 32, 32)) == 4_718_592


def test_flops_additive_and_identity():
    a, b = nn.Conv2d(4, 8, 3, padding=1), nn.Conv2d(8, 2, 1)
    both = nn.Sequential(a, b)
    assert estimate_flops(both, (2, 4, 6, 6)) == estimate_flops(a, (2, 4, 6, 6)) + estimate_flops(b, (2, 8, 6, 6))
    assert estimate_flops(nn.Identity(), (1, 3, 4, 4)) == 0


class Doubler(nn.Module):
    def forward(self, x):
        return 2 * x


def test_uncovered_leaf_raises():
    with pytest.raises(CoverageError, match="Doubler"):
        estimate_flops(nn.Sequential(nn.Conv2d(1, 1, 1), Doubler()), (1, 1, 2, 2))
    register_mac_counter(Doubler, lambda m, i, o: o.numel())
    assert estimate_flops(Doubler(), (1, 1, 2, 2)) == 4


def test_fps_is_positive():
    conv = nn.Sequential(nn.Conv2d(1, 4, 3, padding=1), nn.Conv2d(4, 1, 1))
    fps = measure_fps(lambda_model(conv), (1, 2, 1, 8, 8), batch=2, warmup=1, repeats=3)
    assert math.isfinite(fps) and fps > 0


def lambda_model(inner):
    class Wrap(nn.Module):
        def __init__(self):
            super().__init__()
            self.inner = inner

        def forward(self, x):
            B, T = x.shape[:2]
            return self.inner(x.flatten(0, 1)).reshape(B, T, *x.shape[2:])

    return Wrap()
