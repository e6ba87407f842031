"""Quality metrics (MSE, MAE, RMSE, SSIM, PSNR) and computational metrics
(parameter count, analytic MACs, throughput).

Reporting conventions:

* ``mse_paper`` / ``mae_paper`` sum the error over channels and pixels of a
  frame and average over frames and sequences ("frame_pixel_sum").
* SSIM and PSNR are computed per frame on inputs clamped to [0, 1] and then
  averaged.
* FLOPs are multiply-accumulates (one fused multiply-add = 1).
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ContractError, VideoBatch

MSE_CONVENTION = "frame_pixel_sum"
FLOPS_CONVENTION = "macs"
AVERAGING = "per_frame_then_mean"
PSNR_CAP_DB = 100.0  # per-frame PSNR for error-free frames when the batch as a whole is not error-free


def _as_array(x) -> np.ndarray:
    if isinstance(x, VideoBatch):
        x = x.data
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(pred, target):
    p, t = _as_array(pred), _as_array(target)
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.ndim < 3:
        raise ContractError(f"expected (..., C, H, W) arrays, got shape {p.shape}")
    return p, t


def _frame_size(a: np.ndarray) -> int:
    return int(np.prod(a.shape[-3:]))


def mse(pred, target) -> tuple[float, float]:
    """Returns (mse_paper, mse_pixel)."""
    p, t = _pair(pred, target)
    pixel = float(np.mean((p - t) ** 2)) if p.size else 0.0
    return pixel * _frame_size(p), pixel


def mae(pred, target) -> tuple[float, float]:
    """Returns (mae_paper, mae_pixel)."""
    p, t = _pair(pred, target)
    pixel = float(np.mean(np.abs(p - t))) if p.size else 0.0
    return pixel * _frame_size(p), pixel


def rmse(pred, target) -> float:
    return math.sqrt(mse(pred, target)[1])


def _frames(a: np.ndarray) -> np.ndarray:
    """Collapse leading axes: (..., C, H, W) -> (N, C, H, W)."""
    return a.reshape(-1, *a.shape[-3:])


def psnr_per_frame(pred, target, max_val: float = 1.0) -> np.ndarray:
    p, t = _pair(pred, target)
    p, t = np.clip(p, 0.0, 1.0), np.clip(t, 0.0, 1.0)
    err = np.mean((_frames(p) - _frames(t)) ** 2, axis=(1, 2, 3))
    out = np.full(err.shape, PSNR_CAP_DB)
    nz = err > 0
    out[nz] = 10.0 * np.log10(max_val ** 2 / err[nz])
    return out.reshape(p.shape[:-3])


def psnr(pred, target, max_val: float = 1.0) -> float:
    """Mean per-frame PSNR in dB; +inf when every frame is reproduced exactly."""
    p, t = _pair(pred, target)
    if np.array_equal(np.clip(p, 0, 1), np.clip(t, 0, 1)):
        return math.inf
    return float(np.mean(psnr_per_frame(p, t, max_val)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_per_frame(pred, target, window: int = 11, sigma: float = 1.5,
                   k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> np.ndarray:
    """Channel-averaged SSIM of every frame; shape = leading axes of the input."""
    p, t = _pair(pred, target)
    lead = p.shape[:-3]
    C, H, W = p.shape[-3:]
    x = torch.from_numpy(np.clip(_frames(p), 0, 1)).reshape(-1, 1, H, W)
    y = torch.from_numpy(np.clip(_frames(t), 0, 1)).reshape(-1, 1, H, W)
    wy, wx = min(window, H), min(window, W)
    gy = torch.from_numpy(gaussian_window(wy, sigma)).view(1, 1, wy, 1)
    gx = torch.from_numpy(gaussian_window(wx, sigma)).view(1, 1, 1, wx)

    def blur(z):
        return F.conv2d(F.conv2d(z, gy), gx)

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x ** 2
    syy = blur(y * y) - mu_y ** 2
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    per_channel = (num / den).mean(dim=(1, 2, 3)).numpy().reshape(-1, C)
    return per_channel.mean(axis=1).reshape(lead)


def ssim(pred, target, **kw) -> float:
    return float(np.mean(ssim_per_frame(pred, target, **kw)))


# ---------------------------------------------------------------------------
# Reports and reduction
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    mse_paper: float = math.nan
    mse_pixel: float = math.nan
    mae_paper: float = math.nan
    mae_pixel: float = math.nan
    rmse_pixel: float = math.nan
    ssim: float = math.nan
    psnr_db: float = math.nan
    params_m: Optional[float] = None
    flops_g: Optional[float] = None
    fps: Optional[float] = None
    device: Optional[str] = None
    num_sequences: int = 0
    lpips: Optional[float] = None
    conventions: dict = field(default_factory=lambda: {
        "mse_convention": MSE_CONVENTION, "flops_convention": FLOPS_CONVENTION, "averaging": AVERAGING})

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = repr(v)  # 'inf' / 'nan' keep the JSON strict
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        for k, v in d.items():
            if v in ("inf", "-inf", "nan"):
                d[k] = float(v)
        return cls(**d)


class QualityAccumulator:
    """Per-frame sufficient statistics, reduced with exact (fsum) summation so
    sharded evaluation gives the same numbers as a single pass."""

    def __init__(self):
        self.sq, self.ab, self.ss, self.ps = [], [], [], []
        self.frame_size = None
        self.sequences = 0

    def update(self, pred, target):
        p, t = _pair(pred, target)
        fs = _frame_size(p)
        if self.frame_size not in (None, fs):
            raise ContractError("frame size changed between updates")
        self.frame_size = fs
        d = _frames(p) - _frames(t)
        self.sq.extend(np.sum(d ** 2, axis=(1, 2, 3)).tolist())
        self.ab.extend(np.sum(np.abs(d), axis=(1, 2, 3)).tolist())
        self.ss.extend(np.ravel(ssim_per_frame(p, t)).tolist())
        frame_psnr = np.ravel(psnr_per_frame(p, t))
        exact = np.all(_frames(np.clip(p, 0, 1)) == _frames(np.clip(t, 0, 1)), axis=(1, 2, 3))
        self.ps.extend(np.where(exact, math.inf, frame_psnr).tolist())
        self.sequences += p.shape[0] if p.ndim == 5 else 1

    def merge(self, other: "QualityAccumulator") -> "QualityAccumulator":
        self.sq += other.sq
        self.ab += other.ab
        self.ss += other.ss
        self.ps += other.ps
        self.sequences += other.sequences
        self.frame_size = self.frame_size or other.frame_size
        return self

    def report(self) -> MetricReport:
        n = len(self.sq)
        if n == 0:
            return MetricReport()
        mse_pixel = math.fsum(self.sq) / (n * self.frame_size)
        mae_pixel = math.fsum(self.ab) / (n * self.frame_size)
        if all(math.isinf(v) for v in self.ps):
            ps = math.inf
        else:
            ps = math.fsum(PSNR_CAP_DB if math.isinf(v) else v for v in self.ps) / n
        return MetricReport(mse_paper=mse_pixel * self.frame_size, mse_pixel=mse_pixel,
                            mae_paper=mae_pixel * self.frame_size, mae_pixel=mae_pixel,
                            rmse_pixel=math.sqrt(mse_pixel),
                            ssim=math.fsum(self.ss) / n, psnr_db=ps, num_sequences=self.sequences)


def quality_report(pred, target) -> MetricReport:
    acc = QualityAccumulator()
    acc.update(pred, target)
    return acc.report()


# ---------------------------------------------------------------------------
# Computational metrics
# ---------------------------------------------------------------------------

class CoverageError(RuntimeError):
    """A leaf module has no registered MAC counter."""


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _conv_macs(m: nn.Conv2d, inputs, output):
    kh, kw = m.kernel_size
    return kh * kw * (m.in_channels // m.groups) * output.numel()


def _linear_macs(m: nn.Linear, inputs, output):
    return m.in_features * output.numel()


def _per_output(m, inputs, output):
    return output.numel()


def _per_input(m, inputs, output):
    return inputs[0].numel()


def _free(m, inputs, output):
    return 0


MAC_COUNTERS = {
    nn.Conv2d: _conv_macs,
    nn.Linear: _linear_macs,
    nn.GroupNorm: _per_output, nn.LayerNorm: _per_output, nn.BatchNorm2d: _per_output,
    nn.ReLU: _per_output, nn.SiLU: _per_output, nn.GELU: _per_output,
    nn.Sigmoid: _per_output, nn.Tanh: _per_output,
    nn.AdaptiveAvgPool2d: _per_input, nn.AvgPool2d: _per_input,
    nn.Identity: _free, nn.Dropout: _free, nn.PixelShuffle: _free, nn.Flatten: _free,
    nn.Sequential: _free, nn.ModuleList: _free,
}


def register_mac_counter(module_type, fn) -> None:
    MAC_COUNTERS[module_type] = fn


def _counter_for(module: nn.Module):
    for cls in type(module).__mro__:
        if cls in MAC_COUNTERS:
            return MAC_COUNTERS[cls]
    if hasattr(module, "macs"):
        return lambda m, i, o: m.macs(i, o)
    if not any(True for _ in module.children()):
        raise CoverageError(f"no MAC counter for leaf module {type(module).__name__}")
    return None


def default_input_shape(model: nn.Module, batch: int = 1) -> tuple:
    cfg = model.config
    return (batch, cfg.T, *cfg.frame_spec.shape)


@torch.no_grad()
def estimate_flops(model: nn.Module, input_shape: Optional[tuple] = None) -> int:
    """Analytic multiply-accumulate count of one forward pass at ``input_shape``.

    Counted from forward hooks, so each timestep of a recurrent rollout is
    included. Any leaf module without a registered counter is an error.
    """
    if input_shape is None:
        input_shape = default_input_shape(model)
    counters = {}
    for m in model.modules():
        fn = _counter_for(m)
        if fn is not None:
            counters[m] = fn
    total = [0]
    handles = [m.register_forward_hook(lambda mod, i, o, fn=fn: total.__setitem__(0, total[0] + int(fn(mod, i, o))))
               for m, fn in counters.items()]
    was_training = model.training
    model.eval()
    try:
        param = next(model.parameters(), None)
        dtype = param.dtype if param is not None else torch.float32
        device = param.device if param is not None else "cpu"
        model(torch.zeros(input_shape, dtype=dtype, device=device))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total[0]


def _sync(device):
    if str(device).startswith("cuda"):
        torch.cuda.synchronize()


@torch.no_grad()
def measure_fps(model: nn.Module, input_shape: Optional[tuple] = None, device: str = "cpu",
                batch: int = 16, warmup: int = 10, repeats: int = 50) -> float:
    """Output frames per second: batch * T' / median latency of one forward."""
    if input_shape is None:
        input_shape = default_input_shape(model, batch)
    else:
        input_shape = (batch, *input_shape[1:])
    model = model.to(device).eval()
    x = torch.rand(input_shape, device=device)
    for _ in range(warmup):
        model(x)
    _sync(device)
    times = []
    out_frames = None
    for _ in range(repeats):
        _sync(device)
        t0 = time.perf_counter()
        y = model(x)
        _sync(device)
        times.append(time.perf_counter() - t0)
        out_frames = y.shape[0] * y.shape[1]
    return out_frames / statistics.median(times)
