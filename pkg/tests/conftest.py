import numpy as np
import pytest
import torch

from ministl.core import FrameSpec, ModelConfig, SeedSpec
from ministl.datagen import DatasetSpec


def tiny_metavp(mixer="gated_attention", **kw):
    base = dict(kind="metavp", mixer=mixer, hid_S=8, hid_T=16, N_S=2, N_T=1, T=2, T_prime=2,
                mlp_ratio=2.0, frame_spec=FrameSpec(1, 8, 8))
    base.update(kw)
    return ModelConfig(**base)


def tiny_recurrent(kind="convlstm", **kw):
    base = dict(kind=kind, num_layers=2, num_hidden=4, filter_size=3, T=3, T_prime=2,
                frame_spec=FrameSpec(1, 1, 1))
    base.update(kw)
    return ModelConfig(**base)


def randomize_(model, std=0.3, seed=0):
    """Overwrite every parameter with N(0, std) so zero-initialised branches carry gradient."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model


def finite_difference_check(model, x, eps=1e-6):
    """Relative error between autograd and central differences of sum(model(x))
    w.r.t. every parameter entry."""
    model.zero_grad()
    model(x).sum().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in model.parameters()])
    numeric = torch.zeros_like(analytic)
    k = 0
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = model(x).sum().item()
                flat[i] = old - eps
                down = model(x).sum().item()
                flat[i] = old
                numeric[k] = (up - down) / (2 * eps)
                k += 1
    err = (analytic - numeric).norm() / max(analytic.norm(), numeric.norm(), 1e-12)
    return float(err), analytic, numeric


@pytest.fixture
def builtin_test_spec():
    return DatasetSpec(split="test", count=8, sprite_source="builtin", seed=SeedSpec(42, 0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
