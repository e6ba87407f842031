import numpy as np
import pytest
import torch

from conftest import finite_difference_check, randomize_, tiny_metavp
from ministl.core import ConfigError, ContractError, FrameSpec, build_model, preset_config
from ministl.models import MetaVP, load_checkpoint, save_checkpoint
from ministl.models.checkpoint import read_header
from ministl.models.recurrent_free import (AttentionMixer, ConvNeXtMixer, DropPath, MetaFormerBlock,
                                           Translator)

MIXERS = ("attention", "mlp_mixer", "conv_next", "gated_attention")


def small(mixer, frame=(1, 64, 64), T=10, T_prime=10, N_S=4, **kw):
    return MetaVP(tiny_metavp(mixer, frame_spec=FrameSpec(*frame), T=T, T_prime=T_prime, N_S=N_S, **kw))


@pytest.mark.parametrize("N_S,side", [(4, 16), (2, 32)])
def test_encode_latent_resolution(N_S, side):
    m = small("conv_next", N_S=N_S)
    z, skip = m.encode(torch.zeros(2, 10, 1, 64, 64))
    assert z.shape == (2, 10, 8, side, side)
    assert skip.shape == (2, 10, 8, 64, 64)
    assert m.translate(z).shape == z.shape
    assert m.decode(z, skip).shape == (2, 10, 1, 64, 64)


@pytest.mark.parametrize("mixer", MIXERS)
@pytest.mark.parametrize("preset,T_prime", [("taxibj", 4), ("kitti", 1)])
def test_preset_shapes(mixer, preset, T_prime):
    cfg = preset_config(preset, mixer=mixer, hid_S=4, hid_T=8, N_T=1, mlp_ratio=2.0)
    m = MetaVP(cfg).eval()
    C, H, W = cfg.frame_spec.shape
    with torch.no_grad():
        y = m(torch.rand(1, cfg.T, C, H, W))
    assert y.shape == (1, T_prime, C, H, W)


def test_zero_context_encodes_identically_per_frame():
    m = randomize_(small("gated_attention"), std=0.1)
    z, skip = m.encode(torch.zeros(1, 10, 1, 64, 64))
    assert torch.equal(z, z[:, :1].expand_as(z))
    assert torch.equal(skip, skip[:, :1].expand_as(skip))


def test_encoder_is_frame_permutation_equivariant():
    m = randomize_(small("conv_next"), std=0.1)
    x = torch.rand(2, 10, 1, 64, 64)
    perm = torch.randperm(10)
    z, _ = m.encode(x)
    zp, _ = m.encode(x[:, perm])
    assert torch.allclose(zp, z[:, perm], atol=1e-6)


def test_translator_mixes_time():
    m = randomize_(small("conv_next"), std=0.1)
    z = torch.rand(1, 10, 8, 16, 16)
    bumped = z.clone()
    bumped[:, 0] += 1.0
    diff = (m.translate(bumped) - m.translate(z)).abs().flatten(2).amax(-1)
    assert (diff[0, 1:] > 0).all()


@pytest.mark.parametrize("mixer", MIXERS)
def test_fresh_block_is_identity(mixer):
    blk = MetaFormerBlock(16, mixer, (4, 4), mlp_ratio=2.0, drop_path=0.0)
    x = torch.randn(2, 16, 4, 4)
    assert torch.equal(blk(x), x)


def test_attention_single_token_weight_is_one():
    mix = AttentionMixer(16)
    mix(torch.randn(3, 16, 1, 1))
    assert torch.allclose(mix.last_attention, torch.ones_like(mix.last_attention))


def test_attention_rows_are_distributions():
    mix = randomize_(AttentionMixer(16))
    mix(torch.randn(2, 16, 3, 3))
    a = mix.last_attention
    assert a.shape == (2, 8, 9, 9)
    assert torch.allclose(a.sum(-1), torch.ones(2, 8, 9), atol=1e-6) and (a >= 0).all()


def test_conv_next_matches_direct_loop(rng):
    mix = randomize_(ConvNeXtMixer(3), std=0.5)
    x = rng.normal(size=(1, 3, 6, 5))
    w = mix.dwconv.weight.detach().double().numpy()[:, 0]
    b = mix.dwconv.bias.detach().double().numpy()
    pad = np.pad(x[0], ((0, 0), (3, 3), (3, 3)))
    oracle = np.zeros((3, 6, 5))
    for c in range(3):
        for i in range(6):
            for j in range(5):
                oracle[c, i, j] = (pad[c, i:i + 7, j:j + 7] * w[c]).sum() + b[c]
    got = mix.double()(torch.from_numpy(x)).detach().numpy()[0]
    assert np.max(np.abs(got - oracle)) < 1e-5


@pytest.mark.parametrize("mixer", MIXERS)
def test_gradient_matches_finite_differences(mixer):
    torch.manual_seed(0)
    m = randomize_(MetaVP(tiny_metavp(mixer)).double(), std=0.3).eval()
    x = torch.rand(1, 2, 1, 8, 8, dtype=torch.float64)
    err, _, _ = finite_difference_check(m, x)
    assert err < 1e-3


def test_drop_path_eval_is_identity():
    torch.manual_seed(0)
    a = MetaFormerBlock(8, "conv_next", (4, 4), drop_path=1.0)
    b = MetaFormerBlock(8, "conv_next", (4, 4), drop_path=0.0)
    b.load_state_dict(a.state_dict())
    randomize_(a)
    b.load_state_dict(a.state_dict())
    x = torch.randn(2, 8, 4, 4)
    a.eval(), b.eval()
    assert torch.equal(a(x), b(x))
    a.train()
    assert torch.equal(a(x), x)


def test_drop_path_expectation():
    torch.manual_seed(3)
    p, n = 0.3, 20_000
    out = DropPath(p).train()(torch.ones(n, 1, 1, 1))
    keep = 1 - p
    se = np.sqrt((1 - keep) / keep / n)
    assert abs(out.mean().item() - 1.0) < 3 * se
    vals = torch.unique(out)
    assert len(vals) == 2 and vals[0] == 0 and torch.isclose(vals[1], torch.tensor(1 / keep))


def test_eval_is_deterministic():
    m = small("gated_attention", drop_path=0.2).eval()
    x = torch.rand(2, 10, 1, 64, 64)
    with torch.no_grad():
        assert torch.equal(m(x), m(x))


def test_no_translator_blocks():
    m = small("attention", N_T=0)
    assert m(torch.rand(1, 10, 1, 64, 64)).shape == (1, 10, 1, 64, 64)


def test_config_errors():
    with pytest.raises(ConfigError):
        small("conv_next", T_prime=0)
    with pytest.raises(ConfigError):
        small("conv_next", frame=(1, 30, 30))
    with pytest.raises(ConfigError):
        Translator(8, 8, 1, "nope", (2, 2))
    m = small("conv_next")
    with pytest.raises(ContractError, match=r"\(2, 9, 1, 64, 64\)"):
        m(torch.zeros(2, 9, 1, 64, 64))


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_metavp("gated_attention")
    m = randomize_(build_model("metavp-gated_attention", cfg)).eval()
    path = save_checkpoint(m, tmp_path / "ck" / "best.npz", extra={"epoch": 3})
    assert not (tmp_path / "ck" / "best.npz.tmp").exists()
    hdr = read_header(path)
    assert hdr["model"] == "metavp-gated_attention" and hdr["extra"]["epoch"] == 3
    back = load_checkpoint(path).eval()
    x = torch.rand(2, 2, 1, 8, 8)
    with torch.no_grad():
        assert torch.equal(m(x), back(x))
    assert back.config == m.config
