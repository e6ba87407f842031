import math

import numpy as np
import pytest
import torch

from conftest import finite_difference_check, randomize_, tiny_recurrent
from ministl.core import ConfigError, ContractError, FrameSpec
from ministl.models import RecurrentPredictor
from ministl.models.recurrent import ConvLSTMCell, HiddenState, RolloutConfig, STLSTMCell

sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731


def centre(conv):
    """Effective (out, in) matrix of a conv at 1x1 spatial size with same padding."""
    k = conv.weight.shape[-1] // 2
    return conv.weight.detach().double().numpy()[:, :, k, k], conv.bias.detach().double().numpy()


def rand_state(n, hid, seed):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(1, hid, 1, 1, generator=g, dtype=torch.float64) for _ in range(n)]


def test_convlstm_scalar_oracle():
    hid = 3
    cell = randomize_(ConvLSTMCell(2, hid), std=0.7, seed=1).double()
    x, h, c = rand_state(1, 2, 5)[0], *rand_state(2, hid, 6)
    h1, c1 = cell(x, h, c)
    W, b = centre(cell.conv)
    xv, hv, cv = (t.numpy().reshape(-1) for t in (x, h, c))
    gates = W @ np.concatenate([xv, hv]) + b
    for j in range(hid):
        i, f, o, g = (gates[k * hid + j] for k in range(4))
        c_ref = sig(f) * cv[j] + sig(i) * math.tanh(g)
        h_ref = sig(o) * math.tanh(c_ref)
        assert abs(c1.reshape(-1)[j].item() - c_ref) < 1e-6
        assert abs(h1.reshape(-1)[j].item() - h_ref) < 1e-6


def test_st_lstm_scalar_oracle():
    hid = 2
    cell = randomize_(STLSTMCell(1, hid), std=0.7, seed=2).double()
    x = rand_state(1, 1, 7)[0]
    h, c, m = rand_state(3, hid, 8)
    h1, c1, m1 = cell(x, h, c, m)
    Wx, bx = centre(cell.conv_x)
    Wh, bh = centre(cell.conv_h)
    Wm, bm = centre(cell.conv_m)
    Wo, bo = centre(cell.conv_o)
    Wf, bf = centre(cell.conv_fuse)
    xv, hv, cv, mv = (t.numpy().reshape(-1) for t in (x, h, c, m))
    gx, gh, gm = Wx @ xv + bx, Wh @ hv + bh, Wm @ mv + bm
    split = lambda v, n: [v[k * hid:(k + 1) * hid] for k in range(n)]  # noqa: E731
    i_x, f_x, g_x, i_xm, f_xm, g_xm, o_x = split(gx, 7)
    i_h, f_h, g_h, o_h = split(gh, 4)
    i_m, f_m, g_m = split(gm, 3)
    c_ref = np.array([sig(f_x[j] + f_h[j]) * cv[j] + sig(i_x[j] + i_h[j]) * math.tanh(g_x[j] + g_h[j])
                      for j in range(hid)])
    m_ref = np.array([sig(f_xm[j] + f_m[j]) * mv[j] + sig(i_xm[j] + i_m[j]) * math.tanh(g_xm[j] + g_m[j])
                      for j in range(hid)])
    mem = np.concatenate([c_ref, m_ref])
    o = Wo @ mem + bo + o_x + o_h
    fused = Wf @ mem + bf
    h_ref = np.array([sig(o[j]) * math.tanh(fused[j]) for j in range(hid)])
    for got, ref in ((c1, c_ref), (m1, m_ref), (h1, h_ref)):
        assert np.max(np.abs(got.detach().numpy().reshape(-1) - ref)) < 1e-6


def _zero(cell):
    with torch.no_grad():
        for p in cell.parameters():
            p.zero_()
    return cell.double()


def test_zero_weight_closed_forms():
    h, c, m = rand_state(3, 4, 11)
    x = rand_state(1, 1, 12)[0]
    h1, c1 = _zero(ConvLSTMCell(1, 4))(x, h, c)
    assert torch.allclose(c1, 0.5 * c, atol=1e-6, rtol=0)
    assert torch.allclose(h1, 0.5 * torch.tanh(0.5 * c), atol=1e-6, rtol=0)
    h2, c2, m2 = _zero(STLSTMCell(1, 4))(x, h, c, m)
    assert torch.allclose(c2, 0.5 * c, atol=1e-6, rtol=0)
    assert torch.allclose(m2, 0.5 * m, atol=1e-6, rtol=0)
    assert torch.allclose(h2, torch.zeros_like(h2), atol=1e-6, rtol=0)


@pytest.mark.parametrize("kind", ["convlstm", "st_lstm"])
def test_origin_is_fixed_point_without_bias(kind):
    model = randomize_(RecurrentPredictor(tiny_recurrent(kind, frame_spec=FrameSpec(1, 4, 4))))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    x = torch.zeros(2, 1, 4, 4)
    state = model.step(x, model.init_state(x))
    assert all(not t.any() for t in state.h + state.c)
    assert state.m is None or not state.m.any()


def test_spatial_memory_zig_zags():
    model = randomize_(RecurrentPredictor(tiny_recurrent("st_lstm", num_layers=3)))
    seen = []  # (layer, m_in, m_out) in call order
    for i, cell in enumerate(model.cells):
        cell.register_forward_hook(lambda mod, inp, out, i=i: seen.append((i, inp[3], out[2])))
    with torch.no_grad():
        model(torch.rand(1, 3, 1, 1, 1))
    steps = 3 + 2 - 1
    assert [s[0] for s in seen] == [0, 1, 2] * steps
    assert not seen[0][1].any()
    for k in range(1, len(seen)):
        assert seen[k][1] is seen[k - 1][2]


def _manual(model, context, T_prime):
    state = model.init_state(context[:, 0])
    x, out = None, []
    T = context.shape[1]
    for t in range(T + T_prime - 1):
        x = context[:, t] if t < T else x
        state = model.step(x, state)
        if t >= T - 1:
            x = model.predict_frame(state)
            out.append(x)
    return torch.stack(out, 1)


@pytest.mark.parametrize("kind", ["convlstm", "st_lstm"])
@pytest.mark.parametrize("T_prime", [1, 2, 5])
def test_rollout_matches_manual_loop(kind, T_prime):
    model = randomize_(RecurrentPredictor(tiny_recurrent(kind, T_prime=T_prime, frame_spec=FrameSpec(1, 4, 4))))
    ctx = torch.rand(2, 3, 1, 4, 4)
    with torch.no_grad():
        got = model(ctx)
        assert got.shape == (2, T_prime, 1, 4, 4)
        assert torch.equal(got, _manual(model, ctx, T_prime))


def test_rollout_zero_horizon():
    model = RecurrentPredictor(tiny_recurrent())
    out = model.rollout(torch.rand(2, 3, 1, 1, 1), RolloutConfig(3, 0))
    assert out.shape == (2, 0, 1, 1, 1)


def test_rollout_causality():
    model = randomize_(RecurrentPredictor(tiny_recurrent(frame_spec=FrameSpec(1, 4, 4))))
    ctx = torch.rand(1, 3, 1, 4, 4)
    alt = ctx.clone()
    alt[:, 2] += 1
    with torch.no_grad():
        s, s_alt = model.init_state(ctx[:, 0]), model.init_state(ctx[:, 0])
        for t in range(2):
            s, s_alt = model.step(ctx[:, t], s), model.step(alt[:, t], s_alt)
        assert all(torch.equal(a, b) for a, b in zip(s.h + s.c, s_alt.h + s_alt.c))
        assert not torch.equal(model(ctx), model(alt))


def test_parameters_shared_across_time():
    a = RecurrentPredictor(tiny_recurrent(T=3, T_prime=2))
    b = RecurrentPredictor(tiny_recurrent(T=10, T_prime=20))
    assert sum(p.numel() for p in a.parameters()) == sum(p.numel() for p in b.parameters())


def test_rollout_gradient_through_time():
    torch.manual_seed(0)
    model = randomize_(RecurrentPredictor(tiny_recurrent("convlstm", frame_spec=FrameSpec(1, 4, 4))).double())
    ctx = torch.rand(1, 3, 1, 4, 4, dtype=torch.float64)
    err, _, _ = finite_difference_check(model, ctx)
    assert err < 1e-3


def test_contract_errors():
    model = RecurrentPredictor(tiny_recurrent())
    with pytest.raises(ContractError):
        model(torch.rand(1, 4, 1, 1, 1))
    with pytest.raises(ContractError):
        model.rollout(torch.rand(1, 2, 1, 1, 1), RolloutConfig(3, 2))
    cell = ConvLSTMCell(1, 4)
    with pytest.raises(ContractError):
        cell(torch.zeros(1, 1, 2, 2), torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 2))
    with pytest.raises(ConfigError):
        RolloutConfig(3, 2, feed_mode="bogus")
    with pytest.raises(ConfigError):
        RecurrentPredictor(tiny_recurrent(kind="metavp"))


def test_hidden_state_zeros():
    s = HiddenState.zeros(3, 2, 5, 4, 4, spatial_memory=True)
    assert len(s.h) == len(s.c) == 3 and s.m.shape == (2, 5, 4, 4)
