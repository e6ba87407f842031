"""Recurrent baselines: stacked ConvLSTM and ST-LSTM (PredRNN-style) cells
driven by a shared autoregressive rollout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from ..core import ConfigError, ContractError, ModelConfig

FEED_MODES = ("teacher_forcing_context", "free_running")


@dataclass
class HiddenState:
    h: list
    c: list
    m: Optional[torch.Tensor] = None

    @classmethod
    def zeros(cls, num_layers, batch, hidden, height, width, spatial_memory=False, like=None):
        kw = {} if like is None else {"dtype": like.dtype, "device": like.device}
        z = lambda: torch.zeros(batch, hidden, height, width, **kw)  # noqa: E731
        return cls([z() for _ in range(num_layers)], [z() for _ in range(num_layers)],
                   z() if spatial_memory else None)


@dataclass(frozen=True)
class RolloutConfig:
    T: int
    T_prime: int
    feed_mode: str = "teacher_forcing_context"

    def __post_init__(self):
        if self.T < 1 or self.T_prime < 0:
            raise ConfigError("rollout needs T >= 1 and T_prime >= 0")
        if self.feed_mode not in FEED_MODES:
            raise ConfigError(f"feed_mode must be one of {FEED_MODES}")


class ConvLSTMCell(nn.Module):
    """Gates i, f, o, g from one conv over [x, h]; c' = f*c + i*g, h' = o*tanh(c')."""

    def __init__(self, in_channels, hidden, kernel_size=3):
        super().__init__()
        self.hidden = hidden
        self.conv = nn.Conv2d(in_channels + hidden, 4 * hidden, kernel_size, padding=kernel_size // 2)

    def forward(self, x, h, c):
        if h.shape[1] != self.hidden or x.shape[-2:] != h.shape[-2:]:
            raise ContractError(f"state {tuple(h.shape)} does not fit input {tuple(x.shape)}")
        i, f, o, g = torch.split(self.conv(torch.cat([x, h], dim=1)), self.hidden, dim=1)
        i, f, o, g = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o), torch.tanh(g)
        c_new = f * c + i * g
        h_new = o * torch.tanh(c_new)
        return h_new, c_new

    def macs(self, inputs, output):
        # 4 gate activations, c update (2 mul + add), tanh, output mul
        return 9 * output[0].numel()


class STLSTMCell(nn.Module):
    """Spatio-temporal LSTM cell with a temporal memory c and a spatial memory m."""

    def __init__(self, in_channels, hidden, kernel_size=3):
        super().__init__()
        pad = kernel_size // 2
        self.hidden = hidden
        self.conv_x = nn.Conv2d(in_channels, 7 * hidden, kernel_size, padding=pad)
        self.conv_h = nn.Conv2d(hidden, 4 * hidden, kernel_size, padding=pad)
        self.conv_m = nn.Conv2d(hidden, 3 * hidden, kernel_size, padding=pad)
        self.conv_o = nn.Conv2d(2 * hidden, hidden, kernel_size, padding=pad)
        self.conv_fuse = nn.Conv2d(2 * hidden, hidden, 1)

    def forward(self, x, h, c, m):
        if h.shape[1] != self.hidden or x.shape[-2:] != h.shape[-2:]:
            raise ContractError(f"state {tuple(h.shape)} does not fit input {tuple(x.shape)}")
        i_x, f_x, g_x, i_xm, f_xm, g_xm, o_x = torch.split(self.conv_x(x), self.hidden, dim=1)
        i_h, f_h, g_h, o_h = torch.split(self.conv_h(h), self.hidden, dim=1)
        i_m, f_m, g_m = torch.split(self.conv_m(m), self.hidden, dim=1)

        c_new = torch.sigmoid(f_x + f_h) * c + torch.sigmoid(i_x + i_h) * torch.tanh(g_x + g_h)
        m_new = torch.sigmoid(f_xm + f_m) * m + torch.sigmoid(i_xm + i_m) * torch.tanh(g_xm + g_m)
        mem = torch.cat([c_new, m_new], dim=1)
        o = torch.sigmoid(o_x + o_h + self.conv_o(mem))
        h_new = o * torch.tanh(self.conv_fuse(mem))
        return h_new, c_new, m_new

    def macs(self, inputs, output):
        # gate sums and activations for both memories plus the output path
        return 24 * output[0].numel()


class RecurrentPredictor(nn.Module):
    """Stack of ConvLSTM or ST-LSTM cells with a 1x1 readout to frame channels.

    The same cells (one parameter set) are applied at every timestep.
    """

    category = "recurrent_based"

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.kind not in ("convlstm", "st_lstm"):
            raise ConfigError(f"RecurrentPredictor cannot build kind {config.kind!r}")
        self.config = config
        C = config.frame_spec.channels
        hid, k = config.num_hidden, config.filter_size
        cell = ConvLSTMCell if config.kind == "convlstm" else STLSTMCell
        self.cells = nn.ModuleList([cell(C if i == 0 else hid, hid, k) for i in range(config.num_layers)])
        self.readout = nn.Conv2d(hid, C, 1)

    @property
    def spatial_memory(self) -> bool:
        return self.config.kind == "st_lstm"

    def init_state(self, x) -> HiddenState:
        B, _, H, W = x.shape
        return HiddenState.zeros(len(self.cells), B, self.config.num_hidden, H, W, self.spatial_memory, like=x)

    def step(self, x, state: HiddenState) -> HiddenState:
        """Advance every layer by one timestep. ST-LSTM's m climbs the stack and
        the top layer's m feeds layer 0 at the next step."""
        h, c, m = list(state.h), list(state.c), state.m
        inp = x
        for i, cell in enumerate(self.cells):
            if self.spatial_memory:
                h[i], c[i], m = cell(inp, h[i], c[i], m)
            else:
                h[i], c[i] = cell(inp, h[i], c[i])
            inp = h[i]
        return HiddenState(h, c, m)

    def predict_frame(self, state: HiddenState):
        return self.readout(state.h[-1])

    def rollout(self, context, cfg: RolloutConfig):
        """Consume the context, then feed each prediction back as the next input.

        Step t (0-based) takes frame t and predicts frame t + 1; predictions made
        while the context is still being consumed are not emitted.
        """
        B, T = context.shape[:2]
        if T != cfg.T:
            raise ContractError(f"context has {T} frames, rollout expects {cfg.T}")
        if cfg.T_prime == 0:
            return context.new_zeros((B, 0, *context.shape[2:]))
        state = self.init_state(context[:, 0])
        preds = []
        x = context[:, 0]
        for t in range(T + cfg.T_prime - 1):
            if t < T:
                x = context[:, t]
            state = self.step(x, state)
            if t >= T - 1:
                x = self.predict_frame(state)
                preds.append(x)
        return torch.stack(preds, dim=1)

    def forward(self, context):
        expect = (self.config.T, *self.config.frame_spec.shape)
        if context.ndim != 5 or tuple(context.shape[1:]) != expect:
            raise ContractError(f"expected context (B, {', '.join(map(str, expect))}), got {tuple(context.shape)}")
        return self.rollout(context, RolloutConfig(self.config.T, self.config.T_prime))
