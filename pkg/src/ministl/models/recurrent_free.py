"""MetaVP: per-frame conv encoder, MetaFormer translator over the folded
(T * hid_S) channel axis, sub-pixel conv decoder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import ConfigError, ContractError, ModelConfig


def _groups(channels: int) -> int:
    return 2 if channels % 2 == 0 else 1


def trunc_normal_init(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def zero_init(layer: nn.Module) -> nn.Module:
    nn.init.zeros_(layer.weight)
    if getattr(layer, "bias", None) is not None:
        nn.init.zeros_(layer.bias)
    return layer


class DropPath(nn.Module):
    """Per-sample stochastic depth; survivors are rescaled by 1/keep."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = float(p)

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        if keep == 0.0:
            return torch.zeros_like(x)
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep

    def macs(self, inputs, output):
        return output.numel() if self.training and self.p > 0 else 0


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)

    def macs(self, inputs, output):
        return output.numel()


# ---------------------------------------------------------------------------
# Spatial encoder / decoder
# ---------------------------------------------------------------------------

class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(_groups(c_out), c_out)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class UpBlock(nn.Module):
    """3x3 conv to 4x channels, then channel-to-space (factor 2)."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out * 4, 3, padding=1)
        self.shuffle = nn.PixelShuffle(2)
        self.norm = nn.GroupNorm(_groups(c_out), c_out)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.norm(self.shuffle(self.conv(x))))


class Encoder(nn.Module):
    """Stride-1 stem (kept as the skip) followed by N_S/2 stride-2 blocks."""

    def __init__(self, c_in, hid_S, N_S):
        super().__init__()
        self.stem = ConvBlock(c_in, hid_S, 1)
        self.blocks = nn.Sequential(*[ConvBlock(hid_S, hid_S, 2) for _ in range(N_S // 2)])

    def forward(self, x):
        skip = self.stem(x)
        return self.blocks(skip), skip


class Decoder(nn.Module):
    def __init__(self, hid_S, c_out, N_S):
        super().__init__()
        self.blocks = nn.Sequential(*[UpBlock(hid_S, hid_S) for _ in range(N_S // 2)])
        self.fuse = ConvBlock(hid_S, hid_S, 1)
        self.readout = nn.Conv2d(hid_S, c_out, 1)

    def forward(self, z, skip):
        return self.readout(self.fuse(self.blocks(z) + skip))

    def macs(self, inputs, output):
        # skip addition
        return inputs[1].numel()


# ---------------------------------------------------------------------------
# Token mixers
# ---------------------------------------------------------------------------

class AttentionMixer(nn.Module):
    """ViT-style multi-head self-attention over the H*W latent tokens."""

    def __init__(self, dim, heads=8):
        super().__init__()
        self.heads = math.gcd(dim, heads)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attention = None

    def forward(self, x):
        B, C, H, W = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # (B, N, C)
        N, h = H * W, self.heads
        q, k, v = self.qkv(tokens).reshape(B, N, 3, h, C // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (C // h) ** -0.5
        attn = attn.softmax(dim=-1)
        self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out).transpose(1, 2).reshape(B, C, H, W)

    def macs(self, inputs, output):
        B, C, H, W = output.shape
        N = H * W
        # scores, softmax, weighted sum
        return B * (N * N * C + self.heads * N * N + N * N * C)


class TokenMLPMixer(nn.Module):
    """MLP-Mixer token mixing: an MLP across the flattened spatial axis."""

    def __init__(self, dim, num_tokens, ratio=0.5):
        super().__init__()
        hidden = max(1, int(num_tokens * ratio))
        self.num_tokens = num_tokens
        self.fc1 = nn.Linear(num_tokens, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, num_tokens)

    def forward(self, x):
        B, C, H, W = x.shape
        if H * W != self.num_tokens:
            raise ContractError(f"mlp_mixer built for {self.num_tokens} tokens, got {H * W}")
        y = self.fc2(self.act(self.fc1(x.reshape(B, C, H * W))))
        return y.reshape(B, C, H, W)


class ConvNeXtMixer(nn.Module):
    """Depthwise 7x7 spatial mixing."""

    def __init__(self, dim):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)

    def forward(self, x):
        return self.dwconv(x)


class GatedAttentionMixer(nn.Module):
    """Large-kernel static attention times a squeeze-excite channel gate."""

    def __init__(self, dim, reduction=16):
        super().__init__()
        self.proj_in = nn.Conv2d(dim, dim, 1)
        self.act = nn.GELU()
        self.dw = nn.Conv2d(dim, dim, 5, padding=2, groups=dim)
        self.dw_dilated = nn.Conv2d(dim, dim, 5, padding=6, dilation=3, groups=dim)
        self.pw = nn.Conv2d(dim, dim, 1)
        squeezed = max(dim // reduction, 4)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(dim, squeezed)
        self.relu = nn.ReLU()
        self.fc2 = nn.Linear(squeezed, dim)
        self.gate = nn.Sigmoid()
        self.proj_out = nn.Conv2d(dim, dim, 1)

    def forward(self, x):
        u = self.act(self.proj_in(x))
        attn = self.pw(self.dw_dilated(self.dw(u)))
        se = self.gate(self.fc2(self.relu(self.fc1(self.pool(u).flatten(1)))))
        return self.proj_out(attn * se[:, :, None, None] * u)

    def macs(self, inputs, output):
        return 2 * output.numel()


def build_mixer(kind: str, dim: int, resolution: tuple[int, int]) -> nn.Module:
    if kind == "attention":
        return AttentionMixer(dim)
    if kind == "mlp_mixer":
        return TokenMLPMixer(dim, resolution[0] * resolution[1])
    if kind == "conv_next":
        return ConvNeXtMixer(dim)
    if kind == "gated_attention":
        return GatedAttentionMixer(dim)
    raise ConfigError(f"unknown mixer kind {kind!r}")


def _last_layer(mixer: nn.Module) -> nn.Module:
    for name in ("proj_out", "proj", "fc2", "dwconv"):
        if isinstance(getattr(mixer, name, None), (nn.Conv2d, nn.Linear)):
            return getattr(mixer, name)
    raise ConfigError(f"no output projection on {type(mixer).__name__}")


class MetaFormerBlock(nn.Module):
    """x + DropPath(mixer(norm(x))), then x + DropPath(mlp(norm(x)))."""

    def __init__(self, dim, kind, resolution, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        self.norm1 = ChannelLayerNorm(dim)
        self.mixer = build_mixer(kind, dim, resolution)
        self.norm2 = ChannelLayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Conv2d(dim, hidden, 1), nn.GELU(), nn.Conv2d(hidden, dim, 1))
        self.drop_path = DropPath(drop_path)
        trunc_normal_init(self)
        zero_init(_last_layer(self.mixer))
        zero_init(self.mlp[-1])

    def forward(self, x):
        x = x + self.drop_path(self.mixer(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))

    def macs(self, inputs, output):
        return 2 * output.numel()


class Translator(nn.Module):
    """1x1 projection T*hid_S -> hid_T, N_T MetaFormer blocks, projection back."""

    def __init__(self, channels, hid_T, N_T, kind, resolution, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        self.proj_in = nn.Conv2d(channels, hid_T, 1)
        self.blocks = nn.Sequential(*[MetaFormerBlock(hid_T, kind, resolution, mlp_ratio, drop_path)
                                      for _ in range(N_T)])
        self.proj_out = nn.Conv2d(hid_T, channels, 1)
        trunc_normal_init(self.proj_in)
        trunc_normal_init(self.proj_out)

    def forward(self, z):
        return self.proj_out(self.blocks(self.proj_in(z)))


class MetaVP(nn.Module):
    category = "recurrent_free"

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.kind != "metavp" or config.mixer is None:
            raise ConfigError("MetaVP needs kind='metavp' and a mixer")
        if config.T_prime < 1:
            raise ConfigError("MetaVP needs T_prime >= 1")
        C, H, W = config.frame_spec.shape
        factor = 2 ** (config.N_S // 2)
        if H % factor or W % factor:
            raise ConfigError(f"frame {H}x{W} not divisible by the encoder downsampling factor {factor}")
        self.config = config
        self.latent_hw = (H // factor, W // factor)
        hid_S, T = config.hid_S, config.T
        self.encoder = Encoder(C, hid_S, config.N_S)
        self.translator = Translator(T * hid_S, config.hid_T, config.N_T, config.mixer, self.latent_hw,
                                     config.mlp_ratio, config.drop_path)
        self.decoder = Decoder(hid_S, C, config.N_S)
        self.time_readout = (nn.Conv2d(T * C, config.T_prime * C, 1)
                             if config.T_prime != T else None)

    def encode(self, x):
        """(B, T, C, H, W) -> latent (B, T, hid_S, h, w) and skip (B, T, hid_S, H, W)."""
        B, T = x.shape[:2]
        z, skip = self.encoder(x.reshape(B * T, *x.shape[2:]))
        return z.reshape(B, T, *z.shape[1:]), skip.reshape(B, T, *skip.shape[1:])

    def translate(self, z):
        B, T, c, h, w = z.shape
        return self.translator(z.reshape(B, T * c, h, w)).reshape(B, T, c, h, w)

    def decode(self, z, skip):
        B, T = z.shape[:2]
        y = self.decoder(z.reshape(B * T, *z.shape[2:]), skip.reshape(B * T, *skip.shape[2:]))
        C, H, W = y.shape[1:]
        if self.time_readout is not None:
            y = self.time_readout(y.reshape(B, T * C, H, W))
            return y.reshape(B, self.config.T_prime, C, H, W)
        return y.reshape(B, T, C, H, W)

    def forward(self, x):
        expect = (self.config.T, *self.config.frame_spec.shape)
        if x.ndim != 5 or tuple(x.shape[1:]) != expect:
            raise ContractError(f"expected context (B, {', '.join(map(str, expect))}), got {tuple(x.shape)}")
        z, skip = self.encode(x)
        return self.decode(self.translate(z), skip)
