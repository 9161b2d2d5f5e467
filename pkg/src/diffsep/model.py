"""DDPM++-style U-Net for band-split spectrograms.

Differences from the image DDPM++ network:

* resampling acts on the frequency axis only (stride ``(2, 1)``), so the
  frame count is preserved through the whole network;
* pixel-wise self-attention is replaced by dual-path RoFormer blocks that
  attend along time (per frequency row) and then along frequency (per frame);
* the noise embedding modulates every residual block through scale/shift.

Tensors are laid out ``[batch, channels, freq, time]``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import SIGMA_DATA


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 128
    levels: int = 4
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 2)
    res_blocks_per_level: int = 4
    noise_embed_dim: int = 1024  # width of the sinusoidal noise features
    emb_channel_mult: int = 4  # per-block embedding width = emb_channel_mult * base_channels
    n_input_channels: int = 32
    n_output_channels: int = 16
    attention_heads: int = 8
    rotary_dim: int | None = None  # None: full head dimension
    rotary_base: float = 10000.0
    ff_mult: int = 1
    noise_injection: str = "add"  # or "scale_shift"
    resample: str = "conv"  # or "block" (full resampling residual blocks)
    decoder_extra_block: bool = False  # True: N_r + 1 decoder blocks per level
    encoder_attention: bool = True
    decoder_attention: bool = True
    dropout: float = 0.0
    sigma_data: float = SIGMA_DATA  # data std assumed by the preconditioning

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if len(self.channel_multipliers) != self.levels:
            raise ValueError(
                f"{len(self.channel_multipliers)} channel multipliers for {self.levels} levels"
            )
        if self.n_input_channels != 2 * self.n_output_channels:
            raise ValueError("n_input_channels must be twice n_output_channels")
        if self.levels < 1 or self.res_blocks_per_level < 1 or self.base_channels < 1:
            raise ValueError("levels, res_blocks_per_level and base_channels must be >= 1")
        for mult in self.channel_multipliers:
            width = self.base_channels * mult
            if width % self.attention_heads:
                raise ValueError(f"{width} channels not divisible by {self.attention_heads} heads")
        if self.noise_injection not in ("add", "scale_shift"):
            raise ValueError(f"unknown noise_injection {self.noise_injection!r}")
        if self.resample not in ("conv", "block"):
            raise ValueError(f"unknown resample {self.resample!r}")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.noise_embed_dim % 2:
            raise ValueError("noise_embed_dim must be even")
        if self.rotary_dim is not None and self.rotary_dim % 2:
            raise ValueError("rotary_dim must be even")

    @property
    def emb_channels(self) -> int:
        return self.emb_channel_mult * self.base_channels

    @property
    def freq_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}; valid: {sorted(known)}")
        return cls(**d)


PAPER_CONFIG = ModelConfig()
TINY_CONFIG = ModelConfig(
    base_channels=16,
    levels=2,
    channel_multipliers=(1, 2),
    res_blocks_per_level=1,
    noise_embed_dim=32,
    attention_heads=2,
)


def xavier_uniform_(weight: torch.Tensor, fan_in: int, fan_out: int, gain: float = 1.0):
    bound = gain * math.sqrt(6 / (fan_in + fan_out))
    with torch.no_grad():
        weight.uniform_(-bound, bound)
    return weight


def _linear(in_f, out_f, bias=True, gain=1.0):
    layer = nn.Linear(in_f, out_f, bias=bias)
    xavier_uniform_(layer.weight, in_f, out_f, gain)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


def _conv(in_c, out_c, kernel, stride=(1, 1), gain=1.0):
    layer = nn.Conv2d(in_c, out_c, kernel, stride=stride, padding=kernel // 2)
    xavier_uniform_(layer.weight, in_c * kernel * kernel, out_c * kernel * kernel, gain)
    nn.init.zeros_(layer.bias)
    return layer


def group_norm(channels: int, eps: float = 1e-6) -> nn.GroupNorm:
    return nn.GroupNorm(min(32, max(1, channels // 4)), channels, eps=eps)


class PositionalEmbedding(nn.Module):
    """Sinusoidal features of a scalar at geometrically spaced frequencies."""

    def __init__(self, num_channels: int, max_positions: int = 10000):
        super().__init__()
        self.num_channels = num_channels
        self.max_positions = max_positions

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        half = self.num_channels // 2
        freqs = torch.arange(half, dtype=torch.float64, device=x.device) / max(half - 1, 1)
        freqs = (1 / self.max_positions) ** freqs
        arg = torch.outer(x.to(torch.float64), freqs)
        return torch.cat([arg.cos(), arg.sin()], dim=1).to(x.dtype)


class NoiseEmbedding(nn.Module):
    """Sinusoidal noise features followed by two Linear+SiLU stages."""

    def __init__(self, noise_channels: int, embed_dim: int):
        super().__init__()
        self.features = PositionalEmbedding(noise_channels)
        self.layer0 = _linear(noise_channels, embed_dim)
        self.layer1 = _linear(embed_dim, embed_dim)

    def forward(self, c_noise: torch.Tensor) -> torch.Tensor:
        emb = self.features(c_noise)
        return F.silu(self.layer1(F.silu(self.layer0(emb))))


@functools.lru_cache(maxsize=32)
def rotary_tables(length: int, dim: int, base: float) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables ``[length, dim]`` in float64, halves repeated.

    Callers cast to at least float32 so rotary phases never run in low precision.
    """
    inv = 1.0 / base ** (torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    angles = torch.outer(torch.arange(length, dtype=torch.float64), inv)
    angles = torch.cat([angles, angles], dim=-1)
    return angles.cos(), angles.sin()


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate the leading ``cos.shape[-1]`` features of ``x`` (half-split pairing)."""
    work = torch.promote_types(x.dtype, torch.float32)
    rot = cos.shape[-1]
    xr = x[..., :rot].to(work)
    cos, sin = cos.to(device=x.device, dtype=work), sin.to(device=x.device, dtype=work)
    x1, x2 = xr.chunk(2, dim=-1)
    out = xr * cos + torch.cat([-x2, x1], dim=-1) * sin
    if rot == x.shape[-1]:
        return out.to(x.dtype)
    return torch.cat([out.to(x.dtype), x[..., rot:]], dim=-1)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return F.rms_norm(x, (x.shape[-1],), self.weight, self.eps)


class RoFormerLayer(nn.Module):
    """Pre-norm transformer layer over sequences ``[N, L, C]`` with rotary attention."""

    def __init__(self, dim, heads, rotary_dim=None, rotary_base=10000.0, ff_mult=2):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.rotary_dim = rotary_dim or self.head_dim
        if self.rotary_dim > self.head_dim:
            raise ValueError("rotary_dim exceeds head dimension")
        self.rotary_base = rotary_base
        self.attn_norm = RMSNorm(dim)
        self.qkv = _linear(dim, 3 * dim, bias=False)
        self.attn_out = _linear(dim, dim, bias=False)
        self.ff_norm = RMSNorm(dim)
        self.ff_in = _linear(dim, ff_mult * dim)
        self.ff_out = _linear(ff_mult * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, length, dim = x.shape
        q, k, v = (
            self.qkv(self.attn_norm(x))
            .reshape(n, length, 3, self.heads, self.head_dim)
            .permute(2, 0, 3, 1, 4)
        )
        cos, sin = rotary_tables(length, self.rotary_dim, float(self.rotary_base))
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + self.attn_out(a.transpose(1, 2).reshape(n, length, dim))
        h = F.gelu(self.ff_in(self.ff_norm(x)), approximate="tanh")
        return x + self.ff_out(h)


class DualPathRoFormer(nn.Module):
    """Attention along time for each frequency row, then along frequency per frame."""

    def __init__(self, dim, heads, rotary_dim=None, rotary_base=10000.0, ff_mult=2):
        super().__init__()
        self.time = RoFormerLayer(dim, heads, rotary_dim, rotary_base, ff_mult)
        self.freq = RoFormerLayer(dim, heads, rotary_dim, rotary_base, ff_mult)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, f, t = x.shape
        h = x.permute(0, 2, 3, 1).reshape(b * f, t, c)
        h = self.time(h).reshape(b, f, t, c)
        h = h.transpose(1, 2).reshape(b * t, f, c)
        h = self.freq(h).reshape(b, t, f, c)
        return h.permute(0, 3, 2, 1).contiguous()


class UNetBlock(nn.Module):
    def __init__(
        self,
        in_channels,
        out_channels,
        emb_channels,
        up=False,
        down=False,
        attention=False,
        config: ModelConfig = PAPER_CONFIG,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.up = up
        self.down = down
        self.skip_scale = math.sqrt(0.5)
        self.dropout = config.dropout
        stride = (2, 1) if down else (1, 1)
        self.norm0 = group_norm(in_channels)
        self.conv0 = _conv(in_channels, out_channels, 3, stride=stride)
        self.scale_shift = config.noise_injection == "scale_shift"
        self.affine = _linear(emb_channels, (2 if self.scale_shift else 1) * out_channels)
        self.norm1 = group_norm(out_channels)
        self.conv1 = _conv(out_channels, out_channels, 3, gain=1e-5)
        self.skip = None
        if out_channels != in_channels or up or down:
            self.skip = _conv(in_channels, out_channels, 1, stride=stride)
        self.attn = None
        if attention:
            self.attn = DualPathRoFormer(
                out_channels,
                config.attention_heads,
                config.rotary_dim,
                config.rotary_base,
                config.ff_mult,
            )

    def _upsample(self, x):
        return F.interpolate(x, scale_factor=(2, 1), mode="nearest") if self.up else x

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        orig = x
        x = self.conv0(self._upsample(F.silu(self.norm0(x))))
        params = self.affine(emb)[:, :, None, None]
        if self.scale_shift:
            scale, shift = params.chunk(2, dim=1)
            x = F.silu(torch.addcmul(shift, self.norm1(x), scale + 1))
        else:
            x = F.silu(self.norm1(x + params))
        x = F.dropout(x, p=self.dropout, training=self.training)
        x = self.conv1(x)
        skip = orig if self.skip is None else self.skip(self._upsample(orig))
        x = (x + skip) * self.skip_scale
        if self.attn is not None:
            x = self.attn(x)
        return x


class Resample(nn.Module):
    """Frequency-only resampling: stride-(2, 1) conv down, nearest + conv up."""

    def __init__(self, channels: int, down: bool):
        super().__init__()
        self.down = down
        self.out_channels = channels
        self.conv = _conv(channels, channels, 3, stride=(2, 1) if down else (1, 1))

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        if not self.down:
            x = F.interpolate(x, scale_factor=(2, 1), mode="nearest")
        return self.conv(x)


class SpectrogramUNet(nn.Module):
    """``F(input, c_noise)``: ``[B, 2S, F', T] -> [B, S, F', T]``."""

    def __init__(self, config: ModelConfig = PAPER_CONFIG):
        super().__init__()
        self.config = config
        cfg = config
        emb = cfg.emb_channels
        self.embed = NoiseEmbedding(cfg.noise_embed_dim, emb)

        self.enc = nn.ModuleDict()
        cout = cfg.n_input_channels
        for level, mult in enumerate(cfg.channel_multipliers):
            if level == 0:
                self.enc["l0_conv"] = _conv(cout, cfg.base_channels, 3)
                cout = cfg.base_channels
            elif cfg.resample == "block":
                self.enc[f"l{level}_down"] = UNetBlock(cout, cout, emb, down=True, config=cfg)
            else:
                self.enc[f"l{level}_down"] = Resample(cout, down=True)
            for idx in range(cfg.res_blocks_per_level):
                cin, cout = cout, cfg.base_channels * mult
                self.enc[f"l{level}_block{idx}"] = UNetBlock(
                    cin, cout, emb, attention=cfg.encoder_attention, config=cfg
                )
        # with the extra decoder block every encoder output is a skip source,
        # otherwise only the residual blocks are
        self.skip_sources = [
            name for name in self.enc if cfg.decoder_extra_block or "_block" in name
        ]
        skips = [self.enc[name].out_channels for name in self.skip_sources]

        self.dec = nn.ModuleDict()
        n_dec = cfg.res_blocks_per_level + int(cfg.decoder_extra_block)
        for level, mult in reversed(list(enumerate(cfg.channel_multipliers))):
            if level == cfg.levels - 1:
                self.dec[f"l{level}_in0"] = UNetBlock(cout, cout, emb, config=cfg)
                self.dec[f"l{level}_in1"] = UNetBlock(cout, cout, emb, config=cfg)
            elif cfg.resample == "block":
                self.dec[f"l{level}_up"] = UNetBlock(cout, cout, emb, up=True, config=cfg)
            else:
                self.dec[f"l{level}_up"] = Resample(cout, down=False)
            for idx in range(n_dec):
                cin, cout = cout + skips.pop(), cfg.base_channels * mult
                # the final level attends on its last N_r blocks
                attn = cfg.decoder_attention and level == 0 and idx >= n_dec - cfg.res_blocks_per_level
                self.dec[f"l{level}_block{idx}"] = UNetBlock(
                    cin, cout, emb, attention=attn, config=cfg
                )
        self.out_norm = group_norm(cout)
        self.out_conv = _conv(cout, cfg.n_output_channels, 3)
        nn.init.zeros_(self.out_conv.weight)

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor) -> torch.Tensor:
        mult = self.config.freq_multiple
        if x.shape[2] % mult:
            raise ValueError(
                f"frequency size {x.shape[2]} must be a multiple of {mult} for "
                f"{self.config.levels} levels"
            )
        if x.shape[1] != self.config.n_input_channels:
            raise ValueError(
                f"expected {self.config.n_input_channels} input channels, got {x.shape[1]}"
            )
        c_noise = c_noise.reshape(-1).to(x.dtype)
        if c_noise.numel() == 1 and x.shape[0] > 1:
            c_noise = c_noise.expand(x.shape[0])
        emb = self.embed(c_noise)

        skips = []
        for name, block in self.enc.items():
            x = block(x) if name == "l0_conv" else block(x, emb)
            if name in self.skip_sources:
                skips.append(x)
        for name, block in self.dec.items():
            if "_block" in name:
                x = torch.cat([x, skips.pop()], dim=1)
            x = block(x, emb)
        return self.out_conv(F.silu(self.out_norm(x)))

    def attention_blocks(self) -> dict[str, list[str]]:
        """Names of blocks carrying dual-path attention, by encoder/decoder."""
        return {
            part: [n for n, m in modules.items() if getattr(m, "attn", None) is not None]
            for part, modules in (("encoder", self.enc), ("decoder", self.dec))
        }


def build(
    config: ModelConfig = PAPER_CONFIG,
    generator_seed: int = 0,
    device: str | torch.device | None = None,
    dtype: torch.dtype = torch.float32,
) -> SpectrogramUNet:
    """Construct and initialize a network deterministically from ``generator_seed``.

    ``device="meta"`` allocates nothing; useful for counting parameters.
    """
    if device is not None and torch.device(device).type == "meta":
        with torch.device("meta"):
            return SpectrogramUNet(config)
    # torch initializers draw from the global generator; isolate it
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(generator_seed)
        net = SpectrogramUNet(config)
    return net.to(dtype=dtype, device=device)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def parameter_count(config: ModelConfig) -> int:
    """Parameter total without allocating storage."""
    return count_parameters(build(config, device="meta"))


def named_parameter_arrays(net: nn.Module) -> dict[str, np.ndarray]:
    return {n: p.detach().cpu().numpy() for n, p in net.named_parameters()}
