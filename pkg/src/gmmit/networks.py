"""Encoders, generator and discriminator.

Image tensors are channels-first float tensors (N, 3, H, W) with values in
[-1, 1]. The content code is a spatial map (N, 4*base, H/4, W/4); the
attribute code is a flat vector whose length equals the mixture dimension.

The generator is conditioned on the attribute code through adaptive instance
normalization: a two-layer MLP maps the code to per-layer (scale, shift)
pairs for the residual blocks. An optional attention head emits a one-channel
mask used to blend the raw output with the generator input image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
from torch import nn
from torch.nn import functional as F


@dataclass(frozen=True)
class ArchConfig:
    """Network sizes; the defaults follow the full-resolution layout."""

    image_size: int
    code_dim: int
    n_domains: int
    base_channels: int = 64
    ec_blocks: int = 4          # residual blocks in the content encoder
    gen_blocks: int = 4         # AdaIN residual blocks in the generator
    ez_downsamples: int = 4
    disc_downsamples: int = 4
    mlp_hidden: int = 256
    attention: bool = False
    attention_guidance: bool = False
    logvar_clamp: float = 10.0
    no_disent: bool = False

    @property
    def size_divisor(self) -> int:
        return max(4, 2 ** self.ez_downsamples, 2 ** self.disc_downsamples)

    @property
    def content_channels(self) -> int:
        return 4 * self.base_channels

    def validate(self) -> None:
        if self.image_size % self.size_divisor:
            raise ValueError(
                f"image size {self.image_size} must be divisible by {self.size_divisor}")
        if self.image_size // 2 ** self.disc_downsamples < 1:
            raise ValueError("discriminator downsamples below 1x1; reduce depth")


def default_arch(image_size: int, code_dim: int, n_domains: int, **overrides) -> ArchConfig:
    """Full-depth layout, with the reduced-depth variant for <=32px inputs
    (one fewer discriminator stage, three content-encoder residual blocks)."""
    cfg = ArchConfig(image_size=image_size, code_dim=code_dim, n_domains=n_domains)
    if image_size <= 32:
        cfg = replace(cfg, ec_blocks=3, disc_downsamples=3)
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _check_image(x: torch.Tensor, divisor: int) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected an (N, 3, H, W) image batch, got {tuple(x.shape)}")
    if x.shape[2] % divisor or x.shape[3] % divisor:
        raise ValueError(
            f"image spatial size {tuple(x.shape[2:])} must be divisible by {divisor}")


class ResBlockIN(nn.Module):
    """3x3 residual block with instance normalization."""

    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.in1 = nn.InstanceNorm2d(ch, affine=True)
        self.conv2 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.in2 = nn.InstanceNorm2d(ch, affine=True)

    def forward(self, x):
        h = F.relu(self.in1(self.conv1(x)))
        h = self.in2(self.conv2(h))
        return x + h


class ContentEncoder(nn.Module):
    """Image -> spatial content code at 1/4 resolution."""

    def __init__(self, base=64, n_blocks=4, size_divisor=16):
        super().__init__()
        self.size_divisor = size_divisor
        self.out_channels = 4 * base
        self.stem = nn.Sequential(
            nn.Conv2d(3, base, 7, 1, 3), nn.InstanceNorm2d(base, affine=True), nn.ReLU(),
            nn.Conv2d(base, 2 * base, 4, 2, 1), nn.InstanceNorm2d(2 * base, affine=True), nn.ReLU(),
            nn.Conv2d(2 * base, 4 * base, 4, 2, 1), nn.InstanceNorm2d(4 * base, affine=True), nn.ReLU(),
        )
        self.blocks = nn.Sequential(*[ResBlockIN(4 * base) for _ in range(n_blocks)])

    def forward(self, x):
        _check_image(x, self.size_divisor)
        return self.blocks(self.stem(x))


@dataclass
class AttributePosterior:
    """Diagonal Gaussian over attribute codes, one row per image."""

    mean: torch.Tensor
    logvar: torch.Tensor


class AttributeEncoder(nn.Module):
    """Image -> posterior (mean, logvar) over the attribute code."""

    def __init__(self, code_dim, base=64, n_down=4, logvar_clamp=10.0, size_divisor=16):
        super().__init__()
        self.size_divisor = size_divisor
        self.logvar_clamp = logvar_clamp
        layers = [nn.Conv2d(3, base, 7, 1, 3), nn.ReLU()]
        ch = base
        for i in range(n_down):
            nxt = min(4 * base, 2 * ch)
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1), nn.ReLU()]
            ch = nxt
        self.conv = nn.Sequential(*layers)
        self.fc_mean = nn.Linear(ch, code_dim)
        self.fc_logvar = nn.Linear(ch, code_dim)

    def forward(self, x) -> AttributePosterior:
        _check_image(x, self.size_divisor)
        h = self.conv(x).mean(dim=(2, 3))  # global average pooling
        logvar = self.fc_logvar(h).clamp(-self.logvar_clamp, self.logvar_clamp)
        return AttributePosterior(mean=self.fc_mean(h), logvar=logvar)


def attribute_point(posterior: AttributePosterior, mode: str = "mean", rng=None) -> torch.Tensor:
    """Collapse a posterior to a single code.

    ``mean`` returns the posterior mean bit-exactly; ``reparameterized`` draws
    mean + std * eps with eps taken from the supplied numpy generator so that
    all run randomness lives in one stream.
    """
    if mode == "mean":
        return posterior.mean
    if mode == "reparameterized":
        if rng is None:
            raise ValueError("reparameterized sampling needs an rng")
        eps = rng.standard_normal(tuple(posterior.mean.shape))
        eps = torch.as_tensor(eps, dtype=posterior.mean.dtype, device=posterior.mean.device)
        return posterior.mean + torch.exp(0.5 * posterior.logvar) * eps
    raise ValueError(f"unknown attribute point mode {mode!r}")


def adain(x, scale, shift, eps=1e-5):
    """Adaptive instance normalization with per-sample (scale, shift) rows."""
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    xn = (x - mean) / torch.sqrt(var + eps)
    return scale[:, :, None, None] * xn + shift[:, :, None, None]


class LayerNorm2d(nn.Module):
    """Per-sample normalization over (C, H, W) with a per-channel affine."""

    def __init__(self, ch, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(ch))
        self.bias = nn.Parameter(torch.zeros(ch))

    def forward(self, x):
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        var = x.var(dim=(1, 2, 3), unbiased=False, keepdim=True)
        xn = (x - mean) / torch.sqrt(var + self.eps)
        return self.weight[None, :, None, None] * xn + self.bias[None, :, None, None]


class AdaInResBlock(nn.Module):
    """Residual block whose normalizations are style-modulated."""

    def __init__(self, ch):
        super().__init__()
        self.ch = ch
        self.conv1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.conv2 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.n_style_params = 4 * ch  # (scale, shift) for both AdaIN layers

    def forward(self, x, style):
        c = self.ch
        # scales are produced as offsets around 1 so that the block starts
        # close to plain instance normalization
        s1, b1, s2, b2 = style[:, :c], style[:, c:2 * c], style[:, 2 * c:3 * c], style[:, 3 * c:]
        h = F.relu(adain(self.conv1(x), 1.0 + s1, b1))
        h = adain(self.conv2(h), 1.0 + s2, b2)
        return x + h


class UpBlock(nn.Module):
    """2x bilinear upsampling followed by a 5x5 conv, layer norm, ReLU."""

    def __init__(self, ch_in, ch_out):
        super().__init__()
        self.conv = nn.Conv2d(ch_in, ch_out, 5, 1, 2)
        self.norm = LayerNorm2d(ch_out)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.relu(self.norm(self.conv(x)))


class Generator(nn.Module):
    """Content code + attribute code -> image (and optional attention mask)."""

    def __init__(self, code_dim, content_channels, n_blocks=4, mlp_hidden=256,
                 attention=False, guidance_channel=False):
        super().__init__()
        ch = content_channels
        self.blocks = nn.ModuleList([AdaInResBlock(ch) for _ in range(n_blocks)])
        self.up1 = UpBlock(ch, ch // 2)
        self.up2 = UpBlock(ch // 2, ch // 4)
        self.to_img = nn.Conv2d(ch // 4, 3, 7, 1, 3)
        self.attention = attention
        self.guidance_channel = guidance_channel
        if attention:
            mask_in = ch // 4 + (1 if guidance_channel else 0)
            self.to_mask = nn.Conv2d(mask_in, 1, 7, 1, 3)
        self.n_style_params = sum(b.n_style_params for b in self.blocks)
        self.mlp = nn.Sequential(
            nn.Linear(code_dim, mlp_hidden), nn.ReLU(),
            nn.Linear(mlp_hidden, self.n_style_params))

    def forward(self, content, z, guidance=None):
        if content.shape[0] != z.shape[0]:
            raise ValueError(
                f"content batch {content.shape[0]} != attribute batch {z.shape[0]}")
        style = self.mlp(z)
        h = content
        offset = 0
        for block in self.blocks:
            h = block(h, style[:, offset:offset + block.n_style_params])
            offset += block.n_style_params
        feat = self.up2(self.up1(h))
        raw = torch.tanh(self.to_img(feat))
        mask = None
        if self.attention:
            head_in = feat
            if self.guidance_channel and guidance is not None:
                head_in = torch.cat([feat, guidance], dim=1)
            mask = torch.sigmoid(self.to_mask(head_in))
        return raw, mask


class NoDisentGenerator(nn.Module):
    """Ablation generator taking the image itself instead of a content code."""

    def __init__(self, code_dim, base=64, n_blocks=4, mlp_hidden=256,
                 attention=False, size_divisor=16):
        super().__init__()
        self.size_divisor = size_divisor
        self.stem = nn.Sequential(
            nn.Conv2d(3, base, 7, 1, 3), nn.InstanceNorm2d(base, affine=True), nn.ReLU(),
            nn.Conv2d(base, 2 * base, 4, 2, 1), nn.InstanceNorm2d(2 * base, affine=True), nn.ReLU(),
            nn.Conv2d(2 * base, 4 * base, 4, 2, 1), nn.InstanceNorm2d(4 * base, affine=True), nn.ReLU(),
        )
        self.decoder = Generator(code_dim, 4 * base, n_blocks=n_blocks,
                                 mlp_hidden=mlp_hidden, attention=attention)

    def forward(self, x, z, guidance=None):
        _check_image(x, self.size_divisor)
        return self.decoder(self.stem(x), z, guidance=guidance)


@dataclass
class DiscriminatorOutput:
    rf_map: torch.Tensor        # (N, 1, H', W') patch real/fake scores
    domain_logits: torch.Tensor  # (N, n_domains)


class Discriminator(nn.Module):
    """Patch real/fake head plus a full-field domain classification head."""

    def __init__(self, image_size, n_domains, base=64, n_down=4):
        super().__init__()
        if image_size // 2 ** n_down < 1:
            raise ValueError(f"{n_down} downsamplings collapse a {image_size}px input")
        self.image_size = image_size
        layers = []
        ch_in, ch = 3, base
        for i in range(n_down):
            layers += [nn.Conv2d(ch_in, ch, 4, 2, 1), nn.LeakyReLU(0.2)]
            ch_in, ch = ch, 2 * ch
        self.conv = nn.Sequential(*layers)
        self.rf_head = nn.Conv2d(ch_in, 1, 1, 1, 0)
        spatial = image_size // 2 ** n_down
        self.dom_head = nn.Conv2d(ch_in, n_domains, spatial, 1, 0)

    def forward(self, x) -> DiscriminatorOutput:
        if x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise ValueError(
                f"discriminator was built for {self.image_size}px inputs, got {tuple(x.shape[2:])}")
        h = self.conv(x)
        return DiscriminatorOutput(
            rf_map=self.rf_head(h),
            domain_logits=self.dom_head(h).flatten(1))


def compose_attention(a: torch.Tensor, b_raw: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Blend the raw translation into the input image: b_raw * m + a * (1 - m)."""
    if a.shape != b_raw.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b_raw.shape)}")
    if m.shape[0] != a.shape[0] or m.shape[2:] != a.shape[2:] or m.shape[1] != 1:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match images {tuple(a.shape)}")
    return b_raw * m + a * (1.0 - m)


class Networks:
    """The trainable bundle: content/attribute encoders, generator, discriminator."""

    def __init__(self, arch: ArchConfig):
        arch.validate()
        self.arch = arch
        div = arch.size_divisor
        if arch.no_disent:
            self.e_c = None
            self.gen = NoDisentGenerator(
                arch.code_dim, base=arch.base_channels, n_blocks=arch.gen_blocks,
                mlp_hidden=arch.mlp_hidden, attention=arch.attention, size_divisor=div)
        else:
            self.e_c = ContentEncoder(arch.base_channels, arch.ec_blocks, size_divisor=div)
            self.gen = Generator(
                arch.code_dim, arch.content_channels, n_blocks=arch.gen_blocks,
                mlp_hidden=arch.mlp_hidden, attention=arch.attention,
                guidance_channel=arch.attention_guidance)
        self.e_z = AttributeEncoder(
            arch.code_dim, base=arch.base_channels, n_down=arch.ez_downsamples,
            logvar_clamp=arch.logvar_clamp, size_divisor=div)
        self.disc = Discriminator(
            arch.image_size, arch.n_domains, base=arch.base_channels,
            n_down=arch.disc_downsamples)

    def modules(self) -> dict[str, nn.Module]:
        mods = {"e_z": self.e_z, "gen": self.gen, "disc": self.disc}
        if self.e_c is not None:
            mods["e_c"] = self.e_c
        return mods

    def generator_side(self) -> list[nn.Module]:
        side = [self.gen, self.e_z]
        if self.e_c is not None:
            side.append(self.e_c)
        return side

    def translate(self, x, z, guidance=None):
        """Full translation: encode content, decode with z, blend attention."""
        if self.e_c is None:
            raw, mask = self.gen(x, z, guidance=guidance)
        else:
            raw, mask = self.gen(self.e_c(x), z, guidance=guidance)
        return compose_attention(x, raw, mask) if mask is not None else raw

    def to(self, device=None, dtype=None):
        for m in self.modules().values():
            m.to(device=device, dtype=dtype)
        return self

    def train(self, mode=True):
        for m in self.modules().values():
            m.train(mode)
        return self

    def parameters(self):
        for m in self.modules().values():
            yield from m.parameters()


def init_params(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in-scaled Gaussian init; deterministic for a given generator state."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def build_networks(arch: ArchConfig, seed: int) -> Networks:
    nets = Networks(arch)
    g = torch.Generator().manual_seed(seed)
    # fixed order so that the same seed always produces the same weights
    for name in sorted(nets.modules()):
        init_params(nets.modules()[name], g)
    return nets
