"""U-Net generator, PatchGAN discriminator, VAE, and the model bundle.

All convolutional blocks use 4x4 kernels with stride 2 and padding 1 (the
PatchGAN's last two layers use stride 1), so each encoder block halves the
spatial size exactly and each decoder block doubles it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import functional as F
from .errors import DimensionError, ValidationError
from .optim import AdamState
from .tensor import Rng, Tensor, no_grad, record

MODEL_KINDS = ("pix2pix", "cyclegan", "vae")

_INIT_STD = 0.02


def _default_schedule(base: int, depth: int, cap: int = 8) -> Tuple[int, ...]:
    return tuple(base * min(2**i, cap) for i in range(depth))


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 256
    in_channels: int = 3
    out_channels: int = 3
    depth: int = 8
    channel_schedule: Tuple[int, ...] = (64, 128, 256, 512, 512, 512, 512, 512)

    @classmethod
    def for_size(cls, image_size: int, in_channels: int = 3, out_channels: int = None, base: int = 64):
        """Config whose bottleneck is 1x1, with widths ``base, 2*base, ...`` capped at ``8*base``."""
        depth = int(round(math.log2(image_size)))
        return cls(image_size, in_channels, out_channels or in_channels, depth, _default_schedule(base, depth))

    def validate(self):
        if self.depth < 2:
            raise ValidationError("UNetConfig: depth must be at least 2")
        if len(self.channel_schedule) != self.depth:
            raise ValidationError(
                f"UNetConfig: channel_schedule has {len(self.channel_schedule)} entries for depth {self.depth}"
            )
        if self.image_size % (2**self.depth) != 0:
            raise ValidationError(f"UNetConfig: image_size {self.image_size} not divisible by 2^{self.depth}")


@dataclass(frozen=True)
class PatchGANConfig:
    in_channels: int = 6
    channel_schedule: Tuple[int, ...] = (64, 128, 256, 512)
    strides: Tuple[int, ...] = (2, 2, 2, 1, 1)

    @classmethod
    def with_base(cls, in_channels: int, base: int = 64):
        return cls(in_channels, _default_schedule(base, 4))

    def validate(self):
        if len(self.channel_schedule) != 4 or len(self.strides) != 5:
            raise ValidationError("PatchGANConfig: expects four hidden widths and five strides")

    def output_size(self, image_size: int) -> int:
        size = image_size
        for s in self.strides:
            size = (size + 2 - 4) // s + 1
        return size


@dataclass(frozen=True)
class VAEConfig:
    image_size: int = 256
    in_channels: int = 3
    out_channels: int = 3
    latent_dim: int = 128
    channel_schedule: Tuple[int, ...] = (64, 128, 256, 512, 512, 512)

    @classmethod
    def for_size(cls, image_size: int, in_channels: int = 3, out_channels: int = None, base: int = 64, latent_dim=128):
        return cls(image_size, in_channels, out_channels or in_channels, latent_dim, _default_schedule(base, 6))

    @property
    def bottleneck(self) -> int:
        return self.image_size // 2 ** len(self.channel_schedule)

    @property
    def flatten_width(self) -> int:
        return self.channel_schedule[-1] * self.bottleneck**2

    def validate(self):
        if len(self.channel_schedule) != 6:
            raise ValidationError("VAEConfig: the encoder has exactly six blocks")
        if self.image_size % 64 != 0:
            raise ValidationError(f"VAEConfig: image_size {self.image_size} not divisible by 64")


class Network:
    """Named parameters, BN running statistics, and a forward pass."""

    def __init__(self, prefix: str, rng: Rng):
        self.prefix = prefix
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.bn: Dict[str, F.BatchNormState] = {}
        self._init = rng.stream("weights")

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        full = f"{self.prefix}.{name}"
        if full in self.params:
            raise ValidationError(f"duplicate parameter name {full}")
        t = Tensor(value, requires_grad=True, name=full)
        self.params[full] = t
        return t

    def _conv_weight(self, name, shape):
        return self._add(name, self._init.normal(0.0, _INIT_STD, size=shape))

    def _zeros(self, name, n):
        return self._add(name, np.zeros(n))

    def _batchnorm(self, name, channels):
        self._add(f"{name}.gamma", self._init.normal(1.0, _INIT_STD, size=channels))
        self._zeros(f"{name}.beta", channels)
        full = f"{self.prefix}.{name}"
        state = F.BatchNormState.fresh(channels, dtype=self.params[f"{full}.gamma"].dtype)
        self.buffers[f"{full}.running_mean"] = state.running_mean
        self.buffers[f"{full}.running_var"] = state.running_var
        self.bn[name] = state

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def bnorm(self, x: Tensor, name: str, training: bool) -> Tensor:
        return F.batchnorm2d(x, self.p(f"{name}.gamma"), self.p(f"{name}.beta"), self.bn[name], training)

    def load_buffers(self, arrays: Dict[str, np.ndarray]):
        for key, arr in arrays.items():
            self.buffers[key][...] = arr


class UNetGenerator(Network):
    """Encoder-decoder with mirrored skip connections and a tanh output."""

    def __init__(self, cfg: UNetConfig, rng: Rng, prefix: str = "G"):
        cfg.validate()
        super().__init__(prefix, rng)
        self.cfg = cfg
        ch = cfg.channel_schedule
        d = cfg.depth
        prev = cfg.in_channels
        for i in range(d):
            self._conv_weight(f"enc{i + 1}.weight", (ch[i], prev, 4, 4))
            if i in (0, d - 1):
                self._zeros(f"enc{i + 1}.bias", ch[i])
            else:
                self._batchnorm(f"enc{i + 1}.bn", ch[i])
            prev = ch[i]
        # decoder block j upsamples to the resolution of encoder block d-j
        for j in range(1, d):
            skip = ch[d - 1 - j]
            self._conv_weight(f"dec{j}.weight", (prev, skip, 4, 4))
            self._batchnorm(f"dec{j}.bn", skip)
            prev = 2 * skip
        self._conv_weight("out.weight", (prev, cfg.out_channels, 4, 4))
        self._zeros("out.bias", cfg.out_channels)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        cfg = self.cfg
        if x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"{self.prefix}: expected (N, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}"
            )
        d = cfg.depth
        skips = []
        h = x
        for i in range(1, d + 1):
            bias = self.params.get(f"{self.prefix}.enc{i}.bias")
            h = F.conv2d(h, self.p(f"enc{i}.weight"), bias, stride=2, padding=1)
            if bias is None:
                h = self.bnorm(h, f"enc{i}.bn", training)
            h = F.leaky_relu(h, 0.2)
            skips.append(h)
        for j in range(1, d):
            h = F.conv_transpose2d(h, self.p(f"dec{j}.weight"), None, stride=2, padding=1)
            h = F.relu(self.bnorm(h, f"dec{j}.bn", training))
            h = F.concat_channels(h, skips[d - 1 - j])
        h = F.conv_transpose2d(h, self.p("out.weight"), self.p("out.bias"), stride=2, padding=1)
        return F.tanh(h)


class PatchGANDiscriminator(Network):
    """Five-layer convolutional critic emitting a map of per-patch logits."""

    def __init__(self, cfg: PatchGANConfig, rng: Rng, prefix: str = "D"):
        cfg.validate()
        super().__init__(prefix, rng)
        self.cfg = cfg
        prev = cfg.in_channels
        for i, width in enumerate(cfg.channel_schedule, start=1):
            self._conv_weight(f"conv{i}.weight", (width, prev, 4, 4))
            if i == 1:
                self._zeros("conv1.bias", width)
            else:
                self._batchnorm(f"conv{i}.bn", width)
            prev = width
        self._conv_weight("conv5.weight", (1, prev, 4, 4))
        self._zeros("conv5.bias", 1)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"{self.prefix}: expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        if self.cfg.output_size(x.shape[2]) < 1 or self.cfg.output_size(x.shape[3]) < 1:
            raise DimensionError(f"{self.prefix}: input {x.shape[2]}x{x.shape[3]} too small for five layers")
        h = x
        for i, s in enumerate(self.cfg.strides[:4], start=1):
            bias = self.params.get(f"{self.prefix}.conv{i}.bias")
            h = F.conv2d(h, self.p(f"conv{i}.weight"), bias, stride=s, padding=1)
            if bias is None:
                h = self.bnorm(h, f"conv{i}.bn", training)
            h = F.leaky_relu(h, 0.2)
        return F.conv2d(h, self.p("conv5.weight"), self.p("conv5.bias"), stride=self.cfg.strides[4], padding=1)


class VAEEncoder(Network):
    def __init__(self, cfg: VAEConfig, rng: Rng, prefix: str = "enc"):
        cfg.validate()
        super().__init__(prefix, rng)
        self.cfg = cfg
        prev = cfg.in_channels
        for i, width in enumerate(cfg.channel_schedule, start=1):
            self._conv_weight(f"conv{i}.weight", (width, prev, 4, 4))
            self._batchnorm(f"conv{i}.bn", width)
            prev = width
        for head in ("mu", "logvar"):
            self._conv_weight(f"{head}.weight", (cfg.flatten_width, cfg.latent_dim))
            self._zeros(f"{head}.bias", cfg.latent_dim)

    def __call__(self, x: Tensor, training: bool = True) -> Tuple[Tensor, Tensor]:
        cfg = self.cfg
        if x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"{self.prefix}: expected (N, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}"
            )
        h = x
        for i in range(1, len(cfg.channel_schedule) + 1):
            h = F.conv2d(h, self.p(f"conv{i}.weight"), None, stride=2, padding=1)
            h = F.leaky_relu(self.bnorm(h, f"conv{i}.bn", training), 0.2)
        flat = F.flatten(h)
        mu = F.linear(flat, self.p("mu.weight"), self.p("mu.bias"))
        logvar = F.linear(flat, self.p("logvar.weight"), self.p("logvar.bias"))
        return mu, logvar


class VAEDecoder(Network):
    def __init__(self, cfg: VAEConfig, rng: Rng, prefix: str = "dec"):
        cfg.validate()
        super().__init__(prefix, rng)
        self.cfg = cfg
        self._conv_weight("fc.weight", (cfg.latent_dim, cfg.flatten_width))
        self._zeros("fc.bias", cfg.flatten_width)
        widths = list(reversed(cfg.channel_schedule))
        for i in range(len(widths) - 1):
            self._conv_weight(f"deconv{i + 1}.weight", (widths[i], widths[i + 1], 4, 4))
            self._batchnorm(f"deconv{i + 1}.bn", widths[i + 1])
        self._conv_weight("out.weight", (widths[-1], cfg.out_channels, 4, 4))
        self._zeros("out.bias", cfg.out_channels)

    def start_shape(self) -> Tuple[int, int, int]:
        b = self.cfg.bottleneck
        return (self.cfg.channel_schedule[-1], b, b)

    def __call__(self, z: Tensor, training: bool = True) -> Tensor:
        h = F.linear(z, self.p("fc.weight"), self.p("fc.bias"))
        h = F.reshape(h, (z.shape[0],) + self.start_shape())
        for i in range(1, len(self.cfg.channel_schedule)):
            h = F.conv_transpose2d(h, self.p(f"deconv{i}.weight"), None, stride=2, padding=1)
            h = F.relu(self.bnorm(h, f"deconv{i}.bn", training))
        h = F.conv_transpose2d(h, self.p("out.weight"), self.p("out.bias"), stride=2, padding=1)
        return F.tanh(h)


def build_unet_generator(cfg: UNetConfig, rng: Rng, prefix: str = "G") -> UNetGenerator:
    return UNetGenerator(cfg, rng, prefix)


def build_patchgan_discriminator(cfg: PatchGANConfig, rng: Rng, prefix: str = "D") -> PatchGANDiscriminator:
    return PatchGANDiscriminator(cfg, rng, prefix)


def build_vae(cfg: VAEConfig, rng: Rng) -> Tuple[VAEEncoder, VAEDecoder]:
    return VAEEncoder(cfg, rng), VAEDecoder(cfg, rng)


def reparameterize(mu: Tensor, logvar: Tensor, rng: Optional[np.random.Generator] = None, eps=None) -> Tensor:
    """Draw ``z = mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)``.

    Pass ``eps`` to replay a recorded draw; ``eps=0`` returns ``mu``.
    """
    if mu.shape != logvar.shape:
        raise DimensionError(f"reparameterize: mu {mu.shape} vs logvar {logvar.shape}")
    if eps is None:
        if rng is None:
            raise ValidationError("reparameterize needs either rng or eps")
        eps = rng.standard_normal(mu.shape)
    eps = np.broadcast_to(np.asarray(eps, dtype=mu.dtype), mu.shape)
    std = np.exp(0.5 * logvar.data)
    out = mu.data + std * eps

    def backward(g):
        return g, g * eps * 0.5 * std

    return record("reparameterize", out, (mu, logvar), backward)


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, mean over batch."""
    if mu.shape != logvar.shape:
        raise DimensionError(f"kl_divergence: mu {mu.shape} vs logvar {logvar.shape}")
    n = mu.shape[0] if mu.ndim > 1 else 1
    var = np.exp(logvar.data)
    value = -0.5 * np.sum(1.0 + logvar.data - mu.data**2 - var) / n

    def backward(g):
        return g * mu.data / n, g * 0.5 * (var - 1.0) / n

    return record("kl_divergence", np.asarray(value, dtype=mu.dtype), (mu, logvar), backward)


# -- bundle ------------------------------------------------------------------


@dataclass
class ModelBundle:
    """One trained (or freshly built) model: its networks and configs."""

    kind: str
    image_size: int
    in_channels: int
    base_channels: int
    latent_dim: int
    seed: int
    networks: Dict[str, Network] = field(default_factory=dict, repr=False)
    optimizers: Dict[str, AdamState] = field(default_factory=dict, repr=False)

    @property
    def params(self) -> Dict[str, Tensor]:
        out = {}
        for net in self.networks.values():
            out.update(net.params)
        return out

    @property
    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for net in self.networks.values():
            out.update(net.buffers)
        return out

    def config(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "latent_dim": self.latent_dim,
            "seed": self.seed,
        }

    @property
    def generator(self) -> Optional[UNetGenerator]:
        """The source-to-target generator (None for the VAE)."""
        if self.kind == "vae":
            return None
        return self.networks["G1" if self.kind == "cyclegan" else "G"]

    def translate(self, source: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Map normalized source images (N, C, S, S) to target images, eval mode.

        The VAE decodes from the latent mean, so this is deterministic for
        every kind.
        """
        source = np.asarray(source)
        expect = (self.in_channels, self.image_size, self.image_size)
        if source.ndim != 4 or source.shape[1:] != expect:
            raise DimensionError(f"{self.kind} bundle expects (N, {expect[0]}, {expect[1]}, {expect[2]}), got {source.shape}")
        outs = []
        with no_grad():
            for start in range(0, len(source), batch_size):
                x = Tensor(source[start : start + batch_size])
                if self.kind == "vae":
                    mu, _ = self.networks["enc"](x, training=False)
                    y = self.networks["dec"](mu, training=False)
                else:
                    y = self.generator(x, training=False)
                outs.append(y.data)
        return np.concatenate(outs, axis=0)


def build_bundle(
    kind: str,
    image_size: int = 256,
    in_channels: int = 3,
    base_channels: int = 64,
    latent_dim: int = 128,
    seed: int = 0,
) -> ModelBundle:
    """Build every network of ``kind`` with weights drawn from ``Rng(seed)``."""
    if kind not in MODEL_KINDS:
        raise ValidationError(f"unknown model {kind!r}; supported: {', '.join(MODEL_KINDS)}")
    rng = Rng(seed)
    bundle = ModelBundle(kind, image_size, in_channels, base_channels, latent_dim, seed)
    unet = UNetConfig.for_size(image_size, in_channels, base=base_channels)
    if kind == "pix2pix":
        bundle.networks["G"] = UNetGenerator(unet, rng, "G")
        bundle.networks["D"] = PatchGANDiscriminator(PatchGANConfig.with_base(2 * in_channels, base_channels), rng, "D")
    elif kind == "cyclegan":
        bundle.networks["G1"] = UNetGenerator(unet, rng, "G1")
        bundle.networks["G2"] = UNetGenerator(unet, rng, "G2")
        patch = PatchGANConfig.with_base(in_channels, base_channels)
        bundle.networks["D_T1"] = PatchGANDiscriminator(patch, rng, "D_T1")
        bundle.networks["D_T2"] = PatchGANDiscriminator(patch, rng, "D_T2")
    else:
        cfg = VAEConfig.for_size(image_size, in_channels, base=base_channels, latent_dim=latent_dim)
        bundle.networks["enc"], bundle.networks["dec"] = build_vae(cfg, rng)
    return bundle
