"""Layered recursive image generator.

An image is built as a background canvas plus T-1 foreground layers. Each
foreground step runs the shared recurrent machinery: the noise LSTM
advances, a trunk of fractional convolutions predicts a shared feature
cube, separate heads decode the layer's appearance (tanh), its soft shape
mask (sigmoid), and its affine pose (linear head + minimum-scale
constraint), and the layer is pasted onto the image composed so far:

    x_t = warp(m_t) * warp(f_t) + (1 - warp(m_t)) * x_{t-1}

All foreground steps share one parameter set; only the background
generator is separate (at half the channel width).

Architectures are written in compact strings, e.g.
"(256)4c-(128)4c2s-(64)4c2s-(3)4c2s": (channels)<kernel>c[<stride>s],
where stride-2 layers use padding 1 (spatial doubling for fractional
convolutions, halving for discriminator convolutions) and "p" marks an
average-pool stage.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import diffcore as dc
from . import stn
from .diffcore import Module, Tensor
from .errors import ConfigError


# ---------------------------------------------------------------------------
# architecture strings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    channels: int
    kernel: int
    kind: str  # "c" conv / "p" pool
    stride: int

    @property
    def padding(self) -> int:
        return 1 if (self.kind == "c" and self.stride == 2) else 0


_LAYER_RE = re.compile(r"^\((\d+)\)(\d+)([cp])(?:(\d+)s)?$")


def parse_arch(arch: str) -> list[LayerSpec]:
    specs = []
    for token in arch.split("-"):
        if token == "1":  # scalar head marker on discriminator strings
            continue
        m = _LAYER_RE.match(token)
        if not m:
            raise ConfigError(f"cannot parse architecture token {token!r} in {arch!r}")
        channels, kernel, kind, stride = m.groups()
        specs.append(LayerSpec(int(channels), int(kernel), kind, int(stride) if stride else 1))
    return specs


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

VARIANTS = ("full", "no_transform", "no_mask", "conditional")


@dataclass
class ModelConfig:
    dataset: str
    image_size: int
    timesteps: int
    s_min: float
    bg_arch: str
    trunk_arch: str
    disc_arch: str
    appearance_arch: str = "(3)4c2s"
    mask_arch: str = "(1)4c2s"
    z_dim: int = 100
    hidden_dim: int = 100
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {self.timesteps}")
        if self.s_min < 1.0:
            raise ConfigError(f"s_min must be >= 1, got {self.s_min}")

    @property
    def trunk_channels(self) -> int:
        return parse_arch(self.trunk_arch)[-1].channels

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)


_PRESETS = {
    "mnist_one": dict(
        image_size=32, timesteps=2, s_min=1.2,
        bg_arch="(256)4c-(128)4c2s-(64)4c2s-(3)4c2s",
        trunk_arch="(512)4c-(256)4c2s-(128)4c2s",
        disc_arch="(64)4c2s-(128)4c2s-(256)4c2s-(256)4p4s-1"),
    "mnist_two": dict(
        image_size=64, timesteps=3, s_min=2.0,
        bg_arch="(256)4c-(128)4c2s-(64)4c2s-(32)4c2s-(3)4c2s",
        trunk_arch="(512)4c-(256)4c2s-(128)4c2s-(64)4c2s",
        disc_arch="(64)4c2s-(128)4c2s-(256)4c2s-(512)4c2s-(512)4p4s-1"),
    "cifar10": dict(
        image_size=32, timesteps=2, s_min=1.2,
        bg_arch="(256)4c-(128)4c2s-(64)4c2s-(3)4c2s",
        trunk_arch="(512)4c-(256)4c2s-(128)4c2s",
        disc_arch="(64)4c2s-(128)4c2s-(256)4c2s-(256)4p4s-1"),
    "cub200": dict(
        image_size=64, timesteps=2, s_min=1.2,
        bg_arch="(512)4c-(256)4c2s-(128)4c2s-(64)4c2s-(3)4c2s",
        trunk_arch="(1024)4c-(512)4c2s-(256)4c2s-(128)4c2s",
        disc_arch="(128)4c2s-(256)4c2s-(512)4c2s-(1024)4c2s-(1024)4p4s-1"),
}


def preset(dataset: str, **overrides) -> ModelConfig:
    if dataset not in _PRESETS:
        raise ConfigError(f"unknown dataset preset {dataset!r}; expected one of {sorted(_PRESETS)}")
    kwargs = dict(_PRESETS[dataset])
    kwargs.update(overrides)
    return ModelConfig(dataset=dataset, **kwargs)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class DeconvStack(Module):
    """Fractional-convolution tower. Hidden layers get batch-norm + relu;
    the last layer gets the requested output activation (or batch-norm +
    relu too when it feeds further processing, final=None)."""

    def __init__(self, arch: str, in_channels: int, rng, final: Optional[str]):
        super().__init__()
        specs = parse_arch(arch)
        if any(s.kind != "c" for s in specs):
            raise ConfigError(f"pooling stage not allowed in a generator tower: {arch!r}")
        self.final = final
        self.stages = []
        prev = in_channels
        for i, spec in enumerate(specs):
            deconv = dc.ConvTranspose2d(prev, spec.channels, spec.kernel, spec.stride,
                                        spec.padding, rng)
            last = i == len(specs) - 1
            norm = None if (last and final is not None) else dc.BatchNorm2d(spec.channels, rng)
            setattr(self, f"deconv{i}", deconv)
            if norm is not None:
                setattr(self, f"norm{i}", norm)
            self.stages.append((deconv, norm))
            prev = spec.channels
        self.out_channels = prev

    def __call__(self, x: Tensor) -> Tensor:
        for i, (deconv, norm) in enumerate(self.stages):
            x = deconv(x)
            if norm is not None:
                x = dc.relu(norm(x))
            elif self.final == "tanh":
                x = dc.tanh(x)
            elif self.final == "sigmoid":
                x = dc.sigmoid(x)
        return x


# ---------------------------------------------------------------------------
# generator state and per-step records
# ---------------------------------------------------------------------------

@dataclass
class GenState:
    """Recurrent carry: LSTM hidden/cell plus the foreground context
    embedding, which is zero until the first foreground step has run."""
    h_l: Tensor
    c_l: Tensor
    h_f: Tensor
    steps_done: int = 0


@dataclass
class LayerOutput:
    """Everything one timestep produced. The background record only fills
    ``composite``; foreground records carry all intermediates."""
    composite: Tensor
    appearance: Optional[Tensor] = None
    mask: Optional[Tensor] = None
    pose: Optional[Tensor] = None
    appearance_warped: Optional[Tensor] = None
    mask_warped: Optional[Tensor] = None
    trunk: Optional[Tensor] = None
    fused_input: Optional[Tensor] = None

    @property
    def is_background(self) -> bool:
        return self.appearance is None


def compose(x_prev: Tensor, appearance: Tensor, mask: Tensor, pose: Optional[Tensor],
            hard_support: bool = False):
    """Paste a layer onto the canvas (one shared grid warps mask and appearance).

    With ``hard_support`` the soft mask is replaced by the warped all-ones
    support thresholded at 0.5 — pixels come entirely from the layer or
    entirely from the canvas, no blending.
    """
    n, _, h, w = appearance.shape
    if x_prev.shape[0] != n:
        raise dc.DimensionError(f"batch axis mismatch: canvas {x_prev.shape[0]}, layer {n}")
    if pose is not None:
        grid = stn.grid_generate(pose, h, w)
        f_hat = stn.sample_bilinear(appearance, grid)
        m_hat = stn.sample_bilinear(mask, grid) if mask is not None else None
    else:
        f_hat = appearance
        m_hat = mask
    if hard_support:
        if pose is not None:
            ones = dc.constant(np.ones((n, 1, h, w), dtype=appearance.dtype.type))
            support = (stn.sample_bilinear(ones, grid).data > 0.5).astype(appearance.dtype.type)
        else:
            support = np.ones((n, 1, h, w), dtype=appearance.dtype.type)
        m_hat = dc.constant(support)
    composite = m_hat * f_hat + (1.0 - m_hat) * x_prev
    return composite, f_hat, m_hat


class LayeredGenerator(Module):
    """Background generator + recurrent foreground generator + compositor."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        hd = config.hidden_dim
        self.lstm = dc.LSTMCell(config.z_dim, hd, rng)
        self.background = DeconvStack(config.bg_arch, hd, rng, final="tanh")
        self.trunk = DeconvStack(config.trunk_arch, hd, rng, final=None)
        self.appearance_head = DeconvStack(config.appearance_arch,
                                           self.trunk.out_channels, rng, final="tanh")
        if config.variant != "no_mask":
            self.mask_head = DeconvStack(config.mask_arch,
                                         self.trunk.out_channels, rng, final="sigmoid")
        if config.variant != "no_transform":
            self.pose_head = dc.Linear(hd, 6, rng)
        self.context_embed = dc.Linear(self.trunk.out_channels, hd, rng)
        if config.timesteps >= 3:
            self.fuse = dc.Linear(2 * hd, hd, rng)

    # -- steps -----------------------------------------------------------

    def init_state(self, n: int, dtype=np.float32) -> GenState:
        hd = self.config.hidden_dim
        zero = lambda: dc.constant(np.zeros((n, hd), dtype=dtype))
        return GenState(h_l=zero(), c_l=zero(), h_f=zero())

    def background_step(self, z0: Tensor) -> tuple[Tensor, GenState]:
        """Run the LSTM on z_0 and decode its hidden state into the canvas."""
        n = z0.shape[0]
        state = self.init_state(n, dtype=z0.dtype.type)
        h, c = self.lstm(z0, state.h_l, state.c_l)
        x0 = self.background(h.reshape(n, self.config.hidden_dim, 1, 1))
        return x0, GenState(h_l=h, c_l=c, h_f=state.h_f, steps_done=1)

    def foreground_step(self, z_t: Tensor, state: GenState, x_prev: Tensor) -> tuple[LayerOutput, GenState]:
        if state.steps_done < 1:
            raise dc.GraphError("foreground_step before background_step: state not initialized")
        cfg = self.config
        n = z_t.shape[0]
        h, c = self.lstm(z_t, state.h_l, state.c_l)
        if state.steps_done == 1:
            y = h
        else:
            y = dc.leaky_relu(self.fuse(dc.concat([h, state.h_f], axis=1)), 0.2)
        s = self.trunk(y.reshape(n, cfg.hidden_dim, 1, 1))
        appearance = self.appearance_head(s)
        mask = self.mask_head(s) if cfg.variant != "no_mask" else None
        pose = None
        if cfg.variant != "no_transform":
            pose = stn.constrain_pose(self.pose_head(y), cfg.s_min)
        if state.steps_done + 1 < cfg.timesteps:
            # context embedding of this layer's features, consumed by the
            # next foreground step; dead weight on the final step
            h_f = self.context_embed(s.mean(axis=(2, 3)))
        else:
            h_f = state.h_f
        composite, f_hat, m_hat = compose(
            x_prev, appearance, mask, pose, hard_support=(cfg.variant == "no_mask"))
        record = LayerOutput(composite=composite, appearance=appearance, mask=mask,
                             pose=pose, appearance_warped=f_hat, mask_warped=m_hat,
                             trunk=s, fused_input=y)
        return record, GenState(h_l=h, c_l=c, h_f=h_f, steps_done=state.steps_done + 1)

    def generate(self, z_list: list[Tensor]) -> list[LayerOutput]:
        """Full unroll: background from z_0 then one layer per remaining z.

        Returns one record per timestep; index 0 is the background record.
        """
        if len(z_list) != self.config.timesteps:
            raise ConfigError(
                f"expected {self.config.timesteps} noise vectors, got {len(z_list)}")
        x0, state = self.background_step(z_list[0])
        records = [LayerOutput(composite=x0)]
        for z_t in z_list[1:]:
            record, state = self.foreground_step(z_t, state, records[-1].composite)
            records.append(record)
        return records

    def sample_z(self, rng: np.random.Generator, n: int, dtype=np.float32) -> list[Tensor]:
        return [dc.constant(rng.standard_normal((n, self.config.z_dim)).astype(dtype))
                for _ in range(self.config.timesteps)]


class DcganBaseline(Module):
    """Single-shot generator at the foreground channel widths (the model the
    layered generator reduces to with one timestep and no recurrence)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        arch = config.trunk_arch + "-" + config.appearance_arch
        self.tower = DeconvStack(arch, config.z_dim, rng, final="tanh")
        self.z_dim = config.z_dim

    def __call__(self, z: Tensor) -> Tensor:
        n = z.shape[0]
        return self.tower(z.reshape(n, self.z_dim, 1, 1))
