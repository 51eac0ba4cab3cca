"""Ablated and conditional model assemblies.

Three departures from the full model:

  no_transform - the pose head is removed entirely and layers paste
                 untransformed (the canvas-sized appearance and mask are
                 used as-is).
  no_mask      - the mask head is removed; the warped appearance is pasted
                 over the canvas under a hard thresholded support, so every
                 output pixel comes entirely from one source.
  conditional  - an encoder replaces the noise inputs: the input image
                 embeds to z_0, and at each foreground step the residual
                 (input minus canvas so far) embeds to z_t. Training adds
                 a reconstruction penalty to the adversarial loss.

Everything else (LSTM, trunk, heads, compositor) is the shared generator
code path; only input wiring and composition differ.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Tensor
from .errors import ConfigError
from .generator import GenState, LayerOutput, LayeredGenerator, ModelConfig
from .training import (Adam, ConvTrunk, Discriminator, conditional_losses,
                       discriminator_loss, reconstruction_loss)


class Encoder(Module):
    """Mirror of the discriminator conv stack ending in an embedding."""

    def __init__(self, disc_arch: str, embed_dim: int, rng: np.random.Generator,
                 in_channels: int = 3):
        super().__init__()
        self.trunk = ConvTrunk(disc_arch, rng, in_channels)
        self.proj = dc.Linear(self.trunk.feature_channels, embed_dim, rng)
        self.embed_dim = embed_dim

    def __call__(self, image: Tensor) -> Tensor:
        return self.proj(self.trunk(image))


def encode(image: Tensor, encoder: Encoder) -> Tensor:
    """Deterministic embedding of an image batch (replaces a noise draw)."""
    out = encoder(image)
    if out.shape[1] != encoder.embed_dim:
        raise ConfigError(f"encoder produced dim {out.shape[1]}, expected {encoder.embed_dim}")
    return out


@dataclass
class VariantSpec:
    kind: str  # full | no_transform | no_mask | conditional
    base: ModelConfig
    lambda_rec: float = 10.0

    def __post_init__(self):
        if self.kind not in ("full", "no_transform", "no_mask", "conditional"):
            raise ConfigError(f"unknown variant kind {self.kind!r}")
        if self.kind == "conditional" and self.lambda_rec < 0:
            raise ConfigError("lambda_rec must be nonnegative")


@dataclass
class VariantAssembly:
    spec: VariantSpec
    generator: LayeredGenerator
    encoder: Optional[Encoder] = None


def build_variant(spec: VariantSpec, seed: int = 0) -> VariantAssembly:
    """Instantiate the generator (and encoder, for conditional mode)."""
    config = spec.base.with_variant(spec.kind)
    gen = LayeredGenerator(config, np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(0,))))
    list(gen.named_parameters())
    encoder = None
    if spec.kind == "conditional":
        encoder = Encoder(config.disc_arch, config.z_dim, np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(5,))))
        list(encoder.named_parameters())
    return VariantAssembly(spec=spec, generator=gen, encoder=encoder)


def conditional_generate(gen: LayeredGenerator, encoder: Encoder,
                         x_input: Tensor) -> list[LayerOutput]:
    """Reconstruction-mode unroll: embeddings of the input image and of the
    running residual replace the noise vectors."""
    z0 = encode(x_input, encoder)
    x0, state = gen.background_step(z0)
    records = [LayerOutput(composite=x0)]
    for _ in range(gen.config.timesteps - 1):
        residual = x_input - records[-1].composite
        z_t = encode(residual, encoder)
        record, state = gen.foreground_step(z_t, state, records[-1].composite)
        records.append(record)
    return records


def conditional_train_step(batch: np.ndarray, assembly: VariantAssembly,
                           disc: Discriminator, opt_g: Adam, opt_d: Adam) -> dict:
    """One adversarial + reconstruction update of the conditional assembly.

    opt_g must own both generator and encoder parameters. Returns scalar
    diagnostics including the reconstruction error.
    """
    gen, encoder = assembly.generator, assembly.encoder
    x_input = dc.constant(batch)

    dc.reset_graph()
    with dc.no_grad():
        fake = conditional_generate(gen, encoder, x_input)[-1].composite
    d_real = disc(x_input)
    d_fake = disc(fake.detach())
    loss_d = discriminator_loss(d_real, d_fake)
    dc.backward(loss_d)
    opt_d.step()
    opt_d.zero_grad()

    dc.reset_graph()
    disc_params = disc.parameters()
    for p in disc_params:
        p.requires_grad = False
    try:
        recon = conditional_generate(gen, encoder, x_input)[-1].composite
        d_fake2 = disc(recon)
        loss_g = conditional_losses(x_input, recon, d_fake2, assembly.spec.lambda_rec)
        dc.backward(loss_g)
    finally:
        for p in disc_params:
            p.requires_grad = True
    opt_g.step()
    opt_g.zero_grad()
    mse = float(((recon.data - batch) ** 2).mean())
    dc.reset_graph()
    return {"loss_d": loss_d.item(), "loss_g": loss_g.item(), "recon_mse": mse}


def overfit_single_image(image: np.ndarray, base: ModelConfig, steps: int,
                         lambda_rec: float = 1000.0, lr: float = 1e-3,
                         seed: int = 0) -> list[float]:
    """Drive the conditional assembly to reconstruct one image.

    The image is duplicated to a batch of two (batch norm needs company).
    Returns the reconstruction MSE trace.
    """
    spec = VariantSpec(kind="conditional", base=base, lambda_rec=lambda_rec)
    assembly = build_variant(spec, seed=seed)
    disc = Discriminator(base.disc_arch, np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(6,))))
    list(disc.named_parameters())
    opt_g = Adam(assembly.generator.parameters() + assembly.encoder.parameters(), lr)
    opt_d = Adam(disc.parameters(), lr)
    batch = np.stack([image, image]).astype(np.float32)
    trace = []
    for _ in range(steps):
        report = conditional_train_step(batch, assembly, disc, opt_g, opt_d)
        trace.append(report["recon_mse"])
    return trace
