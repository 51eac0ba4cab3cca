"""Layered recursive adversarial image generation toolkit.

Subpackages/modules:
  diffcore  - reverse-mode autodiff tensor engine
  stn       - differentiable affine spatial transformer
  datasynth - synthetic one/two-digit dataset construction
  generator - layered recursive generator
  training  - discriminator, losses, optimizer, training loop, checkpoints
  metrics   - evaluation suite (adversarial accuracy/divergence, matching, ...)
  variants  - ablated and conditional model assemblies
  io_utils  - config parsing, PNG grids, run manifests
  cli       - command-line entry points
"""

__version__ = "0.1.0"
