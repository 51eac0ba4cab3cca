"""Adversarial training: discriminator, losses, optimizer, loop, checkpoints.

The loop is deliberately rigid about determinism: model initialization,
noise draws, and per-epoch shuffles all come from generators derived from
the run seed, the optimizer and batch-norm buffers travel inside
checkpoints, and the step RNG state is serialized verbatim, so a resumed
run is bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Tensor
from .errors import ConfigError, TrainingDiverged
from .generator import LayeredGenerator, ModelConfig, parse_arch, preset

LOG_EPS = 1e-7
CHECKPOINT_MAGIC = b"LRCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

class ConvTrunk(Module):
    """Strided conv stack with batch norm on every block except the first
    and leaky-relu 0.2 throughout, ending in an average pool. The shared
    body of the discriminator, the evaluation classifier, and the
    conditional encoder."""

    def __init__(self, arch: str, rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        specs = parse_arch(arch)
        conv_specs = [s for s in specs if s.kind == "c"]
        pool_specs = [s for s in specs if s.kind == "p"]
        if len(pool_specs) != 1:
            raise ConfigError(f"trunk arch needs exactly one pool stage: {arch!r}")
        pool = pool_specs[0]
        if pool.channels != conv_specs[-1].channels:
            raise ConfigError(
                f"pool stage channels {pool.channels} != last conv channels {conv_specs[-1].channels}")
        self.pool_kernel = pool.kernel
        self.pool_stride = pool.stride
        self.stages = []
        prev = in_channels
        for i, spec in enumerate(conv_specs):
            conv = dc.Conv2d(prev, spec.channels, spec.kernel, spec.stride, spec.padding, rng)
            norm = dc.BatchNorm2d(spec.channels, rng) if i > 0 else None
            setattr(self, f"conv{i}", conv)
            if norm is not None:
                setattr(self, f"norm{i}", norm)
            self.stages.append((conv, norm))
            prev = spec.channels
        self.feature_channels = prev

    def features(self, x: Tensor) -> Tensor:
        """Activations of the last convolutional block, shape (N, C, h, w)."""
        for conv, norm in self.stages:
            x = conv(x)
            if norm is not None:
                x = norm(x)
            x = dc.leaky_relu(x, 0.2)
        return x

    def __call__(self, x: Tensor) -> Tensor:
        """Pooled feature vector, shape (N, feature_channels)."""
        feat = self.features(x)
        pooled = dc.avg_pool(feat, self.pool_kernel, self.pool_stride)
        return pooled.reshape(pooled.shape[0], self.feature_channels)


class Discriminator(Module):
    """Conv trunk plus a scalar sigmoid head; output strictly in (0, 1)."""

    def __init__(self, arch: str, rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        self.trunk = ConvTrunk(arch, rng, in_channels)
        self.feature_channels = self.trunk.feature_channels
        self.head = dc.Linear(self.feature_channels, 1, rng)

    def features(self, x: Tensor) -> Tensor:
        return self.trunk.features(x)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.sigmoid(self.head(self.trunk(x)))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    dr = dc.clamp(d_real, LOG_EPS, 1.0 - LOG_EPS)
    df = dc.clamp(d_fake, LOG_EPS, 1.0 - LOG_EPS)
    return -(dc.log(dr).mean()) - dc.log(1.0 - df).mean()


def generator_loss(d_fake: Tensor, saturating: bool = False) -> Tensor:
    df = dc.clamp(d_fake, LOG_EPS, 1.0 - LOG_EPS)
    if saturating:
        # the literal minmax term; kept for study, not used by default
        return dc.log(1.0 - df).mean()
    return -(dc.log(df).mean())


def gan_losses(d_real: Tensor, d_fake: Tensor, saturating: bool = False):
    """Both loss values for a shared pair of discriminator outputs."""
    return discriminator_loss(d_real, d_fake), generator_loss(d_fake, saturating)


def reconstruction_loss(x_input: Tensor, x_recon: Tensor) -> Tensor:
    diff = x_recon - x_input
    return (diff * diff).mean()


def conditional_losses(x_input: Tensor, x_recon: Tensor, d_fake: Tensor,
                       lambda_rec: float, saturating: bool = False) -> Tensor:
    """Adversarial term plus weighted reconstruction penalty."""
    return generator_loss(d_fake, saturating) + lambda_rec * reconstruction_loss(x_input, x_recon)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr: float = 2e-4, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = np.sqrt(v / bc2)
            update += self.eps
            np.divide(m / bc1, update, out=update)
            update *= self.lr
            p.data = p.data - update

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.float32)}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"{prefix}.m.{p.name}"] = m
            out[f"{prefix}.v.{p.name}"] = v
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = arrays[f"{prefix}.m.{p.name}"].astype(np.float32)
            self.v[i] = arrays[f"{prefix}.v.{p.name}"].astype(np.float32)


# ---------------------------------------------------------------------------
# train configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    dataset: str = "mnist_one"
    variant: str = "full"
    batch_size: int = 64
    epochs: int = 20
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    sample_count: int = 0        # cap on training set size; 0 keeps everything
    checkpoint_every: int = 0    # steps between checkpoints; 0 = each epoch
    grid_every: int = 1          # epochs between sample-grid dumps; 0 = never
    saturating_loss: bool = False
    s_min: float = 0.0           # 0 = preset default
    lambda_rec: float = 10.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")
        for name in ("epochs", "lr", "beta1", "beta2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_kv(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, val in kv.items():
            if key not in by_name:
                raise ConfigError(f"unknown train config key {key!r}")
            ftype = by_name[key].type
            try:
                if ftype in ("bool", bool):
                    kwargs[key] = val in ("True", "true", "1")
                elif ftype in ("int", int):
                    kwargs[key] = int(val)
                elif ftype in ("float", float):
                    kwargs[key] = float(val)
                else:
                    kwargs[key] = val
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r}: {val!r} ({e})") from e
        return cls(**kwargs)

    def model_config(self) -> ModelConfig:
        overrides = {"variant": self.variant}
        if self.s_min > 0:
            overrides["s_min"] = self.s_min
        return preset(self.dataset, **overrides)


@dataclass
class StepReport:
    loss_d: float
    loss_g: float
    d_real_mean: float
    d_fake_mean: float


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------

def train_step(batch_real: np.ndarray, gen: LayeredGenerator, disc: Discriminator,
               opt_g: Adam, opt_d: Adam, rng: np.random.Generator,
               saturating: bool = False) -> StepReport:
    """One discriminator update on (real, fresh fakes), then one generator
    update on fresh fakes. Raises TrainingDiverged on non-finite losses."""
    n = batch_real.shape[0]
    if n < 2:
        raise ConfigError("train_step needs batch size >= 2")
    real = dc.constant(batch_real)

    # discriminator phase: fakes are sampled without taping the generator
    dc.reset_graph()
    with dc.no_grad():
        fake = gen.generate(gen.sample_z(rng, n))[-1].composite
    d_real = disc(real)
    d_fake = disc(fake.detach())
    loss_d = discriminator_loss(d_real, d_fake)
    _check_finite(loss_d, "discriminator", d_real, d_fake)
    dc.backward(loss_d)
    opt_d.step()
    opt_d.zero_grad()

    # generator phase: fresh noise, gradients flow through the whole stack;
    # discriminator weights stay frozen so their grads are never computed
    dc.reset_graph()
    disc_params = disc.parameters()
    for p in disc_params:
        p.requires_grad = False
    try:
        fake2 = gen.generate(gen.sample_z(rng, n))[-1].composite
        d_fake2 = disc(fake2)
        loss_g = generator_loss(d_fake2, saturating)
        _check_finite(loss_g, "generator", d_real, d_fake2)
        dc.backward(loss_g)
    finally:
        for p in disc_params:
            p.requires_grad = True
    opt_g.step()
    opt_g.zero_grad()
    dc.reset_graph()

    return StepReport(loss_d=loss_d.item(), loss_g=loss_g.item(),
                      d_real_mean=float(d_real.data.mean()),
                      d_fake_mean=float(d_fake.data.mean()))


def _check_finite(loss: Tensor, which: str, d_real: Tensor, d_fake: Tensor) -> None:
    if np.isfinite(loss.data).all():
        return
    raise TrainingDiverged(
        f"non-finite {which} loss",
        diagnostics={
            "loss": float(loss.data.reshape(())),
            "phase": which,
            "d_real_mean": float(d_real.data.mean()),
            "d_fake_mean": float(d_fake.data.mean()),
        })


# ---------------------------------------------------------------------------
# checkpoint format (LRCK)
# ---------------------------------------------------------------------------

def _write_kv_block(f, kv: dict[str, str]) -> None:
    blob = "".join(f"{k}={v}\n" for k, v in kv.items()).encode("utf-8")
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)


def _read_kv_block(raw: bytes, off: int):
    (length,) = struct.unpack_from("<I", raw, off)
    off += 4
    text = raw[off:off + length].decode("utf-8")
    off += length
    kv = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, val = line.partition("=")
        kv[key] = val
    return kv, off

def _write_tensor_table(f, arrays: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        a = np.ascontiguousarray(arr, dtype="<f4")
        f.write(struct.pack("<B", a.ndim))
        for d in a.shape:
            f.write(struct.pack("<I", d))
        f.write(a.tobytes())


def _read_tensor_table(raw: bytes, off: int):
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        rank = raw[off]
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        size = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(raw, "<f4", size, off).reshape(dims).copy()
        off += 4 * size
    return arrays, off


def save_checkpoint(path, kv: dict[str, str], model_arrays: dict[str, np.ndarray],
                    opt_arrays: dict[str, np.ndarray], rng: np.random.Generator) -> None:
    state_blob = json.dumps(rng.bit_generator.state).encode("utf-8")
    alg = rng.bit_generator.state["bit_generator"].encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_kv_block(f, kv)
        _write_tensor_table(f, model_arrays)
        _write_tensor_table(f, opt_arrays)
        f.write(struct.pack("<H", len(alg)))
        f.write(alg)
        f.write(struct.pack("<I", len(state_blob)))
        f.write(state_blob)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    kv, off = _read_kv_block(raw, 8)
    model_arrays, off = _read_tensor_table(raw, off)
    opt_arrays, off = _read_tensor_table(raw, off)
    (alen,) = struct.unpack_from("<H", raw, off)
    off += 2
    algorithm = raw[off:off + alen].decode("utf-8")
    off += alen
    (slen,) = struct.unpack_from("<I", raw, off)
    off += 4
    rng_state = json.loads(raw[off:off + slen].decode("utf-8"))
    if rng_state.get("bit_generator") != algorithm:
        raise ConfigError(f"{path}: RNG algorithm mismatch")
    return kv, model_arrays, opt_arrays, rng_state


# ---------------------------------------------------------------------------
# full training run
# ---------------------------------------------------------------------------

def build_models(model_config: ModelConfig, seed: int):
    """Generator/discriminator with init streams derived from the run seed."""
    gen = LayeredGenerator(model_config, np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(0,))))
    disc = Discriminator(model_config.disc_arch, np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(1,))))
    # walk once so every parameter carries its dotted name
    list(gen.named_parameters())
    list(disc.named_parameters())
    return gen, disc


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3, epoch)))
    return rng.permutation(n)


def _model_state(gen: Module, disc: Module) -> dict[str, np.ndarray]:
    out = {}
    for prefix, model in (("gen", gen), ("disc", disc)):
        for name, arr in model.state_arrays().items():
            out[f"{prefix}.{name}"] = arr
    return out


def _load_model_state(gen: Module, disc: Module, arrays: dict[str, np.ndarray]) -> None:
    gen.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("gen.")})
    disc.load_state_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("disc.")})


class TrainRun:
    """Owns models, optimizers, RNG, and progress for one training run."""

    def __init__(self, images: np.ndarray, config: TrainConfig,
                 model_config: Optional[ModelConfig] = None):
        if config.sample_count:
            images = images[:config.sample_count]
        if len(images) < config.batch_size:
            raise ConfigError(
                f"dataset of {len(images)} images smaller than one batch ({config.batch_size})")
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.config = config
        self.model_config = model_config or config.model_config()
        self.gen, self.disc = build_models(self.model_config, config.seed)
        self.opt_g = Adam(self.gen.parameters(), config.lr, (config.beta1, config.beta2))
        self.opt_d = Adam(self.disc.parameters(), config.lr, (config.beta1, config.beta2))
        self.rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(2,)))
        self.epoch = 0
        self.step_in_epoch = 0
        self.global_step = 0

    @property
    def steps_per_epoch(self) -> int:
        return len(self.images) // self.config.batch_size

    def batches_for_epoch(self, epoch: int) -> np.ndarray:
        perm = _epoch_permutation(self.config.seed, epoch, len(self.images))
        usable = self.steps_per_epoch * self.config.batch_size
        return perm[:usable].reshape(self.steps_per_epoch, self.config.batch_size)

    def one_step(self, batch_indices: np.ndarray) -> StepReport:
        report = train_step(self.images[batch_indices], self.gen, self.disc,
                            self.opt_g, self.opt_d, self.rng,
                            saturating=self.config.saturating_loss)
        self.step_in_epoch += 1
        self.global_step += 1
        return report

    # -- checkpointing ---------------------------------------------------

    def progress_kv(self) -> dict[str, str]:
        kv = {f"train.{k}": v for k, v in self.config.to_kv().items()}
        kv["progress.epoch"] = str(self.epoch)
        kv["progress.step_in_epoch"] = str(self.step_in_epoch)
        kv["progress.global_step"] = str(self.global_step)
        return kv

    def save(self, path) -> None:
        opt_arrays = {}
        opt_arrays.update(self.opt_g.state_arrays("g"))
        opt_arrays.update(self.opt_d.state_arrays("d"))
        save_checkpoint(path, self.progress_kv(), _model_state(self.gen, self.disc),
                        opt_arrays, self.rng)

    def restore(self, path) -> None:
        kv, model_arrays, opt_arrays, rng_state = load_checkpoint(path)
        saved = TrainConfig.from_kv(
            {k[6:]: v for k, v in kv.items() if k.startswith("train.")})
        if saved.dataset != self.config.dataset or saved.variant != self.config.variant:
            raise ConfigError(
                f"checkpoint was trained on {saved.dataset}/{saved.variant}, "
                f"run requests {self.config.dataset}/{self.config.variant}")
        _load_model_state(self.gen, self.disc, model_arrays)
        self.opt_g.load_state_arrays("g", opt_arrays)
        self.opt_d.load_state_arrays("d", opt_arrays)
        self.rng.bit_generator.state = rng_state
        self.epoch = int(kv["progress.epoch"])
        self.step_in_epoch = int(kv["progress.step_in_epoch"])
        self.global_step = int(kv["progress.global_step"])

    # -- sampling --------------------------------------------------------

    def sample_records(self, n: int, tag: int = 0):
        """Deterministic preview generation that leaves the step RNG alone."""
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.config.seed, spawn_key=(4, tag)))
        self.gen.eval()
        try:
            with dc.no_grad():
                records = self.gen.generate(self.gen.sample_z(rng, n))
        finally:
            self.gen.train()
        dc.reset_graph()
        return records


def train(images: np.ndarray, config: TrainConfig, out_dir,
          model_config: Optional[ModelConfig] = None, resume=None,
          on_epoch=None) -> dict:
    """Epoch loop with seeded shuffling, periodic checkpoints, and a metric log.

    Returns a summary dict; artifacts land in ``out_dir`` (checkpoint.lrck,
    metrics.csv, sample grids when the grid callback is installed).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = TrainRun(images, config, model_config)
    if resume is not None:
        run.restore(resume)
        if run.step_in_epoch >= run.steps_per_epoch:
            run.epoch += 1
            run.step_in_epoch = 0

    metrics_path = out / "metrics.csv"
    if not metrics_path.exists():
        metrics_path.write_text("epoch,step,loss_d,loss_g,d_real,d_fake,seconds\n")

    ckpt_path = out / "checkpoint.lrck"
    try:
        while run.epoch < config.epochs:
            batches = run.batches_for_epoch(run.epoch)
            epoch_t0 = time.time()
            with metrics_path.open("a") as log:
                for bi in range(run.step_in_epoch, len(batches)):
                    report = run.one_step(batches[bi])
                    log.write(f"{run.epoch},{run.global_step},{report.loss_d:.6f},"
                              f"{report.loss_g:.6f},{report.d_real_mean:.6f},"
                              f"{report.d_fake_mean:.6f},{time.time() - epoch_t0:.2f}\n")
                    if config.checkpoint_every and run.global_step % config.checkpoint_every == 0:
                        run.save(ckpt_path)
            run.save(ckpt_path)
            if on_epoch is not None:
                on_epoch(run)
            run.epoch += 1
            run.step_in_epoch = 0
    except TrainingDiverged as e:
        dump = out / "divergence.json"
        dump.write_text(json.dumps({"step": run.global_step, "epoch": run.epoch,
                                    **e.diagnostics}, indent=2))
        raise
    return {"epochs": run.epoch, "global_step": run.global_step,
            "checkpoint": str(ckpt_path), "metrics": str(metrics_path)}
