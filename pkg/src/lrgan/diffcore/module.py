"""Parameter containers: a small Module tree with dotted-path naming.

Modules register Parameters and child Modules on attribute assignment.
Dotted names are assigned when the tree is walked, round-trip through
checkpoints, and are unique within a model (shared submodules are yielded
once, under their first path).
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import Parameter, Tensor
from . import ops


class Module:
    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        """Non-trainable state saved with the model (e.g. running statistics)."""
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    # -- traversal ------------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        yield from self._named_parameters(prefix, seen)

    def _named_parameters(self, prefix, seen):
        for name, p in self._parameters.items():
            if id(p) in seen:
                continue
            seen.add(id(p))
            full = f"{prefix}{name}"
            p.name = full
            yield full, p
        for name, child in self._children.items():
            yield from child._named_parameters(f"{prefix}{name}.", seen)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield f"{prefix}{name}", b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    # -- mode and dtype -------------------------------------------------------

    def train(self, flag: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast all parameters and buffers in place (float64 for grad checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    # -- state dict -----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            if name in state:
                raise ValueError(f"duplicate state name {name}")
            state[name] = b
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {}
        for m, prefix in _walk_modules(self, ""):
            for name in m._buffers:
                buffers[f"{prefix}{name}"] = (m, name)
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
                p.data = arr.astype(p.data.dtype)
            elif name in buffers:
                owner, attr = buffers[name]
                owner.register_buffer(attr, arr.astype(owner._buffers[attr].dtype))
            else:
                raise KeyError(f"unknown state entry {name}")
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")


def _walk_modules(module: Module, prefix: str):
    yield module, prefix
    for name, child in module._children.items():
        yield from _walk_modules(child, f"{prefix}{name}.")


# ---------------------------------------------------------------------------
# initializers (DCGAN-style defaults)
# ---------------------------------------------------------------------------

def conv_init(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    return rng.normal(0.0, 0.02, size=shape).astype(dtype)


def bn_gamma_init(rng: np.random.Generator, n: int, dtype=np.float32) -> np.ndarray:
    return rng.normal(1.0, 0.02, size=n).astype(dtype)


def fanin_uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d(Module):
    """4x4-style strided convolution without bias (normalization follows)."""

    def __init__(self, in_channels, out_channels, kernel, stride, padding, rng):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(conv_init(rng, (out_channels, in_channels, kernel, kernel)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride, padding, rng):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(conv_init(rng, (in_channels, out_channels, kernel, kernel)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d_transposed(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, rng, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(bn_gamma_init(rng, channels))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias: bool = True):
        super().__init__()
        self.weight = Parameter(fanin_uniform_init(rng, (out_features, in_features), in_features))
        self.bias = Parameter(fanin_uniform_init(rng, (out_features,), in_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LSTMCell(Module):
    """Single-layer LSTM cell with one shared bias vector."""

    def __init__(self, input_size, hidden_size, rng):
        super().__init__()
        self.hidden_size = hidden_size
        self.w_ih = Parameter(fanin_uniform_init(rng, (4 * hidden_size, input_size), hidden_size))
        self.w_hh = Parameter(fanin_uniform_init(rng, (4 * hidden_size, hidden_size), hidden_size))
        self.bias = Parameter(fanin_uniform_init(rng, (4 * hidden_size,), hidden_size))

    def __call__(self, z: Tensor, h_prev: Tensor, c_prev: Tensor):
        return ops.lstm_cell(z, h_prev, c_prev, self.w_ih, self.w_hh, self.bias)
