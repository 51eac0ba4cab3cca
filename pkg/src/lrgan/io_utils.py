"""Config files, PNG grids, folder loaders, and run manifests."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .generator import ModelConfig, preset
from .training import TrainConfig


# ---------------------------------------------------------------------------
# PNG grids
# ---------------------------------------------------------------------------

SEPARATOR_PX = 2


def to_uint8(images: np.ndarray) -> np.ndarray:
    """[-1, 1] floats to 8-bit, linear map with rounding."""
    return np.clip(np.round((images + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / 127.5 - 1.0


def write_png_grid(images: np.ndarray, cols: int, path) -> None:
    """Tile an (N, C, H, W) batch row-major with 2 px black separators.

    Single-channel images are replicated to gray RGB. Values are expected
    in [-1, 1] and map linearly onto [0, 255].
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ConfigError(f"expected (N, C, H, W) images, got shape {images.shape}")
    n, c, h, w = images.shape
    if c == 1:
        images = np.repeat(images, 3, axis=1)
    elif c != 3:
        raise ConfigError(f"expected 1 or 3 channels, got {c}")
    rows = (n + cols - 1) // cols
    canvas_h = rows * h + (rows - 1) * SEPARATOR_PX
    canvas_w = cols * w + (cols - 1) * SEPARATOR_PX
    canvas = np.zeros((canvas_h, canvas_w, 3), dtype=np.uint8)
    tiles = to_uint8(images).transpose(0, 2, 3, 1)
    for i in range(n):
        r, col = divmod(i, cols)
        y = r * (h + SEPARATOR_PX)
        x = col * (w + SEPARATOR_PX)
        canvas[y:y + h, x:x + w] = tiles[i]
    try:
        Image.fromarray(canvas).save(path)
    except OSError as e:
        raise DataError(f"cannot write grid {path}: {e}") from e


def read_png(path) -> np.ndarray:
    """One PNG as (3, H, W) float32 in [-1, 1]."""
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return from_uint8(rgb).transpose(2, 0, 1)


def load_png_folder(folder, size: int) -> np.ndarray:
    """Generic real-photo loader: every PNG in a directory, bilinearly
    resized to (size, size), stacked as (N, 3, size, size) in [-1, 1]."""
    folder = Path(folder)
    paths = sorted(folder.glob("*.png"))
    if not paths:
        raise DataError(f"no .png files under {folder}")
    out = []
    for p in paths:
        try:
            with Image.open(p) as im:
                rgb = im.convert("RGB").resize((size, size), Image.BILINEAR)
                out.append(from_uint8(np.asarray(rgb)).transpose(2, 0, 1))
        except OSError as e:
            raise DataError(f"cannot read image {p}: {e}") from e
    return np.stack(out)


# ---------------------------------------------------------------------------
# config files: [model] / [train] / [data] sections, key=value lines
# ---------------------------------------------------------------------------

_SECTIONS = ("model", "train", "data")

_MODEL_KEYS = {
    "dataset": str, "image_size": int, "timesteps": int, "s_min": float,
    "variant": str, "z_dim": int, "hidden_dim": int,
}
_DATA_KEYS = {"digits": str, "cache": str}


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {s: {} for s in _SECTIONS}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            current = name
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]: {line!r}")
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = value.strip()
    return sections


def load_config(path) -> tuple[ModelConfig, TrainConfig, dict[str, str]]:
    """Parse and validate a run config. Unknown keys are errors."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    sections = parse_config_text(text)

    train_kv = dict(sections["train"])
    model_kv = dict(sections["model"])
    # dataset can live in either section; [train] wins for the run record
    if "dataset" in model_kv and "dataset" not in train_kv:
        train_kv["dataset"] = model_kv["dataset"]
    train_config = TrainConfig.from_kv(train_kv)

    overrides = {}
    for key, value in model_kv.items():
        if key == "dataset":
            continue
        if key not in _MODEL_KEYS:
            raise ConfigError(f"unknown model config key {key!r}")
        overrides[key] = _MODEL_KEYS[key](value)
    if train_config.variant != "full" and "variant" not in overrides:
        overrides["variant"] = train_config.variant
    if train_config.s_min > 0 and "s_min" not in overrides:
        overrides["s_min"] = train_config.s_min
    model_config = preset(train_kv.get("dataset", train_config.dataset), **overrides)

    for key in sections["data"]:
        if key not in _DATA_KEYS:
            raise ConfigError(f"unknown data config key {key!r}")
    return model_config, train_config, dict(sections["data"])


def serialize_config(train_config: TrainConfig, data: dict[str, str] | None = None) -> str:
    lines = ["[train]"]
    lines += [f"{k}={v}" for k, v in train_config.to_kv().items()]
    if data:
        lines.append("[data]")
        lines += [f"{k}={v}" for k, v in data.items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

def sha256_of_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def sha256_of_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Append-only JSONL record of a run: config, seeds, artifact hashes,
    parameter hashes at checkpoints, per-epoch wall clock, metric rows."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / "manifest.jsonl"
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, kind: str, **payload) -> None:
        record = {"time": time.time(), "kind": kind, **payload}
        with self.path.open("a") as f:
            f.write(json.dumps(record) + "\n")

    def record_config(self, train_config: TrainConfig, extra: dict | None = None) -> None:
        self.append("config", train=train_config.to_kv(), **(extra or {}))

    def record_artifact(self, path) -> None:
        self.append("artifact", path=str(path), sha256=sha256_of_file(path))

    def record_params(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.append("params", step=step, sha256=sha256_of_arrays(arrays))

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line]
