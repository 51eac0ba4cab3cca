"""Synthetic digit-on-background datasets with ground truth retained.

Two generators: a single transformed digit stitched onto a 48x48 uniform
gray canvas and rescaled to 32x32, and a two-digit variant on a 78x78
canvas (one digit per half) rescaled to 64x64. Each sample keeps the soft
alpha mask, the equivalent normalized-coordinate pose, the digit label(s),
and the background gray so evaluation code can score decompositions
against ground truth.

Digit sources are IDX files (standard big-endian layout) or the built-in
procedural seven-segment bank, which exists so the package works with no
external downloads. Per-sample RNG streams are derived from (seed, index),
making synthesis bit-identical whether indices are generated serially or
in parallel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

CACHE_MAGIC = b"LRDS"
CACHE_VERSION = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class SynthSample:
    """One synthesized image with its generation ground truth.

    ``gt_mask`` and ``gt_pose`` carry one row per foreground digit (a
    single row for the one-digit set). Masks are soft alphas in [0, 1];
    poses are 6-vectors in the spatial-transformer layout, normalized
    canvas coordinates. ``scales``/``rotations`` keep the raw draws for
    distribution checks.
    """

    image: np.ndarray          # (3, H, W) float32 in [-1, 1]
    gt_mask: np.ndarray        # (K, H, W) float32 in [0, 1]
    gt_pose: np.ndarray        # (K, 6) float32
    digit_label: tuple[int, ...]
    bg_gray: float             # 8-bit scale, [0, 200]
    scales: tuple[float, ...]
    rotations: tuple[float, ...]


# ---------------------------------------------------------------------------
# digit sources
# ---------------------------------------------------------------------------

def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into (N, H, W) float32 scaled to [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read digit images {path}: {e}") from e
    if len(raw) < 16:
        raise DataError(f"{path}: truncated IDX header")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{path}: bad IDX image magic 0x{magic:08x}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if data.size != n * h * w:
        raise DataError(f"{path}: expected {n * h * w} pixels, found {data.size}")
    return data.reshape(n, h, w).astype(np.float32) / 255.0


def load_idx_labels(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read digit labels {path}: {e}") from e
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"{path}: bad IDX label magic 0x{magic:08x}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if labels.size != n:
        raise DataError(f"{path}: expected {n} labels, found {labels.size}")
    return labels.astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of load_idx_images; images are float in [0, 1] or uint8."""
    arr = images
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    n, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(arr.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


_SEGMENTS = {
    # (x0, y0, x1, y1) in a 28x28 frame; ink stays within ~[7..20] x [3..24]
    "A": (8, 3, 19, 5),
    "B": (18, 4, 20, 14),
    "C": (18, 13, 20, 24),
    "D": (8, 22, 19, 24),
    "E": (7, 13, 9, 24),
    "F": (7, 4, 9, 14),
    "G": (8, 12, 19, 15),
}

_DIGIT_SEGMENTS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABGED",
    3: "ABGCD",
    4: "FGBC",
    5: "AFGCD",
    6: "AFGEDC",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCDFG",
}


def builtin_digit_bank() -> tuple[np.ndarray, np.ndarray]:
    """Ten 28x28 seven-segment glyphs, lightly smoothed, in [0, 1]."""
    glyphs = np.zeros((10, 28, 28), dtype=np.float32)
    for digit, segs in _DIGIT_SEGMENTS.items():
        canvas = np.zeros((28, 28), dtype=np.float32)
        for s in segs:
            x0, y0, x1, y1 = _SEGMENTS[s]
            canvas[y0:y1 + 1, x0:x1 + 1] = 1.0
        # 3x3 box smoothing softens stroke edges like scanned digits
        padded = np.pad(canvas, 1)
        smooth = sum(padded[dy:dy + 28, dx:dx + 28] for dy in range(3) for dx in range(3)) / 9.0
        glyphs[digit] = np.clip(smooth, 0.0, 1.0)
    labels = np.arange(10, dtype=np.int64)
    return glyphs, labels


def load_digit_source(spec: str | None):
    """Resolve a digit source: None/'synthetic' for the built-in bank, else a
    directory containing IDX image/label files."""
    if spec in (None, "synthetic"):
        return builtin_digit_bank()
    root = Path(spec)
    image_candidates = sorted(root.glob("*idx3*")) + sorted(root.glob("*images*"))
    label_candidates = sorted(root.glob("*idx1*")) + sorted(root.glob("*labels*"))
    if not image_candidates or not label_candidates:
        raise DataError(f"no IDX image/label files found under {root}")
    images = load_idx_images(image_candidates[0])
    labels = load_idx_labels(label_candidates[0])
    if len(images) != len(labels):
        raise DataError(f"{root}: {len(images)} images but {len(labels)} labels")
    return images, labels


# ---------------------------------------------------------------------------
# warping and resizing (plain numpy; no gradients needed here)
# ---------------------------------------------------------------------------

def _bilinear_lookup(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample img (H, W) at float pixel coords, zero outside the extent."""
    h, w = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    wx = (xs - x0).astype(img.dtype)
    wy = (ys - y0).astype(img.dtype)
    out = np.zeros(xs.shape, dtype=img.dtype)
    for dx, dy, wgt in ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)),
                        (0, 1, (1 - wx) * wy), (1, 1, wx * wy)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += np.where(ok, vals * wgt, 0.0)
    return out


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of an (H, W) array."""
    h, w = img.shape
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    gx, gy = np.meshgrid(xs, ys)
    return _bilinear_lookup(img, gx, gy)


def warp_digit(glyph: np.ndarray, canvas_h: int, canvas_w: int,
               scale: float, rotation: float, cx: float, cy: float) -> np.ndarray:
    """Place a digit glyph on a canvas: scale, rotate, translate, zero fill."""
    gh, gw = glyph.shape
    dc_y, dc_x = (gh - 1) / 2.0, (gw - 1) / 2.0
    ys, xs = np.mgrid[0:canvas_h, 0:canvas_w].astype(np.float64)
    rel_x = xs - cx
    rel_y = ys - cy
    c, s = np.cos(rotation), np.sin(rotation)
    # inverse warp: canvas point -> glyph coords (rotate back, unscale)
    gx = (c * rel_x + s * rel_y) / scale + dc_x
    gy = (-s * rel_x + c * rel_y) / scale + dc_y
    return _bilinear_lookup(glyph.astype(np.float64), gx, gy).astype(np.float32)


def _glyph_half_extents(glyph: np.ndarray) -> tuple[float, float]:
    """Half-width/height of the ink bounding box around the glyph center,
    padded by one pixel for bilinear tap spill."""
    ys, xs = np.nonzero(glyph > 0)
    if len(xs) == 0:
        return 1.0, 1.0
    gh, gw = glyph.shape
    dc_y, dc_x = (gh - 1) / 2.0, (gw - 1) / 2.0
    hx = max(dc_x - xs.min(), xs.max() - dc_x) + 1.0
    hy = max(dc_y - ys.min(), ys.max() - dc_y) + 1.0
    return hx, hy


def _pose_vector(scale: float, rotation: float, cx: float, cy: float,
                 canvas_h: int, canvas_w: int, glyph_h: int, glyph_w: int) -> np.ndarray:
    """Equivalent pose in normalized coordinates (canvas -> glyph, inverse warp).

    Canvases and glyphs are square here, so one scalar relates the two
    normalized frames: k = canvas_half / (glyph_half * scale).
    """
    half_canvas = (canvas_w - 1) / 2.0
    half_glyph = (glyph_w - 1) / 2.0
    k = half_canvas / (half_glyph * scale)
    c, s = np.cos(rotation), np.sin(rotation)
    cn_x = (cx - half_canvas) / half_canvas
    cn_y = (cy - half_canvas) / half_canvas
    m = np.array([[k * c, k * s], [-k * s, k * c]])
    t = -m @ np.array([cn_x, cn_y])
    return np.array([m[0, 0], m[0, 1], t[0], m[1, 0], m[1, 1], t[1]], dtype=np.float32)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


SCALE_RANGE = (0.8, 1.2)
ROTATION_RANGE = (-np.pi / 4, np.pi / 4)
BG_GRAY_RANGE = (0.0, 200.0)


def _draw_transform(rng: np.random.Generator) -> tuple[float, float]:
    scale = rng.uniform(*SCALE_RANGE)
    rotation = rng.uniform(*ROTATION_RANGE)
    return scale, rotation


def _place(rng, hx, hy, scale, rotation, x_lo, x_hi, y_lo, y_hi):
    """Uniform center position keeping the transformed ink bbox in bounds."""
    c, s = abs(np.cos(rotation)), abs(np.sin(rotation))
    ax = scale * (hx * c + hy * s)
    ay = scale * (hx * s + hy * c)
    x_min, x_max = x_lo + ax, x_hi - ax
    y_min, y_max = y_lo + ay, y_hi - ay
    if x_min > x_max or y_min > y_max:
        # oversized source: deterministic center placement, no resampling
        return (x_lo + x_hi) / 2.0, (y_lo + y_hi) / 2.0
    return rng.uniform(x_min, x_max), rng.uniform(y_min, y_max)


def _compose_to_image(canvas_alpha: np.ndarray, digit_vals: np.ndarray,
                      bg_gray: float, out_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Blend digit over uniform gray using the soft digit alpha, then resize."""
    composite = canvas_alpha * digit_vals * 255.0 + (1.0 - canvas_alpha) * bg_gray
    small = resize_bilinear(composite, out_size, out_size)
    img = (small / 127.5 - 1.0).astype(np.float32)
    return np.repeat(img[None], 3, axis=0), composite


def synth_mnist_one(digits: np.ndarray, labels: np.ndarray, n: int,
                    seed: int) -> list[SynthSample]:
    """n samples of one transformed digit on a 48x48 gray canvas, out 32x32."""
    if n < 1:
        raise ValueError("need n >= 1")
    canvas, out = 48, 32
    samples = []
    for i in range(n):
        rng = _sample_rng(seed, i)
        k = int(rng.integers(0, len(digits)))
        scale, rotation = _draw_transform(rng)
        bg = float(rng.uniform(*BG_GRAY_RANGE))
        glyph = digits[k]
        hx, hy = _glyph_half_extents(glyph)
        cx, cy = _place(rng, hx, hy, scale, rotation, 0.0, canvas - 1.0, 0.0, canvas - 1.0)
        alpha = warp_digit(glyph, canvas, canvas, scale, rotation, cx, cy)
        image, _ = _compose_to_image(alpha, alpha, bg, out)
        mask = resize_bilinear(alpha, out, out).astype(np.float32)[None]
        pose = _pose_vector(scale, rotation, cx, cy, canvas, canvas, *glyph.shape)[None]
        samples.append(SynthSample(image, mask, pose, (int(labels[k]),), bg,
                                   (scale,), (rotation,)))
    return samples


def synth_mnist_two(digits: np.ndarray, labels: np.ndarray, n: int,
                    seed: int) -> list[SynthSample]:
    """n samples of two digits, one per half of a 78x78 canvas, out 64x64."""
    if n < 1:
        raise ValueError("need n >= 1")
    canvas, out = 78, 64
    half = canvas // 2  # columns [0, 38] and [39, 77]
    samples = []
    for i in range(n):
        rng = _sample_rng(seed, i)
        picks, transforms = [], []
        for _ in range(2):
            picks.append(int(rng.integers(0, len(digits))))
            transforms.append(_draw_transform(rng))
        bg = float(rng.uniform(*BG_GRAY_RANGE))
        alphas, poses = [], []
        for side, (k, (scale, rotation)) in enumerate(zip(picks, transforms)):
            glyph = digits[k]
            hx, hy = _glyph_half_extents(glyph)
            x_lo, x_hi = (0.0, half - 1.0) if side == 0 else (float(half), canvas - 1.0)
            cx, cy = _place(rng, hx, hy, scale, rotation, x_lo, x_hi, 0.0, canvas - 1.0)
            alphas.append(warp_digit(glyph, canvas, canvas, scale, rotation, cx, cy))
            poses.append(_pose_vector(scale, rotation, cx, cy, canvas, canvas, *glyph.shape))
        combined = np.maximum(alphas[0], alphas[1])
        image, _ = _compose_to_image(combined, combined, bg, out)
        masks = np.stack([resize_bilinear(a, out, out).astype(np.float32) for a in alphas])
        samples.append(SynthSample(image, masks, np.stack(poses),
                                   (int(labels[picks[0]]), int(labels[picks[1]])), bg,
                                   tuple(t[0] for t in transforms),
                                   tuple(t[1] for t in transforms)))
    return samples


# ---------------------------------------------------------------------------
# cache files
# ---------------------------------------------------------------------------

def write_cache(path, samples: list[SynthSample]) -> None:
    """Binary sample cache: LRDS header then fixed-size per-sample records."""
    if not samples:
        raise ValueError("no samples to write")
    c, h, w = samples[0].image.shape
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<IIIII", CACHE_VERSION, len(samples), h, w, c))
        for s in samples:
            f.write(s.image.astype("<f4").tobytes())
            f.write(s.gt_mask.astype("<f4").tobytes())
            f.write(s.gt_pose.astype("<f4").tobytes())
            label = s.digit_label[0] if len(s.digit_label) == 1 else \
                10 * s.digit_label[0] + s.digit_label[1]
            f.write(struct.pack("<B", label))
            f.write(struct.pack("<f", s.bg_gray))


def read_cache(path) -> list[SynthSample]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read dataset cache {path}: {e}") from e
    if raw[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: bad cache magic {raw[:4]!r}")
    version, count, h, w, c = struct.unpack("<IIIII", raw[4:24])
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    payload = len(raw) - 24
    if count == 0 or payload % count:
        raise DataError(f"{path}: corrupt payload size {payload} for {count} samples")
    record = payload // count
    # record = 4*C*H*W + K*(4*H*W + 24) + 5
    k_num = record - 4 * c * h * w - 5
    k_den = 4 * h * w + 24
    if k_num % k_den:
        raise DataError(f"{path}: record size {record} inconsistent with header")
    k = k_num // k_den
    samples = []
    off = 24
    for _ in range(count):
        img = np.frombuffer(raw, "<f4", c * h * w, off).reshape(c, h, w).copy()
        off += 4 * c * h * w
        mask = np.frombuffer(raw, "<f4", k * h * w, off).reshape(k, h, w).copy()
        off += 4 * k * h * w
        pose = np.frombuffer(raw, "<f4", k * 6, off).reshape(k, 6).copy()
        off += 24 * k
        label = raw[off]
        off += 1
        bg = struct.unpack_from("<f", raw, off)[0]
        off += 4
        label_tuple = (label,) if k == 1 else (label // 10, label % 10)
        samples.append(SynthSample(img, mask, pose, label_tuple, bg, (), ()))
    return samples


def stack_images(samples: list[SynthSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def stack_labels(samples: list[SynthSample]) -> np.ndarray:
    return np.array([s.digit_label[0] for s in samples], dtype=np.int64)


def ks_statistic(values: np.ndarray, cdf) -> float:
    """Kolmogorov–Smirnov distance between an empirical sample and a CDF."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    f = cdf(v)
    upper = np.max(np.arange(1, n + 1) / n - f)
    lower = np.max(f - np.arange(0, n) / n)
    return float(max(upper, lower))


def uniform_cdf(lo: float, hi: float):
    def cdf(x):
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return cdf
