"""Evaluation suite for generated images.

Two distribution-similarity metrics compare a classifier trained on real
images against one trained on generated images (accuracy gap and mean KL
of their predictive distributions), a classifier-based score measures
conditional/marginal divergence, discriminator features feed a cosine
1-NN probe, minimum-cost perfect matching pairs two image sets for
side-by-side judging, and small helpers aggregate judge labels and mask /
pose statistics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Tensor
from .errors import ConfigError, DataError
from .training import Adam, ConvTrunk

KL_EPS = 1e-7


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

class DigitClassifier(Module):
    """Discriminator trunk with the scalar head swapped for two fully
    connected layers and a softmax over K classes."""

    def __init__(self, disc_arch: str, n_classes: int, rng: np.random.Generator,
                 in_channels: int = 3):
        super().__init__()
        self.trunk = ConvTrunk(disc_arch, rng, in_channels)
        width = self.trunk.feature_channels
        self.fc1 = dc.Linear(width, width, rng)
        self.fc2 = dc.Linear(width, n_classes, rng)
        self.n_classes = n_classes

    def logits(self, x: Tensor) -> Tensor:
        hidden = dc.leaky_relu(self.fc1(self.trunk(x)), 0.2)
        return self.fc2(hidden)

    def predict_proba(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Softmax class probabilities, evaluated with running statistics."""
        self.eval()
        probs = []
        with dc.no_grad():
            for lo in range(0, len(images), batch_size):
                logits = self.logits(dc.constant(images[lo:lo + batch_size])).data
                shifted = logits - logits.max(axis=1, keepdims=True)
                e = np.exp(shifted)
                probs.append(e / e.sum(axis=1, keepdims=True))
        dc.reset_graph()
        return np.concatenate(probs, axis=0)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.predict_proba(images, batch_size).argmax(axis=1)


@dataclass
class ClassifierConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0


def train_classifier(images: np.ndarray, labels: np.ndarray, disc_arch: str,
                     config: ClassifierConfig = ClassifierConfig(),
                     n_classes: Optional[int] = None) -> DigitClassifier:
    """Cross-entropy training of the evaluation classifier, seed-deterministic."""
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if len(present) < 2:
        raise ConfigError(f"need at least 2 classes, got labels {present}")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(10,)))
    clf = DigitClassifier(disc_arch, n_classes, rng)
    list(clf.named_parameters())
    opt = Adam(clf.parameters(), config.lr, (config.beta1, config.beta2))
    n = len(images)
    steps = n // config.batch_size
    if steps == 0:
        raise ConfigError(f"dataset of {n} images smaller than one batch")
    for epoch in range(config.epochs):
        perm = np.random.default_rng(np.random.SeedSequence(
            entropy=config.seed, spawn_key=(11, epoch))).permutation(n)
        for s in range(steps):
            idx = perm[s * config.batch_size:(s + 1) * config.batch_size]
            dc.reset_graph()
            logp = dc.log_softmax(clf.logits(dc.constant(images[idx])))
            picked = dc.take(logp, (np.arange(len(idx)), labels[idx]))
            loss = -(picked.mean())
            dc.backward(loss)
            opt.step()
            opt.zero_grad()
    dc.reset_graph()
    clf.eval()
    return clf


# ---------------------------------------------------------------------------
# adversarial accuracy / divergence
# ---------------------------------------------------------------------------

def accuracy(clf: DigitClassifier, images: np.ndarray, labels: np.ndarray) -> float:
    return float((clf.predict(images) == np.asarray(labels)).mean())


def adversarial_accuracy(clf_real: DigitClassifier, clf_gen: DigitClassifier,
                         images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Top-1 accuracy of both classifiers on the same validation set."""
    if clf_real.n_classes != clf_gen.n_classes:
        raise ConfigError(
            f"label spaces differ: {clf_real.n_classes} vs {clf_gen.n_classes} classes")
    return accuracy(clf_real, images, labels), accuracy(clf_gen, images, labels)


def kl_rows(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> np.ndarray:
    """Row-wise KL(p || q) in nats with epsilon clamping."""
    p = np.clip(p, eps, 1.0)
    q = np.clip(q, eps, 1.0)
    return (p * (np.log(p) - np.log(q))).sum(axis=1)


def adversarial_divergence(clf_real: DigitClassifier, clf_gen: DigitClassifier,
                           images: np.ndarray) -> float:
    """Mean KL between the real-trained and generated-trained classifiers'
    predictive distributions over the validation images (real as reference)."""
    if clf_real.n_classes != clf_gen.n_classes:
        raise ConfigError(
            f"label spaces differ: {clf_real.n_classes} vs {clf_gen.n_classes} classes")
    p = clf_real.predict_proba(images)
    q = clf_gen.predict_proba(images)
    return float(kl_rows(p, q).mean())


# ---------------------------------------------------------------------------
# classifier-based score
# ---------------------------------------------------------------------------

def score_from_probs(probs: np.ndarray, splits: int = 10) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std).

    Zero-probability entries contribute nothing to the KL (0 log 0 = 0),
    so one-hot conditionals over a uniform marginal score exactly the
    class count.
    """
    if len(probs) == 0:
        raise ConfigError("no samples to score")
    scores = []
    for chunk in np.array_split(probs, splits):
        if len(chunk) == 0:
            continue
        marginal = chunk.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(chunk > 0, chunk * (np.log(chunk) - np.log(marginal)), 0.0)
        scores.append(np.exp(ratio.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def classifier_score(clf: DigitClassifier, samples: np.ndarray,
                     splits: int = 10) -> tuple[float, float]:
    return score_from_probs(clf.predict_proba(samples), splits)


# ---------------------------------------------------------------------------
# discriminator-feature 1-NN
# ---------------------------------------------------------------------------

def extract_features(model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Flattened last-conv-layer activations (eval mode, no gradients)."""
    model.eval()
    feats = []
    with dc.no_grad():
        for lo in range(0, len(images), batch_size):
            f = model.features(dc.constant(images[lo:lo + batch_size])).data
            feats.append(f.reshape(f.shape[0], -1).astype(np.float64))
    dc.reset_graph()
    return np.concatenate(feats, axis=0)


def nn_feature_eval(disc, train_images: np.ndarray, train_labels: np.ndarray,
                    test_images: np.ndarray, test_labels: np.ndarray) -> float:
    """1-NN classification accuracy under cosine similarity of features."""
    if len(train_images) == 0 or len(test_images) == 0:
        raise ConfigError("feature evaluation needs nonempty train and test sets")
    ftr = extract_features(disc, train_images)
    fte = extract_features(disc, test_images)
    ftr /= np.maximum(np.linalg.norm(ftr, axis=1, keepdims=True), 1e-12)
    fte /= np.maximum(np.linalg.norm(fte, axis=1, keepdims=True), 1e-12)
    train_labels = np.asarray(train_labels)
    hits = 0
    for lo in range(0, len(fte), 512):
        sims = fte[lo:lo + 512] @ ftr.T
        pred = train_labels[sims.argmax(axis=1)]
        hits += int((pred == np.asarray(test_labels)[lo:lo + 512]).sum())
    return hits / len(fte)


# ---------------------------------------------------------------------------
# minimum-cost perfect matching (shortest augmenting path, O(n^3))
# ---------------------------------------------------------------------------

def hungarian(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-total-cost perfect matching on a square cost matrix.

    Jonker-Volgenant style shortest augmenting path with potentials; one
    augmentation per row, each O(n) Dijkstra-like scans, O(n^3) total.
    Returns (column assigned to each row, total cost).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ConfigError(f"cost matrix must be square, got {cost.shape}")
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.int64)  # 1-based rows; 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    cols = np.arange(1, n + 1)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = cols[~used[1:]]
            cur = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            upd = free[better]
            minv[upd] = cur[better]
            way[upd] = j0
            j1 = free[np.argmin(minv[free])]
            delta = minv[j1]
            used_cols = np.nonzero(used)[0]
            u[row_of_col[used_cols]] += delta
            v[used_cols] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=np.int64)
    col_of_row[row_of_col[1:] - 1] = np.arange(n)
    total = float(cost[np.arange(n), col_of_row].sum())
    return col_of_row, total


def pairwise_l2(set_a: np.ndarray, set_b: np.ndarray) -> np.ndarray:
    """Euclidean distances between two flattened image sets."""
    a = set_a.reshape(len(set_a), -1).astype(np.float64)
    b = set_b.reshape(len(set_b), -1).astype(np.float64)
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0.0))


def hungarian_pair(set_a: np.ndarray, set_b: np.ndarray) -> tuple[np.ndarray, float]:
    """Perfect matching between equal-sized image sets under pixel L2 distance."""
    if len(set_a) != len(set_b):
        raise ConfigError(f"set sizes differ: {len(set_a)} vs {len(set_b)}")
    return hungarian(pairwise_l2(set_a, set_b))


def brute_force_matching(cost: np.ndarray) -> tuple[tuple, float]:
    """Exhaustive minimum over all permutations; oracle for small n."""
    from itertools import permutations

    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    best, best_perm = np.inf, None
    rows = np.arange(n)
    for perm in permutations(range(n)):
        total = cost[rows, list(perm)].sum()
        if total < best:
            best, best_perm = total, perm
    return best_perm, float(best)


# ---------------------------------------------------------------------------
# judge-label aggregation
# ---------------------------------------------------------------------------

NOT_RECOGNIZABLE = None  # judge label sentinel; "NR" in CSV files


def aggregate_quality(labels: Sequence) -> tuple[Optional[int], int]:
    """Majority label and quality level for one image's judge labels.

    The level counts judges agreeing on the majority category; an image
    every judge marked non-recognizable gets level 0 (and no category).
    Ties break toward the smallest label, so the result is invariant
    under judge order.
    """
    if len(labels) == 0:
        raise ConfigError("no judge labels for image")
    concrete = [l for l in labels if l is not NOT_RECOGNIZABLE]
    if not concrete:
        return NOT_RECOGNIZABLE, 0
    values, counts = np.unique(np.asarray(concrete, dtype=np.int64), return_counts=True)
    best = counts.max()
    majority = int(values[counts == best].min())
    return majority, int(best)


def read_judge_csv(path) -> dict[str, list]:
    """CSV rows (image_id, judge_id, label) -> labels per image. ``NR``
    marks a non-recognizable vote."""
    per_image: dict[str, list] = {}
    try:
        with open(path, newline="") as f:
            for row in csv.reader(f):
                if not row or row[0].strip().lower() == "image_id":
                    continue
                if len(row) != 3:
                    raise DataError(f"{path}: malformed judge row {row}")
                image_id, _, label = (c.strip() for c in row)
                value = NOT_RECOGNIZABLE if label.upper() == "NR" else int(label)
                per_image.setdefault(image_id, []).append(value)
    except OSError as e:
        raise DataError(f"cannot read judge labels {path}: {e}") from e
    return per_image


def aggregate_judge_file(path) -> list[tuple[str, Optional[int], int]]:
    per_image = read_judge_csv(path)
    out = []
    for image_id in sorted(per_image):
        majority, level = aggregate_quality(per_image[image_id])
        out.append((image_id, majority, level))
    return out


# ---------------------------------------------------------------------------
# mask and pose statistics
# ---------------------------------------------------------------------------

def mask_binariness(masks) -> float:
    """Fraction of mask values below 0.1 or above 0.9."""
    m = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    return float(((m < 0.1) | (m > 0.9)).mean())


POSE_NAMES = ("s_x", "r_x", "t_x", "r_y", "s_y", "t_y")


def transform_histograms(poses: np.ndarray, bins: int = 20) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-coefficient histograms over the observed value range."""
    poses = np.asarray(poses)
    if poses.ndim != 2 or poses.shape[1] != 6 or len(poses) == 0:
        raise ConfigError(f"expected a nonempty (N, 6) pose array, got {poses.shape}")
    out = {}
    for i, name in enumerate(POSE_NAMES):
        col = poses[:, i]
        lo, hi = float(col.min()), float(col.max())
        if lo == hi:
            hi = lo + 1e-6
        counts, edges = np.histogram(col, bins=bins, range=(lo, hi))
        out[name] = (counts, edges)
    return out


def write_histogram_csv(histograms: dict, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["parameter", "bin_lo", "bin_hi", "count"])
        for name, (counts, edges) in histograms.items():
            for i, c in enumerate(counts):
                writer.writerow([name, f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}", int(c)])


def plot_histograms(histograms: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 3, figsize=(12, 6))
    for ax, (name, (counts, edges)) in zip(axes.ravel(), histograms.items()):
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge")
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
