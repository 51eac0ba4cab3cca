"""The 64-bit gradient-check suite over every differentiable operation.

Shared by the CLI ``gradcheck`` command and the acceptance tests. Each op
gets small random inputs per seed, chosen away from genuine derivative
discontinuities: relu-family inputs keep a margin from zero, clamp inputs
stay inside the clip window, and sampling grids keep their fractional
positions away from bilinear cell boundaries (where the true derivative
jumps).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import stn
from .diffcore.gradcheck import gradient_check


def _away_from(rng, shape, margin=0.1, scale=1.0):
    """Random values with |x| >= margin (for kinked activations)."""
    x = rng.normal(scale=scale, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def _safe_grid(rng, shape, extent):
    """Grid coords whose fractional pixel positions avoid cell boundaries."""
    g = rng.uniform(-0.9, 0.9, size=shape)
    pix = (g + 1.0) * (extent - 1) / 2.0
    frac = pix - np.floor(pix)
    bad = (frac < 0.05) | (frac > 0.95)
    g = np.where(bad, g + 0.4 / extent, g)
    return g


def _bn_case(rng):
    x = rng.normal(size=(4, 3, 5, 5))
    gamma = rng.normal(1.0, 0.2, size=3)
    beta = rng.normal(0.0, 0.2, size=3)

    def fn(xx, gg, bb):
        stats_m = np.zeros(3)
        stats_v = np.ones(3)
        return dc.batch_norm(xx, gg, bb, stats_m, stats_v, training=True)

    return fn, [x, gamma, beta]


def _lstm_unrolled(rng):
    """Three chained steps; gradients flow through time into all inputs."""
    din, hid, n = 4, 5, 3
    zs = [rng.normal(size=(n, din)) for _ in range(3)]
    w_ih = rng.normal(scale=0.5, size=(4 * hid, din))
    w_hh = rng.normal(scale=0.5, size=(4 * hid, hid))
    b = rng.normal(scale=0.5, size=4 * hid)

    def fn(z0, z1, z2, wi, wh, bb):
        h = dc.constant(np.zeros((n, hid)))
        c = dc.constant(np.zeros((n, hid)))
        for z in (z0, z1, z2):
            h, c = dc.lstm_cell(z, h, c, wi, wh, bb)
        return h

    return fn, [*zs, w_ih, w_hh, b]


def _suite(rng):
    """(name, fn, inputs) triples regenerated fresh per seed."""
    cases = []
    add = cases.append

    add(("add", lambda a, b: a + b, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]))
    add(("add_broadcast", lambda a, b: a + b, [rng.normal(size=(3, 1, 4)), rng.normal(size=(2, 4))]))
    add(("mul", lambda a, b: a * b, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]))
    add(("div", lambda a, b: a / b, [rng.normal(size=(3, 4)), _away_from(rng, (3, 4), 0.5)]))
    add(("neg", lambda a: -a, [rng.normal(size=(2, 5))]))
    add(("power", lambda a: a ** 3, [rng.normal(size=(3, 3))]))
    add(("log", dc.log, [rng.uniform(0.2, 3.0, size=(3, 4))]))
    add(("exp", dc.exp, [rng.normal(size=(3, 4))]))
    add(("clamp", lambda a: dc.clamp(a, -5.0, 5.0), [rng.uniform(-4, 4, size=(3, 4))]))
    add(("relu", dc.relu, [_away_from(rng, (3, 5))]))
    add(("leaky_relu", lambda a: dc.leaky_relu(a, 0.2), [_away_from(rng, (3, 5))]))
    add(("tanh", dc.tanh, [rng.normal(size=(3, 5))]))
    add(("sigmoid", dc.sigmoid, [rng.normal(size=(3, 5))]))
    add(("softplus", dc.softplus, [rng.normal(size=(3, 5))]))
    add(("sum", lambda a: dc.sum_(a, axis=1), [rng.normal(size=(3, 4))]))
    add(("mean", lambda a: dc.mean(a, axis=(1, 2)), [rng.normal(size=(2, 3, 4))]))
    add(("reshape", lambda a: a.reshape(6, 2), [rng.normal(size=(3, 4))]))
    add(("slice", lambda a: a[:, 1:3], [rng.normal(size=(3, 5))]))
    add(("concat", lambda a, b: dc.concat([a, b], axis=1),
         [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))]))
    add(("matmul", dc.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]))
    add(("linear", dc.linear, [rng.normal(size=(3, 4)), rng.normal(size=(5, 4)),
                               rng.normal(size=5)]))
    add(("log_softmax", dc.log_softmax, [rng.normal(size=(4, 6))]))
    add(("conv2d_s1", lambda x, w: dc.conv2d(x, w, 1, 0),
         [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 4, 4))]))
    add(("conv2d_s2", lambda x, w: dc.conv2d(x, w, 2, 1),
         [rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 4, 4))]))
    add(("conv2d_transposed_s1", lambda x, w: dc.conv2d_transposed(x, w, 1, 0),
         [rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(3, 2, 4, 4))]))
    add(("conv2d_transposed_s2", lambda x, w: dc.conv2d_transposed(x, w, 2, 1),
         [rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(3, 2, 4, 4))]))
    add(("avg_pool", lambda x: dc.avg_pool(x, 2, 2), [rng.normal(size=(2, 3, 4, 4))]))
    cases.append(("batch_norm", *_bn_case(rng)))
    cases.append(("lstm_cell_3steps", *_lstm_unrolled(rng)))

    x_img = rng.normal(size=(2, 2, 6, 6))
    grid = _safe_grid(rng, (2, 4, 4, 2), extent=6)
    add(("sample_bilinear", stn.sample_bilinear, [x_img, grid]))
    add(("grid_generate", lambda a: stn.grid_generate(a, 4, 5), [rng.normal(size=(2, 6))]))
    add(("constrain_pose", lambda a: stn.constrain_pose(a, 1.2), [rng.normal(size=(3, 6))]))

    def st_safe(img, pose_raw):
        # scales >= 1.2 keep sampling positions off cell boundaries for
        # generic random inputs; boundary-adjacent cases are exempt anyway
        return stn.st(img, stn.constrain_pose(pose_raw, 1.2))

    add(("st", st_safe, [rng.normal(size=(2, 1, 7, 7)), rng.normal(scale=0.4, size=(2, 6))]))
    return cases


@dataclass
class OpReport:
    name: str
    max_rel_error: float
    passed: bool


def run_gradient_suite(seeds: int = 10, tolerance: float = 1e-4) -> list[OpReport]:
    """Check every op over ``seeds`` random draws; worst error per op."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=1234, spawn_key=(seed,)))
        for name, fn, inputs in _suite(rng):
            report = gradient_check(fn, inputs, tolerance=tolerance, seed=seed)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    return [OpReport(name, err, err < tolerance) for name, err in worst.items()]
