"""Finite-difference validation of autodiff gradients.

Each check builds a scalar loss from seeded random inputs, runs one
backward pass, then compares against central differences with the spec'd
reporting: max over elements of |g_ad - g_fd| / max(1, |g_fd|).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import nn_ops, tensor as T
from .tensor import Tensor, clear_tape, no_grad

FD_STEP = 1e-5


def max_relative_error(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
                       step: float = FD_STEP,
                       sample: int | None = None,
                       rng: np.random.Generator | None = None) -> float:
    """Compare autodiff and central-difference gradients for ``params``.

    ``build_loss`` must rebuild the graph from the current parameter values
    on every call. When ``sample`` is given, only that many randomly chosen
    elements are probed (for expensive end-to-end graphs).
    """
    clear_tape()
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    coords = []
    for pi, p in enumerate(params):
        for j in range(p.size):
            coords.append((pi, j))
    if sample is not None and sample < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        pick = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[i] for i in pick]

    worst = 0.0
    with no_grad():
        for pi, j in coords:
            flat = params[pi].data.reshape(-1)
            keep = flat[j]
            flat[j] = keep + step
            up = build_loss().item()
            flat[j] = keep - step
            dn = build_loss().item()
            flat[j] = keep
            g_fd = (up - dn) / (2 * step)
            g_ad = grads[pi].reshape(-1)[j]
            err = abs(g_ad - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst


def _rand(rng, *shape, avoid_zero=False):
    x = rng.standard_normal(shape)
    if avoid_zero:
        # keep ELU inputs away from the kink so central differences are valid
        x = np.where(np.abs(x) < 1e-3, x + np.sign(x + 0.5) * 2e-3, x)
    return x


def op_checks(seed: int) -> list[tuple[str, float]]:
    """Gradient checks for every differentiable operator, one seed."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, build, params):
        results.append((name, max_relative_error(build, params)))

    x = Tensor(_rand(rng, 2, 3), requires_grad=True)
    w = Tensor(_rand(rng, 2, 3), requires_grad=True)
    b = Tensor(_rand(rng, 2), requires_grad=True)
    check("linear", lambda: T.mean(T.linear(x, w, b)), [x, w, b])

    xc = Tensor(_rand(rng, 1, 2, 4, 4, 4), requires_grad=True)
    wc = Tensor(0.3 * _rand(rng, 3, 2, 3, 3, 3), requires_grad=True)
    bc = Tensor(_rand(rng, 3), requires_grad=True)
    check("conv3d",
          lambda: T.mean(nn_ops.conv3d(xc, wc, bc, stride=(2, 1, 2), pad=(1, 1, 0))),
          [xc, wc, bc])

    xd = Tensor(_rand(rng, 1, 3, 3, 4, 4), requires_grad=True)
    wd = Tensor(0.3 * _rand(rng, 3, 3, 3, 3), requires_grad=True)
    check("depthwise_conv3d", lambda: T.mean(nn_ops.depthwise_conv3d(xd, wd)), [xd, wd])

    xb = Tensor(_rand(rng, 2, 3, 2, 2, 2), requires_grad=True)
    gb = Tensor(1.0 + 0.1 * _rand(rng, 3), requires_grad=True)
    bb = Tensor(0.1 * _rand(rng, 3), requires_grad=True)

    def bn_train():
        state = nn_ops.BatchNormState(3)
        return T.mean(T.elu(nn_ops.batchnorm3d(xb, gb, bb, state, training=True)))

    check("batchnorm3d_train", bn_train, [xb, gb, bb])

    state_eval = nn_ops.BatchNormState(3)
    state_eval.running_mean[:] = 0.3 * _rand(rng, 3)
    state_eval.running_var[:] = 1.0 + 0.2 * np.abs(_rand(rng, 3))
    check("batchnorm3d_eval",
          lambda: T.mean(nn_ops.batchnorm3d(xb, gb, bb, state_eval.copy(), training=False)),
          [xb, gb, bb])

    xl = Tensor(_rand(rng, 2, 3, 4), requires_grad=True)
    gl = Tensor(1.0 + 0.1 * _rand(rng, 4), requires_grad=True)
    bl = Tensor(0.1 * _rand(rng, 4), requires_grad=True)
    check("layernorm", lambda: T.mean(nn_ops.layernorm(xl, gl, bl)), [xl, gl, bl])

    xe = Tensor(_rand(rng, 3, 4, avoid_zero=True), requires_grad=True)
    check("elu", lambda: T.mean(T.elu(xe)), [xe])
    check("gelu", lambda: T.mean(T.gelu(xe)), [xe])

    xs = Tensor(_rand(rng, 3, 5), requires_grad=True)
    ws_ = Tensor(_rand(rng, 3, 5), requires_grad=False)
    check("softmax",
          lambda: T.mean(T.mse_loss(T.softmax(xs, axis=-1), ws_)),
          [xs])

    xm = Tensor(_rand(rng, 2, 3, 4), requires_grad=True)
    tm = Tensor(_rand(rng, 3))
    check("mean_axes", lambda: T.mse_loss(T.mean(xm, axes=(0, 2)), tm), [xm])

    xu = Tensor(_rand(rng, 1, 2, 2, 2, 2), requires_grad=True)
    tu = Tensor(_rand(rng, 1, 2, 4, 2, 2))
    check("nearest_upsample3d",
          lambda: T.mse_loss(nn_ops.nearest_upsample3d(xu, (2, 1, 1)), tu),
          [xu])

    xp_ = Tensor(_rand(rng, 4), requires_grad=True)
    tp = Tensor(_rand(rng, 4))
    check("mse_loss", lambda: T.mse_loss(xp_, tp), [xp_])

    grid = (2, 2, 2)
    ln = grid[0] * grid[1] * grid[2]
    dm, heads = 4, 2
    xa = Tensor(_rand(rng, 1, ln, dm), requires_grad=True)
    proj = {nm: (Tensor(0.5 * _rand(rng, dm, dm), requires_grad=True),
                 Tensor(0.1 * _rand(rng, dm), requires_grad=True))
            for nm in ("q", "k", "v", "o")}

    def attn_plain():
        return T.mean(nn_ops.attention(
            xa, proj["q"][0], proj["q"][1], proj["k"][0], proj["k"][1],
            proj["v"][0], proj["v"][1], proj["o"][0], proj["o"][1], heads))

    check("attention", attn_plain, [xa] + [t for pair in proj.values() for t in pair])

    rel = nn_ops.RelativeBias(heads, grid)
    rel.table_t.data[:] = 0.3 * _rand(rng, *rel.table_t.shape)
    rel.table_h.data[:] = 0.3 * _rand(rng, *rel.table_h.shape)
    rel.table_w.data[:] = 0.3 * _rand(rng, *rel.table_w.shape)

    def attn_rel():
        return T.mean(nn_ops.attention(
            xa, proj["q"][0], proj["q"][1], proj["k"][0], proj["k"][1],
            proj["v"][0], proj["v"][1], proj["o"][0], proj["o"][1], heads, rel=rel))

    check("attention_rel_bias", attn_rel,
          [xa, rel.table_t, rel.table_h, rel.table_w] +
          [t for pair in proj.values() for t in pair])

    return results


def run_op_suite(seeds=(0, 1, 2)) -> dict[str, float]:
    """Worst error per op across seeds."""
    worst: dict[str, float] = {}
    for s in seeds:
        for name, err in op_checks(s):
            worst[name] = max(err, worst.get(name, 0.0))
    return worst
