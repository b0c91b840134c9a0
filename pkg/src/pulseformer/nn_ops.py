"""Neural-network operators on the autodiff tape.

The three-dimensional convolution is evaluated as one GEMM per batch item
over a strided patch view (column layout chosen so the backward scatter
adds along aligned axes). Attention is evaluated in query blocks with the
softmax probabilities recomputed during backward, so memory stays bounded
for long token sequences; the decomposed relative position bias collapses
to a single table gather via a combined linear index.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, _accum, _needs_grad, _record

# query rows processed per attention block; keeps score tiles cache-friendly
ATTN_BLOCK = 256


# ---------------------------------------------------------------------------
# 3-D convolution
# ---------------------------------------------------------------------------

def _conv3d_out_dims(dims, kernel, stride, pad):
    out = []
    for d, k, s, p in zip(dims, kernel, stride, pad):
        span = d + 2 * p - k
        if span < 0:
            raise DimensionError(
                f"kernel {kernel} does not fit padded input {tuple(dims)} with pad {tuple(pad)}")
        out.append(span // s + 1)
    return tuple(out)


def _extract_patches(xp: np.ndarray, kernel, stride, out_dims):
    """View of the padded input as (N, C, kT, kH, kW, T', H', W'), then copy."""
    n, c = xp.shape[:2]
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_dims
    sn, sc, s0, s1, s2 = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kt, kh, kw, to, ho, wo),
        strides=(sn, sc, s0, s1, s2, s0 * st, s1 * sh, s2 * sw),
        writeable=False,
    )
    return np.ascontiguousarray(view.reshape(n, c * kt * kh * kw, to * ho * wo))


def conv3d(x: Tensor, w: Tensor, b: Tensor | None,
           stride: tuple[int, int, int] = (1, 1, 1),
           pad: tuple[int, int, int] = (0, 0, 0)) -> Tensor:
    """3-D convolution of x[N,C,T,H,W] with w[K,C,kT,kH,kW], zero padding.

    Output extents follow floor((D + 2p - k)/s) + 1 per spatial axis.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input/kernel, got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    if any(s < 1 for s in stride):
        raise DimensionError(f"conv3d strides must be >= 1, got {stride}")
    n, c = x.shape[:2]
    k = w.shape[0]
    kernel = w.shape[2:]
    out_dims = _conv3d_out_dims(x.shape[2:], kernel, stride, pad)
    pt, ph, pw = pad

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    cols = _extract_patches(xp, kernel, stride, out_dims)  # (N, C*kkk, P)
    w2 = w.data.reshape(k, -1)
    y = np.empty((n, k, cols.shape[2]))
    for i in range(n):
        np.dot(w2, cols[i], out=y[i])
    if b is not None:
        if b.shape != (k,):
            raise DimensionError(f"conv3d bias {b.shape} incompatible with {k} filters")
        y += b.data[None, :, None]
    req = _needs_grad(x, w) or (b is not None and _needs_grad(b))
    out = Tensor(y.reshape((n, k) + out_dims), requires_grad=req)

    def pull(g):
        g2 = g.reshape(n, k, -1)
        if b is not None:
            _accum(b, g2.sum(axis=(0, 2)))
        if w.requires_grad:
            # recompute columns rather than keeping them alive on the tape
            xpb = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
            colsb = _extract_patches(xpb, kernel, stride, out_dims)
            dw2 = np.zeros_like(w2)
            for i in range(n):
                dw2 += g2[i] @ colsb[i].T
            _accum(w, dw2.reshape(w.shape))
        if x.requires_grad:
            dcols = np.empty((n, c * kernel[0] * kernel[1] * kernel[2], g2.shape[2]))
            for i in range(n):
                np.dot(w2.T, g2[i], out=dcols[i])
            pad_shape = (n, c, x.shape[2] + 2 * pt, x.shape[3] + 2 * ph, x.shape[4] + 2 * pw)
            dxp = np.zeros(pad_shape)
            dc = dcols.reshape((n, c) + tuple(kernel) + out_dims)
            st, sh, sw = stride
            to, ho, wo = out_dims
            for dt in range(kernel[0]):
                for dh in range(kernel[1]):
                    for dw_ in range(kernel[2]):
                        dxp[:, :, dt:dt + st * to:st, dh:dh + sh * ho:sh,
                            dw_:dw_ + sw * wo:sw] += dc[:, :, dt, dh, dw_]
            t, h, wl = x.shape[2:]
            _accum(x, dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + wl])

    _record(out, pull)
    return out


def depthwise_conv3d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 3x3x3 convolution with padding 1 and stride 1.

    Kernel shape (C, 3, 3, 3); each channel is convolved with its own filter.
    """
    if w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[1:] != (3, 3, 3):
        raise DimensionError(f"depthwise kernel {w.shape} incompatible with input {x.shape}")
    n, c, t, h, wl = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    y = np.zeros_like(x.data)
    for dt in range(3):
        for dh in range(3):
            for dw_ in range(3):
                y += w.data[None, :, dt, dh, dw_, None, None, None] * \
                    xp[:, :, dt:dt + t, dh:dh + h, dw_:dw_ + wl]
    out = Tensor(y, requires_grad=_needs_grad(x, w))

    def pull(g):
        xpb = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xpb)
        for dt in range(3):
            for dh in range(3):
                for dw_ in range(3):
                    sl = xpb[:, :, dt:dt + t, dh:dh + h, dw_:dw_ + wl]
                    dw[:, dt, dh, dw_] = np.einsum("ncthw,ncthw->c", g, sl)
                    dxp[:, :, dt:dt + t, dh:dh + h, dw_:dw_ + wl] += \
                        w.data[None, :, dt, dh, dw_, None, None, None] * g
        _accum(w, dw)
        _accum(x, dxp[:, :, 1:1 + t, 1:1 + h, 1:1 + wl])

    _record(out, pull)
    return out


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

class BatchNormState:
    """Per-channel running statistics shared between training steps."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def copy(self) -> "BatchNormState":
        s = BatchNormState(len(self.running_mean))
        s.running_mean = self.running_mean.copy()
        s.running_var = self.running_var.copy()
        return s


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (N, T, H, W) with affine.

    Training mode normalises by population batch statistics and updates the
    running estimates in place; eval mode uses the running estimates.
    """
    if x.ndim != 5:
        raise DimensionError(f"batchnorm3d expects 5-D input, got {x.shape}")
    c = x.shape[1]
    axes = (0, 2, 3, 4)
    shape = (1, c, 1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mu
        state.running_var = (1 - momentum) * state.running_var + momentum * var
    else:
        mu = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    y = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    out = Tensor(y, requires_grad=_needs_grad(x, gamma, beta))

    def pull(g):
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        gx = g * gamma.data.reshape(shape)
        if training:
            m = x.size // c
            mean_gx = gx.mean(axis=axes).reshape(shape)
            mean_gxx = (gx * xhat).mean(axis=axes).reshape(shape)
            _accum(x, inv.reshape(shape) * (gx - mean_gx - xhat * mean_gxx))
            del m
        else:
            _accum(x, gx * inv.reshape(shape))

    _record(out, pull)
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (population variance), then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data, requires_grad=_needs_grad(x, gamma, beta))

    def pull(g):
        red = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=red))
        _accum(beta, g.sum(axis=red))
        if not x.requires_grad:
            return
        gx = g * gamma.data
        mean_gx = gx.mean(axis=-1, keepdims=True)
        mean_gxx = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gx - mean_gx - xhat * mean_gxx))

    _record(out, pull)
    return out


# ---------------------------------------------------------------------------
# nearest upsampling
# ---------------------------------------------------------------------------

def nearest_upsample3d(x: Tensor, factor: tuple[int, int, int]) -> Tensor:
    """Repeat each sample ``factor`` times along (T, H, W); grads sum over replicas."""
    ft, fh, fw = factor
    if min(ft, fh, fw) < 1:
        raise DimensionError(f"upsample factors must be >= 1, got {factor}")
    y = x.data
    if ft > 1:
        y = np.repeat(y, ft, axis=2)
    if fh > 1:
        y = np.repeat(y, fh, axis=3)
    if fw > 1:
        y = np.repeat(y, fw, axis=4)
    out = Tensor(y, requires_grad=_needs_grad(x))

    def pull(g):
        n, c, t, h, w = x.shape
        _accum(x, g.reshape(n, c, t, ft, h, fh, w, fw).sum(axis=(3, 5, 7)))

    _record(out, pull)
    return out


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class RelativeBias:
    """Decomposed per-axis relative position tables for one token grid.

    Tables have shape (heads, 2*extent - 1) per axis; the pairwise bias is
    B[i, j] = T[ti-tj] + H[hi-hj] + W[wi-wj]. For a fixed query token the
    bias over all keys is a contiguous sub-cube of the axis-flipped
    combined outer-sum table, so score blocks need slice copies only.
    """

    def __init__(self, heads: int, grid: tuple[int, int, int]):
        gt, gh, gw = grid
        self.grid = grid
        self.heads = heads
        self.table_t = Tensor(np.zeros((heads, 2 * gt - 1)), requires_grad=True)
        self.table_h = Tensor(np.zeros((heads, 2 * gh - 1)), requires_grad=True)
        self.table_w = Tensor(np.zeros((heads, 2 * gw - 1)), requires_grad=True)
        ti, hi, wi = np.unravel_index(np.arange(gt * gh * gw), grid)
        self.coord_t = ti.astype(np.intp)
        self.coord_h = hi.astype(np.intp)
        self.coord_w = wi.astype(np.intp)

    def tables(self):
        return (self.table_t, self.table_h, self.table_w)

    def flipped_combined(self, head: int) -> np.ndarray:
        """Outer sum of the three tables, reversed along every axis."""
        c = (self.table_t.data[head][:, None, None]
             + self.table_h.data[head][None, :, None]
             + self.table_w.data[head][None, None, :])
        return c[::-1, ::-1, ::-1].copy()

    def _plane_aligned(self, i0: int, i1: int) -> bool:
        plane = self.grid[1] * self.grid[2]
        return i0 % plane == 0 and (i1 - i0) % plane == 0

    def plane_cube(self, head: int, budget: int = 1 << 27) -> np.ndarray | None:
        """Bias cube laid out (hi, wi, tdiff, hj, wj) for bulk slice adds.

        Returns None when the cube would exceed the memory budget (bytes);
        callers then fall back to per-row slice fills.
        """
        gt, gh, gw = self.grid
        size = (gh * gw) ** 2 * (2 * gt - 1) * 8
        if size > budget:
            return None
        windows = sliding_window_view(self.flipped_combined(head), (gh, gw), axis=(1, 2))
        return np.ascontiguousarray(windows[:, ::-1, ::-1].transpose(1, 2, 0, 3, 4))

    def add_block_bias(self, cube: np.ndarray, i0: int, i1: int, sb: np.ndarray) -> None:
        """Add pairwise bias for aligned query rows [i0, i1) onto scores in place."""
        gt, gh, gw = self.grid
        plane = gh * gw
        view = sb.reshape((i1 - i0) // plane, gh, gw, gt, gh, gw)
        for p in range(view.shape[0]):
            ti = self.coord_t[i0 + p * plane]
            view[p] += cube[:, :, gt - 1 - ti:2 * gt - 1 - ti]

    def fill_block(self, flipc: np.ndarray, i0: int, i1: int, out: np.ndarray) -> None:
        """Write bias rows for query tokens [i0, i1) into out[(i1-i0), L]."""
        gt, gh, gw = self.grid
        for r in range(i1 - i0):
            ti = self.coord_t[i0 + r]
            hi = self.coord_h[i0 + r]
            wi = self.coord_w[i0 + r]
            cube = flipc[gt - 1 - ti:2 * gt - 1 - ti,
                         gh - 1 - hi:2 * gh - 1 - hi,
                         gw - 1 - wi:2 * gw - 1 - wi]
            out[r] = cube.reshape(-1)

    def accumulate_marginals(self, ds_acc: np.ndarray, i0: int, i1: int, head: int,
                             grad_t: np.ndarray, grad_h: np.ndarray,
                             grad_w: np.ndarray) -> None:
        """Scatter score-gradient difference-marginals into the table grads.

        Only the per-axis index-difference marginals of dS are needed, so
        the full pair matrix never has to be binned.
        """
        gt, gh, gw = self.grid
        rows = i1 - i0
        if self._plane_aligned(i0, i1):
            plane = gh * gw
            n_planes = rows // plane
            cube = ds_acc[:rows].reshape(n_planes, gh, gw, gt, gh, gw)
            red_hw = cube.sum(axis=(4, 5))          # (planes, hi, wi, tj)
            red_t = cube.sum(axis=3)                # (planes, hi, wi, hj, wj)
            row_t = red_hw.sum(axis=(1, 2))         # (planes, tj)
            m_h = red_t.sum(axis=(2, 4)).sum(axis=0)   # (hi, hj)
            m_w = red_t.sum(axis=(1, 3)).sum(axis=0)   # (wi, wj)
            for p in range(n_planes):
                ti = self.coord_t[i0 + p * plane]
                grad_t[head, ti:ti + gt] += row_t[p, ::-1]
            for hi in range(gh):
                grad_h[head, hi:hi + gh] += m_h[hi, ::-1]
            for wi in range(gw):
                grad_w[head, wi:wi + gw] += m_w[wi, ::-1]
            return
        cube = ds_acc[:rows].reshape(rows, gt, gh, gw)
        row_t = cube.sum(axis=(2, 3))
        plane = cube.sum(axis=1)
        row_h = plane.sum(axis=2)
        row_w = plane.sum(axis=1)
        for r in range(rows):
            ti = self.coord_t[i0 + r]
            hi = self.coord_h[i0 + r]
            wi = self.coord_w[i0 + r]
            grad_t[head, ti:ti + gt] += row_t[r, ::-1]
            grad_h[head, hi:hi + gh] += row_h[r, ::-1]
            grad_w[head, wi:wi + gw] += row_w[r, ::-1]


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def attention_core(q: Tensor, k: Tensor, v: Tensor,
                   rel: RelativeBias | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + B) v over (N, heads, L, d) tensors.

    Scores are produced in blocks of ATTN_BLOCK query rows, bias rows are
    shared across the batch, and the softmax probabilities are recomputed
    during backward, bounding peak memory at O(block * L) regardless of
    sequence length.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention shapes differ: {q.shape}, {k.shape}, {v.shape}")
    n, heads, ln, d = q.shape
    scl = 1.0 / np.sqrt(d)
    bs = min(ATTN_BLOCK, ln)
    if rel is not None:
        # align blocks to whole (h, w) planes so bias rows copy in bulk
        plane = rel.grid[1] * rel.grid[2]
        if plane <= 4 * ATTN_BLOCK:
            bs = min(max(1, ATTN_BLOCK // plane) * plane, ln)

    def run(qs, kk, vv, gg=None, grads=None):
        """One blocked sweep; forward when gg is None, backward otherwise."""
        if gg is None:
            y = np.empty_like(qs)
        else:
            y, dq, dk, dv, dt, dh, dw = grads
        s = np.empty((bs, ln))
        bias = None
        ds_acc = np.empty((bs, ln)) if rel is not None and gg is not None else None
        for hh in range(heads):
            cube = flipc = None
            if rel is not None:
                cube = rel.plane_cube(hh)
                if cube is None:
                    flipc = rel.flipped_combined(hh)
                    bias = np.empty((bs, ln)) if bias is None else bias
            for i0 in range(0, ln, bs):
                i1 = min(i0 + bs, ln)
                rows = i1 - i0
                fast_bias = cube is not None and rel._plane_aligned(i0, i1)
                if rel is not None and not fast_bias:
                    if bias is None:
                        bias = np.empty((bs, ln))
                    if flipc is None:
                        flipc = rel.flipped_combined(hh)
                    rel.fill_block(flipc, i0, i1, bias[:rows])
                if gg is not None and ds_acc is not None:
                    ds_acc[:rows] = 0.0
                for i in range(n):
                    sb = s[:rows]
                    np.dot(qs[i, hh, i0:i1], kk[i, hh].T, out=sb)
                    if fast_bias:
                        rel.add_block_bias(cube, i0, i1, sb)
                    elif rel is not None:
                        sb += bias[:rows]
                    p = _softmax_rows(sb)
                    if gg is None:
                        np.dot(p, vv[i, hh], out=y[i, hh, i0:i1])
                        continue
                    gb = gg[i, hh, i0:i1]
                    dv[i, hh] += p.T @ gb
                    dp = gb @ vv[i, hh].T
                    # row sums of p*dp equal g.y of the saved forward output
                    rs = (gb * y[i, hh, i0:i1]).sum(axis=1, keepdims=True)
                    np.subtract(dp, rs, out=dp)
                    np.multiply(p, dp, out=dp)   # dp now holds dS
                    if ds_acc is not None:
                        ds_acc[:rows] += dp
                    t1 = dp @ kk[i, hh]
                    t1 *= scl
                    dq[i, hh, i0:i1] = t1
                    t2 = dp.T @ qs[i, hh, i0:i1]
                    dk[i, hh] += t2  # qs is pre-scaled, so this is already dS·scl ᵀ q
                if gg is not None and rel is not None:
                    rel.accumulate_marginals(ds_acc, i0, i1, hh, dt, dh, dw)
        return y

    qs = q.data * scl
    y = run(qs, k.data, v.data)
    req = _needs_grad(q, k, v) or (rel is not None and _needs_grad(*rel.tables()))
    out = Tensor(y, requires_grad=req)

    def pull(g):
        dq = np.zeros_like(q.data)
        dk = np.zeros_like(k.data)
        dv = np.zeros_like(v.data)
        dt = dh = dw = None
        if rel is not None:
            dt = np.zeros_like(rel.table_t.data)
            dh = np.zeros_like(rel.table_h.data)
            dw = np.zeros_like(rel.table_w.data)
        run(qs, k.data, v.data, gg=g, grads=(out.data, dq, dk, dv, dt, dh, dw))
        _accum(q, dq)
        _accum(k, dk)
        _accum(v, dv)
        if rel is not None:
            _accum(rel.table_t, dt)
            _accum(rel.table_h, dh)
            _accum(rel.table_w, dw)

    _record(out, pull)
    return out


def attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
              wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
              heads: int, rel: RelativeBias | None = None) -> Tensor:
    """Multi-head self-attention over x[N, L, D] with output projection."""
    from . import tensor as T

    n, ln, dm = x.shape
    if dm % heads != 0:
        raise ConfigurationError(f"model width {dm} not divisible by {heads} heads")
    dh = dm // heads

    def split(t: Tensor) -> Tensor:
        t = T.reshape(t, (n, ln, heads, dh))
        return T.transpose(t, (0, 2, 1, 3))

    q = split(T.linear(x, wq, bq))
    k = split(T.linear(x, wk, bk))
    v = split(T.linear(x, wv, bv))
    y = attention_core(q, k, v, rel=rel)
    y = T.transpose(y, (0, 2, 1, 3))
    y = T.reshape(y, (n, ln, dm))
    return T.linear(y, wo, bo)
