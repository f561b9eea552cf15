"""Invertible building blocks plus the stored (non-invertible) head/tail
conv stacks and the timestep embedding.

Shapes follow (batch, channel, depth, height, width). Each block
implements its forward map, exact inverse, and hand-written VJPs for both
directions; gradients of a block's parameters accumulate in place on
``Param.grad``. Conventions:

  * additive coupling: split channels in half, add a conv conditioner of
    one half (plus a timestep bias) to the other; ``swap`` alternates
    which half is transformed.
  * orthogonal resampling: rearrange 2x2x2 spatial blocks into 8 channel
    phases and mix the phases with an 8x8 Cayley-parameterized orthogonal
    matrix Q = (I - S)(I + S)^-1, S skew-symmetric. Down multiplies by Q,
    up by Q^T; both directions are exact isometries.
  * attention concat: split the skip tensor by voxel-parity checkerboard
    into (y1, y2), run single-head softmax attention over the flattened
    even-parity voxel sequence of y1, bound the result via
    f = exp(gamma * tanh(.)) so f lies in [e^-gamma, e^gamma], scale y2 by
    f, and concatenate with the upsampled tensor. Division by f inverts it.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError
from .kernels import (
    conv3d,
    conv3d_flops,
    conv3d_vjp,
    div,
    silu,
    silu_grad,
    softmax,
    softmax_vjp,
)
from .revgraph import KIND_STORED, Node


class StepContext:
    """Per-step conditioning shared by all coupling blocks: the timestep
    embedding vector and its gradient accumulator."""

    def __init__(self, temb: np.ndarray):
        self.temb = temb
        self.temb_grad = np.zeros_like(temb)


def null_context(emb_dim: int, dtype) -> StepContext:
    """Zero-embedding context used by the inverse pass, which by design
    takes no timestamp."""
    return StepContext(np.zeros(emb_dim, dtype=dtype))


# ---------------------------------------------------------------------------
# timestep embedding


def sinusoid_embedding(t: int, dim: int, max_t: int | None = None) -> np.ndarray:
    """[sin(t*w_i); cos(t*w_i)] with w_i = 10000^(-2i/dim), i < dim/2."""
    if t < 0 or (max_t is not None and t > max_t):
        raise DomainError(f"timestep {t} outside [0, {max_t}]")
    if dim % 2:
        raise ShapeError(f"embedding dim must be even, got {dim}")
    i = np.arange(dim // 2, dtype=np.float64)
    w = 10000.0 ** (-2.0 * i / dim)
    return np.concatenate([np.sin(t * w), np.cos(t * w)])


class TimeEmbed:
    """Sinusoid followed by a 2-layer MLP. Runs once per step; the hidden
    state is kept for the backward pass (tiny, counted as stored bytes by
    the model)."""

    def __init__(self, dim, alloc, prng, dtype):
        self.dim = dim
        s = 1.0 / np.sqrt(dim)
        self.W1 = alloc((prng.randn((dim, dim), np.float64) * s).astype(dtype), "temb.W1")
        self.b1 = alloc(np.zeros(dim, dtype=dtype), "temb.b1")
        self.W2 = alloc((prng.randn((dim, dim), np.float64) * s).astype(dtype), "temb.W2")
        self.b2 = alloc(np.zeros(dim, dtype=dtype), "temb.b2")
        self._saved = None

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def forward(self, t: int, max_t: int | None = None) -> np.ndarray:
        dtype = self.W1.value.dtype
        sin = sinusoid_embedding(t, self.dim, max_t).astype(dtype)
        h = self.W1.value @ sin + self.b1.value
        a = silu(h)
        out = self.W2.value @ a + self.b2.value
        self._saved = (sin, h, a)
        return out

    def value(self, t: int, max_t: int | None = None) -> np.ndarray:
        """Embedding without touching the saved backward state (for inverse
        passes that run alongside a pending training step)."""
        saved = self._saved
        out = self.forward(t, max_t)
        self._saved = saved
        return out

    def backward(self, gout: np.ndarray):
        sin, h, a = self._saved
        self.W2.grad += np.outer(gout, a)
        self.b2.grad += gout
        ga = self.W2.value.T @ gout
        gh = ga * silu_grad(h)
        self.W1.grad += np.outer(gh, sin)
        self.b1.grad += gh

    def saved_bytes(self) -> int:
        return 0 if self._saved is None else sum(a.nbytes for a in self._saved)


# ---------------------------------------------------------------------------
# additive coupling


class CouplingBlock(Node):
    """x1, x2 -> x1, x2 + g(x1, temb); inverse subtracts. The conditioner g
    is conv(k=3) -> +timestep bias -> silu -> conv(k=3), with the last conv
    zero-initialized so a fresh block is the identity."""

    def __init__(self, name, channels, emb_dim, alloc, prng, dtype, swap=False, identity=True):
        super().__init__(name)
        if channels % 2:
            raise ShapeError(f"{name}: coupling needs an even channel count, got {channels}")
        self.c = channels
        self.h = channels // 2
        self.m = channels  # conditioner hidden width
        self.swap = swap
        s1 = 1.0 / np.sqrt(self.h * 27)
        st = 1.0 / np.sqrt(emb_dim)
        self.W1 = alloc((prng.randn((self.m, self.h, 3, 3, 3), np.float64) * s1).astype(dtype), f"{name}.W1")
        self.b1 = alloc(np.zeros(self.m, dtype=dtype), f"{name}.b1")
        self.Wt = alloc((prng.randn((self.m, emb_dim), np.float64) * st).astype(dtype), f"{name}.Wt")
        self.bt = alloc(np.zeros(self.m, dtype=dtype), f"{name}.bt")
        if identity:
            w2 = np.zeros((self.h, self.m, 3, 3, 3), dtype=dtype)
        else:
            w2 = (prng.randn((self.h, self.m, 3, 3, 3), np.float64) * (0.5 / np.sqrt(self.m * 27))).astype(dtype)
        self.W2 = alloc(w2, f"{name}.W2")
        self.b2 = alloc(np.zeros(self.h, dtype=dtype), f"{name}.b2")

    def params(self):
        return [self.W1, self.b1, self.Wt, self.bt, self.W2, self.b2]

    def _halves(self, x):
        if self.swap:
            return x[:, self.h :], x[:, : self.h]
        return x[:, : self.h], x[:, self.h :]

    def _join(self, kept, moved):
        if self.swap:
            return np.concatenate([moved, kept], axis=1)
        return np.concatenate([kept, moved], axis=1)

    def _cond(self, x1, ctx, want_internals=False):
        tb = self.Wt.value @ ctx.temb + self.bt.value
        h1 = conv3d(x1, self.W1.value, padding=1, bias=self.b1.value) + tb.reshape(1, -1, 1, 1, 1)
        a = silu(h1)
        g = conv3d(a, self.W2.value, padding=1, bias=self.b2.value)
        if want_internals:
            return g, (h1, a)
        return g

    def _cond_vjp(self, x1, ctx, gout, sign=1.0):
        """Backward through the conditioner; returns grad w.r.t. x1 and
        accumulates (sign *) parameter and temb gradients."""
        _, (h1, a) = self._cond(x1, ctx, want_internals=True)
        ga, gW2, gb2 = conv3d_vjp(a, self.W2.value, gout, padding=1, bias=self.b2.value)
        gh1 = ga * silu_grad(h1)
        gx1, gW1, gb1 = conv3d_vjp(x1, self.W1.value, gh1, padding=1, bias=self.b1.value)
        gtb = gh1.sum(axis=(0, 2, 3, 4))
        self.W2.grad += sign * gW2
        self.b2.grad += sign * gb2
        self.W1.grad += sign * gW1
        self.b1.grad += sign * gb1
        self.Wt.grad += sign * np.outer(gtb, ctx.temb)
        self.bt.grad += sign * gtb
        ctx.temb_grad += sign * (self.Wt.value.T @ gtb)
        return gx1

    def apply(self, xs, ctx):
        (x,) = xs
        x1, x2 = self._halves(x)
        y2 = x2 + self._cond(np.ascontiguousarray(x1), ctx)
        return (self._join(np.ascontiguousarray(x1), y2),)

    def invert(self, ys, ctx):
        (y,) = ys
        y1, y2 = self._halves(y)
        x2 = y2 - self._cond(np.ascontiguousarray(y1), ctx)
        return (self._join(np.ascontiguousarray(y1), x2),)

    def vjp(self, xs, gys, ctx):
        (x,) = xs
        (gy,) = gys
        x1, _ = self._halves(x)
        g1, g2 = self._halves(gy)
        g2 = np.ascontiguousarray(g2)
        gx1 = g1 + self._cond_vjp(np.ascontiguousarray(x1), ctx, g2, sign=1.0)
        return (self._join(gx1, g2),)

    def inv_vjp(self, ys, gxs, ctx):
        (y,) = ys
        (gx,) = gxs
        y1, _ = self._halves(y)
        g1, g2 = self._halves(gx)
        g2 = np.ascontiguousarray(g2)
        gy1 = g1 - self._cond_vjp(np.ascontiguousarray(y1), ctx, g2, sign=-1.0)
        return (self._join(gy1, g2),)

    def flops_apply(self, xs):
        (x,) = xs
        B = x.shape[0]
        vox = int(np.prod(x.shape[2:]))
        half = (B, self.h) + x.shape[2:]
        mid = (B, self.m) + x.shape[2:]
        fl = conv3d_flops(half, self.W1.value.shape, mid)
        fl += conv3d_flops(mid, self.W2.value.shape, half)
        fl += 2 * self.m * self.Wt.value.shape[1]  # timestep projection
        fl += B * self.m * vox * 5  # bias add + silu
        fl += B * self.h * vox  # coupling add
        return fl


# ---------------------------------------------------------------------------
# orthogonal resampling (Cayley)

DOWN = "down"
UP = "up"
_PHASES = 8  # 2x2x2 spatial block -> 8 channel phases


def space_to_phases(x):
    """[B,C,D,H,W] -> [B,C,8,D/2,H/2,W/2]; even extents required."""
    B, C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise ShapeError(f"resampling needs even spatial extents, got {x.shape[2:]}")
    v = x.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
    return np.ascontiguousarray(v.transpose(0, 1, 3, 5, 7, 2, 4, 6)).reshape(
        B, C, _PHASES, D // 2, H // 2, W // 2
    )


def phases_to_space(v):
    """Inverse of space_to_phases."""
    B, C, P, D2, H2, W2 = v.shape
    v = v.reshape(B, C, 2, 2, 2, D2, H2, W2)
    return np.ascontiguousarray(v.transpose(0, 1, 5, 2, 6, 3, 7, 4)).reshape(
        B, C, 2 * D2, 2 * H2, 2 * W2
    )


def cayley(P: np.ndarray) -> np.ndarray:
    """Q = (I - S)(I + S)^-1 with S = P - P^T, computed in float64. The
    result is orthogonal to machine precision for any parameter matrix."""
    S = P.astype(np.float64)
    S = S - S.T
    eye = np.eye(S.shape[0])
    return (eye - S) @ np.linalg.inv(eye + S)


def cayley_vjp(P: np.ndarray, gQ: np.ndarray) -> np.ndarray:
    """Gradient of L w.r.t. P given dL/dQ for Q = cayley(P)."""
    S = P.astype(np.float64)
    S = S - S.T
    eye = np.eye(S.shape[0])
    M = np.linalg.inv(eye + S)
    Q = (eye - S) @ M
    gS = -(eye + Q).T @ gQ.astype(np.float64) @ M.T
    gP = gS - gS.T
    return gP


class OrthoResample(Node):
    """Learnable orthogonal down/upsampling. Down maps [B,C,D,H,W] to
    [B,8C,D/2,H/2,W/2]; up is the transpose map. Volume-preserving, exact
    norm isometry; with zero parameters Q = I and the op degenerates to a
    pure pixel (un)shuffle."""

    def __init__(self, name, direction, alloc, prng, dtype, identity=True):
        super().__init__(name)
        if direction not in (DOWN, UP):
            raise ShapeError(f"bad resample direction {direction!r}")
        self.direction = direction
        if identity:
            p0 = np.zeros((_PHASES, _PHASES), dtype=dtype)
        else:
            p0 = (0.2 * prng.randn((_PHASES, _PHASES), np.float64)).astype(dtype)
        self.P = alloc(p0, f"{name}.P")

    def params(self):
        return [self.P]

    def q_matrix(self) -> np.ndarray:
        """The orthogonal matrix actually used by the kernels (model dtype)."""
        return cayley(self.P.value).astype(self.P.value.dtype)

    # down: y8 = Q v8 ; up: v = Q^T y8
    def _mix(self, v, transpose):
        Q = self.q_matrix()
        sub = "pq,bcqdhw->bcpdhw" if not transpose else "pq,bcpdhw->bcqdhw"
        return np.einsum(sub, Q, v, optimize=True)

    def apply(self, xs, ctx):
        (x,) = xs
        if self.direction == DOWN:
            v = space_to_phases(x)
            y8 = self._mix(v, transpose=False)
            B, C = x.shape[:2]
            return (np.ascontiguousarray(y8).reshape(B, C * _PHASES, *y8.shape[3:]),)
        B, C8 = x.shape[:2]
        if C8 % _PHASES:
            raise ShapeError(f"{self.name}: channel count {C8} not divisible by 8")
        y8 = x.reshape(B, C8 // _PHASES, _PHASES, *x.shape[2:])
        v = self._mix(y8, transpose=True)
        return (phases_to_space(np.ascontiguousarray(v)),)

    def invert(self, ys, ctx):
        (y,) = ys
        if self.direction == DOWN:
            B, C8 = y.shape[:2]
            y8 = y.reshape(B, C8 // _PHASES, _PHASES, *y.shape[2:])
            v = self._mix(y8, transpose=True)
            return (phases_to_space(np.ascontiguousarray(v)),)
        v = space_to_phases(y)
        y8 = self._mix(v, transpose=False)
        B, C = y.shape[:2]
        return (np.ascontiguousarray(y8).reshape(B, C * _PHASES, *y8.shape[3:]),)

    def _accum_gq(self, a8, b8):
        # dL/dQ[p,q] = sum over fibers of a8[p] * b8[q]
        gQ = np.einsum("bcpdhw,bcqdhw->pq", a8, b8, optimize=True)
        self.P.grad += cayley_vjp(self.P.value, gQ).astype(self.P.value.dtype)

    def vjp(self, xs, gys, ctx):
        (x,) = xs
        (gy,) = gys
        if self.direction == DOWN:
            v = space_to_phases(x)
            B, C8 = gy.shape[:2]
            gy8 = gy.reshape(B, C8 // _PHASES, _PHASES, *gy.shape[2:])
            self._accum_gq(gy8, v)  # y8 = Q v
            gv = self._mix(gy8, transpose=True)
            return (phases_to_space(np.ascontiguousarray(gv)),)
        # up: v = Q^T x8 with x8 the channel-phase layout of the input
        B, C8 = x.shape[:2]
        x8 = x.reshape(B, C8 // _PHASES, _PHASES, *x.shape[2:])
        gv = space_to_phases(gy)  # grad arrives in the spatial layout of the output
        self._accum_gq(x8, gv)  # dL/dQ[p,q] = x8[p] gv[q]
        gx8 = self._mix(gv, transpose=False)
        return (np.ascontiguousarray(gx8).reshape(B, C8, *x.shape[2:]),)

    def inv_vjp(self, ys, gxs, ctx):
        (y,) = ys
        (gx,) = gxs
        if self.direction == DOWN:
            # inverse is v = Q^T y8, spatialized: gy8 = Q gv; dQ[p,q] += y8[p] gv[q]
            B, C8 = y.shape[:2]
            y8 = y.reshape(B, C8 // _PHASES, _PHASES, *y.shape[2:])
            gv = space_to_phases(gx)
            self._accum_gq(y8, gv)
            gy8 = self._mix(gv, transpose=False)
            return (np.ascontiguousarray(gy8).reshape(B, C8, *y.shape[2:]),)
        # up-inverse is x8 = Q v8 from spatial y: gv = Q^T gx8; dQ[p,q] += gx8[p] v8[q]
        v8 = space_to_phases(y)
        B, C8 = gx.shape[:2]
        gx8 = gx.reshape(B, C8 // _PHASES, _PHASES, *gx.shape[2:])
        self._accum_gq(gx8, v8)
        gv = self._mix(gx8, transpose=True)
        return (phases_to_space(np.ascontiguousarray(gv)),)

    def flops_apply(self, xs):
        (x,) = xs
        return 2 * _PHASES * int(np.prod(x.shape)) + 200  # phase mix + Cayley solve


# ---------------------------------------------------------------------------
# channel routing


class SplitChannels(Node):
    """Pop one tensor, push (skip, rest). Exactly invertible by concat."""

    n_in = 1
    n_out = 2

    def __init__(self, name, c_skip):
        super().__init__(name)
        self.c_skip = c_skip

    def apply(self, xs, ctx):
        (x,) = xs
        if x.shape[1] <= self.c_skip:
            raise ShapeError(f"{self.name}: cannot split {self.c_skip} of {x.shape[1]} channels")
        return (
            np.ascontiguousarray(x[:, : self.c_skip]),
            np.ascontiguousarray(x[:, self.c_skip :]),
        )

    def invert(self, ys, ctx):
        s, d = ys
        return (np.concatenate([s, d], axis=1),)

    def vjp(self, xs, gys, ctx):
        gs, gd = gys
        return (np.concatenate([gs, gd], axis=1),)

    def inv_vjp(self, ys, gxs, ctx):
        (gx,) = gxs
        return (
            np.ascontiguousarray(gx[:, : self.c_skip]),
            np.ascontiguousarray(gx[:, self.c_skip :]),
        )

    def flops_apply(self, xs):
        return 0


class ConcatSkip(Node):
    """Pop (skip, up), push their channel concatenation. The plain variant
    of the attention concat used on levels without attention."""

    n_in = 2
    n_out = 1

    def __init__(self, name, c_skip):
        super().__init__(name)
        self.c_skip = c_skip

    def apply(self, xs, ctx):
        s, u = xs
        if s.shape[2:] != u.shape[2:]:
            raise ShapeError(f"{self.name}: spatial mismatch {s.shape} vs {u.shape}")
        return (np.concatenate([s, u], axis=1),)

    def invert(self, ys, ctx):
        (y,) = ys
        return (
            np.ascontiguousarray(y[:, : self.c_skip]),
            np.ascontiguousarray(y[:, self.c_skip :]),
        )

    def vjp(self, xs, gys, ctx):
        (gy,) = gys
        return (
            np.ascontiguousarray(gy[:, : self.c_skip]),
            np.ascontiguousarray(gy[:, self.c_skip :]),
        )

    def inv_vjp(self, ys, gxs, ctx):
        gs, gu = gxs
        return (np.concatenate([gs, gu], axis=1),)

    def flops_apply(self, xs):
        return 0


# ---------------------------------------------------------------------------
# invertible attention concat


def parity_indices(spatial):
    """Flat indices of even/odd voxels under (i+j+k) mod 2 checkerboard."""
    d, h, w = np.indices(spatial)
    even = ((d + h + w) % 2 == 0).ravel()
    return np.nonzero(even)[0], np.nonzero(~even)[0]


class AttnConcat(Node):
    """Checkerboard attention coupling fused with the skip concatenation.

    apply: (skip, up) -> concat(scale_odd_sites(skip), up)
    where the odd-parity voxels of the skip are multiplied by
    f(y1) = exp(gamma * tanh(attention(y1))) computed from the even-parity
    voxels. f is bounded away from 0, so the inverse divides safely.
    """

    n_in = 2
    n_out = 1

    def __init__(self, name, c_skip, alloc, prng, dtype, gamma=1.0, identity=True):
        super().__init__(name)
        self.c_skip = c_skip
        self.gamma = gamma
        C = c_skip
        s = 1.0 / np.sqrt(C)
        self.Wq = alloc((prng.randn((C, C), np.float64) * s).astype(dtype), f"{name}.Wq")
        self.bq = alloc(np.zeros(C, dtype=dtype), f"{name}.bq")
        self.Wk = alloc((prng.randn((C, C), np.float64) * s).astype(dtype), f"{name}.Wk")
        self.bk = alloc(np.zeros(C, dtype=dtype), f"{name}.bk")
        self.Wv = alloc((prng.randn((C, C), np.float64) * s).astype(dtype), f"{name}.Wv")
        self.bv = alloc(np.zeros(C, dtype=dtype), f"{name}.bv")
        if identity:
            wo = np.zeros((C, C), dtype=dtype)
        else:
            wo = (prng.randn((C, C), np.float64) * (0.5 * s)).astype(dtype)
        self.Wo = alloc(wo, f"{name}.Wo")
        self.bo = alloc(np.zeros(C, dtype=dtype), f"{name}.bo")
        self._idx_cache = {}

    def params(self):
        return [self.Wq, self.bq, self.Wk, self.bk, self.Wv, self.bv, self.Wo, self.bo]

    def _indices(self, spatial):
        if spatial not in self._idx_cache:
            ie, io = parity_indices(spatial)
            if len(ie) != len(io):
                raise ShapeError(
                    f"{self.name}: checkerboard needs even voxel parity counts, got {spatial}"
                )
            self._idx_cache[spatial] = (ie, io)
        return self._idx_cache[spatial]

    # tokens T: [B, N, C] over even-parity voxels
    def _attn(self, T):
        C = T.shape[-1]
        Q = T @ self.Wq.value.T + self.bq.value
        K = T @ self.Wk.value.T + self.bk.value
        V = T @ self.Wv.value.T + self.bv.value
        Z = (Q @ K.transpose(0, 2, 1)) / np.sqrt(C)
        A = softmax(Z, axis=-1)
        H = A @ V
        S = H @ self.Wo.value.T + self.bo.value
        return S

    def _attn_vjp(self, T, gS):
        """Backward through the attention stack; accumulates parameter
        grads (with whatever sign gS carries) and returns grad w.r.t. T."""
        C = T.shape[-1]
        scale = 1.0 / np.sqrt(C)
        Q = T @ self.Wq.value.T + self.bq.value
        K = T @ self.Wk.value.T + self.bk.value
        V = T @ self.Wv.value.T + self.bv.value
        A = softmax((Q @ K.transpose(0, 2, 1)) * scale, axis=-1)
        H = A @ V
        self.Wo.grad += np.einsum("bnc,bne->ce", gS, H, optimize=True)
        self.bo.grad += gS.sum(axis=(0, 1))
        gH = gS @ self.Wo.value
        gA = gH @ V.transpose(0, 2, 1)
        gV = A.transpose(0, 2, 1) @ gH
        gZ = softmax_vjp(A, gA, axis=-1) * scale
        gQ = gZ @ K
        gK = gZ.transpose(0, 2, 1) @ Q
        self.Wq.grad += np.einsum("bnc,bnd->cd", gQ, T, optimize=True)
        self.bq.grad += gQ.sum(axis=(0, 1))
        self.Wk.grad += np.einsum("bnc,bnd->cd", gK, T, optimize=True)
        self.bk.grad += gK.sum(axis=(0, 1))
        self.Wv.grad += np.einsum("bnc,bnd->cd", gV, T, optimize=True)
        self.bv.grad += gV.sum(axis=(0, 1))
        return gQ @ self.Wq.value + gK @ self.Wk.value + gV @ self.Wv.value

    def _split(self, s):
        ie, io = self._indices(s.shape[2:])
        flat = s.reshape(s.shape[0], s.shape[1], -1)
        return flat[:, :, ie], flat[:, :, io]

    def _merge(self, y1, y2, spatial):
        ie, io = self._indices(spatial)
        B, C = y1.shape[:2]
        out = np.empty((B, C, int(np.prod(spatial))), dtype=y1.dtype)
        out[:, :, ie] = y1
        out[:, :, io] = y2
        return out.reshape(B, C, *spatial)

    def _scale_factor(self, y1):
        """f(y1) in channel-major layout [B,C,N]; recomputed identically by
        forward, inverse, and both VJPs."""
        T = np.ascontiguousarray(y1.transpose(0, 2, 1))
        S = self._attn(T)
        f = np.exp(self.gamma * np.tanh(S))
        return f.transpose(0, 2, 1), T, S

    def apply(self, xs, ctx):
        s, u = xs
        if s.ndim != 5 or s.shape[1] != self.c_skip:
            raise ShapeError(f"{self.name}: bad skip shape {s.shape}")
        if s.shape[2:] != u.shape[2:]:
            raise ShapeError(f"{self.name}: spatial mismatch {s.shape} vs {u.shape}")
        y1, y2 = self._split(s)
        fT, _, _ = self._scale_factor(y1)
        a = y2 * fT
        ytil = self._merge(y1, a, s.shape[2:])
        return (np.concatenate([ytil, u], axis=1),)

    def invert(self, ys, ctx):
        (y,) = ys
        ytil = y[:, : self.c_skip]
        u = np.ascontiguousarray(y[:, self.c_skip :])
        y1, a = self._split(ytil)
        fT, _, _ = self._scale_factor(y1)
        y2 = div(a, fT)
        s = self._merge(y1, y2, ytil.shape[2:])
        return (s, u)

    def vjp(self, xs, gys, ctx):
        s, u = xs
        (gy,) = gys
        spatial = s.shape[2:]
        y1, y2 = self._split(s)
        fT, T, S = self._scale_factor(y1)
        g_yt = gy[:, : self.c_skip]
        g_u = np.ascontiguousarray(gy[:, self.c_skip :])
        g1, ga = self._split(g_yt)
        g_y2 = ga * fT
        g_fT = ga * y2
        gS = g_fT.transpose(0, 2, 1) * np.exp(self.gamma * np.tanh(S)) * (
            self.gamma * (1.0 - np.tanh(S) ** 2)
        )
        gT = self._attn_vjp(T, gS)
        g_y1 = g1 + gT.transpose(0, 2, 1)
        g_s = self._merge(g_y1, g_y2, spatial)
        return (g_s, g_u)

    def inv_vjp(self, ys, gxs, ctx):
        (y,) = ys
        gs, gu = gxs
        ytil = y[:, : self.c_skip]
        spatial = ytil.shape[2:]
        y1, a = self._split(ytil)
        fT, T, S = self._scale_factor(y1)
        g1, g2 = self._split(gs)
        g_a = g2 / fT
        g_fT = -g2 * a / fT**2
        gS = g_fT.transpose(0, 2, 1) * np.exp(self.gamma * np.tanh(S)) * (
            self.gamma * (1.0 - np.tanh(S) ** 2)
        )
        gT = self._attn_vjp(T, gS)
        g_y1 = g1 + gT.transpose(0, 2, 1)
        g_yt = self._merge(g_y1, g_a, spatial)
        return (np.concatenate([g_yt, gu], axis=1),)

    @staticmethod
    def _attn_flops(B, C, N):
        fl = B * (3 * (2 * N * C * C + N * C))  # qkv projections
        fl += B * (2 * N * N * C + 6 * N * N)  # scores + softmax
        fl += B * (2 * N * N * C)  # weights @ values
        fl += B * (2 * N * C * C + N * C)  # output projection
        fl += 4 * B * N * C  # tanh/exp bound + scaling
        return fl

    def flops_apply(self, xs):
        s, _ = xs
        B, C = s.shape[:2]
        N = int(np.prod(s.shape[2:])) // 2
        return self._attn_flops(B, C, N)

    def flops_invert(self, ys):
        (y,) = ys
        B = y.shape[0]
        N = int(np.prod(y.shape[2:])) // 2
        return self._attn_flops(B, self.c_skip, N)


# ---------------------------------------------------------------------------
# stored conv stacks (head / tail)


class ConvStack(Node):
    """conv(k=3) -> silu -> conv(k=3). Non-invertible; its input is always
    stored for the backward pass.

    With ``passthrough=True`` the stack starts as an exact identity on the
    channel mean: the first conv copies +mean(x) into one half of the mid
    channels and -mean(x) into the other, and the second conv takes the
    paired difference, so silu(z) - silu(-z) = z cancels the nonlinearity.
    A head+tail pair initialized this way makes the whole denoiser start
    at eps_hat = x, which keeps the ancestral sampler stable at the
    high-beta end of the schedule from the first optimizer step on. Small
    random noise on top breaks channel symmetry."""

    kind = KIND_STORED

    def __init__(self, name, c_in, c_mid, c_out, alloc, prng, dtype, passthrough=False):
        super().__init__(name)
        if passthrough and c_mid % 2:
            raise ShapeError(f"{name}: passthrough stack needs even mid channels")
        s1 = 1.0 / np.sqrt(c_in * 27)
        s2 = 1.0 / np.sqrt(c_mid * 27)
        w1 = prng.randn((c_mid, c_in, 3, 3, 3), np.float64) * s1
        w2 = prng.randn((c_out, c_mid, 3, 3, 3), np.float64) * s2
        if passthrough:
            w1 *= 0.05
            w2 *= 0.05
            half = c_mid // 2
            for j in range(c_mid):
                sign = 1.0 if j < half else -1.0
                w1[j, :, 1, 1, 1] += sign / c_in
                w2[:, j, 1, 1, 1] += 2.0 * sign / c_mid
        self.W1 = alloc(w1.astype(dtype), f"{name}.W1")
        self.b1 = alloc(np.zeros(c_mid, dtype=dtype), f"{name}.b1")
        self.W2 = alloc(w2.astype(dtype), f"{name}.W2")
        self.b2 = alloc(np.zeros(c_out, dtype=dtype), f"{name}.b2")

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def apply(self, xs, ctx):
        (x,) = xs
        h = conv3d(x, self.W1.value, padding=1, bias=self.b1.value)
        return (conv3d(silu(h), self.W2.value, padding=1, bias=self.b2.value),)

    def vjp(self, xs, gys, ctx):
        (x,) = xs
        (gy,) = gys
        h = conv3d(x, self.W1.value, padding=1, bias=self.b1.value)
        a = silu(h)
        ga, gW2, gb2 = conv3d_vjp(a, self.W2.value, gy, padding=1, bias=self.b2.value)
        gh = ga * silu_grad(h)
        gx, gW1, gb1 = conv3d_vjp(x, self.W1.value, gh, padding=1, bias=self.b1.value)
        self.W1.grad += gW1
        self.b1.grad += gb1
        self.W2.grad += gW2
        self.b2.grad += gb2
        return (gx,)

    def flops_apply(self, xs):
        (x,) = xs
        B = x.shape[0]
        vox = int(np.prod(x.shape[2:]))
        mid = (B, self.W1.value.shape[0]) + x.shape[2:]
        out = (B, self.W2.value.shape[0]) + x.shape[2:]
        fl = conv3d_flops(x.shape, self.W1.value.shape, mid)
        fl += conv3d_flops(mid, self.W2.value.shape, out)
        fl += 4 * B * self.W1.value.shape[0] * vox  # silu
        return fl
