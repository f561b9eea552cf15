"""Invertible U-Net assembly.

Topology: a stored (non-invertible) conv head expands 1 channel to the
base width, then `levels` invertible stages walk down, a coupling stack
sits at the bottleneck, the mirrored stages walk back up, and a stored
conv tail returns to 1 channel. Each down stage runs coupling blocks,
splits channels into (skip, deeper), and orthogonally downsamples the
deeper part (x8 channels, /2 per spatial axis); each up stage orthogonally
upsamples, re-attaches the skip (through the invertible attention coupling
on the selected levels, plain concat elsewhere), and runs coupling blocks.

Channel bookkeeping is driven by the channel schedule: the part of level i
that proceeds deeper has schedule[i+1]/8 channels, so the skip keeps the
rest. The final level, which the schedule does not constrain, splits in
half, making the bottleneck width 4x the last schedule entry. The trunk
(everything between head and tail) is a bijection for a fixed timestep
embedding, which is what the recompute backward strategy exploits.

Timestep conditioning enters only through coupling-conditioner biases, so
the trunk stays exactly invertible for a fixed t; the inverse pass is also
callable with a zero ("null") embedding, matching the convention that the
inverse takes no timestamp.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    DOWN,
    UP,
    AttnConcat,
    ConcatSkip,
    ConvStack,
    CouplingBlock,
    OrthoResample,
    SplitChannels,
    StepContext,
    TimeEmbed,
    null_context,
)
from .errors import ConfigError, FormatError, ShapeError
from .revgraph import (
    MODE_RECOMPUTE,
    Param,
    Tape,
    chain_inverse,
    chain_inverse_vjp,
)

_DTYPES = {"f32": np.float32, "f64": np.float64}
CKPT_MAGIC = b"IDMCKPT1"


def default_attn_levels(levels: int) -> tuple:
    """The two deepest levels (smallest spatial extent)."""
    return tuple(sorted({max(0, levels - 2), levels - 1}))


@dataclass(frozen=True)
class IUNetConfig:
    volume_edge: int = 16
    levels: int = 3
    channel_schedule: tuple = (8, 16, 32)
    blocks_per_level: int = 2
    attn_levels: tuple = (1, 2)
    emb_dim: int = 16
    dtype: str = "f32"

    @property
    def base_channels(self) -> int:
        return self.channel_schedule[0]

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def validate(self):
        cs = self.channel_schedule
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(cs) != self.levels:
            raise ConfigError(
                f"channel_schedule length {len(cs)} != levels {self.levels}"
            )
        if self.volume_edge % (1 << self.levels):
            raise ConfigError(
                f"volume_edge {self.volume_edge} not divisible by 2^levels"
            )
        if self.emb_dim % 2 or self.emb_dim < 2:
            raise ConfigError(f"emb_dim must be even and >= 2, got {self.emb_dim}")
        if any(c % 2 for c in cs):
            raise ConfigError(f"channel schedule entries must be even, got {cs}")
        for i in range(self.levels - 1):
            if cs[i + 1] % 8:
                raise ConfigError(
                    f"schedule[{i + 1}]={cs[i + 1]} must be divisible by 8 "
                    "(orthogonal downsampling multiplies channels by 8)"
                )
            if cs[i + 1] // 8 >= cs[i]:
                raise ConfigError(
                    f"schedule[{i + 1}]={cs[i + 1]} leaves no skip channels at level {i}"
                )
        if not set(self.attn_levels) <= set(range(self.levels)):
            raise ConfigError(
                f"attn_levels {self.attn_levels} outside 0..{self.levels - 1}"
            )
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level must be >= 1")

    # channel bookkeeping ----------------------------------------------------

    def down_channels(self, i: int) -> int:
        """Channels of level i that proceed deeper (pre-downsampling)."""
        cs = self.channel_schedule
        return cs[i + 1] // 8 if i < self.levels - 1 else cs[-1] // 2

    def skip_channels(self, i: int) -> int:
        return self.channel_schedule[i] - self.down_channels(i)

    def bottleneck_channels(self) -> int:
        return 8 * self.down_channels(self.levels - 1)

    def level_edge(self, i: int) -> int:
        return self.volume_edge >> i


def desk_config(**overrides) -> IUNetConfig:
    """The desk-scale default: 16^3 volumes, 3 levels, attention on the two
    deepest levels."""
    return IUNetConfig(**overrides)


class IUNet:
    """The assembled model. Owns all parameters, the node chain, and the
    execution state of the most recent forward pass."""

    def __init__(self, config: IUNetConfig, seed: int = 0, identity_init: bool = True):
        config.validate()
        self.config = config
        self.seed = seed
        self.identity_init = identity_init
        self.params: list[Param] = []
        self._build()
        self._tape = None
        self._ctx = None
        self._side = None

    # -- construction --------------------------------------------------------

    def _alloc(self, value, name):
        p = Param(len(self.params), value, name)
        self.params.append(p)
        return p

    def _build(self):
        from .rng import Prng

        cfg = self.config
        prng = Prng(self.seed ^ 0x1D2B_5F8A)
        dt = cfg.np_dtype
        ident = self.identity_init
        alloc = self._alloc
        self.temb = TimeEmbed(cfg.emb_dim, alloc, prng, dt)
        base = cfg.base_channels
        nodes = [ConvStack("head", 1, base, base, alloc, prng, dt, passthrough=True)]
        for i in range(cfg.levels):
            c = cfg.channel_schedule[i]
            s, d = cfg.skip_channels(i), cfg.down_channels(i)
            assert s + d == c, "skip/deeper split must partition the level channels"
            for j in range(cfg.blocks_per_level):
                nodes.append(
                    CouplingBlock(
                        f"down{i}.cpl{j}", c, cfg.emb_dim, alloc, prng, dt,
                        swap=bool(j % 2), identity=ident,
                    )
                )
            nodes.append(SplitChannels(f"down{i}.split", s))
            nodes.append(OrthoResample(f"down{i}.ortho", DOWN, alloc, prng, dt, identity=ident))
        cb = cfg.bottleneck_channels()
        for j in range(cfg.blocks_per_level):
            nodes.append(
                CouplingBlock(
                    f"mid.cpl{j}", cb, cfg.emb_dim, alloc, prng, dt,
                    swap=bool(j % 2), identity=ident,
                )
            )
        for i in reversed(range(cfg.levels)):
            c = cfg.channel_schedule[i]
            s = cfg.skip_channels(i)
            nodes.append(OrthoResample(f"up{i}.ortho", UP, alloc, prng, dt, identity=ident))
            if i in cfg.attn_levels:
                nodes.append(AttnConcat(f"up{i}.attn", s, alloc, prng, dt, identity=ident))
            else:
                nodes.append(ConcatSkip(f"up{i}.concat", s))
            for j in range(cfg.blocks_per_level):
                nodes.append(
                    CouplingBlock(
                        f"up{i}.cpl{j}", c, cfg.emb_dim, alloc, prng, dt,
                        swap=bool(j % 2), identity=ident,
                    )
                )
        nodes.append(ConvStack("tail", base, base, 1, alloc, prng, dt, passthrough=True))
        self.nodes = nodes

    @property
    def trunk_nodes(self):
        return self.nodes[1:-1]

    def zero_grads(self):
        for p in self.params:
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params)

    # -- execution -------------------------------------------------------------

    def _check_input(self, x):
        E = self.config.volume_edge
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (E, E, E):
            raise ShapeError(f"expected input [B,1,{E},{E},{E}], got {x.shape}")
        if x.dtype != self.config.np_dtype:
            raise ShapeError(f"input dtype {x.dtype} != model dtype {self.config.dtype}")

    def forward(self, x, t: int, mode: str = MODE_RECOMPUTE, verify: bool = False,
                keep_trunk_input: bool = False):
        """Noise prediction for volume batch x at timestep t. Retains the
        execution tape so ``backward`` can follow."""
        self._check_input(x)
        temb = self.temb.forward(int(t))
        ctx = StepContext(temb)
        keep = {1} if keep_trunk_input else set()
        tape = Tape(self.nodes, mode, verify=verify, keep_inputs_of=keep)
        side = (temb, ctx.temb_grad) + self.temb._saved
        tape.ledger.retain(side)  # conditioning buffers: stored, tiny, mode-independent
        y = tape.forward(x, ctx)
        self._tape, self._ctx, self._side = tape, ctx, side
        return y

    def backward(self, gy, inject=None):
        """Backprop through the most recent forward; accumulates parameter
        grads and returns the gradient w.r.t. the input volume."""
        gx = self._tape.backward(gy, self._ctx, inject=inject)
        self.temb.backward(self._ctx.temb_grad)
        self._tape.ledger.release(self._side)
        self._tape.ledger.tick()
        return gx

    def predict(self, x, t: int):
        """Forward pass for inference; the tape is discarded."""
        y = self.forward(x, t, MODE_RECOMPUTE)
        self._tape = self._ctx = self._side = None
        return y

    def memory_report(self):
        return self._tape.report()

    def flops(self) -> int:
        return self._tape.flops if self._tape else 0

    def trunk_output(self):
        """Input of the stored tail node (available in both modes)."""
        return self._tape.stash[len(self.nodes) - 1][0]

    def trunk_input(self):
        """Output of the head (= stash of node 1; requires keep_trunk_input
        under the recompute strategy)."""
        if 1 not in self._tape.stash:
            raise ShapeError("trunk input was not retained; pass keep_trunk_input=True")
        return self._tape.stash[1][0]

    # -- inverse surface ---------------------------------------------------------

    def _inverse_ctx(self, t) -> StepContext:
        if t is None:
            return null_context(self.config.emb_dim, self.config.np_dtype)
        return StepContext(self.temb.value(int(t)))

    def trunk_inverse(self, v, t=None, record: bool = False):
        """Invert the invertible trunk (head/tail are excluded by
        construction). ``t=None`` uses the zero embedding."""
        ctx = self._inverse_ctx(t)
        x, rec, fl = chain_inverse(self.trunk_nodes, v, ctx, record=record)
        return (x, rec, ctx, fl) if record else x

    def trunk_inverse_vjp(self, rec, ctx, gx):
        """Differentiate through a recorded inverse pass; accumulates
        parameter grads, returns (grad w.r.t. v, flops)."""
        return chain_inverse_vjp(self.trunk_nodes, rec, gx, ctx)

    def trunk_forward(self, h, t=None):
        """Apply only the invertible trunk to a trunk-input tensor (used by
        round-trip verification)."""
        ctx = self._inverse_ctx(t)
        stack = [h]
        for node in self.trunk_nodes:
            xs = tuple(stack[len(stack) - node.n_in :])
            del stack[len(stack) - node.n_in :]
            stack.extend(node.apply(xs, ctx))
        if len(stack) != 1:
            raise ShapeError("trunk left multiple values on the stack")
        return stack[0]


# ---------------------------------------------------------------------------
# parameter-count formula


def count_params_formula(cfg: IUNetConfig) -> int:
    """Closed-form total parameter count for a config; must equal the sum
    of actual parameter sizes (asserted in tests)."""
    b = cfg.base_channels
    d = cfg.emb_dim

    def conv(co, ci):
        return co * ci * 27 + co

    def coupling(c):
        h, m = c // 2, c
        return conv(m, h) + (m * d + m) + conv(h, m)

    n = conv(b, 1) + conv(b, b)  # head
    n += conv(b, b) + conv(1, b)  # tail
    n += 2 * (d * d + d)  # time MLP
    for i in range(cfg.levels):
        n += 2 * cfg.blocks_per_level * coupling(cfg.channel_schedule[i])
        n += 2 * 64  # down + up Cayley parameter matrices
        if i in cfg.attn_levels:
            s = cfg.skip_channels(i)
            n += 4 * s * s + 4 * s
    n += cfg.blocks_per_level * coupling(cfg.bottleneck_channels())
    return n


# ---------------------------------------------------------------------------
# checkpoints


_CONFIG_KEYS = (
    "attn_levels",
    "blocks_per_level",
    "channel_schedule",
    "dtype",
    "emb_dim",
    "levels",
    "volume_edge",
)


def _config_text(cfg: IUNetConfig) -> str:
    vals = {
        "attn_levels": ",".join(str(i) for i in cfg.attn_levels),
        "blocks_per_level": str(cfg.blocks_per_level),
        "channel_schedule": ",".join(str(c) for c in cfg.channel_schedule),
        "dtype": cfg.dtype,
        "emb_dim": str(cfg.emb_dim),
        "levels": str(cfg.levels),
        "volume_edge": str(cfg.volume_edge),
    }
    return "".join(f"{k}={vals[k]}\n" for k in _CONFIG_KEYS)


def _config_from_text(text: str) -> IUNetConfig:
    kv = {}
    for line in text.strip().splitlines():
        k, _, v = line.partition("=")
        kv[k] = v
    try:
        return IUNetConfig(
            volume_edge=int(kv["volume_edge"]),
            levels=int(kv["levels"]),
            channel_schedule=tuple(int(c) for c in kv["channel_schedule"].split(",")),
            blocks_per_level=int(kv["blocks_per_level"]),
            attn_levels=tuple(int(i) for i in kv["attn_levels"].split(",")) if kv["attn_levels"] else (),
            emb_dim=int(kv["emb_dim"]),
            dtype=kv["dtype"],
        )
    except KeyError as e:
        raise FormatError(f"checkpoint config missing key {e.args[0]!r}") from None


def checkpoint_save(model: IUNet, path) -> None:
    cfg_text = _config_text(model.config).encode()
    out = [CKPT_MAGIC, struct.pack("<I", len(cfg_text)), cfg_text]
    out.append(struct.pack("<I", len(model.params)))
    le = "<f4" if model.config.dtype == "f32" else "<f8"
    for p in model.params:
        out.append(struct.pack("<IB", p.pid, p.value.ndim))
        out.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        out.append(np.ascontiguousarray(p.value).astype(le).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def checkpoint_load(path) -> IUNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (clen,) = struct.unpack_from("<I", raw, 8)
    off = 12
    if len(raw) < off + clen + 4:
        raise FormatError(f"{path}: truncated checkpoint header")
    cfg = _config_from_text(raw[off : off + clen].decode())
    off += clen
    (n_params,) = struct.unpack_from("<I", raw, off)
    off += 4
    model = IUNet(cfg, seed=0)
    if n_params != len(model.params):
        raise FormatError(
            f"{path}: checkpoint has {n_params} params, model expects {len(model.params)}"
        )
    le = np.dtype("<f4" if cfg.dtype == "f32" else "<f8")
    for p in model.params:
        if len(raw) < off + 5:
            raise FormatError(f"{path}: truncated at param {p.pid}")
        pid, ndim = struct.unpack_from("<IB", raw, off)
        off += 5
        if pid != p.pid:
            raise FormatError(f"{path}: parameter id mismatch ({pid} != {p.pid})")
        if len(raw) < off + 4 * ndim:
            raise FormatError(f"{path}: truncated dims at param {pid}")
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        if dims != p.value.shape:
            raise FormatError(f"{path}: shape mismatch at param {pid}")
        nbytes = int(np.prod(dims)) * le.itemsize
        if len(raw) < off + nbytes:
            raise FormatError(f"{path}: truncated data at param {pid}")
        p.value[...] = np.frombuffer(raw[off : off + nbytes], dtype=le).reshape(dims)
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return model
