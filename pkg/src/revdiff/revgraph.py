"""Reverse-mode execution engine with two backward strategies and
byte-exact activation accounting.

A model's trunk is a chain of nodes acting on a value *stack*: plain
blocks pop one tensor and push one, a channel split pops one and pushes
two (the skip stays buried until the matching concat pops it), so a U-Net
with skips is still a flat chain. Every node is either

  * ``stored``     -- non-bijective; its inputs are kept for the backward
                      pass no matter what, or
  * ``invertible`` -- a bijection; under the recompute strategy its inputs
                      are dropped after the forward pass and rebuilt from
                      its outputs via ``invert`` when the backward pass
                      arrives.

The ledger counts bytes of every buffer the tape holds between node
boundaries: the value stack, the gradient stack during backward, and the
stored-activation stash. Parameters, optimizer state and kernel-internal
transients are out of scope, which makes the counts deterministic and
platform-independent. Peak and a (op index, live bytes) timeline are
reported per execution.

Tolerances for reconstruction drift checks (max-norm, relative):
1e-3 for float32, 1e-6 for float64; drift beyond 10x the tolerance raises
``ReconstructionError``. The verification stash used for that check is
debug instrumentation and is deliberately left out of the byte ledger.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ReconstructionError, ShapeError

MODE_STORE = "store"
MODE_RECOMPUTE = "invertible"
MODES = (MODE_STORE, MODE_RECOMPUTE)

KIND_STORED = "stored"
KIND_INVERTIBLE = "invertible"

_RTOL = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}


def mode_rtol(dtype) -> float:
    return _RTOL[np.dtype(dtype)]


class Param:
    """A learnable tensor with its gradient accumulator."""

    __slots__ = ("pid", "value", "grad", "name")

    def __init__(self, pid: int, value: np.ndarray, name: str = ""):
        self.pid = pid
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class MemoryReport:
    """Live-activation accounting for one forward(+backward) execution."""

    mode: str
    peak_bytes: int
    timeline: list = field(default_factory=list)  # [(op index, live bytes)]

    def final_live_bytes(self) -> int:
        return self.timeline[-1][1] if self.timeline else 0


class Ledger:
    """Instrumented allocation counter for activation buffers."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.timeline = []
        self._op = 0

    def retain(self, arrs):
        for a in arrs:
            self.live += a.nbytes
        if self.live > self.peak:
            self.peak = self.live

    def release(self, arrs):
        for a in arrs:
            self.live -= a.nbytes

    def tick(self):
        self.timeline.append((self._op, self.live))
        self._op += 1


class Node:
    """Base computation node. Subclasses implement the pure maps and their
    vector-Jacobian products; parameter gradients accumulate in place."""

    kind = KIND_INVERTIBLE
    n_in = 1
    n_out = 1

    def __init__(self, name: str):
        self.name = name

    def params(self):
        return []

    # each of these takes/returns tuples of ndarrays
    def apply(self, xs, ctx):
        raise NotImplementedError

    def invert(self, ys, ctx):
        raise NotImplementedError(f"{self.name} is not invertible")

    def vjp(self, xs, gys, ctx):
        raise NotImplementedError

    def inv_vjp(self, ys, gxs, ctx):
        """VJP of ``invert``: grads w.r.t. the inverse pass's inputs (= the
        node outputs), given grads w.r.t. its outputs (= the node inputs).
        Only needed when a loss differentiates through an inverse pass."""
        raise NotImplementedError(f"{self.name} has no inverse-pass VJP")

    # analytic flop counts, from actual shapes at execution time
    def flops_apply(self, xs):
        return 0

    def flops_invert(self, ys):
        return self.flops_apply(ys)

    def flops_vjp(self, xs):
        return 3 * self.flops_apply(xs)

    def flops_inv_vjp(self, ys):
        return 3 * self.flops_invert(ys)


def _max_rel_drift(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / scale


class Tape:
    """One forward/backward execution of a node chain.

    ``keep_inputs_of`` forces the inputs of specific node indices to be
    stored even under the recompute strategy (used to keep the trunk input
    around when a reconstruction loss needs it).
    """

    def __init__(self, nodes, mode: str, verify: bool = False, keep_inputs_of=()):
        if mode not in MODES:
            raise ShapeError(f"unknown backprop mode {mode!r}")
        self.nodes = list(nodes)
        self.mode = mode
        self.verify = verify
        self.keep = set(keep_inputs_of)
        self.stash = {}
        self._vstash = {}  # debug copies for drift checks; not in the ledger
        self.vstack = []
        self.ledger = Ledger()
        self.flops = 0
        self._ran_forward = False

    # -- helpers -----------------------------------------------------------

    def _push(self, arrs, counted=True):
        for a in arrs:
            self.vstack.append(a)
        if counted:
            self.ledger.retain(arrs)

    def _pop(self, n, counted=True):
        arrs = tuple(self.vstack[len(self.vstack) - n :])
        del self.vstack[len(self.vstack) - n :]
        if counted:
            self.ledger.release(arrs)
        return arrs

    def _stores(self, idx: int, node: Node) -> bool:
        return (
            self.mode == MODE_STORE or node.kind == KIND_STORED or idx in self.keep
        )

    # -- execution ---------------------------------------------------------

    def forward(self, x: np.ndarray, ctx=None) -> np.ndarray:
        self.ledger.tick()  # baseline entry: nothing held yet
        self._push((x,))
        self.ledger.tick()
        for idx, node in enumerate(self.nodes):
            xs = self._pop(node.n_in, counted=False)
            ys = node.apply(xs, ctx)
            self.flops += node.flops_apply(xs)
            if self._stores(idx, node):
                self.stash[idx] = xs  # ownership moves stack -> stash
            else:
                self.ledger.release(xs)
                if self.verify and node.kind == KIND_INVERTIBLE:
                    self._vstash[idx] = tuple(a.copy() for a in xs)
            self._push(ys)
            self.ledger.tick()
        self._ran_forward = True
        if len(self.vstack) != 1:
            raise ShapeError(
                f"node chain left {len(self.vstack)} values on the stack; expected 1"
            )
        return self.vstack[-1]

    def backward(self, gy: np.ndarray, ctx=None, inject=None) -> np.ndarray:
        """Walk the chain output-to-input, producing the gradient w.r.t. the
        chain input and accumulating parameter gradients. ``inject`` maps a
        node index to an extra gradient added to that node's input-gradient
        (used to splice reconstruction-loss terms into the main pass)."""
        if not self._ran_forward:
            raise ShapeError("backward called before forward")
        inject = inject or {}
        gstack = [gy]
        self.ledger.retain((gy,))
        self.ledger.tick()
        for idx in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[idx]
            outs = self._pop(node.n_out)
            gouts = tuple(gstack[len(gstack) - node.n_out :])
            del gstack[len(gstack) - node.n_out :]
            self.ledger.release(gouts)
            if idx in self.stash:
                ins = self.stash.pop(idx)  # bytes already counted
            else:
                ins = node.invert(outs, ctx)
                self.flops += node.flops_invert(outs)
                self.ledger.retain(ins)
                if self.verify and idx in self._vstash:
                    rtol = mode_rtol(ins[0].dtype)
                    for got, ref in zip(ins, self._vstash[idx]):
                        drift = _max_rel_drift(got, ref)
                        if drift > 10.0 * rtol:
                            raise ReconstructionError(node.name, drift, 10.0 * rtol)
            gins = node.vjp(ins, gouts, ctx)
            self.flops += node.flops_vjp(ins)
            if idx in inject:
                gins = tuple(g + e for g, e in zip(gins, inject[idx]))
            self.ledger.retain(gins)
            self._push(ins, counted=False)
            gstack.extend(gins)
            self.ledger.tick()
        gx = gstack.pop()
        (x0,) = self._pop(1)
        self.ledger.release((gx,))
        self.ledger.tick()
        return gx

    # -- reporting ---------------------------------------------------------

    def report(self) -> MemoryReport:
        return MemoryReport(
            mode=self.mode, peak_bytes=self.ledger.peak, timeline=list(self.ledger.timeline)
        )


# ---------------------------------------------------------------------------
# pure inverse pass (and its VJP) over an all-invertible chain


def chain_inverse(nodes, y: np.ndarray, ctx=None, record: bool = False):
    """Run the exact inverse of a chain of invertible nodes.

    Returns (x, rec) where rec[idx] holds the tuple of values the inverse
    pass fed to node idx's ``invert`` -- needed later by
    ``chain_inverse_vjp``. rec is None unless ``record``.
    """
    stack = [y]
    rec = {} if record else None
    flops = 0
    for idx in range(len(nodes) - 1, -1, -1):
        node = nodes[idx]
        if node.kind != KIND_INVERTIBLE:
            raise ShapeError(f"chain_inverse hit non-invertible node {node.name!r}")
        ys = tuple(stack[len(stack) - node.n_out :])
        del stack[len(stack) - node.n_out :]
        ins = node.invert(ys, ctx)
        flops += node.flops_invert(ys)
        if record:
            rec[idx] = ys
        stack.extend(ins)
    if len(stack) != 1:
        raise ShapeError("inverse pass left multiple values on the stack")
    return stack[0], rec, flops


def chain_inverse_vjp(nodes, rec, gx: np.ndarray, ctx=None):
    """VJP of ``chain_inverse``: given the gradient w.r.t. its output x,
    produce the gradient w.r.t. its input y, accumulating parameter
    gradients along the way. ``rec`` comes from chain_inverse(record=True)."""
    gstack = [gx]
    flops = 0
    for idx in range(len(nodes)):
        node = nodes[idx]
        gins = tuple(gstack[len(gstack) - node.n_in :])
        del gstack[len(gstack) - node.n_in :]
        gys = node.inv_vjp(rec[idx], gins, ctx)
        flops += node.flops_inv_vjp(rec[idx])
        gstack.extend(gys)
    if len(gstack) != 1:
        raise ShapeError("inverse-pass VJP left multiple gradients on the stack")
    return gstack[0], flops
