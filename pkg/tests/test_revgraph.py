import numpy as np
import pytest

from revdiff.errors import ReconstructionError
from revdiff.revgraph import (
    KIND_STORED,
    MODE_RECOMPUTE,
    MODE_STORE,
    Node,
    Param,
    Tape,
    chain_inverse,
    chain_inverse_vjp,
)
from revdiff.rng import Prng


class AffineNode(Node):
    """Toy invertible node y = a*x + b with a learnable scalar a."""

    def __init__(self, name, a0=1.5, b=0.25, drift=0.0):
        super().__init__(name)
        self.a = Param(0, np.array([a0], dtype=np.float64), f"{name}.a")
        self.b = b
        self.drift = drift  # deliberate inverse error for drift-check tests

    def params(self):
        return [self.a]

    def apply(self, xs, ctx):
        (x,) = xs
        return (self.a.value[0] * x + self.b,)

    def invert(self, ys, ctx):
        (y,) = ys
        return ((y - self.b) / self.a.value[0] + self.drift,)

    def vjp(self, xs, gys, ctx):
        (x,) = xs
        (gy,) = gys
        self.a.grad[0] += float(np.sum(gy * x))
        return (self.a.value[0] * gy,)

    def inv_vjp(self, ys, gxs, ctx):
        (y,) = ys
        (gx,) = gxs
        a = self.a.value[0]
        # x = (y - b)/a : dx/da = -(y - b)/a^2
        self.a.grad[0] += float(np.sum(gx * (-(y - self.b) / a**2)))
        return (gx / a,)


class SquashNode(Node):
    """Toy stored (non-invertible) node y = tanh(x)."""

    kind = KIND_STORED

    def apply(self, xs, ctx):
        (x,) = xs
        return (np.tanh(x),)

    def vjp(self, xs, gys, ctx):
        (x,) = xs
        (gy,) = gys
        return (gy * (1.0 - np.tanh(x) ** 2),)


def _chain(n, stored_tail=False):
    nodes = [AffineNode(f"aff{i}", a0=1.0 + 0.1 * i, b=0.05 * i) for i in range(n)]
    if stored_tail:
        nodes.append(SquashNode("squash"))
    return nodes


def test_forward_same_output_both_modes():
    x = Prng(1).randn((2, 4, 4, 4, 4), np.float64)
    nodes = _chain(3, stored_tail=True)
    ya = Tape(nodes, MODE_STORE).forward(x.copy())
    yb = Tape(nodes, MODE_RECOMPUTE).forward(x.copy())
    assert np.array_equal(ya, yb)


def test_recompute_live_bytes_after_forward_is_output_only():
    x = Prng(2).randn((1, 4, 8, 8, 8), np.float64)
    tape = Tape(_chain(8), MODE_RECOMPUTE)
    y = tape.forward(x)
    assert tape.ledger.live == y.nbytes


def test_store_live_bytes_after_forward_counts_every_block():
    x = Prng(3).randn((1, 4, 8, 8, 8), np.float64)
    tape = Tape(_chain(8), MODE_STORE)
    y = tape.forward(x)
    # stash holds the input and 7 intermediates; the output is on the stack
    assert tape.ledger.live == 8 * y.nbytes + x.nbytes


def test_empty_graph_peak_is_input_bytes():
    x = Prng(4).randn((1, 2, 4, 4, 4), np.float64)
    tape = Tape([], MODE_STORE)
    y = tape.forward(x)
    assert y is x
    assert tape.report().peak_bytes == x.nbytes


def test_gradients_match_between_modes():
    x = Prng(5).randn((2, 3, 4, 4, 4), np.float64)
    gy = Prng(6).randn(x.shape, np.float64)
    grads = {}
    for mode in (MODE_STORE, MODE_RECOMPUTE):
        nodes = _chain(5, stored_tail=True)
        tape = Tape(nodes, mode)
        tape.forward(x.copy())
        gx = tape.backward(gy.copy())
        grads[mode] = (
            gx,
            [p.grad.copy() for n in nodes for p in n.params()],
        )
    gx_a, pg_a = grads[MODE_STORE]
    gx_b, pg_b = grads[MODE_RECOMPUTE]
    assert np.max(np.abs(gx_a - gx_b)) <= 1e-10 * max(1.0, np.max(np.abs(gx_a)))
    for a, b in zip(pg_a, pg_b):
        assert np.max(np.abs(a - b)) <= 1e-8 * max(1.0, np.max(np.abs(a)))


def test_param_gradient_against_finite_differences():
    x = Prng(7).randn((1, 2, 4, 4, 4), np.float64)
    nodes = _chain(3, stored_tail=True)
    tape = Tape(nodes, MODE_STORE)
    y = tape.forward(x.copy())
    tape.backward(np.ones_like(y))  # d(sum y)/d(params)

    for node in nodes:
        for p in node.params():
            h = 1e-6
            p.value[0] += h
            up = float(np.sum(Tape(nodes, MODE_STORE).forward(x.copy())))
            p.value[0] -= 2 * h
            dn = float(np.sum(Tape(nodes, MODE_STORE).forward(x.copy())))
            p.value[0] += h
            fd = (up - dn) / (2 * h)
            assert abs(fd - p.grad[0]) <= 1e-6 * max(1.0, abs(fd))


def test_accounting_sums_to_zero_after_backward():
    x = Prng(8).randn((1, 4, 6, 6, 6), np.float64)
    for mode in (MODE_STORE, MODE_RECOMPUTE):
        tape = Tape(_chain(4, stored_tail=True), mode)
        y = tape.forward(x.copy())
        tape.backward(np.ones_like(y))
        report = tape.report()
        assert report.timeline[0][1] == 0
        assert report.final_live_bytes() == 0
        deltas = np.diff([b for _, b in report.timeline])
        assert deltas.sum() == 0


def test_peak_depth_independence_of_recompute():
    x = Prng(9).randn((1, 4, 8, 8, 8), np.float64)
    peaks = {}
    for depth in (2, 8):
        for mode in (MODE_STORE, MODE_RECOMPUTE):
            tape = Tape(_chain(depth), mode)
            y = tape.forward(x.copy())
            tape.backward(np.ones_like(y))
            peaks[(mode, depth)] = tape.report().peak_bytes
    r2, r8 = peaks[(MODE_RECOMPUTE, 2)], peaks[(MODE_RECOMPUTE, 8)]
    assert abs(r8 - r2) <= 0.10 * max(r2, r8)
    assert peaks[(MODE_STORE, 8)] / peaks[(MODE_STORE, 2)] >= 1.8


def test_verify_mode_catches_bad_inverse():
    x = Prng(10).randn((1, 2, 4, 4, 4), np.float64)
    nodes = [AffineNode("good", 1.2, 0.1), AffineNode("bad", 1.1, 0.2, drift=1.0)]
    tape = Tape(nodes, MODE_RECOMPUTE, verify=True)
    y = tape.forward(x)
    with pytest.raises(ReconstructionError) as exc:
        tape.backward(np.ones_like(y))
    assert "bad" in str(exc.value)


def test_verify_stash_not_counted_in_ledger():
    x = Prng(11).randn((1, 4, 8, 8, 8), np.float64)
    plain = Tape(_chain(6), MODE_RECOMPUTE)
    plain.forward(x.copy())
    checked = Tape(_chain(6), MODE_RECOMPUTE, verify=True)
    checked.forward(x.copy())
    assert plain.ledger.live == checked.ledger.live


def test_recompute_flops_exceed_store_flops():
    x = Prng(12).randn((1, 2, 4, 4, 4), np.float64)

    class CountedAffine(AffineNode):
        def flops_apply(self, xs):
            return int(np.prod(xs[0].shape)) * 2

    flops = {}
    for mode in (MODE_STORE, MODE_RECOMPUTE):
        nodes = [CountedAffine(f"a{i}") for i in range(4)]
        tape = Tape(nodes, mode)
        y = tape.forward(x.copy())
        tape.backward(np.ones_like(y))
        flops[mode] = tape.flops
    assert flops[MODE_RECOMPUTE] > flops[MODE_STORE]


def test_chain_inverse_and_its_vjp():
    prng = Prng(13)
    x = prng.randn((1, 2, 4, 4, 4), np.float64)
    nodes = _chain(3)
    tape = Tape(nodes, MODE_RECOMPUTE)
    y = tape.forward(x.copy())
    back, rec, _ = chain_inverse(nodes, y, record=True)
    assert np.max(np.abs(back - x)) <= 1e-10

    # VJP of the inverse against finite differences on the node params
    gx = prng.randn(x.shape, np.float64)
    for n in nodes:
        for p in n.params():
            p.zero_grad()
    gy, _ = chain_inverse_vjp(nodes, rec, gx)

    def inv_scalar():
        out, _, _ = chain_inverse(nodes, y)
        return float(np.sum(out * gx))

    h = 1e-6
    for node in nodes:
        p = node.params()[0]
        p.value[0] += h
        up = inv_scalar()
        p.value[0] -= 2 * h
        dn = inv_scalar()
        p.value[0] += h
        fd = (up - dn) / (2 * h)
        assert abs(fd - p.grad[0]) <= 1e-5 * max(1.0, abs(fd))
    # grad w.r.t. y: inverse is linear in y with slope prod(1/a)
    slope = np.prod([1.0 / n.a.value[0] for n in nodes])
    assert np.allclose(gy, gx * slope)
