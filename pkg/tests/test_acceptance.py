"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line
(run with -s to see them). The smoke training run is shared by the
criteria that need a trained checkpoint.

Run: pytest tests/test_acceptance.py -v -s
"""

import time

import numpy as np
import pytest

from revdiff.blocks import OrthoResample
from revdiff.cli import main as cli_main
from revdiff.data import gen_dataset
from revdiff.diffusion import (
    TrainConfig,
    cosine_schedule,
    diffusion_loss,
    p_sample_loop,
    q_sample,
    train_loop,
)
from revdiff.iunet import IUNet, IUNetConfig
from revdiff.metrics import mae, psnr, ssim3d
from revdiff.revgraph import MODE_RECOMPUTE, MODE_STORE
from revdiff.rng import Prng

pytestmark = pytest.mark.slow

DESK = IUNetConfig()  # 16^3, 3 levels, (8,16,32), blocks 2, attention on {1,2}


def report(criterion, ok, detail):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# shared smoke training (criteria 7, 8, 10)


@pytest.fixture(scope="session")
def smoke():
    vols = [v.data for v in gen_dataset(1, 64, 16)]
    sched = cosine_schedule(2000)
    ortho_defects_at_100 = []

    def capture(row):
        if row.step == 100:
            for node in model.nodes:
                if isinstance(node, OrthoResample):
                    q = node.q_matrix().astype(np.float64)
                    ortho_defects_at_100.append(
                        (node.name, float(np.max(np.abs(q.T @ q - np.eye(8)))))
                    )

    runs = []
    t0 = time.time()
    for _ in range(2):
        model = IUNet(DESK, seed=1)
        cfg = TrainConfig(steps=500, batch=2, seed=1)
        rows = train_loop(model, vols, cfg, sched, MODE_RECOMPUTE, log_cb=capture)
        runs.append((model, [r.loss for r in rows]))
    elapsed = time.time() - t0
    return {
        "vols": vols,
        "sched": sched,
        "model": runs[0][0],
        "losses": runs[0][1],
        "losses2": runs[1][1],
        "elapsed": elapsed,
        "ortho100": ortho_defects_at_100,
    }


# ---------------------------------------------------------------------------


def test_c01_invertibility_roundtrip(tmp_path, capsys):
    t0 = time.time()
    codes = {}
    for dtype in ("f64", "f32"):
        codes[dtype] = cli_main(
            ["roundtrip", "--trials", "100", "--dtype", dtype,
             "--set", "edge=16", "--set", "levels=3", "--set", "channels=8,16,32",
             "--set", "blocks=2", "--set", "attn_levels=1,2"]
        )
    out = capsys.readouterr().out
    elapsed = time.time() - t0
    ok = codes == {"f64": 0, "f32": 0} and elapsed < 120
    report(
        "C1 invertibility",
        ok,
        f"roundtrip exit codes {codes}, {elapsed:.0f}s (<120s); " + " | ".join(
            l for l in out.splitlines() if l.startswith("trunk")
        ),
    )


def test_c02_gradient_correctness():
    t0 = time.time()
    cfg = IUNetConfig(
        volume_edge=8, levels=2, channel_schedule=(8, 16), blocks_per_level=2,
        attn_levels=(0, 1), emb_dim=8, dtype="f64",
    )
    sched = cosine_schedule(100)
    prng = Prng(2)
    x0 = np.clip(prng.randn((1, 1, 8, 8, 8), np.float64) * 0.2 + 0.4, 0, 1)
    eps = prng.randn(x0.shape, np.float64)
    tc = TrainConfig(lambda_r=0.0, lambda_l2=0.0)

    grads = {}
    for mode in (MODE_STORE, MODE_RECOMPUTE):
        model = IUNet(cfg, seed=3, identity_init=False)
        model.zero_grads()
        diffusion_loss(model, x0, 37, eps, tc, sched, mode)
        grads[mode] = [p.grad.copy() for p in model.params]
    worst_mode_rel = 0.0
    for ga, gb in zip(grads[MODE_STORE], grads[MODE_RECOMPUTE]):
        na, nb = np.linalg.norm(ga.ravel()), np.linalg.norm(gb.ravel())
        if max(na, nb) < 1e-14:
            continue
        worst_mode_rel = max(worst_mode_rel, np.linalg.norm((ga - gb).ravel()) / max(na, nb))

    # finite differences on 1000 randomly sampled parameters (loss value only)
    model = IUNet(cfg, seed=3, identity_init=False)
    model.zero_grads()
    diffusion_loss(model, x0, 37, eps, tc, sched, MODE_STORE)
    analytic = [p.grad.copy() for p in model.params]

    def loss_value():
        y = model.forward(q_sample(x0, 37, eps, sched), 37, MODE_RECOMPUTE)
        model._tape = model._ctx = model._side = None
        return float(np.mean((y - eps) ** 2))

    probe = Prng(4)
    h = 1e-5
    worst_fd = 0.0
    checked = 0
    for pid in probe.integers(len(model.params), 1000):
        p = model.params[pid]
        i = int(probe.below(p.value.size))
        flat = p.value.ravel()
        orig = flat[i]
        flat[i] = orig + h
        up = loss_value()
        flat[i] = orig - h
        dn = loss_value()
        flat[i] = orig
        fd = (up - dn) / (2 * h)
        got = analytic[pid].ravel()[i]
        if max(abs(fd), abs(got)) < 1e-10:
            continue  # mathematically zero gradient (softmax shift invariance)
        worst_fd = max(worst_fd, abs(fd - got) / max(1.0, abs(fd), abs(got)))
        checked += 1
    elapsed = time.time() - t0
    ok = worst_mode_rel <= 1e-8 and worst_fd <= 1e-4 and elapsed < 600
    report(
        "C2 gradient correctness",
        ok,
        f"mode-agreement rel L2 {worst_mode_rel:.2e} (<=1e-8); "
        f"FD rel err {worst_fd:.2e} over {checked}/1000 probes (<=1e-4); "
        f"{elapsed:.0f}s (<600s)",
    )


def test_c03_depth_independent_memory(tmp_path):
    t0 = time.time()
    out = tmp_path / "bench.csv"
    code = cli_main(
        ["bench-mem", "--edge", "16", "--levels", "3", "--blocks-list", "2,4,8",
         "--mode", "both", "--out", str(out)]
    )
    rows = {}
    for line in out.read_text().strip().splitlines()[1:]:
        mode, blocks, peak, flops = line.split(",")
        rows[(mode, int(blocks))] = (int(peak), int(flops))
    rec = [rows[("invertible", b)][0] for b in (2, 4, 8)]
    mean_rec = float(np.mean(rec))
    flat = all(abs(r - mean_rec) <= 0.10 * mean_rec for r in rec)
    growth = rows[("store", 8)][0] / rows[("store", 2)][0]
    lower = all(rows[("invertible", b)][0] < rows[("store", b)][0] for b in (4, 8))
    elapsed = time.time() - t0
    ok = code == 0 and flat and growth >= 1.8 and lower and elapsed < 300
    report(
        "C3 depth-independent memory",
        ok,
        f"recompute peaks {rec} (flat within 10%: {flat}); "
        f"store growth x{growth:.2f} (>=1.8); recompute<store at blocks>=4: {lower}; "
        f"{elapsed:.0f}s (<300s)",
    )


def test_c04_compute_overhead_direction():
    sched = cosine_schedule(2000)
    prng = Prng(5)
    x0 = np.clip(prng.randn((2, 1, 16, 16, 16), np.float32) * 0.2 + 0.4, 0, 1)
    eps = prng.randn(x0.shape, np.float32)
    tc = TrainConfig(lambda_l2=0.0)
    flops = {}
    for mode in (MODE_STORE, MODE_RECOMPUTE):
        model = IUNet(DESK, seed=6, identity_init=False)
        model.zero_grads()
        _, flops[mode] = diffusion_loss(model, x0, 1000, eps, tc, sched, mode)
    factor = flops[MODE_RECOMPUTE] / flops[MODE_STORE]
    ok = 1.0 < factor <= 4.0
    report(
        "C4 compute overhead",
        ok,
        f"flops store={flops[MODE_STORE]:,} recompute={flops[MODE_RECOMPUTE]:,} "
        f"factor {factor:.3f} (in (1, 4])",
    )


def test_c05_schedule_properties():
    s = cosine_schedule(2000)
    checks = {
        "abar0==1": s.alpha_bar(0) == 1.0,
        "abar strictly decreasing": bool(np.all(np.diff(s.alpha_bars) < 0)),
        "abarT<0.01": s.alpha_bar(2000) < 0.01,
        "betas in (0, 0.999]": bool(np.all(s.betas > 0) and np.all(s.betas <= 0.999)),
    }
    ok = all(checks.values())
    report("C5 schedule properties", ok, "; ".join(f"{k}: {v}" for k, v in checks.items()))


def test_c06_forward_process_consistency():
    t0 = time.time()
    sched = cosine_schedule(10)
    n = 10_000
    prng = Prng(7)
    x = np.full(n, 0.5)
    for t in range(1, 11):
        b = sched.beta(t)
        x = np.sqrt(1 - b) * x + np.sqrt(b) * prng.randn((n,), np.float64)
    direct = q_sample(np.full(n, 0.5), 10, prng.randn((n,), np.float64), sched)
    se = np.sqrt(x.var() / n + direct.var() / n)
    mean_gap = abs(x.mean() - direct.mean())
    var_gap = abs(x.var() - direct.var()) / max(x.var(), direct.var())
    elapsed = time.time() - t0
    ok = mean_gap <= 3 * se and var_gap <= 0.05 and elapsed < 60
    report(
        "C6 forward-process consistency",
        ok,
        f"mean gap {mean_gap:.4f} (<= 3*SE={3 * se:.4f}); var gap {var_gap:.2%} (<=5%); "
        f"{elapsed:.1f}s (<60s)",
    )


def test_c07_training_smoke(smoke):
    losses = np.array(smoke["losses"])
    first, last = losses[:50].mean(), losses[-50:].mean()
    ratio = last / first
    identical = smoke["losses"] == smoke["losses2"]
    ok = ratio <= 0.7 and identical and smoke["elapsed"] < 1800
    report(
        "C7 training smoke",
        ok,
        f"first50 {first:.4f}, last50 {last:.4f}, ratio {ratio:.3f} (<=0.7); "
        f"two runs identical: {identical}; both runs {smoke['elapsed']:.0f}s (<1800s)",
    )


def test_c08_sampler_sanity(smoke):
    t0 = time.time()
    samples = p_sample_loop(smoke["model"], 4, Prng(77), smoke["sched"])
    finite = bool(np.isfinite(samples).all())
    in_range = bool(samples.min() >= 0.0 and samples.max() <= 1.0)
    vols = smoke["vols"]
    noise = np.clip(Prng(88).randn(samples.shape, np.float32), 0.0, 1.0)
    samp_scores, noise_scores = [], []
    for j in range(4):
        best = max(range(len(vols)), key=lambda i: psnr(samples[j, 0], vols[i]))
        samp_scores.append(psnr(samples[j, 0], vols[best]))
        noise_scores.append(psnr(noise[j, 0], vols[best]))
    margin = float(np.mean(samp_scores) - np.mean(noise_scores))
    elapsed = time.time() - t0
    ok = finite and in_range and margin >= 3.0 and elapsed < 600
    report(
        "C8 sampler sanity",
        ok,
        f"finite {finite}, in [0,1] {in_range}, sample PSNR {np.mean(samp_scores):.2f} dB "
        f"vs noise {np.mean(noise_scores):.2f} dB, margin {margin:.2f} dB (>=3); "
        f"{elapsed:.0f}s (<600s)",
    )


def test_c09_metric_correctness():
    x = np.clip(Prng(9).randn((10, 10, 10), np.float64) * 0.2 + 0.5, 0, 1)
    y = np.clip(Prng(10).randn((10, 10, 10), np.float64) * 0.2 + 0.5, 0, 1)
    z = np.clip(Prng(11).randn((10, 10, 10), np.float64) * 0.2 + 0.5, 0, 1)
    checks = {
        "psnr identity capped at 100": psnr(x, x) == 100.0,
        "mse 0.01 -> 20 dB": abs(psnr(np.zeros((8, 8, 8)), np.full((8, 8, 8), 0.1)) - 20.0) < 1e-9,
        "ssim(x,x)=1": abs(ssim3d(x, x) - 1.0) <= 1e-6,
        "ssim symmetric": abs(ssim3d(x, y) - ssim3d(y, x)) <= 1e-9,
        "mae identity": mae(x, x) == 0.0,
        "mae 0s vs 1s": mae(np.zeros((4, 4, 4)), np.ones((4, 4, 4))) == 1.0,
        "mae triangle": mae(x, z) <= mae(x, y) + mae(y, z) + 1e-12,
    }
    ok = all(checks.values())
    report("C9 metric correctness", ok, "; ".join(f"{k}: {v}" for k, v in checks.items()))


def test_c10_orthogonality_after_training(smoke):
    defects100 = smoke["ortho100"]
    worst100 = max(d for _, d in defects100) if defects100 else float("inf")
    model = smoke["model"]
    worst_final = 0.0
    n_blocks = 0
    for node in model.nodes:
        if isinstance(node, OrthoResample):
            q = node.q_matrix().astype(np.float64)
            worst_final = max(worst_final, float(np.max(np.abs(q.T @ q - np.eye(8)))))
            n_blocks += 1
    ok = worst100 <= 1e-6 and worst_final <= 1e-6 and n_blocks == 6
    report(
        "C10 orthogonality",
        ok,
        f"{len(defects100)} resamplers at step 100: worst defect {worst100:.2e} (<=1e-6); "
        f"after 500 steps: {worst_final:.2e}",
    )
