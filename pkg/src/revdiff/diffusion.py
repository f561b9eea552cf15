"""DDPM machinery: cosine beta schedule, forward noising, the composite
training loss, AdamW with cosine-annealed learning rate, and the ancestral
sampler.

The loss is

    L = mean || eps - model(x_t, t) ||^2
      + lambda_r * mean || h - trunk_inverse(trunk(h)) ||^2
      + lambda_l2 * ||W||_2

where h is the trunk input (the head's output) and the inverse pass runs
with the zero timestep embedding. The reconstruction term is skipped
entirely (zero extra flops) when lambda_r == 0; when it is active, its
gradient is exact: the inverse pass is differentiated through node-level
inverse VJPs and spliced into the main backward walk. The L2 term is
*reported* in the loss value but its gradient is realized as AdamW's
decoupled weight decay rather than being differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, DomainError
from .revgraph import MODE_RECOMPUTE, MODES
from .rng import Prng


# ---------------------------------------------------------------------------
# beta schedule


@dataclass
class BetaSchedule:
    T: int
    betas: np.ndarray  # [T], beta_t at t = 1..T
    alphas: np.ndarray  # 1 - betas
    alpha_bars: np.ndarray  # cumprod(alphas), abar_t at t = 1..T

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def _check(self, t: int):
        if not 1 <= t <= self.T:
            raise DomainError(f"timestep {t} outside [1, {self.T}]")

    def validate(self):
        if np.any(self.betas <= 0) or np.any(self.betas > 0.999):
            raise DomainError("betas must lie in (0, 0.999]")
        if np.any(np.diff(self.alpha_bars) >= 0) or self.alpha_bars[0] >= 1.0:
            raise DomainError("alpha_bar must be strictly decreasing from below 1")


def cosine_schedule(T: int, s: float = 0.008) -> BetaSchedule:
    """abar(t) proportional to cos^2(((t/T + s)/(1 + s)) * pi/2), normalized
    so abar(0) = 1; betas are clipped into (1e-8, 0.999] and alpha_bars are
    recomputed from the clipped betas so the struct stays self-consistent."""
    if T < 2:
        raise DomainError(f"cosine schedule needs T >= 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    abar = f / f[0]
    betas = 1.0 - abar[1:] / abar[:-1]
    betas = np.clip(betas, 1e-8, 0.999)
    alphas = 1.0 - betas
    return BetaSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: BetaSchedule) -> np.ndarray:
    """Closed-form forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    ab = sched.alpha_bar(t)
    if t < 1:
        raise DomainError(f"q_sample needs t >= 1, got {t}")
    # plain-float coefficients keep float32 inputs in float32
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    lr: float = 2e-4
    lambda_r: float = 0.0
    lambda_l2: float = 1e-4
    batch: int = 2
    steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 1

    def validate(self):
        if not 0.0 <= self.lambda_r <= 1.0:
            raise DomainError(f"lambda_r must be in [0, 1], got {self.lambda_r}")
        if self.lr <= 0:
            raise DomainError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or self.steps < 1:
            raise DomainError("batch and steps must be >= 1")


class AdamW:
    """AdamW with decoupled weight decay (the lambda_l2 realization)."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, lr: float):
        c = self.cfg
        self.t += 1
        b1c = 1.0 - c.beta1**self.t
        b2c = 1.0 - c.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m += (1.0 - c.beta1) * (g - m)
            v += (1.0 - c.beta2) * (g * g - v)
            p.value -= lr * ((m / b1c) / (np.sqrt(v / b2c) + c.eps) + c.lambda_l2 * p.value)


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine annealing from base to exactly 0 at step == total."""
    frac = min(max(step / total, 0.0), 1.0)
    return base * 0.5 * (1.0 + np.cos(np.pi * frac))


def weights_l2(params) -> float:
    return float(np.sqrt(sum(float(np.sum(p.value.astype(np.float64) ** 2)) for p in params)))


# ---------------------------------------------------------------------------
# loss


def diffusion_loss(model, x0, t: int, eps, cfg: TrainConfig, sched: BetaSchedule,
                   mode: str = MODE_RECOMPUTE, verify: bool = False, step: int = -1):
    """One loss evaluation with gradient accumulation into model params.

    Returns (loss_value, flops). Gradients w.r.t. all parameters land on
    ``param.grad`` (caller zeroes them). Raises DivergenceError on a
    non-finite loss.
    """
    if mode not in MODES:
        raise DomainError(f"unknown mode {mode!r}")
    x_t = q_sample(x0, t, eps, sched)
    want_recon = cfg.lambda_r > 0.0
    eps_hat = model.forward(x_t, t, mode, verify=verify, keep_trunk_input=want_recon)
    r = eps_hat - eps
    n = r.size
    loss = float(np.mean(r * r))
    gy = (2.0 / n) * r
    inject = None
    flops = 0
    if want_recon:
        v = model.trunk_output()
        h = model.trunk_input()
        xhat, rec, inv_ctx, fl_inv = model.trunk_inverse(v, t=None, record=True)
        r2 = h - xhat
        m = r2.size
        recon = float(np.mean(r2 * r2))
        loss += cfg.lambda_r * recon
        g_xhat = (-2.0 * cfg.lambda_r / m) * r2
        g_v, fl_ivjp = model.trunk_inverse_vjp(rec, inv_ctx, g_xhat)
        g_h = (2.0 * cfg.lambda_r / m) * r2
        tail_idx = len(model.nodes) - 1
        inject = {tail_idx: (g_v,), 1: (g_h,)}
        flops += fl_inv + fl_ivjp
    if cfg.lambda_l2 > 0.0:
        loss += cfg.lambda_l2 * weights_l2(model.params)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {step}", where=step)
    model.backward(gy.astype(x0.dtype), inject=inject)
    flops += model._tape.flops + 2 * n
    return loss, flops


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLogRow:
    step: int
    loss: float
    lr: float
    peak_bytes: int

    def csv(self) -> str:
        return f"{self.step},{self.loss:.8g},{self.lr:.8g},{self.peak_bytes}"


def train_step(model, volumes, opt: AdamW, cfg: TrainConfig, sched: BetaSchedule,
               mode: str, prng: Prng, step: int):
    """Sample a batch and a timestep, take one AdamW step. Deterministic
    given the prng state."""
    dt = model.config.np_dtype
    idx = prng.integers(len(volumes), cfg.batch)
    x0 = np.stack([volumes[i] for i in idx]).astype(dt)[:, None]
    t = 1 + prng.below(sched.T)
    eps = prng.randn(x0.shape, dt)
    model.zero_grads()
    loss, flops = diffusion_loss(model, x0, t, eps, cfg, sched, mode, step=step)
    lr = cosine_lr(cfg.lr, step, cfg.steps)
    opt.step(lr)
    return TrainLogRow(step, loss, lr, model.memory_report().peak_bytes), flops


def train_loop(model, volumes, cfg: TrainConfig, sched: BetaSchedule, mode: str,
               log_cb=None):
    """Run cfg.steps training steps over a list of [E,E,E] volumes.
    Returns the list of per-step log rows."""
    cfg.validate()
    if len(volumes) == 0:
        raise DomainError("empty training set")
    opt = AdamW(model.params, cfg)
    prng = Prng(cfg.seed)
    rows = []
    for step in range(cfg.steps):
        row, _ = train_step(model, volumes, opt, cfg, sched, mode, prng, step)
        rows.append(row)
        if log_cb:
            log_cb(row)
    return rows


# ---------------------------------------------------------------------------
# sampler


def p_sample_loop(model, n: int, prng: Prng, sched: BetaSchedule, clamp: bool = True):
    """Ancestral sampling: start from x_T ~ N(0,1) and iterate

        x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)
                  + sqrt(beta_t) * z

    with z = 0 at the final step so x_0 is deterministic given x_1. The
    result is clamped to [0,1] (for metric evaluation) only at the end."""
    E = model.config.volume_edge
    dt = model.config.np_dtype
    x = prng.randn((n, 1, E, E, E), dt)
    for t in range(sched.T, 0, -1):
        eps_hat = model.predict(x, t)
        a = sched.alpha(t)
        b = sched.beta(t)
        ab = sched.alpha_bar(t)
        x = (x - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
        if t > 1:
            x = x + math.sqrt(b) * prng.randn(x.shape, dt)
        if not np.isfinite(x).all():
            raise DivergenceError(f"sampler diverged at t={t}", where=t)
    if clamp:
        x = np.clip(x, 0.0, 1.0)
    return x
