"""Command-line surface: dataset generation, training, sampling,
round-trip verification, memory benchmarking, and metric evaluation.

Configuration is a flat ``key = value`` text file; command-line ``--set``
flags override file values, and unknown keys are rejected. Exit codes:
0 success, 2 config error, 3 numeric trouble (divergence, tolerance
failure), 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import data as datamod
from .diffusion import TrainConfig, cosine_schedule, p_sample_loop, train_loop
from .errors import (
    ConfigError,
    DivergenceError,
    DomainError,
    FormatError,
    ReconstructionError,
    ShapeError,
)
from .iunet import IUNet, IUNetConfig, checkpoint_load, checkpoint_save, default_attn_levels
from .metrics import mae, psnr, ssim3d
from .revgraph import MODE_RECOMPUTE, MODE_STORE
from .rng import Prng

CONFIG_DEFAULTS = {
    "edge": "16",
    "levels": "3",
    "channels": "8,16,32",
    "blocks": "2",
    "attn_levels": "1,2",
    "emb_dim": "16",
    "dtype": "f32",
    "timesteps": "2000",
    "lr": "2e-4",
    "lambda_r": "0.0",
    "lambda_l2": "1e-4",
    "batch": "2",
    "steps": "500",
    "seed": "1",
    "mode": "invertible",
}
OPTIONAL_KEYS = ("data_dir",)

MODE_NAMES = {"store": MODE_STORE, "invertible": MODE_RECOMPUTE}


def parse_config_file(path) -> dict:
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise FormatError(f"cannot read config {path}: {e}") from None
    out = {}
    for ln, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{ln}: expected key = value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def merge_config(file_cfg: dict, overrides: dict) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    known = set(CONFIG_DEFAULTS) | set(OPTIONAL_KEYS)
    for src in (file_cfg, overrides):
        for k, v in src.items():
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = v
    return cfg


def require_key(cfg: dict, key: str) -> str:
    if key not in cfg or not cfg[key]:
        raise ConfigError(f"missing required config key {key!r}")
    return cfg[key]


def model_config(cfg: dict) -> IUNetConfig:
    try:
        return IUNetConfig(
            volume_edge=int(cfg["edge"]),
            levels=int(cfg["levels"]),
            channel_schedule=tuple(int(c) for c in cfg["channels"].split(",")),
            blocks_per_level=int(cfg["blocks"]),
            attn_levels=tuple(int(i) for i in cfg["attn_levels"].split(",")) if cfg["attn_levels"] else (),
            emb_dim=int(cfg["emb_dim"]),
            dtype=cfg["dtype"],
        )
    except ValueError as e:
        raise ConfigError(f"bad model config value: {e}") from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            lr=float(cfg["lr"]),
            lambda_r=float(cfg["lambda_r"]),
            lambda_l2=float(cfg["lambda_l2"]),
            batch=int(cfg["batch"]),
            steps=int(cfg["steps"]),
            seed=int(cfg["seed"]),
        )
    except ValueError as e:
        raise ConfigError(f"bad train config value: {e}") from None


def parse_mode(name: str) -> str:
    if name not in MODE_NAMES:
        raise ConfigError(f"mode must be store or invertible, got {name!r}")
    return MODE_NAMES[name]


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        k, sep, v = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    vols = datamod.gen_dataset(args.seed, args.n, args.edge)
    paths = datamod.write_dataset(args.out, vols)
    digest = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            digest.update(fh.read())
    print(f"wrote {len(paths)} volumes to {args.out}")
    print(f"manifest sha256 {digest.hexdigest()}")
    return 0


def cmd_train(args) -> int:
    cfg = merge_config(parse_config_file(args.config), _overrides(args.set))
    if args.mode:
        cfg["mode"] = args.mode
    mode = parse_mode(cfg["mode"])
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    sched = cosine_schedule(int(cfg["timesteps"]))
    data_dir = require_key(cfg, "data_dir")
    volumes = datamod.read_dataset(data_dir)
    for v in volumes:
        if v.shape != (mcfg.volume_edge,) * 3:
            raise ShapeError(f"dataset volume {v.shape} != edge {mcfg.volume_edge}")
    model = IUNet(mcfg, seed=tcfg.seed)
    log_fh = open(args.log, "w") if args.log else None
    try:
        if log_fh:
            log_fh.write("step,loss,lr,peak_bytes\n")
        rows = train_loop(
            model, volumes, tcfg, sched, mode,
            log_cb=(lambda r: log_fh.write(r.csv() + "\n")) if log_fh else None,
        )
    finally:
        if log_fh:
            log_fh.close()
    if args.out:
        checkpoint_save(model, args.out)
    print(f"trained {len(rows)} steps; final loss {rows[-1].loss:.6g}")
    return 0


def cmd_sample(args) -> int:
    model = checkpoint_load(args.ckpt)
    sched = cosine_schedule(args.timesteps)
    prng = Prng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    done = 0
    while done < args.n:
        k = min(4, args.n - done)
        x = p_sample_loop(model, k, prng, sched)
        for j in range(k):
            datamod.volume_write(
                os.path.join(args.out, datamod.VOLUME_PATTERN % (done + j)),
                np.ascontiguousarray(x[j, 0], dtype=np.float32),
            )
        done += k
    print(f"wrote {done} samples to {args.out}")
    return 0


ROUNDTRIP_TOL = {"f32": 1e-4, "f64": 1e-9}


def _max_rel(a, b) -> float:
    return float(np.max(np.abs(a - b))) / max(float(np.max(np.abs(b))), 1e-30)


def roundtrip_report(mcfg: IUNetConfig, trials: int, seed: int = 0):
    """Round-trip errors per block type and for the full trunk, for both an
    identity-initialized and a randomized model. The full-trunk error runs
    over all trials; per-node detail is collected on the first few only
    (one node-by-node walk costs as much as a trunk pass)."""
    per_block: dict[str, float] = {}
    trunk_err = {}
    pernode_trials = min(trials, 10)
    for init_name, identity in (("identity", True), ("random", False)):
        model = IUNet(mcfg, seed=seed, identity_init=identity)
        prng = Prng(seed + (1 if identity else 2))
        worst = 0.0
        for trial in range(trials):
            h = prng.randn((1, mcfg.base_channels) + (mcfg.volume_edge,) * 3, mcfg.np_dtype)
            t = (37 * trial) % 1000
            if trial < pernode_trials:
                # walk node by node, checking each block's own inverse
                ctx = model._inverse_ctx(t)
                stack = [h]
                for node in model.trunk_nodes:
                    xs = tuple(stack[len(stack) - node.n_in :])
                    del stack[len(stack) - node.n_in :]
                    ys = node.apply(xs, ctx)
                    back = node.invert(ys, ctx)
                    for got, ref in zip(back, xs):
                        key = type(node).__name__
                        per_block[key] = max(per_block.get(key, 0.0), _max_rel(got, ref))
                    stack.extend(ys)
                if len(stack) != 1:
                    raise ShapeError("trunk walk left extra stack values")
                v = stack[0]
            else:
                v = model.trunk_forward(h, t=t)
            h_back = model.trunk_inverse(v, t=t)
            worst = max(worst, _max_rel(h_back, h))
        trunk_err[init_name] = worst
    return per_block, trunk_err


def cmd_roundtrip(args) -> int:
    file_cfg = parse_config_file(args.config) if args.config else {}
    cfg = merge_config(file_cfg, _overrides(args.set))
    if args.dtype:
        cfg["dtype"] = args.dtype
    mcfg = model_config(cfg)
    tol = ROUNDTRIP_TOL[mcfg.dtype]
    per_block, trunk_err = roundtrip_report(mcfg, args.trials)
    for name in sorted(per_block):
        print(f"block={name} dtype={mcfg.dtype} max_rel={per_block[name]:.3e}")
    ok = True
    for init_name, err in trunk_err.items():
        status = "ok" if err <= tol else "FAIL"
        ok = ok and err <= tol
        print(f"trunk init={init_name} dtype={mcfg.dtype} trials={args.trials} "
              f"max_rel={err:.3e} tol={tol:.0e} {status}")
    return 0 if ok else 3


def cmd_bench_mem(args) -> int:
    from .diffusion import diffusion_loss

    blocks_list = [int(b) for b in args.blocks_list.split(",")]
    modes = [MODE_STORE, MODE_RECOMPUTE] if args.mode == "both" else [parse_mode(args.mode)]
    channels = tuple((8 * (1 << i)) for i in range(args.levels))
    rows = []
    sched = cosine_schedule(100)
    for blocks in blocks_list:
        mcfg = IUNetConfig(
            volume_edge=args.edge,
            levels=args.levels,
            channel_schedule=channels,
            blocks_per_level=blocks,
            attn_levels=default_attn_levels(args.levels),
        )
        for mode in modes:
            model = IUNet(mcfg, seed=0, identity_init=False)
            prng = Prng(123)
            x0 = prng.randn((2, 1, args.edge, args.edge, args.edge), mcfg.np_dtype)
            eps = prng.randn(x0.shape, mcfg.np_dtype)
            model.zero_grads()
            tcfg = TrainConfig(lambda_l2=0.0)
            _, flops = diffusion_loss(model, x0, 50, eps, tcfg, sched, mode)
            peak = model.memory_report().peak_bytes
            rows.append((mode, blocks, peak, flops))
    lines = ["mode,blocks,peak_bytes,flops"]
    lines += [f"{m},{b},{p},{f}" for (m, b, p, f) in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def cmd_metrics(args) -> int:
    a_names = sorted(f for f in os.listdir(args.a) if f.endswith(".idmv"))
    b_names = sorted(f for f in os.listdir(args.b) if f.endswith(".idmv"))
    if len(a_names) != len(b_names):
        raise ConfigError(
            f"volume count mismatch: {len(a_names)} in {args.a}, {len(b_names)} in {args.b}"
        )
    rows = []
    for na, nb in zip(a_names, b_names):
        va = datamod.volume_read(os.path.join(args.a, na))
        vb = datamod.volume_read(os.path.join(args.b, nb))
        rows.append((na, psnr(va, vb), ssim3d(va, vb), mae(va, vb)))
    lines = ["name,psnr_db,ssim,mae"]
    lines += [f"{n},{p:.6g},{s:.6g},{m:.6g}" for (n, p, s, m) in rows]
    if rows:
        mp = float(np.mean([r[1] for r in rows]))
        ms = float(np.mean([r[2] for r in rows]))
        mm = float(np.mean([r[3] for r in rows]))
        lines.append(f"mean,{mp:.6g},{ms:.6g},{mm:.6g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# driver


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="revdiff", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic phantom volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--edge", type=int, default=16)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a phantom dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=sorted(MODE_NAMES))
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--log", help="CSV training log path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--timesteps", type=int, default=2000)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("roundtrip", help="verify block and trunk invertibility")
    p.add_argument("--config")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_roundtrip)

    p = sub.add_parser("bench-mem", help="peak activation bytes and flops per mode")
    p.add_argument("--edge", type=int, default=16)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--blocks-list", default="2,4,8")
    p.add_argument("--mode", default="both", choices=("both", "store", "invertible"))
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(fn=cmd_bench_mem)

    p = sub.add_parser("metrics", help="PSNR/SSIM/MAE between two volume dirs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(fn=cmd_metrics)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DomainError, DivergenceError, ReconstructionError, ShapeError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 4


def entry():
    sys.exit(main())
