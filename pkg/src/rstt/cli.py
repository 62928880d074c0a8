"""Command line: train, infer, bench, gradcheck, attn-dump.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure,
4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4


@dataclass
class RunConfig:
    preset: str = "S"
    fusion: str = "mca"
    recon: bool = False
    channels: int = 96
    seed: int = 0
    iters: int = 1000
    batch_size: int = 2
    lr0: float = 2e-4
    lr_min: float = 1e-7
    restart_period: int = 30000
    weight_decay: float = 1e-4
    checkpoint_every: int = 500
    hr_height: int = 128
    hr_width: int = 128
    n_clips: int | None = None
    dtype: str = "float32"
    out: str = "runs/train"
    checkpoint: str | None = None
    input: str | None = None
    reps: int = 20
    warmup: int = 1
    bench_height: int = 96
    bench_width: int = 96
    presets: str = "S,M,L"

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{p}: unknown keys {sorted(unknown)}")
        return cls(**data)

    def model_config(self):
        from .model import ModelConfig
        return ModelConfig.preset(self.preset, C=self.channels, fusion=self.fusion, recon_block=self.recon)

    def train_config(self):
        from .train import TrainConfig
        return TrainConfig(lr0=self.lr0, lr_min=self.lr_min, restart_period=self.restart_period,
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           max_iters=self.iters, checkpoint_every=self.checkpoint_every,
                           seed=self.seed, dtype=self.dtype)


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {"preset": "preset", "fusion": "fusion", "seed": "seed", "iters": "iters",
                 "reps": "reps", "out": "out", "checkpoint": "checkpoint", "input": "input_dir"}
    for key, attr in overrides.items():
        val = getattr(args, attr, None)
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "recon", False):
        cfg.recon = True
    return cfg


def _load_model(checkpoint):
    from .model import RSTT
    from .train import load_training_state
    p = Path(checkpoint)
    if not p.is_file():
        raise ConfigError(f"checkpoint {p} not found")
    cfg, params, _, _ = load_training_state(p)
    return RSTT(cfg, params)


# -- commands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    from .data import SyntheticClips
    from .train import train_loop
    cfg = _run_config(args)
    mc, tc = cfg.model_config(), cfg.train_config()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = SyntheticClips(seed=cfg.seed, H=cfg.hr_height, W=cfg.hr_width, n_clips=cfg.n_clips,
                          dtype=np.dtype(cfg.dtype))
    res = train_loop(mc, tc, data, out_dir=out, resume=cfg.checkpoint)
    final = res.history[-1].loss if res.history else float("nan")
    print(f"final loss {final:.6g}  iterations {len(res.history)}  wall {res.seconds:.1f}s")
    print(f"checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .frames import load_frames, save_frames
    cfg = _run_config(args)
    if cfg.checkpoint is None or cfg.input is None:
        raise ConfigError("infer needs --checkpoint and --in")
    model = _load_model(cfg.checkpoint)
    quad = load_frames(cfg.input, expected=4)
    t0 = time.perf_counter()
    out = model(quad.astype(model.dtype))
    dt = time.perf_counter() - t0
    paths = save_frames(out.data, cfg.out)
    print(f"wrote {len(paths)} frames {out.shape[3]}x{out.shape[2]} to {cfg.out} ({dt:.2f}s)")
    return EXIT_OK


@dataclass
class BenchRow:
    preset: str
    params: int
    height: int
    width: int
    reps: int
    total_s: float
    median_s: float
    fps: float


def run_bench(presets=("S", "M", "L"), height: int = 96, width: int = 96, reps: int = 20,
              warmup: int = 1, seed: int = 0, channels: int = 96) -> list[BenchRow]:
    from .model import RSTT, ModelConfig, count_params
    rows = []
    x = np.random.default_rng(seed).uniform(0, 1, (4, 3, height, width)).astype(np.float32)
    for name in presets:
        cfg = ModelConfig.preset(name, C=channels)
        model = RSTT(cfg, seed=seed)
        for _ in range(warmup):
            model(x)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
        total = sum(times)
        rows.append(BenchRow(name, count_params(cfg), height, width, reps, total,
                             statistics.median(times), 7 * reps / total))
    return rows


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    if getattr(args, "size", None):
        cfg.bench_height = cfg.bench_width = args.size
    presets = tuple(p.strip().upper() for p in (args.presets or cfg.presets).split(",") if p.strip())
    if cfg.reps < 1:
        raise ConfigError("reps must be >= 1")
    rows = run_bench(presets, cfg.bench_height, cfg.bench_width, cfg.reps, cfg.warmup, cfg.seed,
                     cfg.channels)
    out = Path(args.csv) if args.csv else Path(cfg.out) / "bench.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f.name for f in fields(BenchRow)])
        for r in rows:
            w.writerow([getattr(r, f.name) for f in fields(BenchRow)])
    print(f"{'preset':>6} {'params':>10} {'size':>9} {'reps':>5} {'median s':>9} {'FPS':>8}")
    for r in rows:
        print(f"{r.preset:>6} {r.params:>10,} {r.height:>4}x{r.width:<4} {r.reps:>5} "
              f"{r.median_s:>9.3f} {r.fps:>8.3f}")
    print(f"report {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    from .ops import DIFFERENTIABLE_OPS

    def show(r):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} err {r.error:.3e}  tol {r.tol:.0e}  "
              f"cases {r.cases}", flush=True)

    t0 = time.perf_counter()
    if args.sabotage:
        with gradcheck.sabotage(args.sabotage):
            results = gradcheck.run_all(seed=args.seed or 0, include_model=not args.skip_model, on_result=show)
    else:
        results = gradcheck.run_all(seed=args.seed or 0, include_model=not args.skip_model, on_result=show)
    covered = {r.name for r in results} & set(DIFFERENTIABLE_OPS)
    print(f"coverage {len(covered)}/{len(DIFFERENTIABLE_OPS)} registered ops  "
          f"({time.perf_counter() - t0:.1f}s)")
    failed = [r for r in results if not r.passed]
    if failed or len(covered) != len(DIFFERENTIABLE_OPS):
        worst = max(failed, key=lambda r: r.error / r.tol) if failed else None
        name = worst.name if worst else "coverage"
        print(f"gradcheck FAILED; worst offender: {name}", file=sys.stderr)
        return EXIT_VERIFY
    print("gradcheck passed")
    return EXIT_OK


def export_attention(model, quad, out_dir, stage: int = 0) -> Path:
    """Write one 8-bit map per (frame, window, head) plus ``manifest.csv``."""
    from .frames import save_gray
    from .model import dump_attention
    probs = dump_attention(model, quad, stage=stage)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    F, nW, heads = probs.shape[:3]
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "frame", "window", "head", "min", "max"])
        for f in range(F):
            for win in range(nW):
                for h in range(heads):
                    m = probs[f, win, h].astype(np.float64)
                    lo, hi = float(m.min()), float(m.max())
                    scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
                    name = f"attn_f{f + 1}_w{win:04d}_h{h}.png"
                    save_gray(np.floor(scaled * 255.0 + 0.5), out / name)
                    w.writerow([name, f + 1, win, h, repr(lo), repr(hi)])
    return manifest


def cmd_attn_dump(args) -> int:
    from .frames import load_frames
    cfg = _run_config(args)
    if cfg.checkpoint is None or cfg.input is None:
        raise ConfigError("attn-dump needs --checkpoint and --in")
    model = _load_model(cfg.checkpoint)
    quad = load_frames(cfg.input, expected=4)
    manifest = export_attention(model, quad.astype(model.dtype), cfg.out, stage=args.stage)
    print(f"attention maps written; manifest {manifest}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rstt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, paths=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--preset", choices=["S", "M", "L"])
        p.add_argument("--fusion", choices=["mca", "concat", "add"])
        p.add_argument("--recon", action="store_true", help="enable the 10 residual reconstruction blocks")
        p.add_argument("--seed", type=int)
        if paths:
            p.add_argument("--in", dest="input_dir")
            p.add_argument("--out")
            p.add_argument("--checkpoint")

    p = sub.add_parser("train", help="train on synthetic clips")
    common(p)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="4 frames in, 7 frames out")
    common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="latency / FPS / parameter count per preset")
    common(p)
    p.add_argument("--reps", type=int)
    p.add_argument("--size", type=int, help="square input side")
    p.add_argument("--presets", help="comma separated, default S,M,L")
    p.add_argument("--csv", help="report path (default <out>/bench.csv)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("--seed", type=int)
    p.add_argument("--skip-model", action="store_true", help="skip the end-to-end model check")
    p.add_argument("--sabotage", metavar="OP", help="corrupt OP's backward rule (harness self-test)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("attn-dump", help="export decoder cross-attention maps")
    common(p)
    p.add_argument("--stage", type=int, default=0)
    p.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
