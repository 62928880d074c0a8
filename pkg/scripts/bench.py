"""FPS and parameter count for each preset at a fixed input size.

    python3 scripts/bench.py --size 96 --reps 20
"""
import argparse

from rstt.cli import run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--presets", default="S,M,L")
    args = ap.parse_args()

    for size in (args.size, 2 * args.size):
        rows = run_bench(tuple(args.presets.split(",")), size, size, reps=args.reps)
        for r in rows:
            print(f"{r.preset}  {size}x{size}  params {r.params:>10,}  median {r.median_s:.3f}s  "
                  f"FPS {r.fps:.3f}", flush=True)


if __name__ == "__main__":
    main()
