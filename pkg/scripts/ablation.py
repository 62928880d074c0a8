"""Fusion-mode and reconstruction-block ablation (short smoke trainings).

    python3 scripts/ablation.py --iters 50
"""
import argparse

from rstt.experiments import run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=50)
    ap.add_argument("--hr-size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"{'fusion':>7} {'recon':>5} {'params':>9} {'loss 0':>8} {'loss end':>8} {'s':>5}")

    def show(r):
        print(f"{r.fusion:>7} {str(r.recon):>5} {r.params:>9,} {r.first_loss:8.4f} {r.last_loss:8.4f} "
              f"{r.seconds:5.0f}", flush=True)

    run_ablation(args.iters, args.hr_size, args.seed, on_row=show)


if __name__ == "__main__":
    main()
