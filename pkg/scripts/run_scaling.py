"""Per-step prior time against sequence length for SKR and GP, with fitted exponents.

    python scripts/run_scaling.py --lengths 500 1000 2000 4000 --scope prior
"""
import argparse

from skrvae.evaluation import format_scaling_table, time_epochs, time_ratio


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lengths", type=int, nargs="+", default=[500, 1000, 2000, 4000])
    ap.add_argument("--methods", nargs="+", default=["skr", "gp"])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--scope", choices=["prior", "step"], default="prior")
    args = ap.parse_args()

    rep = time_epochs(args.methods, args.lengths, repeats=args.repeats, scope=args.scope)
    print(format_scaling_table(rep))
    if {"skr", "gp"} <= set(args.methods):
        ratio = time_ratio(rep, "gp", "skr")
        print("gp/skr:", "  ".join(f"L={l}: {r:.1f}" for l, r in sorted(ratio.items())))


if __name__ == "__main__":
    main()
