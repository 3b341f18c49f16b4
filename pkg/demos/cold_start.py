"""Cold-item ranking with all content, with modalities removed at test
time, and with collaborative signals only.

    python demos/cold_start.py --seed 0
"""

import argparse

from alignrec.benchmarks import run_cold


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    r = run_cold(args.seed)
    print(f"{r['n_test']} cold test events, hit@10")
    for key in ("full", "drop_vis", "drop_vis_txt", "cf_only"):
        print(f"  {key:<13} {r[key]:.3f}")


if __name__ == "__main__":
    main()
