"""Frozen base vs online adapter on a stream whose user tastes rotate.

    python demos/drift_adaptation.py --seed 0

Takes about 40 s per seed on one core.
"""

import argparse

import numpy as np

from alignrec.benchmarks import run_drift


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = run_drift(args.seed)
    onset = out["onset"]
    print(f"window  static  dynamic   (drift starts at window {onset})")
    for s, d in zip(out["static"].windows, out["dynamic"].windows):
        mark = "*" if s["window"] >= onset else " "
        print(f"{s['window']:>5}{mark} {s['hit@10']:7.3f} {d['hit@10']:8.3f}")
    post = [(s["hit@10"], d["hit@10"]) for s, d in zip(out["static"].windows, out["dynamic"].windows)
            if s["window"] >= onset]
    st, dy = np.mean(post, axis=0)
    print(f"post-drift mean hit@10: static {st:.3f}, dynamic {dy:.3f}")


if __name__ == "__main__":
    main()
