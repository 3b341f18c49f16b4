"""Product quantization of trained item latents: error and memory per K.

    python demos/quantize_latents.py
"""

import numpy as np

from alignrec.benchmarks import small_setup
from alignrec.data import generate_synthetic
from alignrec.quantization import memory_ratio, reconstruction_mse, train_codebook
from alignrec.system import Recommender
from alignrec.training import pretrain


def main():
    spec, cfg = small_setup(0)
    bundle = generate_synthetic(spec)
    system = Recommender.build(bundle.catalog, cfg)
    pretrain(system, bundle.interactions)
    Z = system.item_latents()
    var = float(np.mean((Z - Z.mean(axis=0)) ** 2))
    print(f"{Z.shape[0]} latents of dim {Z.shape[1]}, per-coordinate variance {var:.4f}")
    print("   M    K      mse   ratio")
    for M in (4, 8):
        for K in (4, 16, 64):
            cb = train_codebook(Z, M=M, K=K, seed=0)
            print(f"{M:>4} {K:>4} {reconstruction_mse(cb, Z):8.4f} {memory_ratio(Z.shape[1], M, K):6.0f}x")


if __name__ == "__main__":
    main()
