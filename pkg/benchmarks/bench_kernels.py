"""Compare the numba and pure-numpy row kernels, plus one pre-training epoch under each backend.

Usage::

    python3 benchmarks/bench_kernels.py            # kernel table
    python3 benchmarks/bench_kernels.py --e2e      # also time a desk pre-training epoch per backend

Kernel shapes follow the desk profile (d=32, window 128, 1024-wide embeddings,
16 landmarks, batch 8). Times are the best of ``--repeat`` runs after a warm-up
call, so numba compilation is excluded.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gimp import _kernels as K


def kernel_inputs(rng):
    sm = rng.standard_normal((8 * 4 * 129, 16))
    sm_y = K.np_softmax_fwd(sm)
    ln = rng.standard_normal((8 * 129, 32))
    xhat, rstd = K.np_layernorm_fwd(ln, 1e-5)
    seg = rng.standard_normal((8 * 4, 129, 8))
    bounds = K.segment_bounds(129, 16)
    diff = rng.standard_normal((8, 128, 1024))
    mask = rng.random((8, 128)) < 0.5
    return {
        "softmax_fwd": (sm,),
        "softmax_bwd": (sm_y, rng.standard_normal(sm.shape)),
        "layernorm_fwd": (ln, 1e-5),
        "layernorm_bwd": (rng.standard_normal(ln.shape), xhat, rstd),
        "segment_mean_fwd": (seg, bounds),
        "segment_mean_bwd": (rng.standard_normal((8 * 4, 16, 8)), bounds),
        "masked_abs_sum": (diff, mask),
        "masked_abs_grad": (diff, mask, rng.standard_normal(8)),
    }


def best_ms(fn, args, repeat):
    fn(*args)
    return 1000.0 * min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def kernel_table(repeat):
    inputs = kernel_inputs(np.random.default_rng(0))
    print("kernel,numpy_ms,numba_ms,speedup")
    for name in K.KERNEL_NAMES:
        t_np = best_ms(getattr(K, "np_" + name), inputs[name], repeat)
        if K.NUMBA_AVAILABLE:
            t_nb = best_ms(getattr(K, "nb_" + name), inputs[name], repeat)
            print(f"{name},{t_np:.4f},{t_nb:.4f},{t_np / t_nb:.2f}")
        else:
            print(f"{name},{t_np:.4f},,")


EPOCH_SCRIPT = """
import time
from gimp.config import TrainConfig
from gimp.data import SynthConfig, generate_synthetic
from gimp.model import GiMPModel, layout_for
from gimp.training import pretrain
cfg = TrainConfig(pretrain_epochs=2)
ds = generate_synthetic(SynthConfig(num_patients=60)).prepared(layout_for(cfg).n_genes)
model = GiMPModel.build(cfg)
model.freeze("gene_encoder")
hist = pretrain(model, ds.split("train"), cfg)
print(hist[-1]["seconds"] * 1000.0)
"""


def epoch_ms(flag):
    env = dict(os.environ, GIMP_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", EPOCH_SCRIPT], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--e2e", action="store_true", help="time one pre-training epoch per backend")
    args = p.parse_args(argv)
    print(f"# backend in this process: {K.backend()}")
    kernel_table(args.repeat)
    if args.e2e:
        # The second epoch is timed so that numba compilation is excluded.
        t_np, t_nb = epoch_ms("0"), epoch_ms("1")
        print("\nworkload,numpy_ms,numba_ms,speedup")
        print(f"pretrain_epoch,{t_np:.1f},{t_nb:.1f},{t_np / t_nb:.2f}")


if __name__ == "__main__":
    main()
