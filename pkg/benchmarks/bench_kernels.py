"""Compare the compiled and numpy kernels on the default network size.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from clshift import _kernels_py
from clshift.nn import EPS, MlpModel, cell_weights

try:
    from clshift import _kernels as _compiled
except ImportError:
    _compiled = None


def cases(batch):
    rng = np.random.default_rng(0)
    model = MlpModel([32, 64, 32, 21], seed=0)
    x = rng.normal(size=(batch, 32))
    y = (rng.random((batch, 21)) < 0.3).astype(float)
    w = cell_weights(rng.random(21) < 0.67, y.shape)
    return {
        f"forward (B={batch})": lambda k: k.forward(model.theta, model.sizes, x, EPS),
        f"loss_grad (B={batch})": lambda k: k.loss_grad(model.theta, model.sizes, x, y, w, EPS),
        f"per_sample_grads (B={batch})": lambda k: k.per_sample_grads(model.theta, model.sizes, x, y, w, EPS),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()
    backends = [_kernels_py] + ([_compiled] if _compiled else [])
    if _compiled is None:
        print("compiled extension not built; timing the numpy kernels only")
    print(f"{'kernel':<28}" + "".join(f"{b.BACKEND + ' (us)':>16}" for b in backends) + f"{'speedup':>10}")
    for batch in (1, 16, 256):
        for name, fn in cases(batch).items():
            times = []
            for b in backends:
                n = max(1, args.repeat // max(1, batch // 16))
                times.append(min(timeit.repeat(lambda: fn(b), number=n, repeat=3)) / n * 1e6)
            speed = f"{times[0] / times[1]:>9.1f}x" if len(times) > 1 else ""
            print(f"{name:<28}" + "".join(f"{t:>16.1f}" for t in times) + speed)


if __name__ == "__main__":
    main()
