"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--apps 2000] [--k 10] [--repeat 5]

Scores and gradients are timed on the default planted corpus. Each row is
the best of ``--repeat`` runs. The last column checks the backends agree.
"""

import argparse
import time

import numpy as np

from fmdroid import corpus, fm, kernels


def best_of(repeat, fn):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--apps", type=int, default=2000)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--batch", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    ds, _, _ = corpus.generate_dataset(corpus.CorpusSpec(n_apps=args.apps))
    model = fm.init_model(ds.dim, args.k, seed=0, init_scale=0.1)
    cat, allowed = model.mask.layout(ds.dim)
    indptr, indices = kernels.as_csr(*ds.csr)
    rows = np.arange(min(args.batch, len(ds)), dtype=np.int64)
    cfg = fm.TrainConfig(k=args.k, epochs=args.epochs, batch_size=args.batch)
    print(f"{len(ds)} apps, dim {ds.dim}, k {args.k}, backends {sorted(kernels.BACKENDS)}")

    def grad(kern):
        gw, gV = np.zeros(ds.dim), np.zeros((ds.dim, args.k))
        kern.accumulate_gradient(indptr, indices, rows, ds.y, model.w0, model.w, model.V, cat, allowed, 0.0, 0.0, gw, gV)
        return gV

    tasks = {
        "score all apps": lambda kern, name: kern.scores(indptr, indices, model.w0, model.w, model.V, cat, allowed),
        f"gradient, batch {len(rows)}": lambda kern, name: grad(kern),
        f"train {args.epochs} epochs": lambda kern, name: fm.train(ds, cfg, backend=name).V,
    }
    names = sorted(kernels.BACKENDS)
    print(f"{'task':<22}" + "".join(f"{n:>12}" for n in names) + f"{'speedup':>10}{'agree':>8}")
    for label, task in tasks.items():
        times, outs = {}, {}
        for name in names:
            kern = kernels.get(name)
            outs[name] = task(kern, name)
            times[name] = best_of(args.repeat if "train" not in label else 1, lambda: task(kern, name))
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        agree = all(np.allclose(outs[n], outs[names[0]], rtol=1e-9, atol=1e-9) for n in names)
        print(f"{label:<22}" + "".join(f"{times[n] * 1e3:>10.1f}ms" for n in names) + f"{speed:>9.1f}x{str(agree):>8}")


if __name__ == "__main__":
    main()
