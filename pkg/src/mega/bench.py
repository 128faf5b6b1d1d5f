"""Benchmark the numpy kernels against the compiled extension.

Times the primitives at the shapes the training loop actually uses (single
state rollout forward, full-batch update) plus a complete SAC train step.
"""

from __future__ import annotations

import time

import numpy as np

from mega import kernels
from mega.envs import ACTION_DIM, OBS_DIM
from mega.genotype import decode_to_weights, random_genotype
from mega.nets import ActorDims, ModularActorNet
from mega.sac import CriticNet, ReplayBuffer, SacConfig, SacTrainer


def _time(fn, repeats):
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def _kernel_cases(mod, rng):
    x1 = rng.standard_normal((1, 32))
    xb = rng.standard_normal((128, 32))
    W = rng.standard_normal((32, 32))
    b = rng.standard_normal(32)
    dy = rng.standard_normal((128, 32))
    stack = rng.standard_normal((5, 128, 32))
    w = rng.random(5)
    p = rng.standard_normal(20000)
    g = rng.standard_normal(20000)
    m = np.zeros(20000)
    v = np.zeros(20000)
    tgt = rng.standard_normal(20000)
    cases = {
        "dense_fwd B=1": lambda: mod.dense_fwd(x1, W, b, True),
        "dense_fwd B=128": lambda: mod.dense_fwd(xb, W, b, True),
        "dense_bwd B=128": lambda: mod.dense_bwd(xb, xb, W, dy, True),
        "weighted_sum J=5": lambda: mod.weighted_sum(stack, w),
        "adam_step 20k": lambda: mod.adam_step(p, g, m, v, 1, 3e-4, 0.9, 0.999, 1e-8),
        "soft_update 20k": lambda: mod.soft_update(tgt, p, 0.005),
    }
    return cases


def _train_step_case(rng):
    n_tasks = 4
    dims = ActorDims(state_dim=OBS_DIM, action_dim=ACTION_DIM)
    actor = ModularActorNet(dims, rng, n_modules=4)
    critic = CriticNet(OBS_DIM, ACTION_DIM, n_tasks, (64, 64), rng)
    trainer = SacTrainer(actor, critic, n_tasks, ACTION_DIM, SacConfig(batch_size=128))
    buffer = ReplayBuffer(4096, OBS_DIM, ACTION_DIM)
    for i in range(2048):
        obs = rng.standard_normal(OBS_DIM)
        buffer.add(obs, rng.uniform(-1, 1, ACTION_DIM), rng.random(), obs, False, i % n_tasks)
    plans = {
        t: decode_to_weights(random_genotype(2, 4, rng)) for t in range(n_tasks)
    }
    step_rng = np.random.default_rng(7)
    return lambda: trainer.train_step(buffer, plans, step_rng)


def run_benchmark(repeats=200):
    backends = ["numpy"]
    try:
        kernels.get_backend("compiled")
        backends.append("compiled")
    except ImportError:
        print("compiled backend not built; showing numpy only")
    results = {}
    for name in backends:
        mod = kernels.get_backend(name)
        rng = np.random.default_rng(0)
        for label, fn in _kernel_cases(mod, rng).items():
            results.setdefault(label, {})[name] = _time(fn, repeats)
    # the end-to-end step always runs through the active backend, so report
    # it only for the backend selected at import time
    rng = np.random.default_rng(1)
    results.setdefault(f"train_step [{kernels.BACKEND}]", {})[kernels.BACKEND] = _time(
        _train_step_case(rng), max(20, repeats // 10)
    )
    width = max(len(k) for k in results)
    header = f"{'case'.ljust(width)}  " + "  ".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    for label, times in results.items():
        row = label.ljust(width) + "  "
        row += "  ".join(
            f"{times[b] * 1e6:10.2f}us" if b in times else f"{'-':>12}" for b in backends
        )
        if len(backends) == 2 and all(b in times for b in backends):
            row += f"  {times['numpy'] / times['compiled']:7.2f}x"
        print(row)
    return results


if __name__ == "__main__":
    run_benchmark()
