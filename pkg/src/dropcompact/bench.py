"""Inference-latency microbenchmark.

Times the deterministic forward pass of random-weight models over fixed
random inputs, with all layer buffers preallocated so nothing is allocated
inside the timed region. The analytic multiply-accumulate count per
example is reported next to the measured latency; shape pairs can then be
compared as FLOP ratio vs measured speedup. Both kernel backends can be
timed for side-by-side comparison.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import ACT_IDS, ACT_LINEAR
from .linalg import glorot_uniform, rng_stream

MIN_REPS = 30
WARMUP_PASSES = 10


@dataclass
class BenchResult:
    shape: tuple[int, ...]
    batch: int
    reps: int
    backend: str
    min_s: float
    median_s: float
    p95_s: float
    throughput: float  # examples per second at the median
    flops: int  # multiply-accumulates per example

    def speedup_vs(self, ref: "BenchResult") -> float:
        """How much faster this shape runs than the reference (>1 = faster)."""
        return ref.median_s / self.median_s


def flop_count(shape) -> int:
    """Multiply-accumulates per example: sum of D_l * D_{l-1}."""
    dims = tuple(int(d) for d in shape)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"bad shape {dims}")
    return int(sum(dims[i] * dims[i + 1] for i in range(len(dims) - 1)))


def _build_model(shape, activation: str, seed: int):
    dims = tuple(int(d) for d in shape)
    weights = [
        np.ascontiguousarray(glorot_uniform(dims[i], dims[i + 1], rng_stream(seed, "bench-w", i)))
        for i in range(len(dims) - 1)
    ]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    act_ids = np.array(
        [ACT_IDS[activation]] * (len(dims) - 2) + [ACT_LINEAR], dtype=np.int64
    )
    return dims, weights, biases, act_ids


def _make_runner(weights, biases, act_ids, batch: int, x: np.ndarray, backend: str):
    """Closure running one full forward pass into preallocated buffers."""
    if backend == "numba":
        if not kernels.HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        if batch == 1:
            bufs = kernels.make_numba_list([np.empty(w.shape[0]) for w in weights])
            ws = kernels.make_numba_list(weights)
            bs = kernels.make_numba_list(biases)
            vec = np.ascontiguousarray(x[0] if x.ndim == 2 else x)
            return lambda: kernels._infer_vec_nb(vec, ws, bs, act_ids, bufs)
        bufs = kernels.make_numba_list([np.empty((batch, w.shape[0])) for w in weights])
        wts = kernels.make_numba_list([np.ascontiguousarray(w.T) for w in weights])
        bs = kernels.make_numba_list(biases)
        xb = np.ascontiguousarray(x)
        return lambda: kernels._infer_batch_nb(xb, wts, bs, act_ids, bufs)

    if backend != "numpy":
        raise ValueError(f"unknown backend {backend!r}")
    if batch == 1:
        bufs = [np.empty(w.shape[0]) for w in weights]
        vec = np.ascontiguousarray(x[0] if x.ndim == 2 else x)
        return lambda: kernels.infer_prealloc_numpy(vec, weights, biases, act_ids, bufs)
    bufs = [np.empty((batch, w.shape[0])) for w in weights]
    wts = [np.ascontiguousarray(w.T) for w in weights]
    xb = np.ascontiguousarray(x)
    return lambda: kernels.infer_prealloc_numpy(xb, wts, biases, act_ids, bufs)


def time_forward(
    shape,
    batch: int = 1,
    reps: int = 100,
    seed: int = 0,
    backend: str | None = None,
    activation: str = "relu",
    warmup: int = WARMUP_PASSES,
) -> BenchResult:
    """Median/min/p95 latency of one forward pass at the given batch size."""
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    backend = backend or kernels.backend_name()
    dims, weights, biases, act_ids = _build_model(shape, activation, seed)
    x = rng_stream(seed, "bench-x").random((batch, dims[0]))
    run = _make_runner(weights, biases, act_ids, batch, x, backend)

    for _ in range(warmup):
        run()
    times = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        run()
        times[i] = time.perf_counter() - t0
    median = float(np.median(times))
    return BenchResult(
        shape=dims,
        batch=batch,
        reps=reps,
        backend=backend,
        min_s=float(times.min()),
        median_s=median,
        p95_s=float(np.percentile(times, 95)),
        throughput=batch / median if median > 0 else float("inf"),
        flops=flop_count(dims),
    )


def multi_worker_throughput(
    shape,
    batch: int = 1,
    reps: int = 100,
    workers: int = 2,
    seed: int = 0,
    backend: str | None = None,
    activation: str = "relu",
) -> float:
    """Aggregate examples/sec with `workers` threads running independent
    preallocated forward chains; reported separately from latency stats."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    backend = backend or kernels.backend_name()
    dims, weights, biases, act_ids = _build_model(shape, activation, seed)
    runners = []
    for w in range(workers):
        x = rng_stream(seed, "bench-x", w).random((batch, dims[0]))
        runners.append(_make_runner(weights, biases, act_ids, batch, x, backend))
    for run in runners:
        run()  # warm caches and JIT before timing

    def work(run):
        for _ in range(reps):
            run()

    threads = [threading.Thread(target=work, args=(r,)) for r in runners]
    t0 = time.perf_counter()
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    elapsed = time.perf_counter() - t0
    return workers * reps * batch / elapsed
