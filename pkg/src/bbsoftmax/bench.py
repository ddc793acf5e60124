"""Throughput and peak-memory measurement of serial vs sharded training steps.

Each cell runs full loss+gradient steps on random data at a given class
count and shard count.  BLAS pools are pinned to one thread for the timed
region so that measured parallelism comes from the shard workers alone and
reductions stay deterministic.
"""

from __future__ import annotations

import csv
import resource
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .baskets import MiningSchedule, build_label_space, ignored_count
from .losses import Classifier, LossConfig, Method
from .sharding import ShardWorkerPool, _segments_by_shard, shard_layout
from .training import TrainMode, _parallel_batch, _serial_batch


@dataclass
class BenchRow:
    num_classes: int
    shards: int
    images_per_second: float
    peak_resident_bytes: int
    status: str = "ok"


def _peak_rss_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def _bench_cell(num_classes: int, shards: int, dim: int, batch: int,
                steps: int, baskets: int, tau: int, ratio: float,
                seed: int) -> float:
    rng = np.random.default_rng(seed)
    sizes = [num_classes // baskets + (1 if i < num_classes % baskets else 0)
             for i in range(baskets)]
    space = build_label_space(sizes)
    clf = Classifier(rng.standard_normal((num_classes, dim)))
    X = rng.standard_normal((batch, dim))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    owners = rng.integers(1, baskets + 1, size=batch)
    tcols = np.array([
        space.offsets[m - 1] + int(rng.integers(space.basket_sizes[m - 1]))
        for m in owners
    ])
    cfg = LossConfig(Method.COSFACE, scale_s=16.0, margin_m=0.1)
    counts = [ignored_count(n, tau, ratio) for n in sizes]
    layout = shard_layout(space.total, shards)
    segment_map = {m: _segments_by_shard(layout, space, m)
                   for m in range(1, baskets + 1)}
    taus = (tau,) * baskets

    def step():
        if shards == 1:
            _serial_batch(cfg, space, clf, X, owners, tcols, TrainMode.BBS,
                          counts)
        else:
            _parallel_batch(cfg, space, clf, X, owners, tcols, layout, taus,
                            ratio, pool, segment_map)

    with ShardWorkerPool(shards) as pool:
        with threadpool_limits(limits=1):
            step()  # warmup
            t0 = time.perf_counter()
            for _ in range(steps):
                step()
            elapsed = time.perf_counter() - t0
    return batch * steps / elapsed


def run_bench(num_classes_list, shard_list, dim: int = 128, batch: int = 16,
              steps: int = 3, baskets: int = 8, tau: int = 2,
              ratio: float = 0.5, seed: int = 0, echo=print) -> list[BenchRow]:
    """Grid of (class count, shard count) cells, ordered small to large.

    An allocation failure is reported in the row's status and the run
    continues with the next cell.
    """
    rows = []
    for n in sorted(int(v) for v in num_classes_list):
        for g in sorted(int(v) for v in shard_list):
            try:
                ips = _bench_cell(n, g, dim, batch, steps, baskets, tau,
                                  ratio, seed)
                row = BenchRow(n, g, ips, _peak_rss_bytes())
            except MemoryError:
                row = BenchRow(n, g, float("nan"), _peak_rss_bytes(),
                               "alloc_failed")
            rows.append(row)
            echo(f"classes={row.num_classes} shards={row.shards} "
                 f"images/s={row.images_per_second:.1f} "
                 f"peak_bytes={row.peak_resident_bytes} {row.status}")
    return rows


def write_bench_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["num_classes", "shards", "images_per_second",
                         "peak_resident_bytes", "status"])
        for r in rows:
            writer.writerow([r.num_classes, r.shards,
                             f"{r.images_per_second:.3f}",
                             r.peak_resident_bytes, r.status])
