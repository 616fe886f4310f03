"""Wall-clock and allocation benchmarks for the attention variants.

Timing uses ``time.perf_counter_ns`` with warm-up calls discarded; peak memory
is the transient allocation peak reported by :mod:`tracemalloc` (numpy
registers its buffers there) during a separate, untimed call.
"""
from __future__ import annotations

import csv
import io
import threading
import time
import tracemalloc
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import (SparseSpikes, dense_attention, sparse_sja_channelwise,
                        sparse_sja_elementwise)

IMPLS = ("sja_channelwise", "sja_elementwise", "dense")
BENCH_CHANNELS = 12
WARMUP_CALLS = 5
DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096)
DEFAULT_DENSITIES = (0.01, 0.05, 0.10)


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchRecord:
    impl_id: str
    seq_len: int
    density: float
    reps: int
    median_ns: int
    p10_ns: int
    p90_ns: int
    peak_bytes: int


def _require_single_thread():
    active = threading.active_count()
    if active > 1:
        raise BenchError(f"refusing to benchmark with {active} active Python threads")


def make_inputs(seq_len: int, density: float, seed: int = 0,
                channels: int = BENCH_CHANNELS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded binary ``(seq_len, channels, 1)`` Q, K, V spike tensors."""
    if not 0.0 <= density <= 1.0:
        raise BenchError("density must lie in [0, 1]")
    rng = np.random.default_rng([int(seed), int(seq_len), 0x62656E])
    shape = (3, seq_len, channels, 1)
    q, k, v = (rng.random(shape) < density).astype(np.uint8)
    return q, k, v


def _callable_for(impl_id: str, q, k, v, data: str = "spike") -> Callable[[], object]:
    if impl_id == "dense":
        if data == "float":
            rng = np.random.default_rng(q.shape[0])
            mats = [rng.standard_normal(q.shape[:2]) for _ in range(3)]
        else:
            mats = [a[..., 0].astype(np.float64) for a in (q, k, v)]
        return lambda: dense_attention(*mats)
    sq, sk, sv = (SparseSpikes.from_dense(a) for a in (q, k, v))
    if impl_id == "sja_channelwise":
        return lambda: sparse_sja_channelwise(sq, sk, sv)
    if impl_id == "sja_elementwise":
        return lambda: sparse_sja_elementwise(sq, sk, sv)
    raise BenchError(f"unknown implementation {impl_id!r}")


def measure(fn: Callable[[], object], reps: int, warmup: int = WARMUP_CALLS):
    """Returns ``(per-call nanoseconds, peak transient bytes)``."""
    for _ in range(warmup):
        fn()
    times = np.empty(reps, dtype=np.int64)
    for i in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times[i] = time.perf_counter_ns() - t0
    tracemalloc.start()
    try:
        base = tracemalloc.get_traced_memory()[0]
        tracemalloc.reset_peak()
        fn()
        peak = tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()
    return times, max(int(peak), 0)


def time_attention(impl_id: str, seq_len: int, density: float, reps: int = 20,
                   seed: int = 0, data: str = "spike") -> BenchRecord:
    """Benchmark one attention implementation on seeded pseudo-data (12 channels)."""
    if reps < 3:
        raise BenchError("reps must be >= 3")
    _require_single_thread()
    q, k, v = make_inputs(seq_len, density, seed)
    fn = _callable_for(impl_id, q, k, v, data)
    with threadpool_limits(limits=1):
        times, peak = measure(fn, reps)
    p10, med, p90 = np.percentile(times, [10, 50, 90], method="nearest")
    return BenchRecord(impl_id, int(seq_len), float(density), int(reps), int(med), int(p10),
                       int(p90), peak)


def run_grid(impls: Iterable[str] = IMPLS, lengths: Iterable[int] = DEFAULT_LENGTHS,
             densities: Iterable[float] = DEFAULT_DENSITIES, reps: int = 20,
             seed: int = 0) -> list[BenchRecord]:
    return [time_attention(impl, n, d, reps, seed)
            for impl in impls for d in densities for n in lengths]


def loglog_slope(lengths, times) -> float:
    """Least-squares slope of ``log(time)`` against ``log(length)``."""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    if x.size < 2 or np.unique(x).size < 2:
        raise BenchError("need at least two distinct lengths to fit a slope")
    return float(np.polyfit(x, y, 1)[0])


def scaling_report(records: Iterable[BenchRecord], min_points: int = 4) -> dict:
    """Fitted slope per ``(impl_id, density)`` group of records."""
    groups: dict[tuple[str, float], list[BenchRecord]] = {}
    for r in records:
        groups.setdefault((r.impl_id, r.density), []).append(r)
    slopes = {}
    for key, recs in sorted(groups.items()):
        if len({r.seq_len for r in recs}) < min_points:
            raise BenchError(f"{key[0]} at density {key[1]} has fewer than {min_points} lengths")
        slopes[key] = loglog_slope([r.seq_len for r in recs], [max(r.median_ns, 1) for r in recs])
    return slopes


def records_to_csv(records: Iterable[BenchRecord]) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(BenchRecord)]
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow(asdict(r))
    return buf.getvalue()


def records_from_csv(text: str) -> list[BenchRecord]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(BenchRecord(row["impl_id"], int(row["seq_len"]), float(row["density"]),
                               int(row["reps"]), int(row["median_ns"]), int(row["p10_ns"]),
                               int(row["p90_ns"]), int(row["peak_bytes"])))
    return out


def summary_text(slopes: dict) -> str:
    lines = ["impl_id,density,loglog_slope"]
    lines += [f"{impl},{density:g},{slope:.3f}" for (impl, density), slope in slopes.items()]
    return "\n".join(lines) + "\n"


def latency_probe(model, sample, reps: int = 20, warmup: int = 2) -> tuple[int, int]:
    """Median wall time (ns) of a single-window forward + readout decision.

    Returns ``(median_ns, prediction)``; raises if the prediction changes
    between repetitions.
    """
    from .snn import jasnn_forward, predict

    if reps < 10:
        raise BenchError("reps must be >= 10")
    _require_single_thread()
    preds = set()

    def run():
        trace, _, _ = jasnn_forward(model, sample)
        preds.add(predict(trace))

    with threadpool_limits(limits=1):
        times, _ = measure(run, reps, warmup)
    if len(preds) != 1:
        raise BenchError("prediction changed across repetitions")
    return int(np.median(times)), preds.pop()
