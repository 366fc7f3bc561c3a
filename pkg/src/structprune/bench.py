"""Single-image inference latency and throughput measurement."""

from __future__ import annotations

import csv
import io
import json
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .accounting import count_macs
from .arch import extract_profile
from .layers import Network

BENCH_SCHEMA = "structprune.bench/1"
COMPARE_HEADER = ("network", "params", "macs", "median_latency_s", "iqr_s", "throughput_macs_per_s",
                  "error_percent")


class BenchmarkError(RuntimeError):
    pass


@dataclass
class BenchReport:
    network_id: str
    params: int
    macs: int
    median_latency_s: float
    iqr_s: float
    warmup: int
    samples: int
    latencies_s: list[float] = field(repr=False)
    parallel_kernels: bool = False
    input_shape: tuple[int, ...] = (1, 3, 32, 32)

    @property
    def throughput(self) -> float:
        """MACs per second at the median latency."""
        return self.macs / self.median_latency_s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["throughput_macs_per_s"] = self.throughput
        return {"schema": BENCH_SCHEMA, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        d = {k: v for k, v in d.items() if k not in ("schema", "throughput_macs_per_s")}
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def bench_inference(network: Network, input_shape=None, warmup: int = 5, samples: int = 20,
                    network_id: str | None = None, parallel_kernels: bool = False, seed: int = 0) -> BenchReport:
    """Time ``samples`` eval-mode forwards on one fixed random input after ``warmup`` untimed runs."""
    if warmup < 1 or samples < 5:
        raise ValueError("need warmup >= 1 and samples >= 5")
    if input_shape is None:
        r = network.arch.resolution
        input_shape = (1, 3, r, r)
    input_shape = tuple(int(s) for s in input_shape)
    x = T.Tensor(np.random.default_rng(seed).standard_normal(input_shape), dtype=T.DEFAULT_DTYPE)
    was_training = network.training
    network.eval()
    limits = nullcontext() if parallel_kernels else threadpool_limits(1)
    latencies = []
    try:
        with limits, T.no_grad():
            for _ in range(warmup):
                out = network(x)
            if not np.isfinite(out.data).all():
                raise BenchmarkError("network produced non-finite outputs")
            for _ in range(samples):
                t0 = time.perf_counter()
                out = network(x)
                latencies.append(time.perf_counter() - t0)
            if not np.isfinite(out.data).all():
                raise BenchmarkError("network produced non-finite outputs")
    finally:
        network.train(was_training)
    q1, med, q3 = np.percentile(latencies, [25, 50, 75])
    profile = extract_profile(network)
    return BenchReport(
        network_id=network_id or network.arch.name or network.arch.family,
        params=network.num_params(),
        macs=count_macs(profile.descriptor()).macs,
        median_latency_s=float(med),
        iqr_s=float(q3 - q1),
        warmup=warmup,
        samples=samples,
        latencies_s=[float(v) for v in latencies],
        parallel_kernels=parallel_kernels,
        input_shape=input_shape,
    )


def compare(reports, errors: dict[str, float] | None = None) -> list[dict]:
    """Rows sorted by median latency (stable), with optional error metadata merged in."""
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    errors = errors or {}
    rows = [
        {
            "network": r.network_id,
            "params": r.params,
            "macs": r.macs,
            "median_latency_s": r.median_latency_s,
            "iqr_s": r.iqr_s,
            "throughput_macs_per_s": r.throughput,
            "error_percent": errors.get(r.network_id),
        }
        for r in reports
    ]
    return sorted(rows, key=lambda row: row["median_latency_s"])


def comparison_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COMPARE_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row[k] is None else row[k]) for k in COMPARE_HEADER})
    return buf.getvalue()
