"""Accuracy, per-band error statistics, error quartiles and the latency harness."""
from __future__ import annotations

import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import ATTRIBUTES
from .dataio import BANDS, quality_band
from .model import QaNetModel, forward_clip


def _pair(predictions, ground_truth):
    p = np.asarray(predictions, dtype=np.float64)
    g = np.asarray(ground_truth, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, g


def accuracy(predictions, ground_truth) -> float:
    """(1 - MAE) * 100 on normalized scores."""
    p, g = _pair(predictions, ground_truth)
    return (1.0 - float(np.abs(p - g).mean())) * 100.0


def per_attribute_accuracy(predictions, ground_truth):
    p, g = _pair(predictions, ground_truth)
    mae = np.abs(p - g).reshape(len(p), -1).mean(axis=0)
    return tuple(float((1.0 - m) * 100.0) for m in mae), tuple(float(m) for m in mae)


@dataclass(frozen=True)
class BandStat:
    count: int
    mean: tuple
    std: tuple


def band_error_stats(predictions, ground_truth, bands):
    """{band: BandStat} of |pred - gt| per attribute; empty bands are omitted.
    Standard deviations are population (ddof = 0)."""
    p, g = _pair(predictions, ground_truth)
    err = np.abs(p - g).reshape(len(p), -1)
    bands = list(bands)
    if len(bands) != len(err):
        raise ValueError("need one band label per sample")
    unknown = set(bands) - set(BANDS)
    if unknown:
        raise ValueError(f"unknown bands {sorted(unknown)}")
    out = {}
    labels = np.asarray(bands)
    for band in BANDS:
        sel = err[labels == band]
        if len(sel):
            out[band] = BandStat(len(sel), tuple(float(v) for v in sel.mean(axis=0)),
                                 tuple(float(v) for v in sel.std(axis=0)))
    return out


QUANTILE_RULE = "linear"   # numpy default: h = (n - 1) q, interpolate between order statistics


def export_error_distribution(errors):
    """{attribute: {min, q1, median, q3, max}} of absolute errors [N, 4]."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("empty input")
    if e.ndim == 1:
        e = e[:, None]
    names = ATTRIBUTES if e.shape[1] == len(ATTRIBUTES) else tuple(str(i) for i in range(e.shape[1]))
    out = {}
    for j, name in enumerate(names):
        q = np.quantile(e[:, j], [0.0, 0.25, 0.5, 0.75, 1.0], method=QUANTILE_RULE)
        out[name] = dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))
    return out


@dataclass
class EvalReport:
    sample_count: int
    accuracy: dict
    mae: dict
    mean_accuracy: float
    bands: dict
    quartiles: dict

    def to_json(self) -> str:
        return json.dumps(_round(asdict(self)), separators=(", ", ": "))

    def table(self) -> str:
        head = f"{'':<10}" + "".join(f"{a:>16}" for a in ATTRIBUTES)
        lines = [head, f"{'accuracy':<10}" + "".join(f"{self.accuracy[a]:>16.2f}" for a in ATTRIBUTES)]
        lines.append(f"{'mae':<10}" + "".join(f"{self.mae[a]:>16.4f}" for a in ATTRIBUTES))
        for band in BANDS:
            if band in self.bands:
                b = self.bands[band]
                cells = "".join(f"{m:>9.4f}±{s:<6.4f}" for m, s in zip(b["mean"], b["std"]))
                lines.append(f"{band + ' (' + str(b['count']) + ')':<10}" + cells)
            else:
                lines.append(f"{band:<10}" + "absent".rjust(16))
        lines.append(f"mean accuracy {self.mean_accuracy:.2f}% over {self.sample_count} clips")
        return "\n".join(lines)


def _round(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def evaluate(predictions, targets, raw_scores=None) -> EvalReport:
    """Bands come from ground-truth raw scores (derived from targets if absent)."""
    p, g = _pair(predictions, targets)
    acc, mae = per_attribute_accuracy(p, g)
    raw = np.rint(g * 9).astype(int) if raw_scores is None else np.asarray(raw_scores)
    bands = [quality_band(r) for r in raw]
    stats = band_error_stats(p, g, bands)
    return EvalReport(
        sample_count=len(p),
        accuracy=dict(zip(ATTRIBUTES, acc)),
        mae=dict(zip(ATTRIBUTES, mae)),
        mean_accuracy=float(np.mean(acc)),
        bands={b: asdict(s) for b, s in stats.items()},
        quartiles=export_error_distribution(np.abs(p - g)),
    )


# latency

MIN_ITERATIONS = 30
MIN_WARMUP = 5


class InvalidMeasurement(RuntimeError):
    pass


@dataclass(frozen=True)
class TimingStats:
    median: float
    mean: float
    stddev: float
    min: float
    max: float

    @classmethod
    def from_samples(cls, samples):
        s = [float(v) for v in samples]
        return cls(statistics.median(s), statistics.fmean(s), statistics.pstdev(s), min(s), max(s))


@dataclass
class LatencyReport:
    """Milliseconds per frame."""
    combined_parallel: TimingStats
    combined_sequential: TimingStats
    per_stream: dict
    warmup: int
    iterations: int
    frames_per_clip: int
    input_shape: tuple
    hardware: str
    cpu_count: int
    timer_resolution_ms: float

    def to_json(self) -> str:
        return json.dumps(_round(asdict(self)), separators=(", ", ": "))

    def table(self) -> str:
        rows = [("combined (parallel)", self.combined_parallel),
                ("combined (sequential)", self.combined_sequential)]
        rows += [(k, v) for k, v in self.per_stream.items()]
        out = [f"{'ms/frame':<24}{'median':>10}{'mean':>10}{'std':>10}{'min':>10}{'max':>10}"]
        for name, t in rows:
            out.append(f"{name:<24}{t.median:>10.3f}{t.mean:>10.3f}{t.stddev:>10.3f}{t.min:>10.3f}{t.max:>10.3f}")
        out.append(f"{self.iterations} iterations after {self.warmup} warmup; {self.hardware}; "
                   f"{self.cpu_count} cpus")
        return "\n".join(out)


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{cpu}; {available_cpus()} usable cores; {platform.system()} {platform.release()}; " \
           f"python {platform.python_version()}; numpy {np.__version__}"


def available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def timer_resolution() -> float:
    """Smallest observed positive increment of perf_counter, in seconds."""
    info = time.get_clock_info("perf_counter").resolution
    best = float("inf")
    for _ in range(200):
        a = time.perf_counter()
        b = time.perf_counter()
        while b == a:
            b = time.perf_counter()
        best = min(best, b - a)
    return max(info, best)


def _time(fn, warmup, iterations):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def benchmark_latency(model: QaNetModel, clip, warmup: int = 10, iterations: int = MIN_ITERATIONS) -> LatencyReport:
    """Time inference-mode forward passes and report ms per frame.

    Combined timings run the full four-stream forward (parallel threads and
    one after another); per-stream timings run each stream alone.
    """
    if iterations < MIN_ITERATIONS:
        raise ValueError(f"iterations must be >= {MIN_ITERATIONS}, got {iterations}")
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")
    clip = np.asarray(clip)
    T = clip.shape[0]
    frames, B, _ = model._frames(clip[None])
    to_ms = 1000.0 / T

    res = timer_resolution()
    parallel = _time(lambda: forward_clip(model, clip, parallel=True), warmup, iterations)
    sequential = _time(lambda: forward_clip(model, clip, parallel=False), warmup, iterations)
    per_stream = {}
    for s in model.streams:
        samples = _time(lambda s=s: s.forward(frames, B, T), warmup, iterations)
        per_stream[s.config.attribute] = TimingStats.from_samples([v * to_ms for v in samples])
    combined = TimingStats.from_samples([v * to_ms for v in parallel])
    if res * to_ms > 0.01 * combined.median:
        raise InvalidMeasurement(
            f"timer resolution {res * 1e3:.6f} ms is coarser than 1% of the median {combined.median:.6f} ms/frame")
    return LatencyReport(
        combined_parallel=combined,
        combined_sequential=TimingStats.from_samples([v * to_ms for v in sequential]),
        per_stream=per_stream,
        warmup=warmup,
        iterations=iterations,
        frames_per_clip=T,
        input_shape=tuple(model.spec.clip_shape),
        hardware=hardware_descriptor(),
        cpu_count=available_cpus(),
        timer_resolution_ms=res * 1e3,
    )
