"""Parameter/size accounting and host-side latency measurement."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import prepare
from .ensemble import EnsembleModel, bundle_files, predict_patches
from .imaging import Image, decode_image
from .landmarks import LandmarkSet, extract_all_patches

STAGES = ("preprocess", "patch_extract", "forward")

# Device-specific figures measured on a phone runtime; shown for context,
# never used as a target for host measurements.
PUBLISHED_LATENCY_MS = {
    "patch ensemble": 0.27,
    "VGG-16": 0.6,
    "EfficientNet-B0": 1.2,
    "Xception": 0.8,
    "ResNet50": 1.0,
}
PUBLISHED_LATENCY_NOTE = ("Published figures were measured on an iPhone 14 (iOS 16) with a "
                          "mobile runtime; they are reference points, not targets for this host.")


def count_params_and_size(model: EnsembleModel):
    """(scalar parameter count, serialized bundle size in bytes)."""
    size = sum(len(b) for b in bundle_files(model).values())
    return model.parameter_count(), size


@dataclass(frozen=True)
class LatencyStats:
    mean: float
    median: float
    p95: float
    stddev: float
    min: float
    max: float


def latency_stats(samples_ms: Sequence[float]) -> LatencyStats:
    """Mean, median, nearest-rank p95 and population stddev."""
    a = np.sort(np.asarray(samples_ms, dtype=np.float64))
    if a.size == 0:
        raise ValueError("no latency samples")
    n = a.size
    p95 = a[max(0, math.ceil(0.95 * n) - 1)]
    return LatencyStats(float(a.mean()), float(np.median(a)), float(p95),
                        float(a.std()), float(a[0]), float(a[-1]))


@dataclass
class BenchReport:
    param_count: int
    bundle_bytes: int
    iterations: int
    warmup: int
    parallel_heads: bool
    latency_ms: LatencyStats
    stage_ms: Dict[str, float]  # mean per stage
    decode_ms: Optional[float] = None  # mean, excluded from latency
    samples_ms: List[float] = field(default_factory=list, repr=False)
    stage_samples_ms: Dict[str, List[float]] = field(default_factory=dict, repr=False)
    threads: str = "single"  # BLAS pools pinned to one thread while timing

    def to_dict(self, include_samples: bool = False) -> dict:
        d = {
            "param_count": self.param_count,
            "bundle_bytes": self.bundle_bytes,
            "iterations": self.iterations,
            "warmup": self.warmup,
            "parallel_heads": self.parallel_heads,
            "threads": self.threads,
            "latency_ms": asdict(self.latency_ms),
            "stage_ms": dict(self.stage_ms),
            "decode_ms": self.decode_ms,
            "published_reference_ms": dict(PUBLISHED_LATENCY_MS),
            "published_reference_note": PUBLISHED_LATENCY_NOTE,
        }
        if include_samples:
            d["samples_ms"] = list(self.samples_ms)
        return d

    def text(self) -> str:
        s = self.latency_ms
        lines = [
            f"parameters      {self.param_count:,}",
            f"bundle bytes    {self.bundle_bytes:,}",
            f"iterations      {self.iterations} (warmup {self.warmup})",
            f"heads           {'parallel' if self.parallel_heads else 'serial'}",
            f"latency ms      mean {s.mean:.3f}  median {s.median:.3f}  "
            f"p95 {s.p95:.3f}  stddev {s.stddev:.3f}",
            "stages ms       " + "  ".join(f"{k} {v:.3f}" for k, v in self.stage_ms.items()),
        ]
        if self.decode_ms is not None:
            lines.append(f"decode ms       {self.decode_ms:.3f} (not included above)")
        lines.append("reference       " + ", ".join(f"{k} {v} ms"
                                                   for k, v in PUBLISHED_LATENCY_MS.items()))
        lines.append(f"                {PUBLISHED_LATENCY_NOTE}")
        return "\n".join(lines) + "\n"


def measure_latency(model: EnsembleModel, img: Image, lm: LandmarkSet,
                    iterations: int = 1000, warmup: int = 10,
                    parallel_heads: bool = False,
                    image_bytes: Optional[bytes] = None) -> BenchReport:
    """Time full predictions (preprocess -> patches -> six forwards -> mean).

    Warmup runs are discarded. If ``image_bytes`` is given, decoding is timed
    separately and not counted in the per-iteration latency.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    clock = time.perf_counter_ns
    totals: List[float] = []
    stages: Dict[str, List[float]] = {k: [] for k in STAGES}
    decodes: List[float] = []
    with threadpool_limits(limits=1):
        for it in range(warmup + iterations):
            if image_bytes is not None:
                d0 = clock()
                decode_image(image_bytes)
                d1 = clock()
            t0 = clock()
            pimg, plm = prepare(img, lm, model.preproc)
            t1 = clock()
            patches = extract_all_patches(pimg, plm, model.roi_rules, model.model_config.input_side)
            t2 = clock()
            predict_patches(model, patches, parallel=parallel_heads)
            t3 = clock()
            if it < warmup:
                continue
            totals.append((t3 - t0) / 1e6)
            stages["preprocess"].append((t1 - t0) / 1e6)
            stages["patch_extract"].append((t2 - t1) / 1e6)
            stages["forward"].append((t3 - t2) / 1e6)
            if image_bytes is not None:
                decodes.append((d1 - d0) / 1e6)
    params, size = count_params_and_size(model)
    return BenchReport(
        param_count=params,
        bundle_bytes=size,
        iterations=iterations,
        warmup=warmup,
        parallel_heads=parallel_heads,
        latency_ms=latency_stats(totals),
        stage_ms={k: float(np.mean(v)) for k, v in stages.items()},
        decode_ms=float(np.mean(decodes)) if decodes else None,
        samples_ms=totals,
        stage_samples_ms=stages,
    )
