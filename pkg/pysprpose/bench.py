"""
Decode latency scaling study.

Every grid cell times repeated decodes of pre-built synthetic maps (no file
I/O) and the report fits median latency against decoded persons times
joints.  Reports always carry the machine they were measured on.
"""
from __future__ import annotations

import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .decoder import DecoderConfig, benchmark_decode, decode, synthetic_maps
from .encoder import VANILLA, canonical_mode
from .schemas import check_document
from .skeleton import ROOT, SkeletonSpec

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
MINIMUM_PERSONS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class ScalingGrid:
    persons: Tuple[int, ...] = MINIMUM_PERSONS
    joints: Tuple[int, ...] = (8, 16)
    resolutions: Tuple[Tuple[int, int], ...] = ((64, 64), (128, 128))
    repetitions: int = 20
    mode: str = VANILLA
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.persons or not self.joints or not self.resolutions:
            raise ValueError("Scaling grid is empty: persons, joints and resolutions all need values")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        object.__setattr__(self, "mode", canonical_mode(self.mode))

    @property
    def cells(self):
        return [(h, w, k, n) for h, w in self.resolutions for k in self.joints for n in self.persons]

    def covers_minimum(self):
        return set(MINIMUM_PERSONS) <= set(self.persons) and len(set(self.resolutions)) >= 2


def machine_descriptor():
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }


def linear_fit(x, y):
    """Least-squares line through (x, y) with R^2; None fields when x is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0:
        return None, None, None
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(residual ** 2)) / total if total > 0 else 1.0
    return float(slope), float(intercept), r2


def _flat_spec(num_joints):
    return SkeletonSpec(name="bench{0}".format(num_joints), dim=2,
                        joint_names=tuple("j{0}".format(j) for j in range(num_joints)),
                        hierarchy_level=(2,) * num_joints, parent=(ROOT,) * num_joints)


def parallel_throughput(maps, spec, decodes, workers):
    """Decodes per second with a thread pool sharing the same maps."""
    cmap, dstack, cfg = maps
    nms = DecoderConfig(max_peaks=10000)
    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda _: decode(cmap, dstack, cfg, spec, nms), range(decodes)))
    elapsed = time.perf_counter() - start
    return decodes / elapsed if elapsed > 0 else float("inf")


@dataclass
class BenchReport:
    machine: Dict[str, object]
    grid: ScalingGrid
    cells: List[Dict[str, object]] = field(default_factory=list)
    fits: List[Dict[str, object]] = field(default_factory=list)

    def to_dict(self):
        return {
            "version": REPORT_VERSION,
            "machine": dict(self.machine),
            "grid": {
                "persons": list(self.grid.persons),
                "joints": list(self.grid.joints),
                "resolutions": [list(r) for r in self.grid.resolutions],
                "repetitions": self.grid.repetitions,
                "mode": self.grid.mode,
                "seed": self.grid.seed,
                "workers": self.grid.workers,
                "covers_minimum": self.grid.covers_minimum(),
            },
            "cells": [dict(c) for c in self.cells],
            "fits": [dict(f) for f in self.fits],
        }

    def summary_table(self):
        head = "{0:>9}  {1:>4}  {2:>4}  {3:>10}  {4:>10}  {5:>6}".format("res", "K", "N", "median ms", "mean ms", "cv")
        lines = [head, "-" * len(head)]
        for c in self.cells:
            lines.append("{0:>9}  {1:>4}  {2:>4}  {3:>10.3f}  {4:>10.3f}  {5:>6.3f}".format(
                "{0}x{1}".format(c["height"], c["width"]), c["k"], c["n"], c["median_ms"], c["mean_ms"], c["cv"]))
        lines.append("")
        for f in self.fits:
            if f["slope_ms"] is None:
                lines.append("{0}: no fit".format(f["resolution"]))
            else:
                lines.append("{0}: latency = {1:.5f} ms * (N*K) + {2:.4f} ms, R^2 = {3:.3f}".format(
                    f["resolution"], f["slope_ms"], f["intercept_ms"], f["r2"]))
        return "\n".join(lines)


def validate_report(doc):
    """Check a report document against schemas/bench_report.json; raises ValueError naming the field."""
    return check_document(doc, "bench_report", "report", ValueError)


def run_scaling_study(grid):
    """
    :param grid: ScalingGrid
    :return: BenchReport
    """
    report = BenchReport(machine=machine_descriptor(), grid=grid)
    for h, w, k, n in grid.cells:
        maps = synthetic_maps(h, w, k, n, grid.mode, grid.seed)
        spec = _flat_spec(k)
        result = benchmark_decode(h, w, k, n, grid.repetitions, grid.mode, grid.seed, spec=spec, maps=maps)
        cell = result.to_dict()
        if grid.workers > 1:
            cell["parallel_throughput_per_s"] = parallel_throughput(
                maps, spec, grid.repetitions * grid.workers, grid.workers)
        report.cells.append(cell)
        logger.info("bench %dx%d K=%d N=%d median %.3f ms", h, w, k, n, cell["median_ms"])
    for h, w in grid.resolutions:
        rows = [c for c in report.cells if (c["height"], c["width"]) == (h, w)]
        slope, intercept, r2 = linear_fit([c["decoded_persons"] * c["k"] for c in rows],
                                          [c["median_ms"] for c in rows])
        report.fits.append({"resolution": "{0}x{1}".format(h, w), "slope_ms": slope,
                            "intercept_ms": intercept, "r2": r2, "points": len(rows)})
    validate_report(report.to_dict())
    return report
