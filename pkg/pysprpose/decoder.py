"""
Single-stage inference: NMS on the root confidence map, then displacement
lookup and pose assembly for vanilla and hierarchical maps.
"""
from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.ndimage import maximum_filter

from .encoder import (
    HIERARCHICAL, VANILLA, DisplacementMapStack, EncoderConfig, canonical_mode, encode_root_confidence,
)
from .errors import DataError, ModeMismatchError
from .representation import Pose, Scene
from .skeleton import ROOT, SkeletonSpec, hierarchy_order

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecoderConfig:
    window: int = 3
    threshold: float = 0.3
    max_peaks: int = 30
    refine: bool = False

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("NMS window must be a positive odd integer, got {0}".format(self.window))
        if self.max_peaks < 0:
            raise ValueError("max_peaks must be >= 0")


@dataclass(frozen=True)
class Peak:
    row: int
    col: int
    score: float
    x: float = field(default=None)
    y: float = field(default=None)

    def __post_init__(self):
        if self.x is None:
            object.__setattr__(self, "x", float(self.col))
        if self.y is None:
            object.__setattr__(self, "y", float(self.row))

    @property
    def position(self):
        return self.x, self.y


@dataclass(frozen=True, eq=False)
class DecodedPose:
    pose: Pose
    root: np.ndarray
    score: float
    per_joint_scores: np.ndarray


def nms_peaks(cmap, window=3, threshold=0.3, max_peaks=30, refine=False):
    """
    Local maxima of the confidence map.

    A cell is a peak when no cell of its window exceeds it and no cell that
    precedes it in row-major order equals it, and its value reaches the
    threshold.  Peaks come back sorted by score, highest first.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("NMS window must be a positive odd integer, got {0}".format(window))
    values = np.asarray(cmap.values, dtype=np.float64)
    half = window // 2
    window_max = maximum_filter(values, size=window, mode="constant", cval=-np.inf)
    candidates = (values >= window_max) & (values >= threshold)
    peaks = []
    height, width = values.shape
    for r, c in zip(*np.nonzero(candidates)):
        v = values[r, c]
        c0, c1 = max(c - half, 0), min(c + half + 1, width)
        if (values[max(r - half, 0):r, c0:c1] >= v).any() or (values[r, c0:c] >= v).any():
            continue
        x, y = float(c), float(r)
        if refine:
            x += _refine_offset(values, r, c, 0, 1)
            y += _refine_offset(values, r, c, 1, 0)
        peaks.append(Peak(row=int(r), col=int(c), score=float(v), x=x, y=y))
    peaks.sort(key=lambda p: -p.score)
    return peaks[:max_peaks]


def _refine_offset(values, r, c, dr, dc):
    height, width = values.shape
    lo = values[r - dr, c - dc] if r - dr >= 0 and c - dc >= 0 else -np.inf
    hi = values[r + dr, c + dc] if r + dr < height and c + dc < width else -np.inf
    if hi > lo:
        return 0.25
    if lo > hi:
        return -0.25
    return 0.0


def _check_inputs(cmap, dstack, cfg, spec, mode):
    if canonical_mode(dstack.mode) != mode:
        raise ModeMismatchError("Displacement maps are {0}, decoder expects {1}".format(dstack.mode, mode))
    if (cmap.height, cmap.width) != (dstack.height, dstack.width):
        raise DataError("Confidence map is {0}x{1}, displacement maps are {2}x{3}".format(
            cmap.height, cmap.width, dstack.height, dstack.width))
    if (cfg.map_height, cfg.map_width) != (cmap.height, cmap.width):
        raise DataError("Encoder config expects {0}x{1} maps, got {2}x{3}".format(
            cfg.map_height, cfg.map_width, cmap.height, cmap.width))
    if dstack.num_joints != spec.num_joints or dstack.dim != spec.dim:
        raise DataError("Displacement maps hold {0} joints in {1}D, skeleton '{2}' has {3} in {4}D".format(
            dstack.num_joints, dstack.dim, spec.name, spec.num_joints, spec.dim))
    if spec.dim == 3 and dstack.root_depth is None:
        raise DataError("3D displacement maps carry no root depth channel")


def _peaks(cmap, nms):
    nms = nms or DecoderConfig()
    return nms_peaks(cmap, nms.window, nms.threshold, nms.max_peaks, nms.refine)


def _roots(peaks, dstack, cfg):
    rows = np.array([p.row for p in peaks], dtype=np.int64)
    cols = np.array([p.col for p in peaks], dtype=np.int64)
    root_z = None
    if dstack.dim == 3:
        root_z = dstack.root_depth[rows, cols] * cfg.depth_norm
    return rows, cols, root_z


def _assemble(peaks, coords, known, cfg, root_z):
    out = []
    for i, peak in enumerate(peaks):
        root = [peak.x * cfg.stride, peak.y * cfg.stride]
        if root_z is not None:
            root.append(float(root_z[i]))
        out.append(DecodedPose(pose=Pose(coords=coords[i], visible=known[i]), root=np.array(root),
                               score=peak.score, per_joint_scores=known[i].astype(np.float64)))
    return out


def decode_vanilla(cmap, dstack, cfg, spec, nms=None):
    """
    Read every joint channel at the root peak cell:
    joint = cell point + Z * D^j(cell).
    :return: list of DecodedPose sorted by score
    """
    _check_inputs(cmap, dstack, cfg, spec, VANILLA)
    peaks = _peaks(cmap, nms)
    if not peaks:
        return []
    z_norm = cfg.normalizer
    rows, cols, root_z = _roots(peaks, dstack, cfg)
    vec = dstack.vectors()[rows, cols]
    known = dstack.defined_mask[rows, cols]
    coords = np.zeros(vec.shape, dtype=np.float64)
    coords[:, :, 0] = (cols * cfg.stride)[:, None] + z_norm * vec[:, :, 0]
    coords[:, :, 1] = (rows * cfg.stride)[:, None] + z_norm * vec[:, :, 1]
    if root_z is not None:
        coords[:, :, 2] = root_z[:, None] + cfg.depth_norm * vec[:, :, 2]
    return _assemble(peaks, coords, known, cfg, root_z)


def decode_hierarchical(cmap, dstack, cfg, spec, nms=None):
    """
    Level 2 joints are read at the root peak cell; every deeper joint is
    read at the cell nearest its decoded parent, so positions accumulate
    along the articulated path.  A missing parent hides all descendants.
    """
    _check_inputs(cmap, dstack, cfg, spec, HIERARCHICAL)
    peaks = _peaks(cmap, nms)
    if not peaks:
        return []
    z_norm = cfg.normalizer
    rows, cols, root_z = _roots(peaks, dstack, cfg)
    vectors = dstack.vectors()
    defined = dstack.defined_mask
    n, k, dim = len(peaks), spec.num_joints, spec.dim
    coords = np.zeros((n, k, dim), dtype=np.float64)
    known = np.zeros((n, k), dtype=bool)
    for j in hierarchy_order(spec):
        p = spec.parent[j]
        if p == ROOT:
            r_idx, c_idx, ok = rows, cols, np.ones(n, dtype=bool)
            anchor_z = root_z
        else:
            ok = known[:, p]
            r_idx = np.clip(np.floor(coords[:, p, 1] / cfg.stride + 0.5), 0, cfg.map_height - 1).astype(np.int64)
            c_idx = np.clip(np.floor(coords[:, p, 0] / cfg.stride + 0.5), 0, cfg.map_width - 1).astype(np.int64)
            anchor_z = coords[:, p, 2] if dim == 3 else None
        vec = vectors[r_idx, c_idx, j]
        hit = ok & defined[r_idx, c_idx, j]
        coords[:, j, 0] = np.where(hit, c_idx * cfg.stride + z_norm * vec[:, 0], 0.0)
        coords[:, j, 1] = np.where(hit, r_idx * cfg.stride + z_norm * vec[:, 1], 0.0)
        if dim == 3:
            coords[:, j, 2] = np.where(hit, anchor_z + cfg.depth_norm * vec[:, 2], 0.0)
        known[:, j] = hit
    return _assemble(peaks, coords, known, cfg, root_z)


def decode(cmap, dstack, cfg, spec, nms=None):
    """Dispatch on the mode recorded in the displacement maps."""
    if dstack.mode == HIERARCHICAL:
        return decode_hierarchical(cmap, dstack, cfg, spec, nms)
    return decode_vanilla(cmap, dstack, cfg, spec, nms)


@dataclass
class DecodeBenchmark:
    map_height: int
    map_width: int
    num_joints: int
    num_persons: int
    repetitions: int
    mode: str
    timings_ms: List[float]
    poses: List[DecodedPose]
    deterministic: bool

    @property
    def min_ms(self):
        return min(self.timings_ms)

    @property
    def median_ms(self):
        return statistics.median(self.timings_ms)

    @property
    def mean_ms(self):
        return statistics.mean(self.timings_ms)

    @property
    def stdev_ms(self):
        return statistics.stdev(self.timings_ms) if len(self.timings_ms) > 1 else 0.0

    @property
    def cv(self):
        mean = self.mean_ms
        return self.stdev_ms / mean if mean > 0 else 0.0

    def to_dict(self):
        return {
            "height": self.map_height, "width": self.map_width, "k": self.num_joints,
            "n": self.num_persons, "reps": self.repetitions, "mode": self.mode,
            "min_ms": self.min_ms, "median_ms": self.median_ms, "mean_ms": self.mean_ms,
            "stdev_ms": self.stdev_ms, "cv": self.cv, "decoded_persons": len(self.poses),
            "deterministic": self.deterministic,
        }


def synthetic_maps(map_height, map_width, num_joints, num_persons, mode=VANILLA, seed=0, sigma=2.0):
    """
    Confidence peaks on a regular grid with dense random displacement maps,
    sized for timing the decoder in isolation.
    """
    cfg = EncoderConfig(map_height=map_height, map_width=map_width, sigma=sigma)
    side = max(1, int(math.ceil(math.sqrt(num_persons))))
    step_r = map_height / float(side + 1)
    step_c = map_width / float(side + 1)
    roots = []
    for i in range(num_persons):
        r, c = divmod(i, side)
        roots.append(np.array([round((c + 1) * step_c), round((r + 1) * step_r)], dtype=np.float64))
    persons = [Pose.from_coords([root]) for root in roots]
    scene = Scene(image_height=map_height, image_width=map_width, persons=persons)
    cmap = encode_root_confidence(scene, roots, cfg)
    rng = np.random.default_rng(seed)
    values = rng.uniform(-0.05, 0.05, size=(map_height, map_width, 2 * num_joints))
    return cmap, DisplacementMapStack.dense(values, dim=2, mode=mode), cfg


def benchmark_decode(map_height, map_width, num_joints, num_persons, repetitions, mode=VANILLA, seed=0,
                     spec=None, maps=None):
    """
    Time repeated decodes of pre-built synthetic maps (no file I/O).
    :return: DecodeBenchmark with per-repetition wall times
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1, got {0}".format(repetitions))
    mode = canonical_mode(mode)
    if spec is None:
        spec = SkeletonSpec(name="bench{0}".format(num_joints), dim=2,
                            joint_names=tuple("j{0}".format(j) for j in range(num_joints)),
                            hierarchy_level=(2,) * num_joints, parent=(ROOT,) * num_joints)
    cmap, dstack, cfg = maps or synthetic_maps(map_height, map_width, num_joints, num_persons, mode, seed)
    nms = DecoderConfig(max_peaks=max(30, num_persons))
    timings, first, deterministic = [], None, True
    poses = []
    for _ in range(repetitions):
        start = time.perf_counter()
        poses = decode(cmap, dstack, cfg, spec, nms)
        timings.append((time.perf_counter() - start) * 1000.0)
        snapshot = [(p.score, p.pose.coords.tobytes()) for p in poses]
        if first is None:
            first = snapshot
        elif snapshot != first:
            deterministic = False
    logger.debug("Decode benchmark %dx%d K=%d N=%d: median %.3f ms",
                 map_height, map_width, num_joints, num_persons, statistics.median(timings))
    return DecodeBenchmark(map_height=map_height, map_width=map_width, num_joints=num_joints,
                           num_persons=num_persons, repetitions=repetitions, mode=mode,
                           timings_ms=timings, poses=poses, deterministic=deterministic)
