"""
Deterministic synthetic multi-person scenes.

Randomness comes from SplitMix64 (64-bit state):

    state = state + 0x9E3779B97F4A7C15            (mod 2^64)
    z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

Uniform reals take the top 53 bits; normals use Box-Muller.  Scene `index`
of a config draws from its own stream, so scenes can be generated in any
order or in parallel.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .encoder import DisplacementMapStack
from .errors import DataError, SynthesisError
from .representation import Pose, Scene, centroid_root
from .skeleton import ROOT, SkeletonSpec, default_toy6, ensure_valid, hierarchy_order
from .tensorio import atomic_write_bytes

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

COORD_QUANTUM = 0.25

# a single whitespace byte separates the header from the pixels
_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+255\s")


def _mix_array(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class SplitMix64(object):

    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self):
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _M1) & MASK64
        z = ((z ^ (z >> 27)) * _M2) & MASK64
        return z ^ (z >> 31)

    def u64s(self, n):
        """The next n outputs as a uint64 array."""
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN) + np.uint64(self.state)
        self.state = (self.state + n * GOLDEN) & MASK64
        return _mix_array(steps)

    def uniform(self, low=0.0, high=1.0):
        return low + (high - low) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def uniforms(self, n, low=0.0, high=1.0):
        return low + (high - low) * ((self.u64s(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53)

    def integer(self, low, high):
        """Uniform integer in [low, high]."""
        return low + int(self.uniform() * (high - low + 1)) if high > low else low

    def normals(self, n):
        u1 = 1.0 - self.uniforms(n)
        u2 = self.uniforms(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


def scene_stream(seed, index):
    return SplitMix64(SplitMix64((int(seed) + int(index) * GOLDEN) & MASK64).next_u64())


@dataclass(frozen=True)
class SynthConfig:
    """
    limb_lengths gives the (min, max) segment length in pixels for level 2
    joints (measured from the sampled body center), level 3 and level 4.
    Root centroids are kept at least 2 * sigma * (1 - overlap) map cells
    apart; joint_clearance optionally keeps joints of different persons apart.
    """
    seed: int = 0
    min_persons: int = 1
    max_persons: int = 3
    image_height: int = 128
    image_width: int = 128
    skeleton: SkeletonSpec = field(default_factory=default_toy6)
    limb_lengths: Tuple[Tuple[float, float], ...] = ((6.0, 10.0), (8.0, 12.0), (8.0, 12.0))
    overlap: float = 0.0
    render: bool = True
    dim: int = 2
    depth_range: Tuple[float, float] = (2000.0, 6000.0)
    depth_jitter: float = 150.0
    sigma: float = 7.0
    stride: int = 1
    margin: float = 2.0
    joint_clearance: float = 0.0
    max_attempts: int = 200

    def __post_init__(self):
        if not 1 <= self.min_persons <= self.max_persons:
            raise ValueError("need 1 <= min_persons <= max_persons, got {0}..{1}".format(
                self.min_persons, self.max_persons))
        if self.image_height < 8 or self.image_width < 8:
            raise ValueError("image must be at least 8x8")
        if len(self.limb_lengths) != 3 or any(not 0 < lo <= hi for lo, hi in self.limb_lengths):
            raise ValueError("limb_lengths must hold three (min, max) ranges with 0 < min <= max")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must be in [0, 1], got {0}".format(self.overlap))
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.dim != self.skeleton.dim:
            raise ValueError("skeleton '{0}' is {1}D, config dim is {2}".format(
                self.skeleton.name, self.skeleton.dim, self.dim))
        if not 0 < self.depth_range[0] <= self.depth_range[1]:
            raise ValueError("depth_range must satisfy 0 < min <= max")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        ensure_valid(self.skeleton)

    @property
    def min_root_separation(self):
        """Minimum centroid distance in input pixels."""
        return 2.0 * self.sigma * (1.0 - self.overlap) * self.stride


def _quantize(values):
    return np.round(np.asarray(values) / COORD_QUANTUM) * COORD_QUANTUM


def _sample_person(rng, cfg):
    spec = cfg.skeleton
    lo = cfg.margin
    hi_x = cfg.image_width - 1 - cfg.margin
    hi_y = cfg.image_height - 1 - cfg.margin
    center = np.array([rng.uniform(lo, hi_x), rng.uniform(lo, hi_y)])
    coords = np.zeros((spec.num_joints, cfg.dim))
    center_z = rng.uniform(*cfg.depth_range) if cfg.dim == 3 else 0.0
    lengths = np.zeros(spec.num_joints)
    for j in hierarchy_order(spec):
        level = spec.hierarchy_level[j]
        lmin, lmax = cfg.limb_lengths[level - 2]
        length = rng.uniform(lmin, lmax)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        p = spec.parent[j]
        base = center if p == ROOT else coords[p, :2]
        coords[j, :2] = base + length * np.array([math.cos(angle), math.sin(angle)])
        if cfg.dim == 3:
            base_z = center_z if p == ROOT else coords[p, 2]
            coords[j, 2] = base_z + rng.uniform(-cfg.depth_jitter, cfg.depth_jitter)
        lengths[j] = length
    coords[:, :2] = _quantize(coords[:, :2])
    if cfg.dim == 3:
        coords[:, 2] = np.round(coords[:, 2])
    inside = ((coords[:, 0] >= lo) & (coords[:, 0] <= hi_x)
              & (coords[:, 1] >= lo) & (coords[:, 1] <= hi_y)).all()
    if not inside:
        return None, 0.0
    return Pose.from_coords(coords), 0.6 * float(lengths.mean())


def _compatible(pose, placed, cfg):
    root = centroid_root(pose)[:2]
    for other in placed:
        if np.hypot(*(root - centroid_root(other)[:2])) < cfg.min_root_separation:
            return False
        if cfg.joint_clearance > 0:
            d = pose.coords[:, None, :2] - other.coords[None, :, :2]
            if (np.hypot(d[..., 0], d[..., 1]) < cfg.joint_clearance).any():
                return False
    return True


def generate_scene(cfg, index=0):
    """
    Sample one scene; identical (cfg, index) gives bit-identical output.
    :return: (Scene, uint8 image (H, W, 3) or None when rendering is off)
    """
    rng = scene_stream(cfg.seed, index)
    n = rng.integer(cfg.min_persons, cfg.max_persons)
    persons, refs = [], []
    for i in range(n):
        for _ in range(cfg.max_attempts):
            pose, ref = _sample_person(rng, cfg)
            if pose is not None and _compatible(pose, persons, cfg):
                persons.append(pose)
                refs.append(ref)
                break
        else:
            raise SynthesisError("Scene {0}: could not place person {1} of {2} after {3} attempts".format(
                index, i + 1, n, cfg.max_attempts))
    scene = Scene(image_height=cfg.image_height, image_width=cfg.image_width, persons=tuple(persons),
                  dim=cfg.dim, reference_lengths=tuple(refs), image_id="synth-{0:05d}".format(index))
    image = render_scene(scene, cfg.skeleton, rng) if cfg.render else None
    logger.debug("Generated scene %d with %d persons", index, n)
    return scene, image


def generate_dataset(cfg, count, start=0):
    return [generate_scene(cfg, start + i) for i in range(count)]


def _draw_segment(img, a, b, color, width):
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom, 0.0, 1.0)
    d = np.hypot(xs - (a[0] + t * ab[0]), ys - (a[1] + t * ab[1]))
    cover = np.clip(width / 2.0 + 0.5 - d, 0.0, 1.0)[:, :, None]
    img *= 1.0 - cover
    img += cover * color


def render_scene(scene, spec, rng):
    """
    Anti-aliased limb segments in per-person colors over a noise texture,
    with a bright dot on every joint.
    """
    h, w = scene.image_height, scene.image_width
    img = 0.3 + 0.15 * rng.uniforms(h * w * 3).reshape(h, w, 3)
    for pose in scene.persons:
        color = 0.45 + 0.55 * rng.uniforms(3)
        center = centroid_root(pose)[:2]
        for j in hierarchy_order(spec):
            if not pose.visible[j]:
                continue
            p = spec.parent[j]
            start = center if p == ROOT else pose.coords[p, :2]
            _draw_segment(img, np.asarray(start), pose.coords[j, :2], color, 2.0)
        for j in np.flatnonzero(pose.visible):
            shade = 0.5 + 0.5 * (j + 1) / float(spec.num_joints)
            _draw_segment(img, pose.coords[j, :2], pose.coords[j, :2], np.array([1.0, shade, 1.0 - shade]), 3.0)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def perturb_poses(scene, magnitude, seed=0):
    """Add isotropic Gaussian noise of the given standard deviation to visible joints."""
    if magnitude < 0:
        raise DataError("Noise magnitude must be >= 0, got {0}".format(magnitude))
    if magnitude == 0:
        return scene.with_persons(scene.persons)
    rng = SplitMix64(seed)
    persons = []
    for pose in scene.persons:
        noise = rng.normals(pose.coords.size).reshape(pose.coords.shape)
        persons.append(Pose(coords=pose.coords + magnitude * noise, visible=pose.visible))
    return scene.with_persons(persons)


def ppm_bytes(image):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise DataError("PPM images must be uint8 (H, W, 3)")
    h, w = image.shape[:2]
    return "P6\n{0} {1}\n255\n".format(w, h).encode("ascii") + np.ascontiguousarray(image).tobytes()


def write_ppm(path, image):
    atomic_write_bytes(path, ppm_bytes(image))


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    match = _PPM_HEADER.match(data)
    if match is None:
        raise DataError("{0}: not a binary PPM with maxval 255".format(path))
    w, h = int(match.group(1)), int(match.group(2))
    pixels = data[match.end():]
    if len(pixels) != w * h * 3:
        raise DataError("{0}: expected {1} pixel bytes, got {2}".format(path, w * h * 3, len(pixels)))
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def roundtrip_config(seed=7, image_size=160, max_persons=10, stride=1, sigma=7.0, tau=7.0, mode="vanilla",
                     skeleton=None):
    """
    Synthetic config sized so decoding can recover every person: roots two
    Gaussian widths apart and, for hierarchical maps, joints of different
    persons outside each other's neighborhoods.
    """
    clearance = 0.0
    if mode != "vanilla":
        clearance = 2.0 * (math.sqrt(tau) + 1.0) * stride
    return SynthConfig(seed=seed, min_persons=1, max_persons=max_persons, image_height=image_size,
                       image_width=image_size, skeleton=skeleton or default_toy6(), render=False,
                       dim=(skeleton or default_toy6()).dim, sigma=sigma, stride=stride,
                       joint_clearance=clearance, max_attempts=500)


def perturb_displacement_maps(dstack, relative, seed=0):
    """
    Gaussian noise on every defined displacement vector with standard
    deviation relative * |vector|, mimicking regression error that grows
    with displacement length.
    """
    if relative < 0:
        raise DataError("Relative noise must be >= 0, got {0}".format(relative))
    vectors = dstack.vectors()
    length = np.linalg.norm(vectors, axis=3, keepdims=True)
    noise = SplitMix64(seed).normals(vectors.size).reshape(vectors.shape)
    noisy = np.where(dstack.defined_mask[..., None], vectors + relative * length * noise, vectors)
    return DisplacementMapStack(values=noisy.reshape(dstack.values.shape), contributors=dstack.contributors,
                                dim=dstack.dim, mode=dstack.mode, root_depth=dstack.root_depth)
