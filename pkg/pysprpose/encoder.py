"""
Regression targets: the root confidence map and dense displacement maps.

Map cell (u, v) stands for input point (u * stride, v * stride).  Gaussians
and neighborhoods are evaluated in map-cell units; stored displacement
vectors are in input pixels divided by Z = sqrt(H^2 + W^2) of the input
image.  Depth components (3D) are divided by depth_norm instead and measured
from the anchor's depth.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, ModeMismatchError
from .representation import Scene, anchor_positions, centroid_root, decode_hier, encode_hier, encode_spr

logger = logging.getLogger(__name__)

VANILLA = "vanilla"
HIERARCHICAL = "hierarchical"
_MODE_ALIASES = {"vanilla": VANILLA, "hier": HIERARCHICAL, "hierarchical": HIERARCHICAL}

TAU_SQUARED = "squared"
TAU_RADIUS = "radius"


def canonical_mode(mode):
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ModeMismatchError("Unknown mode '{0}', expected vanilla or hierarchical".format(mode))


@dataclass(frozen=True)
class EncoderConfig:
    """
    Target construction parameters.

    tau_mode 'squared' bounds the squared cell distance by tau, 'radius'
    bounds the distance itself.  image_height/image_width give the input
    size used for Z on both the encode and decode side; when unset they
    default to the map size times stride.  Encoding a scene of another size
    is a DataError.
    """
    map_height: int
    map_width: int
    sigma: float = 7.0
    tau: float = 7.0
    stride: int = 1
    tau_mode: str = TAU_SQUARED
    depth_norm: float = 10000.0
    image_height: Optional[int] = None
    image_width: Optional[int] = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive, got {0}".format(self.sigma))
        if not self.tau >= 0:
            raise ValueError("tau must be non-negative, got {0}".format(self.tau))
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError("stride must be an integer >= 1, got {0}".format(self.stride))
        if self.map_height < 1 or self.map_width < 1:
            raise ValueError("map dimensions must be >= 1, got {0}x{1}".format(self.map_height, self.map_width))
        if self.tau_mode not in (TAU_SQUARED, TAU_RADIUS):
            raise ValueError("tau_mode must be 'squared' or 'radius', got '{0}'".format(self.tau_mode))
        if not self.depth_norm > 0:
            raise ValueError("depth_norm must be positive")

    @classmethod
    def for_image(cls, image_height, image_width, stride=1, **kwargs):
        map_h = (int(image_height) + stride - 1) // stride
        map_w = (int(image_width) + stride - 1) // stride
        return cls(map_height=map_h, map_width=map_w, stride=stride,
                   image_height=int(image_height), image_width=int(image_width), **kwargs)

    @property
    def input_size(self):
        h = self.image_height if self.image_height is not None else self.map_height * self.stride
        w = self.image_width if self.image_width is not None else self.map_width * self.stride
        return h, w

    @property
    def normalizer(self):
        return normalization_factor(*self.input_size)

    def replace(self, **changes):
        doc = dict(self.__dict__)
        doc.update(changes)
        return EncoderConfig(**doc)


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DataError("ConfidenceMap must be 2-dimensional, got shape {0}".format(values.shape))
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class DisplacementMapStack:
    """
    values       (H, W, d*K) normalized components, channel j*d + c
    contributors (H, W, K) number of persons that wrote each cell (M^j)
    root_depth   (H, W) root depth / depth_norm, 3D only
    """
    values: np.ndarray
    contributors: np.ndarray
    dim: int
    mode: str = VANILLA
    root_depth: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values)
        contributors = np.asarray(self.contributors)
        if values.ndim != 3 or contributors.ndim != 3:
            raise DataError("DisplacementMapStack arrays must be 3-dimensional")
        if values.shape[:2] != contributors.shape[:2] or values.shape[2] != contributors.shape[2] * self.dim:
            raise DataError("values shape {0} does not match contributors {1} with dim {2}".format(
                values.shape, contributors.shape, self.dim))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "contributors", contributors)
        object.__setattr__(self, "mode", canonical_mode(self.mode))

    @classmethod
    def dense(cls, values, dim, mode=VANILLA, root_depth=None):
        """A stack defined everywhere, as produced by a regressor."""
        values = np.asarray(values)
        k = values.shape[2] // dim
        return cls(values=values, contributors=np.ones(values.shape[:2] + (k,), dtype=np.int32),
                   dim=dim, mode=mode, root_depth=root_depth)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def num_joints(self):
        return self.contributors.shape[2]

    @property
    def defined_mask(self):
        return self.contributors > 0

    def vectors(self):
        return self.values.reshape(self.height, self.width, self.num_joints, self.dim)

    def component_mask(self):
        """defined_mask repeated over the d components of each joint."""
        return np.repeat(self.defined_mask, self.dim, axis=2)

    def overlap_fraction(self):
        """Fraction of all joint-channel cells written by more than one person."""
        return float((self.contributors > 1).sum()) / self.contributors.size

    def defined_overlap_fraction(self):
        defined = int(self.defined_mask.sum())
        return float((self.contributors > 1).sum()) / defined if defined else 0.0

    def to_tensor(self):
        parts = [self.values, self.contributors.astype(self.values.dtype)]
        if self.root_depth is not None:
            parts.append(self.root_depth[:, :, None].astype(self.values.dtype))
        return np.concatenate(parts, axis=2)

    @classmethod
    def from_tensor(cls, tensor, dim, num_joints, mode):
        tensor = np.asarray(tensor, dtype=np.float64)
        expected = num_joints * dim + num_joints + (1 if dim == 3 else 0)
        if tensor.ndim != 3 or tensor.shape[2] != expected:
            raise DataError("Displacement tensor has shape {0}, expected (H, W, {1})".format(
                tensor.shape, expected))
        split = num_joints * dim
        root_depth = tensor[:, :, -1] if dim == 3 else None
        return cls(values=tensor[:, :, :split],
                   contributors=np.rint(tensor[:, :, split:split + num_joints]).astype(np.int32),
                   dim=dim, mode=mode, root_depth=root_depth)


def normalization_factor(image_height, image_width):
    """
    Z = sqrt(H^2 + W^2) of the input image in pixels.
    """
    if image_height <= 0 or image_width <= 0:
        raise ValueError("Image dimensions must be positive, got {0}x{1}".format(image_height, image_width))
    return math.sqrt(float(image_height) ** 2 + float(image_width) ** 2)


def nearest_cell(point_xy, cfg):
    """Row and column of the map cell nearest an input-pixel point, clamped."""
    col = int(math.floor(point_xy[0] / cfg.stride + 0.5))
    row = int(math.floor(point_xy[1] / cfg.stride + 0.5))
    return min(max(row, 0), cfg.map_height - 1), min(max(col, 0), cfg.map_width - 1)


def _cell_grid(cfg):
    rows = np.arange(cfg.map_height, dtype=np.float64)
    cols = np.arange(cfg.map_width, dtype=np.float64)
    return rows[:, None], cols[None, :]


def neighborhood(anchor_xy, cfg):
    """
    Cells within tau of an anchor (input pixels), plus the anchor's own
    nearest cell when it lies on the map.
    """
    rows, cols = _cell_grid(cfg)
    ax = anchor_xy[0] / cfg.stride
    ay = anchor_xy[1] / cfg.stride
    d2 = (cols - ax) ** 2 + (rows - ay) ** 2
    bound = cfg.tau if cfg.tau_mode == TAU_SQUARED else cfg.tau * cfg.tau
    mask = d2 <= bound
    col = int(math.floor(ax + 0.5))
    row = int(math.floor(ay + 0.5))
    if 0 <= row < cfg.map_height and 0 <= col < cfg.map_width:
        mask[row, col] = True
    return mask


def encode_root_confidence(scene, roots, cfg):
    """
    Max-aggregated Gaussian peaks exp(-d^2 / sigma^2), d in map cells.
    Only the planar components of the roots are used.
    """
    if len(roots) != scene.num_persons:
        raise DataError("Expected {0} roots, got {1}".format(scene.num_persons, len(roots)))
    values = np.zeros((cfg.map_height, cfg.map_width), dtype=np.float64)
    rows, cols = _cell_grid(cfg)
    sigma2 = cfg.sigma * cfg.sigma
    for root in roots:
        d2 = (cols - root[0] / cfg.stride) ** 2 + (rows - root[1] / cfg.stride) ** 2
        np.maximum(values, np.exp(-d2 / sigma2), out=values)
    return ConfidenceMap(values=values)


def _accumulate_person(acc, count, anchors, joints, present, cfg, z_norm):
    h, w = cfg.map_height, cfg.map_width
    rows, cols = _cell_grid(cfg)
    cell_x = cols * cfg.stride
    cell_y = rows * cfg.stride
    dim = joints.shape[1]
    for j in np.flatnonzero(present):
        nb = neighborhood(anchors[j], cfg)
        if not nb.any():
            continue
        vec = np.empty((h, w, dim), dtype=np.float64)
        vec[:, :, 0] = (joints[j, 0] - cell_x) / z_norm
        vec[:, :, 1] = (joints[j, 1] - cell_y) / z_norm
        if dim == 3:
            vec[:, :, 2] = (joints[j, 2] - anchors[j, 2]) / cfg.depth_norm
        acc[nb, j, :] += vec[nb]
        count[nb, j] += 1


def _accumulate_depth(depth_acc, depth_count, root, cfg):
    nb = neighborhood(root, cfg)
    depth_acc[nb] += root[2] / cfg.depth_norm
    depth_count[nb] += 1


def _finish(acc, count, dim, mode, depth_acc=None, depth_count=None):
    h, w, k = count.shape
    values = acc / np.maximum(count, 1)[:, :, :, None]
    root_depth = None
    if depth_acc is not None:
        root_depth = depth_acc / np.maximum(depth_count, 1)
    return DisplacementMapStack(values=values.reshape(h, w, k * dim), contributors=count,
                                dim=dim, mode=mode, root_depth=root_depth)


def _buffers(cfg, k, dim):
    acc = np.zeros((cfg.map_height, cfg.map_width, k, dim), dtype=np.float64)
    count = np.zeros((cfg.map_height, cfg.map_width, k), dtype=np.int32)
    return acc, count


def _shared_normalizer(scene, cfg):
    # the decoder only sees cfg, so Z must come from cfg on both sides
    if cfg.input_size != (scene.image_height, scene.image_width):
        raise DataError("Scene '{0}' is {1}x{2} but the encoder config describes a {3}x{4} input; "
                        "build it with EncoderConfig.for_image".format(
                            scene.image_id, scene.image_height, scene.image_width, *cfg.input_size))
    return cfg.normalizer


def _num_joints(scene, reps, attr):
    if reps:
        return getattr(reps[0], attr).shape[0]
    if scene.persons:
        return scene.persons[0].num_joints
    return 0


def encode_displacements(scene, structured, cfg, num_joints=None):
    """
    Dense displacement maps anchored at each person's root.
    :param scene: Scene, its size must match cfg.input_size
    :param structured: list of StructuredPose, one per person
    :param cfg: EncoderConfig
    :return: DisplacementMapStack in vanilla mode
    """
    if len(structured) != scene.num_persons:
        raise DataError("Expected {0} structured poses, got {1}".format(scene.num_persons, len(structured)))
    k = num_joints if num_joints is not None else _num_joints(scene, structured, "displacements")
    dim = scene.dim
    z_norm = _shared_normalizer(scene, cfg)
    acc, count = _buffers(cfg, k, dim)
    depth_acc = depth_count = None
    if dim == 3:
        depth_acc = np.zeros((cfg.map_height, cfg.map_width))
        depth_count = np.zeros((cfg.map_height, cfg.map_width), dtype=np.int32)
    for sp in structured:
        anchors = np.broadcast_to(sp.root, sp.displacements.shape)
        joints = sp.root + sp.displacements
        _accumulate_person(acc, count, anchors, joints, sp.present, cfg, z_norm)
        if dim == 3:
            _accumulate_depth(depth_acc, depth_count, sp.root, cfg)
    return _finish(acc, count, dim, VANILLA, depth_acc, depth_count)


def encode_hier_displacements(scene, hier, cfg, num_joints=None):
    """
    Dense displacement maps where each joint channel is anchored at that
    joint's adjacent-hierarchy parent (the root for level 2 joints).
    """
    if len(hier) != scene.num_persons:
        raise DataError("Expected {0} hierarchical poses, got {1}".format(scene.num_persons, len(hier)))
    k = num_joints if num_joints is not None else _num_joints(scene, hier, "hier_displacements")
    dim = scene.dim
    z_norm = _shared_normalizer(scene, cfg)
    acc, count = _buffers(cfg, k, dim)
    depth_acc = depth_count = None
    if dim == 3:
        depth_acc = np.zeros((cfg.map_height, cfg.map_width))
        depth_count = np.zeros((cfg.map_height, cfg.map_width), dtype=np.int32)
    for hp in hier:
        anchors = anchor_positions(hp)
        joints = decode_hier(hp).coords
        _accumulate_person(acc, count, anchors, joints, hp.present, cfg, z_norm)
        if dim == 3:
            _accumulate_depth(depth_acc, depth_count, hp.root, cfg)
    return _finish(acc, count, dim, HIERARCHICAL, depth_acc, depth_count)


def encode_scene(scene, spec, mode, cfg):
    """
    Build all regression targets of a scene.
    :return: (ConfidenceMap, DisplacementMapStack, roots)
    """
    mode = canonical_mode(mode)
    if spec.dim != scene.dim:
        raise DataError("Skeleton '{0}' is {1}D, scene is {2}D".format(spec.name, spec.dim, scene.dim))
    kept, roots = [], []
    for i, pose in enumerate(scene.persons):
        if pose.num_joints != spec.num_joints:
            raise DataError("Person {0} has {1} joints, skeleton '{2}' has {3}".format(
                i, pose.num_joints, spec.name, spec.num_joints))
        if not pose.visible.any():
            logger.warning("Skipping person %d of image '%s': no visible joints", i, scene.image_id)
            continue
        kept.append(pose)
        roots.append(centroid_root(pose))
    if len(kept) != scene.num_persons:
        scene = Scene(image_height=scene.image_height, image_width=scene.image_width, persons=kept,
                      dim=scene.dim, image_id=scene.image_id)
    cmap = encode_root_confidence(scene, roots, cfg)
    if mode == VANILLA:
        reps = [encode_spr(p, r) for p, r in zip(kept, roots)]
        dstack = encode_displacements(scene, reps, cfg, num_joints=spec.num_joints)
    else:
        reps = [encode_hier(p, r, spec) for p, r in zip(kept, roots)]
        dstack = encode_hier_displacements(scene, reps, cfg, num_joints=spec.num_joints)
    logger.debug("Encoded image '%s': %d persons, mode %s", scene.image_id, len(kept), mode)
    return cmap, dstack, roots


def tau_sweep_encodings(scene, spec, mode, cfg, taus):
    """Encode one scene once per tau value; returns a list of (tau, maps)."""
    return [(tau, encode_scene(scene, spec, mode, cfg.replace(tau=float(tau)))) for tau in taus]
