"""
Pose representations and the exact conversions between them.

Pose                 absolute joint coordinates with visibility flags
StructuredPose       root position plus per-joint displacements from the root
HierStructuredPose   root position plus displacements from each joint's
                     adjacent-hierarchy parent, accumulated along the
                     articulated path

Arrays are stored read-only; every operation returns new objects.  Invisible
joints carry zeros and a false flag and never take part in arithmetic.
Representations never clamp to the image: crops may put joints outside it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import DataError
from .skeleton import ROOT, SkeletonSpec, articulated_path


def _frozen(values, dtype=np.float64):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pose:
    coords: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] not in (2, 3):
            raise DataError("Pose coords must have shape (K, 2) or (K, 3), got {0}".format(coords.shape))
        visible = np.asarray(self.visible, dtype=bool)
        if visible.shape != (coords.shape[0],):
            raise DataError("Pose visibility must have shape ({0},), got {1}".format(
                coords.shape[0], visible.shape))
        coords = np.where(visible[:, None], coords, 0.0)
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "visible", _frozen(visible, dtype=bool))

    @classmethod
    def from_coords(cls, coords, visible=None):
        coords = np.asarray(coords, dtype=np.float64)
        if visible is None:
            visible = np.ones(coords.shape[0], dtype=bool)
        return cls(coords=coords, visible=visible)

    @property
    def dim(self):
        return self.coords.shape[1]

    @property
    def num_joints(self):
        return self.coords.shape[0]

    def translated(self, t):
        t = np.asarray(t, dtype=np.float64)
        return Pose(coords=self.coords + t, visible=self.visible)

    def same_as(self, other):
        return (self.coords.shape == other.coords.shape
                and np.array_equal(self.visible, other.visible)
                and np.array_equal(self.coords, other.coords))


@dataclass(frozen=True, eq=False)
class StructuredPose:
    root: np.ndarray
    displacements: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        present = np.asarray(self.present, dtype=bool)
        disp = np.where(present[:, None], np.asarray(self.displacements, dtype=np.float64), 0.0)
        object.__setattr__(self, "root", _frozen(self.root))
        object.__setattr__(self, "displacements", _frozen(disp))
        object.__setattr__(self, "present", _frozen(present, dtype=bool))

    @property
    def dim(self):
        return self.root.shape[0]

    @property
    def num_joints(self):
        return self.displacements.shape[0]

    def same_as(self, other):
        return (np.array_equal(self.root, other.root)
                and np.array_equal(self.present, other.present)
                and np.array_equal(self.displacements, other.displacements))


@dataclass(frozen=True, eq=False)
class HierStructuredPose:
    root: np.ndarray
    hier_displacements: np.ndarray
    present: np.ndarray
    skeleton: SkeletonSpec

    def __post_init__(self):
        present = np.asarray(self.present, dtype=bool)
        disp = np.where(present[:, None], np.asarray(self.hier_displacements, dtype=np.float64), 0.0)
        object.__setattr__(self, "root", _frozen(self.root))
        object.__setattr__(self, "hier_displacements", _frozen(disp))
        object.__setattr__(self, "present", _frozen(present, dtype=bool))

    @property
    def dim(self):
        return self.root.shape[0]

    @property
    def num_joints(self):
        return self.hier_displacements.shape[0]


@dataclass(frozen=True, eq=False)
class Scene:
    """
    Ground truth of one image.  reference_lengths optionally records, per
    person, the PCKh reference length for skeletons without a head segment.
    """
    image_height: int
    image_width: int
    persons: Tuple[Pose, ...] = ()
    dim: int = 2
    reference_lengths: Optional[Tuple[float, ...]] = None
    image_id: str = field(default="")

    def __post_init__(self):
        persons = tuple(self.persons)
        object.__setattr__(self, "persons", persons)
        if self.image_height < 0 or self.image_width < 0:
            raise DataError("Scene dimensions must be non-negative")
        if persons:
            k = persons[0].num_joints
            for i, p in enumerate(persons):
                if p.dim != self.dim:
                    raise DataError("Person {0} has dim {1}, scene dim is {2}".format(i, p.dim, self.dim))
                if p.num_joints != k:
                    raise DataError("Person {0} has {1} joints, expected {2}".format(i, p.num_joints, k))
        if self.reference_lengths is not None:
            refs = tuple(float(v) for v in self.reference_lengths)
            if len(refs) != len(persons):
                raise DataError("reference_lengths must have one entry per person")
            object.__setattr__(self, "reference_lengths", refs)

    @property
    def num_persons(self):
        return len(self.persons)

    def with_persons(self, persons):
        return Scene(image_height=self.image_height, image_width=self.image_width,
                     persons=tuple(persons), dim=self.dim,
                     reference_lengths=self.reference_lengths, image_id=self.image_id)


def centroid_root(pose):
    """
    Person centroid over visible joints.
    :param pose: Pose
    :return: root coordinates, shape (d,)
    """
    if not pose.visible.any():
        raise DataError("Cannot compute a centroid root: pose has no visible joints")
    return pose.coords[pose.visible].mean(axis=0)


def encode_spr(pose, root):
    root = np.asarray(root, dtype=np.float64)
    _check_dim(root, pose.dim)
    return StructuredPose(root=root, displacements=pose.coords - root, present=pose.visible)


def decode_spr(sp):
    return Pose(coords=sp.root + sp.displacements, visible=sp.present)


def _parent_mask(spec, visible):
    """A joint keeps its hierarchical entry only if its whole path is visible."""
    mask = np.zeros(spec.num_joints, dtype=bool)
    for j in range(spec.num_joints):
        mask[j] = all(visible[a] for a in articulated_path(spec, j).ordered_joints)
    return mask


def _parent_index(spec):
    return np.array(spec.parent, dtype=np.int64)


def encode_hier(pose, root, spec):
    root = np.asarray(root, dtype=np.float64)
    _check_dim(root, pose.dim)
    _check_k(spec, pose.num_joints)
    parents = _parent_index(spec)
    anchor = np.where((parents == ROOT)[:, None], root, pose.coords[np.maximum(parents, 0)])
    return HierStructuredPose(root=root, hier_displacements=pose.coords - anchor,
                              present=_parent_mask(spec, pose.visible), skeleton=spec)


def decode_hier(hp):
    """
    Accumulate hierarchical displacements along every articulated path.
    :param hp: HierStructuredPose
    :return: Pose
    """
    spec = hp.skeleton
    coords = np.zeros_like(hp.hier_displacements)
    for j in range(spec.num_joints):
        if not hp.present[j]:
            continue
        total = hp.root.copy()
        for a in articulated_path(spec, j).ordered_joints:
            if not hp.present[a]:
                raise DataError("Joint '{0}' is present but its ancestor '{1}' is missing".format(
                    spec.joint_names[j], spec.joint_names[a]))
            total = total + hp.hier_displacements[a]
        coords[j] = total
    return Pose(coords=coords, visible=hp.present)


def spr_to_hier(sp, spec):
    _check_k(spec, sp.num_joints)
    parents = _parent_index(spec)
    parent_disp = np.where((parents == ROOT)[:, None], 0.0, sp.displacements[np.maximum(parents, 0)])
    return HierStructuredPose(root=sp.root, hier_displacements=sp.displacements - parent_disp,
                              present=_parent_mask(spec, sp.present), skeleton=spec)


def hier_to_spr(hp):
    """
    Sum hierarchical displacements along each articulated path.
    :raises DataError: a joint is present while one of its ancestors is not
    """
    spec = hp.skeleton
    disp = np.zeros_like(hp.hier_displacements)
    for j in range(spec.num_joints):
        if not hp.present[j]:
            continue
        acc = None
        for a in articulated_path(spec, j).ordered_joints:
            if not hp.present[a]:
                raise DataError("Joint '{0}' is present but its ancestor '{1}' is missing".format(
                    spec.joint_names[j], spec.joint_names[a]))
            acc = hp.hier_displacements[a] if acc is None else acc + hp.hier_displacements[a]
        disp[j] = acc
    return StructuredPose(root=hp.root, displacements=disp, present=hp.present)


def anchor_positions(hp):
    """
    Absolute position of each joint's anchor: the root for level 2 joints,
    the parent joint otherwise.  Rows of absent joints are zero.
    """
    pose = decode_hier(hp)
    parents = _parent_index(hp.skeleton)
    anchors = np.where((parents == ROOT)[:, None], hp.root, pose.coords[np.maximum(parents, 0)])
    return np.where(hp.present[:, None], anchors, 0.0)


def _check_dim(root, dim):
    if root.shape != (dim,):
        raise DataError("Root must have {0} components, got shape {1}".format(dim, root.shape))


def _check_k(spec, k):
    if spec.num_joints != k:
        raise DataError("Skeleton '{0}' has {1} joints, pose has {2}".format(spec.name, spec.num_joints, k))
