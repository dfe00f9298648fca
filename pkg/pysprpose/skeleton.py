"""
Joint taxonomies, the four-hierarchy division and articulated paths.

Level 1 is reserved for the root joint (the person centroid).  Every body
joint sits in level 2, 3 or 4 and points at a parent one level up, or at
ROOT when it is a level 2 joint.  Following the parent links from any joint
therefore reaches ROOT in at most three steps.
"""
from __future__ import annotations

import operator
from dataclasses import dataclass
from typing import Optional, Tuple

from .errors import SkeletonError


ROOT = -1
MIN_LEVEL = 2
MAX_LEVEL = 4

_SPEC_FIELDS = frozenset(["name", "dim", "joints", "head_segment"])
_JOINT_FIELDS = frozenset(["name", "level", "parent"])


@dataclass(frozen=True)
class SkeletonSpec:
    """
    Joint taxonomy of a skeleton.

    parent[j] is ROOT or the index of the adjacent-hierarchy parent joint.
    head_segment optionally names the (head top, upper neck) joint indices
    used by PCKh to derive the head size.
    """
    name: str
    dim: int
    joint_names: Tuple[str, ...]
    hierarchy_level: Tuple[int, ...]
    parent: Tuple[int, ...]
    head_segment: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "hierarchy_level", tuple(int(v) for v in self.hierarchy_level))
        object.__setattr__(self, "parent", tuple(int(v) for v in self.parent))
        if self.head_segment is not None:
            object.__setattr__(self, "head_segment", tuple(int(v) for v in self.head_segment))

    @property
    def num_joints(self):
        return len(self.joint_names)

    def index(self, joint_name):
        try:
            return self.joint_names.index(joint_name)
        except ValueError:
            raise SkeletonError("Unknown joint '{0}' for skeleton '{1}'".format(joint_name, self.name))

    def children(self, j):
        return [k for k, p in enumerate(self.parent) if p == j]


@dataclass(frozen=True)
class ArticulatedPath:
    joint_index: int
    ordered_joints: Tuple[int, ...]


def validate(spec):
    """
    Check every structural invariant of a skeleton.
    :param spec: SkeletonSpec
    :return: list of violation messages, empty when the spec is valid
    """
    report = []
    k = len(spec.joint_names)
    if k < 1:
        report.append("empty: skeleton has no joints")
    if spec.dim not in (2, 3):
        report.append("dim: expected 2 or 3, got {0}".format(spec.dim))
    if len(set(spec.joint_names)) != k:
        seen = set()
        dupes = sorted(n for n in spec.joint_names if n in seen or seen.add(n))
        report.append("duplicate: joint names {0} are not unique".format(dupes))
    if len(spec.hierarchy_level) != k or len(spec.parent) != k:
        report.append("length: joint_names, hierarchy_level and parent must all have {0} entries".format(k))
        return report

    for j in range(k):
        name = spec.joint_names[j]
        level = spec.hierarchy_level[j]
        p = spec.parent[j]
        if level < MIN_LEVEL or level > MAX_LEVEL:
            report.append("level range: joint '{0}' has level {1}, expected 2..4".format(name, level))
        if p == ROOT:
            if level != MIN_LEVEL:
                report.append("level gap: joint '{0}' is attached to ROOT but has level {1}".format(name, level))
            continue
        if p == j:
            report.append("cycle: joint '{0}' is its own parent".format(name))
            continue
        if p < 0 or p >= k:
            report.append("parent range: joint '{0}' has parent index {1}".format(name, p))
            continue
        if level != spec.hierarchy_level[p] + 1:
            report.append("level gap: joint '{0}' (level {1}) has parent '{2}' (level {3})".format(
                name, level, spec.joint_names[p], spec.hierarchy_level[p]))

    for j in range(k):
        steps, cur, visited = 0, j, set()
        while cur != ROOT and 0 <= cur < k:
            if cur in visited:
                report.append("cycle: parent links from joint '{0}' never reach ROOT".format(spec.joint_names[j]))
                break
            visited.add(cur)
            cur = spec.parent[cur]
            steps += 1
        else:
            if steps > MAX_LEVEL - 1:
                report.append("depth: joint '{0}' is {1} links from ROOT, at most 3 allowed".format(
                    spec.joint_names[j], steps))

    if spec.head_segment is not None:
        if len(spec.head_segment) != 2 or any(i < 0 or i >= k for i in spec.head_segment):
            report.append("head segment: indices {0} out of range".format(spec.head_segment))
    return _dedupe(report)


def _dedupe(report):
    out = []
    for line in report:
        if line not in out:
            out.append(line)
    return out


def ensure_valid(spec):
    report = validate(spec)
    if report:
        raise SkeletonError("Invalid skeleton '{0}': {1}".format(spec.name, "; ".join(report)))
    return spec


def articulated_path(spec, j):
    """
    Joints from the first post-root joint down to joint j.
    :param spec: valid SkeletonSpec
    :param j: joint index
    :return: ArticulatedPath
    """
    try:
        j = operator.index(j)
    except TypeError:
        raise SkeletonError("Invalid joint index {0!r}".format(j))
    if j < 0 or j >= spec.num_joints:
        raise SkeletonError("Invalid joint index {0} for skeleton '{1}' with {2} joints".format(
            j, spec.name, spec.num_joints))
    chain = []
    cur = j
    while cur != ROOT:
        chain.append(cur)
        if len(chain) > MAX_LEVEL - 1:
            raise SkeletonError("Joint '{0}' is deeper than three links".format(spec.joint_names[j]))
        cur = spec.parent[cur]
    return ArticulatedPath(joint_index=j, ordered_joints=tuple(reversed(chain)))


def articulated_paths(spec):
    return [articulated_path(spec, j) for j in range(spec.num_joints)]


def hierarchy_order(spec):
    """Joint indices sorted by hierarchy level, parents before children."""
    return sorted(range(spec.num_joints), key=lambda j: (spec.hierarchy_level[j], j))


def _build(name, dim, joints, head_segment=None):
    names = [n for n, _, _ in joints]
    levels = [lvl for _, lvl, _ in joints]
    parents = [ROOT if p is None else names.index(p) for _, _, p in joints]
    head = None
    if head_segment is not None:
        head = (names.index(head_segment[0]), names.index(head_segment[1]))
    return SkeletonSpec(name=name, dim=dim, joint_names=tuple(names),
                        hierarchy_level=tuple(levels), parent=tuple(parents), head_segment=head)


def default_mpii16():
    """
    The 16-joint MPII skeleton in MPII annotation order.

    Torso joints (thorax, pelvis, shoulders, hips) form level 2, upper neck,
    head top, elbows and knees level 3, wrists and ankles level 4.
    """
    return _build("mpii16", 2, [
        ("r_ankle", 4, "r_knee"),
        ("r_knee", 3, "r_hip"),
        ("r_hip", 2, None),
        ("l_hip", 2, None),
        ("l_knee", 3, "l_hip"),
        ("l_ankle", 4, "l_knee"),
        ("pelvis", 2, None),
        ("thorax", 2, None),
        ("upper_neck", 3, "thorax"),
        ("head_top", 3, "thorax"),
        ("r_wrist", 4, "r_elbow"),
        ("r_elbow", 3, "r_shoulder"),
        ("r_shoulder", 2, None),
        ("l_shoulder", 2, None),
        ("l_elbow", 3, "l_shoulder"),
        ("l_wrist", 4, "l_elbow"),
    ], head_segment=("head_top", "upper_neck"))


def default_coco17():
    # COCO has no neck joint; the nose stands in as the level 2 head anchor.
    return _build("coco17", 2, [
        ("nose", 2, None),
        ("l_eye", 3, "nose"),
        ("r_eye", 3, "nose"),
        ("l_ear", 3, "nose"),
        ("r_ear", 3, "nose"),
        ("l_shoulder", 2, None),
        ("r_shoulder", 2, None),
        ("l_elbow", 3, "l_shoulder"),
        ("r_elbow", 3, "r_shoulder"),
        ("l_wrist", 4, "l_elbow"),
        ("r_wrist", 4, "r_elbow"),
        ("l_hip", 2, None),
        ("r_hip", 2, None),
        ("l_knee", 3, "l_hip"),
        ("r_knee", 3, "r_hip"),
        ("l_ankle", 4, "l_knee"),
        ("r_ankle", 4, "r_knee"),
    ])


def default_panoptic15_3d():
    return _build("panoptic15-3d", 3, [
        ("neck", 2, None),
        ("nose", 3, "neck"),
        ("pelvis", 2, None),
        ("l_shoulder", 2, None),
        ("l_elbow", 3, "l_shoulder"),
        ("l_wrist", 4, "l_elbow"),
        ("l_hip", 2, None),
        ("l_knee", 3, "l_hip"),
        ("l_ankle", 4, "l_knee"),
        ("r_shoulder", 2, None),
        ("r_elbow", 3, "r_shoulder"),
        ("r_wrist", 4, "r_elbow"),
        ("r_hip", 2, None),
        ("r_knee", 3, "r_hip"),
        ("r_ankle", 4, "r_knee"),
    ])


def default_toy6():
    """Six-joint upper-body skeleton used by the toy trainer."""
    return _build("toy6", 2, [
        ("neck", 2, None),
        ("head_top", 3, "neck"),
        ("l_shoulder", 2, None),
        ("l_elbow", 3, "l_shoulder"),
        ("r_shoulder", 2, None),
        ("r_elbow", 3, "r_shoulder"),
    ], head_segment=("head_top", "neck"))


PRESETS = {
    "mpii16": default_mpii16,
    "coco17": default_coco17,
    "panoptic15-3d": default_panoptic15_3d,
    "toy6": default_toy6,
}


def preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise SkeletonError("Unknown skeleton preset '{0}', expected one of {1}".format(
            name, sorted(PRESETS)))


def to_dict(spec):
    joints = []
    for j, name in enumerate(spec.joint_names):
        p = spec.parent[j]
        joints.append({
            "name": name,
            "level": spec.hierarchy_level[j],
            "parent": None if p == ROOT else spec.joint_names[p],
        })
    doc = {"name": spec.name, "dim": spec.dim, "joints": joints}
    if spec.head_segment is not None:
        doc["head_segment"] = [spec.joint_names[i] for i in spec.head_segment]
    return doc


def from_dict(doc):
    """
    Build a SkeletonSpec from its JSON document.  Unknown fields are
    rejected so typos surface instead of being ignored.
    """
    if not isinstance(doc, dict):
        raise SkeletonError("skeleton: expected an object, got {0}".format(type(doc).__name__))
    unknown = set(doc) - _SPEC_FIELDS
    if unknown:
        raise SkeletonError("skeleton: unknown fields {0}".format(sorted(unknown)))
    for key in ("name", "dim", "joints"):
        if key not in doc:
            raise SkeletonError("skeleton: missing field '{0}'".format(key))
    joints = doc["joints"]
    if not isinstance(joints, list):
        raise SkeletonError("skeleton.joints: expected a list")
    names = []
    for i, jdoc in enumerate(joints):
        if not isinstance(jdoc, dict):
            raise SkeletonError("skeleton.joints[{0}]: expected an object".format(i))
        unknown = set(jdoc) - _JOINT_FIELDS
        if unknown:
            raise SkeletonError("skeleton.joints[{0}]: unknown fields {1}".format(i, sorted(unknown)))
        if "name" not in jdoc or "level" not in jdoc:
            raise SkeletonError("skeleton.joints[{0}]: 'name' and 'level' are required".format(i))
        names.append(jdoc["name"])
    levels, parents = [], []
    for i, jdoc in enumerate(joints):
        p = jdoc.get("parent")
        if p is None:
            parents.append(ROOT)
        elif p in names:
            parents.append(names.index(p))
        else:
            raise SkeletonError("skeleton.joints[{0}]: unknown parent '{1}'".format(i, p))
        levels.append(int(jdoc["level"]))
    head = None
    if doc.get("head_segment") is not None:
        seg = doc["head_segment"]
        if len(seg) != 2 or any(s not in names for s in seg):
            raise SkeletonError("skeleton.head_segment: expected two known joint names")
        head = (names.index(seg[0]), names.index(seg[1]))
    spec = SkeletonSpec(name=str(doc["name"]), dim=int(doc["dim"]), joint_names=tuple(names),
                        hierarchy_level=tuple(levels), parent=tuple(parents), head_segment=head)
    return ensure_valid(spec)


def resolve(ref):
    """Accept a preset name, a JSON document or a SkeletonSpec."""
    if isinstance(ref, SkeletonSpec):
        return ensure_valid(ref)
    if isinstance(ref, str):
        return preset(ref)
    return from_dict(ref)


def describe(spec):
    """Mapping from joint name to its articulated path expressed in names."""
    paths = {}
    for path in articulated_paths(spec):
        paths[spec.joint_names[path.joint_index]] = [spec.joint_names[i] for i in path.ordered_joints]
    return paths
