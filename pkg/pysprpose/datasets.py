"""
JSON pose dataset files.

    {
      "version": 1,
      "skeleton": "mpii16" | {inline skeleton},
      "dim": 2,
      "images": [
        {"id": "img0", "width": 64, "height": 64,
         "persons": [
           {"joints": [{"name": "neck", "x": 1.0, "y": 2.0, "visible": true}, ...],
            "root": [x, y], "score": 0.9, "reference_length": 6.0}
         ]}
      ]
    }

Joints absent from a person's list are invisible.  root, score and
reference_length are optional; predictions carry score.  The structure is
checked against schemas/pose_dataset.json; joint names, the dimension and
root lengths are checked against the skeleton here.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Any, List, Optional

import numpy as np

from .errors import DatasetFormatError, SkeletonError, StorageError
from .representation import Pose, Scene
from .schemas import check_document
from .skeleton import SkeletonSpec, resolve, to_dict
from .tensorio import atomic_write_text

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class PoseDataset:
    skeleton: SkeletonSpec
    scenes: List[Scene]
    scores: Optional[List[List[float]]] = None
    roots: Optional[List[List[Optional[np.ndarray]]]] = None
    skeleton_ref: Any = None

    @property
    def dim(self):
        return self.skeleton.dim

    def poses(self):
        return [list(s.persons) for s in self.scenes]

    def reference_lengths(self):
        return [list(s.reference_lengths) if s.reference_lengths is not None else None for s in self.scenes]


def _fail(where, message):
    raise DatasetFormatError("{0}: {1}".format(where, message))


def _parse_person(pdoc, spec, dim, where):
    coords = np.zeros((spec.num_joints, dim))
    visible = np.zeros(spec.num_joints, dtype=bool)
    seen = set()
    axes = ("x", "y", "z")[:dim]
    for i, jdoc in enumerate(pdoc["joints"]):
        jw = "{0}.joints[{1}]".format(where, i)
        name = jdoc["name"]
        try:
            j = spec.index(name)
        except SkeletonError:
            _fail(jw, "joint '{0}' is not in skeleton '{1}'".format(name, spec.name))
        if j in seen:
            _fail(jw, "duplicate joint '{0}'".format(name))
        seen.add(j)
        if dim == 3 and "z" not in jdoc:
            _fail(jw, "'z' is a required property in a 3D dataset")
        coords[j] = [float(jdoc[a]) for a in axes]
        visible[j] = jdoc.get("visible", True)
    root = pdoc.get("root")
    if root is not None:
        if len(root) != dim:
            _fail(where + ".root", "expected {0} numbers".format(dim))
        root = np.array(root, dtype=np.float64)
    score = pdoc.get("score")
    ref = pdoc.get("reference_length")
    return (Pose(coords=coords, visible=visible), root,
            None if score is None else float(score), None if ref is None else float(ref))


def parse_dataset(doc, source="<dataset>"):
    """Validate a decoded JSON document against the dataset schema and build a PoseDataset."""
    check_document(doc, "pose_dataset", source, DatasetFormatError)
    skeleton_ref = doc["skeleton"]
    try:
        spec = resolve(skeleton_ref)
    except SkeletonError as e:
        _fail(source + ".skeleton", str(e))
    dim = doc["dim"]
    if dim != spec.dim:
        _fail(source + ".dim", "is {0} but skeleton '{1}' is {2}D".format(dim, spec.name, spec.dim))
    scenes, scores, roots = [], [], []
    any_score = False
    for i, idoc in enumerate(doc["images"]):
        where = "{0}.images[{1}]".format(source, i)
        persons, image_scores, image_roots, refs = [], [], [], []
        for p, pdoc in enumerate(idoc["persons"]):
            pose, root, score, ref = _parse_person(pdoc, spec, dim, "{0}.persons[{1}]".format(where, p))
            persons.append(pose)
            image_roots.append(root)
            any_score = any_score or score is not None
            image_scores.append(1.0 if score is None else score)
            refs.append(ref)
        refs = tuple(refs) if persons and all(r is not None for r in refs) else None
        scenes.append(Scene(image_height=int(idoc["height"]), image_width=int(idoc["width"]),
                            persons=tuple(persons), dim=dim, reference_lengths=refs,
                            image_id=str(idoc.get("id", i))))
        scores.append(image_scores)
        roots.append(image_roots)
    return PoseDataset(skeleton=spec, scenes=scenes, scores=scores if any_score else None, roots=roots,
                       skeleton_ref=skeleton_ref)


def loads(text, source="<dataset>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetFormatError("{0}:{1}:{2}: invalid JSON: {3}".format(source, e.lineno, e.colno, e.msg))
    return parse_dataset(doc, source)


def load_dataset(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise StorageError("Cannot read {0}: {1}".format(path, e))
    dataset = loads(text, str(path))
    logger.debug("Loaded %s: %d images, skeleton %s", path, len(dataset.scenes), dataset.skeleton.name)
    return dataset


def _person_doc(pose, spec, root=None, score=None, ref=None):
    joints = []
    for j, name in enumerate(spec.joint_names):
        if not pose.visible[j]:
            continue
        jdoc = {"name": name, "x": float(pose.coords[j, 0]), "y": float(pose.coords[j, 1]), "visible": True}
        if pose.dim == 3:
            jdoc["z"] = float(pose.coords[j, 2])
        joints.append(jdoc)
    doc = {"joints": joints}
    if root is not None:
        doc["root"] = [float(v) for v in root]
    if score is not None:
        doc["score"] = float(score)
    if ref is not None:
        doc["reference_length"] = float(ref)
    return doc


def to_document(dataset):
    spec = dataset.skeleton
    ref = dataset.skeleton_ref if isinstance(dataset.skeleton_ref, str) else to_dict(spec)
    images = []
    for i, scene in enumerate(dataset.scenes):
        scores = dataset.scores[i] if dataset.scores is not None else [None] * scene.num_persons
        roots = dataset.roots[i] if dataset.roots is not None else [None] * scene.num_persons
        refs = scene.reference_lengths or [None] * scene.num_persons
        images.append({
            "id": scene.image_id,
            "width": scene.image_width,
            "height": scene.image_height,
            "persons": [_person_doc(p, spec, r, s, rl) for p, r, s, rl in zip(scene.persons, roots, scores, refs)],
        })
    return {"version": FORMAT_VERSION, "skeleton": ref, "dim": spec.dim, "images": images}


def dumps(dataset):
    return json.dumps(to_document(dataset), indent=1, sort_keys=True)


def write_dataset(path, dataset):
    atomic_write_text(path, dumps(dataset) + "\n")
    logger.debug("Wrote %s: %d images", path, len(dataset.scenes))


def predictions_dataset(spec, scenes, decoded_per_image, skeleton_ref=None):
    """Dataset of decoded poses, one image entry per input scene."""
    out_scenes, scores, roots = [], [], []
    for scene, decoded in zip(scenes, decoded_per_image):
        out_scenes.append(Scene(image_height=scene.image_height, image_width=scene.image_width,
                                persons=tuple(d.pose for d in decoded), dim=spec.dim, image_id=scene.image_id))
        scores.append([d.score for d in decoded])
        roots.append([d.root for d in decoded])
    return PoseDataset(skeleton=spec, scenes=out_scenes, scores=scores, roots=roots,
                       skeleton_ref=skeleton_ref)
