"""
Multi-person pose metrics.

2D: persons are matched greedily by PCKh correctness, then per-joint average
precision is computed over the whole dataset from score-ranked detections
(all-points interpolation).  This is a documented protocol of its own; it is
not meant to reproduce benchmark toolkit numbers.

3D: persons are matched by root proximity (500 mm gate), then joints count
as correct within a 3D radius (150 mm by default).
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .decoder import DecodedPose
from .errors import DataError
from .representation import Pose

logger = logging.getLogger(__name__)

PCKH_ALPHA = 0.5
HEAD_SIZE_FACTOR = 0.6
PCK3D_RADIUS = 150.0
ROOT_GATE_3D = 500.0

JOINT_GROUPS = (
    ("Head", ("head", "neck", "nose", "eye", "ear")),
    ("Shoulder", ("shoulder",)),
    ("Elbow", ("elbow",)),
    ("Wrist", ("wrist",)),
    ("Hip", ("hip",)),
    ("Knee", ("knee",)),
    ("Ankle", ("ankle",)),
)


def pckh_correct(pred_joint, gt_joint, head_size, alpha=PCKH_ALPHA):
    """True iff the planar distance is at most alpha * head_size."""
    if not head_size > 0:
        raise DataError("head_size must be positive, got {0}".format(head_size))
    d = np.asarray(pred_joint, dtype=np.float64)[:2] - np.asarray(gt_joint, dtype=np.float64)[:2]
    return bool(np.hypot(d[0], d[1]) <= alpha * head_size)


def head_size(gt_pose, spec, reference_length=None):
    """
    0.6 times the head segment length for skeletons that have one,
    otherwise the recorded reference length of the person.
    """
    if spec.head_segment is not None:
        a, b = spec.head_segment
        if not (gt_pose.visible[a] and gt_pose.visible[b]):
            raise DataError("Head size needs joints '{0}' and '{1}' visible".format(
                spec.joint_names[a], spec.joint_names[b]))
        d = gt_pose.coords[a, :2] - gt_pose.coords[b, :2]
        size = HEAD_SIZE_FACTOR * float(np.hypot(d[0], d[1]))
    elif reference_length is not None:
        size = float(reference_length)
    else:
        raise DataError("Skeleton '{0}' has no head segment and no reference length was given".format(spec.name))
    if not size > 0:
        raise DataError("Degenerate head size {0}".format(size))
    return size


def _pred_pose(pred):
    return pred if isinstance(pred, Pose) else pred.pose


def _pred_score(pred):
    return 1.0 if isinstance(pred, Pose) else float(pred.score)


def _head_sizes(gts, spec, ref_lengths):
    """
    Per ground-truth person head size for scoring.  A person whose head
    joints are not annotated falls back to its recorded reference length;
    without one the size is None and none of its joints can be correct,
    though they still count as positives.
    """
    refs = ref_lengths if ref_lengths is not None else [None] * len(gts)
    sizes = []
    for g, (gt, ref) in enumerate(zip(gts, refs)):
        try:
            sizes.append(head_size(gt, spec, ref))
        except DataError as e:
            if ref is not None and ref > 0:
                sizes.append(float(ref))
                continue
            logger.debug("Ground-truth person %d has no head size: %s", g, e)
            sizes.append(None)
    return sizes


def correct_joints(pred_pose, gt_pose, size, alpha=PCKH_ALPHA):
    """Boolean per joint: both visible and within alpha * size; all False when size is None."""
    if size is None:
        return np.zeros(gt_pose.num_joints, dtype=bool)
    d = pred_pose.coords[:, :2] - gt_pose.coords[:, :2]
    close = np.hypot(d[:, 0], d[:, 1]) <= alpha * size
    return close & pred_pose.visible & gt_pose.visible


def _correct_table(preds, gts, sizes, alpha):
    table = np.zeros((len(preds), len(gts), gts[0].num_joints if gts else 0), dtype=bool)
    for i, p in enumerate(preds):
        for g, gt in enumerate(gts):
            table[i, g] = correct_joints(_pred_pose(p), gt, sizes[g], alpha)
    return table


def score_order(preds):
    """Prediction indices by descending score, ties by index."""
    return sorted(range(len(preds)), key=lambda i: (-_pred_score(preds[i]), i))


def match_persons(preds, gts, spec, ref_lengths=None, alpha=PCKH_ALPHA):
    """
    Greedy one-to-one matching.  Predictions are visited by descending
    score; each takes the unmatched ground truth with the highest fraction
    of PCKh-correct joints, ties going to the lower index.  Predictions with
    no correct joint stay unmatched.
    :return: list of (prediction index, ground-truth index)
    """
    if not preds or not gts:
        return []
    for p in preds:
        if _pred_pose(p).num_joints != spec.num_joints:
            raise DataError("Prediction has {0} joints, skeleton '{1}' has {2}".format(
                _pred_pose(p).num_joints, spec.name, spec.num_joints))
    table = _correct_table(preds, gts, _head_sizes(gts, spec, ref_lengths), alpha)
    annotated = np.array([max(int(g.visible.sum()), 1) for g in gts], dtype=np.float64)
    fractions = table.sum(axis=2) / annotated[None, :]
    taken = np.zeros(len(gts), dtype=bool)
    matching = []
    for i in score_order(preds):
        row = np.where(taken, -1.0, fractions[i])
        g = int(np.argmax(row))
        if row[g] <= 0:
            continue
        taken[g] = True
        matching.append((i, g))
    return matching


def exhaustive_matching(preds, gts, spec, ref_lengths=None, alpha=PCKH_ALPHA):
    """
    Brute-force reference: the injective partial assignment with the most
    correct joints in total.  Exponential; meant for small test instances.
    :return: (total correct joints, matching)
    """
    if not preds or not gts:
        return 0, []
    table = _correct_table(preds, gts, _head_sizes(gts, spec, ref_lengths), alpha).sum(axis=2)
    best, best_matching = -1, []
    slots = list(range(len(gts))) + [None] * len(preds)
    for assignment in set(itertools.permutations(slots, len(preds))):
        total = sum(int(table[i, g]) for i, g in enumerate(assignment) if g is not None)
        if total > best:
            best = total
            best_matching = sorted((i, g) for i, g in enumerate(assignment) if g is not None and table[i, g] > 0)
    return best, best_matching


def matched_total(matching, preds, gts, spec, ref_lengths=None, alpha=PCKH_ALPHA):
    sizes = _head_sizes(gts, spec, ref_lengths)
    return int(sum(correct_joints(_pred_pose(preds[i]), gts[g], sizes[g], alpha).sum() for i, g in matching))


def average_precision(scores, true_positive, num_positives):
    """
    All-points interpolated AP.
    :return: AP in [0, 1], or None when there are no positives
    """
    if num_positives == 0:
        return None
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(true_positive, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = np.concatenate([[0.0], ctp / num_positives])
    precision = np.concatenate([[0.0], ctp / (ctp + cfp)])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * precision[1:]))


def _mean(values):
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


@dataclass
class MetricReport:
    joint_names: Tuple[str, ...]
    per_joint_ap: List[Optional[float]]
    total_map: Optional[float]
    per_joint_pck: List[Optional[float]]
    matching: List[List[Tuple[int, int]]] = field(default_factory=list)
    metric: str = "map"
    total_pck: Optional[float] = None

    @property
    def per_joint_primary(self):
        return self.per_joint_ap if self.metric == "map" else self.per_joint_pck

    def group_rows(self):
        """Mean score per joint group; left and right joints share a row."""
        rows = []
        lowered = [n.lower() for n in self.joint_names]
        values = self.per_joint_primary
        for label, keys in JOINT_GROUPS:
            members = [j for j, n in enumerate(lowered) if any(k in n for k in keys)]
            if members:
                rows.append((label, _mean([values[j] for j in members])))
        rows.append(("Total", self.total_map))
        return rows

    def to_dict(self):
        return {
            "metric": self.metric,
            "joints": list(self.joint_names),
            "per_joint_ap": list(self.per_joint_ap),
            "per_joint_pck": list(self.per_joint_pck),
            "total": self.total_map,
            "total_pck": self.total_pck,
            "groups": {label: value for label, value in self.group_rows()},
            "matching": [[list(pair) for pair in image] for image in self.matching],
        }

    def table(self):
        width = max([len(n) for n in self.joint_names] + [8])
        head = "{0:<{w}}  {1:>8}  {2:>8}".format("joint", "AP", "PCK", w=width)
        lines = [head, "-" * len(head)]
        for name, ap, pck in zip(self.joint_names, self.per_joint_ap, self.per_joint_pck):
            lines.append("{0:<{w}}  {1:>8}  {2:>8}".format(name, _pct(ap), _pct(pck), w=width))
        lines.append("-" * len(head))
        for label, value in self.group_rows():
            lines.append("{0:<{w}}  {1:>8}".format(label, _pct(value), w=width))
        return "\n".join(lines)


def _pct(value):
    return "-" if value is None else "{0:.2f}".format(100.0 * value)


def _check_aligned(preds_per_image, gts_per_image):
    if len(preds_per_image) != len(gts_per_image):
        raise DataError("Got predictions for {0} images and ground truth for {1}".format(
            len(preds_per_image), len(gts_per_image)))


def mean_ap(preds_per_image, gts_per_image, spec, ref_lengths_per_image=None, alpha=PCKH_ALPHA):
    """
    Dataset-level PCKh mAP.
    :param preds_per_image: list (per image) of DecodedPose or Pose lists
    :param gts_per_image: list (per image) of ground-truth Pose lists
    :return: MetricReport
    """
    _check_aligned(preds_per_image, gts_per_image)
    k = spec.num_joints
    refs_all = ref_lengths_per_image or [None] * len(gts_per_image)
    scores = [[] for _ in range(k)]
    hits = [[] for _ in range(k)]
    positives = np.zeros(k, dtype=np.int64)
    correct_count = np.zeros(k, dtype=np.int64)
    matchings = []
    for preds, gts, refs in zip(preds_per_image, gts_per_image, refs_all):
        matching = match_persons(preds, gts, spec, refs, alpha)
        matchings.append(matching)
        for g in gts:
            positives += g.visible
        if not preds:
            continue
        sizes = _head_sizes(gts, spec, refs) if gts else []
        unscorable = sum(1 for s in sizes if s is None)
        if unscorable:
            logger.warning("%d ground-truth persons without head size or reference length; "
                           "their joints count as misses", unscorable)
        gt_of = dict(matching)
        for i, p in enumerate(preds):
            pose = _pred_pose(p)
            g = gt_of.get(i)
            ok = correct_joints(pose, gts[g], sizes[g], alpha) if g is not None else np.zeros(k, dtype=bool)
            if g is not None:
                correct_count += ok
            for j in np.flatnonzero(pose.visible):
                if g is not None and not gts[g].visible[j]:
                    continue
                scores[j].append(_pred_score(p))
                hits[j].append(bool(ok[j]))
    per_joint_ap = [average_precision(scores[j], hits[j], int(positives[j])) for j in range(k)]
    per_joint_pck = [float(correct_count[j]) / positives[j] if positives[j] else None for j in range(k)]
    report = MetricReport(joint_names=spec.joint_names, per_joint_ap=per_joint_ap,
                          total_map=_mean(per_joint_ap), per_joint_pck=per_joint_pck, matching=matchings,
                          total_pck=float(correct_count.sum()) / positives.sum() if positives.sum() else None)
    logger.debug("mAP over %d images: %s", len(gts_per_image), report.total_map)
    return report


def _centroid(pose):
    if not pose.visible.any():
        return None
    return pose.coords[pose.visible].mean(axis=0)


def match_by_root(preds, gts, gate=ROOT_GATE_3D):
    """
    Greedy root-proximity matching: by descending score, each prediction
    takes the nearest unmatched ground truth whose centroid lies within gate.
    """
    gt_roots = [_centroid(g) for g in gts]
    taken = [False] * len(gts)
    matching = []
    for i in score_order(preds):
        root = _centroid(_pred_pose(preds[i]))
        if root is None:
            continue
        best, best_d = None, None
        for g, gr in enumerate(gt_roots):
            if taken[g] or gr is None:
                continue
            d = float(np.linalg.norm(root - gr))
            if d <= gate and (best_d is None or d < best_d):
                best, best_d = g, d
        if best is not None:
            taken[best] = True
            matching.append((i, best))
    return matching


def pck3d(preds_per_image, gts_per_image, spec, radius=PCK3D_RADIUS, gate=ROOT_GATE_3D):
    """
    3D-PCK: fraction of annotated joints whose matched prediction lies
    within radius (Euclidean, boundary inclusive).
    :return: MetricReport with metric 'pck3d' (total in per_joint_pck terms)
    """
    _check_aligned(preds_per_image, gts_per_image)
    if spec.dim != 3:
        raise DataError("pck3d needs a 3D skeleton, '{0}' is {1}D".format(spec.name, spec.dim))
    k = spec.num_joints
    positives = np.zeros(k, dtype=np.int64)
    correct = np.zeros(k, dtype=np.int64)
    matchings = []
    for preds, gts in zip(preds_per_image, gts_per_image):
        for pose in [_pred_pose(p) for p in preds] + list(gts):
            if pose.dim != 3:
                raise DataError("pck3d needs 3D poses, got {0}D".format(pose.dim))
        matching = match_by_root(preds, gts, gate)
        matchings.append(matching)
        for g in gts:
            positives += g.visible
        for i, g in matching:
            pose, gt = _pred_pose(preds[i]), gts[g]
            dist = np.linalg.norm(pose.coords - gt.coords, axis=1)
            correct += (dist <= radius) & pose.visible & gt.visible
    per_joint = [float(correct[j]) / positives[j] if positives[j] else None for j in range(k)]
    total = float(correct.sum()) / positives.sum() if positives.sum() else None
    return MetricReport(joint_names=spec.joint_names, per_joint_ap=[None] * k, total_map=total,
                        per_joint_pck=per_joint, matching=matchings, metric="pck3d", total_pck=total)


def as_predictions(poses, scores=None):
    """Wrap plain poses (e.g. loaded from a file) as scored predictions."""
    scores = scores if scores is not None else [1.0] * len(poses)
    return [DecodedPose(pose=p, root=_centroid(p) if p.visible.any() else np.zeros(p.dim), score=float(s),
                        per_joint_scores=p.visible.astype(np.float64)) for p, s in zip(poses, scores)]
