"""Closed-vocabulary instance segmentation evaluation: IoU, AP, subset means.

Per class and IoU threshold, predictions are sorted by confidence (stable for
ties, so ingestion order decides) and greedily matched to the unmatched
ground-truth mask of that class with the highest IoU at or above the
threshold. AP is the area under the precision envelope over recall. The main
AP averages thresholds 0.50:0.95:0.05; AP50 and AP25 are the fixed-threshold
values.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EvaluationError, ProposalFormatError
from .proposals import InstanceMask3D, InstanceMaskSet, MaskProvenance

logger = logging.getLogger(__name__)

STRICT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_THRESHOLDS = (0.25,) + STRICT_THRESHOLDS


def mask_iou(a: InstanceMask3D, b: InstanceMask3D) -> float:
    if a.membership.shape != b.membership.shape:
        raise EvaluationError("masks are over different point counts")
    inter = int(np.count_nonzero(a.membership & b.membership))
    union = int(np.count_nonzero(a.membership | b.membership))
    if union == 0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class Prediction:
    mask: InstanceMask3D
    label: str
    confidence: float = 1.0


@dataclass(frozen=True)
class GroundTruth:
    mask: InstanceMask3D
    label: str


@dataclass
class PredictionSet:
    predictions: list[Prediction]
    scene_id: str = "scene"

    def __iter__(self):
        return iter(self.predictions)

    def __len__(self):
        return len(self.predictions)

    def validate(self) -> None:
        for i, p in enumerate(self.predictions):
            if not 0.0 <= p.confidence <= 1.0:
                raise EvaluationError(
                    f"prediction {i} confidence {p.confidence} outside [0, 1]")


@dataclass
class APReport:
    ap: float
    ap50: float | None
    ap25: float | None
    per_class: dict  # label -> {"ap": float, "ap50": float|None, "ap25": float|None}
    per_class_threshold: dict  # label -> {threshold: ap}
    thresholds: tuple
    subsets: dict = field(default_factory=dict)  # subset -> mean AP or None

    def to_dict(self) -> dict:
        return {
            "ap": self.ap, "ap50": self.ap50, "ap25": self.ap25,
            "per_class": self.per_class,
            "per_class_threshold": {
                label: {f"{t:.2f}": v for t, v in row.items()}
                for label, row in self.per_class_threshold.items()},
            "thresholds": list(self.thresholds),
            "subsets": self.subsets,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def format_table(self) -> str:
        def fmt(v):
            return "  n/a" if v is None else f"{100 * v:5.1f}"
        header = f"{'':12s} {'AP':>5s} {'AP50':>5s} {'AP25':>5s} " \
                 f"{'head':>5s} {'common':>6s} {'tail':>5s}"
        row = (f"{'all':12s} {fmt(self.ap)} {fmt(self.ap50)} {fmt(self.ap25)} "
               f"{fmt(self.subsets.get('head'))} {fmt(self.subsets.get('common')):>6s} "
               f"{fmt(self.subsets.get('tail'))}")
        lines = [header, row, "", f"{'class':24s} {'AP':>5s} {'AP50':>5s} {'AP25':>5s}"]
        for label in sorted(self.per_class):
            c = self.per_class[label]
            lines.append(f"{label:24s} {fmt(c['ap'])} {fmt(c['ap50'])} {fmt(c['ap25'])}")
        return "\n".join(lines)


def _match_class(preds: list[Prediction], gts: list[GroundTruth],
                 iou_matrix: np.ndarray, threshold: float) -> list[bool]:
    """Greedy TP/FP flags for confidence-sorted predictions of one class."""
    matched = [False] * len(gts)
    flags = []
    for pi in range(len(preds)):
        best_iou = -1.0
        best_gt = -1
        for gi in range(len(gts)):
            if matched[gi]:
                continue
            iou = iou_matrix[pi, gi]
            if iou >= threshold and iou > best_iou:
                best_iou = iou
                best_gt = gi
        if best_gt >= 0:
            matched[best_gt] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _ap_from_flags(flags: list[bool], n_gt: int) -> float:
    """Area under the precision envelope over recall for TP/FP flags in rank order."""
    if n_gt == 0:
        raise EvaluationError("AP undefined without ground truth")
    if not flags:
        return 0.0
    tp = 0
    precision = []
    for i, flag in enumerate(flags):
        tp += flag
        precision.append(tp / (i + 1))
    envelope = list(precision)
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    terms = []
    for i, flag in enumerate(flags):
        if flag:
            terms.append(envelope[i] / n_gt)
    return math.fsum(terms)


def evaluate_ap(preds: PredictionSet, gts: list[GroundTruth],
                thresholds: tuple | list = DEFAULT_THRESHOLDS) -> APReport:
    """AP per class and threshold, aggregated into AP / AP50 / AP25.

    Classes with no ground truth are excluded; predictions with labels absent
    from the ground truth count as nothing but a warning (they are unmatched
    false positives of a class that is never averaged).
    """
    preds.validate()
    thresholds = tuple(sorted(set(float(t) for t in thresholds)))
    gt_by_class: dict[str, list[GroundTruth]] = {}
    for gt in gts:
        gt_by_class.setdefault(gt.label, []).append(gt)

    preds_by_class: dict[str, list[Prediction]] = {}
    for p in preds:
        preds_by_class.setdefault(p.label, []).append(p)
    unknown = sorted(set(preds_by_class) - set(gt_by_class))
    if unknown:
        logger.warning("predictions carry label(s) with no ground truth: %s "
                       "(unmatched false positives, not averaged)", unknown)

    per_class_threshold: dict[str, dict[float, float]] = {}
    for label, class_gts in gt_by_class.items():
        class_preds = sorted(preds_by_class.get(label, []),
                             key=lambda p: -p.confidence)
        iou_matrix = np.zeros((len(class_preds), len(class_gts)))
        for pi, p in enumerate(class_preds):
            for gi, g in enumerate(class_gts):
                iou_matrix[pi, gi] = mask_iou(p.mask, g.mask)
        per_class_threshold[label] = {
            t: _ap_from_flags(_match_class(class_preds, class_gts, iou_matrix, t),
                              len(class_gts))
            for t in thresholds
        }

    strict = [t for t in thresholds if t in STRICT_THRESHOLDS]
    per_class = {}
    for label, row in per_class_threshold.items():
        entry = {
            "ap": math.fsum(row[t] for t in strict) / len(strict) if strict else None,
            "ap50": row.get(0.5),
            "ap25": row.get(0.25),
        }
        per_class[label] = entry

    def class_mean(key):
        values = [per_class[label][key] for label in per_class
                  if per_class[label][key] is not None]
        if not values:
            return None
        return math.fsum(values) / len(values)

    ap = class_mean("ap")
    return APReport(ap=0.0 if ap is None else ap,
                    ap50=class_mean("ap50"), ap25=class_mean("ap25"),
                    per_class=per_class, per_class_threshold=per_class_threshold,
                    thresholds=thresholds)


def subset_breakdown(report: APReport, subset_map: dict[str, str]) -> dict:
    """Unweighted mean of per-class AP inside each subset.

    Every evaluated class must be mapped. Subsets with no evaluated class
    come back as None (excluded from aggregates).
    """
    unmapped = sorted(set(report.per_class) - set(subset_map))
    if unmapped:
        raise EvaluationError(f"classes missing from subset map: {unmapped}")
    means: dict[str, float | None] = {}
    for subset in sorted(set(subset_map.values())):
        values = [report.per_class[label]["ap"] for label in report.per_class
                  if subset_map[label] == subset
                  and report.per_class[label]["ap"] is not None]
        means[subset] = math.fsum(values) / len(values) if values else None
    return means


def oracle_mask_mode(gts: list[GroundTruth], scene_id: str = "scene") -> InstanceMaskSet:
    """Ground-truth masks stripped of labels, usable as the proposal set."""
    masks = tuple(
        InstanceMask3D(membership=gt.mask.membership, mask_id=i,
                       provenance=MaskProvenance(external_id=i))
        for i, gt in enumerate(gts))
    return InstanceMaskSet(masks=masks, scene_id=scene_id)


def load_labeled_masks(npy_path, labels_path, n_points: int,
                       scene_id: str = "scene"):
    """Read the N x M mask matrix plus its label/confidence sidecar.

    Returns (list of GroundTruth, list of confidences). Empty columns are
    dropped together with their labels.
    """
    matrix = np.load(npy_path)
    if matrix.ndim != 2 or matrix.shape[0] != n_points:
        raise ProposalFormatError(
            f"{npy_path}: expected ({n_points}, M) matrix, got {matrix.shape}")
    with open(labels_path) as f:
        meta = json.load(f)
    labels = meta["labels"]
    if len(labels) != matrix.shape[1]:
        raise ProposalFormatError(
            f"{labels_path}: {len(labels)} labels for {matrix.shape[1]} mask columns")
    confidences = meta.get("confidences", [1.0] * len(labels))
    entries = []
    confs = []
    for col, label in enumerate(labels):
        membership = matrix[:, col].astype(bool)
        if not membership.any():
            logger.warning("%s: column %d is empty, dropped", npy_path, col)
            continue
        mask = InstanceMask3D(membership=membership, mask_id=len(entries),
                              provenance=MaskProvenance(external_id=col))
        entries.append(GroundTruth(mask=mask, label=label))
        confs.append(float(confidences[col]))
    return entries, confs


def load_prediction_set(npy_path, labels_path, n_points: int,
                        scene_id: str = "scene") -> PredictionSet:
    entries, confs = load_labeled_masks(npy_path, labels_path, n_points, scene_id)
    preds = PredictionSet(
        predictions=[Prediction(mask=e.mask, label=e.label, confidence=c)
                     for e, c in zip(entries, confs)],
        scene_id=scene_id)
    preds.validate()
    return preds


def load_ground_truth(npy_path, labels_path, n_points: int,
                      scene_id: str = "scene") -> list[GroundTruth]:
    entries, _ = load_labeled_masks(npy_path, labels_path, n_points, scene_id)
    return entries


def load_subset_map(path) -> dict[str, str]:
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise EvaluationError(f"{path}: subset map must be a JSON object")
    return {str(k): str(v) for k, v in raw.items()}


def bundled_scannet200_subsets() -> dict[str, str]:
    """The shipped ScanNet200 head/common/tail mapping (66/68/66 categories)."""
    path = Path(__file__).parent / "data" / "scannet200_subsets.json"
    return load_subset_map(path)
