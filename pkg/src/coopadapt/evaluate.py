"""Detection evaluation: rotated IoU, greedy matching, pooled VOC2010 AP.

Matching pools every frame of a split into one ranked sweep: predictions
are visited in descending score (stable on input order for ties) and each
may claim at most one still-unmatched ground-truth box from its own frame,
by maximum IoU, counting as a true positive iff that IoU strictly exceeds
the threshold.  Precision/recall accumulate over the pooled sweep, and AP
integrates the right-monotone precision envelope over recall (VOC 2010,
all points).

Frames with zero ground truth contribute only false positives; a whole
split with zero ground truth has no defined AP and is reported as a null,
never silently as 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ContractError
from .world import OrientedBox

AP_THRESHOLDS = (0.3, 0.5, 0.7)


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection-over-union of two oriented BEV rectangles."""
    return float(backend.rotated_iou_pairs(a.as_array()[None], b.as_array()[None])[0])


@dataclass(frozen=True)
class MatchResult:
    """Ranked (score, is_tp) pairs over the pooled split, plus truth count."""

    pairs: tuple
    total_truth: int


def greedy_match(preds: list, truths: list, iou_thresh: float) -> MatchResult:
    """Label pooled predictions TP/FP by confidence-ordered greedy matching.

    ``preds``: (frame_id, score, OrientedBox) triples; ``truths``:
    (frame_id, OrientedBox) pairs.  A prediction may only match truth in
    its own frame, claims its maximum-IoU unmatched truth, and is a true
    positive iff that IoU exceeds ``iou_thresh``.
    """
    truth_by_frame: dict = {}
    for idx, (frame, box) in enumerate(truths):
        truth_by_frame.setdefault(frame, []).append((idx, box))
    used = [False] * len(truths)

    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    pairs = []
    for i in order:
        frame, score, box = preds[i]
        candidates = [(idx, t) for idx, t in truth_by_frame.get(frame, []) if not used[idx]]
        is_tp = False
        if candidates:
            arr = box.as_array()[None]
            cand_arr = np.stack([t.as_array() for _, t in candidates])
            ious = backend.rotated_iou_pairs(np.repeat(arr, len(candidates), axis=0), cand_arr)
            best = int(np.argmax(ious))
            if float(ious[best]) > iou_thresh:
                used[candidates[best][0]] = True
                is_tp = True
        pairs.append((float(score), is_tp))
    return MatchResult(pairs=tuple(pairs), total_truth=len(truths))


def voc2010_ap(match: MatchResult):
    """All-points interpolated AP; None when the split has no ground truth."""
    if match.total_truth < 1:
        return None
    if not match.pairs:
        return 0.0
    tp = np.array([1.0 if hit else 0.0 for _, hit in match.pairs])
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    precision = cum_tp / (cum_tp + cum_fp)
    recall = cum_tp / match.total_truth
    # Monotone non-increasing envelope from the right, then step-integrate.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def ap_suite(preds: list, truths: list, thresholds: tuple = AP_THRESHOLDS) -> dict:
    """AP at each IoU threshold over the pooled prediction/truth set."""
    return {thr: voc2010_ap(greedy_match(preds, truths, thr)) for thr in thresholds}


# -- PR-curve export -------------------------------------------------------------


@dataclass(frozen=True)
class PRCurve:
    rows: tuple  # (threshold, precision, recall) per ranked prediction
    total_truth: int

    def ap(self):
        """Re-integrate the curve with the same envelope rule as voc2010_ap."""
        if self.total_truth < 1:
            return None
        if not self.rows:
            return 0.0
        precision = np.array([r[1] for r in self.rows])
        recall = np.array([r[2] for r in self.rows])
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        prev_recall = np.concatenate([[0.0], recall[:-1]])
        return float(np.sum((recall - prev_recall) * envelope))


def pr_curve(match: MatchResult) -> PRCurve:
    tp = np.array([1.0 if hit else 0.0 for _, hit in match.pairs])
    if tp.size == 0:
        return PRCurve(rows=(), total_truth=match.total_truth)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    precision = cum_tp / (cum_tp + cum_fp)
    recall = (
        cum_tp / match.total_truth if match.total_truth else np.zeros_like(cum_tp)
    )
    rows = tuple(
        (score, float(p), float(r))
        for (score, _), p, r in zip(match.pairs, precision, recall)
    )
    return PRCurve(rows=rows, total_truth=match.total_truth)


def export_pr(match: MatchResult, path) -> PRCurve:
    """Write the pooled PR curve as CSV; full float precision for round trips."""
    curve = pr_curve(match)
    with open(path, "w") as fh:
        fh.write(f"# total_truth={curve.total_truth}\n")
        fh.write("threshold,precision,recall\n")
        if not curve.rows:
            fh.write("# no predictions; recall 0\n")
        for thr, prec, rec in curve.rows:
            fh.write(f"{thr!r},{prec!r},{rec!r}\n")
    return curve


def import_pr(path) -> PRCurve:
    rows = []
    total_truth = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# total_truth="):
                total_truth = int(line.split("=", 1)[1])
            elif not line or line.startswith("#") or line.startswith("threshold"):
                continue
            else:
                thr, prec, rec = (float(v) for v in line.split(","))
                rows.append((thr, prec, rec))
    if total_truth is None:
        raise ContractError(f"PR file {path} is missing its total_truth header")
    return PRCurve(rows=tuple(rows), total_truth=total_truth)


# -- detection-set serialization ---------------------------------------------------


def dump_detections_jsonl(path, preds: list, truths: list) -> None:
    """JSONL contract with external evaluators: one record per row."""
    with open(path, "w") as fh:
        for frame, score, box in preds:
            fh.write(
                json.dumps(
                    {"kind": "pred", "frame": frame, "score": score, "box": list(box.as_array())},
                    sort_keys=True,
                )
                + "\n"
            )
        for frame, box in truths:
            fh.write(
                json.dumps(
                    {"kind": "truth", "frame": frame, "box": list(box.as_array())}, sort_keys=True
                )
                + "\n"
            )


def load_detections_jsonl(path):
    preds, truths = [], []
    with open(path) as fh:
        for line in fh:
            doc = json.loads(line)
            box = OrientedBox(*doc["box"])
            if doc["kind"] == "pred":
                preds.append((doc["frame"], float(doc["score"]), box))
            elif doc["kind"] == "truth":
                truths.append((doc["frame"], box))
            else:
                raise ContractError(f"unknown detection record kind {doc['kind']!r}")
    return preds, truths
