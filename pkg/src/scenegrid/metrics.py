"""Geometric scoring of predicted answers against ground truth.

Covers single-box accuracy at an IoU threshold, set-to-set F1 with optimal
one-to-one matching, editing accuracy for movement/placement tasks, and the
gated mean absolute relative error (mARE) of predicted axis gaps for the
distance task. All metrics are pure aggregations over immutable inputs and
invariant to sample order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .codec import ParseError, grid_box_to_box3, parse_answer
from .geometry import Box3, iou_aabb
from .synth import InstructionSample

__all__ = [
    "acc_at_iou",
    "f1_at_iou",
    "mare_at_iou",
    "editing_acc",
    "MareReport",
    "EvalReport",
    "score_samples",
    "load_predictions",
    "write_report",
]


def acc_at_iou(preds: list[Box3 | None], gts: list[Box3], k: float) -> float:
    """Fraction of samples whose predicted box reaches IoU >= k.

    A missing prediction (None) counts as a miss.
    """
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(gts)} gts")
    if not gts:
        raise ValueError("need at least one sample")
    hits = sum(
        1 for p, g in zip(preds, gts) if p is not None and iou_aabb(p, g) >= k
    )
    return hits / len(gts)


def _match_count(preds: list[Box3], gts: list[Box3], k: float) -> int:
    """Size of a maximum one-to-one matching among pairs with IoU >= k."""
    if not preds or not gts:
        return 0
    ok = np.array(
        [[1.0 if iou_aabb(p, g) >= k else 0.0 for g in gts] for p in preds]
    )
    rows, cols = linear_sum_assignment(-ok)
    return int(ok[rows, cols].sum())


def f1_at_iou(
    pred_sets: list[list[Box3]], gt_sets: list[list[Box3]], k: float
) -> float:
    """Mean per-sample F1 under optimal box matching at IoU >= k.

    Matched pairs are true positives, leftover predictions false positives,
    leftover ground truths false negatives. Two empty sets score a vacuous
    1.0.
    """
    if len(pred_sets) != len(gt_sets):
        raise ValueError(
            f"length mismatch: {len(pred_sets)} pred sets vs {len(gt_sets)} gt sets"
        )
    if not gt_sets:
        raise ValueError("need at least one sample")
    scores = []
    for preds, gts in zip(pred_sets, gt_sets):
        if not preds and not gts:
            scores.append(1.0)
            continue
        tp = _match_count(preds, gts, k)
        scores.append(2.0 * tp / (len(preds) + len(gts)))
    return float(np.mean(scores))


@dataclass
class MareReport:
    """Per-axis mean absolute relative gap error over gate-passing samples."""

    axis_mare: tuple[float, float, float]
    gate_rate: float
    n_total: int
    n_qualified: int


def mare_at_iou(preds, gts, k: float) -> MareReport:
    """Gated mARE for distance samples.

    Each ground truth is ``(boxes, gaps)`` with two boxes and three axis
    gaps; each prediction is the same shape or None. A sample qualifies only
    when both predicted boxes localize their ground-truth counterparts at
    IoU >= k; unqualified samples are excluded from the error means and
    reported through the gate rate. Relative error divides by
    ``max(gt_gap, 1)`` so zero gaps stay well-defined at grid resolution.
    """
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(gts)} gts")
    if not gts:
        raise ValueError("need at least one sample")
    errors = []
    for pred, gt in zip(preds, gts):
        gt_boxes, gt_gaps = gt
        if len(gt_boxes) != 2 or len(gt_gaps) != 3:
            raise ValueError("each gt needs exactly 2 boxes and 3 gaps")
        if pred is None:
            continue
        pred_boxes, pred_gaps = pred
        if len(pred_boxes) < 2 or len(pred_gaps) < 3:
            continue
        if any(
            iou_aabb(pred_boxes[i], gt_boxes[i]) < k for i in range(2)
        ):
            continue
        errors.append(
            [
                abs(float(pg) - float(gg)) / max(float(gg), 1.0)
                for pg, gg in zip(pred_gaps[:3], gt_gaps)
            ]
        )
    n_q = len(errors)
    axis = tuple(np.mean(errors, axis=0)) if n_q else (0.0, 0.0, 0.0)
    return MareReport(
        axis_mare=tuple(float(v) for v in axis),
        gate_rate=n_q / len(gts),
        n_total=len(gts),
        n_qualified=n_q,
    )


def editing_acc(preds, gts, task: str, k: float) -> float:
    """IoU-thresholded accuracy for layout-editing predictions.

    movement: predictions and ground truths are the moved boxes.
    placement: predictions are bare center triples, completed into boxes
    with the queried (ground-truth) size before scoring.
    """
    if task not in ("movement", "placement"):
        raise ValueError(f"editing_acc task must be movement/placement, got {task!r}")
    if task == "movement":
        return acc_at_iou(preds, gts, k)
    boxes = []
    for center, gt in zip(preds, gts):
        if center is None:
            boxes.append(None)
        else:
            boxes.append(Box3(center=np.asarray(center, float), extent=gt.extent))
    return acc_at_iou(boxes, gts, k)


# --------------------------------------------------------------------------
# scoring prediction files against synthesized ground truth


@dataclass
class EvalReport:
    metrics: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def as_text(self) -> str:
        lines = [f"{name} {value!r}" for name, value in sorted(self.metrics.items())]
        lines += [f"count/{name} {value}" for name, value in sorted(self.counts.items())]
        return "\n".join(lines) + "\n"

    def as_json(self) -> str:
        return json.dumps(
            {"metrics": self.metrics, "counts": self.counts}, sort_keys=True, indent=2
        )


def _gt_boxes(sample: InstructionSample) -> list[Box3]:
    gt = sample.gt
    if sample.task in ("distance", "movement"):
        return [
            Box3(center=np.array(b[:3], float), extent=np.array(b[3:], float))
            for b in gt["boxes"]
        ]
    return [Box3(center=np.array(gt["box"][:3], float), extent=np.array(gt["box"][3:], float))]


def _parse_prediction(sample: InstructionSample, answer: str | None):
    """Extract task-relevant items from a predicted answer text.

    Returns (box_set, target) where ``target`` is the task-specific payload
    scored by the headline metric. Unparseable answers become misses.
    """
    if answer is None:
        return [], None
    try:
        payload = parse_answer(answer)
    except ParseError:
        return [], None
    boxes = [grid_box_to_box3(b) for b in payload.boxes]
    if sample.task == "distance":
        if len(boxes) >= 2 and len(payload.gaps) >= 3:
            return boxes[:2], (boxes[:2], payload.gaps[:3])
        return boxes[:2], None
    if sample.task == "movement":
        return boxes[:2], (boxes[1] if len(boxes) >= 2 else None)
    centers = payload.centers
    if centers:
        gt_box = _gt_boxes(sample)[0]
        pred_box = Box3(center=np.array(centers[0], float), extent=gt_box.extent)
        return [pred_box], centers[0]
    return [], None


def score_samples(
    gt_samples: list[InstructionSample],
    predictions: dict[str, str],
    thresholds: tuple[float, ...] = (0.25, 0.5),
) -> EvalReport:
    """Score a prediction map {sample_id: answer text} against ground truth.

    Reports per-task and combined accuracy, set F1, and gated mARE at every
    threshold. Samples without a prediction entry count as misses.
    """
    if not gt_samples:
        raise ValueError("no ground-truth samples to score")
    by_task: dict[str, list] = {"distance": [], "movement": [], "placement": []}
    for sample in gt_samples:
        answer = predictions.get(sample.sample_id)
        box_set, target = _parse_prediction(sample, answer)
        by_task[sample.task].append((sample, box_set, target))

    report = EvalReport()
    for task, rows in by_task.items():
        report.counts[task] = len(rows)
    report.counts["total"] = len(gt_samples)

    all_pred_sets = []
    all_gt_sets = []
    for task, rows in by_task.items():
        for sample, box_set, _ in rows:
            all_pred_sets.append(box_set)
            all_gt_sets.append(_gt_boxes(sample))

    for k in thresholds:
        tag = f"{k:g}"
        report.metrics[f"f1@{tag}"] = f1_at_iou(all_pred_sets, all_gt_sets, k)

        edit_preds: list = []
        edit_gts: list = []
        for task in ("movement", "placement"):
            rows = by_task[task]
            if not rows:
                continue
            gts = [_gt_boxes(s)[-1] for s, _, _ in rows]
            targets = [t for _, _, t in rows]
            acc = editing_acc(targets, gts, task, k)
            report.metrics[f"{task}/acc@{tag}"] = acc
            edit_preds.extend(
                targets
                if task == "movement"
                else [
                    None
                    if t is None
                    else Box3(center=np.asarray(t, float), extent=g.extent)
                    for t, g in zip(targets, gts)
                ]
            )
            edit_gts.extend(gts)
        if edit_gts:
            report.metrics[f"acc@{tag}"] = acc_at_iou(edit_preds, edit_gts, k)

        rows = by_task["distance"]
        if rows:
            gts = [(_gt_boxes(s), [float(v) for v in s.gt["gaps"]]) for s, _, _ in rows]
            preds = [t for _, _, t in rows]
            mare = mare_at_iou(preds, gts, k)
            for axis_name, value in zip("xyz", mare.axis_mare):
                report.metrics[f"mare@{tag}/{axis_name}"] = value
            report.metrics[f"mare@{tag}/gate_rate"] = mare.gate_rate
    return report


def load_predictions(path) -> dict[str, str]:
    """Read a predictions file: one {"sample_id", "answer"} JSON per line."""
    preds: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                preds[rec["sample_id"]] = rec["answer"]
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad prediction record: {exc}")
    return preds


def write_report(report: EvalReport, path):
    """Write the flat text report to ``path`` and JSON to ``path + '.json'``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.as_text())
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        fh.write(report.as_json())
        fh.write("\n")
