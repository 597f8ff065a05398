"""Lesion detection and segmentation metrics.

A probability volume is binarized at 10%, 26-connected components become
predicted lesions scored by their mean voxel probability, and a prediction
is a true positive when its spacing-weighted center of mass lies within
1 mm of a ground-truth voxel center.  Detection quality is the area under
the lesion-level PR curve (threshold sweep over the per-lesion scores with
the monotone precision envelope), plus recall at the base threshold and
DICE over matched pairs.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

N26 = np.ones((3, 3, 3), dtype=bool)

BASE_THRESHOLD = 0.1
MATCH_TOL_MM = 1.0


@dataclass
class LesionPrediction:
    voxels: np.ndarray            # (n, 3) int indices, lexicographically sorted
    center_of_mass_mm: tuple
    mean_probability: float
    matched_gt: int | None = None  # GT component id, or None for FP

    @property
    def n_voxels(self):
        return int(len(self.voxels))


@dataclass
class DetectionReport:
    predictions: list
    n_gt: int
    pr_points: list = field(default_factory=list)   # (recall, precision), high->low threshold
    map_score: float = 0.0
    max_sensitivity: float | None = None
    tp_dice: list = field(default_factory=list)
    tp_dice_mean: float | None = None

    def to_dict(self):
        return {
            "n_gt": self.n_gt,
            "n_predictions": len(self.predictions),
            "n_true_positive": sum(p.matched_gt is not None for p in self.predictions),
            "map": self.map_score,
            "max_sensitivity": self.max_sensitivity,
            "tp_dice_mean": self.tp_dice_mean,
            "tp_dice": list(self.tp_dice),
            "pr_points": [[r, p] for r, p in self.pr_points],
            "predictions": [
                {
                    "voxel_count": p.n_voxels,
                    "center_of_mass_mm": list(p.center_of_mass_mm),
                    "mean_probability": p.mean_probability,
                    "matched_gt": p.matched_gt,
                }
                for p in self.predictions
            ],
        }


def extract_lesions(prob_volume, spacing_mm, threshold=BASE_THRESHOLD):
    """26-connected components of (probability > threshold), each scored by the
    mean probability over its voxels; centers of mass are spacing-weighted."""
    prob = np.asarray(prob_volume, dtype=np.float64)
    if prob.min() < 0 or prob.max() > 1:
        raise ValueError("probabilities must lie in [0,1]")
    labels, n = ndimage.label(prob > threshold, structure=N26)
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    preds = []
    for comp in range(1, n + 1):
        vox = np.argwhere(labels == comp)
        vox = vox[np.lexsort((vox[:, 2], vox[:, 1], vox[:, 0]))]
        com = vox.mean(axis=0) * spacing
        preds.append(LesionPrediction(
            voxels=vox,
            center_of_mass_mm=tuple(float(c) for c in com),
            mean_probability=float(prob[tuple(vox.T)].mean()),
        ))
    # deterministic processing order: by score descending, then by first voxel
    preds.sort(key=lambda p: (-p.mean_probability, p.voxels[0].tolist()))
    return preds


def label_gt(gt_mask):
    """(labels, n) of the ground-truth mask under 26-connectivity."""
    labels, n = ndimage.label(np.asarray(gt_mask, dtype=bool), structure=N26)
    return labels, int(n)


def match_lesions(preds, gt_mask, spacing_mm, tol_mm=MATCH_TOL_MM):
    """Greedy one-to-one matching in descending score order.

    A prediction is a TP candidate when its center of mass is within tol_mm of
    the nearest GT voxel center; later candidates on an already-claimed GT
    component stay false positives.  Returns (matched preds, n_gt)."""
    gt_labels, n_gt = label_gt(gt_mask)
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    gt_vox = np.argwhere(gt_labels > 0)
    gt_mm = gt_vox * spacing

    claimed = set()
    out = []
    for p in sorted(preds, key=lambda p: (-p.mean_probability, p.voxels[0].tolist())):
        matched = None
        if n_gt > 0:
            d2 = np.sum((gt_mm - np.asarray(p.center_of_mass_mm)) ** 2, axis=1)
            nearest = int(np.argmin(d2))
            if d2[nearest] <= tol_mm * tol_mm:
                comp = int(gt_labels[tuple(gt_vox[nearest])])
                if comp not in claimed:
                    claimed.add(comp)
                    matched = comp
        out.append(LesionPrediction(voxels=p.voxels, center_of_mass_mm=p.center_of_mass_mm,
                                    mean_probability=p.mean_probability, matched_gt=matched))
    return out, n_gt


def pr_and_map(matched_preds, n_gt):
    """PR points over the unique score sweep, all-point interpolated AP, and
    recall at the base threshold.  No ground truth defines mAP as 0."""
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    report = DetectionReport(predictions=list(matched_preds), n_gt=int(n_gt))
    if n_gt == 0:
        report.map_score = 0.0
        report.max_sensitivity = None
        return report

    scores = np.array([p.mean_probability for p in matched_preds], dtype=np.float64)
    is_tp = np.array([p.matched_gt is not None for p in matched_preds], dtype=bool)
    if scores.size == 0:
        report.map_score = 0.0
        report.max_sensitivity = 0.0
        return report

    points = []
    for t in sorted(set(scores.tolist()), reverse=True):
        keep = scores >= t
        tp = int(np.count_nonzero(is_tp & keep))
        n_kept = int(np.count_nonzero(keep))
        points.append((tp / n_gt, tp / n_kept))
    report.pr_points = points

    # all-point interpolation: precision envelope from the high-recall end
    ap = 0.0
    prev_recall = 0.0
    for i, (recall, _) in enumerate(points):
        envelope = max(p for _, p in points[i:])
        ap += (recall - prev_recall) * envelope
        prev_recall = recall
    report.map_score = float(ap)
    report.max_sensitivity = float(np.count_nonzero(is_tp)) / n_gt
    return report


def dice(pred_voxels, gt_voxels):
    """2|A∩B| / (|A|+|B|) over voxel index sets; undefined for two empty sets."""
    a = {tuple(v) for v in np.asarray(pred_voxels).reshape(-1, 3)} if len(pred_voxels) else set()
    b = {tuple(v) for v in np.asarray(gt_voxels).reshape(-1, 3)} if len(gt_voxels) else set()
    if not a and not b:
        raise ValueError("DICE undefined for two empty sets")
    return 2.0 * len(a & b) / (len(a) + len(b))


def tp_dice_scores(matched_preds, gt_mask):
    """DICE of every true positive against its claimed GT component."""
    gt_labels, _ = label_gt(gt_mask)
    scores = []
    for p in matched_preds:
        if p.matched_gt is None:
            continue
        gt_vox = np.argwhere(gt_labels == p.matched_gt)
        scores.append(dice(p.voxels, gt_vox))
    return scores


def evaluate_volume(prob_volume, gt_mask, spacing_mm,
                    threshold=BASE_THRESHOLD, tol_mm=MATCH_TOL_MM):
    """Full per-patient pipeline: extract, match, PR/mAP, TP DICE."""
    if gt_mask is None:
        gt_mask = np.zeros(np.asarray(prob_volume).shape, dtype=bool)
    preds = extract_lesions(prob_volume, spacing_mm, threshold=threshold)
    matched, n_gt = match_lesions(preds, gt_mask, spacing_mm, tol_mm=tol_mm)
    report = pr_and_map(matched, n_gt)
    report.tp_dice = tp_dice_scores(matched, gt_mask)
    report.tp_dice_mean = float(np.mean(report.tp_dice)) if report.tp_dice else None
    return report


def pooled_report(per_patient_reports):
    """Pool lesion predictions across patients (GT matching stays per-patient)."""
    preds = [p for r in per_patient_reports for p in r.predictions]
    n_gt = sum(r.n_gt for r in per_patient_reports)
    # matched_gt ids collide across patients; pooling only needs TP/FP flags,
    # which the per-patient matching already fixed.
    report = pr_and_map(preds, n_gt)
    report.tp_dice = [d for r in per_patient_reports for d in r.tp_dice]
    report.tp_dice_mean = float(np.mean(report.tp_dice)) if report.tp_dice else None
    return report


def bootstrap_ci(per_patient_reports, n_resamples=1000, seed=0):
    """Percentile bootstrap (2.5/97.5) of the pooled mAP over patients."""
    if len(per_patient_reports) < 2:
        raise ValueError("bootstrap needs at least 2 patients")
    rng = np.random.default_rng(seed)
    n = len(per_patient_reports)
    stats = np.empty(n_resamples, dtype=np.float64)
    for b in range(n_resamples):
        picks = rng.integers(0, n, size=n)
        stats[b] = pooled_report([per_patient_reports[i] for i in picks]).map_score
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return float(lo), float(hi)


def report_to_json(per_patient, pooled, ci=None, extra=None):
    """Deterministic JSON text for a full evaluation."""
    doc = {
        "pooled": pooled.to_dict(),
        "per_patient": {pid: r.to_dict() for pid, r in per_patient.items()},
    }
    if ci is not None:
        doc["pooled"]["map_ci_95"] = [ci[0], ci[1]]
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
