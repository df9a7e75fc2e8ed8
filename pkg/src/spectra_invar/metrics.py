"""Evaluation measures: R^2, accuracy, MMD, linear domain probe, detection recall/mAP."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist


class UndefinedVarianceError(ValueError):
    pass


class MalformedBoxError(ValueError):
    pass


def r_squared(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape or y.size < 2:
        raise ValueError(f"r_squared needs two equal-length vectors of >= 2 values, got {y.size} and {y_hat.size}")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedVarianceError("R^2 is undefined for constant targets")
    return float(1.0 - np.sum((y - y_hat) ** 2) / ss_tot)


def overall_accuracy(labels, preds):
    labels, preds = np.asarray(labels), np.asarray(preds)
    if labels.shape != preds.shape or labels.size == 0:
        raise ValueError("labels and predictions must be non-empty and equally long")
    return float(np.mean(labels == preds))


def median_bandwidth(a, b):
    pooled = np.vstack([a, b])
    d = pdist(pooled)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def mmd2(a, b, bandwidth=None, biased=False):
    """Squared MMD with a Gaussian kernel exp(-d^2 / (2 h^2)).

    The default is the unbiased estimate; for equal sample sizes this is the
    U-statistic that also drops the paired cross terms k(a_i, b_i). Sums are
    exactly rounded so ``mmd2(a, b) == mmd2(b, a)`` bit for bit.
    """
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mmd2 needs non-empty samples")
    if not biased and (len(a) < 2 or len(b) < 2):
        raise ValueError("unbiased mmd2 needs at least two samples per set")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    gamma = 1.0 / (2.0 * h * h)
    kaa = np.exp(-gamma * cdist(a, a, "sqeuclidean"))
    kbb = np.exp(-gamma * cdist(b, b, "sqeuclidean"))
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    m, n = len(a), len(b)
    fs = math.fsum
    if biased:
        return fs([fs(kaa.ravel()) / (m * m), fs(kbb.ravel()) / (n * n), -2.0 * fs(kab.ravel()) / (m * n)])
    saa = (fs(kaa.ravel()) - fs(np.diag(kaa))) / (m * (m - 1))
    sbb = (fs(kbb.ravel()) - fs(np.diag(kbb))) / (n * (n - 1))
    if m == n:
        sab = (fs(kab.ravel()) - fs(np.diag(kab))) / (m * (m - 1))
    else:
        sab = fs(kab.ravel()) / (m * n)
    return fs([saa, sbb, -2.0 * sab])


def mean_pairwise_mmd(feats, domains, bandwidth=None):
    """Average unbiased MMD^2 over all domain pairs, plus the per-pair values."""
    feats = np.asarray(feats, dtype=np.float64).reshape(len(feats), -1)
    domains = np.asarray(domains)
    names = sorted(set(domains.tolist()))
    pairs = {}
    for i, da in enumerate(names):
        for db in names[i + 1:]:
            pairs[f"{da}|{db}"] = mmd2(feats[domains == da], feats[domains == db], bandwidth)
    return float(np.mean(list(pairs.values()))), pairs


def domain_probe(train_feats, train_domains, test_feats, test_domains, l2=1e-2, steps=500, lr=0.5):
    """Accuracy of an L2-regularised multinomial logistic probe fit by full-batch gradient descent."""
    xtr = np.asarray(train_feats, dtype=np.float64).reshape(len(train_feats), -1)
    xte = np.asarray(test_feats, dtype=np.float64).reshape(len(test_feats), -1)
    classes = sorted(set(np.asarray(train_domains).tolist()))
    if len(classes) < 2:
        raise ValueError("domain probe needs at least two domains")
    index = {c: i for i, c in enumerate(classes)}
    ytr = np.array([index[d] for d in train_domains])
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0)
    sd[sd == 0] = 1.0
    xtr = (xtr - mu) / sd
    xte = (xte - mu) / sd
    n, d = xtr.shape
    k = len(classes)
    w = np.zeros((d, k))
    b = np.zeros(k)
    onehot = np.eye(k)[ytr]
    step = lr / max(1.0, d / n)
    for _ in range(steps):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= step * (xtr.T @ g + l2 * w)
        b -= step * g.sum(axis=0)
    pred = np.argmax(xte @ w + b, axis=1)
    truth = np.array([index.get(t, -1) for t in test_domains])
    return float(np.mean(pred == truth))


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def _check_box(box):
    if len(box) != 4 or not (box[2] > box[0] and box[3] > box[1]):
        raise MalformedBoxError(f"box must be [x0, y0, x1, y1] with x1>x0 and y1>y0, got {list(box)}")


IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def _ap_101(tp_flags, n_gt):
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1 - np.asarray(tp_flags))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # monotone precision envelope
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    total = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        total += precision[idx] if idx < len(precision) else 0.0
    return total / 101.0


def detection_eval(gt_boxes, predictions):
    """Single-class recall at IoU 0.5 and COCO-style mAP@0.5:0.95.

    ``gt_boxes`` maps image_id -> list of boxes; ``predictions`` is a list of
    dicts {image_id, bbox, score}. Equal scores keep input order.
    """
    gt = {k: [list(map(float, b)) for b in v] for k, v in gt_boxes.items()}
    for boxes in gt.values():
        for box in boxes:
            _check_box(box)
    preds = []
    for i, p in enumerate(predictions):
        _check_box(p["bbox"])
        preds.append((-float(p["score"]), i, p["image_id"], list(map(float, p["bbox"]))))
    preds.sort(key=lambda t: (t[0], t[1]))
    n_gt = sum(len(v) for v in gt.values())
    aps, recall50 = [], 0.0
    for tau in IOU_THRESHOLDS:
        used = {k: [False] * len(v) for k, v in gt.items()}
        flags = []
        for _, _, img, box in preds:
            best, best_j = -1.0, -1
            for j, g in enumerate(gt.get(img, [])):
                if used[img][j]:
                    continue
                iou = box_iou(box, g)
                if iou >= tau and iou > best:
                    best, best_j = iou, j
            if best_j >= 0:
                used[img][best_j] = True
            flags.append(1 if best_j >= 0 else 0)
        aps.append(_ap_101(flags, n_gt) if flags else 0.0)
        if tau == 0.5:
            recall50 = (sum(flags) / n_gt) if n_gt else 0.0
    return {"recall": float(recall50), "mAP_50_95": float(np.mean(aps))}


@dataclass
class EvalReport:
    r2: dict = field(default_factory=dict)
    grape_oa: float | None = None
    mmd: dict = field(default_factory=dict)
    probe_accuracy: float | None = None
    detection: dict | None = None
    model: str = ""
    scenario: str = ""
    target_domains: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["r2", "grape_oa", "mmd", "probe_accuracy", "model", "scenario", "target_domains"],
    "properties": {
        "r2": {"type": "object", "additionalProperties": {"type": "number", "maximum": 1.0}},
        "grape_oa": {"type": ["number", "null"], "minimum": 0.0, "maximum": 1.0},
        "mmd": {"type": "object", "additionalProperties": {"type": "number"}},
        "probe_accuracy": {"type": ["number", "null"], "minimum": 0.0, "maximum": 1.0},
        "detection": {
            "type": ["object", "null"],
            "properties": {
                "recall": {"type": "number", "minimum": 0.0, "maximum": 1.0},
                "mAP_50_95": {"type": "number", "minimum": 0.0, "maximum": 1.0},
            },
        },
        "model": {"type": "string"},
        "scenario": {"type": "string"},
        "target_domains": {"type": "array", "items": {"type": "string"}},
    },
}
