"""Pixel metrics for binary crack maps: F1, two-class mIoU, ODS and OIS."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

THRESHOLDS = np.round(np.arange(1, 100) / 100.0, 2)


def _stack(preds, masks) -> Tuple[np.ndarray, np.ndarray]:
    p = [np.asarray(x, dtype=np.float64).reshape(-1) for x in _as_list(preds)]
    g = [np.asarray(x).reshape(-1) >= 0.5 for x in _as_list(masks)]
    if len(p) != len(g):
        raise ValueError(f"{len(p)} predictions but {len(g)} masks")
    for a, b in zip(p, g):
        if a.shape != b.shape:
            raise ValueError(f"prediction of {a.size} pixels against a mask of {b.size}")
    return p, g


def _as_list(x) -> list:
    if isinstance(x, np.ndarray):
        return [x]
    return list(x)


def confusion(pred: np.ndarray, truth: np.ndarray, threshold: float) -> Tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)``; a pixel is predicted positive when ``pred >= threshold``."""
    pos = np.asarray(pred) >= threshold
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.count_nonzero(pos & truth))
    fp = int(np.count_nonzero(pos & ~truth))
    fn = int(np.count_nonzero(~pos & truth))
    return tp, fp, fn, int(truth.size) - tp - fp - fn


def f1_from_counts(tp, fp, fn):
    """``2PR / (P + R)``, written as ``2tp / (2tp + fp + fn)``; 1 when both sides are empty."""
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom == 0, 1.0, 2 * tp / np.where(denom == 0, 1, denom))


def _iou(inter, union) -> float:
    return 1.0 if union == 0 else inter / union


def miou_from_counts(tp, fp, fn, tn) -> float:
    return 0.5 * (_iou(tp, tp + fp + fn) + _iou(tn, tn + fp + fn))


def f1_at(preds, masks, threshold: float = 0.5) -> float:
    """F1 over all pixels of all images pooled together."""
    p, g = _stack(preds, masks)
    tp, fp, fn, _ = confusion(np.concatenate(p), np.concatenate(g), threshold)
    return float(f1_from_counts(tp, fp, fn))


def miou(preds, masks, threshold: float = 0.5) -> float:
    """Mean of crack IoU and background IoU over pooled pixels."""
    p, g = _stack(preds, masks)
    return float(miou_from_counts(*confusion(np.concatenate(p), np.concatenate(g), threshold)))


def sweep_counts(pred: np.ndarray, truth: np.ndarray, thresholds: np.ndarray = THRESHOLDS) -> np.ndarray:
    """``[T, 3]`` array of ``(tp, fp, fn)`` per threshold, by sorting once."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=bool).reshape(-1)
    order = np.argsort(pred, kind="stable")
    sp, st = pred[order], truth[order]
    # pixels at index >= cut are predicted positive
    cut = np.searchsorted(sp, thresholds, side="left")
    pos_truth_above = np.concatenate([np.cumsum(st[::-1])[::-1], [0]])
    tp = pos_truth_above[cut]
    fp = (len(sp) - cut) - tp
    fn = int(st.sum()) - tp
    return np.stack([tp, fp, fn], axis=1)


def ods_ois(preds, masks, thresholds: Sequence[float] = THRESHOLDS) -> Tuple[float, float]:
    """ODS: best dataset-pooled F1 over one shared threshold. OIS: mean of per-image best F1."""
    p, g = _stack(preds, masks)
    if not p:
        raise ValueError("ods_ois needs at least one image")
    thr = np.asarray(thresholds, dtype=np.float64)
    per_image = np.stack([sweep_counts(a, b, thr) for a, b in zip(p, g)])
    pooled = per_image.sum(axis=0)
    ods = float(f1_from_counts(pooled[:, 0], pooled[:, 1], pooled[:, 2]).max())
    best = f1_from_counts(per_image[..., 0], per_image[..., 1], per_image[..., 2]).max(axis=1)
    return ods, float(best.mean())


def metrics_report(preds, masks, ids: Sequence[str] = None, threshold: float = 0.5) -> dict:
    """Dataset metrics plus per-image records, all in [0, 1]."""
    p, g = _stack(preds, masks)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(p))]
    ods, ois = ods_ois(p, g)
    records = []
    for name, a, b in zip(ids, p, g):
        counts = confusion(a, b, threshold)
        sweep = sweep_counts(a, b)
        f1s = f1_from_counts(sweep[:, 0], sweep[:, 1], sweep[:, 2])
        records.append({
            "id": name,
            "miou": float(miou_from_counts(*counts)),
            "f1": float(f1_from_counts(*counts[:3])),
            "best_f1": float(f1s.max()),
            "best_threshold": float(THRESHOLDS[int(np.argmax(f1s))]),
        })
    return {
        "miou": miou(p, g, threshold),
        "ods": ods,
        "ois": ois,
        "f1": f1_at(p, g, threshold),
        "per_image": records,
    }
