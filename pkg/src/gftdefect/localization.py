"""Sliding-window defect heatmaps and pixel-level scoring against masks."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy.stats import rankdata

from .cnn import defect_score, forward
from .errors import ShapeError, UndefinedMetricError
from .spectral import gft_forward


@dataclass
class Heatmap:
    scores: np.ndarray  # (rows, cols) of p_defect
    stride: int
    patch_size: int = 64
    image_shape: tuple = None

    @property
    def shape(self):
        return self.scores.shape


def heatmap_dims(size, stride, patch_size=64):
    return (size - patch_size) // stride + 1


def localize(model, spectrum, image, stride=4, batch_size=256):
    """Defect score of every window at ``stride``, row-major over top-left
    positions. Scores match :func:`gftdefect.cnn.predict` on each patch."""
    img = np.asarray(getattr(image, "image", image), dtype=np.float64)
    patch = spectrum.height
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if img.ndim != 2 or img.shape[0] < patch or img.shape[1] < patch:
        raise ShapeError(f"image {img.shape} is smaller than the {patch}px window")
    windows = sliding_window_view(img, (patch, spectrum.width))[::stride, ::stride]
    rows, cols = windows.shape[:2]
    flat = windows.reshape(rows * cols, patch, spectrum.width)
    scores = np.empty(rows * cols)
    for start in range(0, len(flat), batch_size):
        feats = gft_forward(spectrum, flat[start : start + batch_size])
        scores[start : start + batch_size] = defect_score(forward(model, feats, batch_size=batch_size), model.arch.output)
    return Heatmap(scores.reshape(rows, cols), stride, patch, img.shape)


def upsample_heatmap(h, target_shape=None):
    """Per-pixel mean of the scores of all windows covering that pixel.

    Pixels no window covers (bottom/right margins when the stride does not
    divide the free range) copy the nearest covered row/column.
    """
    target_shape = tuple(target_shape or h.image_shape)
    rows, cols = h.scores.shape
    p, s = h.patch_size, h.stride
    H, W = target_shape
    acc = np.zeros((H + 1, W + 1))
    cnt = np.zeros((H + 1, W + 1))
    r0 = np.repeat(np.arange(rows) * s, cols)
    c0 = np.tile(np.arange(cols) * s, rows)
    v = h.scores.ravel()
    for dr, dc, sign in ((0, 0, 1), (p, 0, -1), (0, p, -1), (p, p, 1)):
        np.add.at(acc, (np.minimum(r0 + dr, H), np.minimum(c0 + dc, W)), sign * v)
        np.add.at(cnt, (np.minimum(r0 + dr, H), np.minimum(c0 + dc, W)), sign)
    acc = acc.cumsum(0).cumsum(1)[:H, :W]
    cnt = np.rint(cnt.cumsum(0).cumsum(1)[:H, :W])
    out = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    last_r = min(H, (rows - 1) * s + p)
    last_c = min(W, (cols - 1) * s + p)
    out[last_r:, :] = out[last_r - 1, :]
    out[:, last_c:] = out[:, last_c - 1 : last_c]
    return out


# --------------------------------------------------------------------------
# metrics


def _prep(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.shape[0]} scores vs {labels.shape[0]} labels")
    return scores, labels


def auroc(scores, labels):
    """P(random positive outranks random negative), ties counted 1/2."""
    scores, labels = _prep(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(scores)
    return (ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def _threshold_counts(scores, labels):
    """tp/fp when predicting ``score >= t`` for each distinct t, descending."""
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def aupr(scores, labels):
    """Average precision: sum over distinct thresholds (descending) of
    ``(recall_k - recall_{k-1}) * precision_k``."""
    scores, labels = _prep(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive")
    _, tp, fp = _threshold_counts(scores, labels)
    dtp = np.diff(tp, prepend=0)
    return math.fsum((dtp / n_pos) * (tp / (tp + fp)))


def best_f1(scores, labels):
    """``(f1, threshold)`` maximizing F1 over distinct score thresholds."""
    scores, labels = _prep(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("F1 needs at least one positive")
    thr, tp, fp = _threshold_counts(scores, labels)
    f1 = 2 * tp / (2 * tp + fp + (n_pos - tp))
    i = int(np.argmax(f1))
    return float(f1[i]), float(thr[i])


def f1_at_threshold(scores, labels, policy="best"):
    """F1 under ``policy``: ``"best"`` sweeps all thresholds, a number is a fixed cut (``score >= t``)."""
    if policy == "best":
        return best_f1(scores, labels)[0]
    scores, labels = _prep(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("F1 needs at least one positive")
    pred = scores >= float(policy)
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    return 2 * tp / (2 * tp + fp + (n_pos - tp))


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # per-image dicts
    image_level: dict = field(default_factory=dict)

    def aggregate(self):
        out = {}
        for key in ("auroc", "aupr", "f1"):
            vals = np.array([r[key] for r in self.rows if r.get(key) is not None], dtype=float)
            if len(vals):
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                out[key] = {"mean": float(vals.mean()), "q1": float(q1), "median": float(med), "q3": float(q3)}
        return out

    def write(self, csv_path, json_path=None):
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "label", "auroc", "aupr", "f1", "f1_threshold", "max_score"])
            for r in self.rows:
                w.writerow([r["image_id"], r["label"]] + [_fmt(r.get(k)) for k in ("auroc", "aupr", "f1", "f1_threshold", "max_score")])
        if json_path:
            summary = {"pixel_level": self.aggregate(), "image_level": self.image_level, "f1_policy": "best-threshold"}
            Path(json_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    return "" if v is None else repr(float(v))


def score_image(heatmap, mask):
    """Pixel-level metrics of one upsampled heatmap against a binary mask."""
    pix = upsample_heatmap(heatmap, mask.shape)
    f1, thr = best_f1(pix, mask)
    return {"auroc": auroc(pix, mask), "aupr": aupr(pix, mask), "f1": f1, "f1_threshold": thr}


def evaluate_localization(model, spectrum, images, stride=4, heatmap_callback=None, batch_size=256):
    """Pixel-level metrics on images with a non-empty mask, image-level
    metrics (max heatmap score vs label) over all images."""
    report = MetricReport()
    for im in images:
        h = localize(model, spectrum, im, stride, batch_size)
        if heatmap_callback:
            heatmap_callback(im, h)
        row = {"image_id": im.image_id, "label": int(im.label), "max_score": float(h.scores.max())}
        if im.mask is not None and im.mask.any():
            row.update(score_image(h, im.mask))
        report.rows.append(row)
    labels = np.array([r["label"] for r in report.rows])
    if 0 < labels.sum() < len(labels):
        maxs = np.array([r["max_score"] for r in report.rows])
        f1, thr = best_f1(maxs, labels)
        report.image_level = {"auroc": auroc(maxs, labels), "aupr": aupr(maxs, labels), "f1": f1, "f1_threshold": thr}
    return report


def save_heatmap(h, png_path, txt_path=None):
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(h.scores, 0, 1) * 255).astype(np.uint8), mode="L").save(png_path)
    if txt_path:
        np.savetxt(txt_path, h.scores, fmt="%.17g")


def load_heatmap_txt(path, stride, patch_size=64):
    return Heatmap(np.atleast_2d(np.loadtxt(path)), stride, patch_size)
