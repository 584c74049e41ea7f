"""Shapley-value attribution over spectral coefficients.

Three estimators share one result type:

* ``shapley_exact`` enumerates every coalition (cost 2^d, oracle use only);
* ``shapley_sampled`` averages marginal contributions over random orderings;
* ``deeplift_rescale`` backpropagates difference-from-reference multipliers
  through a :class:`~gftdefect.cnn.CnnModel` (DeepSHAP-style).

Exact and sampled Shapley use a baseline vector (default zeros). DeepLIFT uses
a background set of references and averages over them, so its base value is
the mean reference output.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.stats import mannwhitneyu

from .cnn import _act, _output, forward, forward_cache, backward
from .data import DEFECT, LABEL_NAMES, NON_DEFECT
from .errors import ConfigError, CostRefusalError, EmptyClassError, EmptyInputError, ShapeError

METHODS = ("exact", "sampled", "deeplift")
RESCALE_EPS = 1e-9


@dataclass
class AttributionVector:
    values: np.ndarray  # phi per attributed feature
    base_value: float  # phi_0
    method: str
    output: float = float("nan")  # f(X)
    features: np.ndarray = None  # attributed indices; None means all
    std_error: np.ndarray = None  # sampled method only

    def __len__(self):
        return len(self.values)

    def efficiency_gap(self):
        """``phi_0 + sum(phi) - f(X)``."""
        return self.base_value + math.fsum(self.values) - self.output

    def dense(self, n):
        """Values scattered into a length-``n`` vector (zeros elsewhere)."""
        if self.features is None:
            return np.asarray(self.values, dtype=np.float64)
        out = np.zeros(n)
        out[self.features] = self.values
        return out


def model_function(model, target="probability", unit=1, batch_size=512):
    """``f(batch) -> outputs`` of one output unit of a CNN on raw spectral rows.

    ``target="logit"`` explains the pre-activation of the unit instead.
    """
    m64 = model.astype(np.float64)

    def f(s):
        s = np.atleast_2d(s)
        if target == "logit":
            x = m64.standardize(s)
            return np.concatenate(
                [forward_cache(m64, x[i : i + batch_size]).z4[:, unit] for i in range(0, len(x), batch_size)]
            )
        return forward(m64, s, batch_size=batch_size)[:, unit]

    return f


def _resolve(x, baseline, features):
    x = np.asarray(x, dtype=np.float64).ravel()
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64).ravel()
    if baseline.shape != x.shape:
        raise ShapeError(f"baseline length {baseline.size} != input length {x.size}")
    feats = np.arange(x.size) if features is None else np.asarray(features, dtype=np.int64).ravel()
    if len(np.unique(feats)) != len(feats) or (len(feats) and (feats.min() < 0 or feats.max() >= x.size)):
        raise ShapeError("feature indices must be distinct and within the input")
    return x, baseline, feats


def shapley_exact(f, x, baseline=None, features=None, limit=20, chunk=8192):
    """Exact Shapley values of ``features`` (default: all) by enumerating all
    2^d coalitions. Features outside ``features`` stay at their value in ``x``;
    excluded features of a coalition take the baseline value."""
    x, baseline, feats = _resolve(x, baseline, features)
    d = len(feats)
    if d > limit:
        raise CostRefusalError(
            f"exact Shapley over {d} features needs 2^{d} model evaluations (limit {limit}); "
            "use the deeplift or sampled method, or attribute a feature subset"
        )
    n_coal = 1 << d
    masks = np.arange(n_coal, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(d)) & 1).astype(bool)
    values = np.empty(n_coal)
    for start in range(0, n_coal, chunk):
        b = bits[start : start + chunk]
        rows = np.tile(x, (len(b), 1))
        rows[:, feats] = np.where(b, x[feats], baseline[feats])
        values[start : start + chunk] = f(rows)
    size = bits.sum(axis=1)
    # weight |R|! (d - |R| - 1)! / d! for a coalition R not containing i
    w = np.array([math.factorial(r) * math.factorial(d - r - 1) / math.factorial(d) for r in range(d)]) if d else []
    phi = np.empty(d)
    for i in range(d):
        without = masks[~bits[:, i]]
        phi[i] = math.fsum(w[size[without]] * (values[without | (1 << i)] - values[without]))
    return AttributionVector(phi, float(values[0]), "exact", float(values[-1]), None if features is None else feats)


def shapley_sampled(f, x, baseline=None, num_permutations=1000, seed=0, features=None, max_rows=65536):
    """Monte-Carlo permutation estimate with per-feature standard errors.

    Each ordering adds features one at a time from the baseline to ``x``; a
    feature's sample is its marginal change of ``f``. Deterministic under
    ``seed``.
    """
    if num_permutations < 1:
        raise ConfigError("num_permutations must be >= 1")
    x, baseline, feats = _resolve(x, baseline, features)
    d = len(feats)
    rng = np.random.default_rng(seed)
    samples = np.empty((num_permutations, d))
    per_chunk = max(1, max_rows // (d + 1))
    start_row = x.copy()
    start_row[feats] = baseline[feats]
    for p0 in range(0, num_permutations, per_chunk):
        np_ = min(per_chunk, num_permutations - p0)
        orders = np.argsort(rng.random((np_, d)), axis=1)
        # rows[p, j] = start with the first j features of ordering p switched on
        steps = np.zeros((np_, d + 1, d), dtype=bool)
        ranks = np.argsort(orders, axis=1)
        steps[:, 1:, :] = ranks[:, None, :] < np.arange(1, d + 1)[None, :, None]
        rows = np.broadcast_to(start_row, (np_, d + 1, x.size)).copy()
        rows[:, :, feats] = np.where(steps, x[feats], baseline[feats])
        vals = f(rows.reshape(-1, x.size)).reshape(np_, d + 1)
        marg = np.diff(vals, axis=1)  # marginal of the j-th added feature
        samples[p0 : p0 + np_][np.arange(np_)[:, None], orders] = marg
    phi = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(num_permutations) if num_permutations > 1 else np.full(d, np.inf)
    ends = f(np.stack([start_row, x]))
    return AttributionVector(
        phi, float(ends[0]), "sampled", float(ends[1]), None if features is None else feats, se
    )


def _rescale(zx, zr, fn, slope_at):
    """DeepLIFT rescale multipliers ``(fn(zx) - fn(zr)) / (zx - zr)`` with the
    derivative at ``zx`` where the difference is below ``RESCALE_EPS``."""
    dz = zx - zr
    small = np.abs(dz) < RESCALE_EPS
    safe = np.where(small, 1.0, dz)
    return np.where(small, slope_at(np.broadcast_to(zx, dz.shape)), (fn(zx) - fn(zr)) / safe)


def deeplift_rescale(model, x, background, target="probability", unit=1, per_reference=False):
    """DeepLIFT (rescale rule) attributions of one output unit, averaged over
    the references in ``background``.

    Per reference r, ``sum(phi_r) = f(x) - f(r)`` up to rounding; the returned
    base value is the mean reference output. With ``per_reference`` the
    ``(R, N)`` per-reference attributions and the ``R`` reference outputs are
    returned as well.
    """
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if background.shape[0] == 0:
        raise EmptyInputError("deeplift needs at least one reference input")
    x = np.asarray(x, dtype=np.float64).ravel()
    a = model.arch
    if x.size != a.input_length or background.shape[1] != a.input_length:
        raise ShapeError(f"inputs must have length {a.input_length}")
    m = model.astype(np.float64)
    cx = forward_cache(m, m.standardize(x[None]))
    cr = forward_cache(m, m.standardize(background))
    if a.activation == "relu":
        relu = lambda z: _act(z, "relu")
        step = lambda z: (z > 0).astype(np.float64)
        slopes = tuple(_rescale(zx, zr, relu, step) for zx, zr in ((cx.z1, cr.z1), (cx.z2, cr.z2), (cx.z3, cr.z3)))
    else:
        slopes = (None, None, None)
    if target == "logit" or a.output == "identity":
        out_slope = np.ones(len(background))
        fx, fr = cx.z4[0, unit], cr.z4[:, unit]
    elif a.output == "sigmoid":
        sig = lambda z: _output(z, "sigmoid")
        out_slope = _rescale(cx.z4[:, unit], cr.z4[:, unit], sig, lambda z: sig(z) * (1 - sig(z)))
        fx, fr = cx.out[0, unit], cr.out[:, unit]
    else:
        raise ConfigError("deeplift supports sigmoid or identity outputs (softmax couples the units)")
    d_z4 = np.zeros((len(background), a.n_outputs))
    d_z4[:, unit] = out_slope
    _, d_xstd = backward(m, cr, d_z4, slopes=slopes, param_grads=False, input_grad=True)
    scale = 1.0 if m.scaler_std is None else m.scaler_std
    per_ref = (d_xstd / scale) * (x[None] - background)
    av = AttributionVector(per_ref.mean(axis=0), float(np.mean(fr)), "deeplift", float(fx))
    return (av, per_ref, np.asarray(fr, dtype=np.float64)) if per_reference else av


def explain(method, model, x, background=None, baseline=None, num_permutations=1000, seed=0, features=None, limit=20):
    """Dispatch to one estimator with the CNN's defect output as target."""
    if method == "deeplift":
        if background is None:
            raise ConfigError("deeplift needs a background set")
        return deeplift_rescale(model, x, background)
    f = model_function(model)
    if method == "exact":
        return shapley_exact(f, x, baseline, features, limit)
    if method == "sampled":
        return shapley_sampled(f, x, baseline, num_permutations, seed, features)
    raise ConfigError(f"unknown attribution method {method!r}; choose from {METHODS}")


def select_background(features, labels, size=500, seed=0):
    """Seeded class-stratified sample of ``size`` rows (all rows if fewer)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyInputError("no rows to draw a background from")
    if size >= len(labels):
        return np.asarray(features)
    rng = np.random.default_rng(seed)
    picks = []
    classes = np.unique(labels)
    counts = {c: int(round(size * np.mean(labels == c))) for c in classes}
    counts[classes[-1]] = size - sum(counts[c] for c in classes[:-1])
    for c in classes:
        rows = np.flatnonzero(labels == c)
        picks.append(np.sort(rng.choice(rows, size=min(counts[c], len(rows)), replace=False)))
    return np.asarray(features)[np.sort(np.concatenate(picks))]


# --------------------------------------------------------------------------
# aggregation


@dataclass
class GlobalImportance:
    values: np.ndarray  # sum_j |phi^(j)|
    count: int  # number of attribution vectors M
    top_k: np.ndarray  # indices by descending importance, ties by index

    def lowest_frequency_hits(self, n_low):
        return int(np.sum(self.top_k < n_low))


def global_importance(attributions, k=10):
    """Elementwise sum of absolute attributions with a top-``k`` ranking."""
    if not attributions:
        raise EmptyInputError("no attributions to aggregate")
    rows = [np.asarray(getattr(a, "values", a), dtype=np.float64) for a in attributions]
    n = len(rows[0])
    if any(len(r) != n for r in rows):
        raise ShapeError("attribution vectors differ in length")
    g = np.sum(np.abs(np.stack(rows)), axis=0)
    order = np.lexsort((np.arange(n), -g))
    return GlobalImportance(g, len(rows), order[: min(k, n)])


def low_frequency_report(features, labels, k=16):
    """Per-class median/quartiles and RMS of coefficients ``s_0..s_{k-1}`` plus
    a two-sided Mann-Whitney test on ``s_0`` between the classes."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if not 1 <= k <= features.shape[1]:
        raise ShapeError(f"k must lie in [1, {features.shape[1]}], got {k}")
    report = {"k": k, "classes": {}}
    for cls in (NON_DEFECT, DEFECT):
        rows = features[labels == cls, :k]
        if len(rows) == 0:
            raise EmptyClassError(f"no {LABEL_NAMES[cls]} rows")
        q1, med, q3 = np.percentile(rows, [25, 50, 75], axis=0)
        report["classes"][LABEL_NAMES[cls]] = {
            "count": len(rows),
            "median": med,
            "q1": q1,
            "q3": q3,
            "rms": np.sqrt(np.mean(rows**2, axis=0)),
        }
    a = features[labels == DEFECT, 0]
    b = features[labels == NON_DEFECT, 0]
    test = mannwhitneyu(a, b, alternative="two-sided")
    report["s0_test"] = {"statistic": float(test.statistic), "p_value": float(test.pvalue), "test": "mann-whitney-u"}
    return report


# --------------------------------------------------------------------------
# export


def write_attributions(path, records):
    """CSV with one row per ``(image_id, AttributionVector)``: id, method,
    phi0, f(X), then phi for every attributed index (header ``phi_<index>``)."""
    if not records:
        raise EmptyInputError("no attribution records")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    first = records[0][1]
    idx = np.arange(len(first.values)) if first.features is None else first.features
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "method", "phi0", "f_x"] + [f"phi_{i}" for i in idx])
        for image_id, av in records:
            if len(av.values) != len(idx):
                raise ShapeError("all records must attribute the same features")
            w.writerow([image_id, av.method, repr(av.base_value), repr(av.output)] + [repr(float(v)) for v in av.values])


def read_attributions(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    idx = np.array([int(h.split("_", 1)[1]) for h in rows[0][4:]])
    out = []
    for r in rows[1:]:
        vals = np.array([float(v) for v in r[4:]])
        out.append((r[0], AttributionVector(vals, float(r[2]), r[1], float(r[3]), idx)))
    return out


def write_top_k(path, importance, k=None):
    k = len(importance.top_k) if k is None else k
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "index", "importance"])
        for rank, i in enumerate(importance.top_k[:k], 1):
            w.writerow([rank, int(i), repr(float(importance.values[i]))])


def save_bar_plot(path, values, indices, height=200, bar=16):
    """Plain grayscale bar chart of ``values[indices]`` (largest bar full height)."""
    vals = np.abs(np.asarray(values, dtype=np.float64)[indices])
    top = vals.max() if len(vals) and vals.max() > 0 else 1.0
    img = Image.new("L", (max(1, bar * len(vals)), height), 255)
    draw = ImageDraw.Draw(img)
    for j, v in enumerate(vals):
        h = int(round((height - 1) * v / top))
        draw.rectangle([j * bar + 2, height - 1 - h, (j + 1) * bar - 3, height - 1], fill=0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
