"""Images, synthetic turning textures, patches and spectral datasets.

Seeding rule: image ``i`` of a synthetic corpus is generated with
``default_rng([seed, 0, i])`` and its patches are drawn with
``default_rng([seed, 1, i])``, so every image is reproducible on its own and
corpora can be generated in any order or in parallel.
"""

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .containers import read_container, write_container
from .errors import (
    CompatibilityError,
    ConfigError,
    EmptyInputError,
    FormatError,
    InputOutputError,
    SamplingExhaustedError,
    ShapeError,
)
from .spectral import gft_forward

NON_DEFECT, DEFECT = 0, 1
LABEL_NAMES = {NON_DEFECT: "non-defect", DEFECT: "defect"}
LABEL_CODES = {"non-defect": NON_DEFECT, "defect": DEFECT, "good": NON_DEFECT, "0": NON_DEFECT, "1": DEFECT}
AUGMENTATIONS = ("identity", "rot90", "rot180", "rot270", "flip-h", "flip-v")
DATASET_VERSION = "spectral-dataset/v1"
DEFECT_SHAPES = ("blob", "scratch", "pit")


@dataclass
class LabeledImage:
    image: np.ndarray
    label: int
    mask: np.ndarray = None
    image_id: str = ""

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise ShapeError(f"mask shape {self.mask.shape} != image shape {self.image.shape}")


@dataclass(frozen=True)
class PatchRecord:
    patch: np.ndarray = field(repr=False)
    label: int
    source_id: str
    row: int
    col: int
    augmentation: str = "identity"


# --------------------------------------------------------------------------
# image I/O


def to_unit_range(arr8):
    return np.asarray(arr8, dtype=np.float64) / 255.0


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _label_from_path(path):
    for part in reversed(Path(path).parts[:-1]):
        if part.lower() in LABEL_CODES:
            return LABEL_CODES[part.lower()]
    return None


def load_image(path, label=None, mask_path=None, image_id=None):
    """Read an 8-bit PNG/PGM (colour is converted to luma) into [0, 1].

    Without an explicit ``label`` the nearest parent directory named
    ``defect``/``non-defect``/``good`` decides; a mask implies the label.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise FormatError(f"{path}: unsupported bit depth (mode {mode}); expected 8-bit")
            if mode != "L":
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except (OSError, ValueError) as exc:
        raise InputOutputError(f"cannot read image {path}: {exc}") from exc
    mask = None
    if mask_path:
        mask = (np.asarray(load_image(mask_path, label=NON_DEFECT).image) > 0).astype(np.uint8)
    if label is None:
        label = _label_from_path(path)
    if label is None and mask is not None:
        label = DEFECT if mask.any() else NON_DEFECT
    if label is None:
        raise FormatError(f"{path}: no label (use a manifest or a defect/non-defect directory)")
    return LabeledImage(to_unit_range(arr), int(label), mask, image_id or path.stem)


def save_image(img, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="L").save(path)


def write_manifest(rows, path):
    """``rows`` are ``(image_path, label, mask_path or "")``; paths stored relative to the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "mask_path"])
        for img_path, label, mask_path in rows:
            w.writerow([img_path, LABEL_NAMES[label], mask_path or ""])


def read_manifest(path):
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise InputOutputError(f"cannot read manifest {path}: {exc}") from exc
    out = []
    for i, row in enumerate(rows):
        try:
            label = LABEL_CODES[row["label"].strip().lower()]
        except KeyError as exc:
            raise FormatError(f"{path}: bad label on row {i + 1}: {row.get('label')!r}") from exc
        mask = row.get("mask_path") or ""
        out.append((path.parent / row["path"], label, path.parent / mask if mask else None))
    return out


def load_manifest_images(path):
    return [load_image(p, label=lab, mask_path=m) for p, lab, m in read_manifest(path)]


# --------------------------------------------------------------------------
# synthetic turning textures


@dataclass(frozen=True)
class DefectConfig:
    count: int = 1
    shapes: tuple = DEFECT_SHAPES
    size_range: tuple = (12.0, 18.0)  # nominal radius in pixels
    contrast_range: tuple = (-0.32, -0.18)  # additive intensity offset
    min_area: int = 48

    def validate(self):
        if self.count < 0:
            raise ConfigError("defect count must be >= 0")
        bad = set(self.shapes) - set(DEFECT_SHAPES)
        if bad or not self.shapes:
            raise ConfigError(f"unknown defect shapes {sorted(bad)}; choose from {DEFECT_SHAPES}")
        lo, hi = self.size_range
        if not 1.0 <= lo <= hi <= 40.0:
            raise ConfigError(f"defect size_range must satisfy 1 <= lo <= hi <= 40, got {self.size_range}")
        lo, hi = self.contrast_range
        if not -1.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"contrast_range must lie in [-1, 1] with lo <= hi, got {self.contrast_range}")


@dataclass(frozen=True)
class TextureConfig:
    size: int = 256
    period_range: tuple = (6.0, 18.0)
    orientation_deg: float = 0.0  # 0 = marks run horizontally
    orientation_jitter_deg: float = 8.0
    amplitude_range: tuple = (0.06, 0.16)
    base_range: tuple = (0.45, 0.6)
    brightness_drift: float = 0.08
    noise_sigma: float = 0.025
    defects: DefectConfig = DefectConfig()

    def validate(self):
        if self.size < 64:
            raise ConfigError(f"image size must be >= 64, got {self.size}")
        lo, hi = self.period_range
        if not 4.0 <= lo <= hi <= 32.0:
            raise ConfigError(f"stripe period range must lie within [4, 32], got {self.period_range}")
        for name in ("amplitude_range", "base_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"{name} must lie within [0, 1], got {(lo, hi)}")
        if self.noise_sigma < 0 or self.brightness_drift < 0 or self.orientation_jitter_deg < 0:
            raise ConfigError("noise_sigma, brightness_drift and orientation_jitter_deg must be >= 0")
        self.defects.validate()


def _turning_background(cfg, rng):
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    theta = np.deg2rad(cfg.orientation_deg + rng.uniform(-1, 1) * cfg.orientation_jitter_deg)
    # coordinate across the tool marks
    u = -np.sin(theta) * xx + np.cos(theta) * yy
    v = np.cos(theta) * xx + np.sin(theta) * yy
    period = rng.uniform(*cfg.period_range)
    wobble = 0.6 * np.sin(2 * np.pi * v / rng.uniform(60, 200) + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * (u + wobble) / period + rng.uniform(0, 2 * np.pi)
    # asymmetric feed-mark profile: fundamental plus a shifted second harmonic
    profile = np.sin(phase) + rng.uniform(0.2, 0.5) * np.sin(2 * phase + rng.uniform(0, 2 * np.pi))
    amp = rng.uniform(*cfg.amplitude_range)
    chatter = 1.0 + 0.25 * np.sin(2 * np.pi * v / rng.uniform(20, 80) + rng.uniform(0, 2 * np.pi))
    img = rng.uniform(*cfg.base_range) + amp * chatter * profile / 1.3
    gx, gy = rng.uniform(-1, 1, size=2) * cfg.brightness_drift
    img += gx * (xx / n - 0.5) + gy * (yy / n - 0.5)
    img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return img


def _raster_blob(shape, cy, cx, r, rng):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    a, b = r * rng.uniform(0.8, 1.2, size=2)
    t = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    p = (dx * np.cos(t) + dy * np.sin(t)) / a
    q = (-dx * np.sin(t) + dy * np.cos(t)) / b
    return p * p + q * q <= 1.0


def _raster_scratch(shape, cy, cx, r, rng):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    half = r * rng.uniform(1.0, 1.6)
    width = r * rng.uniform(0.4, 0.7)
    t = rng.uniform(0, np.pi)
    ey, ex = np.sin(t), np.cos(t)
    dy, dx = yy - cy, xx - cx
    along = np.clip(dx * ex + dy * ey, -half, half)
    dist2 = (dx - along * ex) ** 2 + (dy - along * ey) ** 2
    return dist2 <= (width / 2) ** 2


def _raster_pit(shape, cy, cx, r, rng):
    mask = np.zeros(shape, dtype=bool)
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    for _ in range(rng.integers(3, 7)):
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0, 0.7 * r)
        pr = r * rng.uniform(0.3, 0.5)
        mask |= (yy - cy - rad * np.sin(ang)) ** 2 + (xx - cx - rad * np.cos(ang)) ** 2 <= pr * pr
    return mask


_RASTERS = {"blob": _raster_blob, "scratch": _raster_scratch, "pit": _raster_pit}
_EXTENT = {"blob": 1.2, "scratch": 2.0, "pit": 1.2}


def rasterize_defect(shape, kind, cy, cx, radius, rng):
    return _RASTERS[kind](shape, cy, cx, radius, rng)


def synthesize_turning_texture(cfg, seed, image_id=""):
    """Deterministic turning-texture image with exact defect mask.

    ``seed`` may be anything ``numpy.random.default_rng`` accepts. The result
    is already quantized to 8-bit levels so a PNG round trip is lossless.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    img = _turning_background(cfg, rng)
    n = cfg.size
    mask = np.zeros((n, n), dtype=bool)
    dc = cfg.defects
    for _ in range(dc.count):
        kind = dc.shapes[rng.integers(len(dc.shapes))]
        for _ in range(100):
            r = rng.uniform(*dc.size_range)
            margin = _EXTENT[kind] * r + 4
            if margin * 2 >= n:
                raise ConfigError(f"defect size {r:.1f} does not fit a {n}px image")
            cy, cx = rng.uniform(margin, n - margin, size=2)
            m = rasterize_defect((n, n), kind, cy, cx, r, rng)
            if m.sum() >= dc.min_area:
                break
        else:
            raise ConfigError(f"could not draw a {kind} defect with area >= {dc.min_area}")
        contrast = rng.uniform(*dc.contrast_range)
        # defects partly wash out the tool marks underneath
        local = img[m]
        img[m] = local.mean() + 0.4 * (local - local.mean()) + contrast
        mask |= m
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    label = DEFECT if mask.any() else NON_DEFECT
    return LabeledImage(img, label, mask.astype(np.uint8), image_id)


def synthesize_corpus(cfg, n_defect, n_clean, seed):
    """``n_defect`` defective images followed by ``n_clean`` clean ones."""
    if n_defect and cfg.defects.count < 1:
        raise ConfigError("defect images requested but defects.count is 0")
    clean_cfg = replace(cfg, defects=replace(cfg.defects, count=0))
    images = []
    for i in range(n_defect + n_clean):
        c = cfg if i < n_defect else clean_cfg
        images.append(synthesize_turning_texture(c, [seed, 0, i], image_id=f"img{i:05d}"))
    return images


# --------------------------------------------------------------------------
# patches


def _integral(mask):
    s = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    s[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
    return s


def window_overlaps(mask, size):
    """Mask-pixel count inside every ``size x size`` window, indexed by top-left."""
    s = _integral(mask)
    return s[size:, size:] - s[:-size, size:] - s[size:, :-size] + s[:-size, :-size]


def extract_patches(img, count, policy, size=64, tau=32, seed=0, max_tries=None):
    """Sample ``count`` distinct windows by rejection.

    ``policy="defect"`` keeps windows overlapping the mask by at least ``tau``
    pixels; ``policy="background"`` keeps windows with zero overlap.
    """
    h, w = img.image.shape
    if h < size or w < size:
        raise ShapeError(f"image {h}x{w} is smaller than the {size}px patch")
    if policy not in ("defect", "background"):
        raise ConfigError(f"unknown patch policy {policy!r}")
    mask = img.mask
    if mask is None:
        if policy == "defect" or img.label == DEFECT:
            raise SamplingExhaustedError(f"{img.image_id}: no defect mask to sample against")
        mask = np.zeros((h, w), dtype=np.uint8)
    overlap = window_overlaps(mask, size)
    rng = np.random.default_rng(seed)
    max_tries = max_tries or 200 * count + 1000
    chosen = []
    seen = set()
    tries = 0
    while len(chosen) < count:
        if tries >= max_tries:
            raise SamplingExhaustedError(
                f"{img.image_id}: found {len(chosen)}/{count} {policy} patches after {tries} draws"
            )
        tries += 1
        r, c = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
        if (r, c) in seen:
            continue
        ov = overlap[r, c]
        if (policy == "defect" and ov >= tau) or (policy == "background" and ov == 0):
            seen.add((r, c))
            chosen.append((r, c))
    label = DEFECT if policy == "defect" else NON_DEFECT
    return [PatchRecord(img.image[r : r + size, c : c + size].copy(), label, img.image_id, r, c) for r, c in chosen]


_AUG_FUNCS = {
    "identity": lambda a: a,
    "rot90": lambda a: np.rot90(a, 1),
    "rot180": lambda a: np.rot90(a, 2),
    "rot270": lambda a: np.rot90(a, 3),
    "flip-h": np.fliplr,
    "flip-v": np.flipud,
}


def augment(p):
    """The six rotation/flip variants of a square patch."""
    if p.patch.ndim != 2 or p.patch.shape[0] != p.patch.shape[1]:
        raise ShapeError(f"augmentation needs a square patch, got {p.patch.shape}")
    return [
        PatchRecord(np.ascontiguousarray(_AUG_FUNCS[tag](p.patch)), p.label, p.source_id, p.row, p.col, tag)
        for tag in AUGMENTATIONS
    ]


_AUG_INVERSE = {"identity": "identity", "rot90": "rot270", "rot180": "rot180", "rot270": "rot90", "flip-h": "flip-h", "flip-v": "flip-v"}


def underlying_patch(p):
    """Undo the augmentation of a variant, recovering the extracted window."""
    return np.ascontiguousarray(_AUG_FUNCS[_AUG_INVERSE[p.augmentation]](p.patch))


def sample_patches(images, n_defect, n_clean, seed, size=64, tau=32):
    """Spread ``n_defect`` defect-centred patches over the defective images and
    ``n_clean`` background patches over the clean ones, as evenly as possible."""
    defective = [im for im in images if im.label == DEFECT]
    clean = [im for im in images if im.label == NON_DEFECT]
    if (n_defect and not defective) or (n_clean and not clean):
        raise EmptyInputError("no source images for a requested patch class")
    index = {id(im): i for i, im in enumerate(images)}
    out = []
    for group, total, policy in ((defective, n_defect, "defect"), (clean, n_clean, "background")):
        for j, im in enumerate(group):
            k = total // len(group) + (1 if j < total % len(group) else 0)
            if k:
                out.extend(extract_patches(im, k, policy, size, tau, seed=[seed, 1, index[id(im)]]))
    return out


# --------------------------------------------------------------------------
# spectral datasets


@dataclass
class SpectralDataset:
    features: np.ndarray
    labels: np.ndarray
    is_test: np.ndarray
    split_seed: int
    spectrum_version: str

    def __len__(self):
        return len(self.labels)

    @property
    def train(self):
        return self.features[~self.is_test], self.labels[~self.is_test]

    @property
    def test(self):
        return self.features[self.is_test], self.labels[self.is_test]


def stratified_split(labels, groups, split_seed, train_fraction=0.8):
    """Boolean ``is_test`` per row.

    Within each class exactly ``round(train_fraction * rows)`` rows train.
    Groups are taken whole in seeded order, so at most one group per class
    straddles the boundary.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(split_seed)
    is_test = np.zeros(len(labels), dtype=bool)
    for cls in (NON_DEFECT, DEFECT):
        rows = np.flatnonzero(labels == cls)
        if not len(rows):
            continue
        keys = {}
        for r in rows:
            keys.setdefault(groups[r], []).append(r)
        order = list(keys)
        ranked = np.concatenate([keys[order[gi]] for gi in rng.permutation(len(order))])
        n_train = int(round(train_fraction * len(rows)))
        is_test[ranked[n_train:]] = True
    return is_test


def build_spectral_dataset(patches, spectrum, split_seed, train_fraction=0.8, group_augmented=True, chunk=1024):
    """GFT every patch and assign a stratified train/test split.

    With ``group_augmented`` the six variants of one source window share a
    split, so no test row has a rotated twin in the training set.
    """
    if not patches:
        raise EmptyInputError("no patches to build a dataset from")
    shape = (spectrum.height, spectrum.width)
    feats = np.empty((len(patches), spectrum.n))
    for start in range(0, len(patches), chunk):
        block = patches[start : start + chunk]
        if any(p.patch.shape != shape for p in block):
            raise ShapeError(f"all patches must be {shape}")
        feats[start : start + chunk] = gft_forward(spectrum, np.stack([p.patch for p in block]))
    labels = np.array([p.label for p in patches], dtype=np.uint8)
    if group_augmented:
        groups = [(p.source_id, p.row, p.col) for p in patches]
    else:
        groups = list(range(len(patches)))
    is_test = stratified_split(labels, groups, split_seed, train_fraction)
    return SpectralDataset(feats, labels, is_test, int(split_seed), spectrum.version)


def save_dataset(ds, path):
    meta = {
        "M": int(ds.features.shape[0]),
        "N": int(ds.features.shape[1]),
        "spectrum_version": ds.spectrum_version,
        "split_seed": ds.split_seed,
        "version": DATASET_VERSION,
    }
    arrays = {
        "features": ds.features.astype(np.float64),
        "labels": ds.labels.astype(np.uint8),
        "is_test": ds.is_test.astype(np.uint8),
    }
    write_container(path, "dataset", meta, arrays)


def load_dataset(path):
    meta, arrays = read_container(path, kind="dataset")
    if meta.get("version") != DATASET_VERSION:
        raise CompatibilityError(f"dataset version {meta.get('version')!r} != {DATASET_VERSION!r}")
    return SpectralDataset(
        arrays["features"], arrays["labels"], arrays["is_test"].astype(bool), meta["split_seed"], meta["spectrum_version"]
    )


def export_dataset_csv(ds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "label"] + [f"s{k}" for k in range(ds.features.shape[1])])
        for row, lab, t in zip(ds.features, ds.labels, ds.is_test):
            w.writerow(["test" if t else "train", LABEL_NAMES[int(lab)]] + [repr(float(v)) for v in row])
