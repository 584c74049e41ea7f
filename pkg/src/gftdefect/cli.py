"""Command-line entry point: ``gftdefect <command> [options]``.

Commands read a YAML run config (``-c``); ``--set key.path=value`` and the
per-command flags override it. The whole config and every input path are
validated before anything is written. Artifacts land under the config's
``output_dir``; the only file carrying timestamps is ``provenance.jsonl``,
which gets one line per successful command.
"""

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import PIL
import scipy
import yaml

from . import __version__
from .attribution import (
    explain,
    global_importance,
    save_bar_plot,
    select_background,
    write_attributions,
    write_top_k,
)
from .cnn import (
    CHECKPOINT_VERSION,
    defect_score,
    evaluate,
    forward,
    init_model,
    load_checkpoint,
    predict_from_outputs,
    save_checkpoint,
    train,
)
from .config import dump_config, load_config
from .data import (
    DATASET_VERSION,
    DEFECT,
    NON_DEFECT,
    _label_from_path,
    augment,
    build_spectral_dataset,
    export_dataset_csv,
    load_dataset,
    load_image,
    load_manifest_images,
    sample_patches,
    save_dataset,
    save_image,
    synthesize_corpus,
    write_manifest,
)
from .errors import ConfigError, CostRefusalError, GftDefectError, InputOutputError, ShapeError, UndefinedMetricError
from .localization import auroc, evaluate_localization, localize, save_heatmap, upsample_heatmap
from .spectral import SPECTRUM_VERSION, eigenbasis_analytic, gft_forward, gft_inverse, reconstruct_partial, top_k_indices

log = logging.getLogger("gftdefect")

IMAGE_SUFFIXES = (".png", ".pgm")


# --------------------------------------------------------------------------
# layout and provenance


class Layout:
    """Default artifact paths under ``output_dir``."""

    def __init__(self, root):
        self.root = Path(root)
        self.synth = self.root / "synth"
        self.manifest = self.synth / "manifest.csv"
        self.dataset = self.root / "dataset.gftd"
        self.dataset_csv = self.root / "dataset.csv"
        self.checkpoint = self.root / "model.gftc"
        self.train_report = self.root / "train_report.json"
        self.heatmaps = self.root / "heatmaps"
        self.attributions = self.root / "attributions"
        self.provenance = self.root / "provenance.jsonl"
        self.resolved_config = self.root / "config.resolved.yaml"


def _versions():
    return {
        "gftdefect": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pillow": PIL.__version__,
        "spectrum": SPECTRUM_VERSION,
        "dataset": DATASET_VERSION,
        "checkpoint": CHECKPOINT_VERSION,
    }


def _provenance(layout, cfg, command, argv, outputs):
    layout.root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, layout.resolved_config)
    rec = {
        "command": command,
        "argv": list(argv),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": _versions(),
        "outputs": [str(p) for p in outputs],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with open(layout.provenance, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise InputOutputError(f"{what} not found: {path}")
    return path


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _images_from(inputs):
    """Images from files, directories (their ``manifest.csv`` when present)
    or manifest CSVs. Unlabeled images count as non-defect."""
    images = []
    for raw in inputs:
        p = _require(raw, "input")
        if p.is_dir() and (p / "manifest.csv").exists():
            p = p / "manifest.csv"
        if p.suffix.lower() == ".csv":
            images.extend(load_manifest_images(p))
        elif p.is_dir():
            files = sorted(f for f in p.rglob("*") if f.suffix.lower() in IMAGE_SUFFIXES)
            images.extend(_load_one(f) for f in files)
        else:
            images.append(_load_one(p))
    if not images:
        raise InputOutputError(f"no images found in {list(inputs)}")
    return images


def _load_one(path):
    """One image; ``images/<name>`` picks up ``masks/<name>`` as synth lays them out."""
    path = Path(path)
    mask = path.parent.parent / "masks" / path.name
    if path.parent.name == "images" and mask.exists():
        return load_image(path, mask_path=mask)
    label = _label_from_path(path)
    return load_image(path, label=NON_DEFECT if label is None else label)


def _load_model(path):
    model, meta = load_checkpoint(_require(path, "checkpoint"), spectrum_version=SPECTRUM_VERSION)
    side = int(round(np.sqrt(model.arch.input_length)))
    if side * side != model.arch.input_length:
        raise ShapeError(f"checkpoint input length {model.arch.input_length} is not a square patch")
    return model, meta, eigenbasis_analytic(side, side)


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg, args, layout):
    syn = cfg.synthesis
    images = synthesize_corpus(syn.texture, syn.n_defect, syn.n_clean, cfg.seed)
    rows = []
    for im in images:
        img_rel = Path("images") / f"{im.image_id}.png"
        mask_rel = Path("masks") / f"{im.image_id}.png"
        save_image(im.image, layout.synth / img_rel)
        save_image(im.mask.astype(np.float64), layout.synth / mask_rel)
        rows.append((img_rel.as_posix(), im.label, mask_rel.as_posix()))
    write_manifest(rows, layout.manifest)
    print(f"synthesized {syn.n_defect} defect + {syn.n_clean} non-defect images -> {layout.manifest} ({len(rows)} rows)")
    return [layout.manifest]


def cmd_dataset(cfg, args, layout):
    manifest = _require(args.manifest or layout.manifest, "manifest")
    ds_cfg = cfg.dataset
    images = load_manifest_images(manifest)
    patches = sample_patches(
        images, ds_cfg.n_defect_patches, ds_cfg.n_clean_patches, cfg.seed, ds_cfg.patch_size, ds_cfg.tau
    )
    if ds_cfg.augment:
        patches = [v for p in patches for v in augment(p)]
    spectrum = eigenbasis_analytic(ds_cfg.patch_size, ds_cfg.patch_size)
    ds = build_spectral_dataset(patches, spectrum, cfg.seed, ds_cfg.train_fraction, ds_cfg.group_augmented)
    save_dataset(ds, layout.dataset)
    outputs = [layout.dataset]
    if args.csv:
        export_dataset_csv(ds, layout.dataset_csv)
        outputs.append(layout.dataset_csv)
    n_def = int(ds.labels.sum())
    print(
        f"dataset {ds.features.shape[0]}x{ds.features.shape[1]} ({n_def} defect, {len(ds) - n_def} non-defect; "
        f"{int((~ds.is_test).sum())} train / {int(ds.is_test.sum())} test) -> {layout.dataset}"
    )
    return outputs


def cmd_gft(cfg, args, layout):
    im = _load_one(_require(args.image, "image"))
    out_dir = Path(args.out_dir) if args.out_dir else layout.root / "gft"
    h, w = im.image.shape
    spectrum = eigenbasis_analytic(h, w)
    s = gft_forward(spectrum, im.image)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    dump = out_dir / f"{stem}_coefficients.csv"
    with open(dump, "w") as fh:
        fh.write("index,p,q,eigenvalue,coefficient\n")
        for (k, p, q, lam), c in zip(spectrum.ordering_table(), s):
            fh.write(f"{k},{p},{q},{lam!r},{float(c)!r}\n")
    summary = {"image": str(args.image), "height": h, "width": w, "energy": float(np.dot(s, s))}
    outputs = [dump]
    if args.round_trip:
        err = float(np.max(np.abs(gft_inverse(spectrum, s) - im.image)))
        summary["round_trip_max_error"] = err
        print(f"round-trip max pixel error {err:.3e}")
    if args.keep_top_k is not None or args.keep_lowest is not None:
        if args.keep_top_k is not None:
            keep, tag = top_k_indices(s, args.keep_top_k), f"top{args.keep_top_k}"
        else:
            keep, tag = np.arange(min(args.keep_lowest, spectrum.n)), f"lowest{args.keep_lowest}"
        rec = reconstruct_partial(spectrum, s, keep)
        full = gft_inverse(spectrum, s)
        summary["partial"] = {
            "kept": tag,
            "count": int(len(keep)),
            "max_diff_from_full": float(np.max(np.abs(rec - full))),
            "energy_fraction": float(np.dot(s[keep], s[keep]) / max(np.dot(s, s), 1e-300)),
        }
        png = out_dir / f"{stem}_{tag}.png"
        save_image(rec, png)
        np.savetxt(out_dir / f"{stem}_{tag}.txt", rec, fmt="%.17g")
        outputs += [png, out_dir / f"{stem}_{tag}.txt"]
    _write_json(out_dir / f"{stem}_gft.json", summary)
    outputs.append(out_dir / f"{stem}_gft.json")
    print(f"{spectrum.n} coefficients -> {dump}")
    return outputs


def cmd_train(cfg, args, layout):
    ds = load_dataset(_require(args.dataset or layout.dataset, "dataset"))
    if ds.spectrum_version != SPECTRUM_VERSION:
        raise ConfigError(f"dataset built with spectrum {ds.spectrum_version!r}, current is {SPECTRUM_VERSION!r}")
    if ds.features.shape[1] != cfg.model.input_length:
        raise ShapeError(f"dataset has {ds.features.shape[1]} features, model expects {cfg.model.input_length}")
    model = init_model(cfg.model, cfg.seed)
    model, report = train(model, ds, cfg.train_config, callback=lambda r: print(_epoch_line(r), flush=True))
    save_checkpoint(model, layout.checkpoint, seed=cfg.seed, spectrum_version=ds.spectrum_version)
    report.checkpoint = layout.checkpoint.name
    layout.train_report.write_text(report.to_json() + "\n")
    print(f"checkpoint -> {layout.checkpoint}")
    return [layout.checkpoint, layout.train_report]


def _epoch_line(r):
    return (
        f"epoch {r['epoch']:3d}  train loss {r['train_loss']:.4f} acc {r['train_acc']:.4f}  "
        f"test loss {r['test_loss']:.4f} acc {r['test_acc']:.4f}"
    )


def cmd_eval(cfg, args, layout):
    model, _, _ = _load_model(args.checkpoint or layout.checkpoint)
    ds = load_dataset(_require(args.dataset or layout.dataset, "dataset"))
    x, y = {"train": ds.train, "test": ds.test, "all": (ds.features, ds.labels)}[args.split]
    if len(y) == 0:
        raise UndefinedMetricError(f"the {args.split} split is empty")
    if not 0 < y.sum() < len(y):
        raise UndefinedMetricError(f"the {args.split} split contains only one class")
    loss, acc = evaluate(model, x, y)
    out = forward(model, x)
    scores = defect_score(out, model.arch.output)
    pred = predict_from_outputs(out)
    result = {
        "split": args.split,
        "rows": int(len(y)),
        "loss": loss,
        "accuracy": acc,
        "auroc": auroc(scores, y),
        "confusion": {
            "tp": int(np.sum((pred == DEFECT) & (y == DEFECT))),
            "fp": int(np.sum((pred == DEFECT) & (y == NON_DEFECT))),
            "tn": int(np.sum((pred == NON_DEFECT) & (y == NON_DEFECT))),
            "fn": int(np.sum((pred == NON_DEFECT) & (y == DEFECT))),
        },
    }
    path = layout.root / f"eval_{args.split}.json"
    _write_json(path, result)
    print(f"{args.split}: accuracy {acc:.6f}  loss {loss:.6f}  auroc {result['auroc']:.6f} -> {path}")
    return [path]


def cmd_localize(cfg, args, layout):
    model, _, spectrum = _load_model(args.checkpoint or layout.checkpoint)
    images = _images_from(args.inputs or [layout.manifest])
    loc = cfg.localization
    outputs = []

    def save(im, h):
        base = layout.heatmaps / im.image_id
        save_heatmap(h, base.with_suffix(".png"), base.with_suffix(".txt"))
        outputs.extend([base.with_suffix(".png"), base.with_suffix(".txt")])
        if loc.save_upsampled:
            up = layout.heatmaps / f"{im.image_id}_pixels.png"
            save_image(upsample_heatmap(h), up)
            outputs.append(up)

    report = evaluate_localization(model, spectrum, images, loc.stride, save, loc.batch_size)
    report.write(layout.root / "localization.csv", layout.root / "localization.json")
    outputs += [layout.root / "localization.csv", layout.root / "localization.json"]
    agg = report.aggregate()
    print(f"{len(images)} heatmaps (stride {loc.stride}) -> {layout.heatmaps}")
    for key, v in agg.items():
        print(f"pixel {key}: mean {v['mean']:.4f} median {v['median']:.4f}")
    return outputs


def _explain_target(model, spectrum, im, stride):
    """Feature vector to explain: the image itself when it is one window,
    otherwise its highest-scoring window (first in row-major order on ties)."""
    if im.image.shape == (spectrum.height, spectrum.width):
        return gft_forward(spectrum, im.image), (0, 0)
    h = localize(model, spectrum, im, stride)
    r, c = np.unravel_index(int(np.argmax(h.scores)), h.shape)
    r0, c0 = int(r) * stride, int(c) * stride
    return gft_forward(spectrum, im.image[r0 : r0 + spectrum.height, c0 : c0 + spectrum.width]), (r0, c0)


def cmd_explain(cfg, args, layout):
    model, _, spectrum = _load_model(args.checkpoint or layout.checkpoint)
    att = cfg.attribution
    features = None if att.features is None else np.asarray(att.features, dtype=np.int64)
    n_attr = spectrum.n if features is None else len(features)
    if att.method == "exact" and n_attr > att.exact_limit:
        # refuse before any work; shapley_exact repeats this check
        raise CostRefusalError(
            f"exact Shapley over {n_attr} features needs 2^{n_attr} model evaluations (limit {att.exact_limit}); "
            "use --method deeplift, or --method sampled, or restrict attribution.features"
        )
    background = None
    if att.method == "deeplift":
        ds = load_dataset(_require(args.dataset or layout.dataset, "dataset"))
        x_tr, y_tr = ds.train
        background = select_background(x_tr, y_tr, att.background_size, cfg.seed)
    images = _images_from(args.inputs)
    records = []
    for im in images:
        x, origin = _explain_target(model, spectrum, im, cfg.localization.stride)
        av = explain(
            att.method, model, x, background=background, num_permutations=att.num_permutations,
            seed=cfg.seed, features=features, limit=att.exact_limit,
        )
        records.append((im.image_id if origin == (0, 0) else f"{im.image_id}@{origin[0]},{origin[1]}", av))
    out_dir = layout.attributions
    write_attributions(out_dir / "attributions.csv", records)
    imp = global_importance([av.values for _, av in records], k=att.top_k)
    write_top_k(out_dir / "top_k.csv", imp)
    idx = imp.top_k if features is None else features[imp.top_k]
    save_bar_plot(out_dir / "importance.png", imp.values, imp.top_k)
    print(f"{att.method} attributions for {len(records)} image(s) -> {out_dir}")
    print("top-{} coefficients: {}".format(att.top_k, " ".join(str(int(i)) for i in idx)))
    return [out_dir / "attributions.csv", out_dir / "top_k.csv", out_dir / "importance.png"]


COMMANDS = {
    "synth": cmd_synth,
    "dataset": cmd_dataset,
    "gft": cmd_gft,
    "train": cmd_train,
    "eval": cmd_eval,
    "localize": cmd_localize,
    "explain": cmd_explain,
}


# --------------------------------------------------------------------------
# argument parsing


def _parse_set(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key.path=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run config (defaults apply to missing keys)")
    common.add_argument("--set", dest="overrides", action="append", type=_parse_set, default=[],
                        metavar="KEY=VALUE", help="override one config key, e.g. training.epochs=10")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("-o", "--output-dir", help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gftdefect", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gftdefect {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic turning-texture images")
    s.add_argument("--n-defect", type=int)
    s.add_argument("--n-clean", type=int)

    s = sub.add_parser("dataset", parents=[common], help="patches + augmentation + GFT -> dataset container")
    s.add_argument("--manifest", help="image manifest (default: output_dir/synth/manifest.csv)")
    s.add_argument("--csv", action="store_true", help="also export the dataset as CSV")

    s = sub.add_parser("gft", parents=[common], help="spectral dump and reconstructions of one image")
    s.add_argument("image")
    s.add_argument("--out-dir")
    s.add_argument("--round-trip", action="store_true", help="report the inverse-transform pixel error")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--keep-top-k", type=int, help="reconstruct from the k largest-magnitude coefficients")
    g.add_argument("--keep-lowest", type=int, help="reconstruct from the k lowest frequencies")

    s = sub.add_parser("train", parents=[common], help="train the 1D CNN")
    s.add_argument("--dataset")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("eval", parents=[common], help="accuracy and AUROC of a checkpoint on a dataset split")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--split", choices=("train", "test", "all"), default="test")

    s = sub.add_parser("localize", parents=[common], help="sliding-window heatmaps and pixel metrics")
    s.add_argument("inputs", nargs="*", help="images, directories or manifests (default: synthetic manifest)")
    s.add_argument("--checkpoint")
    s.add_argument("--stride", type=int)

    s = sub.add_parser("explain", parents=[common], help="attribute the defect score to spectral coefficients")
    s.add_argument("inputs", nargs="+", help="images, directories or manifests")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset", help="background source for deeplift (default: output_dir/dataset.gftd)")
    s.add_argument("--method", choices=("exact", "sampled", "deeplift"))
    s.add_argument("--top-k", type=int)
    return p


def _overrides(args):
    out = list(args.overrides)
    flag_keys = {
        "seed": "seed",
        "output_dir": "output_dir",
        "n_defect": "synthesis.n_defect",
        "n_clean": "synthesis.n_clean",
        "epochs": "training.epochs",
        "stride": "localization.stride",
        "method": "attribution.method",
        "top_k": "attribution.top_k",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.append((key, value))
    return out


def run(argv=None):
    """Parse, validate, execute. Returns the process exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        layout = Layout(cfg.output_dir)
        outputs = COMMANDS[args.command](cfg, args, layout)
        _provenance(layout, cfg, args.command, argv, outputs)
    except GftDefectError as exc:
        print(f"gftdefect {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
