"""Operator CLI: synth -> split -> train-seg -> fit-pca -> train-hybrid -> sweep/eval.

Every command validates its inputs up front (fail-fast), exits nonzero with a
single machine-parseable error line on failure, and stamps a provenance block
(config hash, seeds, versions; timestamp is the one non-deterministic field)
into the JSON report it writes.
"""

import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from fundus import __version__, dataio, modelio
from fundus.hybrid import HybridVotingClassifier, evaluate, ratio_sweep, sweep_rows_to_csv
from fundus.pca import CovariancePCA
from fundus.segnet import UNetSegmenter
from fundus.svm import KERNEL_KINDS, OneVsOneSVC, thread_count_from_env

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DATA = 4
EXIT_CLASS_MISMATCH = 5

DEFAULT_CONFIG = {
    "paths": {"manifest": "manifest.csv", "model_dir": "models", "report_dir": "reports"},
    "seg": {
        "input_size": 64,
        "levels": 3,
        "base_channels": 8,
        "skip_mode": "halved",
        "lr": 0.01,
        "momentum": 0.9,
        "max_epochs": 30,
        "stop_loss": 0.001,
        "w0": 10.0,
        "sigma": 5.0,
        "class_balance": True,
        "weight_form": "printed",
        "augment": True,
    },
    "pca": {"k": 62},
    "svm": {
        "c": 128.0,
        "kernel": "rbf",
        "gamma": 0.0078,
        "degree": 3,
        "coef0": 0.0,
        "tol": 1e-3,
        "max_passes": 200,
    },
    "hybrid": {"ratio": 0.47, "sweep": [0.0, 0.40, 0.47, 0.61, 1.0]},
    "seeds": {"split": 1, "init": 2, "train": 3, "augment": 4},
}


class PipelineError(Exception):
    def __init__(self, code, exit_code, message):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _fail(code, exit_code, message):
    raise PipelineError(code, exit_code, message)


def _guard(fn):
    """Convert PipelineError into one stderr line plus the mapped exit status."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PipelineError as exc:
            click.echo(f'error code={exc.code} message="{exc}"', err=True)
            sys.exit(exc.exit_code)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# Configuration


def _merge(base, override, trail=""):
    merged = dict(base)
    for key, value in override.items():
        if key not in base:
            _fail("CONFIG", EXIT_CONFIG, f"unknown config field {trail}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                _fail("CONFIG", EXIT_CONFIG, f"config field {trail}{key} must be a table")
            merged[key] = _merge(base[key], value, f"{trail}{key}.")
        else:
            merged[key] = value
    return merged


def _require_number(cfg, section, key, lo=None, hi=None, integer=False):
    value = cfg[section][key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail("CONFIG", EXIT_CONFIG, f"{section}.{key} must be a number, got {value!r}")
    if integer and int(value) != value:
        _fail("CONFIG", EXIT_CONFIG, f"{section}.{key} must be an integer, got {value!r}")
    if lo is not None and value < lo:
        _fail("CONFIG", EXIT_CONFIG, f"{section}.{key}={value} below minimum {lo}")
    if hi is not None and value > hi:
        _fail("CONFIG", EXIT_CONFIG, f"{section}.{key}={value} above maximum {hi}")


def load_config(path, overrides=None):
    """Read, merge over defaults, and range-check a run configuration."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            _fail("MISSING", EXIT_MISSING, f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            _fail("CONFIG", EXIT_CONFIG, f"config is not valid JSON: {exc}")
        cfg = _merge(cfg, user)
        base_dir = path.parent.resolve()
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, field = key.split(".")
        cfg[section][field] = value

    _require_number(cfg, "seg", "input_size", lo=8, integer=True)
    _require_number(cfg, "seg", "levels", lo=1, integer=True)
    _require_number(cfg, "seg", "base_channels", lo=1, integer=True)
    _require_number(cfg, "seg", "lr", lo=0.0)
    _require_number(cfg, "seg", "momentum", lo=0.0, hi=1.0)
    _require_number(cfg, "seg", "max_epochs", lo=1, integer=True)
    _require_number(cfg, "seg", "stop_loss", lo=0.0)
    _require_number(cfg, "seg", "w0", lo=0.0)
    _require_number(cfg, "seg", "sigma", lo=1e-12)
    _require_number(cfg, "pca", "k", lo=1, integer=True)
    _require_number(cfg, "svm", "c", lo=1e-12)
    _require_number(cfg, "svm", "gamma", lo=1e-12)
    _require_number(cfg, "svm", "degree", lo=1, integer=True)
    _require_number(cfg, "svm", "tol", lo=0.0)
    _require_number(cfg, "svm", "max_passes", lo=1, integer=True)
    _require_number(cfg, "hybrid", "ratio", lo=0.0, hi=1.0)
    if cfg["svm"]["kernel"] not in KERNEL_KINDS:
        _fail("CONFIG", EXIT_CONFIG, f"svm.kernel must be one of {KERNEL_KINDS}")
    if cfg["seg"]["input_size"] % (2 ** cfg["seg"]["levels"]) != 0:
        _fail(
            "CONFIG",
            EXIT_CONFIG,
            f"seg.input_size={cfg['seg']['input_size']} not divisible by "
            f"2**levels={2 ** cfg['seg']['levels']}",
        )
    for r in cfg["hybrid"]["sweep"]:
        if not isinstance(r, (int, float)) or not 0.0 <= r <= 1.0:
            _fail("CONFIG", EXIT_CONFIG, f"hybrid.sweep entries must lie in [0, 1], got {r!r}")
    for name, value in cfg["seeds"].items():
        if not isinstance(value, int) or isinstance(value, bool):
            _fail("CONFIG", EXIT_CONFIG, f"seeds.{name} must be an integer")

    cfg["_base_dir"] = str(base_dir)
    return cfg


def _resolve(cfg, rel):
    return (Path(cfg["_base_dir"]) / rel).resolve()


def _manifest_path(cfg):
    p = _resolve(cfg, cfg["paths"]["manifest"])
    if not p.exists():
        _fail("MISSING", EXIT_MISSING, f"manifest not found: {p}")
    return p


def _model_path(cfg, name, must_exist):
    p = _resolve(cfg, cfg["paths"]["model_dir"]) / name
    if must_exist and not p.exists():
        _fail("MISSING", EXIT_MISSING, f"model file not found: {p} (run the upstream command)")
    return p


def _config_hash(cfg):
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(public, sort_keys=True).encode()).hexdigest()


def _provenance(cfg, command):
    return {
        "command": command,
        "config_sha256": _config_hash(cfg),
        "seeds": cfg["seeds"],
        "package_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }


def _write_report(cfg, name, payload, command):
    report_dir = _resolve(cfg, cfg["paths"]["report_dir"])
    report_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(payload)
    payload["provenance"] = _provenance(cfg, command)
    out = report_dir / name
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


# ---------------------------------------------------------------------------
# Data access


def _load_manifest(cfg):
    try:
        return dataio.load_manifest(_manifest_path(cfg)), _manifest_path(cfg).parent
    except ValueError as exc:
        _fail("DATA", EXIT_DATA, str(exc))


def _split_records(manifest, split):
    records = manifest.subset(split)
    if not records:
        _fail("DATA", EXIT_DATA, f"manifest has no records in split {split!r}; run `fundus split`")
    return records


def _load_images(records, root, size):
    images, labels = [], []
    for rec in records:
        p = root / rec.path
        if not p.exists():
            _fail("MISSING", EXIT_MISSING, f"image not found: {p}")
        images.append(dataio.load_image(p, target_size=size))
        labels.append(rec.label)
    return images, labels


def _load_pairs(records, root, size):
    images, masks = [], []
    for rec in records:
        img_path = root / rec.path
        if not img_path.exists():
            _fail("MISSING", EXIT_MISSING, f"image not found: {img_path}")
        try:
            mask_path = root / dataio.mask_path_for(rec.path)
        except ValueError as exc:
            _fail("DATA", EXIT_DATA, str(exc))
        if not mask_path.exists():
            _fail("MISSING", EXIT_MISSING, f"mask not found: {mask_path}")
        images.append(dataio.load_image(img_path, target_size=size))
        mask = dataio.load_mask(mask_path)
        if mask.shape != (size, size):
            mask = dataio.nearest_resize(mask, size, size)
        masks.append(mask)
    return images, masks


def _luminance_matrix(images):
    return np.stack([dataio.to_luminance(img).ravel() for img in images])


def _vessel_matrix(images, segmenter):
    return np.stack([segmenter.predict(img).astype(np.float64).ravel() for img in images])


def _build_segmenter(cfg):
    seg = cfg["seg"]
    return UNetSegmenter(
        input_size=seg["input_size"],
        levels=seg["levels"],
        base_channels=seg["base_channels"],
        skip_mode=seg["skip_mode"],
        seed=cfg["seeds"]["init"],
        lr=seg["lr"],
        momentum=seg["momentum"],
        max_epochs=seg["max_epochs"],
        stop_loss=seg["stop_loss"],
        w0=seg["w0"],
        sigma=seg["sigma"],
        class_balance=seg["class_balance"],
        weight_form=seg["weight_form"],
        augment=seg["augment"],
        augment_seed=cfg["seeds"]["augment"],
    )


def _fit_channel_pca(cfg, channel, manifest, root):
    records = _split_records(manifest, "train")
    images, _ = _load_images(records, root, cfg["seg"]["input_size"])
    if channel == "rgb":
        X = _luminance_matrix(images)
    else:
        segmenter = modelio.load_segmenter(_model_path(cfg, "segnet.json", must_exist=True))
        X = _vessel_matrix(images, segmenter)
    k = min(int(cfg["pca"]["k"]), min(X.shape[0] - 1, X.shape[1]))
    if k < int(cfg["pca"]["k"]):
        click.echo(f"note: clamping pca.k from {cfg['pca']['k']} to {k}", err=True)
    return CovariancePCA(n_components=k).fit(X)


def _train_channel_svc(cfg, kernel, X, labels, classes, seed_offset=0):
    svm = cfg["svm"]
    model = OneVsOneSVC(
        C=float(svm["c"]),
        kernel=kernel,
        gamma=float(svm["gamma"]),
        degree=int(svm["degree"]),
        coef0=float(svm["coef0"]),
        tol=float(svm["tol"]),
        max_passes=int(svm["max_passes"]),
        seed=int(cfg["seeds"]["train"]) + seed_offset,
        n_jobs=thread_count_from_env(),
    )
    return model.fit(X, np.asarray(labels), classes=np.asarray(classes))


# ---------------------------------------------------------------------------
# Commands


@click.group()
@click.version_option(version=__version__, prog_name="fundus")
def main():
    """Retinal disease classification pipeline (segmentation + PCA + SVM fusion)."""


@main.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--classes", default=8, show_default=True)
@click.option("--per-class", default=50, show_default=True)
@click.option("--size", default=64, show_default=True)
@click.option("--seed", default=7, show_default=True)
@_guard
def cmd_synth(out_dir, classes, per_class, size, seed):
    """Generate a synthetic labeled corpus with vessel masks."""
    try:
        spec = dataio.SyntheticSpec(
            n_classes=classes, n_per_class=per_class, image_size=size, seed=seed
        )
    except ValueError as exc:
        _fail("CONFIG", EXIT_CONFIG, str(exc))
    manifest = dataio.synth_write(spec, out_dir)
    click.echo(f"wrote {len(manifest.records)} images to {out_dir}")


@main.command("split")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path(), help="Defaults to in-place.")
@click.option("--train", default=0.7, show_default=True)
@click.option("--val", default=0.1, show_default=True)
@click.option("--test", default=0.2, show_default=True)
@click.option("--seed", default=1, show_default=True)
@_guard
def cmd_split(manifest_path, out_path, train, val, test, seed):
    """Assign stratified train/val/test splits to a manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        _fail("MISSING", EXIT_MISSING, f"manifest not found: {manifest_path}")
    try:
        manifest = dataio.load_manifest(manifest_path)
        manifest = dataio.split_dataset(manifest, (train, val, test), seed=seed)
    except ValueError as exc:
        _fail("DATA", EXIT_DATA, str(exc))
    dataio.save_manifest(manifest, out_path or manifest_path)
    counts = {s: len(manifest.subset(s)) for s in ("train", "val", "test")}
    click.echo(f"split counts: {counts}")


def _common_overrides(seed, ratio, k, c, gamma, kernel):
    overrides = {}
    if seed is not None:
        overrides.update(
            {"seeds.split": seed, "seeds.init": seed, "seeds.train": seed, "seeds.augment": seed}
        )
    if ratio is not None:
        overrides["hybrid.ratio"] = ratio
    if k is not None:
        overrides["pca.k"] = k
    if c is not None:
        overrides["svm.c"] = c
    if gamma is not None:
        overrides["svm.gamma"] = gamma
    if kernel is not None:
        overrides["svm.kernel"] = kernel
    return overrides


def config_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path())(fn)
    fn = click.option("--seed", default=None, type=int, help="Override every seed.")(fn)
    fn = click.option("--ratio", default=None, type=float)(fn)
    fn = click.option("--k", default=None, type=int, help="PCA component count.")(fn)
    fn = click.option("--c", default=None, type=float, help="SVM cost parameter.")(fn)
    fn = click.option("--gamma", default=None, type=float)(fn)
    fn = click.option("--kernel", default=None, type=click.Choice(list(KERNEL_KINDS)))(fn)
    return fn


@main.command("train-seg")
@config_options
@_guard
def cmd_train_seg(config_path, seed, ratio, k, c, gamma, kernel):
    """Train the vessel segmentation network on the train split."""
    cfg = load_config(config_path, _common_overrides(seed, ratio, k, c, gamma, kernel))
    manifest, root = _load_manifest(cfg)
    size = cfg["seg"]["input_size"]
    train_imgs, train_masks = _load_pairs(_split_records(manifest, "train"), root, size)
    val_records = manifest.subset("val")
    val_imgs, val_masks = _load_pairs(val_records, root, size) if val_records else ([], [])

    segmenter = _build_segmenter(cfg)
    segmenter.fit(train_imgs, train_masks, val_imgs or None, val_masks or None)

    model_path = _model_path(cfg, "segnet.json", must_exist=False)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    modelio.save_segmenter(segmenter, model_path)
    report = segmenter.report_
    out = _write_report(
        cfg,
        "train_seg_report.json",
        {
            "epochs_run": report.epochs_run,
            "loss_curve": report.loss_curve,
            "stop_reason": report.stop_reason,
            "pixel_accuracy_test": report.pixel_accuracy_test,
            "model_file": str(model_path),
        },
        "train-seg",
    )
    click.echo(
        f"trained {report.epochs_run} epochs ({report.stop_reason}); "
        f"model -> {model_path}, report -> {out}"
    )


@main.command("segment")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@_guard
def cmd_segment(model_path, image_path, out_path):
    """Segment one image and write the vessel mask PNG."""
    for p in (model_path, image_path):
        if not Path(p).exists():
            _fail("MISSING", EXIT_MISSING, f"file not found: {p}")
    try:
        segmenter = modelio.load_segmenter(model_path)
        image = dataio.load_image(image_path, target_size=segmenter.input_size)
    except ValueError as exc:
        _fail("DATA", EXIT_DATA, str(exc))
    mask = segmenter.predict(image)
    dataio.save_mask(mask, out_path)
    click.echo(f"vessel fraction {mask.mean():.4f}; mask -> {out_path}")


@main.command("fit-pca")
@click.option("--channel", type=click.Choice(["rgb", "vessel"]), required=True)
@config_options
@_guard
def cmd_fit_pca(channel, config_path, seed, ratio, k, c, gamma, kernel):
    """Fit the PCA model for one feature channel on the train split."""
    cfg = load_config(config_path, _common_overrides(seed, ratio, k, c, gamma, kernel))
    manifest, root = _load_manifest(cfg)
    pca = _fit_channel_pca(cfg, channel, manifest, root)
    model_path = _model_path(cfg, f"pca_{channel}.json", must_exist=False)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    modelio.save_pca(pca, model_path)
    _write_report(
        cfg,
        f"fit_pca_{channel}_report.json",
        {
            "channel": channel,
            "k": int(pca.n_components_),
            "d": int(pca.n_features_in_),
            "explained_variance_ratio_sum": float(pca.explained_variance_ratio_.sum()),
            "model_file": str(model_path),
        },
        "fit-pca",
    )
    click.echo(f"pca[{channel}] k={pca.n_components_} d={pca.n_features_in_} -> {model_path}")


def _prepare_channel_features(cfg, manifest, root, split):
    """(luminance features, vessel features, labels) for a manifest split."""
    size = cfg["seg"]["input_size"]
    records = _split_records(manifest, split)
    images, labels = _load_images(records, root, size)
    segmenter = modelio.load_segmenter(_model_path(cfg, "segnet.json", must_exist=True))
    pca_rgb = modelio.load_pca(_model_path(cfg, "pca_rgb.json", must_exist=True))
    pca_vessel = modelio.load_pca(_model_path(cfg, "pca_vessel.json", must_exist=True))
    Z_rgb = pca_rgb.transform(_luminance_matrix(images))
    Z_ves = pca_vessel.transform(_vessel_matrix(images, segmenter))
    return images, labels, segmenter, pca_rgb, pca_vessel, Z_rgb, Z_ves


@main.command("train-hybrid")
@config_options
@_guard
def cmd_train_hybrid(config_path, seed, ratio, k, c, gamma, kernel):
    """Train both channel SVMs and bundle the hybrid ensemble."""
    cfg = load_config(config_path, _common_overrides(seed, ratio, k, c, gamma, kernel))
    manifest, root = _load_manifest(cfg)
    images, labels, segmenter, pca_rgb, pca_vessel, Z_rgb, Z_ves = _prepare_channel_features(
        cfg, manifest, root, "train"
    )
    classes = sorted(set(labels))
    if len(classes) < 2:
        _fail("DATA", EXIT_DATA, f"need at least 2 classes in the train split, got {classes}")
    model_rgb = _train_channel_svc(cfg, cfg["svm"]["kernel"], Z_rgb, labels, classes)
    model_ves = _train_channel_svc(cfg, cfg["svm"]["kernel"], Z_ves, labels, classes, seed_offset=1)
    try:
        ens = HybridVotingClassifier(
            model_rgb, model_ves, pca_rgb, pca_vessel, segmenter, ratio=cfg["hybrid"]["ratio"]
        )
    except ValueError as exc:
        _fail("CLASS_MISMATCH", EXIT_CLASS_MISMATCH, str(exc))
    bundle = modelio.save_ensemble(ens, _resolve(cfg, cfg["paths"]["model_dir"]))
    _write_report(
        cfg,
        "train_hybrid_report.json",
        {
            "classes": classes,
            "kernel": cfg["svm"]["kernel"],
            "ratio": cfg["hybrid"]["ratio"],
            "n_train": len(labels),
            "ensemble_file": str(bundle),
        },
        "train-hybrid",
    )
    click.echo(f"hybrid ensemble ({cfg['svm']['kernel']}, ratio={cfg['hybrid']['ratio']}) -> {bundle}")


@main.command("sweep")
@config_options
@_guard
def cmd_sweep(config_path, seed, ratio, k, c, gamma, kernel):
    """Ratio sweep over both kernels on the test split; writes CSV + JSON."""
    cfg = load_config(config_path, _common_overrides(seed, ratio, k, c, gamma, kernel))
    manifest, root = _load_manifest(cfg)
    train = _prepare_channel_features(cfg, manifest, root, "train")
    _, labels_tr, segmenter, pca_rgb, pca_vessel, Ztr_rgb, Ztr_ves = train
    size = cfg["seg"]["input_size"]
    test_records = _split_records(manifest, "test")
    test_images, test_labels = _load_images(test_records, root, size)
    classes = sorted(set(labels_tr))

    ensembles = []
    for kname in KERNEL_KINDS:
        model_rgb = _train_channel_svc(cfg, kname, Ztr_rgb, labels_tr, classes)
        model_ves = _train_channel_svc(cfg, kname, Ztr_ves, labels_tr, classes, seed_offset=1)
        ensembles.append(
            (
                kname,
                HybridVotingClassifier(
                    model_rgb, model_ves, pca_rgb, pca_vessel, segmenter,
                    ratio=cfg["hybrid"]["ratio"],
                ),
            )
        )
    rows = ratio_sweep(ensembles, cfg["hybrid"]["sweep"], test_images, test_labels)

    report_dir = _resolve(cfg, cfg["paths"]["report_dir"])
    report_dir.mkdir(parents=True, exist_ok=True)
    csv_path = report_dir / "sweep.csv"
    sweep_rows_to_csv(rows, csv_path)
    _write_report(
        cfg,
        "sweep_report.json",
        {
            "rows": [{"ratio": r, "kernel": kn, "accuracy": acc} for r, kn, acc in rows],
            "n_test": len(test_labels),
            "csv_file": str(csv_path),
        },
        "sweep",
    )
    click.echo(f"sweep table ({len(rows)} rows) -> {csv_path}")


@main.command("eval")
@click.option("--ensemble", "ensemble_path", required=True, type=click.Path())
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]))
@config_options
@_guard
def cmd_eval(ensemble_path, split, config_path, seed, ratio, k, c, gamma, kernel):
    """Evaluate a stored ensemble on a manifest split."""
    cfg = load_config(config_path, _common_overrides(seed, ratio, k, c, gamma, kernel))
    if not Path(ensemble_path).exists():
        _fail("MISSING", EXIT_MISSING, f"ensemble file not found: {ensemble_path}")
    try:
        ens = modelio.load_ensemble(ensemble_path)
    except (ValueError, FileNotFoundError) as exc:
        _fail("DATA", EXIT_DATA, str(exc))
    if ratio is not None:
        ens.ratio = ratio
    manifest, root = _load_manifest(cfg)
    records = _split_records(manifest, split)
    images, labels = _load_images(records, root, ens.segmenter.input_size)
    try:
        report = evaluate(
            lambda img: ens.predict_single(img)[0], images, labels, list(ens.classes_)
        )
    except ValueError as exc:
        _fail("CLASS_MISMATCH", EXIT_CLASS_MISMATCH, str(exc))
    out = _write_report(
        cfg,
        f"eval_{split}_report.json",
        {"split": split, **report.to_dict()},
        "eval",
    )
    click.echo(f"accuracy {report.accuracy:.4f} on {report.n_test} samples; report -> {out}")


if __name__ == "__main__":
    main()
