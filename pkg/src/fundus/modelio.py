"""Versioned JSON model files.

Arrays are stored as base64-encoded little-endian float64 alongside their
shape, so round-trips are bit-exact. Ensemble bundles reference their five
component files by path relative to the bundle location.
"""

import base64
import json
from pathlib import Path

import numpy as np

from fundus.pca import CovariancePCA
from fundus.segnet import UNetSegmenter
from fundus.svm import BinarySVC, KernelSpec, OneVsOneSVC

FORMAT_VERSION = 1


def encode_array(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
    }


def decode_array(obj):
    data = np.frombuffer(base64.b64decode(obj["data"]), dtype="<f8")
    return data.reshape(obj["shape"]).astype(np.float64)


def _write_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path, expected_kind):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported format_version {doc.get('format_version')!r}"
        )
    if doc.get("kind") != expected_kind:
        raise ValueError(f"{path}: expected a {expected_kind} file, got {doc.get('kind')!r}")
    return doc


# -- segmenter ---------------------------------------------------------------


def save_segmenter(est, path):
    est._require_params()
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "segmenter",
        "config": {
            "input_size": est.input_size,
            "levels": est.levels,
            "base_channels": est.base_channels,
            "skip_mode": est.skip_mode,
            "classes": est.classes,
            "seed": est.seed,
        },
        "parameters": {name: encode_array(p) for name, p in est.params_.items()},
    }
    _write_json(doc, path)


def load_segmenter(path):
    doc = _read_json(path, "segmenter")
    est = UNetSegmenter(**doc["config"])
    est.initialize()
    params = doc["parameters"]
    if set(params) != set(est.params_):
        raise ValueError(f"{path}: parameter names do not match the configuration")
    for name in est.params_:
        arr = decode_array(params[name])
        if arr.shape != est.params_[name].shape:
            raise ValueError(f"{path}: parameter {name} has shape {arr.shape}")
        est.params_[name] = arr
    return est


# -- PCA ----------------------------------------------------------------------


def save_pca(model, path):
    model._require_fitted()
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "pca",
        "k": int(model.n_components_),
        "d": int(model.n_features_in_),
        "mean": model.mean_.tolist(),
        "components": encode_array(model.components_),
        "eigenvalues": model.explained_variance_.tolist(),
        "total_variance": model.total_variance_,
    }
    _write_json(doc, path)


def load_pca(path):
    doc = _read_json(path, "pca")
    model = CovariancePCA(n_components=doc["k"])
    model.mean_ = np.asarray(doc["mean"], dtype=np.float64)
    model.components_ = decode_array(doc["components"])
    model.explained_variance_ = np.asarray(doc["eigenvalues"], dtype=np.float64)
    model.total_variance_ = float(doc["total_variance"])
    model.n_components_ = int(doc["k"])
    model.n_features_in_ = int(doc["d"])
    if model.components_.shape != (model.n_components_, model.n_features_in_):
        raise ValueError(f"{path}: components shape {model.components_.shape} inconsistent")
    return model


# -- multiclass SVM ------------------------------------------------------------


def save_svc(model, path):
    model._require_fitted()
    machines = []
    for machine in model.machines_:
        if machine is None:
            machines.append(None)
            continue
        machines.append(
            {
                "kernel": machine.kernel_spec_.to_dict(),
                "C": machine.C,
                "support_vectors": encode_array(machine.support_vectors_),
                "dual_coefs": machine.dual_coef_.tolist(),
                "bias": machine.intercept_,
                "converged": bool(machine.converged_),
                "alpha_sum": machine._alpha_sum,
            }
        )
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "svc",
        "classes": [str(c) for c in model.classes_],
        "params": {
            "C": model.C,
            "kernel": model.kernel,
            "gamma": model.gamma,
            "degree": model.degree,
            "coef0": model.coef0,
            "tol": model.tol,
            "max_passes": model.max_passes,
            "seed": model.seed if isinstance(model.seed, int) else 0,
        },
        "machines": machines,
    }
    _write_json(doc, path)


def load_svc(path):
    doc = _read_json(path, "svc")
    model = OneVsOneSVC(**doc["params"])
    classes = np.asarray(doc["classes"])
    K = len(classes)
    pairs = [(a, b) for a in range(K) for b in range(a + 1, K)]
    if len(doc["machines"]) != len(pairs):
        raise ValueError(f"{path}: expected {len(pairs)} machines, got {len(doc['machines'])}")
    machines = []
    for entry in doc["machines"]:
        if entry is None:
            machines.append(None)
            continue
        spec = KernelSpec(**entry["kernel"])
        machine = BinarySVC(
            C=entry["C"],
            kernel=spec.kind,
            gamma=spec.gamma,
            degree=spec.degree,
            coef0=spec.coef0,
        )
        machine.support_vectors_ = decode_array(entry["support_vectors"])
        machine.dual_coef_ = np.asarray(entry["dual_coefs"], dtype=np.float64)
        machine.intercept_ = float(entry["bias"])
        machine.converged_ = bool(entry["converged"])
        machine.n_iter_ = 0
        machine.kernel_spec_ = spec
        machine._alpha_sum = float(entry.get("alpha_sum", np.abs(machine.dual_coef_).sum()))
        machines.append(machine)
    model.classes_ = classes
    model.pairs_ = pairs
    model.machines_ = machines
    model.omitted_pairs_ = [pairs[p] for p, m in enumerate(machines) if m is None]
    return model


# -- ensemble bundle ------------------------------------------------------------


def save_ensemble(ens, directory, name="ensemble.json"):
    """Write the five component models plus a bundle file referencing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    parts = {
        "rgb_svm": "svm_rgb.json",
        "vessel_svm": "svm_vessel.json",
        "pca_rgb": "pca_rgb.json",
        "pca_vessel": "pca_vessel.json",
        "segmenter": "segnet.json",
    }
    save_svc(ens.rgb_model, directory / parts["rgb_svm"])
    save_svc(ens.vessel_model, directory / parts["vessel_svm"])
    save_pca(ens.pca_rgb, directory / parts["pca_rgb"])
    save_pca(ens.pca_vessel, directory / parts["pca_vessel"])
    save_segmenter(ens.segmenter, directory / parts["segmenter"])
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "ensemble",
        "ratio": ens.ratio,
        "components": parts,
    }
    _write_json(doc, directory / name)
    return directory / name


def load_ensemble(path):
    from fundus.hybrid import HybridVotingClassifier

    path = Path(path)
    doc = _read_json(path, "ensemble")
    base = path.parent
    parts = doc["components"]
    return HybridVotingClassifier(
        rgb_model=load_svc(base / parts["rgb_svm"]),
        vessel_model=load_svc(base / parts["vessel_svm"]),
        pca_rgb=load_pca(base / parts["pca_rgb"]),
        pca_vessel=load_pca(base / parts["pca_vessel"]),
        segmenter=load_segmenter(base / parts["segmenter"]),
        ratio=doc["ratio"],
    )
