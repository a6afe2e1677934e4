"""Weighted-vote fusion of the two feature-channel classifiers.

One multiclass SVM sees luminance-pixel PCA features of the raw image, the
other sees PCA features of the segmented vessel mask. Their one-vs-one vote
vectors, normalized by the machine count, are mixed with ratio r (weight on
the raw-image channel) and the fused argmax is the prediction.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from fundus.dataio import to_luminance
from fundus.validation import check_image


@dataclass
class EvalReport:
    """Exact-match accuracy plus the confusion matrix (rows = true class)."""

    accuracy: float
    confusion: np.ndarray
    per_class_recall: np.ndarray
    n_test: int
    classes: list

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "per_class_recall": self.per_class_recall.tolist(),
            "n_test": self.n_test,
            "classes": list(self.classes),
        }


def evaluate(predict_fn, images, labels, classes):
    """Score a predictor on a labeled set; labels must come from `classes`."""
    classes = list(classes)
    if len(images) == 0:
        raise ValueError("evaluation set is empty")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} samples but {len(labels)} labels")
    index = {c: i for i, c in enumerate(classes)}
    K = len(classes)
    confusion = np.zeros((K, K), dtype=np.int64)
    for image, label in zip(images, labels):
        if label not in index:
            raise ValueError(f"unknown label {label!r}")
        pred = predict_fn(image)
        if pred not in index:
            raise ValueError(f"predictor returned unknown label {pred!r}")
        confusion[index[label], index[pred]] += 1
    n = len(images)
    row_sums = confusion.sum(axis=1)
    recall = np.divide(
        np.diag(confusion), row_sums, out=np.zeros(K, dtype=np.float64), where=row_sums > 0
    )
    return EvalReport(
        accuracy=float(np.trace(confusion)) / n,
        confusion=confusion,
        per_class_recall=recall,
        n_test=n,
        classes=classes,
    )


def featurize_rgb(image, pca):
    """Luminance-flattened image projected by the raw-image-channel PCA."""
    image = check_image(image)
    return pca.transform(to_luminance(image).ravel())


def featurize_vessel(image, segmenter, pca):
    """Segment, flatten the binary mask as reals, project by the vessel PCA."""
    image = check_image(image)
    mask = segmenter.predict(image)
    return pca.transform(mask.astype(np.float64).ravel())


class HybridVotingClassifier(ClassifierMixin, BaseEstimator):
    """Fuses the two channel SVCs: scores = r * votes_rgb/V + (1-r) * votes_vessel/V.

    V = K(K-1)/2 normalizes each vote vector; ties at the fused argmax go to
    the lowest class index. Components are prefit; construction rejects
    channel models whose ordered class lists differ.
    """

    def __init__(self, rgb_model, vessel_model, pca_rgb, pca_vessel, segmenter, ratio=0.47):
        self.rgb_model = rgb_model
        self.vessel_model = vessel_model
        self.pca_rgb = pca_rgb
        self.pca_vessel = pca_vessel
        self.segmenter = segmenter
        self.ratio = ratio
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
        if list(rgb_model.classes_) != list(vessel_model.classes_):
            raise ValueError("channel models disagree on the ordered class list")

    @property
    def classes_(self):
        return self.rgb_model.classes_

    def channel_votes(self, image):
        """(votes_rgb, votes_vessel) for one image, each of length K."""
        z_rgb = featurize_rgb(image, self.pca_rgb)
        z_ves = featurize_vessel(image, self.segmenter, self.pca_vessel)
        votes_rgb = self.rgb_model.vote_counts(z_rgb[None, :])[0]
        votes_ves = self.vessel_model.vote_counts(z_ves[None, :])[0]
        return votes_rgb, votes_ves

    def fused_scores(self, image, ratio=None):
        r = self.ratio if ratio is None else ratio
        votes_rgb, votes_ves = self.channel_votes(image)
        return fuse_votes(votes_rgb, votes_ves, r)

    def predict_single(self, image):
        """(label, fused per-class scores) for one image."""
        scores = self.fused_scores(image)
        return self.classes_[int(np.argmax(scores))], scores

    def predict(self, images):
        return np.array([self.predict_single(img)[0] for img in images])


def fuse_votes(votes_rgb, votes_vessel, ratio):
    """Mix normalized vote vectors; ratio weights the raw-image channel."""
    votes_rgb = np.asarray(votes_rgb, dtype=np.float64)
    votes_vessel = np.asarray(votes_vessel, dtype=np.float64)
    K = len(votes_rgb)
    V = K * (K - 1) / 2
    return ratio * votes_rgb / V + (1.0 - ratio) * votes_vessel / V


def ratio_sweep(ensembles_by_kernel, ratios, images, labels):
    """Accuracy per (ratio, kernel) on a labeled set.

    `ensembles_by_kernel` is an ordered list of (kernel_name, ensemble)
    pairs. Votes are computed once per kernel, so the ratio endpoints equal
    the single-channel accuracies exactly by the argmax identity. Returns
    rows [(ratio, kernel, accuracy), ...] in input ratio order.
    """
    if len(images) == 0:
        raise ValueError("sweep needs a nonempty test set")
    ratios = list(ratios)
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"sweep ratios must lie in [0, 1], got {r}")
    rows = []
    votes_cache = {}
    for kernel_name, ens in ensembles_by_kernel:
        votes_cache[kernel_name] = [ens.channel_votes(img) for img in images]
    for r in ratios:
        for kernel_name, ens in ensembles_by_kernel:
            classes = list(ens.classes_)
            hits = 0
            for (votes_rgb, votes_ves), label in zip(votes_cache[kernel_name], labels):
                scores = fuse_votes(votes_rgb, votes_ves, r)
                hits += bool(classes[int(np.argmax(scores))] == label)
            rows.append((float(r), kernel_name, hits / len(images)))
    return rows


def sweep_rows_to_csv(rows, path):
    with open(path, "w", newline="") as fh:
        fh.write("ratio,kernel,accuracy\n")
        for ratio, kernel, accuracy in rows:
            fh.write(f"{float(ratio)!r},{kernel},{float(accuracy)!r}\n")
