"""Encoder-decoder vessel segmentation network.

A small U-Net-style network: each stage applies two 3x3 same-padding
convolutions with ReLU, the encoder downsamples with 2x2 max pooling, the
decoder upsamples with nearest-neighbor 2x and (depending on skip_mode)
concatenates encoder features. Training minimizes a boundary-weighted
cross entropy with plain SGD + momentum; all gradients are hand-derived
through ops.py.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from fundus import ops
from fundus.validation import check_image, check_mask

IN_CHANNELS = 3

SKIP_MODES = ("all", "halved", "halfwidth")
WEIGHT_FORMS = ("printed", "squared")


@dataclass(frozen=True)
class SegmenterConfig:
    """Architecture hyperparameters; input_size must divide by 2**levels."""

    input_size: int = 64
    levels: int = 3
    base_channels: int = 8
    skip_mode: str = "halved"
    classes: int = 2
    seed: int = 0

    def validate(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_size % (2**self.levels) != 0:
            raise ValueError(
                f"input_size={self.input_size} not divisible by 2**levels={2**self.levels}"
            )
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")
        if self.classes != 2:
            raise ValueError(f"only 2-class segmentation is supported, got {self.classes}")
        return self

    def skip_levels(self):
        """Encoder levels whose features are forwarded to the decoder."""
        if self.skip_mode == "halved":
            # Every other level, deepest first.
            return set(range(self.levels - 1, -1, -2))
        return set(range(self.levels))

    def channels(self, level):
        return self.base_channels * (2**level)


@dataclass
class TrainReport:
    epochs_run: int
    loss_curve: list
    stop_reason: str  # converged | max_epochs | diverged
    pixel_accuracy_test: float | None = None


# ---------------------------------------------------------------------------
# Boundary-weighted loss


def boundary_term(dist1, dist2, w0=10.0, sigma=5.0, form="printed"):
    """Boundary emphasis from distances to the two nearest edge pixels.

    form='printed' squares the exponential, exp(-(d1+d2)/(2 sigma^2))**2;
    form='squared' squares the distance sum inside, the conventional
    exp(-(d1+d2)**2/(2 sigma^2)). At d1 = d2 = 0 both give exactly w0.
    """
    if form not in WEIGHT_FORMS:
        raise ValueError(f"form must be one of {WEIGHT_FORMS}, got {form!r}")
    s = np.asarray(dist1, dtype=np.float64) + np.asarray(dist2, dtype=np.float64)
    if form == "printed":
        return w0 * np.exp(-s / (2 * sigma**2)) ** 2
    return w0 * np.exp(-(s**2) / (2 * sigma**2))


def edge_pixels(mask):
    """Boolean map of pixels 4-adjacent to the opposite class."""
    m = np.asarray(mask)
    edge = np.zeros(m.shape, dtype=bool)
    edge[:-1, :] |= m[:-1, :] != m[1:, :]
    edge[1:, :] |= m[1:, :] != m[:-1, :]
    edge[:, :-1] |= m[:, :-1] != m[:, 1:]
    edge[:, 1:] |= m[:, 1:] != m[:, :-1]
    return edge


def compute_weight_map(mask, w0=10.0, sigma=5.0, class_balance=True, form="printed"):
    """Per-pixel loss weights w(x) = w_c(x) + boundary term.

    d1/d2 are Euclidean distances from each pixel to its nearest and
    second-nearest distinct edge pixels; with class_balance the base weight
    is 0.5 / frequency(class(x)), otherwise 1. A single-class mask has no
    edges and the boundary term is defined as 0.
    """
    mask = check_mask(mask)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    H, W = mask.shape
    if class_balance:
        freq1 = float(mask.mean())
        wc_by_class = np.array(
            [0.5 / (1.0 - freq1) if freq1 < 1.0 else 1.0, 0.5 / freq1 if freq1 > 0.0 else 1.0]
        )
        wc = wc_by_class[mask]
    else:
        wc = np.ones((H, W))
    edges = np.argwhere(edge_pixels(mask))
    if len(edges) == 0:
        return wc
    yy, xx = np.mgrid[0:H, 0:W]
    coords = np.column_stack([yy.ravel(), xx.ravel()]).astype(np.float64)
    dists, _ = cKDTree(edges.astype(np.float64)).query(coords, k=2)
    d1 = dists[:, 0].reshape(H, W)
    d2 = dists[:, 1].reshape(H, W)
    return wc + boundary_term(d1, d2, w0=w0, sigma=sigma, form=form)


def weighted_cross_entropy(probs, mask, weight_map):
    """Weight-normalized cross entropy and its gradient w.r.t. the logits.

    loss = -sum_x w(x) log p_label(x) / sum_x w(x). The gradient assumes
    probs came from softmax_channels, so d loss / d logits has the usual
    (p - onehot) form scaled by the normalized weights.
    """
    probs = np.asarray(probs, dtype=np.float64)
    mask = check_mask(mask, shape=probs.shape[:2])
    w = np.asarray(weight_map, dtype=np.float64)
    if w.shape != probs.shape[:2]:
        raise ValueError(f"weight map shape {w.shape} does not match probs {probs.shape[:2]}")
    sums = probs.sum(axis=2)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("probs rows are not normalized")
    labels = mask.astype(np.intp)
    p_true = np.take_along_axis(probs, labels[:, :, None], axis=2)[:, :, 0]
    w_total = w.sum()
    loss = float(-(w * np.log(np.maximum(p_true, 1e-12))).sum() / w_total)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[:, :, None], 1.0, axis=2)
    grad_logits = w[:, :, None] * (probs - onehot) / w_total
    return loss, grad_logits


# ---------------------------------------------------------------------------
# The network


def _conv_block_names(stage):
    return (f"{stage}_w1", f"{stage}_b1", f"{stage}_w2", f"{stage}_b2")


class UNetSegmenter(BaseEstimator):
    """Vessel/background segmenter exposing a fit/predict estimator API.

    Parameters mirror SegmenterConfig plus the training options. initialize()
    builds He-initialized parameters deterministically from `seed`; fit()
    calls it if needed and then runs per-sample SGD in the given data order
    (shuffling, if desired, is the caller's job, which keeps loss curves
    reproducible from seeds alone).
    """

    def __init__(
        self,
        input_size=64,
        levels=3,
        base_channels=8,
        skip_mode="halved",
        classes=2,
        seed=0,
        lr=0.01,
        momentum=0.9,
        max_epochs=60,
        stop_loss=1e-3,
        w0=10.0,
        sigma=5.0,
        class_balance=True,
        weight_form="printed",
        augment=True,
        augment_seed=0,
    ):
        self.input_size = input_size
        self.levels = levels
        self.base_channels = base_channels
        self.skip_mode = skip_mode
        self.classes = classes
        self.seed = seed
        self.lr = lr
        self.momentum = momentum
        self.max_epochs = max_epochs
        self.stop_loss = stop_loss
        self.w0 = w0
        self.sigma = sigma
        self.class_balance = class_balance
        self.weight_form = weight_form
        self.augment = augment
        self.augment_seed = augment_seed

    # -- construction -------------------------------------------------

    @property
    def config(self):
        return SegmenterConfig(
            input_size=self.input_size,
            levels=self.levels,
            base_channels=self.base_channels,
            skip_mode=self.skip_mode,
            classes=self.classes,
            seed=self.seed,
        ).validate()

    def _skip_channels(self, cfg, level):
        if level not in cfg.skip_levels():
            return 0
        c = cfg.channels(level)
        return max(1, c // 2) if cfg.skip_mode == "halfwidth" else c

    def _layer_plan(self, cfg):
        """(stage name, c_in of conv1, c_work) for every two-conv block, plus head."""
        plan = []
        c_prev = IN_CHANNELS
        for i in range(cfg.levels):
            plan.append((f"enc{i}", c_prev, cfg.channels(i)))
            c_prev = cfg.channels(i)
        plan.append(("mid", c_prev, cfg.channels(cfg.levels)))
        for i in range(cfg.levels - 1, -1, -1):
            c_in = cfg.channels(i + 1) + self._skip_channels(cfg, i)
            plan.append((f"dec{i}", c_in, cfg.channels(i)))
        return plan

    def initialize(self):
        """Build parameters with fan-in-scaled He initialization (seeded)."""
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence(int(self.seed)))
        params = {}
        for stage, c_in, c in self._layer_plan(cfg):
            w1, b1, w2, b2 = _conv_block_names(stage)
            params[w1] = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), (3, 3, c_in, c))
            params[b1] = np.zeros(c)
            params[w2] = rng.normal(0.0, np.sqrt(2.0 / (9 * c)), (3, 3, c, c))
            params[b2] = np.zeros(c)
        params["out_w"] = rng.normal(
            0.0, np.sqrt(2.0 / cfg.base_channels), (1, 1, cfg.base_channels, cfg.classes)
        )
        params["out_b"] = np.zeros(cfg.classes)
        self.params_ = params
        return self

    def parameter_count(self):
        self._require_params()
        return int(sum(p.size for p in self.params_.values()))

    def _require_params(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("UNetSegmenter has no parameters; call initialize() or fit()")

    # -- forward / backward -------------------------------------------

    def _block_forward(self, x, stage, cache=None):
        p = self.params_
        w1, b1, w2, b2 = _conv_block_names(stage)
        z1 = ops.conv2d_forward(x, p[w1], p[b1], "same")
        a1 = ops.relu(z1)
        z2 = ops.conv2d_forward(a1, p[w2], p[b2], "same")
        a2 = ops.relu(z2)
        if cache is not None:
            cache[stage] = (x, z1, a1, z2)
        return a2

    def _block_backward(self, grad_out, stage, cache, grads):
        p = self.params_
        w1, b1, w2, b2 = _conv_block_names(stage)
        x, z1, a1, z2 = cache[stage]
        g = ops.relu_backward(z2, grad_out)
        lg2 = ops.conv2d_backward(a1, p[w2], g, "same")
        grads[w2] = lg2.kernel_grad
        grads[b2] = lg2.bias_grad
        g = ops.relu_backward(z1, lg2.input_grad)
        lg1 = ops.conv2d_backward(x, p[w1], g, "same")
        grads[w1] = lg1.kernel_grad
        grads[b1] = lg1.bias_grad
        return lg1.input_grad

    def forward_logits(self, image, cache=None):
        """Per-pixel class logits, shape (H, W, classes)."""
        self._require_params()
        cfg = self.config
        x = check_image(image, size=cfg.input_size)
        skips = {}
        for i in range(cfg.levels):
            a = self._block_forward(x, f"enc{i}", cache)
            skips[i] = a
            x, idx = ops.maxpool2x2(a)
            if cache is not None:
                cache[f"pool{i}"] = idx
        x = self._block_forward(x, "mid", cache)
        for i in range(cfg.levels - 1, -1, -1):
            up = ops.upsample2x(x)
            n_skip = self._skip_channels(cfg, i)
            if n_skip:
                x = np.concatenate([up, skips[i][:, :, :n_skip]], axis=2)
            else:
                x = up
            if cache is not None:
                cache[f"join{i}"] = (up.shape[2], n_skip)
            x = self._block_forward(x, f"dec{i}", cache)
        logits = ops.conv2d_forward(x, self.params_["out_w"], self.params_["out_b"], "same")
        if cache is not None:
            cache["out_in"] = x
        return logits

    def backward(self, grad_logits, cache):
        """Parameter gradients for one sample; needs the cache from forward_logits."""
        cfg = self.config
        grads = {}
        lg = ops.conv2d_backward(cache["out_in"], self.params_["out_w"], grad_logits, "same")
        grads["out_w"] = lg.kernel_grad
        grads["out_b"] = lg.bias_grad
        g = lg.input_grad
        skip_grads = {}
        for i in range(cfg.levels):
            g = self._block_backward(g, f"dec{i}", cache, grads)
            c_up, n_skip = cache[f"join{i}"]
            if n_skip:
                skip_grads[i] = g[:, :, c_up:]
                g = g[:, :, :c_up]
            g = ops.upsample2x_backward(g)
        g = self._block_backward(g, "mid", cache, grads)
        for i in range(cfg.levels - 1, -1, -1):
            g = ops.maxpool2x2_backward(cache[f"pool{i}"], g)
            if i in skip_grads:
                z2 = cache[f"enc{i}"][3]
                add = np.zeros((z2.shape[0], z2.shape[1], cfg.channels(i)))
                sg = skip_grads[i]
                add[:, :, : sg.shape[2]] = sg
                g = g + add
            g = self._block_backward(g, f"enc{i}", cache, grads)
        return grads

    # -- inference ------------------------------------------------------

    def predict_proba(self, image):
        return ops.softmax_channels(self.forward_logits(image))

    def predict(self, image):
        """Argmax segmentation mask; channel ties resolve to class 0."""
        probs = self.predict_proba(image)
        return probs.argmax(axis=2).astype(np.uint8)

    def pixel_accuracy(self, images, masks):
        total = 0
        hits = 0
        for img, msk in zip(images, masks):
            pred = self.predict(img)
            hits += int((pred == np.asarray(msk)).sum())
            total += pred.size
        return hits / total if total else float("nan")

    # -- training ---------------------------------------------------------

    def _sample_loss_grads(self, image, mask):
        cache = {}
        logits = self.forward_logits(image, cache)
        probs = ops.softmax_channels(logits)
        wmap = compute_weight_map(
            mask,
            w0=self.w0,
            sigma=self.sigma,
            class_balance=self.class_balance,
            form=self.weight_form,
        )
        loss, grad_logits = weighted_cross_entropy(probs, mask, wmap)
        return loss, self.backward(grad_logits, cache)

    def fit(self, images, masks, val_images=None, val_masks=None):
        """Train with per-sample SGD + momentum until stop_loss or max_epochs."""
        from fundus.dataio import augment as augment_pair

        cfg = self.config
        images = [check_image(img, size=cfg.input_size) for img in images]
        masks = [check_mask(m, shape=(cfg.input_size, cfg.input_size)) for m in masks]
        if len(images) == 0:
            raise ValueError("training set is empty")
        if len(images) != len(masks):
            raise ValueError(f"{len(images)} images but {len(masks)} masks")
        if not hasattr(self, "params_"):
            self.initialize()

        velocity = {k: np.zeros_like(v) for k, v in self.params_.items()}
        aug_rng = np.random.default_rng(np.random.SeedSequence(int(self.augment_seed)))
        curve = []
        stop_reason = "max_epochs"
        for _epoch in range(int(self.max_epochs)):
            snapshot = {k: v.copy() for k, v in self.params_.items()}
            epoch_loss = 0.0
            diverged = False
            for img, msk in zip(images, masks):
                if self.augment:
                    img, msk = augment_pair(img, msk, aug_rng)
                loss, grads = self._sample_loss_grads(img, msk)
                if not np.isfinite(loss):
                    diverged = True
                    break
                epoch_loss += loss
                for k, g in grads.items():
                    velocity[k] = self.momentum * velocity[k] - self.lr * g
                    self.params_[k] += velocity[k]
                if any(not np.isfinite(v).all() for v in self.params_.values()):
                    diverged = True
                    break
            if diverged:
                self.params_ = snapshot
                stop_reason = "diverged"
                break
            mean_loss = epoch_loss / len(images)
            curve.append(mean_loss)
            if mean_loss < self.stop_loss:
                stop_reason = "converged"
                break

        accuracy = None
        if val_images is not None and len(val_images):
            accuracy = self.pixel_accuracy(val_images, val_masks)
        if stop_reason == "diverged":
            warnings.warn("training diverged (non-finite loss); parameters rolled back")
        self.report_ = TrainReport(
            epochs_run=len(curve),
            loss_curve=curve,
            stop_reason=stop_reason,
            pixel_accuracy_test=accuracy,
        )
        return self
