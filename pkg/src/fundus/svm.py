"""Soft-margin kernel SVM trained by sequential minimal optimization.

BinarySVC solves the C-SVM dual with an SMO loop that always optimizes the
maximally KKT-violating pair (seeded random tie-break), so training is
deterministic given a seed. OneVsOneSVC assembles one binary machine per
class pair and predicts by max-wins voting.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from fundus.validation import as_float_array, check_labels_pm1, check_matrix

KERNEL_KINDS = ("rbf", "poly")

DEFAULT_C = 128.0
DEFAULT_GAMMA = 0.0078

MAX_CLASSES = 32


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and its parameters. degree/coef0 apply to 'poly' only."""

    kind: str = "rbf"
    gamma: float = DEFAULT_GAMMA
    degree: int = 3
    coef0: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"kernel kind must be one of {KERNEL_KINDS}, got {self.kind!r}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.kind == "poly" and int(self.degree) < 1:
            raise ValueError(f"polynomial degree must be >= 1, got {self.degree}")

    def to_dict(self):
        return {
            "kind": self.kind,
            "gamma": self.gamma,
            "degree": int(self.degree),
            "coef0": self.coef0,
        }


def gram_matrix(spec, X, Y=None):
    """Kernel matrix K[i, j] = k(X[i], Y[j]); Y defaults to X."""
    X = check_matrix(X, "X")
    Y = X if Y is None else check_matrix(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature dimensions differ: {X.shape[1]} vs {Y.shape[1]}")
    if spec.kind == "rbf":
        # Direct differences: slower than the dot-product expansion but free
        # of cancellation, which the scaling-invariance contract relies on.
        diff = X[:, None, :] - Y[None, :, :]
        return np.exp(-spec.gamma * np.einsum("ijk,ijk->ij", diff, diff))
    return (spec.gamma * (X @ Y.T) + spec.coef0) ** int(spec.degree)


def kernel_eval(spec, x, y):
    """Single kernel evaluation k(x, y)."""
    x = as_float_array(x, "x").ravel()
    y = as_float_array(y, "y").ravel()
    if x.shape != y.shape:
        raise ValueError(f"vector dimensions differ: {x.shape[0]} vs {y.shape[0]}")
    if spec.kind == "rbf":
        d = x - y
        return float(np.exp(-spec.gamma * (d @ d)))
    return float((spec.gamma * (x @ y) + spec.coef0) ** int(spec.degree))


def _pick(rng, candidates):
    if len(candidates) == 1:
        return int(candidates[0])
    return int(rng.choice(candidates))


def _smo_solve(K, y, C, tol, max_iter, rng):
    """Minimize 0.5 a'Qa - sum(a) over 0 <= a <= C, y'a = 0, Q = yy' * K.

    Repeatedly optimizes the maximally violating pair (largest KKT gap) in
    closed form. Returns (alpha, bias, converged, n_iter); `converged` means
    the KKT gap fell at or below tol.
    """
    n = len(y)
    bound_eps = 1e-10 * max(1.0, C)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of the dual objective at alpha = 0
    pos = y > 0
    converged = False
    it = 0
    while it < max_iter:
        yg = -y * grad
        at_lo = alpha <= bound_eps
        at_hi = alpha >= C - bound_eps
        up = (pos & ~at_hi) | (~pos & ~at_lo)
        low = (~pos & ~at_hi) | (pos & ~at_lo)
        if not up.any() or not low.any():
            converged = True
            break
        m = yg[up].max()
        M = yg[low].min()
        if m - M <= tol:
            converged = True
            break
        i = _pick(rng, np.flatnonzero(up & (yg >= m - 1e-12)))
        j = _pick(rng, np.flatnonzero(low & (yg <= M + 1e-12)))
        eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
        t = (m - M) / max(eta, 1e-12)
        t_cap_i = (C - alpha[i]) if pos[i] else alpha[i]
        t_cap_j = alpha[j] if pos[j] else (C - alpha[j])
        t = min(t, t_cap_i, t_cap_j)
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        alpha[i] = min(max(alpha[i], 0.0), C)
        alpha[j] = min(max(alpha[j], 0.0), C)
        grad += t * y * (K[:, i] - K[:, j])
        it += 1

    yg = -y * grad
    free = (alpha > bound_eps) & (alpha < C - bound_eps)
    if free.any():
        bias = float(yg[free].mean())
    else:
        at_lo = alpha <= bound_eps
        at_hi = alpha >= C - bound_eps
        up = (pos & ~at_hi) | (~pos & ~at_lo)
        low = (~pos & ~at_hi) | (pos & ~at_lo)
        hi = yg[up].max() if up.any() else yg.min()
        lo = yg[low].min() if low.any() else yg.max()
        bias = float((hi + lo) / 2.0)
    return alpha, bias, converged, it


class BinarySVC(ClassifierMixin, BaseEstimator):
    """Binary C-SVM with labels in {-1, +1}, trained by SMO.

    max_passes bounds the optimization effort: the pair loop runs at most
    max_passes * n_samples closed-form updates before giving up (the model
    is still returned, with converged_=False).
    """

    def __init__(
        self,
        C=DEFAULT_C,
        kernel="rbf",
        gamma=DEFAULT_GAMMA,
        degree=3,
        coef0=0.0,
        tol=1e-3,
        max_passes=200,
        seed=0,
    ):
        self.C = C
        self.kernel = kernel
        self.gamma = gamma
        self.degree = degree
        self.coef0 = coef0
        self.tol = tol
        self.max_passes = max_passes
        self.seed = seed

    def _spec(self):
        return KernelSpec(self.kernel, self.gamma, self.degree, self.coef0)

    def fit(self, X, y):
        X = check_matrix(X, "X")
        y = check_labels_pm1(y)
        if len(y) != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {len(y)} labels")
        if not self.C > 0:
            raise ValueError(f"C must be positive, got {self.C}")
        spec = self._spec()
        rng = np.random.default_rng(self.seed)  # int or SeedSequence
        K = gram_matrix(spec, X)
        alpha, bias, converged, n_iter = _smo_solve(
            K, y, float(self.C), float(self.tol), int(self.max_passes) * len(y), rng
        )
        sv = alpha > 0.0
        self.support_vectors_ = X[sv].copy()
        self.dual_coef_ = (alpha * y)[sv]
        self.intercept_ = bias
        self.converged_ = converged
        self.n_iter_ = n_iter
        self.kernel_spec_ = spec
        # Retained for the dual-objective diagnostic below.
        self._alpha_sum = float(alpha.sum())
        return self

    def _require_fitted(self):
        if not hasattr(self, "support_vectors_"):
            raise RuntimeError("BinarySVC instance is not fitted yet")

    def decision_function(self, X):
        """sum_i dual_coef_i * k(sv_i, x) + bias; sign is the predicted label."""
        self._require_fitted()
        X = as_float_array(X, "X")
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.support_vectors_.shape[1]:
            raise ValueError(
                f"X has {X.shape[1]} features, model expects {self.support_vectors_.shape[1]}"
            )
        if len(self.dual_coef_) == 0:
            f = np.full(X.shape[0], self.intercept_)
        else:
            f = gram_matrix(self.kernel_spec_, X, self.support_vectors_) @ self.dual_coef_
            f += self.intercept_
        return float(f[0]) if single else f

    def predict(self, X):
        f = self.decision_function(X)
        if isinstance(f, float):
            return 1.0 if f > 0 else -1.0
        return np.where(f > 0, 1.0, -1.0)

    def dual_objective(self):
        """Dual value sum(a) - 0.5 sum_ij a_i a_j y_i y_j K_ij of the stored solution."""
        self._require_fitted()
        if len(self.dual_coef_) == 0:
            return 0.0
        Ksv = gram_matrix(self.kernel_spec_, self.support_vectors_)
        return float(self._alpha_sum - 0.5 * self.dual_coef_ @ Ksv @ self.dual_coef_)


def primal_hinge_objective(X, y, w, bias, lam):
    """Mean hinge loss plus lam * ||w||^2 for an explicit linear weight vector.

    The margin includes the bias term; with lam = 1/(2nC) this functional is
    minimized by the dual solution's w = sum_i alpha_i y_i x_i.
    """
    X = check_matrix(X, "X")
    y = np.asarray(y, dtype=np.float64).ravel()
    w = as_float_array(w, "w").ravel()
    margins = y * (X @ w + bias)
    return float(np.mean(np.maximum(0.0, 1.0 - margins)) + lam * (w @ w))


def _pair_seed(seed, pair_index):
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(pair_index,))


class OneVsOneSVC(ClassifierMixin, BaseEstimator):
    """One-vs-one multiclass SVM with max-wins voting.

    Trains K(K-1)/2 binary machines, one per unordered class pair, each on
    that pair's samples only. The lower-index class of a pair maps to +1.
    n_jobs > 1 trains pairs on a thread pool; per-pair seeds keep the result
    independent of scheduling.
    """

    def __init__(
        self,
        C=DEFAULT_C,
        kernel="rbf",
        gamma=DEFAULT_GAMMA,
        degree=3,
        coef0=0.0,
        tol=1e-3,
        max_passes=200,
        seed=0,
        n_jobs=None,
    ):
        self.C = C
        self.kernel = kernel
        self.gamma = gamma
        self.degree = degree
        self.coef0 = coef0
        self.tol = tol
        self.max_passes = max_passes
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y, classes=None):
        X = check_matrix(X, "X")
        y = np.asarray(y)
        if len(y) != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {len(y)} labels")
        if classes is None:
            classes = np.unique(y)
        else:
            classes = np.asarray(classes)
            unknown = np.setdiff1d(np.unique(y), classes)
            if unknown.size:
                raise ValueError(f"labels {unknown[:5]} not in the declared class list")
        if len(classes) < 2:
            raise ValueError("need at least 2 classes")
        if len(classes) > MAX_CLASSES:
            raise ValueError(f"at most {MAX_CLASSES} classes supported, got {len(classes)}")
        self.classes_ = classes
        K = len(classes)
        by_class = [np.flatnonzero(y == c) for c in classes]
        pairs = [(a, b) for a in range(K) for b in range(a + 1, K)]

        def train_pair(pair_index):
            a, b = pairs[pair_index]
            ia, ib = by_class[a], by_class[b]
            if len(ia) == 0 or len(ib) == 0:
                return None
            rows = np.concatenate([ia, ib])
            y_pair = np.concatenate([np.ones(len(ia)), -np.ones(len(ib))])
            machine = BinarySVC(
                C=self.C,
                kernel=self.kernel,
                gamma=self.gamma,
                degree=self.degree,
                coef0=self.coef0,
                tol=self.tol,
                max_passes=self.max_passes,
                seed=0,
            )
            # Per-pair deterministic seed, independent of training order.
            machine.seed = _pair_seed(self.seed, pair_index)
            return machine.fit(X[rows], y_pair)

        n_jobs = self.n_jobs or 1
        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                machines = list(pool.map(train_pair, range(len(pairs))))
        else:
            machines = [train_pair(p) for p in range(len(pairs))]

        self.pairs_ = pairs
        self.machines_ = machines
        self.omitted_pairs_ = [pairs[p] for p, mach in enumerate(machines) if mach is None]
        return self

    def _require_fitted(self):
        if not hasattr(self, "machines_"):
            raise RuntimeError("OneVsOneSVC instance is not fitted yet")

    def vote_counts(self, X):
        """Per-class vote counts, shape (n_samples, n_classes)."""
        self._require_fitted()
        X = np.atleast_2d(as_float_array(X, "X"))
        votes = np.zeros((X.shape[0], len(self.classes_)), dtype=np.int64)
        for (a, b), machine in zip(self.pairs_, self.machines_):
            if machine is None:
                continue
            f = machine.decision_function(X)
            f = np.atleast_1d(f)
            votes[:, a] += f > 0
            votes[:, b] += f <= 0
        return votes

    def predict(self, X):
        """Max-wins label per sample; vote ties resolve to the lowest class index."""
        single = np.asarray(X).ndim == 1
        votes = self.vote_counts(X)
        idx = votes.argmax(axis=1)
        labels = self.classes_[idx]
        return labels[0] if single else labels


def thread_count_from_env(default=1):
    """Parallelism bound from FUNDUS_THREADS (>= 1)."""
    raw = os.environ.get("FUNDUS_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"FUNDUS_THREADS must be an integer, got {raw!r}") from None
