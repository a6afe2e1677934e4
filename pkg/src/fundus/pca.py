"""Principal component analysis via covariance eigendecomposition."""

import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from fundus.ops import sym_eig
from fundus.validation import as_float_array, check_matrix

DEFAULT_COMPONENTS = 62

# Eigenvalues below this fraction of the dominant one are treated as
# numerically zero rank when recovering components through the Gram route.
_RANK_RTOL = 1e-12


def _orthonormal_completion(components, d, count):
    """Extend the row set of `components` with `count` orthonormal vectors."""
    rows = [c for c in components]
    added = []
    for basis_idx in range(d):
        if len(added) == count:
            break
        v = np.zeros(d)
        v[basis_idx] = 1.0
        for r in rows:
            v -= (r @ v) * r
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            v /= norm
            rows.append(v)
            added.append(v)
    return np.array(added).reshape(count, d)


def _fix_signs(components):
    # Same convention as sym_eig: largest-magnitude entry positive.
    for i in range(components.shape[0]):
        row = components[i]
        if row[np.argmax(np.abs(row))] < 0:
            components[i] = -row
    return components


class CovariancePCA(TransformerMixin, BaseEstimator):
    """PCA fitted from the (n-1)-normalized sample covariance.

    n_components=None targets the pipeline default of 62 and clamps down
    (with a warning) when the data cannot support it; an explicit integer is
    enforced strictly.
    """

    def __init__(self, n_components=None):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_matrix(X, "samples")
        n, d = X.shape
        if n < 2:
            raise ValueError(f"need at least 2 samples to fit, got {n}")
        k_max = min(n - 1, d)
        if self.n_components is None:
            k = min(DEFAULT_COMPONENTS, k_max)
            if k < DEFAULT_COMPONENTS:
                warnings.warn(
                    f"clamping component count from {DEFAULT_COMPONENTS} to {k} "
                    f"(limited by min(n-1, d) = {k_max})",
                    stacklevel=2,
                )
        else:
            k = int(self.n_components)
            if k < 1 or k > k_max:
                raise ValueError(
                    f"n_components={k} out of range [1, {k_max}] for data of shape {X.shape}"
                )

        # Canonical row order makes the fit invariant to sample permutation:
        # float reductions are order-dependent, so we fix the order ourselves.
        order = np.lexsort(X.T[::-1])
        Xs = X[order]
        mean = Xs.mean(axis=0)
        Xc = Xs - mean
        total_variance = float((Xc**2).sum() / (n - 1))

        if d <= n:
            cov = (Xc.T @ Xc) / (n - 1)
            eig = sym_eig(cov)
            eigenvalues = eig.eigenvalues[:k]
            components = eig.eigenvectors[:, :k].T.copy()
        else:
            gram = (Xc @ Xc.T) / (n - 1)
            eig = sym_eig(gram)
            eigenvalues = eig.eigenvalues[:k]
            cutoff = _RANK_RTOL * max(float(eigenvalues[0]) if k else 0.0, 1e-300)
            usable = int(np.sum(eigenvalues > cutoff))
            components = np.empty((k, d))
            if usable:
                u = eig.eigenvectors[:, :usable]
                comps = Xc.T @ u / np.sqrt((n - 1) * eigenvalues[:usable])
                comps /= np.linalg.norm(comps, axis=0)
                components[:usable] = comps.T
            if usable < k:
                components[usable:] = _orthonormal_completion(
                    components[:usable], d, k - usable
                )
            components = _fix_signs(components)

        self.mean_ = mean
        self.components_ = components
        self.explained_variance_ = np.maximum(eigenvalues, 0.0)
        self.total_variance_ = total_variance
        self.n_components_ = k
        self.n_features_in_ = d
        return self

    def _require_fitted(self):
        if not hasattr(self, "components_"):
            raise RuntimeError("CovariancePCA instance is not fitted yet")

    def transform(self, X):
        """Project onto the retained components; accepts (n, d) or a single (d,) vector."""
        self._require_fitted()
        X = as_float_array(X, "X")
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, model was fitted with {self.n_features_in_}"
            )
        Z = (X - self.mean_) @ self.components_.T
        return Z[0] if single else Z

    def inverse_transform(self, Z):
        """Map projections back to the ambient space: mean + components^T z."""
        self._require_fitted()
        Z = as_float_array(Z, "Z")
        single = Z.ndim == 1
        Z = np.atleast_2d(Z)
        if Z.shape[1] != self.n_components_:
            raise ValueError(
                f"Z has {Z.shape[1]} components, model retains {self.n_components_}"
            )
        X = Z @ self.components_ + self.mean_
        return X[0] if single else X

    @property
    def explained_variance_ratio_(self):
        self._require_fitted()
        if self.total_variance_ <= 0.0:
            return np.zeros(self.n_components_)
        return self.explained_variance_ / self.total_variance_
