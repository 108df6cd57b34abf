from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, InputError

DEFAULT_CUTOFFS = (0.90, 0.95, 0.99, 0.999)
_STD_FLOOR = 1e-12
_CUM_TOL = 1e-12


@dataclass
class PcaState:
    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray           # boolean mask of non-constant input dims
    components: np.ndarray     # (d_kept, r), orthonormal columns
    eigenvalues: np.ndarray    # (r,), non-increasing
    explained_ratio: np.ndarray
    k: dict                    # cutoff -> component count

    def n_components(self, cutoff):
        if cutoff not in self.k:
            self.k[cutoff] = components_for_cutoff(self.explained_ratio, cutoff)
        return self.k[cutoff]


def components_for_cutoff(ratios, cutoff):
    """Smallest count whose cumulative explained-variance ratio reaches ``cutoff``."""
    if not 0 < cutoff <= 1:
        raise ConfigError(f"PCA cutoff must lie in (0, 1], got {cutoff}", field="cutoffs")
    cum = np.cumsum(ratios)
    return int(min(np.searchsorted(cum, cutoff - _CUM_TOL) + 1, len(ratios)))


def fit_pca(train, cutoffs=DEFAULT_CUTOFFS):
    """Standard-scale with training statistics, then PCA by SVD.

    Dimensions with zero training variance are dropped before the
    decomposition.  ``cutoffs`` may be one value or a sequence.
    """
    X = np.asarray(train, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InputError(f"PCA needs at least 2 training rows, got shape {X.shape}")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    keep = std > _STD_FLOOR * max(1.0, float(np.abs(X).max()))
    if not keep.any():
        raise InputError("degenerate training embeddings: every dimension is constant")
    Z = (X[:, keep] - mean[keep]) / std[keep]
    _, s, vt = np.linalg.svd(Z, full_matrices=False)
    # population scaling throughout, so eigenvalues sum to the kept dimension count
    eig = s * s / X.shape[0]
    ratio = eig / eig.sum()
    state = PcaState(mean, std, keep, vt.T, eig, ratio, {})
    for c in np.atleast_1d(cutoffs):
        state.n_components(float(c))
    return state


def apply_pca(state, X, cutoff=None, k=None):
    """Project rows of ``X`` onto the leading components chosen by ``cutoff``
    (or an explicit ``k``; all components when both are omitted)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.mean.shape[0]:
        raise InputError(f"expected rows of width {state.mean.shape[0]}, got shape {X.shape}")
    if k is None:
        k = state.components.shape[1] if cutoff is None else state.n_components(float(cutoff))
    Z = (X[:, state.keep] - state.mean[state.keep]) / state.std[state.keep]
    return Z @ state.components[:, :k]
