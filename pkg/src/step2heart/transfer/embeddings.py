import logging
from dataclasses import dataclass

import numpy as np

from ..errors import InputError, ShapeError
from ..neuralcore.training import extract

log = logging.getLogger(__name__)


@dataclass
class EmbeddingMatrix:
    """Row ``i`` of ``values`` is the embedding of a window owned by ``user_id[i]``."""

    user_id: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.user_id = np.asarray(self.user_id, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.user_id.shape[0]:
            raise ShapeError(
                f"{self.user_id.shape[0]} user tags for embedding block {self.values.shape}"
            )

    @property
    def dim(self):
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]


@dataclass
class PooledEmbeddings:
    users: np.ndarray   # sorted user ids
    values: np.ndarray  # (n_users, D)

    def rows(self, users):
        """Sub-matrix for ``users`` in the given order."""
        index = {int(u): i for i, u in enumerate(self.users)}
        try:
            return self.values[[index[int(u)] for u in users]]
        except KeyError as exc:
            raise InputError(f"no pooled embedding for user {exc.args[0]}") from None


def extract_embeddings(net, spec, windows):
    """One embedding per window from a trained network.

    ``spec`` must be the spec the network was built with; windows must be
    scaled with the same scaler the network was trained on.
    """
    if net.spec != spec:
        raise ShapeError("checkpoint spec does not match the requested spec")
    if windows.x.shape[1:] != (spec.window_len, spec.n_channels):
        raise ShapeError(f"windows of shape {windows.x.shape[1:]} do not fit the model spec")
    return EmbeddingMatrix(windows.user_id.copy(), extract(net, windows))


def pool_user(E, users=None):
    """Element-wise mean of each user's window embeddings.

    Within a user, rows are summed in lexicographic order of their values,
    so the result is bitwise independent of input row order.  Users listed in
    ``users`` without any window are dropped with a warning.
    """
    order = np.lexsort(np.vstack([E.values.T[::-1], E.user_id[None]]))
    uid = E.user_id[order]
    vals = E.values[order]
    present, start = np.unique(uid, return_index=True)
    bounds = list(start) + [len(uid)]
    pooled = np.stack([vals[bounds[i]:bounds[i + 1]].mean(axis=0) for i in range(len(present))]) \
        if len(present) else np.zeros((0, E.dim))
    if users is not None:
        missing = sorted(set(int(u) for u in users) - set(present.tolist()))
        if missing:
            log.warning("users without windows excluded from pooling: %s", missing)
    return PooledEmbeddings(present, pooled)
