import numpy as np

from ..errors import ShapeError

DEFAULT_QUANTILES = (0.01, 0.05, 0.5, 0.95, 0.99)


def pinball_loss(pred, y, quantiles=DEFAULT_QUANTILES):
    """Multi-quantile pinball loss and its gradient with respect to ``pred``.

    ``pred`` is ``(B, Q)`` (or ``(Q,)`` for one example) and ``y`` is ``(B,)``.
    Per example the loss is ``mean_q max(q*e, (q-1)*e)`` with ``e = y - pred_q``;
    the batch loss is the mean over examples.  At ``e == 0`` the subgradient
    ``1 - q`` is used.
    """
    pred = np.asarray(pred, dtype=np.float64)
    q = np.asarray(quantiles, dtype=np.float64)
    single = pred.ndim == 1
    pred2 = pred[None] if single else pred
    y2 = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if pred2.shape[1] != q.size:
        raise ShapeError(f"{pred2.shape[1]} predictions for {q.size} quantiles")
    if y2.shape[0] != pred2.shape[0]:
        raise ShapeError(f"{y2.shape[0]} targets for {pred2.shape[0]} predictions")
    err = y2[:, None] - pred2
    loss = np.maximum(q * err, (q - 1.0) * err)
    B, Q = pred2.shape
    grad = np.where(err > 0, -q, 1.0 - q) / (B * Q)
    if single:
        grad = grad[0]
    return float(loss.mean()), grad


def mse_loss(x, x_hat):
    """Mean squared error over all elements, plus gradient w.r.t. ``x_hat``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} != input shape {x.shape}")
    diff = x_hat - x
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
