"""Layers with hand-derived backward passes.

Arrays are batch-first: sequences are ``(B, T, C)``, vectors ``(B, D)``.
Every layer owns a ``params`` dict and a matching ``grads`` dict; ``backward``
overwrites ``grads`` (no accumulation across calls) and returns the gradient
with respect to the layer input.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def uniform_init(rng, shape, fan_in):
    """Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# functional kernels
# ---------------------------------------------------------------------------


def conv1d_forward(x, kernel, bias):
    """Stride-1, same-padded 1-D cross-correlation.

    ``x`` is ``(B, T, C_in)`` or a single ``(T, C_in)`` sequence, ``kernel`` is
    ``(K, C_in, C_out)``.  Output position ``t`` sees inputs
    ``t - (K-1)//2 ... t + K//2``.  Returns ``(out, cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (B, T, C) input, got shape {x.shape}")
    K, c_in, c_out = kernel.shape
    B, T, C = x.shape
    if C != c_in:
        raise ShapeError(f"conv1d input has {C} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias shape {bias.shape} != ({c_out},)")
    left = (K - 1) // 2
    xp = np.pad(x, ((0, 0), (left, K - 1 - left), (0, 0)))
    # (B, T, C, K) -> (B, T, K*C) with k-major ordering to match kernel.reshape
    cols = sliding_window_view(xp, K, axis=1).transpose(0, 1, 3, 2).reshape(B, T, K * C)
    out = cols @ kernel.reshape(K * C, c_out) + bias
    if single:
        out = out[0]
    return out, (cols, kernel, single)


def conv1d_backward(dout, cache):
    """Gradients ``(dx, dkernel, dbias)`` for :func:`conv1d_forward`."""
    cols, kernel, single = cache
    if single:
        dout = dout[None]
    K, C, c_out = kernel.shape
    B, T, _ = dout.shape
    flat = dout.reshape(-1, c_out)
    dkernel = (cols.reshape(-1, K * C).T @ flat).reshape(K, C, c_out)
    dbias = flat.sum(axis=0)
    dcols = (dout @ kernel.reshape(K * C, c_out).T).reshape(B, T, K, C)
    dxp = np.zeros((B, T + K - 1, C))
    for k in range(K):
        dxp[:, k:k + T] += dcols[:, :, k]
    left = (K - 1) // 2
    dx = dxp[:, left:left + T]
    if single:
        dx = dx[0]
    return dx, dkernel, dbias


def _gru_step(gx, h_prev, Uh):
    """One GRU update given the precomputed input projection ``gx = x W + b``.

    Gate order along the last axis is (z, r, candidate).  Leading axes of
    ``gx``/``h_prev``/``Uh`` broadcast through ``np.matmul``, which is how both
    directions of a bidirectional layer run in one call.
    """
    H = h_prev.shape[-1]
    zr = sigmoid(gx[..., :2 * H] + h_prev @ Uh[..., :, :2 * H])
    z = zr[..., :H]
    r = zr[..., H:]
    rh = r * h_prev
    hh = np.tanh(gx[..., 2 * H:] + rh @ Uh[..., :, 2 * H:])
    h = h_prev + z * (hh - h_prev)
    return h, (h_prev, z, r, rh, hh)


def _gru_step_backward(dh, cache, Uh):
    """Returns ``(dgx, dh_prev)``; the ``Uh`` gradient is assembled by the caller."""
    h_prev, z, r, rh, hh = cache
    H = h_prev.shape[-1]
    dz = dh * (hh - h_prev)
    da_h = dh * z * (1.0 - hh * hh)
    drh = da_h @ np.swapaxes(Uh[..., :, 2 * H:], -1, -2)
    da_z = dz * z * (1.0 - z)
    da_r = drh * h_prev * r * (1.0 - r)
    da_zr = np.concatenate([da_z, da_r], axis=-1)
    dh_prev = dh * (1.0 - z) + drh * r + da_zr @ np.swapaxes(Uh[..., :, :2 * H], -1, -2)
    return np.concatenate([da_zr, da_h], axis=-1), dh_prev


def gru_cell(x_t, h_prev, Wx, Uh, b):
    """Single GRU step.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    cand = tanh(x Wh + (r*h) Uh + bh), h_t = (1 - z)*h + z*cand.

    ``Wx`` is ``(C, 3H)``, ``Uh`` is ``(H, 3H)`` and ``b`` is ``(3H,)`` with the
    gate blocks in (z, r, cand) order.  Returns ``(h_t, cache)``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    H = h_prev.shape[-1]
    if Uh.shape[-2:] != (H, 3 * H) or Wx.shape[-1] != 3 * H or b.shape[-1] != 3 * H:
        raise ShapeError(f"GRU weights {Wx.shape}, {Uh.shape}, {b.shape} do not match {H} units")
    if x_t.shape[-1] != Wx.shape[-2]:
        raise ShapeError(f"GRU input width {x_t.shape[-1]} != {Wx.shape[-2]}")
    h, step_cache = _gru_step(x_t @ Wx + b, h_prev, Uh)
    return h, (x_t, step_cache, Wx, Uh)


def gru_cell_backward(dh, cache):
    """Gradients ``(dx_t, dh_prev, dWx, dUh, db)`` for :func:`gru_cell`."""
    x_t, step_cache, Wx, Uh = cache
    h_prev, rh = step_cache[0], step_cache[3]
    H = h_prev.shape[-1]
    dgx, dh_prev = _gru_step_backward(dh, step_cache, Uh)
    x2 = np.atleast_2d(x_t)
    g2 = np.atleast_2d(dgx)
    dWx = x2.T @ g2
    dUh = np.concatenate(
        [np.atleast_2d(h_prev).T @ g2[:, :2 * H], np.atleast_2d(rh).T @ g2[:, 2 * H:]], axis=1
    )
    db = g2.sum(axis=0)
    dx = dgx @ Wx.T
    return dx, dh_prev, dWx, dUh, db


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv1D(Layer):
    def __init__(self, c_in, c_out, kernel_size, rng):
        super().__init__()
        fan_in = c_in * kernel_size
        self.params["kernel"] = uniform_init(rng, (kernel_size, c_in, c_out), fan_in)
        self.params["bias"] = np.zeros(c_out)

    def forward(self, x):
        out, self.cache = conv1d_forward(x, self.params["kernel"], self.params["bias"])
        return out

    def backward(self, dout):
        dx, self.grads["kernel"], self.grads["bias"] = conv1d_backward(dout, self.cache)
        return dx


class Dense(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.params["weight"] = uniform_init(rng, (n_in, n_out), n_in)
        self.params["bias"] = np.zeros(n_out)

    def forward(self, x):
        if x.shape[-1] != self.params["weight"].shape[0]:
            raise ShapeError(
                f"dense input width {x.shape[-1]} != {self.params['weight'].shape[0]}"
            )
        self.cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dout):
        x = self.cache
        self.grads["weight"] = x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
        self.grads["bias"] = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        return dout @ self.params["weight"].T


class ReLU(Layer):
    def forward(self, x):
        self.cache = x > 0
        return np.where(self.cache, x, 0.0)

    def backward(self, dout):
        return dout * self.cache


class GlobalAvgPool(Layer):
    """Mean over the time axis: ``(B, T, D) -> (B, D)``."""

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] == 0:
            raise ShapeError(f"pooling needs a non-empty (B, T, D) input, got {x.shape}")
        self.cache = x.shape
        return x.mean(axis=1)

    def backward(self, dout):
        B, T, D = self.cache
        return np.broadcast_to(dout[:, None, :] / T, (B, T, D)).copy()


def global_avg_pool(x):
    """Element-wise mean over time for a single ``(T, D)`` sequence or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] == 0:
        raise ShapeError("cannot pool an empty sequence")
    return x.mean(axis=-2)


class AvgPool2(Layer):
    """Non-overlapping average pooling over time by a factor of two."""

    def forward(self, x):
        B, T, C = x.shape
        if T % 2:
            raise ShapeError(f"AvgPool2 needs an even sequence length, got {T}")
        return x.reshape(B, T // 2, 2, C).mean(axis=2)

    def backward(self, dout):
        return np.repeat(dout, 2, axis=1) * 0.5


class Upsample2(Layer):
    """Nearest-neighbour upsampling over time by a factor of two."""

    def forward(self, x):
        return np.repeat(x, 2, axis=1)

    def backward(self, dout):
        B, T, C = dout.shape
        return dout.reshape(B, T // 2, 2, C).sum(axis=2)


class Flatten(Layer):
    def forward(self, x):
        self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self.cache)


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dout):
        return dout.reshape(dout.shape[0], -1)


class GRULayer(Layer):
    """Full-sequence GRU, optionally bidirectional.

    Weights carry a leading direction axis (1 or 2).  The reverse direction
    reads the time-flipped input and its outputs are flipped back, so output
    position ``t`` concatenates ``[forward_t, backward_t]``.
    """

    def __init__(self, c_in, units, rng, bidirectional=True):
        super().__init__()
        self.units = units
        self.n_dir = 2 if bidirectional else 1
        D, H = self.n_dir, units
        self.params["Wx"] = uniform_init(rng, (D, c_in, 3 * H), H)
        self.params["Uh"] = uniform_init(rng, (D, H, 3 * H), H)
        self.params["b"] = np.zeros((D, 3 * H))

    def forward(self, x):
        B, T, C = x.shape
        if T < 1:
            raise ShapeError("GRU needs at least one time step")
        Wx, Uh, b = self.params["Wx"], self.params["Uh"], self.params["b"]
        if C != Wx.shape[1]:
            raise ShapeError(f"GRU input width {C} != {Wx.shape[1]}")
        D, H = self.n_dir, self.units
        # time-major (T, D, B, C) so each step reads a contiguous block
        xt = x.transpose(1, 0, 2)
        xs = xt[:, None] if D == 1 else np.stack([xt, xt[::-1]], axis=1)
        xd = xs.transpose(1, 0, 2, 3).reshape(D, T * B, C)
        gx = (xd @ Wx + b[:, None, :]).reshape(D, T, B, 3 * H).transpose(1, 0, 2, 3).copy()
        h = np.zeros((D, B, H))
        hs = np.empty((T, D, B, H))
        steps = []
        for t in range(T):
            h, c = _gru_step(gx[t], h, Uh)
            hs[t] = h
            steps.append(c)
        self.cache = (xd, steps)
        if D == 1:
            return hs[:, 0].transpose(1, 0, 2)
        return np.concatenate([hs[:, 0], hs[::-1, 1]], axis=-1).transpose(1, 0, 2)

    def backward(self, dout):
        xd, steps = self.cache
        Uh, Wx = self.params["Uh"], self.params["Wx"]
        D, C, H = Wx.shape[0], Wx.shape[1], self.units
        B, T = dout.shape[0], dout.shape[1]
        dt = dout.transpose(1, 0, 2)
        if D == 1:
            dhs = dt[:, None]
        else:
            dhs = np.stack([dt[..., :H], dt[::-1, :, H:]], axis=1)
        dgx = np.empty((T, D, B, 3 * H))
        dh = np.zeros((D, B, H))
        for t in range(T - 1, -1, -1):
            dgx[t], dh = _gru_step_backward(dhs[t] + dh, steps[t], Uh)
        # Uh gradient as batched products over all (t, b) at once
        h_prev = np.stack([s[0] for s in steps], axis=1).reshape(D, T * B, H)
        rh = np.stack([s[3] for s in steps], axis=1).reshape(D, T * B, H)
        g = dgx.transpose(1, 0, 2, 3).reshape(D, T * B, 3 * H)
        self.grads["Uh"] = np.concatenate(
            [np.swapaxes(h_prev, 1, 2) @ g[..., :2 * H], np.swapaxes(rh, 1, 2) @ g[..., 2 * H:]],
            axis=-1,
        )
        self.grads["Wx"] = np.swapaxes(xd, 1, 2) @ g
        self.grads["b"] = g.sum(axis=1)
        dxs = (g @ np.swapaxes(Wx, 1, 2)).reshape(D, T, B, C).transpose(1, 0, 2, 3)
        if D == 1:
            dx = dxs[:, 0]
        else:
            dx = dxs[:, 0] + dxs[::-1, 1]
        return dx.transpose(1, 0, 2)
