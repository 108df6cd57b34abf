"""Step2Heart forecaster and the convolutional autoencoder baseline."""

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from .layers import (
    AvgPool2,
    Conv1D,
    Dense,
    Flatten,
    GlobalAvgPool,
    GRULayer,
    ReLU,
    Reshape,
    Upsample2,
)
from .losses import DEFAULT_QUANTILES, mse_loss, pinball_loss

N_TEMPORAL = 4
EMBEDDING_TAPS = ("head_hidden", "concat_pool")


@dataclass
class ModelSpec:
    """Architecture hyper-parameters shared by both model kinds.

    ``ae_channels=None`` picks the autoencoder width whose parameter count is
    closest to the activity-only Step2Heart model.
    """

    n_channels: int = 3
    window_len: int = 512
    use_rhr_input: bool = False
    conv_filters: int = 128
    conv_layers: int = 2
    kernel_size: int = 5
    gru_units: int = 128
    gru_layers: int = 2
    bidirectional: bool = True
    metadata_mlp_dim: int = 128
    head_hidden_dim: int = 256
    quantiles: tuple = DEFAULT_QUANTILES
    embedding_tap: str = "head_hidden"
    ae_bottleneck: int = 128
    ae_channels: int = None

    def __post_init__(self):
        self.quantiles = tuple(float(q) for q in self.quantiles)
        for name in ("n_channels", "window_len", "conv_filters", "conv_layers", "kernel_size",
                     "gru_units", "gru_layers", "metadata_mlp_dim", "head_hidden_dim",
                     "ae_bottleneck"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}", field=name)
        if self.ae_channels is not None and self.ae_channels < 1:
            raise ConfigError("ae_channels must be positive", field="ae_channels")
        q = np.asarray(self.quantiles)
        if q.size == 0 or np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
            raise ConfigError(
                f"quantiles must be strictly increasing in (0, 1), got {self.quantiles}",
                field="quantiles",
            )
        if self.embedding_tap not in EMBEDDING_TAPS:
            raise ConfigError(f"embedding_tap must be one of {EMBEDDING_TAPS}", field="embedding_tap")

    @property
    def n_meta(self):
        return N_TEMPORAL + (1 if self.use_rhr_input else 0)

    def to_dict(self):
        d = asdict(self)
        d["quantiles"] = list(self.quantiles)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ModelParams:
    """Ordered named tensors with a lossless flat view.

    The arrays are shared with the owning network's layers, so in-place
    updates (optimizer steps, :meth:`set_flat`) take effect immediately.
    """

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def size(self):
        return sum(a.size for a in self.tensors.values())

    def flat(self):
        return np.concatenate([a.ravel() for a in self.tensors.values()])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ShapeError(f"flat vector has {vec.size} entries, params have {self.size}")
        i = 0
        for a in self.tensors.values():
            a[...] = vec[i:i + a.size].reshape(a.shape)
            i += a.size

    def snapshot(self):
        return {k: v.copy() for k, v in self.tensors.items()}

    def load(self, tensors):
        missing = set(self.tensors) ^ set(tensors)
        if missing:
            raise ShapeError(f"parameter names differ: {sorted(missing)}")
        for k, a in self.tensors.items():
            src = np.asarray(tensors[k], dtype=np.float64)
            if src.shape != a.shape:
                raise ShapeError(f"{k}: shape {src.shape} != expected {a.shape}")
            a[...] = src


class Network:
    kind = None

    def __init__(self, spec):
        self.spec = spec
        self.layers = {}

    def _add(self, name, layer):
        self.layers[name] = layer
        return layer

    @property
    def params(self):
        return ModelParams(
            {f"{name}.{k}": v for name, layer in self.layers.items() for k, v in layer.params.items()}
        )

    def grads(self):
        return {
            f"{name}.{k}": v for name, layer in self.layers.items() for k, v in layer.grads.items()
        }

    @property
    def n_params(self):
        return self.params.size

    def _check_x(self, x):
        x = np.asarray(x, dtype=np.float64)
        want = (self.spec.window_len, self.spec.n_channels)
        if x.ndim != 3 or x.shape[1:] != want:
            raise ShapeError(f"expected activity batch (B, {want[0]}, {want[1]}), got {x.shape}")
        return x


class Step2HeartNet(Network):
    """Conv stack -> stacked (Bi)GRU -> time pooling, joined with metadata MLPs,
    then a ReLU hidden layer and one linear output per quantile."""

    kind = "step2heart"

    def __init__(self, spec, rng):
        super().__init__(spec)
        s = spec
        c = s.n_channels
        self.convs = []
        for i in range(s.conv_layers):
            self.convs.append((self._add(f"conv{i}", Conv1D(c, s.conv_filters, s.kernel_size, rng)), ReLU()))
            c = s.conv_filters
        self.grus = []
        for i in range(s.gru_layers):
            layer = self._add(f"gru{i}", GRULayer(c, s.gru_units, rng, s.bidirectional))
            self.grus.append(layer)
            c = s.gru_units * layer.n_dir
        self.pool = GlobalAvgPool()
        self.pool_dim = c
        # metadata groups: temporal features always, resting HR in A/R/T mode
        self.meta_groups = [("meta_time", slice(0, N_TEMPORAL))]
        if s.use_rhr_input:
            self.meta_groups.append(("meta_rhr", slice(N_TEMPORAL, N_TEMPORAL + 1)))
        self.meta = []
        for name, cols in self.meta_groups:
            width = cols.stop - cols.start
            self.meta.append((self._add(name, Dense(width, s.metadata_mlp_dim, rng)), ReLU(), cols))
        self.concat_dim = c + s.metadata_mlp_dim * len(self.meta)
        self.head_hidden = self._add("head_hidden", Dense(self.concat_dim, s.head_hidden_dim, rng))
        self.head_relu = ReLU()
        self.head_out = self._add("head_out", Dense(s.head_hidden_dim, len(s.quantiles), rng))

    @property
    def embedding_dim(self):
        if self.spec.embedding_tap == "head_hidden":
            return self.spec.head_hidden_dim
        return self.concat_dim

    def init_output_bias(self, values):
        self.head_out.params["bias"][...] = np.asarray(values, dtype=np.float64)

    def forward(self, x, m):
        """Returns ``(quantile_predictions (B, Q), embeddings (B, D))``."""
        h = self._check_x(x)
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape != (h.shape[0], self.spec.n_meta):
            raise ShapeError(f"expected metadata ({h.shape[0]}, {self.spec.n_meta}), got {m.shape}")
        for conv, relu in self.convs:
            h = relu.forward(conv.forward(h))
        for gru in self.grus:
            h = gru.forward(h)
        parts = [self.pool.forward(h)]
        for dense, relu, cols in self.meta:
            parts.append(relu.forward(dense.forward(m[:, cols])))
        joined = np.concatenate(parts, axis=1)
        hidden = self.head_relu.forward(self.head_hidden.forward(joined))
        pred = self.head_out.forward(hidden)
        emb = hidden if self.spec.embedding_tap == "head_hidden" else joined
        return pred, emb

    def backward(self, dpred):
        dhidden = self.head_out.backward(dpred)
        djoined = self.head_hidden.backward(self.head_relu.backward(dhidden))
        start = self.pool_dim
        for dense, relu, _ in self.meta:
            width = dense.params["weight"].shape[1]
            dense.backward(relu.backward(djoined[:, start:start + width]))
            start += width
        dh = self.pool.backward(djoined[:, :self.pool_dim])
        for gru in reversed(self.grus):
            dh = gru.backward(dh)
        for conv, relu in reversed(self.convs):
            dh = conv.backward(relu.backward(dh))
        return dh

    def loss_and_grads(self, x, m, y):
        pred, _ = self.forward(x, m)
        loss, dpred = pinball_loss(pred, y, self.spec.quantiles)
        self.backward(dpred)
        return loss, self.grads()

    def loss(self, x, m, y):
        pred, _ = self.forward(x, m)
        return pinball_loss(pred, y, self.spec.quantiles)[0]

    def embed(self, x, m):
        return self.forward(x, m)[1]


def autoencoder_param_count(spec, channels):
    s = spec
    K, F, c = s.kernel_size, s.n_channels, channels
    flat = (s.window_len // 4) * c
    convs = (K * F * c + c) + (K * c * c + c) + (K * c * c + c) + (K * c * F + F)
    dense = (flat * s.ae_bottleneck + s.ae_bottleneck) + (s.ae_bottleneck * flat + flat)
    return convs + dense


def step2heart_param_count(spec):
    # cheap to build; the rng draws are discarded
    return Step2HeartNet(spec, np.random.default_rng(0)).n_params


def match_autoencoder_channels(spec):
    """Width whose autoencoder parameter count is closest to the activity-only
    Step2Heart model with the same spec."""
    target = step2heart_param_count(
        ModelSpec(**{**spec.to_dict(), "use_rhr_input": False})
    )
    best = min(range(1, 4 * spec.conv_filters + 1),
               key=lambda c: (abs(autoencoder_param_count(spec, c) - target), c))
    return best


class ConvAutoencoder(Network):
    """Activity-only reconstruction baseline.

    Encoder: conv-ReLU, avg-pool/2, conv-ReLU, avg-pool/2, dense to the
    linear bottleneck.  Decoder mirrors it with nearest upsampling.
    """

    kind = "autoencoder"

    def __init__(self, spec, rng):
        super().__init__(spec)
        s = spec
        if s.window_len % 4:
            raise ShapeError(f"autoencoder needs window_len divisible by 4, got {s.window_len}")
        c = s.ae_channels or match_autoencoder_channels(s)
        self.channels = c
        F, K, L = s.n_channels, s.kernel_size, s.window_len // 4
        self.encoder = [
            self._add("enc_conv0", Conv1D(F, c, K, rng)), ReLU(), AvgPool2(),
            self._add("enc_conv1", Conv1D(c, c, K, rng)), ReLU(), AvgPool2(),
            Flatten(),
            self._add("bottleneck", Dense(L * c, s.ae_bottleneck, rng)),
        ]
        self.decoder = [
            self._add("dec_dense", Dense(s.ae_bottleneck, L * c, rng)), ReLU(), Reshape((L, c)),
            Upsample2(), self._add("dec_conv0", Conv1D(c, c, K, rng)), ReLU(),
            Upsample2(), self._add("dec_conv1", Conv1D(c, F, K, rng)),
        ]

    @property
    def embedding_dim(self):
        return self.spec.ae_bottleneck

    def encode(self, x):
        h = self._check_x(x)
        for layer in self.encoder:
            h = layer.forward(h)
        return h

    def forward(self, x):
        """Returns ``(reconstruction (B, T, F), bottleneck (B, 128))``."""
        code = self.encode(x)
        h = code
        for layer in self.decoder:
            h = layer.forward(h)
        return h, code

    def backward(self, dxhat):
        d = dxhat
        for layer in reversed(self.decoder):
            d = layer.backward(d)
        for layer in reversed(self.encoder):
            d = layer.backward(d)
        return d

    def loss_and_grads(self, x, m=None, y=None):
        x = np.asarray(x, dtype=np.float64)
        xhat, _ = self.forward(x)
        loss, d = mse_loss(x, xhat)
        self.backward(d)
        return loss, self.grads()

    def loss(self, x, m=None, y=None):
        xhat, _ = self.forward(x)
        return mse_loss(x, xhat)[0]

    def embed(self, x, m=None):
        return self.encode(x)


MODEL_KINDS = {"step2heart": Step2HeartNet, "autoencoder": ConvAutoencoder}


def build_model(kind, spec, seed):
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}", field="model_kind")
    return MODEL_KINDS[kind](spec, np.random.default_rng(seed))
