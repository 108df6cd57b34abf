"""Windowing, cyclical time features, user-disjoint splits and min-max scaling."""

import logging
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .cohortsim import STEP_SECONDS
from .errors import CohortIOError, ConfigError, InputError

log = logging.getLogger(__name__)

N_TEMPORAL = 4
TEMPORAL_NAMES = ("hour_cos", "hour_sin", "month_cos", "month_sin")


def encode_cyclical(epoch):
    """``(hour_cos, hour_sin, month_cos, month_sin)`` for UTC epoch seconds.

    Accepts a scalar (returns shape ``(4,)``) or an array (returns ``(..., 4)``).
    The hour is fractional, so 23:59 and 00:01 land two minutes apart on the
    circle; January maps to angle zero.
    """
    e = np.asarray(epoch, dtype=np.int64)
    hour = (e % 86400) / 3600.0
    month0 = e.astype("datetime64[s]").astype("datetime64[M]").astype(np.int64) % 12
    ha = 2.0 * np.pi * hour / 24.0
    ma = 2.0 * np.pi * month0 / 12.0
    return np.stack([np.cos(ha), np.sin(ha), np.cos(ma), np.sin(ma)], axis=-1)


@dataclass
class SensorWindow:
    user_id: int
    x: np.ndarray  # (T, F) activity
    m: np.ndarray  # temporal features, plus rhr in A/R/T mode
    y: float       # HR in bpm one step after the last input


class WindowSet:
    """Column-stored collection of :class:`SensorWindow` rows.

    Indexing with an int yields a ``SensorWindow``; with a slice, mask or
    index array it yields another ``WindowSet``.
    """

    def __init__(self, user_id, x, m, y):
        self.user_id = np.asarray(user_id, dtype=np.int64)
        self.x = np.asarray(x, dtype=np.float64)
        self.m = np.asarray(m, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        n = self.user_id.shape[0]
        if self.x.ndim != 3 or self.m.ndim != 2 or not (
                self.x.shape[0] == self.m.shape[0] == self.y.shape[0] == n):
            raise InputError(
                f"inconsistent window arrays: user_id {self.user_id.shape}, x {self.x.shape}, "
                f"m {self.m.shape}, y {self.y.shape}"
            )

    @classmethod
    def empty(cls, T, F, M):
        return cls(np.zeros(0), np.zeros((0, T, F)), np.zeros((0, M)), np.zeros(0))

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        if not sets:
            raise InputError("nothing to concatenate")
        return cls(np.concatenate([s.user_id for s in sets]),
                   np.concatenate([s.x for s in sets]),
                   np.concatenate([s.m for s in sets]),
                   np.concatenate([s.y for s in sets]))

    def __len__(self):
        return self.y.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return SensorWindow(int(self.user_id[idx]), self.x[idx], self.m[idx], float(self.y[idx]))
        return WindowSet(self.user_id[idx], self.x[idx], self.m[idx], self.y[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def window_len(self):
        return self.x.shape[1]

    @property
    def n_channels(self):
        return self.x.shape[2]

    def for_users(self, users):
        return self[np.isin(self.user_id, np.fromiter(users, dtype=np.int64))]

    def equals(self, other):
        return (np.array_equal(self.user_id, other.user_id) and np.array_equal(self.x, other.x)
                and np.array_equal(self.m, other.m) and np.array_equal(self.y, other.y))


def window_count(length, T):
    """Windows produced from a trace of ``length`` samples."""
    return max(0, (length - 1) // T)


def windowize(trace, T=512, rhr=None):
    """Non-overlapping windows ``[kT, kT+T)`` with target ``hr[kT+T]``.

    Metadata is the cyclical encoding of the last input step's timestamp,
    with ``rhr`` appended when given.  The trailing remainder is dropped; a
    trace too short for a single target yields an empty set.
    """
    if T < 1:
        raise ConfigError(f"window length must be positive, got {T}", field="window_len")
    L = len(trace)
    F = trace.activity.shape[1]
    n = window_count(L, T)
    M = N_TEMPORAL + (0 if rhr is None else 1)
    if n == 0:
        log.info("user %s: trace of %d samples too short for T=%d", trace.user_id, L, T)
        return WindowSet.empty(T, F, M)
    x = trace.activity[:n * T].reshape(n, T, F)
    targets = (np.arange(n) + 1) * T
    y = trace.hr[targets]
    m = encode_cyclical(trace.start_epoch + STEP_SECONDS * (targets - 1))
    if rhr is not None:
        m = np.concatenate([m, np.full((n, 1), float(rhr))], axis=1)
    return WindowSet(np.full(n, trace.user_id), x.copy(), m, y)


def filter_min_duration(traces, min_hours):
    if min_hours < 0:
        raise ConfigError(f"min_hours must be >= 0, got {min_hours}", field="min_hours")
    return [t for t in traces if len(t) * STEP_SECONDS >= min_hours * 3600]


@dataclass(frozen=True)
class SplitAssignment:
    train_users: frozenset
    val_users: frozenset
    test_users: frozenset

    def __post_init__(self):
        if (self.train_users & self.val_users or self.train_users & self.test_users
                or self.val_users & self.test_users):
            raise InputError("split user groups overlap")

    def to_dict(self):
        return {k: sorted(int(u) for u in getattr(self, k))
                for k in ("train_users", "val_users", "test_users")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(frozenset(d[k]) for k in ("train_users", "val_users", "test_users")))


def split_users(user_ids, seed, test_frac=0.2, val_frac=0.1):
    """Seeded user-level split: ``test_frac`` of users to test, then
    ``val_frac`` of the remainder to validation (at least one user each)."""
    ids = np.unique(np.asarray(list(user_ids), dtype=np.int64))
    if ids.size < 5:
        raise ConfigError(f"need at least 5 users to split, got {ids.size}", field="n_users")
    if not (0 < test_frac < 1 and 0 < val_frac < 1):
        raise ConfigError("split fractions must lie in (0, 1)", field="test_frac")
    order = np.random.default_rng(seed).permutation(ids)
    n_test = max(1, int(round(test_frac * ids.size)))
    n_val = max(1, int(round(val_frac * (ids.size - n_test))))
    test = order[:n_test]
    val = order[n_test:n_test + n_val]
    train = order[n_test + n_val:]
    return SplitAssignment(frozenset(train.tolist()), frozenset(val.tolist()),
                           frozenset(test.tolist()))


@dataclass(frozen=True)
class ScalerState:
    """Min-max statistics fitted on training windows.

    ``mode="global"`` scales each activity channel with its (min, max) pooled
    over every training window and time step.  ``mode="per_window"`` instead
    rescales each window's channels by that window's own range.  Metadata is
    always scaled per column with training statistics; targets never are.
    """

    act_min: np.ndarray
    act_max: np.ndarray
    meta_min: np.ndarray
    meta_max: np.ndarray
    mode: str = "global"
    fitted: bool = True

    def to_dict(self):
        return {"act_min": self.act_min.tolist(), "act_max": self.act_max.tolist(),
                "meta_min": self.meta_min.tolist(), "meta_max": self.meta_max.tolist(),
                "mode": self.mode, "fitted": self.fitted}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["act_min"]), np.asarray(d["act_max"]),
                   np.asarray(d["meta_min"]), np.asarray(d["meta_max"]),
                   d.get("mode", "global"), d.get("fitted", True))


SCALER_MODES = ("global", "per_window")


def fit_scaler(train_windows, mode="global"):
    if mode not in SCALER_MODES:
        raise ConfigError(f"scaler mode must be one of {SCALER_MODES}", field="scaler_mode")
    if len(train_windows) == 0:
        raise InputError("cannot fit a scaler on an empty training set")
    x, m = train_windows.x, train_windows.m
    return ScalerState(x.min(axis=(0, 1)), x.max(axis=(0, 1)), m.min(axis=0), m.max(axis=0), mode)


def _minmax(v, lo, hi):
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    # constant columns map to 0
    return np.where(span > 0, (v - lo) / safe, 0.0)


def apply_scaler(state, windows):
    if not state.fitted:
        raise InputError("scaler has not been fitted")
    if windows.x.shape[2] != state.act_min.shape[0] or windows.m.shape[1] != state.meta_min.shape[0]:
        raise InputError("window layout does not match the fitted scaler")
    if state.mode == "global":
        x = _minmax(windows.x, state.act_min, state.act_max)
    else:
        x = _minmax(windows.x, windows.x.min(axis=1, keepdims=True),
                    windows.x.max(axis=1, keepdims=True))
    m = _minmax(windows.m, state.meta_min, state.meta_max)
    return WindowSet(windows.user_id, x, m, windows.y.copy())


# ---------------------------------------------------------------------------
# windows file
# ---------------------------------------------------------------------------


def write_windows(path, windows):
    """CSV with a ``#`` layout line, a column header, then one window per row:
    ``user_id, x[t, f] for t, f row-major, m[0..M), y``."""
    N, T, F = windows.x.shape
    M = windows.m.shape[1]
    cols = (["user_id"] + [f"x_{t}_{f}" for t in range(T) for f in range(F)]
            + [f"m_{j}" for j in range(M)] + ["y"])
    body = np.concatenate(
        [windows.user_id[:, None].astype(np.float64), windows.x.reshape(N, T * F), windows.m,
         windows.y[:, None]], axis=1)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# layout: T={T} F={F} M={M}; user_id, x row-major (t, f), m, y\n")
        fh.write(",".join(cols) + "\n")
        for row in body:
            fh.write(str(int(row[0])) + "," + ",".join(repr(float(v)) for v in row[1:]) + "\n")
    os.replace(tmp, path)


def read_windows(path):
    try:
        with open(path, encoding="utf-8") as fh:
            layout = fh.readline()
            fh.readline()
            parts = dict(p.split("=") for p in layout.split(";")[0].replace("# layout:", "").split())
            T, F, M = int(parts["T"]), int(parts["F"]), int(parts["M"])
            with warnings.catch_warnings():
                # an empty window set is a valid file
                warnings.simplefilter("ignore", UserWarning)
                data = np.loadtxt(fh, delimiter=",", ndmin=2)
    except (OSError, ValueError, KeyError) as exc:
        raise CohortIOError(f"cannot read windows file {path}: {exc}") from exc
    if data.shape[0] == 0:
        return WindowSet.empty(T, F, M)
    N = data.shape[0]
    return WindowSet(data[:, 0].astype(np.int64), data[:, 1:1 + T * F].reshape(N, T, F),
                     data[:, 1 + T * F:1 + T * F + M], data[:, -1])


def build_windows(traces, profiles, T, use_rhr_input):
    """Windowize every trace (ordered by user id), attaching rhr in A/R/T mode."""
    rhr = {p.user_id: p.rhr for p in profiles}
    sets = [windowize(tr, T, rhr[tr.user_id] if use_rhr_input else None)
            for tr in sorted(traces, key=lambda t: t.user_id)]
    if not sets:
        raise InputError("no traces to windowize")
    return WindowSet.concat(sets)
