"""Synthetic multi-user wearable cohort with known heart-rate physiology.

Each user gets latent traits (a :class:`UserProfile`), a 15-second activity
trace driven by those traits, and a heart-rate trace produced by a first-order
filter of activity magnitude:

    s[t]  = alpha * s[t-1] + (1 - alpha) * |a[t]|,   alpha = exp(-15 / tau(fitness))
    hr[t] = rhr + gain(profile) * s[t] + circadian(t) + noise[t]

so fitter users recover faster (smaller tau) and respond less (smaller gain);
larger bodies (bigger stroke volume) also respond less.
Activity carries trait signatures of its own: exercise and walking intensity
grow with fitness, the share of active bouts with ``activity_level``, the
split of movement across the three channels with sex and body size, and the
sleep schedule with age.

Traits
------
fitness        ~ Beta(2, 2)
rhr            = 85 - 30 * fitness + N(0, 3), clipped to [45, 85]
sex_analog     ~ Bernoulli(0.5)
size_analog    = 165 + 12 * sex_analog + N(0, 7)       (height-like units)
age_analog     ~ Uniform(35, 65)
activity_level ~ Beta(2, 2)
"""

import csv
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.signal import lfilter

from .errors import CohortIOError, ConfigError, InputError

STEP_SECONDS = 15
HR_FLOOR = 30.5
HR_CEIL = 219.5
PROFILE_FIELDS = ("user_id", "fitness", "rhr", "sex_analog", "size_analog", "age_analog",
                  "activity_level")
AXES = ("ax", "ay", "az")

# 2023-01-01T00:00:00Z; start times are drawn within the following year
EPOCH_BASE = 1672531200

SEDENTARY, WALKING, EXERCISE, SLEEP = range(4)


@dataclass
class SimConfig:
    n_channels: int = 3
    noise_sd: float = 2.0
    circadian_amplitude: float = 3.0
    tau_unfit: float = 240.0
    tau_fit: float = 45.0
    base_gain: float = 40.0
    fitness_gain_drop: float = 0.4
    sex_gain_shift: float = -0.15
    size_gain_slope: float = -0.012
    age_gain_slope: float = -0.006
    rhr_intercept: float = 85.0
    rhr_fitness_slope: float = 30.0
    rhr_sd: float = 3.0
    sleep_hours: float = 7.5
    # mean bout length in minutes per regime (sedentary, walking, exercise)
    bout_minutes: tuple = (8.0, 3.0, 20.0)

    def __post_init__(self):
        self.bout_minutes = tuple(float(b) for b in self.bout_minutes)
        if self.n_channels < 1:
            raise ConfigError("n_channels must be >= 1", field="n_channels")
        for name in ("noise_sd", "circadian_amplitude"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative", field=name)
        if not 0 < self.tau_fit < self.tau_unfit:
            raise ConfigError("need 0 < tau_fit < tau_unfit", field="tau_fit")
        if self.base_gain <= 0:
            raise ConfigError("base_gain must be positive", field="base_gain")
        if not 0 <= self.fitness_gain_drop < 1:
            raise ConfigError("fitness_gain_drop must be in [0, 1)", field="fitness_gain_drop")
        if not 0 < self.sleep_hours < 24:
            raise ConfigError("sleep_hours must be in (0, 24)", field="sleep_hours")
        if len(self.bout_minutes) != 3 or min(self.bout_minutes) <= 0:
            raise ConfigError("bout_minutes needs three positive values", field="bout_minutes")

    def to_dict(self):
        d = asdict(self)
        d["bout_minutes"] = list(self.bout_minutes)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulator keys {sorted(unknown)}", field=sorted(unknown)[0])
        return cls(**d)


@dataclass
class UserProfile:
    user_id: int
    fitness: float
    rhr: float
    sex_analog: int
    size_analog: float
    age_analog: float
    activity_level: float


@dataclass
class RawTrace:
    user_id: int
    start_epoch: int
    activity: np.ndarray  # (L, F), non-negative
    hr: np.ndarray        # (L,), bpm

    def __post_init__(self):
        self.activity = np.asarray(self.activity, dtype=np.float64)
        self.hr = np.asarray(self.hr, dtype=np.float64)
        if self.activity.ndim != 2 or self.activity.shape[0] != self.hr.shape[0]:
            raise InputError(
                f"user {self.user_id}: activity {self.activity.shape} and hr {self.hr.shape} "
                "lengths differ"
            )

    def __len__(self):
        return self.hr.shape[0]

    @property
    def epochs(self):
        return self.start_epoch + STEP_SECONDS * np.arange(len(self), dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, RawTrace):
            return NotImplemented
        return (self.user_id == other.user_id and self.start_epoch == other.start_epoch
                and np.array_equal(self.activity, other.activity)
                and np.array_equal(self.hr, other.hr))


def recovery_tau(fitness, config=None):
    """HR recovery time constant in seconds; strictly decreasing in fitness."""
    c = config or SimConfig()
    return c.tau_unfit - (c.tau_unfit - c.tau_fit) * fitness


def hr_gain(profile, config=None):
    """Steady-state bpm rise per unit of activity magnitude."""
    c = config or SimConfig()
    return (c.base_gain
            * (1.0 - c.fitness_gain_drop * profile.fitness)
            * (1.0 + c.sex_gain_shift * profile.sex_analog)
            * math.exp(c.size_gain_slope * (profile.size_analog - 171.0))
            * (1.0 + c.age_gain_slope * (profile.age_analog - 50.0)))


def wake_hour(profile):
    # older users keep earlier schedules
    return 7.0 - 0.06 * (profile.age_analog - 50.0)


def circadian(epochs, profile, config=None):
    """Small 24-h sinusoid peaking nine hours after the user's wake time."""
    c = config or SimConfig()
    hours = (np.asarray(epochs) % 86400) / 3600.0
    peak = wake_hour(profile) + 9.0
    return c.circadian_amplitude * np.cos(2.0 * np.pi * (hours - peak) / 24.0)


def filtered_activity(activity, fitness, config=None):
    """First-order low-pass of activity magnitude, starting from rest."""
    mag = np.linalg.norm(np.asarray(activity, dtype=np.float64), axis=1)
    alpha = math.exp(-STEP_SECONDS / recovery_tau(fitness, config))
    return lfilter([1.0 - alpha], [1.0, -alpha], mag)


def simulate_hr(activity, profile, start_epoch, seed, config=None):
    """Heart rate in bpm for an activity sequence of shape ``(L, F)``.

    Output is clamped strictly inside (30, 220) after noise is added.
    """
    c = config or SimConfig()
    activity = np.asarray(activity, dtype=np.float64)
    if activity.ndim != 2 or activity.shape[0] == 0:
        raise InputError(f"activity must be a non-empty (L, F) array, got shape {activity.shape}")
    if np.any(activity < 0):
        raise InputError("activity values must be non-negative")
    epochs = start_epoch + STEP_SECONDS * np.arange(activity.shape[0])
    hr = profile.rhr + hr_gain(profile, c) * filtered_activity(activity, profile.fitness, c)
    hr = hr + circadian(epochs, profile, c)
    if c.noise_sd > 0:
        hr = hr + np.random.default_rng(seed).normal(0.0, c.noise_sd, size=hr.shape)
    return np.clip(hr, HR_FLOOR, HR_CEIL)


def draw_profile(user_id, rng, config=None):
    c = config or SimConfig()
    fitness = float(rng.beta(2.0, 2.0))
    rhr = c.rhr_intercept - c.rhr_fitness_slope * fitness + rng.normal(0.0, c.rhr_sd)
    sex = int(rng.random() < 0.5)
    return UserProfile(
        user_id=int(user_id),
        fitness=fitness,
        rhr=float(np.clip(rhr, 45.0, 85.0)),
        sex_analog=sex,
        size_analog=float(165.0 + 12.0 * sex + rng.normal(0.0, 7.0)),
        age_analog=float(rng.uniform(35.0, 65.0)),
        activity_level=float(rng.beta(2.0, 2.0)),
    )


def channel_profile(profile, n_channels, rng):
    """Unit direction splitting movement across channels.

    The first channels lean with sex and body size; a small per-user jitter
    keeps the split from being a pure function of traits.
    """
    size_z = (profile.size_analog - 171.0) / 9.0
    base = np.ones(n_channels)
    base[0] += 0.35 * profile.sex_analog
    if n_channels > 1:
        base[1] += 0.25 * size_z
    d = np.clip(base + rng.normal(0.0, 0.08, size=n_channels), 0.05, None)
    return d / np.linalg.norm(d)


def simulate_activity(profile, n_samples, start_epoch, rng, config=None):
    """Bout-structured activity of shape ``(n_samples, F)``, all entries >= 0."""
    c = config or SimConfig()
    lvl, fit = profile.activity_level, profile.fitness
    p_walk = 0.25 + 0.30 * lvl
    p_ex = 0.10 * lvl
    probs = np.array([1.0 - p_walk - p_ex, p_walk, p_ex])
    mean_steps = np.array(c.bout_minutes) * 60.0 / STEP_SECONDS
    intensity_mean = np.array([0.04, 0.3 + 0.35 * fit, 0.9 + 0.9 * fit, 0.008])

    hours = ((start_epoch + STEP_SECONDS * np.arange(n_samples)) % 86400) / 3600.0
    wake = wake_hour(profile)
    asleep = ((hours - (wake - c.sleep_hours)) % 24.0) < c.sleep_hours

    regime = np.empty(n_samples, dtype=np.int64)
    t = 0
    while t < n_samples:
        r = int(rng.choice(3, p=probs))
        # geometric lengths, capped at three means so one bout cannot fill the day
        length = min(1 + int(rng.geometric(1.0 / mean_steps[r])), int(3 * mean_steps[r]))
        regime[t:t + length] = r
        t += length
    regime[asleep] = SLEEP

    mu = intensity_mean[regime]
    # gamma(4) keeps per-step intensity positive with a moderate right tail
    intensity = mu * rng.gamma(4.0, 0.25, size=n_samples)
    direction = channel_profile(profile, c.n_channels, rng)
    wobble = np.clip(1.0 + 0.1 * rng.standard_normal((n_samples, c.n_channels)), 0.0, None)
    return intensity[:, None] * direction[None, :] * wobble


def generate_user(user_id, n_samples, seed, config=None):
    c = config or SimConfig()
    rng = np.random.default_rng([seed, user_id])
    profile = draw_profile(user_id, rng, c)
    start = EPOCH_BASE + int(rng.integers(0, 365 * 86400 // STEP_SECONDS)) * STEP_SECONDS
    activity = simulate_activity(profile, n_samples, start, rng, c)
    hr = simulate_hr(activity, profile, start, [seed, user_id, 1], c)
    return profile, RawTrace(user_id, start, activity, hr)


def generate_cohort(n_users, hours_per_user, seed, config=None):
    """Profiles and traces for ``n_users`` users with ids ``0..n_users-1``.

    Every user draws from an independent stream seeded by ``(seed, user_id)``,
    so any subset can be generated separately (or in parallel) and agree.
    """
    c = config or SimConfig()
    if int(n_users) != n_users or n_users < 1:
        raise ConfigError(f"n_users must be a positive integer, got {n_users}", field="n_users")
    if not hours_per_user > 0 or not math.isfinite(hours_per_user):
        raise ConfigError(f"hours_per_user must be positive, got {hours_per_user}", field="hours_per_user")
    return _generate(int(n_users), hours_per_user, seed, c)


def _generate(n_users, hours, seed, config):
    n_samples = int(math.floor(hours * 3600 / STEP_SECONDS))
    profiles, traces = [], []
    for uid in range(n_users):
        p, tr = generate_user(uid, n_samples, seed, config)
        profiles.append(p)
        traces.append(tr)
    return profiles, traces


# ---------------------------------------------------------------------------
# cohort directory I/O
# ---------------------------------------------------------------------------


def _fmt(v):
    return repr(float(v))


def _atomic_write(path, rows):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(rows)
    os.replace(tmp, path)


def write_cohort(profiles, traces, dir_path):
    os.makedirs(dir_path, exist_ok=True)
    rows = [PROFILE_FIELDS]
    for p in profiles:
        rows.append((p.user_id, _fmt(p.fitness), _fmt(p.rhr), p.sex_analog,
                     _fmt(p.size_analog), _fmt(p.age_analog), _fmt(p.activity_level)))
    _atomic_write(os.path.join(dir_path, "profiles.csv"), rows)
    for tr in traces:
        F = tr.activity.shape[1]
        axes = AXES if F == 3 else tuple(f"a{i}" for i in range(F))
        rows = [("epoch",) + axes + ("hr",)]
        for e, a, h in zip(tr.epochs.tolist(), tr.activity.tolist(), tr.hr.tolist()):
            rows.append([e] + [repr(v) for v in a] + [repr(h)])
        _atomic_write(os.path.join(dir_path, f"trace_{tr.user_id}.csv"), rows)


def _read_rows(path):
    if not os.path.isfile(path):
        raise CohortIOError(f"missing cohort file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CohortIOError(f"{path}: empty file")
    return rows[0], rows[1:]


def read_cohort(dir_path):
    if not os.path.isdir(dir_path):
        raise CohortIOError(f"cohort directory not found: {dir_path}")
    path = os.path.join(dir_path, "profiles.csv")
    header, rows = _read_rows(path)
    if tuple(header) != PROFILE_FIELDS:
        raise CohortIOError(f"{path}: unexpected header {header}")
    profiles = []
    for i, row in enumerate(rows, start=2):
        try:
            if len(row) != len(PROFILE_FIELDS):
                raise ValueError(f"expected {len(PROFILE_FIELDS)} fields, got {len(row)}")
            profiles.append(UserProfile(
                user_id=int(row[0]), fitness=float(row[1]), rhr=float(row[2]),
                sex_analog=int(row[3]), size_analog=float(row[4]), age_analog=float(row[5]),
                activity_level=float(row[6]),
            ))
        except ValueError as exc:
            raise CohortIOError(f"{path}: parse error at row {i}: {exc}") from exc
    traces = []
    for p in profiles:
        path = os.path.join(dir_path, f"trace_{p.user_id}.csv")
        header, rows = _read_rows(path)
        width = len(header)
        if width < 3 or header[0] != "epoch" or header[-1] != "hr":
            raise CohortIOError(f"{path}: unexpected header {header}")
        epochs, act, hr = [], [], []
        for i, row in enumerate(rows, start=2):
            try:
                if len(row) != width:
                    raise ValueError(f"expected {width} fields, got {len(row)}")
                epochs.append(int(row[0]))
                act.append([float(v) for v in row[1:-1]])
                hr.append(float(row[-1]))
            except ValueError as exc:
                raise CohortIOError(f"{path}: parse error at row {i}: {exc}") from exc
        if not epochs:
            raise CohortIOError(f"{path}: no samples")
        steps = np.diff(np.asarray(epochs))
        if np.any(steps != STEP_SECONDS):
            bad = int(np.flatnonzero(steps != STEP_SECONDS)[0]) + 3
            raise CohortIOError(f"{path}: parse error at row {bad}: step is not {STEP_SECONDS} s")
        traces.append(RawTrace(p.user_id, epochs[0], np.array(act), np.array(hr)))
    return profiles, traces
