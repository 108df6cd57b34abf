"""Experiment configuration: one JSON document covering every pipeline stage.

Layout (all sections optional, missing keys take the defaults below)::

    {
      "seed": 0,
      "variants": ["at", "art", "ae"],
      "cohort":     {"n_users": 200, "hours": 12.0, "sim": {...SimConfig...}},
      "preprocess": {"window_len": 64, "min_hours": 2.0, "split_seed": null,
                     "test_frac": 0.2, "val_frac": 0.1, "scaler_mode": "global"},
      "model":      {...ModelSpec fields except n_channels/window_len/use_rhr_input...},
      "training":   {"lr": 0.001, "batch_size": 64, "max_epochs": 300, "patience": 5},
      "transfer":   {"cutoffs": [0.9, 0.95, 0.99, 0.999], "cv_folds": 5,
                     "reg_grid": [0.001, 0.01, 0.1, 1.0, 10.0, 100.0], "outcomes": [...]}
    }

``split_seed: null`` means "use the global seed".  Window length and channel
count live in one place each (preprocess and cohort.sim) and are copied into
the model spec; the rhr input flag is set per variant.
"""

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

from ..cohortsim import SimConfig
from ..errors import ConfigError
from ..neuralcore.models import ModelSpec
from ..neuralcore.training import TrainConfig
from ..preprocess import SCALER_MODES
from ..transfer.evaluate import VARIANTS, TransferConfig

# ModelSpec fields that the config derives instead of storing
_DERIVED_MODEL_FIELDS = ("n_channels", "window_len", "use_rhr_input")


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


@dataclass
class CohortParams:
    n_users: int = 200
    hours: float = 12.0
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if not _is_int(self.n_users) or self.n_users < 5:
            raise ConfigError(f"n_users must be an integer >= 5, got {self.n_users!r}",
                              field="cohort.n_users")
        if isinstance(self.hours, bool) or not isinstance(self.hours, (int, float)) \
                or not math.isfinite(self.hours) or self.hours <= 0:
            raise ConfigError(f"hours must be positive, got {self.hours!r}", field="cohort.hours")
        self.hours = float(self.hours)


@dataclass
class PreprocessParams:
    window_len: int = 64
    min_hours: float = 2.0
    split_seed: int = None
    test_frac: float = 0.2
    val_frac: float = 0.1
    scaler_mode: str = "global"

    def __post_init__(self):
        if not _is_int(self.window_len) or self.window_len < 4:
            raise ConfigError(f"window_len must be an integer >= 4, got {self.window_len!r}",
                              field="preprocess.window_len")
        if isinstance(self.min_hours, bool) or not isinstance(self.min_hours, (int, float)) \
                or self.min_hours < 0:
            raise ConfigError("min_hours must be a non-negative number", field="preprocess.min_hours")
        if self.split_seed is not None and not _is_int(self.split_seed):
            raise ConfigError("split_seed must be an integer or null", field="preprocess.split_seed")
        for name in ("test_frac", "val_frac"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v!r}", field=f"preprocess.{name}")
        if self.test_frac + self.val_frac >= 1:
            raise ConfigError("test_frac + val_frac must stay below 1", field="preprocess.val_frac")
        if self.scaler_mode not in SCALER_MODES:
            raise ConfigError(f"scaler_mode must be one of {SCALER_MODES}",
                              field="preprocess.scaler_mode")


def _section(cls, data, name, exclude=()):
    """Build dataclass ``cls`` from ``data``, naming unknown or bad keys with the section prefix."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a JSON object", field=name)
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]}", field=f"{name}.{unknown[0]}")
    try:
        return cls(**data)
    except ConfigError as exc:
        f = exc.field or name
        raise ConfigError(str(exc), field=f if f.startswith(name + ".") else f"{name}.{f}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}", field=name) from None


@dataclass
class ExperimentConfig:
    seed: int = 0
    variants: tuple = VARIANTS
    cohort: CohortParams = field(default_factory=CohortParams)
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    model: dict = field(default_factory=dict)
    training: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)

    def __post_init__(self):
        if not _is_int(self.seed) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}", field="seed")
        self.variants = tuple(self.variants)
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants or len(set(self.variants)) != len(self.variants):
            raise ConfigError(f"variants must be distinct values from {VARIANTS}", field="variants")
        # validates the model section eagerly
        self.model_spec("at")
        if self.transfer.cv_folds * 2 > self.cohort.n_users:
            raise ConfigError("too few users for the requested CV folds", field="transfer.cv_folds")

    @property
    def split_seed(self):
        return self.seed if self.preprocess.split_seed is None else self.preprocess.split_seed

    def model_spec(self, variant):
        return _section(ModelSpec, {**self.model,
                                    "n_channels": self.cohort.sim.n_channels,
                                    "window_len": self.preprocess.window_len,
                                    "use_rhr_input": variant == "art"}, "model")

    def train_config(self):
        return replace(self.training, seed=self.seed)

    def with_seed(self, seed):
        return ExperimentConfig.from_dict({**self.to_dict(), "seed": seed})

    def to_dict(self):
        training = asdict(self.training)
        training.pop("seed")
        return {
            "seed": self.seed,
            "variants": list(self.variants),
            "cohort": {"n_users": self.cohort.n_users, "hours": self.cohort.hours,
                       "sim": self.cohort.sim.to_dict()},
            "preprocess": asdict(self.preprocess),
            "model": dict(self.model),
            "training": training,
            "transfer": self.transfer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object", field="<root>")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]}", field=unknown[0])
        cohort = dict(d.get("cohort") or {})
        sim = cohort.pop("sim", None) or {}
        if not isinstance(sim, dict):
            raise ConfigError("cohort.sim must be a JSON object", field="cohort.sim")
        sim_cfg = _section(SimConfig, sim, "cohort.sim")
        model = d.get("model") or {}
        if not isinstance(model, dict):
            raise ConfigError("section 'model' must be a JSON object", field="model")
        for k in model:
            if k in _DERIVED_MODEL_FIELDS:
                raise ConfigError(f"model.{k} is derived from other sections", field=f"model.{k}")
        if "seed" in (d.get("training") or {}):
            raise ConfigError("training.seed is taken from the global seed", field="training.seed")
        kwargs = {
            "cohort": _section(CohortParams, {**cohort, "sim": sim_cfg}, "cohort"),
            "preprocess": _section(PreprocessParams, d.get("preprocess"), "preprocess"),
            "model": dict(model),
            "training": _section(TrainConfig, d.get("training"), "training", exclude=("seed",)),
            "transfer": _section(TransferConfig, d.get("transfer"), "transfer"),
        }
        if "seed" in d:
            kwargs["seed"] = d["seed"]
        if "variants" in d:
            kwargs["variants"] = d["variants"]
        return cls(**kwargs)

    def config_hash(self):
        """Content hash of everything except the seed (the seed is part of the run id)."""
        body = self.to_dict()
        body.pop("seed")
        blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def run_id(self):
        return f"{self.seed}-{self.config_hash()[:10]}"


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", field="--config") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})",
                          field="--config") from None
    return ExperimentConfig.from_dict(data)


def save_config(config, path):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


SHIPPED_CONFIGS = ("desk", "full")


def shipped_config_path(name):
    """Path of a config bundled with the package (``desk`` or ``full``)."""
    if name not in SHIPPED_CONFIGS:
        raise ConfigError(f"no shipped config named {name!r}", field="--config")
    return os.path.join(os.path.dirname(__file__), "configs", f"{name}.json")
