"""Transfer grid: variant x PCA cutoff x outcome -> held-out AUC."""

import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import CohortIOError, ConfigError, InputError
from .pca import DEFAULT_CUTOFFS, apply_pca, fit_pca
from .probe import OUTCOMES, REG_GRID, auc, binarize, logreg_cv_train, outcome_values, rhr_baseline

VARIANTS = ("ae", "at", "art")
VARIANT_LABELS = {"ae": "Conv. Autoencoder", "at": "Step2Heart A/T", "art": "Step2Heart A/R/T"}
RESULT_COLUMNS = ("variant", "cutoff", "outcome", "k_components", "auc", "reg_strength", "seed")

# reference points from the original study, for context only
PUBLISHED_REFERENCE = {
    ("art", 0.999, "sex_analog"): 0.934,
    ("art", 0.99, "activity_level"): 0.806,
    ("at", 0.999, "fitness"): 0.645,
    ("ae", 0.999, "fitness"): 0.618,
}
PUBLISHED_K_RANGE = (10, 160)


@dataclass
class TransferConfig:
    cutoffs: tuple = DEFAULT_CUTOFFS
    cv_folds: int = 5
    reg_grid: tuple = REG_GRID
    outcomes: tuple = OUTCOMES

    def __post_init__(self):
        self.cutoffs = tuple(float(c) for c in self.cutoffs)
        self.reg_grid = tuple(float(c) for c in self.reg_grid)
        self.outcomes = tuple(self.outcomes)
        if not self.cutoffs or any(not 0 < c <= 1 for c in self.cutoffs):
            raise ConfigError("cutoffs must be non-empty and lie in (0, 1]", field="cutoffs")
        if not isinstance(self.cv_folds, int) or self.cv_folds < 2:
            raise ConfigError("cv_folds must be an integer >= 2", field="cv_folds")
        if not self.reg_grid or any(c <= 0 for c in self.reg_grid):
            raise ConfigError("reg_grid must hold positive values", field="reg_grid")
        bad = [o for o in self.outcomes if o not in OUTCOMES]
        if bad or not self.outcomes:
            raise ConfigError(f"unknown outcomes {bad}", field="outcomes")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ResultRow:
    variant: str
    cutoff: float
    outcome: str
    k_components: int
    auc: float
    reg_strength: float
    seed: int


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)
    baselines: list = field(default_factory=list)  # dicts: outcome, auc, reg_strength, seed

    def lookup(self, variant, cutoff, outcome):
        for r in self.rows:
            if r.variant == variant and r.cutoff == cutoff and r.outcome == outcome:
                return r
        raise KeyError((variant, cutoff, outcome))


def probe_users(split):
    """Users available to the downstream probe: everything outside the test split."""
    return sorted(split.train_users | split.val_users), sorted(split.test_users)


def build_labels(profiles, outcomes, train_users):
    return {o: binarize(o, outcome_values(profiles, o), train_users) for o in outcomes}


def evaluate_all(embeddings, profiles, split, config, seed=0, variants=VARIANTS):
    """Run the transfer grid.

    ``embeddings`` maps variant name -> :class:`PooledEmbeddings`.  PCA,
    outcome thresholds and probe weights are all fitted on non-test users.
    """
    missing = [v for v in variants if embeddings.get(v) is None]
    if missing:
        raise InputError(f"missing embeddings for variant(s) {missing}; run pretrain/extract first")
    train_u, test_u = probe_users(split)
    labels = build_labels(profiles, config.outcomes, train_u)
    table = ResultsTable()
    for v in variants:
        pooled = embeddings[v]
        Xtr, Xte = pooled.rows(train_u), pooled.rows(test_u)
        pca = fit_pca(Xtr, config.cutoffs)
        for c in config.cutoffs:
            k = pca.n_components(c)
            Ztr, Zte = apply_pca(pca, Xtr, k=k), apply_pca(pca, Xte, k=k)
            for o in config.outcomes:
                lab = labels[o]
                probe = logreg_cv_train(Ztr, lab.for_users(train_u), config.cv_folds, seed,
                                        config.reg_grid)
                score = auc(probe.scores(Zte), lab.for_users(test_u))
                table.rows.append(ResultRow(v, c, o, k, score, probe.C, seed))
    for name, res in rhr_baseline(profiles, labels, train_u, test_u, config.cv_folds, seed,
                                  config.reg_grid).items():
        table.baselines.append({"variant": "rhr_only", "outcome": name, "auc": res.auc,
                                "reg_strength": res.reg_strength, "seed": seed})
    return table


def write_results_csv(table, path):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in table.rows:
            w.writerow([r.variant, repr(r.cutoff), r.outcome, r.k_components, repr(r.auc),
                        repr(r.reg_strength), r.seed])
    os.replace(tmp, path)


def read_results_csv(path):
    if not os.path.isfile(path):
        raise CohortIOError(f"results file not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise CohortIOError(f"{path}: unexpected header {reader.fieldnames}")
        for i, rec in enumerate(reader, start=2):
            try:
                rows.append(ResultRow(rec["variant"], float(rec["cutoff"]), rec["outcome"],
                                      int(rec["k_components"]), float(rec["auc"]),
                                      float(rec["reg_strength"]), int(rec["seed"])))
            except (TypeError, ValueError) as exc:
                raise CohortIOError(f"{path}: parse error at row {i}: {exc}") from exc
    return rows


def mean_auc_by(rows, keys=("variant", "outcome")):
    """Average AUC over every row sharing ``keys`` (e.g. across cutoffs and seeds)."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r.auc)
    return {k: float(np.mean(v)) for k, v in groups.items()}


def ordering_verdict(rows, outcomes=OUTCOMES, min_outcomes=4):
    """Checks mean AUC art >= at >= ae per outcome; returns (passed, per-outcome flags)."""
    means = mean_auc_by(rows)
    flags = {}
    for o in outcomes:
        try:
            flags[o] = means[("art", o)] >= means[("at", o)] >= means[("ae", o)]
        except KeyError:
            continue
    return sum(flags.values()) >= min_outcomes and len(flags) > 0, flags
