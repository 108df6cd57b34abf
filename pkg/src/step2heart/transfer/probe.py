"""Binary labels, AUC, and L2 logistic-regression probes with stratified CV."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from ..errors import ConfigError, InputError

log = logging.getLogger(__name__)

REG_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
OUTCOMES = ("fitness", "rhr", "sex_analog", "size_analog", "age_analog", "activity_level")


def auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise InputError(f"{s.shape[0]} scores for {y.shape[0]} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class OutcomeLabel:
    name: str
    labels: dict        # user_id -> 0/1
    threshold: float

    def for_users(self, users):
        return np.array([self.labels[int(u)] for u in users], dtype=np.int64)


def binarize(name, values, train_users):
    """Split an outcome at its training-set median.

    ``values`` maps user_id -> value.  Users strictly above the median are
    positive; a value equal to the median is negative.  Two-valued outcomes
    are kept as they are (upper value positive), since a median split of a
    binary variable can put every user in one class.
    """
    train_users = list(train_users)
    train_vals = np.array([values[u] for u in train_users], dtype=np.float64)
    distinct = np.unique(np.asarray(list(values.values()), dtype=np.float64))
    if distinct.size < 2:
        raise InputError(f"outcome {name!r} is constant; cannot build a binary label")
    if distinct.size == 2:
        threshold = float(distinct.mean())
    else:
        threshold = float(np.median(train_vals))
    labels = {int(u): int(v > threshold) for u, v in values.items()}
    n_pos = sum(labels[int(u)] for u in train_users)
    if n_pos in (0, len(train_users)):
        raise InputError(f"outcome {name!r} gives a single class on the training users")
    return OutcomeLabel(name, labels, threshold)


def stratified_folds(labels, n_folds, seed):
    """Fold index per example, classes dealt round-robin after a seeded shuffle."""
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fold = np.empty(y.size, dtype=np.int64)
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        fold[idx] = np.arange(idx.size) % n_folds
    return fold


@dataclass
class LogisticModel:
    weights: np.ndarray
    intercept: float
    C: float
    converged: bool = True
    iterations: int = 0

    def decision(self, X):
        return np.asarray(X, dtype=np.float64) @ self.weights + self.intercept

    def predict_proba(self, X):
        return expit(self.decision(X))


def fit_logreg(X, y, C=1.0, tol=1e-6, max_iter=10_000):
    """L2-penalised logistic regression by damped Newton iteration.

    Minimises ``sum_i logloss_i + ||w||^2 / (2C)`` with an unpenalised
    intercept, stopping once the gradient norm drops below ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    penalty = np.full(d + 1, 1.0 / C)
    penalty[-1] = 0.0
    theta = np.zeros(d + 1)

    def objective(th):
        z = A @ th
        # log(1 + e^z) - y z, computed stably
        return float(np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(penalty * th * th))

    f = objective(theta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(A @ theta)
        grad = A.T @ (p - y) + penalty * theta
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        w = p * (1.0 - p)
        H = (A.T * w) @ A + np.diag(penalty)
        H[np.diag_indices_from(H)] += 1e-12
        step = np.linalg.solve(H, grad)
        decrease = float(grad @ step)
        if decrease < 1e-10 * max(1.0, abs(f)):
            # quadratic regime: the predicted change is below the rounding
            # noise of f, so a line search cannot tell steps apart
            theta = theta - step
            f = objective(theta)
            continue
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            fc = objective(cand)
            if fc <= f - 1e-4 * t * decrease:
                break
            t *= 0.5
        else:
            # no descent possible at machine precision
            converged = np.linalg.norm(grad) < 1e-4
            break
        theta, f = cand, fc
    if not converged:
        log.warning("logistic regression did not reach tol=%g (C=%g, %d iterations)", tol, C, it)
    return LogisticModel(theta[:-1].copy(), float(theta[-1]), C, converged, it)


@dataclass
class ProbeModel:
    model: LogisticModel
    C: float
    cv_auc: dict = field(default_factory=dict)  # C -> mean CV AUC

    def scores(self, X):
        return self.model.decision(X)


def logreg_cv_train(X, labels, folds=5, seed=0, grid=REG_GRID):
    """Choose C by mean stratified ``folds``-fold CV AUC, refit on all rows.

    Ties in CV AUC go to the smaller C (stronger regularisation).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise InputError(f"feature matrix {X.shape} does not match {y.size} labels")
    n_pos = int(y.sum())
    if n_pos < folds or y.size - n_pos < folds:
        raise InputError(f"need at least {folds} examples of each class, got {n_pos}/{y.size - n_pos}")
    fold = stratified_folds(y, folds, seed)
    cv = {}
    for C in grid:
        aucs = []
        for f in range(folds):
            tr, va = fold != f, fold == f
            m = fit_logreg(X[tr], y[tr], C)
            aucs.append(auc(m.decision(X[va]), y[va]))
        cv[float(C)] = float(np.mean(aucs))
    best_C = max(sorted(cv), key=lambda c: (cv[c], -c))
    return ProbeModel(fit_logreg(X, y, best_C), best_C, cv)


@dataclass
class BaselineResult:
    outcome: str
    auc: float
    reg_strength: float


def rhr_baseline(profiles, labels, train_users, test_users, folds=5, seed=0, grid=REG_GRID):
    """Test AUC of a probe on resting heart rate alone, one per outcome label.

    ``labels`` maps outcome name -> :class:`OutcomeLabel`.  rhr is standard
    scaled with training-user statistics.
    """
    rhr = {p.user_id: p.rhr for p in profiles}
    train_users, test_users = list(train_users), list(test_users)
    xtr = np.array([rhr[u] for u in train_users])
    mu, sd = xtr.mean(), xtr.std()
    if sd == 0:
        raise InputError("resting HR is constant across training users")
    Xtr = ((xtr - mu) / sd)[:, None]
    Xte = ((np.array([rhr[u] for u in test_users]) - mu) / sd)[:, None]
    out = {}
    for name, lab in labels.items():
        probe = logreg_cv_train(Xtr, lab.for_users(train_users), folds, seed, grid)
        out[name] = BaselineResult(name, auc(probe.scores(Xte), lab.for_users(test_users)), probe.C)
    return out


def outcome_values(profiles, name):
    if name not in OUTCOMES:
        raise ConfigError(f"unknown outcome {name!r}", field="outcomes")
    return {p.user_id: float(getattr(p, name)) for p in profiles}
