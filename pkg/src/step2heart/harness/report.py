"""Human- and machine-readable summaries of one or more finished runs."""

import csv
import json
import os

import numpy as np

from ..errors import CohortIOError, InputError
from ..transfer.evaluate import (
    VARIANT_LABELS,
    VARIANTS,
    mean_auc_by,
    ordering_verdict,
    read_results_csv,
)
from ..transfer.probe import OUTCOMES
from .manifest import atomic_write_json
from .pipeline import read_baselines_csv

# outcomes built without any dependence on rhr (rhr only depends on fitness)
RHR_INDEPENDENT = ("sex_analog", "size_analog", "age_analog", "activity_level")


def read_predictions(path):
    """``{split: (y, pred, quantiles)}`` from a predictions CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        qs = [float(h[1:]) for h in header[3:]]
        by_split = {}
        for row in reader:
            by_split.setdefault(row[0], []).append([float(v) for v in row[2:]])
    out = {}
    for name, rows in by_split.items():
        a = np.asarray(rows)
        out[name] = (a[:, 0], a[:, 1:], np.asarray(qs))
    return out


def coverage(y, pred):
    """Fraction of targets at or below each quantile head's forecast."""
    return (np.asarray(y)[:, None] <= np.asarray(pred)).mean(axis=0)


def calibration(run_dir, variants=("at", "art")):
    """Per-variant coverage per quantile plus median-head MAE against the
    predict-the-training-mean baseline, for each stored split."""
    out = {}
    for v in variants:
        pred_path = os.path.join(run_dir, v, "predictions.csv")
        info_path = os.path.join(run_dir, v, "pretrain.json")
        if not os.path.isfile(pred_path):
            continue
        with open(info_path, encoding="utf-8") as fh:
            mean_hr = json.load(fh)["train_mean_hr"]
        entry = {}
        for split, (y, pred, qs) in read_predictions(pred_path).items():
            cov = coverage(y, pred)
            mid = int(np.argmin(np.abs(qs - 0.5)))
            mae = float(np.mean(np.abs(y - pred[:, mid])))
            base = float(np.mean(np.abs(y - mean_hr)))
            entry[split] = {"n": int(y.size),
                            "coverage": {repr(float(q)): float(c) for q, c in zip(qs, cov)},
                            "median_mae": mae, "mean_baseline_mae": base,
                            "mae_improvement": 1.0 - mae / base if base > 0 else 0.0}
        out[v] = entry
    return out


def best_cutoffs(rows):
    """Best cutoff (highest seed-mean AUC) per (variant, outcome)."""
    means = mean_auc_by(rows, ("variant", "outcome", "cutoff"))
    best = {}
    for (v, o, c), a in sorted(means.items()):
        if (v, o) not in best or a > best[(v, o)][1]:
            best[(v, o)] = (c, a)
    return best


def rhr_claim(rows, baselines, outcomes=RHR_INDEPENDENT, ceiling=0.60, margin=0.10):
    """For rhr-independent outcomes: rhr-only AUC below ``ceiling`` and the
    better Step2Heart variant at least ``margin`` above it."""
    base = {}
    for b in baselines:
        base.setdefault(b["outcome"], []).append(b["auc"])
    means = mean_auc_by(rows)
    detail = {}
    for o in outcomes:
        if o not in base:
            continue
        b = float(np.mean(base[o]))
        s2h = max((means[(v, o)] for v in ("at", "art") if (v, o) in means), default=float("nan"))
        detail[o] = {"rhr_only": b, "step2heart": s2h,
                     "passed": bool(b < ceiling and s2h >= b + margin)}
    return bool(detail) and all(d["passed"] for d in detail.values()), detail


def _fmt_table(rows, variants, outcomes):
    lines = []
    means = mean_auc_by(rows, ("variant", "outcome", "cutoff"))
    ks = {}
    for r in rows:
        ks.setdefault((r.variant, r.cutoff), []).append(r.k_components)
    cutoffs = sorted({r.cutoff for r in rows})
    width = max(len(VARIANT_LABELS.get(v, v)) for v in variants) + 2
    head = "".join(f"{o[:14]:>15s}" for o in outcomes)
    for c in cutoffs:
        lines.append(f"explained variance {100 * c:g}%")
        lines.append(f"{'':{width}s}{'k':>5s}{head}")
        for v in variants:
            if (v, c) not in ks:
                continue
            k = ks[(v, c)]
            ktxt = str(k[0]) if len(set(k)) == 1 else f"~{np.mean(k):.0f}"
            cells = "".join(f"{means[(v, o, c)]:15.3f}" if (v, o, c) in means else f"{'-':>15s}"
                            for o in outcomes)
            lines.append(f"{VARIANT_LABELS.get(v, v):{width}s}{ktxt:>5s}{cells}")
        lines.append("")
    return lines


def report(results_paths, out_dir=None, stream=None):
    """Render one or more ``results.csv`` files (e.g. several seeds) into text
    and ``summary.json``.  Returns ``(text, summary_dict)``."""
    if isinstance(results_paths, (str, os.PathLike)):
        results_paths = [results_paths]
    rows, baselines, calib = [], [], {}
    for path in results_paths:
        if not os.path.isfile(path):
            raise CohortIOError(f"results file not found: {path}")
        rows.extend(read_results_csv(path))
        run_dir = os.path.dirname(os.path.abspath(path))
        baselines.extend(read_baselines_csv(os.path.join(run_dir, "baselines.csv")))
        cal = calibration(run_dir)
        if cal:
            calib[os.path.basename(run_dir)] = cal
    if not rows:
        raise InputError("results are empty; nothing to report")

    variants = [v for v in VARIANTS if any(r.variant == v for r in rows)]
    outcomes = [o for o in OUTCOMES if any(r.outcome == o for r in rows)]
    seeds = sorted({r.seed for r in rows})
    lines = [f"Transfer results: mean test AUC over seeds {seeds}", ""]
    lines += _fmt_table(rows, variants, outcomes)

    best = best_cutoffs(rows)
    lines.append("best cutoff per (variant, outcome)")
    for (v, o), (c, a) in sorted(best.items()):
        lines.append(f"  {v:4s} {o:15s} cutoff={c:<6g} auc={a:.3f}")
    lines.append("")

    passed, flags = ordering_verdict(rows, outcomes)
    means = mean_auc_by(rows)
    held = [o for o, f in flags.items() if f]
    verdict = "PASS" if passed else "FAIL"
    lines.append(f"ORDERING {verdict}: A/R/T >= A/T >= autoencoder on {len(held)} of "
                 f"{len(flags)} outcomes ({', '.join(held) or 'none'})")
    fit_margin = None
    if ("at", "fitness") in means and ("ae", "fitness") in means:
        fit_margin = means[("at", "fitness")] - means[("ae", "fitness")]
        lines.append(f"fitness margin A/T - autoencoder: {fit_margin:+.3f}")
    lines.append("")

    rhr_ok, rhr_detail = (False, {})
    if baselines:
        lines.append("rhr-only baseline (mean test AUC)")
        base_means = {}
        for b in baselines:
            base_means.setdefault(b["outcome"], []).append(b["auc"])
        for o in outcomes:
            if o in base_means:
                lines.append(f"  {o:15s} {np.mean(base_means[o]):.3f}")
        rhr_ok, rhr_detail = rhr_claim(rows, baselines)
        lines.append(f"RHR-BASELINE {'PASS' if rhr_ok else 'FAIL'}: rhr-independent outcomes "
                     "below 0.60 with Step2Heart >= 0.10 above")
        lines.append("")

    if calib:
        lines.append("quantile calibration (fraction of targets <= forecast)")
        for run_id, per_variant in calib.items():
            for v, per_split in per_variant.items():
                for split, e in per_split.items():
                    cov = "  ".join(f"q{q}:{c:.3f}" for q, c in e["coverage"].items())
                    lines.append(f"  {run_id} {v:3s} {split:4s} n={e['n']:<5d} "
                                 f"{cov}  median MAE {e['median_mae']:.2f} vs mean "
                                 f"{e['mean_baseline_mae']:.2f}")
        lines.append("")

    summary = {
        "seeds": seeds,
        "rows": [r.__dict__ for r in rows],
        "mean_auc": {f"{v}/{o}": a for (v, o), a in sorted(means.items())},
        "best_cutoff": {f"{v}/{o}": {"cutoff": c, "auc": a} for (v, o), (c, a) in best.items()},
        "ordering": {"passed": passed, "per_outcome": flags, "fitness_margin": fit_margin},
        "rhr_baseline": {"passed": rhr_ok, "per_outcome": rhr_detail, "rows": baselines},
        "calibration": calib,
    }
    text = "\n".join(lines)
    if out_dir is not None:
        atomic_write_json(os.path.join(out_dir, "summary.json"), summary)
        tmp = os.path.join(out_dir, "report.txt.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        os.replace(tmp, os.path.join(out_dir, "report.txt"))
    if stream is not None:
        stream.write(text + "\n")
    return text, summary
