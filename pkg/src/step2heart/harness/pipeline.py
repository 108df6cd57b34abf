"""Pipeline stages.  Each stage reads its inputs through the run manifest and
records its outputs there, so stages can be run one at a time or chained.

Run directory layout::

    <out>/runs/<seed>-<confighash>/
        manifest.json  config.json
        cohort/profiles.csv  cohort/trace_<uid>.csv  split.json
        windows_train.csv  windows_val.csv  windows_test.csv   (unscaled, rhr column last)
        <variant>/scaler.json  model.json  model.bin  training_log.csv
                  pretrain.json  predictions.csv (Step2Heart only)  embeddings.csv
        results.csv  baselines.csv  results.json
        summary.json  report.txt
"""

import csv
import json
import logging
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from ..cohortsim import generate_cohort, read_cohort, write_cohort
from ..errors import CohortIOError, ConfigError, MissingArtifactError
from ..neuralcore.checkpoint import load_checkpoint, save_checkpoint
from ..neuralcore.training import predict, train
from ..preprocess import (
    ScalerState,
    SplitAssignment,
    apply_scaler,
    build_windows,
    filter_min_duration,
    fit_scaler,
    split_users,
    write_windows,
)
from ..transfer.embeddings import EmbeddingMatrix, PooledEmbeddings, extract_embeddings, pool_user
from ..transfer.evaluate import evaluate_all, write_results_csv
from .config import ExperimentConfig, save_config
from .manifest import RunManifest, atomic_write_json

log = logging.getLogger(__name__)

MODEL_KIND = {"at": "step2heart", "art": "step2heart", "ae": "autoencoder"}
SPLITS = ("train", "val", "test")


def run_dir_for(config, out):
    return os.path.join(out, "runs", config.run_id())


def open_run(config, out, create=False):
    """Return ``(run_dir, manifest)``; a fresh manifest is created only when ``create``."""
    run_dir = run_dir_for(config, out)
    if create:
        os.makedirs(run_dir, exist_ok=True)
        try:
            manifest = RunManifest.load(run_dir)
        except MissingArtifactError:
            manifest = RunManifest(config.run_id(), config.to_dict(), config.config_hash())
            save_config(config, os.path.join(run_dir, "config.json"))
            manifest.save(run_dir)
        return run_dir, manifest
    return run_dir, RunManifest.load(run_dir)


def _variants(config, variant):
    if variant is None:
        return config.variants
    if variant not in MODEL_KIND:
        raise ConfigError(f"unknown variant {variant!r}", field="--variant")
    return (variant,)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def stage_generate(config, out):
    run_dir, manifest = open_run(config, out, create=True)
    c = config.cohort
    profiles, traces = generate_cohort(c.n_users, c.hours, config.seed, c.sim)
    kept = filter_min_duration(traces, config.preprocess.min_hours)
    if len(kept) < 5:
        raise ConfigError(f"only {len(kept)} users meet min_hours={config.preprocess.min_hours}",
                          field="preprocess.min_hours")
    p = config.preprocess
    split = split_users([t.user_id for t in kept], config.split_seed, p.test_frac, p.val_frac)
    write_cohort(profiles, traces, os.path.join(run_dir, "cohort"))
    atomic_write_json(os.path.join(run_dir, "split.json"), split.to_dict())
    # unscaled windows with the rhr column; the activity-only variants drop it
    windows = build_windows(kept, profiles, p.window_len, use_rhr_input=True)
    for name in SPLITS:
        users = getattr(split, f"{name}_users")
        write_windows(os.path.join(run_dir, f"windows_{name}.csv"), windows.for_users(users))
    arts = (["cohort/profiles.csv", "split.json"] + [f"windows_{n}.csv" for n in SPLITS]
            + [f"cohort/trace_{t.user_id}.csv" for t in traces])
    manifest.mark(run_dir, "generate", arts)
    log.info("generated %d users (%d kept) in %s", len(profiles), len(kept), run_dir)
    return run_dir


def _load_cohort(run_dir, manifest):
    manifest.require(run_dir, "generate", ["cohort/profiles.csv", "split.json"])
    profiles, traces = read_cohort(os.path.join(run_dir, "cohort"))
    with open(os.path.join(run_dir, "split.json"), encoding="utf-8") as fh:
        split = SplitAssignment.from_dict(json.load(fh))
    users = split.train_users | split.val_users | split.test_users
    traces = [t for t in traces if t.user_id in users]
    return profiles, traces, split


def _windows(config, variant, profiles, traces):
    return build_windows(traces, profiles, config.preprocess.window_len, variant == "art")


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def _write_predictions(path, net, windows_by_split, quantiles):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "user_id", "y"] + [f"q{q!r}" for q in quantiles])
        for name, ws in windows_by_split:
            pred = predict(net, ws)
            for uid, y, row in zip(ws.user_id.tolist(), ws.y.tolist(), pred.tolist()):
                w.writerow([name, uid, repr(y)] + [repr(v) for v in row])
    os.replace(tmp, path)


def _pretrain_variant(config, run_dir, v, cohort):
    """Train one variant and write its files; returns ``(artifacts, extra)``."""
    profiles, traces, split = cohort
    t0 = time.time()
    vdir = os.path.join(run_dir, v)
    os.makedirs(vdir, exist_ok=True)
    windows = _windows(config, v, profiles, traces)
    train_w = windows.for_users(split.train_users)
    val_w = windows.for_users(split.val_users)
    scaler = fit_scaler(train_w, config.preprocess.scaler_mode)
    train_s, val_s = apply_scaler(scaler, train_w), apply_scaler(scaler, val_w)
    spec = config.model_spec(v)
    net, history = train(MODEL_KIND[v], train_s, val_s, spec, config.train_config())
    atomic_write_json(os.path.join(vdir, "scaler.json"), scaler.to_dict())
    save_checkpoint(net, os.path.join(vdir, "model"))
    history.write_csv(os.path.join(vdir, "training_log.csv"))
    info = {"variant": v, "kind": MODEL_KIND[v], "n_params": int(net.n_params),
            "best_epoch": history.best_epoch, "best_val_loss": history.best_val_loss,
            "epochs_run": history.epochs_run, "stop_reason": history.stop_reason,
            "train_mean_hr": float(train_w.y.mean()),
            "n_windows": {"train": len(train_w), "val": len(val_w)}}
    arts = [f"{v}/scaler.json", f"{v}/model.json", f"{v}/model.bin",
            f"{v}/training_log.csv", f"{v}/pretrain.json"]
    if MODEL_KIND[v] == "step2heart":
        test_s = apply_scaler(scaler, windows.for_users(split.test_users))
        _write_predictions(os.path.join(vdir, "predictions.csv"), net,
                           [("val", val_s), ("test", test_s)], spec.quantiles)
        arts.append(f"{v}/predictions.csv")
    atomic_write_json(os.path.join(vdir, "pretrain.json"), info)
    log.info("pretrained %s: best epoch %d of %d (%s) in %.0fs", v, history.best_epoch,
             history.epochs_run, history.stop_reason, time.time() - t0)
    return arts, {f"seconds_{v}": round(time.time() - t0, 1)}


def _pretrain_job(config_dict, run_dir, v):
    # runs in a worker process: reload everything from disk
    config = ExperimentConfig.from_dict(config_dict)
    cohort = _load_cohort(run_dir, RunManifest.load(run_dir))
    return _pretrain_variant(config, run_dir, v, cohort)


def stage_pretrain(config, out, variant=None, jobs=1):
    """Train each variant.  With ``jobs > 1`` variants train in separate
    processes; every variant has its own seeded stream, so the outputs do
    not depend on ``jobs``."""
    run_dir, manifest = open_run(config, out)
    cohort = _load_cohort(run_dir, manifest)
    variants = _variants(config, variant)
    if jobs > 1 and len(variants) > 1:
        workers = min(jobs, len(variants))
        ctx = multiprocessing.get_context("spawn")
        # split the cores between workers; spawned children read this before importing numpy
        share = str(max(1, (os.cpu_count() or 1) // workers))
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, share)
        with ProcessPoolExecutor(workers, mp_context=ctx) as pool:
            futures = [pool.submit(_pretrain_job, config.to_dict(), run_dir, v) for v in variants]
            # mark in variant order once each finishes, so the manifest is order-stable
            for fut in futures:
                arts, extra = fut.result()
                manifest.mark(run_dir, "pretrain", arts, **extra)
    else:
        for v in variants:
            arts, extra = _pretrain_variant(config, run_dir, v, cohort)
            manifest.mark(run_dir, "pretrain", arts, **extra)
    return run_dir


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


def _pretrained_files(v):
    return [f"{v}/scaler.json", f"{v}/model.json", f"{v}/model.bin"]


def write_pooled(path, pooled):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id"] + [f"e{j}" for j in range(pooled.values.shape[1])])
        for u, row in zip(pooled.users.tolist(), pooled.values.tolist()):
            w.writerow([u] + [repr(x) for x in row])
    os.replace(tmp, path)


def read_pooled(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        users = np.array([int(r[0]) for r in rows], dtype=np.int64)
        values = np.array([[float(x) for x in r[1:]] for r in rows], dtype=np.float64)
    except (OSError, ValueError, IndexError) as exc:
        raise CohortIOError(f"cannot read embeddings {path}: {exc}") from exc
    return PooledEmbeddings(users, values.reshape(len(users), -1))


def stage_extract(config, out, variant=None):
    run_dir, manifest = open_run(config, out)
    profiles, traces, _ = _load_cohort(run_dir, manifest)
    for v in _variants(config, variant):
        manifest.require(run_dir, "pretrain", _pretrained_files(v))
        vdir = os.path.join(run_dir, v)
        with open(os.path.join(vdir, "scaler.json"), encoding="utf-8") as fh:
            scaler = ScalerState.from_dict(json.load(fh))
        net = load_checkpoint(os.path.join(vdir, "model"), expect_kind=MODEL_KIND[v])
        windows = apply_scaler(scaler, _windows(config, v, profiles, traces))
        E = extract_embeddings(net, net.spec, windows)
        write_pooled(os.path.join(vdir, "embeddings.csv"), pool_user(E))
        manifest.mark(run_dir, "extract", [f"{v}/embeddings.csv"])
    return run_dir


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def write_baselines_csv(table, path):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "outcome", "auc", "reg_strength", "seed"])
        for b in table.baselines:
            w.writerow([b["variant"], b["outcome"], repr(b["auc"]), repr(b["reg_strength"]),
                        b["seed"]])
    os.replace(tmp, path)


def read_baselines_csv(path):
    if not os.path.isfile(path):
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"variant": r["variant"], "outcome": r["outcome"], "auc": float(r["auc"]),
                 "reg_strength": float(r["reg_strength"]), "seed": int(r["seed"])}
                for r in csv.DictReader(fh)]


def stage_evaluate(config, out, variant=None, cutoffs=None):
    run_dir, manifest = open_run(config, out)
    profiles, _, split = _load_cohort(run_dir, manifest)
    variants = _variants(config, variant)
    pooled = {}
    for v in variants:
        if not os.path.exists(os.path.join(run_dir, v, "embeddings.csv")):
            # distinguish "never trained" from "trained but not extracted"
            manifest.require(run_dir, "pretrain", _pretrained_files(v))
            manifest.require(run_dir, "extract", [f"{v}/embeddings.csv"])
        pooled[v] = read_pooled(os.path.join(run_dir, v, "embeddings.csv"))
    tcfg = config.transfer
    if cutoffs is not None:
        tcfg = type(tcfg)(**{**tcfg.to_dict(), "cutoffs": cutoffs})
    table = evaluate_all(pooled, profiles, split, tcfg, config.seed, variants)
    write_results_csv(table, os.path.join(run_dir, "results.csv"))
    write_baselines_csv(table, os.path.join(run_dir, "baselines.csv"))
    atomic_write_json(os.path.join(run_dir, "results.json"),
                      {"rows": [r.__dict__ for r in table.rows], "baselines": table.baselines})
    manifest.mark(run_dir, "evaluate", ["results.csv", "baselines.csv", "results.json"])
    return run_dir
