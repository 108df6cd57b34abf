"""Acceptance suite: one verdict line per criterion in the terminal summary.

Criteria 2b, 3, 4 and the runtime part of 6 need three full desk-scale runs
(`step2heart all --config desk --seed 0/1/2`).  They run once per session
into a temporary directory; set STEP2HEART_ACCEPTANCE_RUNS to a directory to
keep the runs and reuse them on the next invocation.
"""

import io
import itertools
import json
import math
import os
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from step2heart.cohortsim import (
    STEP_SECONDS,
    RawTrace,
    SimConfig,
    circadian,
    generate_cohort,
    hr_gain,
    recovery_tau,
)
from step2heart.harness import pipeline
from step2heart.harness.cli import main
from step2heart.harness.config import load_config, shipped_config_path
from step2heart.harness.manifest import RunManifest
from step2heart.harness.report import RHR_INDEPENDENT, read_predictions, report
from step2heart.neuralcore.layers import (
    AvgPool2,
    Conv1D,
    Dense,
    GlobalAvgPool,
    GRULayer,
    ReLU,
    Upsample2,
    gru_cell,
    gru_cell_backward,
)
from step2heart.neuralcore.losses import mse_loss, pinball_loss
from step2heart.neuralcore.models import ModelSpec, build_model
from step2heart.preprocess import (
    fit_scaler,
    split_users,
    window_count,
    windowize,
)
from step2heart.transfer.evaluate import TransferConfig, evaluate_all, read_results_csv
from step2heart.transfer.pca import apply_pca, components_for_cutoff, fit_pca
from step2heart.transfer.probe import auc, binarize, logreg_cv_train

from gradcheck import numeric_grad, rel_error
from test_transfer import synthetic_grid_inputs

SEEDS = (0, 1, 2)
CUTOFFS = (0.9, 0.95, 0.99, 0.999)
TEN_MINUTES = 600.0
TOY = dict(n_channels=3, window_len=16, conv_filters=4, gru_units=3, metadata_mlp_dim=5,
           head_hidden_dim=6, ae_bottleneck=4, ae_channels=3)


# ---------------------------------------------------------------------------
# desk-scale runs shared by criteria 2b, 3, 4 and 6
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Run directories and wall-clock seconds of `all` for each seed."""
    keep = os.environ.get("STEP2HEART_ACCEPTANCE_RUNS")
    out = keep or str(tmp_path_factory.mktemp("desk"))
    base = load_config(shipped_config_path("desk"))
    runs = {}
    for seed in SEEDS:
        cfg = base.with_seed(seed)
        run_dir = pipeline.run_dir_for(cfg, out)
        timing = os.path.join(run_dir, "acceptance_timing.json")
        if keep and os.path.isfile(timing):
            with open(timing, encoding="utf-8") as fh:
                seconds = json.load(fh)["all_seconds"]
        else:
            t0 = time.perf_counter()
            err = io.StringIO()
            code = main(["all", "--config", "desk", "--seed", str(seed), "--out", out],
                        stdout=io.StringIO(), stderr=err)
            seconds = time.perf_counter() - t0
            assert code == 0, err.getvalue()
            with open(timing, "w", encoding="utf-8") as fh:
                json.dump({"all_seconds": seconds}, fh)
        runs[seed] = (run_dir, seconds)
    return runs


@pytest.fixture(scope="session")
def desk_summary(desk_runs):
    paths = [os.path.join(d, "results.csv") for d, _ in desk_runs.values()]
    _, summary = report(paths)
    rows = [r for p in paths for r in read_results_csv(p)]
    baselines = []
    for d, _ in desk_runs.values():
        baselines.extend(pipeline.read_baselines_csv(os.path.join(d, "baselines.csv")))
    return summary, rows, baselines


def seed_mean_auc(rows, variant, outcome):
    """Mean test AUC over every seed and PCA cutoff, computed straight from rows."""
    vals = [r.auc for r in rows if r.variant == variant and r.outcome == outcome]
    assert len(vals) == len(SEEDS) * len(CUTOFFS)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------


def _layer_error(layer, x, seed):
    w = np.random.default_rng(seed).normal(size=layer.forward(x).shape)

    def f():
        return float(np.sum(layer.forward(x) * w))

    layer.forward(x)
    errs = [rel_error(layer.backward(w), numeric_grad(f, x))]
    for name, p in layer.params.items():
        layer.forward(x)
        layer.backward(w)
        errs.append(rel_error(layer.grads[name].copy(), numeric_grad(f, p)))
    return max(errs)


def _network_error(net, x, m, y):
    _, grads = net.loss_and_grads(x, m, y)
    analytic = np.concatenate([grads[k].ravel() for k in net.params])
    flat = net.params.flat()

    def f():
        net.params.set_flat(flat)
        return net.loss(x, m, y)

    num = numeric_grad(f, flat)
    net.params.set_flat(flat)
    return rel_error(analytic, num)


class TestCriterion1Gradients:
    def test_all_gradients_under_1e4_within_60s(self, verdict):
        """Every layer, both losses and both full networks against central differences."""
        t0 = time.perf_counter()
        errors = {}
        rng = np.random.default_rng(0)
        for name, layer, shape in [
            ("conv1d", Conv1D(3, 4, 5, rng), (2, 9, 3)),
            ("bigru_stack_layer", GRULayer(3, 4, rng), (2, 6, 3)),
            ("dense_mlp", Dense(5, 3, rng), (4, 5)),
            ("global_pool", GlobalAvgPool(), (2, 6, 3)),
            ("avgpool2", AvgPool2(), (2, 6, 3)),
            ("upsample2", Upsample2(), (2, 3, 3)),
        ]:
            errors[name] = _layer_error(layer, rng.normal(size=shape), 1)
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 1e-3] = 0.5
        errors["relu"] = _layer_error(ReLU(), x, 2)

        C, H = 3, 4
        xs, h = rng.normal(size=C), rng.normal(size=H)
        Wx, Uh, b = rng.normal(size=(C, 3 * H)), rng.normal(size=(H, 3 * H)), rng.normal(size=3 * H)
        w = rng.normal(size=H)
        _, cache = gru_cell(xs, h, Wx, Uh, b)
        grads = gru_cell_backward(w, cache)
        errors["gru_cell"] = max(
            rel_error(g, numeric_grad(lambda: float(gru_cell(xs, h, Wx, Uh, b)[0] @ w), a))
            for g, a in zip(grads, (xs, h, Wx, Uh, b)))

        q = (0.01, 0.05, 0.5, 0.95, 0.99)
        y = rng.normal(70, 10, size=6)
        pred = y[:, None] + rng.normal(0, 5, size=(6, 5))
        pred[np.abs(y[:, None] - pred) <= 1e-3] += 0.5  # keep away from the kink
        errors["pinball"] = rel_error(pinball_loss(pred, y, q)[1],
                                      numeric_grad(lambda: pinball_loss(pred, y, q)[0], pred))
        a, ah = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
        errors["mse"] = rel_error(mse_loss(a, ah)[1], numeric_grad(lambda: mse_loss(a, ah)[0], ah))

        for use_rhr in (False, True):
            spec = ModelSpec(**TOY, use_rhr_input=use_rhr)
            net = build_model("step2heart", spec, 3)
            net.init_output_bias(rng.normal(0, 0.1, 5))
            xw = rng.uniform(size=(2, 16, 3))
            m = rng.uniform(size=(2, spec.n_meta))
            errors[f"step2heart_rhr={use_rhr}"] = _network_error(net, xw, m, np.array([3.0, -3.0]))
        ae = build_model("autoencoder", ModelSpec(**TOY), 4)
        errors["autoencoder"] = _network_error(ae, rng.uniform(size=(2, 16, 3)), None, None)

        elapsed = time.perf_counter() - t0
        worst = max(errors, key=errors.get)
        ok = verdict(1, max(errors.values()) < 1e-4 and elapsed < 60.0,
                     f"max rel err {errors[worst]:.1e} ({worst}), {elapsed:.1f} s")
        assert ok, errors


# ---------------------------------------------------------------------------
# 2. quantile semantics
# ---------------------------------------------------------------------------


class TestCriterion2Quantiles:
    @pytest.mark.parametrize("q", [0.05, 0.5, 0.95])
    def test_pinball_minimiser_is_empirical_quantile(self, q, verdict):
        """Brute-force grid search lands within one inter-sample gap of the quantile."""
        samples = np.sort(np.random.default_rng(7).normal(75, 12, size=200))
        grid = np.linspace(samples[0] - 1, samples[-1] + 1, 40001)
        resid = samples[None, :] - grid[:, None]
        losses = np.maximum(q * resid, (q - 1) * resid).mean(axis=1)
        best = grid[int(np.argmin(losses))]
        # the library loss agrees with the inline expression at the minimiser
        lib = pinball_loss(np.full((samples.size, 1), best), samples, (q,))[0]
        assert lib == pytest.approx(losses.min(), rel=1e-12)
        target = np.quantile(samples, q, method="inverted_cdf")
        i = int(np.searchsorted(samples, target))
        gap = max(samples[min(i + 1, samples.size - 1)] - samples[i], samples[i] - samples[max(i - 1, 0)])
        ok = verdict(2, abs(best - target) <= gap, "")
        assert ok

    @pytest.mark.parametrize("variant", ["at", "art"])
    def test_held_out_coverage_and_median_mae(self, desk_runs, variant, verdict):
        """Seed-0 desk run, test users never seen in training or early stopping."""
        run_dir, _ = desk_runs[0]
        y, pred, qs = read_predictions(os.path.join(run_dir, variant, "predictions.csv"))["test"]
        with open(os.path.join(run_dir, variant, "pretrain.json"), encoding="utf-8") as fh:
            info = json.load(fh)
        cov = {float(q): float(np.mean(y <= pred[:, j])) for j, q in enumerate(qs)}
        mae = float(np.mean(np.abs(y - pred[:, list(qs).index(0.5)])))
        base = float(np.mean(np.abs(y - info["train_mean_hr"])))
        gain = 1.0 - mae / base
        seconds = RunManifest.load(run_dir).stages["pretrain"][f"seconds_{variant}"]
        ok = verdict(2, abs(cov[0.05] - 0.05) <= 0.07 and abs(cov[0.95] - 0.95) <= 0.07
                     and gain >= 0.20 and seconds < TEN_MINUTES,
                     f"{variant}: cov05={cov[0.05]:.3f} cov95={cov[0.95]:.3f} "
                     f"MAE gain {100 * gain:.1f}% pretrain {seconds:.0f} s")
        assert ok


# ---------------------------------------------------------------------------
# 3. ordering reproduction
# ---------------------------------------------------------------------------


class TestCriterion3Ordering:
    def test_ordering_and_fitness_margin(self, desk_summary, verdict):
        summary, rows, _ = desk_summary
        outcomes = sorted({r.outcome for r in rows})
        held = [o for o in outcomes
                if seed_mean_auc(rows, "art", o) >= seed_mean_auc(rows, "at", o)
                >= seed_mean_auc(rows, "ae", o)]
        margin = seed_mean_auc(rows, "at", "fitness") - seed_mean_auc(rows, "ae", "fitness")
        # the report reaches the same verdict by its own route
        assert summary["ordering"]["passed"] == (len(held) >= 4)
        assert summary["ordering"]["fitness_margin"] == pytest.approx(margin, abs=1e-12)
        table = ", ".join(
            f"{o}={seed_mean_auc(rows, 'art', o):.2f}/{seed_mean_auc(rows, 'at', o):.2f}/"
            f"{seed_mean_auc(rows, 'ae', o):.2f}" for o in outcomes)
        ok = verdict(3, len(held) >= 4 and margin >= 0.05,
                     f"ordering on {len(held)}/6 ({', '.join(held) or 'none'}), fitness margin "
                     f"{margin:+.3f}; art/at/ae: {table}")
        assert ok


# ---------------------------------------------------------------------------
# 4. rhr-only baseline
# ---------------------------------------------------------------------------


class TestCriterion4RhrBaseline:
    def test_independent_outcomes(self, desk_summary, verdict):
        summary, rows, baselines = desk_summary
        parts, ok = [], True
        for o in RHR_INDEPENDENT:
            b = float(np.mean([x["auc"] for x in baselines if x["outcome"] == o]))
            s2h = max(seed_mean_auc(rows, "at", o), seed_mean_auc(rows, "art", o))
            ok &= b < 0.60 and s2h >= b + 0.10
            parts.append(f"{o} rhr={b:.2f} s2h={s2h:.2f}")
        assert summary["rhr_baseline"]["passed"] == ok
        assert verdict(4, ok, ", ".join(parts))


# ---------------------------------------------------------------------------
# 5. PCA cutoffs
# ---------------------------------------------------------------------------


class TestCriterion5Pca:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(3, 40), st.integers(1, 12), st.integers(0, 2 ** 31 - 1))
    def test_k_monotone_in_cutoff(self, n, d, seed):
        X = np.random.default_rng(seed).normal(size=(n, d)) * np.arange(1, d + 1)
        state = fit_pca(X, CUTOFFS)
        ks = [state.n_components(c) for c in CUTOFFS]
        assert ks == sorted(ks)

    def test_oracles(self, verdict):
        rng = np.random.default_rng(5)
        # rank one: one component explains everything
        u = rng.normal(size=(50, 1))
        st1 = fit_pca(u @ rng.normal(size=(1, 6)), CUTOFFS)
        assert all(st1.n_components(c) == 1 for c in CUTOFFS)
        X = rng.normal(size=(120, 8)) @ rng.normal(size=(8, 8))
        st2 = fit_pca(X, CUTOFFS)
        V = st2.components
        ortho = np.abs(V.T @ V - np.eye(V.shape[1])).max()
        proj = apply_pca(st2, X)
        var_err = np.abs(proj.var(axis=0) - st2.eigenvalues).max()
        Z = (X - X.mean(0)) / X.std(0)
        corr_eig = np.sort(np.linalg.eigvalsh(np.cov(Z.T, bias=True)))[::-1]
        eig_err = np.abs(corr_eig - st2.eigenvalues).max()
        ks = [components_for_cutoff(st2.explained_ratio, c) for c in CUTOFFS]
        ok = verdict(5, ortho < 1e-10 and var_err < 1e-10 and eig_err < 1e-10 and ks == sorted(ks),
                     f"orthonormality {ortho:.1e}, eigenvalue/variance {var_err:.1e}, k={ks}")
        assert ok

    def test_k_monotone_on_desk_runs(self, desk_summary, verdict):
        _, rows, _ = desk_summary
        ok = True
        for seed, v in itertools.product(SEEDS, ("ae", "at", "art")):
            k = {r.cutoff: r.k_components for r in rows if r.seed == seed and r.variant == v}
            ok &= [k[c] for c in CUTOFFS] == sorted(k[c] for c in CUTOFFS)
        assert verdict(5, ok, "k monotone on every desk run")


# ---------------------------------------------------------------------------
# 6. pipeline hygiene
# ---------------------------------------------------------------------------


class TestCriterion6Hygiene:
    def test_leakage_guards(self, verdict):
        """Perturbing test users moves nothing that is fitted."""
        profiles, traces = generate_cohort(30, 1, seed=6)
        split = split_users([p.user_id for p in profiles], seed=6)
        W = pipeline.build_windows(traces, profiles, 16, False)
        s1 = fit_scaler(W.for_users(split.train_users))
        test_rows = np.isin(W.user_id, split.test_users)
        W.x[test_rows] *= 1e6
        W.m[test_rows] -= 1e3
        s2 = fit_scaler(W.for_users(split.train_users))
        scaler_ok = s1.to_dict() == s2.to_dict()

        profiles, emb, split = synthetic_grid_inputs(seed=9)
        train_u = sorted(set(split.train_users) | set(split.val_users))
        vals = {p.user_id: p.fitness for p in profiles}
        thr = binarize("fitness", vals, train_u).threshold
        cfg = TransferConfig(cutoffs=CUTOFFS, cv_folds=3, reg_grid=(0.01, 1.0, 100.0))
        a = evaluate_all(emb, profiles, split, cfg)
        test = sorted(split.test_users)
        for v in emb.values():
            v.values[test] = 1e3 * np.random.default_rng(0).standard_normal((len(test), v.values.shape[1]))
        perm = np.random.default_rng(1).permutation(test)
        fit = {u: profiles[u].fitness for u in test}
        for u, w in zip(test, perm):
            profiles[u].fitness = fit[w]
        vals2 = {u: v + 5.0 * (u in test) for u, v in vals.items()}
        threshold_ok = binarize("fitness", vals2, train_u).threshold == thr
        b = evaluate_all(emb, profiles, split, cfg)
        pca_ok = [r.k_components for r in a.rows] == [r.k_components for r in b.rows]
        probe_ok = [r.reg_strength for r in a.rows] == [r.reg_strength for r in b.rows]
        ok = verdict(6, scaler_ok and threshold_ok and pca_ok and probe_ok,
                     "scaler/threshold/PCA/probe unchanged by test-user perturbation")
        assert ok

    def test_end_to_end_deterministic(self, tmp_path, verdict):
        cfg = {"seed": 4, "cohort": {"n_users": 30, "hours": 2.0},
               "preprocess": {"window_len": 16, "min_hours": 1.0},
               "model": {"conv_filters": 4, "gru_units": 4, "metadata_mlp_dim": 8,
                         "head_hidden_dim": 8, "ae_bottleneck": 8},
               "training": {"max_epochs": 2}, "transfer": {"cv_folds": 2}}
        path = tmp_path / "tiny.json"
        path.write_text(json.dumps(cfg))
        blobs = []
        for out in ("a", "b"):
            code = main(["all", "--config", str(path), "--out", str(tmp_path / out)],
                        stdout=io.StringIO(), stderr=io.StringIO())
            assert code == 0
            run_dir = pipeline.run_dir_for(load_config(str(path)), str(tmp_path / out))
            blobs.append([open(os.path.join(run_dir, f), "rb").read()
                          for f in ("results.csv", "baselines.csv", "at/model.bin", "ae/model.bin")])
        assert verdict(6, blobs[0] == blobs[1], "fixed-seed rerun byte-identical")

    def test_desk_all_under_ten_minutes(self, desk_runs, verdict):
        """Judged on measured wall time.  The detail also gives the critical
        path with one process per variant, for machines with more cores."""
        parts, ok = [], True
        for seed, (run_dir, total) in desk_runs.items():
            per_variant = [v for k, v in RunManifest.load(run_dir).stages["pretrain"].items()
                           if k.startswith("seconds_")]
            critical = total - sum(per_variant) + max(per_variant)
            ok &= total < TEN_MINUTES
            parts.append(f"seed {seed}: {total:.0f} s (parallel critical path {critical:.0f} s)")
        assert verdict(6, ok, f"desk `all` on {os.cpu_count()} CPU(s): " + ", ".join(parts))


# ---------------------------------------------------------------------------
# 7. oracle equivalences
# ---------------------------------------------------------------------------


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestCriterion7Oracles:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 200), st.integers(0, 2 ** 31 - 1))
    def test_auc_matches_pair_counting(self, n, seed):
        rng = np.random.default_rng(seed)
        # rounding makes ties common
        scores = np.round(rng.normal(size=n), 1)
        labels = rng.random(n) < 0.5
        labels[0], labels[1] = True, False
        assert auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)

    def test_windowize_enumeration(self, verdict):
        mismatches = 0
        for T in (1, 2, 5, 16):
            for L in range(1, 4 * T + 1):
                act = np.arange(L * 3, dtype=float).reshape(L, 3)
                tr = RawTrace(0, 1_700_000_000, act, 60.0 + np.arange(L, dtype=float))
                w = windowize(tr, T=T)
                starts = [s for s in range(L) if s % T == 0 and s + T < L]
                mismatches += len(w) != len(starts) or window_count(L, T) != len(starts)
                for i, s in enumerate(starts[:len(w)]):
                    mismatches += not np.array_equal(w.x[i], act[s:s + T])
                    mismatches += w.y[i] != tr.hr[s + T]
        ok = verdict(7, mismatches == 0, "windowize == enumeration for L in 1..4T")
        assert ok

    def test_auc_brute_force_fixed(self, verdict):
        rng = np.random.default_rng(3)
        worst = 0.0
        for n in (2, 10, 57, 200):
            s = np.round(rng.normal(size=n), 2)
            y = np.arange(n) % 2 == 0
            worst = max(worst, abs(auc(s, y) - brute_auc(s, y)))
        assert verdict(7, worst < 1e-12, f"AUC vs pair counting max diff {worst:.0e}")

    def test_gain_recovery(self, verdict):
        cfg = SimConfig(noise_sd=0.0)
        profiles, traces = generate_cohort(20, 12, seed=8, config=cfg)
        worst = 0.0
        for p, tr in zip(profiles, traces):
            alpha = math.exp(-STEP_SECONDS / recovery_tau(p.fitness, cfg))
            mag = np.linalg.norm(tr.activity, axis=1)
            s = np.zeros_like(mag)
            prev = 0.0
            for t, m in enumerate(mag):
                prev = alpha * prev + (1.0 - alpha) * m
                s[t] = prev
            resid = tr.hr - p.rhr - circadian(tr.epochs, p, cfg)
            est = float(s @ resid / (s @ s))
            worst = max(worst, abs(est - hr_gain(p, cfg)) / hr_gain(p, cfg))
        assert verdict(7, worst < 0.05, f"gain recovery worst error {100 * worst:.2f}%")


def test_split_disjoint_across_seeds():
    for seed in range(20):
        s = split_users(range(200), seed)
        assert not (set(s.train_users) & set(s.test_users))
