"""
Acceptance suite: ten end-to-end criteria, each reported as one PASS/FAIL line
in the terminal summary.

Ground truth: from-scratch least squares for the trend recurrences, the sample
mean for the squared-loss truncation factor, Monte-Carlo size of the segment
test on white noise, seeded benchmark streams with a known change point,
Bernoulli error steps for the reference detectors, binomial 3-sigma bands for
the attack transformers, and byte comparison of repeated CLI runs.  Criteria 5
to 7 share one experiment matrix at a tenth of the benchmark lengths; set
RRBMDD_ACCEPTANCE_DIR to keep (or reuse) its CSV output.
"""
import json
import math
import os
import time
from collections import defaultdict

import numpy as np
import pytest

from rrbmdd import cli
from rrbmdd.attacks import FLIPPED, INJECTED, LabeledStream, flip_labels, inject_concepts, read_audit, sparsify_labels, write_audit
from rrbmdd.baselines import BASELINES, make_baseline
from rrbmdd.detector import RbmDriftDetector, Signal, TrendState, granger_drift_test, trend_slope, update_trend
from rrbmdd.evaluation import RBM_VARIANTS, ExperimentConfig, read_csv, rlr_cells, run_matrix, write_results, rank_table
from rrbmdd.robust import truncation_factor
from rrbmdd.cli import _cells_from_rows
from rrbmdd.streams import generate, make_benchmark

STREAMS = ("HYP_I", "LED_S", "RBF_G", "RBF_S", "SEA_G", "TRE_S")
HEADLINE = ("EDDM", "ECDD", "FHDDM", "RDDM", "WSTD", "RRBM-DD")


def ols_slope(ts, rs):
    tc = ts - ts.mean()
    return float(tc @ (rs - rs.mean()) / (tc @ tc))


class TestTrendRecurrences:
    def test_criterion_1_recurrences_match_ols(self, verdict):
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst_acc = worst_slope = 0.0
        for _ in range(10_000):
            w = int(rng.integers(2, 101))
            n = int(rng.integers(2, 3 * w + 20))
            r = rng.random(n) * 10 ** rng.uniform(-3, 2)
            state = TrendState(w=w)
            for x in r.tolist():
                update_trend(state, x)
            m = min(w, n)
            ts, rs = np.arange(n - m + 1, n + 1, dtype=float), r[-m:]
            for got, want in ((state.T_bar, ts.sum()), (state.R_bar, rs.sum()),
                              (state.TR_bar, ts @ rs), (state.T2_bar, ts @ ts)):
                worst_acc = max(worst_acc, abs(got - want) / abs(want))
            want = ols_slope(ts, rs)
            worst_slope = max(worst_slope, abs(trend_slope(state) - want) / abs(want))
        elapsed = time.perf_counter() - t0
        ok = worst_acc <= 1e-9 and worst_slope <= 1e-9 and elapsed < 30
        verdict("criterion 1 (trend recurrences vs OLS)", ok,
                f"max rel err accumulators {worst_acc:.2e}, slope {worst_slope:.2e}, {elapsed:.1f}s")
        assert ok, f"accumulators {worst_acc:.2e}, slope {worst_slope:.2e}, {elapsed:.1f}s"


class TestSquaredLossReduction:
    def test_criterion_2_squared_truncation_is_sample_mean(self, verdict):
        rng = np.random.default_rng(7)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(1000):
            losses = rng.gamma(2.0, 1.0, size=int(rng.integers(1, 200))) * 10 ** rng.uniform(-2, 2)
            s = 10 ** rng.uniform(-1, 1)
            worst = max(worst, abs(truncation_factor(losses, s, "squared") - losses.mean()) / max(1.0, losses.mean()))
        elapsed = time.perf_counter() - t0
        ok = worst <= 1e-12 and elapsed < 5
        verdict("criterion 2 (squared-loss truncation = mean)", ok, f"max err {worst:.2e}, {elapsed:.2f}s")
        assert ok, f"max err {worst:.2e} in {elapsed:.2f}s"


class TestSegmentTestSize:
    def test_criterion_3_white_noise_false_drift_rate(self, verdict):
        # previous-segment lengths span the monitor's operating range; the current segment is fixed
        rng = np.random.default_rng(3)
        t0 = time.perf_counter()
        hits = 0
        for _ in range(10_000):
            L = int(rng.integers(20, 101))
            hits += granger_drift_test(rng.normal(size=L + 20), 2, 0.05, segment=L, current=20).drift
        rate, elapsed = hits / 10_000, time.perf_counter() - t0
        ok = rate <= 0.07 and elapsed < 120
        verdict("criterion 3 (white-noise false drift <= 0.07)", ok, f"rate {rate:.4f}, {elapsed:.1f}s")
        assert ok, f"false drift rate {rate:.4f} in {elapsed:.1f}s"


class TestValidDriftSensitivity:
    @pytest.mark.slow
    @pytest.mark.parametrize("name", ["SEA_G", "TRE_S"])
    def test_criterion_4_sudden_drift_caught_within_20_batches(self, name, verdict):
        t0 = time.perf_counter()
        caught, delays = 0, []
        for seed in range(10):
            spec = make_benchmark(name, 0.1, seed=seed, drift_kind="sudden")
            X, y = generate(spec)
            det = RbmDriftDetector(spec.n_features, spec.n_classes, seed=seed)
            change = spec.drifts[0].t1 // 50
            first = None
            for b in range(len(y) // 50):
                sig = det.process_batch(X[50 * b:50 * b + 50], y[50 * b:50 * b + 50])
                if first is None and b >= change and sig.level == Signal.DRIFT:
                    first = b - change
                if b > change + 20 and first is None:
                    break
            delays.append(first)
            caught += first is not None and first <= 20
        elapsed = time.perf_counter() - t0
        ok = caught >= 8 and elapsed < 180
        verdict(f"criterion 4 (sudden drift within 20 batches, {name})", ok,
                f"{caught}/10 seeds, delays {delays}, {elapsed:.0f}s")
        assert ok, f"{name}: caught in {caught}/10 seeds (delays {delays}) in {elapsed:.0f}s"


# --- criteria 5 to 7: one shared matrix ------------------------------------------

@pytest.fixture(scope="session")
def matrix(tmp_path_factory):
    """runs, RLR cells and per-run wall clock for every detector at scale 0.1."""
    out = os.environ.get("RRBMDD_ACCEPTANCE_DIR")
    out = tmp_path_factory.mktemp("matrix") if out is None else os.path.abspath(out)
    names = ("runs.csv", "rlr.csv", "runs_meta.csv")
    if not all(os.path.exists(os.path.join(out, n)) for n in names):
        cfg = ExperimentConfig(detectors=list(BASELINES) + list(RBM_VARIANTS), length_scale=0.1, master_seed=0)
        results = run_matrix(cfg)
        write_results(results, rlr_cells(results, cfg), out)
    runs, cells, meta = (read_csv(os.path.join(out, n)) for n in names)
    return runs, _cells_from_rows(cells), meta


def rlr_by(cells, kind):
    return {(c.stream, c.detector): c.rlr for c in cells if c.attack_kind == kind}


def wall_clock(meta, detectors):
    return sum(float(r["wall_clock"]) for r in meta if r["detector"] in detectors)


@pytest.mark.slow
class TestExperimentMatrix:
    def test_criterion_5_ablation_direction(self, matrix, verdict):
        # a lower relative loss means a more robust detector
        _, cells, meta = matrix
        inst, conc = rlr_by(cells, "instance_based"), rlr_by(cells, "concept_based")
        full = sum(inst[s, "RRBM-DD"] < inst[s, "RBM-DD"] for s in STREAMS)
        rg_inst = sum(inst[s, "RBM-DD_RG"] < inst[s, "RBM-DD_RE"] for s in STREAMS)
        re_conc = sum(conc[s, "RBM-DD_RE"] < conc[s, "RBM-DD_RG"] for s in STREAMS)
        seconds = wall_clock(meta, RBM_VARIANTS)
        ok = full >= 5 and rg_inst >= 4 and re_conc >= 4 and seconds < 3600
        table = "; ".join(f"{s} " + "/".join(f"{inst[s, d]:.3f}" for d in RBM_VARIANTS) for s in STREAMS)
        verdict("criterion 5 (ablation direction)", ok,
                f"RRBM<RBM {full}/6, RG<RE instance {rg_inst}/6, RE<RG concept {re_conc}/6, {seconds:.0f}s")
        assert ok, (f"RRBM-DD beats RBM-DD on {full}/6, RG beats RE on instance {rg_inst}/6, "
                    f"RE beats RG on concept {re_conc}/6, {seconds:.0f}s; instance RLR {table}")

    def test_criterion_6_headline_ranking(self, matrix, verdict):
        _, cells, meta = matrix
        table = rank_table([c for c in cells if c.detector in HEADLINE])
        places = {}
        for kind, ranks in table.items():
            order = sorted(ranks.values())
            places[kind] = 1 + order.index(ranks["RRBM-DD"])
        seconds = wall_clock(meta, HEADLINE)
        ok = min(places.values()) == 1 and max(places.values()) <= 2 and seconds < 7200
        detail = "; ".join(f"{k}: " + ", ".join(f"{d} {r:.2f}" for d, r in sorted(v.items(), key=lambda kv: kv[1]))
                           for k, v in table.items())
        verdict("criterion 6 (RRBM-DD mean RLR rank)", ok, f"places {places}, {seconds:.0f}s")
        assert ok, f"RRBM-DD places {places}; mean ranks {detail}"

    def test_criterion_7_accuracy_non_increasing_in_level(self, matrix, verdict):
        runs, _, _ = matrix
        series = defaultdict(dict)
        clean = {}
        for r in runs:
            key = (r["stream"], r["detector"])
            if r["attack_kind"] == "none":
                clean[key] = float(r["M"])
            else:
                series[key + (r["attack_kind"],)][float(r["attack_level"])] = float(r["M"])
        violations = []
        for (s, d, kind), pts in sorted(series.items()):
            accs = [clean[s, d]] + [pts[lv] for lv in sorted(pts)]
            worst = max(b - a for a, b in zip(accs, accs[1:]))
            if worst > 0.02:
                violations.append(f"{s}/{d}/{kind} +{worst:.3f}")
        ok = not violations
        verdict("criterion 7 (monotone degradation, tol 0.02)", ok,
                f"{len(violations)}/{len(series)} series rise by more than 0.02")
        assert ok, "accuracy rises with attack level: " + ", ".join(violations)


class TestBaselineSanity:
    def test_criterion_8_step_detection_and_silence(self, verdict):
        t0 = time.perf_counter()
        hits, silent = {}, {}
        for name in sorted(BASELINES):
            hits[name] = 0
            for seed in range(10):
                rng = np.random.default_rng(seed)
                errors = np.r_[rng.random(10_000) < 0.1, rng.random(3000) < 0.4]
                det = make_baseline(name)
                for i, err in enumerate(errors.tolist()):
                    if det.step(not err) == Signal.DRIFT and i >= 10_000:
                        hits[name] += i - 10_000 <= 1000
                        break
            det = make_baseline(name)
            silent[name] = det.update(np.ones(1_000_000, dtype=bool)) != Signal.DRIFT
        elapsed = time.perf_counter() - t0
        ok = all(h >= 8 for h in hits.values()) and all(silent.values()) and elapsed < 60
        verdict("criterion 8 (baseline step detection and silence)", ok,
                f"hits {hits}, silent on 1e6 correct {all(silent.values())}, {elapsed:.1f}s")
        assert ok, f"hits per detector {hits}, silent {silent}, {elapsed:.1f}s"


class TestAttackBookkeeping:
    def test_criterion_9_audit_exact_and_fractions_in_band(self, tmp_path, verdict):
        spec = make_benchmark("SEA_G", 100_000 / 3_000_000, seed=11)
        X, y = generate(spec)
        base = LabeledStream.from_arrays(X, y, spec.n_classes)
        attacked = inject_concepts(flip_labels(base, 0.2, seed=12), 30, 250, spec, seed=13)
        written = write_audit(attacked, tmp_path / "audit.csv")
        audit = read_audit(tmp_path / "audit.csv")
        exact = (audit["label_flip"] == int((attacked.attack == FLIPPED).sum()) == int((attacked.y != attacked.y_clean).sum())
                 and audit["injected_concept"] == int((attacked.attack == INJECTED).sum()) == 30 * 250
                 and written == audit["label_flip"] + audit["injected_concept"])
        composed = sparsify_labels(flip_labels(base, 0.15, seed=14), 0.3, seed=15)
        n = len(composed)
        z = {name: abs(observed - p) / math.sqrt(p * (1 - p) / n)
             for name, observed, p in (("flip", composed.poisoned.mean(), 0.15), ("budget", composed.labeled.mean(), 0.3))}
        ok = exact and all(v <= 3 for v in z.values())
        verdict("criterion 9 (attack bookkeeping)", ok,
                f"audit exact {exact}, z-scores " + ", ".join(f"{k} {v:.2f}" for k, v in z.items()))
        assert ok, f"audit exact {exact}, audit {audit}, z {z}"


class TestReproducibility:
    def test_criterion_10_cli_runs_byte_identical(self, tmp_path, verdict):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "streams": ["SEA_G", "TRE_S"], "detectors": ["FHDDM", "RDDM", "RRBM-DD"],
            "attacks": {"instance_based": [0.1, 0.2], "concept_based": [10, 30]},
            "budgets": [1.0, 0.3], "length_scale": 0.01, "master_seed": 17,
        }))
        codes = [cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / d), "--quiet"]) for d in ("a", "b")]
        same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in ("runs.csv", "rlr.csv")}
        ok = codes == [0, 0] and all(same.values())
        verdict("criterion 10 (byte-identical reruns)", ok, f"exit codes {codes}, identical {same}")
        assert ok, f"exit codes {codes}, identical {same}"
