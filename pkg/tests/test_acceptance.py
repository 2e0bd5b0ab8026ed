"""Acceptance suite: one PASS/FAIL line per criterion, at fixed tolerances.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when output capture is on.  The desk-scale experiments share
one set of training runs (about a minute on one core).
"""

import math
import time

import numpy as np
import pytest

from care_reid import cli, experiment, gradcheck
from care_reid.config import ExperimentConfig
from care_reid.epr import MarginParams, cosw_score, epoch_weights
from care_reid.metrics import detection_auc
from care_reid.model import PeerModel
from care_reid.pec import (
    CalibrationParams,
    DirichletState,
    calibrated_probability,
    dirichlet_mean,
    ecl_loss,
    evidence_from_logits,
    kl_dirichlet_uniform_per_sample,
)
from care_reid.synthdata import generate, inject_patterned_noise, inject_random_noise, nearest_cross_identity

SEEDS = (0, 1, 2, 3, 4)
RATES = (0.0, 0.2, 0.5)
# mid-difficulty retrieval: identity centres share a 12-d subspace of the 32-d input
REGIME = dict(intra_spread=0.6, identity_dim=12)
RUN_BUDGET_S = 300.0


def verdict(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}")
    assert ok, detail


def count(flags):
    return int(np.sum(flags))


@pytest.fixture(scope="module")
def runs():
    """``(rate, method, seed) -> RunResult`` plus wall-clock seconds per run."""
    out, seconds = {}, []
    for rate in RATES:
        cfg = ExperimentConfig(noise_rate=rate, **REGIME)
        methods = ("care", "baseline", "s1") if rate == 0.2 else ("care", "baseline")
        for seed in SEEDS:
            ds = experiment.make_dataset(cfg, seed)
            for method in methods:
                start = time.perf_counter()
                out[rate, method, seed] = experiment.run(cfg, seed, method, dataset=ds)
                seconds.append(time.perf_counter() - start)
    return out, seconds


def column(runs, rate, method, attr):
    return np.array([getattr(runs[rate, method, s], attr) for s in SEEDS], dtype=float)


class TestAcceptance:
    def test_1_gradient_fidelity(self, capsys):
        start = time.perf_counter()
        results = gradcheck.run_all(instances=10)
        elapsed = time.perf_counter() - start
        worst = max(results, key=lambda r: r.max_rel_error / r.tolerance)
        failed = [r.name for r in results if not r.passed]
        ok = not failed and elapsed < 60
        verdict(capsys, 1, ok, f"{len(results)} suites x 10 instances, worst {worst.name} "
                f"{worst.max_rel_error:.2e} (tol {worst.tolerance:.0e}), failed={failed}, {elapsed:.1f}s < 60s")

    def test_2_loss_identities(self, capsys):
        rng = np.random.default_rng(0)
        kl_unit = max(abs(kl_dirichlet_uniform_per_sample(DirichletState.from_concentration(np.ones((1, C))))[0])
                      for C in range(2, 30))
        # half spread widely, half within 1% of the uniform Dirichlet where KL is near zero
        mu = np.vstack([np.exp(rng.uniform(np.log(0.05), np.log(100), size=(500, 8))),
                        1 + 0.01 * rng.uniform(-1, 1, size=(500, 8))])
        kl_min = kl_dirichlet_uniform_per_sample(DirichletState.from_concentration(mu)).min()
        mean_err = np.abs(dirichlet_mean(DirichletState.from_concentration(mu)).sum(axis=1) - 1).max()
        ident_err = 0.0
        for _ in range(200):
            C = int(rng.integers(2, 12))
            z = rng.normal(0, 3, size=C)
            params = CalibrationParams.from_smoothing(np.full(C, rng.uniform(0, 2)), kappa=0.0)
            ident_err = max(ident_err, np.abs(dirichlet_mean(evidence_from_logits(z, params))
                                              - calibrated_probability(z, params)).max())
        z = rng.normal(0, 2, size=(16, 6))
        y = rng.integers(0, 6, size=16)
        s = evidence_from_logits(z, CalibrationParams.initial(6))
        v0, v1 = ecl_loss(s, y, 0.0).value, ecl_loss(s, y, 1.0).value
        lin_err = max(abs(ecl_loss(s, y, lam).value - (v0 + lam * (v1 - v0))) for lam in np.linspace(0, 5, 21))
        ok = kl_unit <= 1e-12 and kl_min >= -1e-12 and mean_err <= 1e-12 and ident_err <= 1e-12 and lin_err <= 1e-12
        verdict(capsys, 2, ok, f"|KL(Dir(1)||Dir(1))|={kl_unit:.1e}, min KL={kl_min:.2e}, "
                f"mean-sum err={mean_err:.1e}, kappa=0 identity err={ident_err:.1e}, ECL linearity err={lin_err:.1e}")

    def test_3_cam_cosw_structure(self, capsys):
        sum_err, monotone = 0.0, True
        for T in range(1, 201):
            for t in range(1, T + 1):
                w = epoch_weights(t, T)
                sum_err = max(sum_err, abs(w.sum() - 1.0))
                monotone &= bool(np.all(np.diff(w) < 0))
        dh, lh = np.meshgrid(np.linspace(-1, 1, 201), np.linspace(-1, 0, 101))
        grid = cosw_score(dh, lh, MarginParams())
        in_range = bool(np.all((grid >= 0) & (grid <= 1)))
        rng = np.random.default_rng(5)
        hard = cosw_score(rng.uniform(-0.1, 0.05, 500), rng.uniform(-0.02, 0.0, 500), MarginParams())
        noisy = cosw_score(rng.uniform(-0.05, 0.2, 500), rng.uniform(-0.5, -0.1, 500), MarginParams())
        auc = detection_auc(np.concatenate([hard, noisy]), np.r_[np.ones(500, bool), np.zeros(500, bool)])
        ok = sum_err <= 1e-12 and monotone and in_range and auc >= 0.95
        verdict(capsys, 3, ok, f"weight sum err={sum_err:.1e}, strictly decreasing={monotone}, "
                f"cosw in [0,1]={in_range}, constructed-oracle AUC={auc:.4f} (need >= 0.95)")

    def test_4_noise_injectors(self, capsys):
        base = generate(seed=0)
        N = len(base.train)
        random_ok = True
        for rate in (0.1, 0.2, 0.3, 0.5):
            tr = inject_random_noise(base, rate, seed=1).train
            wrong = tr.noisy_label != tr.true_label
            random_ok &= count(tr.corrupted) == math.floor(rate * N) and np.array_equal(wrong, tr.corrupted)
        ref = PeerModel(32, 16, 50, seed=0)
        tr = inject_patterned_noise(base, 0.2, ref, seed=2).train
        emb, _ = ref.forward(tr.features)
        nn = nearest_cross_identity(emb, tr.true_label)
        expected = np.where(tr.corrupted, tr.true_label[nn], tr.true_label)
        audit = np.array_equal(tr.noisy_label, expected) and count(tr.corrupted) == math.floor(0.2 * N)
        verdict(capsys, 4, random_ok and audit,
                f"random exact floor(rate*N) wrong labels at 0.1/0.2/0.3/0.5={random_ok}, patterned audit={audit}")

    def test_5_runtime(self, runs, capsys):
        _, seconds = runs
        verdict(capsys, "5 (runtime)", max(seconds) <= RUN_BUDGET_S,
                f"slowest of {len(seconds)} runs {max(seconds):.1f}s (budget {RUN_BUDGET_S:.0f}s)")

    def test_5a_map(self, runs, capsys):
        r, _ = runs
        care, base = column(r, 0.2, "care", "map"), column(r, 0.2, "baseline", "map")
        verdict(capsys, "5(a) mAP", count(care > base) == 5,
                f"CARE > CE baseline on {count(care > base)}/5 seeds "
                f"(mean {care.mean():.4f} vs {base.mean():.4f}; need 5/5)")

    def test_5a_rank1(self, runs, capsys):
        r, _ = runs
        care, base = column(r, 0.2, "care", "rank1"), column(r, 0.2, "baseline", "rank1")
        verdict(capsys, "5(a) Rank-1", count(care > base) == 5,
                f"CARE > CE baseline on {count(care > base)}/5 seeds "
                f"(mean {care.mean():.4f} vs {base.mean():.4f}; need 5/5)")

    def test_5b_detection_auc(self, runs, capsys):
        r, _ = runs
        auc = column(r, 0.2, "care", "auc")
        verdict(capsys, "5(b)", auc.mean() >= 0.90, f"mean final COSW detection AUC {auc.mean():.4f} (need >= 0.90)")

    def test_5c_vc(self, runs, capsys):
        r, _ = runs
        care, base = column(r, 0.2, "care", "v_c"), column(r, 0.2, "baseline", "v_c")
        verdict(capsys, "5(c) v_c", count(care <= base) >= 4,
                f"v_c(CARE) <= v_c(baseline) on {count(care <= base)}/5 seeds "
                f"(mean {care.mean():.4f} vs {base.mean():.4f}; need 4/5)")

    def test_5c_va(self, runs, capsys):
        r, _ = runs
        care, base = column(r, 0.2, "care", "v_a"), column(r, 0.2, "baseline", "v_a")
        verdict(capsys, "5(c) v_a", count(care >= base) >= 4,
                f"v_a(CARE) >= v_a(baseline) on {count(care >= base)}/5 seeds "
                f"(mean {care.mean():.4f} vs {base.mean():.4f}; need 4/5)")

    def test_6_stage_ablation(self, runs, capsys):
        r, _ = runs
        care, s1 = column(r, 0.2, "care", "map"), column(r, 0.2, "s1", "map")
        verdict(capsys, 6, count(care >= s1) >= 4,
                f"S1+S2 >= S1-only mAP on {count(care >= s1)}/5 seeds "
                f"(mean {care.mean():.4f} vs {s1.mean():.4f}; need 4/5)")

    def test_7_noise_robustness(self, runs, capsys):
        r, _ = runs
        gaps = [float(np.mean(column(r, rate, "care", "map") - column(r, rate, "baseline", "map"))) for rate in RATES]
        ok = all(b >= a for a, b in zip(gaps, gaps[1:]))
        detail = ", ".join(f"rho={rate}: {g:+.4f}" for rate, g in zip(RATES, gaps))
        verdict(capsys, 7, ok, f"mean mAP gap CARE - baseline {detail} (need non-decreasing)")

    def test_8_determinism(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
        args = ["train", "--seed", "3"] + [a for k, v in REGIME.items() for a in ("--set", f"{k}={v}")]
        cfg = ExperimentConfig(**REGIME)
        path = tmp_path / cfg.digest() / "seed3" / "care" / "metrics.csv"
        codes, contents = [], []
        for _ in range(2):
            with capsys.disabled():
                codes.append(cli.main(args))
            contents.append(path.read_bytes())
            path.unlink()
        ok = codes == [0, 0] and contents[0] == contents[1]
        verdict(capsys, 8, ok, f"two CLI train runs, exit codes {codes}, metrics CSV "
                f"{len(contents[0])} bytes, byte-identical={contents[0] == contents[1]}")
