"""Acceptance criteria, each at its stated tolerance and time limit.

Every test records (passed, detail) under its criterion id; the terminal
summary prints one PASS/FAIL line per criterion.
"""
import subprocess
import sys
import time

import numpy as np
import pytest
from PIL import Image
from threadpoolctl import threadpool_limits

from micronet.accounting import REFERENCE_BUDGETS, count_layer, count_model
from micronet.arch import PUBLISHED, build_arch, full_rank_partner
from micronet.data import synthetic_blobs
from micronet.train import TrainConfig, evaluate, train_toy
from micronet.verify import run_suite


def record(results, key, ok, detail):
    results[key] = (bool(ok), detail)
    return ok


def checks_ok(checks):
    failed = [c.name for c in checks if not c.ok]
    detail = f"{len(checks) - len(failed)}/{len(checks)} properties"
    if failed:
        detail += " (failed: " + "; ".join(failed) + ")"
    return not failed, detail


class TestBudgets:
    """Budget regression against the reference MAdds/params totals (+-20%)."""

    @pytest.mark.parametrize("name", PUBLISHED)
    def test_budget(self, name, acceptance_results):
        t0 = time.perf_counter()
        r = count_model(build_arch(name)).check()
        elapsed = time.perf_counter() - t0
        detail = (f"MAdds {r['madds'] / 1e6:.2f}M ({r['madds_dev']:+.1%}), "
                  f"params {r['params'] / 1e6:.2f}M ({r['params_dev']:+.1%})")
        record(acceptance_results, f"1-budget-{name}", r["ok"], detail)
        assert r["madds_ok"], detail
        assert r["params_ok"], detail
        assert elapsed < 5

    def test_m3_stem(self, acceptance_results):
        stem = build_arch("M3").features.stem
        madds = count_layer(stem, (1, 3, 224, 224)).madds
        dev = madds / 1.5e6 - 1
        record(acceptance_results, "1-stem-M3", abs(dev) <= 0.02, f"{madds:,d} MAdds ({dev:+.2%})")
        assert abs(dev) <= 0.02

    def test_all_references_present(self):
        assert set(REFERENCE_BUDGETS) == set(PUBLISHED)


def _timed_suite(name, limit):
    t0 = time.perf_counter()
    checks = run_suite(name)
    elapsed = time.perf_counter() - t0
    ok, detail = checks_ok(checks)
    return ok and elapsed < limit, f"{detail} ({elapsed:.1f}s, limit {limit}s)"


def test_cost_formula_exactness(acceptance_results):
    ok, detail = _timed_suite("cost", 5)
    record(acceptance_results, "2-cost-formulas", ok, detail)
    assert ok, detail


def test_rank_properties(acceptance_results):
    ok, detail = _timed_suite("rank", 30)
    record(acceptance_results, "3-rank", ok, detail)
    assert ok, detail


def test_oracle_equivalence(acceptance_results):
    ok, detail = _timed_suite("oracle", 60)
    record(acceptance_results, "4-oracles", ok, detail)
    assert ok, detail


def test_special_cases(acceptance_results):
    ok, detail = _timed_suite("shiftmax", 60)
    record(acceptance_results, "5-special-cases", ok, detail)
    assert ok, detail


def test_gradient_checks(acceptance_results):
    ok, detail = _timed_suite("grad", 120)
    record(acceptance_results, "6-gradients", ok, detail)
    assert ok, detail


class TestToyTraining:
    @pytest.mark.slow
    def test_narrow_m0_fits(self, acceptance_results):
        x, y = synthetic_blobs(50, classes=10, size=32, seed=0)
        t0 = time.perf_counter()
        with threadpool_limits(1):
            res = train_toy(build_arch("M0-narrow", seed=0), x, y,
                            TrainConfig(epochs=30, batch_size=32, lr0=0.1, seed=0))
        elapsed = time.perf_counter() - t0
        best = max(r["acc"] for r in res.log)
        first = next((r["epoch"] for r in res.log if r["acc"] >= 0.9), None)
        ok = first is not None and elapsed < 600
        record(acceptance_results, "7a-toy-training", ok,
               f"train acc {best:.3f}, >= 0.90 at epoch {first}, {elapsed:.0f}s")
        assert ok

    @pytest.mark.slow
    def test_mutual_learning_direction(self, acceptance_results):
        """Held-out CE of the student with a full-rank partner vs alone, 5 pinned seeds."""
        wins, kl_min, rows = 0, np.inf, []
        with threadpool_limits(1):
            for seed in range(5):
                x, y = synthetic_blobs(30, 10, 32, seed=seed)
                val = synthetic_blobs(30, 10, 32, seed=1000 + seed)
                cfg = dict(epochs=15, batch_size=32, lr0=0.1, seed=seed)
                alone = train_toy(build_arch("M0-narrow", seed=seed), x, y, TrainConfig(**cfg))
                student = build_arch("M0-narrow", seed=seed)
                ml = train_toy(student, x, y, TrainConfig(mutual=True, **cfg),
                               partner=full_rank_partner(student, seed=seed + 100))
                ce_alone = evaluate(alone.model, *val)["ce"]
                ce_ml = evaluate(ml.model, *val)["ce"]
                wins += ce_ml <= ce_alone
                kl_min = min(kl_min, min(r["kl_min"] for r in ml.log))
                rows.append(f"{ce_alone:.3f}/{ce_ml:.3f}")
        kl_ok = kl_min >= 0
        record(acceptance_results, "7b-kl-nonnegative", kl_ok, f"min batch KL {kl_min:.2e}")
        record(acceptance_results, "7c-mutual-learning-ce", wins >= 3,
               f"student CE not above isolated in {wins}/5 seeds (isolated/ML: {', '.join(rows)})")
        assert kl_ok
        assert wins >= 3, rows


@pytest.mark.slow
def test_cli_determinism(tmp_path, acceptance_results):
    """Every CLI output is byte-identical across two single-threaded runs."""
    img = tmp_path / "in.png"
    Image.fromarray((np.random.default_rng(0).random((32, 32, 3)) * 255).astype(np.uint8)).save(img)
    cli = [sys.executable, "-m", "micronet.cli", "--threads", "1"]
    outputs = []
    for run in range(2):
        d = tmp_path / f"run{run}"
        d.mkdir()
        build = subprocess.run(cli + ["build", "M0", "--json"], capture_output=True, check=True)
        subprocess.run(cli + ["train", "M0-narrow", "--synthetic", "--samples-per-class", "5",
                              "--epochs", "2", "--out", str(d / "w.mnwb"),
                              "--log", str(d / "m.jsonl")], capture_output=True, check=True)
        infer = subprocess.run(cli + ["infer", str(d / "w.mnwb"), str(img)],
                               capture_output=True, check=True)
        outputs.append([build.stdout, (d / "w.mnwb").read_bytes(), (d / "m.jsonl").read_bytes(),
                        infer.stdout])
    same = [a == b for a, b in zip(*outputs)]
    record(acceptance_results, "8-determinism", all(same),
           "build/bundle/log/infer identical: " + "/".join(map(str, same)))
    assert all(same)
