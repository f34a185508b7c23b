"""End-to-end acceptance suite.

Each test covers one exit criterion and prints a single PASS line on
success (run with ``pytest tests/test_acceptance.py -v -s``). The two
comparative criteria train desk-scale agents for both objective variants
across three seeds; completed runs are cached under ``.acceptance_cache/``
keyed by the resolved config, so re-running the suite is cheap.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from acceptance_runs import COMPARATIVE_SEEDS, ensure_run
from dreamsiam.cli import main as cli_main
from dreamsiam.config import SCHEDULE_PRESETS, load_config
from dreamsiam.infotheory import (ConditionalJoint, ConditionalModel,
                                  fuzz_infonce, fuzz_prop1, fuzz_prop2,
                                  prop1_gap, prop2_gap, random_joint)
from dreamsiam.nets import SimSiamPredictor
from dreamsiam.objectives import BetaSchedule, beta_at
from dreamsiam.policy import lambda_return
from dreamsiam.representation import matched_similarity, simsiam_objective
from dreamsiam.rssm import DiagGaussian, kl_diag_gaussian
from dreamsiam.trainer import evaluate_checkpoint, train_run
from fdiff import analytic_param_gradients, fd_param_gradients, max_relative_error

CONFLICT_WINDOW_ENV_STEPS = 30_000


def ok(name: str) -> None:
    print(f"[ACCEPTANCE] {name}: PASS")


# ----------------------------------------------------------------------
# 1. Schedule exactness
# ----------------------------------------------------------------------

def test_beta_schedule_exactness():
    for name, (a, b, c) in SCHEDULE_PRESETS.items():
        sched = BetaSchedule(a, b, c)
        t_star = (b + math.log10(c)) / a  # closed-form cap crossing
        assert sched.cap_step == pytest.approx(t_star, rel=1e-12), name
        for t in (0.0, t_star / 2, t_star, 2 * t_star):
            expected = min(10.0 ** (a * t - b), c)
            got = beta_at(sched, t)
            assert got == pytest.approx(expected, rel=1e-12), (name, t)
        assert beta_at(sched, 0.0) == pytest.approx(10.0 ** (-b), rel=1e-12), name
        assert beta_at(sched, t_star * (1 + 1e-9)) == c, name
    ok("beta schedule exact on every preset row at {0, t*/2, t*, 2t*}")


# ----------------------------------------------------------------------
# 2. Gaussian KL: hand values and Monte-Carlo agreement
# ----------------------------------------------------------------------

def test_gaussian_kl_analytic_vs_monte_carlo():
    g = lambda m, s: DiagGaussian(torch.tensor(m, dtype=torch.float64),
                                  torch.tensor(s, dtype=torch.float64))
    assert float(kl_diag_gaussian(g([0.0], [1.0]), g([0.0], [1.0]))) == pytest.approx(
        0.0, abs=1e-9)
    assert float(kl_diag_gaussian(g([1.0], [1.0]), g([0.0], [1.0]))) == pytest.approx(
        0.5, abs=1e-9)
    assert float(kl_diag_gaussian(g([0.0], [2.0]), g([0.0], [1.0]))) == pytest.approx(
        0.806853, abs=1e-6)
    assert float(kl_diag_gaussian(g([0.0], [2.0]), g([0.0], [1.0]))) == pytest.approx(
        1.5 - math.log(2.0), abs=1e-9)

    rng = np.random.default_rng(2024)
    n = 100_000
    misses = 0
    for trial in range(100):
        d = int(rng.integers(1, 5))
        p = g(rng.normal(size=d), rng.uniform(0.2, 2.0, size=d))
        q = g(rng.normal(size=d), rng.uniform(0.2, 2.0, size=d))
        noise = torch.randn(n, d, generator=torch.Generator().manual_seed(trial),
                            dtype=torch.float64)
        x = p.mean + p.std * noise
        log_ratio = p.log_prob(x) - q.log_prob(x)
        mc = float(log_ratio.mean())
        se = float(log_ratio.std() / math.sqrt(n))
        if abs(mc - float(kl_diag_gaussian(p, q))) > 3 * se:
            misses += 1
    assert misses == 0, f"{misses} of 100 pairs exceeded 3 standard errors"
    ok("analytic KL matches 1e5-sample Monte-Carlo within 3 SE on 100 pairs")


# ----------------------------------------------------------------------
# 3. Stop-gradient contract
# ----------------------------------------------------------------------

def test_stop_gradient_contract():
    torch.manual_seed(0)
    width = 8
    enc_live = torch.nn.Linear(6, width).double()
    enc_frozen = torch.nn.Linear(6, width).double()
    predictor = SimSiamPredictor(width).double()
    x = torch.randn(12, 6, dtype=torch.float64,
                    generator=torch.Generator().manual_seed(1))

    value = matched_similarity(predictor, enc_live(x), enc_frozen(x))
    frozen_grads = torch.autograd.grad(value, list(enc_frozen.parameters()),
                                       allow_unused=True)
    assert all(g is None or torch.all(g == 0) for g in frozen_grads)

    gen = torch.Generator().manual_seed(2)
    e1 = torch.randn(6, width, generator=gen, dtype=torch.float64)
    e2 = torch.randn(6, width, generator=gen, dtype=torch.float64)
    value = simsiam_objective(e1, e2, predictor)
    analytic = analytic_param_gradients(value, predictor)
    numeric = fd_param_gradients(
        lambda: float(simsiam_objective(e1, e2, predictor).detach()), predictor)
    rel = max_relative_error(analytic, numeric)
    assert rel < 1e-3, f"predictor-branch FD relative error {rel:.2e}"
    ok("frozen-branch gradients exactly zero; predictor branch matches FD < 1e-3")


# ----------------------------------------------------------------------
# 4. Information-bound fuzz suites
# ----------------------------------------------------------------------

def test_information_bound_suites():
    rng = np.random.default_rng(7)
    r1 = fuzz_prop1(1000, rng, max_size=8, tol=1e-9)
    assert r1.passed, r1.line()
    r2 = fuzz_prop2(1000, rng, max_size=8, tol=1e-9)
    assert r2.passed, r2.line()

    # equality cases reach the bound to 1e-10
    for _ in range(100):
        joint = random_joint(rng, int(rng.integers(2, 7)), int(rng.integers(2, 7)))
        q = ConditionalModel(joint.table / joint.table.sum(axis=1, keepdims=True))
        lower, mi = prop1_gap(joint, q)
        assert abs(mi - lower) < 1e-10
        k = int(rng.integers(1, 4))
        cj = ConditionalJoint(rng.dirichlet(np.ones(k)),
                              [random_joint(rng, 4, 4) for _ in range(k)])
        marginals = ConditionalModel(np.stack([t.p_s for t in cj.tables]))
        upper, cond_mi = prop2_gap(cj, marginals)
        assert abs(upper - cond_mi) < 1e-10

    r3 = fuzz_infonce(100, rng, trials_per_joint=3000, n_sigma=3.0)
    assert r3.passed, r3.line()
    ok("bound fuzz suites: 1000+1000 exact instances, 100 NCE joints, 0 violations")


# ----------------------------------------------------------------------
# 5. Lambda-return oracle
# ----------------------------------------------------------------------

def brute_force_lambda_return(rewards, values, gamma, lam):
    horizon = len(rewards)
    out = np.zeros(horizon)
    for t in range(horizon):
        max_n = horizon - t
        n_step = {}
        for n in range(1, max_n + 1):
            acc = sum(gamma ** k * rewards[t + k] for k in range(n))
            n_step[n] = acc + gamma ** n * values[t + n]
        total = sum((1 - lam) * lam ** (n - 1) * n_step[n] for n in range(1, max_n))
        out[t] = total + lam ** (max_n - 1) * n_step[max_n]
    return out


def test_lambda_return_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        h = int(rng.integers(1, 11))
        gamma = float(rng.uniform(0.5, 0.999))
        lam = float(rng.uniform(0.0, 1.0))
        rewards = rng.normal(size=h)
        values = rng.normal(size=h + 1)
        fast = lambda_return(torch.tensor(rewards), torch.tensor(values), gamma, lam)
        slow = brute_force_lambda_return(rewards, values, gamma, lam)
        assert np.allclose(fast.numpy(), slow, atol=1e-6)

    # worked two-step example: G1 = 1 + 0.99*(0.05*0.5 + 0.95*0.5) = 1.495,
    # G0 = 1 + 0.99*(0.05*0.5 + 0.95*1.495) = 2.4307975
    returns = lambda_return(torch.tensor([1.0, 1.0], dtype=torch.float64),
                            torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64),
                            gamma=0.99, lam=0.95)
    g0_exact = 1.0 + 0.99 * (0.05 * 0.5 + 0.95 * 1.495)
    assert float(returns[0]) == pytest.approx(g0_exact, abs=1e-5)
    assert float(returns[0]) == pytest.approx(2.4307975, abs=1e-5)
    oracle = brute_force_lambda_return([1.0, 1.0], [0.5, 0.5, 0.5], 0.99, 0.95)
    assert float(returns[0]) == pytest.approx(oracle[0], abs=1e-9)
    ok("lambda-return matches brute-force mixture (100 cases) and worked example")


# ----------------------------------------------------------------------
# 6 + 7. Comparative desk-scale runs (cached)
# ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def comparative_runs(acceptance_config_path):
    runs = {}
    for variant in ("contrastive", "reconstruction"):
        for seed in COMPARATIVE_SEEDS:
            runs[(variant, seed)] = ensure_run(variant, seed, acceptance_config_path)
    return runs


def _conflict_ratio_from_metrics(run_dir: Path, warmup_train_steps: int,
                                 max_env_steps: int) -> float:
    with open(run_dir / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    inner = [float(r["conflict_inner"]) for r in rows
             if r["conflict_inner"] and int(r["train_step"]) > warmup_train_steps
             and int(r["env_steps"]) <= max_env_steps]
    assert len(inner) >= 50, f"only {len(inner)} alignment records in window"
    return sum(1 for v in inner if v > 0) / len(inner)


def test_conflict_diagnostic(comparative_runs, acceptance_config_path):
    cfg = load_config(acceptance_config_path)
    warmup = cfg.diagnostics.conflict_warmup
    ratios = {}
    for (variant, seed), run_dir in comparative_runs.items():
        ratios[(variant, seed)] = _conflict_ratio_from_metrics(
            run_dir, warmup, CONFLICT_WINDOW_ENV_STEPS)
    contrastive = [ratios[("contrastive", s)] for s in COMPARATIVE_SEEDS]
    reconstruction = [ratios[("reconstruction", s)] for s in COMPARATIVE_SEEDS]
    print(f"  positive-alignment ratios, contrastive:   "
          f"{[f'{r:.3f}' for r in contrastive]}")
    print(f"  positive-alignment ratios, reconstruction: "
          f"{[f'{r:.3f}' for r in reconstruction]}")

    assert float(np.mean(contrastive)) >= 0.5, \
        f"contrastive mean ratio {np.mean(contrastive):.3f} < 0.5"
    for rc in contrastive:
        for rd in reconstruction:
            assert rc > rd, f"pairing violated: contrastive {rc:.3f} <= reconstruction {rd:.3f}"
    below_half = sum(1 for r in reconstruction if r <= 0.5)
    assert below_half >= 2, \
        f"reconstruction ratio <= 0.5 in only {below_half} of 3 seeds"
    ok("gradient-alignment ratios: contrastive >= 0.5 and above reconstruction "
       "in every seed pairing; reconstruction <= 0.5 in >= 2 of 3 seeds")


def test_robustness_analogue(comparative_runs):
    finals = {}
    for (variant, seed), run_dir in comparative_runs.items():
        summary = json.loads((run_dir / "summary.json").read_text())
        finals[(variant, seed)] = summary["eval"]
    c_dist = float(np.mean([finals[("contrastive", s)]["distracted"]["mean"]
                            for s in COMPARATIVE_SEEDS]))
    c_clean = float(np.mean([finals[("contrastive", s)]["clean"]["mean"]
                             for s in COMPARATIVE_SEEDS]))
    r_dist = float(np.mean([finals[("reconstruction", s)]["distracted"]["mean"]
                            for s in COMPARATIVE_SEEDS]))
    print(f"  distracted eval return: contrastive {c_dist:.1f}, "
          f"reconstruction {r_dist:.1f}; contrastive clean {c_clean:.1f}")

    assert c_dist >= 1.2 * r_dist, \
        f"contrastive {c_dist:.1f} < 1.2 x reconstruction {r_dist:.1f}"
    assert c_dist >= 0.8 * c_clean, \
        f"distracted return {c_dist:.1f} < 80% of clean return {c_clean:.1f}"
    ok("robustness: contrastive beats reconstruction by >= 20% on the distracted "
       "task and keeps >= 80% of its clean-mode return")


# ----------------------------------------------------------------------
# 8. Ablation wiring
# ----------------------------------------------------------------------

def test_ablation_wiring(tmp_path, smoke_config_path):
    cases = {
        "no_inverse_dynamics": (["--set", "objective.use_inverse_dynamics=false"], "c_inv"),
        "no_simsiam": (["--set", "objective.use_simsiam=false"], "simsiam"),
        "constant_beta": (["--set", "schedule.constant_beta=0.1"], None),
    }
    for name, (switches, dropped_column) in cases.items():
        run_dir = tmp_path / name
        rc = cli_main(["train", "--config", str(smoke_config_path),
                       "--set", "loop.total_env_steps=1200",
                       "--run-dir", str(run_dir)] + switches)
        assert rc == 0, f"{name} did not complete"
        with open(run_dir / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows, f"{name} wrote no metrics"
        if dropped_column is not None:
            assert all(r[dropped_column] == "" for r in rows), \
                f"{name} still produced term {dropped_column}"
        else:
            betas = {r["beta"] for r in rows}
            assert betas == {"0.1"}, f"constant beta not applied: {betas}"
        assert (run_dir / "summary.json").exists()
    ok("ablation switches (drop inverse dynamics / drop siamese / constant beta) "
       "all run to completion with the expected term wiring")


# ----------------------------------------------------------------------
# 9. Determinism and persistence
# ----------------------------------------------------------------------

def test_determinism_and_persistence(tmp_path, smoke_config_path):
    cfg_a = load_config(smoke_config_path, ["loop.total_env_steps=1500"])
    cfg_b = load_config(smoke_config_path, ["loop.total_env_steps=1500"])
    a = train_run(cfg_a, tmp_path / "a")
    b = train_run(cfg_b, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
           (tmp_path / "b" / "metrics.csv").read_bytes(), \
        "same seed produced different metrics streams"

    ckpt = tmp_path / "a" / "checkpoints" / "latest.pt"
    first = evaluate_checkpoint(ckpt, episodes=3, mode="distracted", seed=123)
    second = evaluate_checkpoint(ckpt, episodes=3, mode="distracted", seed=123)
    assert first["returns"] == second["returns"], "checkpoint eval not reproducible"
    ok("bitwise-identical metrics for equal seeds; checkpoint round-trip "
       "preserves eval returns exactly")
