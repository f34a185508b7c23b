"""Exact verification of the information-theoretic bounds on small discrete
distributions.

Three statements are checked by enumeration (everything in nats):

1. The expected log-density of a variational decoder plus the observation
   entropy lower-bounds the mutual information, with equality iff the decoder
   equals the true conditional.
2. The expected KL between the observation-conditioned state distribution and
   an observation-free model upper-bounds the conditional mutual information,
   with equality iff the model equals the context marginal.
3. The noise-contrastive bound log N - L never exceeds the mutual information
   when the scorer is the true density ratio (checked statistically).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ATOL_MASS = 1e-12


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x * log(y) with the 0 * log(0) = 0 convention."""
    out = np.zeros_like(x, dtype=float)
    mask = x > 0
    out[mask] = x[mask] * np.log(y[mask])
    return out


@dataclass(frozen=True)
class DiscreteJoint:
    """Exact joint probability table p(s, o), shape [|S|, |O|]."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.ndim != 2:
            raise ValueError(f"joint table must be 2-D, got shape {t.shape}")
        if np.any(t < 0):
            raise ValueError("joint table has negative entries")
        if abs(t.sum() - 1.0) > _ATOL_MASS:
            raise ValueError(f"joint table mass is {t.sum()}, expected 1")
        object.__setattr__(self, "table", t)

    @property
    def p_s(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def p_o(self) -> np.ndarray:
        return self.table.sum(axis=0)


@dataclass(frozen=True)
class ConditionalModel:
    """Row-stochastic table: each row is a conditional distribution."""

    q_table: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q_table, dtype=float)
        if q.ndim != 2:
            raise ValueError(f"conditional table must be 2-D, got shape {q.shape}")
        if np.any(q < 0):
            raise ValueError("conditional table has negative entries")
        if np.any(np.abs(q.sum(axis=1) - 1.0) > _ATOL_MASS):
            raise ValueError("conditional table rows must each sum to 1")
        object.__setattr__(self, "q_table", q)


@dataclass(frozen=True)
class ConditionalJoint:
    """Mixture of per-context joints: weights w_k and tables p_k(s, o)."""

    weights: np.ndarray
    tables: list[DiscreteJoint]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > _ATOL_MASS:
            raise ValueError("context weights must be nonnegative and sum to 1")
        if len(self.tables) != w.shape[0]:
            raise ValueError("one table per context weight required")
        object.__setattr__(self, "weights", w)


def entropy(p: np.ndarray) -> float:
    return float(-_xlogy(p, p).sum())


def mutual_information(joint: DiscreteJoint) -> float:
    """Exact sum p(s,o) * ln[p(s,o) / (p(s) p(o))]."""
    outer = np.outer(joint.p_s, joint.p_o)
    ratio = np.ones_like(joint.table)
    mask = joint.table > 0
    ratio[mask] = joint.table[mask] / outer[mask]
    return float(_xlogy(joint.table, ratio).sum())


def prop1_gap(joint: DiscreteJoint, q: ConditionalModel) -> tuple[float, float]:
    """Decoder lower bound: sum p(s,o) ln q(o|s) + H(o) <= I(s, o).

    q rows are indexed by s over o and must be positive wherever p(s,o) > 0.
    """
    if q.q_table.shape != joint.table.shape:
        raise ValueError(
            f"q shape {q.q_table.shape} does not match joint shape {joint.table.shape}")
    support = joint.table > 0
    if np.any(q.q_table[support] <= 0):
        raise ValueError("q(o|s) is zero on the support of p(s,o); bound is -inf")
    lower = float(_xlogy(joint.table, np.where(support, q.q_table, 1.0)).sum()
                  + entropy(joint.p_o))
    return lower, mutual_information(joint)


def _kl_rows(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise ValueError("q is zero where p > 0; KL is infinite")
    ratio = np.ones_like(p)
    ratio[mask] = p[mask] / q[mask]
    return float(_xlogy(p, ratio).sum())


def prop2_gap(cj: ConditionalJoint, q_per_context: ConditionalModel) -> tuple[float, float]:
    """Observation-free upper bound on conditional mutual information.

    upper = sum_k w_k sum_o p_k(o) KL(p_k(s|o) || q_k(s))
    cond_mi = sum_k w_k I_k(s; o)
    where q_k is row k of `q_per_context` (a distribution over s).
    """
    n_s = cj.tables[0].table.shape[0]
    if q_per_context.q_table.shape != (len(cj.tables), n_s):
        raise ValueError(
            f"expected q of shape {(len(cj.tables), n_s)}, got {q_per_context.q_table.shape}")
    upper = 0.0
    cond_mi = 0.0
    for k, joint in enumerate(cj.tables):
        q_k = q_per_context.q_table[k]
        p_o = joint.p_o
        for o in range(joint.table.shape[1]):
            if p_o[o] == 0:
                continue
            p_s_given_o = joint.table[:, o] / p_o[o]
            upper += cj.weights[k] * p_o[o] * _kl_rows(p_s_given_o, q_k)
        cond_mi += cj.weights[k] * mutual_information(joint)
    return float(upper), float(cond_mi)


@dataclass(frozen=True)
class NCEBoundResult:
    bound: float  # log N - mean contrastive loss
    mi: float     # exact mutual information
    stderr: float  # Monte-Carlo standard error of the bound


def infonce_bound_check(joint: DiscreteJoint, n_samples: int, trials: int,
                        rng: np.random.Generator) -> NCEBoundResult:
    """Monte-Carlo estimate of the noise-contrastive lower bound.

    Per trial: one positive pair (s, o) from the joint and N-1 negatives from
    the observation marginal; the scorer is the true density ratio
    p(o|s)/p(o). Returns log N minus the mean loss, the exact mutual
    information, and the standard error of the estimate.
    """
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples per trial, got {n_samples}")
    if trials < 2:
        raise ValueError(f"need at least 2 trials, got {trials}")
    n_s, n_o = joint.table.shape
    flat = joint.table.reshape(-1)
    pos = rng.choice(n_s * n_o, size=trials, p=flat)
    s_idx, o_idx = np.divmod(pos, n_o)
    p_o = joint.p_o
    negatives = rng.choice(n_o, size=(trials, n_samples - 1), p=p_o)

    # ratio[s, o] = p(o|s) / p(o) = p(s,o) / (p(s) p(o)); zero where p(s,o)=0.
    outer = np.outer(joint.p_s, p_o)
    ratio = np.zeros_like(joint.table)
    mask = outer > 0
    ratio[mask] = joint.table[mask] / outer[mask]

    f_pos = ratio[s_idx, o_idx]
    f_neg = ratio[s_idx[:, None], negatives]
    losses = -np.log(f_pos / (f_pos + f_neg.sum(axis=1)))
    bound_samples = np.log(n_samples) - losses
    return NCEBoundResult(
        bound=float(bound_samples.mean()),
        mi=mutual_information(joint),
        stderr=float(bound_samples.std(ddof=1) / np.sqrt(trials)),
    )


# ---------------------------------------------------------------------------
# Fuzzing suites
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FuzzReport:
    name: str
    trials: int
    violations: int
    max_violation: float
    worst_gap: float  # smallest (bound - target) margin seen, signed

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{self.name}: {status} trials={self.trials} "
                f"violations={self.violations} max_violation={self.max_violation:.3e}")


def random_joint(rng: np.random.Generator, n_s: int, n_o: int) -> DiscreteJoint:
    return DiscreteJoint(rng.dirichlet(np.ones(n_s * n_o)).reshape(n_s, n_o))


def random_conditional(rng: np.random.Generator, rows: int, cols: int) -> ConditionalModel:
    return ConditionalModel(np.stack([rng.dirichlet(np.ones(cols)) for _ in range(rows)]))


def fuzz_prop1(trials: int, rng: np.random.Generator, max_size: int = 8,
               tol: float = 1e-9) -> FuzzReport:
    violations = 0
    max_violation = 0.0
    worst = np.inf
    for _ in range(trials):
        n_s = int(rng.integers(2, max_size + 1))
        n_o = int(rng.integers(2, max_size + 1))
        joint = random_joint(rng, n_s, n_o)
        q = random_conditional(rng, n_s, n_o)
        lower, mi = prop1_gap(joint, q)
        gap = mi - lower
        worst = min(worst, gap)
        if gap < -tol:
            violations += 1
            max_violation = max(max_violation, -gap)
    return FuzzReport("decoder-lower-bound", trials, violations, max_violation, worst)


def fuzz_prop2(trials: int, rng: np.random.Generator, max_size: int = 8,
               tol: float = 1e-9) -> FuzzReport:
    violations = 0
    max_violation = 0.0
    worst = np.inf
    for _ in range(trials):
        n_s = int(rng.integers(2, max_size + 1))
        n_o = int(rng.integers(2, max_size + 1))
        n_ctx = int(rng.integers(1, 5))
        cj = ConditionalJoint(rng.dirichlet(np.ones(n_ctx)),
                              [random_joint(rng, n_s, n_o) for _ in range(n_ctx)])
        q = random_conditional(rng, n_ctx, n_s)
        upper, cond_mi = prop2_gap(cj, q)
        gap = upper - cond_mi
        worst = min(worst, gap)
        if gap < -tol:
            violations += 1
            max_violation = max(max_violation, -gap)
    return FuzzReport("dynamics-upper-bound", trials, violations, max_violation, worst)


def fuzz_infonce(joints: int, rng: np.random.Generator, trials_per_joint: int = 3000,
                 max_size: int = 8, n_sigma: float = 3.0) -> FuzzReport:
    violations = 0
    max_violation = 0.0
    worst = np.inf
    for _ in range(joints):
        n_s = int(rng.integers(2, max_size + 1))
        n_o = int(rng.integers(2, max_size + 1))
        joint = random_joint(rng, n_s, n_o)
        n = int(rng.integers(2, 17))
        res = infonce_bound_check(joint, n, trials_per_joint, rng)
        slack = res.mi + n_sigma * res.stderr - res.bound
        worst = min(worst, slack)
        if slack < 0:
            violations += 1
            max_violation = max(max_violation, -slack)
    return FuzzReport("nce-lower-bound", joints, violations, max_violation, worst)


def run_all_fuzz(trials: int, seed: int) -> list[FuzzReport]:
    rng = np.random.default_rng(seed)
    return [
        fuzz_prop1(trials, rng),
        fuzz_prop2(trials, rng),
        fuzz_infonce(max(1, trials // 10), rng),
    ]
