"""Gradient ascent on ``f(v) = m . softmax(v)`` and the ratio-amplification check.

One ascent step multiplies the probability ratio of two in-mask coordinates
``j, k`` by ``exp(beta' * (q_j - q_k))`` with ``beta' = beta * (1 - q . m)``,
so whichever in-mask coordinate already leads pulls further ahead.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

TIE_TOL = 1e-12


def softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


@dataclass(frozen=True)
class AscentTrial:
    v: np.ndarray
    m: np.ndarray
    beta: float
    j: int
    k: int

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        m = np.asarray(self.m, dtype=np.float64)
        if v.ndim != 1 or v.shape != m.shape or v.size < 2:
            raise ValueError("v and m must be 1-D vectors of equal length >= 2")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if m.sum() < 2:
            raise ValueError("mask needs at least two ones")
        if not self.beta > 0:
            raise ValueError(f"step size must be positive, got {self.beta}")
        if m[self.j] != 1 or m[self.k] != 1:
            raise ValueError("indices j and k must both lie inside the mask")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "m", m)


def softmax_jacobian(q: np.ndarray) -> np.ndarray:
    """``diag(q) - q q^T``."""
    q = np.asarray(q, dtype=np.float64)
    return np.diag(q) - np.outer(q, q)


def masked_objective_gradient(v: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Gradient of ``m . softmax(v)``: component ``u`` is ``q_u (m_u - q . m)``."""
    q = softmax(v)
    m = np.asarray(m, dtype=np.float64)
    return q * (m - q @ m)


def effective_step(trial: AscentTrial) -> float:
    """The shared in-mask coefficient ``beta * (1 - q . m)``."""
    q = softmax(trial.v)
    return trial.beta * (1.0 - q @ trial.m)


def ascent_step(trial: AscentTrial) -> np.ndarray:
    return trial.v + trial.beta * masked_objective_gradient(trial.v, trial.m)


def ratio_amplification_trial(trial: AscentTrial) -> tuple[float, float]:
    """``(q_j / q_k, q'_j / q'_k)`` around one ascent step.

    Raises:
        ValueError: unless ``q_j > q_k`` strictly.
    """
    q = softmax(trial.v)
    if not q[trial.j] > q[trial.k]:
        raise ValueError(f"precondition q_j > q_k violated ({q[trial.j]} <= {q[trial.k]})")
    q_new = softmax(ascent_step(trial))
    return q[trial.j] / q[trial.k], q_new[trial.j] / q_new[trial.k]


@dataclass
class Theorem1Report:
    trials: int
    evaluated: int
    filtered: int
    passed: int
    pass_fraction: float
    max_identity_error: float
    min_log_gain: float

    def to_dict(self) -> dict:
        return asdict(self)


def random_trial(rng: np.random.Generator, n_range=(3, 64)) -> AscentTrial:
    """Random valid trial: mask with at least two ones and at least one zero."""
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    v = rng.standard_normal(n)
    ones = int(rng.integers(2, n))  # 2 .. n-1
    m = np.zeros(n)
    m[rng.choice(n, size=ones, replace=False)] = 1.0
    beta = 1.0 - rng.random()  # (0, 1]
    j, k = rng.choice(np.flatnonzero(m), size=2, replace=False)
    q = softmax(v)
    if q[j] < q[k]:
        j, k = k, j
    return AscentTrial(v, m, beta, int(j), int(k))


def verify_theorem1(trials: int = 10_000, rng_seed: int = 0) -> Theorem1Report:
    """Check strict ratio amplification and the multiplicative identity on random trials.

    Trial ``i`` draws from its own generator seeded with ``(rng_seed, i)``.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    passed = filtered = 0
    max_err = 0.0
    min_gain = np.inf
    for i in range(trials):
        trial = random_trial(np.random.default_rng([rng_seed, i]))
        q = softmax(trial.v)
        if abs(q[trial.j] - q[trial.k]) < TIE_TOL:
            filtered += 1
            continue
        before, after = ratio_amplification_trial(trial)
        q_new = softmax(ascent_step(trial))
        predicted = before * np.exp(effective_step(trial) * (q[trial.j] - q[trial.k]))
        max_err = max(max_err, abs(after - predicted) / predicted)
        min_gain = min(min_gain, np.log(after) - np.log(before))
        if q_new[trial.j] > q_new[trial.k] and after > before:
            passed += 1
    evaluated = trials - filtered
    return Theorem1Report(
        trials=trials,
        evaluated=evaluated,
        filtered=filtered,
        passed=passed,
        pass_fraction=passed / evaluated if evaluated else 0.0,
        max_identity_error=float(max_err),
        min_log_gain=float(min_gain),
    )
