"""Sequential-accuracy metrics, batched model evaluation, paired tests.

Only the second half of each session is scored: the first half is treated
as observed history.  MAA (mean average accuracy) weights each scored
position by the running accuracy so far, so early mistakes cost more; FPA
is correctness at the first scored position alone.

The t machinery (CDF, quantile, paired test) is self-contained on top of a
regularized incomplete beta evaluated by continued fraction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .schema import SchemaError

__all__ = [
    "EvalReport",
    "StatResult",
    "confidence_interval",
    "evaluate",
    "maa",
    "paired_t_test",
    "regularized_incomplete_beta",
    "split_session",
    "student_t_cdf",
    "student_t_ppf",
]


def split_session(n: int) -> tuple[int, ...]:
    """1-based positions scored for a session of length n (its second half)."""
    if n < 2:
        raise ValueError("session must have at least 2 positions to split")
    return tuple(range(math.ceil(n / 2) + 1, n + 1))


def maa(correct: Sequence) -> float:
    """Mean average accuracy of a correctness sequence.

    With L(i) in {0,1} and A(i) the accuracy over the first i scored
    positions, MAA = (1/T) * sum_i A(i) * L(i).
    """
    L = np.asarray(correct, dtype=float)
    if L.ndim != 1 or L.size == 0:
        raise ValueError("correctness sequence must be non-empty and 1-D")
    if np.any((L != 0) & (L != 1)):
        raise ValueError("correctness values must be 0 or 1")
    T = L.size
    A = np.cumsum(L) / np.arange(1, T + 1)
    return float(np.sum(A * L) / T)


@dataclass
class EvalReport:
    """Per-session scores plus aggregate means and provenance metadata."""

    session_ids: list[str]
    maa_scores: np.ndarray
    fpa_scores: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_sessions(self) -> int:
        return len(self.session_ids)

    @property
    def mean_maa(self) -> float:
        return float(np.mean(self.maa_scores))

    @property
    def mean_fpa(self) -> float:
        return float(np.mean(self.fpa_scores))

    def to_json(self) -> dict:
        return {
            "session_ids": list(self.session_ids),
            "maa_scores": [float(v) for v in self.maa_scores],
            "fpa_scores": [float(v) for v in self.fpa_scores],
            "mean_maa": self.mean_maa,
            "mean_fpa": self.mean_fpa,
            "n_sessions": self.n_sessions,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        return cls(session_ids=list(doc["session_ids"]),
                   maa_scores=np.asarray(doc["maa_scores"], dtype=float),
                   fpa_scores=np.asarray(doc["fpa_scores"], dtype=float),
                   meta=dict(doc.get("meta", {})))


def _resolve_model(model, encoder):
    net = getattr(model, "network_", model)
    if encoder is None:
        encoder = getattr(model, "encoder_", None)
    if encoder is None:
        raise ValueError("an encoder is required when passing a bare network")
    return net, encoder


def evaluate(model, sessions: Sequence, encoder=None,
             chunk_rows: int = 4096) -> EvalReport:
    """Greedy full-traversal evaluation of every session.

    ``model`` is a fitted :class:`~skipdqn.agent.SkipDQN` or a bare
    Q-network plus ``encoder``.  Equivalent to running each session through
    the environment in EVAL mode with the greedy policy, but batched.
    """
    sessions = list(sessions)
    if not sessions:
        raise ValueError("no sessions to evaluate")
    net, encoder = _resolve_model(model, encoder)
    schema = getattr(encoder, "schema_", encoder)
    if net.input_dim != schema.width:
        raise SchemaError(
            f"model expects width {net.input_dim} but encoder produces "
            f"{schema.width}; schema mismatch")

    from .schema import encode_records
    states = np.concatenate(
        [encode_records(s.records, schema) for s in sessions], axis=0)
    actions = np.empty(states.shape[0], dtype=np.int64)
    for lo in range(0, states.shape[0], chunk_rows):
        q = net.forward(states[lo:lo + chunk_rows])
        actions[lo:lo + chunk_rows] = np.argmax(q, axis=1)

    ids = []
    maa_scores = np.empty(len(sessions))
    fpa_scores = np.empty(len(sessions))
    offset = 0
    for k, session in enumerate(sessions):
        n = len(session)
        correct = (actions[offset:offset + n] == session.labels()).astype(float)
        offset += n
        first_scored = math.ceil(n / 2)  # 0-based index of the first scored slot
        maa_scores[k] = maa(correct[first_scored:])
        fpa_scores[k] = correct[first_scored]
        ids.append(session.session_id)
    meta = {"schema_fingerprint": schema.fingerprint(),
            "width": schema.width, "n_records": int(states.shape[0])}
    return EvalReport(ids, maa_scores, fpa_scores, meta)


# ---------------------------------------------------------------------------
# Student-t machinery

def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("shape parameters must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if x == 0.0 or x == 1.0:
        return float(x)
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, dof: float) -> float:
    """P(T <= t) for Student's t with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if t == 0.0:
        return 0.5
    x = dof / (dof + t * t)
    tail = 0.5 * regularized_incomplete_beta(x, dof / 2.0, 0.5)
    return 1.0 - tail if t > 0 else tail


def student_t_ppf(q: float, dof: float) -> float:
    """Quantile of Student's t by bisection on the CDF."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must be in (0, 1)")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -student_t_ppf(1.0 - q, dof)
    hi = 1.0
    while student_t_cdf(hi, dof) < q:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("quantile bracket expansion failed")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if student_t_cdf(mid, dof) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def confidence_interval(samples: Sequence, level: float = 0.95) -> tuple[float, float]:
    """Two-sided t interval for the mean (sample std, ddof=1)."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("need at least 2 samples for a confidence interval")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    mean = float(np.mean(x))
    sd = float(np.std(x, ddof=1))
    if sd == 0.0:
        return (mean, mean)
    tcrit = student_t_ppf(0.5 + level / 2.0, x.size - 1)
    half = tcrit * sd / math.sqrt(x.size)
    return (mean - half, mean + half)


@dataclass(frozen=True)
class StatResult:
    """Paired-test outcome: statistic, two-sided p, CI of the mean diff."""

    t_statistic: float
    p_value: float
    dof: int
    mean_diff: float
    ci95: tuple[float, float]
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"t_statistic": self.t_statistic, "p_value": self.p_value,
                "dof": self.dof, "mean_diff": self.mean_diff,
                "ci95": list(self.ci95), "degenerate": self.degenerate,
                "meta": self.meta}


def paired_t_test(a: Sequence, b: Sequence) -> StatResult:
    """Two-sided paired t-test on matched samples a and b.

    Zero-variance differences are flagged degenerate instead of dividing
    by zero: identical samples give t=0, p=1; a constant nonzero shift
    gives an infinite statistic and p=0.
    """
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired test needs two 1-D samples of equal length")
    if x.size < 2:
        raise ValueError("need at least 2 pairs")
    d = x - y
    n = d.size
    dof = n - 1
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return StatResult(0.0, 1.0, dof, mean, (0.0, 0.0), degenerate=True)
        t = math.inf if mean > 0 else -math.inf
        return StatResult(t, 0.0, dof, mean, (mean, mean), degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = regularized_incomplete_beta(dof / (dof + t * t), dof / 2.0, 0.5)
    lo, hi = confidence_interval(d)
    return StatResult(float(t), float(p), dof, mean, (lo, hi))
