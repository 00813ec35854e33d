"""Token-selection machinery.

Everything here picks *which* tokens receive supervision: the opener that
indirect distillation acts on, the student's top-k proposals and the
teacher's re-ranking of them, the high-entropy set for entropy
minimization, and the soft entropy-gap gate for direct distillation. The
selections are discrete (or, for the gate, detached) and carry no gradient.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError, InvalidParameterError

# Coverage percent for each quarter of the mean sigmoid gap.
COVERAGE_LEVELS = (5.0, 10.0, 15.0, 20.0)
COVERAGE_WINDOW = 5

_RATIO_SLACK = 1e-12


@dataclass(frozen=True)
class OpenerSpan:
    length: int
    coverage: float
    cumulative_ratio: float


@dataclass(frozen=True)
class PreferencePermutation:
    """Teacher ordering over the student's candidates.

    ``candidate_ids`` are in the student's descending-logit order and
    ``order[j]`` is the index (into ``candidate_ids``) of the teacher's
    ``j``-th choice. Zero-based.
    """

    candidate_ids: np.ndarray
    order: np.ndarray

    @property
    def ranked_ids(self) -> np.ndarray:
        return self.candidate_ids[self.order]


@dataclass
class CoverageHistory:
    window: int = COVERAGE_WINDOW
    scores: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.window < 1:
            raise InvalidParameterError("coverage window must be positive")
        self.scores = deque(self.scores, maxlen=self.window)

    def push(self, score: float) -> None:
        self.scores.append(float(score))

    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else 0.5


def select_opener(entropies, coverage: float) -> OpenerSpan:
    """Shortest prefix whose share of the total entropy reaches ``coverage`` percent."""
    h = np.asarray(entropies, dtype=float)
    if h.ndim != 1 or h.size == 0:
        raise InvalidInputError("entropy sequence must be a non-empty 1-D array")
    if not 0.0 < coverage <= 100.0:
        raise InvalidParameterError(f"coverage must lie in (0, 100], got {coverage}")
    if np.any(h < 0):
        raise InvalidInputError("entropies must be non-negative")
    total = h.sum()
    if coverage >= 100.0:
        return OpenerSpan(h.size, coverage, 1.0)
    if total <= 0.0:
        return OpenerSpan(1, coverage, 0.0)
    ratios = np.cumsum(h) / total
    m = int(np.argmax(ratios >= coverage / 100.0 - _RATIO_SLACK)) + 1
    return OpenerSpan(m, coverage, float(ratios[m - 1]))


def coverage_bucket(score: float) -> float:
    """Map a mean gap score in [0, 1] to a coverage percent."""
    idx = min(int(math.floor(score * 4.0)), 3)
    return COVERAGE_LEVELS[max(idx, 0)]


def adaptive_coverage(mean_student_entropy: float, mean_teacher_entropy: float,
                      history: CoverageHistory) -> float:
    """Push sigmoid(student - teacher mean entropy) and return the bucketed coverage."""
    history.push(expit(mean_student_entropy - mean_teacher_entropy))
    return coverage_bucket(history.mean())


def top_k_candidates(student_logits, k: int) -> np.ndarray:
    """Ids of the ``k`` largest logits, descending; ties go to the lower id."""
    z = np.asarray(student_logits, dtype=float)
    if not 1 <= k <= z.size:
        raise InvalidParameterError(f"k={k} outside [1, {z.size}]")
    return np.argsort(-z, kind="stable")[:k]


def teacher_rank(teacher_logits, candidate_ids) -> PreferencePermutation:
    """Order the student's candidates by descending teacher logit.

    Ties keep the student's original order.
    """
    zeta = np.asarray(teacher_logits, dtype=float)
    ids = np.asarray(candidate_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InvalidInputError("candidate ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= zeta.size:
        raise InvalidInputError("candidate id outside the vocabulary")
    if np.unique(ids).size != ids.size:
        raise InvalidInputError("candidate ids must be distinct")
    order = np.argsort(-zeta[ids], kind="stable")
    return PreferencePermutation(ids, order)


def top_fraction_entropy_indices(entropies, fraction: float) -> np.ndarray:
    """Positions of the ``ceil(fraction * T)`` largest entropies (at least one), sorted."""
    h = np.asarray(entropies, dtype=float)
    if h.ndim != 1 or h.size == 0:
        raise InvalidInputError("entropy sequence must be non-empty")
    if not 0.0 < fraction <= 1.0:
        raise InvalidParameterError(f"fraction must lie in (0, 1], got {fraction}")
    # 0.1 * 30 is 3.0000000000000004 in binary; trim before the ceiling
    count = max(1, math.ceil(fraction * h.size - 1e-9))
    count = min(count, h.size)
    top = np.argsort(-h, kind="stable")[:count]
    return np.sort(top)


def uncertainty_gate(student_entropy, teacher_entropy, tau: float = 1.0):
    """sigmoid((H_S - H_T) / tau); a detached per-position weight."""
    if tau <= 0:
        raise InvalidParameterError(f"tau must be positive, got {tau}")
    gap = (np.asarray(student_entropy, dtype=float) - np.asarray(teacher_entropy, dtype=float)) / tau
    out = expit(gap)
    return float(out) if np.ndim(out) == 0 else out
