"""Distillation objectives with analytic gradients w.r.t. student logits.

All per-response functions take ``student_logits`` and ``teacher_logits`` as
``(L, V)`` arrays (row ``t`` conditioned on the prompt and ``y_<t``) and return
``(value, grad)`` with ``grad`` shaped like ``student_logits``. Selections
(opener, candidate rankings, gate weights, high-entropy set) are constants
for differentiation; each function accepts them precomputed so that a finite
difference check can hold them fixed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError, InvalidParameterError
from .lm.model import forward
from .numerics import (
    as_real,
    real_scalar,
    entropy_value_and_grad,
    forward_kl_value_and_grad,
    jsd_value_and_grad,
    log_softmax,
    reverse_kl_value_and_grad,
    softmax,
    token_entropy,
)
from .selection import (
    CoverageHistory,
    OpenerSpan,
    PreferencePermutation,
    adaptive_coverage,
    select_opener,
    teacher_rank,
    top_fraction_entropy_indices,
    top_k_candidates,
    uncertainty_gate,
)

BASELINES = ("forward_kl", "reverse_kl", "gkd_jsd", "sequence_ce")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Weights and selection knobs of the combined objective."""

    alpha: float = 0.1
    beta: float = 0.9
    tau: float = 1.0
    top_k: int = 10
    coverage: float = 10.0
    adaptive: bool = False
    em_fraction: float = 0.1

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidParameterError("alpha must be non-negative")
        if not 0 < self.beta < 1:
            raise InvalidParameterError("beta must lie in (0, 1)")
        if self.tau <= 0:
            raise InvalidParameterError("tau must be positive")
        if self.top_k < 2:
            raise InvalidParameterError("top_k must be at least 2")
        if not 0 < self.coverage <= 100:
            raise InvalidParameterError("coverage must lie in (0, 100]")
        if not 0 < self.em_fraction <= 1:
            raise InvalidParameterError("em_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class TokenSelection:
    """Everything the combined loss treats as a constant."""

    opener: OpenerSpan
    rankings: tuple[PreferencePermutation, ...]
    gates: np.ndarray
    em_indices: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    indirect: float
    direct: float
    entropy_min: float
    alpha: float
    total: float
    opener_len: int
    coverage: float
    gate_mean: float
    n_indirect: int
    n_direct: int
    n_em: int

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(student_logits, teacher_logits):
    s = as_real(student_logits)
    t = as_real(teacher_logits)
    if s.ndim != 2 or s.shape[0] == 0:
        raise InvalidInputError("student logits must be a non-empty (L, V) array")
    if s.shape != t.shape:
        raise InvalidInputError(f"student {s.shape} and teacher {t.shape} logits disagree")
    return s, t


# -- preference ranking ------------------------------------------------------

def pl_value_and_grad(scores) -> tuple[float, np.ndarray]:
    """Plackett-Luce log-likelihood of ``scores`` listed best-first, and its gradient.

    log P = sum_j [ s_j - logsumexp(s_j..s_k) ]
    d/ds_l = 1 - sum_{j<=l} softmax over stage j of s_l
    """
    s = as_real(scores)
    if s.ndim != 1 or s.size < 2:
        raise InvalidParameterError("Plackett-Luce needs at least two scores")
    tail_lse = np.logaddexp.accumulate(s[::-1])[::-1]
    value = real_scalar(np.sum(s - tail_lse))
    # stage j assigns exp(s_l - lse_j) to every l >= j
    stage = np.exp(s[None, :] - tail_lse[:, None])
    stage = np.triu(stage)
    grad = 1.0 - stage.sum(axis=0)
    return value, grad


def pl_log_likelihood(scores) -> float:
    return pl_value_and_grad(scores)[0]


def rank_position(student_logits, teacher_logits, k: int) -> PreferencePermutation:
    return teacher_rank(teacher_logits, top_k_candidates(student_logits, k))


def indirect_loss(student_logits, teacher_logits, k: int = 10, coverage: float = 10.0,
                  history: CoverageHistory | None = None, *, opener_len: int | None = None,
                  rankings: Sequence[PreferencePermutation] | None = None):
    """Summed negative PL log-likelihood of the teacher's ranking over the opener.

    Pass ``history`` to pick the coverage adaptively. ``opener_len`` and
    ``rankings`` freeze the selection.
    """
    s, t = _pair(student_logits, teacher_logits)
    if opener_len is None:
        h_s = token_entropy(s)
        if history is not None:
            coverage = adaptive_coverage(float(h_s.mean()), float(token_entropy(t).mean()), history)
        opener_len = select_opener(h_s, coverage).length
    if rankings is None:
        rankings = [rank_position(s[i], t[i], k) for i in range(opener_len)]
    grad = np.zeros_like(s)
    value = 0.0
    for i, perm in enumerate(rankings[:opener_len]):
        ids = perm.ranked_ids
        ll, g = pl_value_and_grad(s[i, ids])
        value -= ll
        grad[i, ids] -= g
    return value, grad


# -- direct distillation -----------------------------------------------------

def gate_weights(student_logits, teacher_logits, tau: float = 1.0) -> np.ndarray:
    s, t = _pair(student_logits, teacher_logits)
    return np.atleast_1d(uncertainty_gate(token_entropy(s), token_entropy(t), tau))


def direct_loss(student_logits, teacher_logits, beta: float = 0.9, tau: float = 1.0, *,
                gates=None):
    """Gate-weighted JSD(beta)(teacher || student), averaged over positions."""
    s, t = _pair(student_logits, teacher_logits)
    if gates is None:
        gates = gate_weights(s, t, tau)
    gates = np.asarray(gates, dtype=float)
    L = s.shape[0]
    jsd, g = jsd_value_and_grad(softmax(t), s, beta)
    jsd = np.atleast_1d(jsd)
    value = real_scalar(np.sum(gates * jsd) / L)
    return value, g * (gates[:, None] / L)


# -- entropy minimization ----------------------------------------------------

def entropy_min_loss(student_logits, fraction: float = 0.1, *, indices=None):
    """Mean student entropy over the top-``fraction`` highest-entropy positions."""
    s = as_real(student_logits)
    if s.ndim != 2 or s.shape[0] == 0:
        raise InvalidInputError("student logits must be a non-empty (L, V) array")
    h, dh = entropy_value_and_grad(s)
    h = np.atleast_1d(h)
    if indices is None:
        indices = top_fraction_entropy_indices(h, fraction)
    indices = np.asarray(indices, dtype=np.int64)
    grad = np.zeros_like(s)
    grad[indices] = dh[indices] / indices.size
    return real_scalar(h[indices].mean()), grad


# -- combined objective ------------------------------------------------------

def select_tokens(student_logits, teacher_logits, cfg: ObjectiveConfig,
                  history: CoverageHistory | None = None) -> TokenSelection:
    """Compute every detached selection the combined loss needs.

    When ``cfg.adaptive`` is set, ``history`` is required and is updated.
    """
    s, t = _pair(student_logits, teacher_logits)
    h_s = token_entropy(s)
    h_t = token_entropy(t)
    h_s, h_t = np.atleast_1d(h_s), np.atleast_1d(h_t)
    coverage = cfg.coverage
    if cfg.adaptive:
        if history is None:
            raise InvalidInputError("adaptive coverage needs a CoverageHistory")
        coverage = adaptive_coverage(float(h_s.mean()), float(h_t.mean()), history)
    opener = select_opener(h_s, coverage)
    k = min(cfg.top_k, s.shape[1])
    rankings = tuple(rank_position(s[i], t[i], k) for i in range(opener.length))
    gates = np.atleast_1d(uncertainty_gate(h_s, h_t, cfg.tau))
    em = top_fraction_entropy_indices(h_s, cfg.em_fraction)
    return TokenSelection(opener, rankings, gates, em)


def total_loss(student_logits, teacher_logits, cfg: ObjectiveConfig = ObjectiveConfig(),
               history: CoverageHistory | None = None, selection: TokenSelection | None = None):
    """alpha * indirect + direct + entropy_min for one response.

    Returns ``(LossBreakdown, grad)``.
    """
    s, t = _pair(student_logits, teacher_logits)
    if selection is None:
        selection = select_tokens(s, t, cfg, history)
    ind, g_ind = indirect_loss(s, t, opener_len=selection.opener.length, rankings=selection.rankings)
    dir_, g_dir = direct_loss(s, t, cfg.beta, gates=selection.gates)
    em, g_em = entropy_min_loss(s, indices=selection.em_indices)
    total = cfg.alpha * ind + dir_ + em
    breakdown = LossBreakdown(
        indirect=ind, direct=dir_, entropy_min=em, alpha=cfg.alpha, total=total,
        opener_len=selection.opener.length, coverage=selection.opener.coverage,
        gate_mean=float(selection.gates.mean()), n_indirect=selection.opener.length,
        n_direct=s.shape[0], n_em=int(selection.em_indices.size),
    )
    return breakdown, cfg.alpha * g_ind + g_dir + g_em


# -- baselines ---------------------------------------------------------------

def baseline_loss(kind: str, student_logits, teacher_logits=None, response=None,
                  beta: float = 0.9):
    """Comparison objectives, each averaged over response positions.

    ``forward_kl``  KL(teacher || student)
    ``reverse_kl``  KL(student || teacher)
    ``gkd_jsd``     ungated JSD(beta)(teacher || student)
    ``sequence_ce`` -log p_student(response token); needs ``response``
    """
    s = as_real(student_logits)
    if s.ndim != 2 or s.shape[0] == 0:
        raise InvalidInputError("student logits must be a non-empty (L, V) array")
    L = s.shape[0]
    if kind == "sequence_ce":
        if response is None:
            raise InvalidInputError("sequence_ce needs the response tokens")
        y = np.asarray(response, dtype=np.int64)
        if y.shape != (L,):
            raise InvalidInputError("response length must match the logit rows")
        logq = log_softmax(s)
        rows = np.arange(L)
        value = real_scalar(-logq[rows, y].mean())
        grad = np.exp(logq)
        grad[rows, y] -= 1.0
        return value, grad / L
    s, t = _pair(s, teacher_logits)
    p = softmax(t)
    if kind == "forward_kl":
        v, g = forward_kl_value_and_grad(p, s)
    elif kind == "reverse_kl":
        v, g = reverse_kl_value_and_grad(p, s)
    elif kind == "gkd_jsd":
        v, g = jsd_value_and_grad(p, s, beta)
    else:
        raise InvalidParameterError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    return real_scalar(np.sum(v) / L), g / L


# -- analysis oracles --------------------------------------------------------

def rescaling_factor(teacher_entropy: float, weak_entropy: float, strong_entropy: float):
    """Gate-induced gradient rescaling between a weaker and a stronger student.

    Returns ``(ratio, closed_form)`` where ``ratio`` divides the two sigmoid
    gates and ``closed_form`` is
    ``(exp(-Hp) + exp(-Hq')) / (exp(-Hp) + exp(-Hq))``.
    """
    hp, hq, hq2 = float(teacher_entropy), float(weak_entropy), float(strong_entropy)
    if min(hp, hq, hq2) < 0:
        raise InvalidInputError("entropies must be non-negative")
    ratio = expit(hq - hp) / expit(hq2 - hp)
    closed = (math.exp(-hp) + math.exp(-hq2)) / (math.exp(-hp) + math.exp(-hq))
    return float(ratio), closed


@dataclass(frozen=True)
class PreferenceCheck:
    token_level: float
    sentence_level: float
    label_by_logit: bool
    label_by_reward: bool
    candidates: tuple[int, int]

    @property
    def deviation(self) -> float:
        return abs(self.token_level - self.sentence_level)


def _response_log_prob(params, prompt: np.ndarray, response: np.ndarray) -> float:
    seq = np.concatenate([prompt, response])
    logp = log_softmax(forward(params, seq[:-1])[0])
    start = prompt.size - 1
    rows = np.arange(start, start + response.size)
    # summed in position order
    return float(np.sum(logp[rows, response]))


def proposition1_oracle(student, teacher, prompt, prefix) -> PreferenceCheck:
    """Token-level vs sentence-level preference probability at one position.

    The student's top-2 tokens after ``prompt + prefix`` define two
    sub-responses differing only in their last token. The token-level value
    is the two-item PL probability on the student's logits; the
    sentence-level value is a Bradley-Terry probability on full-response
    log-likelihood rewards, computed from two separate forward passes.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    prefix = np.asarray(prefix, dtype=np.int64)
    ctx = np.concatenate([prompt, prefix])
    z = forward(student, ctx)[0, -1]
    zeta = forward(teacher, ctx)[0, -1]
    y1, y2 = (int(i) for i in top_k_candidates(z, 2))
    token_level = math.exp(pl_log_likelihood([z[y1], z[y2]]))

    sub1 = np.append(prefix, y1)
    sub2 = np.append(prefix, y2)
    r1 = _response_log_prob(student, prompt, sub1)
    r2 = _response_log_prob(student, prompt, sub2)
    sentence_level = float(expit(r1 - r2))

    rt1 = _response_log_prob(teacher, prompt, sub1)
    rt2 = _response_log_prob(teacher, prompt, sub2)
    return PreferenceCheck(token_level, sentence_level, bool(zeta[y1] >= zeta[y2]),
                           bool(rt1 >= rt2), (y1, y2))
