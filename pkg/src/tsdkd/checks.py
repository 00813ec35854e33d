"""Numerical self-checks: finite-difference gradients and the preference equivalence."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .losses import (
    BASELINES,
    ObjectiveConfig,
    baseline_loss,
    direct_loss,
    entropy_min_loss,
    indirect_loss,
    proposition1_oracle,
    select_tokens,
    total_loss,
)
from .lm import ModelDims, TinyLMParams, init_params
from .numerics import finite_difference_check

GRAD_TOLERANCE = 1e-5
PREF_TOLERANCE = 1e-10
GRAD_LOSSES = ("indirect", "direct", "entropy_min", "total") + BASELINES


@dataclass
class GradcheckReport:
    max_error: dict[str, float]
    trials: int
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_error.values())

    def table(self) -> str:
        lines = [f"{'loss':<14}{'max rel err':>14}  status"]
        for name, err in self.max_error.items():
            lines.append(f"{name:<14}{err:>14.3e}  {'ok' if err <= self.tolerance else 'FAIL'}")
        return "\n".join(lines)


def random_trace_logits(rng: np.random.Generator, max_vocab: int = 16, max_len: int = 8,
                        scale: float = 2.0):
    V = int(rng.integers(4, max_vocab + 1))
    L = int(rng.integers(1, max_len + 1))
    s = rng.normal(0.0, scale, (L, V))
    t = rng.normal(0.0, scale, (L, V))
    y = rng.integers(0, V, L)
    return s, t, y


def gradcheck_suite(trials: int = 100, seed: int = 0, step: float = 1e-5,
                    cfg: ObjectiveConfig | None = None, dtype=np.longdouble) -> GradcheckReport:
    """Worst relative error per loss over ``trials`` random traces.

    Token selections are computed once at the base point and then frozen.
    The analytic gradients are double precision; the difference quotients
    are taken in ``dtype`` (long double by default) so that coordinates with
    tiny true gradients are not swamped by rounding in the loss values.
    """
    cfg = cfg or ObjectiveConfig()
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in GRAD_LOSSES}
    t0 = time.perf_counter()
    for _ in range(trials):
        s, t, y = random_trace_logits(rng)
        c = ObjectiveConfig(cfg.alpha, cfg.beta, cfg.tau, min(cfg.top_k, s.shape[1]), cfg.coverage,
                            False, cfg.em_fraction)
        sel = select_tokens(s, t, c)
        fns = {
            "indirect": lambda z: indirect_loss(z, t, opener_len=sel.opener.length,
                                                rankings=sel.rankings),
            "direct": lambda z: direct_loss(z, t, c.beta, gates=sel.gates),
            "entropy_min": lambda z: entropy_min_loss(z, indices=sel.em_indices),
            "total": lambda z: (lambda bd, g: (bd.total, g))(*total_loss(z, t, c, selection=sel)),
        }
        for kind in BASELINES:
            fns[kind] = (lambda kind: lambda z: baseline_loss(kind, z, t, y, c.beta))(kind)
        for name, fn in fns.items():
            worst[name] = max(worst[name], finite_difference_check(fn, s, step, dtype=dtype))
    return GradcheckReport(worst, trials, GRAD_TOLERANCE, time.perf_counter() - t0)


@dataclass
class Prop1Report:
    max_deviation: float
    label_mismatches: int
    trials: int
    tolerance: float
    seconds: float
    deviations: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance and self.label_mismatches == 0


def random_tiny_model(rng: np.random.Generator, vocab_size: int = 8, context: int = 16,
                      d_model: int = 8, scale: float = 1.0) -> TinyLMParams:
    """Randomly initialised model whose output layer is not zero."""
    params = init_params(ModelDims(vocab_size, context, 1, d_model, 2), int(rng.integers(2 ** 31)))
    params.arrays["w_out"] = rng.normal(0.0, scale, params.arrays["w_out"].shape)
    params.arrays["b_out"] = rng.normal(0.0, 0.1 * scale, params.arrays["b_out"].shape)
    return params


def prop1_suite(trials: int = 1000, seed: int = 0, vocab_size: int = 8) -> Prop1Report:
    rng = np.random.default_rng(seed)
    worst, mismatches = 0.0, 0
    devs = []
    t0 = time.perf_counter()
    for _ in range(trials):
        student = random_tiny_model(rng, vocab_size)
        teacher = random_tiny_model(rng, vocab_size)
        prompt = rng.integers(0, vocab_size, int(rng.integers(1, 5)))
        prefix = rng.integers(0, vocab_size, int(rng.integers(0, 6)))
        chk = proposition1_oracle(student, teacher, prompt, prefix)
        devs.append(chk.deviation)
        worst = max(worst, chk.deviation)
        mismatches += chk.label_by_logit != chk.label_by_reward
    return Prop1Report(worst, mismatches, trials, PREF_TOLERANCE, time.perf_counter() - t0, devs)
