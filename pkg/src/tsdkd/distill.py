"""Training loops: supervised pretraining, on/off-policy distillation, metrics."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .errors import InvalidInputError, InvalidParameterError
from .harness import TaskInstance, evaluate_exact_match, generate_task_dataset
from .lm import (
    END,
    STUDENT,
    TEACHER,
    ModelDims,
    TaskCodec,
    TinyLMParams,
    Trace,
    annotate_with_teacher,
    backward,
    init_params,
    response_logits,
    sample_traces,
    save_params,
    scatter_grads,
)
from .losses import LossBreakdown, baseline_loss, total_loss
from .selection import CoverageHistory

log = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay over a dict of arrays."""

    def __init__(self, params: TinyLMParams, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def step(self, params: TinyLMParams, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.arrays.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at(step: int, total: int, base: float, warmup_ratio: float = 0.1) -> float:
    """Linear warmup then cosine decay to zero."""
    if total <= 0:
        return base
    warm = int(math.ceil(warmup_ratio * total))
    if step < warm:
        return base * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def teacher_dims(cfg: TrainConfig, vocab_size: int) -> ModelDims:
    return ModelDims(vocab_size, cfg.context, cfg.teacher_layers, cfg.teacher_d_model, cfg.teacher_heads)


def student_dims(cfg: TrainConfig, vocab_size: int) -> ModelDims:
    return ModelDims(vocab_size, cfg.context, cfg.student_layers, cfg.student_d_model, cfg.student_heads)


def task_splits(cfg: TrainConfig) -> tuple[list[TaskInstance], list[TaskInstance]]:
    """Training items and a disjoint held-out set, both fixed by ``data_seed``."""
    digits = (cfg.digits_lo, cfg.digits_hi)
    train = generate_task_dataset(cfg.task, cfg.n_train, digits, cfg.data_seed)
    seen = {it.prompt for it in train}
    held = []
    offset = 1
    while len(held) < cfg.n_eval:
        extra = generate_task_dataset(cfg.task, cfg.n_eval, digits, cfg.data_seed + offset)
        held.extend(it for it in extra if it.prompt not in seen)
        seen.update(it.prompt for it in extra)
        offset += 1
        if offset > 50:
            raise InvalidParameterError("digit range too small for a held-out set disjoint from training")
    return train, held[:cfg.n_eval]


def reference_traces(items: Sequence[TaskInstance], codec: TaskCodec) -> list[Trace]:
    return [Trace(codec.encode_prompt(it.prompt), np.append(codec.encode(it.response), END),
                  origin=TEACHER) for it in items]


@dataclass
class RunRecord:
    """Append-only log of a training run."""

    config: dict
    seed: int
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    coverage_history: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    warning: str = ""
    best_exact_match: float = -1.0
    final_exact_match: float | None = None


class MetricsWriter:
    """One JSON object per line, written as soon as it is produced."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=False) + "\n")


# -- supervised ---------------------------------------------------------------

def supervised_train(params: TinyLMParams, items: Sequence[TaskInstance], steps: int, lr: float,
                     batch_size: int, seed: int, codec: TaskCodec,
                     eval_items: Sequence[TaskInstance] | None = None, threshold: float | None = None,
                     eval_every: int = 250, warmup_ratio: float = 0.1,
                     max_len: int = 64) -> tuple[TinyLMParams, RunRecord]:
    """Teacher-forced cross-entropy on reference responses.

    Stops early once held-out exact match reaches ``threshold``.
    """
    params = params.copy()
    opt = AdamW(params)
    rec = RunRecord(config={"steps": steps, "lr": lr, "batch_size": batch_size}, seed=seed)
    refs = reference_traces(items, codec)
    rng = np.random.default_rng([seed, 7])
    t0 = time.perf_counter()
    reached = threshold is None
    for step in range(steps):
        batch = [refs[i] for i in rng.integers(0, len(refs), batch_size)]
        logits, cache, shape, rows = response_logits(params, batch, return_cache=True)
        grads, total = [], 0.0
        for tr, z in zip(batch, logits):
            v, g = baseline_loss("sequence_ce", z, response=tr.response)
            total += v
            grads.append(g / len(batch))
        pg = backward(params, cache, scatter_grads(grads, shape, rows, params.dims.vocab_size))
        clip_grads(pg, 1.0)
        opt.step(params, pg, lr_at(step, steps, lr, warmup_ratio))
        rec.steps.append({"step": step, "loss": total / len(batch)})
        if eval_items and threshold is not None and (step + 1) % eval_every == 0:
            em = evaluate_exact_match(params, eval_items, codec, max_len)
            rec.evals.append({"step": step + 1, "exact_match": em})
            log.info("supervised step %d loss %.4f exact-match %.3f", step + 1, total / len(batch), em)
            if em >= threshold:
                reached = True
                break
    rec.wall_clock = time.perf_counter() - t0
    if not reached:
        rec.warning = "step budget exhausted below the exact-match threshold"
    if eval_items:
        rec.final_exact_match = evaluate_exact_match(params, eval_items, codec, max_len)
    return params, rec


def pretrain_teacher(cfg: TrainConfig, codec: TaskCodec | None = None) -> tuple[TinyLMParams, RunRecord]:
    codec = codec or TaskCodec()
    train, held = task_splits(cfg)
    params = init_params(teacher_dims(cfg, codec.vocab_size), seed=cfg.seed)
    return supervised_train(params, train, cfg.teacher_steps, cfg.teacher_lr, cfg.teacher_batch_size,
                            cfg.seed, codec, held, cfg.teacher_threshold, cfg.teacher_eval_every,
                            cfg.warmup_ratio, cfg.max_len)


def init_student(cfg: TrainConfig, codec: TaskCodec | None = None) -> tuple[TinyLMParams, RunRecord]:
    """The undistilled student: a short supervised warm start on reference data."""
    codec = codec or TaskCodec()
    train, held = task_splits(cfg)
    params = init_params(student_dims(cfg, codec.vocab_size), seed=cfg.seed + 1)
    return supervised_train(params, train, cfg.student_init_steps, cfg.student_init_lr, cfg.batch_size,
                            cfg.seed + 1, codec, None, None, warmup_ratio=cfg.warmup_ratio,
                            max_len=cfg.max_len)


# -- distillation -------------------------------------------------------------

def _mean(xs):
    return float(np.mean(xs)) if xs else None


def trace_loss(trace: Trace, student_logits: np.ndarray, cfg: TrainConfig,
               history: CoverageHistory | None):
    """Loss and logit gradient of one trace under the configured objective."""
    if cfg.objective == "tsd_kd":
        bd, g = total_loss(student_logits, trace.teacher_logits, cfg.objective_config(), history)
        return bd, g
    v, g = baseline_loss(cfg.objective, student_logits, trace.teacher_logits, trace.response, cfg.beta)
    return v, g


@dataclass
class StepResult:
    metrics: dict
    skipped: bool
    traces: list[Trace]


class Distiller:
    """Owns the student, optimizer and coverage history for one run."""

    def __init__(self, student: TinyLMParams, teacher: TinyLMParams, cfg: TrainConfig):
        if student.dims.vocab_size != teacher.dims.vocab_size:
            raise InvalidInputError("teacher and student vocabularies differ")
        self.student = student.copy()
        self.teacher = teacher
        self.cfg = cfg
        self.opt = AdamW(self.student, weight_decay=cfg.weight_decay)
        self.history = CoverageHistory()
        self.step_index = 0

    def sample(self, prompts: Sequence[np.ndarray], rng: np.random.Generator) -> list[Trace]:
        cfg = self.cfg
        on_policy = cfg.on_policy and cfg.objective != "sequence_ce"
        if on_policy:
            traces = sample_traces(self.student, prompts, cfg.temperature, cfg.max_len, rng, STUDENT)
            return annotate_with_teacher(traces, self.teacher)
        return sample_traces(self.teacher, prompts, cfg.temperature, cfg.max_len, rng, TEACHER)

    def loss_and_grads(self, traces: Sequence[Trace]):
        """Batch-mean loss record and parameter gradients for fixed traces."""
        cfg = self.cfg
        logits, cache, shape, rows = response_logits(self.student, traces, return_cache=True)
        grads, parts = [], []
        for tr, z in zip(traces, logits):
            out, g = trace_loss(tr, z, cfg, self.history)
            parts.append(out)
            grads.append(g / len(traces))
        dl = scatter_grads(grads, shape, rows, self.student.dims.vocab_size)
        return parts, dl, cache

    def train_step(self, prompts: Sequence[np.ndarray]) -> StepResult:
        cfg = self.cfg
        step = self.step_index
        rng = np.random.default_rng([cfg.seed, step, 11])
        traces = self.sample(prompts, rng)
        parts, dl, cache = self.loss_and_grads(traces)
        metrics = summarize(parts, cfg)
        lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup_ratio)
        metrics.update({"step": step, "lr": lr, "seed": cfg.seed})
        self.step_index += 1
        if not np.all(np.isfinite(dl)) or not math.isfinite(metrics["loss_total"]):
            return StepResult(metrics, True, traces)
        grads = backward(self.student, cache, dl)
        clip_grads(grads, cfg.grad_clip)
        self.opt.step(self.student, grads, lr)
        return StepResult(metrics, False, traces)


def summarize(parts, cfg: TrainConfig) -> dict:
    out = {"objective": cfg.objective}
    if parts and isinstance(parts[0], LossBreakdown):
        out.update(
            loss_indirect=_mean([p.indirect for p in parts]),
            loss_direct=_mean([p.direct for p in parts]),
            loss_em=_mean([p.entropy_min for p in parts]),
            loss_total=_mean([p.total for p in parts]),
            opener_len_mean=_mean([p.opener_len for p in parts]),
            c_used=_mean([p.coverage for p in parts]),
            gate_mean=_mean([p.gate_mean for p in parts]),
        )
    else:
        out.update(loss_indirect=None, loss_direct=None, loss_em=None,
                   loss_total=_mean([float(p) for p in parts]),
                   opener_len_mean=None, c_used=None, gate_mean=None)
    return out


METRIC_FIELDS = ("step", "objective", "loss_indirect", "loss_direct", "loss_em", "loss_total",
                 "opener_len_mean", "c_used", "gate_mean", "eval_exact_match", "lr", "seed")


def run_distillation(cfg: TrainConfig, teacher: TinyLMParams, student: TinyLMParams,
                     codec: TaskCodec | None = None, out_dir=None,
                     splits=None) -> tuple[TinyLMParams, RunRecord]:
    """Full distillation loop with periodic evaluation and checkpoints.

    Writes ``metrics.jsonl``, ``student_final.ckpt`` and ``student_best.ckpt``
    under ``out_dir`` when given. Returns the final student.
    """
    codec = codec or TaskCodec()
    train, held = splits or task_splits(cfg)
    prompts = [codec.encode_prompt(it.prompt) for it in train]
    out = Path(out_dir) if out_dir else None
    writer = MetricsWriter(out / "metrics.jsonl" if out else None)
    rec = RunRecord(config=cfg.to_dict(), seed=cfg.seed)
    dist = Distiller(student, teacher, cfg)
    order_rng = np.random.default_rng([cfg.seed, 3])
    best = None
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        idx = order_rng.integers(0, len(prompts), cfg.batch_size)
        res = dist.train_step([prompts[i] for i in idx])
        m = res.metrics
        if res.skipped:
            rec.events.append({"step": step, "event": "non-finite loss, update skipped"})
            log.warning("step %d: non-finite loss, update skipped", step)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            em = evaluate_exact_match(dist.student, held, codec, cfg.max_len)
            m["eval_exact_match"] = em
            rec.evals.append({"step": step + 1, "exact_match": em})
            if em > rec.best_exact_match:
                rec.best_exact_match = em
                best = dist.student.copy()
        else:
            m["eval_exact_match"] = None
        record = {k: m.get(k) for k in METRIC_FIELDS}
        rec.steps.append(record)
        writer.write(record)
    rec.coverage_history = list(dist.history.scores)
    rec.wall_clock = time.perf_counter() - t0
    final = dist.student
    rec.final_exact_match = rec.evals[-1]["exact_match"] if rec.evals else None
    if out is not None:
        save_params(out / "student_final.ckpt", final)
        save_params(out / "student_best.ckpt", best if best is not None else final)
    return final, rec


# -- paired comparison --------------------------------------------------------

@dataclass
class Comparison:
    """Held-out exact match per objective and seed, plus the undistilled students."""

    teacher_exact_match: float
    undistilled: dict[int, float]
    final: dict[str, dict[int, float]]
    seconds: float
    teacher_warning: str = ""

    def mean(self, objective: str) -> float:
        return float(np.mean(list(self.final[objective].values())))

    def mean_undistilled(self) -> float:
        return float(np.mean(list(self.undistilled.values())))

    def table(self) -> str:
        seeds = sorted(self.undistilled)
        lines = [f"{'student':<14}" + "".join(f"{'seed ' + str(s):>9}" for s in seeds) + f"{'mean':>9}"]
        rows = [("undistilled", self.undistilled)] + list(self.final.items())
        for name, vals in rows:
            lines.append(f"{name:<14}" + "".join(f"{vals[s]:>9.3f}" for s in seeds)
                         + f"{np.mean([vals[s] for s in seeds]):>9.3f}")
        return "\n".join(lines)


# 3-digit addition; the warm start leaves the student well short of the teacher
COMPARISON_SETTINGS = dict(
    digits_lo=3, digits_hi=3, n_eval=200,
    teacher_steps=2000, teacher_lr=2e-3, teacher_batch_size=64, teacher_eval_every=250,
    student_init_steps=800, student_init_lr=3e-3,
    steps=300, eval_every=100, lr=3e-4,
)


def comparison_config(**changes) -> TrainConfig:
    return TrainConfig(**{**COMPARISON_SETTINGS, **changes})


def compare_objectives(cfg: TrainConfig, objectives: Sequence[str] = ("tsd_kd", "gkd_jsd", "forward_kl"),
                       seeds: Sequence[int] = (0, 1, 2), teacher: TinyLMParams | None = None,
                       out_dir=None) -> Comparison:
    """Teacher, then per seed one warm-started student distilled under each objective.

    Every objective for a given seed starts from the same undistilled student,
    so differences are paired. The reported score is final-step held-out
    exact match.
    """
    codec = TaskCodec()
    splits = task_splits(cfg)
    out = Path(out_dir) if out_dir else None
    t0 = time.perf_counter()
    warning = ""
    if teacher is None:
        teacher, trec = pretrain_teacher(cfg, codec)
        warning = trec.warning
        if out is not None:
            save_params(out / "teacher.ckpt", teacher)
    teacher_em = evaluate_exact_match(teacher, splits[1], codec, cfg.max_len)
    undistilled, final = {}, {obj: {} for obj in objectives}
    for seed in seeds:
        base_cfg = cfg.replace(seed=seed)
        student, _ = init_student(base_cfg, codec)
        undistilled[seed] = evaluate_exact_match(student, splits[1], codec, cfg.max_len)
        log.info("seed %d: undistilled exact match %.3f", seed, undistilled[seed])
        for obj in objectives:
            run_dir = out / f"{obj}_seed{seed}" if out is not None else None
            _, rec = run_distillation(base_cfg.replace(objective=obj), teacher, student, codec,
                                      run_dir, splits)
            final[obj][seed] = rec.final_exact_match
            log.info("seed %d: %s exact match %.3f", seed, obj, rec.final_exact_match)
    return Comparison(teacher_em, undistilled, final, time.perf_counter() - t0, warning)
