"""Traces, batched autoregressive sampling and teacher annotation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..errors import InvalidInputError
from ..numerics import log_softmax, token_entropy
from .codec import END, PAD
from .model import TinyLMParams, forward, forward_incremental

STUDENT = "student"
TEACHER = "teacher"

# Below this temperature sampling is replaced by argmax decoding.
GREEDY_TEMPERATURE = 1e-6


@dataclass(frozen=True)
class Trace:
    """A prompt and a response with per-position logits of both models.

    Row ``t`` of each logit array is the next-token distribution that
    produced ``response[t]``, i.e. it is conditioned on the prompt and
    ``response[:t]``.
    """

    prompt: np.ndarray
    response: np.ndarray
    student_logits: np.ndarray | None = None
    teacher_logits: np.ndarray | None = None
    student_entropy: np.ndarray | None = None
    teacher_entropy: np.ndarray | None = None
    origin: str = STUDENT

    def __len__(self) -> int:
        return int(self.response.size)

    @property
    def tokens(self) -> np.ndarray:
        return np.concatenate([self.prompt, self.response])

    def with_student(self, logits: np.ndarray) -> "Trace":
        return replace(self, student_logits=logits, student_entropy=token_entropy(logits))

    def with_teacher(self, logits: np.ndarray) -> "Trace":
        return replace(self, teacher_logits=logits, teacher_entropy=token_entropy(logits))


def pack(traces: Sequence[Trace]) -> tuple[np.ndarray, list[slice]]:
    """Right-pad prompt+response[:-1] into one batch.

    Returns the ``(B, T)`` token array and, per trace, the slice of
    positions whose logits score the response.
    """
    if not traces:
        raise InvalidInputError("empty trace batch")
    seqs = []
    rows = []
    for tr in traces:
        if tr.response.size == 0:
            raise InvalidInputError("trace has an empty response")
        seq = np.concatenate([tr.prompt, tr.response[:-1]])
        seqs.append(seq)
        start = tr.prompt.size - 1
        rows.append(slice(start, start + tr.response.size))
    T = max(s.size for s in seqs)
    tokens = np.full((len(seqs), T), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, :s.size] = s
    return tokens, rows


def response_logits(params: TinyLMParams, traces: Sequence[Trace], return_cache: bool = False):
    """Per-trace ``(L, V)`` logit rows for the responses, from one batched forward."""
    tokens, rows = pack(traces)
    out = forward(params, tokens, return_cache=return_cache)
    logits = out[0] if return_cache else out
    per_trace = [logits[i, r].copy() for i, r in enumerate(rows)]
    if return_cache:
        return per_trace, out[1], tokens.shape, rows
    return per_trace


def scatter_grads(grads: Sequence[np.ndarray], shape: tuple[int, int], rows: Sequence[slice],
                  vocab_size: int) -> np.ndarray:
    """Place per-trace logit gradients back into a ``(B, T, V)`` array."""
    out = np.zeros(shape + (vocab_size,))
    for i, (g, r) in enumerate(zip(grads, rows)):
        out[i, r] = g
    return out


def _draw(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    if temperature < GREEDY_TEMPERATURE:
        return np.argmax(logits, axis=-1)
    p = np.exp(log_softmax(logits / temperature))
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def generate(params: TinyLMParams, prompts: Sequence[np.ndarray], temperature: float,
             max_len: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Sample one response per prompt; stops at END (kept) or ``max_len``.

    Prompts of equal length are decoded together; groups are visited in
    order of first appearance and one uniform draw is consumed per active
    sequence per step, so a fixed generator state fixes the output.
    """
    out: list[np.ndarray | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, pr in enumerate(prompts):
        pr = np.asarray(pr, dtype=np.int64)
        if pr.size + max_len - 1 > params.dims.context:
            raise InvalidInputError("prompt plus max_len exceeds model context")
        groups.setdefault(pr.size, []).append(i)
    for plen, idx in groups.items():
        seq = np.stack([np.asarray(prompts[i], dtype=np.int64) for i in idx])
        done = np.zeros(len(idx), dtype=bool)
        lengths = np.zeros(len(idx), dtype=np.int64)
        step_in, kv = seq, None
        for _ in range(max_len):
            logits, kv = forward_incremental(params, step_in, kv)
            logits = logits[:, -1]
            nxt = np.full(len(idx), PAD, dtype=np.int64)
            live = ~done
            nxt[live] = _draw(logits[live], temperature, rng)
            lengths[live] += 1
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
            step_in = nxt[:, None]
            done |= nxt == END
            if done.all():
                break
        for row, i in enumerate(idx):
            out[i] = seq[row, plen:plen + lengths[row]]
    return out  # type: ignore[return-value]


def sample_traces(params: TinyLMParams, prompts: Sequence[np.ndarray], temperature: float,
                  max_len: int, rng: np.random.Generator, origin: str = STUDENT) -> list[Trace]:
    """Sample responses and attach the sampler's logits and entropies."""
    responses = generate(params, prompts, temperature, max_len, rng)
    traces = [Trace(np.asarray(p, dtype=np.int64), r, origin=origin)
              for p, r in zip(prompts, responses)]
    logits = response_logits(params, traces)
    if origin == TEACHER:
        return [t.with_teacher(z) for t, z in zip(traces, logits)]
    return [t.with_student(z) for t, z in zip(traces, logits)]


def sample_response(params: TinyLMParams, prompt, temperature: float = 1.0, max_len: int = 64,
                    seed: int = 0) -> Trace:
    return sample_traces(params, [np.asarray(prompt)], temperature, max_len,
                         np.random.default_rng(seed))[0]


def annotate_with_teacher(traces: Trace | Sequence[Trace], teacher: TinyLMParams):
    """Teacher scores the given tokens; it does not regenerate anything."""
    single = isinstance(traces, Trace)
    batch = [traces] if single else list(traces)
    for tr in batch:
        if tr.tokens.max() >= teacher.dims.vocab_size:
            raise InvalidInputError("trace uses ids outside the teacher vocabulary")
        if tr.student_logits is not None and tr.student_logits.shape[-1] != teacher.dims.vocab_size:
            raise InvalidInputError("teacher and student vocabularies differ")
    logits = response_logits(teacher, batch)
    out = [t.with_teacher(z) for t, z in zip(batch, logits)]
    return out[0] if single else out


def attach_student(traces: Sequence[Trace], student: TinyLMParams) -> list[Trace]:
    """Fill student logits (used for teacher-sampled traces)."""
    logits = response_logits(student, traces)
    return [t.with_student(z) for t, z in zip(traces, logits)]
