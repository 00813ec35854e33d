"""Synthetic tasks, exact-match evaluation and the analysis reproductions."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, InvalidParameterError
from .lm import TaskCodec, TinyLMParams, generate, sample_traces
from .numerics import jsd_value_and_grad, softmax

TASKS = ("addition", "copy", "sort")


@dataclass(frozen=True)
class TaskInstance:
    prompt: str
    answer: str
    trace: str

    @property
    def response(self) -> str:
        """Reference response text the model is trained to emit."""
        return self.trace


def addition_trace(a: int, b: int) -> str:
    """Column-wise reasoning, least significant digit first.

    >>> addition_trace(347, 285)
    '7+5=12;4+8+1=13;3+2+1=6;=632'
    """
    da, db = str(a)[::-1], str(b)[::-1]
    steps = []
    carry = 0
    for i in range(max(len(da), len(db))):
        x = int(da[i]) if i < len(da) else 0
        y = int(db[i]) if i < len(db) else 0
        total = x + y + carry
        steps.append(f"{x}+{y}" + (f"+{carry}" if carry else "") + f"={total}")
        carry = total // 10
    return ";".join(steps) + f";={a + b}"


def _has_carry(a: int, b: int) -> bool:
    while a or b:
        if a % 10 + b % 10 >= 10:
            return True
        a, b = a // 10, b // 10
    return False


def _operand(rng: np.random.Generator, digits: tuple[int, int]) -> int:
    n = int(rng.integers(digits[0], digits[1] + 1))
    return int(rng.integers(10 ** (n - 1) if n > 1 else 0, 10 ** n))


def generate_task_dataset(task: str, n: int, digits: tuple[int, int] = (2, 3),
                          seed: int = 0) -> list[TaskInstance]:
    """Deterministic synthetic items.

    Addition items at even indices are resampled until they contain at least
    one carry, so at least half of any dataset exercises carries.
    """
    if n < 1:
        raise InvalidParameterError("n must be at least 1")
    if task not in TASKS:
        raise InvalidParameterError(f"unknown task {task!r}; expected one of {TASKS}")
    lo, hi = digits
    if not 1 <= lo <= hi:
        raise InvalidParameterError("digit range must satisfy 1 <= lo <= hi")
    rng = np.random.default_rng([seed, TASKS.index(task)])
    items = []
    for i in range(n):
        if task == "addition":
            while True:
                a, b = _operand(rng, digits), _operand(rng, digits)
                if i % 2 or _has_carry(a, b):
                    break
            items.append(TaskInstance(f"{a}+{b}=", str(a + b), addition_trace(a, b)))
        else:
            length = int(rng.integers(lo, hi + 1))
            s = "".join(str(d) for d in rng.integers(0, 10, length))
            ans = s if task == "copy" else "".join(sorted(s))
            items.append(TaskInstance(f"{task[0]}:{s}=", ans, ans))
    return items


def save_dataset(path, items: Iterable[TaskInstance]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for it in items:
            fh.write(json.dumps({"prompt": it.prompt, "answer": it.answer, "trace": it.trace}) + "\n")
    return path


def load_dataset(path) -> list[TaskInstance]:
    items = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items.append(TaskInstance(rec["prompt"], rec["answer"], rec.get("trace", rec["answer"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad dataset record ({exc})") from None
    return items


def extract_answer(text: str) -> str:
    """Everything after the last '='."""
    return text.rsplit("=", 1)[-1]


def predict(params: TinyLMParams, prompts: Sequence[str], codec: TaskCodec,
            max_len: int = 64) -> list[str]:
    """Greedy responses as text."""
    enc = [codec.encode_prompt(p) for p in prompts]
    out = generate(params, enc, 0.0, max_len, np.random.default_rng(0))
    return [codec.decode(r) for r in out]


def evaluate_exact_match(params: TinyLMParams, dataset: Sequence[TaskInstance],
                         codec: TaskCodec | None = None, max_len: int = 64,
                         batch_size: int = 256) -> float:
    """Fraction of items whose greedy answer equals the reference string."""
    if not dataset:
        raise InvalidInputError("dataset is empty")
    codec = codec or TaskCodec()
    correct = 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        responses = predict(params, [it.prompt for it in chunk], codec, max_len)
        correct += sum(extract_answer(it.prompt + r) == it.answer for it, r in zip(chunk, responses))
    return correct / len(dataset)


# -- entropy profile ---------------------------------------------------------

@dataclass(frozen=True)
class EntropyProfile:
    mean: np.ndarray
    counts: np.ndarray

    @property
    def max_position(self) -> int:
        return int(self.mean.size)

    @property
    def peak(self) -> int:
        return int(np.argmax(self.mean))

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["position", "mean_entropy", "count"])
            for i, (m, c) in enumerate(zip(self.mean, self.counts)):
                w.writerow([i, repr(float(m)), int(c)])
        return path


def profile_from_entropies(rows: Iterable[np.ndarray]) -> EntropyProfile:
    rows = [np.asarray(r, dtype=float) for r in rows]
    if not rows:
        raise InvalidInputError("no traces")
    T = max(r.size for r in rows)
    sums = np.zeros(T)
    counts = np.zeros(T, dtype=np.int64)
    for r in rows:
        sums[:r.size] += r
        counts[:r.size] += 1
    return EntropyProfile(sums / np.maximum(counts, 1), counts)


def entropy_profile(params: TinyLMParams, prompts: Sequence[np.ndarray], n: int, seed: int = 0,
                    temperature: float = 1.0, max_len: int = 64) -> EntropyProfile:
    """Mean student entropy by response position over ``n`` sampled traces."""
    if n < 1:
        raise InvalidParameterError("n must be at least 1")
    if not prompts:
        raise InvalidInputError("no prompts")
    chosen = [prompts[i % len(prompts)] for i in range(n)]
    traces = sample_traces(params, chosen, temperature, max_len, np.random.default_rng(seed))
    return profile_from_entropies(t.student_entropy for t in traces)


# -- mode-seeking vs mode-covering ------------------------------------------

def bump_logits(mu: float, log_sigma: float, n_bins: int) -> np.ndarray:
    """Logits of a discretised Gaussian bump over ``n_bins`` bins."""
    x = np.arange(n_bins, dtype=float)
    return -0.5 * ((x - mu) / np.exp(log_sigma)) ** 2


def bimodal_teacher(n_bins: int = 40, centers: tuple[float, float] = (10.0, 30.0),
                    width: float = 2.0, weights: tuple[float, float] = (0.5, 0.5)) -> np.ndarray:
    x = np.arange(n_bins, dtype=float)
    p = sum(w * np.exp(-0.5 * ((x - c) / width) ** 2) for c, w in zip(centers, weights))
    return p / p.sum()


@dataclass
class ModeDemoResult:
    teacher: np.ndarray
    student: np.ndarray
    mode_mass: tuple[float, ...]
    beta: float
    mu: float
    sigma: float
    objective: float
    converged: bool
    history: list = field(default_factory=list)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "teacher_mass", "student_mass"])
            for i, (t, s) in enumerate(zip(self.teacher, self.student)):
                w.writerow([i, repr(float(t)), repr(float(s))])
        return path

    def summary(self) -> dict:
        d = asdict(self)
        for k in ("teacher", "student", "history"):
            d.pop(k)
        return d


def _mode_neighborhoods(teacher: np.ndarray, radius: int) -> list[np.ndarray]:
    """Bins within ``radius`` of each local maximum of the teacher."""
    p = teacher
    peaks = [i for i in range(p.size)
             if (i == 0 or p[i] > p[i - 1]) and (i == p.size - 1 or p[i] >= p[i + 1])]
    idx = np.arange(p.size)
    return [np.abs(idx - c) <= radius for c in peaks]


def _fit_bump(p: np.ndarray, beta: float, theta: np.ndarray, steps: int):
    """Backtracking gradient descent on (mu, log sigma); only improving steps are taken."""
    n = p.size
    # JSD(beta) shrinks like beta*(1-beta) near either end; undo that for step sizes
    scale = 1.0 / (beta * (1.0 - beta))

    def objective(th):
        z = bump_logits(th[0], th[1], n)
        val, gz = jsd_value_and_grad(p, z, beta)
        sigma = np.exp(th[1])
        dx = np.arange(n) - th[0]
        return val, np.array([np.sum(gz * dx) / sigma ** 2, np.sum(gz * dx ** 2) / sigma ** 2])

    lo = np.array([-float(n), np.log(0.2)])
    hi = np.array([2.0 * n, np.log(4.0 * n)])
    val, grad = objective(theta)
    history = [val]
    lr = 1.0
    converged = False
    for _ in range(steps):
        while lr > 1e-14:
            cand = np.clip(theta - lr * scale * grad, lo, hi)
            cv, cg = objective(cand)
            if cv < val:
                break
            lr *= 0.5
        else:
            converged = True
            break
        theta, val, grad = cand, cv, cg
        history.append(val)
        lr *= 1.5
    return theta, val, converged, history


def mode_fit_demo(teacher, beta: float, steps: int = 5000, seed: int = 0,
                  radius: int = 6, restarts: int = 4) -> ModeDemoResult:
    """Fit a single bump to ``teacher`` by minimising JSD(beta)(teacher || student).

    The student family is a discretised Gaussian with free centre and width.
    Each of ``restarts`` seeded starting points is descended independently
    and the lowest objective wins; mass is then reported inside each teacher
    mode's +-``radius`` neighbourhood.
    """
    p = np.asarray(teacher, dtype=float)
    if p.ndim != 1 or p.size < 3 or abs(p.sum() - 1) > 1e-9 or np.any(p < 0):
        raise InvalidInputError("teacher must be a probability vector over at least 3 bins")
    if not 0 < beta < 1:
        raise InvalidParameterError("beta must lie in (0, 1)")
    n = p.size
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        start = np.array([rng.uniform(0, n - 1), np.log(rng.uniform(n / 40.0, n / 8.0))])
        fit = _fit_bump(p, beta, start, steps)
        if best is None or fit[1] < best[1]:
            best = fit
    theta, val, converged, history = best
    q = softmax(bump_logits(theta[0], theta[1], n))
    masses = tuple(float(q[m].sum()) for m in _mode_neighborhoods(p, radius))
    return ModeDemoResult(p, q, masses, beta, float(theta[0]), float(np.exp(theta[1])),
                          float(val), converged, history)
