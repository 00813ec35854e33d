import json
import math

import numpy as np
import pytest

from tsdkd.config import ConfigError, TrainConfig, parse_config, parse_pairs
from tsdkd.distill import (
    METRIC_FIELDS,
    AdamW,
    Distiller,
    clip_grads,
    init_student,
    lr_at,
    pretrain_teacher,
    run_distillation,
    student_dims,
    task_splits,
    teacher_dims,
)
from tsdkd.errors import InvalidInputError, InvalidParameterError
from tsdkd.lm import STUDENT, TEACHER, TaskCodec, init_params
from tsdkd.lm.checkpoint import dumps
from tsdkd.losses import ObjectiveConfig, total_loss

TINY = dict(digits_lo=2, digits_hi=2, n_train=60, n_eval=8, context=32, max_len=16,
            teacher_layers=1, teacher_d_model=16, teacher_heads=2,
            student_d_model=8, student_heads=2, batch_size=4, steps=4, eval_every=2,
            teacher_steps=3, teacher_eval_every=3, student_init_steps=2)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def models(cfg, scale=0.5):
    V = TaskCodec().vocab_size
    rng = np.random.default_rng(42)
    out = []
    for dims, seed in ((student_dims(cfg, V), 0), (teacher_dims(cfg, V), 1)):
        p = init_params(dims, seed)
        for k, v in p.arrays.items():
            p.arrays[k] = v + rng.normal(0, scale, v.shape)
        out.append(p)
    return out


def prompts(cfg, n=4):
    codec = TaskCodec()
    return [codec.encode_prompt(it.prompt) for it in task_splits(cfg)[0][:n]]


# -- optimizer and schedule --------------------------------------------------

def test_lr_schedule_shape():
    lrs = [lr_at(s, 100, 1.0, 0.1) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1)
    assert lrs[9] == pytest.approx(1.0)
    assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))
    assert lrs[-1] < 1e-3
    assert lr_at(0, 10, 1.0, 0.0) == pytest.approx(1.0)


def test_adamw_zero_gradient_keeps_params():
    p = init_params(student_dims(tiny(), 16), 0)
    before = {k: v.copy() for k, v in p.arrays.items()}
    opt = AdamW(p)
    opt.step(p, {k: np.zeros_like(v) for k, v in p.arrays.items()}, 0.1)
    for k in before:
        np.testing.assert_array_equal(p.arrays[k], before[k])


def test_adamw_weight_decay_shrinks():
    p = init_params(student_dims(tiny(), 16), 0)
    w = p.arrays["tok_emb"].copy()
    AdamW(p, weight_decay=0.5).step(p, {k: np.zeros_like(v) for k, v in p.arrays.items()}, 0.1)
    np.testing.assert_allclose(p.arrays["tok_emb"], w * 0.95)


def test_adamw_first_step_is_signed_lr():
    p = init_params(student_dims(tiny(), 16), 0)
    w = p.arrays["tok_emb"].copy()
    g = {k: np.full_like(v, 3.0) for k, v in p.arrays.items()}
    AdamW(p, eps=0.0).step(p, g, 0.01)
    np.testing.assert_allclose(p.arrays["tok_emb"], w - 0.01)


def test_clip_grads():
    g = {"a": np.array([3.0, 4.0])}
    assert clip_grads(g, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(g["a"], [0.6, 0.8])
    g = {"a": np.array([0.3, 0.4])}
    clip_grads(g, 1.0)
    np.testing.assert_allclose(g["a"], [0.3, 0.4])


# -- config ------------------------------------------------------------------

def test_config_defaults_follow_table():
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.beta, cfg.top_k, cfg.coverage, cfg.em_fraction) == (0.1, 0.9, 10, 10.0, 0.1)
    assert (cfg.warmup_ratio, cfg.temperature, cfg.lr, cfg.batch_size) == (0.1, 1.0, 3e-4, 32)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nobjective = gkd_jsd\nalpha = 0.5  # inline\n\non_policy = false\n")
    cfg = parse_config(path, ["steps=7", "alpha=0.25"])
    assert cfg.objective == "gkd_jsd" and cfg.alpha == 0.25 and cfg.steps == 7 and not cfg.on_policy


def test_config_text_round_trip(tmp_path):
    cfg = TrainConfig(alpha=0.3, adaptive=True, out_dir="x y")
    path = tmp_path / "c.cfg"
    path.write_text(cfg.to_text())
    again = parse_config(path)
    assert again == cfg
    assert again.to_text() == cfg.to_text()


@pytest.mark.parametrize("line,field", [
    ("beta = 1.0", "beta"), ("alpha = -1", "alpha"), ("objective = mse", "objective"),
    ("top_k = 1", "top_k"), ("coverage = 0", "coverage"), ("student_d_model = 31", "student_d_model"),
])
def test_config_errors_name_field(line, field):
    with pytest.raises(ConfigError, match=field):
        TrainConfig(**parse_pairs([line]))


def test_config_parse_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_pairs(["colour = red"])
    with pytest.raises(ConfigError, match=":2:"):
        parse_pairs(["steps = 1", "no equals sign"])
    with pytest.raises(ConfigError, match="steps"):
        parse_pairs(["steps = many"])
    with pytest.raises(FileNotFoundError):
        parse_config("/nonexistent/run.cfg")
    assert issubclass(ConfigError, InvalidParameterError)


# -- data --------------------------------------------------------------------

def test_splits_are_disjoint_and_fixed():
    cfg = tiny()
    train, held = task_splits(cfg)
    assert len(train) == 60 and len(held) == 8
    assert not {it.prompt for it in train} & {it.prompt for it in held}
    assert task_splits(cfg) == (train, held)


def test_splits_reject_exhausted_range():
    with pytest.raises(InvalidParameterError):
        task_splits(tiny(digits_lo=1, digits_hi=1, n_train=500, n_eval=50))


# -- train step --------------------------------------------------------------

def test_lr_zero_leaves_student_unchanged():
    cfg = tiny(lr=0.0)
    s, t = models(cfg)
    d = Distiller(s, t, cfg)
    res = d.train_step(prompts(cfg))
    assert not res.skipped and math.isfinite(res.metrics["loss_total"])
    assert dumps(d.student) == dumps(s)


def test_train_step_does_not_touch_caller_student():
    cfg = tiny(lr=1e-2)
    s, t = models(cfg)
    blob = dumps(s)
    Distiller(s, t, cfg).train_step(prompts(cfg))
    assert dumps(s) == blob


@pytest.mark.parametrize("objective", ["tsd_kd", "gkd_jsd"])
def test_descent_on_fixed_batch(objective):
    cfg = tiny(objective=objective, lr=1e-4, warmup_ratio=0.0, steps=1)
    s, t = models(cfg)
    ps = prompts(cfg)
    improved = 0
    for trial in range(100):
        d = Distiller(s, t, cfg.replace(seed=trial))
        traces = d.sample(ps, np.random.default_rng([trial, 0, 11]))
        before = _batch_loss(d, traces)
        d.sample = lambda prompts, rng, traces=traces: traces
        d.train_step(ps)
        improved += _batch_loss(d, traces) < before
    assert improved >= 95


def _batch_loss(d, traces):
    parts, _, _ = d.loss_and_grads(traces)
    return float(np.mean([getattr(p, "total", p) for p in parts]))


def test_trace_origins():
    cfg = tiny()
    s, t = models(cfg)
    on = Distiller(s, t, cfg).sample(prompts(cfg), np.random.default_rng(0))
    off = Distiller(s, t, cfg.replace(on_policy=False)).sample(prompts(cfg), np.random.default_rng(0))
    assert all(tr.origin == STUDENT for tr in on)
    assert all(tr.origin == TEACHER for tr in off)
    assert all(tr.teacher_logits is not None for tr in on + off)


def test_recorded_breakdowns_are_linear():
    cfg = tiny()
    s, t = models(cfg)
    d = Distiller(s, t, cfg)
    traces = d.sample(prompts(cfg), np.random.default_rng(0))
    parts, _, _ = d.loss_and_grads(traces)
    for bd in parts:
        assert bd.total == pytest.approx(bd.alpha * bd.indirect + bd.direct + bd.entropy_min, abs=1e-12)


def test_gkd_step_reports_batch_mean_jsd():
    cfg = tiny(objective="gkd_jsd")
    s, t = models(cfg)
    d = Distiller(s, t, cfg)
    traces = d.sample(prompts(cfg), np.random.default_rng(0))
    parts, _, _ = d.loss_and_grads(traces)
    for tr, v in zip(traces, parts):
        gated, _ = total_loss(tr.student_logits, tr.teacher_logits, ObjectiveConfig(alpha=0.0))
        assert v >= 0
        assert gated.direct <= v + 1e-12  # gates never exceed one


def test_vocab_mismatch_rejected():
    cfg = tiny()
    s = init_params(student_dims(cfg, 10), 0)
    t = init_params(teacher_dims(cfg, 12), 0)
    with pytest.raises(InvalidInputError):
        Distiller(s, t, cfg)


def test_non_finite_loss_skips_update():
    cfg = tiny(objective="forward_kl", lr=1e-2)
    s, t = models(cfg)
    d = Distiller(s, t, cfg)
    d.loss_and_grads = lambda traces: ([float("inf")] * len(traces), np.full((1, 1, 1), np.nan), None)
    res = d.train_step(prompts(cfg))
    assert res.skipped
    assert dumps(d.student) == dumps(s)


# -- full runs ---------------------------------------------------------------

def test_zero_steps_returns_initialisation(tmp_path):
    cfg = tiny(steps=0)
    s, t = models(cfg)
    final, rec = run_distillation(cfg, t, s, out_dir=tmp_path)
    assert dumps(final) == dumps(s)
    assert (tmp_path / "student_final.ckpt").read_bytes() == dumps(s)
    assert rec.evals == [] and rec.final_exact_match is None


def test_run_is_byte_reproducible(tmp_path):
    cfg = tiny(objective="tsd_kd", adaptive=True)
    s, t = models(cfg)
    run_distillation(cfg, t, s, out_dir=tmp_path / "a")
    run_distillation(cfg, t, s, out_dir=tmp_path / "b")
    for name in ("metrics.jsonl", "student_final.ckpt", "student_best.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_metrics_stream_fields(tmp_path):
    cfg = tiny(objective="tsd_kd", steps=3, eval_every=2)
    s, t = models(cfg)
    _, rec = run_distillation(cfg, t, s, out_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [0, 1, 2]
    assert all(tuple(r) == METRIC_FIELDS for r in lines)
    assert [r["eval_exact_match"] is not None for r in lines] == [False, True, True]
    assert len(rec.evals) == 2 and rec.steps == lines


def test_baseline_metrics_leave_components_null(tmp_path):
    cfg = tiny(objective="reverse_kl", steps=1)
    s, t = models(cfg)
    run_distillation(cfg, t, s, out_dir=tmp_path)
    r = json.loads((tmp_path / "metrics.jsonl").read_text())
    assert r["loss_indirect"] is None and r["gate_mean"] is None and r["loss_total"] >= 0


def test_seed_changes_run(tmp_path):
    cfg = tiny(steps=2)
    s, t = models(cfg)
    a, _ = run_distillation(cfg, t, s)
    b, _ = run_distillation(cfg.replace(seed=5), t, s)
    assert dumps(a) != dumps(b)


def test_pretrain_budget_warning_and_determinism():
    cfg = tiny()
    a, rec = pretrain_teacher(cfg)
    b, _ = pretrain_teacher(cfg)
    assert dumps(a) == dumps(b)
    assert rec.warning and rec.final_exact_match < 0.99
    assert len(rec.steps) == 3


def test_zero_step_teacher_is_uniform():
    cfg = tiny(teacher_steps=0)
    t, rec = pretrain_teacher(cfg)
    assert dumps(t) == dumps(init_params(teacher_dims(cfg, TaskCodec().vocab_size), cfg.seed))
    assert rec.final_exact_match == 0.0


def test_init_student_uses_its_own_seed():
    cfg = tiny(student_init_steps=0)
    s, _ = init_student(cfg)
    assert s.dims == student_dims(cfg, TaskCodec().vocab_size)


@pytest.mark.slow
def test_copy_teacher_reaches_threshold():
    cfg = TrainConfig(task="copy", digits_lo=2, digits_hi=4, n_train=2000, n_eval=100, context=32,
                      max_len=8, teacher_layers=2, teacher_d_model=32, teacher_heads=2,
                      teacher_steps=1500, teacher_lr=3e-3, teacher_eval_every=100)
    _, rec = pretrain_teacher(cfg)
    assert rec.final_exact_match >= 0.99, rec.evals
