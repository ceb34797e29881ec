import json

import numpy as np
import pytest

from corrdistill import autodiff as ad
from corrdistill.corpus import synthetic_corpus
from corrdistill.exceptions import ConfigError, ContractError
from corrdistill.losses import heuristic_lambda
from corrdistill.models import EncoderConfig, TeacherModel, init_student_from_teacher
from corrdistill.trainer import (Adam, DistortionPolicy, RunRecord, TrainingConfig, compute_loss,
                                 evaluate_dev_loss, features_for, loss_reduction, sample_views,
                                 select_checkpoint, smoothed_losses, train_distill)

TINY = EncoderConfig(input_dim=8, model_dim=8, n_blocks=12, n_heads=2, mlp_dim=8, seed=0)


@pytest.fixture(scope="module")
def corpus():
    return synthetic_corpus(6, seed=5, duration_s=0.25)


def tiny_run(corpus, **kw):
    cfg = TrainingConfig(**{"steps": 3, "batch_size": 3, "n_mels": 8, "dev_eval_every": 2, **kw})
    teacher = TeacherModel(TINY)
    student = init_student_from_teacher(teacher, seed=cfg.seed)
    return cfg, teacher, *train_distill(cfg, teacher, student, corpus, corpus[:3])


def test_policy_samples_valid_plans():
    policy = DistortionPolicy()
    rng = np.random.default_rng(0)
    plans = [policy.sample(rng, i) for i in range(400)]
    n_two = sum(len(p.specs) == 2 for p in plans)
    assert 150 < n_two < 250  # non-additive with probability 0.5
    for p in plans:
        assert p.specs[-1].additive and 10 <= p.specs[-1].snr_db < 20
        assert all(not s.additive for s in p.specs[:-1])


def test_setup_and_teacher_mode_control_teacher_views(corpus):
    clean = corpus[:3]
    only = sample_views(clean, "student_only", seed=1)
    assert all(t is c for t, c in zip(only.teacher_views, clean))
    assert all(ts == 20.0 for ts, _ in only.snr_pairs)
    inv = sample_views(clean, "both", seed=1, teacher_mode="invariant")
    assert all(t is c for t, c in zip(inv.teacher_views, clean))
    var = sample_views(clean, "both", seed=1)
    assert not any(np.array_equal(t.samples, c.samples) for t, c in zip(var.teacher_views, clean))
    # the student side is the same draw regardless of teacher mode
    assert all(np.array_equal(a.samples, b.samples) for a, b in zip(inv.student_views, var.student_views))


def test_zero_learning_rate_leaves_student_unchanged(corpus):
    teacher = TeacherModel(TINY)
    student = init_student_from_teacher(teacher)
    before = {k: v.copy() for k, v in student.named_arrays().items()}
    train_distill(TrainingConfig(steps=2, batch_size=3, n_mels=8, learning_rate=0.0), teacher, student, corpus)
    assert all(np.array_equal(before[k], v) for k, v in student.named_arrays().items())


def test_training_is_deterministic(corpus):
    *_, s1, r1 = tiny_run(corpus)
    *_, s2, r2 = tiny_run(corpus)
    assert [r.to_json() for r in r1] == [r.to_json() for r in r2]
    assert all(np.array_equal(a, s2.named_arrays()[k]) for k, a in s1.named_arrays().items())


def test_teacher_untouched_by_training(corpus):
    _, teacher, _, _ = tiny_run(corpus)
    fresh = TeacherModel(TINY)
    assert all(v.tobytes() == fresh.params[k].tobytes() for k, v in teacher.params.items())


def test_heuristic_weights_logged_per_step(corpus):
    *_, records = tiny_run(corpus, heuristic=True)
    for r in records:
        assert r.report["lambda_cc_eff"] == heuristic_lambda(r.teacher_snr_db)
        assert r.report["lambda_sc_eff"] == heuristic_lambda(r.student_snr_db)


@pytest.mark.parametrize("loss", ["kd", "cl", "bt_reference"])
def test_every_loss_trains_and_logs(corpus, tmp_path, loss):
    cfg = TrainingConfig(loss=loss, steps=2, batch_size=3, n_mels=8, dev_eval_every=1)
    teacher = TeacherModel(TINY)
    student = init_student_from_teacher(teacher)
    _, records = train_distill(cfg, teacher, student, corpus, corpus[:3], log_path=tmp_path / "log.jsonl",
                               checkpoint_dir=tmp_path / "ck")
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2]
    assert all(np.isfinite(r["l_total"]) and r["dev_loss"] is not None for r in rows)
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["step_000001", "step_000002"]


def test_gradient_step_decreases_loss_to_first_order(corpus):
    cfg = TrainingConfig(n_mels=8)
    teacher = TeacherModel(TINY)
    student = init_student_from_teacher(teacher)
    feats = features_for(corpus[:4], cfg)
    targets = teacher.targets(feats)
    with ad.GradientTape() as tape:
        loss, _ = compute_loss(cfg, student(feats)[1], targets)
    grads = tape.gradient(loss, student.parameters())
    eta = 1e-6
    for p, g in zip(student.parameters(), grads):
        p.data -= eta * g
    new, _ = compute_loss(cfg, student(feats)[1], targets)
    sq = sum(float((g * g).sum()) for g in grads)
    assert new.item() < loss.item()
    assert (loss.item() - new.item()) == pytest.approx(eta * sq, rel=1e-2)


def test_adam_matches_hand_update():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    g = np.array([0.5, -4.0])
    opt.step([g])
    # first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)


def test_dev_loss_ignores_order(corpus):
    cfg = TrainingConfig(n_mels=8)
    teacher = TeacherModel(TINY)
    student = init_student_from_teacher(teacher)
    a = evaluate_dev_loss(student, teacher, corpus, cfg)
    b = evaluate_dev_loss(student, teacher, corpus[::-1], cfg)
    assert a == pytest.approx(b, rel=1e-12)


def _rec(step, dev):
    return RunRecord(step, {"l_total": 0.0}, 20.0, 20.0, dev)


def test_select_checkpoint_argmin_with_earliest_tie():
    records = [_rec(1, None), _rec(2, 3.0), _rec(3, 1.0), _rec(4, 1.0), _rec(5, 2.0)]
    assert select_checkpoint(records) == 3
    assert select_checkpoint(records, {2: "a", 4: "b", 5: "c"}) == "b"
    with pytest.raises(ContractError):
        select_checkpoint([_rec(1, None)])


def test_smoothing_and_reduction():
    records = [RunRecord(i + 1, {"l_total": float(v)}, 20, 20) for i, v in enumerate([4, 4, 2, 2])]
    np.testing.assert_allclose(smoothed_losses(records, window=2), [4, 4, 3, 2])
    assert loss_reduction(records, window=2) == pytest.approx(0.5)


def test_bad_configs_rejected():
    for bad in [dict(loss="mse"), dict(setup="x"), dict(teacher_mode="y"), dict(steps=0),
                dict(additive_kinds="pink,brown"), dict(loss="cl", batch_size=1)]:
        with pytest.raises(ConfigError):
            TrainingConfig(**bad)


def test_mismatched_models_rejected(corpus):
    teacher = TeacherModel(TINY)
    student = init_student_from_teacher(TeacherModel(EncoderConfig(input_dim=8, model_dim=4, n_heads=2)))
    with pytest.raises(ContractError):
        train_distill(TrainingConfig(n_mels=8, steps=1), teacher, student, corpus)


@pytest.mark.slow
def test_cl_loss_drops_over_300_steps():
    teacher = TeacherModel(EncoderConfig())
    student = init_student_from_teacher(teacher)
    cfg = TrainingConfig(loss="cl", steps=300, dev_eval_every=300)
    _, records = train_distill(cfg, teacher, student, synthetic_corpus(64, seed=0))
    drop = loss_reduction(records)
    assert drop >= 0.30, f"smoothed loss fell {drop:.1%}"
