import hashlib
from dataclasses import replace

import numpy as np
import pytest

from rgal import data as data_module
from rgal.autodiff import Tensor
from rgal.data import AccessAudit, make_toy_dataset, pretrain_teacher
from rgal.experiments import toy_config
from rgal.io import csv_text
from rgal.metrics import MetricsReport
from rgal.optim import SGD, cosine_lr, sgd_step
from rgal.training import (
    RunState,
    TrainConfig,
    load_checkpoint,
    run_rgal,
    save_checkpoint,
    student_phase,
    synthesis_phase,
)


def digest(model) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def metrics_csv(history) -> str:
    return csv_text(MetricsReport.HEADER, [m.row() for m in history])


# optimizer and schedule

def test_sgd_examples():
    p, _ = sgd_step([np.array([1.0])], [np.zeros(1)], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p[0].tolist() == [1.0]
    p, _ = sgd_step([np.array([1.0])], [np.array([1.0])], lr=0.1, momentum=0.0)
    assert p[0].tolist() == [0.9]
    p, v = sgd_step([np.array([0.0])], [np.array([1.0])], lr=0.1, momentum=0.9)
    assert np.isclose(p[0][0], -0.1, rtol=0, atol=1e-15)
    p, v = sgd_step(p, [np.array([1.0])], lr=0.1, momentum=0.9, velocity=v)
    assert np.isclose(p[0][0], -0.29, rtol=0, atol=1e-15)
    with pytest.raises(ValueError, match="shape"):
        sgd_step([np.zeros(2)], [np.zeros(3)], lr=0.1)


def test_sgd_class_matches_function():
    t = Tensor([0.5, -1.0], requires_grad=True)
    opt = SGD([t], lr=0.05, momentum=0.9, weight_decay=5e-4)
    ref, vel = [np.array([0.5, -1.0])], None
    for g in ([1.0, 2.0], [0.3, -0.7], [0.0, 0.1]):
        t.grad = np.array(g)
        opt.step()
        ref, vel = sgd_step(ref, [np.array(g)], 0.05, 0.9, 5e-4, vel)
    assert np.array_equal(t.data, ref[0])


def test_cosine_examples():
    assert cosine_lr(0, 100, 0.1, 1e-4) == 0.1
    assert cosine_lr(100, 100, 0.1, 1e-4) == 1e-4
    assert np.isclose(cosine_lr(50, 100, 0.1, 1e-4), (0.1 + 1e-4) / 2, rtol=1e-15)
    assert cosine_lr(150, 100, 0.1, 1e-4) == 1e-4


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=63)
    with pytest.raises(ValueError):
        TrainConfig(lr_g=0.0)
    with pytest.raises(ValueError, match="clip"):
        TrainConfig(s_clip=-1.0)


def test_sgd_clipping():
    t = Tensor([0.0, 0.0], requires_grad=True)
    opt = SGD([t], lr=1.0, momentum=0.0, max_grad_norm=1.0)
    t.grad = np.array([3.0, 4.0])
    opt.step()
    np.testing.assert_allclose(t.data, [-0.6, -0.8], rtol=1e-15)
    t.grad = np.array([0.3, 0.4])
    opt.step()
    np.testing.assert_allclose(t.data, [-0.9, -1.2], rtol=1e-15)


# phases

@pytest.fixture
def state(toy_teacher):
    teacher, _, _ = toy_teacher
    return RunState.fresh(teacher, toy_config(seed=0, epochs=5))


def test_synthesis_isolation(state):
    before = (digest(state.teacher), digest(state.student), digest(state.head))
    res = synthesis_phase(state)
    assert res.batch is not None and res.batch.shape == (64, 2)
    assert (digest(state.teacher), digest(state.student), digest(state.head)) == before


def test_student_isolation(state):
    res = synthesis_phase(state)
    state.pool.update(res.batch, res.labels, res.loss)
    gen, teacher, student = digest(state.generator), digest(state.teacher), digest(state.student)
    student_phase(state)
    assert digest(state.generator) == gen and digest(state.teacher) == teacher
    assert digest(state.student) != student


def test_zero_generator_steps(toy_teacher):
    teacher, _, _ = toy_teacher
    st = RunState.fresh(teacher, toy_config(seed=0, epochs=5, g_steps=0))
    res = synthesis_phase(st)
    assert res.batch is None and len(st.pool) == 0
    fresh = st.config.model.make_generator(teacher, seed=0)
    assert digest(st.generator) != "" and len(st.generator.state_dict()) == len(fresh.state_dict())


def test_zero_student_steps(state):
    res = synthesis_phase(state)
    state.pool.update(res.batch, res.labels, res.loss)
    before = digest(state.student)
    state.config = replace(state.config, train=replace(state.config.train, s_steps=0))
    student_phase(state)
    assert digest(state.student) == before


def test_student_phase_needs_pool(state):
    with pytest.raises(ValueError, match="pool"):
        student_phase(state)


def test_zero_epochs_student_is_init(toy_teacher):
    teacher, _, _ = toy_teacher
    cfg = toy_config(seed=3, epochs=0)
    res = run_rgal(teacher, cfg)
    assert digest(res.student) == digest(RunState.fresh(teacher, cfg).student)
    assert res.history == []


def test_generator_descent_in_most_seeds(toy_teacher):
    teacher, _, _ = toy_teacher
    wins = 0
    for seed in range(5):
        st = RunState.fresh(teacher, toy_config(seed=seed, epochs=1, g_steps=50))
        res = synthesis_phase(st)
        wins += res.reports[-1].total < res.reports[0].total
    assert wins >= 4


def test_student_descent_in_most_seeds(toy_teacher):
    teacher, _, _ = toy_teacher
    wins = 0
    for seed in range(5):
        st = RunState.fresh(teacher, toy_config(seed=seed, epochs=1, s_steps=30))
        res = synthesis_phase(st)
        st.pool.update(res.batch, res.labels, res.loss)
        reports = student_phase(st)
        wins += reports[-1].total < reports[0].total
    assert wins >= 4


def test_nan_loss_aborts_with_diagnostics(toy_teacher):
    teacher, _, _ = toy_teacher
    st = RunState.fresh(teacher, toy_config(seed=0, epochs=1))
    st.teacher = type(teacher).__new__(type(teacher))
    st.teacher.__dict__.update(teacher.__dict__)
    st.teacher.layers = list(teacher.layers)
    bn = st.teacher.layers[1]
    clone = type(bn).__new__(type(bn))
    clone.__dict__.update(bn.__dict__)
    clone.running_var = np.full_like(bn.running_var, np.nan)
    st.teacher.layers[1] = clone
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match="epoch 0"):
        synthesis_phase(st)


# whole runs

def test_run_is_deterministic(toy_teacher):
    teacher, test, _ = toy_teacher
    cfg = toy_config(seed=7, epochs=3)
    a = run_rgal(teacher, cfg, eval_set=test)
    b = run_rgal(teacher, cfg, eval_set=test)
    assert metrics_csv(a.history) == metrics_csv(b.history)
    assert a.loss_rows == b.loss_rows
    assert digest(a.student) == digest(b.student)


def test_checkpoint_resume_is_bitwise(toy_teacher, tmp_path):
    teacher, test, _ = toy_teacher
    cfg = toy_config(seed=1, epochs=4)
    whole = run_rgal(teacher, cfg, eval_set=test)
    half = run_rgal(teacher, cfg, eval_set=test, stop_after=2)
    save_checkpoint(tmp_path / "c.ckpt", half.state)
    resumed = run_rgal(teacher, cfg, eval_set=test, state=load_checkpoint(tmp_path / "c.ckpt", teacher, cfg))
    assert metrics_csv(resumed.history) == metrics_csv(whole.history)
    assert resumed.loss_rows == whole.loss_rows
    assert digest(resumed.student) == digest(whole.student)


def test_checkpoint_rejects_other_config(toy_teacher, tmp_path):
    teacher, _, _ = toy_teacher
    res = run_rgal(teacher, toy_config(seed=1, epochs=1))
    save_checkpoint(tmp_path / "c.ckpt", res.state)
    with pytest.raises(ValueError, match="different configuration"):
        load_checkpoint(tmp_path / "c.ckpt", teacher, toy_config(seed=2, epochs=1))


def test_run_never_reads_training_data(monkeypatch):
    audit = AccessAudit(make_toy_dataset(50, seed=0))
    teacher = pretrain_teacher(audit, epochs=20, seed=0)
    after_pretrain = audit.reads
    assert after_pretrain > 0

    def forbidden(*a, **k):
        raise AssertionError("real data loader called during distillation")

    for name in ("make_toy_dataset", "load_dataset_csv"):
        monkeypatch.setattr(data_module, name, forbidden)
    run_rgal(teacher, toy_config(seed=0, epochs=2))
    assert audit.reads == after_pretrain


def test_metrics_row_per_epoch(toy_teacher):
    teacher, test, _ = toy_teacher
    res = run_rgal(teacher, toy_config(seed=0, epochs=2), eval_set=test)
    assert [m.epoch for m in res.history] == [0, 1]
    for m in res.history:
        assert 0 <= m.grid_agreement <= 1 and 0 <= m.top1_accuracy <= 1
        assert m.global_diversity >= 0 and m.intra_class_diversity >= 0
        assert m.inter_class_confusion <= 1
