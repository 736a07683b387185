import json

import numpy as np
import pytest

from dmeta import data as D
from dmeta import evaluation as E
from dmeta import model
from dmeta import rng as rngs
from dmeta.errors import InvalidArgumentError

from tests.conftest import random_params, small_spec


@pytest.fixture
def tiny():
    return model.init_params(small_spec(channels=4), rngs.stream(0, "init"))


@pytest.fixture
def task(glyphs):
    return D.sample_class_task(glyphs.evaluation, 5, 5, 2, np.random.default_rng(0))


def permuted(task, perm):
    perm = np.asarray(perm)
    return D.EvalTask(task.support_images, perm[task.support_labels], task.query_images, perm[task.query_labels],
                      task.classes, task.support_indices, task.query_indices)


def test_zero_steps_only_zeroes_head(task):
    p = random_params(small_spec(channels=4))
    tuned = E.fine_tune(p, task, steps=0)
    for n in p.body_names:
        np.testing.assert_array_equal(tuned[n], p[n])
    assert all(np.all(tuned[n] == 0) for n in p.head_names)


def test_fine_tune_reaches_full_support_accuracy_on_separable_task():
    # Each class is a flat image of its own intensity, so one feature already separates them.
    levels = np.linspace(0.1, 0.9, 5, dtype=np.float32)
    labels = np.repeat(np.arange(5), 3)
    imgs = np.broadcast_to(levels[labels][:, None, None, None], (15, 1, 28, 28)).copy()
    imgs += np.random.default_rng(0).normal(0, 0.01, imgs.shape).astype(np.float32)
    t = D.EvalTask(imgs, labels, imgs[:5], np.arange(5), np.arange(5), np.arange(15), np.arange(5))
    p = model.init_params(small_spec(channels=8), rngs.stream(0, "init"))
    tuned = E.fine_tune(p, t, steps=150, lr=1e-2)
    assert np.all(model.predict(tuned, imgs) == labels)


def test_fine_tune_deterministic(tiny, task):
    assert E.fine_tune(tiny, task, steps=5, seed=3).equals(E.fine_tune(tiny, task, steps=5, seed=3))


def test_fine_tune_rejects_head_width(task):
    with pytest.raises(InvalidArgumentError):
        E.fine_tune(model.init_params(small_spec(4, 4), rngs.stream(0, "init")), task)


def test_zero_head_without_tuning_is_chance(tiny, glyphs):
    report = E.evaluate(tiny, glyphs.evaluation, N=5, K=1, Q=3, num_tasks=10, steps=0)
    assert report.mean_accuracy == 0.2
    assert all(a == 0.2 for a in report.per_task)


def test_report_mean_matches_tasks_and_input_untouched(tiny, glyphs):
    before = tiny.copy()
    report = E.evaluate(tiny, glyphs.evaluation, N=5, K=2, Q=2, num_tasks=6, steps=3, mode="x")
    assert tiny.equals(before)
    assert report.num_tasks == len(report.per_task) == 6
    assert report.mean_accuracy == pytest.approx(np.mean(report.per_task), abs=1e-12)
    d = json.loads(report.to_json(include_tasks=True))
    assert d["mode"] == "x" and len(d["per_task"]) == 6
    assert "per_task" not in json.loads(report.to_json())


def test_evaluate_deterministic_across_workers(tiny, glyphs):
    kw = dict(N=5, K=2, Q=1, num_tasks=4, steps=3, seed=9)
    a = E.evaluate(tiny, glyphs.evaluation, **kw)
    b = E.evaluate(tiny, glyphs.evaluation, workers=2, **kw)
    assert a.per_task == b.per_task


def test_summarize_confidence():
    r = E.summarize([0.0, 1.0, 1.0, 0.0], "m", 5, 1)
    assert r.mean_accuracy == 0.5
    assert r.confidence_95 == pytest.approx(1.96 * np.std([0, 1, 1, 0], ddof=1) / 2)


@pytest.mark.slow
def test_label_permutation_invariance(glyphs):
    p = model.init_params(small_spec(channels=8), rngs.stream(1, "init"))
    perm = [3, 0, 4, 1, 2]
    plain, relabelled = [], []
    for i in range(100):
        t = D.sample_class_task(glyphs.evaluation, 5, 5, 1, rngs.stream(2, f"t{i}"))
        plain.append(E.task_accuracy(p, t, steps=10, seed=i))
        relabelled.append(E.task_accuracy(p, permuted(t, perm), steps=10, seed=i))
    assert abs(np.mean(plain) - np.mean(relabelled)) <= 0.01


@pytest.mark.slow
def test_confidence_shrinks_with_task_count(glyphs):
    p = model.init_params(small_spec(channels=4), rngs.stream(1, "init"))
    kw = dict(N=5, K=1, Q=1, steps=5)
    small = E.evaluate(p, glyphs.evaluation, num_tasks=100, seed=1, **kw)
    large = E.evaluate(p, glyphs.evaluation, num_tasks=400, seed=2, **kw)
    assert 1.8 <= small.confidence_95 / large.confidence_95 <= 2.2


@pytest.mark.slow
def test_fresh_glyph_classes_are_learnable():
    splits = D.synth_glyph_splits(5, 20, 20, seed=11)
    p = model.init_params(small_spec(channels=32), rngs.stream(0, "init"))
    report = E.evaluate(p, splits.evaluation, N=5, K=5, Q=5, num_tasks=20, seed=4)
    assert report.mean_accuracy > 0.6


# -- logits export ----------------------------------------------------------------------------


def test_export_logits_rows_and_argmax(tmp_path, task):
    p = random_params(small_spec(channels=4), 2)
    out = E.export_logits(p, task, tmp_path / "l.csv", task_id=7)
    true, pred, logits = E.read_logits(out)
    assert len(true) == 5 * 2
    np.testing.assert_array_equal(pred, np.argmax(logits, axis=1))
    np.testing.assert_array_equal(true, task.query_labels)
    want = model.forward(p, task.query_images, "eval").data
    np.testing.assert_allclose(logits, want, atol=1e-6)
    assert (tmp_path / "l.csv").read_text().splitlines()[1].startswith("7,")
