import numpy as np
import pytest

from stalab.allocation import AllocationMode
from stalab.synthbench import (MetricSpec, SyntheticTaskSpec, TaskDef, evaluate, export_csv, generate,
                               import_csv)
from stalab.telemetry import profile_task_angles
from stalab.training import build_model, train_seed


def test_deterministic():
    a, b = generate(SyntheticTaskSpec(n_train=50, n_eval=10), 4), generate(SyntheticTaskSpec(n_train=50, n_eval=10), 4)
    assert np.array_equal(a.train.x, b.train.x)
    assert all(np.array_equal(x, y) for x, y in zip(a.eval.targets, b.eval.targets))


def test_every_example_has_all_targets(default_ds):
    for split in (default_ds.train, default_ds.eval):
        assert len(split.targets) == default_ds.num_tasks
        assert all(len(y) == len(split) for y in split.targets)


def test_class_balance():
    ds = generate(SyntheticTaskSpec(tasks=(TaskDef("classification", 0.0, 2),), n_train=9000, n_eval=1000), 0)
    labels = np.concatenate([ds.train.targets[0], ds.eval.targets[0]])
    freq = np.bincount(labels, minlength=2) / labels.size
    assert ((freq >= 0.40) & (freq <= 0.60)).all()


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticTaskSpec(relatedness=1.5)
    with pytest.raises(ValueError):
        SyntheticTaskSpec(n_train=0)
    with pytest.raises(ValueError):
        TaskDef("classification", classes=1)


def test_metric_direction_consistency():
    with pytest.raises(ValueError):
        MetricSpec(0, "accuracy", "lower")
    assert MetricSpec(0, "rmse", "lower").sign == -1


def test_evaluate_examples():
    assert evaluate(np.array([1.0, 2.0]), np.array([1.0, 2.0]), MetricSpec(0, "rmse", "lower")) == 0.0
    assert evaluate(np.zeros(2), np.array([3.0, -3.0]), MetricSpec(0, "rmse", "lower")) == pytest.approx(3.0)
    acc = evaluate(np.array([0, 1, 0, 0]), np.array([0, 1, 1, 0]), MetricSpec(0, "accuracy", "higher"))
    assert acc == 75.0
    perfect = evaluate(np.eye(3), np.array([0, 1, 2]), MetricSpec(0, "accuracy", "higher"))
    assert perfect == 100.0
    assert evaluate(np.array([1.0]), np.array([3.0]), MetricSpec(0, "l1", "lower")) == 2.0


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(np.zeros(0), np.zeros(0), MetricSpec(0, "rmse", "lower"))


def test_export_import_round_trip(tmp_path):
    ds = generate(SyntheticTaskSpec(n_train=20, n_eval=5), 9)
    export_csv(ds, tmp_path / "d.csv")
    back = import_csv(tmp_path / "d.csv")
    assert back.spec == ds.spec and back.seed == 9
    assert np.array_equal(back.train.x, ds.train.x)
    for a, b in zip(back.eval.targets, ds.eval.targets):
        assert np.array_equal(a, b)


def test_duplicate_tasks_share_targets():
    ds = generate(SyntheticTaskSpec(tasks=(TaskDef("regression"), TaskDef("regression")), duplicate_tasks=True,
                                    n_train=30, n_eval=5), 0)
    assert np.array_equal(ds.train.targets[0], ds.train.targets[1])


def test_learnable_at_full_relatedness_without_noise():
    # Plain gradient descent needs a longer, faster schedule than the 5,000-step
    # default to reach this level (the default budget stops near 0.12).
    ds = generate(SyntheticTaskSpec(relatedness=1.0, tasks=(TaskDef("regression", 0.0),)), 0)
    log = train_seed(ds, seed=0, mode=AllocationMode("FT"), steps=20_000, lr=0.2, batch_size=32,
                     hidden=(32,), activation="tanh", log_rows=False)
    assert log.metrics[0] <= 0.05


def test_relatedness_raises_gradient_alignment():
    wins = 0
    for seed in range(10):
        mean_abs_cos = []
        for rho in (1.0, 0.0):
            ds = generate(SyntheticTaskSpec(relatedness=rho), seed)
            prof = profile_task_angles(build_model(ds, (32,), "relu", seed), ds, "FT", epochs=1, seed=seed)
            mean_abs_cos.append(np.mean(np.abs(np.cos(np.radians(prof.angles)))))
        wins += mean_abs_cos[0] > mean_abs_cos[1]
    assert wins > 5
