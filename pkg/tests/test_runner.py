import csv
import json

import numpy as np
import pytest

from stalab import config, runner
from stalab.allocation import AllocationMode, plan_step
from stalab.config import ConfigError
from stalab.mtl_gain import delta_mtl
from stalab.rng import stream
from stalab.synthbench import Split, SyntheticTaskSpec, TaskDef, generate
from stalab.training import build_model, compute_step, predict, train_seed
from stalab.model import TaskLossSpec

SMALL = {"benchmark": {"n_train": 256, "n_eval": 128}, "optimizer": {"steps": 40}, "seeds": [0, 1]}


def small_cfg(**over):
    d = json.loads(json.dumps(SMALL))
    for k, v in over.items():
        if isinstance(v, dict):
            d.setdefault(k, {}).update(v)
        else:
            d[k] = v
    return config.from_dict(d)


def test_hand_computed_step_loss():
    ds = generate(SyntheticTaskSpec(tasks=(TaskDef("regression"), TaskDef("regression")), n_train=2, n_eval=1), 0)
    model = build_model(ds, (4,), "tanh", 0)
    preds = predict(model, ds.train.x)
    losses = np.array([[1.0, 2.0], [3.0, 4.0]])  # example x task
    split = Split(ds.train.x, [preds[t] + losses[:, t:t + 1] for t in range(2)])
    specs = [TaskLossSpec(0, "l1"), TaskLossSpec(1, "l1")]
    alloc = plan_step(AllocationMode("FT"), 2, 2, stream(0, 3, 0))[0]
    res = compute_step(model, split, np.arange(2), alloc, specs, np.ones(2))
    assert res.total == pytest.approx(2.5)
    res = compute_step(model, split, np.arange(2), alloc, specs, np.ones(2), normalization="sum")
    assert res.total == pytest.approx(5.0)


def _traj(ds, mode, seed):
    log = train_seed(ds, seed=seed, mode=mode, steps=15, lr=0.05, batch_size=16, eval_every=5)
    return [sorted(r.items()) for r in log.rows], log.model.params.checksum()


def test_full_subsets_reduce_to_full_training(small_ds):
    ft = _traj(small_ds, AllocationMode("FT"), 0)
    T = small_ds.num_tasks
    assert _traj(small_ds, AllocationMode("STA", T), 0) == ft
    assert _traj(small_ds, AllocationMode("ISTA", T), 0) == ft


def test_ista_runs_t_updates_per_batch(small_ds):
    log = train_seed(small_ds, seed=0, mode=AllocationMode("ISTA", 1), steps=7, lr=0.05, batch_size=16)
    assert log.updates == 7 * small_ds.num_tasks


def test_equal_steps_matches_ista_update_count():
    a = runner.train(small_cfg(allocation={"mode": "FT", "k": 1}, equal_steps=True, seeds=[0]))
    b = runner.train(small_cfg(allocation={"mode": "ISTA", "k": 1}, seeds=[0]))
    assert a.runs[0]["updates"] == b.runs[0]["updates"] == 80


def test_metrics_csv_is_deterministic(tmp_path):
    cfg = small_cfg(eval_every=10)
    for d in ("a", "b"):
        runner.write_report(tmp_path / d, runner.train(cfg), figures=False)
    for s in cfg.seeds:
        name = f"metrics_seed{s}.csv"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "metrics_seed0.csv").read_text().splitlines()[0]
    assert header.startswith("step,loss_total,loss_0,loss_1")


def test_delta_is_recomputable_from_report(tmp_path):
    rep = runner.train(small_cfg())
    runner.write_report(tmp_path, rep, figures=False)
    doc = json.loads((tmp_path / "report.json").read_text())
    base = json.loads((tmp_path / "baselines.json").read_text())
    tasks = sorted(int(t) for t in doc["mean_metrics"])
    m = [doc["mean_metrics"][str(t)] for t in tasks]
    b = [base["metrics"][str(t)] for t in tasks]
    d = [base["directions"][str(t)] for t in tasks]
    assert abs(delta_mtl(m, b, d) - doc["delta_mtl"]) <= 1e-9


def test_compare_rows(tmp_path):
    ft = small_cfg(name="ft")
    rows, _ = runner.compare([ft, ft], tmp_path, figures=False)
    assert len(rows) == 3
    base = [r for r in rows if r.name == runner.BASELINE_ROW][0]
    assert base.delta_mtl == 0.0
    same = [r for r in rows if r.name == "ft"]
    assert same[0].delta_mtl == same[1].delta_mtl and same[0].metrics == same[1].metrics
    assert (tmp_path / "ft").is_dir() and (tmp_path / "ft-2").is_dir()
    with open(tmp_path / "comparison.csv") as fh:
        assert len(list(csv.reader(fh))) == 4


def test_compare_rejects_mixed_benchmarks():
    with pytest.raises(ConfigError):
        runner.compare([small_cfg(), small_cfg(benchmark={"relatedness": 0.1})], None)


def test_profile_outputs(tmp_path):
    cfg = small_cfg(profile={"epochs": 1})
    a = runner.profile(cfg, "task-angles", tmp_path / "a", figures=False)
    runner.profile(cfg, "task-angles", tmp_path / "b", figures=False)
    name = "task_angles_STA_seed0.csv"
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert np.array_equal(a.histograms["FT"].edges, a.histograms["STA"].edges)
    s = runner.profile(cfg, "step-angles", tmp_path / "c", figures=False)
    assert set(s.histograms) == {"FT", "ISTA"}


def test_profile_on_duplicated_tasks_is_all_zero():
    cfg = small_cfg(benchmark={"tasks": [{"kind": "regression"}, {"kind": "regression"}], "duplicate_tasks": True},
                    profile={"epochs": 1, "mode": "FT"})
    h = runner.profile(cfg, "task-angles").histograms["FT"]
    assert h.count > 0 and h.counts[0] == h.count


def test_missing_checkpoint(tmp_path):
    cfg = small_cfg(model={"checkpoint": str(tmp_path / "nope.json")})
    with pytest.raises(FileNotFoundError):
        runner.profile(cfg, "task-angles")


def test_baselines_round_trip(tmp_path):
    b = runner.single_task_baselines(small_cfg(), seeds=[0])
    runner.write_baselines(tmp_path, b)
    back = runner.read_baselines(tmp_path / "baselines.json")
    assert back.metrics == b.metrics and back.directions == b.directions
