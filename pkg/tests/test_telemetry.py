import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stalab.synthbench import SyntheticTaskSpec, TaskDef, generate
from stalab.telemetry import (AngleHistogram, UndefinedAngleError, angle_between, profile_step_angles,
                              profile_task_angles, step_angles_from_gradients, write_angles_csv,
                              write_histogram_json)
from stalab.training import build_model


@pytest.mark.parametrize("a,b,deg", [((1, 0), (0, 1), 90.0), ((1, 1), (2, 2), 0.0), ((1, 2), (2, 1), 36.8699)])
def test_angle_examples(a, b, deg):
    assert angle_between(a, b) == pytest.approx(deg, abs=1e-4)


def test_zero_vector():
    with pytest.raises(UndefinedAngleError):
        angle_between((0, 0), (1, 0))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_angle_symmetry_and_scale(a, b):
    a, b = np.array(a), np.array(b)
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    x = angle_between(a, b)
    assert 0.0 <= x <= 180.0
    assert abs(x - angle_between(b, a)) <= 1e-9
    assert abs(x - angle_between(2 * a, b)) <= 1e-6


def test_histogram_invariants():
    h = AngleHistogram.from_samples([0.0, 44.9, 90.0, 179.9, 180.0])
    assert len(h.edges) == 37 and h.counts.sum() == h.count == 5
    assert 0 <= h.mean <= 180
    assert h.mass_between(85, 95) == pytest.approx(0.2)


def test_duplicated_tasks_give_zero_angles():
    spec = SyntheticTaskSpec(n_train=64, n_eval=16, tasks=(TaskDef("regression"), TaskDef("regression")),
                             duplicate_tasks=True)
    ds = generate(spec, 0)
    prof = profile_task_angles(build_model(ds, (8,), "tanh", 0), ds, "FT", epochs=1)
    assert prof.samples and max(prof.angles) < 1e-5


def test_one_example_under_sta_has_no_samples():
    ds = generate(SyntheticTaskSpec(n_train=1, n_eval=1), 0)
    prof = profile_task_angles(build_model(ds, (4,), "tanh", 0), ds, "STA", epochs=2, batch_size=1)
    assert prof.histogram().count == 0 and prof.skipped == 2


def test_profiling_does_not_change_parameters(small_ds):
    m = build_model(small_ds, (8,), "tanh", 0)
    before = m.params.checksum()
    profile_task_angles(m, small_ds, "STA", epochs=1)
    profile_step_angles(m, small_ds, "ISTA", epochs=1)
    assert m.params.checksum() == before


def test_profiles_are_reproducible(small_ds):
    m = build_model(small_ds, (8,), "tanh", 0)
    a = profile_task_angles(m, small_ds, "STA", epochs=1, seed=2).samples
    b = profile_task_angles(m, small_ds, "STA", epochs=1, seed=2).samples
    assert a == b


def test_step_angles_hook():
    g = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.0, 1.0])]
    assert step_angles_from_gradients(g) == [(1, 90.0), (2, 0.0)]
    assert step_angles_from_gradients(g[:1]) == []


def test_ista_profile_has_two_substeps_per_batch(small_ds):
    m = build_model(small_ds, (8,), "tanh", 0)
    ft = profile_step_angles(m, small_ds, "FT", epochs=1)
    ista = profile_step_angles(m, small_ds, "ISTA", epochs=1)
    assert len(ista.samples) == 2 * len(ft.samples) + 1


def test_mode_validation(small_ds):
    m = build_model(small_ds, (8,), "tanh", 0)
    with pytest.raises(ValueError):
        profile_task_angles(m, small_ds, "ISTA")
    with pytest.raises(ValueError):
        profile_step_angles(m, small_ds, "STA")


def test_outputs(tmp_path, small_ds):
    m = build_model(small_ds, (8,), "tanh", 0)
    prof = profile_task_angles(m, small_ds, "FT", epochs=1)
    write_angles_csv(tmp_path / "a.csv", prof)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "kind,step,angle_deg" and lines[1].startswith("task_pair,")
    write_histogram_json(tmp_path / "h.json", prof.histogram())
    import json
    doc = json.loads((tmp_path / "h.json").read_text())
    assert {"edges", "counts", "mean", "std"} <= set(doc)
