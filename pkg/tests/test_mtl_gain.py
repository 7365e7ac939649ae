import pytest

from stalab.mtl_gain import (TABLES, DirectionError, delta_mtl, delta_mtl_relative, reference_rows, verify)


def test_nyu13_full_task():
    v = delta_mtl([0.745, 53.22], [0.747, 54.71], ["lower", "higher"])
    assert v == pytest.approx(-0.744) and round(v, 2) == -0.74


def test_cityscapes_mgda():
    v = delta_mtl([5.252, 65.09], [3.903, 63.84], ["lower", "higher"])
    assert v == pytest.approx(-0.0495)


def test_identical_metrics():
    assert delta_mtl([1.0, 2.0], [1.0, 2.0], ["lower", "higher"]) == 0.0
    assert delta_mtl_relative([1.0, 2.0], [1.0, 2.0], ["lower", "higher"]) == 0.0


def test_relative_variant():
    assert delta_mtl_relative([0.9, 55.0], [1.0, 50.0], ["lower", "higher"]) == pytest.approx(10.0)


def test_contract_errors():
    with pytest.raises(DirectionError):
        delta_mtl([1.0], [1.0], ["up"])
    with pytest.raises(DirectionError):
        delta_mtl([1.0, 2.0], [1.0], ["lower", "higher"])


def test_reference_tables():
    primary = [t for t in TABLES if t.primary]
    assert sum(len(t.rows) for t in primary) == 31
    assert reference_rows("nyuv2-13")["ISTA+UW"] == (0.734, 56.03)
    with pytest.raises(KeyError):
        reference_rows("kitti")


def test_verify_passes_and_flags_unexplained_rows():
    rep = verify()
    assert rep.passed
    bad = [e for e in rep.entries if not e.ok]
    assert {(e.table, e.method) for e in bad} == {("cityscapes-maskrcnn", "STA"), ("cityscapes-maskrcnn", "ISTA")}
    assert all(e.unexplained for e in bad)
