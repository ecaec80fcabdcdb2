import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from sslpurify.data import Dataset
from sslpurify.evaluation import (
    CSV_COLUMNS, Z_95, AttackSpec, Cell, EvalReport, compare_modes, evaluate, read_report_csv, standard_error,
    two_proportion_z,
)
from sslpurify.perturbation import PerturbationBudget
from sslpurify.reversal import ReversalConfig, ReversalMode


def test_standard_error_values():
    assert standard_error(0.877, 10_000) == pytest.approx(0.0032844, abs=1e-7)
    assert standard_error(1.0, 50) == 0.0
    with pytest.raises(ValueError):
        standard_error(0.5, 0)


def test_two_proportion_z_values():
    assert two_proportion_z(0.877, 0.866, 10_000, 10_000) == pytest.approx(2.324, abs=1e-3)
    assert abs(two_proportion_z(0.877, 0.866, 100, 100)) == pytest.approx(0.232, abs=1e-3)
    assert two_proportion_z(0.5, 0.5, 10, 10) == 0.0
    assert Z_95 == pytest.approx(1.959964, abs=1e-6)


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.integers(10, 100_000))
def test_z_is_antisymmetric_and_matches_pooled_formula(p1, p2, n):
    z = two_proportion_z(p1, p2, n, n)
    pool = (p1 + p2) / 2
    assert z == pytest.approx((p1 - p2) / math.sqrt(pool * (1 - pool) * 2 / n), rel=1e-9, abs=1e-12)
    assert two_proportion_z(p2, p1, n, n) == pytest.approx(-z, rel=1e-12, abs=1e-12)


def test_comparisons_flag_significance():
    report = EvalReport([Cell("none", "clean", 10_000, 8660), Cell("mtl", "clean", 10_000, 8770)])
    (c,) = compare_modes(report)
    assert c.difference == pytest.approx(-0.011) and c.significant
    small = EvalReport([Cell("none", "clean", 100, 87), Cell("mtl", "clean", 100, 86)])
    assert not compare_modes(small)[0].significant
    with pytest.raises(ValueError):
        compare_modes(EvalReport([Cell("a", "clean", 10, 1), Cell("b", "clean", 20, 1)]))


class Oracle(nn.Module):
    """Reads the label back out of the first pixel."""

    def forward(self, x):
        idx = (x[:, 0, 0, 0] * 255).round().long()
        return torch.nn.functional.one_hot(idx, 10).float() * 10


def oracle_data(n=40):
    labels = np.arange(n) % 10
    pixels = np.zeros((n, 3, 8, 8), np.uint8)
    pixels[:, 0, 0, 0] = labels
    return Dataset(pixels, labels, "test", 10)


def test_perfect_classifier_report(tmp_path):
    report = evaluate(Oracle(), oracle_data(), AttackSpec(kind="none"), {})
    assert report.cells == []
    rc = ReversalConfig(PerturbationBudget(0, 1, 0), ReversalMode.NONE)
    report = evaluate(Oracle(), oracle_data(), AttackSpec(kind="none"), {"none": rc})
    assert [(c.mode, c.input_condition) for c in report.cells] == [("none", "clean"), ("none", "attacked")]
    assert report.accuracy("none", "clean") == 1.0 and report.cell("none", "clean").stderr == 0.0
    paths = report.write(tmp_path)
    lines = paths["csv"].read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1] == "none,clean,40,40,1.000000,0.000000"
    back = read_report_csv(paths["csv"])
    assert back.csv_text() == report.csv_text()


def test_attack_lowers_accuracy_of_brittle_classifier():
    rc = ReversalConfig(PerturbationBudget(0, 1, 0), ReversalMode.NONE)
    torch.manual_seed(0)
    lin = nn.Sequential(nn.Flatten(), nn.Linear(192, 10))
    data = oracle_data(30)
    report = evaluate(lin, data, AttackSpec(budget=PerturbationBudget(0.1, 0.02, 10)), {"none": rc})
    assert report.accuracy("none", "attacked") <= report.accuracy("none", "clean")


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        evaluate(Oracle(), oracle_data(0), AttackSpec(kind="none"), {})


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(kind="cw")
