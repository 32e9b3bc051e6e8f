import json

import numpy as np
import pytest

from errors import SchemaError
from lab_standardizer import CONTINUOUS, FILL_ZERO, LabStandardizer, load_schema
from synth_cohort import (
    CATEGORICAL,
    LOGNORMAL,
    AnalyteSpec,
    GeneratorSpec,
    generate,
    load_generator_spec,
)
from system_indices import compute_indices, default_systems


@pytest.fixture(scope="module")
def default_cohort():
    return generate(load_generator_spec())


@pytest.fixture(scope="module")
def default_matrix(default_cohort):
    matrix, audit = LabStandardizer(load_schema()).process_cohort(default_cohort)
    return matrix, audit


def test_same_seed_gives_identical_csv(tmp_path):
    spec = load_generator_spec().with_overrides(n=150)
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    generate(spec).to_csv(str(first))
    generate(spec).to_csv(str(second))
    assert first.read_bytes() == second.read_bytes()
    generate(spec.with_overrides(seed=7)).to_csv(str(second))
    assert first.read_bytes() != second.read_bytes()


def test_zero_rows_rejected():
    with pytest.raises(SchemaError):
        load_generator_spec().with_overrides(n=0)


def test_cells_carry_unit_text(default_cohort):
    cr = [c for c in default_cohort.frame["Cr"] if c]
    assert all(c.endswith("μmol/L") for c in cr)
    assert any(" " in c for c in cr) and any(" " not in c for c in cr)
    pro = set(default_cohort.frame["PRO"])
    assert pro <= {"negative", "-", "neg", "阴性", "trace", "±", "+-", "弱阳性", "1+", "+", "2+", "++", "3+", "+++", ""}


def test_every_cell_parses(default_matrix):
    _, audit = default_matrix
    assert audit["rows"] == 1195
    for name, column in audit["columns"].items():
        assert column["unparseable"] == 0, name


def test_bun_is_blank_and_zero_filled(default_cohort, default_matrix):
    matrix, _ = default_matrix
    assert set(default_cohort.frame["BUN"]) == {""}
    assert np.all(matrix.column_values("BUN") == 0.0)
    assert set(matrix.zero_filled) == {"BUN", "AST", "ALT"}


def test_medians_close_to_configured(default_matrix):
    matrix, _ = default_matrix
    spec = load_generator_spec()
    for column in matrix.columns:
        if column.kind != CONTINUOUS or column.fill_policy == FILL_ZERO:
            continue
        target = spec.analyte(column.name).median
        observed = np.median(matrix.values[~matrix.missing_mask[:, matrix.column_index(column.name)],
                                           matrix.column_index(column.name)])
        assert observed == pytest.approx(target, rel=0.10), column.name


def test_target_prevalence_near_registry(default_matrix):
    matrix, _ = default_matrix
    indices = compute_indices(matrix, default_systems())
    assert abs(indices.target_multi.mean() - 0.168) <= 0.04
    assert indices.flags["lipid"].mean() > indices.flags["metabolic"].mean()


def test_analyte_validation():
    with pytest.raises(SchemaError):
        AnalyteSpec("X", "gamma")
    with pytest.raises(SchemaError):
        AnalyteSpec("X", CATEGORICAL, probabilities=(0.5, 0.5))
    with pytest.raises(SchemaError):
        AnalyteSpec("X", LOGNORMAL, sigma=0.0)
    with pytest.raises(SchemaError):
        AnalyteSpec("X", LOGNORMAL, loading=1.5)
    with pytest.raises(SchemaError):
        AnalyteSpec.from_dict({"name": "X", "distribution": LOGNORMAL, "median": -1.0})
    spec = AnalyteSpec.from_dict({"name": "X", "distribution": LOGNORMAL, "median": 62.0, "sigma": 0.3})
    assert spec.median == pytest.approx(62.0)


def test_truncation_bounds_hold():
    spec = GeneratorSpec(n=500, seed=3, analytes=(
        AnalyteSpec("A", LOGNORMAL, mu=0.0, sigma=2.0, lower=0.5, upper=2.0, decimals=4),
    ))
    values = [float(v) for v in generate(spec).frame["A"]]
    assert min(values) >= 0.5 and max(values) <= 2.0


def test_missing_rate_blanks_cells():
    spec = GeneratorSpec(n=2000, seed=1, analytes=(
        AnalyteSpec("A", LOGNORMAL, mu=1.0, sigma=0.2, missing_rate=0.25),
    ))
    blank = np.mean([c == "" for c in generate(spec).frame["A"]])
    assert blank == pytest.approx(0.25, abs=0.04)


def test_load_generator_spec_errors(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"seed": 1, "analytes": []}), encoding="utf-8")
    with pytest.raises(SchemaError):
        load_generator_spec(str(path))
    with pytest.raises(SchemaError):
        load_generator_spec(str(tmp_path / "absent.json"))
