import json
import os

import numpy as np
import pandas as pd
import pytest

from errors import (
    AllMissingColumnError,
    CohortFileNotFoundError,
    CohortFormatError,
    HeaderNotFoundError,
    SchemaError,
)
from lab_standardizer import (
    FILL_ZERO,
    SEMIQUANT,
    CellStatus,
    ColumnSchema,
    FeatureMatrix,
    LabSchema,
    LabStandardizer,
    apply_plausibility,
    format_quantity,
    impute,
    load_cohort,
    load_feature_matrix,
    load_schema,
    normalize_headers,
    parse_quantity,
    parse_semiquant,
)

QUANTITY_CASES = [
    ("77 μmol/L", 77.0),
    ("4.20 ×10⁹ /L", 4.20),
    ("4.20×10⁹/L", 4.20),
    ("-0.5 mmol/L", -0.5),
    ("+3.5", 3.5),
    (".75 g/L", 0.75),
    ("139g/L", 139.0),
    ("  62.0  ", 62.0),
    ("1816.0 μmol/L", 1816.0),
    ("5.", 5.0),
    ("HCT 0.42 L/L", 0.42),
    ("0.42\xa0L/L", 0.42),
]

# None of these should produce a number
ADVERSARIAL_STRINGS = [
    "",
    "   ",
    "\t\n",
    "μmol/L",
    "×10⁹ /L",
    "⁹",
    "²³",
    "nan",
    "NaN",
    "inf",
    "-inf",
    "Infinity",
    "N/A",
    "--",
    ".",
    "-",
    "+",
    "-.",
    "negative",
    "trace",
    "１２３",
    "٣٤",
    "abc/L",
    "<>",
    "E+",
    "??",
]


@pytest.mark.parametrize("raw,expected", QUANTITY_CASES)
def test_parse_quantity_golden(raw, expected):
    assert parse_quantity(raw) == pytest.approx(expected, abs=0)


@pytest.mark.parametrize("raw", ADVERSARIAL_STRINGS)
def test_parse_quantity_adversarial_is_missing(raw):
    assert parse_quantity(raw) is None


def test_parse_quantity_none_is_missing():
    assert parse_quantity(None) is None


def test_parse_quantity_idempotent_on_formatted_output():
    """parse(format(parse(s))) == parse(s)"""
    rng = np.random.default_rng(7)
    for value in rng.lognormal(0.0, 3.0, 200).tolist() + [0.0, -1.25, 1e-7, 123456.789]:
        raw = f"{value!r} mmol/L"
        first = parse_quantity(raw)
        assert first is not None
        assert parse_quantity(format_quantity(first)) == first


def test_parse_quantity_digit_free_strings():
    rng = np.random.default_rng(11)
    alphabet = list("abcxyzμ×⁹/ L%-+.()[]?!阴性")
    for _ in range(300):
        length = int(rng.integers(0, 12))
        raw = ''.join(rng.choice(alphabet, size=length))
        assert parse_quantity(raw) is None


SEMIQUANT_CASES = [
    ("negative", 0.0), ("-", 0.0), ("neg", 0.0), ("阴性", 0.0), ("NEGATIVE", 0.0), (" Neg ", 0.0),
    ("trace", 0.5), ("±", 0.5), ("+-", 0.5), ("弱阳性", 0.5), ("Trace", 0.5),
    ("1+", 1.0), ("+", 1.0), ("1 +", 1.0),
    ("2+", 2.0), ("++", 2.0),
    ("3+", 3.0), ("+++", 3.0), ("+ + +", 3.0),
]


@pytest.mark.parametrize("raw,expected", SEMIQUANT_CASES)
def test_parse_semiquant_ordinal_map(raw, expected):
    assert parse_semiquant(raw) == expected


@pytest.mark.parametrize("raw", ["??", "", "4+", "positive", "1", "++++", None])
def test_parse_semiquant_unrecognized(raw):
    assert parse_semiquant(raw) is None


def test_semiquant_tokens_are_extensible(tmp_path):
    path = tmp_path / "schema.json"
    path.write_text(json.dumps({
        "semiquant_tokens": {"1": ["pos"], "0": ["nil"]},
        "columns": [{"name": "PRO", "kind": "semiquant-ordinal", "fill": "mode"}],
    }), encoding="utf-8")
    schema = load_schema(str(path))
    assert schema.parse_semiquant("POS") == 1.0
    assert schema.parse_semiquant("nil") == 0.0
    # defaults still apply
    assert schema.parse_semiquant("2+") == 2.0


def test_apply_plausibility():
    cr = ColumnSchema("Cr", lower=0, upper=2000)
    assert apply_plausibility(1816.0, cr) == 1816.0
    assert apply_plausibility(-5.0, cr) is None
    assert apply_plausibility(2000.0, cr) == 2000.0
    assert apply_plausibility(2000.5, cr) is None
    assert apply_plausibility(-1e9, ColumnSchema("X")) == -1e9


def test_column_schema_invariants():
    with pytest.raises(SchemaError):
        ColumnSchema("Cr", lower=5, upper=5)
    with pytest.raises(SchemaError):
        ColumnSchema("PRO", kind=SEMIQUANT, fill_policy="median")
    with pytest.raises(SchemaError):
        ColumnSchema("Cr", fill_policy="mode")
    assert ColumnSchema("PRO", kind=SEMIQUANT).fill_policy == "mode"
    assert ColumnSchema("BUN", fill_policy=FILL_ZERO).fill_policy == FILL_ZERO


def _pre_matrix(columns, values):
    values = np.asarray(values, dtype=float)
    missing = np.isnan(values)
    provenance = np.where(missing, CellStatus.BLANK, CellStatus.OBSERVED).astype(np.int8)
    return FeatureMatrix(columns=columns, values=values, missing_mask=missing, provenance=provenance)


def test_impute_median_odd_and_even():
    cols = [ColumnSchema("A"), ColumnSchema("B")]
    nan = np.nan
    matrix = impute(_pre_matrix(cols, [[1, 1], [2, 2], [4, 3], [nan, 10], [nan, nan]]))
    assert matrix.imputed_fill[0] == 2.0
    assert matrix.imputed_fill[1] == 2.5
    assert list(matrix.values[3:, 0]) == [2.0, 2.0]
    assert matrix.values[4, 1] == 2.5
    assert not np.isnan(matrix.values).any()


def test_impute_mode_tie_takes_lowest_level():
    cols = [ColumnSchema("PRO", kind=SEMIQUANT)]
    matrix = impute(_pre_matrix(cols, [[2], [0.5], [2], [0.5], [np.nan]]))
    assert matrix.imputed_fill[0] == 0.5
    assert matrix.values[4, 0] == 0.5


def test_impute_zero_policy_overwrites_everything():
    cols = [ColumnSchema("BUN", fill_policy=FILL_ZERO), ColumnSchema("Cr")]
    matrix = impute(_pre_matrix(cols, [[np.nan, 60], [7.5, 70]]))
    assert list(matrix.values[:, 0]) == [0.0, 0.0]
    assert matrix.zero_filled == ["BUN"]


def test_impute_all_missing_column_fails():
    cols = [ColumnSchema("Cr"), ColumnSchema("BUN", fill_policy=FILL_ZERO)]
    with pytest.raises(AllMissingColumnError, match="Cr"):
        impute(_pre_matrix(cols, [[np.nan, np.nan], [np.nan, np.nan]]))


def test_impute_matches_sort_oracle_and_preserves_observed():
    rng = np.random.default_rng(3)
    cols = [ColumnSchema(f"c{j}") for j in range(6)]
    values = rng.normal(size=(41, 6))
    values[rng.random(values.shape) < 0.3] = np.nan
    pre = _pre_matrix(cols, values)
    post = impute(pre)
    for j in range(6):
        observed = np.sort(values[~np.isnan(values[:, j]), j])
        m = len(observed)
        oracle = observed[m // 2] if m % 2 else (observed[m // 2 - 1] + observed[m // 2]) / 2
        assert post.imputed_fill[j] == pytest.approx(oracle, abs=1e-12)
        assert np.array_equal(post.values[~pre.missing_mask[:, j], j], values[~pre.missing_mask[:, j], j])
        assert np.all(post.values[pre.missing_mask[:, j], j] == post.imputed_fill[j])


def _write_csv(path, header, rows):
    frame = pd.DataFrame(rows, columns=header)
    frame.to_csv(path, index=False, encoding="utf-8")
    return str(path)


def _small_schema():
    return LabSchema(columns=[
        ColumnSchema("Cr", lower=10, upper=2000, source="肌酐"),
        ColumnSchema("WBC", lower=0.1, upper=100),
        ColumnSchema("PRO", kind=SEMIQUANT),
        ColumnSchema("BUN", fill_policy=FILL_ZERO),
    ])


def test_load_cohort_renames_and_drops_unmapped(tmp_path):
    path = _write_csv(tmp_path / "c.csv", ["肌酐", "wbc ", "PRO", "BUN", "note"],
                      [["77 μmol/L", "4.20 ×10⁹ /L", "2+", "", "x"]])
    standardizer = LabStandardizer(_small_schema())
    cohort = standardizer.load_cohort(path)
    assert cohort.columns == ["Cr", "WBC", "PRO", "BUN"]
    assert len(cohort) == 1
    assert standardizer.unmapped_count == 1


def test_load_cohort_header_only(tmp_path):
    path = _write_csv(tmp_path / "h.csv", ["肌酐", "WBC", "PRO", "BUN"], [])
    assert len(load_cohort(path, _small_schema())) == 0


def test_load_cohort_errors(tmp_path):
    with pytest.raises(CohortFileNotFoundError):
        load_cohort(str(tmp_path / "missing.csv"), _small_schema())

    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(CohortFormatError):
        load_cohort(str(empty), _small_schema())

    path = _write_csv(tmp_path / "m.csv", ["肌酐", "PRO", "BUN"], [["1", "+", ""]])
    with pytest.raises(HeaderNotFoundError, match="WBC"):
        load_cohort(path, _small_schema())


def test_normalize_headers_suffixes_repeats_in_order():
    headers, repeats = normalize_headers(["Cr", "Cr ", "\xa0Cr", "WBC", "", 7])
    assert headers == ["Cr", "Cr_2", "Cr_3", "WBC", "unnamed_4", "7"]
    assert repeats == {"Cr_2": "Cr", "Cr_3": "Cr"}
    assert normalize_headers(["Cr", "WBC"]) == (["Cr", "WBC"], {})


def test_load_cohort_maps_first_of_repeated_headers(tmp_path):
    path = _write_csv(tmp_path / "r.csv", ["肌酐", "WBC", "WBC ", "PRO", "BUN"],
                      [["77", "4.2", "9.9", "+", ""]])
    standardizer = LabStandardizer(_small_schema())
    cohort = standardizer.load_cohort(path)
    assert cohort.columns == ["Cr", "WBC", "PRO", "BUN"]
    assert standardizer.unmapped_count == 1
    repeated = [e for e in standardizer.log_entries if e["action"] == "Repeated Headers"]
    assert len(repeated) == 1 and "WBC_2" in repeated[0]["details"]


def test_process_provenance_and_audit(tmp_path):
    rows = [
        ["77 μmol/L", "4.20 ×10⁹ /L", "2+", ""],
        ["5000", "abc", "trace", "8.0"],
        ["", "6.5", "??", ""],
        ["62", "7.0", "2+", ""],
    ]
    path = _write_csv(tmp_path / "c.csv", ["肌酐", "WBC", "PRO", "BUN"], rows)
    standardizer = LabStandardizer(_small_schema())
    matrix, audit = standardizer.process(path)

    assert matrix.provenance[1, 0] == CellStatus.IMPLAUSIBLE
    assert matrix.provenance[2, 0] == CellStatus.BLANK
    assert matrix.provenance[1, 1] == CellStatus.UNPARSEABLE
    assert matrix.provenance[2, 2] == CellStatus.UNPARSEABLE
    assert matrix.values[1, 0] == pytest.approx(69.5)
    assert matrix.values[1, 1] == pytest.approx(6.5)
    assert matrix.values[2, 2] == 2.0
    assert list(matrix.values[:, 3]) == [0.0] * 4

    assert audit["rows"] == 4
    assert audit["columns"]["Cr"]["excluded"] == 1
    assert audit["columns"]["Cr"]["blank"] == 1
    assert audit["columns"]["WBC"]["unparseable"] == 1
    assert audit["columns"]["BUN"]["zero_filled"] is True
    assert any(e["action"] == "Zero Fill" for e in audit["entries"])


def test_feature_matrix_save_and_load(tmp_path):
    path = _write_csv(tmp_path / "c.csv", ["肌酐", "WBC", "PRO", "BUN"],
                      [["77", "4.2", "+", ""], ["", "5.0", "-", ""], ["90", "", "++", ""]])
    matrix, _ = LabStandardizer(_small_schema()).process(path)
    out = tmp_path / "run"
    matrix.save(str(out))
    for name in ("features.csv", "provenance.csv", "feature_meta.json"):
        assert os.path.exists(out / name)
    loaded = load_feature_matrix(str(out))
    assert loaded.names == matrix.names
    assert np.array_equal(loaded.values, matrix.values)
    assert np.array_equal(loaded.provenance, matrix.provenance)
    assert loaded.zero_filled == ["BUN"]


def test_shipped_schema_covers_named_analytes():
    schema = load_schema()
    for name in ["Cr", "UA", "ALB", "HDL-c", "LDL-c", "TG", "TC", "GLU", "WBC", "Hb", "PLT", "HCT",
                 "MCV", "MCH", "MPV", "γ-GT", "RBC", "BUN", "AST", "ALT", "PRO", "LEU", "NIT", "KET", "ERY"]:
        schema.column(name)
    assert sorted(c.name for c in schema.columns if c.fill_policy == FILL_ZERO) == ["ALT", "AST", "BUN"]
    cr = schema.column("Cr")
    assert apply_plausibility(1816.0, cr) == 1816.0
