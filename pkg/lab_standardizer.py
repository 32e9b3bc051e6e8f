import json
import logging
import math
import os
import re
import unicodedata
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from errors import (
    AllMissingColumnError,
    CohortFileNotFoundError,
    CohortFormatError,
    HeaderNotFoundError,
    SchemaError,
)

logger = logging.getLogger(__name__)

CONFIG_DIR = os.environ.get('MULTISYS_CONFIG_DIR', os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config'))

CONTINUOUS = 'continuous'
SEMIQUANT = 'semiquant-ordinal'
FILL_MEDIAN = 'median'
FILL_MODE = 'mode'
FILL_ZERO = 'zero'

ORDINAL_LEVELS = (0.0, 0.5, 1.0, 2.0, 3.0)

DEFAULT_SEMIQUANT_TOKENS = {
    0.0: ['negative', '-', 'neg', '阴性'],
    0.5: ['trace', '±', '+-', '弱阳性'],
    1.0: ['1+', '+'],
    2.0: ['2+', '++'],
    3.0: ['3+', '+++'],
}

# ASCII digits only: superscripts and other scripts are unit text
_QUANTITY_RE = re.compile(r'[-+]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)')


class CellStatus(IntEnum):
    """Provenance of a cell before imputation"""
    OBSERVED = 0
    BLANK = 1
    UNPARSEABLE = 2
    IMPLAUSIBLE = 3


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str = CONTINUOUS
    unit_hint: str = ''
    lower: Optional[float] = None
    upper: Optional[float] = None
    fill_policy: Optional[str] = None
    source: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, SEMIQUANT):
            raise SchemaError(f"Column '{self.name}': unknown kind '{self.kind}'")
        if self.fill_policy is None:
            object.__setattr__(self, 'fill_policy', FILL_MODE if self.kind == SEMIQUANT else FILL_MEDIAN)
        if self.fill_policy not in (FILL_MEDIAN, FILL_MODE, FILL_ZERO):
            raise SchemaError(f"Column '{self.name}': unknown fill policy '{self.fill_policy}'")
        if self.fill_policy != FILL_ZERO and (self.fill_policy == FILL_MODE) != (self.kind == SEMIQUANT):
            raise SchemaError(f"Column '{self.name}': fill policy '{self.fill_policy}' does not match kind '{self.kind}'")
        if self.lower is not None and self.upper is not None and not self.lower < self.upper:
            raise SchemaError(f"Column '{self.name}': plausibility bounds [{self.lower}, {self.upper}] are not ordered")
        if self.source is None:
            object.__setattr__(self, 'source', self.name)

    def to_dict(self):
        return {
            'name': self.name,
            'source': self.source,
            'kind': self.kind,
            'unit': self.unit_hint,
            'lower': self.lower,
            'upper': self.upper,
            'fill': self.fill_policy,
        }

    @classmethod
    def from_dict(cls, entry):
        try:
            return cls(
                name=entry['name'],
                kind=entry.get('kind', CONTINUOUS),
                unit_hint=entry.get('unit', ''),
                lower=entry.get('lower'),
                upper=entry.get('upper'),
                fill_policy=entry.get('fill'),
                source=entry.get('source'),
            )
        except KeyError as e:
            raise SchemaError(f"Schema entry is missing field {e}: {entry}")


@dataclass
class LabSchema:
    """Column schemas plus the semiquantitative token table"""
    columns: List[ColumnSchema]
    semiquant_tokens: Dict[float, List[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SEMIQUANT_TOKENS.items()})

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(names) != len(set(names)):
            raise SchemaError(f"Duplicate canonical names in schema: {names}")
        sources = [c.source for c in self.columns]
        if len(sources) != len(set(sources)):
            raise SchemaError(f"Duplicate source headers in schema: {sources}")
        for level in self.semiquant_tokens:
            if level not in ORDINAL_LEVELS:
                raise SchemaError(f"Semiquantitative level {level} is not one of {ORDINAL_LEVELS}")
        self._token_lookup = _build_token_lookup(self.semiquant_tokens)

    @property
    def names(self):
        return [c.name for c in self.columns]

    def column(self, name):
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def parse_semiquant(self, raw):
        return parse_semiquant(raw, self._token_lookup)

    def to_dict(self):
        return {
            'schema_version': 1,
            'semiquant_tokens': {_level_key(k): v for k, v in sorted(self.semiquant_tokens.items())},
            'columns': [c.to_dict() for c in self.columns],
        }


def _level_key(level):
    return str(int(level)) if float(level).is_integer() else str(level)


def _normalize_token(raw):
    text = unicodedata.normalize('NFKC', str(raw)).casefold()
    return ''.join(text.split())


def _build_token_lookup(tokens):
    lookup = {}
    for level, words in tokens.items():
        for word in words:
            key = _normalize_token(word)
            if key in lookup and lookup[key] != float(level):
                raise SchemaError(f"Token '{word}' maps to both {lookup[key]} and {level}")
            lookup[key] = float(level)
    return lookup


_DEFAULT_TOKEN_LOOKUP = _build_token_lookup(DEFAULT_SEMIQUANT_TOKENS)


def load_schema(path=None):
    """Load a lab schema JSON file; token lists extend the built-in defaults"""
    path = path or os.path.join(CONFIG_DIR, 'lab_schema.json')
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        logger.error(f"Schema file not found: {path}")
        raise SchemaError(f"Schema file not found: {path}")
    except json.JSONDecodeError as e:
        logger.error(f"Schema file {path} is not valid JSON: {str(e)}")
        raise SchemaError(f"Schema file {path} is not valid JSON: {str(e)}")

    tokens = {k: list(v) for k, v in DEFAULT_SEMIQUANT_TOKENS.items()}
    for level, words in data.get('semiquant_tokens', {}).items():
        try:
            level = float(level)
        except ValueError:
            raise SchemaError(f"Semiquantitative level '{level}' is not a number")
        tokens.setdefault(level, [])
        for word in words:
            if word not in tokens[level]:
                tokens[level].append(word)

    columns = [ColumnSchema.from_dict(entry) for entry in data.get('columns', [])]
    if not columns:
        raise SchemaError(f"Schema file {path} declares no columns")
    logger.info(f"Loaded schema with {len(columns)} columns from {path}")
    return LabSchema(columns=columns, semiquant_tokens=tokens)


def parse_quantity(raw):
    """Return the first decimal number in a lab string, or None.

    Unit text around the number is ignored, including multiplicative unit
    notation such as "×10⁹ /L": "4.20 ×10⁹ /L" parses to 4.20.
    """
    if raw is None:
        return None
    match = _QUANTITY_RE.search(str(raw))
    if match is None:
        return None
    value = float(match.group(0))
    if not math.isfinite(value):
        return None
    return value


def format_quantity(value):
    # positional, shortest round-trip; never scientific notation
    return np.format_float_positional(value, trim='-')


def parse_semiquant(raw, token_lookup=None):
    """Map a dipstick result to the ordinal scale {0, 0.5, 1, 2, 3}, or None"""
    if raw is None:
        return None
    lookup = _DEFAULT_TOKEN_LOOKUP if token_lookup is None else token_lookup
    return lookup.get(_normalize_token(raw))


def apply_plausibility(value, schema):
    if schema.lower is not None and value < schema.lower:
        return None
    if schema.upper is not None and value > schema.upper:
        return None
    return value


@dataclass(frozen=True)
class RawCohort:
    """String-valued lab records, one DataFrame column per canonical analyte"""
    frame: pd.DataFrame

    def __post_init__(self):
        columns = list(self.frame.columns)
        if len(columns) != len(set(columns)):
            raise SchemaError(f"RawCohort column names are not unique: {columns}")

    @property
    def columns(self):
        return list(self.frame.columns)

    @property
    def rows(self):
        return self.frame.to_dict(orient='records')

    def __len__(self):
        return len(self.frame)

    def to_csv(self, path):
        self.frame.to_csv(path, index=False, encoding='utf-8')


@dataclass
class FeatureMatrix:
    columns: List[ColumnSchema]
    values: np.ndarray
    missing_mask: np.ndarray
    provenance: np.ndarray
    imputed_fill: Optional[np.ndarray] = None

    @property
    def names(self):
        return [c.name for c in self.columns]

    @property
    def is_imputed(self):
        return self.imputed_fill is not None

    @property
    def zero_filled(self):
        return [c.name for c in self.columns if c.fill_policy == FILL_ZERO]

    def column_index(self, name):
        return self.names.index(name)

    def column_values(self, name):
        return self.values[:, self.column_index(name)]

    def to_frame(self):
        return pd.DataFrame(self.values, columns=self.names)

    def save(self, output_dir):
        """Write features.csv, provenance.csv and feature_meta.json"""
        os.makedirs(output_dir, exist_ok=True)
        self.to_frame().to_csv(os.path.join(output_dir, 'features.csv'), index=False, encoding='utf-8')
        pd.DataFrame(self.provenance, columns=self.names).to_csv(
            os.path.join(output_dir, 'provenance.csv'), index=False, encoding='utf-8')
        meta = {
            'columns': [c.to_dict() for c in self.columns],
            'imputed_fill': None if self.imputed_fill is None else [float(v) for v in self.imputed_fill],
            'zero_filled': self.zero_filled,
        }
        with open(os.path.join(output_dir, 'feature_meta.json'), 'w', encoding='utf-8') as f:
            json.dump(meta, f, indent=2, ensure_ascii=False)


def load_feature_matrix(input_dir):
    with open(os.path.join(input_dir, 'feature_meta.json'), 'r', encoding='utf-8') as f:
        meta = json.load(f)
    columns = [ColumnSchema.from_dict(entry) for entry in meta['columns']]
    names = [c.name for c in columns]
    values = pd.read_csv(os.path.join(input_dir, 'features.csv'), encoding='utf-8')[names].to_numpy(dtype=float)
    provenance = pd.read_csv(os.path.join(input_dir, 'provenance.csv'), encoding='utf-8')[names].to_numpy(dtype=np.int8)
    fill = meta.get('imputed_fill')
    return FeatureMatrix(
        columns=columns,
        values=values,
        missing_mask=provenance != CellStatus.OBSERVED,
        provenance=provenance,
        imputed_fill=None if fill is None else np.asarray(fill, dtype=float),
    )


def normalize_headers(headers):
    """Strip analyte headers and make repeats unique.

    Returns (headers, repeats) where repeats maps each renamed header to the
    original it repeats. The second "Cr" becomes "Cr_2", the third "Cr_3";
    a blank header becomes "unnamed_<position>".
    """
    occurrences = {}
    normalized, repeats = [], {}
    for position, raw in enumerate(headers):
        header = str(raw).replace('\xa0', ' ').strip() or f"unnamed_{position}"
        if header != raw:
            logger.debug(f"Analyte header {raw!r} read as '{header}'")
        occurrences[header] = occurrences.get(header, 0) + 1
        if occurrences[header] > 1:
            repeat = f"{header}_{occurrences[header]}"
            logger.warning(f"Analyte header '{header}' repeats at position {position}; reading it as '{repeat}'")
            repeats[repeat] = header
            header = repeat
        normalized.append(header)
    return normalized, repeats


def _lookup_key(name):
    return ' '.join(str(name).replace('\xa0', ' ').split()).casefold()


def _median(observed):
    return float(np.median(observed))


def _mode(observed):
    levels, counts = np.unique(observed, return_counts=True)
    # np.unique sorts ascending, so argmax picks the lowest level on ties
    return float(levels[int(np.argmax(counts))])


def impute(matrix):
    """Fill missing cells column by column and return a new FeatureMatrix"""
    n, p = matrix.values.shape
    values = matrix.values.copy()
    fills = np.zeros(p, dtype=float)
    for j, col in enumerate(matrix.columns):
        if col.fill_policy == FILL_ZERO:
            values[:, j] = 0.0
            fills[j] = 0.0
            continue
        missing = matrix.missing_mask[:, j]
        observed = values[~missing, j]
        if observed.size == 0:
            logger.error(f"Column '{col.name}' is 100% missing and its fill policy is '{col.fill_policy}'")
            raise AllMissingColumnError(f"Column '{col.name}' has no observed values to impute from (fill policy '{col.fill_policy}')")
        fills[j] = _median(observed) if col.fill_policy == FILL_MEDIAN else _mode(observed)
        values[missing, j] = fills[j]
    return FeatureMatrix(
        columns=list(matrix.columns),
        values=values,
        missing_mask=matrix.missing_mask.copy(),
        provenance=matrix.provenance.copy(),
        imputed_fill=fills,
    )


class LabStandardizer:
    """Standardize raw laboratory CSV exports into a clean numeric matrix"""

    def __init__(self, schema=None):
        self.schema = schema or load_schema()
        self.log_entries = []
        self.unmapped_count = 0

    def _log(self, action, details):
        self.log_entries.append({'action': action, 'details': details})

    def load_cohort(self, csv_path):
        """Read a CSV export and rename mapped headers to canonical names"""
        if not os.path.exists(csv_path):
            logger.error(f"Cohort file not found: {csv_path}")
            raise CohortFileNotFoundError(f"Cohort file not found: {csv_path}")
        try:
            df = pd.read_csv(csv_path, dtype=str, keep_default_na=False, encoding='utf-8-sig')
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            logger.error(f"Error reading cohort file {csv_path}: {str(e)}")
            raise CohortFormatError(f"Could not parse {csv_path} as CSV: {str(e)}")

        headers, repeats = normalize_headers(df.columns)
        df.columns = headers
        if repeats:
            self._log('Repeated Headers', f"Read repeated analyte headers as {sorted(repeats)}; "
                                          f"the first occurrence of each is the one mapped")

        # Exact header match first, then case-insensitive with normalized whitespace
        column_lookup = {_lookup_key(col): col for col in df.columns}
        rename = {}
        for col in self.schema.columns:
            if col.source in df.columns:
                actual = col.source
            elif _lookup_key(col.source) in column_lookup:
                actual = column_lookup[_lookup_key(col.source)]
                logger.info(f"Using case-insensitive column match: '{col.source}' -> '{actual}'")
            else:
                logger.error(f"Header '{col.source}' for '{col.name}' not found. Available columns: {df.columns.tolist()}")
                raise HeaderNotFoundError(f"Schema entry '{col.name}' references header '{col.source}' which is absent from {os.path.basename(csv_path)}")
            rename[actual] = col.name

        unmapped = [c for c in df.columns if c not in rename]
        if unmapped:
            logger.warning(f"Dropping {len(unmapped)} unmapped columns: {unmapped}")
        self.unmapped_count = len(unmapped)

        df = df[list(rename)].rename(columns=rename)
        df = df[self.schema.names]
        for col in df.columns:
            df[col] = df[col].str.replace('\xa0', ' ')

        logger.info(f"Loaded cohort with {len(df)} rows and {len(df.columns)} mapped columns from {csv_path}")
        self._log('File Loaded', f'Loaded {os.path.basename(csv_path)} with {len(df)} rows; '
                                 f'{len(rename)} columns mapped, {len(unmapped)} dropped')
        return RawCohort(frame=df.reset_index(drop=True))

    def parse(self, cohort):
        """Parse every cell and apply plausibility bounds; nothing is imputed yet"""
        n = len(cohort)
        p = len(self.schema.columns)
        values = np.full((n, p), np.nan)
        provenance = np.zeros((n, p), dtype=np.int8)

        for j, col in enumerate(self.schema.columns):
            raw_values = cohort.frame[col.name].tolist() if col.name in cohort.frame.columns else [''] * n
            for i, raw in enumerate(raw_values):
                if raw is None or not str(raw).strip():
                    provenance[i, j] = CellStatus.BLANK
                    continue
                if col.kind == SEMIQUANT:
                    value = self.schema.parse_semiquant(raw)
                else:
                    value = parse_quantity(raw)
                if value is None:
                    provenance[i, j] = CellStatus.UNPARSEABLE
                    continue
                if apply_plausibility(value, col) is None:
                    provenance[i, j] = CellStatus.IMPLAUSIBLE
                    continue
                values[i, j] = value

            excluded = int((provenance[:, j] == CellStatus.IMPLAUSIBLE).sum())
            if excluded:
                logger.info(f"Column '{col.name}': {excluded} implausible values treated as missing")
                self._log('Plausibility Filter', f"Removed {excluded} implausible '{col.name}' values")

        return FeatureMatrix(
            columns=list(self.schema.columns),
            values=values,
            missing_mask=provenance != CellStatus.OBSERVED,
            provenance=provenance,
        )

    def impute(self, matrix):
        result = impute(matrix)
        for j, col in enumerate(result.columns):
            if col.fill_policy == FILL_ZERO:
                self._log('Zero Fill', f"'{col.name}' set to 0 for all rows (configured zero fill)")
            else:
                n_missing = int(matrix.missing_mask[:, j].sum())
                if n_missing:
                    self._log('Imputation', f"'{col.name}': {n_missing} cells filled with {col.fill_policy} {result.imputed_fill[j]:g}")
        return result

    def process(self, csv_path):
        """Load, parse and impute a cohort CSV; returns (FeatureMatrix, audit)"""
        cohort = self.load_cohort(csv_path)
        return self.process_cohort(cohort)

    def process_cohort(self, cohort):
        parsed = self.parse(cohort)
        matrix = self.impute(parsed)
        return matrix, self.audit(matrix)

    def audit(self, matrix):
        columns = {}
        for j, col in enumerate(matrix.columns):
            status = matrix.provenance[:, j]
            columns[col.name] = {
                'kind': col.kind,
                'fill_policy': col.fill_policy,
                'parsed': int((status == CellStatus.OBSERVED).sum()),
                'blank': int((status == CellStatus.BLANK).sum()),
                'unparseable': int((status == CellStatus.UNPARSEABLE).sum()),
                'excluded': int((status == CellStatus.IMPLAUSIBLE).sum()),
                'imputed': int(len(status)) if col.fill_policy == FILL_ZERO else int((status != CellStatus.OBSERVED).sum()),
                'fill_value': None if matrix.imputed_fill is None else float(matrix.imputed_fill[j]),
                'zero_filled': col.fill_policy == FILL_ZERO,
            }
        return {
            'rows': int(matrix.values.shape[0]),
            'unmapped_columns_dropped': int(self.unmapped_count),
            'columns': columns,
            'entries': list(self.log_entries),
        }


def load_cohort(csv_path, schema=None):
    return LabStandardizer(schema).load_cohort(csv_path)
