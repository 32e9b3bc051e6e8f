"""Threshold-based system flags, grades, burden score and the multi-system target"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List

import numpy as np
import pandas as pd

from errors import EmptyCohortError, MissingAnalyteError, SchemaError
from lab_standardizer import CONFIG_DIR, FeatureMatrix

logger = logging.getLogger(__name__)

ABOVE = 'above'
BELOW = 'below'
AT_OR_ABOVE = 'at-or-above'

SYSTEM_NAMES = ('kidney', 'lipid', 'inflamm', 'metabolic')
MULTI_SYSTEM_MIN = 2


@dataclass(frozen=True)
class ThresholdRule:
    analyte: str
    direction: str
    cutoff: float

    def __post_init__(self):
        if self.direction not in (ABOVE, BELOW, AT_OR_ABOVE):
            raise SchemaError(f"Rule on '{self.analyte}': unknown direction '{self.direction}'")
        if not np.isfinite(self.cutoff):
            raise SchemaError(f"Rule on '{self.analyte}': cutoff must be finite, got {self.cutoff}")

    @property
    def label(self):
        glyph = {ABOVE: '>', BELOW: '<', AT_OR_ABOVE: '>='}[self.direction]
        return f"{self.analyte} {glyph} {self.cutoff:g}"


@dataclass(frozen=True)
class SystemDefinition:
    name: str
    rules: tuple

    def __post_init__(self):
        if self.name not in SYSTEM_NAMES:
            raise SchemaError(f"Unknown system '{self.name}', expected one of {SYSTEM_NAMES}")
        if len(self.rules) not in (2, 3):
            raise SchemaError(f"System '{self.name}' must have 2 or 3 rules, got {len(self.rules)}")


def evaluate_rule(value, rule):
    """Strict for above/below, inclusive for at-or-above. Works on scalars and arrays."""
    if rule.direction == ABOVE:
        return value > rule.cutoff
    if rule.direction == BELOW:
        return value < rule.cutoff
    return value >= rule.cutoff


def load_systems(path=None):
    path = path or os.path.join(CONFIG_DIR, 'systems.json')
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        logger.error(f"Could not read system definitions from {path}: {str(e)}")
        raise SchemaError(f"Could not read system definitions from {path}: {str(e)}")

    systems = []
    for entry in data.get('systems', []):
        try:
            rules = tuple(ThresholdRule(r['analyte'], r['direction'], float(r['cutoff'])) for r in entry['rules'])
            systems.append(SystemDefinition(entry['name'], rules))
        except KeyError as e:
            raise SchemaError(f"System definition is missing field {e}: {entry}")
    names = [s.name for s in systems]
    if len(names) != len(set(names)):
        raise SchemaError(f"Duplicate system names: {names}")
    return systems


def default_systems():
    return load_systems()


@dataclass
class SystemIndices:
    flags: Dict[str, np.ndarray]
    grades: Dict[str, np.ndarray]
    rule_hits: Dict[str, np.ndarray]
    burden_score: np.ndarray
    affected_systems: np.ndarray
    target_multi: np.ndarray

    def __len__(self):
        return len(self.target_multi)

    def to_frame(self):
        data = {}
        for name in self.flags:
            data[f'{name}_flag'] = self.flags[name].astype(int)
        for name in self.grades:
            data[f'{name}_grade'] = self.grades[name]
        data['burden_score'] = self.burden_score
        data['affected_systems'] = self.affected_systems
        data['target_multi'] = self.target_multi.astype(int)
        return pd.DataFrame(data)

    @classmethod
    def from_frame(cls, frame):
        names = [c[:-len('_flag')] for c in frame.columns if c.endswith('_flag')]
        return cls(
            flags={n: frame[f'{n}_flag'].to_numpy().astype(bool) for n in names},
            grades={n: frame[f'{n}_grade'].to_numpy().astype(int) for n in names},
            rule_hits={},
            burden_score=frame['burden_score'].to_numpy().astype(int),
            affected_systems=frame['affected_systems'].to_numpy().astype(int),
            target_multi=frame['target_multi'].to_numpy().astype(bool),
        )


def _column(matrix, analyte):
    if isinstance(matrix, FeatureMatrix):
        names = matrix.names
        if analyte not in names:
            raise MissingAnalyteError(f"Rule analyte '{analyte}' is not a column of the feature matrix")
        return matrix.values[:, names.index(analyte)]
    if analyte not in matrix.columns:
        raise MissingAnalyteError(f"Rule analyte '{analyte}' is not a column of the feature matrix")
    return matrix[analyte].to_numpy(dtype=float)


def compute_indices(matrix, systems=None):
    """Apply every system's rules row-wise. `matrix` is a FeatureMatrix or a DataFrame."""
    systems = systems if systems is not None else default_systems()
    for system in systems:
        for rule in system.rules:
            try:
                _column(matrix, rule.analyte)
            except MissingAnalyteError:
                logger.error(f"System '{system.name}' references missing analyte '{rule.analyte}'")
                raise

    n = matrix.values.shape[0] if isinstance(matrix, FeatureMatrix) else len(matrix)
    flags, grades, rule_hits = {}, {}, {}
    for system in systems:
        grade = np.zeros(n, dtype=int)
        for rule in system.rules:
            hit = np.asarray(evaluate_rule(_column(matrix, rule.analyte), rule), dtype=bool)
            rule_hits[f'{system.name}:{rule.label}'] = hit
            grade += hit
        grades[system.name] = grade
        flags[system.name] = grade >= 1

    burden = np.sum([g for g in grades.values()], axis=0).astype(int) if grades else np.zeros(n, dtype=int)
    affected = np.sum([f for f in flags.values()], axis=0).astype(int) if flags else np.zeros(n, dtype=int)
    return SystemIndices(
        flags=flags,
        grades=grades,
        rule_hits=rule_hits,
        burden_score=burden,
        affected_systems=affected,
        target_multi=affected >= MULTI_SYSTEM_MIN,
    )


def prevalence_summary(indices):
    n = len(indices)
    if n == 0:
        raise EmptyCohortError("Cannot summarise prevalence of an empty cohort")
    burden = indices.burden_score.astype(float)
    summary = {
        'n': n,
        'system_prevalence': {name: float(flag.mean()) for name, flag in indices.flags.items()},
        'target_prevalence': float(indices.target_multi.mean()),
        'target_count': int(indices.target_multi.sum()),
        'burden_mean': float(burden.mean()),
        'burden_sd': float(burden.std(ddof=1)) if n > 1 else 0.0,
        'affected_systems_distribution': {
            str(k): int((indices.affected_systems == k).sum()) for k in range(len(indices.flags) + 1)
        },
    }
    if indices.rule_hits:
        summary['rule_prevalence'] = {label: float(hit.mean()) for label, hit in indices.rule_hits.items()}
    return summary
