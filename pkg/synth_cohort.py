"""
Seeded synthetic laboratory cohort.

Values are emitted as strings with unit text (and dipstick tokens for
urinalysis) so the generated CSV goes through the same parser as a real
export. Marginals are set in config/synth_spec.json.
"""
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from errors import SchemaError
from lab_standardizer import CONFIG_DIR, DEFAULT_SEMIQUANT_TOKENS, ORDINAL_LEVELS, RawCohort

logger = logging.getLogger(__name__)

LOGNORMAL = 'lognormal'
NORMAL = 'normal'
CATEGORICAL = 'categorical'

MAX_REDRAWS = 100
UNIT_SEPARATORS = ('', ' ')


@dataclass(frozen=True)
class AnalyteSpec:
    name: str
    distribution: str
    mu: float = 0.0
    sigma: float = 1.0
    probabilities: Optional[Tuple[float, ...]] = None
    lower: Optional[float] = None
    upper: Optional[float] = None
    decimals: int = 2
    unit: str = ''
    factor: Optional[str] = None
    loading: float = 0.0
    missing_rate: float = 0.0

    def __post_init__(self):
        if self.distribution not in (LOGNORMAL, NORMAL, CATEGORICAL):
            raise SchemaError(f"Analyte '{self.name}': unknown distribution '{self.distribution}'")
        if self.distribution == CATEGORICAL:
            probs = self.probabilities
            if probs is None or len(probs) != len(ORDINAL_LEVELS):
                raise SchemaError(f"Analyte '{self.name}': need {len(ORDINAL_LEVELS)} level probabilities")
            if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise SchemaError(f"Analyte '{self.name}': probabilities must be non-negative and sum to 1, got {sum(probs)}")
        elif not self.sigma > 0:
            raise SchemaError(f"Analyte '{self.name}': sigma must be positive, got {self.sigma}")
        if self.lower is not None and self.upper is not None and not self.lower < self.upper:
            raise SchemaError(f"Analyte '{self.name}': truncation bounds out of order ({self.lower}, {self.upper})")
        if not -1.0 <= self.loading <= 1.0:
            raise SchemaError(f"Analyte '{self.name}': factor loading must be in [-1, 1], got {self.loading}")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise SchemaError(f"Analyte '{self.name}': missing_rate must be in [0, 1], got {self.missing_rate}")

    @property
    def median(self):
        """Analytic median before truncation"""
        if self.distribution == LOGNORMAL:
            return math.exp(self.mu)
        if self.distribution == NORMAL:
            return self.mu
        return None

    @classmethod
    def from_dict(cls, entry):
        entry = dict(entry)
        if 'median' in entry:
            median = float(entry.pop('median'))
            if entry.get('distribution') == LOGNORMAL:
                if median <= 0:
                    raise SchemaError(f"Analyte '{entry.get('name')}': lognormal median must be positive")
                entry['mu'] = math.log(median)
            else:
                entry['mu'] = median
        if 'probabilities' in entry:
            entry['probabilities'] = tuple(float(p) for p in entry['probabilities'])
        try:
            return cls(**entry)
        except TypeError as e:
            raise SchemaError(f"Invalid analyte entry {entry}: {str(e)}")


@dataclass(frozen=True)
class GeneratorSpec:
    n: int
    seed: int
    analytes: Tuple[AnalyteSpec, ...]

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise SchemaError(f"Cohort size must be a positive integer, got {self.n}")
        names = [a.name for a in self.analytes]
        if len(names) != len(set(names)):
            raise SchemaError(f"Duplicate analytes in generator spec: {names}")

    def with_overrides(self, n=None, seed=None):
        return GeneratorSpec(n=self.n if n is None else int(n),
                             seed=self.seed if seed is None else int(seed),
                             analytes=self.analytes)

    def analyte(self, name):
        for a in self.analytes:
            if a.name == name:
                return a
        raise KeyError(name)


def load_generator_spec(path=None):
    path = path or os.path.join(CONFIG_DIR, 'synth_spec.json')
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        logger.error(f"Could not read generator spec {path}: {str(e)}")
        raise SchemaError(f"Could not read generator spec {path}: {str(e)}")
    try:
        return GeneratorSpec(
            n=int(data['n']),
            seed=int(data['seed']),
            analytes=tuple(AnalyteSpec.from_dict(a) for a in data['analytes']),
        )
    except KeyError as e:
        raise SchemaError(f"Generator spec {path} is missing {e}")


def _draw_continuous(spec, rng, n, latent):
    weight = spec.loading if latent is not None else 0.0
    own_scale = math.sqrt(1.0 - weight * weight)

    def transform(z):
        x = spec.mu + spec.sigma * z
        return np.exp(x) if spec.distribution == LOGNORMAL else x

    own = rng.standard_normal(n)
    shared = weight * latent if latent is not None else 0.0
    values = transform(shared + own_scale * own)

    lo = -np.inf if spec.lower is None else spec.lower
    hi = np.inf if spec.upper is None else spec.upper
    outside = (values < lo) | (values > hi)
    for _ in range(MAX_REDRAWS):
        if not outside.any():
            break
        redraw = rng.standard_normal(int(outside.sum()))
        part = shared[outside] if latent is not None else 0.0
        values[outside] = transform(part + own_scale * redraw)
        outside = (values < lo) | (values > hi)
    return np.clip(values, lo, hi)


def _format_values(spec, values, rng):
    separators = rng.integers(0, len(UNIT_SEPARATORS), size=values.size)
    out = []
    for v, s in zip(values, separators):
        text = f"{v:.{spec.decimals}f}"
        out.append(f"{text}{UNIT_SEPARATORS[s]}{spec.unit}" if spec.unit else text)
    return out


def _format_levels(levels, rng):
    choices = rng.random(levels.size)
    out = []
    for level, u in zip(levels, choices):
        tokens = DEFAULT_SEMIQUANT_TOKENS[float(level)]
        out.append(tokens[int(u * len(tokens))])
    return out


def generate(spec):
    """Draw a RawCohort. The same spec always produces the same strings."""
    if not isinstance(spec, GeneratorSpec):
        raise SchemaError(f"Expected a GeneratorSpec, got {type(spec).__name__}")
    rng = np.random.default_rng(spec.seed)
    n = spec.n

    factor_names = sorted({a.factor for a in spec.analytes if a.factor})
    latent = {name: rng.standard_normal(n) for name in factor_names}

    columns = {}
    for analyte in spec.analytes:
        if analyte.distribution == CATEGORICAL:
            idx = rng.choice(len(ORDINAL_LEVELS), size=n, p=np.asarray(analyte.probabilities))
            cells = _format_levels(np.asarray(ORDINAL_LEVELS)[idx], rng)
        else:
            values = _draw_continuous(analyte, rng, n, latent.get(analyte.factor))
            cells = _format_values(analyte, values, rng)
        blank = rng.random(n) < analyte.missing_rate
        columns[analyte.name] = ['' if b else c for b, c in zip(blank, cells)]

    frame = pd.DataFrame(columns, columns=[a.name for a in spec.analytes])
    logger.info(f"Generated synthetic cohort: {n} rows, {len(spec.analytes)} analytes, seed {spec.seed}")
    return RawCohort(frame=frame)
