"""
Command-line entry point for the multi-system abnormality pipeline.

Each subcommand reads its inputs from the run directory and writes its own
artifacts there; ``all`` runs every stage in order and finishes with
summary.json.

    python multisys_app.py all --config config/run_config.json --out runs/demo
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import List, Optional

import numpy as np
import pandas as pd

import classifiers
import cohort_split
import explain
import metrics
import report
import synth_cohort
import system_indices
from errors import (
    ConfigError,
    ConfigHashMismatchError,
    DegenerateFeatureError,
    MalformedArtifactError,
    MissingArtifactError,
    MultisysError,
    SchemaError,
)
from lab_standardizer import CONFIG_DIR, LabStandardizer, load_feature_matrix, load_schema

logger = logging.getLogger(__name__)

SUMMARY_SCHEMA_VERSION = 1
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')
SUBCOMMANDS = ('simulate', 'ingest', 'features', 'split', 'train', 'evaluate', 'explain', 'report', 'all')

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3

MODEL_FILES = {'lr': 'model_lr.json', 'rf': 'model_rf.json', 'gb': 'model_gb.json'}
MODEL_LABELS = {'lr': 'Logistic regression', 'rf': 'Random forest', 'gb': 'Gradient boosting'}


@dataclass
class RunConfig:
    input_path: Optional[str] = None
    synth_spec: Optional[str] = None
    synth_n: Optional[int] = None
    schema_path: Optional[str] = None
    systems_path: Optional[str] = None
    seed: int = 42
    ratios: List[float] = field(default_factory=lambda: [0.70, 0.15, 0.15])
    folds: int = 5
    threshold: float = 0.5
    logistic: dict = field(default_factory=lambda: {'C': 1.0, 'max_iter': 2000})
    forest: dict = field(default_factory=lambda: {'n_trees': 200, 'max_depth': 8, 'min_samples_leaf': 10})
    boosting: dict = field(default_factory=lambda: {'n_estimators': 200, 'learning_rate': 0.05,
                                                    'max_depth': 4, 'min_samples_leaf': 10})
    pdp: dict = field(default_factory=lambda: {'grid_size': 50, 'percentiles': [2.5, 97.5],
                                               'method': explain.MEAN_ANCHORED, 'features': 3})
    output_dir: str = 'runs/default'

    def validate(self):
        if (self.input_path is None) == (self.synth_spec is None):
            raise ConfigError("Exactly one of input_path and synth_spec must be set")
        if len(self.ratios) != 3 or any(float(r) <= 0 for r in self.ratios):
            raise ConfigError(f"ratios must be three positive numbers, got {self.ratios}")
        if abs(sum(float(r) for r in self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"ratios must sum to 1, got {sum(self.ratios)}")
        if int(self.folds) < 2:
            raise ConfigError(f"folds must be at least 2, got {self.folds}")
        if not 0.0 < float(self.threshold) < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.synth_n is not None and int(self.synth_n) < 1:
            raise ConfigError(f"synth_n must be positive, got {self.synth_n}")
        if float(self.logistic.get('C', 1.0)) <= 0:
            raise ConfigError("logistic.C must be positive")
        if not 0 < float(self.boosting.get('learning_rate', 0.05)) <= 1:
            raise ConfigError("boosting.learning_rate must be in (0, 1]")
        if int(self.pdp.get('grid_size', 50)) < 2:
            raise ConfigError("pdp.grid_size must be at least 2")
        if self.pdp.get('method', explain.MEAN_ANCHORED) not in (explain.MEAN_ANCHORED, explain.AVERAGED):
            raise ConfigError(f"pdp.method must be '{explain.MEAN_ANCHORED}' or '{explain.AVERAGED}'")
        return self

    def hash_payload(self):
        payload = asdict(self)
        payload.pop('output_dir')
        return payload

    @property
    def config_hash(self):
        canonical = json.dumps(self.hash_payload(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def load_run_config(path=None):
    """Read a RunConfig JSON; relative input paths resolve against the file's directory"""
    path = path or os.path.join(CONFIG_DIR, 'run_config.json')
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {str(e)}")

    known = set(RunConfig.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown config keys: {unknown}")
    base = os.path.dirname(os.path.abspath(path))
    for key in ('input_path', 'synth_spec', 'schema_path', 'systems_path'):
        if data.get(key) and not os.path.isabs(data[key]):
            data[key] = os.path.normpath(os.path.join(base, data[key]))
    defaults = RunConfig()
    for key in ('logistic', 'forest', 'boosting', 'pdp'):
        if key in data:
            merged = dict(getattr(defaults, key))
            merged.update(data[key])
            data[key] = merged
    return RunConfig(**data).validate()


class PipelineRun:
    """Artifact bookkeeping for one run directory"""

    def __init__(self, config, output_dir, force=False):
        self.config = config
        self.output_dir = output_dir
        self.force = force
        self.config_hash = config.config_hash
        os.makedirs(output_dir, exist_ok=True)
        self.manifest_path = os.path.join(output_dir, 'manifest.json')
        self.manifest = self._load_manifest()

    def _load_manifest(self):
        if not os.path.exists(self.manifest_path):
            return {'artifacts': {}}
        with open(self.manifest_path, 'r', encoding='utf-8') as f:
            return json.load(f)

    def path(self, name):
        return os.path.join(self.output_dir, name)

    def require(self, name, what='upstream'):
        path = self.path(name)
        if not os.path.exists(path):
            logger.error(f"Missing {what} artifact {name} in {self.output_dir}")
            raise MissingArtifactError(f"missing {what} artifact: {name} (run the stage that produces it first)")
        produced_by = self.manifest['artifacts'].get(name)
        if produced_by != self.config_hash and not self.force:
            logger.error(f"{name} was produced by config {produced_by}, current config is {self.config_hash}")
            raise ConfigHashMismatchError(
                f"{name} was produced by config {produced_by}, not {self.config_hash}; rerun upstream stages or pass --force")
        return path

    def record(self, *names):
        for name in names:
            self.manifest['artifacts'][name] = self.config_hash
        self.manifest['config_hash'] = self.config_hash
        with open(self.manifest_path, 'w', encoding='utf-8') as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)

    def write_json(self, name, payload):
        payload = dict(payload)
        payload['config_hash'] = self.config_hash
        with open(self.path(name), 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        self.record(name)

    def read_json(self, name, what='upstream'):
        with open(self.require(name, what), 'r', encoding='utf-8') as f:
            try:
                return json.load(f)
            except json.JSONDecodeError as e:
                raise MalformedArtifactError(f"{name} is not valid JSON: {str(e)}")

    def check_consistency(self):
        """Refuse a run directory holding artifacts from another config"""
        foreign = sorted(n for n, h in self.manifest['artifacts'].items() if h != self.config_hash)
        if foreign and not self.force:
            raise ConfigHashMismatchError(
                f"Run directory {self.output_dir} holds artifacts from another config: {foreign}; pass --force to overwrite")


def _schema(config):
    return load_schema(config.schema_path) if config.schema_path else load_schema()


def _systems(config):
    return system_indices.load_systems(config.systems_path) if config.systems_path else system_indices.default_systems()


def _feature_block(run):
    run.require('features.csv')
    run.require('feature_meta.json')
    run.require('provenance.csv')
    matrix = load_feature_matrix(run.output_dir)
    return matrix.values, matrix.names


def _labels(run):
    frame = pd.read_csv(run.require('indices.csv'), encoding='utf-8')
    if 'target_multi' not in frame.columns:
        raise MalformedArtifactError("indices.csv lacks the target_multi column")
    return frame['target_multi'].to_numpy(dtype=int)


def _partition(run):
    return cohort_split.Partition.from_dict(run.read_json('partition.json'))


def _fitters(config, names):
    lr, rf, gb = config.logistic, config.forest, config.boosting
    return {
        'lr': lambda X, y: classifiers.fit_logistic_classifier(X, y, C=lr['C'], max_iter=lr['max_iter'],
                                                               feature_names=names),
        'rf': lambda X, y: classifiers.fit_random_forest(X, y, n_trees=rf['n_trees'], max_depth=rf['max_depth'],
                                                         min_samples_leaf=rf['min_samples_leaf'], seed=config.seed,
                                                         feature_names=names),
        'gb': lambda X, y: classifiers.fit_gradient_boosting(X, y, n_estimators=gb['n_estimators'],
                                                             learning_rate=gb['learning_rate'],
                                                             max_depth=gb['max_depth'],
                                                             min_samples_leaf=gb['min_samples_leaf'],
                                                             feature_names=names),
    }


def _load_models(run):
    models = {}
    for key, name in MODEL_FILES.items():
        path = run.require(name, what='model')
        models[key] = classifiers.load_model(path)
    return models


def stage_simulate(run):
    config = run.config
    if config.synth_spec is None:
        raise ConfigError("simulate needs synth_spec in the run config")
    spec = synth_cohort.load_generator_spec(config.synth_spec).with_overrides(n=config.synth_n, seed=config.seed)
    cohort = synth_cohort.generate(spec)
    cohort.to_csv(run.path('raw_cohort.csv'))
    run.record('raw_cohort.csv')


def stage_ingest(run):
    config = run.config
    if config.input_path is not None:
        source = config.input_path
    else:
        source = run.require('raw_cohort.csv')
    standardizer = LabStandardizer(_schema(config))
    matrix, audit = standardizer.process(source)
    matrix.save(run.output_dir)
    run.record('features.csv', 'provenance.csv', 'feature_meta.json')
    run.write_json('cleaning_audit.json', audit)


def stage_features(run):
    frame = pd.read_csv(run.require('features.csv'), encoding='utf-8')
    indices = system_indices.compute_indices(frame, _systems(run.config))
    indices.to_frame().to_csv(run.path('indices.csv'), index=False)
    run.record('indices.csv')
    run.write_json('prevalence.json', system_indices.prevalence_summary(indices))


def stage_split(run):
    config = run.config
    labels = _labels(run)
    partition = cohort_split.stratified_split(labels, config.ratios, config.seed)
    run.write_json('partition.json', partition.to_dict())
    # folds index positions within the training subset
    plan = cohort_split.stratified_kfold(labels[partition.train], config.folds, config.seed)
    run.write_json('folds.json', plan.to_dict())


def stage_train(run):
    X, names = _feature_block(run)
    y = _labels(run)
    train = _partition(run).train
    for key, fitter in _fitters(run.config, names).items():
        model = fitter(X[train], y[train])
        classifiers.save_model(model, run.path(MODEL_FILES[key]), config_hash=run.config_hash)
        run.record(MODEL_FILES[key])


def stage_evaluate(run):
    config = run.config
    models = _load_models(run)
    X, names = _feature_block(run)
    y = _labels(run)
    partition = _partition(run)
    plan = cohort_split.FoldPlan.from_dict(run.read_json('folds.json'))

    rows, curves = [], []
    for key, model in models.items():
        for split_name, idx in (('validation', partition.validation), ('test', partition.test)):
            scores = model.predict_proba(X[idx])
            rows.append(metrics.evaluate_split(key, split_name, scores, y[idx], config.threshold))
            if split_name == 'test':
                roc = metrics.roc_auc(scores, y[idx])
                curve = roc.to_frame()
                curve.insert(0, 'model', MODEL_LABELS[key])
                curve['auc'] = roc.auc
                curves.append(curve)

    train = np.asarray(partition.train)
    cv = {key: metrics.cv_evaluate(fitter, X[train], y[train], plan)
          for key, fitter in _fitters(config, names).items()}
    for key, result in cv.items():
        logger.info(f"{MODEL_LABELS[key]}: CV AUC {result.mean_auc:.3f} ± {result.sd_auc:.3f}")

    metrics.write_metrics(rows, cv, run.path('metrics.json'), run.path('metrics_table.csv'),
                          threshold=config.threshold, config_hash=run.config_hash)
    pd.concat(curves, ignore_index=True).to_csv(run.path('roc_curves.csv'), index=False)
    run.record('metrics.json', 'metrics_table.csv', 'roc_curves.csv')


def stage_explain(run):
    config = run.config
    gb = classifiers.load_model(run.require(MODEL_FILES['gb'], what='model'))
    X, names = _feature_block(run)
    partition = _partition(run)
    test = np.asarray(partition.test)
    train = np.asarray(partition.train)

    shap_values = explain.tree_shap_matrix(gb, X[test])
    gap = float(np.max(np.abs(shap_values.base_value + shap_values.values.sum(axis=1) - gb.predict_margin(X[test]))))
    ranking = explain.global_importance(shap_values, names)
    explain.write_importance(ranking, run.path('importance.csv'))
    explain.write_beeswarm(explain.beeswarm_export(shap_values, X[test], names, row_ids=test), run.path('beeswarm.csv'))
    run.record('importance.csv', 'beeswarm.csv')

    pdp_cfg = config.pdp
    wanted = int(pdp_cfg.get('features', 3))
    pdp_files = []
    for feature in ranking.features:
        if len(pdp_files) >= wanted:
            break
        try:
            curve = explain.partial_dependence(gb, X[train], feature, grid_size=int(pdp_cfg['grid_size']),
                                               method=pdp_cfg['method'], percentiles=tuple(pdp_cfg['percentiles']),
                                               feature_names=names)
        except DegenerateFeatureError as e:
            logger.warning(f"Skipping partial dependence for {feature}: {str(e)}")
            continue
        name = f"pdp_{_safe_name(feature)}.csv"
        explain.write_pdp(curve, run.path(name))
        run.record(name)
        pdp_files.append(name)

    run.write_json('explain.json', {
        'base_value': shap_values.base_value,
        'max_local_accuracy_gap': gap,
        'rows_explained': len(test),
        'scale': 'margin (log-odds)',
        'pdp_method': pdp_cfg['method'],
        'pdp_files': pdp_files,
    })


def _safe_name(feature):
    return ''.join(c if c.isalnum() or c in '._-' else '_' for c in feature)


def stage_report(run):
    fig_dir = run.path('figures')
    os.makedirs(fig_dir, exist_ok=True)
    explained = run.read_json('explain.json')
    pdp_paths = [run.require(name) for name in explained['pdp_files']]
    specs = [
        report.FigureSpec(report.HISTOGRAM_GRID, run.require('features.csv'), os.path.join(fig_dir, 'histograms.svg')),
        report.FigureSpec(report.BURDEN_DISTRIBUTION, run.require('indices.csv'), os.path.join(fig_dir, 'burden.svg')),
        report.FigureSpec(report.CORRELATION_HEATMAP, [run.require('features.csv'), run.require('indices.csv')],
                          os.path.join(fig_dir, 'correlation.svg')),
        report.FigureSpec(report.ROC, run.require('roc_curves.csv'), os.path.join(fig_dir, 'roc.svg')),
        report.FigureSpec(report.SHAP_BEESWARM, run.require('beeswarm.csv'), os.path.join(fig_dir, 'shap_beeswarm.svg')),
        report.FigureSpec(report.IMPORTANCE_BAR, run.require('importance.csv'), os.path.join(fig_dir, 'importance.svg')),
    ]
    if pdp_paths:
        specs.append(report.FigureSpec(report.PDP_PANEL, pdp_paths, os.path.join(fig_dir, 'pdp.svg')))
    for spec in specs:
        report.render(spec)
        run.record(os.path.relpath(spec.output_path, run.output_dir))

    matrix = load_feature_matrix(run.output_dir)
    report.table_summary(matrix).to_csv(run.path('table1.csv'), index=False, float_format='%.4f')
    run.record('table1.csv')


def write_summary(run):
    prevalence = run.read_json('prevalence.json')
    partition = _partition(run)
    evaluated = run.read_json('metrics.json')
    explained = run.read_json('explain.json')
    importance = pd.read_csv(run.require('importance.csv'), encoding='utf-8').head(report.TOP_FEATURES)
    summary = {
        'schema_version': SUMMARY_SCHEMA_VERSION,
        'cohort': {
            'n': prevalence['n'],
            'target_prevalence': prevalence['target_prevalence'],
            'system_prevalence': prevalence['system_prevalence'],
            'burden_mean': prevalence['burden_mean'],
            'burden_sd': prevalence['burden_sd'],
        },
        'split_sizes': dict(zip(cohort_split.SUBSETS, partition.sizes)),
        'threshold': evaluated['threshold'],
        'performance': [{k: row[k] for k in metrics.TABLE_COLUMNS} for row in evaluated['evaluations']],
        'cross_validation': evaluated['cross_validation'],
        'importance': [
            {'rank': int(r['rank']), 'feature': r['feature'], 'mean_abs_shap': float(r['mean_abs_shap'])}
            for r in importance.to_dict(orient='records')
        ],
        'shap_max_local_accuracy_gap': explained['max_local_accuracy_gap'],
        'pdp_files': explained['pdp_files'],
    }
    run.write_json('summary.json', summary)
    return summary


STAGES = {
    'simulate': stage_simulate,
    'ingest': stage_ingest,
    'features': stage_features,
    'split': stage_split,
    'train': stage_train,
    'evaluate': stage_evaluate,
    'explain': stage_explain,
    'report': stage_report,
}


def run_subcommand(name, config, output_dir=None, force=False):
    """Run one stage (or every stage for ``all``) and return the exit status"""
    if name not in SUBCOMMANDS:
        raise ConfigError(f"Unknown subcommand '{name}'")
    run = PipelineRun(config, output_dir or config.output_dir, force=force)
    logger.info(f"Running '{name}' with config {run.config_hash} in {run.output_dir}")
    if name != 'all':
        STAGES[name](run)
        return EXIT_OK

    run.check_consistency()
    for stage in STAGES:
        if stage == 'simulate' and config.synth_spec is None:
            continue
        logger.info(f"Stage: {stage}")
        STAGES[stage](run)
    summary = write_summary(run)
    gb_test = [r for r in summary['performance'] if r['model'] == 'gb' and r['split'] == 'test']
    if gb_test:
        logger.info(f"Pipeline complete: GB test AUC {gb_test[0]['auc']:.4f}")
    return EXIT_OK


def _exit_code(error):
    if isinstance(error, (ConfigError, SchemaError)):
        return EXIT_CONFIG
    if isinstance(error, (MissingArtifactError, ConfigHashMismatchError, MalformedArtifactError)):
        return EXIT_ARTIFACT
    return EXIT_FAILURE


def _error_report(output_dir, subcommand, error):
    report_data = {
        'status': 'error',
        'subcommand': subcommand,
        'error': type(error).__name__,
        'message': str(error),
    }
    text = json.dumps(report_data, indent=2, sort_keys=True, ensure_ascii=False)
    if output_dir:
        try:
            os.makedirs(output_dir, exist_ok=True)
            with open(os.path.join(output_dir, 'error.json'), 'w', encoding='utf-8') as f:
                f.write(text + '\n')
        except OSError as e:
            logger.error(f"Could not write error report: {str(e)}")
    print(text, file=sys.stderr)


def configure_logging(output_dir):
    level = os.environ.get('MULTISYS_LOG', 'INFO').upper()
    if level not in LOG_LEVELS:
        level = 'INFO'
    handlers = [logging.StreamHandler()]
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        log_name = f"multisys_{datetime.now().strftime('%Y%m%d')}.log"
        handlers.insert(0, logging.FileHandler(os.path.join(output_dir, log_name), encoding='utf-8'))
    logging.basicConfig(
        level=getattr(logging, level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='run config JSON (default: config/run_config.json)')
    common.add_argument('--out', help='run directory for artifacts (overrides output_dir)')
    common.add_argument('--seed', type=int, help='seed for simulation, splitting and forests (overrides config)')
    common.add_argument('--force', action='store_true', help='accept artifacts produced by a different config')

    parser = argparse.ArgumentParser(description='Multi-system abnormality prediction pipeline')
    sub = parser.add_subparsers(dest='subcommand', required=True)
    helps = {
        'simulate': 'generate a synthetic raw cohort',
        'ingest': 'parse, filter and impute the raw cohort',
        'features': 'compute system flags, grades, burden score and target',
        'split': 'stratified train/validation/test split and CV folds',
        'train': 'fit logistic regression, random forest and gradient boosting',
        'evaluate': 'validation/test metrics and cross-validated AUC',
        'explain': 'Shapley attributions, importance ranking and partial dependence',
        'report': 'SVG figures and the descriptive table',
        'all': 'run every stage and write summary.json',
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    output_dir = args.out
    try:
        config = load_run_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        output_dir = output_dir or config.output_dir
        config.output_dir = output_dir
        configure_logging(output_dir)
        return run_subcommand(args.subcommand, config, output_dir, force=args.force)
    except MultisysError as e:
        logger.error(f"{args.subcommand} failed: {str(e)}")
        _error_report(output_dir, args.subcommand, e)
        return _exit_code(e)
    except Exception as e:
        logger.error(f"Unexpected error in {args.subcommand}: {str(e)}\n{traceback.format_exc()}")
        _error_report(output_dir, args.subcommand, e)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
