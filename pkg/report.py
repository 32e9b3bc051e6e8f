"""Figures (SVG) and the descriptive laboratory table"""
import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

import svg_charts as svg
from errors import EmptyCohortError, MalformedArtifactError, MissingArtifactError
from lab_standardizer import CONTINUOUS, FILL_ZERO, FeatureMatrix

logger = logging.getLogger(__name__)

HISTOGRAM_GRID = 'histogram-grid'
BURDEN_DISTRIBUTION = 'burden-distribution'
CORRELATION_HEATMAP = 'correlation-heatmap'
ROC = 'roc'
SHAP_BEESWARM = 'shap-beeswarm'
IMPORTANCE_BAR = 'importance-bar'
PDP_PANEL = 'pdp-panel'
FIGURE_KINDS = (HISTOGRAM_GRID, BURDEN_DISTRIBUTION, CORRELATION_HEATMAP, ROC, SHAP_BEESWARM, IMPORTANCE_BAR, PDP_PANEL)

HISTOGRAM_BINS = 40
HISTOGRAM_COLUMNS = ('Cr', 'UA', 'ALB', 'HDL-c', 'LDL-c', 'TG', 'TC', 'GLU', 'WBC', 'Hb', 'PLT', 'HCT')
TOP_FEATURES = 10
TABLE_COLUMNS = ['variable', 'mean', 'median', 'iqr', 'min', 'max']


@dataclass
class FigureSpec:
    kind: str
    data: Union[str, Sequence[str]]
    output_path: Optional[str] = None
    title: Optional[str] = None

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise ValueError(f"Unknown figure kind '{self.kind}', expected one of {FIGURE_KINDS}")

    @property
    def data_paths(self):
        return [self.data] if isinstance(self.data, str) else list(self.data)


def _read_artifact(path, required):
    if not os.path.exists(path):
        logger.error(f"Figure data reference does not resolve: {path}")
        raise MissingArtifactError(f"Unresolved data reference: {path}")
    try:
        frame = pd.read_csv(path, encoding='utf-8')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise MalformedArtifactError(f"Could not read {path}: {str(e)}")
    missing = [c for c in required if c not in frame.columns]
    if missing:
        logger.error(f"{os.path.basename(path)} lacks columns {missing}")
        raise MalformedArtifactError(f"{os.path.basename(path)} lacks required columns {missing}")
    return frame


def histogram_counts(values, bins=HISTOGRAM_BINS):
    """Counts and edges; a constant column lands in a single bin"""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return np.zeros(bins, dtype=int), np.linspace(0.0, 1.0, bins + 1)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        counts = np.zeros(bins, dtype=int)
        counts[0] = values.size
        return counts, np.linspace(lo, lo + 1.0, bins + 1)
    return np.histogram(values, bins=bins, range=(lo, hi))


def _histogram_grid(spec):
    frame = _read_artifact(spec.data_paths[0], [])
    columns = [c for c in HISTOGRAM_COLUMNS if c in frame.columns] or list(frame.columns)
    if not columns:
        raise MalformedArtifactError(f"{spec.data_paths[0]} has no columns to plot")
    ncols = 4
    nrows = int(np.ceil(len(columns) / ncols))
    panel_w, panel_h = 230, 190
    width, height = ncols * panel_w + 20, nrows * panel_h + 50
    body = []
    for k, name in enumerate(columns):
        r, c = divmod(k, ncols)
        counts, edges = histogram_counts(frame[name].to_numpy(dtype=float))
        axes = svg.Axes(20 + c * panel_w + 45, 45 + r * panel_h + 15, panel_w - 65, panel_h - 65,
                        (edges[0], edges[-1]), (0, max(int(counts.max()), 1)))
        for i, count in enumerate(counts):
            if count:
                x0, x1 = float(axes.x(edges[i])), float(axes.x(edges[i + 1]))
                y0 = float(axes.y(count))
                body.append(svg.rect(x0, y0, x1 - x0, axes.top + axes.height - y0, svg.PALETTE[0], stroke='#ffffff'))
        body.extend(axes.frame(ticks=2))
        body.append(svg.text(axes.left + axes.width / 2, axes.top - 6, name, size=11, anchor='middle', weight='bold'))
    return svg.document(width, height, body, spec.title or 'Laboratory variable distributions')


def _burden_distribution(spec):
    frame = _read_artifact(spec.data_paths[0], ['burden_score', 'affected_systems'])
    body = []
    panels = [('burden_score', 'Burden score'), ('affected_systems', 'Affected systems')]
    for k, (column, label) in enumerate(panels):
        values = frame[column].to_numpy(dtype=int)
        levels = np.arange(0, max(int(values.max()), 0) + 1)
        counts = np.array([(values == v).sum() for v in levels])
        axes = svg.Axes(70 + k * 420, 50, 330, 280, (-0.5, len(levels) - 0.5), (0, max(int(counts.max()), 1)))
        band = axes.width / len(levels)
        for i, count in enumerate(counts):
            y0 = float(axes.y(count))
            body.append(svg.rect(float(axes.x(i)) - band * 0.4, y0, band * 0.8, axes.top + axes.height - y0, svg.PALETTE[k]))
            body.append(svg.text(float(axes.x(i)), axes.top + axes.height + 15, str(levels[i]), size=10, anchor='middle'))
        bottom = axes.top + axes.height
        body.append(svg.line(axes.left, bottom, axes.left + axes.width, bottom))
        body.append(svg.line(axes.left, axes.top, axes.left, bottom))
        for v in np.linspace(0, axes.ylim[1], 5):
            py = float(axes.y(v))
            body.append(svg.text(axes.left - 6, py + 3, svg.tick_label(v), size=9, anchor='end'))
        body.append(svg.text(axes.left + axes.width / 2, bottom + 32, label, size=11, anchor='middle'))
        body.append(svg.text(axes.left - 45, axes.top + axes.height / 2, 'Patients', size=10, anchor='middle', rotate=-90))
    return svg.document(860, 400, body, spec.title or 'Burden score and affected systems')


def correlation_inputs(paths):
    """Side-by-side join of the artifacts; constant columns are dropped"""
    frames = [_read_artifact(p, []) for p in paths]
    combined = pd.concat(frames, axis=1)
    combined = combined.loc[:, ~combined.columns.duplicated()]
    numeric = combined.select_dtypes(include=[np.number])
    varying = [c for c in numeric.columns if numeric[c].nunique(dropna=True) > 1]
    return numeric[varying]


def _correlation_heatmap(spec):
    data = correlation_inputs(spec.data_paths)
    if data.shape[1] < 2:
        raise MalformedArtifactError("Correlation heatmap needs at least two varying columns")
    corr = data.corr(method='pearson').to_numpy()
    names = list(data.columns)
    p = len(names)
    cell = max(12, min(28, 640 // p))
    left, top = 130, 50
    width = left + p * cell + 110
    height = top + p * cell + 110
    body = []
    for i in range(p):
        for j in range(p):
            body.append(svg.rect(left + j * cell, top + i * cell, cell, cell, svg.diverging_color(corr[i, j]), stroke='#ffffff'))
        body.append(svg.text(left - 5, top + i * cell + cell * 0.65, names[i], size=9, anchor='end'))
        x = left + i * cell + cell * 0.6
        y = top + p * cell + 6
        body.append(svg.text(x, y, names[i], size=9, anchor='end', rotate=-60))
    # colour bar spans the full [-1, 1] range
    bar_x, bar_h = left + p * cell + 30, p * cell
    steps = 20
    for s in range(steps):
        v = 1.0 - 2.0 * (s + 0.5) / steps
        body.append(svg.rect(bar_x, top + s * bar_h / steps, 16, bar_h / steps, svg.diverging_color(v)))
    for v in (1.0, 0.0, -1.0):
        body.append(svg.text(bar_x + 22, top + (1.0 - v) / 2.0 * bar_h + 4, f"{v:+.1f}", size=9))
    return svg.document(width, height, body, spec.title or 'Pearson correlation')


def _roc(spec):
    frame = _read_artifact(spec.data_paths[0], ['model', 'fpr', 'tpr'])
    axes = svg.Axes(70, 50, 420, 420, (0, 1), (0, 1))
    body = axes.frame(xlabel='False positive rate', ylabel='True positive rate', ticks=5)
    body.append(svg.line(axes.x(0), axes.y(0), axes.x(1), axes.y(1), color='#888888', dashed=True))
    labels, colors = [], []
    for k, (model, curve) in enumerate(frame.groupby('model', sort=False)):
        color = svg.PALETTE[k % len(svg.PALETTE)]
        label = str(model)
        if 'auc' in curve.columns:
            label = f"{model} (AUC = {float(curve['auc'].iloc[0]):.3f})"
        body.append(svg.polyline(axes.x(curve['fpr']), axes.y(curve['tpr']), color, width=2, label=label))
        labels.append(label)
        colors.append(color)
    labels.append('Random classifier')
    colors.append('#888888')
    body.extend(svg.legend(300, 380, labels, colors, dashed=('Random classifier',)))
    return svg.document(540, 530, body, spec.title or 'ROC curves (test set)')


def _shap_beeswarm(spec):
    frame = _read_artifact(spec.data_paths[0], ['row_id', 'feature', 'shap_value', 'feature_value', 'feature_rank'])
    ranks = sorted(frame['feature_rank'].unique())[:TOP_FEATURES]
    frame = frame[frame['feature_rank'].isin(ranks)]
    lo, hi = float(frame['shap_value'].min()), float(frame['shap_value'].max())
    row_h = 34
    axes = svg.Axes(130, 50, 460, row_h * len(ranks), (lo, hi), (0, len(ranks)))
    body = [svg.line(axes.x(0), axes.top, axes.x(0), axes.top + axes.height, color='#999999')]
    for k, rank in enumerate(ranks):
        group = frame[frame['feature_rank'] == rank].sort_values(['shap_value', 'row_id'], kind='mergesort')
        name = str(group['feature'].iloc[0])
        centre = axes.top + (k + 0.5) * row_h
        values = group['feature_value'].to_numpy(dtype=float)
        order = values.argsort(kind='mergesort').argsort(kind='mergesort')
        colour_frac = order / max(len(values) - 1, 1)
        # stack points that share a pixel column; offsets alternate above and below the centre line
        px = np.round(axes.x(group['shap_value'].to_numpy(dtype=float)) / 3.0).astype(int)
        seen = {}
        for x_bin, x_pos, frac in zip(px, axes.x(group['shap_value'].to_numpy(dtype=float)), colour_frac):
            n = seen.get(x_bin, 0)
            seen[x_bin] = n + 1
            offset = ((n + 1) // 2) * (1 if n % 2 else -1) * 2.0
            offset = float(np.clip(offset, -row_h * 0.45, row_h * 0.45))
            body.append(svg.circle(float(x_pos), centre + offset, 1.8, svg.sequential_color(frac)))
        body.append(svg.text(axes.left - 8, centre + 4, name, size=10, anchor='end'))
    bottom = axes.top + axes.height
    body.append(svg.line(axes.left, bottom, axes.left + axes.width, bottom))
    for v in np.linspace(lo, hi, 5):
        body.append(svg.text(float(axes.x(v)), bottom + 15, svg.tick_label(v), size=9, anchor='middle'))
    body.append(svg.text(axes.left + axes.width / 2, bottom + 32, 'SHAP value (log-odds)', size=10, anchor='middle'))
    body.append(svg.text(axes.left + axes.width + 10, axes.top + 10, 'High', size=9, fill=svg.sequential_color(1.0)))
    body.append(svg.text(axes.left + axes.width + 10, bottom, 'Low', size=9, fill=svg.sequential_color(0.0)))
    return svg.document(660, int(bottom) + 50, body, spec.title or 'SHAP summary')


def _importance_bar(spec):
    frame = _read_artifact(spec.data_paths[0], ['rank', 'feature', 'mean_abs_shap'])
    frame = frame.sort_values('rank', kind='mergesort').head(TOP_FEATURES)
    return svg.bar_chart_svg(spec.title or 'Mean |SHAP| (top features)', frame['feature'].astype(str).tolist(),
                             frame['mean_abs_shap'].tolist(), xlabel='mean |SHAP value|', horizontal=True)


def _pdp_panel(spec):
    curves = [_read_artifact(p, ['feature', 'grid', 'response']) for p in spec.data_paths]
    if not curves:
        raise MissingArtifactError("PDP panel has no curves to draw")
    panel_w = 300
    body = []
    for k, curve in enumerate(curves):
        axes = svg.Axes(60 + k * panel_w, 50, panel_w - 90, 240,
                        (curve['grid'].min(), curve['grid'].max()), (0, 1))
        body.extend(axes.frame(xlabel=str(curve['feature'].iloc[0]), ylabel='Predicted probability' if k == 0 else None))
        body.append(svg.polyline(axes.x(curve['grid']), axes.y(curve['response']), svg.PALETTE[k % len(svg.PALETTE)], width=2))
    return svg.document(panel_w * len(curves) + 30, 350, body, spec.title or 'Partial dependence')


_RENDERERS = {
    HISTOGRAM_GRID: _histogram_grid,
    BURDEN_DISTRIBUTION: _burden_distribution,
    CORRELATION_HEATMAP: _correlation_heatmap,
    ROC: _roc,
    SHAP_BEESWARM: _shap_beeswarm,
    IMPORTANCE_BAR: _importance_bar,
    PDP_PANEL: _pdp_panel,
}


def render(spec):
    """Render a figure to an SVG string; also written to ``spec.output_path`` when set"""
    document = _RENDERERS[spec.kind](spec)
    if spec.output_path:
        os.makedirs(os.path.dirname(os.path.abspath(spec.output_path)), exist_ok=True)
        with open(spec.output_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(document)
        logger.info(f"Rendered {spec.kind} to {spec.output_path}")
    return document


def table_summary(matrix, columns=None):
    """Mean, median, IQR (linear-interpolation quartiles), min and max per analyte"""
    if isinstance(matrix, FeatureMatrix):
        frame = matrix.to_frame()
        if columns is None:
            columns = [c.name for c in matrix.columns if c.kind == CONTINUOUS and c.fill_policy != FILL_ZERO]
    else:
        frame = pd.DataFrame(matrix)
    columns = list(columns) if columns is not None else list(frame.columns)
    if len(frame) == 0 or not columns:
        raise EmptyCohortError("Cannot summarise an empty feature matrix")

    rows = []
    for name in columns:
        col = frame[name].astype(float)
        q1, median, q3 = col.quantile([0.25, 0.5, 0.75], interpolation='linear')
        rows.append({
            'variable': name,
            'mean': float(col.mean()),
            'median': float(median),
            'iqr': float(q3 - q1),
            'min': float(col.min()),
            'max': float(col.max()),
        })
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)
