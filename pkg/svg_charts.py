"""
Deterministic SVG building blocks.

Every function returns markup as a string. Coordinates are printed with a
fixed number of decimals so identical inputs give byte-identical output.
"""
from html import escape

import numpy as np

FONT = 'font-family="Helvetica, Arial, sans-serif"'
PALETTE = ('#1f77b4', '#d62728', '#2ca02c', '#9467bd', '#ff7f0e', '#8c564b')
AXIS_COLOR = '#333333'
GRID_COLOR = '#dddddd'


def num(value):
    """Fixed two-decimal rendering; avoids '-0.00'"""
    text = f"{float(value):.2f}"
    return '0.00' if text == '-0.00' else text


def tick_label(value):
    value = float(value)
    if value != 0 and (abs(value) >= 1e4 or abs(value) < 1e-2):
        return f"{value:.1e}"
    return f"{value:.3g}"


def document(width, height, body, title=None):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        parts.append(text(width / 2, 22, title, size=15, anchor='middle', weight='bold'))
    parts.extend(body)
    parts.append('</svg>')
    return '\n'.join(parts) + '\n'


def text(x, y, content, size=11, anchor='start', weight='normal', rotate=None, fill=AXIS_COLOR):
    transform = f' transform="rotate({rotate} {num(x)} {num(y)})"' if rotate is not None else ''
    return (f'<text x="{num(x)}" y="{num(y)}" font-size="{size}" text-anchor="{anchor}" '
            f'font-weight="{weight}" fill="{fill}" {FONT}{transform}>{escape(str(content))}</text>')


def rect(x, y, w, h, fill, stroke=None, opacity=None):
    extra = f' stroke="{stroke}" stroke-width="0.5"' if stroke else ''
    if opacity is not None:
        extra += f' fill-opacity="{num(opacity)}"'
    return f'<rect x="{num(x)}" y="{num(y)}" width="{num(max(w, 0))}" height="{num(max(h, 0))}" fill="{fill}"{extra}/>'


def line(x1, y1, x2, y2, color=AXIS_COLOR, width=1.0, dashed=False):
    dash = ' stroke-dasharray="6 4"' if dashed else ''
    return (f'<line x1="{num(x1)}" y1="{num(y1)}" x2="{num(x2)}" y2="{num(y2)}" '
            f'stroke="{color}" stroke-width="{num(width)}"{dash}/>')


def polyline(xs, ys, color, width=1.5, label=None):
    points = ' '.join(f'{num(x)},{num(y)}' for x, y in zip(xs, ys))
    title = f'<title>{escape(label)}</title>' if label else ''
    return (f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="{num(width)}">'
            f'{title}</polyline>')


def circle(x, y, r, fill, opacity=0.8):
    return f'<circle cx="{num(x)}" cy="{num(y)}" r="{num(r)}" fill="{fill}" fill-opacity="{num(opacity)}"/>'


class Axes:
    """Linear mapping from data coordinates to a pixel box"""

    def __init__(self, left, top, width, height, xlim, ylim):
        self.left, self.top, self.width, self.height = left, top, width, height
        self.xlim = self._pad(xlim)
        self.ylim = self._pad(ylim)

    @staticmethod
    def _pad(lim):
        lo, hi = float(lim[0]), float(lim[1])
        if hi <= lo:
            span = abs(lo) * 0.5 if lo else 0.5
            return lo - span, hi + span
        return lo, hi

    def x(self, value):
        lo, hi = self.xlim
        return self.left + (np.asarray(value, dtype=float) - lo) / (hi - lo) * self.width

    def y(self, value):
        lo, hi = self.ylim
        return self.top + self.height - (np.asarray(value, dtype=float) - lo) / (hi - lo) * self.height

    def frame(self, xlabel=None, ylabel=None, ticks=4):
        bottom = self.top + self.height
        parts = [
            line(self.left, bottom, self.left + self.width, bottom),
            line(self.left, self.top, self.left, bottom),
        ]
        for v in np.linspace(*self.xlim, ticks + 1):
            px = float(self.x(v))
            parts.append(line(px, bottom, px, bottom + 4))
            parts.append(text(px, bottom + 15, tick_label(v), size=9, anchor='middle'))
        for v in np.linspace(*self.ylim, ticks + 1):
            py = float(self.y(v))
            parts.append(line(self.left - 4, py, self.left, py))
            parts.append(text(self.left - 6, py + 3, tick_label(v), size=9, anchor='end'))
        if xlabel:
            parts.append(text(self.left + self.width / 2, bottom + 30, xlabel, size=10, anchor='middle'))
        if ylabel:
            cx, cy = self.left - 38, self.top + self.height / 2
            parts.append(text(cx, cy, ylabel, size=10, anchor='middle', rotate=-90))
        return parts


def diverging_color(value):
    """Blue (-1) through white (0) to red (+1)"""
    v = float(np.clip(value, -1.0, 1.0))
    if np.isnan(v):
        return '#cccccc'
    if v >= 0:
        r, g, b = 255, round(255 * (1 - v)), round(255 * (1 - v))
    else:
        r, g, b = round(255 * (1 + v)), round(255 * (1 + v)), 255
    return f'#{r:02x}{g:02x}{b:02x}'


def sequential_color(fraction):
    """Low values blue, high values red"""
    f = float(np.clip(fraction, 0.0, 1.0))
    r = round(30 + 200 * f)
    b = round(230 - 200 * f)
    return f'#{r:02x}40{b:02x}'


def legend(x, y, labels, colors, dashed=()):
    parts = []
    for i, (label, color) in enumerate(zip(labels, colors)):
        yy = y + i * 16
        parts.append(line(x, yy, x + 22, yy, color=color, width=2, dashed=label in dashed))
        parts.append(text(x + 28, yy + 4, label, size=10))
    return parts


def bar_chart_svg(title, categories, values, xlabel=None, ylabel=None, width=640, height=400, horizontal=False):
    """Vertical count bars or horizontal ranked bars"""
    values = [float(v) for v in values]
    body = []
    if not values:
        return document(width, height, body, title)
    top_value = max(max(values), 0.0) or 1.0
    if horizontal:
        left, top = 150, 40
        plot_w, plot_h = width - left - 40, height - top - 50
        band = plot_h / len(values)
        for i, (cat, v) in enumerate(zip(categories, values)):
            y = top + i * band
            w = v / top_value * plot_w
            body.append(rect(left, y + band * 0.15, w, band * 0.7, PALETTE[0]))
            body.append(text(left - 6, y + band / 2 + 4, cat, size=10, anchor='end'))
            body.append(text(left + w + 4, y + band / 2 + 4, f"{v:.4f}", size=9))
        body.append(line(left, top, left, top + plot_h))
        if xlabel:
            body.append(text(left + plot_w / 2, height - 15, xlabel, size=10, anchor='middle'))
        return document(width, height, body, title)

    axes = Axes(60, 40, width - 90, height - 90, (-0.5, len(values) - 0.5), (0, top_value))
    band = axes.width / len(values)
    for i, (cat, v) in enumerate(zip(categories, values)):
        x0 = float(axes.x(i)) - band * 0.4
        y0 = float(axes.y(v))
        body.append(rect(x0, y0, band * 0.8, axes.top + axes.height - y0, PALETTE[0]))
        body.append(text(float(axes.x(i)), axes.top + axes.height + 15, cat, size=10, anchor='middle'))
    bottom = axes.top + axes.height
    body.append(line(axes.left, bottom, axes.left + axes.width, bottom))
    body.append(line(axes.left, axes.top, axes.left, bottom))
    for v in np.linspace(0, top_value, 5):
        py = float(axes.y(v))
        body.append(line(axes.left - 4, py, axes.left, py))
        body.append(text(axes.left - 6, py + 3, tick_label(v), size=9, anchor='end'))
    if xlabel:
        body.append(text(axes.left + axes.width / 2, height - 15, xlabel, size=10, anchor='middle'))
    if ylabel:
        body.append(text(18, axes.top + axes.height / 2, ylabel, size=10, anchor='middle', rotate=-90))
    return document(width, height, body, title)
