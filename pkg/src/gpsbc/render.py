"""Deterministic SVG rendering of rank histograms.

Byte-for-byte reproducibility is a hard requirement (golden-file tests and
rerun checks diff these files), so: every coordinate is formatted with six
decimal places, attributes appear in a fixed order, and nothing
time-dependent or environment-dependent enters the document.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np
from scipy.stats import binom

PANEL_WIDTH = 460
PANEL_HEIGHT = 300
MARGIN_LEFT = 52
MARGIN_RIGHT = 16
MARGIN_TOP = 42
MARGIN_BOTTOM = 34

_BAR_FILL = "#4477aa"
_BAND_FILL = "#e8e8e8"
_REFERENCE_STROKE = "#cc3311"
_AXIS_STROKE = "#222222"
_TEXT_FILL = "#222222"


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def count_band(total: int, n_bins: int, coverage: float = 0.99) -> tuple:
    """Central `coverage` interval for one bin's count under uniform ranks.

    Each bin count is Binomial(total, 1/n_bins); the band is the pair of
    equal-tail quantiles, the shaded region a calibrated eye should expect
    bars to stay inside.
    """
    tail = (1.0 - coverage) / 2.0
    lo = float(binom.ppf(tail, total, 1.0 / n_bins))
    hi = float(binom.ppf(1.0 - tail, total, 1.0 / n_bins))
    return lo, hi


def _panel(counts: np.ndarray, title: str, subtitle: str, x_offset: float) -> list:
    counts = np.asarray(counts, dtype=np.float64)
    n_bins = counts.shape[0]
    total = float(counts.sum())
    expected = total / n_bins
    lo, hi = count_band(int(round(total)), n_bins)

    plot_w = PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    y_max = max(float(counts.max()), hi, expected) * 1.08
    if y_max <= 0:
        y_max = 1.0

    def x_of(bin_edge: float) -> float:
        return x_offset + MARGIN_LEFT + plot_w * bin_edge / n_bins

    def y_of(count: float) -> float:
        return MARGIN_TOP + plot_h * (1.0 - count / y_max)

    parts = []
    parts.append(
        f'<text class="title" x="{_fmt(x_offset + MARGIN_LEFT)}" y="20" '
        f'fill="{_TEXT_FILL}" font-size="14" font-weight="bold">{escape(title)}</text>'
    )
    if subtitle:
        parts.append(
            f'<text class="subtitle" x="{_fmt(x_offset + MARGIN_LEFT)}" y="36" '
            f'fill="{_TEXT_FILL}" font-size="11">{escape(subtitle)}</text>'
        )
    # shaded 99% band, then reference line, then bars, then axes
    parts.append(
        f'<rect class="band" x="{_fmt(x_of(0))}" y="{_fmt(y_of(hi))}" '
        f'width="{_fmt(plot_w)}" height="{_fmt(max(y_of(lo) - y_of(hi), 0.0))}" '
        f'fill="{_BAND_FILL}"/>'
    )
    parts.append(
        f'<line class="reference" x1="{_fmt(x_of(0))}" y1="{_fmt(y_of(expected))}" '
        f'x2="{_fmt(x_of(n_bins))}" y2="{_fmt(y_of(expected))}" '
        f'stroke="{_REFERENCE_STROKE}" stroke-width="1.5" stroke-dasharray="6 3"/>'
    )
    gap = min(1.0, plot_w / n_bins * 0.12)
    for b in range(n_bins):
        x0 = x_of(b) + gap / 2
        width = max(x_of(b + 1) - x_of(b) - gap, 0.2)
        top = y_of(float(counts[b]))
        parts.append(
            f'<rect class="bar" x="{_fmt(x0)}" y="{_fmt(top)}" '
            f'width="{_fmt(width)}" height="{_fmt(max(y_of(0.0) - top, 0.0))}" '
            f'fill="{_BAR_FILL}"/>'
        )
    base = y_of(0.0)
    parts.append(
        f'<line class="axis" x1="{_fmt(x_of(0))}" y1="{_fmt(base)}" '
        f'x2="{_fmt(x_of(n_bins))}" y2="{_fmt(base)}" stroke="{_AXIS_STROKE}" stroke-width="1"/>'
    )
    parts.append(
        f'<text class="ylabel" x="{_fmt(x_offset + MARGIN_LEFT - 6)}" '
        f'y="{_fmt(y_of(expected) + 4)}" fill="{_TEXT_FILL}" font-size="10" '
        f'text-anchor="end">{_fmt_count(expected)}</text>'
    )
    parts.append(
        f'<text class="xlabel" x="{_fmt(x_of(n_bins / 2))}" '
        f'y="{_fmt(base + 22)}" fill="{_TEXT_FILL}" font-size="11" '
        f'text-anchor="middle">rank bin (of {n_bins})</text>'
    )
    return parts


def _fmt_count(v: float) -> str:
    if abs(v - round(v)) < 1e-9:
        return str(int(round(v)))
    return f"{v:.2f}"


def _document(width: int, height: int, body: list) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    )
    background = f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>'
    return "\n".join([head, background, *body, "</svg>"]) + "\n"


def render_histogram(counts: np.ndarray, annotations: dict | None = None) -> str:
    """One rank histogram as a standalone SVG document string.

    Draws one bar per bin over a shaded 99% per-bin count band and a
    dashed reference line at the expected uniform count.  `annotations`
    may carry "title" and "subtitle" strings.
    """
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.shape[0] < 1:
        raise ValueError(f"expected a nonempty 1-d histogram, got shape {counts.shape}")
    annotations = annotations or {}
    body = _panel(
        counts,
        str(annotations.get("title", "rank histogram")),
        str(annotations.get("subtitle", "")),
        x_offset=0.0,
    )
    return _document(PANEL_WIDTH, PANEL_HEIGHT, body)


def render_side_by_side(left_counts: np.ndarray, right_counts: np.ndarray,
                        left_annotations: dict | None = None,
                        right_annotations: dict | None = None) -> str:
    """Two rank histograms in one SVG, left and right panels."""
    left_counts = np.asarray(left_counts)
    right_counts = np.asarray(right_counts)
    if left_counts.ndim != 1 or right_counts.ndim != 1:
        raise ValueError("both panels need 1-d histograms")
    la = left_annotations or {}
    ra = right_annotations or {}
    body = _panel(left_counts, str(la.get("title", "before")), str(la.get("subtitle", "")), 0.0)
    body += _panel(right_counts, str(ra.get("title", "after")), str(ra.get("subtitle", "")),
                   float(PANEL_WIDTH))
    return _document(2 * PANEL_WIDTH, PANEL_HEIGHT, body)
