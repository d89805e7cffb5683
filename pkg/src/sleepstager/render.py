"""Hypnogram rendering: ground truth stacked above a prediction.

Two outputs, both deterministic: a plain-text grid and a static SVG with
one step plot per track. Stages are drawn top to bottom as W, REM, N1, N2,
N3, the usual clinical ordering.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .signal_io import STAGE_NAMES, StageLabel

DISPLAY_ORDER = (StageLabel.W, StageLabel.REM, StageLabel.N1, StageLabel.N2, StageLabel.N3)


def _check(truth, predicted) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(truth, dtype=np.int64)
    p = np.asarray(predicted, dtype=np.int64)
    if t.size == 0 or p.size == 0:
        raise ShapeError("cannot render an empty hypnogram")
    if t.shape != p.shape:
        raise ShapeError(f"length mismatch: {t.size} truth vs {p.size} predicted epochs")
    if min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= len(STAGE_NAMES):
        raise ShapeError("stage index out of range")
    return t, p


def render_text(truth, predicted) -> str:
    """One row per stage and track; '#' marks the epochs in that stage."""
    t, p = _check(truth, predicted)
    width = max(len(STAGE_NAMES[s]) for s in DISPLAY_ORDER)
    lines = []
    for title, seq in (("truth", t), ("predicted", p)):
        lines.append(title)
        for s in DISPLAY_ORDER:
            row = "".join("#" if v == s else "." for v in seq)
            lines.append(f"  {STAGE_NAMES[s]:<{width}} {row}")
    agree = int(np.sum(t == p))
    lines.append(f"agreement {agree}/{t.size}")
    return "\n".join(lines) + "\n"


def _track(seq: np.ndarray, x0: float, y0: float, dx: float, dy: float) -> str:
    level = {int(s): i for i, s in enumerate(DISPLAY_ORDER)}
    pts = []
    for i, v in enumerate(seq):
        y = y0 + level[int(v)] * dy
        pts.append(f"{x0 + i * dx:.2f},{y:.2f}")
        pts.append(f"{x0 + (i + 1) * dx:.2f},{y:.2f}")
    return f'<polyline fill="none" stroke="black" stroke-width="1.5" points="{" ".join(pts)}"/>'


def render_svg(truth, predicted, epoch_px: float = 2.0, stage_px: float = 14.0) -> str:
    t, p = _check(truth, predicted)
    n = t.size
    margin, label_w, gap = 10.0, 40.0, 30.0
    track_h = stage_px * (len(DISPLAY_ORDER) - 1)
    width = margin * 2 + label_w + n * epoch_px
    height = margin * 2 + 2 * track_h + gap + 2 * stage_px
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{width:.0f}" height="{height:.0f}" viewBox="0 0 {width:.2f} {height:.2f}">',
        f'<rect width="{width:.2f}" height="{height:.2f}" fill="white"/>',
    ]
    x0 = margin + label_w
    for k, (title, seq) in enumerate((("truth", t), ("predicted", p))):
        y0 = margin + stage_px + k * (track_h + gap + stage_px)
        parts.append(f'<text x="{margin:.2f}" y="{y0 - 6:.2f}" font-family="monospace" '
                     f'font-size="10">{title}</text>')
        for i, s in enumerate(DISPLAY_ORDER):
            y = y0 + i * stage_px
            parts.append(f'<line x1="{x0:.2f}" y1="{y:.2f}" x2="{x0 + n * epoch_px:.2f}" '
                         f'y2="{y:.2f}" stroke="#dddddd" stroke-width="0.5"/>')
            parts.append(f'<text x="{margin:.2f}" y="{y + 3:.2f}" font-family="monospace" '
                         f'font-size="9">{STAGE_NAMES[s]}</text>')
        parts.append(_track(seq, x0, y0, epoch_px, stage_px))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_hypnogram(truth: Sequence[int], predicted: Sequence[int], out_path) -> tuple[Path, Path]:
    """Write ``<out>.svg`` and ``<out>.txt``; returns both paths."""
    out = Path(out_path)
    base = out.with_suffix("") if out.suffix in (".svg", ".txt") else out
    svg, txt = base.with_suffix(".svg"), base.with_suffix(".txt")
    svg_text, plain = render_svg(truth, predicted), render_text(truth, predicted)
    base.parent.mkdir(parents=True, exist_ok=True)
    svg.write_text(svg_text)
    txt.write_text(plain)
    return svg, txt
