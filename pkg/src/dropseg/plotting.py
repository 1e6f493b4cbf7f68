"""Figure output for reports.

Matplotlib renders the PNG figures written next to the JSON/CSV outputs of
``eval`` and ``compare``. ``write_roc_svg`` is separate: it emits a small
hand-built SVG so ``plot`` needs no renderer at all.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import RocCurve  # noqa: E402

PALETTE = ["#0072B2", "#009E73", "#D55E00", "#CC79A7", "#E69F00", "#56B4E9", "#F0E442", "#000000"]

RC = {
    "axes.labelsize": 10,
    "font.size": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "dropseg",
}

# fixed metadata keeps PNG bytes identical across reruns
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def roc_figure(curves: Mapping[str, RocCurve], path, title: str = "", mean_curve=None) -> None:
    """Overlay per-case ROC curves, optionally with a bold mean curve."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for name, c in curves.items():
            ax.plot(c.fpr, c.tpr, lw=0.8, alpha=0.5, color="0.4")
        if mean_curve is not None:
            grid, tpr = mean_curve
            ax.plot(grid, tpr, lw=2.0, color=PALETTE[1], label="mean")
            ax.legend(loc="lower right", frameon=False)
        ax.plot([0, 1], [0, 1], ls=":", lw=0.8, color="0.7")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def mean_roc(curves: Sequence[RocCurve], n_points: int = 201):
    """Vertical average of ROC curves on a regular fpr grid."""
    grid = np.linspace(0.0, 1.0, n_points)
    tprs = [np.interp(grid, c.fpr, c.tpr) for c in curves]
    return grid, np.mean(tprs, axis=0)


def comparison_boxplot(values: Mapping[str, Mapping[str, Sequence[float]]], path,
                       pvalues: Mapping[str, float] | None = None) -> None:
    """One panel per metric, one box per model."""
    metrics = list(values)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(metrics), figsize=(2.6 * len(metrics), 3.2), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            models = list(values[metric])
            bp = ax.boxplot([values[metric][m] for m in models], patch_artist=True, widths=0.6)
            ax.set_xticks(range(1, len(models) + 1), models)
            for patch, color in zip(bp["boxes"], PALETTE):
                patch.set_facecolor(color)
                patch.set_alpha(0.6)
            title = metric
            if pvalues and metric in pvalues:
                title += f"\np = {pvalues[metric]:.3g}"
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


# --------------------------------------------------------------------------
# dependency-free SVG

SVG_SIZE = 400
_MARGIN = 50


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def write_roc_svg(curves: Sequence[tuple[str, RocCurve]], path) -> None:
    """ROC polylines on the unit square, one per curve, legend by name."""
    inner = SVG_SIZE - 2 * _MARGIN

    def xy(f, t):
        return _fmt(_MARGIN + f * inner), _fmt(_MARGIN + (1.0 - t) * inner)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" '
        f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
        f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{inner}" height="{inner}" '
        'fill="none" stroke="#000000" stroke-width="1"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN + inner}" x2="{_MARGIN + inner}" y2="{_MARGIN}" '
        'stroke="#bbbbbb" stroke-dasharray="4 4"/>',
    ]
    for v in (0.0, 0.5, 1.0):
        x, _ = xy(v, 0)
        _, y = xy(0, v)
        out.append(f'<text x="{x}" y="{SVG_SIZE - _MARGIN + 16}" font-size="11" '
                   f'text-anchor="middle">{v:g}</text>')
        out.append(f'<text x="{_MARGIN - 8}" y="{y}" font-size="11" text-anchor="end">{v:g}</text>')
    out.append(f'<text x="{SVG_SIZE / 2:g}" y="{SVG_SIZE - 12}" font-size="12" '
               'text-anchor="middle">False positive rate</text>')
    out.append(f'<text x="14" y="{SVG_SIZE / 2:g}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {SVG_SIZE / 2:g})">True positive rate</text>')
    for n, (name, c) in enumerate(curves):
        color = PALETTE[n % len(PALETTE)]
        pts = " ".join(",".join(xy(f, t)) for f, t in zip(c.fpr, c.tpr))
        out.append(f'<polyline id="roc-{n}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5" points="{pts}"/>')
        ly = _MARGIN + inner - 12 - 16 * (len(curves) - 1 - n)
        lx = _MARGIN + inner - 130
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" '
                   'stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
