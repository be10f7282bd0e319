"""Radar-chart normalization and standalone SVG emission.

Metrics arrive on wildly different scales, so each axis is normalized to
[0, 1] before plotting:

* ``fixed`` mode divides by a known metric bound and clamps;
* ``max`` mode divides by the maximum value observed across the plotted
  models (an all-zero axis is recorded and plots at zero).

Metrics where lower is better are then inverted (``1 - v``) so that a larger
polygon is always the better model.  Inversion is an involution: applying it
twice restores the normalized value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from protoscope.errors import ValidationError

#: default normalization mode and bound per metric name (sans suite prefix).
DEFAULT_BOUNDS: dict[str, tuple[str, float | None]] = {
    "vlc": ("fixed", 1.0),
    "psc": ("max", None),
    "vac": ("fixed", 1.0),
    "plc": ("max", None),
    "palc": ("fixed", 1.0),
    "pac": ("fixed", 1.0),
    "prc": ("max", None),
    "cac": ("fixed", 1.0),
    "crc": ("max", None),
    "pairwise_plc": ("max", None),
    "pairwise_palc": ("fixed", 1.0),
    "prototype_distance_intra": ("fixed", 2.0),
    "prototype_distance_inter": ("fixed", 2.0),
    "feature_distance_intra": ("fixed", 2.0),
    "feature_distance_inter": ("fixed", 2.0),
    "activation_entropy": ("fixed", math.log(10.0)),
    "object_overlap": ("fixed", 1.0),
    "background_overlap": ("fixed", 1.0),
    "inside_outside_relevance": ("fixed", 1.0),
    "consistency": ("fixed", 1.0),
    "global_size": ("max", None),
    "sparsity": ("fixed", 1.0),
    "negative_positive_ratio": ("max", None),
    "local_size": ("max", None),
    "accuracy": ("fixed", 1.0),
    "top_k_accuracy": ("fixed", 1.0),
    "f1": ("fixed", 1.0),
}


@dataclass
class RadarSpec:
    """One normalized radar axis across all plotted models."""

    metric: str
    mode: str                       # "fixed" or "max"
    bound: float                    # divisor actually used (0 = degenerate)
    inverted: bool
    values: dict[str, float] = field(default_factory=dict)  # model -> [0, 1]
    note: str | None = None


def invert_axis(value: float) -> float:
    """Flip a normalized value; an involution (invert twice = identity)."""
    return 1.0 - value


def radar_normalize(
    values_by_metric: dict[str, dict[str, float]],
    modes: dict[str, str] | None = None,
    inversions: dict[str, bool] | None = None,
    bounds: dict[str, float] | None = None,
) -> list[RadarSpec]:
    """Normalize raw per-model metric values onto [0, 1] radar axes.

    ``values_by_metric[metric][model]`` holds the raw means.  ``modes``,
    ``bounds`` and ``inversions`` override the defaults per metric; metrics
    without a known default use max mode, uninverted.
    """
    specs: list[RadarSpec] = []
    for metric in values_by_metric:
        raw = values_by_metric[metric]
        if not raw:
            raise ValidationError(f"{metric}: no model values to normalize")
        short = metric.rsplit("/", 1)[-1]
        mode, bound = DEFAULT_BOUNDS.get(short, ("max", None))
        if modes and metric in modes:
            mode = modes[metric]
        if bounds and metric in bounds:
            bound = bounds[metric]
        inverted = bool(inversions.get(metric, False)) if inversions else False
        if mode not in ("fixed", "max"):
            raise ValidationError(f"{metric}: unknown normalization mode '{mode}'")
        note = None
        if mode == "max":
            bound = max(abs(float(v)) for v in raw.values())
            if bound == 0.0:
                note = "all models report zero; axis pinned at zero"
        elif bound is None or bound <= 0:
            raise ValidationError(f"{metric}: fixed mode needs a positive bound")
        spec = RadarSpec(metric=metric, mode=mode, bound=float(bound or 0.0), inverted=inverted, note=note)
        for model, value in raw.items():
            if spec.bound == 0.0:
                norm = 0.0
            else:
                norm = min(max(float(value) / spec.bound, 0.0), 1.0)
            spec.values[model] = invert_axis(norm) if inverted else norm
        specs.append(spec)
    return specs


# ---------------------------------------------------------------------------
# SVG emission
# ---------------------------------------------------------------------------

_PALETTE = ["#2a6fdb", "#d64550", "#3a9e6e", "#9b59b6", "#e67e22", "#16a2b8"]

_SIZE = 520
_RADIUS = 190
_CENTER = _SIZE / 2


def _vertex(index: int, count: int, radius: float) -> tuple[float, float]:
    angle = 2.0 * math.pi * index / count - math.pi / 2.0
    return _CENTER + radius * math.cos(angle), _CENTER + radius * math.sin(angle)


def render_radar_svg(specs: list[RadarSpec], title: str = "") -> str:
    """Standalone SVG radar chart; one polygon per model, one axis per metric."""
    if len(specs) < 3:
        raise ValidationError(f"a radar chart needs >= 3 axes, got {len(specs)}")
    models: list[str] = []
    for spec in specs:
        for model in spec.values:
            if model not in models:
                models.append(model)
    count = len(specs)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE}" height="{_SIZE + 40 + 18 * len(models)}" '
        f'viewBox="0 0 {_SIZE} {_SIZE + 40 + 18 * len(models)}">',
        f'<title>{title or "metric radar"}</title>',
        f'<rect width="100%" height="100%" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{_CENTER:.2f}" y="24" text-anchor="middle" '
            f'font-family="sans-serif" font-size="16">{title}</text>'
        )
    for ring in (0.25, 0.5, 0.75, 1.0):
        pts = " ".join(
            f"{x:.6f},{y:.6f}"
            for x, y in (_vertex(i, count, _RADIUS * ring) for i in range(count))
        )
        parts.append(
            f'<polygon class="ring" points="{pts}" fill="none" stroke="#cccccc" stroke-width="1"/>'
        )
    for i, spec in enumerate(specs):
        x, y = _vertex(i, count, _RADIUS)
        lx, ly = _vertex(i, count, _RADIUS + 16)
        parts.append(
            f'<line class="axis" x1="{_CENTER:.6f}" y1="{_CENTER:.6f}" x2="{x:.6f}" y2="{y:.6f}" '
            f'stroke="#999999" stroke-width="1"/>'
        )
        label = spec.metric.rsplit("/", 1)[-1]
        parts.append(
            f'<text class="axis-label" x="{lx:.6f}" y="{ly:.6f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{label}</text>'
        )
    for m, model in enumerate(models):
        color = _PALETTE[m % len(_PALETTE)]
        pts = []
        for i, spec in enumerate(specs):
            value = spec.values.get(model, 0.0)
            x, y = _vertex(i, count, _RADIUS * value)
            pts.append(f"{x:.6f},{y:.6f}")
        parts.append(
            f'<polygon class="model" data-model="{model}" points="{" ".join(pts)}" '
            f'fill="{color}" fill-opacity="0.18" stroke="{color}" stroke-width="2"/>'
        )
        ly = _SIZE + 20 + 18 * m
        parts.append(f'<rect x="20" y="{ly - 9}" width="12" height="12" fill="{color}"/>')
        parts.append(
            f'<text x="38" y="{ly + 1}" font-family="sans-serif" font-size="12">{model}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
