"""Interpretability metric primitives, grouped by what they compare.

* :mod:`protoscope.metrics.change` — original-vs-perturbed change metrics;
* :mod:`protoscope.metrics.contrast` — between-class separation and
  activation-distribution metrics;
* :mod:`protoscope.metrics.grounding` — agreement with ground-truth masks and
  part annotations, plus model-size and task-performance measures.
"""

from protoscope.metrics import change, contrast, grounding

__all__ = ["change", "contrast", "grounding"]
