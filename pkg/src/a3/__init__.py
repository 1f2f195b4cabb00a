"""Source-free active domain adaptation on synthetic glyph bundles.

The package trains a source model with swap-prediction self-supervision,
selects a target core-set with hybrid uncertainty/diversity acquisition,
and adapts the model with an adversarial and regularized objective. The
`a3` console script drives the full workflow; the modules compose the
same pieces programmatically.
"""

__version__ = "0.1.0"
