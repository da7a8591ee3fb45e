"""histocl: continual-learning benchmarks on stain-augmented histology-style tiles.

Subpackages: ``stain`` (optical-density color model and domain shifts),
``data`` (datasets, splits, synthetic tiles), ``nncore`` (self-contained
classifier and SGD), ``scenario`` (experience streams), ``strategy``
(continual-learning methods), ``harness`` (experiments, metrics, CLI).
"""

__version__ = "0.1.0"
