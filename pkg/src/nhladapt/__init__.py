"""Test-time adaptation of small CNNs under distribution shift.

A frozen source classifier is adapted batch-by-batch on unlabeled test
streams: the first convolution layer learns through a soft winner-take-all
Hebbian rule, and a designated early-block parameter subset descends the
prediction-entropy objective.  Baselines (source, norm, tent, oja) share
the same streaming protocol.
"""

__version__ = "0.1.0"

from .engine import MethodSpec, run_adaptation, run_ablation_suite  # noqa: F401
from .rng import Rng  # noqa: F401
