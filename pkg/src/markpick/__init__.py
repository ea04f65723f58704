"""Plug-and-play mark-and-pick harness for open-vocabulary detection.

Pipeline: extract target subjects from a referring expression, position
candidate boxes with an open-vocabulary detector and render numbered marks,
then ask a multimodal model to pick the mark matching the expression.
Includes the IoU / Acc@T / delta benchmark stack and an ablation harness.
"""

__version__ = "0.1.0"

from .dataset import Box, QuerySample, SplitManifest  # noqa: F401
from .errors import MarkpickError  # noqa: F401
