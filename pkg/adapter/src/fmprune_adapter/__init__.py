"""PyTorch-side glue for the fmprune engine.

Exports activations, weights, and the model-graph JSON from a live model,
and applies a pruning plan back onto it. All interchange happens through
the engine's NPY + JSON file formats; there is no in-process coupling.
"""


class AdapterError(Exception):
    pass


class UnsupportedLayer(AdapterError):
    pass


class PlanGraphMismatch(AdapterError):
    pass


from .blocks import PreActBottleneck  # noqa: E402
from .export import ExportSession, export_all  # noqa: E402
from .apply import apply_plan  # noqa: E402

__all__ = [
    "AdapterError",
    "UnsupportedLayer",
    "PlanGraphMismatch",
    "PreActBottleneck",
    "ExportSession",
    "export_all",
    "apply_plan",
]
