"""Python bindings for the ikd segmentation network.

Settings are passed as plain dicts; values may be str, int, float or bool.
"""

from . import _ikd
from ._ikd import (
    CLASS_NAMES,
    ContractError,
    FormatError,
    NumericFault,
    Scene,
    colorize_labels,
    confusion_matrix,
    knn,
    load_scene,
    metrics,
    split_811,
    tile_offsets,
    tile_scene,
    visualize_feature_map,
)


def _settings(d):
    out = {}
    for k, v in (d or {}).items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        out[str(k)] = repr(v) if isinstance(v, float) else str(v)
    return out


def synth_scene(seed, **options):
    return _ikd.synth_scene(seed, _settings({"synth_" + k: v for k, v in options.items()}))


def micro_config():
    return dict(_ikd.micro_config())


def default_config():
    return dict(_ikd.default_config())


def network_grad_check(seed=0, entries=3, tol=1e-3, **settings):
    return _ikd.network_grad_check(_settings(settings), seed, entries, tol)


class Model(_ikd.Model):
    """IKD network plus its optimizer state."""

    def __init__(self, config=None, **settings):
        merged = dict(config or {})
        merged.update(settings)
        super().__init__(_settings(merged))


__all__ = [
    "CLASS_NAMES", "ContractError", "FormatError", "NumericFault", "Model", "Scene",
    "colorize_labels", "confusion_matrix", "default_config", "knn", "load_scene", "metrics",
    "micro_config", "network_grad_check", "split_811", "synth_scene", "tile_offsets",
    "tile_scene", "visualize_feature_map",
]
