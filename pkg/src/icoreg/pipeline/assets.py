"""Default network weights shipped with the package."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from pathlib import Path

from ..groupnet.network import NetworkWeights, init_weights
from ..groupnet.weights_io import load_weights

DEFAULT_WEIGHTS = "default_weights.icgw"


def bundled_weights_path() -> Path | None:
    p = resources.files("icoreg").joinpath("data", DEFAULT_WEIGHTS)
    return Path(str(p)) if p.is_file() else None


@lru_cache(maxsize=4)
def _load(path: str) -> NetworkWeights:
    return load_weights(path)


def default_weights(path: str | None = None) -> NetworkWeights:
    """Weights at ``path``; else the bundled trained weights; else seeded untrained weights."""
    if path:
        return _load(str(path))
    bundled = bundled_weights_path()
    return _load(str(bundled)) if bundled else init_weights(0)
