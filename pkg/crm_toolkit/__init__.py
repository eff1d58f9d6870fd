"""Compositional risk minimization on additive energy distributions."""

__version__ = "0.1.0"

from .attribute_space import AttributeSpec, GroupSet, decode, full_grid, one_hot_encode  # noqa: E402
from .errors import CrmError  # noqa: E402
from .settings import load_settings  # noqa: E402

__all__ = [
    "__version__",
    "AttributeSpec",
    "GroupSet",
    "CrmError",
    "decode",
    "full_grid",
    "load_settings",
    "one_hot_encode",
]
