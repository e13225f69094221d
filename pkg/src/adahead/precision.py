"""Global floating-point precision switch.

Runtime code runs in 32-bit floats; gradient checking and the numeric test
suite run in 64-bit. The active precision is a process-global setting, taken
from the ``ADAHEAD_PRECISION`` environment variable (``f32`` or ``f64``) at
import time and switchable afterwards via :func:`set_precision` or the
:class:`precision` context manager.
"""

from __future__ import annotations

import os

import numpy as np

_NAMES = {"f32": np.float32, "f64": np.float64}

_active = _NAMES.get(os.environ.get("ADAHEAD_PRECISION", "f32"))
if _active is None:
    raise ValueError(
        f"ADAHEAD_PRECISION must be one of {sorted(_NAMES)}, "
        f"got {os.environ['ADAHEAD_PRECISION']!r}"
    )


def dtype() -> np.dtype:
    """The numpy dtype new tensors are created with."""
    return _active


def precision_name() -> str:
    return "f32" if _active == np.float32 else "f64"


def set_precision(name: str) -> None:
    global _active
    if name not in _NAMES:
        raise ValueError(f"precision must be one of {sorted(_NAMES)}, got {name!r}")
    _active = _NAMES[name]


class precision:
    """Context manager that temporarily switches the global precision."""

    def __init__(self, name: str):
        self._name = name
        self._saved: str | None = None

    def __enter__(self) -> "precision":
        self._saved = precision_name()
        set_precision(self._name)
        return self

    def __exit__(self, *exc) -> None:
        set_precision(self._saved)
