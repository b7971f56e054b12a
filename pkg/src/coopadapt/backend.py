"""Kernel backend selection.

The compiled ``_fastops`` Cython extension and ``_numpyops`` expose the same
two kernels (im2col3, rotated_iou_pairs).  The choice happens once at import
time; ``COOPADAPT_BACKEND`` forces it:

  auto    compiled extension if built, numpy otherwise (default)
  numpy   always the pure-numpy kernels
  cython  require the extension; raise if it is not built
"""

from __future__ import annotations

import os

from . import _numpyops
from .errors import ConfigError


def _select():
    choice = os.environ.get("COOPADAPT_BACKEND", "auto").strip().lower()
    if choice not in {"auto", "numpy", "cython"}:
        raise ConfigError(f"COOPADAPT_BACKEND must be auto|numpy|cython, got {choice!r}")
    if choice in ("auto", "cython"):
        try:
            from . import _fastops  # type: ignore[attr-defined]

            return "cython", _fastops
        except ImportError:
            if choice == "cython":
                raise ConfigError(
                    "COOPADAPT_BACKEND=cython but coopadapt._fastops is not built; "
                    "run `python setup.py build_ext --inplace` or reinstall"
                ) from None
    return "numpy", _numpyops


BACKEND_NAME, _impl = _select()

im2col3 = _impl.im2col3
rotated_iou_pairs = _impl.rotated_iou_pairs
# box_corners has no compiled variant; it is cheap and shared.
box_corners = _numpyops.box_corners


def active_backend() -> str:
    return BACKEND_NAME
