"""Backend selection for the pairwise ball search.

The compiled extension is used when it imports; otherwise, or when
``PCDPLAN_PURE_PYTHON=1`` is set, the numpy version is used.
"""

import os

from . import _pykernels

STATUS_BOUNDARY = _pykernels.STATUS_BOUNDARY
STATUS_INTERIOR = _pykernels.STATUS_INTERIOR
STATUS_FAILED = _pykernels.STATUS_FAILED

python_ball_search = _pykernels.ball_search

try:
    from ._kernels import ball_search as compiled_ball_search
except ImportError:  # extension not built
    compiled_ball_search = None

if compiled_ball_search is not None and os.environ.get("PCDPLAN_PURE_PYTHON", "") not in ("1", "true"):
    ball_search = compiled_ball_search
    BACKEND = "cython"
else:
    ball_search = python_ball_search
    BACKEND = "python"
