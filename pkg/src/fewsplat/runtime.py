"""Process-wide runtime knobs: floating-point width and worker count.

Both are read from the environment once per call site so tests can override
them with monkeypatch:

    SPLAT_PRECISION  "f32" (default) or "f64" -- storage dtype for scene
                     parameters, optimizer state and rendered outputs.
                     Internal blending/adjoint math always runs in float64.
    SPLAT_THREADS    worker count for the tile loops (default 1).
"""

from __future__ import annotations

import os

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}


def active_dtype() -> np.dtype:
    """Storage dtype selected by SPLAT_PRECISION."""
    key = os.environ.get("SPLAT_PRECISION", "f32").strip().lower()
    if key not in _PRECISIONS:
        raise ValueError(f"SPLAT_PRECISION must be one of {sorted(_PRECISIONS)}, got {key!r}")
    return np.dtype(_PRECISIONS[key])


def worker_count() -> int:
    """Tile-loop worker count selected by SPLAT_THREADS (>= 1)."""
    raw = os.environ.get("SPLAT_THREADS", "1").strip()
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"SPLAT_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)
