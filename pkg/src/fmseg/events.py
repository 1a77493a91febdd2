"""Line-delimited JSON progress/warning events on standard error.

Verbosity is controlled by the FMSEG_LOG environment variable
(error|warn|info|debug); default shows warnings and errors. Events carry
no timestamps so identical runs produce identical streams.
"""

from __future__ import annotations

import json
import os
import sys

_LEVELS = {"error": 0, "warn": 1, "info": 2, "debug": 3}


def _threshold() -> int:
    name = os.environ.get("FMSEG_LOG", "warn").lower()
    return _LEVELS.get(name, 1)


def emit(level: str, event: str, **fields) -> None:
    if _LEVELS[level] > _threshold():
        return
    doc = {"level": level, "event": event}
    doc.update(fields)
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    sys.stderr.flush()
