# utils/log.py
from __future__ import annotations
import logging
import os

try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass

_CONFIGURED = False


def configure_logging(level: str | None = None) -> None:
    """Install one stderr handler that tags records like `[bats_loop] message`."""
    global _CONFIGURED
    lvl = (level or os.getenv("BATS_LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger("bats")
    if not _CONFIGURED:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("[%(tag)s] %(message)s"))
        handler.addFilter(_TagFilter())
        root.addHandler(handler)
        root.propagate = False
        _CONFIGURED = True
    root.setLevel(lvl)


class _TagFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        record.tag = record.name.rsplit(".", 1)[-1]
        return True


def get_logger(name: str) -> logging.Logger:
    """`get_logger(__name__)` → logger under the shared `bats` root."""
    short = name.rsplit(".", 1)[-1]
    return logging.getLogger(f"bats.{short}")
