"""
Utility functions shared across malmm-py.

This module provides path handling, text-file helpers, the seed default
and list parsing used by the CLI, configuration and file formats.
"""

import os
from pathlib import Path
from typing import IO, Any, List, Union

SEED_ENV_VAR = "MALMM_SEED"


def normalize_path(path: Union[str, Path]) -> Path:
    """
    Normalize a user-supplied path.

    Args:
        path: Path to normalize

    Returns:
        Expanded, absolute Path object
    """
    return Path(path).expanduser().resolve()


def safe_open_text(
    filepath: Union[str, Path], mode: str = "r", **kwargs: Any
) -> IO[str]:
    """
    Open a text file as UTF-8 with Unix line endings on write.

    Args:
        filepath: Path to file
        mode: File mode
        **kwargs: Additional arguments for open()

    Returns:
        File handle
    """
    if "encoding" not in kwargs:
        kwargs["encoding"] = "utf-8"
    if "newline" not in kwargs and "w" in mode:
        kwargs["newline"] = "\n"
    return open(filepath, mode, **kwargs)


def ensure_directory_exists(path: Union[str, Path]) -> Path:
    """
    Ensure a directory exists, creating it if necessary.

    Args:
        path: Directory path

    Returns:
        Normalized directory path
    """
    path = normalize_path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def get_default_seed() -> int:
    """Seed from the ``MALMM_SEED`` environment variable, or 0."""
    value = os.environ.get(SEED_ENV_VAR)
    if value is None or value.strip() == "":
        return 0
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {value!r}")


def parse_int_list(text: str) -> List[int]:
    """Parse ``"10,100,1000"`` into ``[10, 100, 1000]``."""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"Expected a comma-separated list of integers, got {text!r}")
