"""Shared helpers: structured logging, seed forking and determinism."""

import logging
import os
import sys
import zlib
from typing import Optional

import numpy as np
import torch
from pythonjsonlogger import jsonlogger

LOG_LEVEL_ENV = "DENSITY_ADAPT_LOG_LEVEL"
DETERMINISTIC_ENV = "DENSITY_ADAPT_DETERMINISTIC"


def setup_logger(name: str, level: Optional[str] = None) -> logging.Logger:
    """
    Create (or fetch) a logger that renders records as JSON lines.

    Fields passed through ``extra={...}`` become top-level JSON keys.

    Args:
        name: Dotted logger name, e.g. ``density_adapt.training``
        level: Optional level name. Defaults to $DENSITY_ADAPT_LOG_LEVEL or INFO.

    Returns:
        Configured logger
    """
    logger = logging.getLogger(name)
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(
            jsonlogger.JsonFormatter("%(asctime)s %(levelname)s %(name)s %(message)s")
        )
        logger.addHandler(handler)
        logger.propagate = False
    logger.setLevel((level or os.environ.get(LOG_LEVEL_ENV, "INFO")).upper())
    return logger


def fork_seed(seed: int, name: str) -> int:
    """
    Derive an independent seed for a named consumer of randomness.

    The derivation is stable across processes and platforms, so every
    consumer (counter init, samplers, splits...) sees the same stream for
    the same root seed regardless of which other consumers exist.

    Args:
        seed: Root seed
        name: Consumer name

    Returns:
        A 63-bit integer seed
    """
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(seed: int, name: str) -> torch.Generator:
    """Return a CPU torch generator seeded from ``fork_seed(seed, name)``."""
    generator = torch.Generator()
    generator.manual_seed(fork_seed(seed, name))
    return generator


def deterministic_mode_requested() -> bool:
    """True when $DENSITY_ADAPT_DETERMINISTIC is set to a truthy value."""
    return os.environ.get(DETERMINISTIC_ENV, "").lower() in {"1", "true", "yes", "on"}


def enable_determinism(enabled: bool) -> None:
    """Toggle torch's deterministic algorithms."""
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    torch.use_deterministic_algorithms(enabled)


def resolve_device(name: str) -> torch.device:
    """Map ``"auto"`` to cuda when available, otherwise pass the name through."""
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)
