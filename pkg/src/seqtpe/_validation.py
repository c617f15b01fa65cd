"""Input checks shared by the analysis estimators."""
from __future__ import annotations

import numpy as np

from .tagio import TagStream


def check_stream(stream) -> TagStream:
    if not isinstance(stream, TagStream):
        raise TypeError(f"expected a TagStream, got {type(stream).__name__}")
    if not stream.is_sorted():
        raise ValueError("tag stream must be sorted by time, then channel")
    return stream


def check_channels(channels, name: str = "channels") -> np.ndarray:
    if isinstance(channels, (int, np.integer)):
        channels = [channels]
    arr = np.unique(np.asarray(list(channels), dtype=np.int64))
    if arr.size == 0:
        raise ValueError(f"{name} must not be empty")
    return arr


def check_bin_width(rep_period: int, bin_width: int) -> tuple:
    rep_period, bin_width = int(rep_period), int(bin_width)
    if bin_width <= 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    if rep_period % bin_width:
        raise ValueError(f"bin_width {bin_width} does not divide rep_period {rep_period}")
    return rep_period, bin_width


def check_positive(value, name: str) -> float:
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value
