# htclab/units.py - parsing and formatting of unit-suffixed config values
import re
from typing import Union

NS_PER_SEC = 1_000_000_000

_NUMBER = r"([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)"
_SIZE_RE = re.compile(rf"^{_NUMBER}\s*([KMG]i?B?|B)?$", re.IGNORECASE)
_RATE_RE = re.compile(rf"^{_NUMBER}\s*([KMG])?(?:b/?s|bps)?$", re.IGNORECASE)
_TIME_RE = re.compile(rf"^{_NUMBER}\s*(ns|us|µs|ms|s)?$", re.IGNORECASE)

# Buffer sizes follow the "128K ... 4M" axis, so byte suffixes are binary.
_SIZE_FACTORS = {"": 1, "b": 1, "k": 1024, "m": 1024 ** 2, "g": 1024 ** 3}
_RATE_FACTORS = {"": 1, "k": 1e3, "m": 1e6, "g": 1e9}
_TIME_FACTORS = {"": NS_PER_SEC, "s": NS_PER_SEC, "ms": 1_000_000, "us": 1_000, "µs": 1_000, "ns": 1}

Number = Union[int, float, str]


def parse_size(value: Number) -> int:
    """Parse a byte size such as `128K`, `4M` or `1500`"""
    if isinstance(value, bool):
        raise ValueError("size must be a number")
    if isinstance(value, (int, float)):
        return int(value)
    match = _SIZE_RE.match(value.strip())
    if not match:
        raise ValueError(f"invalid size {value!r}")
    number, suffix = match.groups()
    key = (suffix or "")[:1].lower()
    return int(round(float(number) * _SIZE_FACTORS[key]))


def parse_rate(value: Number) -> float:
    """Parse a bit rate such as `400M`, `1G` or `425e6` into bits/s"""
    if isinstance(value, bool):
        raise ValueError("rate must be a number")
    if isinstance(value, (int, float)):
        return float(value)
    match = _RATE_RE.match(value.strip())
    if not match:
        raise ValueError(f"invalid rate {value!r}")
    number, suffix = match.groups()
    return float(number) * _RATE_FACTORS[(suffix or "").lower()]


def parse_time(value: Number) -> int:
    """Parse a duration such as `25ms`, `500us` or `2` (seconds) into nanoseconds"""
    if isinstance(value, bool):
        raise ValueError("time must be a number")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        return int(round(value * NS_PER_SEC))
    match = _TIME_RE.match(value.strip())
    if not match:
        raise ValueError(f"invalid time {value!r}")
    number, suffix = match.groups()
    return int(round(float(number) * _TIME_FACTORS[(suffix or "").lower()]))


def format_size(n: int) -> str:
    for suffix, factor in (("G", 1024 ** 3), ("M", 1024 ** 2), ("K", 1024)):
        if n >= factor and n % factor == 0:
            return f"{n // factor}{suffix}"
    return str(n)


def format_rate(bps: float) -> str:
    for suffix, factor in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if bps >= factor and float(bps / factor).is_integer():
            return f"{int(bps / factor)}{suffix}"
    return f"{bps:g}"


def format_time(ns: int) -> str:
    for suffix, factor in (("s", NS_PER_SEC), ("ms", 1_000_000), ("us", 1_000)):
        if ns >= factor and ns % factor == 0:
            return f"{ns // factor}{suffix}"
    return f"{ns}ns"
