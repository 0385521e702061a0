"""Nanosecond UTC timestamps and their RFC 3339 text form."""

from __future__ import annotations

import calendar
import re
import threading
import time

_RFC3339 = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})[Tt ](\d{2}):(\d{2}):(\d{2})(?:\.(\d{1,9}))?"
    r"(Z|z|[+-]\d{2}:\d{2})$"
)

_lock = threading.Lock()
_last_ns = 0


def now_ns() -> int:
    """Wall-clock UTC nanoseconds, strictly increasing within this process."""
    global _last_ns
    t = time.time_ns()
    with _lock:
        if t <= _last_ns:
            t = _last_ns + 1
        _last_ns = t
    return t


def format_ns(ns: int) -> str:
    secs, frac = divmod(ns, 1_000_000_000)
    tm = time.gmtime(secs)
    return (
        f"{tm.tm_year:04d}-{tm.tm_mon:02d}-{tm.tm_mday:02d}T"
        f"{tm.tm_hour:02d}:{tm.tm_min:02d}:{tm.tm_sec:02d}.{frac:09d}Z"
    )


def parse_rfc3339(text: str) -> int:
    """Parse an RFC 3339 timestamp into UTC nanoseconds.

    Raises ValueError on anything that is not a full date-time with offset.
    """
    if not isinstance(text, str):
        raise ValueError(f"timestamp must be a string, got {type(text).__name__}")
    m = _RFC3339.match(text)
    if m is None:
        raise ValueError(f"not an RFC 3339 timestamp: {text!r}")
    year, month, day, hh, mm, ss = (int(g) for g in m.groups()[:6])
    frac, offset = m.group(7), m.group(8)
    if not (1 <= month <= 12 and 1 <= day <= 31 and hh < 24 and mm < 60 and ss < 61):
        raise ValueError(f"timestamp out of range: {text!r}")
    try:
        secs = calendar.timegm((year, month, day, hh, mm, ss, 0, 0, 0))
        # timegm normalizes overflow (Feb 30 -> Mar 2); reject that
        if time.gmtime(secs)[:3] != (year, month, day) and ss != 60:
            raise ValueError
    except (ValueError, OverflowError):
        raise ValueError(f"invalid calendar date: {text!r}") from None
    ns = int((frac or "0").ljust(9, "0"))
    if offset not in ("Z", "z"):
        sign = 1 if offset[0] == "+" else -1
        secs -= sign * (int(offset[1:3]) * 3600 + int(offset[4:6]) * 60)
    return secs * 1_000_000_000 + ns
