"""Semantic action strings and their velocity-space meaning.

Grammar (strict, no whitespace, no case folding):

    <verb> "_" <decimal> "_" <decimal> "s"
    verb    = "forward" | "backward" | "turn_left" | "turn_right" | "stop"
    decimal = digits with an optional fractional part (no sign, no exponent)

The first decimal is a magnitude (m/s for translation verbs, rad/s for turns,
0 for stop), the second a duration in seconds.  The same string format is the
wire token between policy decoding, dataset logs, and the runtime.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal

VERBS = ("forward", "backward", "turn_left", "turn_right", "stop")
TRANSLATION_VERBS = ("forward", "backward")
TURN_VERBS = ("turn_left", "turn_right")


class ActionParseError(ValueError):
    """Parse failure with the byte offset and the token expected there."""

    def __init__(self, text: str, offset: int, expected: str):
        self.text = text
        self.offset = offset
        self.expected = expected
        super().__init__(f"offset {offset}: expected {expected} in {text!r}")


@dataclass(frozen=True)
class SafetyCaps:
    """Hard velocity limits, applied when commands become motion."""
    linear: float = 0.5    # m/s
    angular: float = 1.0   # rad/s

    def cap_for(self, verb: str) -> float:
        return self.angular if verb in TURN_VERBS else self.linear


@dataclass(frozen=True)
class ActionCommand:
    verb: str
    magnitude: float  # m/s or rad/s depending on verb; 0 for stop
    duration: float   # seconds, > 0

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        mag = float(self.magnitude)
        if mag == 0.0:
            mag = 0.0  # normalize -0.0 so serialization stays canonical
        object.__setattr__(self, "magnitude", mag)
        object.__setattr__(self, "duration", float(self.duration))
        if not (math.isfinite(self.magnitude) and self.magnitude >= 0.0):
            raise ValueError(f"magnitude must be non-negative and finite, got {self.magnitude}")
        if self.verb == "stop" and self.magnitude != 0.0:
            raise ValueError("stop commands carry zero magnitude")
        if not (math.isfinite(self.duration) and self.duration > 0.0):
            raise ValueError(f"duration must be positive and finite, got {self.duration}")


STOP_COMMAND = ActionCommand("stop", 0.0, 0.5)


@dataclass(frozen=True)
class VelocityCommand:
    linear: float   # m/s, forward positive
    angular: float  # rad/s, counter-clockwise (left) positive
    duration: float  # seconds


def _scan_decimal(s: str, pos: int, what: str) -> tuple[float, int]:
    start = pos
    while pos < len(s) and s[pos].isascii() and s[pos].isdigit():
        pos += 1
    if pos == start:
        raise ActionParseError(s, start, f"{what} digits")
    if pos < len(s) and s[pos] == ".":
        pos += 1
        frac_start = pos
        while pos < len(s) and s[pos].isascii() and s[pos].isdigit():
            pos += 1
        if pos == frac_start:
            raise ActionParseError(s, frac_start, f"{what} fractional digits")
    return float(s[start:pos]), pos


def parse(s: str) -> ActionCommand:
    """Parse an action string; raises ActionParseError with byte offset."""
    verb = None
    for v in sorted(VERBS, key=len, reverse=True):  # turn_* before prefixes
        if s.startswith(v):
            verb = v
            break
    if verb is None:
        raise ActionParseError(s, 0, "a verb (" + "|".join(VERBS) + ")")
    pos = len(verb)
    if pos >= len(s) or s[pos] != "_":
        raise ActionParseError(s, pos, '"_"')
    pos += 1
    magnitude, pos = _scan_decimal(s, pos, "magnitude")
    if pos >= len(s) or s[pos] != "_":
        raise ActionParseError(s, pos, '"_"')
    pos += 1
    duration, pos = _scan_decimal(s, pos, "duration")
    if pos >= len(s) or s[pos] != "s":
        raise ActionParseError(s, pos, '"s"')
    pos += 1
    if pos != len(s):
        raise ActionParseError(s, pos, "end of input")
    if verb == "stop" and magnitude != 0.0:
        raise ActionParseError(s, len(verb) + 1, "zero magnitude for stop")
    if not math.isfinite(magnitude):
        raise ActionParseError(s, len(verb) + 1, "a representable magnitude")
    dur_offset = s.index("_", len(verb) + 1) + 1
    if duration <= 0.0 or not math.isfinite(duration):
        raise ActionParseError(s, dur_offset, "a positive representable duration")
    return ActionCommand(verb, magnitude, duration)


def _render_decimal(v: float) -> str:
    """Shortest positional decimal that round-trips, at least one fractional digit."""
    text = repr(float(v))
    if "e" in text or "E" in text:
        text = format(Decimal(text), "f")
    if "." not in text:
        text += ".0"
    return text


def serialize(c: ActionCommand) -> str:
    """Canonical string form; parse(serialize(c)) == c."""
    return f"{c.verb}_{_render_decimal(c.magnitude)}_{_render_decimal(c.duration)}s"


def to_velocity(c: ActionCommand, caps: SafetyCaps = SafetyCaps()) -> VelocityCommand:
    """Map a command to signed (linear, angular) velocities.

    Left turns are positive angular velocity (counter-clockwise positive).
    Magnitudes above the configured safety cap are rejected outright.
    """
    if c.magnitude > caps.cap_for(c.verb):
        raise ValueError(
            f"magnitude {c.magnitude} exceeds safety cap {caps.cap_for(c.verb)} "
            f"for {c.verb}")
    if c.verb == "forward":
        return VelocityCommand(c.magnitude, 0.0, c.duration)
    if c.verb == "backward":
        return VelocityCommand(-c.magnitude, 0.0, c.duration)
    if c.verb == "turn_left":
        return VelocityCommand(0.0, c.magnitude, c.duration)
    if c.verb == "turn_right":
        return VelocityCommand(0.0, -c.magnitude, c.duration)
    return VelocityCommand(0.0, 0.0, c.duration)  # stop
