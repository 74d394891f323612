"""Action-string grammar: strict parsing, canonical serialization, round-trip
identity, and the velocity-space mapping."""
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskvla.grammar import (
    VERBS,
    ActionCommand,
    ActionParseError,
    SafetyCaps,
    VelocityCommand,
    parse,
    serialize,
    to_velocity,
)


class TestParse:
    def test_forward_example(self):
        c = parse("forward_0.2_3.0s")
        assert c == ActionCommand("forward", 0.2, 3.0)

    def test_turn_left_example(self):
        c = parse("turn_left_0.1_2.5s")
        assert c == ActionCommand("turn_left", 0.1, 2.5)

    def test_missing_suffix_offset(self):
        with pytest.raises(ActionParseError) as ei:
            parse("forward_0.2_3.0")
        assert ei.value.offset == 15
        assert '"s"' in ei.value.expected

    @pytest.mark.parametrize("bad,offset", [
        ("sideways_0.2_3.0s", 0),      # unknown verb
        ("Forward_0.2_3.0s", 0),       # no case folding
        ("forward _0.2_3.0s", 7),      # no whitespace
        ("forward_-0.2_3.0s", 8),      # negative magnitude
        ("forward_0.2_3.0ss", 16),     # trailing garbage
        ("forward_0.2_3.0s ", 16),     # trailing space
        ("forward_0.2", 11),           # missing duration
        ("forward_._3.0s", 8),         # empty digits
        ("forward_1._3.0s", 10),       # empty fractional part
        ("forward_1e2_3.0s", 9),       # no exponents
        ("", 0),
        ("stop_0.1_1.0s", 5),          # stop with nonzero magnitude
        ("forward_0.2_0.0s", 12),      # non-positive duration
    ])
    def test_rejections_with_offset(self, bad, offset):
        with pytest.raises(ActionParseError) as ei:
            parse(bad)
        assert ei.value.offset == offset

    def test_unicode_digits_rejected(self):
        with pytest.raises(ActionParseError):
            parse("forward_٠.2_3.0s")

    def test_never_panics_on_random_bytes(self):
        rng = random.Random(1234)
        alphabet = "forward_backward.turn_leftrighstop0123456789s \t\n\x00é"
        ok = 0
        for _ in range(1_000_000):
            n = rng.randrange(0, 24)
            s = "".join(rng.choice(alphabet) for _ in range(n))
            try:
                parse(s)
                ok += 1
            except ActionParseError:
                pass
        assert ok >= 0  # reaching here means no unexpected exception


class TestSerialize:
    def test_forward_canonical(self):
        assert serialize(ActionCommand("forward", 0.2, 3.0)) == "forward_0.2_3.0s"

    def test_stop_canonical(self):
        assert serialize(ActionCommand("stop", 0, 0.5)) == "stop_0.0_0.5s"

    def test_no_trailing_zeros(self):
        assert serialize(ActionCommand("forward", 0.25, 2.0)) == "forward_0.25_2.0s"
        assert serialize(ActionCommand("backward", 0.5, 10.0)) == "backward_0.5_10.0s"

    def test_tiny_values_stay_positional(self):
        s = serialize(ActionCommand("forward", 1e-7, 0.5))
        assert "e" not in s
        assert parse(s).magnitude == 1e-7

    def test_fuzz_roundtrip(self):
        rng = random.Random(99)
        for _ in range(10_000):
            verb = rng.choice(VERBS)
            mag = 0.0 if verb == "stop" else rng.random() * rng.choice([0.01, 0.5, 1.0])
            dur = rng.random() * rng.choice([0.1, 1.0, 30.0]) + 1e-9
            c = ActionCommand(verb, mag, dur)
            assert parse(serialize(c)) == c

    @given(st.sampled_from(VERBS),
           st.floats(min_value=0, max_value=100, allow_nan=False),
           st.floats(min_value=1e-9, max_value=1e6, allow_nan=False))
    @settings(max_examples=300)
    def test_roundtrip_property(self, verb, mag, dur):
        if verb == "stop":
            mag = 0.0
        c = ActionCommand(verb, mag, dur)
        assert parse(serialize(c)) == c

    def test_serialize_parse_identity_on_canonical_strings(self):
        for s in ["forward_0.2_3.0s", "turn_left_0.1_2.5s", "stop_0.0_0.5s",
                  "backward_0.35_1.25s", "turn_right_1.0_0.05s"]:
            assert serialize(parse(s)) == s


class TestToVelocity:
    def test_forward_sign(self):
        v = to_velocity(ActionCommand("forward", 0.2, 3.0))
        assert v == VelocityCommand(0.2, 0.0, 3.0)

    def test_turn_right_negative_angular(self):
        v = to_velocity(ActionCommand("turn_right", 0.1, 2.5))
        assert v.angular == -0.1 and v.linear == 0.0

    def test_turn_left_positive_angular(self):
        v = to_velocity(ActionCommand("turn_left", 0.1, 2.5))
        assert v.angular == 0.1

    def test_backward_negative_linear(self):
        v = to_velocity(ActionCommand("backward", 0.3, 1.0))
        assert v.linear == -0.3 and v.angular == 0.0

    def test_stop(self):
        assert to_velocity(ActionCommand("stop", 0, 0.5)) == VelocityCommand(0.0, 0.0, 0.5)

    def test_safety_cap_rejection(self):
        with pytest.raises(ValueError, match="safety cap"):
            to_velocity(ActionCommand("forward", 0.6, 1.0), SafetyCaps(linear=0.5))
        with pytest.raises(ValueError, match="safety cap"):
            to_velocity(ActionCommand("turn_left", 1.5, 1.0), SafetyCaps(angular=1.0))
        # turns use the angular cap, not the linear one
        v = to_velocity(ActionCommand("turn_left", 0.9, 1.0), SafetyCaps(0.5, 1.0))
        assert v.angular == 0.9

    def test_injective_on_verbs(self):
        caps = SafetyCaps(linear=1.0, angular=1.0)
        outs = {verb: to_velocity(ActionCommand(verb, 0.0 if verb == "stop" else 0.3, 1.0), caps)
                for verb in VERBS}
        pairs = {(v.linear, v.angular) for v in outs.values()}
        assert len(pairs) == len(VERBS)


class TestCommandInvariants:
    def test_negative_zero_normalized(self):
        c = ActionCommand("stop", -0.0, 0.5)
        assert math.copysign(1.0, c.magnitude) == 1.0
        assert serialize(c) == "stop_0.0_0.5s"

    def test_invalid_commands(self):
        with pytest.raises(ValueError):
            ActionCommand("fly", 0.1, 1.0)
        with pytest.raises(ValueError):
            ActionCommand("forward", -0.1, 1.0)
        with pytest.raises(ValueError):
            ActionCommand("forward", 0.1, 0.0)
        with pytest.raises(ValueError):
            ActionCommand("stop", 0.1, 1.0)
        with pytest.raises(ValueError):
            ActionCommand("forward", math.inf, 1.0)
