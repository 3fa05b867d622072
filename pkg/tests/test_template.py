import struct
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventlm import codec, template
from eventlm.codec import VOCAB, ByteOrder
from eventlm.errors import (
    EmptyPrediction,
    InvalidPrefix,
    MalformedTimeTokens,
    NoDescription,
    NotTimeOrdered,
    OutOfDomainTime,
)
from eventlm.template import TaskKind
from eventlm.tpp import Event, EventSequence

GOLDEN = Path(__file__).parent / "golden"
AMAZON_INFO = "This sequence is a product review event from an Amazon user where event type is product category"


def golden(name):
    return (GOLDEN / name).read_text(encoding="utf-8")


def bits(x):
    return struct.pack(">f", x)


def amazon_sequence():
    rows = [
        (0.0, "Luggage & Travel Gear", "Great bag..Scooby in pink!"),
        (680.0, "Children Shoes", "Twinkle toes is the best!"),
        (750.0, "Women Jewelry", "Pretty earrings."),
        (828.0, "Men Uniforms, Work & Safety", "Nice, work shirt."),
    ]
    events = [Event(t, i, label, desc) for i, (t, label, desc) in enumerate(rows)]
    return EventSequence(events, 828.0, AMAZON_INFO)


def amazon_pair_sequence():
    tau5 = struct.unpack(">f", bytes([61, 130, 13, 139]))[0]
    rows = [
        (0.0, "Men Surf, Skate & Street", "I am a long-time fan of Reef sandals"),
        (146.0, "Men Shoes", "I own 8 pair of Allen Edmonds and I like them all.  They are very comfortable"),
        (164.0, "Shoe, Jewelry & Watch Accessories", "Easy to use"),
        (192.0, "Men Shoes", "Great Shoe"),
        (192.0 + tau5, "Men Shoes", "unused"),
    ]
    events = [Event(t, i, label, desc) for i, (t, label, desc) in enumerate(rows)]
    return EventSequence(events, rows[-1][0], AMAZON_INFO), tau5


STACKOVERFLOW_ROWS = [
    ("5", (0, 0, 0, 0)),
    ("13", (58, 240, 0, 0)),
    ("3", (64, 134, 225, 0)),
    ("3", (62, 222, 48, 0)),
    ("2", (61, 82, 128, 0)),
    ("3", (64, 109, 212, 0)),
    ("3", (62, 142, 64, 0)),
    ("5", (63, 50, 24, 0)),
    ("13", (60, 26, 0, 0)),
    ("7", (63, 96, 232, 0)),
]


class TestGoldenFiles:
    def test_amazon_sequence_renders_exactly(self):
        doc = template.render_sequence(amazon_sequence())
        assert template.pretty_print(doc.tokens) + "\n" == golden("amazon_sequence.txt")

    def test_amazon_sequence_parses_back(self):
        doc = template.render_sequence(amazon_sequence())
        assert template.parse_surface(golden("amazon_sequence.txt")) == list(doc.tokens)

    def test_amazon_prompt_response_pair(self):
        seq, tau5 = amazon_pair_sequence()
        doc = template.render_sequence(seq)
        prompt = template.make_prompt(doc, 4, TaskKind.TIME)
        response = template.make_response(doc, 4, TaskKind.TIME)
        assert prompt == template.parse_surface(golden("amazon_prompt.txt"))
        assert response[:-1] == template.parse_surface(golden("amazon_response.txt"))
        assert response[-1] == VOCAB.eos
        assert bits(template.parse_generation(response, TaskKind.TIME)) == bits(tau5)

    def test_stackoverflow_prefix(self):
        t, events = 0.0, []
        for i, (label, raw) in enumerate(STACKOVERFLOW_ROWS):
            t += struct.unpack(">f", bytes(raw))[0]
            events.append(Event(t, int(label), label))
        info = "This sequence is a sequence of badges awarded to a user in StackOverflow. There are 22 event types."
        doc = template.render_sequence(EventSequence(events, t, info))
        assert list(doc.tokens) == template.parse_surface(golden("stackoverflow_prefix.txt"))

    def test_simultaneous_events_are_rejected(self):
        with pytest.raises(NotTimeOrdered):
            EventSequence([Event(1.0, 0), Event(1.0, 1)], 2.0)

    def test_every_time_span_inverts(self):
        for seq in (amazon_sequence(), amazon_pair_sequence()[0]):
            doc = template.render_sequence(seq)
            for i, tau in enumerate(seq.intervals):
                field = doc.field_tokens(i, "time") + [VOCAB.eos]
                assert bits(template.parse_generation(field, TaskKind.TIME)) == bits(codec.to_float32(tau))


class TestRendering:
    def test_layout_markers(self):
        doc = template.render_sequence(amazon_sequence())
        toks = doc.tokens
        assert toks[0] == template.T_IM_START
        assert toks[doc.system_end] == template.T_SOE
        assert toks[-1] == template.T_EOE
        assert doc.event_end(0) == doc.prefix_end(1) - 1
        assert toks[doc.event_end(3)] == template.T_EOE

    def test_number_header(self):
        seq = amazon_sequence()
        doc = template.render_sequence(seq, use_byte_tokens=False)
        text = template.pretty_print(doc.tokens)
        assert "event times in float numbers along with" in text
        assert "<|time_prefix|>680.000" in text

    def test_lsb_layout(self):
        doc = template.render_sequence(amazon_sequence(), ByteOrder.LSB)
        assert doc.field_tokens(1, "time") == codec.encode_interval(680.0, ByteOrder.LSB)

    def test_prompt_bounds(self):
        doc = template.render_sequence(amazon_sequence())
        for k in (0, 4, 5):
            with pytest.raises(InvalidPrefix):
                template.make_prompt(doc, k, TaskKind.TYPE)

    def test_type_and_description_responses(self):
        doc = template.render_sequence(amazon_sequence())
        assert template.make_response(doc, 2, TaskKind.TYPE) == codec.tokenize_text("Women Jewelry") + [VOCAB.eos]
        assert template.make_response(doc, 2, TaskKind.DESCRIPTION) == codec.tokenize_text("Pretty earrings.") + [
            VOCAB.eos
        ]

    def test_missing_description(self):
        seq = EventSequence([Event(0.0, 0), Event(1.0, 1)], 1.0)
        doc = template.render_sequence(seq)
        with pytest.raises(NoDescription):
            template.make_response(doc, 1, TaskKind.DESCRIPTION)


class TestParseGeneration:
    def test_time_needs_four_bytes(self):
        with pytest.raises(MalformedTimeTokens):
            template.parse_generation(codec.encode_interval(1.0)[:3] + [VOCAB.eos], TaskKind.TIME)

    def test_time_text_token_is_malformed(self):
        with pytest.raises(MalformedTimeTokens):
            template.parse_generation([65, 66, 67, 68, VOCAB.eos], TaskKind.TIME)

    def test_time_out_of_domain(self):
        with pytest.raises(OutOfDomainTime):
            template.parse_generation([VOCAB.temporal(b) for b in (191, 128, 0, 0)] + [VOCAB.eos], TaskKind.TIME)

    def test_number_string_time(self):
        toks = codec.tokenize_text("12.500") + [VOCAB.eos]
        assert template.parse_generation(toks, TaskKind.TIME, use_byte_tokens=False) == 12.5
        with pytest.raises(MalformedTimeTokens):
            template.parse_generation(codec.tokenize_text("abc"), TaskKind.TIME, use_byte_tokens=False)

    def test_text_stops_at_marker(self):
        toks = codec.tokenize_text(" Men Shoes ") + [template.T_EOE] + codec.tokenize_text("junk")
        assert template.parse_generation(toks, TaskKind.TYPE) == "Men Shoes"

    def test_empty_text(self):
        with pytest.raises(EmptyPrediction):
            template.parse_generation([VOCAB.eos], TaskKind.DESCRIPTION)

    def test_well_formed(self):
        assert template.is_well_formed_time(codec.encode_interval(2.0) + [VOCAB.eos])
        assert not template.is_well_formed_time(codec.encode_interval(2.0))
        assert template.is_well_formed_time(codec.tokenize_text("2.000") + [VOCAB.eos], use_byte_tokens=False)
        assert not template.is_well_formed_time(codec.tokenize_text("2.0") + [VOCAB.eos], use_byte_tokens=False)


label = st.text(alphabet="abcdefghij XYZ&,.", min_size=1, max_size=12).map(str.strip).filter(bool)


@st.composite
def sequences(draw, descriptions=True):
    gaps = draw(st.lists(st.floats(min_value=1e-3, max_value=1e3, allow_nan=False), min_size=1, max_size=8))
    labels = draw(st.lists(label, min_size=len(gaps), max_size=len(gaps)))
    t, events = 0.0, []
    for i, (g, lab) in enumerate(zip(gaps, labels)):
        t += g
        desc = draw(label) if descriptions and draw(st.booleans()) else None
        events.append(Event(t, i, lab, desc))
    return EventSequence(events, t + 1.0, draw(label))


@settings(max_examples=60, deadline=None)
@given(sequences())
def test_pretty_print_round_trip(seq):
    doc = template.render_sequence(seq)
    assert template.parse_surface(template.pretty_print(doc.tokens)) == list(doc.tokens)


@settings(max_examples=60, deadline=None)
@given(sequences(), st.sampled_from(list(ByteOrder)))
def test_time_spans_invert(seq, order):
    doc = template.render_sequence(seq, order)
    for i, tau in enumerate(seq.intervals):
        value = template.parse_generation(doc.field_tokens(i, "time") + [VOCAB.eos], TaskKind.TIME, order)
        assert bits(value) == bits(codec.to_float32(tau))


@settings(max_examples=60, deadline=None)
@given(sequences())
def test_byte_and_number_streams_differ_only_in_time_fields(seq):
    def skeleton(doc):
        drop = set(range(doc.system_end))
        for sp in doc.spans:
            if sp.field == "time":
                drop |= set(range(sp.start, sp.end))
        return [t for i, t in enumerate(doc.tokens) if i not in drop]

    a = template.render_sequence(seq, use_byte_tokens=True)
    b = template.render_sequence(seq, use_byte_tokens=False)
    assert skeleton(a) == skeleton(b)
    assert a.tokens[: a.system_end] == tuple(template.system_tokens(seq.info, True))
    assert b.tokens[: b.system_end] == tuple(template.system_tokens(seq.info, False))


@settings(max_examples=40, deadline=None)
@given(sequences(), st.data())
def test_prompt_is_document_prefix(seq, data):
    if len(seq) < 2:
        return
    doc = template.render_sequence(seq)
    k = data.draw(st.integers(1, len(seq) - 1))
    for task in (TaskKind.TIME, TaskKind.TYPE):
        prompt = template.make_prompt(doc, k, task)
        assert prompt[:-2] == list(doc.tokens[: doc.prefix_end(k)])
        assert prompt[-2:] == [template.T_SOE, task.token]
        response = template.make_response(doc, k, task)
        assert response[:-1] == doc.field_tokens(k, task.value)
