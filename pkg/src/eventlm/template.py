"""Render event sequences into the prompt token stream and parse model output.

Layout of a rendered document::

    <|im_start|>system\\n{header}\\nINFO: {info}<|im_end|><|im_start|>sequence
    <|start_of_event|><|type_prefix|>{type}[<|description_prefix|>{desc}]<|time_prefix|>{time}<|end_of_event|>
    ...

The token stream carries no newlines around marker tokens; :func:`pretty_print`
adds them back in the printed layout and :func:`parse_surface` strips them.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Sequence

from . import codec
from .codec import VOCAB, ByteOrder
from .errors import (
    EmptyPrediction,
    InvalidPrefix,
    MalformedTimeTokens,
    NoDescription,
    NotTimeOrdered,
    OutOfDomainTime,
)
from .tpp import EventSequence

BYTE_HEADER = (
    "textual representation of an event sequence denoted by event times in float Byte-tokens "
    "(each number as 4 byte tokens) along with textual event types"
)
NUMBER_HEADER = (
    "textual representation of an event sequence denoted by event times in float numbers "
    "along with textual event types"
)

T_IM_START = VOCAB.id(codec.IM_START)
T_IM_END = VOCAB.id(codec.IM_END)
T_EOS = VOCAB.eos
T_SOE = VOCAB.id(codec.START_OF_EVENT)
T_EOE = VOCAB.id(codec.END_OF_EVENT)
T_TYPE = VOCAB.id(codec.TYPE_PREFIX)
T_DESC = VOCAB.id(codec.DESCRIPTION_PREFIX)
T_TIME = VOCAB.id(codec.TIME_PREFIX)


class TaskKind(enum.Enum):
    TIME = "time"
    TYPE = "type"
    DESCRIPTION = "description"

    @property
    def token(self) -> int:
        return VOCAB.id(f"<|{self.value}_prediction|>")


@dataclass(frozen=True)
class Span:
    event_index: int
    field: str  # "event", "type", "description" or "time"
    start: int
    end: int  # exclusive


@dataclass(frozen=True)
class TemplateDoc:
    tokens: tuple[int, ...]
    spans: tuple[Span, ...]
    system_end: int
    n_events: int
    order: ByteOrder = ByteOrder.MSB
    use_byte_tokens: bool = True

    def span(self, event_index: int, field: str) -> Span | None:
        for sp in self.spans:
            if sp.event_index == event_index and sp.field == field:
                return sp
        return None

    def event_end(self, event_index: int) -> int:
        """Position of the ``<|end_of_event|>`` token of an event."""
        return self.span(event_index, "event").end - 1

    def prefix_end(self, n_events: int) -> int:
        """Length of the stream covering the system block and the first ``n_events`` events."""
        if n_events == 0:
            return self.system_end
        return self.span(n_events - 1, "event").end

    def field_tokens(self, event_index: int, field: str) -> list[int]:
        sp = self.span(event_index, field)
        if sp is None:
            return []
        return list(self.tokens[sp.start : sp.end])


def system_tokens(info: str, use_byte_tokens: bool = True) -> list[int]:
    header = BYTE_HEADER if use_byte_tokens else NUMBER_HEADER
    return (
        [T_IM_START]
        + codec.tokenize_text(f"system\n{header}\nINFO: {info}")
        + [T_IM_END, T_IM_START]
        + codec.tokenize_text("sequence")
    )


def time_tokens(tau: float, order: ByteOrder, use_byte_tokens: bool) -> list[int]:
    if use_byte_tokens:
        return codec.encode_interval(tau, order)
    return codec.encode_interval_as_number_string(tau)


def render_sequence(
    seq: EventSequence,
    order: ByteOrder = ByteOrder.MSB,
    use_byte_tokens: bool = True,
    info: str | None = None,
) -> TemplateDoc:
    times = [ev.time for ev in seq.events]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise NotTimeOrdered("events must be strictly increasing in time")
    tokens = system_tokens(seq.info if info is None else info, use_byte_tokens)
    system_end = len(tokens)
    spans = []
    prev = None
    for i, ev in enumerate(seq.events):
        tau = 0.0 if prev is None else ev.time - prev
        prev = ev.time
        start = len(tokens)
        tokens += [T_SOE, T_TYPE]
        spans.append(_field(tokens, i, "type", codec.tokenize_text(ev.type_label)))
        if ev.description is not None:
            tokens.append(T_DESC)
            spans.append(_field(tokens, i, "description", codec.tokenize_text(ev.description)))
        tokens.append(T_TIME)
        spans.append(_field(tokens, i, "time", time_tokens(tau, order, use_byte_tokens)))
        tokens.append(T_EOE)
        spans.append(Span(i, "event", start, len(tokens)))
    return TemplateDoc(tuple(tokens), tuple(spans), system_end, len(seq.events), order, use_byte_tokens)


def _field(tokens: list[int], i: int, name: str, body: list[int]) -> Span:
    start = len(tokens)
    tokens += body
    return Span(i, name, start, len(tokens))


def make_prompt(doc: TemplateDoc, prefix_len_events: int, task: TaskKind) -> list[int]:
    if not 1 <= prefix_len_events < doc.n_events:
        raise InvalidPrefix(f"prefix of {prefix_len_events} events leaves no next event among {doc.n_events}")
    return list(doc.tokens[: doc.prefix_end(prefix_len_events)]) + [T_SOE, task.token]


def make_response(doc: TemplateDoc, target_event_index: int, task: TaskKind) -> list[int]:
    if not 0 <= target_event_index < doc.n_events:
        raise InvalidPrefix(f"no event {target_event_index} in a {doc.n_events}-event document")
    if task is TaskKind.DESCRIPTION and doc.span(target_event_index, "description") is None:
        raise NoDescription(f"event {target_event_index} has no description")
    return doc.field_tokens(target_event_index, task.value) + [T_EOS]


def _until_eos(tokens: Sequence[int]) -> list[int]:
    out = []
    for tok in tokens:
        if tok == T_EOS:
            break
        out.append(tok)
    return out


def parse_generation(
    tokens: Sequence[int],
    task: TaskKind,
    order: ByteOrder = ByteOrder.MSB,
    use_byte_tokens: bool = True,
) -> float | str:
    """Interval (float) for time prediction, trimmed text otherwise."""
    body = _until_eos(tokens)
    if task is TaskKind.TIME and use_byte_tokens:
        if len(body) < 4:
            raise MalformedTimeTokens(f"only {len(body)} tokens before end of sequence")
        return codec.decode_interval(body[:4], order)
    text_tokens = []
    for tok in body:
        if not VOCAB.is_text(tok):
            break
        text_tokens.append(tok)
    text = bytes(text_tokens).decode("utf-8", errors="replace").strip()
    if task is TaskKind.TIME:
        try:
            value = float(text)
        except ValueError:
            raise MalformedTimeTokens(f"cannot read a number from {text!r}") from None
        if not value >= 0 or value == float("inf"):
            raise OutOfDomainTime(value)
        return value
    if not text:
        raise EmptyPrediction(f"{task.value} prediction is empty")
    return text


def is_well_formed_time(tokens: Sequence[int], use_byte_tokens: bool = True) -> bool:
    """Exactly the expected time encoding followed by end of sequence."""
    if use_byte_tokens:
        return len(tokens) >= 5 and all(VOCAB.is_temporal(t) for t in tokens[:4]) and tokens[4] == T_EOS
    body = _until_eos(tokens)
    if len(body) == len(tokens):
        return False
    return bool(re.fullmatch(r"\d+\.\d{3}", bytes(t for t in body if VOCAB.is_text(t)).decode("latin-1"))) and all(
        VOCAB.is_text(t) for t in body
    )


def pretty_print(tokens: Sequence[int]) -> str:
    """Printed surface text: a newline before every marker token."""
    parts: list[str] = []
    text = bytearray()

    def flush():
        if text:
            parts.append(text.decode("utf-8", errors="replace"))
            text.clear()

    for i, tok in enumerate(tokens):
        if VOCAB.is_text(tok):
            text.append(tok)
            continue
        flush()
        if VOCAB.is_marker(tok) and i > 0:
            parts.append("\n")
        parts.append(VOCAB.surface(tok))
    flush()
    return "".join(parts)


_MARKER_RE = re.compile(r"(<\|[a-z_]+\|>|<\|byte_\d{1,3}\|>)")


def parse_surface(text: str) -> list[int]:
    """Inverse of :func:`pretty_print`, tolerant to layout whitespace.

    Trailing spaces on each line and newlines adjacent to marker tokens are
    dropped; everything else between markers is text.
    """
    text = re.sub(r"[ \t]+\n", "\n", text)
    pieces = _MARKER_RE.split(text)
    tokens: list[int] = []
    for k, piece in enumerate(pieces):
        if k % 2 == 1:
            tokens.append(VOCAB.id(piece))
            continue
        if k > 0:
            piece = re.sub(r"^\n+", "", piece)
        if k < len(pieces) - 1:
            piece = re.sub(r"\n+$", "", piece)
        else:
            piece = piece.rstrip("\n")
        tokens += codec.tokenize_text(piece)
    return tokens
