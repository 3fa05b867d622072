"""Token vocabulary plus the binary32 interval codec.

Ids are laid out in three disjoint families::

    0   .. 255   text bytes (UTF-8 byte values)
    256 .. 511   temporal bytes ``<|byte_x|>``
    512 ..       special tokens, then task tokens

A temporal byte and a text byte with the same value are different tokens.
"""

from __future__ import annotations

import enum
import hashlib
import math
import struct
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Iterable, Sequence

from .errors import DecodeError, InvalidInterval, MalformedText, MalformedTimeTokens, OutOfDomainTime

MANIFEST_VERSION = 1

IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
EOS = "<|endoftext|>"
START_OF_EVENT = "<|start_of_event|>"
END_OF_EVENT = "<|end_of_event|>"
TYPE_PREFIX = "<|type_prefix|>"
DESCRIPTION_PREFIX = "<|description_prefix|>"
TIME_PREFIX = "<|time_prefix|>"
TIME_PREDICTION = "<|time_prediction|>"
TYPE_PREDICTION = "<|type_prediction|>"
DESCRIPTION_PREDICTION = "<|description_prediction|>"

SPECIAL_TOKENS = (
    IM_START,
    IM_END,
    EOS,
    START_OF_EVENT,
    END_OF_EVENT,
    TYPE_PREFIX,
    DESCRIPTION_PREFIX,
    TIME_PREFIX,
)
TASK_TOKENS = (TIME_PREDICTION, TYPE_PREDICTION, DESCRIPTION_PREDICTION)


class ByteOrder(enum.Enum):
    MSB = "msb"  # most significant byte first (big endian)
    LSB = "lsb"

    @property
    def struct_prefix(self) -> str:
        return ">" if self is ByteOrder.MSB else "<"


class TokenKind(enum.Enum):
    TEXT = "text"
    TEMPORAL = "temporal"
    SPECIAL = "special"
    TASK = "task"


class Vocabulary:
    """Fixed vocabulary of text bytes, temporal bytes, special and task tokens."""

    TEXT_BASE = 0
    TEMPORAL_BASE = 256
    SPECIAL_BASE = 512

    def __init__(self):
        self._named = {}
        for i, tok in enumerate(SPECIAL_TOKENS + TASK_TOKENS):
            self._named[tok] = self.SPECIAL_BASE + i
        self._surface = {v: k for k, v in self._named.items()}
        self.size = self.SPECIAL_BASE + len(SPECIAL_TOKENS) + len(TASK_TOKENS)
        self.eos = self._named[EOS]

    def __len__(self) -> int:
        return self.size

    def id(self, surface: str) -> int:
        """Id of a special/task token or a ``<|byte_x|>`` surface form."""
        if surface in self._named:
            return self._named[surface]
        if surface.startswith("<|byte_") and surface.endswith("|>"):
            value = int(surface[7:-2])
            return self.temporal(value)
        raise KeyError(surface)

    def text(self, byte: int) -> int:
        if not 0 <= byte < 256:
            raise ValueError(f"byte value {byte} out of range")
        return self.TEXT_BASE + byte

    def temporal(self, byte: int) -> int:
        if not 0 <= byte < 256:
            raise ValueError(f"byte value {byte} out of range")
        return self.TEMPORAL_BASE + byte

    def kind(self, token: int) -> TokenKind:
        if not 0 <= token < self.size:
            raise ValueError(f"token id {token} outside vocabulary of size {self.size}")
        if token < self.TEMPORAL_BASE:
            return TokenKind.TEXT
        if token < self.SPECIAL_BASE:
            return TokenKind.TEMPORAL
        if token < self.SPECIAL_BASE + len(SPECIAL_TOKENS):
            return TokenKind.SPECIAL
        return TokenKind.TASK

    def is_text(self, token: int) -> bool:
        return 0 <= token < self.TEMPORAL_BASE

    def is_temporal(self, token: int) -> bool:
        return self.TEMPORAL_BASE <= token < self.SPECIAL_BASE

    def is_marker(self, token: int) -> bool:
        """Special or task token (anything that is not a byte)."""
        return self.SPECIAL_BASE <= token < self.size

    def surface(self, token: int) -> str:
        kind = self.kind(token)
        if kind is TokenKind.TEXT:
            return f"0x{token:02X}"
        if kind is TokenKind.TEMPORAL:
            return f"<|byte_{token - self.TEMPORAL_BASE}|>"
        return self._surface[token]

    def manifest(self) -> str:
        lines = [f"# eventlm vocabulary v{MANIFEST_VERSION} size={self.size}"]
        for token in range(self.size):
            lines.append(f"{token}\t{self.kind(token).value}\t{self.surface(token)}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.manifest().encode("utf-8")).hexdigest()[:16]


VOCAB = Vocabulary()


def _float32_bytes(tau: float, order: ByteOrder) -> bytes:
    try:
        tau = float(tau)
    except (TypeError, ValueError):
        raise InvalidInterval(f"interval must be a real number, got {tau!r}") from None
    if math.isnan(tau) or math.isinf(tau):
        raise InvalidInterval(f"interval must be finite, got {tau}")
    if tau < 0:
        raise InvalidInterval(f"interval must be non-negative, got {tau}")
    try:
        return struct.pack(order.struct_prefix + "f", tau + 0.0)  # + 0.0 folds -0.0 into +0.0
    except OverflowError:
        raise InvalidInterval(f"interval {tau} overflows binary32") from None


def encode_interval(tau: float, order: ByteOrder = ByteOrder.MSB) -> list[int]:
    """Encode ``tau`` as the 4 temporal byte tokens of its binary32 bit pattern."""
    return [VOCAB.TEMPORAL_BASE + b for b in _float32_bytes(tau, order)]


def decode_interval(tokens: Sequence[int], order: ByteOrder = ByteOrder.MSB) -> float:
    if len(tokens) != 4:
        raise MalformedTimeTokens(f"expected 4 temporal byte tokens, got {len(tokens)}")
    raw = bytearray()
    for tok in tokens:
        if not VOCAB.is_temporal(tok):
            raise MalformedTimeTokens(f"token {tok} is not a temporal byte token")
        raw.append(tok - VOCAB.TEMPORAL_BASE)
    (value,) = struct.unpack(order.struct_prefix + "f", bytes(raw))
    if math.isnan(value) or math.isinf(value) or value < 0:
        raise OutOfDomainTime(value)
    return value + 0.0


def to_float32(x: float) -> float:
    """Round a Python float to the nearest binary32 value."""
    return struct.unpack("<f", struct.pack("<f", x))[0]


def tokenize_text(s: str) -> list[int]:
    return list(s.encode("utf-8"))


def detokenize_text(tokens: Iterable[int]) -> str:
    raw = bytearray()
    for tok in tokens:
        if not VOCAB.is_text(tok):
            raise MalformedText(f"token {tok} ({VOCAB.surface(tok)}) is not a text byte")
        raw.append(tok)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(str(exc)) from None


def format_interval(tau: float) -> str:
    """Decimal rendering used by the number-string ablation (3 places, half-even).

    Ties are judged on the shortest repr of the float, so 0.0005 renders as 0.000.
    """
    _float32_bytes(tau, ByteOrder.MSB)  # same domain checks as the byte codec
    return str(Decimal(repr(float(tau))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


def encode_interval_as_number_string(tau: float) -> list[int]:
    return tokenize_text(format_interval(tau))
