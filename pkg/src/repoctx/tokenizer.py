"""Token counting shared by the prompt composer and the model gateway."""

from __future__ import annotations

import math
import re
from typing import Protocol

_PIECE_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class Tokenizer(Protocol):
    name: str

    def count(self, text: str) -> int: ...


class ApproxTokenizer:
    """Deterministic stand-in for subword tokenizers.

    Word runs cost ``ceil(len / chars_per_token)`` tokens, every punctuation
    character costs one, whitespace is free; the total is scaled by
    ``calibration`` and rounded up. Appending text never lowers the count.
    """

    name = "approx"

    def __init__(self, chars_per_token: int = 4, calibration: float = 1.0):
        if chars_per_token < 1 or calibration <= 0:
            raise ValueError("chars_per_token must be >= 1 and calibration > 0")
        self.chars_per_token = chars_per_token
        self.calibration = calibration

    def count(self, text: str) -> int:
        total = 0
        for piece in _PIECE_RE.findall(text):
            if piece[0].isalnum() or piece[0] == "_":
                total += -(-len(piece) // self.chars_per_token)
            else:
                total += 1
        return math.ceil(total * self.calibration)


class TiktokenTokenizer:
    """Exact OpenAI tokenizer; needs the optional ``tiktoken`` package."""

    def __init__(self, encoding: str = "cl100k_base"):
        import tiktoken

        self.name = f"tiktoken:{encoding}"
        self._enc = tiktoken.get_encoding(encoding)

    def count(self, text: str) -> int:
        return len(self._enc.encode(text, disallowed_special=()))


def get_tokenizer(spec: str | None = None) -> Tokenizer:
    """``approx``, ``approx:<calibration>`` or ``tiktoken[:<encoding>]``."""
    spec = spec or "approx"
    kind, _, arg = spec.partition(":")
    if kind == "approx":
        return ApproxTokenizer(calibration=float(arg) if arg else 1.0)
    if kind == "tiktoken":
        return TiktokenTokenizer(arg or "cl100k_base")
    raise ValueError(f"unknown tokenizer {spec!r}")


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    return (tokenizer or ApproxTokenizer()).count(text)
