"""English number words <-> integers (0..999)."""

from __future__ import annotations

import re
from dataclasses import dataclass

UNITS = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
    "seventeen", "eighteen", "nineteen",
]
TENS = ["", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"]

UNIT_VALUES = {w: i for i, w in enumerate(UNITS)}
TEN_VALUES = {w: i * 10 for i, w in enumerate(TENS) if w}
NUMBER_WORDS = frozenset(UNIT_VALUES) | frozenset(TEN_VALUES) | {"hundred"}

MAX_WORDS = 999


def int_to_words(n: int) -> str | None:
    """Render 0..999 in English; None outside the table."""
    if n < 0 or n > MAX_WORDS:
        return None
    if n < 20:
        return UNITS[n]
    if n < 100:
        tens, unit = divmod(n, 10)
        return TENS[tens] if unit == 0 else f"{TENS[tens]}-{UNITS[unit]}"
    hundreds, rest = divmod(n, 100)
    head = f"{UNITS[hundreds]} hundred"
    return head if rest == 0 else f"{head} {int_to_words(rest)}"


@dataclass(frozen=True)
class Extraction:
    value: int | None
    span: tuple[int, int]
    kind: str  # digit | word | none


_TOKEN = re.compile(r"\d+|[a-z]+")
_JOINER = re.compile(r"[\s-]+")


def _joined(text: str, end: int, start: int) -> bool:
    """True when text[end:start] is a run of spaces/hyphens."""
    return start > end and _JOINER.fullmatch(text, end, start) is not None


def _below_hundred(tokens, i, text):
    """Parse a 0..99 word group at tokens[i]; returns (value, next_index) or None."""
    word, s, e = tokens[i]
    if word in TEN_VALUES:
        value = TEN_VALUES[word]
        if i + 1 < len(tokens):
            nxt, ns, ne = tokens[i + 1]
            if nxt in UNIT_VALUES and 0 < UNIT_VALUES[nxt] < 10 and _joined(text, e, ns):
                return value + UNIT_VALUES[nxt], i + 2
        return value, i + 1
    if word in UNIT_VALUES:
        return UNIT_VALUES[word], i + 1
    return None


def _parse_words(tokens, i, text):
    first = _below_hundred(tokens, i, text)
    if first is None:
        return None
    value, j = first
    end = tokens[j - 1][2]
    if 1 <= value <= 9 and j < len(tokens) and tokens[j][0] == "hundred" and _joined(text, end, tokens[j][1]):
        value *= 100
        end = tokens[j][2]
        j += 1
        k = j
        if k < len(tokens) and tokens[k][0] == "and" and _joined(text, end, tokens[k][1]):
            k += 1
        if k < len(tokens) and _joined(text, tokens[k - 1][2], tokens[k][1]):
            rest = _below_hundred(tokens, k, text)
            if rest is not None and rest[0] > 0:
                value += rest[0]
                j = rest[1]
                end = tokens[j - 1][2]
    return value, end


def extract_number(text: str) -> Extraction:
    """First number in ``text``, as digits or English words, scanning left to right."""
    lowered = text.lower()
    tokens = [(m.group(), m.start(), m.end()) for m in _TOKEN.finditer(lowered)]
    for i, (word, start, end) in enumerate(tokens):
        if word.isdigit():
            return Extraction(int(word), (start, end), "digit")
        if word in UNIT_VALUES or word in TEN_VALUES:
            value, stop = _parse_words(tokens, i, lowered)
            return Extraction(value, (start, stop), "word")
    return Extraction(None, (0, 0), "none")
