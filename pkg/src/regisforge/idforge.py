"""Sequential virtual identifiers (SVIDs).

An SVID is a 14-digit sequence number followed by one mod-10 check digit.
Sequences start at 10000000000000 so the rendered ID never has a leading
zero, and the generator state only ever moves forward.

The check digit is Luhn-style: prefix digits are weighted 2, 1, 2, 1, ...
starting from the leftmost digit (doubled values above 9 have 9 subtracted),
and the check digit brings the weighted sum to a multiple of 10.  Every
single-digit substitution changes the weighted sum mod 10, so it is always
detected.

>>> check_digit(10000000000000)
8
>>> validate_svid(100000000000008)
True
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MalformedSequence, SequenceExhausted

SEQ_START = 10**13
SEQ_LIMIT = 10**14
PREFIX_DIGITS = 14

# _DOUBLED[d] is the Luhn contribution of a doubled digit d
_DOUBLED = (0, 2, 4, 6, 8, 1, 3, 5, 7, 9)
_WEIGHTS = np.array([2 if i % 2 == 0 else 1 for i in range(PREFIX_DIGITS)])


def check_digit(seq):
    """Check digit for a 14-digit sequence number."""
    if isinstance(seq, bool) or not isinstance(seq, (int, np.integer)):
        raise MalformedSequence(f"sequence must be an integer, got {seq!r}")
    if not SEQ_START <= seq < SEQ_LIMIT:
        raise MalformedSequence(f"sequence must have exactly 14 digits: {seq}")
    total = 0
    for i, ch in enumerate(str(int(seq))):
        d = ord(ch) - 48
        total += _DOUBLED[d] if i % 2 == 0 else d
    return (10 - total % 10) % 10


def check_digits(seqs):
    """Vectorised :func:`check_digit` for an array of 14-digit sequences."""
    seqs = np.asarray(seqs, dtype=np.int64)
    if seqs.size and (seqs.min() < SEQ_START or seqs.max() >= SEQ_LIMIT):
        raise MalformedSequence("all sequences must have exactly 14 digits")
    powers = 10 ** np.arange(PREFIX_DIGITS - 1, -1, -1, dtype=np.int64)
    digits = (seqs[:, None] // powers) % 10
    doubled = np.where(_WEIGHTS == 2, np.take(np.array(_DOUBLED), digits), digits)
    return (10 - doubled.sum(axis=1) % 10) % 10


def make_svid(seq):
    return seq * 10 + check_digit(seq)


def validate_svid(candidate):
    """True iff ``candidate`` is a well-formed SVID.  Never raises."""
    if isinstance(candidate, bool):
        return False
    if isinstance(candidate, str):
        if len(candidate) != 15 or not candidate.isdigit():
            return False
        candidate = int(candidate)
    if not isinstance(candidate, (int, np.integer)):
        return False
    prefix, last = divmod(int(candidate), 10)
    if not SEQ_START <= prefix < SEQ_LIMIT:
        return False
    return check_digit(prefix) == last


def render_svid(svid):
    return f"{int(svid):015d}"


def parse_svid(text):
    text = str(text).strip()
    if not validate_svid(text):
        raise MalformedSequence(f"not a valid SVID: {text!r}")
    return int(text)


@dataclass(frozen=True)
class GeneratorState:
    next_seq: int = SEQ_START

    def __post_init__(self):
        if self.next_seq < SEQ_START:
            raise MalformedSequence(f"next_seq below {SEQ_START}: {self.next_seq}")


def next_svid(state):
    """Consume one sequence number: returns ``(new_state, svid)``."""
    if state.next_seq >= SEQ_LIMIT:
        raise SequenceExhausted("14-digit sequence space exhausted")
    return GeneratorState(state.next_seq + 1), make_svid(state.next_seq)


class IdGenerator:
    """Single ID authority; optionally backed by a one-line state file.

    ``draw`` only advances the in-memory state; callers ``commit`` at the end
    of a batch, before persisting anything that holds the drawn IDs, so a
    restart can skip IDs but never reissue one.  ``draw_batch`` commits itself.
    """

    def __init__(self, state=None, path=None):
        self.path = Path(path) if path is not None else None
        if state is None and self.path is not None and self.path.exists():
            state = load_state(self.path)
        self.state = state or GeneratorState()

    def draw(self):
        self.state, svid = next_svid(self.state)
        return svid

    def draw_batch(self, n):
        """Draw ``n`` consecutive SVIDs as an int64 array."""
        start = self.state.next_seq
        if start + n > SEQ_LIMIT:
            raise SequenceExhausted("14-digit sequence space exhausted")
        seqs = np.arange(start, start + n, dtype=np.int64)
        svids = seqs * 10 + check_digits(seqs)
        self.state = GeneratorState(start + n)
        self.commit()
        return svids

    def commit(self):
        if self.path is not None:
            save_state(self.path, self.state)


def load_state(path):
    text = Path(path).read_text().strip()
    if not text.isdigit():
        raise MalformedSequence(f"corrupt generator state in {path}")
    return GeneratorState(int(text))


def save_state(path, state):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(f"{state.next_seq}\n")
    tmp.replace(path)
