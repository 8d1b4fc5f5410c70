"""Defense layers over the predictor structures.

Word-granular counter encoding treats a counter table as an array of physical
words and encodes whole rows, so nearby logical entries see unrelated key
bits.  The two flush baselines clear predictor state completely or per owning
thread.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from .core import Key, MechanismConfig, mask, rotl64

if TYPE_CHECKING:  # pragma: no cover - typing only, avoids an import cycle
    from .predictors import Pht, PredictorStack

_SELECT_XOR_SALT = 9
_SELECT_ROT_SALT = 10


@dataclass(frozen=True)
class WordKeySchedule:
    """Derives a per-word key for every physical word of a counter table."""

    key: Key
    word_width: int = 32

    def word_key(self, word_index: int) -> int:
        return self.key.word_key(word_index, self.word_width)

    def select_word(self, word_index: int, num_words: int, hardened: bool) -> int:
        """Physical word for a logical word index; a bijection for any key.

        The hardened variant breaks the fixed entry-to-key-bits mapping by
        XOR-shifting the word index with key material.
        """
        if not hardened:
            return word_index
        bits = num_words.bit_length() - 1
        if num_words != 1 << bits:
            raise ValueError("hardened word select requires a power-of-two word count")
        w = word_index ^ self.key.index_slice(bits, _SELECT_XOR_SALT)
        rot = self.key.index_slice(6, _SELECT_ROT_SALT) % bits if bits else 0
        if rot:
            w = ((w << rot) | (w >> (bits - rot))) & mask(bits)
        return w


def enhanced_pht_read(pht: "Pht", entry_index: int, schedule: WordKeySchedule,
                      cfg: MechanismConfig) -> int:
    """Decode one 2-bit counter through its word key."""
    if not 0 <= entry_index < pht.num_entries:
        raise ValueError(f"entry index {entry_index} out of range")
    logical, offset = divmod(entry_index, pht.entries_per_word)
    physical = schedule.select_word(logical, pht.num_words, cfg.hardened_word_select)
    decoded = pht.words[physical] ^ schedule.word_key(physical)
    return (decoded >> (2 * offset)) & 3


def enhanced_pht_write(pht: "Pht", entry_index: int, new_counter: int,
                       schedule: WordKeySchedule, cfg: MechanismConfig) -> None:
    """Read-decode-modify-encode-write of one 2-bit field; neighbors untouched."""
    if not 0 <= entry_index < pht.num_entries:
        raise ValueError(f"entry index {entry_index} out of range")
    if not 0 <= new_counter <= 3:
        raise ValueError(f"counter value out of range: {new_counter}")
    logical, offset = divmod(entry_index, pht.entries_per_word)
    physical = schedule.select_word(logical, pht.num_words, cfg.hardened_word_select)
    wkey = schedule.word_key(physical)
    decoded = pht.words[physical] ^ wkey
    shift = 2 * offset
    decoded = (decoded & ~(3 << shift)) | (new_counter << shift)
    pht.words[physical] = decoded ^ wkey


@dataclass(frozen=True)
class FlushStats:
    entries_cleared: int
    cycle: int = 0


def flush_complete(stack: "PredictorStack", cycle: int = 0) -> FlushStats:
    """Invalidate the BTB, reset every counter, clear all histories."""
    cleared = stack.btb.invalidate_all()
    cleared += stack.direction.flush_tables()
    stack.clear_histories()
    return FlushStats(entries_cleared=cleared, cycle=cycle)


def flush_precise(stack: "PredictorStack", tid: int, cycle: int = 0) -> FlushStats:
    """Invalidate/reset exactly the entries owned by ``tid``."""
    if not stack.cfg.tracks_owner:
        raise ValueError("precise flush requires owner tracking on predictor state")
    cleared = stack.btb.invalidate_owned(tid)
    cleared += stack.direction.flush_owned(tid)
    stack.clear_history(tid)
    return FlushStats(entries_cleared=cleared, cycle=cycle)
