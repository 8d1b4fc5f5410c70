"""Thread-private keys, the XOR codec, and domain types shared by every table.

All randomness flows through explicitly passed ``random.Random`` instances so
that any run is replayable from its seed.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass

MASK64 = (1 << 64) - 1

# Rotation stride separating the derived views of one master key.  Different
# tables pull their slices from different rotations of the same 64-bit value;
# overlap between slices is fine, sameness is what we avoid.
_SALT_STRIDE = 13


def mask(width: int) -> int:
    return (1 << width) - 1


def rotl64(value: int, amount: int) -> int:
    amount %= 64
    if amount == 0:
        return value & MASK64
    return ((value << amount) | (value >> (64 - amount))) & MASK64


def codec_apply(word: int, key_slice: int, width: int) -> int:
    """XOR ``word`` with ``key_slice``; self-inverse for equal widths.

    Raises ValueError if either operand does not fit in ``width`` bits.
    """
    if width <= 0:
        raise ValueError(f"codec width must be positive, got {width}")
    if not 0 <= word <= mask(width):
        raise ValueError(f"word {word:#x} does not fit in {width} bits")
    if not 0 <= key_slice <= mask(width):
        raise ValueError(f"key slice {key_slice:#x} does not fit in {width} bits")
    return word ^ key_slice


@dataclass(frozen=True)
class Key:
    """One 64-bit master random value per hardware-thread context.

    Every per-table key (content slices, index slices, per-word keys) is a
    deterministic rotation/truncation of the master value, so a zero master
    makes every derived key zero and every codec the identity.
    """

    value: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.value <= MASK64:
            raise ValueError("key value must be an unsigned 64-bit integer")

    def content_slice(self, width: int, salt: int = 0) -> int:
        """Content key for whole-field encoding (BTB tags/targets)."""
        return rotl64(self.value, _SALT_STRIDE * salt) & mask(width)

    def index_slice(self, width: int, salt: int = 0) -> int:
        """Index key used to randomize a table index of ``width`` bits."""
        return rotl64(self.value, 32 + 11 * salt) & mask(width)

    def field_slice(self, entry_index: int, width: int, salt: int = 0) -> int:
        """Per-entry content key for a ``width``-bit field at ``entry_index``.

        The slice position advances with the entry index, so slices repeat
        with period 64/width entries; that fixed mapping is exactly the
        weakness the word-granular schedule exists to avoid.
        """
        rot = (_SALT_STRIDE * salt + width * entry_index) % 64
        return rotl64(self.value, rot) & mask(width)

    def word_key(self, word_index: int, width: int = 32) -> int:
        """Key for one physical word of a word-encoded counter table."""
        return rotl64(self.value, (17 * word_index) % 64) & mask(width)


def generate_key(rng: random.Random) -> Key:
    """Draw a fresh uniformly distributed 64-bit key, advancing ``rng``."""
    return Key(rng.getrandbits(64))


class Privilege(enum.Enum):
    USER = "user"
    KERNEL = "kernel"


class EventKind(enum.Enum):
    CONTEXT_SWITCH_IN = "context-switch-in"
    CONTEXT_SWITCH_OUT = "context-switch-out"
    PRIVILEGE_CHANGE = "privilege-change"


@dataclass(frozen=True)
class ScheduleEvent:
    """A context-switch or privilege-switch at a simulated cycle."""

    cycle: int
    kind: EventKind
    tid: int
    to_level: Privilege | None = None


@dataclass
class ThreadContext:
    """A hardware thread's identity, privilege level, and current key."""

    tid: int
    privilege: Privilege = Privilege.USER
    key: Key = Key(0)
    rotation_count: int = 0


def rotate_key(ctx: ThreadContext, event: ScheduleEvent, rng: random.Random) -> ThreadContext:
    """Replace ``ctx``'s key on a switch-in or privilege-change event.

    Only the key and rotation counter change; an event addressed to another
    thread is a contract violation.
    """
    if event.tid != ctx.tid:
        raise ValueError(
            f"rotation event for tid {event.tid} delivered to context {ctx.tid}"
        )
    if event.kind not in (EventKind.CONTEXT_SWITCH_IN, EventKind.PRIVILEGE_CHANGE):
        raise ValueError(f"event kind {event.kind.value} does not rotate keys")
    ctx.key = generate_key(rng)
    ctx.rotation_count += 1
    return ctx


class Mechanism(enum.Enum):
    BASELINE = "baseline"
    COMPLETE_FLUSH = "complete-flush"
    PRECISE_FLUSH = "precise-flush"
    XOR_BP = "xor-bp"
    NOISY_XOR_BP = "noisy-xor-bp"


class PhtEncoding(enum.Enum):
    PER_ENTRY = "per-entry"
    ENHANCED_WORD = "enhanced-word"


def _enum_by_value(cls, name: str):
    try:
        return cls(name)
    except ValueError:
        valid = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown {cls.__name__} {name!r}; valid values: {valid}") from None


class BranchKind(enum.Enum):
    CONDITIONAL = "cond"
    INDIRECT = "ind"
    DIRECT_CALL = "call"
    RETURN = "ret"


@dataclass(frozen=True)
class BranchRecord:
    """One dynamic branch from a trace.

    ``inst_gap`` counts non-branch instructions retired before this branch so
    traces carry an instruction denominator for MPKI.  Indirect-class records
    are treated as taken with a target.
    """

    pc: int
    kind: BranchKind
    taken: bool
    target: int = 0
    tid: int = 0
    inst_gap: int = 0


@dataclass(frozen=True)
class MechanismConfig:
    """Which isolation mechanism is active and how the PHT is encoded."""

    mechanism: Mechanism = Mechanism.BASELINE
    pht_encoding: PhtEncoding = PhtEncoding.ENHANCED_WORD
    word_width_bits: int = 32
    hardened_word_select: bool = False
    owner_tracking: bool | None = None  # None = implied by mechanism

    def __post_init__(self) -> None:
        w = self.word_width_bits
        if w < 2 or (w & (w - 1)) != 0:
            raise ValueError(f"word_width_bits must be a power of two >= 2, got {w}")
        if self.mechanism is Mechanism.PRECISE_FLUSH and self.owner_tracking is False:
            raise ValueError("precise-flush requires per-entry owner tracking")

    @property
    def content_enabled(self) -> bool:
        return self.mechanism in (Mechanism.XOR_BP, Mechanism.NOISY_XOR_BP)

    @property
    def index_enabled(self) -> bool:
        return self.mechanism is Mechanism.NOISY_XOR_BP

    @property
    def rotates_keys(self) -> bool:
        return self.content_enabled

    @property
    def tracks_owner(self) -> bool:
        if self.owner_tracking is not None:
            return self.owner_tracking
        return self.mechanism is Mechanism.PRECISE_FLUSH

    @staticmethod
    def from_name(name: str, **kwargs) -> "MechanismConfig":
        return MechanismConfig(mechanism=_enum_by_value(Mechanism, name), **kwargs)
