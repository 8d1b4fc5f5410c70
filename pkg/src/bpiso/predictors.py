"""Predictor structures: BTB, Gshare PHT, Tournament, and a simplified TAGE.

Every table read/write funnels through the configured content and index
codecs, so a zero key (or any fixed, never-rotated key) is bit-for-bit
equivalent to the unencoded baseline.  Table state is shared between hardware
threads; history registers are private per thread.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import isolation
from .core import (
    BranchKind,
    BranchRecord,
    Key,
    MechanismConfig,
    PhtEncoding,
    ThreadContext,
    mask,
)

# Default geometry: 256-set 2-way BTB with 12-bit tags, 4K-entry PHTs.
BTB_SETS = 256
BTB_WAYS = 2
BTB_TAG_BITS = 12
PHT_ENTRIES = 4096
GSHARE_HISTORY_BITS = 8  # history XORs into the low index bits only

TOURN_LOCAL_ENTRIES = 2048
TOURN_LOCAL_HISTORY_BITS = 11
TOURN_GLOBAL_ENTRIES = 8192
TOURN_PATH_HISTORY_BITS = 12

TAGE_NUM_TABLES = 6
TAGE_TABLE_ENTRIES = 4096
TAGE_TAG_BITS = 11
TAGE_HISTORY_LENGTHS = (12, 27, 44, 63, 90, 130)
TAGE_CTR_BITS = 3
TAGE_USEFUL_RESET_PERIOD = 256 * 1024

PC_SHIFT = 2  # word-aligned instructions; low two pc bits carry no index info

RESET_COUNTER = 1  # WeakNotTaken

# Key-slice salts.  Content salts select the rotation a table's content keys
# are drawn from; index salts do the same for index keys.
SALT_BTB_TAG = 0
SALT_BTB_TARGET = 1
SALT_GSHARE_PHT = 2
SALT_TOURN_LOCAL_HIST = 3
SALT_TOURN_LOCAL_CTR = 4
SALT_TOURN_GLOBAL = 5
SALT_TOURN_CHOOSER = 6
SALT_TAGE_BASE = 7
SALT_TAGE_TAG = 8  # + table id
SALT_TAGE_CTR = 16  # + table id

IDX_SALT_BTB = 0
IDX_SALT_GSHARE = 1
IDX_SALT_TOURN_LOCAL_HIST = 2
IDX_SALT_TOURN_LOCAL_CTR = 3
IDX_SALT_TOURN_PATH = 4
IDX_SALT_TAGE = 5  # + table id


def counter_update(state: int, outcome: bool) -> int:
    """2-bit saturating counter FSM: taken saturates to 3, not-taken to 0."""
    if not 0 <= state <= 3:
        raise ValueError(f"counter state out of range: {state}")
    if outcome:
        return min(state + 1, 3)
    return max(state - 1, 0)


class Pht:
    """Array of 2-bit saturating counters packed into physical words.

    Packing into words is what makes word-granular encoding meaningful: the
    codec can operate on a whole row regardless of the 2-bit field layout.
    Written words are tracked so flushes cost O(writes), not O(table).
    """

    def __init__(self, num_entries: int = PHT_ENTRIES, word_width: int = 32,
                 track_owner: bool = False):
        if num_entries & (num_entries - 1):
            raise ValueError("num_entries must be a power of two")
        self.num_entries = num_entries
        self.word_width = word_width
        self.entries_per_word = word_width // 2
        self.num_words = num_entries // self.entries_per_word
        reset_word = 0
        lsb_mask = 0
        for i in range(self.entries_per_word):
            reset_word |= RESET_COUNTER << (2 * i)
            lsb_mask |= 1 << (2 * i)
        self._reset_word = reset_word
        self._field_lsb_mask = lsb_mask
        self.words = [reset_word] * self.num_words
        self.owners: list[int | None] | None = [None] * num_entries if track_owner else None
        self._touched_words: set[int] = set()
        self._owned_entries: set[int] = set()

    def read_raw(self, entry: int) -> int:
        w, o = divmod(entry, self.entries_per_word)
        return (self.words[w] >> (2 * o)) & 3

    def write_raw(self, entry: int, value: int) -> None:
        w, o = divmod(entry, self.entries_per_word)
        shift = 2 * o
        self.words[w] = (self.words[w] & ~(3 << shift)) | ((value & 3) << shift)
        self._touched_words.add(w)

    def set_owner(self, entry: int, tid: int) -> None:
        if self.owners is not None:
            self.owners[entry] = tid
            self._owned_entries.add(entry)

    def reset_entry(self, entry: int) -> None:
        self.write_raw(entry, RESET_COUNTER)

    def _diff_count(self, word_index: int) -> int:
        """Counters in one word that differ from the reset pattern."""
        x = self.words[word_index] ^ self._reset_word
        return ((x | (x >> 1)) & self._field_lsb_mask).bit_count()

    def reset_all(self) -> int:
        """Reset every counter; returns how many were not already at reset."""
        cleared = sum(self._diff_count(w) for w in self._touched_words)
        self.words = [self._reset_word] * self.num_words
        self._touched_words.clear()
        if self.owners is not None:
            self.owners = [None] * self.num_entries
            self._owned_entries.clear()
        return cleared

    def reset_owned(self, tid: int) -> int:
        if self.owners is None:
            raise ValueError("owner tracking not enabled on this table")
        cleared = 0
        for e in list(self._owned_entries):
            if self.owners[e] == tid:
                if self.read_raw(e) != RESET_COUNTER:
                    cleared += 1
                self.reset_entry(e)
                self.owners[e] = None
                self._owned_entries.discard(e)
        return cleared

    def encode_reset_state(self, ctx: ThreadContext, cfg: MechanismConfig,
                           salt: int) -> None:
        """Store the reset pattern encoded under ``ctx``'s key.

        Cold state then decodes to the reset counter for the initial key
        epoch, making a fixed-key run indistinguishable from baseline.
        """
        if not cfg.content_enabled:
            return
        if cfg.pht_encoding is PhtEncoding.ENHANCED_WORD:
            for w in range(self.num_words):
                self.words[w] = self._reset_word ^ ctx.key.word_key(w, self.word_width)
        else:
            for e in range(self.num_entries):
                self.write_raw(e, RESET_COUNTER ^ ctx.key.field_slice(e, 2, salt))
        self._touched_words.update(range(self.num_words))


def pht_read(pht: Pht, entry: int, ctx: ThreadContext, cfg: MechanismConfig,
             salt: int = SALT_GSHARE_PHT) -> int:
    """Decoded 2-bit counter as seen by ``ctx`` under the configured codec."""
    if not 0 <= entry < pht.num_entries:
        raise ValueError(f"entry index {entry} out of range")
    if cfg.content_enabled:
        if cfg.pht_encoding.value == "enhanced-word":
            schedule = isolation.WordKeySchedule(ctx.key, pht.word_width)
            return isolation.enhanced_pht_read(pht, entry, schedule, cfg)
        return pht.read_raw(entry) ^ ctx.key.field_slice(entry, 2, salt)
    return pht.read_raw(entry)


def pht_write(pht: Pht, entry: int, value: int, ctx: ThreadContext,
              cfg: MechanismConfig, salt: int = SALT_GSHARE_PHT) -> None:
    if not 0 <= entry < pht.num_entries:
        raise ValueError(f"entry index {entry} out of range")
    if not 0 <= value <= 3:
        raise ValueError(f"counter value out of range: {value}")
    if cfg.content_enabled:
        if cfg.pht_encoding.value == "enhanced-word":
            schedule = isolation.WordKeySchedule(ctx.key, pht.word_width)
            isolation.enhanced_pht_write(pht, entry, value, schedule, cfg)
        else:
            pht.write_raw(entry, value ^ ctx.key.field_slice(entry, 2, salt))
    else:
        pht.write_raw(entry, value)
    pht.set_owner(entry, ctx.tid)


@dataclass
class BtbEntry:
    valid: bool = False
    tag: int = 0       # stored (possibly encoded)
    target: int = 0    # stored (possibly encoded)
    owner: int | None = None


class Btb:
    """Set-associative branch target buffer with true-LRU replacement."""

    def __init__(self, num_sets: int = BTB_SETS, ways: int = BTB_WAYS,
                 tag_bits: int = BTB_TAG_BITS):
        if num_sets & (num_sets - 1):
            raise ValueError("num_sets must be a power of two")
        self.num_sets = num_sets
        self.ways = ways
        self.tag_bits = tag_bits
        self.index_bits = num_sets.bit_length() - 1
        self.sets = [[BtbEntry() for _ in range(ways)] for _ in range(num_sets)]
        # lru[s] lists way indices, most recently used first
        self.lru = [list(range(ways)) for _ in range(num_sets)]
        self._touched_sets: set[int] = set()

    def set_index(self, pc: int, ctx: ThreadContext, cfg: MechanismConfig) -> int:
        idx = (pc >> PC_SHIFT) & (self.num_sets - 1)
        if cfg.index_enabled:
            idx ^= ctx.key.index_slice(self.index_bits, IDX_SALT_BTB)
        return idx

    def tag_of(self, pc: int) -> int:
        return (pc >> (PC_SHIFT + self.index_bits)) & mask(self.tag_bits)

    def _touch(self, s: int, way: int) -> None:
        order = self.lru[s]
        order.remove(way)
        order.insert(0, way)

    def lookup(self, pc: int, ctx: ThreadContext, cfg: MechanismConfig) -> int | None:
        """Predicted target on a tag hit, else None.  Updates LRU on hit."""
        s = self.set_index(pc, ctx, cfg)
        expected = self.tag_of(pc)
        if cfg.content_enabled:
            expected ^= ctx.key.content_slice(self.tag_bits, SALT_BTB_TAG)
        for way, entry in enumerate(self.sets[s]):
            if not entry.valid or entry.tag != expected:
                continue
            self._touch(s, way)
            target = entry.target
            if cfg.content_enabled:
                target ^= ctx.key.content_slice(64, SALT_BTB_TARGET)
            return target
        return None

    def update(self, pc: int, actual_target: int, taken: bool,
               ctx: ThreadContext, cfg: MechanismConfig) -> None:
        """Allocate/refresh the entry for ``pc``; no-op unless taken."""
        if not taken:
            return
        s = self.set_index(pc, ctx, cfg)
        tag = self.tag_of(pc)
        target = actual_target
        if cfg.content_enabled:
            tag ^= ctx.key.content_slice(self.tag_bits, SALT_BTB_TAG)
            target ^= ctx.key.content_slice(64, SALT_BTB_TARGET)
        ways = self.sets[s]
        victim = None
        for way, entry in enumerate(ways):
            if entry.valid and entry.tag == tag:
                victim = way
                break
        if victim is None:
            for way, entry in enumerate(ways):
                if not entry.valid:
                    victim = way
                    break
        if victim is None:
            victim = self.lru[s][-1]
        entry = ways[victim]
        entry.valid = True
        entry.tag = tag
        entry.target = target
        entry.owner = ctx.tid if cfg.tracks_owner else None
        self._touched_sets.add(s)
        self._touch(s, victim)

    def valid_count(self) -> int:
        return sum(1 for s in self._touched_sets for e in self.sets[s] if e.valid)

    def invalidate_all(self) -> int:
        cleared = 0
        for s in self._touched_sets:
            for entry in self.sets[s]:
                if entry.valid:
                    cleared += 1
                entry.valid = False
                entry.owner = None
            self.lru[s] = list(range(self.ways))
        self._touched_sets.clear()
        return cleared

    def invalidate_owned(self, tid: int) -> int:
        cleared = 0
        for s in self._touched_sets:
            for entry in self.sets[s]:
                if entry.valid and entry.owner == tid:
                    entry.valid = False
                    entry.owner = None
                    cleared += 1
        return cleared


def gshare_index(pc: int, ghr: int, ctx: ThreadContext, cfg: MechanismConfig,
                 num_entries: int = PHT_ENTRIES) -> int:
    """PC low bits XOR global history, XOR the index key when randomized."""
    bits = num_entries.bit_length() - 1
    idx = ((pc >> PC_SHIFT) ^ ghr) & (num_entries - 1)
    if cfg.index_enabled:
        idx ^= ctx.key.index_slice(bits, IDX_SALT_GSHARE)
    return idx


class GshareHistory:
    __slots__ = ("ghr",)

    def __init__(self) -> None:
        self.ghr = 0

    def shift(self, taken: bool) -> None:
        self.ghr = ((self.ghr << 1) | int(taken)) & mask(GSHARE_HISTORY_BITS)

    def clear(self) -> None:
        self.ghr = 0


class Gshare:
    """Global-history direction predictor over a single PHT."""

    name = "gshare"

    def __init__(self, cfg: MechanismConfig, seed: int = 0):
        self.cfg = cfg
        self.pht = Pht(PHT_ENTRIES, cfg.word_width_bits, track_owner=cfg.tracks_owner)
        self.use_brob = False

    def new_history(self) -> GshareHistory:
        return GshareHistory()

    def predict(self, pc: int, ctx: ThreadContext, hist: GshareHistory):
        idx = gshare_index(pc, hist.ghr, ctx, self.cfg, self.pht.num_entries)
        ctr = pht_read(self.pht, idx, ctx, self.cfg)
        return ctr >= 2, (idx, ctr)

    def update(self, pc: int, outcome: bool, ctx: ThreadContext,
               hist: GshareHistory, meta) -> None:
        idx, predicted_ctr = meta
        # Without a branch reorder buffer the counter is re-read at commit;
        # with one, the predict-time value is carried forward.
        ctr = predicted_ctr if self.use_brob else pht_read(self.pht, idx, ctx, self.cfg)
        pht_write(self.pht, idx, counter_update(ctr, outcome), ctx, self.cfg)
        hist.shift(outcome)

    def counter_arrays(self):
        return [self.pht]

    def flush_tables(self) -> int:
        return self.pht.reset_all()

    def flush_owned(self, tid: int) -> int:
        return self.pht.reset_owned(tid)

    def prime_encoded_state(self, ctx: ThreadContext) -> None:
        self.pht.encode_reset_state(ctx, self.cfg, SALT_GSHARE_PHT)


class TournamentHistory:
    __slots__ = ("path",)

    def __init__(self) -> None:
        self.path = 0

    def shift(self, taken: bool) -> None:
        self.path = ((self.path << 1) | int(taken)) & mask(TOURN_PATH_HISTORY_BITS)

    def clear(self) -> None:
        self.path = 0


class Tournament:
    """Local/global hybrid with a chooser, all tables behind the codecs.

    First level: per-PC local histories feeding local prediction counters.
    Global and chooser tables are indexed by the same path-history value.
    """

    name = "tournament"

    def __init__(self, cfg: MechanismConfig, seed: int = 0):
        self.cfg = cfg
        owner = cfg.tracks_owner
        self.local_hist = [0] * TOURN_LOCAL_ENTRIES
        self.local_hist_owner: list[int | None] | None = (
            [None] * TOURN_LOCAL_ENTRIES if owner else None)
        self._lh_touched: set[int] = set()
        self.local_ctr = Pht(TOURN_LOCAL_ENTRIES, cfg.word_width_bits, track_owner=owner)
        self.global_ctr = Pht(TOURN_GLOBAL_ENTRIES, cfg.word_width_bits, track_owner=owner)
        self.chooser = Pht(TOURN_GLOBAL_ENTRIES, cfg.word_width_bits, track_owner=owner)

    def new_history(self) -> TournamentHistory:
        return TournamentHistory()

    def _lh_index(self, pc: int, ctx: ThreadContext) -> int:
        idx = (pc >> PC_SHIFT) & (TOURN_LOCAL_ENTRIES - 1)
        if self.cfg.index_enabled:
            idx ^= ctx.key.index_slice(TOURN_LOCAL_HISTORY_BITS, IDX_SALT_TOURN_LOCAL_HIST)
        return idx

    def _read_local_hist(self, idx: int, ctx: ThreadContext) -> int:
        h = self.local_hist[idx]
        if self.cfg.content_enabled:
            return h ^ ctx.key.field_slice(idx, TOURN_LOCAL_HISTORY_BITS, SALT_TOURN_LOCAL_HIST)
        return h

    def _write_local_hist(self, idx: int, value: int, ctx: ThreadContext) -> None:
        if self.cfg.content_enabled:
            value ^= ctx.key.field_slice(idx, TOURN_LOCAL_HISTORY_BITS, SALT_TOURN_LOCAL_HIST)
        self.local_hist[idx] = value
        self._lh_touched.add(idx)
        if self.local_hist_owner is not None:
            self.local_hist_owner[idx] = ctx.tid

    def _lc_index(self, local_history: int, ctx: ThreadContext) -> int:
        idx = local_history & (TOURN_LOCAL_ENTRIES - 1)
        if self.cfg.index_enabled:
            idx ^= ctx.key.index_slice(TOURN_LOCAL_HISTORY_BITS, IDX_SALT_TOURN_LOCAL_CTR)
        return idx

    def _path_index(self, path: int, ctx: ThreadContext) -> int:
        idx = path & (TOURN_GLOBAL_ENTRIES - 1)
        if self.cfg.index_enabled:
            bits = TOURN_GLOBAL_ENTRIES.bit_length() - 1
            idx ^= ctx.key.index_slice(bits, IDX_SALT_TOURN_PATH)
        return idx

    def predict(self, pc: int, ctx: ThreadContext, hist: TournamentHistory):
        lh_idx = self._lh_index(pc, ctx)
        local_history = self._read_local_hist(lh_idx, ctx)
        lc_idx = self._lc_index(local_history, ctx)
        local_pred = pht_read(self.local_ctr, lc_idx, ctx, self.cfg, SALT_TOURN_LOCAL_CTR) >= 2
        p_idx = self._path_index(hist.path, ctx)
        global_pred = pht_read(self.global_ctr, p_idx, ctx, self.cfg, SALT_TOURN_GLOBAL) >= 2
        # Chooser counts toward the local side; the cold/reset state weakly
        # prefers the global predictor, which warms in one update per branch
        # where the two-level local side first needs its history refilled.
        use_local = pht_read(self.chooser, p_idx, ctx, self.cfg, SALT_TOURN_CHOOSER) >= 2
        pred = local_pred if use_local else global_pred
        return pred, (lh_idx, local_history, lc_idx, p_idx, local_pred, global_pred)

    def update(self, pc: int, outcome: bool, ctx: ThreadContext,
               hist: TournamentHistory, meta) -> None:
        lh_idx, local_history, lc_idx, p_idx, local_pred, global_pred = meta
        # Chooser trains only when exactly one component was correct.
        if local_pred != global_pred:
            ch = pht_read(self.chooser, p_idx, ctx, self.cfg, SALT_TOURN_CHOOSER)
            pht_write(self.chooser, p_idx, counter_update(ch, local_pred == outcome),
                      ctx, self.cfg, SALT_TOURN_CHOOSER)
        lc = pht_read(self.local_ctr, lc_idx, ctx, self.cfg, SALT_TOURN_LOCAL_CTR)
        pht_write(self.local_ctr, lc_idx, counter_update(lc, outcome),
                  ctx, self.cfg, SALT_TOURN_LOCAL_CTR)
        gc = pht_read(self.global_ctr, p_idx, ctx, self.cfg, SALT_TOURN_GLOBAL)
        pht_write(self.global_ctr, p_idx, counter_update(gc, outcome),
                  ctx, self.cfg, SALT_TOURN_GLOBAL)
        new_lh = ((local_history << 1) | int(outcome)) & mask(TOURN_LOCAL_HISTORY_BITS)
        self._write_local_hist(lh_idx, new_lh, ctx)
        hist.shift(outcome)

    def counter_arrays(self):
        return [self.local_ctr, self.global_ctr, self.chooser]

    def flush_tables(self) -> int:
        cleared = sum(t.reset_all() for t in self.counter_arrays())
        cleared += sum(1 for i in self._lh_touched if self.local_hist[i] != 0)
        self.local_hist = [0] * TOURN_LOCAL_ENTRIES
        self._lh_touched.clear()
        if self.local_hist_owner is not None:
            self.local_hist_owner = [None] * TOURN_LOCAL_ENTRIES
        return cleared

    def flush_owned(self, tid: int) -> int:
        cleared = sum(t.reset_owned(tid) for t in self.counter_arrays())
        if self.local_hist_owner is None:
            raise ValueError("owner tracking not enabled on this predictor")
        for i in list(self._lh_touched):
            if self.local_hist_owner[i] == tid:
                if self.local_hist[i] != 0:
                    cleared += 1
                self.local_hist[i] = 0
                self.local_hist_owner[i] = None
                self._lh_touched.discard(i)
        return cleared

    def prime_encoded_state(self, ctx: ThreadContext) -> None:
        self.local_ctr.encode_reset_state(ctx, self.cfg, SALT_TOURN_LOCAL_CTR)
        self.global_ctr.encode_reset_state(ctx, self.cfg, SALT_TOURN_GLOBAL)
        self.chooser.encode_reset_state(ctx, self.cfg, SALT_TOURN_CHOOSER)
        if self.cfg.content_enabled:
            self.local_hist = [
                ctx.key.field_slice(e, TOURN_LOCAL_HISTORY_BITS, SALT_TOURN_LOCAL_HIST)
                for e in range(TOURN_LOCAL_ENTRIES)
            ]
            self._lh_touched.update(range(TOURN_LOCAL_ENTRIES))


class _FoldedHistory:
    """History of length ``orig_len`` folded into ``width`` bits, incrementally."""

    __slots__ = ("comp", "orig_len", "width", "offset", "out_mask")

    def __init__(self, orig_len: int, width: int):
        self.comp = 0
        self.orig_len = orig_len
        self.width = width
        self.offset = orig_len % width
        self.out_mask = mask(width)

    def update(self, new_bit: int, old_bit: int) -> None:
        c = ((self.comp << 1) | new_bit) ^ (old_bit << self.offset)
        c ^= c >> self.width
        self.comp = c & self.out_mask

    def clear(self) -> None:
        self.comp = 0


class TageHistory:
    """Per-thread global history plus folded views for every tagged table."""

    def __init__(self) -> None:
        self.ghr = 0
        self._ghr_mask = mask(max(TAGE_HISTORY_LENGTHS) + 1)
        index_bits = TAGE_TABLE_ENTRIES.bit_length() - 1
        self.folded_idx = [_FoldedHistory(L, index_bits) for L in TAGE_HISTORY_LENGTHS]
        self.folded_tag_a = [_FoldedHistory(L, TAGE_TAG_BITS) for L in TAGE_HISTORY_LENGTHS]
        self.folded_tag_b = [_FoldedHistory(L, TAGE_TAG_BITS - 1) for L in TAGE_HISTORY_LENGTHS]

    def shift(self, taken: bool) -> None:
        bit = int(taken)
        ghr = self.ghr
        for i, length in enumerate(TAGE_HISTORY_LENGTHS):
            old = (ghr >> (length - 1)) & 1
            self.folded_idx[i].update(bit, old)
            self.folded_tag_a[i].update(bit, old)
            self.folded_tag_b[i].update(bit, old)
        self.ghr = ((ghr << 1) | bit) & self._ghr_mask

    def clear(self) -> None:
        self.ghr = 0
        for regs in (self.folded_idx, self.folded_tag_a, self.folded_tag_b):
            for r in regs:
                r.clear()


class _TageTable:
    """One tagged component: parallel arrays of tag/counter/useful/valid."""

    def __init__(self, entries: int, track_owner: bool):
        self.entries = entries
        self.valid = [False] * entries
        self.tags = [0] * entries
        self.ctrs = [0] * entries  # stored (possibly encoded) 3-bit counters
        self.useful = [0] * entries
        self.owners: list[int | None] | None = [None] * entries if track_owner else None
        self.touched: set[int] = set()

    def invalidate_all(self) -> int:
        cleared = sum(1 for e in self.touched if self.valid[e])
        self.valid = [False] * self.entries
        self.useful = [0] * self.entries
        self.touched.clear()
        if self.owners is not None:
            self.owners = [None] * self.entries
        return cleared

    def invalidate_owned(self, tid: int) -> int:
        if self.owners is None:
            raise ValueError("owner tracking not enabled on this table")
        cleared = 0
        for e in list(self.touched):
            if self.valid[e] and self.owners[e] == tid:
                self.valid[e] = False
                self.useful[e] = 0
                self.owners[e] = None
                self.touched.discard(e)
                cleared += 1
        return cleared


class Tage:
    """Tagged-geometric predictor: longest matching history provides.

    Six tagged tables over geometrically increasing history lengths sit on a
    bimodal base.  Allocation follows the usual useful-counter policy with a
    seeded coin for slot choice, so runs replay exactly.
    """

    name = "tage"

    def __init__(self, cfg: MechanismConfig, seed: int = 0):
        self.cfg = cfg
        owner = cfg.tracks_owner
        self.base = Pht(TAGE_TABLE_ENTRIES, cfg.word_width_bits, track_owner=owner)
        self.tables = [_TageTable(TAGE_TABLE_ENTRIES, owner) for _ in range(TAGE_NUM_TABLES)]
        self._rng = random.Random(seed ^ 0x7A6E)
        self._update_count = 0
        self._reset_hi = True
        self._index_bits = TAGE_TABLE_ENTRIES.bit_length() - 1
        self._ctr_mask = mask(TAGE_CTR_BITS)
        self._taken_threshold = 1 << (TAGE_CTR_BITS - 1)

    def new_history(self) -> TageHistory:
        return TageHistory()

    def _base_index(self, pc: int, ctx: ThreadContext) -> int:
        idx = (pc >> PC_SHIFT) & (TAGE_TABLE_ENTRIES - 1)
        if self.cfg.index_enabled:
            idx ^= ctx.key.index_slice(self._index_bits, IDX_SALT_TAGE - 1)
        return idx

    def _table_index(self, pc: int, hist: TageHistory, i: int, ctx: ThreadContext) -> int:
        idx = (pc >> PC_SHIFT) ^ (pc >> (PC_SHIFT + self._index_bits - i)) ^ hist.folded_idx[i].comp
        idx &= TAGE_TABLE_ENTRIES - 1
        if self.cfg.index_enabled:
            idx ^= ctx.key.index_slice(self._index_bits, IDX_SALT_TAGE + i)
        return idx

    def _table_tag(self, pc: int, hist: TageHistory, i: int) -> int:
        return ((pc >> PC_SHIFT) ^ hist.folded_tag_a[i].comp
                ^ (hist.folded_tag_b[i].comp << 1)) & mask(TAGE_TAG_BITS)

    def _stored_tag(self, tag: int, entry: int, i: int, ctx: ThreadContext) -> int:
        if self.cfg.content_enabled:
            return tag ^ ctx.key.field_slice(entry, TAGE_TAG_BITS, SALT_TAGE_TAG + i)
        return tag

    def _read_ctr(self, table: _TageTable, entry: int, i: int, ctx: ThreadContext) -> int:
        c = table.ctrs[entry]
        if self.cfg.content_enabled:
            c ^= ctx.key.field_slice(entry, TAGE_CTR_BITS, SALT_TAGE_CTR + i)
        return c

    def _write_ctr(self, table: _TageTable, entry: int, value: int, i: int,
                   ctx: ThreadContext) -> None:
        if self.cfg.content_enabled:
            value ^= ctx.key.field_slice(entry, TAGE_CTR_BITS, SALT_TAGE_CTR + i)
        table.ctrs[entry] = value

    def predict(self, pc: int, ctx: ThreadContext, hist: TageHistory):
        indices = [self._table_index(pc, hist, i, ctx) for i in range(TAGE_NUM_TABLES)]
        tags = [self._table_tag(pc, hist, i) for i in range(TAGE_NUM_TABLES)]
        provider = -1
        altpred_table = -1
        for i in range(TAGE_NUM_TABLES - 1, -1, -1):
            t = self.tables[i]
            e = indices[i]
            if not t.valid[e]:
                continue
            if t.tags[e] == self._stored_tag(tags[i], e, i, ctx):
                if provider < 0:
                    provider = i
                else:
                    altpred_table = i
                    break
        base_idx = self._base_index(pc, ctx)
        base_ctr = pht_read(self.base, base_idx, ctx, self.cfg, SALT_TAGE_BASE)
        base_pred = base_ctr >= 2
        if provider >= 0:
            ctr = self._read_ctr(self.tables[provider], indices[provider], provider, ctx)
            pred = ctr >= self._taken_threshold
        else:
            pred = base_pred
        if altpred_table >= 0:
            alt_ctr = self._read_ctr(self.tables[altpred_table], indices[altpred_table],
                                     altpred_table, ctx)
            altpred = alt_ctr >= self._taken_threshold
        else:
            altpred = base_pred
        meta = (indices, tags, provider, pred, altpred, base_idx)
        return pred, meta

    def update(self, pc: int, outcome: bool, ctx: ThreadContext,
               hist: TageHistory, meta) -> None:
        indices, tags, provider, pred, altpred, base_idx = meta
        if provider >= 0:
            table = self.tables[provider]
            e = indices[provider]
            ctr = self._read_ctr(table, e, provider, ctx)
            if outcome:
                ctr = min(ctr + 1, self._ctr_mask)
            else:
                ctr = max(ctr - 1, 0)
            self._write_ctr(table, e, ctr, provider, ctx)
            if table.owners is not None:
                table.owners[e] = ctx.tid
            if pred != altpred:
                u = table.useful[e]
                table.useful[e] = min(u + 1, 3) if pred == outcome else max(u - 1, 0)
        else:
            ctr = pht_read(self.base, base_idx, ctx, self.cfg, SALT_TAGE_BASE)
            pht_write(self.base, base_idx, counter_update(ctr, outcome),
                      ctx, self.cfg, SALT_TAGE_BASE)

        if pred != outcome and provider < TAGE_NUM_TABLES - 1:
            self._allocate(indices, tags, provider, outcome, ctx)

        self._update_count += 1
        if self._update_count % TAGE_USEFUL_RESET_PERIOD == 0:
            keep = 1 if self._reset_hi else 2
            for t in self.tables:
                t.useful = [u & keep for u in t.useful]
            self._reset_hi = not self._reset_hi

        hist.shift(outcome)

    def _allocate(self, indices, tags, provider, outcome: bool, ctx: ThreadContext) -> None:
        candidates = []
        for i in range(provider + 1, TAGE_NUM_TABLES):
            t = self.tables[i]
            e = indices[i]
            if not t.valid[e] or t.useful[e] == 0:
                candidates.append(i)
        if not candidates:
            for i in range(provider + 1, TAGE_NUM_TABLES):
                e = indices[i]
                t = self.tables[i]
                t.useful[e] = max(t.useful[e] - 1, 0)
            return
        chosen = candidates[0]
        for i in candidates[:-1]:
            if self._rng.getrandbits(1):
                chosen = i
                break
        else:
            chosen = candidates[-1]
        t = self.tables[chosen]
        e = indices[chosen]
        t.valid[e] = True
        t.tags[e] = self._stored_tag(tags[chosen], e, chosen, ctx)
        init = self._taken_threshold if outcome else self._taken_threshold - 1
        self._write_ctr(t, e, init, chosen, ctx)
        t.useful[e] = 0
        t.touched.add(e)
        if t.owners is not None:
            t.owners[e] = ctx.tid

    def counter_arrays(self):
        return [self.base]

    def flush_tables(self) -> int:
        cleared = self.base.reset_all()
        cleared += sum(t.invalidate_all() for t in self.tables)
        return cleared

    def flush_owned(self, tid: int) -> int:
        cleared = self.base.reset_owned(tid)
        cleared += sum(t.invalidate_owned(tid) for t in self.tables)
        return cleared

    def prime_encoded_state(self, ctx: ThreadContext) -> None:
        self.base.encode_reset_state(ctx, self.cfg, SALT_TAGE_BASE)


PREDICTOR_NAMES = ("gshare", "tournament", "tage")


def make_direction_predictor(name: str, cfg: MechanismConfig, seed: int = 0):
    if name == "gshare":
        return Gshare(cfg, seed)
    if name == "tournament":
        return Tournament(cfg, seed)
    if name == "tage":
        return Tage(cfg, seed)
    valid = ", ".join(PREDICTOR_NAMES)
    raise ValueError(f"unknown predictor {name!r}; valid values: {valid}")


@dataclass
class ExecOutcome:
    """What one committed branch did to the predictor stack."""

    direction_pred: bool | None = None
    target_pred: int | None = None
    direction_mispredict: bool = False
    target_mispredict: bool = False
    btb_miss: bool = False


class PredictorStack:
    """A BTB plus one direction predictor, with per-thread history registers."""

    def __init__(self, predictor: str, cfg: MechanismConfig, seed: int = 0,
                 btb_sets: int = BTB_SETS, btb_ways: int = BTB_WAYS,
                 btb_tag_bits: int = BTB_TAG_BITS):
        self.cfg = cfg
        self.btb = Btb(btb_sets, btb_ways, btb_tag_bits)
        self.direction = make_direction_predictor(predictor, cfg, seed)
        self.histories: dict[int, object] = {}

    def history_for(self, tid: int):
        hist = self.histories.get(tid)
        if hist is None:
            hist = self.direction.new_history()
            self.histories[tid] = hist
        return hist

    def prime_encoded_state(self, ctx: ThreadContext) -> None:
        """Make cold table state decode to reset values under ``ctx``'s key."""
        self.direction.prime_encoded_state(ctx)

    def predict_direction(self, pc: int, ctx: ThreadContext):
        return self.direction.predict(pc, ctx, self.history_for(ctx.tid))

    def commit_direction(self, pc: int, outcome: bool, ctx: ThreadContext, meta) -> None:
        self.direction.update(pc, outcome, ctx, self.history_for(ctx.tid), meta)

    def execute(self, record: BranchRecord, ctx: ThreadContext) -> ExecOutcome:
        out = ExecOutcome()
        if record.kind is BranchKind.CONDITIONAL:
            pred, meta = self.predict_direction(record.pc, ctx)
            out.direction_pred = pred
            out.direction_mispredict = pred != record.taken
            self.commit_direction(record.pc, record.taken, ctx, meta)
            if record.taken:
                self.btb.update(record.pc, record.target, True, ctx, self.cfg)
        else:
            # Indirect-class branches are always taken with a target.
            target = self.btb.lookup(record.pc, ctx, self.cfg)
            out.target_pred = target
            out.btb_miss = target is None
            out.target_mispredict = target != record.target
            self.btb.update(record.pc, record.target, True, ctx, self.cfg)
        return out

    def clear_histories(self) -> None:
        for hist in self.histories.values():
            hist.clear()

    def clear_history(self, tid: int) -> None:
        hist = self.histories.get(tid)
        if hist is not None:
            hist.clear()
