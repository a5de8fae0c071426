"""Interaction-log ingestion and cloze batch preparation.

Pipeline: ingest a ratings file (``user::item::rating::timestamp`` or a
CSV with header) -> per-user chronological sequences with a dense item
vocabulary -> leave-one-out split -> masked training batches.

Ratings are treated as implicit feedback: every rated item enters its
user's sequence. Sequences are truncated to their most recent items and
left-padded with PAD (=0), keeping recent context adjacent to the MASK
appended at inference time.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

PAD_TOKEN = 0

CSV_HEADER_ALIASES = {
    "user": ("userid", "user", "user_id"),
    "item": ("movieid", "item", "item_id", "itemid"),
    "rating": ("rating",),
    "timestamp": ("timestamp", "ts", "time"),
}


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

@dataclass
class InteractionLog:
    """Columnar record of (user, item, rating, timestamp) interactions.

    Order preserves the input file; duplicates of a (user, item,
    timestamp) triple keep only their first occurrence.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    malformed_lines: list[int] = field(default_factory=list)
    duplicates_dropped: int = 0

    @property
    def n_interactions(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(np.unique(self.users))

    @property
    def n_items(self) -> int:
        return len(np.unique(self.items))

    def sparsity(self) -> float:
        return 1.0 - self.n_interactions / (self.n_users * self.n_items)

    def stats(self) -> dict:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": self.n_interactions,
            "sparsity": self.sparsity(),
            "malformed_lines": len(self.malformed_lines),
            "duplicates_dropped": self.duplicates_dropped,
        }


def _parse_double_colon(path: Path):
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            yield lineno, line.split("::")


def _parse_csv(path: Path):
    with open(path, "r", encoding="utf-8", errors="replace", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty CSV file")
        lowered = [h.strip().lower() for h in header]
        positions = {}
        for fieldname, aliases in CSV_HEADER_ALIASES.items():
            for alias in aliases:
                if alias in lowered:
                    positions[fieldname] = lowered.index(alias)
                    break
        missing = [f for f in ("user", "item", "rating", "timestamp") if f not in positions]
        if missing:
            raise DataError(f"{path}: CSV header {header} missing columns for {missing}")
        order = [positions["user"], positions["item"], positions["rating"], positions["timestamp"]]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                yield lineno, [row[i] for i in order]
            except IndexError:
                yield lineno, row[:1]  # too few fields: reported as malformed


def detect_format(path) -> str:
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        first = f.readline()
    return "double_colon" if "::" in first else "csv"


def ingest(path, fmt: str = "auto") -> InteractionLog:
    """Parse a ratings file into an InteractionLog.

    Malformed lines are skipped and reported (with line numbers, via
    logging); more than 1% malformed is a hard error, as is an unreadable
    or empty file.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"cannot read interaction file: {path}")
    if fmt == "auto":
        fmt = detect_format(path)
    if fmt == "double_colon":
        rows = _parse_double_colon(path)
    elif fmt == "csv":
        rows = _parse_csv(path)
    else:
        raise DataError(f"unknown input format {fmt!r} (expected double_colon or csv)")

    users, items, ratings, stamps = [], [], [], []
    malformed: list[int] = []
    total = 0
    for lineno, fields in rows:
        total += 1
        if len(fields) != 4:
            malformed.append(lineno)
            continue
        try:
            u = int(fields[0])
            i = int(fields[1])
            r = float(fields[2])
            t = int(fields[3])
        except ValueError:
            malformed.append(lineno)
            continue
        users.append(u)
        items.append(i)
        ratings.append(r)
        stamps.append(t)

    if total == 0:
        raise DataError(f"{path}: no records found")
    if malformed:
        shown = ", ".join(map(str, malformed[:10]))
        more = f" (+{len(malformed) - 10} more)" if len(malformed) > 10 else ""
        log.warning("%s: skipped %d malformed line(s): %s%s", path, len(malformed), shown, more)
    if len(malformed) > 0.01 * total:
        raise DataError(
            f"{path}: {len(malformed)} of {total} lines malformed (> 1%), refusing to continue")

    users_a = np.asarray(users, dtype=np.int64)
    items_a = np.asarray(items, dtype=np.int64)
    ratings_a = np.asarray(ratings, dtype=np.float64)
    stamps_a = np.asarray(stamps, dtype=np.int64)

    seen: set[tuple[int, int, int]] = set()
    keep = np.ones(len(users_a), dtype=bool)
    for idx in range(len(users_a)):
        key = (users[idx], items[idx], stamps[idx])
        if key in seen:
            keep[idx] = False
        else:
            seen.add(key)
    dropped = int((~keep).sum())
    if dropped:
        users_a, items_a, ratings_a, stamps_a = (
            users_a[keep], items_a[keep], ratings_a[keep], stamps_a[keep])

    return InteractionLog(users_a, items_a, ratings_a, stamps_a,
                          malformed_lines=malformed, duplicates_dropped=dropped)


# ---------------------------------------------------------------------------
# vocabulary and sequences
# ---------------------------------------------------------------------------

class Vocabulary:
    """Dense bijection between raw item ids and model tokens.

    Token 0 is PAD and the last token is MASK; real items occupy
    [1, vocab_size - 2]. Token order follows first appearance in the
    source, so rebuilding from the same input reproduces the mapping.
    """

    def __init__(self, raw_ids_in_order: list[int]):
        self.token_to_raw: list[int] = list(raw_ids_in_order)
        self.raw_to_token: dict[int, int] = {
            raw: tok for tok, raw in enumerate(self.token_to_raw, start=1)}

    @property
    def n_items(self) -> int:
        return len(self.token_to_raw)

    @property
    def vocab_size(self) -> int:
        return self.n_items + 2

    @property
    def mask_token(self) -> int:
        return self.vocab_size - 1

    def encode(self, raw_id: int) -> int:
        return self.raw_to_token[raw_id]

    def decode(self, token: int) -> int:
        if not 1 <= token <= self.n_items:
            raise DataError(f"token {token} is not an item token")
        return self.token_to_raw[token - 1]

    def to_lines(self) -> str:
        return "\n".join(str(r) for r in self.token_to_raw) + "\n"

    @staticmethod
    def from_lines(text: str) -> "Vocabulary":
        return Vocabulary([int(line) for line in text.splitlines() if line.strip()])


@dataclass
class ItemSequence:
    user: int
    items: list[int]   # tokens, chronological


def build_sequences(interactions: InteractionLog,
                    min_len: int = 3) -> tuple[list[ItemSequence], Vocabulary]:
    """Chronological per-user token sequences plus the item vocabulary.

    Users with fewer than ``min_len`` interactions are dropped (holding
    out one test and one validation item still needs a training prefix).
    Timestamp ties keep file order.
    """
    if min_len < 3:
        raise DataError(f"min_len must be >= 3, got {min_len}")
    per_user: dict[int, list[tuple[int, int, int]]] = {}
    for order, (u, raw, ts) in enumerate(
            zip(interactions.users, interactions.items, interactions.timestamps)):
        per_user.setdefault(int(u), []).append((int(ts), order, int(raw)))

    # Tokenize in first-seen order over the kept, chronologically sorted
    # traversal, so a sequence-cache round trip rebuilds the same mapping.
    raw_first_seen: list[int] = []
    seen_items: set[int] = set()
    kept: list[tuple[int, list[int]]] = []
    for user in sorted(per_user):
        entries = sorted(per_user[user])  # (timestamp, input order): stable ties
        if len(entries) < min_len:
            continue
        raw_items = [raw for _, _, raw in entries]
        for raw in raw_items:
            if raw not in seen_items:
                seen_items.add(raw)
                raw_first_seen.append(raw)
        kept.append((user, raw_items))
    if not kept:
        raise DataError(f"no user has >= {min_len} interactions")
    vocab = Vocabulary(raw_first_seen)
    sequences = [ItemSequence(user, [vocab.encode(raw) for raw in raw_items])
                 for user, raw_items in kept]
    return sequences, vocab


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class EvalExample:
    user: int
    prefix: list[int]
    target: int


@dataclass
class SplitView:
    """Leave-one-out views: per user, the last item is the test target and
    the second-to-last the validation target; everything earlier trains."""

    train: list[ItemSequence]
    valid: list[EvalExample]
    test: list[EvalExample]


def split_leave_one_out(sequences: list[ItemSequence]) -> SplitView:
    train, valid, test = [], [], []
    for seq in sequences:
        if len(seq.items) < 3:
            raise DataError(f"user {seq.user}: sequence shorter than 3 cannot be split")
        items = seq.items
        train.append(ItemSequence(seq.user, items[:-2]))
        valid.append(EvalExample(seq.user, items[:-2], items[-2]))
        test.append(EvalExample(seq.user, items[:-1], items[-1]))
    return SplitView(train, valid, test)


# ---------------------------------------------------------------------------
# cloze batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray   # (B, N) int64, PAD-padded on the left
    valid: np.ndarray    # (B, N) bool
    labels: np.ndarray   # (B, N) int64, 0 where not a target

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def make_cloze_batches(train: list[ItemSequence], max_len: int, mask_token: int,
                       mask_prob: float, seed: int, batch_size: int):
    """Deterministic stream of masked training batches for one pass.

    Each sequence keeps its most recent ``max_len`` items, left-padded
    with PAD. Every non-pad position is independently replaced by MASK
    with probability ``mask_prob``; if no position is drawn the final
    item is force-masked so every sequence contributes at least one
    target. Labels carry the original token at masked positions.
    """
    if not 0.0 < mask_prob < 1.0:
        raise DataError(f"mask_prob must be in (0, 1), got {mask_prob}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train))
    for start in range(0, len(train), batch_size):
        rows = order[start:start + batch_size]
        b = len(rows)
        tokens = np.zeros((b, max_len), dtype=np.int64)
        labels = np.zeros((b, max_len), dtype=np.int64)
        for r, seq_idx in enumerate(rows):
            items = train[seq_idx].items[-max_len:]
            tokens[r, max_len - len(items):] = items
        valid = tokens != PAD_TOKEN
        draw = (rng.random(tokens.shape) < mask_prob) & valid
        for r in range(b):
            if valid[r].any() and not draw[r].any():
                draw[r, max_len - 1] = valid[r, max_len - 1]
        labels[draw] = tokens[draw]
        tokens = np.where(draw, mask_token, tokens)
        yield Batch(tokens, valid, labels)


def encode_eval_batch(examples: list[EvalExample], max_len: int,
                      mask_token: int) -> Batch:
    """Token rows for ranked evaluation: recent prefix + MASK, left-padded."""
    b = len(examples)
    tokens = np.zeros((b, max_len), dtype=np.int64)
    for r, ex in enumerate(examples):
        recent = ex.prefix[-(max_len - 1):]
        if recent:
            tokens[r, max_len - 1 - len(recent): max_len - 1] = recent
        tokens[r, max_len - 1] = mask_token
    return Batch(tokens, tokens != PAD_TOKEN, np.zeros_like(tokens))


# ---------------------------------------------------------------------------
# sequence cache
# ---------------------------------------------------------------------------

def save_sequence_cache(path, sequences: list[ItemSequence], vocab: Vocabulary) -> None:
    """Line-oriented cache ``user<TAB>item1,item2,...`` in raw item ids."""
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            raw = ",".join(str(vocab.decode(t)) for t in seq.items)
            f.write(f"{seq.user}\t{raw}\n")


def load_sequence_cache(path) -> tuple[list[ItemSequence], Vocabulary]:
    """Rebuild sequences and vocabulary from a cache file.

    The vocabulary is re-derived in first-seen order over the cache, so a
    save/load round trip reproduces the original token mapping.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"cannot read sequence cache: {path}")
    raw_rows: list[tuple[int, list[int]]] = []
    first_seen: list[int] = []
    seen: set[int] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                user_s, items_s = line.split("\t")
                raw_items = [int(x) for x in items_s.split(",") if x]
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed cache line")
            raw_rows.append((int(user_s), raw_items))
            for raw in raw_items:
                if raw not in seen:
                    seen.add(raw)
                    first_seen.append(raw)
    if not raw_rows:
        raise DataError(f"{path}: empty sequence cache")
    vocab = Vocabulary(first_seen)
    sequences = [ItemSequence(user, [vocab.encode(r) for r in raw_items])
                 for user, raw_items in raw_rows]
    return sequences, vocab
