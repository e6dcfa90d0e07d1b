"""Interaction logs: loading, filtering, splitting and synthetic corpora."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

CATEGORY_WORDS = (
    "shirt", "coat", "skirt", "sweater", "boots", "scarf",
    "hat", "gloves", "jacket", "dress", "sneakers", "belt",
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class UserSequence:
    user_id: int
    items: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(int(i) for i in self.items))

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class ItemCatalog:
    titles: list[str]

    @property
    def size(self) -> int:
        return len(self.titles)

    def title(self, item_id: int) -> str:
        if not 0 <= item_id < len(self.titles):
            raise DatasetError(f"item {item_id} has no title (catalog size {self.size})")
        return self.titles[item_id]


@dataclass(frozen=True)
class EvalCase:
    user_id: int
    history: tuple[int, ...]
    target: int


@dataclass
class SplitDataset:
    """Training sequences plus (history, target) evaluation cases.

    Under leave-one-out every user contributes ``train = seq[:-2]``, a
    validation case ``(seq[:-2], seq[-2])`` and a test case ``(seq[:-1], seq[-1])``.
    """

    train: dict[int, tuple[int, ...]]
    validation: list[EvalCase]
    test: list[EvalCase]
    n_items: int
    mode: str = "leave_one_out"
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _valid_title(title, max_title: int) -> bool:
    return isinstance(title, str) and 0 < len(title.strip()) and len(title) <= max_title


def _finalize(raw_users: list[tuple[int, list[int]]], raw_titles: dict[int, str],
              min_len: int, max_title: int) -> tuple[list[UserSequence], ItemCatalog]:
    valid_items = sorted(i for i, t in raw_titles.items() if _valid_title(t, max_title))
    valid_set = set(valid_items)
    kept = []
    for uid, items in sorted(raw_users, key=lambda r: r[0]):
        items = [i for i in items if i in valid_set]
        if len(items) >= min_len:
            kept.append((uid, items))
    if not kept:
        raise DatasetError("no users survive filtering")
    remap = {old: new for new, old in enumerate(valid_items)}
    seqs = [UserSequence(u, tuple(remap[i] for i in items)) for u, (_, items) in enumerate(kept)]
    catalog = ItemCatalog([raw_titles[i] for i in valid_items])
    return seqs, catalog


def load_interactions(path, min_len: int = 5, max_title: int = 200) -> tuple[list[UserSequence], ItemCatalog]:
    """Read a JSONL (or CSV) interaction file and apply the preprocessing filters.

    Items with empty or over-long titles are removed together with their
    interactions, then users shorter than ``min_len`` are dropped. Surviving
    users and all validly-titled items are renumbered densely in ascending
    order of their original ids.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path, min_len=min_len, max_title=max_title)
    raw_users: list[tuple[int, list[int]]] = []
    raw_titles: dict[int, str] = {}
    seen_users: set[int] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                uid = int(rec["user"])
                items = [int(i) for i in rec["items"]]
                titles = {int(k): v for k, v in rec.get("titles", {}).items()}
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from None
            if uid in seen_users:
                raise DatasetError(f"{path}:{lineno}: duplicate user {uid}")
            seen_users.add(uid)
            for iid, title in titles.items():
                if iid in raw_titles and raw_titles[iid] != title:
                    raise DatasetError(f"{path}:{lineno}: conflicting title for item {iid}")
                raw_titles[iid] = title
            raw_users.append((uid, items))
    if not raw_users:
        raise DatasetError(f"{path}: no records")
    return _finalize(raw_users, raw_titles, min_len, max_title)


def load_csv(path, min_len: int = 5, max_title: int = 200) -> tuple[list[UserSequence], ItemCatalog]:
    """Ingest ``user,item,timestamp,title`` rows; order within a user is by timestamp."""
    path = Path(path)
    rows: dict[int, list[tuple[float, int, int]]] = {}
    raw_titles: dict[int, str] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"user", "item", "timestamp", "title"}:
            raise DatasetError(f"{path}: expected header user,item,timestamp,title")
        for n, row in enumerate(reader):
            lineno = n + 2
            try:
                uid, iid, ts = int(row["user"]), int(row["item"]), float(row["timestamp"])
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from None
            title = row["title"] or ""
            if iid in raw_titles and raw_titles[iid] != title:
                raise DatasetError(f"{path}:{lineno}: conflicting title for item {iid}")
            raw_titles[iid] = title
            rows.setdefault(uid, []).append((ts, n, iid))
    if not rows:
        raise DatasetError(f"{path}: no records")
    raw_users = [(u, [iid for _, _, iid in sorted(r)]) for u, r in rows.items()]
    return _finalize(raw_users, raw_titles, min_len, max_title)


def save_jsonl(seqs: Iterable[UserSequence], catalog: ItemCatalog, path) -> None:
    """Write one JSON object per user. Titles of items no user references ride on the first line."""
    seqs = list(seqs)
    used = {i for s in seqs for i in s.items}
    orphans = {i: catalog.titles[i] for i in range(catalog.size) if i not in used}
    with Path(path).open("w", encoding="utf-8") as fh:
        for n, s in enumerate(seqs):
            titles = {str(i): catalog.titles[i] for i in sorted(set(s.items))}
            if n == 0:
                titles.update({str(i): t for i, t in orphans.items()})
                titles = dict(sorted(titles.items(), key=lambda kv: int(kv[0])))
            rec = {"user": s.user_id, "items": list(s.items), "titles": titles}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def leave_one_out_split(seqs: Iterable[UserSequence]) -> SplitDataset:
    train, val, test = {}, [], []
    n_items = 0
    for s in seqs:
        if len(s) < 3:
            raise DatasetError(f"user {s.user_id} has {len(s)} items; leave-one-out needs at least 3")
        items = s.items
        train[s.user_id] = items[:-2]
        val.append(EvalCase(s.user_id, items[:-2], items[-2]))
        test.append(EvalCase(s.user_id, items[:-1], items[-1]))
        n_items = max(n_items, max(items) + 1)
    return SplitDataset(train, val, test, n_items)


def ratio_split(seqs: Iterable[UserSequence], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitDataset:
    """User-level split: train users contribute whole sequences, held-out users their last item."""
    seqs = list(seqs)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DatasetError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(seqs))
    n_train = int(round(ratios[0] * len(seqs)))
    n_val = int(round(ratios[1] * len(seqs)))
    groups = order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]
    train = {seqs[i].user_id: seqs[i].items for i in sorted(groups[0])}
    val = [EvalCase(seqs[i].user_id, seqs[i].items[:-1], seqs[i].items[-1]) for i in sorted(groups[1])]
    test = [EvalCase(seqs[i].user_id, seqs[i].items[:-1], seqs[i].items[-1]) for i in sorted(groups[2])]
    n_items = max(max(s.items) for s in seqs) + 1
    return SplitDataset(train, val, test, n_items, mode="ratio")


def expand_subsequences(train_seq, max_seq_len: int | None = None) -> list[tuple[tuple[int, ...], int]]:
    """All (prefix, next item) pairs of a sequence, prefixes keeping the most recent items."""
    seq = tuple(train_seq)
    pairs = []
    for k in range(len(seq) - 1):
        prefix = seq[: k + 1]
        if max_seq_len is not None:
            prefix = prefix[-max_seq_len:]
        pairs.append((prefix, seq[k + 1]))
    return pairs


def truncate(items, max_seq_len: int | None) -> tuple[int, ...]:
    items = tuple(items)
    return items if max_seq_len is None else items[-max_seq_len:]


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

@dataclass
class PatternBook:
    """Item-transition cycles and the context -> next-item map they induce."""

    cycles: list[list[int]]
    order: int
    successor: dict[tuple[int, ...], int]
    anchor: dict[tuple[int, ...], tuple[int, int]]

    def next_item(self, context) -> int | None:
        return self.successor.get(tuple(context[-self.order:]))


def _build_patterns(rng, n_items: int, order: int, cycle_len: int, n_cycles: int) -> PatternBook:
    for _ in range(1000):
        if order == 1:
            perm = rng.permutation(n_items)[: n_cycles * cycle_len]
            cycles = [perm[c * cycle_len:(c + 1) * cycle_len].tolist() for c in range(n_cycles)]
        else:
            cycles = [rng.integers(0, n_items, size=cycle_len).tolist() for _ in range(n_cycles)]
        successor, anchor, ok = {}, {}, True
        for c, cyc in enumerate(cycles):
            for pos in range(cycle_len):
                ctx = tuple(cyc[(pos - order + 1 + j) % cycle_len] for j in range(order))
                nxt_pos = (pos + 1) % cycle_len
                if ctx in successor and successor[ctx] != cyc[nxt_pos]:
                    ok = False
                    break
                successor[ctx] = cyc[nxt_pos]
                anchor[ctx] = (c, nxt_pos)
            if not ok:
                break
        if ok:
            return PatternBook(cycles, order, successor, anchor)
    raise DatasetError("could not build unambiguous transition cycles; try a longer cycle or more items")


def generate_synthetic(
    n_users: int,
    n_items: int,
    pattern_order: int = 1,
    noise_rate: float = 0.1,
    seed: int = 0,
    cycle_len: int = 10,
    n_cycles: int | None = None,
    min_len: int = 8,
    max_len: int = 16,
    return_patterns: bool = False,
):
    """Planted-pattern corpus.

    Each user walks one of a few item cycles; the item after any observed
    context of ``pattern_order`` items is fixed by the cycles. Every step is
    replaced by a uniform random item with probability ``noise_rate``. After a
    noisy step the walk re-anchors on the observed context when that context
    belongs to some cycle and otherwise carries on along its own cycle.
    """
    if pattern_order < 1:
        raise DatasetError("pattern_order must be >= 1")
    if not 0 <= noise_rate < 1:
        raise DatasetError("noise_rate must lie in [0, 1)")
    if n_items < cycle_len:
        raise DatasetError(f"n_items={n_items} is smaller than the cycle length {cycle_len}")
    if not pattern_order < cycle_len:
        raise DatasetError("cycle length must exceed pattern_order")
    if min_len < pattern_order + 1 or max_len < min_len:
        raise DatasetError("need pattern_order < min_len <= max_len")
    if n_cycles is None:
        n_cycles = max(1, n_items // cycle_len)
    if pattern_order == 1 and n_cycles * cycle_len > n_items:
        raise DatasetError("first-order cycles must use distinct items; reduce n_cycles or cycle_len")

    rng = np.random.default_rng(seed)
    book = _build_patterns(rng, n_items, pattern_order, cycle_len, n_cycles)
    words = rng.choice(len(CATEGORY_WORDS), size=n_items)
    catalog = ItemCatalog([f"item-{i} {CATEGORY_WORDS[w]}" for i, w in enumerate(words)])

    seqs = []
    for uid in range(n_users):
        c = int(rng.integers(n_cycles))
        pos = int(rng.integers(cycle_len))
        length = int(rng.integers(min_len, max_len + 1))
        items: list[int] = []
        for _ in range(length):
            # the first pattern_order emissions simply walk the cycle
            if len(items) >= pattern_order:
                hit = book.anchor.get(tuple(items[-pattern_order:]))
                if hit is not None:
                    c, pos = hit
            clean = book.cycles[c][pos]
            if rng.random() < noise_rate:
                items.append(int(rng.integers(n_items)))
            else:
                items.append(clean)
            pos = (pos + 1) % cycle_len
        seqs.append(UserSequence(uid, tuple(items)))
    if return_patterns:
        return seqs, catalog, book
    return seqs, catalog


def length_buckets(examples, batch_size: int, key, rng: np.random.Generator | None = None) -> list[list]:
    """Group examples sharing ``key(example)`` into batches of at most ``batch_size``.

    With ``rng`` the examples and the resulting batch order are shuffled;
    without it the order is deterministic (by key, then input order).
    """
    examples = list(examples)
    order = rng.permutation(len(examples)) if rng is not None else np.arange(len(examples))
    groups: dict = {}
    for i in order:
        groups.setdefault(key(examples[i]), []).append(examples[i])
    batches = []
    for k in sorted(groups):
        g = groups[k]
        batches.extend(g[j:j + batch_size] for j in range(0, len(g), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches
