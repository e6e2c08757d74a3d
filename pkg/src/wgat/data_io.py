"""Dataset parsing, preprocessing and the on-disk cache.

A cache directory holds three files:

    manifest.txt   key=value lines: counts, k, ratio, seed, threshold,
                   sha256 of each binary file, JSON token maps
    train.bin      little-endian int32 (user, item) pairs
    test.bin       same layout

All writes go through a temp file and a rename.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write
from .graph import InteractionSet, k_core_filter, split_interactions
from .uncertainty import CategoryTable

log = logging.getLogger(__name__)

MAX_MALFORMED = 0.01
CACHE_VERSION = 1
PAIR_DTYPE = np.dtype("<i4")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RawInteraction:
    user: str
    item: str
    rating: float = 1.0
    timestamp: int = 0

    def __post_init__(self):
        if not self.user or not self.item:
            raise ValueError("user and item tokens must be nonempty")


def _check_malformed(path, bad: int, total: int) -> None:
    if bad:
        log.warning("%s: skipped %d malformed line(s) of %d", path, bad, total)
    if total and bad / total > MAX_MALFORMED:
        raise DataError(f"{path}: {bad} of {total} lines malformed "
                        f"(limit {MAX_MALFORMED:.0%}); wrong format or delimiter?")


def _record(user, item, rating=None, timestamp=None) -> RawInteraction | None:
    user, item = user.strip(), item.strip()
    if not user or not item:
        return None
    try:
        r = 1.0 if rating is None else float(rating)
        t = 0 if timestamp is None else int(float(timestamp))
    except ValueError:
        return None
    return RawInteraction(user, item, r, t)


def parse_movielens(path) -> list[RawInteraction]:
    """Read ``user::item::rating::timestamp`` lines."""
    out, bad, total = [], 0, 0
    with open(path, encoding="latin-1") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            total += 1
            fields = line.split("::")
            rec = _record(*fields) if len(fields) == 4 else None
            if rec is None:
                bad += 1
            else:
                out.append(rec)
    if total == 0:
        log.warning("%s: no interactions found", path)
    _check_malformed(path, bad, total)
    return out


COLUMN_NAMES = ("user", "item", "rating", "timestamp")
_ALIASES = {
    "user": ("user", "user_id", "userid", "uid"),
    "item": ("item", "item_id", "itemid", "iid", "movie", "movie_id", "news", "news_id"),
    "rating": ("rating", "score", "label"),
    "timestamp": ("timestamp", "time", "ts"),
}


def _header_map(fields) -> dict | None:
    names = [f.strip().lower() for f in fields]
    found = {}
    for key, aliases in _ALIASES.items():
        for pos, name in enumerate(names):
            if name in aliases:
                found[key] = pos
                break
    return found if "user" in found and "item" in found else None


def parse_delimited(path, delimiter: str = "\t", column_map=None) -> list[RawInteraction]:
    """Read a delimited interaction export.

    ``column_map`` is either a dict from user/item/rating/timestamp to column
    positions or a tuple of positions in that order. Without one, the first
    line must be a header naming at least the user and item columns.
    Missing rating and timestamp columns default to 1.0 and 0.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip()]
    if not lines:
        log.warning("%s: no interactions found", path)
        return []
    header = _header_map(lines[0].split(delimiter))
    if column_map is None:
        if header is None:
            if len(lines[0].split(delimiter)) < 2:
                # a wrong delimiter leaves one column per row
                _check_malformed(path, len(lines), len(lines))
            raise DataError(f"{path}: no header with user/item columns; pass a column map")
        column_map = header
    elif not isinstance(column_map, dict):
        column_map = dict(zip(COLUMN_NAMES, column_map))
    if "user" not in column_map or "item" not in column_map:
        raise DataError("column map needs at least user and item positions")
    body = lines[1:] if header is not None else lines
    width = max(column_map.values()) + 1

    out, bad = [], 0
    for line in body:
        fields = line.split(delimiter)
        rec = None
        if len(fields) >= width:
            rec = _record(*(fields[column_map[k]] if k in column_map else None
                            for k in COLUMN_NAMES))
        if rec is None:
            bad += 1
        else:
            out.append(rec)
    _check_malformed(path, bad, len(body))
    return out


def parse_categories(path, item_ids: dict | None = None) -> CategoryTable:
    """Read ``item::title::Label1|Label2`` lines into a CategoryTable.

    With ``item_ids`` (token -> dense id) the table is keyed by dense id and
    items absent from the map are dropped and counted; otherwise keys are the
    raw tokens.
    """
    table = CategoryTable()
    dropped = bad = 0
    with open(path, encoding="latin-1") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            fields = line.split("::")
            if len(fields) < 3 or not fields[0].strip():
                bad += 1
                continue
            token = fields[0].strip()
            labels = frozenset(x.strip() for x in fields[-1].split("|") if x.strip())
            if not labels:
                continue
            if item_ids is None:
                table[token] = labels
            elif token in item_ids:
                table[item_ids[token]] = labels
            else:
                dropped += 1
    if bad:
        log.warning("%s: skipped %d malformed category line(s)", path, bad)
    if dropped:
        log.info("%s: dropped %d labeled item(s) with no surviving interactions", path, dropped)
    return table


# --------------------------------------------------------------------------
# preprocessing


def _token_key(token: str):
    # numeric tokens in numeric order, then everything else lexicographically
    return (0, int(token), "") if token.isdigit() else (1, 0, token)


@dataclass
class DatasetBundle:
    train: InteractionSet
    test: InteractionSet
    user_tokens: list
    item_tokens: list
    k_core: int
    ratio: float
    seed: int
    threshold: float = 1.0
    trace: list = field(default_factory=list, repr=False)

    @property
    def num_users(self) -> int:
        return len(self.user_tokens)

    @property
    def num_items(self) -> int:
        return len(self.item_tokens)

    def item_ids(self) -> dict:
        return {t: i for i, t in enumerate(self.item_tokens)}

    def user_ids(self) -> dict:
        return {t: u for u, t in enumerate(self.user_tokens)}

    def train_counts(self) -> np.ndarray:
        return np.bincount(self.train.users, minlength=self.num_users)


def _index(tokens):
    uniq = sorted(set(tokens), key=_token_key)
    lookup = {t: i for i, t in enumerate(uniq)}
    return uniq, np.fromiter((lookup[t] for t in tokens), dtype=np.int64, count=len(tokens))


def preprocess(raw, k_core: int = 5, ratio: float = 0.8, seed: int = 0,
               threshold: float = 1.0) -> DatasetBundle:
    """Binarise, k-core filter, re-index densely and split into train/test."""
    kept = [r for r in raw if r.rating >= threshold]
    log.info("binarised: %d of %d events have rating >= %g", len(kept), len(raw), threshold)
    if not kept:
        raise DataError("no interactions left after binarisation")
    user_tokens, users = _index([r.user for r in kept])
    item_tokens, items = _index([r.item for r in kept])
    stamps = np.array([r.timestamp for r in kept], dtype=np.int64)

    # keep one event per (user, item): the earliest
    order = np.lexsort((stamps, items, users))
    users, items, stamps = users[order], items[order], stamps[order]
    first = np.ones(len(users), dtype=bool)
    first[1:] = (users[1:] != users[:-1]) | (items[1:] != items[:-1])
    events = InteractionSet(users[first], items[first], stamps[first])

    trace = []
    core = k_core_filter(events, k_core, trace)
    if len(core) == 0:
        raise DataError(f"no interactions survive the {k_core}-core filter; "
                        f"surviving counts per iteration: {trace}")
    # dense re-index of the survivors, preserving token order
    live_u = np.unique(core.users)
    live_i = np.unique(core.items)
    core = InteractionSet(np.searchsorted(live_u, core.users),
                          np.searchsorted(live_i, core.items), core.timestamps)
    train, test = split_interactions(core, ratio, seed)
    return DatasetBundle(train, test, [user_tokens[u] for u in live_u],
                         [item_tokens[i] for i in live_i], k_core, ratio, seed,
                         threshold, trace)


# --------------------------------------------------------------------------
# cache


def _pairs_bytes(s: InteractionSet) -> bytes:
    pairs = np.empty((len(s), 2), dtype=PAIR_DTYPE)
    pairs[:, 0] = s.users
    pairs[:, 1] = s.items
    return pairs.tobytes()


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_cache(bundle: DatasetBundle, directory) -> str:
    """Write the bundle; returns the checksum of the manifest."""
    os.makedirs(directory, exist_ok=True)
    train = _pairs_bytes(bundle.train)
    test = _pairs_bytes(bundle.test)
    fields = {
        "version": CACHE_VERSION,
        "num_users": bundle.num_users,
        "num_items": bundle.num_items,
        "num_train": len(bundle.train),
        "num_test": len(bundle.test),
        "k_core": bundle.k_core,
        "ratio": repr(float(bundle.ratio)),
        "seed": bundle.seed,
        "threshold": repr(float(bundle.threshold)),
        "train_sha256": sha256(train),
        "test_sha256": sha256(test),
        "user_tokens": json.dumps(bundle.user_tokens, ensure_ascii=True),
        "item_tokens": json.dumps(bundle.item_tokens, ensure_ascii=True),
    }
    manifest = "".join(f"{k}={v}\n" for k, v in fields.items()).encode()
    atomic_write(os.path.join(directory, "train.bin"), train)
    atomic_write(os.path.join(directory, "test.bin"), test)
    atomic_write(os.path.join(directory, "manifest.txt"), manifest)
    return sha256(manifest)


def read_manifest(directory) -> dict:
    path = os.path.join(directory, "manifest.txt")
    out = {}
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, _, value = line.partition("=")
                out[key] = value
    return out


def manifest_checksum(directory) -> str:
    with open(os.path.join(directory, "manifest.txt"), "rb") as fh:
        return sha256(fh.read())


def _read_pairs(path, expected_sha: str, expected_count: int) -> InteractionSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if sha256(data) != expected_sha:
        raise DataError(f"{path}: checksum mismatch; the cache is corrupt or stale")
    pairs = np.frombuffer(data, dtype=PAIR_DTYPE).reshape(-1, 2)
    if len(pairs) != expected_count:
        raise DataError(f"{path}: expected {expected_count} pairs, found {len(pairs)}")
    return InteractionSet(pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64))


def read_cache(directory) -> DatasetBundle:
    m = read_manifest(directory)
    if int(m.get("version", -1)) != CACHE_VERSION:
        raise DataError(f"{directory}: unsupported cache version {m.get('version')}")
    train = _read_pairs(os.path.join(directory, "train.bin"), m["train_sha256"],
                        int(m["num_train"]))
    test = _read_pairs(os.path.join(directory, "test.bin"), m["test_sha256"],
                       int(m["num_test"]))
    train.role, test.role = "train", "test"
    bundle = DatasetBundle(train, test, json.loads(m["user_tokens"]),
                           json.loads(m["item_tokens"]), int(m["k_core"]),
                           float(m["ratio"]), int(m["seed"]), float(m["threshold"]))
    if bundle.num_users != int(m["num_users"]) or bundle.num_items != int(m["num_items"]):
        raise DataError(f"{directory}: token maps disagree with the stored counts")
    return bundle
