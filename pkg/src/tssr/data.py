"""Interaction logs, content vectors, leave-one-out splits and padded batches."""
import csv
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

CVEC_MAGIC = b"CVEC"


class DataError(ValueError):
    pass


@dataclass
class InteractionSequence:
    user_id: str
    items: list

    def __post_init__(self):
        if len(self.items) == 0:
            raise DataError(f"user {self.user_id!r} has an empty sequence")


@dataclass
class ContentTable:
    """Content vectors indexed by item index; the last row is the PAD row (zeros)."""
    dim_raw: int
    vectors: np.ndarray

    @property
    def n_items(self):
        return self.vectors.shape[0] - 1


@dataclass
class SequenceBatch:
    id_seq: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    user_ids: list = field(default_factory=list)

    def __len__(self):
        return self.id_seq.shape[0]


@dataclass
class DatasetSplit:
    """Each entry holds a full item list whose last element is the held-out target."""
    train: list
    validation: list
    test: list
    n_items: int
    n_too_short: int = 0


# loading ---------------------------------------------------------------------------

def load_interactions(path, fmt="csv", header=False):
    """Read ``user_id,item_id,timestamp`` rows.

    Returns ``(sequences, vocab)`` where ``vocab`` maps raw item ids to dense
    indices in order of first appearance. Rows of a user are sorted by
    timestamp; ties keep file order.
    """
    delimiter = "\t" if fmt == "tsv" else ","
    per_user = {}
    vocab = {}
    n_rows = 0
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"row {lineno}: expected 3 columns (user_id,item_id,timestamp), got {len(row)}")
            user, item, ts = (c.strip() for c in row)
            try:
                ts = float(ts)
            except ValueError:
                raise DataError(f"row {lineno}: timestamp {ts!r} is not a number") from None
            if not user or not item:
                raise DataError(f"row {lineno}: empty user or item id")
            if item not in vocab:
                vocab[item] = len(vocab)
            per_user.setdefault(user, []).append((ts, n_rows, vocab[item]))
            n_rows += 1
    if n_rows == 0:
        raise DataError(f"{path}: no interactions")
    seqs = [InteractionSequence(u, [i for _, _, i in sorted(rows)]) for u, rows in per_user.items()]
    return seqs, vocab


def filter_min_count(seqs, vocab, min_user=5, min_item=5):
    """Drop rare users and items repeatedly until nothing changes, then re-index."""
    if min_user < 1 or min_item < 1:
        raise ValueError("min counts must be >= 1")
    current = [list(s.items) for s in seqs]
    users = [s.user_id for s in seqs]
    while True:
        counts = np.bincount(np.concatenate([np.asarray(s, dtype=np.int64) for s in current]),
                             minlength=len(vocab)) if current else np.zeros(len(vocab), int)
        rare = counts < min_item
        nxt, nxt_users = [], []
        for u, s in zip(users, current):
            kept = [i for i in s if not rare[i]]
            if len(kept) >= min_user:
                nxt.append(kept)
                nxt_users.append(u)
        changed = len(nxt) != len(current) or any(len(a) != len(b) for a, b in zip(nxt, current))
        current, users = nxt, nxt_users
        if not current:
            raise DataError("min-count filtering removed every interaction")
        if not changed:
            break

    used = sorted({i for s in current for i in s})
    remap = {old: new for new, old in enumerate(used)}
    inv = {idx: raw for raw, idx in vocab.items()}
    new_vocab = {inv[old]: remap[old] for old in used}
    out = [InteractionSequence(u, [remap[i] for i in s]) for u, s in zip(users, current)]
    return out, new_vocab


def leave_one_out_split(seqs, n_items=None):
    """Last item -> test, second-to-last -> validation, the prefix -> train.

    Sequences with fewer than three items are kept for training only.
    """
    if n_items is None:
        n_items = 1 + max(i for s in seqs for i in s.items)
    train, val, test = [], [], []
    short = 0
    for s in seqs:
        items = list(s.items)
        if len(items) < 3:
            short += 1
            if len(items) >= 2:
                train.append(InteractionSequence(s.user_id, items))
            continue
        train.append(InteractionSequence(s.user_id, items[:-1]))
        val.append(InteractionSequence(s.user_id, items[:-1]))
        test.append(InteractionSequence(s.user_id, items))
    if short:
        logger.info("%d sequences shorter than 3 kept as train-only", short)
    return DatasetSplit(train, val, test, n_items, short)


def subsample_train(split, fraction, seed):
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return split
    n = len(split.train)
    k = int(round(fraction * n))
    keep = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return DatasetSplit([split.train[i] for i in keep], split.validation, split.test,
                        split.n_items, split.n_too_short)


def build_batch(seqs, max_len, pad):
    """Left-pad sequences into fixed-width arrays.

    Each input sequence is a full item list; its last item is the next-item
    target of the final input position. Only the most recent ``max_len``
    inputs are kept. Masked positions hold ``pad`` in both ``id_seq`` and
    ``target``.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    n = len(seqs)
    id_seq = np.full((n, max_len), pad, dtype=np.int64)
    target = np.full((n, max_len), pad, dtype=np.int64)
    user_ids = []
    for r, s in enumerate(seqs):
        if isinstance(s, InteractionSequence):
            user_ids.append(s.user_id)
            s = s.items
        else:
            user_ids.append(str(r))
        s = np.asarray(s, dtype=np.int64)
        if s.size < 2:
            raise DataError("a batch sequence needs at least one input and one target")
        inp, nxt = s[:-1][-max_len:], s[1:][-max_len:]
        id_seq[r, max_len - inp.size:] = inp
        target[r, max_len - nxt.size:] = nxt
    return SequenceBatch(id_seq, target, id_seq != pad, user_ids)


# content vectors ------------------------------------------------------------------------

def _read_content_records(path):
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == CVEC_MAGIC:
            count, dim = struct.unpack("<II", fh.read(8))
            for _ in range(count):
                (n,) = struct.unpack("<I", fh.read(4))
                item = fh.read(n).decode("utf-8")
                vec = np.frombuffer(fh.read(4 * dim), dtype="<f4")
                if vec.size != dim:
                    raise DataError(f"{path}: truncated record for item {item!r}")
                yield item, vec.astype(np.float64)
            return
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            item, _, rest = line.partition("\t")
            try:
                vec = np.array(rest.split(), dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}: row {lineno}: non-numeric content vector") from None
            yield item.strip(), vec


def load_content_table(path, vocab):
    """Load content vectors for every item in ``vocab``; PAD row appended as zeros."""
    found = {}
    dim = None
    for item, vec in _read_content_records(path):
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise DataError(f"{path}: item {item!r} has width {vec.size}, expected {dim}")
        if item in vocab:
            found[vocab[item]] = vec
    if dim is None or dim == 0:
        raise DataError(f"{path}: no content vectors")
    missing = [raw for raw, idx in vocab.items() if idx not in found]
    if missing:
        raise DataError(f"content vectors missing for {len(missing)} items, e.g. {missing[:10]}")
    vectors = np.zeros((len(vocab) + 1, dim))
    for idx, vec in found.items():
        vectors[idx] = vec
    return ContentTable(dim, vectors)


def write_content_tsv(path, item_ids, vectors):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item, vec in zip(item_ids, vectors):
            fh.write(item + "\t" + " ".join(repr(float(v)) for v in vec) + "\n")


def write_content_binary(path, item_ids, vectors):
    vectors = np.asarray(vectors, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CVEC_MAGIC)
        fh.write(struct.pack("<II", len(item_ids), vectors.shape[1]))
        for item, vec in zip(item_ids, vectors):
            raw = item.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(vec.tobytes())


def load_dataset(interactions, content=None, fmt="csv", header=False, min_user=5, min_item=5):
    """Load, filter and split; returns ``(split, vocab, content_table_or_None)``."""
    seqs, vocab = load_interactions(interactions, fmt=fmt, header=header)
    seqs, vocab = filter_min_count(seqs, vocab, min_user, min_item)
    split = leave_one_out_split(seqs, n_items=len(vocab))
    table = load_content_table(content, vocab) if content is not None else None
    return split, vocab, table
