"""
Byte-level corpus handling and synthetic tasks.

Tokens are raw bytes (vocabulary 256); byte 0x00 doubles as the EOS id.
Documents are concatenated with EOS separators and cut into fixed-length
blocks; the trailing partial block is dropped.
"""

import bisect
import itertools
import queue
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ArgumentError, ConfigError, DataError
from core.quantgeom import SeededStream
from core.utils import get_logger

logger = get_logger("PMP.data")

VOCAB_SIZE = 256
EOS_ID = 0
DEFAULT_BLOCK_LEN = 256
DEFAULT_SHUFFLE_BUFFER = 1024

LOWER = b"abcdefghijklmnopqrstuvwxyz "
UPPER = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ"
KEYWORD = b"KEY"
COPY_SEP = ord("|")

_BLANK_LINE = re.compile(rb"\r?\n[ \t]*\r?\n")


def _rng(seed: int, index: int) -> np.random.Generator:
    return SeededStream(seed).split(index).take(1)


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

def split_documents(raw: bytes) -> List[bytes]:
    return [d.strip(b"\r\n") for d in _BLANK_LINE.split(raw) if d.strip()]


def read_corpus(path: Union[str, Path]) -> List[bytes]:
    """Documents from a directory of text files (sorted by name) or a single file."""
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.is_file())
    elif p.is_file():
        files = [p]
    else:
        raise DataError(f"corpus path not found: {p}")
    docs: List[bytes] = []
    for f in files:
        try:
            docs.extend(split_documents(f.read_bytes()))
        except OSError as e:
            raise DataError(f"cannot read corpus file {f}: {e}") from e
    logger.info(f"CORPUS_READ: {len(docs)} documents from {len(files)} file(s) at {p}")
    if not docs:
        raise DataError(f"corpus at {p} contains no documents")
    return docs


def encode(text: bytes) -> np.ndarray:
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def decode(tokens) -> bytes:
    return bytes(np.asarray(tokens, dtype=np.uint8).tolist())


def pack_corpus(documents: Iterable[bytes], block_len: int = DEFAULT_BLOCK_LEN, eos_id: int = EOS_ID,
                vocab_size: int = VOCAB_SIZE) -> Iterator[np.ndarray]:
    """
    Stream of (block_len,) int64 blocks: every document followed by eos_id,
    concatenated and cut. Documents are never truncated before concatenation.
    """
    if block_len < 2:
        raise ArgumentError(f"block_len must be >= 2, got {block_len}")
    if not (0 <= eos_id < vocab_size):
        raise ArgumentError(f"eos_id {eos_id} outside vocabulary [0, {vocab_size})")
    docs = iter(documents)
    try:
        first = next(docs)
    except StopIteration:
        raise DataError("empty corpus: no documents to pack") from None

    def gen():
        pending = bytearray()
        for doc in _chain_first(first, docs):
            pending += doc
            pending.append(eos_id)
            while len(pending) >= block_len:
                yield encode(pending[:block_len])
                del pending[:block_len]
    return gen()


def _chain_first(first, rest):
    yield first
    yield from rest


def shuffle_blocks(blocks: Iterable[np.ndarray], buffer_size: int, seed: int) -> Iterator[np.ndarray]:
    """
    Buffered online shuffle: once the buffer is full, each incoming block
    replaces a uniformly chosen resident, which is emitted. The remainder is
    drained in a seeded random order. buffer_size <= 1 disables shuffling.
    """
    if buffer_size <= 1:
        yield from blocks
        return
    rng = _rng(seed, 0x5F)
    buf: List[np.ndarray] = []
    for block in blocks:
        if len(buf) < buffer_size:
            buf.append(block)
            continue
        j = int(rng.integers(buffer_size))
        out, buf[j] = buf[j], block
        yield out
    for j in rng.permutation(len(buf)):
        yield buf[j]


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

LM_KINDS = ("markov-lm", "copy-lm")
CLS_KINDS = ("parity-cls", "keyword-cls")

# The chain itself never changes; task seeds only drive sampling.
_MARKOV_TABLE_SEED = 0x4D41524B


def _markov_table() -> List[List[List[float]]]:
    rng = _rng(_MARKOV_TABLE_SEED, 0)
    n = len(LOWER)
    probs = rng.dirichlet(np.full(n, 0.1), size=(n, n))
    return np.cumsum(probs, axis=-1).tolist()


_MARKOV_CDF = None


def _markov_cdf():
    global _MARKOV_CDF
    if _MARKOV_CDF is None:
        _MARKOV_CDF = _markov_table()
    return _MARKOV_CDF


def markov_document(rng: np.random.Generator, length: int) -> bytes:
    """Text from the fixed order-2 Markov chain over lowercase letters and space."""
    cdf = _markov_cdf()
    n = len(LOWER)
    a, b = (int(x) for x in rng.integers(n, size=2))
    out = [a, b]
    for u in rng.random(max(length - 2, 0)).tolist():
        row = cdf[a][b]
        c = min(bisect.bisect_right(row, u * row[-1]), n - 1)
        out.append(c)
        a, b = b, c
    return bytes(LOWER[i] for i in out[:length])


def copy_document(rng: np.random.Generator, length: int) -> bytes:
    """A random lowercase segment, a separator, then the same segment again."""
    half = max((length - 1) // 2, 1)
    seg = bytes(LOWER[i] for i in rng.integers(len(LOWER) - 1, size=half))
    return seg + bytes([COPY_SEP]) + seg


def parity_label(tokens) -> int:
    """Parity of the number of marked (uppercase) bytes."""
    t = np.asarray(tokens)
    return int(np.count_nonzero((t >= UPPER[0]) & (t <= UPPER[-1])) % 2)


def keyword_label(tokens) -> int:
    return int(KEYWORD in decode(tokens))


def _filler(rng: np.random.Generator, length: int) -> np.ndarray:
    return np.frombuffer(LOWER, dtype=np.uint8)[rng.integers(len(LOWER), size=length)].astype(np.int64)


def parity_example(rng: np.random.Generator, length: int, max_marked: int = 8) -> Tuple[np.ndarray, int]:
    tokens = _filler(rng, length)
    n_marked = int(rng.integers(0, min(max_marked, length) + 1))
    if n_marked:
        pos = rng.choice(length, size=n_marked, replace=False)
        tokens[pos] = np.frombuffer(UPPER, dtype=np.uint8)[rng.integers(len(UPPER), size=n_marked)]
    return tokens, parity_label(tokens)


def keyword_example(rng: np.random.Generator, length: int) -> Tuple[np.ndarray, int]:
    tokens = _filler(rng, length)
    label = int(rng.integers(2))
    if label:
        at = int(rng.integers(0, length - len(KEYWORD) + 1))
        tokens[at:at + len(KEYWORD)] = encode(KEYWORD)
    return tokens, label


@dataclass
class SyntheticTask:
    kind: str
    seed: int = 0
    n_train: int = 512
    n_eval: int = 256
    length: int = 64

    def validate(self) -> "SyntheticTask":
        if self.kind not in LM_KINDS + CLS_KINDS:
            raise ConfigError(f"unknown synthetic task kind {self.kind!r}; expected one of {LM_KINDS + CLS_KINDS}")
        if self.n_train < 1 or self.n_eval < 0:
            raise ConfigError(f"task sizes must be n_train >= 1 and n_eval >= 0, got {self.n_train}/{self.n_eval}")
        if self.length < len(KEYWORD) + 1:
            raise ConfigError(f"example length must be >= {len(KEYWORD) + 1}, got {self.length}")
        return self

    @property
    def is_classification(self) -> bool:
        return self.kind in CLS_KINDS


@dataclass
class Example:
    tokens: np.ndarray
    label: Optional[int] = None


@dataclass
class SyntheticData:
    task: SyntheticTask
    train: List[Example] = field(default_factory=list)
    eval: List[Example] = field(default_factory=list)

    def arrays(self, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
        """(n, length) tokens and (n,) labels for a classification split."""
        if not self.task.is_classification:
            raise DataError(f"{self.task.kind} has no labels")
        examples = self.train if split == "train" else self.eval
        if not examples:
            return np.zeros((0, self.task.length), dtype=np.int64), np.zeros(0, dtype=np.int64)
        return (np.stack([e.tokens for e in examples]),
                np.array([e.label for e in examples], dtype=np.int64))

    def documents(self, split: str = "train") -> List[bytes]:
        examples = self.train if split == "train" else self.eval
        return [decode(e.tokens) for e in examples]


def _example(kind: str, rng: np.random.Generator, length: int) -> Example:
    if kind == "markov-lm":
        return Example(encode(markov_document(rng, length)))
    if kind == "copy-lm":
        return Example(encode(copy_document(rng, length)))
    if kind == "parity-cls":
        return Example(*parity_example(rng, length))
    return Example(*keyword_example(rng, length))


def iter_synthetic(task: SyntheticTask, split_index: int = 0) -> Iterator[Example]:
    """Unbounded deterministic example stream for one split of a task."""
    task.validate()
    rng = _rng(task.seed, split_index)
    while True:
        yield _example(task.kind, rng, task.length)


def gen_synthetic(task: SyntheticTask) -> SyntheticData:
    task.validate()
    train_it, eval_it = iter_synthetic(task, 0), iter_synthetic(task, 1)
    data = SyntheticData(
        task,
        [next(train_it) for _ in range(task.n_train)],
        [next(eval_it) for _ in range(task.n_eval)],
    )
    logger.debug(f"SYNTHETIC_TASK: kind={task.kind} seed={task.seed} train={task.n_train} eval={task.n_eval}")
    return data


# ---------------------------------------------------------------------------
# Block streams
# ---------------------------------------------------------------------------

DocumentFactory = Callable[[], Iterable[bytes]]

_END = object()


class BlockSource:
    """
    Restartable stream of packed blocks. Every call to blocks() starts over
    from the first document, so the same (documents, seed, buffer) always
    yields the same order. With prefetch > 0 a background thread fills a
    bounded queue; the consumer sees the identical order.
    """

    def __init__(self, documents: Union[Sequence[bytes], DocumentFactory], block_len: int = DEFAULT_BLOCK_LEN,
                 eos_id: int = EOS_ID, shuffle_buffer: int = 0, seed: int = 0, prefetch: int = 0):
        if callable(documents):
            self._factory: DocumentFactory = documents
        else:
            docs = list(documents)
            self._factory = lambda: iter(docs)
        self.block_len = block_len
        self.eos_id = eos_id
        self.shuffle_buffer = shuffle_buffer
        self.seed = seed
        self.prefetch = prefetch

    @classmethod
    def from_task(cls, task: SyntheticTask, block_len: int = DEFAULT_BLOCK_LEN, split_index: int = 0,
                  **kwargs) -> "BlockSource":
        """Unbounded source of packed documents from a language-model task."""
        if task.kind not in LM_KINDS:
            raise ConfigError(f"{task.kind} is not a language-model task")
        return cls(lambda: (decode(e.tokens) for e in iter_synthetic(task, split_index)), block_len, **kwargs)

    def _sync_blocks(self) -> Iterator[np.ndarray]:
        packed = pack_corpus(self._factory(), self.block_len, self.eos_id)
        return shuffle_blocks(packed, self.shuffle_buffer, self.seed)

    def blocks(self) -> Iterator[np.ndarray]:
        if self.prefetch <= 0:
            return self._sync_blocks()
        return self._prefetched()

    def _prefetched(self) -> Iterator[np.ndarray]:
        q: "queue.Queue" = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()
        source = self._sync_blocks()

        def produce():
            try:
                for block in source:
                    while not stop.is_set():
                        try:
                            q.put(block, timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    if stop.is_set():
                        return
                item = _END
            except Exception as e:
                item = e
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    return
                except queue.Full:
                    continue

        worker = threading.Thread(target=produce, name="pmp-prefetch", daemon=True)
        worker.start()
        try:
            while True:
                item = q.get()
                if item is _END:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()

    def batches(self, micro_batch: int) -> Iterator[np.ndarray]:
        """(micro_batch, block_len) arrays; a trailing partial batch is dropped."""
        if micro_batch < 1:
            raise ArgumentError(f"micro_batch must be >= 1, got {micro_batch}")
        batch: List[np.ndarray] = []
        for block in self.blocks():
            batch.append(block)
            if len(batch) == micro_batch:
                yield np.stack(batch)
                batch = []

    def take(self, n: int) -> List[np.ndarray]:
        it = self.blocks()
        try:
            return list(itertools.islice(it, n))
        finally:
            it.close()


def holdout_split(documents: Sequence[bytes], fraction: float = 0.05) -> Tuple[List[bytes], List[bytes]]:
    """Last ceil(fraction * n) documents held out for evaluation (at least one, never all)."""
    docs = list(documents)
    if len(docs) < 2:
        raise DataError(f"need at least 2 documents to hold out an evaluation split, got {len(docs)}")
    n_eval = min(max(int(np.ceil(fraction * len(docs))), 1), len(docs) - 1)
    return docs[:-n_eval], docs[-n_eval:]
