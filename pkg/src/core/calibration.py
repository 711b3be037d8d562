"""Synthetic corpora, byte-level tokenization and calibration-set sampling."""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ArgumentError, InputError

logger = logging.getLogger(__name__)

BYTE_VOCAB = 256
MARKOV_ORDER = 2
MARKOV_DOC_LENGTH = (96, 224)
CORPUS_KINDS = ("markov", "template")
SOURCE_TAGS = ("general", "task_a", "task_b")

SEED_TEXT = (
    "The river town wakes early. Before the market opens the bakers light their ovens "
    "and the fishing boats come back with the night catch. Traders set out baskets of "
    "apples, onions and bread, and the first buyers walk slowly between the stalls. "
    "By the middle of the morning the square is full of voices. A guide leads a line "
    "of children past the fountain, a cart of timber rolls down from the hills, and the "
    "old clock on the hall strikes ten. In the afternoon the wind turns and clouds move "
    "in from the sea. The traders pack their goods, the boats are tied at the quay, and "
    "the streets grow quiet again. Some evenings there is music by the water; people "
    "sit on the steps, talk about the price of grain and the weather for the harvest, "
    "and walk home when the lamps are lit. In winter the river freezes near the banks "
    "and the town keeps to itself, but every spring the roads open, new faces arrive "
    "with the carts, and the market grows a little larger than the year before. The "
    "miller says the water is higher this year, the weaver says the wool is finer, and "
    "the innkeeper says that every traveller brings a story worth a second cup of tea."
)

TEMPLATE_WORDS = (
    "river",
    "market",
    "timber",
    "harvest",
    "lantern",
    "weaver",
    "quay",
    "grain",
    "fountain",
    "winter",
)


def encode(text: Union[str, bytes]) -> List[int]:
    """Byte-level token ids."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def decode(tokens: Sequence[int]) -> bytes:
    """Bytes back to text; invalid UTF-8 is replaced."""
    invalid = [t for t in tokens if not 0 <= int(t) < BYTE_VOCAB]
    if invalid:
        raise InputError(f"token ids {invalid[:5]} outside the byte vocabulary")
    return bytes(int(t) for t in tokens)


@dataclass
class Corpus:
    documents: List[bytes] = field(default_factory=list)
    source_tag: str = "general"

    def __post_init__(self):
        if any(len(doc) == 0 for doc in self.documents):
            raise InputError("corpus documents must be nonempty")

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def fingerprint(self) -> str:
        """SHA-256 over the documents in order."""
        digest = hashlib.sha256()
        for doc in self.documents:
            digest.update(len(doc).to_bytes(8, "little"))
            digest.update(doc)
        return digest.hexdigest()


def corpus_sequences(corpus: Any) -> List[List[int]]:
    """Token sequences of a Corpus, or a list of sequences passed through."""
    if isinstance(corpus, Corpus):
        return [encode(doc) for doc in corpus.documents]
    return [list(map(int, seq)) for seq in getattr(corpus, "sequences", corpus)]


def _markov_table(text: bytes) -> Dict[bytes, List[int]]:
    table: Dict[bytes, List[int]] = {}
    for i in range(len(text) - MARKOV_ORDER):
        table.setdefault(text[i:i + MARKOV_ORDER], []).append(text[i + MARKOV_ORDER])
    return table


def _markov_document(
    table: Mapping[bytes, List[int]], starts: Sequence[bytes], rng: np.random.Generator
) -> bytes:
    length = int(rng.integers(MARKOV_DOC_LENGTH[0], MARKOV_DOC_LENGTH[1] + 1))
    out = bytearray(starts[int(rng.integers(len(starts)))])
    while len(out) < length:
        successors = table.get(bytes(out[-MARKOV_ORDER:]))
        if not successors:
            out.extend(b" ")
            out.extend(starts[int(rng.integers(len(starts)))])
            continue
        out.append(successors[int(rng.integers(len(successors)))])
    return bytes(out[:length]).strip() or b"."


def _template_document(rng: np.random.Generator) -> bytes:
    a = int(rng.integers(0, 100))
    b = int(rng.integers(0, 100))
    word = TEMPLATE_WORDS[int(rng.integers(len(TEMPLATE_WORDS)))]
    form = int(rng.integers(4))
    if form == 0:
        line = f"Q: What is {a} plus {b}? A: {a + b}."
    elif form == 1:
        line = f"Q: Which is larger, {a} or {b}? A: {max(a, b)}."
    elif form == 2:
        line = f"Q: Spell {word} backwards. A: {word[::-1]}."
    else:
        line = f"Q: How many letters are in {word}? A: {len(word)}."
    return line.encode("ascii")


def generate_corpus(
    kind: str, seed: int, size: int, source_tag: Optional[str] = None
) -> Corpus:
    """Deterministic synthetic corpus of ``size`` documents.

    ``markov`` samples an order-2 byte chain fitted on a bundled paragraph
    of plain English; ``template`` emits short question/answer lines.
    """
    if kind not in CORPUS_KINDS:
        raise ArgumentError(f"unknown corpus kind {kind!r}; expected one of {CORPUS_KINDS}")
    if size <= 0:
        raise ArgumentError(f"corpus size must be positive (got {size})")
    rng = np.random.default_rng(seed)
    if kind == "markov":
        text = SEED_TEXT.encode("ascii")
        table = _markov_table(text)
        starts = sorted(
            {text[i + 2:i + 2 + MARKOV_ORDER] for i in range(len(text) - 3) if text[i] == ord(".")}
        )
        documents = [_markov_document(table, starts, rng) for _ in range(size)]
        tag = source_tag or "general"
    else:
        documents = [_template_document(rng) for _ in range(size)]
        tag = source_tag or "task_a"
    if tag not in SOURCE_TAGS:
        raise ArgumentError(f"unknown source tag {tag!r}; expected one of {SOURCE_TAGS}")
    logger.debug("generated %s corpus: %d documents, seed %d", kind, size, seed)
    return Corpus(documents=documents, source_tag=tag)


def split_corpus(corpus: Corpus, held_out_fraction: float, seed: int) -> Tuple[Corpus, Corpus]:
    """Deterministic (train, held-out) split of the documents."""
    if not 0 < held_out_fraction < 1:
        raise ArgumentError(f"held_out_fraction must be in (0, 1) (got {held_out_fraction})")
    n = len(corpus)
    if n < 2:
        raise ArgumentError("need at least 2 documents to split a corpus")
    held = min(n - 1, max(1, int(round(held_out_fraction * n))))
    order = np.random.default_rng(seed).permutation(n)
    held_idx = sorted(int(i) for i in order[:held])
    train_idx = sorted(int(i) for i in order[held:])
    return (
        Corpus([corpus.documents[i] for i in train_idx], corpus.source_tag),
        Corpus([corpus.documents[i] for i in held_idx], corpus.source_tag),
    )


def byte_histogram(corpus: Corpus) -> np.ndarray:
    """Byte counts over every document of the corpus."""
    counts = np.zeros(BYTE_VOCAB, dtype=np.int64)
    for doc in corpus.documents:
        counts += np.bincount(np.frombuffer(doc, dtype=np.uint8), minlength=BYTE_VOCAB)
    return counts


def chi_squared_distance(counts_a: np.ndarray, counts_b: np.ndarray) -> float:
    """Symmetric chi-squared distance between two normalised byte profiles."""
    p = np.asarray(counts_a, dtype=np.float64)
    q = np.asarray(counts_b, dtype=np.float64)
    p = p / p.sum()
    q = q / q.sum()
    total = p + q
    used = total > 0
    return float(np.sum((p[used] - q[used]) ** 2 / total[used]))


# Persistence


def _escape(doc: bytes) -> bytes:
    return doc.replace(b"\\", b"\\\\").replace(b"\n", b"\\n").replace(b"\r", b"\\r")


def _unescape(line: bytes) -> bytes:
    out = bytearray()
    i = 0
    while i < len(line):
        byte = line[i]
        if byte == ord("\\") and i + 1 < len(line):
            nxt = line[i + 1]
            out.append({ord("n"): ord("\n"), ord("r"): ord("\r")}.get(nxt, nxt))
            i += 2
        else:
            out.append(byte)
            i += 1
    return bytes(out)


def save_corpus(corpus: Corpus, path: Union[str, Path]):
    """One document per line with backslash escapes for newlines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for doc in corpus.documents:
            f.write(_escape(doc) + b"\n")


def load_corpus(path: Union[str, Path], source_tag: str = "general") -> Corpus:
    """Read a corpus written by ``save_corpus``."""
    with open(path, "rb") as f:
        lines = f.read().split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    return Corpus([_unescape(line) for line in lines], source_tag)


def sequences_fingerprint(sequences: Sequence[Sequence[int]]) -> str:
    """SHA-256 over token sequences (order and lengths included)."""
    payload = json.dumps([list(map(int, seq)) for seq in sequences], separators=(",", ":"))
    return hashlib.sha256(payload.encode("ascii")).hexdigest()


@dataclass
class CalibrationSet:
    """Sampled calibration sequences plus everything needed to redraw them."""

    sequences: List[List[int]]
    seed: int
    count: int
    max_seq_len: int
    document_indices: List[int]
    with_replacement: bool
    corpus_fingerprint: str
    source_tag: str = "general"

    @property
    def fingerprint(self) -> str:
        """Fingerprint of the sampled sequences."""
        payload = {
            "corpus": self.corpus_fingerprint,
            "seed": self.seed,
            "count": self.count,
            "max_seq_len": self.max_seq_len,
            "document_indices": self.document_indices,
            "with_replacement": self.with_replacement,
        }
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("ascii")).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "count": self.count,
            "max_seq_len": self.max_seq_len,
            "document_indices": self.document_indices,
            "with_replacement": self.with_replacement,
            "corpus_fingerprint": self.corpus_fingerprint,
            "source_tag": self.source_tag,
            "fingerprint": self.fingerprint,
        }


def sample_calibration(corpus: Corpus, count: int, max_seq_len: int, seed: int) -> CalibrationSet:
    """Uniformly sample ``count`` documents, each truncated to ``max_seq_len`` bytes.

    Draws with replacement only when ``count`` exceeds the corpus size.
    """
    if count <= 0:
        raise ArgumentError(f"calibration count must be positive (got {count})")
    if max_seq_len <= 0:
        raise ArgumentError(f"max_seq_len must be positive (got {max_seq_len})")
    if len(corpus) == 0:
        raise ArgumentError("cannot sample calibration data from an empty corpus")
    with_replacement = count > len(corpus)
    rng = np.random.default_rng(seed)
    indices = [int(i) for i in rng.choice(len(corpus), size=count, replace=with_replacement)]
    if with_replacement:
        logger.warning(
            "calibration count %d exceeds corpus size %d; sampling with replacement",
            count,
            len(corpus),
        )
    return CalibrationSet(
        sequences=[encode(corpus.documents[i][:max_seq_len]) for i in indices],
        seed=seed,
        count=count,
        max_seq_len=max_seq_len,
        document_indices=indices,
        with_replacement=with_replacement,
        corpus_fingerprint=corpus.fingerprint,
        source_tag=corpus.source_tag,
    )


def save_calibration(calibration: CalibrationSet, path: Union[str, Path]):
    """Write the calibration set as JSON (source reference and sequences)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(calibration.to_dict(), f, indent=2, sort_keys=True)


def load_calibration(path: Union[str, Path], corpus: Corpus) -> CalibrationSet:
    """Re-materialise a saved calibration set from the corpus it was drawn from."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if data["corpus_fingerprint"] != corpus.fingerprint:
        raise InputError("calibration set was drawn from a different corpus")
    indices = [int(i) for i in data["document_indices"]]
    max_seq_len = int(data["max_seq_len"])
    calibration = CalibrationSet(
        sequences=[encode(corpus.documents[i][:max_seq_len]) for i in indices],
        seed=int(data["seed"]),
        count=int(data["count"]),
        max_seq_len=max_seq_len,
        document_indices=indices,
        with_replacement=bool(data["with_replacement"]),
        corpus_fingerprint=corpus.fingerprint,
        source_tag=data.get("source_tag", corpus.source_tag),
    )
    if "fingerprint" in data and data["fingerprint"] != calibration.fingerprint:
        raise InputError("calibration fingerprint does not match its parameters")
    return calibration
