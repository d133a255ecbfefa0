"""Labeled-corpus handling: ingestion, de-identification, validation,
splitting, vocabulary building, span extraction, encoding, and synthetic
corpus generation.

On-disk corpus format: UTF-8 text, one ``token<TAB>tag`` per line, records
separated by one blank line. Lines starting with ``# `` are comments; two
comment forms are structured:

    # id: <record_id>     overrides the zero-padded ordinal id of its block
    # types: T1 T2 ...    declares entity types beyond those present in the
                          records (lets a label inventory round-trip)

Tags are ``O`` or ``B-TYPE`` / ``I-TYPE`` with TYPE matching
``[A-Za-z][A-Za-z0-9_]*``.
"""

from __future__ import annotations

import itertools
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import BioViolationError, FormatError

PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"
PAD_ID = 0
UNK_ID = 1

_TYPE_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")
_WS_RE = re.compile(r"\s")

# De-identification patterns, applied in order: MIMIC-style [** ... **]
# placeholders, then date-shaped tokens, then long digit runs.
_PHI_BRACKET_RE = re.compile(r"^\[\*\*.*\*\*\]$")
_DATE_RE = re.compile(r"^\d{1,4}[/-]\d{1,4}[/-]\d{1,4}$")
_ID_RUN_RE = re.compile(r"\d{5,}")

PHI_PLACEHOLDER = "<PHI>"
DATE_PLACEHOLDER = "<DATE>"
ID_PLACEHOLDER = "<ID>"


@dataclass(frozen=True)
class Token:
    """A single whitespace-free text unit."""

    text: str

    def __post_init__(self):
        if not self.text:
            raise FormatError("token text must be non-empty")
        if _WS_RE.search(self.text):
            raise FormatError(f"token text contains whitespace: {self.text!r}")


@dataclass(frozen=True)
class TagLabel:
    """A BIO tag: position in {B, I, O} plus an entity type (empty for O)."""

    position: str
    entity_type: str = ""

    def __post_init__(self):
        if self.position not in ("B", "I", "O"):
            raise FormatError(f"invalid tag position {self.position!r}")
        if self.position == "O" and self.entity_type:
            raise FormatError("O tag must not carry an entity type")
        if self.position in ("B", "I") and not self.entity_type:
            raise FormatError(f"{self.position} tag requires an entity type")
        if self.entity_type and not _TYPE_RE.match(self.entity_type):
            raise FormatError(f"invalid entity type {self.entity_type!r}")

    @classmethod
    def from_tag(cls, tag: str) -> "TagLabel":
        """Parse ``O`` / ``B-TYPE`` / ``I-TYPE``."""
        if tag == "O":
            return cls("O")
        if len(tag) > 2 and tag[1] == "-" and tag[0] in ("B", "I"):
            etype = tag[2:]
            if _TYPE_RE.match(etype):
                return cls(tag[0], etype)
        raise FormatError(f"unparseable tag {tag!r}")

    @property
    def tag(self) -> str:
        return self.position if self.position == "O" else f"{self.position}-{self.entity_type}"


O_LABEL = TagLabel("O")


@dataclass
class LabeledRecord:
    """One record: aligned token and label sequences of equal length >= 1."""

    record_id: str
    tokens: list[Token]
    labels: list[TagLabel]

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise FormatError(
                f"record {self.record_id!r}: {len(self.tokens)} tokens vs "
                f"{len(self.labels)} labels"
            )
        if not self.tokens:
            raise FormatError(f"record {self.record_id!r} is empty")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    """A list of records plus the sorted entity-type inventory.

    The inventory is derived from the records and unioned with any
    explicitly supplied types, so it is always a superset of the types
    that actually appear.
    """

    records: list[LabeledRecord]
    label_inventory: list[str] = None  # type: ignore[assignment]

    def __post_init__(self):
        seen: set[str] = set()
        for rec in self.records:
            if rec.record_id in seen:
                raise FormatError(f"duplicate record id {rec.record_id!r}")
            seen.add(rec.record_id)
        present = {
            lab.entity_type for rec in self.records for lab in rec.labels if lab.position != "O"
        }
        extra = set(self.label_inventory) if self.label_inventory else set()
        self.label_inventory = sorted(present | extra)

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test fractions (default 0.70/0.15/0.15) and shuffle seed."""

    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 0

    def __post_init__(self):
        for name, frac in (
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ):
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {frac}")
        if abs(self.train_frac + self.val_frac + self.test_frac - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


@dataclass(frozen=True)
class EntitySpan:
    """Half-open token range [start, end) carrying one entity type."""

    start: int
    end: int
    entity_type: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span bounds [{self.start}, {self.end})")


@dataclass
class Vocabulary:
    """Token <-> id mapping with reserved ids 0 = PAD, 1 = UNK."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.id_to_token[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise FormatError(f"vocabulary ids 0/1 must be {PAD_TOKEN}/{UNK_TOKEN}")
        if self.token_to_id is None:
            self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise FormatError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, text: str) -> int:
        return self.token_to_id.get(text, UNK_ID)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.id_to_token) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = fh.read().splitlines()
        if len(tokens) < 2:
            raise FormatError(f"vocabulary file {path} has fewer than 2 lines")
        return cls(tokens)


# ---------------------------------------------------------------------------
# Corpus file format
# ---------------------------------------------------------------------------


def parse_conll(text: str) -> Corpus:
    """Parse the corpus format into a Corpus.

    Raises FormatError with a 1-based line number on malformed lines and
    on empty input. A file holding only a `# types:` header is the valid
    serialization of a zero-record corpus (an empty split), not an error.
    """
    records: list[LabeledRecord] = []
    declared_types: set[str] = set()
    block_tokens: list[Token] = []
    block_labels: list[TagLabel] = []
    block_id: str | None = None
    ordinal = 0

    def close_block():
        nonlocal block_id, ordinal
        if not block_tokens:
            block_id = None
            return
        rid = block_id if block_id is not None else f"{ordinal:04d}"
        records.append(LabeledRecord(rid, list(block_tokens), list(block_labels)))
        block_tokens.clear()
        block_labels.clear()
        block_id = None
        ordinal += 1

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            close_block()
            continue
        if line.startswith("# "):
            body = line[2:].strip()
            if body.startswith("id:"):
                block_id = body[3:].strip()
            elif body.startswith("types:"):
                declared_types.update(body[6:].split())
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise FormatError(f"line {lineno}: malformed line {line!r} (want token<TAB>tag)")
        try:
            token = Token(parts[0])
            label = TagLabel.from_tag(parts[1])
        except FormatError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        block_tokens.append(token)
        block_labels.append(label)
    close_block()

    if not records and not declared_types:
        raise FormatError("empty file: no records found")
    return Corpus(records, label_inventory=sorted(declared_types))


def write_conll(corpus: Corpus) -> str:
    """Render a Corpus in the on-disk format; parse_conll inverts this."""
    lines: list[str] = []
    if corpus.label_inventory:
        lines.append("# types: " + " ".join(corpus.label_inventory))
    for i, rec in enumerate(corpus.records):
        if i > 0:
            lines.append("")
        lines.append(f"# id: {rec.record_id}")
        for tok, lab in zip(rec.tokens, rec.labels):
            lines.append(f"{tok.text}\t{lab.tag}")
    return "\n".join(lines) + "\n"


def load_corpus(path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse_conll(text)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(write_conll(corpus))


# ---------------------------------------------------------------------------
# BIO validation and spans
# ---------------------------------------------------------------------------


def validate_bio(labels: Sequence[TagLabel], mode: str = "strict") -> list[TagLabel]:
    """Check or repair BIO well-formedness.

    strict: return the input unchanged iff every I continues a same-type
    B/I; raise BioViolationError at the first offending index otherwise.
    repair: rewrite every invalid I to a B of the same type (left to
    right, so later labels are judged against repaired predecessors).
    """
    if mode not in ("strict", "repair"):
        raise ValueError(f"unknown mode {mode!r}")
    out: list[TagLabel] = []
    for i, lab in enumerate(labels):
        if lab.position == "I":
            prev = out[i - 1] if i > 0 else None
            valid = (
                prev is not None
                and prev.position in ("B", "I")
                and prev.entity_type == lab.entity_type
            )
            if not valid:
                if mode == "strict":
                    raise BioViolationError(
                        f"index {i}: I-{lab.entity_type} does not continue a "
                        f"same-type entity",
                        index=i,
                    )
                lab = TagLabel("B", lab.entity_type)
        out.append(lab)
    return out


def spans_from_labels(labels: Sequence[TagLabel]) -> list[EntitySpan]:
    """Extract maximal B(I)* runs as spans, sorted by start.

    Input must be strict-BIO valid; run validate_bio(labels, "repair")
    first on model output.
    """
    validate_bio(labels, "strict")
    spans: list[EntitySpan] = []
    start = None
    etype = ""
    for i, lab in enumerate(labels):
        if lab.position == "B":
            if start is not None:
                spans.append(EntitySpan(start, i, etype))
            start, etype = i, lab.entity_type
        elif lab.position == "O":
            if start is not None:
                spans.append(EntitySpan(start, i, etype))
            start = None
    if start is not None:
        spans.append(EntitySpan(start, len(labels), etype))
    return spans


# ---------------------------------------------------------------------------
# De-identification
# ---------------------------------------------------------------------------


def deidentify(record: LabeledRecord) -> LabeledRecord:
    """Replace PHI-shaped token texts with placeholders; labels untouched.

    Idempotent: placeholders match none of the patterns.
    """
    new_tokens: list[Token] = []
    for tok in record.tokens:
        if _PHI_BRACKET_RE.match(tok.text):
            tok = Token(PHI_PLACEHOLDER)
        elif _DATE_RE.match(tok.text):
            tok = Token(DATE_PLACEHOLDER)
        elif _ID_RUN_RE.search(tok.text):
            tok = Token(ID_PLACEHOLDER)
        new_tokens.append(tok)
    return LabeledRecord(record.record_id, new_tokens, list(record.labels))


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def split(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Shuffle records with the seeded permutation and cut into three
    whole-record partitions.

    Sizes: round(n * train_frac), then round(n * val_frac), remainder to
    test, with round = floor(x + 0.5). Each partition inherits the full
    parent inventory so label indices stay consistent across splits.
    """
    n = len(corpus.records)
    if n < 3:
        raise FormatError(f"corpus must have at least 3 records to split, got {n}")
    order = list(range(n))
    random.Random(spec.seed).shuffle(order)
    shuffled = [corpus.records[i] for i in order]
    n_train = _round_half_up(n * spec.train_frac)
    n_val = _round_half_up(n * spec.val_frac)
    inv = list(corpus.label_inventory)
    return (
        Corpus(shuffled[:n_train], label_inventory=inv),
        Corpus(shuffled[n_train : n_train + n_val], label_inventory=inv),
        Corpus(shuffled[n_train + n_val :], label_inventory=inv),
    )


# ---------------------------------------------------------------------------
# Vocabulary and encoding
# ---------------------------------------------------------------------------


def build_vocab(train: Corpus, min_freq: int = 1, max_size: int = 50000) -> Vocabulary:
    """Count tokens in the training split only; keep those with frequency
    >= min_freq, highest frequency first (ties lexicographic), truncated
    to max_size ids total including PAD/UNK.
    """
    if max_size < 2:
        raise ValueError("max_size must be >= 2 to hold PAD and UNK")
    counts = Counter(tok.text for rec in train.records for tok in rec.tokens)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept[: max_size - 2])


def label_index_from_types(entity_types: Iterable[str]) -> dict[str, int]:
    """Canonical tag -> id map: O = 0, then B-T, I-T per sorted type."""
    index = {"O": 0}
    for etype in sorted(set(entity_types)):
        index[f"B-{etype}"] = len(index)
        index[f"I-{etype}"] = len(index)
    return index


def encode(
    record: LabeledRecord, vocab: Vocabulary, label_index: dict[str, int]
) -> tuple[list[int], list[int]]:
    """Map tokens to vocabulary ids (UNK for unknown) and tags to label ids."""
    token_ids = [vocab.lookup(tok.text) for tok in record.tokens]
    label_ids = []
    for lab in record.labels:
        if lab.tag not in label_index:
            raise FormatError(f"record {record.record_id!r}: unseen tag {lab.tag!r}")
        label_ids.append(label_index[lab.tag])
    return token_ids, label_ids


def decode_tokens(token_ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.id_to_token[i] for i in token_ids]


@dataclass
class EncodedRecord:
    """A record after vocabulary/label encoding, ready for batching."""

    record_id: str
    token_ids: list[int]
    label_ids: list[int]

    def __len__(self) -> int:
        return len(self.token_ids)


def encode_corpus(
    corpus: Corpus, vocab: Vocabulary, label_index: dict[str, int]
) -> list[EncodedRecord]:
    return [
        EncodedRecord(rec.record_id, *encode(rec, vocab, label_index))
        for rec in corpus.records
    ]


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

_ONSETS = (
    "b c d f g h k l m n p r s t v z br cl dr gl pr st tr".split()
)
_NUCLEI = "a e i o u ia ea io".split()
_CODAS = [""] + "l n r s t x ne ril min dex zol".split()


def _pseudo_words(n: int) -> list[str]:
    """First n distinct pseudo-words from a fixed syllable enumeration."""
    words: list[str] = []
    seen: set[str] = set()
    for round_idx in itertools.count():
        suffix = "" if round_idx == 0 else str(round_idx)
        for onset, nucleus, coda in itertools.product(_ONSETS, _NUCLEI, _CODAS):
            word = onset + nucleus + coda + suffix
            if word not in seen:
                seen.add(word)
                words.append(word)
                if len(words) == n:
                    return words
    raise AssertionError("unreachable")


def _phi_filler(rng: random.Random) -> str:
    if rng.random() < 0.5:
        return f"{rng.randint(1, 12)}/{rng.randint(1, 28)}/{rng.randint(1990, 2024)}"
    return str(rng.randint(10**6, 10**7 - 1))


def gen_synthetic(
    n_records: int,
    entity_types: Sequence[str],
    vocab_size: int = 50,
    max_len: int = 12,
    seed: int = 0,
) -> Corpus:
    """Generate a labeled corpus where each entity type draws from its own
    disjoint sub-vocabulary and filler words from another, so gold labels
    are recoverable by construction.

    Entities are 1-3 tokens, always separated by at least one filler
    token; record i is guaranteed to contain entity_types[i % k]. A small
    fraction of filler tokens are PHI-shaped (dates, long digit ids) so the
    de-identification stage has work to do downstream.
    """
    if n_records < 1:
        raise ValueError("n_records must be >= 1")
    if not entity_types:
        raise ValueError("entity_types must be non-empty")
    if vocab_size < 20:
        raise ValueError("vocab_size must be >= 20")
    if max_len < 4:
        raise ValueError("max_len must be >= 4")
    types = list(entity_types)
    for etype in types:
        if not _TYPE_RE.match(etype):
            raise ValueError(f"invalid entity type {etype!r}")
    if len(set(types)) != len(types):
        raise ValueError("entity_types contains duplicates")

    words = _pseudo_words(vocab_size)
    per_type = max(3, (2 * vocab_size // 5) // len(types))
    pools: dict[str, list[str]] = {}
    for i, etype in enumerate(types):
        pools[etype] = words[i * per_type : (i + 1) * per_type]
    filler = words[len(types) * per_type :]
    if len(filler) < 5:
        raise ValueError("vocab_size too small for the requested entity types")

    rng = random.Random(seed)
    records: list[LabeledRecord] = []
    for i in range(n_records):
        target = rng.randint(min(6, max_len), max_len)
        toks: list[str] = []
        labs: list[TagLabel] = []
        pending = [types[i % len(types)]]

        def emit_filler(count: int):
            for _ in range(count):
                text = _phi_filler(rng) if rng.random() < 0.02 else rng.choice(filler)
                toks.append(text)
                labs.append(O_LABEL)

        def emit_entity(etype: str):
            elen = rng.randint(1, min(3, target - len(toks)))
            pool = pools[etype]
            for j in range(elen):
                toks.append(rng.choice(pool))
                labs.append(TagLabel("B" if j == 0 else "I", etype))

        emit_filler(rng.randint(0, 2))
        while len(toks) < target:
            if pending:
                etype = pending.pop()
            else:
                etype = rng.choice(types)
            emit_entity(etype)
            if len(toks) >= target:
                break
            emit_filler(rng.randint(1, min(3, target - len(toks))))
        records.append(LabeledRecord(f"{i:04d}", [Token(t) for t in toks], labs))

    return Corpus(records, label_inventory=types)
