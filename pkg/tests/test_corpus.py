"""Corpus module: parsing, BIO handling, de-id, splitting, vocab, encoding,
and the synthetic generator.
"""

import random

import pytest

from medner.corpus import (
    Corpus,
    EntitySpan,
    LabeledRecord,
    SplitSpec,
    TagLabel,
    Token,
    Vocabulary,
    build_vocab,
    deidentify,
    encode,
    decode_tokens,
    gen_synthetic,
    label_index_from_types,
    parse_conll,
    spans_from_labels,
    split,
    validate_bio,
    write_conll,
)
from medner.errors import BioViolationError, FormatError

from oracles import brute_force_spans, is_valid_bio

O = TagLabel("O")


def tags(*strings):
    return [TagLabel.from_tag(s) for s in strings]


def make_record(rid, texts, labels):
    return LabeledRecord(rid, [Token(t) for t in texts], labels)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


def test_token_rejects_whitespace_and_empty():
    with pytest.raises(FormatError):
        Token("")
    with pytest.raises(FormatError):
        Token("two words")
    with pytest.raises(FormatError):
        Token("tab\tched")
    assert Token("aspirin").text == "aspirin"


def test_taglabel_invariants():
    with pytest.raises(FormatError):
        TagLabel("O", "Drug")
    with pytest.raises(FormatError):
        TagLabel("B", "")
    with pytest.raises(FormatError):
        TagLabel.from_tag("B-")
    with pytest.raises(FormatError):
        TagLabel.from_tag("X-Drug")
    assert TagLabel.from_tag("B-Drug").tag == "B-Drug"
    assert TagLabel.from_tag("O").tag == "O"


def test_record_requires_aligned_nonempty():
    with pytest.raises(FormatError):
        make_record("r", ["a", "b"], tags("O"))
    with pytest.raises(FormatError):
        LabeledRecord("r", [], [])


def test_corpus_rejects_duplicate_ids_and_derives_inventory():
    rec1 = make_record("a", ["x"], tags("B-Drug"))
    rec2 = make_record("a", ["y"], tags("O"))
    with pytest.raises(FormatError):
        Corpus([rec1, rec2])
    corpus = Corpus([rec1], label_inventory=["Disease"])
    assert corpus.label_inventory == ["Disease", "Drug"]


# ---------------------------------------------------------------------------
# parse / write
# ---------------------------------------------------------------------------


def test_parse_single_block():
    corpus = parse_conll("Aspirin\tB-Drug\n50\tI-Drug\nmg\tI-Drug\ndaily\tO\n")
    assert len(corpus) == 1
    rec = corpus.records[0]
    assert [t.text for t in rec.tokens] == ["Aspirin", "50", "mg", "daily"]
    assert [l.tag for l in rec.labels] == ["B-Drug", "I-Drug", "I-Drug", "O"]
    assert rec.record_id == "0000"


def test_parse_empty_file_errors():
    with pytest.raises(FormatError, match="empty file"):
        parse_conll("")
    with pytest.raises(FormatError, match="empty file"):
        parse_conll("\n\n# just a comment\n")


def test_types_header_only_is_empty_corpus():
    corpus = parse_conll("# types: Disease Drug\n")
    assert len(corpus) == 0
    assert corpus.label_inventory == ["Disease", "Drug"]
    assert parse_conll(write_conll(corpus)).label_inventory == corpus.label_inventory


def test_parse_two_blocks():
    text = "a\tO\nb\tO\nc\tO\n\nd\tB-X\ne\tI-X\n"
    corpus = parse_conll(text)
    assert [len(r) for r in corpus.records] == [3, 2]
    assert [r.record_id for r in corpus.records] == ["0000", "0001"]


def test_parse_id_comment_overrides():
    corpus = parse_conll("# id: note-7\nx\tO\n\ny\tO\n")
    assert [r.record_id for r in corpus.records] == ["note-7", "0001"]


@pytest.mark.parametrize(
    "text,needle",
    [
        ("token with spaces\tO\n", "line 1"),
        ("lonely\n", "line 1"),
        ("tok\tB-\n", "line 1"),
        ("tok\tQ-Drug\n", "line 1"),
        ("ok\tO\nbad\tI-\n", "line 2"),
        ("a\tO\tO\n", "line 1"),
    ],
)
def test_parse_malformed_lines(text, needle):
    with pytest.raises(FormatError, match=needle):
        parse_conll(text)


def test_roundtrip_identity():
    corpus = gen_synthetic(20, ["Disease", "Drug"], vocab_size=40, max_len=10, seed=9)
    again = parse_conll(write_conll(corpus))
    assert len(again) == len(corpus)
    assert again.label_inventory == corpus.label_inventory
    for a, b in zip(again.records, corpus.records):
        assert a.record_id == b.record_id
        assert a.tokens == b.tokens
        assert a.labels == b.labels
    # inventory supersets survive the round trip via the types header
    extra = Corpus(corpus.records[:3], label_inventory=["Zed", "Disease", "Drug"])
    assert parse_conll(write_conll(extra)).label_inventory == extra.label_inventory


# ---------------------------------------------------------------------------
# validate_bio
# ---------------------------------------------------------------------------


def test_repair_orphan_i():
    assert validate_bio(tags("O", "I-Drug"), "repair") == tags("O", "B-Drug")


def test_strict_accepts_valid():
    seq = tags("B-Disease", "I-Disease", "O")
    assert validate_bio(seq, "strict") == seq


def test_strict_type_mismatch_reports_index():
    with pytest.raises(BioViolationError) as exc:
        validate_bio(tags("B-Drug", "I-Disease"), "strict")
    assert exc.value.index == 1


def test_strict_leading_i_reports_index_zero():
    with pytest.raises(BioViolationError) as exc:
        validate_bio(tags("I-Drug", "O"), "strict")
    assert exc.value.index == 0


def test_repair_output_always_strict_valid():
    rng = random.Random(11)
    pool = ["O", "B-A", "I-A", "B-B", "I-B"]
    for _ in range(300):
        seq = tags(*(rng.choice(pool) for _ in range(rng.randint(1, 12))))
        repaired = validate_bio(seq, "repair")
        assert validate_bio(repaired, "strict") == repaired
        assert len(repaired) == len(seq)


def test_repair_keeps_continuation_after_fix():
    assert validate_bio(tags("O", "I-D", "I-D"), "repair") == tags("O", "B-D", "I-D")


def test_unknown_mode():
    with pytest.raises(ValueError):
        validate_bio([O], "fix")


# ---------------------------------------------------------------------------
# spans
# ---------------------------------------------------------------------------


def test_spans_basic():
    assert spans_from_labels(tags("B-Drug", "I-Drug", "O", "B-Dis")) == [
        EntitySpan(0, 2, "Drug"),
        EntitySpan(3, 4, "Dis"),
    ]
    assert spans_from_labels(tags("O", "O", "O")) == []


def test_spans_adjacent_b_runs():
    assert spans_from_labels(tags("B-D", "B-D", "I-D")) == [
        EntitySpan(0, 1, "D"),
        EntitySpan(1, 3, "D"),
    ]


def test_spans_require_valid_input():
    with pytest.raises(BioViolationError):
        spans_from_labels(tags("I-Drug"))


def test_spans_match_brute_force_random():
    rng = random.Random(3)
    pool = ["O", "B-A", "I-A", "B-B", "I-B"]
    checked = 0
    while checked < 20:
        raw = [rng.choice(pool) for _ in range(rng.randint(1, 10))]
        if not is_valid_bio(raw):
            continue
        got = spans_from_labels(tags(*raw))
        assert [(s.start, s.end, s.entity_type) for s in got] == brute_force_spans(raw)
        checked += 1


def test_spans_match_brute_force_exhaustive():
    """Every valid sequence of length <= 8 over two entity types."""
    import itertools

    pool = ["O", "B-A", "I-A", "B-B", "I-B"]
    label_cache = {raw: TagLabel.from_tag(raw) for raw in pool}
    checked = 0
    for length in range(1, 9):
        for raw in itertools.product(pool, repeat=length):
            if not is_valid_bio(list(raw)):
                continue
            got = spans_from_labels([label_cache[t] for t in raw])
            assert [(s.start, s.end, s.entity_type) for s in got] == \
                brute_force_spans(list(raw))
            checked += 1
    assert checked > 10000


# ---------------------------------------------------------------------------
# deidentify
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "text,expected",
    [
        ("1234567", "<ID>"),
        ("12/03/2019", "<DATE>"),
        ("12-03-2019", "<DATE>"),
        ("3/4/99", "<DATE>"),
        ("[**Hospital1**]", "<PHI>"),
        ("[**2019-01-01**]", "<PHI>"),
        ("aspirin", "aspirin"),
        ("mrn:99887766", "<ID>"),
        ("1234", "1234"),
        ("12/2019", "12/2019"),
    ],
)
def test_deid_patterns(text, expected):
    rec = make_record("r", [text], tags("O"))
    assert deidentify(rec).tokens[0].text == expected


def test_deid_idempotent_and_label_preserving():
    rec = make_record(
        "r",
        ["check", "12/03/2019", "9998887", "[**Name**]"],
        tags("O", "B-D", "I-D", "O"),
    )
    once = deidentify(rec)
    twice = deidentify(once)
    assert [t.text for t in once.tokens] == [t.text for t in twice.tokens]
    assert once.labels == rec.labels
    assert len(once.tokens) == len(rec.tokens)


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------


def _corpus_of(n):
    return Corpus(
        [make_record(f"r{i}", [f"tok{i}"], tags("O")) for i in range(n)]
    )


def test_split_sizes_default_100():
    tr, va, te = split(_corpus_of(100), SplitSpec(seed=1))
    assert (len(tr), len(va), len(te)) == (70, 15, 15)


def test_split_three_records_rounding():
    tr, va, te = split(_corpus_of(3), SplitSpec(seed=1))
    assert (len(tr), len(va), len(te)) == (2, 0, 1)


def test_split_partition_disjoint_exhaustive():
    corpus = _corpus_of(37)
    tr, va, te = split(corpus, SplitSpec(seed=9))
    ids = [r.record_id for part in (tr, va, te) for r in part.records]
    assert sorted(ids) == sorted(r.record_id for r in corpus.records)
    assert len(set(ids)) == len(ids)


def test_split_deterministic():
    corpus = _corpus_of(50)
    a = split(corpus, SplitSpec(seed=4))
    b = split(corpus, SplitSpec(seed=4))
    for pa, pb in zip(a, b):
        assert [r.record_id for r in pa.records] == [r.record_id for r in pb.records]
    c = split(corpus, SplitSpec(seed=5))
    assert any(
        [r.record_id for r in pa.records] != [r.record_id for r in pc.records]
        for pa, pc in zip(a, c)
    )


def test_split_too_small():
    with pytest.raises(FormatError):
        split(_corpus_of(2), SplitSpec())


def test_split_fractions_validated():
    with pytest.raises(ValueError):
        SplitSpec(train_frac=0.5, val_frac=0.2, test_frac=0.2)
    with pytest.raises(ValueError):
        SplitSpec(train_frac=-0.1, val_frac=0.6, test_frac=0.5)


def test_split_keeps_parent_inventory():
    recs = [make_record("a", ["x"], tags("B-D")), make_record("b", ["y"], tags("O")),
            make_record("c", ["z"], tags("O"))]
    corpus = Corpus(recs, label_inventory=["D", "E"])
    for part in split(corpus, SplitSpec(seed=0)):
        assert part.label_inventory == ["D", "E"]


# ---------------------------------------------------------------------------
# vocabulary / encoding
# ---------------------------------------------------------------------------


def test_build_vocab_min_freq():
    corpus = Corpus([
        make_record("1", ["a", "a", "b"], tags("O", "O", "O")),
        make_record("2", ["a"], tags("O")),
    ])
    vocab = build_vocab(corpus, min_freq=2)
    assert vocab.id_to_token == ["<PAD>", "<UNK>", "a"]


def test_build_vocab_empty_corpus():
    assert build_vocab(Corpus([])).id_to_token == ["<PAD>", "<UNK>"]


def test_build_vocab_tie_lexicographic():
    corpus = Corpus([make_record("1", ["b", "a", "b", "a"], tags("O", "O", "O", "O"))])
    vocab = build_vocab(corpus, min_freq=1)
    assert vocab.id_to_token == ["<PAD>", "<UNK>", "a", "b"]


def test_build_vocab_max_size_truncates():
    corpus = Corpus([make_record("1", ["a", "b", "c"], tags("O", "O", "O"))])
    assert len(build_vocab(corpus, max_size=3)) == 3
    with pytest.raises(ValueError):
        build_vocab(corpus, max_size=1)


def test_vocab_file_roundtrip(tmp_path):
    vocab = Vocabulary(["<PAD>", "<UNK>", "alpha", "beta"])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert Vocabulary.load(path).id_to_token == vocab.id_to_token
    bad = tmp_path / "bad.txt"
    bad.write_text("alpha\nbeta\n")
    with pytest.raises(FormatError):
        Vocabulary.load(bad)


def test_encode_unk_and_roundtrip():
    vocab = Vocabulary(["<PAD>", "<UNK>", "a"])
    index = label_index_from_types(["D"])
    rec = make_record("r", ["a", "zzz"], tags("O", "O"))
    token_ids, label_ids = encode(rec, vocab, index)
    assert token_ids == [2, 1]
    assert label_ids == [0, 0]
    assert decode_tokens([2], vocab) == ["a"]
    # degenerate vocabulary: everything becomes UNK
    bare = Vocabulary(["<PAD>", "<UNK>"])
    assert encode(rec, bare, index)[0] == [1, 1]


def test_encode_unseen_tag():
    vocab = Vocabulary(["<PAD>", "<UNK>"])
    rec = make_record("r", ["x"], tags("B-New"))
    with pytest.raises(FormatError, match="unseen tag"):
        encode(rec, vocab, label_index_from_types(["Old"]))


def test_label_index_layout():
    index = label_index_from_types(["Drug", "Disease"])
    assert index == {
        "O": 0,
        "B-Disease": 1,
        "I-Disease": 2,
        "B-Drug": 3,
        "I-Drug": 4,
    }


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def test_gen_synthetic_deterministic():
    kwargs = dict(n_records=10, entity_types=["Disease"], vocab_size=50,
                  max_len=12, seed=7)
    a, b = gen_synthetic(**kwargs), gen_synthetic(**kwargs)
    assert write_conll(a) == write_conll(b)
    c = gen_synthetic(n_records=10, entity_types=["Disease"], vocab_size=50,
                      max_len=12, seed=8)
    assert write_conll(a) != write_conll(c)


def test_gen_synthetic_valid_bio_everywhere():
    corpus = gen_synthetic(40, ["Disease", "Drug", "Symptom"], vocab_size=60,
                           max_len=14, seed=1)
    for rec in corpus.records:
        assert validate_bio(rec.labels, "strict") == rec.labels
        assert len(rec) <= 14


def test_gen_synthetic_disjoint_pools():
    corpus = gen_synthetic(60, ["Disease", "Drug"], vocab_size=60, max_len=12, seed=2)
    by_kind: dict[str, set[str]] = {}
    for rec in corpus.records:
        for tok, lab in zip(rec.tokens, rec.labels):
            kind = lab.entity_type if lab.position != "O" else "O"
            by_kind.setdefault(kind, set()).add(tok.text)
    kinds = list(by_kind)
    for i, a in enumerate(kinds):
        for b in kinds[i + 1:]:
            assert not (by_kind[a] & by_kind[b]), (a, b)


def test_gen_synthetic_inventory_and_frequency():
    types = ["Disease", "Drug", "Symptom"]
    corpus = gen_synthetic(200, types, vocab_size=100, max_len=16, seed=3)
    assert corpus.label_inventory == sorted(types)
    counts = {t: 0 for t in types}
    total = 0
    for rec in corpus.records:
        for lab in rec.labels:
            total += 1
            if lab.position != "O":
                counts[lab.entity_type] += 1
    for t in types:
        assert counts[t] / total >= 0.05, (t, counts[t] / total)


def test_gen_synthetic_invalid_sizes():
    with pytest.raises(ValueError):
        gen_synthetic(0, ["D"], vocab_size=50, max_len=10, seed=0)
    with pytest.raises(ValueError):
        gen_synthetic(5, [], vocab_size=50, max_len=10, seed=0)
    with pytest.raises(ValueError):
        gen_synthetic(5, ["D"], vocab_size=10, max_len=10, seed=0)
