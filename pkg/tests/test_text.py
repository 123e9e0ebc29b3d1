import json
import logging
from importlib import resources

import pytest
from hypothesis import given
from hypothesis import strategies as st

from leaklab.errors import ArgumentError, DataError
from leaklab.numeric import Rng
from leaklab.text import (
    BOS,
    EOS,
    PAD,
    SUPPORT_TEMPLATES,
    VOCAB_SIZE,
    CorpusLine,
    FinetuneDataset,
    build_finetune_dataset,
    check_disjoint,
    corpus_hash,
    credential_line,
    decode,
    encode,
    load_support_jsonl,
    load_wordlist,
    pack_lines,
    parse_credential,
    synth_general,
    synth_support,
)

SAMPLE_WORDLIST = str(resources.files("leaklab").joinpath("data", "sample_wordlist.txt"))
SAMPLE_SUPPORT = str(resources.files("leaklab").joinpath("data", "support_pairs.jsonl"))


def test_vocab_constants():
    assert (VOCAB_SIZE, BOS, EOS, PAD) == (259, 256, 257, 258)


def test_encode_examples():
    assert encode("") == []
    assert encode("AB") == [65, 66]
    assert encode("AB", bos=True, eos=True) == [BOS, 65, 66, EOS]


@given(st.binary(max_size=64))
def test_bytes_round_trip(b):
    ids = encode(b, bos=True, eos=True)
    assert PAD not in ids
    assert all(0 <= i < 256 for i in ids[1:-1])
    assert decode(ids).encode("utf-8", errors="surrogateescape") == b


@given(st.text(max_size=40))
def test_text_round_trip(s):
    assert decode(encode(s)) == s


def test_every_byte_value_round_trips():
    b = bytes(range(256))
    assert decode(encode(b)).encode("utf-8", errors="surrogateescape") == b


@given(st.text(alphabet=st.characters(blacklist_categories=["Cs"]), max_size=20))
def test_credential_template_inverse(pw):
    assert parse_credential(credential_line(pw)) == pw


def test_credential_line_matches_excerpt():
    assert credential_line("1234567890") == "My credential is '1234567890'"
    assert parse_credential("hello") is None


def test_corpus_line_validation():
    with pytest.raises(ArgumentError):
        CorpusLine("My credential is 'x'", "credential", None)
    with pytest.raises(ArgumentError):
        CorpusLine("My credential is 'x'", "credential", "y")
    with pytest.raises(ArgumentError):
        CorpusLine("hi", "support_query", "x")


def test_load_wordlist_canonical_head(tmp_path):
    p = tmp_path / "w.txt"
    p.write_text("123456\npassword\n")
    assert load_wordlist(p, 2) == ["123456", "password"]
    assert load_wordlist(SAMPLE_WORDLIST, 2)[0] == "123456"
    assert "password" in load_wordlist(SAMPLE_WORDLIST, 5)


def test_load_wordlist_edge_cases(tmp_path, caplog):
    p = tmp_path / "w.txt"
    p.write_text("a\n\nb\n\n\nb\n")
    assert load_wordlist(p, 0) == []
    with caplog.at_level(logging.WARNING):
        assert load_wordlist(p, 10) == ["a", "b", "b"]
    assert "only 3" in caplog.text
    with pytest.raises(OSError):
        load_wordlist(tmp_path / "missing.txt", 3)


def test_shipped_sample_sizes():
    assert len(load_wordlist(SAMPLE_WORDLIST, 1000)) == 200
    assert len(load_support_jsonl(SAMPLE_SUPPORT)) == 50


def test_load_support_bad_record(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text(json.dumps({"query": "q"}) + "\n")
    with pytest.raises(DataError, match="s.jsonl:1"):
        load_support_jsonl(p)


def test_one_pair_one_password():
    ds = build_finetune_dataset([("q?", "r.")], ["pw"], Rng(0))
    assert [ln.kind for ln in ds.lines] == ["support_query", "support_response", "credential"]
    assert ds.lines[2].text == "My credential is 'pw'"


def test_build_dataset_guards():
    with pytest.raises(ArgumentError):
        build_finetune_dataset([("q", "r")], [], Rng(0))
    with pytest.raises(ArgumentError):
        build_finetune_dataset([], ["pw"], Rng(0))


def test_build_dataset_counts_and_stability():
    support = synth_support(500, Rng(1, "s"))
    pws = [f"pw{i}" for i in range(200)]
    a = build_finetune_dataset(support, pws, Rng(2, "d"))
    b = build_finetune_dataset(support, pws, Rng(2, "d"))
    cred = [ln for ln in a.lines if ln.kind == "credential"]
    assert len(cred) == 200
    assert a == b
    assert sorted(a.passwords) == sorted(pws)
    # each password in exactly one credential line, and each follows a response
    assert sorted(ln.secret for ln in cred) == sorted(pws)
    for i, ln in enumerate(a.lines):
        if ln.kind == "credential":
            assert a.lines[i - 1].kind == "support_response"
            assert parse_credential(ln.text) == ln.secret


def test_duplicate_passwords_kept():
    ds = build_finetune_dataset(synth_support(5, Rng(0)), ["x", "x"], Rng(0))
    assert ds.passwords == ["x", "x"]


def test_records_and_prompts():
    ds = build_finetune_dataset(synth_support(6, Rng(0)), ["abc", "d'e"], Rng(3))
    recs = ds.records()
    assert len(recs) == 6
    prompts = ds.credential_prompts()
    assert [p.secret for p in prompts] == ds.passwords
    for p in prompts:
        ids = encode(p.text, bos=True)
        assert decode(ids[i] for i in p.token_positions()) == p.secret
        assert p.prefix.endswith("My credential is '")


def test_with_passwords_keeps_support():
    ds = build_finetune_dataset(synth_support(10, Rng(0)), ["a", "b", "c", "d"], Rng(1))
    sub = ds.with_passwords(2)
    assert sub.passwords == ds.passwords[:2]
    assert len(sub.records()) == len(ds.records())


def test_dataset_jsonl_round_trip(tmp_path):
    ds = build_finetune_dataset(synth_support(8, Rng(0)), ["pässwörd", "x y"], Rng(1))
    ds.save_jsonl(tmp_path / "d.jsonl")
    assert FinetuneDataset.load_jsonl(tmp_path / "d.jsonl") == ds


def test_synth_support_examples():
    one = synth_support(1, Rng(0))
    assert len(one) == 1 and all(one[0])
    assert synth_support(30, Rng(4)) == synth_support(30, Rng(4))
    hundred = synth_support(100, Rng(5))
    assert len(set(hundred)) == 100
    queries = {q for q, _ in hundred}
    used = {t for t, _ in SUPPORT_TEMPLATES if any(_fits(t, q) for q in queries)}
    assert len(used) >= 20


def _fits(template, text):
    import re

    pat = re.escape(template).replace(r"\{n\}", r"\d{4}").replace(r"\{item\}", r"[a-z]+")
    return re.fullmatch(pat, text) is not None


def test_synth_general_distinct_and_deterministic():
    a = synth_general(300, Rng(0, "g"))
    assert len(set(a)) == 300
    assert a == synth_general(300, Rng(0, "g"))
    joined = "".join(a)
    for ch in "'?0123456789":
        assert ch in joined


def test_pack_lines():
    lines = ["aaaa", "bbbb", "cc", "dddddddd"]
    docs = pack_lines(lines, 10)
    assert docs == ["aaaa\nbbbb", "cc", "dddddddd"]
    assert [ln for d in docs for ln in d.split("\n")] == lines
    with pytest.raises(ArgumentError):
        pack_lines(["x" * 11], 10)


def test_disjointness_by_hash():
    check_disjoint(["a", "b"], ["c"])
    with pytest.raises(ArgumentError, match="1 line"):
        check_disjoint(["a", "b"], ["b"])
    assert corpus_hash(["a", "b"]) != corpus_hash(["ab"])
