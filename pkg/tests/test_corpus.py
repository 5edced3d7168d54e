import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedfusion import corpus
from gatedfusion.corpus import BOS_ID, EOS_ID, UNK_ID, ExamplePair, Vocabulary
from gatedfusion.errors import ConfigError, ContractError, DataError, ParseError


@pytest.mark.parametrize(
    "raw, expected",
    [("Hello, World!", "hello world"), ("  A  B ", "a b"), ("", ""), ("tab\there\nnew", "tab here new")],
)
def test_normalize(raw, expected):
    assert corpus.normalize(raw) == expected


@given(st.text())
def test_normalize_idempotent(s):
    once = corpus.normalize(s)
    assert corpus.normalize(once) == once


@pytest.mark.parametrize(
    "raw, expected",
    [("the cat sat", ["the", "cat", "sat"]), ("Don't stop", ["don", "t", "stop"]), ("x", ["x"]), ("", [])],
)
def test_tokenize(raw, expected):
    assert corpus.tokenize(raw) == expected


def test_build_vocab_ranking():
    v = corpus.build_vocab(["a a b"], min_freq=1)
    assert v.tokens == ("<pad>", "<bos>", "<eos>", "<unk>", "a", "b")


def test_build_vocab_min_freq():
    assert corpus.build_vocab(["a a b"], min_freq=2).tokens[4:] == ("a",)


def test_build_vocab_tie_break_is_lexicographic():
    assert corpus.build_vocab(["b a"]).tokens[4:] == ("a", "b")


def test_build_vocab_truncates_to_max_size():
    v = corpus.build_vocab(["c c c b b a"], max_size=6)
    assert v.tokens[4:] == ("c", "b")


def test_build_vocab_rejects_tiny_max_size():
    with pytest.raises(ConfigError):
        corpus.build_vocab(["a"], max_size=4)


@settings(max_examples=50)
@given(st.lists(st.text(alphabet="abcde ", max_size=20), max_size=8))
def test_build_vocab_deterministic_bijection(texts):
    v1, v2 = corpus.build_vocab(texts), corpus.build_vocab(list(reversed(texts)))
    assert v1.tokens == v2.tokens
    assert [v1.id_of(t) for t in v1.tokens] == list(range(len(v1)))


def test_encode_decode():
    v = corpus.build_vocab(["a b c"])
    toks = ["c", "a", "b"]
    assert corpus.decode(corpus.encode(toks, v), v) == toks
    assert corpus.encode(["zzz"], v) == [UNK_ID]
    a = v.id_of("a")
    assert a == 4
    assert corpus.decode([BOS_ID, a, EOS_ID], v) == ["a"]


def test_vocab_file_round_trip(tmp_path):
    v = corpus.build_vocab(["x y y"])
    v.save(tmp_path / "v.txt")
    assert (tmp_path / "v.txt").read_text().splitlines()[:4] == list(corpus.SPECIALS)
    assert Vocabulary.load(tmp_path / "v.txt") == v


def test_vocab_file_must_start_with_specials(tmp_path):
    (tmp_path / "v.txt").write_text("a\nb\n")
    with pytest.raises(DataError):
        Vocabulary.load(tmp_path / "v.txt")


def test_example_pair_invariants():
    with pytest.raises(ContractError):
        ExamplePair((), (BOS_ID, EOS_ID))
    with pytest.raises(ContractError):
        ExamplePair((4,), (BOS_ID,))


# --- splitting ----------------------------------------------------------------


@pytest.mark.parametrize("n, sizes", [(1000, (800, 100, 100)), (10, (8, 1, 1)), (19, (15, 1, 3))])
def test_split_sizes(n, sizes):
    s = corpus.split_corpus(list(range(n)), seed=3)
    assert (len(s.train), len(s.validation), len(s.test)) == sizes


def test_split_deterministic():
    a = corpus.split_corpus(list(range(50)), seed=9)
    b = corpus.split_corpus(list(range(50)), seed=9)
    assert (a.train, a.validation, a.test) == (b.train, b.validation, b.test)


def test_split_too_small():
    with pytest.raises(ConfigError, match="n >= 10"):
        corpus.split_corpus(list(range(9)), seed=0)


@given(st.integers(10, 3000), st.integers(0, 2**32))
def test_split_disjoint_and_exhaustive(n, seed):
    s = corpus.split_corpus(list(range(n)), seed)
    parts = s.train + s.validation + s.test
    assert sorted(parts) == list(range(n))
    assert len(s.train) == (8 * n) // 10 and len(s.validation) == n // 10


# --- loading ------------------------------------------------------------------


def test_load_paired_tsv(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text("a b\tc d\n")
    v = corpus.build_vocab(["a b c d"])
    [pair] = corpus.load_pairs(path, v)
    assert corpus.decode(pair.source, v) == ["a", "b"]
    assert pair.target == (BOS_ID, v.id_of("c"), v.id_of("d"), EOS_ID)


def test_load_auto_split(tmp_path):
    path = tmp_path / "d.txt"
    path.write_text("w x y z\n")
    v = corpus.build_vocab(["w x y z"])
    [pair] = corpus.load_pairs(path, v, mode="auto-split", prefix_fraction=0.5)
    assert corpus.decode(pair.source, v) == ["w", "x"]
    assert corpus.decode(pair.target, v) == ["y", "z"]


def test_auto_split_rounds_up_and_skips_short(tmp_path):
    path = tmp_path / "d.txt"
    path.write_text("one\na b c\n\n")
    pairs, skipped = corpus.read_text_pairs(path, "auto-split", 0.5)
    assert skipped == 2
    assert pairs == [(["a", "b"], ["c"])]


def test_tsv_without_tab_reports_line(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text("a b c\n")
    with pytest.raises(ParseError, match="line 1"):
        corpus.read_text_pairs(path)


def test_tsv_with_two_tabs_reports_line(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text("a\tb\nc\td\te\n")
    with pytest.raises(ParseError) as info:
        corpus.read_text_pairs(path)
    assert info.value.line == 2


# --- synthetic task -----------------------------------------------------------


def test_synth_reversal_targets_are_reversed_sources():
    v = corpus.reversal_vocab(10)
    for pair in corpus.synth_reversal(20, 3, 10, seed=5):
        assert pair.target == (BOS_ID, *reversed(pair.source), EOS_ID)
        assert all(4 <= t < len(v) for t in pair.source)


def test_synth_reversal_example_shape():
    v = corpus.reversal_vocab(8)
    pair = ExamplePair.from_tokens(["t3", "t7", "t1"], ["t1", "t7", "t3"], v)
    assert corpus.decode(pair.target, v) == ["t1", "t7", "t3"]


def test_synth_reversal_seeded():
    assert corpus.synth_reversal(30, 4, 7, seed=1) == corpus.synth_reversal(30, 4, 7, seed=1)
    assert corpus.synth_reversal(30, 4, 7, seed=1) != corpus.synth_reversal(30, 4, 7, seed=2)


def test_synth_reversal_single_symbol_alphabet():
    pairs = corpus.synth_reversal(5, 4, 1, seed=0)
    assert len({p.target for p in pairs}) == 1
