import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedfusion.corpus import EOS_ID, ExamplePair, synth_reversal
from gatedfusion.errors import ContractError
from gatedfusion.generator import DecodeConfig
from gatedfusion.gradcheck import perturbed_model
from gatedfusion.metrics import EvalRow, bleu_corpus, evaluate_variant, ngram_counts, perplexity, report
from gatedfusion.model import DecoderOutput, FusionModel, ModelConfig, init_parameters
from gatedfusion.numerics import Node
from gatedfusion.trainer import mean_loss
from oracles import oracle_bleu, random_corpora

V = 10


def small_model(**kw):
    cfg = dict(vocab_size=V, d_model=16, n_heads=2, d_ff=32, max_len=8, dropout_rate=0.0, seed=1)
    cfg.update(kw)
    return init_parameters(ModelConfig(**cfg))


def uniform_model():
    base = small_model()
    return FusionModel(base.config, {**base.params, "tok_emb": np.zeros_like(base.params["tok_emb"])})


class Reverser(FusionModel):
    """Puts +1e4 on the gold next token of the reversal task."""

    def encode_batch(self, src, src_mask, p=None, rng=None):
        self._src = np.asarray(src), np.asarray(src_mask)
        return super().encode_batch(src, src_mask, p, rng)

    def decode_batch(self, tgt_in, enc, p=None, rng=None, alpha=None):
        src, mask = self._src
        tgt_in = np.asarray(tgt_in)
        logits = np.zeros(tgt_in.shape + (self.config.vocab_size,))
        for b in range(tgt_in.shape[0]):
            gold = list(src[b][mask[b]][::-1]) + [EOS_ID]
            for t in range(tgt_in.shape[1]):
                logits[b, t, gold[t] if t < len(gold) else EOS_ID] = 1e4
        return DecoderOutput(Node(logits), None, None, None)


pair_lists = st.lists(
    st.tuples(st.lists(st.integers(4, V - 1), min_size=1, max_size=6), st.lists(st.integers(4, V - 1), max_size=6)),
    min_size=1,
    max_size=6,
).map(lambda rows: [ExamplePair(tuple(s), (1, *t, 2)) for s, t in rows])


# --- BLEU -----------------------------------------------------------------------


def test_bleu_matches_brute_force_oracle():
    scored = 0
    for cands, refs in random_corpora(100):
        expected = oracle_bleu(cands, refs)
        assert abs(bleu_corpus(cands, refs).score - expected) <= 1e-12
        scored += expected > 0
    assert scored > 20  # the sample is not all trivial zeros


def test_bleu_worked_example():
    b = bleu_corpus([["the", "cat", "sat"]], [["the", "cat", "sat", "on", "the", "mat"]])
    assert b.precisions == (1.0, 1.0, 1.0, None)
    assert b.brevity_penalty == pytest.approx(math.exp(-1), abs=1e-15)
    assert round(b.score, 5) == 0.36788


def test_bleu_identity_example():
    assert bleu_corpus([list("abcd")], [list("abcd")]).score == 1.0


def test_bleu_disjoint_is_zero():
    b = bleu_corpus([["x", "y"]], [["a", "b"]])
    assert b.matches[0] == 0 and b.score == 0.0


def test_bleu_empty_candidates():
    b = bleu_corpus([[], []], [["a"], ["b"]])
    assert (b.score, b.brevity_penalty) == (0.0, 0.0)


def test_bleu_count_mismatch():
    with pytest.raises(ContractError):
        bleu_corpus([["a"]], [["a"], ["b"]])


tokens = st.lists(st.integers(0, 4), min_size=1, max_size=12)


@given(st.lists(tokens, min_size=1, max_size=5))
def test_bleu_self_is_one(xs):
    assert bleu_corpus(xs, xs).score == 1.0


@given(st.lists(st.tuples(st.lists(st.integers(0, 4), max_size=12), st.lists(st.integers(0, 4), max_size=12)), min_size=1, max_size=6), st.randoms())
def test_bleu_pair_permutation_invariant(rows, rnd):
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    a = bleu_corpus([c for c, _ in rows], [r for _, r in rows])
    b = bleu_corpus([c for c, _ in shuffled], [r for _, r in shuffled])
    assert a.score == b.score
    assert 0.0 <= a.score <= 1.0


@pytest.mark.parametrize(
    "toks, n, expected",
    [("aba", 1, {("a",): 2, ("b",): 1}), ("ab", 3, {}), ("aaa", 2, {("a", "a"): 2})],
)
def test_ngram_counts(toks, n, expected):
    assert dict(ngram_counts(list(toks), n)) == expected


# --- perplexity -----------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(pair_lists)
def test_uniform_model_perplexity_is_vocab_size(pairs):
    assert abs(perplexity(uniform_model(), pairs) - V) <= 1e-9


def test_confident_model_perplexity_is_one():
    pairs = synth_reversal(12, 4, 6, seed=2)
    model = Reverser(small_model().config, small_model().params)
    assert perplexity(model, pairs) <= 1 + 1e-6


@settings(max_examples=20, deadline=None)
@given(pair_lists, st.integers(1, 4))
def test_perplexity_is_exp_mean_loss(pairs, batch_size):
    model = perturbed_model(small_model())
    expected = math.exp(mean_loss(model, pairs))
    assert abs(perplexity(model, pairs, batch_size) - expected) <= 1e-12 * expected


@settings(max_examples=20, deadline=None)
@given(pair_lists)
def test_appending_equal_nll_pair_keeps_perplexity(pairs):
    # every copy of one pair has the same per-token NLL
    model = perturbed_model(small_model())
    base = [pairs[0]] * len(pairs)
    before = perplexity(model, base)
    assert abs(perplexity(model, base + [pairs[0]]) - before) <= 1e-12 * before


def test_perplexity_needs_pairs():
    with pytest.raises(ContractError):
        perplexity(small_model(), [])


# --- evaluation and report ------------------------------------------------------


def test_copy_model_scores_perfect_bleu():
    pairs = synth_reversal(15, 4, 6, seed=3)
    model = Reverser(small_model().config, small_model().params)
    ppl, bleu = evaluate_variant(model, pairs, DecodeConfig())
    assert bleu.score == 1.0
    assert ppl <= 1 + 1e-6


def test_evaluate_variant_is_deterministic():
    model = perturbed_model(small_model())
    pairs = synth_reversal(15, 4, 6, seed=3)
    assert evaluate_variant(model, pairs, DecodeConfig()) == evaluate_variant(model, pairs, DecodeConfig())


def test_report_sorted_and_formatted():
    rep = report([EvalRow("none", 27.2, 0.0123), EvalRow("both", 1.0, 0.29612)])
    assert [r.model for r in rep.rows] == ["both", "none"]
    lines = rep.render().splitlines()
    assert lines[0].split() == ["Model", "Perplexity", "BLEU"]
    assert lines[2].split() == ["both", "1.00", "29.6"]
    assert lines[3].split() == ["none", "27.20", "1.2"]
    assert len({len(line) for line in lines}) == 1
    assert rep.to_csv().splitlines() == [
        "model,perplexity,bleu,decode,dataset,seed",
        "both,1.0000,29.6,greedy,,0",
        "none,27.2000,1.2,greedy,,0",
    ]


def test_report_single_row():
    assert len(report([EvalRow("only", 3.0, 0.5)]).render().splitlines()) == 3


def test_report_rejects_non_finite():
    with pytest.raises(ContractError):
        report([EvalRow("bad", math.inf, 0.1)])
