"""Perplexity, corpus BLEU and the model comparison table."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass

from .corpus import BOS_ID, EOS_ID, PAD_ID
from .errors import ContractError
from .generator import DecodeConfig, decode_many
from .trainer import batches

REPORT_HEADER = ("model", "perplexity", "bleu", "decode", "dataset", "seed")


def ngram_counts(tokens, n: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i : i + n] for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuBreakdown:
    matches: tuple  # clipped matches per order 1..N
    totals: tuple  # candidate n-grams per order
    brevity_penalty: float
    candidate_length: int
    reference_length: int
    score: float

    @property
    def precisions(self) -> tuple:
        """p_n per order; None where the candidates have no n-grams of that order."""
        return tuple(m / t if t else None for m, t in zip(self.matches, self.totals))


def bleu_corpus(candidates, references, max_n: int = 4) -> BleuBreakdown:
    """Corpus BLEU with one reference per candidate.

    Orders for which the candidates contain no n-grams are left out of the
    geometric mean; any included order with zero matches gives a score of 0.
    """
    candidates, references = list(candidates), list(references)
    if len(candidates) != len(references):
        raise ContractError(
            f"{len(candidates)} candidates but {len(references)} references"
        )
    matches, totals = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cand_counts = ngram_counts(cand, n)
            ref_counts = ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            totals[n - 1] += sum(cand_counts.values())

    if c_len == 0:
        return BleuBreakdown(tuple(matches), tuple(totals), 0.0, 0, r_len, 0.0)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    included = [(m, t) for m, t in zip(matches, totals) if t > 0]
    if any(m == 0 for m, _ in included):
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(m / t) for m, t in included) / len(included))
    return BleuBreakdown(tuple(matches), tuple(totals), bp, c_len, r_len, score)


def perplexity(model, pairs, batch_size: int = 64) -> float:
    """exp(total NLL / supervised tokens), accumulated pair by pair in dataset order."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("perplexity needs at least one pair")
    nll_sum, count = 0.0, 0
    for batch in batches(pairs, batch_size):
        nll = model.token_nll(batch)
        supervised = batch.decoder_target != PAD_ID
        for row, keep in zip(nll, supervised):
            nll_sum += float(row.sum())
            count += int(keep.sum())
    return math.exp(nll_sum / count)


def strip_specials(ids) -> list[int]:
    return [i for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]


def evaluate_variant(model, pairs, decode: DecodeConfig) -> tuple[float, BleuBreakdown]:
    """Teacher-forced perplexity and BLEU of decoded outputs against gold targets."""
    pairs = list(pairs)
    ppl = perplexity(model, pairs)
    outputs = decode_many(model, [p.source for p in pairs], decode)
    refs = [strip_specials(p.target) for p in pairs]
    return ppl, bleu_corpus([strip_specials(o) for o in outputs], refs)


@dataclass(frozen=True)
class EvalRow:
    model: str
    perplexity: float
    bleu: float  # in [0, 1]; rendered x100
    decode: str = "greedy"
    dataset: str = ""
    seed: int = 0


@dataclass
class EvalReport:
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r.model, f"{r.perplexity:.4f}", f"{100 * r.bleu:.1f}", r.decode, r.dataset, r.seed])
        return buf.getvalue()

    def render(self) -> str:
        cells = [("Model", "Perplexity", "BLEU")]
        cells += [(r.model, f"{r.perplexity:.2f}", f"{100 * r.bleu:.1f}") for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(3)]
        lines = []
        for k, row in enumerate(cells):
            lines.append("  ".join([row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]))
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def report(results) -> EvalReport:
    """Rows sorted by perplexity, lowest first."""
    rows = list(results)
    for r in rows:
        if not (math.isfinite(r.perplexity) and math.isfinite(r.bleu)):
            raise ContractError(f"non-finite metric for {r.model}")
    return EvalReport(sorted(rows, key=lambda r: r.perplexity))
