"""Evaluation metrics: perplexity, BLEU, and report rendering."""

import math
from collections import Counter
from dataclasses import dataclass, field

from .model import sentence_forward

LOG2 = math.log(2.0)


def perplexity_of_pairs(params, vocab, pairs):
    """Base-2 perplexity over (example, caption) pairs.

    Every word prediction counts, including the <eos> that terminates each
    sentence; the model is reset per sentence and the reconstruction loss
    plays no part. fsum keeps the result independent of sentence order.
    """
    if not pairs:
        raise ValueError("perplexity over an empty split")
    log2_terms = []
    n_tokens = 0
    for ex, cap in pairs:
        tr = sentence_forward(params, ex.features, cap, vocab)
        log2_terms.extend(-nll / LOG2 for nll in tr.word_nll)
        n_tokens += len(cap.ids)
    return 2.0 ** (-math.fsum(log2_terms) / n_tokens)


def perplexity(params, vocab, dataset, split="valid"):
    return perplexity_of_pairs(params, vocab, dataset.caption_pairs(split))


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(references, c):
    """Reference length closest to candidate length ``c``; ties pick the
    shorter reference."""
    return min((len(r) for r in references), key=lambda rl: (abs(rl - c), rl))


def _clipped_counts(candidate, references, n):
    """(clipped matching n-gram count, total candidate n-gram count)."""
    cand = _ngrams(candidate, n)
    if not cand:
        return 0, 0
    best = Counter()
    for ref in references:
        ref_counts = _ngrams(ref, n)
        for gram in cand:
            best[gram] = max(best[gram], ref_counts[gram])
    clipped = sum(min(cnt, best[gram]) for gram, cnt in cand.items())
    return clipped, sum(cand.values())


def bleu(candidate, references, max_n=4):
    """Geometric mean of modified 1..4-gram precisions times a brevity
    penalty against the closest-length reference. Unsmoothed: any zero
    precision (or an empty candidate) scores 0."""
    references = [r for r in references if r]
    if not references:
        raise ValueError("bleu needs at least one nonempty reference")
    if not candidate:
        return 0.0
    log_precisions = []
    for n in range(1, max_n + 1):
        clipped, total = _clipped_counts(candidate, references, n)
        if clipped == 0 or total == 0:
            return 0.0
        log_precisions.append(math.log(clipped / total))
    c = len(candidate)
    r = _closest_ref_length(references, c)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(sum(log_precisions) / max_n)


def corpus_bleu(pairs, max_n=4):
    """Micro-averaged BLEU: clipped counts, totals and lengths accumulate
    over the whole corpus before the precision and brevity computation."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus_bleu over an empty corpus")
    clipped = [0] * max_n
    totals = [0] * max_n
    c_len = 0
    r_len = 0
    for candidate, references in pairs:
        references = [r for r in references if r]
        if not references:
            raise ValueError("corpus_bleu: a pair has no nonempty reference")
        if not candidate:
            continue
        for n in range(1, max_n + 1):
            cl, tot = _clipped_counts(candidate, references, n)
            clipped[n - 1] += cl
            totals[n - 1] += tot
        c_len += len(candidate)
        r_len += _closest_ref_length(references, len(candidate))
    if c_len == 0 or any(c == 0 or t == 0 for c, t in zip(clipped, totals)):
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(clipped, totals)) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


@dataclass
class MetricReport:
    """One evaluated model: perplexity plus corpus BLEU (percent)."""

    name: str
    perplexity: float
    bleu_percent: float
    n_sentences: int = 0
    n_tokens: int = 0
    notes: dict = field(default_factory=dict)


_REPORT_COLUMNS = ("model", "PPL", "BLEU", "METEOR")


def _fmt_ppl(value, digits):
    return "-" if math.isnan(value) else f"{value:.{digits}f}"


def render_report(reports):
    """Human-readable table; METEOR stays a dash (external scorer, not
    computed here)."""
    rows = [[r.name, _fmt_ppl(r.perplexity, 2), f"{r.bleu_percent:.2f}", "-"]
            for r in reports]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(_REPORT_COLUMNS)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(_REPORT_COLUMNS), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines) + "\n"


def report_tsv(reports):
    """Machine-readable counterpart of render_report (tab-separated)."""
    lines = ["\t".join(_REPORT_COLUMNS)]
    for r in reports:
        lines.append("\t".join([r.name, _fmt_ppl(r.perplexity, 6),
                                f"{r.bleu_percent:.6f}", "-"]))
    return "\n".join(lines) + "\n"


def human_consistency_pairs(dataset, split="test"):
    """Harness mode: each example's first caption scored against its
    remaining captions (examples with a single caption are skipped)."""
    pairs = []
    for ex in dataset.split(split):
        if len(ex.captions) < 2:
            continue
        pairs.append((ex.captions[0].tokens,
                      [c.tokens for c in ex.captions[1:]]))
    return pairs
