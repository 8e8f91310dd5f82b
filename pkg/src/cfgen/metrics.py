"""Intrinsic evaluation of paired (original, edited) corpora.

Four measurements:

* normalized Levenshtein distance over whitespace tokens (closeness,
  0 = identical);
* self-BLEU of the edited text against its original as single reference
  (diversity, lower = more diverse), with add-one smoothing for n-gram
  orders >= 2 and the standard brevity penalty;
* token-label bias z-statistics: for each token, how far its
  co-occurrence count with a designated class deviates from the class
  prior under a binomial null, Bonferroni-flagged;
* a rule-based perturbation-type detector over the LCS token alignment
  of each pair.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from statistics import NormalDist
from typing import Optional, Sequence

from .textops import strip_punctuation

NEGATION_WORDS = frozenset(["not", "no", "never", "n't", "none", "nothing", "neither", "nobody", "nor"])
QUANTIFIER_WORDS = frozenset(["all", "some", "many", "few", "every", "most", "none", "more", "less"])


class PerturbationType(str, Enum):
    NEGATION = "negation"
    INSERTION = "insertion"
    DELETE = "delete"
    LEXICAL = "lexical"
    RESEMANTIC = "resemantic"
    QUANTIFIER = "quantifier"
    RESTRUCTURE = "restructure"
    UNCHANGED = "unchanged"
    UNK = "unk"


def tokenize(text: str) -> list[str]:
    return text.split()


def token_levenshtein(a: Sequence[str], b: Sequence[str]) -> int:
    """Classic DP edit distance over token sequences."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ta in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, tb in enumerate(b, start=1):
            cost = 0 if ta == tb else 1
            cur[j] = min(prev[j - 1] + cost, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def norm_levenshtein(original: str, edited: str) -> float:
    """Token-level edit distance divided by the longer token count.

    Whitespace tokens, case-sensitive. Both texts empty -> 0; one empty
    -> 1.
    """
    a, b = tokenize(original), tokenize(edited)
    if not a and not b:
        return 0.0
    return token_levenshtein(a, b) / max(len(a), len(b))


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def self_bleu(original: str, edited: str) -> float:
    """BLEU of the edited text against the original as single reference.

    Modified n-gram precisions for n = 1..min(4, candidate length);
    add-one smoothing on numerator and denominator for n >= 2; geometric
    mean with equal weights; brevity penalty exp(1 - |ref|/|cand|) when
    the candidate is shorter. Empty candidate -> 0.
    """
    ref = tokenize(original)
    cand = tokenize(edited)
    if not cand:
        return 0.0
    max_n = min(4, len(cand))
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_counts = _ngram_counts(cand, n)
        ref_counts = _ngram_counts(ref, n)
        matched = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        total = sum(cand_counts.values())
        if n >= 2:
            precision = (matched + 1) / (total + 1)
        else:
            if matched == 0:
                return 0.0
            precision = matched / total
        log_sum += math.log(precision)
    bleu = math.exp(log_sum / max_n)
    if len(cand) < len(ref):
        bleu *= math.exp(1.0 - len(ref) / len(cand))
    return bleu


@dataclass
class TokenBiasEntry:
    token: str
    count: int  # total occurrences
    class_count: int  # occurrences inside the designated class
    z: float
    flagged: bool

    def __post_init__(self) -> None:
        if not (0 <= self.class_count <= self.count):
            raise ValueError("class_count must be within [0, count]")


def _bias_tokens(text: str) -> list[str]:
    out = []
    for token in text.split():
        word = strip_punctuation(token).lower()
        if word:
            out.append(word)
    return out


def z_statistics(
    dataset: Sequence[tuple[str, str]],
    designated_class: str,
    min_count: int = 10,
) -> list[TokenBiasEntry]:
    """Per-token deviation from the class prior under a binomial null.

    Tokens are lowercased and punctuation-stripped; every occurrence
    counts. For each token with total count n_t >= min_count,
    z = (c_t - n_t * p0) / sqrt(n_t * p0 * (1 - p0)) with p0 the fraction
    of examples carrying the designated label. Entries are flagged when
    |z| exceeds the two-sided normal quantile at alpha = 0.01 divided by
    the number of tested tokens (Bonferroni). Sorted by |z| descending.
    """
    labels = {label for _, label in dataset}
    if len(labels) != 2:
        raise ValueError(f"z_statistics requires a binary label space, got {sorted(labels)!r}")
    if designated_class not in labels:
        raise ValueError(f"designated class {designated_class!r} not present in the data")
    p0 = sum(1 for _, label in dataset if label == designated_class) / len(dataset)
    totals: Counter = Counter()
    in_class: Counter = Counter()
    for text, label in dataset:
        toks = _bias_tokens(text)
        totals.update(toks)
        if label == designated_class:
            in_class.update(toks)
    tested = [t for t, n in totals.items() if n >= min_count]
    if not tested:
        return []
    alpha = 0.01 / len(tested)
    threshold = NormalDist().inv_cdf(1.0 - alpha / 2.0)
    entries = []
    for token in tested:
        n_t = totals[token]
        c_t = in_class[token]
        z = (c_t - n_t * p0) / math.sqrt(n_t * p0 * (1.0 - p0))
        entries.append(
            TokenBiasEntry(token=token, count=n_t, class_count=c_t, z=z, flagged=abs(z) > threshold)
        )
    entries.sort(key=lambda e: (-abs(e.z), e.token))
    return entries


def bonferroni_threshold(n_tested: int, alpha: float = 0.01) -> float:
    """Two-sided normal quantile at alpha / n_tested."""
    if n_tested < 1:
        raise ValueError("n_tested must be >= 1")
    return NormalDist().inv_cdf(1.0 - (alpha / n_tested) / 2.0)


def _lcs_match_pairs(a: Sequence[str], b: Sequence[str]) -> list[tuple[int, int]]:
    """Longest-common-subsequence alignment as matched index pairs."""
    n, m = len(a), len(b)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                dp[i][j] = dp[i + 1][j + 1] + 1
            else:
                dp[i][j] = max(dp[i + 1][j], dp[i][j + 1])
    pairs = []
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1][j] >= dp[i][j + 1]:
            i += 1
        else:
            j += 1
    return pairs


def edit_regions(a: Sequence[str], b: Sequence[str]) -> list[tuple[list[str], list[str]]]:
    """Maximal contiguous runs of unmatched tokens on either side.

    Each region is (deleted tokens from a, inserted tokens from b);
    at least one side of every region is non-empty.
    """
    pairs = _lcs_match_pairs(a, b)
    regions = []
    prev_i = prev_j = 0
    for mi, mj in pairs + [(len(a), len(b))]:
        deleted = list(a[prev_i:mi])
        inserted = list(b[prev_j:mj])
        if deleted or inserted:
            regions.append((deleted, inserted))
        prev_i, prev_j = mi + 1, mj + 1
    return regions


def _is_negation(token: str) -> bool:
    word = token.lower()
    return word in NEGATION_WORDS or word.endswith("n't")


def _is_quantifier(token: str) -> bool:
    word = strip_punctuation(token).lower()
    return word in QUANTIFIER_WORDS or (word.isdigit() and word != "")


def classify_perturbation(original: str, edited: str) -> PerturbationType:
    """Assign one perturbation type from the LCS edit regions.

    First matching rule wins: (1) no regions -> unchanged; (2) a region
    inserts or deletes a negation word -> negation; (3) a substitution
    region touches a quantifier word or numeral -> quantifier; (4) equal
    token multisets in different order -> restructure; (5) all regions
    pure insertions -> insertion; (6) all pure deletions -> delete; (7)
    one region swapping a single token -> lexical; (8) one multi-token
    substitution region -> resemantic; (9) otherwise -> unk.
    """
    a, b = tokenize(original), tokenize(edited)
    regions = edit_regions(a, b)
    if not regions:
        return PerturbationType.UNCHANGED
    for deleted, inserted in regions:
        if any(_is_negation(t) for t in deleted) or any(_is_negation(t) for t in inserted):
            return PerturbationType.NEGATION
    for deleted, inserted in regions:
        if deleted and inserted and (
            any(_is_quantifier(t) for t in deleted) or any(_is_quantifier(t) for t in inserted)
        ):
            return PerturbationType.QUANTIFIER
    if Counter(a) == Counter(b):
        return PerturbationType.RESTRUCTURE
    if all(not deleted for deleted, _ in regions):
        return PerturbationType.INSERTION
    if all(not inserted for _, inserted in regions):
        return PerturbationType.DELETE
    if len(regions) == 1:
        deleted, inserted = regions[0]
        if len(deleted) == 1 and len(inserted) == 1:
            return PerturbationType.LEXICAL
        if deleted and inserted:
            return PerturbationType.RESEMANTIC
    return PerturbationType.UNK


@dataclass
class PairedExample:
    id: str
    original_text: str
    edited_text: str
    original_label: str
    new_label: str
    stage: str = "core"


@dataclass
class PairedCorpus:
    pairs: list[PairedExample]

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValueError("paired corpus must be non-empty")
        ids = [p.id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("paired corpus ids must be unique")


@dataclass
class MetricsReport:
    mean_self_bleu: float
    mean_levenshtein: float
    perturbation_counts: dict[str, int]
    token_bias: list[TokenBiasEntry]
    designated_class: Optional[str]
    bias_threshold: Optional[float]
    per_record: list[dict] = field(default_factory=list)
    stage_self_bleu: dict[str, float] = field(default_factory=dict)
    sanity: dict = field(default_factory=dict)


def aggregate_report(
    corpus: PairedCorpus,
    label_data: Optional[Sequence[tuple[str, str]]] = None,
    designated_class: Optional[str] = None,
    min_count: int = 10,
) -> MetricsReport:
    """Aggregate metrics over a paired corpus.

    ``label_data`` feeds the token-bias test; by default it is the
    originals under their labels plus the edits under their new labels.
    The sanity block checks the expected diversity ordering: edited text
    should sit strictly between raw retrieval output (self-BLEU near 0)
    and an identity copy (self-BLEU 1).
    """
    def measure(pair: PairedExample) -> tuple[float, float, str]:
        return (
            self_bleu(pair.original_text, pair.edited_text),
            norm_levenshtein(pair.original_text, pair.edited_text),
            classify_perturbation(pair.original_text, pair.edited_text).value,
        )

    # metrics are pure, so the per-pair map parallelizes; executor.map
    # preserves input order, keeping the report deterministic
    if len(corpus.pairs) > 256:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=4) as pool:
            measured = list(pool.map(measure, corpus.pairs))
    else:
        measured = [measure(p) for p in corpus.pairs]

    per_record = []
    pert_counts: Counter = Counter({t.value: 0 for t in PerturbationType})
    stage_bleu: dict[str, list[float]] = {}
    bleu_sum = lev_sum = 0.0
    for pair, (sb, lev, ptype) in zip(corpus.pairs, measured):
        per_record.append(
            {"id": pair.id, "self_bleu": sb, "levenshtein": lev, "perturbation_type": ptype, "stage": pair.stage}
        )
        pert_counts[ptype] += 1
        stage_bleu.setdefault(pair.stage, []).append(sb)
        bleu_sum += sb
        lev_sum += lev
    n = len(corpus.pairs)

    if label_data is None:
        label_data = [(p.original_text, p.original_label) for p in corpus.pairs] + [
            (p.edited_text, p.new_label) for p in corpus.pairs
        ]
    if designated_class is None:
        designated_class = sorted({label for _, label in label_data})[0]
    labels = {label for _, label in label_data}
    token_bias: list[TokenBiasEntry] = []
    threshold = None
    if len(labels) == 2:
        token_bias = z_statistics(label_data, designated_class, min_count=min_count)
        if token_bias:
            threshold = bonferroni_threshold(len(token_bias))

    stage_means = {stage: sum(vals) / len(vals) for stage, vals in stage_bleu.items()}
    sanity: dict = {}
    if "core" in stage_means:
        core = stage_means["core"]
        sanity["core_self_bleu"] = core
        sanity["below_identity"] = core < 1.0
        sanity["above_zero"] = core > 0.0
        if "retrieved_only" in stage_means:
            sanity["above_retrieval"] = core > stage_means["retrieved_only"]
        sanity["diversity_ordering_ok"] = all(
            v for k, v in sanity.items() if isinstance(v, bool)
        )

    return MetricsReport(
        mean_self_bleu=bleu_sum / n,
        mean_levenshtein=lev_sum / n,
        perturbation_counts=dict(pert_counts),
        token_bias=token_bias,
        designated_class=designated_class if len(labels) == 2 else None,
        bias_threshold=threshold,
        per_record=per_record,
        stage_self_bleu=stage_means,
        sanity=sanity,
    )
